//! Conflict-aware gradient projection for the generator step.
//!
//! The trainer computes the payload-loss gradient first, then the generator
//! gradient. When the two oppose each other (negative inner product), the
//! generator gradient is projected onto the halfspace where the payload loss
//! does not increase to first order:
//!
//! ```text
//! g~ = g_gen - (g_gen . g_wm / g_wm . g_wm) g_wm    when g_gen . g_wm < 0
//! ```
//!
//! Both gradients are treated as one flat vector over all trainable generator
//! parameters in a declared order; agreement is a bitwise no-op.

use ndarray::{Array1, ArrayD};

use crate::nn::{GradStore, ParamId, ParamStore};
use crate::{Error, Result};

/// Ordered parameter list that fixes the flattening of gradient vectors.
#[derive(Clone, Debug)]
pub struct GradientLayout {
    entries: Vec<(ParamId, String, Vec<usize>)>,
    total: usize,
}

impl GradientLayout {
    /// Snapshot names and shapes for `ids` in the given order.
    pub fn from_params(store: &ParamStore, ids: &[ParamId]) -> Self {
        let entries: Vec<(ParamId, String, Vec<usize>)> = ids
            .iter()
            .map(|&id| {
                let meta = store.meta(id);
                (id, meta.name.clone(), meta.shape.clone())
            })
            .collect();
        let total = entries.iter().map(|(_, _, s)| s.iter().product::<usize>()).sum();
        Self { entries, total }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[(ParamId, String, Vec<usize>)] {
        &self.entries
    }

    /// Layout identity ignores ids: two stores agree when names and shapes
    /// line up in the same order.
    pub fn matches(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((_, an, ash), (_, bn, bsh))| an == bn && ash == bsh)
    }
}

/// Flat gradient over a declared parameter layout.
#[derive(Clone, Debug)]
pub struct GradientVector {
    pub values: Array1<f32>,
    pub layout: GradientLayout,
}

/// Concatenate recorded gradients in layout order.
pub fn flatten_gradients(grads: &GradStore, layout: &GradientLayout) -> Result<GradientVector> {
    let mut values = Vec::with_capacity(layout.total_len());
    for (id, name, shape) in &layout.entries {
        let g = grads
            .get(*id)
            .ok_or_else(|| Error::Layout(format!("no gradient recorded for {name}")))?;
        if g.shape() != shape.as_slice() {
            return Err(Error::Layout(format!(
                "gradient for {name} has shape {:?}, layout declares {shape:?}",
                g.shape()
            )));
        }
        values.extend(g.iter().copied());
    }
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "gradient vector entry {pos} is not finite"
        )));
    }
    Ok(GradientVector { values: Array1::from_vec(values), layout: layout.clone() })
}

/// Split a flat vector back into per-parameter arrays, in layout order.
pub fn unflatten(vector: &GradientVector) -> Vec<(ParamId, ArrayD<f32>)> {
    let mut out = Vec::with_capacity(vector.layout.entries.len());
    let mut offset = 0;
    for (id, _, shape) in &vector.layout.entries {
        let n: usize = shape.iter().product();
        let chunk = vector.values.slice(ndarray::s![offset..offset + n]).to_vec();
        out.push((*id, ArrayD::from_shape_vec(shape.clone(), chunk).unwrap()));
        offset += n;
    }
    out
}

/// Write a flat vector back into a gradient store, replacing pending values.
pub fn unflatten_into(grads: &mut GradStore, vector: &GradientVector) {
    for (id, g) in unflatten(vector) {
        grads.set(id, g);
    }
}

/// Halfspace projection of `g_gen` against the payload gradient `g_wm`.
///
/// A non-negative inner product returns `g_gen` bitwise unchanged. The
/// violating branch cannot divide by zero: an all-zero `g_wm` has inner
/// product exactly zero and takes the no-op branch.
pub fn project(g_gen: &GradientVector, g_wm: &GradientVector) -> Result<GradientVector> {
    if !g_gen.layout.matches(&g_wm.layout) {
        return Err(Error::Layout(
            "generator and payload gradients use different parameter layouts".into(),
        ));
    }
    let dot: f64 = g_gen
        .values
        .iter()
        .zip(g_wm.values.iter())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum();
    if dot >= 0.0 {
        return Ok(g_gen.clone());
    }
    let norm_sq: f64 = g_wm.values.iter().map(|&v| (v as f64).powi(2)).sum();
    let coef = dot / norm_sq;
    let values = ndarray::Zip::from(&g_gen.values)
        .and(&g_wm.values)
        .map_collect(|&g, &w| (g as f64 - coef * w as f64) as f32);
    Ok(GradientVector { values, layout: g_gen.layout.clone() })
}

/// Per-batch projection state for the serial D, payload, generator sequence.
///
/// The payload gradient is captured once per batch and consumed exactly once;
/// a generator step without a fresh capture is a sequencing violation.
pub struct Projector {
    layout: GradientLayout,
    stored: Option<GradientVector>,
    fired: u64,
}

impl Projector {
    pub fn new(layout: GradientLayout) -> Self {
        Self { layout, stored: None, fired: 0 }
    }

    pub fn layout(&self) -> &GradientLayout {
        &self.layout
    }

    /// How many generator steps took the violating branch so far.
    pub fn fired_count(&self) -> u64 {
        self.fired
    }

    /// Flatten and hold the payload-loss gradient for this batch.
    pub fn capture_watermark_grad(&mut self, grads: &GradStore) -> Result<()> {
        self.stored = Some(flatten_gradients(grads, &self.layout)?);
        Ok(())
    }

    /// Project the pending generator gradients in place. Returns whether the
    /// violating branch fired.
    pub fn project_generator_grads(&mut self, grads: &mut GradStore) -> Result<bool> {
        let g_wm = self.stored.take().ok_or_else(|| {
            Error::Sequencing(
                "generator step attempted without a stored watermark gradient for this batch"
                    .into(),
            )
        })?;
        let g_gen = flatten_gradients(grads, &self.layout)?;
        let dot: f64 = g_gen
            .values
            .iter()
            .zip(g_wm.values.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        if dot >= 0.0 {
            return Ok(false);
        }
        let projected = project(&g_gen, &g_wm)?;
        unflatten_into(grads, &projected);
        self.fired += 1;
        Ok(true)
    }
}
