//! Watermark-conditioned low-rank adapters.
//!
//! Each adapted layer computes `W0 x + B diag(s) A x`: the frozen base output
//! plus a rank-r branch whose channels are scaled by the watermark-derived
//! vector `s`. For 1-D convolutions the branch runs as a down-conv with the
//! base geometry, a per-channel scale, and a 1-point up-conv; merging folds
//! the same product into a dense kernel update.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::nn::layers::{Conv1d, ConvTranspose1d, Linear};
use crate::nn::{conv, init, GradStore, ParamId, ParamStore};
use crate::{Error, Result};

/// Which generator layers receive adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LayerSelector {
    /// Plain 1-D convolutions only.
    #[default]
    Conv1d,
    /// Plain and transposed 1-D convolutions.
    AllConvs,
}

/// Dense-layer adapter, mostly useful as the textbook form of the update rule.
pub struct WmLoraLinear {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
}

impl WmLoraLinear {
    pub fn attach(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        base: &Linear,
        rank: usize,
    ) -> Result<Self> {
        let shape = store.meta(base.weight).shape.clone();
        let (d, k) = (shape[0], shape[1]);
        if rank > d.min(k) {
            return Err(Error::Config(format!(
                "rank {rank} exceeds min({d}, {k}) for layer {name}"
            )));
        }
        let a = store.add(format!("{name}.lora_a"), init::fan_in_uniform(rng, &[rank, k], k), true);
        let b = store.add(format!("{name}.lora_b"), init::zeros(&[d, rank]), true);
        Ok(Self { a, b, rank })
    }

    pub fn forward(&self, store: &ParamStore, base: &Linear, x: &Array2<f32>, s: ArrayView1<f32>) -> Result<Array2<f32>> {
        if s.len() != self.rank {
            return Err(Error::Config(format!(
                "scaling vector has {} entries, adapter rank is {}",
                s.len(),
                self.rank
            )));
        }
        let a: Array2<f32> = store.get(self.a).view().into_dimensionality().unwrap().to_owned();
        let b: Array2<f32> = store.get(self.b).view().into_dimensionality().unwrap().to_owned();
        let mut mid = x.dot(&a.t());
        for (mut col, &sv) in mid.columns_mut().into_iter().zip(s.iter()) {
            col.mapv_inplace(|v| v * sv);
        }
        Ok(base.forward(store, x) + mid.dot(&b.t()))
    }

    /// `W0 + B diag(s) A`.
    pub fn merged_weight(&self, store: &ParamStore, base: &Linear, s: ArrayView1<f32>) -> Result<Array2<f32>> {
        if s.len() != self.rank {
            return Err(Error::Config("scaling vector length != rank".into()));
        }
        let w0: Array2<f32> = store.get(base.weight).view().into_dimensionality().unwrap().to_owned();
        let a: Array2<f32> = store.get(self.a).view().into_dimensionality().unwrap().to_owned();
        let b: Array2<f32> = store.get(self.b).view().into_dimensionality().unwrap().to_owned();
        let mut scaled_a = a;
        for (mut row, &sv) in scaled_a.rows_mut().into_iter().zip(s.iter()) {
            row.mapv_inplace(|v| v * sv);
        }
        Ok(w0 + b.dot(&scaled_a))
    }
}

/// Activations of the low-rank branch needed by its backward pass.
pub struct AdapterCache {
    mid: Array3<f32>,
    scaled: Array3<f32>,
}

/// Adapter for a plain 1-D convolution.
pub struct WmLoraConv1d {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
}

impl WmLoraConv1d {
    pub fn attach(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        base: &Conv1d,
        rank: usize,
    ) -> Result<Self> {
        let shape = store.meta(base.weight).shape.clone();
        let (c_out, c_in, k) = (shape[0], shape[1], shape[2]);
        if rank > c_out.min(c_in * k) {
            return Err(Error::Config(format!(
                "rank {rank} exceeds min({c_out}, {}) for layer {name}",
                c_in * k
            )));
        }
        let a = store.add(
            format!("{name}.lora_a"),
            init::fan_in_uniform(rng, &[rank, c_in, k], c_in * k),
            true,
        );
        let b = store.add(format!("{name}.lora_b"), init::zeros(&[c_out, rank, 1]), true);
        Ok(Self { a, b, rank, stride: base.stride, pad: base.pad, dilation: base.dilation })
    }

    /// Low-rank branch output `B diag(s) A x`; add to the base conv output.
    pub fn forward_delta(
        &self,
        store: &ParamStore,
        x: &Array3<f32>,
        s: ArrayView1<f32>,
    ) -> Result<(Array3<f32>, AdapterCache)> {
        if s.len() != self.rank {
            return Err(Error::Config(format!(
                "scaling vector has {} entries, adapter rank is {}",
                s.len(),
                self.rank
            )));
        }
        let a: ArrayView3<f32> = store.get(self.a).view().into_dimensionality().unwrap();
        let b: ArrayView3<f32> = store.get(self.b).view().into_dimensionality().unwrap();
        let mid = conv::conv1d_forward(x.view(), a, None, self.stride, self.pad, self.dilation);
        let mut scaled = mid.clone();
        for (mut ch, &sv) in scaled.axis_iter_mut(Axis(1)).zip(s.iter()) {
            ch.mapv_inplace(|v| v * sv);
        }
        let delta = conv::conv1d_forward(scaled.view(), b, None, 1, 0, 1);
        Ok((delta, AdapterCache { mid, scaled }))
    }

    /// Backward through the branch: accumulates `dA`, `dB`, returns the input
    /// gradient and this layer's contribution to `ds`.
    pub fn backward_delta(
        &self,
        store: &ParamStore,
        grads: &mut GradStore,
        x: &Array3<f32>,
        s: ArrayView1<f32>,
        cache: &AdapterCache,
        dy: &Array3<f32>,
    ) -> (Array3<f32>, Array1<f32>) {
        let a: ArrayView3<f32> = store.get(self.a).view().into_dimensionality().unwrap();
        let b: ArrayView3<f32> = store.get(self.b).view().into_dimensionality().unwrap();

        let (dscaled, db, _) = conv::conv1d_backward(cache.scaled.view(), b, dy.view(), 1, 0, 1);
        grads.accumulate(self.b, db.into_dyn());

        // scaled = mid * s per channel.
        let mut ds = Array1::<f32>::zeros(self.rank);
        for rho in 0..self.rank {
            let mut acc = 0.0f64;
            ndarray::Zip::from(&dscaled.index_axis(Axis(1), rho))
                .and(&cache.mid.index_axis(Axis(1), rho))
                .for_each(|&g, &m| acc += g as f64 * m as f64);
            ds[rho] = acc as f32;
        }
        let mut dmid = dscaled;
        for (mut ch, &sv) in dmid.axis_iter_mut(Axis(1)).zip(s.iter()) {
            ch.mapv_inplace(|v| v * sv);
        }

        let (dx, da, _) = conv::conv1d_backward(x.view(), a, dmid.view(), self.stride, self.pad, self.dilation);
        grads.accumulate(self.a, da.into_dyn());
        (dx, ds)
    }

    /// Kernel update `dW[o,i,t] = sum_rho B[o,rho] s[rho] A[rho,i,t]`.
    pub fn merged_delta(&self, store: &ParamStore, s: ArrayView1<f32>) -> Array3<f32> {
        let a: ArrayView3<f32> = store.get(self.a).view().into_dimensionality().unwrap();
        let b: ArrayView3<f32> = store.get(self.b).view().into_dimensionality().unwrap();
        let (r, c_in, k) = a.dim();
        let c_out = b.dim().0;
        let a_mat = a.to_shape((r, c_in * k)).unwrap();
        let mut scaled_a = a_mat.to_owned();
        for (mut row, &sv) in scaled_a.rows_mut().into_iter().zip(s.iter()) {
            row.mapv_inplace(|v| v * sv);
        }
        let b_mat = b.to_shape((c_out, r)).unwrap();
        b_mat
            .dot(&scaled_a)
            .into_shape_with_order((c_out, c_in, k))
            .unwrap()
    }
}

/// Adapter for a transposed 1-D convolution: 1-point down-conv, channel
/// scale, transposed up-conv with the base geometry.
pub struct WmLoraConvTr1d {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    stride: usize,
    pad: usize,
}

impl WmLoraConvTr1d {
    pub fn attach(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        base: &ConvTranspose1d,
        rank: usize,
    ) -> Result<Self> {
        let shape = store.meta(base.weight).shape.clone();
        let (c_in, c_out, k) = (shape[0], shape[1], shape[2]);
        if rank > c_in.min(c_out * k) {
            return Err(Error::Config(format!(
                "rank {rank} exceeds min({c_in}, {}) for layer {name}",
                c_out * k
            )));
        }
        // Branch order is down(1x1) -> scale -> up(transposed, kernel K), so
        // `a` is the 1-point entry map and `b` carries the kernel.
        let a = store.add(format!("{name}.lora_a"), init::fan_in_uniform(rng, &[rank, c_in, 1], c_in), true);
        let b = store.add(format!("{name}.lora_b"), init::zeros(&[rank, c_out, k]), true);
        Ok(Self { a, b, rank, stride: base.stride, pad: base.pad })
    }

    pub fn forward_delta(
        &self,
        store: &ParamStore,
        x: &Array3<f32>,
        s: ArrayView1<f32>,
    ) -> Result<(Array3<f32>, AdapterCache)> {
        if s.len() != self.rank {
            return Err(Error::Config(format!(
                "scaling vector has {} entries, adapter rank is {}",
                s.len(),
                self.rank
            )));
        }
        let a: ArrayView3<f32> = store.get(self.a).view().into_dimensionality().unwrap();
        let b: ArrayView3<f32> = store.get(self.b).view().into_dimensionality().unwrap();
        let mid = conv::conv1d_forward(x.view(), a, None, 1, 0, 1);
        let mut scaled = mid.clone();
        for (mut ch, &sv) in scaled.axis_iter_mut(Axis(1)).zip(s.iter()) {
            ch.mapv_inplace(|v| v * sv);
        }
        let delta = conv::convtr1d_forward(scaled.view(), b, None, self.stride, self.pad, 1);
        Ok((delta, AdapterCache { mid, scaled }))
    }

    pub fn backward_delta(
        &self,
        store: &ParamStore,
        grads: &mut GradStore,
        x: &Array3<f32>,
        s: ArrayView1<f32>,
        cache: &AdapterCache,
        dy: &Array3<f32>,
    ) -> (Array3<f32>, Array1<f32>) {
        let a: ArrayView3<f32> = store.get(self.a).view().into_dimensionality().unwrap();
        let b: ArrayView3<f32> = store.get(self.b).view().into_dimensionality().unwrap();

        let (dscaled, db, _) = conv::convtr1d_backward(cache.scaled.view(), b, dy.view(), self.stride, self.pad, 1);
        grads.accumulate(self.b, db.into_dyn());

        let mut ds = Array1::<f32>::zeros(self.rank);
        for rho in 0..self.rank {
            let mut acc = 0.0f64;
            ndarray::Zip::from(&dscaled.index_axis(Axis(1), rho))
                .and(&cache.mid.index_axis(Axis(1), rho))
                .for_each(|&g, &m| acc += g as f64 * m as f64);
            ds[rho] = acc as f32;
        }
        let mut dmid = dscaled;
        for (mut ch, &sv) in dmid.axis_iter_mut(Axis(1)).zip(s.iter()) {
            ch.mapv_inplace(|v| v * sv);
        }

        let (dx, da, _) = conv::conv1d_backward(x.view(), a, dmid.view(), 1, 0, 1);
        grads.accumulate(self.a, da.into_dyn());
        (dx, ds)
    }

    /// Kernel update in the transposed layout `(C_in, C_out, K)`.
    pub fn merged_delta(&self, store: &ParamStore, s: ArrayView1<f32>) -> Array3<f32> {
        let a: ArrayView3<f32> = store.get(self.a).view().into_dimensionality().unwrap();
        let b: ArrayView3<f32> = store.get(self.b).view().into_dimensionality().unwrap();
        let (r, c_out, k) = b.dim();
        let c_in = a.dim().1;
        let a_mat = a.to_shape((r, c_in)).unwrap();
        let b_mat = b.to_shape((r, c_out * k)).unwrap();
        let mut scaled_b = b_mat.to_owned();
        for (mut row, &sv) in scaled_b.rows_mut().into_iter().zip(s.iter()) {
            row.mapv_inplace(|v| v * sv);
        }
        // dW = A^T diag(s) B in the matricized (C_in, C_out*K) layout.
        a_mat
            .t()
            .dot(&scaled_b)
            .into_shape_with_order((c_in, c_out, k))
            .unwrap()
    }
}

pub enum SiteAdapter {
    Conv(WmLoraConv1d),
    ConvTr(WmLoraConvTr1d),
}

/// Adaptable layer descriptor published by a generator.
pub struct AdaptSite<'a> {
    pub name: String,
    pub conv: Option<&'a Conv1d>,
    pub convtr: Option<&'a ConvTranspose1d>,
}

/// All adapters injected into one generator, keyed by base-layer name.
pub struct AdapterSet {
    pub adapters: BTreeMap<String, SiteAdapter>,
    pub rank: usize,
    pub selector: LayerSelector,
}

impl AdapterSet {
    /// Attach adapters to the selected sites and freeze every parameter that
    /// existed in the store beforehand.
    ///
    /// Sites whose structural rank cap is below `rank` are left unadapted;
    /// narrow layers (the single-channel output conv above all) would
    /// otherwise veto any useful rank for the whole model. It is an error if
    /// no site can host the rank.
    pub fn inject(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        sites: &[AdaptSite<'_>],
        rank: usize,
        selector: LayerSelector,
    ) -> Result<Self> {
        let preexisting: Vec<ParamId> = store.ids().collect();
        let mut adapters = BTreeMap::new();
        let mut matched_any = false;
        for site in sites {
            match (selector, site.conv, site.convtr) {
                (_, Some(base), _) => {
                    matched_any = true;
                    let shape = &store.meta(base.weight).shape;
                    if rank <= shape[0].min(shape[1] * shape[2]) {
                        let ad = WmLoraConv1d::attach(store, rng, &site.name, base, rank)?;
                        adapters.insert(site.name.clone(), SiteAdapter::Conv(ad));
                    }
                }
                (LayerSelector::AllConvs, _, Some(base)) => {
                    matched_any = true;
                    let shape = &store.meta(base.weight).shape;
                    if rank <= shape[0].min(shape[1] * shape[2]) {
                        let ad = WmLoraConvTr1d::attach(store, rng, &site.name, base, rank)?;
                        adapters.insert(site.name.clone(), SiteAdapter::ConvTr(ad));
                    }
                }
                _ => {}
            }
        }
        if adapters.is_empty() {
            return Err(Error::Config(if matched_any {
                format!("rank {rank} exceeds the structural cap of every selected layer")
            } else {
                "layer selector matched no adaptable layers".into()
            }));
        }
        for id in preexisting {
            store.set_trainable(id, false);
        }
        Ok(Self { adapters, rank, selector })
    }

    pub fn get(&self, name: &str) -> Option<&SiteAdapter> {
        self.adapters.get(name)
    }

    /// Trainable adapter parameter ids in name order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for ad in self.adapters.values() {
            match ad {
                SiteAdapter::Conv(c) => {
                    ids.push(c.a);
                    ids.push(c.b);
                }
                SiteAdapter::ConvTr(c) => {
                    ids.push(c.a);
                    ids.push(c.b);
                }
            }
        }
        ids
    }

    /// Fold `B diag(s) A` into every adapted base kernel of `store`.
    ///
    /// Call on a clone of the base parameters to mint a standalone instance.
    pub fn merge(&self, store: &mut ParamStore, s: ArrayView1<f32>) -> Result<()> {
        for (name, ad) in &self.adapters {
            let weight_id = store
                .find(&format!("{name}.weight"))
                .ok_or_else(|| Error::Structural(format!("no base weight for adapted layer {name}")))?;
            let delta = match ad {
                SiteAdapter::Conv(c) => c.merged_delta(store, s),
                SiteAdapter::ConvTr(c) => c.merged_delta(store, s),
            };
            let w = store.get_mut(weight_id);
            *w += &delta.into_dyn();
        }
        Ok(())
    }
}

/// Maximum absolute output difference between two generator evaluations over
/// a probe set. The closures must produce equally shaped outputs.
pub fn verify_merge_equivalence<F, G>(run_a: F, run_b: G, probes: &[Array3<f32>]) -> Result<f32>
where
    F: Fn(&Array3<f32>) -> Array3<f32>,
    G: Fn(&Array3<f32>) -> Array3<f32>,
{
    let mut max_diff = 0.0f32;
    for probe in probes {
        let ya = run_a(probe);
        let yb = run_b(probe);
        if ya.dim() != yb.dim() {
            return Err(Error::Structural(format!(
                "probe outputs disagree in shape: {:?} vs {:?}",
                ya.dim(),
                yb.dim()
            )));
        }
        for (a, b) in ya.iter().zip(yb.iter()) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    Ok(max_diff)
}
