//! Waveform discriminator ensemble.
//!
//! Two families judge a waveform jointly: period discriminators fold the
//! signal into `ceil(L/p) x p` grids so periodic artifacts line up in
//! columns, and scale discriminators run plain conv stacks over the raw and
//! average-pooled signal. Every sub-discriminator reports one score map plus
//! its hidden feature maps for feature matching.

use ndarray::{Array3, Array4, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::layers::{Conv1d, Conv2d};
use crate::nn::{ops, GradStore, ParamStore};
use crate::{Error, Result};

const SLOPE: f32 = 0.1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    pub scales: usize,
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { periods: vec![2, 3, 5, 7, 11], scales: 3, base_channels: 8 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.periods.is_empty() && self.scales == 0 {
            return Err(Error::Config("discriminator set needs at least one sub".into()));
        }
        if self.periods.iter().any(|&p| p < 2) {
            return Err(Error::Config("discriminator periods must be at least 2".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn sub_count(&self) -> usize {
        self.periods.len() + self.scales
    }
}

struct PeriodDisc {
    period: usize,
    convs: Vec<Conv2d>,
    post: Conv2d,
}

struct ScaleDisc {
    pools: usize,
    convs: Vec<Conv1d>,
    post: Conv1d,
}

pub struct DiscriminatorSet {
    cfg: DiscriminatorConfig,
    periods: Vec<PeriodDisc>,
    scales: Vec<ScaleDisc>,
}

/// Score map and hidden feature maps of one sub-discriminator. The score map
/// is appended to `features` so feature matching covers it too.
pub struct SubOutput {
    pub score: ArrayD<f32>,
    pub features: Vec<ArrayD<f32>>,
}

/// Upstream gradients for one sub-discriminator. `dfeatures` must be empty
/// or match `SubOutput::features` in length; the final entry feeds the score
/// map alongside `dscore`.
pub struct SubGrad {
    pub dscore: ArrayD<f32>,
    pub dfeatures: Vec<ArrayD<f32>>,
}

struct PeriodCache {
    inputs: Vec<Array4<f32>>,
    pres: Vec<Array4<f32>>,
    padded_len: usize,
}

struct ScaleCache {
    pooled: Vec<Array3<f32>>,
    inputs: Vec<Array3<f32>>,
    pres: Vec<Array3<f32>>,
}

pub struct DiscCache {
    wave_dim: (usize, usize, usize),
    periods: Vec<PeriodCache>,
    scales: Vec<ScaleCache>,
}

impl DiscriminatorSet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: DiscriminatorConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let periods = cfg
            .periods
            .iter()
            .map(|&p| {
                let name = |layer: &str| format!("{prefix}.p{p}.{layer}");
                let convs = vec![
                    Conv2d::new(store, rng, &name("conv0"), 1, c, (5, 1), (3, 1), (2, 0)),
                    Conv2d::new(store, rng, &name("conv1"), c, 2 * c, (5, 1), (3, 1), (2, 0)),
                    Conv2d::new(store, rng, &name("conv2"), 2 * c, 4 * c, (5, 1), (3, 1), (2, 0)),
                ];
                let post = Conv2d::new(store, rng, &name("post"), 4 * c, 1, (3, 1), (1, 1), (1, 0));
                PeriodDisc { period: p, convs, post }
            })
            .collect();
        let scales = (0..cfg.scales)
            .map(|i| {
                let name = |layer: &str| format!("{prefix}.s{i}.{layer}");
                let convs = vec![
                    Conv1d::new(store, rng, &name("conv0"), 1, c, 15, 1, 7, 1),
                    Conv1d::new(store, rng, &name("conv1"), c, 2 * c, 21, 3, 10, 1),
                    Conv1d::new(store, rng, &name("conv2"), 2 * c, 4 * c, 21, 3, 10, 1),
                    Conv1d::new(store, rng, &name("conv3"), 4 * c, 4 * c, 5, 1, 2, 1),
                ];
                let post = Conv1d::new(store, rng, &name("post"), 4 * c, 1, 3, 1, 1, 1);
                ScaleDisc { pools: i, convs, post }
            })
            .collect();
        Ok(Self { cfg, periods, scales })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    /// Scores a batch of waveforms `(B, 1, L)`. Sub order: periods as
    /// configured, then scales from raw to most pooled.
    pub fn forward(&self, store: &ParamStore, wave: &Array3<f32>) -> (Vec<SubOutput>, DiscCache) {
        let (bsz, ch, len) = wave.dim();
        assert_eq!(ch, 1, "discriminators expect mono waveforms");
        let mut outs = Vec::with_capacity(self.cfg.sub_count());
        let mut pcaches = Vec::with_capacity(self.periods.len());
        for pd in &self.periods {
            let p = pd.period;
            let rows = len.div_ceil(p);
            let padded_len = rows * p;
            let mut grid = Array4::<f32>::zeros((bsz, 1, rows, p));
            {
                let flat = grid.view_mut().into_shape_with_order((bsz, 1, padded_len)).unwrap();
                let mut flat = flat;
                flat.slice_mut(ndarray::s![.., .., ..len]).assign(wave);
            }
            let mut inputs = vec![grid];
            let mut pres = Vec::new();
            let mut features = Vec::new();
            for conv in &pd.convs {
                let pre = conv.forward(store, inputs.last().unwrap());
                let act = ops::leaky_relu(&pre, SLOPE);
                features.push(act.clone().into_dyn());
                pres.push(pre);
                inputs.push(act);
            }
            let score = pd.post.forward(store, inputs.last().unwrap());
            features.push(score.clone().into_dyn());
            outs.push(SubOutput { score: score.into_dyn(), features });
            pcaches.push(PeriodCache { inputs, pres, padded_len });
        }

        let mut scaches = Vec::with_capacity(self.scales.len());
        for sd in &self.scales {
            let mut pooled = vec![wave.clone()];
            for _ in 0..sd.pools {
                let prev = pooled.last().unwrap();
                pooled.push(ops::avg_pool1d(prev.view(), 4, 2, 2));
            }
            let mut inputs = vec![pooled.last().unwrap().clone()];
            let mut pres = Vec::new();
            let mut features = Vec::new();
            for conv in &sd.convs {
                let pre = conv.forward(store, inputs.last().unwrap());
                let act = ops::leaky_relu(&pre, SLOPE);
                features.push(act.clone().into_dyn());
                pres.push(pre);
                inputs.push(act);
            }
            let score = sd.post.forward(store, inputs.last().unwrap());
            features.push(score.clone().into_dyn());
            outs.push(SubOutput { score: score.into_dyn(), features });
            scaches.push(ScaleCache { pooled, inputs, pres });
        }

        (outs, DiscCache { wave_dim: wave.dim(), periods: pcaches, scales: scaches })
    }

    /// Backward through every sub; `dsubs` must follow the forward sub order.
    /// Returns the waveform gradient summed over subs.
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut GradStore,
        cache: &DiscCache,
        dsubs: &[SubGrad],
    ) -> Array3<f32> {
        assert_eq!(dsubs.len(), self.cfg.sub_count(), "one gradient bundle per sub");
        let (bsz, _, len) = cache.wave_dim;
        let mut dwave = Array3::<f32>::zeros(cache.wave_dim);

        for ((pd, pc), dsub) in self.periods.iter().zip(&cache.periods).zip(dsubs) {
            let n_feats = pd.convs.len() + 1;
            assert!(
                dsub.dfeatures.is_empty() || dsub.dfeatures.len() == n_feats,
                "feature gradient count mismatch"
            );
            let mut dscore: Array4<f32> =
                dsub.dscore.clone().into_dimensionality().expect("score gradient rank");
            if let Some(df) = dsub.dfeatures.last() {
                dscore += &df.view().into_dimensionality::<ndarray::Ix4>().expect("score feature gradient rank");
            }
            let mut dact = pd.post.backward(store, grads, pc.inputs.last().unwrap(), &dscore);
            for (i, conv) in pd.convs.iter().enumerate().rev() {
                if let Some(df) = dsub.dfeatures.get(i) {
                    dact += &df.view().into_dimensionality::<ndarray::Ix4>().expect("feature gradient rank");
                }
                let dpre = ops::leaky_relu_backward(&pc.pres[i], &dact, SLOPE);
                dact = conv.backward(store, grads, &pc.inputs[i], &dpre);
            }
            let dgrid = dact.into_shape_with_order((bsz, 1, pc.padded_len)).unwrap();
            dwave += &dgrid.slice(ndarray::s![.., .., ..len]);
        }

        for ((sd, sc), dsub) in self.scales.iter().zip(&cache.scales).zip(&dsubs[self.periods.len()..]) {
            let n_feats = sd.convs.len() + 1;
            assert!(
                dsub.dfeatures.is_empty() || dsub.dfeatures.len() == n_feats,
                "feature gradient count mismatch"
            );
            let mut dscore: Array3<f32> =
                dsub.dscore.clone().into_dimensionality().expect("score gradient rank");
            if let Some(df) = dsub.dfeatures.last() {
                dscore += &df.view().into_dimensionality::<ndarray::Ix3>().expect("score feature gradient rank");
            }
            let mut dact = sd.post.backward(store, grads, sc.inputs.last().unwrap(), &dscore);
            for (i, conv) in sd.convs.iter().enumerate().rev() {
                if let Some(df) = dsub.dfeatures.get(i) {
                    dact += &df.view().into_dimensionality::<ndarray::Ix3>().expect("feature gradient rank");
                }
                let dpre = ops::leaky_relu_backward(&sc.pres[i], &dact, SLOPE);
                dact = conv.backward(store, grads, &sc.inputs[i], &dpre);
            }
            let mut dpool = dact;
            for depth in (0..sd.pools).rev() {
                let target_len = sc.pooled[depth].dim().2;
                dpool = ops::avg_pool1d_backward(dpool.view(), target_len, 4, 2, 2);
            }
            dwave += &dpool;
        }

        dwave
    }

    /// Parameter ids of every sub-discriminator, in registration order.
    pub fn param_ids(&self, store: &ParamStore) -> Vec<crate::nn::ParamId> {
        let mut ids: Vec<_> = Vec::new();
        for pd in &self.periods {
            for conv in &pd.convs {
                ids.push(conv.weight);
                ids.push(conv.bias);
            }
            ids.push(pd.post.weight);
            ids.push(pd.post.bias);
        }
        for sd in &self.scales {
            for conv in &sd.convs {
                ids.push(conv.weight);
                ids.push(conv.bias);
            }
            ids.push(sd.post.weight);
            ids.push(sd.post.bias);
        }
        debug_assert!(ids.iter().all(|&id| store.meta(id).trainable));
        ids
    }
}
