//! Toy waveform generator: mel frames in, audio out.
//!
//! Scaled-down HiFi-GAN shape: a wide entry conv, a chain of transposed-conv
//! upsampling stages each followed by a dilated residual block, and a
//! tanh-bounded exit conv. Every conv is an adapter site; `forward` threads
//! an optional adapter set plus scaling vector through them and `backward`
//! returns the combined scaling gradient.

use ndarray::{Array1, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdaptSite, AdapterCache, AdapterSet, SiteAdapter};
use crate::nn::layers::{Conv1d, ConvTranspose1d};
use crate::nn::{ops, GradStore, ParamStore};
use crate::{Error, Result};

const SLOPE: f32 = 0.1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ToyVocoderConfig {
    pub n_mels: usize,
    pub upsample_factors: Vec<usize>,
    pub initial_channels: usize,
    pub resblock_kernel: usize,
    pub resblock_dilations: Vec<usize>,
}

impl Default for ToyVocoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            upsample_factors: vec![8, 8, 4],
            initial_channels: 128,
            resblock_kernel: 3,
            resblock_dilations: vec![1, 3],
        }
    }
}

impl ToyVocoderConfig {
    /// Samples produced per input frame.
    pub fn upsample_product(&self) -> usize {
        self.upsample_factors.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be positive".into()));
        }
        if self.upsample_factors.is_empty() {
            return Err(Error::Config("vocoder needs at least one upsampling stage".into()));
        }
        if self.upsample_factors.iter().any(|&u| u < 2 || u % 2 != 0) {
            return Err(Error::Config("upsample factors must be even and at least 2".into()));
        }
        let stages = self.upsample_factors.len();
        if self.initial_channels >> stages == 0 {
            return Err(Error::Config(format!(
                "initial_channels {} cannot halve across {stages} stages",
                self.initial_channels
            )));
        }
        if self.resblock_kernel % 2 == 0 {
            return Err(Error::Config("resblock kernel must be odd".into()));
        }
        if self.resblock_dilations.is_empty() {
            return Err(Error::Config("resblock needs at least one dilation".into()));
        }
        Ok(())
    }
}

struct Stage {
    up: ConvTranspose1d,
    res: Vec<Conv1d>,
}

pub struct ToyVocoder {
    cfg: ToyVocoderConfig,
    prefix: String,
    conv_pre: Conv1d,
    stages: Vec<Stage>,
    conv_post: Conv1d,
}

/// Adapter conditioning for one forward/backward pair.
pub struct Conditioning<'a> {
    pub set: &'a AdapterSet,
    pub s: &'a Array1<f32>,
}

struct ResUnitCache {
    x: Array3<f32>,
    act: Array3<f32>,
    ad: Option<AdapterCache>,
}

struct StageCache {
    in_pre: Array3<f32>,
    in_act: Array3<f32>,
    up_ad: Option<AdapterCache>,
    res: Vec<ResUnitCache>,
}

pub struct VocoderCache {
    mel: Array3<f32>,
    pre_ad: Option<AdapterCache>,
    stages: Vec<StageCache>,
    trunk_out: Array3<f32>,
    post_act: Array3<f32>,
    post_ad: Option<AdapterCache>,
    y: Array3<f32>,
}

impl ToyVocoder {
    /// `prefix` namespaces the parameters, e.g. `"voc"` or `"codec.dec"`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: ToyVocoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let ch0 = cfg.initial_channels;
        let conv_pre =
            Conv1d::new(store, rng, &format!("{prefix}.conv_pre"), cfg.n_mels, ch0, 7, 1, 3, 1);
        let mut stages = Vec::new();
        let mut ch = ch0;
        for (i, &u) in cfg.upsample_factors.iter().enumerate() {
            let next = ch / 2;
            let up =
                ConvTranspose1d::new(store, rng, &format!("{prefix}.up{i}"), ch, next, 2 * u, u, u / 2);
            let res = cfg
                .resblock_dilations
                .iter()
                .enumerate()
                .map(|(j, &d)| {
                    let pad = d * (cfg.resblock_kernel - 1) / 2;
                    Conv1d::new(
                        store,
                        rng,
                        &format!("{prefix}.res{i}.{j}"),
                        next,
                        next,
                        cfg.resblock_kernel,
                        1,
                        pad,
                        d,
                    )
                })
                .collect();
            stages.push(Stage { up, res });
            ch = next;
        }
        let conv_post = Conv1d::new(store, rng, &format!("{prefix}.conv_post"), ch, 1, 7, 1, 3, 1);
        Ok(Self { cfg, prefix: prefix.to_string(), conv_pre, stages, conv_post })
    }

    pub fn config(&self) -> &ToyVocoderConfig {
        &self.cfg
    }

    /// Adapter sites in forward order: plain convs plus the upsamplers.
    pub fn adapt_sites(&self) -> Vec<AdaptSite<'_>> {
        let mut sites = vec![AdaptSite {
            name: format!("{}.conv_pre", self.prefix),
            conv: Some(&self.conv_pre),
            convtr: None,
        }];
        for (i, stage) in self.stages.iter().enumerate() {
            sites.push(AdaptSite {
                name: format!("{}.up{i}", self.prefix),
                conv: None,
                convtr: Some(&stage.up),
            });
            for (j, res) in stage.res.iter().enumerate() {
                sites.push(AdaptSite {
                    name: format!("{}.res{i}.{j}", self.prefix),
                    conv: Some(res),
                    convtr: None,
                });
            }
        }
        sites.push(AdaptSite {
            name: format!("{}.conv_post", self.prefix),
            conv: Some(&self.conv_post),
            convtr: None,
        });
        sites
    }

    fn conv_site(
        &self,
        store: &ParamStore,
        layer: &Conv1d,
        name: String,
        cond: Option<&Conditioning<'_>>,
        x: &Array3<f32>,
    ) -> Result<(Array3<f32>, Option<AdapterCache>)> {
        let mut y = layer.forward(store, x);
        let mut ad_cache = None;
        if let Some(c) = cond {
            if let Some(SiteAdapter::Conv(ad)) = c.set.get(&name) {
                let (delta, cache) = ad.forward_delta(store, x, c.s.view())?;
                y += &delta;
                ad_cache = Some(cache);
            }
        }
        Ok((y, ad_cache))
    }

    fn convtr_site(
        &self,
        store: &ParamStore,
        layer: &ConvTranspose1d,
        name: String,
        cond: Option<&Conditioning<'_>>,
        x: &Array3<f32>,
    ) -> Result<(Array3<f32>, Option<AdapterCache>)> {
        let mut y = layer.forward(store, x);
        let mut ad_cache = None;
        if let Some(c) = cond {
            if let Some(SiteAdapter::ConvTr(ad)) = c.set.get(&name) {
                let (delta, cache) = ad.forward_delta(store, x, c.s.view())?;
                y += &delta;
                ad_cache = Some(cache);
            }
        }
        Ok((y, ad_cache))
    }

    /// `(B, n_mels, T)` frames to `(B, 1, T * U)` audio in `[-1, 1]`.
    pub fn forward(
        &self,
        store: &ParamStore,
        mel: &Array3<f32>,
        cond: Option<&Conditioning<'_>>,
    ) -> Result<(Array3<f32>, VocoderCache)> {
        if mel.dim().1 != self.cfg.n_mels {
            return Err(Error::FeatureShape(format!(
                "vocoder expects {} mel bins, input has {}",
                self.cfg.n_mels,
                mel.dim().1
            )));
        }
        let (pre_out, pre_ad) =
            self.conv_site(store, &self.conv_pre, format!("{}.conv_pre", self.prefix), cond, mel)?;

        let mut x = pre_out;
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let in_pre = x;
            let in_act = ops::leaky_relu(&in_pre, SLOPE);
            let (mut h, up_ad) =
                self.convtr_site(store, &stage.up, format!("{}.up{i}", self.prefix), cond, &in_act)?;
            let mut res_caches = Vec::with_capacity(stage.res.len());
            for (j, res) in stage.res.iter().enumerate() {
                let unit_in = h;
                let act = ops::leaky_relu(&unit_in, SLOPE);
                let (conv_out, ad) =
                    self.conv_site(store, res, format!("{}.res{i}.{j}", self.prefix), cond, &act)?;
                h = &unit_in + &conv_out;
                res_caches.push(ResUnitCache { x: unit_in, act, ad });
            }
            stage_caches.push(StageCache { in_pre, in_act, up_ad, res: res_caches });
            x = h;
        }

        let post_act = ops::leaky_relu(&x, SLOPE);
        let (post_out, post_ad) = self.conv_site(
            store,
            &self.conv_post,
            format!("{}.conv_post", self.prefix),
            cond,
            &post_act,
        )?;
        let y = ops::tanh(&post_out);
        let cache = VocoderCache {
            mel: mel.clone(),
            pre_ad,
            stages: stage_caches,
            trunk_out: x,
            post_act,
            post_ad,
            y: y.clone(),
        };
        Ok((y, cache))
    }

    /// Backward from waveform gradients. Returns the mel gradient and, when
    /// the pass was conditioned, the scaling gradient summed over all sites.
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut GradStore,
        cache: &VocoderCache,
        cond: Option<&Conditioning<'_>>,
        dy: &Array3<f32>,
    ) -> (Array3<f32>, Option<Array1<f32>>) {
        let mut ds = cond.map(|c| Array1::<f32>::zeros(c.s.len()));
        fn add_ds(acc: &mut Option<Array1<f32>>, part: Array1<f32>) {
            if let Some(total) = acc.as_mut() {
                *total += &part;
            }
        }

        let dpost_out = ops::tanh_backward(&cache.y, dy);
        let mut dpost_act = self.conv_post.backward(store, grads, &cache.post_act, &dpost_out);
        if let (Some(c), Some(ad_cache)) = (cond, cache.post_ad.as_ref()) {
            if let Some(SiteAdapter::Conv(ad)) = c.set.get(&format!("{}.conv_post", self.prefix)) {
                let (dxa, dsa) =
                    ad.backward_delta(store, grads, &cache.post_act, c.s.view(), ad_cache, &dpost_out);
                dpost_act += &dxa;
                add_ds(&mut ds, dsa);
            }
        }
        let mut dstage_out = ops::leaky_relu_backward(&cache.trunk_out, &dpost_act, SLOPE);

        for (i, (stage, sc)) in self.stages.iter().zip(cache.stages.iter()).enumerate().rev() {
            let mut dh = dstage_out;
            for (j, (res, rc)) in stage.res.iter().zip(sc.res.iter()).enumerate().rev() {
                let mut dact = res.backward(store, grads, &rc.act, &dh);
                if let (Some(c), Some(ad_cache)) = (cond, rc.ad.as_ref()) {
                    if let Some(SiteAdapter::Conv(ad)) =
                        c.set.get(&format!("{}.res{i}.{j}", self.prefix))
                    {
                        let (dxa, dsa) =
                            ad.backward_delta(store, grads, &rc.act, c.s.view(), ad_cache, &dh);
                        dact += &dxa;
                        add_ds(&mut ds, dsa);
                    }
                }
                let dthrough = ops::leaky_relu_backward(&rc.x, &dact, SLOPE);
                dh += &dthrough;
            }
            let dup_out = dh;
            let mut din_act = stage.up.backward(store, grads, &sc.in_act, &dup_out);
            if let (Some(c), Some(ad_cache)) = (cond, sc.up_ad.as_ref()) {
                if let Some(SiteAdapter::ConvTr(ad)) = c.set.get(&format!("{}.up{i}", self.prefix)) {
                    let (dxa, dsa) =
                        ad.backward_delta(store, grads, &sc.in_act, c.s.view(), ad_cache, &dup_out);
                    din_act += &dxa;
                    add_ds(&mut ds, dsa);
                }
            }
            dstage_out = ops::leaky_relu_backward(&sc.in_pre, &din_act, SLOPE);
        }

        let mut dmel = self.conv_pre.backward(store, grads, &cache.mel, &dstage_out);
        if let (Some(c), Some(ad_cache)) = (cond, cache.pre_ad.as_ref()) {
            if let Some(SiteAdapter::Conv(ad)) = c.set.get(&format!("{}.conv_pre", self.prefix)) {
                let (dxa, dsa) =
                    ad.backward_delta(store, grads, &cache.mel, c.s.view(), ad_cache, &dstage_out);
                dmel += &dxa;
                add_ds(&mut ds, dsa);
            }
        }
        (dmel, ds)
    }
}
