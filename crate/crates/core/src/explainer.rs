//! The explainer network: a two-track encoder fused by a learned gate, and
//! a two-layer FC decoder that reconstructs the performer's FC features.
//!
//! Interpretable track: conv-interp-1 -> ReLU -> mask -> conv-interp-2 ->
//! ReLU -> mask -> norm. Ordinary track: conv-ordin -> ReLU -> 3x3 max pool
//! -> norm. Fusion: `x_enc = p * x_interp + (1 - p) * x_ordin` with
//! `p = sigmoid(w_p)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::losses::TemplateBank;
use crate::nn::{self, Conv2d, Linear};
use crate::optim::Parameters;
use crate::performer::PerformerArch;
use crate::rng::{self, stream};
use crate::tensor::{argmax, FeatureMap};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExplainerArch {
    pub tap_channels: usize,
    /// Spatial size `n` of the tapped map.
    pub size: usize,
    /// Interpretable filter budget `F`; also the fused channel count.
    pub filters: usize,
    pub fc1: usize,
    pub fc2: usize,
}

impl ExplainerArch {
    pub fn for_performer(performer: &PerformerArch, filters: usize) -> Self {
        Self {
            tap_channels: performer.tap_channels(),
            size: performer.tap_size(),
            filters,
            fc1: performer.fc1,
            fc2: performer.fc2,
        }
    }

    pub fn decoder_input(&self) -> usize {
        self.filters * self.size * self.size
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 || self.tap_channels == 0 || self.size == 0 || self.fc1 == 0 || self.fc2 == 0 {
            return Err(Error::Config(format!("explainer dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerParams {
    pub arch: ExplainerArch,
    pub interp1: Conv2d,
    pub interp2: Conv2d,
    pub ordin: Conv2d,
    /// Gate logit `w_p`.
    pub gate_logit: f64,
    /// Norm scales shared by both tracks.
    pub alpha: Vec<f64>,
    pub fcdec1: Linear,
    pub fcdec2: Linear,
}

impl Parameters for ExplainerParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("interp1.weight", &self.interp1.weight),
            ("interp1.bias", &self.interp1.bias),
            ("interp2.weight", &self.interp2.weight),
            ("interp2.bias", &self.interp2.bias),
            ("ordin.weight", &self.ordin.weight),
            ("ordin.bias", &self.ordin.bias),
            ("gate_logit", core::slice::from_ref(&self.gate_logit)),
            ("alpha", &self.alpha),
            ("fcdec1.weight", &self.fcdec1.weight),
            ("fcdec1.bias", &self.fcdec1.bias),
            ("fcdec2.weight", &self.fcdec2.weight),
            ("fcdec2.bias", &self.fcdec2.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("interp1.weight", &mut self.interp1.weight),
            ("interp1.bias", &mut self.interp1.bias),
            ("interp2.weight", &mut self.interp2.weight),
            ("interp2.bias", &mut self.interp2.bias),
            ("ordin.weight", &mut self.ordin.weight),
            ("ordin.bias", &mut self.ordin.bias),
            ("gate_logit", core::slice::from_mut(&mut self.gate_logit)),
            ("alpha", &mut self.alpha),
            ("fcdec1.weight", &mut self.fcdec1.weight),
            ("fcdec1.bias", &mut self.fcdec1.bias),
            ("fcdec2.weight", &mut self.fcdec2.weight),
            ("fcdec2.bias", &mut self.fcdec2.bias),
        ]
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Running per-channel RMS of each track's pre-norm output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub interp: Vec<f64>,
    pub ordin: Vec<f64>,
    pub momentum: f64,
    /// Number of batch updates absorbed so far; the first one seeds the average.
    pub updates: u64,
}

/// Floor on a channel's batch RMS so the running value stays positive.
pub const RMS_EPS: f64 = 1e-8;

impl NormStats {
    pub fn new(channels: usize) -> Self {
        Self {
            interp: vec![1.0; channels],
            ordin: vec![1.0; channels],
            momentum: 0.99,
            updates: 0,
        }
    }

    /// Per-channel RMS over every map in `maps`.
    pub fn batch_rms<'a>(maps: impl Iterator<Item = &'a FeatureMap>, channels: usize) -> Vec<f64> {
        let mut sq = vec![0.0; channels];
        let mut count = 0usize;
        for m in maps {
            for (c, acc) in sq.iter_mut().enumerate() {
                *acc += m.channel(c).iter().map(|v| v * v).sum::<f64>();
            }
            count += m.plane();
        }
        sq.into_iter()
            .map(|s| libm::sqrt(s / count.max(1) as f64 + RMS_EPS))
            .collect()
    }

    pub fn update(&mut self, interp: &[f64], ordin: &[f64]) {
        let m = if self.updates == 0 { 0.0 } else { self.momentum };
        for (r, &b) in self.interp.iter_mut().zip(interp) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.ordin.iter_mut().zip(ordin) {
            *r = m * *r + (1.0 - m) * b;
        }
        self.updates += 1;
    }
}

/// Per-layer mask centres (flat cell indices), one per filter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskCenters {
    pub layer1: Vec<usize>,
    pub layer2: Vec<usize>,
}

/// Multiplies a nonnegative map by the mask centred at its own argmax.
pub fn mask_layer(map: &[f64], bank: &TemplateBank) -> Result<(Vec<f64>, usize)> {
    ensure!(
        map.len() == bank.n * bank.n,
        "map has {} cells, bank is {}x{}",
        map.len(),
        bank.n,
        bank.n
    );
    let center = argmax(map);
    Ok((apply_mask(map, bank, center), center))
}

pub fn apply_mask(map: &[f64], bank: &TemplateBank, center: usize) -> Vec<f64> {
    map.iter().zip(bank.mask(center)).map(|(v, m)| v * m).collect()
}

/// `out_c = alpha_c * x_c / running_rms_c`.
pub fn norm_layer(x: &FeatureMap, alpha: &[f64], running_rms: &[f64]) -> Result<FeatureMap> {
    ensure!(
        alpha.len() == x.channels && running_rms.len() == x.channels,
        "norm layer expects {} channels",
        x.channels
    );
    ensure!(
        running_rms.iter().all(|&r| r > 0.0),
        "running RMS must be positive"
    );
    let mut out = x.clone();
    for c in 0..x.channels {
        let k = alpha[c] / running_rms[c];
        out.channel_mut(c).iter_mut().for_each(|v| *v *= k);
    }
    Ok(out)
}

/// Returns `(p * x_interp + (1 - p) * x_ordin, p)`.
pub fn gate(x_interp: &FeatureMap, x_ordin: &FeatureMap, gate_logit: f64) -> Result<(FeatureMap, f64)> {
    ensure!(
        x_interp.same_shape(x_ordin),
        "track shapes differ: {:?} vs {:?}",
        x_interp.shape(),
        x_ordin.shape()
    );
    let p = sigmoid(gate_logit);
    let mut out = x_interp.clone();
    for (o, &b) in out.data.iter_mut().zip(&x_ordin.data) {
        *o = p * *o + (1.0 - p) * b;
    }
    Ok((out, p))
}

/// Pre-norm track activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TrackActivations {
    /// conv-interp-1 after ReLU.
    pub r1: FeatureMap,
    pub mask1: FeatureMap,
    pub h1: FeatureMap,
    /// conv-interp-2 after ReLU, before the mask.
    pub r2: FeatureMap,
    pub mask2: FeatureMap,
    pub h2: FeatureMap,
    pub centers: MaskCenters,
    /// conv-ordin after ReLU.
    pub rb: FeatureMap,
    pub pool_src: Vec<usize>,
    pub pb: FeatureMap,
}

/// Encoder outputs in the shape the losses and metrics consume.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTrace {
    pub x_interp: FeatureMap,
    pub x_ordin: FeatureMap,
    pub x_enc: FeatureMap,
    pub p: f64,
    pub per_filter_premask: Vec<Vec<f64>>,
    pub mask_centers: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainerOutput {
    pub trace: EncoderTrace,
    pub fcdec1: Vec<f64>,
    pub fcdec2: Vec<f64>,
}

/// Full forward state of one image.
#[derive(Debug, Clone)]
pub struct ExplainerPass {
    pub tracks: TrackActivations,
    pub output: ExplainerOutput,
}

fn masked_relu_layer(
    conv: &Conv2d,
    input: &FeatureMap,
    bank: &TemplateBank,
    fixed: Option<&[usize]>,
) -> Result<(FeatureMap, FeatureMap, FeatureMap, Vec<usize>)> {
    let r = nn::relu_map(&conv.forward(input)?);
    let mut mask = FeatureMap::zeros(r.channels, r.height, r.width);
    let mut h = r.clone();
    let mut centers = Vec::with_capacity(r.channels);
    for c in 0..r.channels {
        let center = match fixed {
            Some(fc) => fc[c],
            None => argmax(r.channel(c)),
        };
        let m = bank.mask(center);
        for (dst, (&mv, hv)) in mask.channel_mut(c).iter_mut().zip(m.iter().zip(h.channel_mut(c))) {
            *dst = mv;
            *hv *= mv;
        }
        centers.push(center);
    }
    Ok((r, mask, h, centers))
}

impl ExplainerParams {
    pub fn init(arch: &ExplainerArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::rng_for(seed, stream::EXPLAINER_INIT, 0);
        Ok(Self::init_with(arch, &mut r))
    }

    fn init_with(arch: &ExplainerArch, r: &mut impl RngCore) -> Self {
        let f = arch.filters;
        Self {
            arch: arch.clone(),
            interp1: Conv2d::init(arch.tap_channels, f, 3, 1, 1, r),
            interp2: Conv2d::init(f, f, 3, 1, 1, r),
            ordin: Conv2d::init(arch.tap_channels, f, 3, 1, 1, r),
            gate_logit: 0.0,
            alpha: vec![1.0; f],
            fcdec1: Linear::init(arch.decoder_input(), arch.fc1, r),
            fcdec2: Linear::init(arch.fc1, arch.fc2, r),
        }
    }

    pub fn p(&self) -> f64 {
        sigmoid(self.gate_logit)
    }

    fn check_tap(&self, x_tap: &FeatureMap, bank: &TemplateBank) -> Result<()> {
        let a = &self.arch;
        ensure!(
            x_tap.shape() == (a.tap_channels, a.size, a.size),
            "explainer expects a {}x{}x{} tap, got {:?}",
            a.tap_channels,
            a.size,
            a.size,
            x_tap.shape()
        );
        ensure!(
            bank.n == a.size,
            "template bank is {}x{} but maps are {}x{}",
            bank.n,
            bank.n,
            a.size,
            a.size
        );
        Ok(())
    }

    /// Both tracks up to (not including) the norm layers. With `fixed`
    /// the masks use the given centres instead of each map's argmax.
    pub fn tracks(&self, x_tap: &FeatureMap, bank: &TemplateBank, fixed: Option<&MaskCenters>) -> Result<TrackActivations> {
        self.check_tap(x_tap, bank)?;
        let (r1, mask1, h1, c1) = masked_relu_layer(&self.interp1, x_tap, bank, fixed.map(|m| m.layer1.as_slice()))?;
        let (r2, mask2, h2, c2) = masked_relu_layer(&self.interp2, &h1, bank, fixed.map(|m| m.layer2.as_slice()))?;
        let rb = nn::relu_map(&self.ordin.forward(x_tap)?);
        let (pb, pool_src) = nn::max_pool3(&rb);
        Ok(TrackActivations {
            r1,
            mask1,
            h1,
            r2,
            mask2,
            h2,
            centers: MaskCenters { layer1: c1, layer2: c2 },
            rb,
            pool_src,
            pb,
        })
    }

    /// Norm, gate and decoder on top of precomputed track activations.
    pub fn finish(&self, tracks: TrackActivations, stats: &NormStats) -> Result<ExplainerPass> {
        let x_interp = norm_layer(&tracks.h2, &self.alpha, &stats.interp)?;
        let x_ordin = norm_layer(&tracks.pb, &self.alpha, &stats.ordin)?;
        let (x_enc, p) = gate(&x_interp, &x_ordin, self.gate_logit)?;
        let (fcdec1, fcdec2) = decoder_forward(&x_enc, self)?;
        let n = self.arch.size;
        let trace = EncoderTrace {
            per_filter_premask: (0..tracks.r2.channels).map(|c| tracks.r2.channel(c).to_vec()).collect(),
            mask_centers: tracks.centers.layer2.iter().map(|&c| (c / n, c % n)).collect(),
            x_interp,
            x_ordin,
            x_enc,
            p,
        };
        Ok(ExplainerPass {
            tracks,
            output: ExplainerOutput { trace, fcdec1, fcdec2 },
        })
    }

    pub fn forward(
        &self,
        x_tap: &FeatureMap,
        stats: &NormStats,
        bank: &TemplateBank,
        fixed: Option<&MaskCenters>,
    ) -> Result<ExplainerPass> {
        self.finish(self.tracks(x_tap, bank, fixed)?, stats)
    }

    /// Backpropagates from the decoder back to `x_enc`; decoder parameter
    /// gradients are accumulated when `grads` is given.
    pub fn decoder_backward(
        &self,
        pass: &ExplainerPass,
        grad_d1: Option<&[f64]>,
        grad_d2: &[f64],
        grads: Option<&mut ExplainerParams>,
    ) -> FeatureMap {
        match grads {
            Some(g) => self.decoder_backward_into(pass, grad_d1, grad_d2, &mut g.fcdec1, &mut g.fcdec2),
            None => {
                let mut g1 = Linear::zeros(self.fcdec1.in_dim, self.fcdec1.out_dim);
                let mut g2 = Linear::zeros(self.fcdec2.in_dim, self.fcdec2.out_dim);
                self.decoder_backward_into(pass, grad_d1, grad_d2, &mut g1, &mut g2)
            }
        }
    }

    fn decoder_backward_into(
        &self,
        pass: &ExplainerPass,
        grad_d1: Option<&[f64]>,
        grad_d2: &[f64],
        g1: &mut Linear,
        g2: &mut Linear,
    ) -> FeatureMap {
        let out = &pass.output;
        let mut gz2 = grad_d2.to_vec();
        nn::relu_backward(&out.fcdec2, &mut gz2);
        let mut gd1 = self.fcdec2.backward(&out.fcdec1, &gz2, g2, true).expect("input grad");
        if let Some(extra) = grad_d1 {
            for (a, b) in gd1.iter_mut().zip(extra) {
                *a += b;
            }
        }
        nn::relu_backward(&out.fcdec1, &mut gd1);
        let x_enc = &out.trace.x_enc;
        let flat = self.fcdec1.backward(&x_enc.data, &gd1, g1, true).expect("input grad");
        FeatureMap {
            channels: x_enc.channels,
            height: x_enc.height,
            width: x_enc.width,
            data: flat,
        }
    }

    /// Gradient of `grad_d2 . fcdec2` w.r.t. the normalised interpretable
    /// feature maps `x_interp`.
    pub fn grad_wrt_interp(&self, pass: &ExplainerPass, grad_d2: &[f64]) -> FeatureMap {
        let g_enc = self.decoder_backward(pass, None, grad_d2, None);
        g_enc.scaled(pass.output.trace.p)
    }

    /// Full backward pass. `grad_premask` adds a gradient on the
    /// conv-interp-2 maps before masking (the filter loss attaches there).
    /// Mask centres are treated as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        x_tap: &FeatureMap,
        pass: &ExplainerPass,
        stats: &NormStats,
        grad_d1: Option<&[f64]>,
        grad_d2: &[f64],
        grad_premask: Option<&[Vec<f64>]>,
        grads: &mut ExplainerParams,
    ) {
        let g_enc = self.decoder_backward(pass, grad_d1, grad_d2, Some(grads));
        let tr = &pass.output.trace;
        let t = &pass.tracks;
        let p = tr.p;
        let mut g_w = 0.0;
        for ((g, a), b) in g_enc.data.iter().zip(&tr.x_interp.data).zip(&tr.x_ordin.data) {
            g_w += g * (a - b);
        }
        grads.gate_logit += g_w * p * (1.0 - p);

        let f = self.arch.filters;
        let mut g_h2 = g_enc.scaled(p);
        let mut g_pb = g_enc.scaled(1.0 - p);
        for c in 0..f {
            let (ri, ro) = (stats.interp[c], stats.ordin[c]);
            let gi = g_h2.channel_mut(c);
            let mut ga = 0.0;
            for (g, x) in gi.iter_mut().zip(t.h2.channel(c)) {
                ga += *g * x / ri;
                *g *= self.alpha[c] / ri;
            }
            let go = g_pb.channel_mut(c);
            for (g, x) in go.iter_mut().zip(t.pb.channel(c)) {
                ga += *g * x / ro;
                *g *= self.alpha[c] / ro;
            }
            grads.alpha[c] += ga;
        }

        // interpretable track
        let mut g_r2 = g_h2;
        for (g, m) in g_r2.data.iter_mut().zip(&t.mask2.data) {
            *g *= m;
        }
        if let Some(extra) = grad_premask {
            for (c, e) in extra.iter().enumerate() {
                for (g, v) in g_r2.channel_mut(c).iter_mut().zip(e) {
                    *g += v;
                }
            }
        }
        nn::relu_backward(&t.r2.data, &mut g_r2.data);
        let mut g_r1 = self
            .interp2
            .backward(&t.h1, &g_r2, &mut grads.interp2, true)
            .expect("input grad");
        for (g, m) in g_r1.data.iter_mut().zip(&t.mask1.data) {
            *g *= m;
        }
        nn::relu_backward(&t.r1.data, &mut g_r1.data);
        self.interp1.backward(x_tap, &g_r1, &mut grads.interp1, false);

        // ordinary track
        let mut g_rb = nn::max_pool3_backward(&g_pb, &t.pool_src);
        nn::relu_backward(&t.rb.data, &mut g_rb.data);
        self.ordin.backward(x_tap, &g_rb, &mut grads.ordin, false);
    }
}

/// Interpretable track alone: the masked conv-interp-2 output (before the
/// norm layer), each filter's pre-mask map, and its mask centre.
pub fn interpretable_track(
    x_tap: &FeatureMap,
    params: &ExplainerParams,
    bank: &TemplateBank,
) -> Result<(FeatureMap, Vec<Vec<f64>>, Vec<(usize, usize)>)> {
    let t = params.tracks(x_tap, bank, None)?;
    let n = params.arch.size;
    let premask = (0..t.r2.channels).map(|c| t.r2.channel(c).to_vec()).collect();
    let centers = t.centers.layer2.iter().map(|&c| (c / n, c % n)).collect();
    Ok((t.h2, premask, centers))
}

/// Ordinary track alone: conv-ordin, ReLU, shape-preserving max pool.
pub fn ordinary_track(x_tap: &FeatureMap, params: &ExplainerParams) -> Result<FeatureMap> {
    let a = &params.arch;
    ensure!(
        x_tap.shape() == (a.tap_channels, a.size, a.size),
        "explainer expects a {}x{}x{} tap, got {:?}",
        a.tap_channels,
        a.size,
        a.size,
        x_tap.shape()
    );
    let rb = nn::relu_map(&params.ordin.forward(x_tap)?);
    Ok(nn::max_pool3(&rb).0)
}

/// `(ReLU(FC1(flatten x_enc)), ReLU(FC2(.)))`.
pub fn decoder_forward(x_enc: &FeatureMap, params: &ExplainerParams) -> Result<(Vec<f64>, Vec<f64>)> {
    ensure!(
        x_enc.len() == params.arch.decoder_input(),
        "decoder expects {} inputs, got {}",
        params.arch.decoder_input(),
        x_enc.len()
    );
    let d1 = nn::relu_vec(&params.fcdec1.forward(&x_enc.data)?);
    let d2 = nn::relu_vec(&params.fcdec2.forward(&d1)?);
    Ok((d1, d2))
}
