//! The frozen classifier whose mid-level features get explained.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{self, Conv2d, Linear};
use crate::optim::{Parameters, Sgd};
use crate::rng::{self, stream};
use crate::tensor::{argmax, FeatureMap};

pub const CONV_LAYERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerformerArch {
    pub input_size: usize,
    pub input_channels: usize,
    pub conv_channels: [usize; CONV_LAYERS],
    pub fc1: usize,
    pub fc2: usize,
    pub classes: usize,
    /// 1-based index of the conv layer whose post-ReLU output is tapped.
    pub tap_layer: usize,
}

impl Default for PerformerArch {
    fn default() -> Self {
        Self {
            input_size: 64,
            input_channels: 1,
            conv_channels: [16, 32, 32, 32],
            fc1: 64,
            fc2: 32,
            classes: 2,
            tap_layer: 4,
        }
    }
}

impl PerformerArch {
    /// Stride of each conv layer: downsampling on the first three.
    pub fn stride(layer: usize) -> usize {
        if layer < 3 {
            2
        } else {
            1
        }
    }

    /// Spatial size after conv layer `layer` (0-based).
    pub fn spatial_after(&self, layer: usize) -> usize {
        let mut s = self.input_size;
        for l in 0..=layer {
            s = (s + 2 - 3) / Self::stride(l) + 1;
        }
        s
    }

    pub fn tap_size(&self) -> usize {
        self.spatial_after(self.tap_layer - 1)
    }

    pub fn tap_channels(&self) -> usize {
        self.conv_channels[self.tap_layer - 1]
    }

    /// Receptive field (pixels) of one tap-layer unit.
    pub fn tap_receptive_field(&self) -> usize {
        let (mut rf, mut jump) = (1usize, 1usize);
        for l in 0..self.tap_layer {
            rf += 2 * jump;
            jump *= Self::stride(l);
        }
        rf
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=CONV_LAYERS).contains(&self.tap_layer) {
            return bad(format!("tap_layer must be in 1..={CONV_LAYERS}, got {}", self.tap_layer));
        }
        if self.classes < 1 {
            return bad(String::from("classes must be at least 1"));
        }
        if self.fc1 < self.classes || self.fc2 < self.classes {
            return bad(format!(
                "fc widths ({}, {}) must be at least the class count {}",
                self.fc1, self.fc2, self.classes
            ));
        }
        if self.conv_channels.iter().any(|&c| c == 0) || self.input_channels == 0 {
            return bad(String::from("channel counts must be positive"));
        }
        let n = self.tap_size();
        if n < 4 {
            return bad(format!("tap layer is {n}x{n}; at least 4x4 is required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformerParams {
    pub arch: PerformerArch,
    pub convs: Vec<Conv2d>,
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

/// Everything the explainer consumes from one performer pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapBundle {
    pub x_tap: FeatureMap,
    pub fc1_star: Vec<f64>,
    pub fc2_star: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Intermediate activations retained for backpropagation.
#[derive(Debug, Clone)]
pub struct PerformerTrace {
    /// Post-ReLU output of each conv layer.
    pub conv: Vec<FeatureMap>,
    pub fc1: Vec<f64>,
    pub fc2: Vec<f64>,
    pub logits: Vec<f64>,
}

impl PerformerTrace {
    pub fn tap(&self, arch: &PerformerArch) -> TapBundle {
        TapBundle {
            x_tap: self.conv[arch.tap_layer - 1].clone(),
            fc1_star: self.fc1.clone(),
            fc2_star: self.fc2.clone(),
            logits: self.logits.clone(),
        }
    }
}

impl Parameters for PerformerParams {
    fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        const NAMES: [(&str, &str); CONV_LAYERS] = [
            ("conv1.weight", "conv1.bias"),
            ("conv2.weight", "conv2.bias"),
            ("conv3.weight", "conv3.bias"),
            ("conv4.weight", "conv4.bias"),
        ];
        let mut out: Vec<(&'static str, &[f64])> = Vec::new();
        for (conv, (w, b)) in self.convs.iter().zip(NAMES) {
            out.push((w, &conv.weight));
            out.push((b, &conv.bias));
        }
        out.extend([
            ("fc1.weight", &self.fc1.weight[..]),
            ("fc1.bias", &self.fc1.bias[..]),
            ("fc2.weight", &self.fc2.weight[..]),
            ("fc2.bias", &self.fc2.bias[..]),
            ("fc3.weight", &self.fc3.weight[..]),
            ("fc3.bias", &self.fc3.bias[..]),
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        const NAMES: [(&str, &str); CONV_LAYERS] = [
            ("conv1.weight", "conv1.bias"),
            ("conv2.weight", "conv2.bias"),
            ("conv3.weight", "conv3.bias"),
            ("conv4.weight", "conv4.bias"),
        ];
        let mut out: Vec<(&'static str, &mut [f64])> = Vec::new();
        for (conv, (w, b)) in self.convs.iter_mut().zip(NAMES) {
            out.push((w, &mut conv.weight));
            out.push((b, &mut conv.bias));
        }
        out.extend([
            ("fc1.weight", &mut self.fc1.weight[..]),
            ("fc1.bias", &mut self.fc1.bias[..]),
            ("fc2.weight", &mut self.fc2.weight[..]),
            ("fc2.bias", &mut self.fc2.bias[..]),
            ("fc3.weight", &mut self.fc3.weight[..]),
            ("fc3.bias", &mut self.fc3.bias[..]),
        ]);
        out
    }
}

impl PerformerParams {
    pub fn zeros(arch: &PerformerArch) -> Result<Self> {
        arch.validate()?;
        let mut in_ch = arch.input_channels;
        let convs = (0..CONV_LAYERS)
            .map(|l| {
                let c = Conv2d::zeros(in_ch, arch.conv_channels[l], 3, PerformerArch::stride(l), 1);
                in_ch = arch.conv_channels[l];
                c
            })
            .collect();
        let last = arch.spatial_after(CONV_LAYERS - 1);
        Ok(Self {
            arch: arch.clone(),
            convs,
            fc1: Linear::zeros(arch.conv_channels[CONV_LAYERS - 1] * last * last, arch.fc1),
            fc2: Linear::zeros(arch.fc1, arch.fc2),
            fc3: Linear::zeros(arch.fc2, arch.classes),
        })
    }

    pub fn init(arch: &PerformerArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::rng_for(seed, stream::PERFORMER_INIT, 0);
        let mut in_ch = arch.input_channels;
        let convs = (0..CONV_LAYERS)
            .map(|l| {
                let c = Conv2d::init(in_ch, arch.conv_channels[l], 3, PerformerArch::stride(l), 1, &mut r);
                in_ch = arch.conv_channels[l];
                c
            })
            .collect();
        let last = arch.spatial_after(CONV_LAYERS - 1);
        Ok(Self {
            arch: arch.clone(),
            convs,
            fc1: Linear::init(arch.conv_channels[CONV_LAYERS - 1] * last * last, arch.fc1, &mut r),
            fc2: Linear::init(arch.fc1, arch.fc2, &mut r),
            fc3: Linear::init(arch.fc2, arch.classes, &mut r),
        })
    }

    pub fn trace(&self, image: &FeatureMap) -> Result<PerformerTrace> {
        let a = &self.arch;
        ensure!(
            image.shape() == (a.input_channels, a.input_size, a.input_size),
            "performer expects a {}x{}x{} image, got {:?}",
            a.input_channels,
            a.input_size,
            a.input_size,
            image.shape()
        );
        let mut conv = Vec::with_capacity(CONV_LAYERS);
        let mut x = image;
        for layer in &self.convs {
            let y = nn::relu_map(&layer.forward(x)?);
            conv.push(y);
            x = conv.last().expect("pushed");
        }
        let fc1 = nn::relu_vec(&self.fc1.forward(&x.data)?);
        let fc2 = nn::relu_vec(&self.fc2.forward(&fc1)?);
        let logits = self.fc3.forward(&fc2)?;
        Ok(PerformerTrace { conv, fc1, fc2, logits })
    }

    pub fn forward(&self, image: &FeatureMap) -> Result<TapBundle> {
        Ok(self.trace(image)?.tap(&self.arch))
    }

    /// Applies only the final classification layer.
    pub fn classify_from_fc2(&self, fc2: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            fc2.len() == self.arch.fc2,
            "classify_from_fc2 expects length {}, got {}",
            self.arch.fc2,
            fc2.len()
        );
        self.fc3.forward(fc2)
    }

    /// Backpropagates `grad_logits`. Parameter gradients are accumulated
    /// into `grads` when given; the return value is the gradient w.r.t. the
    /// (post-ReLU) output of conv layer `stop_layer` (1-based), w.r.t. the
    /// image when it is `Some(0)`, and empty when it is `None`.
    pub fn backward(
        &self,
        image: &FeatureMap,
        trace: &PerformerTrace,
        grad_logits: &[f64],
        mut grads: Option<&mut PerformerParams>,
        stop_layer: Option<usize>,
    ) -> FeatureMap {
        let mut scratch = self.zeros_like();
        let g = grads.as_deref_mut().unwrap_or(&mut scratch);
        let mut g2 = self.fc3.backward(&trace.fc2, grad_logits, &mut g.fc3, true).expect("input grad");
        nn::relu_backward(&trace.fc2, &mut g2);
        let mut g1 = self.fc2.backward(&trace.fc1, &g2, &mut g.fc2, true).expect("input grad");
        nn::relu_backward(&trace.fc1, &mut g1);
        let last = &trace.conv[CONV_LAYERS - 1];
        let flat = self.fc1.backward(&last.data, &g1, &mut g.fc1, true).expect("input grad");
        let mut gmap = FeatureMap {
            channels: last.channels,
            height: last.height,
            width: last.width,
            data: flat,
        };
        for l in (0..CONV_LAYERS).rev() {
            if Some(l + 1) == stop_layer {
                return gmap;
            }
            nn::relu_backward(&trace.conv[l].data, &mut gmap.data);
            let input = if l == 0 { image } else { &trace.conv[l - 1] };
            let want_input = l > 0 || stop_layer == Some(0);
            match self.convs[l].backward(input, &gmap, &mut g.convs[l], want_input) {
                Some(next) => gmap = next,
                None => return FeatureMap::zeros(0, 0, 0),
            }
        }
        gmap
    }

    /// Gradient of `grad_logits . logits` w.r.t. the tap activation.
    pub fn grad_wrt_tap(&self, image: &FeatureMap, trace: &PerformerTrace, grad_logits: &[f64]) -> FeatureMap {
        self.backward(image, trace, grad_logits, None, Some(self.arch.tap_layer))
    }
}

/// An image paired with its class label.
#[derive(Debug, Clone, Copy)]
pub struct LabeledImage<'a> {
    pub image: &'a FeatureMap,
    pub label: usize,
}

/// Mean cross-entropy over `batch` and the accumulated parameter gradient.
pub fn classification_objective(params: &PerformerParams, batch: &[LabeledImage<'_>]) -> Result<(f64, PerformerParams)> {
    ensure!(!batch.is_empty(), "empty batch");
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for s in batch {
        ensure!(s.label < params.arch.classes, "label {} out of range", s.label);
        let trace = params.trace(s.image)?;
        let (l, mut g) = nn::cross_entropy(&trace.logits, s.label);
        loss += l * inv;
        g.iter_mut().for_each(|v| *v *= inv);
        params.backward(s.image, &trace, &g, Some(&mut grads), None);
    }
    Ok((loss, grads))
}

pub fn accuracy(params: &PerformerParams, samples: &[LabeledImage<'_>]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for s in samples {
        if argmax(&params.forward(s.image)?.logits) == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerformerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub min_val_accuracy: f64,
}

impl Default for PerformerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 16,
            learning_rate: 0.01,
            lr_decay: 0.9,
            momentum: 0.9,
            seed: 0,
            min_val_accuracy: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformerEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainStatus {
    Converged,
    Failed,
}

#[derive(Debug, Clone)]
pub struct PerformerRun {
    pub params: PerformerParams,
    pub log: Vec<PerformerEpoch>,
    pub final_loss: f64,
    pub val_accuracy: f64,
    pub status: TrainStatus,
}

/// Cross-entropy training with momentum SGD. A run whose final validation
/// accuracy falls below `min_val_accuracy` is returned with
/// [`TrainStatus::Failed`] so the caller can still persist it.
pub fn train_performer(
    arch: &PerformerArch,
    train: &[LabeledImage<'_>],
    val: &[LabeledImage<'_>],
    cfg: &PerformerTrainConfig,
) -> Result<PerformerRun> {
    ensure!(cfg.batch_size >= 1, "batch size must be at least 1");
    let mut params = PerformerParams::init(arch, cfg.seed)?;
    let mut opt = Sgd::new(&params, cfg.momentum);
    let mut shuffle_rng = rng::rng_for(cfg.seed, stream::PERFORMER_SHUFFLE, 0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut final_loss = f64::NAN;
    let mut lr = cfg.learning_rate;
    for epoch in 0..cfg.epochs {
        rng::shuffle(&mut shuffle_rng, &mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<LabeledImage<'_>> = chunk.iter().map(|&i| train[i]).collect();
            let (loss, grads) = classification_objective(&params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step: epoch,
                    term: "classification",
                });
            }
            opt.step(&mut params, &grads, lr);
            total += loss;
            batches += 1;
        }
        final_loss = total / batches.max(1) as f64;
        log.push(PerformerEpoch {
            epoch,
            mean_loss: final_loss,
            val_accuracy: accuracy(&params, val)?,
        });
        lr *= cfg.lr_decay;
    }
    let val_accuracy = accuracy(&params, val)?;
    let status = if val_accuracy >= cfg.min_val_accuracy {
        TrainStatus::Converged
    } else {
        TrainStatus::Failed
    };
    Ok(PerformerRun {
        params,
        log,
        final_loss,
        val_accuracy,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(arch: &PerformerArch, seed: u64) -> FeatureMap {
        let mut r = rng::rng_for(seed, 99, 0);
        let mut img = FeatureMap::zeros(1, arch.input_size, arch.input_size);
        for v in &mut img.data {
            *v = rng::unit(&mut r);
        }
        img
    }

    #[test]
    fn default_arch_taps_eight_by_eight() {
        let arch = PerformerArch::default();
        assert_eq!(arch.tap_size(), 8);
        assert_eq!(PerformerArch { tap_layer: 3, ..arch.clone() }.tap_size(), 8);
        assert_eq!(arch.tap_receptive_field(), 31);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let arch = PerformerArch::default();
        let p = PerformerParams::init(&arch, 1).unwrap();
        let tb = p.forward(&FeatureMap::zeros(1, 64, 64)).unwrap();
        assert!(tb.x_tap.data.iter().all(|&v| v == 0.0));
        assert!(tb.fc1_star.iter().chain(&tb.fc2_star).all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_pure_and_fc_nonnegative() {
        let arch = PerformerArch::default();
        let p = PerformerParams::init(&arch, 2).unwrap();
        let img = random_image(&arch, 3);
        let a = p.forward(&img).unwrap();
        assert_eq!(a, p.forward(&img).unwrap());
        assert!(a.fc1_star.iter().chain(&a.fc2_star).all(|&v| v >= 0.0));
    }

    #[test]
    fn classify_from_fc2_matches_full_pass() {
        let arch = PerformerArch::default();
        let p = PerformerParams::init(&arch, 4).unwrap();
        let tb = p.forward(&random_image(&arch, 5)).unwrap();
        assert_eq!(p.classify_from_fc2(&tb.fc2_star).unwrap(), tb.logits);
        assert!(p.classify_from_fc2(&[0.0; 3]).is_err());
    }

    #[test]
    fn classify_zero_and_scaled_inputs() {
        let arch = PerformerArch::default();
        let mut p = PerformerParams::init(&arch, 4).unwrap();
        p.fc3.bias.fill(0.0);
        assert!(p.classify_from_fc2(&vec![0.0; arch.fc2]).unwrap().iter().all(|&v| v == 0.0));
        let tb = p.forward(&random_image(&arch, 6)).unwrap();
        let doubled: Vec<f64> = tb.fc2_star.iter().map(|v| 2.0 * v).collect();
        assert_eq!(
            argmax(&p.classify_from_fc2(&tb.fc2_star).unwrap()),
            argmax(&p.classify_from_fc2(&doubled).unwrap())
        );
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let p = PerformerParams::init(&PerformerArch::default(), 0).unwrap();
        assert!(matches!(p.forward(&FeatureMap::zeros(1, 32, 32)), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let arch = PerformerArch::default();
        let img = random_image(&arch, 1);
        let s = [LabeledImage { image: &img, label: 0 }];
        let cfg = PerformerTrainConfig { epochs: 0, seed: 11, ..Default::default() };
        let run = train_performer(&arch, &s, &s, &cfg).unwrap();
        assert_eq!(run.params, PerformerParams::init(&arch, 11).unwrap());
        assert!(run.log.is_empty());
    }

    #[test]
    fn bad_arch_is_rejected() {
        let arch = PerformerArch { fc2: 1, classes: 2, ..Default::default() };
        assert!(arch.validate().is_err());
        let arch = PerformerArch { input_size: 16, ..Default::default() };
        assert!(arch.validate().is_err());
    }
}
