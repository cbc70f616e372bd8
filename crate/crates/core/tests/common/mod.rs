//! Independent oracles shared by the core tests and the acceptance suite.
#![allow(dead_code)]

use explainer_core::explainer::{ExplainerArch, ExplainerParams, MaskCenters, NormStats};
use explainer_core::losses::{FilterAssignment, LossWeights, TemplateBank};
use explainer_core::optim::Parameters;
use explainer_core::performer::{classification_objective, LabeledImage, PerformerArch, PerformerParams, TapBundle};
use explainer_core::rng;
use explainer_core::training::{objective, ObjectiveInputs};
use explainer_core::FeatureMap;
use rand_chacha::ChaCha8Rng;

/// Mutual information between images and templates, by explicit
/// enumeration of the joint table `P(x, T) = prior'(T) p(x|T)`.
pub fn mi_oracle(maps: &[Vec<f64>], labels: &[usize], category: usize, bank: &TemplateBank, temperature: f64) -> f64 {
    let b = maps.len();
    let n2 = bank.n * bank.n;
    let admissible = |t: usize, i: usize| {
        if t < n2 {
            labels[i] == category
        } else {
            labels[i] != category
        }
    };
    let templates: Vec<usize> = (0..=n2).filter(|&t| (0..b).any(|i| admissible(t, i))).collect();
    let z: f64 = templates.iter().map(|&t| bank.prior[t]).sum();
    let mut joint = vec![vec![0.0f64; b]; templates.len()];
    for (a, &t) in templates.iter().enumerate() {
        let weights: Vec<f64> = (0..b)
            .map(|i| {
                if admissible(t, i) {
                    let s: f64 = maps[i].iter().zip(&bank.templates[t].values).map(|(x, y)| x * y).sum();
                    (s / temperature).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let total: f64 = weights.iter().sum();
        for i in 0..b {
            joint[a][i] = bank.prior[t] / z * weights[i] / total;
        }
    }
    let px: Vec<f64> = (0..b).map(|i| joint.iter().map(|row| row[i]).sum()).collect();
    let mut mi = 0.0;
    for (a, row) in joint.iter().enumerate() {
        let pt: f64 = bank.prior[templates[a]] / z;
        for i in 0..b {
            if row[i] > 0.0 {
                mi += row[i] * (row[i] / (px[i] * pt)).ln();
            }
        }
    }
    mi
}

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let den = a.abs().max(b.abs());
    if den < 1e-10 {
        (a - b).abs()
    } else {
        (a - b).abs() / den
    }
}

pub fn uniform_map(r: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng::uniform(r, lo, hi)).collect()
}

pub struct GradCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn rel_err(&self) -> f64 {
        rel_err(self.analytic, self.numeric)
    }
}

/// A random explainer objective instance at the default tap geometry.
pub struct ExplainerInstance {
    pub params: ExplainerParams,
    pub stats: NormStats,
    pub bank: TemplateBank,
    pub taps: Vec<TapBundle>,
    pub labels: Vec<usize>,
    pub assignment: FilterAssignment,
    pub weights: LossWeights,
    pub centers: Vec<MaskCenters>,
}

impl ExplainerInstance {
    pub fn new(seed: u64, batch: usize) -> Self {
        let arch = ExplainerArch { tap_channels: 32, size: 8, filters: 16, fc1: 64, fc2: 32 };
        let mut params = ExplainerParams::init(&arch, seed).unwrap();
        let mut r = rng::rng_for(seed, 1000, 0);
        params.gate_logit = rng::uniform(&mut r, -1.0, 1.0);
        for a in &mut params.alpha {
            *a = rng::uniform(&mut r, 0.5, 1.5);
        }
        for b in params.interp1.bias.iter_mut().chain(params.interp2.bias.iter_mut()) {
            *b = rng::uniform(&mut r, 0.0, 0.2);
        }
        let mut stats = NormStats::new(16);
        stats.interp = uniform_map(&mut r, 16, 0.5, 2.0);
        stats.ordin = uniform_map(&mut r, 16, 0.5, 2.0);
        let bank = TemplateBank::from_constants(8, &Default::default()).unwrap();
        let taps: Vec<TapBundle> = (0..batch)
            .map(|_| TapBundle {
                x_tap: FeatureMap::from_vec(32, 8, 8, uniform_map(&mut r, 32 * 64, 0.0, 1.0)).unwrap(),
                fc1_star: uniform_map(&mut r, 64, 0.0, 2.0),
                fc2_star: uniform_map(&mut r, 32, 0.0, 2.0),
                logits: vec![0.0, 0.0],
            })
            .collect();
        let labels: Vec<usize> = (0..batch).map(|i| i % 2).collect();
        let assignment = FilterAssignment((0..16).map(|f| f % 2).collect());
        let weights = LossWeights { filter: Some(0.5), ..Default::default() };
        let centers = taps
            .iter()
            .map(|t| params.tracks(&t.x_tap, &bank, None).unwrap().centers)
            .collect();
        Self { params, stats, bank, taps, labels, assignment, weights, centers }
    }

    pub fn loss(&self, params: &ExplainerParams) -> (f64, ExplainerParams) {
        let refs: Vec<&TapBundle> = self.taps.iter().collect();
        let inputs = ObjectiveInputs {
            taps: &refs,
            labels: &self.labels,
            assignment: &self.assignment,
            bank: &self.bank,
            weights: &self.weights,
            temperature: 1.0,
        };
        let (b, g, _) = objective(params, &self.stats, &inputs, Some(&self.centers)).unwrap();
        (b.total, g)
    }

    /// Compares analytic and central-difference gradients of the total
    /// loss on `count` parameters: the gate logit, one alpha, and the rest
    /// drawn at random across all tensors.
    pub fn check(&self, count: usize, seed: u64) -> Vec<GradCheck> {
        let (_, grads) = self.loss(&self.params);
        let tensors = self.params.tensors();
        let mut offsets = Vec::new();
        let mut names: Vec<(String, usize)> = Vec::new();
        for (n, t) in &tensors {
            offsets.push((names.len(), t.len()));
            names.extend((0..t.len()).map(|i| (n.to_string(), i)));
        }
        let gate_idx = names.iter().position(|(n, _)| n == "gate_logit").unwrap();
        let alpha_idx = names.iter().position(|(n, _)| n == "alpha").unwrap() + 3;
        let mut r = rng::rng_for(seed, 2000, 0);
        let mut picks = vec![gate_idx, alpha_idx];
        // round-robin over tensors so every layer is represented
        let mut t = 0;
        while picks.len() < count {
            let (start, len) = offsets[t % offsets.len()];
            t += 1;
            let k = start + rng::below(&mut r, len);
            if !picks.contains(&k) {
                picks.push(k);
            }
        }
        picks
            .into_iter()
            .map(|k| {
                let x0 = self.params.get_flat(k).unwrap();
                let h = 1e-6 * x0.abs().max(1.0);
                let numeric = central_difference(
                    |x| {
                        let mut p = self.params.clone();
                        p.set_flat(k, x);
                        self.loss(&p).0
                    },
                    x0,
                    h,
                );
                GradCheck {
                    name: format!("{}[{}]", names[k].0, names[k].1),
                    analytic: grads.get_flat(k).unwrap(),
                    numeric,
                }
            })
            .collect()
    }
}

/// Gradient check of the filter loss w.r.t. every map entry.
pub fn check_filter_loss_map_gradients(seed: u64, batch: usize, n: usize) -> Vec<GradCheck> {
    use explainer_core::losses::{build_template_bank, filter_loss, filter_loss_with_grad};
    let mut r = rng::rng_for(seed, 3000, 0);
    let bank = build_template_bank(n, 1.0, 4.0, 0.8).unwrap();
    let maps: Vec<Vec<f64>> = (0..batch).map(|_| uniform_map(&mut r, n * n, 0.0, 2.0)).collect();
    let labels: Vec<usize> = (0..batch).map(|i| usize::from(i == batch - 1)).collect();
    let refs: Vec<&[f64]> = maps.iter().map(|m| m.as_slice()).collect();
    let v = filter_loss_with_grad(&refs, &labels, 0, &bank, 1.0).unwrap();
    let mut out = Vec::new();
    for i in 0..batch {
        for j in 0..n * n {
            let numeric = central_difference(
                |x| {
                    let mut m = maps.clone();
                    m[i][j] = x;
                    let rr: Vec<&[f64]> = m.iter().map(|m| m.as_slice()).collect();
                    filter_loss(&rr, &labels, 0, &bank, 1.0).unwrap()
                },
                maps[i][j],
                1e-6,
            );
            out.push(GradCheck { name: format!("map{i}[{j}]"), analytic: v.grads[i][j], numeric });
        }
    }
    out
}

/// Gradient check of the performer's classification loss on a 2-image batch.
pub fn check_performer_gradients(seed: u64, count: usize) -> Vec<GradCheck> {
    let arch = PerformerArch { input_size: 32, fc1: 16, fc2: 8, ..Default::default() };
    let mut params = PerformerParams::init(&arch, seed).unwrap();
    let mut r = rng::rng_for(seed, 4000, 0);
    for (_, t) in params.tensors_mut() {
        if t.len() < 64 {
            t.iter_mut().for_each(|b| *b = rng::uniform(&mut r, 0.0, 0.1));
        }
    }
    let imgs: Vec<FeatureMap> = (0..2)
        .map(|_| FeatureMap::from_vec(1, 32, 32, uniform_map(&mut r, 32 * 32, 0.0, 1.0)).unwrap())
        .collect();
    let batch = [LabeledImage { image: &imgs[0], label: 0 }, LabeledImage { image: &imgs[1], label: 1 }];
    let (_, grads) = classification_objective(&params, &batch).unwrap();
    let total = params.num_parameters();
    (0..count)
        .map(|_| {
            let k = rng::below(&mut r, total);
            let x0 = params.get_flat(k).unwrap();
            let numeric = central_difference(
                |x| {
                    let mut p = params.clone();
                    p.set_flat(k, x);
                    classification_objective(&p, &batch).unwrap().0
                },
                x0,
                1e-6,
            );
            GradCheck { name: format!("performer[{k}]"), analytic: grads.get_flat(k).unwrap(), numeric }
        })
        .collect()
}
