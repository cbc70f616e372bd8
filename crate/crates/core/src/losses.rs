//! Terms of the explainer objective: part templates, the mutual-information
//! filter loss, reconstruction and gate losses, and their weighted total.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::explainer::ExplainerOutput;
use crate::performer::TapBundle;

/// Shape constants of the template bank. `None` selects the size-dependent
/// default (`tau = 0.5 / n^2`, positive prior mass `n^2 / (1 + n^2)`, score
/// temperature `4 * tau`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateConstants {
    pub tau: Option<f64>,
    pub beta: f64,
    pub positive_mass: Option<f64>,
    pub score_temperature: Option<f64>,
}

impl Default for TemplateConstants {
    fn default() -> Self {
        Self {
            tau: None,
            beta: 4.0,
            positive_mass: None,
            score_temperature: None,
        }
    }
}

impl TemplateConstants {
    pub fn tau_for(&self, n: usize) -> f64 {
        self.tau.unwrap_or(0.5 / (n * n) as f64)
    }

    pub fn score_temperature_for(&self, n: usize) -> f64 {
        self.score_temperature.unwrap_or_else(|| 4.0 * self.tau_for(n))
    }

    pub fn positive_mass_for(&self, n: usize) -> f64 {
        let n2 = (n * n) as f64;
        self.positive_mass.unwrap_or(n2 / (1.0 + n2))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.tau.map_or(true, |t| t > 0.0 && t.is_finite())
            && self.beta > 0.0
            && self.positive_mass.map_or(true, |a| a > 0.0 && a < 1.0)
            && self.score_temperature.map_or(true, |t| t > 0.0 && t.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid template constants {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartTemplate {
    /// Peak cell `(row, col)`; `None` marks the negative template.
    pub center: Option<(usize, usize)>,
    /// `n x n`, row-major.
    pub values: Vec<f64>,
}

/// `t_ij = tau * max(1 - beta * |(i,j) - mu|_1 / n, -1)`.
pub fn build_template(n: usize, center: (usize, usize), tau: f64, beta: f64) -> Result<PartTemplate> {
    ensure!(n >= 1, "template size must be at least 1");
    ensure!(
        center.0 < n && center.1 < n,
        "template centre {:?} outside {}x{} grid",
        center,
        n,
        n
    );
    let mut values = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let d = i.abs_diff(center.0) + j.abs_diff(center.1);
            values.push(tau * (1.0 - beta * d as f64 / n as f64).max(-1.0));
        }
    }
    Ok(PartTemplate {
        center: Some(center),
        values,
    })
}

/// `n^2` positive templates (centres in row-major order) followed by the
/// negative template, with the matching prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateBank {
    pub n: usize,
    pub tau: f64,
    pub beta: f64,
    pub positive_mass: f64,
    pub templates: Vec<PartTemplate>,
    pub prior: Vec<f64>,
}

pub fn build_template_bank(n: usize, tau: f64, beta: f64, positive_mass: f64) -> Result<TemplateBank> {
    ensure!(
        positive_mass > 0.0 && positive_mass < 1.0,
        "positive prior mass must lie in (0, 1), got {}",
        positive_mass
    );
    let n2 = n * n;
    let mut templates = Vec::with_capacity(n2 + 1);
    for i in 0..n {
        for j in 0..n {
            templates.push(build_template(n, (i, j), tau, beta)?);
        }
    }
    templates.push(PartTemplate {
        center: None,
        values: vec![-tau; n2],
    });
    let mut prior = vec![positive_mass / n2 as f64; n2];
    prior.push(1.0 - positive_mass);
    Ok(TemplateBank {
        n,
        tau,
        beta,
        positive_mass,
        templates,
        prior,
    })
}

impl TemplateBank {
    pub fn from_constants(n: usize, c: &TemplateConstants) -> Result<Self> {
        c.validate()?;
        build_template_bank(n, c.tau_for(n), c.beta, c.positive_mass_for(n))
    }

    pub fn positive(&self, flat_center: usize) -> &PartTemplate {
        &self.templates[flat_center]
    }

    pub fn negative(&self) -> &PartTemplate {
        &self.templates[self.n * self.n]
    }

    /// `max(T_mu, 0) / tau`, which is 1 at `mu` and 0 from L1 distance `n/beta` on.
    pub fn mask(&self, flat_center: usize) -> Vec<f64> {
        self.templates[flat_center]
            .values
            .iter()
            .map(|&v| v.max(0.0) / self.tau)
            .collect()
    }
}

/// Frobenius inner product.
pub fn template_score(map: &[f64], template: &PartTemplate) -> Result<f64> {
    ensure!(
        map.len() == template.values.len(),
        "map has {} cells, template {}",
        map.len(),
        template.values.len()
    );
    Ok(map.iter().zip(&template.values).map(|(a, b)| a * b).sum())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(values.map(|v| libm::exp(v - m)).sum::<f64>())
}

/// Value and map gradients of one filter's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterLossValue {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Negative mutual information between a filter's maps over a mini-batch
/// and the template bank.
///
/// Images of `category` may be explained by any positive template; all other
/// images only by the negative one. `p(x|T)` is a softmax over the images
/// admissible for `T`, and templates with no admissible image in the batch
/// are dropped with the prior renormalised over the rest.
pub fn filter_loss(
    maps: &[&[f64]],
    labels: &[usize],
    category: usize,
    bank: &TemplateBank,
    temperature: f64,
) -> Result<f64> {
    Ok(filter_loss_impl(maps, labels, category, bank, temperature, false)?.loss)
}

pub fn filter_loss_with_grad(
    maps: &[&[f64]],
    labels: &[usize],
    category: usize,
    bank: &TemplateBank,
    temperature: f64,
) -> Result<FilterLossValue> {
    filter_loss_impl(maps, labels, category, bank, temperature, true)
}

fn filter_loss_impl(
    maps: &[&[f64]],
    labels: &[usize],
    category: usize,
    bank: &TemplateBank,
    temperature: f64,
    with_grad: bool,
) -> Result<FilterLossValue> {
    let b = maps.len();
    ensure!(b >= 1, "filter loss needs at least one image");
    ensure!(labels.len() == b, "{} maps but {} labels", b, labels.len());
    ensure!(temperature > 0.0, "score temperature must be positive");
    let n2 = bank.n * bank.n;
    for m in maps {
        ensure!(m.len() == n2, "map has {} cells, bank expects {}", m.len(), n2);
    }

    let positives: Vec<usize> = (0..b).filter(|&i| labels[i] == category).collect();
    let negatives: Vec<usize> = (0..b).filter(|&i| labels[i] != category).collect();
    // (template index, admissible images)
    let mut active: Vec<(usize, &[usize])> = Vec::with_capacity(n2 + 1);
    if !positives.is_empty() {
        active.extend((0..n2).map(|t| (t, positives.as_slice())));
    }
    if !negatives.is_empty() {
        active.push((n2, negatives.as_slice()));
    }
    let z: f64 = active.iter().map(|&(t, _)| bank.prior[t]).sum();

    // log q[t][k] for the k-th admissible image of template t
    let mut log_q: Vec<Vec<f64>> = Vec::with_capacity(active.len());
    for &(t, imgs) in &active {
        let s: Vec<f64> = imgs
            .iter()
            .map(|&i| template_score(maps[i], &bank.templates[t]).map(|v| v / temperature))
            .collect::<Result<_>>()?;
        let lse = log_sum_exp(s.iter().copied());
        log_q.push(s.into_iter().map(|v| v - lse).collect());
    }
    let log_pi: Vec<f64> = active.iter().map(|&(t, _)| libm::log(bank.prior[t] / z)).collect();

    // log p(x_i) = logsumexp_t (log pi_t + log q_t(i)) over templates admitting i
    let mut terms: Vec<Vec<f64>> = vec![Vec::new(); b];
    for (a, &(_, imgs)) in active.iter().enumerate() {
        for (k, &i) in imgs.iter().enumerate() {
            terms[i].push(log_pi[a] + log_q[a][k]);
        }
    }
    let log_p: Vec<f64> = terms.iter().map(|t| log_sum_exp(t.iter().copied())).collect();

    let mut mi = 0.0;
    for (a, &(_, imgs)) in active.iter().enumerate() {
        let pi = libm::exp(log_pi[a]);
        for (k, &i) in imgs.iter().enumerate() {
            let lq = log_q[a][k];
            mi += pi * libm::exp(lq) * (lq - log_p[i]);
        }
    }

    let mut grads = Vec::new();
    if with_grad {
        grads = vec![vec![0.0; n2]; b];
        for (a, &(t, imgs)) in active.iter().enumerate() {
            let pi = libm::exp(log_pi[a]);
            // dMI/dq = pi (log q - log p); then through the softmax
            let q: Vec<f64> = log_q[a].iter().map(|&l| libm::exp(l)).collect();
            let g: Vec<f64> = imgs
                .iter()
                .enumerate()
                .map(|(k, &i)| pi * (log_q[a][k] - log_p[i]))
                .collect();
            let mean: f64 = q.iter().zip(&g).map(|(q, g)| q * g).sum();
            for (k, &i) in imgs.iter().enumerate() {
                let ds = q[k] * (g[k] - mean);
                if ds == 0.0 {
                    continue;
                }
                // loss = -MI
                let coef = -ds / temperature;
                for (dst, tv) in grads[i].iter_mut().zip(&bank.templates[t].values) {
                    *dst += coef * tv;
                }
            }
        }
    }
    Ok(FilterLossValue { loss: -mi, grads })
}

/// Target category per interpretable filter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterAssignment(pub Vec<usize>);

/// Row-wise argmax of an `F x C` mean-activation matrix, lowest index on ties.
pub fn assign_filter_categories(mean_activation: &[Vec<f64>]) -> FilterAssignment {
    FilterAssignment(
        mean_activation
            .iter()
            .map(|row| crate::tensor::argmax(row))
            .collect(),
    )
}

/// `sum_l lambda_l * |x_l - x*_l|^2`.
pub fn reconstruction_loss(outputs: &[&[f64]], targets: &[&[f64]], lambdas: &[f64]) -> Result<f64> {
    ensure!(
        outputs.len() == targets.len() && outputs.len() == lambdas.len(),
        "reconstruction needs one target and weight per layer"
    );
    let mut total = 0.0;
    for ((x, t), &lambda) in outputs.iter().zip(targets).zip(lambdas) {
        ensure!(x.len() == t.len(), "layer length {} vs target {}", x.len(), t.len());
        total += lambda * x.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total)
}

/// `-eta * ln p`. `p = 1` is accepted because a saturated sigmoid rounds to it.
pub fn gate_loss(p: f64, eta: f64) -> Result<f64> {
    ensure!(p > 0.0 && p <= 1.0, "gate value {} outside (0, 1]", p);
    Ok(-eta * libm::log(p))
}

/// Scalar weights of the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub recon_fc1: f64,
    pub recon_fc2: f64,
    pub eta: f64,
    /// Per-filter weight; `None` means `5 / (F * B * n^2)`.
    pub filter: Option<f64>,
    /// Divide each reconstruction weight by the mean squared norm of its
    /// target over the training set.
    pub normalize_recon: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon_fc1: 1.0,
            recon_fc2: 1.0,
            eta: 0.2,
            filter: Some(0.5),
            normalize_recon: true,
        }
    }
}

impl LossWeights {
    pub fn filter_weight(&self, filters: usize, batch: usize, n: usize) -> f64 {
        self.filter
            .unwrap_or_else(|| 5.0 / (filters * batch * n * n) as f64)
    }

    /// Weights with target normalisation folded into `recon_fc1`/`recon_fc2`.
    pub fn resolved(&self, targets: &[&TapBundle]) -> Result<LossWeights> {
        if !self.normalize_recon {
            return Ok(self.clone());
        }
        ensure!(!targets.is_empty(), "cannot normalise reconstruction weights without targets");
        let energy = |f: fn(&TapBundle) -> &[f64]| {
            targets.iter().map(|t| f(t).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / targets.len() as f64
        };
        let (e1, e2) = (energy(|t| &t.fc1_star), energy(|t| &t.fc2_star));
        if !(e1 > 0.0 && e2 > 0.0) {
            return Err(Error::Config("reconstruction targets are identically zero".into()));
        }
        Ok(LossWeights {
            recon_fc1: self.recon_fc1 / e1,
            recon_fc2: self.recon_fc2 / e2,
            normalize_recon: false,
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if finite_nonneg(self.recon_fc1)
            && finite_nonneg(self.recon_fc2)
            && finite_nonneg(self.eta)
            && self.filter.map_or(true, finite_nonneg)
        {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub gate: f64,
    pub filter: f64,
    pub total: f64,
}

/// Batch objective: mean per-image reconstruction, the gate term, and the
/// weighted filter losses summed in filter order.
pub fn total_loss(
    outputs: &[ExplainerOutput],
    targets: &[&TapBundle],
    labels: &[usize],
    assignment: &FilterAssignment,
    bank: &TemplateBank,
    weights: &LossWeights,
    temperature: f64,
) -> Result<LossBreakdown> {
    let b = outputs.len();
    ensure!(b >= 1, "empty batch");
    ensure!(targets.len() == b && labels.len() == b, "batch components disagree in length");
    let lambdas = [weights.recon_fc1, weights.recon_fc2];
    let mut recon = 0.0;
    for (o, t) in outputs.iter().zip(targets) {
        recon += reconstruction_loss(
            &[&o.fcdec1, &o.fcdec2],
            &[&t.fc1_star, &t.fc2_star],
            &lambdas,
        )?;
    }
    recon /= b as f64;
    let p = outputs[0].trace.p;
    let gate = gate_loss(p, weights.eta)?;
    let filters = outputs[0].trace.per_filter_premask.len();
    ensure!(assignment.0.len() == filters, "assignment covers {} of {} filters", assignment.0.len(), filters);
    let lambda_f = weights.filter_weight(filters, b, bank.n);
    let mut filter = 0.0;
    if lambda_f != 0.0 {
        for f in 0..filters {
            let maps: Vec<&[f64]> = outputs.iter().map(|o| o.trace.per_filter_premask[f].as_slice()).collect();
            filter += lambda_f * filter_loss(&maps, labels, assignment.0[f], bank, temperature)?;
        }
    }
    Ok(LossBreakdown {
        recon,
        gate,
        filter,
        total: recon + gate + filter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn three_by_three_template() {
        let t = build_template(3, (1, 1), 1.0, 4.0).unwrap();
        let third = 1.0 / 3.0;
        let expected = [-1.0, -third, -1.0, -third, 1.0, -third, -1.0, -third, -1.0];
        for (a, b) in t.values.iter().zip(expected) {
            assert!(close(*a, b, 1e-15), "{a} vs {b}");
        }
    }

    #[test]
    fn degenerate_template_is_tau() {
        assert_eq!(build_template(1, (0, 0), 0.7, 4.0).unwrap().values, vec![0.7]);
        assert!(build_template(3, (3, 0), 1.0, 4.0).is_err());
    }

    #[test]
    fn bank_counts_and_prior() {
        let bank = build_template_bank(2, 0.1, 4.0, 0.8).unwrap();
        assert_eq!(bank.templates.len(), 5);
        assert!(close(bank.prior.iter().sum::<f64>(), 1.0, 1e-15));
        let bank3 = build_template_bank(3, 1.0, 4.0, 0.9).unwrap();
        assert_eq!(bank3.positive(4), &build_template(3, (1, 1), 1.0, 4.0).unwrap());
        assert!(build_template_bank(2, 0.1, 4.0, 1.0).is_err());
    }

    #[test]
    fn mask_is_one_at_center_and_zero_far_away() {
        let bank = TemplateBank::from_constants(8, &TemplateConstants::default()).unwrap();
        let m = bank.mask(3 * 8 + 3);
        assert_eq!(m[3 * 8 + 3], 1.0);
        assert!(close(m[3 * 8 + 4], 0.5, 1e-15));
        assert_eq!(m[3 * 8 + 5], 0.0);
        assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn score_is_bilinear() {
        let bank = build_template_bank(2, 0.5, 4.0, 0.8).unwrap();
        let map = [0.3, -0.2, 1.0, 0.4];
        let twice: Vec<f64> = map.iter().map(|v| 2.0 * v).collect();
        let t = bank.positive(1);
        assert!(close(
            template_score(&twice, t).unwrap(),
            2.0 * template_score(&map, t).unwrap(),
            1e-15
        ));
        assert_eq!(template_score(&[0.0; 4], t).unwrap(), 0.0);
        assert!(template_score(&[0.0; 3], t).is_err());
    }

    #[test]
    fn single_image_has_zero_information() {
        let bank = build_template_bank(3, 0.1, 4.0, 0.9).unwrap();
        let map = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
        assert!(close(filter_loss(&[&map], &[0], 0, &bank, 1.0).unwrap(), 0.0, 1e-15));
        assert!(close(filter_loss(&[&map], &[1], 0, &bank, 1.0).unwrap(), 0.0, 1e-15));
    }

    #[test]
    fn identical_maps_have_zero_information() {
        let bank = build_template_bank(2, 0.1, 4.0, 0.8).unwrap();
        let map = [0.5, 0.1, 0.0, 0.2];
        let v = filter_loss(&[&map, &map], &[0, 0], 0, &bank, 1.0).unwrap();
        assert!(close(v, 0.0, 1e-15));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let bank = build_template_bank(2, 0.1, 4.0, 0.8).unwrap();
        assert!(filter_loss(&[], &[], 0, &bank, 1.0).is_err());
    }

    #[test]
    fn filter_loss_is_nonpositive_and_bounded() {
        let bank = build_template_bank(2, 1.0, 4.0, 0.8).unwrap();
        let maps = [[3.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 3.0], [0.0, 0.0, 0.0, 0.0]];
        let refs: Vec<&[f64]> = maps.iter().map(|m| m.as_slice()).collect();
        let v = filter_loss(&refs, &[0, 0, 1], 0, &bank, 1.0).unwrap();
        assert!(v <= 0.0 && v >= -libm::log(3.0));
    }

    #[test]
    fn assignment_tie_breaks_low() {
        let a = assign_filter_categories(&[vec![0.1, 0.9], vec![0.5, 0.5], vec![0.0]]);
        assert_eq!(a.0, vec![1, 0, 0]);
    }

    #[test]
    fn reconstruction_arithmetic() {
        assert_eq!(reconstruction_loss(&[&[1.0, 2.0]], &[&[0.0, 0.0]], &[1.0]).unwrap(), 5.0);
        assert_eq!(reconstruction_loss(&[&[1.0, 2.0]], &[&[0.0, 0.0]], &[2.0]).unwrap(), 10.0);
        assert_eq!(reconstruction_loss(&[&[1.0, 2.0]], &[&[1.0, 2.0]], &[1.0]).unwrap(), 0.0);
        assert!(reconstruction_loss(&[&[1.0]], &[&[0.0, 0.0]], &[1.0]).is_err());
    }

    #[test]
    fn gate_loss_values() {
        assert!(close(gate_loss(0.5, 1.0).unwrap(), core::f64::consts::LN_2, 1e-15));
        assert!(gate_loss(1.0 - 1e-12, 1.0).unwrap() < 1e-11);
        assert!(gate_loss(0.3, 1.0).unwrap() > gate_loss(0.6, 1.0).unwrap());
        assert!(gate_loss(0.0, 1.0).is_err());
        assert_eq!(gate_loss(1.0, 1.0).unwrap(), 0.0);
    }
}
