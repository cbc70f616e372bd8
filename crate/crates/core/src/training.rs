//! Distillation of an explainer from a frozen performer.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::explainer::{ExplainerArch, ExplainerParams, ExplainerPass, MaskCenters, NormStats, TrackActivations};
use crate::losses::{
    assign_filter_categories, filter_loss_with_grad, gate_loss, total_loss, FilterAssignment, LossBreakdown,
    LossWeights, TemplateBank, TemplateConstants,
};
use crate::optim::{Parameters, Sgd};
use crate::performer::{LabeledImage, PerformerParams, TapBundle};
use crate::rng::{self, stream};

/// Smallest value a norm scale may take after an update.
pub const ALPHA_MIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub templates: TemplateConstants,
    /// Epochs between filter-category reassignments.
    pub assignment_refresh: usize,
    /// Start fc-dec-2 from the performer's second FC layer.
    pub decoder_from_performer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 40,
            learning_rate: 0.02,
            lr_decay: 0.97,
            momentum: 0.9,
            seed: 0,
            weights: LossWeights::default(),
            templates: TemplateConstants::default(),
            assignment_refresh: 1,
            decoder_from_performer: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0)
            || !(self.lr_decay.is_finite() && self.lr_decay > 0.0)
            || !(0.0..1.0).contains(&self.momentum)
        {
            return Err(Error::Config("learning rate, decay or momentum out of range".into()));
        }
        if self.assignment_refresh < 1 {
            return Err(Error::Config("assignment_refresh must be at least 1".into()));
        }
        self.weights.validate()?;
        self.templates.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub epoch: usize,
    pub recon: f64,
    pub gate: f64,
    pub filter: f64,
    pub total: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    /// Gate value at the end of each epoch.
    pub p_per_epoch: Vec<f64>,
    /// Assignment in force during each epoch.
    pub assignments: Vec<FilterAssignment>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    /// Median total loss of the rows belonging to `epoch`.
    pub fn median_total(&self, epoch: usize) -> Option<f64> {
        let mut v: Vec<f64> = self.rows.iter().filter(|r| r.epoch == epoch).map(|r| r.total).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.total_cmp(b));
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
    }
}

#[derive(Debug, Clone)]
pub struct ExplainerRun {
    pub params: ExplainerParams,
    pub stats: NormStats,
    pub assignment: FilterAssignment,
    pub bank: TemplateBank,
    /// Loss weights actually used, after reconstruction normalisation.
    pub weights: LossWeights,
    pub log: TrainLog,
}

/// Everything needed to evaluate the objective on one batch besides the
/// parameters.
pub struct ObjectiveInputs<'a> {
    pub taps: &'a [&'a TapBundle],
    pub labels: &'a [usize],
    pub assignment: &'a FilterAssignment,
    pub bank: &'a TemplateBank,
    pub weights: &'a LossWeights,
    pub temperature: f64,
}

/// Loss breakdown, parameter gradient and per-image passes for a batch
/// whose track activations are already computed.
pub fn objective_from_tracks(
    params: &ExplainerParams,
    stats: &NormStats,
    tracks: Vec<TrackActivations>,
    inputs: &ObjectiveInputs<'_>,
) -> Result<(LossBreakdown, ExplainerParams, Vec<ExplainerPass>)> {
    let b = tracks.len();
    ensure!(b >= 1 && inputs.taps.len() == b && inputs.labels.len() == b, "batch components disagree in length");
    let passes: Vec<ExplainerPass> = tracks
        .into_iter()
        .map(|t| params.finish(t, stats))
        .collect::<Result<_>>()?;
    let outputs: Vec<_> = passes.iter().map(|p| p.output.clone()).collect();
    let breakdown = total_loss(
        &outputs,
        inputs.taps,
        inputs.labels,
        inputs.assignment,
        inputs.bank,
        inputs.weights,
        inputs.temperature,
    )?;

    let mut grads = params.zeros_like();
    let filters = params.arch.filters;
    let lambda_f = inputs.weights.filter_weight(filters, b, inputs.bank.n);
    // premask gradient per image per filter
    let mut g_pre: Vec<Vec<Vec<f64>>> = vec![Vec::new(); b];
    if lambda_f != 0.0 {
        for g in g_pre.iter_mut() {
            *g = vec![Vec::new(); filters];
        }
        for f in 0..filters {
            let maps: Vec<&[f64]> = outputs.iter().map(|o| o.trace.per_filter_premask[f].as_slice()).collect();
            let v = filter_loss_with_grad(&maps, inputs.labels, inputs.assignment.0[f], inputs.bank, inputs.temperature)?;
            for (i, gm) in v.grads.into_iter().enumerate() {
                g_pre[i][f] = gm.into_iter().map(|x| x * lambda_f).collect();
            }
        }
    }

    let w = inputs.weights;
    let inv = 1.0 / b as f64;
    for (i, pass) in passes.iter().enumerate() {
        let o = &pass.output;
        let t = inputs.taps[i];
        let g1: Vec<f64> = o.fcdec1.iter().zip(&t.fc1_star).map(|(x, y)| 2.0 * w.recon_fc1 * inv * (x - y)).collect();
        let g2: Vec<f64> = o.fcdec2.iter().zip(&t.fc2_star).map(|(x, y)| 2.0 * w.recon_fc2 * inv * (x - y)).collect();
        let pre = if g_pre[i].is_empty() { None } else { Some(g_pre[i].as_slice()) };
        params.backward(&t.x_tap, pass, stats, Some(&g1), &g2, pre, &mut grads);
    }
    let p = params.p();
    grads.gate_logit += -w.eta * (1.0 - p);
    Ok((breakdown, grads, passes))
}

/// Objective at evaluation-mode statistics, optionally with mask centres
/// pinned per image.
pub fn objective(
    params: &ExplainerParams,
    stats: &NormStats,
    inputs: &ObjectiveInputs<'_>,
    fixed: Option<&[MaskCenters]>,
) -> Result<(LossBreakdown, ExplainerParams, Vec<ExplainerPass>)> {
    let tracks = inputs
        .taps
        .iter()
        .enumerate()
        .map(|(i, t)| params.tracks(&t.x_tap, inputs.bank, fixed.map(|f| &f[i])))
        .collect::<Result<Vec<_>>>()?;
    objective_from_tracks(params, stats, tracks, inputs)
}

/// `F x C` matrix of mean spatial activation of each conv-interp-2 filter
/// (pre-mask) over the images of each category.
pub fn mean_activation_by_category(
    params: &ExplainerParams,
    bank: &TemplateBank,
    taps: &[&TapBundle],
    labels: &[usize],
    categories: usize,
) -> Result<Vec<Vec<f64>>> {
    let f = params.arch.filters;
    let mut sums = vec![vec![0.0; categories]; f];
    let mut counts = vec![0usize; categories];
    for (t, &label) in taps.iter().zip(labels) {
        ensure!(label < categories, "label {} out of range", label);
        let tr = params.tracks(&t.x_tap, bank, None)?;
        counts[label] += 1;
        for (c, row) in sums.iter_mut().enumerate() {
            let ch = tr.r2.channel(c);
            row[label] += ch.iter().sum::<f64>() / ch.len() as f64;
        }
    }
    for row in &mut sums {
        for (v, &n) in row.iter_mut().zip(&counts) {
            if n > 0 {
                *v /= n as f64;
            }
        }
    }
    Ok(sums)
}

fn check_finite(b: &LossBreakdown, step: usize) -> Result<()> {
    for (term, v) in [("recon", b.recon), ("gate", b.gate), ("filter", b.filter), ("total", b.total)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { step, term });
        }
    }
    Ok(())
}

/// Runs the performer once over a sample set.
pub fn tap_all(performer: &PerformerParams, samples: &[LabeledImage<'_>]) -> Result<Vec<TapBundle>> {
    samples.iter().map(|s| performer.forward(s.image)).collect()
}

/// Trains an explainer with `filters` interpretable filters against a frozen
/// performer. Only images and category labels are read.
pub fn train_explainer(
    performer: &PerformerParams,
    train: &[LabeledImage<'_>],
    val: &[LabeledImage<'_>],
    filters: usize,
    cfg: &TrainConfig,
) -> Result<ExplainerRun> {
    cfg.validate()?;
    let arch = ExplainerArch::for_performer(&performer.arch, filters);
    let mut params = ExplainerParams::init(&arch, cfg.seed)?;
    if cfg.decoder_from_performer {
        params.fcdec2 = performer.fc2.clone();
    }
    let bank = TemplateBank::from_constants(arch.size, &cfg.templates)?;
    let mut stats = NormStats::new(filters);
    let categories = performer.arch.classes;

    let train_taps = tap_all(performer, train)?;
    let train_labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let (val_taps, val_labels) = if val.is_empty() {
        (train_taps.clone(), train_labels.clone())
    } else {
        (tap_all(performer, val)?, val.iter().map(|s| s.label).collect())
    };
    let val_refs: Vec<&TapBundle> = val_taps.iter().collect();
    let weights = if train_taps.is_empty() {
        LossWeights { normalize_recon: false, ..cfg.weights.clone() }
    } else {
        cfg.weights.resolved(&train_taps.iter().collect::<Vec<_>>())?
    };
    let temperature = cfg.templates.score_temperature_for(arch.size);

    let refresh = |params: &ExplainerParams| -> Result<FilterAssignment> {
        Ok(assign_filter_categories(&mean_activation_by_category(
            params, &bank, &val_refs, &val_labels, categories,
        )?))
    };
    let mut assignment = refresh(&params)?;
    let mut log = TrainLog::default();
    let mut opt = Sgd::new(&params, cfg.momentum);
    let mut shuffle_rng = rng::rng_for(cfg.seed, stream::EXPLAINER_SHUFFLE, 0);
    let mut order: Vec<usize> = (0..train_taps.len()).collect();
    let mut lr = cfg.learning_rate;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        if epoch > 0 && epoch % cfg.assignment_refresh == 0 {
            assignment = refresh(&params)?;
        }
        log.assignments.push(assignment.clone());
        rng::shuffle(&mut shuffle_rng, &mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let taps: Vec<&TapBundle> = chunk.iter().map(|&i| &train_taps[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let tracks = taps
                .iter()
                .map(|t| params.tracks(&t.x_tap, &bank, None))
                .collect::<Result<Vec<_>>>()?;
            let rms_i = NormStats::batch_rms(tracks.iter().map(|t| &t.h2), filters);
            let rms_o = NormStats::batch_rms(tracks.iter().map(|t| &t.pb), filters);
            stats.update(&rms_i, &rms_o);
            let inputs = ObjectiveInputs {
                taps: &taps,
                labels: &labels,
                assignment: &assignment,
                bank: &bank,
                weights: &weights,
                temperature,
            };
            let (breakdown, grads, _) = objective_from_tracks(&params, &stats, tracks, &inputs)?;
            check_finite(&breakdown, step)?;
            log.rows.push(TrainLogRow {
                step,
                epoch,
                recon: breakdown.recon,
                gate: breakdown.gate,
                filter: breakdown.filter,
                total: breakdown.total,
                p: params.p(),
            });
            opt.step(&mut params, &grads, lr);
            for a in &mut params.alpha {
                *a = a.max(ALPHA_MIN);
            }
            if !params.all_finite() {
                return Err(Error::NonFinite { step, term: "parameters" });
            }
            step += 1;
        }
        log.p_per_epoch.push(params.p());
        lr *= cfg.lr_decay;
    }
    if cfg.epochs > 0 {
        assignment = refresh(&params)?;
    }
    // sanity: the gate term must be defined at the final parameters
    gate_loss(params.p(), cfg.weights.eta)?;
    Ok(ExplainerRun {
        params,
        stats,
        assignment,
        bank,
        weights,
        log,
    })
}
