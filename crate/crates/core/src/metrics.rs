//! Interpretability metrics: location instability, grad-CAM and decoder
//! substitution fidelity.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::explainer::{ExplainerParams, NormStats};
use crate::losses::{assign_filter_categories, FilterAssignment, TemplateBank};
use crate::performer::PerformerParams;
use crate::tensor::{argmax, l2_norm, FeatureMap};

/// Argmax cell of an `n x n` map, mapped to the pixel coordinates of the
/// cell centre in an `size x size` image.
pub fn infer_part_location(map: &[f64], n: usize, size: usize) -> (f64, f64) {
    let idx = argmax(map);
    let cell = size as f64 / n as f64;
    let (r, c) = (idx / n, idx % n);
    (r as f64 * cell + cell / 2.0, c as f64 * cell + cell / 2.0)
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    libm::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LandmarkAggregation {
    /// Mean over all K landmarks of the per-landmark deviation.
    #[default]
    MeanOverAll,
    /// Deviation of the distance to whichever landmark is nearest.
    NearestOnly,
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    libm::sqrt((a.0 - b.0) * (a.0 - b.0) + (a.1 - b.1) * (a.1 - b.1))
}

/// Instability of one filter: for each landmark, the population std over
/// images of the inferred-to-landmark distance normalised by the image
/// diagonal; then averaged over landmarks.
pub fn location_instability(
    inferred: &[(f64, f64)],
    landmarks: &[&[(f64, f64)]],
    size: usize,
    aggregation: LandmarkAggregation,
) -> Result<f64> {
    ensure!(!inferred.is_empty(), "no images");
    ensure!(inferred.len() == landmarks.len(), "{} positions but {} landmark lists", inferred.len(), landmarks.len());
    let k = landmarks[0].len();
    ensure!(k >= 1, "images need at least one landmark");
    ensure!(landmarks.iter().all(|l| l.len() == k), "landmark counts differ between images");
    let diag = size as f64 * core::f64::consts::SQRT_2;
    match aggregation {
        LandmarkAggregation::MeanOverAll => {
            let mut total = 0.0;
            for j in 0..k {
                let d: Vec<f64> = inferred.iter().zip(landmarks).map(|(&p, l)| distance(p, l[j]) / diag).collect();
                total += population_std(&d);
            }
            Ok(total / k as f64)
        }
        LandmarkAggregation::NearestOnly => {
            let d: Vec<f64> = inferred
                .iter()
                .zip(landmarks)
                .map(|(&p, l)| l.iter().map(|&q| distance(p, q)).fold(f64::INFINITY, f64::min) / diag)
                .collect();
            Ok(population_std(&d))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstabilityConfig {
    /// A filter must fire on at least this many images of its category.
    pub min_images: usize,
    pub aggregation: LandmarkAggregation,
}

impl Default for InstabilityConfig {
    fn default() -> Self {
        Self {
            min_images: 30,
            aggregation: LandmarkAggregation::MeanOverAll,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstabilityReport {
    /// `None` for filters that fired on too few images.
    pub per_filter: Vec<Option<f64>>,
    pub aggregate: f64,
    pub active_filters: usize,
}

/// One evaluation image as seen by a bank of filters.
pub struct FilterObservation<'a> {
    /// One `n x n` map per filter.
    pub maps: &'a [Vec<f64>],
    pub label: usize,
    pub landmarks: &'a [(f64, f64)],
}

/// Applies [`location_instability`] to every filter over the images of its
/// assigned category on which it fires, then averages over active filters.
/// Images without landmarks (background scenes) are skipped.
pub fn instability_report(
    observations: &[FilterObservation<'_>],
    assignment: &FilterAssignment,
    n: usize,
    size: usize,
    cfg: &InstabilityConfig,
) -> Result<InstabilityReport> {
    let filters = assignment.0.len();
    let mut per_filter = Vec::with_capacity(filters);
    for f in 0..filters {
        let mut inferred = Vec::new();
        let mut lms: Vec<&[(f64, f64)]> = Vec::new();
        for o in observations {
            ensure!(o.maps.len() == filters, "observation has {} maps for {} filters", o.maps.len(), filters);
            let m = &o.maps[f];
            if o.label == assignment.0[f] && !o.landmarks.is_empty() && m.iter().any(|&v| v > 0.0) {
                inferred.push(infer_part_location(m, n, size));
                lms.push(o.landmarks);
            }
        }
        if inferred.len() < cfg.min_images.max(1) {
            per_filter.push(None);
        } else {
            per_filter.push(Some(location_instability(&inferred, &lms, size, cfg.aggregation)?));
        }
    }
    let active: Vec<f64> = per_filter.iter().flatten().copied().collect();
    if active.is_empty() {
        return Err(Error::EmptyReport(format!(
            "none of {filters} filters fired on {} or more images",
            cfg.min_images
        )));
    }
    Ok(InstabilityReport {
        aggregate: active.iter().sum::<f64>() / active.len() as f64,
        active_filters: active.len(),
        per_filter,
    })
}

/// Bilinear resize of an `h x w` plane to `size x size` (half-pixel centres).
pub fn bilinear_upsample(plane: &[f64], h: usize, w: usize, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let sample = |src_len: usize, dst: usize| -> (usize, usize, f64) {
        let pos = ((dst as f64 + 0.5) * src_len as f64 / size as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = libm::floor(pos) as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, pos - lo as f64)
    };
    for y in 0..size {
        let (y0, y1, fy) = sample(h, y);
        for x in 0..size {
            let (x0, x1, fx) = sample(w, x);
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out[y * size + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Grad-CAM from an activation block and the class-score gradient w.r.t.
/// it: channel weights are spatial means of the gradient, the map is the
/// ReLU of the weighted channel sum, upsampled to `size x size` and
/// max-normalised.
pub fn grad_cam(activation: &FeatureMap, gradient: &FeatureMap, size: usize) -> Result<Vec<f64>> {
    ensure!(activation.same_shape(gradient), "activation and gradient shapes differ");
    ensure!(
        activation.height >= 1 && activation.width >= 1 && activation.channels >= 1,
        "grad-CAM needs a spatial map"
    );
    let plane = activation.plane();
    let mut cam = vec![0.0; plane];
    for c in 0..activation.channels {
        let w = gradient.channel(c).iter().sum::<f64>() / plane as f64;
        if w == 0.0 {
            continue;
        }
        for (dst, a) in cam.iter_mut().zip(activation.channel(c)) {
            *dst += w * a;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut up = bilinear_upsample(&cam, activation.height, activation.width, size);
    let max = up.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        up.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    } else {
        up.fill(0.0);
    }
    Ok(up)
}

/// Layers a grad-CAM map can be taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradCamTarget {
    /// Post-ReLU output of performer conv layer `k` (1-based).
    PerformerConv(usize),
    /// Normalised interpretable-track maps of the explainer pipeline.
    ExplainerInterp,
    /// Fused encoder output of the explainer pipeline.
    ExplainerEncoder,
    /// Performer FC layer `k`; not spatial.
    PerformerFc(usize),
}

/// The explainer-augmented pipeline: performer up to the tap, explainer
/// encoder and decoder, then the performer's classification layer.
pub struct ExplainerPipeline<'a> {
    pub performer: &'a PerformerParams,
    pub explainer: &'a ExplainerParams,
    pub stats: &'a NormStats,
    pub bank: &'a TemplateBank,
}

fn one_hot(len: usize, idx: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[idx] = 1.0;
    v
}

/// Grad-CAM heatmap (`S x S`, values in `[0, 1]`) for `class`.
pub fn grad_cam_for(
    performer: &PerformerParams,
    pipeline: Option<&ExplainerPipeline<'_>>,
    image: &FeatureMap,
    class: usize,
    target: GradCamTarget,
) -> Result<Vec<f64>> {
    let classes = performer.arch.classes;
    ensure!(class < classes, "class {} out of range for {} classes", class, classes);
    let size = performer.arch.input_size;
    let trace = performer.trace(image)?;
    match target {
        GradCamTarget::PerformerConv(k) => {
            ensure!((1..=trace.conv.len()).contains(&k), "no conv layer {}", k);
            let g = performer.backward(image, &trace, &one_hot(classes, class), None, Some(k));
            grad_cam(&trace.conv[k - 1], &g, size)
        }
        GradCamTarget::ExplainerInterp | GradCamTarget::ExplainerEncoder => {
            let pipe = pipeline.ok_or_else(|| Error::Contract(String::from("explainer target needs a pipeline")))?;
            let tap = trace.tap(&performer.arch);
            let pass = pipe.explainer.forward(&tap.x_tap, pipe.stats, pipe.bank, None)?;
            let row = &performer.fc3.weight[class * performer.fc3.in_dim..(class + 1) * performer.fc3.in_dim];
            if target == GradCamTarget::ExplainerInterp {
                let g = pipe.explainer.grad_wrt_interp(&pass, row);
                grad_cam(&pass.output.trace.x_interp, &g, size)
            } else {
                let g = pipe.explainer.decoder_backward(&pass, None, row, None);
                grad_cam(&pass.output.trace.x_enc, &g, size)
            }
        }
        GradCamTarget::PerformerFc(k) => Err(Error::Contract(format!("performer fc{k} is not a spatial layer"))),
    }
}

/// `|a - b| / |b|`, with a zero reference treated as 1 in the denominator
/// when `a` is also zero.
pub fn relative_l2(a: &[f64], reference: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(reference).map(|(x, y)| x - y).collect();
    let num = l2_norm(&diff);
    let den = l2_norm(reference);
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub agreement: f64,
    pub fc1_relative_error: f64,
    pub fc2_relative_error: f64,
}

/// One eval image: performer targets and the decoder's reconstructions.
pub struct Reconstruction<'a> {
    pub fc1_star: &'a [f64],
    pub fc2_star: &'a [f64],
    pub fcdec1: &'a [f64],
    pub fcdec2: &'a [f64],
    pub performer_logits: &'a [f64],
}

/// Argmax agreement between `classify_from_fc2(fcdec2)` and the performer,
/// plus mean relative L2 error per reconstructed layer.
pub fn substitution_fidelity(performer: &PerformerParams, items: &[Reconstruction<'_>]) -> Result<Fidelity> {
    ensure!(!items.is_empty(), "no evaluation images");
    let mut agree = 0usize;
    let (mut e1, mut e2) = (0.0, 0.0);
    for it in items {
        let logits = performer.classify_from_fc2(it.fcdec2)?;
        if argmax(&logits) == argmax(it.performer_logits) {
            agree += 1;
        }
        e1 += relative_l2(it.fcdec1, it.fc1_star);
        e2 += relative_l2(it.fcdec2, it.fc2_star);
    }
    let n = items.len() as f64;
    Ok(Fidelity {
        agreement: agree as f64 / n,
        fc1_relative_error: e1 / n,
        fc2_relative_error: e2 / n,
    })
}

/// Runtime facts recorded next to the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub eval_images: usize,
    pub std_kind: String,
    pub distance_normalization: String,
    pub aggregation: LandmarkAggregation,
    pub min_images: usize,
    pub reconstruction_target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub explainer_instability: Vec<Option<f64>>,
    pub performer_instability: Vec<Option<f64>>,
    pub explainer_aggregate_instability: f64,
    pub performer_aggregate_instability: f64,
    pub p: f64,
    pub fc1_relative_error: f64,
    pub fc2_relative_error: f64,
    pub substitution_agreement: f64,
    pub metadata: ReportMetadata,
}

impl MetricsReport {
    /// Relative reduction of aggregate instability from performer to explainer.
    pub fn instability_reduction(&self) -> f64 {
        1.0 - self.explainer_aggregate_instability / self.performer_aggregate_instability
    }
}

/// One annotated evaluation image.
#[derive(Debug, Clone, Copy)]
pub struct EvalSample<'a> {
    pub image: &'a FeatureMap,
    pub label: usize,
    pub landmarks: &'a [(f64, f64)],
}

fn mean_map_by_category(maps: &[Vec<Vec<f64>>], labels: &[usize], categories: usize) -> Vec<Vec<f64>> {
    let filters = maps.first().map_or(0, |m| m.len());
    let mut sums = vec![vec![0.0; categories]; filters];
    let mut counts = vec![0usize; categories];
    for (m, &l) in maps.iter().zip(labels) {
        counts[l] += 1;
        for (row, plane) in sums.iter_mut().zip(m) {
            row[l] += plane.iter().sum::<f64>() / plane.len() as f64;
        }
    }
    for row in &mut sums {
        for (v, &n) in row.iter_mut().zip(&counts) {
            if n > 0 {
                *v /= n as f64;
            }
        }
    }
    sums
}

fn report_for(
    maps: &[Vec<Vec<f64>>],
    samples: &[EvalSample<'_>],
    categories: usize,
    n: usize,
    size: usize,
    cfg: &InstabilityConfig,
) -> Result<InstabilityReport> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let assignment = assign_filter_categories(&mean_map_by_category(maps, &labels, categories));
    let obs: Vec<FilterObservation<'_>> = maps
        .iter()
        .zip(samples)
        .map(|(m, s)| FilterObservation { maps: m, label: s.label, landmarks: s.landmarks })
        .collect();
    instability_report(&obs, &assignment, n, size, cfg)
}

/// Instability of both networks, p and substitution fidelity on `samples`.
///
/// Filters of each network are assigned to the category with the highest
/// mean activation over `samples`; explainer filters are read before the
/// mask, performer filters at the tap.
pub fn evaluate(pipeline: &ExplainerPipeline<'_>, samples: &[EvalSample<'_>], cfg: &InstabilityConfig) -> Result<MetricsReport> {
    ensure!(!samples.is_empty(), "no evaluation images");
    let performer = pipeline.performer;
    let categories = performer.arch.classes;
    ensure!(samples.iter().all(|s| s.label < categories), "label out of range");
    let n = performer.arch.tap_size();
    let size = performer.arch.input_size;
    let mut perf_maps = Vec::with_capacity(samples.len());
    let mut expl_maps = Vec::with_capacity(samples.len());
    let mut outputs = Vec::with_capacity(samples.len());
    for s in samples {
        let tap = performer.forward(s.image)?;
        let pass = pipeline.explainer.forward(&tap.x_tap, pipeline.stats, pipeline.bank, None)?;
        perf_maps.push((0..tap.x_tap.channels).map(|c| tap.x_tap.channel(c).to_vec()).collect::<Vec<_>>());
        expl_maps.push(pass.output.trace.per_filter_premask.clone());
        outputs.push((tap, pass.output));
    }
    let recs: Vec<Reconstruction<'_>> = outputs
        .iter()
        .map(|(t, o)| Reconstruction {
            fc1_star: &t.fc1_star,
            fc2_star: &t.fc2_star,
            fcdec1: &o.fcdec1,
            fcdec2: &o.fcdec2,
            performer_logits: &t.logits,
        })
        .collect();
    let fidelity = substitution_fidelity(performer, &recs)?;
    let explainer = report_for(&expl_maps, samples, categories, n, size, cfg)?;
    let baseline = report_for(&perf_maps, samples, categories, n, size, cfg)?;
    Ok(MetricsReport {
        explainer_instability: explainer.per_filter,
        performer_instability: baseline.per_filter,
        explainer_aggregate_instability: explainer.aggregate,
        performer_aggregate_instability: baseline.aggregate,
        p: pipeline.explainer.p(),
        fc1_relative_error: fidelity.fc1_relative_error,
        fc2_relative_error: fidelity.fc2_relative_error,
        substitution_agreement: fidelity.agreement,
        metadata: ReportMetadata {
            eval_images: samples.len(),
            std_kind: String::from("population"),
            distance_normalization: String::from("image-diagonal"),
            aggregation: cfg.aggregation,
            min_images: cfg.min_images,
            reconstruction_target: String::from("post-relu"),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn location_of_corner_peak() {
        let mut m = vec![0.0; 64];
        m[0] = 1.0;
        assert_eq!(infer_part_location(&m, 8, 64), (4.0, 4.0));
        assert_eq!(infer_part_location(&[0.3; 64], 8, 64), (4.0, 4.0));
        let mut m = vec![0.0; 64];
        m[2 * 8 + 5] = 0.2;
        let scaled: Vec<f64> = m.iter().map(|v| v * 7.0).collect();
        assert_eq!(infer_part_location(&m, 8, 64), infer_part_location(&scaled, 8, 64));
    }

    #[test]
    fn population_std_hand_case() {
        let s = population_std(&[0.1, 0.2, 0.3]);
        assert!((s - libm::sqrt(2.0 / 300.0)).abs() < 1e-15);
    }

    #[test]
    fn coincident_positions_have_zero_instability() {
        let lms = [[(10.0, 12.0), (30.0, 40.0)], [(20.0, 22.0), (40.0, 50.0)]];
        let refs: Vec<&[(f64, f64)]> = lms.iter().map(|l| l.as_slice()).collect();
        let inferred = [(10.0, 12.0), (20.0, 22.0)];
        let v = location_instability(&inferred, &refs, 64, LandmarkAggregation::MeanOverAll).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn empty_report_when_nothing_fires() {
        let maps = vec![vec![0.0; 4]];
        let lms = [(1.0, 1.0)];
        let obs = [FilterObservation { maps: &maps, label: 0, landmarks: &lms }];
        let r = instability_report(&obs, &FilterAssignment(vec![0]), 2, 8, &InstabilityConfig::default());
        assert!(matches!(r, Err(Error::EmptyReport(_))));
    }

    #[test]
    fn zero_gradient_gives_zero_cam() {
        let a = FeatureMap::from_vec(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let g = FeatureMap::zeros(2, 2, 2);
        assert!(grad_cam(&a, &g, 8).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_gradient_cam_follows_activation() {
        let a = FeatureMap::from_vec(1, 2, 2, vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let g = FeatureMap::from_vec(1, 2, 2, vec![0.5; 4]).unwrap();
        let cam = grad_cam(&a, &g, 2).unwrap();
        assert_eq!(cam, vec![0.0, 0.25, 0.5, 1.0]);
        assert!(grad_cam(&a, &FeatureMap::zeros(2, 2, 2), 4).is_err());
    }

    #[test]
    fn relative_error_zero_iff_equal() {
        assert_eq!(relative_l2(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_l2(&[0.0], &[0.0]), 0.0);
        assert!((relative_l2(&[0.0, 0.0], &[3.0, 4.0]) - 1.0).abs() < 1e-15);
    }
}
