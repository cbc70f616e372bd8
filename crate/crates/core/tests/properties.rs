mod common;

use common::{mi_oracle, rel_err};
use explainer_core::explainer::{gate, mask_layer, norm_layer, ExplainerArch, ExplainerParams, NormStats};
use explainer_core::losses::{
    assign_filter_categories, build_template_bank, filter_loss, total_loss, FilterAssignment, LossWeights,
    TemplateBank, TemplateConstants,
};
use explainer_core::metrics::{grad_cam, location_instability, substitution_fidelity, LandmarkAggregation, Reconstruction};
use explainer_core::performer::{PerformerArch, PerformerParams, TapBundle};
use explainer_core::synth::{default_categories, SceneGenerator, SceneGeometry};
use explainer_core::FeatureMap;
use proptest::prelude::*;

fn bank(n: usize) -> TemplateBank {
    TemplateBank::from_constants(n, &TemplateConstants::default()).unwrap()
}

/// `(n, maps, labels)` with maps in `[0, 2]` and labels in `{0, 1}`.
fn instance() -> impl Strategy<Value = (usize, Vec<Vec<f64>>, Vec<usize>)> {
    (1usize..=3, 1usize..=4).prop_flat_map(|(n, b)| {
        (
            Just(n),
            prop::collection::vec(prop::collection::vec(0.0f64..2.0, n * n), b),
            prop::collection::vec(0usize..2, b),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, ..ProptestConfig::default() })]

    #[test]
    fn filter_loss_matches_enumerated_mutual_information((n, maps, labels) in instance(), temp in 0.05f64..2.0) {
        let bank = bank(n);
        let refs: Vec<&[f64]> = maps.iter().map(|m| m.as_slice()).collect();
        let loss = filter_loss(&refs, &labels, 0, &bank, temp).unwrap();
        let oracle = -mi_oracle(&maps, &labels, 0, &bank, temp);
        prop_assert!(rel_err(loss, oracle) < 1e-10 || (loss - oracle).abs() < 1e-14, "{loss} vs {oracle}");
        let lower = -((maps.len().min(n * n + 1)) as f64).ln();
        prop_assert!(loss <= 1e-12 && loss >= lower - 1e-12, "{loss} outside [{lower}, 0]");
    }

    #[test]
    fn filter_loss_ignores_image_order((n, maps, labels) in instance(), seed in any::<u64>()) {
        let bank = bank(n);
        let mut order: Vec<usize> = (0..maps.len()).collect();
        let mut r = explainer_core::rng::rng_for(seed, 0, 0);
        explainer_core::rng::shuffle(&mut r, &mut order);
        let a: Vec<&[f64]> = maps.iter().map(|m| m.as_slice()).collect();
        let b: Vec<&[f64]> = order.iter().map(|&i| maps[i].as_slice()).collect();
        let lb: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let la = filter_loss(&a, &labels, 1, &bank, 1.0).unwrap();
        let lb = filter_loss(&b, &lb, 1, &bank, 1.0).unwrap();
        prop_assert!((la - lb).abs() < 1e-12);
    }

    #[test]
    fn gate_output_lies_between_tracks(
        a in prop::collection::vec(-3.0f64..3.0, 8),
        b in prop::collection::vec(-3.0f64..3.0, 8),
        w in -8.0f64..8.0,
    ) {
        let xa = FeatureMap::from_vec(2, 2, 2, a.clone()).unwrap();
        let xb = FeatureMap::from_vec(2, 2, 2, b.clone()).unwrap();
        let (out, p) = gate(&xa, &xb, w).unwrap();
        prop_assert!(p > 0.0 && p < 1.0);
        for ((o, x), y) in out.data.iter().zip(&a).zip(&b) {
            prop_assert!(*o >= x.min(*y) - 1e-12 && *o <= x.max(*y) + 1e-12);
        }
    }

    #[test]
    fn mask_never_exceeds_premask(n in 1usize..=6, seed in any::<u64>()) {
        let bank = bank(n);
        let mut r = explainer_core::rng::rng_for(seed, 1, 0);
        let map = common::uniform_map(&mut r, n * n, 0.0, 5.0);
        let (masked, center) = mask_layer(&map, &bank).unwrap();
        prop_assert_eq!(masked[center], map[center]);
        for (m, x) in masked.iter().zip(&map) {
            prop_assert!(*m <= *x && *m >= 0.0);
        }
    }

    #[test]
    fn instability_is_invariant_to_translation_and_order(
        pts in prop::collection::vec(((0.0f64..64.0, 0.0f64..64.0), (0.0f64..64.0, 0.0f64..64.0), (0.0f64..64.0, 0.0f64..64.0)), 2..20),
        shift in (-20.0f64..20.0, -20.0f64..20.0),
        rot in 0usize..20,
    ) {
        let inferred: Vec<(f64, f64)> = pts.iter().map(|p| p.0).collect();
        let lms: Vec<[(f64, f64); 2]> = pts.iter().map(|p| [p.1, p.2]).collect();
        let refs: Vec<&[(f64, f64)]> = lms.iter().map(|l| l.as_slice()).collect();
        let base = location_instability(&inferred, &refs, 64, LandmarkAggregation::MeanOverAll).unwrap();

        let mv = |q: (f64, f64)| (q.0 + shift.0, q.1 + shift.1);
        let inferred_t: Vec<(f64, f64)> = inferred.iter().map(|&q| mv(q)).collect();
        let lms_t: Vec<[(f64, f64); 2]> = lms.iter().map(|l| [mv(l[0]), mv(l[1])]).collect();
        let refs_t: Vec<&[(f64, f64)]> = lms_t.iter().map(|l| l.as_slice()).collect();
        let moved = location_instability(&inferred_t, &refs_t, 64, LandmarkAggregation::MeanOverAll).unwrap();
        prop_assert!((base - moved).abs() < 1e-9);

        let k = rot % inferred.len();
        let mut inferred_r = inferred.clone();
        inferred_r.rotate_left(k);
        let mut refs_r = refs.clone();
        refs_r.rotate_left(k);
        let rotated = location_instability(&inferred_r, &refs_r, 64, LandmarkAggregation::MeanOverAll).unwrap();
        prop_assert!((base - rotated).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_inference_has_zero_instability(
        lms in prop::collection::vec((0.0f64..64.0, 0.0f64..64.0), 2..20),
        off in (-10.0f64..10.0, -10.0f64..10.0),
    ) {
        let inferred: Vec<(f64, f64)> = lms.iter().map(|l| (l.0 + off.0, l.1 + off.1)).collect();
        let single: Vec<[(f64, f64); 1]> = lms.iter().map(|&l| [l]).collect();
        let refs: Vec<&[(f64, f64)]> = single.iter().map(|l| l.as_slice()).collect();
        let v = location_instability(&inferred, &refs, 64, LandmarkAggregation::MeanOverAll).unwrap();
        prop_assert!(v.abs() < 1e-12);
    }

    #[test]
    fn grad_cam_is_bounded(
        act in prop::collection::vec(0.0f64..4.0, 18),
        grad in prop::collection::vec(-2.0f64..2.0, 18),
        size in 3usize..20,
    ) {
        let a = FeatureMap::from_vec(2, 3, 3, act).unwrap();
        let g = FeatureMap::from_vec(2, 3, 3, grad).unwrap();
        let cam = grad_cam(&a, &g, size).unwrap();
        prop_assert_eq!(cam.len(), size * size);
        prop_assert!(cam.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn assignment_matches_row_scan(rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 1..4), 1..10)) {
        let c = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(c, 0.0); r }).collect();
        let got = assign_filter_categories(&rows);
        for (f, row) in rows.iter().enumerate() {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            prop_assert_eq!(got.0[f], best);
        }
    }

    #[test]
    fn norm_layer_is_identity_at_unit_scale(data in prop::collection::vec(-5.0f64..5.0, 12)) {
        let x = FeatureMap::from_vec(3, 2, 2, data).unwrap();
        let y = norm_layer(&x, &[1.0; 3], &[1.0; 3]).unwrap();
        prop_assert_eq!(y, x);
    }
}

#[test]
fn landmark_jitter_is_bounded_over_many_seeds() {
    let geometry = SceneGeometry::default();
    let cats = default_categories();
    let size = geometry.size as f64;
    let generator = SceneGenerator::new(geometry.clone(), cats.clone()).unwrap();
    for (label, desc) in cats.iter().enumerate() {
        let jitters: Vec<Vec<(f64, f64)>> = (0..1000)
            .map(|i| {
                let scene = generator.scene(i as u64, label);
                scene.jitter_of(desc, geometry.size)
            })
            .collect();
        for k in 0..desc.parts.len() {
            for axis in 0..2 {
                let v: Vec<f64> = jitters.iter().map(|j| if axis == 0 { j[k].0 } else { j[k].1 }).collect();
                let std = explainer_core::metrics::population_std(&v);
                assert!(std <= 0.1 * size, "category {label} part {k} axis {axis}: std {std}");
            }
        }
    }
}

#[test]
fn total_loss_is_the_sum_of_its_terms() {
    let parch = PerformerArch { input_size: 32, fc1: 12, fc2: 6, ..PerformerArch::default() };
    let performer = PerformerParams::init(&parch, 3).unwrap();
    let arch = ExplainerArch::for_performer(&parch, 4);
    let mut params = ExplainerParams::init(&arch, 4).unwrap();
    for b in &mut params.interp1.bias {
        *b = 0.05;
    }
    let bank = TemplateBank::from_constants(arch.size, &TemplateConstants::default()).unwrap();
    let stats = NormStats::new(arch.filters);
    let mut r = explainer_core::rng::rng_for(11, 0, 0);
    let taps: Vec<TapBundle> = (0..4)
        .map(|_| {
            let img = FeatureMap::from_vec(1, 32, 32, common::uniform_map(&mut r, 1024, 0.0, 1.0)).unwrap();
            performer.forward(&img).unwrap()
        })
        .collect();
    let labels = [0, 1, 0, 0];
    let outputs: Vec<_> = taps.iter().map(|t| params.forward(&t.x_tap, &stats, &bank, None).unwrap().output).collect();
    let targets: Vec<&TapBundle> = taps.iter().collect();
    let assignment = FilterAssignment(vec![0, 1, 0, 1]);
    let weights = LossWeights { recon_fc1: 0.7, recon_fc2: 1.3, eta: 0.4, filter: Some(0.25), normalize_recon: false };
    let temp = 0.3;
    let got = total_loss(&outputs, &targets, &labels, &assignment, &bank, &weights, temp).unwrap();

    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let recon = outputs
        .iter()
        .zip(&taps)
        .map(|(o, t)| 0.7 * sq(&o.fcdec1, &t.fc1_star) + 1.3 * sq(&o.fcdec2, &t.fc2_star))
        .sum::<f64>()
        / 4.0;
    let gate = -0.4 * params.p().ln();
    let filter: f64 = (0..4)
        .map(|f| {
            let maps: Vec<Vec<f64>> = outputs.iter().map(|o| o.trace.per_filter_premask[f].clone()).collect();
            -0.25 * mi_oracle(&maps, &labels, assignment.0[f], &bank, temp)
        })
        .sum();
    assert!(rel_err(got.recon, recon) < 1e-12);
    assert!(rel_err(got.gate, gate) < 1e-12);
    assert!(rel_err(got.filter, filter) < 1e-9 || (got.filter - filter).abs() < 1e-12);
    assert!(rel_err(got.total, recon + gate + filter) < 1e-12);
}

#[test]
fn substituting_true_features_agrees_everywhere() {
    let parch = PerformerArch { input_size: 32, fc1: 12, fc2: 6, ..PerformerArch::default() };
    let performer = PerformerParams::init(&parch, 9).unwrap();
    let mut r = explainer_core::rng::rng_for(5, 0, 0);
    let taps: Vec<TapBundle> = (0..10)
        .map(|_| {
            let img = FeatureMap::from_vec(1, 32, 32, common::uniform_map(&mut r, 1024, 0.0, 1.0)).unwrap();
            performer.forward(&img).unwrap()
        })
        .collect();
    let items: Vec<Reconstruction<'_>> = taps
        .iter()
        .map(|t| Reconstruction {
            fc1_star: &t.fc1_star,
            fc2_star: &t.fc2_star,
            fcdec1: &t.fc1_star,
            fcdec2: &t.fc2_star,
            performer_logits: &t.logits,
        })
        .collect();
    let fid = substitution_fidelity(&performer, &items).unwrap();
    assert_eq!(fid.agreement, 1.0);
    assert_eq!(fid.fc1_relative_error, 0.0);
    assert_eq!(fid.fc2_relative_error, 0.0);
}

#[test]
fn template_bank_builder_agrees_with_constants() {
    let a = build_template_bank(5, 0.5 / 25.0, 4.0, 25.0 / 26.0).unwrap();
    assert_eq!(a, bank(5));
}
