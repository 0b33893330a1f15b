use std::ops::ControlFlow;

use cams_core::features::FeatureExtractor;
use cams_core::masking::{build_mask_set, DEFAULT_SIGMA};
use cams_core::objective::{weighted_gram_set, GenMasks, Objective, StyleTerm};
use cams_core::palette::{extract_palette, merge_palettes, PaletteSource};
use cams_core::synthetic::{two_style_content, two_style_style};
use cams_core::transfer::{
    run_classic_nst, run_transfer, AssociationMap, TransferConfig, TransferMode, TransferResult, TransferState,
};
use cams_core::{CamsError, Image, LossWeights, MaskSet};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(iters: usize) -> TransferConfig {
    TransferConfig {
        iterations: iters,
        ..TransferConfig::default()
    }
}

fn manual_cfg(iters: usize) -> TransferConfig {
    TransferConfig {
        mode: TransferMode::Manual,
        associations: Some(AssociationMap {
            pairs: vec![(0, 0), (1, 1)],
            ..Default::default()
        }),
        ..cfg(iters)
    }
}

fn pair(size: usize) -> (Image, Image) {
    (two_style_content(size), two_style_style(size))
}

fn auto_objective<'a>(ex: &'a FeatureExtractor, c: &Image, s: &Image, live: bool) -> Objective<'a> {
    let merged = merge_palettes(
        &extract_palette(s, 5).unwrap().into_palette(PaletteSource::Style),
        &extract_palette(c, 5).unwrap().into_palette(PaletteSource::Content),
        0.08,
    )
    .unwrap();
    let style_masks = build_mask_set(s, &merged, DEFAULT_SIGMA, true).unwrap();
    let style_taps = ex.extract_features(s, ex.style_layers()).unwrap();
    let style_grams = weighted_gram_set(&style_taps, ex.style_layers(), &style_masks, None).unwrap();
    let gen_masks = if live {
        GenMasks::Live {
            palette: merged.clone(),
            sigma: DEFAULT_SIGMA,
            smooth: true,
        }
    } else {
        GenMasks::Fixed(build_mask_set(c, &merged, DEFAULT_SIGMA, true).unwrap())
    };
    let content_taps = ex.extract_features(c, ex.content_layers()).unwrap();
    Objective::new(
        ex,
        content_taps,
        StyleTerm::ColorAware {
            style_grams,
            pairs: (0..merged.len()).map(|t| (t, t)).collect(),
            gen_masks,
        },
        LossWeights::default(),
    )
    .unwrap()
}

fn perturbed(img: &Image, seed: u64, amount: f64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    img.pixels().mapv(|v| v + amount * (rng.random::<f64>() - 0.5))
}

/// Central differences at `samples` random coordinates; returns the worst
/// relative error.
fn worst_gradient_error(obj: &Objective<'_>, px: &Array3<f64>, samples: usize, seed: u64) -> f64 {
    let analytic = obj.evaluate(px).unwrap().gradient;
    let (h, w, _) = px.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-5;
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let idx = [rng.random_range(0..h), rng.random_range(0..w), rng.random_range(0..3)];
        let mut plus = px.clone();
        plus[idx] += step;
        let mut minus = px.clone();
        minus[idx] -= step;
        let fd = (obj.evaluate(&plus).unwrap().total - obj.evaluate(&minus).unwrap().total) / (2.0 * step);
        let a = analytic[idx];
        let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

#[test]
fn gradient_matches_finite_differences_with_live_masks() {
    let ex = FeatureExtractor::tiny(11);
    let (c, s) = pair(16);
    let obj = auto_objective(&ex, &c, &s, true);
    let px = perturbed(&c, 1, 0.2);
    let err = worst_gradient_error(&obj, &px, 24, 2);
    assert!(err < 1e-3, "worst relative error {err}");
}

#[test]
fn gradient_matches_finite_differences_with_fixed_masks() {
    let ex = FeatureExtractor::tiny(11);
    let (c, s) = pair(16);
    let obj = auto_objective(&ex, &c, &s, false);
    let px = perturbed(&c, 3, 0.2);
    let err = worst_gradient_error(&obj, &px, 24, 4);
    assert!(err < 1e-3, "worst relative error {err}");
}

#[test]
fn classic_gradient_matches_finite_differences() {
    let ex = FeatureExtractor::tiny(11);
    let (c, s) = pair(16);
    let style_taps = ex.extract_features(&s, ex.style_layers()).unwrap();
    let style_grams = cams_core::objective::gram_set(&style_taps, ex.style_layers()).unwrap();
    let weights = LossWeights::default();
    let obj = Objective::new(
        &ex,
        ex.extract_features(&c, ex.content_layers()).unwrap(),
        StyleTerm::Classic {
            style_grams,
            layer_weights: weights.layer_weights(ex.style_layers()).unwrap(),
        },
        weights,
    )
    .unwrap();
    let px = perturbed(&c, 5, 0.2);
    let err = worst_gradient_error(&obj, &px, 24, 6);
    assert!(err < 1e-3, "worst relative error {err}");
}

#[test]
fn content_equal_style_is_a_fixed_point() {
    let ex = FeatureExtractor::tiny(1);
    let img = two_style_style(24);
    let r = run_transfer(&img, &img, &ex, &cfg(20), None).unwrap();
    assert!(r.initial_total() <= 1e-6, "{}", r.initial_total());
    assert!(r.image.max_abs_diff(&img) <= 1e-3);
    let r = run_classic_nst(&img, &img, &ex, &cfg(20), None).unwrap();
    assert!(r.image.max_abs_diff(&img) <= 1e-3);
}

#[test]
fn zero_beta_keeps_content() {
    let ex = FeatureExtractor::tiny(1);
    let (c, s) = pair(24);
    let mut config = cfg(15);
    config.weights.beta = 0.0;
    let r = run_classic_nst(&c, &s, &ex, &config, None).unwrap();
    assert!(r.image.max_abs_diff(&c) <= 1e-3);
    let r = run_transfer(&c, &s, &ex, &config, None).unwrap();
    assert!(r.image.max_abs_diff(&c) <= 1e-3);
}

#[test]
fn loss_decreases_and_history_is_finite() {
    let ex = FeatureExtractor::tiny(2);
    let (c, s) = pair(24);
    let r = run_transfer(&c, &s, &ex, &cfg(30), None).unwrap();
    assert!(r.final_total() < r.initial_total());
    assert!(r
        .loss_history
        .iter()
        .all(|l| l.total.is_finite() && l.cams.is_some() && l.style.is_none()));
    for w in r.loss_history.windows(2) {
        assert!(w[1].total <= w[0].total + 1e-6 * w[0].total.abs(), "{:?}", w);
    }
    let min = r.loss_history.iter().map(|l| l.total).fold(f64::INFINITY, f64::min);
    assert!((r.final_total() - min).abs() <= 1e-6 * min.max(1.0));
    assert!(r.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    let classic = run_classic_nst(&c, &s, &ex, &cfg(30), None).unwrap();
    assert!(classic
        .loss_history
        .iter()
        .all(|l| l.style.is_some() && l.cams.is_none()));
    assert!(classic.final_total() < classic.initial_total());
}

fn collect_masks(
    c: &Image,
    s: &Image,
    ex: &FeatureExtractor,
    config: &TransferConfig,
) -> (TransferResult, Vec<(usize, MaskSet, Image)>) {
    let mut seen = Vec::new();
    let mut cb = |st: &TransferState<'_>| {
        seen.push((st.iter, st.gen_masks.unwrap().clone(), st.generated.clone()));
        ControlFlow::Continue(())
    };
    let r = run_transfer(c, s, ex, config, Some(&mut cb)).unwrap();
    (r, seen)
}

#[test]
fn manual_masks_never_change() {
    let ex = FeatureExtractor::tiny(4);
    let (c, s) = pair(24);
    let (r, seen) = collect_masks(&c, &s, &ex, &manual_cfg(10));
    assert!(seen.len() > 2);
    assert!(seen.iter().all(|(_, m, _)| *m == seen[0].1));
    assert_eq!(r.gen_masks.as_ref(), Some(&seen[0].1));
    assert!(r.image.max_abs_diff(&c) > 1e-3);
}

#[test]
fn auto_masks_track_the_image() {
    let ex = FeatureExtractor::tiny(4);
    let (c, s) = pair(24);
    for detach in [false, true] {
        let config = TransferConfig {
            detach_masks: detach,
            ..cfg(10)
        };
        let (_, seen) = collect_masks(&c, &s, &ex, &config);
        let first = seen.iter().find(|(i, _, _)| *i == 1).unwrap();
        let last = seen.last().unwrap();
        assert!(last.2.max_abs_diff(&first.2) > 1e-3);
        assert_ne!(first.1, last.1, "detach={detach}");
    }
}

#[test]
fn runs_are_deterministic_and_leave_backbone_untouched() {
    let ex = FeatureExtractor::tiny(5);
    let before = ex.parameter_checksum();
    let (c, s) = pair(24);
    let a = run_transfer(&c, &s, &ex, &cfg(12), None).unwrap();
    let b = run_transfer(&c, &s, &ex, &cfg(12), None).unwrap();
    assert_eq!(a.loss_history, b.loss_history);
    assert_eq!(a.image, b.image);
    assert_eq!(ex.parameter_checksum(), before);
}

#[test]
fn style_grams_are_fixed_targets() {
    let ex = FeatureExtractor::tiny(5);
    let (c, s) = pair(24);
    let r = run_transfer(&c, &s, &ex, &cfg(5), None).unwrap();
    let merged = r.palettes.as_ref().unwrap().merged.clone().unwrap();
    let masks = build_mask_set(&s, &merged, DEFAULT_SIGMA, true).unwrap();
    let taps = ex.extract_features(&s, ex.style_layers()).unwrap();
    let expected = weighted_gram_set(&taps, ex.style_layers(), &masks, None).unwrap();
    assert_eq!(r.style_grams, expected);
    assert_eq!(r.style_masks.as_ref(), Some(&masks));
}

#[test]
fn progress_reports_snapshots_and_cancellation() {
    let ex = FeatureExtractor::tiny(6);
    let (c, s) = pair(24);
    let config = TransferConfig {
        snapshot_every: 3,
        ..cfg(10)
    };
    let mut snaps = Vec::new();
    let mut iters = Vec::new();
    let mut cb = |st: &TransferState<'_>| {
        iters.push(st.iter);
        if st.is_snapshot {
            snaps.push(st.iter);
        }
        assert!(st.generated.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        ControlFlow::Continue(())
    };
    let r = run_transfer(&c, &s, &ex, &config, Some(&mut cb)).unwrap();
    assert_eq!(iters[0], 0);
    assert!(iters.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(*snaps.last().unwrap(), r.iterations_run);
    assert!(snaps.contains(&3));

    let mut cancel = |st: &TransferState<'_>| {
        if st.iter >= 2 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    };
    let err = run_transfer(&c, &s, &ex, &config, Some(&mut cancel)).unwrap_err();
    assert!(matches!(err, CamsError::Cancelled));
}

#[test]
fn invalid_inputs_are_rejected() {
    let ex = FeatureExtractor::tiny(7);
    let (c, s) = pair(24);
    let mut config = manual_cfg(3);
    config.associations = None;
    assert!(matches!(
        run_transfer(&c, &s, &ex, &config, None),
        Err(CamsError::InvalidConfig(_))
    ));
    let mut config = manual_cfg(3);
    config.associations.as_mut().unwrap().pairs = vec![(0, 9)];
    assert!(matches!(
        run_transfer(&c, &s, &ex, &config, None),
        Err(CamsError::InvalidAssociation(_))
    ));
    let mut config = manual_cfg(3);
    config.associations.as_mut().unwrap().discard_content = vec![0];
    assert!(matches!(
        run_transfer(&c, &s, &ex, &config, None),
        Err(CamsError::InvalidAssociation(_))
    ));
    assert!(matches!(
        run_transfer(
            &c,
            &s,
            &ex,
            &TransferConfig {
                learning_rate: 0.0,
                ..cfg(3)
            },
            None
        ),
        Err(CamsError::InvalidConfig(_))
    ));
    let solid = Image::filled(24, 24, [0.3, 0.3, 0.3]).unwrap();
    assert!(matches!(
        run_transfer(&solid, &solid, &ex, &cfg(3), None),
        Err(CamsError::Palette(_))
    ));
    let tiny = Image::filled(4, 4, [0.3, 0.3, 0.3]).unwrap();
    assert!(matches!(
        run_transfer(&tiny, &s, &ex, &cfg(3), None),
        Err(CamsError::TooSmallInput { .. })
    ));
}

#[test]
fn single_color_palettes_still_run() {
    let ex = FeatureExtractor::tiny(7);
    let c = Image::filled(24, 24, [0.2, 0.4, 0.6]).unwrap();
    let s = Image::filled(24, 24, [0.8, 0.1, 0.1]).unwrap();
    let r = run_transfer(&c, &s, &ex, &cfg(3), None).unwrap();
    assert_eq!(r.palettes.unwrap().merged.unwrap().len(), 2);
}

#[test]
fn association_json_round_trips() {
    let json = r#"{"pairs":[[0,1],[2,0]],"discard_content":[1],"discard_style":[]}"#;
    let a = AssociationMap::from_json(json).unwrap();
    assert_eq!(a.pairs, vec![(0, 1), (2, 0)]);
    assert_eq!(a.to_json(), json);
    assert!(a.validate(3, 2).is_ok());
    assert!(a.validate(2, 2).is_err());
    assert!(AssociationMap::from_json(r#"{"pairs":[[0,1]]}"#)
        .unwrap()
        .discard_style
        .is_empty());
    assert!(matches!(
        AssociationMap::from_json("{"),
        Err(CamsError::InvalidAssociation(_))
    ));
}

#[test]
fn config_defaults_and_serde() {
    let d = TransferConfig::default();
    assert!((0.25..=0.3).contains(&d.sigma));
    assert_eq!((d.palette_k, d.iterations, d.learning_rate), (5, 300, 0.5));
    assert_eq!((d.weights.alpha, d.weights.beta), (1.0, 1e4));
    assert_eq!(d.snapshot_every, 25);
    assert_eq!(d.max_side, 512);
    let parsed: TransferConfig = serde_json::from_str(r#"{"iterations": 7, "mode": "manual"}"#).unwrap();
    assert_eq!(parsed.iterations, 7);
    assert_eq!(parsed.mode, TransferMode::Manual);
    assert_eq!(parsed.sigma, d.sigma);
    let round: TransferConfig = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
    assert_eq!(round, d);
}

#[test]
fn export_writes_sidecars() {
    let ex = FeatureExtractor::tiny(8);
    let (c, s) = pair(24);
    let r = run_transfer(&c, &s, &ex, &cfg(3), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.png");
    let written = r.export(&out, Some(&dir.path().join("masks"))).unwrap();
    assert!(out.exists());
    let jsonl = std::fs::read_to_string(dir.path().join("out.png.losses.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), r.loss_history.len());
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(first["iter"], 0);
    assert!(first["cams"].is_number() && first["total"].is_number());
    let palettes: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out.png.palettes.json")).unwrap()).unwrap();
    assert!(palettes["merged"]["colors"].is_array());
    let n = r.style_masks.as_ref().unwrap().len();
    assert_eq!(written.len(), 3 + 2 * n);
}
