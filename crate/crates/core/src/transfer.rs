//! End-to-end style transfer runs: palette flow, masks, Gram targets and
//! the L-BFGS loop over the generated image.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{CamsError, Result};
use crate::features::FeatureExtractor;
use crate::imaging::{save_image, Image};
use crate::lbfgs::{Lbfgs, LbfgsConfig, Sample, StepOutcome, StopReason};
use crate::losses::{GramSet, LossWeights};
use crate::masking::{build_mask_set, build_mask_set_from_pixels, MaskSet, DEFAULT_SIGMA};
use crate::objective::{gram_set, weighted_gram_set, GenMasks, Objective, StyleTerm};
use crate::palette::{
    extract_palette, merge_palettes, ExtractedPalette, Palette, PaletteSource, DEFAULT_MERGE_THRESHOLD,
    DEFAULT_PALETTE_SIZE,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    #[default]
    Auto,
    Manual,
}

/// User-chosen pairing of content-palette colors to style-palette colors.
/// Indices refer to each image's own extracted palette.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssociationMap {
    /// `(content_color_index, style_color_index)` pairs.
    pub pairs: Vec<(usize, usize)>,
    #[serde(default)]
    pub discard_content: Vec<usize>,
    #[serde(default)]
    pub discard_style: Vec<usize>,
}

impl AssociationMap {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| CamsError::InvalidAssociation(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("association map serializes")
    }

    pub fn validate(&self, content_len: usize, style_len: usize) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(CamsError::InvalidAssociation("no color pairs given".into()));
        }
        let check = |i: usize, len: usize, what: &str| {
            if i >= len {
                Err(CamsError::InvalidAssociation(format!(
                    "{what} color index {i} out of range (palette has {len} colors)"
                )))
            } else {
                Ok(())
            }
        };
        for &i in &self.discard_content {
            check(i, content_len, "content")?;
        }
        for &i in &self.discard_style {
            check(i, style_len, "style")?;
        }
        for &(c, s) in &self.pairs {
            check(c, content_len, "content")?;
            check(s, style_len, "style")?;
            if self.discard_content.contains(&c) {
                return Err(CamsError::InvalidAssociation(format!(
                    "content color {c} is both paired and discarded"
                )));
            }
            if self.discard_style.contains(&s) {
                return Err(CamsError::InvalidAssociation(format!(
                    "style color {s} is both paired and discarded"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub sigma: f64,
    pub palette_k: usize,
    pub tau_merge: f64,
    pub smooth_masks: bool,
    pub weights: LossWeights,
    pub iterations: usize,
    pub learning_rate: f64,
    pub mode: TransferMode,
    pub associations: Option<AssociationMap>,
    pub seed: u64,
    pub snapshot_every: usize,
    pub max_side: usize,
    /// Treat the generated image's masks as constants within each iteration
    /// (auto mode only).
    pub detach_masks: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            palette_k: DEFAULT_PALETTE_SIZE,
            tau_merge: DEFAULT_MERGE_THRESHOLD,
            smooth_masks: true,
            weights: LossWeights::default(),
            iterations: 300,
            learning_rate: 0.5,
            mode: TransferMode::Auto,
            associations: None,
            seed: 0,
            snapshot_every: 25,
            max_side: 512,
            detach_masks: false,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CamsError::InvalidConfig(msg));
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be > 0 (got {})", self.sigma));
        }
        if self.palette_k == 0 {
            return bad("palette_k must be >= 1".into());
        }
        if !(self.tau_merge >= 0.0 && self.tau_merge.is_finite()) {
            return bad(format!("tau_merge must be >= 0 (got {})", self.tau_merge));
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0 (got {})", self.learning_rate));
        }
        if self.snapshot_every == 0 {
            return bad("snapshot_every must be >= 1".into());
        }
        if self.max_side == 0 {
            return bad("max_side must be >= 1".into());
        }
        if self.mode == TransferMode::Manual && self.associations.is_none() {
            return bad("manual mode requires associations".into());
        }
        self.weights.validate()
    }
}

/// Losses at one iteration. Color-aware runs fill `cams`; the classic
/// baseline fills `style`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub content: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cams: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<f64>,
    pub total: f64,
}

impl LossRecord {
    /// The style-side term, whichever objective produced it.
    pub fn style_term(&self) -> f64 {
        self.cams.or(self.style).unwrap_or(0.0)
    }
}

/// Loop state handed to progress callbacks.
#[derive(Debug)]
pub struct TransferState<'a> {
    pub iter: usize,
    pub total_iters: usize,
    pub losses: LossRecord,
    /// Clamped copy of the current generated image.
    pub generated: &'a Image,
    pub gen_masks: Option<&'a MaskSet>,
    /// Set on every `snapshot_every`-th iteration and on the last one.
    pub is_snapshot: bool,
}

pub type ProgressFn<'a> = dyn FnMut(&TransferState<'_>) -> ControlFlow<()> + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxIterations,
    GradientTolerance,
    StepTolerance,
    ValueTolerance,
    DescentLost,
}

impl From<StopReason> for Termination {
    fn from(r: StopReason) -> Self {
        match r {
            StopReason::GradientTolerance => Termination::GradientTolerance,
            StopReason::StepTolerance => Termination::StepTolerance,
            StopReason::ValueTolerance => Termination::ValueTolerance,
            StopReason::DescentLost => Termination::DescentLost,
        }
    }
}

/// Palettes involved in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PalettesUsed {
    pub style: ExtractedPalette,
    pub content: ExtractedPalette,
    /// Auto mode only.
    pub merged: Option<Palette>,
}

#[derive(Debug, Clone)]
pub struct TransferResult {
    /// Final generated image, clamped to [0,1].
    pub image: Image,
    pub loss_history: Vec<LossRecord>,
    pub palettes: Option<PalettesUsed>,
    pub style_masks: Option<MaskSet>,
    /// Generated-image masks at the final iterate.
    pub gen_masks: Option<MaskSet>,
    pub style_grams: GramSet,
    pub iterations_run: usize,
    pub termination: Termination,
    pub wall_time_s: f64,
    pub config: TransferConfig,
}

impl TransferResult {
    pub fn initial_total(&self) -> f64 {
        self.loss_history.first().map_or(f64::NAN, |r| r.total)
    }

    pub fn final_total(&self) -> f64 {
        self.loss_history.last().map_or(f64::NAN, |r| r.total)
    }

    pub fn loss_history_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.loss_history {
            out.push_str(&serde_json::to_string(r).expect("loss record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn palettes_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.palettes).expect("palettes serialize")
    }

    /// Writes the PNG at `out`, `<out>.losses.jsonl`, `<out>.palettes.json`
    /// and, when `mask_dir` is given, per-color mask PNGs.
    pub fn export(&self, out: impl AsRef<Path>, mask_dir: Option<&Path>) -> Result<Vec<PathBuf>> {
        let out = out.as_ref();
        save_image(&self.image, out)?;
        let mut written = vec![out.to_path_buf()];
        let losses = sidecar(out, "losses.jsonl");
        write_file(&losses, self.loss_history_jsonl().as_bytes())?;
        written.push(losses);
        let palettes = sidecar(out, "palettes.json");
        write_file(
            &palettes,
            serde_json::to_string_pretty(&self.palettes_json())?.as_bytes(),
        )?;
        written.push(palettes);
        if let Some(dir) = mask_dir {
            if let Some(m) = &self.style_masks {
                written.extend(m.save_pngs(dir, "style")?);
            }
            if let Some(m) = &self.gen_masks {
                written.extend(m.save_pngs(dir, "generated")?);
            }
        }
        Ok(written)
    }
}

/// `<out>.<suffix>`, e.g. `result.png.losses.jsonl`.
pub fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| CamsError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

/// How the loop reports and refreshes the generated-image masks.
enum MaskTracking {
    None,
    Frozen(MaskSet),
    Live { palette: Palette, sigma: f64, smooth: bool },
    Detached { palette: Palette, sigma: f64, smooth: bool },
}

impl MaskTracking {
    fn current(&self, x: &Array3<f64>) -> Result<Option<MaskSet>> {
        match self {
            MaskTracking::None => Ok(None),
            MaskTracking::Frozen(m) => Ok(Some(m.clone())),
            MaskTracking::Live { palette, sigma, smooth } | MaskTracking::Detached { palette, sigma, smooth } => {
                build_mask_set_from_pixels(x, palette, *sigma, *smooth).map(Some)
            }
        }
    }
}

struct Setup {
    style_term: StyleTerm,
    tracking: MaskTracking,
    palettes: Option<PalettesUsed>,
    style_masks: Option<MaskSet>,
    style_grams: GramSet,
}

/// Color-aware multi-style transfer. The generated image starts as `content`.
pub fn run_transfer(
    content: &Image,
    style: &Image,
    extractor: &FeatureExtractor,
    cfg: &TransferConfig,
    on_progress: Option<&mut ProgressFn<'_>>,
) -> Result<TransferResult> {
    cfg.validate()?;
    let start = Instant::now();
    let style_layers = extractor.style_layers().to_vec();
    let style_taps = extractor.extract_features(style, &style_layers)?;
    let ps = extract_palette(style, cfg.palette_k)?;
    let pc = extract_palette(content, cfg.palette_k)?;

    let setup = match cfg.mode {
        TransferMode::Auto => {
            if ps.colors.len() == 1 && pc.colors.len() == 1 && ps.colors[0] == pc.colors[0] {
                return Err(CamsError::Palette(
                    "content and style are the same single color; no usable palette".into(),
                ));
            }
            let merged = merge_palettes(
                &ps.to_palette(PaletteSource::Style),
                &pc.to_palette(PaletteSource::Content),
                cfg.tau_merge,
            )?;
            let style_masks = build_mask_set(style, &merged, cfg.sigma, cfg.smooth_masks)?;
            let style_grams = weighted_gram_set(&style_taps, &style_layers, &style_masks, None)?;
            let pairs = (0..merged.len()).map(|t| (t, t)).collect();
            let (gen_masks, tracking) = if cfg.detach_masks {
                (
                    GenMasks::Fixed(build_mask_set(content, &merged, cfg.sigma, cfg.smooth_masks)?),
                    MaskTracking::Detached {
                        palette: merged.clone(),
                        sigma: cfg.sigma,
                        smooth: cfg.smooth_masks,
                    },
                )
            } else {
                (
                    GenMasks::Live {
                        palette: merged.clone(),
                        sigma: cfg.sigma,
                        smooth: cfg.smooth_masks,
                    },
                    MaskTracking::Live {
                        palette: merged.clone(),
                        sigma: cfg.sigma,
                        smooth: cfg.smooth_masks,
                    },
                )
            };
            Setup {
                style_term: StyleTerm::ColorAware {
                    style_grams: style_grams.clone(),
                    pairs,
                    gen_masks,
                },
                tracking,
                palettes: Some(PalettesUsed {
                    style: ps,
                    content: pc,
                    merged: Some(merged),
                }),
                style_masks: Some(style_masks),
                style_grams,
            }
        }
        TransferMode::Manual => {
            let assoc = cfg.associations.as_ref().expect("validated");
            assoc.validate(pc.colors.len(), ps.colors.len())?;
            let style_pal = ps.to_palette(PaletteSource::Style);
            let content_pal = pc.to_palette(PaletteSource::Content);
            let style_masks = build_mask_set(style, &style_pal, cfg.sigma, cfg.smooth_masks)?;
            let used: BTreeSet<usize> = assoc.pairs.iter().map(|&(_, s)| s).collect();
            let style_grams = weighted_gram_set(&style_taps, &style_layers, &style_masks, Some(&used))?;
            let gen_masks = build_mask_set(content, &content_pal, cfg.sigma, cfg.smooth_masks)?;
            Setup {
                style_term: StyleTerm::ColorAware {
                    style_grams: style_grams.clone(),
                    pairs: assoc.pairs.clone(),
                    gen_masks: GenMasks::Fixed(gen_masks.clone()),
                },
                tracking: MaskTracking::Frozen(gen_masks),
                palettes: Some(PalettesUsed {
                    style: ps,
                    content: pc,
                    merged: None,
                }),
                style_masks: Some(style_masks),
                style_grams,
            }
        }
    };
    optimize(content, extractor, cfg, setup, start, on_progress)
}

/// Gram-matrix neural style transfer without masks, for comparison.
pub fn run_classic_nst(
    content: &Image,
    style: &Image,
    extractor: &FeatureExtractor,
    cfg: &TransferConfig,
    on_progress: Option<&mut ProgressFn<'_>>,
) -> Result<TransferResult> {
    cfg.validate()?;
    let start = Instant::now();
    let style_layers = extractor.style_layers().to_vec();
    let style_taps = extractor.extract_features(style, &style_layers)?;
    let style_grams = gram_set(&style_taps, &style_layers)?;
    let layer_weights: BTreeMap<String, f64> = cfg.weights.layer_weights(&style_layers)?;
    let setup = Setup {
        style_term: StyleTerm::Classic {
            style_grams: style_grams.clone(),
            layer_weights,
        },
        tracking: MaskTracking::None,
        palettes: None,
        style_masks: None,
        style_grams,
    };
    optimize(content, extractor, cfg, setup, start, on_progress)
}

fn optimize(
    content: &Image,
    extractor: &FeatureExtractor,
    cfg: &TransferConfig,
    setup: Setup,
    start: Instant,
    mut on_progress: Option<&mut ProgressFn<'_>>,
) -> Result<TransferResult> {
    let Setup {
        style_term,
        tracking,
        palettes,
        style_masks,
        style_grams,
    } = setup;
    let classic = matches!(style_term, StyleTerm::Classic { .. });
    let content_taps = extractor.extract_features(content, extractor.content_layers())?;
    let mut objective = Objective::new(extractor, content_taps, style_term, cfg.weights.clone())?;
    let dims = content.pixels().dim();

    let evaluate = |objective: &Objective<'_>, x: &Array1<f64>| -> Result<Sample<(f64, f64)>> {
        let px = x.view().into_shape_with_order(dims).expect("flat pixels").to_owned();
        match objective.evaluate(&px) {
            Ok(e) => Ok(Sample {
                value: e.total,
                grad: Array1::from_vec(e.gradient.into_iter().collect()),
                payload: (e.content, e.style),
            }),
            Err(CamsError::NonFiniteLoss { .. }) => Ok(Sample {
                value: f64::INFINITY,
                grad: Array1::from_elem(x.len(), f64::NAN),
                payload: (f64::NAN, f64::NAN),
            }),
            Err(e) => Err(e),
        }
    };
    let record = |iter: usize, s: &Sample<(f64, f64)>| LossRecord {
        iter,
        content: s.payload.0,
        cams: (!classic).then_some(s.payload.1),
        style: classic.then_some(s.payload.1),
        total: s.value,
    };
    let to_image =
        |x: &Array1<f64>| -> Array3<f64> { x.view().into_shape_with_order(dims).expect("flat pixels").to_owned() };

    let mut x = Array1::from_vec(content.pixels().iter().copied().collect());
    let initial = evaluate(&objective, &x)?;
    let mut history = vec![record(0, &initial)];
    let partial = |x: &Array1<f64>, history: &[LossRecord], iters: usize| -> Result<TransferResult> {
        let px = to_image(x);
        Ok(TransferResult {
            image: Image::from_unclamped(px.clone())?,
            loss_history: history.to_vec(),
            palettes: palettes.clone(),
            style_masks: style_masks.clone(),
            gen_masks: tracking.current(&px)?,
            style_grams: style_grams.clone(),
            iterations_run: iters,
            termination: Termination::MaxIterations,
            wall_time_s: start.elapsed().as_secs_f64(),
            config: cfg.clone(),
        })
    };
    if !initial.value.is_finite() {
        return Err(CamsError::NonFiniteLoss {
            iter: Some(0),
            last_finite: None,
        });
    }
    if let Some(cb) = on_progress.as_deref_mut() {
        let px = to_image(&x);
        let masks = tracking.current(&px)?;
        let state = TransferState {
            iter: 0,
            total_iters: cfg.iterations,
            losses: history[0],
            generated: &Image::from_unclamped(px)?,
            gen_masks: masks.as_ref(),
            is_snapshot: false,
        };
        if cb(&state).is_break() {
            return Err(CamsError::Cancelled);
        }
    }

    let lbfgs_cfg = LbfgsConfig {
        learning_rate: cfg.learning_rate,
        ..LbfgsConfig::default()
    };
    let mut opt = Lbfgs::new(lbfgs_cfg, initial);
    let mut termination = Termination::MaxIterations;
    let mut iters = 0;
    for iter in 1..=cfg.iterations {
        let before = x.clone();
        let outcome = opt.step(&mut x, |x| evaluate(&objective, x))?;
        let moved = x != before;
        if moved || outcome == StepOutcome::Continue {
            iters = iter;
            let rec = record(iter, opt.current());
            if !rec.total.is_finite() || !rec.content.is_finite() {
                let last = partial(&before, &history, iter - 1)?;
                return Err(CamsError::NonFiniteLoss {
                    iter: Some(iter),
                    last_finite: Some(Box::new(last)),
                });
            }
            if let MaskTracking::Detached { palette, sigma, smooth } = &tracking {
                let masks = build_mask_set_from_pixels(&to_image(&x), palette, *sigma, *smooth)?;
                objective.set_fixed_masks(masks);
                let refreshed = evaluate(&objective, &x)?;
                opt.refresh(refreshed);
            }
            history.push(rec);
        }
        if let StepOutcome::Converged(reason) = outcome {
            termination = reason.into();
        }
        let last = iter == cfg.iterations || termination != Termination::MaxIterations;
        if moved || outcome == StepOutcome::Continue || last {
            if let Some(cb) = on_progress.as_deref_mut() {
                let px = to_image(&x);
                let masks = tracking.current(&px)?;
                let state = TransferState {
                    iter: iters,
                    total_iters: cfg.iterations,
                    losses: *history.last().expect("nonempty history"),
                    generated: &Image::from_unclamped(px)?,
                    gen_masks: masks.as_ref(),
                    is_snapshot: last || iters % cfg.snapshot_every == 0,
                };
                if cb(&state).is_break() {
                    return Err(CamsError::Cancelled);
                }
            }
        }
        if last {
            break;
        }
    }
    tracing::debug!(
        iterations = iters,
        evaluations = opt.function_evaluations(),
        ?termination,
        "transfer finished"
    );
    let mut result = partial(&x, &history, iters)?;
    result.termination = termination;
    Ok(result)
}
