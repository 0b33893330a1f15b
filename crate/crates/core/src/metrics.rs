//! Post-hoc loss report for an (output, content, style) triple.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{CamsError, Result};
use crate::features::FeatureExtractor;
use crate::imaging::Image;
use crate::losses::{content_loss, gram_matrix, spatial_weighted_gram};
use crate::masking::{build_mask_set, resize_to_layer};
use crate::palette::{extract_palette, merge_palettes, Palette, PaletteSource};
use crate::transfer::TransferConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerTerms {
    /// Weighted classic style term for this layer.
    pub style: f64,
    /// Color-aware term for this layer, summed over palette colors.
    pub cams: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub style_layer_weights: BTreeMap<String, f64>,
    pub palette: Palette,
    pub sigma: f64,
    pub smooth_masks: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub color_aware: f64,
    pub style: f64,
    pub content: f64,
    pub per_layer_breakdown: BTreeMap<String, LayerTerms>,
    pub wall_time_s: f64,
    pub fid: Option<f64>,
    pub metadata: EvalMetadata,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "color_aware,style,content,wall_time_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.color_aware, self.style, self.content, self.wall_time_s
        )
    }
}

/// Content loss between output and content; classic and color-aware style
/// losses between output and style. The color-aware term uses the merged
/// palette of content and style with masks built per `cfg`.
pub fn evaluate_triple(
    output: &Image,
    content: &Image,
    style: &Image,
    extractor: &FeatureExtractor,
    cfg: &TransferConfig,
) -> Result<EvalReport> {
    let start = Instant::now();
    if output.height() != content.height() || output.width() != content.width() {
        return Err(CamsError::DimMismatch(format!(
            "output is {}x{} but content is {}x{}",
            output.height(),
            output.width(),
            content.height(),
            content.width()
        )));
    }
    let style_layers = extractor.style_layers().to_vec();
    let content_layers = extractor.content_layers().to_vec();
    let mut all_layers = style_layers.clone();
    all_layers.extend(content_layers.iter().filter(|l| !style_layers.contains(l)).cloned());

    let out_taps = extractor.extract_features(output, &all_layers)?;
    let content_taps = extractor.extract_features(content, &content_layers)?;
    let style_taps = extractor.extract_features(style, &style_layers)?;

    let content_value = content_loss(&content_taps, &out_taps.subset(&content_layers)?)?;

    let ps = extract_palette(style, cfg.palette_k)?;
    let pc = extract_palette(content, cfg.palette_k)?;
    let palette = merge_palettes(
        &ps.into_palette(PaletteSource::Style),
        &pc.into_palette(PaletteSource::Content),
        cfg.tau_merge,
    )?;
    let style_masks = build_mask_set(style, &palette, cfg.sigma, cfg.smooth_masks)?;
    let out_masks = build_mask_set(output, &palette, cfg.sigma, cfg.smooth_masks)?;
    let weights = cfg.weights.layer_weights(&style_layers)?;

    let sq = |a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>| (a - b).iter().map(|v| v * v).sum::<f64>();
    let mut breakdown = BTreeMap::new();
    for l in &style_layers {
        let fs = style_taps.get(l).expect("style layer extracted");
        let fo = out_taps.get(l).expect("style layer extracted");
        let style_term = weights[l] * sq(&gram_matrix(fs)?, &gram_matrix(fo)?);
        let mut cams_term = 0.0;
        for t in 0..palette.len() {
            let (_, hs, ws) = fs.dim();
            let (_, ho, wo) = fo.dim();
            let ms = resize_to_layer(style_masks.mask(t).values().view(), hs, ws);
            let mo = resize_to_layer(out_masks.mask(t).values().view(), ho, wo);
            cams_term += sq(
                &spatial_weighted_gram(fs, ms.view())?,
                &spatial_weighted_gram(fo, mo.view())?,
            );
        }
        breakdown.insert(
            l.clone(),
            LayerTerms {
                style: style_term,
                cams: cams_term,
            },
        );
    }
    let style_value = breakdown.values().map(|t| t.style).sum();
    let cams_value = breakdown.values().map(|t| t.cams).sum();
    Ok(EvalReport {
        color_aware: cams_value,
        style: style_value,
        content: content_value,
        per_layer_breakdown: breakdown,
        wall_time_s: start.elapsed().as_secs_f64(),
        fid: None,
        metadata: EvalMetadata {
            style_layer_weights: weights,
            palette,
            sigma: cfg.sigma,
            smooth_masks: cfg.smooth_masks,
        },
    })
}
