//! Gram statistics and loss terms.
//!
//! Gram matrices are normalized by the layer's spatial element count m_l. The
//! masked (weighted) variant multiplies features by a layer-sized mask before
//! the inner products and keeps the same m_l, so scaling a mask by `s` scales
//! its Gram matrix by `s²`.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CamsError, Result};
use crate::features::{FeatureMap, FeatureTaps};
use crate::masking::LayerMask;

pub type GramMatrix = Array2<f64>;

/// Key of a Gram matrix: (layer name, palette color index). Unmasked Gram
/// matrices use color index 0.
pub type GramKey = (String, usize);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GramSet {
    grams: BTreeMap<GramKey, GramMatrix>,
}

impl GramSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: impl Into<String>, color: usize, gram: GramMatrix) {
        self.grams.insert((layer.into(), color), gram);
    }

    pub fn get(&self, layer: &str, color: usize) -> Option<&GramMatrix> {
        self.grams.get(&(layer.to_string(), color))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GramKey, &GramMatrix)> {
        self.grams.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &GramKey> {
        self.grams.keys()
    }

    pub fn layers(&self) -> BTreeSet<&str> {
        self.grams.keys().map(|(l, _)| l.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }
}

/// Scale factors for the total objective and per-layer style weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    /// Per-layer weights for the classic style loss. `None` means 1/|L_s|
    /// for every style layer.
    #[serde(default)]
    pub style_layer_weights: Option<BTreeMap<String, f64>>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1e4,
            style_layer_weights: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.alpha) || !ok(self.beta) {
            return Err(CamsError::InvalidConfig(format!(
                "alpha and beta must be finite and >= 0 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        if let Some(w) = &self.style_layer_weights {
            if w.values().any(|&v| !ok(v)) {
                return Err(CamsError::InvalidConfig(
                    "style layer weights must be finite and >= 0".into(),
                ));
            }
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(CamsError::InvalidConfig("alpha and beta cannot both be zero".into()));
        }
        Ok(())
    }

    /// Resolved per-layer style weights for the given style layers.
    pub fn layer_weights(&self, style_layers: &[String]) -> Result<BTreeMap<String, f64>> {
        match &self.style_layer_weights {
            None => {
                let w = 1.0 / style_layers.len().max(1) as f64;
                Ok(style_layers.iter().map(|l| (l.clone(), w)).collect())
            }
            Some(map) => style_layers
                .iter()
                .map(|l| {
                    map.get(l)
                        .map(|&w| (l.clone(), w))
                        .ok_or_else(|| CamsError::LayerSetMismatch(format!("no style weight for layer '{l}'")))
                })
                .collect(),
        }
    }
}

fn flatten(feat: &FeatureMap) -> Result<ArrayView2<'_, f64>> {
    let (c, h, w) = feat.dim();
    if c == 0 || h * w == 0 {
        return Err(CamsError::EmptyFeature);
    }
    Ok(feat
        .as_slice()
        .map(|s| ArrayView2::from_shape((c, h * w), s).expect("contiguous feature"))
        .expect("feature maps are standard-layout"))
}

/// G_ij = (1/m_l) ⟨F_i, F_j⟩ over vectorized channel maps.
pub fn gram_matrix(feat: &FeatureMap) -> Result<GramMatrix> {
    let f = flatten(feat)?;
    let m = f.ncols() as f64;
    Ok(f.dot(&f.t()) / m)
}

/// Gram matrix of `feat ⊙ mask` with the unmasked normalization m_l.
pub fn weighted_gram_matrix(feat: &FeatureMap, layer_mask: &LayerMask) -> Result<GramMatrix> {
    if feat.dim() != layer_mask.values().dim() {
        return Err(CamsError::DimMismatch(format!(
            "feature {:?} vs mask {:?}",
            feat.dim(),
            layer_mask.values().dim()
        )));
    }
    let weighted = feat * layer_mask.values();
    gram_matrix(&weighted)
}

/// Weighted Gram matrix with a single spatial mask broadcast over channels.
pub fn spatial_weighted_gram(feat: &FeatureMap, mask: ArrayView2<f64>) -> Result<GramMatrix> {
    let (_, h, w) = feat.dim();
    if mask.dim() != (h, w) {
        return Err(CamsError::DimMismatch(format!(
            "feature {h}x{w} vs mask {:?}",
            mask.dim()
        )));
    }
    let weighted = feat * &mask.insert_axis(Axis(0));
    gram_matrix(&weighted)
}

fn frobenius_sq(a: &GramMatrix, b: &GramMatrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn same_layers(a: &FeatureTaps, b: &FeatureTaps) -> Result<()> {
    let la: Vec<&str> = a.layers().collect();
    let lb: Vec<&str> = b.layers().collect();
    if la != lb {
        return Err(CamsError::LayerSetMismatch(format!("{la:?} vs {lb:?}")));
    }
    Ok(())
}

/// ½ Σ_l ‖F_c^l − F_g^l‖²_F over the layers present in both tap sets.
pub fn content_loss(content_taps: &FeatureTaps, gen_taps: &FeatureTaps) -> Result<f64> {
    same_layers(content_taps, gen_taps)?;
    let mut total = 0.0;
    for (layer, fc) in content_taps.iter() {
        let fg = gen_taps.get(layer).expect("layer sets checked");
        if fc.dim() != fg.dim() {
            return Err(CamsError::DimMismatch(format!(
                "layer {layer}: {:?} vs {:?}",
                fc.dim(),
                fg.dim()
            )));
        }
        total += fc.iter().zip(fg.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(0.5 * total)
}

/// Σ_l w_l ‖G_s^l − G_g^l‖²_F over unmasked Gram matrices (color index 0).
pub fn classic_style_loss(style_grams: &GramSet, gen_grams: &GramSet, weights: &BTreeMap<String, f64>) -> Result<f64> {
    if style_grams.layers() != gen_grams.layers() {
        return Err(CamsError::LayerSetMismatch(format!(
            "{:?} vs {:?}",
            style_grams.layers(),
            gen_grams.layers()
        )));
    }
    let mut total = 0.0;
    for ((layer, color), gs) in style_grams.iter() {
        let gg = gen_grams
            .get(layer, *color)
            .ok_or_else(|| CamsError::LayerSetMismatch(format!("generated grams lack ({layer}, {color})")))?;
        let w = weights
            .get(layer)
            .ok_or_else(|| CamsError::LayerSetMismatch(format!("no style weight for layer '{layer}'")))?;
        total += w * frobenius_sq(gs, gg);
    }
    Ok(total)
}

/// Σ_l Σ_t ‖G_s^{l(t)} − G_g^{l(t)}‖²_F (unit layer weights).
pub fn cams_loss(style_grams: &GramSet, gen_grams: &GramSet) -> Result<f64> {
    let ks: Vec<&GramKey> = style_grams.keys().collect();
    let kg: Vec<&GramKey> = gen_grams.keys().collect();
    if ks != kg {
        return Err(CamsError::KeySetMismatch(format!("{ks:?} vs {kg:?}")));
    }
    Ok(style_grams
        .iter()
        .map(|((l, t), gs)| frobenius_sq(gs, gen_grams.get(l, *t).expect("keys checked")))
        .sum())
}

/// Σ_l Σ_{(a,b)} ‖G_s^{l(b)} − G_g^{l(a)}‖²_F for user associations pairing
/// generated-image color `a` with style color `b`. Auto mode is the special
/// case `pairs = [(t, t)]`.
pub fn association_loss(style_grams: &GramSet, gen_grams: &GramSet, pairs: &[(usize, usize)]) -> Result<f64> {
    let layers = style_grams.layers();
    if layers != gen_grams.layers() {
        return Err(CamsError::LayerSetMismatch(format!(
            "{layers:?} vs {:?}",
            gen_grams.layers()
        )));
    }
    let mut total = 0.0;
    for layer in layers {
        for &(a, b) in pairs {
            let gs = style_grams
                .get(layer, b)
                .ok_or_else(|| CamsError::KeySetMismatch(format!("style grams lack ({layer}, {b})")))?;
            let gg = gen_grams
                .get(layer, a)
                .ok_or_else(|| CamsError::KeySetMismatch(format!("generated grams lack ({layer}, {a})")))?;
            total += frobenius_sq(gs, gg);
        }
    }
    Ok(total)
}

/// α·L_content + β·L_style (or L_CAMS).
pub fn total_loss(lc: f64, lstyle_or_cams: f64, weights: &LossWeights) -> Result<f64> {
    if !lc.is_finite() || !lstyle_or_cams.is_finite() || lc < 0.0 || lstyle_or_cams < 0.0 {
        return Err(CamsError::NonFiniteLoss {
            iter: None,
            last_finite: None,
        });
    }
    let total = weights.alpha * lc + weights.beta * lstyle_or_cams;
    if !total.is_finite() {
        return Err(CamsError::NonFiniteLoss {
            iter: None,
            last_finite: None,
        });
    }
    Ok(total)
}

/// Gradient of a loss with respect to the (unmasked) features that produced
/// a Gram matrix, given `d = dL/dG`: (1/m)(d + dᵀ) F.
pub(crate) fn gram_vjp(feat: &FeatureMap, d: &GramMatrix) -> FeatureMap {
    let (c, h, w) = feat.dim();
    let f = flatten(feat).expect("nonempty feature");
    let sym = d + &d.t();
    let g = sym.dot(&f) / (h * w) as f64;
    g.into_shape_with_order((c, h, w)).expect("contiguous")
}

/// Gradients of a loss through a spatially weighted Gram matrix, with
/// respect to the features and to the spatial mask.
pub(crate) fn spatial_weighted_gram_vjp(
    feat: &FeatureMap,
    mask: ArrayView2<f64>,
    d: &GramMatrix,
) -> (FeatureMap, Array2<f64>) {
    let weighted = feat * &mask.insert_axis(Axis(0));
    let g_weighted = gram_vjp(&weighted, d);
    let g_feat = &g_weighted * &mask.insert_axis(Axis(0));
    let g_mask = (&g_weighted * feat).sum_axis(Axis(0));
    (g_feat, g_mask)
}
