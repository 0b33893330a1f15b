//! The scalar objective optimized over the generated image, with its
//! analytic gradient.
//!
//! Gradients are assembled by hand: tap gradients from the content and style
//! terms are pushed back through the frozen backbone, and, when the
//! generated-image masks are live, mask gradients are pushed back through the
//! bilinear resize, the Gaussian smoothing and the RBF.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3};

use crate::error::{CamsError, Result};
use crate::features::{FeatureExtractor, FeatureMap, FeatureTaps};
use crate::imaging::Image;
use crate::losses::{gram_matrix, gram_vjp, spatial_weighted_gram, spatial_weighted_gram_vjp, GramSet, LossWeights};
use crate::masking::{build_mask_set_from_pixels, mask_set_vjp, resize_to_layer, resize_to_layer_adjoint, MaskSet};
use crate::palette::Palette;

/// Unmasked Gram matrices (color index 0) for the given layers.
pub fn gram_set(taps: &FeatureTaps, layers: &[String]) -> Result<GramSet> {
    let mut set = GramSet::new();
    for l in layers {
        let f = taps.get(l).ok_or_else(|| CamsError::UnknownLayer(l.clone()))?;
        set.insert(l.clone(), 0, gram_matrix(f)?);
    }
    Ok(set)
}

/// Weighted Gram matrices for every (layer, color) with color index into
/// `masks`. When `colors` is given only those indices are computed.
pub fn weighted_gram_set(
    taps: &FeatureTaps,
    layers: &[String],
    masks: &MaskSet,
    colors: Option<&BTreeSet<usize>>,
) -> Result<GramSet> {
    let mut set = GramSet::new();
    for l in layers {
        let f = taps.get(l).ok_or_else(|| CamsError::UnknownLayer(l.clone()))?;
        let (_, h, w) = f.dim();
        for (t, m) in masks.masks().iter().enumerate() {
            if colors.is_some_and(|c| !c.contains(&t)) {
                continue;
            }
            let lm = resize_to_layer(m.values().view(), h, w);
            set.insert(l.clone(), t, spatial_weighted_gram(f, lm.view())?);
        }
    }
    Ok(set)
}

/// How the generated image's masks are obtained at each evaluation.
#[derive(Debug, Clone)]
pub enum GenMasks {
    /// Recomputed from the current pixels; gradients flow through them.
    Live { palette: Palette, sigma: f64, smooth: bool },
    /// Held constant.
    Fixed(MaskSet),
}

#[derive(Debug, Clone)]
pub enum StyleTerm {
    /// Σ_l w_l ‖G_s^l − G_g^l‖² over unmasked Gram matrices.
    Classic {
        style_grams: GramSet,
        layer_weights: BTreeMap<String, f64>,
    },
    /// Σ_l Σ_{(a,b)} ‖G_s^{l(b)} − G_g^{l(a)}‖² with generated color `a`
    /// drawn from `gen_masks` and style color `b` from `style_grams`.
    ColorAware {
        style_grams: GramSet,
        pairs: Vec<(usize, usize)>,
        gen_masks: GenMasks,
    },
}

/// Loss breakdown and gradient at one point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub content: f64,
    pub style: f64,
    pub total: f64,
    /// d(total)/d(pixels), shape (H, W, 3).
    pub gradient: Array3<f64>,
}

pub struct Objective<'a> {
    extractor: &'a FeatureExtractor,
    content_targets: FeatureTaps,
    style: StyleTerm,
    weights: LossWeights,
    layers: Vec<String>,
}

impl<'a> Objective<'a> {
    /// `content_targets` must hold the extractor's content layers.
    pub fn new(
        extractor: &'a FeatureExtractor,
        content_targets: FeatureTaps,
        style: StyleTerm,
        weights: LossWeights,
    ) -> Result<Self> {
        weights.validate()?;
        let expected: BTreeSet<&str> = extractor.content_layers().iter().map(String::as_str).collect();
        let got: BTreeSet<&str> = content_targets.layers().collect();
        if expected != got {
            return Err(CamsError::LayerSetMismatch(format!(
                "content targets {got:?}, expected {expected:?}"
            )));
        }
        let mut layers: Vec<String> = extractor.style_layers().to_vec();
        for l in extractor.content_layers() {
            if !layers.contains(l) {
                layers.push(l.clone());
            }
        }
        Ok(Self {
            extractor,
            content_targets,
            style,
            weights,
            layers,
        })
    }

    pub fn style_term(&self) -> &StyleTerm {
        &self.style
    }

    /// Replaces fixed generated-image masks (used when masks are refreshed
    /// between iterations but treated as constants within one).
    pub fn set_fixed_masks(&mut self, masks: MaskSet) {
        if let StyleTerm::ColorAware { gen_masks, .. } = &mut self.style {
            *gen_masks = GenMasks::Fixed(masks);
        }
    }

    pub fn evaluate_image(&self, img: &Image) -> Result<Evaluation> {
        self.evaluate(img.pixels())
    }

    /// Loss and gradient at `pixels` (H, W, 3); values may leave [0,1].
    pub fn evaluate(&self, pixels: &Array3<f64>) -> Result<Evaluation> {
        let pass = self.extractor.forward_pixels(pixels, &self.layers)?;
        let taps = pass.taps();
        let (alpha, beta) = (self.weights.alpha, self.weights.beta);
        let mut tap_grads: BTreeMap<String, FeatureMap> = BTreeMap::new();
        let mut add_grad = |layer: &str, g: FeatureMap| match tap_grads.get_mut(layer) {
            Some(acc) => *acc += &g,
            None => {
                tap_grads.insert(layer.to_string(), g);
            }
        };

        let mut content = 0.0;
        for (layer, fc) in self.content_targets.iter() {
            let fg = taps.get(layer).expect("content layer extracted");
            if fg.dim() != fc.dim() {
                return Err(CamsError::DimMismatch(format!(
                    "content layer {layer}: {:?} vs {:?}",
                    fc.dim(),
                    fg.dim()
                )));
            }
            let diff = fg - fc;
            content += 0.5 * diff.iter().map(|v| v * v).sum::<f64>();
            if alpha != 0.0 {
                add_grad(layer, diff * alpha);
            }
        }

        let mut style = 0.0;
        let mut mask_grads: Option<Vec<Option<Array2<f64>>>> = None;
        match &self.style {
            StyleTerm::Classic {
                style_grams,
                layer_weights,
            } => {
                for l in self.extractor.style_layers() {
                    let f = taps.get(l).expect("style layer extracted");
                    let gs = style_grams
                        .get(l, 0)
                        .ok_or_else(|| CamsError::LayerSetMismatch(format!("no style gram for '{l}'")))?;
                    let w = *layer_weights
                        .get(l)
                        .ok_or_else(|| CamsError::LayerSetMismatch(format!("no style weight for '{l}'")))?;
                    let diff = gram_matrix(f)? - gs;
                    style += w * diff.iter().map(|v| v * v).sum::<f64>();
                    if beta != 0.0 && w != 0.0 {
                        add_grad(l, gram_vjp(f, &(diff * (2.0 * w * beta))));
                    }
                }
            }
            StyleTerm::ColorAware {
                style_grams,
                pairs,
                gen_masks,
            } => {
                let live_masks;
                let (masks, live) = match gen_masks {
                    GenMasks::Live { palette, sigma, smooth } => {
                        live_masks = build_mask_set_from_pixels(pixels, palette, *sigma, *smooth)?;
                        (&live_masks, true)
                    }
                    GenMasks::Fixed(m) => (m, false),
                };
                let (img_h, img_w, _) = pixels.dim();
                if masks.masks()[0].height() != img_h || masks.masks()[0].width() != img_w {
                    return Err(CamsError::DimMismatch("generated masks do not match image size".into()));
                }
                let used: BTreeSet<usize> = pairs.iter().map(|&(a, _)| a).collect();
                if let Some(&a) = used.iter().find(|&&a| a >= masks.len()) {
                    return Err(CamsError::InvalidAssociation(format!(
                        "generated color {a} has no mask"
                    )));
                }
                let mut grads_full: Vec<Option<Array2<f64>>> = vec![None; masks.len()];
                for l in self.extractor.style_layers() {
                    let f = taps.get(l).expect("style layer extracted");
                    let (c, h, w) = f.dim();
                    let mut f_grad: Option<FeatureMap> = None;
                    for &a in &used {
                        let lm = resize_to_layer(masks.mask(a).values().view(), h, w);
                        let gg = spatial_weighted_gram(f, lm.view())?;
                        let mut d = Array2::<f64>::zeros((c, c));
                        for &(_, b) in pairs.iter().filter(|(pa, _)| *pa == a) {
                            let gs = style_grams
                                .get(l, b)
                                .ok_or_else(|| CamsError::KeySetMismatch(format!("no style gram for ({l}, {b})")))?;
                            let diff = &gg - gs;
                            style += diff.iter().map(|v| v * v).sum::<f64>();
                            d += &(diff * 2.0);
                        }
                        if beta == 0.0 {
                            continue;
                        }
                        d *= beta;
                        let (gf, gm) = spatial_weighted_gram_vjp(f, lm.view(), &d);
                        match &mut f_grad {
                            Some(acc) => *acc += &gf,
                            None => f_grad = Some(gf),
                        }
                        if live {
                            let up = resize_to_layer_adjoint(gm.view(), img_h, img_w);
                            match &mut grads_full[a] {
                                Some(acc) => *acc += &up,
                                None => grads_full[a] = Some(up),
                            }
                        }
                    }
                    if let Some(g) = f_grad {
                        add_grad(l, g);
                    }
                }
                if live {
                    mask_grads = Some(grads_full);
                }
            }
        }

        let total = alpha * content + beta * style;
        if !total.is_finite() {
            return Err(CamsError::NonFiniteLoss {
                iter: None,
                last_finite: None,
            });
        }
        let mut gradient = self.extractor.input_gradient(&pass, &tap_grads);
        if let (
            Some(grads),
            StyleTerm::ColorAware {
                gen_masks: GenMasks::Live { palette, sigma, smooth },
                ..
            },
        ) = (mask_grads, &self.style)
        {
            gradient += &mask_set_vjp(pixels, palette, *sigma, *smooth, &grads);
        }
        Ok(Evaluation {
            content,
            style,
            total,
            gradient,
        })
    }
}
