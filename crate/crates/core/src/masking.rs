//! Per-color soft masks.
//!
//! A mask weights every pixel by an RBF of its RGB distance to a palette color,
//! `exp(-(‖I_j - t‖ / σ)²)`, optionally smoothed with a 15×15, σ=5px Gaussian.
//! Masks are independent per color (no normalization across the palette).

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{CamsError, Result};
use crate::imaging::{resize_array, resize_array_adjoint, save_field_png, GaussianKernel, Image, ScalarField};
use crate::palette::{Palette, Rgb};

pub const DEFAULT_SIGMA: f64 = 0.275;
pub const SMOOTH_KERNEL_SIZE: usize = 15;
pub const SMOOTH_SIGMA_PX: f64 = 5.0;

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(CamsError::InvalidSigma(sigma))
    }
}

fn rbf_mask(px: &Array3<f64>, t: &Rgb, sigma: f64) -> Array2<f64> {
    let inv = 1.0 / (sigma * sigma);
    let (h, w, _) = px.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let d2 = (px[[y, x, 0]] - t[0]).powi(2) + (px[[y, x, 1]] - t[1]).powi(2) + (px[[y, x, 2]] - t[2]).powi(2);
        (-d2 * inv).exp()
    })
}

/// RBF similarity of every pixel to color `t`.
pub fn compute_color_mask(img: &Image, t: Rgb, sigma: f64) -> Result<ScalarField> {
    check_sigma(sigma)?;
    ScalarField::new(rbf_mask(img.pixels(), &t, sigma))
}

/// One mask per palette color, all at the source image's resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    masks: Vec<ScalarField>,
    palette: Palette,
    sigma: f64,
    smoothed: bool,
}

impl MaskSet {
    pub fn masks(&self) -> &[ScalarField] {
        &self.masks
    }

    pub fn mask(&self, color_index: usize) -> &ScalarField {
        &self.masks[color_index]
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn smoothed(&self) -> bool {
        self.smoothed
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Writes `mask_<tag>_<index>.png` for every mask into `dir`.
    pub fn save_pngs(&self, dir: impl AsRef<Path>, tag: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir.as_ref()).map_err(|source| CamsError::Io {
            path: dir.as_ref().to_path_buf(),
            source,
        })?;
        self.masks
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let path = dir.as_ref().join(format!("mask_{tag}_{i}.png"));
                save_field_png(m, &path).map(|_| path)
            })
            .collect()
    }
}

/// Computes the mask for each palette color, smoothing each with the fixed
/// 15×15 / σ=5px Gaussian when `smooth` is set.
pub fn build_mask_set(img: &Image, palette: &Palette, sigma: f64, smooth: bool) -> Result<MaskSet> {
    build_mask_set_from_pixels(img.pixels(), palette, sigma, smooth)
}

/// [`build_mask_set`] on a raw (H, W, 3) array that may leave [0,1].
pub fn build_mask_set_from_pixels(
    pixels: &Array3<f64>,
    palette: &Palette,
    sigma: f64,
    smooth: bool,
) -> Result<MaskSet> {
    check_sigma(sigma)?;
    let kernel = smooth.then(smoothing_kernel);
    let masks = palette
        .colors()
        .iter()
        .map(|t| {
            let raw = rbf_mask(pixels, t, sigma);
            let values = match &kernel {
                Some(k) => k.apply(raw.view()),
                None => raw,
            };
            ScalarField::new(values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskSet {
        masks,
        palette: palette.clone(),
        sigma,
        smoothed: smooth,
    })
}

fn smoothing_kernel() -> GaussianKernel {
    GaussianKernel::new(SMOOTH_KERNEL_SIZE, SMOOTH_SIGMA_PX).expect("fixed kernel parameters are valid")
}

/// Pulls gradients with respect to each (possibly smoothed) mask in a
/// [`build_mask_set_from_pixels`] result back to the pixels. `mask_grads[i]`
/// corresponds to palette color `i`; `None` entries contribute nothing.
pub fn mask_set_vjp(
    px: &Array3<f64>,
    palette: &Palette,
    sigma: f64,
    smooth: bool,
    mask_grads: &[Option<Array2<f64>>],
) -> Array3<f64> {
    assert_eq!(mask_grads.len(), palette.len(), "one gradient slot per palette color");
    let kernel = smooth.then(smoothing_kernel);
    let coeff = -2.0 / (sigma * sigma);
    let mut grad = Array3::zeros(px.dim());
    for (t, g) in palette.colors().iter().zip(mask_grads) {
        let Some(g) = g else { continue };
        let g_raw = match &kernel {
            Some(k) => k.apply_adjoint(g.view()),
            None => g.clone(),
        };
        let raw = rbf_mask(px, t, sigma);
        for ((y, x), &m) in raw.indexed_iter() {
            let scale = g_raw[[y, x]] * m * coeff;
            for c in 0..3 {
                grad[[y, x, c]] += scale * (px[[y, x, c]] - t[c]);
            }
        }
    }
    grad
}

/// A mask resampled to a feature layer's spatial size and duplicated across
/// its channels. Stored channel-first: (channels, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    values: Array3<f64>,
}

impl LayerMask {
    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    /// The shared spatial slice (every channel is identical).
    pub fn spatial(&self) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), 0)
    }
}

/// Bilinearly resizes `mask` to the layer's spatial size, then replicates it
/// across `layer_c` channels.
pub fn adapt_mask_to_layer(mask: &ScalarField, layer_h: usize, layer_w: usize, layer_c: usize) -> Result<LayerMask> {
    if layer_h == 0 || layer_w == 0 || layer_c == 0 {
        return Err(CamsError::InvalidSize {
            height: layer_h,
            width: layer_w,
        });
    }
    let spatial = resize_to_layer(mask.values().view(), layer_h, layer_w);
    let values = spatial
        .insert_axis(Axis(0))
        .broadcast((layer_c, layer_h, layer_w))
        .expect("broadcast over channel axis")
        .to_owned();
    Ok(LayerMask { values })
}

/// Spatial part of [`adapt_mask_to_layer`], shared by the loss code, which
/// broadcasts over channels instead of materializing copies.
pub fn resize_to_layer(mask: ArrayView2<f64>, layer_h: usize, layer_w: usize) -> Array2<f64> {
    resize_array(mask, layer_h, layer_w)
}

/// Adjoint of [`resize_to_layer`].
pub fn resize_to_layer_adjoint(grad: ArrayView2<f64>, mask_h: usize, mask_w: usize) -> Array2<f64> {
    resize_array_adjoint(grad, mask_h, mask_w)
}
