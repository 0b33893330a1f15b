//! Image and scalar-field rasters, PNG/JPEG I/O, and the two linear filters
//! (Gaussian blur, bilinear resize) that the mask pipeline differentiates
//! through. Each filter ships with its adjoint so gradients can flow back from
//! layer-sized masks to image pixels.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{CamsError, Result};

/// H×W×3 RGB raster with channel values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    /// Wraps an (H, W, 3) array. Values must lie in [0,1].
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(CamsError::InvalidImage(format!("empty image {h}x{w}")));
        }
        if c != 3 {
            return Err(CamsError::InvalidImage(format!("expected 3 channels, got {c}")));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CamsError::InvalidImage(format!("channel value {v} outside [0,1]")));
        }
        Ok(Self { pixels })
    }

    /// Wraps an (H, W, 3) array, clamping every channel into [0,1]. NaN maps to 0.
    pub fn from_unclamped(mut pixels: Array3<f64>) -> Result<Self> {
        pixels.mapv_inplace(clamp_unit);
        Self::new(pixels)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let pixels = Array3::from_shape_fn((height, width, 3), |(_, _, c)| rgb[c]);
        Self::new(pixels)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut pixels = Array3::zeros((height, width, 3));
        for y in 0..height {
            for x in 0..width {
                let rgb = f(y, x);
                for c in 0..3 {
                    pixels[[y, x, c]] = rgb[c];
                }
            }
        }
        Self::new(pixels)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.pixels[[y, x, 0]], self.pixels[[y, x, 1]], self.pixels[[y, x, 2]]]
    }

    /// Iterates over pixels in row-major order.
    pub fn iter_pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.pixels
            .as_slice()
            .expect("image storage is contiguous")
            .chunks_exact(3)
            .map(|p| [p[0], p[1], p[2]])
    }

    /// Bilinear resize of each channel.
    pub fn resized(&self, out_h: usize, out_w: usize) -> Result<Image> {
        if out_h == 0 || out_w == 0 {
            return Err(CamsError::InvalidSize {
                height: out_h,
                width: out_w,
            });
        }
        let mut out = Array3::zeros((out_h, out_w, 3));
        for c in 0..3 {
            let channel = self.pixels.index_axis(Axis(2), c);
            let resized = resize_array(channel, out_h, out_w);
            out.index_axis_mut(Axis(2), c).assign(&resized);
        }
        Image::from_unclamped(out)
    }

    /// Maximum absolute channel difference between two images of equal size.
    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.pixels.dim(), other.pixels.dim(), "image dims differ");
        self.pixels
            .iter()
            .zip(other.pixels.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Quantizes a unit-range value to 8 bits with clamping and round-half-up.
pub fn quantize_u8(v: f64) -> u8 {
    (clamp_unit(v) * 255.0 + 0.5).floor() as u8
}

/// Loads a PNG or JPEG file. When `max_side` is given and the longer side
/// exceeds it, the image is bilinearly downscaled so the longer side equals
/// `max_side`, preserving aspect ratio.
pub fn load_image(path: impl AsRef<Path>, max_side: Option<usize>) -> Result<Image> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(CamsError::FileNotFound(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|source| CamsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_image(&bytes, max_side).map_err(|e| match e {
        CamsError::Decode { reason, .. } => CamsError::Decode {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

/// Decodes PNG or JPEG bytes; see [`load_image`] for `max_side`.
pub fn decode_image(bytes: &[u8], max_side: Option<usize>) -> Result<Image> {
    let decode_err = |reason: String| CamsError::Decode {
        path: "<memory>".into(),
        reason,
    };
    let format = image::guess_format(bytes).map_err(|e| decode_err(e.to_string()))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(decode_err(format!("unsupported format {format:?}")));
    }
    let decoded = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| decode_err(e.to_string()))?
        .to_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let raw: Vec<f64> = decoded.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    let pixels = Array3::from_shape_vec((h, w, 3), raw).expect("rgb8 buffer has h*w*3 samples");
    let img = Image::new(pixels)?;
    match max_side {
        Some(limit) if limit > 0 && h.max(w) > limit => {
            let (out_h, out_w) = fit_within(h, w, limit);
            img.resized(out_h, out_w)
        }
        _ => Ok(img),
    }
}

/// Target dimensions that bring the longer side down to `limit`.
pub fn fit_within(h: usize, w: usize, limit: usize) -> (usize, usize) {
    let scale = limit as f64 / h.max(w) as f64;
    let out_h = ((h as f64 * scale).round() as usize).clamp(1, limit);
    let out_w = ((w as f64 * scale).round() as usize).clamp(1, limit);
    (out_h, out_w)
}

fn to_rgb8(img: &Image) -> RgbImage {
    let raw: Vec<u8> = img.pixels.iter().map(|&v| quantize_u8(v)).collect();
    RgbImage::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer size matches")
}

/// Encodes an image as an 8-bit RGB PNG.
pub fn encode_png(img: &Image) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    to_rgb8(img)
        .write_to(&mut out, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    out.into_inner()
}

/// Writes an 8-bit RGB PNG. Values are clamped to [0,1] first.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_png(img)).map_err(|source| CamsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a scalar field as an 8-bit grayscale PNG (values clamped to [0,1]).
pub fn save_field_png(field: &ScalarField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = field.values.iter().map(|&v| quantize_u8(v)).collect();
    let gray =
        image::GrayImage::from_raw(field.width() as u32, field.height() as u32, raw).expect("buffer size matches");
    gray.save_with_format(path, ImageFormat::Png)
        .map_err(|e| CamsError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })
}

/// H×W grid of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    values: Array2<f64>,
}

impl ScalarField {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (h, w) = values.dim();
        if h == 0 || w == 0 {
            return Err(CamsError::InvalidSize { height: h, width: w });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CamsError::InvalidImage(
                "scalar field contains non-finite values".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }
}

/// Normalized separable Gaussian kernel. The 2-D kernel is the outer product
/// of `taps` with itself, so its entries sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    taps: Vec<f64>,
}

impl GaussianKernel {
    pub fn new(kernel_size: usize, sigma_px: f64) -> Result<Self> {
        if kernel_size == 0 || kernel_size.is_multiple_of(2) {
            return Err(CamsError::InvalidKernel(kernel_size));
        }
        if !(sigma_px > 0.0) || !sigma_px.is_finite() {
            return Err(CamsError::InvalidSigma(sigma_px));
        }
        let radius = (kernel_size / 2) as f64;
        let mut taps: Vec<f64> = (0..kernel_size)
            .map(|i| {
                let d = i as f64 - radius;
                (-(d * d) / (2.0 * sigma_px * sigma_px)).exp()
            })
            .collect();
        let total: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= total);
        Ok(Self { taps })
    }

    pub fn size(&self) -> usize {
        self.taps.len()
    }

    pub fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Entry (dy, dx) of the 2-D kernel, indices in 0..size.
    pub fn weight_2d(&self, dy: usize, dx: usize) -> f64 {
        self.taps[dy] * self.taps[dx]
    }

    /// Convolution with edge replication.
    pub fn apply(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let horizontal = self.pass(input, Axis(1));
        self.pass(horizontal.view(), Axis(0))
    }

    /// Adjoint of [`apply`](Self::apply): maps an output-space gradient to an
    /// input-space gradient.
    pub fn apply_adjoint(&self, grad_out: ArrayView2<f64>) -> Array2<f64> {
        let vertical = self.pass_adjoint(grad_out, Axis(0));
        self.pass_adjoint(vertical.view(), Axis(1))
    }

    fn pass(&self, input: ArrayView2<f64>, axis: Axis) -> Array2<f64> {
        let r = self.radius() as isize;
        let mut out = Array2::zeros(input.dim());
        for (src, mut dst) in input.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
            let n = src.len() as isize;
            for i in 0..n {
                let mut acc = 0.0;
                for (k, &t) in self.taps.iter().enumerate() {
                    let j = (i + k as isize - r).clamp(0, n - 1);
                    acc += t * src[j as usize];
                }
                dst[i as usize] = acc;
            }
        }
        out
    }

    fn pass_adjoint(&self, grad_out: ArrayView2<f64>, axis: Axis) -> Array2<f64> {
        let r = self.radius() as isize;
        let mut grad_in = Array2::zeros(grad_out.dim());
        for (src, mut dst) in grad_out.lanes(axis).into_iter().zip(grad_in.lanes_mut(axis)) {
            let n = src.len() as isize;
            for i in 0..n {
                let g = src[i as usize];
                for (k, &t) in self.taps.iter().enumerate() {
                    let j = (i + k as isize - r).clamp(0, n - 1);
                    dst[j as usize] += t * g;
                }
            }
        }
        grad_in
    }
}

/// Convolves `field` with a normalized `kernel_size`×`kernel_size` Gaussian
/// of standard deviation `sigma_px`, replicating edge pixels at the border.
pub fn gaussian_blur(field: &ScalarField, kernel_size: usize, sigma_px: f64) -> Result<ScalarField> {
    let kernel = GaussianKernel::new(kernel_size, sigma_px)?;
    ScalarField::new(kernel.apply(field.values.view()))
}

/// Bilinear resize with half-pixel-center alignment.
pub fn resize_bilinear(field: &ScalarField, out_h: usize, out_w: usize) -> Result<ScalarField> {
    if out_h == 0 || out_w == 0 {
        return Err(CamsError::InvalidSize {
            height: out_h,
            width: out_w,
        });
    }
    ScalarField::new(resize_array(field.values.view(), out_h, out_w))
}

/// Per-axis bilinear sampling table: output index → (lower, upper, upper weight).
#[derive(Debug, Clone)]
struct AxisSampling {
    taps: Vec<(usize, usize, f64)>,
}

impl AxisSampling {
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let max = (in_len - 1) as f64;
        let taps = (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, src - lo as f64)
            })
            .collect();
        Self { taps }
    }
}

/// Bilinear resize of a raw array (half-pixel centers, clamped at the border).
pub fn resize_array(input: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = input.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return input.to_owned();
    }
    let rows = AxisSampling::new(in_h, out_h);
    let cols = AxisSampling::new(in_w, out_w);
    let mut out = Array2::zeros((out_h, out_w));
    for (oy, &(y0, y1, fy)) in rows.taps.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in cols.taps.iter().enumerate() {
            let top = input[[y0, x0]] * (1.0 - fx) + input[[y0, x1]] * fx;
            let bottom = input[[y1, x0]] * (1.0 - fx) + input[[y1, x1]] * fx;
            out[[oy, ox]] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Adjoint of [`resize_array`]: scatters an output-space gradient of shape
/// (out_h, out_w) back onto an (in_h, in_w) grid.
pub fn resize_array_adjoint(grad_out: ArrayView2<f64>, in_h: usize, in_w: usize) -> Array2<f64> {
    let (out_h, out_w) = grad_out.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return grad_out.to_owned();
    }
    let rows = AxisSampling::new(in_h, out_h);
    let cols = AxisSampling::new(in_w, out_w);
    let mut grad_in = Array2::zeros((in_h, in_w));
    for (oy, &(y0, y1, fy)) in rows.taps.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in cols.taps.iter().enumerate() {
            let g = grad_out[[oy, ox]];
            grad_in[[y0, x0]] += g * (1.0 - fy) * (1.0 - fx);
            grad_in[[y0, x1]] += g * (1.0 - fy) * fx;
            grad_in[[y1, x0]] += g * fy * (1.0 - fx);
            grad_in[[y1, x1]] += g * fy * fx;
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random::<f64>())
    }

    /// Direct double-loop convolution against the unnormalized formula.
    fn brute_force_blur(input: &Array2<f64>, size: usize, sigma: f64) -> Array2<f64> {
        let r = (size / 2) as isize;
        let mut kernel = vec![vec![0.0; size]; size];
        let mut total = 0.0;
        for dy in 0..size {
            for dx in 0..size {
                let (y, x) = (dy as f64 - r as f64, dx as f64 - r as f64);
                kernel[dy][dx] = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
                total += kernel[dy][dx];
            }
        }
        let (h, w) = input.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut acc = 0.0;
            for dy in 0..size {
                for dx in 0..size {
                    let sy = (y as isize + dy as isize - r).clamp(0, h as isize - 1) as usize;
                    let sx = (x as isize + dx as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kernel[dy][dx] / total * input[[sy, sx]];
                }
            }
            acc
        })
    }

    #[test]
    fn blur_rejects_bad_kernels() {
        let f = ScalarField::constant(4, 4, 1.0).unwrap();
        assert!(matches!(gaussian_blur(&f, 4, 1.0), Err(CamsError::InvalidKernel(4))));
        assert!(matches!(gaussian_blur(&f, 0, 1.0), Err(CamsError::InvalidKernel(0))));
        assert!(matches!(gaussian_blur(&f, 3, 0.0), Err(CamsError::InvalidSigma(_))));
        assert!(matches!(gaussian_blur(&f, 3, -1.0), Err(CamsError::InvalidSigma(_))));
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let f = ScalarField::constant(10, 7, 0.42).unwrap();
        let out = gaussian_blur(&f, 15, 5.0).unwrap();
        for &v in out.values() {
            assert_abs_diff_eq!(v, 0.42, epsilon = 1e-12);
        }
    }

    #[test]
    fn blur_of_impulse_reproduces_kernel() {
        let mut values = Array2::zeros((31, 31));
        values[[15, 15]] = 1.0;
        let out = gaussian_blur(&ScalarField::new(values).unwrap(), 15, 5.0).unwrap();
        let kernel = GaussianKernel::new(15, 5.0).unwrap();
        for dy in 0..15 {
            for dx in 0..15 {
                assert_abs_diff_eq!(
                    out.values()[[8 + dy, 8 + dx]],
                    kernel.weight_2d(dy, dx),
                    epsilon = 1e-15
                );
            }
        }
        assert_abs_diff_eq!(out.values().sum(), 1.0, epsilon = 1e-12);
        assert_eq!(out.values()[[7, 15]], 0.0);
    }

    #[test]
    fn blur_matches_brute_force_convolution() {
        let input = random_field(9, 9, 3);
        let fast = gaussian_blur(&ScalarField::new(input.clone()).unwrap(), 5, 1.0).unwrap();
        let slow = brute_force_blur(&input, 5, 1.0);
        for (a, b) in fast.values().iter().zip(slow.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn blur_preserves_mean_of_interior_mass() {
        let mut values = Array2::zeros((64, 64));
        values.slice_mut(ndarray::s![24..40, 24..40]).fill(1.0);
        let f = ScalarField::new(values).unwrap();
        let out = gaussian_blur(&f, 15, 5.0).unwrap();
        assert_abs_diff_eq!(out.mean(), f.mean(), epsilon = 1e-6);
    }

    #[test]
    fn blur_adjoint_satisfies_inner_product_identity() {
        let kernel = GaussianKernel::new(7, 2.0).unwrap();
        let x = random_field(11, 8, 1);
        let y = random_field(11, 8, 2);
        let lhs = (&kernel.apply(x.view()) * &y).sum();
        let rhs = (&x * &kernel.apply_adjoint(y.view())).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = random_field(5, 6, 4);
        let f = ScalarField::new(x.clone()).unwrap();
        assert_eq!(resize_bilinear(&f, 5, 6).unwrap().values(), &x);
        let c = ScalarField::constant(5, 6, 0.3).unwrap();
        for &v in resize_bilinear(&c, 13, 2).unwrap().values() {
            assert_abs_diff_eq!(v, 0.3, epsilon = 1e-12);
        }
        assert!(matches!(resize_bilinear(&f, 0, 3), Err(CamsError::InvalidSize { .. })));
    }

    #[test]
    fn resize_two_by_two_to_two_by_three() {
        let f = ScalarField::new(array![[0.0, 1.0], [0.0, 1.0]]).unwrap();
        let out = resize_bilinear(&f, 2, 3).unwrap();
        assert_eq!(out.values(), &array![[0.0, 0.5, 1.0], [0.0, 0.5, 1.0]]);
    }

    #[test]
    fn resize_adjoint_satisfies_inner_product_identity() {
        for &(ih, iw, oh, ow) in &[(8, 8, 4, 4), (7, 5, 3, 9), (4, 4, 16, 16)] {
            let x = random_field(ih, iw, 5);
            let y = random_field(oh, ow, 6);
            let lhs = (&resize_array(x.view(), oh, ow) * &y).sum();
            let rhs = (&x * &resize_array_adjoint(y.view(), ih, iw)).sum();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
        }
    }

    #[test]
    fn quantization_is_round_half_up_with_clamp() {
        assert_eq!(quantize_u8(0.5), 128);
        assert_eq!(quantize_u8(1.2), 255);
        assert_eq!(quantize_u8(-0.1), 0);
        assert_eq!(quantize_u8(1.0), 255);
    }

    #[test]
    fn load_missing_file_is_file_not_found() {
        let err = load_image("/definitely/not/here.png", None).unwrap_err();
        assert!(matches!(err, CamsError::FileNotFound(_)));
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"this is not an image").unwrap();
        assert!(matches!(load_image(&path, None), Err(CamsError::Decode { .. })));
    }

    #[test]
    fn load_png_extremes_scale_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        for (value, expected) in [(255u8, 1.0), (0u8, 0.0)] {
            let path = dir.path().join(format!("solid_{value}.png"));
            RgbImage::from_pixel(6, 4, image::Rgb([value; 3])).save(&path).unwrap();
            let img = load_image(&path, None).unwrap();
            assert_eq!((img.height(), img.width()), (4, 6));
            assert!(img.pixels().iter().all(|&v| v == expected));
        }
    }

    #[test]
    fn load_jpeg_downscales_preserving_aspect() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wide.jpg");
        RgbImage::from_pixel(600, 400, image::Rgb([10, 200, 30]))
            .save(&path)
            .unwrap();
        let img = load_image(&path, Some(300)).unwrap();
        assert_eq!((img.width(), img.height()), (300, 200));
    }

    #[test]
    fn save_half_gray_quantizes_to_128() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.png");
        save_image(&Image::filled(3, 3, [0.5; 3]).unwrap(), &path).unwrap();
        let raw = image::open(&path).unwrap().to_rgb8();
        assert!(raw.pixels().all(|p| p.0 == [128, 128, 128]));
    }

    #[test]
    fn out_of_range_values_clamp_to_255() {
        let mut pixels = Array3::from_elem((2, 2, 3), 0.2);
        pixels[[0, 0, 0]] = 1.2;
        let img = Image::from_unclamped(pixels.clone()).unwrap();
        assert_eq!(img.pixels()[[0, 0, 0]], 1.0);
        assert!(Image::new(pixels).is_err());
        let decoded = decode_image(&encode_png(&img), None).unwrap();
        assert_eq!(decoded.pixels()[[0, 0, 0]], 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn png_round_trip_within_quantization_step(
            values in proptest::collection::vec(-0.2f64..1.2, 4 * 5 * 3)
        ) {
            let pixels = Array3::from_shape_vec((4, 5, 3), values).unwrap();
            let clamped = pixels.mapv(|v| v.clamp(0.0, 1.0));
            let img = Image::from_unclamped(pixels).unwrap();
            let back = decode_image(&encode_png(&img), None).unwrap();
            for (a, b) in back.pixels().iter().zip(clamped.iter()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
            }
        }

        #[test]
        fn filters_stay_within_input_range(
            values in proptest::collection::vec(-3.0f64..3.0, 6 * 7),
            out_h in 1usize..12,
            out_w in 1usize..12,
        ) {
            let input = Array2::from_shape_vec((6, 7), values).unwrap();
            let f = ScalarField::new(input).unwrap();
            let (lo, hi) = (f.min() - 1e-12, f.max() + 1e-12);
            let blurred = gaussian_blur(&f, 5, 1.5).unwrap();
            prop_assert!(blurred.values().iter().all(|v| (lo..=hi).contains(v)));
            let resized = resize_bilinear(&f, out_h, out_w).unwrap();
            prop_assert!(resized.values().iter().all(|v| (lo..=hi).contains(v)));
        }
    }
}
