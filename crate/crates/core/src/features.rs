//! Frozen convolutional feature extractor.
//!
//! The backbone is a plain VGG-style stack of 3×3 convolutions (each followed
//! by ReLU) and 2×2 average pooling. Taps are named after their convolution
//! and read post-ReLU. Parameters are never updated; the only gradient this
//! module computes is the one with respect to the input image.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{CamsError, Result};
use crate::imaging::Image;

/// Channel-first feature tensor: (channels, height, width).
pub type FeatureMap = Array3<f64>;

pub const VGG19_STYLE_LAYERS: [&str; 5] = ["conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1"];
pub const VGG19_CONTENT_LAYERS: [&str; 2] = ["conv4_2", "conv5_2"];

/// Per-channel input normalization applied before the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    /// ImageNet statistics used to train the torchvision VGG weights.
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
}

impl Default for Normalization {
    fn default() -> Self {
        Self::IMAGENET
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StageSpec {
    /// 3×3 (or `kernel`×`kernel`) same-padded convolution followed by ReLU.
    ConvRelu {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        /// Key prefix in torchvision-style checkpoints (`features.<idx>`).
        torch_index: Option<usize>,
    },
    AvgPool,
}

/// Layer topology of a backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub stages: Vec<StageSpec>,
    /// Smallest accepted input side length.
    pub min_input: usize,
}

impl Architecture {
    /// VGG-19 convolutional trunk with average pooling.
    pub fn vgg19() -> Self {
        Self::vgg19_scaled(1)
    }

    /// VGG-19 topology and layer names with every width divided by
    /// `width_divisor`. Used for desk-scale runs with random weights.
    pub fn vgg19_scaled(width_divisor: usize) -> Self {
        let div = width_divisor.max(1);
        let blocks: [(usize, usize); 5] = [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)];
        let mut stages = Vec::new();
        let mut in_ch = 3;
        let mut torch_index = 0;
        for (b, &(convs, width)) in blocks.iter().enumerate() {
            let out_ch = (width / div).max(1);
            for i in 0..convs {
                stages.push(StageSpec::ConvRelu {
                    name: format!("conv{}_{}", b + 1, i + 1),
                    in_channels: in_ch,
                    out_channels: out_ch,
                    kernel: 3,
                    torch_index: Some(torch_index),
                });
                in_ch = out_ch;
                torch_index += 2;
            }
            stages.push(StageSpec::AvgPool);
            torch_index += 1;
        }
        Self { stages, min_input: 32 }
    }

    /// Two convolutions separated by one pooling stage.
    pub fn tiny() -> Self {
        Self {
            stages: vec![
                StageSpec::ConvRelu {
                    name: "conv1".into(),
                    in_channels: 3,
                    out_channels: 6,
                    kernel: 3,
                    torch_index: None,
                },
                StageSpec::AvgPool,
                StageSpec::ConvRelu {
                    name: "conv2".into(),
                    in_channels: 6,
                    out_channels: 8,
                    kernel: 3,
                    torch_index: None,
                },
            ],
            min_input: 8,
        }
    }

    pub fn conv_names(&self) -> Vec<&str> {
        self.stages
            .iter()
            .filter_map(|s| match s {
                StageSpec::ConvRelu { name, .. } => Some(name.as_str()),
                StageSpec::AvgPool => None,
            })
            .collect()
    }
}

/// Declarative description of which backbone to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSpec {
    /// Pretrained VGG-19 loaded from a safetensors checkpoint.
    Vgg19 { weights: PathBuf },
    /// VGG-19 layout with reduced widths and seeded He-normal weights.
    RandomVgg { seed: u64, width_divisor: usize },
    /// Two-convolution test double with seeded weights.
    Tiny { seed: u64 },
}

impl BackboneSpec {
    pub fn build(&self) -> Result<FeatureExtractor> {
        match self {
            BackboneSpec::Vgg19 { weights } => load_backbone(&BackboneConfig::vgg19(weights.clone())),
            BackboneSpec::RandomVgg { seed, width_divisor } => Ok(FeatureExtractor::random(
                Architecture::vgg19_scaled(*width_divisor),
                *seed,
                &VGG19_STYLE_LAYERS,
                &VGG19_CONTENT_LAYERS,
            )?),
            BackboneSpec::Tiny { seed } => Ok(FeatureExtractor::tiny(*seed)),
        }
    }
}

/// Configuration for loading pretrained weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub weights_path: PathBuf,
    pub style_layers: Vec<String>,
    pub content_layers: Vec<String>,
    pub input_normalization: Normalization,
}

impl BackboneConfig {
    pub fn vgg19(weights_path: impl Into<PathBuf>) -> Self {
        Self {
            weights_path: weights_path.into(),
            style_layers: VGG19_STYLE_LAYERS.iter().map(|s| s.to_string()).collect(),
            content_layers: VGG19_CONTENT_LAYERS.iter().map(|s| s.to_string()).collect(),
            input_normalization: Normalization::IMAGENET,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    name: String,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    /// One (out, in) matrix per kernel offset, row-major over (dy, dx).
    taps: Vec<Array2<f64>>,
    bias: Array1<f64>,
}

impl ConvLayer {
    fn from_oihw(name: &str, weights: &[f64], bias: Vec<f64>, out_c: usize, in_c: usize, k: usize) -> Self {
        let taps = (0..k * k)
            .map(|off| Array2::from_shape_fn((out_c, in_c), |(o, i)| weights[((o * in_c + i) * k * k) + off]))
            .collect();
        Self {
            name: name.to_string(),
            in_channels: in_c,
            out_channels: out_c,
            kernel: k,
            taps,
            bias: Array1::from(bias),
        }
    }

    fn to_oihw(&self) -> Vec<f64> {
        let k2 = self.kernel * self.kernel;
        let mut out = vec![0.0; self.out_channels * self.in_channels * k2];
        for (off, tap) in self.taps.iter().enumerate() {
            for ((o, i), &v) in tap.indexed_iter() {
                out[(o * self.in_channels + i) * k2 + off] = v;
            }
        }
        out
    }

    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let (cin, h, w) = x.dim();
        debug_assert_eq!(cin, self.in_channels);
        let p = self.kernel / 2;
        let mut padded = Array3::zeros((cin, h + 2 * p, w + 2 * p));
        padded.slice_mut(s![.., p..p + h, p..p + w]).assign(x);
        let mut out = Array2::zeros((self.out_channels, h * w));
        for (mut row, &b) in out.outer_iter_mut().zip(self.bias.iter()) {
            row.fill(b);
        }
        let mut shifted = Array3::zeros((cin, h, w));
        for dy in 0..self.kernel {
            for dx in 0..self.kernel {
                shifted.assign(&padded.slice(s![.., dy..dy + h, dx..dx + w]));
                let cols = shifted.view().into_shape_with_order((cin, h * w)).expect("contiguous");
                general_mat_mul(1.0, &self.taps[dy * self.kernel + dx], &cols, 1.0, &mut out);
            }
        }
        out.into_shape_with_order((self.out_channels, h, w))
            .expect("contiguous")
    }

    fn backward_input(&self, grad_out: &FeatureMap) -> FeatureMap {
        let (cout, h, w) = grad_out.dim();
        debug_assert_eq!(cout, self.out_channels);
        let p = self.kernel / 2;
        let g = grad_out
            .view()
            .into_shape_with_order((cout, h * w))
            .expect("contiguous");
        let mut padded = Array3::<f64>::zeros((self.in_channels, h + 2 * p, w + 2 * p));
        let mut tmp = Array2::zeros((self.in_channels, h * w));
        for dy in 0..self.kernel {
            for dx in 0..self.kernel {
                general_mat_mul(1.0, &self.taps[dy * self.kernel + dx].t(), &g, 0.0, &mut tmp);
                let tmp3 = tmp
                    .view()
                    .into_shape_with_order((self.in_channels, h, w))
                    .expect("contiguous");
                let mut window = padded.slice_mut(s![.., dy..dy + h, dx..dx + w]);
                window += &tmp3;
            }
        }
        padded.slice(s![.., p..p + h, p..p + w]).to_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Stage {
    ConvRelu(ConvLayer),
    AvgPool,
}

fn avg_pool_forward(x: &FeatureMap) -> FeatureMap {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[[ch, y, xx]] = 0.25
                    * (x[[ch, 2 * y, 2 * xx]]
                        + x[[ch, 2 * y, 2 * xx + 1]]
                        + x[[ch, 2 * y + 1, 2 * xx]]
                        + x[[ch, 2 * y + 1, 2 * xx + 1]]);
            }
        }
    }
    out
}

fn avg_pool_backward(grad_out: &FeatureMap, in_h: usize, in_w: usize) -> FeatureMap {
    let (c, oh, ow) = grad_out.dim();
    let mut grad = Array3::zeros((c, in_h, in_w));
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * grad_out[[ch, y, x]];
                grad[[ch, 2 * y, 2 * x]] += g;
                grad[[ch, 2 * y, 2 * x + 1]] += g;
                grad[[ch, 2 * y + 1, 2 * x]] += g;
                grad[[ch, 2 * y + 1, 2 * x + 1]] += g;
            }
        }
    }
    grad
}

/// Named feature maps produced by one forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTaps {
    maps: BTreeMap<String, FeatureMap>,
}

impl FeatureTaps {
    pub fn new(maps: BTreeMap<String, FeatureMap>) -> Self {
        Self { maps }
    }

    pub fn get(&self, layer: &str) -> Option<&FeatureMap> {
        self.maps.get(layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = &str> {
        self.maps.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &FeatureMap)> {
        self.maps.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Number of spatial elements m_l = h_l · w_l of a layer.
    pub fn element_count(&self, layer: &str) -> Option<usize> {
        self.maps.get(layer).map(|f| f.dim().1 * f.dim().2)
    }

    /// Restricts to a subset of layers; unknown names are an error.
    pub fn subset(&self, layers: &[String]) -> Result<FeatureTaps> {
        let mut maps = BTreeMap::new();
        for l in layers {
            let f = self.maps.get(l).ok_or_else(|| CamsError::UnknownLayer(l.clone()))?;
            maps.insert(l.clone(), f.clone());
        }
        Ok(FeatureTaps { maps })
    }
}

/// Record of a forward pass, kept for computing input gradients.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    taps: FeatureTaps,
    /// Output of every executed stage.
    activations: Vec<FeatureMap>,
    input_dims: (usize, usize),
}

impl ForwardPass {
    pub fn taps(&self) -> &FeatureTaps {
        &self.taps
    }

    pub fn into_taps(self) -> FeatureTaps {
        self.taps
    }
}

/// Immutable, frozen feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    stages: Vec<Stage>,
    normalization: Normalization,
    style_layers: Vec<String>,
    content_layers: Vec<String>,
    min_input: usize,
}

impl FeatureExtractor {
    fn from_parts(
        arch: &Architecture,
        mut convs: HashMap<String, ConvLayer>,
        normalization: Normalization,
        style_layers: Vec<String>,
        content_layers: Vec<String>,
    ) -> Result<Self> {
        if style_layers.is_empty() || content_layers.is_empty() {
            return Err(CamsError::WeightsMismatch(
                "style and content layer lists must be nonempty".into(),
            ));
        }
        let names = arch.conv_names();
        for l in style_layers.iter().chain(&content_layers) {
            if !names.contains(&l.as_str()) {
                return Err(CamsError::WeightsMismatch(format!(
                    "layer '{l}' is not a convolution of the backbone"
                )));
            }
        }
        let stages = arch
            .stages
            .iter()
            .map(|s| match s {
                StageSpec::ConvRelu { name, .. } => Stage::ConvRelu(convs.remove(name).expect("conv present")),
                StageSpec::AvgPool => Stage::AvgPool,
            })
            .collect();
        Ok(Self {
            stages,
            normalization,
            style_layers,
            content_layers,
            min_input: arch.min_input,
        })
    }

    /// Builds a backbone with He-normal weights drawn from a seeded ChaCha8
    /// stream and zero biases.
    pub fn random(arch: Architecture, seed: u64, style_layers: &[&str], content_layers: &[&str]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = HashMap::new();
        for s in &arch.stages {
            if let StageSpec::ConvRelu {
                name,
                in_channels,
                out_channels,
                kernel,
                ..
            } = s
            {
                let fan_in = (in_channels * kernel * kernel) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                let n = out_channels * in_channels * kernel * kernel;
                let w: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                let layer =
                    ConvLayer::from_oihw(name, &w, vec![0.0; *out_channels], *out_channels, *in_channels, *kernel);
                convs.insert(name.clone(), layer);
            }
        }
        Self::from_parts(
            &arch,
            convs,
            Normalization::IMAGENET,
            style_layers.iter().map(|s| s.to_string()).collect(),
            content_layers.iter().map(|s| s.to_string()).collect(),
        )
    }

    /// Two-convolution test double: style taps `conv1`, `conv2`; content tap `conv2`.
    pub fn tiny(seed: u64) -> Self {
        Self::random(Architecture::tiny(), seed, &["conv1", "conv2"], &["conv2"]).expect("tiny layout is valid")
    }

    pub fn style_layers(&self) -> &[String] {
        &self.style_layers
    }

    pub fn content_layers(&self) -> &[String] {
        &self.content_layers
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn min_input(&self) -> usize {
        self.min_input
    }

    /// Names of every tap the backbone exposes.
    pub fn tap_names(&self) -> Vec<&str> {
        self.convs().map(|c| c.name.as_str()).collect()
    }

    /// Same extractor with different tap selections.
    pub fn with_layers(&self, style_layers: Vec<String>, content_layers: Vec<String>) -> Result<Self> {
        let names = self.tap_names();
        if style_layers.is_empty() || content_layers.is_empty() {
            return Err(CamsError::WeightsMismatch(
                "style and content layer lists must be nonempty".into(),
            ));
        }
        for l in style_layers.iter().chain(&content_layers) {
            if !names.contains(&l.as_str()) {
                return Err(CamsError::WeightsMismatch(format!(
                    "layer '{l}' is not a convolution of the backbone"
                )));
            }
        }
        Ok(Self {
            style_layers,
            content_layers,
            ..self.clone()
        })
    }

    fn convs(&self) -> impl Iterator<Item = &ConvLayer> {
        self.stages.iter().filter_map(|s| match s {
            Stage::ConvRelu(c) => Some(c),
            Stage::AvgPool => None,
        })
    }

    /// Order-sensitive FNV-1a hash over every parameter's bit pattern.
    pub fn parameter_checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut feed = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                hash ^= u64::from(b);
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        for c in self.convs() {
            c.taps.iter().flat_map(|t| t.iter()).for_each(|&v| feed(v));
            c.bias.iter().for_each(|&v| feed(v));
        }
        hash
    }

    fn normalize(&self, px: &Array3<f64>) -> FeatureMap {
        let (h, w, _) = px.dim();
        let n = self.normalization;
        Array3::from_shape_fn((3, h, w), |(c, y, x)| (px[[y, x, c]] - n.mean[c]) / n.std[c])
    }

    fn check_request(&self, px: &Array3<f64>, layers: &[String]) -> Result<usize> {
        let (height, width, channels) = px.dim();
        if channels != 3 {
            return Err(CamsError::DimMismatch(format!("expected 3 channels, got {channels}")));
        }
        if height < self.min_input || width < self.min_input {
            return Err(CamsError::TooSmallInput {
                height,
                width,
                min: self.min_input,
            });
        }
        let mut last = 0;
        for l in layers {
            let idx = self
                .stages
                .iter()
                .position(|s| matches!(s, Stage::ConvRelu(c) if &c.name == l))
                .ok_or_else(|| CamsError::UnknownLayer(l.clone()))?;
            last = last.max(idx);
        }
        Ok(last)
    }

    /// Computes the requested taps.
    pub fn extract_features(&self, img: &Image, layers: &[String]) -> Result<FeatureTaps> {
        Ok(self.forward(img, layers)?.into_taps())
    }

    /// Forward pass that keeps the intermediate activations needed by
    /// [`input_gradient`](Self::input_gradient).
    pub fn forward(&self, img: &Image, layers: &[String]) -> Result<ForwardPass> {
        self.forward_pixels(img.pixels(), layers)
    }

    /// [`forward`](Self::forward) on a raw (H, W, 3) array whose values need
    /// not lie in [0,1]; the optimizer's image variable is unclamped.
    pub fn forward_pixels(&self, pixels: &Array3<f64>, layers: &[String]) -> Result<ForwardPass> {
        let last = self.check_request(pixels, layers)?;
        let (h, w, _) = pixels.dim();
        let mut x = self.normalize(pixels);
        let mut activations = Vec::with_capacity(last + 1);
        let mut maps = BTreeMap::new();
        for stage in &self.stages[..=last] {
            x = match stage {
                Stage::ConvRelu(conv) => {
                    let mut y = conv.forward(&x);
                    y.mapv_inplace(|v| v.max(0.0));
                    if layers.contains(&conv.name) {
                        maps.insert(conv.name.clone(), y.clone());
                    }
                    y
                }
                Stage::AvgPool => avg_pool_forward(&x),
            };
            activations.push(x.clone());
        }
        Ok(ForwardPass {
            taps: FeatureTaps { maps },
            activations,
            input_dims: (h, w),
        })
    }

    /// Gradient of a scalar with respect to the input image (H, W, 3), given
    /// its gradients with respect to the tapped feature maps.
    pub fn input_gradient(&self, pass: &ForwardPass, tap_grads: &BTreeMap<String, FeatureMap>) -> Array3<f64> {
        let (h, w) = pass.input_dims;
        let n = pass.activations.len();
        let mut grad: Option<FeatureMap> = None;
        for idx in (0..n).rev() {
            let stage = &self.stages[idx];
            if let Stage::ConvRelu(conv) = stage {
                if let Some(g) = tap_grads.get(&conv.name) {
                    grad = Some(match grad {
                        Some(acc) => acc + g,
                        None => g.clone(),
                    });
                }
            }
            let Some(g) = grad.take() else { continue };
            let (in_h, in_w) = if idx == 0 {
                (h, w)
            } else {
                let d = pass.activations[idx - 1].dim();
                (d.1, d.2)
            };
            grad = Some(match stage {
                Stage::ConvRelu(conv) => {
                    let mut g = g;
                    g.zip_mut_with(&pass.activations[idx], |gv, &a| {
                        if a <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    conv.backward_input(&g)
                }
                Stage::AvgPool => avg_pool_backward(&g, in_h, in_w),
            });
        }
        let mut out = Array3::zeros((h, w, 3));
        if let Some(g) = grad {
            for c in 0..3 {
                let inv = 1.0 / self.normalization.std[c];
                out.index_axis_mut(Axis(2), c)
                    .assign(&(&g.index_axis(Axis(0), c) * inv));
            }
        }
        out
    }

    /// Writes the parameters as a safetensors file (`<name>.weight`,
    /// `<name>.bias`, F64).
    pub fn save_safetensors(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for c in self.convs() {
            let w: Vec<u8> = c.to_oihw().iter().flat_map(|v| v.to_le_bytes()).collect();
            buffers.push((
                format!("{}.weight", c.name),
                vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
                w,
            ));
            let b: Vec<u8> = c.bias.iter().flat_map(|v| v.to_le_bytes()).collect();
            buffers.push((format!("{}.bias", c.name), vec![c.out_channels], b));
        }
        let views: Vec<(String, TensorView<'_>)> = buffers
            .iter()
            .map(|(name, shape, data)| {
                let view = TensorView::new(Dtype::F64, shape.clone(), data).expect("shape matches buffer");
                (name.clone(), view)
            })
            .collect();
        safetensors::serialize_to_file(views, None, path).map_err(|e| CamsError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })
    }
}

fn tensor_to_f64(view: &TensorView<'_>, key: &str) -> Result<Vec<f64>> {
    let data = view.data();
    match view.dtype() {
        Dtype::F32 => Ok(data
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect()),
        Dtype::F64 => Ok(data
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect()),
        other => Err(CamsError::WeightsMismatch(format!(
            "tensor '{key}' has unsupported dtype {other:?}"
        ))),
    }
}

fn find_tensor<'a>(st: &'a SafeTensors<'a>, keys: &[String]) -> Result<(String, TensorView<'a>)> {
    for k in keys {
        if let Ok(v) = st.tensor(k) {
            return Ok((k.clone(), v));
        }
    }
    Err(CamsError::WeightsMismatch(format!(
        "missing tensor (tried {})",
        keys.join(", ")
    )))
}

/// Loads VGG-19 weights from a safetensors file. Both torchvision key names
/// (`features.<idx>.weight`) and tap names (`conv3_1.weight`) are accepted.
pub fn load_backbone(cfg: &BackboneConfig) -> Result<FeatureExtractor> {
    load_with_architecture(cfg, &Architecture::vgg19())
}

/// Loads weights for an arbitrary [`Architecture`].
pub fn load_with_architecture(cfg: &BackboneConfig, arch: &Architecture) -> Result<FeatureExtractor> {
    let path = &cfg.weights_path;
    if !path.exists() {
        return Err(CamsError::FileNotFound(path.clone()));
    }
    let bytes = std::fs::read(path).map_err(|source| CamsError::Io {
        path: path.clone(),
        source,
    })?;
    let st = SafeTensors::deserialize(&bytes)
        .map_err(|e| CamsError::WeightsMismatch(format!("{}: not a safetensors file ({e})", path.display())))?;
    let mut convs = HashMap::new();
    for s in &arch.stages {
        let StageSpec::ConvRelu {
            name,
            in_channels,
            out_channels,
            kernel,
            torch_index,
        } = s
        else {
            continue;
        };
        let candidates = |suffix: &str| {
            let mut keys = vec![format!("{name}.{suffix}")];
            if let Some(i) = torch_index {
                keys.push(format!("features.{i}.{suffix}"));
            }
            keys
        };
        let (wkey, wview) = find_tensor(&st, &candidates("weight"))?;
        let expected = vec![*out_channels, *in_channels, *kernel, *kernel];
        if wview.shape() != expected.as_slice() {
            return Err(CamsError::WeightsMismatch(format!(
                "'{wkey}' has shape {:?}, expected {expected:?}",
                wview.shape()
            )));
        }
        let (bkey, bview) = find_tensor(&st, &candidates("bias"))?;
        if bview.shape() != [*out_channels] {
            return Err(CamsError::WeightsMismatch(format!(
                "'{bkey}' has shape {:?}, expected [{out_channels}]",
                bview.shape()
            )));
        }
        let w = tensor_to_f64(&wview, &wkey)?;
        let b = tensor_to_f64(&bview, &bkey)?;
        convs.insert(
            name.clone(),
            ConvLayer::from_oihw(name, &w, b, *out_channels, *in_channels, *kernel),
        );
    }
    FeatureExtractor::from_parts(
        arch,
        convs,
        cfg.input_normalization,
        cfg.style_layers.clone(),
        cfg.content_layers.clone(),
    )
}
