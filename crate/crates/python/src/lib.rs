//! Python bindings. Images cross the boundary as nested `[row][col][rgb]`
//! float lists in [0, 1], or as encoded PNG bytes.

use std::ops::ControlFlow;
use std::path::PathBuf;

use cams_core::features::BackboneSpec;
use cams_core::palette::{self as pal, PaletteSource, Rgb};
use cams_core::transfer::{self, AssociationMap, LossRecord, TransferState};
use cams_core::{CamsError, FeatureExtractor};
use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyKeyboardInterrupt, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn to_py(e: CamsError) -> PyErr {
    match e {
        CamsError::FileNotFound(_) => PyFileNotFoundError::new_err(e.to_string()),
        CamsError::Io { .. } => PyIOError::new_err(e.to_string()),
        CamsError::Cancelled => PyKeyboardInterrupt::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(module = "cams", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Image(cams_core::Image);

#[pymethods]
impl Image {
    /// Builds an image from `[row][col][rgb]` floats in [0, 1].
    #[new]
    fn new(rows: Vec<Vec<Rgb>>) -> PyResult<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(PyValueError::new_err("rows must all have the same length"));
        }
        cams_core::Image::from_fn(h, w, |y, x| rows[y][x])
            .map(Image)
            .map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (path, max_side=None))]
    fn load(path: PathBuf, max_side: Option<usize>) -> PyResult<Self> {
        cams_core::load_image(path, max_side).map(Image).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (data, max_side=None))]
    fn decode(data: &[u8], max_side: Option<usize>) -> PyResult<Self> {
        cams_core::decode_image(data, max_side).map(Image).map_err(to_py)
    }

    #[staticmethod]
    fn filled(height: usize, width: usize, rgb: Rgb) -> PyResult<Self> {
        cams_core::Image::filled(height, width, rgb).map(Image).map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    fn pixel(&self, y: usize, x: usize) -> PyResult<Rgb> {
        if y >= self.0.height() || x >= self.0.width() {
            return Err(PyValueError::new_err(format!("pixel ({y}, {x}) out of bounds")));
        }
        Ok(self.0.pixel(y, x))
    }

    fn to_list(&self) -> Vec<Vec<Rgb>> {
        (0..self.0.height())
            .map(|y| (0..self.0.width()).map(|x| self.0.pixel(y, x)).collect())
            .collect()
    }

    fn resized(&self, height: usize, width: usize) -> PyResult<Self> {
        self.0.resized(height, width).map(Image).map_err(to_py)
    }

    fn png_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &cams_core::encode_png(&self.0))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        cams_core::save_image(&self.0, path).map_err(to_py)
    }

    fn max_abs_diff(&self, other: &Image) -> f64 {
        self.0.max_abs_diff(&other.0)
    }

    fn __repr__(&self) -> String {
        format!("Image(height={}, width={})", self.0.height(), self.0.width())
    }
}

#[pyclass(module = "cams", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Palette(cams_core::Palette);

fn parse_source(s: &str) -> PyResult<PaletteSource> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| PyValueError::new_err(format!("unknown palette source {s:?}")))
}

fn source_name(s: PaletteSource) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

#[pymethods]
impl Palette {
    #[new]
    #[pyo3(signature = (colors, source="content"))]
    fn new(colors: Vec<Rgb>, source: &str) -> PyResult<Self> {
        cams_core::Palette::new(colors, parse_source(source)?)
            .map(Palette)
            .map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        cams_core::Palette::from_json(text).map(Palette).map_err(to_py)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn colors(&self) -> Vec<Rgb> {
        self.0.colors().to_vec()
    }

    #[getter]
    fn tags(&self) -> Vec<String> {
        self.0.tags().iter().map(|t| source_name(*t)).collect()
    }

    fn hex(&self) -> Vec<String> {
        self.0.colors().iter().map(pal::hex).collect()
    }

    fn select(&self, indices: Vec<usize>) -> PyResult<Self> {
        self.0.select(&indices).map(Palette).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Palette({})", self.hex().join(", "))
    }
}

#[pyclass(module = "cams", frozen, get_all)]
struct ExtractedPalette {
    colors: Vec<Rgb>,
    populations: Vec<f64>,
    degenerate: bool,
}

#[pymethods]
impl ExtractedPalette {
    #[pyo3(signature = (source="content"))]
    fn palette(&self, source: &str) -> PyResult<Palette> {
        Palette::new(self.colors.clone(), source)
    }

    fn hex(&self) -> Vec<String> {
        self.colors.iter().map(pal::hex).collect()
    }
}

#[pyfunction]
fn extract_palette(img: &Image, k: usize) -> PyResult<ExtractedPalette> {
    let p = pal::extract_palette(&img.0, k).map_err(to_py)?;
    Ok(ExtractedPalette {
        colors: p.colors,
        populations: p.populations,
        degenerate: p.degenerate,
    })
}

#[pyfunction]
#[pyo3(signature = (style, content, tau_merge=0.08))]
fn merge_palettes(style: &Palette, content: &Palette, tau_merge: f64) -> PyResult<Palette> {
    pal::merge_palettes(&style.0, &content.0, tau_merge)
        .map(Palette)
        .map_err(to_py)
}

/// Soft membership of every pixel in `color`, without smoothing.
#[pyfunction]
#[pyo3(signature = (img, color, sigma=0.275))]
fn color_mask(img: &Image, color: Rgb, sigma: f64) -> PyResult<Vec<Vec<f64>>> {
    let m = cams_core::compute_color_mask(&img.0, color, sigma).map_err(to_py)?;
    Ok(m.values().rows().into_iter().map(|r| r.to_vec()).collect())
}

/// One mask per palette color, optionally smoothed.
#[pyfunction]
#[pyo3(signature = (img, palette, sigma=0.275, smooth=true))]
fn color_masks(img: &Image, palette: &Palette, sigma: f64, smooth: bool) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let set = cams_core::build_mask_set(&img.0, &palette.0, sigma, smooth).map_err(to_py)?;
    Ok(set
        .masks()
        .iter()
        .map(|m| m.values().rows().into_iter().map(|r| r.to_vec()).collect())
        .collect())
}

#[pyclass(module = "cams", frozen)]
struct Backbone {
    spec: BackboneSpec,
    extractor: FeatureExtractor,
}

impl Backbone {
    fn build(spec: BackboneSpec) -> PyResult<Self> {
        let extractor = spec.build().map_err(to_py)?;
        Ok(Backbone { spec, extractor })
    }
}

#[pymethods]
impl Backbone {
    /// Pretrained VGG-19 from a safetensors checkpoint.
    #[staticmethod]
    fn vgg19(weights: PathBuf) -> PyResult<Self> {
        Self::build(BackboneSpec::Vgg19 { weights })
    }

    /// VGG-19 layout with seeded random weights and reduced channel widths.
    #[staticmethod]
    #[pyo3(signature = (seed=0, width_divisor=2))]
    fn random(seed: u64, width_divisor: usize) -> PyResult<Self> {
        if width_divisor == 0 {
            return Err(PyValueError::new_err("width_divisor must be >= 1"));
        }
        Self::build(BackboneSpec::RandomVgg { seed, width_divisor })
    }

    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn tiny(seed: u64) -> PyResult<Self> {
        Self::build(BackboneSpec::Tiny { seed })
    }

    #[getter]
    fn spec(&self) -> String {
        serde_json::to_string(&self.spec).expect("spec serializes")
    }

    #[getter]
    fn style_layers(&self) -> Vec<String> {
        self.extractor.style_layers().to_vec()
    }

    fn checksum(&self) -> String {
        format!("{:016x}", self.extractor.parameter_checksum())
    }

    fn __repr__(&self) -> String {
        format!("Backbone({})", self.spec())
    }
}

#[pyclass(module = "cams", from_py_object)]
#[derive(Clone)]
struct TransferConfig(transfer::TransferConfig);

#[pymethods]
impl TransferConfig {
    /// Defaults, overridden by any keyword that names a config field.
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut value = serde_json::to_value(transfer::TransferConfig::default()).expect("config serializes");
        if let Some(kw) = kwargs {
            let json = kw.py().import("json")?.call_method1("dumps", (kw,))?;
            let overrides: serde_json::Map<String, serde_json::Value> =
                serde_json::from_str(&json.extract::<String>()?).map_err(|e| PyValueError::new_err(e.to_string()))?;
            let obj = value.as_object_mut().expect("config is an object");
            for (k, v) in overrides {
                if !obj.contains_key(&k) {
                    return Err(PyValueError::new_err(format!("unknown config field {k:?}")));
                }
                obj.insert(k, v);
            }
        }
        let cfg: transfer::TransferConfig =
            serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
        cfg.validate().map_err(to_py)?;
        Ok(TransferConfig(cfg))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let cfg: transfer::TransferConfig =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        cfg.validate().map_err(to_py)?;
        Ok(TransferConfig(cfg))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("config serializes")
    }

    /// Sets manual-mode associations from `[(content_idx, style_idx), ...]`.
    #[pyo3(signature = (pairs, discard_content=vec![], discard_style=vec![]))]
    fn set_associations(&mut self, pairs: Vec<(usize, usize)>, discard_content: Vec<usize>, discard_style: Vec<usize>) {
        self.0.associations = Some(AssociationMap {
            pairs,
            discard_content,
            discard_style,
        });
        self.0.mode = transfer::TransferMode::Manual;
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.0.iterations
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.0.sigma
    }

    #[getter]
    fn mode(&self) -> String {
        serde_json::to_value(self.0.mode)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    fn __repr__(&self) -> String {
        format!("TransferConfig({})", self.to_json())
    }
}

fn loss_dict<'py>(py: Python<'py>, r: &LossRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("iter", r.iter)?;
    d.set_item("content", r.content)?;
    if let Some(c) = r.cams {
        d.set_item("cams", c)?;
    }
    if let Some(s) = r.style {
        d.set_item("style", s)?;
    }
    d.set_item("total", r.total)?;
    Ok(d)
}

#[pyclass(module = "cams", frozen)]
struct TransferResult(transfer::TransferResult);

#[pymethods]
impl TransferResult {
    #[getter]
    fn image(&self) -> Image {
        Image(self.0.image.clone())
    }

    #[getter]
    fn loss_history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.0.loss_history.iter().map(|r| loss_dict(py, r)).collect()
    }

    #[getter]
    fn iterations_run(&self) -> usize {
        self.0.iterations_run
    }

    #[getter]
    fn termination(&self) -> String {
        serde_json::to_value(self.0.termination)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default()
    }

    #[getter]
    fn wall_time_s(&self) -> f64 {
        self.0.wall_time_s
    }

    fn initial_total(&self) -> f64 {
        self.0.initial_total()
    }

    fn final_total(&self) -> f64 {
        self.0.final_total()
    }

    fn palettes_json(&self) -> String {
        self.0.palettes_json().to_string()
    }

    /// Writes the image and its sidecars; returns the written paths.
    #[pyo3(signature = (out, mask_dir=None))]
    fn export(&self, out: PathBuf, mask_dir: Option<PathBuf>) -> PyResult<Vec<PathBuf>> {
        self.0.export(out, mask_dir.as_deref()).map_err(to_py)
    }
}

/// Runs color-aware transfer, or classic Gram transfer with `baseline=True`.
///
/// `progress`, when given, is called as `progress(iter, losses_dict, snapshot)`
/// where `snapshot` is an `Image` on snapshot iterations and `None`
/// otherwise. Returning `True` cancels the run.
#[pyfunction]
#[pyo3(signature = (content, style, backbone, config=None, baseline=false, progress=None))]
fn run_transfer(
    py: Python<'_>,
    content: &Image,
    style: &Image,
    backbone: &Backbone,
    config: Option<TransferConfig>,
    baseline: bool,
    progress: Option<Py<PyAny>>,
) -> PyResult<TransferResult> {
    let cfg = config.map(|c| c.0).unwrap_or_default();
    let mut callback_error: Option<PyErr> = None;
    let result = py.detach(|| {
        let mut cb = |st: &TransferState<'_>| {
            let Some(f) = &progress else {
                return ControlFlow::Continue(());
            };
            Python::attach(|py| {
                let call = || -> PyResult<bool> {
                    let snap = st.is_snapshot.then(|| Image(st.generated.clone()));
                    let ret = f.call1(py, (st.iter, loss_dict(py, &st.losses)?, snap))?;
                    ret.bind(py).is_truthy()
                };
                match call() {
                    Ok(false) => ControlFlow::Continue(()),
                    Ok(true) => ControlFlow::Break(()),
                    Err(e) => {
                        callback_error = Some(e);
                        ControlFlow::Break(())
                    }
                }
            })
        };
        if baseline {
            transfer::run_classic_nst(&content.0, &style.0, &backbone.extractor, &cfg, Some(&mut cb))
        } else {
            transfer::run_transfer(&content.0, &style.0, &backbone.extractor, &cfg, Some(&mut cb))
        }
    });
    if let Some(e) = callback_error {
        return Err(e);
    }
    result.map(TransferResult).map_err(to_py)
}

/// Content, classic style and color-aware style losses of `output`.
#[pyfunction]
#[pyo3(signature = (output, content, style, backbone, config=None))]
fn evaluate<'py>(
    py: Python<'py>,
    output: &Image,
    content: &Image,
    style: &Image,
    backbone: &Backbone,
    config: Option<TransferConfig>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.map(|c| c.0).unwrap_or_default();
    let report = py
        .detach(|| cams_core::evaluate_triple(&output.0, &content.0, &style.0, &backbone.extractor, &cfg))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("color_aware", report.color_aware)?;
    d.set_item("style", report.style)?;
    d.set_item("content", report.content)?;
    d.set_item("wall_time_s", report.wall_time_s)?;
    let layers = PyDict::new(py);
    for (name, t) in &report.per_layer_breakdown {
        layers.set_item(name, (t.style, t.cams))?;
    }
    d.set_item("per_layer", layers)?;
    Ok(d)
}

#[pymodule]
fn cams(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Image>()?;
    m.add_class::<Palette>()?;
    m.add_class::<ExtractedPalette>()?;
    m.add_class::<Backbone>()?;
    m.add_class::<TransferConfig>()?;
    m.add_class::<TransferResult>()?;
    m.add_function(wrap_pyfunction!(extract_palette, m)?)?;
    m.add_function(wrap_pyfunction!(merge_palettes, m)?)?;
    m.add_function(wrap_pyfunction!(color_mask, m)?)?;
    m.add_function(wrap_pyfunction!(color_masks, m)?)?;
    m.add_function(wrap_pyfunction!(run_transfer, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
