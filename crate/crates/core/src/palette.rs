//! Dominant-color palettes.
//!
//! Extraction runs weighted k-means over a 16×16×16 RGB histogram. Each
//! occupied bin is represented by the mean of the pixels that fell into it
//! (weighted by its pixel count), so solid regions are recovered exactly
//! rather than snapped to bin centers. Seeding is farthest-point from the most
//! populated bin, which makes the whole procedure deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{CamsError, Result};
use crate::imaging::Image;

pub type Rgb = [f64; 3];

/// Histogram resolution per channel.
const BINS_PER_CHANNEL: usize = 16;
const MAX_KMEANS_ITERS: usize = 50;
const KMEANS_TOLERANCE: f64 = 1e-5;

pub const DEFAULT_PALETTE_SIZE: usize = 5;
pub const DEFAULT_MERGE_THRESHOLD: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaletteSource {
    Content,
    Style,
}

/// Ordered list of RGB colors with a provenance tag per color.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PaletteRepr", into = "PaletteRepr")]
pub struct Palette {
    colors: Vec<Rgb>,
    tags: Vec<PaletteSource>,
}

#[derive(Serialize, Deserialize)]
struct PaletteRepr {
    colors: Vec<Rgb>,
    tags: Vec<PaletteSource>,
}

impl TryFrom<PaletteRepr> for Palette {
    type Error = CamsError;

    fn try_from(repr: PaletteRepr) -> Result<Self> {
        Palette::with_tags(repr.colors, repr.tags)
    }
}

impl From<Palette> for PaletteRepr {
    fn from(p: Palette) -> Self {
        PaletteRepr {
            colors: p.colors,
            tags: p.tags,
        }
    }
}

impl Palette {
    pub fn new(colors: Vec<Rgb>, source: PaletteSource) -> Result<Self> {
        let tags = vec![source; colors.len()];
        Self::with_tags(colors, tags)
    }

    pub fn with_tags(colors: Vec<Rgb>, tags: Vec<PaletteSource>) -> Result<Self> {
        if colors.is_empty() {
            return Err(CamsError::InvalidPalette(
                "palette must contain at least one color".into(),
            ));
        }
        if colors.len() != tags.len() {
            return Err(CamsError::InvalidPalette(format!(
                "{} colors but {} tags",
                colors.len(),
                tags.len()
            )));
        }
        if let Some(c) = colors.iter().find(|c| c.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(CamsError::InvalidPalette(format!("color {c:?} outside [0,1]")));
        }
        Ok(Self { colors, tags })
    }

    pub fn colors(&self) -> &[Rgb] {
        &self.colors
    }

    pub fn tags(&self) -> &[PaletteSource] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    /// Palette restricted to the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Palette> {
        let mut colors = Vec::with_capacity(indices.len());
        let mut tags = Vec::with_capacity(indices.len());
        for &i in indices {
            let c = self.colors.get(i).ok_or_else(|| {
                CamsError::InvalidPalette(format!("index {i} out of range for {} colors", self.len()))
            })?;
            colors.push(*c);
            tags.push(self.tags[i]);
        }
        Palette::with_tags(colors, tags)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("palette serialization is infallible")
    }

    pub fn from_json(json: &str) -> Result<Palette> {
        Ok(serde_json::from_str(json)?)
    }
}

/// Result of palette extraction, ordered by descending population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedPalette {
    pub colors: Vec<Rgb>,
    /// Fraction of the image's pixels assigned to each color.
    pub populations: Vec<f64>,
    /// Set when the image had fewer distinct quantized colors than requested.
    pub degenerate: bool,
}

impl ExtractedPalette {
    pub fn into_palette(self, source: PaletteSource) -> Palette {
        Palette::new(self.colors, source).expect("extracted palettes are nonempty and in range")
    }

    pub fn to_palette(&self, source: PaletteSource) -> Palette {
        self.clone().into_palette(source)
    }
}

pub fn euclidean(a: &Rgb, b: &Rgb) -> f64 {
    squared_distance(a, b).sqrt()
}

fn squared_distance(a: &Rgb, b: &Rgb) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// `#rrggbb` rendering of a unit-range color.
pub fn hex(c: &Rgb) -> String {
    let q = |v: f64| crate::imaging::quantize_u8(v);
    format!("#{:02x}{:02x}{:02x}", q(c[0]), q(c[1]), q(c[2]))
}

#[derive(Debug, Clone, Copy)]
struct Bin {
    color: Rgb,
    weight: f64,
}

fn histogram(img: &Image) -> Vec<Bin> {
    let n = BINS_PER_CHANNEL;
    let mut counts = vec![0usize; n * n * n];
    let mut sums = vec![[0.0f64; 3]; n * n * n];
    let quantize = |v: f64| ((v * n as f64) as usize).min(n - 1);
    for p in img.iter_pixels() {
        let idx = (quantize(p[0]) * n + quantize(p[1])) * n + quantize(p[2]);
        counts[idx] += 1;
        for c in 0..3 {
            sums[idx][c] += p[c];
        }
    }
    counts
        .iter()
        .zip(sums.iter())
        .filter(|(&count, _)| count > 0)
        .map(|(&count, sum)| {
            let w = count as f64;
            Bin {
                color: [sum[0] / w, sum[1] / w, sum[2] / w],
                weight: w,
            }
        })
        .collect()
}

fn nearest(color: &Rgb, centroids: &[Rgb]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(color, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn farthest_point_seeds(bins: &[Bin], k: usize) -> Vec<Rgb> {
    let first = bins
        .iter()
        .enumerate()
        .fold(0, |best, (i, b)| if b.weight > bins[best].weight { i } else { best });
    let mut seeds = vec![bins[first].color];
    while seeds.len() < k {
        let (idx, _) = bins
            .iter()
            .enumerate()
            .map(|(i, b)| (i, nearest(&b.color, &seeds).1))
            .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        seeds.push(bins[idx].color);
    }
    seeds
}

/// Extracts `k` dominant colors from `img`.
///
/// When the image has fewer than `k` occupied histogram bins, every bin's mean
/// color is returned as its own palette entry and `degenerate` is set.
pub fn extract_palette(img: &Image, k: usize) -> Result<ExtractedPalette> {
    if k == 0 {
        return Err(CamsError::InvalidPalette("k must be >= 1".into()));
    }
    let bins = histogram(img);
    let total: f64 = bins.iter().map(|b| b.weight).sum();

    if bins.len() < k {
        let mut entries: Vec<(Rgb, f64)> = bins.iter().map(|b| (b.color, b.weight / total)).collect();
        entries.sort_by(|a, b| b.1.total_cmp(&a.1));
        let (colors, populations) = entries.into_iter().unzip();
        return Ok(ExtractedPalette {
            colors,
            populations,
            degenerate: true,
        });
    }

    let mut centroids = farthest_point_seeds(&bins, k);
    let mut assignment = vec![0usize; bins.len()];
    for _ in 0..MAX_KMEANS_ITERS {
        for (slot, bin) in assignment.iter_mut().zip(&bins) {
            *slot = nearest(&bin.color, &centroids).0;
        }
        let mut sums = vec![[0.0f64; 3]; k];
        let mut weights = vec![0.0f64; k];
        for (bin, &a) in bins.iter().zip(&assignment) {
            weights[a] += bin.weight;
            for c in 0..3 {
                sums[a][c] += bin.color[c] * bin.weight;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            let updated = if weights[j] > 0.0 {
                [
                    sums[j][0] / weights[j],
                    sums[j][1] / weights[j],
                    sums[j][2] / weights[j],
                ]
            } else {
                // Empty cluster: move it onto the bin worst served by the others.
                let (idx, _) = bins
                    .iter()
                    .enumerate()
                    .map(|(i, b)| (i, squared_distance(&b.color, &centroids[assignment[i]])))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                bins[idx].color
            };
            shift = shift.max(squared_distance(&updated, &centroids[j]).sqrt());
            centroids[j] = updated;
        }
        if shift < KMEANS_TOLERANCE {
            break;
        }
    }

    for (slot, bin) in assignment.iter_mut().zip(&bins) {
        *slot = nearest(&bin.color, &centroids).0;
    }
    let mut populations = vec![0.0f64; k];
    for (bin, &a) in bins.iter().zip(&assignment) {
        populations[a] += bin.weight / total;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| populations[b].total_cmp(&populations[a]));
    Ok(ExtractedPalette {
        colors: order.iter().map(|&i| centroids[i].map(|v| v.clamp(0.0, 1.0))).collect(),
        populations: order.iter().map(|&i| populations[i]).collect(),
        degenerate: false,
    })
}

/// Concatenates style then content colors and greedily keeps each color only
/// if it is farther than `tau_merge` from every color kept so far.
pub fn merge_palettes(style_pal: &Palette, content_pal: &Palette, tau_merge: f64) -> Result<Palette> {
    if !(tau_merge >= 0.0) || !tau_merge.is_finite() {
        return Err(CamsError::InvalidPalette(format!(
            "merge threshold {tau_merge} must be >= 0"
        )));
    }
    let mut colors: Vec<Rgb> = Vec::new();
    let mut tags = Vec::new();
    let candidates = style_pal
        .colors
        .iter()
        .zip(&style_pal.tags)
        .chain(content_pal.colors.iter().zip(&content_pal.tags));
    for (color, tag) in candidates {
        if colors.iter().all(|kept| euclidean(kept, color) > tau_merge) {
            colors.push(*color);
            tags.push(*tag);
        }
    }
    Palette::with_tags(colors, tags)
}
