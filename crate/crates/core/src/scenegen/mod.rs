//! Procedural multi-domain labeled scenes.
//!
//! Scene geometry (the label map) depends only on [`SceneSpec`]; a
//! [`DomainStyle`] decides how that geometry is painted. Domains therefore
//! differ photometrically while sharing ground truth.

mod io;
mod manifest;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use io::{read_label_png, read_rgb_png, write_label_png, write_rgb_png};
pub use manifest::{
    generate_dataset, load_manifest, DatasetCounts, DatasetManifest, ManifestRecord, SceneFamily, Split,
    MANIFEST_FILE,
};

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Amplitude of the sinusoidal texture added on top of palette colors.
const TEXTURE_AMPLITUDE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layout {
    Bands,
    Blobs,
    Mixed,
}

impl Layout {
    pub const ALL: [Layout; 3] = [Layout::Bands, Layout::Blobs, Layout::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            Layout::Bands => "bands",
            Layout::Blobs => "blobs",
            Layout::Mixed => "mixed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub layout: Layout,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes", format!("{} < 2", self.num_classes)));
        }
        if self.num_classes >= IGNORE as usize {
            return Err(Error::invalid("num_classes", "must leave 255 free for IGNORE"));
        }
        if self.height < 16 {
            return Err(Error::invalid("height", format!("{} < 16", self.height)));
        }
        if self.width < 16 {
            return Err(Error::invalid("width", format!("{} < 16", self.width)));
        }
        Ok(())
    }

    /// Additionally requires both sides to be multiples of `patch`.
    pub fn validate_for_patch(&self, patch: usize) -> Result<()> {
        self.validate()?;
        if patch == 0 || !self.height.is_multiple_of(patch) {
            return Err(Error::invalid("height", format!("{} not divisible by patch {patch}", self.height)));
        }
        if !self.width.is_multiple_of(patch) {
            return Err(Error::invalid("width", format!("{} not divisible by patch {patch}", self.width)));
        }
        Ok(())
    }
}

/// Integer label map `(H, W)` stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("LabelMap::new", format!("{} labels for {height}x{width}", data.len())));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Every label is `< k` or [`IGNORE`].
    pub fn validate(&self, k: usize) -> Result<()> {
        if let Some((i, &v)) = self
            .data
            .iter()
            .enumerate()
            .find(|(_, &v)| v != IGNORE && v as usize >= k)
        {
            return Err(Error::invalid("label", format!("value {v} at pixel {i} is not < {k} or {IGNORE}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    pub domain_id: String,
    pub palette: Vec<[f64; 3]>,
    /// Texture frequency in cycles per image; 0 disables the texture.
    pub texture_freq: f64,
    pub noise_sigma: f64,
    pub illumination_gain: f64,
}

impl DomainStyle {
    pub fn validate(&self) -> Result<()> {
        let id = &self.domain_id;
        if id.is_empty() || id.contains(['\t', '\n', '\r', '/', '\\']) || id.starts_with('.') {
            return Err(Error::invalid("domain_id", format!("{id:?} is not a usable identifier")));
        }
        if self.palette.len() < 2 {
            return Err(Error::invalid("palette", "needs at least two colors"));
        }
        for (i, c) in self.palette.iter().enumerate() {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("palette", format!("entry {i} {c:?} outside [0,1]")));
            }
            for (j, d) in self.palette.iter().enumerate().take(i) {
                let linf = c.iter().zip(d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                if linf < 0.05 {
                    return Err(Error::invalid("palette", format!("entries {j} and {i} closer than 0.05 (L∞)")));
                }
            }
        }
        if !self.texture_freq.is_finite() || self.texture_freq < 0.0 {
            return Err(Error::invalid("texture_freq", format!("{} must be finite and >= 0", self.texture_freq)));
        }
        if !(0.0..=0.3).contains(&self.noise_sigma) {
            return Err(Error::invalid("noise_sigma", format!("{} outside [0, 0.3]", self.noise_sigma)));
        }
        if !(0.3..=1.7).contains(&self.illumination_gain) {
            return Err(Error::invalid(
                "illumination_gain",
                format!("{} outside [0.3, 1.7]", self.illumination_gain),
            ));
        }
        Ok(())
    }

    /// Evenly spaced hues; the default training domain.
    pub fn source(k: usize) -> Self {
        let palette = (0..k)
            .map(|i| hsv_to_rgb([0.02 + i as f64 / k as f64, 0.75, 0.85]))
            .collect();
        DomainStyle {
            domain_id: "source".into(),
            palette,
            texture_freq: 4.0,
            noise_sigma: 0.02,
            illumination_gain: 1.0,
        }
    }

    /// A photometric variant of `self`: hue rotation, saturation and value
    /// scaling applied to every palette entry.
    pub fn shifted(&self, id: &str, hue_shift: f64, sat_scale: f64, val_scale: f64) -> Self {
        let palette = self
            .palette
            .iter()
            .map(|&c| {
                let [h, s, v] = rgb_to_hsv(c);
                hsv_to_rgb([h + hue_shift, (s * sat_scale).clamp(0.0, 1.0), (v * val_scale).clamp(0.0, 1.0)])
            })
            .collect();
        DomainStyle {
            domain_id: id.into(),
            palette,
            ..self.clone()
        }
    }

    /// Default held-out domains for a `k`-class benchmark.
    pub fn target_presets(k: usize) -> Vec<Self> {
        let src = Self::source(k);
        vec![
            DomainStyle {
                texture_freq: 7.0,
                noise_sigma: 0.04,
                illumination_gain: 0.7,
                ..src.shifted("dusk", 0.07, 1.0, 1.0)
            },
            DomainStyle {
                texture_freq: 2.0,
                noise_sigma: 0.03,
                illumination_gain: 1.25,
                ..src.shifted("haze", -0.04, 0.55, 0.95)
            },
            DomainStyle {
                texture_freq: 11.0,
                noise_sigma: 0.1,
                illumination_gain: 0.9,
                ..src.shifted("grain", -0.08, 1.2, 0.9)
            },
        ]
    }
}

/// RGB image `(3, H*W)` in `[0, 1]` with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage<T> {
    pub image: Tensor<T>,
    pub label: LabelMap,
    pub domain_id: String,
}

impl<T: Scalar> LabeledImage<T> {
    pub fn height(&self) -> usize {
        self.label.height
    }

    pub fn width(&self) -> usize {
        self.label.width
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.image.shape() != (3, self.label.len()) {
            return Err(Error::shape(
                "LabeledImage",
                format!("image {:?} vs {} labels", self.image.shape(), self.label.len()),
            ));
        }
        if !self.image.is_finite() {
            return Err(Error::invalid("image", "contains non-finite values"));
        }
        self.label.validate(k)
    }
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

/// The label map of a scene. Depends on `spec` alone.
pub fn render_labels(spec: &SceneSpec) -> Result<LabelMap> {
    spec.validate()?;
    let mut rng = stream(spec.seed, "scene-geometry");
    let (h, w, k) = (spec.height, spec.width, spec.num_classes);
    let mut data = vec![0u8; h * w];
    match spec.layout {
        Layout::Bands => paint_bands(&mut data, h, w, k, &mut rng),
        Layout::Blobs => {
            let bg = rng.random_range(0..k) as u8;
            data.fill(bg);
            paint_blobs(&mut data, h, w, k, k + rng.random_range(0..3), Some(bg), &mut rng);
        }
        Layout::Mixed => {
            paint_bands(&mut data, h, w, k, &mut rng);
            let n = 2 + rng.random_range(0..2);
            paint_blobs(&mut data, h, w, k, n, None, &mut rng);
        }
    }
    LabelMap::new(h, w, data)
}

fn class_sequence<R: Rng>(n: usize, k: usize, exclude: Option<u8>, rng: &mut R) -> Vec<u8> {
    let mut pool: Vec<u8> = (0..k as u8).filter(|&c| Some(c) != exclude).collect();
    pool.shuffle(rng);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut c = if i < pool.len() {
            pool[i]
        } else {
            pool[rng.random_range(0..pool.len())]
        };
        // Adjacent bands/blobs never share a class.
        if pool.len() > 1 && out.last() == Some(&c) {
            c = pool[(pool.iter().position(|&p| p == c).unwrap() + 1) % pool.len()];
        }
        out.push(c);
    }
    out
}

fn paint_bands<R: Rng>(data: &mut [u8], h: usize, w: usize, k: usize, rng: &mut R) {
    let theta = rng.random_range(0.0..PI);
    let (c, s) = (theta.cos(), theta.sin());
    let proj = |y: usize, x: usize| (x as f64 + 0.5) / w as f64 * c + (y as f64 + 0.5) / h as f64 * s;
    let corners = [proj(0, 0), proj(0, w - 1), proj(h - 1, 0), proj(h - 1, w - 1)];
    let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = k + rng.random_range(0..3);
    // Cut points with a minimum spacing so every band is visible.
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.6..1.4)).collect();
    let total: f64 = weights.iter().sum();
    let mut cuts = Vec::with_capacity(n);
    let mut acc = lo;
    for wgt in &weights {
        acc += wgt / total * (hi - lo);
        cuts.push(acc);
    }
    let classes = class_sequence(n, k, None, rng);
    for y in 0..h {
        for x in 0..w {
            let u = proj(y, x);
            let band = cuts.iter().position(|&cut| u <= cut).unwrap_or(n - 1);
            data[y * w + x] = classes[band];
        }
    }
}

fn paint_blobs<R: Rng>(data: &mut [u8], h: usize, w: usize, k: usize, n: usize, bg: Option<u8>, rng: &mut R) {
    let classes = class_sequence(n, k, bg, rng);
    for &cls in &classes {
        let cy = rng.random_range(0.1..0.9);
        let cx = rng.random_range(0.1..0.9);
        let ry = rng.random_range(0.1..0.28);
        let rx = rng.random_range(0.1..0.28);
        let rot = rng.random_range(0.0..PI);
        let (c, s) = (rot.cos(), rot.sin());
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5) / h as f64 - cy;
                let dx = (x as f64 + 0.5) / w as f64 - cx;
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                    data[y * w + x] = cls;
                }
            }
        }
    }
}

/// Paints the scene described by `spec` in `style`.
///
/// Pixel value: `clamp(gain · (palette[label] + texture + noise), 0, 1)`, where
/// the texture is a sinusoid of `texture_freq` cycles per image whose
/// orientation is fixed by the scene seed.
pub fn render_scene_in_domain<T: Scalar>(spec: &SceneSpec, style: &DomainStyle) -> Result<LabeledImage<T>> {
    spec.validate()?;
    style.validate()?;
    if style.palette.len() != spec.num_classes {
        return Err(Error::invalid(
            "palette",
            format!("{} colors for {} classes", style.palette.len(), spec.num_classes),
        ));
    }
    let label = render_labels(spec)?;
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let mut orient = stream(spec.seed, "scene-texture");
    let angle = orient.random_range(0.0..PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut noise_rng = stream(spec.seed, &format!("scene-noise:{}", style.domain_id));
    let normal = Normal::new(0.0, style.noise_sigma).map_err(|e| Error::invalid("noise_sigma", e.to_string()))?;
    let mut image = Tensor::zeros(3, n);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let base = style.palette[label.data[i] as usize];
            let tex = if style.texture_freq == 0.0 {
                0.0
            } else {
                let u = (x as f64 / w as f64) * ca + (y as f64 / h as f64) * sa;
                TEXTURE_AMPLITUDE * (2.0 * PI * style.texture_freq * u).sin()
            };
            for (ch, &b) in base.iter().enumerate() {
                let noise = if style.noise_sigma == 0.0 {
                    0.0
                } else {
                    normal.sample(&mut noise_rng)
                };
                let v = (style.illumination_gain * (b + tex + noise)).clamp(0.0, 1.0);
                image.set(ch, i, T::of(v));
            }
        }
    }
    Ok(LabeledImage {
        image,
        label,
        domain_id: style.domain_id.clone(),
    })
}
