//! Label-preserving photometric perturbation: color jitter, Gaussian blur and
//! additive noise, applied in that fixed order.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::scenegen::{hsv_to_rgb, rgb_to_hsv, LabeledImage};
use crate::tensor::Tensor;

/// Closed sampling intervals for every perturbation magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbRanges {
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    /// Fraction of the hue circle.
    pub hue: (f64, f64),
    pub blur_sigma: (f64, f64),
    pub noise_sigma: (f64, f64),
}

impl Default for PerturbRanges {
    fn default() -> Self {
        PerturbRanges {
            brightness: (0.6, 1.4),
            contrast: (0.6, 1.4),
            saturation: (0.6, 1.4),
            hue: (-0.1, 0.1),
            blur_sigma: (0.0, 1.5),
            noise_sigma: (0.0, 0.05),
        }
    }
}

impl PerturbRanges {
    /// Every range collapsed onto the identity value.
    pub fn identity() -> Self {
        PerturbRanges {
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            saturation: (1.0, 1.0),
            hue: (0.0, 0.0),
            blur_sigma: (0.0, 0.0),
            noise_sigma: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, (lo, hi): (f64, f64), min: f64, max: f64| {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < min || hi > max {
                return Err(Error::invalid(
                    format!("perturb.{name}"),
                    format!("[{lo}, {hi}] is not an interval inside [{min}, {max}]"),
                ));
            }
            Ok(())
        };
        check("brightness", self.brightness, 0.0, 10.0)?;
        check("contrast", self.contrast, 0.0, 10.0)?;
        check("saturation", self.saturation, 0.0, 10.0)?;
        check("hue", self.hue, -0.5, 0.5)?;
        check("blur_sigma", self.blur_sigma, 0.0, 10.0)?;
        check("noise_sigma", self.noise_sigma, 0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue_shift: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PerturbationParams {
    pub fn identity(seed: u64) -> Self {
        PerturbationParams {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue_shift: 0.0,
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            seed,
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    // Always draw so that later magnitudes do not depend on earlier ranges.
    let u: f64 = rng.random();
    if lo == hi {
        lo
    } else {
        lo + u * (hi - lo)
    }
}

/// Draws every magnitude uniformly from `ranges`.
pub fn sample_perturbation(seed: u64, ranges: &PerturbRanges) -> Result<PerturbationParams> {
    ranges.validate()?;
    let mut rng = stream(seed, "perturb-params");
    Ok(PerturbationParams {
        brightness: uniform(&mut rng, ranges.brightness),
        contrast: uniform(&mut rng, ranges.contrast),
        saturation: uniform(&mut rng, ranges.saturation),
        hue_shift: uniform(&mut rng, ranges.hue),
        blur_sigma: uniform(&mut rng, ranges.blur_sigma),
        noise_sigma: uniform(&mut rng, ranges.noise_sigma),
        seed,
    })
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / z).collect()
}

/// Separable Gaussian blur of one `h×w` plane with clamp-to-edge borders.
pub fn blur_plane(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, t)| t * plane[y * w + clamp(x as i64 + j as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, t)| t * tmp[clamp(y as i64 + j as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Perturbed copy of `x`; the label map is copied untouched.
pub fn apply_perturbation<T: Scalar>(x: &LabeledImage<T>, p: &PerturbationParams) -> LabeledImage<T> {
    let (h, w) = (x.height(), x.width());
    let n = h * w;
    let mut px: Vec<[f64; 3]> = (0..n)
        .map(|i| [0, 1, 2].map(|c| x.image.get(c, i).f64()))
        .collect();
    let clamp01 = |v: f64| v.clamp(0.0, 1.0);

    if p.brightness != 1.0 {
        px.iter_mut().for_each(|c| *c = c.map(|v| clamp01(v * p.brightness)));
    }
    if p.contrast != 1.0 {
        let mean = px.iter().map(gray).sum::<f64>() / n as f64;
        px.iter_mut()
            .for_each(|c| *c = c.map(|v| clamp01((v - mean) * p.contrast + mean)));
    }
    if p.saturation != 1.0 {
        for c in px.iter_mut() {
            let g = gray(c);
            *c = c.map(|v| clamp01((v - g) * p.saturation + g));
        }
    }
    if p.hue_shift != 0.0 {
        for c in px.iter_mut() {
            let [hh, s, v] = rgb_to_hsv(*c);
            *c = hsv_to_rgb([hh + p.hue_shift, s, v]).map(clamp01);
        }
    }
    if p.blur_sigma > 0.0 {
        for ch in 0..3 {
            let plane: Vec<f64> = px.iter().map(|c| c[ch]).collect();
            for (c, v) in px.iter_mut().zip(blur_plane(&plane, h, w, p.blur_sigma)) {
                c[ch] = clamp01(v);
            }
        }
    }
    if p.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, p.noise_sigma).expect("noise sigma is finite and positive");
        let mut rng = stream(p.seed, "perturb-noise");
        for c in px.iter_mut() {
            for v in c.iter_mut() {
                *v = clamp01(*v + normal.sample(&mut rng));
            }
        }
    }

    let image = Tensor::from_fn(3, n, |c, i| T::of(px[i][c]));
    LabeledImage {
        image,
        label: x.label.clone(),
        domain_id: format!("aug:{}", p.seed),
    }
}

fn gray(c: &[f64; 3]) -> f64 {
    LUMA[0] * c[0] + LUMA[1] * c[1] + LUMA[2] * c[2]
}
