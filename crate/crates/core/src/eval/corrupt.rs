//! Synthetic image corruptions for robustness reports, one fixed severity each.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::rng::stream;
use crate::scalar::Scalar;
use crate::scenegen::{LabelMap, LabeledImage};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CorruptionGroup {
    Blur,
    Noise,
    Digital,
    Weather,
    Elastic,
}

impl CorruptionGroup {
    pub const ALL: [CorruptionGroup; 5] = [Self::Blur, Self::Noise, Self::Digital, Self::Weather, Self::Elastic];

    pub fn name(self) -> &'static str {
        match self {
            Self::Blur => "blur",
            Self::Noise => "noise",
            Self::Digital => "digital",
            Self::Weather => "weather",
            Self::Elastic => "elastic",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Corruption {
    GaussianBlur,
    MotionBlur,
    GaussianNoise,
    ImpulseNoise,
    Contrast,
    Pixelate,
    Fog,
    Brightness,
    ElasticWarp,
}

impl Corruption {
    pub const ALL: [Corruption; 9] = [
        Self::GaussianBlur,
        Self::MotionBlur,
        Self::GaussianNoise,
        Self::ImpulseNoise,
        Self::Contrast,
        Self::Pixelate,
        Self::Fog,
        Self::Brightness,
        Self::ElasticWarp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianBlur => "gaussian_blur",
            Self::MotionBlur => "motion_blur",
            Self::GaussianNoise => "gaussian_noise",
            Self::ImpulseNoise => "impulse_noise",
            Self::Contrast => "contrast",
            Self::Pixelate => "pixelate",
            Self::Fog => "fog",
            Self::Brightness => "brightness",
            Self::ElasticWarp => "elastic",
        }
    }

    pub fn group(self) -> CorruptionGroup {
        use CorruptionGroup as G;
        match self {
            Self::GaussianBlur | Self::MotionBlur => G::Blur,
            Self::GaussianNoise | Self::ImpulseNoise => G::Noise,
            Self::Contrast | Self::Pixelate => G::Digital,
            Self::Fog | Self::Brightness => G::Weather,
            Self::ElasticWarp => G::Elastic,
        }
    }

    /// Only the elastic warp moves pixels, and it moves the label with them.
    pub fn apply<T: Scalar>(self, sample: &LabeledImage<T>, seed: u64) -> LabeledImage<T> {
        let (h, w) = (sample.height(), sample.width());
        let mut rng = stream(seed, &format!("corrupt:{}", self.name()));
        let mut img = Planes::from_tensor(&sample.image, h, w);
        let mut label = sample.label.clone();
        match self {
            Self::GaussianBlur => img.gaussian_blur(1.5),
            Self::MotionBlur => img.box_blur_rows(7),
            Self::GaussianNoise => {
                let n = Normal::new(0.0, 0.12).expect("valid sigma");
                img.map(|v| v + n.sample(&mut rng));
            }
            Self::ImpulseNoise => {
                for v in img.data.iter_mut() {
                    if rng.random_bool(0.06) {
                        *v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                    }
                }
            }
            Self::Contrast => {
                let mean = img.data.iter().sum::<f64>() / img.data.len() as f64;
                img.map(|v| mean + 0.35 * (v - mean));
            }
            Self::Pixelate => img.pixelate(4),
            Self::Fog => {
                let field = smooth_field(h, w, 4, &mut rng);
                for c in 0..3 {
                    for (i, f) in field.iter().enumerate() {
                        let a = 0.35 + 0.25 * f;
                        let v = &mut img.data[c * h * w + i];
                        *v = *v * (1.0 - a) + 0.8 * a;
                    }
                }
            }
            Self::Brightness => img.map(|v| v + 0.3),
            Self::ElasticWarp => {
                let dx = smooth_field(h, w, 5, &mut rng);
                let dy = smooth_field(h, w, 5, &mut rng);
                let amp = 3.0;
                let src: Vec<usize> = (0..h * w)
                    .map(|i| {
                        let (y, x) = ((i / w) as f64, (i % w) as f64);
                        let sy = (y + amp * dy[i]).round().clamp(0.0, (h - 1) as f64) as usize;
                        let sx = (x + amp * dx[i]).round().clamp(0.0, (w - 1) as f64) as usize;
                        sy * w + sx
                    })
                    .collect();
                let old = img.data.clone();
                for c in 0..3 {
                    for (i, &s) in src.iter().enumerate() {
                        img.data[c * h * w + i] = old[c * h * w + s];
                    }
                }
                label = LabelMap {
                    data: src.iter().map(|&s| sample.label.data[s]).collect(),
                    ..label
                };
            }
        }
        img.map(|v| v.clamp(0.0, 1.0));
        LabeledImage {
            image: img.into_tensor(),
            label,
            domain_id: sample.domain_id.clone(),
        }
    }
}

/// Values in `[-1, 1]`: a `cells×cells` random grid, bilinearly upsampled.
fn smooth_field(h: usize, w: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let at = |r: usize, c: usize| g[r * (cells + 1) + c];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / (h.max(2) - 1) as f64 * cells as f64;
        let r0 = (fy.floor() as usize).min(cells - 1);
        let ty = fy - r0 as f64;
        for x in 0..w {
            let fx = x as f64 / (w.max(2) - 1) as f64 * cells as f64;
            let c0 = (fx.floor() as usize).min(cells - 1);
            let tx = fx - c0 as f64;
            let top = at(r0, c0) * (1.0 - tx) + at(r0, c0 + 1) * tx;
            let bot = at(r0 + 1, c0) * (1.0 - tx) + at(r0 + 1, c0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

struct Planes {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Planes {
    fn from_tensor<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Self {
        Planes {
            h,
            w,
            data: t.data().iter().map(|v| v.f64()).collect(),
        }
    }

    fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        Tensor::from_vec(3, self.h * self.w, self.data.into_iter().map(T::of).collect())
            .expect("three planes of H*W")
    }

    fn map(&mut self, mut f: impl FnMut(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// Convolves every row (or column) with `kernel`, clamping at the border.
    fn convolve(&mut self, kernel: &[f64], along_rows: bool) {
        let (h, w) = (self.h, self.w);
        let r = (kernel.len() / 2) as isize;
        let old = self.data.clone();
        for c in 0..3 {
            let plane = &old[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (j, &kv) in kernel.iter().enumerate() {
                        let off = j as isize - r;
                        let (sy, sx) = if along_rows {
                            (y, (x as isize + off).clamp(0, w as isize - 1) as usize)
                        } else {
                            ((y as isize + off).clamp(0, h as isize - 1) as usize, x)
                        };
                        acc += kv * plane[sy * w + sx];
                    }
                    self.data[c * h * w + y * w + x] = acc;
                }
            }
        }
    }

    fn gaussian_blur(&mut self, sigma: f64) {
        let r = (3.0 * sigma).ceil() as isize;
        let mut k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        self.convolve(&k, true);
        self.convolve(&k, false);
    }

    fn box_blur_rows(&mut self, len: usize) {
        self.convolve(&vec![1.0 / len as f64; len], true);
    }

    fn pixelate(&mut self, block: usize) {
        let (h, w) = (self.h, self.w);
        for c in 0..3 {
            let plane = &mut self.data[c * h * w..(c + 1) * h * w];
            for by in (0..h).step_by(block) {
                for bx in (0..w).step_by(block) {
                    let ys = by..(by + block).min(h);
                    let xs = bx..(bx + block).min(w);
                    let n = (ys.len() * xs.len()) as f64;
                    let mean = ys.clone().flat_map(|y| xs.clone().map(move |x| y * w + x)).map(|i| plane[i]).sum::<f64>() / n;
                    for y in ys {
                        for x in xs.clone() {
                            plane[y * w + x] = mean;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LabeledImage<f64> {
        let (h, w) = (8, 8);
        let image = Tensor::from_fn(3, h * w, |c, i| ((c * 7 + i * 3) % 11) as f64 / 10.0);
        let label = LabelMap::new(h, w, (0..h * w).map(|i| (i % 3) as u8).collect()).unwrap();
        LabeledImage {
            image,
            label,
            domain_id: "d".into(),
        }
    }

    #[test]
    fn corruptions_stay_in_range_and_keep_labels() {
        let s = sample();
        for c in Corruption::ALL {
            let out = c.apply(&s, 1);
            assert_eq!(out.image.shape(), s.image.shape());
            assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)), "{}", c.name());
            if c != Corruption::ElasticWarp {
                assert_eq!(out.label, s.label);
            }
            assert_eq!(out, c.apply(&s, 1));
        }
    }

    #[test]
    fn every_group_has_a_member() {
        for g in CorruptionGroup::ALL {
            assert!(Corruption::ALL.iter().any(|c| c.group() == g));
        }
    }
}
