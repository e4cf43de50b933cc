//! Evaluation: per-domain mIoU, PR curves and corruption robustness.

mod corrupt;
mod metrics;

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

pub use corrupt::{Corruption, CorruptionGroup};
pub use metrics::{iou_from_confusion, pr_curve_and_ap, ConfusionMatrix, IouReport, PrCurve, PrPoint};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scenegen::{DatasetManifest, LabeledImage, Split, IGNORE};
use crate::segnet::SegNet;
use crate::trainer::{load_checkpoint, LoadOptions};

/// PR curves longer than this are thinned when written out; AP always uses
/// the full curve.
pub const PR_CSV_MAX_POINTS: usize = 256;

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub split: Split,
    /// Domains to evaluate; `None` means every domain present in `split`.
    pub domains: Option<Vec<String>>,
    pub pr: bool,
    pub corruptions: bool,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split: Split::Val,
            domains: None,
            pr: false,
            corruptions: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainResult {
    pub domain: String,
    pub images: usize,
    pub held_out: bool,
    pub confusion: ConfusionMatrix,
    pub iou: IouReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassCurve {
    pub domain: String,
    pub class: usize,
    pub curve: PrCurve,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionResult {
    pub corruption: Corruption,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub num_classes: usize,
    pub train_domain: String,
    pub split: Split,
    pub domains: Vec<DomainResult>,
    pub pr: Vec<ClassCurve>,
    /// Corruptions applied to the source-domain validation images.
    pub clean_source_miou: Option<f64>,
    pub corruptions: Vec<CorruptionResult>,
}

fn check_compat<T: Scalar>(model: &SegNet<T>, sample: &LabeledImage<T>) -> Result<()> {
    let c = &model.cfg;
    if (sample.height(), sample.width()) != (c.height, c.width) {
        return Err(Error::invalid(
            "image",
            format!(
                "{}x{} in domain {:?}, model expects {}x{}",
                sample.height(),
                sample.width(),
                sample.domain_id,
                c.height,
                c.width
            ),
        ));
    }
    Ok(())
}

/// Confusion matrix of `model` over `images`, evaluated in parallel and
/// reduced by merging.
pub fn confusion_over<T: Scalar>(model: &SegNet<T>, images: &[LabeledImage<T>]) -> Result<ConfusionMatrix> {
    let k = model.cfg.num_classes;
    images
        .par_iter()
        .map(|s| {
            check_compat(model, s)?;
            let mut cm = ConfusionMatrix::new(k);
            cm.accumulate(&model.predict_labels(&s.image)?, &s.label)?;
            Ok(cm)
        })
        .try_reduce(|| ConfusionMatrix::new(k), |a, b| a.merged(&b))
}

pub fn miou_over<T: Scalar>(model: &SegNet<T>, images: &[LabeledImage<T>]) -> Result<f64> {
    Ok(iou_from_confusion(&confusion_over(model, images)?)?.miou)
}

/// Per-class curves with scores `ŷ_k / Σ_j ŷ_j`; ignored pixels are dropped.
fn class_curves<T: Scalar>(model: &SegNet<T>, images: &[LabeledImage<T>], domain: &str) -> Result<Vec<ClassCurve>> {
    let k = model.cfg.num_classes;
    let per_image: Vec<(Vec<Vec<f64>>, Vec<u8>)> = images
        .par_iter()
        .map(|s| {
            let y = model.predict(&s.image)?;
            let mut scores = vec![Vec::new(); k];
            let mut labels = Vec::new();
            for (p, &g) in s.label.data.iter().enumerate() {
                if g == IGNORE {
                    continue;
                }
                let z: f64 = (0..k).map(|c| y.get(c, p).f64()).sum();
                for (c, sc) in scores.iter_mut().enumerate() {
                    let v = if z > 0.0 { y.get(c, p).f64() / z } else { 1.0 / k as f64 };
                    sc.push(v.clamp(0.0, 1.0));
                }
                labels.push(g);
            }
            Ok((scores, labels))
        })
        .collect::<Result<_>>()?;
    (0..k)
        .map(|c| {
            let scores: Vec<f64> = per_image.iter().flat_map(|(s, _)| s[c].iter().copied()).collect();
            let pos: Vec<bool> = per_image.iter().flat_map(|(_, l)| l.iter().map(|&g| g as usize == c)).collect();
            Ok(ClassCurve {
                domain: domain.to_string(),
                class: c,
                curve: pr_curve_and_ap(&scores, &pos)?,
            })
        })
        .collect()
}

pub fn evaluate_model<T: Scalar>(model: &SegNet<T>, manifest: &DatasetManifest, opts: &EvalOptions) -> Result<EvalReport> {
    let k = model.cfg.num_classes;
    if manifest.num_classes != k {
        return Err(Error::invalid(
            "num_classes",
            format!("manifest has K={}, checkpoint has K={k}", manifest.num_classes),
        ));
    }
    let train_domain = manifest.train_domain()?;
    let domains = opts.domains.clone().unwrap_or_else(|| manifest.domains(opts.split));
    if domains.is_empty() {
        return Err(Error::invalid("domain", format!("manifest has no {} split", opts.split.as_str())));
    }
    let mut results = Vec::new();
    let mut pr = Vec::new();
    for d in &domains {
        let images = manifest.load_split::<T>(opts.split, d)?;
        let confusion = confusion_over(model, &images)?;
        let iou = iou_from_confusion(&confusion)?;
        if opts.pr {
            pr.extend(class_curves(model, &images, d)?);
        }
        results.push(DomainResult {
            domain: d.clone(),
            images: images.len(),
            held_out: *d != train_domain,
            confusion,
            iou,
        });
    }

    let (mut clean_source_miou, mut corruptions) = (None, Vec::new());
    if opts.corruptions {
        let base = manifest.load_split::<T>(Split::Val, &train_domain)?;
        clean_source_miou = Some(miou_over(model, &base)?);
        for c in Corruption::ALL {
            let shifted: Vec<_> = base
                .iter()
                .enumerate()
                .map(|(i, s)| c.apply(s, crate::rng::derive_seed(opts.seed, &format!("image:{i}"))))
                .collect();
            corruptions.push(CorruptionResult {
                corruption: c,
                miou: miou_over(model, &shifted)?,
            });
        }
    }
    Ok(EvalReport {
        num_classes: k,
        train_domain,
        split: opts.split,
        domains: results,
        pr,
        clean_source_miou,
        corruptions,
    })
}

/// Loads the checkpoint in `f32` and evaluates it.
pub fn evaluate_dataset(checkpoint: &Path, manifest: &DatasetManifest, opts: &EvalOptions) -> Result<EvalReport> {
    let state = load_checkpoint::<f32>(checkpoint, &LoadOptions::default())?;
    evaluate_model(&state.model, manifest, opts)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    /// Mean mIoU over held-out domains, if any were evaluated.
    pub fn held_out_miou(&self) -> Option<f64> {
        let v: Vec<f64> = self.domains.iter().filter(|d| d.held_out).map(|d| d.iou.miou).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn group_means(&self) -> Vec<(CorruptionGroup, f64)> {
        CorruptionGroup::ALL
            .iter()
            .filter_map(|&g| {
                let v: Vec<f64> = self.corruptions.iter().filter(|c| c.corruption.group() == g).map(|c| c.miou).collect();
                (!v.is_empty()).then(|| (g, v.iter().sum::<f64>() / v.len() as f64))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("domain,split,held_out,images,mIoU");
        for c in 0..self.num_classes {
            let _ = write!(s, ",IoU_{c}");
        }
        s.push('\n');
        for d in &self.domains {
            let _ = write!(s, "{},{},{},{},{:.6}", d.domain, self.split.as_str(), d.held_out, d.images, d.iou.miou);
            for v in &d.iou.per_class {
                let _ = write!(s, ",{}", v.map_or(String::new(), |x| format!("{x:.6}")));
            }
            s.push('\n');
        }
        if let Some(m) = self.held_out_miou() {
            let _ = writeln!(s, "held_out_mean,{},true,,{m:.6}{}", self.split.as_str(), ",".repeat(self.num_classes));
        }
        s
    }

    pub fn pr_csv(&self) -> String {
        let mut s = String::from("domain,class,threshold,precision,recall\n");
        for cc in &self.pr {
            let pts = &cc.curve.points;
            let stride = pts.len().div_ceil(PR_CSV_MAX_POINTS).max(1);
            for (i, p) in pts.iter().enumerate() {
                if i % stride == 0 || i + 1 == pts.len() {
                    let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6}", cc.domain, cc.class, p.threshold, p.precision, p.recall);
                }
            }
        }
        s
    }

    pub fn ap_csv(&self) -> String {
        let mut s = String::from("domain,class,AP\n");
        for cc in &self.pr {
            let _ = writeln!(s, "{},{},{}", cc.domain, cc.class, cc.curve.ap.map_or(String::new(), |a| format!("{a:.6}")));
        }
        s
    }

    pub fn corruption_csv(&self) -> String {
        let mut s = String::from("group,corruption,mIoU\n");
        if let Some(c) = self.clean_source_miou {
            let _ = writeln!(s, "clean,none,{c:.6}");
        }
        for r in &self.corruptions {
            let _ = writeln!(s, "{},{},{:.6}", r.corruption.group().name(), r.corruption.name(), r.miou);
        }
        for (g, m) in self.group_means() {
            let _ = writeln!(s, "{},mean,{m:.6}", g.name());
        }
        s
    }

    /// Fixed-width table of the same numbers, IoU in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<14}{:>7}{:>8}", "domain", "images", "mIoU");
        for c in 0..self.num_classes {
            let _ = write!(s, "{:>8}", format!("c{c}"));
        }
        s.push('\n');
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
        for d in &self.domains {
            let name = if d.held_out { d.domain.clone() } else { format!("{} (src)", d.domain) };
            let _ = write!(s, "{:<14}{:>7}{:>8}", name, d.images, pct(Some(d.iou.miou)));
            for v in &d.iou.per_class {
                let _ = write!(s, "{:>8}", pct(*v));
            }
            s.push('\n');
        }
        if let Some(m) = self.held_out_miou() {
            let _ = writeln!(s, "{:<14}{:>7}{:>8}", "held-out avg", "", pct(Some(m)));
        }
        if !self.pr.is_empty() {
            s.push_str("\nAP\n");
            for cc in &self.pr {
                let _ = writeln!(s, "{:<14}c{:<3}{:>8}", cc.domain, cc.class, fmt_opt(cc.curve.ap));
            }
        }
        if let Some(clean) = self.clean_source_miou {
            let _ = writeln!(s, "\ncorruptions ({} val)", self.train_domain);
            let _ = writeln!(s, "{:<16}{:>8}", "clean", pct(Some(clean)));
            for r in &self.corruptions {
                let _ = writeln!(s, "{:<16}{:>8}", r.corruption.name(), pct(Some(r.miou)));
            }
            for (g, m) in self.group_means() {
                let _ = writeln!(s, "{:<16}{:>8}", format!("[{}]", g.name()), pct(Some(m)));
            }
        }
        s
    }

    /// Writes `report.csv` and `report.txt`, plus `pr.csv`/`ap.csv` and
    /// `corruptions.csv` when present.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        put("report.csv", self.to_csv())?;
        put("report.txt", self.to_table())?;
        if !self.pr.is_empty() {
            put("pr.csv", self.pr_csv())?;
            put("ap.csv", self.ap_csv())?;
        }
        if self.clean_source_miou.is_some() {
            put("corruptions.csv", self.corruption_csv())?;
        }
        Ok(())
    }
}
