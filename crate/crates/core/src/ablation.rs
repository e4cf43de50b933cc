//! Component ablation: cumulative rows trained over several seeds and scored
//! by mean held-out mIoU.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::miou_over;
use crate::scalar::Scalar;
use crate::scenegen::{load_manifest, LabeledImage, Split};
use crate::trainer::{fit_on, load_training_data, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub name: &'static str,
    pub overrides: &'static [&'static str],
}

/// Baseline, then perturbation, consistency and the contrastive prompt loss
/// added one at a time.
pub const ABLATION_ROWS: [AblationRow; 4] = [
    AblationRow {
        name: "baseline",
        overrides: &["train.perturb=false", "train.cons=false", "train.contra=false", "model.domain_prompts=false"],
    },
    AblationRow {
        name: "+perturb",
        overrides: &["train.perturb=true", "train.cons=false", "train.contra=false", "model.domain_prompts=false"],
    },
    AblationRow {
        name: "+cons",
        overrides: &["train.perturb=true", "train.cons=true", "train.contra=false", "model.domain_prompts=false"],
    },
    AblationRow {
        name: "+contra",
        overrides: &["train.perturb=true", "train.cons=true", "train.contra=true", "model.domain_prompts=true"],
    },
];

#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl AblationConfig {
    /// Training keys plus `ablate.seeds = a,b,c`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut train = TrainConfig::default();
        let mut seeds = vec![0, 1, 2];
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid("config", format!("line {}: expected key = value", n + 1)))?;
            if k.trim() == "ablate.seeds" {
                seeds = v
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| Error::invalid("ablate.seeds", format!("bad seed {s:?}"))))
                    .collect::<Result<_>>()?;
            } else {
                train.set(k, v)?;
            }
        }
        if seeds.is_empty() {
            return Err(Error::invalid("ablate.seeds", "empty"));
        }
        Ok(AblationConfig { train, seeds })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Training config for one row and seed.
    pub fn row_config(&self, row: &AblationRow, seed: u64) -> Result<TrainConfig> {
        let mut cfg = self.train.clone();
        cfg.seed = seed;
        for o in row.overrides {
            cfg.apply_override(o)?;
        }
        cfg.finish()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowResult {
    pub name: String,
    /// Mean held-out mIoU per seed, in seed order.
    pub per_seed: Vec<f64>,
}

impl RowResult {
    pub fn mean(&self) -> f64 {
        self.per_seed.iter().sum::<f64>() / self.per_seed.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<RowResult>,
}

/// Every (row, seed) run is independent; they are trained in parallel.
pub fn run_ablation<T: Scalar>(
    cfg: &AblationConfig,
    train: &[LabeledImage<T>],
    held_out: &[Vec<LabeledImage<T>>],
) -> Result<AblationReport> {
    if held_out.is_empty() || held_out.iter().any(|d| d.is_empty()) {
        return Err(Error::invalid("ablation", "needs at least one non-empty held-out domain"));
    }
    let jobs: Vec<(usize, u64)> = (0..ABLATION_ROWS.len())
        .flat_map(|r| cfg.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(r, seed)| {
            let out = fit_on(cfg.row_config(&ABLATION_ROWS[r], seed)?, train)?;
            let mut sum = 0.0;
            for d in held_out {
                sum += miou_over(&out.state.model, d)?;
            }
            Ok(sum / held_out.len() as f64)
        })
        .collect::<Result<_>>()?;
    let n = cfg.seeds.len();
    let rows = ABLATION_ROWS
        .iter()
        .enumerate()
        .map(|(r, row)| RowResult {
            name: row.name.to_string(),
            per_seed: scores[r * n..(r + 1) * n].to_vec(),
        })
        .collect();
    Ok(AblationReport {
        seeds: cfg.seeds.clone(),
        rows,
    })
}

/// Runs the ablation on the dataset named by `data.manifest`, scoring on
/// every validation domain other than the training one.
pub fn run_ablation_from_manifest(cfg: &AblationConfig) -> Result<AblationReport> {
    let path = cfg
        .train
        .manifest
        .clone()
        .ok_or_else(|| Error::invalid("data.manifest", "not set"))?;
    let train = load_training_data::<f32>(&path, &cfg.train)?;
    let manifest = load_manifest(&path)?;
    let src = manifest.train_domain()?;
    let held_out = manifest
        .domains(Split::Val)
        .into_iter()
        .filter(|d| *d != src)
        .map(|d| manifest.load_split(Split::Val, &d))
        .collect::<Result<Vec<_>>>()?;
    run_ablation(cfg, &train, &held_out)
}

/// Outcome of the trend check, in mIoU points.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendCheck {
    pub gain: f64,
    pub worst_drop: f64,
    pub pass: bool,
}

impl AblationReport {
    /// Last row at least `min_gain` points above the first, and no row more
    /// than `tolerance` points below it.
    pub fn check_trend(&self, min_gain: f64, tolerance: f64) -> TrendCheck {
        let pts: Vec<f64> = self.rows.iter().map(|r| 100.0 * r.mean()).collect();
        let base = pts[0];
        let gain = pts[pts.len() - 1] - base;
        let worst_drop = pts.iter().map(|p| base - p).fold(0.0, f64::max);
        TrendCheck {
            gain,
            worst_drop,
            pass: gain >= min_gain && worst_drop <= tolerance,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row");
        for seed in &self.seeds {
            let _ = write!(s, ",seed_{seed}");
        }
        s.push_str(",mean\n");
        for r in &self.rows {
            s.push_str(&r.name);
            for v in &r.per_seed {
                let _ = write!(s, ",{v:.6}");
            }
            let _ = writeln!(s, ",{:.6}", r.mean());
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10}", "row");
        for seed in &self.seeds {
            let _ = write!(s, "{:>9}", format!("s{seed}"));
        }
        let _ = writeln!(s, "{:>9}{:>9}", "mean", "delta");
        let base = 100.0 * self.rows[0].mean();
        for r in &self.rows {
            let _ = write!(s, "{:<10}", r.name);
            for v in &r.per_seed {
                let _ = write!(s, "{:>9.2}", 100.0 * v);
            }
            let m = 100.0 * r.mean();
            let _ = writeln!(s, "{m:>9.2}{:>+9.2}", m - base);
        }
        s
    }
}
