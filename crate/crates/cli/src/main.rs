use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dgseg::ablation::{run_ablation_from_manifest, AblationConfig};
use dgseg::eval::{evaluate_dataset, EvalOptions};
use dgseg::scenegen::{generate_dataset, load_manifest, DatasetCounts, DomainStyle, SceneFamily, Split, MANIFEST_FILE};
use dgseg::trainer::{fit, TrainConfig};

#[derive(Parser)]
#[command(name = "dgseg", version, about = "Domain-generalized segmentation on procedural scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a source training split and source/target validation splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        train: usize,
        #[arg(long, default_value_t = 16)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Extra `key=value` settings applied after the file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Checkpoint and metrics directory (overrides train.checkpoint_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on every validation domain of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pr: bool,
        #[arg(long)]
        corruptions: bool,
        /// Evaluate the training split instead.
        #[arg(long)]
        train_split: bool,
        /// Report directory; the table is always printed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the four cumulative ablation rows over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData {
            out,
            train,
            val,
            seed,
            classes,
            size,
        } => {
            let family = SceneFamily {
                base_seed: seed,
                num_classes: classes,
                height: size,
                width: size,
                ..SceneFamily::default()
            };
            let m = generate_dataset(
                &family,
                &DomainStyle::source(classes),
                &DomainStyle::target_presets(classes),
                DatasetCounts { train, val },
                &out,
            )
            .context("generating dataset")?;
            println!("wrote {} records to {}", m.records.len(), out.join(MANIFEST_FILE).display());
        }
        Cmd::Train { config, overrides, out } => {
            let mut cfg = TrainConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            for o in &overrides {
                cfg.apply_override(o)?;
            }
            if let Some(d) = out {
                cfg.checkpoint_dir = Some(d);
            }
            let Some(dir) = cfg.checkpoint_dir.clone() else {
                bail!("no output directory: pass --out or set train.checkpoint_dir");
            };
            let outcome = fit::<f32>(cfg)?;
            let last = outcome.losses.last().map(|l| l.total).unwrap_or(f64::NAN);
            println!("trained {} iterations, final loss {last:.4}; checkpoint in {}", outcome.state.iter, dir.display());
        }
        Cmd::Eval {
            checkpoint,
            manifest,
            pr,
            corruptions,
            train_split,
            out,
        } => {
            let m = load_manifest(&manifest_path(&manifest))?;
            let opts = EvalOptions {
                split: if train_split { Split::Train } else { Split::Val },
                pr,
                corruptions,
                ..EvalOptions::default()
            };
            let report = evaluate_dataset(&checkpoint, &m, &opts)
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            print!("{}", report.to_table());
            if let Some(d) = out {
                report.write(&d)?;
            }
        }
        Cmd::Ablate { config, out } => {
            let cfg = AblationConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let report = run_ablation_from_manifest(&cfg)?;
            print!("{}", report.to_table());
            let t = report.check_trend(2.0, 0.5);
            println!("full vs baseline {:+.2} points, worst drop {:.2}", t.gain, t.worst_drop);
            if let Some(d) = out {
                std::fs::create_dir_all(&d)?;
                std::fs::write(d.join("ablation.csv"), report.to_csv())?;
            }
        }
    }
    Ok(())
}
