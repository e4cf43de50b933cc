use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
model.num_classes = 3
model.height = 16
model.width = 16
model.patch = 4
model.d_v = 8
model.d = 8
model.c = 6
model.c_tok = 6
model.l = 8
model.blocks = 2
model.context_tokens = 2
model.pixel_channels = 4
model.prompt_hidden = 6
train.iterations = 4
train.batch = 2
train.warmup = 2
";

fn dgseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgseg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dgseg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_dataset(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&["gen-data", "--out", s(&data), "--train", "4", "--val", "2", "--classes", "3", "--size", "16", "--seed", "9"]);
    data
}

#[test]
fn generate_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, format!("{TINY}data.manifest = {}\n", s(&data.join("manifest.tsv")))).unwrap();

    let run = dir.path().join("run");
    let out = ok(&["train", "--config", s(&cfg), "--out", s(&run), "--override", "train.seed=3"]);
    assert!(out.contains("trained 4 iterations"), "{out}");
    assert!(run.join("final.ckpt").is_file());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);

    let report = dir.path().join("report");
    let ckpt = run.join("final.ckpt");
    let table = ok(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&data), "--pr", "--out", s(&report)]);
    for d in ["source", "dusk", "haze", "grain"] {
        assert!(table.contains(d), "{table}");
    }
    for f in ["report.csv", "report.txt", "pr.csv", "ap.csv"] {
        assert!(report.join(f).is_file(), "{f}");
    }
    assert!(!report.join("corruptions.csv").exists());
}

#[test]
fn ablate_writes_one_row_per_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let cfg = dir.path().join("ablate.cfg");
    std::fs::write(&cfg, format!("{TINY}ablate.seeds = 0,1\ndata.manifest = {}\n", s(&data.join("manifest.tsv")))).unwrap();
    let out = dir.path().join("abl");
    let table = ok(&["ablate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(table.contains("full vs baseline"), "{table}");
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "row,seed_0,seed_1,mean");
    assert_eq!(lines.len(), 5);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "train.iterations = lots\n").unwrap();
    let out = dgseg(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.iterations"));

    std::fs::write(&cfg, TINY).unwrap();
    let out = dgseg(&["train", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no output directory"));

    let out = dgseg(&["eval", "--checkpoint", s(&dir.path().join("missing.ckpt")), "--manifest", s(dir.path())]);
    assert!(!out.status.success());
}
