mod common;

use common::*;
use dgseg::prompts::{NormMode, PromptMode};
use dgseg::trainer::{fit_on, load_checkpoint, save_checkpoint, LoadOptions, TrainConfig, TrainState};
use dgseg::{Error, Scalar, Tape};

fn bits<T: Scalar>(v: &[T]) -> Vec<u64> {
    v.iter().map(|x| x.f64().to_bits()).collect()
}

#[test]
fn same_config_same_metrics_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let data = source_samples::<f32>(&tiny_family(5), 6);
    let run = |sub: &str| {
        let cfg = TrainConfig {
            checkpoint_dir: Some(dir.path().join(sub)),
            ..tiny_train_config(5, 2)
        };
        fit_on(cfg, &data).unwrap();
        std::fs::read(dir.path().join(sub).join("metrics.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    assert!(a.starts_with(b"iter,lr,L_seg,L_reg,L_contra,L_cons,L_total\n"));

    let other = fit_on(tiny_train_config(6, 2), &data).unwrap().metrics;
    assert_ne!(other.as_bytes(), &a[..]);
}

#[test]
fn checkpoint_round_trip_is_forward_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = source_samples::<f32>(&tiny_family(2), 4);
    let mut state = fit_on(tiny_train_config(2, 2), &data).unwrap().state;
    let path = dir.path().join("s.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let mut loaded = load_checkpoint::<f32>(&path, &LoadOptions::default()).unwrap();

    assert_eq!(loaded.iter, state.iter);
    assert_eq!(loaded.opt, state.opt);
    for x in &data {
        assert_eq!(bits(state.model.predict(&x.image).unwrap().data()), bits(loaded.model.predict(&x.image).unwrap().data()));
    }
    // Resuming continues the same trajectory.
    let a = state.step(&data[..2]).unwrap();
    let b = loaded.step(&data[..2]).unwrap();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    assert_eq!(state.model.train.hash(), loaded.model.train.hash());
}

#[test]
fn damaged_or_mismatched_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let state = TrainState::<f32>::new(tiny_train_config(0, 2)).unwrap();
    let path = dir.path().join("s.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&cut, &LoadOptions::default()), Err(Error::Format { .. })));

    let mut flipped = bytes.clone();
    flipped[bytes.len() / 3] ^= 1;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, &flipped).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&bad, &LoadOptions::default()), Err(Error::Format { .. })));

    let other = tiny_train_config(1, 2).finish().unwrap().hash();
    let opts = LoadOptions {
        expected_config_hash: Some(other),
        force: false,
    };
    assert!(matches!(load_checkpoint::<f32>(&path, &opts), Err(Error::ConfigMismatch { .. })));
    let forced = LoadOptions { force: true, ..opts };
    assert!(load_checkpoint::<f32>(&path, &forced).is_ok());
}

/// With perturbation and both auxiliary losses off and the domain embedding
/// clamped to zero, every forward output equals the fixed-prompt model's.
#[test]
fn clamped_prompts_reduce_to_fixed_prompts() {
    for seed in 0..3 {
        let mut cfg = tiny_train_config(seed, 2);
        for o in ["train.perturb=false", "train.cons=false", "train.contra=false", "model.domain_prompts=true"] {
            cfg.apply_override(o).unwrap();
        }
        let state = TrainState::<f64>::new(cfg).unwrap();
        let batch = source_samples::<f64>(&tiny_family(seed), 3);
        let images: Vec<_> = batch.iter().map(|x| &x.image).collect();
        let run = |mode| {
            let mut tape = Tape::new();
            let b = state.model.bind(&mut tape, true);
            let out = state.model.forward(&mut tape, &b, &images, mode, NormMode::Batch).unwrap();
            out.traces
                .iter()
                .flat_map(|t| {
                    let v = t.values(&tape);
                    v.mask_logits.into_iter().chain(v.class_logits).flat_map(|m| bits(m.data()))
                })
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(PromptMode::ClampedZero), run(PromptMode::Fixed), "seed {seed}");

        let l0 = state.loss_graph(&batch, PromptMode::ClampedZero).unwrap().breakdown;
        let l1 = state.loss_graph(&batch, PromptMode::Fixed).unwrap().breakdown;
        assert_eq!(format!("{l0:?}"), format!("{l1:?}"));
    }
}
