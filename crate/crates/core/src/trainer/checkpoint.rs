//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! magic, config text, config hash, iteration, optimizer step, trainable
//! tensors (name, shape, f64 bits), optimizer moments, running statistics,
//! frozen-parameter hash, and a trailing SHA-256 over everything before it.
//! Values are widened to f64 so f32 and f64 models round-trip exactly.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{AdamW, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::segnet::SegNet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DGSEGCK1";

#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Config hash the caller expects; `None` accepts whatever is stored.
    pub expected_config_hash: Option<String>,
    /// Load even when the stored config hash differs from the expected one.
    pub force: bool,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        self.u64(t.rows() as u64);
        self.u64(t.cols() as u64);
        for v in t.data() {
            self.u64(v.f64().to_bits());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::format(self.path, reason)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| self.fail(format!("length {v} exceeds file size")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        let bytes = self.take(n)?.to_vec();
        String::from_utf8(bytes).map_err(|_| self.fail("string is not UTF-8"))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let (r, c) = (self.len()?, self.len()?);
        let n = r.checked_mul(c).filter(|&n| n <= self.buf.len() / 8).ok_or_else(|| self.fail("tensor too large"))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::of(f64::from_bits(self.u64()?)));
        }
        Tensor::from_vec(r, c, data)
    }

    fn tensor_like<T: Scalar>(&mut self, like: &Tensor<T>, what: &str) -> Result<Tensor<T>> {
        let t = self.tensor()?;
        if t.shape() != like.shape() {
            return Err(self.fail(format!("{what}: stored shape {:?}, model has {:?}", t.shape(), like.shape())));
        }
        Ok(t)
    }
}

/// Writes `state` to `path` through a temporary file and a rename.
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let mut w = Writer(CHECKPOINT_MAGIC.to_vec());
    w.str(&state.cfg.to_text());
    w.str(&state.cfg.hash());
    w.u64(state.iter as u64);
    w.u64(state.opt.step);
    let params = &state.model.train;
    w.u64(params.len() as u64);
    for (name, t) in params.names().iter().zip(params.tensors()) {
        w.str(name);
        w.tensor(t);
    }
    for t in state.opt.m.iter().chain(&state.opt.v) {
        w.tensor(t);
    }
    w.tensor(&state.model.bn.mean);
    w.tensor(&state.model.bn.var);
    w.str(&state.model.frozen.hash());
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);

    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &w.0).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint; nothing is returned unless the whole file checks out.
pub fn load_checkpoint<T: Scalar>(path: &Path, opts: &LoadOptions) -> Result<TrainState<T>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < CHECKPOINT_MAGIC.len() + 32 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic or too short)"));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::format(path, "checksum mismatch: file is truncated or corrupt"));
    }
    let mut r = Reader {
        buf: body,
        pos: CHECKPOINT_MAGIC.len(),
        path,
    };
    let text = r.str()?;
    let stored_hash = r.str()?;
    let cfg = TrainConfig::parse(&text).map_err(|e| r.fail(format!("stored config: {e}")))?;
    if cfg.hash() != stored_hash {
        return Err(r.fail("stored config does not match its hash"));
    }
    if let Some(want) = &opts.expected_config_hash {
        if *want != stored_hash && !opts.force {
            return Err(Error::ConfigMismatch {
                found: stored_hash,
                expected: want.clone(),
            });
        }
    }
    let iter = r.len()?;
    let step = r.u64()?;

    let mut model = SegNet::<T>::new(cfg.model.clone())?;
    let n = r.len()?;
    if n != model.train.len() {
        return Err(r.fail(format!("{n} trainable tensors, model has {}", model.train.len())));
    }
    let names = model.train.names().to_vec();
    let mut loaded = Vec::with_capacity(n);
    for (i, want) in names.iter().enumerate() {
        let name = r.str()?;
        if name != *want {
            return Err(r.fail(format!("tensor {i} is {name:?}, expected {want:?}")));
        }
        loaded.push(r.tensor_like(&model.train.tensors()[i], &name)?);
    }
    let mut opt = AdamW::new(&loaded, cfg.weight_decay);
    opt.step = step;
    for i in 0..n {
        opt.m[i] = r.tensor_like(&loaded[i], "adam m")?;
    }
    for i in 0..n {
        opt.v[i] = r.tensor_like(&loaded[i], "adam v")?;
    }
    let mean = r.tensor_like(&model.bn.mean, "running mean")?;
    let var = r.tensor_like(&model.bn.var, "running var")?;
    let frozen_hash = r.str()?;
    if r.pos != body.len() {
        return Err(r.fail(format!("{} trailing bytes", body.len() - r.pos)));
    }
    if frozen_hash != model.frozen.hash() {
        return Err(r.fail("frozen parameters rebuilt from the config do not match the stored hash"));
    }
    for (dst, src) in model.train.tensors_mut().iter_mut().zip(loaded) {
        *dst = src;
    }
    model.bn.mean = mean;
    model.bn.var = var;
    Ok(TrainState { cfg, model, opt, iter })
}
