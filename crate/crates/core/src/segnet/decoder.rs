//! Pixel decoder with text-to-pixel attention, and the masked-attention
//! transformer decoder with shared class and mask heads.

use std::sync::Arc;

use super::params::{Bound, Init, PRef};
use crate::scalar::Scalar;
use crate::tape::{SparseMap, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) struct PixelDecoderParams {
    pub w_pix: PRef,
    pub b_pix: PRef,
    pub w_text_key: PRef,
    pub w_text_value: PRef,
    pub w_phi: PRef,
    pub b_phi: PRef,
    pub w_skip: PRef,
}

impl PixelDecoderParams {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, d_v: usize, d: usize, c: usize, c_phi: usize) -> Self {
        PixelDecoderParams {
            w_pix: init.weight("w_pix", d_v, d),
            b_pix: init.zeros("b_pix", 1, d),
            w_text_key: init.weight("w_text_key", c, d),
            w_text_value: init.weight("w_text_value", c, d),
            w_phi: init.weight("w_phi", c_phi, 3),
            b_phi: init.uniform("b_phi", c_phi, 1, 0.5),
            w_skip: init.weight("w_skip", d, c_phi),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct QueryInitParams {
    pub w1: PRef,
    pub b1: PRef,
    pub w2: PRef,
    pub b2: PRef,
}

impl QueryInitParams {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, c: usize, l: usize) -> Self {
        QueryInitParams {
            w1: init.weight("w1", c, l),
            b1: init.zeros("b1", 1, l),
            w2: init.weight("w2", l, l),
            b2: init.zeros("b2", 1, l),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BlockParams {
    pub w_q: PRef,
    pub w_o: PRef,
    pub w_f1: PRef,
    pub b_f1: PRef,
    pub w_f2: PRef,
    pub b_f2: PRef,
}

#[derive(Clone, Debug)]
pub(crate) struct HeadParams {
    pub w_cls: PRef,
    pub b_cls: PRef,
    pub w_m1: PRef,
    pub b_m1: PRef,
    pub w_m2: PRef,
    pub b_m2: PRef,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderParams {
    pub blocks: Vec<BlockParams>,
    pub head: HeadParams,
}

impl DecoderParams {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, l: usize, d: usize, k: usize, blocks: usize) -> Self {
        let blocks = (0..blocks)
            .map(|s| BlockParams {
                w_q: init.weight(&format!("block{s}.w_q"), l, d),
                w_o: init.normal(&format!("block{s}.w_o"), d, l, 0.5 / (d as f64).sqrt()),
                w_f1: init.weight(&format!("block{s}.w_f1"), l, l),
                b_f1: init.zeros(&format!("block{s}.b_f1"), 1, l),
                w_f2: init.normal(&format!("block{s}.w_f2"), l, l, 0.5 / (l as f64).sqrt()),
                b_f2: init.zeros(&format!("block{s}.b_f2"), 1, l),
            })
            .collect();
        let head = HeadParams {
            w_cls: init.weight("head.w_cls", l, k),
            b_cls: init.zeros("head.b_cls", 1, k),
            w_m1: init.weight("head.w_m1", l, l),
            b_m1: init.zeros("head.b_m1", 1, l),
            w_m2: init.weight("head.w_m2", l, d),
            b_m2: init.zeros("head.b_m2", 1, d),
        };
        DecoderParams { blocks, head }
    }
}

/// Bilinear (half-pixel centers, clamped) upsampling from a `gh×gw` grid to
/// `h×w` pixels, as a column map `(·, gh*gw) → (·, h*w)`.
pub fn bilinear_upsample_map<T: Scalar>(gh: usize, gw: usize, h: usize, w: usize) -> SparseMap<T> {
    let axis = |out: usize, n: usize, src_len: usize| {
        let s = ((out as f64 + 0.5) * src_len as f64 / n as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        let f = s - i0 as f64;
        (i0, i1, f)
    };
    let mut taps = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = axis(y, h, gh);
        for x in 0..w {
            let (x0, x1, fx) = axis(x, w, gw);
            let mut t: Vec<(usize, T)> = Vec::with_capacity(4);
            for (gy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (gx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let wt = wy * wx;
                    if wt == 0.0 {
                        continue;
                    }
                    let idx = gy * gw + gx;
                    match t.iter_mut().find(|(i, _)| *i == idx) {
                        Some(e) => e.1 += T::of(wt),
                        None => t.push((idx, T::of(wt))),
                    }
                }
            }
            taps.push(t);
        }
    }
    SparseMap { in_cols: gh * gw, taps }
}

/// Mean over `s×s` pixel blocks of a `(C, h*w)` image.
pub fn average_pool<T: Scalar>(image: &Tensor<T>, h: usize, w: usize, s: usize) -> Tensor<T> {
    if s == 1 {
        return image.clone();
    }
    let (oh, ow) = (h / s, w / s);
    let norm = T::one() / T::of((s * s) as f64);
    Tensor::from_fn(image.rows(), oh * ow, |c, i| {
        let (y, x) = (i / ow, i % ow);
        let row = image.row(c);
        let mut acc = T::zero();
        for dy in 0..s {
            for dx in 0..s {
                acc += row[(y * s + dy) * w + x * s + dx];
            }
        }
        acc * norm
    })
}

/// Pixel features after text-to-pixel attention, kept in factored form:
/// `z = upsample(lowᵀ) + skip · φ(x)`.
#[derive(Clone, Copy, Debug)]
pub struct PixelFeatureMap {
    /// `(P, D)` patch-resolution features.
    pub low: Var,
    /// `(c_φ, n)` per-pixel color features on the mask grid.
    pub phi: Var,
    /// `(D, c_φ)`
    pub skip: Var,
}

impl PixelFeatureMap {
    /// Dense `(D, H*W)` map.
    pub fn dense<T: Scalar>(&self, tape: &mut Tape<T>, up: &Arc<SparseMap<T>>) -> Var {
        let lt = tape.transpose(self.low);
        let a = tape.sparse(lt, up.clone());
        let b = tape.matmul(self.skip, self.phi);
        tape.add(a, b)
    }

    /// `e · z` for embeddings `e: (N, D)`, without forming `z`.
    pub fn project<T: Scalar>(&self, tape: &mut Tape<T>, e: Var, up: &Arc<SparseMap<T>>) -> Var {
        let lowres = tape.matmul_nt(e, self.low);
        let a = tape.sparse(lowres, up.clone());
        let es = tape.matmul(e, self.skip);
        let b = tape.matmul(es, self.phi);
        tape.add(a, b)
    }
}

pub(crate) fn pixel_decode<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    p: &PixelDecoderParams,
    tokens: Var,
    text: Var,
    image: &Tensor<T>,
) -> PixelFeatureMap {
    let f = tape.linear(tokens, b.get(p.w_pix), b.get(p.b_pix));
    let d = tape.value(f).cols();
    let keys = tape.matmul(text, b.get(p.w_text_key));
    let values = tape.matmul(text, b.get(p.w_text_value));
    let scores = tape.matmul_nt(f, keys);
    let scores = tape.scale(scores, T::one() / T::of(d as f64).sqrt());
    let att = tape.softmax_rows(scores);
    let ctx = tape.matmul(att, values);
    let low = tape.add(f, ctx);

    let x = tape.constant(image.clone());
    let phi = tape.matmul(b.get(p.w_phi), x);
    let phi = tape.add_col(phi, b.get(p.b_phi));
    let phi = tape.gelu(phi);
    PixelFeatureMap {
        low,
        phi,
        skip: b.get(p.w_skip),
    }
}

pub(crate) fn init_queries<T: Scalar>(tape: &mut Tape<T>, b: &Bound, p: &QueryInitParams, text: Var) -> Var {
    let h = tape.linear(text, b.get(p.w1), b.get(p.b1));
    let h = tape.gelu(h);
    tape.linear(h, b.get(p.w2), b.get(p.b2))
}

/// Per-query patch attention mask from the previous block's mask logits: a
/// patch is attended when the mean sigmoid over its pixels exceeds 0.5. A
/// query whose mask is empty attends everywhere.
pub fn attention_mask<T: Scalar>(mask_logits: &Tensor<T>, h: usize, w: usize, ps: usize) -> Vec<bool> {
    let (gh, gw) = (h / ps, w / ps);
    let n = mask_logits.rows();
    let mut out = vec![false; n * gh * gw];
    let norm = 1.0 / (ps * ps) as f64;
    for q in 0..n {
        let row = mask_logits.row(q);
        let dst = &mut out[q * gh * gw..(q + 1) * gh * gw];
        for (p, slot) in dst.iter_mut().enumerate() {
            let (gy, gx) = (p / gw, p % gw);
            let mut acc = 0.0;
            for dy in 0..ps {
                for dx in 0..ps {
                    acc += crate::tape::sigmoid(row[(gy * ps + dy) * w + gx * ps + dx]).f64();
                }
            }
            *slot = acc * norm > 0.5;
        }
        if !dst.iter().any(|&b| b) {
            dst.fill(true);
        }
    }
    out
}

/// Masked cross-attention readout `softmax_mask(q W_q lowᵀ / √D) · low`, `(N, D)`.
pub(crate) fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    p: &BlockParams,
    q: Var,
    low: Var,
    mask: Option<Arc<Vec<bool>>>,
) -> Var {
    let qa = tape.matmul(q, b.get(p.w_q));
    let d = tape.value(qa).cols();
    let scores = tape.matmul_nt(qa, low);
    let scores = tape.scale(scores, T::one() / T::of(d as f64).sqrt());
    let att = match mask {
        Some(m) => tape.masked_softmax_rows(scores, m),
        None => tape.softmax_rows(scores),
    };
    tape.matmul(att, low)
}

pub(crate) fn block_update<T: Scalar>(tape: &mut Tape<T>, b: &Bound, p: &BlockParams, q: Var, readout: Var) -> Var {
    let o = tape.matmul(readout, b.get(p.w_o));
    let q = tape.add(q, o);
    let h = tape.linear(q, b.get(p.w_f1), b.get(p.b_f1));
    let h = tape.gelu(h);
    let h = tape.linear(h, b.get(p.w_f2), b.get(p.b_f2));
    tape.add(q, h)
}

/// `(class logits (N, K), mask embeddings (N, D))` from the shared heads.
pub(crate) fn heads<T: Scalar>(tape: &mut Tape<T>, b: &Bound, p: &HeadParams, q: Var) -> (Var, Var) {
    let c = tape.linear(q, b.get(p.w_cls), b.get(p.b_cls));
    let m = tape.linear(q, b.get(p.w_m1), b.get(p.b_m1));
    let m = tape.gelu(m);
    let m = tape.linear(m, b.get(p.w_m2), b.get(p.b_m2));
    (c, m)
}
