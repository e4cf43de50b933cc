//! Patch image encoder with an attention-pooled class token, and the frozen
//! token-mixing text encoder.

use super::params::{Bound, Init, PRef};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) struct ImageEncoderParams {
    pub w_embed: PRef,
    pub b_embed: PRef,
    pub w_mix1: PRef,
    pub b_mix1: PRef,
    pub w_mix2: PRef,
    pub b_mix2: PRef,
    pub pool_query: PRef,
}

impl ImageEncoderParams {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, patch_dim: usize, d_v: usize) -> Self {
        ImageEncoderParams {
            w_embed: init.weight("w_embed", patch_dim, d_v),
            b_embed: init.zeros("b_embed", 1, d_v),
            w_mix1: init.weight("w_mix1", d_v, d_v),
            b_mix1: init.zeros("b_mix1", 1, d_v),
            w_mix2: init.weight("w_mix2", d_v, d_v),
            b_mix2: init.zeros("b_mix2", 1, d_v),
            pool_query: init.weight("pool_query", d_v, 1),
        }
    }
}

/// `(P, 3·ps²)` patch matrix of a `(3, H*W)` image; patches row-major over the grid.
pub(crate) fn patchify<T: Scalar>(image: &Tensor<T>, h: usize, w: usize, ps: usize) -> Tensor<T> {
    let (gh, gw) = (h / ps, w / ps);
    let mut data = Vec::with_capacity(gh * gw * 3 * ps * ps);
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..3 {
                let plane = image.row(c);
                for dy in 0..ps {
                    let start = (gy * ps + dy) * w + gx * ps;
                    data.extend_from_slice(&plane[start..start + ps]);
                }
            }
        }
    }
    Tensor::from_vec(gh * gw, 3 * ps * ps, data).expect("patch grid tiles the image")
}

/// 2-D sinusoidal position code `(gh*gw, dim)`: half the channels encode the
/// row, half the column.
pub(crate) fn grid_position_code<T: Scalar>(gh: usize, gw: usize, dim: usize, amplitude: f64) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(gh * gw, dim, |p, j| {
        let (pos, j) = if j < half { ((p / gw) as f64, j) } else { ((p % gw) as f64, j - half) };
        let freq = 1.0 / 100f64.powf((j / 2 * 2) as f64 / half.max(1) as f64);
        let v = if j % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
        T::of(amplitude * v)
    })
}

/// 1-D sinusoidal position code `(n, dim)`.
pub(crate) fn sequence_position_code<T: Scalar>(n: usize, dim: usize) -> Tensor<T> {
    Tensor::from_fn(n, dim, |i, j| {
        let freq = 1.0 / 100f64.powf((j / 2 * 2) as f64 / dim as f64);
        let v = if j % 2 == 0 { (i as f64 * freq).sin() } else { (i as f64 * freq).cos() };
        T::of(v)
    })
}

/// Returns `(tokens (P, D_v), class token (1, D_v))`.
pub(crate) fn encode_patches<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    p: &ImageEncoderParams,
    patches: &Tensor<T>,
    pos: &Tensor<T>,
) -> (Var, Var) {
    let x = tape.constant(patches.clone());
    let e = tape.linear(x, b.get(p.w_embed), b.get(p.b_embed));
    let e = tape.gelu(e);
    let pos = tape.constant(pos.clone());
    let t0 = tape.add(e, pos);
    let h = tape.linear(t0, b.get(p.w_mix1), b.get(p.b_mix1));
    let h = tape.gelu(h);
    let h = tape.linear(h, b.get(p.w_mix2), b.get(p.b_mix2));
    let tokens = tape.add(t0, h);

    let d = tape.value(tokens).cols();
    let scores = tape.matmul(tokens, b.get(p.pool_query));
    let scores = tape.scale(scores, T::one() / T::of(d as f64).sqrt());
    let scores = tape.transpose(scores);
    let weights = tape.softmax_rows(scores);
    let cls = tape.matmul(weights, tokens);
    (tokens, cls)
}

#[derive(Clone, Debug)]
pub(crate) struct TextLayer {
    pub token_mix: PRef,
    pub w1: PRef,
    pub b1: PRef,
    pub w2: PRef,
}

#[derive(Clone, Debug)]
pub(crate) struct TextEncoderParams {
    pub class_embed: PRef,
    pub template: PRef,
    pub layers: Vec<TextLayer>,
    pub w_out: PRef,
}

impl TextEncoderParams {
    pub fn init<T: Scalar>(init: &mut Init<'_, T>, k: usize, m: usize, c_tok: usize, c: usize, layers: usize) -> Self {
        let seq = m + 1;
        TextEncoderParams {
            class_embed: init.normal("class_embed", k, c_tok, 1.0),
            template: init.normal("template", m, c_tok, 1.0),
            layers: (0..layers)
                .map(|i| TextLayer {
                    token_mix: init.weight(&format!("layer{i}.token_mix"), seq, seq),
                    w1: init.weight(&format!("layer{i}.w1"), c_tok, c_tok),
                    b1: init.uniform(&format!("layer{i}.b1"), 1, c_tok, 0.1),
                    w2: init.weight(&format!("layer{i}.w2"), c_tok, c_tok),
                })
                .collect(),
            w_out: init.weight("w_out", c_tok, c),
        }
    }
}

/// Row index into `[prompt (M rows); class embeddings (K rows)]` for each of
/// the `K·(M+1)` sequence positions.
pub(crate) fn sequence_gather_index(k: usize, m: usize, c_tok: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(k * (m + 1) * c_tok);
    for cls in 0..k {
        for pos in 0..=m {
            let src = if pos < m { pos } else { m + cls };
            idx.extend((0..c_tok).map(|j| src * c_tok + j));
        }
    }
    idx
}

/// Block-diagonal `kron(I_K, W)` so that one matmul mixes tokens inside every
/// class sequence independently.
pub(crate) fn block_diagonal<T: Scalar>(w: &Tensor<T>, k: usize) -> Tensor<T> {
    let s = w.rows();
    Tensor::from_fn(k * s, k * s, |r, c| if r / s == c / s { w.get(r % s, c % s) } else { T::zero() })
}

/// Frozen constants derived once per model for the text encoder.
#[derive(Clone, Debug)]
pub(crate) struct TextConstants<T> {
    pub gather: std::sync::Arc<Vec<usize>>,
    pub last_token: std::sync::Arc<Vec<usize>>,
    pub pos: Tensor<T>,
    pub mixers: Vec<Tensor<T>>,
}

impl<T: Scalar> TextConstants<T> {
    pub fn new(p: &TextEncoderParams, frozen: &[Tensor<T>], k: usize, m: usize, c_tok: usize) -> Self {
        let seq = m + 1;
        let pos_one = sequence_position_code::<T>(seq, c_tok);
        let pos = Tensor::from_fn(k * seq, c_tok, |r, j| pos_one.get(r % seq, j));
        let mixers = p
            .layers
            .iter()
            .map(|l| match l.token_mix {
                PRef::Frozen(i) => block_diagonal(&frozen[i], k),
                PRef::Train(_) => unreachable!("text encoder is frozen"),
            })
            .collect();
        let last_token = (0..k)
            .flat_map(|cls| (0..c_tok).map(move |j| (cls * seq + m) * c_tok + j))
            .collect();
        TextConstants {
            gather: std::sync::Arc::new(sequence_gather_index(k, m, c_tok)),
            last_token: std::sync::Arc::new(last_token),
            pos,
            mixers,
        }
    }
}

/// `(M, C_tok)` prompt → `(K, C)` text features.
pub(crate) fn encode_prompt<T: Scalar>(
    tape: &mut Tape<T>,
    b: &Bound,
    p: &TextEncoderParams,
    consts: &TextConstants<T>,
    prompt: Var,
) -> Var {
    let c_tok = tape.value(prompt).cols();
    let k = consts.last_token.len() / c_tok;
    let rows = consts.gather.len() / c_tok;
    let both = tape.concat_rows(&[prompt, b.get(p.class_embed)]);
    let x = tape.gather(both, consts.gather.clone(), rows, c_tok);
    let pos = tape.constant(consts.pos.clone());
    let mut x = tape.add(x, pos);
    for (layer, mixer) in p.layers.iter().zip(&consts.mixers) {
        let mix = tape.constant(mixer.clone());
        let m = tape.matmul(mix, x);
        let m = tape.gelu(m);
        x = tape.add(x, m);
        let h = tape.linear(x, b.get(layer.w1), b.get(layer.b1));
        let h = tape.gelu(h);
        let h = tape.matmul(h, b.get(layer.w2));
        x = tape.add(x, h);
    }
    let last = tape.gather(x, consts.last_token.clone(), k, c_tok);
    tape.matmul(last, b.get(p.w_out))
}
