//! Single-head scaled dot-product attention, applied along two different
//! axes of the `[N, T, F, C]` state.
//!
//! * **cross-temporal** — every (station, feature) series is its own batch
//!   of `T` tokens; information moves along time only, never between
//!   series. No positional encoding is added.
//! * **cross-feature** — every timestamp is its own batch of `N * F`
//!   tokens (all stations' feature channels at that instant); information
//!   moves within a timestamp only, never across time.
//!
//! Both return the row-stochastic attention weights next to the output so
//! callers can inspect where the mass went.

use ndarray::{Array1, Array2};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{Tape, Var};

/// Projection weights of one attention head (`C x C` each).
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

/// Gaussian init with stdev `1/sqrt(C)`.
pub fn init_attn(c: usize, seed: u64) -> AttnParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (c as f64).sqrt()).unwrap();
    let mut draw = || Array2::from_shape_fn((c, c), |_| normal.sample(&mut rng));
    AttnParams {
        wq: draw(),
        wk: draw(),
        wv: draw(),
    }
}

/// Tape handles for one head's projections.
#[derive(Debug, Clone, Copy)]
pub struct BoundAttnParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

impl AttnParams {
    pub fn bind(&self, tape: &mut Tape) -> BoundAttnParams {
        BoundAttnParams {
            wq: tape.leaf(self.wq.clone().into_dyn()),
            wk: tape.leaf(self.wk.clone().into_dyn()),
            wv: tape.leaf(self.wv.clone().into_dyn()),
        }
    }
}

/// Attention over a `[B, L, C]` token batch: SoftMax(Q K^T / sqrt(C)) V per
/// batch entry. Returns `(output [B, L, C], weights [B, L, L])`.
pub fn scaled_dot_attention(tape: &mut Tape, tokens: Var, p: &BoundAttnParams) -> (Var, Var) {
    let shape = tape.value(tokens).shape().to_vec();
    assert_eq!(shape.len(), 3, "expect [batch, tokens, channels]");
    let (b, l, c) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(tokens, &[b * l, c]);
    let q = tape.matmul(flat, p.wq);
    let k = tape.matmul(flat, p.wk);
    let v = tape.matmul(flat, p.wv);
    let q3 = tape.reshape(q, &[b, l, c]);
    let k3 = tape.reshape(k, &[b, l, c]);
    let v3 = tape.reshape(v, &[b, l, c]);
    let scores = tape.bmm_t(q3, k3);
    let scaled = tape.scale(scores, 1.0 / (c as f64).sqrt());
    let weights = tape.softmax_last(scaled);
    let out = tape.bmm(weights, v3);
    (out, weights)
}

fn dims4(tape: &Tape, v: Var) -> (usize, usize, usize, usize) {
    let shape = tape.value(v).shape().to_vec();
    assert_eq!(shape.len(), 4, "expect [stations, steps, features, channels]");
    (shape[0], shape[1], shape[2], shape[3])
}

/// Cross-temporal attention over `[N, T, F, C]`: each of the `N * F` series
/// attends over its own `T` steps. Returns `(output [N, T, F, C],
/// weights [N * F, T, T])`; the weight batch index runs station-major.
pub fn cross_temporal_attention(tape: &mut Tape, h: Var, p: &BoundAttnParams) -> (Var, Var) {
    let (n, t_len, f_len, c) = dims4(tape, h);
    let series_major = tape.permute(h, &[0, 2, 1, 3]);
    let tokens = tape.reshape(series_major, &[n * f_len, t_len, c]);
    let (out, weights) = scaled_dot_attention(tape, tokens, p);
    let back = tape.reshape(out, &[n, f_len, t_len, c]);
    let r = tape.permute(back, &[0, 2, 1, 3]);
    (r, weights)
}

/// Cross-feature attention over `[N, T, F, C]`: each timestamp's `N * F`
/// channel tokens attend to each other. Returns `(output [N, T, F, C],
/// weights [T, N * F, N * F])`; the token index runs station-major.
pub fn cross_feature_attention(tape: &mut Tape, e: Var, p: &BoundAttnParams) -> (Var, Var) {
    let (n, t_len, f_len, c) = dims4(tape, e);
    let step_major = tape.permute(e, &[1, 0, 2, 3]);
    let tokens = tape.reshape(step_major, &[t_len, n * f_len, c]);
    let (out, weights) = scaled_dot_attention(tape, tokens, p);
    let back = tape.reshape(out, &[t_len, n, f_len, c]);
    let z = tape.permute(back, &[1, 0, 2, 3]);
    (z, weights)
}

/// Fusion network combining the temporal state with the spatial
/// convolution outputs: channel-wise concatenation of `m` equally shaped
/// `[N, T, F, C]` parts followed by an `(m*C) -> C` affine map applied to
/// every (station, step, feature) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Gaussian init with stdev `1/sqrt(m*C)`; zero bias.
pub fn init_fusion(m: usize, c: usize, seed: u64) -> FusionParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fan_in = m * c;
    let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
    FusionParams {
        w: Array2::from_shape_fn((fan_in, c), |_| normal.sample(&mut rng)),
        b: Array1::zeros(c),
    }
}

/// Tape handles for the fusion affine map.
#[derive(Debug, Clone, Copy)]
pub struct BoundFusionParams {
    pub w: Var,
    pub b: Var,
}

impl FusionParams {
    pub fn bind(&self, tape: &mut Tape) -> BoundFusionParams {
        BoundFusionParams {
            w: tape.leaf(self.w.clone().into_dyn()),
            b: tape.leaf(self.b.clone().into_dyn()),
        }
    }
}

/// Applies the fusion network to `m >= 2` parts of shape `[N, T, F, C]`.
/// Cells never mix: the affine map sees the concatenated channels of one
/// (station, step, feature) cell at a time.
pub fn fuse(tape: &mut Tape, parts: &[Var], p: &BoundFusionParams) -> Var {
    assert!(parts.len() >= 2, "fusion needs at least two parts");
    let (n, t_len, f_len, c) = dims4(tape, parts[0]);
    let cat = tape.concat(parts, 3);
    let rows = tape.reshape(cat, &[n * t_len * f_len, parts.len() * c]);
    let mixed = tape.matmul(rows, p.w);
    let biased = tape.add_bias(mixed, p.b);
    tape.reshape(biased, &[n, t_len, f_len, c])
}
