//! Independent reference implementations used to verify the main path,
//! plus the synthetic-data generator and the executable information-flow
//! demonstrations built on top of them.
//!
//! The naive routines are written against flat `&[f64]` buffers with
//! explicit index arithmetic and share no tensor helpers with the
//! production modules. They are slow by design; they exist to pin down the
//! exact arithmetic the optimized path must reproduce, and to drive finite
//! difference gradient checks. The generator and the proposition driver at
//! the bottom of the file are different in kind: they produce data for and
//! exercise the real model, so they use the production types directly.
//!
//! Layout convention for signal buffers: `[N, T, F, C]` row-major, i.e.
//! `r[((i * t_len + t) * f_len + f) * c_len + c]`.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::datamodel::{normalize, transitions, SpatioTemporalDataset};
use crate::error::{Error, Result};
use crate::graphlearn::eval_meta_adjacency;
use crate::masking::TrainingPattern;
use crate::model::{train, GsliModel, ModelConfig, SpatialMode, TrainConfig, VariantSpec};
use crate::spatialconv::{
    bind_transitions, canonical_conv, init_canonical_kernels, init_node_kernels, node_scale_conv,
};
use crate::tape::Tape;

/// Meta-graph parameters in flat form: embeddings are `m * d`, prominence
/// weights `d * d`, biases `d`.
pub struct NaiveGraphParams<'a> {
    pub source: &'a [f64],
    pub target: &'a [f64],
    pub prom_w1: &'a [f64],
    pub prom_b1: &'a [f64],
    pub prom_w2: &'a [f64],
    pub prom_b2: &'a [f64],
}

/// Prominence network: one hidden layer of width `d` with tanh activation
/// and an identity output layer.
pub fn naive_prominence(p: &NaiveGraphParams<'_>, m: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * d];
    for i in 0..m {
        let mut hidden = vec![0.0; d];
        for h in 0..d {
            let mut acc = p.prom_b1[h];
            for j in 0..d {
                acc += p.source[i * d + j] * p.prom_w1[j * d + h];
            }
            hidden[h] = acc.tanh();
        }
        for o in 0..d {
            let mut acc = p.prom_b2[o];
            for h in 0..d {
                acc += hidden[h] * p.prom_w2[h * d + o];
            }
            out[i * d + o] = acc;
        }
    }
    out
}

/// Learned meta-adjacency: row-SoftMax of ReLU(refined_source * target^T),
/// where refined_source is the prominence-gated source embedding (or the raw
/// source embedding when `use_prominence` is off). A row whose ReLU output is
/// all zero SoftMaxes to the uniform row.
pub fn naive_meta_adjacency(
    p: &NaiveGraphParams<'_>,
    m: usize,
    d: usize,
    use_prominence: bool,
) -> Vec<f64> {
    let refined: Vec<f64> = if use_prominence {
        let prom = naive_prominence(p, m, d);
        p.source
            .iter()
            .zip(prom.iter())
            .map(|(s, g)| s * g)
            .collect()
    } else {
        p.source.to_vec()
    };
    let mut adj = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let mut acc = 0.0;
            for q in 0..d {
                acc += refined[i * d + q] * p.target[j * d + q];
            }
            adj[i * m + j] = acc.max(0.0);
        }
    }
    for i in 0..m {
        let row = &mut adj[i * m..(i + 1) * m];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    adj
}

fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for q in 0..k {
                acc += a[i * k + q] * b[q * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

/// Node-scale diffusion convolution for one feature, by scalar loops.
///
/// `meta` is the learned adjacency (applied unpowered at every step), `fwd`
/// and `bwd` are the degree-normalized transition matrices raised to the
/// actual power `k`. `kernels[k]` holds the three `c * c` mixing matrices for
/// step `k` in the order (learned, forward, backward).
pub fn naive_node_scale_feature(
    r: &[f64],
    n: usize,
    t_len: usize,
    c: usize,
    meta: &[f64],
    fwd: &[f64],
    bwd: &[f64],
    kernels: &[[Vec<f64>; 3]],
) -> Vec<f64> {
    let kmax = kernels.len() - 1;
    // propagated[i][...] for each adjacency role at each power
    let apply = |a: &[f64], x: &[f64]| -> Vec<f64> {
        // (n x n) applied over the node axis of [n, t_len * c]
        naive_matmul(a, x, n, n, t_len * c)
    };
    let meta_r = apply(meta, r);
    let mut out = vec![0.0; n * t_len * c];
    let mut fwd_pow = r.to_vec();
    let mut bwd_pow = r.to_vec();
    for (k, roles) in kernels.iter().enumerate() {
        if k > 0 {
            fwd_pow = apply(fwd, &fwd_pow);
            bwd_pow = apply(bwd, &bwd_pow);
        }
        for (role, base) in [(0, &meta_r), (1, &fwd_pow), (2, &bwd_pow)] {
            let theta = &roles[role];
            for i in 0..n {
                for t in 0..t_len {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for q in 0..c {
                            acc += base[(i * t_len + t) * c + q] * theta[q * c + ch];
                        }
                        out[(i * t_len + t) * c + ch] += acc;
                    }
                }
            }
        }
        let _ = kmax;
    }
    out
}

/// Full node-scale forward over `[N, T, F, C]`: each feature runs its own
/// meta-adjacency and kernel stack against the shared transitions.
#[allow(clippy::too_many_arguments)]
pub fn naive_node_scale(
    r: &[f64],
    n: usize,
    t_len: usize,
    f_len: usize,
    c: usize,
    metas: &[Vec<f64>],
    fwd: &[f64],
    bwd: &[f64],
    kernels: &[Vec<[Vec<f64>; 3]>],
) -> Vec<f64> {
    let mut out = vec![0.0; n * t_len * f_len * c];
    for f in 0..f_len {
        let mut rf = vec![0.0; n * t_len * c];
        for i in 0..n {
            for t in 0..t_len {
                for ch in 0..c {
                    rf[(i * t_len + t) * c + ch] = r[((i * t_len + t) * f_len + f) * c + ch];
                }
            }
        }
        let of = naive_node_scale_feature(&rf, n, t_len, c, &metas[f], fwd, bwd, &kernels[f]);
        for i in 0..n {
            for t in 0..t_len {
                for ch in 0..c {
                    out[((i * t_len + t) * f_len + f) * c + ch] = of[(i * t_len + t) * c + ch];
                }
            }
        }
    }
    out
}

/// Feature-scale diffusion convolution by scalar loops: one shared `F x F`
/// meta-adjacency applied unpowered at every step, `kernels[k]` a `c * c`
/// mixing matrix per step.
pub fn naive_feature_scale(
    r: &[f64],
    n: usize,
    t_len: usize,
    f_len: usize,
    c: usize,
    meta: &[f64],
    kernels: &[Vec<f64>],
) -> Vec<f64> {
    let mut out = vec![0.0; n * t_len * f_len * c];
    // propagated[i,t,f,q] = sum_m meta[f,m] * r[i,t,m,q]
    let mut propagated = vec![0.0; n * t_len * f_len * c];
    for i in 0..n {
        for t in 0..t_len {
            for f in 0..f_len {
                for q in 0..c {
                    let mut acc = 0.0;
                    for m in 0..f_len {
                        acc += meta[f * f_len + m] * r[((i * t_len + t) * f_len + m) * c + q];
                    }
                    propagated[((i * t_len + t) * f_len + f) * c + q] = acc;
                }
            }
        }
    }
    for theta in kernels {
        for i in 0..n {
            for t in 0..t_len {
                for f in 0..f_len {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for q in 0..c {
                            acc += propagated[((i * t_len + t) * f_len + f) * c + q]
                                * theta[q * c + ch];
                        }
                        out[((i * t_len + t) * f_len + f) * c + ch] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Canonical (un-split) diffusion convolution by scalar loops: signals are
/// `F * C`-wide per node, one shared learned adjacency, kernels are
/// `(f_len * c) x (f_len * c)` per step and role.
#[allow(clippy::too_many_arguments)]
pub fn naive_canonical(
    r: &[f64],
    n: usize,
    t_len: usize,
    width: usize,
    meta: Option<&[f64]>,
    fwd: &[f64],
    bwd: &[f64],
    kernels: &[Vec<Vec<f64>>],
) -> Vec<f64> {
    let apply = |a: &[f64], x: &[f64]| naive_matmul(a, x, n, n, t_len * width);
    let meta_r = meta.map(|m| apply(m, r));
    let mut out = vec![0.0; n * t_len * width];
    let mut fwd_pow = r.to_vec();
    let mut bwd_pow = r.to_vec();
    for (k, roles) in kernels.iter().enumerate() {
        if k > 0 {
            fwd_pow = apply(fwd, &fwd_pow);
            bwd_pow = apply(bwd, &bwd_pow);
        }
        let mut bases: Vec<(&[f64], &[f64])> = Vec::new();
        match (&meta_r, roles.len()) {
            (Some(m), 3) => {
                bases.push((&m[..], &roles[0][..]));
                bases.push((&fwd_pow[..], &roles[1][..]));
                bases.push((&bwd_pow[..], &roles[2][..]));
            }
            (None, 2) => {
                bases.push((&fwd_pow[..], &roles[0][..]));
                bases.push((&bwd_pow[..], &roles[1][..]));
            }
            _ => panic!("kernel role count does not match adjacency set"),
        }
        for (base, theta) in bases {
            for i in 0..n {
                for t in 0..t_len {
                    for ch in 0..width {
                        let mut acc = 0.0;
                        for q in 0..width {
                            acc += base[(i * t_len + t) * width + q] * theta[q * width + ch];
                        }
                        out[(i * t_len + t) * width + ch] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Single-head scaled dot-product attention over `tokens` (`l x c`) by scalar
/// loops; weight matrices are `c x c`.
pub fn naive_attention(
    tokens: &[f64],
    l: usize,
    c: usize,
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
) -> Vec<f64> {
    let q = naive_matmul(tokens, wq, l, c, c);
    let k = naive_matmul(tokens, wk, l, c, c);
    let v = naive_matmul(tokens, wv, l, c, c);
    let scale = 1.0 / (c as f64).sqrt();
    let mut out = vec![0.0; l * c];
    for i in 0..l {
        let mut scores = vec![0.0; l];
        for j in 0..l {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += q[i * c + ch] * k[j * c + ch];
            }
            scores[j] = acc * scale;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in scores.iter_mut() {
            *s /= sum;
        }
        for ch in 0..c {
            let mut acc = 0.0;
            for j in 0..l {
                acc += scores[j] * v[j * c + ch];
            }
            out[i * c + ch] = acc;
        }
    }
    out
}

/// Central finite differences of `f` at `x`.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe);
        probe[i] = orig - eps;
        let lo = f(&probe);
        probe[i] = orig;
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Largest relative deviation between an analytic gradient and its finite
/// difference estimate; denominators are floored so near-zero entries compare
/// absolutely.
pub fn max_relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    analytic
        .iter()
        .zip(fd.iter())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // 1-based ranks, ties share the average rank of their block
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
///
/// Errors when either side is constant (rank correlation undefined).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape("spearman", "inputs must be equal length >= 2"));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let (da, db) = (ra[i] - ma, rb[i] - mb);
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Degenerate(
            "spearman: constant input has no rank ordering".into(),
        ));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Owned flat meta-graph parameters for the composed forward reference.
#[derive(Debug, Clone)]
pub struct NaiveGraphOwned {
    pub source: Vec<f64>,
    pub target: Vec<f64>,
    pub prom_w1: Vec<f64>,
    pub prom_b1: Vec<f64>,
    pub prom_w2: Vec<f64>,
    pub prom_b2: Vec<f64>,
}

impl NaiveGraphOwned {
    pub fn as_params(&self) -> NaiveGraphParams<'_> {
        NaiveGraphParams {
            source: &self.source,
            target: &self.target,
            prom_w1: &self.prom_w1,
            prom_b1: &self.prom_b1,
            prom_w2: &self.prom_w2,
            prom_b2: &self.prom_b2,
        }
    }
}

/// One layer of the composed reference: per-feature input projection,
/// cross-temporal attention projections, diffusion kernels for both scales,
/// the `(3C) -> C` fusion affine, and cross-feature attention projections.
#[derive(Debug, Clone)]
pub struct NaiveLayer {
    pub proj_w: Vec<f64>,
    pub proj_b: Vec<f64>,
    pub ct_wq: Vec<f64>,
    pub ct_wk: Vec<f64>,
    pub ct_wv: Vec<f64>,
    pub node_kernels: Vec<Vec<[Vec<f64>; 3]>>,
    pub feature_kernels: Vec<Vec<f64>>,
    pub fusion_w: Vec<f64>,
    pub fusion_b: Vec<f64>,
    pub cf_wq: Vec<f64>,
    pub cf_wk: Vec<f64>,
    pub cf_wv: Vec<f64>,
}

/// Full composed-model parameters in flat form. Meta-graphs are shared
/// across layers; everything else is per layer.
#[derive(Debug, Clone)]
pub struct NaiveModelSpec {
    pub n: usize,
    pub t_w: usize,
    pub f_len: usize,
    pub c: usize,
    pub d: usize,
    pub node_graphs: Vec<NaiveGraphOwned>,
    pub feature_graph: NaiveGraphOwned,
    pub fwd: Vec<f64>,
    pub bwd: Vec<f64>,
    pub layers: Vec<NaiveLayer>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

/// Composed scalar-loop forward of the full architecture: per layer,
/// project the window signal to channels, attend along each series, run
/// both diffusion scales, fuse, attend within each timestamp; deeper layers
/// add their projection of the original signal to the previous output.
/// Input is `[N, T_w, F]` row-major, output likewise.
pub fn naive_gsli_forward(x: &[f64], spec: &NaiveModelSpec) -> Vec<f64> {
    let (n, t_w, f_len, c) = (spec.n, spec.t_w, spec.f_len, spec.c);
    let size = n * t_w * f_len * c;
    let node_metas: Vec<Vec<f64>> = spec
        .node_graphs
        .iter()
        .map(|g| naive_meta_adjacency(&g.as_params(), n, spec.d, true))
        .collect();
    let feature_meta = naive_meta_adjacency(&spec.feature_graph.as_params(), f_len, spec.d, true);

    let cell = |i: usize, t: usize, f: usize, ch: usize| ((i * t_w + t) * f_len + f) * c + ch;

    let mut z_prev: Option<Vec<f64>> = None;
    for layer in &spec.layers {
        let mut input = vec![0.0; size];
        for i in 0..n {
            for t in 0..t_w {
                for f in 0..f_len {
                    for ch in 0..c {
                        let h = x[(i * t_w + t) * f_len + f] * layer.proj_w[f * c + ch]
                            + layer.proj_b[f * c + ch];
                        input[cell(i, t, f, ch)] =
                            h + z_prev.as_ref().map_or(0.0, |z| z[cell(i, t, f, ch)]);
                    }
                }
            }
        }

        // cross-temporal: every (station, feature) series attends over time
        let mut r = vec![0.0; size];
        for i in 0..n {
            for f in 0..f_len {
                let mut tokens = vec![0.0; t_w * c];
                for t in 0..t_w {
                    for ch in 0..c {
                        tokens[t * c + ch] = input[cell(i, t, f, ch)];
                    }
                }
                let out =
                    naive_attention(&tokens, t_w, c, &layer.ct_wq, &layer.ct_wk, &layer.ct_wv);
                for t in 0..t_w {
                    for ch in 0..c {
                        r[cell(i, t, f, ch)] = out[t * c + ch];
                    }
                }
            }
        }

        let nl = naive_node_scale(
            &r,
            n,
            t_w,
            f_len,
            c,
            &node_metas,
            &spec.fwd,
            &spec.bwd,
            &layer.node_kernels,
        );
        let fl = naive_feature_scale(&r, n, t_w, f_len, c, &feature_meta, &layer.feature_kernels);

        // fusion: concatenated channels (r | nl | fl) through a (3C)->C affine
        let mut e = vec![0.0; size];
        for idx in 0..n * t_w * f_len {
            for ch in 0..c {
                let mut acc = layer.fusion_b[ch];
                for q in 0..c {
                    acc += r[idx * c + q] * layer.fusion_w[q * c + ch];
                    acc += nl[idx * c + q] * layer.fusion_w[(c + q) * c + ch];
                    acc += fl[idx * c + q] * layer.fusion_w[(2 * c + q) * c + ch];
                }
                e[idx * c + ch] = acc;
            }
        }

        // cross-feature: all N*F tokens of one timestamp attend to each
        // other; token order is station-major
        let mut z = vec![0.0; size];
        let l_tokens = n * f_len;
        for t in 0..t_w {
            let mut tokens = vec![0.0; l_tokens * c];
            for i in 0..n {
                for f in 0..f_len {
                    for ch in 0..c {
                        tokens[(i * f_len + f) * c + ch] = e[cell(i, t, f, ch)];
                    }
                }
            }
            let out = naive_attention(
                &tokens,
                l_tokens,
                c,
                &layer.cf_wq,
                &layer.cf_wk,
                &layer.cf_wv,
            );
            for i in 0..n {
                for f in 0..f_len {
                    for ch in 0..c {
                        z[cell(i, t, f, ch)] = out[(i * f_len + f) * c + ch];
                    }
                }
            }
        }
        z_prev = Some(z);
    }

    let z = z_prev.expect("at least one layer");
    let mut prediction = vec![0.0; n * t_w * f_len];
    for i in 0..n {
        for t in 0..t_w {
            for f in 0..f_len {
                let mut acc = spec.head_b[f];
                for ch in 0..c {
                    acc += z[cell(i, t, f, ch)] * spec.head_w[f * c + ch];
                }
                prediction[(i * t_w + t) * f_len + f] = acc;
            }
        }
    }
    prediction
}

// ---------------------------------------------------------------------------
// Synthetic data with per-feature propagation structure
// ---------------------------------------------------------------------------

/// Recipe for a first-order vector-autoregressive dataset in which every
/// feature propagates through its own row-stochastic station matrix:
/// `x_f(t+1) = G_f x_f(t) + noise`.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n: usize,
    pub t: usize,
    /// One `n x n` row-stochastic propagation matrix per feature.
    pub propagation: Vec<Array2<f64>>,
    pub noise_std: f64,
    pub seed: u64,
}

/// Circulant row-stochastic matrix: `self_weight` on the diagonal and the
/// remainder split between the two stations `hop` steps away around the
/// ring. Coinciding targets (tiny rings) accumulate.
pub fn ring_propagation(n: usize, hop: usize, self_weight: f64) -> Array2<f64> {
    let mut g = Array2::zeros((n, n));
    let spread = (1.0 - self_weight) / 2.0;
    for i in 0..n {
        g[[i, i]] += self_weight;
        g[[i, (i + hop) % n]] += spread;
        g[[i, (i + n - hop % n) % n]] += spread;
    }
    g
}

impl SyntheticSpec {
    /// The standard two-feature instance: feature 0 propagates along the
    /// distance-1 ring, feature 1 along the distance-2 ring, so the two
    /// structures share no off-diagonal support. The even self/parent
    /// split keeps each step's spread local yet couples neighbors hard
    /// enough that even the same-timestamp cross-station correlations
    /// mirror the ring ordering — structure a per-timestamp graph
    /// convolution can actually exploit.
    pub fn ring_pair(n: usize, t: usize, noise_std: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n,
            t,
            propagation: vec![ring_propagation(n, 1, 0.5), ring_propagation(n, 2, 0.5)],
            noise_std,
            seed,
        }
    }

    pub fn f(&self) -> usize {
        self.propagation.len()
    }

    /// Checks row-stochasticity of every matrix and, when several features
    /// exist, that at least one entry disagrees between two features — the
    /// premise the whole construction exists to realize.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t < 2 || self.propagation.is_empty() {
            return Err(Error::parameter(
                "synthetic spec",
                "needs n >= 1, t >= 2, and at least one feature",
            ));
        }
        for (f, g) in self.propagation.iter().enumerate() {
            if g.shape() != [self.n, self.n] {
                return Err(Error::shape(
                    "synthetic spec",
                    format!(
                        "feature {f} propagation is {:?}, want [{n}, {n}]",
                        g.shape(),
                        n = self.n
                    ),
                ));
            }
            for i in 0..self.n {
                let row = g.row(i);
                if row.iter().any(|&w| !(w >= 0.0)) {
                    return Err(Error::parameter(
                        "propagation",
                        format!("feature {f} row {i} has a negative or non-finite weight"),
                    ));
                }
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::parameter(
                        "propagation",
                        format!("feature {f} row {i} sums to {sum}, not 1"),
                    ));
                }
            }
        }
        let heterogeneous = self.propagation.len() < 2
            || self.propagation.iter().enumerate().any(|(a, ga)| {
                self.propagation.iter().skip(a + 1).any(|gb| {
                    ga.iter()
                        .zip(gb.iter())
                        .any(|(x, y)| (x - y).abs() > 1e-12)
                })
            });
        if !heterogeneous {
            return Err(Error::Degenerate(
                "every feature shares the same propagation matrix; \
                 at least one entry must disagree"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Runs the per-feature autoregression from standard-normal initial states.
/// The result is fully observed and carries a uniform station graph, so the
/// given adjacency encodes none of the per-feature structure.
///
/// The per-step innovations are centered across stations (and rescaled so
/// each node still receives stdev `noise_std`). A row-stochastic matrix
/// preserves the station mean exactly, so un-centered noise would
/// accumulate a common random-walk level that dwarfs the structured
/// deviations and carries no information about any `G_f`; centering keeps
/// the whole signal in the subspace the propagation matrices actually
/// shape.
pub fn synth_heterogeneous(spec: &SyntheticSpec) -> Result<SpatioTemporalDataset> {
    spec.validate()?;
    let (n, t, f_len) = (spec.n, spec.t, spec.f());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let center_scale = if n > 1 {
        1.0 / (1.0 - 1.0 / n as f64).sqrt()
    } else {
        0.0
    };
    let mut values = Array3::<f64>::zeros((n, t, f_len));
    for f in 0..f_len {
        let g = &spec.propagation[f];
        let mut state: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        for (i, &x) in state.iter().enumerate() {
            values[[i, 0, f]] = x;
        }
        for step in 1..t {
            let draws: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let mut next = vec![0.0; n];
            for (i, slot) in next.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += g[[i, j]] * state[j];
                }
                *slot = acc + spec.noise_std * center_scale * (draws[i] - mean);
            }
            for (i, &x) in next.iter().enumerate() {
                values[[i, step, f]] = x;
            }
            state = next;
        }
    }
    let dataset = SpatioTemporalDataset {
        values,
        mask: Array3::from_elem((n, t, f_len), true),
        node_ids: (0..n).map(|i| format!("s{i}")).collect(),
        feature_ids: (0..f_len).map(|f| format!("f{f}")).collect(),
        timestamps: (0..t as i64).collect(),
        adjacency: Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 1.0 }),
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Fraction of stations whose strongest lag-1 cross-correlation partner is
/// one of its true propagation parents (off-diagonal row maxima of `g`; a
/// tie admits any of the tied stations).
///
/// The per-timestamp station mean is removed first: a row-stochastic
/// autoregression accumulates a common random-walk level that would drown
/// every cross-correlation toward 1.
pub fn lag1_parent_recovery(
    values: &Array3<f64>,
    feature: usize,
    g: &Array2<f64>,
) -> Result<f64> {
    let (n, t) = (values.shape()[0], values.shape()[1]);
    if n < 3 || t < 3 {
        return Err(Error::Degenerate(
            "lag-1 recovery needs at least 3 stations and 3 timestamps".into(),
        ));
    }
    let mut centered = vec![vec![0.0; t]; n];
    for s in 0..t {
        let mean = (0..n).map(|i| values[[i, s, feature]]).sum::<f64>() / n as f64;
        for (i, series) in centered.iter_mut().enumerate() {
            series[s] = values[[i, s, feature]] - mean;
        }
    }
    let len = t - 1;
    let corr = |target: &[f64], source: &[f64]| -> f64 {
        // target is aligned at lag +1 against source
        let mt = target[1..].iter().sum::<f64>() / len as f64;
        let ms = source[..len].iter().sum::<f64>() / len as f64;
        let mut cov = 0.0;
        let mut vt = 0.0;
        let mut vs = 0.0;
        for s in 0..len {
            let dt = target[s + 1] - mt;
            let ds = source[s] - ms;
            cov += dt * ds;
            vt += dt * dt;
            vs += ds * ds;
        }
        if vt == 0.0 || vs == 0.0 {
            0.0
        } else {
            cov / (vt * vs).sqrt()
        }
    };
    let mut hits = 0usize;
    for i in 0..n {
        let best_weight = (0..n)
            .filter(|&j| j != i)
            .map(|j| g[[i, j]])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut best_j = usize::MAX;
        let mut best_c = f64::NEG_INFINITY;
        for j in 0..n {
            if j == i {
                continue;
            }
            let c = corr(&centered[i], &centered[j]);
            if c > best_c {
                best_c = c;
                best_j = j;
            }
        }
        if best_j != usize::MAX && g[[i, best_j]] > best_weight - 1e-12 {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

// ---------------------------------------------------------------------------
// Executable information-flow demonstrations
// ---------------------------------------------------------------------------

/// Knobs for [`check_propositions`]. `spec` provides the training data for
/// the behavioral half; the structural half only needs `draws` random
/// parameter draws.
#[derive(Debug, Clone)]
pub struct PropositionConfig {
    pub spec: SyntheticSpec,
    pub draws: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Training-label pattern for the behavioral runs.
    pub pattern: TrainingPattern,
    pub mask_ratio: f64,
    pub spearman_floor: f64,
}

impl PropositionConfig {
    /// The standard configuration: ten structural draws, the five-station
    /// two-ring series, and a 200-epoch training budget.
    ///
    /// Scattered single-cell labels at a generous 0.4 ratio with a gentle
    /// learning rate proved the most reliable regime for pushing mass onto
    /// the true parents: a high ratio frequently hides several stations of
    /// a feature at once, which is exactly when the imputed cell cannot be
    /// recovered from the remaining stations' shared sum and the spatial
    /// stage has to commit to *which* neighbors matter.
    pub fn standard(seed: u64) -> PropositionConfig {
        PropositionConfig {
            spec: SyntheticSpec::ring_pair(5, 500, 0.25, seed),
            draws: 10,
            epochs: 200,
            learning_rate: 0.005,
            pattern: TrainingPattern::Random,
            mask_ratio: 0.4,
            spearman_floor: 0.5,
        }
    }
}

/// Outcome of the structural and behavioral information-flow checks.
#[derive(Debug, Clone, Serialize)]
pub struct PropositionReport {
    pub draws: usize,
    /// Draws in which the per-feature convolution kept feature lanes
    /// bit-exactly isolated.
    pub split_isolation_draws: usize,
    /// Draws in which the shared-adjacency convolution leaked a
    /// cross-feature perturbation.
    pub canonical_interference_draws: usize,
    /// Per feature: rank correlation between the trained per-feature
    /// meta-adjacency and that feature's true propagation matrix, over
    /// off-diagonal entries.
    pub split_spearman: Vec<f64>,
    /// The single shared meta-adjacency of the un-split model against each
    /// feature's true matrix.
    pub shared_spearman: Vec<f64>,
    /// Whether the two trained per-feature meta-adjacencies actually
    /// diverged from each other.
    pub meta_graphs_differ: bool,
    pub structural_pass: bool,
    pub behavioral_pass: bool,
    /// True for the single-feature degenerate case, where split and shared
    /// convolutions coincide and both checks hold vacuously.
    pub vacuous: bool,
    pub pass: bool,
}

/// Perturbation probes on the real convolution stages: for each draw,
/// random kernels, adjacencies, and input; bump one entry of feature 1's
/// input lane; compare feature 0's output bit for bit. Returns
/// `(split_isolation_draws, canonical_interference_draws)`.
pub fn check_structural(draws: usize, seed: u64) -> (usize, usize) {
    let (n, t_w, f_len, c, k_max) = (3usize, 4usize, 2usize, 2usize, 1usize);
    let mut isolated = 0;
    let mut interfered = 0;
    for draw in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(draw as u64));
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut sample = |len: usize| -> Vec<f64> {
            (0..len).map(|_| normal.sample(&mut rng)).collect()
        };

        let given = {
            let w = sample(n * n);
            Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { w[i * n + j].abs() })
        };
        let trans = transitions(&given);
        // random row-stochastic learned adjacencies, one per feature plus a
        // shared one for the canonical stage
        let mut stochastic = |m: usize| -> Array2<f64> {
            let logits = sample(m * m);
            let mut a = Array2::zeros((m, m));
            for i in 0..m {
                let row = &logits[i * m..(i + 1) * m];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for j in 0..m {
                    a[[i, j]] = exps[j] / sum;
                }
            }
            a
        };
        let metas: Vec<Array2<f64>> = (0..f_len).map(|_| stochastic(n)).collect();
        let shared = stochastic(n);
        let node_kernels =
            init_node_kernels(f_len, k_max, c, seed.wrapping_add(1000 + draw as u64));
        let canon_kernels = init_canonical_kernels(
            k_max,
            f_len * c,
            true,
            seed.wrapping_add(2000 + draw as u64),
        );

        let x = sample(n * t_w * f_len * c);
        let target = (
            rng.random_range(0..n),
            rng.random_range(0..t_w),
            rng.random_range(0..c),
        );
        let mut x_bumped = x.clone();
        x_bumped[((target.0 * t_w + target.1) * f_len + 1) * c + target.2] += 0.5;

        let run_split = |input: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound_trans = bind_transitions(&mut tape, &trans);
            let bound_kernels = node_kernels.bind(&mut tape);
            let meta_vars: Vec<_> = metas
                .iter()
                .map(|a| tape.constant(a.clone().into_dyn()))
                .collect();
            let r = tape.constant(
                ndarray::ArrayD::from_shape_vec(vec![n, t_w, f_len, c], input.to_vec()).unwrap(),
            );
            let out = node_scale_conv(&mut tape, r, &meta_vars, &bound_trans, &bound_kernels);
            tape.value(out).iter().cloned().collect()
        };
        let run_canonical = |input: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound_trans = bind_transitions(&mut tape, &trans);
            let bound_kernels = canon_kernels.bind(&mut tape);
            let meta = tape.constant(shared.clone().into_dyn());
            let r = tape.constant(
                ndarray::ArrayD::from_shape_vec(vec![n, t_w, f_len, c], input.to_vec()).unwrap(),
            );
            let out = canonical_conv(&mut tape, r, Some(meta), &bound_trans, &bound_kernels);
            tape.value(out).iter().cloned().collect()
        };

        let feature0 = |flat: &[f64]| -> Vec<u64> {
            let mut lane = Vec::with_capacity(n * t_w * c);
            for i in 0..n {
                for t in 0..t_w {
                    for ch in 0..c {
                        lane.push(flat[((i * t_w + t) * f_len) * c + ch].to_bits());
                    }
                }
            }
            lane
        };

        if feature0(&run_split(&x)) == feature0(&run_split(&x_bumped)) {
            isolated += 1;
        }
        if feature0(&run_canonical(&x)) != feature0(&run_canonical(&x_bumped)) {
            interfered += 1;
        }
    }
    (isolated, interfered)
}

/// Trains the split and the shared-adjacency models on the synthetic series
/// and scores the learned meta-graphs against the generating matrices.
///
/// Split-scale pass: every per-feature meta-adjacency ranks its own
/// feature's true parents highly (Spearman above the floor) and the two
/// meta-graphs genuinely differ. Shared pass condition: the single learned
/// adjacency fails to clear the floor for at least one feature.
pub fn check_propositions(cfg: &PropositionConfig) -> Result<PropositionReport> {
    let f_len = cfg.spec.f();
    if f_len == 1 {
        // One feature: the split convolution IS the shared convolution and
        // there is no second lane to leak into.
        return Ok(PropositionReport {
            draws: cfg.draws,
            split_isolation_draws: cfg.draws,
            canonical_interference_draws: cfg.draws,
            split_spearman: Vec::new(),
            shared_spearman: Vec::new(),
            meta_graphs_differ: false,
            structural_pass: true,
            behavioral_pass: true,
            vacuous: true,
            pass: true,
        });
    }

    let (isolated, interfered) = check_structural(cfg.draws, cfg.spec.seed);
    let structural_pass =
        isolated == cfg.draws && 10 * interfered >= 9 * cfg.draws;

    let dataset = synth_heterogeneous(&cfg.spec)?;
    let (normalized, _) = normalize(&dataset)?;
    let train_one = |variant: VariantSpec, stream: u64| -> Result<GsliModel> {
        // Two layers matter here: first-layer queries at a hidden cell are
        // zero vectors, so first-layer attention can only hand back a
        // window average. The second layer's input carries the first
        // layer's reconstruction, which finally gives hidden cells
        // informative queries — and the graph stage something to refine.
        let config = ModelConfig {
            c: 8,
            d: 8,
            l: 2,
            ..ModelConfig::new(cfg.spec.n, f_len, variant)
        };
        let mut model = GsliModel::init(&config, cfg.spec.seed.wrapping_add(stream));
        let tcfg = TrainConfig {
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            pattern: cfg.pattern,
            mask_ratio: cfg.mask_ratio,
            seed: cfg.spec.seed,
            ..TrainConfig::default()
        };
        train(&mut model, &normalized, &tcfg)?;
        Ok(model)
    };

    let split_model = train_one(VariantSpec::FULL, 1)?;
    let shared_model = train_one(
        VariantSpec {
            cross_temporal: true,
            cross_feature: true,
            prominence: true,
            spatial: SpatialMode::Canonical { learned: true },
        },
        2,
    )?;

    let off_diag = |a: &Array2<f64>| -> Vec<f64> {
        let n = a.shape()[0];
        let mut flat = Vec::with_capacity(n * (n - 1));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    flat.push(a[[i, j]]);
                }
            }
        }
        flat
    };

    // A learned graph that collapsed to the uniform fallback has no rank
    // ordering at all; that is a recovery failure, scored as zero.
    let score = |a: &[f64], b: &[f64]| spearman(a, b).unwrap_or(0.0);

    let node_graphs = split_model
        .node_graphs
        .as_ref()
        .expect("full variant learns node graphs");
    let learned: Vec<Array2<f64>> = node_graphs
        .per_feature
        .iter()
        .map(|p| eval_meta_adjacency(p, true).0)
        .collect();
    let mut split_spearman = Vec::with_capacity(f_len);
    for (f, adj) in learned.iter().enumerate() {
        split_spearman.push(score(
            &off_diag(adj),
            &off_diag(&cfg.spec.propagation[f]),
        ));
    }
    let shared_adj = eval_meta_adjacency(
        shared_model
            .canonical_graph
            .as_ref()
            .expect("shared variant learns one canonical graph"),
        true,
    )
    .0;
    let mut shared_spearman = Vec::with_capacity(f_len);
    for g in &cfg.spec.propagation {
        shared_spearman.push(score(&off_diag(&shared_adj), &off_diag(g)));
    }

    let meta_graphs_differ = learned
        .windows(2)
        .any(|pair| {
            pair[0]
                .iter()
                .zip(pair[1].iter())
                .any(|(a, b)| (a - b).abs() > 1e-3)
        });
    let split_ok = split_spearman.iter().all(|&r| r > cfg.spearman_floor);
    let shared_matches_all = shared_spearman.iter().all(|&r| r > cfg.spearman_floor);
    let behavioral_pass = split_ok && meta_graphs_differ && !shared_matches_all;

    Ok(PropositionReport {
        draws: cfg.draws,
        split_isolation_draws: isolated,
        canonical_interference_draws: interfered,
        split_spearman,
        shared_spearman,
        meta_graphs_differ,
        structural_pass,
        behavioral_pass,
        vacuous: false,
        pass: structural_pass && behavioral_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_embeddings_give_known_softmax_rows() {
        // Refined source = target = I2: inner product is I2, ReLU passes it
        // through, and each row SoftMaxes to [e/(e+1), 1/(e+1)].
        let source = vec![1.0, 0.0, 0.0, 1.0];
        let target = source.clone();
        let zeros = vec![0.0; 4];
        let zb = vec![0.0; 2];
        let p = NaiveGraphParams {
            source: &source,
            target: &target,
            prom_w1: &zeros,
            prom_b1: &zb,
            prom_w2: &zeros,
            prom_b2: &zb,
        };
        let adj = naive_meta_adjacency(&p, 2, 2, false);
        let hi = 0.7310585786300049;
        let lo = 0.2689414213699951;
        let expect = [hi, lo, lo, hi];
        for (got, want) in adj.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_embeddings_give_uniform_rows() {
        let source = vec![0.0; 6];
        let target = vec![0.0; 6];
        let w = vec![0.0; 4];
        let b = vec![0.0; 2];
        let p = NaiveGraphParams {
            source: &source,
            target: &target,
            prom_w1: &w,
            prom_b1: &b,
            prom_w2: &w,
            prom_b2: &b,
        };
        let adj = naive_meta_adjacency(&p, 3, 2, true);
        for &v in &adj {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn prominence_net_with_zero_weights_outputs_bias() {
        let source = vec![0.3, -0.7, 1.1, 0.2];
        let w = vec![0.0; 4];
        let b1 = vec![0.0; 2];
        let b2 = vec![4.5, -1.0];
        let p = NaiveGraphParams {
            source: &source,
            target: &source,
            prom_w1: &w,
            prom_b1: &b1,
            prom_w2: &w,
            prom_b2: &b2,
        };
        let prom = naive_prominence(&p, 2, 2);
        assert_eq!(prom, vec![4.5, -1.0, 4.5, -1.0]);
    }

    #[test]
    fn scalar_diffusion_case_sums_to_twelve() {
        // N=1, C=1, K=1, all kernels 1, r=2, self-loop adjacency: every one
        // of the 2 k-steps contributes 3r, so the output is 12.
        let r = vec![2.0];
        let meta = vec![1.0];
        let fwd = vec![1.0];
        let bwd = vec![1.0];
        let kernels = vec![
            [vec![1.0], vec![1.0], vec![1.0]],
            [vec![1.0], vec![1.0], vec![1.0]],
        ];
        let out = naive_node_scale_feature(&r, 1, 1, 1, &meta, &fwd, &bwd, &kernels);
        assert_eq!(out, vec![12.0]);
    }

    #[test]
    fn feature_scale_uniform_adjacency_averages_features() {
        // K=0, identity kernel, uniform meta row: each feature's output is
        // the mean over features at that (node, timestamp, channel).
        let (n, t, f, c) = (1, 2, 3, 1);
        let r = vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0];
        let meta = vec![1.0 / 3.0; 9];
        let kernels = vec![vec![1.0]];
        let out = naive_feature_scale(&r, n, t, f, c, &meta, &kernels);
        for &v in &out[0..3] {
            assert!((v - 2.0).abs() < 1e-12);
        }
        for &v in &out[3..6] {
            assert!((v - 20.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_with_zero_queries_averages_values() {
        // Wq = 0 makes every score row uniform, so with Wv = I each output
        // token is the mean token.
        let tokens = vec![1.0, 0.0, 3.0, 0.0, 5.0, 6.0];
        let (l, c) = (3, 2);
        let zero = vec![0.0; 4];
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let out = naive_attention(&tokens, l, c, &zero, &eye, &eye);
        for i in 0..l {
            assert!((out[i * c] - 3.0).abs() < 1e-12);
            assert!((out[i * c + 1] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_differences_recover_quadratic_gradient() {
        let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = vec![0.5, -1.5, 2.0];
        let g = finite_diff_grad(&mut f, &x, 1e-5);
        for (gi, xi) in g.iter().zip(x.iter()) {
            assert!((gi - 2.0 * xi).abs() < 1e-9);
        }
    }

    #[test]
    fn spearman_handles_monotone_reversed_and_tied_inputs() {
        let inc = [1.0, 2.0, 5.0, 9.0];
        let exp = [0.1, 0.4, 0.5, 3.0];
        assert!((spearman(&inc, &exp).unwrap() - 1.0).abs() < 1e-12);
        let dec = [9.0, 5.0, 2.0, 1.0];
        assert!((spearman(&inc, &dec).unwrap() + 1.0).abs() < 1e-12);
        // ranks of [1,1,2] are [1.5, 1.5, 3]; against strictly increasing
        // data the correlation works out to sqrt(3)/2
        let tied = [1.0, 1.0, 2.0];
        let mono = [0.5, 0.7, 0.9];
        assert!((spearman(&tied, &mono).unwrap() - 0.8660254037844387).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[0.5, 0.7]).is_err());
    }

    #[test]
    fn ring_matrices_are_row_stochastic_with_disjoint_supports() {
        let g1 = ring_propagation(5, 1, 0.2);
        let g2 = ring_propagation(5, 2, 0.2);
        for g in [&g1, &g2] {
            for i in 0..5 {
                let sum: f64 = g.row(i).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert!(
                        g1[[i, j]] == 0.0 || g2[[i, j]] == 0.0,
                        "off-diagonal supports overlap at ({i}, {j})"
                    );
                    assert!(g1[[i, j]] != g2[[i, j]], "heterogeneity witness missing");
                }
            }
        }
    }

    #[test]
    fn noiseless_identity_propagation_freezes_every_node() {
        let spec = SyntheticSpec {
            n: 4,
            t: 20,
            propagation: vec![Array2::eye(4)],
            noise_std: 0.0,
            seed: 9,
        };
        let ds = synth_heterogeneous(&spec).unwrap();
        for i in 0..4 {
            let first = ds.values[[i, 0, 0]];
            for t in 1..20 {
                assert_eq!(ds.values[[i, t, 0]], first);
            }
        }
    }

    #[test]
    fn noiseless_uniform_propagation_averages_in_one_step() {
        let n = 5;
        let spec = SyntheticSpec {
            n,
            t: 6,
            propagation: vec![Array2::from_elem((n, n), 1.0 / n as f64)],
            noise_std: 0.0,
            seed: 10,
        };
        let ds = synth_heterogeneous(&spec).unwrap();
        let mean0: f64 = (0..n).map(|i| ds.values[[i, 0, 0]]).sum::<f64>() / n as f64;
        for i in 0..n {
            for t in 1..6 {
                assert!((ds.values[[i, t, 0]] - mean0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generator_rejects_bad_propagation_matrices() {
        // rows must sum to one
        let mut broken = ring_propagation(4, 1, 0.2);
        broken[[0, 0]] += 0.5;
        let spec = SyntheticSpec {
            n: 4,
            t: 10,
            propagation: vec![broken],
            noise_std: 0.1,
            seed: 1,
        };
        assert!(synth_heterogeneous(&spec).is_err());
        // multiple features must not all share one matrix
        let g = ring_propagation(4, 1, 0.2);
        let spec = SyntheticSpec {
            n: 4,
            t: 10,
            propagation: vec![g.clone(), g],
            noise_std: 0.1,
            seed: 1,
        };
        assert!(synth_heterogeneous(&spec).is_err());
    }

    #[test]
    fn generator_is_deterministic_in_the_seed() {
        let spec = SyntheticSpec::ring_pair(5, 50, 0.25, 77);
        let a = synth_heterogeneous(&spec).unwrap();
        let b = synth_heterogeneous(&spec).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn lag1_correlation_recovers_the_true_parents() {
        let spec = SyntheticSpec::ring_pair(5, 500, 0.25, 3407);
        let ds = synth_heterogeneous(&spec).unwrap();
        for f in 0..2 {
            let recovered =
                lag1_parent_recovery(&ds.values, f, &spec.propagation[f]).unwrap();
            assert!(
                recovered >= 0.8,
                "feature {f}: only {recovered} of stations rank a true parent first"
            );
        }
    }

    #[test]
    fn split_convolution_isolates_features_and_shared_one_leaks() {
        let (isolated, interfered) = check_structural(10, 404);
        assert_eq!(isolated, 10, "split stage must never leak across features");
        assert!(
            interfered >= 9,
            "shared stage leaked in only {interfered}/10 draws"
        );
    }


    #[test]
    fn single_feature_proposition_check_is_vacuous() {
        let cfg = PropositionConfig {
            spec: SyntheticSpec {
                n: 4,
                t: 30,
                propagation: vec![ring_propagation(4, 1, 0.2)],
                noise_std: 0.1,
                seed: 5,
            },
            draws: 10,
            epochs: 1,
            learning_rate: 0.01,
            pattern: TrainingPattern::Random,
            mask_ratio: 0.2,
            spearman_floor: 0.5,
        };
        let report = check_propositions(&cfg).unwrap();
        assert!(report.vacuous && report.pass);
    }
}
