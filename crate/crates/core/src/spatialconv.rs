//! Diffusion convolutions over the station graph and the feature graph.
//!
//! Every convolution sums three propagation roles per diffusion step `k`:
//! the learned meta-adjacency (applied once, never raised to a power), and
//! the forward / backward transition matrices of the given adjacency raised
//! to the actual power `k` (the `k = 0` power is the identity). Each role at
//! each step owns its own channel-mixing kernel.
//!
//! Three variants share that recipe:
//!
//! * **node-scale** — per feature, signals are `C`-wide per station, the
//!   meta-adjacency is that feature's learned station graph, kernels are
//!   `C x C`. Features never mix here.
//! * **feature-scale** — per (station, step) the `F` feature channels mix
//!   through one shared learned `F x F` graph; there are no transition
//!   roles because the given adjacency says nothing about features.
//!   Stations never mix here.
//! * **canonical** — the un-split baseline: signals are `F * C`-wide per
//!   station, one learned station graph (optional), kernels are
//!   `(F*C) x (F*C)`. Everything mixes with everything.

use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datamodel::Transitions;
use crate::tape::{Tape, Var};

/// Channel-mixing kernels for the node-scale convolution:
/// `per_feature[f][k]` holds the three `C x C` matrices for diffusion step
/// `k` of feature `f`, ordered (learned, forward, backward).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeKernels {
    pub per_feature: Vec<Vec<[Array2<f64>; 3]>>,
}

/// Kernels for the feature-scale convolution: one `C x C` matrix per
/// diffusion step (single learned role).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureKernels {
    pub per_step: Vec<Array2<f64>>,
}

/// Kernels for the canonical convolution: `per_step[k]` holds three
/// `(F*C) x (F*C)` matrices when a learned adjacency participates, two
/// (forward, backward) when only the given adjacency does.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalKernels {
    pub per_step: Vec<Vec<Array2<f64>>>,
}

fn gaussian_kernel(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).unwrap();
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

/// Node-scale kernels for `f_len` features and steps `0..=k_max`, drawn from
/// a zero-mean Gaussian with stdev `1/sqrt(C)`.
pub fn init_node_kernels(f_len: usize, k_max: usize, c: usize, seed: u64) -> NodeKernels {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NodeKernels {
        per_feature: (0..f_len)
            .map(|_| {
                (0..=k_max)
                    .map(|_| {
                        [
                            gaussian_kernel(c, c, &mut rng),
                            gaussian_kernel(c, c, &mut rng),
                            gaussian_kernel(c, c, &mut rng),
                        ]
                    })
                    .collect()
            })
            .collect(),
    }
}

/// Feature-scale kernels for steps `0..=k_max`.
pub fn init_feature_kernels(k_max: usize, c: usize, seed: u64) -> FeatureKernels {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureKernels {
        per_step: (0..=k_max).map(|_| gaussian_kernel(c, c, &mut rng)).collect(),
    }
}

/// Canonical kernels over `width = F * C` channels; three roles per step
/// with a learned adjacency, two without.
pub fn init_canonical_kernels(
    k_max: usize,
    width: usize,
    learned: bool,
    seed: u64,
) -> CanonicalKernels {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roles = if learned { 3 } else { 2 };
    CanonicalKernels {
        per_step: (0..=k_max)
            .map(|_| (0..roles).map(|_| gaussian_kernel(width, width, &mut rng)).collect())
            .collect(),
    }
}

/// Tape handles for the node-scale kernels.
#[derive(Debug, Clone)]
pub struct BoundNodeKernels {
    pub per_feature: Vec<Vec<[Var; 3]>>,
}

/// Tape handles for the feature-scale kernels.
#[derive(Debug, Clone)]
pub struct BoundFeatureKernels {
    pub per_step: Vec<Var>,
}

/// Tape handles for the canonical kernels.
#[derive(Debug, Clone)]
pub struct BoundCanonicalKernels {
    pub per_step: Vec<Vec<Var>>,
}

impl NodeKernels {
    pub fn bind(&self, tape: &mut Tape) -> BoundNodeKernels {
        BoundNodeKernels {
            per_feature: self
                .per_feature
                .iter()
                .map(|steps| {
                    steps
                        .iter()
                        .map(|roles| {
                            [
                                tape.leaf(roles[0].clone().into_dyn()),
                                tape.leaf(roles[1].clone().into_dyn()),
                                tape.leaf(roles[2].clone().into_dyn()),
                            ]
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

impl FeatureKernels {
    pub fn bind(&self, tape: &mut Tape) -> BoundFeatureKernels {
        BoundFeatureKernels {
            per_step: self
                .per_step
                .iter()
                .map(|k| tape.leaf(k.clone().into_dyn()))
                .collect(),
        }
    }
}

impl CanonicalKernels {
    pub fn bind(&self, tape: &mut Tape) -> BoundCanonicalKernels {
        BoundCanonicalKernels {
            per_step: self
                .per_step
                .iter()
                .map(|roles| roles.iter().map(|k| tape.leaf(k.clone().into_dyn())).collect())
                .collect(),
        }
    }
}

/// Transition matrices of the given adjacency as tape constants (they carry
/// no gradient).
#[derive(Debug, Clone, Copy)]
pub struct BoundTransitions {
    pub forward: Var,
    pub backward: Var,
}

pub fn bind_transitions(tape: &mut Tape, trans: &Transitions) -> BoundTransitions {
    BoundTransitions {
        forward: tape.constant(trans.forward.clone().into_dyn()),
        backward: tape.constant(trans.backward.clone().into_dyn()),
    }
}

fn dims4(tape: &Tape, r: Var) -> (usize, usize, usize, usize) {
    let shape = tape.value(r).shape().to_vec();
    assert_eq!(shape.len(), 4, "expect [stations, steps, features, channels]");
    (shape[0], shape[1], shape[2], shape[3])
}

fn accumulate(tape: &mut Tape, acc: Option<Var>, term: Var) -> Option<Var> {
    Some(match acc {
        Some(a) => tape.add(a, term),
        None => term,
    })
}

/// Node-scale diffusion convolution over `[N, T, F, C]`. `metas[f]` is the
/// learned station adjacency of feature `f`; the output keeps the input
/// shape. Each feature's slice is processed by its own parameters, so edits
/// to one feature's input or graph can never leak into another feature's
/// output.
pub fn node_scale_conv(
    tape: &mut Tape,
    r: Var,
    metas: &[Var],
    trans: &BoundTransitions,
    kernels: &BoundNodeKernels,
) -> Var {
    let (n, t_len, f_len, c) = dims4(tape, r);
    assert_eq!(metas.len(), f_len, "one learned graph per feature");
    assert_eq!(kernels.per_feature.len(), f_len, "one kernel stack per feature");
    let mut feature_outputs = Vec::with_capacity(f_len);
    for f in 0..f_len {
        let rf = tape.slice_axis(r, 2, f, 1);
        let rf_flat = tape.reshape(rf, &[n, t_len * c]);
        let meta_r = tape.matmul(metas[f], rf_flat);
        let mut fwd_pow = rf_flat;
        let mut bwd_pow = rf_flat;
        let mut acc: Option<Var> = None;
        for (k, roles) in kernels.per_feature[f].iter().enumerate() {
            if k > 0 {
                fwd_pow = tape.matmul(trans.forward, fwd_pow);
                bwd_pow = tape.matmul(trans.backward, bwd_pow);
            }
            for (base, theta) in [(meta_r, roles[0]), (fwd_pow, roles[1]), (bwd_pow, roles[2])] {
                let rows = tape.reshape(base, &[n * t_len, c]);
                let term = tape.matmul(rows, theta);
                acc = accumulate(tape, acc, term);
            }
        }
        feature_outputs.push(tape.reshape(acc.expect("at least one step"), &[n, t_len, 1, c]));
    }
    tape.concat(&feature_outputs, 2)
}

/// Feature-scale diffusion convolution over `[N, T, F, C]` with one shared
/// learned `F x F` adjacency. Mixing happens only across the feature axis of
/// each (station, step) cell, so stations stay independent.
pub fn feature_scale_conv(
    tape: &mut Tape,
    r: Var,
    meta: Var,
    kernels: &BoundFeatureKernels,
) -> Var {
    let (n, t_len, f_len, c) = dims4(tape, r);
    let by_feature = tape.permute(r, &[2, 0, 1, 3]);
    let flat = tape.reshape(by_feature, &[f_len, n * t_len * c]);
    let propagated = tape.matmul(meta, flat);
    let prop4 = tape.reshape(propagated, &[f_len, n, t_len, c]);
    let back = tape.permute(prop4, &[1, 2, 0, 3]);
    let rows = tape.reshape(back, &[n * t_len * f_len, c]);
    let mut acc: Option<Var> = None;
    for theta in &kernels.per_step {
        let term = tape.matmul(rows, *theta);
        acc = accumulate(tape, acc, term);
    }
    tape.reshape(acc.expect("at least one step"), &[n, t_len, f_len, c])
}

/// Canonical diffusion convolution: the `[N, T, F, C]` input is treated as
/// an `F * C`-wide signal per station, mixed by `(F*C) x (F*C)` kernels.
/// `meta` is the single learned station adjacency; pass `None` to run on the
/// given adjacency alone (the kernels must then carry two roles per step).
pub fn canonical_conv(
    tape: &mut Tape,
    r: Var,
    meta: Option<Var>,
    trans: &BoundTransitions,
    kernels: &BoundCanonicalKernels,
) -> Var {
    let (n, t_len, f_len, c) = dims4(tape, r);
    let width = f_len * c;
    let flat = tape.reshape(r, &[n, t_len * width]);
    let meta_r = meta.map(|m| tape.matmul(m, flat));
    let mut fwd_pow = flat;
    let mut bwd_pow = flat;
    let mut acc: Option<Var> = None;
    for (k, roles) in kernels.per_step.iter().enumerate() {
        if k > 0 {
            fwd_pow = tape.matmul(trans.forward, fwd_pow);
            bwd_pow = tape.matmul(trans.backward, bwd_pow);
        }
        let bases: Vec<(Var, Var)> = match (meta_r, roles.len()) {
            (Some(m), 3) => vec![(m, roles[0]), (fwd_pow, roles[1]), (bwd_pow, roles[2])],
            (None, 2) => vec![(fwd_pow, roles[0]), (bwd_pow, roles[1])],
            _ => panic!("kernel role count does not match adjacency set"),
        };
        for (base, theta) in bases {
            let rows = tape.reshape(base, &[n * t_len, width]);
            let term = tape.matmul(rows, theta);
            acc = accumulate(tape, acc, term);
        }
    }
    tape.reshape(acc.expect("at least one step"), &[n, t_len, f_len, c])
}
