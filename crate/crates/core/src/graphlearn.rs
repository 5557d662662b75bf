//! Learned meta-graphs with prominence refinement.
//!
//! Each graph is parameterized by a source and a target embedding table
//! (`m x d`). A prominence network (one tanh hidden layer of width `d`,
//! identity output) scores every source row, the refined source is the
//! element-wise product of embedding and score, and the adjacency is the
//! row-SoftMax of the ReLU'd inner products:
//!
//! `adj = SoftMax_rows(ReLU((source * prominence(source)) target^T))`
//!
//! Node-scale graphs keep one parameter set per feature over the `N`
//! stations; the feature-scale graph is a single set over the `F` features.
//! A ReLU row that comes out all zero SoftMaxes to the uniform row; that is
//! the documented cold-start state, not an error.

use ndarray::{Array1, Array2};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{Tape, Tensor, Var};

/// Parameters of one learned meta-graph over `m` vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGraphParams {
    pub source: Array2<f64>,
    pub target: Array2<f64>,
    pub prom_w1: Array2<f64>,
    pub prom_b1: Array1<f64>,
    pub prom_w2: Array2<f64>,
    pub prom_b2: Array1<f64>,
}

impl FeatureGraphParams {
    pub fn vertices(&self) -> usize {
        self.source.nrows()
    }

    pub fn dim(&self) -> usize {
        self.source.ncols()
    }
}

/// Node-scale parameter stack: one meta-graph per feature, all over the same
/// `n` stations. Features share nothing, which is what keeps their learned
/// structures independent.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeScaleParams {
    pub per_feature: Vec<FeatureGraphParams>,
}

/// Feature-scale parameters: a single meta-graph over the `f` features,
/// shared by every station.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaleParams {
    pub graph: FeatureGraphParams,
}

/// A realized row-stochastic meta-adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaAdjacency(pub Array2<f64>);

/// Embeddings and prominence weights drawn from a zero-mean Gaussian with
/// stdev `1/sqrt(d)`; biases start at zero.
pub fn init_feature_graph(m: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureGraphParams {
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
    let mut draw2 = |r: usize, c: usize| {
        Array2::from_shape_fn((r, c), |_| normal.sample(rng))
    };
    let source = draw2(m, d);
    let target = draw2(m, d);
    let prom_w1 = draw2(d, d);
    let prom_w2 = draw2(d, d);
    FeatureGraphParams {
        source,
        target,
        prom_w1,
        prom_b1: Array1::zeros(d),
        prom_w2,
        prom_b2: Array1::zeros(d),
    }
}

/// Seeded initialization of all node-scale graphs.
pub fn init_node_scale(n: usize, f: usize, d: usize, seed: u64) -> NodeScaleParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NodeScaleParams {
        per_feature: (0..f).map(|_| init_feature_graph(n, d, &mut rng)).collect(),
    }
}

/// Seeded initialization of the feature-scale graph.
pub fn init_feature_scale(f: usize, d: usize, seed: u64) -> FeatureScaleParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureScaleParams {
        graph: init_feature_graph(f, d, &mut rng),
    }
}

/// Tape handles for one meta-graph's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundGraphParams {
    pub source: Var,
    pub target: Var,
    pub prom_w1: Var,
    pub prom_b1: Var,
    pub prom_w2: Var,
    pub prom_b2: Var,
}

impl FeatureGraphParams {
    /// Inserts every parameter as a gradient-bearing leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundGraphParams {
        BoundGraphParams {
            source: tape.leaf(self.source.clone().into_dyn()),
            target: tape.leaf(self.target.clone().into_dyn()),
            prom_w1: tape.leaf(self.prom_w1.clone().into_dyn()),
            prom_b1: tape.leaf(self.prom_b1.clone().into_dyn()),
            prom_w2: tape.leaf(self.prom_w2.clone().into_dyn()),
            prom_b2: tape.leaf(self.prom_b2.clone().into_dyn()),
        }
    }
}

/// Prominence scores for every source row: `tanh(S W1 + b1) W2 + b2`.
pub fn compute_prominence(tape: &mut Tape, p: &BoundGraphParams) -> Var {
    let h = tape.matmul(p.source, p.prom_w1);
    let h = tape.add_bias(h, p.prom_b1);
    let h = tape.tanh(h);
    let o = tape.matmul(h, p.prom_w2);
    tape.add_bias(o, p.prom_b2)
}

/// Learned meta-adjacency on the tape. With `use_prominence` off the raw
/// source embedding feeds the inner products directly (the refinement
/// ablation).
pub fn learn_meta_adjacency(tape: &mut Tape, p: &BoundGraphParams, use_prominence: bool) -> Var {
    let refined = if use_prominence {
        let prom = compute_prominence(tape, p);
        tape.mul(p.source, prom)
    } else {
        p.source
    };
    let target_t = tape.permute(p.target, &[1, 0]);
    let logits = tape.matmul(refined, target_t);
    let gated = tape.relu(logits);
    tape.softmax_last(gated)
}

/// Evaluates a meta-adjacency eagerly (for export and inspection).
pub fn eval_meta_adjacency(params: &FeatureGraphParams, use_prominence: bool) -> MetaAdjacency {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let adj = learn_meta_adjacency(&mut tape, &bound, use_prominence);
    let value: Tensor = tape.value(adj).clone();
    let m = params.vertices();
    MetaAdjacency(
        value
            .into_dimensionality::<ndarray::Ix2>()
            .expect("adjacency is 2-d")
            .into_shape_with_order((m, m))
            .unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use ndarray::array;
    use rand::Rng;

    fn random_params(m: usize, d: usize, seed: u64) -> FeatureGraphParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw2 = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.random::<f64>() * 2.0 - 1.0)
        };
        let source = draw2(m, d);
        let target = draw2(m, d);
        let prom_w1 = draw2(d, d);
        let prom_w2 = draw2(d, d);
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        FeatureGraphParams {
            source,
            target,
            prom_w1,
            prom_b1: Array1::from_shape_fn(d, |_| rng2.random::<f64>() - 0.5),
            prom_w2,
            prom_b2: Array1::from_shape_fn(d, |_| rng2.random::<f64>() - 0.5),
        }
    }

    #[test]
    fn identity_embeddings_without_prominence_give_frozen_rows() {
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        let params = FeatureGraphParams {
            source: eye.clone(),
            target: eye,
            prom_w1: Array2::zeros((2, 2)),
            prom_b1: Array1::zeros(2),
            prom_w2: Array2::zeros((2, 2)),
            prom_b2: Array1::zeros(2),
        };
        let adj = eval_meta_adjacency(&params, false).0;
        let hi = 0.7310585786300049;
        let lo = 0.2689414213699951;
        assert!((adj[[0, 0]] - hi).abs() < 1e-12);
        assert!((adj[[0, 1]] - lo).abs() < 1e-12);
        assert!((adj[[1, 0]] - lo).abs() < 1e-12);
        assert!((adj[[1, 1]] - hi).abs() < 1e-12);
    }

    #[test]
    fn prominence_forced_to_one_matches_unrefined_adjacency() {
        let mut params = random_params(4, 3, 10);
        params.prom_w1.fill(0.0);
        params.prom_b1.fill(0.0);
        params.prom_w2.fill(0.0);
        params.prom_b2.fill(1.0);
        let refined = eval_meta_adjacency(&params, true).0;
        let raw = eval_meta_adjacency(&params, false).0;
        for (a, b) in refined.iter().zip(raw.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_are_stochastic_and_all_negative_logits_turn_uniform() {
        let params = random_params(5, 4, 3);
        let adj = eval_meta_adjacency(&params, true).0;
        for row in adj.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        // Embeddings chosen so every inner product is negative: ReLU zeroes
        // the whole row and SoftMax backs off to uniform.
        let mut anti = random_params(3, 2, 4);
        anti.source = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        anti.target = array![[-1.0, -1.0], [-2.0, -1.0], [-1.0, -3.0]];
        let adj = eval_meta_adjacency(&anti, false).0;
        for &v in adj.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_path_matches_naive_oracle_on_random_instances() {
        for seed in 0..20 {
            let m = 2 + (seed as usize % 4);
            let d = 2 + (seed as usize % 3);
            let params = random_params(m, d, 100 + seed);
            let got = eval_meta_adjacency(&params, true).0;

            let src: Vec<f64> = params.source.iter().cloned().collect();
            let tgt: Vec<f64> = params.target.iter().cloned().collect();
            let w1: Vec<f64> = params.prom_w1.iter().cloned().collect();
            let b1: Vec<f64> = params.prom_b1.iter().cloned().collect();
            let w2: Vec<f64> = params.prom_w2.iter().cloned().collect();
            let b2: Vec<f64> = params.prom_b2.iter().cloned().collect();
            let naive = oracle::naive_meta_adjacency(
                &oracle::NaiveGraphParams {
                    source: &src,
                    target: &tgt,
                    prom_w1: &w1,
                    prom_b1: &b1,
                    prom_w2: &w2,
                    prom_b2: &b2,
                },
                m,
                d,
                true,
            );
            for (i, (a, b)) in got.iter().zip(naive.iter()).enumerate() {
                assert!(
                    (a - b).abs() < 1e-8,
                    "seed {seed} entry {i}: tape {a} vs oracle {b}"
                );
            }
        }
    }

    #[test]
    fn per_feature_parameters_are_independent() {
        let stack = init_node_scale(4, 3, 8, 77);
        let before = eval_meta_adjacency(&stack.per_feature[0], true);
        let mut perturbed = stack.clone();
        perturbed.per_feature[2].source += 10.0;
        perturbed.per_feature[2].prom_b2 += 3.0;
        let after = eval_meta_adjacency(&perturbed.per_feature[0], true);
        assert_eq!(before.0, after.0, "feature 0 must not see feature 2 edits");
    }

    #[test]
    fn initialization_is_seeded_and_scaled() {
        let a = init_node_scale(6, 2, 16, 5);
        let b = init_node_scale(6, 2, 16, 5);
        assert_eq!(a, b);
        let c = init_node_scale(6, 2, 16, 6);
        assert_ne!(a, c);
        // stdev of the pooled embedding entries tracks 1/sqrt(d) = 0.25
        let vals: Vec<f64> = a
            .per_feature
            .iter()
            .flat_map(|p| p.source.iter().chain(p.target.iter()).cloned())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((var.sqrt() - 0.25).abs() < 0.05, "stdev {}", var.sqrt());
    }

    #[test]
    fn adjacency_gradients_match_finite_differences() {
        let params = random_params(3, 2, 55);
        let mut weight_rng = ChaCha8Rng::seed_from_u64(9);
        let weights =
            Array2::from_shape_fn((3, 3), |_| weight_rng.random::<f64>() * 2.0 - 1.0);

        let flat: Vec<f64> = params
            .source
            .iter()
            .chain(params.target.iter())
            .chain(params.prom_w1.iter())
            .chain(params.prom_b1.iter())
            .chain(params.prom_w2.iter())
            .chain(params.prom_b2.iter())
            .cloned()
            .collect();
        let rebuild = |x: &[f64]| -> FeatureGraphParams {
            let mut pos = 0usize;
            let mut take = |len: usize| -> Vec<f64> {
                let out = x[pos..pos + len].to_vec();
                pos += len;
                out
            };
            let source = Array2::from_shape_vec((3, 2), take(6)).unwrap();
            let target = Array2::from_shape_vec((3, 2), take(6)).unwrap();
            let prom_w1 = Array2::from_shape_vec((2, 2), take(4)).unwrap();
            let prom_b1 = Array1::from_vec(take(2));
            let prom_w2 = Array2::from_shape_vec((2, 2), take(4)).unwrap();
            let prom_b2 = Array1::from_vec(take(2));
            FeatureGraphParams {
                source,
                target,
                prom_w1,
                prom_b1,
                prom_w2,
                prom_b2,
            }
        };

        let loss_of = |p: &FeatureGraphParams| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape);
            let adj = learn_meta_adjacency(&mut tape, &bound, true);
            let w = tape.constant(weights.clone().into_dyn());
            let prod = tape.mul(adj, w);
            let root = tape.sum_all(prod);
            let grads = tape.backward(root);
            let flat_grad: Vec<f64> = [
                bound.source,
                bound.target,
                bound.prom_w1,
                bound.prom_b1,
                bound.prom_w2,
                bound.prom_b2,
            ]
            .iter()
            .flat_map(|v| {
                grads
                    .get(*v)
                    .expect("gradient present")
                    .iter()
                    .cloned()
                    .collect::<Vec<f64>>()
            })
            .collect();
            (tape.scalar(root), Some(flat_grad))
        };

        let (_, analytic) = loss_of(&params);
        let analytic = analytic.unwrap();
        let mut f = |x: &[f64]| loss_of(&rebuild(x)).0;
        let fd = oracle::finite_diff_grad(&mut f, &flat, 1e-5);
        let err = oracle::max_relative_error(&analytic, &fd);
        assert!(err < 1e-4, "max relative gradient error {err}");
    }
}
