//! The assembled imputation model: layered temporal-then-spatial
//! representation learning over windows, masked-reconstruction training,
//! and whole-series imputation.
//!
//! Layer wiring (all shapes `[N, T_w, F, C]` after projection): each layer
//! projects the original window signal to channels with its own per-feature
//! affine map, adds the previous layer's output when there is one, runs
//! cross-temporal attention, the spatial convolutions the variant asks for,
//! fuses the branches back to `C` channels, and finishes with cross-feature
//! attention. The learned meta-graphs are shared by every layer; attention
//! projections and diffusion kernels are per layer. A per-feature `C -> 1`
//! head turns the last layer's state into the prediction.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, s};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_feature_attention, cross_temporal_attention, fuse, init_attn, init_fusion, AttnParams,
    BoundAttnParams, BoundFusionParams, FusionParams,
};
use crate::datamodel::{
    apply_norm_stats, denormalize, transitions, window_split, NormStats, SpatioTemporalDataset,
    Transitions, Window,
};
use crate::error::{Error, Result};
use crate::graphlearn::{
    init_feature_graph, init_feature_scale, init_node_scale, learn_meta_adjacency,
    BoundGraphParams, FeatureGraphParams, FeatureScaleParams, NodeScaleParams,
};
use crate::masking::{sample_training_mask, TrainingPattern};
use crate::spatialconv::{
    bind_transitions, canonical_conv, feature_scale_conv, init_canonical_kernels,
    init_feature_kernels, init_node_kernels, node_scale_conv, BoundCanonicalKernels,
    BoundFeatureKernels, BoundNodeKernels, BoundTransitions, CanonicalKernels, FeatureKernels,
    NodeKernels,
};
use crate::tape::{Tape, Tensor, Var};

/// Which spatial stage(s) a variant runs between the two attention stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpatialMode {
    /// The split design: a per-feature station graph and/or a shared
    /// feature graph, each with its own diffusion convolution.
    SplitScales { node_scale: bool, feature_scale: bool },
    /// The un-split baseline: one diffusion convolution over
    /// `F * C`-wide signals, with a learned station graph or the given
    /// adjacency alone.
    Canonical { learned: bool },
    /// No spatial stage at all.
    None,
}

/// Architectural switches. The full model enables everything; ablations
/// turn pieces off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub cross_temporal: bool,
    pub cross_feature: bool,
    pub prominence: bool,
    pub spatial: SpatialMode,
}

impl VariantSpec {
    pub const FULL: VariantSpec = VariantSpec {
        cross_temporal: true,
        cross_feature: true,
        prominence: true,
        spatial: SpatialMode::SplitScales {
            node_scale: true,
            feature_scale: true,
        },
    };

    /// Number of spatial branches this variant produces.
    pub fn spatial_parts(&self) -> usize {
        match self.spatial {
            SpatialMode::SplitScales {
                node_scale,
                feature_scale,
            } => usize::from(node_scale) + usize::from(feature_scale),
            SpatialMode::Canonical { .. } => 1,
            SpatialMode::None => 0,
        }
    }

    /// Width multiplier of the fusion input: the temporal branch plus every
    /// spatial branch. 1 means fusion is skipped entirely.
    pub fn fusion_parts(&self) -> usize {
        1 + self.spatial_parts()
    }

    pub fn uses_node_graphs(&self) -> bool {
        matches!(self.spatial, SpatialMode::SplitScales { node_scale: true, .. })
    }

    pub fn uses_feature_graph(&self) -> bool {
        matches!(
            self.spatial,
            SpatialMode::SplitScales {
                feature_scale: true,
                ..
            }
        )
    }

    pub fn uses_canonical_graph(&self) -> bool {
        matches!(self.spatial, SpatialMode::Canonical { learned: true })
    }
}

/// Structural hyperparameters; fixed at model creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n: usize,
    pub f: usize,
    pub c: usize,
    pub d: usize,
    pub k: usize,
    pub l: usize,
    pub t_w: usize,
    pub variant: VariantSpec,
}

impl ModelConfig {
    /// Defaults: 16 channels, embedding width 16, 2 diffusion steps,
    /// 2 layers, 24-step windows.
    pub fn new(n: usize, f: usize, variant: VariantSpec) -> Self {
        ModelConfig {
            n,
            f,
            c: 16,
            d: 16,
            k: 2,
            l: 2,
            t_w: 24,
            variant,
        }
    }
}

/// Per-layer parameters. Options mirror the variant: a disabled stage owns
/// no weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub proj_w: Array2<f64>,
    pub proj_b: Array2<f64>,
    pub ct: Option<AttnParams>,
    pub node_kernels: Option<NodeKernels>,
    pub feature_kernels: Option<FeatureKernels>,
    pub canonical_kernels: Option<CanonicalKernels>,
    pub fusion: Option<FusionParams>,
    pub cf: Option<AttnParams>,
}

/// The complete parameter set of one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GsliModel {
    pub config: ModelConfig,
    pub node_graphs: Option<NodeScaleParams>,
    pub feature_graph: Option<FeatureScaleParams>,
    pub canonical_graph: Option<FeatureGraphParams>,
    pub layers: Vec<LayerParams>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

/// SplitMix-style seed derivation so every parameter group and every
/// training step draws from its own deterministic stream.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    mix(mix(base ^ mix(stream)) ^ index)
}

impl GsliModel {
    /// Fresh model with Gaussian-initialized weights; deterministic in
    /// `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> GsliModel {
        let v = config.variant;
        let (n, f, c, d, k, l) = (config.n, config.f, config.c, config.d, config.k, config.l);
        let node_graphs = v
            .uses_node_graphs()
            .then(|| init_node_scale(n, f, d, derive_seed(seed, 1, 0)));
        let feature_graph = v
            .uses_feature_graph()
            .then(|| init_feature_scale(f, d, derive_seed(seed, 2, 0)));
        let canonical_graph = v.uses_canonical_graph().then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3, 0));
            init_feature_graph(n, d, &mut rng)
        });

        let mut layers = Vec::with_capacity(l);
        for li in 0..l {
            let ls = |stream: u64| derive_seed(seed, 10 + stream, li as u64);
            let mut proj_rng = ChaCha8Rng::seed_from_u64(ls(0));
            let normal = Normal::new(0.0, 1.0 / (c as f64).sqrt()).unwrap();
            let proj_w = Array2::from_shape_fn((f, c), |_| normal.sample(&mut proj_rng));
            let proj_b = Array2::zeros((f, c));
            let (node_kernels, feature_kernels, canonical_kernels) = match v.spatial {
                SpatialMode::SplitScales {
                    node_scale,
                    feature_scale,
                } => (
                    node_scale.then(|| init_node_kernels(f, k, c, ls(1))),
                    feature_scale.then(|| init_feature_kernels(k, c, ls(2))),
                    None,
                ),
                SpatialMode::Canonical { learned } => {
                    (None, None, Some(init_canonical_kernels(k, f * c, learned, ls(3))))
                }
                SpatialMode::None => (None, None, None),
            };
            let m = v.fusion_parts();
            layers.push(LayerParams {
                proj_w,
                proj_b,
                ct: v.cross_temporal.then(|| init_attn(c, ls(4))),
                node_kernels,
                feature_kernels,
                canonical_kernels,
                fusion: (m > 1).then(|| init_fusion(m, c, ls(5))),
                cf: v.cross_feature.then(|| init_attn(c, ls(6))),
            });
        }

        let mut head_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4, 0));
        let normal = Normal::new(0.0, 1.0 / (c as f64).sqrt()).unwrap();
        GsliModel {
            config: config.clone(),
            node_graphs,
            feature_graph,
            canonical_graph,
            layers,
            head_w: Array2::from_shape_fn((f, c), |_| normal.sample(&mut head_rng)),
            head_b: Array1::zeros(f),
        }
    }

    /// Calls `visit` with every parameter tensor in a fixed canonical
    /// order. [`bind_model`] binds leaves in the same order under the same
    /// names, which is what lets the optimizer match gradients to
    /// parameters positionally.
    pub fn visit(&self, visit: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        fn graph(prefix: &str, g: &FeatureGraphParams, v: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
            v(&format!("{prefix}.source"), g.source.view().into_dyn());
            v(&format!("{prefix}.target"), g.target.view().into_dyn());
            v(&format!("{prefix}.prom_w1"), g.prom_w1.view().into_dyn());
            v(&format!("{prefix}.prom_b1"), g.prom_b1.view().into_dyn());
            v(&format!("{prefix}.prom_w2"), g.prom_w2.view().into_dyn());
            v(&format!("{prefix}.prom_b2"), g.prom_b2.view().into_dyn());
        }
        if let Some(ng) = &self.node_graphs {
            for (f, g) in ng.per_feature.iter().enumerate() {
                graph(&format!("graph.node.f{f}"), g, visit);
            }
        }
        if let Some(fg) = &self.feature_graph {
            graph("graph.feature", &fg.graph, visit);
        }
        if let Some(cg) = &self.canonical_graph {
            graph("graph.canonical", cg, visit);
        }
        for (li, layer) in self.layers.iter().enumerate() {
            let p = format!("layer{li}");
            visit(&format!("{p}.proj.w"), layer.proj_w.view().into_dyn());
            visit(&format!("{p}.proj.b"), layer.proj_b.view().into_dyn());
            if let Some(a) = &layer.ct {
                visit(&format!("{p}.ct.wq"), a.wq.view().into_dyn());
                visit(&format!("{p}.ct.wk"), a.wk.view().into_dyn());
                visit(&format!("{p}.ct.wv"), a.wv.view().into_dyn());
            }
            if let Some(nk) = &layer.node_kernels {
                for (f, steps) in nk.per_feature.iter().enumerate() {
                    for (k, roles) in steps.iter().enumerate() {
                        visit(
                            &format!("{p}.node_kernels.f{f}.k{k}.learned"),
                            roles[0].view().into_dyn(),
                        );
                        visit(
                            &format!("{p}.node_kernels.f{f}.k{k}.forward"),
                            roles[1].view().into_dyn(),
                        );
                        visit(
                            &format!("{p}.node_kernels.f{f}.k{k}.backward"),
                            roles[2].view().into_dyn(),
                        );
                    }
                }
            }
            if let Some(fk) = &layer.feature_kernels {
                for (k, theta) in fk.per_step.iter().enumerate() {
                    visit(&format!("{p}.feature_kernels.k{k}"), theta.view().into_dyn());
                }
            }
            if let Some(ck) = &layer.canonical_kernels {
                for (k, roles) in ck.per_step.iter().enumerate() {
                    for (ri, theta) in roles.iter().enumerate() {
                        visit(
                            &format!("{p}.canonical_kernels.k{k}.role{ri}"),
                            theta.view().into_dyn(),
                        );
                    }
                }
            }
            if let Some(fu) = &layer.fusion {
                visit(&format!("{p}.fusion.w"), fu.w.view().into_dyn());
                visit(&format!("{p}.fusion.b"), fu.b.view().into_dyn());
            }
            if let Some(a) = &layer.cf {
                visit(&format!("{p}.cf.wq"), a.wq.view().into_dyn());
                visit(&format!("{p}.cf.wk"), a.wk.view().into_dyn());
                visit(&format!("{p}.cf.wv"), a.wv.view().into_dyn());
            }
        }
        visit("head.w", self.head_w.view().into_dyn());
        visit("head.b", self.head_b.view().into_dyn());
    }

    /// Mutable traversal in the same canonical order as [`visit`].
    pub fn visit_mut(&mut self, visit: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        fn graph(
            prefix: &str,
            g: &mut FeatureGraphParams,
            v: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>),
        ) {
            v(&format!("{prefix}.source"), g.source.view_mut().into_dyn());
            v(&format!("{prefix}.target"), g.target.view_mut().into_dyn());
            v(&format!("{prefix}.prom_w1"), g.prom_w1.view_mut().into_dyn());
            v(&format!("{prefix}.prom_b1"), g.prom_b1.view_mut().into_dyn());
            v(&format!("{prefix}.prom_w2"), g.prom_w2.view_mut().into_dyn());
            v(&format!("{prefix}.prom_b2"), g.prom_b2.view_mut().into_dyn());
        }
        if let Some(ng) = &mut self.node_graphs {
            for (f, g) in ng.per_feature.iter_mut().enumerate() {
                graph(&format!("graph.node.f{f}"), g, visit);
            }
        }
        if let Some(fg) = &mut self.feature_graph {
            graph("graph.feature", &mut fg.graph, visit);
        }
        if let Some(cg) = &mut self.canonical_graph {
            graph("graph.canonical", cg, visit);
        }
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("layer{li}");
            visit(&format!("{p}.proj.w"), layer.proj_w.view_mut().into_dyn());
            visit(&format!("{p}.proj.b"), layer.proj_b.view_mut().into_dyn());
            if let Some(a) = &mut layer.ct {
                visit(&format!("{p}.ct.wq"), a.wq.view_mut().into_dyn());
                visit(&format!("{p}.ct.wk"), a.wk.view_mut().into_dyn());
                visit(&format!("{p}.ct.wv"), a.wv.view_mut().into_dyn());
            }
            if let Some(nk) = &mut layer.node_kernels {
                for (f, steps) in nk.per_feature.iter_mut().enumerate() {
                    for (k, roles) in steps.iter_mut().enumerate() {
                        visit(
                            &format!("{p}.node_kernels.f{f}.k{k}.learned"),
                            roles[0].view_mut().into_dyn(),
                        );
                        visit(
                            &format!("{p}.node_kernels.f{f}.k{k}.forward"),
                            roles[1].view_mut().into_dyn(),
                        );
                        visit(
                            &format!("{p}.node_kernels.f{f}.k{k}.backward"),
                            roles[2].view_mut().into_dyn(),
                        );
                    }
                }
            }
            if let Some(fk) = &mut layer.feature_kernels {
                for (k, theta) in fk.per_step.iter_mut().enumerate() {
                    visit(&format!("{p}.feature_kernels.k{k}"), theta.view_mut().into_dyn());
                }
            }
            if let Some(ck) = &mut layer.canonical_kernels {
                for (k, roles) in ck.per_step.iter_mut().enumerate() {
                    for (ri, theta) in roles.iter_mut().enumerate() {
                        visit(
                            &format!("{p}.canonical_kernels.k{k}.role{ri}"),
                            theta.view_mut().into_dyn(),
                        );
                    }
                }
            }
            if let Some(fu) = &mut layer.fusion {
                visit(&format!("{p}.fusion.w"), fu.w.view_mut().into_dyn());
                visit(&format!("{p}.fusion.b"), fu.b.view_mut().into_dyn());
            }
            if let Some(a) = &mut layer.cf {
                visit(&format!("{p}.cf.wq"), a.wq.view_mut().into_dyn());
                visit(&format!("{p}.cf.wk"), a.wk.view_mut().into_dyn());
                visit(&format!("{p}.cf.wv"), a.wv.view_mut().into_dyn());
            }
        }
        visit("head.w", self.head_w.view_mut().into_dyn());
        visit("head.b", self.head_b.view_mut().into_dyn());
    }
}

/// Tape handles of one layer's parameters.
pub struct BoundLayer {
    pub proj_w: Var,
    pub proj_b: Var,
    pub ct: Option<BoundAttnParams>,
    pub node_kernels: Option<BoundNodeKernels>,
    pub feature_kernels: Option<BoundFeatureKernels>,
    pub canonical_kernels: Option<BoundCanonicalKernels>,
    pub fusion: Option<BoundFusionParams>,
    pub cf: Option<BoundAttnParams>,
}

/// Everything [`forward`] needs on the tape: parameter leaves (listed in
/// `entries` under their canonical names), the meta-adjacencies already
/// computed from the bound graph parameters, and the given-graph
/// transitions as constants.
pub struct BoundModel {
    pub variant: VariantSpec,
    pub entries: Vec<(String, Var)>,
    pub node_metas: Vec<Var>,
    pub feature_meta: Option<Var>,
    pub canonical_meta: Option<Var>,
    pub transitions: BoundTransitions,
    pub layers: Vec<BoundLayer>,
    pub head_w: Var,
    pub head_b: Var,
}

/// Binds every parameter as a gradient-bearing leaf (same order and names
/// as [`GsliModel::visit`]) and evaluates the shared meta-adjacencies.
pub fn bind_model(tape: &mut Tape, model: &GsliModel, trans: &Transitions) -> BoundModel {
    fn leaf(tape: &mut Tape, entries: &mut Vec<(String, Var)>, name: String, value: Tensor) -> Var {
        let v = tape.leaf(value);
        entries.push((name, v));
        v
    }
    fn bind_graph(
        tape: &mut Tape,
        entries: &mut Vec<(String, Var)>,
        prefix: &str,
        g: &FeatureGraphParams,
    ) -> BoundGraphParams {
        BoundGraphParams {
            source: leaf(tape, entries, format!("{prefix}.source"), g.source.clone().into_dyn()),
            target: leaf(tape, entries, format!("{prefix}.target"), g.target.clone().into_dyn()),
            prom_w1: leaf(tape, entries, format!("{prefix}.prom_w1"), g.prom_w1.clone().into_dyn()),
            prom_b1: leaf(tape, entries, format!("{prefix}.prom_b1"), g.prom_b1.clone().into_dyn()),
            prom_w2: leaf(tape, entries, format!("{prefix}.prom_w2"), g.prom_w2.clone().into_dyn()),
            prom_b2: leaf(tape, entries, format!("{prefix}.prom_b2"), g.prom_b2.clone().into_dyn()),
        }
    }

    let mut entries: Vec<(String, Var)> = Vec::new();
    let variant = model.config.variant;
    let use_prom = variant.prominence;
    let mut node_metas = Vec::new();
    if let Some(ng) = &model.node_graphs {
        for (f, g) in ng.per_feature.iter().enumerate() {
            let bound = bind_graph(tape, &mut entries, &format!("graph.node.f{f}"), g);
            node_metas.push(learn_meta_adjacency(tape, &bound, use_prom));
        }
    }
    let feature_meta = model.feature_graph.as_ref().map(|fg| {
        let bound = bind_graph(tape, &mut entries, "graph.feature", &fg.graph);
        learn_meta_adjacency(tape, &bound, use_prom)
    });
    let canonical_meta = model.canonical_graph.as_ref().map(|cg| {
        let bound = bind_graph(tape, &mut entries, "graph.canonical", cg);
        learn_meta_adjacency(tape, &bound, use_prom)
    });

    let mut layers = Vec::with_capacity(model.layers.len());
    for (li, layer) in model.layers.iter().enumerate() {
        let p = format!("layer{li}");
        let proj_w = leaf(tape, &mut entries, format!("{p}.proj.w"), layer.proj_w.clone().into_dyn());
        let proj_b = leaf(tape, &mut entries, format!("{p}.proj.b"), layer.proj_b.clone().into_dyn());
        let ct = layer.ct.as_ref().map(|a| BoundAttnParams {
            wq: leaf(tape, &mut entries, format!("{p}.ct.wq"), a.wq.clone().into_dyn()),
            wk: leaf(tape, &mut entries, format!("{p}.ct.wk"), a.wk.clone().into_dyn()),
            wv: leaf(tape, &mut entries, format!("{p}.ct.wv"), a.wv.clone().into_dyn()),
        });
        let node_kernels = layer.node_kernels.as_ref().map(|nk| BoundNodeKernels {
            per_feature: nk
                .per_feature
                .iter()
                .enumerate()
                .map(|(f, steps)| {
                    steps
                        .iter()
                        .enumerate()
                        .map(|(k, roles)| {
                            [
                                leaf(
                                    tape,
                                    &mut entries,
                                    format!("{p}.node_kernels.f{f}.k{k}.learned"),
                                    roles[0].clone().into_dyn(),
                                ),
                                leaf(
                                    tape,
                                    &mut entries,
                                    format!("{p}.node_kernels.f{f}.k{k}.forward"),
                                    roles[1].clone().into_dyn(),
                                ),
                                leaf(
                                    tape,
                                    &mut entries,
                                    format!("{p}.node_kernels.f{f}.k{k}.backward"),
                                    roles[2].clone().into_dyn(),
                                ),
                            ]
                        })
                        .collect()
                })
                .collect(),
        });
        let feature_kernels = layer.feature_kernels.as_ref().map(|fk| BoundFeatureKernels {
            per_step: fk
                .per_step
                .iter()
                .enumerate()
                .map(|(k, theta)| {
                    leaf(tape, &mut entries, format!("{p}.feature_kernels.k{k}"), theta.clone().into_dyn())
                })
                .collect(),
        });
        let canonical_kernels =
            layer.canonical_kernels.as_ref().map(|ck| BoundCanonicalKernels {
                per_step: ck
                    .per_step
                    .iter()
                    .enumerate()
                    .map(|(k, roles)| {
                        roles
                            .iter()
                            .enumerate()
                            .map(|(ri, theta)| {
                                leaf(
                                    tape,
                                    &mut entries,
                                    format!("{p}.canonical_kernels.k{k}.role{ri}"),
                                    theta.clone().into_dyn(),
                                )
                            })
                            .collect()
                    })
                    .collect(),
            });
        let fusion = layer.fusion.as_ref().map(|fu| BoundFusionParams {
            w: leaf(tape, &mut entries, format!("{p}.fusion.w"), fu.w.clone().into_dyn()),
            b: leaf(tape, &mut entries, format!("{p}.fusion.b"), fu.b.clone().into_dyn()),
        });
        let cf = layer.cf.as_ref().map(|a| BoundAttnParams {
            wq: leaf(tape, &mut entries, format!("{p}.cf.wq"), a.wq.clone().into_dyn()),
            wk: leaf(tape, &mut entries, format!("{p}.cf.wk"), a.wk.clone().into_dyn()),
            wv: leaf(tape, &mut entries, format!("{p}.cf.wv"), a.wv.clone().into_dyn()),
        });
        layers.push(BoundLayer {
            proj_w,
            proj_b,
            ct,
            node_kernels,
            feature_kernels,
            canonical_kernels,
            fusion,
            cf,
        });
    }
    let head_w = leaf(tape, &mut entries, "head.w".into(), model.head_w.clone().into_dyn());
    let head_b = leaf(tape, &mut entries, "head.b".into(), model.head_b.clone().into_dyn());

    BoundModel {
        variant,
        entries,
        node_metas,
        feature_meta,
        canonical_meta,
        transitions: bind_transitions(tape, trans),
        layers,
        head_w,
        head_b,
    }
}

/// Forward outputs: the `[N, T_w, F]` prediction plus the attention weight
/// tensors of every layer that ran the respective stage.
pub struct ForwardArtifacts {
    pub prediction: Var,
    pub ct_weights: Vec<Var>,
    pub cf_weights: Vec<Var>,
}

/// Runs the layered forward pass on a normalized, zero-filled window
/// signal `x` of shape `[N, T_w, F]`.
pub fn forward(tape: &mut Tape, bound: &BoundModel, x: Var) -> Result<ForwardArtifacts> {
    let variant = bound.variant;
    let mut ct_weights = Vec::new();
    let mut cf_weights = Vec::new();
    let mut z_prev: Option<Var> = None;
    for (li, layer) in bound.layers.iter().enumerate() {
        let h = tape.project_fc(x, layer.proj_w, layer.proj_b);
        let input = match z_prev {
            Some(z) => tape.add(z, h),
            None => h,
        };
        let r = match &layer.ct {
            Some(ct) => {
                let (r, w) = cross_temporal_attention(tape, input, ct);
                ct_weights.push(w);
                r
            }
            None => input,
        };
        let mut parts = vec![r];
        match variant.spatial {
            SpatialMode::SplitScales {
                node_scale,
                feature_scale,
            } => {
                if node_scale {
                    parts.push(node_scale_conv(
                        tape,
                        r,
                        &bound.node_metas,
                        &bound.transitions,
                        layer.node_kernels.as_ref().expect("node kernels present"),
                    ));
                }
                if feature_scale {
                    parts.push(feature_scale_conv(
                        tape,
                        r,
                        bound.feature_meta.expect("feature graph present"),
                        layer.feature_kernels.as_ref().expect("feature kernels present"),
                    ));
                }
            }
            SpatialMode::Canonical { .. } => {
                parts.push(canonical_conv(
                    tape,
                    r,
                    bound.canonical_meta,
                    &bound.transitions,
                    layer.canonical_kernels.as_ref().expect("canonical kernels present"),
                ));
            }
            SpatialMode::None => {}
        }
        let e = if parts.len() == 1 {
            r
        } else {
            fuse(tape, &parts, layer.fusion.as_ref().expect("fusion present"))
        };
        let z = match &layer.cf {
            Some(cf) => {
                let (z, w) = cross_feature_attention(tape, e, cf);
                cf_weights.push(w);
                z
            }
            None => e,
        };
        if !tape.value(z).iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(
                "forward",
                format!("non-finite activations in layer {}", li + 1),
            ));
        }
        z_prev = Some(z);
    }
    let prediction = tape.head_fc(z_prev.expect("at least one layer"), bound.head_w, bound.head_b);
    Ok(ForwardArtifacts {
        prediction,
        ct_weights,
        cf_weights,
    })
}

/// Mean squared error over labeled cells only. Errors when the label mask
/// selects nothing.
pub fn masked_mse(
    tape: &mut Tape,
    prediction: Var,
    target: &Array3<f64>,
    label_mask: &Array3<bool>,
) -> Result<Var> {
    let count = label_mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::Degenerate("loss: label mask selects no cells".into()));
    }
    let masked_target = Array3::from_shape_fn(target.raw_dim(), |idx| {
        if label_mask[idx] {
            target[idx]
        } else {
            0.0
        }
    });
    let mask_f = label_mask.mapv(|b| if b { 1.0 } else { 0.0 });
    let tgt = tape.constant(masked_target.into_dyn());
    let mask = tape.constant(mask_f.into_dyn());
    let diff = tape.sub(prediction, tgt);
    let masked = tape.mul(diff, mask);
    let sq = tape.mul(masked, masked);
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// Training knobs. `stride` controls how densely windows tile the series
/// during training; inference always tiles by `t_w` plus a tail window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub mask_ratio: f64,
    pub pattern: TrainingPattern,
    pub stride: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            mask_ratio: 0.2,
            pattern: TrainingPattern::Random,
            stride: 24,
            seed: 3407,
        }
    }
}

/// Adaptive-moment optimizer state, one slot per parameter in canonical
/// visit order. Parameters that received no gradient in a step (stages the
/// variant disabled) are left untouched.
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    slots: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamState {
    pub fn new(lr: f64, parameter_count: usize) -> AdamState {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: (0..parameter_count).map(|_| Option::None).collect(),
        }
    }

    /// One optimizer step: clip the concatenated gradient to `clip_norm`
    /// (global L2 norm), then update every parameter that has a gradient.
    pub fn apply(
        &mut self,
        model: &mut GsliModel,
        grads: &mut [Option<Tensor>],
        clip_norm: f64,
    ) {
        assert_eq!(grads.len(), self.slots.len(), "gradient/slot count");
        let norm_sq: f64 = grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum();
        let norm = norm_sq.sqrt();
        if norm > clip_norm {
            let scale = clip_norm / norm;
            for g in grads.iter_mut().flatten() {
                g.mapv_inplace(|v| v * scale);
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        let mut idx = 0usize;
        model.visit_mut(&mut |_name, mut param| {
            if let Some(g) = &grads[idx] {
                let slot = self.slots[idx].get_or_insert_with(|| {
                    (
                        Tensor::zeros(g.raw_dim()),
                        Tensor::zeros(g.raw_dim()),
                    )
                });
                slot.0.zip_mut_with(g, |m, &gv| *m = b1 * *m + (1.0 - b1) * gv);
                slot.1.zip_mut_with(g, |v, &gv| *v = b2 * *v + (1.0 - b2) * gv * gv);
                let (m, v) = (&slot.0, &slot.1);
                let lr = self.lr;
                let eps = self.eps;
                ndarray::Zip::from(&mut param)
                    .and(m)
                    .and(v)
                    .for_each(|p, &mv, &vv| {
                        let m_hat = mv / bias1;
                        let v_hat = vv / bias2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    });
            }
            idx += 1;
        });
    }
}

/// Trains in place on a normalized dataset (observed-cell z-scores, missing
/// zero) and returns the per-epoch mean loss trace. Every step draws a
/// fresh label split of its window, so the model never sees a fixed
/// reconstruction target.
pub fn train(
    model: &mut GsliModel,
    dataset: &SpatioTemporalDataset,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let (n, t, f) = (dataset.n(), dataset.t(), dataset.f());
    if n != model.config.n || f != model.config.f {
        return Err(Error::shape(
            "train",
            format!(
                "dataset is {n} stations x {f} features, model expects {} x {}",
                model.config.n, model.config.f
            ),
        ));
    }
    let windows = window_split(t, model.config.t_w, cfg.stride)?;
    let trans = transitions(&dataset.adjacency);
    let parameter_count = {
        let mut count = 0usize;
        model.visit(&mut |_, _| count += 1);
        count
    };
    let mut adam = AdamState::new(cfg.learning_rate, parameter_count);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step_index: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX, epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for &wi in &order {
            let w = windows[wi];
            let loss = train_step(
                model,
                dataset,
                &trans,
                w,
                cfg,
                derive_seed(cfg.seed, 7, step_index),
                &mut adam,
            )?;
            if !loss.is_finite() {
                return Err(Error::numeric(
                    "train",
                    format!("loss diverged at step {step_index}"),
                ));
            }
            epoch_loss += loss;
            step_index += 1;
        }
        trace.push(epoch_loss / windows.len() as f64);
    }
    Ok(trace)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut GsliModel,
    dataset: &SpatioTemporalDataset,
    trans: &Transitions,
    w: Window,
    cfg: &TrainConfig,
    mask_seed: u64,
    adam: &mut AdamState,
) -> Result<f64> {
    let values_w = dataset
        .values
        .slice(s![.., w.start..w.end(), ..])
        .to_owned();
    let observed_w = dataset.mask.slice(s![.., w.start..w.end(), ..]).to_owned();
    let split = sample_training_mask(observed_w.view(), cfg.mask_ratio, cfg.pattern, mask_seed)?;
    let x_input = Array3::from_shape_fn(values_w.raw_dim(), |idx| {
        if split.input_mask[idx] {
            values_w[idx]
        } else {
            0.0
        }
    });

    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, model, trans);
    let x = tape.constant(x_input.into_dyn());
    let artifacts = forward(&mut tape, &bound, x)?;
    let loss = masked_mse(&mut tape, artifacts.prediction, &values_w, &split.label_mask)?;
    let loss_value = tape.scalar(loss);
    let mut grad_map = tape.backward(loss);
    let mut grads: Vec<Option<Tensor>> = bound
        .entries
        .iter()
        .map(|(_, v)| grad_map.take(*v))
        .collect();
    adam.apply(model, &mut grads, cfg.clip_norm);
    Ok(loss_value)
}

/// Model output spliced with the observed signal.
#[derive(Debug, Clone)]
pub struct ImputationResult {
    /// De-normalized model prediction for every cell.
    pub prediction: Array3<f64>,
    /// Observed cells keep their original values exactly; missing cells
    /// take the prediction.
    pub completed: Array3<f64>,
}

/// Averaged window predictions in normalized space for a dataset that is
/// already normalized. Windows tile the series with stride `t_w / 2` (every
/// interior cell is covered twice); when a remainder is left a final window
/// anchored at the series end covers it, and overlapping cells average
/// their predictions.
pub fn impute_normalized(
    model: &GsliModel,
    dataset: &SpatioTemporalDataset,
) -> Result<Array3<f64>> {
    let (n, t, f) = (dataset.n(), dataset.t(), dataset.f());
    if n != model.config.n || f != model.config.f {
        return Err(Error::shape(
            "impute",
            format!(
                "dataset is {n} stations x {f} features, model expects {} x {}",
                model.config.n, model.config.f
            ),
        ));
    }
    let t_w = model.config.t_w;
    let stride = (t_w / 2).max(1);
    let mut windows = window_split(t, t_w, stride)?;
    if let Some(last) = windows.last() {
        if last.end() < t {
            windows.push(Window {
                start: t - t_w,
                len: t_w,
            });
        }
    }
    let trans = transitions(&dataset.adjacency);
    let mut sum = Array3::<f64>::zeros((n, t, f));
    let mut count = Array3::<f64>::zeros((n, t, f));
    for w in windows {
        let x_input = Array3::from_shape_fn((n, t_w, f), |(i, s, feat)| {
            if dataset.mask[[i, w.start + s, feat]] {
                dataset.values[[i, w.start + s, feat]]
            } else {
                0.0
            }
        });
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, model, &trans);
        let x = tape.constant(x_input.into_dyn());
        let artifacts = forward(&mut tape, &bound, x)?;
        let pred = tape
            .value(artifacts.prediction)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        for i in 0..n {
            for s in 0..t_w {
                for feat in 0..f {
                    sum[[i, w.start + s, feat]] += pred[[i, s, feat]];
                    count[[i, w.start + s, feat]] += 1.0;
                }
            }
        }
    }
    Ok(Array3::from_shape_fn((n, t, f), |idx| sum[idx] / count[idx]))
}

/// Imputes a raw (un-normalized) dataset: normalizes with the training-time
/// statistics, predicts every cell, de-normalizes, and splices so observed
/// cells keep their original values bit for bit.
pub fn impute(
    model: &GsliModel,
    dataset: &SpatioTemporalDataset,
    stats: &NormStats,
) -> Result<ImputationResult> {
    let mut normalized = dataset.clone();
    normalized.values = apply_norm_stats(&dataset.values, &dataset.mask, stats)?;
    let averaged = impute_normalized(model, &normalized)?;
    let prediction = denormalize(&averaged, stats)?;
    let completed = Array3::from_shape_fn(prediction.raw_dim(), |idx| {
        if dataset.mask[idx] {
            dataset.values[idx]
        } else {
            prediction[idx]
        }
    });
    Ok(ImputationResult {
        prediction,
        completed,
    })
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: ModelConfig,
    norm_stats: NormStats,
    tensors: BTreeMap<String, TensorRecord>,
}

/// Writes the full parameter set, model config, and normalization
/// statistics as one self-describing JSON document. 64-bit floats survive
/// the round trip exactly.
pub fn save_checkpoint(path: &Path, model: &GsliModel, stats: &NormStats) -> Result<()> {
    let mut tensors = BTreeMap::new();
    model.visit(&mut |name, view| {
        tensors.insert(
            name.to_string(),
            TensorRecord {
                shape: view.shape().to_vec(),
                data: view.iter().cloned().collect(),
            },
        );
    });
    let file = CheckpointFile {
        config: model.config.clone(),
        norm_stats: stats.clone(),
        tensors,
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Reads a checkpoint back into a fresh model. Errors on missing tensors,
/// shape mismatches, or tensors the config does not expect.
pub fn load_checkpoint(path: &Path) -> Result<(GsliModel, NormStats)> {
    let json = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: CheckpointFile = serde_json::from_str(&json)
        .map_err(|e| Error::Checkpoint(format!("parse {}: {e}", path.display())))?;
    let mut model = GsliModel::init(&file.config, 0);
    let mut missing: Vec<String> = Vec::new();
    let mut mismatched: Vec<String> = Vec::new();
    let mut consumed = 0usize;
    let tensors = &file.tensors;
    model.visit_mut(&mut |name, mut view| match tensors.get(name) {
        Some(rec) => {
            if rec.shape != view.shape() {
                mismatched.push(name.to_string());
            } else {
                for (slot, value) in view.iter_mut().zip(rec.data.iter()) {
                    *slot = *value;
                }
                consumed += 1;
            }
        }
        Option::None => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "missing tensors: {}",
            missing.join(", ")
        )));
    }
    if !mismatched.is_empty() {
        return Err(Error::Checkpoint(format!(
            "shape mismatch for: {}",
            mismatched.join(", ")
        )));
    }
    if consumed != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model uses {consumed}",
            tensors.len()
        )));
    }
    Ok((model, file.norm_stats))
}
