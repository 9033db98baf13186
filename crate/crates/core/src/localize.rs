//! Fault localization: layer matching, the input-based and layer-based
//! detectors, activation-difference analysis and suspicious-layer ranking.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::interp::{infer_shapes, trace_raw, ActivationTrace, InterpError};
use crate::ir::model::PARAMETER_ROLES;
use crate::ir::{
    Anchor, AttrValue, Dominators, GraphModel, Layout, NodeDef, Op, PreprocessingConfig, Subgraph,
    Tensor,
};
use crate::stats::{aggregate_ranks, kruskal_wallis, StatsError, DEFAULT_SIGNIFICANCE};

/// Default per-layer cap on elements tested in activation analysis.
pub const DEFAULT_ELEMENT_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FaultCategory {
    Pp,
    Id,
    Tss,
    Wb,
    Lh,
    Cg,
}

impl FaultCategory {
    pub const ALL: [FaultCategory; 6] = [
        FaultCategory::Pp,
        FaultCategory::Id,
        FaultCategory::Tss,
        FaultCategory::Wb,
        FaultCategory::Lh,
        FaultCategory::Cg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultCategory::Pp => "PP",
            FaultCategory::Id => "ID",
            FaultCategory::Tss => "TSS",
            FaultCategory::Wb => "WB",
            FaultCategory::Lh => "LH",
            FaultCategory::Cg => "CG",
        }
    }
}

impl fmt::Display for FaultCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A matched (source node, target node) pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerPair {
    pub source: String,
    pub target: String,
}

impl LayerPair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
        }
    }
}

impl fmt::Display for LayerPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.source == self.target {
            f.write_str(&self.source)
        } else {
            write!(f, "{}->{}", self.source, self.target)
        }
    }
}

/// Where a fault was found.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Location {
    ModelInput,
    Layer(LayerPair),
}

impl Location {
    pub fn pair(&self) -> Option<&LayerPair> {
        match self {
            Location::ModelInput => None,
            Location::Layer(p) => Some(p),
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::ModelInput => f.write_str(Anchor::INPUT_TAG),
            Location::Layer(p) => p.fmt(f),
        }
    }
}

impl Serialize for Location {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Location::ModelInput => s.serialize_str(Anchor::INPUT_TAG),
            Location::Layer(p) => p.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Location {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Tag(String),
            Pair(LayerPair),
        }
        match Raw::deserialize(d)? {
            Raw::Tag(t) if t == Anchor::INPUT_TAG => Ok(Location::ModelInput),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!("unknown location {t}"))),
            Raw::Pair(p) => Ok(Location::Layer(p)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HyperparamDiff {
    MissingInTarget,
    ExtraInTarget,
    ValueMismatch,
}

/// Which structural symptom a TSS report describes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "case", rename_all = "kebab-case")]
pub enum TssCase {
    /// A Transpose reached from the target input through input-processing nodes.
    PostInputTranspose {
        transpose: String,
        /// Gather/Unsqueeze/Add/Mul nodes between the input and the Transpose.
        prefix: Vec<String>,
        source_input: Vec<usize>,
        target_input: Vec<usize>,
    },
    /// The value entering a Flatten/Reshape has a different shape than in the source.
    PreFlatten {
        source_shape: Vec<usize>,
        target_shape: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FaultDetail {
    Preprocessing {
        fields: Vec<String>,
        /// Source configuration first, then the target's.
        candidates: Vec<PreprocessingConfig>,
    },
    InputDims {
        source: Vec<usize>,
        target: Vec<usize>,
        source_layout: Layout,
        target_layout: Layout,
    },
    TensorStructure(TssCase),
    Weights {
        mismatched: usize,
        max_abs_diff: f32,
        roles: Vec<String>,
        /// Roles whose tensors are missing on one side or differ in shape.
        shape_mismatch: Vec<String>,
    },
    Hyperparam {
        attr: String,
        diff: HyperparamDiff,
        source: Option<AttrValue>,
        target: Option<AttrValue>,
    },
    Graph {
        source: Subgraph,
        target: Subgraph,
        divergence: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultReport {
    pub category: FaultCategory,
    pub location: Location,
    pub detail: FaultDetail,
    pub suspicious_rank: Option<usize>,
}

impl FaultReport {
    fn new(category: FaultCategory, location: Location, detail: FaultDetail) -> Self {
        Self {
            category,
            location,
            detail,
            suspicious_rank: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LocalizeError {
    #[error(
        "activation analysis needs at least 2 similar and 1 dissimilar image, got {sim} and {diss}"
    )]
    TooFewImages { sim: usize, diss: usize },
    #[error("inference failed: {0}")]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerMatching {
    /// In source topological order.
    pub pairs: Vec<LayerPair>,
    pub unmatched_source: Vec<String>,
    pub unmatched_target: Vec<String>,
}

impl LayerMatching {
    pub fn target_of(&self, source_id: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|p| p.source == source_id)
            .map(|p| p.target.as_str())
    }

    pub fn source_of(&self, target_id: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|p| p.target == target_id)
            .map(|p| p.source.as_str())
    }

    pub fn pair_for_source(&self, source_id: &str) -> Option<&LayerPair> {
        self.pairs.iter().find(|p| p.source == source_id)
    }

    /// Matched pairs whose nodes are `op`, in source topological order.
    pub fn pairs_of<'a>(
        &'a self,
        source: &'a GraphModel,
        op: Op,
    ) -> impl Iterator<Item = &'a LayerPair> + 'a {
        self.pairs
            .iter()
            .filter(move |p| source.node(&p.source).is_some_and(|n| n.op == op))
    }
}

fn order_or_declaration(model: &GraphModel) -> Vec<usize> {
    crate::ir::graph::kahn_order(model).unwrap_or_else(|| (0..model.nodes.len()).collect())
}

fn weight_signature(node: &NodeDef) -> Vec<(&str, &[usize])> {
    node.weights
        .iter()
        .map(|(r, t)| (r.as_str(), t.shape()))
        .collect()
}

/// Mean absolute difference over all weights of two nodes with equal signatures.
fn weight_distance(a: &NodeDef, b: &NodeDef) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (role, ta) in &a.weights {
        let tb = &b.weights[role];
        for (x, y) in ta.to_f32_vec().iter().zip(tb.to_f32_vec()) {
            total += f64::from((x - y).abs());
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Pair nodes of the two models: exact id first, then equal weight shapes
/// (closest values), then weightless ops by relative position.
pub fn match_layers(source: &GraphModel, target: &GraphModel) -> LayerMatching {
    let s_order = order_or_declaration(source);
    let t_order = order_or_declaration(target);
    let rel = |order: &[usize], len: usize| {
        let mut pos = vec![0.0f64; len];
        for (k, &i) in order.iter().enumerate() {
            pos[i] = if len > 1 {
                k as f64 / (len - 1) as f64
            } else {
                0.0
            };
        }
        pos
    };
    let s_pos = rel(&s_order, source.nodes.len());
    let t_pos = rel(&t_order, target.nodes.len());
    let mut s_match: Vec<Option<usize>> = vec![None; source.nodes.len()];
    let mut t_taken = vec![false; target.nodes.len()];

    for &si in &s_order {
        let s = &source.nodes[si];
        if let Some(ti) = target.node_index(&s.id) {
            if target.nodes[ti].op == s.op && !t_taken[ti] {
                s_match[si] = Some(ti);
                t_taken[ti] = true;
            }
        }
    }

    let mut pick = |s_match: &mut Vec<Option<usize>>,
                    eligible: &dyn Fn(&NodeDef, &NodeDef) -> bool,
                    score: &dyn Fn(usize, usize) -> (f64, f64)| {
        for &si in &s_order {
            if s_match[si].is_some() {
                continue;
            }
            let s = &source.nodes[si];
            let best = t_order
                .iter()
                .copied()
                .filter(|&ti| {
                    !t_taken[ti] && target.nodes[ti].op == s.op && eligible(s, &target.nodes[ti])
                })
                .min_by(|&a, &b| {
                    let (sa, sb) = (score(si, a), score(si, b));
                    sa.0.total_cmp(&sb.0)
                        .then(sa.1.total_cmp(&sb.1))
                        .then(a.cmp(&b))
                });
            if let Some(ti) = best {
                s_match[si] = Some(ti);
                t_taken[ti] = true;
            }
        }
    };

    pick(
        &mut s_match,
        &|s, t| !s.weights.is_empty() && weight_signature(s) == weight_signature(t),
        &|si, ti| {
            (
                weight_distance(&source.nodes[si], &target.nodes[ti]),
                (s_pos[si] - t_pos[ti]).abs(),
            )
        },
    );
    pick(&mut s_match, &|s, _| !s.op.is_parametric(), &|si, ti| {
        ((s_pos[si] - t_pos[ti]).abs(), 0.0)
    });

    let pairs = s_order
        .iter()
        .filter_map(|&si| {
            s_match[si].map(|ti| LayerPair::new(&source.nodes[si].id, &target.nodes[ti].id))
        })
        .collect();
    LayerMatching {
        pairs,
        unmatched_source: s_order
            .iter()
            .filter(|&&si| s_match[si].is_none())
            .map(|&si| source.nodes[si].id.clone())
            .collect(),
        unmatched_target: t_order
            .iter()
            .filter(|&&ti| !t_taken[ti])
            .map(|&ti| target.nodes[ti].id.clone())
            .collect(),
    }
}

/// Preprocessing candidates to trial and a PP report when the configs differ.
pub fn check_preprocessing(
    source: &GraphModel,
    target: &GraphModel,
) -> (Vec<PreprocessingConfig>, Option<FaultReport>) {
    let fields = source.preproc.differing_fields(&target.preproc);
    if fields.is_empty() {
        return (vec![target.preproc.clone()], None);
    }
    let candidates = vec![source.preproc.clone(), target.preproc.clone()];
    let report = FaultReport::new(
        FaultCategory::Pp,
        Location::ModelInput,
        FaultDetail::Preprocessing {
            fields: fields.into_iter().map(String::from).collect(),
            candidates: candidates.clone(),
        },
    );
    (candidates, Some(report))
}

pub fn check_input_dims(source: &GraphModel, target: &GraphModel) -> Option<FaultReport> {
    (source.input.shape != target.input.shape).then(|| {
        FaultReport::new(
            FaultCategory::Id,
            Location::ModelInput,
            FaultDetail::InputDims {
                source: source.input.shape.clone(),
                target: target.input.shape.clone(),
                source_layout: source.input.layout,
                target_layout: target.input.layout,
            },
        )
    })
}

fn is_input_processing(op: Op) -> bool {
    matches!(op, Op::Gather | Op::Unsqueeze | Op::Add | Op::Mul)
}

/// Follow single-consumer input-processing nodes from the model input to the
/// first Transpose. Returns the prefix ids and the Transpose id.
pub(crate) fn post_input_transpose(model: &GraphModel) -> Option<(Vec<String>, String)> {
    let mut value = model.input.name.clone();
    let mut prefix = Vec::new();
    loop {
        let consumers: Vec<&NodeDef> = model.consumers(&value).collect();
        let [node] = consumers.as_slice() else {
            return None;
        };
        if node.op == Op::Transpose {
            return Some((prefix, node.id.clone()));
        }
        if !is_input_processing(node.op) || node.inputs.len() != 1 {
            return None;
        }
        prefix.push(node.id.clone());
        value = node.output().to_string();
    }
}

/// Shape of the value entering node `id`'s immediate dominator boundary.
fn dominator_shape(
    model: &GraphModel,
    doms: &Dominators,
    shapes: &BTreeMap<String, Vec<usize>>,
    id: &str,
) -> Option<Vec<usize>> {
    match doms.idom(id).ok()? {
        Anchor::Input => Some(model.input.shape.clone()),
        Anchor::Node(d) => shapes.get(&d).cloned(),
    }
}

pub fn check_tensor_structure(
    source: &GraphModel,
    target: &GraphModel,
    matching: &LayerMatching,
) -> Vec<FaultReport> {
    let mut out = Vec::new();
    if source.input.shape != target.input.shape {
        if let Some((prefix, transpose)) = post_input_transpose(target) {
            out.push(FaultReport::new(
                FaultCategory::Tss,
                Location::ModelInput,
                FaultDetail::TensorStructure(TssCase::PostInputTranspose {
                    transpose,
                    prefix,
                    source_input: source.input.shape.clone(),
                    target_input: target.input.shape.clone(),
                }),
            ));
        }
    }
    let (Ok(s_shapes), Ok(t_shapes)) = (infer_shapes(source), infer_shapes(target)) else {
        return out;
    };
    let (Ok(s_doms), Ok(t_doms)) = (Dominators::compute(source), Dominators::compute(target))
    else {
        return out;
    };
    for pair in &matching.pairs {
        let t_node = match target.node(&pair.target) {
            Some(n) if matches!(n.op, Op::Flatten | Op::Reshape) => n,
            _ => continue,
        };
        let s_shape = dominator_shape(source, &s_doms, &s_shapes, &pair.source);
        let t_shape = dominator_shape(target, &t_doms, &t_shapes, &t_node.id);
        if let (Some(s), Some(t)) = (s_shape, t_shape) {
            if s != t {
                out.push(FaultReport::new(
                    FaultCategory::Tss,
                    Location::Layer(pair.clone()),
                    FaultDetail::TensorStructure(TssCase::PreFlatten {
                        source_shape: s,
                        target_shape: t,
                    }),
                ));
            }
        }
    }
    out
}

/// WB report for one matched pair, if any parameter differs beyond `tolerance`.
pub fn weight_report(
    source: &NodeDef,
    target: &NodeDef,
    pair: &LayerPair,
    tolerance: f32,
) -> Option<FaultReport> {
    let roles: BTreeSet<&str> = PARAMETER_ROLES
        .iter()
        .copied()
        .filter(|r| source.weight(r).is_some() || target.weight(r).is_some())
        .collect();
    let mut mismatched = 0usize;
    let mut max_abs_diff = 0.0f32;
    let mut differing = Vec::new();
    let mut shape = Vec::new();
    for role in roles {
        match (source.weight(role), target.weight(role)) {
            (Some(a), Some(b)) if a.shape() == b.shape() => {
                let mut n = 0;
                for (x, y) in a.to_f32_vec().iter().zip(b.to_f32_vec()) {
                    let d = (x - y).abs();
                    // NaN differences count as mismatches.
                    if d.is_nan() || d > tolerance {
                        n += 1;
                        max_abs_diff = if d.is_nan() {
                            f32::NAN
                        } else {
                            max_abs_diff.max(d)
                        };
                    }
                }
                if n > 0 {
                    mismatched += n;
                    differing.push(role.to_string());
                }
            }
            (a, b) => {
                mismatched += a.or(b).map_or(0, Tensor::len);
                differing.push(role.to_string());
                shape.push(role.to_string());
            }
        }
    }
    (!differing.is_empty()).then(|| {
        FaultReport::new(
            FaultCategory::Wb,
            Location::Layer(pair.clone()),
            FaultDetail::Weights {
                mismatched,
                max_abs_diff,
                roles: differing,
                shape_mismatch: shape,
            },
        )
    })
}

pub fn compare_weights(
    source: &GraphModel,
    target: &GraphModel,
    matching: &LayerMatching,
    tolerance: f32,
) -> Vec<FaultReport> {
    matching
        .pairs
        .iter()
        .filter_map(|p| {
            weight_report(
                source.node(&p.source)?,
                target.node(&p.target)?,
                p,
                tolerance,
            )
        })
        .collect()
}

/// One LH report per attribute that differs between a matched pair.
pub fn hyperparam_reports(
    source: &NodeDef,
    target: &NodeDef,
    pair: &LayerPair,
) -> Vec<FaultReport> {
    let names: BTreeSet<&String> = source.attrs.keys().chain(target.attrs.keys()).collect();
    names
        .into_iter()
        .filter_map(|name| {
            let (s, t) = (source.attrs.get(name), target.attrs.get(name));
            let diff = match (s, t) {
                (Some(_), None) => HyperparamDiff::MissingInTarget,
                (None, Some(_)) => HyperparamDiff::ExtraInTarget,
                (Some(a), Some(b)) if a != b => HyperparamDiff::ValueMismatch,
                _ => return None,
            };
            Some(FaultReport::new(
                FaultCategory::Lh,
                Location::Layer(pair.clone()),
                FaultDetail::Hyperparam {
                    attr: name.clone(),
                    diff,
                    source: s.cloned(),
                    target: t.cloned(),
                },
            ))
        })
        .collect()
}

pub fn compare_hyperparams(
    source: &GraphModel,
    target: &GraphModel,
    matching: &LayerMatching,
) -> Vec<FaultReport> {
    matching
        .pairs
        .iter()
        .filter_map(|p| {
            Some(hyperparam_reports(
                source.node(&p.source)?,
                target.node(&p.target)?,
                p,
            ))
        })
        .flatten()
        .collect()
}

/// Nearest strict dominator of `id` that is a matched Conv, else the input.
fn conv_anchor(
    model: &GraphModel,
    doms: &Dominators,
    id: &str,
    matched: impl Fn(&str) -> bool,
) -> Option<Anchor> {
    for a in doms.chain(id).ok()? {
        match &a {
            Anchor::Input => return Some(a),
            Anchor::Node(n) if model.node(n).is_some_and(|x| x.op == Op::Conv) && matched(n) => {
                return Some(a)
            }
            Anchor::Node(_) => {}
        }
    }
    Some(Anchor::Input)
}

/// Dominator trees of both models, computed once for repeated graph comparisons.
pub struct GraphPairContext<'a> {
    pub source: &'a GraphModel,
    pub target: &'a GraphModel,
    source_doms: Dominators,
    target_doms: Dominators,
}

impl<'a> GraphPairContext<'a> {
    pub fn new(source: &'a GraphModel, target: &'a GraphModel) -> Option<Self> {
        Some(Self {
            source,
            target,
            source_doms: Dominators::compute(source).ok()?,
            target_doms: Dominators::compute(target).ok()?,
        })
    }

    /// CG report for `pair` when the regions between it and its anchor differ.
    pub fn graph_report(&self, pair: &LayerPair, matching: &LayerMatching) -> Option<FaultReport> {
        let s_anchor = conv_anchor(self.source, &self.source_doms, &pair.source, |n| {
            matching.target_of(n).is_some()
        })?;
        let t_anchor = conv_anchor(self.target, &self.target_doms, &pair.target, |n| {
            matching.source_of(n).is_some()
        })?;
        let s_sub = self.source_doms.subgraph(&pair.source, &s_anchor).ok()?;
        let t_sub = self.target_doms.subgraph(&pair.target, &t_anchor).ok()?;

        let anchors_agree = match (&s_anchor, &t_anchor) {
            (Anchor::Input, Anchor::Input) => true,
            (Anchor::Node(s), Anchor::Node(t)) => matching.target_of(s) == Some(t.as_str()),
            _ => false,
        };
        let interior =
            |sub: &Subgraph, model: &'a GraphModel, anchor: &Anchor| -> Vec<&'a NodeDef> {
                sub.node_ids
                    .iter()
                    .filter(|id| anchor.node_id() != Some(id.as_str()))
                    .filter_map(|id| model.node(id))
                    .collect()
            };
        let s_nodes = interior(&s_sub, self.source, &s_anchor);
        let t_nodes = interior(&t_sub, self.target, &t_anchor);
        let divergence = if !anchors_agree {
            Some(format!("anchors differ: {s_anchor} vs {t_anchor}"))
        } else if s_nodes.len() != t_nodes.len() {
            Some(format!("{} nodes vs {}", s_nodes.len(), t_nodes.len()))
        } else {
            s_nodes
                .iter()
                .zip(&t_nodes)
                .enumerate()
                .find_map(|(k, (s, t))| {
                    let is_root = s.id == pair.source && t.id == pair.target;
                    if s.op != t.op {
                        Some(format!("position {k}: {} vs {}", s.op, t.op))
                    } else if !is_root && s.attrs != t.attrs {
                        Some(format!("position {k}: attributes of {} differ", s.op))
                    } else {
                        None
                    }
                })
        };
        divergence.map(|divergence| {
            FaultReport::new(
                FaultCategory::Cg,
                Location::Layer(pair.clone()),
                FaultDetail::Graph {
                    source: s_sub,
                    target: t_sub,
                    divergence,
                },
            )
        })
    }
}

pub fn compare_graph(
    source: &GraphModel,
    target: &GraphModel,
    pair: &LayerPair,
    matching: &LayerMatching,
) -> Option<FaultReport> {
    GraphPairContext::new(source, target)?.graph_report(pair, matching)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationOptions {
    pub significance: f32,
    /// Per-layer element cap; `None` tests every element.
    pub element_cap: Option<usize>,
    pub seed: u64,
}

impl Default for ActivationOptions {
    fn default() -> Self {
        Self {
            significance: DEFAULT_SIGNIFICANCE,
            element_cap: Some(DEFAULT_ELEMENT_CAP),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerActivation {
    pub pair: LayerPair,
    pub element_count: usize,
    /// Flat indices of tested elements.
    pub sampled: Vec<usize>,
    pub problematic_element_count: usize,
    /// Similar-image differences per tested element.
    #[serde(skip)]
    pub expected_distributions: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationAnalysis {
    /// Matched Conv layers in source topological order.
    pub layers: Vec<LayerActivation>,
    /// Layers whose traced shapes differ, with the reason.
    pub skipped: Vec<(LayerPair, String)>,
}

impl ActivationAnalysis {
    pub fn count(&self, pair: &LayerPair) -> usize {
        self.layers
            .iter()
            .find(|l| &l.pair == pair)
            .map_or(0, |l| l.problematic_element_count)
    }
}

/// One index per equal-width stratum of `0..n`.
fn stratified_sample(n: usize, cap: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match cap {
        Some(c) if c < n => {
            let width = n as f64 / c as f64;
            (0..c)
                .map(|k| {
                    let lo = (k as f64 * width) as usize;
                    let hi = (((k + 1) as f64 * width) as usize).clamp(lo + 1, n);
                    rng.random_range(lo..hi)
                })
                .collect()
        }
        _ => (0..n).collect(),
    }
}

/// Source and target activations for one image.
#[derive(Debug, Clone)]
pub struct TracePair {
    pub source: ActivationTrace,
    pub target: ActivationTrace,
}

/// Trace both models on every raw image.
pub fn trace_pairs(
    source: &GraphModel,
    target: &GraphModel,
    images: &[Tensor],
) -> Result<Vec<TracePair>, InterpError> {
    images
        .par_iter()
        .map(|img| {
            Ok(TracePair {
                source: trace_raw(source, img)?,
                target: trace_raw(target, img)?,
            })
        })
        .collect()
}

/// Count, per matched Conv layer, the output elements whose |source - target|
/// differences on dissimilar images fail a Kruskal-Wallis fit against the
/// differences on similar images.
pub fn activation_analysis(
    source: &GraphModel,
    target: &GraphModel,
    sim_imgs: &[Tensor],
    diss_imgs: &[Tensor],
    matching: &LayerMatching,
    opts: &ActivationOptions,
) -> Result<ActivationAnalysis, LocalizeError> {
    if sim_imgs.len() < 2 || diss_imgs.is_empty() {
        return Err(LocalizeError::TooFewImages {
            sim: sim_imgs.len(),
            diss: diss_imgs.len(),
        });
    }
    let sim = trace_pairs(source, target, sim_imgs)?;
    let diss = trace_pairs(source, target, diss_imgs)?;
    analyze_traces(
        source,
        &sim.iter().collect::<Vec<_>>(),
        &diss.iter().collect::<Vec<_>>(),
        matching,
        opts,
    )
}

/// [`activation_analysis`] on traces computed beforehand.
pub fn analyze_traces(
    source: &GraphModel,
    sim: &[&TracePair],
    diss: &[&TracePair],
    matching: &LayerMatching,
    opts: &ActivationOptions,
) -> Result<ActivationAnalysis, LocalizeError> {
    if sim.len() < 2 || diss.is_empty() {
        return Err(LocalizeError::TooFewImages {
            sim: sim.len(),
            diss: diss.len(),
        });
    }
    let mut out = ActivationAnalysis::default();
    for (li, pair) in matching.pairs_of(source, Op::Conv).enumerate() {
        let ss = sim[0]
            .source
            .activations
            .get(&pair.source)
            .map(|t| t.shape().to_vec());
        let ts = sim[0]
            .target
            .activations
            .get(&pair.target)
            .map(|t| t.shape().to_vec());
        if ss.is_none() || ss != ts {
            out.skipped
                .push((pair.clone(), format!("traced shapes {ss:?} vs {ts:?}")));
            continue;
        }
        let n: usize = ss.unwrap().iter().product();
        let mut rng =
            ChaCha8Rng::seed_from_u64(opts.seed ^ (li as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let sampled = stratified_sample(n, opts.element_cap, &mut rng);
        fn values<'t>(ps: &[&'t TracePair], pair: &LayerPair) -> Vec<(&'t [f32], &'t [f32])> {
            ps.iter()
                .map(|p| {
                    (
                        p.source.activations[&pair.source].as_f32().expect("f32"),
                        p.target.activations[&pair.target].as_f32().expect("f32"),
                    )
                })
                .collect()
        }
        let (sim_v, diss_v) = (values(sim, pair), values(diss, pair));
        let per_element: Vec<(bool, Vec<f32>)> = sampled
            .par_iter()
            .map(|&e| {
                let col = |v: &[(&[f32], &[f32])]| -> Vec<f32> {
                    v.iter().map(|(a, b)| (a[e] - b[e]).abs()).collect()
                };
                let (a, b) = (col(&sim_v), col(&diss_v));
                let p = kruskal_wallis(&a, &b).map(|r| r.p_value).unwrap_or(1.0);
                (p < opts.significance, a)
            })
            .collect();
        out.layers.push(LayerActivation {
            pair: pair.clone(),
            element_count: n,
            problematic_element_count: per_element.iter().filter(|(p, _)| *p).count(),
            expected_distributions: per_element.into_iter().map(|(_, a)| a).collect(),
            sampled,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspiciousRanking {
    /// Most suspicious first.
    pub order: Vec<LayerPair>,
    /// Mean rank of each entry of `order` across the combined orderings.
    pub mean_ranks: Vec<f64>,
}

impl SuspiciousRanking {
    pub fn rank_of(&self, pair: &LayerPair) -> Option<usize> {
        self.order.iter().position(|p| p == pair).map(|r| r + 1)
    }
}

/// Per-layer parameter mismatch score: WB mismatched elements plus the
/// number of LH differences.
pub fn param_scores(reports: &[FaultReport]) -> BTreeMap<LayerPair, usize> {
    let mut out = BTreeMap::new();
    for r in reports {
        let Some(pair) = r.location.pair() else {
            continue;
        };
        let add = match (&r.category, &r.detail) {
            (FaultCategory::Wb, FaultDetail::Weights { mismatched, .. }) => *mismatched,
            (FaultCategory::Lh, _) => 1,
            _ => 0,
        };
        *out.entry(pair.clone()).or_insert(0) += add;
    }
    out
}

/// Combine the static parameter ordering with each activation run's ordering
/// by mean rank. `layers` gives declaration order, which breaks ties.
pub fn rank_suspicious_layers(
    layers: &[LayerPair],
    param_scores: &BTreeMap<LayerPair, usize>,
    activation_runs: &[ActivationAnalysis],
) -> Result<SuspiciousRanking, StatsError> {
    if layers.is_empty() {
        return Ok(SuspiciousRanking {
            order: Vec::new(),
            mean_ranks: Vec::new(),
        });
    }
    let ordering = |score: &dyn Fn(&LayerPair) -> usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..layers.len()).collect();
        idx.sort_by(|&a, &b| score(&layers[b]).cmp(&score(&layers[a])).then(a.cmp(&b)));
        idx
    };
    let mut orderings = vec![ordering(&|p| param_scores.get(p).copied().unwrap_or(0))];
    for run in activation_runs {
        orderings.push(ordering(&|p| run.count(p)));
    }
    let agg = aggregate_ranks(&orderings)?;
    Ok(SuspiciousRanking {
        order: agg.items.iter().map(|(i, _)| layers[*i].clone()).collect(),
        mean_ranks: agg.items.iter().map(|(_, r)| *r).collect(),
    })
}

/// Everything the detectors find without running the models.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticFindings {
    pub matching: LayerMatching,
    pub pp_candidates: Vec<PreprocessingConfig>,
    pub reports: Vec<FaultReport>,
}

impl StaticFindings {
    pub fn of(&self, category: FaultCategory) -> impl Iterator<Item = &FaultReport> {
        self.reports.iter().filter(move |r| r.category == category)
    }

    /// Matched Conv pairs in source topological order.
    pub fn conv_pairs(&self, source: &GraphModel) -> Vec<LayerPair> {
        self.matching.pairs_of(source, Op::Conv).cloned().collect()
    }
}

/// Run every static detector. CG regions are compared for matched Conv layers.
pub fn localize_static(
    source: &GraphModel,
    target: &GraphModel,
    weight_tolerance: f32,
) -> StaticFindings {
    let matching = match_layers(source, target);
    let (pp_candidates, pp) = check_preprocessing(source, target);
    let mut reports: Vec<FaultReport> = pp.into_iter().collect();
    reports.extend(check_input_dims(source, target));
    reports.extend(check_tensor_structure(source, target, &matching));
    reports.extend(compare_weights(source, target, &matching, weight_tolerance));
    reports.extend(compare_hyperparams(source, target, &matching));
    if let Some(ctx) = GraphPairContext::new(source, target) {
        for pair in matching.pairs_of(source, Op::Conv) {
            reports.extend(ctx.graph_report(pair, &matching));
        }
    }
    StaticFindings {
        matching,
        pp_candidates,
        reports,
    }
}

/// Set `suspicious_rank` on every report located at a ranked layer.
pub fn assign_ranks(reports: &mut [FaultReport], ranking: &SuspiciousRanking) {
    let ranks: HashMap<&LayerPair, usize> = ranking
        .order
        .iter()
        .enumerate()
        .map(|(i, p)| (p, i + 1))
        .collect();
    for r in reports {
        r.suspicious_rank = r.location.pair().and_then(|p| ranks.get(p).copied());
    }
}
