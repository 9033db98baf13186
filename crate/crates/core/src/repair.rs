//! Repair strategies as copy-on-write rewrites of the target model, plus the
//! Kendall-tau acceptance predicates.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::interp::{classify, infer_shapes, InterpError, LabelRanking};
use crate::ir::model::PARAMETER_ROLES;
use crate::ir::{
    validate, Anchor, AttrValue, GraphModel, NodeDef, Op, PreprocessingConfig, Tensor,
};
use crate::localize::{
    post_input_transpose, FaultCategory, FaultDetail, FaultReport, HyperparamDiff, LayerPair,
    Location, TssCase,
};
use crate::stats::{kendall_tau, StatsError};

/// Default Kendall tau at or above which a driving image counts as fixed.
pub const DEFAULT_KT_FIXED: f32 = 0.99;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RepairError {
    #[error("rewrite produced an invalid model: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("shape check failed: {0}")]
    Shape(String),
    #[error("tensor shapes differ for {node}.{role}; needs a graph-level repair")]
    WeightShape { node: String, role: String },
    #[error("no axis permutation maps {from:?} onto {to:?}")]
    NoPermutation { from: Vec<usize>, to: Vec<usize> },
    #[error("subgraph boundary mismatch: {0}")]
    Boundary(String),
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
}

/// A rewritten target and a human-readable summary of the change.
#[derive(Debug, Clone, PartialEq)]
pub struct Rewrite {
    pub model: GraphModel,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairAction {
    pub strategy: FaultCategory,
    pub target_location: Location,
    pub description: String,
    pub accepted: bool,
    pub kt_before: f32,
    /// `None` when the candidate could not be built or run.
    pub kt_after: Option<f32>,
}

/// A target variant and the accepted actions that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateModel {
    pub model: GraphModel,
    pub provenance: Vec<RepairAction>,
}

fn checked(model: GraphModel, description: String) -> Result<Rewrite, RepairError> {
    let v = validate(&model);
    if !v.is_empty() {
        return Err(RepairError::Invalid(v));
    }
    infer_shapes(&model).map_err(|e| RepairError::Shape(e.to_string()))?;
    Ok(Rewrite { model, description })
}

fn node<'a>(model: &'a GraphModel, id: &str) -> Result<&'a NodeDef, RepairError> {
    model
        .node(id)
        .ok_or_else(|| RepairError::UnknownNode(id.to_string()))
}

/// One candidate per distinct configuration, differing only in `preproc`.
pub fn repair_preprocessing(
    target: &GraphModel,
    candidates: &[PreprocessingConfig],
) -> Vec<Rewrite> {
    let mut seen: Vec<&PreprocessingConfig> = Vec::new();
    let mut out = Vec::new();
    for cfg in candidates {
        if seen.contains(&cfg) {
            continue;
        }
        seen.push(cfg);
        let mut m = target.clone();
        m.preproc = cfg.clone();
        let fields = target.preproc.differing_fields(cfg);
        let description = if fields.is_empty() {
            "keep target preprocessing".to_string()
        } else {
            format!("set preprocessing {}", fields.join(", "))
        };
        out.push(Rewrite {
            model: m,
            description,
        });
    }
    out
}

/// Give the target the source's input shape and layout.
pub fn repair_input_dims(target: &GraphModel, source: &GraphModel) -> Result<Rewrite, RepairError> {
    let mut m = target.clone();
    m.input.shape = source.input.shape.clone();
    m.input.layout = source.input.layout;
    m.preproc.layout = source.input.layout;
    checked(
        m,
        format!(
            "input {:?} {} -> {:?} {}",
            target.input.shape, target.input.layout, source.input.shape, source.input.layout
        ),
    )
}

/// Axis permutation `p` with `from[p[i]] == to[i]`; equal dims keep their
/// relative order.
pub fn derive_perm(from: &[usize], to: &[usize]) -> Result<Vec<usize>, RepairError> {
    let err = || RepairError::NoPermutation {
        from: from.to_vec(),
        to: to.to_vec(),
    };
    if from.len() != to.len() {
        return Err(err());
    }
    let mut used = vec![false; from.len()];
    to.iter()
        .map(|d| {
            let j = (0..from.len())
                .find(|&j| !used[j] && from[j] == *d)
                .ok_or_else(err)?;
            used[j] = true;
            Ok(j)
        })
        .collect()
}

fn fresh_name(taken: &mut HashSet<String>, base: &str) -> String {
    let name = if taken.contains(base) {
        (2..)
            .map(|i| format!("{base}_{i}"))
            .find(|s| !taken.contains(s))
            .unwrap()
    } else {
        base.to_string()
    };
    taken.insert(name.clone());
    name
}

fn taken_names(model: &GraphModel) -> HashSet<String> {
    let mut s: HashSet<String> = model
        .nodes
        .iter()
        .flat_map(|n| std::iter::once(n.id.clone()).chain(n.outputs.clone()))
        .collect();
    s.insert(model.input.name.clone());
    s
}

/// Fix a TSS fault: drop a post-input Transpose (case a) or insert one before
/// a Flatten/Reshape (case b).
pub fn repair_tensor_structure(
    target: &GraphModel,
    source: &GraphModel,
    report: &FaultReport,
) -> Result<Rewrite, RepairError> {
    let FaultDetail::TensorStructure(case) = &report.detail else {
        return Err(RepairError::NotApplicable("not a TSS report".into()));
    };
    match case {
        TssCase::PostInputTranspose { .. } => {
            let (prefix, tid) = post_input_transpose(target).ok_or_else(|| {
                RepairError::NotApplicable("no Transpose follows the input".into())
            })?;
            let t = node(target, &tid)?.clone();
            let mut m = target.clone();
            m.nodes.retain(|n| n.id != tid);
            m.rename_uses(t.output(), &t.inputs[0]);
            let map = target.input.layout.axis_map_to(source.input.layout);
            let mut adjusted = Vec::new();
            for id in &prefix {
                let n = m.node_mut(id).expect("prefix node");
                let default = match n.op {
                    Op::Add | Op::Mul => 1,
                    Op::Gather => 0,
                    _ => continue,
                };
                let old = n
                    .attr("axis")
                    .and_then(AttrValue::as_int)
                    .unwrap_or(default);
                let old = if old < 0 { old + 4 } else { old };
                if let Some(&new) = usize::try_from(old).ok().and_then(|a| map.get(a)) {
                    if new as i64 != old || n.attr("axis").is_some() {
                        n.attrs.insert("axis".into(), AttrValue::Int(new as i64));
                        adjusted.push(format!("{id}.axis {old}->{new}"));
                    }
                }
            }
            m.input.shape = source.input.shape.clone();
            m.input.layout = source.input.layout;
            m.preproc.layout = source.input.layout;
            let mut description = format!(
                "remove {tid}; input {:?} -> {:?}",
                target.input.shape, source.input.shape
            );
            if !adjusted.is_empty() {
                description.push_str(&format!("; {}", adjusted.join(", ")));
            }
            checked(m, description)
        }
        TssCase::PreFlatten {
            source_shape,
            target_shape,
        } => {
            let pair = report.location.pair().ok_or_else(|| {
                RepairError::NotApplicable("TSS pre-flatten report without a layer".into())
            })?;
            let flat = node(target, &pair.target)?.clone();
            let perm = derive_perm(target_shape, source_shape)?;
            let mut m = target.clone();
            let mut taken = taken_names(&m);
            let id = fresh_name(&mut taken, &format!("fix_transpose_{}", flat.id));
            let value = fresh_name(&mut taken, &format!("{id}_out"));
            let t = NodeDef::new(id.clone(), Op::Transpose, &[&flat.inputs[0]], &value).with_attr(
                "perm",
                AttrValue::Ints(perm.iter().map(|&p| p as i64).collect()),
            );
            let pos = m.node_index(&flat.id).expect("present");
            m.nodes[pos].inputs[0] = value;
            m.nodes.insert(pos, t);
            checked(m, format!("insert {id} perm {perm:?} before {}", flat.id))
        }
    }
}

/// Replace the target layer's parameter tensors with the source's.
pub fn repair_weights(
    target: &GraphModel,
    source: &GraphModel,
    pair: &LayerPair,
) -> Result<Rewrite, RepairError> {
    let s = node(source, &pair.source)?;
    let t = node(target, &pair.target)?;
    for role in PARAMETER_ROLES {
        if let (Some(a), Some(b)) = (s.weight(role), t.weight(role)) {
            if a.shape() != b.shape() {
                return Err(RepairError::WeightShape {
                    node: t.id.clone(),
                    role: role.to_string(),
                });
            }
        }
    }
    let mut m = target.clone();
    let n = m.node_mut(&pair.target).expect("present");
    let mut roles = Vec::new();
    for role in PARAMETER_ROLES {
        match s.weight(role) {
            Some(w) => {
                n.weights.insert(role.to_string(), w.clone());
                roles.push(role);
            }
            None => {
                n.weights.remove(role);
            }
        }
    }
    checked(
        m,
        format!("copy {} from source {}", roles.join(", "), pair.source),
    )
}

/// Apply each LH report on `pair`: add, remove or overwrite the attribute.
pub fn repair_hyperparams(
    target: &GraphModel,
    source: &GraphModel,
    pair: &LayerPair,
    lh_reports: &[FaultReport],
) -> Result<Rewrite, RepairError> {
    let s = node(source, &pair.source)?;
    node(target, &pair.target)?;
    let mut m = target.clone();
    let n = m.node_mut(&pair.target).expect("present");
    let mut changes = Vec::new();
    for r in lh_reports {
        if r.location.pair() != Some(pair) {
            continue;
        }
        let FaultDetail::Hyperparam { attr, diff, .. } = &r.detail else {
            continue;
        };
        match (diff, s.attr(attr)) {
            (HyperparamDiff::ExtraInTarget, _) => {
                n.attrs.remove(attr);
                changes.push(format!("remove {attr}"));
            }
            (HyperparamDiff::MissingInTarget | HyperparamDiff::ValueMismatch, Some(v)) => {
                n.attrs.insert(attr.clone(), v.clone());
                changes.push(format!("set {attr}={v}"));
            }
            (_, None) => {
                return Err(RepairError::NotApplicable(format!(
                    "source {} has no {attr}",
                    pair.source
                )));
            }
        }
    }
    if changes.is_empty() {
        return Err(RepairError::NotApplicable(format!(
            "no LH report for {pair}"
        )));
    }
    checked(m, format!("{}: {}", pair.target, changes.join(", ")))
}

fn anchor_value(model: &GraphModel, anchor: &Anchor) -> Result<String, RepairError> {
    Ok(match anchor {
        Anchor::Input => model.input.name.clone(),
        Anchor::Node(id) => node(model, id)?.output().to_string(),
    })
}

/// Replace the target region between a layer and its anchor with copies of
/// the source region. Copied nodes get fresh `fix_` ids and value names.
pub fn repair_subgraph(
    target: &GraphModel,
    source: &GraphModel,
    report: &FaultReport,
) -> Result<Rewrite, RepairError> {
    let FaultDetail::Graph {
        source: s_sub,
        target: t_sub,
        ..
    } = &report.detail
    else {
        return Err(RepairError::NotApplicable("not a CG report".into()));
    };
    let interior = |sub: &crate::ir::Subgraph| -> BTreeSet<String> {
        sub.node_ids
            .iter()
            .filter(|id| **id != sub.root_id && sub.dominator.node_id() != Some(id.as_str()))
            .cloned()
            .collect()
    };
    let (s_int, t_int) = (interior(s_sub), interior(t_sub));
    let s_anchor = anchor_value(source, &s_sub.dominator)?;
    let t_anchor = anchor_value(target, &t_sub.dominator)?;
    let s_root = node(source, &s_sub.root_id)?;
    let t_root = node(target, &t_sub.root_id)?;
    if s_root.inputs.len() != t_root.inputs.len() {
        return Err(RepairError::Boundary(format!(
            "root {} takes {} inputs in source, {} in target",
            t_root.id,
            s_root.inputs.len(),
            t_root.inputs.len()
        )));
    }

    // Values the removed target nodes produce must not escape the region.
    let t_values: HashSet<&str> = t_int
        .iter()
        .map(|id| node(target, id).map(NodeDef::output))
        .collect::<Result<_, _>>()?;
    for n in &target.nodes {
        if t_int.contains(&n.id) || n.id == t_root.id {
            continue;
        }
        if let Some(v) = n.inputs.iter().find(|i| t_values.contains(i.as_str())) {
            return Err(RepairError::Boundary(format!(
                "{v} is also consumed by {}",
                n.id
            )));
        }
    }
    if t_values.contains(target.output_name.as_str()) {
        return Err(RepairError::Boundary(format!(
            "{} is the model output",
            target.output_name
        )));
    }

    // Source nodes to copy, in source declaration order.
    let s_nodes: Vec<&NodeDef> = source
        .nodes
        .iter()
        .filter(|n| s_int.contains(&n.id))
        .collect();
    let mut taken = taken_names(target);
    let mut value_map: HashMap<&str, String> =
        HashMap::from([(s_anchor.as_str(), t_anchor.clone())]);
    let mut fresh: Vec<NodeDef> = Vec::new();
    for n in &s_nodes {
        let mut copy = (*n).clone();
        copy.id = fresh_name(&mut taken, &format!("fix_{}", n.id));
        let out = fresh_name(&mut taken, &format!("fix_{}", n.output()));
        value_map.insert(n.output(), out.clone());
        copy.outputs = vec![out];
        fresh.push(copy);
    }
    let remap = |inputs: &[String]| -> Result<Vec<String>, RepairError> {
        inputs
            .iter()
            .map(|i| {
                value_map.get(i.as_str()).cloned().ok_or_else(|| {
                    RepairError::Boundary(format!("source region reads outside value {i}"))
                })
            })
            .collect()
    };
    for n in &mut fresh {
        n.inputs = remap(&n.inputs)?;
    }
    let root_inputs = remap(&s_root.inputs)?;

    let mut m = target.clone();
    m.nodes.retain(|n| !t_int.contains(&n.id));
    let pos = m.node_index(&t_root.id).expect("root kept");
    m.nodes[pos].inputs = root_inputs;
    let added: Vec<String> = fresh.iter().map(|n| n.id.clone()).collect();
    m.nodes.splice(pos..pos, fresh);
    let removed: Vec<&str> = t_int.iter().map(String::as_str).collect();
    checked(
        m,
        format!(
            "region {}..{}: replace [{}] with [{}]",
            t_sub.dominator,
            t_root.id,
            removed.join(", "),
            added.join(", ")
        ),
    )
}

/// The image that screens candidate repairs in one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivingImage {
    pub id: String,
    pub raw: Tensor,
    pub source_ranking: LabelRanking,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KtError {
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

impl DrivingImage {
    /// Kendall tau between the source ranking and `model`'s ranking.
    pub fn kt(&self, model: &GraphModel) -> Result<f32, KtError> {
        let r = classify(model, &self.raw)?;
        Ok(kendall_tau(&self.source_ranking, &r)?)
    }

    pub fn is_kt_improved(
        &self,
        candidate: &GraphModel,
        incumbent: &GraphModel,
    ) -> Result<bool, KtError> {
        let before = self.kt(incumbent).unwrap_or(f32::NEG_INFINITY);
        Ok(self.kt(candidate)? > before)
    }

    pub fn is_fixed(&self, candidate: &GraphModel, threshold: f32) -> Result<bool, KtError> {
        Ok(self.kt(candidate)? >= threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inject::{
        inject, make_desk_model, DeskFixture, FaultSpec, InjectCategory, InjectMode,
    };
    use crate::interp::{apply_preprocessing, infer_traced, run};
    use crate::ir::{InputSpec, Layout};
    use crate::localize::{
        check_tensor_structure, compare_graph, compare_hyperparams, compare_weights, match_layers,
        weight_report,
    };

    fn fixture() -> DeskFixture {
        make_desk_model(21, 16)
    }

    fn labels(model: &GraphModel, f: &DeskFixture) -> Vec<usize> {
        f.dataset
            .images
            .iter()
            .map(|i| classify(model, &i.tensor).unwrap().top1())
            .collect()
    }

    #[test]
    fn preprocessing_candidates_dedup() {
        let f = fixture();
        let (t, _) = inject(&f.model, &FaultSpec::new(InjectCategory::Pp, 0)).unwrap();
        let c = repair_preprocessing(&t, &[f.model.preproc.clone(), t.preproc.clone()]);
        assert_eq!(c.len(), 2);
        assert_eq!(labels(&c[0].model, &f), labels(&f.model, &f));
        assert_eq!(
            repair_preprocessing(&t, &[t.preproc.clone(), t.preproc.clone()]).len(),
            1
        );
    }

    #[test]
    fn input_dims() {
        let f = fixture();
        let (t, _) = inject(&f.model, &FaultSpec::new(InjectCategory::Id, 0)).unwrap();
        let c = repair_input_dims(&t, &f.model).unwrap();
        assert_eq!(labels(&c.model, &f), labels(&f.model, &f));
        assert_eq!(
            repair_input_dims(&f.model, &f.model).unwrap().model,
            f.model
        );

        // Without GAP the Gemm width is tied to the spatial size, so a smaller
        // source input cannot be propagated.
        let mut t2 = f.model.clone();
        t2.nodes.retain(|n| n.op != Op::GlobalAveragePool);
        t2.rename_uses("pooled", "relu2_out");
        t2.node_mut("gemm")
            .unwrap()
            .weights
            .insert("weight".into(), Tensor::zeros(vec![16 * 16 * 16, 10]));
        assert!(infer_shapes(&t2).is_ok());
        let mut src = f.model.clone();
        src.input.shape = vec![1, 3, 8, 8];
        assert!(matches!(
            repair_input_dims(&t2, &src),
            Err(RepairError::Shape(_))
        ));
    }

    #[test]
    fn tss_post_input_transpose() {
        let f = fixture();
        let (t, _) = inject(&f.model, &FaultSpec::new(InjectCategory::Tss, 0)).unwrap();
        let reports = check_tensor_structure(&f.model, &t, &match_layers(&f.model, &t));
        let c = repair_tensor_structure(&t, &f.model, &reports[0]).unwrap();
        for img in f.dataset.images.iter().take(4) {
            let a = infer_traced(
                &f.model,
                &apply_preprocessing(&img.tensor, &f.model.preproc).unwrap(),
            )
            .unwrap();
            let b = infer_traced(
                &c.model,
                &apply_preprocessing(&img.tensor, &c.model.preproc).unwrap(),
            )
            .unwrap();
            assert!(a.activations["conv1"].bit_eq(&b.activations["conv1"]));
        }
    }

    #[test]
    fn tss_adjusts_input_processing_axes() {
        let scale = Tensor::vector(vec![0.5, 2.0, -1.0]);
        let build = |layout: Layout, shape: Vec<usize>, axis: i64, transpose: bool| {
            let mut nodes = vec![NodeDef::new("m", Op::Mul, &["x"], "xm")
                .with_attr("axis", AttrValue::Int(axis))
                .with_weight("scale", scale.clone())];
            let mut prev = "xm";
            if transpose {
                nodes.push(
                    NodeDef::new("t", Op::Transpose, &["xm"], "xt")
                        .with_attr("perm", AttrValue::Ints(vec![0, 3, 1, 2])),
                );
                prev = "xt";
            }
            nodes.push(NodeDef::new("r", Op::Relu, &[prev], "y"));
            GraphModel {
                name: "m".into(),
                input: InputSpec {
                    name: "x".into(),
                    shape,
                    layout,
                },
                output_name: "y".into(),
                nodes,
                preproc: PreprocessingConfig::imagenet(layout),
            }
        };
        let src = build(Layout::Nchw, vec![1, 3, 2, 2], 1, false);
        let tgt = build(Layout::Nhwc, vec![1, 2, 2, 3], 3, true);
        let reports = check_tensor_structure(&src, &tgt, &match_layers(&src, &tgt));
        let c = repair_tensor_structure(&tgt, &src, &reports[0]).unwrap();
        assert_eq!(
            c.model.node("m").unwrap().attr("axis"),
            Some(&AttrValue::Int(1))
        );
        let raw = Tensor::from_u8(vec![2, 2, 3], (0..12).map(|i| i * 19).collect()).unwrap();
        let a = run(&src, &apply_preprocessing(&raw, &src.preproc).unwrap()).unwrap();
        let b = run(
            &c.model,
            &apply_preprocessing(&raw, &c.model.preproc).unwrap(),
        )
        .unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn perm_derivation() {
        assert_eq!(
            derive_perm(&[1, 32, 32, 3], &[1, 3, 32, 32]).unwrap(),
            vec![0, 3, 1, 2]
        );
        assert_eq!(derive_perm(&[1, 3, 4], &[1, 3, 4]).unwrap(), vec![0, 1, 2]);
        assert!(derive_perm(&[1, 3, 4], &[1, 3, 5]).is_err());
    }

    #[test]
    fn tss_pre_flatten_inserts_transpose() {
        let mk = |perm: Option<Vec<i64>>| {
            let mut nodes = Vec::new();
            let mut prev = "x";
            if let Some(p) = perm {
                nodes.push(
                    NodeDef::new("t", Op::Transpose, &["x"], "xt")
                        .with_attr("perm", AttrValue::Ints(p)),
                );
                prev = "xt";
            }
            nodes.push(NodeDef::new("flat", Op::Flatten, &[prev], "f"));
            GraphModel {
                name: "f".into(),
                input: InputSpec {
                    name: "x".into(),
                    shape: vec![1, 3, 4, 4],
                    layout: Layout::Nchw,
                },
                output_name: "f".into(),
                nodes,
                preproc: PreprocessingConfig::imagenet(Layout::Nchw),
            }
        };
        let (src, tgt) = (mk(None), mk(Some(vec![0, 2, 3, 1])));
        let r = check_tensor_structure(&src, &tgt, &match_layers(&src, &tgt));
        let c = repair_tensor_structure(&tgt, &src, &r[0]).unwrap();
        let fix = c
            .model
            .nodes
            .iter()
            .find(|n| n.id.starts_with("fix_transpose"))
            .unwrap();
        assert_eq!(fix.attr("perm"), Some(&AttrValue::Ints(vec![0, 3, 1, 2])));
        let x = Tensor::from_f32(vec![1, 3, 4, 4], (0..48).map(|i| i as f32).collect()).unwrap();
        assert!(run(&src, &x).unwrap().bit_eq(&run(&c.model, &x).unwrap()));
    }

    #[test]
    fn weights_copy_is_idempotent_fix() {
        let f = fixture();
        let (t, _) = inject(
            &f.model,
            &FaultSpec::new(InjectCategory::Wb, 0).layers(&["conv2"]),
        )
        .unwrap();
        let pair = LayerPair::new("conv2", "conv2");
        let once = repair_weights(&t, &f.model, &pair).unwrap().model;
        assert!(weight_report(
            f.model.node("conv2").unwrap(),
            once.node("conv2").unwrap(),
            &pair,
            0.0
        )
        .is_none());
        assert_eq!(repair_weights(&once, &f.model, &pair).unwrap().model, once);
        assert!(compare_weights(&f.model, &once, &match_layers(&f.model, &once), 0.0).is_empty());
    }

    #[test]
    fn weight_shape_mismatch_is_an_error() {
        let f = fixture();
        let mut t = f.model.clone();
        t.node_mut("conv1")
            .unwrap()
            .weights
            .insert("bias".into(), Tensor::vector(vec![0.0; 3]));
        assert!(matches!(
            repair_weights(&t, &f.model, &LayerPair::new("conv1", "conv1")),
            Err(RepairError::WeightShape { .. })
        ));
    }

    #[test]
    fn hyperparams_add_remove_overwrite() {
        let f = fixture();
        let pair = LayerPair::new("conv1", "conv1");
        let (t, _) = inject(&f.model, &FaultSpec::new(InjectCategory::Lh, 0)).unwrap();
        let mut t = t;
        t.node_mut("conv1")
            .unwrap()
            .attrs
            .insert("dilations".into(), AttrValue::Ints(vec![1, 1]));
        let reports = compare_hyperparams(&f.model, &t, &match_layers(&f.model, &t));
        assert_eq!(reports.len(), 2);
        let c = repair_hyperparams(&t, &f.model, &pair, &reports).unwrap();
        assert_eq!(
            c.model.node("conv1").unwrap().attrs,
            f.model.node("conv1").unwrap().attrs
        );
        let again = repair_hyperparams(&c.model, &f.model, &pair, &reports).unwrap();
        assert_eq!(again.model, c.model);

        let (t, _) = inject(
            &f.model,
            &FaultSpec::new(InjectCategory::Lh, 0).mode(InjectMode::OverwriteStrides),
        )
        .unwrap();
        let pair = LayerPair::new("conv2", "conv2");
        let reports = compare_hyperparams(&f.model, &t, &match_layers(&f.model, &t));
        let c = repair_hyperparams(&t, &f.model, &pair, &reports).unwrap();
        assert_eq!(labels(&c.model, &f), labels(&f.model, &f));
    }

    #[test]
    fn subgraph_splice_restores_bn() {
        let f = fixture();
        let (t, _) = inject(
            &f.model,
            &FaultSpec::new(InjectCategory::Cg, 0).mode(InjectMode::BnSplit),
        )
        .unwrap();
        let pair = LayerPair::new("conv2", "conv2");
        let r = compare_graph(&f.model, &t, &pair, &match_layers(&f.model, &t)).unwrap();
        let c = repair_subgraph(&t, &f.model, &r).unwrap();
        assert!(c
            .model
            .node("fix_bn1")
            .is_some_and(|n| n.op == Op::BatchNormalization));
        assert!(c.model.node("bn1_mul").is_none());
        assert!(
            compare_graph(&f.model, &c.model, &pair, &match_layers(&f.model, &c.model)).is_none()
        );
        for img in f.dataset.images.iter().take(4) {
            let a = run(&t, &apply_preprocessing(&img.tensor, &t.preproc).unwrap()).unwrap();
            let b = run(
                &c.model,
                &apply_preprocessing(&img.tensor, &c.model.preproc).unwrap(),
            )
            .unwrap();
            for (x, y) in a.as_f32().unwrap().iter().zip(b.as_f32().unwrap()) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn subgraph_splice_restores_pad() {
        let f = fixture();
        let (t, _) = inject(&f.model, &FaultSpec::new(InjectCategory::Cg, 0)).unwrap();
        let pair = LayerPair::new("conv2", "conv2");
        let r = compare_graph(&f.model, &t, &pair, &match_layers(&f.model, &t)).unwrap();
        let c = repair_subgraph(&t, &f.model, &r).unwrap();
        assert_eq!(labels(&c.model, &f), labels(&f.model, &f));
    }

    #[test]
    fn identical_splice_is_bit_identical() {
        let f = fixture();
        let doms = crate::ir::Dominators::compute(&f.model).unwrap();
        let sub = doms
            .subgraph("conv2", &Anchor::Node("conv1".into()))
            .unwrap();
        let report = FaultReport {
            category: FaultCategory::Cg,
            location: Location::Layer(LayerPair::new("conv2", "conv2")),
            detail: FaultDetail::Graph {
                source: sub.clone(),
                target: sub,
                divergence: String::new(),
            },
            suspicious_rank: None,
        };
        let c = repair_subgraph(&f.model, &f.model, &report).unwrap();
        for img in f.dataset.images.iter().take(3) {
            let x = apply_preprocessing(&img.tensor, &f.model.preproc).unwrap();
            assert!(run(&f.model, &x)
                .unwrap()
                .bit_eq(&run(&c.model, &x).unwrap()));
        }
    }

    #[test]
    fn escaping_value_is_a_boundary_error() {
        let f = fixture();
        let (t, _) = inject(
            &f.model,
            &FaultSpec::new(InjectCategory::Cg, 0).mode(InjectMode::BnSplit),
        )
        .unwrap();
        let pair = LayerPair::new("conv2", "conv2");
        let r = compare_graph(&f.model, &t, &pair, &match_layers(&f.model, &t)).unwrap();
        // Make an interior value visible outside the region.
        let mut t2 = t.clone();
        t2.nodes.push(NodeDef::new(
            "tap",
            Op::Relu,
            &["bn1_out_scaled"],
            "tap_out",
        ));
        assert!(matches!(
            repair_subgraph(&t2, &f.model, &r),
            Err(RepairError::Boundary(_))
        ));
    }

    #[test]
    fn acceptance_predicates() {
        let f = fixture();
        let img = &f.dataset.images[0];
        let d = DrivingImage {
            id: img.id.clone(),
            raw: img.tensor.clone(),
            source_ranking: classify(&f.model, &img.tensor).unwrap(),
        };
        assert!(!d.is_kt_improved(&f.model, &f.model).unwrap());
        assert!(d.is_fixed(&f.model, DEFAULT_KT_FIXED).unwrap());
        assert!(d.is_fixed(&f.model, 1.0).unwrap());
        let (bad, _) = inject(&f.model, &FaultSpec::new(InjectCategory::Pp, 0)).unwrap();
        if d.kt(&bad).unwrap() < 1.0 {
            assert!(d.is_kt_improved(&f.model, &bad).unwrap());
            assert!(!d.is_fixed(&bad, 1.0).unwrap());
        }
    }

    #[test]
    fn acceptance_matches_recomputed_taus() {
        let f = fixture();
        for (k, img) in f.dataset.images.iter().enumerate().take(6) {
            let d = DrivingImage {
                id: img.id.clone(),
                raw: img.tensor.clone(),
                source_ranking: classify(&f.model, &img.tensor).unwrap(),
            };
            let (a, _) = inject(
                &f.model,
                &FaultSpec::new(InjectCategory::Wb, k as u64).magnitude(0.2),
            )
            .unwrap();
            let (b, _) = inject(
                &f.model,
                &FaultSpec::new(InjectCategory::Wb, 100 + k as u64).magnitude(0.2),
            )
            .unwrap();
            let tau = |m: &GraphModel| {
                crate::stats::kendall_tau_orders(
                    &d.source_ranking.order,
                    &classify(m, &img.tensor).unwrap().order,
                )
                .unwrap() as f32
            };
            assert_eq!(d.is_kt_improved(&a, &b).unwrap(), tau(&a) > tau(&b));
        }
    }
}
