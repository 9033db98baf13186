//! Reference interpreter for [`GraphModel`]s with an activation-tracing mode.

pub mod dataset;
pub mod kernels;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::ir::graph::{GraphError, GraphIndex};
use crate::ir::model::{GraphModel, Layout, PreprocessingConfig};
use crate::ir::tensor::Tensor;

pub use dataset::{Dataset, DatasetError, DatasetImage};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InterpError {
    #[error("graph error: {0}")]
    Graph(#[from] GraphError),
    #[error("input shape {actual:?} does not match model input {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("at node {node}: {detail}")]
    Node { node: String, detail: String },
    #[error("value {value} unavailable at node {node}")]
    MissingValue { node: String, value: String },
    #[error("preprocessing: {0}")]
    Preprocess(String),
}

/// Class indices ordered by descending score; ties go to the lower index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRanking {
    pub order: Vec<usize>,
    pub scores: Vec<f32>,
}

impl LabelRanking {
    pub fn from_scores(raw: &[f32]) -> Self {
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]).then(a.cmp(&b)));
        let scores = order.iter().map(|&i| raw[i]).collect();
        Self { order, scores }
    }

    pub fn top1(&self) -> usize {
        self.order[0]
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Per-node outputs recorded during one inference.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub activations: BTreeMap<String, Tensor>,
    pub final_scores: Tensor,
}

impl ActivationTrace {
    pub fn ranking(&self) -> LabelRanking {
        LabelRanking::from_scores(self.final_scores.as_f32().expect("scores are f32"))
    }
}

/// Normalize a raw H×W×3 image (optionally with a leading batch of 1) into a
/// batch-1 f32 tensor laid out per `cfg.layout`.
pub fn apply_preprocessing(raw: &Tensor, cfg: &PreprocessingConfig) -> Result<Tensor, InterpError> {
    let s = raw.shape();
    let (h, w, c) = match s {
        [h, w, c] | [1, h, w, c] => (*h, *w, *c),
        _ => {
            return Err(InterpError::Preprocess(format!(
                "expected HWC image, got {s:?}"
            )))
        }
    };
    if c != 3 {
        return Err(InterpError::Preprocess(format!(
            "expected 3 channels, got {c}"
        )));
    }
    let src = raw.to_f32_vec();
    let norm = |v: f32, ch: usize| (v * cfg.scale - cfg.mean[ch]) / cfg.std[ch];
    let (shape, data) = match cfg.layout {
        Layout::Nhwc => (
            vec![1, h, w, 3],
            src.iter()
                .enumerate()
                .map(|(i, &v)| norm(v, i % 3))
                .collect(),
        ),
        Layout::Nchw => {
            let mut out = vec![0.0f32; h * w * 3];
            for (i, &v) in src.iter().enumerate() {
                let (pix, ch) = (i / 3, i % 3);
                out[ch * h * w + pix] = norm(v, ch);
            }
            (vec![1, 3, h, w], out)
        }
    };
    Tensor::from_f32(shape, data).map_err(|e| InterpError::Preprocess(e.to_string()))
}

fn execute(
    model: &GraphModel,
    input: &Tensor,
    mut record: Option<&mut BTreeMap<String, Tensor>>,
) -> Result<Tensor, InterpError> {
    if input.shape() != model.input.shape.as_slice() {
        return Err(InterpError::InputShape {
            expected: model.input.shape.clone(),
            actual: input.shape().to_vec(),
        });
    }
    let index = GraphIndex::new(model);
    let order = index.topo_indices().ok_or(GraphError::Cycle)?;
    let mut values: HashMap<&str, Tensor> = HashMap::new();
    values.insert(model.input.name.as_str(), input.clone());
    for i in order {
        let node = &model.nodes[i];
        let args = node
            .inputs
            .iter()
            .map(|name| {
                values
                    .get(name.as_str())
                    .ok_or_else(|| InterpError::MissingValue {
                        node: node.id.clone(),
                        value: name.clone(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let out = kernels::eval_node(node, &args).map_err(|detail| InterpError::Node {
            node: node.id.clone(),
            detail,
        })?;
        if let Some(rec) = record.as_deref_mut() {
            rec.insert(node.id.clone(), out.clone());
        }
        values.insert(node.output(), out);
    }
    let out =
        values
            .remove(model.output_name.as_str())
            .ok_or_else(|| InterpError::MissingValue {
                node: "<output>".into(),
                value: model.output_name.clone(),
            })?;
    let n = out.len();
    Ok(out.reshaped(vec![n]).expect("non-empty"))
}

/// Run the model and return its flattened output scores.
pub fn run(model: &GraphModel, input: &Tensor) -> Result<Tensor, InterpError> {
    execute(model, input, None)
}

pub fn infer(model: &GraphModel, input: &Tensor) -> Result<LabelRanking, InterpError> {
    let scores = run(model, input)?;
    Ok(LabelRanking::from_scores(scores.as_f32().expect("f32")))
}

pub fn infer_traced(model: &GraphModel, input: &Tensor) -> Result<ActivationTrace, InterpError> {
    let mut activations = BTreeMap::new();
    let final_scores = execute(model, input, Some(&mut activations))?;
    Ok(ActivationTrace {
        activations,
        final_scores,
    })
}

/// Preprocess a raw image with the model's own configuration, then infer.
pub fn classify(model: &GraphModel, raw: &Tensor) -> Result<LabelRanking, InterpError> {
    infer(model, &apply_preprocessing(raw, &model.preproc)?)
}

pub fn trace_raw(model: &GraphModel, raw: &Tensor) -> Result<ActivationTrace, InterpError> {
    infer_traced(model, &apply_preprocessing(raw, &model.preproc)?)
}

/// Output shape of every node, computed without running kernels.
pub fn infer_shapes(model: &GraphModel) -> Result<BTreeMap<String, Vec<usize>>, InterpError> {
    let index = GraphIndex::new(model);
    let order = index.topo_indices().ok_or(GraphError::Cycle)?;
    let mut values: HashMap<&str, Vec<usize>> = HashMap::new();
    values.insert(model.input.name.as_str(), model.input.shape.clone());
    let mut out = BTreeMap::new();
    for i in order {
        let node = &model.nodes[i];
        let args = node
            .inputs
            .iter()
            .map(|name| {
                values.get(name.as_str()).map(Vec::as_slice).ok_or_else(|| {
                    InterpError::MissingValue {
                        node: node.id.clone(),
                        value: name.clone(),
                    }
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let shape = kernels::output_shape(node, &args).map_err(|detail| InterpError::Node {
            node: node.id.clone(),
            detail,
        })?;
        values.insert(node.output(), shape.clone());
        out.insert(node.id.clone(), shape);
    }
    Ok(out)
}
