use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// Operators understood by the interpreter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Op {
    #[serde(alias = "Conv2D")]
    Conv,
    BatchNormalization,
    Pad,
    Transpose,
    Flatten,
    Reshape,
    Add,
    Mul,
    Gather,
    Unsqueeze,
    Clip,
    Relu,
    #[serde(alias = "GlobalAvgPool")]
    GlobalAveragePool,
    Gemm,
    Softmax,
}

impl Op {
    pub const ALL: [Op; 15] = [
        Op::Conv,
        Op::BatchNormalization,
        Op::Pad,
        Op::Transpose,
        Op::Flatten,
        Op::Reshape,
        Op::Add,
        Op::Mul,
        Op::Gather,
        Op::Unsqueeze,
        Op::Clip,
        Op::Relu,
        Op::GlobalAveragePool,
        Op::Gemm,
        Op::Softmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Op::Conv => "Conv",
            Op::BatchNormalization => "BatchNormalization",
            Op::Pad => "Pad",
            Op::Transpose => "Transpose",
            Op::Flatten => "Flatten",
            Op::Reshape => "Reshape",
            Op::Add => "Add",
            Op::Mul => "Mul",
            Op::Gather => "Gather",
            Op::Unsqueeze => "Unsqueeze",
            Op::Clip => "Clip",
            Op::Relu => "Relu",
            Op::GlobalAveragePool => "GlobalAveragePool",
            Op::Gemm => "Gemm",
            Op::Softmax => "Softmax",
        }
    }

    /// Hyperparameters this operator accepts.
    pub fn allowed_attrs(self) -> &'static [&'static str] {
        match self {
            Op::Conv => &["padding", "strides", "kernel_shape", "dilations"],
            Op::BatchNormalization => &["epsilon"],
            Op::Clip => &["min", "max"],
            Op::Gather | Op::Unsqueeze | Op::Add | Op::Mul => &["axis"],
            Op::Transpose => &["perm"],
            _ => &[],
        }
    }

    /// Weight roles the operator cannot run without.
    pub fn required_weights(self) -> &'static [&'static str] {
        match self {
            Op::Conv | Op::Gemm => &["weight"],
            Op::BatchNormalization => &["scale", "bias", "mean", "var"],
            Op::Pad => &["pads_spec"],
            Op::Reshape => &["target_shape"],
            Op::Gather => &["indices"],
            _ => &[],
        }
    }

    /// Weight roles the operator may carry.
    pub fn allowed_weights(self) -> &'static [&'static str] {
        match self {
            Op::Conv | Op::Gemm => &["weight", "bias"],
            Op::BatchNormalization => &["scale", "bias", "mean", "var"],
            Op::Pad => &["pads_spec"],
            Op::Reshape => &["target_shape"],
            Op::Gather => &["indices"],
            Op::Transpose => &["perm"],
            Op::Add => &["bias"],
            Op::Mul => &["scale"],
            _ => &[],
        }
    }

    /// Accepted number of value inputs.
    pub fn input_arity(self) -> std::ops::RangeInclusive<usize> {
        match self {
            Op::Add | Op::Mul => 1..=2,
            _ => 1..=1,
        }
    }

    /// Operators whose weights are learned parameters rather than structure.
    pub fn is_parametric(self) -> bool {
        matches!(self, Op::Conv | Op::Gemm | Op::BatchNormalization)
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Learned-parameter weight roles, as opposed to structural ones like `perm`.
pub const PARAMETER_ROLES: [&str; 5] = ["weight", "bias", "scale", "mean", "var"];

/// Scalar or integer-list attribute value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Int(i64),
    Float(f32),
    Ints(Vec<i64>),
}

impl AttrValue {
    pub fn as_ints(&self) -> Option<&[i64]> {
        match self {
            AttrValue::Ints(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            AttrValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f32> {
        match self {
            AttrValue::Float(v) => Some(*v),
            AttrValue::Int(v) => Some(*v as f32),
            _ => None,
        }
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Int(v) => write!(f, "{v}"),
            AttrValue::Float(v) => write!(f, "{v}"),
            AttrValue::Ints(v) => write!(f, "{v:?}"),
        }
    }
}

/// The value kind an attribute name carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttrKind {
    Int,
    Float,
    Ints,
}

pub fn attr_kind(name: &str) -> Option<AttrKind> {
    match name {
        "padding" | "strides" | "kernel_shape" | "dilations" | "perm" => Some(AttrKind::Ints),
        "epsilon" | "min" | "max" => Some(AttrKind::Float),
        "axis" => Some(AttrKind::Int),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeDef {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub attrs: BTreeMap<String, AttrValue>,
    pub weights: BTreeMap<String, Tensor>,
}

impl NodeDef {
    pub fn new(id: impl Into<String>, op: Op, inputs: &[&str], output: &str) -> Self {
        Self {
            id: id.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: vec![output.to_string()],
            attrs: BTreeMap::new(),
            weights: BTreeMap::new(),
        }
    }

    pub fn with_attr(mut self, name: &str, value: AttrValue) -> Self {
        self.attrs.insert(name.to_string(), value);
        self
    }

    pub fn with_weight(mut self, role: &str, tensor: Tensor) -> Self {
        self.weights.insert(role.to_string(), tensor);
        self
    }

    /// The single value this node produces.
    pub fn output(&self) -> &str {
        &self.outputs[0]
    }

    pub fn attr(&self, name: &str) -> Option<&AttrValue> {
        self.attrs.get(name)
    }

    pub fn weight(&self, role: &str) -> Option<&Tensor> {
        self.weights.get(role)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    #[serde(rename = "NCHW")]
    Nchw,
    #[serde(rename = "NHWC")]
    Nhwc,
}

impl Layout {
    /// Position of the channel axis in a rank-4 tensor.
    pub fn channel_axis(self) -> usize {
        match self {
            Layout::Nchw => 1,
            Layout::Nhwc => 3,
        }
    }

    /// Axis `i` of a tensor in `self` layout holds the same dimension as axis
    /// `result[i]` of the equivalent tensor in `other` layout.
    pub fn axis_map_to(self, other: Layout) -> [usize; 4] {
        let dims = |l: Layout| match l {
            Layout::Nchw => ['N', 'C', 'H', 'W'],
            Layout::Nhwc => ['N', 'H', 'W', 'C'],
        };
        let (from, to) = (dims(self), dims(other));
        let mut out = [0; 4];
        for (i, d) in from.iter().enumerate() {
            out[i] = to.iter().position(|x| x == d).unwrap();
        }
        out
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Nchw => "NCHW",
            Layout::Nhwc => "NHWC",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub layout: Layout,
}

/// Affine input normalization: `v = (raw * scale - mean[c]) / std[c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessingConfig {
    pub scale: f32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub layout: Layout,
}

impl PreprocessingConfig {
    /// torchvision-style ImageNet normalization.
    pub fn imagenet(layout: Layout) -> Self {
        Self {
            scale: 1.0 / 255.0,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            layout,
        }
    }

    /// Keras/TF "inception" normalization to [-1, 1].
    pub fn inception(layout: Layout) -> Self {
        Self {
            scale: 1.0 / 127.5,
            mean: [1.0, 1.0, 1.0],
            std: [1.0, 1.0, 1.0],
            layout,
        }
    }

    /// Names of fields that differ from `other`.
    pub fn differing_fields(&self, other: &Self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.scale.to_bits() != other.scale.to_bits() {
            out.push("scale");
        }
        if self.mean.map(f32::to_bits) != other.mean.map(f32::to_bits) {
            out.push("mean");
        }
        if self.std.map(f32::to_bits) != other.std.map(f32::to_bits) {
            out.push("std");
        }
        if self.layout != other.layout {
            out.push("layout");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphModel {
    pub name: String,
    pub input: InputSpec,
    pub output_name: String,
    pub nodes: Vec<NodeDef>,
    pub preproc: PreprocessingConfig,
}

impl GraphModel {
    pub fn node(&self, id: &str) -> Option<&NodeDef> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut NodeDef> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Node producing value `name`, if any.
    pub fn producer(&self, value: &str) -> Option<&NodeDef> {
        self.nodes
            .iter()
            .find(|n| n.outputs.iter().any(|o| o == value))
    }

    /// Nodes consuming value `name`, in declaration order.
    pub fn consumers<'a>(&'a self, value: &'a str) -> impl Iterator<Item = &'a NodeDef> + 'a {
        self.nodes
            .iter()
            .filter(move |n| n.inputs.iter().any(|i| i == value))
    }

    pub fn nodes_of(&self, op: Op) -> impl Iterator<Item = &NodeDef> {
        self.nodes.iter().filter(move |n| n.op == op)
    }

    /// Rename every use of value `from` to `to`.
    pub fn rename_uses(&mut self, from: &str, to: &str) {
        for n in &mut self.nodes {
            for i in &mut n.inputs {
                if i == from {
                    *i = to.to_string();
                }
            }
        }
        if self.output_name == from {
            self.output_name = to.to_string();
        }
    }
}
