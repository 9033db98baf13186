//! Seeded fault injection and the small "desk" classifier used as a Source.
//!
//! Each injection mutates a copy of a valid model at recorded locations so the
//! localizer and repairer can be scored against known ground truth.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::interp::{classify, Dataset};
use crate::ir::{
    validate, AttrValue, GraphModel, InputSpec, Layout, NodeDef, Op, PreprocessingConfig, Tensor,
};

/// Default Gaussian noise stddev for weight faults.
pub const DEFAULT_WB_STDDEV: f64 = 0.05;
/// Default bit width for quantize-dequantize weight faults.
pub const DEFAULT_QUANT_BITS: f64 = 8.0;
/// Default upper bound of the Clip that replaces a Relu.
pub const DEFAULT_CLIP_MAX: f64 = 0.1;
/// Minimum top-1 vs top-2 probability gap for generated inputs.
pub const MIN_MARGIN: f32 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InjectCategory {
    Pp,
    Id,
    Tss,
    Wb,
    Lh,
    Cg,
    OutOfTaxonomy,
}

impl fmt::Display for InjectCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InjectCategory::Pp => "PP",
            InjectCategory::Id => "ID",
            InjectCategory::Tss => "TSS",
            InjectCategory::Wb => "WB",
            InjectCategory::Lh => "LH",
            InjectCategory::Cg => "CG",
            InjectCategory::OutOfTaxonomy => "OUT_OF_TAXONOMY",
        })
    }
}

impl std::str::FromStr for InjectCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "PP" => InjectCategory::Pp,
            "ID" => InjectCategory::Id,
            "TSS" => InjectCategory::Tss,
            "WB" => InjectCategory::Wb,
            "LH" => InjectCategory::Lh,
            "CG" => InjectCategory::Cg,
            "OUT_OF_TAXONOMY" | "OOT" => InjectCategory::OutOfTaxonomy,
            _ => return Err(format!("unknown fault category {s}")),
        })
    }
}

/// Flavor of a fault within its category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectMode {
    /// WB: additive Gaussian noise, magnitude = stddev.
    Noise,
    /// WB: symmetric per-tensor quantize-dequantize, magnitude = bits.
    Quantize,
    /// LH: remove the `padding` attribute.
    DropPadding,
    /// LH: set `strides` to `[m, m]`, magnitude = stride.
    OverwriteStrides,
    /// CG: BatchNormalization rewritten as an equivalent Mul then Add.
    BnSplit,
    /// CG: a Pad node feeding a Conv is removed, changing values.
    DropPad,
}

impl std::str::FromStr for InjectMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown injection mode {s}"))
    }
}

impl InjectMode {
    fn default_for(category: InjectCategory) -> Option<Self> {
        match category {
            InjectCategory::Wb => Some(InjectMode::Noise),
            InjectCategory::Lh => Some(InjectMode::DropPadding),
            InjectCategory::Cg => Some(InjectMode::DropPad),
            _ => None,
        }
    }

    fn category(self) -> InjectCategory {
        match self {
            InjectMode::Noise | InjectMode::Quantize => InjectCategory::Wb,
            InjectMode::DropPadding | InjectMode::OverwriteStrides => InjectCategory::Lh,
            InjectMode::BnSplit | InjectMode::DropPad => InjectCategory::Cg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub category: InjectCategory,
    /// Layers to mutate; empty selects a default for the category.
    #[serde(default)]
    pub target_layers: Vec<String>,
    #[serde(default)]
    pub magnitude: Option<f64>,
    #[serde(default)]
    pub mode: Option<InjectMode>,
    pub seed: u64,
}

impl FaultSpec {
    pub fn new(category: InjectCategory, seed: u64) -> Self {
        Self {
            category,
            target_layers: Vec::new(),
            magnitude: None,
            mode: None,
            seed,
        }
    }

    pub fn layers(mut self, layers: &[&str]) -> Self {
        self.target_layers = layers.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn magnitude(mut self, m: f64) -> Self {
        self.magnitude = Some(m);
        self
    }

    pub fn mode(mut self, mode: InjectMode) -> Self {
        self.mode = Some(mode);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDigest {
    pub id: String,
    pub before: Option<String>,
    pub after: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub spec: FaultSpec,
    /// Node ids changed, added or removed; `model-input` for input changes.
    pub touched: Vec<String>,
    pub digests: Vec<NodeDigest>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InjectError {
    #[error("injection not applicable: {0}")]
    Inapplicable(String),
    #[error("injected model is invalid: {0:?}")]
    Invalid(Vec<String>),
}

const INPUT_TOUCH: &str = "model-input";

fn inapplicable(msg: impl Into<String>) -> InjectError {
    InjectError::Inapplicable(msg.into())
}

/// SHA-256 over a canonical byte encoding of the node.
pub fn node_digest(node: &NodeDef) -> String {
    let mut h = Sha256::new();
    h.update(node.id.as_bytes());
    h.update([0]);
    h.update(node.op.name().as_bytes());
    for v in node.inputs.iter().chain(&node.outputs) {
        h.update([1]);
        h.update(v.as_bytes());
    }
    for (k, v) in &node.attrs {
        h.update([2]);
        h.update(k.as_bytes());
        h.update(v.to_string().as_bytes());
    }
    for (role, t) in &node.weights {
        h.update([3]);
        h.update(role.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn input_digest(model: &GraphModel) -> String {
    let text = serde_json::to_string(&(&model.input, &model.preproc)).expect("serializable");
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn resolve_layers(
    model: &GraphModel,
    spec: &FaultSpec,
    fallback: impl FnOnce() -> Vec<String>,
) -> Result<Vec<String>, InjectError> {
    let layers = if spec.target_layers.is_empty() {
        fallback()
    } else {
        spec.target_layers.clone()
    };
    if layers.is_empty() {
        return Err(inapplicable("no layer to mutate"));
    }
    for l in &layers {
        if model.node(l).is_none() {
            return Err(inapplicable(format!("unknown layer {l}")));
        }
    }
    Ok(layers)
}

fn fresh_id(model: &GraphModel, base: &str) -> String {
    let taken = |s: &str| {
        model
            .nodes
            .iter()
            .any(|n| n.id == s || n.outputs.iter().any(|o| o == s))
            || model.input.name == s
    };
    if !taken(base) {
        return base.to_string();
    }
    (2..)
        .map(|i| format!("{base}_{i}"))
        .find(|s| !taken(s))
        .unwrap()
}

fn quantize(values: &mut [f32], bits: u32) {
    let levels = ((1u64 << (bits - 1)) - 1) as f32;
    let max = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return;
    }
    let step = max / levels;
    for v in values {
        *v = (*v / step).round() * step;
    }
}

/// Rewrite the model input to NHWC and return the value name that carries the
/// original NCHW-shaped input.
fn to_nhwc_input(model: &mut GraphModel) -> Result<String, InjectError> {
    if model.input.layout != Layout::Nchw || model.input.shape.len() != 4 {
        return Err(inapplicable("input must be rank-4 NCHW"));
    }
    let s = model.input.shape.clone();
    let original = model.input.name.clone();
    let renamed = fresh_id(model, &format!("{original}_nhwc"));
    model.input = InputSpec {
        name: renamed.clone(),
        shape: vec![s[0], s[2], s[3], s[1]],
        layout: Layout::Nhwc,
    };
    model.preproc.layout = Layout::Nhwc;
    Ok(renamed)
}

/// Apply `spec` to a copy of `source`.
pub fn inject(
    source: &GraphModel,
    spec: &FaultSpec,
) -> Result<(GraphModel, InjectionRecord), InjectError> {
    let mut model = source.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mode = spec.mode.or(InjectMode::default_for(spec.category));
    if let Some(m) = mode {
        if m.category() != spec.category {
            return Err(inapplicable(format!(
                "mode {m:?} does not belong to {}",
                spec.category
            )));
        }
    }
    let mut touched: Vec<String> = Vec::new();
    match spec.category {
        InjectCategory::Pp => {
            model.preproc = PreprocessingConfig::inception(model.preproc.layout);
            if model.preproc == source.preproc {
                return Err(inapplicable(
                    "source already uses the alternate preprocessing",
                ));
            }
            touched.push(INPUT_TOUCH.into());
        }
        InjectCategory::Id => {
            let s = model.input.shape.clone();
            let original = model.input.name.clone();
            let renamed = to_nhwc_input(&mut model)?;
            let id = fresh_id(&model, "input_reshape");
            let target: Vec<f32> = s.iter().map(|&d| d as f32).collect();
            let node = NodeDef::new(id.clone(), Op::Reshape, &[&renamed], &original)
                .with_weight("target_shape", Tensor::vector(target));
            model.nodes.insert(0, node);
            touched.extend([INPUT_TOUCH.to_string(), id]);
        }
        InjectCategory::Tss => {
            let original = model.input.name.clone();
            let renamed = to_nhwc_input(&mut model)?;
            let id = fresh_id(&model, "input_transpose");
            // Yields the right shape with H and W exchanged.
            let node = NodeDef::new(id.clone(), Op::Transpose, &[&renamed], &original)
                .with_attr("perm", AttrValue::Ints(vec![0, 3, 2, 1]));
            model.nodes.insert(0, node);
            touched.extend([INPUT_TOUCH.to_string(), id]);
        }
        InjectCategory::Wb => {
            let mode = mode.expect("WB has a default mode");
            let layers = resolve_layers(source, spec, || match mode {
                InjectMode::Quantize => source
                    .nodes
                    .iter()
                    .filter(|n| n.op.is_parametric())
                    .map(|n| n.id.clone())
                    .collect(),
                _ => {
                    let convs: Vec<String> =
                        source.nodes_of(Op::Conv).map(|n| n.id.clone()).collect();
                    convs.choose(&mut rng).cloned().into_iter().collect()
                }
            })?;
            for id in &layers {
                let node = model.node_mut(id).expect("resolved");
                if !node.op.is_parametric() {
                    return Err(inapplicable(format!("{id} has no trainable weights")));
                }
                match mode {
                    InjectMode::Noise => {
                        let sd = spec.magnitude.unwrap_or(DEFAULT_WB_STDDEV);
                        let normal = Normal::new(0.0, sd)
                            .map_err(|e| inapplicable(format!("bad stddev {sd}: {e}")))?;
                        if sd > 0.0 {
                            let w = node.weights.get_mut("weight").expect("parametric");
                            for v in w.as_f32_mut().expect("f32 weights") {
                                *v += normal.sample(&mut rng) as f32;
                            }
                        }
                    }
                    InjectMode::Quantize => {
                        let bits = spec.magnitude.unwrap_or(DEFAULT_QUANT_BITS);
                        if !(2.0..=24.0).contains(&bits) || bits.fract() != 0.0 {
                            return Err(inapplicable(format!(
                                "bits must be an integer in 2..=24, got {bits}"
                            )));
                        }
                        for t in node.weights.values_mut() {
                            quantize(t.as_f32_mut().expect("f32 weights"), bits as u32);
                        }
                    }
                    _ => unreachable!(),
                }
                touched.push(id.clone());
            }
        }
        InjectCategory::Lh => {
            let mode = mode.expect("LH has a default mode");
            let layers = resolve_layers(source, spec, || match mode {
                InjectMode::DropPadding => source
                    .nodes
                    .iter()
                    .find(|n| n.op == Op::Conv && n.attr("padding").is_some())
                    .map(|n| n.id.clone())
                    .into_iter()
                    .collect(),
                _ => source
                    .nodes_of(Op::Conv)
                    .last()
                    .map(|n| n.id.clone())
                    .into_iter()
                    .collect(),
            })?;
            for id in &layers {
                let node = model.node_mut(id).expect("resolved");
                if node.op != Op::Conv {
                    return Err(inapplicable(format!("{id} is not a Conv")));
                }
                match mode {
                    InjectMode::DropPadding => {
                        if node.attrs.remove("padding").is_none() {
                            return Err(inapplicable(format!("{id} has no padding")));
                        }
                    }
                    InjectMode::OverwriteStrides => {
                        let s = spec.magnitude.unwrap_or(2.0);
                        if s < 1.0 || s.fract() != 0.0 {
                            return Err(inapplicable(format!(
                                "stride must be a positive integer, got {s}"
                            )));
                        }
                        let s = s as i64;
                        if node.attr("strides") == Some(&AttrValue::Ints(vec![s, s])) {
                            return Err(inapplicable(format!(
                                "{id} already has strides [{s}, {s}]"
                            )));
                        }
                        node.attrs
                            .insert("strides".into(), AttrValue::Ints(vec![s, s]));
                    }
                    _ => unreachable!(),
                }
                touched.push(id.clone());
            }
        }
        InjectCategory::Cg => match mode.expect("CG has a default mode") {
            InjectMode::DropPad => {
                let layers = resolve_layers(source, spec, || {
                    source
                        .nodes_of(Op::Pad)
                        .take(1)
                        .map(|n| n.id.clone())
                        .collect()
                })?;
                for id in &layers {
                    let node = model.node(id).expect("resolved").clone();
                    if node.op != Op::Pad {
                        return Err(inapplicable(format!("{id} is not a Pad")));
                    }
                    let rewired: Vec<String> = model
                        .consumers(node.output())
                        .map(|n| n.id.clone())
                        .collect();
                    model.nodes.retain(|n| n.id != *id);
                    model.rename_uses(node.output(), &node.inputs[0]);
                    touched.push(id.clone());
                    touched.extend(rewired);
                }
            }
            InjectMode::BnSplit => {
                let layers = resolve_layers(source, spec, || {
                    source
                        .nodes_of(Op::BatchNormalization)
                        .take(1)
                        .map(|n| n.id.clone())
                        .collect()
                })?;
                for id in &layers {
                    let bn = model.node(id).expect("resolved").clone();
                    if bn.op != Op::BatchNormalization {
                        return Err(inapplicable(format!("{id} is not a BatchNormalization")));
                    }
                    let eps = bn
                        .attr("epsilon")
                        .and_then(AttrValue::as_float)
                        .unwrap_or(1e-5);
                    let get = |r: &str| bn.weight(r).expect("validated").to_f32_vec();
                    let (gamma, beta, mean, var) =
                        (get("scale"), get("bias"), get("mean"), get("var"));
                    let mul_scale: Vec<f32> = gamma
                        .iter()
                        .zip(&var)
                        .map(|(g, v)| g / (v + eps).sqrt())
                        .collect();
                    let add_bias: Vec<f32> = beta
                        .iter()
                        .zip(&mean)
                        .zip(&mul_scale)
                        .map(|((b, m), s)| b - m * s)
                        .collect();
                    let mul_id = fresh_id(&model, &format!("{id}_mul"));
                    let mid = fresh_id(&model, &format!("{}_scaled", bn.output()));
                    let add_id = fresh_id(&model, &format!("{id}_add"));
                    let mul = NodeDef::new(mul_id.clone(), Op::Mul, &[&bn.inputs[0]], &mid)
                        .with_attr("axis", AttrValue::Int(1))
                        .with_weight("scale", Tensor::vector(mul_scale));
                    let add = NodeDef::new(add_id.clone(), Op::Add, &[&mid], bn.output())
                        .with_attr("axis", AttrValue::Int(1))
                        .with_weight("bias", Tensor::vector(add_bias));
                    let pos = model.node_index(id).expect("resolved");
                    model.nodes.splice(pos..=pos, [mul, add]);
                    touched.extend([id.clone(), mul_id, add_id]);
                }
            }
            _ => unreachable!(),
        },
        InjectCategory::OutOfTaxonomy => {
            let layers = resolve_layers(source, spec, || {
                source
                    .nodes_of(Op::Relu)
                    .last()
                    .map(|n| n.id.clone())
                    .into_iter()
                    .collect()
            })?;
            let hi = spec.magnitude.unwrap_or(DEFAULT_CLIP_MAX) as f32;
            for id in &layers {
                let node = model.node_mut(id).expect("resolved");
                if node.op != Op::Relu {
                    return Err(inapplicable(format!("{id} is not a Relu")));
                }
                node.op = Op::Clip;
                node.attrs.insert("min".into(), AttrValue::Float(0.0));
                node.attrs.insert("max".into(), AttrValue::Float(hi));
                touched.push(id.clone());
            }
        }
    }

    let violations = validate(&model);
    if !violations.is_empty() {
        return Err(InjectError::Invalid(violations));
    }
    let digests = touched
        .iter()
        .map(|id| {
            if id == INPUT_TOUCH {
                NodeDigest {
                    id: id.clone(),
                    before: Some(input_digest(source)),
                    after: Some(input_digest(&model)),
                }
            } else {
                NodeDigest {
                    id: id.clone(),
                    before: source.node(id).map(node_digest),
                    after: model.node(id).map(node_digest),
                }
            }
        })
        .collect();
    let record = InjectionRecord {
        spec: spec.clone(),
        touched,
        digests,
    };
    Ok((model, record))
}

/// A generated Source model and its input set.
#[derive(Debug, Clone)]
pub struct DeskFixture {
    pub model: GraphModel,
    pub dataset: Dataset,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, sd: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, sd).expect("positive stddev");
    Tensor::from_f32(shape, (0..n).map(|_| dist.sample(rng) as f32).collect()).expect("shape")
}

fn uniform_tensor(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn conv(
    rng: &mut ChaCha8Rng,
    id: &str,
    input: &str,
    output: &str,
    c_in: usize,
    c_out: usize,
) -> NodeDef {
    let fan_in = (c_in * 9) as f64;
    NodeDef::new(id, Op::Conv, &[input], output)
        .with_attr("kernel_shape", AttrValue::Ints(vec![3, 3]))
        .with_attr("strides", AttrValue::Ints(vec![1, 1]))
        .with_weight(
            "weight",
            normal_tensor(rng, vec![c_out, c_in, 3, 3], (2.0 / fan_in).sqrt()),
        )
        .with_weight("bias", normal_tensor(rng, vec![c_out], 0.05))
}

fn head(rng: &mut ChaCha8Rng, input: &str, features: usize) -> Vec<NodeDef> {
    vec![
        NodeDef::new("gap", Op::GlobalAveragePool, &[input], "pooled"),
        NodeDef::new("flatten", Op::Flatten, &["pooled"], "features"),
        NodeDef::new("gemm", Op::Gemm, &["features"], "logits")
            .with_weight(
                "weight",
                normal_tensor(rng, vec![features, 10], 3.0 / (features as f64).sqrt()),
            )
            .with_weight("bias", normal_tensor(rng, vec![10], 0.1)),
        NodeDef::new("softmax", Op::Softmax, &["logits"], "probs"),
    ]
}

fn desk_graph(seed: u64) -> GraphModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = vec![
        conv(&mut rng, "conv1", "input", "conv1_out", 3, 8)
            .with_attr("padding", AttrValue::Ints(vec![1, 1, 1, 1])),
        NodeDef::new("bn1", Op::BatchNormalization, &["conv1_out"], "bn1_out")
            .with_attr("epsilon", AttrValue::Float(1e-5))
            .with_weight("scale", uniform_tensor(&mut rng, 8, 0.8, 1.2))
            .with_weight("bias", normal_tensor(&mut rng, vec![8], 0.1))
            .with_weight("mean", normal_tensor(&mut rng, vec![8], 0.1))
            .with_weight("var", uniform_tensor(&mut rng, 8, 0.5, 1.5)),
        NodeDef::new("relu1", Op::Relu, &["bn1_out"], "relu1_out"),
        NodeDef::new("pad1", Op::Pad, &["relu1_out"], "pad1_out").with_weight(
            "pads_spec",
            Tensor::vector(vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]),
        ),
        conv(&mut rng, "conv2", "pad1_out", "conv2_out", 8, 16),
        NodeDef::new("relu2", Op::Relu, &["conv2_out"], "relu2_out"),
    ];
    nodes.extend(head(&mut rng, "relu2_out", 16));
    GraphModel {
        name: format!("desk-{seed}"),
        input: InputSpec {
            name: "input".into(),
            shape: vec![1, 3, 16, 16],
            layout: Layout::Nchw,
        },
        output_name: "probs".into(),
        nodes,
        preproc: PreprocessingConfig::imagenet(Layout::Nchw),
    }
}

/// A chain of `depth` padded 3x3 Conv+Relu blocks before the same classifier
/// head as the desk model.
pub fn make_chain_model(seed: u64, depth: usize) -> GraphModel {
    assert!(depth >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = Vec::new();
    let mut prev = "input".to_string();
    let mut c_in = 3;
    for i in 1..=depth {
        let (cv, out) = (format!("conv{i}"), format!("relu{i}_out"));
        nodes.push(
            conv(&mut rng, &cv, &prev, &format!("conv{i}_out"), c_in, 8)
                .with_attr("padding", AttrValue::Ints(vec![1, 1, 1, 1])),
        );
        nodes.push(NodeDef::new(
            format!("relu{i}"),
            Op::Relu,
            &[&format!("conv{i}_out")],
            &out,
        ));
        prev = out;
        c_in = 8;
    }
    nodes.extend(head(&mut rng, &prev, 8));
    GraphModel {
        name: format!("chain{depth}-{seed}"),
        input: InputSpec {
            name: "input".into(),
            shape: vec![1, 3, 16, 16],
            layout: Layout::Nchw,
        },
        output_name: "probs".into(),
        nodes,
        preproc: PreprocessingConfig::imagenet(Layout::Nchw),
    }
}

fn synthetic_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(20.0..235.0));
    let amp = rng.random_range(10.0f32..90.0);
    let (fx, fy) = (
        rng.random_range(0.05f32..1.2),
        rng.random_range(0.05f32..1.2),
    );
    let phase: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f32::consts::TAU));
    let noise = Normal::new(0.0f32, 12.0).expect("positive");
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = base[c]
                    + amp * (fx * x as f32 + fy * y as f32 + phase[c]).sin()
                    + noise.sample(rng);
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Tensor::from_u8(vec![h, w, 3], data).expect("shape")
}

/// Top-1 minus top-2 score.
pub fn score_margin(model: &GraphModel, raw: &Tensor) -> Option<f32> {
    let r = classify(model, raw).ok()?;
    Some(r.scores[0] - r.scores.get(1).copied().unwrap_or(0.0))
}

/// `n` seeded u8 HWC images for `model`, each resampled until its score
/// margin reaches [`MIN_MARGIN`].
pub fn synthetic_dataset(model: &GraphModel, seed: u64, n: usize) -> Dataset {
    let s = &model.input.shape;
    let (h, w) = match model.input.layout {
        Layout::Nchw => (s[2], s[3]),
        Layout::Nhwc => (s[1], s[2]),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let mut images = Vec::with_capacity(n);
    for _ in 0..n {
        let mut img = synthetic_image(&mut rng, h, w);
        for _ in 0..64 {
            if score_margin(model, &img).is_some_and(|m| m >= MIN_MARGIN) {
                break;
            }
            img = synthetic_image(&mut rng, h, w);
        }
        images.push(img);
    }
    let mut ds = Dataset::from_tensors(images);
    for img in &ds.images {
        if let Ok(r) = classify(model, &img.tensor) {
            ds.labels.insert(img.id.clone(), r.top1());
        }
    }
    ds
}

/// The desk classifier (input 1x3x16x16, 10 classes) and `n_images` inputs.
pub fn make_desk_model(seed: u64, n_images: usize) -> DeskFixture {
    let model = desk_graph(seed);
    let dataset = synthetic_dataset(&model, seed, n_images);
    DeskFixture { model, dataset }
}
