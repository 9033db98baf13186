//! JSON manifest plus little-endian f32 weight blob.
//!
//! The blob lives beside the manifest as `<manifest-stem>.bin`. Each weight in
//! the manifest references it by byte `offset` and byte `length`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{
    attr_kind, AttrKind, AttrValue, GraphModel, InputSpec, NodeDef, Op, PreprocessingConfig,
};
use super::tensor::{DType, Tensor, TensorError};
use super::validate::validate;

#[derive(Debug, thiserror::Error)]
pub enum IrError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("blob unresolved: {0}")]
    BlobUnresolved(PathBuf),
    #[error("blob range {offset}+{length} out of bounds ({blob_len} bytes) for {node}/{role}")]
    BlobRange {
        node: String,
        role: String,
        offset: u64,
        length: u64,
        blob_len: usize,
    },
    #[error("bad tensor for {node}/{role}: {source}")]
    Tensor {
        node: String,
        role: String,
        #[source]
        source: TensorError,
    },
    #[error("weight {node}/{role} is not f32")]
    NonFloatWeight { node: String, role: String },
    #[error("model failed validation: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    name: String,
    input: InputSpec,
    output: String,
    preproc: PreprocessingConfig,
    nodes: Vec<ManifestNode>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestNode {
    id: String,
    op: Op,
    inputs: Vec<String>,
    outputs: Vec<String>,
    #[serde(default)]
    attrs: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    weights: BTreeMap<String, BlobRef>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobRef {
    offset: u64,
    length: u64,
    shape: Vec<usize>,
}

/// Path of the weight blob belonging to `manifest`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn attr_from_json(name: &str, node: &str, v: &serde_json::Value) -> Result<AttrValue, IrError> {
    let bad = || IrError::Malformed(format!("attribute {name} at node {node} has value {v}"));
    let ints = |v: &serde_json::Value| -> Option<Vec<i64>> {
        v.as_array()?.iter().map(|x| x.as_i64()).collect()
    };
    match attr_kind(name) {
        Some(AttrKind::Ints) => ints(v).map(AttrValue::Ints).ok_or_else(bad),
        Some(AttrKind::Int) => v.as_i64().map(AttrValue::Int).ok_or_else(bad),
        Some(AttrKind::Float) => v
            .as_f64()
            .map(|f| AttrValue::Float(f as f32))
            .ok_or_else(bad),
        // Unknown names survive parsing so that validation can name them.
        None => {
            if let Some(i) = v.as_i64() {
                Ok(AttrValue::Int(i))
            } else if let Some(f) = v.as_f64() {
                Ok(AttrValue::Float(f as f32))
            } else {
                ints(v).map(AttrValue::Ints).ok_or_else(bad)
            }
        }
    }
}

fn attr_to_json(v: &AttrValue) -> serde_json::Value {
    match v {
        AttrValue::Int(i) => serde_json::Value::from(*i),
        AttrValue::Float(f) => serde_json::Value::from(*f as f64),
        AttrValue::Ints(xs) => serde_json::Value::from(xs.clone()),
    }
}

/// Parse manifest text against an in-memory blob.
pub fn model_from_parts(manifest: &str, blob: &[u8]) -> Result<GraphModel, IrError> {
    let m: Manifest =
        serde_json::from_str(manifest).map_err(|e| IrError::Malformed(e.to_string()))?;
    let mut nodes = Vec::with_capacity(m.nodes.len());
    for n in m.nodes {
        let mut attrs = BTreeMap::new();
        for (k, v) in &n.attrs {
            attrs.insert(k.clone(), attr_from_json(k, &n.id, v)?);
        }
        let mut weights = BTreeMap::new();
        for (role, r) in &n.weights {
            let end = r.offset.checked_add(r.length);
            let in_range = matches!(end, Some(e) if e <= blob.len() as u64) && r.length % 4 == 0;
            if !in_range {
                return Err(IrError::BlobRange {
                    node: n.id.clone(),
                    role: role.clone(),
                    offset: r.offset,
                    length: r.length,
                    blob_len: blob.len(),
                });
            }
            let bytes = &blob[r.offset as usize..(r.offset + r.length) as usize];
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_f32(r.shape.clone(), data).map_err(|source| IrError::Tensor {
                node: n.id.clone(),
                role: role.clone(),
                source,
            })?;
            weights.insert(role.clone(), t);
        }
        nodes.push(NodeDef {
            id: n.id,
            op: n.op,
            inputs: n.inputs,
            outputs: n.outputs,
            attrs,
            weights,
        });
    }
    let model = GraphModel {
        name: m.name,
        input: m.input,
        output_name: m.output,
        nodes,
        preproc: m.preproc,
    };
    let violations = validate(&model);
    if !violations.is_empty() {
        return Err(IrError::Invalid(violations));
    }
    Ok(model)
}

/// Serialize to manifest text and blob bytes.
pub fn model_to_parts(model: &GraphModel) -> Result<(String, Vec<u8>), IrError> {
    let violations = validate(model);
    if !violations.is_empty() {
        return Err(IrError::Invalid(violations));
    }
    let mut blob = Vec::new();
    let mut nodes = Vec::with_capacity(model.nodes.len());
    for n in &model.nodes {
        let mut weights = BTreeMap::new();
        for (role, t) in &n.weights {
            if t.dtype() != DType::F32 {
                return Err(IrError::NonFloatWeight {
                    node: n.id.clone(),
                    role: role.clone(),
                });
            }
            let bytes = t.to_le_bytes();
            weights.insert(
                role.clone(),
                BlobRef {
                    offset: blob.len() as u64,
                    length: bytes.len() as u64,
                    shape: t.shape().to_vec(),
                },
            );
            blob.extend_from_slice(&bytes);
        }
        nodes.push(ManifestNode {
            id: n.id.clone(),
            op: n.op,
            inputs: n.inputs.clone(),
            outputs: n.outputs.clone(),
            attrs: n
                .attrs
                .iter()
                .map(|(k, v)| (k.clone(), attr_to_json(v)))
                .collect(),
            weights,
        });
    }
    let manifest = Manifest {
        name: model.name.clone(),
        input: model.input.clone(),
        output: model.output_name.clone(),
        preproc: model.preproc.clone(),
        nodes,
    };
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| IrError::Malformed(e.to_string()))?;
    Ok((text, blob))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<GraphModel, IrError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| IrError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bin = blob_path(path);
    let blob = match fs::read(&bin) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(IrError::BlobUnresolved(bin))
        }
        Err(source) => return Err(IrError::Io { path: bin, source }),
    };
    model_from_parts(&text, &blob)
}

pub fn save_model(model: &GraphModel, path: impl AsRef<Path>) -> Result<(), IrError> {
    let path = path.as_ref();
    let (text, blob) = model_to_parts(model)?;
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| IrError::Io { path: p, source }
    };
    fs::write(path, text + "\n").map_err(io(path))?;
    let bin = blob_path(path);
    fs::write(&bin, blob).map_err(io(&bin))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::model::Layout;

    fn one_conv() -> GraphModel {
        let w = Tensor::from_f32(vec![2, 3, 1, 1], vec![1.5, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        GraphModel {
            name: "tiny".into(),
            input: InputSpec {
                name: "x".into(),
                shape: vec![1, 3, 4, 4],
                layout: Layout::Nchw,
            },
            output_name: "y".into(),
            nodes: vec![NodeDef::new("conv", Op::Conv, &["x"], "y")
                .with_weight("weight", w)
                .with_attr("strides", AttrValue::Ints(vec![1, 1]))],
            preproc: PreprocessingConfig::imagenet(Layout::Nchw),
        }
    }

    #[test]
    fn save_then_load_single_node() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_model(&one_conv(), &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back, one_conv());
        assert_eq!(back.nodes.len(), 1);
    }

    #[test]
    fn blob_holds_little_endian_f32() {
        let (text, blob) = model_to_parts(&one_conv()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let off = v["nodes"][0]["weights"]["weight"]["offset"]
            .as_u64()
            .unwrap() as usize;
        assert_eq!(&blob[off..off + 4], &[0x00, 0x00, 0xC0, 0x3F]);
    }

    #[test]
    fn missing_blob_is_unresolved() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_model(&one_conv(), &p).unwrap();
        fs::remove_file(blob_path(&p)).unwrap();
        let err = load_model(&p).unwrap_err();
        assert!(matches!(err, IrError::BlobUnresolved(_)));
        assert!(err.to_string().starts_with("blob unresolved"));
    }

    #[test]
    fn blob_out_of_range() {
        let (text, blob) = model_to_parts(&one_conv()).unwrap();
        let err = model_from_parts(&text, &blob[..8]).unwrap_err();
        assert!(matches!(err, IrError::BlobRange { .. }));
    }

    #[test]
    fn malformed_manifest() {
        assert!(matches!(
            model_from_parts("{\"name\": 3}", &[]),
            Err(IrError::Malformed(_))
        ));
        let (text, blob) = model_to_parts(&one_conv()).unwrap();
        let text = text.replace("\"Conv\"", "\"Frobnicate\"");
        assert!(matches!(
            model_from_parts(&text, &blob),
            Err(IrError::Malformed(_))
        ));
    }

    #[test]
    fn invalid_model_lists_violations() {
        let (text, blob) = model_to_parts(&one_conv()).unwrap();
        let text = text.replace(
            "\"inputs\": [\n        \"x\"",
            "\"inputs\": [\n        \"q\"",
        );
        match model_from_parts(&text, &blob) {
            Err(IrError::Invalid(v)) => {
                assert!(v.contains(&"undefined input q at node conv".into()))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn float_attrs_survive_integral_values() {
        let mut m = one_conv();
        m.nodes.push(
            NodeDef::new("clip", Op::Clip, &["y"], "z")
                .with_attr("min", AttrValue::Float(0.0))
                .with_attr("max", AttrValue::Float(6.0)),
        );
        m.output_name = "z".into();
        let (text, blob) = model_to_parts(&m).unwrap();
        assert_eq!(model_from_parts(&text, &blob).unwrap(), m);
    }
}
