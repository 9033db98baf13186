use std::collections::{HashMap, HashSet};

use super::graph::kahn_order;
use super::model::{attr_kind, AttrKind, AttrValue, GraphModel};

/// Structural problems found in a model. An empty list means the model is valid.
pub fn validate(model: &GraphModel) -> Vec<String> {
    let mut violations = Vec::new();

    if model.input.shape.is_empty() || model.input.shape.contains(&0) {
        violations.push(format!(
            "input shape {:?} is not positive",
            model.input.shape
        ));
    }
    if model.preproc.std.contains(&0.0) {
        violations.push("preprocessing std has a zero component".to_string());
    }

    let mut ids = HashSet::new();
    let mut producers: HashMap<&str, &str> = HashMap::new();
    for node in &model.nodes {
        if !ids.insert(node.id.as_str()) {
            violations.push(format!("duplicate node id {}", node.id));
        }
        if node.outputs.len() != 1 {
            violations.push(format!(
                "node {} declares {} outputs, expected 1",
                node.id,
                node.outputs.len()
            ));
        }
        for out in &node.outputs {
            if out == &model.input.name {
                violations.push(format!(
                    "node {} redefines the model input {}",
                    node.id, out
                ));
            } else if let Some(prev) = producers.insert(out, &node.id) {
                violations.push(format!(
                    "value {out} produced by both {prev} and {}",
                    node.id
                ));
            }
        }
    }

    for node in &model.nodes {
        if !node.op.input_arity().contains(&node.inputs.len()) {
            violations.push(format!(
                "node {} ({}) has {} inputs",
                node.id,
                node.op,
                node.inputs.len()
            ));
        }
        for input in &node.inputs {
            if input != &model.input.name && !producers.contains_key(input.as_str()) {
                violations.push(format!("undefined input {input} at node {}", node.id));
            }
        }
        for (name, value) in &node.attrs {
            if !node.op.allowed_attrs().contains(&name.as_str()) {
                violations.push(format!(
                    "attribute {name} not allowed on {} node {}",
                    node.op, node.id
                ));
                continue;
            }
            let kind_ok = matches!(
                (attr_kind(name), value),
                (Some(AttrKind::Ints), AttrValue::Ints(_))
                    | (Some(AttrKind::Int), AttrValue::Int(_))
                    | (Some(AttrKind::Float), AttrValue::Float(_))
            );
            if !kind_ok {
                violations.push(format!(
                    "attribute {name} at node {} has wrong kind",
                    node.id
                ));
            }
        }
        for role in node.op.required_weights() {
            if !node.weights.contains_key(*role) {
                violations.push(format!("missing weight {role} at node {}", node.id));
            }
        }
        for role in node.weights.keys() {
            if !node.op.allowed_weights().contains(&role.as_str()) {
                violations.push(format!(
                    "weight role {role} not allowed on {} node {}",
                    node.op, node.id
                ));
            }
        }
    }

    if !producers.contains_key(model.output_name.as_str()) {
        violations.push(format!(
            "output {} is not produced by any node",
            model.output_name
        ));
    }

    let consumed: HashSet<&str> = model
        .nodes
        .iter()
        .flat_map(|n| n.inputs.iter().map(String::as_str))
        .collect();
    for node in &model.nodes {
        for out in &node.outputs {
            if out != &model.output_name && !consumed.contains(out.as_str()) {
                violations.push(format!("dangling value {out} at node {}", node.id));
            }
        }
    }

    if kahn_order(model).is_none() {
        violations.push("graph is not acyclic".to_string());
    }

    violations
}
