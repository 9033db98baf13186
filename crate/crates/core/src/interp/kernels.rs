//! Reference operator kernels. Every kernel first derives its output shape
//! through [`output_shape`], so static shape inference and execution agree.

use crate::ir::model::{AttrValue, NodeDef, Op};
use crate::ir::tensor::{strides, Tensor};

fn ints_attr(node: &NodeDef, name: &str) -> Result<Option<Vec<i64>>, String> {
    match node.attr(name) {
        None => Ok(None),
        Some(AttrValue::Ints(v)) => Ok(Some(v.clone())),
        Some(other) => Err(format!("attribute {name} must be an int list, got {other}")),
    }
}

fn axis_attr(node: &NodeDef, default: i64, rank: usize) -> Result<usize, String> {
    let axis = match node.attr("axis") {
        None => default,
        Some(AttrValue::Int(a)) => *a,
        Some(other) => return Err(format!("axis must be an int, got {other}")),
    };
    let a = if axis < 0 { axis + rank as i64 } else { axis };
    if a < 0 || a as usize >= rank.max(1) {
        return Err(format!("axis {axis} out of range for rank {rank}"));
    }
    Ok(a as usize)
}

fn weight<'a>(node: &'a NodeDef, role: &str) -> Result<&'a Tensor, String> {
    node.weight(role)
        .ok_or_else(|| format!("missing weight {role}"))
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: [usize; 2],
    pub dilation: [usize; 2],
    /// top, left, bottom, right
    pub pad: [usize; 4],
}

fn conv_geometry(node: &NodeDef, w_shape: &[usize]) -> Result<ConvGeometry, String> {
    if w_shape.len() != 4 {
        return Err(format!("conv weight must be rank 4, got {w_shape:?}"));
    }
    let (kh, kw) = (w_shape[2], w_shape[3]);
    if let Some(k) = ints_attr(node, "kernel_shape")? {
        if k != [kh as i64, kw as i64] {
            return Err(format!(
                "kernel_shape {k:?} disagrees with weight {w_shape:?}"
            ));
        }
    }
    let pair = |name: &str| -> Result<[usize; 2], String> {
        match ints_attr(node, name)? {
            None => Ok([1, 1]),
            Some(v) if v.len() == 2 && v.iter().all(|&x| x >= 1) => {
                Ok([v[0] as usize, v[1] as usize])
            }
            Some(v) => Err(format!("{name} must be two positive ints, got {v:?}")),
        }
    };
    let stride = pair("strides")?;
    let dilation = pair("dilations")?;
    let pad = match ints_attr(node, "padding")? {
        None => [0; 4],
        Some(v) if v.iter().all(|&x| x >= 0) && v.len() == 4 => {
            [v[0] as usize, v[1] as usize, v[2] as usize, v[3] as usize]
        }
        Some(v) if v.iter().all(|&x| x >= 0) && v.len() == 2 => {
            [v[0] as usize, v[1] as usize, v[0] as usize, v[1] as usize]
        }
        Some(v) => Err(format!(
            "padding must be 4 non-negative ints (TLBR), got {v:?}"
        ))?,
    };
    Ok(ConvGeometry {
        kh,
        kw,
        stride,
        dilation,
        pad,
    })
}

fn conv_out_dim(
    len: usize,
    pad_a: usize,
    pad_b: usize,
    k: usize,
    dil: usize,
    stride: usize,
) -> Option<usize> {
    let span = dil * (k - 1) + 1;
    let padded = len + pad_a + pad_b;
    (padded >= span).then(|| (padded - span) / stride + 1)
}

fn pads_spec(node: &NodeDef, rank: usize) -> Result<Vec<usize>, String> {
    let p = weight(node, "pads_spec")?.to_i64_vec();
    if p.len() != 2 * rank || p.iter().any(|&x| x < 0) {
        return Err(format!(
            "pads_spec must hold {} non-negative values, got {p:?}",
            2 * rank
        ));
    }
    Ok(p.into_iter().map(|x| x as usize).collect())
}

pub(crate) fn transpose_perm(node: &NodeDef, rank: usize) -> Result<Vec<usize>, String> {
    let perm = match (ints_attr(node, "perm")?, node.weight("perm")) {
        (Some(p), _) => p,
        (None, Some(t)) => t.to_i64_vec(),
        (None, None) => (0..rank as i64).rev().collect(),
    };
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(format!("perm {perm:?} does not match rank {rank}"));
    }
    for &p in &perm {
        if p < 0 || p as usize >= rank || seen[p as usize] {
            return Err(format!("perm {perm:?} is not a permutation"));
        }
        seen[p as usize] = true;
    }
    Ok(perm.into_iter().map(|p| p as usize).collect())
}

fn reshape_target(node: &NodeDef, input: &[usize]) -> Result<Vec<usize>, String> {
    let spec = weight(node, "target_shape")?.to_i64_vec();
    let total: usize = input.iter().product();
    let mut out = Vec::with_capacity(spec.len());
    let mut infer_at = None;
    for (i, &d) in spec.iter().enumerate() {
        match d {
            -1 if infer_at.is_none() => {
                infer_at = Some(i);
                out.push(1);
            }
            0 => out.push(*input.get(i).ok_or("reshape 0 beyond input rank")?),
            d if d > 0 => out.push(d as usize),
            _ => return Err(format!("bad target_shape {spec:?}")),
        }
    }
    let known: usize = out.iter().product();
    if let Some(i) = infer_at {
        if known == 0 || !total.is_multiple_of(known) {
            return Err(format!("cannot reshape {input:?} to {spec:?}"));
        }
        out[i] = total / known;
    }
    if out.iter().product::<usize>() != total {
        return Err(format!("cannot reshape {input:?} to {spec:?}"));
    }
    Ok(out)
}

/// Second operand of Add/Mul when it is a constant.
fn binary_constant(node: &NodeDef) -> Result<&Tensor, String> {
    let role = if node.op == Op::Add { "bias" } else { "scale" };
    weight(node, role)
}

/// How the second operand of Add/Mul lines up with the first.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Broadcast {
    Elementwise,
    Scalar,
    /// Per-channel vector along `axis`.
    Channel {
        axis: usize,
    },
}

fn broadcast_kind(node: &NodeDef, x: &[usize], other: &[usize]) -> Result<Broadcast, String> {
    let n_other: usize = other.iter().product();
    if x == other {
        return Ok(Broadcast::Elementwise);
    }
    if n_other == 1 {
        return Ok(Broadcast::Scalar);
    }
    let axis = axis_attr(node, 1, x.len())?;
    if n_other == x[axis] {
        return Ok(Broadcast::Channel { axis });
    }
    Err(format!(
        "cannot broadcast {other:?} onto {x:?} along axis {axis}"
    ))
}

/// Output shape of `node` given its input shapes.
pub fn output_shape(node: &NodeDef, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
    if !node.op.input_arity().contains(&inputs.len()) {
        return Err(format!(
            "{} takes {:?} inputs, got {}",
            node.op,
            node.op.input_arity(),
            inputs.len()
        ));
    }
    let x = inputs[0];
    let rank = x.len();
    match node.op {
        Op::Conv => {
            let w = weight(node, "weight")?;
            let ws = w.shape();
            let g = conv_geometry(node, ws)?;
            if rank != 4 {
                return Err(format!("conv input must be rank 4, got {x:?}"));
            }
            if x[1] != ws[1] {
                return Err(format!("conv expects {} input channels, got {x:?}", ws[1]));
            }
            if let Some(b) = node.weight("bias") {
                if b.len() != ws[0] {
                    return Err(format!(
                        "conv bias has {} elements for {} filters",
                        b.len(),
                        ws[0]
                    ));
                }
            }
            let oh = conv_out_dim(x[2], g.pad[0], g.pad[2], g.kh, g.dilation[0], g.stride[0]);
            let ow = conv_out_dim(x[3], g.pad[1], g.pad[3], g.kw, g.dilation[1], g.stride[1]);
            match (oh, ow) {
                (Some(oh), Some(ow)) => Ok(vec![x[0], ws[0], oh, ow]),
                _ => Err(format!("conv kernel larger than padded input {x:?}")),
            }
        }
        Op::BatchNormalization => {
            if rank < 2 {
                return Err(format!(
                    "batchnorm input must have a channel axis, got {x:?}"
                ));
            }
            for role in ["scale", "bias", "mean", "var"] {
                if weight(node, role)?.len() != x[1] {
                    return Err(format!(
                        "batchnorm {role} length differs from {} channels",
                        x[1]
                    ));
                }
            }
            Ok(x.to_vec())
        }
        Op::Pad => {
            let p = pads_spec(node, rank)?;
            Ok((0..rank).map(|i| x[i] + p[i] + p[i + rank]).collect())
        }
        Op::Transpose => {
            let perm = transpose_perm(node, rank)?;
            Ok(perm.iter().map(|&p| x[p]).collect())
        }
        Op::Flatten => Ok(vec![x[0], x[1..].iter().product::<usize>().max(1)]),
        Op::Reshape => reshape_target(node, x),
        Op::Add | Op::Mul => {
            let other: Vec<usize> = if inputs.len() == 2 {
                inputs[1].to_vec()
            } else {
                binary_constant(node)?.shape().to_vec()
            };
            broadcast_kind(node, x, &other)?;
            Ok(x.to_vec())
        }
        Op::Gather => {
            let axis = axis_attr(node, 0, rank)?;
            let idx = weight(node, "indices")?.to_i64_vec();
            if idx.iter().any(|&i| i < 0 || i as usize >= x[axis]) {
                return Err(format!(
                    "gather indices {idx:?} out of range for dim {}",
                    x[axis]
                ));
            }
            let mut out = x.to_vec();
            out[axis] = idx.len();
            Ok(out)
        }
        Op::Unsqueeze => {
            let axis = axis_attr(node, 0, rank + 1)?;
            let mut out = x.to_vec();
            out.insert(axis, 1);
            Ok(out)
        }
        Op::Clip | Op::Relu | Op::Softmax => Ok(x.to_vec()),
        Op::GlobalAveragePool => {
            if rank != 4 {
                return Err(format!("global pool input must be rank 4, got {x:?}"));
            }
            Ok(vec![x[0], x[1], 1, 1])
        }
        Op::Gemm => {
            let w = weight(node, "weight")?.shape();
            if rank != 2 || w.len() != 2 || x[1] != w[0] {
                return Err(format!("gemm cannot multiply {x:?} by {w:?}"));
            }
            if let Some(b) = node.weight("bias") {
                if b.len() != w[1] {
                    return Err(format!(
                        "gemm bias has {} elements for {} outputs",
                        b.len(),
                        w[1]
                    ));
                }
            }
            Ok(vec![x[0], w[1]])
        }
    }
}

fn f32_data(t: &Tensor) -> Result<&[f32], String> {
    t.as_f32()
        .ok_or_else(|| "kernels operate on f32 tensors".to_string())
}

/// Execute one node.
pub fn eval_node(node: &NodeDef, inputs: &[&Tensor]) -> Result<Tensor, String> {
    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    let out_shape = output_shape(node, &shapes)?;
    let x = f32_data(inputs[0])?;
    let xs = inputs[0].shape();
    let data = match node.op {
        Op::Conv => conv2d(node, x, xs, &out_shape)?,
        Op::BatchNormalization => {
            let eps = node
                .attr("epsilon")
                .and_then(AttrValue::as_float)
                .unwrap_or(1e-5);
            let scale = f32_data(weight(node, "scale")?)?;
            let bias = f32_data(weight(node, "bias")?)?;
            let mean = f32_data(weight(node, "mean")?)?;
            let var = f32_data(weight(node, "var")?)?;
            let inner: usize = xs[2..].iter().product();
            let c = xs[1];
            x.iter()
                .enumerate()
                .map(|(i, &v)| {
                    let ch = (i / inner) % c;
                    (v - mean[ch]) / (var[ch] + eps).sqrt() * scale[ch] + bias[ch]
                })
                .collect()
        }
        Op::Pad => {
            let rank = xs.len();
            let p = pads_spec(node, rank)?;
            let mut out = vec![0.0f32; out_shape.iter().product()];
            let in_strides = strides(xs);
            let out_strides = strides(&out_shape);
            for (i, &v) in x.iter().enumerate() {
                let mut o = 0;
                for d in 0..rank {
                    let coord = (i / in_strides[d]) % xs[d];
                    o += (coord + p[d]) * out_strides[d];
                }
                out[o] = v;
            }
            out
        }
        Op::Transpose => {
            let perm = transpose_perm(node, xs.len())?;
            let in_strides = strides(xs);
            let out_strides = strides(&out_shape);
            let mut out = vec![0.0f32; x.len()];
            for (o, slot) in out.iter_mut().enumerate() {
                let mut src = 0;
                for (d, &p) in perm.iter().enumerate() {
                    let coord = (o / out_strides[d]) % out_shape[d];
                    src += coord * in_strides[p];
                }
                *slot = x[src];
            }
            out
        }
        Op::Flatten | Op::Reshape | Op::Unsqueeze => x.to_vec(),
        Op::Add | Op::Mul => {
            let other_t = if inputs.len() == 2 {
                inputs[1]
            } else {
                binary_constant(node)?
            };
            let other = f32_data(other_t)?;
            let kind = broadcast_kind(node, xs, other_t.shape())?;
            let inner: usize = match kind {
                Broadcast::Channel { axis } => xs[axis + 1..].iter().product(),
                _ => 1,
            };
            let op = |a: f32, b: f32| if node.op == Op::Add { a + b } else { a * b };
            x.iter()
                .enumerate()
                .map(|(i, &v)| {
                    let b = match kind {
                        Broadcast::Elementwise => other[i],
                        Broadcast::Scalar => other[0],
                        Broadcast::Channel { axis } => other[(i / inner) % xs[axis]],
                    };
                    op(v, b)
                })
                .collect()
        }
        Op::Gather => {
            let axis = axis_attr(node, 0, xs.len())?;
            let idx = weight(node, "indices")?.to_i64_vec();
            let outer: usize = xs[..axis].iter().product();
            let inner: usize = xs[axis + 1..].iter().product();
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for &k in &idx {
                    let base = (o * xs[axis] + k as usize) * inner;
                    out.extend_from_slice(&x[base..base + inner]);
                }
            }
            out
        }
        Op::Clip => {
            let lo = node
                .attr("min")
                .and_then(AttrValue::as_float)
                .unwrap_or(f32::NEG_INFINITY);
            let hi = node
                .attr("max")
                .and_then(AttrValue::as_float)
                .unwrap_or(f32::INFINITY);
            x.iter().map(|&v| v.max(lo).min(hi)).collect()
        }
        Op::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        Op::GlobalAveragePool => {
            let area = xs[2] * xs[3];
            x.chunks_exact(area)
                .map(|plane| plane.iter().sum::<f32>() / area as f32)
                .collect()
        }
        Op::Gemm => {
            let w_t = weight(node, "weight")?;
            let w = f32_data(w_t)?;
            let (m, k, n) = (xs[0], xs[1], w_t.shape()[1]);
            let bias = node.weight("bias").map(f32_data).transpose()?;
            let mut out = vec![0.0f32; m * n];
            for r in 0..m {
                for c in 0..n {
                    let mut acc = bias.map_or(0.0, |b| b[c]);
                    for j in 0..k {
                        acc += x[r * k + j] * w[j * n + c];
                    }
                    out[r * n + c] = acc;
                }
            }
            out
        }
        Op::Softmax => {
            let last = *xs.last().unwrap();
            let mut out = Vec::with_capacity(x.len());
            for row in x.chunks_exact(last) {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = row.iter().map(|&v| (v - max).exp()).collect();
                let sum: f32 = exps.iter().sum();
                out.extend(exps.iter().map(|e| e / sum));
            }
            out
        }
    };
    Tensor::from_f32(out_shape, data).map_err(|e| e.to_string())
}

fn conv2d(
    node: &NodeDef,
    x: &[f32],
    xs: &[usize],
    out_shape: &[usize],
) -> Result<Vec<f32>, String> {
    let w_t = weight(node, "weight")?;
    let w = f32_data(w_t)?;
    let ws = w_t.shape();
    let g = conv_geometry(node, ws)?;
    let bias = node.weight("bias").map(f32_data).transpose()?;
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o_ch, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let mut out = vec![0.0f32; n * o_ch * oh * ow];
    for b in 0..n {
        for o in 0..o_ch {
            let b0 = bias.map_or(0.0, |v| v[o]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b0;
                    for ci in 0..c {
                        for ky in 0..g.kh {
                            let iy = (oy * g.stride[0] + ky * g.dilation[0]) as isize
                                - g.pad[0] as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..g.kw {
                                let ix = (ox * g.stride[1] + kx * g.dilation[1]) as isize
                                    - g.pad[1] as isize;
                                if ix < 0 || ix as usize >= wd {
                                    continue;
                                }
                                let xv = x[((b * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((o * c + ci) * g.kh + ky) * g.kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * o_ch + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}
