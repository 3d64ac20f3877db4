//! Parameter and operation counting.
//!
//! Costs are computed from a layer inventory derived from a [`VariantSpec`],
//! not from a traced forward pass, so they are exact and cheap for any input
//! shape. The trainable-scalar count of a built model comes from its
//! parameter visitor instead, which keeps the two paths independent.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{EsfpNet, VariantSpec};
use crate::nn::Parameterized;
use crate::scalar::Scalar;

/// Counting convention stated in every report.
pub const FLOP_CONVENTION: &str = "1 MAC = 1 FLOP; counts multiply-accumulates of convolutions, \
linear maps and the two attention products (QK^T, AV); bias additions, normalization, activations, \
softmax, concatenation and bilinear resampling count as zero";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum LayerKind {
    Conv2d {
        cin: usize,
        cout: usize,
        kernel: usize,
        groups: usize,
        bias: bool,
    },
    Linear {
        cin: usize,
        cout: usize,
        bias: bool,
    },
    LayerNorm {
        channels: usize,
    },
    /// `softmax(QK^T) V` over `keys` key positions with total width `dim`.
    AttentionProducts {
        dim: usize,
        keys: usize,
    },
    Gelu,
    Resize,
    Concat,
    /// Anything the counter has no rule for.
    Other(String),
}

impl LayerKind {
    fn label(&self) -> &str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Linear { .. } => "linear",
            LayerKind::LayerNorm { .. } => "layer_norm",
            LayerKind::AttentionProducts { .. } => "attention",
            LayerKind::Gelu => "gelu",
            LayerKind::Resize => "resize",
            LayerKind::Concat => "concat",
            LayerKind::Other(name) => name,
        }
    }
}

/// One entry of the inventory. `positions` is the number of output
/// positions (`batch * height * width`) the layer produces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerOp {
    pub module: String,
    pub name: String,
    pub kind: LayerKind,
    pub positions: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub variant: String,
    pub input_shape: [usize; 4],
    pub param_count: u64,
    pub flops: u64,
    pub gflops: f64,
    pub convention: String,
    pub per_module: Vec<ModuleCost>,
}

impl ComplexityReport {
    /// Human-readable table, one row per module plus a total.
    pub fn to_table(&self) -> String {
        let [b, c, h, w] = self.input_shape;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "variant {} at input ({b}, {c}, {h}, {w})",
            self.variant
        );
        let _ = writeln!(out, "{:<28} {:>12} {:>16}", "module", "params", "flops");
        for m in &self.per_module {
            let _ = writeln!(out, "{:<28} {:>12} {:>16}", m.name, m.params, m.flops);
        }
        let _ = writeln!(
            out,
            "{:<28} {:>12} {:>16}",
            "total", self.param_count, self.flops
        );
        let _ = writeln!(
            out,
            "params {:.2} M, {:.3} GFLOPs",
            self.param_count as f64 / 1e6,
            self.gflops
        );
        let _ = writeln!(out, "convention: {}", self.convention);
        out
    }

    /// `key=value` lines for scripts.
    pub fn to_machine_lines(&self) -> String {
        let [b, c, h, w] = self.input_shape;
        let mut out = String::new();
        let _ = writeln!(out, "variant={}", self.variant);
        let _ = writeln!(out, "input_shape={b}x{c}x{h}x{w}");
        let _ = writeln!(out, "param_count={}", self.param_count);
        let _ = writeln!(out, "flops={}", self.flops);
        let _ = writeln!(out, "gflops={:.6}", self.gflops);
        for m in &self.per_module {
            let _ = writeln!(
                out,
                "module={} params={} flops={}",
                m.name, m.params, m.flops
            );
        }
        out
    }
}

/// Exact number of trainable scalars held by `model`.
pub fn count_parameters<T: Scalar>(model: &EsfpNet<T>) -> u64 {
    model.param_count() as u64
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

struct Inventory {
    ops: Vec<LayerOp>,
    module: String,
}

impl Inventory {
    fn push(&mut self, name: &str, kind: LayerKind, positions: usize) {
        self.ops.push(LayerOp {
            module: self.module.clone(),
            name: name.to_string(),
            kind,
            positions: positions as u64,
        });
    }
}

/// Layer-by-layer description of one forward pass at `input_shape` (NCHW).
pub fn layer_inventory(spec: &VariantSpec, input_shape: [usize; 4]) -> Result<Vec<LayerOp>> {
    spec.validate()?;
    let [batch, channels, height, width] = input_shape;
    if batch == 0 {
        return Err(Error::shape("count_flops", "batch", ">= 1", batch));
    }
    if channels != 3 {
        return Err(Error::shape("count_flops", "channels", 3, channels));
    }
    let stride: usize = spec.stages.iter().map(|s| s.stride).product();
    let lcm = spec
        .stages
        .iter()
        .scan(1usize, |acc, s| {
            *acc *= s.stride;
            Some(*acc * s.sr_ratio)
        })
        .fold(stride, lcm_usize);
    for (axis, v) in [("height", height), ("width", width)] {
        if v == 0 || v % lcm != 0 {
            return Err(Error::shape(
                "count_flops",
                axis,
                format!("positive multiple of {lcm}"),
                v,
            ));
        }
    }

    let mut inv = Inventory {
        ops: Vec::new(),
        module: String::new(),
    };
    let (mut h, mut w, mut cin) = (height, width, channels);
    let mut level_hw = [(0usize, 0usize); 4];
    for (i, s) in spec.stages.iter().enumerate() {
        let n = i + 1;
        let c = s.embed_dim;
        let pad = s.patch_size / 2;
        h = conv_out(h, s.patch_size, s.stride, pad);
        w = conv_out(w, s.patch_size, s.stride, pad);
        let pos = batch * h * w;
        inv.module = format!("patch_embed{n}");
        inv.push(
            "proj",
            LayerKind::Conv2d {
                cin,
                cout: c,
                kernel: s.patch_size,
                groups: 1,
                bias: true,
            },
            pos,
        );
        inv.push("norm", LayerKind::LayerNorm { channels: c }, pos);

        let hidden = c * s.mlp_ratio;
        let (rh, rw) = (h / s.sr_ratio, w / s.sr_ratio);
        for j in 0..s.depth {
            inv.module = format!("block{n}.{j}");
            inv.push("norm1", LayerKind::LayerNorm { channels: c }, pos);
            inv.push(
                "attn.q",
                LayerKind::Linear {
                    cin: c,
                    cout: c,
                    bias: true,
                },
                pos,
            );
            if s.sr_ratio > 1 {
                let rpos = batch * rh * rw;
                inv.push(
                    "attn.sr",
                    LayerKind::Conv2d {
                        cin: c,
                        cout: c,
                        kernel: s.sr_ratio,
                        groups: 1,
                        bias: true,
                    },
                    rpos,
                );
                inv.push("attn.norm", LayerKind::LayerNorm { channels: c }, rpos);
            }
            inv.push(
                "attn.kv",
                LayerKind::Linear {
                    cin: c,
                    cout: 2 * c,
                    bias: true,
                },
                batch * rh * rw,
            );
            inv.push(
                "attn.products",
                LayerKind::AttentionProducts {
                    dim: c,
                    keys: rh * rw,
                },
                pos,
            );
            inv.push(
                "attn.proj",
                LayerKind::Linear {
                    cin: c,
                    cout: c,
                    bias: true,
                },
                pos,
            );
            inv.push("norm2", LayerKind::LayerNorm { channels: c }, pos);
            inv.push(
                "mlp.fc1",
                LayerKind::Linear {
                    cin: c,
                    cout: hidden,
                    bias: true,
                },
                pos,
            );
            inv.push(
                "mlp.dwconv.dwconv",
                LayerKind::Conv2d {
                    cin: hidden,
                    cout: hidden,
                    kernel: 3,
                    groups: hidden,
                    bias: true,
                },
                pos,
            );
            inv.push("mlp.act", LayerKind::Gelu, pos);
            inv.push(
                "mlp.fc2",
                LayerKind::Linear {
                    cin: hidden,
                    cout: c,
                    bias: true,
                },
                pos,
            );
        }
        inv.module = format!("norm{n}");
        inv.push("norm", LayerKind::LayerNorm { channels: c }, pos);
        level_hw[i] = (h, w);
        cin = c;
    }

    let d = &spec.decoder;
    let p = d.predict_dims;
    let pos_at = |i: usize| batch * level_hw[i].0 * level_hw[i].1;
    for i in 0..4 {
        inv.module = format!("LP_{}", i + 1);
        inv.push(
            "proj",
            LayerKind::Linear {
                cin: d.stage_dims[i],
                cout: p[i],
                bias: true,
            },
            pos_at(i),
        );
    }
    for (k, i) in [2usize, 1, 0].into_iter().enumerate() {
        let tag = ["34", "23", "12"][k];
        inv.module = format!("linear_fuse{tag}");
        inv.push("upsample", LayerKind::Resize, pos_at(i));
        inv.push("concat", LayerKind::Concat, pos_at(i));
        inv.push(
            "proj",
            LayerKind::Linear {
                cin: p[i] + p[i + 1],
                cout: p[i],
                bias: true,
            },
            pos_at(i),
        );
        inv.module = format!("LP_{tag}");
        inv.push(
            "proj",
            LayerKind::Linear {
                cin: p[i],
                cout: p[i],
                bias: true,
            },
            pos_at(i),
        );
    }
    inv.module = "linear_pred".into();
    inv.push("upsample", LayerKind::Resize, pos_at(0));
    inv.push("concat", LayerKind::Concat, pos_at(0));
    inv.push(
        "proj",
        LayerKind::Linear {
            cin: d.head_in(),
            cout: 1,
            bias: true,
        },
        pos_at(0),
    );
    let out_hw = level_hw[0].0 * d.output_scale * level_hw[0].1 * d.output_scale;
    inv.push("upsample_out", LayerKind::Resize, batch * out_hw);
    Ok(inv.ops)
}

fn lcm_usize(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// `(params, macs)` of one layer.
fn layer_cost(op: &LayerOp) -> Option<(u64, u64)> {
    let pos = op.positions;
    let cost = match &op.kind {
        &LayerKind::Conv2d {
            cin,
            cout,
            kernel,
            groups,
            bias,
        } => {
            let per_out = (cin / groups * kernel * kernel) as u64;
            let params = per_out * cout as u64 + if bias { cout as u64 } else { 0 };
            (params, per_out * cout as u64 * pos)
        }
        &LayerKind::Linear { cin, cout, bias } => {
            let params = (cin * cout) as u64 + if bias { cout as u64 } else { 0 };
            (params, (cin * cout) as u64 * pos)
        }
        &LayerKind::LayerNorm { channels } => (2 * channels as u64, 0),
        &LayerKind::AttentionProducts { dim, keys } => (0, 2 * (dim * keys) as u64 * pos),
        LayerKind::Gelu | LayerKind::Resize | LayerKind::Concat => (0, 0),
        LayerKind::Other(_) => return None,
    };
    Some(cost)
}

/// Cost an inventory, grouping layers by module in order of first appearance.
pub fn cost_inventory(
    variant: &str,
    input_shape: [usize; 4],
    ops: &[LayerOp],
) -> Result<ComplexityReport> {
    let unsupported: BTreeSet<&str> = ops
        .iter()
        .filter(|op| matches!(op.kind, LayerKind::Other(_)))
        .map(|op| op.kind.label())
        .collect();
    if !unsupported.is_empty() {
        let list: Vec<&str> = unsupported.into_iter().collect();
        return Err(Error::Validation(format!(
            "unsupported layer type(s): {}",
            list.join(", ")
        )));
    }
    let mut per_module: Vec<ModuleCost> = Vec::new();
    for op in ops {
        let (params, flops) = layer_cost(op).expect("unsupported kinds rejected above");
        match per_module.last_mut() {
            Some(m) if m.name == op.module => {
                m.params += params;
                m.flops += flops;
            }
            _ => per_module.push(ModuleCost {
                name: op.module.clone(),
                params,
                flops,
            }),
        }
    }
    let param_count = per_module.iter().map(|m| m.params).sum();
    let flops: u64 = per_module.iter().map(|m| m.flops).sum();
    Ok(ComplexityReport {
        variant: variant.to_string(),
        input_shape,
        param_count,
        flops,
        gflops: flops as f64 / 1e9,
        convention: FLOP_CONVENTION.to_string(),
        per_module,
    })
}

/// Operation count of one forward pass of `model` at `input_shape` (NCHW).
pub fn count_flops<T: Scalar>(
    model: &EsfpNet<T>,
    input_shape: [usize; 4],
) -> Result<ComplexityReport> {
    spec_complexity(&model.spec, input_shape)
}

pub fn spec_complexity(spec: &VariantSpec, input_shape: [usize; 4]) -> Result<ComplexityReport> {
    let ops = layer_inventory(spec, input_shape)?;
    cost_inventory(&spec.id, input_shape, &ops)
}
