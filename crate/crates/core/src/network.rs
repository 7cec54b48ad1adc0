//! Runtime network: lowered layers, frozen weights, norm statistics.
//!
//! Weighted layers (convs and linears, including the ones inside residual
//! blocks) are stored in a flat vector in forward-encounter order; that
//! order also indexes the per-layer PRNG streams, so initialization is
//! independent of how other layers draw.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::init::{draw_scores, draw_weights, InitSpec};
use crate::mask::{MaskedParameter, SparsityPattern};
use crate::netspec::{LayerSpec, NetworkSpec};
use crate::prng::Prng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Real;

const BN_EPS: Real = 1e-5;
const BN_MOMENTUM: Real = 0.1;

/// Running statistics of one batch-norm layer; biased variance, updated with
/// momentum 0.1 during training forwards, frozen at evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
    initialized: bool,
}

impl NormState {
    fn new(channels: usize) -> Self {
        NormState {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }

    pub(crate) fn restore(mean: Vec<Real>, var: Vec<Real>) -> Self {
        NormState {
            mean,
            var,
            initialized: true,
        }
    }

    fn update(&mut self, mean: &[Real], var: &[Real]) {
        if !self.initialized {
            // First batch seeds the averages directly instead of decaying
            // from the (1, 0) placeholders.
            self.mean.copy_from_slice(mean);
            self.var.copy_from_slice(var);
            self.initialized = true;
            return;
        }
        for (r, &b) in self.mean.iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, &b) in self.var.iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum RtLayer {
    Conv { w: usize, stride: usize, pad: usize },
    Linear { w: usize },
    Norm { n: usize },
    Relu,
    MaxPool { k: usize, s: usize },
    AvgPool { k: usize, s: usize },
    GlobalAvgPool,
    Flatten,
    Block { n1: usize, w1: usize, n2: usize, w2: usize, proj: Option<usize>, stride: usize },
}

/// Result of one forward pass: logits plus handles needed by training loops
/// and probes.
#[derive(Debug)]
pub struct ForwardOut {
    pub logits: Var,
    /// Effective-weight leaf per weighted layer; gradients flow into these
    /// only when `param_grads` was requested.
    pub weight_vars: Vec<Var>,
    /// Output of the last convolution, for the feature-distance probe.
    pub last_conv: Option<Var>,
}

/// A spec bound to weights, scores, masks, and norm statistics.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<RtLayer>,
    weights: Vec<MaskedParameter>,
    norms: Vec<NormState>,
    init: InitSpec,
}

struct Lowering {
    layers: Vec<RtLayer>,
    weight_shapes: Vec<Vec<usize>>,
    weight_fans: Vec<(usize, usize)>,
    norm_channels: Vec<usize>,
}

/// Walks the spec, checking shape conformance and collecting weighted-layer
/// geometry in forward order.
fn lower(spec: &NetworkSpec) -> Result<Lowering> {
    let mut out = Lowering {
        layers: Vec::new(),
        weight_shapes: Vec::new(),
        weight_fans: Vec::new(),
        norm_channels: Vec::new(),
    };
    // Current activation shape, either [c, h, w] or flattened [f].
    enum Shape {
        Map { c: usize, h: usize, w: usize },
        Flat(usize),
    }
    let mut cur = Shape::Map {
        c: spec.input.0,
        h: spec.input.1,
        w: spec.input.2,
    };
    let err = |i: usize, what: &str| -> Error {
        Error::ShapeMismatch {
            op: "network",
            detail: format!("layer {i}: {what}"),
        }
    };
    let ext = |n: usize, k: usize, s: usize, p: usize| -> Option<usize> {
        let padded = n + 2 * p;
        if k == 0 || s == 0 || padded < k {
            None
        } else {
            Some((padded - k) / s + 1)
        }
    };
    for (i, layer) in spec.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Conv2d { out_ch, kernel, stride, pad } => {
                let Shape::Map { c, h, w } = cur else {
                    return Err(err(i, "conv on flattened input"));
                };
                let (oh, ow) = match (ext(h, kernel, stride, pad), ext(w, kernel, stride, pad)) {
                    (Some(oh), Some(ow)) => (oh, ow),
                    _ => return Err(err(i, "conv output would be empty")),
                };
                let wi = out.weight_shapes.len();
                out.weight_shapes.push(vec![out_ch, c, kernel, kernel]);
                out.weight_fans
                    .push((c * kernel * kernel, out_ch * kernel * kernel));
                out.layers.push(RtLayer::Conv { w: wi, stride, pad });
                cur = Shape::Map { c: out_ch, h: oh, w: ow };
            }
            LayerSpec::Linear { out_features } => {
                let Shape::Flat(f) = cur else {
                    return Err(err(i, "linear needs a flattened input"));
                };
                let wi = out.weight_shapes.len();
                out.weight_shapes.push(vec![out_features, f]);
                out.weight_fans.push((f, out_features));
                out.layers.push(RtLayer::Linear { w: wi });
                cur = Shape::Flat(out_features);
            }
            LayerSpec::BatchNorm => {
                let Shape::Map { c, .. } = cur else {
                    return Err(err(i, "batch norm on flattened input"));
                };
                let ni = out.norm_channels.len();
                out.norm_channels.push(c);
                out.layers.push(RtLayer::Norm { n: ni });
            }
            LayerSpec::Relu => out.layers.push(RtLayer::Relu),
            LayerSpec::MaxPool { kernel, stride } => {
                let Shape::Map { c, h, w } = cur else {
                    return Err(err(i, "pool on flattened input"));
                };
                let (oh, ow) = match (ext(h, kernel, stride, 0), ext(w, kernel, stride, 0)) {
                    (Some(oh), Some(ow)) => (oh, ow),
                    _ => return Err(err(i, "pool output would be empty")),
                };
                out.layers.push(RtLayer::MaxPool { k: kernel, s: stride });
                cur = Shape::Map { c, h: oh, w: ow };
            }
            LayerSpec::AvgPool { kernel, stride } => {
                let Shape::Map { c, h, w } = cur else {
                    return Err(err(i, "pool on flattened input"));
                };
                let (oh, ow) = match (ext(h, kernel, stride, 0), ext(w, kernel, stride, 0)) {
                    (Some(oh), Some(ow)) => (oh, ow),
                    _ => return Err(err(i, "pool output would be empty")),
                };
                out.layers.push(RtLayer::AvgPool { k: kernel, s: stride });
                cur = Shape::Map { c, h: oh, w: ow };
            }
            LayerSpec::GlobalAvgPool => {
                let Shape::Map { c, h, w } = cur else {
                    return Err(err(i, "pool on flattened input"));
                };
                if h != w {
                    return Err(err(i, "global average pool needs square maps"));
                }
                out.layers.push(RtLayer::GlobalAvgPool);
                cur = Shape::Map { c, h: 1, w: 1 };
            }
            LayerSpec::Flatten => {
                let Shape::Map { c, h, w } = cur else {
                    return Err(err(i, "flatten applied twice"));
                };
                out.layers.push(RtLayer::Flatten);
                cur = Shape::Flat(c * h * w);
            }
            LayerSpec::PreactBlock { out_ch, stride } => {
                let Shape::Map { c, h, w } = cur else {
                    return Err(err(i, "residual block on flattened input"));
                };
                let (oh, ow) = match (ext(h, 3, stride, 1), ext(w, 3, stride, 1)) {
                    (Some(oh), Some(ow)) => (oh, ow),
                    _ => return Err(err(i, "block output would be empty")),
                };
                let n1 = out.norm_channels.len();
                out.norm_channels.push(c);
                let w1 = out.weight_shapes.len();
                out.weight_shapes.push(vec![out_ch, c, 3, 3]);
                out.weight_fans.push((c * 9, out_ch * 9));
                let n2 = out.norm_channels.len();
                out.norm_channels.push(out_ch);
                let w2 = out.weight_shapes.len();
                out.weight_shapes.push(vec![out_ch, out_ch, 3, 3]);
                out.weight_fans.push((out_ch * 9, out_ch * 9));
                let proj = if stride != 1 || c != out_ch {
                    let wp = out.weight_shapes.len();
                    out.weight_shapes.push(vec![out_ch, c, 1, 1]);
                    out.weight_fans.push((c, out_ch));
                    Some(wp)
                } else {
                    None
                };
                out.layers.push(RtLayer::Block { n1, w1, n2, w2, proj, stride });
                cur = Shape::Map { c: out_ch, h: oh, w: ow };
            }
        }
    }
    match cur {
        Shape::Flat(f) if f == spec.classes => {}
        Shape::Flat(f) => {
            return Err(Error::ShapeMismatch {
                op: "network",
                detail: format!("head emits {f} features for {} classes", spec.classes),
            })
        }
        Shape::Map { .. } => {
            return Err(Error::ShapeMismatch {
                op: "network",
                detail: "network does not end in a flattened classifier head".into(),
            })
        }
    }
    if out.weight_shapes.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "network",
            detail: "no maskable layer exists".into(),
        });
    }
    Ok(out)
}

impl Network {
    /// Builds a network with frozen weights drawn from `init` and scores from
    /// the same seed's score streams, then binarizes masks at `ratio`.
    ///
    /// Stream layout: weights of layer `i` come from `split2(0, i)`, scores
    /// from `split2(1, i)`.
    pub fn new(
        spec: NetworkSpec,
        init: InitSpec,
        ratio: f64,
        pattern: SparsityPattern,
    ) -> Result<Self> {
        let lowering = lower(&spec)?;
        let root = Prng::new(init.seed);
        let mut weights = Vec::with_capacity(lowering.weight_shapes.len());
        for (i, shape) in lowering.weight_shapes.iter().enumerate() {
            let (fan_in, fan_out) = lowering.weight_fans[i];
            let numel: usize = shape.iter().product();
            let mut wstream = root.split2(0, i as u64);
            let theta = Tensor::new(
                shape,
                draw_weights(init.method, &mut wstream, numel, fan_in, fan_out, i)?,
            )?;
            let run = pattern.run_len(shape);
            let groups = numel / run;
            let mut sstream = root.split2(1, i as u64);
            let scores = draw_scores(&mut sstream, groups, fan_in, i)?;
            weights.push(MaskedParameter::new(theta, scores, pattern, ratio)?);
        }
        let norms = lowering
            .norm_channels
            .iter()
            .map(|&c| NormState::new(c))
            .collect();
        Ok(Network {
            spec,
            layers: lowering.layers,
            weights,
            norms,
            init,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn init_spec(&self) -> InitSpec {
        self.init
    }

    pub fn weights(&self) -> &[MaskedParameter] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [MaskedParameter] {
        &mut self.weights
    }

    pub fn norms(&self) -> &[NormState] {
        &self.norms
    }

    pub(crate) fn norms_mut(&mut self) -> &mut [NormState] {
        &mut self.norms
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn input_numel(&self) -> usize {
        self.spec.input.0 * self.spec.input.1 * self.spec.input.2
    }

    /// Redraws every theta from a fresh init spec (fine-tuning with
    /// reinitialized weights). Masks, scores, and norm statistics stay.
    pub fn reset_theta(&mut self, init: InitSpec) -> Result<()> {
        let lowering = lower(&self.spec)?;
        let root = Prng::new(init.seed);
        for (i, shape) in lowering.weight_shapes.iter().enumerate() {
            let (fan_in, fan_out) = lowering.weight_fans[i];
            let numel: usize = shape.iter().product();
            let mut wstream = root.split2(0, i as u64);
            let theta = Tensor::new(
                shape,
                draw_weights(init.method, &mut wstream, numel, fan_in, fan_out, i)?,
            )?;
            self.weights[i].set_theta(theta)?;
        }
        self.init = init;
        Ok(())
    }

    /// FNV-1a over the raw bits of every frozen weight; cheap identity used
    /// by the weight-freeze tests and run manifests.
    pub fn theta_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.weights {
            for &v in p.theta().data() {
                let bits = (v as f64).to_bits();
                for byte in bits.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01B3);
                }
            }
        }
        h
    }

    /// Total bytes of dense weights at the build's precision.
    pub fn dense_weight_bytes(&self) -> usize {
        self.weights
            .iter()
            .map(|p| p.theta().numel() * core::mem::size_of::<Real>())
            .sum()
    }

    /// Forward pass without touching running statistics. `training` selects
    /// batch-stat normalization, `param_grads` registers effective weights
    /// as gradient sinks.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        training: bool,
        param_grads: bool,
    ) -> Result<ForwardOut> {
        self.forward_impl(tape, x, training, param_grads, None)
    }

    /// Training forward: batch statistics, with running averages updated in
    /// place (momentum 0.1).
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        x: Var,
        param_grads: bool,
    ) -> Result<ForwardOut> {
        let mut updates: Vec<(usize, Vec<Real>, Vec<Real>)> = Vec::new();
        let out = self.forward_impl(tape, x, true, param_grads, Some(&mut updates))?;
        for (n, mean, var) in updates {
            self.norms[n].update(&mean, &var);
        }
        Ok(out)
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        x: Var,
        training: bool,
        param_grads: bool,
        mut stat_updates: Option<&mut Vec<(usize, Vec<Real>, Vec<Real>)>>,
    ) -> Result<ForwardOut> {
        let batch = tape.value(x).shape()[0];
        let mut weight_vars = vec![Var(usize::MAX); self.weights.len()];
        let mut last_conv = None;
        let mut cur = x;

        // Registers the effective weights of layer `wi` on the tape.
        macro_rules! weight_leaf {
            ($wi:expr) => {{
                let mut t = self.weights[$wi].effective_weights();
                if param_grads {
                    t = t.with_grad();
                }
                let v = tape.leaf(t);
                weight_vars[$wi] = v;
                v
            }};
        }

        let norm_fwd = |tape: &mut Tape,
                        cur: Var,
                        n: usize,
                        stat_updates: &mut Option<&mut Vec<(usize, Vec<Real>, Vec<Real>)>>|
         -> Result<Var> {
            if training {
                let (v, stats) = tape.batch_norm_train(cur, BN_EPS)?;
                if let Some(updates) = stat_updates.as_mut() {
                    updates.push((n, stats.mean, stats.var));
                }
                Ok(v)
            } else {
                tape.batch_norm_eval(cur, &self.norms[n].mean, &self.norms[n].var, BN_EPS)
            }
        };

        for layer in &self.layers {
            match *layer {
                RtLayer::Conv { w, stride, pad } => {
                    let wv = weight_leaf!(w);
                    cur = tape.conv2d(cur, wv, stride, pad)?;
                    last_conv = Some(cur);
                }
                RtLayer::Linear { w } => {
                    let wv = weight_leaf!(w);
                    // x [b, f] . w[out, f]^T via matmul with reshaped weight:
                    // transpose is avoided by computing x . w^T directly.
                    cur = tape.matmul_nt_weights(cur, wv)?;
                }
                RtLayer::Norm { n } => {
                    cur = norm_fwd(tape, cur, n, &mut stat_updates)?;
                }
                RtLayer::Relu => cur = tape.relu(cur)?,
                RtLayer::MaxPool { k, s } => cur = tape.max_pool2d(cur, k, s, 0)?,
                RtLayer::AvgPool { k, s } => cur = tape.avg_pool2d(cur, k, s, 0)?,
                RtLayer::GlobalAvgPool => {
                    let hw = tape.value(cur).shape()[2];
                    cur = tape.avg_pool2d(cur, hw, hw, 0)?;
                }
                RtLayer::Flatten => {
                    let numel: usize = tape.value(cur).shape()[1..].iter().product();
                    cur = tape.reshape(cur, &[batch, numel])?;
                }
                RtLayer::Block { n1, w1, n2, w2, proj, stride } => {
                    let pre = norm_fwd(tape, cur, n1, &mut stat_updates)?;
                    let pre = tape.relu(pre)?;
                    let shortcut = match proj {
                        Some(wp) => {
                            let wv = weight_leaf!(wp);
                            tape.conv2d(pre, wv, stride, 0)?
                        }
                        None => cur,
                    };
                    let wv1 = weight_leaf!(w1);
                    let h = tape.conv2d(pre, wv1, stride, 1)?;
                    let h = norm_fwd(tape, h, n2, &mut stat_updates)?;
                    let h = tape.relu(h)?;
                    let wv2 = weight_leaf!(w2);
                    let h = tape.conv2d(h, wv2, 1, 1)?;
                    last_conv = Some(h);
                    cur = tape.add(h, shortcut)?;
                }
            }
        }
        Ok(ForwardOut {
            logits: cur,
            weight_vars,
            last_conv,
        })
    }

    /// Plain inference: argmax class per input, eval-mode statistics.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = self.forward(&mut tape, xv, false, false)?;
        let logits = tape.value(out.logits);
        let (b, c) = (logits.shape()[0], logits.shape()[1]);
        let data = logits.data();
        Ok((0..b)
            .map(|i| {
                let row = &data[i * c..(i + 1) * c];
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Network id string recorded in checkpoints.
    pub fn id(&self) -> String {
        self.spec.id()
    }
}
