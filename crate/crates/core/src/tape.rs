//! Reverse-mode automatic differentiation on a Wengert list.
//!
//! Every primitive appends one node capturing its inputs and whatever the
//! adjoint needs (im2col buffers, argmax indices, softmax outputs). Nodes
//! are appended in execution order, so replaying them in reverse id order
//! is a valid reverse topological traversal and yields exact analytic
//! gradients, with `+=` accumulation where a tensor feeds several consumers.
//!
//! A tape is confined to one forward/backward pass on one thread; frozen
//! weights live outside it and are copied in as leaves.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar;
use crate::tensor::Tensor;
use crate::Real;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Batch reduction applied by loss primitives.
///
/// `Sum` keeps per-sample gradients free of batch-size factors, which makes
/// sharded attack generation bit-identical to whole-batch generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug, Clone, Copy)]
struct PoolGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    /// `a [m,k] . b[n,k]^T`; the linear-layer form with `[out, in]` weights.
    MatmulNt {
        a: Var,
        b: Var,
    },
    /// Saved im2col matrix, `(b*oh*ow) x (ci*k*k)` row-major.
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<Real>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: Real,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: Var,
        geom: PoolGeom,
    },
    /// Normalization by current-batch statistics; output data doubles as
    /// y-hat in the adjoint. `inv_std` is per channel.
    BatchNormTrain {
        x: Var,
        inv_std: Vec<Real>,
    },
    BatchNormEval {
        x: Var,
        inv_std: Vec<Real>,
    },
    Reshape {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    CrossEntropyLogits {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<Real>,
        reduction: Reduction,
    },
    NllFromProbs {
        probs: Var,
        labels: Vec<usize>,
        reduction: Reduction,
    },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-channel statistics of a training-mode batch-norm forward, for
/// updating running averages.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

/// Ordered record of primitive operations for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if k == 0 || stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradient flows into it iff the tensor was
    /// marked with `with_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.nodes[v.0].tensor.grad()
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[Real] {
        self.nodes[v.0].tensor.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    // ---- primitives ------------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("lhs {:?} rhs {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::Matmul { a, b }, needs))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`: rows of `b` are dotted against rows of
    /// `a`, matching `[out, in]` weight layout.
    pub fn matmul_nt_weights(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err(
                "matmul_nt",
                format!("lhs {:?} rhs-transposed {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt(self.data(a), self.data(b), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatmulNt { a, b }, needs))
    }

    /// 2-D convolution: input `[b,ci,h,w]`, square kernel `[co,ci,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || sx[1] != sw[1] {
            return Err(shape_err("conv2d", format!("input {:?} kernel {:?}", sx, sw)));
        }
        let geom = {
            let (b, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let (co, k) = (sw[0], sw[2]);
            let oh = out_extent(h, k, stride, pad);
            let ow = out_extent(wd, k, stride, pad);
            match (oh, ow) {
                (Some(oh), Some(ow)) => ConvGeom {
                    b,
                    ci,
                    h,
                    w: wd,
                    co,
                    k,
                    stride,
                    pad,
                    oh,
                    ow,
                },
                _ => {
                    return Err(shape_err(
                        "conv2d",
                        format!(
                            "input {:?} kernel {:?} stride {stride} pad {pad} yields empty output",
                            sx, sw
                        ),
                    ))
                }
            }
        };
        let cols = im2col(self.data(x), &geom);
        let ck = geom.ci * geom.k * geom.k;
        let rows = geom.b * geom.oh * geom.ow;
        // ymat[r, o] = cols[r, :] . wmat[o, :]
        let mut ymat = vec![0.0; rows * geom.co];
        matmul_nt(&cols, self.data(w), &mut ymat, rows, ck, geom.co);
        // Scatter [rows, co] into [b, co, oh, ow].
        let ohw = geom.oh * geom.ow;
        let mut out = vec![0.0; geom.b * geom.co * ohw];
        for bi in 0..geom.b {
            for o in 0..geom.co {
                let dst = (bi * geom.co + o) * ohw;
                for p in 0..ohw {
                    out[dst + p] = ymat[(bi * ohw + p) * geom.co + o];
                }
            }
        }
        let needs = self.needs(x) || self.needs(w);
        let t = Tensor::new(&[geom.b, geom.co, geom.oh, geom.ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, geom, cols }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", format!("lhs {:?} rhs {:?}", sa, sb)));
        }
        let data: Vec<Real> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let t = Tensor::new(&sa.to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", format!("lhs {:?} rhs {:?}", sa, sb)));
        }
        let data: Vec<Real> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let t = Tensor::new(&sa.to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Result<Var> {
        let data: Vec<Real> = self.data(x).iter().map(|v| v * c).collect();
        let needs = self.needs(x);
        let t = Tensor::new(&self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Scale { x, c }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<Real> = self
            .data(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let needs = self.needs(x);
        let t = Tensor::new(&self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Relu { x }, needs))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.pool_geom("max_pool2d", x, k, stride, pad)?;
        let ohw = geom.oh * geom.ow;
        let mut out = vec![0.0; geom.b * geom.c * ohw];
        let mut argmax = vec![0u32; out.len()];
        let xs = self.data(x);
        for bi in 0..geom.b {
            for c in 0..geom.c {
                let src = (bi * geom.c + c) * geom.h * geom.w;
                let dst = (bi * geom.c + c) * ohw;
                for oy in 0..geom.oh {
                    for ox in 0..geom.ow {
                        let mut best = Real::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..geom.k {
                            let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                            if iy < 0 || iy >= geom.h as isize {
                                continue;
                            }
                            for kx in 0..geom.k {
                                let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                if ix < 0 || ix >= geom.w as isize {
                                    continue;
                                }
                                let idx = src + iy as usize * geom.w + ix as usize;
                                // Strict > keeps the first maximum: ties
                                // resolve to the lowest flat index.
                                if xs[idx] > best {
                                    best = xs[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[dst + oy * geom.ow + ox] = best;
                        argmax[dst + oy * geom.ow + ox] = best_idx as u32;
                    }
                }
            }
        }
        let needs = self.needs(x);
        let t = Tensor::new(&[geom.b, geom.c, geom.oh, geom.ow], out)?;

        Ok(self.push(t, Op::MaxPool { x, argmax }, needs))
    }

    /// Average pooling; padded cells count as zeros (divisor is always k*k).
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.pool_geom("avg_pool2d", x, k, stride, pad)?;
        let ohw = geom.oh * geom.ow;
        let mut out = vec![0.0; geom.b * geom.c * ohw];
        let xs = self.data(x);
        let inv_area = 1.0 / (geom.k * geom.k) as Real;
        for bi in 0..geom.b {
            for c in 0..geom.c {
                let src = (bi * geom.c + c) * geom.h * geom.w;
                let dst = (bi * geom.c + c) * ohw;
                for oy in 0..geom.oh {
                    for ox in 0..geom.ow {
                        let mut acc = 0.0;
                        for ky in 0..geom.k {
                            let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                            if iy < 0 || iy >= geom.h as isize {
                                continue;
                            }
                            for kx in 0..geom.k {
                                let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                if ix < 0 || ix >= geom.w as isize {
                                    continue;
                                }
                                acc += xs[src + iy as usize * geom.w + ix as usize];
                            }
                        }
                        out[dst + oy * geom.ow + ox] = acc * inv_area;
                    }
                }
            }
        }
        let needs = self.needs(x);
        let t = Tensor::new(&[geom.b, geom.c, geom.oh, geom.ow], out)?;
        Ok(self.push(t, Op::AvgPool { x, geom }, needs))
    }

    fn pool_geom(
        &self,
        op: &'static str,
        x: Var,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<PoolGeom> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return Err(shape_err(op, format!("input {:?} is not 4-d", sx)));
        }
        // pad <= k-1 guarantees every window overlaps the real input.
        if k == 0 || pad >= k {
            return Err(shape_err(op, format!("kernel {k} with pad {pad}")));
        }
        let (oh, ow) = (
            out_extent(sx[2], k, stride, pad),
            out_extent(sx[3], k, stride, pad),
        );
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(PoolGeom {
                b: sx[0],
                c: sx[1],
                h: sx[2],
                w: sx[3],
                k,
                stride,
                pad,
                oh,
                ow,
            }),
            _ => Err(shape_err(
                op,
                format!("input {:?} kernel {k} stride {stride} pad {pad} yields empty output", sx),
            )),
        }
    }

    /// Non-affine batch normalization over current-batch statistics
    /// (per channel of a `[b,c,h,w]` input, biased variance, eps 1e-5).
    pub fn batch_norm_train(&mut self, x: Var, eps: Real) -> Result<(Var, BatchStats)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(shape_err("batch_norm", format!("input {:?} is not 4-d", sx)));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let m = (b * h * w) as Real;
        let xs = self.data(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let src = (bi * c + ci) * h * w;
                for i in 0..h * w {
                    mean[ci] += xs[src + i];
                }
            }
        }
        for mu in mean.iter_mut() {
            *mu /= m;
        }
        for bi in 0..b {
            for ci in 0..c {
                let src = (bi * c + ci) * h * w;
                for i in 0..h * w {
                    let d = xs[src + i] - mean[ci];
                    var[ci] += d * d;
                }
            }
        }
        for v in var.iter_mut() {
            *v /= m;
        }
        let inv_std: Vec<Real> = var.iter().map(|&v| 1.0 / scalar::sqrt(v + eps)).collect();
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let src = (bi * c + ci) * h * w;
                for i in 0..h * w {
                    out[src + i] = (xs[src + i] - mean[ci]) * inv_std[ci];
                }
            }
        }
        let needs = self.needs(x);
        let t = Tensor::new(&sx, out)?;
        let var_out = var.clone();
        let v = self.push(t, Op::BatchNormTrain { x, inv_std }, needs);
        Ok((
            v,
            BatchStats {
                mean,
                var: var_out,
            },
        ))
    }

    /// Non-affine batch normalization with frozen (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        mean: &[Real],
        var: &[Real],
        eps: Real,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || mean.len() != sx[1] || var.len() != sx[1] {
            return Err(shape_err(
                "batch_norm",
                format!("input {:?} with {} channel stats", sx, mean.len()),
            ));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let inv_std: Vec<Real> = var.iter().map(|&v| 1.0 / scalar::sqrt(v + eps)).collect();
        let xs = self.data(x);
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let src = (bi * c + ci) * h * w;
                for i in 0..h * w {
                    out[src + i] = (xs[src + i] - mean[ci]) * inv_std[ci];
                }
            }
        }
        let needs = self.needs(x);
        let t = Tensor::new(&sx, out)?;
        Ok(self.push(t, Op::BatchNormEval { x, inv_std }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape(x), shape),
            ));
        }
        let t = Tensor::new(shape, self.data(x).to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, needs))
    }

    /// Row-wise softmax of `[b, classes]` logits.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(shape_err("softmax", format!("input {:?} is not 2-d", sx)));
        }
        let data = softmax_rows(self.data(x), sx[0], sx[1]);
        let needs = self.needs(x);
        let t = Tensor::new(&sx, data)?;
        Ok(self.push(t, Op::Softmax { x }, needs))
    }

    /// Softmax cross-entropy of `[b, classes]` logits against integer labels,
    /// reduced over the batch.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let sx = self.shape(logits).to_vec();
        if sx.len() != 2 || sx[0] != labels.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} with {} labels", sx, labels.len()),
            ));
        }
        let (b, c) = (sx[0], sx[1]);
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: c,
                    sample: i,
                });
            }
        }
        let zs = self.data(logits);
        let probs = softmax_rows(zs, b, c);
        let mut loss = 0.0;
        for i in 0..b {
            let row = &zs[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let lse = mx + scalar::ln(row.iter().map(|&z| scalar::exp(z - mx)).sum::<Real>());
            loss += lse - row[labels[i]];
        }
        if matches!(reduction, Reduction::Mean) {
            loss /= b as Real;
        }
        let needs = self.needs(logits);
        let t = Tensor::scalar(loss);
        Ok(self.push(
            t,
            Op::CrossEntropyLogits {
                logits,
                labels: labels.to_vec(),
                probs,
                reduction,
            },
            needs,
        ))
    }

    /// Negative log-likelihood straight from probabilities (used by the
    /// ensemble adversary, whose prediction is an averaged distribution).
    pub fn nll_from_probs(
        &mut self,
        probs: Var,
        labels: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let sx = self.shape(probs).to_vec();
        if sx.len() != 2 || sx[0] != labels.len() {
            return Err(shape_err(
                "nll_from_probs",
                format!("probs {:?} with {} labels", sx, labels.len()),
            ));
        }
        let (b, c) = (sx[0], sx[1]);
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: c,
                    sample: i,
                });
            }
        }
        let ps = self.data(probs);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            loss -= scalar::ln(ps[i * c + y]);
        }
        if matches!(reduction, Reduction::Mean) {
            loss /= b as Real;
        }
        let needs = self.needs(probs);
        let t = Tensor::scalar(loss);
        Ok(self.push(
            t,
            Op::NllFromProbs {
                probs,
                labels: labels.to_vec(),
                reduction,
            },
            needs,
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Populates gradients of every reachable `requires_grad` tensor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::NonScalarBackward {
                numel: self.nodes[loss.0].tensor.numel(),
            });
        }
        for node in self.nodes.iter_mut() {
            node.tensor.clear_grad();
        }
        *self.nodes[loss.0].tensor.grad_mut() = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].tensor.grad().is_none() {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(id);
            let node = &tail[0];
            let gy = node.tensor.grad().expect("checked above");
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (head[a.0].tensor.shape()[0], head[a.0].tensor.shape()[1]);
                    let n = head[b.0].tensor.shape()[1];
                    if head[a.0].needs_grad {
                        // dA = dC . B^T
                        let mut da = vec![0.0; m * k];
                        matmul_nt(gy, head[b.0].tensor.data(), &mut da, m, n, k);
                        accumulate(head, *a, &da);
                    }
                    if head[b.0].needs_grad {
                        // dB = A^T . dC
                        let mut db = vec![0.0; k * n];
                        matmul_tn(head[a.0].tensor.data(), gy, &mut db, m, k, n);
                        accumulate(head, *b, &db);
                    }
                }
                Op::MatmulNt { a, b } => {
                    let (m, k) = (head[a.0].tensor.shape()[0], head[a.0].tensor.shape()[1]);
                    let n = head[b.0].tensor.shape()[0];
                    if head[a.0].needs_grad {
                        // dA = dC . B ([m,n] . [n,k])
                        let mut da = vec![0.0; m * k];
                        matmul_nn(gy, head[b.0].tensor.data(), &mut da, m, n, k);
                        accumulate(head, *a, &da);
                    }
                    if head[b.0].needs_grad {
                        // dB = dC^T . A ([n,m] . [m,k])
                        let mut db = vec![0.0; n * k];
                        matmul_tn(gy, head[a.0].tensor.data(), &mut db, m, n, k);
                        accumulate(head, *b, &db);
                    }
                }
                Op::Conv2d { x, w, geom, cols } => {
                    let ck = geom.ci * geom.k * geom.k;
                    let rows = geom.b * geom.oh * geom.ow;
                    let ohw = geom.oh * geom.ow;
                    // Gather dY back into [rows, co].
                    let mut gymat = vec![0.0; rows * geom.co];
                    for bi in 0..geom.b {
                        for o in 0..geom.co {
                            let src = (bi * geom.co + o) * ohw;
                            for p in 0..ohw {
                                gymat[(bi * ohw + p) * geom.co + o] = gy[src + p];
                            }
                        }
                    }
                    if head[w.0].needs_grad {
                        // dW[o, :] += sum_r gymat[r, o] * cols[r, :]
                        let mut dw = vec![0.0; geom.co * ck];
                        matmul_tn(&gymat, cols, &mut dw, rows, geom.co, ck);
                        accumulate(head, *w, &dw);
                    }
                    if head[x.0].needs_grad {
                        // dcols = gymat . wmat, then fold back to the input.
                        let mut dcols = vec![0.0; rows * ck];
                        matmul_nn(&gymat, head[w.0].tensor.data(), &mut dcols, rows, geom.co, ck);
                        let dx = col2im(&dcols, geom);
                        accumulate(head, *x, &dx);
                    }
                }
                Op::Add { a, b } => {
                    if head[a.0].needs_grad {
                        accumulate(head, *a, gy);
                    }
                    if head[b.0].needs_grad {
                        accumulate(head, *b, gy);
                    }
                }
                Op::Mul { a, b } => {
                    if head[a.0].needs_grad {
                        let da: Vec<Real> = gy
                            .iter()
                            .zip(head[b.0].tensor.data())
                            .map(|(g, v)| g * v)
                            .collect();
                        accumulate(head, *a, &da);
                    }
                    if head[b.0].needs_grad {
                        let db: Vec<Real> = gy
                            .iter()
                            .zip(head[a.0].tensor.data())
                            .map(|(g, v)| g * v)
                            .collect();
                        accumulate(head, *b, &db);
                    }
                }
                Op::Scale { x, c } => {
                    if head[x.0].needs_grad {
                        let dx: Vec<Real> = gy.iter().map(|g| g * c).collect();
                        accumulate(head, *x, &dx);
                    }
                }
                Op::Relu { x } => {
                    if head[x.0].needs_grad {
                        let dx: Vec<Real> = gy
                            .iter()
                            .zip(head[x.0].tensor.data())
                            .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                            .collect();
                        accumulate(head, *x, &dx);
                    }
                }
                Op::MaxPool { x, argmax, .. } => {
                    if head[x.0].needs_grad {
                        let mut dx = vec![0.0; head[x.0].tensor.numel()];
                        for (g, &idx) in gy.iter().zip(argmax) {
                            dx[idx as usize] += *g;
                        }
                        accumulate(head, *x, &dx);
                    }
                }
                Op::AvgPool { x, geom } => {
                    if head[x.0].needs_grad {
                        let mut dx = vec![0.0; head[x.0].tensor.numel()];
                        let inv_area = 1.0 / (geom.k * geom.k) as Real;
                        let ohw = geom.oh * geom.ow;
                        for bi in 0..geom.b {
                            for c in 0..geom.c {
                                let dst = (bi * geom.c + c) * geom.h * geom.w;
                                let src = (bi * geom.c + c) * ohw;
                                for oy in 0..geom.oh {
                                    for ox in 0..geom.ow {
                                        let g = gy[src + oy * geom.ow + ox] * inv_area;
                                        for ky in 0..geom.k {
                                            let iy = (oy * geom.stride + ky) as isize
                                                - geom.pad as isize;
                                            if iy < 0 || iy >= geom.h as isize {
                                                continue;
                                            }
                                            for kx in 0..geom.k {
                                                let ix = (ox * geom.stride + kx) as isize
                                                    - geom.pad as isize;
                                                if ix < 0 || ix >= geom.w as isize {
                                                    continue;
                                                }
                                                dx[dst + iy as usize * geom.w + ix as usize] += g;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        accumulate(head, *x, &dx);
                    }
                }
                Op::BatchNormTrain { x, inv_std } => {
                    if head[x.0].needs_grad {
                        let sx = node.tensor.shape();
                        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                        let m = (b * h * w) as Real;
                        let yh = node.tensor.data();
                        let mut sum_g = vec![0.0; c];
                        let mut sum_gy = vec![0.0; c];
                        for bi in 0..b {
                            for ci in 0..c {
                                let o = (bi * c + ci) * h * w;
                                for i in 0..h * w {
                                    sum_g[ci] += gy[o + i];
                                    sum_gy[ci] += gy[o + i] * yh[o + i];
                                }
                            }
                        }
                        let mut dx = vec![0.0; gy.len()];
                        for bi in 0..b {
                            for ci in 0..c {
                                let o = (bi * c + ci) * h * w;
                                for i in 0..h * w {
                                    dx[o + i] = inv_std[ci]
                                        * (gy[o + i]
                                            - sum_g[ci] / m
                                            - yh[o + i] * sum_gy[ci] / m);
                                }
                            }
                        }
                        accumulate(head, *x, &dx);
                    }
                }
                Op::BatchNormEval { x, inv_std } => {
                    if head[x.0].needs_grad {
                        let sx = node.tensor.shape();
                        let (b, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                        let mut dx = vec![0.0; gy.len()];
                        for bi in 0..b {
                            for ci in 0..c {
                                let o = (bi * c + ci) * hw;
                                for i in 0..hw {
                                    dx[o + i] = gy[o + i] * inv_std[ci];
                                }
                            }
                        }
                        accumulate(head, *x, &dx);
                    }
                }
                Op::Reshape { x } => {
                    if head[x.0].needs_grad {
                        accumulate(head, *x, gy);
                    }
                }
                Op::Softmax { x } => {
                    if head[x.0].needs_grad {
                        let sx = node.tensor.shape();
                        let (b, c) = (sx[0], sx[1]);
                        let ys = node.tensor.data();
                        let mut dx = vec![0.0; gy.len()];
                        for i in 0..b {
                            let row = i * c;
                            let dot: Real =
                                (0..c).map(|j| gy[row + j] * ys[row + j]).sum();
                            for j in 0..c {
                                dx[row + j] = ys[row + j] * (gy[row + j] - dot);
                            }
                        }
                        accumulate(head, *x, &dx);
                    }
                }
                Op::CrossEntropyLogits {
                    logits,
                    labels,
                    probs,
                    reduction,
                } => {
                    if head[logits.0].needs_grad {
                        let g = gy[0];
                        let b = labels.len();
                        let c = probs.len() / b;
                        let wgt = match reduction {
                            Reduction::Mean => g / b as Real,
                            Reduction::Sum => g,
                        };
                        let mut dz = vec![0.0; probs.len()];
                        for i in 0..b {
                            for j in 0..c {
                                let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                                dz[i * c + j] = wgt * (probs[i * c + j] - onehot);
                            }
                        }
                        accumulate(head, *logits, &dz);
                    }
                }
                Op::NllFromProbs {
                    probs,
                    labels,
                    reduction,
                } => {
                    if head[probs.0].needs_grad {
                        let g = gy[0];
                        let b = labels.len();
                        let c = head[probs.0].tensor.numel() / b;
                        let wgt = match reduction {
                            Reduction::Mean => g / b as Real,
                            Reduction::Sum => g,
                        };
                        let ps = head[probs.0].tensor.data();
                        let mut dp = vec![0.0; ps.len()];
                        for (i, &y) in labels.iter().enumerate() {
                            dp[i * c + y] = -wgt / ps[i * c + y];
                        }
                        accumulate(head, *probs, &dp);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(head: &mut [Node], v: Var, contrib: &[Real]) {
    let tensor = &mut head[v.0].tensor;
    let grad = tensor.grad_mut();
    match grad {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += *ci;
            }
        }
        None => *grad = Some(contrib.to_vec()),
    }
}

/// c[m,n] += a[m,k] . b[k,n]
fn matmul_nn(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

/// c[m,n] += a[m,k] . b[n,k]^T (dot products of rows)
fn matmul_nt(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            c[i * n + j] += acc;
        }
    }
}

/// c[k,n] += a[m,k]^T . b[m,n]
fn matmul_tn(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let crow = &mut c[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

fn im2col(xs: &[Real], g: &ConvGeom) -> Vec<Real> {
    let ck = g.ci * g.k * g.k;
    let ohw = g.oh * g.ow;
    let mut cols = vec![0.0; g.b * ohw * ck];
    for bi in 0..g.b {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = (bi * ohw + oy * g.ow + ox) * ck;
                for ci in 0..g.ci {
                    let src = (bi * g.ci + ci) * g.h * g.w;
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            let col = (ci * g.k + ky) * g.k + kx;
                            if iy >= 0 && iy < g.h as isize && ix >= 0 && ix < g.w as isize {
                                cols[row + col] = xs[src + iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[Real], g: &ConvGeom) -> Vec<Real> {
    let ck = g.ci * g.k * g.k;
    let ohw = g.oh * g.ow;
    let mut dx = vec![0.0; g.b * g.ci * g.h * g.w];
    for bi in 0..g.b {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = (bi * ohw + oy * g.ow + ox) * ck;
                for ci in 0..g.ci {
                    let dst = (bi * g.ci + ci) * g.h * g.w;
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let col = (ci * g.k + ky) * g.k + kx;
                            dx[dst + iy as usize * g.w + ix as usize] += dcols[row + col];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn softmax_rows(zs: &[Real], b: usize, c: usize) -> Vec<Real> {
    let mut out = vec![0.0; zs.len()];
    for i in 0..b {
        let row = &zs[i * c..(i + 1) * c];
        let mx = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let mut denom = 0.0;
        for j in 0..c {
            let e = scalar::exp(row[j] - mx);
            out[i * c + j] = e;
            denom += e;
        }
        for j in 0..c {
            out[i * c + j] /= denom;
        }
    }
    out
}
