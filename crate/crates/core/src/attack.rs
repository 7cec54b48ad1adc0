//! Gradient attacks: FGSM, FGSM-RS, and projected gradient descent under
//! L-inf and L2 norms, plus the two adaptive attacks over ticket sets.
//!
//! The L-inf step is `delta <- clip_eps(delta + alpha * sign(grad))`,
//! iterated `steps` times; the valid-range clip of `x + delta` happens once
//! at the end. The L2 step normalizes the per-sample gradient and projects
//! radially back onto the epsilon ball. `sign(0) = 0`.
//!
//! Attack losses reduce with `Sum`, so per-sample gradients carry no batch
//! factor and sharded generation is bit-identical to whole-batch generation.
//! Random starts draw from one split PRNG stream per input, keyed by the
//! input's absolute index.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::prng::Prng;
use crate::scalar;
use crate::tape::{Reduction, Tape};
use crate::tensor::Tensor;
use crate::Real;

/// Perturbation norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackNorm {
    Linf,
    L2,
}

impl AttackNorm {
    pub fn name(self) -> &'static str {
        match self {
            AttackNorm::Linf => "linf",
            AttackNorm::L2 => "l2",
        }
    }
}

/// Attack hyperparameters; construct through the checked constructors.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub norm: AttackNorm,
    pub epsilon: Real,
    pub alpha: Real,
    pub steps: usize,
    pub random_start: bool,
    /// Valid input range [lo, hi].
    pub bounds: (Real, Real),
}

impl AttackConfig {
    /// `epsilon = 0` is allowed as a degenerate null attack (the identity
    /// baseline: robust accuracy equals natural accuracy); anything negative
    /// or non-finite is rejected.
    pub fn new(
        norm: AttackNorm,
        epsilon: Real,
        alpha: Real,
        steps: usize,
        random_start: bool,
        bounds: (Real, Real),
    ) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidConfig(alloc::format!(
                "attack epsilon {epsilon} must be non-negative"
            )));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidConfig(alloc::format!(
                "attack step size {alpha} must be non-negative"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidConfig("attack needs at least one step".into()));
        }
        if !(bounds.0 < bounds.1) {
            return Err(Error::InvalidConfig(alloc::format!(
                "bounds [{}, {}] are empty",
                bounds.0,
                bounds.1
            )));
        }
        Ok(AttackConfig {
            norm,
            epsilon,
            alpha,
            steps,
            random_start,
            bounds,
        })
    }

    /// Single sign step of size epsilon from a zero start.
    pub fn fgsm(epsilon: Real, bounds: (Real, Real)) -> Result<Self> {
        AttackConfig::new(AttackNorm::Linf, epsilon, epsilon, 1, false, bounds)
    }

    /// Uniform random start in the epsilon ball, then one step of `alpha`.
    pub fn fgsm_rs(epsilon: Real, alpha: Real, bounds: (Real, Real)) -> Result<Self> {
        AttackConfig::new(AttackNorm::Linf, epsilon, alpha, 1, true, bounds)
    }

    pub fn pgd_linf(
        epsilon: Real,
        alpha: Real,
        steps: usize,
        random_start: bool,
        bounds: (Real, Real),
    ) -> Result<Self> {
        AttackConfig::new(AttackNorm::Linf, epsilon, alpha, steps, random_start, bounds)
    }

    pub fn pgd_l2(
        epsilon: Real,
        alpha: Real,
        steps: usize,
        random_start: bool,
        bounds: (Real, Real),
    ) -> Result<Self> {
        AttackConfig::new(AttackNorm::L2, epsilon, alpha, steps, random_start, bounds)
    }

    /// Short label for reports, e.g. `pgd20-linf-eps0.1`.
    pub fn label(&self) -> String {
        let kind = if self.steps == 1 && !self.random_start {
            alloc::format!("fgsm")
        } else if self.steps == 1 && self.random_start {
            alloc::format!("fgsm_rs")
        } else {
            alloc::format!("pgd{}", self.steps)
        };
        alloc::format!("{kind}-{}-eps{}", self.norm.name(), self.epsilon)
    }
}

/// Anything that yields the gradient of a sum-reduced loss with respect to
/// the input batch.
pub(crate) trait GradSource {
    fn input_grad(&self, x: &Tensor, y: &[usize]) -> Result<Vec<Real>>;
}

pub(crate) struct ModelGrad<'a> {
    pub net: &'a Network,
    /// Batch-statistics normalization (inner maximization during search).
    pub training: bool,
}

impl GradSource for ModelGrad<'_> {
    fn input_grad(&self, x: &Tensor, y: &[usize]) -> Result<Vec<Real>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().with_grad());
        let out = self.net.forward(&mut tape, xv, self.training, false)?;
        let loss = tape.cross_entropy_logits(out.logits, y, Reduction::Sum)?;
        tape.backward(loss)?;
        Ok(tape.grad(xv).expect("input requires grad").to_vec())
    }
}

/// Mean of the candidate tickets' gradients, realized as the gradient of the
/// ticket-averaged loss on one joint tape.
struct EotGrad<'a> {
    nets: &'a [&'a Network],
}

impl GradSource for EotGrad<'_> {
    fn input_grad(&self, x: &Tensor, y: &[usize]) -> Result<Vec<Real>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().with_grad());
        let mut total = None;
        for net in self.nets {
            let out = net.forward(&mut tape, xv, false, false)?;
            let loss = tape.cross_entropy_logits(out.logits, y, Reduction::Sum)?;
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        let total = total.expect("nonempty ticket set");
        let mean = tape.scale(total, 1.0 / self.nets.len() as Real)?;
        tape.backward(mean)?;
        Ok(tape.grad(xv).expect("input requires grad").to_vec())
    }
}

/// Composite model whose prediction is the average of the tickets' softmax
/// distributions; the loss differentiates through that average.
struct EnsembleGrad<'a> {
    nets: &'a [&'a Network],
}

impl GradSource for EnsembleGrad<'_> {
    fn input_grad(&self, x: &Tensor, y: &[usize]) -> Result<Vec<Real>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().with_grad());
        let mean = mean_probs(&mut tape, self.nets, xv)?;
        let loss = tape.nll_from_probs(mean, y, Reduction::Sum)?;
        tape.backward(loss)?;
        Ok(tape.grad(xv).expect("input requires grad").to_vec())
    }
}

pub(crate) fn mean_probs(
    tape: &mut Tape,
    nets: &[&Network],
    xv: crate::tape::Var,
) -> Result<crate::tape::Var> {
    let mut sum = None;
    for net in nets {
        let out = net.forward(tape, xv, false, false)?;
        let probs = tape.softmax(out.logits)?;
        sum = Some(match sum {
            None => probs,
            Some(acc) => tape.add(acc, probs)?,
        });
    }
    let sum = sum.expect("nonempty ticket set");
    tape.scale(sum, 1.0 / nets.len() as Real)
}

fn validate_ticket_set(op: &'static str, nets: &[&Network]) -> Result<()> {
    if nets.is_empty() {
        return Err(Error::EmptyTicketSet { op });
    }
    let first = nets[0];
    for net in &nets[1..] {
        if net.spec().input != first.spec().input || net.classes() != first.classes() {
            return Err(Error::ShapeMismatch {
                op,
                detail: alloc::format!(
                    "tickets disagree on geometry: {:?}/{} vs {:?}/{}",
                    first.spec().input,
                    first.classes(),
                    net.spec().input,
                    net.classes()
                ),
            });
        }
    }
    Ok(())
}

/// Consecutive per-input stream keys for a batch at `base` within a split.
pub fn input_keys(base: u64, n: usize) -> Vec<u64> {
    (base..base + n as u64).collect()
}

/// Core attack loop shared by every variant. `keys` holds one PRNG stream
/// key per sample (its absolute index within the split), so generation is
/// independent of batching.
pub(crate) fn perturb_source<S: GradSource>(
    source: &S,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    root: &Prng,
    keys: &[u64],
) -> Result<Tensor> {
    let batch = x.shape()[0];
    if y.len() != batch || keys.len() != batch {
        return Err(Error::ShapeMismatch {
            op: "perturb",
            detail: alloc::format!(
                "{} labels and {} stream keys for a batch of {}",
                y.len(),
                keys.len(),
                batch
            ),
        });
    }
    let per = x.numel() / batch;
    let mut delta = vec![0.0; x.numel()];

    if cfg.random_start {
        for i in 0..batch {
            let mut stream = root.split(keys[i]);
            let block = &mut delta[i * per..(i + 1) * per];
            stream.fill_uniform(block, -cfg.epsilon, cfg.epsilon);
            if matches!(cfg.norm, AttackNorm::L2) {
                project_l2(block, cfg.epsilon);
            }
        }
    }

    let mut x_adv = x.data().to_vec();
    for _ in 0..cfg.steps {
        for (o, (xi, di)) in x_adv.iter_mut().zip(x.data().iter().zip(&delta)) {
            *o = xi + di;
        }
        let x_t = Tensor::new(x.shape(), x_adv.clone())?;
        let grad = source.input_grad(&x_t, y)?;
        match cfg.norm {
            AttackNorm::Linf => {
                for (d, g) in delta.iter_mut().zip(&grad) {
                    *d += cfg.alpha * scalar::sign(*g);
                    *d = d.clamp(-cfg.epsilon, cfg.epsilon);
                }
            }
            AttackNorm::L2 => {
                for i in 0..batch {
                    let gblock = &grad[i * per..(i + 1) * per];
                    let norm = l2_norm(gblock);
                    let dblock = &mut delta[i * per..(i + 1) * per];
                    if norm > 0.0 {
                        for (d, g) in dblock.iter_mut().zip(gblock) {
                            *d += cfg.alpha * g / norm;
                        }
                    }
                    project_l2(dblock, cfg.epsilon);
                }
            }
        }
    }

    let mut out = vec![0.0; x.numel()];
    for (o, (xi, di)) in out.iter_mut().zip(x.data().iter().zip(&delta)) {
        *o = (xi + di).clamp(cfg.bounds.0, cfg.bounds.1);
    }
    Tensor::new(x.shape(), out)
}

fn l2_norm(v: &[Real]) -> Real {
    scalar::sqrt(v.iter().map(|x| x * x).sum())
}

/// Radial projection onto the closed L2 ball of the given radius.
fn project_l2(v: &mut [Real], radius: Real) {
    let norm = l2_norm(v);
    if norm > radius {
        let s = radius / norm;
        for x in v.iter_mut() {
            *x *= s;
        }
    }
}

/// Adversarial examples against a single model (evaluation-mode statistics).
///
/// `keys` holds each sample's absolute index within its split; it seeds the
/// per-input random-start streams so sharded and sequential runs agree
/// exactly.
pub fn perturb(
    net: &Network,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    root: &Prng,
    keys: &[u64],
) -> Result<Tensor> {
    perturb_source(
        &ModelGrad {
            net,
            training: false,
        },
        x,
        y,
        cfg,
        root,
        keys,
    )
}

/// Expectation-over-transformation attack: every step follows the mean of
/// the candidate tickets' gradients.
pub fn eot_perturb(
    tickets: &[&Network],
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    root: &Prng,
    keys: &[u64],
) -> Result<Tensor> {
    validate_ticket_set("eot_perturb", tickets)?;
    perturb_source(&EotGrad { nets: tickets }, x, y, cfg, root, keys)
}

/// Ensemble attack: attacks the model whose class probabilities are the
/// arithmetic mean of the tickets' softmax outputs.
pub fn ensemble_perturb(
    tickets: &[&Network],
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    root: &Prng,
    keys: &[u64],
) -> Result<Tensor> {
    validate_ticket_set("ensemble_perturb", tickets)?;
    perturb_source(&EnsembleGrad { nets: tickets }, x, y, cfg, root, keys)
}
