//! Evaluation and defense: accuracy reports, transferability matrices, the
//! randomized ticket-switch defense, and the feature-distance probe.
//!
//! Everything here is read-only over frozen networks and evaluation-mode
//! statistics, so per-sample results are independent of batching. Per-input
//! randomness (attack starts, ticket draws, probe noise) comes from streams
//! split off a root seed by the input's index within the split; sharded and
//! sequential runs therefore agree exactly.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attack::{
    ensemble_perturb, eot_perturb, input_keys, perturb, AttackConfig,
};
use crate::data::DataSplit;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::prng::Prng;
use crate::scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Real;

// Stream tags under the evaluation root seed.
const STREAM_EVAL_ATTACK: u64 = 0x45564131; // "EVA1"
const STREAM_ATTACKER_PICK: u64 = 0x45564132;
const STREAM_DEFENDER_PICK: u64 = 0x45564133;
const STREAM_ADAPTIVE: u64 = 0x45564134;
const STREAM_NOISE: u64 = 0x45564135;

const EVAL_BATCH: usize = 256;

/// Robust accuracy under one attack, with the attack's provenance (which
/// model generated the adversarial examples).
#[derive(Debug, Clone, PartialEq)]
pub struct RobustResult {
    pub attack: AttackConfig,
    pub acc: f64,
    pub provenance: String,
}

/// Natural and per-attack robust accuracy over a split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub natural_acc: f64,
    pub robust: Vec<RobustResult>,
}

/// Robust accuracies of defender tickets (columns) against attacks generated
/// by attacker tickets (rows); the diagonal is the matched attack.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    pub acc: Vec<Vec<f64>>,
}

impl TransferMatrix {
    pub fn mean_diagonal(&self) -> f64 {
        let n = self.acc.len();
        self.acc.iter().enumerate().map(|(i, row)| row[i]).sum::<f64>() / n as f64
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.acc.len();
        if n < 2 {
            return 0.0;
        }
        let total: f64 = self
            .acc
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, v)| v)
                    .sum::<f64>()
            })
            .sum();
        total / (n * (n - 1)) as f64
    }
}

/// Random-switch policy over a candidate ticket set.
#[derive(Debug, Clone, PartialEq)]
pub struct R2sPolicy {
    /// Sampling distribution over candidates; must sum to 1.
    pub probs: Vec<f64>,
    /// Sample a ticket per input (default) or once per batch.
    pub per_batch: bool,
}

impl R2sPolicy {
    pub fn uniform(candidates: usize) -> Result<Self> {
        if candidates == 0 {
            return Err(Error::EmptyTicketSet { op: "r2s_policy" });
        }
        Ok(R2sPolicy {
            probs: vec![1.0 / candidates as f64; candidates],
            per_batch: false,
        })
    }

    pub fn weighted(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyTicketSet { op: "r2s_policy" });
        }
        if probs.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidConfig("negative sampling probability".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(alloc::format!(
                "sampling distribution sums to {total}, not 1"
            )));
        }
        Ok(R2sPolicy {
            probs,
            per_batch: false,
        })
    }

    fn validate_against(&self, tickets: &[&Network]) -> Result<()> {
        if tickets.is_empty() {
            return Err(Error::EmptyTicketSet { op: "r2s" });
        }
        if self.probs.len() != tickets.len() {
            return Err(Error::InvalidConfig(alloc::format!(
                "{} probabilities for {} candidates",
                self.probs.len(),
                tickets.len()
            )));
        }
        Ok(())
    }

    fn probs_real(&self) -> Vec<Real> {
        self.probs.iter().map(|&p| p as Real).collect()
    }
}

/// Adaptive adversary for the switch defense.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptiveAttack {
    /// Adversary samples an attack ticket per input, independently of the
    /// defender's draw.
    None,
    Eot,
    Ensemble,
}

impl AdaptiveAttack {
    pub fn name(self) -> &'static str {
        match self {
            AdaptiveAttack::None => "none",
            AdaptiveAttack::Eot => "eot",
            AdaptiveAttack::Ensemble => "ensemble",
        }
    }
}

/// Estimator for the switch defense's accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum R2sMode {
    /// Closed-form average over the attack x defense ticket grid, weighted
    /// by both distributions; no estimator variance.
    Exact,
    /// Monte Carlo: draw attacker and defender tickets per input.
    Sampled,
}

impl R2sMode {
    pub fn name(self) -> &'static str {
        match self {
            R2sMode::Exact => "exact",
            R2sMode::Sampled => "sampled",
        }
    }
}

/// Switch-defense evaluation result.
#[derive(Debug, Clone, PartialEq)]
pub struct R2sReport {
    pub n: usize,
    pub natural_acc: f64,
    pub robust_acc: f64,
    pub adaptive: AdaptiveAttack,
    pub mode: R2sMode,
}

fn batch_ranges(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(EVAL_BATCH).map(move |start| {
        let end = (start + EVAL_BATCH).min(n);
        (start, end)
    })
}

/// Top-1 accuracy of `net` on clean inputs.
fn natural_accuracy(net: &Network, split: &DataSplit) -> Result<f64> {
    let mut correct = 0usize;
    for (start, end) in batch_ranges(split.len()) {
        let batch = split.range(start, end)?;
        let preds = net.predict(&batch.images)?;
        correct += preds
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Accuracy of `net` on a precomputed adversarial split (images in dataset
/// order, labels from the original split).
fn accuracy_on_images(net: &Network, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    let mut correct = 0usize;
    for (start, end) in batch_ranges(n) {
        let x = images.slice_rows(start, end)?;
        let preds = net.predict(&x)?;
        correct += preds
            .iter()
            .zip(&labels[start..end])
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(correct as f64 / n as f64)
}

/// Generates the full adversarial split against one model, in dataset order.
fn adversarial_split(
    net: &Network,
    split: &DataSplit,
    cfg: &AttackConfig,
    root: &Prng,
) -> Result<Tensor> {
    let mut out: Vec<Real> = Vec::with_capacity(split.images.numel());
    for (start, end) in batch_ranges(split.len()) {
        let batch = split.range(start, end)?;
        let keys = input_keys(start as u64, end - start);
        let adv = perturb(net, &batch.images, &batch.labels, cfg, root, &keys)?;
        out.extend_from_slice(adv.data());
    }
    Tensor::new(split.images.shape(), out)
}

/// Natural accuracy plus robust accuracy under each attack config
/// (matched attacks: the evaluated model generates its own adversary).
pub fn evaluate(
    net: &Network,
    split: &DataSplit,
    attacks: &[AttackConfig],
    seed: u64,
) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::InvalidDataset("empty split".into()));
    }
    let natural_acc = natural_accuracy(net, split)?;
    let mut robust = Vec::with_capacity(attacks.len());
    for (ai, cfg) in attacks.iter().enumerate() {
        let root = Prng::new(seed).split2(STREAM_EVAL_ATTACK, ai as u64);
        let adv = adversarial_split(net, split, cfg, &root)?;
        let acc = accuracy_on_images(net, &adv, &split.labels)?;
        robust.push(RobustResult {
            attack: cfg.clone(),
            acc,
            provenance: "matched".into(),
        });
    }
    Ok(EvalReport {
        n: split.len(),
        natural_acc,
        robust,
    })
}

/// Entry (i, j): robust accuracy of ticket j against adversarial examples
/// generated on ticket i. Attack streams are shared with `r2s_evaluate`'s
/// exact mode, so the two agree identically.
pub fn transfer_matrix(
    tickets: &[&Network],
    split: &DataSplit,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<TransferMatrix> {
    if tickets.len() < 2 {
        return Err(Error::InvalidConfig(
            "transfer matrix needs at least two tickets".into(),
        ));
    }
    let mut acc = vec![vec![0.0; tickets.len()]; tickets.len()];
    for (i, attacker) in tickets.iter().enumerate() {
        let root = Prng::new(seed).split2(STREAM_EVAL_ATTACK, i as u64);
        let adv = adversarial_split(attacker, split, cfg, &root)?;
        for (j, defender) in tickets.iter().enumerate() {
            acc[i][j] = accuracy_on_images(defender, &adv, &split.labels)?;
        }
    }
    Ok(TransferMatrix { acc })
}

/// Predicts each input with a ticket sampled from the policy distribution.
pub fn r2s_predict(
    tickets: &[&Network],
    policy: &R2sPolicy,
    x: &Tensor,
    prng: &mut Prng,
) -> Result<Vec<usize>> {
    policy.validate_against(tickets)?;
    let n = x.shape()[0];
    let probs = policy.probs_real();
    let picks: Vec<usize> = if policy.per_batch {
        let k = prng.categorical(&probs);
        vec![k; n]
    } else {
        (0..n).map(|_| prng.categorical(&probs)).collect()
    };
    predict_with_picks(tickets, x, &picks)
}

/// Runs grouped inference: inputs routed to their sampled ticket, results
/// reassembled in input order.
fn predict_with_picks(tickets: &[&Network], x: &Tensor, picks: &[usize]) -> Result<Vec<usize>> {
    let n = x.shape()[0];
    let mut out = vec![0usize; n];
    for (t, net) in tickets.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&i| picks[i] == t).collect();
        if rows.is_empty() {
            continue;
        }
        let grouped = x.gather_rows(&rows)?;
        let preds = net.predict(&grouped)?;
        for (row, pred) in rows.iter().zip(preds) {
            out[*row] = pred;
        }
    }
    Ok(out)
}

/// Evaluates the random-switch defense.
///
/// `Exact` averages over the full attack x defense grid weighted by both
/// distributions (adversary and defender share the candidate set and
/// distribution). `Sampled` draws attacker and defender tickets
/// independently per input from split streams.
pub fn r2s_evaluate(
    tickets: &[&Network],
    policy: &R2sPolicy,
    split: &DataSplit,
    cfg: &AttackConfig,
    adaptive: AdaptiveAttack,
    mode: R2sMode,
    seed: u64,
) -> Result<R2sReport> {
    policy.validate_against(tickets)?;
    if split.is_empty() {
        return Err(Error::InvalidDataset("empty split".into()));
    }
    let n = split.len();
    let root = Prng::new(seed);

    let natural_acc = match mode {
        R2sMode::Exact => {
            let mut acc = 0.0;
            for (j, net) in tickets.iter().enumerate() {
                if policy.probs[j] > 0.0 {
                    acc += policy.probs[j] * natural_accuracy(net, split)?;
                }
            }
            acc
        }
        R2sMode::Sampled => {
            let mut defender = root.split2(STREAM_DEFENDER_PICK, 0);
            let preds = r2s_predict(tickets, policy, &split.images, &mut defender)?;
            preds
                .iter()
                .zip(&split.labels)
                .filter(|(p, y)| p == y)
                .count() as f64
                / n as f64
        }
    };

    let robust_acc = match adaptive {
        AdaptiveAttack::None => match mode {
            R2sMode::Exact if tickets.len() == 1 => {
                // Degenerate 1x1 grid: matched attack on the only ticket.
                let root = Prng::new(seed).split2(STREAM_EVAL_ATTACK, 0);
                let adv = adversarial_split(tickets[0], split, cfg, &root)?;
                accuracy_on_images(tickets[0], &adv, &split.labels)?
            }
            R2sMode::Exact => {
                let matrix = transfer_matrix(tickets, split, cfg, seed)?;
                let mut acc = 0.0;
                for i in 0..tickets.len() {
                    for j in 0..tickets.len() {
                        acc += policy.probs[i] * policy.probs[j] * matrix.acc[i][j];
                    }
                }
                acc
            }
            R2sMode::Sampled => {
                let probs = policy.probs_real();
                // Per-input attacker draw, keyed by input index.
                let attacker_root = root.split2(STREAM_ATTACKER_PICK, 0);
                let picks: Vec<usize> = (0..n)
                    .map(|i| attacker_root.split(i as u64).categorical(&probs))
                    .collect();
                // Generate adversarial inputs per attacker group, keeping
                // each input's stream key (its split index).
                let mut adv_flat = split.images.data().to_vec();
                let per = split.images.numel() / n;
                for (t, attacker) in tickets.iter().enumerate() {
                    let rows: Vec<usize> = (0..n).filter(|&i| picks[i] == t).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let sub = split.gather(&rows)?;
                    let keys: Vec<u64> = rows.iter().map(|&r| r as u64).collect();
                    let attack_root = Prng::new(seed).split2(STREAM_EVAL_ATTACK, t as u64);
                    let adv = perturb(
                        attacker,
                        &sub.images,
                        &sub.labels,
                        cfg,
                        &attack_root,
                        &keys,
                    )?;
                    for (gi, &r) in rows.iter().enumerate() {
                        adv_flat[r * per..(r + 1) * per]
                            .copy_from_slice(&adv.data()[gi * per..(gi + 1) * per]);
                    }
                }
                let adv = Tensor::new(split.images.shape(), adv_flat)?;
                let mut defender = root.split2(STREAM_DEFENDER_PICK, 1);
                let preds = r2s_predict(tickets, policy, &adv, &mut defender)?;
                preds
                    .iter()
                    .zip(&split.labels)
                    .filter(|(p, y)| p == y)
                    .count() as f64
                    / n as f64
            }
        },
        AdaptiveAttack::Eot | AdaptiveAttack::Ensemble => {
            let attack_root = root.split2(STREAM_ADAPTIVE, 0);
            let mut adv_parts: Vec<Real> = Vec::with_capacity(split.images.numel());
            for (start, end) in batch_ranges(n) {
                let batch = split.range(start, end)?;
                let keys = input_keys(start as u64, end - start);
                let adv = match adaptive {
                    AdaptiveAttack::Eot => {
                        eot_perturb(tickets, &batch.images, &batch.labels, cfg, &attack_root, &keys)?
                    }
                    _ => ensemble_perturb(
                        tickets,
                        &batch.images,
                        &batch.labels,
                        cfg,
                        &attack_root,
                        &keys,
                    )?,
                };
                adv_parts.extend_from_slice(adv.data());
            }
            let adv = Tensor::new(split.images.shape(), adv_parts)?;
            match mode {
                R2sMode::Exact => {
                    let mut acc = 0.0;
                    for (j, net) in tickets.iter().enumerate() {
                        if policy.probs[j] > 0.0 {
                            acc += policy.probs[j]
                                * accuracy_on_images(net, &adv, &split.labels)?;
                        }
                    }
                    acc
                }
                R2sMode::Sampled => {
                    let mut defender = root.split2(STREAM_DEFENDER_PICK, 2);
                    let preds = r2s_predict(tickets, policy, &adv, &mut defender)?;
                    preds
                        .iter()
                        .zip(&split.labels)
                        .filter(|(p, y)| p == y)
                        .count() as f64
                        / n as f64
                }
            }
        }
    };

    Ok(R2sReport {
        n,
        natural_acc,
        robust_acc,
        adaptive,
        mode,
    })
}

/// Mean normalized feature distance under uniform input noise of magnitude
/// `eps`: for each input, `||F(x + eta) - F(x)||_2 / (||F(x)||_2 + 1e-12)`
/// with F the last convolution layer's activation.
pub fn feature_distance(net: &Network, split: &DataSplit, eps: Real, seed: u64) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::InvalidDataset("empty split".into()));
    }
    let root = Prng::new(seed).split2(STREAM_NOISE, 0);
    let n = split.len();
    let per = split.images.numel() / n;
    let mut total = 0.0f64;
    for (start, end) in batch_ranges(n) {
        let batch = split.range(start, end)?;
        let clean = last_conv_features(net, &batch.images)?;
        let mut noisy_data = batch.images.data().to_vec();
        for i in 0..(end - start) {
            let mut stream = root.split((start + i) as u64);
            for v in noisy_data[i * per..(i + 1) * per].iter_mut() {
                *v += stream.uniform(-eps, eps);
            }
        }
        let noisy_images = Tensor::new(batch.images.shape(), noisy_data)?;
        let noisy = last_conv_features(net, &noisy_images)?;
        let feat = clean.len() / (end - start);
        for i in 0..(end - start) {
            let c = &clean[i * feat..(i + 1) * feat];
            let m = &noisy[i * feat..(i + 1) * feat];
            let mut diff = 0.0;
            let mut norm = 0.0;
            for (a, b) in c.iter().zip(m) {
                diff += (b - a) * (b - a);
                norm += a * a;
            }
            total += (scalar::sqrt(diff) / (scalar::sqrt(norm) + 1e-12)) as f64;
        }
    }
    Ok(total / n as f64)
}

fn last_conv_features(net: &Network, x: &Tensor) -> Result<Vec<Real>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = net.forward(&mut tape, xv, false, false)?;
    let Some(feat) = out.last_conv else {
        return Err(Error::InvalidConfig(
            "feature distance needs a model with a convolution layer".into(),
        ));
    };
    Ok(tape.value(feat).data().to_vec())
}
