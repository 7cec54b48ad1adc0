//! Outer optimization loops: scratch-ticket search on frozen weights,
//! dense natural/adversarial training, trained-ticket search, and ticket
//! fine-tuning.
//!
//! All four share one minibatch loop. Per batch: optionally generate
//! adversarial inputs with the inner adversary (batch-statistics forward),
//! run a training forward, backpropagate into the effective weights, and
//! step either the scores (straight-through search) or theta (training and
//! fine-tuning). Optimizer steps are strictly sequential; determinism is
//! the contract, so the loop owns every PRNG stream it uses.

use alloc::vec::Vec;

use crate::attack::{perturb_source, AttackConfig, ModelGrad};
use crate::checkpoint::{Provenance, TicketCheckpoint};
use crate::data::DataSplit;
use crate::error::{Error, Result};
use crate::init::InitSpec;
use crate::mask::SparsityPattern;
use crate::netspec::NetworkSpec;
use crate::network::Network;
use crate::prng::Prng;
use crate::sgd::{Schedule, Sgd};
use crate::tape::{Reduction, Tape};

// Stream tags for the loop's split PRNG streams.
const STREAM_SHUFFLE: u64 = 0;
const STREAM_ATTACK: u64 = 1;
const STREAM_REINIT: u64 = 2;

/// Dense training mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Natural,
    Adversarial,
}

/// Fine-tuning weight origin: keep the ticket's frozen weights or redraw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMode {
    Inherit,
    Reinit,
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// A finished run: the live network, its checkpoint, and the loss history.
#[derive(Debug)]
pub struct SearchOutcome {
    pub net: Network,
    pub checkpoint: TicketCheckpoint,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamUpdate {
    /// Straight-through search: gradients land in the scores, theta frozen.
    Scores,
    /// Training / fine-tuning: gradients land in theta, gated by the mask.
    Theta,
}

fn run_loop(
    net: &mut Network,
    update: ParamUpdate,
    data: &DataSplit,
    attack: Option<&AttackConfig>,
    sched: &Schedule,
    prng: &Prng,
) -> Result<Vec<EpochStats>> {
    let sizes: Vec<usize> = net
        .weights()
        .iter()
        .map(|p| match update {
            ParamUpdate::Scores => p.group_count(),
            ParamUpdate::Theta => p.theta().numel(),
        })
        .collect();
    let mut opt = Sgd::new(&sizes, sched.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(sched.epochs);

    for epoch in 0..sched.epochs {
        let lr = sched.lr_at(epoch);
        let mut shuffle_stream = prng.split2(STREAM_SHUFFLE, epoch as u64);
        shuffle_stream.shuffle(&mut order);
        let attack_root = prng.split2(STREAM_ATTACK, epoch as u64);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_i, chunk) in order.chunks(sched.batch_size).enumerate() {
            let batch = data.gather(chunk)?;
            let x_in = match attack {
                Some(cfg) => {
                    let source = ModelGrad {
                        net,
                        training: true,
                    };
                    let keys = crate::attack::input_keys(
                        (batch_i * sched.batch_size) as u64,
                        chunk.len(),
                    );
                    perturb_source(&source, &batch.images, &batch.labels, cfg, &attack_root, &keys)?
                }
                None => batch.images.clone(),
            };

            let mut tape = Tape::new();
            let xv = tape.leaf(x_in);
            let out = net.forward_train(&mut tape, xv, true)?;
            let loss = tape.cross_entropy_logits(out.logits, &batch.labels, Reduction::Mean)?;
            let loss_val = tape.value(loss).item()? as f64;
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_i,
                });
            }
            loss_sum += loss_val;
            batches += 1;
            tape.backward(loss)?;

            for (wi, wv) in out.weight_vars.iter().enumerate() {
                let d_eff = tape
                    .grad(*wv)
                    .expect("effective weights are gradient sinks during training");
                match update {
                    ParamUpdate::Scores => {
                        let g = net.weights()[wi].score_grad(d_eff);
                        let layer = &mut net.weights_mut()[wi];
                        opt.step(wi, layer.scores_mut(), &g, lr);
                        layer.rebinarize()?;
                    }
                    ParamUpdate::Theta => {
                        let g = net.weights()[wi].theta_grad(d_eff);
                        let layer = &mut net.weights_mut()[wi];
                        opt.step(wi, layer.theta_mut().data_mut(), &g, lr);
                    }
                }
            }
        }
        history.push(EpochStats {
            epoch,
            lr,
            mean_loss: if batches == 0 {
                0.0
            } else {
                loss_sum / batches as f64
            },
        });
    }
    Ok(history)
}

/// Searches a scratch ticket: learns mask scores over frozen random weights
/// against the inner adversary, and returns the final mask as a checkpoint
/// (no weight payload; theta is derivable from the init spec).
pub fn search_rst(
    spec: &NetworkSpec,
    init: InitSpec,
    data: &DataSplit,
    ratio: f64,
    pattern: SparsityPattern,
    attack_cfg: &AttackConfig,
    sched: &Schedule,
    prng: Prng,
) -> Result<SearchOutcome> {
    let mut net = Network::new(spec.clone(), init, ratio, pattern)?;
    let fingerprint = net.theta_fingerprint();
    let history = run_loop(
        &mut net,
        ParamUpdate::Scores,
        data,
        Some(attack_cfg),
        sched,
        &prng,
    )?;
    debug_assert_eq!(
        fingerprint,
        net.theta_fingerprint(),
        "search must never touch frozen weights"
    );
    let checkpoint = TicketCheckpoint::from_network(&net, Provenance::Rst, false);
    Ok(SearchOutcome {
        net,
        checkpoint,
        history,
    })
}

/// Standard SGD-momentum training of all weights (mask ratio 1.0), natural
/// or adversarial. The checkpoint carries the dense weight payload.
pub fn train_dense(
    spec: &NetworkSpec,
    init: InitSpec,
    data: &DataSplit,
    mode: TrainMode,
    attack_cfg: Option<&AttackConfig>,
    sched: &Schedule,
    prng: Prng,
) -> Result<SearchOutcome> {
    let attack = match (mode, attack_cfg) {
        (TrainMode::Natural, _) => None,
        (TrainMode::Adversarial, Some(cfg)) => Some(cfg),
        (TrainMode::Adversarial, None) => {
            return Err(Error::InvalidConfig(
                "adversarial training requires an attack config".into(),
            ))
        }
    };
    let mut net = Network::new(spec.clone(), init, 1.0, SparsityPattern::Element)?;
    let history = run_loop(&mut net, ParamUpdate::Theta, data, attack, sched, &prng)?;
    let provenance = match mode {
        TrainMode::Natural => Provenance::DenseNatural,
        TrainMode::Adversarial => Provenance::DenseAdversarial,
    };
    let checkpoint = TicketCheckpoint::from_network(&net, provenance, true);
    Ok(SearchOutcome {
        net,
        checkpoint,
        history,
    })
}

/// Searches a trained ticket: the same score loop with theta taken from a
/// dense-trained checkpoint. When the target task's class count differs,
/// `reinit_last` redraws the final linear layer from the loop's PRNG.
pub fn search_rtt(
    source: &TicketCheckpoint,
    data: &DataSplit,
    ratio: f64,
    pattern: SparsityPattern,
    attack_cfg: &AttackConfig,
    sched: &Schedule,
    prng: Prng,
    reinit_last: bool,
) -> Result<SearchOutcome> {
    let provenance = match source.provenance {
        Provenance::DenseNatural => Provenance::NaturalRtt,
        Provenance::DenseAdversarial => Provenance::AdversarialRtt,
        other => {
            return Err(Error::InvalidConfig(alloc::format!(
                "ticket search needs a dense-trained source, got {}",
                other.name()
            )))
        }
    };
    let Some(source_weights) = &source.weights else {
        return Err(Error::InvalidConfig(
            "ticket search needs a source checkpoint with dense weights".into(),
        ));
    };
    let source_spec = NetworkSpec::from_id(&source.net_id)?;
    let head_reinit = source_spec.classes != data.classes;
    let spec = if !head_reinit {
        source_spec
    } else if reinit_last {
        source_spec.with_classes(data.classes)
    } else {
        return Err(Error::ClassCountMismatch {
            have: source_spec.classes,
            need: data.classes,
        });
    };

    let mut net = Network::new(spec, source.init, ratio, pattern)?;
    if source_weights.len() != net.weights().len() {
        return Err(Error::BadCheckpoint {
            offset: 0,
            what: alloc::format!(
                "{} weight payloads for {} layers",
                source_weights.len(),
                net.weights().len()
            ),
        });
    }
    // Copy trained weights in. A reinitialized head keeps its fresh draw
    // from the init spec; every other layer's payload must fit exactly.
    let last = net.weights().len() - 1;
    for (i, data_vec) in source_weights.iter().enumerate() {
        if head_reinit && i == last {
            continue;
        }
        let shape = net.weights()[i].theta().shape().to_vec();
        if data_vec.len() != net.weights()[i].theta().numel() {
            return Err(Error::BadCheckpoint {
                offset: 0,
                what: alloc::format!("weight payload {i} does not fit {:?}", shape),
            });
        }
        let theta = crate::tensor::Tensor::new(&shape, data_vec.clone())?;
        net.weights_mut()[i].set_theta(theta)?;
    }
    let fingerprint = net.theta_fingerprint();
    let history = run_loop(
        &mut net,
        ParamUpdate::Scores,
        data,
        Some(attack_cfg),
        sched,
        &prng,
    )?;
    debug_assert_eq!(fingerprint, net.theta_fingerprint());
    let checkpoint = TicketCheckpoint::from_network(&net, provenance, true);
    Ok(SearchOutcome {
        net,
        checkpoint,
        history,
    })
}

/// Adversarially fine-tunes a ticket's surviving weights with the mask
/// frozen. `Inherit` starts from the ticket's theta; `Reinit` redraws theta
/// from a fresh seed drawn off this run's PRNG.
pub fn finetune_ticket(
    ticket: &TicketCheckpoint,
    mode: FinetuneMode,
    data: &DataSplit,
    attack_cfg: &AttackConfig,
    sched: &Schedule,
    prng: Prng,
) -> Result<SearchOutcome> {
    let mut net = ticket.instantiate()?;
    if matches!(mode, FinetuneMode::Reinit) {
        let mut seed_stream = prng.split2(STREAM_REINIT, 0);
        let fresh = InitSpec::new(ticket.init.method, seed_stream.next_u64());
        net.reset_theta(fresh)?;
    }
    let history = run_loop(
        &mut net,
        ParamUpdate::Theta,
        data,
        Some(attack_cfg),
        sched,
        &prng,
    )?;
    let provenance = match mode {
        FinetuneMode::Inherit => Provenance::FinetunedInherit,
        FinetuneMode::Reinit => Provenance::FinetunedReinit,
    };
    let checkpoint = TicketCheckpoint::from_network(&net, provenance, true);
    Ok(SearchOutcome {
        net,
        checkpoint,
        history,
    })
}
