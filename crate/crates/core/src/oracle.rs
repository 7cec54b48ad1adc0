//! Brute-force oracles for the search loops: exhaustive mask enumeration
//! and matched-attack robust loss. Test-only (gated with `gradcheck`); the
//! search implementation never calls into this module.

use alloc::vec::Vec;

use crate::attack::{perturb, AttackConfig};
use crate::data::DataSplit;
use crate::error::{Error, Result};
use crate::mask::BitMask;
use crate::network::Network;
use crate::prng::Prng;
use crate::tape::{Reduction, Tape};

/// Mean cross-entropy on matched adversarial examples (the attack is
/// generated against `net` itself), evaluation-mode statistics.
pub fn robust_loss(net: &Network, split: &DataSplit, cfg: &AttackConfig, seed: u64) -> Result<f64> {
    let root = Prng::new(seed);
    let keys: Vec<u64> = (0..split.len() as u64).collect();
    let adv = perturb(net, &split.images, &split.labels, cfg, &root, &keys)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(adv);
    let out = net.forward(&mut tape, xv, false, false)?;
    let loss = tape.cross_entropy_logits(out.logits, &split.labels, Reduction::Mean)?;
    Ok(tape.value(loss).item()? as f64)
}

/// Visits every k-of-n mask in lexicographic order.
pub fn for_each_mask(groups: usize, k: usize, mut visit: impl FnMut(&BitMask)) {
    assert!(k >= 1 && k <= groups);
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        let mut mask = BitMask::zeros(groups);
        for &i in &idx {
            mask.set(i, true);
        }
        visit(&mask);
        // Advance the combination.
        let mut pos = k;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            if idx[pos] != pos + groups - k {
                break;
            }
            if pos == 0 {
                return;
            }
        }
        idx[pos] += 1;
        for i in pos + 1..k {
            idx[i] = idx[i - 1] + 1;
        }
    }
}

/// Exhaustively evaluates all C(n, k) masks of a single-maskable-layer
/// network and returns the best mask with its robust loss.
pub fn best_mask_exhaustive(
    net: &mut Network,
    split: &DataSplit,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<(BitMask, f64)> {
    if net.weights().len() != 1 {
        return Err(Error::InvalidConfig(
            "exhaustive oracle handles single-maskable-layer networks".into(),
        ));
    }
    let groups = net.weights()[0].group_count();
    let k = net.weights()[0].kept();
    let mut best: Option<(BitMask, f64)> = None;
    let mut masks = Vec::new();
    for_each_mask(groups, k, |m| masks.push(m.clone()));
    for mask in masks {
        net.weights_mut()[0].set_mask(mask.clone())?;
        let loss = robust_loss(net, split, cfg, seed)?;
        let better = match &best {
            None => true,
            Some((_, cur)) => loss < *cur,
        };
        if better {
            best = Some((mask, loss));
        }
    }
    Ok(best.expect("at least one mask"))
}
