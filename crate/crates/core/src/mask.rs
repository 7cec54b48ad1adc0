//! Score-driven top-k binary masks over frozen weights.
//!
//! Each maskable layer carries a frozen weight tensor and a learnable score
//! per mask group. The forward pass multiplies weights by the binarized
//! top-k mask; the backward pass treats binarization as identity
//! (straight-through), so every score receives gradient, including those
//! currently masked out.
//!
//! All four sparsity patterns reduce to contiguous runs of the row-major
//! weight buffer: element (run 1), row (run = last axis), kernel (run =
//! k*k), channel (run = everything under one output channel). Linear layers
//! degrade kernel/channel to row.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar;
use crate::tensor::Tensor;
use crate::Real;

/// Mask granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityPattern {
    Element,
    Row,
    Kernel,
    Channel,
}

impl SparsityPattern {
    pub fn name(self) -> &'static str {
        match self {
            SparsityPattern::Element => "element",
            SparsityPattern::Row => "row",
            SparsityPattern::Kernel => "kernel",
            SparsityPattern::Channel => "channel",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "element" => Some(SparsityPattern::Element),
            "row" => Some(SparsityPattern::Row),
            "kernel" => Some(SparsityPattern::Kernel),
            "channel" => Some(SparsityPattern::Channel),
            _ => None,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            SparsityPattern::Element => 0,
            SparsityPattern::Row => 1,
            SparsityPattern::Kernel => 2,
            SparsityPattern::Channel => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(SparsityPattern::Element),
            1 => Some(SparsityPattern::Row),
            2 => Some(SparsityPattern::Kernel),
            3 => Some(SparsityPattern::Channel),
            _ => None,
        }
    }

    /// Length of one contiguous mask group in a row-major weight buffer.
    ///
    /// Conv weights are `[co, ci, k, k]`; linear weights are `[out, in]`.
    /// For linear layers kernel and channel degrade to row.
    pub fn run_len(self, weight_shape: &[usize]) -> usize {
        match weight_shape.len() {
            4 => match self {
                SparsityPattern::Element => 1,
                SparsityPattern::Row => weight_shape[3],
                SparsityPattern::Kernel => weight_shape[2] * weight_shape[3],
                SparsityPattern::Channel => weight_shape[1] * weight_shape[2] * weight_shape[3],
            },
            _ => match self {
                SparsityPattern::Element => 1,
                _ => *weight_shape.last().expect("nonempty weight shape"),
            },
        }
    }
}

/// Fixed-length bitset; bit `g` lives at word `g / 64`, bit `g % 64`
/// (little-endian within and across words).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    words: Vec<u64>,
    len: usize,
}

impl BitMask {
    pub fn zeros(len: usize) -> Self {
        BitMask {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut m = BitMask::zeros(len);
        for g in 0..len {
            m.set(g, true);
        }
        m
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, g: usize) -> bool {
        (self.words[g / 64] >> (g % 64)) & 1 == 1
    }

    pub fn set(&mut self, g: usize, on: bool) {
        let (w, b) = (g / 64, g % 64);
        if on {
            self.words[w] |= 1 << b;
        } else {
            self.words[w] &= !(1 << b);
        }
    }

    pub fn popcount(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn from_words(words: Vec<u64>, len: usize) -> Result<Self> {
        if words.len() != len.div_ceil(64) {
            return Err(Error::InvalidConfig(format!(
                "bitset of {} words cannot hold {} bits",
                words.len(),
                len
            )));
        }
        // Bits past `len` must be zero so equality and popcount stay honest.
        if len % 64 != 0 {
            if let Some(&last) = words.last() {
                if last >> (len % 64) != 0 {
                    return Err(Error::InvalidConfig(
                        "bitset has bits set past its length".into(),
                    ));
                }
            }
        }
        Ok(BitMask { words, len })
    }
}

/// Number of kept groups: round(ratio * groups), floored at 1 so no layer is
/// ever fully severed.
pub fn kept_count(ratio: f64, groups: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidRatio { ratio });
    }
    let k = scalar::round_f64(ratio * groups as f64) as usize;
    Ok(k.clamp(1, groups))
}

/// Places exactly k ones at the k largest scores. Ties break toward the
/// lowest flat index.
pub fn binarize_topk(scores: &[Real], ratio: f64, pattern_groups: usize) -> Result<BitMask> {
    debug_assert_eq!(scores.len(), pattern_groups);
    let k = kept_count(ratio, pattern_groups)?;
    let mut order: Vec<u32> = (0..pattern_groups as u32).collect();
    order.sort_unstable_by(|&a, &b| {
        match scores[b as usize].partial_cmp(&scores[a as usize]) {
            Some(core::cmp::Ordering::Equal) | None => a.cmp(&b),
            Some(o) => o,
        }
    });
    let mut mask = BitMask::zeros(pattern_groups);
    for &g in order.iter().take(k) {
        mask.set(g as usize, true);
    }
    Ok(mask)
}

/// Frozen weights plus learnable scores and the cached binary mask.
#[derive(Debug, Clone)]
pub struct MaskedParameter {
    theta: Tensor,
    scores: Vec<Real>,
    pattern: SparsityPattern,
    ratio: f64,
    mask: BitMask,
    run: usize,
}

impl MaskedParameter {
    pub fn new(theta: Tensor, scores: Vec<Real>, pattern: SparsityPattern, ratio: f64) -> Result<Self> {
        let run = pattern.run_len(theta.shape());
        let groups = theta.numel() / run;
        if groups * run != theta.numel() || scores.len() != groups {
            return Err(Error::ShapeMismatch {
                op: "masked_parameter",
                detail: format!(
                    "{} scores for {} groups of run {} over {:?}",
                    scores.len(),
                    groups,
                    run,
                    theta.shape()
                ),
            });
        }
        let mask = binarize_topk(&scores, ratio, groups)?;
        Ok(MaskedParameter {
            theta,
            scores,
            pattern,
            ratio,
            mask,
            run,
        })
    }

    pub fn theta(&self) -> &Tensor {
        &self.theta
    }

    /// Replaces the frozen weights (fine-tuning, checkpoint restore).
    /// Shape must not change.
    pub fn set_theta(&mut self, theta: Tensor) -> Result<()> {
        if theta.shape() != self.theta.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_theta",
                detail: format!("{:?} -> {:?}", self.theta.shape(), theta.shape()),
            });
        }
        self.theta = theta;
        Ok(())
    }

    pub fn scores(&self) -> &[Real] {
        &self.scores
    }

    pub fn scores_mut(&mut self) -> &mut [Real] {
        &mut self.scores
    }

    pub fn pattern(&self) -> SparsityPattern {
        self.pattern
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn mask(&self) -> &BitMask {
        &self.mask
    }

    pub fn group_count(&self) -> usize {
        self.scores.len()
    }

    pub fn kept(&self) -> usize {
        self.mask.popcount()
    }

    /// Overrides the cached mask (checkpoint restore / random-mask baselines).
    pub fn set_mask(&mut self, mask: BitMask) -> Result<()> {
        if mask.len() != self.group_count() {
            return Err(Error::InvalidConfig(format!(
                "mask of {} groups for a layer with {}",
                mask.len(),
                self.group_count()
            )));
        }
        self.mask = mask;
        Ok(())
    }

    /// Recomputes the mask from current scores.
    pub fn rebinarize(&mut self) -> Result<()> {
        self.mask = binarize_topk(&self.scores, self.ratio, self.scores.len())?;
        Ok(())
    }

    /// Effective weights: group bit broadcast over its run, times theta.
    pub fn effective_weights(&self) -> Tensor {
        let mut data = vec![0.0; self.theta.numel()];
        for g in 0..self.group_count() {
            if self.mask.get(g) {
                let lo = g * self.run;
                data[lo..lo + self.run].copy_from_slice(&self.theta.data()[lo..lo + self.run]);
            }
        }
        Tensor::new(self.theta.shape(), data).expect("same shape as theta")
    }

    /// Straight-through score gradient: upstream effective-weight gradient
    /// times theta, summed over each group's run. Theta receives nothing.
    pub fn score_grad(&self, d_effective: &[Real]) -> Vec<Real> {
        debug_assert_eq!(d_effective.len(), self.theta.numel());
        let th = self.theta.data();
        let mut out = vec![0.0; self.group_count()];
        for g in 0..self.group_count() {
            let lo = g * self.run;
            let mut acc = 0.0;
            for i in lo..lo + self.run {
                acc += d_effective[i] * th[i];
            }
            out[g] = acc;
        }
        out
    }

    /// Masked theta gradient for fine-tuning: upstream gradient gated by the
    /// mask so severed weights never move.
    pub fn theta_grad(&self, d_effective: &[Real]) -> Vec<Real> {
        let mut out = vec![0.0; self.theta.numel()];
        for g in 0..self.group_count() {
            if self.mask.get(g) {
                let lo = g * self.run;
                out[lo..lo + self.run].copy_from_slice(&d_effective[lo..lo + self.run]);
            }
        }
        out
    }

    /// Applies an SGD step directly to theta (dense training path).
    pub(crate) fn theta_mut(&mut self) -> &mut Tensor {
        &mut self.theta
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_picks_largest() {
        let m = binarize_topk(&[0.5, -2.0, 3.0, 1.0], 0.5, 4).unwrap();
        assert!(!m.get(0) && !m.get(1) && m.get(2) && m.get(3));
        assert_eq!(m.popcount(), 2);
    }

    #[test]
    fn ratio_one_keeps_everything() {
        let m = binarize_topk(&[0.1, 0.2, 0.3], 1.0, 3).unwrap();
        assert_eq!(m.popcount(), 3);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let m = binarize_topk(&[1.0, 1.0, 1.0, 1.0], 0.5, 4).unwrap();
        assert!(m.get(0) && m.get(1) && !m.get(2) && !m.get(3));
    }

    #[test]
    fn invalid_ratio_rejected() {
        assert!(matches!(
            binarize_topk(&[1.0], 0.0, 1),
            Err(Error::InvalidRatio { .. })
        ));
        assert!(matches!(
            binarize_topk(&[1.0], 1.5, 1),
            Err(Error::InvalidRatio { .. })
        ));
    }

    #[test]
    fn k_floors_at_one() {
        assert_eq!(kept_count(0.01, 10).unwrap(), 1);
        assert_eq!(kept_count(1.0, 10).unwrap(), 10);
        assert_eq!(kept_count(0.25, 10).unwrap(), 3); // round(2.5) away from zero
    }

    #[test]
    fn rebinarize_is_deterministic() {
        let scores = vec![0.3, 0.3, -0.1, 0.9, 0.3];
        let a = binarize_topk(&scores, 0.6, 5).unwrap();
        let b = binarize_topk(&scores, 0.6, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn run_lengths_per_pattern() {
        let conv = [4usize, 3, 5, 5];
        assert_eq!(SparsityPattern::Element.run_len(&conv), 1);
        assert_eq!(SparsityPattern::Row.run_len(&conv), 5);
        assert_eq!(SparsityPattern::Kernel.run_len(&conv), 25);
        assert_eq!(SparsityPattern::Channel.run_len(&conv), 75);
        let lin = [7usize, 13];
        assert_eq!(SparsityPattern::Element.run_len(&lin), 1);
        assert_eq!(SparsityPattern::Row.run_len(&lin), 13);
        assert_eq!(SparsityPattern::Kernel.run_len(&lin), 13);
        assert_eq!(SparsityPattern::Channel.run_len(&lin), 13);
    }

    #[test]
    fn straight_through_score_grad() {
        // Upstream grad [1, 2] against theta [0.5, -0.5] gives [0.5, -1.0];
        // both scores receive gradient even though k = 1 masks one out.
        let theta = Tensor::new(&[1, 2], vec![0.5, -0.5]).unwrap();
        let p = MaskedParameter::new(theta, vec![1.0, 0.0], SparsityPattern::Element, 0.5).unwrap();
        assert_eq!(p.kept(), 1);
        let g = p.score_grad(&[1.0, 2.0]);
        assert_eq!(g, vec![0.5, -1.0]);
        assert!(g.iter().all(|&v| v != 0.0));
    }

    #[test]
    fn row_pattern_sums_over_groups() {
        // Two rows of a [2,2] weight; per-row grads sum g*theta over the row.
        let theta = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = MaskedParameter::new(theta, vec![1.0, 0.0], SparsityPattern::Row, 0.5).unwrap();
        let g = p.score_grad(&[0.1, 0.05, -0.1, 0.05]);
        assert!((g[0] - 0.2).abs() < 1e-12);
        assert!((g[1] - (-0.1)).abs() < 1e-12);
    }

    #[test]
    fn effective_weights_zero_masked_groups() {
        let theta = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = MaskedParameter::new(theta, vec![0.0, 1.0], SparsityPattern::Row, 0.5).unwrap();
        assert_eq!(p.effective_weights().data(), &[0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn from_words_validates_tail_bits() {
        assert!(BitMask::from_words(vec![0b111], 2).is_err());
        let m = BitMask::from_words(vec![0b011], 2).unwrap();
        assert_eq!(m.popcount(), 2);
    }
}
