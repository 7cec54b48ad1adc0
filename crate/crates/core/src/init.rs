//! The four weight initializers for frozen random networks.
//!
//! Weights are drawn per layer from split PRNG streams, so the values of one
//! layer never depend on how many draws another layer consumed. The same
//! `InitSpec` therefore always reproduces bit-identical weights, which is
//! what lets ticket checkpoints omit the dense weight payload entirely.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::prng::Prng;
use crate::scalar;
use crate::Real;

/// Initialization method for a frozen random network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMethod {
    /// Every weight has magnitude sqrt(2/fan_in) and an i.i.d. random sign.
    SignedKaimingConstant,
    /// N(0, 2/fan_in).
    KaimingNormal,
    /// U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
    KaimingUniform,
    /// N(0, 2/(fan_in + fan_out)).
    XavierNormal,
}

impl InitMethod {
    pub fn name(self) -> &'static str {
        match self {
            InitMethod::SignedKaimingConstant => "signed_kaiming_constant",
            InitMethod::KaimingNormal => "kaiming_normal",
            InitMethod::KaimingUniform => "kaiming_uniform",
            InitMethod::XavierNormal => "xavier_normal",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "signed_kaiming_constant" => Some(InitMethod::SignedKaimingConstant),
            "kaiming_normal" => Some(InitMethod::KaimingNormal),
            "kaiming_uniform" => Some(InitMethod::KaimingUniform),
            "xavier_normal" => Some(InitMethod::XavierNormal),
            _ => None,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            InitMethod::SignedKaimingConstant => 0,
            InitMethod::KaimingNormal => 1,
            InitMethod::KaimingUniform => 2,
            InitMethod::XavierNormal => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(InitMethod::SignedKaimingConstant),
            1 => Some(InitMethod::KaimingNormal),
            2 => Some(InitMethod::KaimingUniform),
            3 => Some(InitMethod::XavierNormal),
            _ => None,
        }
    }
}

/// Method plus seed; together they pin every weight bit of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitSpec {
    pub method: InitMethod,
    pub seed: u64,
}

impl InitSpec {
    pub fn new(method: InitMethod, seed: u64) -> Self {
        InitSpec { method, seed }
    }
}

/// Draws `numel` weights for one layer.
pub fn draw_weights(
    method: InitMethod,
    prng: &mut Prng,
    numel: usize,
    fan_in: usize,
    fan_out: usize,
    layer: usize,
) -> Result<Vec<Real>> {
    if fan_in == 0 {
        return Err(Error::ZeroFanIn { layer });
    }
    let fi = fan_in as Real;
    Ok(match method {
        InitMethod::SignedKaimingConstant => {
            let mag = scalar::sqrt(2.0 / fi);
            (0..numel)
                .map(|_| {
                    if prng.next_real() < 0.5 {
                        -mag
                    } else {
                        mag
                    }
                })
                .collect()
        }
        InitMethod::KaimingNormal => {
            let std = scalar::sqrt(2.0 / fi);
            prng.vec_normal(numel, std)
        }
        InitMethod::KaimingUniform => {
            let bound = scalar::sqrt(6.0 / fi);
            prng.vec_uniform(numel, -bound, bound)
        }
        InitMethod::XavierNormal => {
            let std = scalar::sqrt(2.0 / (fi + fan_out as Real));
            prng.vec_normal(numel, std)
        }
    })
}

/// Score initialization for mask search: Kaiming-uniform over the score
/// buffer, drawn from its own split stream.
pub fn draw_scores(prng: &mut Prng, numel: usize, fan_in: usize, layer: usize) -> Result<Vec<Real>> {
    if fan_in == 0 {
        return Err(Error::ZeroFanIn { layer });
    }
    let bound = scalar::sqrt(6.0 / fan_in as Real);
    Ok(prng.vec_uniform(numel, -bound, bound))
}
