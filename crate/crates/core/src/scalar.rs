//! Transcendental functions routed through `libm` so the crate stays
//! `no_std` and produces bit-identical values on every platform.

use crate::Real;

#[cfg(not(feature = "single-precision"))]
mod imp {
    pub fn exp(x: f64) -> f64 {
        libm::exp(x)
    }
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }
    pub fn sqrt(x: f64) -> f64 {
        libm::sqrt(x)
    }
    pub fn cos(x: f64) -> f64 {
        libm::cos(x)
    }
}

#[cfg(feature = "single-precision")]
mod imp {
    pub fn exp(x: f32) -> f32 {
        libm::expf(x)
    }
    pub fn ln(x: f32) -> f32 {
        libm::logf(x)
    }
    pub fn sqrt(x: f32) -> f32 {
        libm::sqrtf(x)
    }
    pub fn cos(x: f32) -> f32 {
        libm::cosf(x)
    }
}

pub(crate) fn exp(x: Real) -> Real {
    imp::exp(x)
}

pub(crate) fn ln(x: Real) -> Real {
    imp::ln(x)
}

pub(crate) fn sqrt(x: Real) -> Real {
    imp::sqrt(x)
}

pub(crate) fn cos(x: Real) -> Real {
    imp::cos(x)
}

/// Rounds half away from zero, like `f64::round`.
pub(crate) fn round_f64(x: f64) -> f64 {
    libm::round(x)
}

pub(crate) const TAU: Real = core::f64::consts::TAU as Real;

/// sign with sign(0) = 0; perturbations are never injected where the
/// gradient carries no information.
pub(crate) fn sign(x: Real) -> Real {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
