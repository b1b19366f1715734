//! Continuous-time diagonal spectra: initialization, reparameterization of
//! the decay rates, and eigenvalue clipping.
//!
//! Decay rates are learned through an unconstrained pre-image `theta`; the
//! reparameterization maps it to a strictly negative real part (except
//! `standard`, which learns the rate directly). Each mode also carries a
//! log-space timescale `log_step`, a per-mode scaler on the physical
//! timestep.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reparam {
    /// Identity: the decay rate is learned directly (may leave the stable
    /// half-plane unless clipping is on).
    Standard,
    /// -1 / (theta^2 + 1/2)
    Stable,
    /// -exp(theta)
    Exp,
    /// -softplus(theta)
    Softplus,
}

impl Reparam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Reparam::Standard),
            "stable" => Ok(Reparam::Stable),
            "exp" => Ok(Reparam::Exp),
            "softplus" => Ok(Reparam::Softplus),
            other => Err(Error::config(format!("unknown reparameterization `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Reparam::Standard => "standard",
            Reparam::Stable => "stable",
            Reparam::Exp => "exp",
            Reparam::Softplus => "softplus",
        }
    }

    /// Map an unconstrained theta to the decay rate Re(lambda).
    pub fn apply(&self, theta: f64) -> f64 {
        match self {
            Reparam::Standard => theta,
            Reparam::Stable => -1.0 / (theta * theta + 0.5),
            Reparam::Exp => -theta.exp(),
            Reparam::Softplus => -(theta.max(0.0) + (-theta.abs()).exp().ln_1p()),
        }
    }

    /// A theta whose reparameterized value equals `target` (< 0).
    pub fn preimage(&self, target: f64) -> f64 {
        debug_assert!(target < 0.0);
        match self {
            Reparam::Standard => target,
            Reparam::Stable => (-1.0 / target - 0.5).sqrt(),
            Reparam::Exp => (-target).ln(),
            Reparam::Softplus => ((-target).exp() - 1.0).ln(),
        }
    }

    /// Tape version of `apply`, elementwise over a theta tensor.
    pub fn apply_on_tape(&self, tape: &mut Tape, theta: NodeId) -> NodeId {
        match self {
            Reparam::Standard => theta,
            Reparam::Stable => {
                let sq = tape.square(theta);
                let den = tape.add_scalar(sq, 0.5);
                let inv = tape.reciprocal(den);
                tape.negate(inv)
            }
            Reparam::Exp => {
                let e = tape.exp(theta);
                tape.negate(e)
            }
            Reparam::Softplus => {
                let sp = tape.softplus(theta);
                tape.negate(sp)
            }
        }
    }
}

/// Clipping floor for decay rates: eigenvalues are kept at or below this
/// strictly negative value so the recurrence cannot drift unstable.
pub const EIG_CLIP_FLOOR: f64 = -1e-5;

/// Elementwise `min(re, floor)`.
pub fn clip_eigenvalues(re: &[f64], floor: f64) -> Result<Vec<f64>> {
    if floor >= 0.0 {
        return Err(Error::domain(format!("clip floor must be negative, got {floor}")));
    }
    Ok(re.iter().map(|v| v.min(floor)).collect())
}

/// The continuous-time eigenvalue bank: unconstrained decay pre-images,
/// static oscillation frequencies, and per-mode log-timescales.
#[derive(Clone, Debug)]
pub struct DiagonalSpectrum {
    pub theta: Vec<f64>,
    pub lambda_im: Vec<f64>,
    pub log_step: Vec<f64>,
    pub reparam: Reparam,
    pub clip_eigs: bool,
}

impl DiagonalSpectrum {
    /// Reparameterized (and optionally clipped) decay rates.
    pub fn re_lambda(&self) -> Vec<f64> {
        let re: Vec<f64> = self.theta.iter().map(|t| self.reparam.apply(*t)).collect();
        if self.clip_eigs {
            clip_eigenvalues(&re, EIG_CLIP_FLOOR).expect("fixed negative floor")
        } else {
            re
        }
    }

    pub fn modes(&self) -> usize {
        self.theta.len()
    }
}

/// Diagonal long-memory initialization: decay pre-images chosen so every
/// reparameterized rate is -1/2, oscillation frequencies pi*p within each
/// group, and timescales drawn log-uniformly so exp(log_step) lies in
/// [0.001, 0.1].
pub fn hippo_init(modes: usize, reparam: Reparam, clip_eigs: bool, rng: &mut impl Rng) -> Result<DiagonalSpectrum> {
    hippo_init_grouped(1, modes, reparam, clip_eigs, rng)
}

/// Grouped variant: `groups` independent banks of `group_modes` modes each,
/// each group carrying its own frequency ladder.
pub fn hippo_init_grouped(
    groups: usize,
    group_modes: usize,
    reparam: Reparam,
    clip_eigs: bool,
    rng: &mut impl Rng,
) -> Result<DiagonalSpectrum> {
    let modes = groups * group_modes;
    if modes == 0 {
        return Err(Error::domain("spectrum needs at least one mode"));
    }
    let theta0 = reparam.preimage(-0.5);
    let theta = vec![theta0; modes];
    let mut lambda_im = Vec::with_capacity(modes);
    for _ in 0..groups {
        for p in 0..group_modes {
            lambda_im.push(std::f64::consts::PI * p as f64);
        }
    }
    let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
    let log_step = (0..modes).map(|_| rng.gen_range(lo..hi)).collect();
    Ok(DiagonalSpectrum { theta, lambda_im, log_step, reparam, clip_eigs })
}
