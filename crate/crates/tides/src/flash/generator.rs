//! The Fading Flash diagnostic data: a row of 40 detectors split into 2 or
//! 3 contiguous rate zones; sparse flashes excite a glow that decays at the
//! local zone's rate, under a global time dilation.
//!
//! The glow follows the exact zero-order-hold discretization of the
//! first-order system `h' = -lambda_k h + p`, sampled at interval `delta`:
//!
//! ```text
//!   h_k = alpha_k h_{k-1} + beta_k p_k,   alpha_k = exp(-lambda_k delta),
//!   beta_k = (1 - alpha_k) / lambda_k,    y_k = h_k.
//! ```

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;

pub const FLASH_LEN: usize = 40;
/// Slow / medium / fast zone decay rates, indexed by the zone value.
pub const ZONE_RATES: [f64; 3] = [1.0, 1.5, 2.0];
/// Zone boundaries are drawn from this range so every zone spans >= 4.
const BOUNDARY_LO: usize = 4;
const BOUNDARY_HI: usize = 35; // inclusive
const MIN_SPAN: usize = 4;
const LAYOUT_RETRIES: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct FlashSequence {
    /// Binary flash indicators, length 40.
    pub flashes: Vec<u8>,
    /// Zone (rate index) per position, values in {0, 1, 2}.
    pub zones: Vec<u8>,
    /// The rate table the zone values index into.
    pub zone_rates: [f64; 3],
    /// Global time dilation.
    pub delta: f64,
    /// Closed-form target glow.
    pub target: Vec<f64>,
}

impl FlashSequence {
    /// Model input at each position: flash indicator followed by the
    /// one-hot zone encoding (4 channels).
    pub fn input_rows(&self) -> Vec<Vec<f64>> {
        self.flashes
            .iter()
            .zip(&self.zones)
            .map(|(p, z)| {
                let mut row = vec![f64::from(*p), 0.0, 0.0, 0.0];
                row[1 + *z as usize] = 1.0;
                row
            })
            .collect()
    }

    pub fn rate_at(&self, k: usize) -> f64 {
        self.zone_rates[self.zones[k] as usize]
    }
}

/// Closed-form target for a sequence's flashes, zones, and dilation.
pub fn compute_target(flashes: &[u8], zones: &[u8], zone_rates: &[f64; 3], delta: f64) -> Vec<f64> {
    let mut h = 0.0;
    let mut target = Vec::with_capacity(flashes.len());
    for (p, z) in flashes.iter().zip(zones) {
        let rate = zone_rates[*z as usize];
        let alpha = (-rate * delta).exp();
        let beta = (1.0 - alpha) / rate;
        h = alpha * h + beta * f64::from(*p);
        target.push(h);
    }
    target
}

/// Draw one sequence: 2 or 3 contiguous zones with distinct adjacent rates
/// (layouts violating the minimum span are rejected and redrawn), 2 to 4
/// flash positions without replacement, and the closed-form target.
pub fn generate_sequence(rng: &mut impl Rng, delta: f64) -> Result<FlashSequence> {
    if delta <= 0.0 {
        return Err(Error::domain(format!("time dilation must be positive, got {delta}")));
    }
    let n_zones = if rng.gen_range(0..2) == 0 { 2 } else { 3 };
    let boundaries = 'layout: {
        for _ in 0..LAYOUT_RETRIES {
            let mut bs: Vec<usize> = rand::seq::index::sample(
                rng,
                BOUNDARY_HI - BOUNDARY_LO + 1,
                n_zones - 1,
            )
            .iter()
            .map(|i| i + BOUNDARY_LO)
            .collect();
            bs.sort_unstable();
            let mut spans = Vec::with_capacity(n_zones);
            let mut prev = 0;
            for b in &bs {
                spans.push(b - prev);
                prev = *b;
            }
            spans.push(FLASH_LEN - prev);
            if spans.iter().all(|s| *s >= MIN_SPAN) {
                break 'layout bs;
            }
        }
        return Err(Error::domain("no valid zone layout after 1000 retries".to_string()));
    };

    // rate indices, adjacent segments always distinct
    let mut segment_rates: Vec<u8> = Vec::with_capacity(n_zones);
    for i in 0..n_zones {
        let choices: Vec<u8> = (0u8..3)
            .filter(|c| i == 0 || *c != segment_rates[i - 1])
            .collect();
        segment_rates.push(*choices.choose(rng).expect("nonempty choices"));
    }
    let mut zones = vec![0u8; FLASH_LEN];
    let mut seg = 0;
    for (k, z) in zones.iter_mut().enumerate() {
        if seg < boundaries.len() && k >= boundaries[seg] {
            seg += 1;
        }
        *z = segment_rates[seg];
    }

    let n_flashes = rng.gen_range(2..=4usize);
    let mut flashes = vec![0u8; FLASH_LEN];
    for i in rand::seq::index::sample(rng, FLASH_LEN, n_flashes).iter() {
        flashes[i] = 1;
    }

    let target = compute_target(&flashes, &zones, &ZONE_RATES, delta);
    Ok(FlashSequence { flashes, zones, zone_rates: ZONE_RATES, delta, target })
}

/// Number of contiguous zone segments in a sequence.
pub fn segment_count(zones: &[u8]) -> usize {
    1 + zones.windows(2).filter(|w| w[0] != w[1]).count()
}
