//! Evaluation over the time-dilation grid, and the effective-decay probe.
//!
//! The grid metric is the variance-normalized relative error
//! `sqrt(MSE / Var(y)) * 100%`: raw MSE shrinks with the glow scale at
//! small dilations, so normalizing by the target variance makes scores
//! comparable across the grid. Each grid point draws 6x64 = 384 fresh
//! evaluation sequences and estimates the variance from 10x128 = 1280
//! further samples at the same dilation.

use crate::error::{Error, Result};
use crate::flash::generator::{compute_target, generate_sequence, FlashSequence, FLASH_LEN, ZONE_RATES};
use crate::rng::substream_indexed;

pub const EVAL_DELTA_GRID: [f64; 10] = [0.1, 0.2, 0.3, 0.5, 0.8, 1.0, 1.2, 1.5, 1.8, 2.0];
pub const EVAL_BATCHES: usize = 6;
pub const EVAL_BATCH_SIZE: usize = 64;
pub const VAR_BATCHES: usize = 10;
pub const VAR_BATCH_SIZE: usize = 128;
/// Probe predictions at or below this floor are treated as numerically
/// glowless and excluded from the log-linear fit.
pub const PROBE_FLOOR: f64 = 1e-8;

/// Anything that maps flash sequences to per-position glow predictions.
pub trait GlowPredictor: Sync {
    fn predict(&self, seqs: &[FlashSequence]) -> Result<Vec<Vec<f64>>>;
}

impl<F> GlowPredictor for F
where
    F: Fn(&[FlashSequence]) -> Result<Vec<Vec<f64>>> + Sync,
{
    fn predict(&self, seqs: &[FlashSequence]) -> Result<Vec<Vec<f64>>> {
        self(seqs)
    }
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub delta: f64,
    pub mse: f64,
    pub variance: f64,
    pub rel_error_pct: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mean_rel_error(&self) -> f64 {
        self.rows.iter().map(|r| r.rel_error_pct).sum::<f64>() / self.rows.len() as f64
    }

    pub fn rel_error_at(&self, delta: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| (r.delta - delta).abs() < 1e-12)
            .map(|r| r.rel_error_pct)
    }
}

/// Evaluate a predictor on one dilation value with fresh sequences.
pub fn evaluate_at(
    predictor: &dyn GlowPredictor,
    delta: f64,
    eval_seed: u64,
    grid_index: u64,
) -> Result<EvalRow> {
    let mut rng = substream_indexed(eval_seed, "flash-eval", grid_index);
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for _ in 0..EVAL_BATCHES {
        let seqs: Vec<FlashSequence> = (0..EVAL_BATCH_SIZE)
            .map(|_| generate_sequence(&mut rng, delta))
            .collect::<Result<_>>()?;
        let preds = predictor.predict(&seqs)?;
        for (seq, pred) in seqs.iter().zip(&preds) {
            for (t, p) in seq.target.iter().zip(pred) {
                sq_sum += (t - p) * (t - p);
                count += 1;
            }
        }
    }
    let mse = sq_sum / count as f64;

    let mut var_rng = substream_indexed(eval_seed, "flash-variance", grid_index);
    let mut values = Vec::with_capacity(VAR_BATCHES * VAR_BATCH_SIZE * FLASH_LEN);
    for _ in 0..VAR_BATCHES {
        for _ in 0..VAR_BATCH_SIZE {
            let seq = generate_sequence(&mut var_rng, delta)?;
            values.extend_from_slice(&seq.target);
        }
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    if variance <= 0.0 {
        return Err(Error::domain(format!("target variance {variance} at dilation {delta}")));
    }
    Ok(EvalRow { delta, mse, variance, rel_error_pct: (mse / variance).sqrt() * 100.0 })
}

/// Evaluate a predictor across the whole dilation grid.
pub fn evaluate_grid(predictor: &dyn GlowPredictor, eval_seed: u64) -> Result<EvalReport> {
    let rows = EVAL_DELTA_GRID
        .iter()
        .enumerate()
        .map(|(i, d)| evaluate_at(predictor, *d, eval_seed, i as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { rows })
}

/// The probe input: one zone at the requested rate index, a single flash at
/// position 5.
pub fn probe_sequence(rate_index: usize, delta: f64) -> FlashSequence {
    let mut flashes = vec![0u8; FLASH_LEN];
    flashes[5] = 1;
    let zones = vec![rate_index as u8; FLASH_LEN];
    let target = compute_target(&flashes, &zones, &ZONE_RATES, delta);
    FlashSequence { flashes, zones, zone_rates: ZONE_RATES, delta, target }
}

/// Estimated continuous-time decay rate of a predictor's response to the
/// probe: a log-linear least-squares fit over the post-flash tail
/// (positions 7..=39), ignoring positions at or below the numeric floor,
/// with the per-position slope converted back through the dilation.
pub fn effective_decay_probe(
    predictor: &dyn GlowPredictor,
    rate_index: usize,
    delta: f64,
) -> Result<f64> {
    if rate_index >= ZONE_RATES.len() {
        return Err(Error::domain(format!("rate index {rate_index} out of range")));
    }
    let seq = probe_sequence(rate_index, delta);
    let pred = predictor.predict(std::slice::from_ref(&seq))?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for k in 7..FLASH_LEN {
        let v = pred[0][k].max(PROBE_FLOOR);
        if v > PROBE_FLOOR {
            xs.push(k as f64);
            ys.push(v.ln());
        }
    }
    if xs.len() < 2 {
        return Err(Error::domain(format!(
            "no decay observable: probe tail at rate index {rate_index}, dilation {delta} sits at the floor"
        )));
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    let slope = sxy / sxx;
    Ok(-slope / delta)
}

/// The generator itself as a predictor: the ground-truth oracle.
pub struct TargetOracle;

impl GlowPredictor for TargetOracle {
    fn predict(&self, seqs: &[FlashSequence]) -> Result<Vec<Vec<f64>>> {
        Ok(seqs.iter().map(|s| s.target.clone()).collect())
    }
}
