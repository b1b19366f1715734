//! Affine-free BatchNorm over the joint batch-time dimension, per channel.
//!
//! No learnable scale or shift: the recurrence and the gated feed-forward
//! supply all learned scaling, and a static per-channel affine would fight
//! the long-memory bias initialization. Training normalizes by batch
//! statistics (and folds them into exponential running estimates);
//! evaluation normalizes by the running estimates.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Exponential update weight for the running estimates.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// Normalize `x` of shape `[rows, channels]` (rows = batch x time).
/// `train` selects batch statistics (differentiated through, running stats
/// updated) versus frozen running statistics.
pub fn batchnorm_no_affine(
    graph: &mut Graph,
    x: NodeId,
    stats: &mut RunningStats,
    train: bool,
) -> Result<NodeId> {
    let shape = graph.tape.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("batchnorm", format!("expected [rows, channels], got {shape:?}")));
    }
    let (rows, channels) = (shape[0], shape[1]);
    if channels != stats.mean.len() {
        return Err(Error::shape(
            "batchnorm",
            format!("{channels} channels vs {} running slots", stats.mean.len()),
        ));
    }
    if train && rows < 2 {
        return Err(Error::domain(
            "batchnorm needs at least two batch-time rows for a variance".to_string(),
        ));
    }
    let t = &mut graph.tape;
    if train {
        let mu = t.col_mean(x)?;
        let mu_rows = t.repeat_rows(mu, rows)?;
        let centered = t.sub(x, mu_rows)?;
        let sq = t.square(centered);
        let var = t.col_mean(sq)?;
        stats.update(t.value(mu).data(), t.value(var).data());
        let shifted = t.add_scalar(var, BN_EPS);
        let denom = t.sqrt(shifted);
        let inv = t.reciprocal(denom);
        let inv_rows = t.repeat_rows(inv, rows)?;
        t.mul(centered, inv_rows)
    } else {
        let mu = t.leaf(Tensor::vector(&stats.mean));
        let inv_vals: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let inv = t.leaf(Tensor::vector(&inv_vals));
        let mu_rows = t.repeat_rows(mu, rows)?;
        let inv_rows = t.repeat_rows(inv, rows)?;
        let centered = t.sub(x, mu_rows)?;
        t.mul(centered, inv_rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::rng::substream;

    fn run_train(x: Tensor, stats: &mut RunningStats) -> Vec<f64> {
        let store = ParamStore::new();
        let mut graph = Graph::new(&store);
        let xn = graph.constant(x);
        let out = batchnorm_no_affine(&mut graph, xn, stats, true).unwrap();
        graph.tape.value(out).data().to_vec()
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let mut stats = RunningStats::new(2);
        let x = Tensor::from_vec(vec![4, 2], vec![3.0, 1.0, 3.0, 2.0, 3.0, 3.0, 3.0, 4.0]).unwrap();
        let out = run_train(x, &mut stats);
        for row in 0..4 {
            assert!(out[row * 2].abs() < 1e-12, "constant channel stays zero");
        }
    }

    #[test]
    fn output_has_zero_mean_and_unit_variance_per_channel() {
        let mut rng = substream(3, "bn");
        let mut stats = RunningStats::new(5);
        let x = Tensor::randn(&mut rng, &[64, 5], 2.3);
        let out = run_train(x, &mut stats);
        for c in 0..5 {
            let col: Vec<f64> = (0..64).map(|r| out[r * 5 + c]).collect();
            let mean = col.iter().sum::<f64>() / 64.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn single_row_batch_is_rejected_in_training() {
        let mut stats = RunningStats::new(3);
        let store = ParamStore::new();
        let mut graph = Graph::new(&store);
        let x = graph.constant(Tensor::zeros(&[1, 3]));
        assert!(batchnorm_no_affine(&mut graph, x, &mut stats, true).is_err());
    }

    #[test]
    fn eval_uses_running_statistics_and_is_deterministic() {
        let mut rng = substream(9, "bn");
        let mut stats = RunningStats::new(2);
        for _ in 0..20 {
            run_train(Tensor::randn(&mut rng, &[32, 2], 1.5), &mut stats);
        }
        let store = ParamStore::new();
        let x = Tensor::randn(&mut rng, &[8, 2], 1.5);
        let run_eval = || {
            let mut graph = Graph::new(&store);
            let xn = graph.constant(x.clone());
            let out = batchnorm_no_affine(&mut graph, xn, &mut stats.clone(), false).unwrap();
            graph.tape.value(out).data().to_vec()
        };
        assert_eq!(run_eval(), run_eval());
    }
}
