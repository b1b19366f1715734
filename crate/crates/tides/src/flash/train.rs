//! Training protocol for the toy models: Adam at 3e-3 with default moment
//! coefficients, 3000 steps of batch 32, MSE against the closed-form glow,
//! the dilation drawn uniformly from [0.5, 1.5] per batch element, no
//! schedule and no weight decay.

use crate::autodiff::{AdamConfig, AdamState, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::flash::generator::generate_sequence;
use crate::flash::toy::{build_toy_model, ToyKind, ToyModel, TOY_STATES};
use crate::rng::substream;

pub const TRAIN_STEPS: usize = 3000;
pub const TRAIN_BATCH: usize = 32;
pub const TRAIN_LR: f64 = 3e-3;
pub const TRAIN_DELTA_RANGE: (f64, f64) = (0.5, 1.5);

pub struct TrainedToy {
    pub kind: ToyKind,
    pub model: ToyModel,
    pub store: ParamStore,
    pub loss_curve: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: Option<usize>,
    pub states: usize,
    pub bc_rank: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: TRAIN_STEPS,
            batch: TRAIN_BATCH,
            lr: TRAIN_LR,
            hidden: None,
            states: TOY_STATES,
            bc_rank: crate::flash::toy::TOY_BC_RANK,
        }
    }
}

/// Train one toy kind from scratch. All randomness (initialization, batch
/// draws) flows from `seed` through named substreams; identical seeds give
/// bit-identical loss curves.
pub fn train_toy(kind: ToyKind, seed: u64, settings: TrainSettings) -> Result<TrainedToy> {
    let mut init_rng = substream(seed, "toy-init");
    let mut data_rng = substream(seed, "toy-train-data");
    let mut store = ParamStore::new();
    let hidden = settings.hidden.unwrap_or_else(|| kind.default_hidden());
    let model = build_toy_model(kind, hidden, settings.states, settings.bc_rank, &mut store, &mut init_rng)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(settings.lr), &store);
    let ids = adam.ids().to_vec();
    let mut loss_curve = Vec::with_capacity(settings.steps);
    use rand::Rng;

    for step in 0..settings.steps {
        let mut graph = Graph::new(&store);
        let mut batch_sse: Option<crate::autodiff::NodeId> = None;
        for _ in 0..settings.batch {
            let delta = data_rng.gen_range(TRAIN_DELTA_RANGE.0..TRAIN_DELTA_RANGE.1);
            let seq = generate_sequence(&mut data_rng, delta)?;
            let pred = model.forward(&mut graph, &seq)?;
            let target = graph.constant(Tensor::vector(&seq.target));
            let t = &mut graph.tape;
            let diff = t.sub(pred, target)?;
            let sq = t.square(diff);
            let sse = t.mean(sq);
            batch_sse = Some(match batch_sse {
                None => sse,
                Some(acc) => t.add(acc, sse)?,
            });
        }
        let total = batch_sse.expect("nonempty batch");
        let loss = graph.tape.scale(total, 1.0 / settings.batch as f64);
        let loss_value = graph.tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{} training loss at step {}", kind.name(), step),
            });
        }
        loss_curve.push(loss_value);
        let grads = graph.backward(loss)?;
        let grad_tensors: Vec<Tensor> =
            ids.iter().map(|id| graph.param_grad(&grads, *id)).collect();
        drop(graph);
        adam.step(&mut store, &grad_tensors)?;
    }
    Ok(TrainedToy { kind, model, store, loss_curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_settings() -> TrainSettings {
        TrainSettings { steps: 40, batch: 8, lr: TRAIN_LR, hidden: Some(8), states: 8, bc_rank: 4 }
    }

    #[test]
    fn training_reduces_the_loss_for_every_kind() {
        for kind in ToyKind::ALL {
            let settings = TrainSettings { steps: 150, batch: 8, hidden: Some(8), states: 8, lr: TRAIN_LR, bc_rank: 4 };
            let trained = train_toy(kind, 0, settings).unwrap();
            let first = trained.loss_curve[0];
            let last = *trained.loss_curve.last().unwrap();
            assert!(last < first, "{kind:?}: {first} -> {last}");
        }
    }

    #[test]
    fn identical_seeds_give_bit_identical_loss_curves() {
        let a = train_toy(ToyKind::TidesToy, 0, quick_settings()).unwrap();
        let b = train_toy(ToyKind::TidesToy, 0, quick_settings()).unwrap();
        assert_eq!(a.loss_curve.len(), b.loss_curve.len());
        for (x, y) in a.loss_curve.iter().zip(&b.loss_curve) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
