//! Gated linear unit feed-forward: `y = W_out ((W1 x) * sigmoid(W2 x))`
//! with inner width `round(ff_mult * hidden)`.

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct GluFeedForward {
    w1: ParamId,
    w2: ParamId,
    w_out: ParamId,
    hidden: usize,
    inner: usize,
}

pub fn glu_inner_width(hidden: usize, ff_mult: f64) -> usize {
    ((hidden as f64 * ff_mult).round() as usize).max(1)
}

impl GluFeedForward {
    pub fn init(
        hidden: usize,
        ff_mult: f64,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let inner = glu_inner_width(hidden, ff_mult);
        let std_in = 1.0 / (hidden as f64).sqrt();
        let std_out = 1.0 / (inner as f64).sqrt();
        GluFeedForward {
            w1: store.insert(format!("{prefix}.w1"), Tensor::randn(rng, &[hidden, inner], std_in), true),
            w2: store.insert(format!("{prefix}.w2"), Tensor::randn(rng, &[hidden, inner], std_in), true),
            w_out: store.insert(
                format!("{prefix}.w_out"),
                Tensor::randn(rng, &[inner, hidden], std_out),
                true,
            ),
            hidden,
            inner,
        }
    }

    pub fn inner(&self) -> usize {
        self.inner
    }

    pub fn param_count(&self) -> usize {
        2 * self.hidden * self.inner + self.inner * self.hidden
    }

    pub fn forward(&self, graph: &mut Graph, x: NodeId) -> Result<NodeId> {
        let shape = graph.tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.hidden {
            return Err(Error::shape(
                "glu_ff",
                format!("expected [rows, {}], got {:?}", self.hidden, shape),
            ));
        }
        let w1 = graph.param(self.w1);
        let w2 = graph.param(self.w2);
        let w_out = graph.param(self.w_out);
        let t = &mut graph.tape;
        let lin = t.matmul(x, w1)?;
        let gate_pre = t.matmul(x, w2)?;
        let gate = t.sigmoid(gate_pre);
        let prod = t.mul(lin, gate)?;
        t.matmul(prod, w_out)
    }
}
