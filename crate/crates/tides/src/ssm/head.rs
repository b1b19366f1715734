//! Selectivity heads: per-step SSM parameters computed from the input.
//!
//! A head is `value_k = project(g(u_k)) + bias` where `g` chains `depth`
//! residual gated-linear-unit blocks `x + (W1 x) * sigmoid(W2 x)` and the
//! projection is either a full matrix (decay/frequency heads, output dim P)
//! or a rank-r factorization (input/output projection heads, whose flat
//! output dim 2*P*H would otherwise dominate the parameter count). The
//! projection weights (`w_out`, or the `w_up` factor) start at zero, so a
//! fresh head reproduces its bias exactly and selectivity is learned as a
//! perturbation around the long-memory initialization. A frozen head is the
//! LTI case: bias only.
//!
//! When `normalize` is set the projected delta is RMS-normalized per step
//! before the bias is added (complex-aware for paired-channel targets),
//! which bounds the per-step perturbation scale.

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

const RMS_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
enum Projection {
    Frozen,
    Full { w_out: ParamId },
    LowRank { w_down: ParamId, w_up: ParamId },
}

#[derive(Clone, Debug)]
pub struct SelectivityHead {
    bias: ParamId,
    projection: Projection,
    glu_blocks: Vec<(ParamId, ParamId)>,
    normalize: bool,
    complex_pairs: bool,
    in_dim: usize,
    out_dim: usize,
}

pub struct HeadSpec<'a> {
    pub name: &'a str,
    pub in_dim: usize,
    pub out_dim: usize,
    /// `None` builds a full projection, `Some(r)` a rank-r factorization.
    pub rank: Option<usize>,
    pub depth: usize,
    pub normalize: bool,
    /// Output represents complex pairs (first half real, second imaginary);
    /// RMS normalization then averages entry magnitudes.
    pub complex_pairs: bool,
    /// `false` freezes the head at its bias (the LTI case).
    pub input_dependent: bool,
}

impl SelectivityHead {
    /// `bias` is registered by the caller so it can be shared with the
    /// spectrum parameters it perturbs.
    pub fn init(
        spec: HeadSpec,
        bias: ParamId,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let projection = if !spec.input_dependent {
            Projection::Frozen
        } else {
            match spec.rank {
                None => Projection::Full {
                    w_out: store.insert(
                        format!("{}.w_out", spec.name),
                        Tensor::zeros(&[spec.in_dim, spec.out_dim]),
                        true,
                    ),
                },
                Some(r) => Projection::LowRank {
                    w_down: store.insert(
                        format!("{}.w_down", spec.name),
                        Tensor::randn(rng, &[spec.in_dim, r], 1.0 / (spec.in_dim as f64).sqrt()),
                        true,
                    ),
                    w_up: store.insert(
                        format!("{}.w_up", spec.name),
                        Tensor::zeros(&[r, spec.out_dim]),
                        true,
                    ),
                },
            }
        };
        let glu_blocks = if spec.input_dependent {
            (0..spec.depth)
                .map(|k| {
                    let std = 1.0 / (spec.in_dim as f64).sqrt();
                    let w1 = store.insert(
                        format!("{}.glu{}.w1", spec.name, k),
                        Tensor::randn(rng, &[spec.in_dim, spec.in_dim], std),
                        true,
                    );
                    let w2 = store.insert(
                        format!("{}.glu{}.w2", spec.name, k),
                        Tensor::randn(rng, &[spec.in_dim, spec.in_dim], std),
                        true,
                    );
                    (w1, w2)
                })
                .collect()
        } else {
            Vec::new()
        };
        SelectivityHead {
            bias,
            projection,
            glu_blocks,
            normalize: spec.normalize,
            complex_pairs: spec.complex_pairs,
            in_dim: spec.in_dim,
            out_dim: spec.out_dim,
        }
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    pub fn is_input_dependent(&self) -> bool {
        !matches!(self.projection, Projection::Frozen)
    }

    /// Per-step head values for a sequence `u` of shape `[L, in_dim]`;
    /// returns `[L, out_dim]`.
    pub fn apply(&self, graph: &mut Graph, u: NodeId) -> Result<NodeId> {
        let shape = graph.tape.value(u).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::shape(
                "apply_head",
                format!("expected [L, {}], got {:?}", self.in_dim, shape),
            ));
        }
        let rows = shape[0];
        let bias = graph.param(self.bias);
        let base = graph.tape.repeat_rows(bias, rows)?;
        if matches!(self.projection, Projection::Frozen) {
            return Ok(base);
        }

        let mut x = u;
        for (w1, w2) in &self.glu_blocks {
            let w1 = graph.param(*w1);
            let w2 = graph.param(*w2);
            let lin = graph.tape.matmul(x, w1)?;
            let gate_pre = graph.tape.matmul(x, w2)?;
            let gate = graph.tape.sigmoid(gate_pre);
            let prod = graph.tape.mul(lin, gate)?;
            x = graph.tape.add(x, prod)?;
        }

        let proj = match &self.projection {
            Projection::Frozen => unreachable!(),
            Projection::Full { w_out } => {
                let w = graph.param(*w_out);
                graph.tape.matmul(x, w)?
            }
            Projection::LowRank { w_down, w_up } => {
                let wd = graph.param(*w_down);
                let wu = graph.param(*w_up);
                let mid = graph.tape.matmul(x, wd)?;
                graph.tape.matmul(mid, wu)?
            }
        };
        let proj = if self.normalize {
            rms_normalize(graph, proj, self.complex_pairs)?
        } else {
            proj
        };
        graph.tape.add(proj, base)
    }

    /// ParamIds of the head's weights in a fixed order (GLU pairs, then the
    /// projection factors); `None` for frozen heads. Used by group splitting.
    pub fn effective_weight_ids(&self, _store: &ParamStore) -> Option<Vec<ParamId>> {
        let glu: Vec<ParamId> = self.glu_blocks.iter().flat_map(|(a, b)| [*a, *b]).collect();
        match &self.projection {
            Projection::Frozen => None,
            Projection::Full { w_out } => {
                let mut ids = glu;
                ids.push(*w_out);
                Some(ids)
            }
            Projection::LowRank { w_down, w_up } => {
                let mut ids = glu;
                ids.push(*w_down);
                ids.push(*w_up);
                Some(ids)
            }
        }
    }

    /// Effective dense weight `w_up . w_down` composition for rank checks
    /// and parameter accounting; full heads return their matrix directly.
    pub fn effective_weight(&self, store: &ParamStore) -> Option<Tensor> {
        match &self.projection {
            Projection::Frozen => None,
            Projection::Full { w_out } => Some(store.tensor(*w_out).clone()),
            Projection::LowRank { w_down, w_up } => {
                let wd = store.tensor(*w_down);
                let wu = store.tensor(*w_up);
                let (i, r) = (wd.shape()[0], wd.shape()[1]);
                let o = wu.shape()[1];
                let mut out = Tensor::zeros(&[i, o]);
                for a in 0..i {
                    for b in 0..o {
                        let mut acc = 0.0;
                        for k in 0..r {
                            acc += wd.data()[a * r + k] * wu.data()[k * o + b];
                        }
                        out.data_mut()[a * o + b] = acc;
                    }
                }
                Some(out)
            }
        }
    }
}

/// Per-step RMS normalization of the projected delta. The mean square is
/// floored before the square root so the gradient stays finite at the
/// all-zero initialization (the forward value there is exactly zero either
/// way).
fn rms_normalize(graph: &mut Graph, proj: NodeId, complex_pairs: bool) -> Result<NodeId> {
    let t = &mut graph.tape;
    let m = t.value(proj).shape()[1];
    let ms = if complex_pairs {
        let half = m / 2;
        let re = t.slice(proj, 1, 0, half)?;
        let im = t.slice(proj, 1, half, half)?;
        let re2 = t.square(re);
        let im2 = t.square(im);
        let mag2 = t.add(re2, im2)?;
        t.row_mean(mag2)?
    } else {
        let sq = t.square(proj);
        t.row_mean(sq)?
    };
    let floored = t.clamp_min(ms, 1e-24);
    let rms = t.sqrt(floored);
    let shifted = t.add_scalar(rms, RMS_EPS);
    let inv = t.reciprocal(shifted);
    t.scale_rows(proj, inv)
}
