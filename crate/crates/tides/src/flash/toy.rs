//! The three parameter-matched toy models for the Fading Flash diagnostic.
//!
//! Each is a self-contained real-diagonal SSM (no block structure): a
//! linear encoder into H channels, P diagonal states under ZOH, a linear
//! readout row over the states plus a direct feedthrough of the encoded
//! input. They differ only in where input-dependence lives:
//!
//! - `S5Toy`: everything static; the timestep is the physical dilation.
//! - `MambaSurrogate`: input-dependent step `softplus(W [h_k, delta] + b)`
//!   per mode, plus input-dependent input/output projections; the physical
//!   dilation reaches the model only as an extra input channel and a gate
//!   input, never the discretization.
//! - `TidesToy`: input-dependent decay rates and input/output projections;
//!   the timestep stays physical.
//!
//! Hidden widths are chosen per kind so trainable parameter counts match
//! within a few percent.

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::flash::generator::FlashSequence;
use crate::ssm::head::{HeadSpec, SelectivityHead};
use crate::ssm::layer::GATE_BIAS_INIT;
use crate::ssm::scan::scan_on_tape;
use crate::ssm::spectrum::{hippo_init, Reparam};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ToyKind {
    S5Toy,
    MambaSurrogate,
    TidesToy,
}

impl ToyKind {
    pub const ALL: [ToyKind; 3] = [ToyKind::S5Toy, ToyKind::MambaSurrogate, ToyKind::TidesToy];

    pub fn name(&self) -> &'static str {
        match self {
            ToyKind::S5Toy => "s5",
            ToyKind::MambaSurrogate => "mamba_s",
            ToyKind::TidesToy => "tides",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "s5" => Ok(ToyKind::S5Toy),
            "mamba_s" => Ok(ToyKind::MambaSurrogate),
            "tides" => Ok(ToyKind::TidesToy),
            other => Err(Error::config(format!("unknown toy kind `{other}`"))),
        }
    }

    /// The dilation enters as an input channel only for the surrogate.
    pub fn takes_delta_channel(&self) -> bool {
        matches!(self, ToyKind::MambaSurrogate)
    }

    fn input_dim(&self) -> usize {
        if self.takes_delta_channel() {
            5
        } else {
            4
        }
    }

    /// Hidden width per kind; the LTI model spends its budget on width
    /// while the selective ones spend theirs on heads.
    pub fn default_hidden(&self) -> usize {
        match self {
            ToyKind::S5Toy => 139,
            ToyKind::MambaSurrogate | ToyKind::TidesToy => 16,
        }
    }
}

pub const TOY_STATES: usize = 16;
pub const TOY_BC_RANK: usize = 8;

/// Trainable scalars implied by a toy configuration.
pub fn toy_parameter_count(kind: ToyKind, hidden: usize, states: usize, rank: usize) -> usize {
    let (c, h, p, r) = (kind.input_dim(), hidden, states, rank);
    let encoder = c * h;
    // theta only: the frequency bank and the per-mode timescale are frozen
    // (real-diagonal state, step equal to the physical dilation)
    let spectrum = p;
    let b_head_bias = p * h;
    let c_head_bias = p;
    let feedthrough = h;
    let mut total = encoder + spectrum + b_head_bias + c_head_bias + feedthrough;
    match kind {
        ToyKind::S5Toy => {}
        ToyKind::MambaSurrogate => {
            total += h * r + r * (p * h); // input projection head
            total += h * r + r * p; // output projection head
            total += (h + 1) * p + p; // step gate
        }
        ToyKind::TidesToy => {
            total += h * p; // decay head
            total += h * r + r * (p * h);
            total += h * r + r * p;
        }
    }
    total
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    pub kind: ToyKind,
    hidden: usize,
    states: usize,
    enc_w: ParamId,
    theta: ParamId,
    log_step: ParamId,
    b0: ParamId,
    c0: ParamId,
    d_row: ParamId,
    head_re: SelectivityHead,
    head_b: SelectivityHead,
    head_c: SelectivityHead,
    gate: Option<(ParamId, ParamId)>,
}

/// Build a toy model of the given kind. All decay rates go through the
/// exponential reparameterization (strictly negative without clipping), the
/// frequency bank is frozen at zero (real-diagonal state), and the
/// selectivity projections start at zero.
pub fn build_toy_model(
    kind: ToyKind,
    hidden: usize,
    states: usize,
    rank: usize,
    store: &mut ParamStore,
    rng: &mut impl Rng,
) -> Result<ToyModel> {
    let (c, h, p) = (kind.input_dim(), hidden, states);
    if h == 0 || p == 0 {
        return Err(Error::domain("toy models need at least one channel and one state"));
    }
    let prefix = kind.name();
    // decay pre-images log-spaced so the mode bank brackets the task's rate
    // range from the start; with the exponential reparameterization theta
    // is just ln(rate)
    let theta_init: Vec<f64> = (0..p)
        .map(|i| {
            let frac = if p == 1 { 0.5 } else { i as f64 / (p - 1) as f64 };
            let rate = 0.7 * (2.5f64 / 0.7).powf(frac);
            rate.ln()
        })
        .collect();
    let enc_w = store.insert(
        format!("{prefix}.enc.w"),
        Tensor::randn(rng, &[c, h], 1.0 / (c as f64).sqrt()),
        true,
    );
    let theta = store.insert(format!("{prefix}.theta"), Tensor::vector(&theta_init), true);
    // frozen at zero: the toy's per-mode step is the physical dilation
    // itself, and decay rates live entirely in theta
    let log_step = store.insert(format!("{prefix}.log_step"), Tensor::zeros(&[p]), false);
    // zero-initialized input projection: injections grow only where the
    // task needs them, so constant input channels never acquire the
    // startup transients that break time-dilation extrapolation
    let b0 = store.insert(format!("{prefix}.b0"), Tensor::zeros(&[p * h]), true);
    let c0 = store.insert(
        format!("{prefix}.c0"),
        Tensor::randn(rng, &[p], 1.0 / (p as f64).sqrt()),
        true,
    );
    let d_row = store.insert(format!("{prefix}.d"), Tensor::zeros(&[h]), true);

    let id_bc = kind != ToyKind::S5Toy;
    let head_re = SelectivityHead::init(
        HeadSpec {
            name: &format!("{prefix}.head_re"),
            in_dim: h,
            out_dim: p,
            rank: None,
            depth: 0,
            normalize: false,
            complex_pairs: false,
            input_dependent: kind == ToyKind::TidesToy,
        },
        theta,
        store,
        rng,
    );
    let head_b = SelectivityHead::init(
        HeadSpec {
            name: &format!("{prefix}.head_b"),
            in_dim: h,
            out_dim: p * h,
            rank: Some(rank),
            depth: 0,
            normalize: false,
            complex_pairs: false,
            input_dependent: id_bc,
        },
        b0,
        store,
        rng,
    );
    let head_c = SelectivityHead::init(
        HeadSpec {
            name: &format!("{prefix}.head_c"),
            in_dim: h,
            out_dim: p,
            rank: Some(rank),
            depth: 0,
            normalize: false,
            complex_pairs: false,
            input_dependent: id_bc,
        },
        c0,
        store,
        rng,
    );
    let gate = if kind == ToyKind::MambaSurrogate {
        Some((
            store.insert(format!("{prefix}.gate.w"), Tensor::zeros(&[h + 1, p]), true),
            store.insert(format!("{prefix}.gate.bias"), Tensor::full(&[p], GATE_BIAS_INIT), true),
        ))
    } else {
        None
    };
    Ok(ToyModel {
        kind,
        hidden,
        states,
        enc_w,
        theta,
        log_step,
        b0,
        c0,
        d_row,
        head_re,
        head_b,
        head_c,
        gate,
    })
}

impl ToyModel {
    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Prediction for one sequence at the tape level; returns `[L]`.
    pub fn forward(&self, graph: &mut Graph, seq: &FlashSequence) -> Result<NodeId> {
        let rows = seq.flashes.len();
        let (h, p) = (self.hidden, self.states);
        let mut data: Vec<f64> = Vec::with_capacity(rows * self.kind.input_dim());
        for row in seq.input_rows() {
            data.extend_from_slice(&row);
            if self.kind.takes_delta_channel() {
                data.push(seq.delta);
            }
        }
        let u = graph.constant(
            Tensor::from_vec(vec![rows, self.kind.input_dim()], data).expect("input shape"),
        );

        // plain linear encoder
        let w = graph.param(self.enc_w);
        let t = &mut graph.tape;
        let enc = t.matmul(u, w)?;

        // per-step decay rates (exponential reparameterization, no clip)
        let theta_steps = self.head_re.apply(graph, enc)?;
        let re = Reparam::Exp.apply_on_tape(&mut graph.tape, theta_steps);

        // effective steps
        let log_step = graph.param(self.log_step);
        let delta_eff = match self.gate {
            None => {
                let t = &mut graph.tape;
                let scale = t.exp(log_step);
                let delta_vec = t.leaf(Tensor::full(&[rows], seq.delta));
                t.outer(delta_vec, scale)?
            }
            Some((gw, gb)) => {
                let gw = graph.param(gw);
                let gb = graph.param(gb);
                let t = &mut graph.tape;
                let scale = t.exp(log_step);
                let delta_col = t.leaf(Tensor::full(&[rows, 1], seq.delta));
                let gate_in = t.concat(enc, delta_col, 1)?;
                let lin = t.matmul(gate_in, gw)?;
                let gb_rows = t.repeat_rows(gb, rows)?;
                let pre = t.add(lin, gb_rows)?;
                let gate = t.softplus(pre);
                let scale_rows = t.repeat_rows(scale, rows)?;
                t.mul(gate, scale_rows)?
            }
        };

        // discretize (ZOH) on the real diagonal: imaginary channel is zero
        let t = &mut graph.tape;
        let z_re = t.mul(re, delta_eff)?;
        let zeros = t.leaf(Tensor::zeros(&[rows, p]));
        let z = t.pack2(z_re, zeros)?;
        let a_bar = t.complex_exp(z)?;
        let phi = t.complex_phi1(z)?;
        let b_coef = t.complex_scale_real(phi, delta_eff)?;

        // input injection
        let v_re = if self.head_b.is_input_dependent() {
            let b_flat = self.head_b.apply(graph, enc)?;
            let t = &mut graph.tape;
            let b3 = t.reshape(b_flat, &[rows, p, h])?;
            t.seq_matvec(b3, enc)?
        } else {
            let b0 = graph.param(self.b0);
            let t = &mut graph.tape;
            let mat = t.reshape(b0, &[p, h])?;
            let mat_t = t.transpose(mat)?;
            t.matmul(enc, mat_t)?
        };
        let t = &mut graph.tape;
        let v = t.pack2(v_re, zeros)?;
        let b_elem = t.complex_mul(b_coef, v)?;

        // scan and readout
        let x = scan_on_tape(t, a_bar, b_elem)?;
        let x_re = t.unpack(x, 0)?;
        let c_steps = self.head_c.apply(graph, enc)?;
        let t = &mut graph.tape;
        let cx = t.mul(c_steps, x_re)?;
        let y_state = t.row_sum(cx)?;
        let d = graph.param(self.d_row);
        let t = &mut graph.tape;
        let d_col = t.reshape(d, &[h, 1])?;
        let feed2 = t.matmul(enc, d_col)?;
        let feed = t.reshape(feed2, &[rows])?;
        t.add(y_state, feed)
    }

    /// Plain-value predictions for a batch of sequences (no gradients).
    pub fn predict(&self, store: &ParamStore, seqs: &[FlashSequence]) -> Result<Vec<Vec<f64>>> {
        let mut graph = Graph::new(store);
        let mut out = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let y = self.forward(&mut graph, seq)?;
            out.push(graph.tape.value(y).data().to_vec());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flash::generator::generate_sequence;
    use crate::rng::substream;

    #[test]
    fn parameter_counts_match_the_analytic_formula_and_each_other() {
        let mut counts = Vec::new();
        for kind in ToyKind::ALL {
            let mut store = ParamStore::new();
            let mut rng = substream(0, "toy-init");
            build_toy_model(kind, kind.default_hidden(), TOY_STATES, TOY_BC_RANK, &mut store, &mut rng)
                .unwrap();
            let registered = store.trainable_scalar_count();
            assert_eq!(
                registered,
                toy_parameter_count(kind, kind.default_hidden(), TOY_STATES, TOY_BC_RANK),
                "formula mismatch for {:?}",
                kind
            );
            counts.push(registered as f64);
        }
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        for (kind, count) in ToyKind::ALL.iter().zip(&counts) {
            let dev = (count - mean).abs() / mean;
            assert!(dev < 0.05, "{kind:?} deviates {:.1}% from the common count", dev * 100.0);
        }
    }

    #[test]
    fn s5_output_ignores_batch_companions() {
        // no coupling across sequences: predictions are per-sequence pure
        let mut store = ParamStore::new();
        let mut rng = substream(1, "toy-init");
        let toy = build_toy_model(ToyKind::S5Toy, 24, 8, 4, &mut store, &mut rng).unwrap();
        let mut data_rng = substream(2, "toy-data");
        let a = generate_sequence(&mut data_rng, 1.0).unwrap();
        let b = generate_sequence(&mut data_rng, 0.6).unwrap();
        let alone = toy.predict(&store, std::slice::from_ref(&a)).unwrap();
        let together = toy.predict(&store, &[b, a.clone()]).unwrap();
        assert_eq!(alone[0], together[1]);
    }

    #[test]
    fn tides_toy_at_zero_selectivity_equals_s5_toy_with_shared_biases() {
        let (h, p) = (16, 8);
        let mut store_t = ParamStore::new();
        let mut rng_t = substream(3, "toy-init");
        let tides = build_toy_model(ToyKind::TidesToy, h, p, 4, &mut store_t, &mut rng_t).unwrap();
        let mut store_s = ParamStore::new();
        let mut rng_s = substream(4, "toy-init");
        let s5 = build_toy_model(ToyKind::S5Toy, h, p, 4, &mut store_s, &mut rng_s).unwrap();
        // share every bias parameter (selectivity projections stay zero)
        for (dst, src) in [
            (s5.enc_w, tides.enc_w),
            (s5.theta, tides.theta),
            (s5.log_step, tides.log_step),
            (s5.b0, tides.b0),
            (s5.c0, tides.c0),
            (s5.d_row, tides.d_row),
        ] {
            *store_s.tensor_mut(dst) = store_t.tensor(src).clone();
        }
        let mut data_rng = substream(5, "toy-data");
        for _ in 0..10 {
            let seq = generate_sequence(&mut data_rng, 0.9).unwrap();
            let yt = tides.predict(&store_t, std::slice::from_ref(&seq)).unwrap();
            let ys = s5.predict(&store_s, std::slice::from_ref(&seq)).unwrap();
            for (a, b) in yt[0].iter().zip(&ys[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weight_gate_makes_the_surrogate_dilation_blind() {
        let mut store = ParamStore::new();
        let mut rng = substream(6, "toy-init");
        let toy = build_toy_model(ToyKind::MambaSurrogate, 12, 8, 4, &mut store, &mut rng).unwrap();
        let mut data_rng = substream(7, "toy-data");
        let base = generate_sequence(&mut data_rng, 1.0).unwrap();
        let mut dilated = base.clone();
        dilated.delta = 2.5;
        // the surrogate sees delta as an input channel too; zero the encoder
        // column it feeds so only the (zero-weight) gate could carry it
        let mut w = store.tensor(toy.enc_w).clone();
        let h = toy.hidden();
        for col in 0..h {
            w.data_mut()[4 * h + col] = 0.0;
        }
        *store.tensor_mut(toy.enc_w) = w;
        let y1 = toy.predict(&store, std::slice::from_ref(&base)).unwrap();
        let y2 = toy.predict(&store, std::slice::from_ref(&dilated)).unwrap();
        assert_eq!(y1[0], y2[0], "softplus(bias) gate is a constant step");
    }
}
