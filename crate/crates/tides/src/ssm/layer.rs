//! The full selective SSM layer: per-step heads, discretization with a
//! physical (or gated) timestep, the parallel scan, and the readout
//!
//! ```text
//!   x_k = a_bar_k x_{k-1} + b_bar_k u_k        y_k = Re(C_k x_k) + D u_k
//! ```
//!
//! In physical mode the caller-supplied interval enters the computation
//! only through the discretization; the heads never see it. In
//! learned-gate mode the step is `softplus(W [u_k, delta_k] + b)` per mode
//! and replaces the physical interval entirely (the surrogate for
//! selective models whose step is a learned gate).

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::ssm::discretize::{Discretization, BILINEAR_POLE_EPS};
use crate::ssm::head::{HeadSpec, SelectivityHead};
use crate::ssm::scan::scan_on_tape;
use crate::ssm::spectrum::{hippo_init_grouped, Reparam, EIG_CLIP_FLOOR};
use rand::Rng;

/// Gate bias pre-image: softplus of this is exactly 1, so a zero-weight
/// gate reproduces the per-mode timescales unchanged.
pub const GATE_BIAS_INIT: f64 = 0.541324854612918;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeltaMode {
    /// The timestep is the physical elapsed time between observations.
    Physical,
    /// The timestep is a learned function of the input (with the raw
    /// interval appended as a gate input), as in step-gated selective SSMs.
    LearnedGate,
}

#[derive(Clone, Debug)]
pub struct SsmLayerConfig {
    pub hidden: usize,
    pub ssm_b: usize,
    pub ssm_mult: usize,
    pub bidir: bool,
    pub disc: Discretization,
    pub reparam: Reparam,
    pub clip_eigs: bool,
    pub id_re_lambda: bool,
    pub id_im_lambda: bool,
    pub id_bc: bool,
    pub delta_mode: DeltaMode,
    pub bc_rank: usize,
    pub lambda_depth: usize,
    pub normalize_heads: bool,
}

impl SsmLayerConfig {
    /// Canonical selective configuration: input-dependent decay and
    /// input/output projections, static frequencies, physical timestep.
    pub fn tides(hidden: usize, ssm_b: usize, ssm_mult: usize) -> Self {
        SsmLayerConfig {
            hidden,
            ssm_b,
            ssm_mult,
            bidir: false,
            disc: Discretization::Zoh,
            reparam: Reparam::Stable,
            clip_eigs: true,
            id_re_lambda: true,
            id_im_lambda: false,
            id_bc: true,
            delta_mode: DeltaMode::Physical,
            bc_rank: 8,
            lambda_depth: 0,
            normalize_heads: true,
        }
    }

    pub fn modes(&self) -> usize {
        self.ssm_b * self.ssm_mult
    }

    /// State width seen by the readout (doubled when bidirectional).
    pub fn readout_modes(&self) -> usize {
        if self.bidir {
            2 * self.modes()
        } else {
            self.modes()
        }
    }
}

#[derive(Clone, Debug)]
pub struct SsmLayer {
    cfg: SsmLayerConfig,
    theta: ParamId,
    lambda_im: ParamId,
    log_step: ParamId,
    b0: ParamId,
    c0: ParamId,
    d_diag: ParamId,
    head_re: SelectivityHead,
    head_im: SelectivityHead,
    head_b: SelectivityHead,
    head_c: SelectivityHead,
    gate: Option<(ParamId, ParamId)>,
}

impl SsmLayer {
    /// Register all layer parameters under `prefix` and wire the heads.
    /// `im_trainable: false` freezes the frequency bank (the real-diagonal
    /// case uses zero frequencies that must stay zero).
    pub fn init(
        cfg: SsmLayerConfig,
        prefix: &str,
        im_trainable: bool,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (h, p) = (cfg.hidden, cfg.modes());
        let p_read = cfg.readout_modes();
        let spectrum =
            hippo_init_grouped(cfg.ssm_b, cfg.ssm_mult, cfg.reparam, cfg.clip_eigs, rng)?;
        let theta = store.insert(format!("{prefix}.theta"), Tensor::vector(&spectrum.theta), true);
        let lambda_im = store.insert(
            format!("{prefix}.lambda_im"),
            Tensor::vector(&spectrum.lambda_im),
            im_trainable,
        );
        let log_step =
            store.insert(format!("{prefix}.log_step"), Tensor::vector(&spectrum.log_step), true);
        // complex entries get magnitude-std 1/sqrt(P) (1/sqrt(P') for the readout)
        let b0 = store.insert(
            format!("{prefix}.b0"),
            Tensor::randn(rng, &[2 * p * h], 1.0 / (2.0 * p as f64).sqrt()),
            true,
        );
        let c0 = store.insert(
            format!("{prefix}.c0"),
            Tensor::randn(rng, &[2 * h * p_read], 1.0 / (2.0 * p_read as f64).sqrt()),
            true,
        );
        let d_diag = store.insert(format!("{prefix}.d"), Tensor::full(&[h], 1.0), true);

        let head_re = SelectivityHead::init(
            HeadSpec {
                name: &format!("{prefix}.head_re"),
                in_dim: h,
                out_dim: p,
                rank: None,
                depth: cfg.lambda_depth,
                normalize: cfg.normalize_heads,
                complex_pairs: false,
                input_dependent: cfg.id_re_lambda,
            },
            theta,
            store,
            rng,
        );
        let head_im = SelectivityHead::init(
            HeadSpec {
                name: &format!("{prefix}.head_im"),
                in_dim: h,
                out_dim: p,
                rank: None,
                depth: cfg.lambda_depth,
                normalize: cfg.normalize_heads,
                complex_pairs: false,
                input_dependent: cfg.id_im_lambda,
            },
            lambda_im,
            store,
            rng,
        );
        let head_b = SelectivityHead::init(
            HeadSpec {
                name: &format!("{prefix}.head_b"),
                in_dim: h,
                out_dim: 2 * p * h,
                rank: Some(cfg.bc_rank),
                depth: 0,
                normalize: cfg.normalize_heads,
                complex_pairs: true,
                input_dependent: cfg.id_bc,
            },
            b0,
            store,
            rng,
        );
        let head_c = SelectivityHead::init(
            HeadSpec {
                name: &format!("{prefix}.head_c"),
                in_dim: h,
                out_dim: 2 * h * p_read,
                rank: Some(cfg.bc_rank),
                depth: 0,
                normalize: cfg.normalize_heads,
                complex_pairs: true,
                input_dependent: cfg.id_bc,
            },
            c0,
            store,
            rng,
        );
        let gate = match cfg.delta_mode {
            DeltaMode::Physical => None,
            DeltaMode::LearnedGate => Some((
                store.insert(format!("{prefix}.gate.w"), Tensor::zeros(&[h + 1, p]), true),
                store.insert(
                    format!("{prefix}.gate.bias"),
                    Tensor::full(&[p], GATE_BIAS_INIT),
                    true,
                ),
            )),
        };
        Ok(SsmLayer {
            cfg,
            theta,
            lambda_im,
            log_step,
            b0,
            c0,
            d_diag,
            head_re,
            head_im,
            head_b,
            head_c,
            gate,
        })
    }

    pub fn cfg(&self) -> &SsmLayerConfig {
        &self.cfg
    }

    pub fn theta_id(&self) -> ParamId {
        self.theta
    }

    pub fn lambda_im_id(&self) -> ParamId {
        self.lambda_im
    }

    pub fn log_step_id(&self) -> ParamId {
        self.log_step
    }

    pub fn b0_id(&self) -> ParamId {
        self.b0
    }

    pub fn c0_id(&self) -> ParamId {
        self.c0
    }

    pub fn d_id(&self) -> ParamId {
        self.d_diag
    }

    fn ensure_finite(graph: &Graph, node: NodeId, what: &str) -> Result<()> {
        if graph.tape.value(node).has_non_finite() {
            return Err(crate::error::Error::NonFinite { context: format!("{what} output") });
        }
        Ok(())
    }

    /// Raw decay-head values (pre-reparameterization), `[L, P]`. Exposed so
    /// tests can assert that physical-mode heads never see the timestep.
    pub fn head_re_values(&self, graph: &mut Graph, u: NodeId) -> Result<NodeId> {
        self.head_re.apply(graph, u)
    }

    /// Test hook: override the group count without reinitializing, to
    /// exercise the indivisible-mode-count error path.
    #[doc(hidden)]
    pub fn force_group_count(&mut self, groups: usize) {
        self.cfg.ssm_b = groups;
    }

    /// Per-step decay rates (reparameterized, optionally clipped), `[L, P]`.
    fn decay_rates(&self, graph: &mut Graph, u: NodeId) -> Result<NodeId> {
        let theta_steps = self.head_re.apply(graph, u)?;
        Self::ensure_finite(graph, theta_steps, "decay head")?;
        let re = self.cfg.reparam.apply_on_tape(&mut graph.tape, theta_steps);
        Ok(if self.cfg.clip_eigs { graph.tape.clamp_max(re, EIG_CLIP_FLOOR) } else { re })
    }

    /// Per-step per-mode effective steps `[L, P]`.
    fn effective_steps(&self, graph: &mut Graph, u: NodeId, deltas: &[f64]) -> Result<NodeId> {
        let rows = deltas.len();
        let log_step = graph.param(self.log_step);
        let scale = graph.tape.exp(log_step);
        match self.cfg.delta_mode {
            DeltaMode::Physical => {
                let delta_leaf = graph.constant(Tensor::vector(deltas));
                graph.tape.outer(delta_leaf, scale)
            }
            DeltaMode::LearnedGate => {
                let (w, b) = self.gate.expect("gate params exist in learned-gate mode");
                let delta_col = graph.constant(
                    Tensor::from_vec(vec![rows, 1], deltas.to_vec()).expect("column vector"),
                );
                let gate_in = graph.tape.concat(u, delta_col, 1)?;
                let w = graph.param(w);
                let b = graph.param(b);
                let lin = graph.tape.matmul(gate_in, w)?;
                let biased = graph.tape.repeat_rows(b, rows).and_then(|bb| graph.tape.add(lin, bb))?;
                let gate = graph.tape.softplus(biased);
                let scale_rows = graph.tape.repeat_rows(scale, rows)?;
                graph.tape.mul(gate, scale_rows)
            }
        }
    }

    /// Scan element tensors `(a_bar, b_coef)`, both `[2, L, P]`, where the
    /// input injection is `b_bar u = complex_mul(b_coef, B_k u_k)`.
    fn discretize_on_tape(
        &self,
        graph: &mut Graph,
        re: NodeId,
        im: NodeId,
        delta_eff: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let t = &mut graph.tape;
        let z_re = t.mul(re, delta_eff)?;
        let z_im = t.mul(im, delta_eff)?;
        let z = t.pack2(z_re, z_im)?;
        match self.cfg.disc {
            Discretization::Zoh => {
                let a_bar = t.complex_exp(z)?;
                let phi = t.complex_phi1(z)?;
                let b_coef = t.complex_scale_real(phi, delta_eff)?;
                Ok((a_bar, b_coef))
            }
            Discretization::Bilinear => {
                let half_re = t.scale(z_re, -0.5);
                let den_re = t.add_scalar(half_re, 1.0);
                let den_im = t.scale(z_im, -0.5);
                let denom = t.pack2(den_re, den_im)?;
                // pole guard on concrete values, naming the offending mode
                let v = t.value(denom);
                let n = v.numel() / 2;
                for i in 0..n {
                    let (dr, di) = (v.data()[i], v.data()[n + i]);
                    if (dr * dr + di * di).sqrt() < BILINEAR_POLE_EPS {
                        let p = self.cfg.modes();
                        return Err(Error::domain(format!(
                            "bilinear discretization pole at step {} mode {}",
                            i / p,
                            i % p
                        )));
                    }
                }
                let num_re_half = t.scale(z_re, 0.5);
                let num_re = t.add_scalar(num_re_half, 1.0);
                let num_im = t.scale(z_im, 0.5);
                let num = t.pack2(num_re, num_im)?;
                let inv = t.complex_reciprocal(denom)?;
                let a_bar = t.complex_mul(num, inv)?;
                let b_coef = t.complex_scale_real(inv, delta_eff)?;
                Ok((a_bar, b_coef))
            }
        }
    }

    /// Full layer forward for one sequence: `u` is `[L, H]` on the tape,
    /// `deltas` the physical intervals (strictly positive, length L).
    /// Returns `[L, H]`.
    pub fn forward(&self, graph: &mut Graph, u: NodeId, deltas: &[f64]) -> Result<NodeId> {
        let (h, p) = (self.cfg.hidden, self.cfg.modes());
        let p_read = self.cfg.readout_modes();
        let shape = graph.tape.value(u).shape().to_vec();
        if shape.len() != 2 || shape[1] != h {
            return Err(Error::shape(
                "ssm_forward",
                format!("expected input [L, {}], got {:?}", h, shape),
            ));
        }
        let rows = shape[0];
        if deltas.len() != rows {
            return Err(Error::shape(
                "ssm_forward",
                format!("{} timesteps for {} inputs", deltas.len(), rows),
            ));
        }
        if let Some(bad) = deltas.iter().find(|d| **d <= 0.0 || !d.is_finite()) {
            return Err(Error::domain(format!("timesteps must be positive, got {bad}")));
        }

        let re = self.decay_rates(graph, u)?;
        let im = self.head_im.apply(graph, u)?;
        Self::ensure_finite(graph, im, "frequency head")?;
        let delta_eff = self.effective_steps(graph, u, deltas)?;
        let (a_bar, b_coef) = self.discretize_on_tape(graph, re, im, delta_eff)?;

        // input injection B_k u_k; the frozen (LTI) head collapses to one
        // static matmul instead of a per-step contraction
        let ph = p * h;
        let v = if self.head_b.is_input_dependent() {
            let b_flat = self.head_b.apply(graph, u)?;
            Self::ensure_finite(graph, b_flat, "input projection head")?;
            let t = &mut graph.tape;
            let b_re_flat = t.slice(b_flat, 1, 0, ph)?;
            let b_im_flat = t.slice(b_flat, 1, ph, ph)?;
            let b_re3 = t.reshape(b_re_flat, &[rows, p, h])?;
            let b_im3 = t.reshape(b_im_flat, &[rows, p, h])?;
            let v_re = t.seq_matvec(b_re3, u)?;
            let v_im = t.seq_matvec(b_im3, u)?;
            t.pack2(v_re, v_im)?
        } else {
            let b0 = graph.param(self.b0);
            Self::ensure_finite(graph, b0, "input projection head")?;
            let t = &mut graph.tape;
            let re_flat = t.slice(b0, 0, 0, ph)?;
            let im_flat = t.slice(b0, 0, ph, ph)?;
            let re_mat = t.reshape(re_flat, &[p, h])?;
            let im_mat = t.reshape(im_flat, &[p, h])?;
            let re_t = t.transpose(re_mat)?;
            let im_t = t.transpose(im_mat)?;
            let v_re = t.matmul(u, re_t)?;
            let v_im = t.matmul(u, im_t)?;
            t.pack2(v_re, v_im)?
        };
        let t = &mut graph.tape;
        let b_elem = t.complex_mul(b_coef, v)?;

        // scans
        let x_fwd = scan_on_tape(t, a_bar, b_elem)?;
        let x = if self.cfg.bidir {
            let a_rev = t.reverse_axis(a_bar, 1)?;
            let b_rev = t.reverse_axis(b_elem, 1)?;
            let x_back_rev = scan_on_tape(t, a_rev, b_rev)?;
            let x_back = t.reverse_axis(x_back_rev, 1)?;
            t.concat(x_fwd, x_back, 2)?
        } else {
            x_fwd
        };

        // readout y = Re(C_k x_k) + D u_k, with the same frozen-head shortcut
        let hp = h * p_read;
        let t = &mut graph.tape;
        let x_re = t.unpack(x, 0)?;
        let x_im = t.unpack(x, 1)?;
        let y_ssm = if self.head_c.is_input_dependent() {
            let c_flat = self.head_c.apply(graph, u)?;
            Self::ensure_finite(graph, c_flat, "output projection head")?;
            let t = &mut graph.tape;
            let c_re_flat = t.slice(c_flat, 1, 0, hp)?;
            let c_im_flat = t.slice(c_flat, 1, hp, hp)?;
            let c_re3 = t.reshape(c_re_flat, &[rows, h, p_read])?;
            let c_im3 = t.reshape(c_im_flat, &[rows, h, p_read])?;
            let y_re = t.seq_matvec(c_re3, x_re)?;
            let y_im = t.seq_matvec(c_im3, x_im)?;
            t.sub(y_re, y_im)?
        } else {
            let c0 = graph.param(self.c0);
            Self::ensure_finite(graph, c0, "output projection head")?;
            let t = &mut graph.tape;
            let re_flat = t.slice(c0, 0, 0, hp)?;
            let im_flat = t.slice(c0, 0, hp, hp)?;
            let re_mat = t.reshape(re_flat, &[h, p_read])?;
            let im_mat = t.reshape(im_flat, &[h, p_read])?;
            let re_t = t.transpose(re_mat)?;
            let im_t = t.transpose(im_mat)?;
            let y_re = t.matmul(x_re, re_t)?;
            let y_im = t.matmul(x_im, im_t)?;
            t.sub(y_re, y_im)?
        };
        let d = graph.param(self.d_diag);
        let t = &mut graph.tape;
        let d_rows = t.repeat_rows(d, rows)?;
        let feed = t.mul(u, d_rows)?;
        t.add(y_ssm, feed)
    }

    /// Disjoint per-group views: each group carries its own slice of the
    /// spectrum, projections, and head weights, and runs as an independent
    /// SSM. Group feedthrough is zeroed; the whole-layer output equals the
    /// sum of group outputs plus the layer's own `D u` term.
    ///
    /// Head RMS normalization is computed over the full mode bank, so it
    /// couples groups; the exact-reproduction property holds when
    /// `normalize_heads` is off (the recurrence itself is block-diagonal
    /// either way).
    pub fn split_groups(&self, store: &ParamStore) -> Result<Vec<(SsmLayer, ParamStore)>> {
        let cfg = &self.cfg;
        let h = cfg.hidden;
        // partition by the actual spectrum size, not cfg arithmetic
        let p = store.tensor(self.theta).numel();
        if p % cfg.ssm_b != 0 {
            return Err(Error::domain(format!(
                "{p} modes do not divide into {} groups",
                cfg.ssm_b
            )));
        }
        let mult = p / cfg.ssm_b;
        let mut out = Vec::with_capacity(cfg.ssm_b);
        for g in 0..cfg.ssm_b {
            let modes: Vec<usize> = (g * mult..(g + 1) * mult).collect();
            let mut group_cfg = cfg.clone();
            group_cfg.ssm_b = 1;
            group_cfg.ssm_mult = mult;
            let mut gs = ParamStore::new();
            let mut rng = crate::rng::substream(0, "group-split-init");
            let layer = SsmLayer::init(group_cfg, "group", true, &mut gs, &mut rng)?;

            let take = |t: &Tensor, idx: &[usize]| -> Tensor {
                Tensor::vector(&idx.iter().map(|i| t.data()[*i]).collect::<Vec<_>>())
            };
            // spectrum slices
            *gs.tensor_mut(layer.theta) = take(store.tensor(self.theta), &modes);
            *gs.tensor_mut(layer.lambda_im) = take(store.tensor(self.lambda_im), &modes);
            *gs.tensor_mut(layer.log_step) = take(store.tensor(self.log_step), &modes);
            // input projection rows: [2, P, H] flattened
            let b_idx = complex_mode_major_indices(p, h, &modes);
            *gs.tensor_mut(layer.b0) = take(store.tensor(self.b0), &b_idx);
            // readout columns: [2, H, P'] flattened; bidirectional layers
            // see each group twice (forward block, then backward block)
            let c_idx = complex_readout_indices(h, p, cfg.bidir, &modes);
            *gs.tensor_mut(layer.c0) = take(store.tensor(self.c0), &c_idx);
            // group feedthrough is zero by contract
            *gs.tensor_mut(layer.d_diag) = Tensor::zeros(&[h]);

            copy_head_slice(store, &self.head_re, &mut gs, &layer.head_re, Some(&modes), p)?;
            copy_head_slice(store, &self.head_im, &mut gs, &layer.head_im, Some(&modes), p)?;
            copy_head_slice(store, &self.head_b, &mut gs, &layer.head_b, Some(&b_idx), 2 * p * h)?;
            copy_head_slice(
                store,
                &self.head_c,
                &mut gs,
                &layer.head_c,
                Some(&c_idx),
                2 * h * cfg.readout_modes(),
            )?;
            if let (Some((w, b)), Some((gw, gb))) = (self.gate, layer.gate) {
                let wt = store.tensor(w);
                let mut sliced = Tensor::zeros(&[h + 1, mult]);
                for r in 0..h + 1 {
                    for (j, m) in modes.iter().enumerate() {
                        sliced.data_mut()[r * mult + j] = wt.data()[r * p + m];
                    }
                }
                *gs.tensor_mut(gw) = sliced;
                *gs.tensor_mut(gb) = take(store.tensor(b), &modes);
            }
            out.push((layer, gs));
        }
        Ok(out)
    }
}

/// Indices of a mode subset inside a `[2, P, H]`-flattened tensor.
fn complex_mode_major_indices(p: usize, h: usize, modes: &[usize]) -> Vec<usize> {
    let mut idx = Vec::with_capacity(2 * modes.len() * h);
    for ch in 0..2 {
        for m in modes {
            for k in 0..h {
                idx.push(ch * p * h + m * h + k);
            }
        }
    }
    idx
}

/// Indices of a mode subset inside a `[2, H, P']`-flattened readout tensor.
fn complex_readout_indices(h: usize, p: usize, bidir: bool, modes: &[usize]) -> Vec<usize> {
    let p_read = if bidir { 2 * p } else { p };
    let mut cols: Vec<usize> = modes.to_vec();
    if bidir {
        cols.extend(modes.iter().map(|m| p + m));
    }
    let mut idx = Vec::with_capacity(2 * h * cols.len());
    for ch in 0..2 {
        for row in 0..h {
            for c in &cols {
                idx.push(ch * h * p_read + row * p_read + c);
            }
        }
    }
    idx
}

/// Copy a head's weights into a group store, slicing output columns where a
/// mode-index pattern is given.
fn copy_head_slice(
    src_store: &ParamStore,
    src: &SelectivityHead,
    dst_store: &mut ParamStore,
    dst: &SelectivityHead,
    out_cols: Option<&[usize]>,
    src_out_dim: usize,
) -> Result<()> {
    let Some(w_src) = src.effective_weight_ids(src_store) else {
        return Ok(()); // frozen head: bias slices are handled by the caller
    };
    let w_dst = dst.effective_weight_ids(dst_store).expect("matching head kinds");
    for (ws, wd) in w_src.iter().zip(&w_dst) {
        let t = src_store.tensor(*ws).clone();
        let dst_shape = dst_store.tensor(*wd).shape().to_vec();
        if t.shape() == dst_shape.as_slice() {
            *dst_store.tensor_mut(*wd) = t; // shared factor (w_down, GLU blocks)
            continue;
        }
        // output-column slice: rows preserved, columns gathered
        let cols = out_cols.expect("column pattern for sliced weight");
        let rows = t.shape()[0];
        debug_assert_eq!(t.shape()[1], src_out_dim);
        let mut sliced = Tensor::zeros(&[rows, cols.len()]);
        for r in 0..rows {
            for (j, c) in cols.iter().enumerate() {
                sliced.data_mut()[r * cols.len() + j] = t.data()[r * src_out_dim + c];
            }
        }
        *dst_store.tensor_mut(*wd) = sliced;
    }
    Ok(())
}
