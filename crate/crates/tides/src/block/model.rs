//! Residual sequence-model blocks and the assembled model.
//!
//! Block composition, residual added last, both dropout sites sharing one
//! rate:
//!
//! ```text
//!   z = Dropout(GLU(Dropout(GELU(SSM(BN(x)))))) + x
//! ```
//!
//! The model is a deep encoder, N blocks, then a task head: classification
//! pools over time by mean and projects to class logits; regression reads a
//! per-step linear map.

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::block::glu::{glu_inner_width, GluFeedForward};
use crate::block::norm::{batchnorm_no_affine, RunningStats};
use crate::error::{Error, Result};
use crate::ssm::{DeltaMode, Discretization, Reparam, SsmLayer, SsmLayerConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskHead {
    Classification { classes: usize },
    Regression { dim: usize },
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub encoder_depth: usize,
    pub lambda_depth: usize,
    pub bc_rank: usize,
    pub ssm_b: usize,
    pub ssm_mult: usize,
    pub bidir: bool,
    pub disc: Discretization,
    pub reparam: Reparam,
    pub clip_eigs: bool,
    pub drop_rate: f64,
    pub ff_mult: f64,
    pub head: TaskHead,
    pub id_re_lambda: bool,
    pub id_im_lambda: bool,
    pub id_bc: bool,
    pub delta_mode: DeltaMode,
    pub normalize_heads: bool,
}

impl ModelConfig {
    pub fn classification(input_dim: usize, hidden: usize, classes: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden,
            layers: 1,
            encoder_depth: 0,
            lambda_depth: 0,
            bc_rank: 8,
            ssm_b: 1,
            ssm_mult: 16,
            bidir: false,
            disc: Discretization::Zoh,
            reparam: Reparam::Stable,
            clip_eigs: true,
            drop_rate: 0.0,
            ff_mult: 1.0,
            head: TaskHead::Classification { classes },
            id_re_lambda: true,
            id_im_lambda: false,
            id_bc: true,
            delta_mode: DeltaMode::Physical,
            normalize_heads: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.ssm_b == 0 || self.ssm_mult == 0 {
            return Err(Error::config("model extents must be at least 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::config(format!("drop_rate must be in [0, 1), got {}", self.drop_rate)));
        }
        match self.head {
            TaskHead::Classification { classes } if classes < 2 => {
                Err(Error::config("classification needs at least two classes".to_string()))
            }
            TaskHead::Regression { dim } if dim == 0 => {
                Err(Error::config("regression target dimension must be at least 1".to_string()))
            }
            _ => Ok(()),
        }
    }

    fn ssm_cfg(&self) -> SsmLayerConfig {
        SsmLayerConfig {
            hidden: self.hidden,
            ssm_b: self.ssm_b,
            ssm_mult: self.ssm_mult,
            bidir: self.bidir,
            disc: self.disc,
            reparam: self.reparam,
            clip_eigs: self.clip_eigs,
            id_re_lambda: self.id_re_lambda,
            id_im_lambda: self.id_im_lambda,
            id_bc: self.id_bc,
            delta_mode: self.delta_mode,
            bc_rank: self.bc_rank,
            lambda_depth: self.lambda_depth,
            normalize_heads: self.normalize_heads,
        }
    }
}

/// Trainable-scalar count implied by a configuration; the registry count
/// must agree with it exactly.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let (c, h) = (cfg.input_dim, cfg.hidden);
    let p = cfg.ssm_b * cfg.ssm_mult;
    let p_read = if cfg.bidir { 2 * p } else { p };
    let r = cfg.bc_rank;
    let inner = glu_inner_width(h, cfg.ff_mult);

    let encoder = cfg.encoder_depth * 2 * c * c + c * h + h;
    let lambda_head = cfg.lambda_depth * 2 * h * h + h * p;
    let mut block = 3 * p + 2 * p * h + 2 * h * p_read + h; // spectrum + biases + feedthrough
    if cfg.id_re_lambda {
        block += lambda_head;
    }
    if cfg.id_im_lambda {
        block += lambda_head;
    }
    if cfg.id_bc {
        block += h * r + r * 2 * p * h; // input projection head
        block += h * r + r * 2 * h * p_read; // output projection head
    }
    if cfg.delta_mode == DeltaMode::LearnedGate {
        block += (h + 1) * p + p;
    }
    block += 3 * h * inner; // gated feed-forward
    let head = match cfg.head {
        TaskHead::Classification { classes } => h * classes + classes,
        TaskHead::Regression { dim } => h * dim + dim,
    };
    encoder + cfg.layers * block + head
}

/// Training/evaluation switch; training carries the dropout stream.
pub enum Mode<'a> {
    Train { rng: &'a mut ChaCha8Rng },
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Inverted dropout: scales kept activations by 1/(1-rate) at train time so
/// evaluation is the identity.
fn dropout(graph: &mut Graph, x: NodeId, rate: f64, mode: &mut Mode) -> Result<NodeId> {
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train { .. } if rate == 0.0 => Ok(x),
        Mode::Train { rng } => {
            let shape = graph.tape.value(x).shape().to_vec();
            let keep = 1.0 - rate;
            let numel: usize = shape.iter().product();
            let mask: Vec<f64> = (0..numel)
                .map(|_| if rng.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = graph.constant(Tensor::from_vec(shape, mask).expect("mask shape"));
            graph.tape.mul(x, mask)
        }
    }
}

/// One residual block.
#[derive(Clone, Debug)]
pub struct TidesBlock {
    ssm: SsmLayer,
    glu: GluFeedForward,
    drop_rate: f64,
    hidden: usize,
}

impl TidesBlock {
    pub fn init(
        cfg: &ModelConfig,
        index: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let prefix = format!("block{index}");
        let ssm = SsmLayer::init(cfg.ssm_cfg(), &format!("{prefix}.ssm"), true, store, rng)?;
        let glu = GluFeedForward::init(cfg.hidden, cfg.ff_mult, &format!("{prefix}.ff"), store, rng);
        Ok(TidesBlock { ssm, glu, drop_rate: cfg.drop_rate, hidden: cfg.hidden })
    }

    pub fn ssm(&self) -> &SsmLayer {
        &self.ssm
    }

    /// `x` is `[batch*len, hidden]`; `deltas` one interval sequence per
    /// batch element. `trace` records sub-layer execution order.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        graph: &mut Graph,
        x: NodeId,
        batch: usize,
        len: usize,
        deltas: &[Vec<f64>],
        mode: &mut Mode,
        stats: &mut RunningStats,
        mut trace: Option<&mut Vec<&'static str>>,
    ) -> Result<NodeId> {
        let mut mark = |label: &'static str| {
            if let Some(t) = trace.as_deref_mut() {
                t.push(label);
            }
        };
        let normed = batchnorm_no_affine(graph, x, stats, mode.is_train())?;
        mark("batchnorm");

        let mut ssm_out: Option<NodeId> = None;
        for b in 0..batch {
            let xb = graph.tape.slice(normed, 0, b * len, len)?;
            let yb = self.ssm.forward(graph, xb, &deltas[b])?;
            ssm_out = Some(match ssm_out {
                None => yb,
                Some(acc) => graph.tape.concat(acc, yb, 0)?,
            });
        }
        let ssm_out = ssm_out.expect("at least one sequence");
        mark("ssm");

        let act = graph.tape.gelu(ssm_out);
        mark("gelu");
        let dropped = dropout(graph, act, self.drop_rate, mode)?;
        mark("dropout");
        let ff = self.glu.forward(graph, dropped)?;
        mark("glu");
        let dropped2 = dropout(graph, ff, self.drop_rate, mode)?;
        mark("dropout");
        let z = graph.tape.add(dropped2, x)?;
        mark("residual_add");
        Ok(z)
    }
}

/// Deep encoder: residual GLU blocks at the input width, then a linear map
/// into the model width.
#[derive(Clone, Debug)]
struct Encoder {
    blocks: Vec<(ParamId, ParamId)>,
    w_out: ParamId,
    bias: ParamId,
    in_dim: usize,
}

impl Encoder {
    fn init(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let c = cfg.input_dim;
        let std = 1.0 / (c as f64).sqrt();
        let blocks = (0..cfg.encoder_depth)
            .map(|k| {
                (
                    store.insert(format!("enc.glu{k}.w1"), Tensor::randn(rng, &[c, c], std), true),
                    store.insert(format!("enc.glu{k}.w2"), Tensor::randn(rng, &[c, c], std), true),
                )
            })
            .collect();
        Encoder {
            blocks,
            w_out: store.insert("enc.w_out", Tensor::randn(rng, &[c, cfg.hidden], std), true),
            bias: store.insert("enc.bias", Tensor::zeros(&[cfg.hidden]), true),
            in_dim: c,
        }
    }

    fn forward(&self, graph: &mut Graph, u: NodeId) -> Result<NodeId> {
        let shape = graph.tape.value(u).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::shape(
                "encoder",
                format!("expected [rows, {}], got {:?}", self.in_dim, shape),
            ));
        }
        let rows = shape[0];
        let mut x = u;
        for (w1, w2) in &self.blocks {
            let w1 = graph.param(*w1);
            let w2 = graph.param(*w2);
            let t = &mut graph.tape;
            let lin = t.matmul(x, w1)?;
            let gate_pre = t.matmul(x, w2)?;
            let gate = t.sigmoid(gate_pre);
            let prod = t.mul(lin, gate)?;
            x = t.add(x, prod)?;
        }
        let w = graph.param(self.w_out);
        let b = graph.param(self.bias);
        let t = &mut graph.tape;
        let proj = t.matmul(x, w)?;
        let b_rows = t.repeat_rows(b, rows)?;
        t.add(proj, b_rows)
    }
}

/// The assembled sequence model.
#[derive(Clone, Debug)]
pub struct TidesModel {
    cfg: ModelConfig,
    encoder: Encoder,
    blocks: Vec<TidesBlock>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Per-block running statistics, owned by the training run.
pub fn fresh_stats(model: &TidesModel) -> Vec<RunningStats> {
    model.blocks.iter().map(|_| RunningStats::new(model.cfg.hidden)).collect()
}

impl TidesModel {
    pub fn init(cfg: ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::init(&cfg, store, rng);
        let blocks = (0..cfg.layers)
            .map(|k| TidesBlock::init(&cfg, k, store, rng))
            .collect::<Result<Vec<_>>>()?;
        let out_dim = match cfg.head {
            TaskHead::Classification { classes } => classes,
            TaskHead::Regression { dim } => dim,
        };
        let std = 1.0 / (cfg.hidden as f64).sqrt();
        let head_w =
            store.insert("head.w", Tensor::randn(rng, &[cfg.hidden, out_dim], std), true);
        let head_b = store.insert("head.bias", Tensor::zeros(&[out_dim]), true);
        Ok(TidesModel { cfg, encoder, blocks, head_w, head_b })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[TidesBlock] {
        &self.blocks
    }

    /// `u` is the stacked batch `[batch*len, input_dim]`. Returns
    /// `[batch, classes]` logits for classification heads, or
    /// `[batch*len, dim]` for regression heads.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        graph: &mut Graph,
        u: NodeId,
        batch: usize,
        len: usize,
        deltas: &[Vec<f64>],
        mode: &mut Mode,
        stats: &mut [RunningStats],
        mut trace: Option<&mut Vec<&'static str>>,
    ) -> Result<NodeId> {
        let rows = graph.tape.value(u).shape()[0];
        if rows != batch * len || deltas.len() != batch {
            return Err(Error::shape(
                "model_forward",
                format!("{rows} rows for batch {batch} x len {len} ({} delta rows)", deltas.len()),
            ));
        }
        let mut x = self.encoder.forward(graph, u)?;
        for (block, st) in self.blocks.iter().zip(stats.iter_mut()) {
            x = block.forward(graph, x, batch, len, deltas, mode, st, trace.as_deref_mut())?;
        }
        let w = graph.param(self.head_w);
        let b = graph.param(self.head_b);
        match self.cfg.head {
            TaskHead::Classification { .. } => {
                // mean-pool each sequence over time, then project
                let mut pooled: Option<NodeId> = None;
                for s in 0..batch {
                    let t = &mut graph.tape;
                    let xs = t.slice(x, 0, s * len, len)?;
                    let mean = t.col_mean(xs)?;
                    let row = t.reshape(mean, &[1, self.cfg.hidden])?;
                    pooled = Some(match pooled {
                        None => row,
                        Some(acc) => t.concat(acc, row, 0)?,
                    });
                }
                let pooled = pooled.expect("at least one sequence");
                let t = &mut graph.tape;
                let logits = t.matmul(pooled, w)?;
                let b_rows = t.repeat_rows(b, batch)?;
                t.add(logits, b_rows)
            }
            TaskHead::Regression { .. } => {
                let t = &mut graph.tape;
                let out = t.matmul(x, w)?;
                let b_rows = t.repeat_rows(b, rows)?;
                t.add(out, b_rows)
            }
        }
    }
}

/// Stable softmax cross-entropy against integer labels; logits `[batch, k]`.
pub fn cross_entropy_loss(graph: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = graph.tape.value(logits).shape().to_vec();
    let (batch, k) = (shape[0], shape[1]);
    if labels.len() != batch {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for batch {batch}", labels.len()),
        ));
    }
    // per-row max as a constant shift: both the loss value and its gradient
    // are invariant to it, and it keeps exp() in range
    let shifts: Vec<f64> = (0..batch)
        .map(|i| {
            graph.tape.value(logits).data()[i * k..(i + 1) * k]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let t = &mut graph.tape;
    let shift_data: Vec<f64> = (0..batch * k).map(|i| shifts[i / k]).collect();
    let shift_mat = t.leaf(Tensor::from_vec(vec![batch, k], shift_data).expect("shift matrix"));
    let centered = t.sub(logits, shift_mat)?;
    let exp = t.exp(centered);
    let denom = t.row_sum(exp)?;
    let log_denom = t.log(denom);
    // gather the label logit per row
    let mut label_terms: Option<NodeId> = None;
    for (i, label) in labels.iter().enumerate() {
        if *label >= k {
            return Err(Error::domain(format!("label {label} out of range for {k} classes")));
        }
        let row = t.slice(centered, 0, i, 1)?;
        let cell = t.slice(row, 1, *label, 1)?;
        let flat = t.reshape(cell, &[1])?;
        label_terms = Some(match label_terms {
            None => flat,
            Some(acc) => t.concat(acc, flat, 0)?,
        });
    }
    let label_terms = label_terms.expect("nonempty batch");
    let nll = t.sub(log_denom, label_terms)?;
    Ok(t.mean(nll))
}
