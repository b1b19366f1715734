//! Reverse-mode automatic differentiation via a recorded tape.
//!
//! Every primitive application appends a node holding the operation, its
//! operand node ids, and the forward value. The node list is topologically
//! ordered by construction, so `backward` is a single reverse sweep and
//! `replay` a single forward sweep. Complex arithmetic runs on paired real
//! channels (tensors of shape `[2, s...]`) through the `complex_*`
//! primitives.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;
/// Below this magnitude of `z`, `(e^z - 1)/z` switches to its Taylor series
/// to avoid catastrophic cancellation; both branches are accurate to ~1e-12
/// relative at the crossover.
const PHI1_SERIES_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar(f64),
    Scale(f64),
    Negate,
    Exp,
    Log,
    Reciprocal,
    Sqrt,
    Square,
    Sigmoid,
    Softplus,
    Gelu,
    Tanh,
    ClampMin(f64),
    ClampMax(f64),
    MatMul,
    Transpose2,
    SeqMatVec,
    Sum,
    Mean,
    RowSum,
    RowMean,
    ColSum,
    ColMean,
    Outer,
    RepeatRows(usize),
    ScaleRows,
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    Reshape(Vec<usize>),
    ReverseAxis(usize),
    Pack2,
    Unpack(usize),
    ComplexMul,
    ComplexExp,
    ComplexPhi1,
    ComplexRecip,
    ComplexScaleReal,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddScalar(_) => "add_scalar",
            Op::Scale(_) => "scale",
            Op::Negate => "negate",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Reciprocal => "reciprocal",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Gelu => "gelu",
            Op::Tanh => "tanh",
            Op::ClampMin(_) => "clamp_min",
            Op::ClampMax(_) => "clamp_max",
            Op::MatMul => "matmul",
            Op::Transpose2 => "transpose",
            Op::SeqMatVec => "seq_matvec",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::RowSum => "row_sum",
            Op::RowMean => "row_mean",
            Op::ColSum => "col_sum",
            Op::ColMean => "col_mean",
            Op::Outer => "outer",
            Op::RepeatRows(_) => "repeat_rows",
            Op::ScaleRows => "scale_rows",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::ReverseAxis(_) => "reverse_axis",
            Op::Pack2 => "pack2",
            Op::Unpack(_) => "unpack",
            Op::ComplexMul => "complex_mul",
            Op::ComplexExp => "complex_exp",
            Op::ComplexPhi1 => "complex_phi1",
            Op::ComplexRecip => "complex_reciprocal",
            Op::ComplexScaleReal => "complex_scale_real",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to tape nodes. Interior slots are
/// consumed during the reverse sweep; leaf slots survive. Leaves the loss
/// never touched read back as zeros.
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, tape: &Tape, id: NodeId) -> Tensor {
        match self.slots.get(id.0).and_then(|s| s.as_ref()) {
            Some(t) => t.clone(),
            None => Tensor::zeros(tape.value(id).shape()),
        }
    }
}

// ---------------------------------------------------------------------------
// stable scalar kernels
// ---------------------------------------------------------------------------

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// phi1(z) = (e^z - 1)/z for complex z given as (re, im), with a Taylor
/// series fallback near zero so the ZOH input matrix never divides by ~0.
pub(crate) fn phi1(re: f64, im: f64) -> (f64, f64) {
    if re.abs() + im.abs() < PHI1_SERIES_THRESHOLD {
        // 1 + z/2 + z^2/6 + z^3/24
        let (z2r, z2i) = (re * re - im * im, 2.0 * re * im);
        let (z3r, z3i) = (z2r * re - z2i * im, z2r * im + z2i * re);
        (1.0 + re / 2.0 + z2r / 6.0 + z3r / 24.0, im / 2.0 + z2i / 6.0 + z3i / 24.0)
    } else {
        // (e^z - 1) / z
        let er = re.exp();
        let (nr, ni) = (er * im.cos() - 1.0, er * im.sin());
        let d = re * re + im * im;
        ((nr * re + ni * im) / d, (ni * re - nr * im) / d)
    }
}

/// phi1'(z) = (e^z (z - 1) + 1) / z^2, with matching series fallback.
fn phi1_grad(re: f64, im: f64) -> (f64, f64) {
    if re.abs() + im.abs() < PHI1_SERIES_THRESHOLD {
        // 1/2 + z/3 + z^2/8 + z^3/30
        let (z2r, z2i) = (re * re - im * im, 2.0 * re * im);
        let (z3r, z3i) = (z2r * re - z2i * im, z2r * im + z2i * re);
        (0.5 + re / 3.0 + z2r / 8.0 + z3r / 30.0, im / 3.0 + z2i / 8.0 + z3i / 30.0)
    } else {
        let er = re.exp();
        let (cr, ci) = (er * im.cos(), er * im.sin());
        // e^z (z - 1) + 1
        let nr = cr * (re - 1.0) - ci * im + 1.0;
        let ni = cr * im + ci * (re - 1.0);
        // z^2
        let (dr, di) = (re * re - im * im, 2.0 * re * im);
        let d = dr * dr + di * di;
        ((nr * dr + ni * di) / d, (ni * dr - nr * di) / d)
    }
}

/// Split a shape at `axis` into (outer, axis_len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn dgemm_rm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// forward evaluation (shared by construction and replay)
// ---------------------------------------------------------------------------

fn eval(op: &Op, inputs: &[&Tensor]) -> Tensor {
    let unary = |f: &dyn Fn(f64) -> f64| {
        let a = inputs[0];
        Tensor::from_vec(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect()).unwrap()
    };
    let binary = |f: &dyn Fn(f64, f64) -> f64| {
        let (a, b) = (inputs[0], inputs[1]);
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(a.shape().to_vec(), data).unwrap()
    };
    match op {
        Op::Leaf => inputs[0].clone(),
        Op::Add => binary(&|x, y| x + y),
        Op::Sub => binary(&|x, y| x - y),
        Op::Mul => binary(&|x, y| x * y),
        Op::AddScalar(c) => unary(&|x| x + c),
        Op::Scale(c) => unary(&|x| x * c),
        Op::Negate => unary(&|x| -x),
        Op::Exp => unary(&f64::exp),
        Op::Log => unary(&f64::ln),
        Op::Reciprocal => unary(&|x| 1.0 / x),
        Op::Sqrt => unary(&f64::sqrt),
        Op::Square => unary(&|x| x * x),
        Op::Sigmoid => unary(&sigmoid),
        Op::Softplus => unary(&softplus),
        Op::Gelu => unary(&gelu),
        Op::Tanh => unary(&f64::tanh),
        Op::ClampMin(c) => unary(&|x| x.max(*c)),
        Op::ClampMax(c) => unary(&|x| x.min(*c)),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let mut out = Tensor::zeros(&[m, n]);
            dgemm_rm(m, k, n, a.data(), (k as isize, 1), b.data(), (n as isize, 1), 0.0, out.data_mut());
            out
        }
        Op::Transpose2 => {
            let a = inputs[0];
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::from_vec(vec![c, r], data).unwrap()
        }
        Op::SeqMatVec => {
            let (m, v) = (inputs[0], inputs[1]);
            let (l, p, h) = (m.shape()[0], m.shape()[1], m.shape()[2]);
            let mut out = Tensor::zeros(&[l, p]);
            let (md, vd, od) = (m.data(), v.data(), out.data_mut());
            for i in 0..l {
                let vk = &vd[i * h..(i + 1) * h];
                for j in 0..p {
                    let row = &md[(i * p + j) * h..(i * p + j + 1) * h];
                    od[i * p + j] = row.iter().zip(vk).map(|(a, b)| a * b).sum();
                }
            }
            out
        }
        Op::Sum => Tensor::scalar(inputs[0].data().iter().sum()),
        Op::Mean => {
            let a = inputs[0];
            Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)
        }
        Op::RowSum | Op::RowMean => {
            let a = inputs[0];
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let scale = if matches!(op, Op::RowMean) { 1.0 / c as f64 } else { 1.0 };
            let data = (0..r)
                .map(|i| a.data()[i * c..(i + 1) * c].iter().sum::<f64>() * scale)
                .collect();
            Tensor::from_vec(vec![r], data).unwrap()
        }
        Op::ColSum | Op::ColMean => {
            let a = inputs[0];
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let scale = if matches!(op, Op::ColMean) { 1.0 / r as f64 } else { 1.0 };
            let mut data = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    data[j] += a.data()[i * c + j];
                }
            }
            for v in &mut data {
                *v *= scale;
            }
            Tensor::from_vec(vec![c], data).unwrap()
        }
        Op::Outer => {
            let (u, v) = (inputs[0], inputs[1]);
            let (r, c) = (u.numel(), v.numel());
            let mut data = Vec::with_capacity(r * c);
            for &x in u.data() {
                for &y in v.data() {
                    data.push(x * y);
                }
            }
            Tensor::from_vec(vec![r, c], data).unwrap()
        }
        Op::RepeatRows(rows) => {
            let v = inputs[0];
            let c = v.numel();
            let mut data = Vec::with_capacity(rows * c);
            for _ in 0..*rows {
                data.extend_from_slice(v.data());
            }
            Tensor::from_vec(vec![*rows, c], data).unwrap()
        }
        Op::ScaleRows => {
            let (m, w) = (inputs[0], inputs[1]);
            let (r, c) = (m.shape()[0], m.shape()[1]);
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                let s = w.data()[i];
                data.extend(m.data()[i * c..(i + 1) * c].iter().map(|&x| x * s));
            }
            Tensor::from_vec(vec![r, c], data).unwrap()
        }
        Op::Concat(axis) => {
            let (a, b) = (inputs[0], inputs[1]);
            let (outer, la, inner) = axis_split(a.shape(), *axis);
            let lb = b.shape()[*axis];
            let mut shape = a.shape().to_vec();
            shape[*axis] = la + lb;
            let mut data = Vec::with_capacity(outer * (la + lb) * inner);
            for o in 0..outer {
                data.extend_from_slice(&a.data()[o * la * inner..(o + 1) * la * inner]);
                data.extend_from_slice(&b.data()[o * lb * inner..(o + 1) * lb * inner]);
            }
            Tensor::from_vec(shape, data).unwrap()
        }
        Op::Slice { axis, start, len } => {
            let a = inputs[0];
            let (outer, l, inner) = axis_split(a.shape(), *axis);
            let mut shape = a.shape().to_vec();
            shape[*axis] = *len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * l + start) * inner;
                data.extend_from_slice(&a.data()[base..base + len * inner]);
            }
            Tensor::from_vec(shape, data).unwrap()
        }
        Op::Reshape(shape) => Tensor::from_vec(shape.clone(), inputs[0].data().to_vec()).unwrap(),
        Op::ReverseAxis(axis) => {
            let a = inputs[0];
            let (outer, l, inner) = axis_split(a.shape(), *axis);
            let mut data = Vec::with_capacity(a.numel());
            for o in 0..outer {
                for j in (0..l).rev() {
                    let base = (o * l + j) * inner;
                    data.extend_from_slice(&a.data()[base..base + inner]);
                }
            }
            Tensor::from_vec(a.shape().to_vec(), data).unwrap()
        }
        Op::Pack2 => {
            let (a, b) = (inputs[0], inputs[1]);
            let mut shape = vec![2];
            shape.extend_from_slice(a.shape());
            let mut data = Vec::with_capacity(2 * a.numel());
            data.extend_from_slice(a.data());
            data.extend_from_slice(b.data());
            Tensor::from_vec(shape, data).unwrap()
        }
        Op::Unpack(ch) => {
            let a = inputs[0];
            let n = a.numel() / 2;
            let shape = a.shape()[1..].to_vec();
            Tensor::from_vec(shape, a.data()[ch * n..(ch + 1) * n].to_vec()).unwrap()
        }
        Op::ComplexMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let n = a.numel() / 2;
            let (ar, ai) = a.data().split_at(n);
            let (br, bi) = b.data().split_at(n);
            let mut data = vec![0.0; 2 * n];
            for i in 0..n {
                data[i] = ar[i] * br[i] - ai[i] * bi[i];
                data[n + i] = ar[i] * bi[i] + ai[i] * br[i];
            }
            Tensor::from_vec(a.shape().to_vec(), data).unwrap()
        }
        Op::ComplexExp => {
            let a = inputs[0];
            let n = a.numel() / 2;
            let (ar, ai) = a.data().split_at(n);
            let mut data = vec![0.0; 2 * n];
            for i in 0..n {
                let e = ar[i].exp();
                data[i] = e * ai[i].cos();
                data[n + i] = e * ai[i].sin();
            }
            Tensor::from_vec(a.shape().to_vec(), data).unwrap()
        }
        Op::ComplexPhi1 => {
            let a = inputs[0];
            let n = a.numel() / 2;
            let (ar, ai) = a.data().split_at(n);
            let mut data = vec![0.0; 2 * n];
            for i in 0..n {
                let (re, im) = phi1(ar[i], ai[i]);
                data[i] = re;
                data[n + i] = im;
            }
            Tensor::from_vec(a.shape().to_vec(), data).unwrap()
        }
        Op::ComplexRecip => {
            let a = inputs[0];
            let n = a.numel() / 2;
            let (ar, ai) = a.data().split_at(n);
            let mut data = vec![0.0; 2 * n];
            for i in 0..n {
                let d = ar[i] * ar[i] + ai[i] * ai[i];
                data[i] = ar[i] / d;
                data[n + i] = -ai[i] / d;
            }
            Tensor::from_vec(a.shape().to_vec(), data).unwrap()
        }
        Op::ComplexScaleReal => {
            let (a, r) = (inputs[0], inputs[1]);
            let n = a.numel() / 2;
            let (ar, ai) = a.data().split_at(n);
            let mut data = vec![0.0; 2 * n];
            for i in 0..n {
                data[i] = ar[i] * r.data()[i];
                data[n + i] = ai[i] * r.data()[i];
            }
            Tensor::from_vec(a.shape().to_vec(), data).unwrap()
        }
    }
}

// ---------------------------------------------------------------------------
// tape construction API
// ---------------------------------------------------------------------------

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    fn apply(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        let vals: Vec<&Tensor> = inputs.iter().map(|id| self.value(*id)).collect();
        let out = eval(&op, &vals);
        self.push(op, inputs, out)
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("operands have shapes {:?} and {:?}", sa, sb)));
        }
        Ok(())
    }

    fn check_rank(&self, op: &'static str, a: NodeId, rank: usize) -> Result<()> {
        let s = self.value(a).shape();
        if s.len() != rank {
            return Err(Error::shape(op, format!("expected rank {}, got shape {:?}", rank, s)));
        }
        Ok(())
    }

    fn check_complex(&self, op: &'static str, a: NodeId) -> Result<()> {
        let s = self.value(a).shape();
        if s.first() != Some(&2) {
            return Err(Error::shape(
                op,
                format!("expected paired-channel tensor [2, ...], got shape {:?}", s),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        Ok(self.apply(Op::Add, vec![a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        Ok(self.apply(Op::Sub, vec![a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        Ok(self.apply(Op::Mul, vec![a, b]))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.apply(Op::AddScalar(c), vec![a])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.apply(Op::Scale(c), vec![a])
    }

    pub fn negate(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::Negate, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::Exp, vec![a])
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::Log, vec![a])
    }

    pub fn reciprocal(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::Reciprocal, vec![a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::Sqrt, vec![a])
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::Square, vec![a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::Sigmoid, vec![a])
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::Softplus, vec![a])
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::Gelu, vec![a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::Tanh, vec![a])
    }

    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> NodeId {
        self.apply(Op::ClampMin(c), vec![a])
    }

    pub fn clamp_max(&mut self, a: NodeId, c: f64) -> NodeId {
        self.apply(Op::ClampMax(c), vec![a])
    }

    /// `[r, c] -> [c, r]`
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_rank("transpose", a, 2)?;
        Ok(self.apply(Op::Transpose2, vec![a]))
    }

    /// `[m, k] @ [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_rank("matmul", a, 2)?;
        self.check_rank("matmul", b, 2)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("inner dims of {:?} and {:?}", sa, sb)));
        }
        Ok(self.apply(Op::MatMul, vec![a, b]))
    }

    /// Per-row matrix-vector product: `[l, p, h] x [l, h] -> [l, p]`.
    pub fn seq_matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.check_rank("seq_matvec", m, 3)?;
        self.check_rank("seq_matvec", v, 2)?;
        let (sm, sv) = (self.value(m).shape(), self.value(v).shape());
        if sm[0] != sv[0] || sm[2] != sv[1] {
            return Err(Error::shape("seq_matvec", format!("operands {:?} and {:?}", sm, sv)));
        }
        Ok(self.apply(Op::SeqMatVec, vec![m, v]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.apply(Op::Mean, vec![a])
    }

    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_rank("row_sum", a, 2)?;
        Ok(self.apply(Op::RowSum, vec![a]))
    }

    pub fn row_mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_rank("row_mean", a, 2)?;
        Ok(self.apply(Op::RowMean, vec![a]))
    }

    pub fn col_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_rank("col_sum", a, 2)?;
        Ok(self.apply(Op::ColSum, vec![a]))
    }

    pub fn col_mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_rank("col_mean", a, 2)?;
        Ok(self.apply(Op::ColMean, vec![a]))
    }

    /// `[r] x [c] -> [r, c]`
    pub fn outer(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        self.check_rank("outer", u, 1)?;
        self.check_rank("outer", v, 1)?;
        Ok(self.apply(Op::Outer, vec![u, v]))
    }

    /// `[c] -> [rows, c]`
    pub fn repeat_rows(&mut self, v: NodeId, rows: usize) -> Result<NodeId> {
        self.check_rank("repeat_rows", v, 1)?;
        Ok(self.apply(Op::RepeatRows(rows), vec![v]))
    }

    /// `[r, c] x [r] -> [r, c]`, scaling row i by w[i].
    pub fn scale_rows(&mut self, m: NodeId, w: NodeId) -> Result<NodeId> {
        self.check_rank("scale_rows", m, 2)?;
        self.check_rank("scale_rows", w, 1)?;
        if self.value(m).shape()[0] != self.value(w).numel() {
            return Err(Error::shape(
                "scale_rows",
                format!("{:?} rows vs weight {:?}", self.value(m).shape(), self.value(w).shape()),
            ));
        }
        Ok(self.apply(Op::ScaleRows, vec![m, w]))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let conformable = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !conformable {
            return Err(Error::shape(
                "concat",
                format!("shapes {:?} and {:?} along axis {}", sa, sb, axis),
            ));
        }
        Ok(self.apply(Op::Concat(axis), vec![a, b]))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.value(a).shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {}..{} on axis {} of {:?}", start, start + len, axis, s),
            ));
        }
        Ok(self.apply(Op::Slice { axis, start, len }, vec![a]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.value(a).shape(), shape),
            ));
        }
        Ok(self.apply(Op::Reshape(shape.to_vec()), vec![a]))
    }

    pub fn reverse_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        if axis >= self.value(a).shape().len() {
            return Err(Error::shape(
                "reverse_axis",
                format!("axis {} of {:?}", axis, self.value(a).shape()),
            ));
        }
        Ok(self.apply(Op::ReverseAxis(axis), vec![a]))
    }

    /// Pair two equal-shape real tensors into `[2, s...]` channels.
    pub fn pack2(&mut self, re: NodeId, im: NodeId) -> Result<NodeId> {
        self.check_same_shape("pack2", re, im)?;
        Ok(self.apply(Op::Pack2, vec![re, im]))
    }

    /// Extract channel 0 (real) or 1 (imaginary) from `[2, s...]`.
    pub fn unpack(&mut self, a: NodeId, channel: usize) -> Result<NodeId> {
        self.check_complex("unpack", a)?;
        if channel > 1 {
            return Err(Error::shape("unpack", format!("channel {} out of range", channel)));
        }
        Ok(self.apply(Op::Unpack(channel), vec![a]))
    }

    pub fn complex_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_complex("complex_mul", a)?;
        self.check_complex("complex_mul", b)?;
        self.check_same_shape("complex_mul", a, b)?;
        Ok(self.apply(Op::ComplexMul, vec![a, b]))
    }

    pub fn complex_exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_complex("complex_exp", a)?;
        Ok(self.apply(Op::ComplexExp, vec![a]))
    }

    /// Elementwise `(e^z - 1)/z` on paired channels; series fallback near 0.
    pub fn complex_phi1(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_complex("complex_phi1", a)?;
        Ok(self.apply(Op::ComplexPhi1, vec![a]))
    }

    pub fn complex_reciprocal(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_complex("complex_reciprocal", a)?;
        Ok(self.apply(Op::ComplexRecip, vec![a]))
    }

    /// Scale both channels of `[2, s...]` by a real tensor of shape `s`.
    pub fn complex_scale_real(&mut self, a: NodeId, r: NodeId) -> Result<NodeId> {
        self.check_complex("complex_scale_real", a)?;
        if self.value(a).shape()[1..] != *self.value(r).shape() {
            return Err(Error::shape(
                "complex_scale_real",
                format!("{:?} vs real {:?}", self.value(a).shape(), self.value(r).shape()),
            ));
        }
        Ok(self.apply(Op::ComplexScaleReal, vec![a, r]))
    }

    /// Recompute every node from the leaves in recorded order. Returns the
    /// recomputed values; bit-identical to the stored ones by construction.
    pub fn replay(&self) -> Vec<Tensor> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = if matches!(node.op, Op::Leaf) {
                node.value.clone()
            } else {
                let ins: Vec<&Tensor> = node.inputs.iter().map(|id| &values[id.0]).collect();
                eval(&node.op, &ins)
            };
            values.push(v);
        }
        values
    }
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

fn accum<'a>(slots: &'a mut [Option<Tensor>], shape: &[usize], id: NodeId) -> &'a mut Tensor {
    slots[id.0].get_or_insert_with(|| Tensor::zeros(shape))
}

impl Tape {
    /// Gradient of a scalar `loss` with respect to every node that feeds it.
    /// Leaf slots survive in the returned map; leaves the loss never touched
    /// read back as zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::graph(format!("node {} is not on this tape", loss.0)));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::graph(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            self.backprop_node(i, &g, &mut slots);
        }
        Ok(Gradients { slots })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, slots: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let in_val = |j: usize| self.value(ins[j]);
        let in_shape = |j: usize| self.value(ins[j]).shape().to_vec();
        let gd = g.data();

        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add => {
                for j in 0..2 {
                    accum(slots, &in_shape(j), ins[j]).add_assign(g);
                }
            }
            Op::Sub => {
                accum(slots, &in_shape(0), ins[0]).add_assign(g);
                let d = accum(slots, &in_shape(1), ins[1]);
                for (s, &x) in d.data_mut().iter_mut().zip(gd) {
                    *s -= x;
                }
            }
            Op::Mul => {
                for (j, k) in [(0, 1), (1, 0)] {
                    let other = in_val(k).data().to_vec();
                    let d = accum(slots, &in_shape(j), ins[j]);
                    for ((s, &x), &o) in d.data_mut().iter_mut().zip(gd).zip(&other) {
                        *s += x * o;
                    }
                }
            }
            Op::AddScalar(_) => accum(slots, &in_shape(0), ins[0]).add_assign(g),
            Op::Scale(c) => {
                let d = accum(slots, &in_shape(0), ins[0]);
                for (s, &x) in d.data_mut().iter_mut().zip(gd) {
                    *s += c * x;
                }
            }
            Op::Negate => {
                let d = accum(slots, &in_shape(0), ins[0]);
                for (s, &x) in d.data_mut().iter_mut().zip(gd) {
                    *s -= x;
                }
            }
            Op::Exp | Op::Sigmoid | Op::Tanh | Op::Sqrt => {
                let out = node.value.data().to_vec();
                let op = node.op.clone();
                let d = accum(slots, &in_shape(0), ins[0]);
                for ((s, &x), &o) in d.data_mut().iter_mut().zip(gd).zip(&out) {
                    *s += x * match op {
                        Op::Exp => o,
                        Op::Sigmoid => o * (1.0 - o),
                        Op::Tanh => 1.0 - o * o,
                        Op::Sqrt => 0.5 / o,
                        _ => unreachable!(),
                    };
                }
            }
            Op::Log | Op::Reciprocal | Op::Square | Op::Softplus | Op::Gelu => {
                let a = in_val(0).data().to_vec();
                let op = node.op.clone();
                let d = accum(slots, &in_shape(0), ins[0]);
                for ((s, &x), &v) in d.data_mut().iter_mut().zip(gd).zip(&a) {
                    *s += x * match op {
                        Op::Log => 1.0 / v,
                        Op::Reciprocal => -1.0 / (v * v),
                        Op::Square => 2.0 * v,
                        Op::Softplus => sigmoid(v),
                        Op::Gelu => gelu_grad(v),
                        _ => unreachable!(),
                    };
                }
            }
            Op::ClampMin(c) => {
                let a = in_val(0).data().to_vec();
                let c = *c;
                let d = accum(slots, &in_shape(0), ins[0]);
                for ((s, &x), &v) in d.data_mut().iter_mut().zip(gd).zip(&a) {
                    if v >= c {
                        *s += x;
                    }
                }
            }
            Op::ClampMax(c) => {
                let a = in_val(0).data().to_vec();
                let c = *c;
                let d = accum(slots, &in_shape(0), ins[0]);
                for ((s, &x), &v) in d.data_mut().iter_mut().zip(gd).zip(&a) {
                    if v <= c {
                        *s += x;
                    }
                }
            }
            Op::MatMul => {
                let (a, b) = (in_val(0), in_val(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let (a_data, b_data) = (a.data().to_vec(), b.data().to_vec());
                // d_a += g @ b^T
                let da = accum(slots, &[m, k], ins[0]);
                dgemm_rm(m, n, k, gd, (n as isize, 1), &b_data, (1, n as isize), 1.0, da.data_mut());
                // d_b += a^T @ g
                let db = accum(slots, &[k, n], ins[1]);
                dgemm_rm(k, m, n, &a_data, (1, k as isize), gd, (n as isize, 1), 1.0, db.data_mut());
            }
            Op::Transpose2 => {
                let s0 = in_shape(0);
                let (r, c) = (s0[0], s0[1]);
                let d = accum(slots, &s0, ins[0]);
                let dd = d.data_mut();
                for i in 0..r {
                    for j in 0..c {
                        dd[i * c + j] += gd[j * r + i];
                    }
                }
            }
            Op::SeqMatVec => {
                let (mv, vv) = (in_val(0).data().to_vec(), in_val(1).data().to_vec());
                let ms = in_shape(0);
                let (l, p, h) = (ms[0], ms[1], ms[2]);
                {
                    let dm = accum(slots, &ms, ins[0]);
                    let dmd = dm.data_mut();
                    for i in 0..l {
                        for j in 0..p {
                            let gx = gd[i * p + j];
                            let row = &mut dmd[(i * p + j) * h..(i * p + j + 1) * h];
                            for (s, &v) in row.iter_mut().zip(&vv[i * h..(i + 1) * h]) {
                                *s += gx * v;
                            }
                        }
                    }
                }
                let dv = accum(slots, &in_shape(1), ins[1]);
                let dvd = dv.data_mut();
                for i in 0..l {
                    for j in 0..p {
                        let gx = gd[i * p + j];
                        let row = &mv[(i * p + j) * h..(i * p + j + 1) * h];
                        for (s, &mval) in dvd[i * h..(i + 1) * h].iter_mut().zip(row) {
                            *s += gx * mval;
                        }
                    }
                }
            }
            Op::Sum | Op::Mean => {
                let n = in_val(0).numel() as f64;
                let c = if matches!(node.op, Op::Mean) { gd[0] / n } else { gd[0] };
                let d = accum(slots, &in_shape(0), ins[0]);
                for s in d.data_mut() {
                    *s += c;
                }
            }
            Op::RowSum | Op::RowMean => {
                let s0 = in_shape(0);
                let (r, c) = (s0[0], s0[1]);
                let scale = if matches!(node.op, Op::RowMean) { 1.0 / c as f64 } else { 1.0 };
                let d = accum(slots, &s0, ins[0]);
                let dd = d.data_mut();
                for i in 0..r {
                    let gx = gd[i] * scale;
                    for s in &mut dd[i * c..(i + 1) * c] {
                        *s += gx;
                    }
                }
            }
            Op::ColSum | Op::ColMean => {
                let s0 = in_shape(0);
                let (r, c) = (s0[0], s0[1]);
                let scale = if matches!(node.op, Op::ColMean) { 1.0 / r as f64 } else { 1.0 };
                let d = accum(slots, &s0, ins[0]);
                let dd = d.data_mut();
                for i in 0..r {
                    for j in 0..c {
                        dd[i * c + j] += gd[j] * scale;
                    }
                }
            }
            Op::Outer => {
                let (uv, vv) = (in_val(0).data().to_vec(), in_val(1).data().to_vec());
                let (r, c) = (uv.len(), vv.len());
                {
                    let du = accum(slots, &in_shape(0), ins[0]);
                    for (i, s) in du.data_mut().iter_mut().enumerate() {
                        *s += (0..c).map(|j| gd[i * c + j] * vv[j]).sum::<f64>();
                    }
                }
                let dv = accum(slots, &in_shape(1), ins[1]);
                for (j, s) in dv.data_mut().iter_mut().enumerate() {
                    *s += (0..r).map(|i| gd[i * c + j] * uv[i]).sum::<f64>();
                }
            }
            Op::RepeatRows(rows) => {
                let s0 = in_shape(0);
                let c = s0[0];
                let d = accum(slots, &s0, ins[0]);
                let dd = d.data_mut();
                for i in 0..*rows {
                    for j in 0..c {
                        dd[j] += gd[i * c + j];
                    }
                }
            }
            Op::ScaleRows => {
                let (mv, wv) = (in_val(0).data().to_vec(), in_val(1).data().to_vec());
                let s0 = in_shape(0);
                let (r, c) = (s0[0], s0[1]);
                {
                    let dm = accum(slots, &s0, ins[0]);
                    let dd = dm.data_mut();
                    for i in 0..r {
                        for j in 0..c {
                            dd[i * c + j] += gd[i * c + j] * wv[i];
                        }
                    }
                }
                let dw = accum(slots, &in_shape(1), ins[1]);
                for (i, s) in dw.data_mut().iter_mut().enumerate() {
                    *s += (0..c).map(|j| gd[i * c + j] * mv[i * c + j]).sum::<f64>();
                }
            }
            Op::Concat(axis) => {
                let (sa, sb) = (in_shape(0), in_shape(1));
                let (outer, la, inner) = axis_split(&sa, *axis);
                let lb = sb[*axis];
                let stride = (la + lb) * inner;
                {
                    let da = accum(slots, &sa, ins[0]);
                    let dd = da.data_mut();
                    for o in 0..outer {
                        for x in 0..la * inner {
                            dd[o * la * inner + x] += gd[o * stride + x];
                        }
                    }
                }
                let db = accum(slots, &sb, ins[1]);
                let dd = db.data_mut();
                for o in 0..outer {
                    for x in 0..lb * inner {
                        dd[o * lb * inner + x] += gd[o * stride + la * inner + x];
                    }
                }
            }
            Op::Slice { axis, start, len } => {
                let s0 = in_shape(0);
                let (outer, l, inner) = axis_split(&s0, *axis);
                let d = accum(slots, &s0, ins[0]);
                let dd = d.data_mut();
                for o in 0..outer {
                    let base = (o * l + start) * inner;
                    for x in 0..len * inner {
                        dd[base + x] += gd[o * len * inner + x];
                    }
                }
            }
            Op::Reshape(_) => {
                let d = accum(slots, &in_shape(0), ins[0]);
                for (s, &x) in d.data_mut().iter_mut().zip(gd) {
                    *s += x;
                }
            }
            Op::ReverseAxis(axis) => {
                let s0 = in_shape(0);
                let (outer, l, inner) = axis_split(&s0, *axis);
                let d = accum(slots, &s0, ins[0]);
                let dd = d.data_mut();
                for o in 0..outer {
                    for j in 0..l {
                        let src = (o * l + (l - 1 - j)) * inner;
                        let dst = (o * l + j) * inner;
                        for x in 0..inner {
                            dd[dst + x] += gd[src + x];
                        }
                    }
                }
            }
            Op::Pack2 => {
                let n = gd.len() / 2;
                for (j, half) in [(0usize, &gd[..n]), (1, &gd[n..])] {
                    let d = accum(slots, &in_shape(j), ins[j]);
                    for (s, &x) in d.data_mut().iter_mut().zip(half) {
                        *s += x;
                    }
                }
            }
            Op::Unpack(ch) => {
                let s0 = in_shape(0);
                let n = gd.len();
                let d = accum(slots, &s0, ins[0]);
                for (s, &x) in d.data_mut()[ch * n..(ch + 1) * n].iter_mut().zip(gd) {
                    *s += x;
                }
            }
            Op::ComplexMul => {
                let n = gd.len() / 2;
                let (gr, gi) = gd.split_at(n);
                for (j, k) in [(0usize, 1usize), (1, 0)] {
                    let other = in_val(k).data().to_vec();
                    let (br, bi) = other.split_at(n);
                    let d = accum(slots, &in_shape(j), ins[j]);
                    let dd = d.data_mut();
                    for i in 0..n {
                        dd[i] += gr[i] * br[i] + gi[i] * bi[i];
                        dd[n + i] += -gr[i] * bi[i] + gi[i] * br[i];
                    }
                }
            }
            Op::ComplexExp | Op::ComplexPhi1 | Op::ComplexRecip => {
                // Holomorphic pullback: with w = f'(z),
                //   d_re = g_re*Re(w) + g_im*Im(w),  d_im = -g_re*Im(w) + g_im*Re(w).
                let n = gd.len() / 2;
                let (gr, gi) = gd.split_at(n);
                let a = in_val(0).data().to_vec();
                let out = node.value.data().to_vec();
                let op = node.op.clone();
                let d = accum(slots, &in_shape(0), ins[0]);
                let dd = d.data_mut();
                for i in 0..n {
                    let (wr, wi) = match op {
                        Op::ComplexExp => (out[i], out[n + i]),
                        Op::ComplexPhi1 => phi1_grad(a[i], a[n + i]),
                        Op::ComplexRecip => {
                            // f' = -1/z^2 = -(out)^2
                            let (or, oi) = (out[i], out[n + i]);
                            (-(or * or - oi * oi), -2.0 * or * oi)
                        }
                        _ => unreachable!(),
                    };
                    dd[i] += gr[i] * wr + gi[i] * wi;
                    dd[n + i] += -gr[i] * wi + gi[i] * wr;
                }
            }
            Op::ComplexScaleReal => {
                let n = gd.len() / 2;
                let (gr, gi) = gd.split_at(n);
                let a = in_val(0).data().to_vec();
                let rv = in_val(1).data().to_vec();
                {
                    let da = accum(slots, &in_shape(0), ins[0]);
                    let dd = da.data_mut();
                    for i in 0..n {
                        dd[i] += gr[i] * rv[i];
                        dd[n + i] += gi[i] * rv[i];
                    }
                }
                let dr = accum(slots, &in_shape(1), ins[1]);
                let dd = dr.data_mut();
                let (ar, ai) = a.split_at(n);
                for i in 0..n {
                    dd[i] += gr[i] * ar[i] + gi[i] * ai[i];
                }
            }
        }
    }
}
