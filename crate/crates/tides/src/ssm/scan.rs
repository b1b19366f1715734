//! Linear-recurrence evaluation: the associative combine, a parallel
//! (recursive-doubling) scan over plain values, the straight sequential loop
//! used as its oracle, and the tape-level scan used inside model forward
//! passes.
//!
//! The combine operator on (multiplicative, additive) pairs is
//!
//! ```text
//!   (a_i, b_i) (+) (a_j, b_j) = (a_j a_i, b_j + a_j b_i)
//! ```
//!
//! applied elementwise over the diagonal modes. An inclusive prefix combine
//! yields the states of x_k = a_k x_{k-1} + b_k with x_0 = 0: the state is
//! the additive component of the prefix.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use num_complex::Complex64;

/// One step of the discretized recurrence: `a` multiplies the carried state,
/// `b` is the injected input contribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanElement {
    pub a: Vec<Complex64>,
    pub b: Vec<Complex64>,
}

impl ScanElement {
    pub fn new(a: Vec<Complex64>, b: Vec<Complex64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::shape(
                "scan_element",
                format!("multiplicative part has {} modes, additive {}", a.len(), b.len()),
            ));
        }
        Ok(ScanElement { a, b })
    }

    pub fn identity(modes: usize) -> Self {
        ScanElement {
            a: vec![Complex64::new(1.0, 0.0); modes],
            b: vec![Complex64::new(0.0, 0.0); modes],
        }
    }
}

/// `(earlier) (+) (later)`, elementwise over modes.
pub fn scan_combine(earlier: &ScanElement, later: &ScanElement) -> Result<ScanElement> {
    if earlier.a.len() != later.a.len() {
        return Err(Error::shape(
            "scan_combine",
            format!("{} modes vs {}", earlier.a.len(), later.a.len()),
        ));
    }
    let a = later.a.iter().zip(&earlier.a).map(|(aj, ai)| aj * ai).collect();
    let b = later
        .b
        .iter()
        .zip(later.a.iter().zip(&earlier.b))
        .map(|(bj, (aj, bi))| bj + aj * bi)
        .collect();
    Ok(ScanElement { a, b })
}

/// Inclusive prefix combine by recursive doubling; log2(L) passes over the
/// sequence. Returns the state at every step.
pub fn parallel_scan(elements: &[ScanElement]) -> Result<Vec<Vec<Complex64>>> {
    if elements.is_empty() {
        return Err(Error::domain("parallel_scan requires at least one element"));
    }
    let modes = elements[0].a.len();
    for e in elements {
        if e.a.len() != modes {
            return Err(Error::shape("parallel_scan", "ragged mode counts".to_string()));
        }
    }
    let mut work = elements.to_vec();
    let len = work.len();
    let mut d = 1;
    while d < len {
        // descending order keeps reads at k-d untouched within a pass
        for k in (d..len).rev() {
            let combined = scan_combine(&work[k - d], &work[k])?;
            work[k] = combined;
        }
        d *= 2;
    }
    Ok(work.into_iter().map(|e| e.b).collect())
}

/// The straight sequential recurrence x_k = a_k x_{k-1} + b_k, used as the
/// independent oracle for the parallel scan.
pub fn sequential_scan(elements: &[ScanElement]) -> Result<Vec<Vec<Complex64>>> {
    if elements.is_empty() {
        return Err(Error::domain("sequential_scan requires at least one element"));
    }
    let modes = elements[0].a.len();
    let mut x = vec![Complex64::new(0.0, 0.0); modes];
    let mut out = Vec::with_capacity(elements.len());
    for e in elements {
        for p in 0..modes {
            x[p] = e.a[p] * x[p] + e.b[p];
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Tape-level inclusive scan over packed complex tensors `[2, L, P]`,
/// differentiable end to end. Identical recursion structure to
/// `parallel_scan`.
pub fn scan_on_tape(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    let shape = tape.value(a).shape().to_vec();
    if shape.len() != 3 || shape[0] != 2 {
        return Err(Error::shape("scan_on_tape", format!("expected [2, L, P], got {:?}", shape)));
    }
    if tape.value(b).shape() != shape.as_slice() {
        return Err(Error::shape(
            "scan_on_tape",
            format!("{:?} vs {:?}", shape, tape.value(b).shape()),
        ));
    }
    let len = shape[1];
    if len == 0 {
        return Err(Error::domain("scan_on_tape requires at least one step"));
    }
    let (mut a_cur, mut b_cur) = (a, b);
    let mut d = 1;
    while d < len {
        let a_lo = tape.slice(a_cur, 1, 0, len - d)?;
        let a_hi = tape.slice(a_cur, 1, d, len - d)?;
        let b_lo = tape.slice(b_cur, 1, 0, len - d)?;
        let b_hi = tape.slice(b_cur, 1, d, len - d)?;
        let a_new = tape.complex_mul(a_hi, a_lo)?;
        let carried = tape.complex_mul(a_hi, b_lo)?;
        let b_new = tape.add(b_hi, carried)?;
        let a_head = tape.slice(a_cur, 1, 0, d)?;
        let b_head = tape.slice(b_cur, 1, 0, d)?;
        a_cur = tape.concat(a_head, a_new, 1)?;
        b_cur = tape.concat(b_head, b_new, 1)?;
        d *= 2;
    }
    Ok(b_cur)
}
