//! Straight-line LTI evaluation used as a cross-check oracle.
//!
//! This path never touches the tape or the parallel scan: it walks the
//! sequence with an explicit loop over plain complex values. A selective
//! layer whose projection weights are all zero must agree with it exactly.

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::ssm::discretize::{discretize, Discretization};
use crate::ssm::layer::SsmLayer;
use num_complex::Complex64;

#[derive(Clone, Debug)]
pub struct LtiSystem {
    /// Post-reparameterization (and post-clip) eigenvalues, length P.
    pub lambda: Vec<Complex64>,
    pub log_step: Vec<f64>,
    /// Input matrix, P x H row-major.
    pub b: Vec<Complex64>,
    /// Readout matrix, H_out x P' row-major (P' = 2P when bidirectional).
    pub c: Vec<Complex64>,
    /// Diagonal feedthrough, length H (empty disables the term).
    pub d_diag: Vec<f64>,
    pub hidden: usize,
    pub bidir: bool,
    pub disc: Discretization,
}

impl LtiSystem {
    /// Snapshot of a layer's bias parameters as a frozen LTI system.
    pub fn from_layer(layer: &SsmLayer, store: &ParamStore) -> Self {
        let cfg = layer.cfg();
        let (h, p) = (cfg.hidden, cfg.modes());
        let p_read = cfg.readout_modes();
        let theta = store.tensor(layer.theta_id());
        let im = store.tensor(layer.lambda_im_id());
        let mut lambda = Vec::with_capacity(p);
        for k in 0..p {
            let mut re = cfg.reparam.apply(theta.data()[k]);
            if cfg.clip_eigs {
                re = re.min(crate::ssm::spectrum::EIG_CLIP_FLOOR);
            }
            lambda.push(Complex64::new(re, im.data()[k]));
        }
        let b0 = store.tensor(layer.b0_id());
        let b = (0..p * h)
            .map(|i| Complex64::new(b0.data()[i], b0.data()[p * h + i]))
            .collect();
        let c0 = store.tensor(layer.c0_id());
        let c = (0..h * p_read)
            .map(|i| Complex64::new(c0.data()[i], c0.data()[h * p_read + i]))
            .collect();
        LtiSystem {
            lambda,
            log_step: store.tensor(layer.log_step_id()).data().to_vec(),
            b,
            c,
            d_diag: store.tensor(layer.d_id()).data().to_vec(),
            hidden: h,
            bidir: cfg.bidir,
            disc: cfg.disc,
        }
    }

    fn states(&self, u: &[Vec<f64>], deltas: &[f64]) -> Result<Vec<Vec<Complex64>>> {
        let p = self.lambda.len();
        let h = self.hidden;
        let mut x = vec![Complex64::new(0.0, 0.0); p];
        let mut out = Vec::with_capacity(u.len());
        for (uk, dk) in u.iter().zip(deltas) {
            let (a_bar, b_coef) = discretize(self.disc, &self.lambda, *dk, &self.log_step)?;
            for m in 0..p {
                let mut bu = Complex64::new(0.0, 0.0);
                for j in 0..h {
                    bu += self.b[m * h + j] * uk[j];
                }
                x[m] = a_bar[m] * x[m] + b_coef[m] * bu;
            }
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Sequential forward pass; `u` is L rows of H channels.
    pub fn forward(&self, u: &[Vec<f64>], deltas: &[f64]) -> Result<Vec<Vec<f64>>> {
        if u.len() != deltas.len() {
            return Err(Error::shape(
                "lti_forward",
                format!("{} inputs vs {} timesteps", u.len(), deltas.len()),
            ));
        }
        let p = self.lambda.len();
        let p_read = if self.bidir { 2 * p } else { p };
        let h_out = self.c.len() / p_read;
        let fwd = self.states(u, deltas)?;
        let states: Vec<Vec<Complex64>> = if self.bidir {
            let u_rev: Vec<Vec<f64>> = u.iter().rev().cloned().collect();
            let d_rev: Vec<f64> = deltas.iter().rev().copied().collect();
            let mut bwd = self.states(&u_rev, &d_rev)?;
            bwd.reverse();
            fwd.into_iter()
                .zip(bwd)
                .map(|(f, b)| f.into_iter().chain(b).collect())
                .collect()
        } else {
            fwd
        };
        let mut y = Vec::with_capacity(u.len());
        for (k, xk) in states.iter().enumerate() {
            let mut row = Vec::with_capacity(h_out);
            for o in 0..h_out {
                let mut acc = 0.0;
                for m in 0..p_read {
                    acc += (self.c[o * p_read + m] * xk[m]).re;
                }
                if !self.d_diag.is_empty() {
                    acc += self.d_diag[o] * u[k][o];
                }
                row.push(acc);
            }
            y.push(row);
        }
        Ok(y)
    }
}
