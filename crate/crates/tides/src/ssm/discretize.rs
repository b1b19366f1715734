//! Discretization of the continuous diagonal system over one interval.
//!
//! Zero-order hold (exact under piecewise-constant input):
//!
//! ```text
//!   a_bar_p = exp(lambda_p d_p)
//!   b_bar_p = lambda_p^{-1} (a_bar_p - 1) B_p = d_p phi1(lambda_p d_p) B_p
//! ```
//!
//! Bilinear (Tustin):
//!
//! ```text
//!   a_bar_p = (1 + lambda_p d_p / 2) / (1 - lambda_p d_p / 2)
//!   b_bar_p = d_p / (1 - lambda_p d_p / 2) B_p
//! ```
//!
//! where `d_p = exp(log_step_p) * delta` is the per-mode effective step:
//! the physical interval scaled by the mode's learned timescale. The
//! `phi1` form of the ZOH input factor switches to a series near zero, so
//! modes with tiny `lambda * d` never divide by ~0.

use crate::autodiff::phi1;
use crate::error::{Error, Result};
use num_complex::Complex64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Discretization {
    Zoh,
    Bilinear,
}

impl Discretization {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zoh" => Ok(Discretization::Zoh),
            "bilinear" => Ok(Discretization::Bilinear),
            other => Err(Error::config(format!("unknown discretization `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Discretization::Zoh => "zoh",
            Discretization::Bilinear => "bilinear",
        }
    }
}

/// Guard radius around the bilinear pole 1 - lambda*d/2 = 0.
pub const BILINEAR_POLE_EPS: f64 = 1e-12;

fn effective_steps(lambda: &[Complex64], delta: f64, log_step: &[f64]) -> Result<Vec<f64>> {
    if delta <= 0.0 {
        return Err(Error::domain(format!("discretization step must be positive, got {delta}")));
    }
    if lambda.len() != log_step.len() {
        return Err(Error::shape(
            "discretize",
            format!("{} modes vs {} timescales", lambda.len(), log_step.len()),
        ));
    }
    Ok(log_step.iter().map(|l| l.exp() * delta).collect())
}

/// ZOH transition and input factors for each mode: returns `(a_bar, b_coef)`
/// where the discrete input matrix row is `b_coef_p * B_p`.
pub fn discretize_zoh(
    lambda: &[Complex64],
    delta: f64,
    log_step: &[f64],
) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    let steps = effective_steps(lambda, delta, log_step)?;
    let mut a_bar = Vec::with_capacity(lambda.len());
    let mut b_coef = Vec::with_capacity(lambda.len());
    for (l, d) in lambda.iter().zip(&steps) {
        let z = l * d;
        a_bar.push(z.exp());
        let (pr, pi) = phi1(z.re, z.im);
        b_coef.push(Complex64::new(pr, pi) * d);
    }
    Ok((a_bar, b_coef))
}

/// Bilinear (Tustin) transition and input factors. Fails loudly if any mode
/// sits within `BILINEAR_POLE_EPS` of the pole.
pub fn discretize_bilinear(
    lambda: &[Complex64],
    delta: f64,
    log_step: &[f64],
) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    let steps = effective_steps(lambda, delta, log_step)?;
    let mut a_bar = Vec::with_capacity(lambda.len());
    let mut b_coef = Vec::with_capacity(lambda.len());
    for (p, (l, d)) in lambda.iter().zip(&steps).enumerate() {
        let half = l * (d / 2.0);
        let denom = Complex64::new(1.0, 0.0) - half;
        if denom.norm() < BILINEAR_POLE_EPS {
            return Err(Error::domain(format!(
                "bilinear discretization pole at mode {p}: 1 - lambda*step/2 = {denom}"
            )));
        }
        a_bar.push((Complex64::new(1.0, 0.0) + half) / denom);
        b_coef.push(Complex64::new(*d, 0.0) / denom);
    }
    Ok((a_bar, b_coef))
}

pub fn discretize(
    disc: Discretization,
    lambda: &[Complex64],
    delta: f64,
    log_step: &[f64],
) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    match disc {
        Discretization::Zoh => discretize_zoh(lambda, delta, log_step),
        Discretization::Bilinear => discretize_bilinear(lambda, delta, log_step),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// Unit timescale: log_step = 0 so the effective step equals delta.
    fn unit_steps(n: usize) -> Vec<f64> {
        vec![0.0; n]
    }

    #[test]
    fn zoh_closed_form_at_lambda_minus_one() {
        let (a, b) = discretize_zoh(&[c(-1.0, 0.0)], 1.0, &unit_steps(1)).unwrap();
        assert!((a[0].re - 0.36787944117144233).abs() < 1e-11);
        assert!((b[0].re - 0.6321205588285577).abs() < 1e-11);
        assert!(a[0].im.abs() < 1e-15 && b[0].im.abs() < 1e-15);
    }

    #[test]
    fn zoh_series_limit_as_lambda_vanishes() {
        let (a, b) = discretize_zoh(&[c(-1e-15, 0.0)], 0.7, &unit_steps(1)).unwrap();
        assert!((a[0].re - 1.0).abs() < 1e-12);
        assert!((b[0].re - 0.7).abs() < 1e-12);
    }

    #[test]
    fn zoh_transition_satisfies_the_semigroup_property() {
        let mut rng = substream(2, "semigroup");
        for _ in 0..100 {
            let l = c(rng.gen_range(-3.0..-0.01), rng.gen_range(-4.0..4.0));
            let (d1, d2) = (rng.gen_range(0.01..2.0), rng.gen_range(0.01..2.0));
            let (a1, _) = discretize_zoh(&[l], d1, &unit_steps(1)).unwrap();
            let (a2, _) = discretize_zoh(&[l], d2, &unit_steps(1)).unwrap();
            let (a12, _) = discretize_zoh(&[l], d1 + d2, &unit_steps(1)).unwrap();
            assert!((a1[0] * a2[0] - a12[0]).norm() < 1e-12);
        }
    }

    #[test]
    fn zoh_recursion_matches_the_analytic_ode_solution() {
        // scalar ODE x' = l x + B u, u piecewise constant; the analytic
        // solution at sample times is x(t+d) = e^{l d} x(t) + (e^{l d}-1) B u / l
        let mut rng = substream(7, "ode");
        for _ in 0..100 {
            let l = c(rng.gen_range(-2.5..-0.05), 0.0);
            let b_in = rng.gen_range(-2.0..2.0);
            let deltas: Vec<f64> = (0..20).map(|_| rng.gen_range(0.05..1.5)).collect();
            let inputs: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut x_disc = Complex64::new(0.0, 0.0);
            let mut x_exact = Complex64::new(0.0, 0.0);
            for (d, u) in deltas.iter().zip(&inputs) {
                let (a, bc) = discretize_zoh(&[l], *d, &unit_steps(1)).unwrap();
                x_disc = a[0] * x_disc + bc[0] * b_in * *u;
                let e = (l * *d).exp();
                x_exact = e * x_exact + (e - 1.0) * b_in * *u / l;
                assert!((x_disc - x_exact).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn bilinear_hand_evaluation_at_lambda_minus_one() {
        let (a, b) = discretize_bilinear(&[c(-1.0, 0.0)], 1.0, &unit_steps(1)).unwrap();
        assert!((a[0].re - 1.0 / 3.0).abs() < 1e-14);
        assert!((b[0].re - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn bilinear_limit_agrees_with_zoh_as_lambda_vanishes() {
        let (a, b) = discretize_bilinear(&[c(-1e-14, 0.0)], 0.7, &unit_steps(1)).unwrap();
        assert!((a[0].re - 1.0).abs() < 1e-12);
        assert!((b[0].re - 0.7).abs() < 1e-12);
    }

    #[test]
    fn bilinear_maps_the_stable_half_plane_into_the_unit_disk() {
        let mut rng = substream(4, "bilinear-disk");
        for _ in 0..200 {
            let l = c(rng.gen_range(-5.0..-0.001), rng.gen_range(-8.0..8.0));
            let d = rng.gen_range(0.001..4.0);
            let (a, _) = discretize_bilinear(&[l], d, &unit_steps(1)).unwrap();
            assert!(a[0].norm() < 1.0);
        }
    }

    #[test]
    fn bilinear_pole_is_reported_with_the_offending_mode() {
        // lambda*d/2 = 1 exactly: pole
        let err = discretize_bilinear(&[c(-1.0, 0.0), c(2.0, 0.0)], 1.0, &unit_steps(2));
        let msg = err.unwrap_err().to_string();
        assert!(msg.contains("mode 1"), "{msg}");
    }

    #[test]
    fn nonpositive_delta_is_rejected() {
        assert!(discretize_zoh(&[c(-1.0, 0.0)], 0.0, &unit_steps(1)).is_err());
        assert!(discretize_zoh(&[c(-1.0, 0.0)], -0.3, &unit_steps(1)).is_err());
    }

    #[test]
    fn stable_modes_stay_inside_the_unit_disk_under_zoh() {
        let mut rng = substream(6, "zoh-disk");
        for _ in 0..200 {
            let l = c(rng.gen_range(-5.0..-0.001), rng.gen_range(-8.0..8.0));
            let d = rng.gen_range(0.001..4.0);
            let (a, _) = discretize_zoh(&[l], d, &unit_steps(1)).unwrap();
            assert!(a[0].norm() <= 1.0);
        }
    }

    #[test]
    fn log_step_scales_the_physical_interval_per_mode() {
        let lambda = [c(-1.0, 0.0), c(-1.0, 0.0)];
        let log_step = [0.5f64.ln(), 2.0f64.ln()];
        let (a, _) = discretize_zoh(&lambda, 1.0, &log_step).unwrap();
        assert!((a[0].re - (-0.5f64).exp()).abs() < 1e-14);
        assert!((a[1].re - (-2.0f64).exp()).abs() < 1e-14);
    }
}
