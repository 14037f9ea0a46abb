//! Numerical construction of the conjugacy pair: H through the truncated
//! Green integral along the backward nonlinear flow, G through Picard
//! iteration on the fixed-point integral equation, plus the residual
//! certifiers and Jacobian probes.

use nalgebra::{DMatrix, DVector};

use crate::assumptions::{ContractionCertificate, PerturbationSpec};
use crate::dynamics::{flow_difference, TimeMatrixField};
use crate::error::{Error, Result};
use crate::numerics::{even_step_count, rk4_sweep_mat, rk4_sweep_vec, simpson_weight, step_count};
use crate::oracles::{perturbation_11, Example11Params};

/// A linear part paired with an admissible perturbation and its
/// contraction certificate.
#[derive(Clone)]
pub struct ScenarioSystem {
    pub a: TimeMatrixField,
    pub pert: PerturbationSpec,
    pub cert: ContractionCertificate,
    pub label: String,
}

impl ScenarioSystem {
    pub fn linear_only(
        a: TimeMatrixField,
        cert: ContractionCertificate,
        label: impl Into<String>,
    ) -> Self {
        let dim = a.dim();
        Self {
            a,
            pert: PerturbationSpec::zero(dim),
            cert,
            label: label.into(),
        }
    }

    /// The saturated-linear/cubic counterexample scenario (`0 < eps < 1/3`):
    /// `x' = -x + f(x)` with f saturating at +-eps outside [-1, 1].
    pub fn example_11(eps: f64) -> Result<Self> {
        let p = Example11Params::new(eps)?;
        let eps = p.eps();
        let a = TimeMatrixField::constant_scalar(-1.0);
        let cert = ContractionCertificate::new(1.0, 1.0)?;
        let pert = PerturbationSpec::new(
            1,
            move |_, x: &DVector<f64>| DVector::from_element(1, perturbation_11(eps, x[0])),
            move |_| eps,
            move |_| 3.0 * eps,
            eps,
            3.0 * eps,
            3.0 * eps,
        );
        Ok(Self {
            a,
            pert,
            cert,
            label: format!("example-1.1 (eps = {eps})"),
        })
    }

    /// The linear-homogeneous perturbation scenario (`0 < eps < 1`):
    /// `x' = -x + eps x`. The perturbation has no global pointwise bound,
    /// so only the spectrum-based route applies to it.
    pub fn example_29(eps: f64) -> Result<Self> {
        if eps <= 0.0 || eps >= 1.0 {
            return Err(Error::Config(format!("eps must lie in (0, 1), got {eps}")));
        }
        let a = TimeMatrixField::constant_scalar(-1.0);
        let cert = ContractionCertificate::new(1.0, 1.0)?;
        let b = TimeMatrixField::constant_scalar(eps);
        let pert = PerturbationSpec::linear(b).with_constants(f64::INFINITY, eps, eps);
        Ok(Self {
            a,
            pert,
            cert,
            label: format!("example-2.9 (eps = {eps})"),
        })
    }

    /// The constant perturbation scenario: `x' = -x + delta`.
    pub fn example_211(delta: f64) -> Self {
        let a = TimeMatrixField::constant_scalar(-1.0);
        let cert = ContractionCertificate::new(1.0, 1.0).unwrap();
        let pert = PerturbationSpec::constant(DVector::from_element(1, delta));
        Self {
            a,
            pert,
            cert,
            label: format!("example-2.11 (delta = {delta})"),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    /// Right-hand side `A(t) x + f(t, x)` of the nonlinear equation.
    pub fn rhs(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        &self.a.at(t) * x + self.pert.f(t, x)
    }
}

/// Numerically evaluable H and G with truncation and iteration metadata.
#[derive(Clone)]
pub struct ConjugacyEvaluator {
    pub system: ScenarioSystem,
    /// Truncation T of the improper Green integrals.
    pub window: f64,
    pub step: f64,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    /// Analytic bound on the discarded integral tail.
    pub tail_bound: f64,
    /// True when the overflow cap, not the tolerance, fixed the window.
    pub window_capped: bool,
}

impl ConjugacyEvaluator {
    /// Picks the truncation window from the tail estimate
    /// `k C1 e^{-alpha T} / (1 - e^{-alpha}) <= tol / 2`, additionally
    /// capped so backward states of moderate norm stay far below the
    /// overflow threshold.
    pub fn new(system: ScenarioSystem, tol: f64, step: f64) -> Result<Self> {
        assert!(tol > 0.0 && step > 0.0);
        let k = system.cert.k;
        let alpha = system.cert.alpha;
        let c1 = system.pert.c1;
        let c2 = system.pert.c2;
        if !c1.is_finite() {
            return Err(Error::Config(
                "perturbation has no finite C1; supply an explicit window via with_window".into(),
            ));
        }
        let wanted = if c1 == 0.0 {
            1.0
        } else {
            ((2.0 * k * c1 / ((1.0 - (-alpha).exp()) * tol)).ln() / alpha).max(1.0)
        };
        // Backward flows grow at most like e^{(alpha + k C2) T}; keep a
        // reference state of norm 10 below the overflow threshold.
        let cap = (crate::numerics::OVERFLOW_THRESHOLD / 10.0).ln() / (alpha + k * c2);
        let window = wanted.min(cap);
        let tail_bound = if c1 == 0.0 {
            0.0
        } else {
            k * c1 * (-alpha * window).exp() / (1.0 - (-alpha).exp())
        };
        Ok(Self {
            system,
            window,
            step,
            picard_tol: 1e-8,
            picard_max_iter: 200,
            tail_bound,
            window_capped: window < wanted,
        })
    }

    pub fn with_window(mut self, window: f64) -> Self {
        assert!(window > 0.0);
        let k = self.system.cert.k;
        let alpha = self.system.cert.alpha;
        let c1 = self.system.pert.c1;
        self.window = window;
        self.tail_bound = if c1.is_finite() {
            k * c1 * (-alpha * window).exp() / (1.0 - (-alpha).exp())
        } else {
            f64::INFINITY
        };
        self
    }

    pub fn with_picard(mut self, tol: f64, max_iter: usize) -> Self {
        assert!(tol > 0.0 && max_iter > 0);
        self.picard_tol = tol;
        self.picard_max_iter = max_iter;
        self
    }

    fn grid(&self) -> (usize, f64) {
        let n = even_step_count(self.window, self.step);
        (n, self.window / n as f64)
    }

    /// `U(t, t - tau)` at every grid node, by one matrix sweep.
    fn backward_transition_nodes(&self, t: f64, n: usize) -> Result<Vec<DMatrix<f64>>> {
        let a = &self.system.a;
        let dim = a.dim();
        let deriv = |tau: f64, w: &DMatrix<f64>| w * a.at(t - tau);
        rk4_sweep_mat(&deriv, 0.0, &DMatrix::identity(dim, dim), self.window, n)
    }

    /// H(t, x) = x - int_{t-T}^{t} U(t, s) f(s, X(s, t, x)) ds, composite
    /// Simpson along the backward nonlinear flow.
    pub fn evaluate_h(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (n, h) = self.grid();
        let rhs = |s: f64, y: &DVector<f64>| self.system.rhs(s, y);
        let xs = rk4_sweep_vec(&rhs, t, x, t - self.window, n).map_err(|e| match e {
            Error::IntegrationDiverged { last_t, .. } => Error::WindowTooLarge {
                window: self.window,
                s: last_t,
            },
            other => other,
        })?;
        let us = self.backward_transition_nodes(t, n)?;
        let mut acc = DVector::zeros(self.system.dim());
        for i in 0..=n {
            let s = t - i as f64 * h;
            acc += &us[i] * self.system.pert.f(s, &xs[i]) * simpson_weight(i, n);
        }
        acc *= h / 3.0;
        Ok(x - acc)
    }

    /// Runs the Picard scheme for g at (t, y) and returns the full
    /// iteration record; [`evaluate_g`](Self::evaluate_g) is the plain
    /// value accessor.
    pub fn picard_g(&self, t: f64, y: &DVector<f64>) -> Result<PicardOutcome> {
        let theta = self.system.pert.theta;
        let k = self.system.cert.k;
        if theta.is_finite() && theta * k >= 1.0 {
            return Err(Error::Config(format!(
                "Picard iteration needs theta * k < 1, got {}",
                theta * k
            )));
        }
        let (n, h) = self.grid();
        let dim = self.system.dim();
        let a = &self.system.a;
        let pert = &self.system.pert;

        // Backward linear flow Y(s, t, y) at half-step resolution, so RK4
        // midpoints use exact values; ys[j] sits at s = t - j h / 2.
        let lin_rhs = |s: f64, v: &DVector<f64>| &a.at(s) * v;
        let ys = rk4_sweep_vec(&lin_rhs, t, y, t - self.window, 2 * n)?;
        let y_at = |i: usize| &ys[2 * (n - i)]; // forward node i
        let y_mid = |i: usize| &ys[2 * (n - i) - 1]; // between nodes i and i+1

        let zeros = DVector::<f64>::zeros(dim);
        let mut z: Vec<DVector<f64>> = vec![zeros.clone(); n + 1];
        let mut defects = Vec::new();
        let mut iterate_values = Vec::new();
        let t0 = t - self.window;

        for iteration in 1..=self.picard_max_iter {
            // One application of the integral operator, realized as the
            // forward linear inhomogeneous sweep w' = A w + f(s, Y + z)
            // with w(t - T) = 0; z is held fixed, linear between nodes.
            let mut w = zeros.clone();
            let mut znew: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
            znew.push(zeros.clone());
            for i in 0..n {
                let s = t0 + i as f64 * h;
                let zmid = (&z[i] + &z[i + 1]) * 0.5;
                let f0 = pert.f(s, &(y_at(i) + &z[i]));
                let fm = pert.f(s + 0.5 * h, &(y_mid(i) + &zmid));
                let f1 = pert.f(s + h, &(y_at(i + 1) + &z[i + 1]));
                let a0 = a.at(s);
                let am = a.at(s + 0.5 * h);
                let a1 = a.at(s + h);
                let k1 = &a0 * &w + &f0;
                let k2 = &am * &(&w + &k1 * (0.5 * h)) + &fm;
                let k3 = &am * &(&w + &k2 * (0.5 * h)) + &fm;
                let k4 = &a1 * &(&w + &k3 * h) + &f1;
                w += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                znew.push(w.clone());
            }
            let defect = z
                .iter()
                .zip(&znew)
                .map(|(old, new)| (old - new).norm())
                .fold(0.0f64, f64::max);
            z = znew;
            defects.push(defect);
            iterate_values.push(z[n].clone());
            if defect < self.picard_tol {
                let value = y + &z[n];
                return Ok(PicardOutcome {
                    value,
                    iterations: iteration,
                    final_defect: defect,
                    defects,
                    iterate_values,
                });
            }
        }
        Err(Error::NoConvergence {
            iterations: self.picard_max_iter,
            defect: *defects.last().unwrap(),
        })
    }

    /// G(t, y) = y + g(t, (t, y)) with g the Picard limit.
    pub fn evaluate_g(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.picard_g(t, y)?.value)
    }

    /// Sup over a time grid of `||H(t, X(t, tau, xi)) - U(t, tau) H(tau, xi)||`.
    /// The linear side is taken as `U(t, tau) H(tau, xi)` directly, which
    /// is the exact linear solution through `H(tau, xi)`.
    pub fn conjugation_residual(
        &self,
        tau: f64,
        xi: &DVector<f64>,
        horizon: f64,
    ) -> Result<ResidualReport> {
        assert!(horizon > 0.0);
        let grid_n = 25usize;
        let sub = step_count(horizon / grid_n as f64, self.step);
        let total = grid_n * sub;
        let rhs = |s: f64, y: &DVector<f64>| self.system.rhs(s, y);
        let xs = rk4_sweep_vec(&rhs, tau, xi, tau + horizon, total)?;
        let a = &self.system.a;
        let dim = self.system.dim();
        let deriv = |s: f64, u: &DMatrix<f64>| a.at(s) * u;
        let us = rk4_sweep_mat(&deriv, tau, &DMatrix::identity(dim, dim), tau + horizon, total)?;
        let h_tau = self.evaluate_h(tau, xi)?;

        let mut worst: f64 = 0.0;
        for j in 0..=grid_n {
            let idx = j * sub;
            let t = tau + horizon * j as f64 / grid_n as f64;
            let lhs = self.evaluate_h(t, &xs[idx])?;
            let rhs_lin = &us[idx] * &h_tau;
            worst = worst.max((lhs - rhs_lin).norm());
        }
        Ok(ResidualReport {
            conjugation: Some(worst),
            roundtrip: None,
            samples: format!(
                "{} nodes on [{tau}, {}], xi = {:?}",
                grid_n + 1,
                tau + horizon,
                xi.as_slice()
            ),
        })
    }

    /// Sup of `||G(t, H(t, x)) - x||` and `||H(t, G(t, y)) - y||` over the
    /// point set.
    pub fn roundtrip_residual(&self, t: f64, points: &[DVector<f64>]) -> Result<ResidualReport> {
        let mut worst: f64 = 0.0;
        for p in points {
            let hx = self.evaluate_h(t, p)?;
            let back = self.evaluate_g(t, &hx)?;
            worst = worst.max((back - p).norm());
            let gy = self.evaluate_g(t, p)?;
            let forth = self.evaluate_h(t, &gy)?;
            worst = worst.max((forth - p).norm());
        }
        Ok(ResidualReport {
            conjugation: None,
            roundtrip: Some(worst),
            samples: format!("{} base points at t = {t}", points.len()),
        })
    }

    /// Jacobian of H(t, .) by Richardson-extrapolated central differences.
    pub fn jacobian_h(&self, t: f64, x: &DVector<f64>, h_fd: f64) -> Result<DMatrix<f64>> {
        assert!(h_fd > 0.0);
        let dim = self.system.dim();
        let mut full = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            let col_h = self.central_column(t, x, j, h_fd)?;
            let col_2h = self.central_column(t, x, j, 2.0 * h_fd)?;
            let col = (col_h * 4.0 - col_2h) / 3.0;
            full.set_column(j, &col);
        }
        Ok(full)
    }

    fn central_column(&self, t: f64, x: &DVector<f64>, j: usize, h: f64) -> Result<DVector<f64>> {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        Ok((self.evaluate_h(t, &xp)? - self.evaluate_h(t, &xm)?) / (2.0 * h))
    }

    /// Jacobian of H for linear-homogeneous perturbations through the
    /// variational route: `I - int U(t,s) B(s) dX(s,t,xi)/dxi ds`. An
    /// independent cross-check of [`jacobian_h`](Self::jacobian_h).
    pub fn jacobian_h_variational(&self, t: f64) -> Result<DMatrix<f64>> {
        let b = self
            .system
            .pert
            .linear_part()
            .ok_or(Error::UnsupportedPerturbation)?
            .clone();
        let (n, h) = self.grid();
        let dim = self.system.dim();
        let total = self.system.a.sum(&b);
        // J(s) = dX(s, t, xi)/dxi solves J' = (A + B) J backward from J(t) = I.
        let deriv = |s: f64, j: &DMatrix<f64>| total.at(s) * j;
        let js = rk4_sweep_mat(&deriv, t, &DMatrix::identity(dim, dim), t - self.window, n)?;
        let us = self.backward_transition_nodes(t, n)?;
        let mut acc = DMatrix::zeros(dim, dim);
        for i in 0..=n {
            let s = t - i as f64 * h;
            acc += &us[i] * b.at(s) * &js[i] * simpson_weight(i, n);
        }
        acc *= h / 3.0;
        Ok(DMatrix::identity(dim, dim) - acc)
    }
}

/// One Picard run for g: its value, convergence record and per-iteration
/// values of g at the evaluation time.
#[derive(Debug, Clone)]
pub struct PicardOutcome {
    pub value: DVector<f64>,
    pub iterations: usize,
    pub final_defect: f64,
    pub defects: Vec<f64>,
    pub iterate_values: Vec<DVector<f64>>,
}

/// Residual measurements certifying the conjugation identity and the
/// homeomorphism round trip.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ResidualReport {
    pub conjugation: Option<f64>,
    pub roundtrip: Option<f64>,
    pub samples: String,
}

/// Outcome of comparing the flow difference against the Gronwall bound
/// `k e^{k C2} ||x0 - x0bar|| e^{(k C2 - alpha) |t - t0|}`.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct GronwallCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub pass: bool,
}

pub fn gronwall_check(
    system: &ScenarioSystem,
    t0: f64,
    x0: &DVector<f64>,
    x0bar: &DVector<f64>,
    t1: f64,
    step: f64,
) -> Result<GronwallCheck> {
    let lhs = flow_difference(system, t0, x0, x0bar, t1, step)?;
    let k = system.cert.k;
    let alpha = system.cert.alpha;
    let c2 = system.pert.c2;
    let rhs = k
        * (k * c2).exp()
        * (x0 - x0bar).norm()
        * ((k * c2 - alpha) * (t1 - t0).abs()).exp();
    Ok(GronwallCheck {
        lhs,
        rhs,
        margin: rhs - lhs,
        pass: lhs <= rhs * (1.0 + 1e-6) + 1e-12,
    })
}
