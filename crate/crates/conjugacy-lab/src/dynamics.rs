//! Non-autonomous ODE integration: nonlinear flows, linear transition
//! matrices and variational (Jacobian) flows.
//!
//! Everything is fixed-step classical RK4. The catalog perturbations are
//! only Lipschitz (kinks at 0 and +-1), so the formal order degrades
//! locally; the default step of 1e-3 keeps the local error well below the
//! per-scenario tolerances. Backward integration runs the time-reversed
//! field forward, see [`crate::numerics`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::conjugacy::ScenarioSystem;
use crate::error::{Error, Result};
use crate::numerics::{rk4_sweep_mat, rk4_sweep_vec, step_count};

pub use crate::numerics::OVERFLOW_THRESHOLD;

type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

/// A time-dependent n x n matrix field, e.g. the linear part A(t) or a
/// linear-homogeneous perturbation B(t).
#[derive(Clone)]
pub struct TimeMatrixField {
    eval: MatrixFn,
    dim: usize,
    bound: f64,
}

impl TimeMatrixField {
    /// `bound` must dominate the operator norm of the field over time.
    pub fn new(
        dim: usize,
        bound: f64,
        eval: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            eval: Arc::new(eval),
            dim,
            bound,
        }
    }

    /// Constant field; the bound is the Frobenius norm of the matrix.
    pub fn constant(m: DMatrix<f64>) -> Self {
        let dim = m.nrows();
        assert_eq!(dim, m.ncols(), "field matrices must be square");
        let bound = m.norm();
        Self::new(dim, bound, move |_| m.clone())
    }

    /// Constant scalar field (dimension 1).
    pub fn constant_scalar(a: f64) -> Self {
        Self::constant(DMatrix::from_element(1, 1, a))
    }

    /// Time-varying scalar field (dimension 1).
    pub fn scalar(bound: f64, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(1, bound, move |t| DMatrix::from_element(1, 1, f(t)))
    }

    pub fn at(&self, t: f64) -> DMatrix<f64> {
        let m = (self.eval)(t);
        debug_assert_eq!(m.nrows(), self.dim);
        debug_assert_eq!(m.ncols(), self.dim);
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Pointwise sum of two fields, with added bounds.
    pub fn sum(&self, other: &TimeMatrixField) -> TimeMatrixField {
        assert_eq!(self.dim, other.dim);
        let a = self.clone();
        let b = other.clone();
        TimeMatrixField::new(self.dim, self.bound + other.bound, move |t| {
            a.at(t) + b.at(t)
        })
    }
}

/// Transition-matrix evaluator U(t, s) of `y' = A(t) y`, backed by matrix
/// RK4 integration of its source field.
#[derive(Clone)]
pub struct TransitionMatrix {
    source: TimeMatrixField,
    step: f64,
}

impl TransitionMatrix {
    pub fn new(source: TimeMatrixField, step: f64) -> Self {
        assert!(step > 0.0);
        Self { source, step }
    }

    pub fn at(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        transition_matrix(&self.source, t, s, self.step)
    }

    pub fn source(&self) -> &TimeMatrixField {
        &self.source
    }
}

/// A sampled solution path. `times` are strictly increasing; for backward
/// runs the initial state therefore sits at the *last* node.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub initial: (f64, DVector<f64>),
    target_time: f64,
}

impl Trajectory {
    /// State at the integration target time t1.
    pub fn endpoint(&self) -> &DVector<f64> {
        if self.target_time >= self.initial.0 {
            self.states.last().expect("trajectory is never empty")
        } else {
            &self.states[0]
        }
    }

    pub fn target_time(&self) -> f64 {
        self.target_time
    }
}

/// Integrates `x' = A(t) x + f(t, x)` from `(t0, x0)` to `t1` (forward or
/// backward) with RK4 steps of at most `step`.
pub fn integrate_nonlinear(
    system: &ScenarioSystem,
    t0: f64,
    x0: &DVector<f64>,
    t1: f64,
    step: f64,
) -> Result<Trajectory> {
    assert!(step > 0.0, "step must be positive");
    let rhs = |t: f64, x: &DVector<f64>| system.rhs(t, x);
    let n = step_count(t1 - t0, step);
    let states = rk4_sweep_vec(&rhs, t0, x0, t1, n)?;
    let h = (t1 - t0) / n as f64;
    let mut times: Vec<f64> = (0..=n).map(|i| t0 + i as f64 * h).collect();
    let mut states = states;
    if t1 < t0 {
        times.reverse();
        states.reverse();
    }
    Ok(Trajectory {
        times,
        states,
        initial: (t0, x0.clone()),
        target_time: t1,
    })
}

/// Transition matrix U(t, s) of `y' = A(t) y`, by integrating the matrix
/// ODE `U' = A(t) U` from s to t with U(s) = I.
pub fn transition_matrix(a: &TimeMatrixField, t: f64, s: f64, step: f64) -> Result<DMatrix<f64>> {
    assert!(step > 0.0, "step must be positive");
    let dim = a.dim();
    let eye = DMatrix::identity(dim, dim);
    if t == s {
        return Ok(eye);
    }
    let deriv = |tau: f64, u: &DMatrix<f64>| a.at(tau) * u;
    let n = step_count(t - s, step);
    let states = rk4_sweep_mat(&deriv, s, &eye, t, n)?;
    Ok(states.into_iter().last().unwrap())
}

/// Jacobian of the nonlinear flow with respect to the initial state, for
/// scenarios whose perturbation is linear-homogeneous (`f(t,x) = B(t)x`).
/// The Jacobian solves `J' = (A(t) + B(t)) J`, independent of `xi`.
pub fn integrate_variational(
    system: &ScenarioSystem,
    t0: f64,
    xi: &DVector<f64>,
    t1: f64,
    step: f64,
) -> Result<DMatrix<f64>> {
    assert!(step > 0.0, "step must be positive");
    let b = system
        .pert
        .linear_part()
        .ok_or(Error::UnsupportedPerturbation)?;
    assert_eq!(xi.len(), system.dim(), "xi has the wrong dimension");
    let total = system.a.sum(b);
    transition_matrix(&total, t1, t0, step)
}

/// Euclidean distance of two flow endpoints started from `x0` and `x0bar`.
pub fn flow_difference(
    system: &ScenarioSystem,
    t0: f64,
    x0: &DVector<f64>,
    x0bar: &DVector<f64>,
    t1: f64,
    step: f64,
) -> Result<f64> {
    let a = integrate_nonlinear(system, t0, x0, t1, step)?;
    let b = integrate_nonlinear(system, t0, x0bar, t1, step)?;
    Ok((a.endpoint() - b.endpoint()).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assumptions::{ContractionCertificate, PerturbationSpec};
    use nalgebra::dvector;

    fn linear_scalar_system(a: f64) -> ScenarioSystem {
        ScenarioSystem::linear_only(
            TimeMatrixField::constant_scalar(a),
            ContractionCertificate::new(1.0, -a).unwrap(),
            "linear scalar",
        )
    }

    #[test]
    fn scalar_decay_endpoint() {
        let sys = linear_scalar_system(-1.0);
        let traj = integrate_nonlinear(&sys, 0.0, &dvector![1.0], 1.0, 1e-3).unwrap();
        assert!((traj.endpoint()[0] - 0.367879441).abs() < 1e-8);
    }

    #[test]
    fn example_11_forward_and_backward() {
        let sys = ScenarioSystem::example_11(0.1).unwrap();
        let fwd = integrate_nonlinear(&sys, 0.0, &dvector![1.0], 1.0, 1e-3).unwrap();
        assert!((fwd.endpoint()[0] - (-0.9f64).exp()).abs() < 1e-6);
        let bwd = integrate_nonlinear(&sys, 0.0, &dvector![1.0], -1.0, 1e-3).unwrap();
        let expected = 0.9 * 1.0f64.exp() + 0.1;
        assert!((bwd.endpoint()[0] - expected).abs() < 1e-6);
        assert!((expected - 2.546454).abs() < 1e-6);
        // Backward trajectories keep increasing times with the initial
        // state at the far end.
        assert!(bwd.times.windows(2).all(|w| w[1] > w[0]));
        assert!((bwd.states.last().unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transition_matrix_constant_scalar() {
        let a = TimeMatrixField::constant_scalar(-1.0);
        let u = transition_matrix(&a, 2.0, 0.0, 1e-3).unwrap();
        assert!((u[(0, 0)] - (-2.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn transition_matrix_diagonal() {
        let a = TimeMatrixField::constant(DMatrix::from_diagonal(&dvector![-1.0, -2.0]));
        let u = transition_matrix(&a, 1.0, 0.0, 1e-3).unwrap();
        assert!((u[(0, 0)] - (-1.0f64).exp()).abs() < 1e-8);
        assert!((u[(1, 1)] - (-2.0f64).exp()).abs() < 1e-8);
        assert!(u[(0, 1)].abs() < 1e-12);
        assert!(u[(1, 0)].abs() < 1e-12);
    }

    #[test]
    fn transition_matrix_time_varying() {
        // A(t) = -1 - cos t has antiderivative -t - sin t.
        let a = TimeMatrixField::scalar(2.0, |t| -1.0 - t.cos());
        let u = transition_matrix(&a, std::f64::consts::PI, 0.0, 1e-3).unwrap();
        assert!((u[(0, 0)] - (-std::f64::consts::PI).exp()).abs() < 1e-6);
    }

    #[test]
    fn transition_matrix_identity_at_equal_times() {
        let a = TimeMatrixField::constant(DMatrix::from_diagonal(&dvector![-1.0, -2.0]));
        let u = transition_matrix(&a, 3.0, 3.0, 1e-2).unwrap();
        assert!((u - DMatrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn variational_scalar_example() {
        let sys = ScenarioSystem::example_29(0.1).unwrap();
        let j = integrate_variational(&sys, 0.0, &dvector![1.0], 1.0, 1e-3).unwrap();
        assert!((j[(0, 0)] - (-0.9f64).exp()).abs() < 1e-6);
        // Equal to the Bellman bound k e^{(k delta - alpha) t} with
        // k = 1, delta = 0.1, alpha = 1.
        assert!((j[(0, 0)] - (0.1f64 - 1.0).exp()).abs() < 1e-6);
    }

    #[test]
    fn variational_without_perturbation_matches_transition() {
        let a = TimeMatrixField::constant(DMatrix::from_diagonal(&dvector![-1.0, -2.0]));
        let sys = ScenarioSystem {
            a: a.clone(),
            pert: PerturbationSpec::linear(TimeMatrixField::constant(DMatrix::zeros(2, 2))),
            cert: ContractionCertificate::new(1.0, 1.0).unwrap(),
            label: "diag".into(),
        };
        let j = integrate_variational(&sys, 0.0, &dvector![1.0, 1.0], 1.5, 1e-3).unwrap();
        let u = transition_matrix(&a, 1.5, 0.0, 1e-3).unwrap();
        assert!((j - u).norm() < 1e-10);
        let id = integrate_variational(&sys, 2.0, &dvector![0.0, 0.0], 2.0, 1e-3).unwrap();
        assert!((id - DMatrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn variational_rejects_nonlinear_perturbation() {
        let sys = ScenarioSystem::example_11(0.1).unwrap();
        let err = integrate_variational(&sys, 0.0, &dvector![1.0], 1.0, 1e-3).unwrap_err();
        assert!(matches!(err, Error::UnsupportedPerturbation));
    }

    #[test]
    fn variational_bound_over_horizon() {
        // |dX/dxi| <= k e^{(k delta - alpha) t} on [0, 10] for A = -1, B = eps.
        let sys = ScenarioSystem::example_29(0.1).unwrap();
        for i in 1..=20 {
            let t = i as f64 * 0.5;
            let j = integrate_variational(&sys, 0.0, &dvector![1.0], t, 1e-3).unwrap();
            let bound = ((0.1 - 1.0) * t).exp();
            assert!(j[(0, 0)].abs() <= bound * (1.0 + 1e-6), "t = {t}");
        }
    }

    #[test]
    fn flow_difference_cases() {
        let sys = ScenarioSystem::example_11(0.1).unwrap();
        let d0 = flow_difference(&sys, 0.0, &dvector![0.7], &dvector![0.7], 1.0, 1e-3).unwrap();
        assert_eq!(d0, 0.0);
        // Both initial points stay in (0, 1) where the flow is e^{(-1+eps)t}.
        let d = flow_difference(&sys, 0.0, &dvector![1.0], &dvector![0.5], 1.0, 1e-3).unwrap();
        assert!((d - 0.5 * (-0.9f64).exp()).abs() < 1e-5);
        assert!((0.5 * (-0.9f64).exp() - 0.203285).abs() < 1e-5);

        let lin = linear_scalar_system(-1.0);
        let d = flow_difference(&lin, 0.0, &dvector![1.0], &dvector![0.0], 2.0, 1e-3).unwrap();
        assert!((d - (-2.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn overflow_reports_diverged() {
        // The certificate is not consulted by the integrator, so a
        // placeholder one lets us probe an expanding field.
        let sys = ScenarioSystem::linear_only(
            TimeMatrixField::constant_scalar(1.0),
            ContractionCertificate::new(1.0, 1.0).unwrap(),
            "expanding scalar",
        );
        let err = integrate_nonlinear(&sys, 0.0, &dvector![1.0], 40.0, 1e-2).unwrap_err();
        assert!(matches!(err, Error::IntegrationDiverged { .. }));
    }

    #[test]
    fn solver_is_fourth_order() {
        // Halving the step on x' = -x shrinks the endpoint error by >= 12x.
        let sys = linear_scalar_system(-1.0);
        let exact = (-1.0f64).exp();
        let err_at = |step: f64| {
            let traj = integrate_nonlinear(&sys, 0.0, &dvector![1.0], 1.0, step).unwrap();
            (traj.endpoint()[0] - exact).abs()
        };
        let e1 = err_at(0.1);
        let e2 = err_at(0.05);
        assert!(e1 / e2 >= 12.0, "order ratio {}", e1 / e2);
    }

    #[test]
    fn nonlinear_flow_semigroup() {
        let sys = ScenarioSystem::example_11(0.1).unwrap();
        let x0 = dvector![1.7];
        let direct = integrate_nonlinear(&sys, 0.0, &x0, 3.0, 1e-3).unwrap();
        let mid = integrate_nonlinear(&sys, 0.0, &x0, 1.2, 1e-3).unwrap();
        let resumed = integrate_nonlinear(&sys, 1.2, mid.endpoint(), 3.0, 1e-3).unwrap();
        assert!((direct.endpoint() - resumed.endpoint()).norm() < 1e-6);
    }
}
