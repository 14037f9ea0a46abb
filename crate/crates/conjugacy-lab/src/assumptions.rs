//! Hypothesis data for the contraction setting: the contraction
//! certificate, perturbation bounds with their window constants, the
//! Green-type operators as quadrature rules, the regularity-constants
//! calculator, nonuniform weighting, and the dichotomy spectrum of
//! constant matrices.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dynamics::{transition_matrix, TimeMatrixField};
use crate::error::{Error, Result};
use crate::numerics::{even_step_count, ols_line, rk4_sweep_mat, simpson_weight};

/// Constants (k, alpha) certifying `||U(t,s)|| <= k e^{-alpha (t-s)}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionCertificate {
    pub k: f64,
    pub alpha: f64,
}

impl ContractionCertificate {
    /// Requires `k >= 1` and `alpha > 0`.
    pub fn new(k: f64, alpha: f64) -> Result<Self> {
        if k >= 1.0 && alpha > 0.0 && k.is_finite() && alpha.is_finite() {
            Ok(Self { k, alpha })
        } else {
            Err(Error::Config(format!(
                "contraction certificate needs k >= 1 and alpha > 0, got k = {k}, alpha = {alpha}"
            )))
        }
    }

    /// The decay envelope `k e^{-alpha dt}`.
    pub fn envelope(&self, dt: f64) -> f64 {
        self.k * (-self.alpha * dt).exp()
    }

    /// Checks the envelope against sampled transition-matrix norms
    /// (Frobenius, a spectral-norm upper bound) for `t >= s` pairs.
    pub fn verify(&self, a: &TimeMatrixField, pairs: &[(f64, f64)], step: f64) -> Result<bool> {
        for &(t, s) in pairs {
            assert!(t >= s);
            let u = transition_matrix(a, t, s, step)?;
            if u.norm() > self.envelope(t - s) * (1.0 + 1e-6) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

type VecFieldFn = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// The perturbation f with its pointwise bound mu(t), pointwise Lipschitz
/// modulus r(t), unit-window aggregates C1, C2 and the Green-bound
/// supremum theta.
#[derive(Clone)]
pub struct PerturbationSpec {
    dim: usize,
    f: VecFieldFn,
    mu: TimeFn,
    r: TimeFn,
    pub c1: f64,
    pub c2: f64,
    pub theta: f64,
    linear: Option<TimeMatrixField>,
}

impl PerturbationSpec {
    pub fn new(
        dim: usize,
        f: impl Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        mu: impl Fn(f64) -> f64 + Send + Sync + 'static,
        r: impl Fn(f64) -> f64 + Send + Sync + 'static,
        c1: f64,
        c2: f64,
        theta: f64,
    ) -> Self {
        Self {
            dim,
            f: Arc::new(f),
            mu: Arc::new(mu),
            r: Arc::new(r),
            c1,
            c2,
            theta,
            linear: None,
        }
    }

    /// The zero perturbation (also linear-homogeneous with B = 0).
    pub fn zero(dim: usize) -> Self {
        let mut spec = Self::new(
            dim,
            move |_, x: &DVector<f64>| DVector::zeros(x.len()),
            |_| 0.0,
            |_| 0.0,
            0.0,
            0.0,
            0.0,
        );
        spec.linear = Some(TimeMatrixField::constant(DMatrix::zeros(dim, dim)));
        spec
    }

    /// A constant perturbation `f(t, x) = delta`.
    pub fn constant(delta: DVector<f64>) -> Self {
        let norm = delta.norm();
        let dim = delta.len();
        Self::new(
            dim,
            move |_, _: &DVector<f64>| delta.clone(),
            move |_| norm,
            |_| 0.0,
            norm,
            0.0,
            0.0,
        )
    }

    /// A linear-homogeneous perturbation `f(t, x) = B(t) x`. Such an f
    /// has no global pointwise bound, so C1 is infinite and theta is left
    /// for the caller to fix via [`with_constants`](Self::with_constants).
    pub fn linear(b: TimeMatrixField) -> Self {
        let dim = b.dim();
        let bound = b.bound();
        let b_eval = b.clone();
        let b_mod = b.clone();
        let mut spec = Self::new(
            dim,
            move |t, x: &DVector<f64>| &b_eval.at(t) * x,
            |_| f64::INFINITY,
            move |t| b_mod.at(t).norm(),
            f64::INFINITY,
            bound,
            f64::NAN,
        );
        spec.linear = Some(b);
        spec
    }

    pub fn with_constants(mut self, c1: f64, c2: f64, theta: f64) -> Self {
        self.c1 = c1;
        self.c2 = c2;
        self.theta = theta;
        self
    }

    pub fn f(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(t, x)
    }

    pub fn mu(&self, t: f64) -> f64 {
        (self.mu)(t)
    }

    pub fn r(&self, t: f64) -> f64 {
        (self.r)(t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `Some(B)` when the perturbation is linear-homogeneous.
    pub fn linear_part(&self) -> Option<&TimeMatrixField> {
        self.linear.as_ref()
    }
}

/// Quadrature value of a Green-type integral together with the analytic
/// bound on the truncated tail.
#[derive(Debug, Clone)]
pub struct GreenValue {
    pub value: DVector<f64>,
    pub tail_bound: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ScalarGreenValue {
    pub value: f64,
    pub tail_bound: f64,
}

/// Truncated Green integral `int_{t-window}^{t} U(t,s) phi(s) ds`,
/// approximated by composite Simpson on the substitution s = t - tau.
///
/// The discarded tail is bounded by `k sup||phi|| e^{-alpha window} / alpha`;
/// if that exceeds `tol` the call fails and names the required window.
pub fn green_operator(
    phi: &dyn Fn(f64) -> DVector<f64>,
    a: &TimeMatrixField,
    cert: &ContractionCertificate,
    t: f64,
    window: f64,
    step: f64,
    tol: f64,
) -> Result<GreenValue> {
    assert!(window > 0.0 && step > 0.0);
    let n = even_step_count(window, step);
    let h = window / n as f64;

    // W(tau) = U(t, t - tau) solves dW/dtau = W A(t - tau), W(0) = I.
    let dim = a.dim();
    let deriv = |tau: f64, w: &DMatrix<f64>| w * a.at(t - tau);
    let ws = rk4_sweep_mat(&deriv, 0.0, &DMatrix::identity(dim, dim), window, n)?;

    let mut sup_phi: f64 = 0.0;
    let mut acc = DVector::zeros(dim);
    for (i, w) in ws.iter().enumerate() {
        let tau = i as f64 * h;
        let p = phi(t - tau);
        sup_phi = sup_phi.max(p.norm());
        acc += w * p * simpson_weight(i, n);
    }
    acc *= h / 3.0;

    let tail = cert.k * sup_phi * (-cert.alpha * window).exp() / cert.alpha;
    if tail > tol {
        let required = (cert.k * sup_phi / (cert.alpha * tol)).ln() / cert.alpha;
        return Err(Error::TailTooLarge {
            window,
            tail,
            tol,
            required,
        });
    }
    Ok(GreenValue {
        value: acc,
        tail_bound: tail,
    })
}

/// Truncated scalar bound integral `L(b)(t) = int_{t-window}^{t}
/// e^{-alpha (t-s)} b(s) ds` with its tail bound.
pub fn scalar_green_bound(
    b: &dyn Fn(f64) -> f64,
    alpha: f64,
    t: f64,
    window: f64,
    step: f64,
    tol: f64,
) -> Result<ScalarGreenValue> {
    assert!(window > 0.0 && step > 0.0 && alpha > 0.0);
    let n = even_step_count(window, step);
    let h = window / n as f64;
    let mut sup_b: f64 = 0.0;
    let mut acc = 0.0;
    for i in 0..=n {
        let tau = i as f64 * h;
        let v = b(t - tau);
        sup_b = sup_b.max(v.abs());
        acc += (-alpha * tau).exp() * v * simpson_weight(i, n);
    }
    acc *= h / 3.0;
    let tail = sup_b * (-alpha * window).exp() / alpha;
    if tail > tol {
        let required = (sup_b / (alpha * tol)).ln() / alpha;
        return Err(Error::TailTooLarge {
            window,
            tail,
            tol,
            required,
        });
    }
    Ok(ScalarGreenValue {
        value: acc,
        tail_bound: tail,
    })
}

/// Reduced constant-bound checks for constant mu and r.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ReducedConstantsCheck {
    pub mu: f64,
    pub lipschitz: f64,
    pub bounded: bool,
    pub small_lipschitz: bool,
}

/// Which hypotheses hold on sampled data, with the computed theta.
#[derive(Debug, Clone, Serialize)]
pub struct AdmissibilityReport {
    pub a1_certificate_valid: bool,
    pub a2_pointwise_bound: bool,
    pub a3_lipschitz_bound: bool,
    pub a4_small_green_bound: bool,
    pub theta: f64,
    pub theta_limit: f64,
    pub reduced: Option<ReducedConstantsCheck>,
    pub admissible: bool,
}

impl AdmissibilityReport {
    /// Name of the first failing hypothesis, if any.
    pub fn first_failure(&self) -> Option<&'static str> {
        if !self.a1_certificate_valid {
            Some("A1")
        } else if !self.a2_pointwise_bound {
            Some("A2")
        } else if !self.a3_lipschitz_bound {
            Some("A3")
        } else if !self.a4_small_green_bound {
            Some("A4")
        } else {
            None
        }
    }
}

/// Samples the hypothesis set: pointwise bound, Lipschitz modulus, and
/// the Green bound `theta = sup L(r) < 1/k`. For constant mu and r the
/// reduced constant checks are reported as well.
pub fn check_admissibility(
    cert: &ContractionCertificate,
    pert: &PerturbationSpec,
) -> AdmissibilityReport {
    let dim = pert.dim();
    let ts: Vec<f64> = (0..=20).map(|i| -10.0 + i as f64).collect();

    // Axis-aligned sample states in [-2, 2].
    let mut states: Vec<DVector<f64>> = Vec::new();
    for j in 0..dim {
        for i in 0..=8 {
            let v = -2.0 + 0.5 * i as f64;
            let mut x = DVector::zeros(dim);
            x[j] = v;
            states.push(x);
        }
    }

    let mut a2 = pert.c1.is_finite() && pert.c1 >= 0.0;
    let mut a3 = pert.c2.is_finite() && pert.c2 >= 0.0;
    for &t in &ts {
        let mu = pert.mu(t);
        let r = pert.r(t);
        for x in &states {
            if pert.f(t, x).norm() > mu * (1.0 + 1e-9) + 1e-12 {
                a2 = false;
            }
        }
        for pair in states.windows(2) {
            let gap = (pert.f(t, &pair[0]) - pert.f(t, &pair[1])).norm();
            let sep = (&pair[0] - &pair[1]).norm();
            if gap > r * sep * (1.0 + 1e-9) + 1e-12 {
                a3 = false;
            }
        }
    }

    // theta = sup_t L(r)(t) over a sample grid, tail included.
    let window = 40.0 / cert.alpha;
    let r_fn = |s: f64| pert.r(s);
    let mut theta: f64 = 0.0;
    for i in 0..=10 {
        let t = -5.0 + i as f64;
        if let Ok(v) = scalar_green_bound(&r_fn, cert.alpha, t, window, 1e-2, f64::INFINITY) {
            theta = theta.max(v.value + v.tail_bound);
        } else {
            theta = f64::INFINITY;
        }
    }
    let theta_limit = 1.0 / cert.k;
    let a4 = theta < theta_limit;

    // Constant mu and r admit the reduced checks.
    let mu0 = pert.mu(0.0);
    let r0 = pert.r(0.0);
    let mu_const = ts.iter().all(|&t| (pert.mu(t) - mu0).abs() <= 1e-9 * (1.0 + mu0.abs()));
    let r_const = ts.iter().all(|&t| (pert.r(t) - r0).abs() <= 1e-9 * (1.0 + r0.abs()));
    let reduced = if mu_const && r_const {
        Some(ReducedConstantsCheck {
            mu: mu0,
            lipschitz: r0,
            bounded: mu0.is_finite(),
            small_lipschitz: r0 <= cert.alpha / cert.k,
        })
    } else {
        None
    };

    let a1 = cert.k >= 1.0 && cert.alpha > 0.0;
    AdmissibilityReport {
        a1_certificate_valid: a1,
        a2_pointwise_bound: a2,
        a3_lipschitz_bound: a3,
        a4_small_green_bound: a4,
        theta,
        theta_limit,
        reduced,
        admissible: a1 && a2 && a3 && a4,
    }
}

/// The derived regularity constants: Lipschitz constant of H, the Hölder
/// pair (p2, q) of G and the induction constant lambda.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegularityConstants {
    pub p1: f64,
    pub lambda: f64,
    pub q: f64,
    pub p2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegularityConstantsResult {
    Admissible(RegularityConstants),
    /// The constraint set for the Hölder exponent is empty.
    NoAdmissibleQ { p1: f64, lambda: f64 },
}

impl RegularityConstantsResult {
    pub fn admissible(&self) -> Option<&RegularityConstants> {
        match self {
            RegularityConstantsResult::Admissible(c) => Some(c),
            RegularityConstantsResult::NoAdmissibleQ { .. } => None,
        }
    }
}

/// Lipschitz constant of H: `(1 + k^2 C2 e^{k C2} - e^{-k C2}) / (1 - e^{-k C2})`,
/// with the unperturbed case C2 = 0 mapping to the identity (p1 = 1).
pub fn lipschitz_constant_h(k: f64, c2: f64) -> f64 {
    if c2 == 0.0 {
        return 1.0;
    }
    let u = k * c2;
    (1.0 + k * u * u.exp() - (-u).exp()) / (1.0 - (-u).exp())
}

/// The constraint system for (lambda, q): lambda above its lower bound,
/// q below alpha/(alpha+1), and the geometric-sum factor below 1/3.
pub fn lambda_lower_bound(cert: &ContractionCertificate, c1: f64, c2: f64) -> f64 {
    3.0 * cert.k * c1 / (1.0 - (-cert.alpha).exp()) + 1.5 * cert.k * cert.k * c2
}

fn geometric_sum_factor(cert: &ContractionCertificate, c2: f64, q: f64) -> f64 {
    c2 * cert.k.powf(q + 1.0) / ((cert.alpha * (1.0 - q)).exp() - 1.0)
}

/// Re-evaluates the three constraint inequalities at given constants.
/// The positivity clause of the third inequality is waived for C2 = 0.
pub fn constraints_hold(
    cert: &ContractionCertificate,
    c1: f64,
    c2: f64,
    consts: &RegularityConstants,
) -> [bool; 3] {
    let bound = lambda_lower_bound(cert, c1, c2);
    // The unperturbed limit degenerates to lambda >= 0.
    let first = consts.lambda > bound || (bound == 0.0 && consts.lambda >= 0.0);
    let second = consts.q > 0.0 && consts.q < cert.alpha / (cert.alpha + 1.0);
    let g = geometric_sum_factor(cert, c2, consts.q);
    let third = g < 1.0 / 3.0 && (c2 == 0.0 || g > 0.0);
    [first, second, third]
}

/// Computes (p1, lambda, q, p2): p1 from the closed-form Lipschitz bound,
/// lambda as 1.001x its lower bound, and q as the largest exponent in
/// (0, alpha/(alpha+1)) keeping the geometric-sum factor below 1/3
/// (found by bisection).
pub fn compute_regularity_constants(
    cert: &ContractionCertificate,
    c1: f64,
    c2: f64,
) -> RegularityConstantsResult {
    assert!(c1 >= 0.0 && c2 >= 0.0);
    let p1 = lipschitz_constant_h(cert.k, c2);
    let lambda = 1.001 * lambda_lower_bound(cert, c1, c2);
    let q_sup = cert.alpha / (cert.alpha + 1.0);

    let q = if c2 == 0.0 {
        // Unperturbed limit: every exponent is admissible, pick the midpoint.
        0.5 * q_sup
    } else {
        let hi_probe = q_sup * (1.0 - 1e-12);
        if geometric_sum_factor(cert, c2, 1e-12) >= 1.0 / 3.0 {
            return RegularityConstantsResult::NoAdmissibleQ { p1, lambda };
        }
        if geometric_sum_factor(cert, c2, hi_probe) < 1.0 / 3.0 {
            hi_probe
        } else {
            // The factor is increasing in q; bisect for the boundary.
            let mut lo = 1e-12;
            let mut hi = hi_probe;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if geometric_sum_factor(cert, c2, mid) < 1.0 / 3.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        }
    };

    RegularityConstantsResult::Admissible(RegularityConstants {
        p1,
        lambda,
        q,
        p2: 1.0 + lambda,
    })
}

/// Weighted perturbation bounds `mu~(t) = mu(t) e^{-eps |t|}` (and the
/// same for r), with the window constants and theta re-estimated.
pub fn nonuniform_weighting(pert: &PerturbationSpec, eps: f64) -> PerturbationSpec {
    assert!(eps >= 0.0);
    if eps == 0.0 {
        return pert.clone();
    }
    let mu0 = pert.clone();
    let r0 = pert.clone();
    let weighted_mu = move |t: f64| mu0.mu(t) * (-eps * t.abs()).exp();
    let weighted_r = move |t: f64| r0.r(t) * (-eps * t.abs()).exp();

    let c1 = sup_unit_window_integral(&weighted_mu, -50.0, 50.0);
    let c2 = sup_unit_window_integral(&weighted_r, -50.0, 50.0);
    let mut out = pert.clone();
    out.mu = Arc::new(weighted_mu.clone());
    out.r = Arc::new(weighted_r.clone());
    out.c1 = c1;
    out.c2 = c2;
    out.theta = if pert.theta.is_nan() {
        f64::NAN
    } else {
        // sup L(r~) over a sample grid; the weight only shrinks it.
        let mut theta: f64 = 0.0;
        for i in 0..=10 {
            let t = -5.0 + i as f64;
            if let Ok(v) = scalar_green_bound(&weighted_r, 1.0, t, 40.0, 1e-2, f64::INFINITY) {
                theta = theta.max(v.value + v.tail_bound);
            }
        }
        theta.min(pert.theta)
    };
    out
}

/// Max discrepancy of `L{e^{eps|.|} mu~(.)}(t)` against `L{mu(.)}(t)` at
/// the sample times; analytically the two are identical.
pub fn verify_weighting(
    original: &PerturbationSpec,
    weighted: &PerturbationSpec,
    eps: f64,
    alpha: f64,
    ts: &[f64],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &t in ts {
        let unweighted = |s: f64| original.mu(s);
        let reweighted = |s: f64| (eps * s.abs()).exp() * weighted.mu(s);
        let lhs = scalar_green_bound(&reweighted, alpha, t, 30.0, 1e-3, f64::INFINITY)?;
        let rhs = scalar_green_bound(&unweighted, alpha, t, 30.0, 1e-3, f64::INFINITY)?;
        worst = worst.max((lhs.value - rhs.value).abs());
    }
    Ok(worst)
}

/// Supremum of `int_t^{t+1} f` over unit windows anchored in `[lo, hi]`,
/// each window integrated by composite Simpson with step 1e-3.
fn sup_unit_window_integral(f: &(impl Fn(f64) -> f64 + ?Sized), lo: f64, hi: f64) -> f64 {
    let n = 1000;
    let h = 1.0 / n as f64;
    let mut sup: f64 = 0.0;
    let anchors = ((hi - lo) / 0.5) as usize;
    for j in 0..=anchors {
        let t = lo + 0.5 * j as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            acc += simpson_weight(i, n) * f(t + i as f64 * h);
        }
        sup = sup.max(acc * h / 3.0);
    }
    sup
}

/// The dichotomy spectrum of a constant matrix: a sorted, disjoint union
/// of (here degenerate) closed intervals, one per distinct eigenvalue
/// real part. `contraction` reports whether all real parts are negative.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumResult {
    pub intervals: Vec<(f64, f64)>,
    pub contraction: bool,
}

impl SpectrumResult {
    /// True when `gamma` lies outside every spectral interval.
    pub fn in_resolvent(&self, gamma: f64) -> bool {
        self.intervals.iter().all(|&(a, b)| gamma < a - 1e-9 || gamma > b + 1e-9)
    }
}

pub fn dichotomy_spectrum_constant(a: &DMatrix<f64>) -> Result<SpectrumResult> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let eigs = a.clone().complex_eigenvalues();
    let mut res: Vec<f64> = eigs.iter().map(|e| e.re).collect();
    res.sort_by(|x, y| x.partial_cmp(y).unwrap());

    let mut intervals: Vec<(f64, f64)> = Vec::new();
    for re in res {
        match intervals.last_mut() {
            Some(last) if re - last.1 <= 1e-8 => last.1 = last.1.max(re),
            _ => intervals.push((re, re)),
        }
    }
    let contraction = intervals.last().is_some_and(|&(_, b)| b < 0.0);
    Ok(SpectrumResult {
        intervals,
        contraction,
    })
}

/// Empirical fit of contraction constants: least-squares slope of
/// `log ||U(s + d, s)||` against d gives alpha; k is then raised until
/// the envelope dominates every sample.
pub fn estimate_contraction(
    a: &TimeMatrixField,
    horizon: f64,
    step: f64,
) -> Result<ContractionCertificate> {
    assert!(horizon > 0.0 && step > 0.0);
    let anchors = 16;
    let deltas = 8;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut samples = Vec::new();
    for i in 0..anchors {
        let s = i as f64 * horizon / (2.0 * anchors as f64);
        for j in 1..=deltas {
            let d = j as f64 * horizon / (2.0 * deltas as f64);
            let u = transition_matrix(a, s + d, s, step)?;
            let norm = u.norm();
            if !norm.is_finite() || norm <= 0.0 {
                return Err(Error::Numeric(format!(
                    "transition norm degenerate at (s, d) = ({s}, {d})"
                )));
            }
            xs.push(d);
            ys.push(norm.ln());
            samples.push((d, norm));
        }
    }
    let (slope, _, _) = ols_line(&xs, &ys);
    if slope >= -1e-6 {
        return Err(Error::NotContractive);
    }
    let alpha = -slope;
    let log_k = samples
        .iter()
        .map(|&(d, n)| n.ln() + alpha * d)
        .fold(0.0f64, f64::max);
    ContractionCertificate::new(log_k.exp().max(1.0), alpha)
}
