//! Shared low-level numerics: fixed-step RK4 sweeps, composite Simpson
//! weights and a least-squares line fit.
//!
//! Backward integration is realized as forward integration of the
//! time-reversed field, so there is a single stepping code path.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Any state component above this magnitude aborts the sweep.
pub const OVERFLOW_THRESHOLD: f64 = 1e12;

/// Number of RK4 steps needed to cover `span` with steps of at most `step`.
pub(crate) fn step_count(span: f64, step: f64) -> usize {
    ((span.abs() / step).ceil() as usize).max(1)
}

/// Like [`step_count`] but rounded up to an even count (composite Simpson
/// needs an even number of intervals).
pub(crate) fn even_step_count(span: f64, step: f64) -> usize {
    let n = step_count(span, step);
    if n.is_multiple_of(2) {
        n
    } else {
        n + 1
    }
}

fn finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite() && x.abs() <= OVERFLOW_THRESHOLD)
}

fn finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite() && x.abs() <= OVERFLOW_THRESHOLD)
}

/// Classical RK4 sweep for vector states.
///
/// Integrates `y' = f(t, y)` from `t0` to `t1` in exactly `n` equal steps
/// and returns the states at every node, in integration order (node `i`
/// sits at `t0 + i * (t1 - t0) / n`). `t1 < t0` integrates the reversed
/// field forward.
pub(crate) fn rk4_sweep_vec<F>(
    f: &F,
    t0: f64,
    y0: &DVector<f64>,
    t1: f64,
    n: usize,
) -> Result<Vec<DVector<f64>>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(vec![y0.clone()]);
    }
    let sign = span.signum();
    let len = span.abs();
    let h = len / n as f64;
    // Reversed field: u(tau) = y(t0 + sign*tau), u' = sign * f(t0 + sign*tau, u).
    let g = |tau: f64, y: &DVector<f64>| f(t0 + sign * tau, y) * sign;

    let mut states = Vec::with_capacity(n + 1);
    states.push(y0.clone());
    let mut y = y0.clone();
    for i in 0..n {
        let tau = i as f64 * h;
        let k1 = g(tau, &y);
        let k2 = g(tau + 0.5 * h, &(&y + &k1 * (0.5 * h)));
        let k3 = g(tau + 0.5 * h, &(&y + &k2 * (0.5 * h)));
        let k4 = g(tau + h, &(&y + &k3 * h));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !finite_vec(&y) {
            return Err(Error::IntegrationDiverged {
                last_t: t0 + sign * tau,
                threshold: OVERFLOW_THRESHOLD,
            });
        }
        states.push(y.clone());
    }
    Ok(states)
}

/// RK4 sweep for matrix states; see [`rk4_sweep_vec`].
pub(crate) fn rk4_sweep_mat<F>(
    f: &F,
    t0: f64,
    m0: &DMatrix<f64>,
    t1: f64,
    n: usize,
) -> Result<Vec<DMatrix<f64>>>
where
    F: Fn(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(vec![m0.clone()]);
    }
    let sign = span.signum();
    let len = span.abs();
    let h = len / n as f64;
    let g = |tau: f64, m: &DMatrix<f64>| f(t0 + sign * tau, m) * sign;

    let mut states = Vec::with_capacity(n + 1);
    states.push(m0.clone());
    let mut m = m0.clone();
    for i in 0..n {
        let tau = i as f64 * h;
        let k1 = g(tau, &m);
        let k2 = g(tau + 0.5 * h, &(&m + &k1 * (0.5 * h)));
        let k3 = g(tau + 0.5 * h, &(&m + &k2 * (0.5 * h)));
        let k4 = g(tau + h, &(&m + &k3 * h));
        m += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !finite_mat(&m) {
            return Err(Error::IntegrationDiverged {
                last_t: t0 + sign * tau,
                threshold: OVERFLOW_THRESHOLD,
            });
        }
        states.push(m.clone());
    }
    Ok(states)
}

/// Composite Simpson weight for node `i` of `n + 1` nodes (`n` even).
/// The quadrature value is `h / 3 * sum(w_i * f_i)`.
pub(crate) fn simpson_weight(i: usize, n: usize) -> f64 {
    debug_assert!(n.is_multiple_of(2) && n >= 2);
    if i == 0 || i == n {
        1.0
    } else if i % 2 == 1 {
        4.0
    } else {
        2.0
    }
}

/// Ordinary least squares line `y = slope * x + intercept` with the
/// coefficient of determination of the fit.
pub(crate) fn ols_line(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn rk4_matches_exponential() {
        let f = |_t: f64, y: &DVector<f64>| -y;
        let states = rk4_sweep_vec(&f, 0.0, &dvector![1.0], 1.0, 1000).unwrap();
        let end = states.last().unwrap()[0];
        assert!((end - (-1.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn rk4_backward_recovers_growth() {
        // x' = -x integrated backward from x(0) = 1 to t = -1 gives e.
        let f = |_t: f64, y: &DVector<f64>| -y;
        let states = rk4_sweep_vec(&f, 0.0, &dvector![1.0], -1.0, 1000).unwrap();
        let end = states.last().unwrap()[0];
        assert!((end - 1.0f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn overflow_is_reported() {
        let f = |_t: f64, y: &DVector<f64>| y * 10.0;
        let err = rk4_sweep_vec(&f, 0.0, &dvector![1.0], 10.0, 1000).unwrap_err();
        assert!(matches!(err, Error::IntegrationDiverged { .. }));
    }

    #[test]
    fn simpson_integrates_cubic_exactly() {
        // Simpson is exact on cubics.
        let n = 4;
        let h: f64 = 0.25;
        let f = |x: f64| x * x * x;
        let mut acc = 0.0;
        for i in 0..=n {
            acc += simpson_weight(i, n) * f(i as f64 * h);
        }
        acc *= h / 3.0;
        assert!((acc - 0.25f64).abs() < 1e-14);
    }

    #[test]
    fn ols_recovers_exact_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [1.0, 3.0, 5.0, 7.0];
        let (slope, intercept, r2) = ols_line(&xs, &ys);
        assert!((slope - 2.0).abs() < 1e-12);
        assert!((intercept - 1.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }
}
