//! Closed-form conjugacy maps and trajectory solutions for the catalog
//! scenarios. These are exact and serve as ground truth for the numerical
//! pipeline.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Parameter of the saturated-linear/cubic counterexample scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example11Params {
    eps: f64,
}

impl Example11Params {
    /// Requires `0 < eps < 1/3`.
    pub fn new(eps: f64) -> Result<Self> {
        if eps > 0.0 && eps < 1.0 / 3.0 {
            Ok(Self { eps })
        } else {
            Err(Error::Config(format!(
                "eps must lie in (0, 1/3), got {eps}"
            )))
        }
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }
}

/// The perturbation of the counterexample scenario: saturated linear on
/// the positive side, saturated cubic on the negative side.
pub fn perturbation_11(eps: f64, x: f64) -> f64 {
    if x >= 1.0 {
        eps
    } else if x >= 0.0 {
        eps * x
    } else if x > -1.0 {
        eps * x * x * x
    } else {
        -eps
    }
}

/// Forward conjugacy of the counterexample scenario: piecewise, exactly
/// Lipschitz with constant 1, not differentiable at 0.
pub fn oracle_h_11(p: Example11Params, x: f64) -> f64 {
    let e = p.eps;
    if x >= 1.0 {
        x - e
    } else if x > 0.0 {
        (1.0 - e) * x.powf(1.0 / (1.0 - e))
    } else if x == 0.0 {
        0.0
    } else if x > -1.0 {
        -(1.0 - e).powf(1.5) * (1.0 / (x * x) - e).powf(-0.5)
    } else {
        x + e
    }
}

/// Inverse of [`oracle_h_11`]: Hölder with exponent `1 - eps` at 0, not
/// Lipschitz (its derivative blows up at 0).
pub fn oracle_g_11(p: Example11Params, y: f64) -> f64 {
    let e = p.eps;
    if y >= 1.0 - e {
        y + e
    } else if y > 0.0 {
        (y / (1.0 - e)).powf(1.0 - e)
    } else if y == 0.0 {
        0.0
    } else if y > e - 1.0 {
        -((1.0 - e).powi(3) / (y * y) + e).powf(-0.5)
    } else {
        y - e
    }
}

/// Derivative of [`oracle_h_11`] on the open branches; `None` at the
/// breakpoints -1, 0, 1 where it is undefined.
pub fn oracle_h_11_derivative(p: Example11Params, x: f64) -> Option<f64> {
    let e = p.eps;
    if x == 0.0 || x == 1.0 || x == -1.0 {
        None
    } else if !(-1.0..=1.0).contains(&x) {
        Some(1.0)
    } else if x > 0.0 {
        Some(x.powf(e / (1.0 - e)))
    } else {
        Some((1.0 - e).powf(1.5) * (1.0 - e * x * x).powf(-1.5))
    }
}

/// Forward conjugacy for the linear-homogeneous perturbation scenario:
/// odd, C^1, Lipschitz.
pub fn oracle_h_29(eps: f64, x: f64) -> f64 {
    assert!(eps > 0.0 && eps < 1.0, "eps must lie in (0, 1)");
    if x == 0.0 {
        0.0
    } else {
        x.signum() * (1.0 - eps) * x.abs().powf(1.0 / (1.0 - eps))
    }
}

/// Inverse of [`oracle_h_29`]: odd, Hölder with exponent `1 - eps`.
pub fn oracle_g_29(eps: f64, y: f64) -> f64 {
    assert!(eps > 0.0 && eps < 1.0, "eps must lie in (0, 1)");
    if y == 0.0 {
        0.0
    } else {
        y.signum() * (y.abs() / (1.0 - eps)).powf(1.0 - eps)
    }
}

/// Affine pair for the constant perturbation scenario: returns
/// `(H(x), G(H(x)))`; both maps are C^infinity.
pub fn oracle_affine_211(delta: f64, x: f64) -> (f64, f64) {
    let h = x - delta;
    (h, h + delta)
}

pub fn oracle_h_211(delta: f64, x: f64) -> f64 {
    x - delta
}

pub fn oracle_g_211(delta: f64, y: f64) -> f64 {
    y + delta
}

/// Which exact trajectory of the counterexample scenario to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolutionBranch {
    /// The solution normalized by x(0) = 1.
    Positive,
    /// The solution normalized by x(0) = -1.
    Negative,
}

/// Exact solution of the counterexample ODE through x(0) = +-1.
pub fn oracle_solution_11(p: Example11Params, branch: SolutionBranch, t: f64) -> f64 {
    let e = p.eps;
    match branch {
        SolutionBranch::Positive => {
            if t <= 0.0 {
                (1.0 - e) * (-t).exp() + e
            } else {
                ((-1.0 + e) * t).exp()
            }
        }
        SolutionBranch::Negative => {
            if t <= 0.0 {
                (e - 1.0) * (-t).exp() - e
            } else {
                -((1.0 - e) * (2.0 * t).exp() + e).powf(-0.5)
            }
        }
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type ScalarDerivFn = Arc<dyn Fn(f64) -> Option<f64> + Send + Sync>;

/// A scalar piecewise map with breakpoint metadata and a partial
/// derivative evaluator.
#[derive(Clone)]
pub struct PiecewiseMap {
    eval: ScalarFn,
    derivative: ScalarDerivFn,
    breakpoints: Vec<f64>,
    label: String,
}

impl PiecewiseMap {
    pub fn new(
        label: impl Into<String>,
        breakpoints: Vec<f64>,
        eval: impl Fn(f64) -> f64 + Send + Sync + 'static,
        derivative: impl Fn(f64) -> Option<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            eval: Arc::new(eval),
            derivative: Arc::new(derivative),
            breakpoints,
            label: label.into(),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.eval)(x)
    }

    /// `None` where the map is not differentiable.
    pub fn derivative(&self, x: f64) -> Option<f64> {
        (self.derivative)(x)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

pub fn h_11_map(p: Example11Params) -> PiecewiseMap {
    PiecewiseMap::new(
        "H (saturated counterexample)",
        vec![-1.0, 0.0, 1.0],
        move |x| oracle_h_11(p, x),
        move |x| oracle_h_11_derivative(p, x),
    )
}

pub fn g_11_map(p: Example11Params) -> PiecewiseMap {
    let e = p.eps();
    PiecewiseMap::new(
        "G (saturated counterexample)",
        vec![e - 1.0, 0.0, 1.0 - e],
        move |y| oracle_g_11(p, y),
        move |y| {
            if y == 0.0 || y == 1.0 - e || y == e - 1.0 {
                None
            } else if y > 1.0 - e || y < e - 1.0 {
                Some(1.0)
            } else if y > 0.0 {
                Some((y / (1.0 - e)).powf(-e))
            } else {
                let c = (1.0 - e).powi(3);
                let u = c / (y * y) + e;
                Some(-c / (y * y * y) * u.powf(-1.5))
            }
        },
    )
}

pub fn h_29_map(eps: f64) -> PiecewiseMap {
    PiecewiseMap::new(
        "H (linear-homogeneous perturbation)",
        vec![0.0],
        move |x| oracle_h_29(eps, x),
        move |x| {
            if x == 0.0 {
                Some(0.0)
            } else {
                Some(x.abs().powf(eps / (1.0 - eps)))
            }
        },
    )
}

pub fn g_29_map(eps: f64) -> PiecewiseMap {
    PiecewiseMap::new(
        "G (linear-homogeneous perturbation)",
        vec![0.0],
        move |y| oracle_g_29(eps, y),
        move |y| {
            if y == 0.0 {
                None
            } else {
                Some((y.abs() / (1.0 - eps)).powf(-eps))
            }
        },
    )
}
