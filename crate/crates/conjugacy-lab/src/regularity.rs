//! Empirical regularity measurement: modulus-of-continuity sampling,
//! Lipschitz-constant estimation, Hölder-exponent fitting and the two
//! sharpness detectors (C1 failure through mismatched one-sided
//! derivatives, non-Lipschitz behaviour through diverging difference
//! quotients).
//!
//! Everything here treats a map as a black box `R^n -> R^n`; a finite
//! sample can only evidence divergence, never prove it, so the detectors
//! are documented heuristics with fixed thresholds.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::ols_line;

/// One-sided derivatives are called distinct (the map non-C1) when the
/// extrapolated sides differ by more than this.
pub const NON_C1_GAP: f64 = 1e-2;

/// Non-Lipschitz flag: difference quotients must grow monotonically
/// across this many smallest scales ...
pub const MONOTONE_TAIL: usize = 4;
/// ... with this much multiplicative noise allowed between neighbours ...
pub const MONOTONE_NOISE: f64 = 0.05;
/// ... and the log-log slope of quotient against scale must fall below
/// this (equivalently the quotients diverge at least like scale^-0.05).
pub const QUOTIENT_SLOPE_LIMIT: f64 = -0.05;
/// Alternative gross-growth trigger: largest quotient at least this many
/// times the quotient at the coarsest scale.
pub const QUOTIENT_GROWTH_FACTOR: f64 = 10.0;

/// Raw material for the regularity estimators: separations paired with
/// the value gaps the map produced over them.
#[derive(Debug, Clone)]
pub struct ModulusSample {
    /// (separation, value gap), sorted by increasing separation.
    pub pairs: Vec<(f64, f64)>,
    pub base_point: DVector<f64>,
    pub scale_range: (f64, f64),
}

/// Summary of one regularity assessment of a single map.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RegularityReport {
    pub lipschitz_estimate: f64,
    pub holder_exponent: f64,
    pub fit_r2: f64,
    pub right_derivative: f64,
    pub left_derivative: f64,
    pub non_lipschitz: bool,
    pub non_c1: bool,
}

/// Extrapolated one-sided derivatives along a direction; `conclusive` is
/// false when the Aitken acceleration failed to settle.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct OneSidedDerivatives {
    pub right: f64,
    pub left: f64,
    pub conclusive: bool,
}

/// Outcome of the diverging-quotient probe, with the full trace for
/// CSV export (scale, gap, quotient).
#[derive(Debug, Clone, serde::Serialize)]
pub struct NonLipschitzReport {
    pub flagged: bool,
    pub trace: Vec<(f64, f64, f64)>,
}

/// Default separation ladder 2^-j, j = 5..=20: 4.5 decades, far above
/// double-precision noise for the maps at hand.
pub fn default_scales() -> Vec<f64> {
    (5..=20).map(|j| 2f64.powi(-j)).collect()
}

/// Finer ladder (down to 2^-30) for one-sided derivative extrapolation,
/// where the oracle maps are exact and roundoff is the only floor.
pub fn one_sided_scales() -> Vec<f64> {
    (5..=30).map(|j| 2f64.powi(-j)).collect()
}

/// Coordinate axes plus `extra` random unit vectors from a fixed-seed
/// generator, so multidimensional probes stay deterministic.
pub fn default_directions(dim: usize, extra: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut dirs: Vec<DVector<f64>> = (0..dim)
        .map(|i| {
            let mut e = DVector::zeros(dim);
            e[i] = 1.0;
            e
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while dirs.len() < dim + extra {
        let v = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
        let norm = v.norm();
        if norm > 1e-3 {
            dirs.push(v / norm);
        }
    }
    dirs
}

/// Wraps a scalar function as a 1-dimensional map for the samplers.
pub fn scalar_map<F: Fn(f64) -> f64>(f: F) -> impl Fn(&DVector<f64>) -> Result<DVector<f64>> {
    move |x: &DVector<f64>| Ok(DVector::from_element(1, f(x[0])))
}

/// Evaluates the map at `base + s * d` for every scale and direction and
/// records the resulting value gaps.
pub fn sample_modulus<F>(
    map: &F,
    base: &DVector<f64>,
    scales: &[f64],
    directions: &[DVector<f64>],
) -> Result<ModulusSample>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    assert!(scales.iter().all(|&s| s > 0.0), "scales must be positive");
    assert!(!scales.is_empty() && !directions.is_empty());
    let at_base = map(base)?;
    let mut pairs = Vec::with_capacity(scales.len() * directions.len());
    for &s in scales {
        for d in directions {
            let shifted = map(&(base + d * s))?;
            pairs.push((s, (shifted - &at_base).norm()));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let scale_range = (pairs[0].0, pairs[pairs.len() - 1].0);
    Ok(ModulusSample {
        pairs,
        base_point: base.clone(),
        scale_range,
    })
}

/// Sup of gap / separation over the sample.
pub fn estimate_lipschitz(sample: &ModulusSample) -> Result<f64> {
    if sample.pairs.is_empty() {
        return Err(Error::EmptySample);
    }
    Ok(sample
        .pairs
        .iter()
        .map(|&(s, g)| g / s)
        .fold(0.0f64, f64::max))
}

/// Sup of gap / separation over many base points; the practical
/// estimator for "Lipschitz constant over an interval".
pub fn estimate_lipschitz_on_grid<F>(
    map: &F,
    bases: &[DVector<f64>],
    scales: &[f64],
    directions: &[DVector<f64>],
) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    if bases.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut best: f64 = 0.0;
    for base in bases {
        let sample = sample_modulus(map, base, scales, directions)?;
        best = best.max(estimate_lipschitz(&sample)?);
    }
    Ok(best)
}

/// Least-squares slope of log gap against log separation, with the r^2 of
/// the fit. The two largest distinct separations are excluded: the
/// exponent is a local-at-the-base quantity and the coarsest probes feel
/// neighbouring piecewise branches.
pub fn fit_holder_exponent(sample: &ModulusSample) -> Result<(f64, f64)> {
    let mut seps: Vec<f64> = sample.pairs.iter().map(|p| p.0).collect();
    seps.dedup();
    assert!(
        seps.len() >= 5 && sample.scale_range.1 / sample.scale_range.0 >= 1e3,
        "need at least 5 scales spanning 3 decades"
    );
    let cutoff = seps[seps.len() - 2]; // drop the 2 largest scales
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(s, g) in &sample.pairs {
        if s < cutoff && g > 0.0 {
            xs.push(s.ln());
            ys.push(g.ln());
        }
    }
    if xs.len() < 3 {
        return Err(Error::DegenerateFit);
    }
    let (slope, _, r2) = ols_line(&xs, &ys);
    Ok((slope, r2))
}

/// Aitken delta-squared acceleration; entries where the second difference
/// vanishes pass through unchanged (the sequence is already flat there).
fn aitken_pass(seq: &[f64]) -> Vec<f64> {
    seq.windows(3)
        .map(|w| {
            let d1 = w[1] - w[0];
            let d2 = w[2] - w[1];
            let dd = d2 - d1;
            if dd.abs() <= 1e-13 * (1.0 + w[2].abs()) {
                w[2]
            } else {
                w[2] - d2 * d2 / dd
            }
        })
        .collect()
}

fn extrapolate(quotients: &[f64]) -> (f64, bool) {
    // Near-constant sequences (affine maps) are dominated by roundoff at
    // the smallest scales; the coarsest quotient is then the accurate one.
    let max = quotients.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = quotients.iter().copied().fold(f64::INFINITY, f64::min);
    if max - min <= 1e-6 * (1.0 + quotients[0].abs()) {
        return (quotients[0], true);
    }
    let mut seq = quotients.to_vec();
    for _ in 0..2 {
        if seq.len() >= 3 {
            seq = aitken_pass(&seq);
        }
    }
    let last = *seq.last().unwrap();
    let conclusive = if seq.len() >= 2 {
        let prev = seq[seq.len() - 2];
        last.is_finite() && (last - prev).abs() <= 1e-3 * (1.0 + last.abs())
    } else {
        last.is_finite()
    };
    (last, conclusive)
}

/// Richardson/Aitken-extrapolated one-sided difference quotients of the
/// directional component of the map along `direction`.
pub fn one_sided_derivatives<F>(
    map: &F,
    point: &DVector<f64>,
    direction: &DVector<f64>,
    scales: &[f64],
) -> Result<OneSidedDerivatives>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    assert!(
        scales.windows(2).all(|w| w[1] < w[0]) && !scales.is_empty(),
        "scales must decrease toward 0"
    );
    let at_point = map(point)?;
    let mut right = Vec::with_capacity(scales.len());
    let mut left = Vec::with_capacity(scales.len());
    for &s in scales {
        let fp = map(&(point + direction * s))?;
        let fm = map(&(point - direction * s))?;
        right.push((&fp - &at_point).dot(direction) / s);
        left.push((&at_point - &fm).dot(direction) / s);
    }
    let (r, rc) = extrapolate(&right);
    let (l, lc) = extrapolate(&left);
    Ok(OneSidedDerivatives {
        right: r,
        left: l,
        conclusive: rc && lc,
    })
}

/// Flags a map as non-Lipschitz at `point` when the right-hand difference
/// quotients grow monotonically (with tolerance) over the smallest scales
/// and the overall growth is genuine: either a tenfold increase from the
/// coarsest quotient or a log-log divergence slope below
/// [`QUOTIENT_SLOPE_LIMIT`].
pub fn detect_non_lipschitz<F>(
    map: &F,
    point: &DVector<f64>,
    scales: &[f64],
) -> Result<NonLipschitzReport>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    assert!(
        scales.len() >= 8 && scales.windows(2).all(|w| w[1] < w[0]),
        "need at least 8 strictly decreasing scales"
    );
    let dim = point.len();
    let mut dir = DVector::zeros(dim);
    dir[0] = 1.0;
    let at_point = map(point)?;
    let mut trace = Vec::with_capacity(scales.len());
    for &s in scales {
        let gap = (map(&(point + &dir * s))? - &at_point).norm();
        trace.push((s, gap, gap / s));
    }

    let quotients: Vec<f64> = trace.iter().map(|t| t.2).collect();
    let tail = &quotients[quotients.len() - MONOTONE_TAIL..];
    let monotone = tail
        .windows(2)
        .all(|w| w[1] >= w[0] * (1.0 - MONOTONE_NOISE));

    let max_q = quotients.iter().copied().fold(0.0f64, f64::max);
    let gross_growth = max_q >= QUOTIENT_GROWTH_FACTOR * quotients[0];

    let positive: Vec<(f64, f64)> = trace
        .iter()
        .filter(|t| t.2 > 0.0)
        .map(|t| (t.0.ln(), t.2.ln()))
        .collect();
    let diverging_slope = if positive.len() >= 3 {
        let xs: Vec<f64> = positive.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = positive.iter().map(|p| p.1).collect();
        ols_line(&xs, &ys).0 <= QUOTIENT_SLOPE_LIMIT
    } else {
        false
    };

    Ok(NonLipschitzReport {
        flagged: monotone && (gross_growth || diverging_slope),
        trace,
    })
}

/// Full assessment of a scalar-direction map: Lipschitz estimate over the
/// supplied bases, Hölder fit at `holder_base`, one-sided derivatives and
/// both sharpness flags at `probe_point`.
pub fn assess_map<F>(
    map: &F,
    bases: &[DVector<f64>],
    holder_base: &DVector<f64>,
    probe_point: &DVector<f64>,
    scales: &[f64],
    one_sided: &[f64],
    directions: &[DVector<f64>],
) -> Result<RegularityReport>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let lipschitz_estimate = estimate_lipschitz_on_grid(map, bases, scales, directions)?;
    let holder_sample = sample_modulus(map, holder_base, scales, &directions[..1])?;
    let (holder_exponent, fit_r2) = fit_holder_exponent(&holder_sample)?;
    let sides = one_sided_derivatives(map, probe_point, &directions[0], one_sided)?;
    let nl = detect_non_lipschitz(map, probe_point, scales)?;
    Ok(RegularityReport {
        lipschitz_estimate,
        holder_exponent,
        fit_r2,
        right_derivative: sides.right,
        left_derivative: sides.left,
        non_lipschitz: nl.flagged,
        non_c1: sides.conclusive && (sides.right - sides.left).abs() > NON_C1_GAP,
    })
}
