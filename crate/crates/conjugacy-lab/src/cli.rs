//! Command-line front door: scenario catalog, flat key-value
//! configuration with flag overrides, JSON run reports and CSV curve
//! emission.
//!
//! Exit codes: 0 pass, 1 check failure, 2 configuration error,
//! 3 numeric divergence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assumptions::{
    check_admissibility, compute_regularity_constants, dichotomy_spectrum_constant,
    estimate_contraction, AdmissibilityReport, RegularityConstantsResult, SpectrumResult,
};
use crate::conjugacy::{gronwall_check, ConjugacyEvaluator, ScenarioSystem};
use crate::dynamics::TimeMatrixField;
use crate::error::{Error, Result};
use crate::oracles::{
    oracle_g_11, oracle_g_29, oracle_h_11, oracle_h_29, perturbation_11, Example11Params,
};
use crate::regularity::{
    assess_map, detect_non_lipschitz, one_sided_scales, scalar_map, RegularityReport,
};

#[derive(Parser, Debug)]
#[command(
    name = "conjugacy-lab",
    about = "Constructs the topological conjugacy between a contracting linear ODE \
             and its Lipschitz perturbation, and certifies its sharp regularity."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat key=value configuration file; flags override its entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Scenario name: example-1.1, example-2.9, example-2.11 or custom.
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    /// Target accuracy of the truncated Green integral.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// RK4 step size.
    #[arg(long, global = true)]
    pub step: Option<f64>,
    /// Explicit truncation window (otherwise derived from the tolerance).
    #[arg(long, global = true)]
    pub window: Option<f64>,
    /// Output directory for the report and CSV artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Omit timestamps/timings so identical configs give byte-identical reports.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Hypothesis checks, Gronwall bound and conjugation/roundtrip residuals.
    Verify,
    /// Regularity suite on the numerical H/G and, for catalog scenarios, the oracles.
    Regularity,
    /// CSV curve data for H and G (oracle and numerical columns).
    Curves,
    /// Derived constants p1, q, lambda, p2 for the scenario.
    Constants,
    /// Dichotomy spectrum of the (constant) linear parts.
    Spectrum,
}

/// Resolved run configuration: defaults, then config file, then flags.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub scenario: String,
    pub eps: f64,
    pub delta: f64,
    pub tol: f64,
    pub picard_tol: f64,
    pub step: f64,
    pub window: Option<f64>,
    pub seed: u64,
    pub deterministic: bool,
    pub out: PathBuf,
    /// Custom-scenario keys (a_diag, a_cos_amp, pert, pert_eps, pert_delta).
    pub extra: BTreeMap<String, String>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: "example-1.1".into(),
            eps: 0.1,
            delta: 0.5,
            tol: 1e-4,
            picard_tol: 1e-8,
            step: 1e-3,
            window: None,
            seed: 42,
            deterministic: false,
            out: PathBuf::from("."),
            extra: BTreeMap::new(),
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "scenario",
    "eps",
    "delta",
    "tol",
    "picard_tol",
    "step",
    "window",
    "seed",
    "deterministic",
    "out",
    "a_diag",
    "a_cos_amp",
    "pert",
    "pert_eps",
    "pert_delta",
];

type ScalarFn = Box<dyn Fn(f64) -> f64>;
type ScalarFn2 = Box<dyn Fn(f64, f64) -> f64>;

fn parse_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{} line {}: expected key=value, got {line:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        let key = key.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "{} line {}: unknown key {key:?}",
                path.display(),
                lineno + 1
            )));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: not a number: {value:?}")))
}

impl ScenarioConfig {
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = &cli.config {
            for (key, value) in parse_kv_file(path)? {
                match key.as_str() {
                    "scenario" => cfg.scenario = value,
                    "eps" => cfg.eps = parse_f64("eps", &value)?,
                    "delta" => cfg.delta = parse_f64("delta", &value)?,
                    "tol" => cfg.tol = parse_f64("tol", &value)?,
                    "picard_tol" => cfg.picard_tol = parse_f64("picard_tol", &value)?,
                    "step" => cfg.step = parse_f64("step", &value)?,
                    "window" => cfg.window = Some(parse_f64("window", &value)?),
                    "seed" => {
                        cfg.seed = value
                            .parse()
                            .map_err(|_| Error::Config(format!("seed: not an integer: {value:?}")))?
                    }
                    "deterministic" => {
                        cfg.deterministic = value
                            .parse()
                            .map_err(|_| Error::Config(format!("deterministic: not a bool: {value:?}")))?
                    }
                    "out" => cfg.out = PathBuf::from(value),
                    other => {
                        cfg.extra.insert(other.to_string(), value);
                    }
                }
            }
        }
        if let Some(s) = &cli.scenario {
            cfg.scenario = s.clone();
        }
        if let Some(v) = cli.eps {
            cfg.eps = v;
        }
        if let Some(v) = cli.delta {
            cfg.delta = v;
        }
        if let Some(v) = cli.tol {
            cfg.tol = v;
        }
        if let Some(v) = cli.step {
            cfg.step = v;
        }
        if let Some(v) = cli.window {
            cfg.window = Some(v);
        }
        if let Some(v) = cli.seed {
            cfg.seed = v;
        }
        if let Some(p) = &cli.out {
            cfg.out = p.clone();
        }
        cfg.deterministic |= cli.deterministic;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.tol <= 0.0 || self.step <= 0.0 || self.picard_tol <= 0.0 {
            return Err(Error::Config("tol, step and picard_tol must be positive".into()));
        }
        match self.scenario.as_str() {
            "example-1.1" | "example-2.9" | "example-2.11" | "custom" => Ok(()),
            other => Err(Error::Config(format!(
                "unknown scenario {other:?}; catalog: example-1.1, example-2.9, example-2.11, custom"
            ))),
        }
    }

    pub fn build_system(&self) -> Result<ScenarioSystem> {
        match self.scenario.as_str() {
            "example-1.1" => ScenarioSystem::example_11(self.eps),
            "example-2.9" => ScenarioSystem::example_29(self.eps),
            "example-2.11" => Ok(ScenarioSystem::example_211(self.delta)),
            "custom" => self.build_custom(),
            _ => unreachable!("validated"),
        }
    }

    fn build_custom(&self) -> Result<ScenarioSystem> {
        let diag: Vec<f64> = match self.extra.get("a_diag") {
            Some(spec) => spec
                .split(',')
                .map(|s| parse_f64("a_diag", s.trim()))
                .collect::<Result<_>>()?,
            None => vec![-1.0],
        };
        let dim = diag.len();
        let base = DMatrix::from_diagonal(&DVector::from_vec(diag));
        let a = match self.extra.get("a_cos_amp") {
            Some(spec) => {
                let amp = parse_f64("a_cos_amp", spec)?;
                let bound = base.norm() + amp.abs() * (dim as f64).sqrt();
                let base = base.clone();
                TimeMatrixField::new(dim, bound, move |t: f64| {
                    &base + DMatrix::identity(dim, dim) * (amp * t.cos())
                })
            }
            None => TimeMatrixField::constant(base),
        };
        let cert = estimate_contraction(&a, 8.0 * std::f64::consts::PI, 1e-2)?;

        let family = self.extra.get("pert").map(String::as_str).unwrap_or("none");
        let k = cert.k;
        let alpha = cert.alpha;
        let pert = match family {
            "none" => crate::assumptions::PerturbationSpec::zero(dim),
            "constant" => {
                let d = match self.extra.get("pert_delta") {
                    Some(v) => parse_f64("pert_delta", v)?,
                    None => self.delta,
                };
                crate::assumptions::PerturbationSpec::constant(DVector::from_element(dim, d))
            }
            "saturated" => {
                let eps = match self.extra.get("pert_eps") {
                    Some(v) => parse_f64("pert_eps", v)?,
                    None => self.eps,
                };
                Example11Params::new(eps)?;
                crate::assumptions::PerturbationSpec::new(
                    dim,
                    move |_, x: &DVector<f64>| x.map(|v| perturbation_11(eps, v)),
                    move |_| eps * (dim as f64).sqrt(),
                    move |_| 3.0 * eps,
                    eps * (dim as f64).sqrt(),
                    3.0 * eps,
                    3.0 * eps * k / alpha,
                )
            }
            "linear" => {
                let eps = match self.extra.get("pert_eps") {
                    Some(v) => parse_f64("pert_eps", v)?,
                    None => self.eps,
                };
                let b = TimeMatrixField::constant(DMatrix::identity(dim, dim) * eps);
                crate::assumptions::PerturbationSpec::linear(b).with_constants(
                    f64::INFINITY,
                    eps,
                    eps * k / alpha,
                )
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown perturbation family {other:?}; catalog: none, constant, saturated, linear"
                )))
            }
        };
        Ok(ScenarioSystem {
            a,
            pert,
            cert,
            label: "custom".into(),
        })
    }

    /// Closed-form maps to compare against, for catalog scenarios.
    fn oracle_maps(&self) -> Option<(ScalarFn, ScalarFn)> {
        match self.scenario.as_str() {
            "example-1.1" => {
                let p = Example11Params::new(self.eps).ok()?;
                Some((
                    Box::new(move |x| oracle_h_11(p, x)),
                    Box::new(move |y| oracle_g_11(p, y)),
                ))
            }
            "example-2.9" => {
                let eps = self.eps;
                Some((
                    Box::new(move |x| oracle_h_29(eps, x)),
                    Box::new(move |y| oracle_g_29(eps, y)),
                ))
            }
            "example-2.11" => {
                let d = self.delta;
                Some((Box::new(move |x| x - d), Box::new(move |y| y + d)))
            }
            _ => None,
        }
    }

    /// Scalar right-hand-side pieces for the batched curve evaluators.
    fn scalar_parts(&self) -> Option<(f64, ScalarFn2)> {
        match self.scenario.as_str() {
            "example-1.1" => {
                let eps = self.eps;
                Some((-1.0, Box::new(move |_, x| perturbation_11(eps, x))))
            }
            "example-2.9" => {
                let eps = self.eps;
                Some((-1.0, Box::new(move |_, x| eps * x)))
            }
            "example-2.11" => {
                let d = self.delta;
                Some((-1.0, Box::new(move |_, _| d)))
            }
            _ => None,
        }
    }

    fn evaluator(&self, system: ScenarioSystem) -> Result<ConjugacyEvaluator> {
        let ev = match (self.window, ConjugacyEvaluator::new(system.clone(), self.tol, self.step)) {
            (Some(w), Ok(ev)) => ev.with_window(w),
            (Some(w), Err(_)) => ConjugacyEvaluator {
                // No tolerance-derived window exists (unbounded C1); the
                // explicit window stands on its own.
                system,
                window: w,
                step: self.step,
                picard_tol: self.picard_tol,
                picard_max_iter: 200,
                tail_bound: f64::INFINITY,
                window_capped: false,
            },
            (None, res) => res?,
        };
        Ok(ev.with_picard(self.picard_tol, 200))
    }
}

// ---------------------------------------------------------------------------
// Report schema
// ---------------------------------------------------------------------------

#[derive(Debug, serde::Serialize)]
pub struct RunMeta {
    pub tol: f64,
    pub picard_tol: f64,
    pub step: f64,
    pub window: Option<f64>,
    pub tail_bound: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, serde::Serialize)]
pub struct ConstantsSection {
    pub k: f64,
    pub alpha: f64,
    pub c1: Option<f64>,
    pub c2: f64,
    pub theta: Option<f64>,
    pub p1: f64,
    pub q: Option<f64>,
    pub lambda: Option<f64>,
    pub p2: Option<f64>,
    pub q_admissible: bool,
}

#[derive(Debug, serde::Serialize)]
pub struct VerifySection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub admissibility: Option<AdmissibilityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectrum_route: Option<SpectrumResult>,
    pub gronwall_pairs: usize,
    pub gronwall_all_pass: bool,
    pub gronwall_worst_margin: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conjugation_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roundtrip_residual: Option<f64>,
    pub residual_threshold: f64,
}

#[derive(Debug, serde::Serialize)]
pub struct RegularitySection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_oracle: Option<RegularityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_oracle: Option<RegularityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_numeric: Option<RegularityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g_numeric: Option<RegularityReport>,
    /// Finite samples evidence, not prove, the sharpness claims.
    pub note: &'static str,
}

#[derive(Debug, serde::Serialize)]
pub struct SpectrumSection {
    pub linear: SpectrumResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perturbed: Option<SpectrumResult>,
}

#[derive(Debug, serde::Serialize)]
pub struct RunReport {
    pub schema: u32,
    pub command: String,
    pub scenario: String,
    pub params: BTreeMap<String, f64>,
    pub meta: RunMeta,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constants: Option<ConstantsSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifySection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regularity: Option<RegularitySection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<SpectrumSection>,
    pub artifacts: Vec<String>,
    pub failures: Vec<String>,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u128>,
}

fn base_report(cfg: &ScenarioConfig, command: &str, window: Option<f64>, tail: Option<f64>) -> RunReport {
    let mut params = BTreeMap::new();
    match cfg.scenario.as_str() {
        "example-1.1" | "example-2.9" => {
            params.insert("eps".into(), cfg.eps);
        }
        "example-2.11" => {
            params.insert("delta".into(), cfg.delta);
        }
        _ => {}
    }
    RunReport {
        schema: 1,
        command: command.into(),
        scenario: cfg.scenario.clone(),
        params,
        meta: RunMeta {
            tol: cfg.tol,
            picard_tol: cfg.picard_tol,
            step: cfg.step,
            window,
            tail_bound: tail.filter(|t| t.is_finite()),
            seed: cfg.seed,
        },
        constants: None,
        verify: None,
        regularity: None,
        spectrum: None,
        artifacts: Vec::new(),
        failures: Vec::new(),
        pass: true,
        wall_clock_ms: None,
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

pub fn cmd_verify(cfg: &ScenarioConfig) -> Result<RunReport> {
    let system = cfg.build_system()?;
    let bounded = system.pert.c1.is_finite();
    let mut failures = Vec::new();

    let (admissibility, spectrum_route) = if bounded {
        let report = check_admissibility(&system.cert, &system.pert);
        if let Some(name) = report.first_failure() {
            failures.push(format!("hypothesis {name} fails"));
        }
        (Some(report), None)
    } else {
        // No global pointwise bound: fall back to the spectral condition
        // on the perturbed linear parts.
        let b = system.pert.linear_part().expect("unbounded perturbations are linear");
        let total = system.a.at(0.0) + b.at(0.0);
        let spec = dichotomy_spectrum_constant(&total)?;
        if !spec.contraction {
            failures.push("perturbed spectrum is not contracting".into());
        }
        (None, Some(spec))
    };

    // Gronwall bound over seeded random pairs.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = system.dim();
    let pairs = 100;
    let mut worst_margin = f64::INFINITY;
    let mut all_pass = true;
    for _ in 0..pairs {
        let x0 = DVector::from_fn(dim, |_, _| rng.gen_range(-2.0..2.0));
        let x0bar = DVector::from_fn(dim, |_, _| rng.gen_range(-2.0..2.0));
        // The bound covers the forward (contracting) direction.
        let t1: f64 = rng.gen_range(0.0..3.0);
        let check = gronwall_check(&system, 0.0, &x0, &x0bar, t1, cfg.step)?;
        worst_margin = worst_margin.min(check.margin);
        all_pass &= check.pass;
    }
    if !all_pass {
        failures.push("Gronwall bound violated on sampled pairs".into());
    }

    let (mut conjugation, mut roundtrip) = (None, None);
    let threshold = 10.0 * cfg.tol;
    let mut window = cfg.window;
    let mut tail = None;
    if bounded && failures.is_empty() {
        let ev = cfg.evaluator(system.clone())?;
        window = Some(ev.window);
        tail = Some(ev.tail_bound);
        let xi = DVector::from_element(dim, 1.0);
        let conj = ev.conjugation_residual(0.0, &xi, 5.0)?;
        let c = conj.conjugation.unwrap();
        if c > threshold {
            failures.push(format!("conjugation residual {c:.3e} above {threshold:.3e}"));
        }
        conjugation = Some(c);
        let points: Vec<DVector<f64>> = (0..=10)
            .map(|i| DVector::from_element(dim, -2.0 + 0.4 * i as f64))
            .collect();
        let rt = ev.roundtrip_residual(0.0, &points)?;
        let r = rt.roundtrip.unwrap();
        if r > threshold {
            failures.push(format!("roundtrip residual {r:.3e} above {threshold:.3e}"));
        }
        roundtrip = Some(r);
    }

    let mut report = base_report(cfg, "verify", window, tail);
    report.verify = Some(VerifySection {
        admissibility,
        spectrum_route,
        gronwall_pairs: pairs,
        gronwall_all_pass: all_pass,
        gronwall_worst_margin: worst_margin,
        conjugation_residual: conjugation,
        roundtrip_residual: roundtrip,
        residual_threshold: threshold,
    });
    report.constants = Some(constants_section(&system));
    report.pass = failures.is_empty();
    report.failures = failures;
    Ok(report)
}

fn constants_section(system: &ScenarioSystem) -> ConstantsSection {
    let cert = &system.cert;
    let c1 = system.pert.c1;
    let c2 = system.pert.c2;
    if !c1.is_finite() {
        return ConstantsSection {
            k: cert.k,
            alpha: cert.alpha,
            c1: None,
            c2,
            theta: None,
            p1: crate::assumptions::lipschitz_constant_h(cert.k, c2),
            q: None,
            lambda: None,
            p2: None,
            q_admissible: false,
        };
    }
    let theta = system.pert.theta;
    match compute_regularity_constants(cert, c1, c2) {
        RegularityConstantsResult::Admissible(c) => ConstantsSection {
            k: cert.k,
            alpha: cert.alpha,
            c1: Some(c1),
            c2,
            theta: Some(theta),
            p1: c.p1,
            q: Some(c.q),
            lambda: Some(c.lambda),
            p2: Some(c.p2),
            q_admissible: true,
        },
        RegularityConstantsResult::NoAdmissibleQ { p1, lambda } => ConstantsSection {
            k: cert.k,
            alpha: cert.alpha,
            c1: Some(c1),
            c2,
            theta: Some(theta),
            p1,
            q: None,
            lambda: Some(lambda),
            p2: None,
            q_admissible: false,
        },
    }
}

pub fn cmd_constants(cfg: &ScenarioConfig) -> Result<RunReport> {
    let system = cfg.build_system()?;
    let section = constants_section(&system);
    let mut report = base_report(cfg, "constants", None, None);
    if !section.q_admissible && section.c1.is_some() {
        report.failures.push("no admissible Hölder exponent q".into());
    }
    report.pass = report.failures.is_empty();
    report.constants = Some(section);
    Ok(report)
}

pub fn cmd_spectrum(cfg: &ScenarioConfig) -> Result<RunReport> {
    let system = cfg.build_system()?;
    if cfg.extra.contains_key("a_cos_amp") {
        return Err(Error::Config(
            "the spectrum solver handles constant matrices only".into(),
        ));
    }
    let linear = dichotomy_spectrum_constant(&system.a.at(0.0))?;
    let perturbed = match system.pert.linear_part() {
        Some(b) => Some(dichotomy_spectrum_constant(&(system.a.at(0.0) + b.at(0.0)))?),
        None => None,
    };
    let mut report = base_report(cfg, "spectrum", None, None);
    if !linear.contraction {
        report.failures.push("linear part is not contracting".into());
    }
    report.pass = report.failures.is_empty();
    report.spectrum = Some(SpectrumSection { linear, perturbed });
    Ok(report)
}

/// Scales for probing the *numerical* maps: still 3 decades, but the
/// coarser floor keeps discretization error out of the quotients.
fn numeric_scales() -> Vec<f64> {
    (2..=12).map(|j| 2f64.powi(-j)).collect()
}

pub fn cmd_regularity(cfg: &ScenarioConfig) -> Result<RunReport> {
    let system = cfg.build_system()?;
    gate_custom(cfg, &system)?;
    let dirs = vec![DVector::from_element(1, 1.0)];
    let zero = DVector::from_element(1, 0.0);
    let oracle_bases: Vec<DVector<f64>> =
        (0..=60).map(|i| DVector::from_element(1, -3.0 + 0.1 * i as f64)).collect();

    let mut failures = Vec::new();
    let (mut h_oracle, mut g_oracle) = (None, None);
    let mut artifacts = Vec::new();
    if let Some((h, g)) = cfg.oracle_maps() {
        let hm = scalar_map(h);
        let gm = scalar_map(g);
        h_oracle = Some(assess_map(
            &hm,
            &oracle_bases,
            &zero,
            &zero,
            &crate::regularity::default_scales(),
            &one_sided_scales(),
            &dirs,
        )?);
        g_oracle = Some(assess_map(
            &gm,
            &oracle_bases,
            &zero,
            &zero,
            &crate::regularity::default_scales(),
            &one_sided_scales(),
            &dirs,
        )?);
        // Quotient trace of the oracle inverse: the divergence evidence.
        let trace = detect_non_lipschitz(&gm, &zero, &crate::regularity::default_scales())?;
        let mut csv = String::from("scale,gap,quotient\n");
        for (s, gap, q) in &trace.trace {
            csv.push_str(&format!("{s},{gap},{q}\n"));
        }
        fs::create_dir_all(&cfg.out)
            .map_err(|e| Error::Config(format!("cannot create {}: {e}", cfg.out.display())))?;
        let path = cfg.out.join("g_quotients.csv");
        write_atomic(&path, &csv)?;
        artifacts.push(path.display().to_string());
    }

    // Numerical side: only for scenarios where the Green construction is
    // genuinely nondegenerate (finite C1).
    let (mut h_numeric, mut g_numeric) = (None, None);
    let mut window = cfg.window;
    let mut tail = None;
    if system.pert.c1.is_finite() {
        let mut reg_cfg = cfg.clone();
        reg_cfg.tol = cfg.tol.min(1e-6);
        reg_cfg.step = cfg.step.max(2.5e-3);
        let ev = reg_cfg.evaluator(system.clone())?;
        window = Some(ev.window);
        tail = Some(ev.tail_bound);
        let ev_h = ev.clone();
        let hm = move |x: &DVector<f64>| ev_h.evaluate_h(0.0, x);
        let ev_g = ev.clone();
        let gm = move |y: &DVector<f64>| ev_g.evaluate_g(0.0, y);
        let numeric_bases: Vec<DVector<f64>> =
            (0..5).map(|i| DVector::from_element(1, -2.0 + i as f64)).collect();
        let scales = numeric_scales();
        h_numeric = Some(assess_map(&hm, &numeric_bases, &zero, &zero, &scales, &scales, &dirs)?);
        g_numeric = Some(assess_map(&gm, &numeric_bases, &zero, &zero, &scales, &scales, &dirs)?);
    }

    // Cross-check numeric flags against oracle flags where both exist.
    if let (Some(ho), Some(hn)) = (&h_oracle, &h_numeric) {
        if ho.non_lipschitz != hn.non_lipschitz {
            failures.push("H: numeric non-Lipschitz flag disagrees with oracle".into());
        }
    }
    if let (Some(go), Some(gn)) = (&g_oracle, &g_numeric) {
        if go.non_lipschitz != gn.non_lipschitz {
            failures.push("G: numeric non-Lipschitz flag disagrees with oracle".into());
        }
    }

    let mut report = base_report(cfg, "regularity", window, tail);
    report.regularity = Some(RegularitySection {
        h_oracle,
        g_oracle,
        h_numeric,
        g_numeric,
        note: "finite-sample estimates: evidence for the sharpness claims, not proof",
    });
    report.artifacts = artifacts;
    report.pass = failures.is_empty();
    report.failures = failures;
    Ok(report)
}

fn gate_custom(cfg: &ScenarioConfig, system: &ScenarioSystem) -> Result<()> {
    if cfg.scenario == "custom" {
        let adm = check_admissibility(&system.cert, &system.pert);
        if let Some(name) = adm.first_failure() {
            return Err(Error::Config(format!(
                "custom scenario rejected: hypothesis {name} fails"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Curves: batched scalar evaluation of H and G over dense grids
// ---------------------------------------------------------------------------

/// Uniform grid plus a geometric cluster around 0, so the tangency of G
/// to the vertical axis at the origin is resolved.
fn curve_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let mut xs: Vec<f64> = (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect();
    for k in 8..=56 {
        let s = 10f64.powf(-(k as f64) / 4.0);
        if s < hi {
            xs.push(s);
        }
        if -s > lo {
            xs.push(-s);
        }
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    xs.dedup();
    xs
}

/// Batched H over a scalar scenario: one shared transition sweep, one
/// backward nonlinear sweep per grid entry carried in lockstep.
fn batched_h_scalar(
    a: &dyn Fn(f64) -> f64,
    f: &dyn Fn(f64, f64) -> f64,
    t: f64,
    xs: &[f64],
    window: f64,
    step: f64,
) -> Result<Vec<f64>> {
    let n = crate::numerics::even_step_count(window, step);
    let h = window / n as f64;
    let m = xs.len();
    // Backward nonlinear nodes: states[i][c] at s = t - i h.
    let mut states = vec![xs.to_vec()];
    let mut cur = xs.to_vec();
    let rhs = |s: f64, x: f64| a(s) * x + f(s, x);
    for i in 0..n {
        let s = t - i as f64 * h;
        for x in cur.iter_mut() {
            let k1 = -rhs(s, *x);
            let k2 = -rhs(s - 0.5 * h, *x + 0.5 * h * k1);
            let k3 = -rhs(s - 0.5 * h, *x + 0.5 * h * k2);
            let k4 = -rhs(s - h, *x + h * k3);
            *x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if !x.is_finite() || x.abs() > crate::numerics::OVERFLOW_THRESHOLD {
                return Err(Error::WindowTooLarge {
                    window,
                    s: s - h,
                });
            }
        }
        states.push(cur.clone());
    }
    // W(tau) = U(t, t - tau): scalar sweep dW/dtau = W a(t - tau).
    let mut w = vec![1.0f64; n + 1];
    for i in 0..n {
        let tau = i as f64 * h;
        let wv = w[i];
        let k1 = wv * a(t - tau);
        let k2 = (wv + 0.5 * h * k1) * a(t - tau - 0.5 * h);
        let k3 = (wv + 0.5 * h * k2) * a(t - tau - 0.5 * h);
        let k4 = (wv + h * k3) * a(t - tau - h);
        w[i + 1] = wv + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    let mut out = Vec::with_capacity(m);
    for c in 0..m {
        let mut acc = 0.0;
        for i in 0..=n {
            let s = t - i as f64 * h;
            acc += crate::numerics::simpson_weight(i, n) * w[i] * f(s, states[i][c]);
        }
        out.push(xs[c] - acc * h / 3.0);
    }
    Ok(out)
}

/// Batched G: the Picard sweeps for every grid entry run in lockstep over
/// one shared backward linear factor.
#[allow(clippy::too_many_arguments)]
fn batched_g_scalar(
    a: &dyn Fn(f64) -> f64,
    f: &dyn Fn(f64, f64) -> f64,
    t: f64,
    ys: &[f64],
    window: f64,
    step: f64,
    picard_tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let n = crate::numerics::even_step_count(window, step);
    let h = window / n as f64;
    let m = ys.len();
    // Scalar linear factor u(j) with Y(s) = u * y, at half-step nodes:
    // u[j] at s = t - j h/2, u' = a u integrated backward.
    let mut u = vec![1.0f64; 2 * n + 1];
    for j in 0..2 * n {
        let tau = j as f64 * h / 2.0;
        let uv = u[j];
        let g = |dt: f64, v: f64| -a(t - tau - dt) * v;
        let k1 = g(0.0, uv);
        let k2 = g(0.25 * h, uv + 0.25 * h * k1);
        let k3 = g(0.25 * h, uv + 0.25 * h * k2);
        let k4 = g(0.5 * h, uv + 0.5 * h * k3);
        u[j + 1] = uv + h / 12.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    let t0 = t - window;
    let mut z = vec![vec![0.0f64; m]; n + 1];
    for _ in 1..=max_iter {
        let mut wv = vec![0.0f64; m];
        let mut znew = vec![vec![0.0f64; m]; n + 1];
        let mut defect = 0.0f64;
        for i in 0..n {
            let s = t0 + i as f64 * h;
            let a0 = a(s);
            let am = a(s + 0.5 * h);
            let a1 = a(s + h);
            let y0f = u[2 * (n - i)];
            let ymf = u[2 * (n - i) - 1];
            let y1f = u[2 * (n - i) - 2];
            for c in 0..m {
                let y = ys[c];
                let z0 = z[i][c];
                let z1 = z[i + 1][c];
                let zm = 0.5 * (z0 + z1);
                let wc = wv[c];
                let k1 = a0 * wc + f(s, y0f * y + z0);
                let k2 = am * (wc + 0.5 * h * k1) + f(s + 0.5 * h, ymf * y + zm);
                let k3 = am * (wc + 0.5 * h * k2) + f(s + 0.5 * h, ymf * y + zm);
                let k4 = a1 * (wc + h * k3) + f(s + h, y1f * y + z1);
                let next = wc + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                wv[c] = next;
                znew[i + 1][c] = next;
                defect = defect.max((next - z[i + 1][c]).abs());
            }
        }
        z = znew;
        if defect < picard_tol {
            return Ok(ys.iter().enumerate().map(|(c, &y)| y + z[n][c]).collect());
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        defect: f64::NAN,
    })
}

pub fn cmd_curves(cfg: &ScenarioConfig) -> Result<RunReport> {
    let system = cfg.build_system()?;
    gate_custom(cfg, &system)?;
    let (h_oracle, g_oracle) = cfg
        .oracle_maps()
        .ok_or_else(|| Error::Config("curves are available for catalog scenarios only".into()))?;
    let (a_const, f_scalar) = cfg.scalar_parts().expect("catalog scenarios are scalar");
    let a_scalar = move |_t: f64| a_const;

    let bounded = system.pert.c1.is_finite();
    let (window, tail) = if bounded {
        let ev = cfg.evaluator(system.clone())?;
        (ev.window, Some(ev.tail_bound))
    } else {
        (cfg.window.unwrap_or(12.0), None)
    };
    let step = cfg.step.max(4e-3);

    let xs = curve_grid(-3.0, 3.0, 2001);
    let h_num = batched_h_scalar(&a_scalar, &f_scalar, 0.0, &xs, window, step)?;
    let mut h_csv = String::from("x,H_oracle,H_numeric\n");
    for (x, hn) in xs.iter().zip(&h_num) {
        h_csv.push_str(&format!("{x},{},{hn}\n", h_oracle(*x)));
    }

    let ys = curve_grid(-2.7, 2.7, 2001);
    let g_num = batched_g_scalar(
        &a_scalar,
        &f_scalar,
        0.0,
        &ys,
        window,
        step,
        cfg.picard_tol,
        200,
    )?;
    let mut g_csv = String::from("y,G_oracle,G_numeric\n");
    for (y, gn) in ys.iter().zip(&g_num) {
        g_csv.push_str(&format!("{y},{},{gn}\n", g_oracle(*y)));
    }

    fs::create_dir_all(&cfg.out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", cfg.out.display())))?;
    let h_path = cfg.out.join("h_curve.csv");
    let g_path = cfg.out.join("g_curve.csv");
    write_atomic(&h_path, &h_csv)?;
    write_atomic(&g_path, &g_csv)?;

    let mut report = base_report(cfg, "curves", Some(window), tail);
    report.artifacts = vec![h_path.display().to_string(), g_path.display().to_string()];
    Ok(report)
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    let tmp = if tmp == path { path.with_extension("tmp2") } else { tmp };
    fs::write(&tmp, contents)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| Error::Config(format!("cannot rename to {}: {e}", path.display())))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Io(_) => 2,
        Error::IntegrationDiverged { .. }
        | Error::WindowTooLarge { .. }
        | Error::TailTooLarge { .. }
        | Error::NoConvergence { .. }
        | Error::Numeric(_) => 3,
        _ => 1,
    }
}

pub fn execute(cli: &Cli) -> Result<(RunReport, PathBuf)> {
    let cfg = ScenarioConfig::resolve(cli)?;
    let start = Instant::now();
    let mut report = match cli.command {
        Command::Verify => cmd_verify(&cfg),
        Command::Regularity => cmd_regularity(&cfg),
        Command::Curves => cmd_curves(&cfg),
        Command::Constants => cmd_constants(&cfg),
        Command::Spectrum => cmd_spectrum(&cfg),
    }?;
    if !cfg.deterministic {
        report.wall_clock_ms = Some(start.elapsed().as_millis());
    }
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Numeric(format!("report serialization: {e}")))?;
    fs::create_dir_all(&cfg.out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", cfg.out.display())))?;
    let path = cfg.out.join("report.json");
    write_atomic(&path, &json)?;
    Ok((report, path))
}

/// Full CLI run; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok((report, path)) => {
            println!(
                "{} [{}]: {} (report: {})",
                report.command,
                report.scenario,
                if report.pass { "pass" } else { "FAIL" },
                path.display()
            );
            for f in &report.failures {
                println!("  failure: {f}");
            }
            if report.pass {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli_with(cmd: Command, args: &[(&str, &str)]) -> Cli {
        let mut cli = Cli {
            command: cmd,
            config: None,
            scenario: None,
            eps: None,
            delta: None,
            tol: None,
            step: None,
            window: None,
            out: None,
            seed: None,
            deterministic: true,
        };
        for (k, v) in args {
            match *k {
                "scenario" => cli.scenario = Some(v.to_string()),
                "eps" => cli.eps = Some(v.parse().unwrap()),
                "delta" => cli.delta = Some(v.parse().unwrap()),
                "tol" => cli.tol = Some(v.parse().unwrap()),
                "step" => cli.step = Some(v.parse().unwrap()),
                "out" => cli.out = Some(PathBuf::from(v)),
                _ => panic!("unknown test arg {k}"),
            }
        }
        cli
    }

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("conjugacy-lab-test-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn config_file_parsing_and_override() {
        let dir = temp_dir("cfg");
        let path = dir.join("run.cfg");
        fs::write(&path, "# comment\nscenario = example-2.11\ndelta = 0.25\nseed = 7\n").unwrap();
        let mut cli = cli_with(Command::Constants, &[]);
        cli.config = Some(path);
        cli.delta = Some(0.75);
        let cfg = ScenarioConfig::resolve(&cli).unwrap();
        assert_eq!(cfg.scenario, "example-2.11");
        assert_eq!(cfg.delta, 0.75); // flag wins over file
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn unknown_config_key_rejected() {
        let dir = temp_dir("badkey");
        let path = dir.join("run.cfg");
        fs::write(&path, "frobnicate = 1\n").unwrap();
        let mut cli = cli_with(Command::Constants, &[]);
        cli.config = Some(path);
        assert!(matches!(ScenarioConfig::resolve(&cli), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_range_eps_rejected() {
        let cli = cli_with(Command::Constants, &[("scenario", "example-1.1"), ("eps", "0.4")]);
        let cfg = ScenarioConfig::resolve(&cli).unwrap();
        assert!(matches!(cfg.build_system(), Err(Error::Config(_))));
    }

    #[test]
    fn constants_report_example_11() {
        let cli = cli_with(Command::Constants, &[("out", "/tmp/clab-const")]);
        let (report, _) = execute(&cli).unwrap();
        let c = report.constants.unwrap();
        assert!((c.p1 - 2.5624).abs() < 1e-3);
        assert!((c.q.unwrap() - 0.3581).abs() < 1e-3);
        assert!((c.lambda.unwrap() - 0.9246).abs() < 2e-3);
        assert!((c.theta.unwrap() - 0.3).abs() < 1e-12);
        assert!(report.pass);
    }

    #[test]
    fn spectrum_report_perturbed_shift() {
        let cli = cli_with(
            Command::Spectrum,
            &[("scenario", "example-2.9"), ("out", "/tmp/clab-spec")],
        );
        let (report, _) = execute(&cli).unwrap();
        let s = report.spectrum.unwrap();
        assert_eq!(s.linear.intervals, vec![(-1.0, -1.0)]);
        let p = s.perturbed.unwrap();
        assert!((p.intervals[0].0 - (-0.9)).abs() < 1e-12);
        assert!(p.contraction);
    }

    #[test]
    fn deterministic_reports_are_byte_identical() {
        let dir = temp_dir("det");
        let cli = cli_with(
            Command::Constants,
            &[("scenario", "example-2.11"), ("out", dir.to_str().unwrap())],
        );
        execute(&cli).unwrap();
        let first = fs::read_to_string(dir.join("report.json")).unwrap();
        execute(&cli).unwrap();
        let second = fs::read_to_string(dir.join("report.json")).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn verify_example_211_passes_tightly() {
        let dir = temp_dir("verify211");
        let cli = cli_with(
            Command::Verify,
            &[
                ("scenario", "example-2.11"),
                ("delta", "0.5"),
                ("tol", "1e-7"),
                ("out", dir.to_str().unwrap()),
            ],
        );
        let (report, _) = execute(&cli).unwrap();
        assert!(report.pass, "failures: {:?}", report.failures);
        let v = report.verify.unwrap();
        assert!(v.conjugation_residual.unwrap() <= 1e-6);
        assert!(v.gronwall_all_pass);
    }

    #[test]
    fn verify_custom_r2_fails_a4() {
        // Constant Lipschitz modulus r = 2 with k = alpha = 1 gives
        // theta = 2 and must be rejected on hypothesis A4.
        let dir = temp_dir("customa4");
        let cfgfile = dir.join("run.cfg");
        fs::write(
            &cfgfile,
            "scenario = custom\na_diag = -1\npert = linear\npert_eps = 2\n",
        )
        .unwrap();
        let mut cli = cli_with(Command::Verify, &[("out", dir.to_str().unwrap())]);
        cli.config = Some(cfgfile);
        let (report, _) = execute(&cli).unwrap();
        assert!(!report.pass);
        assert!(report.failures.iter().any(|f| f.contains("not contracting")));
    }

    #[test]
    fn curves_write_expected_files() {
        let dir = temp_dir("curves");
        let cli = cli_with(
            Command::Curves,
            &[
                ("scenario", "example-2.11"),
                ("delta", "0.5"),
                ("tol", "1e-8"),
                ("out", dir.to_str().unwrap()),
            ],
        );
        let (report, _) = execute(&cli).unwrap();
        assert!(report.pass);
        let h = fs::read_to_string(dir.join("h_curve.csv")).unwrap();
        assert!(h.starts_with("x,H_oracle,H_numeric\n"));
        let g = fs::read_to_string(dir.join("g_curve.csv")).unwrap();
        assert!(g.starts_with("y,G_oracle,G_numeric\n"));
        // Numeric column tracks the affine oracle.
        for line in h.lines().skip(1).step_by(100) {
            let cols: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            assert!((cols[1] - cols[2]).abs() < 1e-5, "line {line}");
        }
    }

    #[test]
    fn curves_example_11_match_oracles() {
        let dir = temp_dir("curves11");
        let cli = cli_with(
            Command::Curves,
            &[("scenario", "example-1.1"), ("out", dir.to_str().unwrap())],
        );
        let (report, _) = execute(&cli).unwrap();
        assert!(report.pass);
        let p = Example11Params::new(0.1).unwrap();
        let h = fs::read_to_string(dir.join("h_curve.csv")).unwrap();
        let mut prev: Option<(f64, f64)> = None;
        for line in h.lines().skip(1) {
            let cols: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            // Oracle column is the exact closed form.
            assert!((cols[1] - oracle_h_11(p, cols[0])).abs() < 1e-12);
            // Numeric column tracks it at plotting fidelity.
            assert!((cols[1] - cols[2]).abs() < 1e-3, "line {line}");
            // Continuity across breakpoints: adjacent-row jump bounded by
            // twice the grid spacing (|H'| <= 1).
            if let Some((px, ph)) = prev {
                if cols[0] - px > 1e-6 {
                    assert!((cols[1] - ph).abs() < 2.0 * (cols[0] - px) + 1e-9);
                }
            }
            prev = Some((cols[0], cols[1]));
        }
        let g = fs::read_to_string(dir.join("g_curve.csv")).unwrap();
        for line in g.lines().skip(1) {
            let cols: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            assert!((cols[1] - oracle_g_11(p, cols[0])).abs() < 1e-12);
            assert!((cols[1] - cols[2]).abs() < 2e-3, "line {line}");
        }
    }

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code_for(&Error::Config("x".into())), 2);
        assert_eq!(
            exit_code_for(&Error::NoConvergence {
                iterations: 5,
                defect: 1.0
            }),
            3
        );
        assert_eq!(
            exit_code_for(&Error::WindowTooLarge { window: 1.0, s: 0.0 }),
            3
        );
    }
}
