//! Run configuration: a flat `key = value` document with dotted keys.
//!
//! Lines starting with `#` are comments. Lists are comma separated. Model
//! components are written `model.m<l> = <shape> <params...>` with shapes
//! `zero`, `poly c0 c1 ...`, `sine amplitude frequency [phase]` and
//! `exp scale rate`; every component is centered under the Uniform(0, 1)
//! covariate marginal when the model is built.
//!
//! Validation collects every violated condition and labels each with the
//! hypothesis it protects, e.g. `(F.2): k' must exceed k*d`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use crate::additive::{make_integration_density, IntegrationDensity};
use crate::error::Error;
use crate::estimators::{bandwidth_density, BandwidthSchedule, DensityMode};
use crate::kernels::{kernel_of_order, BaseKernel, Kernel1D};
use crate::process_sim::{AdditiveModelSpec, Link, MixingProcessSpec, Shape};

/// Every violation found while loading a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub violations: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration:")?;
        for v in &self.violations {
            write!(f, "\n  - {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

/// Monte Carlo study parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyParams {
    /// Zero-based coordinate `l`.
    pub coordinate: usize,
    /// Evaluation point `x_l`.
    pub x: f64,
    pub bias_correction: bool,
    pub alpha: f64,
    pub beta: f64,
    pub rate_t_grid: Vec<f64>,
    pub rate_replicas: usize,
    pub normality_horizon: f64,
    pub normality_replicas: usize,
    pub coverage_horizons: Vec<f64>,
    pub coverage_replicas: usize,
    pub density_rate_t_grid: Vec<f64>,
    pub density_rate_replicas: usize,
    pub modes_t_grid: Vec<f64>,
    pub modes_replicas: usize,
    /// Studies abort when more than this fraction of replicas fail.
    pub max_failed_fraction: f64,
}

/// Fully resolved and validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: String,
    pub dim: usize,
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub workers: usize,
    pub output_dir: String,
    pub kernel_base: BaseKernel,
    pub order_k: usize,
    pub order_kprime: usize,
    pub c_prime: f64,
    pub c1: f64,
    pub c1_per_coordinate: Option<Vec<f64>>,
    pub theta: Vec<f64>,
    pub cross_correlation: Option<Vec<f64>>,
    pub delta: f64,
    /// Horizon for single-path commands (`simulate`, `estimate`, `components`).
    pub horizon: f64,
    pub mu: f64,
    pub components: Vec<Shape>,
    pub noise_half_width: f64,
    /// `C_l` per coordinate.
    pub domain: Vec<(f64, f64)>,
    /// Radius of the neighbourhood `C^δ`.
    pub domain_delta: f64,
    pub q_support: Vec<(f64, f64)>,
    /// Points of the component grid on `C_l`.
    pub grid_points: usize,
    /// Points per axis of the density grid on `C`.
    pub density_grid_points: usize,
    pub quad_nodes: usize,
    pub density_mode: DensityMode,
    pub floor_fraction: f64,
    pub study: StudyParams,
}

impl Default for RunConfig {
    /// The shipped default scenario.
    fn default() -> Self {
        let pow2 = |a: u32, b: u32| (a..=b).map(|e| 2f64.powi(e as i32)).collect::<Vec<_>>();
        RunConfig {
            scenario: "default".into(),
            dim: 2,
            seed: 20_240_611,
            workers: 0,
            output_dir: "out".into(),
            kernel_base: BaseKernel::Epanechnikov,
            order_k: 2,
            order_kprime: 6,
            c_prime: 0.13,
            c1: 0.17,
            c1_per_coordinate: None,
            theta: vec![1.0, 1.0],
            cross_correlation: None,
            delta: 0.05,
            horizon: 4096.0,
            mu: 1.0,
            components: vec![
                Shape::Sine {
                    amplitude: 1.0,
                    frequency: 1.0,
                    phase: 0.0,
                },
                Shape::Polynomial(vec![-0.5, 1.0]),
            ],
            noise_half_width: 0.5,
            domain: vec![(0.1, 0.9); 2],
            domain_delta: 0.05,
            q_support: vec![(0.1, 0.9); 2],
            grid_points: 33,
            density_grid_points: 9,
            quad_nodes: 32,
            density_mode: DensityMode::KnownF,
            floor_fraction: 0.1,
            study: StudyParams {
                coordinate: 0,
                x: 0.5,
                bias_correction: true,
                alpha: 0.05,
                beta: 0.95,
                rate_t_grid: pow2(9, 13),
                rate_replicas: 200,
                normality_horizon: 4096.0,
                normality_replicas: 500,
                coverage_horizons: vec![2048.0, 4096.0],
                coverage_replicas: 500,
                density_rate_t_grid: pow2(9, 13),
                density_rate_replicas: 100,
                modes_t_grid: vec![1024.0, 4096.0, 16384.0],
                modes_replicas: 50,
                max_failed_fraction: 0.05,
            },
        }
    }
}

fn parse_list(v: &str) -> Result<Vec<f64>, String> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("'{s}' is not a number")))
        .collect()
}

fn parse_shape(v: &str) -> Result<Shape, String> {
    let mut toks = v.split_whitespace();
    let kind = toks.next().ok_or("empty component")?.to_ascii_lowercase();
    let nums: Vec<f64> = toks
        .map(|t| t.trim_end_matches(',').parse::<f64>().map_err(|_| format!("'{t}' is not a number")))
        .collect::<Result<_, _>>()?;
    match (kind.as_str(), nums.len()) {
        ("zero", 0) => Ok(Shape::Zero),
        ("poly", n) if n >= 1 => Ok(Shape::Polynomial(nums)),
        ("sine", 2) | ("sine", 3) => Ok(Shape::Sine {
            amplitude: nums[0],
            frequency: nums[1],
            phase: nums.get(2).copied().unwrap_or(0.0),
        }),
        ("exp", 2) => Ok(Shape::Exp {
            scale: nums[0],
            rate: nums[1],
        }),
        _ => Err(format!("cannot parse component '{v}'")),
    }
}

fn format_shape(s: &Shape) -> String {
    match s {
        Shape::Zero => "zero".into(),
        Shape::Polynomial(c) => format!("poly {}", join_space(c)),
        Shape::Sine {
            amplitude,
            frequency,
            phase,
        } => format!("sine {amplitude:?} {frequency:?} {phase:?}"),
        Shape::Exp { scale, rate } => format!("exp {scale:?} {rate:?}"),
    }
}

fn join_space(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

fn join_comma(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("'{v}' is not a boolean")),
    }
}

fn parse_interval(v: &str) -> Result<(f64, f64), String> {
    match parse_list(v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(format!("'{v}' is not an interval 'a, b'")),
    }
}

/// Splits a document into `(line, key, value)` entries.
fn tokenize(text: &str) -> Result<Vec<(usize, String, String)>, Vec<String>> {
    let mut out = Vec::new();
    let mut errs = Vec::new();
    let mut seen = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            errs.push(format!("line {}: expected 'key = value'", no + 1));
            continue;
        };
        let key = k.trim().to_string();
        if let Some(prev) = seen.insert(key.clone(), no + 1) {
            errs.push(format!("line {}: duplicate key '{key}' (first on line {prev})", no + 1));
        }
        out.push((no + 1, key, v.trim().to_string()));
    }
    if errs.is_empty() {
        Ok(out)
    } else {
        Err(errs)
    }
}

/// Parses and validates a configuration document.
pub fn validate_config(text: &str) -> Result<RunConfig, ConfigError> {
    let entries = tokenize(text).map_err(|violations| ConfigError { violations })?;
    let mut cfg = RunConfig::default();
    let mut errs = Vec::new();
    let mut components: BTreeMap<usize, Shape> = BTreeMap::new();
    let mut q_support: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    let mut domain_lower = None;
    let mut domain_upper = None;
    let mut theta = None;

    for (line, key, value) in &entries {
        let v = value.as_str();
        let r: Result<(), String> = (|| {
            let num = || v.parse::<f64>().map_err(|_| format!("'{v}' is not a number"));
            let int = || v.parse::<usize>().map_err(|_| format!("'{v}' is not a non-negative integer"));
            match key.as_str() {
                "scenario" => cfg.scenario = v.to_string(),
                "dim" => cfg.dim = int()?,
                "seed" => cfg.seed = v.parse::<u64>().map_err(|_| format!("'{v}' is not a u64 seed"))?,
                "workers" => cfg.workers = int()?,
                "output_dir" => cfg.output_dir = v.to_string(),
                "kernel.base" => cfg.kernel_base = v.parse().map_err(|e: Error| e.to_string())?,
                "kernel.order_k" => cfg.order_k = int()?,
                "kernel.order_kprime" => cfg.order_kprime = int()?,
                "bandwidth.c_prime" => cfg.c_prime = num()?,
                "bandwidth.c1" => cfg.c1 = num()?,
                "bandwidth.c1_per_coordinate" => cfg.c1_per_coordinate = Some(parse_list(v)?),
                "process.theta" => theta = Some(parse_list(v)?),
                "process.cross_correlation" => cfg.cross_correlation = Some(parse_list(v)?),
                "process.link" => {
                    if v != "gauss_cdf" {
                        return Err(format!("unknown link '{v}'"));
                    }
                }
                "process.delta" => cfg.delta = num()?,
                "process.horizon" => cfg.horizon = num()?,
                "model.mu" => cfg.mu = num()?,
                "model.noise_half_width" => cfg.noise_half_width = num()?,
                "domain.lower" => domain_lower = Some(num()?),
                "domain.upper" => domain_upper = Some(num()?),
                "domain.delta" => cfg.domain_delta = num()?,
                "grid.points" => cfg.grid_points = int()?,
                "grid.density_points" => cfg.density_grid_points = int()?,
                "quad.nodes" => cfg.quad_nodes = int()?,
                "density.mode" => {
                    cfg.density_mode = match v {
                        "known" | "known_f" => DensityMode::KnownF,
                        "estimated" | "estimated_f" => DensityMode::EstimatedF,
                        _ => return Err(format!("unknown density mode '{v}'")),
                    }
                }
                "density.floor_fraction" => cfg.floor_fraction = num()?,
                "study.coordinate" => {
                    let c = int()?;
                    if c == 0 {
                        return Err("coordinates are numbered from 1".into());
                    }
                    cfg.study.coordinate = c - 1;
                }
                "study.x" => cfg.study.x = num()?,
                "study.bias_correction" => cfg.study.bias_correction = parse_bool(v)?,
                "study.alpha" => cfg.study.alpha = num()?,
                "study.beta" => cfg.study.beta = num()?,
                "study.max_failed_fraction" => cfg.study.max_failed_fraction = num()?,
                "study.rate.t_grid" => cfg.study.rate_t_grid = parse_list(v)?,
                "study.rate.replicas" => cfg.study.rate_replicas = int()?,
                "study.normality.horizon" => cfg.study.normality_horizon = num()?,
                "study.normality.replicas" => cfg.study.normality_replicas = int()?,
                "study.coverage.horizons" => cfg.study.coverage_horizons = parse_list(v)?,
                "study.coverage.replicas" => cfg.study.coverage_replicas = int()?,
                "study.density_rate.t_grid" => cfg.study.density_rate_t_grid = parse_list(v)?,
                "study.density_rate.replicas" => cfg.study.density_rate_replicas = int()?,
                "study.density_modes.t_grid" => cfg.study.modes_t_grid = parse_list(v)?,
                "study.density_modes.replicas" => cfg.study.modes_replicas = int()?,
                k => {
                    if let Some(l) = k.strip_prefix("model.m") {
                        let l: usize = l.parse().map_err(|_| format!("bad component key '{k}'"))?;
                        components.insert(l, parse_shape(v)?);
                    } else if let Some(l) = k.strip_prefix("q.support.") {
                        let l: usize = l.parse().map_err(|_| format!("bad support key '{k}'"))?;
                        q_support.insert(l, parse_interval(v)?);
                    } else {
                        return Err(format!("unknown key '{k}'"));
                    }
                }
            }
            Ok(())
        })();
        if let Err(e) = r {
            errs.push(format!("line {line}: {key}: {e}"));
        }
    }
    if !errs.is_empty() {
        return Err(ConfigError { violations: errs });
    }

    let d = cfg.dim;
    cfg.theta = theta.unwrap_or_else(|| vec![1.0; d]);
    // Unspecified components fall back to the default scenario when d matches it.
    let defaults = RunConfig::default();
    if d == defaults.dim {
        for (l, shape) in defaults.components.into_iter().enumerate() {
            components.entry(l + 1).or_insert(shape);
        }
    }
    let keys: Vec<usize> = components.keys().copied().collect();
    if keys != (1..=d).collect::<Vec<_>>() {
        errs.push(format!("model: d = {d} requires exactly model.m1..model.m{d}, got {keys:?}"));
    }
    cfg.components = components.into_values().collect();
    let lo = domain_lower.unwrap_or(cfg.domain[0].0);
    let hi = domain_upper.unwrap_or(cfg.domain[0].1);
    cfg.domain = vec![(lo, hi); d];
    let mut supports = vec![(lo, hi); d];
    for (l, s) in q_support {
        if l == 0 || l > d {
            errs.push(format!("q.support.{l}: coordinate out of range 1..={d}"));
        } else {
            supports[l - 1] = s;
        }
    }
    cfg.q_support = supports;

    errs.extend(check(&cfg));
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError { violations: errs })
    }
}

fn check(cfg: &RunConfig) -> Vec<String> {
    let mut errs = Vec::new();
    let d = cfg.dim;
    if d == 0 {
        errs.push("dim: must be >= 1".into());
        return errs;
    }
    let (k, kp) = (cfg.order_k, cfg.order_kprime);
    if k < 2 || k % 2 != 0 {
        errs.push(format!("(K.3): regression kernel order k = {k} must be even and >= 2"));
    }
    if kp < 2 || kp % 2 != 0 {
        errs.push(format!("(K.4): density kernel order k' = {kp} must be even and >= 2"));
    }
    if kp <= k * d {
        errs.push(format!("(F.2): k' must exceed k*d (k' = {kp}, k*d = {})", k * d));
    }
    if !(cfg.c_prime.is_finite() && cfg.c_prime > 0.0) {
        errs.push("(H.1): bandwidth.c_prime must be positive".into());
    }
    if !(cfg.c1.is_finite() && cfg.c1 > 0.0) {
        errs.push("(H.2): bandwidth.c1 must be positive".into());
    }
    if let Some(per) = &cfg.c1_per_coordinate {
        if per.len() != d || per.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            errs.push(format!("(H.2): bandwidth.c1_per_coordinate needs {d} positive values"));
        }
    }
    if cfg.theta.len() != d || cfg.theta.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        errs.push(format!("(A.1): process.theta needs {d} strictly positive rates"));
    } else if let Err(e) = cfg.process().validate() {
        errs.push(format!("(A.1): {e}"));
    }
    if cfg.components.len() != d {
        errs.push(format!("model: {} components for d = {d}", cfg.components.len()));
    }
    if !(cfg.noise_half_width.is_finite() && cfg.noise_half_width >= 0.0) {
        errs.push("(C.1): model.noise_half_width must be finite and >= 0".into());
    }
    if !(cfg.delta.is_finite() && cfg.delta > 0.0) {
        errs.push("process.delta must be positive".into());
    }
    if !(cfg.horizon.is_finite() && cfg.horizon >= 10.0 * cfg.delta && cfg.horizon > 1.0) {
        errs.push("process.horizon must exceed 1 and cover at least 10 steps".into());
    }
    let (lo, hi) = cfg.domain[0];
    let dl = cfg.domain_delta;
    if !(lo < hi) {
        errs.push(format!("domain: lower {lo} must be below upper {hi}"));
    }
    if !(dl > 0.0 && lo - dl > 0.0 && hi + dl < 1.0) {
        errs.push(format!(
            "(F.1): the neighbourhood [{}, {}] of C must lie inside (0, 1) where f > 0",
            lo - dl,
            hi + dl
        ));
    }
    for (l, &(a, b)) in cfg.q_support.iter().enumerate() {
        if !(a < b) || a < cfg.domain[l].0 || b > cfg.domain[l].1 {
            errs.push(format!(
                "(Q.1): q.support.{} = [{a}, {b}] must be a non-empty interval inside C_{} = [{}, {}]",
                l + 1,
                l + 1,
                cfg.domain[l].0,
                cfg.domain[l].1
            ));
        }
    }
    if cfg.grid_points < 2 || cfg.density_grid_points < 2 {
        errs.push("grid: at least 2 points per axis".into());
    }
    if cfg.quad_nodes < 16 {
        errs.push("quad.nodes: at least 16 nodes per coordinate".into());
    }
    if !(cfg.floor_fraction > 0.0 && cfg.floor_fraction < 1.0) {
        errs.push("density.floor_fraction must lie in (0, 1)".into());
    }

    let s = &cfg.study;
    if s.coordinate >= d {
        errs.push(format!("study.coordinate must lie in 1..={d}"));
    } else {
        let (a, b) = cfg.domain[s.coordinate];
        if !(s.x >= a && s.x <= b) {
            errs.push(format!("study.x = {} must lie in C_l = [{a}, {b}]", s.x));
        }
    }
    if !(s.alpha > 0.0 && s.alpha < 0.5) {
        errs.push("study.alpha must lie in (0, 0.5)".into());
    }
    if !(s.beta > 0.5 && s.beta < 1.0) {
        errs.push("study.beta must lie in (0.5, 1)".into());
    }
    if !(s.max_failed_fraction >= 0.0 && s.max_failed_fraction < 1.0) {
        errs.push("study.max_failed_fraction must lie in [0, 1)".into());
    }
    let increasing = |g: &[f64]| g.windows(2).all(|w| w[0] < w[1]) && g.iter().all(|t| *t > 1.0);
    for (name, grid, min_len) in [
        ("study.rate.t_grid", &s.rate_t_grid, 3),
        ("study.density_rate.t_grid", &s.density_rate_t_grid, 3),
        ("study.density_modes.t_grid", &s.modes_t_grid, 2),
        ("study.coverage.horizons", &s.coverage_horizons, 2),
    ] {
        if grid.len() < min_len || !increasing(grid) {
            errs.push(format!(
                "{name}: needs >= {min_len} strictly increasing horizons > 1"
            ));
        }
    }
    if !(s.normality_horizon > 1.0) {
        errs.push("study.normality.horizon must exceed 1".into());
    }
    for (name, m) in [
        ("study.rate.replicas", s.rate_replicas),
        ("study.normality.replicas", s.normality_replicas),
        ("study.coverage.replicas", s.coverage_replicas),
        ("study.density_rate.replicas", s.density_rate_replicas),
    ] {
        if m < 100 {
            errs.push(format!("{name}: Monte Carlo studies need >= 100 replicas, got {m}"));
        }
    }
    if s.modes_replicas < 1 {
        errs.push("study.density_modes.replicas must be >= 1".into());
    }
    errs
}

impl RunConfig {
    pub fn process(&self) -> MixingProcessSpec {
        MixingProcessSpec {
            dim: self.dim,
            theta: self.theta.clone(),
            cross_correlation: self.cross_correlation.clone(),
            link: Link::GaussCdf,
        }
    }

    pub fn model(&self) -> crate::Result<AdditiveModelSpec> {
        AdditiveModelSpec::new(self.mu, self.components.clone(), self.noise_half_width)
    }

    pub fn schedule(&self) -> crate::Result<BandwidthSchedule> {
        let s = BandwidthSchedule {
            c_prime: self.c_prime,
            c1: self.c1,
            c1_per_coordinate: self.c1_per_coordinate.clone(),
            k: self.order_k,
            k_prime: self.order_kprime,
            d: self.dim,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn regression_kernel(&self) -> crate::Result<Kernel1D> {
        kernel_of_order(self.kernel_base, self.order_k)
    }

    pub fn density_kernel(&self) -> crate::Result<Kernel1D> {
        kernel_of_order(self.kernel_base, self.order_kprime)
    }

    pub fn integration_density(&self) -> crate::Result<IntegrationDensity> {
        let factors = self
            .q_support
            .iter()
            .zip(&self.domain)
            .map(|(s, c)| make_integration_density(*s, self.order_k, *c))
            .collect::<crate::Result<Vec<_>>>()?;
        IntegrationDensity::new(factors)
    }

    /// Component grid on `C_l`.
    pub fn component_grid(&self, l: usize) -> Vec<f64> {
        let (a, b) = self.domain[l];
        crate::quadrature::linspace(a, b, self.grid_points)
    }

    /// Tensor grid on `C` used for density sup-norms and the floor.
    pub fn density_grid(&self) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = self
            .domain
            .iter()
            .map(|&(a, b)| crate::quadrature::linspace(a, b, self.density_grid_points))
            .collect();
        crate::estimators::tensor_points(&axes)
    }

    /// Every horizon used by any study, sorted and deduplicated.
    pub fn all_study_horizons(&self) -> Vec<f64> {
        let s = &self.study;
        let mut all: Vec<f64> = s
            .rate_t_grid
            .iter()
            .chain(&s.coverage_horizons)
            .chain(&s.density_rate_t_grid)
            .chain(&s.modes_t_grid)
            .copied()
            .chain([s.normality_horizon, self.horizon])
            .collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }

    /// Resolved bandwidths `(T, h_T, h_{l,T}...)` for each horizon.
    pub fn resolved_bandwidths(&self) -> crate::Result<Vec<(f64, f64, Vec<f64>)>> {
        let sched = self.schedule()?;
        self.all_study_horizons()
            .into_iter()
            .map(|t| Ok((t, bandwidth_density(t, &sched)?, sched.regression_bandwidths(t)?)))
            .collect()
    }

    /// Canonical text form: every resolved key in a fixed order. Two configs
    /// are equivalent iff their canonical texts are equal.
    pub fn canonical_text(&self) -> String {
        let s = &self.study;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("scenario", self.scenario.clone());
        kv("dim", self.dim.to_string());
        kv("seed", self.seed.to_string());
        kv("kernel.base", self.kernel_base.to_string());
        kv("kernel.order_k", self.order_k.to_string());
        kv("kernel.order_kprime", self.order_kprime.to_string());
        kv("bandwidth.c_prime", format!("{:?}", self.c_prime));
        kv("bandwidth.c1", format!("{:?}", self.c1));
        if let Some(per) = &self.c1_per_coordinate {
            kv("bandwidth.c1_per_coordinate", join_comma(per));
        }
        kv("process.theta", join_comma(&self.theta));
        if let Some(c) = &self.cross_correlation {
            kv("process.cross_correlation", join_comma(c));
        }
        kv("process.link", "gauss_cdf".into());
        kv("process.delta", format!("{:?}", self.delta));
        kv("process.horizon", format!("{:?}", self.horizon));
        kv("model.mu", format!("{:?}", self.mu));
        for (l, c) in self.components.iter().enumerate() {
            kv(&format!("model.m{}", l + 1), format_shape(c));
        }
        kv("model.noise_half_width", format!("{:?}", self.noise_half_width));
        kv("domain.lower", format!("{:?}", self.domain[0].0));
        kv("domain.upper", format!("{:?}", self.domain[0].1));
        kv("domain.delta", format!("{:?}", self.domain_delta));
        for (l, (a, b)) in self.q_support.iter().enumerate() {
            kv(&format!("q.support.{}", l + 1), format!("{a:?}, {b:?}"));
        }
        kv("grid.points", self.grid_points.to_string());
        kv("grid.density_points", self.density_grid_points.to_string());
        kv("quad.nodes", self.quad_nodes.to_string());
        kv(
            "density.mode",
            match self.density_mode {
                DensityMode::KnownF => "known".into(),
                DensityMode::EstimatedF => "estimated".into(),
            },
        );
        kv("density.floor_fraction", format!("{:?}", self.floor_fraction));
        kv("study.coordinate", (s.coordinate + 1).to_string());
        kv("study.x", format!("{:?}", s.x));
        kv("study.bias_correction", s.bias_correction.to_string());
        kv("study.alpha", format!("{:?}", s.alpha));
        kv("study.beta", format!("{:?}", s.beta));
        kv("study.max_failed_fraction", format!("{:?}", s.max_failed_fraction));
        kv("study.rate.t_grid", join_comma(&s.rate_t_grid));
        kv("study.rate.replicas", s.rate_replicas.to_string());
        kv("study.normality.horizon", format!("{:?}", s.normality_horizon));
        kv("study.normality.replicas", s.normality_replicas.to_string());
        kv("study.coverage.horizons", join_comma(&s.coverage_horizons));
        kv("study.coverage.replicas", s.coverage_replicas.to_string());
        kv("study.density_rate.t_grid", join_comma(&s.density_rate_t_grid));
        kv("study.density_rate.replicas", s.density_rate_replicas.to_string());
        kv("study.density_modes.t_grid", join_comma(&s.modes_t_grid));
        kv("study.density_modes.replicas", s.modes_replicas.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default_scenario() {
        let cfg = validate_config("# nothing\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn kprime_too_small_cites_f2() {
        let err = validate_config("kernel.order_k = 2\nkernel.order_kprime = 4\n").unwrap_err();
        assert!(err.violations.iter().any(|v| v.starts_with("(F.2)")), "{err}");
        assert!(validate_config("kernel.order_k = 2\nkernel.order_kprime = 6\n").is_ok());
    }

    #[test]
    fn q_support_outside_domain_cites_q1() {
        let err = validate_config("q.support.1 = 0, 1\n").unwrap_err();
        assert!(err.violations.iter().any(|v| v.starts_with("(Q.1)")), "{err}");
    }

    #[test]
    fn neighbourhood_must_stay_in_cube() {
        let err = validate_config("domain.lower = 0.02\n").unwrap_err();
        assert!(err.violations.iter().any(|v| v.starts_with("(F.1)")), "{err}");
    }

    #[test]
    fn all_violations_are_collected() {
        let text = "kernel.order_kprime = 3\nbandwidth.c1 = -1\nprocess.theta = 1, 0\nstudy.rate.replicas = 10\n";
        let err = validate_config(text).unwrap_err();
        let labels: Vec<&str> = err.violations.iter().map(|v| &v[..5]).collect();
        for l in ["(K.4)", "(F.2)", "(H.2)", "(A.1)"] {
            assert!(labels.contains(&l), "{l} missing from {err}");
        }
        assert!(err.violations.iter().any(|v| v.contains(">= 100 replicas")));
    }

    #[test]
    fn syntax_errors() {
        assert!(validate_config("nonsense line\n").is_err());
        assert!(validate_config("seed = 1\nseed = 2\n").is_err());
        assert!(validate_config("frobnicate = 1\n").is_err());
        assert!(validate_config("model.m1 = cosine 1\n").is_err());
    }

    #[test]
    fn three_dimensional_model() {
        let text = "dim = 3\nkernel.order_kprime = 8\nmodel.m1 = sine 1 1\nmodel.m2 = poly 0 1\nmodel.m3 = exp 1 1\n";
        let cfg = validate_config(text).unwrap();
        assert_eq!(cfg.dim, 3);
        assert_eq!(cfg.theta, vec![1.0; 3]);
        assert_eq!(cfg.domain.len(), 3);
        assert!(cfg.model().is_ok());
        let err = validate_config("dim = 3\nkernel.order_kprime = 6\nmodel.m1 = zero\nmodel.m2 = zero\nmodel.m3 = zero\n").unwrap_err();
        assert!(err.violations.iter().any(|v| v.starts_with("(F.2)")));
    }

    #[test]
    fn canonical_text_roundtrips() {
        let text = "seed = 7\nmodel.m2 = poly 0.5 -1 2\nstudy.coordinate = 2\nstudy.x = 0.3\nbandwidth.c1_per_coordinate = 0.2, 0.3\n";
        let cfg = validate_config(text).unwrap();
        let again = validate_config(&cfg.canonical_text()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.canonical_text(), again.canonical_text());
        assert_ne!(cfg.canonical_text(), RunConfig::default().canonical_text());
    }

    #[test]
    fn resolved_bandwidths_cover_all_horizons() {
        let cfg = RunConfig::default();
        let bw = cfg.resolved_bandwidths().unwrap();
        assert!(bw.iter().any(|(t, _, _)| *t == 16384.0));
        assert!(bw.windows(2).all(|w| w[0].1 > w[1].1 && w[0].2[0] > w[1].2[0]));
    }

    proptest::proptest! {
        #[test]
        fn canonical_text_is_a_fixed_point(seed in proptest::prelude::any::<u64>(), c1 in 0.05f64..0.5, x in 0.1f64..0.9, amp in -3.0f64..3.0) {
            let text = format!("seed = {seed}\nbandwidth.c1 = {c1}\nstudy.x = {x}\nmodel.m1 = sine {amp} 1\n");
            let cfg = validate_config(&text).unwrap();
            let again = validate_config(&cfg.canonical_text()).unwrap();
            proptest::prop_assert_eq!(&cfg, &again);
        }
    }
}
