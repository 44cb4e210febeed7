//! Stationary, exponentially mixing covariate paths with a known response
//! model.
//!
//! The latent driver is a stationary Ornstein–Uhlenbeck process sampled with
//! its exact transition, one coordinate per regressor. Mapping each latent
//! coordinate through the standard normal CDF gives covariates whose
//! stationary marginals are Uniform(0, 1); with independent coordinates the
//! joint stationary density is identically 1 on the open unit cube. Mixing is
//! geometric (the OU autocorrelation is `exp(-theta * lag)`), so any
//! polynomial mixing requirement holds.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::quadrature::Rule;

/// Odd constant used to split a master seed into per-replica seeds.
pub const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;
/// Stream tag mixed into a path seed to seed the response noise.
pub const NOISE_STREAM: u64 = 0xD1B5_4A32_D192_ED03;
/// Boundary guard for the link function.
pub const LINK_EPS: f64 = 1e-12;

/// `seed_i = master XOR (i * 0x9E3779B97F4A7C15)` (wrapping).
pub fn split_seed(master: u64, index: u64) -> u64 {
    master ^ index.wrapping_mul(SEED_STRIDE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    GaussCdf,
}

/// Latent OU driver and link.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingProcessSpec {
    pub dim: usize,
    pub theta: Vec<f64>,
    /// Row-major `d x d` correlation of the driving noise.
    pub cross_correlation: Option<Vec<f64>>,
    pub link: Link,
}

impl MixingProcessSpec {
    pub const MIXING_NOTE: &'static str = "geometric: alpha(t) <= C exp(-min(theta) t), \
         so alpha(t) = O(t^-b) for every b > 0";

    /// Independent coordinates with common rate `theta`.
    pub fn independent(dim: usize, theta: f64) -> Result<Self> {
        let spec = MixingProcessSpec {
            dim,
            theta: vec![theta; dim],
            cross_correlation: None,
            link: Link::GaussCdf,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidArgument("process dimension must be >= 1".into()));
        }
        if self.theta.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: self.theta.len(),
            });
        }
        if self.theta.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::InvalidArgument(
                "mean-reversion rates must be strictly positive".into(),
            ));
        }
        if self.cross_correlation.is_some() {
            self.noise_cholesky()?;
            if self.theta.iter().any(|t| *t != self.theta[0]) {
                return Err(Error::InvalidArgument(
                    "correlated driving noise requires a common mean-reversion rate \
                     (otherwise the correlation is not stationary)"
                        .into(),
                ));
            }
        }
        Ok(())
    }

    fn noise_cholesky(&self) -> Result<Option<DMatrix<f64>>> {
        let Some(c) = &self.cross_correlation else {
            return Ok(None);
        };
        let d = self.dim;
        if c.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                got: c.len(),
            });
        }
        let m = DMatrix::from_row_slice(d, d, c);
        for i in 0..d {
            if (m[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument("correlation diagonal must be 1".into()));
            }
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument("correlation must be symmetric".into()));
                }
            }
        }
        let chol = m.cholesky().ok_or_else(|| {
            Error::InvalidArgument("correlation must be positive definite".into())
        })?;
        Ok(Some(chol.l()))
    }

    /// Stationary density of the covariates at `x`: 1 on the open cube for
    /// independent coordinates, the Gaussian copula density otherwise.
    pub fn stationary_density(&self, x: &[f64]) -> f64 {
        if x.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return 0.0;
        }
        let Some(c) = &self.cross_correlation else {
            return 1.0;
        };
        let d = self.dim;
        let r = DMatrix::from_row_slice(d, d, c);
        let z = DVector::from_iterator(d, x.iter().map(|&u| normal_quantile(u)));
        let Some(chol) = r.cholesky() else {
            return f64::NAN;
        };
        let det: f64 = chol.l().diagonal().iter().map(|v| v * v).product();
        let rinv_z = chol.solve(&z);
        let quad = z.dot(&rinv_z) - z.dot(&z);
        (-0.5 * quad).exp() / det.sqrt()
    }

    /// Stationary marginal density of one covariate (Uniform(0, 1)).
    pub fn marginal_density(&self, x: f64) -> f64 {
        if x > 0.0 && x < 1.0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Number of grid points `floor(T / delta) + 1`.
pub fn grid_len(delta: f64, horizon: f64) -> usize {
    ((horizon / delta) * (1.0 + 1e-12)).floor() as usize + 1
}

/// Latent OU path, row-major `n x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    pub dim: usize,
    pub delta: f64,
    pub horizon: f64,
    pub seed: u64,
    pub values: Vec<f64>,
}

impl LatentPath {
    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn coordinate(&self, l: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(l).step_by(self.dim).copied()
    }
}

/// Exact discretization of the stationary OU recursion
/// `Z_{i+1} = e^{-theta delta} Z_i + sqrt(1 - e^{-2 theta delta}) xi_i`
/// with `Z_0` drawn from the stationary law.
pub fn simulate_latent(
    spec: &MixingProcessSpec,
    delta: f64,
    horizon: f64,
    seed: u64,
) -> Result<LatentPath> {
    spec.validate()?;
    if !(delta.is_finite() && delta > 0.0) || !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidArgument(
            "step and horizon must be positive".into(),
        ));
    }
    if horizon < 10.0 * delta {
        return Err(Error::InvalidArgument(
            "horizon must cover at least 10 steps".into(),
        ));
    }
    let d = spec.dim;
    let n = grid_len(delta, horizon);
    let decay: Vec<f64> = spec.theta.iter().map(|t| (-t * delta).exp()).collect();
    let innov: Vec<f64> = spec
        .theta
        .iter()
        .map(|t| (-(-2.0 * t * delta).exp_m1()).sqrt())
        .collect();
    let chol = spec.noise_cholesky()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xi = vec![0.0; d];
    let draw = |rng: &mut ChaCha8Rng, out: &mut [f64]| {
        for v in out.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        if let Some(l) = &chol {
            let raw = DVector::from_column_slice(out);
            let corr = l * raw;
            out.copy_from_slice(corr.as_slice());
        }
    };

    let mut values = Vec::with_capacity(n * d);
    draw(&mut rng, &mut xi);
    values.extend_from_slice(&xi);
    for i in 1..n {
        draw(&mut rng, &mut xi);
        let prev = (i - 1) * d;
        for l in 0..d {
            let z = decay[l] * values[prev + l] + innov[l] * xi[l];
            values.push(z);
        }
    }
    Ok(LatentPath {
        dim: d,
        delta,
        horizon,
        seed,
        values,
    })
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().inverse_cdf(p)
}

/// Coordinate-wise `Phi`, clamped to `(eps, 1 - eps)`.
pub fn apply_link(latent: &LatentPath, spec: &MixingProcessSpec) -> Vec<f64> {
    match spec.link {
        Link::GaussCdf => latent
            .values
            .iter()
            .map(|&z| normal_cdf(z).clamp(LINK_EPS, 1.0 - LINK_EPS))
            .collect(),
    }
}

/// Analytic shape of one raw additive component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Zero,
    /// `Σ c_i x^i`
    Polynomial(Vec<f64>),
    /// `a sin(2 pi f x + phase)`
    Sine {
        amplitude: f64,
        frequency: f64,
        phase: f64,
    },
    /// `a exp(r x)`
    Exp { scale: f64, rate: f64 },
}

impl Shape {
    pub fn eval(&self, x: f64) -> f64 {
        self.derivative(x, 0)
    }

    /// Analytic `k`-th derivative (`k = 0` is the function itself).
    pub fn derivative(&self, x: f64, k: usize) -> f64 {
        match self {
            Shape::Zero => 0.0,
            Shape::Polynomial(c) => {
                let mut acc = 0.0;
                for (i, ci) in c.iter().enumerate().skip(k).rev() {
                    let falling: f64 = ((i - k + 1)..=i).map(|v| v as f64).product();
                    acc = acc * x + ci * falling;
                }
                acc
            }
            Shape::Sine {
                amplitude,
                frequency,
                phase,
            } => {
                let w = 2.0 * std::f64::consts::PI * frequency;
                amplitude
                    * w.powi(k as i32)
                    * (w * x + phase + k as f64 * std::f64::consts::FRAC_PI_2).sin()
            }
            Shape::Exp { scale, rate } => scale * rate.powi(k as i32) * (rate * x).exp(),
        }
    }
}

/// A centered component `m_l = shape - offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub shape: Shape,
    pub offset: f64,
}

impl Component {
    pub fn eval(&self, x: f64) -> f64 {
        self.shape.eval(x) - self.offset
    }

    pub fn derivative(&self, x: f64, k: usize) -> f64 {
        if k == 0 {
            self.eval(x)
        } else {
            self.shape.derivative(x, k)
        }
    }
}

const CENTERING_NODES: usize = 128;

/// `m_l - ∫ m_l f_l`, reporting the subtracted constant as the offset.
pub fn center_component<F: Fn(f64) -> f64>(raw: Shape, marginal: F, support: (f64, f64)) -> Component {
    let rule = Rule::gauss_legendre_on(CENTERING_NODES, support.0, support.1);
    let offset = rule.integrate(|x| raw.eval(x) * marginal(x));
    Component { shape: raw, offset }
}

/// Ground-truth additive model with bounded uniform noise.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveModelSpec {
    pub mu: f64,
    pub components: Vec<Component>,
    pub noise_half_width: f64,
    /// Bound `M` with `|psi(Y)| <= M`.
    pub psi_bound: f64,
}

impl AdditiveModelSpec {
    /// Centers every shape under the Uniform(0, 1) covariate marginal.
    pub fn new(mu: f64, shapes: Vec<Shape>, noise_half_width: f64) -> Result<Self> {
        let components = shapes
            .into_iter()
            .map(|s| center_component(s, |_| 1.0, (0.0, 1.0)))
            .collect();
        Self::from_components(mu, components, noise_half_width)
    }

    /// Uses the given offsets as-is; rejects uncentered components.
    pub fn from_components(mu: f64, components: Vec<Component>, noise_half_width: f64) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one component".into()));
        }
        if !(noise_half_width.is_finite() && noise_half_width >= 0.0) {
            return Err(Error::InvalidArgument("noise half-width must be >= 0".into()));
        }
        let grid = crate::quadrature::linspace(0.0, 1.0, 4001);
        let sup_sum: f64 = components
            .iter()
            .map(|c| grid.iter().map(|&x| c.eval(x).abs()).fold(0.0, f64::max))
            .sum();
        let model = AdditiveModelSpec {
            mu,
            components,
            noise_half_width,
            psi_bound: (mu.abs() + sup_sum + noise_half_width) * (1.0 + 1e-9),
        };
        model.check_centered()?;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    /// Verifies `E m_l(X_l) = 0` under Uniform(0, 1) within 1e-8.
    pub fn check_centered(&self) -> Result<()> {
        let rule = Rule::gauss_legendre_on(CENTERING_NODES, 0.0, 1.0);
        for (index, c) in self.components.iter().enumerate() {
            let mean = rule.integrate(|x| c.eval(x));
            if mean.abs() > 1e-8 {
                return Err(Error::Uncentered { index, mean });
            }
        }
        Ok(())
    }

    /// `m(x) = mu + Σ m_l(x_l)`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.mu
            + self
                .components
                .iter()
                .zip(x)
                .map(|(c, &v)| c.eval(v))
                .sum::<f64>()
    }

    /// Identity clipped to `[-M, M]`.
    #[inline]
    pub fn psi(&self, y: f64) -> f64 {
        y.clamp(-self.psi_bound, self.psi_bound)
    }
}

/// Discretized record of `(X_t, Y_t)` on `t_i = i delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub dim: usize,
    pub delta: f64,
    pub horizon: f64,
    pub seed: u64,
    pub times: Vec<f64>,
    /// Row-major `n x d`.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl SamplePath {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    #[inline]
    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if self.y.len() != n || self.x.len() != n * self.dim {
            return Err(Error::Format(format!(
                "inconsistent lengths: {} times, {} x values for d = {}, {} responses",
                n,
                self.x.len(),
                self.dim,
                self.y.len()
            )));
        }
        if self.x.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(Error::Format("covariates must lie in (0, 1)".into()));
        }
        if !(self.delta > 0.0 && self.horizon > 0.0) {
            return Err(Error::Format("step and horizon must be positive".into()));
        }
        Ok(())
    }
}

/// `Y_i = m(X_i) + eps_i` with `eps_i ~ U[-w, w]` i.i.d.
pub fn gen_response(
    x: Vec<f64>,
    delta: f64,
    horizon: f64,
    model: &AdditiveModelSpec,
    seed: u64,
) -> Result<SamplePath> {
    model.check_centered()?;
    let d = model.dim();
    if x.len() % d != 0 {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len() % d,
        });
    }
    let n = x.len() / d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = model.noise_half_width;
    let y = x
        .chunks_exact(d)
        .map(|row| {
            let noise = if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
            model.eval(row) + noise
        })
        .collect();
    Ok(SamplePath {
        dim: d,
        delta,
        horizon,
        seed,
        times: (0..n).map(|i| i as f64 * delta).collect(),
        x,
        y,
    })
}

/// Latent simulation, link and response in one step. The response noise is
/// seeded with `seed ^ NOISE_STREAM`.
pub fn simulate_path(
    process: &MixingProcessSpec,
    model: &AdditiveModelSpec,
    delta: f64,
    horizon: f64,
    seed: u64,
) -> Result<SamplePath> {
    if process.dim != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: process.dim,
            got: model.dim(),
        });
    }
    let latent = simulate_latent(process, delta, horizon, seed)?;
    let x = apply_link(&latent, process);
    let mut path = gen_response(x, delta, horizon, model, seed ^ NOISE_STREAM)?;
    path.seed = seed;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::sum;

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = sum(v) / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, var)
    }

    fn default_model() -> AdditiveModelSpec {
        AdditiveModelSpec::new(
            1.0,
            vec![
                Shape::Sine {
                    amplitude: 1.0,
                    frequency: 1.0,
                    phase: 0.0,
                },
                Shape::Polynomial(vec![0.0, 1.0]),
            ],
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn latent_is_deterministic() {
        let spec = MixingProcessSpec::independent(2, 1.0).unwrap();
        let a = simulate_latent(&spec, 0.1, 50.0, 7).unwrap();
        let b = simulate_latent(&spec, 0.1, 50.0, 7).unwrap();
        assert_eq!(a, b);
        let c = simulate_latent(&spec, 0.1, 50.0, 8).unwrap();
        assert_ne!(a.values, c.values);
        assert_eq!(a.len(), 501);
    }

    #[test]
    fn latent_rejects_bad_arguments() {
        let spec = MixingProcessSpec::independent(1, 1.0).unwrap();
        assert!(simulate_latent(&spec, 0.0, 10.0, 1).is_err());
        assert!(simulate_latent(&spec, 0.1, -1.0, 1).is_err());
        assert!(simulate_latent(&spec, 0.1, 0.5, 1).is_err());
        assert!(MixingProcessSpec::independent(1, 0.0).is_err());
    }

    #[test]
    fn latent_stationary_moments() {
        let spec = MixingProcessSpec::independent(1, 1.0).unwrap();
        let p = simulate_latent(&spec, 0.05, 1e4, 11).unwrap();
        let (m, v) = mean_var(&p.values);
        // With unit rate the effective sample size is about T / 2.
        assert!(m.abs() < 0.05, "mean {m}");
        assert!((v - 1.0).abs() < 0.05, "var {v}");
    }

    #[test]
    fn latent_lag_one_autocorrelation() {
        let spec = MixingProcessSpec::independent(1, 1.0).unwrap();
        let p = simulate_latent(&spec, 0.1, 1e4, 3).unwrap();
        let z = &p.values;
        let (m, v) = mean_var(z);
        let n = z.len();
        let cov = (0..n - 1).map(|i| (z[i] - m) * (z[i + 1] - m)).sum::<f64>() / (n - 1) as f64;
        let rho = cov / v;
        assert!((rho - (-0.1f64).exp()).abs() < 0.01, "rho {rho}");
    }

    #[test]
    fn autocorrelation_decays_exponentially() {
        let spec = MixingProcessSpec::independent(1, 2.0).unwrap();
        let p = simulate_latent(&spec, 0.05, 2e4, 5).unwrap();
        let z = &p.values;
        let (m, v) = mean_var(z);
        for lag_steps in [5usize, 10, 20] {
            let n = z.len() - lag_steps;
            let cov = (0..n).map(|i| (z[i] - m) * (z[i + lag_steps] - m)).sum::<f64>() / n as f64;
            let expect = (-2.0 * 0.05 * lag_steps as f64).exp();
            assert!((cov / v - expect).abs() < 0.03, "lag {lag_steps}: {}", cov / v);
        }
    }

    #[test]
    fn link_median_and_guard() {
        let spec = MixingProcessSpec::independent(1, 1.0).unwrap();
        let latent = LatentPath {
            dim: 1,
            delta: 0.1,
            horizon: 1.0,
            seed: 0,
            values: vec![0.0, f64::INFINITY, f64::NEG_INFINITY, 40.0],
        };
        let x = apply_link(&latent, &spec);
        assert_eq!(x[0], 0.5);
        assert_eq!(x[1], 1.0 - LINK_EPS);
        assert_eq!(x[2], LINK_EPS);
        assert!(x.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn linked_marginal_is_uniform() {
        let spec = MixingProcessSpec::independent(1, 1.0).unwrap();
        let latent = simulate_latent(&spec, 0.05, 1e4, 21).unwrap();
        let mut x = apply_link(&latent, &spec);
        x.sort_by(f64::total_cmp);
        let n = x.len() as f64;
        let ks = x
            .iter()
            .enumerate()
            .map(|(i, v)| ((i as f64 + 1.0) / n - v).abs().max((v - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "ks {ks}");
    }

    #[test]
    fn correlated_noise_validation() {
        let mut spec = MixingProcessSpec {
            dim: 2,
            theta: vec![1.0, 1.0],
            cross_correlation: Some(vec![1.0, 0.5, 0.5, 1.0]),
            link: Link::GaussCdf,
        };
        assert!(spec.validate().is_ok());
        spec.cross_correlation = Some(vec![1.0, 0.5, 0.4, 1.0]);
        assert!(spec.validate().is_err());
        spec.cross_correlation = Some(vec![1.0, 1.5, 1.5, 1.0]);
        assert!(spec.validate().is_err());
        spec.cross_correlation = Some(vec![1.0, 0.5, 0.5, 1.0]);
        spec.theta = vec![1.0, 2.0];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn copula_density_integrates_to_one() {
        let spec = MixingProcessSpec {
            dim: 2,
            theta: vec![1.0, 1.0],
            cross_correlation: Some(vec![1.0, 0.4, 0.4, 1.0]),
            link: Link::GaussCdf,
        };
        let rules = vec![Rule::gauss_legendre_on(200, 0.0, 1.0); 2];
        let total = crate::quadrature::tensor_integrate(&rules, |x| spec.stationary_density(x));
        assert!((total - 1.0).abs() < 1e-3, "{total}");
        let indep = MixingProcessSpec::independent(2, 1.0).unwrap();
        assert_eq!(indep.stationary_density(&[0.3, 0.7]), 1.0);
        assert_eq!(indep.stationary_density(&[1.3, 0.7]), 0.0);
    }

    #[test]
    fn centering_offsets() {
        let lin = center_component(Shape::Polynomial(vec![0.0, 1.0]), |_| 1.0, (0.0, 1.0));
        assert!((lin.offset - 0.5).abs() < 1e-14);
        assert!((lin.eval(0.8) - 0.3).abs() < 1e-14);
        let s = center_component(
            Shape::Sine {
                amplitude: 1.0,
                frequency: 1.0,
                phase: 0.0,
            },
            |_| 1.0,
            (0.0, 1.0),
        );
        assert!(s.offset.abs() < 1e-10);
        let twice = center_component(
            Shape::Polynomial(vec![-0.5, 1.0]),
            |_| 1.0,
            (0.0, 1.0),
        );
        assert!(twice.offset.abs() < 1e-10);
    }

    #[test]
    fn shape_derivatives() {
        let p = Shape::Polynomial(vec![1.0, 2.0, 3.0, 4.0]);
        // 1 + 2x + 3x^2 + 4x^3
        assert_eq!(p.eval(2.0), 1.0 + 4.0 + 12.0 + 32.0);
        assert_eq!(p.derivative(2.0, 1), 2.0 + 12.0 + 48.0);
        assert_eq!(p.derivative(2.0, 2), 6.0 + 48.0);
        assert_eq!(p.derivative(2.0, 3), 24.0);
        assert_eq!(p.derivative(2.0, 4), 0.0);
        let s = Shape::Sine {
            amplitude: 1.0,
            frequency: 1.0,
            phase: 0.0,
        };
        let w = 2.0 * std::f64::consts::PI;
        assert!((s.derivative(0.1, 2) + w * w * (w * 0.1).sin()).abs() < 1e-12);
        let e = Shape::Exp { scale: 2.0, rate: 3.0 };
        assert!((e.derivative(0.5, 2) - 18.0 * 1.5f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn uncentered_model_rejected() {
        let c = Component {
            shape: Shape::Polynomial(vec![0.0, 1.0]),
            offset: 0.0,
        };
        let err = AdditiveModelSpec::from_components(0.0, vec![c], 0.1).unwrap_err();
        assert!(matches!(err, Error::Uncentered { index: 0, .. }));
    }

    #[test]
    fn noiseless_response_is_exact() {
        let model = AdditiveModelSpec::new(
            1.0,
            vec![
                Shape::Sine {
                    amplitude: 1.0,
                    frequency: 1.0,
                    phase: 0.0,
                },
                Shape::Polynomial(vec![0.0, 1.0]),
            ],
            0.0,
        )
        .unwrap();
        let spec = MixingProcessSpec::independent(2, 1.0).unwrap();
        let path = simulate_path(&spec, &model, 0.1, 20.0, 4).unwrap();
        for i in 0..path.len() {
            assert_eq!(path.y[i], model.eval(path.x_row(i)));
        }
    }

    #[test]
    fn response_bounded_and_consistent() {
        let model = default_model();
        let spec = MixingProcessSpec::independent(2, 1.0).unwrap();
        let path = simulate_path(&spec, &model, 0.05, 500.0, 9).unwrap();
        path.validate().unwrap();
        assert_eq!(path.len(), 10001);
        assert!(path.y.iter().all(|y| y.abs() <= model.psi_bound));
        assert!((model.psi_bound - (1.0 + 1.0 + 0.5 + 0.5)).abs() < 1e-6);
        let resid: Vec<f64> = (0..path.len()).map(|i| path.y[i] - model.eval(path.x_row(i))).collect();
        let (m, _) = mean_var(&resid);
        assert!(m.abs() < 0.02);
        assert!(resid.iter().all(|r| r.abs() <= 0.5));
    }

    #[test]
    fn split_seed_rule() {
        assert_eq!(split_seed(5, 0), 5);
        assert_eq!(split_seed(0, 1), SEED_STRIDE);
        assert_ne!(split_seed(5, 1), split_seed(5, 2));
    }
}
