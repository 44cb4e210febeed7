//! Marginal integration of the regression estimate against product
//! integration densities, plus the matching ground truth and bias term.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::RegressionEstimate;
use crate::kernels::Kernel1D;
use crate::process_sim::AdditiveModelSpec;
use crate::quadrature::{tensor_integrate, NeumaierSum, Rule};

/// Nodes used for one-dimensional ground-truth integrals.
pub const TRUTH_NODES: usize = 64;

/// `q(x) = c (1 - v^2)^(k + 1)` where `v` maps `[a, b]` onto `[-1, 1]`.
///
/// The root of multiplicity `k + 1` at both ends makes `q` and its first `k`
/// derivatives vanish there.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpDensity {
    a: f64,
    b: f64,
    /// Coefficients of `c (1 - v^2)^(k+1)` in ascending powers of `v`.
    poly: Vec<f64>,
    k: usize,
}

impl BumpDensity {
    pub fn support(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    /// Number of continuous derivatives guaranteed.
    pub fn smoothness(&self) -> usize {
        self.k
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.derivative(x, 0)
    }

    /// Analytic `j`-th derivative.
    pub fn derivative(&self, x: f64, j: usize) -> f64 {
        if x <= self.a || x >= self.b {
            return 0.0;
        }
        let scale = 2.0 / (self.b - self.a);
        let v = (2.0 * x - self.a - self.b) / (self.b - self.a);
        let mut acc = 0.0;
        for (i, c) in self.poly.iter().enumerate().skip(j).rev() {
            let falling: f64 = ((i - j + 1)..=i).map(|t| t as f64).product();
            acc = acc * v + c * falling;
        }
        acc * scale.powi(j as i32)
    }

    pub fn rule(&self, nodes: usize) -> Rule {
        Rule::gauss_legendre_on(nodes, self.a, self.b)
    }
}

/// Normalized bump on `interval` with `k` vanishing derivatives at the ends.
/// `interval` must lie inside `domain`.
pub fn make_integration_density(interval: (f64, f64), k: usize, domain: (f64, f64)) -> Result<BumpDensity> {
    let (a, b) = interval;
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidArgument(format!("empty interval [{a}, {b}]")));
    }
    if a < domain.0 || b > domain.1 {
        return Err(Error::InvalidArgument(format!(
            "(Q.1): integration support [{a}, {b}] is not inside [{}, {}]",
            domain.0, domain.1
        )));
    }
    let n = k + 1;
    // (1 - v^2)^n = Σ_i C(n, i) (-1)^i v^(2i)
    let mut poly = vec![0.0; 2 * n + 1];
    let mut binom = 1.0;
    for i in 0..=n {
        poly[2 * i] = if i % 2 == 0 { binom } else { -binom };
        binom = binom * (n - i) as f64 / (i + 1) as f64;
    }
    // ∫_{-1}^{1} (1 - v^2)^n dv = 2^(2n+1) (n!)^2 / (2n+1)!
    let mut mass_v = 2.0;
    for i in 1..=n {
        mass_v *= (2 * i) as f64 / (2 * i + 1) as f64;
    }
    let c = 1.0 / (mass_v * 0.5 * (b - a));
    for p in &mut poly {
        *p *= c;
    }
    Ok(BumpDensity { a, b, poly, k })
}

/// Product `q(x) = Π_l q_l(x_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationDensity {
    factors: Vec<BumpDensity>,
}

impl IntegrationDensity {
    pub fn new(factors: Vec<BumpDensity>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidArgument("integration density needs d >= 1 factors".into()));
        }
        Ok(IntegrationDensity { factors })
    }

    /// Same bump on `interval` for every coordinate.
    pub fn uniform_bumps(d: usize, interval: (f64, f64), k: usize, domain: (f64, f64)) -> Result<Self> {
        let q = make_integration_density(interval, k, domain)?;
        IntegrationDensity::new(vec![q; d])
    }

    pub fn dim(&self) -> usize {
        self.factors.len()
    }

    pub fn factor(&self, l: usize) -> &BumpDensity {
        &self.factors[l]
    }

    pub fn factors(&self) -> &[BumpDensity] {
        &self.factors
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.factors.iter().zip(x).map(|(q, &v)| q.eval(v)).product()
    }

    /// `q_{-l}`: the product over all coordinates except `l`; `x` is the
    /// full vector.
    pub fn eval_without(&self, l: usize, x: &[f64]) -> f64 {
        self.factors
            .iter()
            .zip(x)
            .enumerate()
            .filter(|(j, _)| *j != l)
            .map(|(_, (q, &v))| q.eval(v))
            .product()
    }

    pub fn rules(&self, nodes: usize) -> Vec<Rule> {
        self.factors.iter().map(|q| q.rule(nodes)).collect()
    }
}

/// `η_l(x) = m_l(x) - ∫ m_l q_l`.
pub fn true_component(model: &AdditiveModelSpec, q_l: &BumpDensity, l: usize, x: f64) -> f64 {
    let m = &model.components[l];
    m.eval(x) - component_q_mean(model, q_l, l)
}

fn component_q_mean(model: &AdditiveModelSpec, q_l: &BumpDensity, l: usize) -> f64 {
    let m = &model.components[l];
    q_l.rule(TRUTH_NODES).integrate(|z| m.eval(z) * q_l.eval(z))
}

/// `∫ m q` for the full model.
pub fn true_global_average(model: &AdditiveModelSpec, q: &IntegrationDensity) -> f64 {
    model.mu
        + (0..model.dim())
            .map(|l| component_q_mean(model, q.factor(l), l))
            .sum::<f64>()
}

/// Outcome of the marginal-integration identity check.
#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    /// `max_x |m(x) - Σ_l η_l(x_l) - ∫ m q|` over the grid.
    pub residual: f64,
    /// `∫ m q`.
    pub global_average: f64,
    pub grid_points: usize,
}

/// Evaluates `m(x) - Σ_l η_l(x_l) - ∫ m q` on a tensor grid of
/// `points_per_axis` points per coordinate spanning the support of `q`, with
/// `η_l(x_l) = ∫ m(x) q_{-l}(x_{-l}) dx_{-l} - ∫ m q` computed by tensor
/// Gauss–Legendre quadrature. For an additive `m` the residual is zero up to
/// quadrature error; for other `m` it measures the non-additive part.
pub fn marginal_integration_identity_check<M: Fn(&[f64]) -> f64>(
    m: M,
    q: &IntegrationDensity,
    points_per_axis: usize,
    nodes: usize,
) -> IdentityCheck {
    let d = q.dim();
    let rules = q.rules(nodes);
    let global = tensor_integrate(&rules, |x| m(x) * q.eval(x));
    let axes: Vec<Vec<f64>> = q
        .factors()
        .iter()
        .map(|f| {
            let (a, b) = f.support();
            crate::quadrature::linspace(a, b, points_per_axis)
        })
        .collect();
    // η_l on its axis
    let eta: Vec<Vec<f64>> = (0..d)
        .map(|l| {
            let others: Vec<Rule> = (0..d).filter(|&j| j != l).map(|j| rules[j].clone()).collect();
            axes[l]
                .iter()
                .map(|&xl| {
                    let mut full = vec![0.0; d];
                    tensor_integrate(&others, |rest| {
                        let mut r = rest.iter();
                        for (j, slot) in full.iter_mut().enumerate() {
                            *slot = if j == l { xl } else { *r.next().unwrap() };
                        }
                        m(&full) * q.eval_without(l, &full)
                    }) - global
                })
                .collect()
        })
        .collect();
    let mut residual = 0.0f64;
    let mut count = 0;
    let mut idx = vec![0usize; d];
    let mut x = vec![0.0; d];
    loop {
        let mut sum_eta = 0.0;
        for l in 0..d {
            x[l] = axes[l][idx[l]];
            sum_eta += eta[l][idx[l]];
        }
        residual = residual.max((m(&x) - sum_eta - global).abs());
        count += 1;
        let mut axis = d;
        loop {
            if axis == 0 {
                return IdentityCheck {
                    residual,
                    global_average: global,
                    grid_points: count,
                };
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < axes[axis].len() {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// Identity check for a ground-truth model. The residual also covers the
/// agreement between the marginal-integral form of `η_l` and the closed form
/// `m_l - ∫ m_l q_l`.
pub fn identity_check_model(
    model: &AdditiveModelSpec,
    q: &IntegrationDensity,
    points_per_axis: usize,
    nodes: usize,
) -> IdentityCheck {
    let mut check = marginal_integration_identity_check(|x| model.eval(x), q, points_per_axis, nodes);
    let mut closed = 0.0f64;
    for l in 0..model.dim() {
        let (a, b) = q.factor(l).support();
        for &xl in &crate::quadrature::linspace(a, b, points_per_axis) {
            let eta_closed = true_component(model, q.factor(l), l, xl);
            let mut x = vec![0.5 * (a + b); model.dim()];
            x[l] = xl;
            let rules: Vec<Rule> = (0..model.dim())
                .filter(|&j| j != l)
                .map(|j| q.factor(j).rule(nodes))
                .collect();
            let marginal = tensor_integrate(&rules, |rest| {
                let mut full = Vec::with_capacity(model.dim());
                let mut r = rest.iter();
                for j in 0..model.dim() {
                    full.push(if j == l { xl } else { *r.next().unwrap() });
                }
                model.eval(&full) * q.eval_without(l, &full)
            }) - check.global_average;
            closed = closed.max((marginal - eta_closed).abs());
        }
    }
    let global_closed = true_global_average(model, q);
    check.residual = check
        .residual
        .max(closed)
        .max((global_closed - check.global_average).abs());
    check
}

/// Estimated component `η̂_l` on a grid of `C_l`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentEstimate {
    pub coordinate: usize,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub quad_res: usize,
    /// `∫ m̃ q`, shared by every coordinate.
    pub global_average: f64,
}

impl ComponentEstimate {
    /// Linear interpolation; `None` outside the grid.
    pub fn interpolate(&self, x: f64) -> Option<f64> {
        let g = &self.grid;
        let (first, last) = (*g.first()?, *g.last()?);
        if x < first || x > last {
            return None;
        }
        if g.len() == 1 {
            return Some(self.values[0]);
        }
        let j = g.partition_point(|&v| v <= x).clamp(1, g.len() - 1);
        let (x0, x1) = (g[j - 1], g[j]);
        let t = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
        Some(self.values[j - 1] + t * (self.values[j] - self.values[j - 1]))
    }
}

/// Marginal integrator bound to one regression estimate. The global average
/// `∫ m̃ q` is computed once at construction.
#[derive(Debug)]
pub struct MarginalIntegrator<'r, 'a> {
    re: &'r RegressionEstimate<'a>,
    rules: Vec<Rule>,
    /// `w_j q_j(node_j)` per axis.
    node_weights: Vec<Vec<f64>>,
    global_average: f64,
    quad_res: usize,
}

impl<'r, 'a> MarginalIntegrator<'r, 'a> {
    pub const MIN_NODES: usize = 16;

    pub fn new(re: &'r RegressionEstimate<'a>, q: &IntegrationDensity, quad_res: usize) -> Result<Self> {
        if q.dim() != re.dim() {
            return Err(Error::DimensionMismatch {
                expected: re.dim(),
                got: q.dim(),
            });
        }
        if quad_res < Self::MIN_NODES {
            return Err(Error::InvalidArgument(format!(
                "quadrature resolution must be >= {} nodes per coordinate",
                Self::MIN_NODES
            )));
        }
        let rules = q.rules(quad_res);
        let node_weights: Vec<Vec<f64>> = rules
            .iter()
            .zip(q.factors())
            .map(|(r, f)| r.nodes.iter().zip(&r.weights).map(|(x, w)| w * f.eval(*x)).collect())
            .collect();
        let axes: Vec<Vec<f64>> = rules.iter().map(|r| r.nodes.clone()).collect();
        let grid = re.eval_grid(&axes)?;
        let undefined = grid.undefined_count();
        if undefined > 0 {
            return Err(Error::UndefinedNodes { count: undefined });
        }
        let global_average = contract(&grid.values, &node_weights, None);
        Ok(MarginalIntegrator {
            re,
            rules,
            node_weights,
            global_average,
            quad_res,
        })
    }

    pub fn global_average(&self) -> f64 {
        self.global_average
    }

    /// `η̂_l` at each point of `grid` (sorted ascending).
    pub fn component(&self, l: usize, grid: &[f64]) -> Result<ComponentEstimate> {
        let d = self.re.dim();
        if l >= d {
            return Err(Error::InvalidArgument(format!("coordinate {l} out of range for d = {d}")));
        }
        let axes: Vec<Vec<f64>> = (0..d)
            .map(|j| if j == l { grid.to_vec() } else { self.rules[j].nodes.clone() })
            .collect();
        let values = self.re.eval_grid(&axes)?;
        let undefined = values.undefined_count();
        if undefined > 0 {
            return Err(Error::UndefinedNodes { count: undefined });
        }
        let per_point = (0..grid.len())
            .map(|g| contract(&values.values, &self.node_weights, Some((l, g, grid.len()))) - self.global_average)
            .collect();
        Ok(ComponentEstimate {
            coordinate: l,
            grid: grid.to_vec(),
            values: per_point,
            quad_res: self.quad_res,
            global_average: self.global_average,
        })
    }
}

/// Weighted sum of a row-major tensor against per-axis weights. With
/// `fixed = Some((l, g, len))`, axis `l` has length `len` and is pinned to
/// index `g` with unit weight.
fn contract(values: &[f64], weights: &[Vec<f64>], fixed: Option<(usize, usize, usize)>) -> f64 {
    let d = weights.len();
    let sizes: Vec<usize> = (0..d)
        .map(|j| match fixed {
            Some((l, _, len)) if l == j => len,
            _ => weights[j].len(),
        })
        .collect();
    let mut acc = NeumaierSum::default();
    let mut idx = vec![0usize; d];
    if let Some((l, g, _)) = fixed {
        idx[l] = g;
    }
    loop {
        let mut flat = 0;
        let mut w = 1.0;
        for j in 0..d {
            flat = flat * sizes[j] + idx[j];
            if !matches!(fixed, Some((l, _, _)) if l == j) {
                w *= weights[j][idx[j]];
            }
        }
        acc.add(w * values[flat]);
        let mut axis = d;
        loop {
            if axis == 0 {
                return acc.value();
            }
            axis -= 1;
            if matches!(fixed, Some((l, _, _)) if l == axis) {
                continue;
            }
            idx[axis] += 1;
            if idx[axis] < sizes[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// `η̂_l` on `grid` by marginal integration of `re` against `q`.
pub fn estimate_component(
    re: &RegressionEstimate<'_>,
    q: &IntegrationDensity,
    l: usize,
    grid: &[f64],
    quad_res: usize,
) -> Result<ComponentEstimate> {
    MarginalIntegrator::new(re, q, quad_res)?.component(l, grid)
}

/// Leading bias `h^k b_l(x_l)` on a grid, with both summands kept.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasTerm {
    pub coordinate: usize,
    pub grid: Vec<f64>,
    pub bandwidth: f64,
    pub k: usize,
    /// `h^k / k! μ_k (-1)^k m_l^(k)(x_l)` per grid point.
    pub derivative_part: Vec<f64>,
    /// `h^k / k! μ_k ∫ m_l q_l^(k)`.
    pub integral_part: f64,
    /// Sum of the two parts.
    pub values: Vec<f64>,
}

/// `h^k b_l(x_l) = h^k / k! ∫u^k K_l · ((-1)^k m_l^(k)(x_l) + ∫ m_l q_l^(k))`.
pub fn bias_term(
    model: &AdditiveModelSpec,
    kern: &Kernel1D,
    q_l: &BumpDensity,
    l: usize,
    grid: &[f64],
    h: f64,
    k: usize,
) -> Result<BiasTerm> {
    if kern.order() != k {
        return Err(Error::OrderMismatch {
            kernel: kern.order(),
            expected: k,
        });
    }
    let m = &model.components[l];
    let factorial: f64 = (1..=k).map(|v| v as f64).product();
    let lead = h.powi(k as i32) / factorial * kern.moment(k);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    let q_int = q_l
        .rule(TRUTH_NODES)
        .integrate(|z| m.eval(z) * q_l.derivative(z, k));
    let derivative_part: Vec<f64> = grid.iter().map(|&x| lead * sign * m.derivative(x, k)).collect();
    let integral_part = lead * q_int;
    let values = derivative_part.iter().map(|v| v + integral_part).collect();
    Ok(BiasTerm {
        coordinate: l,
        grid: grid.to_vec(),
        bandwidth: h,
        k,
        derivative_part,
        integral_part,
        values,
    })
}

/// `Σ_l η̂_l(x_l) + global_average`, interpolating each component linearly.
pub fn reconstruct_regression(components: &[ComponentEstimate], global_average: f64, x: &[f64]) -> Result<f64> {
    if components.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: components.len(),
            got: x.len(),
        });
    }
    let mut total = global_average;
    for (c, &v) in components.iter().zip(x) {
        total += c.interpolate(v).ok_or_else(|| Error::OutsideGrid(x.to_vec()))?;
    }
    Ok(total)
}
