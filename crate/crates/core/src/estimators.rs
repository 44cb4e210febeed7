//! Kernel density estimate `f̂_T` and the internal-weight regression
//! estimator, with time integrals taken as Riemann sums at the path's step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Kernel1D, ProductKernel};
use crate::process_sim::SamplePath;

/// Bandwidth constants and kernel orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSchedule {
    /// Density constant: `h_T = c' (log T / T)^(1 / (2k' + d))`.
    pub c_prime: f64,
    /// Regression constant: `h_{l,T} = c_1 T^(-1 / (2k + 1))`.
    pub c1: f64,
    /// Optional per-coordinate replacement for `c1`.
    pub c1_per_coordinate: Option<Vec<f64>>,
    pub k: usize,
    pub k_prime: usize,
    pub d: usize,
}

impl BandwidthSchedule {
    pub fn new(c_prime: f64, c1: f64, k: usize, k_prime: usize, d: usize) -> Result<Self> {
        let s = BandwidthSchedule {
            c_prime,
            c1,
            c1_per_coordinate: None,
            k,
            k_prime,
            d,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_prime <= self.k * self.d {
            return Err(Error::InvalidArgument(format!(
                "density kernel order k' = {} must exceed k * d = {}",
                self.k_prime,
                self.k * self.d
            )));
        }
        let mut constants = vec![self.c_prime, self.c1];
        if let Some(per) = &self.c1_per_coordinate {
            if per.len() != self.d {
                return Err(Error::DimensionMismatch {
                    expected: self.d,
                    got: per.len(),
                });
            }
            constants.extend_from_slice(per);
        }
        if constants.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::InvalidArgument("bandwidth constants must be positive".into()));
        }
        Ok(())
    }

    /// Per-coordinate regression bandwidths at horizon `t`.
    pub fn regression_bandwidths(&self, t: f64) -> Result<Vec<f64>> {
        let base = bandwidth_regression(t, self)?;
        Ok(match &self.c1_per_coordinate {
            Some(per) => per.iter().map(|c| base / self.c1 * c).collect(),
            None => vec![base; self.d],
        })
    }
}

/// `h_T = c' (log T / T)^(1 / (2k' + d))`; requires `T > 1`.
pub fn bandwidth_density(t: f64, sched: &BandwidthSchedule) -> Result<f64> {
    if !(t > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "density bandwidth needs T > 1, got {t}"
        )));
    }
    let expo = 1.0 / (2 * sched.k_prime + sched.d) as f64;
    Ok(sched.c_prime * (t.ln() / t).powf(expo))
}

/// `h_{l,T} = c_1 T^(-1 / (2k + 1))`; requires `T > 0`.
pub fn bandwidth_regression(t: f64, sched: &BandwidthSchedule) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "regression bandwidth needs T > 0, got {t}"
        )));
    }
    Ok(sched.c1 * t.powf(-1.0 / (2 * sched.k + 1) as f64))
}

/// Uniform cell list over the unit cube for fixed-radius neighbour sums.
#[derive(Debug, Clone)]
struct CellIndex {
    dim: usize,
    cells_per_axis: usize,
    cell_width: f64,
    /// `starts[c]..starts[c + 1]` indexes `points` / `order` for cell `c`.
    starts: Vec<usize>,
    /// Point coordinates in cell order, row-major.
    points: Vec<f64>,
}

impl CellIndex {
    const MAX_CELLS: usize = 1 << 22;

    fn new(x: &[f64], dim: usize, reach: f64) -> Self {
        let mut per_axis = ((1.0 / reach).floor() as usize).max(1);
        while per_axis.pow(dim as u32) > Self::MAX_CELLS {
            per_axis /= 2;
        }
        let cell_width = 1.0 / per_axis as f64;
        let n = x.len() / dim;
        let total = per_axis.pow(dim as u32);
        let cell_of = |row: &[f64]| -> usize {
            row.iter().fold(0usize, |acc, &v| {
                let c = ((v / cell_width).floor().max(0.0) as usize).min(per_axis - 1);
                acc * per_axis + c
            })
        };
        let ids: Vec<usize> = x.chunks_exact(dim).map(cell_of).collect();
        let mut starts = vec![0usize; total + 1];
        for &c in &ids {
            starts[c + 1] += 1;
        }
        for c in 0..total {
            starts[c + 1] += starts[c];
        }
        let mut fill = starts.clone();
        let mut points = vec![0.0; n * dim];
        for (i, &c) in ids.iter().enumerate() {
            let slot = fill[c];
            fill[c] += 1;
            points[slot * dim..(slot + 1) * dim].copy_from_slice(&x[i * dim..(i + 1) * dim]);
        }
        CellIndex {
            dim,
            cells_per_axis: per_axis,
            cell_width,
            starts,
            points,
        }
    }

    /// Calls `visit` on every stored point in cells within `reach` of `q`.
    fn for_each_near<F: FnMut(&[f64])>(&self, q: &[f64], reach: f64, mut visit: F) {
        let d = self.dim;
        let top = self.cells_per_axis as isize - 1;
        let mut lo = vec![0isize; d];
        let mut hi = vec![0isize; d];
        for l in 0..d {
            let a = ((q[l] - reach) / self.cell_width).floor() as isize;
            let b = ((q[l] + reach) / self.cell_width).floor() as isize;
            if b < 0 || a > top {
                return;
            }
            lo[l] = a.max(0);
            hi[l] = b.min(top);
        }
        let mut idx = lo.clone();
        loop {
            let cell = idx
                .iter()
                .fold(0usize, |acc, &c| acc * self.cells_per_axis + c as usize);
            for row in self.points[self.starts[cell] * d..self.starts[cell + 1] * d].chunks_exact(d) {
                visit(row);
            }
            let mut axis = d;
            loop {
                if axis == 0 {
                    return;
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] <= hi[axis] {
                    break;
                }
                idx[axis] = lo[axis];
            }
        }
    }
}

/// `f̂_T(x) = Δ / (T h^d) Σ_i K((x - X_i) / h)`.
#[derive(Debug, Clone)]
pub struct DensityEstimate<'a> {
    path: &'a SamplePath,
    kernel: ProductKernel,
    bandwidth: f64,
    index: CellIndex,
}

impl<'a> DensityEstimate<'a> {
    pub fn new(path: &'a SamplePath, kernel: ProductKernel, bandwidth: f64) -> Result<Self> {
        if path.is_empty() {
            return Err(Error::EmptyPath);
        }
        if kernel.dim() != path.dim {
            return Err(Error::DimensionMismatch {
                expected: path.dim,
                got: kernel.dim(),
            });
        }
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::InvalidArgument("bandwidth must be positive".into()));
        }
        let reach = bandwidth * kernel.factors()[0].support();
        let index = CellIndex::new(&path.x, path.dim, reach);
        Ok(DensityEstimate {
            path,
            kernel,
            bandwidth,
            index,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn kernel(&self) -> &ProductKernel {
        &self.kernel
    }

    pub fn path(&self) -> &SamplePath {
        self.path
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.path.dim {
            return Err(Error::DimensionMismatch {
                expected: self.path.dim,
                got: x.len(),
            });
        }
        Ok(self.eval_unchecked(x))
    }

    fn eval_unchecked(&self, x: &[f64]) -> f64 {
        let h = self.bandwidth;
        let inv_h = 1.0 / h;
        let reach = h * self.kernel.factors()[0].support();
        let d = self.path.dim;
        let mut u = vec![0.0; d];
        let mut acc = 0.0;
        self.index.for_each_near(x, reach, |row| {
            for l in 0..d {
                u[l] = (x[l] - row[l]) * inv_h;
            }
            acc += self.kernel.eval_unchecked(&u);
        });
        acc * self.path.delta / (self.path.horizon * h.powi(d as i32))
    }
}

/// Free-function form of [`DensityEstimate::eval`].
pub fn estimate_density(de: &DensityEstimate<'_>, x: &[f64]) -> Result<f64> {
    de.eval(x)
}

/// `max_x |f̂_T(x) - f(x)|` over `points`.
pub fn sup_density_error<F: Fn(&[f64]) -> f64>(
    de: &DensityEstimate<'_>,
    points: &[Vec<f64>],
    truth: F,
) -> Result<f64> {
    let mut sup = 0.0f64;
    for p in points {
        sup = sup.max((de.eval(p)? - truth(p)).abs());
    }
    Ok(sup)
}

/// All points of the tensor grid `axes[0] x axes[1] x ...`, last axis fastest.
pub fn tensor_points(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    out
}

/// Branch-free pair sums for `d = 2`, laid out for vectorization.
struct PlanarSweep {
    x0: Vec<f64>,
    x1: Vec<f64>,
    p0: [f64; PlanarSweep::TERMS],
    p1: [f64; PlanarSweep::TERMS],
    inv_h2: f64,
}

impl PlanarSweep {
    const TERMS: usize = 8;

    fn new(pts: &[f64], polys: &[Vec<f64>], inv_h2: f64) -> Self {
        let pad = |p: &[f64]| {
            let mut a = [0.0; Self::TERMS];
            a[..p.len()].copy_from_slice(p);
            a
        };
        PlanarSweep {
            x0: pts.iter().step_by(2).copied().collect(),
            x1: pts.iter().skip(1).step_by(2).copied().collect(),
            p0: pad(&polys[0]),
            p1: pad(&polys[1]),
            inv_h2,
        }
    }

    #[inline]
    fn horner(p: &[f64; Self::TERMS], t: f64) -> f64 {
        let mut v = p[Self::TERMS - 1];
        for c in p[..Self::TERMS - 1].iter().rev() {
            v = v * t + c;
        }
        v
    }

    /// `Σ_j K_0 K_1` of `(a, b)` against the points `(x0[j], x1[j])`.
    #[inline]
    fn row_sum(&self, a: f64, b: f64, x0: &[f64], x1: &[f64]) -> f64 {
        const LANES: usize = 4;
        let pair = |u: f64, v: f64| {
            let t0 = (a - u) * (a - u) * self.inv_h2;
            let t1 = (b - v) * (b - v) * self.inv_h2;
            let k = Self::horner(&self.p0, t0.min(1.0)) * Self::horner(&self.p1, t1.min(1.0));
            if t0 < 1.0 && t1 < 1.0 {
                k
            } else {
                0.0
            }
        };
        let mut lanes = [0.0; LANES];
        let split = x0.len() / LANES * LANES;
        for (cu, cv) in x0[..split].chunks_exact(LANES).zip(x1[..split].chunks_exact(LANES)) {
            for i in 0..LANES {
                lanes[i] += pair(cu[i], cv[i]);
            }
        }
        let mut sum = lanes.iter().sum::<f64>();
        for (u, v) in x0[split..].iter().zip(&x1[split..]) {
            sum += pair(*u, *v);
        }
        sum
    }
}

/// `f̂_T(X_i)` for every datum, by sweeping pairs of nearby cells.
fn internal_kernel_sums(path: &SamplePath, de: &DensityEstimate<'_>) -> Vec<f64> {
    let d = path.dim;
    let n = path.len();
    let h = de.bandwidth;
    let factors = de.kernel.factors();
    let polys: Vec<Vec<f64>> = factors.iter().map(|k| k.poly_in_square()).collect();
    let inv_h2 = 1.0 / (h * h);
    let reach = h * factors[0].support();

    // Cells of width >= reach / 2, so neighbours lie within two cells.
    let mut per_axis = ((2.0 / reach).floor() as usize).max(1);
    while per_axis.pow(d as u32) > CellIndex::MAX_CELLS {
        per_axis /= 2;
    }
    let width = 1.0 / per_axis as f64;
    let span = (reach / width).ceil() as isize;
    let coord = |v: f64| ((v / width).floor().max(0.0) as usize).min(per_axis - 1);
    let ids: Vec<usize> = (0..n)
        .map(|i| path.x_row(i).iter().fold(0usize, |acc, &v| acc * per_axis + coord(v)))
        .collect();
    let total = per_axis.pow(d as u32);
    let mut starts = vec![0usize; total + 1];
    for &c in &ids {
        starts[c + 1] += 1;
    }
    for c in 0..total {
        starts[c + 1] += starts[c];
    }
    let mut fill = starts.clone();
    let mut order = vec![0usize; n];
    let mut pts = vec![0.0; n * d];
    for (i, &c) in ids.iter().enumerate() {
        let slot = fill[c];
        fill[c] += 1;
        order[slot] = i;
        pts[slot * d..(slot + 1) * d].copy_from_slice(path.x_row(i));
    }

    let fast = (d == 2 && polys.iter().all(|p| p.len() <= PlanarSweep::TERMS)).then(|| PlanarSweep::new(&pts, &polys, inv_h2));
    let per_cell: Vec<Vec<f64>> = (0..total)
        .into_par_iter()
        .map(|cell| {
            let (a, b) = (starts[cell], starts[cell + 1]);
            if a == b {
                return Vec::new();
            }
            let mut cc = vec![0isize; d];
            let mut rest = cell;
            for l in (0..d).rev() {
                cc[l] = (rest % per_axis) as isize;
                rest /= per_axis;
            }
            let lo: Vec<isize> = cc.iter().map(|c| (c - span).max(0)).collect();
            let hi: Vec<isize> = cc.iter().map(|c| (c + span).min(per_axis as isize - 1)).collect();
            let mut acc = vec![0.0; b - a];
            if let Some(fast) = &fast {
                for o0 in lo[0]..=hi[0] {
                    let c0 = o0 as usize * per_axis;
                    let (s, e) = (starts[c0 + lo[1] as usize], starts[c0 + hi[1] as usize + 1]);
                    for (slot, out) in (a..b).zip(acc.iter_mut()) {
                        *out += fast.row_sum(pts[2 * slot], pts[2 * slot + 1], &fast.x0[s..e], &fast.x1[s..e]);
                    }
                }
                return acc;
            }
            let mut idx = lo.clone();
            loop {
                let other = idx.iter().fold(0usize, |s, &c| s * per_axis + c as usize);
                let others = &pts[starts[other] * d..starts[other + 1] * d];
                for (slot, out) in (a..b).zip(acc.iter_mut()) {
                    let xi = &pts[slot * d..(slot + 1) * d];
                    let mut sum = 0.0;
                    'pairs: for xj in others.chunks_exact(d) {
                        let mut prod = 1.0;
                        for l in 0..d {
                            let du = xi[l] - xj[l];
                            let t = du * du * inv_h2;
                            if t >= 1.0 {
                                continue 'pairs;
                            }
                            prod *= polys[l].iter().rev().fold(0.0, |v, c| v * t + c);
                        }
                        sum += prod;
                    }
                    *out += sum;
                }
                let mut axis = d;
                loop {
                    if axis == 0 {
                        return acc;
                    }
                    axis -= 1;
                    idx[axis] += 1;
                    if idx[axis] <= hi[axis] {
                        break;
                    }
                    idx[axis] = lo[axis];
                }
            }
        })
        .collect();

    let scale = path.delta / (path.horizon * h.powi(d as i32));
    let mut raw = vec![0.0; n];
    for (cell, sums) in per_cell.into_iter().enumerate() {
        for (slot, v) in (starts[cell]..starts[cell + 1]).zip(sums) {
            raw[order[slot]] = v * scale;
        }
    }
    raw
}

/// `f̂_T(X_i)` at every datum, floored at `rho`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InternalDensities {
    /// Floored values `max(f̂_T(X_i), rho)`.
    pub values: Vec<f64>,
    pub floor: f64,
    pub floored: usize,
    pub min_raw: f64,
}

impl InternalDensities {
    pub fn floored_fraction(&self) -> f64 {
        self.floored as f64 / self.values.len().max(1) as f64
    }
}

/// Leave-self-in `f̂_T(X_i)` for every datum, floored at
/// `rho = floor_fraction * min_{grid} f̂_T`. When that minimum is not
/// positive the grid median is used in its place.
pub fn precompute_internal_densities(
    path: &SamplePath,
    de: &DensityEstimate<'_>,
    floor_fraction: f64,
    grid: &[Vec<f64>],
) -> Result<InternalDensities> {
    if path.is_empty() {
        return Err(Error::EmptyPath);
    }
    let mut grid_vals = grid.iter().map(|p| de.eval(p)).collect::<Result<Vec<f64>>>()?;
    grid_vals.sort_by(f64::total_cmp);
    let reference = match grid_vals.first() {
        Some(&m) if m > 0.0 => m,
        Some(_) => grid_vals[grid_vals.len() / 2].max(f64::MIN_POSITIVE),
        None => return Err(Error::InvalidArgument("empty floor grid".into())),
    };
    let floor = floor_fraction * reference;
    let raw = internal_kernel_sums(path, de);
    let min_raw = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let mut floored = 0;
    let values = raw
        .into_iter()
        .map(|v| {
            if v < floor {
                floored += 1;
                floor
            } else {
                v
            }
        })
        .collect();
    Ok(InternalDensities {
        values,
        floor,
        floored,
        min_raw,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityMode {
    KnownF,
    EstimatedF,
}

/// Values of the regression estimate on a tensor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridValues {
    pub axes: Vec<Vec<f64>>,
    /// Row-major, last axis fastest.
    pub values: Vec<f64>,
    /// Number of data with the node inside their kernel support.
    pub hits: Vec<u32>,
}

impl GridValues {
    pub fn undefined_count(&self) -> usize {
        self.hits.iter().filter(|h| **h == 0).count()
    }
}

/// `m̃(x) = Δ/T Σ_i ψ(Y_i) Π_l h_l^{-1} K_l((x_l - X_{i,l}) / h_l) / f̃(X_i)`.
#[derive(Debug, Clone)]
pub struct RegressionEstimate<'a> {
    path: &'a SamplePath,
    kernels: Vec<Kernel1D>,
    bandwidths: Vec<f64>,
    /// `ψ(Y_i) / f̃(X_i)`.
    weights: Vec<f64>,
    mode: DensityMode,
    floored_fraction: f64,
}

impl<'a> RegressionEstimate<'a> {
    fn check(path: &SamplePath, kernels: &[Kernel1D], bandwidths: &[f64]) -> Result<()> {
        if path.is_empty() {
            return Err(Error::EmptyPath);
        }
        for len in [kernels.len(), bandwidths.len()] {
            if len != path.dim {
                return Err(Error::DimensionMismatch {
                    expected: path.dim,
                    got: len,
                });
            }
        }
        if bandwidths.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(Error::InvalidArgument("bandwidths must be positive".into()));
        }
        Ok(())
    }

    /// Divides by the known density `f(X_i)`.
    pub fn known_f<P, F>(
        path: &'a SamplePath,
        kernels: Vec<Kernel1D>,
        bandwidths: Vec<f64>,
        psi: P,
        density: F,
    ) -> Result<Self>
    where
        P: Fn(f64) -> f64,
        F: Fn(&[f64]) -> f64,
    {
        Self::check(path, &kernels, &bandwidths)?;
        let weights = (0..path.len())
            .map(|i| psi(path.y[i]) / density(path.x_row(i)))
            .collect();
        Ok(RegressionEstimate {
            path,
            kernels,
            bandwidths,
            weights,
            mode: DensityMode::KnownF,
            floored_fraction: 0.0,
        })
    }

    /// Divides by the floored internal densities `max(f̂_T(X_i), rho)`.
    pub fn estimated_f<P>(
        path: &'a SamplePath,
        kernels: Vec<Kernel1D>,
        bandwidths: Vec<f64>,
        psi: P,
        internal: &InternalDensities,
    ) -> Result<Self>
    where
        P: Fn(f64) -> f64,
    {
        Self::check(path, &kernels, &bandwidths)?;
        if internal.values.len() != path.len() {
            return Err(Error::DimensionMismatch {
                expected: path.len(),
                got: internal.values.len(),
            });
        }
        let weights = (0..path.len())
            .map(|i| psi(path.y[i]) / internal.values[i])
            .collect();
        Ok(RegressionEstimate {
            path,
            kernels,
            bandwidths,
            weights,
            mode: DensityMode::EstimatedF,
            floored_fraction: internal.floored_fraction(),
        })
    }

    pub fn mode(&self) -> DensityMode {
        self.mode
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn kernels(&self) -> &[Kernel1D] {
        &self.kernels
    }

    pub fn floored_fraction(&self) -> f64 {
        self.floored_fraction
    }

    pub fn dim(&self) -> usize {
        self.path.dim
    }

    fn scale(&self) -> f64 {
        let inv_h: f64 = self.bandwidths.iter().map(|h| 1.0 / h).product();
        self.path.delta / self.path.horizon * inv_h
    }

    /// Estimate at `x`; [`Error::Undefined`] when no datum has `x` inside its
    /// kernel support.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let d = self.path.dim;
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        let mut acc = 0.0;
        let mut hits = 0usize;
        'data: for i in 0..self.path.len() {
            let row = self.path.x_row(i);
            let mut prod = 1.0;
            for l in 0..d {
                let u = (x[l] - row[l]) / self.bandwidths[l];
                if u.abs() >= self.kernels[l].support() {
                    continue 'data;
                }
                prod *= self.kernels[l].eval(u);
            }
            hits += 1;
            acc += self.weights[i] * prod;
        }
        if hits == 0 {
            return Err(Error::Undefined(x.to_vec()));
        }
        Ok(acc * self.scale())
    }

    /// Estimate at every node of a tensor grid. Each axis must be sorted
    /// ascending. Every datum touches only the nodes inside its kernel
    /// support, so the cost is `n` times the number of nodes per support box.
    pub fn eval_grid(&self, axes: &[Vec<f64>]) -> Result<GridValues> {
        let d = self.path.dim;
        if axes.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: axes.len(),
            });
        }
        if axes.iter().any(|a| a.windows(2).any(|w| w[0] > w[1])) {
            return Err(Error::InvalidArgument("grid axes must be sorted".into()));
        }
        let sizes: Vec<usize> = axes.iter().map(Vec::len).collect();
        let total: usize = sizes.iter().product();
        let mut values = vec![0.0; total];
        let mut hits = vec![0u32; total];
        let mut strides = vec![1usize; d];
        for l in (0..d.saturating_sub(1)).rev() {
            strides[l] = strides[l + 1] * sizes[l + 1];
        }

        let mut ranges = vec![(0usize, 0usize); d];
        let mut kvals: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
        let mut idx = vec![0usize; d];
        'data: for i in 0..self.path.len() {
            let row = self.path.x_row(i);
            for l in 0..d {
                let h = self.bandwidths[l];
                let reach = h * self.kernels[l].support();
                let axis = &axes[l];
                let lo = axis.partition_point(|&v| v <= row[l] - reach);
                let hi = axis.partition_point(|&v| v < row[l] + reach);
                if lo >= hi {
                    continue 'data;
                }
                ranges[l] = (lo, hi);
                for j in lo..hi {
                    kvals[l][j] = self.kernels[l].eval((axis[j] - row[l]) / h);
                }
            }
            let w = self.weights[i];
            for l in 0..d {
                idx[l] = ranges[l].0;
            }
            loop {
                let mut prod = w;
                let mut flat = 0;
                for l in 0..d {
                    prod *= kvals[l][idx[l]];
                    flat += idx[l] * strides[l];
                }
                values[flat] += prod;
                hits[flat] += 1;
                let mut axis = d;
                loop {
                    if axis == 0 {
                        continue 'data;
                    }
                    axis -= 1;
                    idx[axis] += 1;
                    if idx[axis] < ranges[axis].1 {
                        break;
                    }
                    idx[axis] = ranges[axis].0;
                }
            }
        }
        let scale = self.scale();
        for v in &mut values {
            *v *= scale;
        }
        Ok(GridValues {
            axes: axes.to_vec(),
            values,
            hits,
        })
    }
}

/// Free-function form of [`RegressionEstimate::eval`].
pub fn estimate_regression(re: &RegressionEstimate<'_>, x: &[f64]) -> Result<f64> {
    re.eval(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{kernel_of_order, make_base_kernel, BaseKernel};
    use crate::process_sim::{simulate_path, AdditiveModelSpec, MixingProcessSpec, Shape};
    use proptest::prelude::*;

    fn epan() -> Kernel1D {
        make_base_kernel(BaseKernel::Epanechnikov)
    }

    fn sched() -> BandwidthSchedule {
        BandwidthSchedule::new(1.0, 1.0, 2, 6, 2).unwrap()
    }

    fn point_path(x0: &[f64], y0: f64) -> SamplePath {
        SamplePath {
            dim: x0.len(),
            delta: 0.05,
            horizon: 1.0,
            seed: 0,
            times: vec![0.0],
            x: x0.to_vec(),
            y: vec![y0],
        }
    }

    fn default_path(horizon: f64, seed: u64, noise: f64) -> SamplePath {
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
            noise,
        )
        .unwrap();
        let spec = MixingProcessSpec::independent(2, 1.0).unwrap();
        simulate_path(&spec, &model, 0.05, horizon, seed).unwrap()
    }

    #[test]
    fn density_bandwidth_formula() {
        let h = bandwidth_density(std::f64::consts::E, &sched()).unwrap();
        assert!((h - (-1.0f64 / 14.0).exp()).abs() < 1e-12);
        assert!((h - 0.9311).abs() < 1e-4);
        let mut half = sched();
        half.c_prime = 0.5;
        assert_eq!(bandwidth_density(100.0, &half).unwrap(), 0.5 * bandwidth_density(100.0, &sched()).unwrap());
        assert!(bandwidth_density(1e4, &sched()).unwrap() < bandwidth_density(1e3, &sched()).unwrap());
        assert!(bandwidth_density(1.0, &sched()).is_err());
    }

    #[test]
    fn regression_bandwidth_formula() {
        let s = sched();
        assert!((bandwidth_regression(1024.0, &s).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(bandwidth_regression(1.0, &s).unwrap(), 1.0);
        let r = bandwidth_regression(32.0 * 77.0, &s).unwrap() / bandwidth_regression(77.0, &s).unwrap();
        assert!((r - 0.5).abs() < 1e-14);
        assert!(bandwidth_regression(0.0, &s).is_err());
    }

    #[test]
    fn schedule_requires_kprime_above_kd() {
        assert!(BandwidthSchedule::new(1.0, 1.0, 2, 4, 2).is_err());
        assert!(BandwidthSchedule::new(1.0, 1.0, 2, 6, 2).is_ok());
        assert!(BandwidthSchedule::new(-1.0, 1.0, 2, 6, 2).is_err());
        let mut s = sched();
        s.c1_per_coordinate = Some(vec![1.0, 2.0]);
        let hs = s.regression_bandwidths(1024.0).unwrap();
        assert!((hs[0] - 0.25).abs() < 1e-15 && (hs[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_point_density() {
        let p = point_path(&[0.4, 0.6], 1.0);
        let k = ProductKernel::isotropic(epan(), 2).unwrap();
        let h = 0.2;
        let de = DensityEstimate::new(&p, k, h).unwrap();
        let got = de.eval(&[0.4, 0.6]).unwrap();
        // Δ / (T h^d) * K(0) with Δ = 0.05, T = 1
        assert!((got - 0.05 * 0.5625 / (h * h)).abs() < 1e-12);
        assert_eq!(de.eval(&[0.4 + 1.0 + h, 0.6]).unwrap(), 0.0);
        assert_eq!(de.eval(&[1.5, 1.5]).unwrap(), 0.0);
        assert!(de.eval(&[0.4]).is_err());
    }

    #[test]
    fn cell_index_matches_brute_force() {
        let p = default_path(50.0, 3, 0.5);
        let k = ProductKernel::isotropic(kernel_of_order(BaseKernel::Epanechnikov, 6).unwrap(), 2).unwrap();
        let h = 0.13;
        let de = DensityEstimate::new(&p, k.clone(), h).unwrap();
        for q in [[0.5, 0.5], [0.02, 0.97], [0.33, 0.71], [1.05, 0.5]] {
            let brute: f64 = (0..p.len())
                .map(|i| {
                    let r = p.x_row(i);
                    k.eval(&[(q[0] - r[0]) / h, (q[1] - r[1]) / h]).unwrap()
                })
                .sum::<f64>()
                * p.delta
                / (p.horizon * h * h);
            let got = de.eval(&q).unwrap();
            assert!((got - brute).abs() < 1e-12 * brute.abs().max(1.0), "{q:?}");
        }
    }

    #[test]
    fn density_recovers_uniform() {
        let p = default_path(1e4, 17, 0.5);
        let k = ProductKernel::isotropic(kernel_of_order(BaseKernel::Epanechnikov, 6).unwrap(), 2).unwrap();
        let de = DensityEstimate::new(&p, k, 0.1).unwrap();
        let v = estimate_density(&de, &[0.5, 0.5]).unwrap();
        assert!((v - 1.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn internal_densities_and_floor() {
        let p = default_path(1e4, 5, 0.5);
        let k = ProductKernel::isotropic(kernel_of_order(BaseKernel::Epanechnikov, 6).unwrap(), 2).unwrap();
        let de = DensityEstimate::new(&p, k, 0.1).unwrap();
        let grid = tensor_points(&[crate::quadrature::linspace(0.1, 0.9, 9), crate::quadrature::linspace(0.1, 0.9, 9)]);
        let internal = precompute_internal_densities(&p, &de, 0.1, &grid).unwrap();
        assert_eq!(internal.values.len(), p.len());
        assert!(internal.values.iter().all(|v| *v >= internal.floor));
        let mean = crate::quadrature::sum(&internal.values) / p.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
        let below = (0..p.len()).filter(|&i| de.eval(p.x_row(i)).unwrap() < internal.floor).count();
        assert_eq!(below, internal.floored);
        assert!(internal.floored_fraction() < 0.01);
    }

    #[test]
    fn internal_sweep_matches_pointwise_density() {
        let p = default_path(300.0, 17, 0.5);
        for h in [0.03, 0.1, 0.4, 2.0] {
            let k = ProductKernel::isotropic(kernel_of_order(BaseKernel::Quartic, 4).unwrap(), 2).unwrap();
            let de = DensityEstimate::new(&p, k, h).unwrap();
            let swept = internal_kernel_sums(&p, &de);
            for i in (0..p.len()).step_by(37) {
                let direct = de.eval(p.x_row(i)).unwrap();
                assert!((swept[i] - direct).abs() < 1e-10 * direct.abs().max(1.0), "h = {h}, i = {i}");
            }
        }
    }

    #[test]
    fn single_datum_regression() {
        let p = point_path(&[0.4, 0.6], 2.5);
        let h = vec![0.1, 0.2];
        let re = RegressionEstimate::known_f(&p, vec![epan(), epan()], h.clone(), |y| y, |_| 1.0).unwrap();
        let got = estimate_regression(&re, &[0.4, 0.6]).unwrap();
        let expect = 2.5 * 0.75 * 0.75 / (1.0 * 1.0 * h[0] * h[1]) * 0.05;
        assert!((got - expect).abs() < 1e-12);
        assert!(matches!(re.eval(&[0.9, 0.6]), Err(Error::Undefined(_))));
    }

    #[test]
    fn constant_response_gives_kernel_density() {
        let mut p = default_path(1e4, 23, 0.0);
        for y in &mut p.y {
            *y = 3.0;
        }
        let re = RegressionEstimate::known_f(&p, vec![epan(), epan()], vec![0.1, 0.1], |y| y, |_| 1.0).unwrap();
        let v = re.eval(&[0.5, 0.5]).unwrap();
        assert!((v - 3.0).abs() < 0.05 * 3.0, "{v}");
    }

    #[test]
    fn grid_evaluation_matches_pointwise() {
        let p = default_path(200.0, 8, 0.5);
        let re = RegressionEstimate::known_f(&p, vec![epan(), epan()], vec![0.07, 0.09], |y| y, |_| 1.0).unwrap();
        let axes = vec![crate::quadrature::linspace(0.1, 0.9, 7), vec![0.15, 0.5, 0.8]];
        let g = re.eval_grid(&axes).unwrap();
        for (n, pt) in tensor_points(&axes).iter().enumerate() {
            let v = re.eval(pt).unwrap();
            assert!((g.values[n] - v).abs() < 1e-12 * v.abs().max(1.0));
            assert!(g.hits[n] > 0);
        }
        let far = re.eval_grid(&[vec![2.0], vec![0.5]]).unwrap();
        assert_eq!(far.undefined_count(), 1);
        assert!(re.eval_grid(&[vec![0.5, 0.1], vec![0.5]]).is_err());
    }

    #[test]
    fn localization_is_exact() {
        let p = default_path(100.0, 2, 0.5);
        let h = vec![0.05, 0.05];
        let x = [0.5, 0.5];
        let re = RegressionEstimate::known_f(&p, vec![epan(), epan()], h.clone(), |y| y, |_| 1.0).unwrap();
        let base = re.eval(&x).unwrap();
        let mut q = p.clone();
        let mut changed = 0;
        for i in 0..q.len() {
            let far = (q.x[i * 2] - x[0]).abs() > h[0] || (q.x[i * 2 + 1] - x[1]).abs() > h[1];
            if far {
                q.y[i] = -q.y[i] * 7.0 + 1.0;
                changed += 1;
            }
        }
        assert!(changed > 0);
        let re2 = RegressionEstimate::known_f(&q, vec![epan(), epan()], h, |y| y, |_| 1.0).unwrap();
        assert_eq!(re2.eval(&x).unwrap(), base);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn linear_in_response(exp in -4i32..4, negate in any::<bool>(), seed in 0u64..1000) {
            let lambda = if negate { -(2f64.powi(exp)) } else { 2f64.powi(exp) };
            let p = default_path(40.0, seed, 0.0);
            let mut q = p.clone();
            for y in &mut q.y { *y *= lambda; }
            let ks = vec![epan(), epan()];
            let a = RegressionEstimate::known_f(&p, ks.clone(), vec![0.2, 0.2], |y| y, |_| 1.0).unwrap();
            let b = RegressionEstimate::known_f(&q, ks, vec![0.2, 0.2], |y| y, |_| 1.0).unwrap();
            for x in [[0.5, 0.5], [0.3, 0.7]] {
                prop_assert_eq!(b.eval(&x).unwrap(), lambda * a.eval(&x).unwrap());
            }
        }
    }
}
