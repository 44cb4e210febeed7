//! Compactly supported kernels of arbitrary even order.
//!
//! Every kernel here is `Q(u^2) * B(u)` on `[-1, 1]`, where `B` is one of the
//! classical order-2 polynomial kernels and `Q` is an even polynomial chosen
//! so that the moments `1..p-1` vanish. Products of identical 1-D kernels give
//! the multivariate kernels used for density estimation.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::Rule;

/// Gauss–Legendre nodes used for cached moments.
pub const MOMENT_NODES: usize = 200;

/// The order-2 kernels higher orders are built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKernel {
    /// `3/4 (1 - u^2)`
    Epanechnikov,
    /// `15/16 (1 - u^2)^2`, also called biweight.
    Quartic,
    /// `35/32 (1 - u^2)^3`
    Triweight,
}

impl BaseKernel {
    #[inline]
    fn eval_sq(self, t: f64) -> f64 {
        let s = 1.0 - t;
        match self {
            BaseKernel::Epanechnikov => 0.75 * s,
            BaseKernel::Quartic => 0.9375 * s * s,
            BaseKernel::Triweight => 1.09375 * s * s * s,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BaseKernel::Epanechnikov => "epanechnikov",
            BaseKernel::Quartic => "quartic",
            BaseKernel::Triweight => "triweight",
        }
    }
}

impl fmt::Display for BaseKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaseKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "epanechnikov" => Ok(BaseKernel::Epanechnikov),
            "quartic" | "biweight" => Ok(BaseKernel::Quartic),
            "triweight" => Ok(BaseKernel::Triweight),
            other => Err(Error::InvalidArgument(format!("unknown kernel '{other}'"))),
        }
    }
}

/// A symmetric kernel supported on `[-1, 1]` with a declared even order.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel1D {
    base: BaseKernel,
    order: usize,
    /// Coefficients of `Q` in powers of `u^2`.
    correction: Vec<f64>,
    /// `moments[j] = ∫ u^j K(u) du` for `j = 0..=order`.
    moments: Vec<f64>,
}

impl Kernel1D {
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        if !(-1.0..=1.0).contains(&u) {
            return 0.0;
        }
        let t = u * u;
        let mut q = 0.0;
        for c in self.correction.iter().rev() {
            q = q * t + c;
        }
        q * self.base.eval_sq(t)
    }

    /// Half-width `s` of the support `[-s, s]`.
    pub fn support(&self) -> f64 {
        1.0
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn base(&self) -> BaseKernel {
        self.base
    }

    pub fn correction(&self) -> &[f64] {
        &self.correction
    }

    /// `∫ u^j K(u) du`; cached for `j <= order`.
    pub fn moment(&self, j: usize) -> f64 {
        match self.moments.get(j) {
            Some(m) => *m,
            None => self.quadrature_moment(j),
        }
    }

    /// Coefficients of `K` as a polynomial in `t = u^2`, valid for `t < 1`.
    pub(crate) fn poly_in_square(&self) -> Vec<f64> {
        let base: &[f64] = match self.base {
            BaseKernel::Epanechnikov => &[0.75, -0.75],
            BaseKernel::Quartic => &[0.9375, -1.875, 0.9375],
            BaseKernel::Triweight => &[1.09375, -3.28125, 3.28125, -1.09375],
        };
        let mut out = vec![0.0; base.len() + self.correction.len() - 1];
        for (i, b) in base.iter().enumerate() {
            for (j, c) in self.correction.iter().enumerate() {
                out[i + j] += b * c;
            }
        }
        out
    }

    fn quadrature_moment(&self, j: usize) -> f64 {
        let rule = Rule::gauss_legendre(MOMENT_NODES);
        rule.integrate(|u| u.powi(j as i32) * self.eval(u))
    }

    fn with_correction(base: BaseKernel, order: usize, correction: Vec<f64>) -> Self {
        let mut k = Kernel1D {
            base,
            order,
            correction,
            moments: Vec::new(),
        };
        k.moments = (0..=order).map(|j| k.quadrature_moment(j)).collect();
        k
    }
}

/// The order-2 kernel `name` on `[-1, 1]`.
pub fn make_base_kernel(name: BaseKernel) -> Kernel1D {
    Kernel1D::with_correction(name, 2, vec![1.0])
}

/// Builds the order-`target_order` kernel `Q(u^2) * B(u)` from the base shape
/// of `base`.
///
/// With `r = p / 2`, the coefficients of `Q` solve `M c = e_0` where
/// `M[j][m] = ∫ u^(2j + 2m) B(u) du`; odd moments vanish by symmetry.
pub fn raise_kernel_order(base: &Kernel1D, target_order: usize) -> Result<Kernel1D> {
    if target_order < 2 || target_order % 2 != 0 {
        return Err(Error::OddOrder(target_order));
    }
    let shape = make_base_kernel(base.base);
    let r = target_order / 2;
    let mu: Vec<f64> = (0..2 * r - 1).map(|j| shape.moment(2 * j)).collect();
    let m = DMatrix::from_fn(r, r, |j, k| mu[j + k]);
    let mut rhs = DVector::zeros(r);
    rhs[0] = 1.0;
    let coef = m
        .lu()
        .solve(&rhs)
        .filter(|c| c.iter().all(|v| v.is_finite()))
        .ok_or(Error::SingularMomentSystem)?;
    Ok(Kernel1D::with_correction(
        base.base,
        target_order,
        coef.iter().copied().collect(),
    ))
}

/// Convenience: base kernel by name raised to `order`.
pub fn kernel_of_order(name: BaseKernel, order: usize) -> Result<Kernel1D> {
    raise_kernel_order(&make_base_kernel(name), order)
}

/// `∫ u^j K(u) du` by Gauss–Legendre quadrature over the support.
pub fn kernel_moment(kern: &Kernel1D, j: usize) -> f64 {
    kern.moment(j)
}

/// `K(u) = Π_l K_l(u_l)` with all factors of the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductKernel {
    factors: Vec<Kernel1D>,
}

impl ProductKernel {
    pub fn new(factors: Vec<Kernel1D>) -> Result<Self> {
        let Some(first) = factors.first() else {
            return Err(Error::InvalidArgument("product kernel needs d >= 1 factors".into()));
        };
        let order = first.order();
        if factors.iter().any(|f| f.order() != order) {
            return Err(Error::InvalidArgument(
                "product kernel factors must share one order".into(),
            ));
        }
        Ok(ProductKernel { factors })
    }

    /// `d` copies of `kern`.
    pub fn isotropic(kern: Kernel1D, d: usize) -> Result<Self> {
        ProductKernel::new(vec![kern; d])
    }

    pub fn dim(&self) -> usize {
        self.factors.len()
    }

    pub fn order(&self) -> usize {
        self.factors[0].order()
    }

    pub fn factors(&self) -> &[Kernel1D] {
        &self.factors
    }

    pub fn eval(&self, u: &[f64]) -> Result<f64> {
        if u.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: u.len(),
            });
        }
        Ok(self.eval_unchecked(u))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, u: &[f64]) -> f64 {
        let mut p = 1.0;
        for (k, &ui) in self.factors.iter().zip(u) {
            p *= k.eval(ui);
            if p == 0.0 {
                return 0.0;
            }
        }
        p
    }
}

/// Free-function form of [`ProductKernel::eval`].
pub fn eval_product(kern: &ProductKernel, u: &[f64]) -> Result<f64> {
    kern.eval(u)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn epan() -> Kernel1D {
        make_base_kernel(BaseKernel::Epanechnikov)
    }

    #[test]
    fn epanechnikov_values() {
        let k = epan();
        assert_eq!(k.eval(0.0), 0.75);
        assert_eq!(k.eval(1.5), 0.0);
        assert_eq!(k.eval(-1.0), 0.0);
        assert_eq!(k.order(), 2);
    }

    #[test]
    fn epanechnikov_moments() {
        let k = epan();
        assert!((kernel_moment(&k, 0) - 1.0).abs() < 1e-12);
        assert!(kernel_moment(&k, 1).abs() < 1e-12);
        assert!((kernel_moment(&k, 2) - 0.2).abs() < 1e-10);
    }

    #[test]
    fn quartic_second_moment_is_one_seventh() {
        let k = make_base_kernel(BaseKernel::Quartic);
        assert!((k.moment(2) - 1.0 / 7.0).abs() < 1e-12);
        let t = make_base_kernel(BaseKernel::Triweight);
        assert!((t.moment(0) - 1.0).abs() < 1e-12);
        assert!((t.moment(2) - 1.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn polynomial_form_matches_eval() {
        for base in [BaseKernel::Epanechnikov, BaseKernel::Quartic, BaseKernel::Triweight] {
            let k = kernel_of_order(base, 6).unwrap();
            let p = k.poly_in_square();
            for i in 0..50 {
                let u = -0.99 + 0.04 * i as f64;
                let t = u * u;
                let v = p.iter().rev().fold(0.0, |acc, c| acc * t + c);
                assert!((v - k.eval(u)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn order_two_is_identity() {
        let k = epan();
        let r = raise_kernel_order(&k, 2).unwrap();
        for i in 0..=100 {
            let u = -1.2 + 2.4 * i as f64 / 100.0;
            assert!((k.eval(u) - r.eval(u)).abs() < 1e-15);
        }
    }

    #[test]
    fn order_four_epanechnikov_closed_form() {
        // (15/32)(3 - 10u^2 + 7u^4) = 3/4 (1-u^2) * (15/8)(1 - 7/3 u^2)
        let k4 = kernel_of_order(BaseKernel::Epanechnikov, 4).unwrap();
        for i in 0..=50 {
            let u = -1.0 + 2.0 * i as f64 / 50.0;
            let closed = 15.0 / 32.0 * (3.0 - 10.0 * u * u + 7.0 * u.powi(4));
            assert!((k4.eval(u) - closed).abs() < 1e-12, "u={u}");
        }
        assert!(k4.moment(2).abs() < 1e-12);
        assert!(k4.moment(4).abs() > 1e-3);
    }

    #[test]
    fn order_six_moments() {
        let k6 = kernel_of_order(BaseKernel::Epanechnikov, 6).unwrap();
        assert!((k6.moment(0) - 1.0).abs() < 1e-10);
        for j in 1..6 {
            assert!(k6.moment(j).abs() < 1e-10, "j={j}");
        }
        assert!(k6.moment(6).abs() > 1e-4);
    }

    #[test]
    fn odd_order_rejected() {
        assert_eq!(raise_kernel_order(&epan(), 3), Err(Error::OddOrder(3)));
        assert_eq!(raise_kernel_order(&epan(), 0), Err(Error::OddOrder(0)));
    }

    #[test]
    fn continuous_at_support_endpoints() {
        for base in [BaseKernel::Epanechnikov, BaseKernel::Quartic, BaseKernel::Triweight] {
            for p in [2, 4, 6, 8] {
                let k = kernel_of_order(base, p).unwrap();
                assert!(k.eval(1.0 - 1e-9).abs() < 1e-6);
                assert!(k.eval(-1.0 + 1e-9).abs() < 1e-6);
                assert_eq!(k.eval(1.0 + 1e-9), 0.0);
            }
        }
    }

    #[test]
    fn product_kernel_evaluation() {
        let pk = ProductKernel::isotropic(epan(), 2).unwrap();
        assert!((eval_product(&pk, &[0.0, 0.0]).unwrap() - 0.5625).abs() < 1e-15);
        assert_eq!(pk.eval(&[2.0, 0.0]).unwrap(), 0.0);
        assert_eq!(pk.eval(&[0.1, 2.0]).unwrap(), 0.0);
        let one = ProductKernel::isotropic(epan(), 1).unwrap();
        assert_eq!(one.eval(&[0.3]).unwrap(), epan().eval(0.3));
        assert_eq!(
            pk.eval(&[0.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        );
    }

    #[test]
    fn mixed_orders_rejected() {
        let k4 = kernel_of_order(BaseKernel::Epanechnikov, 4).unwrap();
        assert!(ProductKernel::new(vec![epan(), k4]).is_err());
        assert!(ProductKernel::new(vec![]).is_err());
    }

    #[test]
    fn parse_names() {
        assert_eq!("Epanechnikov".parse::<BaseKernel>().unwrap(), BaseKernel::Epanechnikov);
        assert_eq!("biweight".parse::<BaseKernel>().unwrap(), BaseKernel::Quartic);
        assert!("gaussian".parse::<BaseKernel>().is_err());
    }
}
