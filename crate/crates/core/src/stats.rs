//! Small statistics toolkit for the Monte Carlo studies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process_sim::normal_cdf;
use crate::quadrature::NeumaierSum;

/// Terms kept in the Kolmogorov series.
pub const KOLMOGOROV_TERMS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// One-sample Kolmogorov–Smirnov distance to the standard normal with the
/// asymptotic p-value `Q(sqrt(n) D)`.
pub fn ks_statistic(sample: &[f64]) -> Result<KsResult> {
    let n = sample.len();
    if n < 8 {
        return Err(Error::Insufficient(format!("KS test needs >= 8 values, got {n}")));
    }
    if sample.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN in KS sample".into()));
    }
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let cdf = normal_cdf(x);
        d = d.max((i as f64 + 1.0) / nf - cdf).max(cdf - i as f64 / nf);
    }
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_survival(nf.sqrt() * d),
        n,
    })
}

/// `P(K > lambda) = 2 Σ_{j>=1} (-1)^(j-1) exp(-2 j^2 lambda^2)`, clamped to
/// `[0, 1]`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut s = NeumaierSum::default();
    for j in 1..=KOLMOGOROV_TERMS {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        s.add(if j % 2 == 1 { term } else { -term });
    }
    (2.0 * s.value()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `log value` on `log x`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if points.len() < 3 {
        return Err(Error::Insufficient(format!(
            "slope fit needs >= 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, v)| !(*x > 0.0 && *v > 0.0)) {
        return Err(Error::InvalidArgument("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = lx.len() as f64;
    let mx = crate::quadrature::sum(&lx) / n;
    let my = crate::quadrature::sum(&ly) / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all abscissae equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(LogLogFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Moments of a sample, accumulated with compensated sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Population variance (divisor `n`).
    pub variance: f64,
    /// `mean^2 + variance`.
    pub mean_square: f64,
    pub skewness: f64,
}

pub fn summarize(xs: &[f64]) -> Summary {
    let n = xs.len();
    if n == 0 {
        return Summary {
            n,
            mean: f64::NAN,
            variance: f64::NAN,
            mean_square: f64::NAN,
            skewness: f64::NAN,
        };
    }
    let nf = n as f64;
    let mean = crate::quadrature::sum(xs) / nf;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).collect::<NeumaierSum>().value() / nf;
    let m3 = xs.iter().map(|x| (x - mean).powi(3)).collect::<NeumaierSum>().value() / nf;
    let skewness = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    Summary {
        n,
        mean,
        variance: m2,
        mean_square: mean * mean + m2,
        skewness,
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
