//! Gauss–Legendre rules and tensor products over boxes.

use std::f64::consts::PI;

/// A one-dimensional quadrature rule on a finite interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    /// `n`-point Gauss–Legendre rule on `[-1, 1]`.
    ///
    /// Nodes are found by Newton iteration on the three-term Legendre
    /// recurrence, starting from the Chebyshev-like guess
    /// `cos(pi (i + 3/4) / (n + 1/2))`.
    pub fn gauss_legendre(n: usize) -> Self {
        assert!(n >= 1, "a quadrature rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, z);
                dp = d;
                let dz = p / d;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, z);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Rule { nodes, weights }
    }

    /// `n`-point Gauss–Legendre rule mapped onto `[a, b]`.
    pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> Self {
        Rule::gauss_legendre(n).mapped(a, b)
    }

    /// Affinely maps a rule on `[-1, 1]` onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> Self {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        Rule {
            nodes: self.nodes.iter().map(|z| mid + half * z).collect(),
            weights: self.weights.iter().map(|w| w * half).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let mut acc = NeumaierSum::default();
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc.add(w * f(*x));
        }
        acc.value()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for j in 2..=n {
        let jf = j as f64;
        let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Integrates `f` over the box `rules[0] x rules[1] x ...` with the tensor
/// product rule. `f` receives the full coordinate vector.
pub fn tensor_integrate<F: FnMut(&[f64]) -> f64>(rules: &[Rule], mut f: F) -> f64 {
    let d = rules.len();
    if d == 0 {
        return f(&[]);
    }
    if rules.iter().any(|r| r.is_empty()) {
        return 0.0;
    }
    let mut idx = vec![0usize; d];
    let mut point: Vec<f64> = rules.iter().map(|r| r.nodes[0]).collect();
    let mut acc = NeumaierSum::default();
    loop {
        let w: f64 = rules.iter().zip(&idx).map(|(r, &i)| r.weights[i]).product();
        acc.add(w * f(&point));
        // odometer increment
        let mut axis = d;
        loop {
            if axis == 0 {
                return acc.value();
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < rules[axis].len() {
                point[axis] = rules[axis].nodes[idx[axis]];
                break;
            }
            idx[axis] = 0;
            point[axis] = rules[axis].nodes[0];
        }
    }
}

/// Compensated (Neumaier) summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = NeumaierSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Compensated sum of a slice.
pub fn sum(xs: &[f64]) -> f64 {
    xs.iter().copied().collect::<NeumaierSum>().value()
}

/// Equispaced grid of `n` points on `[a, b]` (endpoints included).
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (a + b)],
        _ => (0..n)
            .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_interval_length() {
        for n in [1, 2, 5, 16, 32, 64, 200] {
            let r = Rule::gauss_legendre_on(n, 0.1, 0.9);
            assert!((sum(&r.weights) - 0.8).abs() < 1e-13, "n={n}");
        }
    }

    #[test]
    fn known_three_point_rule() {
        let r = Rule::gauss_legendre(3);
        let z = (0.6f64).sqrt();
        assert!((r.nodes[0] + z).abs() < 1e-15);
        assert!((r.nodes[2] - z).abs() < 1e-15);
        assert!((r.weights[1] - 8.0 / 9.0).abs() < 1e-15);
        assert!((r.weights[0] - 5.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn exact_for_polynomials_up_to_degree_2n_minus_1() {
        let n = 10;
        let r = Rule::gauss_legendre_on(n, -1.0, 2.0);
        for p in 0..(2 * n) {
            let exact = (2f64.powi(p as i32 + 1) - (-1f64).powi(p as i32 + 1)) / (p as f64 + 1.0);
            let got = r.integrate(|x| x.powi(p as i32));
            assert!((got - exact).abs() < 1e-11 * exact.abs().max(1.0), "p={p}");
        }
    }

    #[test]
    fn tensor_rule_on_box() {
        let rules = vec![
            Rule::gauss_legendre_on(8, 0.0, 1.0),
            Rule::gauss_legendre_on(8, 0.0, 2.0),
            Rule::gauss_legendre_on(8, -1.0, 1.0),
        ];
        let got = tensor_integrate(&rules, |x| x[0] * x[1] * x[1] + x[2] * x[2]);
        // ∫x dx ∫y² dy ∫dz + ∫dx ∫dy ∫z² dz
        let exact = 0.5 * (8.0 / 3.0) * 2.0 + 1.0 * 2.0 * (2.0 / 3.0);
        assert!((got - exact).abs() < 1e-13);
    }

    #[test]
    fn neumaier_recovers_cancellation() {
        let s: NeumaierSum = [1.0, 1e100, 1.0, -1e100].into_iter().collect();
        assert_eq!(s.value(), 2.0);
    }

    #[test]
    fn linspace_endpoints() {
        let g = linspace(0.1, 0.9, 33);
        assert_eq!(g.len(), 33);
        assert_eq!(g[0], 0.1);
        assert!((g[32] - 0.9).abs() < 1e-15);
        assert!((g[16] - 0.5).abs() < 1e-15);
    }
}
