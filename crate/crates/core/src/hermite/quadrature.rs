use nalgebra::DMatrix;

use super::series::{factorial, he_table, HermiteSeries};
use crate::error::{LabError, Result};

/// Default number of Gauss–Hermite nodes.
pub const DEFAULT_ORDER: usize = 64;

/// Largest supported Gauss–Hermite order.
pub const MAX_ORDER: usize = 256;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Density of N(0, 1).
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Distribution function of N(0, 1).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    /// Gauss rule for the Gaussian weight; exact up to degree `2n - 1`.
    GaussHermite,
    /// Piecewise Gauss–Legendre panels weighted by the Gaussian density.
    /// Not polynomially exact, but resolves kinks placed at breakpoints.
    Composite,
}

/// Nodes and weights for integrals `∫ h(x) φ(x) dx` against the standard
/// normal density.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    order: usize,
    kind: RuleKind,
}

impl QuadratureRule {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn kind(&self) -> RuleKind {
        self.kind
    }

    /// Highest polynomial degree integrated exactly, if the rule is Gaussian.
    pub fn exact_degree(&self) -> Option<usize> {
        match self.kind {
            RuleKind::GaussHermite => Some(2 * self.order - 1),
            RuleKind::Composite => None,
        }
    }

    pub fn integrate(&self, h: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * h(x)).sum()
    }

    /// Composite rule on `[-span, span]` with the given breakpoints, `per_panel`
    /// Gauss–Legendre nodes on each panel and panels no wider than `max_width`.
    pub fn composite(breakpoints: &[f64], span: f64, per_panel: usize, max_width: f64) -> Result<Self> {
        if per_panel == 0 || !(span > 0.0) || !(max_width > 0.0) {
            return Err(LabError::InvalidArgument("composite rule needs positive span, width and node count".into()));
        }
        let mut cuts: Vec<f64> = breakpoints.iter().copied().filter(|b| b.is_finite() && b.abs() < span).collect();
        cuts.push(-span);
        cuts.push(span);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();

        let (gl_nodes, gl_weights) = gauss_legendre(per_panel)?;
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for pair in cuts.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let panels = ((hi - lo) / max_width).ceil().max(1.0) as usize;
            let width = (hi - lo) / panels as f64;
            for p in 0..panels {
                let a = lo + p as f64 * width;
                let mid = a + 0.5 * width;
                for (t, w) in gl_nodes.iter().zip(&gl_weights) {
                    let x = mid + 0.5 * width * t;
                    nodes.push(x);
                    weights.push(0.5 * width * w * normal_pdf(x));
                }
            }
        }
        let order = nodes.len();
        Ok(QuadratureRule { nodes, weights, order, kind: RuleKind::Composite })
    }

    /// High-accuracy rule for functions with a single kink at `x = kink`.
    pub fn with_kink(kink: f64) -> Result<Self> {
        Self::composite(&[kink], 14.0, 24, 1.0)
    }
}

/// Golub–Welsch: eigenvalues of the symmetric tridiagonal Jacobi matrix and
/// squared first components of its eigenvectors.
fn golub_welsch(diag: &[f64], off: &[f64], mu0: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = diag.len();
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        jac[(i, i)] = diag[i];
        if i + 1 < n {
            jac[(i, i + 1)] = off[i];
            jac[(i + 1, i)] = off[i];
        }
    }
    let eig = jac.try_symmetric_eigen(1e-15, 10_000)?;
    let mut pairs: Vec<(f64, f64)> =
        (0..n).map(|i| (eig.eigenvalues[i], mu0 * eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Some(pairs.into_iter().unzip())
}

fn gauss_legendre(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let diag = vec![0.0; n];
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&diag, &off, 2.0).ok_or(LabError::EigenSolve { order: n })
}

/// Orthonormal Hermite values `p_k = He_k / sqrt(k!)` for `k = 0..=n`.
fn orthonormal_hermite(n: usize, x: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(n + 1);
    p.push(1.0);
    if n >= 1 {
        p.push(x);
    }
    for k in 1..n {
        let kf = k as f64;
        let next = (x * p[k] - kf.sqrt() * p[k - 1]) / (kf + 1.0).sqrt();
        p.push(next);
    }
    p
}

/// `n`-point Gauss–Hermite rule for the standard normal measure.
///
/// Nodes come from the Jacobi matrix and are polished by Newton steps on the
/// orthonormal recurrence; weights use the Christoffel formula
/// `w_i = 1 / sum_{k<n} p_k(x_i)^2`, which keeps tail weights accurate to
/// relative precision.
pub fn gauss_quadrature(n: usize) -> Result<QuadratureRule> {
    if n == 0 || n > MAX_ORDER {
        return Err(LabError::InvalidArgument(format!("quadrature order must be in 1..={MAX_ORDER}, got {n}")));
    }
    let diag = vec![0.0; n];
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    let (mut nodes, _) = golub_welsch(&diag, &off, 1.0).ok_or(LabError::EigenSolve { order: n })?;

    let nf = n as f64;
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let p = orthonormal_hermite(n, *x);
            let dp = nf.sqrt() * p[n - 1];
            if dp == 0.0 {
                break;
            }
            let step = p[n] / dp;
            *x -= step;
            if step.abs() <= 1e-16 * x.abs().max(1.0) {
                break;
            }
        }
    }
    // symmetric measure
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let m = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -m;
        nodes[j] = m;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }

    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            let p = orthonormal_hermite(n - 1, x);
            1.0 / p.iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    if nodes.iter().chain(&weights).any(|v| !v.is_finite()) {
        return Err(LabError::EigenSolve { order: n });
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(QuadratureRule { nodes, weights, order: n, kind: RuleKind::GaussHermite })
}

/// Hermite coefficients `c_k = (1/k!) E[h(z) He_k(z)]` for `k <= q`, with the
/// expectation taken by `rule`. Truncation error is the caller's concern.
pub fn expand_function(h: impl Fn(f64) -> f64, q: usize, rule: &QuadratureRule) -> HermiteSeries {
    let mut acc = vec![0.0; q + 1];
    for (&x, &w) in rule.nodes().iter().zip(rule.weights()) {
        let hx = w * h(x);
        for (slot, he) in acc.iter_mut().zip(he_table(q, x)) {
            *slot += hx * he;
        }
    }
    for (k, slot) in acc.iter_mut().enumerate() {
        *slot /= factorial(k);
    }
    HermiteSeries::new(acc)
}

/// Closed-form expansion of `z -> ReLU(z + b)` up to degree `q`.
///
/// `E[ReLU(z+b)] = b Φ(b) + φ(b)`, `E[ReLU(z+b) He_1(z)] = Φ(b)`, and for
/// `i >= 2`, `E[ReLU(z+b) He_i(z)] = (-1)^i φ(b) He_{i-2}(b)`.
pub fn relu_shifted_coeffs(b: f64, q: usize) -> HermiteSeries {
    let pdf = normal_pdf(b);
    let cdf = normal_cdf(b);
    let mut c = vec![0.0; q + 1];
    c[0] = b * cdf + pdf;
    if q >= 1 {
        c[1] = cdf;
    }
    if q >= 2 {
        let he = he_table(q - 2, b);
        for i in 2..=q {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            c[i] = sign * pdf * he[i - 2] / factorial(i);
        }
    }
    HermiteSeries::new(c)
}

/// Smallest Gauss–Hermite order for which every residual of
/// [`superorthogonality_check`] is an exact polynomial integral.
pub fn superorthogonality_order(degree: usize, max_power: usize, max_degree: usize) -> usize {
    (max_power * degree + max_degree) / 2 + 1
}

/// Residuals `r[k-1][l-1] = E[f(z)^k He_l(z)]` for `1 <= k <= max_power`,
/// `1 <= l <= max_degree`, computed with `rule`.
///
/// Refuses to run when the rule is not a Gauss–Hermite rule of sufficient order.
pub fn superorthogonality_check(
    f: &HermiteSeries,
    max_power: usize,
    max_degree: usize,
    rule: &QuadratureRule,
) -> Result<Vec<Vec<f64>>> {
    let needed = superorthogonality_order(f.degree(), max_power, max_degree);
    if rule.kind() != RuleKind::GaussHermite || rule.order() < needed {
        return Err(LabError::InsufficientQuadratureOrder {
            needed,
            got: if rule.kind() == RuleKind::GaussHermite { rule.order() } else { 0 },
        });
    }
    let mut r = vec![vec![0.0; max_degree]; max_power];
    for (&x, &w) in rule.nodes().iter().zip(rule.weights()) {
        let fx = f.eval(x);
        let he = he_table(max_degree, x);
        let mut power = 1.0;
        for row in r.iter_mut() {
            power *= fx;
            for (l, slot) in row.iter_mut().enumerate() {
                *slot += w * power * he[l + 1];
            }
        }
    }
    Ok(r)
}
