use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Default tolerance for [`HermiteSeries::information_exponent`].
pub const DEFAULT_IE_TOL: f64 = 1e-9;

/// Evaluates the probabilists' Hermite polynomial `He_k(x)` by the
/// three-term recurrence `He_{k+1} = x He_k - k He_{k-1}`.
pub fn he_eval(k: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if k == 0 {
        return prev;
    }
    for n in 1..k {
        let next = x * cur - n as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// All of `He_0(x) ..= He_k(x)`.
pub fn he_table(k: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(k + 1);
    out.push(1.0);
    if k >= 1 {
        out.push(x);
    }
    for n in 1..k {
        let next = x * out[n] - n as f64 * out[n - 1];
        out.push(next);
    }
    out
}

pub fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |acc, i| acc * i as f64)
}

pub(crate) fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// A polynomial written in the unnormalized probabilists' Hermite basis,
/// `s(z) = sum_k c_k He_k(z)` with `E[He_k He_l] = k! delta_kl` under N(0, 1).
///
/// Stored in canonical form: trailing zero coefficients are trimmed, and the
/// zero series is `[0.0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct HermiteSeries {
    coeffs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for HermiteSeries {
    type Error = LabError;

    fn try_from(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(LabError::Format("Hermite coefficients must be finite".into()));
        }
        Ok(HermiteSeries::new(coeffs))
    }
}

impl From<HermiteSeries> for Vec<f64> {
    fn from(s: HermiteSeries) -> Self {
        s.coeffs
    }
}

impl HermiteSeries {
    pub fn new(mut coeffs: Vec<f64>) -> Self {
        while coeffs.len() > 1 && coeffs[coeffs.len() - 1] == 0.0 {
            coeffs.pop();
        }
        if coeffs.is_empty() {
            coeffs.push(0.0);
        }
        HermiteSeries { coeffs }
    }

    pub fn zero() -> Self {
        HermiteSeries { coeffs: vec![0.0] }
    }

    /// The single basis polynomial `He_k`.
    pub fn basis(k: usize) -> Self {
        let mut coeffs = vec![0.0; k + 1];
        coeffs[k] = 1.0;
        HermiteSeries { coeffs }
    }

    /// `He_k / sqrt(k!)`, the unit-norm version of [`HermiteSeries::basis`].
    pub fn normalized_basis(k: usize) -> Self {
        Self::basis(k).scaled(1.0 / factorial(k).sqrt())
    }

    /// Builds a series from coefficients on the normalized basis
    /// `He_k / sqrt(k!)`.
    pub fn from_normalized(coeffs: &[f64]) -> Self {
        Self::new(coeffs.iter().enumerate().map(|(k, c)| c / factorial(k).sqrt()).collect())
    }

    /// Coefficients on the normalized basis `He_k / sqrt(k!)`.
    pub fn to_normalized(&self) -> Vec<f64> {
        self.coeffs.iter().enumerate().map(|(k, c)| c * factorial(k).sqrt()).collect()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Coefficient of `He_k`; zero beyond the degree.
    pub fn coeff(&self, k: usize) -> f64 {
        self.coeffs.get(k).copied().unwrap_or(0.0)
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    /// `sum_k c_k He_k(x)` in one recurrence pass.
    pub fn eval(&self, x: f64) -> f64 {
        let mut acc = self.coeffs[0];
        if self.coeffs.len() == 1 {
            return acc;
        }
        let (mut prev, mut cur) = (1.0, x);
        acc += self.coeffs[1] * cur;
        for n in 1..self.degree() {
            let next = x * cur - n as f64 * prev;
            prev = cur;
            cur = next;
            acc += self.coeffs[n + 1] * cur;
        }
        acc
    }

    /// `E[s(z) t(z)]` for `z ~ N(0, 1)`, exact in coefficient space.
    pub fn inner_product(&self, other: &HermiteSeries) -> f64 {
        let mut fact = 1.0;
        let mut acc = 0.0;
        for (k, (a, b)) in self.coeffs.iter().zip(&other.coeffs).enumerate() {
            if k > 0 {
                fact *= k as f64;
            }
            acc += fact * a * b;
        }
        acc
    }

    /// `E[s(z)^2] = sum_k k! c_k^2`.
    pub fn second_moment(&self) -> f64 {
        self.inner_product(self)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.coeffs.iter().map(|c| c * factor).collect())
    }

    pub fn add(&self, other: &HermiteSeries) -> Self {
        let n = self.coeffs.len().max(other.coeffs.len());
        Self::new((0..n).map(|k| self.coeff(k) + other.coeff(k)).collect())
    }

    /// Keeps degrees `0..=q`.
    pub fn truncated(&self, q: usize) -> Self {
        Self::new(self.coeffs.iter().take(q + 1).copied().collect())
    }

    /// `s'(z)`, using `He_k' = k He_{k-1}`.
    pub fn derivative(&self) -> Self {
        if self.degree() == 0 {
            return Self::zero();
        }
        Self::new(self.coeffs.iter().enumerate().skip(1).map(|(k, c)| k as f64 * c).collect())
    }

    /// Product in coefficient space via the linearization
    /// `He_m He_n = sum_k C(m,k) C(n,k) k! He_{m+n-2k}`.
    pub fn mul(&self, other: &HermiteSeries) -> Self {
        let (dm, dn) = (self.degree(), other.degree());
        let mut out = vec![0.0; dm + dn + 1];
        for (m, &a) in self.coeffs.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (n, &b) in other.coeffs.iter().enumerate() {
                if b == 0.0 {
                    continue;
                }
                for k in 0..=m.min(n) {
                    out[m + n - 2 * k] += a * b * binomial(m, k) * binomial(n, k) * factorial(k);
                }
            }
        }
        Self::new(out)
    }

    pub fn pow(&self, k: usize) -> Self {
        let mut out = HermiteSeries::new(vec![1.0]);
        for _ in 0..k {
            out = out.mul(self);
        }
        out
    }

    /// Expansion of `z -> s(z + b)`; uses `He_n(z + b) = sum_k C(n,k) b^(n-k) He_k(z)`.
    pub fn shifted(&self, b: f64) -> Self {
        let mut out = vec![0.0; self.coeffs.len()];
        for (n, &c) in self.coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (k, slot) in out.iter_mut().enumerate().take(n + 1) {
                *slot += c * binomial(n, k) * b.powi((n - k) as i32);
            }
        }
        Self::new(out)
    }

    /// Smallest degree `k >= 1` with `|c_k| > tol`.
    pub fn information_exponent(&self, tol: f64) -> Result<usize> {
        self.coeffs
            .iter()
            .enumerate()
            .skip(1)
            .find(|(_, c)| c.abs() > tol)
            .map(|(k, _)| k)
            .ok_or(LabError::NoPositiveDegree { tol })
    }
}

/// A link function whose square stays orthogonal to `He_1` and `He_2`:
/// the `K = L = 2` superorthogonal polynomial, an even polynomial of degree 20.
pub fn superorthogonal_k2_l2() -> HermiteSeries {
    let mut c = vec![0.0; 21];
    c[4] = 1.0;
    c[6] = -4.0 / 15.0;
    c[8] = 11.0 / 280.0;
    c[10] = -19.0 / 4725.0;
    c[12] = 311.0 / 997_920.0;
    c[14] = -719.0 / 37_837_800.0;
    c[16] = 14_297.0 / 15_567_552_000.0;
    c[18] = -35_369.0 / 1_042_053_012_000.0;
    c[20] = 35_369.0 / 41_682_120_480_000.0 - (11_163_552_839.0_f64 / 38.0).sqrt() / 83_364_240_960_000.0;
    HermiteSeries::new(c)
}
