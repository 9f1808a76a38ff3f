//! The two-layer student network `f(x) = s * sum_j a_j sigma_j(<w_j, x> + b_j)`.
//!
//! `s` is the output scale: `1/J` for the mean-field network trained by the
//! two-phase algorithm, `1/sqrt(J)` for the lazy baseline.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::hermite::{factorial, he_table, relu_shifted_coeffs, HermiteSeries};
use crate::model::{dot, AdditiveTarget};
use crate::rng;

const MAGIC: &[u8; 8] = b"ADLBNET1";

/// Tolerance for the non-strict sign conditions of the descent-path check.
pub const DESCENT_PATH_TOL: f64 = 1e-15;

/// How the randomized polynomial activation scales `He_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolyNormalization {
    /// `eps_i He_i / sqrt(i)`.
    #[default]
    SqrtI,
    /// `eps_i He_i / sqrt(i!)`.
    SqrtFactorial,
}

impl PolyNormalization {
    fn scale(self, i: usize) -> f64 {
        match self {
            PolyNormalization::SqrtI => 1.0 / (i as f64).sqrt(),
            PolyNormalization::SqrtFactorial => 1.0 / factorial(i).sqrt(),
        }
    }
}

/// Activation family, before per-neuron randomness is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    RandomizedPoly {
        p: usize,
        q: usize,
        #[serde(default)]
        normalization: PolyNormalization,
    },
}

/// Activation with its per-neuron signs (for the polynomial family).
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Relu,
    /// `sigma_j(z) = sum_{i=p}^{q} signs[j][i-p] * scale(i) * He_i(z)`, signs in {-1, 0, 1}.
    RandomizedPoly {
        p: usize,
        q: usize,
        normalization: PolyNormalization,
        signs: Vec<i8>,
    },
}

impl Activation {
    pub fn kind(&self) -> ActivationKind {
        match self {
            Activation::Relu => ActivationKind::Relu,
            Activation::RandomizedPoly { p, q, normalization, .. } => {
                ActivationKind::RandomizedPoly { p: *p, q: *q, normalization: *normalization }
            }
        }
    }
}

/// Phase-I bias initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BiasInit {
    #[default]
    Zero,
    /// `b_j ~ Unif([-C_b, C_b])`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    width: usize,
    d: usize,
    pub(crate) a: Vec<f64>,
    pub(crate) w: Vec<f64>,
    pub(crate) b: Vec<f64>,
    act: Activation,
    c_b: f64,
    output_scale: f64,
}

pub fn init_network(
    width: usize,
    d: usize,
    kind: ActivationKind,
    c_b: f64,
    bias: BiasInit,
    seed: u64,
) -> Result<NetworkState> {
    if width == 0 || d == 0 {
        return Err(LabError::InvalidArgument("J and d must be positive".into()));
    }
    if !(c_b >= 0.0) || !c_b.is_finite() {
        return Err(LabError::InvalidArgument("C_b must be finite and >= 0".into()));
    }
    let mut w_rng = rng::derived(seed, 0);
    let mut a_rng = rng::derived(seed, 1);
    let mut b_rng = rng::derived(seed, 2);
    let mut s_rng = rng::derived(seed, 3);

    let w: Vec<f64> = (0..width).flat_map(|_| rng::unit_vector(&mut w_rng, d)).collect();
    let a: Vec<f64> = (0..width).map(|_| rng::sign(&mut a_rng)).collect();
    let b: Vec<f64> = match bias {
        BiasInit::Zero => vec![0.0; width],
        BiasInit::Uniform => uniform_biases(&mut b_rng, width, c_b),
    };
    let act = match kind {
        ActivationKind::Relu => Activation::Relu,
        ActivationKind::RandomizedPoly { p, q, normalization } => {
            if p == 0 || q < p {
                return Err(LabError::InvalidArgument(format!(
                    "randomized polynomial needs 1 <= p <= q (p = {p}, q = {q})"
                )));
            }
            let signs = (0..width * (q - p + 1)).map(|_| s_rng.random_range(-1i8..=1)).collect();
            Activation::RandomizedPoly { p, q, normalization, signs }
        }
    };
    Ok(NetworkState { width, d, a, w, b, act, c_b, output_scale: 1.0 / width as f64 })
}

pub(crate) fn uniform_biases(rng: &mut impl Rng, width: usize, c_b: f64) -> Vec<f64> {
    if c_b == 0.0 {
        return vec![0.0; width];
    }
    (0..width).map(|_| rng.random_range(-c_b..=c_b)).collect()
}

impl NetworkState {
    /// Assembles a network from explicit parameters. `w` is row-major `J x d`.
    pub fn from_parts(d: usize, a: Vec<f64>, w: Vec<f64>, b: Vec<f64>, act: Activation, c_b: f64) -> Result<Self> {
        let width = a.len();
        if width == 0 || d == 0 || w.len() != width * d || b.len() != width {
            return Err(LabError::InvalidArgument("inconsistent network dimensions".into()));
        }
        if let Activation::RandomizedPoly { p, q, signs, .. } = &act {
            if *p == 0 || q < p || signs.len() != width * (q - p + 1) {
                return Err(LabError::InvalidArgument("inconsistent sign table".into()));
            }
        }
        Ok(NetworkState { width, d, a, w, b, act, c_b, output_scale: 1.0 / width as f64 })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// Row-major `J x d` first-layer weights.
    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn w_row(&self, j: usize) -> &[f64] {
        &self.w[j * self.d..(j + 1) * self.d]
    }

    pub fn activation(&self) -> &Activation {
        &self.act
    }

    pub fn c_b(&self) -> f64 {
        self.c_b
    }

    pub fn output_scale(&self) -> f64 {
        self.output_scale
    }

    pub(crate) fn set_c_b(&mut self, c_b: f64) {
        self.c_b = c_b;
    }

    pub fn with_output_scale(mut self, scale: f64) -> Self {
        self.output_scale = scale;
        self
    }

    pub fn set_second_layer(&mut self, a: Vec<f64>) -> Result<()> {
        if a.len() != self.width {
            return Err(LabError::InvalidArgument("second layer has wrong length".into()));
        }
        self.a = a;
        Ok(())
    }

    pub fn row_norm(&self, j: usize) -> f64 {
        dot(self.w_row(j), self.w_row(j)).sqrt()
    }

    /// Width-one network holding neuron `j`, with the same output scale.
    pub fn neuron(&self, j: usize) -> NetworkState {
        let act = match &self.act {
            Activation::Relu => Activation::Relu,
            Activation::RandomizedPoly { p, q, normalization, signs } => {
                let k = q - p + 1;
                Activation::RandomizedPoly {
                    p: *p,
                    q: *q,
                    normalization: *normalization,
                    signs: signs[j * k..(j + 1) * k].to_vec(),
                }
            }
        };
        NetworkState {
            width: 1,
            d: self.d,
            a: vec![self.a[j]],
            w: self.w_row(j).to_vec(),
            b: vec![self.b[j]],
            act,
            c_b: self.c_b,
            output_scale: self.output_scale,
        }
    }

    /// `sigma_j(z)`.
    pub fn sigma(&self, j: usize, z: f64) -> f64 {
        match &self.act {
            Activation::Relu => z.max(0.0),
            Activation::RandomizedPoly { p, q, normalization, signs } => {
                let he = he_table(*q, z);
                let row = &signs[j * (q - p + 1)..(j + 1) * (q - p + 1)];
                (*p..=*q)
                    .zip(row)
                    .filter(|(_, &e)| e != 0)
                    .map(|(i, &e)| e as f64 * normalization.scale(i) * he[i])
                    .sum()
            }
        }
    }

    /// `sigma_j'(z)`; the ReLU derivative at 0 is taken as 0.
    pub fn sigma_prime(&self, j: usize, z: f64) -> f64 {
        match &self.act {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::RandomizedPoly { p, q, normalization, signs } => {
                let he = he_table(q.saturating_sub(1), z);
                let row = &signs[j * (q - p + 1)..(j + 1) * (q - p + 1)];
                (*p..=*q)
                    .zip(row)
                    .filter(|(_, &e)| e != 0)
                    .map(|(i, &e)| e as f64 * normalization.scale(i) * i as f64 * he[i - 1])
                    .sum()
            }
        }
    }

    /// `<w_j, x> + b_j`.
    pub fn preactivation(&self, j: usize, x: &[f64]) -> f64 {
        dot(self.w_row(j), x) + self.b[j]
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        let sum: f64 = (0..self.width).map(|j| self.a[j] * self.sigma(j, self.preactivation(j, x))).sum();
        self.output_scale * sum
    }

    /// Hermite expansion of `z -> a_j sigma_j(z + b_j)` up to degree `q`.
    pub fn neuron_expansion(&self, j: usize, q: usize) -> HermiteSeries {
        let base = match &self.act {
            Activation::Relu => relu_shifted_coeffs(self.b[j], q),
            Activation::RandomizedPoly { p, q: deg, normalization, signs } => {
                let row = &signs[j * (deg - p + 1)..(j + 1) * (deg - p + 1)];
                let mut c = vec![0.0; deg + 1];
                for (i, &e) in (*p..=*deg).zip(row) {
                    c[i] = e as f64 * normalization.scale(i);
                }
                HermiteSeries::new(c).shifted(self.b[j]).truncated(q)
            }
        };
        base.scaled(self.a[j])
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + 8 * (self.w.len() + 2 * self.width));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.width as u64).to_le_bytes());
        buf.extend_from_slice(&(self.d as u64).to_le_bytes());
        let (kind, p, q, norm, signs): (u8, u32, u32, u8, &[i8]) = match &self.act {
            Activation::Relu => (0, 0, 0, 0, &[]),
            Activation::RandomizedPoly { p, q, normalization, signs } => (
                1,
                *p as u32,
                *q as u32,
                match normalization {
                    PolyNormalization::SqrtI => 0,
                    PolyNormalization::SqrtFactorial => 1,
                },
                signs,
            ),
        };
        buf.push(kind);
        buf.extend_from_slice(&self.c_b.to_le_bytes());
        buf.extend_from_slice(&self.output_scale.to_le_bytes());
        buf.extend_from_slice(&p.to_le_bytes());
        buf.extend_from_slice(&q.to_le_bytes());
        buf.push(norm);
        for v in self.w.iter().chain(&self.a).chain(&self.b) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend(signs.iter().map(|&s| s as u8));

        let mut file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
        file.write_all(&buf).map_err(|e| LabError::io(path, e))?;

        let sidecar = sidecar_path(path);
        let meta = serde_json::to_string_pretty(&NetworkMeta::from(self))?;
        std::fs::write(&sidecar, meta).map_err(|e| LabError::io(&sidecar, e))
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| LabError::io(path, e))?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(LabError::Format("bad network file magic".into()));
        }
        let width = r.u64()? as usize;
        let d = r.u64()? as usize;
        let kind = r.take(1)?[0];
        let c_b = r.f64()?;
        let output_scale = r.f64()?;
        let p = r.u32()? as usize;
        let q = r.u32()? as usize;
        let norm = r.take(1)?[0];
        let w = r.f64s(width * d)?;
        let a = r.f64s(width)?;
        let b = r.f64s(width)?;
        let act = match kind {
            0 => Activation::Relu,
            1 => {
                if p == 0 || q < p {
                    return Err(LabError::Format("bad polynomial degrees".into()));
                }
                let signs = r.take(width * (q - p + 1))?.iter().map(|&u| u as i8).collect();
                Activation::RandomizedPoly {
                    p,
                    q,
                    normalization: if norm == 0 { PolyNormalization::SqrtI } else { PolyNormalization::SqrtFactorial },
                    signs,
                }
            }
            other => return Err(LabError::Format(format!("unknown activation tag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(LabError::Format("trailing bytes in network file".into()));
        }
        Ok(NetworkState::from_parts(d, a, w, b, act, c_b)?.with_output_scale(output_scale))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// JSON sidecar written next to a binary checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkMeta {
    #[serde(rename = "J")]
    pub width: usize,
    pub d: usize,
    pub activation: ActivationKind,
    #[serde(rename = "C_b")]
    pub c_b: f64,
    pub output_scale: f64,
}

impl From<&NetworkState> for NetworkMeta {
    fn from(n: &NetworkState) -> Self {
        NetworkMeta { width: n.width, d: n.d, activation: n.act.kind(), c_b: n.c_b, output_scale: n.output_scale }
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| LabError::Format("truncated network file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| LabError::Format("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Result of the Hermite sign condition for every (neuron, task) pair.
#[derive(Debug, Clone)]
pub struct DescentPathMatrix {
    pub width: usize,
    pub tasks: usize,
    /// Row-major `J x M`.
    pub holds: Vec<bool>,
    /// `min_i alpha_{m,i} beta_{j,i}` over `p <= i <= q`; positive when the
    /// condition holds strictly at every degree.
    pub margin: Vec<f64>,
}

impl DescentPathMatrix {
    pub fn get(&self, j: usize, m: usize) -> bool {
        self.holds[j * self.tasks + m]
    }

    pub fn margin(&self, j: usize, m: usize) -> f64 {
        self.margin[j * self.tasks + m]
    }

    /// Number of neurons satisfying the condition for each task.
    pub fn counts_per_task(&self) -> Vec<usize> {
        (0..self.tasks).map(|m| (0..self.width).filter(|&j| self.get(j, m)).count()).collect()
    }
}

/// For each neuron `j` and task `m`: `alpha_{m,p} beta_{j,p} > 0` and
/// `alpha_{m,i} beta_{j,i} >= 0` for `p < i <= q`, with `alpha` the link
/// coefficients and `beta` the expansion of `a_j sigma_j(. + b_j)`.
pub fn descent_path_check(net: &NetworkState, target: &AdditiveTarget) -> DescentPathMatrix {
    let tasks = target.num_tasks();
    let q_max = target.degree();
    let mut holds = Vec::with_capacity(net.width() * tasks);
    let mut margin = Vec::with_capacity(net.width() * tasks);
    let exps: Vec<usize> = (0..tasks)
        .map(|m| target.links()[m].information_exponent(crate::hermite::DEFAULT_IE_TOL).expect("validated link"))
        .collect();
    for j in 0..net.width() {
        let beta = net.neuron_expansion(j, q_max);
        for (m, link) in target.links().iter().enumerate() {
            let p = exps[m];
            let lead = link.coeff(p) * beta.coeff(p);
            let rest = ((p + 1)..=link.degree()).map(|i| link.coeff(i) * beta.coeff(i)).fold(f64::INFINITY, f64::min);
            holds.push(lead > 0.0 && rest >= -DESCENT_PATH_TOL);
            margin.push(lead.min(rest));
        }
    }
    DescentPathMatrix { width: net.width(), tasks, holds, margin }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermite::he_eval;
    use crate::model::{gen_directions, DirectionMode};
    use approx::assert_abs_diff_eq;

    fn single(a: f64, w: Vec<f64>, b: f64, act: Activation) -> NetworkState {
        let d = w.len();
        NetworkState::from_parts(d, vec![a], w, vec![b], act, 1.0).unwrap()
    }

    #[test]
    fn init_rows_are_unit() {
        let net = init_network(8192, 64, ActivationKind::Relu, 1.0, BiasInit::Zero, 1).unwrap();
        for j in 0..net.width() {
            assert_abs_diff_eq!(net.row_norm(j), 1.0, epsilon = 1e-12);
        }
        assert!(net.a().iter().all(|&a| a == 1.0 || a == -1.0));
        assert!(net.b().iter().all(|&b| b == 0.0));
        assert_eq!(net.output_scale(), 1.0 / 8192.0);
    }

    #[test]
    fn init_is_isotropic() {
        let (jw, d) = (8192, 64);
        let net = init_network(jw, d, ActivationKind::Relu, 1.0, BiasInit::Zero, 2).unwrap();
        let vals: Vec<f64> = (0..jw).map(|j| net.w_row(j)[0].powi(2)).collect();
        let mean = vals.iter().sum::<f64>() / jw as f64;
        // <w, e_1>^2 has mean 1/d and variance 2(d-1)/(d^2 (d+2))
        let var = 2.0 * (d as f64 - 1.0) / ((d * d) as f64 * (d as f64 + 2.0));
        let se = (var / jw as f64).sqrt();
        assert!((mean - 1.0 / d as f64).abs() <= 3.0 * se, "mean {mean}");
    }

    #[test]
    fn init_deterministic_and_uniform_bias() {
        let kind = ActivationKind::RandomizedPoly { p: 3, q: 5, normalization: PolyNormalization::SqrtI };
        let a = init_network(64, 8, kind, 0.5, BiasInit::Uniform, 9).unwrap();
        let b = init_network(64, 8, kind, 0.5, BiasInit::Uniform, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.b().iter().all(|v| v.abs() <= 0.5));
        assert!(a.b().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn forward_examples() {
        let net = single(1.0, vec![1.0, 0.0], -2.0, Activation::Relu);
        assert_eq!(net.forward(&[0.0, 5.0]), 0.0);

        let w = vec![0.6, 0.8, 0.6, 0.8];
        let net = NetworkState::from_parts(2, vec![1.0, -1.0], w, vec![0.1, 0.1], Activation::Relu, 1.0).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0]), 0.0);

        let act = Activation::RandomizedPoly { p: 3, q: 3, normalization: PolyNormalization::SqrtI, signs: vec![1] };
        let net = single(1.0, vec![1.0, 0.0], 0.0, act);
        assert_abs_diff_eq!(net.forward(&[2.0, 7.0]), 2.0 / 3f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(net.forward(&[2.0, 7.0]), he_eval(3, 2.0) / 3f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn forward_is_linear_in_second_layer() {
        let mut net = init_network(32, 5, ActivationKind::Relu, 1.0, BiasInit::Uniform, 4).unwrap();
        let x = [0.3, -1.0, 0.5, 2.0, 0.1];
        let f1 = net.forward(&x);
        let doubled: Vec<f64> = net.a().iter().map(|a| 2.0 * a).collect();
        net.set_second_layer(doubled).unwrap();
        assert_eq!(net.forward(&x), 2.0 * f1);
    }

    #[test]
    fn relu_expansion_examples() {
        let net = single(1.0, vec![1.0], 0.0, Activation::Relu);
        let e = net.neuron_expansion(0, 4);
        assert_abs_diff_eq!(2.0 * e.coeff(2), 0.398_942_280_4, epsilon = 1e-9);
        let neg = single(-1.0, vec![1.0], 0.0, Activation::Relu).neuron_expansion(0, 4);
        for k in 0..=4 {
            assert_eq!(neg.coeff(k), -e.coeff(k));
        }
    }

    #[test]
    fn poly_expansion_without_shift_recovers_signs() {
        let signs = vec![1, 0, -1];
        let act = Activation::RandomizedPoly { p: 2, q: 4, normalization: PolyNormalization::SqrtI, signs };
        let net = single(1.0, vec![1.0], 0.0, act);
        let e = net.neuron_expansion(0, 6);
        assert_abs_diff_eq!(e.coeff(2), 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(e.coeff(3), 0.0);
        assert_abs_diff_eq!(e.coeff(4), -0.5, epsilon = 1e-15);
    }

    #[test]
    fn expansion_reproduces_activation() {
        let kind = ActivationKind::RandomizedPoly { p: 2, q: 5, normalization: PolyNormalization::SqrtFactorial };
        let net = init_network(6, 3, kind, 1.0, BiasInit::Uniform, 12).unwrap();
        for j in 0..6 {
            let e = net.neuron_expansion(j, 5);
            for k in 0..=80 {
                let z = -4.0 + 0.1 * k as f64;
                let want = net.a()[j] * net.sigma(j, z + net.b()[j]);
                assert_abs_diff_eq!(e.eval(z), want, epsilon = 1e-8);
            }
        }
        // ReLU: truncation class
        let net = single(1.0, vec![1.0], 0.4, Activation::Relu);
        let e = net.neuron_expansion(0, 12);
        let mut worst: f64 = 0.0;
        for k in 0..=80 {
            let z = -4.0 + 0.1 * k as f64;
            worst = worst.max((e.eval(z) - (z + 0.4).max(0.0)).abs());
        }
        assert!(worst.is_finite());
    }

    #[test]
    fn poly_derivative_matches_finite_difference() {
        let kind = ActivationKind::RandomizedPoly { p: 3, q: 6, normalization: PolyNormalization::SqrtI };
        let net = init_network(5, 2, kind, 1.0, BiasInit::Zero, 3).unwrap();
        let h = 1e-6;
        for j in 0..5 {
            for &z in &[-1.5, 0.2, 1.9] {
                let fd = (net.sigma(j, z + h) - net.sigma(j, z - h)) / (2.0 * h);
                assert_abs_diff_eq!(net.sigma_prime(j, z), fd, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn descent_path_examples() {
        let dirs = gen_directions(2, 1, DirectionMode::Canonical, 0).unwrap();
        let target = AdditiveTarget::uniform(dirs, HermiteSeries::basis(3), 0.0).unwrap();

        // b = -1: beta_3 ∝ -(-1) He_1... positive, and q = 3
        let net = single(1.0, vec![1.0, 0.0], -1.0, Activation::Relu);
        assert!(descent_path_check(&net, &target).get(0, 0));
        let flipped = single(-1.0, vec![1.0, 0.0], -1.0, Activation::Relu);
        let res = descent_path_check(&flipped, &target);
        assert!(!res.get(0, 0));
        assert!(res.margin(0, 0) < 0.0);

        // well-specified student
        let act = Activation::RandomizedPoly { p: 3, q: 3, normalization: PolyNormalization::SqrtI, signs: vec![1] };
        let net = single(1.0, vec![1.0, 0.0], 0.0, act.clone());
        assert!(descent_path_check(&net, &target).get(0, 0));
        let net = single(-1.0, vec![1.0, 0.0], 0.0, act);
        assert!(!descent_path_check(&net, &target).get(0, 0));

        // zero bias ReLU has no degree-3 component
        let net = single(1.0, vec![1.0, 0.0], 0.0, Activation::Relu);
        assert!(!descent_path_check(&net, &target).get(0, 0));
    }

    #[test]
    fn sign_pattern_fraction() {
        // P(eps_i = +1 for i = p..q) = 3^{-(q-p+1)}
        let (p, q, jw) = (3, 4, 20_000);
        let kind = ActivationKind::RandomizedPoly { p, q, normalization: PolyNormalization::SqrtI };
        let net = init_network(jw, 2, kind, 0.0, BiasInit::Zero, 77).unwrap();
        let Activation::RandomizedPoly { signs, .. } = net.activation() else { unreachable!() };
        let k = q - p + 1;
        let hits = signs.chunks_exact(k).filter(|row| row.iter().all(|&e| e == 1)).count();
        let pr = 1.0 / 9.0;
        let sd = (jw as f64 * pr * (1.0 - pr)).sqrt();
        assert!((hits as f64 - jw as f64 * pr).abs() <= 3.0 * sd, "hits {hits}");
    }

    #[test]
    fn binary_round_trip() {
        let kind = ActivationKind::RandomizedPoly { p: 3, q: 5, normalization: PolyNormalization::SqrtFactorial };
        let net = init_network(7, 4, kind, 0.7, BiasInit::Uniform, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        net.write_binary(&path).unwrap();
        let back = NetworkState::read_binary(&path).unwrap();
        assert_eq!(back, net);
        let meta: NetworkMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(meta, NetworkMeta::from(&net));
        // header: magic, J, d
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 7);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 4);

        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(NetworkState::read_binary(&path), Err(LabError::Format(_))));
    }
}
