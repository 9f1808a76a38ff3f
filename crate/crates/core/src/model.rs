//! Index directions, additive targets and labeled samples.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::hermite::{HermiteSeries, DEFAULT_IE_TOL};
use crate::rng::{self, LabRng};

/// Cap on resampling attempts per direction in hypercube mode.
pub const HYPERCUBE_RETRY_CAP: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    /// The first `M` standard basis vectors.
    Canonical,
    /// Independent uniform draws from the unit sphere.
    Sphere,
    /// Rademacher coordinates scaled by `1/sqrt(d)`, rejected until every
    /// pairwise overlap is at most `sqrt(2 ln M / d)`.
    Hypercube,
}

impl fmt::Display for DirectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DirectionMode::Canonical => "canonical",
            DirectionMode::Sphere => "sphere",
            DirectionMode::Hypercube => "hypercube",
        };
        f.write_str(s)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `M` unit vectors in `R^d` with their largest pairwise overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    d: usize,
    rows: Vec<f64>,
    max_overlap: f64,
    mode: DirectionMode,
}

impl DirectionSet {
    /// Builds a set from explicit rows, normalizing each to unit length.
    pub fn from_rows(rows: &[Vec<f64>], mode: DirectionMode) -> Result<Self> {
        let d = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| LabError::InvalidArgument("direction set needs at least one row".into()))?;
        if d == 0 {
            return Err(LabError::InvalidArgument("dimension must be positive".into()));
        }
        let mut flat = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(LabError::InvalidArgument(format!("row {i} has length {}, expected {d}", r.len())));
            }
            let n = norm(r);
            if !(n > 0.0) || !n.is_finite() {
                return Err(LabError::InvalidArgument(format!("row {i} has zero or non-finite norm")));
            }
            flat.extend(r.iter().map(|x| x / n));
        }
        Ok(Self::from_flat(d, flat, mode))
    }

    fn from_flat(d: usize, rows: Vec<f64>, mode: DirectionMode) -> Self {
        let mut set = DirectionSet { d, rows, max_overlap: 0.0, mode };
        set.max_overlap = set.recompute_max_overlap();
        set
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn mode(&self) -> DirectionMode {
        self.mode
    }

    pub fn max_overlap(&self) -> f64 {
        self.max_overlap
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.rows[m * self.d..(m + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.chunks_exact(self.d)
    }

    /// Row-major `M x d` storage.
    pub fn as_flat(&self) -> &[f64] {
        &self.rows
    }

    /// `max_{m != m'} |<v_m, v_m'>|`, zero for a single direction.
    pub fn recompute_max_overlap(&self) -> f64 {
        let m = self.len();
        let mut best: f64 = 0.0;
        for i in 0..m {
            for j in (i + 1)..m {
                best = best.max(dot(self.row(i), self.row(j)).abs());
            }
        }
        best
    }

    /// Projections `<v_m, x>` for every direction.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.rows().map(|v| dot(v, x)).collect()
    }
}

/// `sqrt(2 ln M) / sqrt(d)`, the pairwise overlap guaranteed for hypercube sets.
pub fn hypercube_overlap_bound(d: usize, m: usize) -> f64 {
    (2.0 * (m as f64).ln()).sqrt() / (d as f64).sqrt()
}

pub fn gen_directions(d: usize, m: usize, mode: DirectionMode, seed: u64) -> Result<DirectionSet> {
    if d == 0 || m == 0 {
        return Err(LabError::InvalidArgument("d and M must be positive".into()));
    }
    let mut rng = rng::seeded(seed);
    let rows = match mode {
        DirectionMode::Canonical => {
            if m > d {
                return Err(LabError::TooManyDirections { m, d });
            }
            let mut rows = vec![0.0; m * d];
            for i in 0..m {
                rows[i * d + i] = 1.0;
            }
            rows
        }
        DirectionMode::Sphere => (0..m).flat_map(|_| rng::unit_vector(&mut rng, d)).collect(),
        DirectionMode::Hypercube => hypercube_rows(d, m, hypercube_overlap_bound(d, m), &mut rng)?,
    };
    Ok(DirectionSet::from_flat(d, rows, mode))
}

// Sequential rejection: each new vector is redrawn until it is compatible
// with all accepted ones.
fn hypercube_rows(d: usize, m: usize, bound: f64, rng: &mut LabRng) -> Result<Vec<f64>> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut rows: Vec<f64> = Vec::with_capacity(m * d);
    let mut candidate = vec![0.0; d];
    for _ in 0..m {
        let mut accepted = false;
        for _ in 0..HYPERCUBE_RETRY_CAP {
            for c in candidate.iter_mut() {
                *c = rng::sign(rng) * scale;
            }
            if rows.chunks_exact(d).all(|r| dot(r, &candidate).abs() <= bound + 1e-12) {
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(LabError::OverlapUnreachable { bound, retries: HYPERCUBE_RETRY_CAP });
        }
        rows.extend_from_slice(&candidate);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiversityReport {
    pub ok: bool,
    pub bound: f64,
}

/// `M <= c_v max{1/overlap, sqrt(d)}` with `1/0 = +inf`.
pub fn diversity_bound(d: usize, max_overlap: f64, c_v: f64) -> f64 {
    let inv = if max_overlap > 0.0 { 1.0 / max_overlap } else { f64::INFINITY };
    c_v * inv.max((d as f64).sqrt())
}

pub fn diversity_check(dirs: &DirectionSet, c_v: f64) -> Result<DiversityReport> {
    if !(c_v > 0.0) {
        return Err(LabError::InvalidArgument("c_v must be positive".into()));
    }
    let bound = diversity_bound(dirs.dim(), dirs.max_overlap(), c_v);
    Ok(DiversityReport { ok: dirs.len() as f64 <= bound, bound })
}

/// Orthonormal basis with `basis_m = sum_{m' <= m} coeffs[m][m'] v_m'`.
#[derive(Debug, Clone)]
pub struct Orthonormalized {
    pub d: usize,
    /// Row-major `M x d`.
    pub basis: Vec<f64>,
    /// Row-major lower-triangular `M x M`.
    pub coeffs: Vec<f64>,
}

impl Orthonormalized {
    pub fn basis_row(&self, m: usize) -> &[f64] {
        &self.basis[m * self.d..(m + 1) * self.d]
    }

    pub fn coeff(&self, m: usize, k: usize) -> f64 {
        let n = self.basis.len() / self.d;
        self.coeffs[m * n + k]
    }
}

/// Gram–Schmidt on a nearly orthogonal set, with the coefficient bounds
/// `|c_{m,m'}| <= 4 mu` and `|1 - c_{m,m}| <= 20 M mu` checked on output.
pub fn orthonormalize(dirs: &DirectionSet) -> Result<Orthonormalized> {
    let m = dirs.len();
    let d = dirs.dim();
    let mu = dirs.max_overlap();
    if mu > 0.5 / m as f64 {
        return Err(LabError::PreconditionViolated(format!(
            "max overlap {mu:.4} exceeds 1/(2M) = {:.4}",
            0.5 / m as f64
        )));
    }
    let mut basis = vec![0.0; m * d];
    let mut coeffs = vec![0.0; m * m];
    for i in 0..m {
        let mut u = dirs.row(i).to_vec();
        let mut c = vec![0.0; m];
        c[i] = 1.0;
        // two passes of modified Gram–Schmidt
        for _ in 0..2 {
            for k in 0..i {
                let bk = &basis[k * d..(k + 1) * d];
                let r = dot(bk, &u);
                u.iter_mut().zip(bk).for_each(|(x, b)| *x -= r * b);
                for t in 0..=k {
                    c[t] -= r * coeffs[k * m + t];
                }
            }
        }
        let n = norm(&u);
        if !(n > 1e-12) {
            return Err(LabError::RankDeficient { index: i });
        }
        basis[i * d..(i + 1) * d].iter_mut().zip(&u).for_each(|(b, x)| *b = x / n);
        for t in 0..=i {
            coeffs[i * m + t] = c[t] / n;
        }
    }

    let off_bound = 4.0 * mu;
    let diag_bound = 20.0 * m as f64 * mu;
    for i in 0..m {
        for t in 0..i {
            let c = coeffs[i * m + t];
            if c.abs() > off_bound + 1e-12 {
                return Err(LabError::PreconditionViolated(format!(
                    "|c[{i}][{t}]| = {:.3e} exceeds 4 mu = {off_bound:.3e}",
                    c.abs()
                )));
            }
        }
        let diag = coeffs[i * m + i];
        if (1.0 - diag).abs() > diag_bound + 1e-12 {
            return Err(LabError::PreconditionViolated(format!(
                "|1 - c[{i}][{i}]| = {:.3e} exceeds 20 M mu = {diag_bound:.3e}",
                (1.0 - diag).abs()
            )));
        }
    }
    Ok(Orthonormalized { d, basis, coeffs })
}

/// `f(x) = M^{-1/2} sum_m f_m(<v_m, x>)` plus Gaussian label noise.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveTarget {
    dirs: DirectionSet,
    links: Vec<HermiteSeries>,
    noise_std: f64,
    amplitude: f64,
}

impl AdditiveTarget {
    /// Links are rescaled to unit second moment. Links with a constant term
    /// or with differing information exponents are rejected.
    pub fn new(dirs: DirectionSet, links: Vec<HermiteSeries>, noise_std: f64) -> Result<Self> {
        Self::build(dirs, links, noise_std, false)
    }

    /// Like [`AdditiveTarget::new`] but accepts mixed information exponents.
    pub fn new_allow_mixed(dirs: DirectionSet, links: Vec<HermiteSeries>, noise_std: f64) -> Result<Self> {
        Self::build(dirs, links, noise_std, true)
    }

    /// Every task uses the same link.
    pub fn uniform(dirs: DirectionSet, link: HermiteSeries, noise_std: f64) -> Result<Self> {
        let links = vec![link; dirs.len()];
        Self::new(dirs, links, noise_std)
    }

    fn build(dirs: DirectionSet, links: Vec<HermiteSeries>, noise_std: f64, allow_mixed: bool) -> Result<Self> {
        if links.len() != dirs.len() {
            return Err(LabError::InvalidArgument(format!("{} links for {} directions", links.len(), dirs.len())));
        }
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(LabError::InvalidArgument("noise_std must be finite and >= 0".into()));
        }
        let mut normalized = Vec::with_capacity(links.len());
        for (index, link) in links.into_iter().enumerate() {
            let m2 = link.second_moment();
            if !(m2 > 0.0) {
                return Err(LabError::InvalidLink { index, reason: "identically zero".into() });
            }
            if link.coeff(0).abs() > 1e-12 * m2.sqrt() {
                return Err(LabError::InvalidLink {
                    index,
                    reason: format!("nonzero constant term {}", link.coeff(0)),
                });
            }
            let mut coeffs = link.coeffs().to_vec();
            coeffs[0] = 0.0;
            let link = HermiteSeries::new(coeffs);
            let scale = 1.0 / link.second_moment().sqrt();
            normalized.push(link.scaled(scale));
        }
        let exponents: Vec<usize> =
            normalized.iter().map(|l| l.information_exponent(DEFAULT_IE_TOL)).collect::<Result<_>>()?;
        if !allow_mixed && exponents.windows(2).any(|w| w[0] != w[1]) {
            return Err(LabError::MixedInformationExponent { found: exponents });
        }
        Ok(AdditiveTarget { dirs, links: normalized, noise_std, amplitude: 1.0 })
    }

    /// Rescales every link to second moment `amplitude^2`, e.g. `sqrt(6)`
    /// to use `He_3` itself rather than `He_3 / sqrt(6)`.
    pub fn with_amplitude(mut self, amplitude: f64) -> Result<Self> {
        if !(amplitude > 0.0) || !amplitude.is_finite() {
            return Err(LabError::InvalidArgument("amplitude must be finite and > 0".into()));
        }
        let factor = amplitude / self.amplitude;
        self.links = self.links.iter().map(|l| l.scaled(factor)).collect();
        self.amplitude = amplitude;
        Ok(self)
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn dirs(&self) -> &DirectionSet {
        &self.dirs
    }

    pub fn links(&self) -> &[HermiteSeries] {
        &self.links
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn dim(&self) -> usize {
        self.dirs.dim()
    }

    pub fn num_tasks(&self) -> usize {
        self.dirs.len()
    }

    /// Information exponent of the first link (shared by all, unless mixed).
    pub fn information_exponent(&self) -> usize {
        self.links[0].information_exponent(DEFAULT_IE_TOL).expect("links are validated on construction")
    }

    /// Largest link degree.
    pub fn degree(&self) -> usize {
        self.links.iter().map(HermiteSeries::degree).max().unwrap_or(0)
    }

    /// Noiseless `f(x)`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.eval_without(x, None)
    }

    /// Noiseless `f(x)` with task `skip` removed, keeping the `M^{-1/2}` scale.
    pub fn eval_without(&self, x: &[f64], skip: Option<usize>) -> f64 {
        let scale = 1.0 / (self.num_tasks() as f64).sqrt();
        let sum: f64 = self
            .dirs
            .rows()
            .zip(&self.links)
            .enumerate()
            .filter(|(m, _)| Some(*m) != skip)
            .map(|(_, (v, f))| f.eval(dot(v, x)))
            .sum();
        scale * sum
    }

    /// Endless stream of fresh labeled samples.
    pub fn stream(&self, seed: u64) -> SampleStream<'_> {
        SampleStream { target: self, rng: rng::seeded(seed) }
    }

    /// Like [`AdditiveTarget::stream`] but on a derived sub-stream of `seed`.
    pub fn stream_derived(&self, seed: u64, stream: u64) -> SampleStream<'_> {
        SampleStream { target: self, rng: rng::derived(seed, stream) }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&TargetFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: TargetFile = serde_json::from_str(s)?;
        file.into_target()
    }
}

/// JSON layout of an [`AdditiveTarget`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetFile {
    pub d: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub noise_std: f64,
    #[serde(default = "unit_amplitude")]
    pub amplitude: f64,
    pub mode: DirectionMode,
    /// Row-major `M x d`.
    pub directions: Vec<f64>,
    pub links: Vec<HermiteSeries>,
}

impl From<&AdditiveTarget> for TargetFile {
    fn from(t: &AdditiveTarget) -> Self {
        TargetFile {
            d: t.dim(),
            m: t.num_tasks(),
            noise_std: t.noise_std,
            amplitude: t.amplitude,
            mode: t.dirs.mode(),
            directions: t.dirs.as_flat().to_vec(),
            links: t.links.clone(),
        }
    }
}

impl TargetFile {
    pub fn into_target(self) -> Result<AdditiveTarget> {
        if self.d == 0 || self.directions.len() != self.d * self.m {
            return Err(LabError::Format(format!(
                "directions has {} entries, expected M*d = {}",
                self.directions.len(),
                self.d * self.m
            )));
        }
        let rows: Vec<Vec<f64>> = self.directions.chunks_exact(self.d).map(<[f64]>::to_vec).collect();
        let dirs = DirectionSet::from_rows(&rows, self.mode)?;
        AdditiveTarget::new_allow_mixed(dirs, self.links, self.noise_std)?.with_amplitude(self.amplitude)
    }
}

fn unit_amplitude() -> f64 {
    1.0
}

/// Online source of `(x, y)` pairs; inputs are `N(0, I_d)`.
pub struct SampleStream<'a> {
    target: &'a AdditiveTarget,
    rng: LabRng,
}

impl SampleStream<'_> {
    /// Fills `x` with a fresh input and returns its noisy label.
    pub fn next_into(&mut self, x: &mut [f64]) -> f64 {
        rng::fill_normal(&mut self.rng, x);
        let noise = rng::normal(&mut self.rng);
        self.target.eval(x) + self.target.noise_std * noise
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub d: usize,
    /// Row-major `n x d`.
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub seed: u64,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.d..(i + 1) * self.d]
    }

    /// Splits into the first `n_first` rows and the rest.
    pub fn split(&self, n_first: usize) -> (SampleBatch, SampleBatch) {
        let n_first = n_first.min(self.len());
        let cut = n_first * self.d;
        (
            SampleBatch { d: self.d, xs: self.xs[..cut].to_vec(), ys: self.ys[..n_first].to_vec(), seed: self.seed },
            SampleBatch { d: self.d, xs: self.xs[cut..].to_vec(), ys: self.ys[n_first..].to_vec(), seed: self.seed },
        )
    }

    /// CSV with header `x_0,...,x_{d-1},y`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let header: Vec<String> = (0..self.d).map(|i| format!("x_{i}")).chain(["y".to_string()]).collect();
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "{}", header.join(","))?;
            for i in 0..self.len() {
                for v in self.x(i) {
                    write!(w, "{v},")?;
                }
                writeln!(w, "{}", self.ys[i])?;
            }
            w.flush()
        };
        write().map_err(|e| LabError::io(path, e))
    }
}

pub fn sample_batch(target: &AdditiveTarget, n: usize, seed: u64) -> Result<SampleBatch> {
    if n == 0 {
        return Err(LabError::InvalidArgument("sample count must be at least 1".into()));
    }
    let d = target.dim();
    let mut stream = target.stream(seed);
    let mut xs = vec![0.0; n * d];
    let mut ys = Vec::with_capacity(n);
    for row in xs.chunks_exact_mut(d) {
        ys.push(stream.next_into(row));
    }
    Ok(SampleBatch { d, xs, ys, seed })
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn from_sums(sum: f64, sum_sq: f64, n: usize) -> Self {
        let nf = n as f64;
        let mean = sum / nf;
        let var = (sum_sq / nf - mean * mean).max(0.0);
        Estimate { value: mean, std_error: (var / nf).sqrt() }
    }

    pub fn within_sigmas(&self, truth: f64, k: f64) -> bool {
        (self.value - truth).abs() <= k * self.std_error
    }
}

/// Monte Carlo estimate of `E[f(x)^2]` for the noiseless target.
pub fn second_moment_estimate(target: &AdditiveTarget, n: usize, seed: u64) -> Result<Estimate> {
    if n == 0 {
        return Err(LabError::InvalidArgument("sample count must be at least 1".into()));
    }
    let mut rng = rng::seeded(seed);
    let mut x = vec![0.0; target.dim()];
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        rng::fill_normal(&mut rng, &mut x);
        let f2 = target.eval(&x).powi(2);
        s += f2;
        s2 += f2 * f2;
    }
    Ok(Estimate::from_sums(s, s2, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermite::he_eval;
    use approx::assert_abs_diff_eq;

    fn he3_unit() -> HermiteSeries {
        HermiteSeries::normalized_basis(3)
    }

    #[test]
    fn canonical_directions() {
        let dirs = gen_directions(64, 16, DirectionMode::Canonical, 0).unwrap();
        assert_eq!(dirs.len(), 16);
        assert_eq!(dirs.max_overlap(), 0.0);
        for m in 0..16 {
            for i in 0..64 {
                assert_eq!(dirs.row(m)[i], if i == m { 1.0 } else { 0.0 });
            }
        }
        assert!(matches!(
            gen_directions(4, 5, DirectionMode::Canonical, 0),
            Err(LabError::TooManyDirections { m: 5, d: 4 })
        ));
    }

    #[test]
    fn single_sphere_direction() {
        let dirs = gen_directions(10, 1, DirectionMode::Sphere, 3).unwrap();
        assert_eq!(dirs.max_overlap(), 0.0);
        assert_abs_diff_eq!(norm(dirs.row(0)), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn hypercube_respects_bound() {
        let dirs = gen_directions(256, 64, DirectionMode::Hypercube, 5).unwrap();
        let bound = hypercube_overlap_bound(256, 64);
        assert_abs_diff_eq!(bound, 0.180, epsilon = 5e-4);
        assert!(dirs.max_overlap() <= bound);
        assert_eq!(dirs.max_overlap(), dirs.recompute_max_overlap());
        for r in dirs.rows() {
            assert_abs_diff_eq!(norm(r), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn hypercube_unreachable_reports() {
        // odd d never yields an exactly orthogonal pair
        let mut rng = rng::seeded(0);
        assert!(matches!(
            hypercube_rows(3, 2, 0.0, &mut rng),
            Err(LabError::OverlapUnreachable { retries: HYPERCUBE_RETRY_CAP, .. })
        ));
    }

    #[test]
    fn diversity_examples() {
        let dirs = gen_directions(64, 16, DirectionMode::Canonical, 0).unwrap();
        let rep = diversity_check(&dirs, 1.0).unwrap();
        assert!(rep.ok && rep.bound.is_infinite());
        let b = diversity_bound(64, 0.5, 1.0);
        assert_eq!(b, 8.0);
        assert!(100.0 > b);
        let b = diversity_bound(64, 0.2, 1.0);
        assert_abs_diff_eq!(b, 8.0, epsilon = 1e-12);
        assert!(8.0 <= b);
        assert!(diversity_check(&dirs, 0.0).is_err());
    }

    #[test]
    fn orthonormalize_identity_on_orthogonal() {
        let dirs = gen_directions(5, 3, DirectionMode::Canonical, 0).unwrap();
        let o = orthonormalize(&dirs).unwrap();
        assert_eq!(o.basis, dirs.as_flat());
        for i in 0..3 {
            for k in 0..3 {
                assert_eq!(o.coeff(i, k), if i == k { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn orthonormalize_two_vectors() {
        let t = 0.1f64;
        let v1 = vec![1.0, 0.0, 0.0];
        let v2 = vec![t, (1.0 - t * t).sqrt(), 0.0];
        let dirs = DirectionSet::from_rows(&[v1.clone(), v2.clone()], DirectionMode::Sphere).unwrap();
        let o = orthonormalize(&dirs).unwrap();
        // hand Gram–Schmidt: (v2 - 0.1 v1) / sqrt(1 - 0.01)
        let n = (1.0 - t * t).sqrt();
        for i in 0..3 {
            assert_abs_diff_eq!(o.basis_row(1)[i], (v2[i] - t * v1[i]) / n, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(o.coeff(1, 0), -t / n, epsilon = 1e-14);
        assert_abs_diff_eq!(o.coeff(1, 1), 1.0 / n, epsilon = 1e-14);
    }

    #[test]
    fn orthonormalize_rejects_large_overlap() {
        let dirs = DirectionSet::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]], DirectionMode::Sphere).unwrap();
        assert!(matches!(orthonormalize(&dirs), Err(LabError::PreconditionViolated(_))));
    }

    #[test]
    fn target_rejects_bad_links() {
        let dirs = gen_directions(4, 2, DirectionMode::Canonical, 0).unwrap();
        let with_const = HermiteSeries::new(vec![1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(AdditiveTarget::uniform(dirs.clone(), with_const, 0.0), Err(LabError::InvalidLink { .. })));
        let mixed = vec![HermiteSeries::basis(3), HermiteSeries::basis(4)];
        assert!(matches!(
            AdditiveTarget::new(dirs.clone(), mixed.clone(), 0.0),
            Err(LabError::MixedInformationExponent { .. })
        ));
        assert!(AdditiveTarget::new_allow_mixed(dirs, mixed, 0.0).is_ok());
    }

    #[test]
    fn target_links_are_normalized() {
        let dirs = gen_directions(4, 2, DirectionMode::Canonical, 0).unwrap();
        let t = AdditiveTarget::uniform(dirs, HermiteSeries::new(vec![0.0, 0.0, 0.0, 5.0, 1.0]), 0.0).unwrap();
        for l in t.links() {
            assert_abs_diff_eq!(l.second_moment(), 1.0, epsilon = 1e-12);
            assert_eq!(l.coeff(0), 0.0);
        }
        assert_eq!(t.information_exponent(), 3);
        assert_eq!(t.degree(), 4);
    }

    #[test]
    fn target_eval_examples() {
        let dirs = gen_directions(3, 1, DirectionMode::Canonical, 0).unwrap();
        let t = AdditiveTarget::uniform(dirs, HermiteSeries::normalized_basis(2), 0.0).unwrap();
        assert_abs_diff_eq!(t.eval(&[1.0, 0.0, 0.0]), 0.0, epsilon = 1e-15);

        let dirs = gen_directions(6, 4, DirectionMode::Canonical, 0).unwrap();
        let t = AdditiveTarget::uniform(dirs, he3_unit(), 0.0).unwrap();
        let x = [1.0, 1.0, 1.0, 1.0, 0.3, -2.0];
        // (4 / sqrt 4) * (1 - 3) / sqrt 6
        assert_abs_diff_eq!(t.eval(&x), -4.0 / 6f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(t.eval(&x), -1.633, epsilon = 1e-3);
        assert_eq!(t.eval(&[0.0, 0.0, 0.0, 0.0, 5.0, 1.0]), 0.0);
    }

    #[test]
    fn canonical_target_decomposes() {
        let dirs = gen_directions(5, 3, DirectionMode::Canonical, 0).unwrap();
        let links = vec![
            HermiteSeries::new(vec![0.0, 0.0, 0.0, 1.0]),
            HermiteSeries::new(vec![0.0, 0.0, 0.0, 2.0, 1.0]),
            HermiteSeries::new(vec![0.0, 0.0, 0.0, -1.0]),
        ];
        let t = AdditiveTarget::new(dirs, links, 0.0).unwrap();
        let x = [0.4, -1.2, 2.2, 9.0, 9.0];
        let want = (0..3).map(|m| t.links()[m].eval(x[m])).sum::<f64>() / 3f64.sqrt();
        assert_abs_diff_eq!(t.eval(&x), want, epsilon = 1e-14);
    }

    #[test]
    fn linear_single_index_labels() {
        let dirs = gen_directions(3, 1, DirectionMode::Canonical, 0).unwrap();
        let t = AdditiveTarget::uniform(dirs, HermiteSeries::basis(1), 0.0).unwrap();
        let b = sample_batch(&t, 50, 9).unwrap();
        for i in 0..50 {
            assert_eq!(b.ys[i], b.x(i)[0]);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let dirs = gen_directions(8, 2, DirectionMode::Sphere, 1).unwrap();
        let dirs2 = gen_directions(8, 2, DirectionMode::Sphere, 1).unwrap();
        assert_eq!(dirs, dirs2);
        let t = AdditiveTarget::uniform(dirs, he3_unit(), 0.2).unwrap();
        let a = sample_batch(&t, 100, 4).unwrap();
        let b = sample_batch(&t, 100, 4).unwrap();
        assert_eq!(a, b);
        assert!(sample_batch(&t, 0, 4).is_err());
    }

    #[test]
    fn target_json_round_trip() {
        let dirs = gen_directions(6, 3, DirectionMode::Hypercube, 2).unwrap();
        let t = AdditiveTarget::uniform(dirs, he3_unit(), 0.25).unwrap();
        let json = t.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["d", "M", "noise_std", "mode", "directions", "links"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["mode"], "hypercube");
        let back = AdditiveTarget::from_json(&json).unwrap();
        assert_eq!(back.dirs().as_flat(), t.dirs().as_flat());
        assert_eq!(back.links(), t.links());
    }

    #[test]
    fn amplitude_scales_links_and_survives_json() {
        let dirs = gen_directions(4, 2, DirectionMode::Canonical, 0).unwrap();
        let t = AdditiveTarget::uniform(dirs, he3_unit(), 0.0).unwrap().with_amplitude(6f64.sqrt()).unwrap();
        // He_3 itself
        assert!((t.links()[0].coeff(3) - 1.0).abs() < 1e-14);
        let x = [0.7, -1.2, 0.3, 2.0];
        let want = (he_eval(3, 0.7) + he_eval(3, -1.2)) / 2f64.sqrt();
        assert!((t.eval(&x) - want).abs() < 1e-12);
        let back = AdditiveTarget::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back.amplitude(), t.amplitude());
        assert!((back.eval(&x) - want).abs() < 1e-12);
        assert!(t.clone().with_amplitude(0.0).is_err());
    }

    #[test]
    fn batch_csv_header() {
        let dirs = gen_directions(3, 1, DirectionMode::Canonical, 0).unwrap();
        let t = AdditiveTarget::uniform(dirs, he3_unit(), 0.0).unwrap();
        let b = sample_batch(&t, 4, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.csv");
        b.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "x_0,x_1,x_2,y");
        let first: Vec<f64> = lines.next().unwrap().split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(&first[..3], b.x(0));
        assert_eq!(first[3], b.ys[0]);
    }
}
