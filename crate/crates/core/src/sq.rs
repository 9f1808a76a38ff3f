//! Statistical-query oracles, hard function classes and the correlation
//! bounds they rely on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::hermite::{factorial, HermiteSeries};
use crate::model::{dot, gen_directions, AdditiveTarget, DirectionMode, DirectionSet};
use crate::rng;

/// Monte Carlo sample count for free-form queries.
pub const DEFAULT_MC_SAMPLES: usize = 1_000_000;
/// Free-form CSQ queries must satisfy `|E g^2 - 1| <=` this.
pub const NORMALIZATION_TOL: f64 = 1e-2;

const NOISE_STREAM: u64 = 99;
const SAMPLE_STREAM: u64 = 98;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseMode {
    None,
    /// Moves the answer by at most `tau` toward the value the target would
    /// give with task `task` removed.
    AdversarialHide {
        task: usize,
    },
    /// `clamp(N(0, sigma^2), -tau, tau)`.
    ClippedGaussian {
        sigma: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub tau: f64,
    pub noise_mode: NoiseMode,
    pub query_budget: u64,
    query_count: u64,
    pub mc_samples: usize,
}

impl OracleConfig {
    pub fn new(tau: f64, noise_mode: NoiseMode, query_budget: u64) -> Result<Self> {
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(LabError::InvalidArgument("tau must be finite and >= 0".into()));
        }
        if let NoiseMode::ClippedGaussian { sigma } = noise_mode {
            if !(sigma >= 0.0) {
                return Err(LabError::InvalidArgument("noise sigma must be >= 0".into()));
            }
        }
        Ok(OracleConfig { tau, noise_mode, query_budget, query_count: 0, mc_samples: DEFAULT_MC_SAMPLES })
    }

    pub fn with_mc_samples(mut self, n: usize) -> Self {
        self.mc_samples = n.max(2);
        self
    }

    pub fn query_count(&self) -> u64 {
        self.query_count
    }

    pub fn remaining(&self) -> u64 {
        self.query_budget - self.query_count
    }

    fn ensure_budget(&self) -> Result<()> {
        if self.query_count >= self.query_budget {
            return Err(LabError::BudgetExhausted { budget: self.query_budget });
        }
        Ok(())
    }

    /// Applies the configured noise to the true answer `value`.
    /// `hidden` is the answer with the configured task removed.
    fn perturb(&self, value: f64, hidden: Option<f64>, seed: u64) -> f64 {
        match self.noise_mode {
            NoiseMode::None => 0.0,
            NoiseMode::ClippedGaussian { sigma } => {
                let mut r = rng::derived(seed, NOISE_STREAM);
                clipped_gaussian(&mut r, sigma, self.tau)
            }
            NoiseMode::AdversarialHide { .. } => {
                let h = hidden.expect("hidden answer computed for hide mode");
                (h - value).clamp(-self.tau, self.tau)
            }
        }
    }

    fn hidden_task(&self) -> Option<usize> {
        match self.noise_mode {
            NoiseMode::AdversarialHide { task } => Some(task),
            _ => None,
        }
    }
}

pub fn clipped_gaussian(rng: &mut impl Rng, sigma: f64, tau: f64) -> f64 {
    (sigma * rng::normal(rng)).clamp(-tau, tau)
}

/// Sum of ridge functions `sum_t g_t(<u_t, x>)` with unit directions; inner
/// products between such sums are exact in coefficient space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeSum {
    terms: Vec<(HermiteSeries, Vec<f64>)>,
}

impl RidgeSum {
    pub fn new(terms: Vec<(HermiteSeries, Vec<f64>)>) -> Result<Self> {
        let Some(d) = terms.first().map(|t| t.1.len()) else {
            return Err(LabError::InvalidArgument("ridge sum needs at least one term".into()));
        };
        for (_, u) in &terms {
            if u.len() != d || (dot(u, u) - 1.0).abs() > 1e-9 {
                return Err(LabError::InvalidArgument(
                    "ridge directions must be unit vectors of a common dimension".into(),
                ));
            }
        }
        Ok(RidgeSum { terms })
    }

    pub fn single(series: HermiteSeries, direction: Vec<f64>) -> Result<Self> {
        RidgeSum::new(vec![(series, direction)])
    }

    /// The target's noiseless regression function, optionally without one task.
    pub fn from_target(target: &AdditiveTarget, skip: Option<usize>) -> Self {
        let scale = 1.0 / (target.num_tasks() as f64).sqrt();
        let terms = target
            .links()
            .iter()
            .zip(target.dirs().rows())
            .enumerate()
            .filter(|(m, _)| Some(*m) != skip)
            .map(|(_, (f, v))| (f.scaled(scale), v.to_vec()))
            .collect();
        RidgeSum { terms }
    }

    pub fn dim(&self) -> usize {
        self.terms[0].1.len()
    }

    pub fn terms(&self) -> &[(HermiteSeries, Vec<f64>)] {
        &self.terms
    }

    pub fn scaled(&self, factor: f64) -> Self {
        RidgeSum { terms: self.terms.iter().map(|(f, u)| (f.scaled(factor), u.clone())).collect() }
    }

    pub fn plus(&self, other: &RidgeSum) -> Self {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        RidgeSum { terms }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(f, u)| f.eval(dot(u, x))).sum()
    }

    /// `E[g(x) h(x)] = sum_{s,t} sum_k k! g_{s,k} h_{t,k} <u_s, u_t>^k`.
    pub fn inner(&self, other: &RidgeSum) -> f64 {
        let mut total = 0.0;
        for (f, u) in &self.terms {
            for (g, v) in &other.terms {
                let rho = dot(u, v);
                let kmax = f.degree().min(g.degree());
                let mut pw = 1.0;
                let mut kf = 1.0;
                for k in 0..=kmax {
                    if k > 0 {
                        pw *= rho;
                        kf *= k as f64;
                    }
                    total += kf * f.coeff(k) * g.coeff(k) * pw;
                }
            }
        }
        total
    }

    pub fn second_moment(&self) -> f64 {
        self.inner(self)
    }

    /// Rescaled to unit second moment.
    pub fn normalized(&self) -> Result<Self> {
        let m2 = self.second_moment();
        if !(m2 > 0.0) {
            return Err(LabError::QueryNotNormalized { second_moment: m2 });
        }
        Ok(self.scaled(1.0 / m2.sqrt()))
    }
}

/// A correlational query: either a declared ridge sum (answered exactly) or
/// an arbitrary function of `x` (answered by Monte Carlo).
pub enum CsqQuery<'a> {
    Series(&'a RidgeSum),
    Function(&'a (dyn Fn(&[f64]) -> f64 + Sync)),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleAnswer {
    pub value: f64,
    /// Noise added by the oracle, `|noise| <= tau`.
    pub noise: f64,
    /// Standard error of the oracle's own estimator (0 in series mode).
    pub std_error: f64,
    pub exact: bool,
}

impl OracleAnswer {
    pub fn clean(&self) -> f64 {
        self.value - self.noise
    }
}

/// Answers `E[y g(x)]` up to the configured noise.
pub fn csq_query(
    target: &AdditiveTarget,
    query: &CsqQuery<'_>,
    cfg: &mut OracleConfig,
    seed: u64,
) -> Result<OracleAnswer> {
    cfg.ensure_budget()?;
    let hide = cfg.hidden_task();
    if let Some(task) = hide {
        if task >= target.num_tasks() {
            return Err(LabError::InvalidArgument(format!("hidden task {task} out of range")));
        }
    }
    let (value, hidden, std_error, exact) = match query {
        CsqQuery::Series(g) => {
            if g.dim() != target.dim() {
                return Err(LabError::InvalidArgument("query dimension mismatch".into()));
            }
            let m2 = g.second_moment();
            if (m2 - 1.0).abs() > NORMALIZATION_TOL {
                return Err(LabError::QueryNotNormalized { second_moment: m2 });
            }
            let value = RidgeSum::from_target(target, None).inner(g);
            let hidden = hide.map(|t| RidgeSum::from_target(target, Some(t)).inner(g));
            (value, hidden, 0.0, true)
        }
        CsqQuery::Function(g) => {
            let n = cfg.mc_samples;
            let mut stream = target.stream_derived(seed, SAMPLE_STREAM);
            let mut x = vec![0.0; target.dim()];
            let (mut s, mut s2, mut g2, mut sh) = (0.0, 0.0, 0.0, 0.0);
            for _ in 0..n {
                let y = stream.next_into(&mut x);
                let gx = g(&x);
                let v = y * gx;
                s += v;
                s2 += v * v;
                g2 += gx * gx;
                if let Some(t) = hide {
                    let yh = y - target.eval(&x) + target.eval_without(&x, Some(t));
                    sh += yh * gx;
                }
            }
            let nf = n as f64;
            let m2 = g2 / nf;
            if (m2 - 1.0).abs() > NORMALIZATION_TOL {
                return Err(LabError::QueryNotNormalized { second_moment: m2 });
            }
            let est = crate::model::Estimate::from_sums(s, s2, n);
            (est.value, hide.map(|_| sh / nf), est.std_error, false)
        }
    };
    let noise = cfg.perturb(value, hidden, seed);
    cfg.query_count += 1;
    Ok(OracleAnswer { value: value + noise, noise, std_error, exact })
}

/// Answers `E[g(x, y)]` for `g` clipped to `[-1, 1]`, by Monte Carlo.
pub fn sq_query(
    target: &AdditiveTarget,
    g: &(dyn Fn(&[f64], f64) -> f64 + Sync),
    cfg: &mut OracleConfig,
    seed: u64,
) -> Result<OracleAnswer> {
    cfg.ensure_budget()?;
    let hide = cfg.hidden_task();
    if let Some(task) = hide {
        if task >= target.num_tasks() {
            return Err(LabError::InvalidArgument(format!("hidden task {task} out of range")));
        }
    }
    let n = cfg.mc_samples;
    let mut stream = target.stream_derived(seed, SAMPLE_STREAM);
    let mut x = vec![0.0; target.dim()];
    let (mut s, mut s2, mut sh) = (0.0, 0.0, 0.0);
    for _ in 0..n {
        let y = stream.next_into(&mut x);
        let v = g(&x, y).clamp(-1.0, 1.0);
        s += v;
        s2 += v * v;
        if let Some(t) = hide {
            let yh = y - target.eval(&x) + target.eval_without(&x, Some(t));
            sh += g(&x, yh).clamp(-1.0, 1.0);
        }
    }
    let est = crate::model::Estimate::from_sums(s, s2, n);
    let hidden = hide.map(|_| sh / n as f64);
    let noise = cfg.perturb(est.value, hidden, seed);
    cfg.query_count += 1;
    Ok(OracleAnswer { value: est.value + noise, noise, std_error: est.std_error, exact: false })
}

/// The family `x -> He_p(<v, x>) / sqrt(p!)` over near-orthogonal hypercube
/// directions.
#[derive(Debug, Clone, PartialEq)]
pub struct HardClass {
    pub p: usize,
    pub dirs: DirectionSet,
}

pub fn build_hard_class(d: usize, a: usize, p: usize, seed: u64) -> Result<HardClass> {
    if a < 2 {
        return Err(LabError::InvalidArgument("hard class needs A >= 2".into()));
    }
    if p == 0 {
        return Err(LabError::InvalidArgument("hard class needs p >= 1".into()));
    }
    let dirs = gen_directions(d, a, DirectionMode::Hypercube, seed)?;
    Ok(HardClass { p, dirs })
}

impl HardClass {
    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn link(&self) -> HermiteSeries {
        HermiteSeries::normalized_basis(self.p)
    }

    pub fn member(&self, i: usize) -> RidgeSum {
        RidgeSum { terms: vec![(self.link(), self.dirs.row(i).to_vec())] }
    }

    /// `E[f_i f_k] = <v_i, v_k>^p`.
    pub fn correlation(&self, i: usize, k: usize) -> f64 {
        dot(self.dirs.row(i), self.dirs.row(k)).powi(self.p as i32)
    }

    /// `max_{i != k} |E[f_i f_k]|`.
    pub fn coherence(&self) -> f64 {
        self.dirs.max_overlap().powi(self.p as i32)
    }

    pub fn correlations_with(&self, g: &RidgeSum) -> Vec<f64> {
        // only the degree-p part of g can correlate with a member
        let scale = factorial(self.p).sqrt();
        self.dirs
            .rows()
            .map(|v| g.terms.iter().map(|(f, u)| scale * f.coeff(self.p) * dot(u, v).powi(self.p as i32)).sum())
            .collect()
    }

    /// One member per link, unit noise-free target.
    pub fn to_target(&self) -> Result<AdditiveTarget> {
        AdditiveTarget::uniform(self.dirs.clone(), self.link(), 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusResult {
    pub count: usize,
    pub bound: f64,
    pub tau: f64,
    pub coherence: f64,
}

/// Number of class members with `|E[g f_i]| >= tau`; checked against
/// `2 / (tau^2 - eps)` with `eps` the class coherence.
pub fn correlation_census(g: &RidgeSum, cls: &HardClass, tau: f64) -> Result<CensusResult> {
    let m2 = g.second_moment();
    if (m2 - 1.0).abs() > 1e-6 {
        return Err(LabError::QueryNotNormalized { second_moment: m2 });
    }
    let eps = cls.coherence();
    let tau_sq = tau * tau;
    if tau_sq <= eps {
        return Err(LabError::TauBelowCoherence { tau_sq, coherence: eps });
    }
    let bound = 2.0 / (tau_sq - eps);
    let count = cls.correlations_with(g).iter().filter(|c| c.abs() >= tau).count();
    if count as f64 > bound {
        return Err(LabError::CensusBoundViolated { count, bound });
    }
    Ok(CensusResult { count, bound, tau, coherence: eps })
}

/// Random unit query mixing up to three class members with Hermite ridges
/// along random directions, for census sweeps.
pub fn random_unit_query(cls: &HardClass, seed: u64) -> Result<RidgeSum> {
    let mut r = rng::seeded(seed);
    let d = cls.dirs.dim();
    let mut terms = Vec::new();
    let k = r.random_range(1..=3usize);
    for _ in 0..k {
        let i = r.random_range(0..cls.len());
        terms.push((cls.link().scaled(rng::normal(&mut r)), cls.dirs.row(i).to_vec()));
    }
    for _ in 0..r.random_range(0..=2usize) {
        let deg = r.random_range(1..=cls.p + 1);
        terms.push((HermiteSeries::normalized_basis(deg).scaled(rng::normal(&mut r)), rng::unit_vector(&mut r, d)));
    }
    RidgeSum::new(terms)?.normalized()
}

/// Trajectory of `a^{t+1} = a^t + c (a^t)^{p-1}` and closed-form envelopes
/// `a0 / (1 - k (p-2) a0^{p-2} t)^{1/(p-2)}` for three rates `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BihariLasalle {
    pub a0: f64,
    pub c: f64,
    pub p: usize,
    /// `a^0, a^1, ...` while `a^t <= 1`, up to the requested horizon.
    pub sequence: Vec<f64>,
    /// Envelope with `k = c`, stated in the literature as a lower bound.
    pub stated_lower: Vec<Option<f64>>,
    /// Envelope with `k = c (1+c)^{p-1}` (Gronwall form).
    pub upper: Vec<Option<f64>>,
    /// Envelope with `k = c (1+c)^{-(p-1)}`, a valid lower bound while `a^t <= 1`.
    pub corrected_lower: Vec<Option<f64>>,
    /// Time at which the `k = c` envelope diverges.
    pub blowup_time: f64,
}

fn envelope(a0: f64, k: f64, p: usize, t: usize) -> Option<f64> {
    let e = (p - 2) as f64;
    let den = 1.0 - k * e * a0.powf(e) * t as f64;
    (den > 0.0).then(|| a0 / den.powf(1.0 / e))
}

pub fn bihari_lasalle_bounds(a0: f64, c: f64, p: usize, horizon: usize) -> Result<BihariLasalle> {
    if !(a0 > 0.0 && a0 < 1.0) || !(c >= 0.0) || p < 3 {
        return Err(LabError::InvalidArgument("need a0 in (0,1), c >= 0 and p >= 3".into()));
    }
    let mut sequence = vec![a0];
    let mut a = a0;
    for _ in 0..horizon {
        a += c * a.powi(p as i32 - 1);
        if a > 1.0 {
            break;
        }
        sequence.push(a);
    }
    let k_up = c * (1.0 + c).powi(p as i32 - 1);
    let k_low = c / (1.0 + c).powi(p as i32 - 1);
    let ts = 0..sequence.len();
    let stated_lower = ts.clone().map(|t| envelope(a0, c, p, t)).collect();
    let upper = ts.clone().map(|t| envelope(a0, k_up, p, t)).collect();
    let corrected_lower = ts.map(|t| envelope(a0, k_low, p, t)).collect();
    let blowup_time = 1.0 / (c * (p - 2) as f64 * a0.powi(p as i32 - 2));
    Ok(BihariLasalle { a0, c, p, sequence, stated_lower, upper, corrected_lower, blowup_time })
}

/// Relative slack allowed when comparing the recursion with an envelope.
pub const ENVELOPE_RTOL: f64 = 1e-12;

impl BihariLasalle {
    fn count(&self, env: &[Option<f64>], below: bool) -> usize {
        self.sequence
            .iter()
            .zip(env)
            .filter(|(s, e)| match e {
                Some(v) if below => *v > **s * (1.0 + ENVELOPE_RTOL),
                Some(v) => *v < **s * (1.0 - ENVELOPE_RTOL),
                None => false,
            })
            .count()
    }

    /// Steps where the stated lower envelope exceeds the recursion.
    pub fn stated_lower_violations(&self) -> usize {
        self.count(&self.stated_lower, true)
    }

    pub fn corrected_lower_violations(&self) -> usize {
        self.count(&self.corrected_lower, true)
    }

    pub fn upper_violations(&self) -> usize {
        self.count(&self.upper, false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichSweep {
    pub cases: usize,
    /// Cases with at least one violation of the stated lower envelope.
    pub stated_lower_cases: usize,
    pub stated_lower_steps: usize,
    pub upper_cases: usize,
    pub corrected_lower_cases: usize,
    /// First failing case, if any: `(a0, c, p, t)`.
    pub first_stated_violation: Option<(f64, f64, usize, usize)>,
}

/// Randomized sweep over `a0 in [0.01, 0.3]`, log-uniform `c in [1e-5, 1e-2]`,
/// `p in {3, 4, 5}`.
pub fn bihari_sweep(cases: usize, horizon: usize, seed: u64) -> Result<SandwichSweep> {
    let mut r = rng::seeded(seed);
    let mut out = SandwichSweep {
        cases,
        stated_lower_cases: 0,
        stated_lower_steps: 0,
        upper_cases: 0,
        corrected_lower_cases: 0,
        first_stated_violation: None,
    };
    for _ in 0..cases {
        let a0 = r.random_range(0.01..=0.3);
        let c = 10f64.powf(r.random_range(-5.0..=-2.0));
        let p = r.random_range(3..=5usize);
        let bl = bihari_lasalle_bounds(a0, c, p, horizon)?;
        let v = bl.stated_lower_violations();
        if v > 0 {
            out.stated_lower_cases += 1;
            out.stated_lower_steps += v;
            if out.first_stated_violation.is_none() {
                let t = bl
                    .sequence
                    .iter()
                    .zip(&bl.stated_lower)
                    .position(|(s, e)| e.is_some_and(|e| e > *s * (1.0 + ENVELOPE_RTOL)))
                    .expect("violation exists");
                out.first_stated_violation = Some((a0, c, p, t));
            }
        }
        out.upper_cases += (bl.upper_violations() > 0) as usize;
        out.corrected_lower_cases += (bl.corrected_lower_violations() > 0) as usize;
    }
    Ok(out)
}
