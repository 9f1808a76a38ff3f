//! Two-phase training: spherical online SGD on the correlation loss for the
//! first layer, then a regularized convex fit of the second layer. Also the
//! lazy baseline trained with plain SGD under `1/sqrt(J)` output scaling.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{alignment_matrix, config_hash, AlignmentTrace, TraceSink};
use crate::error::{LabError, Result};
use crate::model::{dot, AdditiveTarget, SampleBatch};
use crate::network::{init_network, uniform_biases, ActivationKind, BiasInit, NetworkState};
use crate::rng;

/// Sub-stream of the run seed that feeds Phase I samples.
pub const PHASE1_STREAM: u64 = 16;
/// Sub-stream used by [`interphase_randomize`].
pub const INTERPHASE_STREAM: u64 = 17;

/// Row-wise work is split across threads only above this many weights.
const PAR_MIN_WEIGHTS: usize = 1 << 15;
/// Normal equations are formed up to this width; conjugate gradient above.
pub const DIRECT_SOLVE_MAX_WIDTH: usize = 4096;
pub const LASSO_MAX_ITER: usize = 100_000;
const LASSO_REL_TOL: f64 = 1e-8;
const RIDGE_GRAD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepRule {
    Constant,
    /// `eta0` until `t_prime`, then `eta0 / (t / t_prime)^2`. `t_prime`
    /// defaults to half the run.
    Anneal {
        #[serde(default)]
        t_prime: Option<u64>,
    },
}

/// Factor applied to the per-neuron Phase I step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientScale {
    /// `w <- w + eta y a_j sigma'(.) (I - w w^T) x`.
    Unit,
    /// Same step multiplied by the network output scale, i.e. the exact
    /// gradient of the correlation loss `-y f(x)`.
    #[default]
    OutputScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    L1,
    L2,
}

impl Regularizer {
    pub fn from_order(r: u8) -> Result<Self> {
        match r {
            1 => Ok(Regularizer::L1),
            2 => Ok(Regularizer::L2),
            _ => Err(LabError::InvalidArgument(format!("regularizer order must be 1 or 2, got {r}"))),
        }
    }

    pub fn order(self) -> u8 {
        match self {
            Regularizer::L1 => 1,
            Regularizer::L2 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    #[serde(rename = "T1")]
    pub t1: u64,
    #[serde(rename = "T2")]
    pub t2: usize,
    pub step_rule: StepRule,
    pub eta0: f64,
    pub lambda_bar: f64,
    pub r: u8,
    pub snapshot_every: u64,
    #[serde(default)]
    pub gradient_scale: GradientScale,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.t1 == 0 || self.t2 == 0 {
            return Err(LabError::InvalidArgument("T1 and T2 must be at least 1".into()));
        }
        if !(self.eta0 >= 0.0) || !self.eta0.is_finite() {
            return Err(LabError::InvalidArgument("eta0 must be finite and >= 0".into()));
        }
        if !(self.lambda_bar >= 0.0) {
            return Err(LabError::InvalidArgument("lambda_bar must be >= 0".into()));
        }
        if self.snapshot_every == 0 {
            return Err(LabError::InvalidArgument("snapshot_every must be at least 1".into()));
        }
        Regularizer::from_order(self.r).map(|_| ())
    }

    /// Step size for step `t` in `1..=T1`.
    pub fn eta(&self, t: u64) -> f64 {
        match self.step_rule {
            StepRule::Constant => self.eta0,
            StepRule::Anneal { t_prime } => {
                let tp = t_prime.unwrap_or(self.t1 / 2).max(1);
                if t <= tp {
                    self.eta0
                } else {
                    let ratio = t as f64 / tp as f64;
                    self.eta0 / (ratio * ratio)
                }
            }
        }
    }
}

fn update_row(net: &NetworkState, j: usize, w: &mut [f64], x: &[f64], coef: f64) -> bool {
    let z0 = dot(w, x);
    let g = coef * net.a[j] * net.sigma_prime(j, z0 + net.b[j]);
    if g == 0.0 {
        return true;
    }
    let mut sq = 0.0;
    for (wi, &xi) in w.iter_mut().zip(x) {
        *wi += g * (xi - z0 * *wi);
        sq += *wi * *wi;
    }
    if !(sq.is_finite() && sq > 0.0) || !g.is_finite() {
        return false;
    }
    let inv = 1.0 / sq.sqrt();
    for wi in w.iter_mut() {
        *wi *= inv;
    }
    true
}

fn step_all(net: &mut NetworkState, x: &[f64], coef: f64, step: u64) -> Result<()> {
    let d = net.dim();
    let mut w = std::mem::take(&mut net.w);
    let ok = if w.len() >= PAR_MIN_WEIGHTS && rayon::current_num_threads() > 1 {
        let view = &*net;
        w.par_chunks_mut(d).enumerate().map(|(j, row)| update_row(view, j, row, x, coef)).reduce(|| true, |a, b| a && b)
    } else {
        let mut ok = true;
        for (j, row) in w.chunks_mut(d).enumerate() {
            ok &= update_row(net, j, row, x, coef);
        }
        ok
    };
    net.w = w;
    if ok {
        Ok(())
    } else {
        Err(LabError::NonFiniteUpdate { step })
    }
}

/// One spherical SGD step on every neuron:
/// `w <- normalize(w + eta y a_j sigma_j'(w.x + b_j) (I - w w^T) x)`.
pub fn phase1_step(net: &mut NetworkState, x: &[f64], y: f64, eta: f64) -> Result<()> {
    step_all(net, x, eta * y, 0)
}

#[derive(Debug, Clone)]
pub struct PhaseOutput {
    pub net: NetworkState,
    pub trace: AlignmentTrace,
}

fn snapshot(
    step: u64,
    net: &NetworkState,
    target: &AdditiveTarget,
    trace: &mut AlignmentTrace,
    sink: &mut Option<&mut dyn TraceSink>,
) -> Result<()> {
    let k = alignment_matrix(net, target.dirs());
    if let Some(s) = sink.as_deref_mut() {
        s.record(step, &k)?;
    }
    trace.record(step, &k)
}

/// Runs `T1` online steps, each on a fresh sample from the target.
pub fn run_phase1(
    mut net: NetworkState,
    target: &AdditiveTarget,
    schedule: &TrainSchedule,
    seed: u64,
    mut sink: Option<&mut dyn TraceSink>,
) -> Result<PhaseOutput> {
    schedule.validate()?;
    if net.dim() != target.dim() {
        return Err(LabError::InvalidArgument("network and target dimensions differ".into()));
    }
    let meta = config_hash(&format!("{}|{seed}", serde_json::to_string(schedule)?));
    let mut trace = AlignmentTrace::new(meta);
    let scale = match schedule.gradient_scale {
        GradientScale::Unit => 1.0,
        GradientScale::OutputScale => net.output_scale(),
    };
    let mut stream = target.stream_derived(seed, PHASE1_STREAM);
    let mut x = vec![0.0; target.dim()];
    snapshot(0, &net, target, &mut trace, &mut sink)?;
    for t in 1..=schedule.t1 {
        let y = stream.next_into(&mut x);
        let coef = schedule.eta(t) * y * scale;
        if coef != 0.0 {
            step_all(&mut net, &x, coef, t)?;
        } else if !coef.is_finite() {
            return Err(LabError::NonFiniteUpdate { step: t });
        }
        if t % schedule.snapshot_every == 0 || t == schedule.t1 {
            snapshot(t, &net, target, &mut trace, &mut sink)?;
        }
    }
    Ok(PhaseOutput { net, trace })
}

/// Resamples biases on `[-C_b, C_b]` and flips each first-layer row by an
/// independent uniform sign.
pub fn interphase_randomize(mut net: NetworkState, c_b: f64, seed: u64) -> Result<NetworkState> {
    if !(c_b >= 0.0) || !c_b.is_finite() {
        return Err(LabError::InvalidArgument("C_b must be finite and >= 0".into()));
    }
    let mut rng = rng::derived(seed, INTERPHASE_STREAM);
    let width = net.width();
    net.b = uniform_biases(&mut rng, width, c_b);
    let d = net.dim();
    for row in net.w.chunks_mut(d) {
        if rng::sign(&mut rng) < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
    }
    net.set_c_b(c_b);
    Ok(net)
}

/// Features `s * sigma_j(<w_j, x> + b_j)` of one input.
pub fn feature_row(net: &NetworkState, x: &[f64], out: &mut [f64]) {
    let s = net.output_scale();
    for (j, o) in out.iter_mut().enumerate() {
        *o = s * net.sigma(j, net.preactivation(j, x));
    }
}

/// Row-major `n x J` feature matrix.
pub fn feature_matrix(net: &NetworkState, xs: &[f64]) -> DMatrix<f64> {
    let d = net.dim();
    let n = xs.len() / d;
    let width = net.width();
    let mut rows = vec![0.0; n * width];
    let fill = |(x, out): (&[f64], &mut [f64])| feature_row(net, x, out);
    if n * width >= PAR_MIN_WEIGHTS && rayon::current_num_threads() > 1 {
        xs.par_chunks(d).zip(rows.par_chunks_mut(width)).for_each(fill);
    } else {
        xs.chunks(d).zip(rows.chunks_mut(width)).for_each(fill);
    }
    DMatrix::from_row_slice(n, width, &rows)
}

/// Sufficient statistics of the squared loss: `G = Phi^T Phi / n`,
/// `c = Phi^T y / n` and the mean of `y^2`.
#[derive(Debug, Clone)]
pub struct Design {
    pub gram: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub y_sq: f64,
    pub n: usize,
}

const DESIGN_CHUNK: usize = 2048;

impl Design {
    pub fn build(net: &NetworkState, batch: &SampleBatch) -> Design {
        let width = net.width();
        let n = batch.len();
        let mut gram = DMatrix::zeros(width, width);
        let mut rhs = DVector::zeros(width);
        let d = batch.d;
        for start in (0..n).step_by(DESIGN_CHUNK) {
            let end = (start + DESIGN_CHUNK).min(n);
            let phi = feature_matrix(net, &batch.xs[start * d..end * d]);
            let y = DVector::from_column_slice(&batch.ys[start..end]);
            gram.gemm_tr(1.0, &phi, &phi, 1.0);
            rhs.gemv_tr(1.0, &phi, &y, 1.0);
        }
        let nf = n as f64;
        gram /= nf;
        rhs /= nf;
        let y_sq = batch.ys.iter().map(|y| y * y).sum::<f64>() / nf;
        Design { gram, rhs, y_sq, n }
    }

    /// `(1/n)|Phi a - y|^2`.
    pub fn loss(&self, a: &DVector<f64>) -> f64 {
        let ga = &self.gram * a;
        (a.dot(&ga) - 2.0 * self.rhs.dot(a) + self.y_sq).max(0.0)
    }

    pub fn objective(&self, a: &DVector<f64>, reg: Regularizer, lambda: f64) -> f64 {
        self.loss(a) + lambda * penalty(a, reg)
    }

    /// Gradient of the smooth part, `2 (G a - c)`.
    fn smooth_grad(&self, a: &DVector<f64>) -> DVector<f64> {
        (&self.gram * a - &self.rhs) * 2.0
    }
}

fn penalty(a: &DVector<f64>, reg: Regularizer) -> f64 {
    match reg {
        Regularizer::L1 => a.iter().map(|v| v.abs()).sum(),
        Regularizer::L2 => a.norm_squared(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub method: String,
    pub iterations: usize,
    /// Gradient norm (ridge) or KKT residual (lasso) at the returned point.
    pub residual: f64,
    /// Objective at the start and after every iteration.
    pub objective_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub net: NetworkState,
    pub train_objective: f64,
    pub lambda_bar: f64,
    pub regularizer: Regularizer,
    pub report: SolverReport,
}

/// Minimizes `(1/T2) sum_t (f(x^t) - y^t)^2 + lambda |a|_r^r` over the second layer.
pub fn fit_second_layer(net: &NetworkState, batch: &SampleBatch, reg: Regularizer, lambda: f64) -> Result<FittedModel> {
    check_batch(net, batch, lambda)?;
    let (a, report) = if reg == Regularizer::L2 && net.width() > DIRECT_SOLVE_MAX_WIDTH {
        let phi = feature_matrix(net, &batch.xs);
        ridge_cg(&phi, &batch.ys, lambda)?
    } else {
        let design = Design::build(net, batch);
        solve_design(&design, reg, lambda)?
    };
    finish(net, a, reg, lambda, report)
}

fn check_batch(net: &NetworkState, batch: &SampleBatch, lambda: f64) -> Result<()> {
    if batch.is_empty() || batch.d != net.dim() {
        return Err(LabError::InvalidArgument("batch is empty or has the wrong dimension".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(LabError::InvalidArgument("lambda_bar must be finite and >= 0".into()));
    }
    Ok(())
}

fn finish(
    net: &NetworkState,
    a: DVector<f64>,
    reg: Regularizer,
    lambda: f64,
    report: SolverReport,
) -> Result<FittedModel> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(LabError::DidNotConverge { iterations: report.iterations, residual: f64::NAN });
    }
    let train_objective = *report.objective_history.last().expect("non-empty history");
    let mut fitted = net.clone();
    fitted.set_second_layer(a.iter().copied().collect())?;
    Ok(FittedModel { net: fitted, train_objective, lambda_bar: lambda, regularizer: reg, report })
}

pub fn solve_design(design: &Design, reg: Regularizer, lambda: f64) -> Result<(DVector<f64>, SolverReport)> {
    match reg {
        Regularizer::L2 => ridge_direct(design, lambda),
        Regularizer::L1 => lasso_mfista(design, lambda),
    }
}

fn ridge_direct(design: &Design, lambda: f64) -> Result<(DVector<f64>, SolverReport)> {
    let width = design.rhs.len();
    let mut sys = design.gram.clone();
    for i in 0..width {
        sys[(i, i)] += lambda;
    }
    let start = design.objective(&DVector::zeros(width), Regularizer::L2, lambda);
    let (mut a, method) = match sys.clone().cholesky() {
        Some(ch) => {
            let mut a = ch.solve(&design.rhs);
            // two rounds of iterative refinement
            for _ in 0..2 {
                let r = &design.rhs - &sys * &a;
                a += ch.solve(&r);
            }
            (a, "cholesky")
        }
        None => {
            let svd = sys.clone().svd(true, true);
            let eps = svd.singular_values.max() * width as f64 * f64::EPSILON;
            let a = svd.solve(&design.rhs, eps).map_err(|e| LabError::InvalidArgument(e.to_string()))?;
            (a, "svd")
        }
    };
    let mut residual = 2.0 * (&sys * &a - &design.rhs).norm();
    if !residual.is_finite() {
        a = DVector::zeros(width);
        residual = f64::NAN;
    }
    let end = design.objective(&a, Regularizer::L2, lambda);
    let report =
        SolverReport { method: method.into(), iterations: 1, residual, objective_history: vec![start, end.min(start)] };
    if !(residual <= RIDGE_GRAD_TOL.max(1e-6 * (1.0 + a.norm()))) {
        return Err(LabError::DidNotConverge { iterations: 1, residual });
    }
    Ok((a, report))
}

/// Conjugate gradient on `(Phi^T Phi / n + lambda I) a = Phi^T y / n`
/// without forming the Gram matrix.
fn ridge_cg(phi: &DMatrix<f64>, ys: &[f64], lambda: f64) -> Result<(DVector<f64>, SolverReport)> {
    let n = phi.nrows() as f64;
    let width = phi.ncols();
    let y = DVector::from_column_slice(ys);
    let apply = |v: &DVector<f64>| -> DVector<f64> { phi.tr_mul(&(phi * v)) / n + v * lambda };
    let objective = |a: &DVector<f64>| -> f64 {
        let r = phi * a - &y;
        r.norm_squared() / n + lambda * a.norm_squared()
    };
    let b = phi.tr_mul(&y) / n;
    let mut a = DVector::zeros(width);
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.norm_squared();
    let mut history = vec![objective(&a)];
    let max_iter = 10 * width;
    let mut it = 0;
    while 2.0 * rs.sqrt() > RIDGE_GRAD_TOL && it < max_iter {
        let ap = apply(&p);
        let alpha = rs / p.dot(&ap);
        a.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rs_new = r.norm_squared();
        p = &r + &p * (rs_new / rs);
        rs = rs_new;
        it += 1;
        history.push(objective(&a));
    }
    // recompute the true residual rather than trusting the recursion
    let residual = 2.0 * (apply(&a) - &b).norm();
    if !(residual <= 1e-6 * (1.0 + a.norm())) {
        return Err(LabError::DidNotConverge { iterations: it, residual });
    }
    Ok((a, SolverReport { method: "conjugate_gradient".into(), iterations: it, residual, objective_history: history }))
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
fn spectral_norm(g: &DMatrix<f64>) -> f64 {
    let n = g.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut est = 0.0;
    for _ in 0..500 {
        let gv = g * &v;
        let norm = gv.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = gv / norm;
        if (next - est).abs() <= 1e-10 * next {
            est = next;
            break;
        }
        est = next;
    }
    est
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// KKT residual of the lasso problem at `a`.
pub fn lasso_kkt(design: &Design, a: &DVector<f64>, lambda: f64) -> f64 {
    let g = design.smooth_grad(a);
    a.iter()
        .zip(g.iter())
        .map(|(&ai, &gi)| if ai != 0.0 { (gi + lambda * ai.signum()).abs() } else { (gi.abs() - lambda).max(0.0) })
        .fold(0.0, f64::max)
}

/// Monotone FISTA for `(1/n)|Phi a - y|^2 + lambda |a|_1`.
fn lasso_mfista(design: &Design, lambda: f64) -> Result<(DVector<f64>, SolverReport)> {
    let width = design.rhs.len();
    let obj = |a: &DVector<f64>| design.objective(a, Regularizer::L1, lambda);
    let mut x = DVector::zeros(width);
    let mut history = vec![obj(&x)];
    // every coordinate is inactive once lambda exceeds twice the largest correlation
    if lambda >= 2.0 * design.rhs.amax() {
        let residual = lasso_kkt(design, &x, lambda);
        return Ok((x, SolverReport { method: "mfista".into(), iterations: 0, residual, objective_history: history }));
    }
    // 1% headroom on the Lipschitz constant guards against a low estimate
    let lip = 2.0 * spectral_norm(&design.gram) * 1.01;
    let step = 1.0 / lip;
    let mut yk = x.clone();
    let mut t = 1.0f64;
    let mut f_x = history[0];
    let mut converged = false;
    let mut it = 0;
    while it < LASSO_MAX_ITER {
        it += 1;
        let grad = design.smooth_grad(&yk);
        let z = (&yk - grad * step).map(|v| soft_threshold(v, lambda * step));
        let f_z = obj(&z);
        let x_prev = x.clone();
        let accepted = f_z <= f_x;
        let f_prev = f_x;
        if accepted {
            x = z.clone();
            f_x = f_z;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        yk = &x + (&z - &x) * (t / t_next) + (&x - &x_prev) * ((t - 1.0) / t_next);
        t = t_next;
        history.push(f_x);
        let rel = (f_prev - f_x) / f_x.abs().max(f64::MIN_POSITIVE);
        if accepted && rel < LASSO_REL_TOL {
            converged = true;
            break;
        }
    }
    let residual = lasso_kkt(design, &x, lambda);
    if !converged {
        return Err(LabError::DidNotConverge { iterations: it, residual });
    }
    Ok((x, SolverReport { method: "mfista".into(), iterations: it, residual, objective_history: history }))
}

/// Default regularization grid: `10^k` for `k = -10..=0`. Features carry
/// the `1/J` output scale, so useful values sit far below `1e-4`.
pub fn default_lambda_grid() -> Vec<f64> {
    (-10..=0).map(|k| 10f64.powi(k)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub best: f64,
    /// `(lambda, held-out mean squared error)`; failed fits are skipped.
    pub scores: Vec<(f64, f64)>,
}

/// Chooses `lambda_bar` on a held-out split of `batch` (last `holdout` fraction).
pub fn select_lambda(
    net: &NetworkState,
    batch: &SampleBatch,
    reg: Regularizer,
    grid: &[f64],
    holdout: f64,
) -> Result<LambdaSelection> {
    if grid.is_empty() || !(holdout > 0.0 && holdout < 1.0) {
        return Err(LabError::InvalidArgument("need a non-empty grid and holdout in (0,1)".into()));
    }
    let n_fit = ((batch.len() as f64) * (1.0 - holdout)).round() as usize;
    if n_fit == 0 || n_fit >= batch.len() {
        return Err(LabError::InvalidArgument("batch too small to split".into()));
    }
    let (fit, held) = batch.split(n_fit);
    let design = Design::build(net, &fit);
    let phi_held = feature_matrix(net, &held.xs);
    let y_held = DVector::from_column_slice(&held.ys);
    let mut scores = Vec::new();
    for &lambda in grid {
        check_batch(net, &fit, lambda)?;
        let Ok((a, _)) = solve_design(&design, reg, lambda) else {
            continue;
        };
        let mse = (&phi_held * &a - &y_held).norm_squared() / held.len() as f64;
        if mse.is_finite() {
            scores.push((lambda, mse));
        }
    }
    let best = scores
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|s| s.0)
        .ok_or(LabError::DidNotConverge { iterations: grid.len(), residual: f64::NAN })?;
    Ok(LambdaSelection { best, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NtkConfig {
    #[serde(rename = "J")]
    pub width: usize,
    pub steps: u64,
    pub eta: f64,
    #[serde(rename = "C_b")]
    pub c_b: f64,
    pub snapshot_every: u64,
}

/// Lazy baseline: ReLU network with output scale `1/sqrt(J)`, both layers
/// trained by plain SGD on `(f(x) - y)^2 / 2`, biases fixed at their
/// `Unif([-C_b, C_b])` initialization. Samples come from the same stream as
/// [`run_phase1`] with the same seed.
pub fn run_ntk_baseline(
    cfg: &NtkConfig,
    target: &AdditiveTarget,
    seed: u64,
    mut sink: Option<&mut dyn TraceSink>,
) -> Result<PhaseOutput> {
    if cfg.snapshot_every == 0 || !(cfg.eta >= 0.0) || !cfg.eta.is_finite() {
        return Err(LabError::InvalidArgument("invalid lazy-baseline configuration".into()));
    }
    let d = target.dim();
    let width = cfg.width;
    let mut net = init_network(width, d, ActivationKind::Relu, cfg.c_b, BiasInit::Uniform, seed)?
        .with_output_scale(1.0 / (width as f64).sqrt());
    let meta = config_hash(&format!("{}|{seed}", serde_json::to_string(cfg)?));
    let mut trace = AlignmentTrace::new(meta);
    let mut stream = target.stream_derived(seed, PHASE1_STREAM);
    let mut x = vec![0.0; d];
    let mut pre = vec![0.0; width];
    let s = net.output_scale();
    snapshot(0, &net, target, &mut trace, &mut sink)?;
    for t in 1..=cfg.steps {
        let y = stream.next_into(&mut x);
        let mut f = 0.0;
        for (j, z) in pre.iter_mut().enumerate() {
            *z = net.preactivation(j, &x);
            f += net.a[j] * z.max(0.0);
        }
        let err = s * f - y;
        let coef = cfg.eta * err * s;
        if coef != 0.0 {
            for (j, &z) in pre.iter().enumerate() {
                if z > 0.0 {
                    let g = coef * net.a[j];
                    for (wi, &xi) in net.w[j * d..(j + 1) * d].iter_mut().zip(&x) {
                        *wi -= g * xi;
                    }
                    net.a[j] -= coef * z;
                }
            }
        }
        if !coef.is_finite() || net.a.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFiniteUpdate { step: t });
        }
        if t % cfg.snapshot_every == 0 || t == cfg.steps {
            snapshot(t, &net, target, &mut trace, &mut sink)?;
        }
    }
    Ok(PhaseOutput { net, trace })
}

/// `|W_T - W_0|_F / |W_0|_F`.
pub fn relative_movement(before: &NetworkState, after: &NetworkState) -> f64 {
    let num: f64 = before.weights().iter().zip(after.weights()).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = before.weights().iter().map(|a| a * a).sum();
    (num / den).sqrt()
}

/// Hidden constants of the step-count and step-size rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateConstants {
    pub c11: f64,
    pub c12: f64,
    pub c13: f64,
    pub c_eta: f64,
}

impl Default for RateConstants {
    fn default() -> Self {
        RateConstants { c11: 1.0, c12: 1.0, c13: 1.0, c_eta: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalSchedule {
    /// Escape from the equator: `c11 M d^{p-1}`.
    pub t11: u64,
    /// Weak to strong recovery: `c12 M d eps^{-2}`.
    pub t12: u64,
    /// Refinement: `c13 M^{5/2} eps^{-3}`.
    pub t13: u64,
    /// `c_eta / (sqrt(M) d^{p/2})`.
    pub eta: f64,
    pub schedule: TrainSchedule,
}

pub fn theoretical_schedule(d: usize, m: usize, p: usize, eps: f64, c: RateConstants) -> Result<TheoreticalSchedule> {
    if d == 0 || m == 0 || p == 0 || !(eps > 0.0) {
        return Err(LabError::InvalidArgument("d, M, p and eps must be positive".into()));
    }
    let (df, mf) = (d as f64, m as f64);
    let t11 = (c.c11 * mf * df.powi(p as i32 - 1)).round() as u64;
    let t12 = (c.c12 * mf * df / (eps * eps)).round() as u64;
    let t13 = (c.c13 * mf.powf(2.5) / eps.powi(3)).round() as u64;
    let eta = c.c_eta / (mf.sqrt() * df.powf(p as f64 / 2.0));
    let t1 = (t11 + t12 + t13).max(1);
    let schedule = TrainSchedule {
        t1,
        t2: (mf * df / (eps * eps)).round().max(1.0) as usize,
        step_rule: StepRule::Constant,
        eta0: eta,
        lambda_bar: 0.0,
        r: 2,
        snapshot_every: (t1 / 20).max(1),
        gradient_scale: GradientScale::Unit,
    };
    Ok(TheoreticalSchedule { t11, t12, t13, eta, schedule })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hermite::HermiteSeries;
    use crate::model::{gen_directions, sample_batch, DirectionMode};
    use crate::network::Activation;
    use approx::assert_abs_diff_eq;

    fn schedule(t1: u64, eta0: f64, rule: StepRule) -> TrainSchedule {
        TrainSchedule {
            t1,
            t2: 10,
            step_rule: rule,
            eta0,
            lambda_bar: 0.0,
            r: 2,
            snapshot_every: (t1 / 4).max(1),
            gradient_scale: GradientScale::OutputScale,
        }
    }

    fn he3_target(d: usize, m: usize) -> AdditiveTarget {
        let dirs = gen_directions(d, m, DirectionMode::Canonical, 0).unwrap();
        AdditiveTarget::uniform(dirs, HermiteSeries::basis(3), 0.0).unwrap()
    }

    fn relu1(w: Vec<f64>, a: f64, b: f64) -> NetworkState {
        NetworkState::from_parts(w.len(), vec![a], w, vec![b], Activation::Relu, 1.0).unwrap()
    }

    #[test]
    fn step_hand_example() {
        let mut net = relu1(vec![1.0, 0.0], 1.0, 0.0);
        phase1_step(&mut net, &[1.0, 1.0], 1.0, 0.1).unwrap();
        let n = (1.0f64 + 0.01).sqrt();
        assert_abs_diff_eq!(net.w_row(0)[0], 1.0 / n, epsilon = 1e-12);
        assert_abs_diff_eq!(net.w_row(0)[1], 0.1 / n, epsilon = 1e-12);
        assert_abs_diff_eq!(net.w_row(0)[0], 0.995, epsilon = 1e-3);
        assert_abs_diff_eq!(net.w_row(0)[1], 0.0995, epsilon = 1e-3);
    }

    #[test]
    fn step_trivial_cases() {
        let mut net = relu1(vec![0.6, 0.8], 1.0, 0.0);
        let before = net.clone();
        phase1_step(&mut net, &[1.2, 1.6], 1.0, 0.5).unwrap();
        for (a, b) in net.weights().iter().zip(before.weights()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        phase1_step(&mut net, &[3.0, -1.0], 0.0, 0.5).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn step_reports_non_finite() {
        let mut net = relu1(vec![1.0, 0.0], 1.0, 0.0);
        let err = phase1_step(&mut net, &[1.0, 1.0], f64::INFINITY, 0.1).unwrap_err();
        assert!(matches!(err, LabError::NonFiniteUpdate { .. }));
    }

    #[test]
    fn anneal_rule() {
        let s = schedule(100, 0.3, StepRule::Anneal { t_prime: None });
        assert_eq!(s.eta(1), 0.3);
        assert_eq!(s.eta(50), 0.3);
        assert_abs_diff_eq!(s.eta(100), 0.3 / 4.0, epsilon = 1e-15);
        assert_eq!(schedule(100, 0.3, StepRule::Constant).eta(99), 0.3);
    }

    #[test]
    fn zero_step_leaves_network_untouched() {
        let t = he3_target(8, 2);
        let net = init_network(16, 8, ActivationKind::Relu, 1.0, BiasInit::Uniform, 1).unwrap();
        let out = run_phase1(net.clone(), &t, &schedule(200, 0.0, StepRule::Constant), 3, None).unwrap();
        assert_eq!(out.net, net);
        assert_eq!(out.trace.times, vec![0, 50, 100, 150, 200]);
    }

    #[test]
    fn phase1_is_deterministic_and_norm_preserving() {
        let t = he3_target(8, 2);
        let net = init_network(32, 8, ActivationKind::Relu, 1.0, BiasInit::Uniform, 1).unwrap();
        let mut s = schedule(2000, 20.0, StepRule::Anneal { t_prime: None });
        s.gradient_scale = GradientScale::OutputScale;
        let a = run_phase1(net.clone(), &t, &s, 5, None).unwrap();
        let b = run_phase1(net, &t, &s, 5, None).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.net, b.net);
        for j in 0..32 {
            assert_abs_diff_eq!(a.net.row_norm(j), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn interphase_examples() {
        let net = init_network(4000, 3, ActivationKind::Relu, 1.0, BiasInit::Uniform, 2).unwrap();
        let out = interphase_randomize(net.clone(), 0.0, 9).unwrap();
        assert!(out.b().iter().all(|&b| b == 0.0));
        let mut flipped = 0;
        for j in 0..4000 {
            assert_eq!(out.row_norm(j), net.row_norm(j));
            let same = out.w_row(j) == net.w_row(j);
            let neg = out.w_row(j).iter().zip(net.w_row(j)).all(|(a, b)| *a == -*b);
            assert!(same ^ neg);
            flipped += neg as usize;
        }
        let frac = flipped as f64 / 4000.0;
        assert!((frac - 0.5).abs() <= 3.0 * 0.5 / 4000f64.sqrt(), "{frac}");
        let out = interphase_randomize(net, 0.7, 9).unwrap();
        assert!(out.b().iter().all(|b| b.abs() <= 0.7));
        assert_eq!(out.c_b(), 0.7);
    }

    fn tiny_batch(xs: Vec<f64>, ys: Vec<f64>, d: usize) -> SampleBatch {
        SampleBatch { d, xs, ys, seed: 0 }
    }

    #[test]
    fn ridge_interpolates_two_points() {
        // J = 2, features with s = 1/2: diag-ish design
        let net = NetworkState::from_parts(
            2,
            vec![1.0, 1.0],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0],
            Activation::Relu,
            0.0,
        )
        .unwrap();
        let batch = tiny_batch(vec![1.0, 0.5, 0.2, 2.0], vec![0.3, -1.0], 2);
        let fit = fit_second_layer(&net, &batch, Regularizer::L2, 0.0).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(fit.net.forward(batch.x(i)), batch.ys[i], epsilon = 1e-10);
        }
        assert!(fit.train_objective >= 0.0 && fit.train_objective < 1e-18);
        // 2x2 oracle: Phi = [[0.5, 0.25], [0.1, 1.0]]
        let (y0, y1) = (0.3, -1.0);
        let det = 0.5 * 1.0 - 0.25 * 0.1;
        let a0 = (y0 * 1.0 - 0.25 * y1) / det;
        let a1 = (0.5 * y1 - 0.1 * y0) / det;
        assert_abs_diff_eq!(fit.net.a()[0], a0, epsilon = 1e-9);
        assert_abs_diff_eq!(fit.net.a()[1], a1, epsilon = 1e-9);
    }

    #[test]
    fn heavy_regularization_zeroes_second_layer() {
        let t = he3_target(6, 2);
        let net = init_network(20, 6, ActivationKind::Relu, 1.0, BiasInit::Uniform, 3).unwrap();
        let batch = sample_batch(&t, 200, 4).unwrap();
        let ymean = batch.ys.iter().map(|y| y * y).sum::<f64>() / 200.0;
        let fit = fit_second_layer(&net, &batch, Regularizer::L2, 1e12).unwrap();
        assert!(fit.net.a().iter().all(|a| a.abs() < 1e-9));
        assert_abs_diff_eq!(fit.train_objective, ymean, epsilon = 1e-6);

        let design = Design::build(&net, &batch);
        let lam = 2.0 * design.rhs.amax() * 1.001;
        let fit = fit_second_layer(&net, &batch, Regularizer::L1, lam).unwrap();
        assert!(fit.net.a().iter().all(|&a| a == 0.0));
        assert!(fit.report.residual <= 1e-12);
    }

    #[test]
    fn ridge_gradient_vanishes() {
        let t = he3_target(6, 2);
        let net = init_network(60, 6, ActivationKind::Relu, 1.0, BiasInit::Uniform, 5).unwrap();
        let batch = sample_batch(&t, 500, 6).unwrap();
        let lam = 1e-6;
        let fit = fit_second_layer(&net, &batch, Regularizer::L2, lam).unwrap();
        let design = Design::build(&net, &batch);
        let a = DVector::from_column_slice(fit.net.a());
        let grad = design.smooth_grad(&a) + &a * (2.0 * lam);
        assert!(grad.norm() <= 1e-6 * (1.0 + a.norm()), "{}", grad.norm());
    }

    #[test]
    fn cg_matches_direct_solve() {
        let t = he3_target(5, 2);
        let net = init_network(40, 5, ActivationKind::Relu, 1.0, BiasInit::Uniform, 7).unwrap();
        let batch = sample_batch(&t, 300, 8).unwrap();
        let design = Design::build(&net, &batch);
        let (direct, _) = ridge_direct(&design, 1e-4).unwrap();
        let phi = feature_matrix(&net, &batch.xs);
        let (cg, rep) = ridge_cg(&phi, &batch.ys, 1e-4).unwrap();
        assert!((direct - cg).norm() <= 1e-6 * (1.0 + rep.iterations as f64));
    }

    #[test]
    fn lasso_converges_monotonically() {
        let t = he3_target(6, 2);
        let net = init_network(30, 6, ActivationKind::Relu, 1.0, BiasInit::Uniform, 9).unwrap();
        let batch = sample_batch(&t, 400, 10).unwrap();
        let design = Design::build(&net, &batch);
        let lam = 0.05 * design.rhs.amax();
        let fit = fit_second_layer(&net, &batch, Regularizer::L1, lam).unwrap();
        let h = &fit.report.objective_history;
        assert!(h.windows(2).all(|w| w[1] <= w[0]));
        assert!(fit.report.residual < 1e-3 * lam.max(1e-12) * 1e3);
    }

    #[test]
    fn theoretical_schedule_rates() {
        let s = theoretical_schedule(64, 16, 3, 0.1, RateConstants::default()).unwrap();
        assert_eq!(s.t11, 65536);
        let s2 = theoretical_schedule(128, 16, 3, 0.1, RateConstants::default()).unwrap();
        assert_eq!(s2.t11, 4 * s.t11);
        let s4 = theoretical_schedule(256, 16, 3, 0.1, RateConstants::default()).unwrap();
        assert_abs_diff_eq!(s.eta / s4.eta, 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.eta, 1.0 / (4.0 * 512.0), epsilon = 1e-15);
    }

    #[test]
    fn ntk_zero_step_is_static() {
        let t = he3_target(8, 2);
        let cfg = NtkConfig { width: 64, steps: 100, eta: 0.0, c_b: 1.0, snapshot_every: 50 };
        let out = run_ntk_baseline(&cfg, &t, 1, None).unwrap();
        let init = init_network(64, 8, ActivationKind::Relu, 1.0, BiasInit::Uniform, 1).unwrap();
        assert_eq!(out.net.weights(), init.weights());
        assert_eq!(out.net.a(), init.a());
        assert_eq!(relative_movement(&init, &out.net), 0.0);
    }
}
