//! Preset pipelines. Each run writes its resolved config first, then its
//! artifacts, then `summary.json`.

use std::fmt;
use std::path::{Path, PathBuf};

use additive_lab::diagnostics::{
    emit_scatter, localization_of, population_error, AlignmentMatrix, ErrorMetric, LocalizationReport,
};
use additive_lab::hermite::{gauss_quadrature, superorthogonal_k2_l2, superorthogonality_check, HermiteSeries};
use additive_lab::model::{gen_directions, sample_batch, AdditiveTarget};
use additive_lab::network::{init_network, NetworkState};
use additive_lab::rng::mix;
use additive_lab::sq::{bihari_sweep, build_hard_class, correlation_census, random_unit_query};
use additive_lab::trainer::{
    fit_second_layer, interphase_randomize, relative_movement, run_ntk_baseline, run_phase1, select_lambda, NtkConfig,
    PhaseOutput, Regularizer, TrainSchedule,
};
use additive_lab::LabError;
use serde_json::{json, Map, Value};

use crate::config::{
    to_pretty_json, ConfigError, DiagnosticsCfg, ExperimentConfig, NetworkCfg, Preset, TargetCfg, TrainCfg,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_ACCEPTANCE: i32 = 4;
pub const EXIT_OTHER: i32 = 1;

// salts for the sub-seeds of a run
const SALT_DIRECTIONS: u64 = 1;
const SALT_PHASE2_BATCH: u64 = 2;
const SALT_ERROR: u64 = 3;
const SALT_BASELINE: u64 = 4;
const SALT_QUERY: u64 = 100;

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Lab(LabError),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "config error: {e}"),
            RunError::Lab(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<LabError> for RunError {
    fn from(e: LabError) -> Self {
        RunError::Lab(e)
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

/// Errors raised by a precondition on the configured parameters.
fn is_bad_input(e: &LabError) -> bool {
    matches!(
        e,
        LabError::InvalidArgument(_)
            | LabError::InsufficientQuadratureOrder { .. }
            | LabError::TooManyDirections { .. }
            | LabError::PreconditionViolated(_)
            | LabError::MixedInformationExponent { .. }
            | LabError::InvalidLink { .. }
            | LabError::NoPositiveDegree { .. }
            | LabError::TauBelowCoherence { .. }
    )
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Lab(e) if is_bad_input(e) => EXIT_CONFIG,
            RunError::Lab(e) if e.is_numeric() => EXIT_NUMERIC,
            RunError::Lab(_) => EXIT_OTHER,
        }
    }

    /// Machine-readable error record.
    pub fn record(&self) -> Value {
        let (kind, path) = match self {
            RunError::Config(e) => ("config", Some(e.path.clone())),
            RunError::Lab(e) if e.is_numeric() => ("numeric", None),
            RunError::Lab(e) if is_bad_input(e) => ("config", None),
            RunError::Lab(_) => ("runtime", None),
        };
        let mut rec = json!({
            "error": kind,
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        if let Some(p) = path.filter(|p| !p.is_empty()) {
            rec["key"] = Value::String(p);
        }
        rec
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: Value,
    pub passed: bool,
    pub out_dir: PathBuf,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            EXIT_OK
        } else {
            EXIT_ACCEPTANCE
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), RunError> {
    std::fs::write(path, text).map_err(|e| RunError::Lab(LabError::Io { path: path.to_path_buf(), source: e }))
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T, RunError> {
    s.as_ref().ok_or_else(|| RunError::Config(ConfigError { path: name.into(), message: "missing section".into() }))
}

/// Runs the configured preset. Errors are also recorded in `error.json`
/// when the output directory is usable.
pub fn run_preset(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| RunError::Lab(LabError::Io { path: out.clone(), source: e }))?;
    write(&out.join("resolved_config.json"), &to_pretty_json(cfg))?;
    let result = match cfg.preset {
        Preset::Figure1 | Preset::Custom => run_figure1(cfg, &out),
        Preset::Figure1Ntk => run_ntk(cfg, &out),
        Preset::Theorem1Scaled => run_theorem1(cfg, &out),
        Preset::Superortho => run_superortho(cfg),
        Preset::CsqCensus => run_census(cfg, &out),
        Preset::BihariSweep => run_bihari(cfg),
    };
    match result {
        Ok((metrics, checks)) => {
            let passed = checks.values().all(|v| v.as_bool() == Some(true));
            let summary = json!({
                "preset": cfg.preset.name(),
                "seed": cfg.seed,
                "pass": passed,
                "checks": checks,
                "metrics": metrics,
            });
            let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            text.push('\n');
            write(&out.join("summary.json"), &text)?;
            Ok(RunOutcome { summary, passed, out_dir: out })
        }
        Err(e) => {
            let mut text = serde_json::to_string_pretty(&e.record()).expect("record serializes");
            text.push('\n');
            let _ = std::fs::write(out.join("error.json"), text);
            Err(e)
        }
    }
}

type Sections = (Map<String, Value>, Map<String, Value>);

pub fn build_target(t: &TargetCfg, seed: u64) -> Result<AdditiveTarget, LabError> {
    let dirs = gen_directions(t.d, t.m, t.mode, mix(seed, SALT_DIRECTIONS))?;
    let (link, amplitude) = match &t.link {
        Some(c) => {
            let link = HermiteSeries::from_normalized(c);
            let amplitude = link.second_moment().sqrt();
            (link, amplitude)
        }
        None => {
            let c: Vec<f64> = (0..=t.q).map(|k| if k >= t.p { 1.0 } else { 0.0 }).collect();
            (HermiteSeries::from_normalized(&c), 1.0)
        }
    };
    AdditiveTarget::uniform(dirs, link, t.noise_std)?.with_amplitude(amplitude)
}

pub fn build_network(n: &NetworkCfg, d: usize, seed: u64) -> Result<NetworkState, LabError> {
    init_network(n.width, d, n.activation, n.c_b, n.bias_init, seed)
}

pub fn schedule_of(t: &TrainCfg) -> TrainSchedule {
    TrainSchedule {
        t1: t.t1,
        t2: t.t2,
        step_rule: t.step_rule,
        eta0: t.eta0,
        lambda_bar: t.lambda_bar.unwrap_or(0.0),
        r: t.r,
        snapshot_every: t.snapshot_every,
        gradient_scale: t.gradient_scale,
    }
}

/// Tasks that need a specialist: at least 15 in every 16, rounded up.
pub fn required_specialists(d: &DiagnosticsCfg, tasks: usize) -> usize {
    d.min_specialists.unwrap_or((15 * tasks).div_ceil(16)).min(tasks)
}

fn column_max(k: &AlignmentMatrix) -> Vec<f64> {
    (0..k.tasks).map(|m| k.column(m).map(f64::abs).fold(0.0, f64::max)).collect()
}

fn write_trace_artifacts(run: &PhaseOutput, diag: &DiagnosticsCfg, out: &Path) -> Result<LocalizationReport, RunError> {
    if diag.trace_csv {
        run.trace.write_csv(&out.join("trace.csv"))?;
    }
    let tasks = run.trace.last().map_or(0, |k| k.tasks);
    if tasks >= 2 {
        let [m1, m2] = diag.scatter_pair;
        emit_scatter(&run.trace, m1, m2, &out.join(format!("scatter_{m1}_{m2}.csv")))?;
    }
    let last = run.trace.last().expect("trace has snapshots");
    let mut rep = localization_of(last, diag.threshold, diag.j_min, diag.sign_insensitive)?;
    rep.meta = format!("trace {}", run.trace.meta);
    let mut text = serde_json::to_string_pretty(&rep).expect("report serializes");
    text.push('\n');
    write(&out.join("localization.json"), &text)?;
    Ok(rep)
}

struct Phase2Result {
    lambda: f64,
    objective: f64,
    l1_error: f64,
    l1_std_error: f64,
    fitted: NetworkState,
}

fn phase2(
    net: &NetworkState,
    target: &AdditiveTarget,
    train: &TrainCfg,
    diag: &DiagnosticsCfg,
    seed: u64,
) -> Result<Phase2Result, RunError> {
    let reg = Regularizer::from_order(train.r)?;
    let batch = sample_batch(target, train.t2, mix(seed, SALT_PHASE2_BATCH))?;
    let lambda = match train.lambda_bar {
        Some(l) => l,
        None => select_lambda(net, &batch, reg, &train.lambda_grid, train.holdout)?.best,
    };
    let fit = fit_second_layer(net, &batch, reg, lambda)?;
    let fitted = fit.net;
    let err =
        population_error(&|x| fitted.forward(x), target, diag.error_samples, ErrorMetric::L1, mix(seed, SALT_ERROR))?;
    Ok(Phase2Result {
        lambda,
        objective: fit.train_objective,
        l1_error: err.value,
        l1_std_error: err.std_error,
        fitted,
    })
}

fn feature_learning(cfg: &ExperimentConfig, out: &Path) -> Result<(Sections, Option<Phase2Result>), RunError> {
    let tcfg = section(&cfg.target, "target")?;
    let ncfg = section(&cfg.network, "network")?;
    let train = section(&cfg.train, "train")?;
    let diag = section(&cfg.diagnostics, "diagnostics")?;
    let target = build_target(tcfg, cfg.seed)?;
    write(&out.join("target.json"), &target.to_json()?)?;
    let init = build_network(ncfg, tcfg.d, cfg.seed)?;
    let run = run_phase1(init.clone(), &target, &schedule_of(train), cfg.seed, None)?;
    let rep = write_trace_artifacts(&run, diag, out)?;
    run.net.write_binary(&out.join("network.bin"))?;

    let required = required_specialists(diag, tcfg.m);
    let specialists = rep.specialist_count();
    let mut metrics = Map::new();
    let mut checks = Map::new();
    metrics.insert("specialists".into(), json!(specialists));
    metrics.insert("required_specialists".into(), json!(required));
    metrics.insert("counts_above_threshold".into(), json!(rep.counts));
    metrics.insert("max_alignment_init".into(), json!(column_max(run.trace.first().expect("snapshot"))));
    metrics.insert("max_alignment_final".into(), json!(column_max(run.trace.last().expect("snapshot"))));
    metrics.insert("relative_movement".into(), json!(relative_movement(&init, &run.net)));
    metrics.insert("schedule_hash".into(), json!(run.trace.meta));
    checks.insert("localization".into(), json!(specialists >= required));

    let p2 = if train.phase2 {
        let net = interphase_randomize(run.net, ncfg.c_b, cfg.seed)?;
        let res = phase2(&net, &target, train, diag, cfg.seed)?;
        res.fitted.write_binary(&out.join("fitted.bin"))?;
        metrics.insert("lambda_bar".into(), json!(res.lambda));
        metrics.insert("train_objective".into(), json!(res.objective));
        metrics.insert("population_l1_error".into(), json!(res.l1_error));
        metrics.insert("population_l1_std_error".into(), json!(res.l1_std_error));
        Some(res)
    } else {
        None
    };
    Ok(((metrics, checks), p2))
}

fn run_figure1(cfg: &ExperimentConfig, out: &Path) -> Result<Sections, RunError> {
    let ((metrics, mut checks), p2) = feature_learning(cfg, out)?;
    if let Some(res) = p2 {
        let ceiling = section(&cfg.diagnostics, "diagnostics")?.error_ceiling;
        checks.insert("population_error".into(), json!(res.l1_error <= ceiling));
    }
    Ok((metrics, checks))
}

fn run_theorem1(cfg: &ExperimentConfig, out: &Path) -> Result<Sections, RunError> {
    let ((mut metrics, mut checks), p2) = feature_learning(cfg, out)?;
    let diag = section(&cfg.diagnostics, "diagnostics")?;
    let train = section(&cfg.train, "train")?;
    let tcfg = section(&cfg.target, "target")?;
    let ncfg = section(&cfg.network, "network")?;
    let res = p2.ok_or_else(|| {
        RunError::Config(ConfigError {
            path: "train.phase2".into(),
            message: "theorem1_scaled needs the second-layer fit".into(),
        })
    })?;
    // untrained first layer, same width, same Phase II data and fitting rule
    let target = build_target(tcfg, cfg.seed)?;
    let frozen = build_network(ncfg, tcfg.d, mix(cfg.seed, SALT_BASELINE))?;
    let frozen = interphase_randomize(frozen, ncfg.c_b, cfg.seed)?;
    let base = phase2(&frozen, &target, train, diag, cfg.seed)?;
    metrics.insert("baseline_lambda_bar".into(), json!(base.lambda));
    metrics.insert("baseline_l1_error".into(), json!(base.l1_error));
    metrics.insert("baseline_l1_std_error".into(), json!(base.l1_std_error));
    let ratio = base.l1_error / res.l1_error;
    metrics.insert("baseline_ratio".into(), json!(ratio));
    checks.insert("population_error".into(), json!(res.l1_error <= diag.error_ceiling));
    checks.insert("baseline_gap".into(), json!(ratio >= diag.baseline_ratio));
    // localization is reported, not required, at this scale
    checks.remove("localization");
    Ok((metrics, checks))
}

fn run_ntk(cfg: &ExperimentConfig, out: &Path) -> Result<Sections, RunError> {
    let tcfg = section(&cfg.target, "target")?;
    let ncfg = section(&cfg.network, "network")?;
    let ntk = section(&cfg.ntk, "ntk")?;
    let diag = section(&cfg.diagnostics, "diagnostics")?;
    let target = build_target(tcfg, cfg.seed)?;
    write(&out.join("target.json"), &target.to_json()?)?;
    let ncfg_run = NtkConfig {
        width: ncfg.width,
        steps: ntk.steps,
        eta: ntk.eta,
        c_b: ncfg.c_b,
        snapshot_every: ntk.snapshot_every,
    };
    let run = run_ntk_baseline(&ncfg_run, &target, cfg.seed, None)?;
    let rep = write_trace_artifacts(&run, diag, out)?;
    run.net.write_binary(&out.join("network.bin"))?;
    let init = init_network(
        ncfg.width,
        tcfg.d,
        ncfg.activation,
        ncfg.c_b,
        additive_lab::network::BiasInit::Uniform,
        cfg.seed,
    )?;
    let first = run.trace.first().expect("snapshot");
    let last = run.trace.last().expect("snapshot");
    let max_alignment = last.max_abs();
    let change = last.max_abs_diff(first);
    let mut metrics = Map::new();
    let mut checks = Map::new();
    let err_init = population_error(
        &|x| init.forward(x),
        &target,
        diag.error_samples,
        ErrorMetric::L2,
        mix(cfg.seed, SALT_ERROR),
    )?;
    let err_final = population_error(
        &|x| run.net.forward(x),
        &target,
        diag.error_samples,
        ErrorMetric::L2,
        mix(cfg.seed, SALT_ERROR),
    )?;
    metrics.insert("population_l2_error_init".into(), json!(err_init.value));
    metrics.insert("population_l2_error_final".into(), json!(err_final.value));
    metrics.insert("max_alignment_init".into(), json!(first.max_abs()));
    metrics.insert("max_alignment".into(), json!(max_alignment));
    metrics.insert("max_alignment_change".into(), json!(change));
    metrics.insert("relative_movement".into(), json!(relative_movement(&init, &run.net)));
    metrics.insert("specialists".into(), json!(rep.specialist_count()));
    metrics.insert("schedule_hash".into(), json!(run.trace.meta));
    checks.insert("no_alignment".into(), json!(max_alignment <= diag.max_alignment));
    checks.insert("lazy".into(), json!(change <= diag.max_alignment_change));
    Ok((metrics, checks))
}

fn max_abs(m: &[Vec<f64>]) -> f64 {
    m.iter().flatten().fold(0.0, |a, v| a.max(v.abs()))
}

fn run_superortho(cfg: &ExperimentConfig) -> Result<Sections, RunError> {
    let s = section(&cfg.superortho, "superortho")?;
    let rule = gauss_quadrature(s.order)?;
    let mut metrics = Map::new();
    let mut checks = Map::new();
    let mut single = Vec::new();
    for l in 1..=s.max_l {
        let r = superorthogonality_check(&HermiteSeries::basis(l + 1), 1, l, &rule)?;
        single.push(max_abs(&r));
    }
    let worst_single = single.iter().cloned().fold(0.0, f64::max);
    let pair = superorthogonality_check(&superorthogonal_k2_l2(), 2, 2, &rule)?;
    metrics.insert("single_power_max_residual_by_l".into(), json!(single));
    metrics.insert("pair_residuals".into(), json!(pair));
    metrics.insert("pair_max_residual".into(), json!(max_abs(&pair)));
    checks.insert("single_power".into(), json!(worst_single <= s.tol_single));
    checks.insert("pair".into(), json!(max_abs(&pair) <= s.tol_pair));
    Ok((metrics, checks))
}

fn run_census(cfg: &ExperimentConfig, out: &Path) -> Result<Sections, RunError> {
    let s = section(&cfg.sq, "sq")?;
    let cls = build_hard_class(s.d, s.a, s.p, cfg.seed)?;
    write(&out.join("hard_class.json"), &cls.to_target()?.to_json()?)?;
    let overlap = cls.dirs.recompute_max_overlap();
    let mut worst_corr: f64 = 0.0;
    for i in 0..cls.len() {
        for k in (i + 1)..cls.len() {
            worst_corr = worst_corr.max(cls.correlation(i, k).abs());
        }
    }
    let tau = s.tau_factor * cls.coherence().sqrt();
    let mut counts = Vec::with_capacity(s.queries);
    let mut violations = 0usize;
    let mut worst_fill: f64 = 0.0;
    for i in 0..s.queries {
        let g = random_unit_query(&cls, mix(cfg.seed, SALT_QUERY + i as u64))?;
        match correlation_census(&g, &cls, tau) {
            Ok(r) => {
                worst_fill = worst_fill.max(r.count as f64 / r.bound);
                counts.push(r.count);
            }
            Err(LabError::CensusBoundViolated { count, .. }) => {
                violations += 1;
                counts.push(count);
            }
            Err(e) => return Err(e.into()),
        }
    }
    let self_count = correlation_census(&cls.member(0), &cls, 0.5)?.count;
    let census = json!({
        "tau": tau,
        "bound": 2.0 / (tau * tau - cls.coherence()),
        "counts": counts,
        "violations": violations,
    });
    let mut text = serde_json::to_string_pretty(&census).expect("census serializes");
    text.push('\n');
    write(&out.join("census.json"), &text)?;
    let mut metrics = Map::new();
    let mut checks = Map::new();
    metrics.insert("max_overlap".into(), json!(overlap));
    metrics.insert("overlap_bound".into(), json!(additive_lab::model::hypercube_overlap_bound(s.d, s.a)));
    metrics.insert("max_correlation".into(), json!(worst_corr));
    metrics.insert("census_tau".into(), json!(tau));
    metrics.insert("census_violations".into(), json!(violations));
    metrics.insert("census_max_fill".into(), json!(worst_fill));
    metrics.insert("member_self_count".into(), json!(self_count));
    checks.insert("overlap".into(), json!(overlap <= s.max_overlap));
    checks.insert("correlation".into(), json!(worst_corr <= s.max_correlation));
    checks.insert("census".into(), json!(violations == 0));
    Ok((metrics, checks))
}

fn run_bihari(cfg: &ExperimentConfig) -> Result<Sections, RunError> {
    let b = section(&cfg.bihari, "bihari")?;
    let sweep = bihari_sweep(b.cases, b.horizon, cfg.seed)?;
    let mut metrics = Map::new();
    let mut checks = Map::new();
    metrics.insert("sweep".into(), serde_json::to_value(&sweep).expect("sweep serializes"));
    checks.insert("stated_lower".into(), json!(sweep.stated_lower_cases == 0));
    checks.insert("upper".into(), json!(sweep.upper_cases == 0));
    metrics.insert("corrected_lower_holds".into(), json!(sweep.corrected_lower_cases == 0));
    Ok((metrics, checks))
}
