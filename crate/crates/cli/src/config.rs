//! Experiment configuration: presets, JSON parsing and defaulting.
//!
//! A config file is a JSON object. Keys given in the file override the
//! preset's defaults section by section; unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use additive_lab::model::DirectionMode;
use additive_lab::network::{ActivationKind, BiasInit};
use additive_lab::trainer::{GradientScale, StepRule};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Figure1,
    Figure1Ntk,
    Theorem1Scaled,
    Superortho,
    CsqCensus,
    BihariSweep,
    Custom,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Figure1,
        Preset::Figure1Ntk,
        Preset::Theorem1Scaled,
        Preset::Superortho,
        Preset::CsqCensus,
        Preset::BihariSweep,
        Preset::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Figure1 => "figure1",
            Preset::Figure1Ntk => "figure1_ntk",
            Preset::Theorem1Scaled => "theorem1_scaled",
            Preset::Superortho => "superortho",
            Preset::CsqCensus => "csq_census",
            Preset::BihariSweep => "bihari_sweep",
            Preset::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Preset> {
        Preset::ALL.into_iter().find(|p| p.name() == s)
    }

    /// Sections a config for this preset must or may carry.
    fn sections(self) -> &'static [&'static str] {
        match self {
            Preset::Figure1 | Preset::Custom => &["target", "network", "train", "diagnostics"],
            Preset::Figure1Ntk => &["target", "network", "ntk", "diagnostics"],
            Preset::Theorem1Scaled => &["target", "network", "train", "diagnostics"],
            Preset::Superortho => &["superortho"],
            Preset::CsqCensus => &["sq"],
            Preset::BihariSweep => &["bihari"],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetCfg {
    pub d: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub mode: DirectionMode,
    pub noise_std: f64,
    /// Link coefficients on the orthonormal Hermite basis, used as given
    /// (so `[0, 0, 0, sqrt(6)]` is `He_3`). Defaults to the equal-weight sum
    /// of degrees `p..=q` rescaled to unit variance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkCfg {
    #[serde(rename = "J")]
    pub width: usize,
    pub activation: ActivationKind,
    #[serde(rename = "C_b")]
    pub c_b: f64,
    pub bias_init: BiasInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCfg {
    #[serde(rename = "T1")]
    pub t1: u64,
    #[serde(rename = "T2")]
    pub t2: usize,
    pub step_rule: StepRule,
    pub eta0: f64,
    pub gradient_scale: GradientScale,
    pub snapshot_every: u64,
    /// Run the second-layer fit after Phase I.
    pub phase2: bool,
    pub r: u8,
    /// Fixed regularization; `null` selects it on `lambda_grid`.
    pub lambda_bar: Option<f64>,
    pub lambda_grid: Vec<f64>,
    pub holdout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NtkCfg {
    pub steps: u64,
    pub eta: f64,
    pub snapshot_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsCfg {
    pub threshold: f64,
    pub j_min: usize,
    pub sign_insensitive: bool,
    pub scatter_pair: [usize; 2],
    /// Tasks that need a specialist neuron; `null` means `ceil(15 M / 16)`.
    pub min_specialists: Option<usize>,
    /// Lazy-run ceilings on final alignment and on its change.
    pub max_alignment: f64,
    pub max_alignment_change: f64,
    /// Phase II population L1 error ceiling and required random-feature ratio.
    pub error_ceiling: f64,
    pub baseline_ratio: f64,
    pub error_samples: usize,
    pub trace_csv: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SqCfg {
    pub d: usize,
    #[serde(rename = "A")]
    pub a: usize,
    pub p: usize,
    pub queries: usize,
    /// Census threshold as a multiple of the square root of the class coherence.
    pub tau_factor: f64,
    pub max_overlap: f64,
    pub max_correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BihariCfg {
    pub cases: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperorthoCfg {
    pub order: usize,
    pub max_l: usize,
    pub tol_single: f64,
    pub tol_pair: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetCfg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkCfg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainCfg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ntk: Option<NtkCfg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticsCfg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sq: Option<SqCfg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bihari: Option<BihariCfg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superortho: Option<SuperorthoCfg>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() || self.path == "." {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn cfg_err(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError { path: path.into(), message: message.into() }
}

/// `f_m = He_3` itself (variance 6), written on the orthonormal basis.
fn figure1_target() -> TargetCfg {
    TargetCfg {
        d: 64,
        m: 16,
        p: 3,
        q: 3,
        mode: DirectionMode::Canonical,
        noise_std: 0.0,
        link: Some(vec![0.0, 0.0, 0.0, 6f64.sqrt()]),
    }
}

fn relu_network(width: usize) -> NetworkCfg {
    NetworkCfg { width, activation: ActivationKind::Relu, c_b: 1.0, bias_init: BiasInit::Uniform }
}

fn default_diagnostics() -> DiagnosticsCfg {
    DiagnosticsCfg {
        threshold: 0.9,
        j_min: 1,
        sign_insensitive: true,
        scatter_pair: [0, 1],
        min_specialists: None,
        max_alignment: 0.3,
        max_alignment_change: 0.1,
        error_ceiling: 0.2,
        baseline_ratio: 2.0,
        error_samples: 100_000,
        trace_csv: true,
    }
}

fn lambda_grid() -> Vec<f64> {
    additive_lab::trainer::default_lambda_grid()
}

/// Step size of the lazy baseline. Near `0.5 / d` the 1/sqrt(J) network
/// still drifts into alignment over 10^5 steps, so stay well below that.
pub fn ntk_eta(d: usize) -> f64 {
    0.01 / d as f64
}

/// Fully populated defaults for `preset`.
pub fn preset_defaults(preset: Preset) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        preset,
        seed: 0,
        out_dir: PathBuf::from("runs").join(preset.name()),
        target: None,
        network: None,
        train: None,
        ntk: None,
        diagnostics: None,
        sq: None,
        bihari: None,
        superortho: None,
    };
    match preset {
        Preset::Figure1 | Preset::Custom => {
            cfg.target = Some(figure1_target());
            cfg.network = Some(relu_network(8192));
            cfg.train = Some(TrainCfg {
                t1: 1_000_000,
                t2: 20_000,
                step_rule: StepRule::Anneal { t_prime: None },
                eta0: 0.3,
                gradient_scale: GradientScale::OutputScale,
                snapshot_every: 250_000,
                phase2: false,
                r: 2,
                lambda_bar: None,
                lambda_grid: lambda_grid(),
                holdout: 0.2,
            });
            cfg.diagnostics = Some(default_diagnostics());
        }
        Preset::Figure1Ntk => {
            cfg.target = Some(figure1_target());
            cfg.network = Some(relu_network(8192));
            cfg.ntk = Some(NtkCfg { steps: 1_000_000, eta: ntk_eta(64), snapshot_every: 250_000 });
            cfg.diagnostics = Some(default_diagnostics());
        }
        Preset::Theorem1Scaled => {
            cfg.target = Some(TargetCfg { d: 16, m: 4, link: None, ..figure1_target() });
            // Biases must reach past |v.x| ~ q for the ridge fit to cover the cubic tails.
            cfg.network = Some(NetworkCfg { c_b: 3.0, ..relu_network(1024) });
            cfg.train = Some(TrainCfg {
                t1: 200_000,
                t2: 20_000,
                step_rule: StepRule::Anneal { t_prime: None },
                eta0: 0.3,
                gradient_scale: GradientScale::OutputScale,
                snapshot_every: 50_000,
                phase2: true,
                r: 2,
                lambda_bar: None,
                lambda_grid: lambda_grid(),
                holdout: 0.2,
            });
            cfg.diagnostics = Some(default_diagnostics());
        }
        Preset::Superortho => {
            cfg.superortho = Some(SuperorthoCfg { order: 64, max_l: 6, tol_single: 1e-10, tol_pair: 1e-6 });
        }
        Preset::CsqCensus => {
            cfg.sq = Some(SqCfg {
                d: 256,
                a: 64,
                p: 3,
                queries: 100,
                tau_factor: 1.01,
                max_overlap: 0.180,
                max_correlation: 5.9e-3,
            });
        }
        Preset::BihariSweep => {
            cfg.bihari = Some(BihariCfg { cases: 100, horizon: 100_000 });
        }
    }
    cfg
}

/// Sections the `custom` preset cannot default.
pub const CUSTOM_REQUIRED: [&str; 3] = ["target", "network", "train"];

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    /// `(section.key, value)` pairs.
    pub keys: Vec<(String, Value)>,
}

/// Deep merge of objects; `over` wins on scalars and arrays.
fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Parses, defaults and checks a config given as raw JSON text.
pub fn resolve_str(text: &str, ov: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let raw: Value = if text.trim().is_empty() {
        Value::Object(Map::new())
    } else {
        serde_json::from_str(text).map_err(|e| cfg_err("", format!("malformed JSON: {e}")))?
    };
    resolve_value(raw, ov)
}

pub fn resolve_value(mut raw: Value, ov: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let obj = raw.as_object_mut().ok_or_else(|| cfg_err("", "config must be a JSON object"))?;
    if let Some(p) = ov.preset {
        obj.insert("preset".into(), Value::String(p.name().into()));
    }
    let preset = match obj.get("preset") {
        None => return Err(cfg_err("preset", format!("missing required key; one of {}", preset_names()))),
        Some(Value::String(s)) => Preset::parse(s)
            .ok_or_else(|| cfg_err("preset", format!("unknown preset `{s}`; one of {}", preset_names())))?,
        Some(_) => return Err(cfg_err("preset", "expected a string")),
    };
    if preset == Preset::Custom {
        let missing: Vec<&str> = CUSTOM_REQUIRED.iter().copied().filter(|k| !obj.contains_key(*k)).collect();
        if !missing.is_empty() {
            return Err(cfg_err("", format!("custom config is missing required keys: {}", missing.join(", "))));
        }
    }
    for key in obj.keys() {
        let known = ["preset", "seed", "out_dir"].contains(&key.as_str());
        let section =
            ["target", "network", "train", "ntk", "diagnostics", "sq", "bihari", "superortho"].contains(&key.as_str());
        if section && !preset.sections().contains(&key.as_str()) {
            return Err(cfg_err(key.clone(), format!("section not used by preset {preset}")));
        }
        if !known && !section {
            return Err(cfg_err(key.clone(), "unknown key"));
        }
    }
    if let Some(s) = ov.seed {
        obj.insert("seed".into(), Value::from(s));
    }
    if let Some(d) = &ov.out_dir {
        obj.insert("out_dir".into(), Value::String(d.to_string_lossy().into_owned()));
    }
    for (path, v) in &ov.keys {
        let (section, key) =
            path.split_once('.').ok_or_else(|| cfg_err(path.clone(), "override must be section.key"))?;
        let entry = obj.entry(section.to_string()).or_insert_with(|| Value::Object(Map::new()));
        entry.as_object_mut().ok_or_else(|| cfg_err(section, "expected an object"))?.insert(key.to_string(), v.clone());
    }

    let mut merged = serde_json::to_value(preset_defaults(preset)).expect("defaults serialize");
    merge(&mut merged, &raw);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        cfg_err(path, e.into_inner().to_string())
    })?;
    check(&cfg)?;
    Ok(cfg)
}

fn preset_names() -> String {
    Preset::ALL.iter().map(|p| p.name()).collect::<Vec<_>>().join(", ")
}

fn check(cfg: &ExperimentConfig) -> Result<(), ConfigError> {
    if let Some(t) = &cfg.target {
        if t.d == 0 || t.m == 0 {
            return Err(cfg_err("target", "d and M must be positive"));
        }
        if t.p == 0 || t.q < t.p {
            return Err(cfg_err("target.q", "need 1 <= p <= q"));
        }
        if !(t.noise_std >= 0.0) {
            return Err(cfg_err("target.noise_std", "must be >= 0"));
        }
    }
    if let Some(n) = &cfg.network {
        if n.width == 0 {
            return Err(cfg_err("network.J", "must be positive"));
        }
        if !(n.c_b >= 0.0) {
            return Err(cfg_err("network.C_b", "must be >= 0"));
        }
    }
    if let Some(t) = &cfg.train {
        if t.t1 == 0 || t.t2 == 0 {
            return Err(cfg_err("train", "T1 and T2 must be positive"));
        }
        if t.snapshot_every == 0 {
            return Err(cfg_err("train.snapshot_every", "must be positive"));
        }
        if !(t.eta0 >= 0.0) {
            return Err(cfg_err("train.eta0", "must be >= 0"));
        }
        if t.r != 1 && t.r != 2 {
            return Err(cfg_err("train.r", "must be 1 or 2"));
        }
        if t.lambda_bar.is_none() && t.lambda_grid.is_empty() {
            return Err(cfg_err("train.lambda_grid", "empty grid and no fixed lambda_bar"));
        }
        if !(t.holdout > 0.0 && t.holdout < 1.0) {
            return Err(cfg_err("train.holdout", "must lie in (0, 1)"));
        }
    }
    if let Some(n) = &cfg.ntk {
        if n.snapshot_every == 0 {
            return Err(cfg_err("ntk.snapshot_every", "must be positive"));
        }
    }
    if let Some(d) = &cfg.diagnostics {
        if !(d.threshold > 0.0) {
            return Err(cfg_err("diagnostics.threshold", "must be positive"));
        }
        if d.error_samples < 2 {
            return Err(cfg_err("diagnostics.error_samples", "must be at least 2"));
        }
        if let Some(t) = &cfg.target {
            let bad_pair = d.scatter_pair[0] == d.scatter_pair[1] || d.scatter_pair.iter().any(|&m| m >= t.m);
            if bad_pair && t.m >= 2 {
                return Err(cfg_err("diagnostics.scatter_pair", "need two distinct tasks below M"));
            }
        }
    }
    Ok(())
}

pub fn read_config(path: &Path, ov: &Overrides) -> Result<ExperimentConfig, ConfigError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| cfg_err("", format!("cannot read {}: {e}", path.display())))?;
    resolve_str(&text, ov)
}

pub fn to_pretty_json(cfg: &ExperimentConfig) -> String {
    let mut s = serde_json::to_string_pretty(cfg).expect("config serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_resolves_from_name_only() {
        for p in Preset::ALL {
            if p == Preset::Custom {
                continue;
            }
            let cfg = resolve_str(&format!("{{\"preset\": \"{}\"}}", p.name()), &Overrides::default()).unwrap();
            assert_eq!(cfg.preset, p);
            // resolved config is a fixed point
            let again = resolve_str(&to_pretty_json(&cfg), &Overrides::default()).unwrap();
            assert_eq!(again, cfg);
        }
    }

    #[test]
    fn empty_custom_lists_required_keys() {
        let err = resolve_str("{\"preset\": \"custom\"}", &Overrides::default()).unwrap_err();
        for k in CUSTOM_REQUIRED {
            assert!(err.message.contains(k), "{err}");
        }
        let err = resolve_str("", &Overrides::default()).unwrap_err();
        assert_eq!(err.path, "preset");
    }

    #[test]
    fn override_is_echoed() {
        let cfg = resolve_str("{\"preset\": \"figure1\", \"target\": {\"d\": 32}}", &Overrides::default()).unwrap();
        let t = cfg.target.unwrap();
        assert_eq!(t.d, 32);
        assert_eq!(t.m, 16);
    }

    #[test]
    fn malformed_number_names_key() {
        let err = resolve_str("{\"preset\": \"figure1\", \"train\": {\"eta0\": \"fast\"}}", &Overrides::default())
            .unwrap_err();
        assert_eq!(err.path, "train.eta0");
        let err =
            resolve_str("{\"preset\": \"figure1\", \"target\": {\"d\": 1.5}}", &Overrides::default()).unwrap_err();
        assert_eq!(err.path, "target.d");
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = resolve_str("{\"preset\": \"figure1\", \"target\": {\"dd\": 3}}", &Overrides::default()).unwrap_err();
        assert!(err.path.starts_with("target"), "{err}");
        assert!(err.message.contains("dd"));
        let err = resolve_str("{\"preset\": \"figure1\", \"colour\": 1}", &Overrides::default()).unwrap_err();
        assert_eq!(err.path, "colour");
        let err = resolve_str("{\"preset\": \"superortho\", \"train\": {}}", &Overrides::default()).unwrap_err();
        assert_eq!(err.path, "train");
    }

    #[test]
    fn command_line_overrides_win() {
        let ov = Overrides {
            preset: Some(Preset::Figure1),
            seed: Some(7),
            out_dir: Some(PathBuf::from("runs/f1")),
            keys: vec![("network.J".into(), Value::from(64))],
        };
        let cfg = resolve_str("{\"seed\": 3}", &ov).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.out_dir, PathBuf::from("runs/f1"));
        assert_eq!(cfg.network.unwrap().width, 64);
    }
}
