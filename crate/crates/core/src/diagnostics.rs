//! Alignment traces, localization reports and population error.

use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::hermite::DEFAULT_IE_TOL;
use crate::model::{dot, AdditiveTarget, DirectionSet, Estimate};
use crate::network::NetworkState;
use crate::rng;

pub const DEFAULT_THRESHOLD: f64 = 0.9;
/// Runner-up ceiling for a neuron to count as a single-task specialist.
pub const DEFAULT_RUNNER_UP: f64 = 0.2;

/// Row-major `J x M` matrix of `kappa_{j,m} = <w_j, v_m> / |w_j|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMatrix {
    pub width: usize,
    pub tasks: usize,
    pub data: Vec<f64>,
}

impl AlignmentMatrix {
    pub fn get(&self, j: usize, m: usize) -> f64 {
        self.data[j * self.tasks + m]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.tasks..(j + 1) * self.tasks]
    }

    pub fn column(&self, m: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.width).map(move |j| self.get(j, m))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// `max |self - other|` entrywise.
    pub fn max_abs_diff(&self, other: &AlignmentMatrix) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }
}

/// Rows are divided by their norm so weights that left the sphere (the lazy
/// baseline) are measured on the same scale.
pub fn alignment_matrix(net: &NetworkState, dirs: &DirectionSet) -> AlignmentMatrix {
    let tasks = dirs.len();
    let mut data = Vec::with_capacity(net.width() * tasks);
    for j in 0..net.width() {
        let w = net.w_row(j);
        let n = dot(w, w).sqrt();
        let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
        for v in dirs.rows() {
            data.push(dot(w, v) * inv);
        }
    }
    AlignmentMatrix { width: net.width(), tasks, data }
}

/// Receives alignment snapshots during training.
pub trait TraceSink {
    fn record(&mut self, step: u64, kappa: &AlignmentMatrix) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTrace {
    pub times: Vec<u64>,
    pub snapshots: Vec<AlignmentMatrix>,
    /// Hash of the run configuration.
    pub meta: String,
}

impl AlignmentTrace {
    pub fn new(meta: impl Into<String>) -> Self {
        AlignmentTrace { times: Vec::new(), snapshots: Vec::new(), meta: meta.into() }
    }

    pub fn first(&self) -> Option<&AlignmentMatrix> {
        self.snapshots.first()
    }

    pub fn last(&self) -> Option<&AlignmentMatrix> {
        self.snapshots.last()
    }

    /// Writes `step,j,m,kappa` rows for every snapshot.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut line = String::new();
        let werr = |e| LabError::io(path, e);
        writeln!(out, "step,j,m,kappa").map_err(werr)?;
        for (t, k) in self.times.iter().zip(&self.snapshots) {
            for j in 0..k.width {
                for m in 0..k.tasks {
                    line.clear();
                    let _ = write!(line, "{t},{j},{m},{:.16e}", k.get(j, m));
                    writeln!(out, "{line}").map_err(werr)?;
                }
            }
        }
        out.flush().map_err(werr)
    }
}

impl TraceSink for AlignmentTrace {
    fn record(&mut self, step: u64, kappa: &AlignmentMatrix) -> Result<()> {
        self.times.push(step);
        self.snapshots.push(kappa.clone());
        Ok(())
    }
}

/// FNV-1a, used to tag traces with the configuration that produced them.
pub fn config_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Index sets `J_m` of neurons that start in the basin of task `m`.
///
/// Membership: `kappa_{j,m} >= 1/sqrt(d)` and
/// `kappa_{j,m}^{p-2} >= C_p^{(p-2)/2} max_{m' != m} |kappa_{j,m'}|^{p-2} + delta d^{-(p-2)/2}`,
/// with `C_p = (max_m |alpha_{m,p}| / min_m |alpha_{m,p}|)^{2/(p-2)}`.
pub fn initialization_classes(net: &NetworkState, target: &AdditiveTarget, delta: f64) -> Result<Vec<Vec<usize>>> {
    if !(delta > 0.0) {
        return Err(LabError::InvalidArgument("delta must be positive".into()));
    }
    let p = target.information_exponent();
    if p <= 2 {
        return Err(LabError::InvalidArgument(format!(
            "initialization classes need information exponent p >= 3, got {p}"
        )));
    }
    let lead: Vec<f64> = target.links().iter().map(|f| f.coeff(p).abs()).collect();
    let ratio = lead.iter().cloned().fold(0.0, f64::max) / lead.iter().cloned().fold(f64::INFINITY, f64::min);
    // C_p^{(p-2)/2} is the coefficient ratio itself
    let d = target.dim() as f64;
    let e = (p - 2) as i32;
    let floor = 1.0 / d.sqrt();
    let margin = delta * d.powf(-(p as f64 - 2.0) / 2.0);
    let kappa = alignment_matrix(net, target.dirs());
    let tasks = target.num_tasks();
    let mut sets = vec![Vec::new(); tasks];
    for j in 0..net.width() {
        let row = kappa.row(j);
        for m in 0..tasks {
            let k = row[m];
            if k < floor {
                continue;
            }
            let rival = (0..tasks).filter(|&o| o != m).map(|o| row[o].abs().powi(e)).fold(0.0, f64::max);
            if k.powi(e) >= ratio * rival + margin {
                sets[m].push(j);
            }
        }
    }
    Ok(sets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub threshold: f64,
    pub sign_insensitive: bool,
    pub j_min: usize,
    /// Neurons with alignment above the threshold, per task.
    pub counts: Vec<usize>,
    /// Task with the largest alignment, per neuron.
    pub argmax: Vec<usize>,
    /// Largest minus second-largest alignment, per neuron.
    pub gap: Vec<f64>,
    pub satisfied: bool,
    /// Per task: some neuron reaches the threshold while its runner-up task
    /// stays below [`DEFAULT_RUNNER_UP`].
    pub specialists: Vec<bool>,
    /// Free-form metadata (for instance the target accuracy behind the threshold).
    #[serde(default)]
    pub meta: String,
}

impl LocalizationReport {
    pub fn specialist_count(&self) -> usize {
        self.specialists.iter().filter(|&&s| s).count()
    }
}

/// Localization at the last snapshot of `trace`.
pub fn localization_report(
    trace: &AlignmentTrace,
    threshold: f64,
    j_min: usize,
    sign_insensitive: bool,
) -> Result<LocalizationReport> {
    let kappa = trace.last().ok_or_else(|| LabError::InvalidArgument("trace has no snapshots".into()))?;
    localization_of(kappa, threshold, j_min, sign_insensitive)
}

pub fn localization_of(
    kappa: &AlignmentMatrix,
    threshold: f64,
    j_min: usize,
    sign_insensitive: bool,
) -> Result<LocalizationReport> {
    if !(threshold > 0.0) {
        return Err(LabError::InvalidArgument("threshold must be positive".into()));
    }
    let score = |v: f64| if sign_insensitive { v.abs() } else { v };
    let tasks = kappa.tasks;
    let mut counts = vec![0usize; tasks];
    let mut specialists = vec![false; tasks];
    let mut argmax = Vec::with_capacity(kappa.width);
    let mut gap = Vec::with_capacity(kappa.width);
    for j in 0..kappa.width {
        let row = kappa.row(j);
        let mut best = (0usize, f64::NEG_INFINITY);
        let mut second = f64::NEG_INFINITY;
        for (m, &v) in row.iter().enumerate() {
            let s = score(v);
            if s >= threshold {
                counts[m] += 1;
            }
            if s > best.1 {
                second = best.1;
                best = (m, s);
            } else if s > second {
                second = s;
            }
        }
        // the runner-up is judged on magnitude either way
        let runner_up = row.iter().enumerate().filter(|&(m, _)| m != best.0).map(|(_, v)| v.abs()).fold(0.0, f64::max);
        if best.1 >= threshold && runner_up <= DEFAULT_RUNNER_UP {
            specialists[best.0] = true;
        }
        argmax.push(best.0);
        gap.push(if tasks > 1 { best.1 - second } else { best.1 });
    }
    let satisfied = counts.iter().all(|&c| c >= j_min);
    Ok(LocalizationReport {
        threshold,
        sign_insensitive,
        j_min,
        counts,
        argmax,
        gap,
        satisfied,
        specialists,
        meta: String::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    L1,
    L2,
}

/// Monte Carlo estimate of `E|f_* - predict|` (L1) or `sqrt(E (f_* - predict)^2)` (L2)
/// against the noiseless target.
pub fn population_error(
    predict: &(dyn Fn(&[f64]) -> f64 + Sync),
    target: &AdditiveTarget,
    n: usize,
    metric: ErrorMetric,
    seed: u64,
) -> Result<Estimate> {
    if n < 2 {
        return Err(LabError::InvalidArgument("need at least two samples".into()));
    }
    let mut rng = rng::seeded(seed);
    let mut x = vec![0.0; target.dim()];
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        rng::fill_normal(&mut rng, &mut x);
        let r = target.eval(&x) - predict(&x);
        let v = match metric {
            ErrorMetric::L1 => r.abs(),
            ErrorMetric::L2 => r * r,
        };
        s1 += v;
        s2 += v * v;
    }
    let est = Estimate::from_sums(s1, s2, n);
    Ok(match metric {
        ErrorMetric::L1 => est,
        ErrorMetric::L2 => {
            let root = est.value.sqrt();
            let se = if root > 0.0 { est.std_error / (2.0 * root) } else { est.std_error.sqrt() };
            Estimate { value: root, std_error: se }
        }
    })
}

/// Writes `snapshot,step,j,kappa_m1,kappa_m2` for the first and last snapshots.
pub fn emit_scatter(trace: &AlignmentTrace, m1: usize, m2: usize, path: &Path) -> Result<()> {
    if m1 == m2 {
        return Err(LabError::InvalidArgument("scatter needs two distinct tasks".into()));
    }
    let (Some(first), Some(last)) = (trace.first(), trace.last()) else {
        return Err(LabError::InvalidArgument("trace has no snapshots".into()));
    };
    if m1.max(m2) >= first.tasks {
        return Err(LabError::InvalidArgument("task index out of range".into()));
    }
    let steps = [trace.times[0], *trace.times.last().expect("non-empty")];
    let mut text = String::from("snapshot,step,j,kappa_m1,kappa_m2\n");
    for (label, step, k) in [("first", steps[0], first), ("last", steps[1], last)] {
        for j in 0..k.width {
            let _ = writeln!(text, "{label},{step},{j},{:.16e},{:.16e}", k.get(j, m1), k.get(j, m2));
        }
    }
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

/// Parsed row of a scatter file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPoint {
    pub last: bool,
    pub step: u64,
    pub j: usize,
    pub kappa_m1: f64,
    pub kappa_m2: f64,
}

pub fn read_scatter(path: &Path) -> Result<Vec<ScatterPoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let bad = |line: &str| LabError::Format(format!("bad scatter row: {line}"));
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(line));
            }
            Ok(ScatterPoint {
                last: f[0] == "last",
                step: f[1].parse().map_err(|_| bad(line))?,
                j: f[2].parse().map_err(|_| bad(line))?,
                kappa_m1: f[3].parse().map_err(|_| bad(line))?,
                kappa_m2: f[4].parse().map_err(|_| bad(line))?,
            })
        })
        .collect()
}

/// Threshold `1 - 3 eps_tilde` for a target accuracy, with
/// `eps_tilde = eps / sqrt(M)`; informational only.
pub fn strong_recovery_threshold(eps: f64, tasks: usize) -> f64 {
    1.0 - 3.0 * eps / (tasks as f64).sqrt()
}

/// Information exponent and degree shared by the target's links.
pub fn link_profile(target: &AdditiveTarget) -> (usize, usize) {
    let p = target.links()[0].information_exponent(DEFAULT_IE_TOL).unwrap_or(0);
    (p, target.degree())
}
