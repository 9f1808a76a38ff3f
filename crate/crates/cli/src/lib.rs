//! Experiment runner for `additive-lab`: JSON configs, presets and the
//! output layout of a run directory.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod run;

pub use config::{read_config, resolve_str, ExperimentConfig, Overrides, Preset};
pub use run::{run_preset, RunError, RunOutcome};

/// Caps the global worker pool from `ADDITIVE_LAB_THREADS`, if set.
pub fn init_threads() {
    if let Some(n) =
        std::env::var("ADDITIVE_LAB_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
