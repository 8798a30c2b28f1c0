//! Seeded experiment pipelines.
//!
//! Each runner maps an [`ExperimentConfig`] to an [`ExperimentReport`]. Trials
//! (one per seed) run in parallel on a pool of `config.threads` workers and are
//! merged in seed order, so reports do not depend on the thread count.

pub mod config;
pub mod report;

mod chain;
mod edit_locality;
mod graph_library;
mod kernel_convergence;
mod library;
mod same_multiple;
mod theorem1;

use rayon::prelude::*;

pub use chain::{sample_chain, Chain, ChainTrial};
pub use config::{ExperimentConfig, ExperimentKind};
pub use edit_locality::run_edit_locality;
pub use graph_library::run_graph_library;
pub use kernel_convergence::{kernel_check, run_kernel_convergence, test_pairs, KernelCheck};
pub use library::run_library_comparison;
pub use report::{Check, Comparator, ExperimentReport, KernelDiagnostic, Row};
pub use same_multiple::{multiple_on_direction, run_same_multiple};
pub use theorem1::run_theorem1;

use crate::error::{Error, Result};
use crate::lora::Adapter;
use crate::model::ModelParams;
use crate::routing::{fit_cat_weights, Combinator};
use crate::world::{EntityId, Prompt};

/// Dispatches on `config.experiment`.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    match config.experiment {
        ExperimentKind::EditLocality => run_edit_locality(config),
        ExperimentKind::Theorem1 => run_theorem1(config),
        ExperimentKind::LibraryComparison => run_library_comparison(config),
        ExperimentKind::GraphLibrary => run_graph_library(config),
        ExperimentKind::SameMultiple => run_same_multiple(config),
        ExperimentKind::KernelConvergence => run_kernel_convergence(config),
    }
}

/// Metrics produced by one trial, in emission order.
#[derive(Debug, Default)]
pub(crate) struct TrialRows(Vec<(String, String, f64)>);

impl TrialRows {
    pub(crate) fn put(&mut self, variant: impl Into<String>, metric: impl Into<String>, value: f64) {
        self.0.push((variant.into(), metric.into(), value));
    }
}

/// Runs `trial` for every seed on the configured pool, preserving seed order.
pub(crate) fn run_trials<T, F>(config: &ExperimentConfig, trial: F) -> Result<Vec<(u64, T)>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    let seeds = config.seed_list();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = config.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| seeds.par_iter().map(|&s| trial(s).map(|t| (s, t))).collect())
}

pub(crate) fn new_report(config: &ExperimentConfig) -> ExperimentReport {
    ExperimentReport::new(config.experiment, config.config_hash(), config.seed_list())
}

pub(crate) fn absorb(report: &mut ExperimentReport, trials: Vec<(u64, TrialRows)>) {
    for (seed, rows) in trials {
        for (variant, metric, value) in rows.0 {
            report.push(seed, variant, metric, value);
        }
    }
}

/// Report label of a combinator; weightless `cat` is `cat_fitted`.
pub fn combinator_label(c: &Combinator) -> String {
    match c {
        Combinator::Cat { weights } if weights.is_empty() => "cat_fitted".into(),
        Combinator::Arrow { temperature, use_abs, activation, combine } => {
            let mut s = String::from("arrow");
            if *temperature != 1.0 {
                s.push_str(&format!("_t{temperature}"));
            }
            if !use_abs {
                s.push_str("_signed");
            }
            if *activation == crate::routing::ArrowActivation::PreRelu {
                s.push_str("_prerelu");
            }
            if *combine == crate::routing::ArrowCombine::Merge {
                s.push_str("_merge");
            }
            s
        }
        other => other.name().into(),
    }
}

/// Replaces a weightless `cat` with weights fitted on the adapters' own
/// training prompts. Returns the combinator and whether the fit was degenerate.
pub fn resolve_combinator(params: &ModelParams, adapters: &[&Adapter], c: &Combinator) -> Result<(Combinator, bool)> {
    match c {
        Combinator::Cat { weights } if weights.is_empty() => {
            let probes: Vec<(Prompt, EntityId)> = adapters.iter().flat_map(|a| a.targets()).collect();
            let fit = fit_cat_weights(params, adapters, &probes)?;
            Ok((Combinator::Cat { weights: fit.weights }, fit.degenerate))
        }
        other => Ok((other.clone(), false)),
    }
}

pub(crate) fn bool_value(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}
