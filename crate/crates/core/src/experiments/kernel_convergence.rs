//! Monte-Carlo convergence of the feature-map kernel ratio to its
//! arc-cosine limit, and of the summed-adapter coefficients to their
//! kernel prediction.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::chain::ChainTrial;
use super::config::ExperimentConfig;
use super::report::{Comparator, ExperimentReport, KernelDiagnostic};
use super::{new_report, run_trials};
use crate::error::{Error, Result};
use crate::kernel::{fit_power_law, kernel_ratio, mc_kernel_ratio_with, mixture_decompose, predict_two_hop};
use crate::model::{forward, init_params, ModelDims, OutputVec};
use crate::rng::{self, derive_seed, stream};
use crate::routing::{combine, Combinator};
use crate::world::gen_world;

/// Unit pairs `(x, cos t·x + sin t·y)` with `y ⊥ x` and `t` uniform in `[0, π]`.
pub fn test_pairs(d: usize, count: usize, seed: u64) -> Vec<(DVector<f64>, DVector<f64>)> {
    let mut r = rng::rng(seed);
    let gauss = |r: &mut rng::Rng| DVector::from_fn(d, |_, _| StandardNormal.sample(r));
    (0..count)
        .map(|_| {
            let x = gauss(&mut r).normalize();
            let mut y = gauss(&mut r);
            y -= &x * x.dot(&y);
            let y = y.normalize();
            let t = r.random_range(0.0..=PI);
            let xp = &x * t.cos() + y * t.sin();
            (x, xp)
        })
        .collect()
}

fn pair_errors(u: &DMatrix<f64>, pairs: &[(DVector<f64>, DVector<f64>)]) -> Result<Vec<f64>> {
    pairs.iter().map(|(x, xp)| Ok(mc_kernel_ratio_with(u, x, xp)? - kernel_ratio(x, xp)?)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelCheck {
    pub m: usize,
    /// Max over pairs of the mean over seeds of `|mc − exact|`.
    pub max_mean_abs_error: f64,
    /// RMS of `mc − exact` over all pairs and seeds.
    pub rms_error: f64,
}

fn first_layer(d: usize, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    Ok(init_params(ModelDims::new(d, m, 1, 1)?, derive_seed(seed, stream::MODEL))?.mlp_in().clone())
}

fn summarize(m: usize, per_seed: &[Vec<f64>]) -> KernelCheck {
    let pairs = per_seed.first().map_or(0, Vec::len);
    let k = per_seed.len() as f64;
    let max_mean_abs_error = (0..pairs)
        .map(|p| per_seed.iter().map(|e| e[p].abs()).sum::<f64>() / k)
        .fold(0.0, f64::max);
    let all: Vec<f64> = per_seed.iter().flatten().copied().collect();
    let rms_error = (all.iter().map(|e| e * e).sum::<f64>() / all.len().max(1) as f64).sqrt();
    KernelCheck { m, max_mean_abs_error, rms_error }
}

/// Convergence statistic at a single width `m`, as used by `kernel-check`.
pub fn kernel_check(d: usize, m: usize, seeds: &[u64], pairs: usize, pair_seed: u64) -> Result<KernelCheck> {
    if seeds.is_empty() || pairs == 0 || m == 0 {
        return Err(Error::param("kernel check needs seeds, pairs and m >= 1"));
    }
    let set = test_pairs(d, pairs, derive_seed(pair_seed, stream::PAIRS));
    let per_seed = seeds.iter().map(|&s| pair_errors(&first_layer(d, m, s)?, &set)).collect::<Result<Vec<_>>>()?;
    Ok(summarize(m, &per_seed))
}

struct WidthResult {
    m: usize,
    errors: Vec<f64>,
    identity_error: f64,
    diag: KernelDiagnostic,
    prediction_residual_rel: f64,
}

fn trial(config: &ExperimentConfig, seed: u64, pairs: &[(DVector<f64>, DVector<f64>)]) -> Result<Vec<WidthResult>> {
    let w = &config.world;
    let m_max = *config.kernel.m_sweep.iter().max().expect("validated nonempty");
    let world = gen_world(w.entities, w.relations, w.density, derive_seed(seed, stream::WORLD))?;
    let dims = ModelDims::new(config.model.d, m_max, w.entities, w.relations)?;
    let full = init_params(dims, derive_seed(seed, stream::MODEL))?;
    let mut out = Vec::new();
    for &m in &config.kernel.m_sweep {
        let narrow = full.with_width(m)?;
        let errors = pair_errors(narrow.mlp_in(), pairs)?;
        let x = &pairs[0].0;
        let identity_error = mc_kernel_ratio_with(narrow.mlp_in(), x, x)? - 1.0;

        let t = ChainTrial::with_model(config, seed, world.clone(), &narrow)?;
        let c = t.chain;
        let prompt = c.two_hop();
        let lib = [&t.adapters[0], &t.adapters[1]];
        let delta = combine(&lib, &Combinator::Sum, None)?;
        let change = OutputVec(&forward(&t.params, &prompt, Some(&delta))?.0 - &forward(&t.params, &prompt, None)?.0);
        let (w1, w2) = c.directions(w.entities);
        let mix = mixture_decompose(&change, &w1, &w2)?;
        let pred = predict_two_hop(&t.params, c.x, c.r1, c.r2, &c.edit1, &c.edit2)?;
        let predicted = &w1.0 * pred.c1 + &w2.0 * pred.c2;
        let norm = change.norm();
        let prediction_residual_rel = if norm == 0.0 { 0.0 } else { (&change.0 - predicted).norm() / norm };
        let ratio_error = errors.iter().map(|e| e.abs()).sum::<f64>() / errors.len() as f64;
        out.push(WidthResult {
            m,
            errors,
            identity_error,
            diag: KernelDiagnostic {
                m,
                seed,
                ratio_error,
                residual_rel: mix.residual_rel,
                c1: pred.c1,
                c1_hat: mix.c1,
                c2: pred.c2,
                c2_hat: mix.c2,
            },
            prediction_residual_rel,
        });
    }
    Ok(out)
}

pub fn run_kernel_convergence(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let pairs = test_pairs(config.model.d, config.kernel.pairs, derive_seed(config.seed, stream::PAIRS));
    let trials = run_trials(config, |seed| trial(config, seed, &pairs))?;
    let mut report = new_report(config);
    for (seed, widths) in &trials {
        for r in widths {
            let v = format!("m={}", r.m);
            let abs_mean = r.diag.ratio_error;
            let rms = (r.errors.iter().map(|e| e * e).sum::<f64>() / r.errors.len() as f64).sqrt();
            report.push(*seed, &v, "ratio_error_mean_abs", abs_mean);
            report.push(*seed, &v, "ratio_error_rms", rms);
            report.push(*seed, &v, "identity_error", r.identity_error);
            for (i, e) in r.errors.iter().enumerate() {
                report.push(*seed, &v, format!("pair{i:02}_signed_error"), *e);
            }
            report.push(*seed, &v, "residual_rel", r.diag.residual_rel);
            report.push(*seed, &v, "prediction_residual_rel", r.prediction_residual_rel);
            report.push(*seed, &v, "c1_rel_error", (r.diag.c1_hat - r.diag.c1).abs() / r.diag.c1.abs());
            report.push(*seed, &v, "c2_rel_error", (r.diag.c2_hat - r.diag.c2).abs() / r.diag.c2.abs());
            report.kernel_diagnostics.push(r.diag.clone());
        }
    }
    report.compute_aggregates();

    let sweep = &config.kernel.m_sweep;
    let mut checks = Vec::new();
    for (i, &m) in sweep.iter().enumerate() {
        let per_seed: Vec<Vec<f64>> = trials.iter().map(|(_, w)| w[i].errors.clone()).collect();
        checks.push(summarize(m, &per_seed));
    }
    let ms: Vec<f64> = checks.iter().map(|c| c.m as f64).collect();
    let rms: Vec<f64> = checks.iter().map(|c| c.rms_error).collect();
    let (_, exponent) = fit_power_law(&ms, &rms)?;
    for c in &checks {
        report.derived.insert(format!("m={}.max_mean_abs_error", c.m), c.max_mean_abs_error);
        report.derived.insert(format!("m={}.rms_error", c.m), c.rms_error);
    }
    report.derived.insert("fitted_exponent".into(), exponent);
    let identity = trials.iter().flat_map(|(_, w)| w.iter().map(|r| r.identity_error.abs())).fold(0.0, f64::max);
    report.derived.insert("identity_error_max".into(), identity);

    let largest = checks.iter().max_by_key(|c| c.m).expect("nonempty sweep");
    report.check(
        format!("m={}.max_mean_abs_error", largest.m),
        "Monte-Carlo kernel ratio matches the arc-cosine kernel at the largest width",
        largest.max_mean_abs_error,
        Comparator::AtMost,
        config.tolerance("max_ratio_error"),
    );
    report.check(
        "fitted_exponent.lower",
        "ratio error decays like m^-1/2",
        exponent,
        Comparator::AtLeast,
        config.tolerance("min_exponent"),
    );
    report.check(
        "fitted_exponent.upper",
        "ratio error decays like m^-1/2",
        exponent,
        Comparator::AtMost,
        config.tolerance("max_exponent"),
    );
    report.check("identity_error_max", "x' = x gives ratio exactly 1", identity, Comparator::AtMost, 0.0);
    Ok(report)
}
