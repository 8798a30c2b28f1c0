//! Summed one-hop adapters on the two-hop prompt.

use super::chain::ChainTrial;
use super::config::ExperimentConfig;
use super::report::{Comparator, ExperimentReport};
use super::{absorb, bool_value, combinator_label, new_report, resolve_combinator, run_trials, TrialRows};
use crate::error::Result;
use crate::kernel::{mixture_decompose, predict_two_hop};
use crate::model::{forward, recall_with, OutputVec, WeightDelta};
use crate::routing::{arrow_query, combine, Combinator, RoutedDelta};

fn trial(config: &ExperimentConfig, seed: u64) -> Result<TrialRows> {
    let t = ChainTrial::new(config, seed)?;
    let mut rows = TrialRows::default();
    let n = config.world.entities;
    let c = t.chain;
    let prompt = c.two_hop();
    let base = forward(&t.params, &prompt, None)?;
    if let Some(old) = t.world.answer(&prompt) {
        rows.put("base", "two_hop_base_recall", bool_value(base.predicts(old)));
    }
    let (w1, w2) = c.directions(n);
    let pred = predict_two_hop(&t.params, c.x, c.r1, c.r2, &c.edit1, &c.edit2)?;
    let lib = [&t.adapters[0], &t.adapters[1]];
    let edited = [(c.edit1.prompt(), c.edit1.new_target), (c.edit2.prompt(), c.edit2.new_target)];

    for comb in &config.combinators {
        let label = combinator_label(comb);
        let (resolved, degenerate) = resolve_combinator(&t.params, &lib, comb)?;
        let query = match comb {
            Combinator::Arrow { activation, .. } => Some(arrow_query(&t.params, &prompt, *activation)?),
            _ => None,
        };
        let delta: RoutedDelta = combine(&lib, &resolved, query.as_ref())?;
        let out = forward(&t.params, &prompt, Some(&delta))?;
        rows.put(&label, "two_hop_accuracy", bool_value(out.predicts(c.z)));
        let contribution = OutputVec(&out.0 - &base.0);
        let mix = mixture_decompose(&contribution, &w1, &w2)?;
        rows.put(&label, "c1_hat", mix.c1);
        rows.put(&label, "c2_hat", mix.c2);
        rows.put(&label, "residual_rel", mix.residual_rel);
        if matches!(comb, Combinator::Cat { weights } if weights.is_empty()) {
            rows.put(&label, "cat_fit_degenerate", bool_value(degenerate));
        }
        for (i, w) in delta.weights.iter().enumerate() {
            rows.put(&label, format!("weight_{i}"), *w);
        }
        // Edited one-hop facts need each adapter's own prompt to route to it,
        // so Arrow is scored with per-prompt queries.
        let mut hits = 0;
        for (p, target) in &edited {
            let d = match comb {
                Combinator::Arrow { activation, .. } => {
                    combine(&lib, &resolved, Some(&arrow_query(&t.params, p, *activation)?))?
                }
                _ => delta.clone(),
            };
            hits += usize::from(forward(&t.params, p, Some(&d as &dyn WeightDelta))?.predicts(*target));
        }
        rows.put(&label, "edited_accuracy", hits as f64 / edited.len() as f64);
        if *comb == Combinator::Sum {
            let rel = |hat: f64, c: f64| (hat - c).abs() / c.abs();
            rows.put("sum", "c1_kernel", pred.c1);
            rows.put("sum", "c2_kernel", pred.c2);
            rows.put("sum", "c1_rel_error", rel(mix.c1, pred.c1));
            rows.put("sum", "c2_rel_error", rel(mix.c2, pred.c2));
            let predicted = &w1.0 * pred.c1 + &w2.0 * pred.c2;
            let norm = contribution.norm();
            rows.put("sum", "prediction_residual_rel", if norm == 0.0 { 0.0 } else { (&contribution.0 - predicted).norm() / norm });
        }
    }

    let oracle = t.oracle_adapter()?;
    let out = forward(&t.params, &prompt, Some(&oracle))?;
    rows.put("oracle", "two_hop_accuracy", bool_value(out.predicts(c.z)));
    let facts = t.world.one_hop_facts();
    rows.put("oracle", "one_hop_retention", recall_with(&t.params, &facts, Some(&oracle))?.accuracy);
    Ok(rows)
}

pub fn run_theorem1(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let trials = run_trials(config, |seed| trial(config, seed))?;
    let mut report = new_report(config);
    absorb(&mut report, trials);
    report.compute_aggregates();

    let max_acc = config.tolerance("max_two_hop_accuracy");
    for comb in &config.combinators {
        let label = combinator_label(comb);
        let acc = report.mean(&label, "two_hop_accuracy").unwrap_or(f64::NAN);
        report.check(
            format!("{label}.two_hop_accuracy"),
            format!("combining the two one-hop adapters with {label} does not compose"),
            acc,
            Comparator::AtMost,
            max_acc,
        );
    }
    let oracle = report.mean("oracle", "two_hop_accuracy").unwrap_or(f64::NAN);
    report.check(
        "oracle.two_hop_accuracy",
        "a rank-one edit on the two-hop prompt itself answers it",
        oracle,
        Comparator::AtLeast,
        config.tolerance("min_oracle_accuracy"),
    );
    if config.combinators.contains(&Combinator::Sum) {
        let residual = report.mean("sum", "residual_rel").unwrap_or(f64::NAN);
        report.check(
            "sum.residual_rel",
            "summed output change lies in span{i_y - i_r1(x), i_z - i_r2(y)}",
            residual,
            Comparator::AtMost,
            config.tolerance("max_residual_rel"),
        );
        for k in ["c1", "c2"] {
            let errs = report.values("sum", &format!("{k}_rel_error"));
            let worst = errs.iter().copied().fold(0.0, f64::max);
            report.derived.insert(format!("sum.{k}_rel_error_mean"), errs.iter().sum::<f64>() / errs.len() as f64);
            report.check(
                format!("sum.{k}_rel_error"),
                format!("{k} matches the arc-cosine kernel prediction in every trial"),
                worst,
                Comparator::AtMost,
                config.tolerance("max_coefficient_rel_error"),
            );
        }
    }
    Ok(report)
}
