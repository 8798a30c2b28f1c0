//! Two-adapter library versus the same library plus the oracle adapter.

use super::chain::ChainTrial;
use super::config::ExperimentConfig;
use super::report::{Comparator, ExperimentReport};
use super::{absorb, bool_value, combinator_label, new_report, resolve_combinator, run_trials, TrialRows};
use crate::error::Result;
use crate::lora::Adapter;
use crate::model::forward;
use crate::routing::{arrow_query, combine, Combinator};

fn trial(config: &ExperimentConfig, seed: u64) -> Result<TrialRows> {
    let t = ChainTrial::new(config, seed)?;
    let mut rows = TrialRows::default();
    let prompt = t.chain.two_hop();
    let oracle = t.oracle_adapter()?;
    rows.put("oracle", "two_hop_accuracy", bool_value(forward(&t.params, &prompt, Some(&oracle))?.predicts(t.chain.z)));

    let libraries: [(&str, Vec<&Adapter>); 2] =
        [("lib2", vec![&t.adapters[0], &t.adapters[1]]), ("lib3", vec![&t.adapters[0], &t.adapters[1], &oracle])];
    for comb in &config.combinators {
        let label = combinator_label(comb);
        let query = match comb {
            Combinator::Arrow { activation, .. } => Some(arrow_query(&t.params, &prompt, *activation)?),
            _ => None,
        };
        for (name, lib) in &libraries {
            let variant = format!("{name}/{label}");
            let (resolved, _) = resolve_combinator(&t.params, lib, comb)?;
            let delta = combine(lib, &resolved, query.as_ref())?;
            let out = forward(&t.params, &prompt, Some(&delta))?;
            rows.put(&variant, "two_hop_accuracy", bool_value(out.predicts(t.chain.z)));
            if matches!(comb, Combinator::Arrow { .. }) {
                for (i, w) in delta.weights.iter().enumerate() {
                    rows.put(&variant, format!("weight_{i}"), *w);
                }
                if lib.len() == 3 {
                    rows.put(&variant, "oracle_weight", delta.weights[2]);
                }
            }
        }
        if let Combinator::Arrow { .. } = comb {
            let single = [&t.adapters[0]];
            let a = combine(&single, comb, query.as_ref())?.delta();
            let b = combine(&single, &Combinator::Cat { weights: vec![1.0] }, None)?.delta();
            rows.put(format!("single/{label}"), "bit_equal_to_cat", bool_value(a == b));
        }
    }
    Ok(rows)
}

pub fn run_library_comparison(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let trials = run_trials(config, |seed| trial(config, seed))?;
    let mut report = new_report(config);
    absorb(&mut report, trials);
    report.compute_aggregates();

    let max_acc = config.tolerance("max_two_hop_accuracy");
    for comb in &config.combinators {
        let label = combinator_label(comb);
        let acc = report.mean(&format!("lib2/{label}"), "two_hop_accuracy").unwrap_or(f64::NAN);
        report.check(
            format!("lib2/{label}.two_hop_accuracy"),
            "without the oracle adapter no combination composes",
            acc,
            Comparator::AtMost,
            max_acc,
        );
        if let Combinator::Arrow { .. } = comb {
            let two = report.value_by_seed(&format!("lib2/{label}"), "two_hop_accuracy");
            let three = report.value_by_seed(&format!("lib3/{label}"), "two_hop_accuracy");
            let dominated = two.iter().filter(|(s, v)| three.get(s).is_some_and(|t| t >= v)).count();
            report.check(
                format!("lib3/{label}.dominates_lib2"),
                "adding the oracle adapter never hurts routed accuracy (fraction of seeds)",
                dominated as f64 / two.len().max(1) as f64,
                Comparator::AtLeast,
                1.0,
            );
            if let Some(w) = report.mean(&format!("lib3/{label}"), "oracle_weight") {
                report.derived.insert(format!("lib3/{label}.oracle_weight_mean"), w);
            }
            let eq = report.values(&format!("single/{label}"), "bit_equal_to_cat");
            report.check(
                format!("single/{label}.bit_equal_to_cat"),
                "a one-adapter library routes to exactly that adapter",
                eq.iter().copied().fold(1.0, f64::min),
                Comparator::AtLeast,
                1.0,
            );
        }
    }
    let oracle = report.mean("oracle", "two_hop_accuracy").unwrap_or(f64::NAN);
    report.check(
        "oracle.two_hop_accuracy",
        "the oracle adapter alone answers the two-hop prompt",
        oracle,
        Comparator::AtLeast,
        config.tolerance("min_oracle_accuracy"),
    );
    Ok(report)
}
