//! Ten-adapter library on the three-partition graph, evaluated on the
//! held-out composition.

use super::config::ExperimentConfig;
use super::report::{Comparator, ExperimentReport};
use super::{absorb, combinator_label, new_report, resolve_combinator, run_trials, TrialRows};
use crate::error::Result;
use crate::lora::{multi_fact_edit, Adapter, Edit, EditMode};
use crate::model::{forward, init_params, recall_with, ModelDims, ModelParams};
use crate::rng::{derive_seed, stream};
use crate::routing::{arrow_prototypes, arrow_query, combine, combine_routed, Combinator};
use crate::world::{compose, gen_graph_config, EntityId, GraphMode, Prompt, World};

fn mode_name(m: GraphMode) -> &'static str {
    match m {
        GraphMode::Disjoint => "disjoint",
        GraphMode::Shared => "shared",
    }
}

fn adapter_on(params: &ModelParams, examples: &[(Prompt, EntityId)]) -> Result<Adapter> {
    let edits: Vec<Edit> =
        examples.iter().map(|&(prompt, t)| Edit { prompt, old_target: None, new_target: t }).collect();
    multi_fact_edit(params, &edits, EditMode::ExactRedirect)
}

fn composition_examples(world: &World, (a, b): (crate::world::RelationId, crate::world::RelationId)) -> Vec<(Prompt, EntityId)> {
    compose(world, a, b).into_iter().map(|(x, z)| (Prompt::two_hop(x, a, b), z)).collect()
}

fn trial_mode(config: &ExperimentConfig, seed: u64, mode: GraphMode, rows: &mut TrialRows) -> Result<()> {
    let name = mode_name(mode);
    let graph = gen_graph_config(mode, config.graph.partition_sizes, derive_seed(seed, stream::WORLD))?;
    let world = graph.world()?;
    let dims = ModelDims::new(config.model.d, config.model.m, graph.num_entities(), 5)?;
    let params = init_params(dims, derive_seed(seed, stream::MODEL))?;

    let mut library = Vec::new();
    for &rel in &graph.atomic_relations {
        let facts: Vec<_> = world.subjects_of(rel).into_iter().map(|x| (Prompt::one_hop(x, rel), world.get(rel, x).unwrap())).collect();
        library.push(adapter_on(&params, &facts)?);
    }
    let mut self_acc = Vec::new();
    for &comp in &graph.trained_compositions {
        let examples = composition_examples(&world, comp);
        let a = adapter_on(&params, &examples)?;
        self_acc.push(recall_with(&params, &examples, Some(&a))?.accuracy);
        library.push(a);
    }
    rows.put(name, "self_accuracy", self_acc.iter().copied().fold(1.0, f64::min));
    let held_out = composition_examples(&world, graph.held_out_composition);
    rows.put(name, "held_out_prompts", held_out.len() as f64);
    let lib: Vec<&Adapter> = library.iter().collect();

    for comb in &config.combinators {
        let label = combinator_label(comb);
        let (resolved, _) = resolve_combinator(&params, &lib, comb)?;
        let (fixed, protos) = match comb {
            Combinator::Arrow { .. } => (None, arrow_prototypes(&lib)?),
            _ => (Some(combine(&lib, &resolved, None)?), Vec::new()),
        };
        let mut hits = 0;
        for (prompt, target) in &held_out {
            let out = match (&fixed, comb) {
                (Some(d), _) => forward(&params, prompt, Some(d))?,
                (None, Combinator::Arrow { activation, .. }) => {
                    let q = arrow_query(&params, prompt, *activation)?;
                    forward(&params, prompt, Some(&combine_routed(&lib, &resolved, Some(&q), &protos)?))?
                }
                (None, _) => unreachable!("only arrow is routed per prompt"),
            };
            hits += usize::from(out.predicts(*target));
        }
        rows.put(format!("{name}/{label}"), "held_out_accuracy", hits as f64 / held_out.len().max(1) as f64);
    }
    Ok(())
}

pub fn run_graph_library(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let trials = run_trials(config, |seed| {
        let mut rows = TrialRows::default();
        for &mode in &config.graph.modes {
            trial_mode(config, seed, mode, &mut rows)?;
        }
        Ok(rows)
    })?;
    let mut report = new_report(config);
    absorb(&mut report, trials);
    report.compute_aggregates();

    let max_acc = config.tolerance("max_held_out_accuracy");
    for &mode in &config.graph.modes {
        let name = mode_name(mode);
        for comb in &config.combinators {
            let variant = format!("{name}/{}", combinator_label(comb));
            let acc = report.mean(&variant, "held_out_accuracy").unwrap_or(f64::NAN);
            report.check(
                format!("{variant}.held_out_accuracy"),
                "the library does not generalize to the unseen composition",
                acc,
                Comparator::AtMost,
                max_acc,
            );
        }
        let self_acc = report.values(name, "self_accuracy").into_iter().fold(1.0, f64::min);
        report.check(
            format!("{name}.self_accuracy"),
            "each composition adapter reproduces its own prompts",
            self_acc,
            Comparator::AtLeast,
            config.tolerance("min_self_accuracy"),
        );
    }
    if config.graph.modes.contains(&GraphMode::Disjoint) && config.graph.modes.contains(&GraphMode::Shared) {
        for comb in &config.combinators {
            let label = combinator_label(comb);
            let d = report.mean(&format!("disjoint/{label}"), "held_out_accuracy").unwrap_or(f64::NAN);
            let s = report.mean(&format!("shared/{label}"), "held_out_accuracy").unwrap_or(f64::NAN);
            report.check(
                format!("{label}.mode_gap"),
                "entity sharing does not change held-out accuracy much",
                (d - s).abs(),
                Comparator::AtMost,
                config.tolerance("max_mode_gap"),
            );
        }
    }
    Ok(report)
}
