//! Single-fact edits: does the edited fact change, and do the others stay?

use nalgebra::DMatrix;

use super::config::ExperimentConfig;
use super::report::{Comparator, ExperimentReport};
use super::{absorb, new_report, run_trials, TrialRows};
use crate::error::Result;
use crate::linalg::one_hot;
use crate::lora::{rank_one_edit, EditMode};
use crate::model::{forward, init_params, recall_accuracy, recall_with, ModelDims, ModelParams, RecallReport};
use crate::rng::{derive_seed, stream};
use crate::world::{gen_edits, gen_world, EntityId, FactEdit, Prompt, RelationId, World};

/// Edited-fact hit and accuracy on every other stored fact for one edit.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct EditOutcome {
    pub edited: bool,
    pub retention: RecallReport,
    /// Paper-strict only: max entry gap to an independent dense recomputation.
    pub closed_form_error: Option<f64>,
}

/// `(1/‖φ‖²)(i_new − i_old)φᵀ` from the raw matrices, without the model helpers.
fn dense_strict_delta(params: &ModelParams, edit: &FactEdit) -> DMatrix<f64> {
    let n = params.dims().num_entities;
    let e = params.embeddings();
    let mut h = params.value() * e.row(edit.subject.0).transpose();
    h += e.row(n + edit.rel.0).transpose();
    let phi = (params.mlp_in() * h).map(|v| if v > 0.0 { v } else { 0.0 });
    let w = one_hot(n, edit.new_target.0) - one_hot(n, edit.old_target.0);
    w * phi.transpose() / phi.dot(&phi)
}

pub(crate) fn apply_edit(
    params: &ModelParams,
    facts: &[(Prompt, EntityId)],
    edit: &FactEdit,
    mode: EditMode,
) -> Result<EditOutcome> {
    let prompt = edit.prompt();
    let adapter = rank_one_edit(params, &prompt, Some(edit.old_target), edit.new_target, mode)?;
    let edited = forward(params, &prompt, Some(&adapter))?.predicts(edit.new_target);
    let others: Vec<_> = facts.iter().filter(|(p, _)| *p != prompt).cloned().collect();
    let retention = recall_with(params, &others, Some(&adapter))?;
    let closed_form_error =
        (mode == EditMode::PaperStrict).then(|| (adapter.delta() - dense_strict_delta(params, edit)).amax());
    Ok(EditOutcome { edited, retention, closed_form_error })
}

/// `count` edits spread round-robin over the relations.
fn pick_edits(world: &World, count: usize, seed: u64) -> Result<Vec<FactEdit>> {
    let r = world.num_relations();
    let mut per_rel = Vec::new();
    for rel in 0..r {
        let want = count.div_ceil(r).min(world.subjects_of(RelationId(rel)).len());
        per_rel.push(gen_edits(world, RelationId(rel), want, derive_seed(seed, rel as u64))?);
    }
    let mut out = Vec::with_capacity(count);
    let rounds = per_rel.iter().map(Vec::len).max().unwrap_or(0);
    'fill: for i in 0..rounds {
        for edits in &per_rel {
            if out.len() == count {
                break 'fill;
            }
            if let Some(e) = edits.get(i) {
                out.push(*e);
            }
        }
    }
    Ok(out)
}

fn trial(config: &ExperimentConfig, seed: u64) -> Result<TrialRows> {
    let w = &config.world;
    let world = gen_world(w.entities, w.relations, w.density, derive_seed(seed, stream::WORLD))?;
    let dims = ModelDims::new(config.model.d, config.model.m, w.entities, w.relations)?;
    let facts = world.one_hop_facts();
    let params = init_params(dims, derive_seed(seed, stream::MODEL))?.fitted(&facts, config.model.ridge)?;
    let mut rows = TrialRows::default();
    let base = recall_accuracy(&params, &facts)?;
    rows.put("base", "recall_accuracy", base.accuracy);
    rows.put("base", "ties", base.ties as f64);
    let edits = pick_edits(&world, config.edits.count, derive_seed(seed, stream::EDITS))?;
    if edits.is_empty() {
        return Ok(rows);
    }
    for &mode in &config.edits.modes {
        let outcomes: Vec<EditOutcome> =
            edits.iter().map(|e| apply_edit(&params, &facts, e, mode)).collect::<Result<_>>()?;
        let k = outcomes.len() as f64;
        let m = mode.as_str();
        rows.put(m, "edited_accuracy", outcomes.iter().filter(|o| o.edited).count() as f64 / k);
        rows.put(m, "retention", outcomes.iter().map(|o| o.retention.accuracy).sum::<f64>() / k);
        rows.put(m, "retention_min", outcomes.iter().map(|o| o.retention.accuracy).fold(1.0, f64::min));
        rows.put(m, "flipped_facts", outcomes.iter().map(|o| o.retention.total as f64 * (1.0 - o.retention.accuracy)).sum());
        if mode == EditMode::PaperStrict {
            let worst = outcomes.iter().filter_map(|o| o.closed_form_error).fold(0.0, f64::max);
            rows.put(m, "closed_form_error", worst);
        }
    }
    Ok(rows)
}

pub fn run_edit_locality(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let trials = run_trials(config, |seed| trial(config, seed))?;
    let mut report = new_report(config);
    absorb(&mut report, trials);
    report.compute_aggregates();
    let base = report.values("base", "recall_accuracy").into_iter().fold(1.0, f64::min);
    report.check(
        "base.recall_accuracy",
        "the fitted readout stores every one-hop fact",
        base,
        Comparator::AtLeast,
        config.tolerance("min_base_accuracy"),
    );
    if config.edits.count == 0 {
        return Ok(report);
    }
    for &mode in &config.edits.modes {
        let m = mode.as_str();
        report.check(
            format!("{m}.edited_accuracy"),
            "a rank-one edit changes its fact",
            report.mean(m, "edited_accuracy").unwrap_or(f64::NAN),
            Comparator::AtLeast,
            config.tolerance("min_edited_accuracy"),
        );
        report.check(
            format!("{m}.retention"),
            "a rank-one edit leaves the other facts intact",
            report.mean(m, "retention").unwrap_or(f64::NAN),
            Comparator::AtLeast,
            config.tolerance("min_retention"),
        );
        if mode == EditMode::PaperStrict {
            let worst = report.values(m, "closed_form_error").into_iter().fold(0.0, f64::max);
            report.check(
                format!("{m}.closed_form_error"),
                "stored factors equal (1/|phi|^2)(i_new - i_old) phi^T entrywise",
                worst,
                Comparator::AtMost,
                config.tolerance("max_strict_closed_form_error"),
            );
        }
    }
    Ok(report)
}
