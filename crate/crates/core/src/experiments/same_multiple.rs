//! A two-fact `r2` adapter on the probes `x r1 r2` and `u r1 r2`.
//!
//! With edits `r2(y) → z` and `r2(v) → w`, the adapter's output change on
//! either probe is close to one common multiple of
//! `s = (i_z − i_{r2(y)}) + (i_w − i_{r2(v)})`.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::config::ExperimentConfig;
use super::report::{Comparator, ExperimentReport};
use super::{absorb, new_report, run_trials, TrialRows};
use crate::error::{Error, Result};
use crate::linalg::one_hot;
use crate::lora::{multi_fact_edit, Adapter, Edit, EditMode};
use crate::model::{features, init_params, ModelDims, ModelParams, WeightDelta};
use crate::rng::{self, derive_seed, stream};
use crate::world::{gen_world, EntityId, Prompt, RelationId, World};
use nalgebra::DVector;

/// `(ΔW φ)·s / ‖s‖²` for the probe `prompt`.
pub fn multiple_on_direction(params: &ModelParams, adapter: &Adapter, prompt: &Prompt, s: &DVector<f64>) -> Result<f64> {
    let change = adapter.apply(&features(params, prompt)?.0);
    Ok(change.dot(s) / s.norm_squared())
}

/// `|a − b| / mean(|a|, |b|)`, zero when both vanish.
pub fn relative_difference(a: f64, b: f64) -> f64 {
    let scale = 0.5 * (a.abs() + b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

struct Setup {
    x: EntityId,
    u: EntityId,
    edits: [Edit; 2],
    direction: DVector<f64>,
}

fn sample(world: &World, r2: RelationId, seed: u64) -> Result<Setup> {
    let n = world.num_entities();
    let mut rng = rng::rng(seed);
    let ents: Vec<EntityId> = world.entities().collect();
    for _ in 0..1000 {
        let mut pick = ents.clone();
        pick.shuffle(&mut rng);
        let (x, u) = (pick[0], pick[1]);
        let (y, v) = (pick[2], pick[3]);
        let (Some(by), Some(bv)) = (world.get(r2, y), world.get(r2, v)) else { continue };
        if by == bv {
            continue;
        }
        let rest: Vec<EntityId> = ents.iter().copied().filter(|&e| e != by && e != bv).collect();
        let z = rest[rng.random_range(0..rest.len())];
        let w = rest[rng.random_range(0..rest.len())];
        if z == w {
            continue;
        }
        let direction = one_hot(n, z.0) - one_hot(n, by.0) + one_hot(n, w.0) - one_hot(n, bv.0);
        let edits = [
            Edit { prompt: Prompt::one_hop(y, r2), old_target: Some(by), new_target: z },
            Edit { prompt: Prompt::one_hop(v, r2), old_target: Some(bv), new_target: w },
        ];
        return Ok(Setup { x, u, edits, direction });
    }
    Err(Error::param("could not sample distinct edit targets; world too small"))
}

fn trial(config: &ExperimentConfig, seed: u64) -> Result<TrialRows> {
    let w = &config.world;
    let world = gen_world(w.entities, w.relations, w.density, derive_seed(seed, stream::WORLD))?;
    let dims = ModelDims::new(config.model.d, config.model.m, w.entities, w.relations)?;
    let params = init_params(dims, derive_seed(seed, stream::MODEL))?.fitted(&world.one_hop_facts(), config.model.ridge)?;
    let (r1, r2) = (RelationId(config.chain.r1), RelationId(config.chain.r2));
    let s = sample(&world, r2, derive_seed(seed, stream::CHAIN))?;
    let adapter = multi_fact_edit(&params, &s.edits, EditMode::PaperStrict)?;
    let mut rows = TrialRows::default();
    rows.put("r2_adapter", "direction_norm_sq", s.direction.norm_squared());
    let a = multiple_on_direction(&params, &adapter, &Prompt::two_hop(s.x, r1, r2), &s.direction)?;
    let b = multiple_on_direction(&params, &adapter, &Prompt::two_hop(s.u, r1, r2), &s.direction)?;
    rows.put("r2_adapter", "multiple_x", a);
    rows.put("r2_adapter", "multiple_u", b);
    rows.put("r2_adapter", "relative_difference", relative_difference(a, b));
    // Fraction of the change on each probe not explained by the common direction.
    for (name, probe) in [("x", s.x), ("u", s.u)] {
        let change = adapter.apply(&features(&params, &Prompt::two_hop(probe, r1, r2))?.0);
        let along = &s.direction * (change.dot(&s.direction) / s.direction.norm_squared());
        let norm = change.norm();
        rows.put("r2_adapter", format!("off_direction_{name}"), if norm == 0.0 { 0.0 } else { (&change - along).norm() / norm });
    }
    Ok(rows)
}

pub fn run_same_multiple(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let trials = run_trials(config, |seed| trial(config, seed))?;
    let mut report = new_report(config);
    absorb(&mut report, trials);
    report.compute_aggregates();
    let diff = report.mean("r2_adapter", "relative_difference").unwrap_or(f64::NAN);
    report.check(
        "r2_adapter.relative_difference",
        "the r2 adapter adds the same multiple of its edit directions on both probes",
        diff,
        Comparator::AtMost,
        config.tolerance("max_relative_difference"),
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_probes_have_zero_difference() {
        let world = gen_world(8, 2, 1.0, 1).unwrap();
        let params = init_params(ModelDims::new(16, 256, 8, 2).unwrap(), 2).unwrap().fitted(&world.one_hop_facts(), 1e-10).unwrap();
        let s = sample(&world, RelationId(1), 3).unwrap();
        let adapter = multi_fact_edit(&params, &s.edits, EditMode::PaperStrict).unwrap();
        let p = Prompt::two_hop(s.x, RelationId(0), RelationId(1));
        let a = multiple_on_direction(&params, &adapter, &p, &s.direction).unwrap();
        let b = multiple_on_direction(&params, &adapter, &p, &s.direction).unwrap();
        assert_eq!(relative_difference(a, b), 0.0);
        assert_eq!(s.direction.norm_squared(), 4.0);
    }

    #[test]
    fn relative_difference_examples() {
        assert_eq!(relative_difference(0.0, 0.0), 0.0);
        assert_eq!(relative_difference(1.0, 3.0), 1.0);
        assert_eq!(relative_difference(2.0, 2.0), 0.0);
    }
}
