//! The edited chain `x →r1 y →r2 z` shared by the composition experiments.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::lora::{rank_one_edit, Adapter, EditMode};
use crate::model::{init_params, ModelDims, ModelParams, OutputVec};
use crate::rng::{self, derive_seed, stream};
use crate::world::{gen_world, EntityId, FactEdit, Prompt, RelationId, World};

/// Edits `r1(x): a → y` and `r2(y): b → z`, so the edited composition sends
/// `x` to `z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Chain {
    pub x: EntityId,
    pub y: EntityId,
    pub z: EntityId,
    pub r1: RelationId,
    pub r2: RelationId,
    pub edit1: FactEdit,
    pub edit2: FactEdit,
}

impl Chain {
    pub fn two_hop(&self) -> Prompt {
        Prompt::two_hop(self.x, self.r1, self.r2)
    }

    /// `i_y − i_{r1(x)}` and `i_z − i_{r2(y)}`.
    pub fn directions(&self, n: usize) -> (OutputVec, OutputVec) {
        let d = |e: &FactEdit| {
            OutputVec(crate::linalg::one_hot(n, e.new_target.0) - crate::linalg::one_hot(n, e.old_target.0))
        };
        (d(&self.edit1), d(&self.edit2))
    }
}

/// Samples a chain with `y ≠ r1(x)`, `z ∉ {r2(y), r2(r1(x))}` and linearly
/// independent directions. Subjects lacking the needed facts are skipped.
pub fn sample_chain(world: &World, r1: RelationId, r2: RelationId, seed: u64) -> Result<Chain> {
    let mut rng = rng::rng(seed);
    let mut xs = world.subjects_of(r1);
    xs.shuffle(&mut rng);
    let ys_all = world.subjects_of(r2);
    for x in xs {
        let a = world.get(r1, x).expect("x is a subject of r1");
        let ys: Vec<EntityId> = ys_all.iter().copied().filter(|&y| y != a).collect();
        if ys.is_empty() {
            continue;
        }
        let y = ys[rng.random_range(0..ys.len())];
        let b = world.get(r2, y).expect("y is a subject of r2");
        let old_two_hop = world.get(r2, a);
        let zs: Vec<EntityId> =
            world
                .entities()
                .filter(|&z| z != b && Some(z) != old_two_hop)
                .filter(|&z| !(y == b && a == z) && !(y == z && a == b))
                .collect();
        if zs.is_empty() {
            continue;
        }
        let z = zs[rng.random_range(0..zs.len())];
        return Ok(Chain {
            x,
            y,
            z,
            r1,
            r2,
            edit1: FactEdit { rel: r1, subject: x, old_target: a, new_target: y },
            edit2: FactEdit { rel: r2, subject: y, old_target: b, new_target: z },
        });
    }
    Err(Error::param(format!("world has no admissible chain for {r1} then {r2}")))
}

/// One trial of a chain experiment: world, fitted base model, edited chain
/// and the two one-hop adapters.
#[derive(Clone, Debug)]
pub struct ChainTrial {
    pub world: World,
    pub params: ModelParams,
    pub chain: Chain,
    pub adapters: [Adapter; 2],
}

/// Base facts for the chain experiments: every one-hop fact plus the stored
/// compositions `x r1 r2`.
pub fn base_facts(world: &World, r1: RelationId, r2: RelationId) -> Vec<(Prompt, EntityId)> {
    let mut facts = world.one_hop_facts();
    facts.extend(world.two_hop_facts(r1, r2));
    facts
}

impl ChainTrial {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let w = &config.world;
        let world = gen_world(w.entities, w.relations, w.density, derive_seed(seed, stream::WORLD))?;
        let dims = ModelDims::new(config.model.d, config.model.m, w.entities, w.relations)?;
        let params = init_params(dims, derive_seed(seed, stream::MODEL))?;
        Self::with_model(config, seed, world, &params)
    }

    /// Builds the trial on given frozen weights (any readout is replaced).
    pub fn with_model(config: &ExperimentConfig, seed: u64, world: World, params: &ModelParams) -> Result<Self> {
        let (r1, r2) = (RelationId(config.chain.r1), RelationId(config.chain.r2));
        let params = params.fitted(&base_facts(&world, r1, r2), config.model.ridge)?;
        let chain = sample_chain(&world, r1, r2, derive_seed(seed, stream::CHAIN))?;
        let edit = |e: &FactEdit| {
            rank_one_edit(&params, &e.prompt(), Some(e.old_target), e.new_target, EditMode::ExactRedirect)
        };
        let adapters = [edit(&chain.edit1)?, edit(&chain.edit2)?];
        Ok(ChainTrial { world, params, chain, adapters })
    }

    /// Rank-one edit on the two-hop prompt itself, sending it to `z`.
    pub fn oracle_adapter(&self) -> Result<Adapter> {
        let p = self.chain.two_hop();
        rank_one_edit(&self.params, &p, self.world.answer(&p), self.chain.z, EditMode::ExactRedirect)
    }
}
