//! Benchmark fixtures.

use lora_compose::{
    gen_world, init_params, rank_one_edit, Adapter, EditMode, EntityId, ModelDims, ModelParams, Prompt, World,
};

/// A fitted model on a dense 30-entity, 4-relation world.
pub struct Fixture {
    pub world: World,
    pub params: ModelParams,
}

impl Fixture {
    pub fn new(d: usize, m: usize, seed: u64) -> Self {
        let world = gen_world(30, 4, 1.0, seed).expect("world");
        let params = init_params(ModelDims::new(d, m, 30, 4).expect("dims"), seed)
            .expect("params")
            .fitted(&world.one_hop_facts(), 1e-8)
            .expect("fit");
        Fixture { world, params }
    }

    pub fn prompts(&self, count: usize) -> Vec<Prompt> {
        self.world.one_hop_facts().into_iter().take(count).map(|(p, _)| p).collect()
    }

    /// `count` exact-redirect adapters, each moving one stored fact to the next entity.
    pub fn library(&self, count: usize) -> Vec<Adapter> {
        self.world
            .one_hop_facts()
            .into_iter()
            .take(count)
            .map(|(p, y)| {
                rank_one_edit(&self.params, &p, Some(y), EntityId((y.0 + 1) % 30), EditMode::ExactRedirect)
                    .expect("edit")
            })
            .collect()
    }
}
