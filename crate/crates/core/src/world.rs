//! Synthetic universes: entities, partial-function relations, prompts, fact
//! edits, and adapter-library layouts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::routing::Combinator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub usize);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Token sequence fed to the model: `X REL` or `X REL1 REL2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prompt {
    OneHop {
        subject: EntityId,
        rel: RelationId,
    },
    TwoHop {
        subject: EntityId,
        rel1: RelationId,
        rel2: RelationId,
    },
}

impl Prompt {
    pub fn one_hop(subject: EntityId, rel: RelationId) -> Self {
        Prompt::OneHop { subject, rel }
    }

    pub fn two_hop(subject: EntityId, rel1: RelationId, rel2: RelationId) -> Self {
        Prompt::TwoHop { subject, rel1, rel2 }
    }

    pub fn subject(&self) -> EntityId {
        match *self {
            Prompt::OneHop { subject, .. } | Prompt::TwoHop { subject, .. } => subject,
        }
    }

    pub fn relations(&self) -> Vec<RelationId> {
        match *self {
            Prompt::OneHop { rel, .. } => vec![rel],
            Prompt::TwoHop { rel1, rel2, .. } => vec![rel1, rel2],
        }
    }

    pub fn check_range(&self, num_entities: usize, num_relations: usize) -> Result<()> {
        if self.subject().0 >= num_entities {
            return Err(Error::param(format!("{self}: subject out of range ({num_entities} entities)")));
        }
        if self.relations().iter().any(|r| r.0 >= num_relations) {
            return Err(Error::param(format!("{self}: relation out of range ({num_relations} relations)")));
        }
        Ok(())
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prompt::OneHop { subject, rel } => write!(f, "{subject} {rel}"),
            Prompt::TwoHop { subject, rel1, rel2 } => write!(f, "{subject} {rel1} {rel2}"),
        }
    }
}

/// Parses `"3 1"` / `"x3 r1 r2"` style prompts.
impl FromStr for Prompt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        fn num(tok: &str, prefix: char) -> Result<usize> {
            tok.trim_start_matches(prefix)
                .parse()
                .map_err(|_| Error::Parse(format!("bad prompt token `{tok}`")))
        }
        let toks: Vec<&str> = s.split(|c: char| c.is_whitespace() || c == ':').filter(|t| !t.is_empty()).collect();
        match toks.as_slice() {
            [x, r] => Ok(Prompt::one_hop(EntityId(num(x, 'x')?), RelationId(num(r, 'r')?))),
            [x, r1, r2] => Ok(Prompt::two_hop(
                EntityId(num(x, 'x')?),
                RelationId(num(r1, 'r')?),
                RelationId(num(r2, 'r')?),
            )),
            _ => Err(Error::Parse(format!("prompt `{s}` must have 2 or 3 tokens"))),
        }
    }
}

/// Entity/relation universe. Each relation is a partial function on entities.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct World {
    num_entities: usize,
    num_relations: usize,
    facts: BTreeMap<(RelationId, EntityId), EntityId>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    num_entities: usize,
    relations: Vec<RelationId>,
    facts: Vec<FactRecord>,
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRecord {
    pub rel: RelationId,
    pub subject: EntityId,
    pub target: EntityId,
}

impl World {
    pub fn new(num_entities: usize, num_relations: usize, seed: u64) -> Result<Self> {
        if num_entities < 2 {
            return Err(Error::param(format!("num_entities must be >= 2, got {num_entities}")));
        }
        if num_relations < 1 {
            return Err(Error::param("num_relations must be >= 1"));
        }
        Ok(World { num_entities, num_relations, facts: BTreeMap::new(), seed })
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn relations(&self) -> impl Iterator<Item = RelationId> {
        (0..self.num_relations).map(RelationId)
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> {
        (0..self.num_entities).map(EntityId)
    }

    pub fn num_facts(&self) -> usize {
        self.facts.len()
    }

    /// Adds `rel(subject) = target`; rejects a second target for the same pair.
    pub fn insert_fact(&mut self, rel: RelationId, subject: EntityId, target: EntityId) -> Result<()> {
        if rel.0 >= self.num_relations || subject.0 >= self.num_entities || target.0 >= self.num_entities {
            return Err(Error::param(format!("fact ({rel}, {subject}) -> {target} out of range")));
        }
        match self.facts.entry((rel, subject)) {
            std::collections::btree_map::Entry::Occupied(_) => Err(Error::param(format!(
                "relation {rel} already defined on {subject}"
            ))),
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(target);
                Ok(())
            }
        }
    }

    pub fn get(&self, rel: RelationId, subject: EntityId) -> Option<EntityId> {
        self.facts.get(&(rel, subject)).copied()
    }

    pub fn facts(&self) -> impl Iterator<Item = FactRecord> + '_ {
        self.facts.iter().map(|(&(rel, subject), &target)| FactRecord { rel, subject, target })
    }

    pub fn subjects_of(&self, rel: RelationId) -> Vec<EntityId> {
        self.facts.range((rel, EntityId(0))..=(rel, EntityId(usize::MAX))).map(|(&(_, s), _)| s).collect()
    }

    /// All one-hop prompts with their stored targets.
    pub fn one_hop_facts(&self) -> Vec<(Prompt, EntityId)> {
        self.facts().map(|f| (Prompt::one_hop(f.subject, f.rel), f.target)).collect()
    }

    /// Two-hop prompts `x r1 r2` for every subject on which the composition is defined.
    pub fn two_hop_facts(&self, r1: RelationId, r2: RelationId) -> Vec<(Prompt, EntityId)> {
        compose(self, r1, r2)
            .into_iter()
            .map(|(x, z)| (Prompt::two_hop(x, r1, r2), z))
            .collect()
    }

    /// Expected completion of a prompt, if defined.
    pub fn answer(&self, prompt: &Prompt) -> Option<EntityId> {
        match *prompt {
            Prompt::OneHop { subject, rel } => self.get(rel, subject),
            Prompt::TwoHop { subject, rel1, rel2 } => self.get(rel1, subject).and_then(|y| self.get(rel2, y)),
        }
    }

    /// Copy of the world with `edit` applied.
    pub fn with_edit(&self, edit: &FactEdit) -> Result<World> {
        edit.validate(self)?;
        let mut out = self.clone();
        out.facts.insert((edit.rel, edit.subject), edit.new_target);
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let file = WorldFile {
            num_entities: self.num_entities,
            relations: self.relations().collect(),
            facts: self.facts().collect(),
            seed: self.seed,
        };
        serde_json::to_string_pretty(&file).expect("world serializes")
    }

    pub fn from_json(text: &str) -> Result<World> {
        let file: WorldFile = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("world file line {} column {}: {e}", e.line(), e.column())))?;
        for (i, r) in file.relations.iter().enumerate() {
            if r.0 != i {
                return Err(Error::Parse(format!(
                    "relations[{i}]: ids must be dense and start at 0, found {}",
                    r.0
                )));
            }
        }
        let mut world = World::new(file.num_entities, file.relations.len(), file.seed)
            .map_err(|e| Error::Parse(format!("header: {e}")))?;
        for (i, f) in file.facts.iter().enumerate() {
            world
                .insert_fact(f.rel, f.subject, f.target)
                .map_err(|e| Error::Parse(format!("facts[{i}]: {e}")))?;
        }
        Ok(world)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<World> {
        let text = std::fs::read_to_string(path)?;
        World::from_json(&text)
    }
}

pub fn save_world(world: &World, path: impl AsRef<Path>) -> Result<()> {
    world.save(path)
}

pub fn load_world(path: impl AsRef<Path>) -> Result<World> {
    World::load(path)
}

/// Random world: every `(relation, subject)` independently receives a uniform
/// target from the whole entity set with probability `density`.
pub fn gen_world(num_entities: usize, num_relations: usize, density: f64, seed: u64) -> Result<World> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::param(format!("density must lie in (0, 1], got {density}")));
    }
    let mut world = World::new(num_entities, num_relations, seed)?;
    let mut rng = rng::rng(seed);
    for r in 0..num_relations {
        for x in 0..num_entities {
            let keep = rng.random::<f64>() < density;
            let target = rng.random_range(0..num_entities);
            if keep {
                world.insert_fact(RelationId(r), EntityId(x), EntityId(target))?;
            }
        }
    }
    Ok(world)
}

/// `x ↦ r2(r1(x))` on every subject where both hops are defined.
pub fn compose(world: &World, r1: RelationId, r2: RelationId) -> BTreeMap<EntityId, EntityId> {
    world
        .subjects_of(r1)
        .into_iter()
        .filter_map(|x| {
            let y = world.get(r1, x)?;
            world.get(r2, y).map(|z| (x, z))
        })
        .collect()
}

/// Change of a stored fact `rel(subject)` from `old_target` to `new_target`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactEdit {
    pub rel: RelationId,
    pub subject: EntityId,
    pub old_target: EntityId,
    pub new_target: EntityId,
}

impl FactEdit {
    pub fn prompt(&self) -> Prompt {
        Prompt::one_hop(self.subject, self.rel)
    }

    pub fn is_noop(&self) -> bool {
        self.old_target == self.new_target
    }

    pub fn validate(&self, world: &World) -> Result<()> {
        match world.get(self.rel, self.subject) {
            Some(t) if t == self.old_target => {}
            other => {
                return Err(Error::param(format!(
                    "edit on ({}, {}) expects old target {}, world has {:?}",
                    self.rel, self.subject, self.old_target, other
                )))
            }
        }
        if self.new_target.0 >= world.num_entities() {
            return Err(Error::param(format!("new target {} out of range", self.new_target)));
        }
        Ok(())
    }
}

/// Draws `count` edits of `rel` on distinct subjects; each new target is
/// uniform over the entities other than the old one.
pub fn gen_edits(world: &World, rel: RelationId, count: usize, seed: u64) -> Result<Vec<FactEdit>> {
    if rel.0 >= world.num_relations() {
        return Err(Error::param(format!("relation {rel} out of range")));
    }
    let mut subjects = world.subjects_of(rel);
    if subjects.len() < count {
        return Err(Error::param(format!(
            "relation {rel} has {} facts, {count} edits requested",
            subjects.len()
        )));
    }
    let mut rng = rng::rng(seed);
    let (chosen, _) = subjects.partial_shuffle(&mut rng, count);
    let n = world.num_entities();
    Ok(chosen
        .iter()
        .map(|&subject| {
            let old = world.get(rel, subject).expect("subject has a fact");
            let k = rng.random_range(0..n - 1);
            let new = if k >= old.0 { k + 1 } else { k };
            FactEdit { rel, subject, old_target: old, new_target: EntityId(new) }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    Disjoint,
    Shared,
}

impl FromStr for GraphMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(GraphMode::Disjoint),
            "shared" => Ok(GraphMode::Shared),
            _ => Err(Error::Parse(format!("unknown graph mode `{s}`"))),
        }
    }
}

/// Three-partition benchmark with five atomic relations
/// `Rel1, Rel3, Rel5 ⊆ U1×U2` and `Rel2, Rel4 ⊆ U2×U3`. Relation `Rel_k` has id `k-1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub mode: GraphMode,
    pub partition_sizes: [usize; 3],
    pub atomic_relations: [RelationId; 5],
    pub trained_compositions: Vec<(RelationId, RelationId)>,
    pub held_out_composition: (RelationId, RelationId),
    pub triples: Vec<FactRecord>,
    pub seed: u64,
}

/// `Rel_k` → relation id.
pub const fn graph_rel(k: usize) -> RelationId {
    RelationId(k - 1)
}

const FIRST_HOP: [RelationId; 3] = [graph_rel(1), graph_rel(3), graph_rel(5)];
const SECOND_HOP: [RelationId; 2] = [graph_rel(2), graph_rel(4)];

impl GraphConfig {
    pub fn num_entities(&self) -> usize {
        self.partition_sizes.iter().sum()
    }

    /// Entity ids of partition `k ∈ {0,1,2}`.
    pub fn partition(&self, k: usize) -> std::ops::Range<usize> {
        let start: usize = self.partition_sizes[..k].iter().sum();
        start..start + self.partition_sizes[k]
    }

    pub fn world(&self) -> Result<World> {
        let mut w = World::new(self.num_entities(), 5, self.seed)?;
        for t in &self.triples {
            w.insert_fact(t.rel, t.subject, t.target)?;
        }
        Ok(w)
    }

    /// Relation family of `rel`: 0 for the `U1→U2` hops, 1 for `U2→U3`.
    pub fn family(rel: RelationId) -> usize {
        if FIRST_HOP.contains(&rel) {
            0
        } else {
            1
        }
    }

    /// Checks partition ranges, the held-out composition, and (in disjoint
    /// mode) that no entity appears in two triples of one relation family.
    pub fn validate(&self) -> Result<()> {
        if self.trained_compositions.contains(&self.held_out_composition) {
            return Err(Error::param("held-out composition is among the trained compositions"));
        }
        for t in &self.triples {
            let fam = Self::family(t.rel);
            let (src, dst) = (self.partition(fam), self.partition(fam + 1));
            if !src.contains(&t.subject.0) || !dst.contains(&t.target.0) {
                return Err(Error::param(format!("triple {t:?} crosses the wrong partitions")));
            }
        }
        if self.mode == GraphMode::Disjoint {
            if let Some(e) = self.max_family_reuse().1 {
                return Err(Error::param(format!("entity {e} appears in two triples of one family")));
            }
        }
        Ok(())
    }

    /// Largest number of triples of a single family any entity participates
    /// in, and an offending entity when that number exceeds one.
    pub fn max_family_reuse(&self) -> (usize, Option<EntityId>) {
        let mut counts: BTreeMap<(usize, EntityId), usize> = BTreeMap::new();
        for t in &self.triples {
            let fam = Self::family(t.rel);
            *counts.entry((fam, t.subject)).or_default() += 1;
            *counts.entry((fam, t.target)).or_default() += 1;
        }
        let (max, who) = counts
            .iter()
            .map(|(&(_, e), &c)| (c, e))
            .fold((0, None), |(m, w), (c, e)| if c > m { (c, Some(e)) } else { (m, w) });
        (max, if max > 1 { who } else { None })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph config serializes")
    }

    pub fn from_json(text: &str) -> Result<GraphConfig> {
        let cfg: GraphConfig = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("graph config line {} column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Builds the canonical five-relation graph: trained compositions
/// `Rel1∘Rel4, Rel3∘Rel4, Rel3∘Rel2, Rel5∘Rel2, Rel5∘Rel4`, held out `Rel1∘Rel2`.
///
/// Disjoint mode lays out `min(sizes)/6` self-contained chains per composition
/// (held-out included) so every entity belongs to at most one triple per family.
/// Shared mode defines every first-hop relation on all of `U1` and every
/// second-hop relation on all of `U2`, with uniform targets.
pub fn gen_graph_config(mode: GraphMode, partition_sizes: [usize; 3], seed: u64) -> Result<GraphConfig> {
    if partition_sizes.contains(&0) {
        return Err(Error::param("partition sizes must be >= 1"));
    }
    let trained = vec![
        (graph_rel(1), graph_rel(4)),
        (graph_rel(3), graph_rel(4)),
        (graph_rel(3), graph_rel(2)),
        (graph_rel(5), graph_rel(2)),
        (graph_rel(5), graph_rel(4)),
    ];
    let held_out = (graph_rel(1), graph_rel(2));
    let mut cfg = GraphConfig {
        mode,
        partition_sizes,
        atomic_relations: [1, 2, 3, 4, 5].map(graph_rel),
        trained_compositions: trained.clone(),
        held_out_composition: held_out,
        triples: Vec::new(),
        seed,
    };
    let mut rng = rng::rng(seed);
    let parts: Vec<Vec<usize>> = (0..3)
        .map(|k| {
            let mut ids: Vec<usize> = cfg.partition(k).collect();
            ids.shuffle(&mut rng);
            ids
        })
        .collect();
    match mode {
        GraphMode::Disjoint => {
            let comps: Vec<_> = trained.iter().copied().chain(std::iter::once(held_out)).collect();
            let per = partition_sizes.iter().min().copied().unwrap_or(0) / comps.len();
            if per == 0 {
                return Err(Error::param(format!(
                    "disjoint graphs need every partition >= {} entities, got {partition_sizes:?}",
                    comps.len()
                )));
            }
            for (ci, &(a, b)) in comps.iter().enumerate() {
                for j in 0..per {
                    let k = ci * per + j;
                    let (u1, u2, u3) = (EntityId(parts[0][k]), EntityId(parts[1][k]), EntityId(parts[2][k]));
                    cfg.triples.push(FactRecord { rel: a, subject: u1, target: u2 });
                    cfg.triples.push(FactRecord { rel: b, subject: u2, target: u3 });
                }
            }
        }
        GraphMode::Shared => {
            for &a in &FIRST_HOP {
                for &u1 in &parts[0] {
                    let u2 = parts[1][rng.random_range(0..parts[1].len())];
                    cfg.triples.push(FactRecord { rel: a, subject: EntityId(u1), target: EntityId(u2) });
                }
            }
            for &b in &SECOND_HOP {
                for &u2 in &parts[1] {
                    let u3 = parts[2][rng.random_range(0..parts[2].len())];
                    cfg.triples.push(FactRecord { rel: b, subject: EntityId(u2), target: EntityId(u3) });
                }
            }
        }
    }
    cfg.triples.sort_by_key(|t| (t.rel, t.subject));
    cfg.validate()?;
    Ok(cfg)
}

/// Training set of one adapter: prompts with the targets it must produce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterTrainSpec {
    pub name: String,
    pub examples: Vec<(Prompt, EntityId)>,
}

impl AdapterTrainSpec {
    /// Adapter teaching a list of one-hop fact edits.
    pub fn from_edits(name: impl Into<String>, edits: &[FactEdit]) -> Self {
        AdapterTrainSpec {
            name: name.into(),
            examples: edits.iter().map(|e| (e.prompt(), e.new_target)).collect(),
        }
    }
}

/// A library of adapters, how to combine them, and what to evaluate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibrarySpec {
    pub adapters: Vec<AdapterTrainSpec>,
    pub combinator: Combinator,
    pub eval_prompts: Vec<(Prompt, EntityId)>,
    #[serde(default)]
    pub allow_overlap: bool,
}

impl LibrarySpec {
    pub fn validate(&self) -> Result<()> {
        if self.adapters.is_empty() {
            return Err(Error::param("library has no adapters"));
        }
        if !self.allow_overlap {
            let mut seen = BTreeSet::new();
            for a in &self.adapters {
                for (p, _) in &a.examples {
                    if !seen.insert(*p) {
                        return Err(Error::param(format!(
                            "prompt `{p}` appears in more than one adapter's training set"
                        )));
                    }
                }
            }
        }
        self.combinator.validate(self.adapters.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> World {
        // r0: 0 -> 1, r1: 1 -> 2
        let mut w = World::new(3, 2, 0).unwrap();
        w.insert_fact(RelationId(0), EntityId(0), EntityId(1)).unwrap();
        w.insert_fact(RelationId(1), EntityId(1), EntityId(2)).unwrap();
        w
    }

    #[test]
    fn two_entity_dense_world_has_two_facts() {
        let w = gen_world(2, 1, 1.0, 0).unwrap();
        assert_eq!(w.num_facts(), 2);
        assert!(w.get(RelationId(0), EntityId(0)).is_some());
        assert!(w.get(RelationId(0), EntityId(1)).is_some());
    }

    #[test]
    fn dense_world_fact_count() {
        assert_eq!(gen_world(30, 4, 1.0, 7).unwrap().num_facts(), 120);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(gen_world(30, 4, 1.0, 7).unwrap().to_json(), gen_world(30, 4, 1.0, 7).unwrap().to_json());
        assert_ne!(gen_world(30, 4, 1.0, 7).unwrap().to_json(), gen_world(30, 4, 1.0, 8).unwrap().to_json());
    }

    #[test]
    fn invalid_world_parameters() {
        assert!(matches!(gen_world(1, 1, 1.0, 0), Err(Error::Parameter(_))));
        assert!(matches!(gen_world(5, 0, 1.0, 0), Err(Error::Parameter(_))));
        assert!(matches!(gen_world(5, 1, 0.0, 0), Err(Error::Parameter(_))));
        assert!(matches!(gen_world(5, 1, 1.5, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn compose_follows_both_hops() {
        let w = tiny();
        let c = compose(&w, RelationId(0), RelationId(1));
        assert_eq!(c.into_iter().collect::<Vec<_>>(), vec![(EntityId(0), EntityId(2))]);
        // r1 after r1: 1 -> 2 but r1 undefined on 2
        assert!(compose(&w, RelationId(1), RelationId(1)).is_empty());
    }

    #[test]
    fn compose_on_dense_world_is_total() {
        let w = gen_world(30, 4, 1.0, 3).unwrap();
        assert_eq!(compose(&w, RelationId(0), RelationId(2)).len(), 30);
    }

    #[test]
    fn edits_basic_contracts() {
        let w = gen_world(30, 4, 1.0, 1).unwrap();
        assert!(gen_edits(&w, RelationId(0), 0, 5).unwrap().is_empty());
        let a = gen_edits(&w, RelationId(1), 5, 9).unwrap();
        assert_eq!(a, gen_edits(&w, RelationId(1), 5, 9).unwrap());
        let subjects: BTreeSet<_> = a.iter().map(|e| e.subject).collect();
        assert_eq!(subjects.len(), 5);
        for e in &a {
            e.validate(&w).unwrap();
            assert_ne!(e.old_target, e.new_target);
        }
        assert!(matches!(gen_edits(&w, RelationId(1), 31, 9), Err(Error::Parameter(_))));
    }

    #[test]
    fn two_entity_edit_is_forced() {
        let w = gen_world(2, 1, 1.0, 4).unwrap();
        let e = gen_edits(&w, RelationId(0), 1, 0).unwrap()[0];
        assert_eq!(e.new_target.0, 1 - e.old_target.0);
    }

    #[test]
    fn world_json_round_trip_and_rejects_duplicates() {
        let w = gen_world(30, 4, 1.0, 7).unwrap();
        assert_eq!(World::from_json(&w.to_json()).unwrap(), w);

        let dup = r#"{"num_entities": 3, "relations": [0], "seed": 0,
            "facts": [{"rel": 0, "subject": 1, "target": 2}, {"rel": 0, "subject": 1, "target": 0}]}"#;
        let err = World::from_json(dup).unwrap_err().to_string();
        assert!(err.contains("facts[1]"), "{err}");

        let empty = r#"{"num_entities": 3, "relations": [0, 1], "seed": 0, "facts": []}"#;
        assert_eq!(World::from_json(empty).unwrap().num_facts(), 0);

        let malformed = "{\n \"num_entities\": 3,\n \"relations\": [0],\n \"facts\": [{\"rel\": 0}]\n}";
        let err = World::from_json(malformed).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
    }

    #[test]
    fn world_file_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let w = gen_world(10, 2, 0.5, 3).unwrap();
        save_world(&w, &path).unwrap();
        assert_eq!(load_world(&path).unwrap(), w);
    }

    #[test]
    fn prompt_parsing() {
        assert_eq!("3 1".parse::<Prompt>().unwrap(), Prompt::one_hop(EntityId(3), RelationId(1)));
        assert_eq!(
            "x3 r1 r2".parse::<Prompt>().unwrap(),
            Prompt::two_hop(EntityId(3), RelationId(1), RelationId(2))
        );
        assert!("3".parse::<Prompt>().is_err());
    }

    #[test]
    fn graph_config_skeleton() {
        for mode in [GraphMode::Disjoint, GraphMode::Shared] {
            let g = gen_graph_config(mode, [12, 12, 12], 3).unwrap();
            assert_eq!(g.held_out_composition, (graph_rel(1), graph_rel(2)));
            assert_eq!(g.trained_compositions.len(), 5);
            assert!(!g.trained_compositions.contains(&g.held_out_composition));
            g.validate().unwrap();
            let w = g.world().unwrap();
            for &(a, b) in &g.trained_compositions {
                assert!(!compose(&w, a, b).is_empty());
            }
            assert!(!compose(&w, graph_rel(1), graph_rel(2)).is_empty());
        }
    }

    #[test]
    fn disjoint_graph_never_reuses_entities_within_a_family() {
        let g = gen_graph_config(GraphMode::Disjoint, [10, 10, 10], 5).unwrap();
        assert_eq!(g.max_family_reuse().0, 1);
        assert!(matches!(
            gen_graph_config(GraphMode::Disjoint, [5, 10, 10], 5),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn shared_and_disjoint_share_skeleton_but_not_reuse() {
        let d = gen_graph_config(GraphMode::Disjoint, [12, 12, 12], 11).unwrap();
        let s = gen_graph_config(GraphMode::Shared, [12, 12, 12], 11).unwrap();
        assert_eq!(d.atomic_relations, s.atomic_relations);
        assert_eq!(d.trained_compositions, s.trained_compositions);
        assert_eq!(d.held_out_composition, s.held_out_composition);
        assert_eq!(d.partition_sizes, s.partition_sizes);
        assert_eq!(d.max_family_reuse().0, 1);
        // every U1 entity carries all three first-hop relations in shared mode
        assert!(s.max_family_reuse().0 >= 3);
        assert_eq!(GraphConfig::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn library_rejects_overlapping_training_prompts() {
        let p = Prompt::one_hop(EntityId(0), RelationId(0));
        let spec = LibrarySpec {
            adapters: vec![
                AdapterTrainSpec { name: "a".into(), examples: vec![(p, EntityId(1))] },
                AdapterTrainSpec { name: "b".into(), examples: vec![(p, EntityId(2))] },
            ],
            combinator: Combinator::Sum,
            eval_prompts: vec![],
            allow_overlap: false,
        };
        assert!(spec.validate().is_err());
        let spec = LibrarySpec { allow_overlap: true, ..spec };
        spec.validate().unwrap();
    }
}
