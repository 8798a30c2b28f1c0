//! Experiment configuration files (TOML).
//!
//! A file names its experiment and overrides any subset of that experiment's
//! defaults:
//!
//! ```toml
//! schema_version = 1
//! experiment = "theorem1"
//! trials = 10
//!
//! [model]
//! m = 4096
//!
//! [tolerances]
//! max_two_hop_accuracy = 0.1
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::EditMode;
use crate::routing::Combinator;
use crate::world::GraphMode;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[serde(alias = "edit-locality")]
    EditLocality,
    Theorem1,
    #[serde(alias = "library-comparison")]
    LibraryComparison,
    #[serde(alias = "graph-library")]
    GraphLibrary,
    #[serde(alias = "same-multiple")]
    SameMultiple,
    #[serde(alias = "kernel-convergence")]
    KernelConvergence,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::EditLocality,
        ExperimentKind::Theorem1,
        ExperimentKind::LibraryComparison,
        ExperimentKind::GraphLibrary,
        ExperimentKind::SameMultiple,
        ExperimentKind::KernelConvergence,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::EditLocality => "edit_locality",
            ExperimentKind::Theorem1 => "theorem1",
            ExperimentKind::LibraryComparison => "library_comparison",
            ExperimentKind::GraphLibrary => "graph_library",
            ExperimentKind::SameMultiple => "same_multiple",
            ExperimentKind::KernelConvergence => "kernel_convergence",
        }
    }

    /// Default acceptance thresholds, keyed by tolerance name.
    pub fn default_tolerances(self) -> BTreeMap<String, f64> {
        let pairs: &[(&str, f64)] = match self {
            ExperimentKind::EditLocality => &[
                ("min_base_accuracy", 1.0),
                ("min_edited_accuracy", 1.0),
                ("min_retention", 0.99),
                ("max_strict_closed_form_error", 1e-10),
            ],
            ExperimentKind::Theorem1 => &[
                ("max_two_hop_accuracy", 0.10),
                ("min_oracle_accuracy", 1.0),
                ("max_residual_rel", 0.05),
                ("max_coefficient_rel_error", 0.10),
            ],
            ExperimentKind::LibraryComparison => {
                &[("max_two_hop_accuracy", 0.10), ("min_oracle_accuracy", 1.0)]
            }
            ExperimentKind::GraphLibrary => &[
                ("max_held_out_accuracy", 0.10),
                ("min_self_accuracy", 1.0),
                ("max_mode_gap", 0.10),
            ],
            ExperimentKind::SameMultiple => &[("max_relative_difference", 0.20)],
            ExperimentKind::KernelConvergence => &[
                ("max_ratio_error", 0.02),
                ("min_exponent", -0.6),
                ("max_exponent", -0.4),
            ],
        };
        pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        ExperimentKind::ALL.into_iter().find(|k| k.as_str() == norm).ok_or_else(|| {
            let names: Vec<_> = ExperimentKind::ALL.iter().map(|k| k.as_str()).collect();
            Error::Config(format!("unknown experiment `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub m: usize,
    pub ridge: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    pub entities: usize,
    pub relations: usize,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditsSection {
    pub count: usize,
    pub modes: Vec<EditMode>,
}

/// The studied composition `x r1 r2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    pub r1: usize,
    pub r2: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub modes: Vec<GraphMode>,
    pub partition_sizes: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub m_sweep: Vec<usize>,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub stem: String,
}

/// Fully resolved configuration.
///
/// Trial seeds are `seeds` when given, otherwise `seed, seed+1, …, seed+trials-1`.
/// A `cat` combinator with no weights has its weights fitted per trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub trials: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub model: ModelSection,
    pub world: WorldSection,
    pub edits: EditsSection,
    pub chain: ChainSection,
    pub graph: GraphSection,
    pub kernel: KernelSection,
    pub combinators: Vec<Combinator>,
    pub tolerances: BTreeMap<String, f64>,
    pub output: OutputSection,
}

fn fitted_cat() -> Combinator {
    Combinator::Cat { weights: Vec::new() }
}

impl ExperimentConfig {
    /// Desk-scale defaults for `kind`.
    pub fn default_for(kind: ExperimentKind) -> Self {
        let mut c = ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            experiment: kind,
            seed: 0,
            trials: 10,
            seeds: Vec::new(),
            threads: None,
            model: ModelSection { d: 128, m: 16_384, ridge: 1e-8 },
            world: WorldSection { entities: 30, relations: 4, density: 1.0 },
            edits: EditsSection { count: 5, modes: vec![EditMode::ExactRedirect, EditMode::PaperStrict] },
            chain: ChainSection { r1: 0, r2: 1 },
            graph: GraphSection { modes: vec![GraphMode::Disjoint, GraphMode::Shared], partition_sizes: [40, 40, 40] },
            kernel: KernelSection { m_sweep: (10..=16).map(|k| 1usize << k).collect(), pairs: 20 },
            combinators: vec![Combinator::Sum, Combinator::UniformMerge, fitted_cat(), Combinator::arrow()],
            tolerances: kind.default_tolerances(),
            output: OutputSection { dir: PathBuf::from("out"), stem: kind.as_str().to_string() },
        };
        match kind {
            ExperimentKind::EditLocality => {
                c.model.m = 8192;
            }
            ExperimentKind::Theorem1 => {
                c.trials = 100;
            }
            ExperimentKind::LibraryComparison => {
                c.model.m = 8192;
                c.combinators = vec![Combinator::arrow(), Combinator::UniformMerge, Combinator::Sum, fitted_cat()];
            }
            ExperimentKind::GraphLibrary => {
                c.model = ModelSection { d: 64, m: 4096, ridge: 1e-8 };
                c.trials = 5;
            }
            ExperimentKind::SameMultiple => {
                c.model.d = 512;
                c.model.m = 32_768;
                c.world = WorldSection { entities: 12, relations: 2, density: 1.0 };
            }
            ExperimentKind::KernelConvergence => {
                c.model.d = 64;
                c.trials = 5;
                c.world = WorldSection { entities: 10, relations: 2, density: 1.0 };
            }
        }
        c
    }

    /// Parses a config file body, filling unspecified keys from
    /// [`ExperimentConfig::default_for`].
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let version = match user.get("schema_version") {
            Some(toml::Value::Integer(v)) => *v,
            Some(other) => return Err(Error::Config(format!("schema_version must be an integer, got {other}"))),
            None => return Err(Error::Config("missing schema_version".into())),
        };
        if version != SCHEMA_VERSION as i64 {
            return Err(Error::Config(format!("unsupported schema_version {version} (expected {SCHEMA_VERSION})")));
        }
        let kind: ExperimentKind = match user.get("experiment") {
            Some(toml::Value::String(s)) => s.parse()?,
            _ => return Err(Error::Config("missing `experiment` name".into())),
        };
        let defaults = toml::Table::try_from(Self::default_for(kind)).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(defaults, user);
        let cfg: ExperimentConfig =
            toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.seed_list().is_empty() {
            return fail("no trial seeds (trials = 0 and seeds empty)".into());
        }
        if self.threads == Some(0) {
            return fail("threads must be >= 1".into());
        }
        if self.model.d < 2 || self.model.m < 1 {
            return fail(format!("model dims d = {}, m = {} are invalid", self.model.d, self.model.m));
        }
        if !(self.model.ridge >= 0.0) {
            return fail(format!("ridge must be >= 0, got {}", self.model.ridge));
        }
        if !(self.world.density > 0.0 && self.world.density <= 1.0) {
            return fail(format!("world.density must be in (0, 1], got {}", self.world.density));
        }
        if self.world.entities < 2 || self.world.relations < 1 {
            return fail("world needs >= 2 entities and >= 1 relation".into());
        }
        let needs_chain = matches!(
            self.experiment,
            ExperimentKind::Theorem1
                | ExperimentKind::LibraryComparison
                | ExperimentKind::SameMultiple
                | ExperimentKind::KernelConvergence
        );
        if needs_chain {
            let r = self.world.relations;
            if self.chain.r1 >= r || self.chain.r2 >= r || self.chain.r1 == self.chain.r2 {
                return fail(format!(
                    "chain relations r1 = {}, r2 = {} must be distinct and < {r}",
                    self.chain.r1, self.chain.r2
                ));
            }
            if self.world.entities < 6 {
                return fail("chain experiments need at least 6 entities".into());
            }
        }
        if self.experiment == ExperimentKind::EditLocality && self.edits.modes.is_empty() {
            return fail("edits.modes is empty".into());
        }
        if self.experiment == ExperimentKind::GraphLibrary && self.graph.modes.is_empty() {
            return fail("graph.modes is empty".into());
        }
        if self.experiment == ExperimentKind::KernelConvergence {
            if self.kernel.m_sweep.len() < 2 || self.kernel.m_sweep.contains(&0) {
                return fail("kernel.m_sweep needs at least two positive widths".into());
            }
            if self.kernel.pairs == 0 {
                return fail("kernel.pairs must be >= 1".into());
            }
        }
        let uses_combinators =
            matches!(self.experiment, ExperimentKind::Theorem1 | ExperimentKind::LibraryComparison | ExperimentKind::GraphLibrary);
        if uses_combinators && self.combinators.is_empty() {
            return fail("combinators list is empty".into());
        }
        for c in &self.combinators {
            if let Combinator::Arrow { temperature, .. } = c {
                if !(*temperature > 0.0) {
                    return fail(format!("arrow temperature must be > 0, got {temperature}"));
                }
            }
            if let Combinator::LinearMerge { weights } = c {
                if weights.is_empty() {
                    return fail("linear merge needs explicit weights".into());
                }
            }
        }
        let known = self.experiment.default_tolerances();
        for (k, v) in &self.tolerances {
            if !known.contains_key(k) {
                let names: Vec<_> = known.keys().cloned().collect();
                return fail(format!("unknown tolerance `{k}` for {} (known: {})", self.experiment, names.join(", ")));
            }
            if !v.is_finite() {
                return fail(format!("tolerance `{k}` is not finite"));
            }
        }
        if self.output.stem.is_empty() || self.output.stem.contains(['/', '\\']) {
            return fail(format!("output.stem `{}` must be a plain file stem", self.output.stem));
        }
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.trials as u64).map(|i| self.seed.wrapping_add(i)).collect()
        } else {
            self.seeds.clone()
        }
    }

    pub fn tolerance(&self, key: &str) -> f64 {
        self.tolerances
            .get(key)
            .copied()
            .or_else(|| self.experiment.default_tolerances().get(key).copied())
            .unwrap_or_else(|| panic!("no tolerance `{key}` for {}", self.experiment))
    }

    /// Hex SHA-256 prefix over everything that affects results (not the
    /// thread count or output location).
    pub fn config_hash(&self) -> String {
        let mut canon = self.clone();
        canon.threads = None;
        canon.output = OutputSection { dir: PathBuf::new(), stem: String::new() };
        canon.seeds = canon.seed_list();
        let json = serde_json::to_string(&canon).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}
