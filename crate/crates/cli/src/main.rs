//! `lora-compose` command-line driver.
//!
//! Exit codes: 0 success, 1 a check failed under `--check`, 2 usage or
//! configuration error, 3 any other failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lora_compose::experiments::{self, kernel_check, ExperimentConfig, ExperimentKind};
use lora_compose::io::{load_adapter, load_model, save_adapter, save_model};
use lora_compose::lora::{rank_one_edit, Adapter, EditMode};
use lora_compose::model::{forward, init_params, recall_with, ModelDims, WeightDelta};
use lora_compose::routing::{arrow_query, combine, ArrowActivation, ArrowCombine, Combinator};
use lora_compose::world::{gen_world, load_world, EntityId, Prompt, RelationId};

#[derive(Parser, Debug)]
#[command(name = "lora-compose", version, about = "Rank-one adapters, routing and two-hop composition in a toy transformer")]
struct Cli {
    /// Base seed (overrides the config file)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config file)
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for experiment trials
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Experiment config file (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Exit with status 1 when any acceptance check fails
    #[arg(long, global = true)]
    check: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a random world and write it as JSON
    GenWorld {
        #[arg(long, default_value_t = 30)]
        entities: usize,
        #[arg(long, default_value_t = 4)]
        relations: usize,
        #[arg(long, default_value_t = 1.0)]
        density: f64,
        #[arg(short, long, default_value = "world.json")]
        output: PathBuf,
    },
    /// Initialize a model and fit its readout on a world's one-hop facts
    Fit {
        #[arg(long)]
        world: PathBuf,
        #[arg(long, default_value_t = 128)]
        d: usize,
        #[arg(long, default_value_t = 8192)]
        m: usize,
        #[arg(long, default_value_t = 1e-8)]
        ridge: f64,
        /// Also fit the compositions `x r1 r2`, given as `r1,r2`
        #[arg(long, value_parser = parse_rel_pair)]
        two_hop: Option<(usize, usize)>,
        #[arg(short, long, default_value = "model.lcmp")]
        output: PathBuf,
    },
    /// Rank-one edit of one prompt
    Edit {
        #[arg(long)]
        model: PathBuf,
        /// Prompt such as `x3 r1` or `x3 r1 r2`
        #[arg(long)]
        prompt: Prompt,
        #[arg(long)]
        new: usize,
        /// Expected current answer (required in strict mode)
        #[arg(long)]
        old: Option<usize>,
        #[arg(long, default_value = "exact")]
        mode: EditMode,
        #[arg(short, long, default_value = "adapter.lcad")]
        output: PathBuf,
    },
    /// Combine adapters and run one prompt
    Combine {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "adapter", required = true)]
        adapters: Vec<PathBuf>,
        #[command(flatten)]
        strategy: StrategyArgs,
        #[arg(long)]
        prompt: Prompt,
    },
    /// Recall accuracy of a model (optionally with combined adapters) on a world
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long = "adapter")]
        adapters: Vec<PathBuf>,
        #[command(flatten)]
        strategy: StrategyArgs,
        /// Evaluate compositions `x r1 r2` instead of one-hop facts
        #[arg(long, value_parser = parse_rel_pair)]
        two_hop: Option<(usize, usize)>,
    },
    /// Run a configured experiment and write CSV, JSON and markdown reports
    Run {
        /// edit_locality, theorem1, library_comparison, graph_library, same_multiple, kernel_convergence
        experiment: String,
    },
    /// Monte-Carlo kernel-ratio error at one width
    KernelCheck {
        #[arg(long, default_value_t = 65536)]
        m: usize,
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 20)]
        pairs: usize,
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Strategy {
    Sum,
    Uniform,
    Cat,
    Linear,
    Arrow,
}

#[derive(Args, Debug)]
struct StrategyArgs {
    #[arg(long, value_enum, default_value_t = Strategy::Sum)]
    strategy: Strategy,
    /// Weights for `cat` and `linear`, comma separated
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Route Arrow on pre-ReLU activations
    #[arg(long)]
    pre_relu: bool,
    /// Merge factors with the Arrow weights instead of weighting outputs
    #[arg(long)]
    arrow_merge: bool,
}

impl StrategyArgs {
    fn combinator(&self, n: usize) -> Combinator {
        let weights = if self.weights.is_empty() { vec![1.0; n] } else { self.weights.clone() };
        match self.strategy {
            Strategy::Sum => Combinator::Sum,
            Strategy::Uniform => Combinator::UniformMerge,
            Strategy::Cat => Combinator::Cat { weights },
            Strategy::Linear => Combinator::LinearMerge { weights },
            Strategy::Arrow => Combinator::Arrow {
                temperature: self.temperature,
                use_abs: true,
                activation: if self.pre_relu { ArrowActivation::PreRelu } else { ArrowActivation::PostRelu },
                combine: if self.arrow_merge { ArrowCombine::Merge } else { ArrowCombine::Output },
            },
        }
    }
}

fn parse_rel_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `r1,r2`, got `{s}`"))?;
    let p = |t: &str| t.trim().trim_start_matches('r').parse::<usize>().map_err(|e| format!("`{t}`: {e}"));
    Ok((p(a)?, p(b)?))
}

enum Failure {
    Usage(anyhow::Error),
    CheckFailed,
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::CheckFailed) => ExitCode::from(1),
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn load_adapters(paths: &[PathBuf]) -> anyhow::Result<Vec<Adapter>> {
    paths.iter().map(|p| load_adapter(p).with_context(|| format!("loading adapter {}", p.display()))).collect()
}

fn combined(
    params: &lora_compose::ModelParams,
    adapters: &[Adapter],
    strategy: &StrategyArgs,
    prompt: &Prompt,
) -> anyhow::Result<Option<lora_compose::RoutedDelta>> {
    if adapters.is_empty() {
        return Ok(None);
    }
    let comb = strategy.combinator(adapters.len());
    let query = match comb {
        Combinator::Arrow { activation, .. } => Some(arrow_query(params, prompt, activation)?),
        _ => None,
    };
    Ok(Some(combine(adapters, &comb, query.as_ref())?))
}

fn out_path(cli: &Cli, file: &Path) -> PathBuf {
    match &cli.out_dir {
        Some(dir) if file.is_relative() => dir.join(file),
        _ => file.to_path_buf(),
    }
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::GenWorld { entities, relations, density, output } => {
            let world = gen_world(*entities, *relations, *density, seed).map_err(|e| Failure::Usage(e.into()))?;
            let path = out_path(cli, output);
            ensure_parent(&path)?;
            world.save(&path).map_err(anyhow::Error::from)?;
            println!("wrote {} ({} facts)", path.display(), world.num_facts());
        }
        Command::Fit { world, d, m, ridge, two_hop, output } => {
            let world = load_world(world).with_context(|| format!("loading world {}", world.display()))?;
            let dims = ModelDims::new(*d, *m, world.num_entities(), world.num_relations())
                .map_err(|e| Failure::Usage(e.into()))?;
            let mut facts = world.one_hop_facts();
            if let Some((r1, r2)) = two_hop {
                facts.extend(world.two_hop_facts(RelationId(*r1), RelationId(*r2)));
            }
            let params = init_params(dims, seed).map_err(anyhow::Error::from)?.fitted(&facts, *ridge).map_err(anyhow::Error::from)?;
            let report = recall_with(&params, &facts, None).map_err(anyhow::Error::from)?;
            let path = out_path(cli, output);
            ensure_parent(&path)?;
            save_model(&params, &path).map_err(anyhow::Error::from)?;
            println!("wrote {}; recall on {} facts: {report}", path.display(), facts.len());
        }
        Command::Edit { model, prompt, new, old, mode, output } => {
            let params = load_model(model).with_context(|| format!("loading model {}", model.display()))?;
            let adapter = rank_one_edit(&params, prompt, old.map(EntityId), EntityId(*new), *mode).map_err(anyhow::Error::from)?;
            let out = forward(&params, prompt, Some(&adapter)).map_err(anyhow::Error::from)?;
            let path = out_path(cli, output);
            ensure_parent(&path)?;
            save_adapter(&adapter, &path).map_err(anyhow::Error::from)?;
            println!("wrote {}; `{prompt}` now predicts x{}", path.display(), out.argmax().index);
        }
        Command::Combine { model, adapters, strategy, prompt } => {
            let params = load_model(model).with_context(|| format!("loading model {}", model.display()))?;
            let adapters = load_adapters(adapters)?;
            let delta = combined(&params, &adapters, strategy, prompt)?.expect("at least one adapter");
            let out = forward(&params, prompt, Some(&delta as &dyn WeightDelta)).map_err(anyhow::Error::from)?;
            let a = out.argmax();
            println!("prompt `{prompt}` -> x{}{}", a.index, if a.tied { " (tied)" } else { "" });
            println!("weights: {:?}", delta.weights);
            if let Some(s) = &delta.similarities {
                println!("arrow scores: {s:?}");
            }
        }
        Command::Eval { model, world, adapters, strategy, two_hop } => {
            let params = load_model(model).with_context(|| format!("loading model {}", model.display()))?;
            let world = load_world(world).with_context(|| format!("loading world {}", world.display()))?;
            let facts = match two_hop {
                Some((r1, r2)) => world.two_hop_facts(RelationId(*r1), RelationId(*r2)),
                None => world.one_hop_facts(),
            };
            if facts.is_empty() {
                return Err(Failure::Usage(anyhow!("no facts to evaluate")));
            }
            let adapters = load_adapters(adapters)?;
            let arrow = matches!(strategy.strategy, Strategy::Arrow);
            let report = if arrow && !adapters.is_empty() {
                let mut hits = 0;
                for (p, t) in &facts {
                    let d = combined(&params, &adapters, strategy, p)?.expect("adapters present");
                    hits += usize::from(forward(&params, p, Some(&d as &dyn WeightDelta)).map_err(anyhow::Error::from)?.predicts(*t));
                }
                format!("accuracy {:.4} ({hits}/{})", hits as f64 / facts.len() as f64, facts.len())
            } else {
                let d = combined(&params, &adapters, strategy, &facts[0].0)?;
                let r = recall_with(&params, &facts, d.as_ref().map(|d| d as &dyn WeightDelta)).map_err(anyhow::Error::from)?;
                r.to_string()
            };
            println!("{report}");
        }
        Command::Run { experiment } => {
            let kind: ExperimentKind = experiment.parse().map_err(|e: lora_compose::Error| Failure::Usage(e.into()))?;
            let mut config = match &cli.config {
                Some(path) => ExperimentConfig::load(path).map_err(|e| Failure::Usage(e.into()))?,
                None => ExperimentConfig::default_for(kind),
            };
            if config.experiment != kind {
                return Err(Failure::Usage(anyhow!(
                    "config describes `{}` but `run {}` was requested",
                    config.experiment,
                    kind
                )));
            }
            if let Some(s) = cli.seed {
                config.seed = s;
                config.seeds.clear();
            }
            if let Some(t) = cli.threads {
                config.threads = Some(t);
            }
            if let Some(dir) = &cli.out_dir {
                config.output.dir = dir.clone();
            }
            config.validate().map_err(|e| Failure::Usage(e.into()))?;
            let report = experiments::run(&config).map_err(anyhow::Error::from)?;
            let files = report.write(&config.output.dir, &config.output.stem).map_err(anyhow::Error::from)?;
            for c in &report.checks {
                println!(
                    "{} {}: {:.6} {} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.comparator.symbol(),
                    c.threshold
                );
            }
            for f in files {
                println!("wrote {}", f.display());
            }
            if cli.check && !report.passed() {
                return Err(Failure::CheckFailed);
            }
        }
        Command::KernelCheck { m, d, seeds, pairs, tolerance } => {
            if *d < 2 || *m == 0 || *seeds == 0 || *pairs == 0 {
                return Err(Failure::Usage(anyhow!("need d >= 2 and positive m, seeds, pairs")));
            }
            let seed_list: Vec<u64> = (0..*seeds as u64).map(|i| seed + i).collect();
            let c = kernel_check(*d, *m, &seed_list, *pairs, seed).map_err(anyhow::Error::from)?;
            let pass = c.max_mean_abs_error <= *tolerance;
            println!(
                "{} m={} d={d}: max mean |error| {:.6} (tolerance {tolerance}), rms {:.6}",
                if pass { "PASS" } else { "FAIL" },
                c.m,
                c.max_mean_abs_error,
                c.rms_error
            );
            if cli.check && !pass {
                return Err(Failure::CheckFailed);
            }
        }
    }
    Ok(())
}
