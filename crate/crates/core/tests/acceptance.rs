//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//!
//! Every experiment here runs single-threaded first (runtime gates are
//! measured on that pass), then again on two threads for the determinism
//! criterion.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use lora_compose::experiments::{run, ExperimentConfig, ExperimentKind, ExperimentReport};
use lora_compose::lora::minimality_oracle;
use lora_compose::{
    gen_edits, gen_world, init_params, penalty, rank_one_edit, recall_accuracy, EditMode, EntityId, ModelDims,
    ModelParams, RelationId,
};

struct Outcome {
    id: u32,
    title: &'static str,
    passed: bool,
    detail: String,
}

struct Runs {
    done: Vec<(String, ExperimentConfig, String)>,
}

impl Runs {
    fn run(&mut self, label: &str, mut config: ExperimentConfig) -> (ExperimentReport, Duration) {
        config.threads = Some(1);
        let t = Instant::now();
        let report = run(&config).unwrap_or_else(|e| panic!("{label}: {e}"));
        let elapsed = t.elapsed();
        self.done.push((label.to_string(), config, report.csv().expect("csv")));
        (report, elapsed)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn config(kind: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig::default_for(kind)
}

fn all_checks(report: &ExperimentReport, prefix: &str) -> (bool, Vec<String>) {
    let picked: Vec<_> = report.checks.iter().filter(|c| c.name.starts_with(prefix)).collect();
    let failed = picked.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    (!picked.is_empty() && picked.iter().all(|c| c.passed), failed)
}

fn fact_storage() -> Outcome {
    let mut worst = Duration::ZERO;
    let mut accuracies = Vec::new();
    for seed in 0..10 {
        let t = Instant::now();
        let world = gen_world(30, 4, 1.0, seed).unwrap();
        let facts = world.one_hop_facts();
        assert_eq!(facts.len(), 120);
        let params =
            init_params(ModelDims::new(128, 8192, 30, 4).unwrap(), seed).unwrap().fitted(&facts, 1e-8).unwrap();
        accuracies.push(recall_accuracy(&params, &facts).unwrap().accuracy);
        worst = worst.max(t.elapsed());
    }
    let min = accuracies.iter().copied().fold(1.0, f64::min);
    Outcome {
        id: 1,
        title: "fact storage",
        passed: min == 1.0 && worst < Duration::from_secs(10),
        detail: format!("min recall {min:.4} over 10 seeds (need 1.00), slowest seed {} (need < 10s)", secs(worst)),
    }
}

/// `ΔW[i][j] = (δ_{i,new} − δ_{i,old}) φ_j / Σ φ²` with `φ` rebuilt by plain loops.
fn dense_strict_delta(params: &ModelParams, subject: usize, rel: usize, old: usize, new: usize) -> Vec<Vec<f64>> {
    let dims = params.dims();
    let (e, v, u) = (params.embeddings(), params.value(), params.mlp_in());
    let (d, m, n) = (dims.d, dims.m, dims.num_entities);
    let mut mixed = vec![0.0; d];
    for (i, slot) in mixed.iter_mut().enumerate() {
        let mut acc = e[(n + rel, i)];
        for k in 0..d {
            acc += v[(i, k)] * e[(subject, k)];
        }
        *slot = acc;
    }
    let mut phi = vec![0.0; m];
    for (j, slot) in phi.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..d {
            acc += u[(j, k)] * mixed[k];
        }
        *slot = acc.max(0.0);
    }
    let norm2: f64 = phi.iter().map(|x| x * x).sum();
    (0..n)
        .map(|i| {
            let w = (i == new) as u8 as f64 - (i == old) as u8 as f64;
            phi.iter().map(|p| w * p / norm2).collect()
        })
        .collect()
}

fn edit_exactness(runs: &mut Runs) -> Outcome {
    let (report, _) = runs.run("edit_locality", config(ExperimentKind::EditLocality));
    let edited = report.mean("exact_redirect", "edited_accuracy").unwrap();
    let retention = report.mean("exact_redirect", "retention").unwrap();
    let seeds = report.seeds.len();

    let mut worst = 0.0f64;
    let mut compared = 0;
    for seed in 0..10u64 {
        let world = gen_world(30, 4, 1.0, seed).unwrap();
        let params = init_params(ModelDims::new(128, 8192, 30, 4).unwrap(), seed)
            .unwrap()
            .fitted(&world.one_hop_facts(), 1e-8)
            .unwrap();
        for k in 0..5 {
            let rel = RelationId(k % 4);
            let e = gen_edits(&world, rel, 5, seed * 31 + k as u64).unwrap()[k];
            let a = rank_one_edit(&params, &e.prompt(), Some(e.old_target), e.new_target, EditMode::PaperStrict)
                .unwrap()
                .delta();
            let dense = dense_strict_delta(&params, e.subject.0, rel.0, e.old_target.0, e.new_target.0);
            for (i, row) in dense.iter().enumerate() {
                for (j, x) in row.iter().enumerate() {
                    worst = worst.max((a[(i, j)] - x).abs());
                }
            }
            compared += 1;
        }
    }
    Outcome {
        id: 2,
        title: "edit exactness",
        passed: edited == 1.0 && retention >= 0.99 && worst <= 1e-10,
        detail: format!(
            "edited accuracy {edited:.4}, retention {retention:.4} (need 1.00, >= 0.99; 5 edits x {seeds} seeds); \
             strict closed form vs dense recomputation max |diff| {worst:.2e} over {compared} edits (need <= 1e-10)"
        ),
    }
}

fn minimality() -> Outcome {
    let t = Instant::now();
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_cos = 1.0f64;
    for seed in 0..20u64 {
        let world = gen_world(10, 3, 1.0, 500 + seed).unwrap();
        let params = init_params(ModelDims::new(16, 64, 10, 3).unwrap(), 500 + seed)
            .unwrap()
            .fitted(&world.one_hop_facts(), 1e-10)
            .unwrap();
        let (prompt, old) = world.one_hop_facts()[(seed as usize * 7) % 30];
        let new = EntityId((old.0 + 1 + seed as usize % 9) % 10);
        let closed = penalty(&rank_one_edit(&params, &prompt, Some(old), new, EditMode::PaperStrict).unwrap());
        let (numeric, cos) = minimality_oracle(&params, &prompt, old, new).unwrap();
        worst_gap = worst_gap.max((closed - numeric) / numeric);
        worst_cos = worst_cos.min(cos);
    }
    let elapsed = t.elapsed();
    Outcome {
        id: 3,
        title: "minimality",
        passed: worst_gap <= 1e-4 && worst_cos >= 0.999 && elapsed < Duration::from_secs(60),
        detail: format!(
            "max (closed - oracle)/oracle {worst_gap:.2e} (need <= 1e-4), min |cos(q, phi)| {worst_cos:.6} \
             (need >= 0.999), 20 instances in {} (need < 60s)",
            secs(elapsed)
        ),
    }
}

fn composition_failure(runs: &mut Runs) -> Outcome {
    let c = config(ExperimentKind::Theorem1);
    assert_eq!(c.trials, 100);
    let (report, elapsed) = runs.run("theorem1", c);
    let labels = ["sum", "uniform", "cat_fitted", "arrow"];
    let accs: Vec<f64> = labels.iter().map(|l| report.mean(l, "two_hop_accuracy").unwrap()).collect();
    let shown: Vec<String> = labels.iter().zip(&accs).map(|(l, a)| format!("{l} {a:.2}")).collect();
    Outcome {
        id: 4,
        title: "composition failure",
        passed: accs.iter().all(|&a| a <= 0.10) && elapsed < Duration::from_secs(300),
        detail: format!(
            "two-hop accuracy over {} worlds: {} (need <= 0.10 each), {} (need < 5min)",
            report.seeds.len(),
            shown.join(", "),
            secs(elapsed)
        ),
    }
}

fn mixture_form(runs: &mut Runs) -> Outcome {
    let mut c = config(ExperimentKind::Theorem1);
    c.trials = 10;
    c.model.m = 16_384;
    c.combinators = vec![lora_compose::Combinator::Sum];
    let (report, _) = runs.run("theorem1_mixture", c);
    let residual = report.mean("sum", "residual_rel").unwrap();
    let e1 = report.values("sum", "c1_rel_error").into_iter().fold(0.0, f64::max);
    let e2 = report.values("sum", "c2_rel_error").into_iter().fold(0.0, f64::max);
    Outcome {
        id: 5,
        title: "mixture form",
        passed: residual <= 0.05 && e1 <= 0.10 && e2 <= 0.10,
        detail: format!(
            "mean residual_rel {residual:.2e} (need <= 0.05); worst-seed coefficient error c1 {:.1}%, c2 {:.1}% \
             (need <= 10%) at m=16384 over 10 seeds",
            100.0 * e1,
            100.0 * e2
        ),
    }
}

fn oracle_dominance(runs: &mut Runs) -> Outcome {
    let (report, _) = runs.run("library_comparison", config(ExperimentKind::LibraryComparison));
    let oracle = report.values("oracle", "two_hop_accuracy").into_iter().fold(1.0, f64::min);
    let lib2 = report.value_by_seed("lib2/arrow", "two_hop_accuracy");
    let lib3 = report.value_by_seed("lib3/arrow", "two_hop_accuracy");
    let dominated = lib2.iter().filter(|(s, a)| lib3[s] >= **a).count();
    Outcome {
        id: 6,
        title: "oracle dominance",
        passed: oracle == 1.0 && dominated == lib2.len() && !lib2.is_empty(),
        detail: format!(
            "oracle alone min accuracy {oracle:.2} (need 1.00); 3-library Arrow >= 2-library Arrow on {dominated}/{} seeds",
            lib2.len()
        ),
    }
}

fn kernel_convergence(runs: &mut Runs) -> Outcome {
    let c = config(ExperimentKind::KernelConvergence);
    assert_eq!((c.model.d, c.trials), (64, 5));
    let (report, elapsed) = runs.run("kernel_convergence", c);
    let err = report.derived["m=65536.max_mean_abs_error"];
    let p = report.derived["fitted_exponent"];
    Outcome {
        id: 7,
        title: "kernel convergence",
        passed: err <= 0.02 && (-0.6..=-0.4).contains(&p) && elapsed < Duration::from_secs(120),
        detail: format!(
            "ratio error at m=65536 {err:.4} (need <= 0.02), exponent {p:.3} (need in [-0.6, -0.4]), {} (need < 2min)",
            secs(elapsed)
        ),
    }
}

fn held_out_composition(runs: &mut Runs) -> Outcome {
    let (report, _) = runs.run("graph_library", config(ExperimentKind::GraphLibrary));
    let (held_ok, held_failed) = all_checks(&report, "disjoint/");
    let (shared_ok, shared_failed) = all_checks(&report, "shared/");
    let mut worst = 0.0f64;
    for mode in ["disjoint", "shared"] {
        for label in ["sum", "uniform", "cat_fitted", "arrow"] {
            worst = worst.max(report.mean(&format!("{mode}/{label}"), "held_out_accuracy").unwrap());
        }
    }
    let self_acc = ["disjoint", "shared"]
        .iter()
        .map(|m| report.values(m, "self_accuracy").into_iter().fold(1.0, f64::min))
        .fold(1.0, f64::min);
    let failed: Vec<String> = held_failed.into_iter().chain(shared_failed).collect();
    Outcome {
        id: 8,
        title: "held-out composition",
        passed: held_ok && shared_ok && worst <= 0.10 && self_acc == 1.0,
        detail: format!(
            "worst held-out accuracy {worst:.3} over 4 combinators x 2 modes (need <= 0.10), \
             min self-adapter accuracy {self_acc:.2} (need 1.00){}",
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }
        ),
    }
}

fn determinism(runs: &Runs) -> Outcome {
    let mut mismatched = Vec::new();
    for (label, c, csv) in &runs.done {
        let mut again = c.clone();
        again.threads = Some(2);
        let other = run(&again).unwrap().csv().unwrap();
        if &other != csv {
            mismatched.push(label.clone());
        }
    }
    Outcome {
        id: 9,
        title: "determinism",
        passed: mismatched.is_empty(),
        detail: format!(
            "{} runs repeated on 2 threads, {} CSVs differ{}",
            runs.done.len(),
            mismatched.len(),
            if mismatched.is_empty() { String::new() } else { format!(": {}", mismatched.join(" ")) }
        ),
    }
}

fn main() -> ExitCode {
    let mut runs = Runs { done: Vec::new() };
    let mut outcomes = Vec::new();
    let mut report = |o: Outcome| {
        println!("{} criterion {} ({}): {}", if o.passed { "PASS" } else { "FAIL" }, o.id, o.title, o.detail);
        outcomes.push(o.passed);
    };
    report(fact_storage());
    report(edit_exactness(&mut runs));
    report(minimality());
    report(composition_failure(&mut runs));
    report(mixture_form(&mut runs));
    report(oracle_dominance(&mut runs));
    report(kernel_convergence(&mut runs));
    report(held_out_composition(&mut runs));
    report(determinism(&runs));
    let failed = outcomes.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
