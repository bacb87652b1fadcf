//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails. Takes about half an hour on one
//! core, so it only runs when selected:
//!
//! ```text
//! cargo test --release -p simknot-core --test acceptance
//! ```

mod common;

use std::path::Path;
use std::time::Instant;

use common::{
    agent_fd_errors, brute_force_knn, brute_force_pairs, knn_instance, labeled, matching_instance, random_buffer,
    reba_fd_error, single_term,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simknot::alignment::{
    cos_d, cycle_loss, reconstruction_loss, similarity_coefficient, AlignmentConfig, AlignmentModelSet,
};
use simknot::data::{knn, match_pairs};
use simknot::dynamics::DynamicsConfig;
use simknot::envs::Env;
use simknot::experiment::{cmd_ablation, cmd_transfer, Ablation};
use simknot::rl::{fbo, Agent, AgentConfig};
use simknot::simknot::{
    continue_method, normalized_auc, pre_transfer, Method, Phase, RunArtifacts, SimKnoTConfig, SourceTask,
};

const SEEDS: u64 = 5;

/// Base tasks used as targets; the twin of target `i` is source `i`.
const TARGETS: [&str; 4] = ["pointmass1d", "doubleintegrator2d", "pendulumswingup", "mountaincardense"];

/// Each twin permutes the state coordinates and reverses or permutes the
/// actions of its base task.
const TWINS: [&str; 4] = [
    "pointmass1d@perm:1,0:aaffine:-1/0",
    "doubleintegrator2d@perm:1,0,3,2:aperm:1,0",
    "pendulumswingup@perm:1,0:aaffine:-1/0",
    "mountaincardense@perm:1,0:aaffine:-1/0",
];

const SOURCE_STEPS: usize = 8000;

fn agent_config() -> AgentConfig {
    AgentConfig { eval_episodes: 5, eval_interval: 500, ..AgentConfig::default() }
}

fn dynamics_config() -> DynamicsConfig {
    DynamicsConfig { epochs: 60, max_rows: Some(3000), hidden: vec![64, 64], ..DynamicsConfig::default() }
}

/// The scaled-down transfer protocol: 3000 pre-transfer steps, 3000
/// transfer steps, 250 FBO updates, and a 9000-step budget.
fn toy_protocol() -> SimKnoTConfig {
    SimKnoTConfig {
        pre_transfer_steps: 3000,
        transfer_steps: 3000,
        fbo_updates: 250,
        total_budget: 9000,
        agent: agent_config(),
        alignment: AlignmentConfig {
            max_rows: Some(1500),
            epochs: 30,
            hidden: vec![32; 4],
            batch_size: 128,
            ..AlignmentConfig::default()
        },
        dynamics: dynamics_config(),
        ..SimKnoTConfig::default()
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    for seed in 0..SEEDS {
        for term in ["alignment", "geometry", "reconstruction", "cycle", "latent_norm"] {
            let e = reba_fd_error(seed, &single_term(term));
            if e > worst {
                (worst, worst_name) = (e, format!("{term} seed {seed}"));
            }
        }
        let (critic, actor) = agent_fd_errors(seed);
        for (name, e) in [("critic", critic), ("actor", actor)] {
            if e > worst {
                (worst, worst_name) = (e, format!("{name} seed {seed}"));
            }
        }
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} ({worst_name}) < 1e-4"))
}

fn closed_forms() -> Outcome {
    let mut checks = vec![
        ("W(0.5,0.5,0.25)", similarity_coefficient(0.5, 0.5, 0.25), 1.0),
        ("W(0,1,0.25)", similarity_coefficient(0.0, 1.0, 0.25), (-16.0f64).exp()),
        ("cos_d(a,a)", cos_d(&[0.3, 0.8, 0.1], &[0.3, 0.8, 0.1]).unwrap(), 1.0),
        ("cos_d(0,1)", cos_d(&[0.0; 3], &[1.0; 3]).unwrap(), -1.0),
    ];
    let ident = AlignmentModelSet::identity("pointmass1d", 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Array2::from_shape_simple_fn((50, 3), || rng.random::<f64>());
    let g = &ident.state;
    checks.push(("L_R", reconstruction_loss(&g.enc_x, &g.dec_x, x.view()).unwrap(), 0.0));
    checks.push(("L_C", cycle_loss(&g.enc_x, &g.dec_x, &g.enc_y, &g.dec_y, x.view()).unwrap(), 0.0));
    let worst = checks.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|(_, g, w)| (g - w).abs() >= 1e-9).map(|c| c.0).collect();
    outcome(failed.is_empty(), format!("{} values, worst deviation {worst:.1e}, failing {failed:?}", checks.len()))
}

fn approximation_oracles() -> Outcome {
    let mut mismatches = 0;
    for seed in 0..200 {
        let (rx, ry) = matching_instance(seed);
        let got: Vec<(usize, usize)> =
            match_pairs(&labeled(&rx), &labeled(&ry), 0.25).unwrap().pairs.iter().map(|p| (p.x, p.y)).collect();
        mismatches += usize::from(got != brute_force_pairs(&rx, &ry, 0.25));
        let (data, query, k) = knn_instance(seed);
        let oracle = brute_force_knn(&query, &data, k);
        let ok = match knn(&query, data.view(), k) {
            Ok(got) => got == oracle,
            Err(_) => oracle.len() < k,
        };
        mismatches += usize::from(!ok);
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over 200 matching and 200 kNN instances"))
}

fn ablation() -> Outcome {
    let cfg = SimKnoTConfig { agent: agent_config(), dynamics: dynamics_config(), ..SimKnoTConfig::default() };
    let seeds: Vec<u64> = (0..SEEDS).collect();
    let report = cmd_ablation("pointmass1d", &seeds, 5000, &cfg, None).unwrap();
    let means: Vec<String> = Ablation::ALL.iter().map(|&c| format!("{} {:.3}", c.name(), report.mean(c))).collect();
    let ordered = report.ordered_seeds();
    let full = report.mean(Ablation::Full);
    let both = report.mean(Ablation::WithoutBoth);
    outcome(
        full >= 0.8 && ordered >= 4 && both < 0.5,
        format!("means [{}], ordering holds in {ordered}/5 seeds", means.join(", ")),
    )
}

/// Per-target results of the shared transfer sweep.
struct TargetRuns {
    ranks_of_twin: Vec<Option<usize>>,
    auc: [Vec<f64>; 3],
    runs: Vec<RunArtifacts>,
}

const METHODS: [Method; 3] = [Method::Sac, Method::SacFbo, Method::Simknot];

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sweep(sources: &[SourceTask]) -> Vec<TargetRuns> {
    let cfg = toy_protocol();
    TARGETS
        .iter()
        .enumerate()
        .map(|(twin, id)| {
            let env = Env::from_id(id).unwrap();
            let mut out = TargetRuns { ranks_of_twin: Vec::new(), auc: Default::default(), runs: Vec::new() };
            for seed in 0..SEEDS {
                let shared = pre_transfer(&env, &cfg, seed).unwrap();
                for (k, m) in METHODS.into_iter().enumerate() {
                    let run = continue_method(m, sources, shared.clone(), &cfg, seed).unwrap();
                    out.auc[k].push(normalized_auc(&run.curve));
                    if m == Method::Simknot {
                        out.ranks_of_twin.push(run.similarity.as_ref().and_then(|r| r.rank_of(twin)));
                    }
                    out.runs.push(run);
                }
            }
            eprintln!(
                "  {id}: AUC sac {:.2} sac+fbo {:.2} simknot {:.2}, twin ranks {:?}",
                mean(&out.auc[0]),
                mean(&out.auc[1]),
                mean(&out.auc[2]),
                out.ranks_of_twin
            );
            out
        })
        .collect()
}

fn source_selection(results: &[TargetRuns]) -> Outcome {
    let rates: Vec<f64> = results
        .iter()
        .map(|r| r.ranks_of_twin.iter().filter(|rank| rank.is_some_and(|k| k < 2)).count() as f64 / SEEDS as f64)
        .collect();
    let passing = rates.iter().filter(|&&r| r >= 0.8).count();
    let detail: Vec<String> = TARGETS.iter().zip(&rates).map(|(t, r)| format!("{t} {:.0}%", 100.0 * r)).collect();
    outcome(passing >= 3, format!("twin in top 2: [{}]; {passing}/4 targets at >= 80%", detail.join(", ")))
}

fn transfer_benefit(results: &[TargetRuns]) -> Outcome {
    let means: Vec<[f64; 3]> = results.iter().map(|r| [mean(&r.auc[0]), mean(&r.auc[1]), mean(&r.auc[2])]).collect();
    let over_sac = means.iter().filter(|m| m[2] > m[0]).count();
    let over_fbo = means.iter().filter(|m| m[2] >= m[1]).count();
    let detail: Vec<String> =
        TARGETS.iter().zip(&means).map(|(t, m)| format!("{t} {:.2}/{:.2}/{:.2}", m[0], m[1], m[2])).collect();
    outcome(
        over_sac >= 3 && over_fbo >= 2,
        format!(
            "AUC sac/sac+fbo/simknot [{}]; beats sac on {over_sac}/4, >= sac+fbo on {over_fbo}/4",
            detail.join(", ")
        ),
    )
}

fn structural(sources: &[SourceTask], checksums: &[u64], results: &[TargetRuns]) -> Outcome {
    let mut problems = Vec::new();

    let (env, buffer) = random_buffer("doubleintegrator2d", 500, 3);
    let mut agent = Agent::new(env.spec(), &agent_config(), 3).unwrap();
    let before = buffer.checksum();
    fbo(&mut agent, &buffer, 100).unwrap();
    if buffer.checksum() != before {
        problems.push("fbo changed its buffer".to_string());
    }

    let after: Vec<u64> = sources.iter().map(|s| s.checksum()).collect();
    if after != checksums {
        problems.push("a source changed during the transfer runs".to_string());
    }

    let budget = toy_protocol().total_budget;
    for run in results.iter().flat_map(|r| &r.runs) {
        let contiguous = run.phases.windows(2).all(|w| w[0].end_step == w[1].start_step);
        let first = run.phases.first().map(|p| (p.phase, p.start_step));
        let last = run.phases.last().map(|p| (p.phase, p.end_step));
        if !contiguous || first != Some((Phase::PreTransfer, 0)) || last != Some((Phase::PostTransfer, budget)) {
            problems.push(format!("phase accounting of {} on {}", run.method.name(), run.target_id));
        }
        if run.env_steps() != budget {
            problems.push(format!("{} on {} used {} steps", run.method.name(), run.target_id, run.env_steps()));
        }
    }

    let env = Env::from_id("pendulumswingup").unwrap();
    let off = SimKnoTConfig {
        pre_transfer_steps: 1000,
        transfer_steps: 0,
        fbo_updates: 0,
        total_budget: 2000,
        ..toy_protocol()
    };
    let simk = continue_method(Method::Simknot, sources, pre_transfer(&env, &off, 9).unwrap(), &off, 9).unwrap();
    let sac = continue_method(Method::Sac, &[], pre_transfer(&env, &off, 9).unwrap(), &off, 9).unwrap();
    if simk.curve != sac.curve || simk.agent.checksum() != sac.agent.checksum() {
        problems.push("disabled transfer differs from plain RL".to_string());
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() { "all invariants hold".to_string() } else { problems.join("; ") },
    )
}

fn determinism(pool_dir: &Path) -> Outcome {
    let dirs: Vec<_> = (0..TWINS.len()).map(|i| pool_dir.join(format!("twin{i}"))).collect();
    let cfg = SimKnoTConfig {
        pre_transfer_steps: 1000,
        transfer_steps: 1000,
        fbo_updates: 100,
        total_budget: 3000,
        ..toy_protocol()
    };
    let out = tempfile::tempdir().unwrap();
    let curves: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let dir = out.path().join(name);
            cmd_transfer("doubleintegrator2d", &dirs, Method::Simknot, &cfg, 11, &dir).unwrap();
            std::fs::read(dir.join("curves/learning_curve.csv")).unwrap()
        })
        .collect();
    outcome(
        curves[0] == curves[1],
        format!("{} and {} byte curves, identical: {}", curves[0].len(), curves[1].len(), curves[0] == curves[1]),
    )
}

fn report(n: usize, name: &str, started: Instant, o: &Outcome, failures: &mut usize) {
    *failures += usize::from(!o.pass);
    println!(
        "{} criterion {n} ({name}): {} [{:.0?}]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        started.elapsed()
    );
}

fn main() {
    let mut failures = 0;
    let t = Instant::now();
    report(1, "gradient correctness", t, &gradients(), &mut failures);
    let t = Instant::now();
    report(2, "closed-form values", t, &closed_forms(), &mut failures);
    let t = Instant::now();
    report(3, "approximation oracles", t, &approximation_oracles(), &mut failures);
    let t = Instant::now();
    report(4, "self-pair ablation", t, &ablation(), &mut failures);

    let t = Instant::now();
    let pool = tempfile::tempdir().unwrap();
    let sources: Vec<SourceTask> = TWINS
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let s = SourceTask::train(id, SOURCE_STEPS, &agent_config(), &dynamics_config(), 1000 + i as u64)
                .unwrap()
                .source;
            s.save(&pool.path().join(format!("twin{i}"))).unwrap();
            s
        })
        .collect();
    let checksums: Vec<u64> = sources.iter().map(|s| s.checksum()).collect();
    eprintln!("  trained {} sources in {:.0?}", sources.len(), t.elapsed());
    let results = sweep(&sources);
    report(5, "source selection", t, &source_selection(&results), &mut failures);
    report(6, "transfer benefit", t, &transfer_benefit(&results), &mut failures);
    let t = Instant::now();
    report(7, "structural invariants", t, &structural(&sources, &checksums, &results), &mut failures);
    let t = Instant::now();
    report(8, "determinism", t, &determinism(pool.path()), &mut failures);

    println!("{} of 8 criteria passed", 8 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
