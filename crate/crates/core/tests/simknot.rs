mod common;

use common::{tiny_pipeline, tiny_source};
use simknot::alignment::AlignmentModelSet;
use simknot::envs::Env;
use simknot::rl::{evaluate, Agent, CurvePoint, Learner};
use simknot::simknot::{normalized_auc, pre_transfer, run_method, transfer_policy, Method, Phase, RunArtifacts};

fn learner_on(env_id: &str, seed: u64) -> Learner {
    let env = Env::from_id(env_id).unwrap();
    let agent = Agent::new(env.spec(), &tiny_pipeline().agent, seed).unwrap();
    Learner::new(env, agent, seed).unwrap()
}

fn assert_contiguous(run: &RunArtifacts, expected: &[Phase]) {
    let phases: Vec<Phase> = run.phases.iter().map(|p| p.phase).collect();
    assert_eq!(phases, expected);
    assert_eq!(run.phases[0].start_step, 0);
    for w in run.phases.windows(2) {
        assert_eq!(w[0].end_step, w[1].start_step);
    }
    assert_eq!(run.env_steps(), run.config.total_budget);
}

#[test]
fn zero_transfer_steps_change_nothing() {
    let source = tiny_source("pointmass1d", 300, 1);
    let mut learner = learner_on("pointmass1d", 2);
    learner.run(150, None).unwrap();
    let (agent, buffer) = (learner.agent.checksum(), learner.buffer.checksum());
    let maps = AlignmentModelSet::identity("pointmass1d", 2, 1);
    assert_eq!(transfer_policy(&source, &maps, &mut learner, 0).unwrap(), 0);
    assert_eq!(learner.agent.checksum(), agent);
    assert_eq!(learner.buffer.checksum(), buffer);
}

#[test]
fn transfer_fills_the_buffer_with_bounded_actions() {
    let source = tiny_source("doubleintegrator2d", 300, 3);
    let before = source.checksum();
    let target = Env::from_id("doubleintegrator2d@aperm:1,0:aaffine:2/0.5,-1/0").unwrap();
    let agent = Agent::new(target.spec(), &tiny_pipeline().agent, 4).unwrap();
    let mut learner = Learner::new(target, agent, 4).unwrap();
    learner.run(120, None).unwrap();
    let (len, updates) = (learner.buffer.len(), learner.agent.updates());
    let maps = AlignmentModelSet::untrained(
        &source.env_id,
        &learner.env.id(),
        simknot::alignment::PairDims { source_state: 4, source_action: 2, target_state: 4, target_action: 2 },
        &[8],
        5,
    )
    .unwrap();
    transfer_policy(&source, &maps, &mut learner, 250).unwrap();
    assert_eq!(learner.buffer.len(), len + 250);
    assert_eq!(learner.agent.updates(), updates + 250);
    assert_eq!(source.checksum(), before);
    let bounds = &learner.env.spec().action_bounds;
    for t in learner.buffer.iter().skip(len) {
        assert!(t.a.iter().zip(bounds).all(|(a, b)| b.contains(*a)), "{:?}", t.a);
    }
}

#[test]
fn identity_transfer_replays_the_expert() {
    let source = tiny_source("pointmass1d", 4000, 6);
    let env = Env::from_id("pointmass1d").unwrap();
    let horizon = env.spec().max_episode_steps as f64;
    let expert = evaluate(&source.agent, &env, 10, 0).unwrap().mean / horizon;
    let mut learner = learner_on("pointmass1d", 7);
    learner.run(200, None).unwrap();
    let own = learner.evaluate_now().unwrap().mean / horizon;
    let start = learner.buffer.len();
    let maps = AlignmentModelSet::identity("pointmass1d", 2, 1);
    transfer_policy(&source, &maps, &mut learner, 2000).unwrap();
    let rewards: Vec<f64> = learner.buffer.iter().skip(start).map(|t| t.r).collect();
    let per_step = rewards.iter().sum::<f64>() / rewards.len() as f64;
    assert!(per_step > own, "transferred {per_step} vs untrained {own}");
    assert!(per_step > 0.9 * expert, "transferred {per_step} vs expert {expert}");
}

#[test]
fn every_method_spends_exactly_the_budget() {
    let sources = vec![tiny_source("pointmass1d", 300, 8), tiny_source("mountaincardense", 300, 9)];
    let env = Env::from_id("pointmass1d@perm:1,0").unwrap();
    let cfg = tiny_pipeline();
    let full = [Phase::PreTransfer, Phase::Transfer, Phase::Fbo, Phase::PostTransfer];
    for method in [Method::Simknot, Method::SacFbo] {
        let run = run_method(method, &sources, &env, &cfg, 10).unwrap();
        assert_contiguous(&run, &full);
        let fbo = &run.phases[2];
        assert_eq!((fbo.end_step - fbo.start_step, fbo.updates), (0, 50));
    }
    let sac = run_method(Method::Sac, &[], &env, &cfg, 10).unwrap();
    assert_contiguous(&sac, &[Phase::PreTransfer, Phase::PostTransfer]);
}

#[test]
fn full_run_leaves_sources_untouched_and_ranks_them() {
    let sources = vec![tiny_source("pointmass1d", 300, 11), tiny_source("pendulumswingup", 300, 12)];
    let before: Vec<u64> = sources.iter().map(|s| s.checksum()).collect();
    let env = Env::from_id("pointmass1d").unwrap();
    let run = run_method(Method::Simknot, &sources, &env, &tiny_pipeline(), 13).unwrap();
    let after: Vec<u64> = sources.iter().map(|s| s.checksum()).collect();
    assert_eq!(before, after);
    let report = run.similarity.as_ref().unwrap();
    let mut ranking = report.ranking.clone();
    ranking.sort_unstable();
    assert_eq!(ranking, vec![0, 1]);
    assert_eq!(run.sim_id, Some(report.ranking[0]));
    assert!(run.alignments.iter().all(Option::is_some));
}

#[test]
fn single_source_is_selected() {
    let sources = vec![tiny_source("mountaincardense", 300, 14)];
    let env = Env::from_id("pointmass1d").unwrap();
    let run = run_method(Method::Simknot, &sources, &env, &tiny_pipeline(), 15).unwrap();
    assert_eq!(run.sim_id, Some(0));
}

#[test]
fn disabled_transfer_reproduces_plain_rl() {
    let env = Env::from_id("doubleintegrator2d").unwrap();
    let cfg = simknot::simknot::SimKnoTConfig { transfer_steps: 0, fbo_updates: 0, ..tiny_pipeline() };
    let sources = vec![tiny_source("pointmass1d", 300, 16)];
    let simk = run_method(Method::Simknot, &sources, &env, &cfg, 17).unwrap();
    let sac = run_method(Method::Sac, &[], &env, &cfg, 17).unwrap();
    assert_eq!(simk.curve, sac.curve);
    assert_eq!(simk.agent.checksum(), sac.agent.checksum());
    assert!(simk.similarity.is_none());
}

#[test]
fn runs_are_reproducible_and_saved_in_the_documented_layout() {
    let sources = vec![tiny_source("pointmass1d", 300, 18)];
    let env = Env::from_id("pointmass1d").unwrap();
    let a = run_method(Method::Simknot, &sources, &env, &tiny_pipeline(), 19).unwrap();
    let b = run_method(Method::Simknot, &sources, &env, &tiny_pipeline(), 19).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(normalized_auc(&a.curve), normalized_auc(&b.curve));

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    for f in [
        "config.json",
        "similarity.json",
        "log.jsonl",
        "curves/learning_curve.csv",
        "curves/pre-transfer.csv",
        "curves/transfer.csv",
        "curves/post-transfer.csv",
        "checkpoints/policy",
        "checkpoints/alignment_0",
    ] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert!(log.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["phase"].is_string()));
}

#[test]
fn pre_transfer_collects_one_transition_per_step() {
    let env = Env::from_id("mountaincardense").unwrap();
    let (learner, data, rec) = pre_transfer(&env, &tiny_pipeline(), 20).unwrap();
    assert_eq!(data.len(), 300);
    assert_eq!(learner.buffer.len(), 300);
    assert_eq!((rec.start_step, rec.end_step), (0, 300));
    assert_eq!(rec.updates, 300 - tiny_pipeline().agent.warmup_transitions as u64);
}

#[test]
fn over_budget_configs_are_rejected() {
    let env = Env::from_id("pointmass1d").unwrap();
    let cfg = simknot::simknot::SimKnoTConfig { total_budget: 400, ..tiny_pipeline() };
    assert!(run_method(Method::Sac, &[], &env, &cfg, 0).is_err());
    assert!(run_method(Method::Simknot, &[], &env, &tiny_pipeline(), 0).is_err());
}

#[test]
fn fbo_baseline_departs_from_plain_rl() {
    let env = Env::from_id("pointmass1d").unwrap();
    let sac = run_method(Method::Sac, &[], &env, &tiny_pipeline(), 21).unwrap();
    let fbo = run_method(Method::SacFbo, &[], &env, &tiny_pipeline(), 21).unwrap();
    assert_eq!(fbo.agent.updates(), sac.agent.updates() + 50);
    assert_ne!(fbo.agent.checksum(), sac.agent.checksum());
    let split = fbo.phases[2].end_step;
    let cut = |c: &[CurvePoint]| c.iter().cloned().partition::<Vec<CurvePoint>, _>(|p| p.env_step < split);
    let ((sac_before, sac_after), (fbo_before, fbo_after)) = (cut(&sac.curve), cut(&fbo.curve));
    assert_eq!(sac_before, fbo_before);
    assert_ne!(sac_after, fbo_after);
}
