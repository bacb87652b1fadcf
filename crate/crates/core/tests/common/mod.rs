#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use simknot::alignment::{reba_eval, similarity_coefficient, AlignmentConfig, GroupBatch, GroupNets, Lambdas};
use simknot::data::{match_pairs, normalize, DatasetBounds, LabeledSet, NormalizedDataset, Transition};
use simknot::dynamics::DynamicsConfig;
use simknot::envs::Env;
use simknot::nn::Mlp;
use simknot::rl::{update, Agent, AgentConfig, ReplayBuffer};
use simknot::similarity::SimilarityConfig;
use simknot::simknot::{SimKnoTConfig, SourceTask};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a floor so that near-zero components compare on an
/// absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of
/// `loss` around `net`'s parameters.
pub fn fd_max_rel_err(net: &Mlp, analytic: &[f64], mut loss: impl FnMut(&Mlp) -> f64) -> f64 {
    let base = net.params_flat();
    assert_eq!(base.len(), analytic.len());
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + FD_STEP;
        probe.set_params_flat(&p).unwrap();
        let up = loss(&probe);
        p[i] = base[i] - FD_STEP;
        probe.set_params_flat(&p).unwrap();
        let down = loss(&probe);
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// Random alignment group on random labelled sets, with the full batch.
pub fn random_group(seed: u64) -> (GroupNets, GroupBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, q, m, n) = (2, 3, 4, 7);
    let mut nets = GroupNets {
        enc_x: Mlp::new(&[p, 6, m], &mut rng).unwrap(),
        dec_x: Mlp::new(&[m, 6, p], &mut rng).unwrap(),
        enc_y: Mlp::new(&[q, 6, m], &mut rng).unwrap(),
        dec_y: Mlp::new(&[m, 6, q], &mut rng).unwrap(),
    };
    // Zero biases put dead-unit rows exactly on a ReLU kink; move off it.
    for net in nets.nets_mut() {
        let params: Vec<f64> = net.params_flat().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        net.set_params_flat(&params).unwrap();
    }
    let x = Array2::from_shape_simple_fn((n, p), || rng.random::<f64>());
    let y = Array2::from_shape_simple_fn((n + 2, q), || rng.random::<f64>());
    let rx: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let ry: Vec<f64> = (0..n + 2).map(|_| rng.random()).collect();
    let pairs =
        match_pairs(&LabeledSet::new(x.clone(), rx).unwrap(), &LabeledSet::new(y.clone(), ry).unwrap(), 0.25).unwrap();
    let batch = GroupBatch::full(x.view(), y.view(), &pairs, 2).unwrap();
    (nets, batch)
}

/// Worst finite-difference mismatch of the weighted objective's gradient
/// over all four networks of a random group.
pub fn reba_fd_error(seed: u64, lambdas: &Lambdas) -> f64 {
    let (nets, batch) = random_group(seed);
    let (_, grads) = reba_eval(&nets, &batch, lambdas).unwrap();
    let mut worst: f64 = 0.0;
    for (k, g) in grads.all().iter().enumerate() {
        let net = nets.nets()[k];
        let err = fd_max_rel_err(net, &g.flat(), |probe| {
            let mut n = nets.clone();
            *n.nets_mut()[k] = probe.clone();
            reba_eval(&n, &batch, lambdas).unwrap().0.total
        });
        worst = worst.max(err);
    }
    worst
}

/// Only the named term switched on.
pub fn single_term(name: &str) -> Lambdas {
    let mut l = Lambdas::zero();
    match name {
        "alignment" => l.alignment = 1.0,
        "geometry" => l.geometry = 1.0,
        "reconstruction" => l.reconstruction = 1.0,
        "cycle" => l.cycle = 1.0,
        "latent_norm" => l.latent_norm = 1.0,
        other => panic!("unknown term {other}"),
    }
    l
}

pub fn small_agent_config() -> AgentConfig {
    AgentConfig {
        hidden: vec![8, 8],
        batch_size: 8,
        warmup_transitions: 10,
        eval_episodes: 2,
        eval_interval: 50,
        ..AgentConfig::default()
    }
}

/// Random-action transitions from a fresh `env_id`.
pub fn random_buffer(env_id: &str, n: usize, seed: u64) -> (Env, ReplayBuffer) {
    let mut env = Env::from_id(env_id).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = env.reset(seed);
    let mut b = ReplayBuffer::new(10_000);
    for _ in 0..n {
        let a = env.sample_action(&mut rng);
        let out = env.step(&a).unwrap();
        b.push(Transition { s, a, r: out.reward, s_next: out.successor, restart: out.restart });
        s = out.next_state;
    }
    (env, b)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, k), || StandardNormal.sample(rng))
}

/// Worst finite-difference mismatch of the critic and actor loss gradients.
pub fn agent_fd_errors(seed: u64) -> (f64, f64) {
    let (env, buffer) = random_buffer("doubleintegrator2d", 16, seed);
    let mut agent = Agent::new(env.spec(), &small_agent_config(), seed).unwrap();
    // Move off the initial point so all terms are active, then off any
    // zero bias that would leave a pre-activation on a ReLU kink.
    update(&mut agent, &buffer, 5).unwrap();
    let mut jitter = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for net in [&mut agent.actor.net, &mut agent.q1.net, &mut agent.q2.net] {
        let params: Vec<f64> = net.params_flat().iter().map(|v| v + jitter.random_range(-0.1..0.1)).collect();
        net.set_params_flat(&params).unwrap();
    }
    let items: Vec<&Transition> = buffer.iter().collect();
    let batch = agent.batch_from(&items).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = gaussian(&mut rng, 16, 2);

    let loss = agent.critic_loss(&batch, &eps).unwrap();
    let critic = fd_max_rel_err(&agent.q1.net, &loss.q1.flat(), |net| {
        let mut probe = agent.clone();
        probe.q1.net = net.clone();
        probe.critic_loss(&batch, &eps).unwrap().value
    })
    .max(fd_max_rel_err(&agent.q2.net, &loss.q2.flat(), |net| {
        let mut probe = agent.clone();
        probe.q2.net = net.clone();
        probe.critic_loss(&batch, &eps).unwrap().value
    }));
    let loss = agent.actor_loss(batch.obs.view(), &eps).unwrap();
    let actor = fd_max_rel_err(&agent.actor.net, &loss.grads.flat(), |net| {
        let mut probe = agent.clone();
        probe.actor.net = net.clone();
        probe.actor_loss(batch.obs.view(), &eps).unwrap().value
    });
    (critic, actor)
}

/// Normalized dataset of `n` random-action steps on `env_id`.
pub fn random_dataset(env_id: &str, n: usize, seed: u64) -> NormalizedDataset {
    let (env, buffer) = random_buffer(env_id, n, seed);
    let raw: Vec<Transition> = buffer.iter().cloned().collect();
    normalize(&env.id(), &raw, &DatasetBounds::from_spec(env.spec())).unwrap()
}

/// Pairs from an exhaustive argmax of `W` over the full cross product, ties
/// to the lowest index, sorted and deduplicated.
pub fn brute_force_pairs(rx: &[f64], ry: &[f64], delta: f64) -> Vec<(usize, usize)> {
    let argmax = |r: f64, other: &[f64]| {
        let mut best = 0;
        for (j, &o) in other.iter().enumerate() {
            if similarity_coefficient(r, o, delta) > similarity_coefficient(r, other[best], delta) {
                best = j;
            }
        }
        best
    };
    let mut pairs: Vec<(usize, usize)> = rx.iter().enumerate().map(|(i, &r)| (i, argmax(r, ry))).collect();
    pairs.extend(ry.iter().enumerate().map(|(j, &r)| (argmax(r, rx), j)));
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

/// The first `k` rows of a full sort by `(distance, index)`, skipping rows
/// equal to the query.
pub fn brute_force_knn(point: &[f64], data: &Array2<f64>, k: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = data
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| (row.iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
        .filter(|(d, _)| *d > 0.0)
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Random reward sets of sizes in 1..=64; every other instance draws from a
/// coarse grid so that ties occur.
pub fn matching_instance(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coarse = seed % 2 == 0;
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n).map(|_| if coarse { rng.random_range(0..=8) as f64 / 8.0 } else { rng.random::<f64>() }).collect()
    };
    let (nx, ny) = (1 + (seed as usize * 7) % 64, 1 + (seed as usize * 13) % 64);
    (draw(nx), draw(ny))
}

/// Random point set of 2..=64 rows with a query that is sometimes a member
/// and some duplicated rows on a coarse grid.
pub fn knn_instance(seed: u64) -> (Array2<f64>, Vec<f64>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(4..=64usize);
    let dim = rng.random_range(1..=4usize);
    let data = Array2::from_shape_simple_fn((n, dim), || rng.random_range(0..=6) as f64 / 6.0);
    let query = if rng.random_bool(0.5) {
        data.row(rng.random_range(0..n)).to_vec()
    } else {
        (0..dim).map(|_| rng.random::<f64>()).collect()
    };
    let distinct = data.rows().into_iter().filter(|r| r.iter().zip(&query).any(|(a, b)| a != b)).count();
    let k = rng.random_range(1..=distinct.clamp(1, 8).min(n - 1));
    (data, query, k)
}

/// Labelled sets for `match_pairs` from reward vectors.
pub fn labeled(rewards: &[f64]) -> LabeledSet {
    LabeledSet::new(Array2::zeros((rewards.len(), 1)), rewards.to_vec()).unwrap()
}

/// A pipeline small enough for structural tests: 300 + 200 steps, 50 FBO
/// updates, a 700-step budget, and tiny networks.
pub fn tiny_pipeline() -> SimKnoTConfig {
    SimKnoTConfig {
        pre_transfer_steps: 300,
        transfer_steps: 200,
        fbo_updates: 50,
        total_budget: 700,
        agent: AgentConfig { hidden: vec![16, 16], eval_interval: 100, eval_episodes: 2, ..AgentConfig::default() },
        alignment: AlignmentConfig { hidden: vec![16], epochs: 2, max_rows: Some(300), ..AlignmentConfig::default() },
        dynamics: DynamicsConfig { hidden: vec![16], epochs: 5, ..DynamicsConfig::default() },
        similarity: SimilarityConfig::default(),
    }
}

/// A source trained briefly under `tiny_pipeline` settings.
pub fn tiny_source(env_id: &str, steps: usize, seed: u64) -> SourceTask {
    let cfg = tiny_pipeline();
    SourceTask::train(env_id, steps, &cfg.agent, &cfg.dynamics, seed).unwrap().source
}
