use std::path::Path;

use serde::{Deserialize, Serialize};

use super::agent::update;
use super::{fbo, ActMode, Agent, ReplayBuffer};
use crate::data::Transition;
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng};

/// Mean and spread of per-episode returns.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

impl EvalResult {
    fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), returns }
    }
}

fn rollouts(
    env: &Env,
    episodes: usize,
    seed: u64,
    mut policy: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    let mut env = env.clone();
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut s = env.reset(derive_seed(seed, &format!("eval/{ep}")));
        let mut total = 0.0;
        loop {
            let a = policy(&s)?;
            let out = env.step(&a)?;
            total += out.reward;
            if out.restart {
                break;
            }
            s = out.next_state;
        }
        returns.push(total);
    }
    Ok(EvalResult::from_returns(returns))
}

/// Undiscounted returns of deterministic-mode rollouts. Works on a copy of
/// `env`, so neither the environment nor the agent changes.
pub fn evaluate(agent: &Agent, env: &Env, episodes: usize, seed: u64) -> Result<EvalResult> {
    rollouts(env, episodes, seed, |s| agent.act_deterministic(s))
}

/// Returns of a uniformly random policy.
pub fn evaluate_random(env: &Env, episodes: usize, seed: u64) -> Result<EvalResult> {
    let mut rng = stream_rng(seed, "eval/random");
    let probe = env.clone();
    rollouts(env, episodes, seed, |_| Ok(probe.sample_action(&mut rng)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub env_step: usize,
    pub mean_eval_return: f64,
    pub std: f64,
}

pub fn write_curve(path: &Path, points: &[CurvePoint]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    for p in points {
        w.serialize(p).map_err(|e| Error::parse(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    r.deserialize()
        .enumerate()
        .map(|(row, rec)| rec.map_err(|e| Error::parse(path, format!("row {row}: {e}"))))
        .collect()
}

/// An agent interacting with one environment: replay buffer, step counter,
/// and a learning curve evaluated every `eval_interval` environment steps
/// (and once before the first step).
#[derive(Clone, Debug)]
pub struct Learner {
    pub env: Env,
    eval_env: Env,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    obs: Vec<f64>,
    env_steps: usize,
    aborted_episodes: usize,
    seed: u64,
    pub curve: Vec<CurvePoint>,
}

impl Learner {
    pub fn new(env: Env, agent: Agent, seed: u64) -> Result<Self> {
        if env.spec() != agent.spec() {
            return Err(Error::shape(format!("agent was built for a different task than {}", env.id())));
        }
        let mut env = env;
        let obs = env.reset(derive_seed(seed, "env"));
        let buffer = ReplayBuffer::new(agent.config().replay_capacity);
        let mut learner = Self {
            eval_env: env.clone(),
            env,
            agent,
            buffer,
            obs,
            env_steps: 0,
            aborted_episodes: 0,
            seed,
            curve: Vec::new(),
        };
        learner.record_evaluation()?;
        Ok(learner)
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn observation(&self) -> &[f64] {
        &self.obs
    }

    pub fn aborted_episodes(&self) -> usize {
        self.aborted_episodes
    }

    pub fn evaluate_now(&self) -> Result<EvalResult> {
        let cfg = self.agent.config();
        evaluate(&self.agent, &self.eval_env, cfg.eval_episodes, derive_seed(self.seed, "eval"))
    }

    fn record_evaluation(&mut self) -> Result<()> {
        let r = self.evaluate_now()?;
        self.curve.push(CurvePoint { env_step: self.env_steps, mean_eval_return: r.mean, std: r.std });
        Ok(())
    }

    /// Executes `action`, stores the transition, runs one update once the
    /// buffer is past warmup, and evaluates on schedule.
    pub fn step(&mut self, action: &[f64]) -> Result<Transition> {
        let out = self.env.step(action)?;
        let t = Transition {
            s: std::mem::replace(&mut self.obs, out.next_state),
            a: action.iter().zip(&self.env.spec().action_bounds).map(|(&v, b)| b.clamp(v)).collect(),
            r: out.reward,
            s_next: out.successor,
            restart: out.restart,
        };
        self.buffer.push(t.clone());
        self.env_steps += 1;
        if self.buffer.len() > self.agent.config().warmup_transitions {
            update(&mut self.agent, &self.buffer, 1)?;
        }
        if self.env_steps % self.agent.config().eval_interval == 0 {
            self.record_evaluation()?;
        }
        Ok(t)
    }

    /// `n` steps with the agent's own stochastic policy.
    pub fn run(&mut self, n: usize, mut dataset: Option<&mut Vec<Transition>>) -> Result<()> {
        for _ in 0..n {
            let obs = self.obs.clone();
            let a = self.agent.act(&obs, ActMode::Stochastic)?;
            let t = self.step(&a)?;
            if let Some(d) = dataset.as_deref_mut() {
                d.push(t);
            }
        }
        Ok(())
    }

    /// Fixed-buffer optimization on the current buffer.
    pub fn fbo(&mut self, e: usize) -> Result<()> {
        fbo(&mut self.agent, &self.buffer, e)?;
        Ok(())
    }

    /// Drops the current episode and starts a fresh one.
    pub fn abort_episode(&mut self) {
        self.aborted_episodes += 1;
        let seed = derive_seed(self.seed, &format!("abort/{}", self.aborted_episodes));
        self.obs = self.env.reset(seed);
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub dataset: Option<Vec<Transition>>,
    pub curve: Vec<CurvePoint>,
}

/// Plain RL for `steps` environment steps from a fresh buffer.
pub fn train(env: Env, agent: Agent, steps: usize, collect_dataset: bool, seed: u64) -> Result<TrainOutcome> {
    let mut learner = Learner::new(env, agent, seed)?;
    let mut dataset = collect_dataset.then(|| Vec::with_capacity(steps));
    learner.run(steps, dataset.as_mut())?;
    Ok(TrainOutcome { agent: learner.agent, buffer: learner.buffer, dataset, curve: learner.curve })
}
