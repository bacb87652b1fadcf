//! Entropy-regularized off-policy actor-critic with a replay buffer,
//! fixed-buffer optimization, and deterministic evaluation.

mod agent;
mod checkpoint;
mod replay;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use agent::{
    fbo, policy_backward, policy_sample, temperature_loss, update, ActMode, ActorLoss, Agent, Batch, CriticLoss,
    PolicySample, UpdateOutcome, UpdateStats, LOG_STD_MAX, LOG_STD_MIN,
};
pub use checkpoint::{load_agent, save_agent, AGENT_FORMAT_VERSION};
pub use replay::ReplayBuffer;
pub use train::{
    evaluate, evaluate_random, read_curve, train, write_curve, CurvePoint, EvalResult, Learner, TrainOutcome,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub alpha_lr: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    /// Minimum buffer size before gradient updates start.
    pub warmup_transitions: usize,
    pub replay_capacity: usize,
    pub initial_alpha: f64,
    /// Defaults to `−action_dim`.
    pub target_entropy: Option<f64>,
    /// Environment steps between evaluations.
    pub eval_interval: usize,
    pub eval_episodes: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            lr: 1e-3,
            alpha_lr: 1e-3,
            batch_size: 64,
            hidden: vec![64, 64],
            warmup_transitions: 100,
            replay_capacity: 500_000,
            initial_alpha: 1.0,
            target_entropy: None,
            eval_interval: 1000,
            eval_episodes: 20,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        for (name, v) in [("lr", self.lr), ("alpha_lr", self.alpha_lr), ("initial_alpha", self.initial_alpha)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("batch_size, replay_capacity and hidden widths must be positive"));
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return Err(Error::invalid("eval_interval and eval_episodes must be positive"));
        }
        Ok(())
    }
}
