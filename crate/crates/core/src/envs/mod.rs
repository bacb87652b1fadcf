//! Episodic continuous-control tasks with bounded states, actions and
//! dense rewards, addressed by string ids.
//!
//! An id is a base task name optionally followed by `@` and a serialized
//! [`DomainTransform`], e.g. `pointmass1d@perm:1,0:pad:1/const/0`.

mod tasks;
mod transform;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use tasks::{DoubleIntegrator2D, MountainCarDense, PendulumSwingUp, PointMass1D, Task, BASE_TASK_IDS};
pub use transform::{Affine, DomainTransform, PadFill};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        let b = Bounds { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower < self.upper) || !self.lower.is_finite() || !self.upper.is_finite() {
            return Err(Error::invalid(format!(
                "bounds need finite lower < upper, got [{}, {}]",
                self.lower, self.upper
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lower, self.upper)
    }

    /// `(v − lower) / (upper − lower)`.
    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.lower) / self.width()
    }

    pub fn denormalize(&self, u: f64) -> f64 {
        self.lower + u * self.width()
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

/// Dimensions and bounds of a task's spaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub state_bounds: Vec<Bounds>,
    pub action_bounds: Vec<Bounds>,
    pub reward_bounds: Bounds,
    pub max_episode_steps: usize,
}

impl EnvSpec {
    pub fn state_dim(&self) -> usize {
        self.state_bounds.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_bounds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_bounds.is_empty() || self.action_bounds.is_empty() {
            return Err(Error::invalid("state and action spaces need at least one variable"));
        }
        for b in self.state_bounds.iter().chain(&self.action_bounds).chain(std::iter::once(&self.reward_bounds)) {
            b.validate()?;
        }
        if self.max_episode_steps == 0 {
            return Err(Error::invalid("max_episode_steps must be at least 1"));
        }
        Ok(())
    }
}

/// Result of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    /// The state the agent acts from next: a fresh initial state when
    /// `restart` is set.
    pub next_state: Vec<f64>,
    pub restart: bool,
    /// The state actually reached by this step (equals `next_state` unless
    /// the episode restarted).
    pub successor: Vec<f64>,
    pub action_clamped: bool,
}

/// A base task, optionally seen through a representation transform.
#[derive(Clone, Debug)]
pub struct Env {
    task: Task,
    transform: Option<DomainTransform>,
    spec: EnvSpec,
    latent: Vec<f64>,
    observation: Vec<f64>,
    steps_taken: usize,
    rng: ChaCha8Rng,
    pad_rng: ChaCha8Rng,
    clamped_actions: u64,
}

const PAD_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

impl Env {
    pub fn new(task: Task) -> Self {
        let spec = task.spec();
        let mut env = Self {
            task,
            transform: None,
            spec,
            latent: Vec::new(),
            observation: Vec::new(),
            steps_taken: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
            pad_rng: ChaCha8Rng::seed_from_u64(PAD_STREAM),
            clamped_actions: 0,
        };
        env.reset(0);
        env
    }

    /// Looks up a registered id such as `pendulumswingup` or
    /// `pointmass1d@perm:1,0`.
    pub fn from_id(id: &str) -> Result<Self> {
        let (base, suffix) = match id.split_once('@') {
            Some((b, s)) => (b, Some(s)),
            None => (id, None),
        };
        let task = Task::from_name(base)
            .ok_or_else(|| Error::invalid(format!("unknown task id `{base}` (known: {})", BASE_TASK_IDS.join(", "))))?;
        let env = Env::new(task);
        match suffix {
            None => Ok(env),
            Some(s) => env.make_variant(DomainTransform::parse_id_suffix(s)?),
        }
    }

    /// Wraps the base task in a representation transform. The transform
    /// replaces any previous one.
    pub fn make_variant(self, transform: DomainTransform) -> Result<Self> {
        let base = self.task.spec();
        transform.validate(base.state_dim(), base.action_dim())?;
        let spec = transform.apply_to_spec(&base);
        spec.validate()?;
        let mut env = Self { transform: Some(transform), spec, ..self };
        env.reset(0);
        Ok(env)
    }

    /// Canonical id; parsing it yields an equivalent environment.
    pub fn id(&self) -> String {
        match &self.transform {
            Some(t) if !t.to_id_suffix().is_empty() => {
                format!("{}@{}", self.task.name(), t.to_id_suffix())
            }
            _ => self.task.name().to_string(),
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn transform(&self) -> Option<&DomainTransform> {
        self.transform.as_ref()
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    /// Latent (base-task) state.
    pub fn latent_state(&self) -> &[f64] {
        &self.latent
    }

    pub fn observation(&self) -> &[f64] {
        &self.observation
    }

    /// Number of actions clipped into bounds so far.
    pub fn clamped_actions(&self) -> u64 {
        self.clamped_actions
    }

    fn observe(&mut self, latent: &[f64]) -> Vec<f64> {
        match &self.transform {
            None => latent.to_vec(),
            Some(t) => {
                let pads: Vec<f64> = match t.pad_fill() {
                    PadFill::Constant(c) => vec![c; t.state_pad],
                    PadFill::Noise => (0..t.state_pad).map(|_| self.pad_rng.random_range(-1.0..=1.0)).collect(),
                };
                t.state_from_base(latent, &pads)
            }
        }
    }

    /// Reseeds the environment and draws an initial state.
    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.pad_rng = ChaCha8Rng::seed_from_u64(seed ^ PAD_STREAM);
        self.restart_episode();
        self.observation.clone()
    }

    fn restart_episode(&mut self) {
        self.latent = self.task.sample_initial(&mut self.rng);
        self.steps_taken = 0;
        let latent = self.latent.clone();
        self.observation = self.observe(&latent);
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != self.spec.action_dim() {
            return Err(Error::shape(format!(
                "{} expects {} action values, got {}",
                self.id(),
                self.spec.action_dim(),
                action.len()
            )));
        }
        if action.iter().any(|a| a.is_nan()) {
            return Err(Error::numeric(format!("NaN action {action:?}")));
        }
        let mut clamped = false;
        let action: Vec<f64> = action
            .iter()
            .zip(&self.spec.action_bounds)
            .map(|(&a, b)| {
                let c = b.clamp(a);
                clamped |= c != a;
                c
            })
            .collect();
        if clamped {
            self.clamped_actions += 1;
        }
        let base_spec = self.task.spec();
        let base_action: Vec<f64> = match &self.transform {
            None => action,
            Some(t) => t
                .action_to_base(&action, base_spec.action_dim())
                .into_iter()
                .zip(&base_spec.action_bounds)
                .map(|(a, b)| b.clamp(a))
                .collect(),
        };

        let next = self.task.transition(&self.latent, &base_action);
        let reward = self.task.reward(&next, &base_action);
        debug_assert!(self.spec.reward_bounds.contains(reward), "reward {reward} outside declared bounds");
        self.steps_taken += 1;
        let successor = self.observe(&next);
        let restart = self.steps_taken >= self.spec.max_episode_steps || self.task.is_terminal(&next);
        if restart {
            self.restart_episode();
        } else {
            self.latent = next;
            self.observation = successor.clone();
        }
        Ok(StepOutcome { reward, next_state: self.observation.clone(), restart, successor, action_clamped: clamped })
    }

    /// Uniform random action within bounds.
    pub fn sample_action<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.spec.action_bounds.iter().map(|b| rng.random_range(b.lower..=b.upper)).collect()
    }
}
