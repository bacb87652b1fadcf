use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{AgentConfig, ReplayBuffer};
use crate::data::Transition;
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::nn::{adam_step, checksum_values, layer_dims, AdamState, Gradients, Mlp, Trace, Trainable};
use crate::rng::stream_rng;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Keeps the squashing correction finite when `tanh` saturates.
const SQUASH_EPS: f64 = 1e-6;
const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

/// Transitions in network units: observations in `[-1, 1]`, squashed actions
/// in `[-1, 1]`, rewards normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_obs: Array2<f64>,
}

/// Reparameterized squashed-Gaussian draw for a batch of observations.
#[derive(Clone, Debug)]
pub struct PolicySample {
    trace: Trace,
    std: Array2<f64>,
    /// 1 where the raw log-std was inside its clamp range, else 0.
    log_std_mask: Array2<f64>,
    pub eps: Array2<f64>,
    /// `tanh(μ + σ·ε)`.
    pub actions: Array2<f64>,
    pub log_prob: Array1<f64>,
}

/// Forward pass of the actor with fixed standard-normal noise `eps`.
pub fn policy_sample(actor: &Mlp, obs: ArrayView2<f64>, eps: &Array2<f64>) -> Result<PolicySample> {
    let trace = actor.forward_traced(obs)?;
    let (n, k) = eps.dim();
    let out = trace.output();
    if out.dim() != (n, 2 * k) {
        return Err(Error::shape(format!("actor output {:?} does not fit noise {:?}", out.dim(), eps.dim())));
    }
    let mut std = Array2::zeros((n, k));
    let mut mask = Array2::zeros((n, k));
    let mut actions = Array2::zeros((n, k));
    let mut log_prob = Array1::zeros(n);
    for i in 0..n {
        for j in 0..k {
            let raw = out[[i, k + j]];
            let log_std = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
            mask[[i, j]] = if raw == log_std { 1.0 } else { 0.0 };
            let sd = log_std.exp();
            let e = eps[[i, j]];
            let t = (out[[i, j]] + sd * e).tanh();
            std[[i, j]] = sd;
            actions[[i, j]] = t;
            log_prob[i] += -0.5 * e * e - log_std - LOG_SQRT_2PI - (1.0 - t * t + SQUASH_EPS).ln();
        }
    }
    Ok(PolicySample { trace, std, log_std_mask: mask, eps: eps.clone(), actions, log_prob })
}

/// Pushes `∂L/∂actions` and `∂L/∂log_prob` back into actor gradients.
pub fn policy_backward(
    actor: &Mlp,
    sample: &PolicySample,
    d_actions: ArrayView2<f64>,
    d_log_prob: ArrayView1<f64>,
    grads: &mut Gradients,
) -> Result<()> {
    let (n, k) = sample.actions.dim();
    if d_actions.dim() != (n, k) || d_log_prob.len() != n {
        return Err(Error::shape("policy gradient shapes do not match the sample"));
    }
    let mut d_out = Array2::zeros((n, 2 * k));
    for i in 0..n {
        for j in 0..k {
            let t = sample.actions[[i, j]];
            let one_minus = 1.0 - t * t;
            let squash = 2.0 * t * one_minus / (one_minus + SQUASH_EPS);
            let d_u = d_actions[[i, j]] * one_minus + d_log_prob[i] * squash;
            d_out[[i, j]] = d_u;
            d_out[[i, k + j]] =
                sample.log_std_mask[[i, j]] * (d_u * sample.std[[i, j]] * sample.eps[[i, j]] - d_log_prob[i]);
        }
    }
    actor.backward(&sample.trace, d_out.view(), grads)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct CriticLoss {
    pub value: f64,
    pub q1: Gradients,
    pub q2: Gradients,
    /// Entropy-regularized Bellman targets.
    pub targets: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct ActorLoss {
    pub value: f64,
    pub grads: Gradients,
    pub log_prob: Array1<f64>,
}

/// Loss values of one update step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub critic: f64,
    pub actor: f64,
    pub temperature: f64,
    pub alpha: f64,
}

/// `(value, ∂/∂log α)` of `−log α · mean(log π + H̄)`.
pub fn temperature_loss(log_alpha: f64, log_prob: ArrayView1<f64>, target_entropy: f64) -> (f64, f64) {
    let m = log_prob.iter().map(|l| l + target_entropy).sum::<f64>() / log_prob.len().max(1) as f64;
    (-log_alpha * m, -m)
}

fn cat(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[a, b]).expect("row counts agree")
}

/// Squashed-Gaussian actor with twin critics and a learned entropy
/// temperature. Networks see bounds-normalized observations and squashed
/// actions; rewards are normalized by the task's reward bounds.
#[derive(Clone, Debug)]
pub struct Agent {
    config: AgentConfig,
    spec: EnvSpec,
    pub actor: Trainable,
    pub q1: Trainable,
    pub q2: Trainable,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub log_alpha: f64,
    pub alpha_adam: AdamState,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) updates: u64,
}

impl Agent {
    pub fn new(spec: &EnvSpec, config: &AgentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        let (sd, ad) = (spec.state_dim(), spec.action_dim());
        let mut init = stream_rng(seed, "agent/init");
        let actor = Mlp::new(&layer_dims(sd, &config.hidden, 2 * ad), &mut init)?;
        let q1 = Mlp::new(&layer_dims(sd + ad, &config.hidden, 1), &mut init)?;
        let q2 = Mlp::new(&layer_dims(sd + ad, &config.hidden, 1), &mut init)?;
        Ok(Self {
            config: config.clone(),
            spec: spec.clone(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor: Trainable::new(actor),
            q1: Trainable::new(q1),
            q2: Trainable::new(q2),
            log_alpha: config.initial_alpha.ln(),
            alpha_adam: AdamState::new(1),
            rng: stream_rng(seed, "agent/sample"),
            updates: 0,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn target_entropy(&self) -> f64 {
        self.config.target_entropy.unwrap_or(-(self.spec.action_dim() as f64))
    }

    /// Gradient updates performed so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn check_state(&self, len: usize) -> Result<()> {
        if len != self.spec.state_dim() {
            return Err(Error::shape(format!("agent expects {}-dim states, got {len}", self.spec.state_dim())));
        }
        Ok(())
    }

    /// Raw state to network input.
    pub fn obs_input(&self, state: &[f64]) -> Vec<f64> {
        state.iter().zip(&self.spec.state_bounds).map(|(&v, b)| 2.0 * b.normalize(v) - 1.0).collect()
    }

    /// Raw action to its squashed representation.
    pub fn squash_action(&self, action: &[f64]) -> Vec<f64> {
        action.iter().zip(&self.spec.action_bounds).map(|(&v, b)| 2.0 * b.normalize(v) - 1.0).collect()
    }

    /// Squashed action to raw action bounds.
    pub fn unsquash_action(&self, squashed: &[f64]) -> Vec<f64> {
        squashed.iter().zip(&self.spec.action_bounds).map(|(&t, b)| b.clamp(b.denormalize(0.5 * (t + 1.0)))).collect()
    }

    fn squashed_from_input(&mut self, input: &[f64], mode: ActMode) -> Result<Vec<f64>> {
        let out = self.actor.net.forward(input)?;
        let k = self.spec.action_dim();
        Ok((0..k)
            .map(|j| match mode {
                ActMode::Deterministic => out[j].tanh(),
                ActMode::Stochastic => {
                    let sd = out[k + j].clamp(LOG_STD_MIN, LOG_STD_MAX).exp();
                    let e: f64 = StandardNormal.sample(&mut self.rng);
                    (out[j] + sd * e).tanh()
                }
            })
            .collect())
    }

    /// Action within the task's bounds; deterministic mode returns the
    /// squashed mean and leaves the sampling stream untouched.
    pub fn act(&mut self, state: &[f64], mode: ActMode) -> Result<Vec<f64>> {
        self.check_state(state.len())?;
        let input = self.obs_input(state);
        let t = self.squashed_from_input(&input, mode)?;
        Ok(self.unsquash_action(&t))
    }

    /// Squashed mean action for a raw state, without touching any state.
    pub fn act_deterministic(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check_state(state.len())?;
        let out = self.actor.net.forward(&self.obs_input(state))?;
        let t: Vec<f64> = out[..self.spec.action_dim()].iter().map(|m| m.tanh()).collect();
        Ok(self.unsquash_action(&t))
    }

    /// Deterministic action for a bounds-normalized state, returned
    /// normalized to `[0, 1]`.
    pub fn act_normalized(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check_state(state.len())?;
        let input: Vec<f64> = state.iter().map(|u| 2.0 * u - 1.0).collect();
        let out = self.actor.net.forward(&input)?;
        Ok(out[..self.spec.action_dim()].iter().map(|m| 0.5 * (m.tanh() + 1.0)).collect())
    }

    pub fn batch_from(&self, items: &[&Transition]) -> Result<Batch> {
        let (sd, ad) = (self.spec.state_dim(), self.spec.action_dim());
        let n = items.len();
        let mut obs = Array2::zeros((n, sd));
        let mut next_obs = Array2::zeros((n, sd));
        let mut actions = Array2::zeros((n, ad));
        let mut rewards = Array1::zeros(n);
        for (i, t) in items.iter().enumerate() {
            if t.s.len() != sd || t.s_next.len() != sd || t.a.len() != ad {
                return Err(Error::shape(format!(
                    "transition dims ({}, {}, {}) do not match the agent",
                    t.s.len(),
                    t.a.len(),
                    t.s_next.len()
                )));
            }
            obs.row_mut(i).assign(&Array1::from(self.obs_input(&t.s)));
            next_obs.row_mut(i).assign(&Array1::from(self.obs_input(&t.s_next)));
            actions.row_mut(i).assign(&Array1::from(self.squash_action(&t.a)));
            rewards[i] = self.spec.reward_bounds.normalize(t.r);
        }
        Ok(Batch { obs, actions, rewards, next_obs })
    }

    /// Sum of the two critics' mean squared Bellman errors, with gradients
    /// for both critics. Targets use the target critics and a next action
    /// drawn with noise `next_eps`.
    pub fn critic_loss(&self, batch: &Batch, next_eps: &Array2<f64>) -> Result<CriticLoss> {
        let n = batch.obs.nrows();
        let next = policy_sample(&self.actor.net, batch.next_obs.view(), next_eps)?;
        let next_sa = cat(batch.next_obs.view(), next.actions.view());
        let q1t = self.q1_target.forward_batch(next_sa.view())?;
        let q2t = self.q2_target.forward_batch(next_sa.view())?;
        let alpha = self.alpha();
        let gamma = self.config.gamma;
        let targets = Array1::from_shape_fn(n, |i| {
            let soft = q1t[[i, 0]].min(q2t[[i, 0]]) - alpha * next.log_prob[i];
            batch.rewards[i] + gamma * soft
        });

        let sa = cat(batch.obs.view(), batch.actions.view());
        let mut value = 0.0;
        let mut out = Vec::with_capacity(2);
        for q in [&self.q1.net, &self.q2.net] {
            let trace = q.forward_traced(sa.view())?;
            let err = &trace.output().column(0) - &targets;
            value += err.mapv(|e| e * e).sum() / n as f64;
            let d = err.mapv(|e| 2.0 * e / n as f64).insert_axis(Axis(1));
            let mut g = q.zero_gradients();
            q.backward(&trace, d.view(), &mut g)?;
            out.push(g);
        }
        let q2 = out.pop().expect("two critics");
        let q1 = out.pop().expect("two critics");
        Ok(CriticLoss { value, q1, q2, targets })
    }

    /// `mean(α·log π(ã|s) − min(Q1, Q2)(s, ã))` with `ã` reparameterized by
    /// `eps`, and its gradient for the actor. Critics are held fixed.
    pub fn actor_loss(&self, obs: ArrayView2<f64>, eps: &Array2<f64>) -> Result<ActorLoss> {
        let n = obs.nrows();
        let sd = self.spec.state_dim();
        let sample = policy_sample(&self.actor.net, obs, eps)?;
        let sa = cat(obs, sample.actions.view());
        let t1 = self.q1.net.forward_traced(sa.view())?;
        let t2 = self.q2.net.forward_traced(sa.view())?;
        let alpha = self.alpha();
        let mut d1 = Array2::zeros((n, 1));
        let mut d2 = Array2::zeros((n, 1));
        let mut value = 0.0;
        for i in 0..n {
            let (a, b) = (t1.output()[[i, 0]], t2.output()[[i, 0]]);
            if a <= b {
                d1[[i, 0]] = -1.0 / n as f64;
            } else {
                d2[[i, 0]] = -1.0 / n as f64;
            }
            value += alpha * sample.log_prob[i] - a.min(b);
        }
        value /= n as f64;
        let mut scratch1 = self.q1.net.zero_gradients();
        let mut scratch2 = self.q2.net.zero_gradients();
        let din = self.q1.net.backward(&t1, d1.view(), &mut scratch1)?
            + self.q2.net.backward(&t2, d2.view(), &mut scratch2)?;
        let d_actions = din.slice(s![.., sd..]);
        let d_log_prob = Array1::from_elem(n, alpha / n as f64);
        let mut grads = self.actor.net.zero_gradients();
        policy_backward(&self.actor.net, &sample, d_actions, d_log_prob.view(), &mut grads)?;
        Ok(ActorLoss { value, grads, log_prob: sample.log_prob })
    }

    fn noise(&mut self, n: usize) -> Array2<f64> {
        let k = self.spec.action_dim();
        Array2::from_shape_simple_fn((n, k), || StandardNormal.sample(&mut self.rng))
    }

    /// One gradient step of critics, actor, and temperature, then the
    /// target blend. The buffer only needs to be non-empty.
    pub(crate) fn update_once(&mut self, buffer: &ReplayBuffer) -> Result<UpdateStats> {
        let n = self.config.batch_size;
        let idx = buffer.sample_indices(&mut self.rng, n);
        let items: Vec<&Transition> = idx.iter().map(|&i| buffer.slot(i)).collect();
        let batch = self.batch_from(&items)?;
        let next_eps = self.noise(n);
        let eps = self.noise(n);
        let lr = self.config.lr;

        let critic = self.critic_loss(&batch, &next_eps)?;
        if !critic.value.is_finite() {
            return Err(Error::numeric(format!("critic loss became {}", critic.value)));
        }
        self.q1.apply(critic.q1, lr, None)?;
        self.q2.apply(critic.q2, lr, None)?;

        let actor = self.actor_loss(batch.obs.view(), &eps)?;
        if !actor.value.is_finite() {
            return Err(Error::numeric(format!("actor loss became {}", actor.value)));
        }
        self.actor.apply(actor.grads, lr, None)?;

        let (temperature, grad) = temperature_loss(self.log_alpha, actor.log_prob.view(), self.target_entropy());
        let mut la = [self.log_alpha];
        adam_step(&mut la, &[grad], &mut self.alpha_adam, self.config.alpha_lr)?;
        self.log_alpha = la[0];

        let tau = self.config.tau;
        self.q1_target.blend_from(&self.q1.net, tau)?;
        self.q2_target.blend_from(&self.q2.net, tau)?;
        self.updates += 1;
        Ok(UpdateStats { critic: critic.value, actor: actor.value, temperature, alpha: self.alpha() })
    }

    /// Digest of every network and the temperature.
    pub fn checksum(&self) -> u64 {
        let nets = [&self.actor.net, &self.q1.net, &self.q2.net, &self.q1_target, &self.q2_target];
        checksum_values(nets.iter().map(|n| f64::from_bits(n.checksum())).chain(std::iter::once(self.log_alpha)))
    }
}

/// Outcome of [`update`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateOutcome {
    pub performed: usize,
    /// Set when the buffer was below the warmup or batch threshold and
    /// nothing was done.
    pub insufficient_buffer: bool,
    pub last: Option<UpdateStats>,
}

/// `n_steps` gradient updates on minibatches drawn from `buffer`.
pub fn update(agent: &mut Agent, buffer: &ReplayBuffer, n_steps: usize) -> Result<UpdateOutcome> {
    let need = agent.config.batch_size.max(agent.config.warmup_transitions).max(1);
    if n_steps > 0 && buffer.len() < need {
        log::warn!("update skipped: buffer holds {} of {need} transitions", buffer.len());
        return Ok(UpdateOutcome { insufficient_buffer: true, ..UpdateOutcome::default() });
    }
    let mut out = UpdateOutcome::default();
    for _ in 0..n_steps {
        out.last = Some(agent.update_once(buffer)?);
        out.performed += 1;
    }
    Ok(out)
}

/// Fixed-buffer optimization: exactly `e` updates from an unchanging buffer.
pub fn fbo(agent: &mut Agent, buffer: &ReplayBuffer, e: usize) -> Result<UpdateOutcome> {
    if buffer.is_empty() {
        return Err(Error::invalid("fixed-buffer optimization needs a non-empty buffer"));
    }
    let mut out = UpdateOutcome::default();
    for _ in 0..e {
        out.last = Some(agent.update_once(buffer)?);
        out.performed += 1;
    }
    Ok(out)
}
