//! The transfer pipeline: target RL with data collection, per-source
//! alignment and similarity, action transfer from the best source, fixed-
//! buffer optimization, and plain RL for the rest of the budget.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{save_alignment, train_alignment, AlignmentConfig, AlignmentModelSet};
use crate::data::{load_dataset, normalize, save_dataset, DatasetBounds, NormalizedDataset, Transition};
use crate::dynamics::{fit_reward_model, DynamicsConfig, DynamicsModels};
use crate::envs::{Env, EnvSpec};
use crate::error::{Error, Result};
use crate::nn::checksum_values;
use crate::rl::{load_agent, save_agent, write_curve, Agent, AgentConfig, CurvePoint, Learner};
use crate::rng::derive_seed;
use crate::similarity::{measure, SimilarityConfig, SimilarityInputs, SimilarityReport};

/// A trained source task: frozen policy, the data its training produced,
/// and models fitted to that data.
#[derive(Clone, Debug)]
pub struct SourceTask {
    pub env_id: String,
    pub spec: EnvSpec,
    pub agent: Agent,
    pub dataset: NormalizedDataset,
    pub dynamics: DynamicsModels,
}

#[derive(Clone, Debug)]
pub struct TrainedSource {
    pub source: SourceTask,
    pub curve: Vec<CurvePoint>,
}

impl SourceTask {
    /// Trains an agent for `steps`, keeping every transition, then fits the
    /// reward and transition models.
    pub fn train(
        env_id: &str,
        steps: usize,
        agent_cfg: &AgentConfig,
        dynamics_cfg: &DynamicsConfig,
        seed: u64,
    ) -> Result<TrainedSource> {
        let env = Env::from_id(env_id)?;
        let spec = env.spec().clone();
        let agent = Agent::new(&spec, agent_cfg, derive_seed(seed, "source/agent"))?;
        let mut learner = Learner::new(env, agent, derive_seed(seed, "source/run"))?;
        let mut raw = Vec::with_capacity(steps);
        learner.run(steps, Some(&mut raw))?;
        let id = learner.env.id();
        let dataset = normalize(&id, &raw, &DatasetBounds::from_spec(&spec))?;
        if dataset.is_empty() {
            return Err(Error::invalid(format!("source `{id}` produced no transitions to fit models on")));
        }
        let dynamics = DynamicsModels::fit(&dataset, dynamics_cfg, derive_seed(seed, "source/dynamics"))?;
        Ok(TrainedSource {
            source: SourceTask { env_id: id, spec, agent: learner.agent, dataset, dynamics },
            curve: learner.curve,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (sd, ad) = (self.spec.state_dim(), self.spec.action_dim());
        if self.agent.spec() != &self.spec {
            return Err(Error::shape(format!("source `{}`: policy built for another spec", self.env_id)));
        }
        if !self.dataset.is_empty() && (self.dataset.state_dim() != sd || self.dataset.action_dim() != ad) {
            return Err(Error::shape(format!(
                "source `{}`: dataset dims ({}, {}) differ from spec ({sd}, {ad})",
                self.env_id,
                self.dataset.state_dim(),
                self.dataset.action_dim()
            )));
        }
        if self.dynamics.transition.output_dim() != sd || self.dynamics.reward.input_dim() != sd + ad {
            return Err(Error::shape(format!("source `{}`: dynamics models do not fit the spec", self.env_id)));
        }
        Ok(())
    }

    /// Digest of the policy and the fitted models.
    pub fn checksum(&self) -> u64 {
        checksum_values(
            [self.agent.checksum(), self.dynamics.reward.checksum(), self.dynamics.transition.checksum()]
                .into_iter()
                .map(f64::from_bits),
        )
    }

    /// `policy/`, `dataset.csv`, `dynamics/`, and `source.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_agent(&self.agent, &dir.join("policy"))?;
        save_dataset(&self.dataset, &dir.join("dataset.csv"))?;
        self.dynamics.save(&dir.join("dynamics"))?;
        let path = dir.join("source.json");
        let meta = SourceMeta { env_id: self.env_id.clone(), spec: self.spec.clone() };
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("source.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: SourceMeta = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
        let s = SourceTask {
            agent: load_agent(&dir.join("policy"))?,
            dataset: load_dataset(&dir.join("dataset.csv"))?,
            dynamics: DynamicsModels::load(&dir.join("dynamics"))?,
            env_id: meta.env_id,
            spec: meta.spec,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceMeta {
    env_id: String,
    spec: EnvSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimKnoTConfig {
    pub pre_transfer_steps: usize,
    pub transfer_steps: usize,
    pub fbo_updates: usize,
    /// Total environment steps; the post-transfer phase gets what is left.
    pub total_budget: usize,
    pub agent: AgentConfig,
    pub alignment: AlignmentConfig,
    /// Used for the target reward model.
    pub dynamics: DynamicsConfig,
    pub similarity: SimilarityConfig,
}

impl Default for SimKnoTConfig {
    fn default() -> Self {
        Self {
            pre_transfer_steps: 50_000,
            transfer_steps: 100_000,
            fbo_updates: 4_000,
            total_budget: 150_000,
            agent: AgentConfig::default(),
            alignment: AlignmentConfig::default(),
            dynamics: DynamicsConfig::default(),
            similarity: SimilarityConfig::default(),
        }
    }
}

impl SimKnoTConfig {
    pub fn post_transfer_steps(&self) -> usize {
        self.total_budget.saturating_sub(self.pre_transfer_steps + self.transfer_steps)
    }

    /// Whether phases 2 to 4 run at all.
    pub fn transfer_enabled(&self) -> bool {
        self.transfer_steps > 0 || self.fbo_updates > 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.pre_transfer_steps + self.transfer_steps > self.total_budget {
            return Err(Error::invalid(format!(
                "pre-transfer ({}) plus transfer ({}) steps exceed the budget of {}",
                self.pre_transfer_steps, self.transfer_steps, self.total_budget
            )));
        }
        self.agent.validate()?;
        self.alignment.validate()?;
        self.dynamics.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Simknot,
    Sac,
    SacFbo,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Simknot => "simknot",
            Method::Sac => "sac",
            Method::SacFbo => "sac-fbo",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    PreTransfer,
    Similarity,
    Transfer,
    Fbo,
    PostTransfer,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::PreTransfer => "pre-transfer",
            Phase::Similarity => "similarity",
            Phase::Transfer => "transfer",
            Phase::Fbo => "fbo",
            Phase::PostTransfer => "post-transfer",
        }
    }
}

/// Environment-step range and update count of one executed phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub start_step: usize,
    pub end_step: usize,
    pub updates: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub phase: Phase,
    pub env_step: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub method: Method,
    pub target_id: String,
    pub agent: Agent,
    pub similarity: Option<SimilarityReport>,
    pub curve: Vec<CurvePoint>,
    pub phases: Vec<PhaseRecord>,
    /// One entry per source; `None` when alignment failed or was skipped.
    pub alignments: Vec<Option<AlignmentModelSet>>,
    pub sim_id: Option<usize>,
    pub transfer_errors: usize,
    pub config: SimKnoTConfig,
    pub seed: u64,
    pub events: Vec<LogEvent>,
}

impl RunArtifacts {
    pub fn env_steps(&self) -> usize {
        self.phases.last().map_or(0, |p| p.end_step)
    }

    /// Curve points whose step falls inside the phase's range.
    pub fn phase_curve(&self, phase: Phase) -> Vec<CurvePoint> {
        let Some(rec) = self.phases.iter().find(|p| p.phase == phase) else {
            return Vec::new();
        };
        self.curve.iter().filter(|p| p.env_step >= rec.start_step && p.env_step <= rec.end_step).copied().collect()
    }

    /// Writes `config.json`, `similarity.json`, `curves/*.csv`,
    /// `checkpoints/*`, and `log.jsonl`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        let echo = ConfigEcho {
            method: self.method,
            target_id: self.target_id.clone(),
            seed: self.seed,
            sim_id: self.sim_id,
            transfer_errors: self.transfer_errors,
            phases: self.phases.clone(),
            config: self.config.clone(),
        };
        std::fs::write(&path, serde_json::to_string_pretty(&echo)?).map_err(|e| Error::io(&path, e))?;
        if let Some(report) = &self.similarity {
            report.save(&dir.join("similarity.json"))?;
        }
        let curves = dir.join("curves");
        write_curve(&curves.join("learning_curve.csv"), &self.curve)?;
        for rec in &self.phases {
            if rec.end_step > rec.start_step {
                write_curve(&curves.join(format!("{}.csv", rec.phase.name())), &self.phase_curve(rec.phase))?;
            }
        }
        let ck = dir.join("checkpoints");
        save_agent(&self.agent, &ck.join("policy"))?;
        for (i, m) in self.alignments.iter().enumerate() {
            if let Some(m) = m {
                save_alignment(m, &ck.join(format!("alignment_{i}")), Some(&self.config.alignment), Some(self.seed))?;
            }
        }
        let path = dir.join("log.jsonl");
        let mut text = String::new();
        for e in &self.events {
            text.push_str(&serde_json::to_string(e)?);
            text.push('\n');
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigEcho {
    pub method: Method,
    pub target_id: String,
    pub seed: u64,
    pub sim_id: Option<usize>,
    pub transfer_errors: usize,
    pub phases: Vec<PhaseRecord>,
    pub config: SimKnoTConfig,
}

/// Tags an error with the phase it came from.
fn tagged<T>(phase: Phase, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_phase(phase.name()))
}

/// Records steps and updates spent in `phase` while running `body`.
fn run_phase(
    learner: &mut Learner,
    phases: &mut Vec<PhaseRecord>,
    phase: Phase,
    body: impl FnOnce(&mut Learner) -> Result<()>,
) -> Result<()> {
    let (start, updates) = (learner.env_steps(), learner.agent.updates());
    tagged(phase, body(learner))?;
    phases.push(PhaseRecord {
        phase,
        start_step: start,
        end_step: learner.env_steps(),
        updates: learner.agent.updates() - updates,
    });
    Ok(())
}

/// Steps the target environment with the source policy seen through the
/// alignment maps; every transition goes into the buffer and is followed by
/// one update. Returns the number of aborted episodes.
pub fn transfer_policy(
    source: &SourceTask,
    models: &AlignmentModelSet,
    learner: &mut Learner,
    steps: usize,
) -> Result<usize> {
    let target_spec = learner.env.spec().clone();
    let allowed = (steps / 100).max(1);
    let mut errors = 0;
    let mut done = 0;
    while done < steps {
        let u_y: Vec<f64> =
            learner.observation().iter().zip(&target_spec.state_bounds).map(|(&v, b)| b.normalize(v)).collect();
        let u_y = Array2::from_shape_vec((1, u_y.len()), u_y).expect("one row");
        let u_x: Vec<f64> = models.target_state_to_source(u_y.view())?.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let a_x = source.agent.act_normalized(&u_x)?;
        let a_x = Array2::from_shape_vec((1, a_x.len()), a_x).expect("one row");
        let a_y = models.source_action_to_target(a_x.view())?;
        if a_y.iter().any(|v| !v.is_finite()) || u_x.iter().any(|v| v.is_nan()) {
            errors += 1;
            if errors > allowed {
                return Err(Error::numeric(format!(
                    "{errors} transferred actions were non-finite within {steps} transfer steps"
                )));
            }
            learner.abort_episode();
            continue;
        }
        let action: Vec<f64> =
            a_y.iter().zip(&target_spec.action_bounds).map(|(&u, b)| b.denormalize(u.clamp(0.0, 1.0))).collect();
        learner.step(&action)?;
        done += 1;
    }
    Ok(errors)
}

/// Result of phase 2 for one target dataset.
#[derive(Clone, Debug)]
pub struct SourceRanking {
    pub report: SimilarityReport,
    pub alignments: Vec<Option<AlignmentModelSet>>,
}

/// Aligns the target data with every source and scores each pair. A source
/// whose alignment or scoring fails is excluded from the ranking.
pub fn rank_sources_for(
    sources: &[SourceTask],
    target: &NormalizedDataset,
    cfg: &SimKnoTConfig,
    seed: u64,
) -> Result<SourceRanking> {
    if sources.is_empty() {
        return Err(Error::invalid("at least one source task is required"));
    }
    let (target_reward, _) = fit_reward_model(target, &cfg.dynamics, derive_seed(seed, "target/reward"))?;
    let work: Vec<(Option<AlignmentModelSet>, std::result::Result<f64, String>)> = sources
        .par_iter()
        .enumerate()
        .map(|(i, src)| {
            let models =
                match train_alignment(&src.dataset, target, &cfg.alignment, derive_seed(seed, &format!("align/{i}"))) {
                    Ok(m) => m,
                    Err(e) => return (None, Err(e.to_string())),
                };
            let inputs = SimilarityInputs {
                source_reward: Some(&src.dynamics.reward),
                source_transition: Some(&src.dynamics.transition),
                alignment: Some(&models),
                target_reward: Some(&target_reward),
            };
            let score = measure(inputs, target, &cfg.similarity).map_err(|e| e.to_string());
            (Some(models), score)
        })
        .collect();
    let (alignments, outcomes): (Vec<_>, Vec<_>) = work.into_iter().unzip();
    let ids = sources.iter().map(|s| s.env_id.clone()).collect();
    let report = SimilarityReport::new(&target.task_id, ids, outcomes, cfg.similarity.clone())?;
    Ok(SourceRanking { report, alignments })
}

fn new_learner(tgt_env: &Env, cfg: &SimKnoTConfig, seed: u64) -> Result<Learner> {
    let agent = Agent::new(tgt_env.spec(), &cfg.agent, derive_seed(seed, "target/agent"))?;
    Learner::new(tgt_env.clone(), agent, derive_seed(seed, "target/run"))
}

/// Phase 1 alone: RL on the target for `pre_transfer_steps`, returning the
/// learner and the collected data. Runs of every method share it.
pub fn pre_transfer(tgt_env: &Env, cfg: &SimKnoTConfig, seed: u64) -> Result<(Learner, Vec<Transition>, PhaseRecord)> {
    cfg.validate()?;
    let mut learner = tagged(Phase::PreTransfer, new_learner(tgt_env, cfg, seed))?;
    let mut data = Vec::with_capacity(cfg.pre_transfer_steps);
    let mut phases = Vec::new();
    run_phase(&mut learner, &mut phases, Phase::PreTransfer, |l| l.run(cfg.pre_transfer_steps, Some(&mut data)))?;
    Ok((learner, data, phases.pop().expect("one phase")))
}

/// Full run of `method` from a fresh target agent.
pub fn run_method(
    method: Method,
    sources: &[SourceTask],
    tgt_env: &Env,
    cfg: &SimKnoTConfig,
    seed: u64,
) -> Result<RunArtifacts> {
    let shared = pre_transfer(tgt_env, cfg, seed)?;
    continue_method(method, sources, shared, cfg, seed)
}

pub fn run_simknot(sources: &[SourceTask], tgt_env: &Env, cfg: &SimKnoTConfig, seed: u64) -> Result<RunArtifacts> {
    run_method(Method::Simknot, sources, tgt_env, cfg, seed)
}

/// Runs the remaining phases of `method` after a shared phase 1.
pub fn continue_method(
    method: Method,
    sources: &[SourceTask],
    (mut learner, data, pre): (Learner, Vec<Transition>, PhaseRecord),
    cfg: &SimKnoTConfig,
    seed: u64,
) -> Result<RunArtifacts> {
    let target_id = learner.env.id();
    let mut phases = vec![pre];
    let mut events = vec![LogEvent {
        phase: Phase::PreTransfer,
        env_step: learner.env_steps(),
        message: format!("collected {} transitions", data.len()),
    }];
    let mut similarity = None;
    let mut alignments = Vec::new();
    let mut sim_id = None;
    let mut transfer_errors = 0;

    match method {
        Method::Simknot if cfg.transfer_enabled() => {
            for s in sources {
                tagged(Phase::Similarity, s.validate())?;
            }
            let spec = learner.env.spec().clone();
            let dataset = tagged(Phase::Similarity, normalize(&target_id, &data, &DatasetBounds::from_spec(&spec)))?;
            let ranking = tagged(Phase::Similarity, rank_sources_for(sources, &dataset, cfg, seed))?;
            let best = ranking.report.sim_id;
            for ex in &ranking.report.excluded {
                events.push(LogEvent {
                    phase: Phase::Similarity,
                    env_step: learner.env_steps(),
                    message: format!("excluded source {} ({}): {}", ex.index, sources[ex.index].env_id, ex.reason),
                });
            }
            events.push(LogEvent {
                phase: Phase::Similarity,
                env_step: learner.env_steps(),
                message: format!(
                    "selected source {best} ({}) with ranking {:?}",
                    sources[best].env_id, ranking.report.ranking
                ),
            });
            let models = ranking.alignments[best].clone().expect("selected source was aligned");
            run_phase(&mut learner, &mut phases, Phase::Transfer, |l| {
                transfer_errors = transfer_policy(&sources[best], &models, l, cfg.transfer_steps)?;
                Ok(())
            })?;
            run_phase(&mut learner, &mut phases, Phase::Fbo, |l| l.fbo(cfg.fbo_updates))?;
            similarity = Some(ranking.report);
            alignments = ranking.alignments;
            sim_id = Some(best);
        }
        Method::Simknot | Method::Sac => {}
        Method::SacFbo => {
            // Plain RL over the window the transfer would have used.
            run_phase(&mut learner, &mut phases, Phase::Transfer, |l| l.run(cfg.transfer_steps, None))?;
            run_phase(&mut learner, &mut phases, Phase::Fbo, |l| l.fbo(cfg.fbo_updates))?;
        }
    }
    let remaining = cfg.total_budget - learner.env_steps();
    run_phase(&mut learner, &mut phases, Phase::PostTransfer, |l| l.run(remaining, None))?;
    events.push(LogEvent {
        phase: Phase::PostTransfer,
        env_step: learner.env_steps(),
        message: format!("finished after {} environment steps", learner.env_steps()),
    });
    Ok(RunArtifacts {
        method,
        target_id,
        agent: learner.agent,
        similarity,
        curve: learner.curve,
        phases,
        alignments,
        sim_id,
        transfer_errors,
        config: cfg.clone(),
        seed,
        events,
    })
}

/// Trapezoidal area under the learning curve divided by its step span.
pub fn normalized_auc(curve: &[CurvePoint]) -> f64 {
    match curve {
        [] => f64::NAN,
        [p] => p.mean_eval_return,
        _ => {
            let area: f64 = curve
                .windows(2)
                .map(|w| 0.5 * (w[0].mean_eval_return + w[1].mean_eval_return) * (w[1].env_step - w[0].env_step) as f64)
                .sum();
            let span = (curve[curve.len() - 1].env_step - curve[0].env_step) as f64;
            if span > 0.0 {
                area / span
            } else {
                curve[0].mean_eval_return
            }
        }
    }
}
