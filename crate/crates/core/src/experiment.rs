//! The experiment harness behind the `simknot` binary: one function per
//! subcommand, each a pure function of its configuration, seed, and input
//! files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{save_alignment, train_alignment, AlignmentConfig, AlignmentModelSet};
use crate::data::{load_dataset, NormalizedDataset};
use crate::dynamics::fit_reward_model;
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::rl::{read_curve, write_curve, CurvePoint};
use crate::rng::derive_seed;
use crate::similarity::{measure, write_similarity_matrix, SimilarityConfig, SimilarityInputs, SimilarityReport};
use crate::simknot::{
    normalized_auc, rank_sources_for, run_method, ConfigEcho, Method, RunArtifacts, SimKnoTConfig, SourceTask,
    TrainedSource,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stages {
    pub train_sources: bool,
    pub transfer: bool,
    pub baselines: bool,
    pub report: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self { train_sources: true, transfer: true, baselines: true, report: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Length of the centered uniform smoothing window.
    pub smoothing_window: usize,
    /// Evaluations a return must be held for to count as attained.
    pub sustained_evaluations: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { smoothing_window: 15, sustained_evaluations: 10 }
    }
}

/// Everything a sweep needs; a run is reproducible from this file alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub targets: Vec<String>,
    pub sources: Vec<String>,
    pub seeds: Vec<u64>,
    /// Environment steps used to train each source agent.
    pub source_steps: usize,
    pub pipeline: SimKnoTConfig,
    pub out_dir: PathBuf,
    pub stages: Stages,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            targets: Vec::new(),
            sources: Vec::new(),
            seeds: vec![0],
            source_steps: 50_000,
            pipeline: SimKnoTConfig::default(),
            out_dir: PathBuf::from("runs"),
            stages: Stages::default(),
            report: ReportConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        for id in self.targets.iter().chain(&self.sources) {
            Env::from_id(id)?;
        }
        if self.report.smoothing_window == 0 || self.report.sustained_evaluations == 0 {
            return Err(Error::invalid("report windows must be at least 1"));
        }
        self.pipeline.validate()
    }

    /// Directory holding the trained source for `id`.
    pub fn source_dir(&self, id: &str) -> PathBuf {
        self.out_dir.join("sources").join(file_stem(id))
    }

    /// Directory holding one run of `method` on `target`.
    pub fn run_dir(&self, target: &str, method: Method, seed: u64) -> PathBuf {
        self.out_dir.join("runs").join(file_stem(target)).join(method.name()).join(format!("seed_{seed}"))
    }
}

/// Task ids carry `@`, `:`, `,` and `/`; this keeps them usable as a path
/// component.
pub fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains a source agent and its models, writing the source directory plus
/// `learning_curve.csv` under `out`.
pub fn cmd_train_source(task: &str, steps: usize, seed: u64, cfg: &SimKnoTConfig, out: &Path) -> Result<TrainedSource> {
    Env::from_id(task)?;
    let trained = SourceTask::train(task, steps, &cfg.agent, &cfg.dynamics, seed)?;
    trained.source.save(out)?;
    write_curve(&out.join("learning_curve.csv"), &trained.curve)?;
    Ok(trained)
}

/// Accepts either a dataset CSV or a directory holding `dataset.csv`.
pub fn load_target_data(path: &Path) -> Result<NormalizedDataset> {
    if path.is_dir() {
        load_dataset(&path.join("dataset.csv"))
    } else {
        load_dataset(path)
    }
}

/// Rejects a source/target/alignment triple whose dimensions disagree.
pub fn check_pair(source: &SourceTask, target: &NormalizedDataset, models: Option<&AlignmentModelSet>) -> Result<()> {
    let pair = format!("source `{}` / target `{}`", source.env_id, target.task_id);
    source.validate().map_err(|e| Error::Shape(format!("{pair}: {e}")))?;
    let (sd, ad) = (target.bounds.state.len(), target.bounds.action.len());
    if !target.is_empty() && (target.state_dim() != sd || target.action_dim() != ad) {
        return Err(Error::Shape(format!("{pair}: target data does not match its own bounds")));
    }
    if let Some(m) = models {
        let d = m.dims();
        let expect = (source.spec.state_dim(), source.spec.action_dim(), sd, ad);
        let got = (d.source_state, d.source_action, d.target_state, d.target_action);
        if got != expect {
            return Err(Error::Shape(format!(
                "{pair}: alignment maps (S {}, A {}) -> (S {}, A {}) but the pair has (S {}, A {}) -> (S {}, A {})",
                got.0, got.1, got.2, got.3, expect.0, expect.1, expect.2, expect.3
            )));
        }
    }
    Ok(())
}

/// Scores one aligned pair after checking its dimensions.
pub fn score_pair(
    source: &SourceTask,
    target: &NormalizedDataset,
    target_reward: &Mlp,
    models: &AlignmentModelSet,
    cfg: &SimilarityConfig,
) -> Result<f64> {
    check_pair(source, target, Some(models))?;
    let inputs = SimilarityInputs {
        source_reward: Some(&source.dynamics.reward),
        source_transition: Some(&source.dynamics.transition),
        alignment: Some(models),
        target_reward: Some(target_reward),
    };
    measure(inputs, target, cfg)
}

/// Learns the alignment between a target dataset and one source and saves
/// the checkpoint under `out`.
pub fn cmd_align(
    target_data: &Path,
    source_dir: &Path,
    cfg: &AlignmentConfig,
    seed: u64,
    out: &Path,
) -> Result<AlignmentModelSet> {
    let target = load_target_data(target_data)?;
    let source = SourceTask::load(source_dir)?;
    check_pair(&source, &target, None)?;
    let models = train_alignment(&source.dataset, &target, cfg, derive_seed(seed, "align/0"))?;
    save_alignment(&models, out, Some(cfg), Some(seed))?;
    Ok(models)
}

/// Ranks `sources` for every target dataset. Writes
/// `<target>/similarity.json` and the alignments per target, and
/// `similarity_matrix.csv` when there is more than one target.
pub fn cmd_similarity(
    targets: &[PathBuf],
    source_dirs: &[PathBuf],
    cfg: &SimKnoTConfig,
    seed: u64,
    out: &Path,
) -> Result<Vec<SimilarityReport>> {
    if targets.is_empty() || source_dirs.is_empty() {
        return Err(Error::invalid("at least one target and one source are required"));
    }
    let sources = source_dirs.iter().map(|d| SourceTask::load(d)).collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::with_capacity(targets.len());
    for path in targets {
        let target = load_target_data(path)?;
        for s in &sources {
            check_pair(s, &target, None)?;
        }
        let ranking = rank_sources_for(&sources, &target, cfg, seed)?;
        let dir = out.join(file_stem(&target.task_id));
        ranking.report.save(&dir.join("similarity.json"))?;
        for (i, m) in ranking.alignments.iter().enumerate() {
            if let Some(m) = m {
                save_alignment(m, &dir.join(format!("alignment_{i}")), Some(&cfg.alignment), Some(seed))?;
            }
        }
        reports.push(ranking.report);
    }
    if reports.len() > 1 {
        write_similarity_matrix(&reports, &out.join("similarity_matrix.csv"))?;
    }
    Ok(reports)
}

/// Runs `method` on `target` with the sources in `source_dirs` and saves
/// the artifacts under `out`. Sources are only loaded for SimKnoT.
pub fn cmd_transfer(
    target: &str,
    source_dirs: &[PathBuf],
    method: Method,
    cfg: &SimKnoTConfig,
    seed: u64,
    out: &Path,
) -> Result<RunArtifacts> {
    let env = Env::from_id(target)?;
    let sources = if method == Method::Simknot && cfg.transfer_enabled() {
        if source_dirs.is_empty() {
            return Err(Error::invalid("simknot needs at least one source"));
        }
        source_dirs.iter().map(|d| SourceTask::load(d)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let run = run_method(method, &sources, &env, cfg, seed)?;
    run.save(out)?;
    Ok(run)
}

/// Trains every configured source that has no directory yet, then runs every
/// (target, method, seed) combination of the sweep. Existing run
/// directories are recomputed.
pub fn cmd_sweep(cfg: &ExperimentConfig, methods: &[Method]) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    if cfg.stages.train_sources {
        cfg.sources.par_iter().enumerate().try_for_each(|(i, id)| -> Result<()> {
            let dir = cfg.source_dir(id);
            if !dir.join("source.json").exists() {
                cmd_train_source(id, cfg.source_steps, derive_seed(i as u64, "source"), &cfg.pipeline, &dir)?;
            }
            Ok(())
        })?;
    }
    let source_dirs: Vec<PathBuf> = cfg.sources.iter().map(|id| cfg.source_dir(id)).collect();
    let jobs: Vec<(String, Method, u64)> = cfg
        .targets
        .iter()
        .flat_map(|t| methods.iter().flat_map(move |&m| cfg.seeds.iter().map(move |&s| (t.clone(), m, s))))
        .filter(|(_, m, _)| match m {
            Method::Simknot => cfg.stages.transfer,
            Method::Sac | Method::SacFbo => cfg.stages.baselines,
        })
        .collect();
    let dirs = jobs
        .par_iter()
        .map(|(t, m, s)| {
            let dir = cfg.run_dir(t, *m, *s);
            cmd_transfer(t, &source_dirs, *m, &cfg.pipeline, *s, &dir)?;
            Ok(dir)
        })
        .collect::<Result<Vec<_>>>()?;
    if cfg.stages.report {
        cmd_report(&cfg.out_dir.join("runs"), &cfg.out_dir.join("report"), &cfg.report)?;
    }
    Ok(dirs)
}

/// Centered uniform moving average; near the ends the window shrinks to
/// the points that exist.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let half = window.max(1) / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Highest value held for `length` consecutive points, and the index where
/// the first such stretch starts. A curve shorter than `length` counts as
/// one stretch.
pub fn sustained_max(values: &[f64], length: usize) -> Option<(f64, usize)> {
    if values.is_empty() {
        return None;
    }
    let length = length.clamp(1, values.len());
    let mut best: Option<(f64, usize)> = None;
    for start in 0..=values.len() - length {
        let floor = values[start..start + length].iter().copied().fold(f64::INFINITY, f64::min);
        if best.is_none_or(|(b, _)| floor > b) {
            best = Some((floor, start));
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub target_id: String,
    pub method: String,
    pub seed: u64,
    pub top_return: f64,
    pub top_step: usize,
    pub auc: f64,
    pub final_return: f64,
    pub sim_id: Option<usize>,
}

/// Summarizes one learning curve under the report's smoothing and
/// sustained-window rules.
pub fn summarize_curve(curve: &[CurvePoint], cfg: &ReportConfig) -> Option<(f64, usize)> {
    let raw: Vec<f64> = curve.iter().map(|p| p.mean_eval_return).collect();
    let smoothed = smooth(&raw, cfg.smoothing_window);
    sustained_max(&smoothed, cfg.sustained_evaluations).map(|(v, i)| (v, curve[i].env_step))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub target_id: String,
    pub method: String,
    pub runs: usize,
    pub mean_top_return: f64,
    pub std_top_return: f64,
    pub mean_top_step: f64,
    pub mean_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<RunSummary>,
    pub methods: Vec<MethodSummary>,
}

fn find_runs(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join("config.json").is_file() && dir.join("curves").join("learning_curve.csv").is_file() {
        found.push(dir.to_path_buf());
        return Ok(());
    }
    let mut entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_runs(&p, found)?;
        }
    }
    Ok(())
}

/// Collects every run under `runs_dir` and writes `runs.csv`,
/// `summary.csv`, `summary.json`, and, when SimKnoT runs exist,
/// `similarity_matrix.csv` with scores averaged over seeds.
pub fn cmd_report(runs_dir: &Path, out: &Path, cfg: &ReportConfig) -> Result<Report> {
    if !runs_dir.is_dir() {
        return Err(Error::invalid(format!("{} is not a directory", runs_dir.display())));
    }
    let mut dirs = Vec::new();
    find_runs(runs_dir, &mut dirs)?;
    if dirs.is_empty() {
        return Err(Error::invalid(format!("no completed runs under {}", runs_dir.display())));
    }
    let mut runs = Vec::with_capacity(dirs.len());
    let mut similarity: BTreeMap<String, Vec<SimilarityReport>> = BTreeMap::new();
    for dir in &dirs {
        let path = dir.join("config.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let echo: ConfigEcho = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
        let curve = read_curve(&dir.join("curves").join("learning_curve.csv"))?;
        let Some((top_return, top_step)) = summarize_curve(&curve, cfg) else {
            return Err(Error::parse(dir.join("curves/learning_curve.csv"), "empty learning curve"));
        };
        runs.push(RunSummary {
            target_id: echo.target_id.clone(),
            method: echo.method.name().to_string(),
            seed: echo.seed,
            top_return,
            top_step,
            auc: normalized_auc(&curve),
            final_return: curve.last().map_or(f64::NAN, |p| p.mean_eval_return),
            sim_id: echo.sim_id,
        });
        let sim = dir.join("similarity.json");
        if sim.is_file() {
            similarity.entry(echo.target_id).or_default().push(SimilarityReport::load(&sim)?);
        }
    }
    runs.sort_by(|a, b| (&a.target_id, &a.method, a.seed).cmp(&(&b.target_id, &b.method, b.seed)));

    let mut groups: BTreeMap<(String, String), Vec<&RunSummary>> = BTreeMap::new();
    for r in &runs {
        groups.entry((r.target_id.clone(), r.method.clone())).or_default().push(r);
    }
    let methods: Vec<MethodSummary> = groups
        .into_iter()
        .map(|((target_id, method), rs)| {
            let n = rs.len() as f64;
            let mean = |f: &dyn Fn(&RunSummary) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            let mean_top = mean(&|r| r.top_return);
            let var = mean(&|r| (r.top_return - mean_top).powi(2));
            MethodSummary {
                target_id,
                method,
                runs: rs.len(),
                mean_top_return: mean_top,
                std_top_return: var.sqrt(),
                mean_top_step: mean(&|r| r.top_step as f64),
                mean_auc: mean(&|r| r.auc),
            }
        })
        .collect();

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_rows(&out.join("runs.csv"), &runs)?;
    write_rows(&out.join("summary.csv"), &methods)?;
    let report = Report { runs, methods };
    write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&report)?)?;
    if !similarity.is_empty() {
        let averaged = similarity.values().map(|rs| average_reports(rs)).collect::<Result<Vec<_>>>()?;
        write_similarity_matrix(&averaged, &out.join("similarity_matrix.csv"))?;
    }
    Ok(report)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::parse(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-source mean of the scores over reports of one target; a source
/// excluded in any report is left out.
fn average_reports(reports: &[SimilarityReport]) -> Result<SimilarityReport> {
    let first = &reports[0];
    let outcomes = (0..first.source_ids.len())
        .map(|i| {
            let mut sum = 0.0;
            for r in reports {
                match r.scores.get(i).copied().flatten() {
                    Some(s) if r.source_ids.get(i) == first.source_ids.get(i) => sum += s,
                    _ => return Err(format!("not scored in every run of `{}`", first.target_id)),
                }
            }
            Ok(sum / reports.len() as f64)
        })
        .collect();
    SimilarityReport::new(&first.target_id, first.source_ids.clone(), outcomes, first.config.clone())
}

/// Alignment-loss conditions compared by the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    WithoutGeometry,
    WithoutAlignment,
    WithoutBoth,
}

impl Ablation {
    pub const ALL: [Ablation; 4] =
        [Ablation::Full, Ablation::WithoutGeometry, Ablation::WithoutAlignment, Ablation::WithoutBoth];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WithoutGeometry => "without-geometry",
            Ablation::WithoutAlignment => "without-alignment",
            Ablation::WithoutBoth => "without-both",
        }
    }

    pub fn apply(self, cfg: &AlignmentConfig) -> AlignmentConfig {
        match self {
            Ablation::Full => cfg.clone(),
            Ablation::WithoutGeometry => cfg.ablated(true, false),
            Ablation::WithoutAlignment => cfg.ablated(false, true),
            Ablation::WithoutBoth => cfg.ablated(false, false),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub condition: Ablation,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub task: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn scores(&self, condition: Ablation) -> Vec<f64> {
        self.rows.iter().filter(|r| r.condition == condition).map(|r| r.score).collect()
    }

    pub fn mean(&self, condition: Ablation) -> f64 {
        let s = self.scores(condition);
        s.iter().sum::<f64>() / s.len() as f64
    }

    /// Seeds whose scores follow full > without-geometry > without-alignment
    /// > without-both.
    pub fn ordered_seeds(&self) -> usize {
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        seeds.dedup();
        seeds
            .iter()
            .filter(|&&s| {
                let score = |c| self.rows.iter().find(|r| r.seed == s && r.condition == c).map(|r| r.score);
                let v: Option<Vec<f64>> = Ablation::ALL.iter().map(|&c| score(c)).collect();
                v.is_some_and(|v| v.windows(2).all(|w| w[0] > w[1]))
            })
            .count()
    }
}

/// Self-pair ablation: a source agent is trained on `task`, its data serves
/// as both sides of the alignment, and every condition is scored with the
/// same alignment seed. Writes `ablation.csv` under `out` when given.
pub fn cmd_ablation(
    task: &str,
    seeds: &[u64],
    source_steps: usize,
    cfg: &SimKnoTConfig,
    out: Option<&Path>,
) -> Result<AblationReport> {
    let per_seed = seeds
        .iter()
        .map(|&seed| {
            let source =
                SourceTask::train(task, source_steps, &cfg.agent, &cfg.dynamics, derive_seed(seed, "ablation/source"))?
                    .source;
            let data = &source.dataset;
            let (target_reward, _) =
                fit_reward_model(data, &cfg.dynamics, derive_seed(seed, "ablation/target-reward"))?;
            Ablation::ALL
                .par_iter()
                .map(|&c| {
                    let models =
                        train_alignment(data, data, &c.apply(&cfg.alignment), derive_seed(seed, "ablation/align"))?;
                    let score = score_pair(&source, data, &target_reward, &models, &cfg.similarity)?;
                    Ok(AblationRow { seed, condition: c, score })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let report = AblationReport { task: task.to_string(), rows: per_seed.into_iter().flatten().collect() };
    if let Some(out) = out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_rows(&out.join("ablation.csv"), &report.rows)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_stem_is_path_safe() {
        assert_eq!(file_stem("pendulumswingup@perm:1,0:aaffine:-1/0"), "pendulumswingup_perm_1_0_aaffine_-1_0");
    }

    #[test]
    fn smoothing_shrinks_at_edges() {
        let s = smooth(&[0.0, 3.0, 6.0, 9.0], 3);
        assert_eq!(s, vec![1.5, 3.0, 6.0, 7.5]);
    }

    #[test]
    fn short_curve_counts_as_one_stretch() {
        assert_eq!(sustained_max(&[3.0, 1.0, 2.0], 10), Some((1.0, 0)));
        assert_eq!(sustained_max(&[], 10), None);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err =
            serde_json::from_str::<ExperimentConfig>(r#"{"pipeline": {"alignment": {"lambdas": {"alignmnet": 1.0}}}}"#);
        assert!(err.is_err());
    }
}
