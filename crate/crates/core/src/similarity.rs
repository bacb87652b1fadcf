//! Inter-task similarity from learned models and alignment maps, and source
//! ranking.
//!
//! For every target transition `(s_y, a_y, s'_y)` the target state and
//! action are mapped into the source task and pushed through the source
//! transition model, giving `s'_x`. Uniformly sampled target actions `a'_y`
//! and their mapped counterparts `a'_x` are then scored by both reward
//! models at `s'_x` and `s'_y`; the score is one minus the mean absolute gap.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentModelSet;
use crate::data::NormalizedDataset;
use crate::dynamics::{predict_next_states, predict_rewards};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityConfig {
    /// Uniform target-action samples per transition.
    pub n_action_samples: usize,
    /// Target transitions used (seeded subsample); `None` uses all.
    pub n_target_rows: Option<usize>,
    pub seed: u64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self { n_action_samples: 16, n_target_rows: None, seed: 0 }
    }
}

/// `(s, a) → r` predictor on normalized data.
pub trait RewardModel: Sync {
    fn predict(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array1<f64>>;
}

/// `(s, a) → s'` predictor on normalized data.
pub trait TransitionModel: Sync {
    fn predict(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>>;
}

/// Maps from the target task's normalized spaces into the source task's.
pub trait AlignmentMaps: Sync {
    fn target_state_to_source(&self, s: ArrayView2<f64>) -> Result<Array2<f64>>;
    fn target_action_to_source(&self, a: ArrayView2<f64>) -> Result<Array2<f64>>;
}

impl RewardModel for Mlp {
    fn predict(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array1<f64>> {
        predict_rewards(self, s, a)
    }
}

impl TransitionModel for Mlp {
    fn predict(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        predict_next_states(self, s, a)
    }
}

impl AlignmentMaps for AlignmentModelSet {
    fn target_state_to_source(&self, s: ArrayView2<f64>) -> Result<Array2<f64>> {
        AlignmentModelSet::target_state_to_source(self, s)
    }

    fn target_action_to_source(&self, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        AlignmentModelSet::target_action_to_source(self, a)
    }
}

/// Everything the measure consumes besides the target data. A `None`
/// component is reported by name.
#[derive(Clone, Copy, Default)]
pub struct SimilarityInputs<'a> {
    pub source_reward: Option<&'a dyn RewardModel>,
    pub source_transition: Option<&'a dyn TransitionModel>,
    pub alignment: Option<&'a dyn AlignmentMaps>,
    pub target_reward: Option<&'a dyn RewardModel>,
}

fn require<'a, T: ?Sized>(c: Option<&'a T>, name: &str) -> Result<&'a T> {
    c.ok_or_else(|| Error::MissingComponent(format!("similarity needs the {name}")))
}

const CHUNK_ROWS: usize = 1024;

/// The similarity score of the source behind `inputs` for the target data.
pub fn measure(inputs: SimilarityInputs, target: &NormalizedDataset, cfg: &SimilarityConfig) -> Result<f64> {
    let r_x = require(inputs.source_reward, "source reward model")?;
    let phi_x = require(inputs.source_transition, "source transition model")?;
    let align = require(inputs.alignment, "alignment maps")?;
    let r_y = require(inputs.target_reward, "target reward model")?;
    if cfg.n_action_samples == 0 {
        return Err(Error::invalid("n_action_samples must be at least 1"));
    }
    let mut d = target.without_restarts();
    if let Some(n) = cfg.n_target_rows {
        d = d.subsample(n, crate::rng::derive_seed(cfg.seed, "similarity/rows"));
    }
    if d.is_empty() {
        return Err(Error::invalid(format!("target dataset `{}` has no non-restart transitions", target.task_id)));
    }
    let k = cfg.n_action_samples;
    let ad = d.action_dim();
    let mut rng = stream_rng(cfg.seed, "similarity/actions");
    let mut gap_sum = 0.0;
    for start in (0..d.len()).step_by(CHUNK_ROWS) {
        let rows: Vec<usize> = (start..(start + CHUNK_ROWS).min(d.len())).collect();
        let n = rows.len();
        let s_y = d.states.select(Axis(0), &rows);
        let a_y = d.actions.select(Axis(0), &rows);
        let sn_y = d.next_states.select(Axis(0), &rows);

        let s_x = align.target_state_to_source(s_y.view())?;
        let a_x = align.target_action_to_source(a_y.view())?;
        let sn_x = phi_x.predict(s_x.view(), a_x.view())?;

        let samples = Array2::from_shape_fn((n * k, ad), |_| rng.random::<f64>());
        let samples_x = align.target_action_to_source(samples.view())?;
        let rep = |m: &Array2<f64>| -> Array2<f64> {
            let idx: Vec<usize> = (0..n * k).map(|i| i / k).collect();
            m.select(Axis(0), &idx)
        };
        let pred_x = r_x.predict(rep(&sn_x).view(), samples_x.view())?;
        let pred_y = r_y.predict(rep(&sn_y).view(), samples.view())?;
        gap_sum += pred_x.iter().zip(&pred_y).map(|(p, q)| (p - q).abs()).sum::<f64>();
    }
    let score = 1.0 - gap_sum / (d.len() * k) as f64;
    if !score.is_finite() {
        return Err(Error::numeric(format!("similarity for `{}` is not finite", target.task_id)));
    }
    Ok(score)
}

/// Indices sorted by descending score, ties to the lowest index, and the
/// first of them. NaN scores rank last.
pub fn rank_sources(scores: &[f64]) -> Result<(Vec<usize>, usize)> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot rank an empty list of sources"));
    }
    let key = |i: usize| if scores[i].is_nan() { f64::NEG_INFINITY } else { scores[i] };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    let best = order[0];
    Ok((order, best))
}

/// A source that could not be scored, with the reason.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcludedSource {
    pub index: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityReport {
    pub target_id: String,
    pub source_ids: Vec<String>,
    /// One entry per source; `None` for excluded sources.
    pub scores: Vec<Option<f64>>,
    /// Scored source indices, most similar first.
    pub ranking: Vec<usize>,
    pub sim_id: usize,
    pub excluded: Vec<ExcludedSource>,
    pub config: SimilarityConfig,
}

impl SimilarityReport {
    /// Ranks the scored sources. Fails when every source was excluded.
    pub fn new(
        target_id: &str,
        source_ids: Vec<String>,
        outcomes: Vec<std::result::Result<f64, String>>,
        config: SimilarityConfig,
    ) -> Result<Self> {
        if outcomes.len() != source_ids.len() {
            return Err(Error::shape("one outcome per source required"));
        }
        let mut scores = Vec::with_capacity(outcomes.len());
        let mut excluded = Vec::new();
        for (i, o) in outcomes.into_iter().enumerate() {
            match o {
                Ok(s) => scores.push(Some(s)),
                Err(reason) => {
                    scores.push(None);
                    excluded.push(ExcludedSource { index: i, reason });
                }
            }
        }
        let included: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].is_some()).collect();
        if included.is_empty() {
            return Err(Error::invalid(format!("no source could be scored for `{target_id}`: {:?}", excluded)));
        }
        let vals: Vec<f64> = included.iter().map(|&i| scores[i].expect("included")).collect();
        let (order, _) = rank_sources(&vals)?;
        let ranking: Vec<usize> = order.into_iter().map(|k| included[k]).collect();
        Ok(Self { target_id: target_id.to_string(), source_ids, sim_id: ranking[0], scores, ranking, excluded, config })
    }

    /// 0-based rank of source `index`, if it was scored.
    pub fn rank_of(&self, index: usize) -> Option<usize> {
        self.ranking.iter().position(|&i| i == index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// Target-by-source score table; empty cells for pairs that were not
/// scored.
pub fn write_similarity_matrix(reports: &[SimilarityReport], path: &Path) -> Result<()> {
    let mut columns: Vec<String> = Vec::new();
    for r in reports {
        for s in &r.source_ids {
            if !columns.contains(s) {
                columns.push(s.clone());
            }
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let err = |e: csv::Error| Error::parse(path, e.to_string());
    let mut header = vec!["target".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header).map_err(err)?;
    for r in reports {
        let by_source: BTreeMap<&str, f64> =
            r.source_ids.iter().zip(&r.scores).filter_map(|(id, s)| s.map(|v| (id.as_str(), v))).collect();
        let mut row = vec![r.target_id.clone()];
        row.extend(columns.iter().map(|c| by_source.get(c.as_str()).map_or(String::new(), |v| v.to_string())));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
