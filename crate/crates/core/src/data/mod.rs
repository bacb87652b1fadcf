//! Transitions, bounds normalization, and the labeled point sets the
//! alignment is trained on.

mod io;
mod matching;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Bounds, EnvSpec};
use crate::error::{Error, Result};

pub use io::{load_dataset, save_dataset, sidecar_path, DatasetMeta, DATASET_FORMAT_VERSION};
pub use matching::{knn, knn_graph, match_pairs, MatchedPair, MatchedPairSet};

/// One observed `(s, a, r, s', restart)` tuple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub restart: bool,
}

/// Per-variable bounds used to map raw values into `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBounds {
    pub state: Vec<Bounds>,
    pub action: Vec<Bounds>,
    pub reward: Bounds,
}

impl DatasetBounds {
    pub fn from_spec(spec: &EnvSpec) -> Self {
        Self { state: spec.state_bounds.clone(), action: spec.action_bounds.clone(), reward: spec.reward_bounds }
    }

    pub fn validate(&self) -> Result<()> {
        for b in self.state.iter().chain(&self.action).chain([&self.reward]) {
            b.validate()?;
        }
        Ok(())
    }
}

/// Bounds-normalized transitions stored column-block-wise. Every stored
/// value lies in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedDataset {
    pub task_id: String,
    pub bounds: DatasetBounds,
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub restarts: Vec<bool>,
    /// Raw values that fell outside their bounds and were clamped.
    pub clamp_count: usize,
}

fn normalize_value(v: f64, b: &Bounds, clamps: &mut usize) -> f64 {
    let u = b.normalize(v);
    if (0.0..=1.0).contains(&u) {
        u
    } else {
        *clamps += 1;
        u.clamp(0.0, 1.0)
    }
}

/// Maps raw transitions into `[0, 1]` per variable with
/// `(v − lower) / (upper − lower)`, clamping (and counting) out-of-range
/// values.
pub fn normalize(task_id: &str, transitions: &[Transition], bounds: &DatasetBounds) -> Result<NormalizedDataset> {
    bounds.validate()?;
    let n = transitions.len();
    let (sd, ad) = (bounds.state.len(), bounds.action.len());
    let mut out = NormalizedDataset::empty(task_id, bounds.clone());
    out.states = Array2::zeros((n, sd));
    out.actions = Array2::zeros((n, ad));
    out.rewards = Array1::zeros(n);
    out.next_states = Array2::zeros((n, sd));
    out.restarts = Vec::with_capacity(n);
    let mut clamps = 0;
    for (i, t) in transitions.iter().enumerate() {
        if t.s.len() != sd || t.s_next.len() != sd || t.a.len() != ad {
            return Err(Error::shape(format!(
                "transition {i} has dims ({}, {}, {}), dataset expects ({sd}, {ad}, {sd})",
                t.s.len(),
                t.a.len(),
                t.s_next.len()
            )));
        }
        for (j, b) in bounds.state.iter().enumerate() {
            out.states[[i, j]] = normalize_value(t.s[j], b, &mut clamps);
            out.next_states[[i, j]] = normalize_value(t.s_next[j], b, &mut clamps);
        }
        for (j, b) in bounds.action.iter().enumerate() {
            out.actions[[i, j]] = normalize_value(t.a[j], b, &mut clamps);
        }
        out.rewards[i] = normalize_value(t.r, &bounds.reward, &mut clamps);
        out.restarts.push(t.restart);
    }
    out.clamp_count = clamps;
    Ok(out)
}

impl NormalizedDataset {
    pub fn empty(task_id: &str, bounds: DatasetBounds) -> Self {
        let (sd, ad) = (bounds.state.len(), bounds.action.len());
        Self {
            task_id: task_id.to_string(),
            states: Array2::zeros((0, sd)),
            actions: Array2::zeros((0, ad)),
            rewards: Array1::zeros(0),
            next_states: Array2::zeros((0, sd)),
            restarts: Vec::new(),
            bounds,
            clamp_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.bounds.state.len()
    }

    pub fn action_dim(&self) -> usize {
        self.bounds.action.len()
    }

    /// Normalized row `i`.
    pub fn row(&self, i: usize) -> Transition {
        Transition {
            s: self.states.row(i).to_vec(),
            a: self.actions.row(i).to_vec(),
            r: self.rewards[i],
            s_next: self.next_states.row(i).to_vec(),
            restart: self.restarts[i],
        }
    }

    /// Raw transitions recovered through the inverse map.
    pub fn denormalize(&self) -> Vec<Transition> {
        let den = |row: ndarray::ArrayView1<f64>, b: &[Bounds]| -> Vec<f64> {
            row.iter().zip(b).map(|(&u, b)| b.denormalize(u)).collect()
        };
        (0..self.len())
            .map(|i| Transition {
                s: den(self.states.row(i), &self.bounds.state),
                a: den(self.actions.row(i), &self.bounds.action),
                r: self.bounds.reward.denormalize(self.rewards[i]),
                s_next: den(self.next_states.row(i), &self.bounds.state),
                restart: self.restarts[i],
            })
            .collect()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            task_id: self.task_id.clone(),
            bounds: self.bounds.clone(),
            states: self.states.select(Axis(0), indices),
            actions: self.actions.select(Axis(0), indices),
            rewards: self.rewards.select(Axis(0), indices),
            next_states: self.next_states.select(Axis(0), indices),
            restarts: indices.iter().map(|&i| self.restarts[i]).collect(),
            clamp_count: self.clamp_count,
        }
    }

    /// Seeded shuffle split into `(first, second)` with
    /// `round(len · first_fraction)` rows in the first part.
    pub fn split(&self, first_fraction: f64, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * first_fraction).round() as usize;
        let cut = cut.min(self.len());
        (self.select(&idx[..cut]), self.select(&idx[cut..]))
    }

    /// At most `max_rows` rows drawn without replacement, in original order.
    pub fn subsample(&self, max_rows: usize, seed: u64) -> Self {
        if self.len() <= max_rows {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(max_rows);
        idx.sort_unstable();
        self.select(&idx)
    }

    /// Rows whose successor is a real continuation (restart flag unset).
    pub fn without_restarts(&self) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| !self.restarts[i]).collect();
        self.select(&idx)
    }

    /// `[s | a]` per row.
    pub fn state_actions(&self) -> Array2<f64> {
        ndarray::concatenate(Axis(1), &[self.states.view(), self.actions.view()]).expect("row counts agree")
    }
}

/// Normalized points (states or actions) each carrying the normalized reward
/// observed with it.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub points: Array2<f64>,
    pub rewards: Vec<f64>,
}

impl LabeledSet {
    pub fn new(points: Array2<f64>, rewards: Vec<f64>) -> Result<Self> {
        if points.nrows() != rewards.len() {
            return Err(Error::shape(format!("{} points but {} reward labels", points.nrows(), rewards.len())));
        }
        if let Some(r) = rewards.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::invalid(format!("reward label {r} outside [0, 1]")));
        }
        Ok(Self { points, rewards })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

/// Splits a dataset into its state set and action set; row `i` of both
/// carries reward `r_i`.
pub fn build_alignment_sets(d: &NormalizedDataset) -> Result<(LabeledSet, LabeledSet)> {
    if d.is_empty() {
        return Err(Error::invalid(format!(
            "dataset `{}` is empty; alignment needs at least one transition",
            d.task_id
        )));
    }
    let labels = d.rewards.to_vec();
    Ok((LabeledSet::new(d.states.clone(), labels.clone())?, LabeledSet::new(d.actions.clone(), labels)?))
}
