//! Reward-based alignment between the state spaces and between the action
//! spaces of two tasks.
//!
//! Each space pair gets its own encoder/decoder group: encoders `θ_X`, `θ_Y`
//! into a shared latent space of dimension `max(|X|, |Y|) + 1`, decoders
//! `φ_X`, `φ_Y` back out. Throughout, `X` is the source task and `Y` the
//! target task. The two groups train independently; they only share the
//! reward labels of the transitions their points came from.

mod io;
mod losses;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{build_alignment_sets, knn_graph, match_pairs, LabeledSet, NormalizedDataset};
use crate::error::{Error, Result};
use crate::nn::{layer_dims, Activation, Dense, GradClipConfig, Mlp, Trainable};
use crate::rng::stream_rng;

pub use io::{load_alignment, save_alignment, AlignmentManifest, ALIGNMENT_FORMAT_VERSION};
pub use losses::{
    alignment_loss, cos_d, cosine, cycle_loss, geometry_loss, latent_norm_loss, reba_eval, reba_total,
    reconstruction_loss, similarity_coefficient, GroupBatch, GroupGradients, GroupNets, Lambdas, LossTerms,
    WeightedPair, ZERO_NORM,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub delta: f64,
    pub k: usize,
    pub lambdas: Lambdas,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: GradClipConfig,
    /// Rows drawn (seeded, without replacement) from each dataset before
    /// training; `None` uses every row.
    pub max_rows: Option<usize>,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            delta: 0.25,
            k: 2,
            lambdas: Lambdas::default(),
            hidden: vec![64; 4],
            epochs: 10,
            batch_size: 512,
            lr: 0.01,
            clip: GradClipConfig::default(),
            max_rows: None,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::invalid(format!("delta must be positive, got {}", self.delta)));
        }
        if self.k == 0 || self.batch_size == 0 {
            return Err(Error::invalid("k and batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        self.lambdas.validate()?;
        self.clip.validate()
    }

    /// The same configuration without the alignment and/or geometry terms.
    pub fn ablated(&self, alignment: bool, geometry: bool) -> Self {
        let mut c = self.clone();
        if !alignment {
            c.lambdas.alignment = 0.0;
        }
        if !geometry {
            c.lambdas.geometry = 0.0;
        }
        c
    }
}

/// `max(p, q) + 1`.
pub fn latent_dim(p: usize, q: usize) -> usize {
    p.max(q) + 1
}

/// Dimensions of the aligned spaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairDims {
    pub source_state: usize,
    pub source_action: usize,
    pub target_state: usize,
    pub target_action: usize,
}

/// The eight alignment networks for one (source, target) pair together with
/// their per-epoch loss traces.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentModelSet {
    pub source_id: String,
    pub target_id: String,
    pub state: GroupNets,
    pub action: GroupNets,
    /// Full-data loss before training (index 0) and after every epoch.
    pub state_trace: Vec<LossTerms>,
    pub action_trace: Vec<LossTerms>,
}

fn group_nets<R: rand::Rng + ?Sized>(p: usize, q: usize, hidden: &[usize], rng: &mut R) -> Result<GroupNets> {
    let m = latent_dim(p, q);
    Ok(GroupNets {
        enc_x: Mlp::new(&layer_dims(p, hidden, m), rng)?,
        dec_x: Mlp::new(&layer_dims(m, hidden, p), rng)?,
        enc_y: Mlp::new(&layer_dims(q, hidden, m), rng)?,
        dec_y: Mlp::new(&layer_dims(m, hidden, q), rng)?,
    })
}

/// Single linear layer `e_i ↦ e_i` from `n` into `m ≥ n` dims, or the
/// matching projection back.
fn embedding(from: usize, to: usize) -> Mlp {
    let layer = Dense {
        weight: Array2::from_shape_fn((to, from), |(i, j)| if i == j { 1.0 } else { 0.0 }),
        bias: ndarray::Array1::zeros(to),
    };
    Mlp::from_layers(vec![layer], Activation::Relu, Activation::Linear).expect("valid dims")
}

fn identity_group(n: usize) -> GroupNets {
    let m = latent_dim(n, n);
    GroupNets { enc_x: embedding(n, m), dec_x: embedding(m, n), enc_y: embedding(n, m), dec_y: embedding(m, n) }
}

impl AlignmentModelSet {
    /// Freshly initialized networks.
    pub fn untrained(source_id: &str, target_id: &str, dims: PairDims, hidden: &[usize], seed: u64) -> Result<Self> {
        Ok(Self {
            source_id: source_id.to_string(),
            target_id: target_id.to_string(),
            state: group_nets(dims.source_state, dims.target_state, hidden, &mut stream_rng(seed, "align/state"))?,
            action: group_nets(dims.source_action, dims.target_action, hidden, &mut stream_rng(seed, "align/action"))?,
            state_trace: Vec::new(),
            action_trace: Vec::new(),
        })
    }

    /// Exact identity maps between two spaces of equal dimensions.
    pub fn identity(task_id: &str, state_dim: usize, action_dim: usize) -> Self {
        Self {
            source_id: task_id.to_string(),
            target_id: task_id.to_string(),
            state: identity_group(state_dim),
            action: identity_group(action_dim),
            state_trace: Vec::new(),
            action_trace: Vec::new(),
        }
    }

    pub fn dims(&self) -> PairDims {
        PairDims {
            source_state: self.state.enc_x.input_dim(),
            source_action: self.action.enc_x.input_dim(),
            target_state: self.state.enc_y.input_dim(),
            target_action: self.action.enc_y.input_dim(),
        }
    }

    /// Target states into the source state space, `φ_X^S ∘ θ_Y^S`.
    pub fn target_state_to_source(&self, s: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.state.dec_x.forward_batch(self.state.enc_y.forward_batch(s)?.view())
    }

    /// Target actions into the source action space, `φ_X^A ∘ θ_Y^A`.
    pub fn target_action_to_source(&self, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.action.dec_x.forward_batch(self.action.enc_y.forward_batch(a)?.view())
    }

    /// Source actions into the target action space, `φ_Y^A ∘ θ_X^A`.
    pub fn source_action_to_target(&self, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.action.dec_y.forward_batch(self.action.enc_x.forward_batch(a)?.view())
    }

    /// Source states into the target state space, `φ_Y^S ∘ θ_X^S`.
    pub fn source_state_to_target(&self, s: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.state.dec_y.forward_batch(self.state.enc_x.forward_batch(s)?.view())
    }

    /// Checksum over all eight networks.
    pub fn checksum(&self) -> u64 {
        let sums: Vec<f64> =
            self.state.nets().into_iter().chain(self.action.nets()).map(|n| f64::from_bits(n.checksum())).collect();
        crate::nn::checksum_values(sums.into_iter())
    }
}

/// Splits `0..len` into `parts` nearly equal contiguous chunks and returns
/// chunk `i`.
fn chunk(len: usize, parts: usize, i: usize) -> std::ops::Range<usize> {
    (i * len / parts)..((i + 1) * len / parts)
}

fn divergence(epoch: usize, group: &str, terms: &LossTerms, trace: &[LossTerms]) -> Error {
    Error::Divergence {
        epoch,
        reason: format!("{group} alignment loss became non-finite ({terms:?})"),
        trace: trace.iter().map(|t| t.total).collect(),
    }
}

/// Trains one encoder/decoder group on a pair of labeled point sets.
pub fn train_group(
    x: &LabeledSet,
    y: &LabeledSet,
    cfg: &AlignmentConfig,
    seed: u64,
    group: &str,
) -> Result<(GroupNets, Vec<LossTerms>)> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, &format!("align/{group}"));
    let nets = group_nets(x.dim(), y.dim(), &cfg.hidden, &mut rng)?;
    train_group_from(nets, x, y, cfg, &mut rng, group)
}

fn train_group_from(
    nets: GroupNets,
    x: &LabeledSet,
    y: &LabeledSet,
    cfg: &AlignmentConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
    group: &str,
) -> Result<(GroupNets, Vec<LossTerms>)> {
    let pairs = match_pairs(x, y, cfg.delta)?;
    let graph_x = knn_graph(x.points.view(), cfg.k)?;
    let graph_y = knn_graph(y.points.view(), cfg.k)?;
    let full = GroupBatch::full(x.points.view(), y.points.view(), &pairs, cfg.k)?;

    let [ex, dx, ey, dy] = [nets.enc_x, nets.dec_x, nets.enc_y, nets.dec_y];
    let mut train: [Trainable; 4] = [ex, dx, ey, dy].map(Trainable::new);
    let current = |t: &[Trainable; 4]| GroupNets {
        enc_x: t[0].net.clone(),
        dec_x: t[1].net.clone(),
        enc_y: t[2].net.clone(),
        dec_y: t[3].net.clone(),
    };

    let mut trace = vec![reba_eval(&current(&train), &full, &cfg.lambdas)?.0];
    if !trace[0].is_finite() {
        return Err(divergence(0, group, &trace[0], &[]));
    }
    let (nx, ny, np) = (x.len(), y.len(), full.pairs.len());
    let steps = nx.max(ny).max(np).div_ceil(cfg.batch_size);
    let mut ox: Vec<usize> = (0..nx).collect();
    let mut oy: Vec<usize> = (0..ny).collect();
    let mut op: Vec<usize> = (0..np).collect();
    for epoch in 1..=cfg.epochs {
        ox.shuffle(rng);
        oy.shuffle(rng);
        op.shuffle(rng);
        for s in 0..steps {
            let batch_pairs: Vec<WeightedPair> = op[chunk(np, steps, s)].iter().map(|&i| full.pairs[i]).collect();
            let batch = GroupBatch::gather(
                x.points.view(),
                y.points.view(),
                &ox[chunk(nx, steps, s)],
                &oy[chunk(ny, steps, s)],
                &graph_x,
                &graph_y,
                &batch_pairs,
            );
            let nets = current(&train);
            let (terms, grads) = reba_eval(&nets, &batch, &cfg.lambdas)?;
            if !terms.is_finite() {
                return Err(divergence(epoch, group, &terms, &trace));
            }
            for (t, g) in train.iter_mut().zip(grads.into_array()) {
                t.apply(g, cfg.lr, Some(&cfg.clip))?;
            }
        }
        let terms = reba_eval(&current(&train), &full, &cfg.lambdas)?.0;
        if !terms.is_finite() {
            return Err(divergence(epoch, group, &terms, &trace));
        }
        log::debug!("{group} alignment epoch {epoch}: {:.6}", terms.total);
        trace.push(terms);
    }
    Ok((current(&train), trace))
}

/// Learns the state and action alignments between a source dataset (`X`)
/// and a target dataset (`Y`).
pub fn train_alignment(
    source: &NormalizedDataset,
    target: &NormalizedDataset,
    cfg: &AlignmentConfig,
    seed: u64,
) -> Result<AlignmentModelSet> {
    cfg.validate()?;
    let (src, tgt) = match cfg.max_rows {
        Some(n) => (
            source.subsample(n, crate::rng::derive_seed(seed, "align/rows/source")),
            target.subsample(n, crate::rng::derive_seed(seed, "align/rows/target")),
        ),
        None => (source.clone(), target.clone()),
    };
    for d in [&src, &tgt] {
        if d.len() <= cfg.k {
            return Err(Error::invalid(format!(
                "dataset `{}` has {} rows; alignment needs more than k = {}",
                d.task_id,
                d.len(),
                cfg.k
            )));
        }
    }
    let (sx, ax) = build_alignment_sets(&src)?;
    let (sy, ay) = build_alignment_sets(&tgt)?;
    let (state, action) =
        rayon::join(|| train_group(&sx, &sy, cfg, seed, "state"), || train_group(&ax, &ay, cfg, seed, "action"));
    let (state, state_trace) = state?;
    let (action, action_trace) = action?;
    Ok(AlignmentModelSet {
        source_id: source.task_id.clone(),
        target_id: target.task_id.clone(),
        state,
        action,
        state_trace,
        action_trace,
    })
}

/// Mean over rows and coordinates of the squared cycle error
/// `x − φ_X(θ_Y(φ_Y(θ_X(x))))`, for both groups of a model set.
pub fn cycle_error_per_coordinate(
    models: &AlignmentModelSet,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
) -> Result<(f64, f64)> {
    let per = |g: &GroupNets, pts: ArrayView2<f64>| -> Result<f64> {
        Ok(cycle_loss(&g.enc_x, &g.dec_x, &g.enc_y, &g.dec_y, pts)? / pts.ncols() as f64)
    };
    Ok((per(&models.state, states)?, per(&models.action, actions)?))
}
