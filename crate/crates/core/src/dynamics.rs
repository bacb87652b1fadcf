//! Learned reward model `R̂(s, a)` and transition model `Φ̂(s, a) → s'`
//! on normalized data, used by the similarity measure.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::NormalizedDataset;
use crate::error::{Error, Result};
use crate::nn::{layer_dims, Mlp, MlpCheckpoint, Trainable};
use crate::rng::{derive_seed, stream_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of rows held out to report generalization error.
    pub holdout_fraction: f64,
    /// Rows drawn (seeded) from the dataset before fitting; `None` uses all.
    pub max_rows: Option<usize>,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self { hidden: vec![64; 4], epochs: 300, batch_size: 512, lr: 1e-3, holdout_fraction: 0.1, max_rows: None }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("batch_size and hidden widths must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::invalid(format!("holdout_fraction must lie in [0, 1), got {}", self.holdout_fraction)));
        }
        Ok(())
    }
}

/// Training diagnostics of one fitted model. MSE is averaged over rows and
/// output coordinates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Training-set MSE before fitting (index 0) and after every epoch.
    pub train_mse: Vec<f64>,
    pub holdout_mse: Option<f64>,
    pub train_rows: usize,
    pub holdout_rows: usize,
}

impl FitReport {
    pub fn final_train_mse(&self) -> f64 {
        *self.train_mse.last().expect("trace holds the initial value")
    }
}

/// Mean over all entries of `(pred − target)²`.
pub fn mse(pred: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n
}

/// Fits `inputs → targets` by minibatch Adam on mean squared error.
pub fn fit_regressor(
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    cfg: &DynamicsConfig,
    seed: u64,
) -> Result<(Mlp, FitReport)> {
    cfg.validate()?;
    let n = inputs.nrows();
    if n == 0 {
        return Err(Error::invalid("cannot fit a model on an empty dataset"));
    }
    if targets.nrows() != n {
        return Err(Error::shape(format!("{n} inputs but {} targets", targets.nrows())));
    }
    let mut rng = stream_rng(seed, "dynamics/fit");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_hold = if n >= 10 { (n as f64 * cfg.holdout_fraction).round() as usize } else { 0 };
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let x = inputs.select(Axis(0), train_idx);
    let y = targets.select(Axis(0), train_idx);

    let net = Mlp::new(&layer_dims(inputs.ncols(), &cfg.hidden, targets.ncols()), &mut rng)?;
    let mut model = Trainable::new(net);
    let mut report = FitReport {
        train_mse: vec![mse(&model.net.forward_batch(x.view())?, &y)],
        holdout_mse: None,
        train_rows: train_idx.len(),
        holdout_rows: n_hold,
    };
    let mut rows: Vec<usize> = (0..x.nrows()).collect();
    for epoch in 1..=cfg.epochs {
        rows.shuffle(&mut rng);
        for batch in rows.chunks(cfg.batch_size) {
            let bx = x.select(Axis(0), batch);
            let by = y.select(Axis(0), batch);
            let trace = model.net.forward_traced(bx.view())?;
            let scale = 2.0 / (by.len() as f64);
            let d_out = (trace.output() - &by) * scale;
            let mut grads = model.net.zero_gradients();
            model.net.backward(&trace, d_out.view(), &mut grads)?;
            model.apply(grads, cfg.lr, None)?;
        }
        let loss = mse(&model.net.forward_batch(x.view())?, &y);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                reason: "regression loss became non-finite".into(),
                trace: report.train_mse,
            });
        }
        report.train_mse.push(loss);
    }
    if n_hold > 0 {
        let hx = inputs.select(Axis(0), hold_idx);
        let hy = targets.select(Axis(0), hold_idx);
        report.holdout_mse = Some(mse(&model.net.forward_batch(hx.view())?, &hy));
    }
    Ok((model.net, report))
}

fn prepared(d: &NormalizedDataset, cfg: &DynamicsConfig, seed: u64, role: &str) -> NormalizedDataset {
    match cfg.max_rows {
        Some(m) => d.subsample(m, derive_seed(seed, &format!("dynamics/rows/{role}"))),
        None => d.clone(),
    }
}

/// `(s, a) → r` on normalized data.
pub fn fit_reward_model(d: &NormalizedDataset, cfg: &DynamicsConfig, seed: u64) -> Result<(Mlp, FitReport)> {
    let d = prepared(d, cfg, seed, "reward");
    let targets = d.rewards.view().insert_axis(Axis(1));
    fit_regressor(d.state_actions().view(), targets, cfg, derive_seed(seed, "reward"))
}

/// `(s, a) → s'` on normalized data.
pub fn fit_transition_model(d: &NormalizedDataset, cfg: &DynamicsConfig, seed: u64) -> Result<(Mlp, FitReport)> {
    let d = prepared(d, cfg, seed, "transition");
    fit_regressor(d.state_actions().view(), d.next_states.view(), cfg, derive_seed(seed, "transition"))
}

fn concat(s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
    if s.nrows() != a.nrows() {
        return Err(Error::shape(format!("{} states but {} actions", s.nrows(), a.nrows())));
    }
    Ok(ndarray::concatenate(Axis(1), &[s, a]).expect("row counts checked"))
}

/// Reward predictions for rows of `(s, a)`; outputs are not clamped.
pub fn predict_rewards(m: &Mlp, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array1<f64>> {
    if m.output_dim() != 1 {
        return Err(Error::shape(format!("reward model has {} outputs", m.output_dim())));
    }
    Ok(m.forward_batch(concat(s, a)?.view())?.column(0).to_owned())
}

pub fn predict_reward(m: &Mlp, s: &[f64], a: &[f64]) -> Result<f64> {
    let input: Vec<f64> = s.iter().chain(a).copied().collect();
    let out = m.forward(&input)?;
    if out.len() != 1 {
        return Err(Error::shape(format!("reward model has {} outputs", out.len())));
    }
    Ok(out[0])
}

/// Next-state predictions for rows of `(s, a)`; outputs are not clamped.
pub fn predict_next_states(m: &Mlp, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
    if m.output_dim() != s.ncols() {
        return Err(Error::shape(format!(
            "transition model predicts {} coordinates for {}-dim states",
            m.output_dim(),
            s.ncols()
        )));
    }
    m.forward_batch(concat(s, a)?.view())
}

pub fn predict_next_state(m: &Mlp, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
    if m.output_dim() != s.len() {
        return Err(Error::shape(format!(
            "transition model predicts {} coordinates for {}-dim states",
            m.output_dim(),
            s.len()
        )));
    }
    let input: Vec<f64> = s.iter().chain(a).copied().collect();
    m.forward(&input)
}

/// Reward and transition models of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsModels {
    pub task_id: String,
    pub reward: Mlp,
    pub transition: Mlp,
    pub reward_report: FitReport,
    pub transition_report: FitReport,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DynamicsMeta {
    task_id: String,
    reward_report: FitReport,
    transition_report: FitReport,
}

impl DynamicsModels {
    pub fn fit(d: &NormalizedDataset, cfg: &DynamicsConfig, seed: u64) -> Result<Self> {
        let ((reward, reward_report), (transition, transition_report)) = {
            let (r, t) = rayon::join(|| fit_reward_model(d, cfg, seed), || fit_transition_model(d, cfg, seed));
            (r?, t?)
        };
        Ok(Self { task_id: d.task_id.clone(), reward, transition, reward_report, transition_report })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (role, net) in [("reward", &self.reward), ("transition", &self.transition)] {
            MlpCheckpoint::from_mlp(net)
                .with_tag("role", role)
                .with_tag("task_id", &self.task_id)
                .save(&dir.join(format!("{role}.json")))?;
        }
        let meta = DynamicsMeta {
            task_id: self.task_id.clone(),
            reward_report: self.reward_report.clone(),
            transition_report: self.transition_report.clone(),
        };
        let path = dir.join("dynamics.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("dynamics.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: DynamicsMeta = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
        let load = |role: &str| -> Result<Mlp> {
            let p = dir.join(format!("{role}.json"));
            if !p.exists() {
                return Err(Error::MissingComponent(format!("{role} model at {}", p.display())));
            }
            let ck = MlpCheckpoint::load(&p)?;
            if ck.metadata.get("role").map(String::as_str) != Some(role) {
                return Err(Error::parse(&p, format!("checkpoint is not tagged with role `{role}`")));
            }
            ck.to_mlp()
        };
        Ok(Self {
            task_id: meta.task_id,
            reward: load("reward")?,
            transition: load("transition")?,
            reward_report: meta.reward_report,
            transition_report: meta.transition_report,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_model_predicts_zero() {
        let m = Mlp::zeros(&[3, 4, 1]).unwrap();
        assert_eq!(predict_reward(&m, &[0.2, 0.3], &[0.9]).unwrap(), 0.0);
        assert!(predict_reward(&m, &[0.2], &[0.9]).is_err());
    }

    #[test]
    fn batch_equals_rows() {
        let mut rng = stream_rng(1, "t");
        let m = Mlp::new(&[3, 8, 2], &mut rng).unwrap();
        let s = array![[0.1, 0.2], [0.7, 0.4], [0.0, 1.0]];
        let a = array![[0.5], [0.3], [0.9]];
        let batch = predict_next_states(&m, s.view(), a.view()).unwrap();
        for i in 0..3 {
            let row = predict_next_state(&m, s.row(i).as_slice().unwrap(), a.row(i).as_slice().unwrap()).unwrap();
            for k in 0..2 {
                assert!((row[k] - batch[[i, k]]).abs() < 1e-14);
            }
        }
        let direct = m.forward(&[0.7, 0.4, 0.3]).unwrap();
        assert_eq!(direct, batch.row(1).to_vec());
    }

    #[test]
    fn constant_target_is_learned() {
        let x = Array2::from_shape_fn((200, 2), |(i, j)| ((i * 13 + j * 7) % 17) as f64 / 16.0);
        let y = Array2::from_elem((200, 1), 0.3);
        let cfg = DynamicsConfig { hidden: vec![16, 16], epochs: 200, batch_size: 64, ..DynamicsConfig::default() };
        let (m, report) = fit_regressor(x.view(), y.view(), &cfg, 4).unwrap();
        let pred = m.forward_batch(x.view()).unwrap();
        assert!(report.final_train_mse() < 1e-4, "{:?}", report.final_train_mse());
        assert!(pred.iter().all(|p| (p - 0.3).abs() < 2e-2));
        assert!(report.final_train_mse() <= report.train_mse[1]);
        assert_eq!(report.holdout_rows, 20);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let x = Array2::<f64>::zeros((0, 2));
        let y = Array2::<f64>::zeros((0, 1));
        assert!(fit_regressor(x.view(), y.view(), &DynamicsConfig::default(), 0).is_err());
    }
}
