mod common;

use common::random_dataset;
use ndarray::{Array1, Array2, Axis};
use simknot::data::NormalizedDataset;
use simknot::dynamics::{
    fit_reward_model, fit_transition_model, predict_next_state, predict_next_states, predict_reward, predict_rewards,
    DynamicsConfig, DynamicsModels,
};
use simknot::nn::Mlp;

fn per_coordinate_mse(pred: &Array2<f64>, target: &Array2<f64>) -> Vec<f64> {
    (pred - target).mapv(|d| d * d).mean_axis(Axis(0)).unwrap().to_vec()
}

fn with_rewards(mut d: NormalizedDataset, f: impl Fn(usize, &NormalizedDataset) -> f64) -> NormalizedDataset {
    d.rewards = Array1::from_iter((0..d.len()).map(|i| f(i, &d)));
    d
}

#[test]
fn constant_reward_is_reproduced() {
    let d = with_rewards(random_dataset("doubleintegrator2d", 10_000, 1), |_, _| 0.3);
    let (m, report) = fit_reward_model(&d, &DynamicsConfig::default(), 2).unwrap();
    let pred = predict_rewards(&m, d.states.view(), d.actions.view()).unwrap();
    let rms = pred.mapv(|p| (p - 0.3) * (p - 0.3)).mean().unwrap().sqrt();
    assert!(rms < 1e-3, "rms deviation {rms}");
    assert!(report.final_train_mse() <= report.train_mse[1]);
}

#[test]
fn linear_reward_generalizes() {
    let d = with_rewards(random_dataset("doubleintegrator2d", 10_000, 2), |i, d| {
        0.1 + 0.2 * d.states[[i, 0]] + 0.3 * d.states[[i, 3]] + 0.25 * d.actions[[i, 1]] + 0.1 * d.actions[[i, 0]]
    });
    let (_, report) = fit_reward_model(&d, &DynamicsConfig::default(), 3).unwrap();
    let held = report.holdout_mse.unwrap();
    assert!(held < 1e-3, "held-out MSE {held}");
    assert_eq!(report.holdout_rows, 1000);
    assert!(report.final_train_mse() <= report.train_mse[1]);
}

#[test]
fn identity_transition_is_learned() {
    let mut d = random_dataset("pendulumswingup", 3000, 4);
    d.next_states = d.states.clone();
    let (m, _) = fit_transition_model(&d, &DynamicsConfig::default(), 5).unwrap();
    let pred = predict_next_states(&m, d.states.view(), d.actions.view()).unwrap();
    for (j, e) in per_coordinate_mse(&pred, &d.states).iter().enumerate() {
        assert!(*e < 1e-3, "coordinate {j}: {e}");
    }
}

#[test]
fn point_mass_transition_generalizes() {
    let train = random_dataset("pointmass1d", 5000, 6);
    let fresh = random_dataset("pointmass1d", 2000, 7);
    let (m, report) = fit_transition_model(&train, &DynamicsConfig::default(), 8).unwrap();
    assert!(report.holdout_mse.unwrap() < 1e-3);
    let pred = predict_next_states(&m, fresh.states.view(), fresh.actions.view()).unwrap();
    for (j, e) in per_coordinate_mse(&pred, &fresh.next_states).iter().enumerate() {
        assert!(*e < 1e-3, "coordinate {j}: {e}");
    }
}

#[test]
fn fitting_is_deterministic_under_a_seed() {
    let d = random_dataset("mountaincardense", 800, 9);
    let cfg = DynamicsConfig { epochs: 20, ..DynamicsConfig::default() };
    let a = DynamicsModels::fit(&d, &cfg, 10).unwrap();
    let b = DynamicsModels::fit(&d, &cfg, 10).unwrap();
    assert_eq!(a.reward, b.reward);
    assert_eq!(a.transition, b.transition);
    assert_ne!(a.reward, DynamicsModels::fit(&d, &cfg, 11).unwrap().reward);
}

#[test]
fn predictions_are_plain_forward_passes() {
    let d = random_dataset("doubleintegrator2d", 50, 12);
    let cfg = DynamicsConfig { epochs: 3, hidden: vec![8], ..DynamicsConfig::default() };
    let m = DynamicsModels::fit(&d, &cfg, 13).unwrap();
    let rewards = predict_rewards(&m.reward, d.states.view(), d.actions.view()).unwrap();
    let next = predict_next_states(&m.transition, d.states.view(), d.actions.view()).unwrap();
    for i in 0..d.len() {
        let (s, a) = (d.states.row(i).to_vec(), d.actions.row(i).to_vec());
        let joined: Vec<f64> = s.iter().chain(&a).copied().collect();
        assert_eq!(predict_reward(&m.reward, &s, &a).unwrap(), rewards[i]);
        assert_eq!(predict_reward(&m.reward, &s, &a).unwrap(), m.reward.forward(&joined).unwrap()[0]);
        assert_eq!(predict_next_state(&m.transition, &s, &a).unwrap(), next.row(i).to_vec());
    }
    let zero = Mlp::zeros(&[6, 4, 1]).unwrap();
    assert_eq!(predict_reward(&zero, &[0.5; 4], &[0.5; 2]).unwrap(), 0.0);
    assert!(predict_reward(&m.reward, &[0.5; 3], &[0.5; 2]).is_err());
}

#[test]
fn models_round_trip_through_disk() {
    let d = random_dataset("pointmass1d", 100, 14);
    let cfg = DynamicsConfig { epochs: 2, hidden: vec![8], ..DynamicsConfig::default() };
    let m = DynamicsModels::fit(&d, &cfg, 15).unwrap();
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let back = DynamicsModels::load(dir.path()).unwrap();
    assert_eq!(back.reward, m.reward);
    assert_eq!(back.transition, m.transition);
    assert_eq!(back.task_id, m.task_id);
}
