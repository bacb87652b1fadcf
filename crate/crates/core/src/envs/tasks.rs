//! The analytic base tasks. Every task integrates with a fixed step, clamps
//! its state into the declared bounds, and pays a dense reward computed on
//! the post-transition state and the applied action.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Bounds, EnvSpec};

/// Fixed-step point mass on a line with linear drag.
///
/// `x' = x + v·dt`, `v' = v + (a − c·v)·dt`, reward
/// `1 − x'² − 0.1·v'² − 0.05·a²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMass1D {
    pub dt: f64,
    pub drag: f64,
    /// Initial position is uniform on this interval; a zero-width interval
    /// makes resets deterministic. Initial velocity is always zero.
    pub initial_position: (f64, f64),
    pub max_episode_steps: usize,
}

impl Default for PointMass1D {
    fn default() -> Self {
        Self { dt: 0.05, drag: 0.1, initial_position: (-0.8, 0.8), max_episode_steps: 200 }
    }
}

impl PointMass1D {
    pub fn with_initial_position(x0: f64) -> Self {
        Self { initial_position: (x0, x0), ..Self::default() }
    }

    pub fn reward_at(x: f64, v: f64, a: f64) -> f64 {
        1.0 - x * x - 0.1 * v * v - 0.05 * a * a
    }
}

/// Two independent damped point masses in the plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoubleIntegrator2D {
    pub dt: f64,
    pub drag: f64,
    pub initial_radius: f64,
    pub max_episode_steps: usize,
}

impl Default for DoubleIntegrator2D {
    fn default() -> Self {
        Self { dt: 0.05, drag: 0.1, initial_radius: 0.8, max_episode_steps: 200 }
    }
}

/// Torque-limited pendulum with `θ = 0` upright; reward
/// `C_alive − 0.01·sin²θ − (cos θ − 1)² − 0.005·θ̇²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumSwingUp {
    pub dt: f64,
    pub gravity: f64,
    pub length: f64,
    pub mass: f64,
    pub max_torque: f64,
    pub max_speed: f64,
    pub alive_bonus: f64,
    pub initial_speed: f64,
    /// When set, an episode also ends once `|θ|` exceeds this angle.
    pub fall_angle: Option<f64>,
    pub max_episode_steps: usize,
}

impl Default for PendulumSwingUp {
    fn default() -> Self {
        Self {
            dt: 0.05,
            gravity: 10.0,
            length: 1.0,
            mass: 1.0,
            max_torque: 2.0,
            max_speed: 8.0,
            alive_bonus: 10.0,
            initial_speed: 1.0,
            fall_angle: None,
            max_episode_steps: 200,
        }
    }
}

impl PendulumSwingUp {
    pub fn reward_at(&self, theta: f64, theta_dot: f64) -> f64 {
        let s = theta.sin();
        let c = theta.cos() - 1.0;
        self.alive_bonus - 0.01 * s * s - c * c - 0.005 * theta_dot * theta_dot
    }
}

/// Under-powered car in a valley; reward decreases linearly with distance to
/// the goal position, minus a small control cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MountainCarDense {
    pub power: f64,
    pub goal_position: f64,
    pub initial_position: (f64, f64),
    pub max_episode_steps: usize,
}

impl Default for MountainCarDense {
    fn default() -> Self {
        Self { power: 0.0015, goal_position: 0.45, initial_position: (-0.6, -0.4), max_episode_steps: 200 }
    }
}

const MC_POSITION: (f64, f64) = (-1.2, 0.6);
const MC_SPEED: f64 = 0.07;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Task {
    PointMass1D(PointMass1D),
    DoubleIntegrator2D(DoubleIntegrator2D),
    PendulumSwingUp(PendulumSwingUp),
    MountainCarDense(MountainCarDense),
}

pub const BASE_TASK_IDS: [&str; 4] = ["pointmass1d", "doubleintegrator2d", "pendulumswingup", "mountaincardense"];

fn wrap_angle(theta: f64) -> f64 {
    let mut t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t < -PI {
        t = -PI;
    }
    t
}

impl Task {
    pub fn from_name(name: &str) -> Option<Task> {
        Some(match name {
            "pointmass1d" => Task::PointMass1D(PointMass1D::default()),
            "doubleintegrator2d" => Task::DoubleIntegrator2D(DoubleIntegrator2D::default()),
            "pendulumswingup" => Task::PendulumSwingUp(PendulumSwingUp::default()),
            "mountaincardense" => Task::MountainCarDense(MountainCarDense::default()),
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::PointMass1D(_) => "pointmass1d",
            Task::DoubleIntegrator2D(_) => "doubleintegrator2d",
            Task::PendulumSwingUp(_) => "pendulumswingup",
            Task::MountainCarDense(_) => "mountaincardense",
        }
    }

    pub fn spec(&self) -> EnvSpec {
        let b = |l, u| Bounds { lower: l, upper: u };
        match self {
            Task::PointMass1D(t) => EnvSpec {
                state_bounds: vec![b(-1.0, 1.0), b(-1.0, 1.0)],
                action_bounds: vec![b(-1.0, 1.0)],
                reward_bounds: b(-0.2, 1.0),
                max_episode_steps: t.max_episode_steps,
            },
            Task::DoubleIntegrator2D(t) => EnvSpec {
                state_bounds: vec![b(-1.0, 1.0); 4],
                action_bounds: vec![b(-1.0, 1.0); 2],
                reward_bounds: b(-0.2, 1.0),
                max_episode_steps: t.max_episode_steps,
            },
            Task::PendulumSwingUp(t) => {
                // Largest penalty (θ = π at full speed) plus a small margin.
                let worst = 4.0 + 0.005 * t.max_speed * t.max_speed + 0.05;
                EnvSpec {
                    state_bounds: vec![b(-PI, PI), b(-t.max_speed, t.max_speed)],
                    action_bounds: vec![b(-t.max_torque, t.max_torque)],
                    reward_bounds: b(t.alive_bonus - worst, t.alive_bonus),
                    max_episode_steps: t.max_episode_steps,
                }
            }
            Task::MountainCarDense(t) => EnvSpec {
                state_bounds: vec![b(MC_POSITION.0, MC_POSITION.1), b(-MC_SPEED, MC_SPEED)],
                action_bounds: vec![b(-1.0, 1.0)],
                reward_bounds: b(-0.15, 1.0),
                max_episode_steps: t.max_episode_steps,
            },
        }
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let uniform = |rng: &mut R, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        match self {
            Task::PointMass1D(t) => vec![uniform(rng, t.initial_position), 0.0],
            Task::DoubleIntegrator2D(t) => {
                let r = t.initial_radius;
                vec![uniform(rng, (-r, r)), uniform(rng, (-r, r)), 0.0, 0.0]
            }
            Task::PendulumSwingUp(t) => {
                vec![uniform(rng, (-PI, PI)), uniform(rng, (-t.initial_speed, t.initial_speed))]
            }
            Task::MountainCarDense(t) => vec![uniform(rng, t.initial_position), 0.0],
        }
    }

    /// One integration step from `s` under the (already clamped) action.
    pub fn transition(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        match self {
            Task::PointMass1D(t) => {
                let (x, v) = damped_axis(s[0], s[1], a[0], t.dt, t.drag);
                vec![x, v]
            }
            Task::DoubleIntegrator2D(t) => {
                let (x, vx) = damped_axis(s[0], s[2], a[0], t.dt, t.drag);
                let (y, vy) = damped_axis(s[1], s[3], a[1], t.dt, t.drag);
                vec![x, y, vx, vy]
            }
            Task::PendulumSwingUp(t) => {
                let accel = t.gravity / t.length * s[0].sin() + a[0] / (t.mass * t.length * t.length);
                let speed = (s[1] + accel * t.dt).clamp(-t.max_speed, t.max_speed);
                vec![wrap_angle(s[0] + speed * t.dt), speed]
            }
            Task::MountainCarDense(t) => {
                let mut v = (s[1] + a[0] * t.power - 0.0025 * (3.0 * s[0]).cos()).clamp(-MC_SPEED, MC_SPEED);
                let x = (s[0] + v).clamp(MC_POSITION.0, MC_POSITION.1);
                if x <= MC_POSITION.0 && v < 0.0 {
                    v = 0.0;
                }
                vec![x, v]
            }
        }
    }

    /// Reward for landing in `s_next` after applying `a`.
    pub fn reward(&self, s_next: &[f64], a: &[f64]) -> f64 {
        match self {
            Task::PointMass1D(_) => PointMass1D::reward_at(s_next[0], s_next[1], a[0]),
            Task::DoubleIntegrator2D(_) => {
                let pos = s_next[0] * s_next[0] + s_next[1] * s_next[1];
                let vel = s_next[2] * s_next[2] + s_next[3] * s_next[3];
                let ctrl = a[0] * a[0] + a[1] * a[1];
                1.0 - 0.5 * pos - 0.05 * vel - 0.025 * ctrl
            }
            Task::PendulumSwingUp(t) => t.reward_at(s_next[0], s_next[1]),
            Task::MountainCarDense(t) => {
                let span = t.goal_position - MC_POSITION.0;
                1.0 - (s_next[0] - t.goal_position).abs() / span - 0.1 * a[0] * a[0]
            }
        }
    }

    pub fn is_terminal(&self, s: &[f64]) -> bool {
        match self {
            Task::PendulumSwingUp(PendulumSwingUp { fall_angle: Some(limit), .. }) => s[0].abs() > *limit,
            _ => false,
        }
    }
}

fn damped_axis(x: f64, v: f64, a: f64, dt: f64, drag: f64) -> (f64, f64) {
    let x_next = (x + v * dt).clamp(-1.0, 1.0);
    let v_next = (v + (a - drag * v) * dt).clamp(-1.0, 1.0);
    (x_next, v_next)
}
