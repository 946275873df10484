//! PointMass: a continuous 2-D point-mass suite where tasks share the goal
//! structure but scale a dynamics coefficient linearly from 0.5x to 1.5x.

use super::StepResult;
use crate::error::{Error, Result};
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;

pub const STATE_DIM: usize = 6; // position x/y, velocity x/y, goal x/y

const DT: f64 = 0.1;
const GRAVITY_BASE: f64 = 0.5;
const ACTION_COST: f64 = 0.01;
const GOAL_RADIUS: f64 = 0.05;
const GOAL_R_MIN: f64 = 0.5;
const GOAL_R_MAX: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variation {
    /// Tasks scale a constant downward pull.
    GravityScale,
    /// Tasks scale the body mass (inverse control authority).
    MassScale,
}

pub struct PointMass {
    n_tasks: usize,
    variation: Variation,
    coefficients: Vec<f64>,
}

impl PointMass {
    pub fn new(n_tasks: usize, variation: Variation) -> Result<Self> {
        if n_tasks < 2 {
            return Err(Error::SuiteConstruction(format!(
                "PointMass requires n_tasks >= 2, got {n_tasks}"
            )));
        }
        let coefficients = (0..n_tasks)
            .map(|i| 0.5 + i as f64 / (n_tasks - 1) as f64)
            .collect();
        Ok(Self {
            n_tasks,
            variation,
            coefficients,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn reset(&self, _task: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        // Zero-velocity start at the origin; goal sampled in an annulus.
        let radius = rng.gen_range(GOAL_R_MIN..GOAL_R_MAX);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        vec![0.0, 0.0, 0.0, 0.0, radius * angle.cos(), radius * angle.sin()]
    }

    pub fn step(&self, task: usize, state: &[f64], action: &[f64]) -> Result<StepResult> {
        if action.len() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: action.len(),
                context: "PointMass action",
            });
        }
        // Out-of-bounds actions are clipped, not rejected.
        let ax = action[0].clamp(-1.0, 1.0);
        let ay = action[1].clamp(-1.0, 1.0);
        let coeff = self.coefficients[task];
        let (accel_x, accel_y) = match self.variation {
            Variation::GravityScale => (ax, ay - GRAVITY_BASE * coeff),
            Variation::MassScale => (ax / coeff, ay / coeff),
        };
        let mut vx = (state[2] + DT * accel_x).clamp(-1.0, 1.0);
        let mut vy = (state[3] + DT * accel_y).clamp(-1.0, 1.0);
        let mut px = state[0] + DT * vx;
        let mut py = state[1] + DT * vy;
        if px.abs() > 1.0 {
            px = px.clamp(-1.0, 1.0);
            vx = 0.0;
        }
        if py.abs() > 1.0 {
            py = py.clamp(-1.0, 1.0);
            vy = 0.0;
        }
        let (gx, gy) = (state[4], state[5]);
        let dist = ((px - gx).powi(2) + (py - gy).powi(2)).sqrt();
        let reward = -dist - ACTION_COST * (ax * ax + ay * ay);
        let terminated = dist < GOAL_RADIUS;
        Ok(StepResult {
            next_state: vec![px, py, vx, vy, gx, gy],
            reward,
            terminated,
            truncated: false,
            success: false,
        })
    }

    pub fn policy_input(&self, state: &[f64]) -> Vec<f64> {
        state.to_vec()
    }
}
