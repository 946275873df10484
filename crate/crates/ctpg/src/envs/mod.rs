//! Multi-task environment abstraction and the two built-in desk-scale suites.
//!
//! All tasks in a suite share the same state and action spaces and episode
//! length, differing only in transitions and rewards. Suites are immutable
//! definitions with pure step functions over explicit state, so rollouts can
//! run from any number of workers, each with its own seeded generator.

mod gridskills;
mod pointmass;

pub use gridskills::{GridSkills, Sharing};
pub use pointmass::{PointMass, Variation};

use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    /// Continuous actions with per-coordinate bounds [-1, 1].
    Continuous(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    SuccessRate,
    EpisodeReturn,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::SuccessRate => "success_rate",
            MetricKind::EpisodeReturn => "episode_return",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// Task-defined terminal: bootstrap value is zero past this step.
    pub terminated: bool,
    /// Horizon truncation is decided by the rollout loop, which knows the
    /// step count; the suites themselves never truncate.
    pub truncated: bool,
    pub success: bool,
}

enum SuiteKind {
    Grid(GridSkills),
    Point(PointMass),
}

/// A family of MDPs sharing state/action spaces, differing in transitions
/// and rewards.
pub struct TaskSuite {
    kind: SuiteKind,
    episode_length: usize,
}

impl TaskSuite {
    pub fn build_gridskills(n_tasks: usize, grid_size: usize, sharing: Sharing) -> Result<Self> {
        Ok(Self {
            kind: SuiteKind::Grid(GridSkills::new(n_tasks, grid_size, sharing)?),
            episode_length: 100,
        })
    }

    pub fn build_pointmass(n_tasks: usize, variation: Variation) -> Result<Self> {
        Ok(Self {
            kind: SuiteKind::Point(PointMass::new(n_tasks, variation)?),
            episode_length: 200,
        })
    }

    pub fn with_episode_length(mut self, episode_length: usize) -> Self {
        assert!(episode_length > 0);
        self.episode_length = episode_length;
        self
    }

    pub fn n_tasks(&self) -> usize {
        match &self.kind {
            SuiteKind::Grid(g) => g.n_tasks(),
            SuiteKind::Point(p) => p.n_tasks(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match &self.kind {
            SuiteKind::Grid(_) => gridskills::STATE_DIM,
            SuiteKind::Point(_) => pointmass::STATE_DIM,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match &self.kind {
            SuiteKind::Grid(_) => ActionSpace::Discrete(gridskills::N_ACTIONS),
            SuiteKind::Point(_) => ActionSpace::Continuous(2),
        }
    }

    pub fn episode_length(&self) -> usize {
        self.episode_length
    }

    pub fn metric_kind(&self) -> MetricKind {
        match &self.kind {
            SuiteKind::Grid(_) => MetricKind::SuccessRate,
            SuiteKind::Point(_) => MetricKind::EpisodeReturn,
        }
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.n_tasks() {
            Err(Error::TaskOutOfRange {
                task,
                n_tasks: self.n_tasks(),
            })
        } else {
            Ok(())
        }
    }

    pub fn reset(&self, task: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        self.check_task(task)?;
        Ok(match &self.kind {
            SuiteKind::Grid(g) => g.reset(task, rng),
            SuiteKind::Point(p) => p.reset(task, rng),
        })
    }

    pub fn step(&self, task: usize, state: &[f64], action: &Action) -> Result<StepResult> {
        self.check_task(task)?;
        if state.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim(),
                got: state.len(),
                context: "suite step state",
            });
        }
        match (&self.kind, action) {
            (SuiteKind::Grid(g), Action::Discrete(a)) => g.step(task, state, *a),
            (SuiteKind::Point(p), Action::Continuous(a)) => p.step(task, state, a),
            _ => Err(Error::DimensionMismatch {
                expected: 0,
                got: 0,
                context: "action kind does not match suite action space",
            }),
        }
    }

    /// Input vector seen by the function approximators. For GridSkills the
    /// agent cell and carried flag, rescaled; for PointMass the state
    /// itself, rescaled.
    pub fn policy_input(&self, state: &[f64]) -> Vec<f64> {
        match &self.kind {
            SuiteKind::Grid(g) => g.policy_input(state),
            SuiteKind::Point(p) => p.policy_input(state),
        }
    }

    pub fn policy_input_dim(&self) -> usize {
        self.state_dim()
    }

    /// Number of enumerable policy-input states, for tabular approximators.
    /// `None` for continuous suites.
    pub fn tabular_states(&self) -> Option<usize> {
        match &self.kind {
            SuiteKind::Grid(g) => Some(g.n_tabular_states()),
            SuiteKind::Point(_) => None,
        }
    }

    pub fn tabular_index(&self, state: &[f64]) -> usize {
        match &self.kind {
            SuiteKind::Grid(g) => g.tabular_index(state),
            SuiteKind::Point(_) => panic!("tabular_index on a continuous suite"),
        }
    }

    pub fn gridskills(&self) -> Option<&GridSkills> {
        match &self.kind {
            SuiteKind::Grid(g) => Some(g),
            SuiteKind::Point(_) => None,
        }
    }
}
