//! GridSkills: a cross-shaped gridworld where pairs of tasks share the
//! whole prefix of their optimal trajectories.
//!
//! The agent starts at the hub. Each used arm is a one-cell-wide corridor
//! ending in a 2x5 room. Goals are fixed per task: the even task of a pair
//! succeeds on arrival at the room's near-row center, and the odd task
//! needs a tool — an interact on that same near-row center (the partner's
//! goal) picks it up, and a second interact on the far-row center while
//! carrying completes the task.
//!
//! The state is just the agent cell plus the carried flag, so every state
//! on the way to the tool is shared between the pair: a proficient even
//! policy walks the odd task straight to its pickup. Solving the odd task
//! by undirected exploration instead means finding an unmarked two-stage
//! interact sequence deep in the room, which is what makes borrowed
//! behavior profitable there.

use super::StepResult;
use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;

pub const STATE_DIM: usize = 3; // agent x/y, tool flag
pub const N_ACTIONS: usize = 5; // up, down, left, right, interact

pub const STEP_PENALTY: f64 = -0.01;
pub const SUCCESS_REWARD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sharing {
    /// Pairs of tasks share one corridor each; goals differ in depth.
    PrefixChain,
    /// All tasks share one arm and goal cell; only the terminal interact
    /// requirement differs.
    Identical,
}

const DIRS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

pub struct GridSkills {
    n_tasks: usize,
    grid_size: usize,
    center: (i64, i64),
    open: Vec<bool>,
    goal_cells: Vec<(i64, i64)>,
    requires_interact: Vec<bool>,
    task_arm: Vec<usize>,
    /// One tool cell per arm: the near-row center, which is also the even
    /// task's goal.
    arm_tools: Vec<(i64, i64)>,
}

impl GridSkills {
    pub fn new(n_tasks: usize, grid_size: usize, sharing: Sharing) -> Result<Self> {
        if n_tasks < 2 {
            return Err(Error::SuiteConstruction(format!(
                "GridSkills requires n_tasks >= 2, got {n_tasks}"
            )));
        }
        if grid_size < 5 {
            return Err(Error::SuiteConstruction(format!(
                "GridSkills requires grid_size >= 5, got {grid_size}"
            )));
        }
        let n_arms = match sharing {
            Sharing::PrefixChain => {
                if n_tasks % 2 != 0 || n_tasks / 2 > DIRS.len() {
                    return Err(Error::SuiteConstruction(format!(
                        "prefix-chain sharing needs one shared corridor per task pair: \
                         n_tasks must be even and at most {}, got {n_tasks}",
                        2 * DIRS.len()
                    )));
                }
                n_tasks / 2
            }
            Sharing::Identical => 1,
        };

        let g = grid_size as i64;
        let c = (g - 1) / 2;
        let center = (c, c);
        let reach = c; // distance from hub to room's far column, all directions

        let cell_at = |arm: usize, u: i64, v: i64| -> (i64, i64) {
            let (dx, dy) = DIRS[arm];
            let (lx, ly) = (-dy, dx);
            (center.0 + u * dx + v * lx, center.1 + u * dy + v * ly)
        };

        let mut open = vec![false; grid_size * grid_size];
        let idx = |(x, y): (i64, i64)| (y as usize) * grid_size + x as usize;
        open[idx(center)] = true;
        let mut arm_tools = Vec::with_capacity(n_arms);
        for arm in 0..n_arms {
            for u in 1..=reach - 2 {
                open[idx(cell_at(arm, u, 0))] = true;
            }
            for u in [reach - 1, reach] {
                for v in -2..=2 {
                    open[idx(cell_at(arm, u, v))] = true;
                }
            }
            arm_tools.push(cell_at(arm, reach - 1, 0));
        }

        let mut goal_cells = Vec::with_capacity(n_tasks);
        let mut requires_interact = Vec::with_capacity(n_tasks);
        let mut task_arm = Vec::with_capacity(n_tasks);
        for task in 0..n_tasks {
            let (arm, depth) = match sharing {
                Sharing::PrefixChain => (task / 2, if task % 2 == 0 { reach - 1 } else { reach }),
                Sharing::Identical => (0, reach - 1),
            };
            goal_cells.push(cell_at(arm, depth, 0));
            requires_interact.push(task % 2 == 1);
            task_arm.push(arm);
        }

        Ok(Self {
            n_tasks,
            grid_size,
            center,
            open,
            goal_cells,
            requires_interact,
            task_arm,
            arm_tools,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn start_cell(&self) -> (i64, i64) {
        self.center
    }

    pub fn goal_cell(&self, task: usize) -> (i64, i64) {
        self.goal_cells[task]
    }

    pub fn requires_interact(&self, task: usize) -> bool {
        self.requires_interact[task]
    }

    pub fn tool_cell(&self, task: usize) -> (i64, i64) {
        self.arm_tools[self.task_arm[task]]
    }

    pub fn is_open(&self, cell: (i64, i64)) -> bool {
        let g = self.grid_size as i64;
        cell.0 >= 0
            && cell.0 < g
            && cell.1 >= 0
            && cell.1 < g
            && self.open[(cell.1 as usize) * self.grid_size + cell.0 as usize]
    }

    fn encode(&self, agent: (i64, i64), carried: bool) -> Vec<f64> {
        vec![agent.0 as f64, agent.1 as f64, if carried { 1.0 } else { 0.0 }]
    }

    pub fn reset(&self, _task: usize, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.encode(self.center, false)
    }

    pub fn step(&self, task: usize, state: &[f64], action: usize) -> Result<StepResult> {
        if action >= N_ACTIONS {
            return Err(Error::DimensionMismatch {
                expected: N_ACTIONS,
                got: action,
                context: "GridSkills action index",
            });
        }
        let agent = (state[0] as i64, state[1] as i64);
        let carried = state[2] != 0.0;
        let goal = self.goal_cells[task];

        let target = match action {
            0 => (agent.0, agent.1 + 1),
            1 => (agent.0, agent.1 - 1),
            2 => (agent.0 - 1, agent.1),
            3 => (agent.0 + 1, agent.1),
            _ => agent, // interact
        };
        let next = if self.is_open(target) { target } else { agent };

        let (success, pickup) = if self.requires_interact[task] {
            let interact = action == 4;
            (
                interact && carried && agent == goal,
                interact && !carried && agent == self.arm_tools[self.task_arm[task]],
            )
        } else {
            (action != 4 && next == goal, false)
        };
        let reward = if success { SUCCESS_REWARD } else { STEP_PENALTY };
        Ok(StepResult {
            next_state: self.encode(next, carried || pickup),
            reward,
            terminated: success,
            truncated: false,
            success,
        })
    }

    pub fn policy_input(&self, state: &[f64]) -> Vec<f64> {
        let scale = (self.grid_size - 1) as f64;
        vec![state[0] / scale, state[1] / scale, state[2]]
    }

    pub fn n_tabular_states(&self) -> usize {
        self.grid_size * self.grid_size * 2
    }

    pub fn tabular_index(&self, state: &[f64]) -> usize {
        let cell = (state[1] as usize) * self.grid_size + state[0] as usize;
        cell * 2 + (state[2] != 0.0) as usize
    }
}
