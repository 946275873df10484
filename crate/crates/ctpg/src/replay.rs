//! Segment-aware replay storage.
//!
//! Transitions live in a FIFO ring. Segments are index ranges over that ring
//! rather than copies, so evicting a transition automatically invalidates the
//! segment containing it. The buffer contract is single-writer: no sampling
//! concurrent with pushing.

use crate::envs::Action;
use crate::error::{Error, Result};
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct Transition {
    pub task: usize,
    pub state: Vec<f64>,
    pub action: Action,
    /// Index of the behavior policy active at this step.
    pub guide_choice: usize,
    /// Reward after reward scaling.
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminated: bool,
    pub truncated: bool,
}

/// A guide-step slice of experience: up to K consecutive transitions under
/// one behavior-policy choice, plus the state the slice ends in.
#[derive(Debug, Clone)]
pub struct SegmentRecord {
    pub task: usize,
    pub guide_choice: usize,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub terminal_state: Vec<f64>,
    pub terminated: bool,
}

impl SegmentRecord {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Debug, Clone)]
struct SegmentMeta {
    task: usize,
    guide_choice: usize,
    start: u64,
    len: usize,
    terminated: bool,
}

pub struct ReplayBuffer {
    capacity: usize,
    ring: Vec<Option<Transition>>,
    /// Total transitions ever pushed; the ring slot of global index g is g % capacity.
    pushed: u64,
    per_task: Vec<VecDeque<u64>>,
    segments: VecDeque<SegmentMeta>,
    open: Option<SegmentMeta>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, n_tasks: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            ring: vec![None; capacity],
            pushed: 0,
            per_task: vec![VecDeque::new(); n_tasks],
            segments: VecDeque::new(),
            open: None,
        }
    }

    pub fn len(&self) -> usize {
        (self.pushed as usize).min(self.capacity)
    }

    pub fn is_empty(&self) -> bool {
        self.pushed == 0
    }

    /// Oldest global index still resident in the ring.
    fn oldest(&self) -> u64 {
        self.pushed.saturating_sub(self.capacity as u64)
    }

    pub fn begin_segment(&mut self, task: usize, guide_choice: usize) {
        debug_assert!(self.open.is_none(), "previous segment not finished");
        self.open = Some(SegmentMeta {
            task,
            guide_choice,
            start: self.pushed,
            len: 0,
            terminated: false,
        });
    }

    pub fn push(&mut self, transition: Transition) {
        let task = transition.task;
        if let Some(open) = &mut self.open {
            debug_assert_eq!(open.task, task, "segment task mismatch");
            open.len += 1;
        }
        let slot = (self.pushed % self.capacity as u64) as usize;
        self.ring[slot] = Some(transition);
        self.per_task[task].push_back(self.pushed);
        self.pushed += 1;
    }

    pub fn finish_segment(&mut self, terminated: bool) {
        if let Some(mut open) = self.open.take() {
            if open.len > 0 {
                open.terminated = terminated;
                self.segments.push_back(open);
            }
        }
    }

    fn prune(&mut self) {
        let oldest = self.oldest();
        for q in &mut self.per_task {
            while q.front().is_some_and(|&g| g < oldest) {
                q.pop_front();
            }
        }
        while self.segments.front().is_some_and(|m| m.start < oldest) {
            self.segments.pop_front();
        }
    }

    pub fn task_len(&self, task: usize) -> usize {
        let oldest = self.oldest();
        self.per_task[task].iter().filter(|&&g| g >= oldest).count()
    }

    pub fn n_segments(&self) -> usize {
        let oldest = self.oldest();
        self.segments.iter().filter(|m| m.start >= oldest).count()
    }

    fn get(&self, global: u64) -> &Transition {
        self.ring[(global % self.capacity as u64) as usize]
            .as_ref()
            .expect("resident transition")
    }

    /// `per_task_count` uniform draws with replacement per task, concatenated
    /// in task order.
    pub fn sample_control_batch(
        &mut self,
        per_task_count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Transition>> {
        self.prune();
        let mut batch = Vec::with_capacity(per_task_count * self.per_task.len());
        for (task, q) in self.per_task.iter().enumerate() {
            if q.is_empty() {
                return Err(Error::NoDataForTask { task });
            }
            for _ in 0..per_task_count {
                let g = q[rng.gen_range(0..q.len())];
                batch.push(self.get(g).clone());
            }
        }
        Ok(batch)
    }

    /// Uniform draws with replacement over stored valid segments whose task
    /// is admitted by `task_mask`. An empty result means no eligible segment
    /// exists and the caller should skip this guide update.
    pub fn sample_guide_batch(
        &mut self,
        task_mask: &[bool],
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<SegmentRecord> {
        self.prune();
        let eligible: Vec<usize> = self
            .segments
            .iter()
            .enumerate()
            .filter(|(_, m)| task_mask[m.task])
            .map(|(i, _)| i)
            .collect();
        if eligible.is_empty() {
            return Vec::new();
        }
        (0..count)
            .map(|_| {
                let meta = &self.segments[eligible[rng.gen_range(0..eligible.len())]];
                self.materialize(meta)
            })
            .collect()
    }

    fn materialize(&self, meta: &SegmentMeta) -> SegmentRecord {
        let mut states = Vec::with_capacity(meta.len);
        let mut actions = Vec::with_capacity(meta.len);
        let mut rewards = Vec::with_capacity(meta.len);
        for k in 0..meta.len as u64 {
            let t = self.get(meta.start + k);
            states.push(t.state.clone());
            actions.push(t.action.clone());
            rewards.push(t.reward);
        }
        let last = self.get(meta.start + meta.len as u64 - 1);
        SegmentRecord {
            task: meta.task,
            guide_choice: meta.guide_choice,
            states,
            actions,
            rewards,
            terminal_state: last.next_state.clone(),
            terminated: meta.terminated,
        }
    }
}
