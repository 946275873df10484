//! Guide policies: per-task selection over the candidate control policies.
//!
//! Each task carries a categorical guide actor over the N task indices, a
//! guide critic on the K-step semi-MDP, and a comparable guide critic whose
//! entropy bonus uses the source task's control policy so its values live on
//! the same scale as the control V. Stored segments are hindsight-relabeled
//! to the candidate that best explains the stored actions before critic
//! regression.

use crate::approx::{
    adam_step, polyak, AdamState, MultiHead, MultiHeadGrads, MultiHeadOpt, Obs, ParamBlock, Shape,
};
use crate::envs::Action;
use crate::error::{Error, Result};
use crate::sac::{softmax, Backbone, ControlPolicy, ObsOwned};
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;

const LOG_PROB_FLOOR: f64 = -1e6;

/// A replayed segment in approximator coordinates.
#[derive(Debug, Clone)]
pub struct GuideSegment {
    pub task: usize,
    pub guide_choice: usize,
    pub obs: Vec<ObsOwned>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub terminal_obs: ObsOwned,
    pub terminated: bool,
}

impl GuideSegment {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Policy-filter mask over candidate behavior policies.
#[derive(Debug, Clone)]
pub struct GuideMask {
    pub m: Vec<bool>,
}

impl GuideMask {
    pub fn all_zero(&self) -> bool {
        self.m.iter().all(|&b| !b)
    }

    pub fn pass_count(&self) -> usize {
        self.m.iter().filter(|&&b| b).count()
    }
}

/// Tasks admitted to guidance this epoch, with the temperature snapshot the
/// decision was made from.
#[derive(Debug, Clone)]
pub struct GuideBlockSet {
    members: Vec<bool>,
    pub log_alphas: Vec<f64>,
}

impl GuideBlockSet {
    pub fn contains(&self, task: usize) -> bool {
        self.members[task]
    }

    pub fn mask(&self) -> &[bool] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// For mode=base and ablations: every task guided.
    pub fn all(n_tasks: usize) -> Self {
        Self {
            members: vec![true; n_tasks],
            log_alphas: vec![0.0; n_tasks],
        }
    }
}

/// Tasks whose log-temperature is at most the mean require guidance.
/// Inclusive comparison, so the set is never empty.
pub fn guide_block_subset(log_alphas: &[f64]) -> GuideBlockSet {
    let mean = log_alphas.iter().sum::<f64>() / log_alphas.len() as f64;
    GuideBlockSet {
        members: log_alphas.iter().map(|&a| a <= mean).collect(),
        log_alphas: log_alphas.to_vec(),
    }
}

/// Discounted sum of a segment's stored rewards.
pub fn guide_reward(rewards: &[f64], gamma: f64) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::EmptyBatch("guide_reward segment"));
    }
    let mut acc = 0.0;
    let mut disc = 1.0;
    for &r in rewards {
        acc += disc * r;
        disc *= gamma;
    }
    Ok(acc)
}

/// Reassigns a stored segment to the candidate whose current control policy
/// maximizes the summed log-likelihood of the stored actions. Ties break to
/// the lowest index. Non-finite per-step log-probabilities are clamped to a
/// floor; the second return flags whether that happened.
pub fn hindsight_relabel(seg: &GuideSegment, control: &ControlPolicy) -> Result<(usize, bool)> {
    if seg.is_empty() {
        return Err(Error::EmptyBatch("hindsight_relabel segment"));
    }
    let mut best = 0;
    let mut best_ll = f64::NEG_INFINITY;
    let mut clamped = false;
    for j in 0..control.n_tasks() {
        let mut ll = 0.0;
        for (obs, action) in seg.obs.iter().zip(&seg.actions) {
            let lp = control.log_prob(j, obs.as_obs(), action)?;
            ll += if lp.is_finite() && lp >= LOG_PROB_FLOOR {
                lp
            } else {
                clamped = true;
                LOG_PROB_FLOOR
            };
        }
        if ll > best_ll {
            best_ll = ll;
            best = j;
        }
    }
    Ok((best, clamped))
}

/// Samples a behavior index from Normalize(p * m); falls back to the task's
/// own policy when the mask admits no probability mass.
pub fn masked_select(p: &[f64], mask: &GuideMask, own: usize, rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = p
        .iter()
        .zip(&mask.m)
        .map(|(&pj, &mj)| if mj { pj } else { 0.0 })
        .sum();
    if total <= 0.0 {
        return own;
    }
    let draw: f64 = rng.gen_range(0.0..total);
    let mut cum = 0.0;
    let mut last_allowed = own;
    for (j, (&pj, &mj)) in p.iter().zip(&mask.m).enumerate() {
        if !mj {
            continue;
        }
        cum += pj;
        last_allowed = j;
        if draw < cum {
            return j;
        }
    }
    last_allowed
}

#[derive(Debug, Clone)]
pub struct GuideHyper {
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub tau: f64,
    pub target_entropy: f64,
    pub k: usize,
}

/// Per-task guide actor, guide critic, and comparable guide critic, each a
/// multi-head function with one head per source task and N outputs (one per
/// candidate).
pub struct GuideBundle {
    pub actor: MultiHead,
    pub critic: MultiHead,
    pub target_critic: MultiHead,
    pub comparable: MultiHead,
    pub target_comparable: MultiHead,
    log_alpha: Vec<ParamBlock>,
    actor_opt: MultiHeadOpt,
    critic_opt: MultiHeadOpt,
    comparable_opt: MultiHeadOpt,
    alpha_opt: Vec<AdamState>,
    pub hyper: GuideHyper,
}

impl GuideBundle {
    pub fn new(
        n_tasks: usize,
        backbone: Backbone,
        hyper: GuideHyper,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        assert!(hyper.k >= 1, "guide step K must be at least 1");
        let build = |rng: &mut ChaCha8Rng| -> MultiHead {
            use crate::approx::{HeadShape, MultiHeadSpec};
            let shape = match &backbone {
                Backbone::Tabular { n_states } => HeadShape::Table { rows: *n_states, cols: n_tasks },
                Backbone::Mlp { input_dim, hidden, shared_trunk } => HeadShape::Net {
                    input_dim: *input_dim,
                    hidden: hidden.clone(),
                    output_dim: n_tasks,
                    shared_trunk: *shared_trunk,
                },
            };
            MultiHeadSpec { n_tasks, shape }.build(rng)
        };
        let actor = build(rng);
        let critic = build(rng);
        let comparable = build(rng);
        let target_critic = critic.clone();
        let target_comparable = comparable.clone();
        let actor_opt = MultiHeadOpt::new(&actor);
        let critic_opt = MultiHeadOpt::new(&critic);
        let comparable_opt = MultiHeadOpt::new(&comparable);
        Ok(Self {
            actor,
            critic,
            target_critic,
            comparable,
            target_comparable,
            log_alpha: (0..n_tasks)
                .map(|_| ParamBlock::zeros(Shape::Table { rows: 1, cols: 1 }))
                .collect(),
            actor_opt,
            critic_opt,
            comparable_opt,
            alpha_opt: (0..n_tasks).map(|_| AdamState::new(1)).collect(),
            hyper,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn log_alpha(&self, task: usize) -> f64 {
        self.log_alpha[task].values()[0]
    }

    pub fn alpha(&self, task: usize) -> f64 {
        self.log_alpha(task).exp()
    }

    pub fn set_log_alpha(&mut self, task: usize, value: f64) {
        self.log_alpha[task].values_mut()[0] = value;
    }

    pub fn named_blocks(&self, prefix: &str) -> Vec<(String, &ParamBlock)> {
        let mut out = self.actor.named_blocks(&format!("{prefix}.actor"));
        out.extend(self.critic.named_blocks(&format!("{prefix}.critic")));
        out.extend(self.target_critic.named_blocks(&format!("{prefix}.tcritic")));
        out.extend(self.comparable.named_blocks(&format!("{prefix}.comparable")));
        out.extend(self.target_comparable.named_blocks(&format!("{prefix}.tcomparable")));
        for (i, b) in self.log_alpha.iter().enumerate() {
            out.push((format!("{prefix}.log_alpha{i}"), b));
        }
        out
    }

    pub fn named_blocks_mut(&mut self, prefix: &str) -> Vec<(String, &mut ParamBlock)> {
        let mut out = self.actor.named_blocks_mut(&format!("{prefix}.actor"));
        out.extend(self.critic.named_blocks_mut(&format!("{prefix}.critic")));
        out.extend(self.target_critic.named_blocks_mut(&format!("{prefix}.tcritic")));
        out.extend(self.comparable.named_blocks_mut(&format!("{prefix}.comparable")));
        out.extend(
            self.target_comparable
                .named_blocks_mut(&format!("{prefix}.tcomparable")),
        );
        for (i, b) in self.log_alpha.iter_mut().enumerate() {
            out.push((format!("{prefix}.log_alpha{i}"), b));
        }
        out
    }

    /// Guide action distribution for task `task` at a state.
    pub fn probs(&self, task: usize, obs: Obs) -> Result<Vec<f64>> {
        Ok(softmax(&self.actor.forward(task, obs)?).0)
    }

    pub fn entropy(&self, task: usize, obs: Obs) -> Result<f64> {
        let (p, lp) = softmax(&self.actor.forward(task, obs)?);
        Ok(-p.iter().zip(&lp).map(|(pi, li)| pi * li).sum::<f64>())
    }

    /// Soft guide state value under the target guide critic:
    /// V(s) = sum_j pi(j|s) (Q(s,j) - alpha log pi(j|s)).
    fn guide_state_value(&self, task: usize, obs: Obs) -> Result<f64> {
        let (p, lp) = softmax(&self.actor.forward(task, obs)?);
        let q = self.target_critic.forward(task, obs)?;
        let alpha = self.alpha(task);
        Ok(p.iter()
            .zip(&lp)
            .zip(&q)
            .map(|((pj, lj), qj)| pj * (qj - alpha * lj))
            .sum())
    }

    /// Bootstrap for the comparable critic: plain expectation of the target
    /// comparable Q under the guide policy, with no selection-entropy bonus.
    fn comparable_bootstrap(&self, task: usize, obs: Obs) -> Result<f64> {
        let (p, _) = softmax(&self.actor.forward(task, obs)?);
        let q = self.target_comparable.forward(task, obs)?;
        Ok(p.iter().zip(&q).map(|(pj, qj)| pj * qj).sum())
    }

    fn relabeled_choice(
        &self,
        seg: &GuideSegment,
        control: &ControlPolicy,
        enable_hindsight: bool,
    ) -> Result<usize> {
        if enable_hindsight {
            Ok(hindsight_relabel(seg, control)?.0)
        } else {
            Ok(seg.guide_choice)
        }
    }

    /// Semi-MDP critic regression: target r^g + gamma^L V(s_L) on the
    /// (possibly relabeled) stored choice.
    pub fn guide_critic_step(
        &mut self,
        control: &ControlPolicy,
        batch: &[GuideSegment],
        enable_hindsight: bool,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("guide_critic_step"));
        }
        let mut grads = MultiHeadGrads::zeros_like(&self.critic);
        let mut loss = 0.0;
        for seg in batch {
            let j = self.relabeled_choice(seg, control, enable_hindsight)?;
            let rg = guide_reward(&seg.rewards, self.hyper.gamma)?;
            let boot = if seg.terminated {
                0.0
            } else {
                self.guide_state_value(seg.task, seg.terminal_obs.as_obs())?
            };
            let target = rg + self.hyper.gamma.powi(seg.len() as i32) * boot;
            let (q, cache) = self.critic.forward_cached(seg.task, seg.obs[0].as_obs())?;
            let diff = q[j] - target;
            let mut upstream = vec![0.0; self.n_tasks()];
            upstream[j] = diff / batch.len() as f64;
            self.critic.backward(seg.task, &cache, &upstream, &mut grads)?;
            loss += 0.5 * diff * diff;
        }
        loss /= batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("guide critic loss"));
        }
        let weights = vec![1.0; self.n_tasks()];
        self.critic.apply(&grads, &weights, self.hyper.lr_critic, &mut self.critic_opt)?;
        Ok(loss)
    }

    /// Comparable critic regression: in-segment rewards are augmented with
    /// the source task's control-policy entropy, recomputed under the current
    /// policy, so the converged value is comparable with the control V.
    pub fn comparable_critic_step(
        &mut self,
        control: &ControlPolicy,
        batch: &[GuideSegment],
        enable_hindsight: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("comparable_critic_step"));
        }
        let mut grads = MultiHeadGrads::zeros_like(&self.comparable);
        let mut loss = 0.0;
        for seg in batch {
            let j = self.relabeled_choice(seg, control, enable_hindsight)?;
            let alpha_i = control.alpha(seg.task);
            let mut target = 0.0;
            let mut disc = 1.0;
            for (obs, &r) in seg.obs.iter().zip(&seg.rewards) {
                let ent = control.policy_entropy(seg.task, obs.as_obs(), rng)?;
                target += disc * (r + alpha_i * ent);
                disc *= self.hyper.gamma;
            }
            if !seg.terminated {
                target += disc * self.comparable_bootstrap(seg.task, seg.terminal_obs.as_obs())?;
            }
            let (q, cache) = self.comparable.forward_cached(seg.task, seg.obs[0].as_obs())?;
            let diff = q[j] - target;
            let mut upstream = vec![0.0; self.n_tasks()];
            upstream[j] = diff / batch.len() as f64;
            self.comparable.backward(seg.task, &cache, &upstream, &mut grads)?;
            loss += 0.5 * diff * diff;
        }
        loss /= batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("comparable critic loss"));
        }
        let weights = vec![1.0; self.n_tasks()];
        self.comparable
            .apply(&grads, &weights, self.hyper.lr_critic, &mut self.comparable_opt)?;
        Ok(loss)
    }

    /// Discrete-SAC actor loss over segment start states, exact categorical
    /// expectation against the live guide critic.
    pub fn guide_actor_step(&mut self, batch: &[GuideSegment]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("guide_actor_step"));
        }
        let mut grads = MultiHeadGrads::zeros_like(&self.actor);
        let mut loss = 0.0;
        for seg in batch {
            let alpha = self.alpha(seg.task);
            let (logits, cache) = self.actor.forward_cached(seg.task, seg.obs[0].as_obs())?;
            let (p, lp) = softmax(&logits);
            let q = self.critic.forward(seg.task, seg.obs[0].as_obs())?;
            let costs: Vec<f64> = lp.iter().zip(&q).map(|(l, qj)| alpha * l - qj).collect();
            let l: f64 = p.iter().zip(&costs).map(|(pj, c)| pj * c).sum();
            let upstream: Vec<f64> = p
                .iter()
                .zip(&costs)
                .map(|(pj, c)| pj * (c - l) / batch.len() as f64)
                .collect();
            self.actor.backward(seg.task, &cache, &upstream, &mut grads)?;
            loss += l;
        }
        loss /= batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("guide actor loss"));
        }
        let weights = vec![1.0; self.n_tasks()];
        self.actor.apply(&grads, &weights, self.hyper.lr_actor, &mut self.actor_opt)?;
        Ok(loss)
    }

    /// Per-task temperature update toward the guide target entropy.
    pub fn guide_temperature_step(&mut self, batch: &[GuideSegment]) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("guide_temperature_step"));
        }
        let mut ent_sum = vec![0.0; self.n_tasks()];
        let mut counts = vec![0usize; self.n_tasks()];
        for seg in batch {
            ent_sum[seg.task] += self.entropy(seg.task, seg.obs[0].as_obs())?;
            counts[seg.task] += 1;
        }
        let mut losses = vec![0.0; self.n_tasks()];
        for i in 0..self.n_tasks() {
            if counts[i] == 0 {
                continue;
            }
            let h = ent_sum[i] / counts[i] as f64;
            let g = self.alpha(i) * (h - self.hyper.target_entropy);
            losses[i] = g;
            adam_step(&mut self.log_alpha[i], &[g], &mut self.alpha_opt[i], self.hyper.lr_alpha)?;
        }
        Ok(losses)
    }

    pub fn sync_targets(&mut self) {
        polyak(&mut self.target_critic, &self.critic, self.hyper.tau);
        polyak(&mut self.target_comparable, &self.comparable, self.hyper.tau);
    }

    /// Policy-filter gate: candidate j passes iff its comparable guide value
    /// is at least the task's own soft state value. Ties pass.
    pub fn policy_filter_mask(
        &self,
        control: &ControlPolicy,
        task: usize,
        obs: Obs,
        rng: &mut ChaCha8Rng,
    ) -> Result<GuideMask> {
        let v = control.value(false, task, obs, rng)?;
        let q = self.comparable.forward(task, obs)?;
        Ok(GuideMask {
            m: q.iter().map(|&qj| qj >= v).collect(),
        })
    }
}
