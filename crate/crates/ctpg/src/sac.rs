//! Soft actor-critic over per-task heads.
//!
//! Discrete suites use exact categorical expectations everywhere; continuous
//! suites use a tanh-squashed Gaussian with the reparameterization trick and
//! Monte Carlo value estimates. Gradient computation and parameter updates
//! are split so multi-task loss weights can be decided from the per-task
//! losses before anything is applied.

use crate::approx::{
    adam_step, polyak, AdamState, HeadShape, MultiHead, MultiHeadGrads, MultiHeadOpt,
    MultiHeadSpec, Obs, ParamBlock, Shape,
};
use crate::envs::{Action, ActionSpace};
use crate::error::{Error, Result};
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;

const LOG_STD_MIN: f64 = -20.0;
const LOG_STD_MAX: f64 = 2.0;
const LN_2PI: f64 = 1.8378770664093453;

/// Owned observation, matching `approx::Obs`.
#[derive(Debug, Clone, PartialEq)]
pub enum ObsOwned {
    Index(usize),
    Vector(Vec<f64>),
}

impl ObsOwned {
    pub fn as_obs(&self) -> Obs<'_> {
        match self {
            ObsOwned::Index(i) => Obs::Index(*i),
            ObsOwned::Vector(v) => Obs::Vector(v),
        }
    }
}

/// One stored step in approximator coordinates, ready for loss computation.
#[derive(Debug, Clone)]
pub struct SacTransition {
    pub task: usize,
    pub obs: ObsOwned,
    pub action: Action,
    pub reward: f64,
    pub next_obs: ObsOwned,
    pub terminated: bool,
}

#[derive(Debug, Clone)]
pub struct SacHyper {
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    /// Polyak coefficient for the target critic.
    pub tau: f64,
    pub target_entropy: f64,
    /// Monte Carlo samples for continuous value estimates.
    pub mc_samples: usize,
}

/// Function-approximator family for actor and critic.
#[derive(Debug, Clone)]
pub enum Backbone {
    Tabular { n_states: usize },
    Mlp { input_dim: usize, hidden: Vec<usize>, shared_trunk: bool },
}

/// Per-task soft actor-critic: one actor head, one critic head, one learned
/// temperature per task, with optional parameter sharing through a trunk.
pub struct ControlPolicy {
    pub action_space: ActionSpace,
    pub actor: MultiHead,
    pub critic: MultiHead,
    pub target_critic: MultiHead,
    /// log alpha per task, as 1x1 blocks so Adam applies uniformly.
    log_alpha: Vec<ParamBlock>,
    actor_opt: MultiHeadOpt,
    critic_opt: MultiHeadOpt,
    alpha_opt: Vec<AdamState>,
    pub hyper: SacHyper,
}

impl ControlPolicy {
    pub fn new(
        n_tasks: usize,
        action_space: ActionSpace,
        backbone: Backbone,
        hyper: SacHyper,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (actor_out, critic_in_extra, critic_out) = match action_space {
            ActionSpace::Discrete(n) => (n, 0, n),
            ActionSpace::Continuous(d) => (2 * d, d, 1),
        };
        let (actor_shape, critic_shape) = match &backbone {
            Backbone::Tabular { n_states } => {
                if matches!(action_space, ActionSpace::Continuous(_)) {
                    return Err(Error::Config(
                        "tabular backbone requires a discrete action space".into(),
                    ));
                }
                (
                    HeadShape::Table { rows: *n_states, cols: actor_out },
                    HeadShape::Table { rows: *n_states, cols: critic_out },
                )
            }
            Backbone::Mlp { input_dim, hidden, shared_trunk } => (
                HeadShape::Net {
                    input_dim: *input_dim,
                    hidden: hidden.clone(),
                    output_dim: actor_out,
                    shared_trunk: *shared_trunk,
                },
                HeadShape::Net {
                    input_dim: *input_dim + critic_in_extra,
                    hidden: hidden.clone(),
                    output_dim: critic_out,
                    shared_trunk: *shared_trunk,
                },
            ),
        };
        let actor = MultiHeadSpec { n_tasks, shape: actor_shape }.build(rng);
        let critic = MultiHeadSpec { n_tasks, shape: critic_shape }.build(rng);
        let target_critic = critic.clone();
        let actor_opt = MultiHeadOpt::new(&actor);
        let critic_opt = MultiHeadOpt::new(&critic);
        Ok(Self {
            action_space,
            actor,
            critic,
            target_critic,
            log_alpha: (0..n_tasks)
                .map(|_| ParamBlock::zeros(Shape::Table { rows: 1, cols: 1 }))
                .collect(),
            actor_opt,
            critic_opt,
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

    pub fn log_alphas(&self) -> Vec<f64> {
        (0..self.n_tasks()).map(|i| self.log_alpha(i)).collect()
    }

    pub fn set_log_alpha(&mut self, task: usize, value: f64) {
        self.log_alpha[task].values_mut()[0] = value;
    }

    /// Parameter blocks for checkpointing, named under `prefix`.
    pub fn named_blocks(&self, prefix: &str) -> Vec<(String, &ParamBlock)> {
        let mut out = self.actor.named_blocks(&format!("{prefix}.actor"));
        out.extend(self.critic.named_blocks(&format!("{prefix}.critic")));
        out.extend(self.target_critic.named_blocks(&format!("{prefix}.target")));
        for (i, b) in self.log_alpha.iter().enumerate() {
            out.push((format!("{prefix}.log_alpha{i}"), b));
        }
        out
    }

    pub fn named_blocks_mut(&mut self, prefix: &str) -> Vec<(String, &mut ParamBlock)> {
        let mut out = self.actor.named_blocks_mut(&format!("{prefix}.actor"));
        out.extend(self.critic.named_blocks_mut(&format!("{prefix}.critic")));
        out.extend(self.target_critic.named_blocks_mut(&format!("{prefix}.target")));
        for (i, b) in self.log_alpha.iter_mut().enumerate() {
            out.push((format!("{prefix}.log_alpha{i}"), b));
        }
        out
    }

    // ---- acting ----

    /// Samples (or, with `deterministic`, takes the mode of) the task's
    /// policy. Returns the action and its log-probability.
    pub fn act(
        &self,
        task: usize,
        obs: Obs,
        deterministic: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Action, f64)> {
        match self.action_space {
            ActionSpace::Discrete(n) => {
                let logits = self.actor.forward(task, obs)?;
                let (probs, log_probs) = softmax(&logits);
                let a = if deterministic {
                    argmax(&logits)
                } else {
                    let draw: f64 = rng.gen();
                    let mut cum = 0.0;
                    let mut picked = n - 1;
                    for (i, &p) in probs.iter().enumerate() {
                        cum += p;
                        if draw < cum {
                            picked = i;
                            break;
                        }
                    }
                    picked
                };
                Ok((Action::Discrete(a), log_probs[a]))
            }
            ActionSpace::Continuous(d) => {
                let (mu, log_std) = self.gaussian_params(task, obs)?;
                if deterministic {
                    let a: Vec<f64> = mu.iter().map(|m| m.tanh()).collect();
                    let lp = self.log_prob(task, obs, &Action::Continuous(a.clone()))?;
                    return Ok((Action::Continuous(a), lp));
                }
                let eps: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
                let s = ContSample::new(&mu, &log_std, &eps);
                Ok((Action::Continuous(s.t.clone()), s.logp))
            }
        }
    }

    /// Log-probability of an arbitrary action under the task's current policy.
    pub fn log_prob(&self, task: usize, obs: Obs, action: &Action) -> Result<f64> {
        match (&self.action_space, action) {
            (ActionSpace::Discrete(_), Action::Discrete(a)) => {
                let logits = self.actor.forward(task, obs)?;
                let (_, log_probs) = softmax(&logits);
                Ok(log_probs[*a])
            }
            (ActionSpace::Continuous(d), Action::Continuous(a)) => {
                if a.len() != *d {
                    return Err(Error::DimensionMismatch {
                        expected: *d,
                        got: a.len(),
                        context: "log_prob action",
                    });
                }
                let (mu, log_std) = self.gaussian_params(task, obs)?;
                let mut lp = 0.0;
                for k in 0..*d {
                    let ak = a[k].clamp(-1.0 + 1e-9, 1.0 - 1e-9);
                    let u = ak.atanh();
                    let sigma = log_std[k].exp();
                    let z = (u - mu[k]) / sigma;
                    lp += -0.5 * z * z - log_std[k] - 0.5 * LN_2PI;
                    lp -= log_one_minus_tanh_sq(u);
                }
                Ok(lp)
            }
            _ => Err(Error::DimensionMismatch {
                expected: 0,
                got: 0,
                context: "action kind does not match policy action space",
            }),
        }
    }

    /// Policy entropy estimate at a state: exact for discrete, Monte Carlo
    /// for continuous.
    pub fn policy_entropy(&self, task: usize, obs: Obs, rng: &mut ChaCha8Rng) -> Result<f64> {
        match self.action_space {
            ActionSpace::Discrete(_) => {
                let logits = self.actor.forward(task, obs)?;
                let (probs, log_probs) = softmax(&logits);
                Ok(-probs.iter().zip(&log_probs).map(|(p, lp)| p * lp).sum::<f64>())
            }
            ActionSpace::Continuous(d) => {
                let (mu, log_std) = self.gaussian_params(task, obs)?;
                let mut acc = 0.0;
                for _ in 0..self.hyper.mc_samples {
                    let eps: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
                    acc -= ContSample::new(&mu, &log_std, &eps).logp;
                }
                Ok(acc / self.hyper.mc_samples as f64)
            }
        }
    }

    // ---- value estimates ----

    /// Q(s, a) under the live or target critic.
    pub fn q_value(&self, use_target: bool, task: usize, obs: Obs, action: &Action) -> Result<f64> {
        let critic = if use_target { &self.target_critic } else { &self.critic };
        match (&self.action_space, action) {
            (ActionSpace::Discrete(_), Action::Discrete(a)) => {
                Ok(critic.forward(task, obs)?[*a])
            }
            (ActionSpace::Continuous(_), Action::Continuous(a)) => {
                let input = concat_obs(&obs, a)?;
                Ok(critic.forward(task, Obs::Vector(&input))?[0])
            }
            _ => Err(Error::DimensionMismatch {
                expected: 0,
                got: 0,
                context: "q_value action kind",
            }),
        }
    }

    /// Soft state value V(s) = E_a[Q(s,a) - alpha log pi(a|s)] under the
    /// current policy: exact expectation for discrete, Monte Carlo average
    /// for continuous.
    pub fn value(&self, use_target: bool, task: usize, obs: Obs, rng: &mut ChaCha8Rng) -> Result<f64> {
        let critic = if use_target { &self.target_critic } else { &self.critic };
        let alpha = self.alpha(task);
        match self.action_space {
            ActionSpace::Discrete(_) => {
                let logits = self.actor.forward(task, obs)?;
                let (probs, log_probs) = softmax(&logits);
                let q = critic.forward(task, obs)?;
                Ok(probs
                    .iter()
                    .zip(&log_probs)
                    .zip(&q)
                    .map(|((p, lp), qa)| p * (qa - alpha * lp))
                    .sum())
            }
            ActionSpace::Continuous(d) => {
                let (mu, log_std) = self.gaussian_params(task, obs)?;
                let mut acc = 0.0;
                for _ in 0..self.hyper.mc_samples {
                    let eps: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
                    let s = ContSample::new(&mu, &log_std, &eps);
                    let input = concat_obs(&obs, &s.t)?;
                    acc += critic.forward(task, Obs::Vector(&input))?[0] - alpha * s.logp;
                }
                Ok(acc / self.hyper.mc_samples as f64)
            }
        }
    }

    // ---- critic update ----

    /// Per-task mean critic losses and their gradients. Targets use the
    /// target critic and are not differentiated through.
    pub fn critic_grads(
        &self,
        batch: &[SacTransition],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, MultiHeadGrads)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("critic_grads"));
        }
        let mut grads = MultiHeadGrads::zeros_like(&self.critic);
        let mut loss_sum = vec![0.0; self.n_tasks()];
        let mut counts = vec![0usize; self.n_tasks()];
        for t in batch {
            let next_v = if t.terminated {
                0.0
            } else {
                self.value(true, t.task, t.next_obs.as_obs(), rng)?
            };
            let y = t.reward + self.hyper.gamma * next_v;
            match (&self.action_space, &t.action) {
                (ActionSpace::Discrete(n), Action::Discrete(a)) => {
                    let (q, cache) = self.critic.forward_cached(t.task, t.obs.as_obs())?;
                    let diff = q[*a] - y;
                    let mut upstream = vec![0.0; *n];
                    upstream[*a] = diff;
                    self.critic.backward(t.task, &cache, &upstream, &mut grads)?;
                    loss_sum[t.task] += 0.5 * diff * diff;
                }
                (ActionSpace::Continuous(_), Action::Continuous(a)) => {
                    let input = concat_obs(&t.obs.as_obs(), a)?;
                    let (q, cache) = self.critic.forward_cached(t.task, Obs::Vector(&input))?;
                    let diff = q[0] - y;
                    self.critic.backward(t.task, &cache, &[diff], &mut grads)?;
                    loss_sum[t.task] += 0.5 * diff * diff;
                }
                _ => {
                    return Err(Error::DimensionMismatch {
                        expected: 0,
                        got: 0,
                        context: "critic_grads action kind",
                    })
                }
            }
            counts[t.task] += 1;
        }
        Ok((finish_means(&mut grads, &mut loss_sum, &counts), grads))
    }

    pub fn apply_critic(&mut self, grads: &MultiHeadGrads, weights: &[f64]) -> Result<()> {
        self.critic.apply(grads, weights, self.hyper.lr_critic, &mut self.critic_opt)
    }

    // ---- actor update ----

    /// Per-task mean actor losses and gradients. The critic and temperature
    /// are treated as constants.
    pub fn actor_grads(
        &self,
        batch: &[SacTransition],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, MultiHeadGrads)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("actor_grads"));
        }
        let mut grads = MultiHeadGrads::zeros_like(&self.actor);
        let mut loss_sum = vec![0.0; self.n_tasks()];
        let mut counts = vec![0usize; self.n_tasks()];
        for t in batch {
            let alpha = self.alpha(t.task);
            match self.action_space {
                ActionSpace::Discrete(_) => {
                    let (logits, cache) = self.actor.forward_cached(t.task, t.obs.as_obs())?;
                    let (probs, log_probs) = softmax(&logits);
                    let q = self.critic.forward(t.task, t.obs.as_obs())?;
                    // L = sum_a pi(a) (alpha log pi(a) - Q(a));
                    // dL/dlogit_k = pi_k ((alpha log pi_k - Q_k) - L).
                    let costs: Vec<f64> = log_probs
                        .iter()
                        .zip(&q)
                        .map(|(lp, qa)| alpha * lp - qa)
                        .collect();
                    let loss: f64 = probs.iter().zip(&costs).map(|(p, c)| p * c).sum();
                    let upstream: Vec<f64> = probs
                        .iter()
                        .zip(&costs)
                        .map(|(p, c)| p * (c - loss))
                        .collect();
                    self.actor.backward(t.task, &cache, &upstream, &mut grads)?;
                    loss_sum[t.task] += loss;
                }
                ActionSpace::Continuous(d) => {
                    // Noise is drawn before any forward pass so the draw
                    // sequence does not depend on parameter values.
                    let eps: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
                    let (out, cache) = self.actor.forward_cached(t.task, t.obs.as_obs())?;
                    let (mu, raw_ls) = out.split_at(d);
                    let clamped: Vec<bool> = raw_ls
                        .iter()
                        .map(|&x| !(LOG_STD_MIN..=LOG_STD_MAX).contains(&x))
                        .collect();
                    let log_std: Vec<f64> =
                        raw_ls.iter().map(|x| x.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
                    let s = ContSample::new(mu, &log_std, &eps);
                    let input = concat_obs(&t.obs.as_obs(), &s.t)?;
                    let (qv, qcache) = self.critic.forward_cached(t.task, Obs::Vector(&input))?;
                    // dQ/da from the critic input gradient (obs dims discarded).
                    let mut scratch = MultiHeadGrads::zeros_like(&self.critic);
                    let in_grad =
                        self.critic
                            .backward_with_input(t.task, &qcache, &[1.0], &mut scratch)?;
                    let dq_da = &in_grad[in_grad.len() - d..];
                    let loss = alpha * s.logp - qv[0];
                    // Chain rule through a = tanh(mu + sigma * eps).
                    let mut upstream = vec![0.0; 2 * d];
                    for k in 0..d {
                        let tk = s.t[k];
                        let dtanh = 1.0 - tk * tk;
                        let sig_eps = log_std[k].exp() * eps[k];
                        upstream[k] = alpha * 2.0 * tk - dq_da[k] * dtanh;
                        upstream[d + k] = if clamped[k] {
                            0.0
                        } else {
                            alpha * (-1.0 + 2.0 * tk * sig_eps) - dq_da[k] * dtanh * sig_eps
                        };
                    }
                    self.actor.backward(t.task, &cache, &upstream, &mut grads)?;
                    loss_sum[t.task] += loss;
                }
            }
            counts[t.task] += 1;
        }
        Ok((finish_means(&mut grads, &mut loss_sum, &counts), grads))
    }

    pub fn apply_actor(&mut self, grads: &MultiHeadGrads, weights: &[f64]) -> Result<()> {
        self.actor.apply(grads, weights, self.hyper.lr_actor, &mut self.actor_opt)
    }

    // ---- temperature update ----

    /// Per-task temperature losses and d(loss)/d(log alpha). The loss is
    /// alpha * (H(pi) - target_entropy), whose log-alpha descent shrinks
    /// alpha when entropy exceeds the target.
    pub fn temperature_grads(
        &self,
        batch: &[SacTransition],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("temperature_grads"));
        }
        let mut ent_sum = vec![0.0; self.n_tasks()];
        let mut counts = vec![0usize; self.n_tasks()];
        for t in batch {
            ent_sum[t.task] += self.policy_entropy(t.task, t.obs.as_obs(), rng)?;
            counts[t.task] += 1;
        }
        let mut losses = vec![f64::INFINITY; self.n_tasks()];
        let mut grads = vec![0.0; self.n_tasks()];
        for i in 0..self.n_tasks() {
            if counts[i] > 0 {
                let h = ent_sum[i] / counts[i] as f64;
                let g = self.alpha(i) * (h - self.hyper.target_entropy);
                losses[i] = g;
                grads[i] = g;
            }
        }
        Ok((losses, grads))
    }

    pub fn apply_temperature(&mut self, grads: &[f64], weights: &[f64]) -> Result<()> {
        for i in 0..self.n_tasks() {
            if weights[i] == 0.0 {
                continue;
            }
            adam_step(
                &mut self.log_alpha[i],
                &[grads[i] * weights[i]],
                &mut self.alpha_opt[i],
                self.hyper.lr_alpha,
            )?;
        }
        Ok(())
    }

    pub fn sync_target(&mut self) {
        polyak(&mut self.target_critic, &self.critic, self.hyper.tau);
    }

    fn gaussian_params(&self, task: usize, obs: Obs) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = match self.action_space {
            ActionSpace::Continuous(d) => d,
            ActionSpace::Discrete(_) => {
                return Err(Error::Config("gaussian_params on a discrete policy".into()))
            }
        };
        let out = self.actor.forward(task, obs)?;
        let (mu, raw_ls) = out.split_at(d);
        let log_std = raw_ls.iter().map(|x| x.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Ok((mu.to_vec(), log_std))
    }
}

/// Reparameterized tanh-Gaussian sample with its log-probability.
struct ContSample {
    t: Vec<f64>,
    logp: f64,
}

impl ContSample {
    fn new(mu: &[f64], log_std: &[f64], eps: &[f64]) -> Self {
        let mut t = Vec::with_capacity(mu.len());
        let mut logp = 0.0;
        for k in 0..mu.len() {
            let u = mu[k] + log_std[k].exp() * eps[k];
            t.push(u.tanh());
            logp += -0.5 * eps[k] * eps[k] - log_std[k] - 0.5 * LN_2PI;
            logp -= log_one_minus_tanh_sq(u);
        }
        Self { t, logp }
    }
}

/// log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)), stable for large |u|.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Stable softmax: (probabilities, log-probabilities).
pub fn softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let log_z = z.ln();
    let probs = exps.iter().map(|e| e / z).collect();
    let log_probs = logits.iter().map(|l| l - max - log_z).collect();
    (probs, log_probs)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Box-Muller standard normal.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn concat_obs(obs: &Obs, action: &[f64]) -> Result<Vec<f64>> {
    match obs {
        Obs::Vector(v) => {
            let mut input = Vec::with_capacity(v.len() + action.len());
            input.extend_from_slice(v);
            input.extend_from_slice(action);
            Ok(input)
        }
        Obs::Index(_) => Err(Error::Config(
            "continuous critic requires vector observations".into(),
        )),
    }
}

/// Converts per-task sums into means in place; tasks with no samples get an
/// infinite loss so weight aggregation masks them out.
fn finish_means(grads: &mut MultiHeadGrads, loss_sum: &mut [f64], counts: &[usize]) -> Vec<f64> {
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            loss_sum[i] = f64::INFINITY;
            continue;
        }
        let inv = 1.0 / c as f64;
        loss_sum[i] *= inv;
        for g in &mut grads.heads[i] {
            *g *= inv;
        }
        for g in &mut grads.trunk[i] {
            *g *= inv;
        }
    }
    loss_sum.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp;
    use rand::SeedableRng;

    fn hyper(gamma: f64, lr: f64, tau: f64) -> SacHyper {
        SacHyper {
            gamma,
            lr_actor: lr,
            lr_critic: lr,
            lr_alpha: lr,
            tau,
            target_entropy: 0.0,
            mc_samples: 5,
        }
    }

    fn tabular_policy(n_tasks: usize, n_states: usize, n_actions: usize) -> ControlPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ControlPolicy::new(
            n_tasks,
            ActionSpace::Discrete(n_actions),
            Backbone::Tabular { n_states },
            hyper(0.9, 1e-2, 1.0),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn uniform_policy_value_is_q_plus_alpha_log_a() {
        // Zero tables: uniform actor, zero critic, alpha = 1.
        let pol = tabular_policy(1, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = pol.value(false, 0, Obs::Index(0), &mut rng).unwrap();
        assert!((v - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn discrete_log_prob_matches_softmax() {
        let mut pol = tabular_policy(1, 2, 3);
        pol.actor.heads[0].values_mut()[..3].copy_from_slice(&[1.0, 2.0, 0.5]);
        let lp = pol.log_prob(0, Obs::Index(0), &Action::Discrete(1)).unwrap();
        let z: f64 = [1.0, 2.0, 0.5f64].iter().map(|l| l.exp()).sum::<f64>().ln();
        assert!((lp - (2.0 - z)).abs() < 1e-12);
    }

    #[test]
    fn deterministic_act_picks_the_argmax() {
        let mut pol = tabular_policy(1, 1, 3);
        pol.actor.heads[0].values_mut().copy_from_slice(&[0.1, -0.3, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, _) = pol.act(0, Obs::Index(0), true, &mut rng).unwrap();
        assert_eq!(a, Action::Discrete(2));
    }

    #[test]
    fn sampled_action_frequencies_follow_the_policy() {
        let mut pol = tabular_policy(1, 1, 2);
        pol.actor.heads[0].values_mut().copy_from_slice(&[1.0, 0.0]);
        let (probs, _) = softmax(&[1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 50_000;
        let mut count0 = 0;
        for _ in 0..n {
            if let (Action::Discrete(0), _) = pol.act(0, Obs::Index(0), false, &mut rng).unwrap() {
                count0 += 1;
            }
        }
        let freq = count0 as f64 / n as f64;
        assert!((freq - probs[0]).abs() < 0.01, "freq {freq} vs {}", probs[0]);
    }

    /// Critic trained on an exhaustive batch of a deterministic MDP converges
    /// to the entropy-regularized policy-evaluation fixed point.
    #[test]
    fn critic_converges_to_soft_policy_evaluation() {
        let n_states = 4;
        let n_actions = 2;
        let next = [[1usize, 2], [2, 3], [3, 0], [0, 1]];
        let reward = [[1.0, 0.0], [0.0, 0.5], [-0.5, 1.0], [0.2, -0.2]];
        let mut pol = tabular_policy(1, n_states, n_actions);
        pol.set_log_alpha(0, 0.3_f64.ln());
        // Fixed stochastic actor.
        let logits = [[0.4, -0.1], [0.0, 0.0], [-0.5, 0.5], [1.0, -1.0]];
        for s in 0..n_states {
            pol.actor.heads[0].values_mut()[s * n_actions..(s + 1) * n_actions]
                .copy_from_slice(&logits[s]);
        }
        let batch: Vec<SacTransition> = (0..n_states)
            .flat_map(|s| {
                (0..n_actions).map(move |a| SacTransition {
                    task: 0,
                    obs: ObsOwned::Index(s),
                    action: Action::Discrete(a),
                    reward: reward[s][a],
                    next_obs: ObsOwned::Index(next[s][a]),
                    terminated: false,
                })
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Adam step sizes do not shrink with the gradient, so anneal the
        // learning rate to reach a tight fixed point.
        for &(iters, lr) in &[(3000, 1e-2), (3000, 1e-3), (3000, 1e-4), (2000, 1e-5)] {
            pol.hyper.lr_critic = lr;
            pol.hyper.lr_actor = lr;
            for _ in 0..iters {
                let (_, grads) = pol.critic_grads(&batch, &mut rng).unwrap();
                pol.apply_critic(&grads, &[1.0]).unwrap();
                pol.sync_target(); // tau = 1
            }
        }
        let policy: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l).0).collect();
        let mdp = dp::TabularMdp {
            n_states,
            n_actions,
            transition: (0..n_states)
                .map(|s| (0..n_actions).map(|a| vec![(next[s][a], 1.0)]).collect())
                .collect(),
            reward: reward.iter().map(|r| r.to_vec()).collect(),
            terminal: vec![false; n_states],
        };
        let q_ref = dp::soft_policy_evaluation(&mdp, &policy, 0.3, 0.9, 1e-12, 100_000);
        for s in 0..n_states {
            for a in 0..n_actions {
                let q = pol.critic.heads[0].row(s)[a];
                assert!(
                    (q - q_ref[s][a]).abs() < 5e-3,
                    "Q({s},{a}) = {q} vs DP {}",
                    q_ref[s][a]
                );
            }
        }
    }

    /// With a frozen critic the discrete actor converges to
    /// softmax(Q / alpha).
    #[test]
    fn discrete_actor_converges_to_softmax_of_q_over_alpha() {
        let mut pol = tabular_policy(1, 1, 2);
        pol.critic.heads[0].values_mut().copy_from_slice(&[1.0, 0.0]);
        let batch = [SacTransition {
            task: 0,
            obs: ObsOwned::Index(0),
            action: Action::Discrete(0),
            reward: 0.0,
            next_obs: ObsOwned::Index(0),
            terminated: false,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(iters, lr) in &[(2000, 1e-2), (2000, 1e-3)] {
            pol.hyper.lr_critic = lr;
            pol.hyper.lr_actor = lr;
            for _ in 0..iters {
                let (_, grads) = pol.actor_grads(&batch, &mut rng).unwrap();
                pol.apply_actor(&grads, &[1.0]).unwrap();
            }
        }
        let logits = pol.actor.forward(0, Obs::Index(0)).unwrap();
        let (probs, _) = softmax(&logits);
        let (expected, _) = softmax(&[1.0, 0.0]); // Q / alpha with alpha = 1
        assert!((probs[0] - expected[0]).abs() < 1e-2, "pi = {probs:?}");
    }

    #[test]
    fn temperature_gradient_is_alpha_times_entropy_gap() {
        let mut pol = tabular_policy(1, 1, 4);
        pol.hyper.target_entropy = 0.5 * 4.0_f64.ln();
        pol.set_log_alpha(0, 0.2);
        let batch = [SacTransition {
            task: 0,
            obs: ObsOwned::Index(0),
            action: Action::Discrete(0),
            reward: 0.0,
            next_obs: ObsOwned::Index(0),
            terminated: false,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (_, grads) = pol.temperature_grads(&batch, &mut rng).unwrap();
        // Uniform actor: H = log 4.
        let expected = 0.2_f64.exp() * (4.0_f64.ln() - 0.5 * 4.0_f64.ln());
        assert!((grads[0] - expected).abs() < 1e-12);
        // Positive gradient must shrink alpha.
        let before = pol.alpha(0);
        pol.apply_temperature(&grads, &[1.0]).unwrap();
        assert!(pol.alpha(0) < before);
    }

    fn continuous_policy(seed: u64) -> ControlPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ControlPolicy::new(
            2,
            ActionSpace::Continuous(2),
            Backbone::Mlp {
                input_dim: 3,
                hidden: vec![8],
                shared_trunk: false,
            },
            hyper(0.95, 1e-3, 0.01),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn continuous_log_prob_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pol = ControlPolicy::new(
            1,
            ActionSpace::Continuous(1),
            Backbone::Mlp {
                input_dim: 2,
                hidden: vec![6],
                shared_trunk: false,
            },
            hyper(0.9, 1e-3, 0.01),
            &mut rng,
        )
        .unwrap();
        let obs = [0.4, -0.3];
        // Simpson's rule over the open interval (-1, 1).
        let n = 20_000;
        let lo = -1.0 + 1e-7;
        let hi = 1.0 - 1e-7;
        let h = (hi - lo) / n as f64;
        let f = |a: f64| {
            pol.log_prob(0, Obs::Vector(&obs), &Action::Continuous(vec![a]))
                .unwrap()
                .exp()
        };
        let mut total = f(lo) + f(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            total += w * f(lo + i as f64 * h);
        }
        total *= h / 3.0;
        assert!((total - 1.0).abs() < 1e-3, "integral = {total}");
    }

    #[test]
    fn continuous_sampling_and_log_prob_agree() {
        let pol = continuous_policy(8);
        let obs = [0.1, 0.2, -0.4];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, lp) = pol.act(1, Obs::Vector(&obs), false, &mut rng).unwrap();
        let lp2 = pol.log_prob(1, Obs::Vector(&obs), &a).unwrap();
        assert!((lp - lp2).abs() < 1e-6, "{lp} vs {lp2}");
    }

    /// Finite differences over all actor parameters of the continuous actor
    /// loss, with the noise sequence held fixed by reseeding.
    #[test]
    fn continuous_actor_gradients_match_finite_differences() {
        let mut pol = continuous_policy(10);
        let batch: Vec<SacTransition> = (0..3)
            .map(|i| SacTransition {
                task: 1,
                obs: ObsOwned::Vector(vec![0.2 * i as f64, -0.1, 0.3]),
                action: Action::Continuous(vec![0.0, 0.0]),
                reward: 0.0,
                next_obs: ObsOwned::Vector(vec![0.0, 0.0, 0.0]),
                terminated: false,
            })
            .collect();
        let seed = 11;
        let (_, grads) = pol
            .actor_grads(&batch, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        let eps = 1e-6;
        let n_params = pol.actor.heads[1].len();
        for k in 0..n_params {
            let orig = pol.actor.heads[1].values()[k];
            pol.actor.heads[1].values_mut()[k] = orig + eps;
            let (lp, _) = pol
                .actor_grads(&batch, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
            pol.actor.heads[1].values_mut()[k] = orig - eps;
            let (lm, _) = pol
                .actor_grads(&batch, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
            pol.actor.heads[1].values_mut()[k] = orig;
            let fd = (lp[1] - lm[1]) / (2.0 * eps);
            let g = grads.heads[1][k];
            let denom = fd.abs().max(g.abs()).max(1e-5);
            assert!(
                (fd - g).abs() / denom < 1e-3,
                "actor param {k}: analytic {g} vs fd {fd}"
            );
        }
    }

    #[test]
    fn continuous_critic_gradients_match_finite_differences() {
        let mut pol = continuous_policy(12);
        let batch: Vec<SacTransition> = (0..3)
            .map(|i| SacTransition {
                task: 0,
                obs: ObsOwned::Vector(vec![0.1, 0.2 * i as f64, -0.3]),
                action: Action::Continuous(vec![0.5, -0.25]),
                reward: 0.4,
                next_obs: ObsOwned::Vector(vec![-0.1, 0.0, 0.2]),
                terminated: i == 2,
            })
            .collect();
        let seed = 13;
        let (_, grads) = pol
            .critic_grads(&batch, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        let eps = 1e-6;
        for k in 0..pol.critic.heads[0].len() {
            let orig = pol.critic.heads[0].values()[k];
            pol.critic.heads[0].values_mut()[k] = orig + eps;
            let (lp, _) = pol
                .critic_grads(&batch, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
            pol.critic.heads[0].values_mut()[k] = orig - eps;
            let (lm, _) = pol
                .critic_grads(&batch, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
            pol.critic.heads[0].values_mut()[k] = orig;
            let fd = (lp[0] - lm[0]) / (2.0 * eps);
            let g = grads.heads[0][k];
            let denom = fd.abs().max(g.abs()).max(1e-5);
            assert!(
                (fd - g).abs() / denom < 1e-3,
                "critic param {k}: analytic {g} vs fd {fd}"
            );
        }
    }

    #[test]
    fn tasks_with_no_samples_get_infinite_loss_and_zero_grads() {
        let pol = tabular_policy(2, 2, 2);
        let batch = [SacTransition {
            task: 0,
            obs: ObsOwned::Index(0),
            action: Action::Discrete(1),
            reward: 1.0,
            next_obs: ObsOwned::Index(1),
            terminated: true,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (losses, grads) = pol.critic_grads(&batch, &mut rng).unwrap();
        assert!(losses[0].is_finite());
        assert!(losses[1].is_infinite());
        assert!(grads.heads[1].iter().all(|&g| g == 0.0));
    }
}
