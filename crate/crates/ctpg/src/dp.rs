//! Reference solvers on small tabular models.
//!
//! These solve the same fixed points the learners approximate, but by plain
//! dynamic programming over explicit transition tables. They share no code
//! with the gradient-based implementations, so agreement between the two is
//! meaningful evidence rather than a tautology.

/// Finite MDP with explicit transition probabilities.
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// transition[s][a]: sparse list of (next_state, probability).
    pub transition: Vec<Vec<Vec<(usize, f64)>>>,
    /// reward[s][a]
    pub reward: Vec<Vec<f64>>,
    /// Terminal states contribute zero future value.
    pub terminal: Vec<bool>,
}

/// Entropy-regularized state value under a fixed stochastic policy:
/// V(s) = sum_a pi(a|s) (Q(s,a) - alpha log pi(a|s)).
pub fn soft_state_value(q_row: &[f64], pi_row: &[f64], alpha: f64) -> f64 {
    q_row
        .iter()
        .zip(pi_row)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&q, &p)| p * (q - alpha * p.ln()))
        .sum()
}

/// Entropy-regularized policy evaluation:
/// Q(s,a) = r(s,a) + gamma * E_{s'}[(1 - terminal(s')) V(s')], with V as in
/// `soft_state_value`. Iterates to sup-norm tolerance `tol`. Returns Q[s][a].
pub fn soft_policy_evaluation(
    mdp: &TabularMdp,
    policy: &[Vec<f64>],
    alpha: f64,
    gamma: f64,
    tol: f64,
    max_iters: usize,
) -> Vec<Vec<f64>> {
    let mut q = vec![vec![0.0; mdp.n_actions]; mdp.n_states];
    for _ in 0..max_iters {
        let v: Vec<f64> = (0..mdp.n_states)
            .map(|s| soft_state_value(&q[s], &policy[s], alpha))
            .collect();
        let mut delta: f64 = 0.0;
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let mut next = 0.0;
                for &(s2, p) in &mdp.transition[s][a] {
                    if !mdp.terminal[s2] {
                        next += p * v[s2];
                    }
                }
                let new = mdp.reward[s][a] + gamma * next;
                delta = delta.max((new - q[s][a]).abs());
                q[s][a] = new;
            }
        }
        if delta < tol {
            break;
        }
    }
    q
}

/// Deterministic finite MDP, for segment-level evaluation where segment
/// returns must be exact.
pub struct DeterministicMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// next[s][a]
    pub next: Vec<Vec<usize>>,
    /// reward[s][a]
    pub reward: Vec<Vec<f64>>,
    pub terminal: Vec<bool>,
}

/// Segment-level evaluation: a choice j runs the deterministic control policy
/// `policies[j]` for `k` base steps (or until a terminal state), then
/// bootstraps. Per base step the reward is augmented by `entropy_bonus[j][s]`
/// (the acting policy's scaled entropy at that state).
///
/// Q(s,j) = sum_{l<L} gamma^l (r_l + b_l) + [not terminal] gamma^L V(s_L),
/// V(s) = sum_j pi(j|s) (Q(s,j) - guide_entropy_coef * log pi(j|s)).
///
/// `guide_entropy_coef = 0` evaluates choices without a selection-entropy
/// bonus in the bootstrap. Returns Q[s][j].
#[allow(clippy::too_many_arguments)]
pub fn soft_segment_evaluation(
    mdp: &DeterministicMdp,
    policies: &[Vec<usize>],
    entropy_bonus: &[Vec<f64>],
    guide_pi: &[Vec<f64>],
    guide_entropy_coef: f64,
    k: usize,
    gamma: f64,
    tol: f64,
    max_iters: usize,
) -> Vec<Vec<f64>> {
    let n_choices = policies.len();
    let mut q = vec![vec![0.0; n_choices]; mdp.n_states];
    for _ in 0..max_iters {
        let v: Vec<f64> = (0..mdp.n_states)
            .map(|s| soft_state_value(&q[s], &guide_pi[s], guide_entropy_coef))
            .collect();
        let mut delta: f64 = 0.0;
        for s in 0..mdp.n_states {
            for j in 0..n_choices {
                let mut cur = s;
                let mut acc = 0.0;
                let mut disc = 1.0;
                let mut cut = mdp.terminal[cur];
                for _ in 0..k {
                    if cut {
                        break;
                    }
                    let a = policies[j][cur];
                    acc += disc * (mdp.reward[cur][a] + entropy_bonus[j][cur]);
                    cur = mdp.next[cur][a];
                    disc *= gamma;
                    cut = mdp.terminal[cur];
                }
                let new = if cut { acc } else { acc + disc * v[cur] };
                delta = delta.max((new - q[s][j]).abs());
                q[s][j] = new;
            }
        }
        if delta < tol {
            break;
        }
    }
    q
}
