//! History-dependent policies.
//!
//! A policy only ever sees the observable history (states, actions, reward
//! indices); the latent context is not part of the interface.

use crate::model::Step;
use crate::rng::mix64;

pub trait Policy: Sync {
    /// Writes `π(· | h_t)` into `out` (length = number of actions), where the
    /// history is `history` followed by the current `state`.
    fn action_probs(&self, history: &[Step], state: usize, out: &mut [f64]);

    /// Draws an action using a uniform variate `u ∈ [0,1)`.
    fn sample(&self, history: &[Step], state: usize, num_actions: usize, u: f64) -> usize {
        let mut probs = vec![0.0; num_actions];
        self.action_probs(history, state, &mut probs);
        let mut acc = 0.0;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }
}

fn one_hot(out: &mut [f64], a: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    out[a] = 1.0;
}

/// Open-loop action sequence: plays `actions[t]` at step `t`.
#[derive(Debug, Clone)]
pub struct FixedActions {
    actions: Vec<usize>,
}

impl FixedActions {
    pub fn new(actions: Vec<usize>) -> Self {
        FixedActions { actions }
    }

    /// Always plays the same action.
    pub fn constant(action: usize, horizon: usize) -> Self {
        FixedActions {
            actions: vec![action; horizon],
        }
    }
}

impl Policy for FixedActions {
    fn action_probs(&self, history: &[Step], _state: usize, out: &mut [f64]) {
        one_hot(out, self.actions[history.len().min(self.actions.len() - 1)]);
    }
}

/// Uniformly random actions.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPolicy;

impl Policy for UniformPolicy {
    fn action_probs(&self, _history: &[Step], _state: usize, out: &mut [f64]) {
        let p = 1.0 / out.len() as f64;
        out.iter_mut().for_each(|v| *v = p);
    }
}

/// Deterministic reactive policy: the action depends on `(t, state)` only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReactivePolicy {
    /// `table[t][s]`
    pub table: Vec<Vec<usize>>,
}

impl ReactivePolicy {
    /// Decodes the `index`-th policy of the `A^(S·H)` enumeration.
    pub fn from_index(mut index: u64, states: usize, actions: usize, horizon: usize) -> Self {
        let mut table = vec![vec![0; states]; horizon];
        for row in table.iter_mut() {
            for cell in row.iter_mut() {
                *cell = (index % actions as u64) as usize;
                index /= actions as u64;
            }
        }
        ReactivePolicy { table }
    }

    /// Number of deterministic reactive policies, saturating at `u64::MAX`.
    pub fn count(states: usize, actions: usize, horizon: usize) -> u64 {
        (0..states * horizon).fold(1u64, |acc, _| acc.saturating_mul(actions as u64))
    }
}

impl Policy for ReactivePolicy {
    fn action_probs(&self, history: &[Step], state: usize, out: &mut [f64]) {
        one_hot(out, self.table[history.len()][state]);
    }
}

/// Pseudo-random stochastic history-dependent policy. The action
/// distribution is a fixed function of `(seed, history, state)`.
#[derive(Debug, Clone, Copy)]
pub struct HashedPolicy {
    pub seed: u64,
    /// When set, the policy is deterministic (argmax of the hashed weights).
    pub deterministic: bool,
}

impl Policy for HashedPolicy {
    fn action_probs(&self, history: &[Step], state: usize, out: &mut [f64]) {
        let mut h = mix64(self.seed ^ 0x5bd1_e995);
        for step in history {
            h = mix64(h ^ (step.state as u64) << 1);
            h = mix64(h ^ (step.action as u64) << 17);
            h = mix64(h ^ (step.reward as u64) << 33);
        }
        h = mix64(h ^ (state as u64) << 7 ^ (history.len() as u64) << 45);
        let mut total = 0.0;
        for (a, v) in out.iter_mut().enumerate() {
            let u = (mix64(h ^ a as u64) >> 11) as f64 / (1u64 << 53) as f64;
            *v = u + 1e-3;
            total += *v;
        }
        if self.deterministic {
            let best = out
                .iter()
                .enumerate()
                .fold(0, |b, (a, v)| if *v > out[b] { a } else { b });
            one_hot(out, best);
        } else {
            out.iter_mut().for_each(|v| *v /= total);
        }
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn action_probs(&self, history: &[Step], state: usize, out: &mut [f64]) {
        (**self).action_probs(history, state, out)
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn action_probs(&self, history: &[Step], state: usize, out: &mut [f64]) {
        (**self).action_probs(history, state, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reactive_enumeration_covers_all_tables() {
        let n = ReactivePolicy::count(2, 2, 2);
        assert_eq!(n, 16);
        let mut seen = std::collections::HashSet::new();
        for i in 0..n {
            seen.insert(ReactivePolicy::from_index(i, 2, 2, 2).table);
        }
        assert_eq!(seen.len(), 16);
    }

    #[test]
    fn hashed_policy_is_a_distribution() {
        let p = HashedPolicy { seed: 3, deterministic: false };
        let mut out = [0.0; 3];
        let h = [Step { state: 0, action: 1, reward: 0 }];
        p.action_probs(&h, 1, &mut out);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut again = [0.0; 3];
        p.action_probs(&h, 1, &mut again);
        assert_eq!(out, again);
    }
}
