//! Exact planning and evaluation for a known model.
//!
//! The optimal history-dependent policy is found by dynamic programming over
//! `(t, belief, state)`. Beliefs are memoized after rounding to 1e-9.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::enumerate::{check_budget, for_each_trajectory, saturating_pow, trajectory_count, ENUMERATION_BUDGET};
use crate::env::sample_episode;
use crate::error::Result;
use crate::model::{bayes_in_place, Pair, Rmmdp, Step};
use crate::policy::Policy;
use crate::rng::{mix64, seeded};

/// Rounding resolution of the belief memo key.
pub const BELIEF_QUANTUM: f64 = 1e-9;

/// Cap on memoized `(t, belief, state)` entries.
pub const MEMO_BUDGET: u128 = 4_000_000;

type MemoKey = (usize, Vec<i64>, usize);

#[derive(Debug, Clone)]
struct Decision {
    value: f64,
    action: usize,
    belief: Vec<f64>,
}

fn quantize(b: &[f64]) -> Vec<i64> {
    b.iter().map(|v| (v / BELIEF_QUANTUM).round() as i64).collect()
}

struct Solver<'a> {
    model: &'a Rmmdp,
    memo: &'a mut HashMap<MemoKey, Decision>,
    pz: Vec<f64>,
}

impl Solver<'_> {
    /// `V_t(b, s)` with 1-based `t`.
    fn value(&mut self, t: usize, b: &[f64], s: usize) -> Result<f64> {
        let key = (t, quantize(b), s);
        if let Some(d) = self.memo.get(&key) {
            return Ok(d.value);
        }
        check_budget("reachable beliefs", self.memo.len() as u128 + 1, MEMO_BUDGET)?;
        let model = self.model;
        let zsz = model.support_size();
        let mut best = (f64::NEG_INFINITY, 0);
        for a in 0..model.num_actions() {
            let pair = Pair::new(s, a);
            let mut pz = std::mem::take(&mut self.pz);
            pz.resize(zsz, 0.0);
            model.predictive(b, pair, &mut pz);
            let mut q = 0.0;
            for (z, &p) in pz.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                let mut future = 0.0;
                if t < model.horizon() {
                    let mut post = b.to_vec();
                    bayes_in_place(model, &mut post, pair, z)?;
                    for (s2, pt) in model.transition_row(s, a).iter().enumerate() {
                        if *pt > 0.0 {
                            future += pt * self.value(t + 1, &post, s2)?;
                        }
                    }
                }
                q += p * (model.support().value(z) + future);
            }
            self.pz = pz;
            if q > best.0 {
                best = (q, a);
            }
        }
        self.memo.insert(
            key,
            Decision {
                value: best.0,
                action: best.1,
                belief: b.to_vec(),
            },
        );
        Ok(best.0)
    }
}

/// Optimal history-dependent policy of a known model. Acts greedily on the
/// memoized belief values; ties go to the lowest action index.
pub struct BeliefPolicy {
    model: Arc<Rmmdp>,
    memo: Mutex<HashMap<MemoKey, Decision>>,
    value: f64,
}

impl std::fmt::Debug for BeliefPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BeliefPolicy")
            .field("value", &self.value)
            .field("entries", &self.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub t: usize,
    pub state: usize,
    pub belief_hash: String,
    pub belief: Vec<f64>,
    pub action: usize,
    pub value: f64,
}

impl BeliefPolicy {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn model(&self) -> &Rmmdp {
        &self.model
    }

    pub fn len(&self) -> usize {
        self.memo.lock().expect("memo lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Posterior after `history`; observations impossible under the model
    /// leave the belief unchanged.
    pub fn belief_after(&self, history: &[Step]) -> Vec<f64> {
        let mut b = self.model.weights().to_vec();
        for step in history {
            let mut next = b.clone();
            if bayes_in_place(&self.model, &mut next, step.pair(), step.reward).is_ok() {
                b = next;
            }
        }
        b
    }

    /// Greedy action at `(t, b, s)`, solving the subproblem on a memo miss.
    pub fn action(&self, t: usize, b: &[f64], s: usize) -> usize {
        let key = (t, quantize(b), s);
        let mut memo = self.memo.lock().expect("memo lock");
        if let Some(d) = memo.get(&key) {
            return d.action;
        }
        let mut solver = Solver {
            model: &self.model,
            memo: &mut memo,
            pz: Vec::new(),
        };
        // a miss only happens off the policy's own support; keep it total
        if solver.value(t, b, s).is_err() {
            return 0;
        }
        memo.get(&key).map_or(0, |d| d.action)
    }

    /// Decision table sorted by `(t, state, belief hash)`.
    pub fn decision_table(&self) -> Vec<DecisionRow> {
        let memo = self.memo.lock().expect("memo lock");
        let mut rows: Vec<DecisionRow> = memo
            .iter()
            .map(|((t, q, s), d)| DecisionRow {
                t: *t,
                state: *s,
                belief_hash: format!("{:016x}", q.iter().fold(0u64, |h, v| mix64(h ^ *v as u64))),
                belief: d.belief.clone(),
                action: d.action,
                value: d.value,
            })
            .collect();
        rows.sort_by(|a, b| (a.t, a.state, &a.belief_hash).cmp(&(b.t, b.state, &b.belief_hash)));
        rows
    }
}

impl Policy for BeliefPolicy {
    fn action_probs(&self, history: &[Step], state: usize, out: &mut [f64]) {
        let b = self.belief_after(history);
        let a = self.action(history.len() + 1, &b, state);
        out.iter_mut().for_each(|v| *v = 0.0);
        out[a] = 1.0;
    }
}

/// `V*` and an optimal policy by belief-state dynamic programming.
pub fn optimal_plan(model: &Rmmdp) -> Result<(f64, BeliefPolicy)> {
    let mut memo = HashMap::new();
    let mut solver = Solver {
        model,
        memo: &mut memo,
        pz: Vec::new(),
    };
    let w = model.weights().to_vec();
    let mut v = 0.0;
    for (s, p) in model.init().iter().enumerate() {
        if *p > 0.0 {
            v += p * solver.value(1, &w, s)?;
        }
    }
    let policy = BeliefPolicy {
        model: Arc::new(model.clone()),
        memo: Mutex::new(memo),
        value: v,
    };
    Ok((v, policy))
}

/// Number of nodes of the history tree, `Σ_t S·(S·A·Z)^(t-1)`.
pub fn history_tree_size(model: &Rmmdp) -> u128 {
    let branch = model.num_states() * model.num_actions() * model.support_size();
    (0..model.horizon())
        .map(|t| (model.num_states() as u128).saturating_mul(saturating_pow(branch, t)))
        .fold(0u128, |a, b| a.saturating_add(b))
}

/// Optimal value by backward induction over the raw history tree, carrying
/// unnormalized per-context probabilities instead of beliefs.
pub fn brute_force_optimal(model: &Rmmdp) -> Result<f64> {
    check_budget("history tree nodes", history_tree_size(model), ENUMERATION_BUDGET)?;
    fn node(model: &Rmmdp, t: usize, s: usize, joint: &[f64]) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for a in 0..model.num_actions() {
            let mut q = 0.0;
            for z in 0..model.support_size() {
                let next: Vec<f64> = joint
                    .iter()
                    .enumerate()
                    .map(|(m, j)| j * model.reward_row(m, s, a)[z])
                    .collect();
                let mass: f64 = next.iter().sum();
                if mass <= 0.0 {
                    continue;
                }
                q += mass * model.support().value(z);
                if t < model.horizon() {
                    for (s2, pt) in model.transition_row(s, a).iter().enumerate() {
                        if *pt > 0.0 {
                            q += pt * node(model, t + 1, s2, &next);
                        }
                    }
                }
            }
            best = best.max(q);
        }
        best
    }
    let w = model.weights();
    Ok(model
        .init()
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > 0.0)
        .map(|(s, p)| p * node(model, 1, s, w))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyValue {
    pub value: f64,
    pub exact: bool,
    /// Half-width of a 95% interval in Monte-Carlo mode.
    pub ci95: f64,
    pub episodes: u64,
}

/// Episodes used by the Monte-Carlo fallback of [`policy_value`].
pub const MC_EPISODES: u64 = 200_000;

/// `V^π` exactly when `(S·A·Z)^H ≤ 10^6`, otherwise by Monte Carlo with seed 0.
pub fn policy_value(model: &Rmmdp, policy: &dyn Policy) -> PolicyValue {
    if trajectory_count(model) <= ENUMERATION_BUDGET {
        let mut v = 0.0;
        for_each_trajectory(&[model], policy, |steps, _, joint| {
            let ret: f64 = steps.iter().map(|s| model.support().value(s.reward)).sum();
            v += joint[0] * ret;
        });
        PolicyValue {
            value: v,
            exact: true,
            ci95: 0.0,
            episodes: 0,
        }
    } else {
        policy_value_mc(model, policy, MC_EPISODES, 0)
    }
}

pub fn policy_value_mc(model: &Rmmdp, policy: &dyn Policy, episodes: u64, seed: u64) -> PolicyValue {
    let mut rng = seeded(seed);
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..episodes {
        let rec = sample_episode(model, policy, &mut rng);
        let ret: f64 = rec
            .trajectory
            .steps
            .iter()
            .map(|s| model.support().value(s.reward))
            .sum();
        sum += ret;
        sq += ret * ret;
    }
    let n = episodes.max(1) as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0);
    PolicyValue {
        value: mean,
        exact: false,
        ci95: 1.96 * (var / n).sqrt(),
        episodes,
    }
}

/// Classic finite-horizon value iteration for a single-context model.
pub fn mdp_value_iteration(model: &Rmmdp, context: usize) -> f64 {
    let (ns, na) = (model.num_states(), model.num_actions());
    let mut v = vec![0.0; ns];
    for _ in 0..model.horizon() {
        let mut next = vec![0.0; ns];
        for (s, slot) in next.iter_mut().enumerate() {
            *slot = (0..na)
                .map(|a| {
                    let r: f64 = model
                        .reward_row(context, s, a)
                        .iter()
                        .enumerate()
                        .map(|(z, p)| p * model.support().value(z))
                        .sum();
                    let f: f64 = model.transition_row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
                    r + f
                })
                .fold(f64::NEG_INFINITY, f64::max);
        }
        v = next;
    }
    model.init().iter().zip(&v).map(|(p, x)| p * x).sum()
}

/// Draws a uniform `u` and samples an action from `policy`.
pub fn sample_action<R: Rng + ?Sized>(policy: &dyn Policy, history: &[Step], state: usize, actions: usize, rng: &mut R) -> usize {
    policy.sample(history, state, actions, rng.random::<f64>())
}
