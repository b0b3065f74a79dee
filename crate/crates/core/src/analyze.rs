//! Exact verification tools: level sets of explored sequences, sup-policy
//! event probabilities, moment mismatch, eventwise total variation and the
//! KL information identity.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::enumerate::{check_budget, for_each_trajectory, saturating_pow, trajectory_count, ENUMERATION_BUDGET};
use crate::error::{Error, Result};
use crate::explore::{z_from_index, MomentTable};
use crate::model::{moment_unchecked, MomentKey, Pair, Rmmdp, Step, Trajectory};
use crate::policy::{HashedPolicy, Policy, ReactivePolicy};

/// Predicate over the state-action sequence `x_{1:H}`.
pub type Event<'a> = dyn Fn(&[Pair]) -> bool + Sync + 'a;

/// Geometric thresholds `n_0 = K/(SA)^d`, `n_{l+1} = n_l/4` and the counts
/// used to place a sequence into a level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelStructure {
    pub thresholds: Vec<f64>,
    pub degree: usize,
    pub iota_c: f64,
    counts: HashMap<MomentKey, u64>,
    infinite: bool,
}

/// Thresholds `n_0..=n_L` where `L` is the largest index with `n_L > ι_c`.
/// When `n_0 ≤ ι_c` the structure degenerates to the single threshold `n_0`.
pub fn level_thresholds(episodes: u64, pairs: usize, degree: usize, iota_c: f64) -> Vec<f64> {
    let n0 = episodes as f64 / (pairs as f64).powi(degree as i32);
    let mut out = vec![n0];
    loop {
        let next = out[out.len() - 1] / 4.0;
        if next > iota_c {
            out.push(next);
        } else {
            return out;
        }
    }
}

pub fn build_levels(table: &MomentTable, episodes: u64, pairs: usize, degree: usize, iota_c: f64) -> LevelStructure {
    LevelStructure {
        thresholds: level_thresholds(episodes, pairs, degree, iota_c),
        degree,
        iota_c,
        counts: table.iter().map(|(k, e)| (k.clone(), e.count)).collect(),
        infinite: false,
    }
}

impl LevelStructure {
    /// Same thresholds with every key treated as infinitely sampled.
    pub fn with_infinite_counts(mut self) -> Self {
        self.counts.clear();
        self.infinite = true;
        self
    }

    /// With explicit counts (missing keys count 0).
    pub fn with_counts(mut self, counts: HashMap<MomentKey, u64>) -> Self {
        self.counts = counts;
        self.infinite = false;
        self
    }

    /// `L`.
    pub fn top(&self) -> usize {
        self.thresholds.len() - 1
    }

    pub fn count(&self, key: &MomentKey) -> u64 {
        if self.infinite {
            u64::MAX
        } else {
            self.counts.get(key).copied().unwrap_or(0)
        }
    }

    /// Smallest count over all subsequences of length `1..=d`.
    pub fn min_subsequence_count(&self, x: &[Pair]) -> u64 {
        let mut best = u64::MAX;
        let mut cur = Vec::with_capacity(self.degree);
        fn rec(ls: &LevelStructure, x: &[Pair], start: usize, cur: &mut Vec<Pair>, best: &mut u64) {
            if !cur.is_empty() {
                *best = (*best).min(ls.count(&MomentKey::from_pairs(cur.clone())));
            }
            if cur.len() == ls.degree || *best == 0 {
                return;
            }
            for i in start..x.len() {
                cur.push(x[i]);
                rec(ls, x, i + 1, cur, best);
                cur.pop();
            }
        }
        rec(self, x, 0, &mut cur, &mut best);
        best
    }

    /// `x ∈ ℰ_l`.
    pub fn in_level_set(&self, l: usize, x: &[Pair]) -> bool {
        let n = self.min_subsequence_count(x);
        n == u64::MAX || n as f64 >= self.thresholds[l]
    }

    /// The unique `l ∈ 0..=L+1` with `x ∈ ℰ'_l`.
    pub fn level_of(&self, x: &[Pair]) -> usize {
        let n = self.min_subsequence_count(x);
        if n == u64::MAX {
            return 0;
        }
        self.thresholds
            .iter()
            .position(|t| n as f64 >= *t)
            .unwrap_or(self.thresholds.len())
    }
}

/// `sup_π ℙ_π(x_{1:H} ∈ event)` by dynamic programming over state-action
/// prefixes. Rewards never influence the pair sequence, so history-dependent
/// policies gain nothing from observing them.
pub fn sup_event_probability(model: &Rmmdp, event: &Event) -> Result<f64> {
    let prefixes = saturating_pow(model.num_pairs(), model.horizon());
    check_budget("state-action prefixes", prefixes, ENUMERATION_BUDGET)?;
    fn walk(model: &Rmmdp, event: &Event, prefix: &mut Vec<Pair>, s: usize) -> f64 {
        let mut best: f64 = 0.0;
        for a in 0..model.num_actions() {
            prefix.push(Pair::new(s, a));
            let v = if prefix.len() == model.horizon() {
                if event(prefix) {
                    1.0
                } else {
                    0.0
                }
            } else {
                model
                    .transition_row(s, a)
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| **p > 0.0)
                    .map(|(s2, p)| p * walk(model, event, prefix, s2))
                    .sum()
            };
            prefix.pop();
            best = best.max(v);
            if best >= 1.0 {
                break;
            }
        }
        best
    }
    let mut prefix = Vec::with_capacity(model.horizon());
    Ok(model
        .init()
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > 0.0)
        .map(|(s, p)| p * walk(model, event, &mut prefix, s))
        .sum())
}

/// `p(x)`: the largest probability of a trajectory containing the pairs of
/// `x` as a (not necessarily consecutive) subsequence.
pub fn subsequence_reach(model: &Rmmdp, x: &MomentKey) -> Result<f64> {
    if x.len() > model.horizon() {
        return Ok(0.0);
    }
    if let Some(p) = x.pairs().iter().find(|p| p.state >= model.num_states() || p.action >= model.num_actions()) {
        return Err(Error::InvalidArgument(format!("pair {p} out of range")));
    }
    let mut memo: HashMap<(usize, Vec<Pair>, usize), f64> = HashMap::new();
    fn walk(
        model: &Rmmdp,
        t: usize,
        left: &[Pair],
        s: usize,
        memo: &mut HashMap<(usize, Vec<Pair>, usize), f64>,
    ) -> f64 {
        if left.is_empty() {
            return 1.0;
        }
        // remaining steps cannot cover the remaining pairs
        if model.horizon() - t + 1 < left.len() {
            return 0.0;
        }
        let key = (t, left.to_vec(), s);
        if let Some(v) = memo.get(&key) {
            return *v;
        }
        let mut best: f64 = 0.0;
        for a in 0..model.num_actions() {
            let here = Pair::new(s, a);
            let mut rest = left.to_vec();
            if let Some(i) = rest.iter().position(|p| *p == here) {
                rest.remove(i);
            }
            let v = if rest.is_empty() {
                1.0
            } else if t == model.horizon() {
                0.0
            } else {
                model
                    .transition_row(s, a)
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| **p > 0.0)
                    .map(|(s2, p)| p * walk(model, t + 1, &rest, s2, memo))
                    .sum()
            };
            best = best.max(v);
        }
        memo.insert(key, best);
        best
    }
    Ok(model
        .init()
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > 0.0)
        .map(|(s, p)| p * walk(model, 1, x.pairs(), s, &mut memo))
        .sum())
}

/// `max |𝐌⁽¹⁾(x_ℐ, z_ℐ) − 𝐌⁽²⁾(x_ℐ, z_ℐ)|` over `keys`, nonempty index subsets
/// `ℐ` of size at most `degree`, and reward patterns.
pub fn moment_mismatch(m1: &Rmmdp, m2: &Rmmdp, keys: &[MomentKey], degree: usize) -> f64 {
    let zsz = m1.support_size();
    let mut delta: f64 = 0.0;
    for key in keys {
        let pairs = key.pairs();
        let n = pairs.len();
        for mask in 1u32..(1u32 << n) {
            let sub: Vec<Pair> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| pairs[i]).collect();
            if sub.len() > degree {
                continue;
            }
            for zi in 0..zsz.pow(sub.len() as u32) {
                let z = z_from_index(zi, sub.len(), zsz);
                let d = (moment_unchecked(m1, &sub, &z) - moment_unchecked(m2, &sub, &z)).abs();
                delta = delta.max(d);
            }
        }
    }
    delta
}

fn require_shared(m1: &Rmmdp, m2: &Rmmdp) -> Result<()> {
    if !m1.shares_dynamics(m2, 1e-12) {
        return Err(Error::InvalidArgument(
            "models must share states, actions, horizon, support, transitions and initial distribution".into(),
        ));
    }
    Ok(())
}

/// `Σ_{τ : x ∈ event} |ℙ⁽¹⁾_π(τ) − ℙ⁽²⁾_π(τ)|` by full enumeration.
pub fn tv_on_event(m1: &Rmmdp, m2: &Rmmdp, policy: &dyn Policy, event: &Event) -> Result<f64> {
    require_shared(m1, m2)?;
    check_budget("trajectories", trajectory_count(m1), ENUMERATION_BUDGET)?;
    let mut total = 0.0;
    let mut pairs = Vec::with_capacity(m1.horizon());
    for_each_trajectory(&[m1, m2], policy, |steps, _, joint| {
        pairs.clear();
        pairs.extend(steps.iter().map(Step::pair));
        if event(&pairs) {
            total += (joint[0] - joint[1]).abs();
        }
    });
    Ok(total)
}

/// `ℙ_π(x ∈ event)` under `model`.
pub fn event_probability(model: &Rmmdp, policy: &dyn Policy, event: &Event) -> Result<f64> {
    check_budget("trajectories", trajectory_count(model), ENUMERATION_BUDGET)?;
    let mut total = 0.0;
    let mut pairs = Vec::with_capacity(model.horizon());
    for_each_trajectory(&[model], policy, |steps, _, joint| {
        pairs.clear();
        pairs.extend(steps.iter().map(Step::pair));
        if event(&pairs) {
            total += joint[0];
        }
    });
    Ok(total)
}

/// Policies used by [`verify_tv_bound`]: every deterministic reactive
/// policy when there are at most 10⁴, otherwise 256 seeded random
/// history-dependent policies.
pub fn default_policies(model: &Rmmdp) -> Vec<Box<dyn Policy>> {
    let (s, a, h) = (model.num_states(), model.num_actions(), model.horizon());
    let n = ReactivePolicy::count(s, a, h);
    if n <= 10_000 {
        (0..n)
            .map(|i| Box::new(ReactivePolicy::from_index(i, s, a, h)) as Box<dyn Policy>)
            .collect()
    } else {
        (0..256)
            .map(|seed| {
                Box::new(HashedPolicy {
                    seed,
                    deterministic: false,
                }) as Box<dyn Policy>
            })
            .collect()
    }
}

/// A named event checked by [`verify_tv_bound`].
pub struct NamedEvent<'a> {
    pub name: String,
    pub event: Box<Event<'a>>,
}

impl<'a> NamedEvent<'a> {
    pub fn new(name: impl Into<String>, event: impl Fn(&[Pair]) -> bool + Sync + 'a) -> Self {
        NamedEvent {
            name: name.into(),
            event: Box::new(event),
        }
    }

    pub fn everything() -> Self {
        NamedEvent::new("all", |_| true)
    }

    /// `ℰ'_0 … ℰ'_{L+1}` of a level structure.
    pub fn levels(ls: &'a LevelStructure) -> Vec<Self> {
        (0..=ls.top() + 1)
            .map(|l| NamedEvent::new(format!("level{l}"), move |x: &[Pair]| ls.level_of(x) == l))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvCheck {
    pub policy: usize,
    pub event: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvEventSummary {
    pub sup_probability: f64,
    pub max_lhs: f64,
    pub rhs: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvReport {
    pub degree: usize,
    pub delta: f64,
    /// `(4HZ)^d`.
    pub factor: f64,
    pub checks: Vec<TvCheck>,
    pub events: BTreeMap<String, TvEventSummary>,
    pub violations: usize,
}

/// Checks `TV_π(event) ≤ sup_π ℙ⁽¹⁾_π(event) · (4HZ)^d · δ` for each policy
/// and event, with `δ` the mismatch over all keys of length `≤ d`.
pub fn verify_tv_bound(
    m1: &Rmmdp,
    m2: &Rmmdp,
    degree: usize,
    policies: &[Box<dyn Policy>],
    events: &[NamedEvent],
) -> Result<TvReport> {
    require_shared(m1, m2)?;
    let keys = crate::explore::all_keys(m1.num_states(), m1.num_actions(), degree);
    let delta = moment_mismatch(m1, m2, &keys, degree);
    let h = m1.horizon() as f64;
    let factor = (4.0 * h * m1.support_size() as f64).powi(degree as i32);
    let mut checks = Vec::new();
    let mut summary = BTreeMap::new();
    let mut violations = 0;
    for ev in events {
        let sup = sup_event_probability(m1, &*ev.event)?;
        let rhs = sup * factor * delta;
        let mut s = TvEventSummary {
            sup_probability: sup,
            max_lhs: 0.0,
            rhs,
            violations: 0,
        };
        for (i, pol) in policies.iter().enumerate() {
            let lhs = tv_on_event(m1, m2, pol.as_ref(), &*ev.event)?;
            // enumeration roundoff on identical distributions
            let pass = lhs <= rhs + 1e-12;
            if !pass {
                s.violations += 1;
                violations += 1;
            }
            s.max_lhs = s.max_lhs.max(lhs);
            checks.push(TvCheck {
                policy: i,
                event: ev.name.clone(),
                lhs,
                rhs,
                pass,
            });
        }
        summary.insert(ev.name.clone(), s);
    }
    Ok(TvReport {
        degree,
        delta,
        factor,
        checks,
        events: summary,
        violations,
    })
}

/// Default moment degree `min(2M − 1, H)`.
pub fn default_degree(contexts: usize, horizon: usize) -> usize {
    (2 * contexts - 1).min(horizon)
}

/// Exploration strategy that may adapt across episodes.
pub trait Strategy: Sync {
    fn action_probs(&self, past: &[Trajectory], history: &[Step], state: usize, out: &mut [f64]);
}

impl<S: Strategy + ?Sized> Strategy for Box<S> {
    fn action_probs(&self, past: &[Trajectory], history: &[Step], state: usize, out: &mut [f64]) {
        (**self).action_probs(past, history, state, out)
    }
}

/// Plays the same policy in every episode.
pub struct Repeat<P>(pub P);

impl<P: Policy> Strategy for Repeat<P> {
    fn action_probs(&self, _past: &[Trajectory], history: &[Step], state: usize, out: &mut [f64]) {
        self.0.action_probs(history, state, out);
    }
}

/// Adaptive strategy whose episode policy is a hashed function of all
/// previously observed trajectories.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveHashed {
    pub seed: u64,
}

impl Strategy for AdaptiveHashed {
    fn action_probs(&self, past: &[Trajectory], history: &[Step], state: usize, out: &mut [f64]) {
        let mut seed = self.seed;
        for tau in past {
            for st in &tau.steps {
                seed = crate::rng::mix64(seed ^ (st.state as u64) << 3 ^ (st.action as u64) << 19 ^ (st.reward as u64) << 37);
            }
        }
        HashedPolicy {
            seed,
            deterministic: false,
        }
        .action_probs(history, state, out);
    }
}

/// `KL(ℙ⁽¹⁾(·|x) ‖ ℙ⁽²⁾(·|x))` between reward-sequence laws given `x_{1:H}`.
pub fn sequence_kl(m1: &Rmmdp, m2: &Rmmdp, x: &[Pair]) -> Result<f64> {
    let zsz = m1.support_size();
    let mut kl = 0.0;
    for zi in 0..zsz.pow(x.len() as u32) {
        let z = z_from_index(zi, x.len(), zsz);
        let p = moment_unchecked(m1, x, &z);
        if p == 0.0 {
            continue;
        }
        let q = moment_unchecked(m2, x, &z);
        if q == 0.0 {
            return Err(Error::InfiniteKl(format!(
                "sequence {} has reward pattern {z:?} impossible under the second model",
                MomentKey::from_pairs(x.to_vec())
            )));
        }
        kl += p * (p / q).ln();
    }
    Ok(kl)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlIdentity {
    pub lhs: f64,
    pub rhs: f64,
    pub diff: f64,
    /// `E⁽¹⁾[N_x(K)]` for every sequence with positive expected count.
    pub expected_counts: Vec<(Vec<Pair>, f64)>,
}

struct KlWalker<'a> {
    m1: &'a Rmmdp,
    m2: &'a Rmmdp,
    strategy: &'a dyn Strategy,
    episodes: usize,
    past: Vec<Trajectory>,
    steps: Vec<Step>,
    counts: BTreeMap<Vec<Pair>, f64>,
    rhs: f64,
    infinite: Option<String>,
}

impl KlWalker<'_> {
    /// `p1`, `p2` are the tuple probabilities of the completed episodes;
    /// `c1`, `c2` the per-context products of the running episode including
    /// the shared factors.
    fn step(&mut self, s: usize, p1: f64, p2: f64, c1: &[f64], c2: &[f64]) {
        let (m1, m2) = (self.m1, self.m2);
        let mut probs = vec![0.0; m1.num_actions()];
        self.strategy.action_probs(&self.past, &self.steps, s, &mut probs);
        for (a, pa) in probs.iter().enumerate() {
            if *pa <= 0.0 {
                continue;
            }
            for z in 0..m1.support_size() {
                let n1: Vec<f64> = c1.iter().enumerate().map(|(m, c)| c * pa * m1.reward_row(m, s, a)[z]).collect();
                let n2: Vec<f64> = c2.iter().enumerate().map(|(m, c)| c * pa * m2.reward_row(m, s, a)[z]).collect();
                if n1.iter().all(|v| *v == 0.0) {
                    continue;
                }
                self.steps.push(Step { state: s, action: a, reward: z });
                if self.steps.len() == m1.horizon() {
                    let q1 = p1 * n1.iter().sum::<f64>();
                    let q2 = p2 * n2.iter().sum::<f64>();
                    let x: Vec<Pair> = self.steps.iter().map(Step::pair).collect();
                    *self.counts.entry(x).or_default() += q1;
                    let tau = Trajectory::new(std::mem::take(&mut self.steps));
                    self.past.push(tau);
                    if self.past.len() == self.episodes {
                        if q2 == 0.0 {
                            self.infinite.get_or_insert_with(|| format!("{:?}", self.past));
                        } else {
                            self.rhs += q1 * (q1 / q2).ln();
                        }
                    } else {
                        self.episode(q1, q2);
                    }
                    self.steps = self.past.pop().expect("pushed above").steps;
                } else {
                    for (s2, pt) in m1.transition_row(s, a).iter().enumerate() {
                        if *pt > 0.0 {
                            let t1: Vec<f64> = n1.iter().map(|v| v * pt).collect();
                            let t2: Vec<f64> = n2.iter().map(|v| v * pt).collect();
                            self.step(s2, p1, p2, &t1, &t2);
                        }
                    }
                }
                self.steps.pop();
            }
        }
    }

    fn episode(&mut self, p1: f64, p2: f64) {
        let (m1, m2) = (self.m1, self.m2);
        for (s, ps) in m1.init().iter().enumerate() {
            if *ps > 0.0 {
                let c1: Vec<f64> = m1.weights().iter().map(|w| w * ps).collect();
                let c2: Vec<f64> = m2.weights().iter().map(|w| w * ps).collect();
                self.step(s, p1, p2, &c1, &c2);
            }
        }
    }
}

/// Hides the current episode's rewards from the wrapped strategy. Earlier
/// episodes stay fully visible.
pub struct RewardBlind<S>(pub S);

impl<S: Strategy> Strategy for RewardBlind<S> {
    fn action_probs(&self, past: &[Trajectory], history: &[Step], state: usize, out: &mut [f64]) {
        let masked: Vec<Step> = history.iter().map(|st| Step { reward: 0, ..*st }).collect();
        self.0.action_probs(past, &masked, state, out);
    }
}

/// Both sides of `Σ_x E⁽¹⁾[N_x(K)]·KL(ℙ⁽¹⁾(·|x) ‖ ℙ⁽²⁾(·|x)) =
/// KL(ℙ⁽¹⁾(τ^{1:K}) ‖ ℙ⁽²⁾(τ^{1:K}))`. The right side enumerates all
/// `K`-tuples of trajectories; the left side uses moment values.
///
/// The equality needs `r^k | x^k ~ ℙ(·|x^k)`, which holds when actions
/// inside an episode ignore that episode's rewards (see [`RewardBlind`]).
/// With `H ≥ 2` and reward-reactive play the two sides generally differ
/// and `diff` measures by how much.
pub fn kl_identity(m1: &Rmmdp, m2: &Rmmdp, strategy: &dyn Strategy, episodes: usize) -> Result<KlIdentity> {
    require_shared(m1, m2)?;
    if episodes == 0 {
        return Err(Error::InvalidArgument("need at least one episode".into()));
    }
    let tuples = saturating_pow(trajectory_count(m1).min(u128::from(u64::MAX)) as usize, episodes);
    check_budget("trajectory tuples", tuples, ENUMERATION_BUDGET)?;
    let mut walker = KlWalker {
        m1,
        m2,
        strategy,
        episodes,
        past: Vec::with_capacity(episodes),
        steps: Vec::with_capacity(m1.horizon()),
        counts: BTreeMap::new(),
        rhs: 0.0,
        infinite: None,
    };
    walker.episode(1.0, 1.0);
    if let Some(t) = walker.infinite {
        return Err(Error::InfiniteKl(format!("trajectory tuple {t} has probability 0 under the second model")));
    }
    let mut lhs = 0.0;
    for (x, n) in &walker.counts {
        lhs += n * sequence_kl(m1, m2, x)?;
    }
    Ok(KlIdentity {
        lhs,
        rhs: walker.rhs,
        diff: (lhs - walker.rhs).abs(),
        expected_counts: walker.counts.into_iter().collect(),
    })
}
