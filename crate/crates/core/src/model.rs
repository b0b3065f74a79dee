//! Reward-mixing MDP representation, exact moments and belief arithmetic.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Policy;

/// Simplex tolerance used by validation and renormalization on load.
pub const PROB_TOL: f64 = 1e-12;

/// Finite, bounded reward support. Rewards elsewhere are referred to by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSupport {
    values: Vec<f64>,
}

impl RewardSupport {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("reward support is empty".into()));
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() || v.abs() > 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "reward value {v} at index {i} is outside [-1, 1]"
                )));
            }
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "reward support must be strictly increasing".into(),
            ));
        }
        Ok(RewardSupport { values })
    }

    /// The binary support `{0, 1}`.
    pub fn binary() -> Self {
        RewardSupport {
            values: vec![0.0, 1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, z: usize) -> f64 {
        self.values[z]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// A state-action pair `x = (s, a)`. Ordered lexicographically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub state: usize,
    pub action: usize,
}

impl Pair {
    pub fn new(state: usize, action: usize) -> Self {
        Pair { state, action }
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.state, self.action)
    }
}

/// Canonically ordered sequence of state-action pairs indexing a moment.
///
/// Moments are invariant under joint permutation of pairs and rewards, so a
/// key only needs to remember the multiset of pairs; it is stored sorted.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MomentKey(Vec<Pair>);

impl MomentKey {
    /// Builds a key from pairs in any order.
    pub fn from_pairs(mut pairs: Vec<Pair>) -> Self {
        pairs.sort();
        MomentKey(pairs)
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Parses `"s,a|s,a|..."`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for part in text.split('|') {
            let (s, a) = part
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("bad moment key component {part:?}")))?;
            let s = s
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad state in {part:?}")))?;
            let a = a
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad action in {part:?}")))?;
            pairs.push(Pair::new(s, a));
        }
        Ok(MomentKey::from_pairs(pairs))
    }
}

impl fmt::Display for MomentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

/// One step of an episode as seen by a policy: no latent information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: usize,
}

impl Step {
    pub fn pair(&self) -> Pair {
        Pair::new(self.state, self.action)
    }
}

/// A full episode. `latent` is recorded for diagnostics only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<usize>,
}

impl Trajectory {
    pub fn new(steps: Vec<Step>) -> Self {
        Trajectory {
            steps,
            latent: None,
        }
    }

    pub fn pairs(&self) -> Vec<Pair> {
        self.steps.iter().map(Step::pair).collect()
    }

    pub fn rewards(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.reward).collect()
    }
}

/// Posterior over latent contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief(Vec<f64>);

impl Belief {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidArgument("belief has a negative entry".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidArgument(format!("belief sums to {total}")));
        }
        Ok(Belief(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Reward-mixing MDP with shared transitions and `M` latent reward models.
///
/// All probability arrays are flattened row-major:
/// `transition[s][a][s']`, `init[s]`, `weights[m]`, `rewards[m][s][a][z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rmmdp {
    states: usize,
    actions: usize,
    horizon: usize,
    support: RewardSupport,
    transition: Vec<f64>,
    init: Vec<f64>,
    weights: Vec<f64>,
    rewards: Vec<f64>,
}

impl Rmmdp {
    /// Assembles a model after checking only that array sizes agree.
    /// Use [`validate_model`] or [`Rmmdp::validated`] for the simplex checks.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        states: usize,
        actions: usize,
        horizon: usize,
        support: RewardSupport,
        transition: Vec<f64>,
        init: Vec<f64>,
        weights: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        if states == 0 || actions == 0 || horizon == 0 {
            return Err(Error::Dimension(
                "states, actions and horizon must all be positive".into(),
            ));
        }
        if weights.is_empty() {
            return Err(Error::Dimension("at least one latent context is required".into()));
        }
        let z = support.len();
        let m = weights.len();
        let expect = |name: &str, got: usize, want: usize| -> Result<()> {
            if got != want {
                Err(Error::Dimension(format!("{name} has {got} entries, expected {want}")))
            } else {
                Ok(())
            }
        };
        expect("transition", transition.len(), states * actions * states)?;
        expect("init", init.len(), states)?;
        expect("rewards", rewards.len(), m * states * actions * z)?;
        Ok(Rmmdp {
            states,
            actions,
            horizon,
            support,
            transition,
            init,
            weights,
            rewards,
        })
    }

    /// Like [`Rmmdp::from_parts`], but renormalizes rows that are within
    /// [`PROB_TOL`] of the simplex and rejects anything else.
    #[allow(clippy::too_many_arguments)]
    pub fn validated(
        states: usize,
        actions: usize,
        horizon: usize,
        support: RewardSupport,
        transition: Vec<f64>,
        init: Vec<f64>,
        weights: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        let mut model = Self::from_parts(
            states, actions, horizon, support, transition, init, weights, rewards,
        )?;
        let violations = validate_model(&model);
        if !violations.is_empty() {
            return Err(Error::InvalidModel(
                violations.into_iter().map(|v| v.description).collect(),
            ));
        }
        model.renormalize();
        Ok(model)
    }

    fn renormalize(&mut self) {
        let s = self.states;
        for row in self.transition.chunks_mut(s) {
            normalize_in_place(row);
        }
        normalize_in_place(&mut self.init);
        normalize_in_place(&mut self.weights);
        let z = self.support.len();
        for row in self.rewards.chunks_mut(z) {
            normalize_in_place(row);
        }
    }

    pub fn num_states(&self) -> usize {
        self.states
    }

    pub fn num_actions(&self) -> usize {
        self.actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_contexts(&self) -> usize {
        self.weights.len()
    }

    pub fn support(&self) -> &RewardSupport {
        &self.support
    }

    pub fn support_size(&self) -> usize {
        self.support.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.states * self.actions
    }

    pub fn pair_index(&self, p: Pair) -> usize {
        p.state * self.actions + p.action
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.states;
        let start = (s * self.actions + a) * n;
        &self.transition[start..start + n]
    }

    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition_row(s, a)[next]
    }

    pub fn init(&self) -> &[f64] {
        &self.init
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn reward_row(&self, m: usize, s: usize, a: usize) -> &[f64] {
        let z = self.support.len();
        let start = ((m * self.states + s) * self.actions + a) * z;
        &self.rewards[start..start + z]
    }

    pub fn reward_prob(&self, m: usize, p: Pair, z: usize) -> f64 {
        self.reward_row(m, p.state, p.action)[z]
    }

    pub fn transitions_flat(&self) -> &[f64] {
        &self.transition
    }

    pub fn rewards_flat(&self) -> &[f64] {
        &self.rewards
    }

    /// Same model with a different latent part (weights and reward tables).
    pub fn with_latent(&self, weights: Vec<f64>, rewards: Vec<f64>) -> Result<Self> {
        Self::from_parts(
            self.states,
            self.actions,
            self.horizon,
            self.support.clone(),
            self.transition.clone(),
            self.init.clone(),
            weights,
            rewards,
        )
    }

    /// Same model with a different horizon.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        Self::from_parts(
            self.states,
            self.actions,
            horizon,
            self.support.clone(),
            self.transition.clone(),
            self.init.clone(),
            self.weights.clone(),
            self.rewards.clone(),
        )
    }

    /// True when both models have the same transition kernel and initial
    /// distribution (entrywise within `tol`).
    pub fn shares_dynamics(&self, other: &Rmmdp, tol: f64) -> bool {
        self.states == other.states
            && self.actions == other.actions
            && self.horizon == other.horizon
            && self.support == other.support
            && close_all(&self.transition, &other.transition, tol)
            && close_all(&self.init, &other.init, tol)
    }

    /// Prior predictive reward distribution at `p` under belief `b`.
    pub fn predictive(&self, b: &[f64], p: Pair, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (m, bm) in b.iter().enumerate() {
            if *bm == 0.0 {
                continue;
            }
            let row = self.reward_row(m, p.state, p.action);
            for (o, r) in out.iter_mut().zip(row) {
                *o += bm * r;
            }
        }
    }
}

fn close_all(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Rows already at roundoff distance from 1 are left untouched so that a
/// save/load cycle reproduces them bit for bit.
fn normalize_in_place(row: &mut [f64]) {
    row.iter_mut().filter(|v| **v < 0.0).for_each(|v| *v = 0.0);
    let total: f64 = row.iter().sum();
    if total > 0.0 && (total - 1.0).abs() > 1e-14 {
        row.iter_mut().for_each(|v| *v /= total);
    }
}

/// A single broken invariant found by [`validate_model`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub description: String,
    pub residual: f64,
}

fn check_simplex(row: &[f64], label: impl Fn() -> String, out: &mut Vec<Violation>) {
    for (i, p) in row.iter().enumerate() {
        if !p.is_finite() || *p < -PROB_TOL || *p > 1.0 + PROB_TOL {
            out.push(Violation {
                description: format!("{} entry {i} = {p} outside [0,1]", label()),
                residual: if *p < 0.0 { -*p } else { *p - 1.0 },
            });
        }
    }
    let total: f64 = row.iter().sum();
    let residual = total - 1.0;
    if !(residual.abs() <= PROB_TOL) {
        out.push(Violation {
            description: format!("{} sum {}", label(), fmt_sum(total)),
            residual,
        });
    }
}

fn fmt_sum(total: f64) -> String {
    let rounded = (total * 1e12).round() / 1e12;
    format!("{rounded}")
}

/// Lists every broken simplex invariant. Empty iff the model is valid.
pub fn validate_model(model: &Rmmdp) -> Vec<Violation> {
    let mut out = Vec::new();
    let (ns, na, nz) = (model.states, model.actions, model.support.len());
    for s in 0..ns {
        for a in 0..na {
            check_simplex(
                model.transition_row(s, a),
                || format!("transition (s={s},a={a})"),
                &mut out,
            );
        }
    }
    check_simplex(&model.init, || "initial distribution".to_string(), &mut out);
    check_simplex(&model.weights, || "weights".to_string(), &mut out);
    for m in 0..model.num_contexts() {
        for s in 0..ns {
            for a in 0..na {
                check_simplex(
                    model.reward_row(m, s, a),
                    || format!("rewards (m={m},s={s},a={a})"),
                    &mut out,
                );
            }
        }
    }
    debug_assert_eq!(model.rewards.len(), model.num_contexts() * ns * na * nz);
    out
}

/// `Σ_m w_m Π_i μ_m(x_i, z_i)`. The empty product is 1.
pub fn moment_value(model: &Rmmdp, pairs: &[Pair], z: &[usize]) -> Result<f64> {
    if pairs.len() != z.len() {
        return Err(Error::InvalidArgument(format!(
            "moment key has length {} but reward sequence has length {}",
            pairs.len(),
            z.len()
        )));
    }
    for (p, zi) in pairs.iter().zip(z) {
        if p.state >= model.states || p.action >= model.actions || *zi >= model.support.len() {
            return Err(Error::InvalidArgument(format!(
                "moment index ({},{};{}) out of range",
                p.state, p.action, zi
            )));
        }
    }
    Ok(moment_unchecked(model, pairs, z))
}

pub(crate) fn moment_unchecked(model: &Rmmdp, pairs: &[Pair], z: &[usize]) -> f64 {
    model
        .weights
        .iter()
        .enumerate()
        .map(|(m, w)| {
            let mut prod = *w;
            for (p, zi) in pairs.iter().zip(z) {
                if prod == 0.0 {
                    break;
                }
                prod *= model.reward_prob(m, *p, *zi);
            }
            prod
        })
        .sum()
}

/// Stable lexicographic sort of the pairs with `z` permuted alongside; inside
/// blocks of identical pairs the rewards are additionally sorted ascending.
pub fn canonicalize(pairs: &[Pair], z: &[usize]) -> Result<(MomentKey, Vec<usize>)> {
    if pairs.len() != z.len() {
        return Err(Error::InvalidArgument(
            "pairs and rewards must have equal length".into(),
        ));
    }
    let mut joint: Vec<(Pair, usize)> = pairs.iter().copied().zip(z.iter().copied()).collect();
    // sorting on (pair, reward) is the stable pair sort followed by the tie-block sort
    joint.sort();
    let (p, r): (Vec<Pair>, Vec<usize>) = joint.into_iter().unzip();
    Ok((MomentKey(p), r))
}

/// Stable pair sort with rewards co-permuted; ties keep their time order.
pub(crate) fn sort_pairs_stable(pairs: &[Pair], z: &[usize]) -> (MomentKey, Vec<usize>) {
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.sort_by_key(|&i| pairs[i]);
    let p = idx.iter().map(|&i| pairs[i]).collect();
    let r = idx.iter().map(|&i| z[i]).collect();
    (MomentKey(p), r)
}

/// Bayes posterior over contexts after observing reward `z` at `pair`.
pub fn belief_update(model: &Rmmdp, b: &Belief, pair: Pair, z: usize) -> Result<Belief> {
    let mut next = b.0.clone();
    bayes_in_place(model, &mut next, pair, z)?;
    Ok(Belief(next))
}

pub(crate) fn bayes_in_place(model: &Rmmdp, b: &mut [f64], pair: Pair, z: usize) -> Result<()> {
    let mut total = 0.0;
    for (m, bm) in b.iter_mut().enumerate() {
        *bm *= model.reward_prob(m, pair, z);
        total += *bm;
    }
    if !(total > 0.0) {
        return Err(Error::ImpossibleObservation {
            state: pair.state,
            action: pair.action,
            reward: z,
        });
    }
    b.iter_mut().for_each(|v| *v /= total);
    Ok(())
}

/// Probability of a full trajectory under `policy`:
/// `ν(s_1) Π T(s_{t+1}|s_t,a_t) Π π(a_t|h_t) · M(x_{1:H}, r_{1:H})`.
pub fn trajectory_probability(model: &Rmmdp, policy: &dyn Policy, tau: &Trajectory) -> f64 {
    let steps = &tau.steps;
    if steps.len() != model.horizon {
        return 0.0;
    }
    let mut prob = model.init[steps[0].state];
    let mut probs = vec![0.0; model.actions];
    for (t, step) in steps.iter().enumerate() {
        if prob == 0.0 {
            return 0.0;
        }
        policy.action_probs(&steps[..t], step.state, &mut probs);
        prob *= probs[step.action];
        if let Some(next) = steps.get(t + 1) {
            prob *= model.transition(step.state, step.action, next.state);
        }
    }
    let pairs: Vec<Pair> = steps.iter().map(Step::pair).collect();
    let z: Vec<usize> = steps.iter().map(|s| s.reward).collect();
    prob * moment_unchecked(model, &pairs, &z)
}
