//! Optimistic pure exploration of higher-order reward moments.
//!
//! The explorer plays greedily with respect to an upper-confidence value
//! `Q̃` of the augmented MDP. The bonus for closing a collection of pairs
//! `x_c` is `min(1, √(ι_c / n(x_c)))`, and every step also carries a
//! transition bonus `min(1, √(ι_T / n_T(s,a)))`. Values are clipped at 1.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::env::{run_augmented_episode, AugmentedAction, AugmentedState, EpisodeRecord, EpisodicEnv, Mark};
use crate::error::{Error, Result};
use crate::model::{moment_unchecked, MomentKey, Pair, RewardSupport, Rmmdp, Trajectory};

/// Problem dimensions visible to the explorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub states: usize,
    pub actions: usize,
    pub support: usize,
    pub horizon: usize,
}

impl Dims {
    pub fn of_model(m: &Rmmdp) -> Self {
        Dims {
            states: m.num_states(),
            actions: m.num_actions(),
            support: m.support_size(),
            horizon: m.horizon(),
        }
    }

    pub fn of_env<E: EpisodicEnv + ?Sized>(env: &E) -> Self {
        Dims {
            states: env.num_states(),
            actions: env.num_actions(),
            support: env.support_size(),
            horizon: env.horizon(),
        }
    }

    pub fn pairs(&self) -> usize {
        self.states * self.actions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplorationConfig {
    /// Highest moment degree `d`.
    pub degree: usize,
    pub epsilon: f64,
    pub eta: f64,
    pub max_episodes: u64,
    /// Recompute `Q̃` every `batch` episodes.
    pub batch: u64,
    pub c_c: f64,
    pub c_t: f64,
    pub c_nu: f64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        ExplorationConfig {
            degree: 2,
            epsilon: 0.1,
            eta: 0.1,
            max_episodes: 10_000,
            batch: 1,
            c_c: 2.0,
            c_t: 2.0,
            c_nu: 2.0,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.degree < 1 {
            bad.push("degree must be >= 1".to_string());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            bad.push(format!("epsilon {} not in (0,1)", self.epsilon));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            bad.push(format!("eta {} not in (0,1)", self.eta));
        }
        if self.max_episodes < 1 {
            bad.push("max_episodes must be >= 1".to_string());
        }
        if self.batch < 1 {
            bad.push("batch must be >= 1".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(bad.join("; ")))
        }
    }

    /// `ι_c = c_c · d · ln(2 S A Z K / η)`
    pub fn iota_c(&self, dims: Dims) -> f64 {
        let k = self.max_episodes as f64;
        self.c_c
            * self.degree as f64
            * (2.0 * (dims.pairs() * dims.support) as f64 * k / self.eta).ln()
    }

    /// `ι_T = c_T · S · ln(2 S A K / η)`
    pub fn iota_t(&self, dims: Dims) -> f64 {
        let k = self.max_episodes as f64;
        self.c_t * dims.states as f64 * (2.0 * dims.pairs() as f64 * k / self.eta).ln()
    }

    /// `ι_ν = c_ν · S · ln(2 K / η)`
    pub fn iota_nu(&self, dims: Dims) -> f64 {
        let k = self.max_episodes as f64;
        self.c_nu * dims.states as f64 * (2.0 * k / self.eta).ln()
    }

    /// Number of levels `L = ⌈log₄(K / (SA)^d / ι_c)⌉`, at least 1.
    pub fn levels(&self, dims: Dims) -> u32 {
        let n0 = self.max_episodes as f64 / (dims.pairs() as f64).powi(self.degree as i32);
        let l = (n0 / self.iota_c(dims)).log(4.0).ceil();
        if l.is_finite() && l >= 1.0 {
            l as u32
        } else {
            1
        }
    }

    /// Stopping threshold `ε_pe = ε / (H · L · (4 H² Z)^d)`.
    pub fn epsilon_pe(&self, dims: Dims) -> f64 {
        let h = dims.horizon as f64;
        let base = 4.0 * h * h * dims.support as f64;
        self.epsilon / (h * self.levels(dims) as f64 * base.powi(self.degree as i32))
    }
}

/// Index of `z ∈ Z^q` in row-major order (first reward most significant).
pub fn z_index(z: &[usize], support: usize) -> usize {
    z.iter().fold(0, |acc, zi| acc * support + zi)
}

/// Inverse of [`z_index`].
pub fn z_from_index(mut index: usize, len: usize, support: usize) -> Vec<usize> {
    let mut z = vec![0; len];
    for slot in z.iter_mut().rev() {
        *slot = index % support;
        index /= support;
    }
    z
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentEntry {
    pub count: u64,
    /// Empirical distribution over `Z^len`, indexed by [`z_index`].
    pub probs: Vec<f64>,
}

/// Sample counts `n(x)` and empirical reward-sequence distributions `M_n(x, ·)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MomentTable {
    support: usize,
    entries: BTreeMap<MomentKey, MomentEntry>,
}

impl MomentTable {
    pub fn new(support: usize) -> Self {
        MomentTable {
            support,
            entries: BTreeMap::new(),
        }
    }

    pub fn support(&self) -> usize {
        self.support
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Running-average update `M_n ← (1 - 1/n) M_n + 1{z = z_c}/n`.
    pub fn record(&mut self, key: MomentKey, z: &[usize]) {
        let width = self.support.pow(key.len() as u32);
        let entry = self.entries.entry(key).or_insert_with(|| MomentEntry {
            count: 0,
            probs: vec![0.0; width],
        });
        entry.count += 1;
        let n = entry.count as f64;
        let hit = z_index(z, self.support);
        for (i, p) in entry.probs.iter_mut().enumerate() {
            *p = (1.0 - 1.0 / n) * *p + if i == hit { 1.0 / n } else { 0.0 };
        }
    }

    pub fn insert(&mut self, key: MomentKey, entry: MomentEntry) -> Result<()> {
        let width = self.support.pow(key.len() as u32);
        if entry.probs.len() != width {
            return Err(Error::Dimension(format!(
                "entry for {key} has {} probabilities, expected {width}",
                entry.probs.len()
            )));
        }
        self.entries.insert(key, entry);
        Ok(())
    }

    pub fn count(&self, key: &MomentKey) -> u64 {
        self.entries.get(key).map_or(0, |e| e.count)
    }

    pub fn get(&self, key: &MomentKey) -> Option<&MomentEntry> {
        self.entries.get(key)
    }

    pub fn empirical(&self, key: &MomentKey, z: &[usize]) -> Option<f64> {
        self.entries
            .get(key)
            .map(|e| e.probs[z_index(z, self.support)])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&MomentKey, &MomentEntry)> {
        self.entries.iter()
    }

    pub fn max_degree(&self) -> usize {
        self.entries.keys().map(MomentKey::len).max().unwrap_or(0)
    }

    /// Table holding exact moments of `model` for `keys`, each with count `n`.
    pub fn exact(model: &Rmmdp, keys: impl IntoIterator<Item = MomentKey>, n: u64) -> Self {
        let z = model.support_size();
        let mut table = MomentTable::new(z);
        for key in keys {
            let width = z.pow(key.len() as u32);
            let probs = (0..width)
                .map(|i| moment_unchecked(model, key.pairs(), &z_from_index(i, key.len(), z)))
                .collect();
            table.entries.insert(key, MomentEntry { count: n, probs });
        }
        table
    }
}

/// Every canonical key (sorted multiset of pairs) of length `1..=degree`.
pub fn all_keys(states: usize, actions: usize, degree: usize) -> Vec<MomentKey> {
    let pairs: Vec<Pair> = (0..states)
        .flat_map(|s| (0..actions).map(move |a| Pair::new(s, a)))
        .collect();
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(pairs: &[Pair], start: usize, left: usize, cur: &mut Vec<Pair>, out: &mut Vec<MomentKey>) {
        if !cur.is_empty() {
            out.push(MomentKey::from_pairs(cur.clone()));
        }
        if left == 0 {
            return;
        }
        for i in start..pairs.len() {
            cur.push(pairs[i]);
            rec(pairs, i, left - 1, cur, out);
            cur.pop();
        }
    }
    rec(&pairs, 0, degree, &mut cur, &mut out);
    out.sort();
    out
}

/// Empirical transition kernel and initial distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionEstimate {
    pub states: usize,
    pub actions: usize,
    /// `counts[s][a][s']`, flattened.
    pub counts: Vec<u64>,
    /// `n_T(s,a)`.
    pub visits: Vec<u64>,
    pub init_counts: Vec<u64>,
    /// Episode counter `k`.
    pub episodes: u64,
}

impl TransitionEstimate {
    pub fn new(states: usize, actions: usize) -> Self {
        TransitionEstimate {
            states,
            actions,
            counts: vec![0; states * actions * states],
            visits: vec![0; states * actions],
            init_counts: vec![0; states],
            episodes: 0,
        }
    }

    /// Adds one episode; `final_state` is the state reached after step `H`.
    pub fn record(&mut self, trajectory: &Trajectory, final_state: usize) {
        let steps = &trajectory.steps;
        if let Some(first) = steps.first() {
            self.init_counts[first.state] += 1;
        }
        for (t, step) in steps.iter().enumerate() {
            let next = steps.get(t + 1).map_or(final_state, |n| n.state);
            let sa = step.state * self.actions + step.action;
            self.visits[sa] += 1;
            self.counts[sa * self.states + next] += 1;
        }
        self.episodes += 1;
    }

    pub fn visited(&self, s: usize, a: usize) -> bool {
        self.visits[s * self.actions + a] > 0
    }

    /// `T̂(·|s,a)`; uniform for unvisited pairs.
    pub fn row(&self, s: usize, a: usize) -> Vec<f64> {
        let sa = s * self.actions + a;
        let n = self.visits[sa];
        if n == 0 {
            return vec![1.0 / self.states as f64; self.states];
        }
        self.counts[sa * self.states..(sa + 1) * self.states]
            .iter()
            .map(|c| *c as f64 / n as f64)
            .collect()
    }

    /// `ν̂`; uniform before the first episode.
    pub fn init(&self) -> Vec<f64> {
        if self.episodes == 0 {
            return vec![1.0 / self.states as f64; self.states];
        }
        self.init_counts
            .iter()
            .map(|c| *c as f64 / self.episodes as f64)
            .collect()
    }

    /// Flattened `T̂[s][a][s']`.
    pub fn kernel(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.counts.len());
        for s in 0..self.states {
            for a in 0..self.actions {
                out.extend(self.row(s, a));
            }
        }
        out
    }
}

fn bonus(iota: f64, n: u64) -> f64 {
    if n == 0 {
        1.0
    } else {
        (iota / n as f64).sqrt().min(1.0)
    }
}

/// Augmented state keyed by the multiset of collected pairs (values do not
/// depend on the slot order); closed collections are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum AugKey {
    /// `code = Σ_i (p_i + 1)·B^i` over the sorted pair indices, `B = SA + 1`.
    Active { len: u32, code: u64 },
    Closed,
}

const EMPTY: AugKey = AugKey::Active { len: 0, code: 0 };

/// Upper-confidence values `Q̃`, `Ṽ` computed from a frozen copy of the
/// counts. States are expanded lazily from `(1, ∅, s)`.
#[derive(Debug, Clone)]
pub struct OptimisticValues {
    degree: usize,
    horizon: usize,
    states: usize,
    actions: usize,
    base: u64,
    iota_c: f64,
    counts: HashMap<u64, u64>,
    t_hat: Vec<Vec<f64>>,
    q_t: Vec<f64>,
    memo: HashMap<(usize, AugKey, usize), (f64, AugmentedAction)>,
    /// `Ṽ_0`.
    pub v0: f64,
}

/// Whether multisets of `degree` pair indices can be encoded in a `u64`.
pub fn encodable(dims: Dims, degree: usize) -> bool {
    (0..degree)
        .try_fold(1u64, |acc, _| acc.checked_mul(dims.pairs() as u64 + 1))
        .is_some()
}

fn encode(base: u64, sorted: &[usize]) -> u64 {
    sorted.iter().rev().fold(0, |acc, p| acc * base + *p as u64 + 1)
}

fn decode(base: u64, mut code: u64, out: &mut Vec<usize>) {
    out.clear();
    while code > 0 {
        out.push((code % base - 1) as usize);
        code /= base;
    }
}

/// Backward induction for `Q̃` and `Ṽ_0` from the current tables.
///
/// Panics when `(SA + 1)^d` does not fit in a `u64`; see [`encodable`].
pub fn compute_optimistic(
    table: &MomentTable,
    trans: &TransitionEstimate,
    cfg: &ExplorationConfig,
    dims: Dims,
) -> OptimisticValues {
    assert!(encodable(dims, cfg.degree), "moment degree too large for the key encoding");
    let iota_t = cfg.iota_t(dims);
    let mut t_hat = Vec::with_capacity(dims.pairs());
    let mut q_t = Vec::with_capacity(dims.pairs());
    for s in 0..dims.states {
        for a in 0..dims.actions {
            t_hat.push(trans.row(s, a));
            q_t.push(bonus(iota_t, trans.visits[s * dims.actions + a]));
        }
    }
    let base = dims.pairs() as u64 + 1;
    let mut idx = Vec::new();
    let counts = table
        .iter()
        .map(|(k, e)| {
            idx.clear();
            idx.extend(k.pairs().iter().map(|p| p.state * dims.actions + p.action));
            (encode(base, &idx), e.count)
        })
        .collect();
    let mut values = OptimisticValues {
        degree: cfg.degree,
        horizon: dims.horizon,
        states: dims.states,
        actions: dims.actions,
        base,
        iota_c: cfg.iota_c(dims),
        counts,
        t_hat,
        q_t,
        memo: HashMap::new(),
        v0: 0.0,
    };
    let k = trans.episodes.max(1) as f64;
    let nu = trans.init();
    let mut v0 = (cfg.iota_nu(dims) / k).sqrt();
    for (s, p) in nu.iter().enumerate() {
        if *p > 0.0 {
            v0 += p * values.value(1, EMPTY, s).0;
        }
    }
    values.v0 = v0;
    values
}

impl OptimisticValues {
    fn key_of(&self, state: &AugmentedState) -> AugKey {
        if state.is_closed() {
            return AugKey::Closed;
        }
        let mut idx: Vec<usize> = state
            .filled()
            .iter()
            .map(|p| p.state * self.actions + p.action)
            .collect();
        idx.sort_unstable();
        AugKey::Active {
            len: idx.len() as u32,
            code: encode(self.base, &idx),
        }
    }

    /// Code of the multiset `code ∪ {p}`.
    fn extend(&self, code: u64, p: usize) -> u64 {
        let mut idx = Vec::with_capacity(self.degree);
        decode(self.base, code, &mut idx);
        let at = idx.partition_point(|q| *q <= p);
        idx.insert(at, p);
        encode(self.base, &idx)
    }

    fn pairs_of(&self, code: u64) -> Vec<Pair> {
        let mut idx = Vec::new();
        decode(self.base, code, &mut idx);
        idx.iter().map(|i| Pair::new(i / self.actions, i % self.actions)).collect()
    }

    /// Next augmented key, the closed collection (if any) and its bonus.
    fn transition(&self, key: AugKey, s: usize, a: usize, mark: Mark) -> (AugKey, Option<u64>, f64) {
        match key {
            AugKey::Closed => (AugKey::Closed, None, 0.0),
            AugKey::Active { len, code } => match mark {
                Mark::Skip => (key, None, 0.0),
                Mark::Include | Mark::Commit => {
                    let next = self.extend(code, s * self.actions + a);
                    if mark == Mark::Commit || len as usize + 1 == self.degree {
                        let n = self.counts.get(&next).copied().unwrap_or(0);
                        (AugKey::Closed, Some(next), bonus(self.iota_c, n))
                    } else {
                        (AugKey::Active { len: len + 1, code: next }, None, 0.0)
                    }
                }
            },
        }
    }

    /// Clipped `Q̃` and the unclipped sum it was clipped from.
    fn q_key(&mut self, t: usize, key: AugKey, s: usize, a: usize, mark: Mark) -> (f64, f64) {
        let (next, _, q_c) = self.transition(key, s, a, mark);
        let sa = s * self.actions + a;
        let mut future = 0.0;
        if t < self.horizon {
            for s2 in 0..self.states {
                let p = self.t_hat[sa][s2];
                if p > 0.0 {
                    future += p * self.value(t + 1, next, s2).0;
                }
            }
        }
        let raw = q_c + future + self.q_t[sa];
        (raw.min(1.0), raw)
    }

    /// `Ṽ_t` and the greedy augmented action at `(key, s)`; `t` is 1-based.
    ///
    /// Clipping makes many actions tie at 1 while data is scarce. Ties on
    /// the clipped value go to the larger unclipped sum, then to the
    /// smallest `(a, b)`.
    fn value(&mut self, t: usize, key: AugKey, s: usize) -> (f64, AugmentedAction) {
        if let Some(v) = self.memo.get(&(t, key, s)) {
            return *v;
        }
        let marks: &[Mark] = match key {
            AugKey::Closed => &[Mark::Skip],
            AugKey::Active { .. } => &Mark::ALL,
        };
        let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY, AugmentedAction { action: 0, mark: Mark::Skip });
        for a in 0..self.actions {
            for &mark in marks {
                let (q, raw) = self.q_key(t, key, s, a, mark);
                if q > best.0 || (q == best.0 && raw > best.1) {
                    best = (q, raw, AugmentedAction { action: a, mark });
                }
            }
        }
        let out = (best.0, best.2);
        self.memo.insert((t, key, s), out);
        out
    }

    /// `Q̃_t((i, v, s), (a, b))` with 1-based `t`.
    pub fn q(&mut self, t: usize, state: &AugmentedState, act: AugmentedAction) -> f64 {
        let key = self.key_of(state);
        let mark = if state.is_closed() { Mark::Skip } else { act.mark };
        self.q_key(t, key, state.state, act.action, mark).0
    }

    /// `Ṽ_t` at an augmented state.
    pub fn v(&mut self, t: usize, state: &AugmentedState) -> f64 {
        let key = self.key_of(state);
        self.value(t, key, state.state).0
    }

    /// Greedy augmented action at `(t, state)`.
    pub fn greedy(&mut self, t: usize, state: &AugmentedState) -> AugmentedAction {
        let key = self.key_of(state);
        self.value(t, key, state.state).1
    }

    /// Probability that the current greedy policy closes each collection,
    /// under the true dynamics of `model`.
    pub fn commit_probabilities(&mut self, model: &Rmmdp) -> HashMap<MomentKey, f64> {
        let mut out: HashMap<MomentKey, f64> = HashMap::new();
        let mut layer: BTreeMap<(AugKey, usize), f64> = BTreeMap::new();
        for (s, p) in model.init().iter().enumerate() {
            if *p > 0.0 {
                *layer.entry((EMPTY, s)).or_default() += p;
            }
        }
        for t in 1..=self.horizon {
            let mut next_layer: BTreeMap<(AugKey, usize), f64> = BTreeMap::new();
            for ((key, s), p) in layer {
                let act = self.value(t, key, s).1;
                let (next, closed, _) = self.transition(key, s, act.action, act.mark);
                if let Some(code) = closed {
                    *out.entry(MomentKey::from_pairs(self.pairs_of(code))).or_default() += p;
                }
                for (s2, pt) in model.transition_row(s, act.action).iter().enumerate() {
                    if *pt > 0.0 {
                        *next_layer.entry((next, s2)).or_default() += p * pt;
                    }
                }
            }
            layer = next_layer;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExploreLogRow {
    pub episode: u64,
    pub v_tilde_0: f64,
    pub commits_total: u64,
}

/// Stateful driver of the exploration loop.
pub struct Explorer {
    dims: Dims,
    cfg: ExplorationConfig,
    table: MomentTable,
    trans: TransitionEstimate,
    values: OptimisticValues,
    commits: u64,
    log: Vec<ExploreLogRow>,
}

impl Explorer {
    pub fn new(dims: Dims, cfg: ExplorationConfig) -> Result<Self> {
        cfg.validate()?;
        if !encodable(dims, cfg.degree) {
            return Err(Error::Resource {
                what: "augmented states ((SA+1)^d)",
                needed: u128::from(u64::MAX) + 1,
                budget: u128::from(u64::MAX),
            });
        }
        let table = MomentTable::new(dims.support);
        let trans = TransitionEstimate::new(dims.states, dims.actions);
        // recomputed before the first episode; equals the all-ones initialization
        let values = compute_optimistic(&table, &trans, &cfg, dims);
        Ok(Explorer {
            dims,
            cfg,
            table,
            trans,
            values,
            commits: 0,
            log: Vec::new(),
        })
    }

    pub fn v0(&self) -> f64 {
        self.values.v0
    }

    pub fn episodes(&self) -> u64 {
        self.trans.episodes
    }

    pub fn table(&self) -> &MomentTable {
        &self.table
    }

    pub fn transitions(&self) -> &TransitionEstimate {
        &self.trans
    }

    pub fn values_mut(&mut self) -> &mut OptimisticValues {
        &mut self.values
    }

    pub fn config(&self) -> &ExplorationConfig {
        &self.cfg
    }

    pub fn should_stop(&self) -> bool {
        self.values.v0 <= self.cfg.epsilon_pe(self.dims)
            || self.trans.episodes >= self.cfg.max_episodes
    }

    pub fn recompute(&mut self) {
        self.values = compute_optimistic(&self.table, &self.trans, &self.cfg, self.dims);
    }

    /// Plays one greedy episode and folds it into the tables.
    pub fn run_episode<E: EpisodicEnv + ?Sized>(&mut self, env: &mut E) -> EpisodeRecord {
        let values = &mut self.values;
        let rec = run_augmented_episode(env, self.cfg.degree, |t, aug| values.greedy(t + 1, aug));
        if let Some(c) = &rec.committed {
            self.table.record(c.key.clone(), &c.rewards);
            self.commits += 1;
        }
        self.trans.record(&rec.trajectory, rec.final_state);
        if self.trans.episodes.is_multiple_of(self.cfg.batch) {
            self.recompute();
        }
        self.log.push(ExploreLogRow {
            episode: self.trans.episodes,
            v_tilde_0: self.values.v0,
            commits_total: self.commits,
        });
        rec
    }

    pub fn finish(self) -> ExplorationOutcome {
        let eps_pe = self.cfg.epsilon_pe(self.dims);
        ExplorationOutcome {
            budget_exhausted: self.values.v0 > eps_pe,
            v0: self.values.v0,
            iota_c: self.cfg.iota_c(self.dims),
            epsilon_pe: eps_pe,
            episodes: self.trans.episodes,
            dims: self.dims,
            degree: self.cfg.degree,
            table: self.table,
            transitions: self.trans,
            log: self.log,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExplorationOutcome {
    pub table: MomentTable,
    pub transitions: TransitionEstimate,
    pub log: Vec<ExploreLogRow>,
    pub episodes: u64,
    pub v0: f64,
    pub iota_c: f64,
    pub epsilon_pe: f64,
    pub dims: Dims,
    pub degree: usize,
    /// `K_max` was reached with `Ṽ_0 > ε_pe`. Not an error.
    pub budget_exhausted: bool,
}

/// Runs exploration until `Ṽ_0 ≤ ε_pe` or the episode cap.
pub fn estimate_moments<E: EpisodicEnv + ?Sized>(
    env: &mut E,
    cfg: &ExplorationConfig,
) -> Result<ExplorationOutcome> {
    let mut explorer = Explorer::new(Dims::of_env(env), cfg.clone())?;
    while !explorer.should_stop() {
        explorer.run_episode(env);
    }
    Ok(explorer.finish())
}

pub const MOMENTS_FORMAT: &str = "moments/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentFileEntry {
    pub count: u64,
    pub probs: Vec<f64>,
}

/// JSON layout of an exploration result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentFile {
    pub format: String,
    pub dims: Dims,
    /// Reward values by support index.
    pub support: Vec<f64>,
    pub degree: usize,
    pub iota_c: f64,
    pub episodes: u64,
    pub budget_exhausted: bool,
    pub entries: BTreeMap<String, MomentFileEntry>,
    pub transitions: TransitionEstimate,
}

impl MomentFile {
    pub fn from_outcome(out: &ExplorationOutcome, support: &RewardSupport) -> Self {
        MomentFile {
            format: MOMENTS_FORMAT.to_string(),
            dims: out.dims,
            support: support.values().to_vec(),
            degree: out.degree,
            iota_c: out.iota_c,
            episodes: out.episodes,
            budget_exhausted: out.budget_exhausted,
            entries: out
                .table
                .iter()
                .map(|(k, e)| {
                    (
                        k.to_string(),
                        MomentFileEntry {
                            count: e.count,
                            probs: e.probs.clone(),
                        },
                    )
                })
                .collect(),
            transitions: out.transitions.clone(),
        }
    }

    pub fn table(&self) -> Result<MomentTable> {
        if self.format != MOMENTS_FORMAT {
            return Err(Error::Format(format!(
                "expected format {MOMENTS_FORMAT:?}, found {:?}",
                self.format
            )));
        }
        let mut table = MomentTable::new(self.dims.support);
        for (k, e) in &self.entries {
            table.insert(
                MomentKey::parse(k)?,
                MomentEntry {
                    count: e.count,
                    probs: e.probs.clone(),
                },
            )?;
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::RmmdpEnv;
    use crate::generate::example_e1;
    use crate::model::{RewardSupport, Step};
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;

    fn one_by_one(h: usize) -> Rmmdp {
        Rmmdp::from_parts(
            1,
            1,
            h,
            RewardSupport::binary(),
            vec![1.0],
            vec![1.0],
            vec![1.0],
            vec![0.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn z_index_round_trip() {
        for i in 0..27 {
            assert_eq!(z_index(&z_from_index(i, 3, 3), 3), i);
        }
        assert_eq!(z_index(&[1, 0], 2), 2);
    }

    #[test]
    fn empty_tables_clip_everything_to_one() {
        let dims = Dims { states: 2, actions: 2, support: 2, horizon: 3 };
        let cfg = ExplorationConfig { degree: 2, ..Default::default() };
        let mut v = compute_optimistic(&MomentTable::new(2), &TransitionEstimate::new(2, 2), &cfg, dims);
        assert!(v.v0 >= 1.0);
        let st = AugmentedState::initial(2, 1);
        for a in 0..2 {
            for mark in Mark::ALL {
                assert_eq!(v.q(1, &st, AugmentedAction { action: a, mark }), 1.0);
            }
        }
    }

    #[test]
    fn hand_unrolled_single_step() {
        let dims = Dims { states: 1, actions: 1, support: 2, horizon: 1 };
        let cfg = ExplorationConfig { degree: 1, max_episodes: 1000, ..Default::default() };
        let mut table = MomentTable::new(2);
        let mut trans = TransitionEstimate::new(1, 1);
        let key = MomentKey::from_pairs(vec![Pair::new(0, 0)]);
        for i in 0..400 {
            table.record(key.clone(), &[i % 2]);
            trans.record(&Trajectory::new(vec![Step { state: 0, action: 0, reward: 0 }]), 0);
        }
        let v = compute_optimistic(&table, &trans, &cfg, dims);
        let expect = (cfg.iota_nu(dims) / 400.0).sqrt()
            + ((cfg.iota_c(dims) / 400.0).sqrt() + (cfg.iota_t(dims) / 400.0).sqrt()).min(1.0);
        assert_abs_diff_eq!(v.v0, expect, epsilon = 1e-12);
    }

    #[test]
    fn bonuses_vanish_with_infinite_counts() {
        let dims = Dims { states: 1, actions: 2, support: 2, horizon: 2 };
        let cfg = ExplorationConfig::default();
        let e1 = example_e1(2);
        let keys = all_keys(1, 2, 2);
        let table = MomentTable::exact(&e1, keys, u64::MAX / 4);
        let mut trans = TransitionEstimate::new(1, 2);
        trans.visits = vec![u64::MAX / 4; 2];
        trans.counts = vec![u64::MAX / 4; 2];
        trans.init_counts = vec![7];
        trans.episodes = 7;
        let v = compute_optimistic(&table, &trans, &cfg, dims);
        assert_abs_diff_eq!(v.v0, (cfg.iota_nu(dims) / 7.0).sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn deterministic_single_state_counts_grow_by_one() {
        let model = one_by_one(1);
        let mut env = RmmdpEnv::new(&model, seeded(3));
        let cfg = ExplorationConfig { degree: 1, max_episodes: 50, ..Default::default() };
        let mut ex = Explorer::new(Dims::of_model(&model), cfg).unwrap();
        let key = MomentKey::from_pairs(vec![Pair::new(0, 0)]);
        for k in 1..=20 {
            ex.run_episode(&mut env);
            assert_eq!(ex.table().count(&key), k);
            assert_eq!(ex.table().get(&key).unwrap().probs, vec![0.0, 1.0]);
        }
    }

    #[test]
    fn greedy_committed_key_matches_marked_steps() {
        let e1 = example_e1(3);
        let mut env = RmmdpEnv::new(&e1, seeded(8));
        let cfg = ExplorationConfig { degree: 2, max_episodes: 500, ..Default::default() };
        let mut ex = Explorer::new(Dims::of_model(&e1), cfg).unwrap();
        for _ in 0..200 {
            let rec = ex.run_episode(&mut env);
            if let Some(c) = &rec.committed {
                let pairs: Vec<Pair> =
                    rec.marked_steps.iter().map(|&t| rec.trajectory.steps[t].pair()).collect();
                assert_eq!(MomentKey::from_pairs(pairs), c.key);
            }
        }
    }

    #[test]
    fn all_keys_counts_multisets() {
        // 2 pairs, degree 2: {a},{b},{aa},{ab},{bb}
        assert_eq!(all_keys(1, 2, 2).len(), 5);
        // 4 pairs, degree 3: 4 + 10 + 20
        assert_eq!(all_keys(2, 2, 3).len(), 34);
    }

    #[test]
    fn level_count_and_threshold() {
        let dims = Dims { states: 1, actions: 2, support: 2, horizon: 2 };
        let cfg = ExplorationConfig { degree: 2, max_episodes: 50_000, ..Default::default() };
        let l = cfg.levels(dims);
        let n0 = 50_000.0 / 4.0;
        assert_eq!(l as f64, (n0 / cfg.iota_c(dims)).log(4.0).ceil());
        let eps = cfg.epsilon_pe(dims);
        assert_abs_diff_eq!(eps, 0.1 / (2.0 * l as f64 * 32f64.powi(2)), epsilon = 1e-18);
    }
}
