//! Moment matching: find `(ŵ, μ̂)` whose moments sit inside the confidence
//! radii `√(ι_c / n(x))` around the empirical table.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enumerate::check_budget;
use crate::error::{Error, Result};
use crate::generate::random_simplex;
use crate::explore::{z_from_index, z_index, MomentTable};
use crate::model::{MomentKey, Pair, Rmmdp};
use crate::rng::{derive_seed, seeded};

/// Objective value treated as zero.
pub const FEASIBILITY_TOL: f64 = 1e-18;

/// The optimizer aims at radii shrunk by this factor so that a converged
/// iterate is strictly inside the true radii.
const MARGIN: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FitMode {
    General,
    BalancedTwo,
    IntegralGrid { p: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub contexts: usize,
    pub mode: FitMode,
    pub restarts: usize,
    pub max_iters: usize,
    /// Initial step of the cosine schedule.
    pub step: f64,
    pub seed: u64,
    /// Multiplier on every radius.
    pub slack_scale: f64,
    /// After reaching feasibility, keep descending on the weighted squared
    /// moment error while staying feasible.
    pub polish: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            contexts: 2,
            mode: FitMode::General,
            restarts: 200,
            max_iters: 500,
            step: 1.0,
            seed: 0,
            slack_scale: 1.0,
            polish: true,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.contexts < 1 {
            return Err(Error::InvalidArgument("contexts must be >= 1".into()));
        }
        if self.restarts < 1 {
            return Err(Error::InvalidArgument("restarts must be >= 1".into()));
        }
        if let FitMode::IntegralGrid { p } = self.mode {
            if p < 1 {
                return Err(Error::InvalidArgument("grid resolution must be >= 1".into()));
            }
        }
        if self.mode == FitMode::BalancedTwo && self.contexts != 2 {
            return Err(Error::InvalidArgument("balanced-two mode needs exactly 2 contexts".into()));
        }
        if !(self.slack_scale >= 0.0) || !(self.step > 0.0) {
            return Err(Error::InvalidArgument("slack_scale must be >= 0 and step > 0".into()));
        }
        Ok(())
    }
}

/// Latent part of a model: weights and reward tables `μ[m][s][a][z]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentModel {
    pub states: usize,
    pub actions: usize,
    pub support: usize,
    pub weights: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl LatentModel {
    pub fn of_model(model: &Rmmdp) -> Self {
        LatentModel {
            states: model.num_states(),
            actions: model.num_actions(),
            support: model.support_size(),
            weights: model.weights().to_vec(),
            rewards: model.rewards_flat().to_vec(),
        }
    }

    pub fn contexts(&self) -> usize {
        self.weights.len()
    }

    fn prob(&self, m: usize, p: Pair, z: usize) -> f64 {
        self.rewards[((m * self.states + p.state) * self.actions + p.action) * self.support + z]
    }

    pub fn moment(&self, pairs: &[Pair], z: &[usize]) -> f64 {
        (0..self.contexts())
            .map(|m| {
                pairs
                    .iter()
                    .zip(z)
                    .fold(self.weights[m], |acc, (p, zi)| acc * self.prob(m, *p, *zi))
            })
            .sum()
    }

    /// Swaps context labels according to `perm` (new m = perm[old m]).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let block = self.states * self.actions * self.support;
        let mut out = self.clone();
        for (old, &new) in perm.iter().enumerate() {
            out.weights[new] = self.weights[old];
            out.rewards[new * block..(new + 1) * block]
                .copy_from_slice(&self.rewards[old * block..(old + 1) * block]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Constraint {
    pairs: Vec<Pair>,
    z: Vec<usize>,
    target: f64,
    radius: f64,
}

/// Degree-3 moment of a balanced two-context mixture from its degree-1 and
/// degree-2 moments: `-2 M₁M₂M₃ + M₁M₂₃ + M₂M₁₃ + M₃M₁₂`.
pub fn third_moment_predict(m1: [f64; 3], m2: [f64; 3]) -> f64 {
    let [a, b, c] = m1;
    let [ab, ac, bc] = m2;
    -2.0 * a * b * c + a * bc + b * ac + c * ab
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slack {
    pub key: String,
    pub z: Vec<usize>,
    pub predicted: f64,
    pub empirical: f64,
    pub radius: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ViolationReport {
    pub slacks: Vec<Slack>,
    pub max_slack: f64,
    /// `max slack / radius`; keys with zero radius contribute their raw slack.
    pub max_normalized: f64,
    pub violated: usize,
}

impl ViolationReport {
    pub fn feasible(&self) -> bool {
        self.violated == 0
    }
}

fn report(candidate: &LatentModel, constraints: &[Constraint]) -> ViolationReport {
    let mut rep = ViolationReport::default();
    for c in constraints {
        let predicted = candidate.moment(&c.pairs, &c.z);
        let slack = ((predicted - c.target).abs() - c.radius).max(0.0);
        if slack > 0.0 {
            rep.violated += 1;
            let norm = if c.radius > 0.0 { slack / c.radius } else { slack };
            rep.max_normalized = rep.max_normalized.max(norm);
            rep.max_slack = rep.max_slack.max(slack);
        }
        rep.slacks.push(Slack {
            key: MomentKey::from_pairs(c.pairs.clone()).to_string(),
            z: c.z.clone(),
            predicted,
            empirical: c.target,
            radius: c.radius,
            slack,
        });
    }
    rep
}

fn table_constraints(table: &MomentTable, iota_c: f64, scale: f64, max_degree: usize) -> Vec<Constraint> {
    let z = table.support();
    let mut out = Vec::new();
    for (key, entry) in table.iter() {
        if key.len() > max_degree {
            continue;
        }
        let radius = scale * (iota_c / entry.count as f64).sqrt();
        for (i, p) in entry.probs.iter().enumerate() {
            out.push(Constraint {
                pairs: key.pairs().to_vec(),
                z: z_from_index(i, key.len(), z),
                target: *p,
                radius,
            });
        }
    }
    out
}

/// Per-key, per-z slacks `(|𝐌̂ − M_n| − √(ι_c/n))_+`.
pub fn violation_report(candidate: &LatentModel, table: &MomentTable, iota_c: f64) -> ViolationReport {
    report(candidate, &table_constraints(table, iota_c, 1.0, usize::MAX))
}

/// Looks up `M_n` for pairs in arbitrary order; rewards follow their pairs.
fn lookup(table: &MomentTable, pairs: &[Pair], z: &[usize]) -> Option<(f64, u64)> {
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.sort_by_key(|&i| pairs[i]);
    let key = MomentKey::from_pairs(idx.iter().map(|&i| pairs[i]).collect());
    let zs: Vec<usize> = idx.iter().map(|&i| z[i]).collect();
    table
        .get(&key)
        .map(|e| (e.probs[z_index(&zs, table.support())], e.count))
}

/// Degree-3 constraints predicted from degree ≤ 2 entries, for every triple
/// of tracked pairs not already present in the table.
fn synthesized_third(table: &MomentTable, iota_c: f64, scale: f64) -> Vec<Constraint> {
    let zsz = table.support();
    let singles: Vec<Pair> = table
        .iter()
        .filter(|(k, _)| k.len() == 1)
        .map(|(k, _)| k.pairs()[0])
        .collect();
    let radius = |n: u64| scale * (iota_c / n as f64).sqrt();
    let mut out = Vec::new();
    for i in 0..singles.len() {
        for j in i..singles.len() {
            for k in j..singles.len() {
                let trip = [singles[i], singles[j], singles[k]];
                if table.get(&MomentKey::from_pairs(trip.to_vec())).is_some() {
                    continue;
                }
                'z: for zi in 0..zsz.pow(3) {
                    let zs = z_from_index(zi, 3, zsz);
                    let mut m1 = [0.0; 3];
                    let mut m2 = [0.0; 3];
                    let mut r = 0.0f64;
                    for t in 0..3 {
                        match lookup(table, &trip[t..t + 1], &zs[t..t + 1]) {
                            Some((v, n)) => {
                                m1[t] = v;
                                r = r.max(radius(n));
                            }
                            None => continue 'z,
                        }
                    }
                    for (slot, (a, b)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
                        match lookup(table, &[trip[a], trip[b]], &[zs[a], zs[b]]) {
                            Some((v, n)) => {
                                m2[slot] = v;
                                r = r.max(radius(n));
                            }
                            None => continue 'z,
                        }
                    }
                    out.push(Constraint {
                        pairs: trip.to_vec(),
                        z: zs,
                        target: third_moment_predict(m1, m2),
                        radius: 6.0 * r,
                    });
                }
            }
        }
    }
    out
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &mut [f64]) {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

struct Problem {
    contexts: usize,
    states: usize,
    actions: usize,
    support: usize,
    fixed_weights: bool,
    constraints: Vec<Constraint>,
}

impl Problem {
    fn dim(&self) -> usize {
        self.contexts * (1 + self.states * self.actions * self.support)
    }

    fn mu_index(&self, m: usize, p: Pair, z: usize) -> usize {
        self.contexts + ((m * self.states + p.state) * self.actions + p.action) * self.support + z
    }

    fn latent(&self, x: &[f64]) -> LatentModel {
        LatentModel {
            states: self.states,
            actions: self.actions,
            support: self.support,
            weights: x[..self.contexts].to_vec(),
            rewards: x[self.contexts..].to_vec(),
        }
    }

    fn project(&self, x: &mut [f64]) {
        if !self.fixed_weights {
            project_simplex(&mut x[..self.contexts]);
        }
        for row in x[self.contexts..].chunks_mut(self.support) {
            project_simplex(row);
        }
    }

    fn moment(&self, x: &[f64], c: &Constraint) -> f64 {
        (0..self.contexts)
            .map(|m| {
                c.pairs
                    .iter()
                    .zip(&c.z)
                    .fold(x[m], |acc, (p, z)| acc * x[self.mu_index(m, *p, *z)])
            })
            .sum()
    }

    /// Squared-hinge objective with radii scaled by `shrink`.
    fn hinge(&self, x: &[f64], shrink: f64) -> f64 {
        self.constraints
            .iter()
            .map(|c| {
                let h = ((self.moment(x, c) - c.target).abs() - shrink * c.radius).max(0.0);
                h * h
            })
            .sum()
    }

    fn hinge_grad(&self, x: &[f64], shrink: f64, grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut f = 0.0;
        for c in &self.constraints {
            let diff = self.moment(x, c) - c.target;
            let h = (diff.abs() - shrink * c.radius).max(0.0);
            if h == 0.0 {
                continue;
            }
            f += h * h;
            self.accumulate(x, c, 2.0 * h * diff.signum(), grad);
        }
        f
    }

    /// Weighted squared error `Σ (𝐌̂ − M_n)² / r²` used for polishing.
    fn fit_error(&self, x: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|c| {
                let d = self.moment(x, c) - c.target;
                d * d / c.radius.max(1e-12).powi(2)
            })
            .sum()
    }

    fn fit_error_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut f = 0.0;
        for c in &self.constraints {
            let w = 1.0 / c.radius.max(1e-12).powi(2);
            let d = self.moment(x, c) - c.target;
            f += w * d * d;
            self.accumulate(x, c, 2.0 * w * d, grad);
        }
        f
    }

    /// Adds `coef · ∂𝐌̂/∂x` for one constraint.
    fn accumulate(&self, x: &[f64], c: &Constraint, coef: f64, grad: &mut [f64]) {
        let q = c.pairs.len();
        let mut factors = vec![0.0; q];
        for m in 0..self.contexts {
            for (i, (p, z)) in c.pairs.iter().zip(&c.z).enumerate() {
                factors[i] = x[self.mu_index(m, *p, *z)];
            }
            if !self.fixed_weights {
                grad[m] += coef * factors.iter().product::<f64>();
            }
            for (i, (p, z)) in c.pairs.iter().zip(&c.z).enumerate() {
                let others: f64 = factors
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, f)| *f)
                    .product();
                grad[self.mu_index(m, *p, *z)] += coef * x[m] * others;
            }
        }
    }

    fn feasible(&self, x: &[f64]) -> bool {
        self.constraints
            .iter()
            .all(|c| (self.moment(x, c) - c.target).abs() <= c.radius)
    }
}

fn cosine(step: f64, it: usize, total: usize) -> f64 {
    let frac = it as f64 / total.max(1) as f64;
    step * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

struct Descent {
    x: Vec<f64>,
    objective: f64,
    trace: Vec<f64>,
    iterations: usize,
}

/// Projected gradient with a cosine schedule and backtracking.
fn descend(prob: &Problem, mut x: Vec<f64>, step: f64, iters: usize) -> Descent {
    prob.project(&mut x);
    let mut grad = vec![0.0; x.len()];
    let mut f = prob.hinge_grad(&x, MARGIN, &mut grad);
    let mut trace = vec![f];
    let mut scale = 1.0;
    let mut y = vec![0.0; x.len()];
    let mut it = 0;
    while it < iters && f > FEASIBILITY_TOL {
        let base = cosine(step, it, iters);
        let mut accepted = false;
        for _ in 0..40 {
            let s = base * scale;
            for i in 0..x.len() {
                y[i] = x[i] - s * grad[i];
            }
            prob.project(&mut y);
            let fy = prob.hinge(&y, MARGIN);
            if fy < f {
                std::mem::swap(&mut x, &mut y);
                f = prob.hinge_grad(&x, MARGIN, &mut grad);
                scale = (scale * 2.0).min(1e8);
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        it += 1;
        trace.push(f);
        if !accepted {
            break;
        }
    }
    Descent {
        x,
        objective: f,
        trace,
        iterations: it,
    }
}

/// Projected gradient on the weighted moment error. With `feasible_only`
/// every accepted iterate must satisfy all radii.
fn least_squares(prob: &Problem, mut x: Vec<f64>, step: f64, iters: usize, feasible_only: bool) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut g = prob.fit_error_grad(&x, &mut grad);
    let mut scale = 1e-3;
    let mut y = vec![0.0; x.len()];
    for it in 0..iters {
        let base = cosine(step, it, iters);
        let mut accepted = false;
        for _ in 0..40 {
            let s = base * scale;
            for i in 0..x.len() {
                y[i] = x[i] - s * grad[i];
            }
            prob.project(&mut y);
            if !feasible_only || prob.feasible(&y) {
                let gy = prob.fit_error(&y);
                if gy < g {
                    std::mem::swap(&mut x, &mut y);
                    g = prob.fit_error_grad(&x, &mut grad);
                    scale = (scale * 2.0).min(1e8);
                    accepted = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    x
}

/// Moves a feasible point toward the weighted least-squares fit. The free
/// minimizer is taken when it stays feasible, otherwise descent is
/// restricted to feasible iterates.
fn polish(prob: &Problem, x: Vec<f64>, step: f64, iters: usize) -> Vec<f64> {
    let free = least_squares(prob, x.clone(), step, iters * 4, false);
    if prob.feasible(&free) && prob.fit_error(&free) < prob.fit_error(&x) {
        return free;
    }
    least_squares(prob, x, step, iters, true)
}

fn dirichlet_row<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    out.copy_from_slice(&random_simplex(rng, out.len()));
}

/// Closed-form balanced-two start `μ̂ = M₁ ± √max(0, M₂ − M₁²)`, with
/// context labels aligned greedily from the cross moments.
fn balanced_start(prob: &Problem, table: &MomentTable) -> Vec<f64> {
    let zsz = prob.support;
    let mut x = vec![0.0; prob.dim()];
    x[0] = 0.5;
    x[1] = 0.5;
    // per pair: mean and deviation vectors over z
    let mut devs: BTreeMap<Pair, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in 0..prob.states {
        for a in 0..prob.actions {
            let p = Pair::new(s, a);
            let mut mean = vec![1.0 / zsz as f64; zsz];
            let mut dev = vec![0.0; zsz];
            let mut known = false;
            for z in 0..zsz {
                if let Some((m1, _)) = lookup(table, &[p], &[z]) {
                    mean[z] = m1;
                    known = true;
                    if let Some((m2, _)) = lookup(table, &[p, p], &[z, z]) {
                        dev[z] = (m2 - m1 * m1).max(0.0).sqrt();
                    }
                }
            }
            if !known {
                continue;
            }
            // deviations must sum to zero across z: assign signs greedily
            let mut order: Vec<usize> = (0..zsz).collect();
            order.sort_by(|&i, &j| dev[j].partial_cmp(&dev[i]).unwrap().then(i.cmp(&j)));
            let mut run = 0.0;
            for &z in &order {
                if run > 0.0 {
                    dev[z] = -dev[z];
                }
                run += dev[z];
            }
            devs.insert(p, (mean, dev));
        }
    }
    // align labels: sign(δ_p · δ_q) should match the cross residual
    let keys: Vec<Pair> = devs.keys().copied().collect();
    let mut sign: BTreeMap<Pair, f64> = BTreeMap::new();
    for (i, p) in keys.iter().enumerate() {
        let mut vote = 0.0;
        for q in &keys[..i] {
            let (mp, dp) = &devs[p];
            let (mq, dq) = &devs[q];
            let sq = sign[q];
            for zp in 0..zsz {
                for zq in 0..zsz {
                    if let Some((cross, _)) = lookup(table, &[*p, *q], &[zp, zq]) {
                        let resid = cross - mp[zp] * mq[zq];
                        vote += resid * dp[zp] * dq[zq] * sq;
                    }
                }
            }
        }
        sign.insert(*p, if vote < 0.0 { -1.0 } else { 1.0 });
    }
    for (p, (mean, dev)) in &devs {
        let sg = sign[p];
        for z in 0..zsz {
            x[prob.mu_index(0, *p, z)] = mean[z] + sg * dev[z];
            x[prob.mu_index(1, *p, z)] = mean[z] - sg * dev[z];
        }
    }
    for m in 0..2 {
        for s in 0..prob.states {
            for a in 0..prob.actions {
                if !devs.contains_key(&Pair::new(s, a)) {
                    for z in 0..zsz {
                        x[prob.mu_index(m, Pair::new(s, a), z)] = 1.0 / zsz as f64;
                    }
                }
            }
        }
    }
    prob.project(&mut x);
    x
}

fn initial_point(prob: &Problem, table: &MomentTable, mode: FitMode, seed: u64, restart: usize) -> Vec<f64> {
    let mut rng = seeded(derive_seed(seed, restart as u64));
    match mode {
        FitMode::BalancedTwo => {
            let mut x = balanced_start(prob, table);
            if restart > 0 {
                for v in x[prob.contexts..].iter_mut() {
                    *v += rng.random_range(-0.1..0.1);
                }
                prob.project(&mut x);
            }
            x
        }
        _ => {
            let mut x = vec![0.0; prob.dim()];
            dirichlet_row(&mut rng, &mut x[..prob.contexts]);
            for row in x[prob.contexts..].chunks_mut(prob.support) {
                dirichlet_row(&mut rng, row);
            }
            x
        }
    }
}

/// Largest-remainder rounding of a simplex vector to multiples of `1/p`.
pub fn round_to_grid(v: &mut [f64], p: u32) {
    let scaled: Vec<f64> = v.iter().map(|x| x * p as f64).collect();
    let mut units: Vec<u32> = scaled.iter().map(|x| x.floor().max(0.0) as u32).collect();
    let used: u32 = units.iter().sum();
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| {
        let ri = scaled[i] - scaled[i].floor();
        let rj = scaled[j] - scaled[j].floor();
        rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
    });
    for &i in order.iter().take(p.saturating_sub(used) as usize) {
        units[i] += 1;
    }
    for (x, u) in v.iter_mut().zip(units) {
        *x = u as f64 / p as f64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub latent: LatentModel,
    pub feasible: bool,
    pub max_normalized_violation: f64,
    /// Final squared-hinge objective at the (unshrunk) radii.
    pub objective: f64,
    /// Objective trace of the selected restart.
    pub trace: Vec<f64>,
    pub restart: usize,
    pub iterations: usize,
    pub report: ViolationReport,
}

fn build_problem(table: &MomentTable, iota_c: f64, states: usize, actions: usize, opts: &FitOptions) -> Result<Problem> {
    opts.validate()?;
    if table.is_empty() {
        return Err(Error::InvalidArgument("moment table is empty".into()));
    }
    for (key, e) in table.iter() {
        if e.count == 0 {
            return Err(Error::InvalidArgument(format!("key {key} has no samples")));
        }
        if key.pairs().iter().any(|p| p.state >= states || p.action >= actions) {
            return Err(Error::Dimension(format!("key {key} out of range")));
        }
    }
    let balanced = opts.mode == FitMode::BalancedTwo;
    let mut constraints = table_constraints(table, iota_c, opts.slack_scale, if balanced { 2 } else { usize::MAX });
    if balanced {
        if !table.iter().any(|(k, _)| k.len() == 2) {
            return Err(Error::InvalidArgument("balanced-two mode needs degree-2 keys".into()));
        }
        // direct estimates of degree-3 keys are kept when the table has them
        constraints.extend(table_constraints(table, iota_c, opts.slack_scale, 3).into_iter().filter(|c| c.pairs.len() == 3));
        constraints.extend(synthesized_third(table, iota_c, opts.slack_scale));
    }
    Ok(Problem {
        contexts: opts.contexts,
        states,
        actions,
        support: table.support(),
        fixed_weights: balanced,
        constraints,
    })
}

/// Fits `(ŵ, μ̂)` to the table by restarted projected gradient on the
/// squared-hinge penalty. Never errors on infeasibility; see
/// [`FitResult::feasible`].
pub fn fit_moment_matching(
    table: &MomentTable,
    iota_c: f64,
    states: usize,
    actions: usize,
    opts: &FitOptions,
) -> Result<FitResult> {
    let prob = build_problem(table, iota_c, states, actions, opts)?;
    let chunk = rayon::current_num_threads().clamp(4, 16);
    let mut best: Option<(usize, Descent)> = None;
    let mut start = 0;
    while start < opts.restarts {
        let end = (start + chunk).min(opts.restarts);
        let runs: Vec<(usize, Descent)> = (start..end)
            .into_par_iter()
            .map(|r| {
                let x0 = initial_point(&prob, table, opts.mode, opts.seed, r);
                (r, descend(&prob, x0, opts.step, opts.max_iters))
            })
            .collect();
        for (r, d) in runs {
            let better = match &best {
                None => true,
                Some((_, b)) => d.objective < b.objective,
            };
            if better {
                best = Some((r, d));
            }
        }
        if best.as_ref().is_some_and(|(_, b)| b.objective <= FEASIBILITY_TOL) {
            break;
        }
        start = end;
    }
    let (restart, descent) = best.expect("at least one restart");
    let mut x = descent.x;
    if opts.polish && prob.feasible(&x) {
        x = polish(&prob, x, opts.step, opts.max_iters);
    }
    let mut latent = prob.latent(&x);
    if let FitMode::IntegralGrid { p } = opts.mode {
        for row in latent.rewards.chunks_mut(prob.support) {
            round_to_grid(row, p);
        }
    }
    let rep = report(&latent, &prob.constraints);
    Ok(FitResult {
        feasible: rep.feasible(),
        max_normalized_violation: rep.max_normalized,
        objective: prob.hinge(&x_of(&prob, &latent), 1.0),
        trace: descent.trace,
        restart,
        iterations: descent.iterations,
        latent,
        report: rep,
    })
}

fn x_of(prob: &Problem, latent: &LatentModel) -> Vec<f64> {
    let mut x = latent.weights.clone();
    x.extend_from_slice(&latent.rewards);
    debug_assert_eq!(x.len(), prob.dim());
    x
}

/// Exhaustive search over a grid of step `1/steps` for tiny problems.
/// Returns the best objective and its candidate.
pub fn brute_force_fit(
    table: &MomentTable,
    iota_c: f64,
    states: usize,
    actions: usize,
    contexts: usize,
    steps: u32,
) -> Result<(f64, LatentModel)> {
    let opts = FitOptions {
        contexts,
        ..Default::default()
    };
    let prob = build_problem(table, iota_c, states, actions, &opts)?;
    let z = prob.support;
    if states * actions * contexts * z > 12 {
        return Err(Error::InvalidArgument("brute-force fit limited to S·A·M·Z <= 12".into()));
    }
    // all points of the simplex grid in Z coordinates
    let mut simplex: Vec<Vec<f64>> = Vec::new();
    fn comps(left: u32, slots: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if slots == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for v in 0..=left {
            cur.push(v);
            comps(left - v, slots - 1, cur, out);
            cur.pop();
        }
    }
    let mut raw = Vec::new();
    comps(steps, z, &mut Vec::new(), &mut raw);
    simplex.extend(raw.iter().map(|c| c.iter().map(|v| *v as f64 / steps as f64).collect::<Vec<_>>()));
    let mut wraw = Vec::new();
    comps(steps, contexts, &mut Vec::new(), &mut wraw);
    let wgrid: Vec<Vec<f64>> = wraw.iter().map(|c| c.iter().map(|v| *v as f64 / steps as f64).collect()).collect();
    let rows = states * actions * contexts;
    let total = (simplex.len() as u128).saturating_pow(rows as u32).saturating_mul(wgrid.len() as u128);
    check_budget("brute-force fit grid points", total, 50_000_000)?;
    let mut best = (f64::INFINITY, Vec::new());
    let mut idx = vec![0usize; rows];
    let mut x = vec![0.0; prob.dim()];
    loop {
        for (r, &i) in idx.iter().enumerate() {
            x[contexts + r * z..contexts + (r + 1) * z].copy_from_slice(&simplex[i]);
        }
        for w in &wgrid {
            x[..contexts].copy_from_slice(w);
            let f = prob.hinge(&x, 1.0);
            if f < best.0 {
                best = (f, x.clone());
            }
        }
        let mut r = 0;
        loop {
            if r == rows {
                return Ok((best.0, prob.latent(&best.1)));
            }
            idx[r] += 1;
            if idx[r] < simplex.len() {
                break;
            }
            idx[r] = 0;
            r += 1;
        }
    }
}
