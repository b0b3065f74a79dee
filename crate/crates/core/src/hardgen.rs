//! Lower-bound instances: a deterministic chain whose correct-action rewards
//! come from a mixture that looks like fair coins in every moment of degree
//! below `d`.
//!
//! The mixture is written as `μ_m(t) = ½ + δ_m(t)`. Sub-top multilinear
//! moments equal `(½)^q` exactly when every central moment
//! `Σ_m w_m Π_{t∈S} δ_m(t)` vanishes for `0 < |S| < d`, and the top moment is
//! then `(½)^d + Σ_m w_m Π_t δ_m(t)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyze::sequence_kl;
use crate::error::{Error, Result};
use crate::generate::random_simplex;
use crate::model::{moment_unchecked, Pair, RewardSupport, Rmmdp};
use crate::plan::{optimal_plan, policy_value};
use crate::policy::UniformPolicy;
use crate::rng::{derive_seed, seeded};

pub const RESTARTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ansatz {
    /// Free weights and deviations.
    General,
    /// Two contexts with equal weights and opposite deviations.
    SymmetricTwo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureOptions {
    pub contexts: usize,
    pub degree: usize,
    /// Bound on every sub-top central moment.
    pub tol: f64,
    /// Scale the solution to this top-degree deviation; the largest
    /// achievable deviation is used when absent.
    pub epsilon: Option<f64>,
    pub ansatz: Ansatz,
    pub seed: u64,
}

impl Default for MixtureOptions {
    fn default() -> Self {
        MixtureOptions {
            contexts: 2,
            degree: 2,
            tol: 1e-10,
            epsilon: None,
            ansatz: Ansatz::General,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub weights: Vec<f64>,
    /// `mu[m][t] = P(r = 1)` at the correct action of step `t`.
    pub mu: Vec<Vec<f64>>,
    /// Top-degree deviation `𝐌(x*, 1…1) − (½)^d`.
    pub epsilon: f64,
    /// Largest absolute sub-top central moment.
    pub residual: f64,
    /// Set when `ε > (2d)^{-2d}`.
    pub warning: Option<String>,
}

impl Mixture {
    pub fn degree(&self) -> usize {
        self.mu.first().map_or(0, Vec::len)
    }
}

/// All nonempty proper subsets of `0..d` as bit masks, plus the full set last.
fn subsets(d: usize) -> Vec<u32> {
    let full = (1u32 << d) - 1;
    let mut out: Vec<u32> = (1..full).collect();
    out.push(full);
    out
}

struct System {
    contexts: usize,
    degree: usize,
    masks: Vec<u32>,
    /// Maps parameters `θ` to `(w, δ)` as `x = P θ + x0`.
    p: DMatrix<f64>,
    x0: DVector<f64>,
    tau: f64,
    free_weights: bool,
}

impl System {
    fn new(contexts: usize, degree: usize, ansatz: Ansatz) -> Self {
        let n = contexts * (1 + degree);
        let (p, x0, free_weights) = match ansatz {
            Ansatz::General => (DMatrix::identity(n, n), DVector::zeros(n), true),
            Ansatz::SymmetricTwo => {
                let mut p = DMatrix::zeros(n, degree);
                for t in 0..degree {
                    p[(2 + t, t)] = 1.0;
                    p[(2 + degree + t, t)] = -1.0;
                }
                let mut x0 = DVector::zeros(n);
                x0[0] = 0.5;
                x0[1] = 0.5;
                (p, x0, false)
            }
        };
        System {
            contexts,
            degree,
            masks: subsets(degree),
            p,
            x0,
            tau: 0.01,
            free_weights,
        }
    }

    fn delta(&self, x: &DVector<f64>, m: usize, t: usize) -> f64 {
        x[self.contexts + m * self.degree + t]
    }

    fn central(&self, x: &DVector<f64>, mask: u32) -> f64 {
        (0..self.contexts)
            .map(|m| {
                (0..self.degree)
                    .filter(|t| mask >> t & 1 == 1)
                    .fold(x[m], |acc, t| acc * self.delta(x, m, t))
            })
            .sum()
    }

    /// Sub-top central moments, `top − τ`, and `Σw − 1` in free-weight mode.
    fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut r: Vec<f64> = self.masks.iter().map(|&s| self.central(x, s)).collect();
        let last = r.len() - 1;
        r[last] -= self.tau;
        if self.free_weights {
            r.push(x.rows(0, self.contexts).sum() - 1.0);
        }
        DVector::from_vec(r)
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let rows = self.masks.len() + usize::from(self.free_weights);
        let mut j = DMatrix::zeros(rows, x.len());
        for (i, &mask) in self.masks.iter().enumerate() {
            for m in 0..self.contexts {
                let ts: Vec<usize> = (0..self.degree).filter(|t| mask >> t & 1 == 1).collect();
                j[(i, m)] = ts.iter().map(|&t| self.delta(x, m, t)).product();
                for &t in &ts {
                    let others: f64 = ts.iter().filter(|&&u| u != t).map(|&u| self.delta(x, m, u)).product();
                    j[(i, self.contexts + m * self.degree + t)] = x[m] * others;
                }
            }
        }
        if self.free_weights {
            for m in 0..self.contexts {
                j[(rows - 1, m)] = 1.0;
            }
        }
        j * &self.p
    }

    fn expand(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.p * theta + &self.x0
    }

    fn clamp(&self, theta: &mut DVector<f64>) {
        if self.free_weights {
            for m in 0..self.contexts {
                theta[m] = theta[m].max(0.0);
            }
        }
    }

    /// Damped Gauss-Newton (Levenberg-Marquardt) on the residual.
    fn solve(&self, mut theta: DVector<f64>) -> DVector<f64> {
        let mut r = self.residual(&self.expand(&theta));
        let mut lambda = 1e-3;
        for _ in 0..300 {
            if r.amax() < 1e-16 {
                break;
            }
            let j = self.jacobian(&self.expand(&theta));
            let jjt = &j * j.transpose() + DMatrix::identity(j.nrows(), j.nrows()) * lambda;
            let Some(chol) = jjt.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = j.transpose() * chol.solve(&r);
            let mut cand = &theta - step;
            self.clamp(&mut cand);
            let rc = self.residual(&self.expand(&cand));
            if rc.norm() < r.norm() {
                theta = cand;
                r = rc;
                lambda = (lambda / 3.0).max(1e-15);
            } else {
                lambda *= 4.0;
                if lambda > 1e12 {
                    break;
                }
            }
        }
        theta
    }
}

fn random_theta<R: Rng + ?Sized>(sys: &System, rng: &mut R) -> DVector<f64> {
    let n = sys.p.ncols();
    let mut theta = DVector::zeros(n);
    let offset = if sys.free_weights {
        for (m, v) in random_simplex(rng, sys.contexts).into_iter().enumerate() {
            theta[m] = v;
        }
        sys.contexts
    } else {
        0
    };
    for i in offset..n {
        theta[i] = rng.random_range(-0.5..0.5);
    }
    theta
}

/// Weights and correct-action reward means whose multilinear moments of
/// degree `< d` equal `(½)^q` within `tol` while the degree-`d` moment
/// exceeds `(½)^d`.
pub fn build_mixture(opts: &MixtureOptions) -> Result<Mixture> {
    let (mc, d) = (opts.contexts, opts.degree);
    if mc < 1 || d < 1 {
        return Err(Error::InvalidArgument("contexts and degree must be positive".into()));
    }
    if d > 2 * mc - 1 {
        return Err(Error::InvalidArgument(format!("degree {d} exceeds 2M-1 = {}", 2 * mc - 1)));
    }
    if d > 20 {
        return Err(Error::InvalidArgument("degree above 20 is not supported".into()));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("tol must be positive".into()));
    }
    if opts.ansatz == Ansatz::SymmetricTwo && mc != 2 {
        return Err(Error::InvalidArgument("the symmetric ansatz needs exactly 2 contexts".into()));
    }
    let sys = System::new(mc, d, opts.ansatz);
    let runs: Vec<(usize, DVector<f64>)> = (0..RESTARTS)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeded(derive_seed(opts.seed, i as u64));
            let theta = sys.solve(random_theta(&sys, &mut rng));
            (i, sys.expand(&theta))
        })
        .collect();
    // among solutions meeting tol, take the largest achievable deviation
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut closest = f64::INFINITY;
    for (_, x) in runs {
        let r = sys.residual(&x);
        closest = closest.min(r.amax());
        if r.amax() > opts.tol * 1e-2 {
            continue;
        }
        let dmax = (0..mc * d).map(|i| x[mc + i].abs()).fold(0.0, f64::max);
        if dmax == 0.0 {
            continue;
        }
        let eps_max = sys.tau * (0.5 / dmax).powi(d as i32);
        if best.as_ref().is_none_or(|(e, _)| eps_max > *e) {
            best = Some((eps_max, x));
        }
    }
    let Some((eps_max, mut x)) = best else {
        return Err(Error::Solver(format!(
            "no restart met the sub-top constraints with a nonzero top deviation (best residual {closest:.3e}, tol {:.1e})",
            opts.tol
        )));
    };
    let target = opts.epsilon.unwrap_or(eps_max);
    if !(target > 0.0) || target > eps_max * (1.0 + 1e-12) {
        return Err(Error::Solver(format!(
            "requested epsilon {target} outside (0, {eps_max}] reachable with rewards in [0,1]"
        )));
    }
    let c = (target / sys.tau).powf(1.0 / d as f64);
    for i in 0..mc * d {
        x[mc + i] *= c;
    }
    let mu: Vec<Vec<f64>> = (0..mc)
        .map(|m| (0..d).map(|t| (0.5 + sys.delta(&x, m, t)).clamp(0.0, 1.0)).collect())
        .collect();
    let weights: Vec<f64> = (0..mc).map(|m| x[m].max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut mix = Mixture {
        weights,
        mu,
        epsilon: 0.0,
        residual: 0.0,
        warning: None,
    };
    let (eps, residual) = mixture_moments(&mix);
    if residual > opts.tol {
        return Err(Error::Solver(format!("sub-top residual {residual:.3e} above tol {:.1e}", opts.tol)));
    }
    mix.epsilon = eps;
    mix.residual = residual;
    let regime = (2.0 * d as f64).powi(-2 * d as i32);
    if eps > regime {
        mix.warning = Some(format!("epsilon {eps:.3e} is above (2d)^(-2d) = {regime:.3e}"));
    }
    Ok(mix)
}

/// Top deviation and the largest sub-top multilinear residual
/// `|𝐌(x_S, 1…1) − (½)^|S||`, both recomputed from `μ`.
pub fn mixture_moments(mix: &Mixture) -> (f64, f64) {
    let d = mix.degree();
    let mut residual: f64 = 0.0;
    let mut top = 0.0;
    for mask in subsets(d) {
        let q = mask.count_ones() as i32;
        let m: f64 = mix
            .weights
            .iter()
            .zip(&mix.mu)
            .map(|(w, mu)| (0..d).filter(|t| mask >> t & 1 == 1).fold(*w, |a, t| a * mu[t]))
            .sum();
        let dev = m - 0.5f64.powi(q);
        if q as usize == d {
            top = dev;
        } else {
            residual = residual.max(dev.abs());
        }
    }
    (top, residual)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardInstance {
    pub model: Rmmdp,
    pub correct: Vec<usize>,
    pub mixture: Mixture,
    pub epsilon: f64,
}

/// Chain `s*_1 → … → s*_d → terminal` where every action moves forward and
/// only the correct action at each step draws from the mixture. An empty
/// `correct` sequence gives the all-fair-coin base system.
pub fn assemble_instance(mix: &Mixture, actions: usize, correct: &[usize]) -> Result<HardInstance> {
    let d = mix.degree();
    if actions < 2 {
        return Err(Error::InvalidArgument("hard instances need at least 2 actions".into()));
    }
    if !correct.is_empty() && correct.len() != d {
        return Err(Error::InvalidArgument(format!(
            "correct sequence has length {}, expected {d}",
            correct.len()
        )));
    }
    if let Some(a) = correct.iter().find(|&&a| a >= actions) {
        return Err(Error::InvalidArgument(format!("correct action {a} out of range")));
    }
    let states = d + 1;
    let mc = mix.weights.len();
    let mut transition = vec![0.0; states * actions * states];
    for s in 0..states {
        let next = (s + 1).min(d);
        for a in 0..actions {
            transition[(s * actions + a) * states + next] = 1.0;
        }
    }
    let mut init = vec![0.0; states];
    init[0] = 1.0;
    let mut rewards = vec![0.5; mc * states * actions * 2];
    for (t, &a) in correct.iter().enumerate() {
        for m in 0..mc {
            let base = ((m * states + t) * actions + a) * 2;
            rewards[base] = 1.0 - mix.mu[m][t];
            rewards[base + 1] = mix.mu[m][t];
        }
    }
    let model = Rmmdp::validated(
        states,
        actions,
        d,
        RewardSupport::binary(),
        transition,
        init,
        mix.weights.clone(),
        rewards,
    )?;
    Ok(HardInstance {
        model,
        correct: correct.to_vec(),
        epsilon: if correct.is_empty() { 0.0 } else { mix.epsilon },
        mixture: mix.clone(),
    })
}

impl HardInstance {
    /// Pairs `(s*_t, a*_t)`.
    pub fn correct_pairs(&self) -> Vec<Pair> {
        self.correct.iter().enumerate().map(|(t, a)| Pair::new(t, *a)).collect()
    }

    /// Same chain with every reward a fair coin.
    pub fn base_system(&self) -> Result<HardInstance> {
        assemble_instance(&self.mixture, self.model.num_actions(), &[])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityRow {
    pub prefix: Vec<usize>,
    pub conditional: f64,
    pub expected: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityReport {
    pub rows: Vec<ParityRow>,
    pub max_residual: f64,
}

/// `P(r_d = 1 | r_{1:d-1}, a*_{1:d})` against `½ ± ε·2^{d-1}`, the sign
/// being `+` when the prefix has an even number of zeros.
pub fn parity_check(inst: &HardInstance) -> ParityReport {
    let d = inst.model.horizon();
    let actions: Vec<usize> = if inst.correct.is_empty() { vec![0; d] } else { inst.correct.clone() };
    let x: Vec<Pair> = actions.iter().enumerate().map(|(t, a)| Pair::new(t, *a)).collect();
    let mut rows = Vec::new();
    let mut max_residual: f64 = 0.0;
    for bits in 0..(1usize << (d - 1)) {
        let prefix: Vec<usize> = (0..d - 1).map(|i| bits >> (d - 2 - i) & 1).collect();
        let den = moment_unchecked(&inst.model, &x[..d - 1], &prefix);
        let mut full = prefix.clone();
        full.push(1);
        let num = moment_unchecked(&inst.model, &x, &full);
        let conditional = num / den;
        let zeros = prefix.iter().filter(|z| **z == 0).count();
        let sign = if zeros % 2 == 0 { 1.0 } else { -1.0 };
        let expected = 0.5 + sign * inst.epsilon * 2f64.powi(d as i32 - 1);
        let residual = (conditional - expected).abs();
        max_residual = max_residual.max(residual);
        rows.push(ParityRow {
            prefix,
            conditional,
            expected,
            residual,
        });
    }
    ParityReport { rows, max_residual }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueCheck {
    pub v_star: f64,
    /// `d/2 + ε·2^{d-2}`.
    pub bound: f64,
    pub uniform_value: f64,
    pub pass: bool,
}

pub fn instance_value_check(inst: &HardInstance) -> Result<ValueCheck> {
    let d = inst.model.horizon() as f64;
    let (v_star, _) = optimal_plan(&inst.model)?;
    let bound = d / 2.0 + inst.epsilon * 2f64.powf(d - 2.0);
    let uniform_value = policy_value(&inst.model, &UniformPolicy).value;
    Ok(ValueCheck {
        v_star,
        bound,
        uniform_value,
        pass: v_star >= bound - 1e-9,
    })
}

/// Per-sequence KL between the instance and its base system for every
/// action sequence along the chain.
pub fn sequence_kls(inst: &HardInstance) -> Result<Vec<(Vec<usize>, f64)>> {
    let base = inst.base_system()?;
    let (d, na) = (inst.model.horizon(), inst.model.num_actions());
    let mut out = Vec::new();
    for code in 0..na.pow(d as u32) {
        let mut rest = code;
        let mut acts = vec![0; d];
        for slot in acts.iter_mut().rev() {
            *slot = rest % na;
            rest /= na;
        }
        let x: Vec<Pair> = acts.iter().enumerate().map(|(t, a)| Pair::new(t, *a)).collect();
        out.push((acts, sequence_kl(&inst.model, &base.model, &x)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn e1_mixture() -> Mixture {
        Mixture {
            weights: vec![0.5, 0.5],
            mu: vec![vec![0.2, 0.2], vec![0.8, 0.8]],
            epsilon: 0.09,
            residual: 0.0,
            warning: None,
        }
    }

    #[test]
    fn reference_mixture_moments() {
        let (top, res) = mixture_moments(&e1_mixture());
        assert_abs_diff_eq!(top, 0.09, epsilon = 1e-15);
        assert_eq!(res, 0.0);
    }

    #[test]
    fn solver_hits_target_epsilon() {
        let mix = build_mixture(&MixtureOptions {
            epsilon: Some(0.09),
            ..Default::default()
        })
        .unwrap();
        assert_abs_diff_eq!(mix.epsilon, 0.09, epsilon = 1e-12);
        assert!(mix.residual <= 1e-12);
        assert!(mix.warning.is_some());
    }

    #[test]
    fn single_context_degree_one() {
        let mix = build_mixture(&MixtureOptions {
            contexts: 1,
            degree: 1,
            epsilon: Some(0.1),
            ..Default::default()
        })
        .unwrap();
        assert_abs_diff_eq!(mix.mu[0][0], 0.6, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_ansatz_fails_at_degree_three() {
        let err = build_mixture(&MixtureOptions {
            degree: 3,
            ansatz: Ansatz::SymmetricTwo,
            ..Default::default()
        });
        assert!(err.is_err());
    }

    #[test]
    fn parity_and_value_of_reference_instance() {
        let inst = assemble_instance(&e1_mixture(), 2, &[0, 0]).unwrap();
        let rep = parity_check(&inst);
        assert!(rep.max_residual < 1e-15);
        let r1 = rep.rows.iter().find(|r| r.prefix == vec![1]).unwrap();
        assert_abs_diff_eq!(r1.conditional, 0.68, epsilon = 1e-15);
        let vc = instance_value_check(&inst).unwrap();
        assert_abs_diff_eq!(vc.v_star, 1.09, epsilon = 1e-9);
        assert_abs_diff_eq!(vc.uniform_value, 1.0, epsilon = 1e-12);
        let base = inst.base_system().unwrap();
        assert!(parity_check(&base).rows.iter().all(|r| r.conditional == 0.5));
    }

    #[test]
    fn two_contexts_cannot_reach_degree_three() {
        // b_t = -(w1/w2)·a_t, so every pair constraint forces a_i·a_j = 0.
        let err = build_mixture(&MixtureOptions {
            degree: 3,
            ..Default::default()
        });
        assert!(err.is_err());
    }

    #[test]
    fn three_contexts_cannot_reach_degree_three() {
        // With δ = μ − ½, the columns δ(t) must be w-orthogonal to 1 and to
        // each other; only two fit in a 3-dim space, so one is zero.
        let err = build_mixture(&MixtureOptions {
            contexts: 3,
            degree: 3,
            ..Default::default()
        });
        assert!(err.is_err());
    }

    #[test]
    fn four_contexts_reach_degree_three() {
        let mix = build_mixture(&MixtureOptions {
            contexts: 4,
            degree: 3,
            ..Default::default()
        })
        .unwrap();
        assert!(mix.epsilon > 1e-3, "{}", mix.epsilon);
        assert!(mix.residual <= 1e-10);
        let inst = assemble_instance(&mix, 2, &[1, 0, 1]).unwrap();
        assert!(parity_check(&inst).max_residual < 1e-9);
        let vc = instance_value_check(&inst).unwrap();
        assert!(vc.pass);
        for (acts, kl) in sequence_kls(&inst).unwrap() {
            if acts != vec![1, 0, 1] {
                assert!(kl.abs() < 1e-9, "{acts:?} {kl}");
            }
        }
    }
}
