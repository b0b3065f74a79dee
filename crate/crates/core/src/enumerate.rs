//! Exhaustive trajectory enumeration shared by the exact evaluators.

use crate::error::{Error, Result};
use crate::model::{Rmmdp, Step};
use crate::policy::Policy;

/// Default cap on enumerated objects (trajectories, prefixes, history nodes).
pub const ENUMERATION_BUDGET: u128 = 1_000_000;

/// `base^exp`, saturating.
pub fn saturating_pow(base: usize, exp: usize) -> u128 {
    (0..exp).fold(1u128, |acc, _| acc.saturating_mul(base as u128))
}

pub fn check_budget(what: &'static str, needed: u128, budget: u128) -> Result<()> {
    if needed > budget {
        Err(Error::Resource {
            what,
            needed,
            budget,
        })
    } else {
        Ok(())
    }
}

/// Number of trajectories `(S·A·Z)^H`.
pub fn trajectory_count(model: &Rmmdp) -> u128 {
    saturating_pow(
        model.num_states() * model.num_actions() * model.support_size(),
        model.horizon(),
    )
}

struct Walker<'a, F> {
    models: &'a [&'a Rmmdp],
    policy: &'a dyn Policy,
    visit: F,
    steps: Vec<Step>,
    // products[depth][k][m]
    products: Vec<Vec<Vec<f64>>>,
    probs: Vec<f64>,
}

/// Calls `visit(steps, weight, joint)` for every trajectory reachable with
/// positive weight, where `weight = ν(s_1)·ΠT·Ππ` is shared by all models and
/// `joint[k]` is the trajectory probability under `models[k]`.
///
/// All models must share dynamics with `models[0]`; only the latent reward
/// part is read from the others.
pub fn for_each_trajectory<F>(models: &[&Rmmdp], policy: &dyn Policy, visit: F)
where
    F: FnMut(&[Step], f64, &[f64]),
{
    let base = models[0];
    let horizon = base.horizon();
    let products = (0..=horizon)
        .map(|_| models.iter().map(|m| vec![0.0; m.num_contexts()]).collect())
        .collect();
    let mut walker = Walker {
        models,
        policy,
        visit,
        steps: Vec::with_capacity(horizon),
        products,
        probs: vec![0.0; base.num_actions()],
    };
    for (k, m) in models.iter().enumerate() {
        walker.products[0][k].copy_from_slice(m.weights());
    }
    for (s, p) in base.init().iter().enumerate() {
        if *p > 0.0 {
            walker.expand(s, *p);
        }
    }
}

impl<F> Walker<'_, F>
where
    F: FnMut(&[Step], f64, &[f64]),
{
    fn expand(&mut self, state: usize, weight: f64) {
        let base = self.models[0];
        let depth = self.steps.len();
        let horizon = base.horizon();
        self.policy.action_probs(&self.steps, state, &mut self.probs);
        let probs = self.probs.clone();
        for (a, pa) in probs.iter().enumerate() {
            if *pa <= 0.0 {
                continue;
            }
            let w_a = weight * pa;
            for z in 0..base.support_size() {
                let mut alive = false;
                for k in 0..self.models.len() {
                    let model = self.models[k];
                    for m in 0..model.num_contexts() {
                        let v = self.products[depth][k][m] * model.reward_row(m, state, a)[z];
                        self.products[depth + 1][k][m] = v;
                        alive |= v > 0.0;
                    }
                }
                if !alive {
                    continue;
                }
                self.steps.push(Step {
                    state,
                    action: a,
                    reward: z,
                });
                if depth + 1 == horizon {
                    let joint: Vec<f64> = self.products[depth + 1]
                        .iter()
                        .map(|p| w_a * p.iter().sum::<f64>())
                        .collect();
                    (self.visit)(&self.steps, w_a, &joint);
                } else {
                    for (next, pt) in base.transition_row(state, a).iter().enumerate() {
                        if *pt > 0.0 {
                            self.expand(next, w_a * pt);
                        }
                    }
                }
                self.steps.pop();
            }
        }
    }
}
