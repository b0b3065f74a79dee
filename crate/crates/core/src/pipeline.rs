//! Estimate moments, match them with a latent model, plan on the match.

use serde::{Deserialize, Serialize};

use crate::analyze::default_degree;
use crate::env::EpisodicEnv;
use crate::error::Result;
use crate::explore::{estimate_moments, Dims, ExplorationConfig, ExplorationOutcome, TransitionEstimate};
use crate::fit::{fit_moment_matching, FitOptions, FitResult, LatentModel};
use crate::model::{RewardSupport, Rmmdp};
use crate::plan::{optimal_plan, policy_value, BeliefPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Em2Config {
    pub explore: ExplorationConfig,
    pub fit: FitOptions,
    /// Radius multiplier for the single retry after an infeasible fit.
    pub retry_slack: f64,
}

impl Em2Config {
    /// Defaults with `d = min(2M − 1, H)` for `M` fitted contexts.
    pub fn for_contexts(contexts: usize, horizon: usize) -> Self {
        Em2Config {
            explore: ExplorationConfig {
                degree: default_degree(contexts, horizon),
                ..Default::default()
            },
            fit: FitOptions {
                contexts,
                ..Default::default()
            },
            retry_slack: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Em2Status {
    Success,
    BudgetExhausted,
    FitInfeasible,
}

impl Em2Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Em2Status::Success => 0,
            Em2Status::BudgetExhausted => 2,
            Em2Status::FitInfeasible => 3,
        }
    }
}

pub struct Em2Run {
    pub exploration: ExplorationOutcome,
    pub fit: FitResult,
    pub retried: bool,
    pub fitted: Rmmdp,
    pub planned_value: f64,
    pub policy: BeliefPolicy,
    pub status: Em2Status,
}

/// Model built from the estimated dynamics and a fitted latent part.
pub fn fitted_model(dims: Dims, support: RewardSupport, trans: &TransitionEstimate, latent: &LatentModel) -> Result<Rmmdp> {
    Rmmdp::validated(
        dims.states,
        dims.actions,
        dims.horizon,
        support,
        trans.kernel(),
        trans.init(),
        latent.weights.clone(),
        latent.rewards.clone(),
    )
}

/// Runs the whole loop against a black-box environment. Only observable
/// quantities (states, actions, reward indices) are used.
pub fn run_em2<E: EpisodicEnv + ?Sized>(env: &mut E, cfg: &Em2Config) -> Result<Em2Run> {
    let exploration = estimate_moments(env, &cfg.explore)?;
    let dims = exploration.dims;
    let mut fit = fit_moment_matching(&exploration.table, exploration.iota_c, dims.states, dims.actions, &cfg.fit)?;
    let mut retried = false;
    if !fit.feasible {
        let opts = FitOptions {
            slack_scale: cfg.fit.slack_scale * cfg.retry_slack,
            ..cfg.fit.clone()
        };
        fit = fit_moment_matching(&exploration.table, exploration.iota_c, dims.states, dims.actions, &opts)?;
        retried = true;
    }
    let fitted = fitted_model(dims, env.support(), &exploration.transitions, &fit.latent)?;
    let (planned_value, policy) = optimal_plan(&fitted)?;
    let status = if !fit.feasible {
        Em2Status::FitInfeasible
    } else if exploration.budget_exhausted {
        Em2Status::BudgetExhausted
    } else {
        Em2Status::Success
    };
    Ok(Em2Run {
        exploration,
        fit,
        retried,
        fitted,
        planned_value,
        policy,
        status,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub v_star: f64,
    pub v_policy: f64,
    pub suboptimality: f64,
    pub exact: bool,
}

/// `V* − V^π̂` on the true model.
pub fn evaluate(truth: &Rmmdp, policy: &BeliefPolicy) -> Result<Evaluation> {
    let (v_star, _) = optimal_plan(truth)?;
    let pv = policy_value(truth, policy);
    Ok(Evaluation {
        v_star,
        v_policy: pv.value,
        suboptimality: v_star - pv.value,
        exact: pv.exact,
    })
}
