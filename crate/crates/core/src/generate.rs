//! Small reference models and random instance generators.

use rand::Rng;

use crate::model::{RewardSupport, Rmmdp};

/// Single-state, two-action, two-context model with binary rewards:
/// action 0 pays Bern(0.2) / Bern(0.8) in the two contexts, action 1 pays
/// Bern(0.5) in both. Equal mixing weights.
pub fn example_e1(horizon: usize) -> Rmmdp {
    Rmmdp::from_parts(
        1,
        2,
        horizon,
        RewardSupport::binary(),
        vec![1.0, 1.0],
        vec![1.0],
        vec![0.5, 0.5],
        vec![
            0.8, 0.2, 0.5, 0.5, // context 0
            0.2, 0.8, 0.5, 0.5, // context 1
        ],
    )
    .expect("static dimensions")
}

/// Copy of `model` whose every reward distribution is uniform over the support
/// (a single context).
pub fn uniform_rewards(model: &Rmmdp) -> Rmmdp {
    let z = model.support_size();
    let rewards = vec![1.0 / z as f64; model.num_pairs() * z];
    model.with_latent(vec![1.0], rewards).expect("dimensions")
}

/// Shape of a random instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RandomSpec {
    pub states: usize,
    pub actions: usize,
    pub support: usize,
    pub horizon: usize,
    pub contexts: usize,
}

pub(crate) fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    // uniform on the simplex via normalized exponentials
    let mut v: Vec<f64> = (0..n)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

fn evenly_spaced_support(z: usize) -> RewardSupport {
    if z == 1 {
        return RewardSupport::new(vec![1.0]).expect("valid");
    }
    RewardSupport::new((0..z).map(|i| i as f64 / (z - 1) as f64).collect()).expect("valid")
}

/// Random RMMDP with Dirichlet(1) rows everywhere and support `{0, 1/(Z-1), …, 1}`.
pub fn random_model<R: Rng + ?Sized>(spec: RandomSpec, rng: &mut R) -> Rmmdp {
    let RandomSpec {
        states,
        actions,
        support,
        horizon,
        contexts,
    } = spec;
    let mut transition = Vec::with_capacity(states * actions * states);
    for _ in 0..states * actions {
        transition.extend(random_simplex(rng, states));
    }
    let init = random_simplex(rng, states);
    let weights = random_simplex(rng, contexts);
    let mut rewards = Vec::with_capacity(contexts * states * actions * support);
    for _ in 0..contexts * states * actions {
        rewards.extend(random_simplex(rng, support));
    }
    Rmmdp::from_parts(
        states,
        actions,
        horizon,
        evenly_spaced_support(support),
        transition,
        init,
        weights,
        rewards,
    )
    .expect("consistent dimensions")
}

/// Random latent part (weights and reward tables) on top of `model`'s dynamics.
pub fn random_latent<R: Rng + ?Sized>(model: &Rmmdp, contexts: usize, rng: &mut R) -> Rmmdp {
    let z = model.support_size();
    let weights = random_simplex(rng, contexts);
    let mut rewards = Vec::new();
    for _ in 0..contexts * model.num_pairs() {
        rewards.extend(random_simplex(rng, z));
    }
    model.with_latent(weights, rewards).expect("dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_model;
    use crate::rng::seeded;

    #[test]
    fn random_models_validate() {
        let mut rng = seeded(1);
        for _ in 0..20 {
            let m = random_model(
                RandomSpec { states: 3, actions: 2, support: 3, horizon: 2, contexts: 3 },
                &mut rng,
            );
            assert!(validate_model(&m).is_empty());
        }
    }
}
