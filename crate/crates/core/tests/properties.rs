use std::collections::HashMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use rmmdp::analyze::{build_levels, event_probability, tv_on_event};
use rmmdp::env::{run_augmented_episode, AugmentedAction, Mark, RmmdpEnv};
use rmmdp::explore::{all_keys, MomentTable};
use rmmdp::fit::{fit_moment_matching, violation_report, FitOptions};
use rmmdp::generate::{random_latent, random_model, RandomSpec};
use rmmdp::hardgen::{assemble_instance, build_mixture, parity_check, MixtureOptions};
use rmmdp::plan::{optimal_plan, policy_value};
use rmmdp::policy::HashedPolicy;
use rmmdp::rng::seeded;
use rmmdp::{belief_update, moment_value, trajectory_probability, Belief, MomentKey, Pair, Rmmdp, Step, Trajectory};

fn spec() -> impl Strategy<Value = RandomSpec> {
    (1usize..=2, 1usize..=2, 2usize..=3, 1usize..=3, 1usize..=3).prop_map(|(states, actions, support, horizon, contexts)| {
        RandomSpec {
            states,
            actions,
            support,
            horizon,
            contexts,
        }
    })
}

fn model(spec: RandomSpec, seed: u64) -> Rmmdp {
    random_model(spec, &mut seeded(seed))
}

fn random_pairs(m: &Rmmdp, len: usize, seed: u64) -> (Vec<Pair>, Vec<usize>) {
    let mut rng = seeded(seed);
    let pairs = (0..len)
        .map(|_| Pair::new(rng.random_range(0..m.num_states()), rng.random_range(0..m.num_actions())))
        .collect();
    let z = (0..len).map(|_| rng.random_range(0..m.support_size())).collect();
    (pairs, z)
}

fn hashed(seed: u64) -> HashedPolicy {
    HashedPolicy {
        seed,
        deterministic: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn moments_ignore_joint_permutations(spec in spec(), seed: u64, len in 1usize..=5) {
        let m = model(spec, seed);
        let (pairs, z) = random_pairs(&m, len, seed ^ 1);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut seeded(seed ^ 2));
        let p2: Vec<Pair> = order.iter().map(|i| pairs[*i]).collect();
        let z2: Vec<usize> = order.iter().map(|i| z[*i]).collect();
        let a = moment_value(&m, &pairs, &z).unwrap();
        let b = moment_value(&m, &p2, &z2).unwrap();
        prop_assert!((a - b).abs() <= 1e-15);
    }

    #[test]
    fn moments_marginalize(spec in spec(), seed: u64, len in 1usize..=4) {
        let m = model(spec, seed);
        let (pairs, z) = random_pairs(&m, len, seed ^ 3);
        let mut zz = z.clone();
        let total: f64 = (0..m.support_size())
            .map(|last| {
                zz[len - 1] = last;
                moment_value(&m, &pairs, &zz).unwrap()
            })
            .sum();
        let lower = if len == 1 { 1.0 } else { moment_value(&m, &pairs[..len - 1], &z[..len - 1]).unwrap() };
        prop_assert!((total - lower).abs() <= 1e-14);
    }

    #[test]
    fn trajectory_probabilities_sum_to_one(spec in spec(), seed: u64) {
        let m = model(spec, seed);
        let pol = hashed(seed);
        let (s, a, z, h) = (m.num_states(), m.num_actions(), m.support_size(), m.horizon());
        let per_step = s * a * z;
        let mut total = 0.0;
        for code in 0..per_step.pow(h as u32) {
            let steps = (0..h)
                .map(|t| {
                    let c = code / per_step.pow(t as u32) % per_step;
                    Step { state: c / (a * z), action: c / z % a, reward: c % z }
                })
                .collect();
            total += trajectory_probability(&m, &pol, &Trajectory::new(steps));
        }
        prop_assert!((total - 1.0).abs() <= 1e-12, "{total}");
    }

    #[test]
    fn belief_updates_commute(spec in spec(), seed: u64) {
        let m = model(spec, seed);
        prop_assume!(m.num_pairs() >= 2);
        let (p1, p2) = (Pair::new(0, 0), Pair::new(m.num_states() - 1, m.num_actions() - 1));
        let (z1, z2) = (seed as usize % m.support_size(), (seed >> 8) as usize % m.support_size());
        let b0 = Belief::new(m.weights().to_vec()).unwrap();
        let ab = belief_update(&m, &belief_update(&m, &b0, p1, z1).unwrap(), p2, z2).unwrap();
        let ba = belief_update(&m, &belief_update(&m, &b0, p2, z2).unwrap(), p1, z1).unwrap();
        for (x, y) in ab.probs().iter().zip(ba.probs()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn committed_key_matches_marked_steps(spec in spec(), seed: u64, degree in 1usize..=3) {
        let m = model(spec, seed);
        let mut env = RmmdpEnv::new(&m, seeded(seed));
        let mut rng = seeded(seed ^ 5);
        let mut indices = Vec::new();
        let rec = run_augmented_episode(&mut env, degree, |_, aug| {
            indices.push(aug.index);
            AugmentedAction {
                action: rng.random_range(0..m.num_actions()),
                mark: Mark::ALL[rng.random_range(0..3)],
            }
        });
        prop_assert!(indices.windows(2).all(|w| w[0] <= w[1]));
        let steps = &rec.trajectory.steps;
        let marked: Vec<Pair> = rec.marked_steps.iter().map(|t| steps[*t].pair()).collect();
        if let Some(c) = rec.committed {
            prop_assert_eq!(c.key, MomentKey::from_pairs(marked));
        }
    }

    #[test]
    fn optimal_value_grows_with_horizon(spec in spec(), seed: u64) {
        let m = model(spec, seed);
        let longer = m.with_horizon(m.horizon() + 1).unwrap();
        let (v, _) = optimal_plan(&m).unwrap();
        let (v2, _) = optimal_plan(&longer).unwrap();
        prop_assert!(v2 >= v - 1e-12);
    }

    #[test]
    fn value_gap_is_bounded_by_tv(spec in spec(), seed: u64) {
        let m1 = model(spec, seed);
        let m2 = random_latent(&m1, 2, &mut seeded(seed ^ 7));
        let pol = hashed(seed);
        let tv = tv_on_event(&m1, &m2, &pol, &|_| true).unwrap();
        let gap = (policy_value(&m1, &pol).value - policy_value(&m2, &pol).value).abs();
        prop_assert!(gap <= m1.horizon() as f64 * tv + 1e-12);
    }

    #[test]
    fn tv_is_symmetric(spec in spec(), seed: u64) {
        let m1 = model(spec, seed);
        let m2 = random_latent(&m1, 2, &mut seeded(seed ^ 9));
        let pol = hashed(seed);
        let ev = |x: &[Pair]| x[0].action == 0;
        let a = tv_on_event(&m1, &m2, &pol, &ev).unwrap();
        let b = tv_on_event(&m2, &m1, &pol, &ev).unwrap();
        prop_assert!((a - b).abs() <= 1e-14);
    }

    #[test]
    fn level_sets_partition(spec in spec(), seed: u64, episodes in 100u64..100_000) {
        let m = model(spec, seed);
        let degree = 2.min(m.horizon());
        let mut rng = seeded(seed ^ 11);
        let counts: HashMap<MomentKey, u64> = all_keys(m.num_states(), m.num_actions(), degree)
            .into_iter()
            .map(|k| (k, rng.random_range(0..episodes)))
            .collect();
        let ls = build_levels(&MomentTable::new(m.support_size()), episodes, m.num_pairs(), degree, 3.0)
            .with_counts(counts);
        let pol = hashed(seed);
        let total: f64 = (0..ls.top() + 2)
            .map(|l| event_probability(&m, &pol, &|x: &[Pair]| ls.level_of(x) == l).unwrap())
            .sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fit_is_deterministic_and_sound(seed: u64, contexts in 1usize..=2) {
        let truth = model(RandomSpec { states: 2, actions: 1, support: 2, horizon: 3, contexts: 2 }, seed);
        let keys = all_keys(2, 1, 3);
        let table = MomentTable::exact(&truth, keys, 1000);
        let opts = FitOptions { contexts, restarts: 4, max_iters: 100, seed, ..Default::default() };
        let a = fit_moment_matching(&table, 1.0, 2, 1, &opts).unwrap();
        let b = fit_moment_matching(&table, 1.0, 2, 1, &opts).unwrap();
        prop_assert_eq!(&a, &b);
        let rep = violation_report(&a.latent, &table, 1.0);
        prop_assert_eq!(a.feasible, rep.feasible());
        if a.feasible {
            prop_assert_eq!(rep.max_slack, 0.0);
        }
    }

    #[test]
    fn relabeled_fit_stays_feasible(seed: u64) {
        let truth = model(RandomSpec { states: 1, actions: 2, support: 2, horizon: 3, contexts: 2 }, seed);
        let table = MomentTable::exact(&truth, all_keys(1, 2, 3), 1000);
        let opts = FitOptions { contexts: 2, restarts: 4, max_iters: 100, seed, ..Default::default() };
        let fit = fit_moment_matching(&table, 1.0, 1, 2, &opts).unwrap();
        let swapped = fit.latent.permuted(&[1, 0]);
        let rep = violation_report(&swapped, &table, 1.0);
        prop_assert_eq!(rep.feasible(), fit.feasible);
        prop_assert!((rep.max_slack - fit.report.max_slack).abs() <= 1e-15);
    }

    #[test]
    fn generated_instances_satisfy_parity(seed: u64, big in any::<bool>()) {
        let (contexts, degree) = if big { (4, 3) } else { (2, 2) };
        let mix = build_mixture(&MixtureOptions { contexts, degree, seed, ..Default::default() }).unwrap();
        let correct: Vec<usize> = (0..degree).map(|t| (seed as usize >> t) & 1).collect();
        let inst = assemble_instance(&mix, 2, &correct).unwrap();
        let rep = parity_check(&inst);
        prop_assert!(rep.max_residual <= mix.residual.max(1e-12) * 2f64.powi(degree as i32) * 4.0, "{}", rep.max_residual);
    }
}
