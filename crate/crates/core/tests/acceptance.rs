//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rmmdp::analyze::{
    build_levels, default_degree, default_policies, event_probability, kl_identity, level_thresholds,
    verify_tv_bound, AdaptiveHashed, NamedEvent, Repeat, RewardBlind, Strategy,
};
use rmmdp::env::RmmdpEnv;
use rmmdp::explore::{estimate_moments, z_from_index, Dims, ExplorationConfig};
use rmmdp::fit::{third_moment_predict, LatentModel};
use rmmdp::generate::{example_e1, random_latent, random_model, uniform_rewards, RandomSpec};
use rmmdp::hardgen::{assemble_instance, build_mixture, instance_value_check, parity_check, sequence_kls, MixtureOptions};
use rmmdp::pipeline::{evaluate, run_em2, Em2Config};
use rmmdp::plan::{brute_force_optimal, optimal_plan};
use rmmdp::policy::{FixedActions, HashedPolicy, Policy};
use rmmdp::rng::{derive_seed, seeded};
use rmmdp::{moment_value, Pair, Rmmdp};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn third_moment_identity() -> Outcome {
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let pairs = [Pair::new(0, 0), Pair::new(0, 1), Pair::new(0, 2)];
    let mut latent = LatentModel {
        states: 1,
        actions: 3,
        support: 2,
        weights: vec![0.5, 0.5],
        rewards: vec![0.0; 12],
    };
    let mut worst = 0.0f64;
    let mut count = 0u64;
    let set = |lat: &mut LatentModel, m: usize, mu: [f64; 3]| {
        for (a, p) in mu.iter().enumerate() {
            lat.rewards[(m * 3 + a) * 2] = 1.0 - p;
            lat.rewards[(m * 3 + a) * 2 + 1] = *p;
        }
    };
    for &a1 in &grid {
        for &b1 in &grid {
            for &c1 in &grid {
                set(&mut latent, 0, [a1, b1, c1]);
                for &a2 in &grid {
                    for &b2 in &grid {
                        for &c2 in &grid {
                            set(&mut latent, 1, [a2, b2, c2]);
                            let m = |idx: &[usize]| {
                                let ps: Vec<Pair> = idx.iter().map(|i| pairs[*i]).collect();
                                latent.moment(&ps, &vec![1; idx.len()])
                            };
                            let predicted = third_moment_predict(
                                [m(&[0]), m(&[1]), m(&[2])],
                                [m(&[0, 1]), m(&[0, 2]), m(&[1, 2])],
                            );
                            worst = worst.max((predicted - m(&[0, 1, 2])).abs());
                            count += 1;
                        }
                    }
                }
            }
        }
    }
    outcome(worst <= 1e-12, format!("{count} grid points, max error {worst:.2e}"))
}

fn planner_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let mut rng = seeded(derive_seed(4000, i));
        let spec = RandomSpec {
            states: 1 + (i % 3) as usize,
            actions: 1 + (i / 3 % 3) as usize,
            support: 2,
            horizon: 1 + (i / 9 % 4) as usize,
            contexts: 1 + (i / 36 % 3) as usize,
        };
        let model = random_model(spec, &mut rng);
        let (v, _) = match optimal_plan(&model) {
            Ok(x) => x,
            Err(e) => return outcome(false, format!("instance {i}: {e}")),
        };
        let brute = match brute_force_optimal(&model) {
            Ok(x) => x,
            Err(e) => return outcome(false, format!("instance {i}: {e}")),
        };
        worst = worst.max((v - brute).abs());
    }
    outcome(worst <= 1e-9, format!("100 instances, max |planner - brute force| {worst:.2e}"))
}

/// Copy of `m` with every reward row nudged by at most `scale`.
fn perturbed(m: &Rmmdp, scale: f64, seed: u64) -> Rmmdp {
    use rand::Rng;
    let mut rng = seeded(seed);
    let z = m.support_size();
    let mut rewards = m.rewards_flat().to_vec();
    for row in rewards.chunks_mut(z) {
        for p in row.iter_mut() {
            *p = (*p + scale * (rng.random::<f64>() - 0.5)).max(1e-3);
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
    }
    m.with_latent(m.weights().to_vec(), rewards).expect("same shape")
}

fn tv_bound() -> Outcome {
    let mut violations = 0;
    let mut checks = 0;
    let mut tightest = f64::INFINITY;
    for i in 0..100u64 {
        let mut rng = seeded(derive_seed(5000, i));
        let contexts = 1 + (i % 2) as usize;
        let spec = RandomSpec {
            states: 1 + (i / 2 % 2) as usize,
            actions: 2,
            support: 2,
            horizon: 2 + (i / 4 % 2) as usize,
            contexts,
        };
        let m1 = random_model(spec, &mut rng);
        let m2 = if i % 3 == 0 {
            random_latent(&m1, 2, &mut rng)
        } else {
            perturbed(&m1, 10f64.powi(-(1 + (i % 4) as i32)), derive_seed(5001, i))
        };
        let degree = default_degree(m1.num_contexts().max(m2.num_contexts()), spec.horizon);
        let table = rmmdp::explore::MomentTable::new(2);
        let ls = build_levels(&table, 4096, m1.num_pairs(), degree, 2.0);
        let mut counts = HashMap::new();
        for (j, key) in rmmdp::explore::all_keys(spec.states, 2, degree).into_iter().enumerate() {
            counts.insert(key, (derive_seed(5002, i * 1000 + j as u64) % 2048) as u64);
        }
        let ls = ls.with_counts(counts);
        let mut events = NamedEvent::levels(&ls);
        events.push(NamedEvent::everything());
        events.push(NamedEvent::new("visits-00", |x: &[Pair]| x.contains(&Pair::new(0, 0))));
        let policies = default_policies(&m1);
        let rep = match verify_tv_bound(&m1, &m2, degree, &policies, &events) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("pair {i}: {e}")),
        };
        violations += rep.violations;
        checks += rep.checks.len();
        for c in &rep.checks {
            if c.lhs > 0.0 {
                tightest = tightest.min(c.rhs / c.lhs);
            }
        }
    }
    outcome(
        violations == 0,
        format!("{checks} policy/event checks on 100 pairs, {violations} violations, tightest rhs/lhs {tightest:.3e}"),
    )
}

fn kl_identity_suite() -> Outcome {
    let e1 = example_e1(2);
    let u = uniform_rewards(&e1);
    let reference = match kl_identity(&e1, &u, &Repeat(FixedActions::constant(0, 2)), 1) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let ref_ok = (reference.rhs - 0.066278).abs() < 5e-7 && reference.diff <= 1e-10;
    let mut worst = reference.diff;
    let mut cases = 1;
    for i in 0..19u64 {
        let mut rng = seeded(derive_seed(6000, i));
        let horizon = 1 + (i % 3) as usize;
        let spec = RandomSpec {
            states: 1 + (i / 3 % 2) as usize,
            actions: 2,
            support: 2,
            horizon,
            contexts: 2,
        };
        let m1 = random_model(spec, &mut rng);
        let m2 = random_latent(&m1, 1 + (i % 2) as usize, &mut rng);
        let episodes = if spec.states == 2 && horizon == 3 { 2 } else { 3 };
        // in-episode play must ignore the episode's own rewards for the
        // identity to hold; across episodes the strategy adapts freely
        let hashed = RewardBlind(Repeat(HashedPolicy {
            seed: i,
            deterministic: false,
        }));
        let adaptive = RewardBlind(AdaptiveHashed { seed: i });
        let strategy: &dyn Strategy = if i % 2 == 0 { &hashed } else { &adaptive };
        match kl_identity(&m1, &m2, strategy, episodes) {
            Ok(r) => worst = worst.max(r.diff),
            Err(e) => return outcome(false, format!("case {i}: {e}")),
        }
        cases += 1;
    }
    outcome(
        ref_ok && worst <= 1e-10,
        format!("{cases} cases, max |lhs - rhs| {worst:.2e}, E1 vs uniform rhs {:.6}", reference.rhs),
    )
}

fn hard_instance_suite() -> Outcome {
    let mix = match build_mixture(&MixtureOptions {
        contexts: 2,
        degree: 2,
        epsilon: Some(0.09),
        ..Default::default()
    }) {
        Ok(m) => m,
        Err(e) => return outcome(false, e.to_string()),
    };
    let correct = [1, 0];
    let inst = match assemble_instance(&mix, 2, &correct) {
        Ok(i) => i,
        Err(e) => return outcome(false, e.to_string()),
    };
    let x: Vec<Pair> = correct.iter().enumerate().map(|(t, a)| Pair::new(t, *a)).collect();
    let mut sub_top = 0.0f64;
    for p in &x {
        sub_top = sub_top.max((moment_value(&inst.model, &[*p], &[1]).unwrap() - 0.5).abs());
    }
    let rep = parity_check(&inst);
    let cond = |prefix: usize| {
        rep.rows
            .iter()
            .find(|r| r.prefix == vec![prefix])
            .map_or(f64::NAN, |r| r.conditional)
    };
    let (c1, c0) = (cond(1), cond(0));
    let parity_ok = (c1 - 0.68).abs() <= 1e-12 && (c0 - 0.32).abs() <= 1e-12;
    let vc = match instance_value_check(&inst) {
        Ok(v) => v,
        Err(e) => return outcome(false, e.to_string()),
    };
    let value_ok = (vc.v_star - 1.09).abs() <= 1e-9 && (vc.bound - 1.09).abs() <= 1e-9;
    let uniform_ok = (vc.uniform_value - 1.0).abs() <= 1e-12;
    let mut kl_off = 0.0f64;
    let mut kl_on = 0.0;
    for (acts, kl) in sequence_kls(&inst).unwrap() {
        if acts == correct {
            kl_on = kl;
        } else {
            kl_off = kl_off.max(kl.abs());
        }
    }
    let kl_ok = kl_off <= 1e-12 && kl_on > 0.0;
    outcome(
        sub_top <= 1e-12 && parity_ok && value_ok && uniform_ok && kl_ok,
        format!(
            "sub-top dev {sub_top:.1e}, P(r2=1|r1=1) {c1:.12}, P(r2=1|r1=0) {c0:.12}, V* {:.12}, uniform {:.12}, off-sequence KL {kl_off:.1e}",
            vc.v_star, vc.uniform_value
        ),
    )
}

/// `P(X ≤ k)` for `X ~ Bin(n, p)`.
fn binomial_cdf(k: u64, n: u64, p: f64) -> f64 {
    let mut term = (1.0 - p).powi(n as i32);
    let mut total = term;
    for i in 0..k {
        term *= (n - i) as f64 / (i + 1) as f64 * p / (1.0 - p);
        total += term;
    }
    total.min(1.0)
}

fn concentration() -> Outcome {
    let model = example_e1(2);
    let cfg = ExplorationConfig {
        degree: 2,
        max_episodes: 50_000,
        ..Default::default()
    };
    let dims = Dims::of_model(&model);
    let iota = cfg.iota_c(dims);
    let runs = 50u64;
    let mut held = 0u64;
    let mut worst_ratio = 0.0f64;
    for i in 0..runs {
        let mut env = RmmdpEnv::new(&model, seeded(derive_seed(3000, i)));
        let out = match estimate_moments(&mut env, &cfg) {
            Ok(o) => o,
            Err(e) => return outcome(false, e.to_string()),
        };
        let mut ok = true;
        for (key, entry) in out.table.iter() {
            if entry.count == 0 {
                continue;
            }
            let radius = (iota / entry.count as f64).sqrt();
            for (zi, p) in entry.probs.iter().enumerate() {
                let z = z_from_index(zi, key.len(), 2);
                let exact = moment_value(&model, key.pairs(), &z).unwrap();
                let ratio = (p - exact).abs() / radius;
                worst_ratio = worst_ratio.max(ratio);
                ok &= ratio <= 1.0;
            }
        }
        held += u64::from(ok);
    }
    // H0: the event holds with probability ≥ 1 − η; reject at the 1% level
    let p_value = binomial_cdf(held, runs, 1.0 - cfg.eta);
    outcome(
        p_value >= 0.01,
        format!("event held in {held}/{runs} runs (p = {p_value:.3}), max |error|/radius {worst_ratio:.3}"),
    )
}

fn end_to_end() -> Outcome {
    let budgets = [1_000u64, 10_000, 100_000, 200_000];
    let spec = RandomSpec {
        states: 2,
        actions: 2,
        support: 2,
        horizon: 3,
        contexts: 2,
    };
    let mut medians = Vec::new();
    let mut passes_at_max = 0;
    for &k in &budgets {
        let mut subs = Vec::new();
        for i in 0..20u64 {
            let truth = random_model(spec, &mut seeded(derive_seed(1000, i)));
            let mut env = RmmdpEnv::new(&truth, seeded(derive_seed(2000, i)));
            let mut cfg = Em2Config::for_contexts(2, 3);
            cfg.explore.max_episodes = k;
            let run = match run_em2(&mut env, &cfg) {
                Ok(r) => r,
                Err(e) => return outcome(false, format!("K={k} model {i}: {e}")),
            };
            let ev = match evaluate(&truth, &run.policy) {
                Ok(e) => e,
                Err(e) => return outcome(false, format!("K={k} model {i}: {e}")),
            };
            subs.push(ev.suboptimality);
        }
        if k == 200_000 {
            passes_at_max = subs.iter().filter(|s| **s <= 0.1).count();
        } else {
            subs.sort_by(f64::total_cmp);
            medians.push((subs[9] + subs[10]) / 2.0);
        }
    }
    // once the estimate is exact the median sits at roundoff level
    let monotone = medians.windows(2).all(|w| w[1] <= w[0] + 1e-12) && medians[2] < medians[0];
    outcome(
        passes_at_max >= 18 && monotone,
        format!(
            "{passes_at_max}/20 within 0.1 at K=2e5; medians {:.3e} / {:.3e} / {:.3e} at K=1e3/1e4/1e5",
            medians[0], medians[1], medians[2]
        ),
    )
}

fn level_sets() -> Outcome {
    let mut exact = true;
    for &(k, pairs, d, iota) in &[(1024u64, 2usize, 2usize, 20.0), (100_000, 4, 3, 30.0), (50_000, 2, 2, 5.0), (7, 3, 1, 0.5)] {
        let got = level_thresholds(k, pairs, d, iota);
        let mut expect = vec![k as f64 / (pairs as f64).powi(d as i32)];
        while expect[expect.len() - 1] / 4.0 > iota {
            let next = expect[expect.len() - 1] / 4.0;
            expect.push(next);
        }
        exact &= got == expect;
    }

    let model = random_model(
        RandomSpec {
            states: 2,
            actions: 2,
            support: 2,
            horizon: 3,
            contexts: 2,
        },
        &mut seeded(7000),
    );
    let cfg = ExplorationConfig {
        degree: 2,
        max_episodes: 3000,
        ..Default::default()
    };
    let dims = Dims::of_model(&model);
    let out = estimate_moments(&mut RmmdpEnv::new(&model, seeded(7001)), &cfg).unwrap();
    let ls = build_levels(&out.table, out.episodes, dims.pairs(), 2, 2.0);
    let levels = ls.top() + 2;
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let pol = HashedPolicy {
            seed,
            deterministic: false,
        };
        let mut total = 0.0;
        for l in 0..levels {
            let ev = |x: &[Pair]| ls.level_of(x) == l;
            total += event_probability(&model, &pol as &dyn Policy, &ev).unwrap();
        }
        worst = worst.max((total - 1.0).abs());
    }
    // ℰ'_l = ℰ_l minus ℰ_{l-1}: membership in ℰ_l is monotone in l
    let mut consistent = true;
    for code in 0..4usize.pow(3) {
        let x: Vec<Pair> = (0..3).map(|t| {
            let p = code / 4usize.pow(t) % 4;
            Pair::new(p / 2, p % 2)
        }).collect();
        let l = ls.level_of(&x);
        for j in 0..=ls.top() {
            consistent &= ls.in_level_set(j, &x) == (j >= l);
        }
    }
    outcome(
        exact && worst <= 1e-12 && consistent,
        format!("thresholds exact: {exact}, {levels} level sets, max |sum - 1| {worst:.1e}"),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome, Duration);
    let criteria: [Criterion; 8] = [
        ("third-moment identity", third_moment_identity, Duration::from_secs(1)),
        ("planner oracle equivalence", planner_oracle, Duration::from_secs(60)),
        ("eventwise TV bound", tv_bound, Duration::from_secs(300)),
        ("KL identity", kl_identity_suite, Duration::from_secs(30)),
        ("hard-instance suite", hard_instance_suite, Duration::from_secs(10)),
        ("moment-estimator concentration", concentration, Duration::from_secs(600)),
        ("end-to-end EM2", end_to_end, Duration::from_secs(1800)),
        ("level-set arithmetic", level_sets, Duration::from_secs(10)),
    ];
    // ACCEPTANCE_ONLY=<substring> runs a subset
    let only = std::env::var("ACCEPTANCE_ONLY").ok();
    let mut failed = 0;
    for (name, run, limit) in criteria {
        if only.as_deref().is_some_and(|o| !name.contains(o)) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let took = start.elapsed();
        let pass = out.pass && took <= limit;
        if !pass {
            failed += 1;
        }
        println!(
            "{} {name}: {} [{:.2}s, limit {}s]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
