use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rmmdp::analyze::{
    build_levels, default_degree, default_policies, kl_identity, sup_event_probability, verify_tv_bound,
    AdaptiveHashed, NamedEvent, Repeat, RewardBlind, Strategy,
};
use rmmdp::enumerate::{trajectory_count, ENUMERATION_BUDGET};
use rmmdp::env::{sample_episode, EpisodeLogLine, EpisodicEnv, RmmdpEnv};
use rmmdp::explore::{estimate_moments, ExplorationConfig, MomentFile};
use rmmdp::fit::{fit_moment_matching, FitMode, FitOptions, FitResult};
use rmmdp::hardgen::{instance_value_check, parity_check, Ansatz, Mixture, ParityReport, ValueCheck};
use rmmdp::io::{read_json, save_model, to_canonical_json, write_json, ModelFile};
use rmmdp::pipeline::{fitted_model, run_em2, Em2Config, Evaluation};
use rmmdp::plan::{optimal_plan, policy_value, policy_value_mc, BeliefPolicy, DecisionRow, MC_EPISODES};
use rmmdp::policy::{HashedPolicy, Policy, UniformPolicy};
use rmmdp::rng::{derive_seed, seeded};
use rmmdp::{validate_model, RewardSupport, Rmmdp, Violation};

use crate::config::{self, HardSpec, Loaded, RunConfig};
use crate::{AnalyzeCommand, Cli, Command, Em2Args, ExploreFlags, FitFlags, HardgenArgs, ModeKind, PolicyKind, StrategyKind};

pub fn run(cli: &Cli) -> Result<u8> {
    let loaded = config::load(cli.global.config.as_deref())?;
    let ctx = Ctx {
        seed: cli.global.seed.or(loaded.cfg.seed).unwrap_or(0),
        out: cli.global.out.clone().or_else(|| loaded.cfg.out.clone()),
        loaded,
    };
    match &cli.cmd {
        Command::Validate { model } => validate(&ctx, model.as_deref()),
        Command::Simulate(a) => simulate(&ctx, a.model.as_deref(), a.episodes, a.policy),
        Command::Explore(a) => explore(&ctx, a.model.as_deref(), &a.flags),
        Command::Fit(a) => fit(&ctx, &a.moments, &a.flags),
        Command::Plan { model } => plan(&ctx, model.as_deref()),
        Command::Analyze(a) => analyze(&ctx, a),
        Command::Hardgen(a) => hardgen(&ctx, a),
        Command::Em2(a) => em2(&ctx, a),
    }
}

struct Ctx {
    seed: u64,
    out: Option<PathBuf>,
    loaded: Loaded,
}

impl Ctx {
    fn cfg(&self) -> &RunConfig {
        &self.loaded.cfg
    }

    fn out_dir(&self) -> Result<&Path> {
        let Some(dir) = self.out.as_deref() else {
            bail!("this command writes artifacts; pass --out DIR");
        };
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    /// Creates the output directory only when one was requested.
    fn maybe_out(&self) -> Result<Option<&Path>> {
        match self.out.as_deref() {
            Some(_) => self.out_dir().map(Some),
            None => Ok(None),
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    print!("{}", to_canonical_json(value)?);
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ValidationReport<'a> {
    valid: bool,
    violations: &'a [Violation],
}

fn validate(ctx: &Ctx, model: Option<&Path>) -> Result<u8> {
    // load without checks so the violations can be reported as data
    let m = match model {
        Some(p) => read_json::<ModelFile>(p)
            .with_context(|| format!("reading {}", p.display()))?
            .into_unchecked_model()?,
        None => ctx.loaded.model(None)?,
    };
    let violations = validate_model(&m);
    let report = ValidationReport {
        valid: violations.is_empty(),
        violations: &violations,
    };
    if let Some(dir) = ctx.maybe_out()? {
        write_json(dir.join("validation.json"), &report)?;
    }
    print_json(&report)?;
    if !violations.is_empty() {
        bail!("model is invalid: {} violation(s)", violations.len());
    }
    Ok(0)
}

fn simulate(ctx: &Ctx, model: Option<&Path>, episodes: u64, kind: PolicyKind) -> Result<u8> {
    let m = ctx.loaded.model(model)?;
    let planned;
    let policy: &dyn Policy = match kind {
        PolicyKind::Uniform => &UniformPolicy,
        PolicyKind::Optimal => {
            planned = optimal_plan(&m)?.1;
            &planned
        }
    };
    let mut lines = String::new();
    let mut total = 0.0;
    for i in 0..episodes {
        let seed = derive_seed(ctx.seed, i);
        let rec = sample_episode(&m, policy, &mut seeded(seed));
        total += rec
            .trajectory
            .steps
            .iter()
            .map(|s| m.support().value(s.reward))
            .sum::<f64>();
        lines.push_str(&serde_json::to_string(&EpisodeLogLine::new(seed, &rec))?);
        lines.push('\n');
    }
    match ctx.maybe_out()? {
        Some(dir) => {
            fs::write(dir.join("trajectories.jsonl"), &lines)?;
            print_json(&serde_json::json!({
                "episodes": episodes,
                "mean_return": total / episodes.max(1) as f64,
            }))?;
        }
        None => std::io::stdout().write_all(lines.as_bytes())?,
    }
    Ok(0)
}

fn exploration_config(ctx: &Ctx, flags: &ExploreFlags, default_degree: usize) -> ExplorationConfig {
    let c = ctx.cfg();
    let base = ExplorationConfig::default();
    ExplorationConfig {
        degree: flags.degree.or(c.degree).unwrap_or(default_degree),
        epsilon: flags.epsilon.or(c.epsilon).unwrap_or(base.epsilon),
        eta: flags.eta.or(c.eta).unwrap_or(base.eta),
        max_episodes: flags.max_episodes.or(c.max_episodes).unwrap_or(base.max_episodes),
        batch: flags.batch.or(c.batch).unwrap_or(base.batch),
        ..base
    }
}

fn fit_options(ctx: &Ctx, flags: &FitFlags) -> FitOptions {
    let c = ctx.cfg();
    let mut opts = c.fit.clone().unwrap_or_else(|| FitOptions {
        seed: derive_seed(ctx.seed, 1),
        ..Default::default()
    });
    if let Some(m) = flags.contexts.or(c.contexts) {
        opts.contexts = m;
    }
    if let Some(mode) = flags.mode {
        opts.mode = match mode {
            ModeKind::General => FitMode::General,
            ModeKind::BalancedTwo => FitMode::BalancedTwo,
            ModeKind::Grid => FitMode::IntegralGrid { p: flags.grid_p },
        };
    }
    if let Some(r) = flags.restarts {
        opts.restarts = r;
    }
    if let Some(i) = flags.max_iters {
        opts.max_iters = i;
    }
    if let Some(s) = flags.slack_scale {
        opts.slack_scale = s;
    }
    opts
}

#[derive(Serialize)]
struct ExploreSummary {
    episodes: u64,
    v_tilde_0: f64,
    epsilon_pe: f64,
    keys: usize,
    budget_exhausted: bool,
}

fn explore(ctx: &Ctx, model: Option<&Path>, flags: &ExploreFlags) -> Result<u8> {
    let m = ctx.loaded.model(model)?;
    let cfg = exploration_config(ctx, flags, 2);
    let dir = ctx.out_dir()?;
    let mut env = RmmdpEnv::new(&m, seeded(derive_seed(ctx.seed, 0)));
    let out = estimate_moments(&mut env, &cfg)?;
    write_json(dir.join("moments.json"), &MomentFile::from_outcome(&out, &env.support()))?;
    write_csv(&dir.join("explore.csv"), &out.log)?;
    print_json(&ExploreSummary {
        episodes: out.episodes,
        v_tilde_0: out.v0,
        epsilon_pe: out.epsilon_pe,
        keys: out.table.len(),
        budget_exhausted: out.budget_exhausted,
    })?;
    Ok(if out.budget_exhausted { 2 } else { 0 })
}

/// `fit.json`: the optimizer result plus whether a slack retry happened.
#[derive(Serialize, Deserialize)]
pub struct FitFile {
    pub retried: bool,
    pub result: FitResult,
}

fn fit(ctx: &Ctx, moments: &Path, flags: &FitFlags) -> Result<u8> {
    let file: MomentFile = read_json(moments).with_context(|| format!("reading {}", moments.display()))?;
    let table = file.table()?;
    let opts = fit_options(ctx, flags);
    let dims = file.dims;
    let dir = ctx.out_dir()?;
    let result = fit_moment_matching(&table, file.iota_c, dims.states, dims.actions, &opts)?;
    let fitted = fitted_model(dims, RewardSupport::new(file.support.clone())?, &file.transitions, &result.latent)?;
    save_model(dir.join("fitted_model.json"), &fitted)?;
    let feasible = result.feasible;
    print_json(&serde_json::json!({
        "feasible": feasible,
        "objective": result.objective,
        "max_normalized_violation": result.max_normalized_violation,
    }))?;
    write_json(dir.join("fit.json"), &FitFile { retried: false, result })?;
    Ok(if feasible { 0 } else { 3 })
}

/// `policy.json`: planned value and the decision table.
#[derive(Serialize, Deserialize)]
pub struct PolicyFile {
    pub value: f64,
    pub decisions: Vec<DecisionRow>,
}

fn policy_file(value: f64, policy: &BeliefPolicy) -> PolicyFile {
    PolicyFile {
        value,
        decisions: policy.decision_table(),
    }
}

fn plan(ctx: &Ctx, model: Option<&Path>) -> Result<u8> {
    let m = ctx.loaded.model(model)?;
    let (value, policy) = optimal_plan(&m)?;
    if let Some(dir) = ctx.maybe_out()? {
        write_json(dir.join("policy.json"), &policy_file(value, &policy))?;
    }
    print_json(&serde_json::json!({ "value": value, "decisions": policy.len() }))?;
    Ok(0)
}

fn load_model_file(p: &Path) -> Result<Rmmdp> {
    rmmdp::io::load_model(p).with_context(|| format!("loading model {}", p.display()))
}

fn analyze(ctx: &Ctx, cmd: &AnalyzeCommand) -> Result<u8> {
    match cmd {
        AnalyzeCommand::Tv {
            model1,
            model2,
            degree,
            moments,
        } => {
            let (m1, m2) = (load_model_file(model1)?, load_model_file(model2)?);
            let degree = degree.unwrap_or_else(|| {
                default_degree(m1.num_contexts().max(m2.num_contexts()), m1.horizon())
            });
            let levels = match moments {
                Some(p) => {
                    let file: MomentFile = read_json(p)?;
                    let table = file.table()?;
                    Some(build_levels(&table, file.episodes, file.dims.pairs(), file.degree, file.iota_c))
                }
                None => None,
            };
            let mut events = vec![NamedEvent::everything()];
            if let Some(ls) = &levels {
                events.extend(NamedEvent::levels(ls));
            }
            let report = verify_tv_bound(&m1, &m2, degree, &default_policies(&m1), &events)?;
            if let Some(dir) = ctx.maybe_out()? {
                write_json(dir.join("tv.json"), &report)?;
            }
            print_json(&serde_json::json!({
                "degree": report.degree,
                "delta": report.delta,
                "factor": report.factor,
                "events": report.events,
                "checks": report.checks.len(),
                "violations": report.violations,
            }))?;
            if report.violations > 0 {
                bail!("TV bound violated in {} check(s)", report.violations);
            }
            Ok(0)
        }
        AnalyzeCommand::Kl {
            model1,
            model2,
            episodes,
            strategy,
            reward_blind,
        } => {
            let (m1, m2) = (load_model_file(model1)?, load_model_file(model2)?);
            let hashed = HashedPolicy {
                seed: ctx.seed,
                deterministic: false,
            };
            let base: Box<dyn Strategy> = match strategy {
                StrategyKind::Uniform => Box::new(Repeat(UniformPolicy)),
                StrategyKind::Hashed => Box::new(Repeat(hashed)),
                StrategyKind::Adaptive => Box::new(AdaptiveHashed { seed: ctx.seed }),
            };
            let strategy: Box<dyn Strategy> = if *reward_blind { Box::new(RewardBlind(base)) } else { base };
            let r = kl_identity(&m1, &m2, strategy.as_ref(), *episodes)?;
            if let Some(dir) = ctx.maybe_out()? {
                write_json(dir.join("kl.json"), &r)?;
            }
            print_json(&serde_json::json!({ "lhs": r.lhs, "rhs": r.rhs, "diff": r.diff }))?;
            Ok(0)
        }
        AnalyzeCommand::Levels { moments, model } => {
            let file: MomentFile = read_json(moments)?;
            let table = file.table()?;
            let ls = build_levels(&table, file.episodes, file.dims.pairs(), file.degree, file.iota_c);
            let dynamics = model.as_deref().map(load_model_file).transpose()?;
            let mut rows = Vec::new();
            for l in 0..=ls.top() + 1 {
                let sup = match &dynamics {
                    Some(m) => Some(sup_event_probability(m, &|x: &[rmmdp::Pair]| ls.level_of(x) == l)?),
                    None => None,
                };
                rows.push(serde_json::json!({
                    "level": l,
                    "threshold": ls.thresholds.get(l),
                    "keys_at_or_above": table.iter().filter(|(_, e)| {
                        ls.thresholds.get(l).is_some_and(|t| e.count as f64 >= *t)
                    }).count(),
                    "sup_probability": sup,
                }));
            }
            let report = serde_json::json!({
                "thresholds": ls.thresholds,
                "iota_c": ls.iota_c,
                "degree": ls.degree,
                "levels": rows,
            });
            if let Some(dir) = ctx.maybe_out()? {
                write_json(dir.join("levels.json"), &report)?;
            }
            print_json(&report)?;
            Ok(0)
        }
    }
}

/// Sidecar of a hard instance (the model itself goes to `model.json`).
#[derive(Serialize, Deserialize)]
pub struct HardgenFile {
    pub correct: Vec<usize>,
    pub mixture: Mixture,
    pub epsilon: f64,
    pub parity: ParityReport,
    pub value: ValueCheck,
}

fn hardgen(ctx: &Ctx, a: &HardgenArgs) -> Result<u8> {
    let spec = HardSpec {
        contexts: a.contexts,
        degree: a.degree,
        epsilon: a.epsilon,
        actions: a.actions,
        correct: a.correct.clone(),
        seed: ctx.seed,
    };
    let ansatz = if a.symmetric { Ansatz::SymmetricTwo } else { Ansatz::General };
    let inst = spec.build(ansatz)?;
    let dir = ctx.out_dir()?;
    let parity = parity_check(&inst);
    let value = instance_value_check(&inst)?;
    save_model(dir.join("model.json"), &inst.model)?;
    let side = HardgenFile {
        correct: inst.correct.clone(),
        mixture: inst.mixture.clone(),
        epsilon: inst.epsilon,
        parity,
        value,
    };
    write_json(dir.join("hardgen.json"), &side)?;
    if let Some(w) = &inst.mixture.warning {
        eprintln!("{}", serde_json::json!({ "warning": w }));
    }
    print_json(&serde_json::json!({
        "epsilon": side.epsilon,
        "max_parity_residual": side.parity.max_residual,
        "v_star": side.value.v_star,
        "bound": side.value.bound,
        "uniform_value": side.value.uniform_value,
    }))?;
    Ok(0)
}

/// One summary row of `metrics.csv`.
#[derive(Serialize, Deserialize)]
pub struct MetricsRow {
    #[serde(rename = "K")]
    pub k: u64,
    pub suboptimality: f64,
    pub fit_objective: f64,
    pub fit_feasible: bool,
    pub wall_ms: u64,
}

fn evaluate(truth: &Rmmdp, policy: &dyn Policy, mc_episodes: u64, seed: u64) -> Result<Evaluation> {
    let (v_star, _) = optimal_plan(truth)?;
    let pv = if trajectory_count(truth) <= ENUMERATION_BUDGET {
        policy_value(truth, policy)
    } else {
        policy_value_mc(truth, policy, mc_episodes, seed)
    };
    Ok(Evaluation {
        v_star,
        v_policy: pv.value,
        suboptimality: v_star - pv.value,
        exact: pv.exact,
    })
}

fn em2(ctx: &Ctx, a: &Em2Args) -> Result<u8> {
    let start = Instant::now();
    let truth = ctx.loaded.model(a.model.as_deref())?;
    let c = ctx.cfg();
    let fit = fit_options(ctx, &a.fit);
    let mut cfg = Em2Config::for_contexts(fit.contexts, truth.horizon());
    cfg.explore = exploration_config(ctx, &a.explore, cfg.explore.degree);
    cfg.fit = fit;
    if let Some(r) = c.retry_slack {
        cfg.retry_slack = r;
    }
    let dir = ctx.out_dir()?;

    let mut env = RmmdpEnv::new(&truth, seeded(derive_seed(ctx.seed, 0)));
    let run = run_em2(&mut env, &cfg)?;
    let support = env.support();
    write_json(dir.join("moments.json"), &MomentFile::from_outcome(&run.exploration, &support))?;
    write_csv(&dir.join("explore.csv"), &run.exploration.log)?;
    save_model(dir.join("fitted_model.json"), &run.fitted)?;
    write_json(dir.join("policy.json"), &policy_file(run.planned_value, &run.policy))?;
    write_json(
        dir.join("fit.json"),
        &FitFile {
            retried: run.retried,
            result: run.fit.clone(),
        },
    )?;

    // the only place the true model's latent part is read
    let mc = a.eval_episodes.or(c.eval_episodes).unwrap_or(MC_EPISODES);
    let ev = evaluate(&truth, &run.policy, mc, derive_seed(ctx.seed, 2))?;
    let wall_ms = if a.wall_clock { start.elapsed().as_millis() as u64 } else { 0 };
    write_csv(
        &dir.join("metrics.csv"),
        &[MetricsRow {
            k: run.exploration.episodes,
            suboptimality: ev.suboptimality,
            fit_objective: run.fit.objective,
            fit_feasible: run.fit.feasible,
            wall_ms,
        }],
    )?;
    let status = run.status;
    print_json(&serde_json::json!({
        "status": status,
        "episodes": run.exploration.episodes,
        "v_tilde_0": run.exploration.v0,
        "fit_feasible": run.fit.feasible,
        "fit_retried": run.retried,
        "planned_value": run.planned_value,
        "v_star": ev.v_star,
        "v_policy": ev.v_policy,
        "suboptimality": ev.suboptimality,
        "exact_evaluation": ev.exact,
    }))?;
    let code = status.exit_code() as u8;
    if code != 0 {
        eprintln!("{}", serde_json::json!({ "status": status, "exit_code": code }));
    }
    Ok(code)
}
