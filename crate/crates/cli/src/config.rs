//! Run configuration: a single JSON document whose fields are overridden by
//! command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rmmdp::fit::FitOptions;
use rmmdp::generate::{example_e1, random_model, RandomSpec};
use rmmdp::hardgen::{assemble_instance, build_mixture, Ansatz, HardInstance, MixtureOptions};
use rmmdp::io::load_model;
use rmmdp::rng::seeded;
use rmmdp::Rmmdp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSource {
    File(PathBuf),
    Random {
        spec: RandomSpec,
        seed: u64,
    },
    Example {
        name: String,
        #[serde(default = "default_horizon")]
        horizon: usize,
    },
    Hard(HardSpec),
}

fn default_horizon() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardSpec {
    pub contexts: usize,
    pub degree: usize,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default = "default_actions")]
    pub actions: usize,
    /// Correct action per step; all zeros when absent.
    #[serde(default)]
    pub correct: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
}

fn default_actions() -> usize {
    2
}

impl HardSpec {
    pub fn build(&self, ansatz: Ansatz) -> Result<HardInstance> {
        let mix = build_mixture(&MixtureOptions {
            contexts: self.contexts,
            degree: self.degree,
            epsilon: self.epsilon,
            ansatz,
            seed: self.seed,
            ..Default::default()
        })?;
        let correct = self.correct.clone().unwrap_or_else(|| vec![0; self.degree]);
        Ok(assemble_instance(&mix, self.actions, &correct)?)
    }
}

impl ModelSource {
    /// Paths are resolved against `base` (the config file's directory).
    pub fn load(&self, base: &Path) -> Result<Rmmdp> {
        match self {
            ModelSource::File(p) => {
                let path = base.join(p);
                load_model(&path).with_context(|| format!("loading model {}", path.display()))
            }
            ModelSource::Random { spec, seed } => Ok(random_model(*spec, &mut seeded(*seed))),
            ModelSource::Example { name, horizon } => match name.as_str() {
                "e1" => Ok(example_e1(*horizon)),
                other => bail!("unknown example model {other:?} (known: e1)"),
            },
            ModelSource::Hard(spec) => Ok(spec.build(Ansatz::General)?.model),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelSource>,
    /// Contexts of the fitted model.
    pub contexts: Option<usize>,
    pub degree: Option<usize>,
    pub epsilon: Option<f64>,
    pub eta: Option<f64>,
    pub max_episodes: Option<u64>,
    pub batch: Option<u64>,
    pub fit: Option<FitOptions>,
    pub retry_slack: Option<f64>,
    /// Monte-Carlo episodes when exact evaluation is out of budget.
    pub eval_episodes: Option<u64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Loaded config plus the directory its relative paths refer to.
pub struct Loaded {
    pub cfg: RunConfig,
    pub base: PathBuf,
}

pub fn load(path: Option<&Path>) -> Result<Loaded> {
    let Some(path) = path else {
        return Ok(Loaded {
            cfg: RunConfig::default(),
            base: PathBuf::from("."),
        });
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let base = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    Ok(Loaded { cfg, base })
}

impl Loaded {
    /// `--model FILE` wins over the config's model source.
    pub fn model(&self, flag: Option<&Path>) -> Result<Rmmdp> {
        match (flag, &self.cfg.model) {
            (Some(p), _) => load_model(p).with_context(|| format!("loading model {}", p.display())),
            (None, Some(src)) => src.load(&self.base),
            (None, None) => bail!("no model given (use --model or a config with a \"model\" entry)"),
        }
    }
}
