use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, KnownModel};
use crate::bandit::{run_bandit, BanditConfig, BanditInstance};
use crate::baselines::{DopeAgent, DopeConfig, GhoshAgent, GhoshConfig, UniformAgent};
use crate::cmdp::{EnvironmentDocument, LinearCmdp, SafePolicyOracle};
use crate::envs::{self, EnvKind};
use crate::error::{Error, Result};
use crate::harness::metrics::{read_metrics_csv, simulate, write_atomic, MetricsLog, SimulationOptions, CSV_COLUMNS};
use crate::lpsolve::optimal_safe_policy;
use crate::opse::{OpseAgent, OpseConfig};

pub const THREADS_ENV_VAR: &str = "SAFE_LCMDP_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvName {
    Tabular,
    Streaming,
    Linear,
    Bandit,
}

impl EnvName {
    pub fn name(self) -> &'static str {
        match self {
            EnvName::Tabular => "tabular",
            EnvName::Streaming => "streaming",
            EnvName::Linear => "linear",
            EnvName::Bandit => "bandit",
        }
    }

    fn cmdp_kind(self) -> Option<EnvKind> {
        match self {
            EnvName::Tabular => Some(EnvKind::Tabular),
            EnvName::Streaming => Some(EnvKind::Streaming),
            EnvName::Linear => Some(EnvKind::Linear),
            EnvName::Bandit => None,
        }
    }
}

impl std::str::FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bandit" => Ok(EnvName::Bandit),
            other => Ok(match other.parse::<EnvKind>()? {
                EnvKind::Tabular => EnvName::Tabular,
                EnvKind::Streaming => EnvName::Streaming,
                EnvKind::Linear => EnvName::Linear,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Opse,
    Ghosh,
    Dope,
    Uniform,
    Oplbsp,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Opse => "opse",
            Algo::Ghosh => "ghosh",
            Algo::Dope => "dope",
            Algo::Uniform => "uniform",
            Algo::Oplbsp => "oplbsp",
        }
    }
}

impl std::str::FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "opse" => Ok(Algo::Opse),
            "ghosh" => Ok(Algo::Ghosh),
            "dope" => Ok(Algo::Dope),
            "uniform" => Ok(Algo::Uniform),
            "oplbsp" => Ok(Algo::Oplbsp),
            other => Err(Error::invalid(format!("unknown algorithm `{other}`"))),
        }
    }
}

fn default_stride() -> usize {
    1
}

fn default_num_states() -> usize {
    envs::LINEAR_STATES
}

fn default_dim() -> usize {
    envs::LINEAR_DIM
}

/// One experiment: an environment family, an algorithm and a list of seeds.
/// Hyperparameter sections are optional; missing ones take the defaults of
/// the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvName,
    /// Linear family only.
    #[serde(default = "default_num_states")]
    pub num_states: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Environment JSON to use for every seed instead of generating one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env_file: Option<PathBuf>,
    pub algo: Algo,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    #[serde(default = "default_stride")]
    pub eval_stride: usize,
    /// Fill `wall_ms`; off by default so reruns are byte-identical.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opse: Option<OpseConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ghosh: Option<GhoshConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dope: Option<DopeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandit: Option<BanditConfig>,
}

impl ExperimentConfig {
    pub fn new(env: EnvName, algo: Algo, episodes: usize, seeds: Vec<u64>, output: impl Into<PathBuf>) -> Self {
        Self {
            env,
            num_states: default_num_states(),
            dim: default_dim(),
            env_file: None,
            algo,
            episodes,
            seeds,
            output: output.into(),
            eval_stride: 1,
            record_timing: false,
            opse: None,
            ghosh: None,
            dope: None,
            bandit: None,
        }
    }

    /// Reads a `.toml` or `.json` file; other extensions are tried as JSON
    /// and then as TOML.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)?,
            Some("json") => serde_json::from_str(&text)?,
            _ => match serde_json::from_str(&text) {
                Ok(cfg) => cfg,
                Err(_) => toml::from_str(&text)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::invalid("episodes must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.eval_stride == 0 {
            return Err(Error::invalid("eval_stride must be at least 1"));
        }
        match (self.algo, self.env) {
            (Algo::Oplbsp, EnvName::Bandit) => {}
            (Algo::Oplbsp, _) | (_, EnvName::Bandit) => {
                return Err(Error::invalid("oplbsp runs exactly on the bandit environment"));
            }
            (Algo::Dope, EnvName::Linear) if self.env_file.is_none() => {
                return Err(Error::UnsupportedEnvironment(
                    "DOPE is tabular-only; the linear environment is not supported".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn stem(&self, seed: u64) -> String {
        format!("{}_{}_seed{seed}", self.algo.name(), self.env.name())
    }

    pub fn opse_config(&self) -> OpseConfig {
        let base = self.opse.clone().unwrap_or_else(|| match self.env {
            EnvName::Streaming => OpseConfig::streaming(),
            EnvName::Linear => OpseConfig::linear(),
            _ => OpseConfig::tabular(),
        });
        OpseConfig {
            episodes: self.episodes,
            ..base
        }
    }

    pub fn ghosh_config(&self) -> GhoshConfig {
        self.ghosh.clone().unwrap_or_else(|| match self.env {
            EnvName::Streaming => GhoshConfig::streaming(),
            _ => GhoshConfig::tabular(),
        })
    }

    pub fn dope_config(&self) -> DopeConfig {
        self.dope.clone().unwrap_or_default()
    }

    pub fn bandit_config(&self, seed: u64) -> BanditConfig {
        BanditConfig {
            episodes: self.episodes,
            seed,
            ..self.bandit.clone().unwrap_or_default()
        }
    }

    fn hyperparameters(&self, seed: u64) -> Result<serde_json::Value> {
        Ok(match self.algo {
            Algo::Opse => serde_json::to_value(OpseConfig {
                seed,
                ..self.opse_config()
            })?,
            Algo::Ghosh => serde_json::to_value(self.ghosh_config())?,
            Algo::Dope => serde_json::to_value(self.dope_config())?,
            Algo::Uniform => serde_json::Value::Null,
            Algo::Oplbsp => serde_json::to_value(self.bandit_config(seed))?,
        })
    }

    /// The CMDP and safe policy used for `seed`.
    pub fn environment(&self, seed: u64) -> Result<(LinearCmdp, SafePolicyOracle)> {
        if let Some(path) = &self.env_file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            return EnvironmentDocument::from_json(&text)?.into_env();
        }
        let kind = self
            .env
            .cmdp_kind()
            .ok_or_else(|| Error::UnsupportedEnvironment("the bandit environment is not a CMDP".into()))?;
        envs::generate(kind, seed, self.num_states, self.dim)
    }

    /// Runs one seed in memory.
    pub fn run_seed(&self, seed: u64) -> Result<MetricsLog> {
        self.validate()?;
        let config = serde_json::json!({
            "experiment": self,
            "hyperparameters": self.hyperparameters(seed)?,
        });
        if self.algo == Algo::Oplbsp {
            let instance = BanditInstance::default_synthetic(seed)?;
            let mut run = run_bandit(&instance, &self.bandit_config(seed))?;
            run.log.header.config = config;
            return Ok(run.log);
        }
        let (cmdp, safe) = self.environment(seed)?;
        let (_, optimal_value) = optimal_safe_policy(&cmdp)?;
        let model = KnownModel::from(&cmdp);
        let mut agent: Box<dyn Agent> = match self.algo {
            Algo::Opse => Box::new(OpseAgent::new(model, &self.opse_config(), safe.clone())?),
            Algo::Ghosh => Box::new(GhoshAgent::new(model, &self.ghosh_config())?),
            Algo::Dope => Box::new(DopeAgent::new(model, &self.dope_config(), safe.clone())?),
            Algo::Uniform => Box::new(UniformAgent::new(&model)),
            Algo::Oplbsp => unreachable!("handled above"),
        };
        let options = SimulationOptions {
            episodes: self.episodes,
            seed,
            eval_stride: self.eval_stride,
            optimal_value: Some(optimal_value),
            record_timing: self.record_timing,
            algo: self.algo.name().into(),
            env: self.env.name().into(),
            slack: safe.slack,
            config,
        };
        simulate(&cmdp, agent.as_mut(), &options)
    }
}

#[derive(Debug)]
pub struct SeedReport {
    pub seed: u64,
    /// Path of the metrics CSV, or the error that stopped the run.
    pub outcome: Result<PathBuf>,
}

/// Worker count: `SAFE_LCMDP_THREADS` if set, else the available
/// parallelism, never more than `jobs`.
pub fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var(THREADS_ENV_VAR)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(jobs).max(1)
}

/// Runs every seed on a worker pool and writes `<stem>.csv` and
/// `<stem>.meta.json` per seed. A failing seed leaves `<stem>.error.txt`
/// instead and does not stop the others.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SeedReport>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(cfg.seeds.len()))
        .build()
        .map_err(|e| Error::Internal(format!("worker pool: {e}")))?;
    let reports = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let stem = cfg.stem(seed);
                let outcome = cfg.run_seed(seed).and_then(|log| log.write(&cfg.output, &stem));
                if let Err(e) = &outcome {
                    log::error!("seed {seed} failed: {e}");
                    let path = cfg.output.join(format!("{stem}.error.txt"));
                    if let Err(write_err) = write_atomic(&path, format!("{e}\n").as_bytes()) {
                        log::error!("could not record the failure of seed {seed}: {write_err}");
                    }
                }
                SeedReport { seed, outcome }
            })
            .collect()
    });
    Ok(reports)
}

/// Mean and sample standard deviation per episode of one `{algo}_{env}`
/// group.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub group: String,
    pub seeds: usize,
    pub episodes: Vec<usize>,
    /// One `(mean, std)` column per metric column after `episode`.
    pub columns: Vec<Vec<(f64, f64)>>,
}

impl Summary {
    pub fn to_csv(&self) -> String {
        let mut header = vec!["episode".to_string()];
        for name in &CSV_COLUMNS[1..] {
            header.push(format!("{name}_mean"));
            header.push(format!("{name}_std"));
        }
        let mut out = header.join(",");
        out.push('\n');
        for (row, episode) in self.episodes.iter().enumerate() {
            out.push_str(&episode.to_string());
            for column in &self.columns {
                let (mean, std) = column[row];
                out.push_str(&format!(",{mean},{std}"));
            }
            out.push('\n');
        }
        out
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates `{algo}_{env}_seed{N}.csv` files found in `dir` into one
/// summary per group; files of a group must record the same episodes.
pub fn summarize(dir: &Path) -> Result<Vec<Summary>> {
    let mut groups: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(stem) = name.strip_suffix(".csv") else {
            continue;
        };
        if let Some((group, seed)) = stem.rsplit_once("_seed") {
            if !seed.is_empty() && seed.bytes().all(|b| b.is_ascii_digit()) {
                groups.entry(group.to_string()).or_default().push(path);
            }
        }
    }
    let mut summaries = Vec::new();
    for (group, mut paths) in groups {
        paths.sort();
        let runs = paths.iter().map(|p| read_metrics_csv(p)).collect::<Result<Vec<_>>>()?;
        let episodes: Vec<usize> = runs[0].iter().map(|r| r.episode).collect();
        for (run, path) in runs.iter().zip(&paths) {
            if run.iter().map(|r| r.episode).ne(episodes.iter().copied()) {
                return Err(Error::Metrics {
                    path: path.clone(),
                    reason: format!("episode column differs from the rest of group `{group}`"),
                });
            }
        }
        let extract: [fn(&crate::harness::metrics::MetricsRecord) -> f64; 8] = [
            |r| r.reward_value,
            |r| r.utility_value,
            |r| r.violation,
            |r| r.cum_regret,
            |r| r.cum_violation,
            |r| r.cum_safe_deploys as f64,
            |r| r.lambda,
            |r| r.wall_ms,
        ];
        let columns = extract
            .iter()
            .map(|f| {
                (0..episodes.len())
                    .map(|row| mean_std(&runs.iter().map(|run| f(&run[row])).collect::<Vec<_>>()))
                    .collect()
            })
            .collect();
        summaries.push(Summary {
            group,
            seeds: runs.len(),
            episodes,
            columns,
        });
    }
    Ok(summaries)
}

/// Runs [`summarize`] and writes `<group>_summary.csv` next to the inputs.
pub fn write_summaries(dir: &Path) -> Result<Vec<PathBuf>> {
    summarize(dir)?
        .into_iter()
        .map(|s| {
            let path = dir.join(format!("{}_summary.csv", s.group));
            write_atomic(&path, s.to_csv().as_bytes())?;
            Ok(path)
        })
        .collect()
}
