use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::cmdp::{initial_value, sample_trajectory, LinearCmdp};
use crate::error::{Error, Result};
use crate::harness::seeding;
use crate::lpsolve::optimal_safe_policy;

pub const CSV_COLUMNS: [&str; 9] = [
    "episode",
    "reward_value",
    "utility_value",
    "violation",
    "cum_regret",
    "cum_violation",
    "cum_safe_deploys",
    "lambda",
    "wall_ms",
];

/// One recorded episode (or bandit round).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub episode: usize,
    pub reward_value: f64,
    pub utility_value: f64,
    /// `max(b - utility_value, 0)`
    pub violation: f64,
    pub cum_regret: f64,
    pub cum_violation: f64,
    pub cum_safe_deploys: usize,
    pub lambda: f64,
    pub wall_ms: f64,
}

/// Per-episode facts that are not part of the CSV schema.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpisodeNotes {
    pub safe: bool,
    pub estimated_utility: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub algo: String,
    pub env: String,
    pub seed: u64,
    pub episodes: usize,
    pub eval_stride: usize,
    /// Value of the best safe policy.
    pub optimal_value: f64,
    pub threshold: f64,
    pub slack: f64,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub header: MetricsHeader,
    pub records: Vec<MetricsRecord>,
    pub notes: Vec<EpisodeNotes>,
}

impl MetricsLog {
    pub fn last(&self) -> &MetricsRecord {
        self.records.last().expect("metrics log is never empty")
    }

    /// Record for 1-based episode `k`, when recorded.
    pub fn at_episode(&self, k: usize) -> Option<&MetricsRecord> {
        self.records.iter().find(|r| r.episode == k)
    }

    pub fn to_csv(&self) -> String {
        let mut out = CSV_COLUMNS.join(",");
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.episode,
                r.reward_value,
                r.utility_value,
                r.violation,
                r.cum_regret,
                r.cum_violation,
                r.cum_safe_deploys,
                r.lambda,
                r.wall_ms
            )
            .expect("writing to a String cannot fail");
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.meta.json` under `dir`, each through
    /// a temporary file and rename.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let meta_path = dir.join(format!("{stem}.meta.json"));
        write_atomic(&meta_path, serde_json::to_string_pretty(&self.header)?.as_bytes())?;
        write_atomic(&csv_path, self.to_csv().as_bytes())?;
        Ok(csv_path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Parses a metrics CSV produced by [`MetricsLog::to_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&text).map_err(|reason| Error::Metrics {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn parse_metrics_csv(text: &str) -> std::result::Result<Vec<MetricsRecord>, String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty file")?.split(',').collect();
    if header != CSV_COLUMNS {
        let offending = CSV_COLUMNS
            .iter()
            .zip(header.iter().chain(std::iter::repeat(&"<missing>")))
            .find(|(want, got)| want != got)
            .map(|(want, got)| format!("expected column `{want}`, found `{got}`"))
            .unwrap_or_else(|| format!("unexpected extra columns: {header:?}"));
        return Err(offending);
    }
    let mut records = Vec::new();
    for (line_no, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != CSV_COLUMNS.len() {
            return Err(format!("line {}: expected 9 fields, found {}", line_no + 2, fields.len()));
        }
        let float = |i: usize| -> std::result::Result<f64, String> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| format!("line {}: column `{}` is not a number", line_no + 2, CSV_COLUMNS[i]))
        };
        let int = |i: usize| -> std::result::Result<usize, String> {
            fields[i]
                .parse::<usize>()
                .map_err(|_| format!("line {}: column `{}` is not an integer", line_no + 2, CSV_COLUMNS[i]))
        };
        records.push(MetricsRecord {
            episode: int(0)?,
            reward_value: float(1)?,
            utility_value: float(2)?,
            violation: float(3)?,
            cum_regret: float(4)?,
            cum_violation: float(5)?,
            cum_safe_deploys: int(6)?,
            lambda: float(7)?,
            wall_ms: float(8)?,
        });
    }
    Ok(records)
}

/// Accumulates the cumulative columns exactly as the simulator does.
#[derive(Debug, Clone, Default)]
pub struct Accumulator {
    cum_regret: f64,
    cum_violation: f64,
    cum_safe: usize,
}

impl Accumulator {
    /// `weight` is the number of episodes the evaluated values stand for
    /// (1 unless metrics are strided).
    pub fn push(
        &mut self,
        episode: usize,
        optimal_value: f64,
        threshold: f64,
        reward_value: f64,
        utility_value: f64,
        weight: usize,
        safe_deploys: usize,
        lambda: f64,
        wall_ms: f64,
    ) -> MetricsRecord {
        let violation = (threshold - utility_value).max(0.0);
        for _ in 0..weight {
            self.cum_regret += optimal_value - reward_value;
            self.cum_violation += violation;
        }
        self.cum_safe += safe_deploys;
        MetricsRecord {
            episode,
            reward_value,
            utility_value,
            violation,
            cum_regret: self.cum_regret,
            cum_violation: self.cum_violation,
            cum_safe_deploys: self.cum_safe,
            lambda,
            wall_ms,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOptions {
    pub episodes: usize,
    /// Master seed; trajectories use its sampler sub-stream.
    pub seed: u64,
    pub eval_stride: usize,
    /// Best safe value; computed with the occupancy LP when absent.
    pub optimal_value: Option<f64>,
    pub record_timing: bool,
    pub algo: String,
    pub env: String,
    pub slack: f64,
    pub config: serde_json::Value,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            episodes: 1,
            seed: 0,
            eval_stride: 1,
            optimal_value: None,
            record_timing: false,
            algo: String::new(),
            env: String::new(),
            slack: 0.0,
            config: serde_json::Value::Null,
        }
    }
}

/// Plays `agent` for `options.episodes` episodes on the true environment
/// and records exact metrics.
///
/// With `eval_stride = s > 1` exact values are computed on episodes
/// `1, 1 + s, 1 + 2s, ...` (and the last one); each evaluation is held for
/// the episodes up to the next one when accumulating. Safe deployments are
/// always counted exactly.
pub fn simulate(cmdp: &LinearCmdp, agent: &mut dyn Agent, options: &SimulationOptions) -> Result<MetricsLog> {
    if options.episodes == 0 {
        return Err(Error::invalid("at least one episode is required"));
    }
    if options.eval_stride == 0 {
        return Err(Error::invalid("eval_stride must be at least 1"));
    }
    let optimal_value = match options.optimal_value {
        Some(v) => v,
        None => optimal_safe_policy(cmdp)?.1,
    };
    let threshold = cmdp.threshold();
    let stride = options.eval_stride;
    let mut rng = seeding::stream(options.seed, seeding::SAMPLER_STREAM);
    let mut acc = Accumulator::default();
    let mut records = Vec::new();
    let mut notes = Vec::new();
    let mut pending_safe = 0;
    let mut held: Option<(f64, f64)> = None;
    for k in 1..=options.episodes {
        let started = Instant::now();
        let deployment = agent.act()?;
        let evaluate_now = (k - 1) % stride == 0 || k == options.episodes;
        if evaluate_now {
            let reward_value = initial_value(cmdp, &deployment.policy, cmdp.reward())?;
            let utility_value = initial_value(cmdp, &deployment.policy, cmdp.utility())?;
            held = Some((reward_value, utility_value));
        }
        let trajectory = sample_trajectory(cmdp, &deployment.policy, &mut rng)?;
        agent.observe(&trajectory)?;
        pending_safe += deployment.safe as usize;
        notes.push(EpisodeNotes {
            safe: deployment.safe,
            estimated_utility: deployment.estimated_utility,
        });
        if evaluate_now {
            let (reward_value, utility_value) = held.expect("evaluated above");
            let weight = if k == options.episodes {
                1
            } else {
                (k + stride).min(options.episodes) - k
            };
            let wall_ms = if options.record_timing {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            records.push(acc.push(
                k,
                optimal_value,
                threshold,
                reward_value,
                utility_value,
                weight,
                pending_safe,
                deployment.lambda,
                wall_ms,
            ));
            pending_safe = 0;
        }
    }
    Ok(MetricsLog {
        header: MetricsHeader {
            algo: options.algo.clone(),
            env: options.env.clone(),
            seed: options.seed,
            episodes: options.episodes,
            eval_stride: stride,
            optimal_value,
            threshold,
            slack: options.slack,
            config: options.config.clone(),
        },
        records,
        notes,
    })
}
