//! Worker execution model: task catalog, parametric quality/cost sampling
//! and the replay cache keyed by `(task_id, tier, skill_match)`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::economy::{EconomyError, SkillCluster, TaskSpec, Usd};
use crate::rng::{seeded, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Low,
    Mid,
    High,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Low, Tier::Mid, Tier::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Low => "low",
            Tier::Mid => "mid",
            Tier::High => "high",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierParams {
    pub tier: Tier,
    pub cost_multiplier: f64,
    pub quality_boost: f64,
}

/// Parameters of the synthetic worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutionParams {
    pub tiers: Vec<TierParams>,
    pub skill_bonus: f64,
    /// Probability that a failed run scores exactly 0 rather than a partial score.
    pub partial_zero_prob: f64,
    pub partial_min: f64,
    pub partial_max: f64,
    /// Log-space standard deviation of the execution cost noise; 0 disables it.
    pub cost_noise_sigma: f64,
}

impl Default for ExecutionParams {
    fn default() -> Self {
        Self {
            tiers: vec![
                TierParams { tier: Tier::Low, cost_multiplier: 0.5, quality_boost: -0.15 },
                TierParams { tier: Tier::Mid, cost_multiplier: 1.0, quality_boost: 0.0 },
                TierParams { tier: Tier::High, cost_multiplier: 2.5, quality_boost: 0.10 },
            ],
            skill_bonus: 0.15,
            partial_zero_prob: 0.8,
            partial_min: 0.1,
            partial_max: 0.49,
            cost_noise_sigma: 0.2,
        }
    }
}

impl ExecutionParams {
    pub fn validate(&self) -> Result<(), EconomyError> {
        for tier in Tier::ALL {
            let Some(p) = self.tiers.iter().find(|t| t.tier == tier) else {
                return Err(EconomyError::InvalidConfig(format!("missing parameters for tier {tier}")));
            };
            if !(p.cost_multiplier > 0.0) {
                return Err(EconomyError::InvalidConfig(format!(
                    "tier {tier} cost_multiplier must be positive"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.partial_zero_prob)
            || !(0.0 <= self.partial_min && self.partial_min <= self.partial_max && self.partial_max <= 1.0)
            || !(self.cost_noise_sigma >= 0.0)
        {
            return Err(EconomyError::InvalidConfig("invalid partial-score or noise parameters".into()));
        }
        Ok(())
    }

    pub fn tier(&self, tier: Tier) -> TierParams {
        *self
            .tiers
            .iter()
            .find(|t| t.tier == tier)
            .expect("validated config has every tier")
    }

    /// Probability that a run fully passes.
    pub fn pass_probability(&self, task: &TaskSpec, tier: Tier, skill_match: bool) -> f64 {
        let bonus = if skill_match { self.skill_bonus } else { 0.0 };
        (task.pass_rate + self.tier(tier).quality_boost + bonus).clamp(0.0, 1.0)
    }

    /// Mean execution cost before the task multiplier.
    pub fn expected_cost(&self, task: &TaskSpec, tier: Tier) -> Usd {
        let noise_mean = (self.cost_noise_sigma * self.cost_noise_sigma / 2.0).exp();
        task.c_ref * self.tier(tier).cost_multiplier * noise_mean
    }

    /// Mean quality of a run.
    pub fn expected_quality(&self, task: &TaskSpec, tier: Tier, skill_match: bool) -> f64 {
        let pass = self.pass_probability(task, tier, skill_match);
        let partial_mean = (1.0 - self.partial_zero_prob) * (self.partial_min + self.partial_max) / 2.0;
        pass + (1.0 - pass) * partial_mean
    }
}

/// What the contractor decides before a worker runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub tier: Tier,
    #[serde(default)]
    pub skills: Vec<String>,
    /// Reasoning effort; recorded but not interpreted.
    #[serde(default)]
    pub effort: String,
}

impl ExecutionPlan {
    pub fn new(tier: Tier, skills: Vec<String>) -> Self {
        Self { tier, skills, effort: String::new() }
    }

    /// Fallback plan: mid tier with the agent's packages iff the task matches.
    pub fn default_for(agent_skill: SkillCluster, task: &TaskSpec) -> Self {
        let skills = if agent_skill == task.domain { agent_skill.packages() } else { Vec::new() };
        Self::new(Tier::Mid, skills)
    }

    /// Keep only packages belonging to `agent_skill`.
    pub fn sanitized(mut self, agent_skill: SkillCluster) -> Self {
        let allowed = agent_skill.packages();
        self.skills.retain(|s| allowed.contains(s));
        self.skills.dedup();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub quality: f64,
    /// Cost of one run; the contract charges `mu` times this.
    pub exec_cost: Usd,
    pub output_preview: String,
    #[serde(default)]
    pub from_cache: bool,
}

/// Draw one synthetic worker run.
pub fn sample_execution(
    task: &TaskSpec,
    plan: &ExecutionPlan,
    skill_match: bool,
    params: &ExecutionParams,
    rng: &mut SimRng,
) -> ExecutionResult {
    let pass = params.pass_probability(task, plan.tier, skill_match);
    let quality = if rng.random::<f64>() < pass {
        1.0
    } else if rng.random::<f64>() < params.partial_zero_prob {
        0.0
    } else {
        rng.random_range(params.partial_min..=params.partial_max)
    };
    let noise = if params.cost_noise_sigma > 0.0 {
        LogNormal::new(0.0, params.cost_noise_sigma)
            .expect("sigma validated")
            .sample(rng)
    } else {
        1.0
    };
    let exec_cost = task.c_ref * params.tier(plan.tier).cost_multiplier * noise;
    ExecutionResult {
        quality,
        exec_cost,
        output_preview: format!(
            "{} delivered by {}-tier worker with {} skill package(s)",
            task.task_id,
            plan.tier,
            plan.skills.len()
        ),
        from_cache: false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub task_id: String,
    pub tier: Tier,
    pub skill_match: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub quality: f64,
    pub exec_cost: Usd,
    pub output_preview: String,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    #[serde(flatten)]
    key: CacheKey,
    #[serde(flatten)]
    entry: CacheEntry,
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache io: {0}")]
    Io(#[from] std::io::Error),
    #[error("cache line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Append-only store of past executions.
#[derive(Debug, Default, Clone)]
pub struct ExecutionCache {
    entries: BTreeMap<CacheKey, Vec<CacheEntry>>,
    unsaved: Vec<(CacheKey, CacheEntry)>,
}

impl ExecutionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, CacheError> {
        let mut cache = Self::new();
        if !path.exists() {
            return Ok(cache);
        }
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CacheLine = serde_json::from_str(&line).map_err(|e| CacheError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            cache.entries.entry(parsed.key).or_default().push(parsed.entry);
        }
        Ok(cache)
    }

    /// Append entries recorded since the last flush.
    pub fn flush(&mut self, path: &Path) -> Result<(), CacheError> {
        if self.unsaved.is_empty() {
            return Ok(());
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = BufWriter::new(file);
        for (key, entry) in self.unsaved.drain(..) {
            let line = serde_json::to_string(&CacheLine { key, entry }).expect("cache line serializes");
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn insert(&mut self, key: CacheKey, entry: CacheEntry) {
        self.unsaved.push((key.clone(), entry.clone()));
        self.entries.entry(key).or_default().push(entry);
    }

    pub fn entries(&self, key: &CacheKey) -> &[CacheEntry] {
        self.entries.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Replay a stored run for `key`, or run `fallback` and write it through.
pub fn cached_execution(
    cache: &mut ExecutionCache,
    key: &CacheKey,
    fallback: impl FnOnce(&mut SimRng) -> ExecutionResult,
    rng: &mut SimRng,
) -> ExecutionResult {
    let stored = cache.entries(key);
    if !stored.is_empty() {
        let hit = &stored[rng.random_range(0..stored.len())];
        return ExecutionResult {
            quality: hit.quality,
            exec_cost: hit.exec_cost,
            output_preview: hit.output_preview.clone(),
            from_cache: true,
        };
    }
    let result = fallback(rng);
    cache.insert(
        key.clone(),
        CacheEntry {
            quality: result.quality,
            exec_cost: result.exec_cost,
            output_preview: result.output_preview.clone(),
        },
    );
    result
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog io: {0}")]
    Io(#[from] std::io::Error),
    #[error("catalog record {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("catalog record {line} ({task_id}): {source}")]
    Invalid {
        line: usize,
        task_id: String,
        #[source]
        source: EconomyError,
    },
    #[error("catalog record {line}: duplicate task_id {task_id}")]
    Duplicate { line: usize, task_id: String },
    #[error("catalog is empty")]
    Empty,
}

/// Validated task pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    tasks: Vec<TaskSpec>,
}

impl Catalog {
    pub fn from_tasks(tasks: Vec<TaskSpec>) -> Result<Self, CatalogError> {
        let mut seen = HashSet::new();
        for (i, task) in tasks.iter().enumerate() {
            task.validate().map_err(|source| CatalogError::Invalid {
                line: i + 1,
                task_id: task.task_id.clone(),
                source,
            })?;
            if !seen.insert(task.task_id.clone()) {
                return Err(CatalogError::Duplicate { line: i + 1, task_id: task.task_id.clone() });
            }
        }
        if tasks.is_empty() {
            return Err(CatalogError::Empty);
        }
        Ok(Self { tasks })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, task_id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for task in &self.tasks {
            writeln!(out, "{}", serde_json::to_string(task).expect("task serializes"))?;
        }
        out.flush()
    }
}

/// Load a catalog file: one JSON record per line.
pub fn ingest_catalog(path: &Path) -> Result<Catalog, CatalogError> {
    let reader = BufReader::new(File::open(path)?);
    let mut tasks = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: TaskSpec = serde_json::from_str(&line).map_err(|e| CatalogError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        task.validate().map_err(|source| CatalogError::Invalid {
            line: i + 1,
            task_id: task.task_id.clone(),
            source,
        })?;
        if !seen.insert(task.task_id.clone()) {
            return Err(CatalogError::Duplicate { line: i + 1, task_id: task.task_id });
        }
        tasks.push(task);
    }
    Catalog::from_tasks(tasks)
}

const CATALOG_SEED: u64 = 234;

/// Synthetic 234-task pool: 47 professional tasks spread over the five
/// clusters, 112 data-querying tasks and 75 function-calling tasks.
/// Reference costs are lognormal with a $0.02 median.
pub fn default_catalog() -> Catalog {
    let mut rng = seeded(CATALOG_SEED);
    let cost = LogNormal::new(0.02f64.ln(), 0.5).expect("valid lognormal");
    let mut tasks = Vec::with_capacity(234);
    let sources: [(&str, usize, (f64, f64)); 3] =
        [("skillsbench", 47, (0.3, 0.8)), ("toolqa", 112, (0.4, 0.95)), ("bfcl", 75, (0.5, 0.95))];
    for (source, count, (lo, hi)) in sources {
        for i in 0..count {
            let domain = match source {
                "skillsbench" => SkillCluster::ALL[i % 5],
                "toolqa" => SkillCluster::DataQuerying,
                _ => SkillCluster::CodingEngineering,
            };
            tasks.push(TaskSpec {
                task_id: format!("{source}-{:03}", i + 1),
                domain,
                c_ref: cost.sample(&mut rng),
                pass_rate: rng.random_range(lo..hi),
                source: source.to_string(),
            });
        }
    }
    Catalog::from_tasks(tasks).expect("synthetic catalog is valid")
}
