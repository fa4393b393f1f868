//! Experiment orchestration: multi-seed runs, ablations, metrics over
//! existing logs, and the served session for external agents.
//!
//! A spec is a TOML file; every `[config]` key defaults to the baseline
//! value, so an empty section reproduces the baseline market.
//!
//! ```toml
//! name = "baseline"
//! mode = "market"
//! seeds = [1, 2, 3]
//! output_dir = "runs"
//!
//! [config]
//! mu = 10.0
//!
//! [policies]
//! default = "baseline"
//! assign = { "3" = "serve", "4" = "exec:python3 agent.py" }
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::analytics::{
    cohens_d, compare_modes, per_agent_outcomes, pool, render_comparison, render_report, summarize, AgentOutcome,
    AnalyticsError, ComparisonRow, MetricsReport, PooledReport,
};
use crate::economy::{AgentId, Disposition, EconomyError, MarketConfig};
use crate::execution::{default_catalog, ingest_catalog, CacheError, Catalog, CatalogError, ExecutionCache};
use crate::market::log::{LogEntry, LogError, RunLog};
use crate::market::{EngineError, Market, Mode};
use crate::policy::external::{Connection, ExternalPolicy, SharedConnection};
use crate::policy::{builtin_policy, AgentPolicy, BUILTIN_POLICIES};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Config(#[from] EconomyError),
    #[error("seed {seed}: {source}")]
    Engine { seed: u64, source: EngineError },
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error("unknown ablation axis {0:?}; expected one of {AXES:?}")]
    UnknownAxis(String),
    #[error("missing log files: {0:?}")]
    MissingLogs(Vec<PathBuf>),
    #[error("serve: {0}")]
    Serve(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

pub const AXES: [&str; 6] = ["mu", "monoculture", "disposition", "fierce", "transparency", "horizon"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyAssignment {
    pub default: String,
    /// Agent id (as a string key) to policy name.
    pub assign: BTreeMap<String, String>,
}

impl Default for PolicyAssignment {
    fn default() -> Self {
        Self { default: "baseline".into(), assign: BTreeMap::new() }
    }
}

/// How one agent is driven.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicyChoice {
    Builtin(String),
    /// Connects through the served endpoint.
    Serve,
    /// Child process speaking the wire protocol on stdio.
    Exec(Vec<String>),
}

impl PolicyChoice {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        if text == "serve" {
            return Ok(Self::Serve);
        }
        if let Some(cmd) = text.strip_prefix("exec:") {
            let words: Vec<String> = cmd.split_whitespace().map(String::from).collect();
            if words.is_empty() {
                return Err(ExperimentError::Spec("exec: needs a command".into()));
            }
            return Ok(Self::Exec(words));
        }
        if BUILTIN_POLICIES.contains(&text) {
            return Ok(Self::Builtin(text.into()));
        }
        Err(ExperimentError::Spec(format!(
            "unknown policy {text:?}; expected serve, exec:<command> or one of {BUILTIN_POLICIES:?}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub config: MarketConfig,
    pub policies: PolicyAssignment,
    /// Task catalog file; the synthetic catalog when absent.
    pub catalog: Option<PathBuf>,
    /// Execution cache file, loaded before and appended after each seed.
    pub cache: Option<PathBuf>,
    pub agent_timeout_secs: f64,
    /// Write a snapshot file after every round.
    pub snapshots: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "baseline".into(),
            mode: Mode::Market,
            seeds: vec![1],
            output_dir: PathBuf::from("runs"),
            config: MarketConfig::default(),
            policies: PolicyAssignment::default(),
            catalog: None,
            cache: None,
            agent_timeout_secs: 30.0,
            snapshots: true,
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let spec: Self = toml::from_str(text).map_err(|e| ExperimentError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::Spec("seeds must not be empty".into()));
        }
        self.config.validate()?;
        self.assignments()?;
        Ok(())
    }

    /// Policy per initial agent; every agent gets exactly one.
    pub fn assignments(&self) -> Result<BTreeMap<AgentId, PolicyChoice>, ExperimentError> {
        let default = PolicyChoice::parse(&self.policies.default)?;
        let mut out: BTreeMap<AgentId, PolicyChoice> =
            (1..=self.config.n_agents as u32).map(|i| (AgentId(i), default.clone())).collect();
        for (key, name) in &self.policies.assign {
            let id: u32 = key
                .trim_start_matches('a')
                .parse()
                .map_err(|_| ExperimentError::Spec(format!("bad agent id {key:?} in policies.assign")))?;
            let slot = out
                .get_mut(&AgentId(id))
                .ok_or_else(|| ExperimentError::Spec(format!("agent {id} is outside 1..={}", self.config.n_agents)))?;
            *slot = PolicyChoice::parse(name)?;
        }
        Ok(out)
    }

    fn catalog(&self) -> Result<Catalog, ExperimentError> {
        Ok(match &self.catalog {
            Some(path) => ingest_catalog(path)?,
            None => default_catalog(),
        })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }
}

/// Artifacts of one seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub log_path: PathBuf,
    pub report: MetricsReport,
    pub log: RunLog,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub seeds: Vec<SeedRun>,
    pub pooled: PooledReport,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Resolve the non-served policies, launching child processes as needed.
fn local_policies(
    spec: &ExperimentSpec,
    config: &MarketConfig,
    served: &BTreeMap<AgentId, SharedConnection>,
) -> Result<BTreeMap<AgentId, Box<dyn AgentPolicy>>, ExperimentError> {
    let timeout = Duration::from_secs_f64(spec.agent_timeout_secs);
    let mut out: BTreeMap<AgentId, Box<dyn AgentPolicy>> = BTreeMap::new();
    for (id, choice) in spec.assignments()? {
        let policy: Box<dyn AgentPolicy> = match choice {
            PolicyChoice::Builtin(name) => builtin_policy(&name, config).expect("validated policy name"),
            PolicyChoice::Serve => {
                let conn = served
                    .get(&id)
                    .ok_or_else(|| ExperimentError::Serve(format!("agent {id} is assigned to serve but unclaimed")))?;
                Box::new(ExternalPolicy::new(Arc::clone(conn), "serve"))
            }
            PolicyChoice::Exec(words) => {
                let conn = Connection::spawn(Command::new(&words[0]).args(&words[1..]))
                    .map_err(|e| ExperimentError::Spec(format!("cannot launch {words:?}: {e}")))?
                    .with_timeout(timeout);
                Box::new(ExternalPolicy::new(Arc::new(Mutex::new(conn)), "exec"))
            }
        };
        out.insert(id, policy);
    }
    Ok(out)
}

fn run_seed(
    spec: &ExperimentSpec,
    seed: u64,
    catalog: &Catalog,
    served: &BTreeMap<AgentId, SharedConnection>,
) -> Result<SeedRun, ExperimentError> {
    let config = MarketConfig { seed, ..spec.config.clone() };
    let mut policies = local_policies(spec, &config, served)?;
    let mut market = Market::new(config.clone(), catalog.clone(), spec.mode, |a| {
        policies.remove(&a.agent_id).expect("one policy per agent")
    })
    .map_err(|source| ExperimentError::Engine { seed, source })?;
    if let Some(path) = &spec.cache {
        market = market.with_cache(ExecutionCache::load(path)?);
    }

    let dir = spec.run_dir().join(format!("seed-{seed}"));
    let snap_dir = dir.join("snapshots");
    fs::create_dir_all(&snap_dir).map_err(io_err(&snap_dir))?;
    let config_path = dir.join("config.toml");
    let config_text = toml::to_string(&config).map_err(|e| ExperimentError::Spec(e.to_string()))?;
    fs::write(&config_path, config_text).map_err(io_err(&config_path))?;

    let log_path = dir.join("transactions.jsonl");
    let mut out = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let mut entries: Vec<LogEntry> = Vec::new();
    let mut flush = |batch: Vec<LogEntry>, out: &mut BufWriter<File>| -> Result<(), ExperimentError> {
        for e in &batch {
            writeln!(out, "{}", serde_json::to_string(e).expect("log entry serializes")).map_err(io_err(&log_path))?;
        }
        entries.extend(batch);
        Ok(())
    };
    while !market.is_finished() {
        let result = market.run_round();
        flush(market.take_log(), &mut out)?;
        if let Err(source) = result {
            out.flush().map_err(io_err(&log_path))?;
            ::log::error!("seed {seed}: {source}");
            return Err(ExperimentError::Engine { seed, source });
        }
        if spec.snapshots {
            let path = snap_dir.join(format!("round-{:03}.json", market.state().round));
            write_json(&path, &market.snapshot())?;
        }
    }
    out.flush().map_err(io_err(&log_path))?;
    if let Some(path) = &spec.cache {
        market.cache_mut().flush(path)?;
    }

    let log = RunLog::from_entries(entries)?;
    let report = summarize(&log);
    write_json(&dir.join("metrics.json"), &report)?;
    let summary_path = dir.join("summary.txt");
    fs::write(&summary_path, render_report(&report)).map_err(io_err(&summary_path))?;
    Ok(SeedRun { seed, dir, log_path, report, log })
}

fn run_with(spec: &ExperimentSpec, served: &BTreeMap<AgentId, SharedConnection>) -> Result<RunArtifacts, ExperimentError> {
    spec.validate()?;
    let catalog = spec.catalog()?;
    let mut seeds = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        ::log::info!("{}: seed {seed}", spec.name);
        seeds.push(run_seed(spec, seed, &catalog, served)?);
    }
    let reports: Vec<MetricsReport> = seeds.iter().map(|s| s.report.clone()).collect();
    let pooled = pool(&reports)?;
    let dir = spec.run_dir();
    write_json(&dir.join("pooled.json"), &pooled)?;
    Ok(RunArtifacts { dir, seeds, pooled })
}

/// Run every seed of `spec`, writing one directory per seed plus
/// `pooled.json`.
pub fn cmd_run(spec: &ExperimentSpec) -> Result<RunArtifacts, ExperimentError> {
    run_with(spec, &BTreeMap::new())
}

/// One variant of an ablation, compared against the base run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub label: String,
    pub pooled: PooledReport,
    /// Cohen's d of per-agent outcomes against the base run, per metric.
    pub effects: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: String,
    pub seeds: Vec<u64>,
    pub base: PooledReport,
    pub variants: Vec<VariantResult>,
}

impl AblationReport {
    pub fn render(&self) -> String {
        let mut out = format!("axis {}  seeds {:?}\n{:<16}", self.axis, self.seeds, "variant");
        for m in AgentOutcome::METRICS {
            out.push_str(&format!(" {m:>22}"));
        }
        out.push('\n');
        for v in &self.variants {
            out.push_str(&format!("{:<16}", v.label));
            for m in AgentOutcome::METRICS {
                out.push_str(&format!(" {:>+22.3}", v.effects[m]));
            }
            out.push('\n');
        }
        out
    }
}

/// Variant configurations for one ablation axis.
pub fn axis_variants(base: &MarketConfig, axis: &str) -> Result<Vec<(String, MarketConfig)>, ExperimentError> {
    let with = |f: &dyn Fn(&mut MarketConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    Ok(match axis {
        "mu" => [1.0, 5.0, 10.0]
            .into_iter()
            .map(|mu| (format!("mu{mu}"), with(&|c| c.mu = mu)))
            .collect(),
        "monoculture" => base
            .families
            .iter()
            .map(|p| (format!("mono-{}", p.family), with(&|c| c.monoculture = Some(p.family.clone()))))
            .collect(),
        "disposition" => [Disposition::Honest, Disposition::Adversarial, Disposition::Collaborative]
            .into_iter()
            .map(|d| (d.as_str().to_string(), with(&|c| c.disposition = d)))
            .collect(),
        "fierce" => vec![(
            "fierce".into(),
            with(&|c| {
                c.elimination_period = 3;
                c.eliminations = 3;
                c.reproductions = 3;
            }),
        )],
        "transparency" => vec![("transparent".into(), with(&|c| c.transparency = true))],
        "horizon" => vec![("rounds48".into(), with(&|c| c.rounds = 48))],
        other => return Err(ExperimentError::UnknownAxis(other.into())),
    })
}

fn outcomes(run: &RunArtifacts) -> Vec<AgentOutcome> {
    run.seeds.iter().flat_map(|s| per_agent_outcomes(&s.log)).filter(|o| o.active).collect()
}

/// Run the base spec and each variant on the same seeds and report effect
/// sizes on per-agent outcomes.
pub fn cmd_ablate(spec: &ExperimentSpec, axis: &str) -> Result<AblationReport, ExperimentError> {
    let variants = axis_variants(&spec.config, axis)?;
    let root = spec.output_dir.join(format!("{}-ablate-{axis}", spec.name));
    let sub = |name: &str, config: MarketConfig| ExperimentSpec {
        name: name.to_string(),
        output_dir: root.clone(),
        config,
        ..spec.clone()
    };
    let base = cmd_run(&sub("base", spec.config.clone()))?;
    let base_outcomes = outcomes(&base);
    let mut results = Vec::new();
    for (label, config) in variants {
        let run = cmd_run(&sub(&label, config))?;
        let var_outcomes = outcomes(&run);
        let effects = AgentOutcome::METRICS
            .iter()
            .map(|m| {
                let pick = |os: &[AgentOutcome]| os.iter().filter_map(|o| o.metric(m)).collect::<Vec<_>>();
                (m.to_string(), cohens_d(&pick(&var_outcomes), &pick(&base_outcomes)))
            })
            .collect();
        results.push(VariantResult { label, pooled: run.pooled, effects });
    }
    let report = AblationReport { axis: axis.into(), seeds: spec.seeds.clone(), base: base.pooled, variants: results };
    write_json(&root.join("ablation.json"), &report)?;
    let text_path = root.join("ablation.txt");
    fs::write(&text_path, report.render()).map_err(io_err(&text_path))?;
    Ok(report)
}

/// Reports grouped by configuration, plus a market/autarky comparison
/// when both modes of one configuration are present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsOutput {
    pub reports: Vec<MetricsReport>,
    /// One pool per (config hash, mode).
    pub pools: Vec<PooledReport>,
    pub comparison: Option<Vec<ComparisonRow>>,
}

impl MetricsOutput {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.reports {
            out.push_str(&render_report(r));
            out.push('\n');
        }
        for p in &self.pools {
            out.push_str(&format!("pool {:?} config {} seeds {:?}\n", p.mode, p.config_hash, p.seeds));
            for (k, s) in &p.scalars {
                out.push_str(&format!("  {k:<20} mean {:>10.4}  cv {:>6.3}\n", s.mean, s.cv));
            }
        }
        if let Some(rows) = &self.comparison {
            out.push('\n');
            out.push_str(&render_comparison(rows));
        }
        out
    }
}

/// Summarise existing logs. Runs are pooled only with runs of the same
/// configuration and mode.
pub fn cmd_metrics(paths: &[PathBuf]) -> Result<MetricsOutput, ExperimentError> {
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.is_file()).cloned().collect();
    if !missing.is_empty() {
        return Err(ExperimentError::MissingLogs(missing));
    }
    let mut reports = Vec::new();
    for p in paths {
        reports.push(summarize(&RunLog::load(p)?));
    }
    let mut groups: BTreeMap<(String, &'static str), Vec<MetricsReport>> = BTreeMap::new();
    for r in &reports {
        groups.entry((r.config_hash.clone(), r.mode.as_str())).or_default().push(r.clone());
    }
    let pools = groups.values().map(|g| pool(g)).collect::<Result<Vec<_>, _>>()?;

    let market: Vec<MetricsReport> = reports.iter().filter(|r| r.mode == Mode::Market).cloned().collect();
    let autarky: Vec<MetricsReport> = reports.iter().filter(|r| r.mode == Mode::Autarky).cloned().collect();
    let comparison = (!market.is_empty() && !autarky.is_empty()).then(|| compare_modes(&market, &autarky));
    Ok(MetricsOutput { reports, pools, comparison })
}

/// Accept agent connections on `endpoint` until every agent assigned to
/// `serve` is claimed, then run the spec with those agents live.
///
/// Each connection opens with `{"hello":{"agents":[3,4]}}` and receives
/// `{"welcome":{...}}` before the first request.
pub fn cmd_serve(spec: &ExperimentSpec, endpoint: &str) -> Result<RunArtifacts, ExperimentError> {
    let listener = TcpListener::bind(endpoint).map_err(|e| ExperimentError::Serve(format!("bind {endpoint}: {e}")))?;
    serve_on(spec, listener)
}

pub fn serve_on(spec: &ExperimentSpec, listener: TcpListener) -> Result<RunArtifacts, ExperimentError> {
    spec.validate()?;
    let mut pending: Vec<AgentId> = spec
        .assignments()?
        .into_iter()
        .filter(|(_, c)| *c == PolicyChoice::Serve)
        .map(|(id, _)| id)
        .collect();
    let timeout = Duration::from_secs_f64(spec.agent_timeout_secs);
    let mut served: BTreeMap<AgentId, SharedConnection> = BTreeMap::new();
    ::log::info!("waiting for {} served agents", pending.len());
    while !pending.is_empty() {
        let (stream, peer) = listener.accept().map_err(|e| ExperimentError::Serve(e.to_string()))?;
        let mut conn = Connection::tcp(stream).map_err(|e| ExperimentError::Serve(e.to_string()))?.with_timeout(timeout);
        let hello = match conn.recv_line(timeout) {
            Ok(line) => line,
            Err(e) => {
                ::log::warn!("{peer}: no hello ({e})");
                continue;
            }
        };
        let claimed: Vec<AgentId> = serde_json::from_str::<serde_json::Value>(&hello)
            .ok()
            .and_then(|v| serde_json::from_value(v["hello"]["agents"].clone()).ok())
            .unwrap_or_default();
        let granted: Vec<AgentId> = claimed.into_iter().filter(|id| pending.contains(id)).collect();
        if granted.is_empty() {
            let _ = conn.send(&json!({ "error": "hello must claim unclaimed served agents", "unclaimed": pending }));
            continue;
        }
        pending.retain(|id| !granted.contains(id));
        let _ = conn.send(&json!({
            "welcome": { "agents": granted, "seeds": spec.seeds, "rounds": spec.config.rounds, "mode": spec.mode }
        }));
        let shared = Arc::new(Mutex::new(conn));
        for id in granted {
            served.insert(id, Arc::clone(&shared));
        }
    }
    run_with(spec, &served)
}
