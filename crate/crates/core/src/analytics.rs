//! Inequality, concentration, network and settlement metrics computed
//! from transaction logs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::economy::{AgentId, PaymentStatus};
use crate::market::log::{AgentLine, RunLog, TransactionRecord};
use crate::market::Mode;
use crate::rng::{substream, Phase, SimRng};

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("{0} needs at least one value")]
    Empty(&'static str),
    #[error("{0} needs non-negative finite values")]
    InvalidValue(&'static str),
    #[error("total volume is zero")]
    ZeroTotal,
    #[error("cannot pool runs with different configurations ({0} vs {1})")]
    MixedConfigs(String, String),
    #[error("cannot pool runs of different modes")]
    MixedModes,
}

fn check(values: &[f64], what: &'static str) -> Result<(), AnalyticsError> {
    if values.is_empty() {
        return Err(AnalyticsError::Empty(what));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(AnalyticsError::InvalidValue(what));
    }
    Ok(())
}

/// Mean absolute difference over twice the mean, via the sorted-rank form.
pub fn gini(values: &[f64]) -> Result<f64, AnalyticsError> {
    check(values, "gini")?;
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let total: f64 = v.iter().sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let weighted: f64 = v.iter().enumerate().map(|(i, x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x).sum();
    Ok((weighted / (n * total)).max(0.0))
}

/// Gini on wealth, with negative balances counted as zero.
pub fn wealth_gini(wealth: &[f64]) -> Result<f64, AnalyticsError> {
    let clamped: Vec<f64> = wealth.iter().map(|w| w.max(0.0)).collect();
    gini(&clamped)
}

pub fn hhi(volumes: &[f64]) -> Result<f64, AnalyticsError> {
    check(volumes, "hhi")?;
    let total: f64 = volumes.iter().sum();
    if total <= 0.0 {
        return Err(AnalyticsError::ZeroTotal);
    }
    Ok(volumes.iter().map(|v| (v / total).powi(2)).sum())
}

/// Share of distinct directed edges whose reverse edge is also present.
/// Duplicates collapse and self-loops are ignored.
pub fn reciprocity<T: Ord + Copy>(edges: &[(T, T)]) -> f64 {
    let set: BTreeSet<(T, T)> = edges.iter().copied().filter(|(u, v)| u != v).collect();
    if set.is_empty() {
        return 0.0;
    }
    let mutual = set.iter().filter(|(u, v)| set.contains(&(*v, *u))).count();
    mutual as f64 / set.len() as f64
}

/// Mean reciprocity of uniformly random directed graphs with `n_nodes`
/// nodes and exactly `n_edges` distinct non-loop edges.
pub fn random_reciprocity_baseline(n_nodes: usize, n_edges: usize, trials: usize, rng: &mut SimRng) -> f64 {
    let slots = n_nodes * n_nodes.saturating_sub(1);
    if slots == 0 || n_edges == 0 || trials == 0 {
        return 0.0;
    }
    let m = n_edges.min(slots);
    let decode = |k: usize| {
        let u = k / (n_nodes - 1);
        let mut v = k % (n_nodes - 1);
        if v >= u {
            v += 1;
        }
        (u, v)
    };
    let total: f64 = (0..trials)
        .map(|_| {
            let edges: Vec<(usize, usize)> = sample(rng, slots, m).into_iter().map(decode).collect();
            reciprocity(&edges)
        })
        .sum();
    total / trials as f64
}

/// Among adequate deliveries (q >= 0.5), the share settled as disputes.
pub fn false_dispute_rate<'a>(records: impl IntoIterator<Item = &'a TransactionRecord>) -> f64 {
    let (mut adequate, mut disputed) = (0usize, 0usize);
    for r in records.into_iter().filter(|r| r.is_adequate()) {
        adequate += 1;
        disputed += usize::from(r.status == PaymentStatus::Dispute);
    }
    if adequate == 0 {
        0.0
    } else {
        disputed as f64 / adequate as f64
    }
}

pub fn false_dispute_rate_by<'a, K: Ord>(
    records: impl IntoIterator<Item = &'a TransactionRecord>,
    key: impl Fn(&TransactionRecord) -> K,
) -> BTreeMap<K, f64> {
    let mut groups: BTreeMap<K, Vec<&TransactionRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(key(r)).or_default().push(r);
    }
    groups.into_iter().map(|(k, rs)| (k, false_dispute_rate(rs))).collect()
}

/// Cumulative (population share, value share) after an ascending sort.
/// An all-zero input returns the equality diagonal.
pub fn lorenz_points(values: &[f64]) -> Result<Vec<(f64, f64)>, AnalyticsError> {
    check(values, "lorenz_points")?;
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let total: f64 = v.iter().sum();
    let mut acc = 0.0;
    Ok(v.iter()
        .enumerate()
        .map(|(i, x)| {
            acc += x;
            let share = if total > 0.0 { acc / total } else { (i + 1) as f64 / n };
            ((i + 1) as f64 / n, share)
        })
        .collect())
}

/// Gini from the area under a Lorenz curve (trapezoids from the origin).
pub fn lorenz_gini(points: &[(f64, f64)]) -> f64 {
    let mut prev = (0.0, 0.0);
    let mut area = 0.0;
    for &(x, y) in points {
        area += (x - prev.0) * (y + prev.1) / 2.0;
        prev = (x, y);
    }
    1.0 - 2.0 * area
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Coefficient of variation; 0 when the mean is 0.
pub fn cv(values: &[f64]) -> f64 {
    let m = mean(values);
    if m == 0.0 {
        0.0
    } else {
        std_dev(values) / m.abs()
    }
}

/// Effect size of `a` relative to `b` with the pooled standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    if na < 2.0 || nb < 2.0 {
        return 0.0;
    }
    let pooled = (((na - 1.0) * std_dev(a).powi(2) + (nb - 1.0) * std_dev(b).powi(2)) / (na + nb - 2.0)).sqrt();
    if pooled == 0.0 {
        0.0
    } else {
        (mean(a) - mean(b)) / pooled
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisputeLabel {
    DisputeRate,
    /// Autarky has no poster, so the field holds the task failure rate.
    FailRate,
}

/// Metrics over one window of the log: a single round or the whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub round: Option<u32>,
    pub settled: usize,
    pub mean_wealth: f64,
    pub wealth_gini: f64,
    /// Gini of contracts won per agent.
    pub award_gini: f64,
    /// Gini of reward dollars earned per agent as contractor.
    pub volume_gini: f64,
    /// HHI on contract counts; `None` when nothing settled.
    pub hhi_contracts: Option<f64>,
    /// HHI on contractor dollar volume.
    pub hhi_volume: Option<f64>,
    pub unique_pairs: usize,
    pub unique_edges: usize,
    pub reciprocity: f64,
    pub reciprocity_by_family: BTreeMap<String, f64>,
    pub cross_family_share: f64,
    pub dispute_label: DisputeLabel,
    pub dispute_rate: f64,
    pub false_dispute_rate: f64,
    pub false_dispute_by_family: BTreeMap<String, f64>,
    pub false_dispute_by_skill: BTreeMap<String, f64>,
    pub mean_quality: f64,
    pub task_success_rate: f64,
    pub skill_match_share: f64,
    /// Mean over agents of |won - awarded| / (won + awarded).
    pub role_specialisation: f64,
    pub lorenz: Vec<(f64, f64)>,
}

fn share(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

fn window(round: Option<u32>, mode: Mode, records: &[&TransactionRecord], agents: &[AgentLine]) -> WindowMetrics {
    let active: Vec<f64> = agents.iter().filter(|a| a.active).map(|a| a.wealth).collect();
    let wealth = if active.is_empty() { vec![0.0] } else { active };
    let mut won: BTreeMap<AgentId, f64> = agents.iter().map(|a| (a.agent_id, 0.0)).collect();
    let mut volume = won.clone();
    let mut awarded = won.clone();
    for r in records {
        *won.entry(r.contractor).or_default() += 1.0;
        *volume.entry(r.contractor).or_default() += r.earned().max(0.0);
        *awarded.entry(r.poster).or_default() += 1.0;
    }
    let won_v: Vec<f64> = won.values().copied().collect();
    let volume_v: Vec<f64> = volume.values().copied().collect();
    let gini_or_zero = |v: &[f64]| if v.is_empty() { 0.0 } else { gini(v).unwrap_or(0.0) };

    let edges: Vec<(AgentId, AgentId)> = records.iter().map(|r| (r.poster, r.contractor)).filter(|(p, c)| p != c).collect();
    let unique_edges = edges.iter().collect::<BTreeSet<_>>().len();
    let pairs: BTreeSet<(AgentId, AgentId)> = edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    let mut by_family: BTreeMap<String, Vec<(AgentId, AgentId)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.poster != r.contractor) {
        by_family.entry(r.poster_family.clone()).or_default().push((r.poster, r.contractor));
    }
    // reverse edges may come from any family
    let all_edges: BTreeSet<(AgentId, AgentId)> = edges.iter().copied().collect();
    let reciprocity_by_family = by_family
        .into_iter()
        .map(|(fam, es)| {
            let own: BTreeSet<_> = es.into_iter().collect();
            let mutual = own.iter().filter(|(u, v)| all_edges.contains(&(*v, *u))).count();
            (fam, share(mutual, own.len()))
        })
        .collect();

    let n = records.len();
    let success = records.iter().filter(|r| r.quality >= 1.0).count();
    let (dispute_label, dispute_rate) = match mode {
        Mode::Market => (
            DisputeLabel::DisputeRate,
            share(records.iter().filter(|r| r.status == PaymentStatus::Dispute).count(), n),
        ),
        Mode::Autarky => (DisputeLabel::FailRate, if n == 0 { 0.0 } else { 1.0 - share(success, n) }),
    };
    let roles: Vec<f64> = agents
        .iter()
        .filter_map(|a| {
            let (w, p) = (won[&a.agent_id], awarded[&a.agent_id]);
            (w + p > 0.0 && mode == Mode::Market).then(|| (w - p).abs() / (w + p))
        })
        .collect();

    WindowMetrics {
        round,
        settled: n,
        mean_wealth: mean(&wealth),
        wealth_gini: wealth_gini(&wealth).unwrap_or(0.0),
        award_gini: gini_or_zero(&won_v),
        volume_gini: gini_or_zero(&volume_v),
        hhi_contracts: hhi(&won_v).ok(),
        hhi_volume: hhi(&volume_v).ok(),
        unique_pairs: pairs.len(),
        unique_edges,
        reciprocity: reciprocity(&edges),
        reciprocity_by_family,
        cross_family_share: share(records.iter().filter(|r| r.cross_family).count(), n),
        dispute_label,
        dispute_rate,
        false_dispute_rate: false_dispute_rate(records.iter().copied()),
        false_dispute_by_family: false_dispute_rate_by(records.iter().copied(), |r| r.poster_family.clone()),
        false_dispute_by_skill: false_dispute_rate_by(records.iter().copied(), |r| r.domain.as_str().to_string()),
        mean_quality: mean(&records.iter().map(|r| r.quality).collect::<Vec<_>>()),
        task_success_rate: share(success, n),
        skill_match_share: share(records.iter().filter(|r| r.skill_matched).count(), n),
        role_specialisation: mean(&roles),
        lorenz: lorenz_points(&wealth.iter().map(|w| w.max(0.0)).collect::<Vec<_>>()).unwrap_or_default(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: String,
    pub rounds: Vec<WindowMetrics>,
    #[serde(rename = "final")]
    pub overall: WindowMetrics,
    /// Mean reciprocity of random graphs matched to the average round's
    /// node and distinct-edge counts.
    pub random_reciprocity_baseline: f64,
    /// Final wealth of each active agent, for effect sizes.
    pub final_wealth: Vec<f64>,
    pub qualities: Vec<f64>,
}

/// Full report for one run.
pub fn summarize(log: &RunLog) -> MetricsReport {
    let mode = log.header.mode;
    let rounds: Vec<WindowMetrics> = log
        .rounds
        .iter()
        .map(|r| window(Some(r.summary.round), mode, &r.transactions.iter().collect::<Vec<_>>(), &r.summary.agents))
        .collect();
    let all: Vec<&TransactionRecord> = log.transactions().collect();
    let final_agents = log.final_agents();
    let overall = window(None, mode, &all, final_agents);

    let active = final_agents.iter().filter(|a| a.active).count();
    let avg_edges = mean(&rounds.iter().map(|r| r.unique_edges as f64).collect::<Vec<_>>()).round() as usize;
    let mut rng = substream(log.header.seed, 0, Phase::Setup, u64::MAX);
    let random_reciprocity_baseline = random_reciprocity_baseline(active, avg_edges, 200, &mut rng);

    MetricsReport {
        mode,
        seed: log.header.seed,
        config_hash: log.header.config_hash.clone(),
        rounds,
        overall,
        random_reciprocity_baseline,
        final_wealth: final_agents.iter().filter(|a| a.active).map(|a| a.wealth).collect(),
        qualities: all.iter().map(|r| r.quality).collect(),
    }
}

/// Final outcomes of one agent over a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentOutcome {
    pub agent_id: AgentId,
    pub active: bool,
    pub wealth: f64,
    pub contracts_won: usize,
    pub contracts_awarded: usize,
    /// Mean payment ratio received as contractor; 0 without contracts.
    pub mean_rho_received: f64,
    pub disputes_received: usize,
    pub mean_quality_delivered: f64,
}

impl AgentOutcome {
    pub const METRICS: [&'static str; 6] =
        ["wealth", "contracts_won", "contracts_awarded", "mean_rho_received", "dispute_share", "mean_quality_delivered"];

    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "wealth" => self.wealth,
            "contracts_won" => self.contracts_won as f64,
            "contracts_awarded" => self.contracts_awarded as f64,
            "mean_rho_received" => self.mean_rho_received,
            "dispute_share" => share(self.disputes_received, self.contracts_won),
            "mean_quality_delivered" => self.mean_quality_delivered,
            _ => return None,
        })
    }
}

pub fn per_agent_outcomes(log: &RunLog) -> Vec<AgentOutcome> {
    let mut out: BTreeMap<AgentId, AgentOutcome> = log
        .final_agents()
        .iter()
        .map(|a| {
            (
                a.agent_id,
                AgentOutcome {
                    agent_id: a.agent_id,
                    active: a.active,
                    wealth: a.wealth,
                    contracts_won: 0,
                    contracts_awarded: 0,
                    mean_rho_received: 0.0,
                    disputes_received: 0,
                    mean_quality_delivered: 0.0,
                },
            )
        })
        .collect();
    for r in log.transactions() {
        if let Some(p) = out.get_mut(&r.poster) {
            p.contracts_awarded += 1;
        }
        if let Some(c) = out.get_mut(&r.contractor) {
            c.contracts_won += 1;
            c.mean_rho_received += r.rho;
            c.mean_quality_delivered += r.quality;
            c.disputes_received += usize::from(r.status == PaymentStatus::Dispute);
        }
    }
    out.into_values()
        .map(|mut o| {
            if o.contracts_won > 0 {
                o.mean_rho_received /= o.contracts_won as f64;
                o.mean_quality_delivered /= o.contracts_won as f64;
            }
            o
        })
        .collect()
}

/// A scalar across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub cv: f64,
    pub per_seed: Vec<f64>,
}

impl Spread {
    fn of(per_seed: Vec<f64>) -> Self {
        Self { mean: mean(&per_seed), cv: cv(&per_seed), per_seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledReport {
    pub mode: Mode,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub scalars: BTreeMap<String, Spread>,
}

fn scalars(w: &WindowMetrics) -> Vec<(&'static str, f64)> {
    vec![
        ("mean_wealth", w.mean_wealth),
        ("wealth_gini", w.wealth_gini),
        ("award_gini", w.award_gini),
        ("volume_gini", w.volume_gini),
        ("hhi_contracts", w.hhi_contracts.unwrap_or(0.0)),
        ("hhi_volume", w.hhi_volume.unwrap_or(0.0)),
        ("reciprocity", w.reciprocity),
        ("cross_family_share", w.cross_family_share),
        ("dispute_rate", w.dispute_rate),
        ("false_dispute_rate", w.false_dispute_rate),
        ("mean_quality", w.mean_quality),
        ("task_success_rate", w.task_success_rate),
        ("skill_match_share", w.skill_match_share),
        ("settled", w.settled as f64),
    ]
}

/// Pool single-seed reports of one configuration.
pub fn pool(reports: &[MetricsReport]) -> Result<PooledReport, AnalyticsError> {
    let first = reports.first().ok_or(AnalyticsError::Empty("pool"))?;
    for r in reports {
        if r.config_hash != first.config_hash {
            return Err(AnalyticsError::MixedConfigs(first.config_hash.clone(), r.config_hash.clone()));
        }
        if r.mode != first.mode {
            return Err(AnalyticsError::MixedModes);
        }
    }
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (k, v) in scalars(&r.overall) {
            acc.entry(k.to_string()).or_default().push(v);
        }
    }
    Ok(PooledReport {
        mode: first.mode,
        config_hash: first.config_hash.clone(),
        seeds: reports.iter().map(|r| r.seed).collect(),
        scalars: acc.into_iter().map(|(k, v)| (k, Spread::of(v))).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub market: f64,
    pub autarky: f64,
    pub cohens_d: Option<f64>,
}

/// Market against autarky, pooling every seed on each side.
pub fn compare_modes(market: &[MetricsReport], autarky: &[MetricsReport]) -> Vec<ComparisonRow> {
    let pooled = |rs: &[MetricsReport], f: &dyn Fn(&MetricsReport) -> Vec<f64>| rs.iter().flat_map(f).collect::<Vec<_>>();
    let avg = |rs: &[MetricsReport], f: fn(&WindowMetrics) -> f64| mean(&rs.iter().map(|r| f(&r.overall)).collect::<Vec<_>>());
    let mw = pooled(market, &|r| r.final_wealth.clone());
    let aw = pooled(autarky, &|r| r.final_wealth.clone());
    let mq = pooled(market, &|r| r.qualities.clone());
    let aq = pooled(autarky, &|r| r.qualities.clone());
    let row = |metric: &str, market: f64, autarky: f64, d: Option<f64>| ComparisonRow {
        metric: metric.to_string(),
        market,
        autarky,
        cohens_d: d,
    };
    vec![
        row("Mean wealth", mean(&mw), mean(&aw), Some(cohens_d(&mw, &aw))),
        row("Wealth Gini", avg(market, |w| w.wealth_gini), avg(autarky, |w| w.wealth_gini), None),
        row("Mean quality", mean(&mq), mean(&aq), Some(cohens_d(&mq, &aq))),
        row("Task success rate", avg(market, |w| w.task_success_rate), avg(autarky, |w| w.task_success_rate), None),
        row("Contract Gini", avg(market, |w| w.award_gini), avg(autarky, |w| w.award_gini), None),
        row("Dispute / fail rate", avg(market, |w| w.dispute_rate), avg(autarky, |w| w.dispute_rate), None),
        row(
            "Role specialisation",
            avg(market, |w| w.role_specialisation),
            avg(autarky, |w| w.role_specialisation),
            None,
        ),
    ]
}

pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let mut out = format!("{:<22} {:>10} {:>10} {:>9}\n", "metric", "market", "autarky", "cohen_d");
    for r in rows {
        let d = r.cohens_d.map_or("-".to_string(), |d| format!("{d:+.2}"));
        let _ = writeln!(out, "{:<22} {:>10.4} {:>10.4} {:>9}", r.metric, r.market, r.autarky, d);
    }
    out
}

/// Plain-text table: one line per round, then the run totals.
pub fn render_report(report: &MetricsReport) -> String {
    let dispute = match report.overall.dispute_label {
        DisputeLabel::DisputeRate => "dispute",
        DisputeLabel::FailRate => "fail",
    };
    let mut out = format!(
        "mode {:?}  seed {}  config {}\n{:>5} {:>7} {:>9} {:>6} {:>6} {:>6} {:>6} {:>8} {:>7} {:>6}\n",
        report.mode, report.seed, report.config_hash, "round", "settled", "wealth", "gini", "hhi", "recip", "xfam", dispute,
        "quality", "match"
    );
    let line = |out: &mut String, label: String, w: &WindowMetrics| {
        let _ = writeln!(
            out,
            "{:>5} {:>7} {:>9.4} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>8.3} {:>7.3} {:>6.3}",
            label,
            w.settled,
            w.mean_wealth,
            w.wealth_gini,
            w.hhi_contracts.unwrap_or(0.0),
            w.reciprocity,
            w.cross_family_share,
            w.dispute_rate,
            w.mean_quality,
            w.skill_match_share
        );
    };
    for w in &report.rounds {
        line(&mut out, w.round.unwrap_or_default().to_string(), w);
    }
    line(&mut out, "all".into(), &report.overall);
    let _ = writeln!(
        out,
        "false disputes {:.3}  success {:.3}  award gini {:.3}  random reciprocity {:.3}",
        report.overall.false_dispute_rate,
        report.overall.task_success_rate,
        report.overall.award_gini,
        report.random_reciprocity_baseline
    );
    out
}
