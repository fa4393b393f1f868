//! Transaction log records and the per-round state snapshot.
//!
//! The log is newline-delimited JSON. Each line is tagged with a `record`
//! field naming its kind, so a reader can rebuild every round from the log
//! alone.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::economy::{
    contractor_profit, poster_profit, AgentId, AgentState, PaymentStatus, SkillCluster, Usd,
};
use crate::execution::Tier;
use crate::market::listing::ContractListing;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Market,
    Autarky,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Market => "market",
            Mode::Autarky => "autarky",
        }
    }
}

/// One settled contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub round: u32,
    pub listing_id: u64,
    pub poster: AgentId,
    pub contractor: AgentId,
    pub task_id: String,
    pub domain: SkillCluster,
    pub mode: Mode,
    /// Reward the poster earned from the client for this contract.
    pub reward: Usd,
    pub bid_price: Usd,
    pub rho: f64,
    pub status: PaymentStatus,
    pub quality: f64,
    pub exec_cost: Usd,
    pub mu: f64,
    pub tier: Tier,
    pub surge_depth: u32,
    pub poster_backbone: Usd,
    pub contractor_backbone: Usd,
    pub poster_profit: Usd,
    pub contractor_profit: Usd,
    pub skill_matched: bool,
    pub cross_family: bool,
    pub poster_family: String,
    pub contractor_family: String,
    pub poster_skill: Option<SkillCluster>,
    pub contractor_skill: SkillCluster,
}

impl TransactionRecord {
    /// Money paid by the client into the market for this record.
    pub fn earned(&self) -> Usd {
        match self.mode {
            Mode::Market => self.reward,
            Mode::Autarky => self.rho * self.reward,
        }
    }

    pub fn scaled_exec_cost(&self) -> Usd {
        self.mu * self.exec_cost
    }

    pub fn backbone(&self) -> Usd {
        self.poster_backbone + self.contractor_backbone
    }

    /// Profits recomputed from the stored fields.
    pub fn recomputed_profits(&self) -> (Usd, Usd) {
        match self.mode {
            Mode::Market => (
                poster_profit(self.reward, self.rho, self.bid_price, self.poster_backbone),
                contractor_profit(self.rho, self.bid_price, self.mu, self.exec_cost, self.contractor_backbone),
            ),
            Mode::Autarky => (
                0.0,
                contractor_profit(self.rho, self.bid_price, self.mu, self.exec_cost, self.contractor_backbone),
            ),
        }
    }

    pub fn is_adequate(&self) -> bool {
        self.quality >= 0.5
    }
}

/// Compact per-agent line written at the end of every round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentLine {
    pub agent_id: AgentId,
    pub family: String,
    pub skill: SkillCluster,
    pub wealth: Usd,
    pub active: bool,
    pub generation: u32,
}

impl From<&AgentState> for AgentLine {
    fn from(a: &AgentState) -> Self {
        Self {
            agent_id: a.agent_id,
            family: a.family.family.clone(),
            skill: a.skill,
            wealth: a.wealth,
            active: a.active,
            generation: a.generation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub listings_posted: usize,
    pub surge_offered: usize,
    pub settled: usize,
    pub surge_pool_size: usize,
    /// Backbone charges not attached to any transaction (bids, beliefs,
    /// selections that rejected every bid, declined autarky tasks).
    pub overhead_backbone: Usd,
    pub rewards: Usd,
    pub exec_costs: Usd,
    pub backbone_costs: Usd,
    pub total_wealth: Usd,
    pub platform_balance: Usd,
    pub agents: Vec<AgentLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spawn {
    pub child: AgentId,
    pub parent: AgentId,
    pub wealth: Usd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionRecord {
    pub round: u32,
    /// Deactivated agents with the balance they held when ranked.
    pub deactivated: Vec<(AgentId, Usd)>,
    pub spawned: Vec<Spawn>,
    pub total_before: Usd,
    pub total_after: Usd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub round: u32,
    pub agent: Option<AgentId>,
    pub phase: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: u32,
    pub mode: Mode,
    pub seed: u64,
    pub rounds: u32,
    pub n_agents: usize,
    pub config_hash: String,
}

pub const LOG_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogEntry {
    Header(LogHeader),
    Transaction(TransactionRecord),
    Evolution(EvolutionRecord),
    Incident(Incident),
    Round(RoundRecord),
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("log has no header line")]
    MissingHeader,
    #[error("log truncated: round {round} is incomplete or missing")]
    Truncated { round: u32 },
}

pub fn write_entries(path: &Path, entries: &[LogEntry]) -> Result<(), LogError> {
    let mut out = BufWriter::new(File::create(path)?);
    for e in entries {
        writeln!(out, "{}", serde_json::to_string(e).expect("log entry serializes"))?;
    }
    out.flush()?;
    Ok(())
}

pub fn parse_entries(text: &str) -> Result<Vec<LogEntry>, LogError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LogError::Parse { line: i + 1, message: e.to_string() })
        })
        .collect()
}

pub fn read_entries(path: &Path) -> Result<Vec<LogEntry>, LogError> {
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(
            serde_json::from_str(&line).map_err(|e| LogError::Parse { line: i + 1, message: e.to_string() })?,
        );
    }
    Ok(entries)
}

/// Log entries regrouped by round.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: LogHeader,
    pub rounds: Vec<RoundLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub summary: RoundRecord,
    pub transactions: Vec<TransactionRecord>,
    pub evolution: Option<EvolutionRecord>,
    pub incidents: Vec<Incident>,
}

impl RunLog {
    /// Regroup a flat entry list, rejecting logs whose rounds are incomplete.
    pub fn from_entries(entries: Vec<LogEntry>) -> Result<Self, LogError> {
        let mut iter = entries.into_iter();
        let header = match iter.next() {
            Some(LogEntry::Header(h)) => h,
            _ => return Err(LogError::MissingHeader),
        };
        let mut rounds = Vec::new();
        let mut txs = Vec::new();
        let mut evolution = None;
        let mut incidents = Vec::new();
        for entry in iter {
            let expected = rounds.len() as u32 + 1;
            let check = |r: u32| if r == expected { Ok(()) } else { Err(LogError::Truncated { round: expected }) };
            match entry {
                LogEntry::Header(_) => return Err(LogError::Parse { line: 0, message: "second header".into() }),
                LogEntry::Transaction(t) => {
                    check(t.round)?;
                    txs.push(t);
                }
                LogEntry::Evolution(e) => {
                    check(e.round)?;
                    evolution = Some(e);
                }
                LogEntry::Incident(i) => {
                    check(i.round)?;
                    incidents.push(i);
                }
                LogEntry::Round(r) => {
                    check(r.round)?;
                    if r.settled != txs.len() {
                        return Err(LogError::Truncated { round: r.round });
                    }
                    rounds.push(RoundLog {
                        summary: r,
                        transactions: std::mem::take(&mut txs),
                        evolution: evolution.take(),
                        incidents: std::mem::take(&mut incidents),
                    });
                }
            }
        }
        if !txs.is_empty() || evolution.is_some() || rounds.len() < header.rounds as usize {
            return Err(LogError::Truncated { round: rounds.len() as u32 + 1 });
        }
        Ok(Self { header, rounds })
    }

    pub fn load(path: &Path) -> Result<Self, LogError> {
        Self::from_entries(read_entries(path)?)
    }

    pub fn transactions(&self) -> impl Iterator<Item = &TransactionRecord> {
        self.rounds.iter().flat_map(|r| r.transactions.iter())
    }

    pub fn final_agents(&self) -> &[AgentLine] {
        self.rounds.last().map(|r| r.summary.agents.as_slice()).unwrap_or(&[])
    }
}

/// Read-only view of the whole market written after every round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSnapshot {
    pub round: u32,
    pub mode: Mode,
    pub config_hash: String,
    pub platform_balance: Usd,
    pub agents: Vec<AgentState>,
    pub surge_pool: Vec<ContractListing>,
    pub recent_transactions: Vec<TransactionRecord>,
}
