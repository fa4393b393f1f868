//! The ten read-only market queries.
//!
//! [`MarketApi`] only ever holds shared borrows of market state, so no
//! query can mutate it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::economy::{
    contractor_profit, llm_call_cost, poster_profit, AgentId, MarketConfig, PriceTable, SkillCluster, Usd,
};
use crate::execution::{Catalog, Tier};
use crate::market::log::{RoundRecord, TransactionRecord};
use crate::market::MarketState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "query", rename_all = "snake_case")]
pub enum Query {
    CheckBalance { agent_id: AgentId },
    EstimateCost { family: String, tokens_in: u64, tokens_out: u64 },
    QueryReputation { agent_id: AgentId },
    GetPrices,
    CalculateProfit {
        listing_id: u64,
        price: Usd,
        #[serde(default)]
        tier: Option<Tier>,
        #[serde(default)]
        agent_id: Option<AgentId>,
    },
    PreviewTask { listing_id: u64 },
    Leaderboard,
    MarketSummary,
    RoundHistory {
        #[serde(default)]
        round: Option<u32>,
    },
    TransactionLog {
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        agent_id: Option<AgentId>,
    },
}

impl Query {
    pub const NAMES: [&'static str; 10] = [
        "check_balance",
        "estimate_cost",
        "query_reputation",
        "get_prices",
        "calculate_profit",
        "preview_task",
        "leaderboard",
        "market_summary",
        "round_history",
        "transaction_log",
    ];
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApiError {
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("unknown listing {0}")]
    UnknownListing(u64),
    #[error("unknown family {0}")]
    UnknownFamily(String),
    #[error("no record for round {0}")]
    UnknownRound(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Balance {
    pub agent_id: AgentId,
    pub balance: Usd,
    pub backbone_cost: Usd,
    pub execution_cost: Usd,
    pub profit: Usd,
    pub dispute_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reputation {
    pub agent_id: AgentId,
    pub family: String,
    pub skill: SkillCluster,
    pub active: bool,
    pub generation: u32,
    pub poster_history: Vec<f64>,
    pub contractor_history: Vec<f64>,
    pub poster_avg_rho: f64,
    pub contractor_avg_rho: f64,
    pub poster_dispute_rate: f64,
    pub contractor_dispute_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfitProjection {
    pub listing_id: u64,
    pub reward: Usd,
    pub price: Usd,
    pub tier: Tier,
    pub expected_exec_cost: Usd,
    pub contractor_profit_full: Usd,
    pub contractor_profit_floor: Usd,
    pub poster_profit_full: Usd,
    pub poster_profit_floor: Usd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPreview {
    pub listing_id: u64,
    pub task_id: String,
    pub domain: SkillCluster,
    pub source: String,
    pub pass_rate: f64,
    pub c_ref: Usd,
    pub reward: Usd,
    pub surge_depth: u32,
    pub batch_size: f64,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub rank: usize,
    pub agent_id: AgentId,
    pub family: String,
    pub skill: SkillCluster,
    pub balance: Usd,
    pub active: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub agents: usize,
    pub active: usize,
    pub total_balance: Usd,
    pub mean_balance: Usd,
    pub contracts_won: usize,
    pub contracts_posted: usize,
    pub mean_rho_received: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct MarketApi<'a> {
    state: &'a MarketState,
    config: &'a MarketConfig,
    catalog: &'a Catalog,
}

impl<'a> MarketApi<'a> {
    pub fn new(state: &'a MarketState, config: &'a MarketConfig, catalog: &'a Catalog) -> Self {
        Self { state, config, catalog }
    }

    pub fn config(&self) -> &'a MarketConfig {
        self.config
    }

    pub fn catalog(&self) -> &'a Catalog {
        self.catalog
    }

    pub fn round(&self) -> u32 {
        self.state.round
    }

    pub fn check_balance(&self, agent_id: AgentId) -> Result<Balance, ApiError> {
        let a = self.state.agent(agent_id).ok_or(ApiError::UnknownAgent(agent_id))?;
        Ok(Balance {
            agent_id,
            balance: a.wealth,
            backbone_cost: a.backbone_spent,
            execution_cost: a.execution_spent,
            profit: a.profit,
            dispute_rate: a.contractor_dispute_rate(&self.config.payment_rule()),
        })
    }

    pub fn estimate_cost(&self, family: &str, tokens_in: u64, tokens_out: u64) -> Result<Usd, ApiError> {
        let prices = self.config.family(family).ok_or_else(|| ApiError::UnknownFamily(family.to_string()))?;
        Ok(llm_call_cost(prices, tokens_in, tokens_out))
    }

    pub fn query_reputation(&self, agent_id: AgentId) -> Result<Reputation, ApiError> {
        let a = self.state.agent(agent_id).ok_or(ApiError::UnknownAgent(agent_id))?;
        let rule = self.config.payment_rule();
        Ok(Reputation {
            agent_id,
            family: a.family.family.clone(),
            skill: a.skill,
            active: a.active,
            generation: a.generation,
            poster_history: a.payment_history_as_poster.clone(),
            contractor_history: a.payment_history_as_contractor.clone(),
            poster_avg_rho: a.poster_avg_rho(),
            contractor_avg_rho: a.contractor_avg_rho(),
            poster_dispute_rate: a.poster_dispute_rate(&rule),
            contractor_dispute_rate: a.contractor_dispute_rate(&rule),
        })
    }

    pub fn get_prices(&self) -> &'a [PriceTable] {
        &self.config.families
    }

    pub fn calculate_profit(
        &self,
        listing_id: u64,
        price: Usd,
        tier: Option<Tier>,
        agent_id: Option<AgentId>,
    ) -> Result<ProfitProjection, ApiError> {
        let listing = self.state.open_listing(listing_id).ok_or(ApiError::UnknownListing(listing_id))?;
        let tier = tier.unwrap_or(Tier::Mid);
        let exec = self.config.execution.expected_cost(&listing.task, tier);
        let (bid_bb, poster_bb) = match agent_id {
            Some(id) => {
                let a = self.state.agent(id).ok_or(ApiError::UnknownAgent(id))?;
                (self.config.decision_cost(&a.family), 0.0)
            }
            None => (0.0, 0.0),
        };
        let mu = self.config.mu;
        let floor = self.config.rho_min;
        let reward = listing.current_reward;
        Ok(ProfitProjection {
            listing_id,
            reward,
            price,
            tier,
            expected_exec_cost: mu * exec,
            contractor_profit_full: contractor_profit(1.0, price, mu, exec, bid_bb),
            contractor_profit_floor: contractor_profit(floor, price, mu, exec, bid_bb),
            poster_profit_full: poster_profit(reward, 1.0, price, poster_bb),
            poster_profit_floor: poster_profit(reward, floor, price, poster_bb),
        })
    }

    pub fn preview_task(&self, listing_id: u64) -> Result<TaskPreview, ApiError> {
        let l = self.state.open_listing(listing_id).ok_or(ApiError::UnknownListing(listing_id))?;
        Ok(TaskPreview {
            listing_id,
            task_id: l.task.task_id.clone(),
            domain: l.task.domain,
            source: l.task.source.clone(),
            pass_rate: l.task.pass_rate,
            c_ref: l.task.c_ref,
            reward: l.current_reward,
            surge_depth: l.surge_depth,
            batch_size: self.config.mu,
            tokens_in: self.config.backbone.tokens_in,
            tokens_out: self.config.backbone.tokens_out,
        })
    }

    /// Agents by balance, richest first; ties go to the lower id.
    pub fn leaderboard(&self) -> Vec<LeaderboardEntry> {
        let mut agents: Vec<_> = self.state.agents.iter().collect();
        agents.sort_by(|a, b| b.wealth.total_cmp(&a.wealth).then(a.agent_id.cmp(&b.agent_id)));
        agents
            .into_iter()
            .enumerate()
            .map(|(i, a)| LeaderboardEntry {
                rank: i + 1,
                agent_id: a.agent_id,
                family: a.family.family.clone(),
                skill: a.skill,
                balance: a.wealth,
                active: a.active,
            })
            .collect()
    }

    pub fn market_summary(&self) -> BTreeMap<String, FamilySummary> {
        let mut out: BTreeMap<String, FamilySummary> = BTreeMap::new();
        let mut received: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for a in &self.state.agents {
            let s = out.entry(a.family.family.clone()).or_default();
            s.agents += 1;
            s.active += usize::from(a.active);
            s.total_balance += a.wealth;
        }
        for t in &self.state.transactions {
            if let Some(s) = out.get_mut(&t.contractor_family) {
                s.contracts_won += 1;
            }
            if let Some(s) = out.get_mut(&t.poster_family) {
                s.contracts_posted += 1;
            }
            let r = received.entry(t.contractor_family.clone()).or_default();
            r.0 += t.rho;
            r.1 += 1;
        }
        for (family, s) in out.iter_mut() {
            s.mean_balance = s.total_balance / s.agents as f64;
            if let Some((sum, n)) = received.get(family) {
                s.mean_rho_received = sum / *n as f64;
            }
        }
        out
    }

    pub fn round_history(&self, round: Option<u32>) -> Result<Vec<&'a RoundRecord>, ApiError> {
        match round {
            None => Ok(self.state.round_records.iter().collect()),
            Some(r) => self
                .state
                .round_records
                .iter()
                .find(|rec| rec.round == r)
                .map(|rec| vec![rec])
                .ok_or(ApiError::UnknownRound(r)),
        }
    }

    /// Most recent trades, newest last.
    pub fn transaction_log(&self, limit: Option<usize>, agent_id: Option<AgentId>) -> Vec<&'a TransactionRecord> {
        let matches: Vec<_> = self
            .state
            .transactions
            .iter()
            .filter(|t| agent_id.is_none_or(|id| t.poster == id || t.contractor == id))
            .collect();
        let limit = limit.unwrap_or(20);
        matches[matches.len().saturating_sub(limit)..].to_vec()
    }

    /// Answer a wire query as JSON.
    pub fn answer(&self, query: &Query) -> Result<Value, ApiError> {
        let to = |v: Result<Value, serde_json::Error>| v.expect("query results serialize");
        Ok(match query {
            Query::CheckBalance { agent_id } => to(serde_json::to_value(self.check_balance(*agent_id)?)),
            Query::EstimateCost { family, tokens_in, tokens_out } => {
                serde_json::json!({ "usd": self.estimate_cost(family, *tokens_in, *tokens_out)? })
            }
            Query::QueryReputation { agent_id } => to(serde_json::to_value(self.query_reputation(*agent_id)?)),
            Query::GetPrices => to(serde_json::to_value(self.get_prices())),
            Query::CalculateProfit { listing_id, price, tier, agent_id } => {
                to(serde_json::to_value(self.calculate_profit(*listing_id, *price, *tier, *agent_id)?))
            }
            Query::PreviewTask { listing_id } => to(serde_json::to_value(self.preview_task(*listing_id)?)),
            Query::Leaderboard => to(serde_json::to_value(self.leaderboard())),
            Query::MarketSummary => to(serde_json::to_value(self.market_summary())),
            Query::RoundHistory { round } => to(serde_json::to_value(self.round_history(*round)?)),
            Query::TransactionLog { limit, agent_id } => to(serde_json::to_value(self.transaction_log(*limit, *agent_id))),
        })
    }
}
