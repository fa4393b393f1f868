//! Decision interface for market participants.
//!
//! The engine builds an observation per decision, hands it to the agent's
//! policy and enforces every invariant on what comes back. Observations
//! are plain data so they serialize directly onto the agent wire protocol.

mod builtin;
pub mod external;
mod oracle;

pub use builtin::{
    builtin_policy, cost_plus_price, expected_payment_ratio, BidStrategy, CostPlusBidder, PaymentStrategy,
    RandomPolicy, SelectionStrategy, Trader, BUILTIN_POLICIES,
};
pub use external::{ExternalPolicy, ReferenceBehaviour};
pub use oracle::{OraclePoster, QualityBin, ORACLE_BINS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::api::MarketApi;
use crate::economy::{AgentId, AgentState, Disposition, PaymentRule, SkillCluster, TaskSpec, Usd};
use crate::execution::{ExecutionPlan, Tier, TierParams};
use crate::market::listing::{Bid, ContractListing};
use crate::rng::SimRng;

/// Longest belief text kept on an agent.
pub const BELIEF_MAX_CHARS: usize = 4096;

/// What an agent sees about itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfView {
    pub agent_id: AgentId,
    pub family: String,
    pub skill: SkillCluster,
    pub wealth: Usd,
    pub backbone_spent: Usd,
    pub execution_spent: Usd,
    pub profit: Usd,
    pub poster_avg_rho: f64,
    pub contractor_avg_rho: f64,
    pub poster_dispute_rate: f64,
    pub contractor_dispute_rate: f64,
    pub belief: String,
    pub generation: u32,
}

impl SelfView {
    pub fn of(agent: &AgentState, rule: &PaymentRule) -> Self {
        Self {
            agent_id: agent.agent_id,
            family: agent.family.family.clone(),
            skill: agent.skill,
            wealth: agent.wealth,
            backbone_spent: agent.backbone_spent,
            execution_spent: agent.execution_spent,
            profit: agent.profit,
            poster_avg_rho: agent.poster_avg_rho(),
            contractor_avg_rho: agent.contractor_avg_rho(),
            poster_dispute_rate: agent.poster_dispute_rate(rule),
            contractor_dispute_rate: agent.contractor_dispute_rate(rule),
            belief: agent.belief.clone(),
            generation: agent.generation,
        }
    }
}

/// Public face of a listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListingView {
    pub listing_id: u64,
    pub task: TaskSpec,
    pub description: String,
    pub reward: Usd,
    pub surge_depth: u32,
    pub poster: AgentId,
    pub poster_avg_rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poster_family: Option<String>,
}

impl From<&ContractListing> for ListingView {
    fn from(l: &ContractListing) -> Self {
        Self {
            listing_id: l.listing_id,
            task: l.task.clone(),
            description: format!(
                "{} task {} from {} (pass rate {:.2})",
                l.task.domain, l.task.task_id, l.task.source, l.task.pass_rate
            ),
            reward: l.current_reward,
            surge_depth: l.surge_depth,
            poster: l.poster,
            poster_avg_rho: l.poster_avg_rho,
            poster_family: l.poster_family_visible.clone(),
        }
    }
}

/// Browse-and-bid view. Holds no bids by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidObservation {
    pub round: u32,
    pub mu: f64,
    pub self_view: SelfView,
    pub listings: Vec<ListingView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidView {
    pub bidder: AgentId,
    pub price: Usd,
    pub proposal: String,
    pub bidder_dispute_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bidder_family: Option<String>,
}

impl From<&Bid> for BidView {
    fn from(b: &Bid) -> Self {
        Self {
            bidder: b.bidder,
            price: b.price,
            proposal: b.proposal.clone(),
            bidder_dispute_rate: b.bidder_dispute_rate,
            bidder_family: b.bidder_family_visible.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionObservation {
    pub round: u32,
    pub self_view: SelfView,
    pub listing: ListingView,
    pub bids: Vec<BidView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractView {
    pub listing: ListingView,
    pub contractor: AgentId,
    pub price: Usd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanObservation {
    pub round: u32,
    pub mu: f64,
    pub self_view: SelfView,
    pub contract: ContractView,
    pub tiers: Vec<TierParams>,
}

/// Settlement view. `quality` is filled only for policies that declare
/// they observe the ground-truth score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaymentObservation {
    pub round: u32,
    pub self_view: SelfView,
    pub contract: ContractView,
    pub tier: Tier,
    pub skills: Vec<String>,
    pub output_preview: String,
    pub exec_cost: Usd,
    pub contractor_dispute_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contractor_family: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundActivity {
    pub listings_posted: usize,
    pub contracts_awarded: usize,
    pub contracts_won: usize,
    pub disputes_issued: usize,
    pub disputes_received: usize,
    pub profit: Usd,
}

impl RoundActivity {
    pub fn is_idle(&self) -> bool {
        self.contracts_awarded == 0 && self.contracts_won == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefObservation {
    pub round: u32,
    pub self_view: SelfView,
    pub activity: RoundActivity,
}

/// Accept-or-decline view for the no-market baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutarkyObservation {
    pub round: u32,
    pub mu: f64,
    pub self_view: SelfView,
    pub listing: ListingView,
    pub tiers: Vec<TierParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidDecision {
    pub listing_id: u64,
    pub price: Usd,
    #[serde(default)]
    pub proposal: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Winner(AgentId),
    RejectAll,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("policy timed out")]
    Timeout,
    #[error("agent disconnected")]
    Disconnected,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("policy failed: {0}")]
    Failed(String),
}

/// Per-decision context: the caller's RNG substream and a read-only
/// handle on the market query surface.
pub struct DecisionContext<'a> {
    pub rng: &'a mut SimRng,
    pub market: MarketApi<'a>,
}

/// A market participant's strategy.
pub trait AgentPolicy: Send {
    fn name(&self) -> &str;

    /// Whether payment observations should carry the true quality score.
    fn observes_quality(&self) -> bool {
        false
    }

    fn decide_bids(&mut self, obs: &BidObservation, ctx: &mut DecisionContext<'_>)
        -> Result<Vec<BidDecision>, PolicyError>;

    fn decide_selection(
        &mut self,
        obs: &SelectionObservation,
        ctx: &mut DecisionContext<'_>,
    ) -> Result<Selection, PolicyError>;

    fn decide_plan(&mut self, obs: &PlanObservation, ctx: &mut DecisionContext<'_>)
        -> Result<ExecutionPlan, PolicyError>;

    /// Proposed payment ratio; the engine clamps it into `[rho_min, 1]`.
    fn decide_payment(&mut self, obs: &PaymentObservation, ctx: &mut DecisionContext<'_>)
        -> Result<f64, PolicyError>;

    fn update_belief(&mut self, obs: &BeliefObservation, ctx: &mut DecisionContext<'_>)
        -> Result<String, PolicyError>;

    /// Accept an own task with a plan, or decline it (`None`).
    fn decide_autarky(
        &mut self,
        obs: &AutarkyObservation,
        ctx: &mut DecisionContext<'_>,
    ) -> Result<Option<ExecutionPlan>, PolicyError>;

    /// Policy for a child spawned by evolution.
    fn offspring(&self) -> Box<dyn AgentPolicy>;
}

/// Knobs that give each disposition a mechanical meaning for rule-based agents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispositionParams {
    pub mode: Disposition,
    /// Added to every decided payment ratio before clamping.
    pub generosity_shift: f64,
    pub bid_margin: f64,
    /// Preference for same-family bidders when families are visible.
    pub insularity: f64,
}

impl DispositionParams {
    pub fn for_mode(mode: Disposition) -> Self {
        let (generosity_shift, insularity) = match mode {
            Disposition::Neutral | Disposition::Honest => (0.0, 0.0),
            Disposition::Adversarial => (-0.1, 0.8),
            Disposition::Collaborative => (0.1, 0.0),
        };
        Self { mode, generosity_shift, bid_margin: 1.5, insularity }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(-0.3..=0.3).contains(&self.generosity_shift) {
            return Err(format!("generosity_shift {} outside [-0.3, 0.3]", self.generosity_shift));
        }
        if !(self.bid_margin > 0.0) {
            return Err("bid_margin must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.insularity) {
            return Err(format!("insularity {} outside [0, 1]", self.insularity));
        }
        Ok(())
    }
}

impl Default for DispositionParams {
    fn default() -> Self {
        Self::for_mode(Disposition::Neutral)
    }
}

/// Cut a belief down to [`BELIEF_MAX_CHARS`] characters.
pub fn truncate_belief(mut text: String) -> String {
    if let Some((idx, _)) = text.char_indices().nth(BELIEF_MAX_CHARS) {
        text.truncate(idx);
    }
    text
}

/// Run `call` up to `1 + retries` times, returning the first success or
/// the last error.
pub fn with_retries<T>(
    retries: u32,
    mut call: impl FnMut() -> Result<T, PolicyError>,
) -> Result<T, PolicyError> {
    let mut last = PolicyError::Failed("no attempt made".into());
    for _ in 0..=retries {
        match call() {
            Ok(v) => return Ok(v),
            Err(PolicyError::Disconnected) => return Err(PolicyError::Disconnected),
            Err(e) => last = e,
        }
    }
    Err(last)
}
