//! The round state machine.
//!
//! A market round runs post, bid, select, plan, execute, settle and
//! belief updates in that order, then evolution when the round index is a
//! multiple of the elimination period. Every decision gets its own RNG
//! substream keyed by `(round, phase, actor)`, and all state mutation
//! happens between decisions in ascending agent/listing order.

pub mod evolution;
pub mod listing;
pub mod log;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::api::MarketApi;
use crate::economy::{
    base_reward, contract_reward, contractor_profit, poster_profit, AgentId, AgentState, EconomyError,
    MarketConfig, OrphanSurge, PaymentStatus, SkillCluster, Usd,
};
use crate::execution::{cached_execution, sample_execution, CacheKey, Catalog, ExecutionCache, ExecutionPlan, ExecutionResult};
use crate::policy::{
    truncate_belief, with_retries, AgentPolicy, AutarkyObservation, BeliefObservation, BidObservation, BidView,
    ContractView, DecisionContext, ListingView, PaymentObservation, PlanObservation, PolicyError, RoundActivity,
    Selection, SelectionObservation, SelfView, Trader,
};
use crate::rng::{substream, Phase, SimRng};

pub use evolution::{evolution_step, EvolutionSkipped};
pub use listing::{surge_cooldown, surge_escalate, Bid, ContractListing, SurgePool, PLATFORM};
pub use log::{
    AgentLine, EvolutionRecord, Incident, LogEntry, LogHeader, MarketSnapshot, Mode, RoundRecord, RunLog,
    TransactionRecord,
};

/// Payment applied when the poster's payment decision fails.
pub const DEFAULT_PAYMENT: f64 = 0.75;

const WEALTH_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] EconomyError),
    #[error("round {round}: need at least 2 active agents, have {active}")]
    TooFewAgents { round: u32, active: usize },
    #[error("invariant violated in round {round} ({phase}): {detail}")]
    Invariant { round: u32, phase: &'static str, detail: String },
    #[error("run already finished after {0} rounds")]
    Finished(u32),
}

/// Hash of the configuration with the seed cleared, so runs that differ
/// only by seed share it.
pub fn config_hash(config: &MarketConfig) -> String {
    let mut c = config.clone();
    c.seed = 0;
    let json = serde_json::to_string(&c).expect("config serializes");
    hex::encode(&Sha256::digest(json.as_bytes())[..8])
}

/// Everything the engine tracks between rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub mode: Mode,
    pub round: u32,
    pub agents: Vec<AgentState>,
    pub surge_pool: SurgePool,
    /// Carried surge premium per task lineage, always > 1 when present.
    pub surge_levels: BTreeMap<String, f64>,
    pub open_listings: Vec<ContractListing>,
    pub transactions: Vec<TransactionRecord>,
    pub round_records: Vec<RoundRecord>,
    pub evolution: Vec<EvolutionRecord>,
    pub platform_balance: Usd,
    pub next_listing_id: u64,
}

impl MarketState {
    pub fn agent(&self, id: AgentId) -> Option<&AgentState> {
        let idx = (id.0 as usize).checked_sub(1)?;
        self.agents.get(idx).filter(|a| a.agent_id == id)
    }

    fn agent_mut(&mut self, id: AgentId) -> Option<&mut AgentState> {
        let idx = (id.0 as usize).checked_sub(1)?;
        self.agents.get_mut(idx).filter(|a| a.agent_id == id)
    }

    pub fn open_listing(&self, listing_id: u64) -> Option<&ContractListing> {
        self.open_listings
            .iter()
            .chain(self.surge_pool.entries.iter())
            .find(|l| l.listing_id == listing_id)
    }

    pub fn active_ids(&self) -> Vec<AgentId> {
        self.agents.iter().filter(|a| a.active).map(|a| a.agent_id).collect()
    }

    /// Agent balances plus the platform sink.
    pub fn total_wealth(&self) -> Usd {
        self.agents.iter().map(|a| a.wealth).sum::<Usd>() + self.platform_balance
    }
}

/// Build the initial population. Families cycle fastest, then skills, so
/// 25 agents cover every family/skill pair once.
pub fn initial_population(config: &MarketConfig) -> Vec<AgentState> {
    let nf = config.families.len();
    (0..config.n_agents)
        .map(|i| {
            let family = match &config.monoculture {
                Some(name) => config.family(name).expect("validated monoculture").clone(),
                None => config.families[i % nf].clone(),
            };
            let skill = SkillCluster::ALL[(i / nf) % SkillCluster::ALL.len()];
            AgentState::new(AgentId(i as u32 + 1), family, skill, config.w0)
        })
        .collect()
}

/// Emit this round's listings: surge entries first, then `kappa` fresh
/// tasks for every active agent in id order. Fresh tasks are dealt from a
/// per-round shuffle of the catalog and reshuffled when it runs out.
pub fn post_tasks(
    state: &mut MarketState,
    catalog: &Catalog,
    config: &MarketConfig,
    round: u32,
    rng: &mut SimRng,
) -> Result<Vec<ContractListing>, EngineError> {
    let active = state.active_ids();
    if active.len() < 2 {
        return Err(EngineError::TooFewAgents { round, active: active.len() });
    }
    let visible_family = |state: &MarketState, poster: AgentId| -> Option<String> {
        if !config.transparency {
            return None;
        }
        state.agent(poster).map(|a| a.family.family.clone())
    };

    let mut listings = Vec::new();
    let mut stranded = Vec::new();
    for mut entry in state.surge_pool.drain() {
        let poster_active = entry.poster == PLATFORM || state.agent(entry.poster).is_some_and(|a| a.active);
        if !poster_active {
            match (state.mode, config.orphan_surge) {
                (Mode::Autarky, _) => {
                    // nobody else may execute an autarky task
                    stranded.push(entry);
                    continue;
                }
                (Mode::Market, OrphanSurge::Platform) => entry.poster = PLATFORM,
                (Mode::Market, OrphanSurge::KeepPoster) => {}
            }
        }
        entry.poster_avg_rho = state.agent(entry.poster).map_or(0.0, |a| a.poster_avg_rho());
        entry.poster_family_visible = visible_family(state, entry.poster);
        listings.push(entry);
    }
    state.surge_pool.entries = stranded;

    let tasks = catalog.tasks();
    let mut deck: Vec<usize> = Vec::new();
    for poster in active {
        for _ in 0..config.kappa {
            if deck.is_empty() {
                deck = (0..tasks.len()).collect();
                deck.shuffle(rng);
                deck.reverse();
            }
            let task = &tasks[deck.pop().expect("refilled deck")];
            let base = contract_reward(base_reward(task, config.f)?, config.mu);
            let level = state.surge_levels.get(&task.task_id).copied().unwrap_or(1.0);
            let reward = base * level;
            let listing_id = state.next_listing_id;
            state.next_listing_id += 1;
            let poster_state = state.agent(poster).expect("active agent exists");
            listings.push(ContractListing {
                listing_id,
                task: task.clone(),
                poster,
                base_reward: base,
                original_reward: reward,
                current_reward: reward,
                surge_depth: 0,
                poster_avg_rho: poster_state.poster_avg_rho(),
                poster_family_visible: visible_family(state, poster),
                round_posted: round,
            });
        }
    }
    Ok(listings)
}

#[derive(Debug, Clone, PartialEq)]
pub enum AuctionOutcome {
    Winner(Bid),
    RejectedAll,
}

/// Hand the sealed bid set to the poster's policy. An empty set is
/// rejected without consulting the policy; a winner outside the bid set
/// counts as a failed attempt and is retried.
pub fn run_auction(
    listing: &ContractListing,
    bids: &[Bid],
    poster: &mut dyn AgentPolicy,
    poster_view: &SelfView,
    round: u32,
    retries: u32,
    ctx: &mut DecisionContext<'_>,
) -> Result<AuctionOutcome, PolicyError> {
    if bids.is_empty() {
        return Ok(AuctionOutcome::RejectedAll);
    }
    let obs = SelectionObservation {
        round,
        self_view: poster_view.clone(),
        listing: ListingView::from(listing),
        bids: bids.iter().map(BidView::from).collect(),
    };
    let choice = with_retries(retries, || match poster.decide_selection(&obs, ctx)? {
        Selection::RejectAll => Ok(None),
        Selection::Winner(id) => bids
            .iter()
            .find(|b| b.bidder == id)
            .map(|b| Some(b.clone()))
            .ok_or_else(|| PolicyError::Protocol(format!("winner {id} did not bid on listing {}", listing.listing_id))),
    })?;
    Ok(choice.map_or(AuctionOutcome::RejectedAll, AuctionOutcome::Winner))
}

/// An awarded listing with the decision costs attributed to it so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Contract {
    pub listing: ContractListing,
    pub bid: Bid,
    pub poster_backbone: Usd,
    pub contractor_backbone: Usd,
}

/// Settle one market contract: clamp the proposed ratio, book both
/// profits, and append the ratio to the poster-side history of the poster
/// and the contractor-side history of the contractor.
pub fn settle(
    state: &mut MarketState,
    config: &MarketConfig,
    contract: &Contract,
    plan: &ExecutionPlan,
    exec: &ExecutionResult,
    proposed_rho: f64,
    round: u32,
) -> Result<TransactionRecord, EngineError> {
    let rule = config.payment_rule();
    let rho = rule.clamp(proposed_rho);
    let status = rule.classify(rho).map_err(|e| EngineError::Invariant {
        round,
        phase: "settle",
        detail: e.to_string(),
    })?;
    let listing = &contract.listing;
    let reward = listing.current_reward;
    let price = contract.bid.price;
    let p_profit = poster_profit(reward, rho, price, contract.poster_backbone);
    let c_profit = contractor_profit(rho, price, config.mu, exec.exec_cost, contract.contractor_backbone);

    let contractor = state.agent(contract.bid.bidder).expect("bidder exists");
    let contractor_family = contractor.family.family.clone();
    let contractor_skill = contractor.skill;
    let (poster_family, poster_skill) = match state.agent(listing.poster) {
        Some(p) => (p.family.family.clone(), Some(p.skill)),
        None => ("platform".to_string(), None),
    };

    if listing.poster == PLATFORM {
        state.platform_balance += p_profit;
    } else {
        let poster = state.agent_mut(listing.poster).expect("poster exists");
        poster.credit(p_profit);
        poster.backbone_spent += contract.poster_backbone;
        poster.payment_history_as_poster.push(rho);
    }
    let contractor = state.agent_mut(contract.bid.bidder).expect("bidder exists");
    contractor.credit(c_profit);
    contractor.backbone_spent += contract.contractor_backbone;
    contractor.execution_spent += config.mu * exec.exec_cost;
    contractor.payment_history_as_contractor.push(rho);

    Ok(TransactionRecord {
        round,
        listing_id: listing.listing_id,
        poster: listing.poster,
        contractor: contract.bid.bidder,
        task_id: listing.task.task_id.clone(),
        domain: listing.task.domain,
        mode: Mode::Market,
        reward,
        bid_price: price,
        rho,
        status,
        quality: exec.quality,
        exec_cost: exec.exec_cost,
        mu: config.mu,
        tier: plan.tier,
        surge_depth: listing.surge_depth,
        poster_backbone: contract.poster_backbone,
        contractor_backbone: contract.contractor_backbone,
        poster_profit: p_profit,
        contractor_profit: c_profit,
        skill_matched: contractor_skill == listing.task.domain && !plan.skills.is_empty(),
        cross_family: poster_family != contractor_family,
        poster_family,
        contractor_family,
        poster_skill,
        contractor_skill,
    })
}

/// Settle an own-task execution with no market: the ratio is the quality
/// score itself and no reputation is recorded.
pub fn settle_autarky(
    state: &mut MarketState,
    config: &MarketConfig,
    listing: &ContractListing,
    plan: &ExecutionPlan,
    exec: &ExecutionResult,
    backbone: Usd,
    round: u32,
) -> TransactionRecord {
    let rho = exec.quality;
    let reward = listing.current_reward;
    let profit = contractor_profit(rho, reward, config.mu, exec.exec_cost, backbone);
    let agent = state.agent_mut(listing.poster).expect("poster exists");
    agent.credit(profit);
    agent.backbone_spent += backbone;
    agent.execution_spent += config.mu * exec.exec_cost;
    let (family, skill) = (agent.family.family.clone(), agent.skill);
    TransactionRecord {
        round,
        listing_id: listing.listing_id,
        poster: listing.poster,
        contractor: listing.poster,
        task_id: listing.task.task_id.clone(),
        domain: listing.task.domain,
        mode: Mode::Autarky,
        reward,
        bid_price: reward,
        rho,
        status: config.payment_rule().status_of(rho),
        quality: exec.quality,
        exec_cost: exec.exec_cost,
        mu: config.mu,
        tier: plan.tier,
        surge_depth: listing.surge_depth,
        poster_backbone: 0.0,
        contractor_backbone: backbone,
        poster_profit: 0.0,
        contractor_profit: profit,
        skill_matched: skill == listing.task.domain && !plan.skills.is_empty(),
        cross_family: false,
        poster_family: family.clone(),
        contractor_family: family,
        poster_skill: Some(skill),
        contractor_skill: skill,
    }
}

/// Result of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round: u32,
    pub listings: Vec<ContractListing>,
    pub records: Vec<TransactionRecord>,
    pub evolution: Option<EvolutionRecord>,
}

#[derive(Default)]
struct RoundBook {
    overhead: Usd,
    incidents: Vec<Incident>,
}

fn actor_key(agent: AgentId, listing_id: u64) -> u64 {
    (u64::from(agent.0) << 40) ^ listing_id
}

/// A running market: state, per-agent policies, execution cache and the
/// log entries produced since the last [`Market::take_log`].
pub struct Market {
    config: MarketConfig,
    config_hash: String,
    catalog: Catalog,
    state: MarketState,
    policies: BTreeMap<AgentId, Box<dyn AgentPolicy>>,
    platform: Trader,
    cache: ExecutionCache,
    pending: Vec<LogEntry>,
}

impl Market {
    pub fn new(
        config: MarketConfig,
        catalog: Catalog,
        mode: Mode,
        mut assign: impl FnMut(&AgentState) -> Box<dyn AgentPolicy>,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        let agents = initial_population(&config);
        let policies = agents.iter().map(|a| (a.agent_id, assign(a))).collect();
        let config_hash = config_hash(&config);
        let header = LogEntry::Header(LogHeader {
            format: log::LOG_FORMAT,
            mode,
            seed: config.seed,
            rounds: config.rounds,
            n_agents: config.n_agents,
            config_hash: config_hash.clone(),
        });
        Ok(Self {
            state: MarketState {
                mode,
                round: 0,
                agents,
                surge_pool: SurgePool::default(),
                surge_levels: BTreeMap::new(),
                open_listings: Vec::new(),
                transactions: Vec::new(),
                round_records: Vec::new(),
                evolution: Vec::new(),
                platform_balance: 0.0,
                next_listing_id: 1,
            },
            platform: Trader::baseline(),
            config_hash,
            config,
            catalog,
            policies,
            cache: ExecutionCache::new(),
            pending: vec![header],
        })
    }

    pub fn with_cache(mut self, cache: ExecutionCache) -> Self {
        self.cache = cache;
        self
    }

    pub fn cache(&self) -> &ExecutionCache {
        &self.cache
    }

    pub fn cache_mut(&mut self) -> &mut ExecutionCache {
        &mut self.cache
    }

    pub fn state(&self) -> &MarketState {
        &self.state
    }

    pub fn config(&self) -> &MarketConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn api(&self) -> MarketApi<'_> {
        MarketApi::new(&self.state, &self.config, &self.catalog)
    }

    pub fn is_finished(&self) -> bool {
        self.state.round >= self.config.rounds
    }

    /// Drain log entries produced since the last call.
    pub fn take_log(&mut self) -> Vec<LogEntry> {
        std::mem::take(&mut self.pending)
    }

    pub fn snapshot(&self) -> MarketSnapshot {
        let round = self.state.round;
        MarketSnapshot {
            round,
            mode: self.state.mode,
            config_hash: self.config_hash.clone(),
            platform_balance: self.state.platform_balance,
            agents: self.state.agents.clone(),
            surge_pool: self.state.surge_pool.entries.clone(),
            recent_transactions: self.state.transactions.iter().filter(|t| t.round == round).cloned().collect(),
        }
    }

    pub fn run_round(&mut self) -> Result<RoundOutcome, EngineError> {
        if self.is_finished() {
            return Err(EngineError::Finished(self.state.round));
        }
        match self.state.mode {
            Mode::Market => self.market_round(),
            Mode::Autarky => self.autarky_round(),
        }
    }

    /// Run every remaining round.
    pub fn run(&mut self) -> Result<Vec<RoundOutcome>, EngineError> {
        let mut out = Vec::new();
        while !self.is_finished() {
            out.push(self.run_round()?);
        }
        Ok(out)
    }

    fn with_policy<T>(
        &mut self,
        agent: AgentId,
        phase: Phase,
        key: u64,
        call: impl FnOnce(&mut dyn AgentPolicy, &mut DecisionContext<'_>) -> T,
    ) -> T {
        let mut rng = substream(self.config.seed, self.state.round, phase, key);
        let market = MarketApi::new(&self.state, &self.config, &self.catalog);
        let policy: &mut dyn AgentPolicy = if agent == PLATFORM {
            &mut self.platform
        } else {
            self.policies.get_mut(&agent).expect("every agent has a policy").as_mut()
        };
        let mut ctx = DecisionContext { rng: &mut rng, market };
        call(policy, &mut ctx)
    }

    fn observes_quality(&self, agent: AgentId) -> bool {
        if agent == PLATFORM {
            return self.platform.observes_quality();
        }
        self.policies.get(&agent).is_some_and(|p| p.observes_quality())
    }

    fn decision_cost(&self, agent: AgentId) -> Usd {
        self.state.agent(agent).map_or(0.0, |a| self.config.decision_cost(&a.family))
    }

    fn charge_overhead(&mut self, agent: AgentId, book: &mut RoundBook) {
        let cost = self.decision_cost(agent);
        if let Some(a) = self.state.agent_mut(agent) {
            a.credit(-cost);
            a.backbone_spent += cost;
            book.overhead += cost;
        }
    }

    fn self_view(&self, agent: AgentId) -> SelfView {
        match self.state.agent(agent) {
            Some(a) => SelfView::of(a, &self.config.payment_rule()),
            None => SelfView {
                agent_id: PLATFORM,
                family: "platform".into(),
                skill: SkillCluster::CodingEngineering,
                wealth: self.state.platform_balance,
                backbone_spent: 0.0,
                execution_spent: 0.0,
                profit: self.state.platform_balance,
                poster_avg_rho: 0.0,
                contractor_avg_rho: 0.0,
                poster_dispute_rate: 0.0,
                contractor_dispute_rate: 0.0,
                belief: String::new(),
                generation: 0,
            },
        }
    }

    fn incident(&self, book: &mut RoundBook, agent: Option<AgentId>, phase: &str, detail: String) {
        ::log::warn!("round {} {phase} {agent:?}: {detail}", self.state.round);
        book.incidents.push(Incident { round: self.state.round, agent, phase: phase.to_string(), detail });
    }

    fn execute(&mut self, listing: &ContractListing, plan: &ExecutionPlan, skill_match: bool) -> ExecutionResult {
        let mut rng = substream(self.config.seed, self.state.round, Phase::Execute, listing.listing_id);
        let params = &self.config.execution;
        let task = &listing.task;
        if self.config.use_cache {
            let key = CacheKey { task_id: task.task_id.clone(), tier: plan.tier, skill_match };
            cached_execution(&mut self.cache, &key, |r| sample_execution(task, plan, skill_match, params, r), &mut rng)
        } else {
            sample_execution(task, plan, skill_match, params, &mut rng)
        }
    }

    fn note_match(&mut self, listing: &ContractListing) {
        if listing.current_reward > listing.base_reward * (1.0 + 1e-12) {
            let cooled = surge_cooldown(listing.clone(), self.config.surge_cooldown);
            let level = cooled.current_reward / cooled.base_reward;
            if level > 1.0 + 1e-12 {
                self.state.surge_levels.insert(listing.task.task_id.clone(), level);
            } else {
                self.state.surge_levels.remove(&listing.task.task_id);
            }
        }
    }

    fn fail_listing(&mut self, listing: ContractListing) {
        self.state.surge_pool.push(surge_escalate(listing, self.config.alpha));
    }

    fn market_round(&mut self) -> Result<RoundOutcome, EngineError> {
        let round = self.state.round + 1;
        self.state.round = round;
        let retries = self.config.policy_retries;
        let rule = self.config.payment_rule();
        let wealth_before = self.state.total_wealth();
        let mut book = RoundBook::default();

        let mut post_rng = substream(self.config.seed, round, Phase::Post, 0);
        let listings = post_tasks(&mut self.state, &self.catalog, &self.config, round, &mut post_rng)?;
        self.state.open_listings = listings.clone();
        let active = self.state.active_ids();

        // Sealed bids: each bidder sees listings only, never another bid.
        let mut bids: BTreeMap<u64, Vec<Bid>> = BTreeMap::new();
        for &agent in &active {
            let obs = BidObservation {
                round,
                mu: self.config.mu,
                self_view: self.self_view(agent),
                listings: listings.iter().filter(|l| l.poster != agent).map(ListingView::from).collect(),
            };
            let decided = self.with_policy(agent, Phase::Bid, u64::from(agent.0), |p, ctx| {
                with_retries(retries, || p.decide_bids(&obs, ctx))
            });
            self.charge_overhead(agent, &mut book);
            let decided = match decided {
                Ok(d) => d,
                Err(e) => {
                    self.incident(&mut book, Some(agent), "bid", format!("{e}; no bids"));
                    continue;
                }
            };
            let visible: BTreeSet<u64> = obs.listings.iter().map(|l| l.listing_id).collect();
            let mut seen = BTreeSet::new();
            for d in decided {
                if !visible.contains(&d.listing_id) || !seen.insert(d.listing_id) || !(d.price >= 0.0 && d.price.is_finite()) {
                    self.incident(&mut book, Some(agent), "bid", format!("dropped invalid bid on listing {}", d.listing_id));
                    continue;
                }
                bids.entry(d.listing_id).or_default().push(Bid {
                    listing_id: d.listing_id,
                    bidder: agent,
                    price: d.price,
                    proposal: d.proposal,
                    bidder_dispute_rate: 0.0,
                    bidder_family_visible: None,
                });
            }
        }

        // Selection, in listing order.
        let mut contracts = Vec::new();
        let mut failed = Vec::new();
        let mut wins: BTreeMap<AgentId, usize> = BTreeMap::new();
        for listing in &listings {
            let mut set = bids.remove(&listing.listing_id).unwrap_or_default();
            if let Some(cap) = self.config.max_contracts_per_agent {
                set.retain(|b| wins.get(&b.bidder).copied().unwrap_or(0) < cap);
            }
            for b in &mut set {
                let bidder = self.state.agent(b.bidder).expect("bidder exists");
                b.bidder_dispute_rate = bidder.contractor_dispute_rate(&rule);
                if self.config.transparency {
                    b.bidder_family_visible = Some(bidder.family.family.clone());
                }
            }
            let poster = listing.poster;
            let poster_view = self.self_view(poster);
            let consulted = !set.is_empty();
            let outcome = self.with_policy(poster, Phase::Select, actor_key(poster, listing.listing_id), |p, ctx| {
                run_auction(listing, &set, p, &poster_view, round, retries, ctx)
            });
            let cost = if consulted { self.decision_cost(poster) } else { 0.0 };
            let outcome = outcome.unwrap_or_else(|e| {
                self.incident(&mut book, Some(poster), "select", format!("{e}; rejecting all bids"));
                AuctionOutcome::RejectedAll
            });
            match outcome {
                AuctionOutcome::Winner(bid) => {
                    *wins.entry(bid.bidder).or_default() += 1;
                    contracts.push(Contract {
                        listing: listing.clone(),
                        bid,
                        poster_backbone: cost,
                        contractor_backbone: 0.0,
                    });
                }
                AuctionOutcome::RejectedAll => {
                    if cost > 0.0 {
                        self.charge_overhead(poster, &mut book);
                    }
                    failed.push(listing.clone());
                }
            }
        }

        // Plan, execute, evaluate, settle.
        let mut records = Vec::with_capacity(contracts.len());
        for mut contract in contracts {
            let contractor = contract.bid.bidder;
            let poster = contract.listing.poster;
            let listing_id = contract.listing.listing_id;
            let contract_view = ContractView {
                listing: ListingView::from(&contract.listing),
                contractor,
                price: contract.bid.price,
            };
            let contractor_skill = self.state.agent(contractor).expect("contractor exists").skill;
            let plan_obs = PlanObservation {
                round,
                mu: self.config.mu,
                self_view: self.self_view(contractor),
                contract: contract_view.clone(),
                tiers: self.config.execution.tiers.clone(),
            };
            let plan = self.with_policy(contractor, Phase::Plan, actor_key(contractor, listing_id), |p, ctx| {
                with_retries(retries, || p.decide_plan(&plan_obs, ctx))
            });
            contract.contractor_backbone = self.decision_cost(contractor);
            let plan = match plan {
                Ok(plan) => plan.sanitized(contractor_skill),
                Err(e) => {
                    self.incident(&mut book, Some(contractor), "plan", format!("{e}; default plan"));
                    ExecutionPlan::default_for(contractor_skill, &contract.listing.task)
                }
            };
            let skill_match = contractor_skill == contract.listing.task.domain && !plan.skills.is_empty();
            let exec = self.execute(&contract.listing, &plan, skill_match);

            let contractor_state = self.state.agent(contractor).expect("contractor exists");
            let pay_obs = PaymentObservation {
                round,
                self_view: self.self_view(poster),
                contract: contract_view,
                tier: plan.tier,
                skills: plan.skills.clone(),
                output_preview: exec.output_preview.clone(),
                exec_cost: exec.exec_cost,
                contractor_dispute_rate: contractor_state.contractor_dispute_rate(&rule),
                contractor_family: self.config.transparency.then(|| contractor_state.family.family.clone()),
                quality: self.observes_quality(poster).then_some(exec.quality),
            };
            let rho = self.with_policy(poster, Phase::Pay, actor_key(poster, listing_id), |p, ctx| {
                with_retries(retries, || p.decide_payment(&pay_obs, ctx))
            });
            contract.poster_backbone += self.decision_cost(poster);
            let rho = rho.unwrap_or_else(|e| {
                self.incident(&mut book, Some(poster), "pay", format!("{e}; paying {DEFAULT_PAYMENT}"));
                DEFAULT_PAYMENT
            });
            if poster == PLATFORM {
                contract.poster_backbone = 0.0;
            }
            let record = settle(&mut self.state, &self.config, &contract, &plan, &exec, rho, round)?;
            self.note_match(&contract.listing);
            records.push(record);
        }

        let failed_count = failed.len();
        for listing in failed {
            self.fail_listing(listing);
        }
        self.update_beliefs(round, &records, &listings, &mut book);
        self.check_round(round, &listings, &records, failed_count, wealth_before, book.overhead)?;
        self.finish_round(round, listings, records, book)
    }

    fn autarky_round(&mut self) -> Result<RoundOutcome, EngineError> {
        let round = self.state.round + 1;
        self.state.round = round;
        let retries = self.config.policy_retries;
        let wealth_before = self.state.total_wealth();
        let mut book = RoundBook::default();

        let mut post_rng = substream(self.config.seed, round, Phase::Post, 0);
        let listings = post_tasks(&mut self.state, &self.catalog, &self.config, round, &mut post_rng)?;
        self.state.open_listings = listings.clone();

        let mut records = Vec::new();
        let mut failed = Vec::new();
        for listing in &listings {
            let agent = listing.poster;
            let skill = self.state.agent(agent).expect("poster exists").skill;
            let obs = AutarkyObservation {
                round,
                mu: self.config.mu,
                self_view: self.self_view(agent),
                listing: ListingView::from(listing),
                tiers: self.config.execution.tiers.clone(),
            };
            let decision = self.with_policy(agent, Phase::Autarky, actor_key(agent, listing.listing_id), |p, ctx| {
                with_retries(retries, || p.decide_autarky(&obs, ctx))
            });
            let decision = decision.unwrap_or_else(|e| {
                self.incident(&mut book, Some(agent), "autarky", format!("{e}; declining"));
                None
            });
            match decision {
                Some(plan) => {
                    let plan = plan.sanitized(skill);
                    let skill_match = skill == listing.task.domain && !plan.skills.is_empty();
                    let exec = self.execute(listing, &plan, skill_match);
                    let cost = self.decision_cost(agent);
                    let record = settle_autarky(&mut self.state, &self.config, listing, &plan, &exec, cost, round);
                    self.note_match(listing);
                    records.push(record);
                }
                None => {
                    self.charge_overhead(agent, &mut book);
                    failed.push(listing.clone());
                }
            }
        }
        let failed_count = failed.len();
        for listing in failed {
            self.fail_listing(listing);
        }
        self.update_beliefs(round, &records, &listings, &mut book);
        self.check_round(round, &listings, &records, failed_count, wealth_before, book.overhead)?;
        self.finish_round(round, listings, records, book)
    }

    fn update_beliefs(
        &mut self,
        round: u32,
        records: &[TransactionRecord],
        listings: &[ContractListing],
        book: &mut RoundBook,
    ) {
        for agent in self.state.active_ids() {
            let mut activity = RoundActivity {
                listings_posted: listings.iter().filter(|l| l.poster == agent).count(),
                ..Default::default()
            };
            for r in records {
                if r.poster == agent {
                    activity.contracts_awarded += 1;
                    activity.profit += r.poster_profit;
                    activity.disputes_issued += usize::from(r.status == PaymentStatus::Dispute);
                }
                if r.contractor == agent {
                    activity.contracts_won += 1;
                    activity.profit += r.contractor_profit;
                    activity.disputes_received += usize::from(r.status == PaymentStatus::Dispute);
                }
            }
            let obs = BeliefObservation { round, self_view: self.self_view(agent), activity };
            let retries = self.config.policy_retries;
            let belief = self.with_policy(agent, Phase::Belief, u64::from(agent.0), |p, ctx| {
                with_retries(retries, || p.update_belief(&obs, ctx))
            });
            self.charge_overhead(agent, book);
            match belief {
                Ok(text) => self.state.agent_mut(agent).expect("active agent").belief = truncate_belief(text),
                Err(e) => self.incident(book, Some(agent), "belief", format!("{e}; belief unchanged")),
            }
        }
    }

    fn check_round(
        &self,
        round: u32,
        listings: &[ContractListing],
        records: &[TransactionRecord],
        failed: usize,
        wealth_before: Usd,
        overhead: Usd,
    ) -> Result<(), EngineError> {
        let violation = |phase: &'static str, detail: String| Err(EngineError::Invariant { round, phase, detail });
        let rule = self.config.payment_rule();
        for r in records {
            match r.mode {
                Mode::Market => {
                    if rule.classify(r.rho).ok() != Some(r.status) {
                        return violation("settle", format!("listing {} has rho {} with status {:?}", r.listing_id, r.rho, r.status));
                    }
                }
                Mode::Autarky => {
                    if r.rho != r.quality || rule.status_of(r.rho) != r.status {
                        return violation("settle", format!("autarky listing {} paid rho {} for quality {}", r.listing_id, r.rho, r.quality));
                    }
                }
            }
            let (pp, cp) = r.recomputed_profits();
            if (pp - r.poster_profit).abs() > 1e-9 || (cp - r.contractor_profit).abs() > 1e-9 {
                return violation("settle", format!("listing {} profits do not recompute", r.listing_id));
            }
        }
        if records.len() + failed != listings.len() {
            return violation(
                "post",
                format!("{} listings posted but {} settled and {} surged", listings.len(), records.len(), failed),
            );
        }
        let flows: Usd = records.iter().map(|r| r.earned() - r.scaled_exec_cost() - r.backbone()).sum::<Usd>() - overhead;
        let change = self.state.total_wealth() - wealth_before;
        if (change - flows).abs() > WEALTH_TOLERANCE {
            return violation("settle", format!("wealth changed by {change} but flows sum to {flows}"));
        }
        if self.state.mode == Mode::Autarky
            && self
                .state
                .agents
                .iter()
                .any(|a| !a.payment_history_as_poster.is_empty() || !a.payment_history_as_contractor.is_empty())
        {
            return violation("settle", "autarky run recorded reputation".into());
        }
        Ok(())
    }

    fn finish_round(
        &mut self,
        round: u32,
        listings: Vec<ContractListing>,
        records: Vec<TransactionRecord>,
        mut book: RoundBook,
    ) -> Result<RoundOutcome, EngineError> {
        let evolution = if self.config.is_evolution_round(round) {
            match evolution_step(&mut self.state.agents, &self.config, round) {
                Ok(rec) => {
                    if (rec.total_after - rec.total_before).abs() > 1e-9 {
                        return Err(EngineError::Invariant {
                            round,
                            phase: "evolution",
                            detail: format!("total wealth {} became {}", rec.total_before, rec.total_after),
                        });
                    }
                    for s in &rec.spawned {
                        let child = self.policies.get(&s.parent).expect("parent policy").offspring();
                        self.policies.insert(s.child, child);
                    }
                    self.state.evolution.push(rec.clone());
                    Some(rec)
                }
                Err(skip) => {
                    self.incident(
                        &mut book,
                        None,
                        "evolution",
                        format!("skipped: {} active agents, need {}", skip.active, skip.needed),
                    );
                    None
                }
            }
        } else {
            None
        };

        let rewards = records.iter().map(TransactionRecord::earned).sum();
        let exec_costs = records.iter().map(TransactionRecord::scaled_exec_cost).sum();
        let backbone_costs = records.iter().map(TransactionRecord::backbone).sum::<Usd>() + book.overhead;
        let summary = RoundRecord {
            round,
            listings_posted: listings.len(),
            surge_offered: listings.iter().filter(|l| l.is_surged()).count(),
            settled: records.len(),
            surge_pool_size: self.state.surge_pool.len(),
            overhead_backbone: book.overhead,
            rewards,
            exec_costs,
            backbone_costs,
            total_wealth: self.state.total_wealth(),
            platform_balance: self.state.platform_balance,
            agents: self.state.agents.iter().map(AgentLine::from).collect(),
        };

        self.pending.extend(records.iter().cloned().map(LogEntry::Transaction));
        self.pending.extend(book.incidents.into_iter().map(LogEntry::Incident));
        if let Some(rec) = &evolution {
            self.pending.push(LogEntry::Evolution(rec.clone()));
        }
        self.pending.push(LogEntry::Round(summary.clone()));
        self.state.transactions.extend(records.iter().cloned());
        self.state.round_records.push(summary);
        self.state.open_listings.clear();
        Ok(RoundOutcome { round, listings, records, evolution })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::execution::default_catalog;
    use crate::policy::builtin_policy;

    fn market(config: MarketConfig, mode: Mode) -> Market {
        let cfg = config.clone();
        Market::new(config, default_catalog(), mode, |_| builtin_policy("baseline", &cfg).unwrap()).unwrap()
    }

    #[test]
    fn population_covers_family_skill_grid() {
        let agents = initial_population(&MarketConfig::default());
        let pairs: BTreeSet<_> = agents.iter().map(|a| (a.family.family.clone(), a.skill)).collect();
        assert_eq!(pairs.len(), 25);
        let mono = initial_population(&MarketConfig { monoculture: Some("GLM".into()), ..Default::default() });
        assert!(mono.iter().all(|a| a.family.family == "GLM"));
        assert_eq!(mono.iter().map(|a| a.skill).collect::<BTreeSet<_>>().len(), 5);
    }

    #[test]
    fn posting_counts_and_drain_first() {
        let m = market(MarketConfig::default(), Mode::Market);
        let mut state = m.state.clone();
        let listings = post_tasks(&mut state, &m.catalog, &m.config, 1, &mut crate::rng::seeded(1)).unwrap();
        assert_eq!(listings.len(), 50);
        let ids: BTreeSet<_> = listings.iter().map(|l| l.task.task_id.clone()).collect();
        assert_eq!(ids.len(), 50, "tasks drawn without replacement");

        let cfg = MarketConfig { n_agents: 2, kappa: 1, ..Default::default() };
        let m = market(cfg, Mode::Market);
        let mut state = m.state.clone();
        assert_eq!(post_tasks(&mut state, &m.catalog, &m.config, 1, &mut crate::rng::seeded(1)).unwrap().len(), 2);
        for l in listings.iter().take(3) {
            state.surge_pool.push(surge_escalate(l.clone(), 0.15));
        }
        let next = post_tasks(&mut state, &m.catalog, &m.config, 2, &mut crate::rng::seeded(2)).unwrap();
        assert_eq!(next.len(), 5);
        assert!(next[..3].iter().all(|l| l.surge_depth == 1));
        assert!(next[3..].iter().all(|l| l.surge_depth == 0));
    }

    #[test]
    fn deck_reshuffles_when_exhausted() {
        let tasks: Vec<_> = default_catalog().tasks()[..3].to_vec();
        let catalog = Catalog::from_tasks(tasks).unwrap();
        let cfg = MarketConfig { n_agents: 4, kappa: 2, ..Default::default() };
        let c2 = cfg.clone();
        let m = Market::new(cfg, catalog, Mode::Market, |_| builtin_policy("baseline", &c2).unwrap()).unwrap();
        let mut state = m.state.clone();
        let listings = post_tasks(&mut state, &m.catalog, &m.config, 1, &mut crate::rng::seeded(1)).unwrap();
        assert_eq!(listings.len(), 8);
    }

    #[test]
    fn too_few_agents_is_an_error() {
        let m = market(MarketConfig::default(), Mode::Market);
        let mut state = m.state.clone();
        for a in state.agents.iter_mut().skip(1) {
            a.active = false;
        }
        assert!(matches!(
            post_tasks(&mut state, &m.catalog, &m.config, 1, &mut crate::rng::seeded(1)),
            Err(EngineError::TooFewAgents { active: 1, .. })
        ));
    }

    #[test]
    fn evolution_follows_period() {
        let mut m = market(MarketConfig::default(), Mode::Market);
        let outcomes = m.run().unwrap();
        let rounds: Vec<u32> = outcomes.iter().filter(|o| o.evolution.is_some()).map(|o| o.round).collect();
        assert_eq!(rounds, vec![6, 12, 18, 24]);
        assert_eq!(m.state.agents.len(), 29);
        assert_eq!(m.state.active_ids().len(), 25);
    }

    #[test]
    fn config_hash_ignores_seed() {
        let a = MarketConfig { seed: 1, ..Default::default() };
        let b = MarketConfig { seed: 2, ..Default::default() };
        let c = MarketConfig { mu: 5.0, ..Default::default() };
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_ne!(config_hash(&a), config_hash(&c));
    }
}
