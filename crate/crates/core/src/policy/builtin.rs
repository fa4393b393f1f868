//! Rule-based and stochastic policies.

use rand::Rng;

use super::oracle::OraclePoster;
use super::{
    AgentPolicy, AutarkyObservation, BeliefObservation, BidDecision, BidObservation, DecisionContext,
    DispositionParams, ListingView, PaymentObservation, PlanObservation, PolicyError, Selection,
    SelectionObservation,
};
use crate::economy::{Disposition, MarketConfig, SkillCluster, TaskSpec, Usd};
use crate::execution::{ExecutionParams, ExecutionPlan, Tier};

/// Names accepted by [`builtin_policy`].
pub const BUILTIN_POLICIES: [&str; 5] = ["baseline", "lowest-price", "accept-any", "random", "silent"];

/// Payment used when no better information is available.
const DEFAULT_RHO: f64 = 0.75;

/// Expected payment ratio under the oracle table for one run.
pub fn expected_payment_ratio(params: &ExecutionParams, task: &TaskSpec, tier: Tier, skill_match: bool) -> f64 {
    let oracle = OraclePoster::default();
    let pass = params.pass_probability(task, tier, skill_match);
    let fail = params.partial_zero_prob * oracle.bins[0].0 + (1.0 - params.partial_zero_prob) * oracle.bins[1].0;
    pass * oracle.bins[3].0 + (1.0 - pass) * fail
}

/// Cost-plus price, never above the listing reward.
pub fn cost_plus_price(estimated_cost: Usd, margin: f64, reward: Usd) -> Usd {
    (estimated_cost * margin).min(reward).max(0.0)
}

/// Bids a markup over its risk-adjusted execution cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostPlusBidder {
    pub margin: f64,
    /// Half-width of the uniform multiplicative noise on the margin.
    pub jitter: f64,
}

impl Default for CostPlusBidder {
    fn default() -> Self {
        Self { margin: 1.5, jitter: 0.1 }
    }
}

impl CostPlusBidder {
    /// Cheapest tier and its cost, where exec cost is divided by the
    /// payment ratio the bidder expects to receive.
    pub fn estimate(
        &self,
        listing: &ListingView,
        skill: SkillCluster,
        params: &ExecutionParams,
        mu: f64,
    ) -> (Tier, Usd) {
        let matched = skill == listing.task.domain;
        Tier::ALL
            .iter()
            .map(|&tier| {
                let mut rho = expected_payment_ratio(params, &listing.task, tier, matched);
                if listing.poster_avg_rho > 0.0 {
                    rho = 0.5 * (rho + listing.poster_avg_rho);
                }
                (tier, mu * params.expected_cost(&listing.task, tier) / rho)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("three tiers")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BidStrategy {
    CostPlus(CostPlusBidder),
    Never,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectionStrategy {
    LowestPrice,
    /// Minimise `price + lambda * dispute_rate * reward`.
    ReputationScreening { lambda: f64 },
    AcceptAny,
}

impl SelectionStrategy {
    pub fn choose(&self, obs: &SelectionObservation, insularity: f64) -> Selection {
        let reward = obs.listing.reward;
        let own_family = &obs.self_view.family;
        let score = |b: &super::BidView| -> f64 {
            let mut s = match self {
                SelectionStrategy::LowestPrice | SelectionStrategy::AcceptAny => b.price,
                SelectionStrategy::ReputationScreening { lambda } => b.price + lambda * b.bidder_dispute_rate * reward,
            };
            if b.bidder_family.as_ref() == Some(own_family) {
                s -= insularity * 0.1 * reward;
            }
            s
        };
        let affordable = obs.bids.iter().filter(|b| b.price <= reward);
        let best = match self {
            SelectionStrategy::AcceptAny => affordable.min_by_key(|b| b.bidder),
            _ => affordable.min_by(|a, b| score(a).total_cmp(&score(b)).then(a.bidder.cmp(&b.bidder))),
        };
        best.map_or(Selection::RejectAll, |b| Selection::Winner(b.bidder))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PaymentStrategy {
    Oracle(OraclePoster),
    Fixed(f64),
}

/// Composite rule-based trader: bidder, selector, planner and payer.
#[derive(Debug, Clone)]
pub struct Trader {
    pub label: String,
    pub bidder: BidStrategy,
    pub selector: SelectionStrategy,
    pub payer: PaymentStrategy,
    pub disposition: DispositionParams,
}

impl Trader {
    pub fn new(label: &str, bidder: BidStrategy, selector: SelectionStrategy, payer: PaymentStrategy) -> Self {
        Self {
            label: label.to_string(),
            bidder,
            selector,
            payer,
            disposition: DispositionParams::default(),
        }
    }

    pub fn baseline() -> Self {
        Self::new(
            "baseline",
            BidStrategy::CostPlus(CostPlusBidder::default()),
            SelectionStrategy::ReputationScreening { lambda: 1.0 },
            PaymentStrategy::Oracle(OraclePoster::default()),
        )
    }

    pub fn with_disposition(mut self, disposition: DispositionParams) -> Self {
        if let BidStrategy::CostPlus(b) = &mut self.bidder {
            b.margin = disposition.bid_margin;
        }
        self.disposition = disposition;
        self
    }

    fn skills_for(skill: SkillCluster, task: &TaskSpec) -> Vec<String> {
        if skill == task.domain {
            skill.packages()
        } else {
            Vec::new()
        }
    }

    /// Tier maximising expected profit among tiers whose expected cost the
    /// price covers; low tier when none is affordable.
    pub fn plan_tier(&self, task: &TaskSpec, skill: SkillCluster, price: Usd, mu: f64, params: &ExecutionParams) -> Tier {
        if self.disposition.mode == Disposition::Collaborative {
            return Tier::Low;
        }
        let matched = skill == task.domain;
        Tier::ALL
            .iter()
            .filter(|&&t| mu * params.expected_cost(task, t) <= price)
            .map(|&t| {
                let profit = expected_payment_ratio(params, task, t, matched) * price - mu * params.expected_cost(task, t);
                (t, profit)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map_or(Tier::Low, |(t, _)| t)
    }
}

impl AgentPolicy for Trader {
    fn name(&self) -> &str {
        &self.label
    }

    fn observes_quality(&self) -> bool {
        matches!(self.payer, PaymentStrategy::Oracle(_))
    }

    fn decide_bids(&mut self, obs: &BidObservation, ctx: &mut DecisionContext<'_>) -> Result<Vec<BidDecision>, PolicyError> {
        let BidStrategy::CostPlus(bidder) = &self.bidder else {
            return Ok(Vec::new());
        };
        let params = &ctx.market.config().execution;
        let skill = obs.self_view.skill;
        let mut bids = Vec::new();
        for listing in &obs.listings {
            let (tier, estimate) = bidder.estimate(listing, skill, params, obs.mu);
            if estimate >= listing.reward {
                continue;
            }
            let noise = if bidder.jitter > 0.0 {
                ctx.rng.random_range(1.0 - bidder.jitter..=1.0 + bidder.jitter)
            } else {
                1.0
            };
            let margin = bidder.margin * noise;
            let price = cost_plus_price(estimate, margin, listing.reward);
            let skills = Self::skills_for(skill, &listing.task);
            bids.push(BidDecision {
                listing_id: listing.listing_id,
                price,
                proposal: format!(
                    "approach: {tier}/{}/cost-plus x{margin:.2} on estimate {estimate:.4}",
                    if skills.is_empty() { "no-skills".to_string() } else { skills.join("+") }
                ),
            });
        }
        Ok(bids)
    }

    fn decide_selection(&mut self, obs: &SelectionObservation, _ctx: &mut DecisionContext<'_>) -> Result<Selection, PolicyError> {
        Ok(self.selector.choose(obs, self.disposition.insularity))
    }

    fn decide_plan(&mut self, obs: &PlanObservation, ctx: &mut DecisionContext<'_>) -> Result<ExecutionPlan, PolicyError> {
        let task = &obs.contract.listing.task;
        let skill = obs.self_view.skill;
        let tier = self.plan_tier(task, skill, obs.contract.price, obs.mu, &ctx.market.config().execution);
        let mut plan = ExecutionPlan::new(tier, Self::skills_for(skill, task));
        plan.effort = "standard".into();
        Ok(plan)
    }

    fn decide_payment(&mut self, obs: &PaymentObservation, ctx: &mut DecisionContext<'_>) -> Result<f64, PolicyError> {
        let shift = self.disposition.generosity_shift;
        let rho = match (&self.payer, obs.quality) {
            (PaymentStrategy::Oracle(oracle), Some(q)) => {
                if self.disposition.mode == Disposition::Honest {
                    oracle.deterministic_payment(q, shift)
                } else {
                    oracle.decide_payment(q, shift, ctx.rng)
                }
            }
            (PaymentStrategy::Oracle(_), None) => DEFAULT_RHO + shift,
            (PaymentStrategy::Fixed(rho), _) => rho + shift,
        };
        Ok(rho)
    }

    fn update_belief(&mut self, obs: &BeliefObservation, _ctx: &mut DecisionContext<'_>) -> Result<String, PolicyError> {
        let a = &obs.activity;
        if a.is_idle() {
            return Ok(format!("round {}: idle; wealth {:.4}", obs.round, obs.self_view.wealth));
        }
        Ok(format!(
            "round {}: profit {:+.4}; posted {}, awarded {}, won {}; disputes issued {}, received {}; wealth {:.4}",
            obs.round,
            a.profit,
            a.listings_posted,
            a.contracts_awarded,
            a.contracts_won,
            a.disputes_issued,
            a.disputes_received,
            obs.self_view.wealth
        ))
    }

    fn decide_autarky(
        &mut self,
        obs: &AutarkyObservation,
        ctx: &mut DecisionContext<'_>,
    ) -> Result<Option<ExecutionPlan>, PolicyError> {
        let params = &ctx.market.config().execution;
        let task = &obs.listing.task;
        let skill = obs.self_view.skill;
        let matched = skill == task.domain;
        let tiers: &[Tier] = if self.disposition.mode == Disposition::Collaborative { &[Tier::Low] } else { &Tier::ALL };
        let best = tiers
            .iter()
            .map(|&t| {
                let value = params.expected_quality(task, t, matched) * obs.listing.reward - obs.mu * params.expected_cost(task, t);
                (t, value)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty tier list");
        Ok((best.1 > 0.0).then(|| ExecutionPlan::new(best.0, Self::skills_for(skill, task))))
    }

    fn offspring(&self) -> Box<dyn AgentPolicy> {
        Box::new(self.clone())
    }
}

/// Uniformly random decisions, for stress tests and null baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomPolicy {
    pub bid_probability: f64,
    pub reject_probability: f64,
}

impl Default for RandomPolicy {
    fn default() -> Self {
        Self { bid_probability: 0.3, reject_probability: 0.1 }
    }
}

impl AgentPolicy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn decide_bids(&mut self, obs: &BidObservation, ctx: &mut DecisionContext<'_>) -> Result<Vec<BidDecision>, PolicyError> {
        let mut bids = Vec::new();
        for listing in &obs.listings {
            if ctx.rng.random::<f64>() < self.bid_probability {
                bids.push(BidDecision {
                    listing_id: listing.listing_id,
                    price: ctx.rng.random_range(0.0..=listing.reward),
                    proposal: "approach: random".into(),
                });
            }
        }
        Ok(bids)
    }

    fn decide_selection(&mut self, obs: &SelectionObservation, ctx: &mut DecisionContext<'_>) -> Result<Selection, PolicyError> {
        if obs.bids.is_empty() || ctx.rng.random::<f64>() < self.reject_probability {
            return Ok(Selection::RejectAll);
        }
        let pick = &obs.bids[ctx.rng.random_range(0..obs.bids.len())];
        Ok(Selection::Winner(pick.bidder))
    }

    fn decide_plan(&mut self, obs: &PlanObservation, ctx: &mut DecisionContext<'_>) -> Result<ExecutionPlan, PolicyError> {
        let tier = Tier::ALL[ctx.rng.random_range(0..3)];
        let skills = if ctx.rng.random::<bool>() { obs.self_view.skill.packages() } else { Vec::new() };
        Ok(ExecutionPlan::new(tier, skills))
    }

    fn decide_payment(&mut self, _obs: &PaymentObservation, ctx: &mut DecisionContext<'_>) -> Result<f64, PolicyError> {
        Ok(ctx.rng.random_range(0.5..=1.0))
    }

    fn update_belief(&mut self, obs: &BeliefObservation, _ctx: &mut DecisionContext<'_>) -> Result<String, PolicyError> {
        Ok(format!("round {}: random", obs.round))
    }

    fn decide_autarky(
        &mut self,
        obs: &AutarkyObservation,
        ctx: &mut DecisionContext<'_>,
    ) -> Result<Option<ExecutionPlan>, PolicyError> {
        if ctx.rng.random::<f64>() < self.reject_probability {
            return Ok(None);
        }
        let tier = Tier::ALL[ctx.rng.random_range(0..3)];
        Ok(Some(ExecutionPlan::new(tier, obs.self_view.skill.packages())))
    }

    fn offspring(&self) -> Box<dyn AgentPolicy> {
        Box::new(self.clone())
    }
}

/// Build a named built-in policy, applying the configured disposition.
pub fn builtin_policy(name: &str, config: &MarketConfig) -> Option<Box<dyn AgentPolicy>> {
    let disposition = DispositionParams::for_mode(config.disposition);
    let cost_plus = || BidStrategy::CostPlus(CostPlusBidder::default());
    let oracle = || PaymentStrategy::Oracle(OraclePoster { floor: config.rho_min, ..Default::default() });
    let trader = match name {
        "baseline" => Trader::new(name, cost_plus(), SelectionStrategy::ReputationScreening { lambda: 1.0 }, oracle()),
        "lowest-price" => Trader::new(name, cost_plus(), SelectionStrategy::LowestPrice, oracle()),
        "accept-any" => Trader::new(name, cost_plus(), SelectionStrategy::AcceptAny, oracle()),
        "silent" => Trader::new(name, BidStrategy::Never, SelectionStrategy::LowestPrice, oracle()),
        "random" => return Some(Box::new(RandomPolicy::default())),
        _ => return None,
    };
    Some(Box::new(trader.with_disposition(disposition)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::economy::AgentId;
    use crate::policy::{BidView, SelfView};

    fn self_view(family: &str) -> SelfView {
        SelfView {
            agent_id: AgentId(1),
            family: family.into(),
            skill: SkillCluster::DataScience,
            wealth: 1.0,
            backbone_spent: 0.0,
            execution_spent: 0.0,
            profit: 0.0,
            poster_avg_rho: 0.0,
            contractor_avg_rho: 0.0,
            poster_dispute_rate: 0.0,
            contractor_dispute_rate: 0.0,
            belief: String::new(),
            generation: 0,
        }
    }

    fn listing(reward: f64) -> ListingView {
        ListingView {
            listing_id: 9,
            task: TaskSpec {
                task_id: "t".into(),
                domain: SkillCluster::DataScience,
                c_ref: 0.02,
                pass_rate: 0.5,
                source: "x".into(),
            },
            description: String::new(),
            reward,
            surge_depth: 0,
            poster: AgentId(1),
            poster_avg_rho: 0.0,
            poster_family: None,
        }
    }

    fn bid(bidder: u32, price: f64, dispute: f64) -> BidView {
        BidView {
            bidder: AgentId(bidder),
            price,
            proposal: String::new(),
            bidder_dispute_rate: dispute,
            bidder_family: None,
        }
    }

    fn selection(bids: Vec<BidView>) -> SelectionObservation {
        SelectionObservation { round: 1, self_view: self_view("GPT"), listing: listing(2.0), bids }
    }

    #[test]
    fn cost_plus_examples() {
        assert!((cost_plus_price(0.6, 1.5, 2.0) - 0.9).abs() < 1e-12);
        assert_eq!(cost_plus_price(2.0, 1.5, 2.0), 2.0);
    }

    #[test]
    fn lowest_price_matches_enumeration() {
        let prices = [0.9, 0.7, 0.7];
        let ids = [3u32, 5, 2];
        let mut perms = vec![vec![0, 1, 2]];
        for p in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            perms.push(p.to_vec());
        }
        for perm in perms {
            let bids = perm.iter().map(|&i| bid(ids[i], prices[i], 0.0)).collect();
            // rule: minimum price, then lowest id
            assert_eq!(SelectionStrategy::LowestPrice.choose(&selection(bids), 0.0), Selection::Winner(AgentId(2)));
        }
    }

    #[test]
    fn reputation_screening_adjusts_scores() {
        let bids = vec![bid(1, 0.8, 0.5), bid(2, 1.0, 0.0), bid(3, 0.9, 0.1)];
        // scores: 0.8 + 0.5*2 = 1.8, 1.0, 0.9 + 0.1*2 = 1.1
        let s = SelectionStrategy::ReputationScreening { lambda: 1.0 };
        assert_eq!(s.choose(&selection(bids.clone()), 0.0), Selection::Winner(AgentId(2)));
        let expected = bids
            .iter()
            .min_by(|a, b| (a.price + a.bidder_dispute_rate * 2.0).total_cmp(&(b.price + b.bidder_dispute_rate * 2.0)))
            .unwrap()
            .bidder;
        assert_eq!(s.choose(&selection(bids), 0.0), Selection::Winner(expected));
        assert_eq!(s.choose(&selection(vec![]), 0.0), Selection::RejectAll);
        let tie = vec![bid(4, 0.9, 0.0), bid(3, 0.9, 0.0)];
        assert_eq!(s.choose(&selection(tie), 0.0), Selection::Winner(AgentId(3)));
    }

    #[test]
    fn insularity_prefers_same_family_only_when_visible() {
        let mut same = bid(2, 1.0, 0.0);
        same.bidder_family = Some("GPT".into());
        let other = bid(1, 0.95, 0.0);
        let obs = selection(vec![same.clone(), other.clone()]);
        assert_eq!(SelectionStrategy::LowestPrice.choose(&obs, 0.8), Selection::Winner(AgentId(2)));
        assert_eq!(SelectionStrategy::LowestPrice.choose(&obs, 0.0), Selection::Winner(AgentId(1)));
    }

    #[test]
    fn accept_any_takes_singleton() {
        let obs = selection(vec![bid(7, 1.9, 0.9)]);
        assert_eq!(SelectionStrategy::AcceptAny.choose(&obs, 0.0), Selection::Winner(AgentId(7)));
    }

    #[test]
    fn planner_drops_to_low_tier_when_mid_unaffordable() {
        let params = ExecutionParams::default();
        let trader = Trader::baseline();
        let task = listing(2.0).task;
        let mid_cost = 10.0 * params.expected_cost(&task, Tier::Mid);
        let low_cost = 10.0 * params.expected_cost(&task, Tier::Low);
        assert!(low_cost < mid_cost);
        let price = (low_cost + mid_cost) / 2.0;
        assert_eq!(trader.plan_tier(&task, SkillCluster::DataScience, price, 10.0, &params), Tier::Low);
        assert_eq!(trader.plan_tier(&task, SkillCluster::DataScience, 0.0, 10.0, &params), Tier::Low);
        let collab = Trader::baseline().with_disposition(DispositionParams::for_mode(Disposition::Collaborative));
        assert_eq!(collab.plan_tier(&task, SkillCluster::DataScience, 100.0, 10.0, &params), Tier::Low);
    }

    #[test]
    fn matched_bidders_estimate_lower_costs() {
        let params = ExecutionParams::default();
        let b = CostPlusBidder::default();
        let l = listing(2.0);
        let (_, matched) = b.estimate(&l, SkillCluster::DataScience, &params, 10.0);
        let (_, unmatched) = b.estimate(&l, SkillCluster::WebMedia, &params, 10.0);
        assert!(matched < unmatched);
    }

    #[test]
    fn registry_knows_every_name() {
        let cfg = MarketConfig::default();
        for name in BUILTIN_POLICIES {
            assert!(builtin_policy(name, &cfg).is_some(), "{name}");
        }
        assert!(builtin_policy("nope", &cfg).is_none());
    }
}
