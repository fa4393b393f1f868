//! Writing a policy: a trader that delegates to the baseline but refuses
//! to pay more than 0.8 unless the work passed.

use diagon::execution::default_catalog;
use diagon::policy::{
    builtin_policy, AgentPolicy, AutarkyObservation, BeliefObservation, BidDecision, BidObservation, DecisionContext,
    PaymentObservation, PlanObservation, PolicyError, Selection, SelectionObservation,
};
use diagon::execution::ExecutionPlan;
use diagon::{Market, MarketConfig, Mode};

struct Tightfisted(Box<dyn AgentPolicy>);

impl AgentPolicy for Tightfisted {
    fn name(&self) -> &str {
        "tightfisted"
    }
    fn observes_quality(&self) -> bool {
        true
    }
    fn decide_bids(&mut self, obs: &BidObservation, ctx: &mut DecisionContext<'_>) -> Result<Vec<BidDecision>, PolicyError> {
        self.0.decide_bids(obs, ctx)
    }
    fn decide_selection(&mut self, obs: &SelectionObservation, ctx: &mut DecisionContext<'_>) -> Result<Selection, PolicyError> {
        self.0.decide_selection(obs, ctx)
    }
    fn decide_plan(&mut self, obs: &PlanObservation, ctx: &mut DecisionContext<'_>) -> Result<ExecutionPlan, PolicyError> {
        self.0.decide_plan(obs, ctx)
    }
    fn decide_payment(&mut self, obs: &PaymentObservation, _: &mut DecisionContext<'_>) -> Result<f64, PolicyError> {
        Ok(if obs.quality.unwrap_or(0.0) >= 1.0 { 1.0 } else { 0.8 })
    }
    fn update_belief(&mut self, obs: &BeliefObservation, ctx: &mut DecisionContext<'_>) -> Result<String, PolicyError> {
        self.0.update_belief(obs, ctx)
    }
    fn decide_autarky(
        &mut self,
        obs: &AutarkyObservation,
        ctx: &mut DecisionContext<'_>,
    ) -> Result<Option<ExecutionPlan>, PolicyError> {
        self.0.decide_autarky(obs, ctx)
    }
    fn offspring(&self) -> Box<dyn AgentPolicy> {
        Box::new(Tightfisted(self.0.offspring()))
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = MarketConfig::default();
    let cfg = config.clone();
    let mut market = Market::new(config, default_catalog(), Mode::Market, |a| {
        let inner = builtin_policy("baseline", &cfg).unwrap();
        if a.agent_id.0 <= 5 {
            Box::new(Tightfisted(inner))
        } else {
            inner
        }
    })?;
    market.run()?;
    let state = market.state();
    let (mut tight, mut rest) = (Vec::new(), Vec::new());
    for a in state.agents.iter().filter(|a| a.generation == 0) {
        if a.agent_id.0 <= 5 { tight.push(a) } else { rest.push(a) }
    }
    for (label, group) in [("tightfisted", &tight), ("baseline", &rest)] {
        let wealth = group.iter().map(|a| a.wealth).sum::<f64>() / group.len() as f64;
        let rep = group.iter().map(|a| a.poster_avg_rho()).sum::<f64>() / group.len() as f64;
        let alive = group.iter().filter(|a| a.active).count();
        println!("{label:<12} mean wealth {wealth:>8.4}  poster avg rho {rep:.3}  {alive}/{} still active", group.len());
    }
    Ok(())
}
