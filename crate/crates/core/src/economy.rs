//! Domain types and the closed-form money equations of the market.
//!
//! Every amount is a USD `f64`. Other modules compute profit and rewards
//! through the functions here so the accounting stays in one place.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::ExecutionParams;

/// Money in US dollars.
pub type Usd = f64;

/// Absolute tolerance for money comparisons in invariant checks.
pub const MONEY_EPS: f64 = 1e-9;

/// Default approval threshold for a payment ratio.
pub const RHO_APPROVE: f64 = 0.95;

/// Default payment floor.
pub const RHO_MIN: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EconomyError {
    #[error("task {task_id}: pass rate {pass_rate} outside (0, 1]")]
    InvalidPassRate { task_id: String, pass_rate: f64 },
    #[error("task {task_id}: reference cost {c_ref} must be positive")]
    InvalidReferenceCost { task_id: String, c_ref: f64 },
    #[error("payment ratio {rho} outside [{floor}, 1.0]")]
    RatioOutOfRange { rho: f64, floor: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{:03}", self.0)
    }
}

/// Per-million-token prices of one backbone model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub family: String,
    pub model: String,
    pub p_in: f64,
    pub p_out: f64,
}

impl PriceTable {
    pub fn new(family: &str, model: &str, p_in: f64, p_out: f64) -> Self {
        Self {
            family: family.to_string(),
            model: model.to_string(),
            p_in,
            p_out,
        }
    }

    pub fn validate(&self) -> Result<(), EconomyError> {
        if !(self.p_in > 0.0 && self.p_out > 0.0) {
            return Err(EconomyError::InvalidConfig(format!(
                "family {} must have positive token prices",
                self.family
            )));
        }
        Ok(())
    }
}

/// The five backbone families and their token prices.
pub fn default_families() -> Vec<PriceTable> {
    vec![
        PriceTable::new("DeepSeek", "deepseek-v3.2", 0.26, 0.38),
        PriceTable::new("GLM", "glm-4.7-flash", 0.06, 0.40),
        PriceTable::new("GPT", "gpt-5.4-nano", 0.20, 1.25),
        PriceTable::new("Gemini", "gemini-3.1-flash-lite", 0.25, 1.50),
        PriceTable::new("Claude", "claude-haiku-4.5", 1.00, 5.00),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillCluster {
    CodingEngineering,
    DataScience,
    DocumentFinance,
    DataQuerying,
    WebMedia,
}

impl SkillCluster {
    pub const ALL: [SkillCluster; 5] = [
        SkillCluster::CodingEngineering,
        SkillCluster::DataScience,
        SkillCluster::DocumentFinance,
        SkillCluster::DataQuerying,
        SkillCluster::WebMedia,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SkillCluster::CodingEngineering => "coding_engineering",
            SkillCluster::DataScience => "data_science",
            SkillCluster::DocumentFinance => "document_finance",
            SkillCluster::DataQuerying => "data_querying",
            SkillCluster::WebMedia => "web_media",
        }
    }

    /// Skill packages injected into a worker when this cluster is deployed.
    pub fn packages(self) -> Vec<String> {
        let stem = self.as_str();
        vec![format!("{stem}/docs"), format!("{stem}/helpers")]
    }
}

impl fmt::Display for SkillCluster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A unit of work in the task catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub domain: SkillCluster,
    pub c_ref: Usd,
    pub pass_rate: f64,
    pub source: String,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), EconomyError> {
        if !(self.pass_rate > 0.0 && self.pass_rate <= 1.0) {
            return Err(EconomyError::InvalidPassRate {
                task_id: self.task_id.clone(),
                pass_rate: self.pass_rate,
            });
        }
        if !(self.c_ref > 0.0 && self.c_ref.is_finite()) {
            return Err(EconomyError::InvalidReferenceCost {
                task_id: self.task_id.clone(),
                c_ref: self.c_ref,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    #[default]
    Neutral,
    Honest,
    Adversarial,
    Collaborative,
}

impl Disposition {
    pub const ALL: [Disposition; 4] = [
        Disposition::Neutral,
        Disposition::Honest,
        Disposition::Adversarial,
        Disposition::Collaborative,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Disposition::Neutral => "neutral",
            Disposition::Honest => "honest",
            Disposition::Adversarial => "adversarial",
            Disposition::Collaborative => "collaborative",
        }
    }
}

/// Who settles surge listings whose poster has been deactivated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrphanSurge {
    /// The platform takes over as poster; its flows go to a sink account.
    #[default]
    Platform,
    /// The deactivated poster stays on the listing.
    KeepPoster,
}

/// Synthetic token usage charged for each strategic decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub tokens_in: u64,
    pub tokens_out: u64,
    /// Per-call budget; a decision never costs more than this.
    pub cap: Usd,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            tokens_in: 2000,
            tokens_out: 500,
            cap: 0.05,
        }
    }
}

/// Every market parameter plus ablation switches and the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarketConfig {
    pub n_agents: usize,
    pub w0: Usd,
    pub kappa: usize,
    pub mu: f64,
    pub f: f64,
    #[serde(alias = "K")]
    pub elimination_period: u32,
    #[serde(alias = "E")]
    pub eliminations: usize,
    #[serde(alias = "R")]
    pub reproductions: usize,
    pub rho_min: f64,
    pub rho_approve: f64,
    pub alpha: f64,
    pub surge_cooldown: f64,
    pub seed: u64,
    pub transparency: bool,
    pub monoculture: Option<String>,
    pub disposition: Disposition,
    pub rounds: u32,
    pub backbone: BackboneConfig,
    pub execution: ExecutionParams,
    pub families: Vec<PriceTable>,
    /// Optional cap on contracts one agent may win per round.
    pub max_contracts_per_agent: Option<usize>,
    pub policy_retries: u32,
    pub orphan_surge: OrphanSurge,
    /// Replay executions from the cache instead of always sampling.
    pub use_cache: bool,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            n_agents: 25,
            w0: 1.0,
            kappa: 2,
            mu: 10.0,
            f: 5.0,
            elimination_period: 6,
            eliminations: 1,
            reproductions: 1,
            rho_min: RHO_MIN,
            rho_approve: RHO_APPROVE,
            alpha: 0.15,
            surge_cooldown: 0.05,
            seed: 0,
            transparency: false,
            monoculture: None,
            disposition: Disposition::Neutral,
            rounds: 24,
            backbone: BackboneConfig::default(),
            execution: ExecutionParams::default(),
            families: default_families(),
            max_contracts_per_agent: None,
            policy_retries: 5,
            orphan_surge: OrphanSurge::Platform,
            use_cache: false,
        }
    }
}

impl MarketConfig {
    pub fn validate(&self) -> Result<(), EconomyError> {
        let bad = |msg: String| Err(EconomyError::InvalidConfig(msg));
        if !(0.0 < self.rho_min && self.rho_min <= self.rho_approve && self.rho_approve <= 1.0) {
            return bad(format!(
                "need 0 < rho_min ({}) <= rho_approve ({}) <= 1",
                self.rho_min, self.rho_approve
            ));
        }
        if !(self.mu >= 1.0) {
            return bad(format!("mu must be >= 1, got {}", self.mu));
        }
        if !(self.f > 0.0) {
            return bad(format!("f must be > 0, got {}", self.f));
        }
        if self.kappa < 1 {
            return bad("kappa must be >= 1".into());
        }
        if self.n_agents < 2 {
            return bad("a market needs at least 2 agents".into());
        }
        if self.eliminations > self.n_agents {
            return bad(format!(
                "eliminations ({}) exceed n_agents ({})",
                self.eliminations, self.n_agents
            ));
        }
        if self.elimination_period == 0 {
            return bad("elimination_period must be >= 1".into());
        }
        if !(self.alpha >= 0.0) || !(0.0..1.0).contains(&self.surge_cooldown) {
            return bad("alpha must be >= 0 and surge_cooldown in [0, 1)".into());
        }
        if self.families.is_empty() {
            return bad("at least one model family is required".into());
        }
        for family in &self.families {
            family.validate()?;
        }
        if let Some(mono) = &self.monoculture {
            if self.family(mono).is_none() {
                return bad(format!("monoculture family {mono} is not in the price table"));
            }
        }
        self.execution.validate()?;
        Ok(())
    }

    pub fn family(&self, name: &str) -> Option<&PriceTable> {
        self.families.iter().find(|p| p.family == name)
    }

    pub fn payment_rule(&self) -> PaymentRule {
        PaymentRule {
            rho_min: self.rho_min,
            rho_approve: self.rho_approve,
        }
    }

    /// Backbone charge for one decision made on `prices`.
    pub fn decision_cost(&self, prices: &PriceTable) -> Usd {
        llm_call_cost(prices, self.backbone.tokens_in, self.backbone.tokens_out)
            .min(self.backbone.cap)
    }

    /// Whether evolution runs after round `round` (1-based).
    pub fn is_evolution_round(&self, round: u32) -> bool {
        round > 0 && round.is_multiple_of(self.elimination_period)
    }
}

/// One market participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub agent_id: AgentId,
    pub family: PriceTable,
    pub skill: SkillCluster,
    pub wealth: Usd,
    pub active: bool,
    pub payment_history_as_poster: Vec<f64>,
    pub payment_history_as_contractor: Vec<f64>,
    pub belief: String,
    pub generation: u32,
    pub parent: Option<AgentId>,
    #[serde(default)]
    pub backbone_spent: Usd,
    #[serde(default)]
    pub execution_spent: Usd,
    #[serde(default)]
    pub profit: Usd,
}

impl AgentState {
    pub fn new(agent_id: AgentId, family: PriceTable, skill: SkillCluster, wealth: Usd) -> Self {
        Self {
            agent_id,
            family,
            skill,
            wealth,
            active: true,
            payment_history_as_poster: Vec::new(),
            payment_history_as_contractor: Vec::new(),
            belief: String::new(),
            generation: 0,
            parent: None,
            backbone_spent: 0.0,
            execution_spent: 0.0,
            profit: 0.0,
        }
    }

    pub fn poster_avg_rho(&self) -> f64 {
        avg_payment_ratio(&self.payment_history_as_poster)
    }

    pub fn contractor_avg_rho(&self) -> f64 {
        avg_payment_ratio(&self.payment_history_as_contractor)
    }

    pub fn poster_dispute_rate(&self, rule: &PaymentRule) -> f64 {
        rule.dispute_rate(&self.payment_history_as_poster)
    }

    pub fn contractor_dispute_rate(&self, rule: &PaymentRule) -> f64 {
        rule.dispute_rate(&self.payment_history_as_contractor)
    }

    /// Apply a profit (possibly negative) and book it.
    pub fn credit(&mut self, amount: Usd) {
        self.wealth += amount;
        self.profit += amount;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaymentStatus {
    Approve,
    Dispute,
}

/// Floor and approval threshold for payment ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaymentRule {
    pub rho_min: f64,
    pub rho_approve: f64,
}

impl Default for PaymentRule {
    fn default() -> Self {
        Self {
            rho_min: RHO_MIN,
            rho_approve: RHO_APPROVE,
        }
    }
}

impl PaymentRule {
    /// Classify a settled ratio. A ratio outside `[rho_min, 1]` means the
    /// settlement layer failed to clamp.
    pub fn classify(&self, rho: f64) -> Result<PaymentStatus, EconomyError> {
        if !(rho >= self.rho_min && rho <= 1.0) {
            return Err(EconomyError::RatioOutOfRange {
                rho,
                floor: self.rho_min,
            });
        }
        Ok(self.status_of(rho))
    }

    /// Threshold-only classification, used where no floor applies
    /// (autarky scores land anywhere in `[0, 1]`).
    pub fn status_of(&self, rho: f64) -> PaymentStatus {
        if rho >= self.rho_approve {
            PaymentStatus::Approve
        } else {
            PaymentStatus::Dispute
        }
    }

    pub fn clamp(&self, rho: f64) -> f64 {
        if rho.is_nan() {
            return self.rho_min;
        }
        rho.clamp(self.rho_min, 1.0)
    }

    pub fn dispute_rate(&self, history: &[f64]) -> f64 {
        if history.is_empty() {
            return 0.0;
        }
        let disputes = history.iter().filter(|&&r| r < self.rho_approve).count();
        disputes as f64 / history.len() as f64
    }
}

/// Cost of one model call with `n_in` input and `n_out` output tokens.
pub fn llm_call_cost(prices: &PriceTable, n_in: u64, n_out: u64) -> Usd {
    (n_in as f64 * prices.p_in + n_out as f64 * prices.p_out) / 1e6
}

/// Unscaled task reward: reference cost times premium over pass rate.
pub fn base_reward(task: &TaskSpec, f: f64) -> Result<Usd, EconomyError> {
    task.validate()?;
    Ok(task.c_ref * f / task.pass_rate)
}

pub fn contract_reward(base: Usd, mu: f64) -> Usd {
    mu * base
}

pub fn poster_profit(reward: Usd, rho: f64, bid: Usd, backbone_cost: Usd) -> Usd {
    reward - rho * bid - backbone_cost
}

pub fn contractor_profit(rho: f64, bid: Usd, mu: f64, exec_cost: Usd, backbone_cost: Usd) -> Usd {
    rho * bid - mu * exec_cost - backbone_cost
}

/// Classify with the default floor and threshold.
pub fn classify_payment(rho: f64) -> Result<PaymentStatus, EconomyError> {
    PaymentRule::default().classify(rho)
}

/// Mean payment ratio; an empty history earns no trust and yields 0.
pub fn avg_payment_ratio(history: &[f64]) -> f64 {
    if history.is_empty() {
        return 0.0;
    }
    history.iter().sum::<f64>() / history.len() as f64
}

/// Fraction of ratios below the approval threshold; 0 for an empty history.
pub fn reputation_dispute_rate(history: &[f64]) -> f64 {
    PaymentRule::default().dispute_rate(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= MONEY_EPS
    }

    fn task(c_ref: f64, pass_rate: f64) -> TaskSpec {
        TaskSpec {
            task_id: "t".into(),
            domain: SkillCluster::DataScience,
            c_ref,
            pass_rate,
            source: "test".into(),
        }
    }

    #[test]
    fn call_cost_examples() {
        let fams = default_families();
        assert!(close(llm_call_cost(&fams[0], 1_000_000, 0), 0.26));
        assert_eq!(llm_call_cost(&fams[2], 0, 0), 0.0);
        assert!(close(llm_call_cost(&fams[4], 500_000, 100_000), 1.0));
    }

    #[test]
    fn reward_examples() {
        assert!(close(base_reward(&task(0.02, 1.0), 5.0).unwrap(), 0.10));
        assert!(close(base_reward(&task(0.02, 0.5), 5.0).unwrap(), 0.20));
        assert!(close(base_reward(&task(1.0, 1.0), 1.0).unwrap(), 1.0));
        assert!(matches!(
            base_reward(&task(0.02, 0.0), 5.0),
            Err(EconomyError::InvalidPassRate { .. })
        ));
        assert!(close(contract_reward(0.20, 10.0), 2.0));
        assert!(close(contract_reward(0.20, 1.0), 0.20));
        assert!(close(contract_reward(0.20, 5.0), 1.0));
    }

    #[test]
    fn profit_examples() {
        assert!(close(poster_profit(2.0, 1.0, 1.5, 0.01), 0.49));
        assert!(close(poster_profit(2.0, 0.5, 1.5, 0.0), 1.25));
        assert_eq!(poster_profit(0.0, 1.0, 0.0, 0.0), 0.0);
        assert!(close(contractor_profit(0.95, 1.5, 10.0, 0.05, 0.01), 0.915));
        assert!(close(contractor_profit(0.5, 1.0, 10.0, 0.10, 0.0), -0.5));
        assert!(close(contractor_profit(1.0, 1.0, 1.0, 0.0, 0.0), 1.0));
    }

    #[test]
    fn classification_and_reputation() {
        assert_eq!(classify_payment(0.95).unwrap(), PaymentStatus::Approve);
        assert_eq!(classify_payment(0.949).unwrap(), PaymentStatus::Dispute);
        assert_eq!(classify_payment(1.0).unwrap(), PaymentStatus::Approve);
        assert!(classify_payment(0.3).is_err());
        assert!(classify_payment(1.2).is_err());
        assert!(classify_payment(f64::NAN).is_err());

        assert_eq!(avg_payment_ratio(&[]), 0.0);
        assert!(close(avg_payment_ratio(&[1.0, 0.5]), 0.75));
        assert!(close(avg_payment_ratio(&[0.95]), 0.95));
        assert!(close(reputation_dispute_rate(&[1.0, 0.9, 0.5]), 2.0 / 3.0));
        assert_eq!(reputation_dispute_rate(&[1.0, 1.0]), 0.0);
        assert_eq!(reputation_dispute_rate(&[]), 0.0);
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = MarketConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_agents, 25);
        assert_eq!((cfg.elimination_period, cfg.eliminations, cfg.reproductions), (6, 1, 1));
        assert!(cfg.is_evolution_round(6) && !cfg.is_evolution_round(5));

        let mut bad = cfg.clone();
        bad.rho_min = 0.97;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.mu = 0.5;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.monoculture = Some("Nope".into());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn decision_cost_is_capped() {
        let mut cfg = MarketConfig::default();
        let claude = cfg.family("Claude").unwrap().clone();
        assert!(close(cfg.decision_cost(&claude), 0.0045));
        cfg.backbone.tokens_in = 1_000_000;
        assert_eq!(cfg.decision_cost(&claude), 0.05);
    }

    #[test]
    fn empty_config_file_reproduces_defaults() {
        let cfg: MarketConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, MarketConfig::default());
        let cfg: MarketConfig = toml::from_str("K = 3\nE = 3\nR = 3").unwrap();
        assert_eq!((cfg.elimination_period, cfg.eliminations, cfg.reproductions), (3, 3, 3));
    }

    proptest! {
        #[test]
        fn reward_monotone(c in 0.001f64..1.0, p in 0.01f64..0.99, f in 0.1f64..10.0) {
            let r = base_reward(&task(c, p), f).unwrap();
            prop_assert!(base_reward(&task(c, p + 0.01), f).unwrap() < r);
            prop_assert!(base_reward(&task(c * 1.01, p), f).unwrap() > r);
            prop_assert!(base_reward(&task(c, p), f * 1.01).unwrap() > r);
        }

        #[test]
        fn contract_reward_linear(b in 0.0f64..100.0, mu in 1.0f64..50.0) {
            prop_assert!((contract_reward(b, mu) - mu * contract_reward(b, 1.0)).abs() < 1e-9);
        }

        #[test]
        fn payment_conserved(reward in 0.0f64..10.0, rho in 0.5f64..=1.0, bid in 0.0f64..10.0,
                             mu in 1.0f64..20.0, exec in 0.0f64..1.0, pb in 0.0f64..0.05, cb in 0.0f64..0.05) {
            let total = poster_profit(reward, rho, bid, pb) + contractor_profit(rho, bid, mu, exec, cb);
            prop_assert!((total - (reward - mu * exec - pb - cb)).abs() < 1e-9);
        }

        #[test]
        fn classification_is_step(a in 0.5f64..=1.0, b in 0.5f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if classify_payment(lo).unwrap() == PaymentStatus::Approve {
                prop_assert_eq!(classify_payment(hi).unwrap(), PaymentStatus::Approve);
            }
        }

        #[test]
        fn reputation_matches_brute_force(history in proptest::collection::vec(0.5f64..=1.0, 0..1000)) {
            let mut sum = 0.0;
            let mut below = 0usize;
            for r in &history {
                sum += r;
                if *r < 0.95 { below += 1; }
            }
            let n = history.len();
            let mean = if n == 0 { 0.0 } else { sum / n as f64 };
            let rate = if n == 0 { 0.0 } else { below as f64 / n as f64 };
            prop_assert!((avg_payment_ratio(&history) - mean).abs() < 1e-9);
            prop_assert!((reputation_dispute_rate(&history) - rate).abs() < 1e-12);
        }
    }
}
