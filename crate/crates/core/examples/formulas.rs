//! The economic primitives on a worked contract.

use diagon::economy::{
    base_reward, classify_payment, contract_reward, contractor_profit, default_families, llm_call_cost, poster_profit,
    reputation_dispute_rate,
};
use diagon::{MarketConfig, TaskSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = MarketConfig::default();
    println!("backbone cost of one decision (2000 in / 500 out):");
    for prices in default_families() {
        println!("  {:<10} {:.6} USD (charged {:.6})", prices.family, llm_call_cost(&prices, 2000, 500), config.decision_cost(&prices));
    }

    let task = TaskSpec {
        task_id: "demo-1".into(),
        domain: diagon::economy::SkillCluster::ALL[1],
        c_ref: 0.02,
        pass_rate: 0.5,
        source: "demo".into(),
    };
    let base = base_reward(&task, config.f)?;
    let reward = contract_reward(base, config.mu);
    println!("\nbase reward {base:.4}, contract reward at mu={} {reward:.4}", config.mu);

    let (bid, exec, backbone) = (1.5, 0.05, 0.01);
    for rho in [1.0, 0.95, 0.8, 0.5] {
        println!(
            "  rho {rho:.2} {:<8} poster {:+.4} contractor {:+.4}",
            format!("{:?}", classify_payment(rho)?),
            poster_profit(reward, rho, bid, backbone),
            contractor_profit(rho, bid, config.mu, exec, backbone)
        );
    }
    let history = [1.0, 0.9, 0.5, 0.97];
    println!("\ndispute rate of {history:?}: {:.3}", reputation_dispute_rate(&history));
    Ok(())
}
