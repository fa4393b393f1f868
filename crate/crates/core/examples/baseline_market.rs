//! One 24-round baseline market with the built-in traders, summarised.
//!
//! cargo run --example baseline_market -- [seed]

use diagon::analytics::{render_report, summarize};
use diagon::execution::default_catalog;
use diagon::market::log::RunLog;
use diagon::policy::builtin_policy;
use diagon::{Market, MarketConfig, Mode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let config = MarketConfig { seed, ..MarketConfig::default() };
    let policy_config = config.clone();
    let mut market = Market::new(config, default_catalog(), Mode::Market, |_| {
        builtin_policy("baseline", &policy_config).expect("built-in policy")
    })?;
    market.run()?;

    let log = RunLog::from_entries(market.take_log())?;
    print!("{}", render_report(&summarize(&log)));

    let state = market.state();
    let mut ranked: Vec<_> = state.agents.iter().filter(|a| a.active).collect();
    ranked.sort_by(|a, b| b.wealth.total_cmp(&a.wealth));
    println!("\nrichest agents");
    for a in ranked.iter().take(5) {
        println!("  {} {:<8} {:<24} {:>9.4}", a.agent_id, a.family.family, a.skill.as_str(), a.wealth);
    }
    println!("platform sink {:.4}, surge pool {}", state.platform_balance, state.surge_pool.len());
    Ok(())
}
