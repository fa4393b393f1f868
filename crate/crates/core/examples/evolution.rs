//! Selection pressure under the default and the fierce schedule.

use diagon::execution::default_catalog;
use diagon::policy::builtin_policy;
use diagon::{Market, MarketConfig, Mode};

fn run(label: &str, config: MarketConfig) -> Result<(), Box<dyn std::error::Error>> {
    let cfg = config.clone();
    let mut market = Market::new(config, default_catalog(), Mode::Market, |_| builtin_policy("baseline", &cfg).unwrap())?;
    market.run()?;
    println!("{label}");
    for ev in &market.state().evolution {
        let out: Vec<String> = ev.deactivated.iter().map(|(id, w)| format!("{id} ({w:.3})")).collect();
        let born: Vec<String> = ev.spawned.iter().map(|s| format!("{}<-{} ({:.3})", s.child, s.parent, s.wealth)).collect();
        println!("  round {:>2}: out {} | born {}", ev.round, out.join(", "), born.join(", "));
    }
    let state = market.state();
    let max_gen = state.agents.iter().map(|a| a.generation).max().unwrap_or(0);
    println!("  {} agents ever, {} active, deepest generation {max_gen}\n", state.agents.len(), state.active_ids().len());
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run("default (K=6, E=R=1)", MarketConfig::default())?;
    run(
        "fierce (K=3, E=R=3)",
        MarketConfig { elimination_period: 3, eliminations: 3, reproductions: 3, ..MarketConfig::default() },
    )
}
