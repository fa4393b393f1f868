//! Surge escalation and cooldown, first by hand and then in a thin market
//! of random traders that rarely bid.

use diagon::execution::default_catalog;
use diagon::market::listing::{surge_cooldown, surge_escalate, ContractListing};
use diagon::policy::RandomPolicy;
use diagon::{AgentId, Market, MarketConfig, Mode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut listing = ContractListing {
        listing_id: 1,
        task: default_catalog().tasks()[0].clone(),
        poster: AgentId(1),
        base_reward: 1.0,
        original_reward: 1.0,
        current_reward: 1.0,
        surge_depth: 0,
        poster_avg_rho: 0.0,
        poster_family_visible: None,
        round_posted: 1,
    };
    for _ in 0..4 {
        listing = surge_escalate(listing, 0.15);
        println!("depth {} -> {:.4}", listing.surge_depth, listing.current_reward);
    }
    for _ in 0..3 {
        listing = surge_cooldown(listing, 0.05);
        println!("cooled  -> {:.4}", listing.current_reward);
    }

    let config = MarketConfig { rounds: 12, ..MarketConfig::default() };
    let mut market = Market::new(config, default_catalog(), Mode::Market, |_| {
        Box::new(RandomPolicy { bid_probability: 0.03, reject_probability: 0.2 })
    })?;
    println!("\nround  offered  surged  settled  pool  max-depth  surged-tasks");
    while !market.is_finished() {
        let outcome = market.run_round()?;
        let surged = outcome.listings.iter().filter(|l| l.is_surged()).count();
        let depth = outcome.listings.iter().map(|l| l.surge_depth).max().unwrap_or(0);
        let state = market.state();
        println!(
            "{:>5} {:>8} {:>7} {:>8} {:>5} {:>10} {:>13}",
            outcome.round,
            outcome.listings.len(),
            surged,
            outcome.records.len(),
            state.round_records[outcome.round as usize - 1].surge_pool_size,
            depth,
            state.surge_levels.len()
        );
    }
    Ok(())
}
