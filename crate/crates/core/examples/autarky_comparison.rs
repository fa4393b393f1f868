//! Market against autarky on shared seeds, as a comparison table.
//!
//! cargo run --release --example autarky_comparison -- [n_seeds]

use diagon::analytics::{compare_modes, render_comparison, summarize, MetricsReport};
use diagon::execution::default_catalog;
use diagon::market::log::RunLog;
use diagon::policy::builtin_policy;
use diagon::{Market, MarketConfig, Mode};

fn report(mode: Mode, seed: u64) -> Result<MetricsReport, Box<dyn std::error::Error>> {
    let config = MarketConfig { seed, ..MarketConfig::default() };
    let cfg = config.clone();
    let mut market = Market::new(config, default_catalog(), mode, |_| builtin_policy("baseline", &cfg).unwrap())?;
    market.run()?;
    Ok(summarize(&RunLog::from_entries(market.take_log())?))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(3);
    let mut market = Vec::new();
    let mut autarky = Vec::new();
    for seed in 1..=n {
        market.push(report(Mode::Market, seed)?);
        autarky.push(report(Mode::Autarky, seed)?);
    }
    println!("{n} seeds x 24 rounds");
    print!("{}", render_comparison(&compare_modes(&market, &autarky)));
    Ok(())
}
