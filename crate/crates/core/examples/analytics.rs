//! Structural metrics over a finished run: concentration, reciprocity and
//! the wealth Lorenz curve.

use diagon::analytics::{gini, hhi, lorenz_points, random_reciprocity_baseline, reciprocity, summarize};
use diagon::execution::default_catalog;
use diagon::market::log::RunLog;
use diagon::policy::builtin_policy;
use diagon::rng::seeded;
use diagon::{Market, MarketConfig, Mode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = MarketConfig { seed: 3, ..MarketConfig::default() };
    let cfg = config.clone();
    let mut market = Market::new(config, default_catalog(), Mode::Market, |_| builtin_policy("lowest-price", &cfg).unwrap())?;
    market.run()?;
    let log = RunLog::from_entries(market.take_log())?;

    let wealth: Vec<f64> = log.final_agents().iter().filter(|a| a.active).map(|a| a.wealth.max(0.0)).collect();
    println!("wealth gini {:.3}", gini(&wealth)?);
    let mut won = std::collections::BTreeMap::new();
    for t in log.transactions() {
        *won.entry(t.contractor).or_insert(0.0) += 1.0;
    }
    let counts: Vec<f64> = won.values().copied().collect();
    println!("contract gini {:.3}, hhi {:.3} over {} contractors", gini(&counts)?, hhi(&counts)?, counts.len());

    let edges: Vec<_> = log.transactions().map(|t| (t.poster, t.contractor)).collect();
    let baseline = random_reciprocity_baseline(25, 50, 1000, &mut seeded(1));
    println!("reciprocity {:.3} (random graph at 50 edges {:.3})", reciprocity(&edges), baseline);

    println!("\nlorenz curve of final wealth");
    for (x, y) in lorenz_points(&wealth)?.iter().step_by(4) {
        println!("  {:>4.0}% of agents hold {:>5.1}%", 100.0 * x, 100.0 * y);
    }
    let report = summarize(&log);
    println!("\nskill-matched share {:.3}, false disputes {:.3}", report.overall.skill_match_share, report.overall.false_dispute_rate);
    Ok(())
}
