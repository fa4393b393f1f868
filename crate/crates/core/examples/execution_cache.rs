//! Replay worker runs from a cache file across markets.
//!
//! The first run fills the cache; later runs mostly replay from it.

use diagon::execution::{default_catalog, ExecutionCache};
use diagon::policy::builtin_policy;
use diagon::{Market, MarketConfig, Mode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("diagon-cache-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("executions.jsonl");
    for seed in 1..=4 {
        let config = MarketConfig { seed, use_cache: true, ..MarketConfig::default() };
        let cfg = config.clone();
        let cache = ExecutionCache::load(&path)?;
        let stored = cache.len();
        let mut market =
            Market::new(config, default_catalog(), Mode::Market, |_| builtin_policy("baseline", &cfg).unwrap())?.with_cache(cache);
        market.run()?;
        let records = &market.state().transactions;
        let n = records.len();
        let replayed = n - (market.cache().len() - stored);
        let pass = records.iter().filter(|t| t.quality >= 1.0).count() as f64 / n as f64;
        market.cache_mut().flush(&path)?;
        println!("seed {seed}: {n} executions, {replayed} replayed, pass rate {pass:.3}, cache now {}", market.cache().len());
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
