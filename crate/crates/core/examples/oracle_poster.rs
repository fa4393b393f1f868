//! The calibrated payment model: draws per quality bin and the effect of a
//! generosity shift.

use diagon::policy::{OraclePoster, ORACLE_BINS};
use diagon::rng::seeded;

fn main() {
    let poster = OraclePoster::default();
    let mut rng = seeded(7);
    println!("bin        table   empirical  disputed");
    for (bin, q) in ORACLE_BINS.iter().zip([0.0, 0.25, 0.75, 1.0]) {
        let draws: Vec<f64> = (0..20_000).map(|_| poster.decide_payment(q, 0.0, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let disputed = draws.iter().filter(|&&r| r < 0.95).count() as f64 / draws.len() as f64;
        println!("{:<9} {:>6.3} {:>11.4} {:>9.3}", bin.label, bin.mean, mean, disputed);
    }
    println!("\nnoise-free payment for adequate work by generosity shift");
    for shift in [-0.3, -0.1, 0.0, 0.1, 0.3] {
        println!("  {shift:+.1} -> {:.3}", poster.deterministic_payment(0.75, shift));
    }
}
