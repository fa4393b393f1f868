//! Cost-amplification ablation written to a temporary directory.
//!
//! cargo run --release --example ablation_mu -- [axis]

use diagon::experiment::{cmd_ablate, ExperimentSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let axis = std::env::args().nth(1).unwrap_or_else(|| "mu".into());
    let out = std::env::temp_dir().join(format!("diagon-ablate-{}", std::process::id()));
    let spec = ExperimentSpec { seeds: vec![1, 2, 3], output_dir: out.clone(), ..ExperimentSpec::default() };
    let report = cmd_ablate(&spec, &axis)?;
    print!("{}", report.render());
    println!("artifacts in {}", out.display());
    Ok(())
}
