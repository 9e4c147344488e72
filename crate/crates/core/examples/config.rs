//! Loads a configuration file (or the defaults), applies an override and
//! prints the canonical form with its hash.
//!
//! cargo run --example config [path.toml]

use rrr_contact::config::ExperimentConfig;

fn main() -> rrr_contact::error::Result<()> {
    let mut cfg = match std::env::args().nth(1) {
        Some(path) => ExperimentConfig::load(path.as_ref())?,
        None => ExperimentConfig::default(),
    };
    println!("hash {}", cfg.hash());
    cfg.policy.p_th = 0.9;
    cfg.validate()?;
    println!("hash with p_th = 0.9: {}", cfg.hash());
    println!("train on {:?}, evaluate on {}", cfg.train_configs(), cfg.evaluation.held_out_config);
    print!("{}", cfg.to_toml());
    Ok(())
}
