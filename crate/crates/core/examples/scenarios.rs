//! One round of sampled contact scenarios and what happens when each is met
//! with zero-g as soon as the observer detects it.
//!
//! cargo run --example scenarios [seed]

use rrr_contact::config::ExperimentConfig;
use rrr_contact::contact::{sample_scenarios, ContactSite};
use rrr_contact::simulation::{run_episode, EpisodeOptions};

fn main() -> rrr_contact::error::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let cfg = ExperimentConfig::default();
    let engine = cfg.engine();
    let list = sample_scenarios(&engine.model, &engine.gains.stiffness, &cfg.scenarios, seed)?;
    println!("{:>3} {:>6} {:<9} {:<22} {:>7} {:>9} {:>8} {:>8}", "#", "config", "kind", "site", "peak N", "detect s", "pre N", "post N");
    for (i, sc) in list.iter().enumerate() {
        let site = match sc.site {
            ContactSite::Platform { .. } => "platform".to_string(),
            ContactSite::Link { chain, link, s } => format!("chain {} {link:?} at {s:.2}", chain + 1),
        };
        let ep = run_episode(&engine, sc, &EpisodeOptions { seed: i as u64, ..Default::default() })?;
        let detect = ep.summary.detection_time.map_or("-".into(), |t| format!("{t:.3}"));
        println!(
            "{i:>3} {:>6} {:<9} {site:<22} {:>7.1} {detect:>9} {:>8.2} {:>8.2}",
            sc.config_id,
            sc.kind.as_str(),
            sc.magnitude,
            ep.summary.pre_peak,
            ep.summary.post_peak
        );
    }
    Ok(())
}
