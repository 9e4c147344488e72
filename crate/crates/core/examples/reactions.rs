//! The three reactions on the same clamping and collision scenario: the
//! reaction of the true class, the reaction of the wrong class, and zero-g.
//! An oracle stands in for the classifier.
//!
//! cargo run --example reactions

use rrr_contact::config::ExperimentConfig;
use rrr_contact::contact::{sample_scenarios, ContactKind};
use rrr_contact::evaluation::{label_outcome, DFCR_MARGIN};
use rrr_contact::simulation::{run_episode, ClassifierChoice, EpisodeOptions, Gate};

fn main() -> rrr_contact::error::Result<()> {
    let cfg = ExperimentConfig::default();
    let engine = cfg.engine();
    let list = sample_scenarios(&engine.model, &engine.gains.stiffness, &cfg.scenarios, 7)?;
    for kind in [ContactKind::Clamping, ContactKind::Collision] {
        let sc = list.iter().find(|s| s.kind == kind).expect("every round has both kinds");
        println!("{} on {:?}", kind.as_str(), sc.site);
        let fork = |confidence, gate| {
            let opts = EpisodeOptions { classifier: ClassifierChoice::Oracle { confidence }, gate, ..Default::default() };
            run_episode(&engine, sc, &opts).map(|e| e.summary)
        };
        let zero_g = fork(0.9, Gate::ZeroG)?;
        // confidence 0.9 in the truth, or 0.1, which predicts the other class
        for (name, confidence) in [("true-class reaction", 0.9), ("wrong-class reaction", 0.1)] {
            let s = fork(confidence, Gate::Optimal)?;
            let label = label_outcome(&s, Some(&zero_g), DFCR_MARGIN)?;
            println!(
                "  {name:<21} {:<17} pre {:>6.2} N  post {:>6.2} N  -> {}",
                s.mode.as_str(),
                s.pre_peak,
                s.post_peak,
                label.outcome.as_str()
            );
        }
        println!("  {:<21} {:<17} pre {:>6.2} N  post {:>6.2} N", "zero-g", zero_g.mode.as_str(), zero_g.pre_peak, zero_g.post_peak);
    }
    Ok(())
}
