//! Reduced end-to-end run: dataset, classifier, held-out evaluation with both
//! gate forks, then outcome shares over the p_th grid and the trend checks.
//!
//! cargo run --release --example threshold_sweep [rounds]

use rrr_contact::cli;
use rrr_contact::config::ExperimentConfig;
use rrr_contact::evaluation::{self, DFCR_MARGIN};

fn main() -> rrr_contact::error::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.target_rows = 20_000;
    cfg.training.widths = vec![16];
    cfg.evaluation.rounds = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);

    let ds = cli::generate_dataset(&cfg)?;
    let (model, meta, _, _) = cli::train_model(&cfg, ds.rows)?;
    let ev = cli::run_evaluation(&cfg, &model, &meta)?;
    let grid = evaluation::sweep_grid();
    let rows = evaluation::threshold_sweep(&ev.episodes, &grid, DFCR_MARGIN)?;

    print!("{}", evaluation::summary_text(&ev, &rows, &grid));
    println!("\nSFR share by threshold");
    print!("{:>6}", "p_th");
    for f in evaluation::Family::ALL {
        print!(" {:>17}", f.as_str());
    }
    println!();
    for p in &grid {
        print!("{p:>6.2}");
        for r in rows.iter().filter(|r| r.p_th == *p) {
            print!(" {:>17.3}", r.sfr);
        }
        println!();
    }
    println!();
    for c in evaluation::trend_checks(&rows, &grid, cfg.evaluation.min_misclassified) {
        println!("{:?}: {} ({})", c.verdict, c.name, c.detail);
    }
    Ok(())
}
