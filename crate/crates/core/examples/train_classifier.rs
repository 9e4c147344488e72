//! Generates a reduced dataset, fits the classifier on two joint
//! configurations with a small grid and scores it on the third.
//!
//! cargo run --release --example train_classifier

use rrr_contact::classifier::ContactClassifier;
use rrr_contact::cli;
use rrr_contact::config::ExperimentConfig;
use rrr_contact::dataset::Dataset;

fn main() -> rrr_contact::error::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.target_rows = 20_000;
    cfg.training.widths = vec![8, 16];
    cfg.training.epochs = 60;

    let ds = cli::generate_dataset(&cfg)?;
    println!("{} rows from {} episodes, configurations {:?}", ds.rows.len(), ds.episodes, ds.config_ids());
    let test = Dataset { rows: ds.rows.clone(), ..Default::default() }.labeled(&[cfg.evaluation.held_out_config]);

    let (model, meta, grid, log) = cli::train_model(&cfg, ds.rows)?;
    for s in &grid.scores {
        println!("  hidden {:?} lambda {:e}: validation accuracy {:.4}", s.cell.hidden, s.cell.lambda, s.val_accuracy);
    }
    let best = grid.best_cell();
    println!("selected {:?} / {:e}, refit for {} epochs on configurations {:?}", best.cell.hidden, best.cell.lambda, log.best_epoch, meta.train_configs);
    let (loss, acc) = model.loss(&test, 0.0)?;
    println!("held-out configuration {}: accuracy {acc:.4}, cross-entropy {loss:.4}", cfg.evaluation.held_out_config);
    let p = model.probabilities(&nalgebra::Vector3::new(12.0, -3.0, 0.4))?;
    println!("p(collision, clamping) for a 12 N push: {p:.3?}");
    Ok(())
}
