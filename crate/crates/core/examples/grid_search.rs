//! Sweeps a small hyperparameter grid and prints the leaderboard.
//!
//! Run with `cargo run --example grid_search`.

use nluforge::convert::{self, DatasetFormat};
use nluforge::models::{grid_search, Grid, Hyperparams, Metric};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bytes = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/confusable.conll"))?;
    let (corpus, _) = convert::import(DatasetFormat::Conll, &bytes, "ed", "Edits")?;
    let grid = Grid {
        epochs: vec![1, 3, 8],
        feature_window: vec![0, 1],
        ..Grid::default()
    };
    let result = grid_search(&corpus, &grid, Metric::SlotF1, &Hyperparams::default())?;
    println!("{:>6} {:>6} {:>9} {:>8}", "epochs", "window", "intent", "slot F1");
    for e in &result.leaderboard {
        println!(
            "{:>6} {:>6} {:>9.3} {:>8.3}",
            e.hyper.epochs,
            e.hyper.feature_window,
            e.intent_accuracy.unwrap_or(f64::NAN),
            e.slot_f1
        );
    }
    println!(
        "best by {}: epochs={} window={}",
        result.metric.as_str(),
        result.best.epochs,
        result.best.feature_window
    );
    Ok(())
}
