//! Builds intent and token-label confusion matrices for a model that learned
//! a mislabeled verb, then drills into the off-diagonal cell to find the
//! utterances behind it.
//!
//! Run with `cargo run --example confusion_drilldown`.

use nluforge::convert::{self, DatasetFormat};
use nluforge::eval::{ConfusionMatrix, MatrixLevel};
use nluforge::ir::Split;
use nluforge::models::{predict_split, train_joint, Hyperparams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bytes = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/confusable.conll"))?;
    let (corpus, _) = convert::import(DatasetFormat::Conll, &bytes, "ed", "Edits")?;
    let model = train_joint(&corpus, &Hyperparams::default())?;
    let preds = predict_split(&model, &corpus, Split::Test);

    for level in [MatrixLevel::Intent, MatrixLevel::TokenLabel] {
        let m = ConfusionMatrix::build(corpus.split(Split::Test), &preds, level)?;
        println!("{} matrix: {} of {} on the diagonal", level.as_str(), m.trace(), m.total());
        for gold in &m.labels {
            for pred in &m.labels {
                let n = m.count(gold, pred);
                if gold == pred || n == 0 {
                    continue;
                }
                println!("  {gold} -> {pred}: {n}");
                for item in m.drill_down(gold, pred)? {
                    println!("      {} {}", item.utterance_id, item.rendered_text);
                }
            }
        }
    }
    Ok(())
}
