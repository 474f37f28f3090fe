//! Trains a joint intent and slot model in memory and scores it on the dev
//! split.
//!
//! Run with `cargo run --example train_joint`.

use nluforge::convert::{self, DatasetFormat};
use nluforge::ir::{tokenize, Split};
use nluforge::models::{evaluate_split, predict_joint, train_joint, Hyperparams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bytes = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/toy_separable.conll"))?;
    let (corpus, _) = convert::import(DatasetFormat::Conll, &bytes, "toy", "Toy")?;
    let hyper = Hyperparams {
        epochs: 10,
        ..Hyperparams::default()
    };
    let model = train_joint(&corpus, &hyper)?;
    println!("model {}", model.model_version);

    for split in [Split::Train, Split::Dev] {
        let r = evaluate_split(&model, &corpus, split)?;
        println!(
            "{split}: intent accuracy {:.3}, slot P {:.3} R {:.3} F1 {:.3}",
            r.intent_accuracy.unwrap_or(f64::NAN),
            r.slot_precision,
            r.slot_recall,
            r.slot_f1
        );
    }

    let utt = corpus.split(Split::Dev).next().expect("dev split");
    let text: Vec<&str> = utt.token_texts();
    let tokens = tokenize(&text.join(" "));
    let (intent, tags) = predict_joint(&model, &tokens);
    let tagged: Vec<String> = tokens.iter().zip(&tags).map(|(t, l)| format!("{}/{l}", t.text)).collect();
    println!("{:?} -> {}", intent, tagged.join(" "));
    Ok(())
}
