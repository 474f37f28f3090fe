//! Imports a CoNLL file, inspects the conversion report and re-exports the
//! corpus as intent JSON and the native IR.
//!
//! Run with `cargo run --example convert_formats [FILE.conll]`.

use nluforge::convert::{self, DatasetFormat};
use nluforge::ir::Split;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/confusable.conll").to_string());
    let bytes = std::fs::read(&path)?;
    let (corpus, report) = convert::import(DatasetFormat::Conll, &bytes, "demo", "Demo")?;
    println!(
        "{path}: {} blocks in, {} utterances out, {} dropped, {} issues",
        report.utterances_in,
        report.utterances_out,
        report.dropped.len(),
        report.issues.len()
    );
    for split in [Split::Train, Split::Dev, Split::Test] {
        println!("  {split}: {}", corpus.split(split).count());
    }
    println!("intents: {:?}", corpus.intents);
    println!("slot types: {:?}", corpus.slot_types);

    for format in [DatasetFormat::IntentJson, DatasetFormat::Ir, DatasetFormat::Conll] {
        let out = convert::export(format, &corpus);
        let first = String::from_utf8_lossy(&out).lines().next().unwrap_or("").chars().take(100).collect::<String>();
        println!("{} ({} bytes): {first}", format.as_str(), out.len());
        let (back, _) = convert::import(format, &out, "demo", "Demo")?;
        assert_eq!(back.utterances.len(), corpus.utterances.len());
    }
    Ok(())
}
