//! Keyphrase extraction as BIO tagging: documents with keyphrase lists are
//! converted to tagged tokens, a worker trains and tests a model, and the
//! stored report gives keyphrase F1.
//!
//! Run with `cargo run --example keyphrase_pipeline`.

use std::sync::Arc;
use std::time::Duration;

use nluforge::artifacts::{load_report, save_corpus};
use nluforge::convert::{self, DatasetFormat};
use nluforge::ir::Split;
use nluforge::models::Hyperparams;
use nluforge::store::FsStore;
use nluforge::worker::{JobSpec, Worker};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let store = Arc::new(FsStore::open(dir.path())?);
    let bytes = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/keyphrases.jsonl"))?;
    let (mut corpus, report) = convert::import(DatasetFormat::Keyphrase, &bytes, "kp", "Keyphrases")?;
    println!("{} documents, {} conversion issues", report.utterances_out, report.issues.len());
    let doc = corpus.split(Split::Train).next().unwrap();
    let tags = doc.bio()?;
    let tagged: Vec<String> = doc.tokens.iter().zip(&tags).map(|(t, l)| format!("{}/{l}", t.text)).collect();
    println!("{}: {}", doc.id, tagged.join(" "));
    save_corpus(store.as_ref(), &mut corpus, None)?;

    let worker = Worker::new("w1", 1, store.clone());
    worker.accept(JobSpec::train("kp-train", "kp", Hyperparams::default()))?;
    let trained = worker.wait("kp-train", Duration::from_secs(60)).expect("train finished");
    let model = trained.model.expect("model stored");
    println!("trained model {} version {}", model.key, model.version);

    worker.accept(JobSpec::test("kp-test", "kp", "kp", model.version))?;
    worker.wait("kp-test", Duration::from_secs(60)).expect("test finished");
    let bundle = load_report(store.as_ref(), "kp-test", None)?;
    let r = &bundle.report;
    println!(
        "keyphrase P {:.3} R {:.3} F1 {:.3} over {} test documents",
        r.slot_precision, r.slot_recall, r.slot_f1, r.n_utterances
    );
    Ok(())
}
