//! Versioned storage: every put creates a new immutable version, old
//! versions stay readable, and conditional puts catch stale writers.
//!
//! Run with `cargo run --example artifact_store`.

use nluforge::artifacts::{load_corpus, save_corpus};
use nluforge::ir::{edit_utterance, Corpus, Utterance, UtterancePatch};
use nluforge::store::{FsStore, Namespace, ObjectKey, ObjectStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let store = FsStore::open(dir.path())?;

    let key = ObjectKey::model("notes")?;
    let v1 = store.put(&key, b"first")?;
    let v2 = store.put(&key, b"second")?;
    println!("{key}: {v1} then {v2}");
    println!("  v1 = {:?}", String::from_utf8(store.get(&key, Some(&v1))?)?);
    println!("  latest = {:?}", String::from_utf8(store.get(&key, None)?)?);
    match store.put_expecting(&key, b"third", v1.counter()) {
        Err(e) => println!("  stale write refused: {e}"),
        Ok(v) => println!("  unexpected write {v}"),
    }

    // Datasets use the same mechanism: each edit saves a new version.
    let mut corpus = Corpus::new("shop", "Shop");
    corpus.push(Utterance::from_text("u1", "add two apples").with_intent("add_item"));
    save_corpus(&store, &mut corpus, None)?;
    let v_before = corpus.version;
    let patch = UtterancePatch {
        text: Some("add three apples".into()),
        ..UtterancePatch::default()
    };
    let mut edited = edit_utterance(&corpus, "u1", &patch, v_before)?;
    save_corpus(&store, &mut edited, Some(v_before))?;
    let old = load_corpus(&store, "shop", Some(v_before))?;
    let new = load_corpus(&store, "shop", None)?;
    println!("dataset v{}: {:?}", old.version, old.utterances[0].text);
    println!("dataset v{}: {:?}", new.version, new.utterances[0].text);

    for ns in Namespace::ALL {
        for key in store.list_keys(ns)? {
            println!("{key}: {} version(s)", store.list_versions(&key)?.len());
        }
    }
    Ok(())
}
