//! Tokenization, BIO tags and span conversion on a single utterance.
//!
//! Run with `cargo run --example ir_basics`.

use nluforge::ir::{
    bio_from_spans, is_valid_bio, repair_bio, spans_from_bio, validate_bio, validate_corpus, BioLabel, Corpus, SlotSpan, Split, Utterance,
};

fn main() {
    let utt = Utterance::from_text("u1", "Make the sky 20% bluer, please!")
        .with_intent("adjust_color")
        .with_slots(vec![SlotSpan::new(2, 3, "object"), SlotSpan::new(3, 5, "amount")])
        .with_split(Split::Train);

    println!("tokens:");
    for t in &utt.tokens {
        println!("  {:>2}..{:<2} {:?}", t.char_start, t.char_end, t.text);
    }
    let tags = utt.bio().expect("spans fit the tokens");
    let rendered: Vec<String> = utt.tokens.iter().zip(&tags).map(|(t, l)| format!("{}/{l}", t.text)).collect();
    println!("BIO: {}", rendered.join(" "));
    assert_eq!(spans_from_bio(&tags).unwrap(), utt.slots);
    assert_eq!(bio_from_spans(utt.tokens.len(), &utt.slots).unwrap(), tags);

    // An I- tag that continues nothing is invalid; repair turns it into B-.
    let broken = vec![BioLabel::O, BioLabel::I("object".into()), BioLabel::I("object".into())];
    for issue in validate_bio(&broken) {
        println!("issue: {issue:?}");
    }
    let fixed = repair_bio(&broken);
    assert!(is_valid_bio(&fixed));
    println!("repaired: {}", fixed.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" "));

    let mut corpus = Corpus::new("demo", "Demo");
    corpus.push(utt.clone());
    corpus.push(utt);
    for issue in validate_corpus(&corpus) {
        println!("corpus issue: {issue:?}");
    }
    println!("IR line: {}", String::from_utf8(corpus.to_ir_bytes()).unwrap().lines().next().unwrap());
}
