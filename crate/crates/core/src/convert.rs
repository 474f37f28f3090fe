//! Converters between external dataset formats and the IR.
//!
//! Importers are total: records that cannot be represented are dropped and
//! listed in the [`ConversionReport`] instead of aborting the import. Only
//! input that cannot be read at all (bad UTF-8, non-JSON) is fatal.
//!
//! # CoNLL
//!
//! ```text
//! file    := block ("\n" blank-line+ block)*
//! block   := comment* line+
//! comment := "# " key " = " value      (key: intent | split | id; no tab)
//! line    := token "\t" tag            (tag: O | B-<type> | I-<type>)
//! ```
//!
//! Export writes `# id = ` when the id differs from the positional default
//! `u<index:05>`, `# intent = ` when the utterance has an intent and
//! `# split = ` when the split is not `train`. Blocks are separated by one
//! blank line and the file ends with a newline.
//!
//! # Intent JSON
//!
//! A JSON array of `{"text", "intent", "entities": [{"start", "end", "label"}]}`
//! where entity offsets are character offsets into `text`. Entities must line
//! up with token boundaries produced by [`tokenize`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{
    repair_bio, spans_from_bio, tokenize, validate_bio, BioLabel, Corpus, IssueCode,
    SlotSpan, Split, Token, Utterance, ValidationIssue,
};

/// Slot type used for keyphrase spans.
pub const KEYPHRASE_LABEL: &str = "KP";

#[derive(Debug, Error)]
pub enum ConvertError {
    #[error("input is not valid UTF-8: {0}")]
    Utf8(#[from] std::str::Utf8Error),
    #[error("input is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("expected {0}")]
    Shape(&'static str),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DroppedRecord {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub utterances_in: usize,
    pub utterances_out: usize,
    pub dropped: Vec<DroppedRecord>,
    pub issues: Vec<ValidationIssue>,
}

impl ConversionReport {
    fn drop(&mut self, id: impl Into<String>, reason: impl Into<String>) {
        let id = id.into();
        let reason = reason.into();
        self.issues.push(
            ValidationIssue::warning(IssueCode::Dropped, format!("dropped: {reason}")).for_utterance(id.clone()),
        );
        self.dropped.push(DroppedRecord { id, reason });
    }
}

/// Supported on-the-wire dataset formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    Conll,
    IntentJson,
    Ir,
    Keyphrase,
}

impl DatasetFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetFormat::Conll => "conll",
            DatasetFormat::IntentJson => "intent-json",
            DatasetFormat::Ir => "ir",
            DatasetFormat::Keyphrase => "keyphrase",
        }
    }
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conll" => Ok(DatasetFormat::Conll),
            "intent-json" | "intent_json" | "json" => Ok(DatasetFormat::IntentJson),
            "ir" | "jsonl" => Ok(DatasetFormat::Ir),
            "keyphrase" | "keyphrases" => Ok(DatasetFormat::Keyphrase),
            other => Err(format!("unknown dataset format {other:?}")),
        }
    }
}

/// Builds an utterance whose text is the tokens joined by single spaces.
fn utterance_from_tokens(id: String, words: &[&str]) -> Utterance {
    let mut text = String::new();
    let mut tokens = Vec::with_capacity(words.len());
    let mut offset = 0;
    for (k, w) in words.iter().enumerate() {
        if k > 0 {
            text.push(' ');
            offset += 1;
        }
        let len = w.chars().count();
        tokens.push(Token::new(*w, offset, offset + len));
        text.push_str(w);
        offset += len;
    }
    Utterance {
        id,
        text,
        tokens,
        intent: None,
        slots: Vec::new(),
        split: Split::Train,
        meta: BTreeMap::new(),
    }
}

fn default_id(index: usize) -> String {
    format!("u{index:05}")
}

pub fn import_conll(bytes: &[u8]) -> Result<(Corpus, ConversionReport), ConvertError> {
    let text = std::str::from_utf8(bytes)?;
    let mut corpus = Corpus::new("conll", "");
    let mut report = ConversionReport::default();

    let mut blocks: Vec<Vec<&str>> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                blocks.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        blocks.push(current);
    }

    for (index, block) in blocks.into_iter().enumerate() {
        report.utterances_in += 1;
        let mut id = default_id(index);
        let mut intent = None;
        let mut split = Split::Train;
        let mut words: Vec<&str> = Vec::new();
        let mut tags: Vec<BioLabel> = Vec::new();
        let mut failure: Option<String> = None;
        for (lineno, line) in block.iter().enumerate() {
            // Token lines always hold a tab, so a `#` token is not a comment.
            if let Some(comment) = line.strip_prefix('#').filter(|_| !line.contains('\t')) {
                if let Some((key, value)) = comment.split_once('=') {
                    let value = value.trim();
                    match key.trim() {
                        "intent" if !value.is_empty() => intent = Some(value.to_string()),
                        "id" if !value.is_empty() => id = value.to_string(),
                        "split" => match value.parse() {
                            Ok(s) => split = s,
                            Err(e) => failure = Some(e),
                        },
                        _ => {}
                    }
                }
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 2 || cols[0].is_empty() {
                failure = Some(format!(
                    "line {} of block has {} column(s), expected token<TAB>tag",
                    lineno + 1,
                    cols.len()
                ));
                break;
            }
            match cols[1].trim().parse::<BioLabel>() {
                Ok(tag) => {
                    words.push(cols[0]);
                    tags.push(tag);
                }
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        if failure.is_none() && words.is_empty() {
            failure = Some("block has no token lines".into());
        }
        if let Some(reason) = failure {
            report.drop(id, reason);
            continue;
        }
        if !validate_bio(&tags).is_empty() {
            tags = repair_bio(&tags);
            report.issues.push(
                ValidationIssue::warning(IssueCode::BioRepaired, "invalid BIO tags were repaired")
                    .for_utterance(id.clone()),
            );
        }
        let mut utt = utterance_from_tokens(id, &words);
        utt.intent = intent;
        utt.split = split;
        utt.slots = spans_from_bio(&tags).expect("tags repaired above");
        corpus.push(utt);
        report.utterances_out += 1;
    }
    Ok((corpus, report))
}

pub fn export_conll(corpus: &Corpus) -> Vec<u8> {
    let mut blocks = Vec::with_capacity(corpus.utterances.len());
    for (index, utt) in corpus.utterances.iter().enumerate() {
        let mut block = String::new();
        if utt.id != default_id(index) {
            block.push_str(&format!("# id = {}\n", utt.id));
        }
        if let Some(intent) = &utt.intent {
            block.push_str(&format!("# intent = {intent}\n"));
        }
        if utt.split != Split::Train {
            block.push_str(&format!("# split = {}\n", utt.split));
        }
        let tags = utt.bio().expect("exported corpus must be valid");
        let lines: Vec<String> = utt
            .tokens
            .iter()
            .zip(&tags)
            .map(|(tok, tag)| format!("{}\t{}", tok.text, tag))
            .collect();
        block.push_str(&lines.join("\n"));
        blocks.push(block);
    }
    if blocks.is_empty() {
        return Vec::new();
    }
    let mut out = blocks.join("\n\n");
    out.push('\n');
    out.into_bytes()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentJsonEntity {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentJsonRecord {
    pub text: String,
    pub intent: Option<String>,
    #[serde(default)]
    pub entities: Vec<IntentJsonEntity>,
}

pub fn import_intent_json(bytes: &[u8]) -> Result<(Corpus, ConversionReport), ConvertError> {
    let text = std::str::from_utf8(bytes)?;
    let value: serde_json::Value = serde_json::from_str(text)?;
    let serde_json::Value::Array(items) = value else {
        return Err(ConvertError::Shape("a JSON array of records"));
    };
    let mut corpus = Corpus::new("intent-json", "");
    let mut report = ConversionReport::default();
    for (index, item) in items.into_iter().enumerate() {
        report.utterances_in += 1;
        let id = default_id(index);
        let record: IntentJsonRecord = match serde_json::from_value(item) {
            Ok(r) => r,
            Err(e) => {
                report.drop(id, format!("malformed record: {e}"));
                continue;
            }
        };
        let mut utt = Utterance::from_text(id.clone(), record.text);
        utt.intent = record.intent.filter(|i| !i.is_empty());
        let mut entities = record.entities;
        entities.sort_by_key(|e| (e.start, e.end));
        for ent in entities {
            let start = utt.tokens.iter().position(|t| t.char_start == ent.start);
            let end = utt.tokens.iter().position(|t| t.char_end == ent.end);
            let span = match (start, end) {
                (Some(s), Some(e)) if s <= e => SlotSpan::new(s, e + 1, ent.label.clone()),
                _ => {
                    report.issues.push(
                        ValidationIssue::warning(
                            IssueCode::Dropped,
                            format!(
                                "entity [{}, {}) {:?} is not aligned to token boundaries",
                                ent.start, ent.end, ent.label
                            ),
                        )
                        .for_utterance(id.clone()),
                    );
                    continue;
                }
            };
            if utt.slots.last().is_some_and(|prev| prev.end > span.start) {
                report.issues.push(
                    ValidationIssue::warning(
                        IssueCode::Dropped,
                        format!("entity [{}, {}) overlaps an earlier entity", ent.start, ent.end),
                    )
                    .for_utterance(id.clone()),
                );
                continue;
            }
            utt.slots.push(span);
        }
        corpus.push(utt);
        report.utterances_out += 1;
    }
    Ok((corpus, report))
}

pub fn export_intent_json(corpus: &Corpus) -> Vec<u8> {
    let records: Vec<IntentJsonRecord> = corpus
        .utterances
        .iter()
        .map(|utt| IntentJsonRecord {
            text: utt.text.clone(),
            intent: utt.intent.clone(),
            entities: utt
                .slots
                .iter()
                .map(|s| IntentJsonEntity {
                    start: utt.tokens[s.start].char_start,
                    end: utt.tokens[s.end - 1].char_end,
                    label: s.label.clone(),
                })
                .collect(),
        })
        .collect();
    let mut out = serde_json::to_vec_pretty(&records).expect("records serialize");
    out.push(b'\n');
    out
}

// ---------------------------------------------------------------------------
// Keyphrases

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyphraseDocument {
    pub id: String,
    pub text: String,
    pub keyphrases: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl KeyphraseDocument {
    /// Drops empty keyphrases and case-folded duplicates, keeping the first
    /// spelling seen.
    pub fn new(id: impl Into<String>, text: impl Into<String>, keyphrases: impl IntoIterator<Item = impl Into<String>>) -> Self {
        let mut seen = BTreeSet::new();
        let keyphrases = keyphrases
            .into_iter()
            .map(Into::into)
            .filter(|k: &String| !k.trim().is_empty() && seen.insert(k.to_lowercase()))
            .collect();
        KeyphraseDocument {
            id: id.into(),
            text: text.into(),
            keyphrases,
            split: None,
        }
    }
}

/// Labels every case-insensitive, token-aligned occurrence of each keyphrase.
///
/// Candidate matches are accepted longest first, then leftmost, skipping any
/// that overlap an accepted match. Keyphrases that end up with no span are
/// listed (as a JSON array) under the `unmatched` meta key.
pub fn keyphrases_to_bio(doc: &KeyphraseDocument) -> Utterance {
    let mut utt = Utterance::from_text(doc.id.clone(), doc.text.clone());
    utt.split = doc.split.unwrap_or(Split::Train);
    let folded: Vec<String> = utt.tokens.iter().map(|t| t.text.to_lowercase()).collect();

    // (length, start, keyphrase index)
    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for (k, phrase) in doc.keyphrases.iter().enumerate() {
        let needle: Vec<String> = tokenize(phrase).into_iter().map(|t| t.text.to_lowercase()).collect();
        if needle.is_empty() || needle.len() > folded.len() {
            continue;
        }
        for start in 0..=folded.len() - needle.len() {
            if folded[start..start + needle.len()] == needle[..] {
                candidates.push((needle.len(), start, k));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut taken = vec![false; folded.len()];
    let mut matched = vec![false; doc.keyphrases.len()];
    let mut spans = Vec::new();
    for (len, start, k) in candidates {
        if taken[start..start + len].iter().any(|&t| t) {
            continue;
        }
        taken[start..start + len].iter_mut().for_each(|t| *t = true);
        matched[k] = true;
        spans.push(SlotSpan::new(start, start + len, KEYPHRASE_LABEL));
    }
    spans.sort();
    utt.slots = spans;

    let unmatched: Vec<&String> = doc
        .keyphrases
        .iter()
        .zip(&matched)
        .filter(|(_, &m)| !m)
        .map(|(k, _)| k)
        .collect();
    if !unmatched.is_empty() {
        utt.meta.insert(
            "unmatched".into(),
            serde_json::to_string(&unmatched).expect("strings serialize"),
        );
    }
    utt
}

/// Builds a keyphrase corpus. Documents without an explicit split go to
/// `train`.
pub fn keyphrase_corpus(id: &str, name: &str, docs: &[KeyphraseDocument]) -> Corpus {
    let mut corpus = Corpus::new(id, name);
    corpus.slot_types.insert(KEYPHRASE_LABEL.to_string());
    for doc in docs {
        corpus.push(keyphrases_to_bio(doc));
    }
    corpus
}

/// Reads keyphrase documents, one JSON object per line.
pub fn import_keyphrase_jsonl(bytes: &[u8]) -> Result<(Corpus, ConversionReport), ConvertError> {
    let text = std::str::from_utf8(bytes)?;
    let mut report = ConversionReport::default();
    let mut docs = Vec::new();
    for (index, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        report.utterances_in += 1;
        match serde_json::from_str::<KeyphraseDocument>(line) {
            Ok(doc) if !doc.text.trim().is_empty() => {
                let mut clean = KeyphraseDocument::new(doc.id, doc.text, doc.keyphrases);
                clean.split = doc.split;
                docs.push(clean);
            }
            Ok(doc) => report.drop(doc.id, "document text is empty"),
            Err(e) => report.drop(default_id(index), format!("malformed document: {e}")),
        }
    }
    report.utterances_out = docs.len();
    Ok((keyphrase_corpus("keyphrase", "", &docs), report))
}

/// Imports any supported format into a corpus with the given id and name.
pub fn import(format: DatasetFormat, bytes: &[u8], id: &str, name: &str) -> Result<(Corpus, ConversionReport), ConvertError> {
    let (mut corpus, report) = match format {
        DatasetFormat::Conll => import_conll(bytes)?,
        DatasetFormat::IntentJson => import_intent_json(bytes)?,
        DatasetFormat::Keyphrase => import_keyphrase_jsonl(bytes)?,
        DatasetFormat::Ir => {
            let corpus = Corpus::from_ir_bytes(bytes).map_err(|_| ConvertError::Shape("an IR JSON Lines file"))?;
            let n = corpus.utterances.len();
            let report = ConversionReport {
                utterances_in: n,
                utterances_out: n,
                ..Default::default()
            };
            (corpus, report)
        }
    };
    corpus.id = id.to_string();
    corpus.name = name.to_string();
    Ok((corpus, report))
}

pub fn export(format: DatasetFormat, corpus: &Corpus) -> Vec<u8> {
    match format {
        DatasetFormat::Conll => export_conll(corpus),
        DatasetFormat::IntentJson => export_intent_json(corpus),
        DatasetFormat::Ir => corpus.to_ir_bytes(),
        DatasetFormat::Keyphrase => {
            let mut out = Vec::new();
            for utt in &corpus.utterances {
                let doc = KeyphraseDocument {
                    id: utt.id.clone(),
                    text: utt.text.clone(),
                    keyphrases: utt
                        .slots
                        .iter()
                        .map(|s| utt.token_texts()[s.start..s.end].join(" "))
                        .collect(),
                    split: Some(utt.split),
                };
                serde_json::to_writer(&mut out, &doc).expect("documents serialize");
                out.push(b'\n');
            }
            out
        }
    }
}
