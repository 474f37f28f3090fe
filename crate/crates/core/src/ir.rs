//! Dataset intermediate representation.
//!
//! Every importer produces a [`Corpus`] and every exporter consumes one. An
//! utterance carries its raw text, a token list with character offsets, at
//! most one intent and a sorted list of non-overlapping token-index slot
//! spans. BIO tag sequences are a derived view over the spans.
//!
//! Character offsets count Unicode scalar values, not bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version tag written into the manifest line of IR files.
pub const IR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IrError {
    #[error("invalid BIO sequence: {0}")]
    InvalidBio(String),
    #[error("invalid span list: {0}")]
    InvalidSpans(String),
    #[error("unknown utterance id {0:?}")]
    UnknownUtterance(String),
    #[error("utterance id {0:?} already exists")]
    DuplicateUtterance(String),
    #[error("version conflict: expected {expected}, corpus is at {actual}")]
    VersionConflict { expected: u64, actual: u64 },
    #[error("edit rejected with {} validation error(s)", .0.len())]
    Rejected(Vec<ValidationIssue>),
    #[error("malformed IR file at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("unknown BIO tag {0:?}")]
    BadTag(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    #[serde(rename = "start")]
    pub char_start: usize,
    #[serde(rename = "end")]
    pub char_end: usize,
}

impl Token {
    pub fn new(text: impl Into<String>, char_start: usize, char_end: usize) -> Self {
        Token {
            text: text.into(),
            char_start,
            char_end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl SlotSpan {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        SlotSpan {
            start,
            end,
            label: label.into(),
        }
    }
}

/// A single per-token tag in the BIO scheme.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum BioLabel {
    O,
    B(String),
    I(String),
}

impl BioLabel {
    pub fn slot_type(&self) -> Option<&str> {
        match self {
            BioLabel::O => None,
            BioLabel::B(t) | BioLabel::I(t) => Some(t),
        }
    }

    pub fn is_inside(&self) -> bool {
        matches!(self, BioLabel::I(_))
    }
}

impl fmt::Display for BioLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BioLabel::O => f.write_str("O"),
            BioLabel::B(t) => write!(f, "B-{t}"),
            BioLabel::I(t) => write!(f, "I-{t}"),
        }
    }
}

impl FromStr for BioLabel {
    type Err = IrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "O" {
            return Ok(BioLabel::O);
        }
        match s.split_once('-') {
            Some(("B", t)) if !t.is_empty() => Ok(BioLabel::B(t.to_string())),
            Some(("I", t)) if !t.is_empty() => Ok(BioLabel::I(t.to_string())),
            _ => Err(IrError::BadTag(s.to_string())),
        }
    }
}

impl Serialize for BioLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BioLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub tokens: Vec<Token>,
    pub intent: Option<String>,
    pub slots: Vec<SlotSpan>,
    pub split: Split,
    pub meta: BTreeMap<String, String>,
}

impl Utterance {
    /// Builds an utterance by tokenizing `text`, with no intent and no slots.
    pub fn from_text(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Utterance {
            id: id.into(),
            tokens: tokenize(&text),
            text,
            intent: None,
            slots: Vec::new(),
            split: Split::Train,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_intent(mut self, intent: impl Into<String>) -> Self {
        self.intent = Some(intent.into());
        self
    }

    pub fn with_slots(mut self, slots: Vec<SlotSpan>) -> Self {
        self.slots = slots;
        self
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// The BIO view of this utterance's spans.
    pub fn bio(&self) -> Result<Vec<BioLabel>, IrError> {
        bio_from_spans(self.tokens.len(), &self.slots)
    }

    pub fn token_texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub id: String,
    pub name: String,
    pub version: u64,
    pub intents: BTreeSet<String>,
    pub slot_types: BTreeSet<String>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn new(id: impl Into<String>, name: impl Into<String>) -> Self {
        Corpus {
            id: id.into(),
            name: name.into(),
            version: 1,
            intents: BTreeSet::new(),
            slot_types: BTreeSet::new(),
            utterances: Vec::new(),
        }
    }

    /// Appends an utterance and registers its intent and slot labels.
    pub fn push(&mut self, utt: Utterance) {
        if let Some(intent) = &utt.intent {
            self.intents.insert(intent.clone());
        }
        for span in &utt.slots {
            self.slot_types.insert(span.label.clone());
        }
        self.utterances.push(utt);
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    /// Writes the corpus as IR JSON Lines (manifest line first).
    pub fn write_ir<W: Write>(&self, mut out: W) -> Result<(), IrError> {
        let manifest = Manifest {
            ir_version: IR_VERSION,
            corpus_id: self.id.clone(),
            name: self.name.clone(),
            intents: self.intents.iter().cloned().collect(),
            slot_types: self.slot_types.iter().cloned().collect(),
        };
        serde_json::to_writer(&mut out, &manifest).map_err(std::io::Error::from)?;
        for utt in &self.utterances {
            out.write_all(b"\n")?;
            serde_json::to_writer(&mut out, utt).map_err(std::io::Error::from)?;
        }
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn to_ir_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_ir(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Parses IR JSON Lines. The returned corpus has version 1; callers that
    /// track versions (the artifact store) overwrite it.
    pub fn read_ir<R: BufRead>(input: R) -> Result<Corpus, IrError> {
        let mut lines = input.lines().enumerate();
        let manifest: Manifest = loop {
            match lines.next() {
                Some((i, line)) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line).map_err(|e| IrError::Format {
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                }
                None => {
                    return Err(IrError::Format {
                        line: 1,
                        message: "missing manifest line".into(),
                    })
                }
            }
        };
        if manifest.ir_version != IR_VERSION {
            return Err(IrError::Format {
                line: 1,
                message: format!("unsupported ir_version {}", manifest.ir_version),
            });
        }
        let mut corpus = Corpus::new(manifest.corpus_id, manifest.name);
        corpus.intents = manifest.intents.into_iter().collect();
        corpus.slot_types = manifest.slot_types.into_iter().collect();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let utt: Utterance = serde_json::from_str(&line).map_err(|e| IrError::Format {
                line: i + 1,
                message: e.to_string(),
            })?;
            corpus.utterances.push(utt);
        }
        Ok(corpus)
    }

    pub fn from_ir_bytes(bytes: &[u8]) -> Result<Corpus, IrError> {
        Corpus::read_ir(bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    ir_version: u32,
    corpus_id: String,
    name: String,
    intents: Vec<String>,
    slot_types: Vec<String>,
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

/// Machine-readable validation codes. The string forms are stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueCode {
    /// `I-x` at position 0 or after `O`.
    OrphanInside,
    /// `I-x` after `B-y`/`I-y` with `x != y`.
    TypeMismatchInside,
    /// A span with `start >= end` or `end` past the token count.
    SpanOutOfRange,
    /// Two spans share a token.
    SpanOverlap,
    /// Spans are not sorted by start.
    SpanUnsorted,
    /// Token text differs from the source slice, or offsets are inverted.
    TokenMismatch,
    /// Tokens overlap or go backwards.
    TokenOrder,
    UnknownIntent,
    UnknownSlotType,
    DuplicateId,
    /// Utterance has no intent in a corpus that declares intents.
    MissingIntent,
    /// A split that has no utterances.
    EmptySplit,
    /// Declared intents or slot types that no utterance uses.
    LabelSetMismatch,
    /// A converter repaired an invalid BIO block.
    BioRepaired,
    /// A converter dropped a record or an entity.
    Dropped,
}

impl IssueCode {
    pub fn as_str(self) -> &'static str {
        match self {
            IssueCode::OrphanInside => "orphan_inside",
            IssueCode::TypeMismatchInside => "type_mismatch_inside",
            IssueCode::SpanOutOfRange => "span_out_of_range",
            IssueCode::SpanOverlap => "span_overlap",
            IssueCode::SpanUnsorted => "span_unsorted",
            IssueCode::TokenMismatch => "token_mismatch",
            IssueCode::TokenOrder => "token_order",
            IssueCode::UnknownIntent => "unknown_intent",
            IssueCode::UnknownSlotType => "unknown_slot_type",
            IssueCode::DuplicateId => "duplicate_id",
            IssueCode::MissingIntent => "missing_intent",
            IssueCode::EmptySplit => "empty_split",
            IssueCode::LabelSetMismatch => "label_set_mismatch",
            IssueCode::BioRepaired => "bio_repaired",
            IssueCode::Dropped => "dropped",
        }
    }
}

impl fmt::Display for IssueCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub utterance_id: Option<String>,
    pub severity: Severity,
    pub code: IssueCode,
    pub message: String,
    /// Token position for BIO issues.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
}

impl ValidationIssue {
    pub fn error(code: IssueCode, message: impl Into<String>) -> Self {
        ValidationIssue {
            utterance_id: None,
            severity: Severity::Error,
            code,
            message: message.into(),
            position: None,
        }
    }

    pub fn warning(code: IssueCode, message: impl Into<String>) -> Self {
        ValidationIssue {
            severity: Severity::Warning,
            ..ValidationIssue::error(code, message)
        }
    }

    pub fn at(mut self, position: usize) -> Self {
        self.position = Some(position);
        self
    }

    pub fn for_utterance(mut self, id: impl Into<String>) -> Self {
        self.utterance_id = Some(id.into());
        self
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }
}

pub fn has_errors(issues: &[ValidationIssue]) -> bool {
    issues.iter().any(ValidationIssue::is_error)
}

// ---------------------------------------------------------------------------
// Tokenization

/// Splits on whitespace, then peels leading and trailing ASCII punctuation
/// off each chunk as single-character tokens. No case folding.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        split_chunk(&chars, start, i, &mut tokens);
    }
    tokens
}

fn split_chunk(chars: &[char], start: usize, end: usize, out: &mut Vec<Token>) {
    let mut lo = start;
    let mut hi = end;
    while lo < hi && chars[lo].is_ascii_punctuation() {
        lo += 1;
    }
    while hi > lo && chars[hi - 1].is_ascii_punctuation() {
        hi -= 1;
    }
    for (p, c) in chars.iter().enumerate().take(lo).skip(start) {
        out.push(Token::new(c.to_string(), p, p + 1));
    }
    if lo < hi {
        out.push(Token::new(chars[lo..hi].iter().collect::<String>(), lo, hi));
    }
    for (p, c) in chars.iter().enumerate().take(end).skip(hi) {
        out.push(Token::new(c.to_string(), p, p + 1));
    }
}

// ---------------------------------------------------------------------------
// BIO <-> spans

pub fn validate_bio(labels: &[BioLabel]) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    for (p, label) in labels.iter().enumerate() {
        let BioLabel::I(t) = label else { continue };
        match p.checked_sub(1).map(|q| &labels[q]) {
            None | Some(BioLabel::O) => issues.push(
                ValidationIssue::error(
                    IssueCode::OrphanInside,
                    format!("I-{t} at position {p} does not continue a span"),
                )
                .at(p),
            ),
            Some(BioLabel::B(prev)) | Some(BioLabel::I(prev)) if prev != t => issues.push(
                ValidationIssue::error(
                    IssueCode::TypeMismatchInside,
                    format!("I-{t} at position {p} continues a {prev} span"),
                )
                .at(p),
            ),
            _ => {}
        }
    }
    issues
}

pub fn is_valid_bio(labels: &[BioLabel]) -> bool {
    validate_bio(labels).is_empty()
}

/// Turns every orphan or type-mismatched `I-x` into `B-x`. Valid positions
/// are left untouched.
pub fn repair_bio(labels: &[BioLabel]) -> Vec<BioLabel> {
    let mut out: Vec<BioLabel> = Vec::with_capacity(labels.len());
    for label in labels {
        let fixed = match label {
            BioLabel::I(t) => match out.last().and_then(BioLabel::slot_type) {
                Some(prev) if prev == t => label.clone(),
                _ => BioLabel::B(t.clone()),
            },
            other => other.clone(),
        };
        out.push(fixed);
    }
    out
}

pub fn spans_from_bio(labels: &[BioLabel]) -> Result<Vec<SlotSpan>, IrError> {
    if let Some(issue) = validate_bio(labels).into_iter().next() {
        return Err(IrError::InvalidBio(issue.message));
    }
    let mut spans: Vec<SlotSpan> = Vec::new();
    for (p, label) in labels.iter().enumerate() {
        match label {
            BioLabel::O => {}
            BioLabel::B(t) => spans.push(SlotSpan::new(p, p + 1, t.clone())),
            BioLabel::I(_) => {
                spans.last_mut().expect("validated").end = p + 1;
            }
        }
    }
    Ok(spans)
}

fn span_issues(n_tokens: usize, spans: &[SlotSpan]) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    for (k, span) in spans.iter().enumerate() {
        if span.start >= span.end || span.end > n_tokens {
            issues.push(ValidationIssue::error(
                IssueCode::SpanOutOfRange,
                format!(
                    "span ({}, {}, {}) is out of range for {n_tokens} tokens",
                    span.start, span.end, span.label
                ),
            ));
        }
        if let Some(prev) = k.checked_sub(1).map(|j| &spans[j]) {
            if span.start < prev.start {
                issues.push(ValidationIssue::error(
                    IssueCode::SpanUnsorted,
                    format!("span starting at {} follows one starting at {}", span.start, prev.start),
                ));
            } else if span.start < prev.end {
                issues.push(ValidationIssue::error(
                    IssueCode::SpanOverlap,
                    format!(
                        "span ({}, {}) overlaps span ({}, {})",
                        span.start, span.end, prev.start, prev.end
                    ),
                ));
            }
        }
    }
    issues
}

pub fn bio_from_spans(n_tokens: usize, spans: &[SlotSpan]) -> Result<Vec<BioLabel>, IrError> {
    if let Some(issue) = span_issues(n_tokens, spans).into_iter().next() {
        return Err(IrError::InvalidSpans(issue.message));
    }
    let mut labels = vec![BioLabel::O; n_tokens];
    for span in spans {
        labels[span.start] = BioLabel::B(span.label.clone());
        for label in &mut labels[span.start + 1..span.end] {
            *label = BioLabel::I(span.label.clone());
        }
    }
    Ok(labels)
}

// ---------------------------------------------------------------------------
// Corpus validation

fn utterance_issues(corpus: &Corpus, utt: &Utterance) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    let chars: Vec<char> = utt.text.chars().collect();
    let mut cursor = 0;
    for (k, tok) in utt.tokens.iter().enumerate() {
        if tok.char_start >= tok.char_end || tok.char_end > chars.len() {
            issues.push(ValidationIssue::error(
                IssueCode::TokenMismatch,
                format!("token {k} has invalid offsets [{}, {})", tok.char_start, tok.char_end),
            ));
            continue;
        }
        if tok.char_start < cursor {
            issues.push(ValidationIssue::error(
                IssueCode::TokenOrder,
                format!("token {k} starts before the end of token {}", k.saturating_sub(1)),
            ));
        }
        let slice: String = chars[tok.char_start..tok.char_end].iter().collect();
        if slice != tok.text {
            issues.push(ValidationIssue::error(
                IssueCode::TokenMismatch,
                format!("token {k} text {:?} does not match source {:?}", tok.text, slice),
            ));
        }
        cursor = tok.char_end;
    }
    issues.extend(span_issues(utt.tokens.len(), &utt.slots));
    match &utt.intent {
        Some(intent) if !corpus.intents.contains(intent) => issues.push(ValidationIssue::error(
            IssueCode::UnknownIntent,
            format!("intent {intent:?} is not declared by the corpus"),
        )),
        None if !corpus.intents.is_empty() => issues.push(ValidationIssue::warning(
            IssueCode::MissingIntent,
            "utterance has no intent",
        )),
        _ => {}
    }
    for span in &utt.slots {
        if !corpus.slot_types.contains(&span.label) {
            issues.push(ValidationIssue::error(
                IssueCode::UnknownSlotType,
                format!("slot type {:?} is not declared by the corpus", span.label),
            ));
        }
    }
    issues
        .into_iter()
        .map(|i| i.for_utterance(utt.id.clone()))
        .collect()
}

pub fn validate_corpus(corpus: &Corpus) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    let mut seen = BTreeSet::new();
    for utt in &corpus.utterances {
        if !seen.insert(utt.id.as_str()) {
            issues.push(
                ValidationIssue::error(IssueCode::DuplicateId, format!("duplicate utterance id {:?}", utt.id))
                    .for_utterance(utt.id.clone()),
            );
        }
        issues.extend(utterance_issues(corpus, utt));
    }
    if !corpus.utterances.is_empty() {
        for split in Split::ALL {
            if corpus.split(split).next().is_none() {
                issues.push(ValidationIssue::warning(
                    IssueCode::EmptySplit,
                    format!("split {split} has no utterances"),
                ));
            }
        }
    }
    let used_intents: BTreeSet<&str> = corpus.utterances.iter().filter_map(|u| u.intent.as_deref()).collect();
    let used_slots: BTreeSet<&str> = corpus
        .utterances
        .iter()
        .flat_map(|u| u.slots.iter().map(|s| s.label.as_str()))
        .collect();
    let unused: Vec<&str> = corpus
        .intents
        .iter()
        .map(String::as_str)
        .filter(|i| !used_intents.contains(i))
        .chain(corpus.slot_types.iter().map(String::as_str).filter(|s| !used_slots.contains(s)))
        .collect();
    if !unused.is_empty() {
        issues.push(ValidationIssue::warning(
            IssueCode::LabelSetMismatch,
            format!("declared labels never used: {}", unused.join(", ")),
        ));
    }
    issues
}

// ---------------------------------------------------------------------------
// Editing

/// A partial utterance. `None` fields are left unchanged. Changing `text`
/// without supplying `tokens` re-tokenizes the new text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtterancePatch {
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub tokens: Option<Vec<Token>>,
    /// `Some(None)` clears the intent.
    #[serde(default, with = "double_option")]
    pub intent: Option<Option<String>>,
    #[serde(default)]
    pub slots: Option<Vec<SlotSpan>>,
    #[serde(default)]
    pub split: Option<Split>,
    #[serde(default)]
    pub meta: Option<BTreeMap<String, String>>,
}

mod double_option {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Option<String>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(inner) => inner.serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Option<String>>, D::Error> {
        Option::<String>::deserialize(d).map(Some)
    }
}

impl UtterancePatch {
    fn apply(&self, utt: &mut Utterance) {
        if let Some(text) = &self.text {
            utt.text = text.clone();
            if self.tokens.is_none() {
                utt.tokens = tokenize(text);
            }
        }
        if let Some(tokens) = &self.tokens {
            utt.tokens = tokens.clone();
        }
        if let Some(intent) = &self.intent {
            utt.intent = intent.clone();
        }
        if let Some(slots) = &self.slots {
            utt.slots = slots.clone();
        }
        if let Some(split) = self.split {
            utt.split = split;
        }
        if let Some(meta) = &self.meta {
            utt.meta = meta.clone();
        }
    }
}

fn check_version(corpus: &Corpus, expected_version: u64) -> Result<(), IrError> {
    if corpus.version != expected_version {
        return Err(IrError::VersionConflict {
            expected: expected_version,
            actual: corpus.version,
        });
    }
    Ok(())
}

fn commit(mut next: Corpus, touched: &str) -> Result<Corpus, IrError> {
    let errors: Vec<ValidationIssue> = validate_corpus(&next)
        .into_iter()
        .filter(|i| i.is_error() && i.utterance_id.as_deref() == Some(touched))
        .collect();
    if !errors.is_empty() {
        return Err(IrError::Rejected(errors));
    }
    next.version += 1;
    Ok(next)
}

/// Applies `patch` to one utterance and returns the next corpus version.
///
/// The input corpus is never modified. The edit is rejected when
/// `expected_version` is stale or when the patched utterance fails
/// validation.
pub fn edit_utterance(
    corpus: &Corpus,
    utterance_id: &str,
    patch: &UtterancePatch,
    expected_version: u64,
) -> Result<Corpus, IrError> {
    check_version(corpus, expected_version)?;
    let mut next = corpus.clone();
    let utt = next
        .utterances
        .iter_mut()
        .find(|u| u.id == utterance_id)
        .ok_or_else(|| IrError::UnknownUtterance(utterance_id.to_string()))?;
    patch.apply(utt);
    commit(next, utterance_id)
}

/// Appends a new utterance under the same concurrency and validation rules as
/// [`edit_utterance`].
pub fn add_utterance(corpus: &Corpus, utt: Utterance, expected_version: u64) -> Result<Corpus, IrError> {
    check_version(corpus, expected_version)?;
    if corpus.get(&utt.id).is_some() {
        return Err(IrError::DuplicateUtterance(utt.id));
    }
    let id = utt.id.clone();
    let mut next = corpus.clone();
    next.utterances.push(utt);
    commit(next, &id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(s: &str) -> Vec<BioLabel> {
        s.split_whitespace().map(|t| t.parse().unwrap()).collect()
    }

    fn toks(v: &[Token]) -> Vec<(&str, usize, usize)> {
        v.iter().map(|t| (t.text.as_str(), t.char_start, t.char_end)).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            toks(&tokenize("lighten the vegetables")),
            vec![("lighten", 0, 7), ("the", 8, 11), ("vegetables", 12, 22)]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(toks(&tokenize("color: red")), vec![("color", 0, 5), (":", 5, 6), ("red", 7, 10)]);
    }

    #[test]
    fn tokenize_punctuation_edges() {
        assert_eq!(
            toks(&tokenize("(hi!) state-of-the-art")),
            vec![("(", 0, 1), ("hi", 1, 3), ("!", 3, 4), (")", 4, 5), ("state-of-the-art", 6, 22)]
        );
        assert_eq!(toks(&tokenize(" ... ")), vec![(".", 1, 2), (".", 2, 3), (".", 3, 4)]);
        // offsets are in characters
        assert_eq!(toks(&tokenize("café noir")), vec![("café", 0, 4), ("noir", 5, 9)]);
        assert_eq!(toks(&tokenize("Make IT")), vec![("Make", 0, 4), ("IT", 5, 7)]);
    }

    #[test]
    fn validate_bio_examples() {
        assert!(validate_bio(&tags("O B-x I-x")).is_empty());
        let issues = validate_bio(&tags("O I-x"));
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].code, IssueCode::OrphanInside);
        assert_eq!(issues[0].position, Some(1));
        let issues = validate_bio(&tags("B-x I-y"));
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].code, IssueCode::TypeMismatchInside);
        assert_eq!(issues[0].code.as_str(), "type_mismatch_inside");
        assert_eq!(validate_bio(&tags("I-x I-y O I-z")).len(), 3);
    }

    #[test]
    fn repair_bio_examples() {
        assert_eq!(repair_bio(&tags("O I-x I-x")), tags("O B-x I-x"));
        assert_eq!(repair_bio(&tags("B-x I-x")), tags("B-x I-x"));
        assert_eq!(repair_bio(&tags("I-x O I-y")), tags("B-x O B-y"));
        assert_eq!(repair_bio(&tags("B-x I-y I-y")), tags("B-x B-y I-y"));
    }

    #[test]
    fn spans_from_bio_examples() {
        assert_eq!(
            spans_from_bio(&tags("B-adjust_brightness O O")).unwrap(),
            vec![SlotSpan::new(0, 1, "adjust_brightness")]
        );
        assert!(spans_from_bio(&tags("O O")).unwrap().is_empty());
        assert_eq!(
            spans_from_bio(&tags("B-x I-x B-x")).unwrap(),
            vec![SlotSpan::new(0, 2, "x"), SlotSpan::new(2, 3, "x")]
        );
        assert!(matches!(spans_from_bio(&tags("O I-x")), Err(IrError::InvalidBio(_))));
    }

    #[test]
    fn bio_from_spans_examples() {
        assert_eq!(bio_from_spans(3, &[SlotSpan::new(0, 1, "x")]).unwrap(), tags("B-x O O"));
        assert_eq!(bio_from_spans(2, &[]).unwrap(), tags("O O"));
        assert_eq!(bio_from_spans(4, &[SlotSpan::new(1, 3, "y")]).unwrap(), tags("O B-y I-y O"));
        assert!(bio_from_spans(2, &[SlotSpan::new(1, 3, "y")]).is_err());
        assert!(bio_from_spans(4, &[SlotSpan::new(0, 2, "y"), SlotSpan::new(1, 3, "z")]).is_err());
        assert!(bio_from_spans(4, &[SlotSpan::new(2, 2, "y")]).is_err());
    }

    #[test]
    fn bio_label_parse() {
        assert_eq!("B-adjust_color".parse::<BioLabel>().unwrap(), BioLabel::B("adjust_color".into()));
        assert_eq!("I-a-b".parse::<BioLabel>().unwrap(), BioLabel::I("a-b".into()));
        assert!("X-foo".parse::<BioLabel>().is_err());
        assert!("B-".parse::<BioLabel>().is_err());
        assert_eq!(BioLabel::I("kp".into()).to_string(), "I-kp");
    }

    fn two_utterance_corpus() -> Corpus {
        let mut c = Corpus::new("c1", "demo");
        c.push(
            Utterance::from_text("u1", "lighten the vegetables")
                .with_intent("adjust")
                .with_slots(vec![SlotSpan::new(0, 1, "adjust_color")]),
        );
        c.push(Utterance::from_text("u2", "crop the sky").with_intent("crop").with_split(Split::Dev));
        c.slot_types.insert("adjust_brightness".into());
        c
    }

    fn errors(issues: &[ValidationIssue]) -> Vec<IssueCode> {
        issues.iter().filter(|i| i.is_error()).map(|i| i.code).collect()
    }

    #[test]
    fn validate_corpus_examples() {
        let c = two_utterance_corpus();
        assert!(errors(&validate_corpus(&c)).is_empty());

        let mut bad = c.clone();
        bad.utterances[1].intent = Some("foo".into());
        assert_eq!(errors(&validate_corpus(&bad)), vec![IssueCode::UnknownIntent]);

        let mut dup = c.clone();
        dup.utterances[1].id = "u1".into();
        assert_eq!(errors(&validate_corpus(&dup)), vec![IssueCode::DuplicateId]);

        let warnings: Vec<IssueCode> = validate_corpus(&c).iter().map(|i| i.code).collect();
        assert!(warnings.contains(&IssueCode::EmptySplit));
        assert!(warnings.contains(&IssueCode::LabelSetMismatch));
    }

    #[test]
    fn validate_corpus_catches_token_and_span_problems() {
        let mut c = two_utterance_corpus();
        c.utterances[0].tokens[1].text = "a".into();
        c.utterances[0].slots = vec![SlotSpan::new(0, 2, "adjust_color"), SlotSpan::new(1, 3, "adjust_color")];
        c.utterances[1].slots = vec![SlotSpan::new(0, 1, "mystery")];
        let codes = errors(&validate_corpus(&c));
        assert!(codes.contains(&IssueCode::TokenMismatch));
        assert!(codes.contains(&IssueCode::SpanOverlap));
        assert!(codes.contains(&IssueCode::UnknownSlotType));
    }

    #[test]
    fn edit_relabels_span_and_bumps_version() {
        let c = two_utterance_corpus();
        let patch = UtterancePatch {
            slots: Some(vec![SlotSpan::new(0, 1, "adjust_brightness")]),
            ..Default::default()
        };
        let next = edit_utterance(&c, "u1", &patch, c.version).unwrap();
        assert_eq!(next.version, c.version + 1);
        assert_eq!(next.utterances[0].slots[0].label, "adjust_brightness");
        assert_eq!(next.utterances[1], c.utterances[1]);
    }

    #[test]
    fn empty_patch_is_identity_edit() {
        let c = two_utterance_corpus();
        let next = edit_utterance(&c, "u2", &UtterancePatch::default(), 1).unwrap();
        assert_eq!(next.version, 2);
        assert_eq!(next.utterances, c.utterances);
    }

    #[test]
    fn stale_edit_conflicts() {
        let c = two_utterance_corpus();
        let next = edit_utterance(&c, "u2", &UtterancePatch::default(), 1).unwrap();
        let err = edit_utterance(&next, "u2", &UtterancePatch::default(), 1).unwrap_err();
        assert!(matches!(err, IrError::VersionConflict { expected: 1, actual: 2 }));
    }

    #[test]
    fn invalid_edit_is_rejected_atomically() {
        let c = two_utterance_corpus();
        let before = c.clone();
        let patch = UtterancePatch {
            intent: Some(Some("nope".into())),
            ..Default::default()
        };
        assert!(matches!(edit_utterance(&c, "u1", &patch, 1), Err(IrError::Rejected(_))));
        let patch = UtterancePatch {
            text: Some("lighten".into()),
            slots: Some(vec![SlotSpan::new(0, 2, "adjust_color")]),
            ..Default::default()
        };
        assert!(matches!(edit_utterance(&c, "u1", &patch, 1), Err(IrError::Rejected(_))));
        assert!(matches!(
            edit_utterance(&c, "zz", &UtterancePatch::default(), 1),
            Err(IrError::UnknownUtterance(_))
        ));
        assert_eq!(c, before);
    }

    #[test]
    fn text_patch_retokenizes() {
        let c = two_utterance_corpus();
        let patch = UtterancePatch {
            text: Some("make the dirt darker".into()),
            slots: Some(vec![]),
            ..Default::default()
        };
        let next = edit_utterance(&c, "u1", &patch, 1).unwrap();
        assert_eq!(next.utterances[0].tokens.len(), 4);
    }

    #[test]
    fn add_utterance_checks_ids() {
        let c = two_utterance_corpus();
        let next = add_utterance(&c, Utterance::from_text("u3", "crop it").with_intent("crop"), 1).unwrap();
        assert_eq!(next.utterances.len(), 3);
        assert!(matches!(
            add_utterance(&next, Utterance::from_text("u3", "x"), 2),
            Err(IrError::DuplicateUtterance(_))
        ));
    }

    #[test]
    fn ir_file_layout_is_exact() {
        let mut c = Corpus::new("c1", "demo");
        c.push(
            Utterance::from_text("u1", "red hat")
                .with_intent("shop")
                .with_slots(vec![SlotSpan::new(0, 1, "color")]),
        );
        let text = String::from_utf8(c.to_ir_bytes()).unwrap();
        let expected = concat!(
            r#"{"ir_version":1,"corpus_id":"c1","name":"demo","intents":["shop"],"slot_types":["color"]}"#,
            "\n",
            r#"{"id":"u1","text":"red hat","tokens":[{"text":"red","start":0,"end":3},{"text":"hat","start":4,"end":7}],"intent":"shop","slots":[{"start":0,"end":1,"label":"color"}],"split":"train","meta":{}}"#,
            "\n"
        );
        assert_eq!(text, expected);
        assert_eq!(Corpus::from_ir_bytes(text.as_bytes()).unwrap(), c);
    }

    #[test]
    fn ir_reader_rejects_garbage() {
        assert!(Corpus::from_ir_bytes(b"").is_err());
        assert!(Corpus::from_ir_bytes(b"{\"ir_version\":2,\"corpus_id\":\"a\",\"name\":\"\",\"intents\":[],\"slot_types\":[]}").is_err());
        assert!(Corpus::from_ir_bytes(b"not json").is_err());
    }

    #[test]
    fn patch_json_distinguishes_clear_from_absent() {
        let p: UtterancePatch = serde_json::from_str(r#"{"intent":null}"#).unwrap();
        assert_eq!(p.intent, Some(None));
        let p: UtterancePatch = serde_json::from_str(r#"{}"#).unwrap();
        assert_eq!(p.intent, None);
    }
}
