//! Metrics and drill-down confusion matrices.
//!
//! Slot scores are micro-averaged exact-match span scores: a predicted span
//! is a true positive only when start, end and label all equal a gold span.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{repair_bio, spans_from_bio, BioLabel, Corpus, SlotSpan, Split, Utterance};

/// Matching criterion recorded in every report.
pub const SLOT_MATCHING: &str = "exact_span_micro";

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("gold and predicted lists differ in length ({gold} vs {pred})")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("no prediction for utterance {0:?}")]
    MissingPrediction(String),
    #[error("prediction for {id:?} has {got} tags for {expected} tokens")]
    TagCount { id: String, expected: usize, got: usize },
    #[error("label {0:?} is not on the matrix axis")]
    UnknownLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Scores from raw counts with the empty-denominator conventions:
    /// both sides empty scores 1, one side empty scores 0.
    pub fn from_counts(tp: usize, n_pred: usize, n_gold: usize) -> Prf {
        if n_pred == 0 && n_gold == 0 {
            return Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let precision = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
        let recall = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
        Prf {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn intent_accuracy<S: AsRef<str>>(gold: &[S], pred: &[S]) -> Result<f64, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = gold.iter().zip(pred).filter(|(g, p)| g.as_ref() == p.as_ref()).count();
    Ok(hits as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    tp: usize,
    pred: usize,
    gold: usize,
}

fn span_counts(gold: &[Vec<SlotSpan>], pred: &[Vec<SlotSpan>]) -> Result<(Counts, BTreeMap<String, Counts>), EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let mut total = Counts::default();
    let mut per_label: BTreeMap<String, Counts> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        let gold_set: BTreeSet<&SlotSpan> = g.iter().collect();
        let pred_set: BTreeSet<&SlotSpan> = p.iter().collect();
        for span in &gold_set {
            total.gold += 1;
            per_label.entry(span.label.clone()).or_default().gold += 1;
        }
        for span in &pred_set {
            total.pred += 1;
            let c = per_label.entry(span.label.clone()).or_default();
            c.pred += 1;
            if gold_set.contains(span) {
                total.tp += 1;
                c.tp += 1;
            }
        }
    }
    Ok((total, per_label))
}

pub fn slot_prf(gold: &[Vec<SlotSpan>], pred: &[Vec<SlotSpan>]) -> Result<Prf, EvalError> {
    let (c, _) = span_counts(gold, pred)?;
    Ok(Prf::from_counts(c.tp, c.pred, c.gold))
}

/// Keyphrase F1: the same micro span matching as [`slot_prf`], over `KP` spans.
pub fn keyphrase_f1(gold: &[Vec<SlotSpan>], pred: &[Vec<SlotSpan>]) -> Result<Prf, EvalError> {
    slot_prf(gold, pred)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

pub fn per_label_prf(gold: &[Vec<SlotSpan>], pred: &[Vec<SlotSpan>]) -> Result<BTreeMap<String, LabelScore>, EvalError> {
    let (_, per_label) = span_counts(gold, pred)?;
    Ok(per_label
        .into_iter()
        .map(|(label, c)| {
            let prf = Prf::from_counts(c.tp, c.pred, c.gold);
            (
                label,
                LabelScore {
                    precision: prf.precision,
                    recall: prf.recall,
                    f1: prf.f1,
                    support: c.gold,
                },
            )
        })
        .collect())
}

/// A model's output for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub utterance_id: String,
    pub intent: Option<String>,
    pub tags: Vec<BioLabel>,
}

impl Prediction {
    pub fn spans(&self) -> Vec<SlotSpan> {
        spans_from_bio(&repair_bio(&self.tags)).expect("repaired tags are valid")
    }
}

pub type Predictions = BTreeMap<String, Prediction>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRef {
    pub id: String,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub intent_accuracy: Option<f64>,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub slot_f1: f64,
    pub per_label: BTreeMap<String, LabelScore>,
    pub n_utterances: usize,
    pub model_version: String,
    pub corpus: CorpusRef,
    pub split: Split,
    pub slot_matching: String,
}

fn prediction_for<'a>(predictions: &'a Predictions, utt: &Utterance) -> Result<&'a Prediction, EvalError> {
    let pred = predictions
        .get(&utt.id)
        .ok_or_else(|| EvalError::MissingPrediction(utt.id.clone()))?;
    if pred.tags.len() != utt.tokens.len() {
        return Err(EvalError::TagCount {
            id: utt.id.clone(),
            expected: utt.tokens.len(),
            got: pred.tags.len(),
        });
    }
    Ok(pred)
}

/// Scores one split of `corpus` against `predictions`.
///
/// Intent accuracy covers utterances that carry a gold intent and is absent
/// when none do.
pub fn evaluate(corpus: &Corpus, split: Split, predictions: &Predictions, model_version: &str) -> Result<EvaluationReport, EvalError> {
    let utterances: Vec<&Utterance> = corpus.split(split).collect();
    if utterances.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut gold_intents = Vec::new();
    let mut pred_intents = Vec::new();
    let mut gold_spans = Vec::new();
    let mut pred_spans = Vec::new();
    for utt in &utterances {
        let pred = prediction_for(predictions, utt)?;
        if let Some(g) = &utt.intent {
            gold_intents.push(g.as_str());
            pred_intents.push(pred.intent.as_deref().unwrap_or(""));
        }
        gold_spans.push(utt.slots.clone());
        pred_spans.push(pred.spans());
    }
    let intent_accuracy = if gold_intents.is_empty() {
        None
    } else {
        Some(intent_accuracy(&gold_intents, &pred_intents)?)
    };
    let prf = slot_prf(&gold_spans, &pred_spans)?;
    Ok(EvaluationReport {
        intent_accuracy,
        slot_precision: prf.precision,
        slot_recall: prf.recall,
        slot_f1: prf.f1,
        per_label: per_label_prf(&gold_spans, &pred_spans)?,
        n_utterances: utterances.len(),
        model_version: model_version.to_string(),
        corpus: CorpusRef {
            id: corpus.id.clone(),
            version: corpus.version,
        },
        split,
        slot_matching: SLOT_MATCHING.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Confusion matrices

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixLevel {
    Intent,
    TokenLabel,
}

impl MatrixLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            MatrixLevel::Intent => "intent",
            MatrixLevel::TokenLabel => "token_label",
        }
    }
}

impl std::str::FromStr for MatrixLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "intent" => Ok(MatrixLevel::Intent),
            "token_label" | "token" => Ok(MatrixLevel::TokenLabel),
            other => Err(format!("unknown matrix level {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRef {
    pub utterance_id: String,
    pub token_index: Option<usize>,
    pub gold: String,
    pub predicted: String,
    pub rendered_text: String,
}

type Cell = (String, String);

/// A confusion matrix whose cells resolve to the instances behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub level: MatrixLevel,
    pub labels: Vec<String>,
    pub cells: BTreeMap<Cell, usize>,
    pub instances: BTreeMap<Cell, Vec<InstanceRef>>,
}

fn render(tokens: &[&str], mark: Option<usize>) -> String {
    tokens
        .iter()
        .enumerate()
        .map(|(i, t)| if Some(i) == mark { format!("[[{t}]]") } else { (*t).to_string() })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Sort key placing `O` first, then tags grouped by type with `B` before `I`.
fn tag_order(label: &str) -> (u8, String, u8) {
    match label.parse::<BioLabel>() {
        Ok(BioLabel::O) => (0, String::new(), 0),
        Ok(BioLabel::B(t)) => (1, t, 0),
        Ok(BioLabel::I(t)) => (1, t, 1),
        Err(_) => (2, label.to_string(), 0),
    }
}

impl ConfusionMatrix {
    pub fn build<'a>(
        utterances: impl IntoIterator<Item = &'a Utterance>,
        predictions: &Predictions,
        level: MatrixLevel,
    ) -> Result<ConfusionMatrix, EvalError> {
        let mut instances: BTreeMap<Cell, Vec<InstanceRef>> = BTreeMap::new();
        for utt in utterances {
            let pred = prediction_for(predictions, utt)?;
            let words = utt.token_texts();
            match level {
                MatrixLevel::Intent => {
                    let Some(gold) = &utt.intent else { continue };
                    let predicted = pred.intent.clone().unwrap_or_default();
                    instances.entry((gold.clone(), predicted.clone())).or_default().push(InstanceRef {
                        utterance_id: utt.id.clone(),
                        token_index: None,
                        gold: gold.clone(),
                        predicted,
                        rendered_text: render(&words, None),
                    });
                }
                MatrixLevel::TokenLabel => {
                    let gold_tags = utt.bio().expect("evaluated corpus must be valid");
                    for (i, (g, p)) in gold_tags.iter().zip(&pred.tags).enumerate() {
                        let (g, p) = (g.to_string(), p.to_string());
                        instances.entry((g.clone(), p.clone())).or_default().push(InstanceRef {
                            utterance_id: utt.id.clone(),
                            token_index: Some(i),
                            gold: g,
                            predicted: p,
                            rendered_text: render(&words, Some(i)),
                        });
                    }
                }
            }
        }
        for refs in instances.values_mut() {
            refs.sort_by(|a, b| (&a.utterance_id, a.token_index).cmp(&(&b.utterance_id, b.token_index)));
        }
        let mut labels: Vec<String> = instances
            .keys()
            .flat_map(|(g, p)| [g.clone(), p.clone()])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if level == MatrixLevel::TokenLabel {
            labels.sort_by_key(|l| tag_order(l));
        }
        let cells = instances.iter().map(|(k, v)| (k.clone(), v.len())).collect();
        Ok(ConfusionMatrix {
            level,
            labels,
            cells,
            instances,
        })
    }

    pub fn count(&self, gold: &str, predicted: &str) -> usize {
        self.cells
            .get(&(gold.to_string(), predicted.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.cells.values().sum()
    }

    pub fn trace(&self) -> usize {
        self.cells.iter().filter(|((g, p), _)| g == p).map(|(_, n)| n).sum()
    }

    /// Off-diagonal cells, largest first. This is the order a reviewer walks
    /// them in when hunting for systematic labeling errors.
    pub fn largest_errors(&self) -> Vec<(&str, &str, usize)> {
        let mut errs: Vec<(&str, &str, usize)> = self
            .cells
            .iter()
            .filter(|((g, p), _)| g != p)
            .map(|((g, p), n)| (g.as_str(), p.as_str(), *n))
            .collect();
        errs.sort_by(|a, b| b.2.cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        errs
    }

    /// Instances behind cell `(gold, predicted)`, ordered by utterance id and
    /// token index. A pair of known labels with no cell yields an empty list;
    /// a label that is not on the axis is an error.
    pub fn drill_down(&self, gold: &str, predicted: &str) -> Result<Vec<InstanceRef>, EvalError> {
        for label in [gold, predicted] {
            if !self.labels.iter().any(|l| l == label) {
                return Err(EvalError::UnknownLabel(label.to_string()));
            }
        }
        Ok(self
            .instances
            .get(&(gold.to_string(), predicted.to_string()))
            .cloned()
            .unwrap_or_default())
    }

    /// The matrix without instance lists, as served to clients.
    pub fn summary(&self) -> MatrixSummary {
        MatrixSummary {
            level: self.level,
            labels: self.labels.clone(),
            cells: self
                .cells
                .iter()
                .map(|((gold, pred), count)| CellCount {
                    gold: gold.clone(),
                    pred: pred.clone(),
                    count: *count,
                })
                .collect(),
        }
    }
}

pub fn confusion_matrix(corpus: &Corpus, split: Split, predictions: &Predictions, level: MatrixLevel) -> Result<ConfusionMatrix, EvalError> {
    ConfusionMatrix::build(corpus.split(split), predictions, level)
}

pub fn drill_down(matrix: &ConfusionMatrix, gold: &str, predicted: &str) -> Result<Vec<InstanceRef>, EvalError> {
    matrix.drill_down(gold, predicted)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCount {
    pub gold: String,
    pub pred: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixSummary {
    pub level: MatrixLevel,
    pub labels: Vec<String>,
    pub cells: Vec<CellCount>,
}

#[derive(Serialize, Deserialize)]
struct CellInstances {
    gold: String,
    pred: String,
    instances: Vec<InstanceRef>,
}

#[derive(Serialize, Deserialize)]
struct MatrixWire {
    #[serde(flatten)]
    summary: MatrixSummary,
    instances: Vec<CellInstances>,
}

impl Serialize for ConfusionMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        MatrixWire {
            summary: self.summary(),
            instances: self
                .instances
                .iter()
                .map(|((gold, pred), refs)| CellInstances {
                    gold: gold.clone(),
                    pred: pred.clone(),
                    instances: refs.clone(),
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConfusionMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let wire = MatrixWire::deserialize(d)?;
        let cells = wire
            .summary
            .cells
            .into_iter()
            .map(|c| ((c.gold, c.pred), c.count))
            .collect();
        let instances = wire
            .instances
            .into_iter()
            .map(|c| ((c.gold, c.pred), c.instances))
            .collect();
        Ok(ConfusionMatrix {
            level: wire.summary.level,
            labels: wire.summary.labels,
            cells,
            instances,
        })
    }
}
