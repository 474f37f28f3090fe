use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval::{evaluate, CorpusRef, EvaluationReport, Prediction, Predictions};
use crate::ir::{BioLabel, Corpus, Split, Token};

use super::intent::{predict_intent, train_intent, IntentModel};
use super::slots::{train_slots, viterbi_decode, SlotModel};
use super::{Hyperparams, ModelError};

/// Intent classifier plus slot tagger trained on one corpus snapshot. The
/// intent half is absent for corpora without intents (keyphrase data).
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub intent: Option<IntentModel>,
    pub slots: SlotModel,
    pub model_version: String,
}

pub fn train_joint(corpus: &Corpus, hyper: &Hyperparams) -> Result<JointModel, ModelError> {
    let has_intents = !corpus.intents.is_empty() || corpus.split(Split::Train).any(|u| u.intent.is_some());
    let intent = if has_intents {
        Some(train_intent(corpus, hyper)?)
    } else {
        None
    };
    let slots = train_slots(corpus, hyper)?;
    let mut model = JointModel {
        intent,
        slots,
        model_version: String::new(),
    };
    model.model_version = model.content_version();
    Ok(model)
}

pub fn predict_joint(model: &JointModel, tokens: &[Token]) -> (Option<String>, Vec<BioLabel>) {
    let intent = model.intent.as_ref().map(|m| predict_intent(m, tokens).0);
    (intent, viterbi_decode(&model.slots, tokens))
}

/// Decodes every utterance of one split.
pub fn predict_split(model: &JointModel, corpus: &Corpus, split: Split) -> Predictions {
    corpus
        .split(split)
        .map(|utt| {
            let (intent, tags) = predict_joint(model, &utt.tokens);
            (
                utt.id.clone(),
                Prediction {
                    utterance_id: utt.id.clone(),
                    intent,
                    tags,
                },
            )
        })
        .collect()
}

pub fn evaluate_split(model: &JointModel, corpus: &Corpus, split: Split) -> Result<EvaluationReport, ModelError> {
    let preds = predict_split(model, corpus, split);
    Ok(evaluate(corpus, split, &preds, &model.model_version)?)
}

// ---------------------------------------------------------------------------
// Archive

pub const ARCHIVE_FORMAT: &str = "nluforge-joint-model";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub format: String,
    pub archive_version: u32,
    pub model_version: String,
    pub trained_on: CorpusRef,
    pub hyper: Hyperparams,
    pub intent_classes: Option<Vec<String>>,
    pub slot_labels: Vec<BioLabel>,
}

#[derive(Serialize, Deserialize)]
struct Archive {
    header: ArchiveHeader,
    intent_weights: Vec<(String, String, f64)>,
    emission_weights: Vec<(BioLabel, String, f64)>,
    transition_weights: Vec<(BioLabel, BioLabel, f64)>,
    start_weights: Vec<(BioLabel, f64)>,
}

impl JointModel {
    fn archive(&self) -> Archive {
        let slots = &self.slots;
        let l = slots.n_labels();
        let mut emission: Vec<(usize, &String, f64)> = slots
            .emission
            .iter()
            .flat_map(|(f, w)| w.iter().enumerate().filter(|(_, v)| **v != 0.0).map(move |(k, v)| (k, f, *v)))
            .collect();
        emission.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let transitions = (0..l * l)
            .filter(|&k| slots.transition[k] != 0.0)
            .map(|k| (slots.labels[k / l].clone(), slots.labels[k % l].clone(), slots.transition[k]))
            .collect();
        let starts = (0..l)
            .filter(|&k| slots.start[k] != 0.0)
            .map(|k| (slots.labels[k].clone(), slots.start[k]))
            .collect();
        Archive {
            header: ArchiveHeader {
                format: ARCHIVE_FORMAT.into(),
                archive_version: ARCHIVE_VERSION,
                model_version: self.model_version.clone(),
                trained_on: slots.trained_on.clone(),
                hyper: slots.hyper.clone(),
                intent_classes: self.intent.as_ref().map(|m| m.classes.clone()),
                slot_labels: slots.labels.clone(),
            },
            intent_weights: self.intent.as_ref().map(IntentModel::sorted_weights).unwrap_or_default(),
            emission_weights: emission
                .into_iter()
                .map(|(k, f, v)| (slots.labels[k].clone(), f.clone(), v))
                .collect(),
            transition_weights: transitions,
            start_weights: starts,
        }
    }

    /// Hash of everything except the version string itself.
    fn content_version(&self) -> String {
        let mut archive = self.archive();
        archive.header.model_version = String::new();
        let bytes = serde_json::to_vec(&archive).expect("archive serializes");
        let digest = Sha256::digest(&bytes);
        format!("jm-{}", &hex::encode(digest)[..16])
    }

    /// Canonical archive bytes: one JSON document with sorted weight lists.
    pub fn to_archive(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.archive()).expect("archive serializes");
        out.push(b'\n');
        out
    }

    pub fn from_archive(bytes: &[u8]) -> Result<JointModel, ModelError> {
        let archive: Archive = serde_json::from_slice(bytes).map_err(|e| ModelError::Archive(e.to_string()))?;
        let h = archive.header;
        if h.format != ARCHIVE_FORMAT || h.archive_version != ARCHIVE_VERSION {
            return Err(ModelError::Archive(format!(
                "unsupported archive {} v{}",
                h.format, h.archive_version
            )));
        }
        let slot_types: Vec<String> = h
            .slot_labels
            .iter()
            .filter_map(|l| match l {
                BioLabel::B(t) => Some(t.clone()),
                _ => None,
            })
            .collect();
        let mut slots = SlotModel::zero(&slot_types, h.trained_on.clone(), h.hyper.clone());
        if slots.labels != h.slot_labels {
            return Err(ModelError::Archive("slot label order is not canonical".into()));
        }
        let check = |label: &BioLabel| {
            if slots.label_index(label).is_none() {
                Err(ModelError::Archive(format!("unknown label {label}")))
            } else {
                Ok(())
            }
        };
        for (label, _, _) in &archive.emission_weights {
            check(label)?;
        }
        for (a, b, _) in &archive.transition_weights {
            check(a)?;
            check(b)?;
        }
        for (a, _) in &archive.start_weights {
            check(a)?;
        }
        for (label, feature, w) in &archive.emission_weights {
            slots.set_emission(label, feature, *w);
        }
        for (a, b, w) in &archive.transition_weights {
            slots.set_transition(a, b, *w);
        }
        for (a, w) in &archive.start_weights {
            slots.set_start(a, *w);
        }
        let intent = match h.intent_classes {
            Some(classes) => {
                let mut m = IntentModel::zero(classes, h.trained_on.clone(), h.hyper.clone());
                for (class, feature, w) in &archive.intent_weights {
                    if !m.classes.contains(class) {
                        return Err(ModelError::Archive(format!("unknown class {class}")));
                    }
                    m.set_weight(class, feature, *w);
                }
                Some(m)
            }
            None => None,
        };
        Ok(JointModel {
            intent,
            slots,
            model_version: h.model_version,
        })
    }
}

// ---------------------------------------------------------------------------
// Grid search

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    IntentAccuracy,
    #[default]
    SlotF1,
    Mean,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "intent_accuracy" => Ok(Metric::IntentAccuracy),
            "slot_f1" => Ok(Metric::SlotF1),
            "mean" => Ok(Metric::Mean),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::IntentAccuracy => "intent_accuracy",
            Metric::SlotF1 => "slot_f1",
            Metric::Mean => "mean",
        }
    }

    /// The selection value for a report. `Mean` falls back to slot F1 when
    /// the corpus has no intents.
    pub fn value(self, report: &EvaluationReport) -> Result<f64, ModelError> {
        match (self, report.intent_accuracy) {
            (Metric::SlotF1, _) => Ok(report.slot_f1),
            (Metric::IntentAccuracy, Some(a)) => Ok(a),
            (Metric::IntentAccuracy, None) => Err(ModelError::NoIntents),
            (Metric::Mean, Some(a)) => Ok((a + report.slot_f1) / 2.0),
            (Metric::Mean, None) => Ok(report.slot_f1),
        }
    }
}

/// Candidate values per hyperparameter. An empty list keeps the base value.
/// Points are enumerated in field order, last field varying fastest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epochs: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seed: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feature_window: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub use_prefix_suffix: Vec<bool>,
}

impl Grid {
    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty() && self.seed.is_empty() && self.feature_window.is_empty() && self.use_prefix_suffix.is_empty()
    }

    /// Parses `name=v1,v2,...`; `window` abbreviates `feature_window` and
    /// `affixes` abbreviates `use_prefix_suffix`.
    pub fn set_from_str(&mut self, assignment: &str) -> Result<(), String> {
        let (name, values) = assignment
            .split_once('=')
            .ok_or_else(|| format!("expected name=v1,v2 but got {assignment:?}"))?;
        fn parse<T: std::str::FromStr>(values: &str) -> Result<Vec<T>, String> {
            values
                .split(',')
                .map(|v| v.trim().parse::<T>().map_err(|_| format!("bad grid value {v:?}")))
                .collect()
        }
        match name.trim() {
            "epochs" => self.epochs = parse(values)?,
            "seed" => self.seed = parse(values)?,
            "feature_window" | "window" => self.feature_window = parse(values)?,
            "use_prefix_suffix" | "affixes" => self.use_prefix_suffix = parse(values)?,
            other => return Err(format!("unknown grid parameter {other:?}")),
        }
        Ok(())
    }

    pub fn points(&self, base: &Hyperparams) -> Vec<Hyperparams> {
        fn or<T: Clone>(v: &[T], d: T) -> Vec<T> {
            if v.is_empty() {
                vec![d]
            } else {
                v.to_vec()
            }
        }
        let mut out = Vec::new();
        for &epochs in &or(&self.epochs, base.epochs) {
            for &seed in &or(&self.seed, base.seed) {
                for &feature_window in &or(&self.feature_window, base.feature_window) {
                    for &use_prefix_suffix in &or(&self.use_prefix_suffix, base.use_prefix_suffix) {
                        out.push(Hyperparams {
                            epochs,
                            seed,
                            feature_window,
                            use_prefix_suffix,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub hyper: Hyperparams,
    pub intent_accuracy: Option<f64>,
    pub slot_f1: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: Hyperparams,
    pub metric: Metric,
    pub leaderboard: Vec<LeaderboardEntry>,
}

/// Trains one joint model per grid point (in parallel) and scores each on
/// the dev split. Ties go to the earlier point.
pub fn grid_search(corpus: &Corpus, grid: &Grid, metric: Metric, base: &Hyperparams) -> Result<GridResult, ModelError> {
    if grid.is_empty() {
        return Err(ModelError::EmptyGrid);
    }
    if corpus.split(Split::Dev).next().is_none() {
        return Err(ModelError::EmptyDevSplit);
    }
    let points = grid.points(base);
    let leaderboard = points
        .par_iter()
        .map(|hyper| {
            let model = train_joint(corpus, hyper)?;
            let report = evaluate_split(&model, corpus, Split::Dev)?;
            Ok(LeaderboardEntry {
                hyper: hyper.clone(),
                intent_accuracy: report.intent_accuracy,
                slot_f1: report.slot_f1,
                score: metric.value(&report)?,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let mut best = 0;
    for (k, entry) in leaderboard.iter().enumerate().skip(1) {
        if entry.score > leaderboard[best].score {
            best = k;
        }
    }
    Ok(GridResult {
        best: leaderboard[best].hyper.clone(),
        metric,
        leaderboard,
    })
}
