//! Trainable models: an averaged-perceptron intent classifier and a
//! linear-chain slot tagger, combined into a joint model, plus grid search.

mod averaged;
pub mod features;
pub mod intent;
pub mod joint;
pub mod slots;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::EvalError;

pub use features::{extract_features, FeatureVector};
pub use intent::{predict_intent, train_intent, IntentModel};
pub use joint::{
    evaluate_split, grid_search, predict_joint, predict_split, train_joint, Grid, GridResult, JointModel,
    LeaderboardEntry, Metric,
};
pub use slots::{
    brute_force_decode, count_valid_sequences, sequence_score, tag_alphabet, train_slots, viterbi_decode,
    viterbi_decode_scored, SlotModel,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("the train split is empty")]
    EmptyTrainSplit,
    #[error("the dev split is empty")]
    EmptyDevSplit,
    #[error("the hyperparameter grid is empty")]
    EmptyGrid,
    #[error("train utterance {0:?} has no intent")]
    MissingIntent(String),
    #[error("utterance {id:?} has invalid gold slots: {reason}")]
    InvalidGold { id: String, reason: String },
    #[error("corpus has no intents to score")]
    NoIntents,
    #[error("sequence of {0} tokens is too long for exhaustive decoding")]
    SequenceTooLong(usize),
    #[error("bad model archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Hyperparams {
    pub epochs: u32,
    pub seed: u64,
    /// Context tokens on each side.
    pub feature_window: usize,
    pub use_prefix_suffix: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            epochs: 10,
            seed: 0,
            feature_window: 1,
            use_prefix_suffix: true,
        }
    }
}

impl Hyperparams {
    /// The quickest preset: no context window, no affixes, few epochs.
    pub fn fast() -> Self {
        Hyperparams {
            epochs: 5,
            seed: 0,
            feature_window: 0,
            use_prefix_suffix: false,
        }
    }
}
