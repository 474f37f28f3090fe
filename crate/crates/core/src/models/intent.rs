use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::eval::CorpusRef;
use crate::ir::{Corpus, Split, Token};

use super::averaged::Averaged;
use super::features::{utterance_features, FeatureVector};
use super::{Hyperparams, ModelError};

/// Multiclass averaged perceptron over bag-of-token features.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentModel {
    pub classes: Vec<String>,
    /// feature id -> one weight per class, in `classes` order.
    pub(crate) weights: HashMap<String, Vec<f64>>,
    pub trained_on: CorpusRef,
    pub hyper: Hyperparams,
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = k;
        }
    }
    best
}

fn score_with(weights: &HashMap<String, Vec<f64>>, n_classes: usize, fv: &FeatureVector) -> Vec<f64> {
    let mut scores = vec![0.0; n_classes];
    for (id, x) in fv.iter() {
        if let Some(w) = weights.get(id) {
            for (s, wk) in scores.iter_mut().zip(w) {
                *s += wk * x;
            }
        }
    }
    scores
}

impl IntentModel {
    /// An untrained model: every score is zero.
    pub fn zero(classes: Vec<String>, trained_on: CorpusRef, hyper: Hyperparams) -> Self {
        IntentModel {
            classes,
            weights: HashMap::new(),
            trained_on,
            hyper,
        }
    }

    pub fn weight(&self, class: &str, feature: &str) -> f64 {
        let Some(k) = self.classes.iter().position(|c| c == class) else {
            return 0.0;
        };
        self.weights.get(feature).map_or(0.0, |w| w[k])
    }

    pub fn set_weight(&mut self, class: &str, feature: &str, value: f64) {
        let k = self.classes.iter().position(|c| c == class).expect("known class");
        let n = self.classes.len();
        self.weights.entry(feature.to_string()).or_insert_with(|| vec![0.0; n])[k] = value;
    }

    /// `(class, feature, weight)` triples, sorted, zeros omitted.
    pub fn sorted_weights(&self) -> Vec<(String, String, f64)> {
        let mut out: Vec<(String, String, f64)> = self
            .weights
            .iter()
            .flat_map(|(f, w)| {
                w.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(k, v)| (self.classes[k].clone(), f.clone(), *v))
                    .collect::<Vec<_>>()
            })
            .collect();
        out.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
        out
    }

    pub fn scores(&self, words: &[&str]) -> Vec<f64> {
        let fv = utterance_features(words, &self.hyper);
        score_with(&self.weights, self.classes.len(), &fv)
    }

    pub fn predict_words(&self, words: &[&str]) -> (String, BTreeMap<String, f64>) {
        let scores = self.scores(words);
        let best = argmax(&scores);
        let map = self.classes.iter().cloned().zip(scores).collect();
        (self.classes[best].clone(), map)
    }
}

/// Argmax class and the per-class score map. Ties go to the class listed
/// first in `model.classes`.
pub fn predict_intent(model: &IntentModel, tokens: &[Token]) -> (String, BTreeMap<String, f64>) {
    let words: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
    model.predict_words(&words)
}

pub fn train_intent(corpus: &Corpus, hyper: &Hyperparams) -> Result<IntentModel, ModelError> {
    let train: Vec<_> = corpus.split(Split::Train).collect();
    if train.is_empty() {
        return Err(ModelError::EmptyTrainSplit);
    }
    let mut classes: Vec<String> = corpus.intents.iter().cloned().collect();
    let mut examples = Vec::with_capacity(train.len());
    for utt in &train {
        let intent = utt
            .intent
            .as_ref()
            .ok_or_else(|| ModelError::MissingIntent(utt.id.clone()))?;
        if !classes.contains(intent) {
            classes.push(intent.clone());
            classes.sort();
        }
        examples.push((utterance_features(&utt.token_texts(), hyper), intent.clone()));
    }
    let examples: Vec<(FeatureVector, usize)> = examples
        .into_iter()
        .map(|(fv, intent)| {
            let k = classes.iter().position(|c| *c == intent).expect("registered above");
            (fv, k)
        })
        .collect();

    let n = classes.len();
    let mut params = Averaged::new(n);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (fv, gold) = &examples[i];
            let guess = argmax(&score_with(params.current(), n, fv));
            if guess != *gold {
                for (id, x) in fv.iter() {
                    params.update(id, *gold, x);
                    params.update(id, guess, -x);
                }
            }
            params.tick();
        }
    }
    Ok(IntentModel {
        classes,
        weights: params.finish(),
        trained_on: CorpusRef {
            id: corpus.id.clone(),
            version: corpus.version,
        },
        hyper: hyper.clone(),
    })
}
