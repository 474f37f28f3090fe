//! Sparse token features shared by the intent and slot models.
//!
//! Template set, all with value 1.0:
//!
//! | id                 | meaning                                        |
//! |--------------------|------------------------------------------------|
//! | `w0=<tok>`         | lowercased current token                       |
//! | `w-k=<tok>`        | lowercased token k to the left, or `<BOS>`     |
//! | `w+k=<tok>`        | lowercased token k to the right, or `<EOS>`    |
//! | `shape0=<shape>`   | lower, upper, title, digit, punct or mixed     |
//! | `p<n>=` / `s<n>=`  | lowercased prefix / suffix of length 1..=3     |
//!
//! Context features use offsets `1..=feature_window`; affixes are emitted
//! only when `use_prefix_suffix` is set and the token is at least `n`
//! characters long.

use std::collections::BTreeMap;

use crate::ir::Token;

use super::Hyperparams;

pub const BOS: &str = "<BOS>";
pub const EOS: &str = "<EOS>";

/// Sparse map from feature id to value. Never stores zeros.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureVector(BTreeMap<String, f64>);

impl FeatureVector {
    pub fn new() -> Self {
        FeatureVector::default()
    }

    pub fn add(&mut self, id: impl Into<String>, value: f64) {
        let id = id.into();
        let v = self.0.entry(id.clone()).or_insert(0.0);
        *v += value;
        if *v == 0.0 {
            self.0.remove(&id);
        }
    }

    /// Adds every entry of `other` into `self`.
    pub fn merge(&mut self, other: &FeatureVector) {
        for (k, v) in &other.0 {
            self.add(k.clone(), *v);
        }
    }

    pub fn get(&self, id: &str) -> f64 {
        self.0.get(id).copied().unwrap_or(0.0)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.0.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Entries in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

pub fn shape(token: &str) -> &'static str {
    let chars: Vec<char> = token.chars().collect();
    if chars.iter().all(|c| c.is_ascii_digit()) {
        "digit"
    } else if chars.iter().all(|c| c.is_ascii_punctuation()) {
        "punct"
    } else if chars.iter().all(|c| c.is_alphabetic() && !c.is_uppercase()) {
        "lower"
    } else if chars.len() > 1 && chars.iter().all(|c| c.is_alphabetic() && !c.is_lowercase()) {
        "upper"
    } else if chars[0].is_uppercase() && chars[1..].iter().all(|c| c.is_alphabetic() && !c.is_uppercase()) {
        "title"
    } else {
        "mixed"
    }
}

pub(crate) fn features_for_words(words: &[&str], position: usize, hyper: &Hyperparams) -> FeatureVector {
    let mut fv = FeatureVector::new();
    let word = words[position];
    let lower = word.to_lowercase();
    fv.add(format!("w0={lower}"), 1.0);
    for k in 1..=hyper.feature_window {
        let left = position.checked_sub(k).map_or_else(|| BOS.to_string(), |p| words[p].to_lowercase());
        let right = words.get(position + k).map_or_else(|| EOS.to_string(), |w| w.to_lowercase());
        fv.add(format!("w-{k}={left}"), 1.0);
        fv.add(format!("w+{k}={right}"), 1.0);
    }
    fv.add(format!("shape0={}", shape(word)), 1.0);
    if hyper.use_prefix_suffix {
        let chars: Vec<char> = lower.chars().collect();
        for n in 1..=3.min(chars.len()) {
            fv.add(format!("p{n}={}", chars[..n].iter().collect::<String>()), 1.0);
            fv.add(format!("s{n}={}", chars[chars.len() - n..].iter().collect::<String>()), 1.0);
        }
    }
    fv
}

/// Features for the token at `position`.
///
/// # Panics
///
/// If `position` is out of bounds.
pub fn extract_features(tokens: &[Token], position: usize, hyper: &Hyperparams) -> FeatureVector {
    let words: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
    features_for_words(&words, position, hyper)
}

pub(crate) fn sequence_features(words: &[&str], hyper: &Hyperparams) -> Vec<FeatureVector> {
    (0..words.len()).map(|i| features_for_words(words, i, hyper)).collect()
}

/// Sum of token features, used as the utterance representation for intents.
pub(crate) fn utterance_features(words: &[&str], hyper: &Hyperparams) -> FeatureVector {
    let mut total = FeatureVector::new();
    for fv in sequence_features(words, hyper) {
        total.merge(&fv);
    }
    total
}
