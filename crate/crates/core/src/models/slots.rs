//! Linear-chain slot tagger: averaged structured perceptron training and
//! BIO-masked Viterbi decoding.
//!
//! A label sequence `y` over `n` tokens scores
//!
//! ```text
//! score(y) = start[y0] + emit(0, y0)
//!          + Σ_{i≥1} trans[y(i-1)][y(i)] + emit(i, y(i))
//! ```
//!
//! accumulated left to right in exactly that order. Transitions that would
//! produce an invalid BIO sequence (`I-t` not preceded by `B-t`/`I-t`, or
//! `I-t` first) are excluded.
//!
//! Ties are broken by label order: among equally scoring sequences the
//! decoder returns the one whose last label has the lowest index, then the
//! lowest second-to-last label, and so on (reverse-lexicographic minimum).
//! [`brute_force_decode`] applies the same rule.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::eval::CorpusRef;
use crate::ir::{BioLabel, Corpus, Split, Token};

use super::averaged::{Averaged, DenseAveraged};
use super::features::{sequence_features, FeatureVector};
use super::{Hyperparams, ModelError};

/// Longest input [`brute_force_decode`] accepts.
pub const BRUTE_FORCE_MAX_TOKENS: usize = 10;

/// `{O}` followed by `B-t`, `I-t` for each type in ascending order.
pub fn tag_alphabet<'a>(slot_types: impl IntoIterator<Item = &'a String>) -> Vec<BioLabel> {
    let types: BTreeSet<&String> = slot_types.into_iter().collect();
    let mut labels = vec![BioLabel::O];
    for t in types {
        labels.push(BioLabel::B(t.clone()));
        labels.push(BioLabel::I(t.clone()));
    }
    labels
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotModel {
    pub labels: Vec<BioLabel>,
    /// feature id -> one weight per label.
    pub(crate) emission: HashMap<String, Vec<f64>>,
    /// Row-major `labels.len()²`, `[from * L + to]`.
    pub(crate) transition: Vec<f64>,
    pub(crate) start: Vec<f64>,
    pub trained_on: CorpusRef,
    pub hyper: Hyperparams,
}

fn allowed_pair(prev: &BioLabel, cur: &BioLabel) -> bool {
    match cur {
        BioLabel::I(t) => prev.slot_type() == Some(t.as_str()),
        _ => true,
    }
}

impl SlotModel {
    /// A model over the given slot types with every weight zero.
    pub fn zero<'a>(slot_types: impl IntoIterator<Item = &'a String>, trained_on: CorpusRef, hyper: Hyperparams) -> Self {
        let labels = tag_alphabet(slot_types);
        let l = labels.len();
        SlotModel {
            labels,
            emission: HashMap::new(),
            transition: vec![0.0; l * l],
            start: vec![0.0; l],
            trained_on,
            hyper,
        }
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &BioLabel) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    fn idx(&self, label: &BioLabel) -> usize {
        self.label_index(label)
            .unwrap_or_else(|| panic!("label {label} is not in the tag alphabet"))
    }

    pub fn set_emission(&mut self, label: &BioLabel, feature: &str, w: f64) {
        let k = self.idx(label);
        let l = self.n_labels();
        self.emission.entry(feature.to_string()).or_insert_with(|| vec![0.0; l])[k] = w;
    }

    pub fn set_transition(&mut self, from: &BioLabel, to: &BioLabel, w: f64) {
        let (a, b) = (self.idx(from), self.idx(to));
        let l = self.n_labels();
        self.transition[a * l + b] = w;
    }

    pub fn set_start(&mut self, label: &BioLabel, w: f64) {
        let k = self.idx(label);
        self.start[k] = w;
    }

    pub fn emission_weight(&self, label: &BioLabel, feature: &str) -> f64 {
        let k = self.idx(label);
        self.emission.get(feature).map_or(0.0, |w| w[k])
    }

    pub fn transition_weight(&self, from: &BioLabel, to: &BioLabel) -> f64 {
        self.transition[self.idx(from) * self.n_labels() + self.idx(to)]
    }

    pub fn start_weight(&self, label: &BioLabel) -> f64 {
        self.start[self.idx(label)]
    }

    /// Whether `prev -> cur` is a legal BIO transition.
    pub fn allowed(&self, prev: usize, cur: usize) -> bool {
        allowed_pair(&self.labels[prev], &self.labels[cur])
    }

    pub fn allowed_start(&self, cur: usize) -> bool {
        !self.labels[cur].is_inside()
    }

    /// `emit[i][k]`: emission score of label `k` at token `i`.
    pub(crate) fn emission_scores(&self, feats: &[FeatureVector]) -> Vec<Vec<f64>> {
        emission_scores_with(&self.emission, self.n_labels(), feats)
    }

    fn features(&self, tokens: &[Token]) -> Vec<FeatureVector> {
        let words: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
        sequence_features(&words, &self.hyper)
    }

    fn to_labels(&self, path: &[usize]) -> Vec<BioLabel> {
        path.iter().map(|&k| self.labels[k].clone()).collect()
    }
}

fn emission_scores_with(emission: &HashMap<String, Vec<f64>>, l: usize, feats: &[FeatureVector]) -> Vec<Vec<f64>> {
    feats
        .iter()
        .map(|fv| {
            let mut row = vec![0.0; l];
            for (id, x) in fv.iter() {
                if let Some(w) = emission.get(id) {
                    for (r, wk) in row.iter_mut().zip(w) {
                        *r += wk * x;
                    }
                }
            }
            row
        })
        .collect()
}

struct Lattice<'a> {
    labels: &'a [BioLabel],
    start: &'a [f64],
    transition: &'a [f64],
    emit: Vec<Vec<f64>>,
}

impl Lattice<'_> {
    fn l(&self) -> usize {
        self.labels.len()
    }

    fn allowed(&self, prev: usize, cur: usize) -> bool {
        allowed_pair(&self.labels[prev], &self.labels[cur])
    }

    #[allow(clippy::needless_range_loop)]
    fn viterbi(&self) -> (Vec<usize>, f64) {
        let n = self.emit.len();
        let l = self.l();
        assert!(n > 0, "cannot decode an empty sequence");
        let mut delta = vec![vec![f64::NEG_INFINITY; l]; n];
        let mut back = vec![vec![0usize; l]; n];
        for k in 0..l {
            if !self.labels[k].is_inside() {
                delta[0][k] = self.start[k] + self.emit[0][k];
            }
        }
        for i in 1..n {
            for cur in 0..l {
                let mut best: Option<(usize, f64)> = None;
                for prev in 0..l {
                    if !self.allowed(prev, cur) || delta[i - 1][prev] == f64::NEG_INFINITY {
                        continue;
                    }
                    let s = delta[i - 1][prev] + self.transition[prev * l + cur];
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((prev, s));
                    }
                }
                if let Some((prev, s)) = best {
                    delta[i][cur] = s + self.emit[i][cur];
                    back[i][cur] = prev;
                }
            }
        }
        let mut last = 0;
        for k in 1..l {
            if delta[n - 1][k] > delta[n - 1][last] {
                last = k;
            }
        }
        let score = delta[n - 1][last];
        let mut path = vec![last; n];
        for i in (1..n).rev() {
            path[i - 1] = back[i][path[i]];
        }
        (path, score)
    }

    fn score(&self, path: &[usize]) -> f64 {
        let l = self.l();
        let mut s = self.start[path[0]] + self.emit[0][path[0]];
        for i in 1..path.len() {
            s = s + self.transition[path[i - 1] * l + path[i]] + self.emit[i][path[i]];
        }
        s
    }
}

/// Compares two candidate paths under the decoder's preference: higher score
/// first, then reverse-lexicographically smaller label indices.
fn prefer(a: (&[usize], f64), b: (&[usize], f64)) -> Ordering {
    match a.1.partial_cmp(&b.1).expect("scores are finite") {
        Ordering::Equal => b.0.iter().rev().cmp(a.0.iter().rev()),
        other => other,
    }
}

impl SlotModel {
    fn lattice(&self, tokens: &[Token]) -> Lattice<'_> {
        Lattice {
            labels: &self.labels,
            start: &self.start,
            transition: &self.transition,
            emit: self.emission_scores(&self.features(tokens)),
        }
    }
}

/// Best label sequence and its score.
///
/// # Panics
///
/// If `tokens` is empty.
pub fn viterbi_decode_scored(model: &SlotModel, tokens: &[Token]) -> (Vec<BioLabel>, f64) {
    let (path, score) = model.lattice(tokens).viterbi();
    (model.to_labels(&path), score)
}

/// Highest-scoring BIO-valid label sequence. Empty input decodes to an
/// empty sequence.
pub fn viterbi_decode(model: &SlotModel, tokens: &[Token]) -> Vec<BioLabel> {
    if tokens.is_empty() {
        return Vec::new();
    }
    viterbi_decode_scored(model, tokens).0
}

/// Recomputes `score(y)` for a given label sequence, in the decoder's
/// summation order.
pub fn sequence_score(model: &SlotModel, tokens: &[Token], labels: &[BioLabel]) -> f64 {
    let path: Vec<usize> = labels.iter().map(|l| model.idx(l)).collect();
    model.lattice(tokens).score(&path)
}

/// Calls `visit` on every BIO-valid index path of length `n`, with the path
/// score accumulated in the decoder's order.
fn enumerate_paths(lat: &Lattice<'_>, n: usize, visit: &mut dyn FnMut(&[usize], f64)) {
    fn go(lat: &Lattice<'_>, n: usize, path: &mut Vec<usize>, score: f64, visit: &mut dyn FnMut(&[usize], f64)) {
        if path.len() == n {
            visit(path, score);
            return;
        }
        let i = path.len();
        for k in 0..lat.l() {
            let s = match path.last() {
                None if lat.labels[k].is_inside() => continue,
                None => lat.start[k] + lat.emit[0][k],
                Some(&prev) if !lat.allowed(prev, k) => continue,
                Some(&prev) => score + lat.transition[prev * lat.l() + k] + lat.emit[i][k],
            };
            path.push(k);
            go(lat, n, path, s, visit);
            path.pop();
        }
    }
    go(lat, n, &mut Vec::with_capacity(n), 0.0, visit);
}

/// Exhaustive decoder used as a test oracle for [`viterbi_decode`].
pub fn brute_force_decode(model: &SlotModel, tokens: &[Token]) -> Result<Vec<BioLabel>, ModelError> {
    if tokens.len() > BRUTE_FORCE_MAX_TOKENS {
        return Err(ModelError::SequenceTooLong(tokens.len()));
    }
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let lat = model.lattice(tokens);
    let mut best: Option<(Vec<usize>, f64)> = None;
    enumerate_paths(&lat, tokens.len(), &mut |path, score| {
        let better = match &best {
            None => true,
            Some((bp, bs)) => prefer((path, score), (bp, *bs)) == Ordering::Greater,
        };
        if better {
            best = Some((path.to_vec(), score));
        }
    });
    let (path, _) = best.expect("the all-O path is always valid");
    Ok(model.to_labels(&path))
}

/// Number of BIO-valid sequences of length `n` over the model's alphabet.
pub fn count_valid_sequences(model: &SlotModel, n: usize) -> usize {
    if n == 0 {
        return 1;
    }
    let tokens: Vec<Token> = (0..n).map(|i| Token::new("x", i * 2, i * 2 + 1)).collect();
    let lat = model.lattice(&tokens);
    let mut count = 0;
    enumerate_paths(&lat, n, &mut |_, _| count += 1);
    count
}

pub fn train_slots(corpus: &Corpus, hyper: &Hyperparams) -> Result<SlotModel, ModelError> {
    let train: Vec<_> = corpus.split(Split::Train).collect();
    if train.is_empty() {
        return Err(ModelError::EmptyTrainSplit);
    }
    let mut types = corpus.slot_types.clone();
    types.extend(train.iter().flat_map(|u| u.slots.iter().map(|s| s.label.clone())));
    let trained_on = CorpusRef {
        id: corpus.id.clone(),
        version: corpus.version,
    };
    let mut model = SlotModel::zero(&types, trained_on, hyper.clone());
    let l = model.n_labels();

    let mut examples: Vec<(Vec<FeatureVector>, Vec<usize>)> = Vec::with_capacity(train.len());
    for utt in &train {
        let gold = utt.bio().map_err(|e| ModelError::InvalidGold {
            id: utt.id.clone(),
            reason: e.to_string(),
        })?;
        if gold.is_empty() {
            continue;
        }
        let path = gold.iter().map(|g| model.idx(g)).collect();
        examples.push((sequence_features(&utt.token_texts(), hyper), path));
    }

    let mut emission = Averaged::new(l);
    let mut transition = DenseAveraged::new(l * l);
    let mut start = DenseAveraged::new(l);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for &e in &order {
            let (feats, gold) = &examples[e];
            let lat = Lattice {
                labels: &model.labels,
                start: start.current(),
                transition: transition.current(),
                emit: emission_scores_with(emission.current(), l, feats),
            };
            let (pred, _) = lat.viterbi();
            if pred != *gold {
                let c = emission.counter();
                for (i, fv) in feats.iter().enumerate() {
                    if gold[i] == pred[i] {
                        continue;
                    }
                    for (id, x) in fv.iter() {
                        emission.update(id, gold[i], x);
                        emission.update(id, pred[i], -x);
                    }
                }
                if gold[0] != pred[0] {
                    start.update(gold[0], 1.0, c);
                    start.update(pred[0], -1.0, c);
                }
                for i in 1..gold.len() {
                    let g = gold[i - 1] * l + gold[i];
                    let p = pred[i - 1] * l + pred[i];
                    if g != p {
                        transition.update(g, 1.0, c);
                        transition.update(p, -1.0, c);
                    }
                }
            }
            emission.tick();
        }
    }
    let c = emission.counter();
    model.transition = transition.finish(c);
    model.start = start.finish(c);
    model.emission = emission.finish();
    Ok(model)
}
