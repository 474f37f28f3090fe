//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed. Pass a substring to run a subset.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nluforge::artifacts::{load_report, save_corpus};
use nluforge::convert::{self, DatasetFormat};
use nluforge::eval::{evaluate, slot_prf, ConfusionMatrix, CorpusRef, MatrixLevel, Prediction, Predictions};
use nluforge::gateway::{ApiClient, ImportRequest, Platform, PlatformConfig, SubmitJobRequest};
use nluforge::ir::{bio_from_spans, is_valid_bio, repair_bio, spans_from_bio, BioLabel, Corpus, SlotSpan, Split, Token, Utterance};
use nluforge::models::{brute_force_decode, count_valid_sequences, extract_features, train_joint, evaluate_split, viterbi_decode, Hyperparams, SlotModel};
use nluforge::scheduler::scripted::{FaultPlan, ScriptedCluster};
use nluforge::scheduler::{
    Clock, InstanceConfig, InstanceState, JobState, ManualClock, PoolPolicy, ScaleAction, Scheduler, SchedulerConfig, SchedulerError,
};
use nluforge::store::{FsStore, ObjectKey, ObjectStore};
use nluforge::worker::{JobSpec, JobStatus, Worker};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn tmpdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("tempdir")
}

// ---------------------------------------------------------------------------
// Viterbi against exhaustive search

const TYPES: [&str; 5] = ["t0", "t1", "t2", "t3", "t4"];
const VOCAB: [&str; 7] = ["ab", "cd", "ef", "Gh", "12", "!", "xyz"];

fn tokens_of(words: &[&str]) -> Vec<Token> {
    let mut pos = 0;
    words
        .iter()
        .map(|w| {
            let n = w.chars().count();
            let t = Token::new(*w, pos, pos + n);
            pos += n + 1;
            t
        })
        .collect()
}

/// Small integer weights keep every path score exact, so ties are common
/// and compared without rounding.
fn random_slot_model(rng: &mut ChaCha8Rng) -> (SlotModel, Vec<Token>, Hyperparams) {
    let types: Vec<String> = TYPES[..rng.gen_range(1..=5)].iter().map(|s| s.to_string()).collect();
    let hyper = Hyperparams {
        feature_window: rng.gen_range(0..=1),
        use_prefix_suffix: rng.gen_bool(0.5),
        ..Hyperparams::default()
    };
    let mut model = SlotModel::zero(&types, CorpusRef { id: "r".into(), version: 0 }, hyper.clone());
    let words: Vec<&str> = (0..rng.gen_range(1..=6)).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())]).collect();
    let tokens = tokens_of(&words);
    let labels = model.labels.clone();
    for a in &labels {
        model.set_start(a, rng.gen_range(-3..=3) as f64);
        for b in &labels {
            model.set_transition(a, b, rng.gen_range(-3..=3) as f64);
        }
    }
    for i in 0..tokens.len() {
        for (feat, _) in extract_features(&tokens, i, &hyper).iter() {
            for l in &labels {
                if rng.gen_bool(0.4) {
                    model.set_emission(l, feat, rng.gen_range(-3..=3) as f64);
                }
            }
        }
    }
    (model, tokens, hyper)
}

fn bio_ok(prev: Option<&BioLabel>, cur: &BioLabel) -> bool {
    match cur {
        BioLabel::I(t) => matches!(prev, Some(BioLabel::B(p)) | Some(BioLabel::I(p)) if p == t),
        _ => true,
    }
}

/// Depth-first search over every valid label sequence, scoring each from
/// the public weights and keeping the best. Ties go to the smallest label
/// index at the last position, then the one before it, and so on. Returns
/// the winner, the number of valid sequences seen and how many of them
/// share the best score.
fn exhaustive_oracle(model: &SlotModel, tokens: &[Token], hyper: &Hyperparams) -> (Vec<BioLabel>, usize, usize) {
    struct Search<'a> {
        model: &'a SlotModel,
        emit: Vec<Vec<f64>>,
        path: Vec<usize>,
        best: Option<(Vec<usize>, f64)>,
        valid: usize,
        tied: usize,
    }
    impl Search<'_> {
        fn go(&mut self, score: f64) {
            let labels = &self.model.labels;
            let i = self.path.len();
            if i == self.emit.len() {
                self.valid += 1;
                let better = match &self.best {
                    None => true,
                    Some((b, s)) if score == *s => {
                        self.tied += 1;
                        self.path.iter().rev().lt(b.iter().rev())
                    }
                    Some((_, s)) => score > *s,
                };
                if better && self.best.as_ref().is_none_or(|(_, s)| score > *s) {
                    self.tied = 1;
                }
                if better {
                    self.best = Some((self.path.clone(), score));
                }
                return;
            }
            for k in 0..labels.len() {
                let prev = self.path.last().map(|&p| &labels[p]);
                if !bio_ok(prev, &labels[k]) {
                    continue;
                }
                let step = match prev {
                    None => self.model.start_weight(&labels[k]),
                    Some(p) => self.model.transition_weight(p, &labels[k]),
                };
                self.path.push(k);
                self.go(score + step + self.emit[i][k]);
                self.path.pop();
            }
        }
    }
    let emit = (0..tokens.len())
        .map(|i| {
            let fv = extract_features(tokens, i, hyper);
            model
                .labels
                .iter()
                .map(|lab| fv.iter().map(|(f, v)| v * model.emission_weight(lab, f)).sum())
                .collect()
        })
        .collect();
    let mut search = Search { model, emit, path: Vec::new(), best: None, valid: 0, tied: 0 };
    search.go(0.0);
    let (path, _) = search.best.expect("all-O is valid");
    (path.into_iter().map(|k| model.labels[k].clone()).collect(), search.valid, search.tied)
}

fn viterbi_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let instances = 1500;
    let mut ties = 0;
    for case in 0..instances {
        let (model, tokens, hyper) = random_slot_model(&mut rng);
        let fast = viterbi_decode(&model, &tokens);
        let brute = brute_force_decode(&model, &tokens).map_err(|e| e.to_string())?;
        let (oracle, valid, tied) = exhaustive_oracle(&model, &tokens, &hyper);
        ensure!(fast == brute, "case {case}: viterbi {fast:?} != brute force {brute:?}");
        ensure!(fast == oracle, "case {case}: viterbi {fast:?} != independent oracle {oracle:?}");
        ensure!(
            valid == count_valid_sequences(&model, tokens.len()),
            "case {case}: valid sequence count disagrees"
        );
        if tied > 1 {
            ties += 1;
        }
    }
    Ok(format!("{instances} instances, up to 6 tokens and 5 slot types, {ties} with a tied optimum"))
}

// ---------------------------------------------------------------------------
// BIO round trips

fn random_spans(rng: &mut ChaCha8Rng, n: usize, types: &[&str]) -> Vec<SlotSpan> {
    let mut spans = Vec::new();
    let mut p = 0;
    while p < n {
        if rng.gen_bool(0.35) {
            let len = rng.gen_range(1..=3).min(n - p);
            spans.push(SlotSpan::new(p, p + len, types[rng.gen_range(0..types.len())]));
            p += len;
        } else {
            p += 1;
        }
    }
    spans
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<BioLabel> {
    (0..n)
        .map(|_| match rng.gen_range(0..3) {
            0 => BioLabel::O,
            1 => BioLabel::B(TYPES[rng.gen_range(0..3)].into()),
            _ => BioLabel::I(TYPES[rng.gen_range(0..3)].into()),
        })
        .collect()
}

fn bio_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let per_family = 10_000;
    for case in 0..per_family {
        let n = rng.gen_range(0..=12);
        let spans = random_spans(&mut rng, n, &TYPES[..3]);
        let bio = bio_from_spans(n, &spans).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(is_valid_bio(&bio), "case {case}: spans produced invalid BIO");
        let back = spans_from_bio(&bio).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(back == spans, "case {case}: spans -> BIO -> spans changed {spans:?} into {back:?}");

        let raw = random_labels(&mut rng, n);
        let repaired = repair_bio(&raw);
        ensure!(is_valid_bio(&repaired), "case {case}: repair produced invalid BIO");
        ensure!(repair_bio(&repaired) == repaired, "case {case}: repair is not idempotent");
        if is_valid_bio(&raw) {
            ensure!(repaired == raw, "case {case}: repair changed a valid sequence");
        }
        let spans2 = spans_from_bio(&repaired).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(
            bio_from_spans(n, &spans2).map_err(|e| e.to_string())? == repaired,
            "case {case}: BIO -> spans -> BIO changed the sequence"
        );
    }
    Ok(format!("{per_family} span lists and {per_family} label sequences"))
}

// ---------------------------------------------------------------------------
// Converter round trips

const WORDS: [&str; 12] = ["open", "the", "Photo", "café", "naïve", "don't", "42", "x-ray", ",", "?", "ÉTÉ", "tab"];

fn random_corpus(rng: &mut ChaCha8Rng, id: &str) -> Corpus {
    let mut corpus = Corpus::new(id, id);
    for u in 0..rng.gen_range(1..=8) {
        let n = rng.gen_range(1..=9);
        let words: Vec<&str> = (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
        let mut utt = Utterance::from_text(format!("r{u:03}"), words.join(" "));
        assert_eq!(utt.tokens.len(), n, "fixture words must tokenize one to one");
        utt.slots = random_spans(rng, n, &["color", "object", "amount"]);
        if rng.gen_bool(0.9) {
            utt.intent = Some(["crop", "rotate", "brighten"][rng.gen_range(0..3)].to_string());
        }
        utt.split = [Split::Train, Split::Dev, Split::Test][rng.gen_range(0..3)];
        corpus.push(utt);
    }
    corpus
}

fn same_content(a: &Corpus, b: &Corpus, check_ids: bool) -> Result<(), String> {
    ensure!(a.utterances.len() == b.utterances.len(), "utterance count {} != {}", a.utterances.len(), b.utterances.len());
    for (x, y) in a.utterances.iter().zip(&b.utterances) {
        ensure!(x.token_texts() == y.token_texts(), "tokens differ for {}", x.id);
        ensure!(x.bio().map_err(|e| e.to_string())? == y.bio().map_err(|e| e.to_string())?, "tags differ for {}", x.id);
        ensure!(x.intent == y.intent, "intent differs for {}", x.id);
        if check_ids {
            ensure!(x.id == y.id && x.split == y.split, "id or split differs for {}", x.id);
        }
    }
    Ok(())
}

fn converter_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let corpora = 600;
    let mut utterances = 0;
    for case in 0..corpora {
        let corpus = random_corpus(&mut rng, "rt");
        utterances += corpus.utterances.len();
        for format in [DatasetFormat::Conll, DatasetFormat::IntentJson] {
            let bytes = convert::export(format, &corpus);
            let (back, report) = convert::import(format, &bytes, "rt", "rt").map_err(|e| format!("case {case} {format:?}: {e}"))?;
            ensure!(report.dropped.is_empty(), "case {case} {format:?}: dropped {:?}", report.dropped);
            same_content(&corpus, &back, format == DatasetFormat::Conll).map_err(|e| format!("case {case} {format:?}: {e}"))?;
        }
    }
    Ok(format!("{corpora} corpora ({utterances} utterances) through CoNLL and intent JSON"))
}

// ---------------------------------------------------------------------------
// Learning on the separable toy corpus

fn toy_learning() -> Outcome {
    let bytes = std::fs::read(fixture("toy_separable.conll")).map_err(|e| e.to_string())?;
    let (corpus, _) = convert::import(DatasetFormat::Conll, &bytes, "toy", "toy").map_err(|e| e.to_string())?;
    let n_train = corpus.split(Split::Train).count();
    ensure!((35..=45).contains(&n_train), "fixture has {n_train} train utterances");
    ensure!(corpus.intents.len() == 3 && corpus.slot_types.len() == 3, "fixture must have 3 intents and 3 slot types");
    let train_vocab: HashSet<&str> = corpus.split(Split::Train).flat_map(|u| u.token_texts()).collect();
    ensure!(
        corpus.split(Split::Dev).flat_map(|u| u.token_texts()).all(|w| !train_vocab.contains(w)),
        "dev vocabulary overlaps train"
    );
    let hyper = Hyperparams {
        epochs: 10,
        ..Hyperparams::default()
    };
    let model = train_joint(&corpus, &hyper).map_err(|e| e.to_string())?;
    let train = evaluate_split(&model, &corpus, Split::Train).map_err(|e| e.to_string())?;
    let dev = evaluate_split(&model, &corpus, Split::Dev).map_err(|e| e.to_string())?;
    let train_acc = train.intent_accuracy.unwrap_or(0.0);
    let dev_acc = dev.intent_accuracy.unwrap_or(0.0);
    ensure!(train_acc == 1.0, "train intent accuracy {train_acc}");
    ensure!(train.slot_f1 == 1.0, "train slot F1 {}", train.slot_f1);
    ensure!(dev_acc >= 0.95, "dev intent accuracy {dev_acc}");
    Ok(format!(
        "train intent {train_acc:.3} slot F1 {:.3}; dev intent {dev_acc:.3} (slot F1 {:.3})",
        train.slot_f1, dev.slot_f1
    ))
}

// ---------------------------------------------------------------------------
// Keyphrase pipeline through the worker

/// Spans from tag strings, turning an `I-x` that does not continue an `x`
/// span into the start of a new one.
fn hand_spans(tags: &[String]) -> Vec<(usize, usize, String)> {
    let mut spans: Vec<(usize, usize, String)> = Vec::new();
    let mut open: Option<String> = None;
    for (i, tag) in tags.iter().enumerate() {
        if tag == "O" {
            open = None;
            continue;
        }
        let (kind, ty) = tag.split_at(2);
        if kind == "I-" && open.as_deref() == Some(ty) {
            spans.last_mut().unwrap().1 = i + 1;
        } else {
            spans.push((i, i + 1, ty.to_string()));
            open = Some(ty.to_string());
        }
    }
    spans
}

fn run_on_worker(worker: &Arc<Worker>, spec: JobSpec) -> Result<nluforge::worker::JobResult, String> {
    let id = spec.job_id.clone();
    worker.accept(spec).map_err(|e| e.to_string())?;
    let result = worker.wait(&id, Duration::from_secs(60)).ok_or("job timed out")?;
    ensure!(result.status == JobStatus::Succeeded, "job {id} failed: {:?}", result.error);
    Ok(result)
}

fn keyphrase_pipeline() -> Outcome {
    let dir = tmpdir();
    let store = Arc::new(FsStore::open(dir.path()).map_err(|e| e.to_string())?);
    let bytes = std::fs::read(fixture("keyphrases.jsonl")).map_err(|e| e.to_string())?;
    let (mut corpus, report) = convert::import(DatasetFormat::Keyphrase, &bytes, "kp", "kp").map_err(|e| e.to_string())?;
    ensure!(report.utterances_out == 20, "expected 20 documents, got {}", report.utterances_out);
    save_corpus(store.as_ref(), &mut corpus, None).map_err(|e| e.to_string())?;

    let worker = Worker::new("w-kp", 1, store.clone());
    let trained = run_on_worker(&worker, JobSpec::train("kp-train", "kp", Hyperparams::default()))?;
    let model = trained.model.ok_or("train job stored no model")?;
    run_on_worker(&worker, JobSpec::test("kp-test", "kp", "kp", model.version))?;
    let bundle = load_report(store.as_ref(), "kp-test", None).map_err(|e| e.to_string())?;

    let (mut tp, mut n_gold, mut n_pred) = (0usize, 0usize, 0usize);
    for utt in corpus.split(Split::Test) {
        let gold: HashSet<(usize, usize, String)> = utt.slots.iter().map(|s| (s.start, s.end, s.label.clone())).collect();
        let tags: Vec<String> = bundle.predictions[&utt.id].tags.iter().map(|t| t.to_string()).collect();
        let pred: HashSet<(usize, usize, String)> = hand_spans(&tags).into_iter().collect();
        tp += gold.intersection(&pred).count();
        n_gold += gold.len();
        n_pred += pred.len();
    }
    let f1 = if n_gold + n_pred == 0 { 1.0 } else { 2.0 * tp as f64 / (n_gold + n_pred) as f64 };
    let got = bundle.report.slot_f1;
    ensure!((f1 - got).abs() <= 1e-9, "hand-counted F1 {f1} vs reported {got}");
    if n_pred > 0 && n_gold > 0 {
        let p = tp as f64 / n_pred as f64;
        let r = tp as f64 / n_gold as f64;
        ensure!((p - bundle.report.slot_precision).abs() <= 1e-9, "precision {p} vs {}", bundle.report.slot_precision);
        ensure!((r - bundle.report.slot_recall).abs() <= 1e-9, "recall {r} vs {}", bundle.report.slot_recall);
    }
    Ok(format!("keyphrase F1 {got:.6} (tp {tp}, gold {n_gold}, predicted {n_pred}) matches the hand count"))
}

// ---------------------------------------------------------------------------
// Metric cross-checks

fn metric_cross_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut cells = 0;
    for case in 0..200 {
        let mut corpus = random_corpus(&mut rng, "m");
        for u in &mut corpus.utterances {
            u.split = Split::Test;
        }
        let mut preds = Predictions::new();
        for u in &corpus.utterances {
            let intent = Some(["crop", "rotate", "brighten", "undo"][rng.gen_range(0..4)].to_string());
            let tags = random_labels(&mut rng, u.tokens.len());
            preds.insert(u.id.clone(), Prediction { utterance_id: u.id.clone(), intent, tags });
        }
        let report = evaluate(&corpus, Split::Test, &preds, "m").map_err(|e| e.to_string())?;
        let intents = ConfusionMatrix::build(corpus.split(Split::Test), &preds, MatrixLevel::Intent).map_err(|e| e.to_string())?;
        if let Some(acc) = report.intent_accuracy {
            let ratio = intents.trace() as f64 / intents.total() as f64;
            ensure!((acc - ratio).abs() <= 1e-12, "case {case}: accuracy {acc} vs trace/mass {ratio}");
        }
        let tokens = ConfusionMatrix::build(corpus.split(Split::Test), &preds, MatrixLevel::TokenLabel).map_err(|e| e.to_string())?;
        for m in [&intents, &tokens] {
            for g in &m.labels {
                for p in &m.labels {
                    let rows = m.drill_down(g, p).map_err(|e| e.to_string())?;
                    ensure!(rows.len() == m.count(g, p), "case {case}: cell ({g}, {p}) lists {} of {}", rows.len(), m.count(g, p));
                    cells += 1;
                }
            }
        }
    }

    let lists = 1000;
    for case in 0..lists {
        let k = rng.gen_range(1..=5);
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        for _ in 0..k {
            let n = rng.gen_range(0..10);
            gold.push(random_spans(&mut rng, n, &TYPES[..2]));
            pred.push(random_spans(&mut rng, n, &TYPES[..2]));
        }
        let set = |lists: &[Vec<SlotSpan>]| -> BTreeSet<(usize, usize, usize, String)> {
            lists
                .iter()
                .enumerate()
                .flat_map(|(u, spans)| spans.iter().map(move |s| (u, s.start, s.end, s.label.clone())))
                .collect()
        };
        let (g, p) = (set(&gold), set(&pred));
        let tp = g.intersection(&p).count() as f64;
        let (ep, er) = match (p.len(), g.len()) {
            (0, 0) => (1.0, 1.0),
            (np, ng) => (
                if np == 0 { 0.0 } else { tp / np as f64 },
                if ng == 0 { 0.0 } else { tp / ng as f64 },
            ),
        };
        let ef = if ep + er == 0.0 { 0.0 } else { 2.0 * ep * er / (ep + er) };
        let got = slot_prf(&gold, &pred).map_err(|e| e.to_string())?;
        ensure!(
            (got.precision - ep).abs() <= 1e-12 && (got.recall - er).abs() <= 1e-12 && (got.f1 - ef).abs() <= 1e-12,
            "case {case}: slot_prf {got:?} vs oracle ({ep}, {er}, {ef})"
        );
    }
    Ok(format!("200 corpora, {cells} drill-down cells, {lists} span-list pairs"))
}

// ---------------------------------------------------------------------------
// Scheduler under randomized faults

fn scheduler_stress() -> Outcome {
    let seed = std::env::var("STRESS_SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(505);
    let clock = Arc::new(ManualClock::new(0));
    let plan = FaultPlan {
        busy_probability: 0.15,
        start_failure_probability: 0.1,
        job_failure_probability: 0.05,
        job_ms: (50, 3_000),
    };
    let cluster = ScriptedCluster::new(plan, clock.clone(), seed ^ 42);
    let pool = PoolPolicy {
        min_ready: 2,
        max_instances: 6,
        scale_up_queue_threshold: 3,
        idle_shutdown_s: 5,
    };
    let retry_cap = 3;
    let config = SchedulerConfig {
        pool: pool.clone(),
        retry_cap,
        heartbeat_timeout_ms: 2_000,
        instance_template: InstanceConfig {
            capacity_slots: 2,
            ..InstanceConfig::default()
        },
    };
    let sched = Scheduler::new(config, cluster.clone(), cluster.clone(), clock.clone()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut submitted: Vec<String> = Vec::new();
    let events: usize = std::env::var("STRESS_EVENTS").ok().and_then(|v| v.parse().ok()).unwrap_or(100_000);
    let mut floor_checks = 0;

    let check = |sched: &Scheduler, event: usize| -> Result<(), String> {
        sched.check_invariants().map_err(|e| format!("event {event}: {e}"))?;
        if let Some((running, capacity)) = cluster.worst_load() {
            ensure!(running <= capacity, "event {event}: a worker runs {running} jobs on {capacity} slots");
        }
        Ok(())
    };

    for event in 0..events {
        let now = clock.now_ms();
        match rng.gen_range(0..100) {
            0..=2 => {
                let mut spec = JobSpec::train("", "toy", Hyperparams::default());
                let mut target = None;
                if rng.gen_bool(0.1) {
                    let live: Vec<String> = sched
                        .instances()
                        .into_iter()
                        .filter(|i| matches!(i.state, InstanceState::Ready | InstanceState::Starting))
                        .map(|i| i.instance_id)
                        .collect();
                    if !live.is_empty() {
                        target = Some(live[rng.gen_range(0..live.len())].clone());
                    }
                }
                if rng.gen_bool(0.1) {
                    spec.team = Some("red".into());
                }
                match sched.submit_job(spec, target, None) {
                    Ok(id) => submitted.push(id),
                    Err(SchedulerError::InstanceUnavailable(_)) => {}
                    Err(e) => return Err(format!("event {event}: submit failed: {e}")),
                }
            }
            3 if !submitted.is_empty() => {
                // Recent jobs are the ones likely to still be active.
                let from = submitted.len().saturating_sub(4);
                let id = &submitted[rng.gen_range(from..submitted.len())];
                let _ = sched.cancel_job(id);
            }
            4 => {
                cluster.kill_random();
            }
            5 => {
                let config = InstanceConfig {
                    capacity_slots: rng.gen_range(1..=3),
                    reserved_by: rng.gen_bool(0.3).then(|| "red".to_string()),
                    pinned: rng.gen_bool(0.2),
                    ..InstanceConfig::default()
                };
                let _ = sched.create_instance(config);
            }
            6 => {
                let all = sched.instances();
                if !all.is_empty() {
                    let _ = sched.stop_instance(&all[rng.gen_range(0..all.len())].instance_id);
                }
            }
            7..=29 => {
                clock.advance(rng.gen_range(1..400));
            }
            30..=44 => {
                sched.heartbeat_sweep(now);
            }
            45..=64 => {
                sched.completion_tick(now);
            }
            65..=84 => {
                sched.assignment_tick(now);
            }
            _ => {
                let actions = sched.autoscale_tick(now);
                let insts = sched.instances();
                let up = insts.iter().filter(|i| matches!(i.state, InstanceState::Ready | InstanceState::Starting)).count();
                let live = insts.iter().filter(|i| i.state != InstanceState::Stopped).count();
                let spawn_failed = actions.iter().any(|a| matches!(a, ScaleAction::SpawnFailed { .. }));
                ensure!(
                    up >= pool.min_ready || spawn_failed || live >= pool.max_instances,
                    "event {event}: {up} instances up after autoscaling, floor {}",
                    pool.min_ready
                );
                if actions.iter().any(|a| matches!(a, ScaleAction::Stop { .. })) {
                    let ready = insts.iter().filter(|i| i.state == InstanceState::Ready).count();
                    ensure!(ready >= pool.min_ready, "event {event}: scale-down left {ready} ready");
                }
                floor_checks += 1;
            }
        }
        check(&sched, event)?;
    }

    // Drain: no more faults injected by the test; ticks until every job settles.
    let mut rounds = 0;
    loop {
        let jobs = sched.jobs();
        if jobs.iter().all(|j| j.state.is_terminal()) {
            break;
        }
        if rounds >= 2_000 {
            let stuck: Vec<String> = jobs
                .iter()
                .filter(|j| !j.state.is_terminal())
                .map(|j| format!("{} {} target={:?} team={:?} on={:?}", j.spec.job_id, j.state, j.target_instance, j.spec.team, j.assigned_instance))
                .collect();
            let insts: Vec<String> = sched
                .instances()
                .iter()
                .map(|i| format!("{} {:?} reserved={:?} pinned={} jobs={}", i.instance_id, i.state, i.reserved_by, i.pinned, i.assigned_jobs.len()))
                .collect();
            return Err(format!("jobs still active after draining: {stuck:?}; instances {insts:?}"));
        }
        clock.advance(250);
        sched.tick();
        check(&sched, events + rounds)?;
        rounds += 1;
    }

    let jobs = sched.jobs();
    let known: HashSet<&str> = jobs.iter().map(|j| j.spec.job_id.as_str()).collect();
    for id in &submitted {
        ensure!(known.contains(id.as_str()), "job {id} was lost");
    }
    let mut by_state = std::collections::BTreeMap::new();
    for j in &jobs {
        ensure!(j.attempts <= retry_cap, "job {} took {} attempts over a cap of {retry_cap}", j.spec.job_id, j.attempts);
        *by_state.entry(j.state.to_string()).or_insert(0) += 1;
    }
    let (dispatches, busy, kills) = cluster.stats();
    Ok(format!(
        "{events} events + {rounds} drain ticks, {} jobs {by_state:?}, {dispatches} dispatches, {busy} busy rejections, {kills} kills, {floor_checks} floor checks",
        submitted.len()
    ))
}

// ---------------------------------------------------------------------------
// End to end through the binary with worker subprocesses

const BIN: &str = env!("CARGO_BIN_EXE_nluforge");

fn cli(api: &str, args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN)
        .arg("--api")
        .arg(api)
        .args(args)
        .env_remove("NLUFORGE_API")
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    ensure!(
        out.status.success(),
        "`nluforge {}` exited {:?}: {}{}",
        args.join(" "),
        out.status.code(),
        stdout,
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(stdout)
}

/// Sends SIGTERM so the server stops its worker subprocesses, then waits.
struct Served(Child);

impl Drop for Served {
    fn drop(&mut self) {
        let _ = Command::new("kill").arg("-TERM").arg(self.0.id().to_string()).status();
        let deadline = Instant::now() + Duration::from_secs(10);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.0.try_wait() {
                return;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn end_to_end_cli() -> Outcome {
    let dir = tmpdir();
    let mut child = Command::new(BIN)
        .args(["--store-root"])
        .arg(dir.path())
        .args(["serve", "--bind", "127.0.0.1:0"])
        .env_remove("NLUFORGE_API")
        .env("NLUFORGE_PROVIDER", "subprocess")
        .env("NLUFORGE_TICK_PERIOD_S", "0.05")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let stdout = child.stdout.take().expect("piped");
    let served = Served(child);
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).map_err(|e| e.to_string())?;
    let api = line.trim().strip_prefix("listening on ").ok_or_else(|| format!("unexpected first line {line:?}"))?.to_string();

    let conll = fixture("confusable.conll");
    cli(&api, &["dataset", "import", conll.to_str().unwrap(), "--format", "conll", "--name", "confusable", "--id", "confusable"])?;
    cli(&api, &["train", "confusable", "--wait", "--job-id", "e2e-train"])?;
    cli(&api, &["test", "confusable", "--model", "confusable", "--wait", "--job-id", "e2e-test"])?;

    let client = ApiClient::new(&api).map_err(|e| e.to_string())?;
    let workers: Vec<String> = client.list_instances().map_err(|e| e.to_string())?.into_iter().map(|i| i.endpoint).collect();
    ensure!(workers.iter().all(|w| w.starts_with("http://")), "instances are not subprocess workers: {workers:?}");
    let matrix = client.confusion("e2e-test", MatrixLevel::TokenLabel).map_err(|e| e.to_string())?;
    let (gold, pred) = ("B-adjust_brightness", "B-adjust_color");
    let count = matrix.cells.iter().find(|c| c.gold == gold && c.pred == pred).map_or(0, |c| c.count);
    ensure!(count > 0, "cell ({gold}, {pred}) is empty: {:?}", matrix.cells);
    let page = client.confusion_cell("e2e-test", MatrixLevel::TokenLabel, gold, pred, None, Some(1)).map_err(|e| e.to_string())?;
    ensure!(page.count == count, "cell page reports {} of {count}", page.count);
    let mut rows = page.items.clone();
    let mut cursor = page.next_cursor.clone();
    while let Some(c) = cursor {
        let next = client.confusion_cell("e2e-test", MatrixLevel::TokenLabel, gold, pred, Some(&c), Some(1)).map_err(|e| e.to_string())?;
        rows.extend(next.items);
        cursor = next.next_cursor;
    }
    ensure!(rows.len() == count, "drill-down listed {} of {count}", rows.len());
    let texts: Vec<&str> = rows.iter().map(|r| r.rendered_text.as_str()).collect();
    ensure!(texts.contains(&"[[lighten]] the vegetables"), "drill-down rows {texts:?}");

    drop(served);
    let http = reqwest::blocking::Client::builder().timeout(Duration::from_secs(2)).build().map_err(|e| e.to_string())?;
    for w in &workers {
        ensure!(http.get(format!("{w}/is_free")).send().is_err(), "worker {w} outlived the server");
    }
    Ok(format!("cell ({gold}, {pred}) holds {count}: {texts:?}; {} worker process(es) stopped", workers.len()))
}

// ---------------------------------------------------------------------------
// Determinism

fn train_and_test_once() -> Result<(Vec<u8>, Vec<u8>), String> {
    let dir = tmpdir();
    let config = PlatformConfig {
        store_root: dir.path().join("store"),
        tick_period_s: 0.02,
        ..PlatformConfig::default()
    };
    let platform = Platform::open(config).map_err(|e| e.to_string())?;
    let _ticker = platform.start_ticker();
    platform
        .import_dataset(ImportRequest {
            format: DatasetFormat::Conll,
            name: "toy".into(),
            id: Some("toy".into()),
            payload: None,
            payload_path: Some(fixture("toy_separable.conll")),
        })
        .map_err(|e| e.to_string())?;
    let wait = |id: &str| -> Result<(), String> {
        let deadline = Instant::now() + Duration::from_secs(60);
        loop {
            let job = platform.get_job(id).map_err(|e| e.to_string())?;
            if job.state.is_terminal() {
                ensure!(job.state == JobState::Succeeded, "job {id} {}: {:?}", job.state, job.error);
                return Ok(());
            }
            ensure!(Instant::now() < deadline, "job {id} timed out");
            std::thread::sleep(Duration::from_millis(10));
        }
    };
    let mut train = JobSpec::train("d-train", "toy", Hyperparams { seed: 11, ..Hyperparams::default() });
    train.seeds = vec![3, 5, 7];
    platform
        .submit_job(SubmitJobRequest {
            spec: train,
            target_instance: None,
            idempotency_key: None,
        })
        .map_err(|e| e.to_string())?;
    wait("d-train")?;
    let mut test = JobSpec::test("d-test", "toy", "toy", "x".into());
    test.model.as_mut().unwrap().version = None;
    test.split = Some(Split::Dev);
    platform
        .submit_job(SubmitJobRequest {
            spec: test,
            target_instance: None,
            idempotency_key: None,
        })
        .map_err(|e| e.to_string())?;
    wait("d-test")?;
    let store = platform.store();
    let model = store.get(&ObjectKey::model("toy").unwrap(), None).map_err(|e| e.to_string())?;
    let report = store.get(&ObjectKey::report("d-test").unwrap(), None).map_err(|e| e.to_string())?;
    Ok((model, report))
}

fn determinism() -> Outcome {
    let (m1, r1) = train_and_test_once()?;
    let (m2, r2) = train_and_test_once()?;
    ensure!(m1 == m2, "model archives differ ({} vs {} bytes)", m1.len(), m2.len());
    ensure!(r1 == r2, "reports differ ({} vs {} bytes)", r1.len(), r2.len());
    Ok(format!("model archive {} bytes and report {} bytes identical across runs", m1.len(), r1.len()))
}

// ---------------------------------------------------------------------------

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let secs = |s| Some(Duration::from_secs(s));
    let criteria = [
        Criterion { name: "viterbi_matches_exhaustive_search", budget: secs(30), run: viterbi_oracle },
        Criterion { name: "bio_round_trip", budget: secs(10), run: bio_round_trip },
        Criterion { name: "converter_round_trip", budget: secs(30), run: converter_round_trip },
        Criterion { name: "toy_corpus_learning", budget: secs(10), run: toy_learning },
        Criterion { name: "keyphrase_pipeline_hand_count", budget: secs(20), run: keyphrase_pipeline },
        Criterion { name: "metric_cross_checks", budget: secs(10), run: metric_cross_checks },
        Criterion { name: "scheduler_safety_liveness", budget: secs(60), run: scheduler_stress },
        Criterion { name: "end_to_end_cli", budget: secs(60), run: end_to_end_cli },
        Criterion { name: "determinism", budget: None, run: determinism },
    ];
    let mut failed = 0;
    let mut ran = 0;
    for c in criteria.iter().filter(|c| filter.as_deref().is_none_or(|f| c.name.contains(f))) {
        ran += 1;
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {:.1}s, budget {}s", elapsed.as_secs_f64(), b.as_secs())),
            (o, _) => o,
        };
        let budget = c.budget.map_or(String::new(), |b| format!(" / {}s", b.as_secs()));
        match outcome {
            Ok(detail) => println!("PASS {} ({:.2}s{budget}): {detail}", c.name, elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {} ({:.2}s{budget}): {why}", c.name, elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
