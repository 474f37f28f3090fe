use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::artifacts::{load_corpus, load_report, save_corpus};
use crate::convert::{self, ConversionReport, DatasetFormat};
use crate::eval::{EvaluationReport, InstanceRef, MatrixLevel, MatrixSummary};
use crate::ir::{add_utterance, edit_utterance, has_errors, validate_corpus, Corpus, SlotSpan, Split, Token, Utterance, UtterancePatch, ValidationIssue};
use crate::scheduler::{
    HttpWorkerClient, InstanceConfig, InstanceProvider, InstanceRecord, JobRecord, Scheduler, SimulatedCluster, SubprocessProvider, SystemClock,
    WorkerClient,
};
use crate::store::{download_model, FsStore, Namespace, ObjectKey, ObjectStore, VersionId, VersionInfo};
use crate::worker::{JobKind, JobSpec};

use super::config::{PlatformConfig, ProviderKind};
use super::{ApiError, ErrorCode};

/// Default and maximum page sizes for drill-down listings.
pub const DEFAULT_PAGE: usize = 100;
const MAX_PAGE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportRequest {
    pub format: DatasetFormat,
    pub name: String,
    /// Corpus id; derived from `name` when absent.
    #[serde(default)]
    pub id: Option<String>,
    /// Inline file contents.
    #[serde(default)]
    pub payload: Option<String>,
    /// A path readable by the server.
    #[serde(default)]
    pub payload_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub id: String,
    pub name: String,
    pub version: u64,
    pub n_utterances: usize,
    pub splits: BTreeMap<Split, usize>,
    pub intents: BTreeSet<String>,
    pub slot_types: BTreeSet<String>,
}

impl DatasetSummary {
    fn of(c: &Corpus) -> Self {
        let mut splits = BTreeMap::new();
        for u in &c.utterances {
            *splits.entry(u.split).or_insert(0) += 1;
        }
        DatasetSummary {
            id: c.id.clone(),
            name: c.name.clone(),
            version: c.version,
            n_utterances: c.utterances.len(),
            splits,
            intents: c.intents.clone(),
            slot_types: c.slot_types.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportResponse {
    pub dataset: DatasetSummary,
    pub conversion: ConversionReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetView {
    pub id: String,
    pub name: String,
    pub version: u64,
    pub intents: BTreeSet<String>,
    pub slot_types: BTreeSet<String>,
    pub utterances: Vec<Utterance>,
}

impl DatasetView {
    pub fn into_corpus(self) -> Corpus {
        let mut c = Corpus::new(self.id, self.name);
        c.version = self.version;
        c.intents = self.intents;
        c.slot_types = self.slot_types;
        c.utterances = self.utterances;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub expected_version: u64,
    pub patch: UtterancePatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddUtteranceRequest {
    pub expected_version: u64,
    pub id: String,
    pub text: String,
    /// Tokenized from `text` when absent.
    #[serde(default)]
    pub tokens: Option<Vec<Token>>,
    #[serde(default)]
    pub intent: Option<String>,
    #[serde(default)]
    pub slots: Vec<SlotSpan>,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitJobRequest {
    pub spec: JobSpec,
    #[serde(default)]
    pub target_instance: Option<String>,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportView {
    pub key: String,
    pub version: VersionId,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellPage {
    pub level: MatrixLevel,
    pub gold: String,
    pub pred: String,
    /// Cell count; equals the total number of items across all pages.
    pub count: usize,
    pub items: Vec<InstanceRef>,
    pub next_cursor: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationResult {
    /// False when any issue is an error.
    pub valid: bool,
    pub issues: Vec<ValidationIssue>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub versions: Vec<VersionInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

/// Lowercases and replaces characters outside `[a-z0-9._-]` with `-`.
fn slug(name: &str) -> String {
    let s: String = name
        .trim()
        .chars()
        .map(|c| {
            let c = c.to_ascii_lowercase();
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '-'
            }
        })
        .collect();
    s.trim_matches('-').to_string()
}

/// Datasets, jobs, reports, instances and models behind one handle.
pub struct Platform {
    config: PlatformConfig,
    store: Arc<FsStore>,
    scheduler: Arc<Scheduler>,
}

impl Platform {
    /// Opens the store and builds the scheduler with the configured
    /// provider.
    pub fn open(config: PlatformConfig) -> Result<Arc<Self>, ApiError> {
        config.validate().map_err(|e| ApiError::new(ErrorCode::BadConfig, e.to_string()))?;
        let unwritable = |e: &dyn std::fmt::Display| {
            ApiError::new(
                ErrorCode::StoreUnwritable,
                format!("store root {} is not writable: {e}", config.store_root.display()),
            )
        };
        let store = FsStore::open(&config.store_root).map_err(|e| unwritable(&e))?;
        store.check_writable().map_err(|e| unwritable(&e))?;
        let store = Arc::new(store);
        let (provider, client): (Arc<dyn InstanceProvider>, Arc<dyn WorkerClient>) = match config.provider {
            ProviderKind::Simulated => {
                let cluster = SimulatedCluster::new(store.clone());
                (cluster.clone(), cluster)
            }
            ProviderKind::Subprocess => {
                let program = match &config.worker_program {
                    Some(p) => p.clone(),
                    None => std::env::current_exe().map_err(|e| ApiError::new(ErrorCode::BadConfig, e.to_string()))?,
                };
                let root = std::fs::canonicalize(&config.store_root).map_err(|e| unwritable(&e))?;
                (Arc::new(SubprocessProvider::new(program, root)), Arc::new(HttpWorkerClient::new()))
            }
        };
        let scheduler = Scheduler::new(config.scheduler_config(), provider, client, Arc::new(SystemClock))?;
        Ok(Arc::new(Platform {
            config,
            store,
            scheduler: Arc::new(scheduler),
        }))
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<FsStore> {
        &self.store
    }

    pub fn scheduler(&self) -> &Arc<Scheduler> {
        &self.scheduler
    }

    /// Runs scheduler ticks on a background thread until the returned
    /// handle is dropped.
    pub fn start_ticker(self: &Arc<Self>) -> Ticker {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let sched = self.scheduler.clone();
        let period = Duration::from_secs_f64(self.config.tick_period_s);
        let thread = std::thread::spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                sched.tick();
                std::thread::sleep(period);
            }
        });
        Ticker {
            stop,
            thread: Some(thread),
        }
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    // -- datasets -----------------------------------------------------------

    pub fn import_dataset(&self, req: ImportRequest) -> Result<ImportResponse, ApiError> {
        let bytes = match (req.payload, &req.payload_path) {
            (Some(p), None) => p.into_bytes(),
            (None, Some(path)) => std::fs::read(path).map_err(|e| ApiError::invalid(format!("cannot read {}: {e}", path.display())))?,
            _ => return Err(ApiError::invalid("give exactly one of payload and payload_path")),
        };
        let id = req.id.clone().unwrap_or_else(|| slug(&req.name));
        ObjectKey::dataset(id.as_str()).map_err(|_| ApiError::invalid(format!("invalid dataset id {id:?}")))?;
        let (mut corpus, conversion) = convert::import(req.format, &bytes, &id, &req.name)?;
        let issues = validate_corpus(&corpus);
        if has_errors(&issues) {
            let errors: Vec<ValidationIssue> = issues.into_iter().filter(|i| i.is_error()).collect();
            return Err(ApiError::new(ErrorCode::ValidationFailed, "imported corpus has errors").with_detail("issues", errors));
        }
        save_corpus(self.store.as_ref(), &mut corpus, None)?;
        Ok(ImportResponse {
            dataset: DatasetSummary::of(&corpus),
            conversion,
        })
    }

    pub fn list_datasets(&self) -> Result<Vec<DatasetSummary>, ApiError> {
        self.store
            .list_keys(Namespace::Datasets)?
            .into_iter()
            .map(|k| Ok(DatasetSummary::of(&load_corpus(self.store.as_ref(), &k.name, None)?)))
            .collect()
    }

    pub fn corpus(&self, id: &str, version: Option<u64>) -> Result<Corpus, ApiError> {
        Ok(load_corpus(self.store.as_ref(), id, version)?)
    }

    pub fn get_dataset(&self, id: &str, version: Option<u64>) -> Result<DatasetView, ApiError> {
        let c = self.corpus(id, version)?;
        Ok(DatasetView {
            id: c.id,
            name: c.name,
            version: c.version,
            intents: c.intents,
            slot_types: c.slot_types,
            utterances: c.utterances,
        })
    }

    pub fn export_dataset(&self, id: &str, version: Option<u64>, format: DatasetFormat) -> Result<Vec<u8>, ApiError> {
        Ok(convert::export(format, &self.corpus(id, version)?))
    }

    pub fn validate_dataset(&self, id: &str, version: Option<u64>) -> Result<ValidationResult, ApiError> {
        let issues = validate_corpus(&self.corpus(id, version)?);
        Ok(ValidationResult {
            valid: !has_errors(&issues),
            issues,
        })
    }

    /// Applies `edit_utterance` to the latest version and stores the result
    /// as the next version. Stale `expected_version`s are conflicts.
    pub fn edit_utterance(&self, id: &str, uid: &str, req: EditRequest) -> Result<DatasetSummary, ApiError> {
        let current = self.corpus(id, None)?;
        let mut next = edit_utterance(&current, uid, &req.patch, req.expected_version)?;
        save_corpus(self.store.as_ref(), &mut next, Some(req.expected_version))?;
        Ok(DatasetSummary::of(&next))
    }

    pub fn add_utterance(&self, id: &str, req: AddUtteranceRequest) -> Result<DatasetSummary, ApiError> {
        let current = self.corpus(id, None)?;
        let mut utt = match req.tokens {
            Some(tokens) => Utterance {
                id: req.id,
                text: req.text,
                tokens,
                intent: None,
                slots: Vec::new(),
                split: Split::Train,
                meta: BTreeMap::new(),
            },
            None => Utterance::from_text(req.id, req.text),
        };
        utt.intent = req.intent;
        utt.slots = req.slots;
        utt.split = req.split;
        let mut next = add_utterance(&current, utt, req.expected_version)?;
        save_corpus(self.store.as_ref(), &mut next, Some(req.expected_version))?;
        Ok(DatasetSummary::of(&next))
    }

    // -- jobs ---------------------------------------------------------------

    /// Pins unpinned corpus and model versions to the latest ones, then
    /// queues the job.
    pub fn submit_job(&self, req: SubmitJobRequest) -> Result<JobRecord, ApiError> {
        let mut spec = req.spec;
        if let Some(k) = &req.idempotency_key {
            if let Some(existing) = self.scheduler.jobs().into_iter().find(|j| j.idempotency_key.as_ref() == Some(k)) {
                return Ok(existing);
            }
        }
        if spec.corpus.version.is_none() {
            spec.corpus.version = Some(self.corpus(&spec.corpus.id, None)?.version);
        }
        if spec.kind == JobKind::Test {
            let model = spec.model.as_mut().ok_or_else(|| ApiError::invalid("a test job needs a model"))?;
            if model.version.is_none() {
                let key = ObjectKey::model(model.name.as_str())?;
                let latest = self.store.latest(&key)?.ok_or_else(|| ApiError::not_found(format!("model {} not found", model.name)))?;
                model.version = Some(latest.id);
            }
        }
        let id = self.scheduler.submit_job(spec, req.target_instance, req.idempotency_key)?;
        Ok(self.scheduler.job(&id).expect("just submitted"))
    }

    pub fn list_jobs(&self) -> Vec<JobRecord> {
        self.scheduler.jobs()
    }

    pub fn get_job(&self, id: &str) -> Result<JobRecord, ApiError> {
        self.scheduler.job(id).ok_or_else(|| ApiError::not_found(format!("unknown job {id:?}")))
    }

    pub fn cancel_job(&self, id: &str) -> Result<JobRecord, ApiError> {
        Ok(self.scheduler.cancel_job(id)?)
    }

    // -- reports ------------------------------------------------------------

    pub fn get_report(&self, key: &str) -> Result<ReportView, ApiError> {
        let okey = ObjectKey::report(key)?;
        let version = self.store.latest(&okey)?.ok_or_else(|| ApiError::not_found(format!("report {key} not found")))?.id;
        let bundle = load_report(self.store.as_ref(), key, Some(&version))?;
        Ok(ReportView {
            key: key.to_string(),
            version,
            report: bundle.report,
        })
    }

    pub fn confusion(&self, key: &str, level: MatrixLevel) -> Result<MatrixSummary, ApiError> {
        let bundle = load_report(self.store.as_ref(), key, None)?;
        let matrix = bundle
            .matrix(level)
            .ok_or_else(|| ApiError::not_found(format!("report {key} has no {level:?} matrix")))?;
        Ok(matrix.summary())
    }

    /// One page of the instances behind a matrix cell. `cursor` is the
    /// offset returned as `next_cursor` by the previous page.
    pub fn confusion_cell(
        &self,
        key: &str,
        level: MatrixLevel,
        gold: &str,
        pred: &str,
        cursor: Option<&str>,
        limit: Option<usize>,
    ) -> Result<CellPage, ApiError> {
        let bundle = load_report(self.store.as_ref(), key, None)?;
        let matrix = bundle
            .matrix(level)
            .ok_or_else(|| ApiError::not_found(format!("report {key} has no {level:?} matrix")))?;
        let all = matrix.drill_down(gold, pred)?;
        let offset: usize = match cursor {
            None | Some("") => 0,
            Some(c) => c.parse().map_err(|_| ApiError::invalid(format!("bad cursor {c:?}")))?,
        };
        let limit = limit.unwrap_or(DEFAULT_PAGE).clamp(1, MAX_PAGE);
        let end = (offset + limit).min(all.len());
        let items = all.get(offset..end).map(<[InstanceRef]>::to_vec).unwrap_or_default();
        Ok(CellPage {
            level,
            gold: gold.to_string(),
            pred: pred.to_string(),
            count: matrix.count(gold, pred),
            items,
            next_cursor: (end < all.len()).then(|| end.to_string()),
        })
    }

    // -- instances ----------------------------------------------------------

    pub fn list_instances(&self) -> Vec<InstanceRecord> {
        self.scheduler.instances()
    }

    pub fn create_instance(&self, config: InstanceConfig) -> Result<InstanceRecord, ApiError> {
        Ok(self.scheduler.create_instance(config)?)
    }

    pub fn stop_instance(&self, id: &str) -> Result<InstanceRecord, ApiError> {
        Ok(self.scheduler.stop_instance(id)?)
    }

    // -- models -------------------------------------------------------------

    pub fn list_models(&self) -> Result<Vec<ModelSummary>, ApiError> {
        self.store
            .list_keys(Namespace::Models)?
            .into_iter()
            .map(|k| {
                Ok(ModelSummary {
                    versions: self.store.list_versions(&k)?,
                    name: k.name,
                })
            })
            .collect()
    }

    pub fn download_model(&self, name: &str, version: Option<&VersionId>) -> Result<Vec<u8>, ApiError> {
        let key = ObjectKey::model(name)?;
        Ok(download_model(self.store.as_ref(), &key, version)?)
    }
}

/// Background scheduler ticks; stops when dropped.
pub struct Ticker {
    stop: Arc<AtomicBool>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Drop for Ticker {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
