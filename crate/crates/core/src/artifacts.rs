//! Typed access to the artifact store: corpora under `datasets/<id>`,
//! model archives under `models/<name>` and report bundles under
//! `reports/<job_id>`. A corpus version is the store's version counter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{ConfusionMatrix, EvalError, EvaluationReport, MatrixLevel, Predictions};
use crate::ir::{Corpus, IrError, Split};
use crate::models::{predict_split, JointModel, ModelError};
use crate::store::{ObjectKey, ObjectStore, StoreError, VersionId};

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("corrupt artifact {key}: {message}")]
    Corrupt { key: String, message: String },
}

/// A pinned object: `namespace/name` plus a version id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub key: String,
    pub version: VersionId,
}

impl ArtifactRef {
    pub fn new(key: &ObjectKey, version: VersionId) -> Self {
        ArtifactRef {
            key: key.to_string(),
            version,
        }
    }
}

/// The version id whose counter is `counter`.
pub fn resolve_version(store: &dyn ObjectStore, key: &ObjectKey, counter: u64) -> Result<VersionId, StoreError> {
    let versions = store.list_versions(key)?;
    if versions.is_empty() {
        return Err(StoreError::NotFound(key.to_string()));
    }
    versions
        .into_iter()
        .map(|v| v.id)
        .find(|id| id.counter() == counter)
        .ok_or_else(|| StoreError::VersionNotFound {
            key: key.to_string(),
            version: counter.to_string(),
        })
}

pub fn load_corpus(store: &dyn ObjectStore, id: &str, version: Option<u64>) -> Result<Corpus, ArtifactError> {
    let key = ObjectKey::dataset(id)?;
    let vid = match version {
        Some(v) => resolve_version(store, &key, v)?,
        None => store.latest(&key)?.ok_or_else(|| StoreError::NotFound(key.to_string()))?.id,
    };
    let mut corpus = Corpus::from_ir_bytes(&store.get(&key, Some(&vid))?)?;
    corpus.version = vid.counter();
    Ok(corpus)
}

/// Writes `corpus` as the next version of `datasets/<corpus.id>` and sets
/// `corpus.version` to it. With `expected`, fails on a concurrent writer.
pub fn save_corpus(store: &dyn ObjectStore, corpus: &mut Corpus, expected: Option<u64>) -> Result<VersionId, ArtifactError> {
    let key = ObjectKey::dataset(corpus.id.clone())?;
    let bytes = corpus.to_ir_bytes();
    let vid = match expected {
        Some(e) => store.put_expecting(&key, &bytes, e)?,
        None => store.put(&key, &bytes)?,
    };
    corpus.version = vid.counter();
    Ok(vid)
}

pub fn load_model(store: &dyn ObjectStore, name: &str, version: Option<&VersionId>) -> Result<(JointModel, VersionId), ArtifactError> {
    let key = ObjectKey::model(name)?;
    let vid = match version {
        Some(v) => v.clone(),
        None => store.latest(&key)?.ok_or_else(|| StoreError::NotFound(key.to_string()))?.id,
    };
    let model = JointModel::from_archive(&store.get(&key, Some(&vid))?)?;
    Ok((model, vid))
}

/// Everything a test run produces: the scores, both confusion matrices and
/// the raw predictions they were computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub report: EvaluationReport,
    /// Absent when the split has no gold intents.
    pub intent_confusion: Option<ConfusionMatrix>,
    pub token_confusion: ConfusionMatrix,
    pub predictions: Predictions,
}

impl ReportBundle {
    pub fn compute(model: &JointModel, corpus: &Corpus, split: Split) -> Result<Self, ArtifactError> {
        let predictions = predict_split(model, corpus, split);
        let report = crate::eval::evaluate(corpus, split, &predictions, &model.model_version)?;
        let intent_confusion = if report.intent_accuracy.is_some() {
            Some(ConfusionMatrix::build(corpus.split(split), &predictions, MatrixLevel::Intent)?)
        } else {
            None
        };
        let token_confusion = ConfusionMatrix::build(corpus.split(split), &predictions, MatrixLevel::TokenLabel)?;
        Ok(ReportBundle {
            report,
            intent_confusion,
            token_confusion,
            predictions,
        })
    }

    pub fn matrix(&self, level: MatrixLevel) -> Option<&ConfusionMatrix> {
        match level {
            MatrixLevel::Intent => self.intent_confusion.as_ref(),
            MatrixLevel::TokenLabel => Some(&self.token_confusion),
        }
    }

    /// Pretty JSON with a trailing newline; byte-stable for equal bundles.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("bundle serializes");
        out.push(b'\n');
        out
    }
}

pub fn save_report(store: &dyn ObjectStore, name: &str, bundle: &ReportBundle) -> Result<ArtifactRef, ArtifactError> {
    let key = ObjectKey::report(name)?;
    let vid = store.put(&key, &bundle.to_bytes())?;
    Ok(ArtifactRef::new(&key, vid))
}

pub fn load_report(store: &dyn ObjectStore, name: &str, version: Option<&VersionId>) -> Result<ReportBundle, ArtifactError> {
    let key = ObjectKey::report(name)?;
    let bytes = store.get(&key, version)?;
    serde_json::from_slice(&bytes).map_err(|e| ArtifactError::Corrupt {
        key: key.to_string(),
        message: e.to_string(),
    })
}
