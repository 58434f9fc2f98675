//! Models, sequences and feature tracks served from disk, plus job records.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::io::{read_features, read_sequence, FeatureTrack, FormatError};
use crate::data::MotionSequence;
use crate::denoiser::{load_checkpoint, CheckpointError, DenoiserModel};

pub const CHECKPOINT_EXT: &str = "ckpt";
pub const SEQUENCE_EXT: &str = "mseq";
pub const FEATURE_EXT: &str = "feat";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Read-only collection keyed by file stem.
#[derive(Debug, Default, Clone)]
pub struct Store {
    pub models: BTreeMap<String, Arc<DenoiserModel>>,
    pub sequences: BTreeMap<String, Arc<MotionSequence>>,
    pub features: BTreeMap<String, Arc<FeatureTrack>>,
}

fn files_with(dir: &Path, ext: &str) -> Result<Vec<(String, PathBuf)>, StoreError> {
    let rd = fs::read_dir(dir).map_err(|source| StoreError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for entry in rd.flatten() {
        let p = entry.path();
        if p.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), p.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

impl Store {
    /// Loads every checkpoint in `model_dir` and every sequence and feature
    /// file in `data_dir`.
    pub fn scan(model_dir: &Path, data_dir: Option<&Path>) -> Result<Self, StoreError> {
        let mut store = Store::default();
        for (name, path) in files_with(model_dir, CHECKPOINT_EXT)? {
            let m =
                load_checkpoint(&path).map_err(|source| StoreError::Checkpoint { path, source })?;
            store.models.insert(name, Arc::new(m));
        }
        if let Some(dir) = data_dir {
            for (id, path) in files_with(dir, SEQUENCE_EXT)? {
                let s =
                    read_sequence(&path).map_err(|source| StoreError::Format { path, source })?;
                store.sequences.insert(id, Arc::new(s));
            }
            for (id, path) in files_with(dir, FEATURE_EXT)? {
                let f =
                    read_features(&path).map_err(|source| StoreError::Format { path, source })?;
                store.features.insert(id, Arc::new(f));
            }
        }
        Ok(store)
    }

    pub fn with_model(mut self, name: &str, model: DenoiserModel) -> Self {
        self.models.insert(name.into(), Arc::new(model));
        self
    }

    pub fn with_sequence(mut self, id: &str, seq: MotionSequence) -> Self {
        self.sequences.insert(id.into(), Arc::new(seq));
        self
    }

    pub fn with_features(mut self, id: &str, track: FeatureTrack) -> Self {
        self.features.insert(id.into(), Arc::new(track));
        self
    }

    /// Features paired with a sequence id `X.face` or `X.head` are stored as `X`.
    pub fn paired_features(&self, sequence_id: &str) -> Option<&Arc<FeatureTrack>> {
        let stem = sequence_id.rsplit_once('.').map_or(sequence_id, |(s, _)| s);
        self.features.get(stem)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Train,
    Sample,
    Edit,
    Eval,
}

impl JobKind {
    pub fn name(self) -> &'static str {
        match self {
            JobKind::Train => "train",
            JobKind::Sample => "sample",
            JobKind::Edit => "edit",
            JobKind::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobDescriptor {
    pub id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Response payload of a finished background job.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
}

/// Job ids are unique within one run directory: numbering resumes after the
/// highest id already recorded there.
#[derive(Debug)]
pub struct JobRegistry {
    next: AtomicU64,
    jobs: Mutex<BTreeMap<String, JobDescriptor>>,
    run_dir: Option<PathBuf>,
}

impl JobRegistry {
    pub fn new(run_dir: Option<PathBuf>) -> Self {
        let mut start = 1;
        if let Some(dir) = &run_dir {
            if let Ok(rd) = fs::read_dir(dir.join("jobs")) {
                for e in rd.flatten() {
                    let name = e.file_name().to_string_lossy().into_owned();
                    let n = name
                        .trim_end_matches(".json")
                        .rsplit('-')
                        .next()
                        .and_then(|s| s.parse::<u64>().ok());
                    if let Some(n) = n {
                        start = start.max(n + 1);
                    }
                }
            }
        }
        Self {
            next: AtomicU64::new(start),
            jobs: Mutex::new(BTreeMap::new()),
            run_dir,
        }
    }

    pub fn run_dir(&self) -> Option<&Path> {
        self.run_dir.as_deref()
    }

    pub fn create(&self, kind: JobKind) -> JobDescriptor {
        let n = self.next.fetch_add(1, Ordering::Relaxed);
        let job = JobDescriptor {
            id: format!("{}-{n:06}", kind.name()),
            kind,
            status: JobStatus::Pending,
            artifacts: Vec::new(),
            error: None,
            result: None,
        };
        self.put(job.clone());
        job
    }

    pub fn get(&self, id: &str) -> Option<JobDescriptor> {
        self.jobs.lock().unwrap().get(id).cloned()
    }

    /// Stores the descriptor and mirrors it into `<run_dir>/jobs/`.
    pub fn put(&self, job: JobDescriptor) {
        if let Some(dir) = &self.run_dir {
            let jobs = dir.join("jobs");
            if fs::create_dir_all(&jobs).is_ok() {
                let mut summary = job.clone();
                summary.result = None;
                let _ = fs::write(
                    jobs.join(format!("{}.json", job.id)),
                    serde_json::to_vec_pretty(&summary).expect("job serializes"),
                );
            }
        }
        self.jobs.lock().unwrap().insert(job.id.clone(), job);
    }

    pub fn update(&self, id: &str, f: impl FnOnce(&mut JobDescriptor)) {
        let job = self.jobs.lock().unwrap().get(id).cloned();
        if let Some(mut job) = job {
            f(&mut job);
            self.put(job);
        }
    }
}
