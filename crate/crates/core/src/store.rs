//! On-disk store.
//!
//! Layout under the store root:
//!
//! ```text
//! runs/<run_id>/manifest.json    immutable run inputs (RunManifest, pretty JSON)
//! runs/<run_id>/log              append-only record log
//! runs/<run_id>/index.jsonl      {"advertiser_id": .., "offset": ..} per outcome record
//! runs/<run_id>/profiles.jsonl   one ContentProfile per candidate
//! runs/<run_id>/labels.jsonl     ground-truth snapshot used for the run's report
//! templates/<id>.r<rev>.txt      every template revision a run referenced
//! triage/*.jsonl                 categories, assignments, revisions, reviewer labels, hint exposures
//! ```
//!
//! The log is a sequence of records, each a 4-byte little-endian unsigned
//! length `N` followed by `N` bytes of UTF-8 JSON ([`LogRecord`]). A torn
//! record at the tail (short length prefix, short body or unparseable final
//! body) is ignored by readers and truncated away when a writer reopens the
//! run. The index is advisory and rebuilt from the log when it disagrees.
//!
//! Run ids are content addressed: the lowercase hex SHA-256 of
//! `"acu-run-v1\n"` followed by the compact JSON object
//! `{"backend_kind":..,"candidates":[..],"policy_id":..,"template_id":..,"template_revision":..}`
//! with keys in exactly that (lexicographic) order, no whitespace, and
//! candidates in selection order.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Label;
use crate::eval::{Prediction, Split};
use crate::llm_gateway::{BackendFailure, BackendKind};
use crate::profiler::ContentProfile;
use crate::promptkit::{ParseError, PromptTemplate, Verdict};

const RUN_ID_DOMAIN: &[u8] = b"acu-run-v1\n";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("store unavailable at {0}")]
    Unavailable(PathBuf),
    #[error("corrupt store file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("run {run_id} is {status:?}, not RUNNING")]
    RunNotRunning { run_id: String, status: RunStatus },
    #[error("conflicting outcome for advertiser {advertiser_id} in run {run_id}")]
    DuplicateConflict { run_id: String, advertiser_id: String },
    #[error("run {run_id} is missing outcomes for {missing:?}")]
    IncompleteRun { run_id: String, missing: Vec<String> },
    #[error("advertiser {advertiser_id} is not a candidate of run {run_id}")]
    NotACandidate { run_id: String, advertiser_id: String },
    #[error("run {0} already has a writer")]
    WriterBusy(String),
    #[error("existing manifest for run {0} does not match")]
    ManifestMismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

/// The inputs that identify a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunKey {
    pub backend_kind: BackendKind,
    pub candidates: Vec<String>,
    pub policy_id: String,
    pub template_id: String,
    pub template_revision: u32,
}

impl RunKey {
    pub fn run_id(&self) -> String {
        // Field declaration order above is the canonical key order.
        let body = serde_json::to_vec(self).expect("RunKey serializes");
        let mut h = Sha256::new();
        h.update(RUN_ID_DOMAIN);
        h.update(&body);
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    #[serde(flatten)]
    pub key: RunKey,
    /// Split filter the candidates were selected under.
    pub split: Option<Split>,
    /// Split of every candidate.
    pub splits: BTreeMap<String, Split>,
    pub created_at: DateTime<Utc>,
}

impl RunManifest {
    pub fn new(key: RunKey, split: Option<Split>, splits: BTreeMap<String, Split>) -> Self {
        Self {
            run_id: key.run_id(),
            key,
            split,
            splits,
            created_at: Utc::now(),
        }
    }

    fn same_inputs(&self, other: &RunManifest) -> bool {
        // The split filter is informational; the candidate set already reflects it.
        self.run_id == other.run_id && self.key == other.key && self.splits == other.splits
    }
}

/// What happened when one advertiser was classified.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "value", rename_all = "snake_case")]
pub enum Outcome {
    Verdict(Verdict),
    ParseError(ParseError),
    BackendError(BackendFailure),
}

impl Outcome {
    /// Backend errors are retryable; the other outcomes are final.
    pub fn is_final(&self) -> bool {
        !matches!(self, Outcome::BackendError(_))
    }

    pub fn prediction(&self) -> Prediction {
        match self {
            Outcome::Verdict(v) => Prediction::Decided(v.decision),
            _ => Prediction::Unparsed,
        }
    }

    pub fn verdict(&self) -> Option<&Verdict> {
        match self {
            Outcome::Verdict(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Outcome {
        advertiser_id: String,
        outcome: Outcome,
        recorded_at: DateTime<Utc>,
    },
    Status {
        status: RunStatus,
        at: DateTime<Utc>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub manifest: RunManifest,
    pub status: RunStatus,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub failure_reason: Option<String>,
    /// Byte offset in the log of each advertiser's current outcome.
    pub verdict_refs: BTreeMap<String, u64>,
}

impl RunRecord {
    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }
}

/// A consistent read of one run at a record boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSnapshot {
    pub record: RunRecord,
    pub outcomes: BTreeMap<String, Outcome>,
}

impl RunSnapshot {
    pub fn missing(&self) -> Vec<String> {
        self.record
            .manifest
            .key
            .candidates
            .iter()
            .filter(|id| !self.outcomes.get(*id).is_some_and(Outcome::is_final))
            .cloned()
            .collect()
    }

    /// Outcomes in candidate order.
    pub fn predictions(&self) -> Vec<(String, Prediction)> {
        self.record
            .manifest
            .key
            .candidates
            .iter()
            .filter_map(|id| self.outcomes.get(id).map(|o| (id.clone(), o.prediction())))
            .collect()
    }
}

struct ScannedLog {
    records: Vec<(u64, LogRecord)>,
    /// End of the last complete record.
    valid_len: u64,
    file_len: u64,
}

fn scan_log(path: &Path) -> Result<ScannedLog, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut records = Vec::new();
    let mut pos = 0usize;
    while pos < bytes.len() {
        let Some(prefix) = bytes.get(pos..pos + 4) else { break };
        let len = u32::from_le_bytes(prefix.try_into().expect("4 bytes")) as usize;
        let Some(body) = bytes.get(pos + 4..pos + 4 + len) else {
            break;
        };
        match serde_json::from_slice::<LogRecord>(body) {
            Ok(rec) => records.push((pos as u64, rec)),
            Err(_) if pos + 4 + len == bytes.len() => break,
            Err(e) => {
                return Err(StoreError::Corrupt {
                    path: path.to_path_buf(),
                    detail: format!("record at offset {pos}: {e}"),
                })
            }
        }
        pos += 4 + len;
    }
    Ok(ScannedLog {
        records,
        valid_len: pos as u64,
        file_len: bytes.len() as u64,
    })
}

fn fold_log(manifest: RunManifest, records: &[(u64, LogRecord)]) -> RunSnapshot {
    let mut status = RunStatus::Running;
    let mut started_at = manifest.created_at;
    let mut finished_at = None;
    let mut failure_reason = None;
    let mut outcomes = BTreeMap::new();
    let mut refs = BTreeMap::new();
    let mut first_status = true;
    for (offset, rec) in records {
        match rec {
            LogRecord::Outcome {
                advertiser_id, outcome, ..
            } => {
                outcomes.insert(advertiser_id.clone(), outcome.clone());
                refs.insert(advertiser_id.clone(), *offset);
            }
            LogRecord::Status { status: s, at, reason } => {
                if first_status {
                    started_at = *at;
                    first_status = false;
                }
                status = *s;
                match s {
                    RunStatus::Running => {
                        finished_at = None;
                        failure_reason = None;
                    }
                    RunStatus::Complete | RunStatus::Failed => {
                        finished_at = Some(*at);
                        failure_reason = reason.clone();
                    }
                }
            }
        }
    }
    RunSnapshot {
        record: RunRecord {
            manifest,
            status,
            started_at,
            finished_at,
            failure_reason,
            verdict_refs: refs,
        },
        outcomes,
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    advertiser_id: String,
    offset: u64,
}

fn encode_record(rec: &LogRecord) -> Vec<u8> {
    let body = serde_json::to_vec(rec).expect("log record serializes");
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut line = serde_json::to_vec(value).expect("record serializes");
    line.push(b'\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(&line).map_err(io_err(path))?;
    f.sync_data().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(io_err(path))?;
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            // torn final line from an interrupted append
            Err(_) if i == last => break,
            Err(e) => {
                return Err(StoreError::Corrupt {
                    path: path.to_path_buf(),
                    detail: format!("line {}: {e}", i + 1),
                })
            }
        }
    }
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    triage_lock: Mutex<()>,
}

impl Store {
    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for dir in ["runs", "templates", "triage"] {
            let p = root.join(dir);
            fs::create_dir_all(&p).map_err(|_| StoreError::Unavailable(root.clone()))?;
        }
        Ok(Self {
            root,
            triage_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn triage_file(&self, name: &str) -> PathBuf {
        self.root.join("triage").join(name)
    }

    /// Serializes triage writes; readers may take it for a consistent view.
    pub fn lock_triage(&self) -> MutexGuard<'_, ()> {
        self.triage_lock.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn save_template(&self, template: &PromptTemplate) -> Result<(), StoreError> {
        let path = self
            .root
            .join("templates")
            .join(format!("{}.r{}.txt", template.template_id, template.revision));
        if !path.exists() {
            write_atomic(&path, template.to_file_text().as_bytes())?;
        }
        Ok(())
    }

    pub fn run_exists(&self, run_id: &str) -> bool {
        self.run_dir(run_id).join("manifest.json").exists()
    }

    fn read_manifest(&self, run_id: &str) -> Result<RunManifest, StoreError> {
        if run_id.is_empty() || run_id.contains(['/', '\\', '.']) {
            return Err(StoreError::UnknownRun(run_id.to_string()));
        }
        let path = self.run_dir(run_id).join("manifest.json");
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::UnknownRun(run_id.to_string())),
            Err(e) => return Err(io_err(&path)(e)),
        };
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
            path,
            detail: e.to_string(),
        })
    }

    /// Creates the run, or reopens it for resumption. A FAILED run goes back
    /// to RUNNING; a COMPLETE run is returned read-only.
    pub fn begin_run(&self, manifest: RunManifest) -> Result<RunWriter, StoreError> {
        let dir = self.run_dir(&manifest.run_id);
        let manifest_path = dir.join("manifest.json");
        if manifest_path.exists() {
            let existing = self.read_manifest(&manifest.run_id)?;
            if !existing.same_inputs(&manifest) {
                return Err(StoreError::ManifestMismatch(manifest.run_id));
            }
        } else {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let body = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
            write_atomic(&manifest_path, &body)?;
        }
        let mut writer = self.open_writer(&manifest.run_id)?;
        if writer.status() == RunStatus::Failed {
            writer.append_status(RunStatus::Running, None)?;
        }
        Ok(writer)
    }

    /// Opens the single writer for an existing run.
    pub fn open_writer(&self, run_id: &str) -> Result<RunWriter, StoreError> {
        let manifest = self.read_manifest(run_id)?;
        let dir = self.run_dir(run_id);
        let log_path = dir.join("log");
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        match file.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(StoreError::WriterBusy(run_id.to_string())),
            Err(fs::TryLockError::Error(e)) => return Err(io_err(&log_path)(e)),
        }
        let scanned = scan_log(&log_path)?;
        if scanned.valid_len < scanned.file_len {
            tracing::warn!(
                run_id,
                dropped = scanned.file_len - scanned.valid_len,
                "truncating torn log tail"
            );
            file.set_len(scanned.valid_len).map_err(io_err(&log_path))?;
        }
        let mut writer = RunWriter {
            snapshot: fold_log(manifest, &scanned.records),
            file,
            log_path,
            index_path: dir.join("index.jsonl"),
            end: scanned.valid_len,
        };
        writer.reconcile_index()?;
        if scanned.records.is_empty() {
            writer.append_status(RunStatus::Running, None)?;
        }
        Ok(writer)
    }

    pub fn load_run(&self, run_id: &str) -> Result<RunSnapshot, StoreError> {
        let manifest = self.read_manifest(run_id)?;
        let scanned = scan_log(&self.run_dir(run_id).join("log"))?;
        Ok(fold_log(manifest, &scanned.records))
    }

    /// All runs, oldest first.
    pub fn list_runs(&self) -> Result<Vec<RunRecord>, StoreError> {
        let dir = self.root.join("runs");
        let mut runs = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let Some(name) = entry.file_name().to_str().map(str::to_string) else {
                continue;
            };
            if self.run_exists(&name) {
                runs.push(self.load_run(&name)?.record);
            }
        }
        runs.sort_by(|a, b| {
            a.manifest
                .created_at
                .cmp(&b.manifest.created_at)
                .then_with(|| a.run_id().cmp(b.run_id()))
        });
        Ok(runs)
    }

    /// Reads one advertiser's current outcome through the index.
    pub fn read_outcome(&self, run_id: &str, advertiser_id: &str) -> Result<Option<Outcome>, StoreError> {
        self.read_manifest(run_id)?;
        let dir = self.run_dir(run_id);
        let index: Vec<IndexEntry> = read_jsonl(&dir.join("index.jsonl")).unwrap_or_default();
        let log_path = dir.join("log");
        if let Some(entry) = index.iter().rev().find(|e| e.advertiser_id == advertiser_id) {
            if let Some(LogRecord::Outcome {
                advertiser_id: found,
                outcome,
                ..
            }) = read_record_at(&log_path, entry.offset)?
            {
                if found == advertiser_id {
                    return Ok(Some(outcome));
                }
            }
        }
        Ok(self.load_run(run_id)?.outcomes.remove(advertiser_id))
    }

    pub fn write_profiles(&self, run_id: &str, profiles: &[ContentProfile]) -> Result<(), StoreError> {
        let path = self.run_dir(run_id).join("profiles.jsonl");
        if path.exists() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for p in profiles {
            serde_json::to_writer(&mut buf, p).expect("profile serializes");
            buf.push(b'\n');
        }
        write_atomic(&path, &buf)
    }

    pub fn read_profiles(&self, run_id: &str) -> Result<Vec<ContentProfile>, StoreError> {
        self.read_manifest(run_id)?;
        read_jsonl(&self.run_dir(run_id).join("profiles.jsonl"))
    }

    /// The advertiser's profile from `run_id`, or from the newest run that has one.
    pub fn find_profile(
        &self,
        advertiser_id: &str,
        run_id: Option<&str>,
    ) -> Result<Option<ContentProfile>, StoreError> {
        let runs: Vec<String> = match run_id {
            Some(id) => vec![id.to_string()],
            None => self.list_runs()?.iter().rev().map(|r| r.run_id().to_string()).collect(),
        };
        for id in runs {
            if let Some(p) = self
                .read_profiles(&id)?
                .into_iter()
                .find(|p| p.advertiser_id == advertiser_id)
            {
                return Ok(Some(p));
            }
        }
        Ok(None)
    }

    pub fn write_run_labels(&self, run_id: &str, labels: &BTreeMap<String, Label>) -> Result<(), StoreError> {
        #[derive(Serialize)]
        struct Line<'a> {
            advertiser_id: &'a str,
            label: Label,
        }
        let path = self.run_dir(run_id).join("labels.jsonl");
        if path.exists() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for (id, label) in labels {
            serde_json::to_writer(
                &mut buf,
                &Line {
                    advertiser_id: id,
                    label: *label,
                },
            )
            .expect("label serializes");
            buf.push(b'\n');
        }
        write_atomic(&path, &buf)
    }

    pub fn run_labels(&self, run_id: &str) -> Result<BTreeMap<String, Label>, StoreError> {
        #[derive(Deserialize)]
        struct Line {
            advertiser_id: String,
            label: Label,
        }
        self.read_manifest(run_id)?;
        Ok(read_jsonl::<Line>(&self.run_dir(run_id).join("labels.jsonl"))?
            .into_iter()
            .map(|l| (l.advertiser_id, l.label))
            .collect())
    }
}

fn read_record_at(path: &Path, offset: u64) -> Result<Option<LogRecord>, StoreError> {
    let mut f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(io_err(path)(e)),
    };
    f.seek(SeekFrom::Start(offset)).map_err(io_err(path))?;
    let mut prefix = [0u8; 4];
    if f.read_exact(&mut prefix).is_err() {
        return Ok(None);
    }
    let mut body = vec![0u8; u32::from_le_bytes(prefix) as usize];
    if f.read_exact(&mut body).is_err() {
        return Ok(None);
    }
    Ok(serde_json::from_slice(&body).ok())
}

/// What [`RunWriter::record`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordEffect {
    Appended,
    /// Identical payload already present.
    Unchanged,
}

/// Exclusive writer for one run. The log file lock is held until drop.
#[derive(Debug)]
pub struct RunWriter {
    snapshot: RunSnapshot,
    file: File,
    log_path: PathBuf,
    index_path: PathBuf,
    end: u64,
}

impl RunWriter {
    pub fn run_id(&self) -> &str {
        self.snapshot.record.run_id()
    }

    pub fn status(&self) -> RunStatus {
        self.snapshot.record.status
    }

    pub fn snapshot(&self) -> &RunSnapshot {
        &self.snapshot
    }

    pub fn outcome(&self, advertiser_id: &str) -> Option<&Outcome> {
        self.snapshot.outcomes.get(advertiser_id)
    }

    /// Candidates still lacking a final outcome, in candidate order.
    pub fn pending(&self) -> Vec<String> {
        self.snapshot.missing()
    }

    fn append(&mut self, rec: &LogRecord) -> Result<u64, StoreError> {
        let bytes = encode_record(rec);
        let offset = self.end;
        self.file
            .seek(SeekFrom::Start(offset))
            .map_err(io_err(&self.log_path))?;
        self.file.write_all(&bytes).map_err(io_err(&self.log_path))?;
        self.file.sync_data().map_err(io_err(&self.log_path))?;
        self.end += bytes.len() as u64;
        Ok(offset)
    }

    fn append_status(&mut self, status: RunStatus, reason: Option<String>) -> Result<(), StoreError> {
        let rec = LogRecord::Status {
            status,
            at: Utc::now(),
            reason,
        };
        self.append(&rec)?;
        let manifest = self.snapshot.record.manifest.clone();
        self.snapshot = fold_log(manifest, &self.replay()?);
        Ok(())
    }

    fn replay(&self) -> Result<Vec<(u64, LogRecord)>, StoreError> {
        Ok(scan_log(&self.log_path)?.records)
    }

    fn reconcile_index(&mut self) -> Result<(), StoreError> {
        let expected: Vec<IndexEntry> = self
            .replay()?
            .into_iter()
            .filter_map(|(offset, rec)| match rec {
                LogRecord::Outcome { advertiser_id, .. } => Some(IndexEntry { advertiser_id, offset }),
                _ => None,
            })
            .collect();
        let current: Vec<IndexEntry> = read_jsonl(&self.index_path).unwrap_or_default();
        let same = current.len() == expected.len()
            && current
                .iter()
                .zip(&expected)
                .all(|(a, b)| a.advertiser_id == b.advertiser_id && a.offset == b.offset);
        if !same {
            let mut buf = Vec::new();
            for e in &expected {
                serde_json::to_writer(&mut buf, e).expect("index entry serializes");
                buf.push(b'\n');
            }
            write_atomic(&self.index_path, &buf)?;
        }
        Ok(())
    }

    /// Records one advertiser's outcome. Writing an identical payload again
    /// is a no-op; a backend error may be superseded; any other differing
    /// payload is a [`StoreError::DuplicateConflict`].
    pub fn record(&mut self, advertiser_id: &str, outcome: Outcome) -> Result<RecordEffect, StoreError> {
        let run_id = self.run_id().to_string();
        if !self
            .snapshot
            .record
            .manifest
            .key
            .candidates
            .iter()
            .any(|c| c == advertiser_id)
        {
            return Err(StoreError::NotACandidate {
                run_id,
                advertiser_id: advertiser_id.to_string(),
            });
        }
        if let Some(existing) = self.snapshot.outcomes.get(advertiser_id) {
            if *existing == outcome {
                return Ok(RecordEffect::Unchanged);
            }
            if existing.is_final() {
                return Err(StoreError::DuplicateConflict {
                    run_id,
                    advertiser_id: advertiser_id.to_string(),
                });
            }
        }
        if self.status() != RunStatus::Running {
            return Err(StoreError::RunNotRunning {
                run_id,
                status: self.status(),
            });
        }
        let rec = LogRecord::Outcome {
            advertiser_id: advertiser_id.to_string(),
            outcome: outcome.clone(),
            recorded_at: Utc::now(),
        };
        let offset = self.append(&rec)?;
        append_jsonl(
            &self.index_path,
            &IndexEntry {
                advertiser_id: advertiser_id.to_string(),
                offset,
            },
        )?;
        self.snapshot.outcomes.insert(advertiser_id.to_string(), outcome);
        self.snapshot
            .record
            .verdict_refs
            .insert(advertiser_id.to_string(), offset);
        Ok(RecordEffect::Appended)
    }

    pub fn mark_failed(&mut self, reason: impl Into<String>) -> Result<(), StoreError> {
        if self.status() == RunStatus::Running {
            self.append_status(RunStatus::Failed, Some(reason.into()))?;
        }
        Ok(())
    }

    /// Marks the run COMPLETE. Idempotent on a complete run.
    pub fn finalize(&mut self) -> Result<RunRecord, StoreError> {
        match self.status() {
            RunStatus::Complete => return Ok(self.snapshot.record.clone()),
            RunStatus::Failed => {
                return Err(StoreError::RunNotRunning {
                    run_id: self.run_id().to_string(),
                    status: RunStatus::Failed,
                })
            }
            RunStatus::Running => {}
        }
        let missing = self.pending();
        if !missing.is_empty() {
            return Err(StoreError::IncompleteRun {
                run_id: self.run_id().to_string(),
                missing,
            });
        }
        self.append_status(RunStatus::Complete, None)?;
        Ok(self.snapshot.record.clone())
    }
}
