//! Prompt-tuning triage.
//!
//! Misclassified advertisers from tuning splits are binned into error
//! categories by reviewers; each template revision is tied to the categories
//! it addresses. Advertisers in the HOLDOUT split can never be binned.
//!
//! Everything is stored append-only under `triage/` in the [`Store`]:
//! `categories.jsonl`, `assignments.jsonl`, `revisions.jsonl`,
//! `labels.jsonl` (reviewer-submitted labels) and `hint_exposures.jsonl`.
//! Reads resolve "latest wins" per key. Reviewer labels never feed back into
//! a run's ground truth on their own; [`promoted_labels`] exports them so an
//! operator can pass them as a labels override file.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::eval::{Prediction, Split};
use crate::store::{append_jsonl, read_jsonl, Outcome, Store, StoreError};

const CATEGORIES: &str = "categories.jsonl";
const ASSIGNMENTS: &str = "assignments.jsonl";
const REVISIONS: &str = "revisions.jsonl";
const REVIEWER_LABELS: &str = "labels.jsonl";
const HINT_EXPOSURES: &str = "hint_exposures.jsonl";

pub const DEFAULT_CATEGORIES: [(&str, &str); 4] = [
    (
        "missed brand context",
        "The model ignored what is known about the advertiser's brand.",
    ),
    ("policy scope confusion", "The model misread what the policy covers."),
    (
        "profile too sparse",
        "The content profile did not carry enough evidence.",
    ),
    (
        "output format failure",
        "The answer did not follow the labeled-section format.",
    ),
];

#[derive(Debug, Error)]
pub enum TriageError {
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("unknown category {0}")]
    UnknownCategory(String),
    #[error("advertiser {advertiser_id} is not part of run {run_id}")]
    UnknownAdvertiser { run_id: String, advertiser_id: String },
    #[error("advertiser {advertiser_id} is in the HOLDOUT split and cannot be triaged")]
    HoldoutViolation { run_id: String, advertiser_id: String },
    #[error("revision gap for template {template_id}: expected {expected_from}->{}, got {from}->{to}", expected_from + 1)]
    RevisionGap {
        template_id: String,
        expected_from: u32,
        from: u32,
        to: u32,
    },
    #[error("category {0} already exists")]
    DuplicateCategory(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for TriageError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownRun(id) => TriageError::UnknownRun(id),
            other => TriageError::Store(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCategory {
    pub category_id: String,
    pub title: String,
    pub description: String,
    pub created_in_revision: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageAssignment {
    pub assignment_id: u64,
    pub run_id: String,
    pub advertiser_id: String,
    pub category_id: String,
    pub reviewer_note: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer_label: Option<Label>,
    pub timestamp: DateTime<Utc>,
}

/// Request to bin one error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewAssignment {
    pub run_id: String,
    pub advertiser_id: String,
    pub category_id: String,
    #[serde(default)]
    pub reviewer_note: String,
    #[serde(default)]
    pub reviewer_label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevisionLedgerEntry {
    pub template_id: String,
    pub from_revision: u32,
    pub to_revision: u32,
    pub addressed_category_ids: Vec<String>,
    pub change_note: String,
    pub timestamp: DateTime<Utc>,
}

impl RevisionLedgerEntry {
    pub fn next(template_id: &str, from_revision: u32, addressed: Vec<String>, change_note: &str) -> Self {
        Self {
            template_id: template_id.to_string(),
            from_revision,
            to_revision: from_revision + 1,
            addressed_category_ids: addressed,
            change_note: change_note.to_string(),
            timestamp: Utc::now(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewerLabel {
    pub advertiser_id: String,
    pub label: Label,
    pub reviewer: String,
    pub hints_were_shown: bool,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HintExposure {
    pub advertiser_id: String,
    pub run_id: String,
    pub hints_shown: bool,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Fp,
    Fn,
    Unparsed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCase {
    pub advertiser_id: String,
    pub kind: ErrorKind,
    pub truth: Label,
    pub predicted: Option<Label>,
    pub split: Option<Split>,
    pub advertiser_summary: Option<String>,
    pub products_services: Option<String>,
    pub rationale: Option<String>,
    /// Parse or backend failure description for unparsed cases.
    pub failure: Option<String>,
}

pub fn slugify(title: &str) -> String {
    let mut slug = String::new();
    for c in title.trim().chars() {
        if c.is_alphanumeric() {
            slug.extend(c.to_lowercase());
        } else if !slug.ends_with('-') && !slug.is_empty() {
            slug.push('-');
        }
    }
    slug.trim_end_matches('-').to_string()
}

fn seed_categories(store: &Store) -> Result<(), TriageError> {
    let path = store.triage_file(CATEGORIES);
    if path.exists() {
        return Ok(());
    }
    for (title, description) in DEFAULT_CATEGORIES {
        append_jsonl(
            &path,
            &ErrorCategory {
                category_id: slugify(title),
                title: title.to_string(),
                description: description.to_string(),
                created_in_revision: 1,
            },
        )?;
    }
    Ok(())
}

fn read_categories(store: &Store) -> Result<Vec<ErrorCategory>, TriageError> {
    seed_categories(store)?;
    Ok(read_jsonl(&store.triage_file(CATEGORIES))?)
}

pub fn categories(store: &Store) -> Result<Vec<ErrorCategory>, TriageError> {
    let _guard = store.lock_triage();
    read_categories(store)
}

pub fn create_category(
    store: &Store,
    title: &str,
    description: &str,
    created_in_revision: u32,
) -> Result<ErrorCategory, TriageError> {
    let category_id = slugify(title);
    if category_id.is_empty() {
        return Err(TriageError::Invalid("category title must not be empty".into()));
    }
    let _guard = store.lock_triage();
    if read_categories(store)?.iter().any(|c| c.category_id == category_id) {
        return Err(TriageError::DuplicateCategory(category_id));
    }
    let category = ErrorCategory {
        category_id,
        title: title.trim().to_string(),
        description: description.to_string(),
        created_in_revision: created_in_revision.max(1),
    };
    append_jsonl(&store.triage_file(CATEGORIES), &category)?;
    Ok(category)
}

/// Misclassified and unparsed cases of a run against `labels`, by advertiser id.
/// Candidates without a ground-truth label are not evaluated.
pub fn list_errors(
    store: &Store,
    run_id: &str,
    labels: &BTreeMap<String, Label>,
) -> Result<Vec<ErrorCase>, TriageError> {
    let snapshot = store.load_run(run_id)?;
    let splits = &snapshot.record.manifest.splits;
    let mut cases = Vec::new();
    for (id, outcome) in &snapshot.outcomes {
        let Some(&truth) = labels.get(id) else { continue };
        let kind = match (outcome.prediction(), truth) {
            (Prediction::Unparsed, _) => ErrorKind::Unparsed,
            (Prediction::Decided(Label::NonViolating), Label::Violating) => ErrorKind::Fp,
            (Prediction::Decided(Label::Violating), Label::NonViolating) => ErrorKind::Fn,
            _ => continue,
        };
        let verdict = outcome.verdict();
        cases.push(ErrorCase {
            advertiser_id: id.clone(),
            kind,
            truth,
            predicted: verdict.map(|v| v.decision),
            split: splits.get(id).copied(),
            advertiser_summary: verdict.map(|v| v.advertiser_summary.clone()),
            products_services: verdict.map(|v| v.products_services.clone()),
            rationale: verdict.map(|v| v.rationale.clone()),
            failure: match outcome {
                Outcome::ParseError(e) => Some(e.to_string()),
                Outcome::BackendError(f) => Some(format!("{}: {}", f.code, f.message)),
                Outcome::Verdict(_) => None,
            },
        });
    }
    Ok(cases)
}

/// Stores an assignment and returns its id. Re-binning the same
/// `(run, advertiser)` supersedes the earlier assignment; history is kept.
pub fn bin_error(store: &Store, request: NewAssignment) -> Result<u64, TriageError> {
    let snapshot = store.load_run(&request.run_id)?;
    let _guard = store.lock_triage();
    if !read_categories(store)?
        .iter()
        .any(|c| c.category_id == request.category_id)
    {
        return Err(TriageError::UnknownCategory(request.category_id));
    }
    let manifest = &snapshot.record.manifest;
    if !manifest.key.candidates.contains(&request.advertiser_id) {
        return Err(TriageError::UnknownAdvertiser {
            run_id: request.run_id,
            advertiser_id: request.advertiser_id,
        });
    }
    if manifest.splits.get(&request.advertiser_id) == Some(&Split::Holdout) {
        return Err(TriageError::HoldoutViolation {
            run_id: request.run_id,
            advertiser_id: request.advertiser_id,
        });
    }
    let path = store.triage_file(ASSIGNMENTS);
    let assignment_id = read_jsonl::<TriageAssignment>(&path)?.len() as u64 + 1;
    append_jsonl(
        &path,
        &TriageAssignment {
            assignment_id,
            run_id: request.run_id,
            advertiser_id: request.advertiser_id,
            category_id: request.category_id,
            reviewer_note: request.reviewer_note,
            reviewer_label: request.reviewer_label,
            timestamp: Utc::now(),
        },
    )?;
    Ok(assignment_id)
}

pub fn all_assignments(store: &Store) -> Result<Vec<TriageAssignment>, TriageError> {
    let _guard = store.lock_triage();
    Ok(read_jsonl(&store.triage_file(ASSIGNMENTS))?)
}

/// Latest assignment per advertiser for one run.
pub fn current_assignments(store: &Store, run_id: &str) -> Result<BTreeMap<String, TriageAssignment>, TriageError> {
    store.load_run(run_id)?;
    let mut current = BTreeMap::new();
    for a in all_assignments(store)?.into_iter().filter(|a| a.run_id == run_id) {
        current.insert(a.advertiser_id.clone(), a);
    }
    Ok(current)
}

pub fn assignment_history(
    store: &Store,
    run_id: &str,
    advertiser_id: &str,
) -> Result<Vec<TriageAssignment>, TriageError> {
    Ok(all_assignments(store)?
        .into_iter()
        .filter(|a| a.run_id == run_id && a.advertiser_id == advertiser_id)
        .collect())
}

pub fn category_histogram(store: &Store, run_id: &str) -> Result<BTreeMap<String, usize>, TriageError> {
    let mut hist = BTreeMap::new();
    for a in current_assignments(store, run_id)?.into_values() {
        *hist.entry(a.category_id).or_insert(0) += 1;
    }
    Ok(hist)
}

pub fn revisions(store: &Store) -> Result<Vec<RevisionLedgerEntry>, TriageError> {
    let _guard = store.lock_triage();
    Ok(read_jsonl(&store.triage_file(REVISIONS))?)
}

/// Highest recorded revision of a template; 1 when nothing has been recorded.
pub fn latest_revision(store: &Store, template_id: &str) -> Result<u32, TriageError> {
    Ok(revisions(store)?
        .iter()
        .filter(|e| e.template_id == template_id)
        .map(|e| e.to_revision)
        .max()
        .unwrap_or(1))
}

/// Revision 1 always exists; later ones only once the ledger records them.
pub fn revision_exists(store: &Store, template_id: &str, revision: u32) -> Result<bool, TriageError> {
    Ok(revision == 1
        || revisions(store)?
            .iter()
            .any(|e| e.template_id == template_id && e.to_revision == revision))
}

/// Appends to the ledger and returns the 1-based ledger position.
pub fn record_revision(store: &Store, entry: RevisionLedgerEntry) -> Result<usize, TriageError> {
    if entry.addressed_category_ids.is_empty() {
        return Err(TriageError::Invalid(
            "a revision must address at least one category".into(),
        ));
    }
    let _guard = store.lock_triage();
    let known: BTreeSet<String> = read_categories(store)?.into_iter().map(|c| c.category_id).collect();
    if let Some(unknown) = entry.addressed_category_ids.iter().find(|c| !known.contains(*c)) {
        return Err(TriageError::UnknownCategory(unknown.clone()));
    }
    let path = store.triage_file(REVISIONS);
    let ledger: Vec<RevisionLedgerEntry> = read_jsonl(&path)?;
    let expected_from = ledger
        .iter()
        .filter(|e| e.template_id == entry.template_id)
        .map(|e| e.to_revision)
        .max()
        .unwrap_or(1);
    if entry.from_revision != expected_from || entry.to_revision != entry.from_revision + 1 {
        return Err(TriageError::RevisionGap {
            template_id: entry.template_id,
            expected_from,
            from: entry.from_revision,
            to: entry.to_revision,
        });
    }
    append_jsonl(&path, &entry)?;
    Ok(ledger.len() + 1)
}

pub fn record_hint_exposure(
    store: &Store,
    run_id: &str,
    advertiser_id: &str,
    hints_shown: bool,
) -> Result<HintExposure, TriageError> {
    let exposure = HintExposure {
        advertiser_id: advertiser_id.to_string(),
        run_id: run_id.to_string(),
        hints_shown,
        timestamp: Utc::now(),
    };
    let _guard = store.lock_triage();
    append_jsonl(&store.triage_file(HINT_EXPOSURES), &exposure)?;
    Ok(exposure)
}

pub fn hint_exposures(store: &Store) -> Result<Vec<HintExposure>, TriageError> {
    let _guard = store.lock_triage();
    Ok(read_jsonl(&store.triage_file(HINT_EXPOSURES))?)
}

/// Stores a reviewer label. When `hints_were_shown` is not given, the
/// advertiser's most recent hint exposure decides it.
pub fn submit_label(
    store: &Store,
    advertiser_id: &str,
    label: Label,
    reviewer: &str,
    hints_were_shown: Option<bool>,
) -> Result<ReviewerLabel, TriageError> {
    if advertiser_id.is_empty() {
        return Err(TriageError::Invalid("advertiser_id must not be empty".into()));
    }
    let _guard = store.lock_triage();
    let hints_were_shown = match hints_were_shown {
        Some(shown) => shown,
        None => read_jsonl::<HintExposure>(&store.triage_file(HINT_EXPOSURES))?
            .iter()
            .rev()
            .find(|e| e.advertiser_id == advertiser_id)
            .map(|e| e.hints_shown)
            .ok_or_else(|| {
                TriageError::Invalid("hints_were_shown is required when no hint exposure was recorded".into())
            })?,
    };
    let record = ReviewerLabel {
        advertiser_id: advertiser_id.to_string(),
        label,
        reviewer: reviewer.to_string(),
        hints_were_shown,
        timestamp: Utc::now(),
    };
    append_jsonl(&store.triage_file(REVIEWER_LABELS), &record)?;
    Ok(record)
}

pub fn reviewer_labels(store: &Store) -> Result<Vec<ReviewerLabel>, TriageError> {
    let _guard = store.lock_triage();
    Ok(read_jsonl(&store.triage_file(REVIEWER_LABELS))?)
}

/// Latest reviewer label per advertiser, for explicit promotion into a labels file.
pub fn promoted_labels(store: &Store) -> Result<BTreeMap<String, Label>, TriageError> {
    Ok(reviewer_labels(store)?
        .into_iter()
        .map(|l| (l.advertiser_id, l.label))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldoutFinding {
    pub assignment_id: u64,
    pub run_id: String,
    pub advertiser_id: String,
}

/// Re-checks every stored assignment against its run's split map.
pub fn audit_holdout(store: &Store) -> Result<Vec<HoldoutFinding>, TriageError> {
    let mut split_maps: BTreeMap<String, BTreeMap<String, Split>> = BTreeMap::new();
    let mut findings = Vec::new();
    for a in all_assignments(store)? {
        if !split_maps.contains_key(&a.run_id) {
            let splits = store.load_run(&a.run_id)?.record.manifest.splits;
            split_maps.insert(a.run_id.clone(), splits);
        }
        if split_maps[&a.run_id].get(&a.advertiser_id) == Some(&Split::Holdout) {
            findings.push(HoldoutFinding {
                assignment_id: a.assignment_id,
                run_id: a.run_id,
                advertiser_id: a.advertiser_id,
            });
        }
    }
    Ok(findings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(slugify("Profile too sparse"), "profile-too-sparse");
        assert_eq!(slugify("  Policy / scope: confusion!! "), "policy-scope-confusion");
        assert_eq!(slugify("***"), "");
    }

    #[test]
    fn defaults_are_seeded_once() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let cats = categories(&store).unwrap();
        let ids: Vec<_> = cats.iter().map(|c| c.category_id.as_str()).collect();
        assert_eq!(
            ids,
            [
                "missed-brand-context",
                "policy-scope-confusion",
                "profile-too-sparse",
                "output-format-failure"
            ]
        );
        create_category(&store, "Landing page mismatch", "d", 2).unwrap();
        assert_eq!(categories(&store).unwrap().len(), 5);
        assert!(matches!(
            create_category(&store, "landing page   mismatch", "d", 2),
            Err(TriageError::DuplicateCategory(_))
        ));
    }

    #[test]
    fn revision_ledger_is_gapless() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let cat = vec!["profile-too-sparse".to_string()];
        assert_eq!(
            record_revision(&store, RevisionLedgerEntry::next("t", 1, cat.clone(), "more ads")).unwrap(),
            1
        );
        let mut skip = RevisionLedgerEntry::next("t", 2, cat.clone(), "x");
        skip.to_revision = 4;
        assert!(matches!(
            record_revision(&store, skip),
            Err(TriageError::RevisionGap { .. })
        ));
        assert!(matches!(
            record_revision(&store, RevisionLedgerEntry::next("t", 1, cat.clone(), "again")),
            Err(TriageError::RevisionGap { expected_from: 2, .. })
        ));
        assert!(matches!(
            record_revision(&store, RevisionLedgerEntry::next("t", 2, vec!["nope".into()], "x")),
            Err(TriageError::UnknownCategory(_))
        ));
        assert!(matches!(
            record_revision(&store, RevisionLedgerEntry::next("t", 2, vec![], "x")),
            Err(TriageError::Invalid(_))
        ));
        assert_eq!(
            record_revision(&store, RevisionLedgerEntry::next("t", 2, cat, "scope")).unwrap(),
            2
        );
        assert_eq!(latest_revision(&store, "t").unwrap(), 3);
        assert_eq!(latest_revision(&store, "other").unwrap(), 1);
        assert!(revision_exists(&store, "t", 3).unwrap());
        assert!(!revision_exists(&store, "t", 4).unwrap());
    }

    #[test]
    fn labels_fall_back_to_last_exposure() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(matches!(
            submit_label(&store, "a", Label::Violating, "r", None),
            Err(TriageError::Invalid(_))
        ));
        record_hint_exposure(&store, "run", "a", true).unwrap();
        record_hint_exposure(&store, "run", "a", false).unwrap();
        let l = submit_label(&store, "a", Label::NonViolating, "r", None).unwrap();
        assert!(!l.hints_were_shown);
        let l = submit_label(&store, "a", Label::Violating, "r", Some(true)).unwrap();
        assert!(l.hints_were_shown);
        assert_eq!(promoted_labels(&store).unwrap()["a"], Label::Violating);
        assert_eq!(reviewer_labels(&store).unwrap().len(), 2);
    }
}
