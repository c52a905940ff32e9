//! Dataset splits and classification metrics.
//!
//! NOTE: the positive class is NON_VIOLATING. The metrics measure how well
//! good advertisers are identified:
//!
//! - `tp`: predicted NON_VIOLATING, truly NON_VIOLATING
//! - `fp`: predicted NON_VIOLATING, truly VIOLATING
//! - `fn`: predicted VIOLATING, truly NON_VIOLATING
//! - `tn`: predicted VIOLATING, truly VIOLATING
//!
//! Answers that could not be parsed are counted in `unparsed` and kept out
//! of every metric denominator. Metrics with a zero denominator are
//! undefined and render as `n/a`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    TuneA,
    TuneB,
    Holdout,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::TuneA, Split::TuneB, Split::Holdout];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::TuneA => "TUNE_A",
            Split::TuneB => "TUNE_B",
            Split::Holdout => "HOLDOUT",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str().eq_ignore_ascii_case(s) || x.as_str().replace('_', "-").eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub advertiser_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub tune_a: f64,
    pub tune_b: f64,
    pub holdout: f64,
}

impl SplitRatios {
    pub fn new(tune_a: f64, tune_b: f64, holdout: f64) -> Self {
        Self {
            tune_a,
            tune_b,
            holdout,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let parts = [self.tune_a, self.tune_b, self.holdout];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(EvalError::BadRatios(*self));
        }
        Ok(())
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::new(0.4, 0.4, 0.2)
    }
}

/// Position of `(salt, advertiser_id)` in `[0, 1)`: the first 8 bytes of
/// `SHA-256(salt || 0x00 || advertiser_id)` read big-endian, keeping the
/// top 53 bits, divided by 2^53.
pub fn split_point(advertiser_id: &str, salt: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update([0u8]);
    h.update(advertiser_id.as_bytes());
    let digest = h.finalize();
    let head = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
    // 53-bit mantissa keeps the result strictly below 1.
    (head >> 11) as f64 / (1u64 << 53) as f64
}

pub fn split_of(advertiser_id: &str, ratios: &SplitRatios, salt: &str) -> Split {
    let u = split_point(advertiser_id, salt);
    if u < ratios.tune_a {
        Split::TuneA
    } else if u < ratios.tune_a + ratios.tune_b {
        Split::TuneB
    } else if ratios.holdout > 0.0 {
        Split::Holdout
    } else if ratios.tune_b > 0.0 {
        Split::TuneB
    } else {
        Split::TuneA
    }
}

pub fn assign_splits<S: AsRef<str>>(
    advertiser_ids: &[S],
    ratios: &SplitRatios,
    salt: &str,
) -> Result<Vec<SplitAssignment>, EvalError> {
    ratios.validate()?;
    Ok(advertiser_ids
        .iter()
        .map(|id| SplitAssignment {
            advertiser_id: id.as_ref().to_string(),
            split: split_of(id.as_ref(), ratios, salt),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "label", rename_all = "snake_case")]
pub enum Prediction {
    Decided(Label),
    Unparsed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub unparsed: usize,
}

impl ConfusionMatrix {
    pub fn decided(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn total(&self) -> usize {
        self.decided() + self.unparsed
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.decided())
    }

    pub fn parse_failure_rate(&self) -> Option<f64> {
        ratio(self.unparsed, self.total())
    }

    fn count(&mut self, predicted: Prediction, truth: Label) {
        match (predicted, truth) {
            (Prediction::Unparsed, _) => self.unparsed += 1,
            (Prediction::Decided(Label::NonViolating), Label::NonViolating) => self.tp += 1,
            (Prediction::Decided(Label::NonViolating), Label::Violating) => self.fp += 1,
            (Prediction::Decided(Label::Violating), Label::NonViolating) => self.fn_ += 1,
            (Prediction::Decided(Label::Violating), Label::Violating) => self.tn += 1,
        }
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportContext {
    pub run_id: String,
    pub split: Option<Split>,
    pub template_id: String,
    pub template_revision: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    /// `None` when the run was not restricted to a split.
    pub split: Option<Split>,
    pub template_id: String,
    pub template_revision: u32,
    pub positive_class: Label,
    pub matrix: ConfusionMatrix,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub parse_failure_rate: Option<f64>,
    /// SHA-256 over the sorted `(advertiser_id, label)` pairs evaluated.
    pub labels_digest: String,
    pub predictions: BTreeMap<String, Prediction>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    BadRatios(SplitRatios),
    #[error("no ground-truth label for advertiser {advertiser_id}")]
    MissingLabel { advertiser_id: String },
    #[error("advertiser {advertiser_id} appears more than once")]
    DuplicateAdvertiser { advertiser_id: String },
    #[error("runs are not comparable: {0}")]
    IncomparableRuns(String),
    #[error("{0}")]
    LabelFile(String),
}

fn labels_digest<'a>(pairs: impl Iterator<Item = (&'a str, Label)>) -> String {
    let sorted: BTreeMap<&str, Label> = pairs.collect();
    let mut h = Sha256::new();
    for (id, label) in sorted {
        h.update(id.as_bytes());
        h.update(b"\t");
        h.update(label.as_str().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn compute_metrics(
    verdicts: &[(String, Prediction)],
    labels: &BTreeMap<String, Label>,
    context: &ReportContext,
) -> Result<EvalReport, EvalError> {
    let mut matrix = ConfusionMatrix::default();
    let mut predictions = BTreeMap::new();
    for (id, predicted) in verdicts {
        let truth = *labels.get(id).ok_or_else(|| EvalError::MissingLabel {
            advertiser_id: id.clone(),
        })?;
        if predictions.insert(id.clone(), *predicted).is_some() {
            return Err(EvalError::DuplicateAdvertiser {
                advertiser_id: id.clone(),
            });
        }
        matrix.count(*predicted, truth);
    }
    Ok(EvalReport {
        run_id: context.run_id.clone(),
        split: context.split,
        template_id: context.template_id.clone(),
        template_revision: context.template_revision,
        positive_class: Label::NonViolating,
        accuracy: matrix.accuracy(),
        precision: matrix.precision(),
        recall: matrix.recall(),
        parse_failure_rate: matrix.parse_failure_rate(),
        labels_digest: labels_digest(predictions.keys().map(|id| (id.as_str(), labels[id]))),
        matrix,
        predictions,
    })
}

/// One report per split for runs that were not restricted to a split.
/// Splits are never averaged together.
pub fn compute_split_reports(
    verdicts: &[(String, Prediction)],
    labels: &BTreeMap<String, Label>,
    splits: &BTreeMap<String, Split>,
    context: &ReportContext,
) -> Result<Vec<EvalReport>, EvalError> {
    let mut reports = Vec::new();
    for split in Split::ALL {
        let subset: Vec<(String, Prediction)> = verdicts
            .iter()
            .filter(|(id, _)| splits.get(id) == Some(&split))
            .cloned()
            .collect();
        if subset.is_empty() {
            continue;
        }
        let ctx = ReportContext {
            split: Some(split),
            ..context.clone()
        };
        reports.push(compute_metrics(&subset, labels, &ctx)?);
    }
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipKind {
    GoodToBad,
    BadToGood,
    FixedParse,
    BrokeParse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flip {
    pub advertiser_id: String,
    pub kind: FlipKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDelta {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub parse_failure_rate: Option<f64>,
    pub flips: Vec<Flip>,
}

pub fn compare_reports(before: &EvalReport, after: &EvalReport) -> Result<MetricsDelta, EvalError> {
    if before.split != after.split {
        return Err(EvalError::IncomparableRuns(format!(
            "splits differ ({} vs {})",
            split_name(before.split),
            split_name(after.split)
        )));
    }
    if before.labels_digest != after.labels_digest {
        return Err(EvalError::IncomparableRuns("label sets differ".into()));
    }
    let delta = |a: Option<f64>, b: Option<f64>| Some(b? - a?);
    let mut flips = Vec::new();
    for (id, old) in &before.predictions {
        let Some(&new) = after.predictions.get(id) else {
            return Err(EvalError::IncomparableRuns(format!("{id} missing from the later run")));
        };
        let kind = match (*old, new) {
            (Prediction::Decided(Label::NonViolating), Prediction::Decided(Label::Violating)) => FlipKind::GoodToBad,
            (Prediction::Decided(Label::Violating), Prediction::Decided(Label::NonViolating)) => FlipKind::BadToGood,
            (Prediction::Unparsed, Prediction::Decided(_)) => FlipKind::FixedParse,
            (Prediction::Decided(_), Prediction::Unparsed) => FlipKind::BrokeParse,
            _ => continue,
        };
        flips.push(Flip {
            advertiser_id: id.clone(),
            kind,
        });
    }
    Ok(MetricsDelta {
        accuracy: delta(before.accuracy, after.accuracy),
        precision: delta(before.precision, after.precision),
        recall: delta(before.recall, after.recall),
        parse_failure_rate: delta(before.parse_failure_rate, after.parse_failure_rate),
        flips,
    })
}

fn split_name(split: Option<Split>) -> &'static str {
    split.map_or("ALL", Split::as_str)
}

pub fn format_percent(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.0}%", v * 100.0),
        None => "n/a".to_string(),
    }
}

impl EvalReport {
    /// Fixed-width text table in Accuracy / Precision / Recall column order.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Positive class: NON_VIOLATING (metrics score identification of good advertisers)"
        );
        let _ = writeln!(
            out,
            "run {}  split {}  template {} r{}",
            self.run_id,
            split_name(self.split),
            self.template_id,
            self.template_revision
        );
        let border = "+----------+-----------+----------+";
        let _ = writeln!(out, "{border}");
        let _ = writeln!(out, "| {:>8} | {:>9} | {:>8} |", "Accuracy", "Precision", "Recall");
        let _ = writeln!(
            out,
            "| {:>8} | {:>9} | {:>8} |",
            format_percent(self.accuracy),
            format_percent(self.precision),
            format_percent(self.recall)
        );
        let _ = writeln!(out, "{border}");
        let m = &self.matrix;
        let _ = writeln!(
            out,
            "tp={} fp={} tn={} fn={} unparsed={} (parse failure rate {})",
            m.tp,
            m.fp,
            m.tn,
            m.fn_,
            m.unparsed,
            format_percent(self.parse_failure_rate)
        );
        out
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelLine {
    advertiser_id: String,
    label: Label,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitLine {
    advertiser_id: String,
    split: Split,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| EvalError::LabelFile(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::LabelFile(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Reads a `labels.jsonl` override file of `{advertiser_id, label}` lines.
pub fn load_labels(path: &Path) -> Result<BTreeMap<String, Label>, EvalError> {
    Ok(read_jsonl::<LabelLine>(path)?
        .into_iter()
        .map(|l| (l.advertiser_id, l.label))
        .collect())
}

/// Reads a manual split file of `{advertiser_id, split}` lines.
pub fn load_split_overrides(path: &Path) -> Result<BTreeMap<String, Split>, EvalError> {
    Ok(read_jsonl::<SplitLine>(path)?
        .into_iter()
        .map(|l| (l.advertiser_id, l.split))
        .collect())
}

pub fn distinct_ids(verdicts: &[(String, Prediction)]) -> BTreeSet<&str> {
    verdicts.iter().map(|(id, _)| id.as_str()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(pairs: &[(&str, Label)]) -> BTreeMap<String, Label> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn split_is_stable_and_degenerate_ratios_work() {
        let r = SplitRatios::default();
        assert_eq!(split_of("adv-1", &r, "s"), split_of("adv-1", &r, "s"));
        let ids: Vec<String> = (0..200).map(|i| format!("adv-{i}")).collect();
        for a in assign_splits(&ids, &SplitRatios::new(1.0, 0.0, 0.0), "s").unwrap() {
            assert_eq!(a.split, Split::TuneA);
        }
        for a in assign_splits(&ids, &SplitRatios::new(0.0, 1.0, 0.0), "s").unwrap() {
            assert_eq!(a.split, Split::TuneB);
        }
        for a in assign_splits(&ids, &SplitRatios::new(0.0, 0.0, 1.0), "s").unwrap() {
            assert_eq!(a.split, Split::Holdout);
        }
    }

    #[test]
    fn frozen_split_point() {
        // Frozen from an independent SHA-256 computation; pins the hash layout.
        let u = split_point("adv-1", "s");
        assert_eq!(u, 0.2878502518889948);
        assert_ne!(u, split_point("adv-1", "t"));
    }

    #[test]
    fn bad_ratios() {
        let ids = ["a"];
        assert!(matches!(
            assign_splits(&ids, &SplitRatios::new(0.5, 0.5, 0.5), "s"),
            Err(EvalError::BadRatios(_))
        ));
        assert!(matches!(
            assign_splits(&ids, &SplitRatios::new(-0.1, 0.6, 0.5), "s"),
            Err(EvalError::BadRatios(_))
        ));
        assert!(matches!(
            assign_splits(&ids, &SplitRatios::new(f64::NAN, 0.5, 0.5), "s"),
            Err(EvalError::BadRatios(_))
        ));
        assert!(assign_splits(&ids, &SplitRatios::new(0.4, 0.4, 0.2 + 1e-12), "s").is_ok());
    }

    #[test]
    fn perfect_classifier() {
        let mut verdicts = Vec::new();
        let mut truth = BTreeMap::new();
        for i in 0..10 {
            let label = if i < 8 { Label::NonViolating } else { Label::Violating };
            verdicts.push((format!("a{i}"), Prediction::Decided(label)));
            truth.insert(format!("a{i}"), label);
        }
        let r = compute_metrics(&verdicts, &truth, &ReportContext::default()).unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall), (Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn undefined_metrics_are_explicit() {
        let truth = labels(&[("a", Label::Violating)]);
        let r = compute_metrics(
            &[("a".into(), Prediction::Decided(Label::Violating))],
            &truth,
            &ReportContext::default(),
        )
        .unwrap();
        assert_eq!(r.precision, None);
        assert_eq!(r.recall, None);
        assert_eq!(r.accuracy, Some(1.0));
        assert!(r.to_table().contains("n/a"));

        let r = compute_metrics(&[], &truth, &ReportContext::default()).unwrap();
        assert_eq!((r.accuracy, r.parse_failure_rate), (None, None));
    }

    #[test]
    fn missing_label_and_duplicates() {
        let truth = labels(&[("a", Label::Violating)]);
        let err =
            compute_metrics(&[("b".into(), Prediction::Unparsed)], &truth, &ReportContext::default()).unwrap_err();
        assert_eq!(
            err,
            EvalError::MissingLabel {
                advertiser_id: "b".into()
            }
        );
        let dup = [
            ("a".to_string(), Prediction::Unparsed),
            ("a".to_string(), Prediction::Unparsed),
        ];
        assert!(matches!(
            compute_metrics(&dup, &truth, &ReportContext::default()),
            Err(EvalError::DuplicateAdvertiser { .. })
        ));
    }

    #[test]
    fn unparsed_stay_out_of_denominators() {
        let truth = labels(&[("a", Label::NonViolating), ("b", Label::NonViolating)]);
        let v = [
            ("a".to_string(), Prediction::Decided(Label::NonViolating)),
            ("b".to_string(), Prediction::Unparsed),
        ];
        let r = compute_metrics(&v, &truth, &ReportContext::default()).unwrap();
        assert_eq!(r.matrix.unparsed, 1);
        assert_eq!(r.recall, Some(1.0));
        assert_eq!(r.parse_failure_rate, Some(0.5));
    }

    #[test]
    fn table_matches_three_column_layout() {
        // tp=95 fp=3 fn=5 tn=57 gives 95% / 97% / 95%.
        let mut v = Vec::new();
        let mut truth = BTreeMap::new();
        let mut push = |n: usize, pred: Label, t: Label, tag: &str| {
            for i in 0..n {
                let id = format!("{tag}{i}");
                v.push((id.clone(), Prediction::Decided(pred)));
                truth.insert(id, t);
            }
        };
        push(95, Label::NonViolating, Label::NonViolating, "tp");
        push(3, Label::NonViolating, Label::Violating, "fp");
        push(5, Label::Violating, Label::NonViolating, "fn");
        push(57, Label::Violating, Label::Violating, "tn");
        let r = compute_metrics(&v, &truth, &ReportContext::default()).unwrap();
        let table = r.to_table();
        assert!(table.contains("| Accuracy | Precision |   Recall |"), "{table}");
        assert!(table.contains("|      95% |       97% |      95% |"), "{table}");
    }
}
