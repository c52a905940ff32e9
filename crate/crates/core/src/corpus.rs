//! Corpus ingestion.
//!
//! Ads and advertisers arrive as two JSONL files. Every non-blank line is
//! either accepted into the [`Corpus`] or recorded as a [`RejectedLine`] with
//! its 1-based line number and a reason. In strict mode the first bad line
//! aborts the load instead.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const DEFAULT_FLAG_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    Violating,
    NonViolating,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Violating => "VIOLATING",
            Label::NonViolating => "NON_VIOLATING",
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Violating => Label::NonViolating,
            Label::NonViolating => Label::Violating,
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "VIOLATING" => Some(Label::Violating),
            "NON_VIOLATING" => Some(Label::NonViolating),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LabelSource {
    Human,
    KnownFalsePositive,
}

impl LabelSource {
    fn parse(s: &str) -> Option<LabelSource> {
        match s {
            "HUMAN" => Some(LabelSource::Human),
            "KNOWN_FALSE_POSITIVE" => Some(LabelSource::KnownFalsePositive),
            _ => None,
        }
    }
}

/// One ad creative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdRecord {
    pub ad_id: String,
    pub advertiser_id: String,
    pub creative_text: String,
    pub targeting_terms: Vec<String>,
    pub destination_domain: String,
    pub baseline_score: f64,
    pub baseline_flagged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_source: Option<LabelSource>,
}

impl AdRecord {
    pub fn is_known_false_positive(&self) -> bool {
        self.label_source == Some(LabelSource::KnownFalsePositive)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvertiserRecord {
    pub advertiser_id: String,
    pub display_name: String,
    pub knowledge_snippets: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub advertiser_label: Option<Label>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Fail on the first bad line instead of skipping it.
    pub strict: bool,
    pub flag_threshold: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            strict: false,
            flag_threshold: DEFAULT_FLAG_THRESHOLD,
        }
    }
}

/// Immutable, validated dataset keyed by advertiser.
///
/// Every advertiser has an entry in `ads` (possibly empty); ad lists keep
/// their input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub advertisers: BTreeMap<String, AdvertiserRecord>,
    pub ads: BTreeMap<String, Vec<AdRecord>>,
    pub flag_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub advertisers: usize,
    pub ads: usize,
    pub flagged: usize,
    pub labeled: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFile {
    Ads,
    Advertisers,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedLine {
    pub file: SourceFile,
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub advertisers_accepted: usize,
    pub ads_accepted: usize,
    pub rejected: Vec<RejectedLine>,
}

impl IngestReport {
    pub fn rejected_in(&self, file: SourceFile) -> usize {
        self.rejected.iter().filter(|r| r.file == file).count()
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{file:?} line {line}: {reason}")]
    Schema {
        file: SourceFile,
        line: usize,
        reason: String,
    },
    #[error("ads line {line}: {reason}")]
    Referential { line: usize, reason: String },
}

impl Corpus {
    pub fn empty(flag_threshold: f64) -> Self {
        Self {
            advertisers: BTreeMap::new(),
            ads: BTreeMap::new(),
            flag_threshold,
        }
    }

    pub fn ads_of(&self, advertiser_id: &str) -> &[AdRecord] {
        self.ads.get(advertiser_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn stats(&self) -> CorpusStats {
        corpus_stats(self)
    }

    /// Writes the corpus back out in the ingestion format.
    pub fn write_jsonl(&self, ads_path: &Path, advertisers_path: &Path) -> io::Result<()> {
        let mut adv = io::BufWriter::new(fs::File::create(advertisers_path)?);
        for record in self.advertisers.values() {
            serde_json::to_writer(&mut adv, record)?;
            adv.write_all(b"\n")?;
        }
        adv.flush()?;
        let mut ads = io::BufWriter::new(fs::File::create(ads_path)?);
        for ad in self.ads.values().flatten() {
            serde_json::to_writer(&mut ads, ad)?;
            ads.write_all(b"\n")?;
        }
        ads.flush()
    }
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let all = corpus.ads.values().flatten();
    let (mut ads, mut flagged, mut labeled) = (0, 0, 0);
    for ad in all {
        ads += 1;
        flagged += usize::from(ad.baseline_flagged);
        labeled += usize::from(ad.label.is_some());
    }
    CorpusStats {
        advertisers: corpus.advertisers.len(),
        ads,
        flagged,
        labeled,
    }
}

/// NFC normalization plus removal of control characters other than tab and newline.
pub fn canonicalize_text(raw: &str) -> String {
    raw.nfc()
        .filter(|c| !c.is_control() || *c == '\n' || *c == '\t')
        .collect()
}

pub fn load_corpus(
    ads_path: &Path,
    advertisers_path: &Path,
    config: &IngestConfig,
) -> Result<(Corpus, IngestReport), CorpusError> {
    let read = |path: &Path| {
        fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    };
    let advertisers_text = read(advertisers_path)?;
    let ads_text = read(ads_path)?;
    parse_corpus(&ads_text, &advertisers_text, config)
}

/// Same as [`load_corpus`] over in-memory file contents.
pub fn parse_corpus(
    ads_text: &str,
    advertisers_text: &str,
    config: &IngestConfig,
) -> Result<(Corpus, IngestReport), CorpusError> {
    let mut corpus = Corpus::empty(config.flag_threshold);
    let mut report = IngestReport::default();

    for (line, obj) in json_lines(advertisers_text) {
        match obj.and_then(parse_advertiser) {
            Ok(record) if corpus.advertisers.contains_key(&record.advertiser_id) => {
                let reason = format!("duplicate advertiser_id {}", record.advertiser_id);
                reject(config, &mut report, SourceFile::Advertisers, line, reason)?;
            }
            Ok(record) => {
                corpus.ads.insert(record.advertiser_id.clone(), Vec::new());
                corpus.advertisers.insert(record.advertiser_id.clone(), record);
                report.advertisers_accepted += 1;
            }
            Err(reason) => reject(config, &mut report, SourceFile::Advertisers, line, reason)?,
        }
    }

    let mut seen_ads = HashSet::new();
    for (line, obj) in json_lines(ads_text) {
        let ad = match obj.and_then(|o| parse_ad(o, config.flag_threshold)) {
            Ok(ad) => ad,
            Err(reason) => {
                reject(config, &mut report, SourceFile::Ads, line, reason)?;
                continue;
            }
        };
        if seen_ads.contains(&ad.ad_id) {
            let reason = format!("duplicate ad_id {}", ad.ad_id);
            reject(config, &mut report, SourceFile::Ads, line, reason)?;
            continue;
        }
        let Some(list) = corpus.ads.get_mut(&ad.advertiser_id) else {
            let reason = format!("unknown advertiser {}", ad.advertiser_id);
            if config.strict {
                return Err(CorpusError::Referential { line, reason });
            }
            report.rejected.push(RejectedLine {
                file: SourceFile::Ads,
                line,
                reason,
            });
            continue;
        };
        seen_ads.insert(ad.ad_id.clone());
        list.push(ad);
        report.ads_accepted += 1;
    }
    Ok((corpus, report))
}

fn reject(
    config: &IngestConfig,
    report: &mut IngestReport,
    file: SourceFile,
    line: usize,
    reason: String,
) -> Result<(), CorpusError> {
    if config.strict {
        return Err(CorpusError::Schema { file, line, reason });
    }
    report.rejected.push(RejectedLine { file, line, reason });
    Ok(())
}

/// Non-blank lines with their 1-based numbers, parsed as JSON objects.
fn json_lines(text: &str) -> impl Iterator<Item = (usize, Result<Map<String, Value>, String>)> + '_ {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let parsed = match serde_json::from_str::<Value>(l) {
                Ok(Value::Object(map)) => Ok(map),
                Ok(_) => Err("line is not a JSON object".to_string()),
                Err(e) => Err(format!("invalid JSON: {e}")),
            };
            (i + 1, parsed)
        })
}

fn req_str(obj: &Map<String, Value>, key: &str) -> Result<String, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Err(format!("missing field {key}")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(format!("field {key}: expected string")),
    }
}

fn opt_str(obj: &Map<String, Value>, key: &str) -> Result<Option<String>, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(format!("field {key}: expected string")),
    }
}

fn opt_str_list(obj: &Map<String, Value>, key: &str) -> Result<Vec<String>, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                _ => Err(format!("field {key}: expected list of strings")),
            })
            .collect(),
        Some(_) => Err(format!("field {key}: expected list of strings")),
    }
}

fn opt_label(obj: &Map<String, Value>, key: &str) -> Result<Option<Label>, String> {
    opt_str(obj, key)?
        .map(|s| Label::parse(&s).ok_or_else(|| format!("field {key}: unknown label {s:?}")))
        .transpose()
}

fn parse_advertiser(obj: Map<String, Value>) -> Result<AdvertiserRecord, String> {
    let advertiser_id = req_str(&obj, "advertiser_id")?;
    if advertiser_id.is_empty() {
        return Err("advertiser_id is empty".into());
    }
    let display_name = opt_str(&obj, "display_name")?
        .map(|s| canonicalize_text(&s))
        .unwrap_or_else(|| advertiser_id.clone());
    let knowledge_snippets = opt_str_list(&obj, "knowledge_snippets")?
        .iter()
        .map(|s| canonicalize_text(s))
        .collect();
    Ok(AdvertiserRecord {
        advertiser_id,
        display_name,
        knowledge_snippets,
        advertiser_label: opt_label(&obj, "advertiser_label")?,
    })
}

fn parse_ad(obj: Map<String, Value>, flag_threshold: f64) -> Result<AdRecord, String> {
    let ad_id = req_str(&obj, "ad_id")?;
    let advertiser_id = req_str(&obj, "advertiser_id")?;
    let creative_text = canonicalize_text(&req_str(&obj, "creative_text")?);
    let baseline_score = match obj.get("baseline_score") {
        None | Some(Value::Null) => return Err("missing field baseline_score".into()),
        Some(v) => v
            .as_f64()
            .ok_or_else(|| "field baseline_score: expected number".to_string())?,
    };
    if !(0.0..=1.0).contains(&baseline_score) {
        return Err(format!("baseline_score {baseline_score} outside [0,1]"));
    }
    let baseline_flagged = match obj.get("baseline_flagged") {
        None | Some(Value::Null) => baseline_score >= flag_threshold,
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err("field baseline_flagged: expected boolean".into()),
    };
    if baseline_flagged && baseline_score < flag_threshold {
        return Err(format!(
            "baseline_flagged set but baseline_score {baseline_score} is below flag threshold {flag_threshold}"
        ));
    }
    let mut label = opt_label(&obj, "label")?;
    let label_source = match opt_str(&obj, "label_source")? {
        Some(s) => Some(LabelSource::parse(&s).ok_or_else(|| format!("field label_source: unknown source {s:?}"))?),
        None => label.map(|_| LabelSource::Human),
    };
    match label_source {
        Some(LabelSource::KnownFalsePositive) => {
            if !baseline_flagged {
                return Err("known false positive must be baseline_flagged".into());
            }
            if label == Some(Label::Violating) {
                return Err("known false positive cannot be labeled VIOLATING".into());
            }
            label = Some(Label::NonViolating);
        }
        Some(LabelSource::Human) if label.is_none() => {
            return Err("label_source HUMAN without label".into());
        }
        _ => {}
    }
    Ok(AdRecord {
        ad_id,
        advertiser_id,
        creative_text,
        targeting_terms: opt_str_list(&obj, "targeting_terms")?
            .iter()
            .map(|s| canonicalize_text(s))
            .collect(),
        destination_domain: opt_str(&obj, "destination_domain")?.unwrap_or_default(),
        baseline_score,
        baseline_flagged,
        label,
        label_source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(ads: &str, advs: &str) -> (Corpus, IngestReport) {
        parse_corpus(ads, advs, &IngestConfig::default()).unwrap()
    }

    const ADV: &str = r#"{"advertiser_id":"a1","display_name":"Acme"}"#;

    #[test]
    fn empty_files_give_empty_corpus() {
        let (c, r) = parse("", "");
        assert_eq!(
            c.stats(),
            CorpusStats {
                advertisers: 0,
                ads: 0,
                flagged: 0,
                labeled: 0
            }
        );
        assert!(r.rejected.is_empty());
    }

    #[test]
    fn ads_keep_file_order() {
        let ads = [
            r#"{"ad_id":"z","advertiser_id":"a1","creative_text":"one","baseline_score":0.1}"#,
            r#"{"ad_id":"b","advertiser_id":"a1","creative_text":"two","baseline_score":0.2}"#,
            r#"{"ad_id":"m","advertiser_id":"a1","creative_text":"three","baseline_score":0.3}"#,
        ]
        .join("\n");
        let (c, r) = parse(&ads, ADV);
        assert_eq!(c.advertisers.len(), 1);
        let ids: Vec<_> = c.ads_of("a1").iter().map(|a| a.ad_id.as_str()).collect();
        assert_eq!(ids, ["z", "b", "m"]);
        assert_eq!(r.ads_accepted, 3);
    }

    #[test]
    fn missing_creative_text_is_rejected_with_line_number() {
        let ads = [
            r#"{"ad_id":"1","advertiser_id":"a1","creative_text":"one","baseline_score":0.1}"#,
            r#"{"ad_id":"2","advertiser_id":"a1","baseline_score":0.2}"#,
            r#"{"ad_id":"3","advertiser_id":"a1","creative_text":"three","baseline_score":0.3}"#,
        ]
        .join("\n");
        let (c, r) = parse(&ads, ADV);
        assert_eq!(c.ads_of("a1").len(), 2);
        assert_eq!(
            r.rejected,
            vec![RejectedLine {
                file: SourceFile::Ads,
                line: 2,
                reason: "missing field creative_text".into()
            }]
        );
    }

    #[test]
    fn blank_lines_are_not_rejects() {
        let ads = "\n\n".to_string()
            + r#"{"ad_id":"1","advertiser_id":"a1","creative_text":"x","baseline_score":0.1}"#
            + "\n   \n";
        let (c, r) = parse(&ads, ADV);
        assert_eq!(c.stats().ads, 1);
        assert!(r.rejected.is_empty());
    }

    #[test]
    fn orphan_ads_lenient_vs_strict() {
        let ads = r#"{"ad_id":"1","advertiser_id":"ghost","creative_text":"x","baseline_score":0.1}"#;
        let (c, r) = parse(ads, ADV);
        assert_eq!(c.stats().ads, 0);
        assert_eq!(r.rejected[0].reason, "unknown advertiser ghost");

        let strict = IngestConfig {
            strict: true,
            ..Default::default()
        };
        let err = parse_corpus(ads, ADV, &strict).unwrap_err();
        assert!(matches!(err, CorpusError::Referential { line: 1, .. }));
    }

    #[test]
    fn strict_mode_fails_on_schema_error() {
        let strict = IngestConfig {
            strict: true,
            ..Default::default()
        };
        let err = parse_corpus(r#"{"ad_id":"1"}"#, ADV, &strict).unwrap_err();
        assert!(matches!(
            err,
            CorpusError::Schema {
                file: SourceFile::Ads,
                line: 1,
                ..
            }
        ));
    }

    #[test]
    fn flagged_is_derived_from_threshold_when_absent() {
        let ads = [
            r#"{"ad_id":"1","advertiser_id":"a1","creative_text":"x","baseline_score":0.5}"#,
            r#"{"ad_id":"2","advertiser_id":"a1","creative_text":"y","baseline_score":0.49}"#,
            r#"{"ad_id":"3","advertiser_id":"a1","creative_text":"z","baseline_score":0.9,"baseline_flagged":false}"#,
        ]
        .join("\n");
        let (c, _) = parse(&ads, ADV);
        let flags: Vec<_> = c.ads_of("a1").iter().map(|a| a.baseline_flagged).collect();
        assert_eq!(flags, [true, false, false]);
    }

    #[test]
    fn invariant_violations_are_rejected() {
        let cases = [
            (
                r#"{"ad_id":"1","advertiser_id":"a1","creative_text":"x","baseline_score":1.5}"#,
                "outside [0,1]",
            ),
            (
                r#"{"ad_id":"1","advertiser_id":"a1","creative_text":"x","baseline_score":0.2,"baseline_flagged":true}"#,
                "below flag threshold",
            ),
            (
                r#"{"ad_id":"1","advertiser_id":"a1","creative_text":"x","baseline_score":0.2,"label_source":"KNOWN_FALSE_POSITIVE"}"#,
                "must be baseline_flagged",
            ),
            (
                r#"{"ad_id":"1","advertiser_id":"a1","creative_text":"x","baseline_score":0.9,"label":"VIOLATING","label_source":"KNOWN_FALSE_POSITIVE"}"#,
                "cannot be labeled VIOLATING",
            ),
            (
                r#"{"ad_id":"1","advertiser_id":"a1","creative_text":7,"baseline_score":0.9}"#,
                "field creative_text: expected string",
            ),
            (
                r#"{"ad_id":"1","advertiser_id":"a1","creative_text":"x","baseline_score":"high"}"#,
                "expected number",
            ),
            (r#"[1,2]"#, "not a JSON object"),
            (r#"{"ad_id":"#, "invalid JSON"),
        ];
        for (line, needle) in cases {
            let (_, r) = parse(line, ADV);
            assert_eq!(r.rejected.len(), 1, "{line}");
            assert!(
                r.rejected[0].reason.contains(needle),
                "{} vs {needle}",
                r.rejected[0].reason
            );
        }
    }

    #[test]
    fn known_false_positive_implies_non_violating_label() {
        let ad = r#"{"ad_id":"1","advertiser_id":"a1","creative_text":"x","baseline_score":0.9,"label_source":"KNOWN_FALSE_POSITIVE"}"#;
        let (c, _) = parse(ad, ADV);
        assert_eq!(c.ads_of("a1")[0].label, Some(Label::NonViolating));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let ads = [
            r#"{"ad_id":"1","advertiser_id":"a1","creative_text":"x","baseline_score":0.1}"#,
            r#"{"ad_id":"1","advertiser_id":"a1","creative_text":"y","baseline_score":0.1}"#,
        ]
        .join("\n");
        let advs = format!("{ADV}\n{ADV}");
        let (c, r) = parse(&ads, &advs);
        assert_eq!(c.stats().ads, 1);
        assert_eq!(r.rejected_in(SourceFile::Ads), 1);
        assert_eq!(r.rejected_in(SourceFile::Advertisers), 1);
    }

    #[test]
    fn creative_text_is_canonicalized() {
        let ad = r#"{"ad_id":"1","advertiser_id":"a1","creative_text":"Café\u0007 ok","baseline_score":0.1}"#;
        let (c, _) = parse(ad, ADV);
        assert_eq!(c.ads_of("a1")[0].creative_text, "Caf\u{e9} ok");
    }

    #[test]
    fn stats_count_by_hand() {
        let advs = "{\"advertiser_id\":\"a\"}\n{\"advertiser_id\":\"b\"}";
        let ads = [
            r#"{"ad_id":"1","advertiser_id":"a","creative_text":"x","baseline_score":0.1}"#,
            r#"{"ad_id":"2","advertiser_id":"a","creative_text":"x","baseline_score":0.7}"#,
            r#"{"ad_id":"3","advertiser_id":"b","creative_text":"x","baseline_score":0.1,"label":"VIOLATING"}"#,
            r#"{"ad_id":"4","advertiser_id":"b","creative_text":"x","baseline_score":0.1}"#,
            r#"{"ad_id":"5","advertiser_id":"b","creative_text":"x","baseline_score":0.1}"#,
        ]
        .join("\n");
        let (c, _) = parse(&ads, advs);
        let s = corpus_stats(&c);
        assert_eq!(
            s,
            CorpusStats {
                advertisers: 2,
                ads: 5,
                flagged: 1,
                labeled: 1
            }
        );
        assert_eq!(s, corpus_stats(&c));
    }
}
