//! Prompt rendering and response parsing.
//!
//! Templates are plain text with `{{PLACEHOLDER}}` markers and a `#!` header:
//!
//! ```text
//! #! template_id: nfs_advertiser
//! #! revision: 2
//! Policy under review:
//! {{POLICY_DESCRIPTION}}
//! ...
//! ```
//!
//! The model answers in four labeled sections (`SUMMARY:`, `PRODUCTS:`,
//! `DECISION:`, `RATIONALE:`); see [`OUTPUT_FORMAT`].

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::profiler::{BucketKind, ContentProfile, ItemLabel, ProfileItem};

pub const DEFAULT_MAX_CHARS: usize = 30_000;

pub const TASK_INSTRUCTIONS: &str = "\
Using the policy and the advertiser content profile above:
(1) Summarize the advertiser and their content.
(2) Describe the advertiser's products and services.
(3) Determine if the advertiser is violating the policy.";

pub const OUTPUT_FORMAT: &str = "\
Answer using exactly these four labeled sections, each starting on its own line:
SUMMARY: <summary of the advertiser and their content>
PRODUCTS: <the advertiser's products and services>
DECISION: <VIOLATING or NON_VIOLATING>
RATIONALE: <why the decision follows from the policy>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub policy_id: String,
    pub name: String,
    pub description: String,
    pub in_scope_examples: Vec<String>,
    pub out_of_scope_examples: Vec<String>,
}

impl PolicySpec {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.policy_id.trim().is_empty() {
            return Err(PromptError::PolicyInvalid("policy_id is empty".into()));
        }
        if self.in_scope_examples.is_empty() || self.out_of_scope_examples.is_empty() {
            return Err(PromptError::PolicyInvalid(
                "in_scope_examples and out_of_scope_examples must both be non-empty".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path).map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))?;
        let policy: PolicySpec = serde_json::from_str(&text).map_err(|e| PromptError::PolicyInvalid(e.to_string()))?;
        policy.validate()?;
        Ok(policy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Placeholder {
    PolicyDescription,
    InScopeExamples,
    OutOfScopeExamples,
    AdvertiserProfile,
    TaskInstructions,
    OutputFormat,
}

impl Placeholder {
    const ALL: [Placeholder; 6] = [
        Placeholder::PolicyDescription,
        Placeholder::InScopeExamples,
        Placeholder::OutOfScopeExamples,
        Placeholder::AdvertiserProfile,
        Placeholder::TaskInstructions,
        Placeholder::OutputFormat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::PolicyDescription => "POLICY_DESCRIPTION",
            Placeholder::InScopeExamples => "IN_SCOPE_EXAMPLES",
            Placeholder::OutOfScopeExamples => "OUT_OF_SCOPE_EXAMPLES",
            Placeholder::AdvertiserProfile => "ADVERTISER_PROFILE",
            Placeholder::TaskInstructions => "TASK_INSTRUCTIONS",
            Placeholder::OutputFormat => "OUTPUT_FORMAT",
        }
    }

    fn from_name(name: &str) -> Option<Placeholder> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Section {
    Literal(String),
    Placeholder(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub revision: u32,
    pub sections: Vec<Section>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptBudget {
    pub max_chars: usize,
}

impl Default for PromptBudget {
    fn default() -> Self {
        Self {
            max_chars: DEFAULT_MAX_CHARS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub template_id: String,
    pub template_revision: u32,
    pub advertiser_id: String,
    pub char_budget_used: usize,
    pub truncated: bool,
    /// Profile items included, in bucket priority order.
    pub items_rendered: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template invalid: {0}")]
    TemplateInvalid(String),
    #[error("policy invalid: {0}")]
    PolicyInvalid(String),
    #[error("fixed prompt sections need {fixed_chars} chars but the budget is {max_chars}")]
    BudgetImpossible { fixed_chars: usize, max_chars: usize },
    #[error("{0}")]
    Io(String),
}

impl PromptTemplate {
    pub fn new(template_id: impl Into<String>, revision: u32, sections: Vec<Section>) -> Result<Self, PromptError> {
        let t = Self {
            template_id: template_id.into(),
            revision,
            sections,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.template_id.trim().is_empty() {
            return Err(PromptError::TemplateInvalid("template_id is empty".into()));
        }
        if self.revision == 0 {
            return Err(PromptError::TemplateInvalid("revision must be >= 1".into()));
        }
        for p in Placeholder::ALL {
            let n = self.sections.iter().filter(|s| **s == Section::Placeholder(p)).count();
            if n > 1 {
                return Err(PromptError::TemplateInvalid(format!("{} appears {n} times", p.name())));
            }
            let required = matches!(p, Placeholder::TaskInstructions | Placeholder::AdvertiserProfile);
            if required && n == 0 {
                return Err(PromptError::TemplateInvalid(format!("{} is required", p.name())));
            }
        }
        Ok(())
    }

    /// Parses the template file format: `#!` header lines followed by the body.
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut template_id = None;
        let mut revision = None;
        let mut rest = text;
        while rest.starts_with("#!") {
            let (line, tail) = rest.split_once('\n').unwrap_or((rest, ""));
            let directive = line[2..].trim();
            let (key, value) = directive
                .split_once(':')
                .ok_or_else(|| PromptError::TemplateInvalid(format!("bad header line {directive:?}")))?;
            match key.trim() {
                "template_id" => template_id = Some(value.trim().to_string()),
                "revision" => {
                    revision = Some(
                        value
                            .trim()
                            .parse::<u32>()
                            .map_err(|_| PromptError::TemplateInvalid(format!("bad revision {:?}", value.trim())))?,
                    )
                }
                other => return Err(PromptError::TemplateInvalid(format!("unknown header key {other:?}"))),
            }
            rest = tail;
        }
        let template_id =
            template_id.ok_or_else(|| PromptError::TemplateInvalid("missing template_id header".into()))?;
        let revision = revision.ok_or_else(|| PromptError::TemplateInvalid("missing revision header".into()))?;
        Self::new(template_id, revision, parse_sections(rest)?)
    }

    /// Loads a template file; a `<id>.r<N>.txt` file name must agree with the header.
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path).map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))?;
        let template = Self::parse(&text)?;
        let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some((stem, rev)) = file_name
            .strip_suffix(".txt")
            .and_then(|s| s.rsplit_once(".r"))
            .and_then(|(stem, rev)| rev.parse::<u32>().ok().map(|r| (stem, r)))
        {
            if stem != template.template_id || rev != template.revision {
                return Err(PromptError::TemplateInvalid(format!(
                    "file name {file_name} disagrees with header ({} revision {})",
                    template.template_id, template.revision
                )));
            }
        }
        Ok(template)
    }

    /// Inverse of [`PromptTemplate::parse`].
    pub fn to_file_text(&self) -> String {
        let mut out = format!("#! template_id: {}\n#! revision: {}\n", self.template_id, self.revision);
        for s in &self.sections {
            match s {
                Section::Literal(t) => out.push_str(t),
                Section::Placeholder(p) => {
                    out.push_str("{{");
                    out.push_str(p.name());
                    out.push_str("}}");
                }
            }
        }
        out
    }
}

fn parse_sections(body: &str) -> Result<Vec<Section>, PromptError> {
    let mut sections = Vec::new();
    let mut rest = body;
    while let Some(start) = rest.find("{{") {
        if start > 0 {
            sections.push(Section::Literal(rest[..start].to_string()));
        }
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| PromptError::TemplateInvalid("unterminated {{ marker".into()))?;
        let name = after[..end].trim();
        let p = Placeholder::from_name(name)
            .ok_or_else(|| PromptError::TemplateInvalid(format!("unknown placeholder {name:?}")))?;
        sections.push(Section::Placeholder(p));
        rest = &after[end + 2..];
    }
    if !rest.is_empty() {
        sections.push(Section::Literal(rest.to_string()));
    }
    Ok(sections)
}

fn bullet_list(items: &[String]) -> String {
    items
        .iter()
        .map(|s| format!("- {}", s.split_whitespace().collect::<Vec<_>>().join(" ")))
        .collect::<Vec<_>>()
        .join("\n")
}

fn bucket_heading(kind: BucketKind) -> &'static str {
    match kind {
        BucketKind::KnownFalsePositive => {
            "Known false positives (flagged by the ad classifier, confirmed non-violating by reviewers):"
        }
        BucketKind::AlreadyLabeled => "Previously labeled content:",
        BucketKind::MostRelevant => "Most relevant content (highest ad classifier scores):",
    }
}

fn item_line(item: &ProfileItem) -> String {
    let mut line = format!(
        "- {} [seen {}x, baseline {:.2}",
        item.text.split_whitespace().collect::<Vec<_>>().join(" "),
        item.occurrence_count,
        item.baseline_score
    );
    match item.label {
        Some(ItemLabel::Violating) => line.push_str(", label VIOLATING"),
        Some(ItemLabel::NonViolating) => line.push_str(", label NON_VIOLATING"),
        Some(ItemLabel::Conflicting) => line.push_str(", reviewers disagreed"),
        None => {}
    }
    line.push(']');
    line
}

/// Renders the profile block keeping only the first `keep` items in priority order.
fn render_profile(profile: &ContentProfile, keep: usize) -> String {
    let mut out = format!("Advertiser: {} (id: {})\n", profile.display_name, profile.advertiser_id);
    if profile.knowledge_snippets.is_empty() {
        out.push_str("Knowledge graph facts: none\n");
    } else {
        out.push_str("Knowledge graph facts:\n");
        out.push_str(&bullet_list(&profile.knowledge_snippets));
        out.push('\n');
    }
    let join_or_none = |v: &[String], sep: &str| if v.is_empty() { "none".to_string() } else { v.join(sep) };
    out.push_str(&format!(
        "Targeting terms: {}\n",
        join_or_none(&profile.targeting_terms, "; ")
    ));
    out.push_str(&format!(
        "Destination domains: {}\n",
        join_or_none(&profile.domains, ", ")
    ));
    let mut remaining = keep;
    for kind in BucketKind::PRIORITY {
        out.push_str(bucket_heading(kind));
        out.push('\n');
        for item in profile.bucket(kind).iter().take(remaining) {
            out.push_str(&item_line(item));
            out.push('\n');
            remaining -= 1;
        }
    }
    out
}

fn assemble(template: &PromptTemplate, policy: &PolicySpec, profile_block: &str) -> String {
    let mut out = String::new();
    for s in &template.sections {
        match s {
            Section::Literal(t) => out.push_str(t),
            Section::Placeholder(p) => match p {
                Placeholder::PolicyDescription => {
                    out.push_str(&policy.name);
                    out.push('\n');
                    out.push_str(policy.description.trim_end());
                }
                Placeholder::InScopeExamples => out.push_str(&bullet_list(&policy.in_scope_examples)),
                Placeholder::OutOfScopeExamples => out.push_str(&bullet_list(&policy.out_of_scope_examples)),
                Placeholder::AdvertiserProfile => out.push_str(profile_block.trim_end()),
                Placeholder::TaskInstructions => out.push_str(TASK_INSTRUCTIONS),
                Placeholder::OutputFormat => out.push_str(OUTPUT_FORMAT),
            },
        }
    }
    out
}

pub fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// Renders the prompt, dropping profile items from the tail of the
/// lowest-priority bucket first until the text fits `budget.max_chars`.
pub fn render_prompt(
    template: &PromptTemplate,
    policy: &PolicySpec,
    profile: &ContentProfile,
    budget: &PromptBudget,
) -> Result<RenderedPrompt, PromptError> {
    template.validate()?;
    let total = profile.item_count();
    let render = |keep: usize| assemble(template, policy, &render_profile(profile, keep));

    let fixed = render(0);
    let fixed_chars = char_len(&fixed);
    if fixed_chars > budget.max_chars {
        return Err(PromptError::BudgetImpossible {
            fixed_chars,
            max_chars: budget.max_chars,
        });
    }
    // Length grows strictly with `keep`, so search for the largest prefix that fits.
    let full = render(total);
    let (text, keep) = if char_len(&full) <= budget.max_chars {
        (full, total)
    } else {
        let (mut lo, mut hi) = (0usize, total);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if char_len(&render(mid)) <= budget.max_chars {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (if lo == 0 { fixed } else { render(lo) }, lo)
    };
    Ok(RenderedPrompt {
        char_budget_used: char_len(&text),
        text,
        template_id: template.template_id.clone(),
        template_revision: template.revision,
        advertiser_id: profile.advertiser_id.clone(),
        truncated: keep < total,
        items_rendered: keep,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub advertiser_id: String,
    pub decision: Label,
    pub advertiser_summary: String,
    pub products_services: String,
    pub rationale: String,
    pub raw_response: String,
    pub template_id: String,
    pub template_revision: u32,
}

/// The four sections of a parsed model answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAnswer {
    pub decision: Label,
    pub summary: String,
    pub products_services: String,
    pub rationale: String,
    pub raw: String,
}

impl ParsedAnswer {
    pub fn into_verdict(self, prompt: &RenderedPrompt) -> Verdict {
        Verdict {
            advertiser_id: prompt.advertiser_id.clone(),
            decision: self.decision,
            advertiser_summary: self.summary,
            products_services: self.products_services,
            rationale: self.rationale,
            raw_response: self.raw,
            template_id: prompt.template_id.clone(),
            template_revision: prompt.template_revision,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnswerSection {
    Summary,
    Products,
    Decision,
    Rationale,
}

impl AnswerSection {
    const ALL: [AnswerSection; 4] = [
        AnswerSection::Summary,
        AnswerSection::Products,
        AnswerSection::Decision,
        AnswerSection::Rationale,
    ];

    fn label(self) -> &'static str {
        match self {
            AnswerSection::Summary => "SUMMARY",
            AnswerSection::Products => "PRODUCTS",
            AnswerSection::Decision => "DECISION",
            AnswerSection::Rationale => "RATIONALE",
        }
    }
}

impl fmt::Display for AnswerSection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseErrorKind {
    EmptyResponse,
    MissingSection { section: AnswerSection },
    AmbiguousDecision { value: String },
}

impl ParseErrorKind {
    pub fn code(&self) -> &'static str {
        match self {
            ParseErrorKind::EmptyResponse => "empty_response",
            ParseErrorKind::MissingSection { .. } => "missing_section",
            ParseErrorKind::AmbiguousDecision { .. } => "ambiguous_decision",
        }
    }
}

/// An answer that could not be turned into a [`Verdict`]; keeps the raw text for triage.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{}", describe(.kind))]
pub struct ParseError {
    #[serde(flatten)]
    pub kind: ParseErrorKind,
    pub raw: String,
}

fn describe(kind: &ParseErrorKind) -> String {
    match kind {
        ParseErrorKind::EmptyResponse => "empty response".into(),
        ParseErrorKind::MissingSection { section } => format!("missing section {section}"),
        ParseErrorKind::AmbiguousDecision { value } => format!("ambiguous decision {value:?}"),
    }
}

/// Recognizes `SUMMARY:` style labels, tolerating leading markdown emphasis.
fn section_label(line: &str) -> Option<(AnswerSection, &str)> {
    let trimmed = line.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '#' | '_' | '>' | '-'));
    AnswerSection::ALL.into_iter().find_map(|s| {
        let label = s.label();
        let head = trimmed.get(..label.len())?;
        if !head.eq_ignore_ascii_case(label) {
            return None;
        }
        let after = trimmed[label.len()..].trim_start_matches(['*', '_']);
        let body = after.strip_prefix(':')?;
        Some((s, body.trim_start_matches(['*', '_'])))
    })
}

fn normalize_decision(value: &str) -> Option<Label> {
    let core = value
        .trim()
        .trim_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '_' | '`' | '"' | '\'' | '.' | '!'));
    let token: String = core
        .chars()
        .map(|c| {
            if c == '-' || c.is_whitespace() {
                '_'
            } else {
                c.to_ascii_uppercase()
            }
        })
        .collect();
    match token.as_str() {
        "VIOLATING" => Some(Label::Violating),
        "NON_VIOLATING" | "NONVIOLATING" => Some(Label::NonViolating),
        _ => None,
    }
}

/// Extracts the four labeled sections. Total: every input yields either an
/// answer or exactly one [`ParseErrorKind`]; checks run in the order empty
/// response, missing sections (in `SUMMARY, PRODUCTS, DECISION, RATIONALE`
/// order), then decision validity.
pub fn parse_response(raw: &str) -> Result<ParsedAnswer, ParseError> {
    let fail = |kind| ParseError {
        kind,
        raw: raw.to_string(),
    };
    if raw.trim().is_empty() {
        return Err(fail(ParseErrorKind::EmptyResponse));
    }
    let mut found: Vec<(AnswerSection, String)> = Vec::new();
    for line in raw.lines() {
        if let Some((section, body)) = section_label(line) {
            found.push((section, body.to_string()));
        } else if let Some((_, body)) = found.last_mut() {
            body.push('\n');
            body.push_str(line);
        }
    }
    let first = |s: AnswerSection| {
        found
            .iter()
            .find(|(k, b)| *k == s && !b.trim().is_empty())
            .map(|(_, b)| b.trim().to_string())
    };
    let mut bodies = Vec::with_capacity(4);
    for s in AnswerSection::ALL {
        match first(s) {
            Some(b) => bodies.push(b),
            None => return Err(fail(ParseErrorKind::MissingSection { section: s })),
        }
    }
    let mut decision = None;
    for (_, body) in found
        .iter()
        .filter(|(k, b)| *k == AnswerSection::Decision && !b.trim().is_empty())
    {
        match (normalize_decision(body), decision) {
            (None, _) => {
                return Err(fail(ParseErrorKind::AmbiguousDecision {
                    value: body.trim().to_string(),
                }));
            }
            (Some(d), Some(prev)) if d != prev => {
                return Err(fail(ParseErrorKind::AmbiguousDecision {
                    value: body.trim().to_string(),
                }));
            }
            (Some(d), _) => decision = Some(d),
        }
    }
    let [summary, products_services, _, rationale]: [String; 4] = bodies.try_into().expect("four sections collected");
    Ok(ParsedAnswer {
        decision: decision.expect("decision section present"),
        summary,
        products_services,
        rationale,
        raw: raw.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const WELL_FORMED: &str =
        "SUMMARY: A toy shop.\nPRODUCTS: Plush toys.\nDECISION: NON_VIOLATING\nRATIONALE: Nothing adult.";

    #[test]
    fn parses_well_formed() {
        let a = parse_response(WELL_FORMED).unwrap();
        assert_eq!(a.decision, Label::NonViolating);
        assert_eq!(a.summary, "A toy shop.");
        assert_eq!(a.products_services, "Plush toys.");
        assert_eq!(a.rationale, "Nothing adult.");
    }

    #[test]
    fn lowercase_labels_and_values() {
        let a = parse_response("summary: s\nproducts: p\ndecision: violating\nrationale: r").unwrap();
        assert_eq!(a.decision, Label::Violating);
    }

    #[test]
    fn markdown_and_multiline_sections() {
        let raw =
            "**SUMMARY:** first line\nsecond line\n**Products:** p\n**Decision:** **Non-Violating**\n## Rationale: r";
        let a = parse_response(raw).unwrap();
        assert_eq!(a.summary, "first line\nsecond line");
        assert_eq!(a.decision, Label::NonViolating);
    }

    #[test]
    fn error_kinds() {
        let kind = |s: &str| parse_response(s).unwrap_err().kind;
        assert_eq!(kind("  \n "), ParseErrorKind::EmptyResponse);
        assert_eq!(
            kind("SUMMARY: s\nPRODUCTS: p\nRATIONALE: r"),
            ParseErrorKind::MissingSection {
                section: AnswerSection::Decision
            }
        );
        assert_eq!(
            kind("SUMMARY:\nPRODUCTS: p\nDECISION: VIOLATING\nRATIONALE: r"),
            ParseErrorKind::MissingSection {
                section: AnswerSection::Summary
            }
        );
        assert_eq!(
            kind("SUMMARY: s\nPRODUCTS: p\nDECISION: maybe\nRATIONALE: r"),
            ParseErrorKind::AmbiguousDecision { value: "maybe".into() }
        );
        assert_eq!(
            kind("SUMMARY: s\nPRODUCTS: p\nDECISION: VIOLATING\nDECISION: NON_VIOLATING\nRATIONALE: r"),
            ParseErrorKind::AmbiguousDecision {
                value: "NON_VIOLATING".into()
            }
        );
        let err = parse_response("free text").unwrap_err();
        assert_eq!(err.raw, "free text");
    }

    #[test]
    fn template_file_round_trip() {
        let text = "#! template_id: nfs\n#! revision: 3\nPolicy:\n{{POLICY_DESCRIPTION}}\n{{ADVERTISER_PROFILE}}\n{{TASK_INSTRUCTIONS}}\n";
        let t = PromptTemplate::parse(text).unwrap();
        assert_eq!((t.template_id.as_str(), t.revision), ("nfs", 3));
        assert_eq!(t.to_file_text(), text);
    }

    #[test]
    fn template_validation() {
        let bad =
            |body: &str| PromptTemplate::parse(&format!("#! template_id: t\n#! revision: 1\n{body}")).unwrap_err();
        assert!(matches!(bad("{{TASK_INSTRUCTIONS}}"), PromptError::TemplateInvalid(_)));
        assert!(matches!(
            bad("{{ADVERTISER_PROFILE}}{{TASK_INSTRUCTIONS}}{{TASK_INSTRUCTIONS}}"),
            PromptError::TemplateInvalid(_)
        ));
        assert!(matches!(
            bad("{{ADVERTISER_PROFILE}}{{TASK_INSTRUCTIONS}}{{NOPE}}"),
            PromptError::TemplateInvalid(_)
        ));
        assert!(matches!(
            bad("{{ADVERTISER_PROFILE}}{{TASK_INSTRUCTIONS"),
            PromptError::TemplateInvalid(_)
        ));
        assert!(PromptTemplate::parse("{{ADVERTISER_PROFILE}}{{TASK_INSTRUCTIONS}}").is_err());
    }
}
