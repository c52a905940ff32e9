//! Advertiser content profiles.
//!
//! An advertiser's ads are split into three evidence buckets, deduplicated
//! by exact match on normalized text, and truncated to a fixed item budget.
//! Bucket precedence when duplicates collide is
//! `KNOWN_FALSE_POSITIVE > ALREADY_LABELED > MOST_RELEVANT`, except that an
//! item whose merged ads carry contradicting labels always lands in
//! `ALREADY_LABELED` with a [`ItemLabel::Conflicting`] annotation.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{AdRecord, AdvertiserRecord, Label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BucketKind {
    KnownFalsePositive,
    AlreadyLabeled,
    MostRelevant,
}

impl BucketKind {
    /// Highest priority first.
    pub const PRIORITY: [BucketKind; 3] = [
        BucketKind::KnownFalsePositive,
        BucketKind::AlreadyLabeled,
        BucketKind::MostRelevant,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ItemLabel {
    Violating,
    NonViolating,
    /// Merged ads disagreed.
    Conflicting,
}

impl ItemLabel {
    fn merge(a: Option<ItemLabel>, b: Option<ItemLabel>) -> Option<ItemLabel> {
        match (a, b) {
            (None, x) | (x, None) => x,
            (Some(x), Some(y)) if x == y => Some(x),
            _ => Some(ItemLabel::Conflicting),
        }
    }
}

impl From<Label> for ItemLabel {
    fn from(l: Label) -> Self {
        match l {
            Label::Violating => ItemLabel::Violating,
            Label::NonViolating => ItemLabel::NonViolating,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileItem {
    pub text: String,
    pub source_ad_ids: Vec<String>,
    pub occurrence_count: usize,
    pub baseline_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<ItemLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileBucket {
    pub kind: BucketKind,
    pub items: Vec<ProfileItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupStats {
    /// Ads considered for the profile.
    pub input_items: usize,
    /// Distinct normalized texts before quotas were applied.
    pub output_items: usize,
    /// Items kept after quotas.
    pub retained_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentProfile {
    pub advertiser_id: String,
    pub display_name: String,
    /// Always the three kinds, in [`BucketKind::PRIORITY`] order.
    pub buckets: Vec<ProfileBucket>,
    pub targeting_terms: Vec<String>,
    pub domains: Vec<String>,
    pub knowledge_snippets: Vec<String>,
    pub dedup_stats: DedupStats,
}

impl ContentProfile {
    pub fn bucket(&self, kind: BucketKind) -> &[ProfileItem] {
        self.buckets
            .iter()
            .find(|b| b.kind == kind)
            .map(|b| b.items.as_slice())
            .unwrap_or(&[])
    }

    pub fn item_count(&self) -> usize {
        self.buckets.iter().map(|b| b.items.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RelevanceRank {
    #[default]
    ByBaselineScoreDesc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketQuotas {
    pub known_false_positive: usize,
    pub already_labeled: usize,
    pub most_relevant: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    pub max_items: usize,
    pub quotas: BucketQuotas,
    pub relevance_rank: RelevanceRank,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            max_items: 60,
            quotas: BucketQuotas {
                known_false_positive: 15,
                already_labeled: 15,
                most_relevant: 30,
            },
            relevance_rank: RelevanceRank::ByBaselineScoreDesc,
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<(), ProfileError> {
        let q = &self.quotas;
        let sum = q.known_false_positive + q.already_labeled + q.most_relevant;
        if self.max_items == 0 || sum > self.max_items {
            return Err(ProfileError::Budget {
                quota_sum: sum,
                max_items: self.max_items,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProfileError {
    #[error("bucket quotas sum to {quota_sum} but max_items is {max_items}")]
    Budget { quota_sum: usize, max_items: usize },
    #[error("ad {ad_id} belongs to {found}, not {expected}")]
    ForeignAd {
        ad_id: String,
        expected: String,
        found: String,
    },
}

/// Canonical form used for dedup: NFKC, lowercase, control characters removed,
/// whitespace runs collapsed to one space and trimmed.
pub fn normalize_text(raw: &str) -> String {
    let folded: String = raw.nfkc().collect::<String>().to_lowercase().nfkc().collect();
    let mut out = String::with_capacity(folded.len());
    for word in folded
        .split(char::is_whitespace)
        .map(|w| w.chars().filter(|c| !c.is_control()).collect::<String>())
        .filter(|w| !w.is_empty())
    {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&word);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DedupInput {
    pub text: String,
    pub ad_id: String,
    pub baseline_score: f64,
    pub label: Option<Label>,
}

/// Merges items whose normalized text is equal, in order of first occurrence.
/// Inputs whose text normalizes to the empty string are dropped.
pub fn dedup_items<I>(items: I) -> Vec<ProfileItem>
where
    I: IntoIterator<Item = DedupInput>,
{
    merge_items(items.into_iter().map(|i| ProfileItem {
        text: i.text,
        source_ad_ids: vec![i.ad_id],
        occurrence_count: 1,
        baseline_score: i.baseline_score,
        label: i.label.map(ItemLabel::from),
    }))
}

/// Merge step shared by [`dedup_items`]; idempotent on its own output.
pub fn merge_items<I>(items: I) -> Vec<ProfileItem>
where
    I: IntoIterator<Item = ProfileItem>,
{
    let mut out: Vec<ProfileItem> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for item in items {
        let key = normalize_text(&item.text);
        if key.is_empty() {
            continue;
        }
        match index.get(&key) {
            Some(&pos) => {
                let merged = &mut out[pos];
                for id in item.source_ad_ids {
                    if !merged.source_ad_ids.contains(&id) {
                        merged.source_ad_ids.push(id);
                    }
                }
                merged.occurrence_count = merged.source_ad_ids.len();
                merged.baseline_score = merged.baseline_score.max(item.baseline_score);
                merged.label = ItemLabel::merge(merged.label, item.label);
            }
            None => {
                index.insert(key.clone(), out.len());
                let mut ids = Vec::with_capacity(item.source_ad_ids.len());
                for id in item.source_ad_ids {
                    if !ids.contains(&id) {
                        ids.push(id);
                    }
                }
                out.push(ProfileItem {
                    text: key,
                    occurrence_count: ids.len(),
                    source_ad_ids: ids,
                    baseline_score: item.baseline_score,
                    label: item.label,
                });
            }
        }
    }
    out
}

pub fn build_profile(
    advertiser: &AdvertiserRecord,
    ads: &[AdRecord],
    budget: &BudgetConfig,
) -> Result<ContentProfile, ProfileError> {
    budget.validate()?;
    if let Some(foreign) = ads.iter().find(|a| a.advertiser_id != advertiser.advertiser_id) {
        return Err(ProfileError::ForeignAd {
            ad_id: foreign.ad_id.clone(),
            expected: advertiser.advertiser_id.clone(),
            found: foreign.advertiser_id.clone(),
        });
    }

    // Relevance order, independent of input order.
    let mut ordered: Vec<&AdRecord> = ads.iter().collect();
    ordered.sort_by(|a, b| {
        b.baseline_score
            .total_cmp(&a.baseline_score)
            .then_with(|| a.ad_id.cmp(&b.ad_id))
    });

    let ad_by_id: HashMap<&str, &AdRecord> = ads.iter().map(|a| (a.ad_id.as_str(), a)).collect();
    let items = dedup_items(ordered.iter().map(|a| DedupInput {
        text: a.creative_text.clone(),
        ad_id: a.ad_id.clone(),
        baseline_score: a.baseline_score,
        label: a.label,
    }));
    let deduped = items.len();

    let mut fp = Vec::new();
    let mut labeled = Vec::new();
    let mut relevant = Vec::new();
    for item in items {
        let has_fp = item
            .source_ad_ids
            .iter()
            .any(|id| ad_by_id[id.as_str()].is_known_false_positive());
        match item.label {
            Some(ItemLabel::Conflicting) => labeled.push(item),
            _ if has_fp => fp.push(item),
            Some(_) => labeled.push(item),
            None => relevant.push(item),
        }
    }

    let q = &budget.quotas;
    fp.truncate(q.known_false_positive);
    labeled.truncate(q.already_labeled);
    // Unused evidence quota and any slack below max_items go to MOST_RELEVANT.
    relevant.truncate(budget.max_items - fp.len() - labeled.len());

    let targeting_terms: BTreeSet<String> = ads
        .iter()
        .flat_map(|a| a.targeting_terms.iter())
        .map(|t| normalize_text(t))
        .filter(|t| !t.is_empty())
        .collect();
    let domains: BTreeSet<String> = ads
        .iter()
        .map(|a| a.destination_domain.trim().to_lowercase())
        .filter(|d| !d.is_empty())
        .collect();
    let mut knowledge_snippets: Vec<String> = Vec::new();
    for snippet in &advertiser.knowledge_snippets {
        let s = snippet.split_whitespace().collect::<Vec<_>>().join(" ");
        if !s.is_empty() && !knowledge_snippets.contains(&s) {
            knowledge_snippets.push(s);
        }
    }

    let retained = fp.len() + labeled.len() + relevant.len();
    Ok(ContentProfile {
        advertiser_id: advertiser.advertiser_id.clone(),
        display_name: advertiser.display_name.clone(),
        buckets: vec![
            ProfileBucket {
                kind: BucketKind::KnownFalsePositive,
                items: fp,
            },
            ProfileBucket {
                kind: BucketKind::AlreadyLabeled,
                items: labeled,
            },
            ProfileBucket {
                kind: BucketKind::MostRelevant,
                items: relevant,
            },
        ],
        targeting_terms: targeting_terms.into_iter().collect(),
        domains: domains.into_iter().collect(),
        knowledge_snippets,
        dedup_stats: DedupStats {
            input_items: ads.len(),
            output_items: deduped,
            retained_items: retained,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_text("  Buy  NOW "), "buy now");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("Déjà\u{00A0}Vu"), "déjà vu");
        // decomposed input composes to the same bytes
        assert_eq!(normalize_text("De\u{301}ja\u{300} vu"), "déjà vu");
        assert_eq!(normalize_text("\tline\none\r\n"), "line one");
        assert_eq!(normalize_text("\u{210C}ello"), "hello");
    }

    fn input(text: &str, id: &str, score: f64, label: Option<Label>) -> DedupInput {
        DedupInput {
            text: text.into(),
            ad_id: id.into(),
            baseline_score: score,
            label,
        }
    }

    #[test]
    fn exact_duplicates_merge() {
        let out = dedup_items([input("hello", "1", 0.2, None), input("hello", "2", 0.7, None)]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].occurrence_count, 2);
        assert_eq!(out[0].source_ad_ids, ["1", "2"]);
        assert_eq!(out[0].baseline_score, 0.7);
    }

    #[test]
    fn normalized_duplicates_merge() {
        let out = dedup_items([input("Buy Now!", "1", 0.1, None), input("buy   now!", "2", 0.1, None)]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].text, "buy now!");
    }

    #[test]
    fn empty_input_and_empty_texts() {
        assert!(dedup_items(Vec::new()).is_empty());
        assert!(dedup_items([input("   ", "1", 0.1, None)]).is_empty());
    }

    #[test]
    fn conflicting_labels_are_kept() {
        let out = dedup_items([
            input("x", "1", 0.1, Some(Label::Violating)),
            input("X", "2", 0.1, Some(Label::NonViolating)),
        ]);
        assert_eq!(out[0].label, Some(ItemLabel::Conflicting));
    }

    #[test]
    fn budget_validation() {
        let bad = BudgetConfig {
            max_items: 3,
            quotas: BucketQuotas {
                known_false_positive: 2,
                already_labeled: 2,
                most_relevant: 0,
            },
            ..Default::default()
        };
        assert_eq!(
            bad.validate(),
            Err(ProfileError::Budget {
                quota_sum: 4,
                max_items: 3
            })
        );
        assert!(BudgetConfig::default().validate().is_ok());
    }
}
