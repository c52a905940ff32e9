//! Candidate selection.
//!
//! Advertisers are ranked by how strongly the baseline ad-level classifier
//! appears to over-flag them. The score is
//!
//! ```text
//! min(1, flagged / total + fp_boost * known_fp / total)
//! ```
//!
//! and lives in [`overflag_score`] so an alternate formula can be swapped in.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AdRecord, Corpus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverflagScore {
    pub advertiser_id: String,
    pub flagged_count: usize,
    pub total_ads: usize,
    pub known_fp_count: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FunnelConfig {
    pub min_flagged: usize,
    pub top_k: Option<usize>,
    pub score_floor: f64,
    pub fp_boost: f64,
}

impl Default for FunnelConfig {
    fn default() -> Self {
        Self {
            min_flagged: 1,
            top_k: None,
            score_floor: 0.0,
            fp_boost: 0.5,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FunnelError {
    #[error("advertiser has no ads")]
    EmptyAdList,
    #[error("ads belong to more than one advertiser ({0} and {1})")]
    MixedAdvertiser(String, String),
}

pub fn overflag_score(flagged: usize, known_fp: usize, total: usize, fp_boost: f64) -> f64 {
    if flagged == 0 {
        return 0.0;
    }
    let total = total as f64;
    (flagged as f64 / total + fp_boost * (known_fp as f64 / total)).min(1.0)
}

pub fn score_advertiser(ads: &[AdRecord], config: &FunnelConfig) -> Result<OverflagScore, FunnelError> {
    let first = ads.first().ok_or(FunnelError::EmptyAdList)?;
    if let Some(other) = ads.iter().find(|a| a.advertiser_id != first.advertiser_id) {
        return Err(FunnelError::MixedAdvertiser(
            first.advertiser_id.clone(),
            other.advertiser_id.clone(),
        ));
    }
    let flagged_count = ads.iter().filter(|a| a.baseline_flagged).count();
    let known_fp_count = ads
        .iter()
        .filter(|a| a.baseline_flagged && a.is_known_false_positive())
        .count();
    Ok(OverflagScore {
        advertiser_id: first.advertiser_id.clone(),
        flagged_count,
        total_ads: ads.len(),
        known_fp_count,
        score: overflag_score(flagged_count, known_fp_count, ads.len(), config.fp_boost),
    })
}

/// Higher score first, then advertiser id ascending.
pub fn rank_order(a: &OverflagScore, b: &OverflagScore) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.advertiser_id.cmp(&b.advertiser_id))
}

/// Scores every eligible advertiser and returns the ranked selection.
pub fn select_scored<'a, F>(corpus: &'a Corpus, config: &FunnelConfig, mut include: F) -> Vec<OverflagScore>
where
    F: FnMut(&'a str) -> bool,
{
    let mut scored: Vec<OverflagScore> = corpus
        .ads
        .iter()
        .filter(|(id, ads)| !ads.is_empty() && include(id.as_str()))
        .filter_map(|(_, ads)| score_advertiser(ads, config).ok())
        .filter(|s| s.flagged_count >= config.min_flagged && s.score >= config.score_floor)
        .collect();
    scored.sort_by(rank_order);
    if let Some(k) = config.top_k {
        scored.truncate(k);
    }
    scored
}

pub fn select_candidates(corpus: &Corpus, config: &FunnelConfig) -> Vec<String> {
    select_scored(corpus, config, |_| true)
        .into_iter()
        .map(|s| s.advertiser_id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, LabelSource};

    pub(crate) fn ad(id: &str, adv: &str, flagged: bool, known_fp: bool) -> AdRecord {
        AdRecord {
            ad_id: id.into(),
            advertiser_id: adv.into(),
            creative_text: format!("creative {id}"),
            targeting_terms: vec![],
            destination_domain: String::new(),
            baseline_score: if flagged { 0.9 } else { 0.1 },
            baseline_flagged: flagged,
            label: known_fp.then_some(Label::NonViolating),
            label_source: known_fp.then_some(LabelSource::KnownFalsePositive),
        }
    }

    fn ads(adv: &str, n: usize, flagged: usize, fps: usize) -> Vec<AdRecord> {
        (0..n)
            .map(|i| ad(&format!("{adv}-{i}"), adv, i < flagged, i < fps))
            .collect()
    }

    #[test]
    fn no_flags_scores_zero() {
        let s = score_advertiser(&ads("a", 10, 0, 0), &FunnelConfig::default()).unwrap();
        assert_eq!(s.score, 0.0);
    }

    #[test]
    fn all_flagged_saturates() {
        let cfg = FunnelConfig {
            fp_boost: 0.0,
            ..Default::default()
        };
        let s = score_advertiser(&ads("a", 10, 10, 0), &cfg).unwrap();
        assert_eq!(s.score, 1.0);
        let cfg = FunnelConfig {
            fp_boost: 3.0,
            ..Default::default()
        };
        assert_eq!(score_advertiser(&ads("a", 10, 10, 10), &cfg).unwrap().score, 1.0);
    }

    #[test]
    fn boost_formula_by_hand() {
        let cfg = FunnelConfig {
            fp_boost: 0.5,
            ..Default::default()
        };
        let s = score_advertiser(&ads("a", 8, 4, 2), &cfg).unwrap();
        assert_eq!((s.flagged_count, s.known_fp_count, s.total_ads), (4, 2, 8));
        assert!((s.score - 0.625).abs() < 1e-12);
    }

    #[test]
    fn score_errors() {
        let cfg = FunnelConfig::default();
        assert_eq!(score_advertiser(&[], &cfg), Err(FunnelError::EmptyAdList));
        let mixed = vec![ad("1", "a", true, false), ad("2", "b", true, false)];
        assert!(matches!(
            score_advertiser(&mixed, &cfg),
            Err(FunnelError::MixedAdvertiser(..))
        ));
    }
}
