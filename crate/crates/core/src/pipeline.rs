//! End-to-end wiring: ingest, select, profile, render, classify, record, eval.
//!
//! Each stage is also exposed on its own so the CLI subcommands can be
//! composed by hand and land on the same run as [`run_pipeline`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::task::JoinSet;

use crate::config::{ConfigError, PipelineConfig};
use crate::corpus::{load_corpus, Corpus, CorpusError, IngestReport, Label};
use crate::eval::{
    compute_metrics, compute_split_reports, load_labels, load_split_overrides, split_of, EvalError, EvalReport,
    Prediction, ReportContext, Split,
};
use crate::funnel::{select_scored, OverflagScore};
use crate::llm_gateway::{BackendFailure, Gateway, GatewayError};
use crate::profiler::{build_profile, ContentProfile, ProfileError};
use crate::promptkit::{
    parse_response, render_prompt, PolicySpec, PromptBudget, PromptError, PromptTemplate, RenderedPrompt,
};
use crate::store::{Outcome, RunKey, RunManifest, RunRecord, RunStatus, Store, StoreError};
use crate::triage::{self, TriageError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Ingest,
    Select,
    Profile,
    Render,
    Classify,
    Record,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = serde_json::to_value(self).expect("stage serializes");
        f.write_str(name.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Triage(#[from] TriageError),
    #[error("template {template_id} revision {revision} is not recorded in the revision ledger")]
    UnrecordedRevision { template_id: String, revision: u32 },
    #[error("advertiser {0} is not in the corpus")]
    UnknownAdvertiser(String),
    #[error("advertiser {0} appears more than once in the candidate set")]
    DuplicateCandidate(String),
}

#[derive(Debug, Error)]
#[error("{stage} stage: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

pub(crate) fn at<E: Into<StageError>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError {
        stage,
        source: e.into(),
    }
}

/// Everything loaded from the paths in a config.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub corpus: Corpus,
    pub ingest_report: IngestReport,
    pub template: PromptTemplate,
    pub policy: PolicySpec,
    pub labels: BTreeMap<String, Label>,
    pub split_overrides: BTreeMap<String, Split>,
}

pub fn load_corpus_from(config: &PipelineConfig) -> Result<(Corpus, IngestReport), PipelineError> {
    config
        .require_paths(&["ads", "advertisers"])
        .map_err(at(Stage::Config))?;
    let (corpus, report) =
        load_corpus(&config.paths.ads, &config.paths.advertisers, &config.ingest).map_err(at(Stage::Ingest))?;
    if !report.rejected.is_empty() {
        tracing::warn!(rejected = report.rejected.len(), "ingest rejected some lines");
    }
    Ok((corpus, report))
}

/// Corpus labels, overridden by the configured labels file.
pub fn ground_truth(corpus: &Corpus, config: &PipelineConfig) -> Result<BTreeMap<String, Label>, PipelineError> {
    let mut labels: BTreeMap<String, Label> = corpus
        .advertisers
        .values()
        .filter_map(|a| a.advertiser_label.map(|l| (a.advertiser_id.clone(), l)))
        .collect();
    if let Some(path) = &config.paths.labels {
        labels.extend(load_labels(path).map_err(at(Stage::Ingest))?);
    }
    Ok(labels)
}

pub fn split_overrides(config: &PipelineConfig) -> Result<BTreeMap<String, Split>, PipelineError> {
    match &config.paths.split_overrides {
        Some(path) => load_split_overrides(path).map_err(at(Stage::Ingest)),
        None => Ok(BTreeMap::new()),
    }
}

pub fn load_inputs(config: &PipelineConfig) -> Result<Inputs, PipelineError> {
    config.validate().map_err(at(Stage::Config))?;
    config
        .require_paths(&["ads", "advertisers", "store_dir", "template", "policy"])
        .map_err(at(Stage::Config))?;
    let (corpus, ingest_report) = load_corpus_from(config)?;
    let template = PromptTemplate::load(&config.paths.template).map_err(at(Stage::Render))?;
    let policy = PolicySpec::load(&config.paths.policy).map_err(at(Stage::Render))?;
    let labels = ground_truth(&corpus, config)?;
    let split_overrides = split_overrides(config)?;
    Ok(Inputs {
        corpus,
        ingest_report,
        template,
        policy,
        labels,
        split_overrides,
    })
}

/// Split for one advertiser: an override entry when present, else the hash.
pub fn split_for(advertiser_id: &str, config: &PipelineConfig, overrides: &BTreeMap<String, Split>) -> Split {
    overrides
        .get(advertiser_id)
        .copied()
        .unwrap_or_else(|| split_of(advertiser_id, &config.splits.ratios, &config.splits.salt))
}

/// Ranked candidates, restricted to `split` when given.
pub fn select(
    corpus: &Corpus,
    config: &PipelineConfig,
    overrides: &BTreeMap<String, Split>,
    split: Option<Split>,
) -> Vec<OverflagScore> {
    select_scored(corpus, &config.funnel, |id| {
        split.is_none_or(|s| split_for(id, config, overrides) == s)
    })
}

pub fn build_profiles(
    corpus: &Corpus,
    candidates: &[String],
    config: &PipelineConfig,
) -> Result<Vec<ContentProfile>, PipelineError> {
    candidates
        .iter()
        .map(|id| {
            let adv = corpus
                .advertisers
                .get(id)
                .ok_or_else(|| at(Stage::Profile)(StageError::UnknownAdvertiser(id.clone())))?;
            build_profile(adv, corpus.ads_of(id), &config.budget).map_err(at(Stage::Profile))
        })
        .collect()
}

/// Inputs of the classify stage.
#[derive(Debug, Clone)]
pub struct ClassifyJob<'a> {
    pub template: &'a PromptTemplate,
    pub policy: &'a PolicySpec,
    pub profiles: &'a [ContentProfile],
    pub prompt_budget: PromptBudget,
    pub split: Option<Split>,
    /// Split of every candidate; candidates missing here get none.
    pub splits: BTreeMap<String, Split>,
    pub labels: &'a BTreeMap<String, Label>,
    pub workers: usize,
}

impl ClassifyJob<'_> {
    pub fn run_key(&self, gateway: &Gateway) -> Result<RunKey, PipelineError> {
        let mut seen = BTreeSet::new();
        for p in self.profiles {
            if !seen.insert(p.advertiser_id.clone()) {
                return Err(at(Stage::Classify)(StageError::DuplicateCandidate(
                    p.advertiser_id.clone(),
                )));
            }
        }
        Ok(RunKey {
            backend_kind: gateway.kind(),
            candidates: seen.into_iter().collect(),
            policy_id: self.policy.policy_id.clone(),
            template_id: self.template.template_id.clone(),
            template_revision: self.template.revision,
        })
    }
}

/// Classifies every profile not yet decided in its run, records outcomes
/// through the run's single writer and finalizes it. Backend failures leave
/// the run FAILED; calling again resumes it without repeating recorded work.
pub async fn classify(store: &Store, gateway: &Gateway, job: ClassifyJob<'_>) -> Result<RunRecord, PipelineError> {
    let template = job.template;
    if !triage::revision_exists(store, &template.template_id, template.revision).map_err(at(Stage::Render))? {
        return Err(at(Stage::Render)(StageError::UnrecordedRevision {
            template_id: template.template_id.clone(),
            revision: template.revision,
        }));
    }
    let key = job.run_key(gateway)?;
    let splits: BTreeMap<String, Split> = job
        .splits
        .iter()
        .filter(|(id, _)| key.candidates.binary_search(id).is_ok())
        .map(|(id, s)| (id.clone(), *s))
        .collect();
    let labels: BTreeMap<String, Label> = job
        .labels
        .iter()
        .filter(|(id, _)| key.candidates.binary_search(id).is_ok())
        .map(|(id, l)| (id.clone(), *l))
        .collect();
    let mut writer = store
        .begin_run(RunManifest::new(key, job.split, splits))
        .map_err(at(Stage::Record))?;
    let run_id = writer.run_id().to_string();
    if writer.status() == RunStatus::Complete {
        tracing::info!(%run_id, "run already complete");
        return Ok(writer.snapshot().record.clone());
    }
    store.save_template(template).map_err(at(Stage::Record))?;
    store.write_profiles(&run_id, job.profiles).map_err(at(Stage::Record))?;
    store.write_run_labels(&run_id, &labels).map_err(at(Stage::Record))?;

    let pending: BTreeSet<String> = writer.pending().into_iter().collect();
    let mut queue = VecDeque::new();
    for profile in job.profiles.iter().filter(|p| pending.contains(&p.advertiser_id)) {
        match render_prompt(template, job.policy, profile, &job.prompt_budget) {
            Ok(prompt) => queue.push_back(Arc::new(prompt)),
            Err(e) => {
                writer.mark_failed(format!("render: {e}")).map_err(at(Stage::Record))?;
                return Err(at(Stage::Render)(e));
            }
        }
    }
    tracing::info!(%run_id, pending = queue.len(), total = job.profiles.len(), "classifying");

    let workers = job.workers.max(1);
    let mut in_flight: JoinSet<(Arc<RenderedPrompt>, Result<String, GatewayError>)> = JoinSet::new();
    let mut first_failure: Option<GatewayError> = None;
    loop {
        while in_flight.len() < workers {
            let Some(prompt) = queue.pop_front() else { break };
            let gateway = gateway.clone();
            in_flight.spawn(async move {
                let result = gateway.complete(&prompt).await;
                (prompt, result)
            });
        }
        let Some(joined) = in_flight.join_next().await else {
            break;
        };
        let (prompt, result) = joined.expect("classification task panicked");
        let outcome = match result {
            Ok(raw) => match parse_response(&raw) {
                Ok(answer) => Outcome::Verdict(answer.into_verdict(&prompt)),
                Err(e) => Outcome::ParseError(e),
            },
            Err(e) => {
                tracing::warn!(advertiser_id = %prompt.advertiser_id, code = e.code(), "backend call failed");
                let failure = BackendFailure::from(&e);
                first_failure.get_or_insert(e);
                Outcome::BackendError(failure)
            }
        };
        if let Err(e) = writer.record(&prompt.advertiser_id, outcome) {
            in_flight.abort_all();
            return Err(at(Stage::Record)(e));
        }
    }

    if let Some(e) = first_failure {
        writer
            .mark_failed(format!("{}: {e}", e.code()))
            .map_err(at(Stage::Record))?;
        return Err(at(Stage::Classify)(e));
    }
    writer.finalize().map_err(at(Stage::Record))
}

/// Evaluation of one run against the labels snapshotted with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub status: RunStatus,
    /// Over all labeled candidates of the run.
    pub overall: EvalReport,
    /// One report per split present among the labeled candidates.
    pub by_split: Vec<EvalReport>,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("run {} ({:?})\n", self.run_id, self.status);
        out.push_str(&self.overall.to_table());
        if self.overall.split.is_none() {
            for r in &self.by_split {
                out.push('\n');
                out.push_str(&r.to_table());
            }
        }
        out
    }
}

pub fn run_report(store: &Store, run_id: &str) -> Result<RunReport, PipelineError> {
    let snapshot = store.load_run(run_id).map_err(at(Stage::Eval))?;
    let labels = store.run_labels(run_id).map_err(at(Stage::Eval))?;
    let manifest = &snapshot.record.manifest;
    let evaluated: Vec<(String, Prediction)> = snapshot
        .predictions()
        .into_iter()
        .filter(|(id, _)| labels.contains_key(id))
        .collect();
    let context = ReportContext {
        run_id: run_id.to_string(),
        split: manifest.split,
        template_id: manifest.key.template_id.clone(),
        template_revision: manifest.key.template_revision,
    };
    let overall = compute_metrics(&evaluated, &labels, &context).map_err(at(Stage::Eval))?;
    let by_split = compute_split_reports(&evaluated, &labels, &manifest.splits, &context).map_err(at(Stage::Eval))?;
    Ok(RunReport {
        run_id: run_id.to_string(),
        status: snapshot.record.status,
        overall,
        by_split,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub run_id: String,
    pub record: RunRecord,
    pub candidates: Vec<OverflagScore>,
    /// Present when any ground-truth labels exist.
    pub report: Option<RunReport>,
}

pub async fn run_pipeline(config: &PipelineConfig, split: Option<Split>) -> Result<PipelineOutcome, PipelineError> {
    config.validate().map_err(at(Stage::Config))?;
    let gateway = Gateway::from_config(&config.backend).map_err(at(Stage::Classify))?;
    run_pipeline_with(config, split, &gateway).await
}

/// [`run_pipeline`] against a caller-supplied gateway.
pub async fn run_pipeline_with(
    config: &PipelineConfig,
    split: Option<Split>,
    gateway: &Gateway,
) -> Result<PipelineOutcome, PipelineError> {
    let inputs = load_inputs(config)?;
    let store = Store::open(&config.paths.store_dir).map_err(at(Stage::Record))?;
    let candidates = select(&inputs.corpus, config, &inputs.split_overrides, split);
    let ids: Vec<String> = candidates.iter().map(|c| c.advertiser_id.clone()).collect();
    tracing::info!(candidates = ids.len(), "selected");
    let profiles = build_profiles(&inputs.corpus, &ids, config)?;
    let splits = ids
        .iter()
        .map(|id| (id.clone(), split_for(id, config, &inputs.split_overrides)))
        .collect();
    let job = ClassifyJob {
        template: &inputs.template,
        policy: &inputs.policy,
        profiles: &profiles,
        prompt_budget: config.prompt,
        split,
        splits,
        labels: &inputs.labels,
        workers: config.workers,
    };
    let record = classify(&store, gateway, job).await?;
    let run_id = record.run_id().to_string();
    let report = if inputs.labels.is_empty() {
        None
    } else {
        Some(run_report(&store, &run_id)?)
    };
    Ok(PipelineOutcome {
        run_id,
        record,
        candidates,
        report,
    })
}
