//! Stage-wise execution: gate → triggers → arguments → final, with one JSONL
//! artifact per stage. Each artifact starts with a `{stage, config_hash}`
//! header line; records follow sorted by segment id.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{EmbeddingConfig, LearnedConfig, PipelineConfig, ProviderConfig};
use crate::error::{Error, Result};
use crate::eval::{score, PolicyScore, Predictions, ScoreReport};
use crate::extract::{
    AliasTable, Extractor, FinalStatus, RawStageOutput, Retriever, StageStatus, TriggerPrediction,
};
use crate::gate::{build_lexicon, llm_classify, vote, GateRecord, PresenceScorer, RemoteScorer, TriggerLexicon, VerdictFile};
use crate::llm::{LlmClient, LlmProvider, RateLimiter, RemoteChatProvider, ResponseCache, RetryPolicy, ScriptedMock};
use crate::model::{join, load_gold, load_transcripts, EventMention, LabeledSegment, Ontology, Segment};
use crate::prompts::{Prompts, Stage};
use crate::retrieval::{EmbeddingProvider, FewShotExample, HashingEmbedder, RemoteEmbedder, SupportIndex, Split};

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageName {
    Gate,
    Triggers,
    Arguments,
    Final,
}

impl StageName {
    pub const ALL: [StageName; 4] = [StageName::Gate, StageName::Triggers, StageName::Arguments, StageName::Final];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Gate => "gate",
            StageName::Triggers => "triggers",
            StageName::Arguments => "arguments",
            StageName::Final => "final",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.as_str())
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub stage: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerRecord {
    pub id: String,
    pub status: StageStatus,
    pub attempts: usize,
    pub replies: Vec<String>,
    pub triggers: Vec<TriggerPrediction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgumentRecord {
    pub id: String,
    pub status: StageStatus,
    pub attempts: usize,
    pub replies: Vec<String>,
    pub events: Vec<EventMention>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub id: String,
    pub status: FinalStatus,
    pub format_calls: usize,
    pub dropped: usize,
    pub event: Vec<EventMention>,
}

/// One line of the predictions file; same shape as a gold record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub event: Vec<EventMention>,
}

trait Keyed {
    fn key(&self) -> &str;
}

impl Keyed for GateRecord {
    fn key(&self) -> &str {
        &self.id
    }
}

impl Keyed for TriggerRecord {
    fn key(&self) -> &str {
        &self.id
    }
}

impl Keyed for ArgumentRecord {
    fn key(&self) -> &str {
        &self.id
    }
}

impl Keyed for FinalRecord {
    fn key(&self) -> &str {
        &self.id
    }
}

/// Writes `header` then `records` as JSON lines, via a temporary file and rename.
pub fn write_jsonl<H: Serialize, R: Serialize>(path: &Path, header: Option<&H>, records: &[R]) -> Result<()> {
    let mut text = String::new();
    if let Some(h) = header {
        text.push_str(&serde_json::to_string(h).expect("serializable"));
        text.push('\n');
    }
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("serializable"));
        text.push('\n');
    }
    let tmp = path.with_extension("jsonl.tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a stage artifact. Returns `None` if absent; a hash mismatch is an error.
fn read_artifact<R: DeserializeOwned>(path: &Path, stage: StageName, expected_hash: &str) -> Result<Option<Vec<R>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, first)) = lines.next() else {
        return Err(Error::parse(path, 1, "artifact has no header line"));
    };
    let header: ArtifactHeader = serde_json::from_str(first).map_err(|e| Error::parse(path, 1, e))?;
    if header.stage != stage.as_str() {
        return Err(Error::parse(path, 1, format!("expected a {stage} artifact, found {}", header.stage)));
    }
    if header.config_hash != expected_hash {
        return Err(Error::ResumeMismatch {
            stage: stage.to_string(),
            expected: expected_hash.to_string(),
            found: header.config_hash,
        });
    }
    lines
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e)))
        .collect::<Result<Vec<R>>>()
        .map(Some)
}

/// Counters for one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    /// Uncached calls per LLM provider name.
    pub provider_calls: BTreeMap<String, usize>,
    pub learned_calls: usize,
    /// Stage name → "run" or "resumed".
    pub stages: BTreeMap<String, String>,
    pub trigger_attempts: usize,
    pub argument_attempts: usize,
    pub format_attempts: usize,
    pub segments: usize,
    pub gated_in: usize,
    pub extraction_failed: usize,
    pub argument_failed: usize,
    pub dropped_events: usize,
}

impl RunStats {
    pub fn total_provider_calls(&self) -> usize {
        self.provider_calls.values().sum::<usize>() + self.learned_calls
    }
}

/// Everything a run produced. Only `report` and the artifacts are persisted as-is.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub gate: Vec<GateRecord>,
    pub predictions: Option<Predictions>,
    pub report: Option<ScoreReport>,
    pub stats: RunStats,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config_hash: &'a str,
    until: &'a str,
    started_unix: u64,
    finished_unix: u64,
    #[serde(flatten)]
    stats: &'a RunStats,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// A configured pipeline with all inputs loaded.
pub struct Pipeline {
    config: PipelineConfig,
    hash: String,
    ontology: Ontology,
    prompts: Prompts,
    aliases: AliasTable,
    segments: Vec<LabeledSegment>,
    train: Vec<LabeledSegment>,
    clients: BTreeMap<String, LlmClient>,
    learned: Box<dyn PresenceScorer>,
    embedder: Box<dyn EmbeddingProvider>,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        let paths = &config.paths;
        let ontology = match &paths.ontology {
            Some(p) => Ontology::load(p)?,
            None => Ontology::shipped(),
        };
        let prompts = match &paths.templates {
            Some(dir) => Prompts::load_dir(dir)?,
            None => Prompts::builtin(),
        };
        let aliases = match &paths.aliases {
            Some(p) => AliasTable::load(p)?,
            None => AliasTable::shipped(),
        };

        let gold = load_gold(&paths.gold, &ontology)?;
        let transcripts = load_transcripts(&paths.transcripts)?;
        let joined = join(gold, &transcripts);
        if !joined.missing_transcript.is_empty() {
            log::warn!(
                "excluding {} gold record(s) without a transcript: {}",
                joined.missing_transcript.len(),
                joined.missing_transcript.join(", ")
            );
        }
        if !joined.missing_gold.is_empty() {
            log::warn!("ignoring {} transcript(s) without gold records", joined.missing_gold.len());
        }
        let mut segments = joined.segments;
        segments.sort_by(|a, b| a.segment.id.cmp(&b.segment.id));

        let mut train = load_gold(&paths.train_gold, &ontology)?;
        if let Some(tp) = &paths.train_transcripts {
            let joined = join(train, &load_transcripts(tp)?);
            if !joined.missing_transcript.is_empty() {
                log::warn!("{} training record(s) lack a transcript and are skipped", joined.missing_transcript.len());
            }
            train = joined.segments;
        }

        let cache = match &paths.cache {
            Some(p) => Some(Arc::new(ResponseCache::open(p)?)),
            None => None,
        };
        let conc = &config.concurrency;
        let mut clients = BTreeMap::new();
        for (name, pc) in &config.providers {
            let provider: Arc<dyn LlmProvider> = match pc {
                ProviderConfig::Mock { script } => Arc::new(ScriptedMock::from_file(name.clone(), script)?),
                ProviderConfig::Remote { endpoint, model, params } => {
                    Arc::new(RemoteChatProvider::new(endpoint.clone(), model.clone(), params.clone()))
                }
            };
            let mut client = LlmClient::new(provider).with_limiter(RateLimiter::new(
                conc.max_in_flight,
                Duration::from_millis(conc.min_interval_ms),
            ));
            if let Some(c) = &cache {
                client = client.with_cache(Arc::clone(c));
            }
            clients.insert(name.clone(), client);
        }

        let learned: Box<dyn PresenceScorer> = match &config.learned {
            LearnedConfig::File { path } => Box::new(VerdictFile::load(path, config.gate.threshold)?),
            LearnedConfig::Remote { endpoint } => Box::new(RemoteScorer::new(endpoint.clone(), config.gate.threshold)),
        };
        let embedder: Box<dyn EmbeddingProvider> = match &config.embedding {
            EmbeddingConfig::Mock { dimension } => Box::new(HashingEmbedder::new(*dimension)),
            EmbeddingConfig::Remote { endpoint, batch_size } => Box::new(RemoteEmbedder::new(endpoint.clone(), *batch_size)),
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(conc.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

        fs::create_dir_all(&paths.output_dir).map_err(|e| Error::io(&paths.output_dir, e))?;
        Ok(Pipeline {
            config,
            hash,
            ontology,
            prompts,
            aliases,
            segments,
            train,
            clients,
            learned,
            embedder,
            pool,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn segments(&self) -> &[LabeledSegment] {
        &self.segments
    }

    pub fn output_dir(&self) -> &Path {
        &self.config.paths.output_dir
    }

    pub fn artifact_path(&self, stage: StageName) -> PathBuf {
        self.output_dir().join(stage.file_name())
    }

    fn client(&self, name: &str) -> &LlmClient {
        &self.clients[name]
    }

    fn support_examples(&self) -> Vec<FewShotExample> {
        self.train
            .iter()
            .filter(|r| !r.segment.text.trim().is_empty())
            .map(|r| FewShotExample {
                example_id: r.segment.id.clone(),
                text: r.segment.text.clone(),
                gold_events: r.gold_events.clone(),
                split: Split::Train,
            })
            .collect()
    }

    /// Builds the support index, or loads it from `paths.index` when that file exists.
    pub fn load_or_build_index(&self) -> Result<SupportIndex> {
        let examples = self.support_examples();
        match &self.config.paths.index {
            Some(p) if p.exists() => SupportIndex::load(p, examples),
            _ => SupportIndex::build(examples, self.embedder.as_ref()),
        }
    }

    /// Builds the support index and writes it to `paths.index`.
    pub fn build_index(&self) -> Result<(PathBuf, usize)> {
        let path = self
            .config
            .paths
            .index
            .clone()
            .ok_or_else(|| Error::Config("paths.index is not set".into()))?;
        let index = SupportIndex::build(self.support_examples(), self.embedder.as_ref())?;
        index.save(&path)?;
        Ok((path, index.len()))
    }

    /// Runs `f` on every item in the worker pool. Failures abort the stage with
    /// the ids involved; the records that did succeed go to `<stage>.partial.jsonl`.
    fn par_stage<T, R>(&self, stage: StageName, items: &[T], id: impl Fn(&T) -> &str + Sync, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>>
    where
        T: Sync,
        R: Send + Serialize,
    {
        let results: Vec<Result<R>> = self.pool.install(|| items.par_iter().map(&f).collect());
        let mut ok = Vec::with_capacity(results.len());
        let mut failed = Vec::new();
        let mut first_err = None;
        for (item, r) in items.iter().zip(results) {
            match r {
                Ok(v) => ok.push(v),
                Err(e) => {
                    failed.push(id(item).to_string());
                    first_err.get_or_insert(e);
                }
            }
        }
        match first_err {
            None => Ok(ok),
            Some(source) => {
                let partial = self.output_dir().join(format!("{}.partial.jsonl", stage.as_str()));
                let header = self.header(stage);
                if let Err(e) = write_jsonl(&partial, Some(&header), &ok) {
                    log::error!("could not write {}: {e}", partial.display());
                }
                Err(Error::Stage {
                    stage: stage.to_string(),
                    ids: failed,
                    source: Box::new(source),
                })
            }
        }
    }

    fn header(&self, stage: StageName) -> ArtifactHeader {
        ArtifactHeader {
            stage: stage.to_string(),
            config_hash: self.hash.clone(),
        }
    }

    /// Loads the stage artifact under `resume`, otherwise computes and writes it.
    fn stage<R>(&self, stage: StageName, resume: bool, stats: &mut RunStats, compute: impl FnOnce() -> Result<Vec<R>>) -> Result<Vec<R>>
    where
        R: Serialize + DeserializeOwned + Keyed,
    {
        let path = self.artifact_path(stage);
        if resume {
            if let Some(records) = read_artifact::<R>(&path, stage, &self.hash)? {
                log::info!("{stage}: resumed {} record(s) from {}", records.len(), path.display());
                stats.stages.insert(stage.to_string(), "resumed".into());
                return Ok(records);
            }
        }
        let mut records = compute()?;
        records.sort_by(|a, b| a.key().cmp(b.key()));
        write_jsonl(&path, Some(&self.header(stage)), &records)?;
        log::info!("{stage}: wrote {} record(s)", records.len());
        stats.stages.insert(stage.to_string(), "run".into());
        Ok(records)
    }

    fn gate_stage(&self, resume: bool, stats: &mut RunStats) -> Result<Vec<GateRecord>> {
        self.stage(StageName::Gate, resume, stats, || {
            let lexicon: TriggerLexicon = build_lexicon(&self.train);
            let presence = self.client(&self.config.stages.presence);
            let policy = self.config.gate.policy;
            let lenient = self.config.gate.lenient;
            let segs: Vec<&Segment> = self.segments.iter().map(|s| &s.segment).collect();
            self.par_stage(StageName::Gate, &segs, |s| &s.id, |s| {
                let rule = lexicon.matches(&s.text);
                let learned = self.learned.classify(s)?;
                let llm = llm_classify(s, presence, &self.prompts, &self.ontology, lenient)?;
                let triple = crate::gate::VerdictTriple::new(rule, learned, llm.present);
                Ok(GateRecord {
                    id: s.id.clone(),
                    rule,
                    learned,
                    llm: llm.present,
                    gated_in: vote(&triple, policy),
                })
            })
        })
    }

    fn extractor<'a>(&'a self, index: Option<&'a SupportIndex>) -> Extractor<'a> {
        Extractor {
            ontology: &self.ontology,
            prompts: &self.prompts,
            aliases: &self.aliases,
            retriever: index.map(|index| Retriever {
                index,
                embedder: self.embedder.as_ref(),
                k: self.config.retrieval.k,
                same_type_filter: self.config.retrieval.same_event_type_filter,
            }),
            trigger_client: self.client(&self.config.stages.trigger),
            argument_client: self.client(&self.config.stages.argument),
            format_client: self.client(self.config.stages.format()),
            retry: RetryPolicy {
                max_attempts: self.config.retry.max_attempts,
                corrective: self.config.retry.corrective,
            },
        }
    }

    /// Runs every stage up to and including `until`. The final stage also writes
    /// `predictions.jsonl` and `report.json`.
    pub fn run(&self, until: StageName, resume: bool) -> Result<RunOutput> {
        let started = unix_now();
        let mut stats = RunStats {
            segments: self.segments.len(),
            ..RunStats::default()
        };
        let calls_before: BTreeMap<String, usize> =
            self.clients.iter().map(|(n, c)| (n.clone(), c.provider_calls())).collect();
        let learned_before = self.learned.calls();

        let gate = self.gate_stage(resume, &mut stats)?;
        stats.gated_in = gate.iter().filter(|g| g.gated_in).count();
        let mut output = RunOutput {
            gate,
            predictions: None,
            report: None,
            stats: RunStats::default(),
        };

        if until > StageName::Gate {
            let by_id: HashMap<&str, &Segment> = self.segments.iter().map(|s| (s.segment.id.as_str(), &s.segment)).collect();
            let gated: Vec<&Segment> = output.gate.iter().filter(|g| g.gated_in).map(|g| by_id[g.id.as_str()]).collect();

            let pending = |stage: StageName| !resume || !self.artifact_path(stage).exists();
            let needs_index = self.config.retrieval.k > 0
                && !gated.is_empty()
                && (pending(StageName::Triggers) || (until > StageName::Triggers && pending(StageName::Arguments)));
            let index = if needs_index { Some(self.load_or_build_index()?) } else { None };
            let ex = self.extractor(index.as_ref());

            let triggers: Vec<TriggerRecord> = self.stage(StageName::Triggers, resume, &mut stats, || {
                self.par_stage(StageName::Triggers, &gated, |s| &s.id, |s| {
                    let run = ex.extract_triggers(s)?;
                    Ok(TriggerRecord {
                        id: s.id.clone(),
                        status: run.status(),
                        attempts: run.attempts(),
                        triggers: run.value.clone().unwrap_or_default(),
                        replies: run.replies,
                    })
                })
            })?;
            let triggers: Vec<TriggerRecord> = triggers
                .into_iter()
                .map(|mut r| {
                    for t in &mut r.triggers {
                        t.segment_id = r.id.clone();
                    }
                    r
                })
                .collect();
            stats.trigger_attempts = triggers.iter().map(|r| r.attempts).sum();
            stats.extraction_failed = triggers.iter().filter(|r| r.status == StageStatus::Failed).count();

            if until > StageName::Triggers {
                let with_triggers: Vec<(&Segment, &TriggerRecord)> = triggers
                    .iter()
                    .filter(|r| r.status == StageStatus::Ok && !r.triggers.is_empty())
                    .map(|r| (by_id[r.id.as_str()], r))
                    .collect();
                let arguments: Vec<ArgumentRecord> = self.stage(StageName::Arguments, resume, &mut stats, || {
                    self.par_stage(StageName::Arguments, &with_triggers, |(s, _)| &s.id, |(s, tr)| {
                        let run = ex.extract_arguments(s, &tr.triggers)?;
                        Ok(ArgumentRecord {
                            id: s.id.clone(),
                            status: run.status(),
                            attempts: run.attempts(),
                            events: run.value.clone().unwrap_or_default(),
                            replies: run.replies,
                        })
                    })
                })?;
                stats.argument_attempts = arguments.iter().map(|r| r.attempts).sum();

                if until > StageName::Arguments {
                    let raw_by_id: HashMap<&str, RawStageOutput> = arguments
                        .iter()
                        .filter_map(|a| {
                            a.replies.last().map(|raw| {
                                (
                                    a.id.as_str(),
                                    RawStageOutput {
                                        segment_id: a.id.clone(),
                                        stage: Stage::Argument,
                                        raw_text: raw.clone(),
                                        attempts: a.attempts,
                                    },
                                )
                            })
                        })
                        .collect();
                    let ok_triggers: Vec<&TriggerRecord> = triggers.iter().filter(|r| r.status == StageStatus::Ok).collect();
                    let finals: Vec<FinalRecord> = self.stage(StageName::Final, resume, &mut stats, || {
                        self.par_stage(StageName::Final, &ok_triggers, |r| &r.id, |r| {
                            let out = ex.postprocess_segment(&r.triggers, raw_by_id.get(r.id.as_str()))?;
                            Ok(FinalRecord {
                                id: r.id.clone(),
                                status: out.status,
                                format_calls: out.format_calls,
                                dropped: out.dropped,
                                event: out.events,
                            })
                        })
                    })?;
                    stats.format_attempts = finals.iter().map(|f| f.format_calls).sum();
                    stats.argument_failed = finals.iter().filter(|f| f.status == FinalStatus::ArgumentFailed).count();
                    stats.dropped_events = finals.iter().map(|f| f.dropped).sum();

                    let predictions: Predictions = finals.iter().map(|f| (f.id.clone(), f.event.clone())).collect();
                    let records: Vec<PredictionRecord> = predictions
                        .iter()
                        .map(|(id, event)| PredictionRecord {
                            id: id.clone(),
                            event: event.clone(),
                        })
                        .collect();
                    write_jsonl::<(), _>(&self.output_dir().join("predictions.jsonl"), None, &records)?;

                    let mut report = score(&predictions, &self.segments, self.config.scoring.mode)?;
                    report.gated_out = stats.segments - stats.gated_in;
                    report.extraction_failed = stats.extraction_failed;
                    report.by_policy.insert(
                        self.config.gate.policy.label().to_string(),
                        PolicyScore {
                            tc: report.tc,
                            ac: report.ac,
                            gated_in: stats.gated_in,
                        },
                    );
                    let report_path = self.output_dir().join("report.json");
                    let text = serde_json::to_string_pretty(&report).expect("serializable") + "\n";
                    fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;
                    output.predictions = Some(predictions);
                    output.report = Some(report);
                }
            }
        }

        stats.provider_calls = self
            .clients
            .iter()
            .map(|(n, c)| (n.clone(), c.provider_calls() - calls_before[n]))
            .collect();
        stats.learned_calls = self.learned.calls() - learned_before;
        let manifest = RunManifest {
            config_hash: &self.hash,
            until: until.as_str(),
            started_unix: started,
            finished_unix: unix_now(),
            stats: &stats,
        };
        let manifest_path = self.output_dir().join("run.json");
        let text = serde_json::to_string_pretty(&manifest).expect("serializable") + "\n";
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        output.stats = stats;
        Ok(output)
    }
}
