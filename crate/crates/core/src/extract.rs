//! Trigger recognition, argument extraction and post-processing of model replies.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::llm::{complete_with_retry, LlmClient, RetryPolicy};
use crate::model::{normalize, Argument, EventMention, Ontology, Segment};
use crate::prompts::{Prompts, Stage};
use crate::retrieval::{embed, EmbeddingProvider, FewShotExample, SupportIndex};

const SHIPPED_ALIASES: &str = include_str!("../data/aliases.json");

/// Alternative key spellings accepted in model output, per nesting level.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AliasTable {
    event: BTreeMap<String, Vec<String>>,
    argument: BTreeMap<String, Vec<String>>,
    container: Vec<String>,
}

impl AliasTable {
    pub fn shipped() -> Self {
        Self::from_json(SHIPPED_ALIASES).expect("shipped alias table is valid")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let table: AliasTable = serde_json::from_str(json).map_err(|e| Error::Config(format!("alias table: {e}")))?;
        for (level, map, required) in [
            ("event", &table.event, &["trigger", "type", "arguments"][..]),
            ("argument", &table.argument, &["name", "role"][..]),
        ] {
            for key in required {
                if !map.contains_key(*key) {
                    return Err(Error::Config(format!("alias table: {level} level lacks {key:?}")));
                }
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn is_container(&self, key: &str) -> bool {
        self.container.iter().any(|c| c.eq_ignore_ascii_case(key))
    }
}

/// Renames aliased keys to canonical ones. A canonical key already present wins over any alias.
fn canonicalize_keys<'v>(obj: &'v Map<String, Value>, table: &BTreeMap<String, Vec<String>>) -> BTreeMap<String, &'v Value> {
    let lookup = |key: &str| obj.iter().find(|(k, _)| k.eq_ignore_ascii_case(key)).map(|(_, v)| v);
    table
        .iter()
        .filter_map(|(canonical, aliases)| {
            lookup(canonical)
                .or_else(|| aliases.iter().find_map(|a| lookup(a)))
                .map(|v| (canonical.clone(), v))
        })
        .collect()
}

/// Why a reply could not be turned into events.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecoveryError {
    #[error("no balanced JSON value found")]
    NoJson,
    #[error("JSON does not match the event schema: {0}")]
    Schema(String),
}

/// Every top-level balanced JSON array or object in `raw`, left to right.
fn json_candidates(raw: &str) -> Vec<Value> {
    let bytes = raw.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' || bytes[i] == b'{' {
            let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
            if let Some(Ok(value)) = stream.next() {
                i += stream.byte_offset();
                out.push(value);
                continue;
            }
        }
        i += 1;
    }
    out
}

/// The last top-level balanced JSON array or object in `raw`.
pub fn find_json_tail(raw: &str) -> Option<Value> {
    json_candidates(raw).pop()
}

/// Recovers events from the last JSON value in `raw` that fits the event shape.
/// Preceding prose, echoed transcripts and code fences are ignored.
pub fn recover_json_tail(raw: &str, aliases: &AliasTable) -> std::result::Result<Vec<EventMention>, RecoveryError> {
    let candidates = json_candidates(raw);
    let mut last_err = None;
    for value in candidates.iter().rev() {
        match events_from_value(value, aliases) {
            Ok(events) => return Ok(events),
            Err(e) => {
                last_err.get_or_insert(e);
            }
        }
    }
    Err(last_err.map_or(RecoveryError::NoJson, RecoveryError::Schema))
}

/// A bare list of argument objects, for replies that omit the event wrapper.
fn arguments_tail(raw: &str, aliases: &AliasTable) -> Option<Vec<Argument>> {
    json_candidates(raw).iter().rev().find_map(|v| match v {
        Value::Array(items) => items
            .iter()
            .map(|it| argument_from_value(it, aliases))
            .collect::<std::result::Result<Vec<_>, _>>()
            .ok(),
        _ => None,
    })
}

fn events_from_value(value: &Value, aliases: &AliasTable) -> std::result::Result<Vec<EventMention>, String> {
    match value {
        Value::Array(items) => {
            let mut out = Vec::new();
            for item in items {
                out.extend(events_from_value(item, aliases)?);
            }
            Ok(out)
        }
        Value::Object(obj) => {
            let keys = canonicalize_keys(obj, &aliases.event);
            let is_event = keys.contains_key("trigger") && keys.get("type").is_some_and(|t| t.is_string());
            if !is_event {
                if let Some((_, inner)) = obj
                    .iter()
                    .find(|(k, v)| aliases.is_container(k) && (v.is_array() || v.is_object()))
                {
                    return events_from_value(inner, aliases);
                }
            }
            event_from_object(keys, aliases)
        }
        other => Err(format!("expected an event object, found {other}")),
    }
}

fn event_from_object(keys: BTreeMap<String, &Value>, aliases: &AliasTable) -> std::result::Result<Vec<EventMention>, String> {
    let triggers: Vec<String> = match keys.get("trigger") {
        Some(Value::String(s)) => vec![s.clone()],
        Some(Value::Array(items)) => items
            .iter()
            .map(|t| t.as_str().map(str::to_string).ok_or_else(|| format!("trigger list item {t} is not a string")))
            .collect::<std::result::Result<_, _>>()?,
        Some(other) => return Err(format!("trigger {other} is not a string")),
        None => return Err("event object has no trigger".into()),
    };
    let event_type = match keys.get("type") {
        Some(Value::String(s)) => s.clone(),
        Some(other) => return Err(format!("type {other} is not a string")),
        None => return Err("event object has no type".into()),
    };
    let arguments = match keys.get("arguments") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|a| argument_from_value(a, aliases))
            .collect::<std::result::Result<_, _>>()?,
        Some(Value::Object(map)) => {
            // {"Role": "name"} or {"Role": ["a", "b"]}
            let mut args = Vec::new();
            for (role, names) in map {
                match names {
                    Value::Array(list) => {
                        for n in list {
                            args.push(Argument::new(scalar(n)?, role.clone()));
                        }
                    }
                    n => args.push(Argument::new(scalar(n)?, role.clone())),
                }
            }
            args
        }
        Some(other) => return Err(format!("arguments {other} is not a list")),
    };
    Ok(triggers
        .into_iter()
        .map(|trigger| EventMention {
            trigger,
            event_type: event_type.clone(),
            arguments: arguments.clone(),
        })
        .collect())
}

fn argument_from_value(value: &Value, aliases: &AliasTable) -> std::result::Result<Argument, String> {
    let Value::Object(obj) = value else {
        return Err(format!("argument {value} is not an object"));
    };
    let keys = canonicalize_keys(obj, &aliases.argument);
    let name = keys.get("name").ok_or("argument has no name")?;
    let role = keys.get("role").and_then(|r| r.as_str()).ok_or("argument has no role")?;
    Ok(Argument::new(scalar(name)?, role))
}

fn scalar(v: &Value) -> std::result::Result<String, String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(format!("{other} is not a string")),
    }
}

/// Whether a reply with no JSON is an explicit "there are no events" answer.
pub fn is_no_event_answer(raw: &str) -> bool {
    let n = normalize(raw);
    let n = n.trim_matches(|c: char| !c.is_alphanumeric());
    n == "none" || n.contains("no event") || n.contains("no events")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerPrediction {
    #[serde(skip)]
    pub segment_id: String,
    pub trigger: String,
    #[serde(rename = "type")]
    pub event_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawStageOutput {
    pub segment_id: String,
    pub stage: Stage,
    pub raw_text: String,
    pub attempts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
}

/// Result of one retried stage: the verified value (if any) and every reply seen.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRun<T> {
    pub value: Option<T>,
    pub replies: Vec<String>,
}

impl<T> StageRun<T> {
    pub fn status(&self) -> StageStatus {
        if self.value.is_some() {
            StageStatus::Ok
        } else {
            StageStatus::Failed
        }
    }

    pub fn attempts(&self) -> usize {
        self.replies.len()
    }

    pub fn raw_output(&self, segment_id: &str, stage: Stage) -> Option<RawStageOutput> {
        self.replies.last().map(|raw| RawStageOutput {
            segment_id: segment_id.to_string(),
            stage,
            raw_text: raw.clone(),
            attempts: self.replies.len(),
        })
    }
}

fn run_stage<T>(
    client: &LlmClient,
    bundle: &crate::prompts::PromptBundle,
    verify: impl Fn(&str) -> std::result::Result<T, String>,
    policy: RetryPolicy,
) -> Result<StageRun<T>> {
    let replies = Mutex::new(Vec::new());
    let outcome = complete_with_retry(
        client,
        bundle,
        |raw| {
            replies.lock().expect("reply log").push(raw.to_string());
            verify(raw)
        },
        policy,
    );
    let replies = replies.into_inner().expect("reply log");
    match outcome {
        Ok(c) => Ok(StageRun {
            value: Some(c.value),
            replies,
        }),
        Err(Error::FormatFailure { .. }) => Ok(StageRun { value: None, replies }),
        Err(e) => Err(e),
    }
}

/// Support-set lookup for prompt examples.
pub struct Retriever<'a> {
    pub index: &'a SupportIndex,
    pub embedder: &'a dyn EmbeddingProvider,
    pub k: usize,
    /// In the argument stage, keep only examples sharing a predicted event type.
    pub same_type_filter: bool,
}

impl<'a> Retriever<'a> {
    pub fn examples(&self, text: &str, types: Option<&BTreeSet<String>>) -> Result<Vec<&'a FewShotExample>> {
        if self.k == 0 {
            return Ok(Vec::new());
        }
        let query = match embed(text, self.embedder) {
            Ok(q) => q,
            Err(Error::ZeroVector) => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let hits = match types.filter(|_| self.same_type_filter) {
            Some(types) => self.index.search_filtered(&query, self.k, |ex| {
                ex.gold_events.iter().any(|e| types.contains(&e.event_type))
            })?,
            None => self.index.search(&query, self.k)?,
        };
        Ok(hits
            .iter()
            .filter_map(|h| self.index.example(&h.example_id))
            .collect())
    }
}

/// Everything the extraction stages need.
pub struct Extractor<'a> {
    pub ontology: &'a Ontology,
    pub prompts: &'a Prompts,
    pub aliases: &'a AliasTable,
    pub retriever: Option<Retriever<'a>>,
    pub trigger_client: &'a LlmClient,
    pub argument_client: &'a LlmClient,
    pub format_client: &'a LlmClient,
    pub retry: RetryPolicy,
}

/// Outcome of post-processing one segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalStatus {
    Ok,
    /// Arguments could not be recovered even after formatting; triggers kept bare.
    ArgumentFailed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostOutcome {
    pub events: Vec<EventMention>,
    pub status: FinalStatus,
    pub format_calls: usize,
    /// Events removed by the final ontology check.
    pub dropped: usize,
}

impl Extractor<'_> {
    fn examples(&self, text: &str, types: Option<&BTreeSet<String>>) -> Result<Vec<&FewShotExample>> {
        match &self.retriever {
            Some(r) => r.examples(text, types),
            None => Ok(Vec::new()),
        }
    }

    /// Accepts a trigger-stage reply: a list of `{trigger, type}` with ontology types, or an explicit no-event answer.
    pub fn verify_triggers(&self, raw: &str) -> std::result::Result<Vec<(String, String)>, String> {
        let events = match recover_json_tail(raw, self.aliases) {
            Ok(events) => events,
            Err(RecoveryError::NoJson) if is_no_event_answer(raw) => return Ok(Vec::new()),
            Err(e) => return Err(e.to_string()),
        };
        events
            .into_iter()
            .map(|e| {
                let ty = self
                    .ontology
                    .canonical_type(&e.event_type)
                    .ok_or_else(|| format!("unknown event type {:?}", e.event_type))?;
                if e.trigger.trim().is_empty() {
                    return Err("empty trigger".to_string());
                }
                Ok((e.trigger, ty.to_string()))
            })
            .collect()
    }

    pub fn extract_triggers(&self, segment: &Segment) -> Result<StageRun<Vec<TriggerPrediction>>> {
        let examples = self.examples(&segment.text, None)?;
        let bundle = self.prompts.build_trigger_prompt(segment, &examples, self.ontology)?;
        let run = run_stage(self.trigger_client, &bundle, |raw| self.verify_triggers(raw), self.retry)?;
        Ok(StageRun {
            value: run.value.map(|pairs| {
                pairs
                    .into_iter()
                    .map(|(trigger, event_type)| TriggerPrediction {
                        segment_id: segment.id.clone(),
                        trigger,
                        event_type,
                    })
                    .collect()
            }),
            replies: run.replies,
        })
    }

    /// Accepts an argument-stage (or formatting) reply and aligns it to the input triggers.
    pub fn verify_arguments(
        &self,
        raw: &str,
        triggers: &[TriggerPrediction],
    ) -> std::result::Result<Vec<EventMention>, String> {
        let mut out: Vec<EventMention> = triggers
            .iter()
            .map(|t| EventMention::new(t.trigger.clone(), t.event_type.clone()))
            .collect();
        let recovered = match recover_json_tail(raw, self.aliases) {
            Ok(events) => events,
            Err(e) => match (triggers, arguments_tail(raw, self.aliases)) {
                ([only], Some(args)) => vec![EventMention {
                    trigger: only.trigger.clone(),
                    event_type: only.event_type.clone(),
                    arguments: args,
                }],
                _ => return Err(e.to_string()),
            },
        };
        let mut used = vec![false; triggers.len()];
        for event in recovered {
            let ty = self
                .ontology
                .canonical_type(&event.event_type)
                .filter(|ty| triggers.iter().any(|t| t.event_type == *ty))
                .ok_or_else(|| format!("event type {:?} was not predicted for this text", event.event_type))?;
            let mut arguments = Vec::with_capacity(event.arguments.len());
            for arg in event.arguments {
                let role = self
                    .ontology
                    .canonical_role(ty, &arg.role)
                    .ok_or_else(|| format!("role {:?} is not permitted for {ty}", arg.role))?;
                if arg.name.trim().is_empty() {
                    return Err("empty argument name".into());
                }
                arguments.push(Argument::new(arg.name, role));
            }
            let trig = normalize(&event.trigger);
            let slot = (0..triggers.len())
                .find(|&i| !used[i] && triggers[i].event_type == ty && normalize(&triggers[i].trigger) == trig)
                .or_else(|| (0..triggers.len()).find(|&i| !used[i] && triggers[i].event_type == ty))
                .or_else(|| (0..triggers.len()).find(|&i| triggers[i].event_type == ty))
                .expect("type was checked against the triggers");
            used[slot] = true;
            out[slot].arguments.extend(arguments);
        }
        Ok(out)
    }

    pub fn extract_arguments(&self, segment: &Segment, triggers: &[TriggerPrediction]) -> Result<StageRun<Vec<EventMention>>> {
        let pairs: Vec<(String, String)> = triggers.iter().map(|t| (t.trigger.clone(), t.event_type.clone())).collect();
        let types: BTreeSet<String> = triggers.iter().map(|t| t.event_type.clone()).collect();
        let examples = self.examples(&segment.text, Some(&types))?;
        let bundle = self.prompts.build_argument_prompt(segment, &pairs, &examples, self.ontology)?;
        run_stage(self.argument_client, &bundle, |raw| self.verify_arguments(raw, triggers), self.retry)
    }

    /// Deterministic recovery of the argument-stage reply, then an LLM formatting
    /// call if that fails, then the final ontology check.
    pub fn postprocess_segment(&self, triggers: &[TriggerPrediction], raw: Option<&RawStageOutput>) -> Result<PostOutcome> {
        let bare = || {
            triggers
                .iter()
                .map(|t| EventMention::new(t.trigger.clone(), t.event_type.clone()))
                .collect::<Vec<_>>()
        };
        if triggers.is_empty() {
            return Ok(PostOutcome {
                events: Vec::new(),
                status: FinalStatus::Ok,
                format_calls: 0,
                dropped: 0,
            });
        }
        let recovered = raw.and_then(|r| self.verify_arguments(&r.raw_text, triggers).ok());
        let (events, status, format_calls) = match (recovered, raw) {
            (Some(events), _) => (events, FinalStatus::Ok, 0),
            (None, Some(r)) if !r.raw_text.is_empty() => {
                let bundle = self.prompts.build_format_prompt(&r.segment_id, &r.raw_text)?;
                let run = run_stage(self.format_client, &bundle, |reply| self.verify_arguments(reply, triggers), self.retry)?;
                let calls = run.attempts();
                match run.value {
                    Some(events) => (events, FinalStatus::Ok, calls),
                    None => {
                        log::warn!("{}: arguments unrecoverable, keeping bare triggers", r.segment_id);
                        (bare(), FinalStatus::ArgumentFailed, calls)
                    }
                }
            }
            (None, _) => (bare(), FinalStatus::ArgumentFailed, 0),
        };
        let (events, dropped) = validate_events(events, self.ontology);
        Ok(PostOutcome {
            events,
            status,
            format_calls,
            dropped,
        })
    }

    /// Post-processes many segments: `(triggers, argument-stage output)` per segment id.
    pub fn postprocess(
        &self,
        items: &[(String, Vec<TriggerPrediction>, Option<RawStageOutput>)],
    ) -> Result<Vec<(String, PostOutcome)>> {
        items
            .iter()
            .map(|(id, triggers, raw)| Ok((id.clone(), self.postprocess_segment(triggers, raw.as_ref())?)))
            .collect()
    }
}

/// Keeps only events whose type and roles the ontology admits. Returns the number dropped.
pub fn validate_events(events: Vec<EventMention>, ontology: &Ontology) -> (Vec<EventMention>, usize) {
    let before = events.len();
    let kept: Vec<EventMention> = events
        .into_iter()
        .filter(|e| match ontology.check_event(e) {
            Ok(()) => true,
            Err(reason) => {
                log::warn!("dropping invalid event {:?}: {reason}", e.trigger);
                false
            }
        })
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}
