//! Domain types, the event ontology, and loaders for gold and transcript files.
//!
//! Gold files hold one record per segment in the shared-task shape
//! (`{"id": .., "event": [{"trigger", "type", "arguments": [{"name", "role"}]}]}`),
//! either as a JSON array or as JSON lines. Transcript files are JSON lines of
//! `{"id", "text"}`. The two are joined on `id`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SHIPPED_ONTOLOGY: &str = include_str!("../data/ontology.json");

/// Lowercase, trim, and collapse internal whitespace runs to one space.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Splits on anything that is not alphanumeric.
pub fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty())
}

/// One transcript unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub text: String,
}

impl Segment {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Segment {
            id: id.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Argument {
    pub name: String,
    pub role: String,
}

impl Argument {
    pub fn new(name: impl Into<String>, role: impl Into<String>) -> Self {
        Argument {
            name: name.into(),
            role: role.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventMention {
    pub trigger: String,
    #[serde(rename = "type")]
    pub event_type: String,
    #[serde(default)]
    pub arguments: Vec<Argument>,
}

impl EventMention {
    pub fn new(trigger: impl Into<String>, event_type: impl Into<String>) -> Self {
        EventMention {
            trigger: trigger.into(),
            event_type: event_type.into(),
            arguments: Vec::new(),
        }
    }

    pub fn with_argument(mut self, name: impl Into<String>, role: impl Into<String>) -> Self {
        self.arguments.push(Argument::new(name, role));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSegment {
    pub segment: Segment,
    pub gold_events: Vec<EventMention>,
}

/// Closed set of event types with the roles each type admits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ontology {
    roles_by_type: BTreeMap<String, Vec<String>>,
}

impl Ontology {
    /// Build from a type → roles map. Role lists keep their order; repeats are dropped.
    pub fn from_map(map: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let mut roles_by_type = BTreeMap::new();
        for (ty, roles) in map {
            if ty.trim().is_empty() {
                return Err(Error::Config("ontology contains an empty event type".into()));
            }
            let mut seen = HashSet::new();
            let mut kept = Vec::with_capacity(roles.len());
            for role in roles {
                if role.trim().is_empty() {
                    return Err(Error::Config(format!("event type {ty} lists an empty role")));
                }
                if seen.insert(role.clone()) {
                    kept.push(role);
                }
            }
            roles_by_type.insert(ty, kept);
        }
        if roles_by_type.is_empty() {
            return Err(Error::Config("ontology has no event types".into()));
        }
        Ok(Ontology { roles_by_type })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let map: BTreeMap<String, Vec<String>> = serde_json::from_str(json)
            .map_err(|e| Error::Config(format!("ontology: {e}")))?;
        Self::from_map(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, Vec<String>> =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e))?;
        Self::from_map(map)
    }

    /// The 33-type ontology bundled with the crate.
    pub fn shipped() -> Self {
        Self::from_json(SHIPPED_ONTOLOGY).expect("bundled ontology is valid")
    }

    /// Event types in sorted order.
    pub fn event_types(&self) -> impl Iterator<Item = &str> {
        self.roles_by_type.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.roles_by_type.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles_by_type.is_empty()
    }

    pub fn contains_type(&self, event_type: &str) -> bool {
        self.roles_by_type.contains_key(event_type)
    }

    pub fn roles_for(&self, event_type: &str) -> Option<&[String]> {
        self.roles_by_type.get(event_type).map(Vec::as_slice)
    }

    pub fn all_roles(&self) -> BTreeSet<&str> {
        self.roles_by_type
            .values()
            .flatten()
            .map(String::as_str)
            .collect()
    }

    /// Case- and whitespace-insensitive lookup of an event type's canonical spelling.
    pub fn canonical_type(&self, event_type: &str) -> Option<&str> {
        if let Some((k, _)) = self.roles_by_type.get_key_value(event_type) {
            return Some(k);
        }
        let wanted = normalize(event_type);
        self.roles_by_type
            .keys()
            .find(|k| normalize(k) == wanted)
            .map(String::as_str)
    }

    pub fn canonical_role(&self, event_type: &str, role: &str) -> Option<&str> {
        let roles = self.roles_for(event_type)?;
        let wanted = normalize(role);
        roles
            .iter()
            .find(|r| r.as_str() == role || normalize(r) == wanted)
            .map(String::as_str)
    }

    /// Exact membership check used on gold data and on final predictions.
    pub fn check_event(&self, event: &EventMention) -> std::result::Result<(), String> {
        if event.trigger.trim().is_empty() {
            return Err("empty trigger".into());
        }
        let Some(roles) = self.roles_for(&event.event_type) else {
            return Err(format!("unknown event type {:?}", event.event_type));
        };
        for arg in &event.arguments {
            if normalize(&arg.name).is_empty() {
                return Err(format!("empty argument name in {} event", event.event_type));
            }
            if !roles.contains(&arg.role) {
                return Err(format!(
                    "role {:?} is not permitted for event type {:?}",
                    arg.role, event.event_type
                ));
            }
        }
        Ok(())
    }

    pub fn to_map(&self) -> &BTreeMap<String, Vec<String>> {
        &self.roles_by_type
    }
}

#[derive(Deserialize)]
struct GoldRecord {
    id: String,
    #[serde(default)]
    text: Option<String>,
    event: Vec<EventMention>,
}

#[derive(Deserialize)]
struct TranscriptRecord {
    id: String,
    text: String,
}

/// Reads a JSON-lines file, skipping blank lines. Items carry their 1-based line number.
pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(path, &text)
}

pub(crate) fn parse_jsonl<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| Error::parse(path, idx + 1, e))?;
        out.push((idx + 1, value));
    }
    Ok(out)
}

/// Loads a gold file (JSON array or JSON lines) and validates every event
/// against the ontology.
pub fn load_gold(path: &Path, ontology: &Ontology) -> Result<Vec<LabeledSegment>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<GoldRecord> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e))?
    } else {
        parse_jsonl(path, &text)?.into_iter().map(|(_, r)| r).collect()
    };

    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        if record.id.is_empty() {
            return Err(Error::validation("<empty>", "record id is empty"));
        }
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        for event in &record.event {
            ontology
                .check_event(event)
                .map_err(|m| Error::validation(&record.id, m))?;
        }
        out.push(LabeledSegment {
            segment: Segment::new(record.id, record.text.unwrap_or_default()),
            gold_events: record.event,
        });
    }
    Ok(out)
}

pub fn load_transcripts(path: &Path) -> Result<Vec<Segment>> {
    let records: Vec<(usize, TranscriptRecord)> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, record) in records {
        if record.id.is_empty() {
            return Err(Error::parse(path, line, "empty id"));
        }
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        out.push(Segment::new(record.id, record.text));
    }
    Ok(out)
}

/// Gold records paired with transcripts by id.
#[derive(Debug, Clone, Default)]
pub struct Joined {
    pub segments: Vec<LabeledSegment>,
    /// Gold ids without a transcript.
    pub missing_transcript: Vec<String>,
    /// Transcript ids without a gold record.
    pub missing_gold: Vec<String>,
}

/// Pairs gold records with transcripts. The transcript text replaces any
/// text carried by the gold record. Output keeps gold file order.
pub fn join(gold: Vec<LabeledSegment>, transcripts: &[Segment]) -> Joined {
    let by_id: HashMap<&str, &Segment> = transcripts.iter().map(|s| (s.id.as_str(), s)).collect();
    let gold_ids: HashSet<String> = gold.iter().map(|g| g.segment.id.clone()).collect();

    let mut joined = Joined::default();
    for mut record in gold {
        match by_id.get(record.segment.id.as_str()) {
            Some(seg) => {
                record.segment.text = seg.text.clone();
                joined.segments.push(record);
            }
            None => joined.missing_transcript.push(record.segment.id),
        }
    }
    joined.missing_gold = transcripts
        .iter()
        .filter(|s| !gold_ids.contains(&s.id))
        .map(|s| s.id.clone())
        .collect();
    joined
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("  Election "), "election");
        assert_eq!(normalize("NEW   York"), "new york");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("a\t\nb"), "a b");
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC*") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once);
        }
    }

    #[test]
    fn shipped_ontology_cardinalities() {
        let o = Ontology::shipped();
        assert_eq!(o.len(), 33);
        assert_eq!(o.all_roles().len(), 22);
        assert_eq!(o.roles_for("Elect").unwrap(), ["Person", "Entity", "Place"]);
    }

    #[test]
    fn canonical_lookups_ignore_case() {
        let o = Ontology::shipped();
        assert_eq!(o.canonical_type("elect"), Some("Elect"));
        assert_eq!(o.canonical_type("transfer-money"), Some("Transfer-Money"));
        assert_eq!(o.canonical_type("Eletc"), None);
        assert_eq!(o.canonical_role("Elect", "person"), Some("Person"));
        assert_eq!(o.canonical_role("Elect", "Pilot"), None);
    }

    #[test]
    fn load_gold_listing_record() {
        let f = write_tmp(
            r#"{"id":"train-6","event":[{"trigger":"election","type":"Elect","arguments":[{"name":"man","role":"Person"}]}]}"#,
        );
        let gold = load_gold(f.path(), &Ontology::shipped()).unwrap();
        assert_eq!(gold.len(), 1);
        assert_eq!(gold[0].segment.id, "train-6");
        assert_eq!(gold[0].gold_events.len(), 1);
        assert_eq!(gold[0].gold_events[0].arguments, vec![Argument::new("man", "Person")]);
    }

    #[test]
    fn load_gold_accepts_arrays_and_empty_events() {
        let f = write_tmp(r#"[{"id":"a","event":[]},{"id":"b","event":[{"trigger":"war","type":"Attack"}]}]"#);
        let gold = load_gold(f.path(), &Ontology::shipped()).unwrap();
        assert_eq!(gold.len(), 2);
        assert!(gold[0].gold_events.is_empty());
        assert!(gold[1].gold_events[0].arguments.is_empty());
    }

    #[test]
    fn load_gold_rejects_unknown_type() {
        let f = write_tmp(r#"{"id":"x1","event":[{"trigger":"t","type":"NotAType","arguments":[]}]}"#);
        let err = load_gold(f.path(), &Ontology::shipped()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("NotAType") && msg.contains("x1"), "{msg}");
    }

    #[test]
    fn load_gold_rejects_disallowed_role() {
        let f = write_tmp(
            r#"{"id":"x2","event":[{"trigger":"t","type":"Elect","arguments":[{"name":"jet","role":"Pilot"}]}]}"#,
        );
        let err = load_gold(f.path(), &Ontology::shipped()).unwrap_err();
        assert!(matches!(err, Error::Validation { ref id, .. } if id == "x2"));
    }

    #[test]
    fn load_gold_reports_line_numbers() {
        let f = write_tmp("{\"id\":\"a\",\"event\":[]}\n\n{\"id\": broken}\n");
        match load_gold(f.path(), &Ontology::shipped()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn transcripts_load_in_order() {
        let f = write_tmp("{\"id\":\"t1\",\"text\":\"the election was held\"}\n{\"id\":\"t2\",\"text\":\"\"}\n");
        let segs = load_transcripts(f.path()).unwrap();
        assert_eq!(segs, vec![Segment::new("t1", "the election was held"), Segment::new("t2", "")]);
    }

    #[test]
    fn transcripts_reject_duplicates_and_missing_fields() {
        let f = write_tmp("{\"id\":\"t1\",\"text\":\"a\"}\n{\"id\":\"t1\",\"text\":\"b\"}\n");
        assert!(matches!(load_transcripts(f.path()), Err(Error::DuplicateId(id)) if id == "t1"));
        let f = write_tmp("{\"id\":\"t1\"}\n");
        assert!(matches!(load_transcripts(f.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn join_reports_both_sides() {
        let gold = vec![
            LabeledSegment { segment: Segment::new("a", ""), gold_events: vec![] },
            LabeledSegment { segment: Segment::new("b", ""), gold_events: vec![] },
        ];
        let transcripts = vec![Segment::new("b", "hello"), Segment::new("c", "x")];
        let joined = join(gold, &transcripts);
        assert_eq!(joined.segments.len(), 1);
        assert_eq!(joined.segments[0].segment.text, "hello");
        assert_eq!(joined.missing_transcript, vec!["a"]);
        assert_eq!(joined.missing_gold, vec!["c"]);
    }
}
