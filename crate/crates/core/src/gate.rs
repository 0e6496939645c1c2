//! Event-presence gate: three presence classifiers and the vote that combines them.
//!
//! - rule: does the transcript contain a trigger word seen in training?
//! - learned: an externally trained classifier, consumed as precomputed
//!   verdicts or through a scoring endpoint.
//! - llm: a yes/no question to a chat model.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::json;

use crate::error::{Error, Result};
use crate::http::Endpoint;
use crate::llm::{complete_with_retry, LlmClient, RetryPolicy};
use crate::model::{normalize, read_jsonl, tokens, LabeledSegment, Ontology, Segment};
use crate::prompts::Prompts;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Normalised trigger words and phrases harvested from training gold events.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TriggerLexicon {
    entries: BTreeSet<String>,
    phrases: HashMap<String, Vec<Vec<String>>>,
}

impl TriggerLexicon {
    pub fn from_entries<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut lexicon = TriggerLexicon::default();
        for entry in entries {
            let entry = normalize(entry.as_ref());
            let toks: Vec<String> = tokens(&entry).map(str::to_string).collect();
            let Some(first) = toks.first().cloned() else { continue };
            if lexicon.entries.insert(entry) {
                lexicon.phrases.entry(first).or_default().push(toks);
            }
        }
        lexicon
    }

    pub fn entries(&self) -> &BTreeSet<String> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when some entry occurs in `text` as a whole token or contiguous token run.
    pub fn matches(&self, text: &str) -> bool {
        let normalized = normalize(text);
        let toks: Vec<&str> = tokens(&normalized).collect();
        toks.iter().enumerate().any(|(i, tok)| {
            self.phrases.get(*tok).is_some_and(|candidates| {
                candidates
                    .iter()
                    .any(|phrase| toks.len() - i >= phrase.len() && phrase.iter().zip(&toks[i..]).all(|(a, b)| a == b))
            })
        })
    }
}

pub fn build_lexicon(training: &[LabeledSegment]) -> TriggerLexicon {
    TriggerLexicon::from_entries(training.iter().flat_map(|r| r.gold_events.iter().map(|e| e.trigger.as_str())))
}

pub fn rule_classify(segment: &Segment, lexicon: &TriggerLexicon) -> bool {
    lexicon.matches(&segment.text)
}

/// Source of the learned classifier's verdicts.
pub trait PresenceScorer: Send + Sync {
    fn classify(&self, segment: &Segment) -> Result<bool>;

    /// Remote calls made so far.
    fn calls(&self) -> usize {
        0
    }
}

pub fn learned_classify(segment: &Segment, scorer: &dyn PresenceScorer) -> Result<bool> {
    scorer.classify(segment)
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(untagged)]
enum FileVerdict {
    Present { present: bool },
    Probability { p: f64 },
}

#[derive(Deserialize)]
struct VerdictLine {
    id: String,
    #[serde(flatten)]
    verdict: FileVerdict,
}

/// Precomputed verdicts: JSON lines of `{"id", "present": bool}` or `{"id", "p": number}`.
#[derive(Debug, Clone)]
pub struct VerdictFile {
    verdicts: HashMap<String, FileVerdict>,
    threshold: f64,
}

impl VerdictFile {
    pub fn load(path: &Path, threshold: f64) -> Result<Self> {
        let mut verdicts = HashMap::new();
        for (_, line) in read_jsonl::<VerdictLine>(path)? {
            if verdicts.insert(line.id.clone(), line.verdict).is_some() {
                return Err(Error::DuplicateId(line.id));
            }
        }
        Ok(VerdictFile { verdicts, threshold })
    }

    pub fn from_presence(verdicts: impl IntoIterator<Item = (String, bool)>) -> Self {
        VerdictFile {
            verdicts: verdicts
                .into_iter()
                .map(|(id, present)| (id, FileVerdict::Present { present }))
                .collect(),
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn from_probabilities(verdicts: impl IntoIterator<Item = (String, f64)>, threshold: f64) -> Self {
        VerdictFile {
            verdicts: verdicts.into_iter().map(|(id, p)| (id, FileVerdict::Probability { p })).collect(),
            threshold,
        }
    }
}

impl PresenceScorer for VerdictFile {
    fn classify(&self, segment: &Segment) -> Result<bool> {
        match self.verdicts.get(&segment.id) {
            Some(FileVerdict::Present { present }) => Ok(*present),
            Some(FileVerdict::Probability { p }) => Ok(*p >= self.threshold),
            None => Err(Error::validation(&segment.id, "no learned-classifier verdict for this id")),
        }
    }
}

/// Scoring endpoint: request `{"id", "text"}`, response `{"p": number}`.
#[derive(Debug)]
pub struct RemoteScorer {
    endpoint: Endpoint,
    threshold: f64,
    calls: AtomicUsize,
}

impl RemoteScorer {
    pub fn new(endpoint: Endpoint, threshold: f64) -> Self {
        RemoteScorer {
            endpoint,
            threshold,
            calls: AtomicUsize::new(0),
        }
    }
}

impl PresenceScorer for RemoteScorer {
    fn classify(&self, segment: &Segment) -> Result<bool> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let provider = format!("remote:{}", self.endpoint.url);
        let value = self
            .endpoint
            .post_json(&provider, &json!({"id": segment.id, "text": segment.text}))?;
        let p = value.get("p").and_then(|p| p.as_f64()).ok_or_else(|| Error::Provider {
            provider,
            message: "response has no numeric \"p\"".into(),
        })?;
        Ok(p >= self.threshold)
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// YES/NO from the first alphanumeric token of a reply.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    let first = tokens(reply).next()?.to_uppercase();
    match first.as_str() {
        "YES" => Some(true),
        "NO" => Some(false),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LlmVerdict {
    pub present: bool,
    pub attempts: usize,
    /// Both replies were unparseable and the lenient flag turned this into "absent".
    pub defaulted: bool,
}

/// Asks the model once, re-asks once on an unparseable reply.
pub fn llm_classify(
    segment: &Segment,
    client: &LlmClient,
    prompts: &Prompts,
    ontology: &Ontology,
    lenient: bool,
) -> Result<LlmVerdict> {
    let bundle = prompts.build_presence_prompt(segment, ontology)?;
    let policy = RetryPolicy {
        max_attempts: 2,
        corrective: false,
    };
    match complete_with_retry(client, &bundle, |r| parse_yes_no(r).ok_or_else(|| "expected YES or NO".to_string()), policy) {
        Ok(c) => Ok(LlmVerdict {
            present: c.value,
            attempts: c.attempts,
            defaulted: false,
        }),
        Err(Error::FormatFailure { attempts, last_raw }) => {
            if lenient {
                log::warn!("{}: unparseable presence verdict {last_raw:?}, treating as absent", segment.id);
                Ok(LlmVerdict {
                    present: false,
                    attempts,
                    defaulted: true,
                })
            } else {
                Err(Error::Verdict {
                    id: segment.id.clone(),
                    reply: last_raw,
                })
            }
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Classifier {
    Rule,
    Learned,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct VerdictTriple {
    pub rule: bool,
    pub learned: bool,
    pub llm: bool,
}

impl VerdictTriple {
    pub fn new(rule: bool, learned: bool, llm: bool) -> Self {
        VerdictTriple { rule, learned, llm }
    }

    pub fn get(&self, c: Classifier) -> bool {
        match c {
            Classifier::Rule => self.rule,
            Classifier::Learned => self.learned,
            Classifier::Llm => self.llm,
        }
    }

    pub fn positives(&self) -> usize {
        usize::from(self.rule) + usize::from(self.learned) + usize::from(self.llm)
    }

    /// All eight triples, in (rule, learned, llm) binary order.
    pub fn all() -> impl Iterator<Item = VerdictTriple> {
        (0u8..8).map(|b| VerdictTriple::new(b & 4 != 0, b & 2 != 0, b & 1 != 0))
    }
}

/// How the three verdicts combine into a gate decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VotePolicy {
    /// Gate disabled: every segment passes.
    None,
    Single(Classifier),
    /// At least `k` of three, `k` ∈ {1, 2}.
    AtLeast(u8),
    All,
}

impl VotePolicy {
    /// The seven policies in ablation-table column order.
    pub const ABLATION: [VotePolicy; 7] = [
        VotePolicy::None,
        VotePolicy::Single(Classifier::Rule),
        VotePolicy::Single(Classifier::Learned),
        VotePolicy::Single(Classifier::Llm),
        VotePolicy::AtLeast(1),
        VotePolicy::AtLeast(2),
        VotePolicy::All,
    ];

    pub fn at_least(k: u8) -> Result<Self> {
        match k {
            1 | 2 => Ok(VotePolicy::AtLeast(k)),
            3 => Ok(VotePolicy::All),
            _ => Err(Error::Config(format!("at_least({k}) is not a valid vote policy"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            VotePolicy::None => "without",
            VotePolicy::Single(Classifier::Rule) => "rule",
            VotePolicy::Single(Classifier::Learned) => "learned",
            VotePolicy::Single(Classifier::Llm) => "llm",
            VotePolicy::AtLeast(1) => "one+",
            VotePolicy::AtLeast(_) => "two+",
            VotePolicy::All => "three",
        }
    }
}

impl fmt::Display for VotePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for VotePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_lowercase();
        Ok(match compact.as_str() {
            "none" | "without" => VotePolicy::None,
            "rule" | "single(rule)" => VotePolicy::Single(Classifier::Rule),
            "learned" | "bert" | "single(learned)" => VotePolicy::Single(Classifier::Learned),
            "llm" | "single(llm)" => VotePolicy::Single(Classifier::Llm),
            "one+" | "at_least(1)" => VotePolicy::AtLeast(1),
            "two+" | "at_least(2)" => VotePolicy::AtLeast(2),
            "all" | "three" | "at_least(3)" => VotePolicy::All,
            _ => return Err(Error::Config(format!("unknown vote policy {s:?}"))),
        })
    }
}

impl Serialize for VotePolicy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for VotePolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn vote(triple: &VerdictTriple, policy: VotePolicy) -> bool {
    match policy {
        VotePolicy::None => true,
        VotePolicy::Single(c) => triple.get(c),
        VotePolicy::AtLeast(k) => triple.positives() >= usize::from(k),
        VotePolicy::All => triple.rule && triple.learned && triple.llm,
    }
}

/// Counts of segments per (rule, learned, llm) verdict combination.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AgreementTable {
    counts: [[[usize; 2]; 2]; 2],
}

impl AgreementTable {
    pub fn get(&self, rule: bool, learned: bool, llm: bool) -> usize {
        self.counts[usize::from(rule)][usize::from(learned)][usize::from(llm)]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().flatten().sum()
    }

    /// Rows are (rule, learned); columns are llm NO / YES.
    pub fn render(&self) -> String {
        let yn = |b: bool| if b { "YES" } else { "NO" };
        let mut out = format!("{:<6}{:<9}{:>9}{:>10}\n", "Rule", "Learned", "LLM: NO", "LLM: YES");
        for rule in [false, true] {
            for learned in [false, true] {
                let rule_label = if learned { "" } else { yn(rule) };
                out.push_str(&format!(
                    "{:<6}{:<9}{:>9}{:>10}\n",
                    rule_label,
                    yn(learned),
                    self.get(rule, learned, false),
                    self.get(rule, learned, true)
                ));
            }
        }
        out.push_str(&format!("total: {}\n", self.total()));
        out
    }
}

pub fn agreement_table<'a>(verdicts: impl IntoIterator<Item = &'a VerdictTriple>) -> AgreementTable {
    let mut table = AgreementTable::default();
    for v in verdicts {
        table.counts[usize::from(v.rule)][usize::from(v.learned)][usize::from(v.llm)] += 1;
    }
    table
}

/// One line of the gate stage artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateRecord {
    pub id: String,
    pub rule: bool,
    pub learned: bool,
    pub llm: bool,
    #[serde(default)]
    pub gated_in: bool,
}

impl GateRecord {
    pub fn triple(&self) -> VerdictTriple {
        VerdictTriple::new(self.rule, self.learned, self.llm)
    }
}

/// Reads a verdict-triple file (gate artifact format; `gated_in` optional,
/// a leading stage header line is skipped). Ids must be unique.
pub fn load_gate_records(path: &Path) -> Result<Vec<GateRecord>> {
    let lines: Vec<(usize, serde_json::Value)> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(lines.len());
    for (line, value) in lines {
        if value.get("stage").is_some() && value.get("id").is_none() {
            continue;
        }
        let record: GateRecord = serde_json::from_value(value).map_err(|e| Error::parse(path, line, e))?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ScriptEntry, ScriptedMock};
    use crate::model::EventMention;
    use std::sync::Arc;

    fn seg(text: &str) -> Segment {
        Segment::new("s", text)
    }

    fn labeled(triggers: &[&str]) -> LabeledSegment {
        LabeledSegment {
            segment: Segment::new("x", ""),
            gold_events: triggers.iter().map(|t| EventMention::new(*t, "Attack")).collect(),
        }
    }

    #[test]
    fn lexicon_dedups_under_normalization() {
        let lex = build_lexicon(&[labeled(&["election", "Election"]), labeled(&["war", " shot   down "])]);
        let entries: Vec<_> = lex.entries().iter().map(String::as_str).collect();
        assert_eq!(entries, ["election", "shot down", "war"]);
        assert!(build_lexicon(&[]).is_empty());
    }

    #[test]
    fn rule_matches_whole_tokens_only() {
        let lex = TriggerLexicon::from_entries(["election", "war", "shot down"]);
        assert!(rule_classify(&seg("the election was held"), &lex));
        assert!(rule_classify(&seg("The ELECTION, finally."), &lex));
        assert!(!rule_classify(&seg("electioneering continues"), &lex));
        assert!(!rule_classify(&seg("the warden spoke"), &lex));
        assert!(!rule_classify(&seg(""), &lex));
        assert!(rule_classify(&seg("the jet was shot  down today"), &lex));
        assert!(!rule_classify(&seg("he was shot"), &lex));
        assert!(!rule_classify(&seg("down he was shot"), &lex));
    }

    /// Oracle: split on the same token boundaries and search sub-sequences naively.
    fn naive_contains(text: &str, phrase: &str) -> bool {
        let t: Vec<String> = normalize(text).split(|c: char| !c.is_alphanumeric()).filter(|s| !s.is_empty()).map(String::from).collect();
        let p: Vec<String> = normalize(phrase).split(|c: char| !c.is_alphanumeric()).filter(|s| !s.is_empty()).map(String::from).collect();
        !p.is_empty() && t.windows(p.len()).any(|w| w == p.as_slice())
    }

    proptest::proptest! {
        #[test]
        fn rule_agrees_with_naive_window_search(
            text in proptest::collection::vec(proptest::sample::select(vec!["war", "warden", "shot", "down", "x", ",", " "]), 0..12),
            phrases in proptest::collection::vec(proptest::sample::select(vec!["war", "shot down", "down", "warden x"]), 0..3),
        ) {
            let text = text.join(" ");
            let lex = TriggerLexicon::from_entries(&phrases);
            let expected = phrases.iter().any(|p| naive_contains(&text, p));
            proptest::prop_assert_eq!(lex.matches(&text), expected);
            proptest::prop_assert_eq!(lex.matches(&text), lex.matches(&text));
        }
    }

    #[test]
    fn verdict_file_lookups_and_threshold() {
        let f = VerdictFile::from_presence([("t1".to_string(), true)]);
        assert!(learned_classify(&Segment::new("t1", ""), &f).unwrap());
        let err = learned_classify(&Segment::new("t9", ""), &f).unwrap_err();
        assert!(err.to_string().contains("t9"));

        let p = VerdictFile::from_probabilities([("a".to_string(), 0.49), ("b".to_string(), 0.5)], 0.5);
        assert!(!learned_classify(&Segment::new("a", ""), &p).unwrap());
        assert!(learned_classify(&Segment::new("b", ""), &p).unwrap());
    }

    #[test]
    fn verdict_file_parses_both_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"present\":false}\n{\"id\":\"b\",\"p\":0.7}\n").unwrap();
        let f = VerdictFile::load(&path, 0.5).unwrap();
        assert!(!f.classify(&Segment::new("a", "")).unwrap());
        assert!(f.classify(&Segment::new("b", "")).unwrap());
        std::fs::write(&path, "{\"id\":\"a\",\"present\":false}\n{\"id\":\"a\",\"p\":0.7}\n").unwrap();
        assert!(matches!(VerdictFile::load(&path, 0.5), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn remote_scorer_thresholds_probability() {
        let (url, log) = crate::http::testing::serve(vec![(200, r#"{"p":0.49}"#.into()), (200, r#"{"p":0.5}"#.into())]);
        let s = RemoteScorer::new(Endpoint::new(url), 0.5);
        assert!(!s.classify(&Segment::new("a", "hi")).unwrap());
        assert!(s.classify(&Segment::new("a", "hi")).unwrap());
        assert_eq!(s.calls(), 2);
        assert_eq!(log.lock().unwrap()[0].body, r#"{"id":"a","text":"hi"}"#);
    }

    #[test]
    fn yes_no_parsing() {
        assert_eq!(parse_yes_no("YES"), Some(true));
        assert_eq!(parse_yes_no("no, there is no event."), Some(false));
        assert_eq!(parse_yes_no("  **Yes**"), Some(true));
        assert_eq!(parse_yes_no("maybe"), None);
        assert_eq!(parse_yes_no(""), None);
    }

    fn client(entries: &[(&str, &[&str])]) -> LlmClient {
        let map = entries
            .iter()
            .map(|(k, v)| (k.to_string(), ScriptEntry::Sequence(v.iter().map(|s| s.to_string()).collect())))
            .collect();
        LlmClient::new(Arc::new(ScriptedMock::new("m", map)))
    }

    #[test]
    fn llm_classify_reasks_once() {
        let (p, o) = (Prompts::builtin(), Ontology::shipped());
        let c = client(&[("s/presence", &["maybe", "NO"])]);
        let v = llm_classify(&seg("x"), &c, &p, &o, false).unwrap();
        assert_eq!((v.present, v.attempts, v.defaulted), (false, 2, false));

        let c = client(&[("s/presence", &["YES"])]);
        assert!(llm_classify(&seg("x"), &c, &p, &o, false).unwrap().present);

        let c = client(&[("s/presence", &["hmm", "unsure"])]);
        assert!(matches!(llm_classify(&seg("x"), &c, &p, &o, false), Err(Error::Verdict { .. })));
        let c = client(&[("s/presence", &["hmm", "unsure"])]);
        let v = llm_classify(&seg("x"), &c, &p, &o, true).unwrap();
        assert!(!v.present && v.defaulted);
    }

    #[test]
    fn vote_truth_table() {
        for t in VerdictTriple::all() {
            assert!(vote(&t, VotePolicy::None));
            assert_eq!(vote(&t, VotePolicy::AtLeast(1)), t != VerdictTriple::default());
            assert_eq!(vote(&t, VotePolicy::All), t.positives() == 3);
            assert_eq!(vote(&t, VotePolicy::Single(Classifier::Learned)), t.learned);
        }
        assert!(!vote(&VerdictTriple::new(true, false, false), VotePolicy::AtLeast(2)));
        assert!(vote(&VerdictTriple::new(true, true, true), VotePolicy::All));
    }

    #[test]
    fn policy_parsing_and_bounds() {
        for p in VotePolicy::ABLATION {
            assert_eq!(p.label().parse::<VotePolicy>().unwrap(), p);
        }
        assert_eq!("at_least(2)".parse::<VotePolicy>().unwrap(), VotePolicy::AtLeast(2));
        assert_eq!("all".parse::<VotePolicy>().unwrap(), VotePolicy::All);
        assert_eq!(VotePolicy::at_least(3).unwrap(), VotePolicy::All);
        assert!(VotePolicy::at_least(0).is_err());
        assert!("sometimes".parse::<VotePolicy>().is_err());
    }

    #[test]
    fn agreement_table_counts() {
        assert_eq!(agreement_table(&[]).total(), 0);
        let v = [VerdictTriple::new(true, true, true), VerdictTriple::new(true, true, true), VerdictTriple::default()];
        let t = agreement_table(&v);
        assert_eq!((t.get(true, true, true), t.get(false, false, false), t.total()), (2, 1, 3));
        let rendered = t.render();
        assert!(rendered.contains("total: 3"));
    }

    #[test]
    fn gate_records_skip_header_and_reject_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.jsonl");
        std::fs::write(
            &path,
            "{\"stage\":\"gate\",\"config_hash\":\"x\"}\n{\"id\":\"a\",\"rule\":true,\"learned\":false,\"llm\":true}\n",
        )
        .unwrap();
        let r = load_gate_records(&path).unwrap();
        assert_eq!(r[0].triple(), VerdictTriple::new(true, false, true));
        std::fs::write(&path, "{\"id\":\"a\",\"rule\":true,\"learned\":false,\"llm\":true}\n{\"id\":\"a\",\"rule\":true,\"learned\":false,\"llm\":true}\n").unwrap();
        assert!(matches!(load_gate_records(&path), Err(Error::DuplicateId(_))));
        std::fs::write(&path, "{\"id\":\"a\",\"rule\":1}\n").unwrap();
        assert!(matches!(load_gate_records(&path), Err(Error::Parse { line: 1, .. })));
    }
}
