//! Prompt templates and their assembly into chat message bundles.
//!
//! A template file is a JSON array of `{"role": "system"|"user", "content": ..}`
//! objects. Inside `content`, a placeholder is `{NAME}` where `NAME` matches
//! `[A-Z][A-Z0-9_]*`. Any other brace is literal text, so JSON snippets can be
//! written into a template verbatim. Substitution is a single pass: text
//! inserted for a placeholder is never scanned again.
//!
//! Recognised placeholders per stage:
//!
//! | stage    | placeholders                                  |
//! |----------|-----------------------------------------------|
//! | presence | `TEXT`, `EVENT_TYPES`                         |
//! | trigger  | `TEXT`, `EVENT_TYPES`, `EXAMPLES`             |
//! | argument | `TEXT`, `EVENT_TYPES`, `SCHEMA`, `EXAMPLES`   |
//! | format   | `TEXT`                                        |

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EventMention, Ontology, Segment};
use crate::retrieval::FewShotExample;

pub const NO_EXAMPLES: &str = "No examples are available for this text.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMessage {
    pub role: Role,
    pub content: String,
}

impl PromptMessage {
    pub fn user(content: impl Into<String>) -> Self {
        PromptMessage {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Presence,
    Trigger,
    Argument,
    Format,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Presence, Stage::Trigger, Stage::Argument, Stage::Format];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Presence => "presence",
            Stage::Trigger => "trigger",
            Stage::Argument => "argument",
            Stage::Format => "format",
        }
    }

    fn placeholders(self) -> &'static [&'static str] {
        match self {
            Stage::Presence => &["TEXT", "EVENT_TYPES"],
            Stage::Trigger => &["TEXT", "EVENT_TYPES", "EXAMPLES"],
            Stage::Argument => &["TEXT", "EVENT_TYPES", "SCHEMA", "EXAMPLES"],
            Stage::Format => &["TEXT"],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An ordered message list addressed to one stage for one segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub segment_id: String,
    pub stage: Stage,
    messages: Vec<PromptMessage>,
}

impl PromptBundle {
    /// Requires exactly one system message, in first position, and no empty content.
    pub fn new(segment_id: impl Into<String>, stage: Stage, messages: Vec<PromptMessage>) -> Result<Self> {
        let systems = messages.iter().filter(|m| m.role == Role::System).count();
        if systems != 1 || messages.first().map(|m| m.role) != Some(Role::System) {
            return Err(Error::Template {
                name: stage.to_string(),
                message: "a bundle needs exactly one system message, placed first".into(),
            });
        }
        if messages.iter().any(|m| m.content.is_empty()) {
            return Err(Error::Template {
                name: stage.to_string(),
                message: "message content is empty".into(),
            });
        }
        Ok(PromptBundle {
            segment_id: segment_id.into(),
            stage,
            messages,
        })
    }

    pub fn messages(&self) -> &[PromptMessage] {
        &self.messages
    }

    /// A copy of this bundle with one extra user message at the end.
    pub fn with_appended(&self, content: impl Into<String>) -> PromptBundle {
        let mut messages = self.messages.clone();
        let content = content.into();
        if !content.is_empty() {
            messages.push(PromptMessage::user(content));
        }
        PromptBundle {
            segment_id: self.segment_id.clone(),
            stage: self.stage,
            messages,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Literal(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq)]
struct MessageTemplate {
    role: Role,
    pieces: Vec<Piece>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    stage: Stage,
    messages: Vec<MessageTemplate>,
}

fn split_placeholders(content: &str) -> Vec<Piece> {
    let mut pieces = Vec::new();
    let mut literal = String::new();
    let bytes = content.as_bytes();
    let mut i = 0;
    while i < content.len() {
        if bytes[i] == b'{' {
            let rest = &content[i + 1..];
            let name_len = rest
                .char_indices()
                .take_while(|&(j, c)| {
                    if j == 0 {
                        c.is_ascii_uppercase()
                    } else {
                        c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_'
                    }
                })
                .count();
            if name_len > 0 && rest[name_len..].starts_with('}') {
                if !literal.is_empty() {
                    pieces.push(Piece::Literal(std::mem::take(&mut literal)));
                }
                pieces.push(Piece::Slot(rest[..name_len].to_string()));
                i += name_len + 2;
                continue;
            }
        }
        let ch = content[i..].chars().next().expect("in bounds");
        literal.push(ch);
        i += ch.len_utf8();
    }
    if !literal.is_empty() {
        pieces.push(Piece::Literal(literal));
    }
    pieces
}

impl Template {
    pub fn parse(stage: Stage, json: &str) -> Result<Self> {
        let raw: Vec<PromptMessage> = serde_json::from_str(json).map_err(|e| Error::Template {
            name: stage.to_string(),
            message: e.to_string(),
        })?;
        let allowed = stage.placeholders();
        let mut messages = Vec::with_capacity(raw.len());
        for m in raw {
            let pieces = split_placeholders(&m.content);
            for piece in &pieces {
                if let Piece::Slot(name) = piece {
                    if !allowed.contains(&name.as_str()) {
                        return Err(Error::Template {
                            name: stage.to_string(),
                            message: format!("unknown placeholder {{{name}}}"),
                        });
                    }
                }
            }
            messages.push(MessageTemplate { role: m.role, pieces });
        }
        let template = Template { stage, messages };
        // Reject structurally invalid templates at load time.
        let dummy: HashMap<&str, String> = allowed.iter().map(|k| (*k, "x".to_string())).collect();
        PromptBundle::new("", stage, template.render_messages(&dummy)?)?;
        Ok(template)
    }

    fn render_messages(&self, values: &HashMap<&str, String>) -> Result<Vec<PromptMessage>> {
        self.messages
            .iter()
            .map(|m| {
                let mut content = String::new();
                for piece in &m.pieces {
                    match piece {
                        Piece::Literal(s) => content.push_str(s),
                        Piece::Slot(name) => match values.get(name.as_str()) {
                            Some(v) => content.push_str(v),
                            None => {
                                return Err(Error::Template {
                                    name: self.stage.to_string(),
                                    message: format!("no value for {{{name}}}"),
                                })
                            }
                        },
                    }
                }
                Ok(PromptMessage { role: m.role, content })
            })
            .collect()
    }

    pub fn render(&self, segment_id: &str, values: &HashMap<&str, String>) -> Result<PromptBundle> {
        PromptBundle::new(segment_id, self.stage, self.render_messages(values)?)
    }
}

/// The four stage templates.
#[derive(Debug, Clone)]
pub struct Prompts {
    presence: Template,
    trigger: Template,
    argument: Template,
    format: Template,
}

fn builtin_source(stage: Stage) -> &'static str {
    match stage {
        Stage::Presence => include_str!("../templates/presence.json"),
        Stage::Trigger => include_str!("../templates/trigger.json"),
        Stage::Argument => include_str!("../templates/argument.json"),
        Stage::Format => include_str!("../templates/format.json"),
    }
}

impl Default for Prompts {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Prompts {
    pub fn builtin() -> Self {
        let load = |s| Template::parse(s, builtin_source(s)).expect("bundled template is valid");
        Prompts {
            presence: load(Stage::Presence),
            trigger: load(Stage::Trigger),
            argument: load(Stage::Argument),
            format: load(Stage::Format),
        }
    }

    /// Loads `<stage>.json` from `dir` for each stage; missing files fall back to the bundled template.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let load = |stage: Stage| -> Result<Template> {
            let path = dir.join(format!("{stage}.json"));
            if path.exists() {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                Template::parse(stage, &text)
            } else {
                Template::parse(stage, builtin_source(stage))
            }
        };
        Ok(Prompts {
            presence: load(Stage::Presence)?,
            trigger: load(Stage::Trigger)?,
            argument: load(Stage::Argument)?,
            format: load(Stage::Format)?,
        })
    }

    pub fn build_presence_prompt(&self, segment: &Segment, ontology: &Ontology) -> Result<PromptBundle> {
        let values = HashMap::from([
            ("TEXT", segment.text.clone()),
            ("EVENT_TYPES", event_type_list(ontology)),
        ]);
        self.presence.render(&segment.id, &values)
    }

    pub fn build_trigger_prompt(
        &self,
        segment: &Segment,
        examples: &[&FewShotExample],
        ontology: &Ontology,
    ) -> Result<PromptBundle> {
        let values = HashMap::from([
            ("TEXT", segment.text.clone()),
            ("EVENT_TYPES", event_type_list(ontology)),
            ("EXAMPLES", render_examples(examples, false)),
        ]);
        self.trigger.render(&segment.id, &values)
    }

    /// `predicted` holds `(trigger, event_type)` pairs from the trigger stage.
    pub fn build_argument_prompt(
        &self,
        segment: &Segment,
        predicted: &[(String, String)],
        examples: &[&FewShotExample],
        ontology: &Ontology,
    ) -> Result<PromptBundle> {
        if predicted.is_empty() {
            return Err(Error::Contract("argument prompt needs at least one trigger".into()));
        }
        let mut schema = BTreeMap::new();
        for (_, ty) in predicted {
            let roles = ontology
                .roles_for(ty)
                .ok_or_else(|| Error::validation(&segment.id, format!("unknown event type {ty:?}")))?;
            schema.insert(ty.as_str(), roles);
        }
        let types = predicted
            .iter()
            .map(|(trigger, ty)| format!("{ty} (trigger: {trigger})"))
            .collect::<Vec<_>>()
            .join(", ");
        let values = HashMap::from([
            ("TEXT", segment.text.clone()),
            ("EVENT_TYPES", types),
            ("SCHEMA", serde_json::to_string(&schema).expect("serializable")),
            ("EXAMPLES", render_examples(examples, true)),
        ]);
        self.argument.render(&segment.id, &values)
    }

    pub fn build_format_prompt(&self, segment_id: &str, raw_output: &str) -> Result<PromptBundle> {
        if raw_output.is_empty() {
            return Err(Error::Contract("format prompt needs a nonempty raw output".into()));
        }
        let values = HashMap::from([("TEXT", raw_output.to_string())]);
        self.format.render(segment_id, &values)
    }
}

fn event_type_list(ontology: &Ontology) -> String {
    ontology.event_types().collect::<Vec<_>>().join(", ")
}

#[derive(Serialize)]
struct TriggerOnly<'a> {
    trigger: &'a str,
    #[serde(rename = "type")]
    event_type: &'a str,
}

#[derive(Serialize)]
#[serde(untagged)]
enum RenderedEvent<'a> {
    Full(&'a EventMention),
    TriggerOnly(TriggerOnly<'a>),
}

#[derive(Serialize)]
struct RenderedExample<'a> {
    text: &'a str,
    event: Vec<RenderedEvent<'a>>,
}

/// One compact JSON record per line, in retrieval order.
pub fn render_examples(examples: &[&FewShotExample], with_arguments: bool) -> String {
    if examples.is_empty() {
        return NO_EXAMPLES.to_string();
    }
    examples
        .iter()
        .map(|ex| {
            let event = ex
                .gold_events
                .iter()
                .map(|e| {
                    if with_arguments {
                        RenderedEvent::Full(e)
                    } else {
                        RenderedEvent::TriggerOnly(TriggerOnly {
                            trigger: &e.trigger,
                            event_type: &e.event_type,
                        })
                    }
                })
                .collect();
            serde_json::to_string(&RenderedExample { text: &ex.text, event }).expect("serializable")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::Split;

    fn example(id: &str, text: &str, events: Vec<EventMention>) -> FewShotExample {
        FewShotExample {
            example_id: id.into(),
            text: text.into(),
            gold_events: events,
            split: Split::Train,
        }
    }

    #[test]
    fn placeholder_grammar() {
        assert_eq!(
            split_placeholders("a {TEXT} b {\"x\": 1} {lower} {A_1}"),
            vec![
                Piece::Literal("a ".into()),
                Piece::Slot("TEXT".into()),
                Piece::Literal(" b {\"x\": 1} {lower} ".into()),
                Piece::Slot("A_1".into()),
            ]
        );
        assert_eq!(split_placeholders("{"), vec![Piece::Literal("{".into())]);
        assert_eq!(split_placeholders("é{TEXT"), vec![Piece::Literal("é{TEXT".into())]);
    }

    #[test]
    fn unknown_placeholder_rejected() {
        let err = Template::parse(Stage::Format, r#"[{"role":"system","content":"{SCHEMA}"}]"#).unwrap_err();
        assert!(err.to_string().contains("SCHEMA"));
    }

    #[test]
    fn template_needs_leading_system_message() {
        assert!(Template::parse(Stage::Format, r#"[{"role":"user","content":"{TEXT}"}]"#).is_err());
        assert!(Template::parse(
            Stage::Format,
            r#"[{"role":"system","content":"a"},{"role":"system","content":"b"}]"#
        )
        .is_err());
    }

    #[test]
    fn substitution_is_single_pass() {
        let t = Template::parse(Stage::Format, r#"[{"role":"system","content":"s"},{"role":"user","content":"TEXT: {TEXT}"}]"#)
            .unwrap();
        let b = t.render("s1", &HashMap::from([("TEXT", "{TEXT}".to_string())])).unwrap();
        assert_eq!(b.messages()[1].content, "TEXT: {TEXT}");
    }

    #[test]
    fn trigger_prompt_structure() {
        let prompts = Prompts::builtin();
        let ontology = Ontology::shipped();
        let seg = Segment::new("s1", "the election was held");
        let ex = example("train-6", "the man won the election", vec![EventMention::new("election", "Elect")]);
        let b = prompts.build_trigger_prompt(&seg, &[&ex], &ontology).unwrap();
        let m = b.messages();
        assert_eq!(m.len(), 4);
        assert_eq!(m[0].role, Role::System);
        assert!(m[0].content.starts_with("Your job is to extract trigger words"));
        assert!(m[1].content.contains("It is possible there are no events"));
        let list = m[1].content.split("The possible event types are: [").nth(1).unwrap();
        let list = &list[..list.find(']').unwrap()];
        assert_eq!(list.split(", ").count(), 33);
        assert_eq!(m[2].content, "TEXT: the election was held");
        assert_eq!(
            m[3].content,
            r#"EXAMPLES: {"text":"the man won the election","event":[{"trigger":"election","type":"Elect"}]}"#
        );
    }

    #[test]
    fn trigger_prompt_without_examples() {
        let b = Prompts::builtin()
            .build_trigger_prompt(&Segment::new("s", "x"), &[], &Ontology::shipped())
            .unwrap();
        assert_eq!(b.messages()[3].content, format!("EXAMPLES: {NO_EXAMPLES}"));
    }

    #[test]
    fn examples_keep_retrieval_order() {
        let a = example("a", "first", vec![]);
        let b = example("b", "second", vec![]);
        let rendered = render_examples(&[&b, &a], false);
        assert!(rendered.find("second").unwrap() < rendered.find("first").unwrap());
    }

    #[test]
    fn argument_prompt_projects_schema() {
        let prompts = Prompts::builtin();
        let ontology = Ontology::shipped();
        let seg = Segment::new("s1", "the man was elected before the war");
        let b = prompts
            .build_argument_prompt(
                &seg,
                &[("elected".into(), "Elect".into()), ("war".into(), "Attack".into())],
                &[],
                &ontology,
            )
            .unwrap();
        let m = b.messages();
        assert_eq!(
            m[0].content,
            "Your job is to extract arguments for events in a text, and classify their role in that event."
        );
        assert!(m[1].content.contains(r#""Elect":["Person","Entity","Place"]"#));
        assert!(m[1].content.contains(r#""Attack":["Attacker","Target","Instrument","Place"]"#));
        assert!(m[2].content.contains("EVENT TYPE(s): Elect (trigger: elected), Attack (trigger: war)"));
    }

    #[test]
    fn argument_prompt_rejects_unknown_type() {
        let err = Prompts::builtin()
            .build_argument_prompt(&Segment::new("s", "x"), &[("x".into(), "Nope".into())], &[], &Ontology::shipped())
            .unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    #[test]
    fn format_prompt_structure() {
        let b = Prompts::builtin().build_format_prompt("s", "x").unwrap();
        let m = b.messages();
        assert!(m[0].content.contains("Only return the JSON"));
        assert_eq!(m[2].content, "TEXT: x");
        assert!(m[3].content.contains(r#""trigger": "deploy""#));
        assert!(m[3].content.contains(r#""type": "Transport""#));
        assert!(Prompts::builtin().build_format_prompt("s", "").is_err());
    }

    #[test]
    fn assembly_is_deterministic() {
        let prompts = Prompts::builtin();
        let ontology = Ontology::shipped();
        let seg = Segment::new("s", "troops moved");
        let a = prompts.build_trigger_prompt(&seg, &[], &ontology).unwrap();
        let b = prompts.build_trigger_prompt(&seg, &[], &ontology).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_dir_overrides_one_stage() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("format.json"),
            r#"[{"role":"system","content":"custom"},{"role":"user","content":"{TEXT}"}]"#,
        )
        .unwrap();
        let p = Prompts::load_dir(dir.path()).unwrap();
        assert_eq!(p.build_format_prompt("s", "abc").unwrap().messages()[0].content, "custom");
        assert!(p
            .build_trigger_prompt(&Segment::new("s", "x"), &[], &Ontology::shipped())
            .unwrap()
            .messages()[0]
            .content
            .starts_with("Your job is to extract trigger words"));
    }
}
