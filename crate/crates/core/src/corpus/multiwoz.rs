//! Importer for MultiWOZ-style `data.json` dumps.
//!
//! Accepted layouts: an object mapping dialogue id to `{"log": [...]}` (the
//! MultiWOZ 2.x release format) or an array of dialogues carrying a
//! `dialogue_id`/`dialogue_idx` field. Turn speakers come from an explicit
//! `speaker`/`role` field when present, otherwise from log parity. The state
//! after a user turn is read from the user turn's own `metadata`, falling back
//! to the following system turn (where MultiWOZ stores it).

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use indexmap::IndexMap;
use serde::Deserialize;
use serde_json::Value;

use super::{
    accumulate_turns, normalize_text, normalize_value, CorpusError, Dialogue, DialogueState, Schema, Speaker,
    Split, TurnSample, TurnState, Utterance,
};

/// Values the dataset uses for "no value yet".
const UNFILLED: [&str; 3] = ["", "not mentioned", "none"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueError {
    pub dialogue_id: String,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct ImportReport {
    pub dialogues: Vec<Dialogue>,
    /// Dialogues that were skipped, with the reason.
    pub errors: Vec<DialogueError>,
    /// Domains carrying values that the schema does not know.
    pub unknown_domains: BTreeSet<String>,
    /// `domain.key` pairs carrying values that the schema does not know.
    pub unknown_slots: BTreeSet<String>,
    pub warnings: Vec<String>,
}

impl ImportReport {
    pub fn user_turns(&self) -> usize {
        self.dialogues.iter().map(|d| d.gold_states.len()).sum()
    }
}

#[derive(Debug, Deserialize)]
struct RawTurn {
    #[serde(default)]
    text: String,
    #[serde(default)]
    metadata: Value,
    #[serde(default, alias = "role")]
    speaker: Option<String>,
    #[serde(default)]
    domains: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
struct RawDialogue {
    log: Vec<RawTurn>,
}

pub fn import_multiwoz(path: impl AsRef<Path>, schema: &Schema) -> Result<ImportReport, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    import_multiwoz_str(&text, schema)
}

pub fn import_multiwoz_str(text: &str, schema: &Schema) -> Result<ImportReport, CorpusError> {
    let top: Value = serde_json::from_str(text).map_err(|e| CorpusError::Dataset(e.to_string()))?;
    let entries: Vec<(String, Value)> = match top {
        Value::Object(_) => {
            // IndexMap keeps file order
            let map: IndexMap<String, Value> = serde_json::from_str(text)
                .map_err(|e| CorpusError::Dataset(e.to_string()))?;
            map.into_iter().collect()
        }
        Value::Array(items) => items
            .into_iter()
            .enumerate()
            .map(|(i, item)| {
                let id = ["dialogue_id", "dialogue_idx"]
                    .iter()
                    .find_map(|k| item.get(*k))
                    .map(|v| match v {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .unwrap_or_else(|| format!("#{i}"));
                (id, item)
            })
            .collect(),
        _ => {
            return Err(CorpusError::Dataset(
                "expected an object or array of dialogues".into(),
            ))
        }
    };

    let mut report = ImportReport::default();
    for (dialogue_id, value) in entries {
        let raw: RawDialogue = match serde_json::from_value(value) {
            Ok(raw) => raw,
            Err(e) => {
                report.errors.push(DialogueError { dialogue_id, message: e.to_string() });
                continue;
            }
        };
        match convert_dialogue(&dialogue_id, raw, schema, &mut report) {
            Ok(dialogue) => report.dialogues.push(dialogue),
            Err(message) => report.errors.push(DialogueError { dialogue_id, message }),
        }
    }
    for err in &report.errors {
        log::warn!("skipped dialogue {}: {}", err.dialogue_id, err.message);
    }
    Ok(report)
}

struct PendingUtterance {
    speaker: Speaker,
    text: String,
    metadata: Option<Value>,
    domains: Option<Vec<String>>,
}

fn parse_speaker(label: &str) -> Option<Speaker> {
    match label.to_ascii_lowercase().as_str() {
        "user" | "usr" | "customer" => Some(Speaker::User),
        "system" | "sys" | "agent" | "assistant" => Some(Speaker::Agent),
        _ => None,
    }
}

fn convert_dialogue(
    dialogue_id: &str,
    raw: RawDialogue,
    schema: &Schema,
    report: &mut ImportReport,
) -> Result<Dialogue, String> {
    let mut pending: Vec<PendingUtterance> = Vec::new();
    for (i, turn) in raw.log.into_iter().enumerate() {
        let speaker = match turn.speaker.as_deref() {
            Some(label) => parse_speaker(label)
                .ok_or_else(|| format!("turn {i}: unknown speaker '{label}'"))?,
            None if i % 2 == 0 => Speaker::User,
            None => Speaker::Agent,
        };
        let text = normalize_text(&turn.text);
        let metadata = match turn.metadata {
            Value::Object(ref m) if !m.is_empty() => Some(turn.metadata),
            _ => None,
        };
        if text.is_empty() {
            report.warnings.push(format!("{dialogue_id}: turn {i} has empty text, skipped"));
            if let (Some(meta), Some(prev)) = (metadata, pending.last_mut()) {
                prev.metadata = Some(meta);
            }
            continue;
        }
        match pending.last_mut() {
            Some(prev) if prev.speaker == speaker => {
                report
                    .warnings
                    .push(format!("{dialogue_id}: merged consecutive {speaker:?} utterances at turn {i}"));
                prev.text.push(' ');
                prev.text.push_str(&text);
                if metadata.is_some() {
                    prev.metadata = metadata;
                }
                if turn.domains.is_some() {
                    prev.domains = turn.domains;
                }
            }
            _ => pending.push(PendingUtterance { speaker, text, metadata, domains: turn.domains }),
        }
    }

    while pending.first().is_some_and(|u| u.speaker == Speaker::Agent) {
        report.warnings.push(format!("{dialogue_id}: dropped leading agent utterance"));
        pending.remove(0);
    }

    let mut utterances = Vec::new();
    let mut raw_states = Vec::new();
    for (pos, utt) in pending.iter().enumerate() {
        if utt.speaker == Speaker::Agent {
            // a trailing agent reply follows no scored user turn
            if pos + 1 < pending.len() {
                utterances.push(Utterance { speaker: Speaker::Agent, text: utt.text.clone() });
            }
            continue;
        }
        let metadata = utt
            .metadata
            .as_ref()
            .or_else(|| pending.get(pos + 1).and_then(|next| next.metadata.as_ref()))
            .ok_or_else(|| format!("missing state for user turn {}", raw_states.len()))?;
        let claimed = utt
            .domains
            .clone()
            .or_else(|| pending.get(pos + 1).and_then(|next| next.domains.clone()));
        raw_states.push((parse_metadata(dialogue_id, metadata, schema, report)?, claimed));
        utterances.push(Utterance { speaker: Speaker::User, text: utt.text.clone() });
    }

    // domains keep the order in which they first became active
    let mut domain_order: Vec<String> = Vec::new();
    let mut gold_states = Vec::with_capacity(raw_states.len());
    for (turn, (slots, claimed)) in raw_states.into_iter().enumerate() {
        let mut fresh: Vec<&String> =
            slots.keys().filter(|d| !domain_order.contains(d)).collect();
        fresh.sort_by_key(|d| schema.domain_rank(d));
        domain_order.extend(fresh.into_iter().cloned());

        let mut state = DialogueState::new();
        for domain in &domain_order {
            let Some(values) = slots.get(domain) else { continue };
            for key in schema.keys(domain).unwrap_or_default() {
                if let Some(value) = values.get(key) {
                    state.insert(domain, key, value);
                }
            }
        }
        let domains = state.active_domains();
        if let Some(claimed) = claimed {
            let mut a = claimed.clone();
            let mut b = domains.clone();
            a.sort();
            b.sort();
            if a != b {
                log::info!(
                    "{dialogue_id}: turn {turn} lists domains {claimed:?}, state has {domains:?}"
                );
                report.warnings.push(format!(
                    "{dialogue_id}: turn {turn} domain list {claimed:?} replaced by {domains:?}"
                ));
            }
        }
        gold_states.push(TurnState { domains, state });
    }

    let dialogue = Dialogue { dialogue_id: dialogue_id.to_string(), utterances, gold_states };
    dialogue.validate().map_err(|e| e.to_string())?;
    Ok(dialogue)
}

/// Extracts filled slots from one turn's metadata. Handles both the
/// `{"book": {...}, "semi": {...}}` layout and a flat `{key: value}` layout.
fn parse_metadata(
    dialogue_id: &str,
    metadata: &Value,
    schema: &Schema,
    report: &mut ImportReport,
) -> Result<IndexMap<String, IndexMap<String, String>>, String> {
    let Value::Object(domains) = metadata else {
        return Err("metadata is not an object".into());
    };
    let mut out: IndexMap<String, IndexMap<String, String>> = IndexMap::new();
    for (domain, body) in domains {
        let Value::Object(body) = body else {
            return Err(format!("metadata for domain '{domain}' is not an object"));
        };
        let sections: Vec<&serde_json::Map<String, Value>> =
            if body.contains_key("book") || body.contains_key("semi") {
                ["book", "semi"]
                    .iter()
                    .filter_map(|s| body.get(*s).and_then(Value::as_object))
                    .collect()
            } else {
                vec![body]
            };
        for section in sections {
            for (key, value) in section {
                if key == "booked" {
                    continue;
                }
                let Some(raw) = value.as_str() else { continue };
                let value = normalize_value(raw);
                if UNFILLED.contains(&value.as_str()) {
                    continue;
                }
                if !schema.has_domain(domain) {
                    report.unknown_domains.insert(domain.clone());
                    continue;
                }
                if !schema.has_key(domain, key) {
                    if report.unknown_slots.insert(format!("{domain}.{key}")) {
                        log::warn!("{dialogue_id}: slot {domain}.{key} is not in the schema");
                    }
                    continue;
                }
                out.entry(domain.clone()).or_default().insert(key.clone(), value);
            }
        }
    }
    Ok(out)
}

/// Dialogue ids of the dev and test splits, from the release's
/// `valListFile`/`testListFile` (one id per line). Everything else is train.
#[derive(Debug, Clone, Default)]
pub struct SplitLists {
    dev: HashSet<String>,
    test: HashSet<String>,
}

fn strip_json(id: &str) -> &str {
    id.strip_suffix(".json").unwrap_or(id)
}

impl SplitLists {
    pub fn new<'a>(dev: impl IntoIterator<Item = &'a str>, test: impl IntoIterator<Item = &'a str>) -> Self {
        let set = |ids: &mut dyn Iterator<Item = &'a str>| -> HashSet<String> {
            ids.map(|l| strip_json(l.trim()).to_string()).filter(|l| !l.is_empty()).collect()
        };
        Self { dev: set(&mut dev.into_iter()), test: set(&mut test.into_iter()) }
    }

    /// Reads `valListFile(.json|.txt)` and `testListFile(.json|.txt)` from `dir`.
    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let read = |stem: &str| -> Result<String, CorpusError> {
            for ext in [".json", ".txt", ""] {
                let path = dir.join(format!("{stem}{ext}"));
                if path.is_file() {
                    return std::fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e));
                }
            }
            Err(CorpusError::Dataset(format!("{stem} not found in {}", dir.display())))
        };
        let (dev, test) = (read("valListFile")?, read("testListFile")?);
        Ok(Self::new(dev.lines(), test.lines()))
    }

    pub fn split(&self, dialogue_id: &str) -> Split {
        let id = strip_json(dialogue_id);
        if self.test.contains(id) {
            Split::Test
        } else if self.dev.contains(id) {
            Split::Dev
        } else {
            Split::Train
        }
    }
}

/// Imports a MultiWOZ release directory (`data.json` plus split lists) into
/// accumulated turn samples of every split.
pub fn import_multiwoz_dir(dir: impl AsRef<Path>, schema: &Schema) -> Result<(ImportReport, Vec<TurnSample>), CorpusError> {
    let dir = dir.as_ref();
    let splits = SplitLists::load(dir)?;
    let report = import_multiwoz(dir.join("data.json"), schema)?;
    let samples = report
        .dialogues
        .iter()
        .flat_map(|d| accumulate_turns(d, splits.split(&d.dialogue_id)))
        .collect();
    Ok((report, samples))
}
