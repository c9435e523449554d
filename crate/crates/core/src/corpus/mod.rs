//! Dialogue corpus: normalized dialogues, accumulated turn samples and the
//! JSON-lines corpus file.
//!
//! A [`TurnSample`] is one user turn together with everything said before it
//! and the dialogue state after it. Samples are the unit of retrieval, prompting
//! and scoring.

mod multiwoz;
mod schema;

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use multiwoz::{import_multiwoz, import_multiwoz_dir, import_multiwoz_str, DialogueError, ImportReport, SplitLists};
pub use schema::Schema;

/// Explicit marker for a slot the user has not filled.
pub const NOT_MENTIONED: &str = "not mentioned";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("sample {sample_id}: {message}")]
    Sample { sample_id: String, message: String },
    #[error("dialogue {dialogue_id}: {message}")]
    Dialogue { dialogue_id: String, message: String },
    #[error("malformed dataset: {0}")]
    Dataset(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::User => "User:",
            Speaker::Agent => "Agent:",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

impl Utterance {
    pub fn user(text: impl Into<String>) -> Self {
        Self { speaker: Speaker::User, text: text.into() }
    }

    pub fn agent(text: impl Into<String>) -> Self {
        Self { speaker: Speaker::Agent, text: text.into() }
    }
}

/// Which utterances make up the rendered dialogue history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    UserOnly,
    UserAgent,
}

impl HistoryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HistoryMode::UserOnly => "user_only",
            HistoryMode::UserAgent => "user_agent",
        }
    }
}

impl fmt::Display for HistoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for HistoryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "user_only" | "u" | "U" => Ok(HistoryMode::UserOnly),
            "user_agent" | "ua" | "UA" => Ok(HistoryMode::UserAgent),
            other => Err(format!("unknown history mode '{other}' (user_only|user_agent)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "val" | "valid" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// Lowercase, collapse internal whitespace and trim.
pub fn normalize_value(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Collapse whitespace runs (including newlines) to single spaces.
pub fn normalize_text(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Domain → slot key → value. Insertion order of domains is the order in which
/// they were first mentioned; that order drives prompt rendering.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DialogueState {
    slots: IndexMap<String, IndexMap<String, String>>,
}

impl DialogueState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a slot value, normalizing it. Returns the previous value.
    pub fn insert(&mut self, domain: &str, key: &str, value: &str) -> Option<String> {
        self.slots
            .entry(domain.to_string())
            .or_default()
            .insert(key.to_string(), normalize_value(value))
    }

    pub fn get(&self, domain: &str, key: &str) -> Option<&str> {
        self.slots.get(domain)?.get(key).map(String::as_str)
    }

    pub fn domain(&self, domain: &str) -> Option<&IndexMap<String, String>> {
        self.slots.get(domain)
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.slots.iter().flat_map(|(d, kv)| {
            kv.iter().map(move |(k, v)| (d.as_str(), k.as_str(), v.as_str()))
        })
    }

    /// Slots whose value is not the absent marker.
    pub fn filled(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.iter().filter(|(_, _, v)| *v != NOT_MENTIONED)
    }

    /// Domains with at least one filled slot, in state order.
    pub fn active_domains(&self) -> Vec<String> {
        self.slots
            .iter()
            .filter(|(_, kv)| kv.values().any(|v| v != NOT_MENTIONED))
            .map(|(d, _)| d.clone())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.filled().next().is_none()
    }

    pub fn validate(&self, schema: &Schema) -> Result<(), String> {
        for (domain, kv) in &self.slots {
            if !schema.has_domain(domain) {
                return Err(format!("domain '{domain}' is not in the schema"));
            }
            for key in kv.keys() {
                if !schema.has_key(domain, key) {
                    return Err(format!("slot key '{domain}.{key}' is not in the schema"));
                }
            }
        }
        Ok(())
    }
}

/// Gold annotation attached to one user turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnState {
    pub domains: Vec<String>,
    pub state: DialogueState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub utterances: Vec<Utterance>,
    /// One entry per user utterance.
    pub gold_states: Vec<TurnState>,
}

impl Dialogue {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let err = |message: String| CorpusError::Dialogue {
            dialogue_id: self.dialogue_id.clone(),
            message,
        };
        check_alternation(&self.utterances).map_err(err)?;
        let users = self.user_turns();
        if users != self.gold_states.len() {
            return Err(err(format!(
                "{users} user utterances but {} gold states",
                self.gold_states.len()
            )));
        }
        Ok(())
    }

    pub fn user_turns(&self) -> usize {
        self.utterances.iter().filter(|u| u.speaker == Speaker::User).count()
    }
}

fn check_alternation(utterances: &[Utterance]) -> Result<(), String> {
    for (i, utt) in utterances.iter().enumerate() {
        let expected = if i % 2 == 0 { Speaker::User } else { Speaker::Agent };
        if utt.speaker != expected {
            return Err(format!("utterance {i} should be spoken by {expected:?}"));
        }
        if utt.text.trim().is_empty() {
            return Err(format!("utterance {i} is empty"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnSample {
    pub sample_id: String,
    pub split: Split,
    pub history: Vec<Utterance>,
    #[serde(rename = "domains")]
    pub gold_domains: Vec<String>,
    #[serde(rename = "state")]
    pub gold_state: DialogueState,
}

impl TurnSample {
    pub fn render_history(&self, mode: HistoryMode, speaker_tags: bool) -> String {
        render_history(&self.history, mode, speaker_tags)
    }

    /// Dialogue id and zero-based user-turn index parsed from the sample id.
    pub fn turn_position(&self) -> Option<(&str, usize)> {
        let (dialogue, index) = self.sample_id.rsplit_once(':')?;
        Some((dialogue, index.parse().ok()?))
    }

    fn validate(&self) -> Result<(), String> {
        if self.history.is_empty() {
            return Err("empty history".into());
        }
        check_alternation(&self.history)?;
        if self.history.last().map(|u| u.speaker) != Some(Speaker::User) {
            return Err("history does not end with a user utterance".into());
        }
        if self.turn_position().is_none() {
            return Err("sample_id is not of the form <dialogue_id>:<turn>".into());
        }
        let active = self.gold_state.active_domains();
        if active != self.gold_domains {
            return Err(format!(
                "domains {:?} disagree with the filled domains of the state {:?}",
                self.gold_domains, active
            ));
        }
        Ok(())
    }
}

/// Joins utterances with single spaces, optionally dropping agent turns and
/// prefixing speaker tags.
pub fn render_history(history: &[Utterance], mode: HistoryMode, speaker_tags: bool) -> String {
    let mut out = String::new();
    for utt in history {
        if mode == HistoryMode::UserOnly && utt.speaker == Speaker::Agent {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        if speaker_tags {
            out.push_str(utt.speaker.tag());
            out.push(' ');
        }
        out.push_str(&utt.text);
    }
    out
}

/// Expands a dialogue into one sample per user utterance.
pub fn accumulate_turns(dialogue: &Dialogue, split: Split) -> Vec<TurnSample> {
    let mut samples = Vec::with_capacity(dialogue.gold_states.len());
    let mut turn = 0;
    for (pos, utt) in dialogue.utterances.iter().enumerate() {
        if utt.speaker != Speaker::User {
            continue;
        }
        let Some(gold) = dialogue.gold_states.get(turn) else { break };
        samples.push(TurnSample {
            sample_id: format!("{}:{}", dialogue.dialogue_id, turn),
            split,
            history: dialogue.utterances[..=pos].to_vec(),
            gold_domains: gold.domains.clone(),
            gold_state: gold.state.clone(),
        });
        turn += 1;
    }
    samples
}

pub fn write_corpus<W: Write>(writer: W, samples: &[TurnSample]) -> std::io::Result<()> {
    let mut writer = BufWriter::new(writer);
    for sample in samples {
        serde_json::to_writer(&mut writer, sample)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_corpus(path: impl AsRef<Path>, samples: &[TurnSample]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    write_corpus(file, samples).map_err(|e| CorpusError::io(path, e))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<TurnSample>, CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    read_corpus(BufReader::new(file)).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::io(path, source),
        other => other,
    })
}

/// Parses and validates a JSON-lines corpus. Blank lines are ignored.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<TurnSample>, CorpusError> {
    let mut samples: Vec<TurnSample> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::io(Path::new("<corpus>"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: TurnSample = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Line { line: line_no, message: e.to_string() })?;
        sample
            .validate()
            .map_err(|message| CorpusError::Line { line: line_no, message })?;
        if let Some(prev_line) = seen.insert(sample.sample_id.clone(), line_no) {
            return Err(CorpusError::Line {
                line: line_no,
                message: format!("duplicate sample_id '{}' (first on line {prev_line})", sample.sample_id),
            });
        }
        if let Some(prev) = samples.last() {
            check_accumulation(prev, &sample)
                .map_err(|message| CorpusError::Line { line: line_no, message })?;
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Consecutive turns of one dialogue must extend the previous history by one
/// agent and one user utterance.
fn check_accumulation(prev: &TurnSample, next: &TurnSample) -> Result<(), String> {
    let (Some((pd, pt)), Some((nd, nt))) = (prev.turn_position(), next.turn_position()) else {
        return Ok(());
    };
    if pd != nd || nt != pt + 1 {
        return Ok(());
    }
    let grown = next.history.len().checked_sub(prev.history.len());
    if !matches!(grown, Some(1 | 2)) || !next.history.starts_with(&prev.history) {
        return Err(format!(
            "history of {} does not extend the history of {}",
            next.sample_id, prev.sample_id
        ));
    }
    Ok(())
}

/// Immutable sample collection with id lookup.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    samples: Vec<TurnSample>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(samples: Vec<TurnSample>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(samples.len());
        for (i, sample) in samples.iter().enumerate() {
            if index.insert(sample.sample_id.clone(), i).is_some() {
                return Err(CorpusError::Sample {
                    sample_id: sample.sample_id.clone(),
                    message: "duplicate sample_id".into(),
                });
            }
        }
        Ok(Self { samples, index })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Self::new(load_corpus(path)?)
    }

    pub fn get(&self, sample_id: &str) -> Option<&TurnSample> {
        self.index.get(sample_id).map(|&i| &self.samples[i])
    }

    pub fn samples(&self) -> &[TurnSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate_schema(&self, schema: &Schema) -> Result<(), CorpusError> {
        for sample in &self.samples {
            sample.gold_state.validate(schema).map_err(|message| CorpusError::Sample {
                sample_id: sample.sample_id.clone(),
                message,
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Two user turns, taxi then restaurant.
    pub(crate) fn worked_dialogue() -> Dialogue {
        let mut first = DialogueState::new();
        first.insert("taxi", "destination", "pizza hut fenditton");
        let mut second = first.clone();
        second.insert("taxi", "departure", "sidney sussex college");
        second.insert("restaurant", "area", "centre");
        second.insert("restaurant", "pricerange", "expensive");
        Dialogue {
            dialogue_id: "worked".into(),
            utterances: vec![
                Utterance::user("Can you help me get a taxi to Pizza Hut Fen Ditton?"),
                Utterance::agent("Sure. Where do you want to depart from?"),
                Utterance::user(
                    "I want to depart from Sidney, Sussex College, also I need a reservation there.",
                ),
            ],
            gold_states: vec![
                TurnState { domains: first.active_domains(), state: first },
                TurnState { domains: second.active_domains(), state: second },
            ],
        }
    }

    #[test]
    fn accumulation_builds_growing_prefixes() {
        let mut utterances = Vec::new();
        let mut gold_states = Vec::new();
        for t in 0..3 {
            utterances.push(Utterance::user(format!("user {t}")));
            utterances.push(Utterance::agent(format!("agent {t}")));
            gold_states.push(TurnState { domains: vec![], state: DialogueState::new() });
        }
        let dialogue = Dialogue { dialogue_id: "d".into(), utterances, gold_states };
        dialogue.validate().unwrap();
        let samples = accumulate_turns(&dialogue, Split::Train);
        let lengths: Vec<_> = samples.iter().map(|s| s.history.len()).collect();
        assert_eq!(lengths, [1, 3, 5]);
        assert_eq!(samples[2].sample_id, "d:2");
        for pair in samples.windows(2) {
            assert!(pair[1].history.starts_with(&pair[0].history));
            assert!(pair[1].history.len() > pair[0].history.len());
        }
    }

    #[test]
    fn single_turn_dialogue_yields_single_sample() {
        let dialogue = Dialogue {
            dialogue_id: "solo".into(),
            utterances: vec![Utterance::user("hi")],
            gold_states: vec![TurnState { domains: vec![], state: DialogueState::new() }],
        };
        let samples = accumulate_turns(&dialogue, Split::Test);
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].history, vec![Utterance::user("hi")]);
    }

    #[test]
    fn worked_second_turn_history() {
        let samples = accumulate_turns(&worked_dialogue(), Split::Train);
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[1].history.len(), 3);
        assert!(samples[1]
            .history
            .last()
            .unwrap()
            .text
            .starts_with("I want to depart from Sidney, Sussex College"));
        assert_eq!(samples[1].gold_domains, ["taxi", "restaurant"]);
    }

    #[test]
    fn render_history_modes() {
        let samples = accumulate_turns(&worked_dialogue(), Split::Train);
        let full = samples[1].render_history(HistoryMode::UserAgent, true);
        assert_eq!(
            full,
            "User: Can you help me get a taxi to Pizza Hut Fen Ditton? Agent: Sure. Where do you \
             want to depart from? User: I want to depart from Sidney, Sussex College, also I need \
             a reservation there."
        );
        let users = samples[1].render_history(HistoryMode::UserOnly, true);
        assert!(!users.contains("Agent:"));
        assert_eq!(render_history(&[Utterance::user("hi")], HistoryMode::UserAgent, false), "hi");
    }

    #[test]
    fn value_normalization() {
        assert_eq!(normalize_value("  Sidney   Sussex\tCollege "), "sidney sussex college");
        let mut state = DialogueState::new();
        state.insert("taxi", "leaveAt", "17:00 ");
        assert_eq!(state.get("taxi", "leaveAt"), Some("17:00"));
    }

    #[test]
    fn active_domains_skip_absent_values() {
        let mut state = DialogueState::new();
        state.insert("hotel", "area", NOT_MENTIONED);
        state.insert("taxi", "leaveAt", "17:00");
        assert_eq!(state.active_domains(), ["taxi"]);
        assert!(!state.is_empty());
    }

    #[test]
    fn schema_validation_names_offending_key() {
        let mut state = DialogueState::new();
        state.insert("taxi", "colour", "red");
        let err = state.validate(&Schema::multiwoz()).unwrap_err();
        assert!(err.contains("taxi.colour"), "{err}");
    }

    #[test]
    fn corpus_round_trip_and_truncation() {
        let samples = accumulate_turns(&worked_dialogue(), Split::Train);
        let mut buf = Vec::new();
        write_corpus(&mut buf, &samples).unwrap();
        let back = read_corpus(buf.as_slice()).unwrap();
        assert_eq!(back, samples);

        let truncated = &buf[..buf.len() - 10];
        match read_corpus(truncated) {
            Err(CorpusError::Line { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected line error, got {other:?}"),
        }
        assert!(read_corpus(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn load_rejects_inconsistent_domains() {
        let mut samples = accumulate_turns(&worked_dialogue(), Split::Train);
        samples[0].gold_domains = vec!["hotel".into()];
        let mut buf = Vec::new();
        write_corpus(&mut buf, &samples).unwrap();
        assert!(matches!(read_corpus(buf.as_slice()), Err(CorpusError::Line { line: 1, .. })));
    }

    #[test]
    fn load_rejects_broken_accumulation() {
        let mut samples = accumulate_turns(&worked_dialogue(), Split::Train);
        samples[1].history[0].text = "something else".into();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &samples).unwrap();
        assert!(matches!(read_corpus(buf.as_slice()), Err(CorpusError::Line { line: 2, .. })));
    }
}
