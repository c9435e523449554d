//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use icl_dst::corpus::{accumulate_turns, Dialogue, DialogueState, Split, TurnSample, TurnState, Utterance};
use icl_dst::harness::{EmbeddingSource, ExperimentConfig};
use icl_dst::prompt::SlotTarget;
use icl_dst::{assemble_prompt, save_corpus, Corpus, HistoryMode, Neighbor, PromptConfig, RetrievalResult, Schema, TokenCounter};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// A two-domain conversation: taxi then restaurant.
pub fn worked_dialogue() -> Dialogue {
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
            Utterance::user("I want to depart from Sidney, Sussex College, also I need a reservation there."),
        ],
        gold_states: vec![
            TurnState { domains: first.active_domains(), state: first },
            TurnState { domains: second.active_domains(), state: second },
        ],
    }
}

/// The worked demonstration (second turn of the dialogue).
pub fn worked_demo() -> TurnSample {
    accumulate_turns(&worked_dialogue(), Split::Train).remove(1)
}

/// A single-domain taxi test turn.
pub fn worked_test() -> TurnSample {
    let mut state = DialogueState::new();
    state.insert("taxi", "departure", "saint johns college");
    state.insert("taxi", "destination", "pizza hut fenditton");
    TurnSample {
        sample_id: "test:0".into(),
        split: Split::Test,
        history: vec![Utterance::user("I would like a taxi from Saint John's College to Pizza Hut Fen Ditton.")],
        gold_domains: vec!["taxi".into()],
        gold_state: state,
    }
}

const DOMAINS: [(&str, [&str; 3]); 5] = [
    ("taxi", ["destination", "departure", "leaveAt"]),
    ("restaurant", ["food", "area", "pricerange"]),
    ("hotel", ["area", "stars", "parking"]),
    ("attraction", ["type", "area", "name"]),
    ("train", ["destination", "day", "leaveAt"]),
];

/// Words used by dialogue `j` only.
fn words(j: usize) -> (String, String) {
    let syllables = ["ka", "lo", "mi", "ru", "te", "vo", "zu", "pe", "fa", "gi"];
    let w = |n: usize| -> String { format!("{}{}{}", syllables[n % 10], syllables[(n / 10) % 10], syllables[(n / 100) % 10]) };
    (w(j * 7 + 1), w(j * 7 + 3))
}

/// Dialogue `j` of the synthetic corpus. Three user turns, one domain, one
/// new slot per turn. With `paraphrase` the first user utterance gains a word.
pub fn synthetic_dialogue(j: usize, id: &str, paraphrase: bool) -> Dialogue {
    let (domain, keys) = DOMAINS[j % DOMAINS.len()];
    let (a, b) = words(j);
    let mut utterances = Vec::new();
    let mut gold_states = Vec::new();
    let mut state = DialogueState::new();
    for (t, key) in keys.iter().enumerate() {
        let value = format!("{a} {b} {t}");
        let mut user = format!("i want the {domain} {key} to be {value}");
        if t == 0 && paraphrase {
            user.push_str(" please");
        }
        if t > 0 {
            utterances.push(Utterance::agent(format!("noted {a} anything else for {b}")));
        }
        utterances.push(Utterance::user(user));
        state.insert(domain, key, &value);
        gold_states.push(TurnState { domains: state.active_domains(), state: state.clone() });
    }
    Dialogue { dialogue_id: id.into(), utterances, gold_states }
}

/// Forty train dialogues and ten test dialogues; test dialogue `i`
/// paraphrases train dialogue `4 i`, so under the mock embedder each test
/// turn's nearest train turn carries the same gold state.
pub fn synthetic_corpus() -> (Vec<TurnSample>, Vec<TurnSample>) {
    let train = (0..40)
        .flat_map(|j| accumulate_turns(&synthetic_dialogue(j, &format!("syn-train-{j:02}"), false), Split::Train))
        .collect();
    let test = (0..10)
        .flat_map(|i| accumulate_turns(&synthetic_dialogue(4 * i, &format!("syn-test-{i:02}"), true), Split::Test))
        .collect();
    (train, test)
}

/// Writes the synthetic corpus under `dir` and returns a mock configuration
/// over it, K = 1, slot-value decoding.
pub fn synthetic_config(dir: &Path) -> ExperimentConfig {
    let (train, test) = synthetic_corpus();
    let train_path = dir.join("train.jsonl");
    let test_path = dir.join("test.jsonl");
    save_corpus(&train_path, &train).unwrap();
    save_corpus(&test_path, &test).unwrap();
    let mut config = ExperimentConfig::new(train_path, test_path, dir.join("runs"));
    config.name = "syn".into();
    config.embedding.source = EmbeddingSource::Mock { dim: 512 };
    config.prompt.max_demos = 1;
    config
}

/// Golden file name and settings for the four worked prompt variants.
pub const GOLDEN_VARIANTS: [(&str, HistoryMode, bool); 4] = [
    ("worked_user_agent_tags.txt", HistoryMode::UserAgent, true),
    ("worked_user_agent_plain.txt", HistoryMode::UserAgent, false),
    ("worked_user_only_tags.txt", HistoryMode::UserOnly, true),
    ("worked_user_only_plain.txt", HistoryMode::UserOnly, false),
];

/// The worked prompt: one demonstration, the taxi test turn, decoding
/// the taxi arrival time.
pub fn worked_prompt(history_mode: HistoryMode, speaker_tags: bool) -> String {
    let demo = worked_demo();
    let retrieval = RetrievalResult { neighbors: vec![Neighbor { sample_id: demo.sample_id.clone(), score: 0.9 }] };
    let corpus = Corpus::new(vec![demo]).unwrap();
    let config = PromptConfig { history_mode, speaker_tags, ..PromptConfig::default() };
    assemble_prompt(
        &worked_test(),
        &retrieval,
        &corpus,
        &config,
        &Schema::multiwoz(),
        Some(&SlotTarget::new("taxi", "arriveBy")),
        &TokenCounter::heuristic(),
    )
    .unwrap()
    .text
}
