//! Slot precision/recall and demonstration slot-key relevance/coverage.
//!
//! A slot counts only when its value is not `"not mentioned"`; absent slots
//! are excluded on both the predicted and the gold side. Matching is exact on
//! normalized strings unless an alias table maps values first.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_value, DialogueState, TurnSample, NOT_MENTIONED};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("prediction and gold sample ids differ: {0}")]
    IdMismatch(String),
    #[error("nothing to aggregate")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotTriple {
    pub domain: String,
    pub key: String,
    pub value: String,
}

impl SlotTriple {
    pub fn new(domain: impl Into<String>, key: impl Into<String>, value: impl AsRef<str>) -> Self {
        Self { domain: domain.into(), key: key.into(), value: normalize_value(value.as_ref()) }
    }
}

pub type TripleSet = BTreeSet<SlotTriple>;

pub fn slot_triples(state: &DialogueState) -> TripleSet {
    state.filled().map(|(d, k, v)| SlotTriple::new(d, k, v)).collect()
}

/// A parsed model prediction: the schema-conformant state plus anything the
/// model produced outside the schema.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub state: DialogueState,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub off_schema: Vec<SlotTriple>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub parse_failed: bool,
}

impl Prediction {
    pub fn triples(&self) -> TripleSet {
        let mut set = slot_triples(&self.state);
        set.extend(self.off_schema.iter().filter(|t| t.value != NOT_MENTIONED).cloned());
        set
    }

    pub fn merge(&mut self, other: Prediction) {
        for (d, k, v) in other.state.iter() {
            self.state.insert(d, k, v);
        }
        self.off_schema.extend(other.off_schema);
        self.parse_failed |= other.parse_failed;
    }
}

impl From<DialogueState> for Prediction {
    fn from(state: DialogueState) -> Self {
        Self { state, ..Self::default() }
    }
}

/// Value aliases applied before matching. Empty by default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValueAliases {
    map: HashMap<String, String>,
}

impl ValueAliases {
    pub fn insert(&mut self, alias: &str, canonical: &str) {
        self.map.insert(normalize_value(alias), normalize_value(canonical));
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn apply(&self, set: TripleSet) -> TripleSet {
        if self.map.is_empty() {
            return set;
        }
        set.into_iter()
            .map(|mut t| {
                if let Some(c) = self.map.get(&t.value) {
                    t.value = c.clone();
                }
                t
            })
            .collect()
    }
}

/// Ratio with the degenerate conventions: 1 when both sides are empty, 0
/// when only the denominator is.
pub fn ratio(numerator: usize, denominator: usize, other_total: usize) -> f64 {
    match (denominator, other_total) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        (d, _) => numerator as f64 / d as f64,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub correct: usize,
    pub predicted_total: usize,
    pub gold_total: usize,
}

impl Metrics {
    pub fn from_counts(correct: usize, predicted_total: usize, gold_total: usize) -> Self {
        Self {
            precision: ratio(correct, predicted_total, gold_total),
            recall: ratio(correct, gold_total, predicted_total),
            correct,
            predicted_total,
            gold_total,
        }
    }

    /// Pools the counts of two metric sets.
    pub fn combine(&self, other: &Metrics) -> Metrics {
        Metrics::from_counts(
            self.correct + other.correct,
            self.predicted_total + other.predicted_total,
            self.gold_total + other.gold_total,
        )
    }
}

/// Counts for one sample.
pub fn sample_metrics(predicted: &TripleSet, gold: &TripleSet) -> Metrics {
    Metrics::from_counts(predicted.intersection(gold).count(), predicted.len(), gold.len())
}

pub fn micro_metrics(
    predictions: &BTreeMap<String, Prediction>,
    golds: &BTreeMap<String, DialogueState>,
) -> Result<Metrics, EvalError> {
    micro_metrics_with(predictions, golds, &ValueAliases::default())
}

pub fn micro_metrics_with(
    predictions: &BTreeMap<String, Prediction>,
    golds: &BTreeMap<String, DialogueState>,
    aliases: &ValueAliases,
) -> Result<Metrics, EvalError> {
    if let Some(id) = predictions
        .keys()
        .find(|id| !golds.contains_key(*id))
        .or_else(|| golds.keys().find(|id| !predictions.contains_key(*id)))
    {
        return Err(EvalError::IdMismatch(id.clone()));
    }
    let (mut correct, mut predicted, mut gold) = (0, 0, 0);
    for (id, prediction) in predictions {
        let p = aliases.apply(prediction.triples());
        let g = aliases.apply(slot_triples(&golds[id]));
        correct += p.intersection(&g).count();
        predicted += p.len();
        gold += g.len();
    }
    Ok(Metrics::from_counts(correct, predicted, gold))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RelevanceCoverage {
    pub relevance: f64,
    pub coverage: f64,
}

/// Raw key-set sizes for one test sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyOverlap {
    pub intersection: usize,
    pub demo_keys: usize,
    pub gold_keys: usize,
}

impl KeyOverlap {
    pub fn ratios(&self) -> RelevanceCoverage {
        RelevanceCoverage {
            relevance: ratio(self.intersection, self.demo_keys, self.gold_keys),
            coverage: ratio(self.intersection, self.gold_keys, self.demo_keys),
        }
    }
}

pub type KeySet = BTreeSet<(String, String)>;

pub fn filled_keys(state: &DialogueState) -> KeySet {
    state.filled().map(|(d, k, _)| (d.to_string(), k.to_string())).collect()
}

pub fn key_overlap(demo_keys: &KeySet, gold_keys: &KeySet) -> KeyOverlap {
    KeyOverlap {
        intersection: demo_keys.intersection(gold_keys).count(),
        demo_keys: demo_keys.len(),
        gold_keys: gold_keys.len(),
    }
}

/// Slot-key overlap between the demonstrations' gold states and the test
/// sample's gold state.
pub fn relevance_coverage(demos: &[&TurnSample], gold: &TurnSample) -> (RelevanceCoverage, KeyOverlap) {
    let demo_keys: KeySet = demos.iter().flat_map(|s| filled_keys(&s.gold_state)).collect();
    let overlap = key_overlap(&demo_keys, &filled_keys(&gold.gold_state));
    (overlap.ratios(), overlap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateRelevanceCoverage {
    pub micro: RelevanceCoverage,
    #[serde(rename = "macro")]
    pub macro_: RelevanceCoverage,
    pub samples: usize,
}

pub fn aggregate_relevance_coverage(items: &[KeyOverlap]) -> Result<AggregateRelevanceCoverage, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Empty);
    }
    let pooled = items.iter().fold(KeyOverlap::default(), |acc, o| KeyOverlap {
        intersection: acc.intersection + o.intersection,
        demo_keys: acc.demo_keys + o.demo_keys,
        gold_keys: acc.gold_keys + o.gold_keys,
    });
    let n = items.len() as f64;
    let (rel, cov) = items.iter().map(KeyOverlap::ratios).fold((0.0, 0.0), |(r, c), x| {
        (r + x.relevance, c + x.coverage)
    });
    Ok(AggregateRelevanceCoverage {
        micro: pooled.ratios(),
        macro_: RelevanceCoverage { relevance: rel / n, coverage: cov / n },
        samples: items.len(),
    })
}

/// One row of the per-configuration results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub config_id: String,
    /// `ok`, `incomplete`, or `failed: <reason>`.
    pub status: String,
    pub precision: f64,
    pub recall: f64,
    /// Empty when the run has no samples.
    pub relevance_micro: Option<f64>,
    pub coverage_micro: Option<f64>,
    pub relevance_macro: Option<f64>,
    pub coverage_macro: Option<f64>,
    pub samples: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub unfittable: usize,
    pub correct: usize,
    pub predicted_total: usize,
    pub gold_total: usize,
}

pub fn write_rows_csv<W: std::io::Write>(writer: W, rows: &[MetricsRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
