use std::collections::HashSet;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::CorpusError;

/// Domain → slot keys, in the canonical order used for rendering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct Schema {
    domains: IndexMap<String, Vec<String>>,
}

impl Schema {
    pub fn new(domains: IndexMap<String, Vec<String>>) -> Result<Self, CorpusError> {
        for (domain, keys) in &domains {
            if keys.is_empty() {
                return Err(CorpusError::Schema(format!("domain '{domain}' has no slot keys")));
            }
            let mut seen = HashSet::new();
            for key in keys {
                if !seen.insert(key.as_str()) {
                    return Err(CorpusError::Schema(format!(
                        "domain '{domain}' lists slot key '{key}' twice"
                    )));
                }
            }
        }
        Ok(Self { domains })
    }

    /// The five MultiWOZ domains evaluated in the DST literature, keys sorted
    /// case-insensitively (taxi before restaurant).
    pub fn multiwoz() -> Self {
        let table: [(&str, &[&str]); 5] = [
            ("attraction", &["area", "name", "type"]),
            (
                "hotel",
                &[
                    "area", "day", "internet", "name", "parking", "people", "pricerange", "stars",
                    "stay", "type",
                ],
            ),
            (
                "restaurant",
                &["area", "day", "food", "name", "people", "pricerange", "time"],
            ),
            ("taxi", &["arriveBy", "departure", "destination", "leaveAt"]),
            (
                "train",
                &["arriveBy", "day", "departure", "destination", "leaveAt", "people"],
            ),
        ];
        let domains = table
            .iter()
            .map(|(d, keys)| (d.to_string(), keys.iter().map(|k| k.to_string()).collect()))
            .collect();
        Self { domains }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let domains: IndexMap<String, Vec<String>> =
            serde_json::from_str(text).map_err(|e| CorpusError::Schema(e.to_string()))?;
        Self::new(domains)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("schema serializes");
        std::fs::write(path, text + "\n").map_err(|e| CorpusError::io(path, e))
    }

    pub fn keys(&self, domain: &str) -> Option<&[String]> {
        self.domains.get(domain).map(Vec::as_slice)
    }

    pub fn has_domain(&self, domain: &str) -> bool {
        self.domains.contains_key(domain)
    }

    pub fn has_key(&self, domain: &str, key: &str) -> bool {
        self.keys(domain).is_some_and(|keys| keys.iter().any(|k| k == key))
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.domains.keys().map(String::as_str)
    }

    /// Position of a domain in canonical order.
    pub fn domain_rank(&self, domain: &str) -> Option<usize> {
        self.domains.get_index_of(domain)
    }
}

impl<'de> Deserialize<'de> for Schema {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let domains = IndexMap::<String, Vec<String>>::deserialize(deserializer)?;
        Schema::new(domains).map_err(serde::de::Error::custom)
    }
}
