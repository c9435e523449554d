//! Per-sample run records, stored as JSON lines and appended in sample order.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::eval::{KeyOverlap, Prediction};
use crate::repair::{Fix, RepairStatus};
use crate::retriever::Neighbor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Ok,
    Failed,
    /// Not even the test block fits the budget (or `strict_k` refused).
    Unfittable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotOutput {
    /// `domain.key` for slot-value decoding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<String>,
    pub raw: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairSummary {
    pub status: RepairStatus,
    pub applied_fixes: Vec<Fix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub status: SampleStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub neighbors: Vec<Neighbor>,
    /// Demonstrations that fit every prompt of the sample, prompt order.
    pub included_demo_ids: Vec<String>,
    /// Largest prompt estimate of the sample.
    pub prompt_tokens: usize,
    pub outputs: Vec<SlotOutput>,
    pub prediction: Prediction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair: Option<RepairSummary>,
    /// Slot keys of the retrieved demonstrations against the gold keys.
    pub key_overlap: KeyOverlap,
}

impl SampleRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

/// Reads complete records. A trailing line without a newline (an interrupted
/// write) is ignored; the returned length is where valid data ends.
pub fn read_records(path: &Path) -> Result<(Vec<SampleRecord>, u64), HarnessError> {
    let bytes = match std::fs::read(path) {
        Ok(bytes) => bytes,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(HarnessError::io(path)(e)),
    };
    let valid = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    let text = std::str::from_utf8(&bytes[..valid]).map_err(|e| HarnessError::Records {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| HarnessError::Records {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok((records, valid as u64))
}

/// Single writer appending to a records file.
pub struct RecordWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RecordWriter {
    /// Opens for appending after cutting the file to `valid_len` bytes.
    pub fn open(path: &Path, valid_len: u64) -> Result<Self, HarnessError> {
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(path)
            .map_err(HarnessError::io(path))?;
        file.set_len(valid_len).map_err(HarnessError::io(path))?;
        let mut file = file;
        std::io::Seek::seek(&mut file, std::io::SeekFrom::End(0)).map_err(HarnessError::io(path))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn append(&mut self, records: &[SampleRecord]) -> Result<(), HarnessError> {
        for record in records {
            writeln!(self.out, "{}", record.to_line()).map_err(HarnessError::io(&self.path))?;
        }
        self.out.flush().map_err(HarnessError::io(&self.path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str) -> SampleRecord {
        SampleRecord {
            sample_id: id.into(),
            status: SampleStatus::Ok,
            error: None,
            neighbors: vec![Neighbor { sample_id: "t:0".into(), score: 0.5 }],
            included_demo_ids: vec!["t:0".into()],
            prompt_tokens: 12,
            outputs: vec![SlotOutput { slot: Some("taxi.leaveAt".into()), raw: "9".into(), latency_ms: 0 }],
            prediction: Prediction::default(),
            repair: None,
            key_overlap: KeyOverlap::default(),
        }
    }

    #[test]
    fn partial_line_dropped_on_resume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        let mut w = RecordWriter::open(&path, 0).unwrap();
        w.append(&[record("a:0"), record("a:1")]).unwrap();
        drop(w);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"sample_id\": \"a:2\", \"sta").unwrap();
        drop(f);

        let (records, valid) = read_records(&path).unwrap();
        assert_eq!(records.len(), 2);
        let mut w = RecordWriter::open(&path, valid).unwrap();
        w.append(&[record("a:2")]).unwrap();
        drop(w);
        let (records, _) = read_records(&path).unwrap();
        assert_eq!(records.iter().map(|r| r.sample_id.as_str()).collect::<Vec<_>>(), ["a:0", "a:1", "a:2"]);
        assert_eq!(records[0], record("a:0"));
    }

    #[test]
    fn missing_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_records(&dir.path().join("none")).unwrap().0.is_empty());
    }
}
