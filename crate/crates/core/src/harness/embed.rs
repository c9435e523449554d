//! Precomputing an emb-jsonl store with checkpointing.
//!
//! Rows are appended to `<output>.partial` batch by batch; a rerun picks up
//! the ids already there. The finished store is written in sample order and
//! the checkpoint removed.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::HarnessError;
use crate::corpus::TurnSample;
use crate::embedder::{
    embed_text, write_row, EmbedItem, EmbedTextMode, Embedder, EmbeddingStore, EmbeddingVector, StoreHeader,
    STORE_FORMAT,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PrecomputeSummary {
    /// Vectors computed by this call.
    pub computed: usize,
    /// Vectors taken from a checkpoint.
    pub resumed: usize,
    /// The output already existed and matched; nothing was done.
    pub up_to_date: bool,
}

fn partial_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".partial");
    PathBuf::from(name)
}

fn header_extra(mode: EmbedTextMode, speaker_tags: bool) -> serde_json::Map<String, Value> {
    let Value::Object(map) = json!({"mode": mode.as_str(), "speaker_tags": speaker_tags}) else {
        unreachable!()
    };
    map
}

/// Rows of a checkpoint whose header matches; anything else restarts it.
fn read_checkpoint(path: &Path, expected: &StoreHeader) -> Vec<(String, Vec<f32>)> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    let complete = &text[..text.rfind('\n').map_or(0, |p| p + 1)];
    let mut lines = complete.lines();
    let header: Option<StoreHeader> = lines.next().and_then(|l| serde_json::from_str(l).ok());
    if header.as_ref() != Some(expected) {
        return Vec::new();
    }
    lines
        .filter_map(|l| {
            let v: Value = serde_json::from_str(l).ok()?;
            let id = v.get("id")?.as_str()?.to_string();
            let values = v.get("v")?.as_array()?.iter().map(|x| x.as_f64().map(|f| f as f32)).collect::<Option<Vec<_>>>()?;
            Some((id, values))
        })
        .collect()
}

/// Embeds every sample once (first occurrence wins) and writes a store with
/// the text mode recorded in its header.
pub fn precompute_embeddings(
    samples: &[TurnSample],
    embedder: &dyn Embedder,
    mode: EmbedTextMode,
    speaker_tags: bool,
    output: &Path,
    batch_size: usize,
) -> Result<PrecomputeSummary, HarnessError> {
    let mut seen = HashSet::new();
    let samples: Vec<&TurnSample> = samples.iter().filter(|s| seen.insert(s.sample_id.as_str())).collect();
    let extra = header_extra(mode, speaker_tags);

    if output.is_file() {
        if let Ok((store, _)) = EmbeddingStore::load_with_report(output) {
            let same = store.model_name == embedder.model_name()
                && store.extra == extra
                && store.len() == samples.len()
                && samples.iter().all(|s| store.contains(&s.sample_id));
            if same {
                return Ok(PrecomputeSummary { up_to_date: true, ..Default::default() });
            }
        }
    }

    // the dimension comes from the embedder, or from a probe call
    let mut dim = embedder.dimension();
    if dim.is_none() {
        if let Some(s) = samples.first() {
            let text = embed_text(s, mode, speaker_tags);
            let v = embedder.embed(&[EmbedItem { id: &s.sample_id, text: &text }])?;
            dim = v.first().map(EmbeddingVector::dim);
        }
    }
    let header = StoreHeader {
        format: STORE_FORMAT.into(),
        model: embedder.model_name().to_string(),
        dim: dim.unwrap_or(1),
        count: samples.len(),
        extra,
    };

    let partial = partial_path(output);
    let rows = read_checkpoint(&partial, &header);
    let done: HashSet<&str> = rows.iter().map(|(id, _)| id.as_str()).collect();
    let resumed = done.len();
    let file = if resumed > 0 {
        // rewrite without a possibly truncated tail
        let mut out = BufWriter::new(std::fs::File::create(&partial).map_err(HarnessError::io(&partial))?);
        serde_json::to_writer(&mut out, &header).expect("headers serialize");
        writeln!(out).map_err(HarnessError::io(&partial))?;
        for (id, v) in &rows {
            let vector = EmbeddingVector::new(v.clone())?;
            write_row(&mut out, id, &vector).map_err(HarnessError::io(&partial))?;
        }
        out.flush().map_err(HarnessError::io(&partial))?;
        OpenOptions::new().append(true).open(&partial).map_err(HarnessError::io(&partial))?
    } else {
        let mut f = std::fs::File::create(&partial).map_err(HarnessError::io(&partial))?;
        serde_json::to_writer(&mut f, &header).expect("headers serialize");
        writeln!(f).map_err(HarnessError::io(&partial))?;
        f
    };
    let mut out = BufWriter::new(file);

    let todo: Vec<&&TurnSample> = samples.iter().filter(|s| !done.contains(s.sample_id.as_str())).collect();
    let mut computed = 0;
    for batch in todo.chunks(batch_size.max(1)) {
        let texts: Vec<String> = batch.iter().map(|s| embed_text(s, mode, speaker_tags)).collect();
        let items: Vec<EmbedItem<'_>> =
            batch.iter().zip(&texts).map(|(s, t)| EmbedItem { id: &s.sample_id, text: t }).collect();
        let vectors = embedder.embed(&items)?;
        for (s, v) in batch.iter().zip(&vectors) {
            write_row(&mut out, &s.sample_id, v).map_err(HarnessError::io(&partial))?;
        }
        out.flush().map_err(HarnessError::io(&partial))?;
        computed += vectors.len();
    }
    drop(out);

    // reorder into sample order and validate through the loader
    let (loaded, _) = EmbeddingStore::load_with_report(&partial)?;
    let mut store = EmbeddingStore::new(loaded.model_name.clone(), loaded.dimension());
    store.extra = loaded.extra.clone();
    for s in &samples {
        let v = loaded.get(&s.sample_id).ok_or_else(|| {
            HarnessError::Config(format!("checkpoint lost the vector of '{}'", s.sample_id))
        })?;
        store.insert(s.sample_id.as_str(), v.clone())?;
    }
    store.save(output)?;
    std::fs::remove_file(&partial).map_err(HarnessError::io(&partial))?;
    Ok(PrecomputeSummary { computed, resumed, up_to_date: false })
}
