//! Dataset files: one JSON record per line.
//!
//! Records hold the detokenized strings plus label fields; token ids are
//! never serialized, tokenization is recomputed against the vocabulary file.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledDataset, Provenance, Sample, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: u64,
    question: String,
    answer: String,
    provenance: Provenance,
    origin_id: u64,
}

pub fn write_samples(path: &Path, samples: &[Sample], vocab: &Vocab) -> Result<()> {
    let mut body = String::new();
    for s in samples {
        let record = SampleRecord {
            id: s.id,
            question: vocab.decode(&s.question)?,
            answer: vocab.decode(&s.answer)?,
            provenance: s.provenance,
            origin_id: s.origin_id,
        };
        body.push_str(&serde_json::to_string(&record).map_err(|e| Error::data(e.to_string()))?);
        body.push('\n');
    }
    crate::experiment::atomic_write(path, body.as_bytes())
}

pub fn write_dataset(path: &Path, dataset: &LabeledDataset, vocab: &Vocab) -> Result<()> {
    write_samples(path, &dataset.samples, vocab)
}

pub fn read_samples(path: &Path, vocab: &Vocab) -> Result<Vec<Sample>> {
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open dataset {}: {e}", path.display())))?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line).map_err(|e| {
            Error::data(format!(
                "{} line {}: malformed record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        samples.push(Sample {
            id: record.id,
            question: vocab.encode(&record.question)?,
            answer: vocab.encode(&record.answer)?,
            provenance: record.provenance,
            origin_id: record.origin_id,
        });
    }
    Ok(samples)
}

pub fn read_dataset(path: &Path, vocab: &Vocab) -> Result<LabeledDataset> {
    Ok(LabeledDataset::from_samples(read_samples(path, vocab)?))
}
