//! Instrumented record of every logical transfer between server and
//! clients, backing the data-locality guarantee: raw samples must never
//! appear in a client-to-server payload, and scores only under the
//! global-quantile baseline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    ServerToClient,
    ClientToServer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadKind {
    /// Frozen base tensors, distributed once at setup.
    BaseModel,
    /// Adapter parameters travelling in either direction.
    Adapters,
    /// The public validation set (public data, server to client only).
    PublicValidation,
    /// The scalar quality threshold.
    Threshold,
    /// Per-sample quality scores uploaded by a client.
    ScoreUpload,
    /// Raw training samples. Never legal from client to server; the kind
    /// exists so tests can scan for its absence.
    SamplePayload,
    Metadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub direction: Direction,
    pub payload: PayloadKind,
    pub bytes: usize,
    pub round: Option<usize>,
    pub client: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct MessageTrace {
    pub records: Vec<TransferRecord>,
}

impl MessageTrace {
    pub fn new() -> MessageTrace {
        MessageTrace::default()
    }

    pub fn record(
        &mut self,
        direction: Direction,
        payload: PayloadKind,
        bytes: usize,
        round: Option<usize>,
        client: Option<usize>,
    ) {
        self.records.push(TransferRecord {
            direction,
            payload,
            bytes,
            round,
            client,
        });
    }

    pub fn count(&self, direction: Direction, payload: PayloadKind) -> usize {
        self.records
            .iter()
            .filter(|r| r.direction == direction && r.payload == payload)
            .count()
    }

    /// Client-to-server transfers carrying raw samples.
    pub fn client_sample_uploads(&self) -> usize {
        self.count(Direction::ClientToServer, PayloadKind::SamplePayload)
    }

    /// Client-to-server transfers carrying scores.
    pub fn client_score_uploads(&self) -> usize {
        self.count(Direction::ClientToServer, PayloadKind::ScoreUpload)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for r in &self.records {
            body.push_str(&serde_json::to_string(r).expect("trace record serializes"));
            body.push('\n');
        }
        crate::experiment::atomic_write(path, body.as_bytes())
    }
}
