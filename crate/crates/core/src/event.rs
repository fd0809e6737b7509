//! Structural events and the newline-delimited JSON event log.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::entity::{EdgeId, EntityId, Kind, Timestamp};

pub type Labels = BTreeMap<String, String>;

/// One serialized mutation of the model. Field names on the wire are exactly
/// `seq`, `ts`, `action` and `payload`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralEvent {
    pub seq: u64,
    pub ts: Timestamp,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", content = "payload", rename_all = "snake_case")]
pub enum Action {
    CreateNode {
        id: EntityId,
        kind: Kind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        parent: Option<EntityId>,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        labels: Labels,
    },
    CloseNode {
        id: EntityId,
    },
    CreateEdge {
        id: EdgeId,
        source: EntityId,
        target: EntityId,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        labels: Labels,
    },
    CloseEdge {
        id: EdgeId,
    },
    Map {
        app_entity: EntityId,
        platform_entity: EntityId,
    },
    Unmap {
        app_entity: EntityId,
    },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::CreateNode { .. } => "create_node",
            Action::CloseNode { .. } => "close_node",
            Action::CreateEdge { .. } => "create_edge",
            Action::CloseEdge { .. } => "close_edge",
            Action::Map { .. } => "map",
            Action::Unmap { .. } => "unmap",
        }
    }
}

impl StructuralEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("structural events always serialize")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("event log i/o: {0}")]
    Io(#[from] io::Error),
    #[error("event log line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Reads an NDJSON event log. Blank lines are skipped.
pub fn read_log(reader: impl BufRead) -> Result<Vec<StructuralEvent>, LogError> {
    let mut events = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line).map_err(|source| LogError::Parse {
            line: idx + 1,
            source,
        })?;
        events.push(event);
    }
    Ok(events)
}

pub fn write_log<'a>(
    mut writer: impl Write,
    events: impl IntoIterator<Item = &'a StructuralEvent>,
) -> io::Result<()> {
    for event in events {
        writeln!(writer, "{}", event.to_json_line())?;
    }
    writer.flush()
}
