//! Entity vocabulary shared by every layer: sides, kinds, identifiers,
//! lifetimes and the simulated/real timebase.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Nanoseconds since the Unix epoch (or since simulation start).
pub type Timestamp = i64;

pub const NANOS_PER_MILLI: i64 = 1_000_000;
pub const NANOS_PER_SEC: i64 = 1_000_000_000;

pub fn secs(s: f64) -> Timestamp {
    (s * NANOS_PER_SEC as f64).round() as Timestamp
}

pub fn millis(ms: i64) -> Timestamp {
    ms * NANOS_PER_MILLI
}

/// Parses durations such as `500ms`, `10s`, `2m`, `1h` or a bare number of
/// seconds into nanoseconds.
pub fn parse_duration(text: &str) -> Option<i64> {
    let text = text.trim();
    let split = text
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(text.len());
    let (num, unit) = text.split_at(split);
    let value: f64 = num.parse().ok()?;
    let scale = match unit {
        "" | "s" => NANOS_PER_SEC as f64,
        "ms" => NANOS_PER_MILLI as f64,
        "us" => 1_000.0,
        "ns" => 1.0,
        "m" => 60.0 * NANOS_PER_SEC as f64,
        "h" => 3600.0 * NANOS_PER_SEC as f64,
        _ => return None,
    };
    let nanos = (value * scale).round();
    (nanos.is_finite() && nanos >= 0.0).then_some(nanos as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Application,
    Platform,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Application => "application",
            Side::Platform => "platform",
        }
    }

    pub fn opposite(self) -> Side {
        match self {
            Side::Application => Side::Platform,
            Side::Platform => Side::Application,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Resource types of the fixed three-level hierarchies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Job,
    Process,
    Thread,
    Node,
    Processor,
    Core,
}

impl Kind {
    pub const ALL: [Kind; 6] = [
        Kind::Job,
        Kind::Process,
        Kind::Thread,
        Kind::Node,
        Kind::Processor,
        Kind::Core,
    ];

    pub fn side(self) -> Side {
        match self {
            Kind::Job | Kind::Process | Kind::Thread => Side::Application,
            Kind::Node | Kind::Processor | Kind::Core => Side::Platform,
        }
    }

    pub fn child(self) -> Option<Kind> {
        match self {
            Kind::Job => Some(Kind::Process),
            Kind::Process => Some(Kind::Thread),
            Kind::Node => Some(Kind::Processor),
            Kind::Processor => Some(Kind::Core),
            Kind::Thread | Kind::Core => None,
        }
    }

    pub fn parent(self) -> Option<Kind> {
        match self {
            Kind::Process => Some(Kind::Job),
            Kind::Thread => Some(Kind::Process),
            Kind::Processor => Some(Kind::Node),
            Kind::Core => Some(Kind::Processor),
            Kind::Job | Kind::Node => None,
        }
    }

    /// Depth below the root of its hierarchy (job/node = 0).
    pub fn depth(self) -> usize {
        match self {
            Kind::Job | Kind::Node => 0,
            Kind::Process | Kind::Processor => 1,
            Kind::Thread | Kind::Core => 2,
        }
    }

    /// Kind on the opposite side that this kind may be mapped to.
    pub fn counterpart(self) -> Kind {
        match self {
            Kind::Job => Kind::Node,
            Kind::Process => Kind::Processor,
            Kind::Thread => Kind::Core,
            Kind::Node => Kind::Job,
            Kind::Processor => Kind::Process,
            Kind::Core => Kind::Thread,
        }
    }

    /// True when `other` lies strictly below `self` in the same hierarchy.
    pub fn is_ancestor_of(self, other: Kind) -> bool {
        self.side() == other.side() && self.depth() < other.depth()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Job => "job",
            Kind::Process => "process",
            Kind::Thread => "thread",
            Kind::Node => "node",
            Kind::Processor => "processor",
            Kind::Core => "core",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Kind::Job => "jobs",
            Kind::Process => "processes",
            Kind::Thread => "threads",
            Kind::Node => "nodes",
            Kind::Processor => "processors",
            Kind::Core => "cores",
        }
    }

    pub fn from_plural(text: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.plural() == text)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Kind {
    type Err = UnknownKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Kind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown resource type `{0}`")]
pub struct UnknownKind(pub String);

/// Opaque entity identifier of the form `<side>/<kind>/<stable-key>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(String);

impl EntityId {
    pub fn new(kind: Kind, key: &str) -> Self {
        EntityId(format!("{}/{}/{}", kind.side(), kind, key))
    }

    /// Wraps an already formatted identifier without checking it.
    pub fn from_raw(raw: impl Into<String>) -> Self {
        EntityId(raw.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Kind encoded in the identifier, if well formed.
    pub fn kind(&self) -> Option<Kind> {
        let mut parts = self.0.splitn(3, '/');
        let side = parts.next()?;
        let kind: Kind = parts.next()?.parse().ok()?;
        let key = parts.next()?;
        (side == kind.side().as_str() && !key.is_empty()).then_some(kind)
    }

    pub fn stable_key(&self) -> &str {
        self.0.splitn(3, '/').nth(2).unwrap_or("")
    }
}

impl std::ops::Deref for EntityId {
    type Target = str;

    fn deref(&self) -> &str {
        &self.0
    }
}

impl std::ops::Deref for EdgeId {
    type Target = str;

    fn deref(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EntityId {
    fn from(s: &str) -> Self {
        EntityId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(String);

impl EdgeId {
    pub fn new(raw: impl Into<String>) -> Self {
        EdgeId(raw.into())
    }

    /// Conventional identifier for a link between two entities.
    pub fn between(source: &EntityId, target: &EntityId) -> Self {
        let side = source.kind().map(|k| k.side().as_str()).unwrap_or("edge");
        EdgeId(format!(
            "{side}/edge/{}~{}",
            source.stable_key(),
            target.stable_key()
        ))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Half-open validity interval `[start, end)`; an absent end means alive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lifetime {
    pub start: Timestamp,
    pub end: Option<Timestamp>,
}

impl Lifetime {
    pub fn open(start: Timestamp) -> Self {
        Lifetime { start, end: None }
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        self.start <= t && self.end.is_none_or(|end| t < end)
    }

    pub fn is_open(&self) -> bool {
        self.end.is_none()
    }

    pub fn is_well_formed(&self) -> bool {
        self.end.is_none_or(|end| self.start < end)
    }

    /// True when `self` lies within `outer`.
    pub fn within(&self, outer: &Lifetime) -> bool {
        if self.start < outer.start {
            return false;
        }
        match (self.end, outer.end) {
            (_, None) => true,
            (None, Some(_)) => false,
            (Some(a), Some(b)) => a <= b,
        }
    }
}
