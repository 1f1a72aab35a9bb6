//! Per-flow packet counting keyed by complete SID lists.
//!
//! A "flow" here is an SRv6 path: the ordered list of segment identifiers a
//! packet carries. Each registered flow owns a pair of counters, one per
//! block color, and `match_and_count` bumps the counter for the color the
//! packet arrived with. Two engines implement the same observable behavior
//! with different lookup structure:
//!
//! * [`LinearEngine`](linear::LinearEngine) walks its rules in insertion
//!   order and compares SID lists element by element, the way a chain of
//!   per-flow firewall rules would. Cost grows with the number of flows,
//!   and a miss always pays for the full walk.
//! * [`HashEngine`](hash::HashEngine) keys a hash table by the digest of
//!   the concatenated SIDs plus the list length, the way a hash-based set
//!   match does. Cost stays flat as flows are added; colliding entries are
//!   disambiguated by comparing the full list.
//!
//! Counting uses relaxed atomics so concurrent data-path threads never lose
//! increments; flow add/remove requires exclusive access.

pub mod hash;
pub mod linear;

use std::fmt;
use std::net::Ipv6Addr;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packet::{Color, MAX_SEGMENTS};

pub use hash::HashEngine;
pub use linear::LinearEngine;

/// Errors raised by flow table manipulation and counter reads.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum MatcherError {
    #[error("SID list is empty")]
    EmptySidList,
    #[error("SID list has {0} entries, more than the {max} supported", max = MAX_SEGMENTS)]
    TooManySids(usize),
    #[error("flow is already registered")]
    DuplicateFlow,
    #[error("flow is not registered")]
    UnknownFlow,
    #[error("bad SID {0:?}: {1}")]
    BadSid(String, String),
}

/// A validated SID list in path order: non-empty and at most
/// [`MAX_SEGMENTS`] entries.
///
/// Equality and hashing cover the length and every address, so two lists
/// match only if they are identical element for element — a prefix or a
/// reordering of another list is a different flow.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<Ipv6Addr>", into = "Vec<Ipv6Addr>")]
pub struct SidList(Vec<Ipv6Addr>);

impl TryFrom<Vec<Ipv6Addr>> for SidList {
    type Error = MatcherError;

    fn try_from(sids: Vec<Ipv6Addr>) -> Result<SidList, MatcherError> {
        SidList::new(sids)
    }
}

impl From<SidList> for Vec<Ipv6Addr> {
    fn from(list: SidList) -> Vec<Ipv6Addr> {
        list.0
    }
}

impl SidList {
    pub fn new(sids: Vec<Ipv6Addr>) -> Result<SidList, MatcherError> {
        if sids.is_empty() {
            return Err(MatcherError::EmptySidList);
        }
        if sids.len() > MAX_SEGMENTS {
            return Err(MatcherError::TooManySids(sids.len()));
        }
        Ok(SidList(sids))
    }

    pub fn segments(&self) -> &[Ipv6Addr] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false // new() rejects empty lists
    }
}

impl AsRef<[Ipv6Addr]> for SidList {
    fn as_ref(&self) -> &[Ipv6Addr] {
        &self.0
    }
}

impl std::borrow::Borrow<[Ipv6Addr]> for SidList {
    fn borrow(&self) -> &[Ipv6Addr] {
        &self.0
    }
}

impl fmt::Display for SidList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, sid) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{sid}")?;
        }
        Ok(())
    }
}

impl FromStr for SidList {
    type Err = MatcherError;

    /// Parses a comma-separated address list, e.g. `"fc00::a,fc00::b"`.
    fn from_str(s: &str) -> Result<SidList, MatcherError> {
        let sids = s
            .split(',')
            .map(|part| {
                let part = part.trim();
                part.parse::<Ipv6Addr>()
                    .map_err(|e| MatcherError::BadSid(part.to_string(), e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        SidList::new(sids)
    }
}

/// Point-in-time copy of one flow's two counters.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub count_a: u64,
    pub count_b: u64,
}

impl CounterSnapshot {
    pub fn get(&self, color: Color) -> u64 {
        match color {
            Color::A => self.count_a,
            Color::B => self.count_b,
        }
    }
}

/// Counter value at which the saturation warning trips: half the u64
/// range. Counters keep wrapping modularly past it, but readers get a flag
/// telling them differences may no longer be trustworthy.
pub const SATURATION_THRESHOLD: u64 = 1 << 63;

/// The pair of per-color packet counters attached to one flow.
#[derive(Debug, Default)]
pub struct ColorBank {
    count_a: AtomicU64,
    count_b: AtomicU64,
}

impl ColorBank {
    pub fn increment(&self, color: Color, saturation: &AtomicBool) {
        let cell = match color {
            Color::A => &self.count_a,
            Color::B => &self.count_b,
        };
        let previous = cell.fetch_add(1, Ordering::Relaxed);
        if previous >= SATURATION_THRESHOLD - 1 {
            saturation.store(true, Ordering::Relaxed);
        }
    }

    pub fn get(&self, color: Color) -> u64 {
        match color {
            Color::A => self.count_a.load(Ordering::Relaxed),
            Color::B => self.count_b.load(Ordering::Relaxed),
        }
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot { count_a: self.get(Color::A), count_b: self.get(Color::B) }
    }

    #[cfg(test)]
    pub(crate) fn set_for_test(&self, color: Color, value: u64) {
        let cell = match color {
            Color::A => &self.count_a,
            Color::B => &self.count_b,
        };
        cell.store(value, Ordering::Relaxed);
    }
}

/// Common interface of the two counting engines.
///
/// Lookup-side methods take `&self` and are safe to call from several
/// threads at once; table-mutating methods take `&mut self`.
pub trait MatcherEngine: Send + Sync {
    /// Registers a flow with zeroed counters.
    fn add_flow(&mut self, flow: SidList) -> Result<(), MatcherError>;

    /// Unregisters a flow, returning its final counter values.
    fn remove_flow(&mut self, sids: &[Ipv6Addr]) -> Result<CounterSnapshot, MatcherError>;

    /// Looks up the packet's SID list and, on a hit, bumps the counter for
    /// `color`. Returns whether the packet matched a registered flow.
    ///
    /// Lists longer than [`MAX_SEGMENTS`] are a guaranteed miss (no flow
    /// that long can be registered) and are tallied by the
    /// [`oversize_misses`](MatcherEngine::oversize_misses) diagnostic.
    fn match_and_count(&self, sids: &[Ipv6Addr], color: Color) -> bool;

    /// Reads one counter of a registered flow.
    fn read_counter(&self, sids: &[Ipv6Addr], color: Color) -> Result<u64, MatcherError>;

    /// Reads both counters of a registered flow.
    fn counters(&self, sids: &[Ipv6Addr]) -> Result<CounterSnapshot, MatcherError>;

    /// All registered flows with their current counters, in an
    /// engine-defined order.
    fn list_flows(&self) -> Vec<(SidList, CounterSnapshot)>;

    fn flow_count(&self) -> usize;

    /// How many lookups missed because the SID list exceeded
    /// [`MAX_SEGMENTS`].
    fn oversize_misses(&self) -> u64;

    /// Whether any counter has crossed [`SATURATION_THRESHOLD`] since the
    /// engine was created.
    fn saturation_warning(&self) -> bool;
}

/// Selects which engine implementation to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Linear,
    Hash,
}

impl EngineKind {
    pub fn build(self) -> Box<dyn MatcherEngine> {
        match self {
            EngineKind::Linear => Box::new(LinearEngine::new()),
            EngineKind::Hash => Box::new(HashEngine::new()),
        }
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EngineKind::Linear => "linear",
            EngineKind::Hash => "hash",
        })
    }
}

impl FromStr for EngineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<EngineKind, String> {
        match s {
            "linear" => Ok(EngineKind::Linear),
            "hash" => Ok(EngineKind::Hash),
            other => Err(format!("unknown engine {other:?}, expected \"linear\" or \"hash\"")),
        }
    }
}
