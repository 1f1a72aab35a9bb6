//! Ingress and egress packet pipelines.
//!
//! The ingress node steers traffic onto SRv6 paths and stamps monitored
//! packets with the current block color; the egress node reads the stamp,
//! counts, and unwraps. Between them sits nothing this module cares
//! about — any number of transit segments may forward the packet.
//!
//! ```text
//!             ingress                              egress
//!   inner --> classify --> encapsulate --> color/count --> ... -->
//!             count(color carried by packet) --> decapsulate --> inner
//! ```
//!
//! Two rules keep the per-block counters exact:
//!
//! * The color a packet carries is decided once, at the ingress, from the
//!   ingress [`ColoringSchedule`]. The egress never consults a clock for
//!   counting — it trusts the bits in the packet, so clock skew between
//!   the nodes cannot smear packets across blocks.
//! * The egress counts *before* decapsulating. Arrival is what the
//!   receive counter measures; delivery of the inner packet is a separate
//!   step that can fail independently.

use std::collections::HashMap;
use std::fmt;
use std::net::Ipv6Addr;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::matcher::{MatcherEngine, SidList};
use crate::packet::{
    self, Color, CodecError, Ipv6Header, PacketBuffer, PROTO_IPV6,
};
use crate::time::Timestamp;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DataplaneError {
    #[error("malformed inner packet: {0}")]
    MalformedInner(CodecError),
    #[error("encapsulation failed: {0}")]
    Encap(CodecError),
    #[error("decapsulation failed: {0}")]
    Decap(CodecError),
    #[error("a policy for prefix {0} is already installed")]
    DuplicatePolicy(Ipv6Prefix),
    #[error("bad prefix {0:?}: {1}")]
    BadPrefix(String, String),
    #[error(
        "time moved backwards across a block boundary: seen block {seen_block}, now block {got_block}"
    )]
    ClockRegression { seen_block: u64, got_block: u64 },
    #[error("timestamp predates the schedule base")]
    TimeBeforeBase,
}

/// An IPv6 prefix used for traffic classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ipv6Prefix {
    addr: Ipv6Addr,
    len: u8,
}

impl Ipv6Prefix {
    pub fn new(addr: Ipv6Addr, len: u8) -> Result<Ipv6Prefix, DataplaneError> {
        if len > 128 {
            return Err(DataplaneError::BadPrefix(
                format!("{addr}/{len}"),
                "prefix length exceeds 128".to_string(),
            ));
        }
        let canonical = mask(addr, len);
        if canonical != addr {
            return Err(DataplaneError::BadPrefix(
                format!("{addr}/{len}"),
                "host bits are set".to_string(),
            ));
        }
        Ok(Ipv6Prefix { addr, len })
    }

    /// Exact-address prefix (/128).
    pub fn host(addr: Ipv6Addr) -> Ipv6Prefix {
        Ipv6Prefix { addr, len: 128 }
    }

    pub fn addr(&self) -> Ipv6Addr {
        self.addr
    }

    pub fn len(&self) -> u8 {
        self.len
    }

    pub fn contains(&self, addr: Ipv6Addr) -> bool {
        mask(addr, self.len) == self.addr
    }
}

fn mask(addr: Ipv6Addr, len: u8) -> Ipv6Addr {
    if len == 0 {
        return Ipv6Addr::UNSPECIFIED;
    }
    let bits = u128::from_be_bytes(addr.octets());
    let masked = bits & (u128::MAX << (128 - u32::from(len)));
    Ipv6Addr::from(masked.to_be_bytes())
}

impl fmt::Display for Ipv6Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr, self.len)
    }
}

impl FromStr for Ipv6Prefix {
    type Err = DataplaneError;

    /// Parses `"addr/len"`; a bare address means a /128.
    fn from_str(s: &str) -> Result<Ipv6Prefix, DataplaneError> {
        let bad = |msg: &str| DataplaneError::BadPrefix(s.to_string(), msg.to_string());
        match s.split_once('/') {
            None => {
                let addr: Ipv6Addr = s.parse().map_err(|_| bad("not an IPv6 address"))?;
                Ok(Ipv6Prefix::host(addr))
            }
            Some((addr, len)) => {
                let addr: Ipv6Addr = addr.parse().map_err(|_| bad("not an IPv6 address"))?;
                let len: u8 = len.parse().map_err(|_| bad("not a prefix length"))?;
                Ipv6Prefix::new(addr, len)
            }
        }
    }
}

impl Serialize for Ipv6Prefix {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ipv6Prefix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Ipv6Prefix, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Steering rule: traffic to `prefix` is encapsulated along `sid_list`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SrPolicy {
    pub prefix: Ipv6Prefix,
    pub sid_list: SidList,
    /// Whether flows hitting this policy are loss-monitored.
    pub monitored: bool,
}

/// Longest-prefix-match table of steering policies.
///
/// Host routes (/128, the common case when each monitored flow gets its
/// own destination) sit in a hash map; shorter prefixes are scanned
/// longest-first, so lookup cost does not grow with the number of host
/// routes.
#[derive(Default)]
pub struct SrPolicyTable {
    policies: Vec<SrPolicy>,
    /// Index into `policies` for /128 entries.
    exact: HashMap<Ipv6Addr, usize>,
    /// Indices of non-/128 entries, sorted by descending prefix length.
    scan: Vec<usize>,
}

impl SrPolicyTable {
    pub fn new() -> SrPolicyTable {
        SrPolicyTable::default()
    }

    pub fn insert(&mut self, policy: SrPolicy) -> Result<(), DataplaneError> {
        let duplicate = self.policies.iter().any(|p| p.prefix == policy.prefix);
        if duplicate {
            return Err(DataplaneError::DuplicatePolicy(policy.prefix));
        }
        let idx = self.policies.len();
        let prefix = policy.prefix;
        self.policies.push(policy);
        if prefix.len == 128 {
            self.exact.insert(prefix.addr, idx);
        } else {
            self.scan.push(idx);
            let policies = &self.policies;
            self.scan
                .sort_by(|&a, &b| policies[b].prefix.len.cmp(&policies[a].prefix.len));
        }
        Ok(())
    }

    pub fn lookup(&self, dst: Ipv6Addr) -> Option<&SrPolicy> {
        if let Some(&idx) = self.exact.get(&dst) {
            return Some(&self.policies[idx]);
        }
        self.scan
            .iter()
            .map(|&idx| &self.policies[idx])
            .find(|policy| policy.prefix.contains(dst))
    }

    pub fn iter(&self) -> impl Iterator<Item = &SrPolicy> {
        self.policies.iter()
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }
}

/// When a new block begins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlipEvent {
    /// Start of the new block.
    pub at: Timestamp,
    /// Index of the new block.
    pub block_index: u64,
    /// Color of the new block.
    pub color: Color,
}

/// Where on the block timeline a timestamp falls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPosition {
    pub index: u64,
    pub color: Color,
}

/// The alternating-color clock.
///
/// Time from `base` is divided into consecutive blocks of `period`
/// nanoseconds; block `k` spans `[base + k*period, base + (k+1)*period)`,
/// half-open, so a packet arriving exactly on a flip instant belongs to
/// the *new* block. Block 0 has `start_color` and colors alternate from
/// there.
///
/// The schedule is an arithmetic function of the timestamp plus one atomic
/// high-water mark, so concurrent observers agree on block boundaries
/// without locking. The high-water mark exists to detect clocks running
/// backwards: observing a timestamp from an *earlier block* than one
/// already observed is reported as an error, since acting on it would
/// re-color the older block's traffic. Regression within the current
/// block is harmless and allowed.
pub struct ColoringSchedule {
    base: Timestamp,
    period: u64,
    start_color: Color,
    highest_block: AtomicU64,
}

impl ColoringSchedule {
    /// `period` is in nanoseconds and must be non-zero.
    pub fn new(base: Timestamp, period: u64, start_color: Color) -> ColoringSchedule {
        assert!(period > 0, "marking period must be non-zero");
        ColoringSchedule { base, period, start_color, highest_block: AtomicU64::new(0) }
    }

    pub fn base(&self) -> Timestamp {
        self.base
    }

    pub fn period(&self) -> u64 {
        self.period
    }

    pub fn start_color(&self) -> Color {
        self.start_color
    }

    pub fn color_of_block(&self, index: u64) -> Color {
        self.start_color.for_block(index)
    }

    /// Start instant of block `index`.
    pub fn block_start(&self, index: u64) -> Timestamp {
        self.base + index * self.period
    }

    /// Maps a timestamp to its block, advancing the high-water mark.
    pub fn observe(&self, now: Timestamp) -> Result<BlockPosition, DataplaneError> {
        if now < self.base {
            return Err(DataplaneError::TimeBeforeBase);
        }
        let index = now.since(self.base) / self.period;
        let seen = self.highest_block.fetch_max(index, Ordering::AcqRel);
        if index < seen {
            return Err(DataplaneError::ClockRegression { seen_block: seen, got_block: index });
        }
        Ok(BlockPosition { index, color: self.color_of_block(index) })
    }

    /// Like [`observe`](Self::observe), but reports every block boundary
    /// crossed since the previous call, oldest first.
    pub fn tick(&self, now: Timestamp) -> Result<Vec<FlipEvent>, DataplaneError> {
        if now < self.base {
            return Err(DataplaneError::TimeBeforeBase);
        }
        let index = now.since(self.base) / self.period;
        let seen = self.highest_block.fetch_max(index, Ordering::AcqRel);
        if index < seen {
            return Err(DataplaneError::ClockRegression { seen_block: seen, got_block: index });
        }
        Ok((seen + 1..=index)
            .map(|k| FlipEvent {
                at: self.block_start(k),
                block_index: k,
                color: self.color_of_block(k),
            })
            .collect())
    }

    /// Highest block index observed so far.
    pub fn current_block(&self) -> u64 {
        self.highest_block.load(Ordering::Acquire)
    }
}

/// What the ingress did with a packet.
#[derive(Debug, PartialEq, Eq)]
pub enum IngressVerdict {
    /// No policy matched; the packet passes through untouched.
    Forwarded,
    /// A policy matched and the packet was wrapped.
    Encapsulated {
        packet: PacketBuffer,
        /// Color stamped on the packet, if any.
        color: Option<Color>,
        /// Whether a per-flow counter was incremented.
        counted: bool,
    },
}

/// The encapsulating node: classifies, wraps, colors, counts.
pub struct IngressNode {
    src_addr: Ipv6Addr,
    policies: SrPolicyTable,
    engine: Box<dyn MatcherEngine>,
    schedule: ColoringSchedule,
    monitoring_enabled: bool,
    coloring_enabled: bool,
}

impl IngressNode {
    pub fn new(
        src_addr: Ipv6Addr,
        policies: SrPolicyTable,
        engine: Box<dyn MatcherEngine>,
        schedule: ColoringSchedule,
    ) -> IngressNode {
        IngressNode {
            src_addr,
            policies,
            engine,
            schedule,
            monitoring_enabled: true,
            coloring_enabled: true,
        }
    }

    /// Master switch for the measurement work (counting and coloring).
    /// With monitoring off the node is a plain encapsulator — the baseline
    /// the benchmarks compare against.
    pub fn set_monitoring(&mut self, enabled: bool) {
        self.monitoring_enabled = enabled;
    }

    /// Controls only the DS-field write; counting continues. Separating
    /// the two isolates the cost of the marking step itself.
    pub fn set_coloring(&mut self, enabled: bool) {
        self.coloring_enabled = enabled;
    }

    /// Registers every monitored policy's SID list with the engine, so a
    /// freshly built node counts from zero on all monitored flows.
    pub fn register_flows(&mut self) -> Result<(), crate::matcher::MatcherError> {
        // Collect first: policies and engine are both borrowed from self.
        let flows: Vec<SidList> = self
            .policies
            .iter()
            .filter(|p| p.monitored)
            .map(|p| p.sid_list.clone())
            .collect();
        for flow in flows {
            match self.engine.add_flow(flow) {
                Ok(()) | Err(crate::matcher::MatcherError::DuplicateFlow) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    pub fn engine(&self) -> &dyn MatcherEngine {
        self.engine.as_ref()
    }

    pub fn engine_mut(&mut self) -> &mut dyn MatcherEngine {
        &mut *self.engine
    }

    pub fn schedule(&self) -> &ColoringSchedule {
        &self.schedule
    }

    pub fn policies(&self) -> &SrPolicyTable {
        &self.policies
    }

    /// Runs one inner packet through classify → encapsulate → color →
    /// count.
    ///
    /// Unmonitored policies produce an unmarked encapsulation and touch no
    /// counter. For monitored policies the packet is counted under the
    /// block color current at `now` — whether or not the DS write itself
    /// is enabled — so the transmit counters always describe what the
    /// ingress believes it sent.
    pub fn process(&self, inner: &[u8], now: Timestamp) -> Result<IngressVerdict, DataplaneError> {
        let header = Ipv6Header::decode(inner).map_err(DataplaneError::MalformedInner)?;
        let Some(policy) = self.policies.lookup(header.dst) else {
            return Ok(IngressVerdict::Forwarded);
        };
        let mut packet = packet::encapsulate(
            inner,
            policy.sid_list.segments(),
            self.src_addr,
            PROTO_IPV6,
        )
        .map_err(DataplaneError::Encap)?;
        if !(self.monitoring_enabled && policy.monitored) {
            return Ok(IngressVerdict::Encapsulated { packet, color: None, counted: false });
        }
        let position = self.schedule.observe(now)?;
        let stamped = if self.coloring_enabled {
            packet.set_color(position.color);
            Some(position.color)
        } else {
            None
        };
        let counted = self.engine.match_and_count(policy.sid_list.as_ref(), position.color);
        Ok(IngressVerdict::Encapsulated { packet, color: stamped, counted })
    }
}

/// What the egress did with a packet.
#[derive(Debug, PartialEq, Eq)]
pub enum EgressVerdict {
    /// Not an SRv6 encapsulation; passes through untouched.
    Forwarded,
    /// Unwrapped. `counted` is false for unmarked packets and for marked
    /// packets whose SID list matched no registered flow.
    Delivered { inner: Vec<u8>, inner_proto: u8, color: Option<Color>, counted: bool },
}

/// The decapsulating node: detects the mark, counts, unwraps.
pub struct EgressNode {
    engine: Box<dyn MatcherEngine>,
    monitoring_enabled: bool,
    scratch: Vec<Ipv6Addr>,
}

impl EgressNode {
    pub fn new(engine: Box<dyn MatcherEngine>) -> EgressNode {
        EgressNode { engine, monitoring_enabled: true, scratch: Vec::new() }
    }

    pub fn set_monitoring(&mut self, enabled: bool) {
        self.monitoring_enabled = enabled;
    }

    pub fn engine(&self) -> &dyn MatcherEngine {
        self.engine.as_ref()
    }

    pub fn engine_mut(&mut self) -> &mut dyn MatcherEngine {
        &mut *self.engine
    }

    pub fn add_flow(&mut self, flow: SidList) -> Result<(), crate::matcher::MatcherError> {
        self.engine.add_flow(flow)
    }

    /// Runs one received packet through detect → count → decapsulate.
    ///
    /// Counting happens strictly before decapsulation and uses the color
    /// bits carried by the packet — never a local clock. Unmarked packets
    /// skip the matcher entirely; monitoring adds zero work to traffic
    /// that isn't marked. If decapsulation then fails (for instance the
    /// packet never reached its final segment), the count already
    /// happened: the packet did arrive.
    pub fn process(&mut self, packet: &PacketBuffer) -> Result<EgressVerdict, DataplaneError> {
        if !packet.has_srh() {
            return Ok(EgressVerdict::Forwarded);
        }
        let color = packet.color();
        let mut counted = false;
        if self.monitoring_enabled {
            if let Some(color) = color {
                self.scratch.clear();
                packet.extract_sids_into(&mut self.scratch);
                counted = self.engine.match_and_count(&self.scratch, color);
            }
        }
        let (inner, inner_proto) = packet::decapsulate(packet).map_err(DataplaneError::Decap)?;
        Ok(EgressVerdict::Delivered { inner, inner_proto, color, counted })
    }
}
