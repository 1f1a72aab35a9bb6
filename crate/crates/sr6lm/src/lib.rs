//! Per-flow packet loss monitoring for SRv6 paths.
//!
//! The crate implements the alternate-marking measurement method on top of
//! Segment Routing over IPv6. Traffic entering the network at an ingress
//! node is encapsulated with a Segment Routing Header, and packets of
//! monitored flows are "colored" by toggling a bit in the outer Traffic
//! Class field. The color alternates between two values on a fixed period,
//! which splits the stream into consecutive blocks. Both ends of the path
//! count packets per (flow, color); once a block's color goes inactive its
//! counters stop moving, so the difference between the ingress and egress
//! counts for that block is the exact number of packets lost in it.
//!
//! Module map:
//!
//! * [`packet`] — IPv6 / SRH / UDP wire codec, encapsulation and the
//!   color-marking bit operations.
//! * [`matcher`] — per-flow counting engines keyed by full SID lists, one
//!   with linear-scan semantics and one hash-indexed.
//! * [`dataplane`] — the ingress (classify, encapsulate, color, count) and
//!   egress (detect, count, decapsulate) pipelines plus the coloring
//!   schedule that drives block rotation.
//! * [`lm`] — the query/response loss-measurement protocol spoken between
//!   the sender (ingress side) and reflector (egress side).
//! * [`simnet`] — a deterministic discrete-event simulator wiring the two
//!   pipelines together over a lossy link, with per-block ground truth.
//! * [`bench`] — in-process throughput measurement of the pipelines and a
//!   binary search for the partial drop rate threshold.
//! * [`golden`] — loader for the frozen wire-format vectors under
//!   `golden/`.

pub mod bench;
pub mod dataplane;
pub mod golden;
pub mod lm;
pub mod matcher;
pub mod packet;
pub mod simnet;
pub mod time;

pub use matcher::{EngineKind, MatcherEngine, SidList};
pub use packet::Color;
pub use time::Timestamp;
