//! The loss-measurement protocol.
//!
//! Coloring turns the packet stream into blocks whose counters freeze
//! shortly after each flip; this module is the out-of-band conversation
//! that reads those frozen counters. Per monitored flow and per block, the
//! sender (at the ingress) tells the reflector (at the egress) how many
//! packets it put into the block, and the reflector answers with how many
//! came out. Their difference is the block's packet loss — an exact
//! count, not an estimate, as long as both sides read their counters only
//! once the block has safely closed.
//!
//! [`wire`] defines the two message formats; [`session`] holds the state
//! machines that drive queries, retries, response validation and the
//! bookkeeping that turns counter read-outs into per-block results.

pub mod session;
pub mod wire;

pub use session::{
    GapReason, GapRecord, LmConfig, LmError, LossRecord, PollOutcome, Reflector,
    ReflectorSession, Sender, SenderSession,
};
pub use wire::{LmQuery, LmResponse, WireError, MSG_QUERY, MSG_RESPONSE, QUERY_LEN, RESPONSE_LEN};
