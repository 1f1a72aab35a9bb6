//! Loss-measurement message codec.
//!
//! Both message kinds share a 4-byte header followed by a fixed body, all
//! fields in network byte order:
//!
//! ```text
//!  0                   1                   2                   3
//!  0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! |  Type (1|2)   |     Flags     |           Reserved (0)        |
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//!
//! query body (type 1, 16 bytes total):
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! |                           Sender Seq                          |
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! |                         Sender Counter                        |
//! |                            (64 bit)                           |
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//!
//! response body (type 2, 40 bytes total):
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! |                          Receiver Seq                         |
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! |                        Receiver Counter                       |
//! |                            (64 bit)                           |
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! |                        Transmit Counter                       |
//! |                            (64 bit)                           |
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! |                                                               |
//! |                  Echoed Query (16 bytes verbatim)             |
//! |                                                               |
//! |                                                               |
//! +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
//! ```
//!
//! Flags bit 0 names the block the message is about: 0 for color A, 1 for
//! color B. Flags bit 1 is only meaningful on responses and reports that
//! the reflector does not know the flow the query arrived on. Remaining
//! flag bits and the reserved field must be zero.
//!
//! A response ends with the query it answers, byte for byte. The echo is
//! what lets the sender pair a response with one specific outstanding
//! query (and retry attempt) without any session identifier on the wire.

use thiserror::Error;

use crate::packet::Color;

/// Encoded size of a query.
pub const QUERY_LEN: usize = 16;
/// Encoded size of a response.
pub const RESPONSE_LEN: usize = 40;

pub const MSG_QUERY: u8 = 1;
pub const MSG_RESPONSE: u8 = 2;

const FLAG_BLOCK_B: u8 = 0x01;
const FLAG_UNKNOWN_FLOW: u8 = 0x02;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("message is {have} bytes, expected {need}")]
    WrongLength { need: usize, have: usize },
    #[error("unknown message type {0}")]
    BadType(u8),
    #[error("flags {0:#04x} carry unassigned bits")]
    BadFlags(u8),
    #[error("reserved field is {0:#06x}, must be zero")]
    NonZeroReserved(u16),
}

fn color_flag(color: Color) -> u8 {
    match color {
        Color::A => 0,
        Color::B => FLAG_BLOCK_B,
    }
}

fn flag_color(flags: u8) -> Color {
    if flags & FLAG_BLOCK_B == 0 {
        Color::A
    } else {
        Color::B
    }
}

fn check_header(bytes: &[u8], kind: u8, need: usize, flag_mask: u8) -> Result<(), WireError> {
    if bytes.len() != need {
        return Err(WireError::WrongLength { need, have: bytes.len() });
    }
    if bytes[0] != kind {
        return Err(WireError::BadType(bytes[0]));
    }
    if bytes[1] & !flag_mask != 0 {
        return Err(WireError::BadFlags(bytes[1]));
    }
    let reserved = u16::from_be_bytes([bytes[2], bytes[3]]);
    if reserved != 0 {
        return Err(WireError::NonZeroReserved(reserved));
    }
    Ok(())
}

/// Asks the reflector for its receive count of one closed block.
///
/// `sender_counter` is the sender's transmit count *for that block alone*,
/// not a running cumulative value — carrying the per-block delta means a
/// lost or reordered earlier exchange can never skew a later one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmQuery {
    /// Color of the block being asked about (the inactive one).
    pub block: Color,
    /// Monotonic per-session sequence number; each transmission, retries
    /// included, consumes a fresh value.
    pub sender_seq: u32,
    /// Packets the sender transmitted in the queried block.
    pub sender_counter: u64,
}

impl LmQuery {
    pub fn encode(&self) -> [u8; QUERY_LEN] {
        let mut out = [0u8; QUERY_LEN];
        out[0] = MSG_QUERY;
        out[1] = color_flag(self.block);
        out[4..8].copy_from_slice(&self.sender_seq.to_be_bytes());
        out[8..16].copy_from_slice(&self.sender_counter.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<LmQuery, WireError> {
        check_header(bytes, MSG_QUERY, QUERY_LEN, FLAG_BLOCK_B)?;
        Ok(LmQuery {
            block: flag_color(bytes[1]),
            sender_seq: u32::from_be_bytes(bytes[4..8].try_into().unwrap()),
            sender_counter: u64::from_be_bytes(bytes[8..16].try_into().unwrap()),
        })
    }
}

/// Answers a query with the reflector's receive count for the same block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmResponse {
    /// Color of the block, mirrored from the query.
    pub block: Color,
    /// Set when the reflector had no session for the flow the query
    /// arrived on; the counters are meaningless in that case.
    pub unknown_flow: bool,
    /// Monotonic per-session sequence number of the reflector. A reset
    /// here tells the sender the reflector restarted.
    pub receiver_seq: u32,
    /// Packets the reflector received in the queried block.
    pub receiver_counter: u64,
    /// Packets the reflector transmitted toward the sender in the queried
    /// block, for bidirectional measurement. Zero in unidirectional mode.
    pub transmit_counter: u64,
    /// The answered query, byte for byte.
    pub echoed_query: [u8; QUERY_LEN],
}

impl LmResponse {
    pub fn encode(&self) -> [u8; RESPONSE_LEN] {
        let mut out = [0u8; RESPONSE_LEN];
        out[0] = MSG_RESPONSE;
        out[1] = color_flag(self.block)
            | if self.unknown_flow { FLAG_UNKNOWN_FLOW } else { 0 };
        out[4..8].copy_from_slice(&self.receiver_seq.to_be_bytes());
        out[8..16].copy_from_slice(&self.receiver_counter.to_be_bytes());
        out[16..24].copy_from_slice(&self.transmit_counter.to_be_bytes());
        out[24..40].copy_from_slice(&self.echoed_query);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<LmResponse, WireError> {
        check_header(bytes, MSG_RESPONSE, RESPONSE_LEN, FLAG_BLOCK_B | FLAG_UNKNOWN_FLOW)?;
        Ok(LmResponse {
            block: flag_color(bytes[1]),
            unknown_flow: bytes[1] & FLAG_UNKNOWN_FLOW != 0,
            receiver_seq: u32::from_be_bytes(bytes[4..8].try_into().unwrap()),
            receiver_counter: u64::from_be_bytes(bytes[8..16].try_into().unwrap()),
            transmit_counter: u64::from_be_bytes(bytes[16..24].try_into().unwrap()),
            echoed_query: bytes[24..40].try_into().unwrap(),
        })
    }

    /// The error response for a query from an unrecognized flow.
    pub fn for_unknown_flow(query: &LmQuery, receiver_seq: u32) -> LmResponse {
        LmResponse {
            block: query.block,
            unknown_flow: true,
            receiver_seq,
            receiver_counter: 0,
            transmit_counter: 0,
            echoed_query: query.encode(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hex(bytes: &[u8]) -> String {
        bytes.iter().map(|b| format!("{b:02x}")).collect()
    }

    #[test]
    fn query_encoding_is_frozen() {
        let q = LmQuery { block: Color::A, sender_seq: 7, sender_counter: 100 };
        assert_eq!(hex(&q.encode()), "01000000000000070000000000000064");
        let q = LmQuery { block: Color::B, sender_seq: 8, sender_counter: 250 };
        assert_eq!(hex(&q.encode()), "010100000000000800000000000000fa");
    }

    #[test]
    fn response_encoding_is_frozen() {
        let q = LmQuery { block: Color::A, sender_seq: 7, sender_counter: 100 };
        let r = LmResponse {
            block: Color::A,
            unknown_flow: false,
            receiver_seq: 3,
            receiver_counter: 97,
            transmit_counter: 0,
            echoed_query: q.encode(),
        };
        assert_eq!(
            hex(&r.encode()),
            "02000000000000030000000000000061000000000000000001000000000000070000000000000064"
        );
    }

    #[test]
    fn round_trips() {
        let q = LmQuery { block: Color::B, sender_seq: u32::MAX, sender_counter: u64::MAX };
        assert_eq!(LmQuery::decode(&q.encode()).unwrap(), q);
        let r = LmResponse {
            block: Color::B,
            unknown_flow: true,
            receiver_seq: 42,
            receiver_counter: 7,
            transmit_counter: 9,
            echoed_query: q.encode(),
        };
        assert_eq!(LmResponse::decode(&r.encode()).unwrap(), r);
    }

    #[test]
    fn rejects_malformed_messages() {
        let q = LmQuery { block: Color::A, sender_seq: 1, sender_counter: 2 };
        let bytes = q.encode();
        assert_eq!(
            LmQuery::decode(&bytes[..15]),
            Err(WireError::WrongLength { need: 16, have: 15 })
        );
        let mut long = bytes.to_vec();
        long.push(0);
        assert_eq!(LmQuery::decode(&long), Err(WireError::WrongLength { need: 16, have: 17 }));

        let mut wrong = bytes;
        wrong[0] = 9;
        assert_eq!(LmQuery::decode(&wrong), Err(WireError::BadType(9)));

        let mut wrong = q.encode();
        wrong[1] = 0x04;
        assert_eq!(LmQuery::decode(&wrong), Err(WireError::BadFlags(0x04)));
        // The unknown-flow bit is response-only; a query must not carry it.
        let mut wrong = q.encode();
        wrong[1] = FLAG_UNKNOWN_FLOW;
        assert_eq!(LmQuery::decode(&wrong), Err(WireError::BadFlags(0x02)));

        let mut wrong = q.encode();
        wrong[3] = 1;
        assert_eq!(LmQuery::decode(&wrong), Err(WireError::NonZeroReserved(1)));

        // A query is not a response and vice versa.
        assert!(matches!(LmResponse::decode(&q.encode()), Err(WireError::WrongLength { .. })));
    }

    #[test]
    fn unknown_flow_response_echoes_the_query() {
        let q = LmQuery { block: Color::B, sender_seq: 5, sender_counter: 11 };
        let r = LmResponse::for_unknown_flow(&q, 1);
        assert!(r.unknown_flow);
        assert_eq!(r.block, Color::B);
        assert_eq!(r.receiver_counter, 0);
        assert_eq!(LmQuery::decode(&r.echoed_query).unwrap(), q);
    }
}
