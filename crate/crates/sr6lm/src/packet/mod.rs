//! Wire codec: IPv6, Segment Routing Header, UDP, and the marking bits.
//!
//! Everything the pipelines put on the wire or pick off it goes through
//! this module. Two representations are provided:
//!
//! * [`PacketView`] — fully decoded headers plus payload, for construction
//!   and inspection.
//! * [`PacketBuffer`] — validated raw bytes with in-place accessors for the
//!   fields the hot path touches (traffic class bits, segment list), so
//!   per-packet work never re-encodes the whole packet.
//!
//! # Marking
//!
//! Monitored packets carry their block color in the two least significant
//! bits of the outer Traffic Class (the DS field):
//!
//! ```text
//!   bit 0 (0x01): color — 0 for block A, 1 for block B
//!   bit 1 (0x02): set when the packet belongs to a monitored flow
//! ```
//!
//! The remaining six bits are left untouched so coloring composes with
//! whatever DSCP policy the traffic already carries. A packet with bit 1
//! clear is unmonitored regardless of bit 0.

pub mod ipv6;
pub mod srh;
pub mod udp;

use std::fmt;
use std::net::Ipv6Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ipv6::{Ipv6Header, PROTO_IPV6, PROTO_NO_NEXT, PROTO_ROUTING, PROTO_UDP};
pub use srh::{SegmentRoutingHeader, MAX_SEGMENTS};

/// Traffic Class bit carrying the block color.
pub const TC_COLOR_BIT: u8 = 0x01;
/// Traffic Class bit flagging the packet as monitored.
pub const TC_MONITORED_BIT: u8 = 0x02;
/// Both marking bits.
pub const TC_MARKING_MASK: u8 = TC_COLOR_BIT | TC_MONITORED_BIT;

/// The two alternating block colors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    A,
    B,
}

impl Color {
    pub fn opposite(self) -> Color {
        match self {
            Color::A => Color::B,
            Color::B => Color::A,
        }
    }

    /// The color of the `index`-th block when block 0 has color `self`.
    pub fn for_block(self, index: u64) -> Color {
        if index % 2 == 0 {
            self
        } else {
            self.opposite()
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Color::A => "A",
            Color::B => "B",
        })
    }
}

impl FromStr for Color {
    type Err = String;

    fn from_str(s: &str) -> Result<Color, String> {
        match s {
            "A" | "a" => Ok(Color::A),
            "B" | "b" => Ok(Color::B),
            other => Err(format!("unknown color {other:?}, expected \"A\" or \"B\"")),
        }
    }
}

/// Applies a color to a Traffic Class value, preserving the upper six bits.
pub fn mark_traffic_class(tc: u8, color: Color) -> u8 {
    let color_bit = match color {
        Color::A => 0,
        Color::B => TC_COLOR_BIT,
    };
    (tc & !TC_MARKING_MASK) | TC_MONITORED_BIT | color_bit
}

/// Reads the marking from a Traffic Class value.
///
/// Returns `None` for unmonitored packets (bit 1 clear); the color bit is
/// meaningless on those and is not inspected.
pub fn color_of_traffic_class(tc: u8) -> Option<Color> {
    if tc & TC_MONITORED_BIT == 0 {
        None
    } else if tc & TC_COLOR_BIT == 0 {
        Some(Color::A)
    } else {
        Some(Color::B)
    }
}

/// Errors raised while encoding or decoding packets.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("truncated {what}: need {need} bytes, have {have}")]
    Truncated { what: &'static str, need: usize, have: usize },
    #[error("IP version {0} is not 6")]
    BadVersion(u8),
    #[error("flow label {0:#x} exceeds 20 bits")]
    FlowLabelOverflow(u32),
    #[error("routing type {0} is not an SRv6 segment routing header")]
    BadRoutingType(u8),
    #[error("SRH length fields disagree: hdr_ext_len {hdr_ext_len}, last_entry {last_entry}")]
    SegmentCountMismatch { hdr_ext_len: u8, last_entry: u8 },
    #[error("segments_left {segments_left} exceeds last_entry {last_entry}")]
    SegmentsLeftOutOfRange { segments_left: u8, last_entry: u8 },
    #[error("segment list is empty")]
    EmptySegmentList,
    #[error("segment list has {0} entries, more than the {max} supported", max = MAX_SEGMENTS)]
    TooManySegments(usize),
    #[error("payload length field says {field} bytes but {actual} follow the header")]
    PayloadLengthMismatch { field: usize, actual: usize },
    #[error("packet is not an SRv6 encapsulation")]
    NotEncapsulated,
    #[error("segments_left is {0}, packet has not reached the final segment")]
    NotAtFinalSegment(u8),
    #[error("encapsulation carries no inner packet")]
    NoInnerPacket,
}

/// A fully decoded packet: fixed IPv6 header, optional SRH, opaque payload.
///
/// Extension headers other than the SRH are not modelled; whatever follows
/// the last recognized header is `payload`. For an SRv6 encapsulation the
/// payload holds the complete inner packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketView {
    pub ipv6: Ipv6Header,
    pub srh: Option<SegmentRoutingHeader>,
    pub payload: Vec<u8>,
}

impl PacketView {
    /// Protocol of the payload: the SRH's next header when present,
    /// otherwise the IPv6 next header.
    pub fn payload_protocol(&self) -> u8 {
        match &self.srh {
            Some(srh) => srh.next_header,
            None => self.ipv6.next_header,
        }
    }

    pub fn color(&self) -> Option<Color> {
        color_of_traffic_class(self.ipv6.traffic_class)
    }
}

/// Decodes a packet, validating every length field along the way.
pub fn decode_packet(bytes: &[u8]) -> Result<PacketView, CodecError> {
    let header = Ipv6Header::decode(bytes)?;
    let actual = bytes.len() - ipv6::HEADER_LEN;
    let field = usize::from(header.payload_length);
    if field != actual {
        return Err(CodecError::PayloadLengthMismatch { field, actual });
    }
    let mut rest = &bytes[ipv6::HEADER_LEN..];
    let srh = if header.next_header == PROTO_ROUTING {
        let srh = SegmentRoutingHeader::decode(rest)?;
        rest = &rest[srh.wire_len()..];
        Some(srh)
    } else {
        None
    };
    Ok(PacketView { ipv6: header, srh, payload: rest.to_vec() })
}

/// Encodes a packet. The view's `payload_length` must agree with the actual
/// SRH-plus-payload size; a mismatch is reported rather than papered over.
pub fn encode_packet(view: &PacketView) -> Result<Vec<u8>, CodecError> {
    let srh_len = view.srh.as_ref().map_or(0, SegmentRoutingHeader::wire_len);
    let actual = srh_len + view.payload.len();
    if usize::from(view.ipv6.payload_length) != actual {
        return Err(CodecError::PayloadLengthMismatch {
            field: usize::from(view.ipv6.payload_length),
            actual,
        });
    }
    let mut out = Vec::with_capacity(ipv6::HEADER_LEN + actual);
    view.ipv6.encode_into(&mut out)?;
    if let Some(srh) = &view.srh {
        srh.encode_into(&mut out)?;
    }
    out.extend_from_slice(&view.payload);
    Ok(out)
}

/// A validated packet held as raw bytes.
///
/// Construction proves the headers parse and the length fields agree, so
/// the accessors can index into the buffer without re-checking bounds.
/// This is the representation the pipelines pass around: reading the
/// marking bits or the segment list touches a handful of bytes instead of
/// materializing a [`PacketView`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketBuffer {
    bytes: Vec<u8>,
    /// Number of SRH segments, or 0 when there is no SRH.
    seg_count: usize,
}

impl PacketBuffer {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<PacketBuffer, CodecError> {
        let view = decode_packet(&bytes)?;
        let seg_count = view.srh.as_ref().map_or(0, |s| s.segments.len());
        Ok(PacketBuffer { bytes, seg_count })
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires at least a full IPv6 header
    }

    pub fn to_view(&self) -> PacketView {
        decode_packet(&self.bytes).expect("buffer was validated on construction")
    }

    pub fn traffic_class(&self) -> u8 {
        (self.bytes[0] << 4) | (self.bytes[1] >> 4)
    }

    /// Stamps the marking bits. Traffic Class bits 0 and 1 both live in the
    /// second byte of the header (bits 4 and 5), so marking is a one-byte
    /// read-modify-write.
    pub fn set_color(&mut self, color: Color) {
        let marked = mark_traffic_class(self.traffic_class(), color);
        self.bytes[1] = (self.bytes[1] & 0x0F) | (marked << 4);
    }

    pub fn color(&self) -> Option<Color> {
        color_of_traffic_class(self.traffic_class())
    }

    pub fn src(&self) -> Ipv6Addr {
        ipv6::addr_at(&self.bytes, 8)
    }

    pub fn dst(&self) -> Ipv6Addr {
        ipv6::addr_at(&self.bytes, 24)
    }

    pub fn next_header(&self) -> u8 {
        self.bytes[6]
    }

    pub fn has_srh(&self) -> bool {
        self.seg_count > 0
    }

    pub fn segments_left(&self) -> Option<u8> {
        self.has_srh().then(|| self.bytes[ipv6::HEADER_LEN + 3])
    }

    /// Protocol carried inside the encapsulation (SRH next header), or the
    /// plain next header if there is no SRH.
    pub fn inner_protocol(&self) -> u8 {
        if self.has_srh() {
            self.bytes[ipv6::HEADER_LEN]
        } else {
            self.next_header()
        }
    }

    /// Appends the segment list in path order (first hop first) to `out`.
    ///
    /// Returns `false` without touching `out` when the packet has no SRH.
    /// The caller keeps the scratch vector, so steady-state extraction does
    /// not allocate.
    pub fn extract_sids_into(&self, out: &mut Vec<Ipv6Addr>) -> bool {
        if !self.has_srh() {
            return false;
        }
        let base = ipv6::HEADER_LEN + srh::FIXED_LEN;
        out.reserve(self.seg_count);
        // Wire order stores the final segment first; walk it backwards to
        // recover path order.
        for i in (0..self.seg_count).rev() {
            out.push(ipv6::addr_at(&self.bytes, base + i * srh::SEGMENT_LEN));
        }
        true
    }

    /// Fast-forwards the packet to its final segment: Segments Left drops
    /// to zero and the destination becomes the last SID of the path.
    ///
    /// This stands in for the intermediate segment endpoints when a
    /// simulated or loopback topology connects ingress and egress directly.
    pub fn advance_to_last_segment(&mut self) {
        if !self.has_srh() {
            return;
        }
        self.bytes[ipv6::HEADER_LEN + 3] = 0;
        let final_seg = ipv6::HEADER_LEN + srh::FIXED_LEN; // wire slot 0
        let (head, tail) = self.bytes.split_at_mut(final_seg);
        head[24..40].copy_from_slice(&tail[..srh::SEGMENT_LEN]);
    }
}

/// Wraps an inner packet in an outer IPv6 header plus SRH along `sids`.
///
/// `sids` is the path order: `sids[0]` is the first segment endpoint and
/// becomes the outer destination; the SRH stores the list reversed with
/// `segments_left = len - 1`. An SRH is emitted even for single-segment
/// paths so that every monitored packet exposes its full path to the
/// egress matcher. The outer Traffic Class starts unmarked; coloring is a
/// separate, later step.
pub fn encapsulate(
    inner: &[u8],
    sids: &[Ipv6Addr],
    src: Ipv6Addr,
    inner_proto: u8,
) -> Result<PacketBuffer, CodecError> {
    if inner.is_empty() {
        return Err(CodecError::NoInnerPacket);
    }
    if sids.is_empty() {
        return Err(CodecError::EmptySegmentList);
    }
    if sids.len() > MAX_SEGMENTS {
        return Err(CodecError::TooManySegments(sids.len()));
    }
    let srh = SegmentRoutingHeader {
        next_header: inner_proto,
        segments_left: (sids.len() - 1) as u8,
        flags: 0,
        tag: 0,
        segments: sids.iter().rev().copied().collect(),
    };
    let header = Ipv6Header {
        traffic_class: 0,
        flow_label: 0,
        payload_length: (srh.wire_len() + inner.len()) as u16,
        next_header: PROTO_ROUTING,
        hop_limit: 64,
        src,
        dst: sids[0],
    };
    let mut bytes = Vec::with_capacity(ipv6::HEADER_LEN + srh.wire_len() + inner.len());
    header.encode_into(&mut bytes)?;
    srh.encode_into(&mut bytes)?;
    bytes.extend_from_slice(inner);
    Ok(PacketBuffer { bytes, seg_count: sids.len() })
}

/// Strips the outer header and SRH, returning the inner packet bytes and
/// the protocol they carry.
///
/// The packet must actually be an SRv6 encapsulation and must have reached
/// its final segment (`segments_left == 0`); decapsulating mid-path would
/// silently discard the remaining segments.
pub fn decapsulate(packet: &PacketBuffer) -> Result<(Vec<u8>, u8), CodecError> {
    if !packet.has_srh() {
        return Err(CodecError::NotEncapsulated);
    }
    match packet.segments_left() {
        Some(0) => {}
        Some(left) => return Err(CodecError::NotAtFinalSegment(left)),
        None => unreachable!("has_srh checked above"),
    }
    let inner_start =
        ipv6::HEADER_LEN + srh::FIXED_LEN + packet.seg_count * srh::SEGMENT_LEN;
    let inner = &packet.bytes[inner_start..];
    if inner.is_empty() {
        return Err(CodecError::NoInnerPacket);
    }
    Ok((inner.to_vec(), packet.inner_protocol()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sid(n: u16) -> Ipv6Addr {
        Ipv6Addr::new(0xfc00, 0, 0, 0, 0, 0, 0, n)
    }

    fn inner_packet() -> Vec<u8> {
        let header = Ipv6Header {
            traffic_class: 0,
            flow_label: 0,
            payload_length: 4,
            next_header: PROTO_NO_NEXT,
            hop_limit: 64,
            src: "2001:db8::1".parse().unwrap(),
            dst: "2001:db8::2".parse().unwrap(),
        };
        let mut bytes = Vec::new();
        header.encode_into(&mut bytes).unwrap();
        bytes.extend_from_slice(&[0xde, 0xad, 0xbe, 0xef]);
        bytes
    }

    #[test]
    fn marking_table() {
        assert_eq!(mark_traffic_class(0x00, Color::A), 0x02);
        assert_eq!(mark_traffic_class(0x00, Color::B), 0x03);
        assert_eq!(mark_traffic_class(0xFC, Color::B), 0xFF);
        assert_eq!(mark_traffic_class(0x55, Color::A), 0x56);
        // Re-marking a colored packet flips cleanly.
        assert_eq!(mark_traffic_class(0x03, Color::A), 0x02);
    }

    #[test]
    fn reading_marks() {
        assert_eq!(color_of_traffic_class(0x02), Some(Color::A));
        assert_eq!(color_of_traffic_class(0x03), Some(Color::B));
        assert_eq!(color_of_traffic_class(0x00), None);
        // Color bit set but monitored bit clear: still unmonitored.
        assert_eq!(color_of_traffic_class(0x01), None);
        // Upper DSCP bits don't interfere.
        assert_eq!(color_of_traffic_class(0xFE), Some(Color::A));
    }

    #[test]
    fn encapsulate_two_segment_path() {
        let pkt = encapsulate(&inner_packet(), &[sid(0xa), sid(0xb)], sid(1), PROTO_IPV6).unwrap();
        assert_eq!(pkt.dst(), sid(0xa), "outer destination is the first hop");
        assert_eq!(pkt.segments_left(), Some(1));
        assert_eq!(pkt.inner_protocol(), PROTO_IPV6);
        assert_eq!(pkt.color(), None, "fresh encapsulation is unmarked");

        let view = pkt.to_view();
        let srh = view.srh.unwrap();
        assert_eq!(srh.segments, vec![sid(0xb), sid(0xa)], "wire order is reversed");
        assert_eq!(srh.hdr_ext_len(), 4);
        assert_eq!(srh.last_entry(), 1);
        assert_eq!(view.payload, inner_packet());
    }

    #[test]
    fn single_segment_path_still_gets_an_srh() {
        let pkt = encapsulate(&inner_packet(), &[sid(0xa)], sid(1), PROTO_IPV6).unwrap();
        assert!(pkt.has_srh());
        assert_eq!(pkt.segments_left(), Some(0));
        assert_eq!(pkt.to_view().srh.unwrap().segments, vec![sid(0xa)]);
    }

    #[test]
    fn encapsulate_rejects_bad_inputs() {
        let inner = inner_packet();
        assert_eq!(encapsulate(&[], &[sid(1)], sid(9), PROTO_IPV6), Err(CodecError::NoInnerPacket));
        assert_eq!(encapsulate(&inner, &[], sid(9), PROTO_IPV6), Err(CodecError::EmptySegmentList));
        let many: Vec<Ipv6Addr> = (0..17).map(sid).collect();
        assert_eq!(
            encapsulate(&inner, &many, sid(9), PROTO_IPV6),
            Err(CodecError::TooManySegments(17))
        );
    }

    #[test]
    fn color_round_trip_on_buffer() {
        let mut pkt = encapsulate(&inner_packet(), &[sid(0xa)], sid(1), PROTO_IPV6).unwrap();
        pkt.set_color(Color::B);
        assert_eq!(pkt.color(), Some(Color::B));
        assert_eq!(pkt.traffic_class(), 0x03);
        pkt.set_color(Color::A);
        assert_eq!(pkt.color(), Some(Color::A));
        assert_eq!(pkt.traffic_class(), 0x02);
        // Marking must not corrupt neighbouring fields.
        let view = pkt.to_view();
        assert_eq!(view.ipv6.flow_label, 0);
        assert_eq!(view.ipv6.payload_length as usize, 24 + inner_packet().len());
    }

    #[test]
    fn sid_extraction_is_path_order() {
        let path = [sid(0xa), sid(0xb), sid(0xc)];
        let pkt = encapsulate(&inner_packet(), &path, sid(1), PROTO_IPV6).unwrap();
        let mut sids = Vec::new();
        assert!(pkt.extract_sids_into(&mut sids));
        assert_eq!(sids, path);
    }

    #[test]
    fn advance_to_last_segment_rewrites_destination() {
        let mut pkt = encapsulate(&inner_packet(), &[sid(0xa), sid(0xb)], sid(1), PROTO_IPV6).unwrap();
        pkt.advance_to_last_segment();
        assert_eq!(pkt.segments_left(), Some(0));
        assert_eq!(pkt.dst(), sid(0xb));
        // The segment list itself is untouched.
        let mut sids = Vec::new();
        pkt.extract_sids_into(&mut sids);
        assert_eq!(sids, [sid(0xa), sid(0xb)]);
    }

    #[test]
    fn decapsulate_returns_inner_bytes() {
        let mut pkt = encapsulate(&inner_packet(), &[sid(0xa), sid(0xb)], sid(1), PROTO_IPV6).unwrap();
        assert_eq!(decapsulate(&pkt), Err(CodecError::NotAtFinalSegment(1)));
        pkt.advance_to_last_segment();
        let (inner, proto) = decapsulate(&pkt).unwrap();
        assert_eq!(inner, inner_packet());
        assert_eq!(proto, PROTO_IPV6);
    }

    #[test]
    fn decapsulate_requires_encapsulation() {
        let plain = PacketBuffer::from_bytes(inner_packet()).unwrap();
        assert_eq!(decapsulate(&plain), Err(CodecError::NotEncapsulated));
    }

    #[test]
    fn buffer_validation_rejects_length_lies() {
        let mut bytes = inner_packet();
        bytes.push(0xFF); // trailing byte not covered by payload_length
        assert!(matches!(
            PacketBuffer::from_bytes(bytes),
            Err(CodecError::PayloadLengthMismatch { field: 4, actual: 5 })
        ));
    }

    #[test]
    fn encode_decode_round_trip_via_view() {
        let pkt = encapsulate(&inner_packet(), &[sid(0xa), sid(0xb)], sid(1), PROTO_IPV6).unwrap();
        let view = pkt.to_view();
        let bytes = encode_packet(&view).unwrap();
        assert_eq!(bytes, pkt.as_bytes());
        assert_eq!(decode_packet(&bytes).unwrap(), view);
    }
}
