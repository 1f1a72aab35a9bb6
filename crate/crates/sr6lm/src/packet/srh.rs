//! Segment Routing Header codec.

use std::net::Ipv6Addr;

use super::ipv6::addr_at;
use super::CodecError;

/// Routing Type value identifying a Segment Routing Header.
pub const ROUTING_TYPE_SRV6: u8 = 4;

/// Fixed part of the SRH before the segment list, in bytes.
pub const FIXED_LEN: usize = 8;

/// Size of one segment identifier (an IPv6 address).
pub const SEGMENT_LEN: usize = 16;

/// Maximum segment-list length accepted on the encode side.
///
/// Matching engines size their keys for this cap as well; longer lists can
/// still be *decoded* (a transit node must not choke on them) but are
/// reported as unmatchable by the engines.
pub const MAX_SEGMENTS: usize = 16;

/// Decoded Segment Routing Header.
///
/// ```text
///  0                   1                   2                   3
///  0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1
/// +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
/// | Next Header   |  Hdr Ext Len  | Routing Type  | Segments Left |
/// +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
/// |  Last Entry   |     Flags     |              Tag              |
/// +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
/// |            Segment List[0] (128-bit IPv6 address)             |
/// |                              ...                              |
/// |            Segment List[n] (128-bit IPv6 address)             |
/// +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
/// ```
///
/// The segment list is stored in wire order: `segments[0]` is the *final*
/// segment of the path and the list is walked backwards as Segments Left
/// decrements. `Hdr Ext Len` counts 8-byte units beyond the first 8 bytes,
/// so it is always twice the number of segments; `Last Entry` is the last
/// valid index, i.e. the segment count minus one. Both are derived from the
/// list on encode and must agree with it on decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentRoutingHeader {
    pub next_header: u8,
    pub segments_left: u8,
    pub flags: u8,
    pub tag: u16,
    /// Segment list in wire order (final segment first).
    pub segments: Vec<Ipv6Addr>,
}

impl SegmentRoutingHeader {
    /// Header length in 8-byte units beyond the first 8 bytes.
    pub fn hdr_ext_len(&self) -> u8 {
        (self.segments.len() * 2) as u8
    }

    /// Index of the last element of the segment list.
    pub fn last_entry(&self) -> u8 {
        (self.segments.len() - 1) as u8
    }

    /// Total encoded size in bytes.
    pub fn wire_len(&self) -> usize {
        FIXED_LEN + SEGMENT_LEN * self.segments.len()
    }

    pub fn decode(bytes: &[u8]) -> Result<SegmentRoutingHeader, CodecError> {
        if bytes.len() < FIXED_LEN {
            return Err(CodecError::Truncated {
                what: "segment routing header",
                need: FIXED_LEN,
                have: bytes.len(),
            });
        }
        let routing_type = bytes[2];
        if routing_type != ROUTING_TYPE_SRV6 {
            return Err(CodecError::BadRoutingType(routing_type));
        }
        let hdr_ext_len = bytes[1];
        let segments_left = bytes[3];
        let last_entry = bytes[4];
        if hdr_ext_len == 0 || hdr_ext_len % 2 != 0 {
            return Err(CodecError::SegmentCountMismatch { hdr_ext_len, last_entry });
        }
        let count = usize::from(hdr_ext_len) / 2;
        if usize::from(last_entry) != count - 1 {
            return Err(CodecError::SegmentCountMismatch { hdr_ext_len, last_entry });
        }
        if usize::from(segments_left) > usize::from(last_entry) {
            return Err(CodecError::SegmentsLeftOutOfRange { segments_left, last_entry });
        }
        let need = FIXED_LEN + count * SEGMENT_LEN;
        if bytes.len() < need {
            return Err(CodecError::Truncated {
                what: "SRH segment list",
                need,
                have: bytes.len(),
            });
        }
        let segments = (0..count)
            .map(|i| addr_at(bytes, FIXED_LEN + i * SEGMENT_LEN))
            .collect();
        Ok(SegmentRoutingHeader {
            next_header: bytes[0],
            segments_left,
            flags: bytes[5],
            tag: u16::from_be_bytes([bytes[6], bytes[7]]),
            segments,
        })
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), CodecError> {
        if self.segments.is_empty() {
            return Err(CodecError::EmptySegmentList);
        }
        if self.segments.len() > MAX_SEGMENTS {
            return Err(CodecError::TooManySegments(self.segments.len()));
        }
        if usize::from(self.segments_left) > usize::from(self.last_entry()) {
            return Err(CodecError::SegmentsLeftOutOfRange {
                segments_left: self.segments_left,
                last_entry: self.last_entry(),
            });
        }
        out.push(self.next_header);
        out.push(self.hdr_ext_len());
        out.push(ROUTING_TYPE_SRV6);
        out.push(self.segments_left);
        out.push(self.last_entry());
        out.push(self.flags);
        out.extend_from_slice(&self.tag.to_be_bytes());
        for seg in &self.segments {
            out.extend_from_slice(&seg.octets());
        }
        Ok(())
    }
}
