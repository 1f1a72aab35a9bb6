//! Fixed IPv6 header codec.

use std::net::Ipv6Addr;

use super::CodecError;

/// Length of the fixed IPv6 header in bytes.
pub const HEADER_LEN: usize = 40;

/// IPv6 protocol/next-header numbers used by the pipelines.
pub const PROTO_UDP: u8 = 17;
pub const PROTO_IPV6: u8 = 41;
pub const PROTO_ROUTING: u8 = 43;
pub const PROTO_NO_NEXT: u8 = 59;

/// Decoded fixed IPv6 header.
///
/// ```text
///  0                   1                   2                   3
///  0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1
/// +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
/// |Version| Traffic Class |           Flow Label                  |
/// +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
/// |         Payload Length        |  Next Header  |   Hop Limit   |
/// +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
/// |                                                               |
/// +                         Source Address                        +
/// |                            (128 bit)                          |
/// +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
/// |                                                               |
/// +                       Destination Address                     +
/// |                            (128 bit)                          |
/// +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ipv6Header {
    pub traffic_class: u8,
    /// 20-bit flow label; the upper 12 bits must be zero.
    pub flow_label: u32,
    pub payload_length: u16,
    pub next_header: u8,
    pub hop_limit: u8,
    pub src: Ipv6Addr,
    pub dst: Ipv6Addr,
}

impl Ipv6Header {
    pub fn decode(bytes: &[u8]) -> Result<Ipv6Header, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::Truncated {
                what: "IPv6 header",
                need: HEADER_LEN,
                have: bytes.len(),
            });
        }
        let version = bytes[0] >> 4;
        if version != 6 {
            return Err(CodecError::BadVersion(version));
        }
        let traffic_class = (bytes[0] << 4) | (bytes[1] >> 4);
        let flow_label =
            (u32::from(bytes[1] & 0x0F) << 16) | (u32::from(bytes[2]) << 8) | u32::from(bytes[3]);
        Ok(Ipv6Header {
            traffic_class,
            flow_label,
            payload_length: u16::from_be_bytes([bytes[4], bytes[5]]),
            next_header: bytes[6],
            hop_limit: bytes[7],
            src: addr_at(bytes, 8),
            dst: addr_at(bytes, 24),
        })
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), CodecError> {
        if self.flow_label > 0x000F_FFFF {
            return Err(CodecError::FlowLabelOverflow(self.flow_label));
        }
        out.push(0x60 | (self.traffic_class >> 4));
        out.push((self.traffic_class << 4) | ((self.flow_label >> 16) as u8 & 0x0F));
        out.push((self.flow_label >> 8) as u8);
        out.push(self.flow_label as u8);
        out.extend_from_slice(&self.payload_length.to_be_bytes());
        out.push(self.next_header);
        out.push(self.hop_limit);
        out.extend_from_slice(&self.src.octets());
        out.extend_from_slice(&self.dst.octets());
        Ok(())
    }
}

/// Reads a 128-bit address at `offset`; the caller guarantees the bounds.
pub(crate) fn addr_at(bytes: &[u8], offset: usize) -> Ipv6Addr {
    let mut octets = [0u8; 16];
    octets.copy_from_slice(&bytes[offset..offset + 16]);
    Ipv6Addr::from(octets)
}
