//! UDP header codec with the IPv6 pseudo-header checksum.
//!
//! Loss-measurement messages travel inside UDP when carried end to end, so
//! the codec needs just enough UDP to build and verify those datagrams.

use std::net::Ipv6Addr;

use super::CodecError;

/// UDP header length in bytes.
pub const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UdpHeader {
    pub src_port: u16,
    pub dst_port: u16,
    pub length: u16,
    pub checksum: u16,
}

impl UdpHeader {
    pub fn decode(bytes: &[u8]) -> Result<UdpHeader, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::Truncated {
                what: "UDP header",
                need: HEADER_LEN,
                have: bytes.len(),
            });
        }
        Ok(UdpHeader {
            src_port: u16::from_be_bytes([bytes[0], bytes[1]]),
            dst_port: u16::from_be_bytes([bytes[2], bytes[3]]),
            length: u16::from_be_bytes([bytes[4], bytes[5]]),
            checksum: u16::from_be_bytes([bytes[6], bytes[7]]),
        })
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.src_port.to_be_bytes());
        out.extend_from_slice(&self.dst_port.to_be_bytes());
        out.extend_from_slice(&self.length.to_be_bytes());
        out.extend_from_slice(&self.checksum.to_be_bytes());
    }
}

/// Builds a complete UDP datagram with the checksum filled in.
pub fn datagram(
    src_port: u16,
    dst_port: u16,
    payload: &[u8],
    src: &Ipv6Addr,
    dst: &Ipv6Addr,
) -> Vec<u8> {
    let length = (HEADER_LEN + payload.len()) as u16;
    let mut out = Vec::with_capacity(usize::from(length));
    UdpHeader { src_port, dst_port, length, checksum: 0 }.encode_into(&mut out);
    out.extend_from_slice(payload);
    let cs = checksum(src, dst, &out);
    out[6..8].copy_from_slice(&cs.to_be_bytes());
    out
}

/// Computes the UDP checksum over the IPv6 pseudo-header and the datagram.
///
/// A computed zero is transmitted as 0xFFFF, since zero on the wire means
/// "no checksum" and that is not allowed over IPv6.
pub fn checksum(src: &Ipv6Addr, dst: &Ipv6Addr, datagram: &[u8]) -> u16 {
    let mut sum: u32 = 0;
    let mut add = |bytes: &[u8]| {
        let mut chunks = bytes.chunks_exact(2);
        for pair in &mut chunks {
            sum += u32::from(u16::from_be_bytes([pair[0], pair[1]]));
        }
        if let [last] = chunks.remainder() {
            sum += u32::from(u16::from_be_bytes([*last, 0]));
        }
    };
    add(&src.octets());
    add(&dst.octets());
    add(&(datagram.len() as u32).to_be_bytes());
    add(&[0, 0, 0, super::ipv6::PROTO_UDP]);
    add(datagram);
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    match !(sum as u16) {
        0 => 0xFFFF,
        cs => cs,
    }
}

/// Verifies the checksum of a received datagram.
pub fn verify_checksum(src: &Ipv6Addr, dst: &Ipv6Addr, datagram: &[u8]) -> bool {
    if datagram.len() < HEADER_LEN {
        return false;
    }
    let mut zeroed = datagram.to_vec();
    zeroed[6] = 0;
    zeroed[7] = 0;
    let expect = checksum(src, dst, &zeroed);
    datagram[6..8] == expect.to_be_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn datagram_round_trips_and_verifies() {
        let src: Ipv6Addr = "fc00::1".parse().unwrap();
        let dst: Ipv6Addr = "fc00::b".parse().unwrap();
        let dgram = datagram(49700, 8621, b"hello", &src, &dst);
        let hdr = UdpHeader::decode(&dgram).unwrap();
        assert_eq!(hdr.src_port, 49700);
        assert_eq!(hdr.dst_port, 8621);
        assert_eq!(hdr.length, 13);
        assert!(verify_checksum(&src, &dst, &dgram));
    }

    #[test]
    fn corruption_fails_verification() {
        let src: Ipv6Addr = "fc00::1".parse().unwrap();
        let dst: Ipv6Addr = "fc00::b".parse().unwrap();
        let mut dgram = datagram(1, 2, b"payload", &src, &dst);
        *dgram.last_mut().unwrap() ^= 0x01;
        assert!(!verify_checksum(&src, &dst, &dgram));
        // ... and so does verifying against the wrong pseudo-header.
        *dgram.last_mut().unwrap() ^= 0x01;
        let other: Ipv6Addr = "fc00::c".parse().unwrap();
        assert!(!verify_checksum(&src, &other, &dgram));
    }
}
