//! Packet representation and the wire codecs.
//!
//! Frames are Ethernet II + IPv4, optionally carrying TCP with options.
//! `parse_packet` and `serialize_packet` are exact inverses on well-formed
//! frames; serialization always recomputes the IPv4 and TCP checksums.
//! Two small codecs ride on top: the info-packet encoding (availability
//! index in the last octet of the destination address, protocol 0x8F) and
//! the server-id-in-timestamp encoding (three low bits of tsval).

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

use crate::PortId;

pub const ETH_HEADER_LEN: usize = 14;
pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const PROTO_TCP: u8 = 6;
/// IP protocol number identifying info-packets.
pub const PROTO_INFO: u8 = 0x8F;

const TCP_OPT_EOL: u8 = 0;
const TCP_OPT_NOP: u8 = 1;
const TCP_OPT_TIMESTAMP: u8 = 8;
const TCP_OPT_TIMESTAMP_LEN: u8 = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PacketError {
    #[error("truncated frame: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("ethertype {0:#06x} is not IPv4")]
    NotIpv4(u16),
    #[error("unsupported IP version {0}")]
    BadIpVersion(u8),
    #[error("bad IHL {0}")]
    BadIhl(u8),
    #[error("IP total length {total_len} does not match frame of {frame} bytes")]
    LengthMismatch { total_len: u16, frame: usize },
    #[error("bad TCP data offset {0}")]
    BadDataOffset(u8),
    #[error("TCP option runs past the end of the option block")]
    OptionsOverflow,
    #[error("TCP option kind {kind} has bad length {len}")]
    BadOptionLength { kind: u8, len: u8 },
    #[error("timestamp option length {0}, expected 10")]
    BadTimestampLength(u8),
    #[error("protocol {0:#04x} is not an info-packet")]
    NotAnInfoPacket(u8),
    #[error("server id {0} does not fit in three bits")]
    ServerIdOverflow(u8),
}

/// 48-bit MAC address.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    pub const ZERO: MacAddr = MacAddr([0; 6]);
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl fmt::Debug for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// First three octets of an IPv4 address; addresses info-packets to the
/// access switch's subnet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SubnetPrefix(pub [u8; 3]);

impl SubnetPrefix {
    pub fn of(addr: Ipv4Addr) -> SubnetPrefix {
        let o = addr.octets();
        SubnetPrefix([o[0], o[1], o[2]])
    }

    /// Joins the prefix with a final octet.
    pub fn with_last_octet(self, last: u8) -> Ipv4Addr {
        Ipv4Addr::new(self.0[0], self.0[1], self.0[2], last)
    }
}

impl FromStr for SubnetPrefix {
    type Err = std::net::AddrParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(SubnetPrefix::of(s.parse::<Ipv4Addr>()?))
    }
}

/// TCP flag bits at byte 13 of the TCP header.
pub mod tcp_flags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const RST: u8 = 0x04;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;
    pub const URG: u8 = 0x20;
}

/// Parsed TCP header. Options are kept as the raw octet block with the
/// timestamp option located by offset, so rewriting tsval leaves every
/// other option byte untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpSegment {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    pub flags: u8,
    pub window: u16,
    pub checksum: u16,
    pub urgent: u16,
    options: Vec<u8>,
    ts_offset: Option<usize>,
}

impl TcpSegment {
    pub fn new(src_port: u16, dst_port: u16, flags: u8) -> TcpSegment {
        TcpSegment {
            src_port,
            dst_port,
            seq: 0,
            ack: 0,
            flags,
            window: 65535,
            checksum: 0,
            urgent: 0,
            options: Vec::new(),
            ts_offset: None,
        }
    }

    /// Adds a timestamp option in the common NOP NOP TS layout.
    pub fn with_timestamp(mut self, tsval: u32, tsecr: u32) -> TcpSegment {
        let mut opts = vec![
            TCP_OPT_NOP,
            TCP_OPT_NOP,
            TCP_OPT_TIMESTAMP,
            TCP_OPT_TIMESTAMP_LEN,
        ];
        opts.extend_from_slice(&tsval.to_be_bytes());
        opts.extend_from_slice(&tsecr.to_be_bytes());
        self.ts_offset = Some(2);
        self.options = opts;
        self
    }

    pub fn syn(&self) -> bool {
        self.flags & tcp_flags::SYN != 0
    }

    pub fn has_timestamp(&self) -> bool {
        self.ts_offset.is_some()
    }

    pub fn tsval(&self) -> Option<u32> {
        self.ts_offset
            .map(|o| u32::from_be_bytes(self.options[o + 2..o + 6].try_into().unwrap()))
    }

    pub fn tsecr(&self) -> Option<u32> {
        self.ts_offset
            .map(|o| u32::from_be_bytes(self.options[o + 6..o + 10].try_into().unwrap()))
    }

    /// Rewrites tsval in place; returns false when no timestamp option exists.
    pub fn set_tsval(&mut self, tsval: u32) -> bool {
        match self.ts_offset {
            Some(o) => {
                self.options[o + 2..o + 6].copy_from_slice(&tsval.to_be_bytes());
                true
            }
            None => false,
        }
    }

    pub fn options(&self) -> &[u8] {
        &self.options
    }

    pub fn header_len(&self) -> usize {
        20 + self.options.len()
    }

    fn data_offset_words(&self) -> u8 {
        (self.header_len() / 4) as u8
    }
}

/// A fully decoded frame. The unit that flows through every switch and host.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPacket {
    pub eth_dst: MacAddr,
    pub eth_src: MacAddr,
    pub ip_tos: u8,
    pub ip_id: u16,
    /// Flags and fragment offset, raw 16 bits.
    pub ip_flags_frag: u16,
    pub ip_ttl: u8,
    pub ip_proto: u8,
    pub ip_checksum: u16,
    pub ip_src: Ipv4Addr,
    pub ip_dst: Ipv4Addr,
    ip_options: Vec<u8>,
    pub tcp: Option<TcpSegment>,
    pub payload: Vec<u8>,
}

impl ParsedPacket {
    /// Plain IPv4 packet without an L4 header.
    pub fn new_ipv4(
        eth_src: MacAddr,
        eth_dst: MacAddr,
        ip_src: Ipv4Addr,
        ip_dst: Ipv4Addr,
        ip_proto: u8,
        payload: Vec<u8>,
    ) -> ParsedPacket {
        ParsedPacket {
            eth_dst,
            eth_src,
            ip_tos: 0,
            ip_id: 0,
            ip_flags_frag: 0,
            ip_ttl: 64,
            ip_proto,
            ip_checksum: 0,
            ip_src,
            ip_dst,
            ip_options: Vec::new(),
            tcp: None,
            payload,
        }
    }

    /// TCP packet with the given segment and payload.
    pub fn new_tcp(
        eth_src: MacAddr,
        eth_dst: MacAddr,
        ip_src: Ipv4Addr,
        ip_dst: Ipv4Addr,
        tcp: TcpSegment,
        payload: Vec<u8>,
    ) -> ParsedPacket {
        let mut p = ParsedPacket::new_ipv4(eth_src, eth_dst, ip_src, ip_dst, PROTO_TCP, payload);
        p.tcp = Some(tcp);
        p
    }

    pub fn ip_header_len(&self) -> usize {
        20 + self.ip_options.len()
    }

    pub fn ip_total_len(&self) -> usize {
        self.ip_header_len()
            + self.tcp.as_ref().map_or(0, TcpSegment::header_len)
            + self.payload.len()
    }

    /// Total bytes on the wire, Ethernet header included.
    pub fn wire_len(&self) -> usize {
        ETH_HEADER_LEN + self.ip_total_len()
    }

    pub fn payload_len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_tcp(&self) -> bool {
        self.tcp.is_some()
    }

    pub fn is_info(&self) -> bool {
        self.ip_proto == PROTO_INFO
    }

    pub fn five_tuple(&self) -> FiveTuple {
        let (sp, dp) = match &self.tcp {
            Some(t) => (t.src_port, t.dst_port),
            None => (0, 0),
        };
        FiveTuple {
            src: self.ip_src,
            dst: self.ip_dst,
            proto: self.ip_proto,
            src_port: sp,
            dst_port: dp,
        }
    }
}

/// The 5-tuple used for ECMP hashing and flow identity. Ports are zero for
/// non-TCP packets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FiveTuple {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub proto: u8,
    pub src_port: u16,
    pub dst_port: u16,
}

impl FiveTuple {
    /// Canonical 13-octet concatenation fed to the ECMP hash.
    pub fn to_bytes(&self) -> [u8; 13] {
        let mut b = [0u8; 13];
        b[0..4].copy_from_slice(&self.src.octets());
        b[4..8].copy_from_slice(&self.dst.octets());
        b[8] = self.proto;
        b[9..11].copy_from_slice(&self.src_port.to_be_bytes());
        b[11..13].copy_from_slice(&self.dst_port.to_be_bytes());
        b
    }
}

impl fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}>{}:{}/{}",
            self.src, self.src_port, self.dst, self.dst_port, self.proto
        )
    }
}

/// A decoded info-packet: who reported, and the availability index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InfoReport {
    pub sender_port: PortId,
    pub sender_ip: Ipv4Addr,
    pub availability_index: u8,
}

/// Ones-complement sum accumulator (RFC 1071), fed incrementally so headers
/// and payload need not be copied into one buffer.
struct Checksum {
    acc: u32,
    pending: Option<u8>,
}

impl Checksum {
    fn new() -> Checksum {
        Checksum {
            acc: 0,
            pending: None,
        }
    }

    fn feed(&mut self, bytes: &[u8]) {
        let mut i = 0;
        if let Some(hi) = self.pending.take() {
            if bytes.is_empty() {
                self.pending = Some(hi);
                return;
            }
            self.add_word(u16::from_be_bytes([hi, bytes[0]]));
            i = 1;
        }
        while i + 1 < bytes.len() {
            self.add_word(u16::from_be_bytes([bytes[i], bytes[i + 1]]));
            i += 2;
        }
        if i < bytes.len() {
            self.pending = Some(bytes[i]);
        }
    }

    fn feed_u16(&mut self, v: u16) {
        self.feed(&v.to_be_bytes());
    }

    fn feed_u32(&mut self, v: u32) {
        self.feed(&v.to_be_bytes());
    }

    fn add_word(&mut self, w: u16) {
        self.acc += u32::from(w);
        self.acc = (self.acc & 0xFFFF) + (self.acc >> 16);
    }

    fn finish(mut self) -> u16 {
        if let Some(hi) = self.pending.take() {
            self.add_word(u16::from_be_bytes([hi, 0]));
        }
        while self.acc >> 16 != 0 {
            self.acc = (self.acc & 0xFFFF) + (self.acc >> 16);
        }
        !(self.acc as u16)
    }
}

fn ipv4_checksum(p: &ParsedPacket) -> u16 {
    let mut c = Checksum::new();
    let ihl = (p.ip_header_len() / 4) as u8;
    c.feed(&[(4 << 4) | ihl, p.ip_tos]);
    c.feed_u16(p.ip_total_len() as u16);
    c.feed_u16(p.ip_id);
    c.feed_u16(p.ip_flags_frag);
    c.feed(&[p.ip_ttl, p.ip_proto]);
    c.feed_u16(0); // checksum field
    c.feed(&p.ip_src.octets());
    c.feed(&p.ip_dst.octets());
    c.feed(&p.ip_options);
    c.finish()
}

fn tcp_checksum(p: &ParsedPacket, t: &TcpSegment) -> u16 {
    let seg_len = (t.header_len() + p.payload.len()) as u16;
    let mut c = Checksum::new();
    c.feed(&p.ip_src.octets());
    c.feed(&p.ip_dst.octets());
    c.feed(&[0, p.ip_proto]);
    c.feed_u16(seg_len);
    c.feed_u16(t.src_port);
    c.feed_u16(t.dst_port);
    c.feed_u32(t.seq);
    c.feed_u32(t.ack);
    c.feed(&[t.data_offset_words() << 4, t.flags]);
    c.feed_u16(t.window);
    c.feed_u16(0); // checksum field
    c.feed_u16(t.urgent);
    c.feed(&t.options);
    c.feed(&p.payload);
    c.finish()
}

/// Recomputes and stores both checksums. Called on every header rewrite.
pub fn refresh_checksums(p: &mut ParsedPacket) {
    p.ip_checksum = ipv4_checksum(p);
    if let Some(t) = p.tcp.take() {
        let sum = tcp_checksum(p, &t);
        let mut t = t;
        t.checksum = sum;
        p.tcp = Some(t);
    }
}

/// Decodes an Ethernet II + IPv4 frame. The frame must be exactly as long
/// as its headers claim.
pub fn parse_packet(bytes: &[u8]) -> Result<ParsedPacket, PacketError> {
    let need_eth_ip = ETH_HEADER_LEN + 20;
    if bytes.len() < need_eth_ip {
        return Err(PacketError::Truncated {
            need: need_eth_ip,
            have: bytes.len(),
        });
    }
    let eth_dst = MacAddr(bytes[0..6].try_into().unwrap());
    let eth_src = MacAddr(bytes[6..12].try_into().unwrap());
    let ethertype = u16::from_be_bytes([bytes[12], bytes[13]]);
    if ethertype != ETHERTYPE_IPV4 {
        return Err(PacketError::NotIpv4(ethertype));
    }

    let ip = &bytes[ETH_HEADER_LEN..];
    let version = ip[0] >> 4;
    if version != 4 {
        return Err(PacketError::BadIpVersion(version));
    }
    let ihl = ip[0] & 0x0F;
    if ihl < 5 {
        return Err(PacketError::BadIhl(ihl));
    }
    let header_len = usize::from(ihl) * 4;
    let total_len = u16::from_be_bytes([ip[2], ip[3]]);
    if usize::from(total_len) < header_len {
        return Err(PacketError::BadIhl(ihl));
    }
    if bytes.len() != ETH_HEADER_LEN + usize::from(total_len) {
        return Err(PacketError::LengthMismatch {
            total_len,
            frame: bytes.len(),
        });
    }
    if ip.len() < header_len {
        return Err(PacketError::Truncated {
            need: ETH_HEADER_LEN + header_len,
            have: bytes.len(),
        });
    }

    let ip_proto = ip[9];
    let mut packet = ParsedPacket {
        eth_dst,
        eth_src,
        ip_tos: ip[1],
        ip_id: u16::from_be_bytes([ip[4], ip[5]]),
        ip_flags_frag: u16::from_be_bytes([ip[6], ip[7]]),
        ip_ttl: ip[8],
        ip_proto,
        ip_checksum: u16::from_be_bytes([ip[10], ip[11]]),
        ip_src: Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]),
        ip_dst: Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]),
        ip_options: ip[20..header_len].to_vec(),
        tcp: None,
        payload: Vec::new(),
    };

    let l4 = &ip[header_len..usize::from(total_len)];
    if ip_proto == PROTO_TCP {
        if l4.len() < 20 {
            return Err(PacketError::Truncated {
                need: ETH_HEADER_LEN + header_len + 20,
                have: bytes.len(),
            });
        }
        let doff = l4[12] >> 4;
        if doff < 5 || usize::from(doff) * 4 > l4.len() {
            return Err(PacketError::BadDataOffset(doff));
        }
        let opt_end = usize::from(doff) * 4;
        let options = l4[20..opt_end].to_vec();
        let ts_offset = scan_timestamp_option(&options)?;
        packet.tcp = Some(TcpSegment {
            src_port: u16::from_be_bytes([l4[0], l4[1]]),
            dst_port: u16::from_be_bytes([l4[2], l4[3]]),
            seq: u32::from_be_bytes(l4[4..8].try_into().unwrap()),
            ack: u32::from_be_bytes(l4[8..12].try_into().unwrap()),
            flags: l4[13],
            window: u16::from_be_bytes([l4[14], l4[15]]),
            checksum: u16::from_be_bytes([l4[16], l4[17]]),
            urgent: u16::from_be_bytes([l4[18], l4[19]]),
            options,
            ts_offset,
        });
        packet.payload = l4[opt_end..].to_vec();
    } else {
        packet.payload = l4.to_vec();
    }
    Ok(packet)
}

/// Walks the TCP option block looking for kind 8. Bytes after an
/// end-of-option-list marker are padding and stay opaque.
fn scan_timestamp_option(options: &[u8]) -> Result<Option<usize>, PacketError> {
    let mut i = 0;
    let mut found = None;
    while i < options.len() {
        let kind = options[i];
        match kind {
            TCP_OPT_EOL => break,
            TCP_OPT_NOP => {
                i += 1;
            }
            _ => {
                if i + 1 >= options.len() {
                    return Err(PacketError::OptionsOverflow);
                }
                let len = options[i + 1];
                if len < 2 {
                    return Err(PacketError::BadOptionLength { kind, len });
                }
                if i + usize::from(len) > options.len() {
                    return Err(PacketError::OptionsOverflow);
                }
                if kind == TCP_OPT_TIMESTAMP {
                    if len != TCP_OPT_TIMESTAMP_LEN {
                        return Err(PacketError::BadTimestampLength(len));
                    }
                    found = Some(i);
                }
                i += usize::from(len);
            }
        }
    }
    Ok(found)
}

/// Emits the frame, recomputing both checksums.
pub fn serialize_packet(p: &ParsedPacket) -> Vec<u8> {
    let mut out = Vec::with_capacity(p.wire_len());
    out.extend_from_slice(&p.eth_dst.0);
    out.extend_from_slice(&p.eth_src.0);
    out.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());

    let ihl = (p.ip_header_len() / 4) as u8;
    out.push((4 << 4) | ihl);
    out.push(p.ip_tos);
    out.extend_from_slice(&(p.ip_total_len() as u16).to_be_bytes());
    out.extend_from_slice(&p.ip_id.to_be_bytes());
    out.extend_from_slice(&p.ip_flags_frag.to_be_bytes());
    out.push(p.ip_ttl);
    out.push(p.ip_proto);
    out.extend_from_slice(&ipv4_checksum(p).to_be_bytes());
    out.extend_from_slice(&p.ip_src.octets());
    out.extend_from_slice(&p.ip_dst.octets());
    out.extend_from_slice(&p.ip_options);

    if let Some(t) = &p.tcp {
        out.extend_from_slice(&t.src_port.to_be_bytes());
        out.extend_from_slice(&t.dst_port.to_be_bytes());
        out.extend_from_slice(&t.seq.to_be_bytes());
        out.extend_from_slice(&t.ack.to_be_bytes());
        out.push(t.data_offset_words() << 4);
        out.push(t.flags);
        out.extend_from_slice(&t.window.to_be_bytes());
        out.extend_from_slice(&tcp_checksum(p, t).to_be_bytes());
        out.extend_from_slice(&t.urgent.to_be_bytes());
        out.extend_from_slice(&t.options);
    }
    out.extend_from_slice(&p.payload);
    out
}

/// Builds an info-packet: plain IPv4, protocol 0x8F, zero payload, index in
/// the last destination octet.
pub fn encode_info_packet(
    prefix: SubnetPrefix,
    index: u8,
    src_ip: Ipv4Addr,
    src_mac: MacAddr,
    dst_mac: MacAddr,
) -> ParsedPacket {
    let mut p = ParsedPacket::new_ipv4(
        src_mac,
        dst_mac,
        src_ip,
        prefix.with_last_octet(index),
        PROTO_INFO,
        Vec::new(),
    );
    refresh_checksums(&mut p);
    p
}

/// Reads the availability index and sender identity off an info-packet.
pub fn decode_info_packet(
    p: &ParsedPacket,
    ingress_port: PortId,
) -> Result<InfoReport, PacketError> {
    if p.ip_proto != PROTO_INFO {
        return Err(PacketError::NotAnInfoPacket(p.ip_proto));
    }
    Ok(InfoReport {
        sender_port: ingress_port,
        sender_ip: p.ip_src,
        availability_index: p.ip_dst.octets()[3],
    })
}

/// Stamps a server id into the three low bits of a timestamp value. The
/// upper 29 bits pass through unchanged.
pub fn encode_server_id_tsval(tsval: u32, server_id: u8) -> Result<u32, PacketError> {
    if server_id >= 8 {
        return Err(PacketError::ServerIdOverflow(server_id));
    }
    Ok((tsval & !0x7) | u32::from(server_id))
}

/// Recovers a server id from an echoed timestamp.
pub fn decode_server_id_tsecr(tsecr: u32) -> u8 {
    (tsecr & 0x7) as u8
}
