//! Availability-driven server selection, VIP translation, and timestamp
//! session affinity for one access switch.
//!
//! Servers report a 0-255 availability index via info-packets; the last
//! report per server lives in the `servers_data` register block. New TCP
//! flows (SYN set) pick a server: plain round-robin when every index is
//! zero, otherwise the next server whose index is positive. Replies are
//! stamped with the 3-bit server id in the low bits of the TCP timestamp,
//! which clients echo, so follow-up packets route to the same server with
//! no per-connection state in the switch.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::packet::{
    decode_info_packet, decode_server_id_tsecr, encode_server_id_tsval, MacAddr, ParsedPacket,
};
use crate::PortId;

pub const MAX_SERVERS: usize = 8;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("no Host_info mapping for sender (port {port}, {ip})")]
    UnknownSender { port: PortId, ip: Ipv4Addr },
    #[error("TCP packet lacks the timestamp option required for affinity")]
    MissingTimestampOption,
    #[error("decoded server id {0} has no Host_info entry")]
    UnknownServerId(u8),
    #[error("packet addressed to the VIP is not TCP")]
    NotTcp,
}

/// One backend behind the VIP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostInfoEntry {
    pub ip: Ipv4Addr,
    pub mac: MacAddr,
    pub port: PortId,
}

/// server_id -> (ip, mac, port) plus the reverse map used to attribute
/// Server_out packets and info-packets to their sender.
#[derive(Debug, Clone, Default)]
pub struct HostInfoTable {
    entries: Vec<HostInfoEntry>,
    reverse: BTreeMap<(PortId, Ipv4Addr), u8>,
}

impl HostInfoTable {
    /// Entries are indexed by server id in insertion order; at most eight
    /// fit the 3-bit encoding.
    pub fn new(entries: Vec<HostInfoEntry>) -> HostInfoTable {
        assert!(
            entries.len() <= MAX_SERVERS,
            "server id overflows three bits"
        );
        let reverse = entries
            .iter()
            .enumerate()
            .map(|(id, e)| ((e.port, e.ip), id as u8))
            .collect();
        HostInfoTable { entries, reverse }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, server_id: u8) -> Option<&HostInfoEntry> {
        self.entries.get(usize::from(server_id))
    }

    pub fn server_id_of(&self, port: PortId, ip: Ipv4Addr) -> Option<u8> {
        self.reverse.get(&(port, ip)).copied()
    }
}

/// Snapshot taken when a SYN is dispatched: which server won and what every
/// server had reported at that instant. Metrics classify green traffic
/// from this.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerSelection {
    pub server_id: u8,
    pub indices: Vec<u8>,
}

/// Outcome of handling a Server_out packet.
#[derive(Debug)]
pub enum ServerOut {
    /// Stamped and source-translated; send toward the core.
    Translated(ParsedPacket),
    /// Non-TCP traffic from a server port; route by LPM untouched.
    Passthrough(ParsedPacket),
}

/// Workload-control registers of one access switch.
#[derive(Debug, Clone)]
pub struct WorkloadState {
    vip: Ipv4Addr,
    servers_data: Vec<u8>,
    host_info: HostInfoTable,
    cursor: usize,
}

impl WorkloadState {
    pub fn new(vip: Ipv4Addr, host_info: HostInfoTable) -> WorkloadState {
        let n = host_info.len();
        assert!(n >= 1, "an access switch needs at least one server");
        WorkloadState {
            vip,
            servers_data: vec![0; n],
            host_info,
            cursor: 0,
        }
    }

    pub fn vip(&self) -> Ipv4Addr {
        self.vip
    }

    pub fn servers_data(&self) -> &[u8] {
        &self.servers_data
    }

    pub fn host_info(&self) -> &HostInfoTable {
        &self.host_info
    }

    /// Ingests an info-packet: resolves the sender to a server id and
    /// overwrites its availability index (last writer wins). Returns the
    /// (server id, index) pair for the report log.
    pub fn handle_info(
        &mut self,
        p: &ParsedPacket,
        ingress_port: PortId,
    ) -> Result<(u8, u8), WorkloadError> {
        let report =
            decode_info_packet(p, ingress_port).expect("classifier only routes protocol 0x8F here");
        let id = self
            .host_info
            .server_id_of(report.sender_port, report.sender_ip)
            .ok_or(WorkloadError::UnknownSender {
                port: report.sender_port,
                ip: report.sender_ip,
            })?;
        self.servers_data[usize::from(id)] = report.availability_index;
        Ok((id, report.availability_index))
    }

    /// Picks the server for a new flow. All indices zero: plain round-robin.
    /// Otherwise: the first server at or after the cursor with a positive
    /// index. One shared cursor serves both paths.
    pub fn select_server(&mut self) -> u8 {
        let n = self.servers_data.len();
        let chosen = if self.servers_data.iter().all(|&v| v == 0) {
            self.cursor
        } else {
            (0..n)
                .map(|k| (self.cursor + k) % n)
                .find(|&id| self.servers_data[id] > 0)
                .expect("some index is positive on this branch")
        };
        self.cursor = (chosen + 1) % n;
        chosen as u8
    }

    /// Routes a client packet addressed to the VIP: SYNs go through server
    /// selection, everything else follows the server id echoed in tsecr.
    /// The packet is rewritten to the chosen server's address and the
    /// egress port returned alongside.
    pub fn handle_server_in(
        &mut self,
        mut p: ParsedPacket,
    ) -> Result<(ParsedPacket, PortId, Option<ServerSelection>), WorkloadError> {
        let tcp = p.tcp.as_ref().ok_or(WorkloadError::NotTcp)?;
        let (id, selection) = if tcp.syn() {
            let id = self.select_server();
            (
                id,
                Some(ServerSelection {
                    server_id: id,
                    indices: self.servers_data.clone(),
                }),
            )
        } else {
            let tsecr = tcp.tsecr().ok_or(WorkloadError::MissingTimestampOption)?;
            (decode_server_id_tsecr(tsecr), None)
        };
        let entry = *self
            .host_info
            .get(id)
            .ok_or(WorkloadError::UnknownServerId(id))?;
        p.ip_dst = entry.ip;
        p.eth_dst = entry.mac;
        Ok((p, entry.port, selection))
    }

    /// Handles a packet leaving a server: stamps the server id into tsval
    /// and hides the server behind the VIP. Non-TCP traffic passes through
    /// untranslated for LPM forwarding.
    pub fn handle_server_out(
        &mut self,
        mut p: ParsedPacket,
        ingress_port: PortId,
    ) -> Result<ServerOut, WorkloadError> {
        if !p.is_tcp() {
            return Ok(ServerOut::Passthrough(p));
        }
        let id = self.host_info.server_id_of(ingress_port, p.ip_src).ok_or(
            WorkloadError::UnknownSender {
                port: ingress_port,
                ip: p.ip_src,
            },
        )?;
        let tcp = p.tcp.as_mut().expect("checked TCP above");
        let tsval = tcp.tsval().ok_or(WorkloadError::MissingTimestampOption)?;
        let stamped =
            encode_server_id_tsval(tsval, id).expect("table construction caps ids below 8");
        tcp.set_tsval(stamped);
        p.ip_src = self.vip;
        Ok(ServerOut::Translated(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{encode_info_packet, tcp_flags, SubnetPrefix, TcpSegment};

    fn mac(last: u8) -> MacAddr {
        MacAddr([2, 0, 0, 0, 0, last])
    }

    fn two_server_state() -> WorkloadState {
        let table = HostInfoTable::new(vec![
            HostInfoEntry {
                ip: Ipv4Addr::new(10, 0, 1, 10),
                mac: mac(10),
                port: 4,
            },
            HostInfoEntry {
                ip: Ipv4Addr::new(10, 0, 1, 11),
                mac: mac(11),
                port: 5,
            },
        ]);
        WorkloadState::new(Ipv4Addr::new(10, 10, 1, 1), table)
    }

    fn info_from(src: Ipv4Addr, index: u8) -> ParsedPacket {
        encode_info_packet(
            "10.0.1.0".parse::<SubnetPrefix>().unwrap(),
            index,
            src,
            mac(99),
            mac(1),
        )
    }

    #[test]
    fn info_reports_overwrite() {
        let mut s = two_server_state();
        let p = info_from(Ipv4Addr::new(10, 0, 1, 10), 42);
        assert_eq!(s.handle_info(&p, 4).unwrap(), (0, 42));
        assert_eq!(s.servers_data(), &[42, 0]);

        let p = info_from(Ipv4Addr::new(10, 0, 1, 10), 0);
        s.handle_info(&p, 4).unwrap();
        assert_eq!(s.servers_data(), &[0, 0], "last writer wins, no decay");
    }

    #[test]
    fn info_from_unknown_sender_is_rejected() {
        let mut s = two_server_state();
        let p = info_from(Ipv4Addr::new(10, 0, 1, 10), 7);
        // Right IP, wrong port: no reverse mapping.
        assert!(matches!(
            s.handle_info(&p, 9),
            Err(WorkloadError::UnknownSender { .. })
        ));
        assert_eq!(s.servers_data(), &[0, 0]);
    }

    #[test]
    fn select_round_robin_when_all_zero() {
        let mut s = two_server_state();
        let picks: Vec<u8> = (0..6).map(|_| s.select_server()).collect();
        assert_eq!(picks, vec![0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn select_sticks_to_the_single_green_server() {
        let mut s = two_server_state();
        s.servers_data = vec![7, 0];
        for _ in 0..5 {
            assert_eq!(s.select_server(), 0);
        }
    }

    #[test]
    fn select_alternates_between_green_servers() {
        let mut s = two_server_state();
        s.servers_data = vec![3, 4];
        let picks: Vec<u8> = (0..6).map(|_| s.select_server()).collect();
        assert_eq!(picks, vec![0, 1, 0, 1, 0, 1]);
    }

    fn client_packet(flags: u8, ts: Option<(u32, u32)>) -> ParsedPacket {
        let mut seg = TcpSegment::new(40000, 80, flags);
        if let Some((v, e)) = ts {
            seg = seg.with_timestamp(v, e);
        }
        ParsedPacket::new_tcp(
            mac(50),
            mac(1),
            Ipv4Addr::new(198, 51, 100, 10),
            Ipv4Addr::new(10, 10, 1, 1),
            seg,
            vec![0; 100],
        )
    }

    #[test]
    fn syn_selects_and_rewrites() {
        let mut s = two_server_state();
        s.servers_data = vec![0, 5];
        let (p, port, sel) = s
            .handle_server_in(client_packet(tcp_flags::SYN, Some((10, 0))))
            .unwrap();
        assert_eq!(p.ip_dst, Ipv4Addr::new(10, 0, 1, 11));
        assert_eq!(p.eth_dst, mac(11));
        assert_eq!(port, 5);
        let sel = sel.unwrap();
        assert_eq!(sel.server_id, 1);
        assert_eq!(sel.indices, vec![0, 5]);
    }

    #[test]
    fn non_syn_follows_echoed_server_id() {
        let table = HostInfoTable::new(
            (0..4)
                .map(|i| HostInfoEntry {
                    ip: Ipv4Addr::new(10, 0, 1, 10 + i),
                    mac: mac(10 + i),
                    port: 4 + i,
                })
                .collect(),
        );
        let mut s = WorkloadState::new(Ipv4Addr::new(10, 10, 1, 1), table);
        // tsecr low bits 011 -> server 3, regardless of servers_data.
        s.servers_data = vec![9, 9, 9, 0];
        let (p, port, sel) = s
            .handle_server_in(client_packet(tcp_flags::ACK, Some((77, 0b1000_0011))))
            .unwrap();
        assert_eq!(p.ip_dst, Ipv4Addr::new(10, 0, 1, 13));
        assert_eq!(port, 7);
        assert!(sel.is_none());
    }

    #[test]
    fn non_syn_without_timestamp_is_an_error() {
        let mut s = two_server_state();
        assert!(matches!(
            s.handle_server_in(client_packet(tcp_flags::ACK, None)),
            Err(WorkloadError::MissingTimestampOption)
        ));
    }

    #[test]
    fn non_syn_with_out_of_range_id_is_an_error() {
        let mut s = two_server_state();
        // tsecr ends in 101 -> id 5, but only two servers exist.
        assert!(matches!(
            s.handle_server_in(client_packet(tcp_flags::ACK, Some((77, 5)))),
            Err(WorkloadError::UnknownServerId(5))
        ));
    }

    fn server_reply(src: Ipv4Addr, tsval: u32) -> ParsedPacket {
        let seg = TcpSegment::new(80, 40000, tcp_flags::ACK).with_timestamp(tsval, 10);
        ParsedPacket::new_tcp(
            mac(11),
            mac(1),
            src,
            Ipv4Addr::new(198, 51, 100, 10),
            seg,
            vec![0; 200],
        )
    }

    #[test]
    fn server_out_stamps_and_translates() {
        let mut s = two_server_state();
        let out = s
            .handle_server_out(server_reply(Ipv4Addr::new(10, 0, 1, 11), 1000), 5)
            .unwrap();
        match out {
            ServerOut::Translated(p) => {
                assert_eq!(p.ip_src, Ipv4Addr::new(10, 10, 1, 1), "client sees the VIP");
                assert_eq!(
                    p.tcp.as_ref().unwrap().tsval(),
                    Some(1001),
                    "id 1 in low bits"
                );
            }
            other => panic!("expected translation, got {other:?}"),
        }
    }

    #[test]
    fn server_out_from_unknown_sender_is_an_error() {
        let mut s = two_server_state();
        let r = s.handle_server_out(server_reply(Ipv4Addr::new(10, 0, 9, 9), 5), 5);
        assert!(matches!(r, Err(WorkloadError::UnknownSender { .. })));
    }

    #[test]
    fn server_out_without_timestamp_is_an_error() {
        let mut s = two_server_state();
        let seg = TcpSegment::new(80, 40000, tcp_flags::ACK);
        let p = ParsedPacket::new_tcp(
            mac(11),
            mac(1),
            Ipv4Addr::new(10, 0, 1, 11),
            Ipv4Addr::new(198, 51, 100, 10),
            seg,
            Vec::new(),
        );
        assert!(matches!(
            s.handle_server_out(p, 5),
            Err(WorkloadError::MissingTimestampOption)
        ));
    }

    #[test]
    fn non_tcp_server_out_passes_through() {
        let mut s = two_server_state();
        let p = ParsedPacket::new_ipv4(
            mac(11),
            mac(1),
            Ipv4Addr::new(10, 0, 1, 11),
            Ipv4Addr::new(198, 51, 100, 10),
            1, // ICMP
            vec![0; 32],
        );
        match s.handle_server_out(p, 5).unwrap() {
            ServerOut::Passthrough(p) => {
                assert_eq!(p.ip_src, Ipv4Addr::new(10, 0, 1, 11), "no translation");
            }
            other => panic!("expected passthrough, got {other:?}"),
        }
    }

    #[test]
    fn stamped_id_echo_round_trips_for_every_id() {
        for id in 0..8u8 {
            let stamped = encode_server_id_tsval(123_456_789, id).unwrap();
            assert_eq!(decode_server_id_tsecr(stamped), id);
            assert!(stamped.abs_diff(123_456_789) <= 7);
        }
    }
}
