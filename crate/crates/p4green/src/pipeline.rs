//! The per-switch ingress pipeline: packet classification, LPM forwarding,
//! ECMP uplink selection, and dispatch into the consolidation and workload
//! modules.

use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::consolidation::{ConsolidationState, Rotation};
use crate::packet::{refresh_checksums, FiveTuple, MacAddr, ParsedPacket, SubnetPrefix};
use crate::time::{SimDuration, SimTime};
use crate::workload::{ServerOut, ServerSelection, WorkloadError, WorkloadState};
use crate::{NodeId, PortId};

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum PipelineError {
    #[error("ECMP width {width} outside 1..={uplinks}")]
    WidthOutOfRange { width: usize, uplinks: usize },
}

/// Why a packet was dropped. Every drop increments a per-switch counter
/// keyed by one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DropReason {
    NoRoute,
    TtlExpired,
    UnknownSender,
    MissingTimestamp,
    UnknownServerId,
    NonTcpVip,
    Malformed,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DropReason::NoRoute => "no_route",
            DropReason::TtlExpired => "ttl_expired",
            DropReason::UnknownSender => "unknown_sender",
            DropReason::MissingTimestamp => "missing_timestamp",
            DropReason::UnknownServerId => "unknown_server_id",
            DropReason::NonTcpVip => "non_tcp_vip",
            DropReason::Malformed => "malformed",
        };
        f.write_str(s)
    }
}

impl DropReason {
    pub fn parse(s: &str) -> Option<DropReason> {
        Some(match s {
            "no_route" => DropReason::NoRoute,
            "ttl_expired" => DropReason::TtlExpired,
            "unknown_sender" => DropReason::UnknownSender,
            "missing_timestamp" => DropReason::MissingTimestamp,
            "unknown_server_id" => DropReason::UnknownServerId,
            "non_tcp_vip" => DropReason::NonTcpVip,
            "malformed" => DropReason::Malformed,
            _ => return None,
        })
    }

    fn from_workload(e: WorkloadError) -> DropReason {
        match e {
            WorkloadError::UnknownSender { .. } => DropReason::UnknownSender,
            WorkloadError::MissingTimestampOption => DropReason::MissingTimestamp,
            WorkloadError::UnknownServerId(_) => DropReason::UnknownServerId,
            WorkloadError::NotTcp => DropReason::NonTcpVip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchType {
    Core,
    Aggregation,
    Access,
}

impl fmt::Display for SwitchType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SwitchType::Core => "core",
            SwitchType::Aggregation => "aggregation",
            SwitchType::Access => "access",
        })
    }
}

/// Static per-switch configuration installed at initialization.
#[derive(Debug, Clone)]
pub struct SwitchConfig {
    pub id: NodeId,
    pub name: String,
    pub switch_type: SwitchType,
    pub mac: MacAddr,
    /// Access only: subnet the attached servers address info-packets to.
    pub subnet_prefix: Option<SubnetPrefix>,
    /// Access only: the pool's virtual IP.
    pub virtual_ip: Option<Ipv4Addr>,
    /// Ports toward the aggregation layer, ordered; ECMP bucket i maps to
    /// uplink i.
    pub uplink_ports: Vec<PortId>,
    /// Access only: ports with a locally attached server.
    pub server_ports: Vec<PortId>,
    /// Core only: the port facing the outside network.
    pub external_port: Option<PortId>,
}

/// The packet classes driving pipeline dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketClass {
    AggregationIn,
    ServerIn,
    ServerOut,
    Info,
    Transit,
}

/// Classifies a packet at a switch. Total and pure: anything that matches
/// no special rule is Transit and falls through to LPM.
pub fn classify(p: &ParsedPacket, cfg: &SwitchConfig, ingress_port: PortId) -> PacketClass {
    match cfg.switch_type {
        SwitchType::Access => {
            if p.is_info() {
                PacketClass::Info
            } else if cfg.virtual_ip == Some(p.ip_dst) {
                PacketClass::ServerIn
            } else if cfg.server_ports.contains(&ingress_port) {
                PacketClass::ServerOut
            } else {
                PacketClass::Transit
            }
        }
        SwitchType::Core => {
            if cfg.external_port == Some(ingress_port) {
                PacketClass::AggregationIn
            } else {
                PacketClass::Transit
            }
        }
        SwitchType::Aggregation => PacketClass::Transit,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LpmEntry {
    pub prefix: Ipv4Addr,
    pub len: u8,
    pub port: PortId,
    pub next_hop_mac: MacAddr,
}

/// Longest-prefix-match table. Entries are kept sorted by descending prefix
/// length so the first match wins; tables here hold tens of entries, a
/// linear scan is fine.
#[derive(Debug, Clone, Default)]
pub struct LpmTable {
    entries: Vec<LpmEntry>,
}

fn prefix_mask(len: u8) -> u32 {
    match len {
        0 => 0,
        l => u32::MAX << (32 - u32::from(l)),
    }
}

impl LpmTable {
    pub fn new() -> LpmTable {
        LpmTable::default()
    }

    /// Installs a route, replacing any previous entry with the same
    /// (prefix, length).
    pub fn insert(&mut self, prefix: Ipv4Addr, len: u8, port: PortId, next_hop_mac: MacAddr) {
        assert!(len <= 32, "prefix length {len} out of range");
        let masked = Ipv4Addr::from(u32::from(prefix) & prefix_mask(len));
        self.entries
            .retain(|e| !(e.prefix == masked && e.len == len));
        let entry = LpmEntry {
            prefix: masked,
            len,
            port,
            next_hop_mac,
        };
        let pos = self
            .entries
            .iter()
            .position(|e| (e.len, u32::from(e.prefix)) < (len, u32::from(masked)))
            .unwrap_or(self.entries.len());
        self.entries.insert(pos, entry);
    }

    pub fn lookup(&self, ip: Ipv4Addr) -> Option<(PortId, MacAddr)> {
        let ip = u32::from(ip);
        self.entries
            .iter()
            .find(|e| ip & prefix_mask(e.len) == u32::from(e.prefix))
            .map(|e| (e.port, e.next_hop_mac))
    }

    pub fn entries(&self) -> &[LpmEntry] {
        &self.entries
    }
}

const CRC32_POLY: u32 = 0xEDB8_8320;

const CRC32_TABLE: [u32; 256] = {
    let mut table = [0u32; 256];
    let mut n = 0;
    while n < 256 {
        let mut c = n as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 {
                CRC32_POLY ^ (c >> 1)
            } else {
                c >> 1
            };
            k += 1;
        }
        table[n] = c;
        n += 1;
    }
    table
};

/// CRC-32 (IEEE), the concrete hash behind 5-tuple ECMP.
pub fn crc32_ieee(data: &[u8]) -> u32 {
    let mut c = u32::MAX;
    for &b in data {
        c = CRC32_TABLE[((c ^ u32::from(b)) & 0xFF) as usize] ^ (c >> 8);
    }
    !c
}

/// Picks an uplink for a flow: CRC-32 over the 13-octet tuple, modulo the
/// current width. A given tuple and width always map to the same port, and
/// never to an uplink index at or beyond the width.
pub fn ecmp_select(
    ft: &FiveTuple,
    width: usize,
    uplinks: &[PortId],
) -> Result<PortId, PipelineError> {
    if width == 0 || width > uplinks.len() {
        return Err(PipelineError::WidthOutOfRange {
            width,
            uplinks: uplinks.len(),
        });
    }
    let h = crc32_ieee(&ft.to_bytes());
    Ok(uplinks[h as usize % width])
}

/// Counts of packets and their wire bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PacketTally {
    pub pkts: u64,
    pub bytes: u64,
}

impl PacketTally {
    pub fn add(&mut self, bytes: u64) {
        self.pkts += 1;
        self.bytes += bytes;
    }
}

/// Raw per-switch observations, merged into the run report afterwards.
#[derive(Debug, Clone)]
pub struct SwitchCounters {
    window: SimDuration,
    pub forwarded_bytes: Vec<u64>,
    pub forwarded_pkts: Vec<u64>,
    pub width_log: Vec<Rotation>,
    pub drops: BTreeMap<DropReason, PacketTally>,
    pub consumed: PacketTally,
    /// Accepted info reports: (time, server id, index).
    pub index_reports: Vec<(SimTime, u8, u8)>,
}

impl SwitchCounters {
    pub fn new(window: SimDuration) -> SwitchCounters {
        assert!(window.as_nanos() > 0);
        SwitchCounters {
            window,
            forwarded_bytes: Vec::new(),
            forwarded_pkts: Vec::new(),
            width_log: Vec::new(),
            drops: BTreeMap::new(),
            consumed: PacketTally::default(),
            index_reports: Vec::new(),
        }
    }

    pub fn window_len(&self) -> SimDuration {
        self.window
    }

    pub fn window_index(&self, t: SimTime) -> usize {
        (t.as_nanos() / self.window.as_nanos()) as usize
    }

    fn record_forward(&mut self, now: SimTime, bytes: u64) {
        let idx = self.window_index(now);
        if self.forwarded_bytes.len() <= idx {
            self.forwarded_bytes.resize(idx + 1, 0);
            self.forwarded_pkts.resize(idx + 1, 0);
        }
        self.forwarded_bytes[idx] += bytes;
        self.forwarded_pkts[idx] += 1;
    }

    fn record_drop(&mut self, reason: DropReason, bytes: u64) {
        self.drops.entry(reason).or_default().add(bytes);
    }

    pub fn dropped_total(&self) -> PacketTally {
        let mut t = PacketTally::default();
        for v in self.drops.values() {
            t.pkts += v.pkts;
            t.bytes += v.bytes;
        }
        t
    }
}

/// Everything one switch owns: config, tables, registers, counters.
#[derive(Debug, Clone)]
pub struct SwitchState {
    pub cfg: SwitchConfig,
    pub lpm: LpmTable,
    pub consolidation: Option<ConsolidationState>,
    pub workload: Option<WorkloadState>,
    /// Static MAC of the neighbor on each port, installed at init; used for
    /// MAC rewrite on non-LPM forwards.
    pub neighbor_macs: BTreeMap<PortId, MacAddr>,
    pub counters: SwitchCounters,
}

#[derive(Debug)]
pub enum ForwardingDecision {
    Forward { port: PortId, packet: ParsedPacket },
    Consume,
    Drop(DropReason),
}

/// What ingress hands back to the event loop: the forwarding decision plus,
/// for a load-balanced SYN, the selection snapshot keyed by the client-side
/// flow tuple.
#[derive(Debug)]
pub struct IngressResult {
    pub decision: ForwardingDecision,
    pub selection: Option<(FiveTuple, ServerSelection)>,
}

impl IngressResult {
    fn plain(decision: ForwardingDecision) -> IngressResult {
        IngressResult {
            decision,
            selection: None,
        }
    }
}

/// Runs one packet through a switch's ingress pipeline, mutating registers
/// and counters, and returns where it goes next.
pub fn ingress(
    state: &mut SwitchState,
    packet: ParsedPacket,
    ingress_port: PortId,
    now: SimTime,
) -> IngressResult {
    let wire_len = packet.wire_len() as u64;
    match classify(&packet, &state.cfg, ingress_port) {
        PacketClass::Info => {
            let workload = state
                .workload
                .as_mut()
                .expect("access switch has workload state");
            match workload.handle_info(&packet, ingress_port) {
                Ok((server_id, index)) => {
                    state.counters.consumed.add(wire_len);
                    state.counters.index_reports.push((now, server_id, index));
                    IngressResult::plain(ForwardingDecision::Consume)
                }
                Err(e) => drop_packet(state, DropReason::from_workload(e), wire_len),
            }
        }
        PacketClass::ServerIn => {
            let workload = state
                .workload
                .as_mut()
                .expect("access switch has workload state");
            let flow = packet.five_tuple();
            match workload.handle_server_in(packet) {
                Ok((rewritten, egress, selection)) => {
                    let mut result = forward(state, rewritten, egress, now, None);
                    result.selection = selection.map(|s| (flow, s));
                    result
                }
                Err(e) => drop_packet(state, DropReason::from_workload(e), wire_len),
            }
        }
        PacketClass::ServerOut => {
            let workload = state
                .workload
                .as_mut()
                .expect("access switch has workload state");
            match workload.handle_server_out(packet, ingress_port) {
                Ok(ServerOut::Translated(rewritten)) => forward_via_ecmp(state, rewritten, now),
                Ok(ServerOut::Passthrough(p)) => forward_via_lpm(state, p, now),
                Err(e) => drop_packet(state, DropReason::from_workload(e), wire_len),
            }
        }
        PacketClass::AggregationIn => forward_via_ecmp(state, packet, now),
        PacketClass::Transit => forward_via_lpm(state, packet, now),
    }
}

fn drop_packet(state: &mut SwitchState, reason: DropReason, bytes: u64) -> IngressResult {
    state.counters.record_drop(reason, bytes);
    IngressResult::plain(ForwardingDecision::Drop(reason))
}

/// Consolidation accounting then uplink selection by 5-tuple hash at the
/// current width.
fn forward_via_ecmp(state: &mut SwitchState, packet: ParsedPacket, now: SimTime) -> IngressResult {
    let cons = state
        .consolidation
        .as_mut()
        .expect("core and access switches carry consolidation state");
    let (width, rotation) = cons
        .account(packet.wire_len() as u64, now)
        .expect("event loop delivers packets in time order");
    if let Some(r) = rotation {
        state.counters.width_log.push(r);
    }
    let port = ecmp_select(&packet.five_tuple(), width, &state.cfg.uplink_ports)
        .expect("width register stays within the physical uplinks");
    let mac = state.neighbor_macs.get(&port).copied();
    forward(state, packet, port, now, mac)
}

fn forward_via_lpm(state: &mut SwitchState, packet: ParsedPacket, now: SimTime) -> IngressResult {
    match state.lpm.lookup(packet.ip_dst) {
        Some((port, mac)) => forward(state, packet, port, now, Some(mac)),
        None => drop_packet(state, DropReason::NoRoute, packet.wire_len() as u64),
    }
}

/// Common emission path: TTL decrement with drop-at-zero, MAC rewrite,
/// checksum refresh, window accounting.
fn forward(
    state: &mut SwitchState,
    mut packet: ParsedPacket,
    port: PortId,
    now: SimTime,
    next_hop_mac: Option<MacAddr>,
) -> IngressResult {
    if packet.ip_ttl <= 1 {
        return drop_packet(state, DropReason::TtlExpired, packet.wire_len() as u64);
    }
    packet.ip_ttl -= 1;
    if let Some(mac) = next_hop_mac {
        packet.eth_dst = mac;
    }
    packet.eth_src = state.cfg.mac;
    refresh_checksums(&mut packet);
    state.counters.record_forward(now, packet.wire_len() as u64);
    IngressResult::plain(ForwardingDecision::Forward { port, packet })
}
