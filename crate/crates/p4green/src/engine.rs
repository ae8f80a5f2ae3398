//! Deterministic discrete-event engine: the event queue, host behavior
//! models (server agents and the client flow generator), and the plumbing
//! that moves packets across links between switch pipelines.
//!
//! Determinism: events are processed in (time, sequence) order, the only
//! randomness is a ChaCha stream seeded from the scenario, and every
//! iterated collection is either a Vec or a BTreeMap. The same scenario
//! and seed reproduce the same report bit for bit.

use std::collections::{BTreeMap, BinaryHeap};
use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::metrics::{FlowRecord, MetricsReport, RunMode, ServerReport, SwitchReport, Totals};
use crate::packet::{encode_info_packet, tcp_flags, FiveTuple, ParsedPacket, TcpSegment};
use crate::pipeline::{ingress, ForwardingDecision, PacketTally};
use crate::scenario::{
    install_call_count, ClientEndpoint, Installed, Scenario, ServerEndpoint, TrafficSpec,
};
use crate::time::{SimDuration, SimTime};
use crate::topology::Topology;
use crate::trace::DayClock;
use crate::workload::ServerSelection;
use crate::{NodeId, PortId};

type FlowId = usize;

#[derive(Debug)]
enum EventKind {
    PacketArrival {
        node: NodeId,
        port: PortId,
        packet: ParsedPacket,
    },
    /// Client sends the flow's next request.
    FlowTimer { flow: FlowId },
    /// Client generator wakes up; emits a new flow when `emit` is set.
    GeneratorTick { emit: bool },
    /// Periodic info report from a server.
    ReportTick { server: usize },
    /// A server's energy trace steps to a new value.
    TraceBreakpoint { server: usize },
}

#[derive(Debug)]
struct Event {
    time: SimTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed so the BinaryHeap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Client-side view of one TCP flow.
#[derive(Debug)]
struct Flow {
    tuple: FiveTuple,
    vip: Ipv4Addr,
    started: SimTime,
    request_packets: u64,
    request_payload: u64,
    response_payload: u64,
    gap: SimDuration,
    requests_sent: u64,
    responses_received: u64,
    handshake_done: bool,
    /// Last server timestamp seen, echoed into tsecr of every request.
    last_server_tsval: u32,
    /// Global index of the server the SYN landed on.
    pinned_server: Option<usize>,
    selection: Option<ServerSelection>,
    green: bool,
    bytes: u64,
    done: bool,
}

struct ServerHost {
    endpoint: ServerEndpoint,
    last_reported: Option<u8>,
    /// Per-flow last emitted tsval, for the monotonicity invariant.
    last_tsval: BTreeMap<(Ipv4Addr, u16), u32>,
}

struct ClientHost {
    endpoint: ClientEndpoint,
    next_port: u16,
}

/// The simulation engine. Owns every piece of mutable state; one engine
/// per run.
pub struct Engine {
    now: SimTime,
    queue: BinaryHeap<Event>,
    seq: u64,
    topology: Topology,
    switches: Vec<crate::pipeline::SwitchState>,
    servers: Vec<ServerHost>,
    client: Option<ClientHost>,
    server_by_node: BTreeMap<NodeId, usize>,
    server_by_ip: BTreeMap<Ipv4Addr, usize>,

    rng: ChaCha8Rng,
    day: DayClock,
    duration_days: f64,
    report_period_hours: f64,
    traffic: TrafficSpec,
    window: SimDuration,
    mode: RunMode,
    scenario_name: String,
    seed: u64,

    flows: Vec<Flow>,
    flow_by_port: BTreeMap<(Ipv4Addr, u16), FlowId>,

    injected: PacketTally,
    delivered: PacketTally,
    affinity_violations: u64,
    non_syn_server_deliveries: u64,
    /// TCP packets reaching the client with a real server source address
    /// instead of the VIP. Must stay zero.
    vip_leaks: u64,
    server_window_bytes: Vec<Vec<u64>>,
    server_window_flows: Vec<Vec<u64>>,
    server_tsval_monotonic: bool,
}

impl Engine {
    pub fn new(scenario: &Scenario, installed: Installed, mode: RunMode) -> Engine {
        let Installed {
            topology,
            mut switches,
            servers,
            client,
        } = installed;
        if mode == RunMode::PinnedEcmp {
            for sw in &mut switches {
                if let Some(c) = sw.consolidation.as_mut() {
                    c.pin_width();
                }
            }
        }
        let server_by_node = servers
            .iter()
            .enumerate()
            .map(|(i, s)| (s.node, i))
            .collect();
        let server_by_ip = servers.iter().enumerate().map(|(i, s)| (s.ip, i)).collect();
        let n_servers = servers.len();
        Engine {
            now: SimTime::ZERO,
            queue: BinaryHeap::new(),
            seq: 0,
            topology,
            switches,
            servers: servers
                .into_iter()
                .map(|endpoint| ServerHost {
                    endpoint,
                    last_reported: None,
                    last_tsval: BTreeMap::new(),
                })
                .collect(),
            client: client.map(|endpoint| ClientHost {
                endpoint,
                next_port: 1024,
            }),
            server_by_node,
            server_by_ip,
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            day: scenario.day,
            duration_days: scenario.duration_days,
            report_period_hours: scenario.report_period_hours,
            traffic: scenario.traffic.clone(),
            window: scenario.accounting_window,
            mode,
            scenario_name: scenario.name.clone(),
            seed: scenario.seed,
            flows: Vec::new(),
            flow_by_port: BTreeMap::new(),
            injected: PacketTally::default(),
            delivered: PacketTally::default(),
            affinity_violations: 0,
            non_syn_server_deliveries: 0,
            vip_leaks: 0,
            server_window_bytes: vec![Vec::new(); n_servers],
            server_window_flows: vec![Vec::new(); n_servers],
            server_tsval_monotonic: true,
        }
    }

    fn push(&mut self, time: SimTime, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Event { time, seq, kind });
    }

    fn end_of_profile(&self) -> SimTime {
        SimTime((self.day.day_nanos() as f64 * self.duration_days).round() as u64)
    }

    fn client_ms(&self) -> u32 {
        self.now.as_millis() as u32
    }

    /// Sends a packet out of a host's single link, with valid checksums.
    fn emit_from_host(&mut self, host_node: NodeId, mut packet: ParsedPacket) {
        let (peer, peer_port, delay) = self
            .topology
            .peer(host_node, 0)
            .expect("hosts are wired to exactly one switch");
        crate::packet::refresh_checksums(&mut packet);
        self.injected.add(packet.wire_len() as u64);
        self.push(
            self.now + delay,
            EventKind::PacketArrival {
                node: peer,
                port: peer_port,
                packet,
            },
        );
    }

    // -- initialization ----------------------------------------------------

    fn schedule_initial_events(&mut self) {
        let end = self.end_of_profile();
        // Server reporting: periodic ticks plus trace breakpoints, but only
        // for servers that actually carry a trace.
        let whole_days = self.duration_days.ceil() as u64;
        for idx in 0..self.servers.len() {
            let Some(trace) = self.servers[idx].endpoint.trace.clone() else {
                continue;
            };
            for day in 0..whole_days {
                let mut hour = 0.0;
                while hour < 24.0 {
                    let t = self.day.time_at(day, hour);
                    if t < end {
                        self.push(t, EventKind::ReportTick { server: idx });
                    }
                    hour += self.report_period_hours;
                }
                for bp in trace.breakpoints() {
                    // One tick past the boundary so the step reads its new value.
                    let t = self.day.time_at(day, bp) + SimDuration(1);
                    if t < end {
                        self.push(t, EventKind::TraceBreakpoint { server: idx });
                    }
                }
            }
        }
        // Client generator.
        if self.client.is_some() && !self.traffic.profile.is_empty() {
            self.schedule_next_arrival();
        }
    }

    // -- client generator --------------------------------------------------

    fn schedule_next_arrival(&mut self) {
        let end = self.end_of_profile();
        if self.now >= end {
            return;
        }
        if let Some(max) = self.traffic.max_flows {
            if self.flows.len() as u64 >= max {
                return;
            }
        }
        let hour = self.day.hour_of(self.now);
        let rate = self.traffic.profile.rate_at(hour);
        if rate > 0.0 {
            let u: f64 = self.rng.gen::<f64>();
            let dt_secs = -(1.0 - u).ln() / rate;
            let t = self.now + SimDuration::from_secs_f64(dt_secs);
            if t < end {
                self.push(t, EventKind::GeneratorTick { emit: true });
            }
        } else {
            // Idle until the profile steps again, or until the next day.
            let day_index = self.now.as_nanos() / self.day.day_nanos();
            let wake = match self.traffic.profile.next_breakpoint_after(hour) {
                Some(bp) => self.day.time_at(day_index, bp) + SimDuration(1),
                None => self.day.time_at(day_index + 1, 0.0) + SimDuration(1),
            };
            if wake < end {
                self.push(wake, EventKind::GeneratorTick { emit: false });
            }
        }
    }

    fn start_flow(&mut self) {
        let client = self
            .client
            .as_mut()
            .expect("generator runs only with a client");
        let src_port = client.next_port;
        client.next_port = if client.next_port == u16::MAX {
            1024
        } else {
            client.next_port + 1
        };
        let client_ip = client.endpoint.ip;
        let client_mac = client.endpoint.mac;
        let gateway_mac = client.endpoint.gateway_mac;
        let client_node = client.endpoint.node;

        let vip = self.traffic.vips[self.rng.gen_range(0..self.traffic.vips.len())];
        let (plo, phi) = self.traffic.request_packets;
        let request_packets = self.rng.gen_range(plo..=phi);
        let (qlo, qhi) = self.traffic.request_payload;
        let request_payload = self.rng.gen_range(qlo..=qhi);
        let (rlo, rhi) = self.traffic.response_payload;
        let response_payload = self.rng.gen_range(rlo..=rhi);
        let (glo, ghi) = self.traffic.packet_gap_ms;
        let gap = SimDuration::from_secs_f64(self.rng.gen_range(glo..=ghi) / 1e3);

        let seg = TcpSegment::new(src_port, 80, tcp_flags::SYN).with_timestamp(self.client_ms(), 0);
        let syn = ParsedPacket::new_tcp(client_mac, gateway_mac, client_ip, vip, seg, Vec::new());
        let tuple = syn.five_tuple();

        let id = self.flows.len();
        self.flows.push(Flow {
            tuple,
            vip,
            started: self.now,
            request_packets,
            request_payload,
            response_payload,
            gap,
            requests_sent: 0,
            responses_received: 0,
            handshake_done: false,
            last_server_tsval: 0,
            pinned_server: None,
            selection: None,
            green: false,
            bytes: 0,
            done: false,
        });
        self.flow_by_port.insert((client_ip, src_port), id);
        self.emit_from_host(client_node, syn);
    }

    fn send_request(&mut self, flow_id: FlowId) {
        let client = self
            .client
            .as_ref()
            .expect("flows exist only with a client");
        let (client_node, client_ip, client_mac, gateway_mac) = (
            client.endpoint.node,
            client.endpoint.ip,
            client.endpoint.mac,
            client.endpoint.gateway_mac,
        );
        let now_ms = self.client_ms();
        let flow = &mut self.flows[flow_id];
        if flow.done {
            return;
        }
        flow.requests_sent += 1;
        let seg = TcpSegment::new(flow.tuple.src_port, 80, tcp_flags::ACK | tcp_flags::PSH)
            .with_timestamp(now_ms, flow.last_server_tsval);
        let payload = vec![0u8; flow.request_payload as usize];
        let packet =
            ParsedPacket::new_tcp(client_mac, gateway_mac, client_ip, flow.vip, seg, payload);
        self.emit_from_host(client_node, packet);
    }

    // -- server agent -------------------------------------------------------

    fn send_info_report(&mut self, server_idx: usize, index: u8) {
        let s = &mut self.servers[server_idx];
        s.last_reported = Some(index);
        let packet = encode_info_packet(
            s.endpoint.subnet,
            index,
            s.endpoint.ip,
            s.endpoint.mac,
            s.endpoint.gateway_mac,
        );
        let node = s.endpoint.node;
        self.emit_from_host(node, packet);
    }

    fn handle_report_tick(&mut self, server_idx: usize, only_if_changed: bool) {
        let hour = self.day.hour_of(self.now);
        let s = &self.servers[server_idx];
        let Some(trace) = s.endpoint.trace.as_ref() else {
            return;
        };
        let value = trace.value_at(hour);
        if only_if_changed && s.last_reported == Some(value) {
            return;
        }
        self.send_info_report(server_idx, value);
    }

    /// A request (or the SYN) arrived at a server: account delivery, check
    /// affinity, and answer with one response packet.
    fn handle_server_delivery(&mut self, server_idx: usize, packet: ParsedPacket) {
        let wire = packet.wire_len() as u64;
        self.delivered.add(wire);
        let Some(tcp) = packet.tcp.as_ref() else {
            return;
        };
        let key = (packet.ip_src, tcp.src_port);
        let Some(&flow_id) = self.flow_by_port.get(&key) else {
            return;
        };

        let is_syn = tcp.syn();
        if is_syn {
            if self.flows[flow_id].pinned_server.is_none() {
                self.flows[flow_id].pinned_server = Some(server_idx);
                self.record_flow_start(server_idx, flow_id);
            }
        } else {
            self.non_syn_server_deliveries += 1;
            if self.flows[flow_id].pinned_server != Some(server_idx) {
                self.affinity_violations += 1;
            }
        }
        self.attribute_flow_bytes(flow_id, server_idx, wire);

        // Response: echo the client's tsval, fresh server tsval, one packet.
        let response_payload = if is_syn {
            0
        } else {
            self.flows[flow_id].response_payload as usize
        };
        let client_tsval = tcp.tsval().unwrap_or(0);
        let now_ms = self.now.as_millis() as u32;
        let server = &mut self.servers[server_idx];
        if let Some(&prev) = server.last_tsval.get(&key) {
            if now_ms <= prev {
                self.server_tsval_monotonic = false;
            }
        }
        server.last_tsval.insert(key, now_ms);
        let seg = TcpSegment::new(tcp.dst_port, tcp.src_port, tcp_flags::ACK)
            .with_timestamp(now_ms, client_tsval);
        let reply = ParsedPacket::new_tcp(
            server.endpoint.mac,
            server.endpoint.gateway_mac,
            server.endpoint.ip,
            packet.ip_src,
            seg,
            vec![0u8; response_payload],
        );
        let node = server.endpoint.node;
        self.emit_from_host(node, reply);
    }

    // -- client deliveries ---------------------------------------------------

    fn handle_client_delivery(&mut self, packet: ParsedPacket) {
        let wire = packet.wire_len() as u64;
        self.delivered.add(wire);
        let Some(tcp) = packet.tcp.as_ref() else {
            return;
        };
        if self.server_by_ip.contains_key(&packet.ip_src) {
            self.vip_leaks += 1;
        }
        let key = (packet.ip_dst, tcp.dst_port);
        let Some(&flow_id) = self.flow_by_port.get(&key) else {
            return;
        };
        let tsval = tcp.tsval().unwrap_or(0);

        let pinned = self.flows[flow_id].pinned_server;
        if let Some(server_idx) = pinned {
            self.attribute_flow_bytes(flow_id, server_idx, wire);
        }
        let flow = &mut self.flows[flow_id];
        flow.last_server_tsval = tsval;
        if !flow.handshake_done {
            flow.handshake_done = true;
            let at = self.now + flow.gap;
            self.push(at, EventKind::FlowTimer { flow: flow_id });
        } else {
            flow.responses_received += 1;
            if flow.responses_received >= flow.request_packets {
                flow.done = true;
            } else {
                let at = self.now + flow.gap;
                self.push(at, EventKind::FlowTimer { flow: flow_id });
            }
        }
    }

    // -- metrics helpers -----------------------------------------------------

    fn window_index(&self) -> usize {
        (self.now.as_nanos() / self.window.as_nanos()) as usize
    }

    fn attribute_flow_bytes(&mut self, flow_id: FlowId, server_idx: usize, bytes: u64) {
        self.flows[flow_id].bytes += bytes;
        let w = self.window_index();
        let col = &mut self.server_window_bytes[server_idx];
        if col.len() <= w {
            col.resize(w + 1, 0);
        }
        col[w] += bytes;
    }

    fn record_flow_start(&mut self, server_idx: usize, _flow_id: FlowId) {
        let w = self.window_index();
        let col = &mut self.server_window_flows[server_idx];
        if col.len() <= w {
            col.resize(w + 1, 0);
        }
        col[w] += 1;
    }

    /// A flow counts as green-directed when the SYN-time snapshot shows the
    /// chosen server reporting the maximum index, that maximum is positive,
    /// and some other server reported strictly less.
    fn classify_green(selection: &ServerSelection) -> bool {
        let max = selection.indices.iter().copied().max().unwrap_or(0);
        if max == 0 {
            return false;
        }
        let chosen = selection.indices[usize::from(selection.server_id)];
        chosen == max && selection.indices.iter().any(|&v| v < max)
    }

    // -- event dispatch ------------------------------------------------------

    fn handle_packet_at_node(&mut self, node: NodeId, port: PortId, packet: ParsedPacket) {
        if node < self.switches.len() {
            let result = ingress(&mut self.switches[node], packet, port, self.now);
            if let Some((tuple, selection)) = result.selection {
                if let Some(&flow_id) = self.flow_by_port.get(&(tuple.src, tuple.src_port)) {
                    self.flows[flow_id].green = Self::classify_green(&selection);
                    self.flows[flow_id].selection = Some(selection);
                }
            }
            match result.decision {
                ForwardingDecision::Forward { port, packet } => {
                    let (peer, peer_port, delay) = self
                        .topology
                        .peer(node, port)
                        .expect("forwarding decisions use wired ports");
                    self.push(
                        self.now + delay,
                        EventKind::PacketArrival {
                            node: peer,
                            port: peer_port,
                            packet,
                        },
                    );
                }
                ForwardingDecision::Consume => {
                    // Info-packets end their life in the switch; the switch
                    // counters already hold the tally.
                }
                ForwardingDecision::Drop(_) => {}
            }
        } else if let Some(&server_idx) = self.server_by_node.get(&node) {
            self.handle_server_delivery(server_idx, packet);
        } else {
            self.handle_client_delivery(packet);
        }
    }

    fn dispatch(&mut self, kind: EventKind) {
        match kind {
            EventKind::PacketArrival { node, port, packet } => {
                self.handle_packet_at_node(node, port, packet)
            }
            EventKind::FlowTimer { flow } => self.send_request(flow),
            EventKind::GeneratorTick { emit } => {
                if emit && self.now < self.end_of_profile() {
                    let under_cap = self
                        .traffic
                        .max_flows
                        .is_none_or(|max| (self.flows.len() as u64) < max);
                    if under_cap {
                        self.start_flow();
                    }
                }
                self.schedule_next_arrival();
            }
            EventKind::ReportTick { server } => self.handle_report_tick(server, false),
            EventKind::TraceBreakpoint { server } => self.handle_report_tick(server, true),
        }
    }

    /// Drains the queue in (time, sequence) order up to `until` and folds
    /// all counters into the run report.
    pub fn run(mut self, until: SimTime) -> MetricsReport {
        let install_calls_before = install_call_count();
        self.schedule_initial_events();
        while let Some(head) = self.queue.peek() {
            if head.time > until {
                break;
            }
            let ev = self.queue.pop().unwrap();
            debug_assert!(ev.time >= self.now, "event time went backwards");
            self.now = ev.time;
            self.dispatch(ev.kind);
        }
        // Anything still queued past the horizon is in flight.
        let mut in_flight = PacketTally::default();
        for ev in self.queue.drain() {
            if let EventKind::PacketArrival { packet, .. } = ev.kind {
                in_flight.add(packet.wire_len() as u64);
            }
        }
        let install_calls_during_run = install_call_count() - install_calls_before;
        self.finish(until, in_flight, install_calls_during_run)
    }

    fn finish(
        self,
        until: SimTime,
        in_flight: PacketTally,
        install_calls_during_run: u64,
    ) -> MetricsReport {
        let n_windows = until.as_nanos().div_ceil(self.window.as_nanos()) as usize;

        let mut switch_reports = Vec::new();
        let mut dropped = PacketTally::default();
        let mut consumed = PacketTally::default();
        let mut index_reports: Vec<Vec<(SimTime, u8)>> = vec![Vec::new(); self.servers.len()];
        for sw in &self.switches {
            let c = &sw.counters;
            let d = c.dropped_total();
            dropped.pkts += d.pkts;
            dropped.bytes += d.bytes;
            consumed.pkts += c.consumed.pkts;
            consumed.bytes += c.consumed.bytes;

            // Map local Host_info server ids onto global server indices.
            if let Some(w) = &sw.workload {
                for &(t, local_id, index) in &c.index_reports {
                    let ip = w
                        .host_info()
                        .get(local_id)
                        .expect("logged ids are valid")
                        .ip;
                    let global = self.server_by_ip[&ip];
                    index_reports[global].push((t, index));
                }
            }

            let mut bytes = c.forwarded_bytes.clone();
            let mut pkts = c.forwarded_pkts.clone();
            bytes.resize(n_windows, 0);
            pkts.resize(n_windows, 0);
            let initial_width = match (&sw.consolidation, self.mode) {
                (Some(_), RunMode::PinnedEcmp) => sw.cfg.uplink_ports.len().max(1),
                (Some(_), RunMode::P4Green) => 1,
                (None, _) => 0,
            };
            switch_reports.push(SwitchReport {
                name: sw.cfg.name.clone(),
                kind: sw.cfg.switch_type,
                window_bytes: bytes,
                window_pkts: pkts,
                width_log: c.width_log.clone(),
                initial_width,
                drops: c.drops.clone(),
            });
        }

        let mut server_reports = Vec::new();
        for (i, s) in self.servers.iter().enumerate() {
            let mut bytes = self.server_window_bytes[i].clone();
            let mut flows = self.server_window_flows[i].clone();
            bytes.resize(n_windows, 0);
            flows.resize(n_windows, 0);
            server_reports.push(ServerReport {
                name: s.endpoint.name.clone(),
                ip: s.endpoint.ip,
                window_bytes: bytes,
                window_flows: flows,
                index_reports: std::mem::take(&mut index_reports[i]),
            });
        }

        let flows: Vec<FlowRecord> = self
            .flows
            .iter()
            .enumerate()
            .map(|(id, f)| FlowRecord {
                id: id as u64,
                start: f.started,
                vip: f.vip,
                server: f.pinned_server,
                green: f.green,
                bytes: f.bytes,
                completed: f.done,
            })
            .collect();

        let mut delivered = self.delivered;
        delivered.pkts += consumed.pkts;
        delivered.bytes += consumed.bytes;

        let totals = Totals {
            injected: self.injected,
            delivered,
            dropped,
            in_flight,
            flows_started: self.flows.len() as u64,
            flows_completed: self.flows.iter().filter(|f| f.done).count() as u64,
            affinity_violations: self.affinity_violations,
            non_syn_server_deliveries: self.non_syn_server_deliveries,
            vip_leaks: self.vip_leaks,
            install_calls_during_run,
        };

        MetricsReport {
            scenario: self.scenario_name,
            seed: self.seed,
            mode: self.mode,
            day_seconds: self.day.day_nanos() as f64 / 1e9,
            window: self.window,
            until,
            switches: switch_reports,
            servers: server_reports,
            flows,
            totals,
            server_tsval_monotonic: self.server_tsval_monotonic,
        }
    }
}

/// Installs a scenario and runs it to its default horizon.
pub fn run_scenario(scenario: &Scenario, mode: RunMode) -> MetricsReport {
    run_scenario_until(scenario, mode, scenario.default_until())
}

pub fn run_scenario_until(scenario: &Scenario, mode: RunMode, until: SimTime) -> MetricsReport {
    let installed = crate::scenario::install(scenario);
    Engine::new(scenario, installed, mode).run(until)
}
