//! Scenario files and switch initialization — the control plane. It runs
//! exactly once, before the event loop starts: parse, validate, then
//! install registers, LPM routes, and Host_info tables into every switch.
//! The run phase holds no reference back to anything in this module; an
//! invocation counter makes that checkable from the outside.
//!
//! Scenario format: TOML, `version = 1`. See the README for the schema.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Deserialize;
use thiserror::Error;

use crate::consolidation::ConsolidationState;
use crate::packet::{MacAddr, SubnetPrefix};
use crate::pipeline::{LpmTable, SwitchConfig, SwitchCounters, SwitchState, SwitchType};
use crate::time::SimDuration;
use crate::topology::{NodeRole, Topology};
use crate::trace::{DayClock, EnergyTrace, RateProfile};
use crate::workload::{HostInfoEntry, HostInfoTable, WorkloadState, MAX_SERVERS};
use crate::{NodeId, PortId};

pub const SCENARIO_VERSION: u64 = 1;

/// How many times switch installation has ever run in this process. The
/// engine snapshots this around the run phase; the delta must stay zero,
/// which is the checkable form of "the control plane is init-only".
static INSTALL_CALLS: AtomicU64 = AtomicU64::new(0);

pub fn install_call_count() -> u64 {
    INSTALL_CALLS.load(Ordering::SeqCst)
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid(msg.into()))
}

// ---------------------------------------------------------------------------
// Raw file schema
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    version: u64,
    name: Option<String>,
    seed: Option<u64>,
    day_seconds: f64,
    duration_days: Option<f64>,
    drain_seconds: Option<f64>,
    defaults: RawDefaults,
    #[serde(default)]
    switches: Vec<RawSwitch>,
    #[serde(default)]
    hosts: Vec<RawHost>,
    #[serde(default)]
    links: Vec<RawLink>,
    #[serde(default)]
    routes: Vec<RawRoute>,
    traffic: Option<RawTraffic>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDefaults {
    epoch_length_ms: u64,
    traffic_thresholds: Vec<u64>,
    #[serde(default = "default_link_delay_us")]
    link_delay_us: u64,
    accounting_window_ms: Option<u64>,
    #[serde(default = "default_report_period_hours")]
    report_period_hours: f64,
}

fn default_link_delay_us() -> u64 {
    50
}

fn default_report_period_hours() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSwitch {
    name: String,
    kind: String,
    vip: Option<String>,
    subnet: Option<String>,
    epoch_length_ms: Option<u64>,
    traffic_thresholds: Option<Vec<u64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHost {
    name: String,
    kind: String,
    ip: String,
    attach: String,
    energy_trace: Option<Vec<[f64; 2]>>,
    link_delay_us: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    a: String,
    b: String,
    delay_us: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRoute {
    switch: String,
    prefix: String,
    via: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraffic {
    vips: Vec<String>,
    profile: Vec<[f64; 2]>,
    max_flows: Option<u64>,
    request_packets: [u64; 2],
    request_payload: [u64; 2],
    response_payload: [u64; 2],
    packet_gap_ms: [f64; 2],
}

// ---------------------------------------------------------------------------
// Resolved scenario
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ScenarioSwitch {
    pub name: String,
    pub kind: SwitchType,
    pub vip: Option<Ipv4Addr>,
    pub subnet: Option<SubnetPrefix>,
    pub epoch_length: SimDuration,
    pub thresholds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HostRole {
    Server,
    Client,
}

#[derive(Debug, Clone)]
pub struct ScenarioHost {
    pub name: String,
    pub role: HostRole,
    pub ip: Ipv4Addr,
    pub attach: usize,
    pub trace: Option<EnergyTrace>,
    pub link_delay: SimDuration,
}

#[derive(Debug, Clone, Copy)]
pub struct ScenarioLink {
    pub a: usize,
    pub b: usize,
    pub delay: SimDuration,
}

#[derive(Debug, Clone)]
pub struct RouteOverride {
    pub switch: usize,
    pub prefix: Ipv4Addr,
    pub len: u8,
    pub via: usize,
}

/// Flow arrival and shape parameters for the client generator.
#[derive(Debug, Clone)]
pub struct TrafficSpec {
    pub vips: Vec<Ipv4Addr>,
    pub profile: RateProfile,
    pub max_flows: Option<u64>,
    pub request_packets: (u64, u64),
    pub request_payload: (u64, u64),
    pub response_payload: (u64, u64),
    pub packet_gap_ms: (f64, f64),
}

impl TrafficSpec {
    pub fn none() -> TrafficSpec {
        TrafficSpec {
            vips: Vec::new(),
            profile: RateProfile::new(Vec::new()),
            max_flows: None,
            request_packets: (1, 1),
            request_payload: (0, 0),
            response_payload: (0, 0),
            packet_gap_ms: (2.0, 2.0),
        }
    }
}

/// A validated experiment description.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub day: DayClock,
    pub duration_days: f64,
    pub drain: SimDuration,
    pub accounting_window: SimDuration,
    pub report_period_hours: f64,
    pub switches: Vec<ScenarioSwitch>,
    pub hosts: Vec<ScenarioHost>,
    pub links: Vec<ScenarioLink>,
    pub routes: Vec<RouteOverride>,
    pub traffic: TrafficSpec,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Scenario::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Scenario, ScenarioError> {
        let raw: RawScenario = toml::from_str(text)?;
        resolve(raw)
    }

    pub fn end_of_profile(&self) -> crate::time::SimTime {
        crate::time::SimTime((self.day.day_nanos() as f64 * self.duration_days).round() as u64)
    }

    /// Default run horizon: the profiled days plus a drain margin so
    /// in-flight flows finish.
    pub fn default_until(&self) -> crate::time::SimTime {
        self.end_of_profile() + self.drain
    }
}

fn parse_ip(s: &str, what: &str) -> Result<Ipv4Addr, ScenarioError> {
    s.parse::<Ipv4Addr>()
        .map_err(|_| ScenarioError::Invalid(format!("{what}: bad IPv4 address {s:?}")))
}

fn parse_switch_type(s: &str, name: &str) -> Result<SwitchType, ScenarioError> {
    match s {
        "core" => Ok(SwitchType::Core),
        "aggregation" => Ok(SwitchType::Aggregation),
        "access" => Ok(SwitchType::Access),
        other => invalid(format!(
            "switch {name:?}: unknown kind {other:?} (expected core, aggregation, or access)"
        )),
    }
}

fn check_hours_ascending(samples: &[[f64; 2]], what: &str) -> Result<(), ScenarioError> {
    for pair in samples.windows(2) {
        if pair[1][0] <= pair[0][0] {
            return invalid(format!("{what}: sample hours must be strictly ascending"));
        }
    }
    for s in samples {
        if !(0.0..24.0).contains(&s[0]) || !s[0].is_finite() {
            return invalid(format!("{what}: sample hour {} outside [0, 24)", s[0]));
        }
    }
    Ok(())
}

fn check_range_u64(r: [u64; 2], what: &str) -> Result<(u64, u64), ScenarioError> {
    if r[0] > r[1] {
        return invalid(format!("{what}: range [{}, {}] is inverted", r[0], r[1]));
    }
    Ok((r[0], r[1]))
}

fn resolve(raw: RawScenario) -> Result<Scenario, ScenarioError> {
    if raw.version != SCENARIO_VERSION {
        return invalid(format!(
            "unsupported scenario version {} (this build reads version {SCENARIO_VERSION})",
            raw.version
        ));
    }
    if !(raw.day_seconds.is_finite() && raw.day_seconds > 0.0) {
        return invalid("day_seconds must be positive");
    }
    let duration_days = raw.duration_days.unwrap_or(1.0);
    if !(duration_days.is_finite() && duration_days > 0.0) {
        return invalid("duration_days must be positive");
    }
    let drain_seconds = raw.drain_seconds.unwrap_or(2.0);
    if !(drain_seconds.is_finite() && drain_seconds >= 0.0) {
        return invalid("drain_seconds must be non-negative");
    }
    if raw.defaults.epoch_length_ms == 0 {
        return invalid("defaults.epoch_length_ms must be positive");
    }
    let accounting_window_ms = raw
        .defaults
        .accounting_window_ms
        .unwrap_or(raw.defaults.epoch_length_ms);
    if accounting_window_ms == 0 {
        return invalid("defaults.accounting_window_ms must be positive");
    }
    if !(raw.defaults.report_period_hours.is_finite() && raw.defaults.report_period_hours > 0.0) {
        return invalid("defaults.report_period_hours must be positive");
    }

    // Switches.
    let mut switch_index = BTreeMap::new();
    let mut switches = Vec::new();
    for (i, s) in raw.switches.iter().enumerate() {
        if switch_index.insert(s.name.clone(), i).is_some() {
            return invalid(format!("duplicate switch name {:?}", s.name));
        }
        let kind = parse_switch_type(&s.kind, &s.name)?;
        match kind {
            SwitchType::Access => {
                if s.vip.is_none() || s.subnet.is_none() {
                    return invalid(format!(
                        "access switch {:?} needs both vip and subnet",
                        s.name
                    ));
                }
            }
            _ => {
                if s.vip.is_some() || s.subnet.is_some() {
                    return invalid(format!(
                        "switch {:?}: vip/subnet only apply to access switches",
                        s.name
                    ));
                }
                if kind == SwitchType::Aggregation
                    && (s.traffic_thresholds.is_some() || s.epoch_length_ms.is_some())
                {
                    return invalid(format!(
                        "aggregation switch {:?} takes no thresholds or epoch length",
                        s.name
                    ));
                }
            }
        }
        let vip = s
            .vip
            .as_deref()
            .map(|v| parse_ip(v, &format!("switch {:?} vip", s.name)));
        let vip = vip.transpose()?;
        let subnet = s
            .subnet
            .as_deref()
            .map(|v| parse_ip(v, &format!("switch {:?} subnet", s.name)))
            .transpose()?
            .map(SubnetPrefix::of);
        let epoch_ms = s.epoch_length_ms.unwrap_or(raw.defaults.epoch_length_ms);
        if epoch_ms == 0 {
            return invalid(format!(
                "switch {:?}: epoch_length_ms must be positive",
                s.name
            ));
        }
        let thresholds = s
            .traffic_thresholds
            .clone()
            .unwrap_or_else(|| raw.defaults.traffic_thresholds.clone());
        switches.push(ScenarioSwitch {
            name: s.name.clone(),
            kind,
            vip,
            subnet,
            epoch_length: SimDuration::from_millis(epoch_ms),
            thresholds,
        });
    }

    // VIP uniqueness.
    let mut vips_seen = BTreeSet::new();
    for s in &switches {
        if let Some(vip) = s.vip {
            if !vips_seen.insert(vip) {
                return invalid(format!("VIP {vip} assigned to more than one access switch"));
            }
        }
    }

    // Links.
    let mut links = Vec::new();
    let mut link_pairs = BTreeSet::new();
    for l in &raw.links {
        let a = *switch_index.get(&l.a).ok_or_else(|| {
            ScenarioError::Invalid(format!("link references unknown switch {:?}", l.a))
        })?;
        let b = *switch_index.get(&l.b).ok_or_else(|| {
            ScenarioError::Invalid(format!("link references unknown switch {:?}", l.b))
        })?;
        if a == b {
            return invalid(format!("link from {:?} to itself", l.a));
        }
        if !link_pairs.insert((a.min(b), a.max(b))) {
            return invalid(format!("duplicate link between {:?} and {:?}", l.a, l.b));
        }
        let delay = SimDuration::from_micros(l.delay_us.unwrap_or(raw.defaults.link_delay_us));
        links.push(ScenarioLink { a, b, delay });
    }

    // Hosts.
    let mut host_names = BTreeSet::new();
    let mut host_ips = BTreeSet::new();
    let mut hosts = Vec::new();
    let mut clients = 0usize;
    for h in &raw.hosts {
        if !host_names.insert(h.name.clone()) || switch_index.contains_key(&h.name) {
            return invalid(format!("duplicate node name {:?}", h.name));
        }
        let ip = parse_ip(&h.ip, &format!("host {:?}", h.name))?;
        if !host_ips.insert(ip) {
            return invalid(format!("host {:?}: IP {ip} already in use", h.name));
        }
        let attach = *switch_index.get(&h.attach).ok_or_else(|| {
            ScenarioError::Invalid(format!(
                "host {:?} attaches to unknown switch {:?}",
                h.name, h.attach
            ))
        })?;
        let role = match h.kind.as_str() {
            "server" => {
                if switches[attach].kind != SwitchType::Access {
                    return invalid(format!(
                        "server {:?} must attach to an access switch, {:?} is {}",
                        h.name, h.attach, switches[attach].kind
                    ));
                }
                HostRole::Server
            }
            "client" => {
                if switches[attach].kind != SwitchType::Core {
                    return invalid(format!(
                        "client {:?} must attach to a core switch, {:?} is {}",
                        h.name, h.attach, switches[attach].kind
                    ));
                }
                clients += 1;
                HostRole::Client
            }
            other => {
                return invalid(format!(
                    "host {:?}: unknown kind {other:?} (expected server or client)",
                    h.name
                ))
            }
        };
        if role == HostRole::Client && h.energy_trace.is_some() {
            return invalid(format!("client {:?} cannot carry an energy trace", h.name));
        }
        let trace = match &h.energy_trace {
            None => None,
            Some(samples) => {
                check_hours_ascending(samples, &format!("host {:?} energy_trace", h.name))?;
                let mut converted = Vec::with_capacity(samples.len());
                for s in samples {
                    let v = s[1];
                    if !(v.is_finite() && (0.0..=255.0).contains(&v) && v.fract() == 0.0) {
                        return invalid(format!(
                            "host {:?} energy_trace: index {v} is not an integer in 0..=255",
                            h.name
                        ));
                    }
                    converted.push((s[0], v as u8));
                }
                Some(EnergyTrace::new(converted))
            }
        };
        let link_delay =
            SimDuration::from_micros(h.link_delay_us.unwrap_or(raw.defaults.link_delay_us));
        hosts.push(ScenarioHost {
            name: h.name.clone(),
            role,
            ip,
            attach,
            trace,
            link_delay,
        });
    }
    if clients > 1 {
        return invalid("at most one client host is supported");
    }

    // Per-access-switch server census: the 3-bit server id caps the pool.
    for (i, s) in switches.iter().enumerate() {
        if s.kind != SwitchType::Access {
            continue;
        }
        let n = hosts
            .iter()
            .filter(|h| h.role == HostRole::Server && h.attach == i)
            .count();
        if n == 0 {
            return invalid(format!(
                "access switch {:?} has no attached servers",
                s.name
            ));
        }
        if n > MAX_SERVERS {
            return invalid(format!(
                "access switch {:?}: {n} servers overflow the 3-bit server id (max {MAX_SERVERS})",
                s.name
            ));
        }
    }

    // Uplink census and threshold arity for core and access switches.
    for (i, s) in switches.iter().enumerate() {
        if s.kind == SwitchType::Aggregation {
            continue;
        }
        let uplinks = links
            .iter()
            .filter(|l| {
                (l.a == i && switches[l.b].kind == SwitchType::Aggregation)
                    || (l.b == i && switches[l.a].kind == SwitchType::Aggregation)
            })
            .count();
        if uplinks == 0 {
            return invalid(format!(
                "{} switch {:?} has no links to the aggregation layer",
                s.kind, s.name
            ));
        }
        if !s.thresholds.windows(2).all(|w| w[0] < w[1]) {
            return invalid(format!(
                "switch {:?}: traffic_thresholds must be strictly ascending",
                s.name
            ));
        }
        if s.thresholds.len() != uplinks - 1 {
            return invalid(format!(
                "switch {:?}: {} uplinks need {} thresholds, got {}",
                s.name,
                uplinks,
                uplinks - 1,
                s.thresholds.len()
            ));
        }
    }

    // Route overrides.
    let mut routes = Vec::new();
    for r in &raw.routes {
        let sw = *switch_index.get(&r.switch).ok_or_else(|| {
            ScenarioError::Invalid(format!("route override on unknown switch {:?}", r.switch))
        })?;
        let via = *switch_index.get(&r.via).ok_or_else(|| {
            ScenarioError::Invalid(format!("route override via unknown switch {:?}", r.via))
        })?;
        let neighbors = links
            .iter()
            .any(|l| (l.a == sw && l.b == via) || (l.b == sw && l.a == via));
        if !neighbors {
            return invalid(format!(
                "route override: {:?} is not a neighbor of {:?}",
                r.via, r.switch
            ));
        }
        let (prefix, len) = match r.prefix.split_once('/') {
            Some((ip, len)) => {
                let ip = parse_ip(ip, "route prefix")?;
                let len: u8 = len.parse().map_err(|_| {
                    ScenarioError::Invalid(format!("bad prefix length in {:?}", r.prefix))
                })?;
                if len > 32 {
                    return invalid(format!("prefix length {len} > 32 in {:?}", r.prefix));
                }
                (ip, len)
            }
            None => (parse_ip(&r.prefix, "route prefix")?, 32),
        };
        routes.push(RouteOverride {
            switch: sw,
            prefix,
            len,
            via,
        });
    }

    // Traffic.
    let traffic = match &raw.traffic {
        None => TrafficSpec::none(),
        Some(t) => {
            check_hours_ascending(&t.profile, "traffic.profile")?;
            for s in &t.profile {
                if !(s[1].is_finite() && s[1] >= 0.0) {
                    return invalid(format!("traffic.profile: rate {} must be >= 0", s[1]));
                }
            }
            let profile = RateProfile::new(t.profile.iter().map(|s| (s[0], s[1])).collect());
            let mut vips = Vec::new();
            for v in &t.vips {
                let vip = parse_ip(v, "traffic.vips")?;
                if !switches.iter().any(|s| s.vip == Some(vip)) {
                    return invalid(format!(
                        "traffic.vips: {vip} is not any access switch's VIP"
                    ));
                }
                vips.push(vip);
            }
            if !profile.is_empty() {
                if vips.is_empty() {
                    return invalid("traffic.profile is non-empty but traffic.vips is empty");
                }
                if clients == 0 {
                    return invalid("traffic.profile is non-empty but no client host exists");
                }
            }
            let request_packets = check_range_u64(t.request_packets, "traffic.request_packets")?;
            if request_packets.0 == 0 {
                return invalid("traffic.request_packets must be at least 1");
            }
            let request_payload = check_range_u64(t.request_payload, "traffic.request_payload")?;
            let response_payload = check_range_u64(t.response_payload, "traffic.response_payload")?;
            for (hi, what) in [
                (request_payload.1, "request_payload"),
                (response_payload.1, "response_payload"),
            ] {
                if hi > 60_000 {
                    return invalid(format!("traffic.{what}: {hi} bytes exceed one datagram"));
                }
            }
            let gap = t.packet_gap_ms;
            if !(gap[0].is_finite() && gap[1].is_finite() && gap[0] > 0.0 && gap[0] <= gap[1]) {
                return invalid("traffic.packet_gap_ms must be a positive, ordered range");
            }
            TrafficSpec {
                vips,
                profile,
                max_flows: t.max_flows.filter(|&m| m > 0),
                request_packets,
                request_payload,
                response_payload,
                packet_gap_ms: (gap[0], gap[1]),
            }
        }
    };

    Ok(Scenario {
        name: raw.name.unwrap_or_else(|| "unnamed".to_string()),
        seed: raw.seed.unwrap_or(0),
        day: DayClock::new(raw.day_seconds),
        duration_days,
        drain: SimDuration::from_secs_f64(drain_seconds),
        accounting_window: SimDuration::from_millis(accounting_window_ms),
        report_period_hours: raw.defaults.report_period_hours,
        switches,
        hosts,
        links,
        routes,
        traffic,
    })
}

// ---------------------------------------------------------------------------
// Installation
// ---------------------------------------------------------------------------

/// A server endpoint as the engine sees it.
#[derive(Debug, Clone)]
pub struct ServerEndpoint {
    pub node: NodeId,
    pub name: String,
    pub ip: Ipv4Addr,
    pub mac: MacAddr,
    pub gateway_mac: MacAddr,
    pub subnet: SubnetPrefix,
    pub trace: Option<EnergyTrace>,
}

/// The external client host.
#[derive(Debug, Clone)]
pub struct ClientEndpoint {
    pub node: NodeId,
    pub name: String,
    pub ip: Ipv4Addr,
    pub mac: MacAddr,
    pub gateway_mac: MacAddr,
}

/// Fully initialized simulation state, ready to hand to the engine.
#[derive(Debug)]
pub struct Installed {
    pub topology: Topology,
    /// Indexed by switch NodeId (switches occupy ids 0..switches.len()).
    pub switches: Vec<SwitchState>,
    pub servers: Vec<ServerEndpoint>,
    pub client: Option<ClientEndpoint>,
}

fn node_mac(node: NodeId) -> MacAddr {
    let n = node as u16 + 1;
    MacAddr([0x02, 0, 0, 0, (n >> 8) as u8, (n & 0xFF) as u8])
}

/// Builds the topology and installs initial register and table state into
/// every switch: width 1, zeroed traffic counters and servers_data, LPM
/// routes auto-derived from shortest paths, Host_info from attached
/// servers.
pub fn install(scenario: &Scenario) -> Installed {
    INSTALL_CALLS.fetch_add(1, Ordering::SeqCst);

    let mut topology = Topology::new();
    for s in &scenario.switches {
        topology.add_node(&s.name, NodeRole::Switch);
    }
    let host_base = scenario.switches.len();
    for h in &scenario.hosts {
        topology.add_node(&h.name, NodeRole::Host);
    }
    for l in &scenario.links {
        topology.add_link(l.a, l.b, l.delay);
    }
    // (host node, attach switch, switch-side port, host-side port)
    let mut attachments = Vec::new();
    for (i, h) in scenario.hosts.iter().enumerate() {
        let host_node = host_base + i;
        let (sw_port, host_port) = topology.add_link(h.attach, host_node, h.link_delay);
        attachments.push((host_node, h.attach, sw_port, host_port));
    }

    // Port roles per switch.
    let mut switch_states = Vec::new();
    for (id, s) in scenario.switches.iter().enumerate() {
        let mut uplinks: Vec<(NodeId, PortId)> = Vec::new();
        let mut server_ports = Vec::new();
        let mut external_port = None;
        let mut neighbor_macs = BTreeMap::new();
        for (port, peer) in topology.neighbors(id) {
            neighbor_macs.insert(port, node_mac(peer));
            if peer < host_base {
                if scenario.switches[peer].kind == SwitchType::Aggregation {
                    uplinks.push((peer, port));
                }
            } else {
                match scenario.hosts[peer - host_base].role {
                    HostRole::Server => server_ports.push(port),
                    HostRole::Client => external_port = Some(port),
                }
            }
        }
        // ECMP bucket order follows aggregation switch declaration order.
        uplinks.sort();
        let uplink_ports: Vec<PortId> = uplinks.iter().map(|&(_, p)| p).collect();

        let consolidation = match s.kind {
            SwitchType::Aggregation => None,
            _ => Some(ConsolidationState::new(
                s.epoch_length,
                s.thresholds.clone(),
                uplink_ports.len(),
            )),
        };

        let workload = match s.kind {
            SwitchType::Access => {
                let mut entries = Vec::new();
                for &(host_node, attach, sw_port, _) in &attachments {
                    let h = &scenario.hosts[host_node - host_base];
                    if attach == id && h.role == HostRole::Server {
                        entries.push(HostInfoEntry {
                            ip: h.ip,
                            mac: node_mac(host_node),
                            port: sw_port,
                        });
                    }
                }
                Some(WorkloadState::new(
                    s.vip.expect("validated"),
                    HostInfoTable::new(entries),
                ))
            }
            _ => None,
        };

        let cfg = SwitchConfig {
            id,
            name: s.name.clone(),
            switch_type: s.kind,
            mac: node_mac(id),
            subnet_prefix: s.subnet,
            virtual_ip: s.vip,
            uplink_ports,
            server_ports,
            external_port,
        };
        switch_states.push(SwitchState {
            cfg,
            lpm: LpmTable::new(),
            consolidation,
            workload,
            neighbor_macs,
            counters: SwitchCounters::new(scenario.accounting_window),
        });
    }

    // Route derivation: /32 per host everywhere, /32 per VIP toward its
    // access switch, shortest path with lowest-node-id tie-break.
    #[derive(Clone, Copy)]
    struct Dest {
        ip: Ipv4Addr,
        target: NodeId,
        local_port: Option<PortId>,
        local_mac: Option<MacAddr>,
    }
    let mut dests = Vec::new();
    for &(host_node, attach, sw_port, _) in &attachments {
        let h = &scenario.hosts[host_node - host_base];
        dests.push(Dest {
            ip: h.ip,
            target: attach,
            local_port: Some(sw_port),
            local_mac: Some(node_mac(host_node)),
        });
    }
    for (id, s) in scenario.switches.iter().enumerate() {
        if let Some(vip) = s.vip {
            dests.push(Dest {
                ip: vip,
                target: id,
                local_port: None,
                local_mac: None,
            });
        }
    }
    for (sw, state) in switch_states.iter_mut().enumerate() {
        for d in &dests {
            if d.target == sw {
                if let (Some(port), Some(mac)) = (d.local_port, d.local_mac) {
                    state.lpm.insert(d.ip, 32, port, mac);
                }
                // A switch's own VIP never reaches LPM: classification
                // intercepts it as Server_in.
            } else if let Some(port) = topology.next_hop_port(sw, d.target) {
                let mac = state.neighbor_macs[&port];
                state.lpm.insert(d.ip, 32, port, mac);
            }
        }
    }
    for r in &scenario.routes {
        let port = topology
            .neighbors(r.switch)
            .into_iter()
            .find(|&(_, peer)| peer == r.via)
            .map(|(port, _)| port)
            .expect("validated neighbor");
        let mac = node_mac(r.via);
        switch_states[r.switch]
            .lpm
            .insert(r.prefix, r.len, port, mac);
    }

    // Host endpoints.
    let mut servers = Vec::new();
    let mut client = None;
    for &(host_node, attach, _, _) in &attachments {
        let h = &scenario.hosts[host_node - host_base];
        match h.role {
            HostRole::Server => servers.push(ServerEndpoint {
                node: host_node,
                name: h.name.clone(),
                ip: h.ip,
                mac: node_mac(host_node),
                gateway_mac: node_mac(attach),
                subnet: scenario.switches[attach].subnet.expect("validated"),
                trace: h.trace.clone(),
            }),
            HostRole::Client => {
                client = Some(ClientEndpoint {
                    node: host_node,
                    name: h.name.clone(),
                    ip: h.ip,
                    mac: node_mac(host_node),
                    gateway_mac: node_mac(attach),
                });
            }
        }
    }

    Installed {
        topology,
        switches: switch_states,
        servers,
        client,
    }
}
