//! Run reports: raw counters collected by the engine, derived figures
//! (operation-time reduction, energy estimate, green share), and the CSV
//! and summary formats the CLI writes. Every derived figure is a pure
//! function of the raw counters, so a summary can be rebuilt from the CSV
//! files alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::net::Ipv4Addr;
use std::path::Path;

use crate::consolidation::Rotation;
use crate::pipeline::{DropReason, PacketTally, SwitchType};
use crate::time::{SimDuration, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    P4Green,
    PinnedEcmp,
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunMode::P4Green => "p4green",
            RunMode::PinnedEcmp => "pinned_ecmp",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SwitchReport {
    pub name: String,
    pub kind: SwitchType,
    pub window_bytes: Vec<u64>,
    pub window_pkts: Vec<u64>,
    pub width_log: Vec<Rotation>,
    /// Width register value before the first rotation; zero for switches
    /// without a width register (aggregation).
    pub initial_width: usize,
    pub drops: BTreeMap<DropReason, PacketTally>,
}

impl SwitchReport {
    pub fn active_windows(&self) -> u64 {
        self.window_bytes.iter().filter(|&&b| b > 0).count() as u64
    }

    pub fn total_bytes(&self) -> u64 {
        self.window_bytes.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct ServerReport {
    pub name: String,
    pub ip: Ipv4Addr,
    /// Bytes delivered for flows pinned to this server, per window, both
    /// directions.
    pub window_bytes: Vec<u64>,
    /// New flows pinned to this server, per window.
    pub window_flows: Vec<u64>,
    /// Accepted availability reports (time, index).
    pub index_reports: Vec<(SimTime, u8)>,
}

#[derive(Debug, Clone)]
pub struct FlowRecord {
    pub id: u64,
    pub start: SimTime,
    pub vip: Ipv4Addr,
    /// Global index of the pinned server, when the SYN reached one.
    pub server: Option<usize>,
    pub green: bool,
    pub bytes: u64,
    pub completed: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Totals {
    pub injected: PacketTally,
    pub delivered: PacketTally,
    pub dropped: PacketTally,
    pub in_flight: PacketTally,
    pub flows_started: u64,
    pub flows_completed: u64,
    pub affinity_violations: u64,
    pub non_syn_server_deliveries: u64,
    /// TCP packets delivered to the client bearing a real server source
    /// address instead of the VIP.
    pub vip_leaks: u64,
    pub install_calls_during_run: u64,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub mode: RunMode,
    pub day_seconds: f64,
    pub window: SimDuration,
    pub until: SimTime,
    pub switches: Vec<SwitchReport>,
    pub servers: Vec<ServerReport>,
    pub flows: Vec<FlowRecord>,
    pub totals: Totals,
    pub server_tsval_monotonic: bool,
}

impl MetricsReport {
    /// Width at the end of each window for one switch, replayed from the
    /// rotation log.
    pub fn switch_width_by_window(&self, sw: &SwitchReport) -> Vec<usize> {
        let unit = self.window.as_nanos();
        let mut widths = Vec::with_capacity(sw.window_bytes.len());
        let mut log = sw.width_log.iter().peekable();
        let mut current = sw.initial_width;
        for w in 0..sw.window_bytes.len() {
            let window_end = (w as u64 + 1) * unit;
            while let Some(rot) = log.peek() {
                if rot.at.as_nanos() < window_end {
                    current = rot.width;
                    log.next();
                } else {
                    break;
                }
            }
            widths.push(current);
        }
        widths
    }

    pub fn switch_by_name(&self, name: &str) -> Option<&SwitchReport> {
        self.switches.iter().find(|s| s.name == name)
    }

    pub fn server_by_name(&self, name: &str) -> Option<&ServerReport> {
        self.servers.iter().find(|s| s.name == name)
    }

    /// Sum of a server's delivered bytes over windows whose start falls in
    /// [h0, h1) hours of day 0.
    pub fn server_bytes_between_hours(&self, server: &ServerReport, h0: f64, h1: f64) -> u64 {
        let day_ns = (self.day_seconds * 1e9).round() as u64;
        let unit = self.window.as_nanos();
        server
            .window_bytes
            .iter()
            .enumerate()
            .filter(|(w, _)| {
                let start = (*w as u64) * unit;
                let hour = start as f64 / day_ns as f64 * 24.0;
                hour >= h0 && hour < h1
            })
            .map(|(_, &b)| b)
            .sum()
    }
}

/// Injected bytes and packets must equal delivered + dropped + still in
/// flight at the horizon, with every drop attributed to a named reason.
pub fn conservation_holds(t: &Totals) -> bool {
    t.injected.bytes == t.delivered.bytes + t.dropped.bytes + t.in_flight.bytes
        && t.injected.pkts == t.delivered.pkts + t.dropped.pkts + t.in_flight.pkts
}

/// Share of flow bytes that went to a server which, at selection time,
/// reported the strictly largest positive availability index. None when no
/// flow carried bytes.
pub fn green_share_pct(flows: &[FlowRecord]) -> Option<f64> {
    let total: u64 = flows.iter().map(|f| f.bytes).sum();
    if total == 0 {
        return None;
    }
    let green: u64 = flows.iter().filter(|f| f.green).map(|f| f.bytes).sum();
    Some(green as f64 / total as f64 * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reduction {
    pub p4_active_windows: u64,
    pub baseline_active_windows: u64,
    pub reduction_pct: f64,
    pub no_traffic: bool,
}

/// Aggregation-switch operation-time reduction: one minus the ratio of
/// active window counts, where a window is active when the switch
/// forwarded at least one byte in it. The baseline run has its width
/// pinned to the full uplink count.
pub fn switch_hour_reduction(p4: &MetricsReport, baseline: &MetricsReport) -> Reduction {
    let active = |r: &MetricsReport| -> u64 {
        r.switches
            .iter()
            .filter(|s| s.kind == SwitchType::Aggregation)
            .map(SwitchReport::active_windows)
            .sum()
    };
    let p4_active = active(p4);
    let baseline_active = active(baseline);
    if baseline_active == 0 {
        return Reduction {
            p4_active_windows: p4_active,
            baseline_active_windows: 0,
            reduction_pct: 0.0,
            no_traffic: true,
        };
    }
    Reduction {
        p4_active_windows: p4_active,
        baseline_active_windows: baseline_active,
        reduction_pct: (1.0 - p4_active as f64 / baseline_active as f64) * 100.0,
        no_traffic: false,
    }
}

/// Energy saved per day by a fleet of aggregation switches at a given
/// operation-time reduction: reduction x fleet size x per-switch draw.
pub fn energy_saving_estimate(
    reduction_fraction: f64,
    n_switches: u32,
    per_switch_power_wh: f64,
) -> f64 {
    reduction_fraction * f64::from(n_switches) * per_switch_power_wh
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

fn secs(t: SimTime) -> String {
    format!("{:.6}", t.as_secs_f64())
}

/// Writes the full CSV set plus summary.txt into `dir`.
pub fn write_report(dir: &Path, report: &MetricsReport) -> io::Result<()> {
    fs::create_dir_all(dir)?;

    let mut meta = String::from("key,value\n");
    let _ = writeln!(meta, "scenario,{}", report.scenario);
    let _ = writeln!(meta, "seed,{}", report.seed);
    let _ = writeln!(meta, "mode,{}", report.mode);
    let _ = writeln!(meta, "day_seconds,{:.6}", report.day_seconds);
    let _ = writeln!(meta, "window_secs,{:.6}", report.window.as_secs_f64());
    let _ = writeln!(meta, "until_secs,{:.6}", report.until.as_secs_f64());
    fs::write(dir.join("meta.csv"), meta)?;

    let t = &report.totals;
    let mut totals = String::from("key,value\n");
    for (k, v) in [
        ("injected_pkts", t.injected.pkts),
        ("injected_bytes", t.injected.bytes),
        ("delivered_pkts", t.delivered.pkts),
        ("delivered_bytes", t.delivered.bytes),
        ("dropped_pkts", t.dropped.pkts),
        ("dropped_bytes", t.dropped.bytes),
        ("in_flight_pkts", t.in_flight.pkts),
        ("in_flight_bytes", t.in_flight.bytes),
        ("flows_started", t.flows_started),
        ("flows_completed", t.flows_completed),
        ("affinity_violations", t.affinity_violations),
        ("non_syn_server_deliveries", t.non_syn_server_deliveries),
        ("vip_leaks", t.vip_leaks),
        ("install_calls_during_run", t.install_calls_during_run),
    ] {
        let _ = writeln!(totals, "{k},{v}");
    }
    fs::write(dir.join("totals.csv"), totals)?;

    let unit = report.window.as_secs_f64();
    let mut sw_rows = String::from("switch,window,start_s,bytes,pkts,width\n");
    for sw in &report.switches {
        let widths = report.switch_width_by_window(sw);
        for (w, (&bytes, &pkts)) in sw.window_bytes.iter().zip(&sw.window_pkts).enumerate() {
            let _ = writeln!(
                sw_rows,
                "{},{},{:.6},{},{},{}",
                sw.name,
                w,
                w as f64 * unit,
                bytes,
                pkts,
                widths[w]
            );
        }
    }
    fs::write(dir.join("switch_windows.csv"), sw_rows)?;

    let mut width_rows = String::from("switch,time_s,epoch_bytes,width\n");
    for sw in &report.switches {
        for rot in &sw.width_log {
            let _ = writeln!(
                width_rows,
                "{},{},{},{}",
                sw.name,
                secs(rot.at),
                rot.epoch_traffic,
                rot.width
            );
        }
    }
    fs::write(dir.join("width_log.csv"), width_rows)?;

    let mut server_rows = String::from("server,window,start_s,bytes,flows_started\n");
    for s in &report.servers {
        for (w, (&bytes, &flows)) in s.window_bytes.iter().zip(&s.window_flows).enumerate() {
            let _ = writeln!(
                server_rows,
                "{},{},{:.6},{},{}",
                s.name,
                w,
                w as f64 * unit,
                bytes,
                flows
            );
        }
    }
    fs::write(dir.join("server_windows.csv"), server_rows)?;

    let mut idx_rows = String::from("time_s,server,index\n");
    for s in &report.servers {
        for &(t, v) in &s.index_reports {
            let _ = writeln!(idx_rows, "{},{},{}", secs(t), s.name, v);
        }
    }
    fs::write(dir.join("index_reports.csv"), idx_rows)?;

    let mut flow_rows = String::from("flow,start_s,vip,server,green,bytes,completed\n");
    for f in &report.flows {
        let server = match f.server {
            Some(i) => report.servers[i].name.clone(),
            None => "-".to_string(),
        };
        let _ = writeln!(
            flow_rows,
            "{},{},{},{},{},{},{}",
            f.id,
            secs(f.start),
            f.vip,
            server,
            u8::from(f.green),
            f.bytes,
            u8::from(f.completed)
        );
    }
    fs::write(dir.join("flows.csv"), flow_rows)?;

    let mut drop_rows = String::from("switch,reason,pkts,bytes\n");
    for sw in &report.switches {
        for (reason, tally) in &sw.drops {
            let _ = writeln!(
                drop_rows,
                "{},{},{},{}",
                sw.name, reason, tally.pkts, tally.bytes
            );
        }
    }
    fs::write(dir.join("drops.csv"), drop_rows)?;

    fs::write(
        dir.join("summary.txt"),
        summary_text(&SummarySource::from_report(report)),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Summary (writable from a live report or re-derivable from the CSVs)
// ---------------------------------------------------------------------------

/// Everything the summary needs; buildable from a report or from a CSV
/// directory so `report` can check `run` output.
#[derive(Debug, Clone, PartialEq)]
pub struct SummarySource {
    pub scenario: String,
    pub seed: u64,
    pub mode: String,
    pub day_seconds: f64,
    pub window_secs: f64,
    pub until_secs: f64,
    pub counters: Vec<(String, u64)>,
    pub green_bytes: u64,
    pub total_flow_bytes: u64,
}

impl SummarySource {
    pub fn from_report(report: &MetricsReport) -> SummarySource {
        let t = &report.totals;
        SummarySource {
            scenario: report.scenario.clone(),
            seed: report.seed,
            mode: report.mode.to_string(),
            day_seconds: report.day_seconds,
            window_secs: report.window.as_secs_f64(),
            until_secs: report.until.as_secs_f64(),
            counters: vec![
                ("injected_pkts".into(), t.injected.pkts),
                ("injected_bytes".into(), t.injected.bytes),
                ("delivered_pkts".into(), t.delivered.pkts),
                ("delivered_bytes".into(), t.delivered.bytes),
                ("dropped_pkts".into(), t.dropped.pkts),
                ("dropped_bytes".into(), t.dropped.bytes),
                ("in_flight_pkts".into(), t.in_flight.pkts),
                ("in_flight_bytes".into(), t.in_flight.bytes),
                ("flows_started".into(), t.flows_started),
                ("flows_completed".into(), t.flows_completed),
                ("affinity_violations".into(), t.affinity_violations),
                (
                    "non_syn_server_deliveries".into(),
                    t.non_syn_server_deliveries,
                ),
                ("vip_leaks".into(), t.vip_leaks),
                (
                    "install_calls_during_run".into(),
                    t.install_calls_during_run,
                ),
            ],
            green_bytes: report
                .flows
                .iter()
                .filter(|f| f.green)
                .map(|f| f.bytes)
                .sum(),
            total_flow_bytes: report.flows.iter().map(|f| f.bytes).sum(),
        }
    }

    /// Rebuilds the same source from a CSV directory written by
    /// `write_report`.
    pub fn from_dir(dir: &Path) -> io::Result<SummarySource> {
        let meta = read_kv(&dir.join("meta.csv"))?;
        let totals = read_kv(&dir.join("totals.csv"))?;
        let get = |m: &BTreeMap<String, String>, k: &str| -> io::Result<String> {
            m.get(k).cloned().ok_or_else(|| {
                io::Error::new(io::ErrorKind::InvalidData, format!("missing key {k}"))
            })
        };
        let parse_f64 = |s: String| -> io::Result<f64> {
            s.parse()
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "bad float"))
        };
        let parse_u64 = |s: String| -> io::Result<u64> {
            s.parse()
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "bad integer"))
        };

        let mut counters = Vec::new();
        for key in [
            "injected_pkts",
            "injected_bytes",
            "delivered_pkts",
            "delivered_bytes",
            "dropped_pkts",
            "dropped_bytes",
            "in_flight_pkts",
            "in_flight_bytes",
            "flows_started",
            "flows_completed",
            "affinity_violations",
            "non_syn_server_deliveries",
            "vip_leaks",
            "install_calls_during_run",
        ] {
            counters.push((key.to_string(), parse_u64(get(&totals, key)?)?));
        }

        // Flow green/byte columns.
        let flows_text = fs::read_to_string(dir.join("flows.csv"))?;
        let mut green_bytes = 0u64;
        let mut total_flow_bytes = 0u64;
        for (i, line) in flows_text.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 7 {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    "bad flows.csv row",
                ));
            }
            let green = cols[4] == "1";
            let bytes = parse_u64(cols[5].to_string())?;
            total_flow_bytes += bytes;
            if green {
                green_bytes += bytes;
            }
        }

        Ok(SummarySource {
            scenario: get(&meta, "scenario")?,
            seed: parse_u64(get(&meta, "seed")?)?,
            mode: get(&meta, "mode")?,
            day_seconds: parse_f64(get(&meta, "day_seconds")?)?,
            window_secs: parse_f64(get(&meta, "window_secs")?)?,
            until_secs: parse_f64(get(&meta, "until_secs")?)?,
            counters,
            green_bytes,
            total_flow_bytes,
        })
    }

    fn counter(&self, key: &str) -> u64 {
        self.counters
            .iter()
            .find(|(k, _)| k == key)
            .map(|&(_, v)| v)
            .unwrap_or(0)
    }
}

fn read_kv(path: &Path) -> io::Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(',')
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad key,value row"))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

/// The key=value summary, keys sorted. Identical whether built from a live
/// report or re-derived from CSVs.
pub fn summary_text(src: &SummarySource) -> String {
    let conservation_ok = src.counter("injected_bytes")
        == src.counter("delivered_bytes")
            + src.counter("dropped_bytes")
            + src.counter("in_flight_bytes")
        && src.counter("injected_pkts")
            == src.counter("delivered_pkts")
                + src.counter("dropped_pkts")
                + src.counter("in_flight_pkts");
    let mut lines: Vec<String> = Vec::new();
    lines.push(format!("conservation_ok={conservation_ok}"));
    lines.push(format!("day_seconds={:.6}", src.day_seconds));
    for (k, v) in &src.counters {
        lines.push(format!("{k}={v}"));
    }
    lines.push(format!("green_flow_bytes={}", src.green_bytes));
    let share = if src.total_flow_bytes > 0 {
        format!(
            "{:.4}",
            src.green_bytes as f64 / src.total_flow_bytes as f64 * 100.0
        )
    } else {
        "na".to_string()
    };
    lines.push(format!("green_share_pct={share}"));
    lines.push(format!("mode={}", src.mode));
    lines.push(format!("scenario={}", src.scenario));
    lines.push(format!("seed={}", src.seed));
    lines.push(format!("total_flow_bytes={}", src.total_flow_bytes));
    lines.push(format!("until_secs={:.6}", src.until_secs));
    lines.push(format!("window_secs={:.6}", src.window_secs));
    lines.sort();
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

/// Text block the `compare` subcommand prints.
pub fn compare_text(p4: &MetricsReport, baseline: &MetricsReport) -> String {
    let r = switch_hour_reduction(p4, baseline);
    let mut out = String::new();
    let _ = writeln!(out, "scenario={}", p4.scenario);
    let _ = writeln!(out, "seed={}", p4.seed);
    let _ = writeln!(out, "p4green_active_windows={}", r.p4_active_windows);
    let _ = writeln!(out, "baseline_active_windows={}", r.baseline_active_windows);
    let _ = writeln!(out, "no_traffic={}", r.no_traffic);
    let _ = writeln!(out, "reduction_pct={:.4}", r.reduction_pct);
    let _ = writeln!(
        out,
        "energy_saving_wh_at_32x400={:.1}",
        energy_saving_estimate(r.reduction_pct / 100.0, 32, 400.0)
    );
    out
}
