//! Scenario runner, delay sweep and reporting for the handover experiment.

use std::fmt::{self, Write as _};
use std::fs;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::client::{Client, ClientConfig, ClientError};
use crate::dispatch::IfaceId;
use crate::netsim::{HandoverSchedule, HostId, LinkConfig, NatMode, NatPolicy, NetError, Network};
use crate::server::{Server, ServerConfig, ServerError, Variant};
use crate::wire::{self, MessageType, WireMessage};

pub const SERVER_IP: Ipv4Addr = Ipv4Addr::new(198, 51, 100, 10);
pub const WELCOME_PORT: u16 = 4433;
pub const NAT_EXTERNAL_IP: Ipv4Addr = Ipv4Addr::new(203, 0, 113, 1);
/// Thirty simulated minutes.
pub const DEFAULT_CAP_MS: u64 = 30 * 60 * 1000;
/// Message spacing used by [`ScenarioConfig::handover_benchmark`].
pub const BENCHMARK_SEND_INTERVAL_MS: u64 = 80;
/// Per-shutdown jitter used by [`ScenarioConfig::handover_benchmark`].
pub const BENCHMARK_HANDOVER_JITTER_MS: u64 = 500;
pub const CSV_HEADER: &str = "delay_ms,variant,wct_ms,gain_pct";

/// Client address of interface `i` before any renumbering.
pub fn client_ip(iface: usize) -> Ipv4Addr {
    Ipv4Addr::new(10, iface as u8 + 1, 0, 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub variant: Variant,
    pub delay_ms: u64,
    pub loss_rate: f64,
    pub nat_mode: NatMode,
    /// `None` disables handovers.
    pub handover: Option<HandoverSchedule>,
    pub interfaces: u8,
    pub total_messages: u64,
    pub payload_len: usize,
    pub send_interval_ms: u64,
    pub app_timeout_ms: u64,
    pub idle_timeout_ms: u64,
    pub redirect_retx_ms: u64,
    /// Drop this many AddressRedirect transmissions before letting one through.
    pub redirect_drops: u32,
    pub seed: u64,
    pub repeats: u32,
    pub cap_ms: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            variant: Variant::Baseline,
            delay_ms: 5,
            loss_rate: 0.0,
            nat_mode: NatMode::None,
            handover: None,
            interfaces: 1,
            total_messages: ClientConfig::DEFAULT_TOTAL_MESSAGES,
            payload_len: ClientConfig::DEFAULT_PAYLOAD_LEN,
            send_interval_ms: 0,
            app_timeout_ms: ClientConfig::DEFAULT_APP_TIMEOUT_MS,
            idle_timeout_ms: ServerConfig::DEFAULT_IDLE_TIMEOUT_MS,
            redirect_retx_ms: ServerConfig::DEFAULT_REDIRECT_RETX_MS,
            redirect_drops: 0,
            seed: 1,
            repeats: 5,
            cap_ms: DEFAULT_CAP_MS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for '{key}': {reason}")]
    BadValue {
        line: usize,
        key: String,
        reason: String,
    },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

impl ScenarioConfig {
    /// The handover experiment: a client interface goes down every 10 s
    /// (plus up to 500 ms of jitter) for 200 ms and returns with a new
    /// address; 600 messages spaced at least 80 ms apart.
    pub fn handover_benchmark(variant: Variant, interfaces: u8, delay_ms: u64) -> Self {
        ScenarioConfig {
            variant,
            delay_ms,
            interfaces,
            handover: Some(HandoverSchedule {
                jitter_ms: BENCHMARK_HANDOVER_JITTER_MS,
                ..HandoverSchedule::every(10_000)
            }),
            send_interval_ms: BENCHMARK_SEND_INTERVAL_MS,
            ..ScenarioConfig::default()
        }
    }

    /// `baseline`, `ipc`, `tcs`, with `-multi` appended for two interfaces.
    pub fn label(&self) -> String {
        Contender {
            variant: self.variant,
            interfaces: self.interfaces,
        }
        .to_string()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if !(1..=2).contains(&self.interfaces) {
            return bad("interfaces must be 1 or 2");
        }
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return bad("loss-rate must lie in [0, 1]");
        }
        if self.total_messages == 0 {
            return bad("messages must be positive");
        }
        if self.app_timeout_ms == 0 || self.idle_timeout_ms == 0 || self.redirect_retx_ms == 0 {
            return bad("timeouts must be positive");
        }
        if self.payload_len < crate::wire::DataPayload::MIN_LEN
            || self.payload_len > wire::MAX_PAYLOAD_LEN
        {
            return bad("payload-len must be between 8 and 65535");
        }
        if self.repeats == 0 {
            return bad("repeats must be positive");
        }
        if let Some(h) = self.handover {
            if h.validate().is_err() {
                return bad("handover period must exceed downtime plus jitter");
            }
        }
        Ok(())
    }

    /// Applies one `key = value` setting. Keys match the CLI flag names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| e.to_string())
        }
        let key = key.replace('_', "-");
        match key.as_str() {
            "variant" => {
                let c: Contender = value.parse()?;
                self.variant = c.variant;
                self.interfaces = c.interfaces;
            }
            "delay-ms" => self.delay_ms = num(value)?,
            "loss-rate" => self.loss_rate = num(value)?,
            "nat" => self.nat_mode = value.parse()?,
            "handover-period-ms" => {
                let period: u64 = num(value)?;
                self.handover = match (period, self.handover) {
                    (0, _) => None,
                    (p, Some(h)) => Some(HandoverSchedule { period_ms: p, ..h }),
                    (p, None) => Some(HandoverSchedule::every(p)),
                };
            }
            "handover-downtime-ms" => {
                let downtime: u64 = num(value)?;
                let h = self
                    .handover
                    .as_mut()
                    .ok_or("set handover-period-ms first")?;
                h.downtime_ms = downtime;
            }
            "handover-renumber" => {
                let renumber: bool = num(value)?;
                let h = self
                    .handover
                    .as_mut()
                    .ok_or("set handover-period-ms first")?;
                h.renumber = renumber;
            }
            "handover-jitter-ms" => {
                let jitter: u64 = num(value)?;
                let h = self
                    .handover
                    .as_mut()
                    .ok_or("set handover-period-ms first")?;
                h.jitter_ms = jitter;
            }
            "interfaces" => self.interfaces = num(value)?,
            "messages" => self.total_messages = num(value)?,
            "payload-len" => self.payload_len = num(value)?,
            "send-interval-ms" => self.send_interval_ms = num(value)?,
            "app-timeout-ms" => self.app_timeout_ms = num(value)?,
            "idle-timeout-ms" => self.idle_timeout_ms = num(value)?,
            "redirect-retx-ms" => self.redirect_retx_ms = num(value)?,
            "redirect-drops" => self.redirect_drops = num(value)?,
            "seed" => self.seed = num(value)?,
            "repeats" => self.repeats = num(value)?,
            "cap-ms" => self.cap_ms = num(value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of `self`. `#` starts a comment.
    /// `handover-period-ms` is applied before the other handover keys, so
    /// line order does not matter.
    pub fn parse_overrides(mut self, text: &str) -> Result<Self, ConfigError> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or(ConfigError::Syntax { line })?;
            entries.push((line, key.trim(), value.trim()));
        }
        let is_period = |key: &str| key.replace('_', "-") == "handover-period-ms";
        entries.sort_by_key(|&(_, key, _)| !is_period(key));
        for (line, key, value) in entries {
            if let Err(reason) = self.set(key, value) {
                return Err(if reason.starts_with("unknown key") {
                    ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    }
                } else {
                    ConfigError::BadValue {
                        line,
                        key: key.to_string(),
                        reason,
                    }
                });
            }
        }
        Ok(self)
    }

    /// Renders the config in the format `parse_overrides` reads.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("variant", self.label());
        kv("delay-ms", self.delay_ms.to_string());
        kv("loss-rate", self.loss_rate.to_string());
        kv("nat", self.nat_mode.to_string());
        match self.handover {
            Some(h) => {
                kv("handover-period-ms", h.period_ms.to_string());
                kv("handover-downtime-ms", h.downtime_ms.to_string());
                kv("handover-renumber", h.renumber.to_string());
                kv("handover-jitter-ms", h.jitter_ms.to_string());
            }
            None => kv("handover-period-ms", "0".to_string()),
        }
        kv("messages", self.total_messages.to_string());
        kv("payload-len", self.payload_len.to_string());
        kv("send-interval-ms", self.send_interval_ms.to_string());
        kv("app-timeout-ms", self.app_timeout_ms.to_string());
        kv("idle-timeout-ms", self.idle_timeout_ms.to_string());
        kv("redirect-retx-ms", self.redirect_retx_ms.to_string());
        kv("redirect-drops", self.redirect_drops.to_string());
        kv("seed", self.seed.to_string());
        kv("repeats", self.repeats.to_string());
        kv("cap-ms", self.cap_ms.to_string());
        out
    }
}

/// A variant plus interface count, e.g. `tcs-multi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Contender {
    pub variant: Variant,
    pub interfaces: u8,
}

impl Contender {
    pub const BASELINE: Contender = Contender {
        variant: Variant::Baseline,
        interfaces: 1,
    };
    pub const TCS: Contender = Contender {
        variant: Variant::Tcs,
        interfaces: 1,
    };
    pub const TCS_MULTI: Contender = Contender {
        variant: Variant::Tcs,
        interfaces: 2,
    };
}

impl fmt::Display for Contender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.variant.as_str())?;
        if self.interfaces > 1 {
            f.write_str("-multi")?;
        }
        Ok(())
    }
}

impl FromStr for Contender {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, interfaces) = match s.strip_suffix("-multi") {
            Some(name) => (name, 2),
            None => (s, 1),
        };
        Ok(Contender {
            variant: name.parse()?,
            interfaces,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunMetrics {
    pub label: String,
    pub delay_ms: u64,
    pub seed: u64,
    /// First ClientHello to last DataAck; zero if the run did not finish.
    pub wct_ms: u64,
    pub acked: u64,
    pub handshakes_completed: u64,
    pub handshake_flights_after_establish: u64,
    pub mid_session_handovers: u64,
    pub datagrams_sent: u64,
    pub datagrams_received: u64,
    pub retransmissions: u64,
    pub client_timeouts: u64,
    pub redirect_transmissions: u64,
    /// Source addresses of every ServerHello the server sent.
    pub server_hello_sources: Vec<SocketAddrV4>,
    pub recovery_latencies_ms: Vec<u64>,
    pub end_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("scenario did not complete within {cap_ms} ms ({} of {total} acknowledged)", partial.acked)]
    Timeout {
        cap_ms: u64,
        total: u64,
        partial: Box<RunMetrics>,
    },
}

/// A built but not yet run scenario. The network is exposed so callers can
/// script extra events or drops before driving it.
pub struct Scenario {
    pub net: Network,
    pub server: HostId,
    pub client: HostId,
    cfg: ScenarioConfig,
}

impl Scenario {
    /// Builds the topology and attaches both endpoints. Event recording is
    /// on when `record` is set.
    pub fn new(cfg: &ScenarioConfig, record: bool) -> Result<Self, ScenarioError> {
        cfg.validate()?;
        let mut net = Network::new(LinkConfig {
            delay_ms: cfg.delay_ms,
            loss_rate: cfg.loss_rate,
            seed: cfg.seed,
        })?;
        net.set_recording(record);
        net.set_describer(wire::describe);
        if cfg.nat_mode != NatMode::None {
            net.set_nat(NatPolicy::new(cfg.nat_mode), NAT_EXTERNAL_IP);
        }
        if cfg.redirect_drops > 0 {
            let mut remaining = cfg.redirect_drops;
            net.set_drop_filter(Box::new(move |dgram| {
                let is_redirect = WireMessage::decode(&dgram.bytes)
                    .is_ok_and(|m| m.msg_type == MessageType::AddressRedirect);
                if is_redirect && remaining > 0 {
                    remaining -= 1;
                    return true;
                }
                false
            }));
        }

        let welcome = SocketAddrV4::new(SERVER_IP, WELCOME_PORT);
        let server = net.add_host("server", &[SERVER_IP], false);
        let ips: Vec<Ipv4Addr> = (0..cfg.interfaces as usize).map(client_ip).collect();
        let client = net.add_host("client", &ips, cfg.nat_mode != NatMode::None);

        if let Some(schedule) = cfg.handover {
            let n = u64::from(cfg.interfaces);
            for i in 0..n {
                let staggered = HandoverSchedule {
                    offset_ms: schedule.offset_ms + i * schedule.period_ms / n,
                    ..schedule
                };
                net.add_handover(client, IfaceId(i as u32), staggered)?;
            }
        }

        let server_cfg = ServerConfig {
            idle_timeout_ms: cfg.idle_timeout_ms,
            redirect_retx_ms: cfg.redirect_retx_ms,
            seed: cfg.seed,
            ..ServerConfig::new(welcome, cfg.variant)
        };
        net.attach(server, Box::new(Server::new(server_cfg)?));
        let client_cfg = ClientConfig {
            app_timeout_ms: cfg.app_timeout_ms,
            total_messages: cfg.total_messages,
            payload_len: cfg.payload_len,
            send_interval_ms: cfg.send_interval_ms,
            ..ClientConfig::new(welcome, cfg.variant)
        };
        net.attach(client, Box::new(Client::new(client_cfg)?));
        Ok(Scenario {
            net,
            server,
            client,
            cfg: cfg.clone(),
        })
    }

    pub fn client(&self) -> &Client {
        self.net
            .endpoint::<Client>(self.client)
            .expect("client attached")
    }

    pub fn server(&self) -> &Server {
        self.net
            .endpoint::<Server>(self.server)
            .expect("server attached")
    }

    /// Steps until the client is done or the next event lies past the cap.
    /// `on_step` runs after every event. Returns whether the client finished.
    pub fn drive(&mut self, mut on_step: impl FnMut(&mut Network)) -> bool {
        loop {
            if self.client().is_done() {
                return true;
            }
            match self.net.next_event_time() {
                Some(t) if t <= self.cfg.cap_ms => {
                    self.net.step();
                    on_step(&mut self.net);
                }
                _ => return false,
            }
        }
    }

    pub fn metrics(&self) -> RunMetrics {
        let client = self.client();
        let server = self.server();
        let m = client.metrics();
        let (cc, sc) = (
            self.net.counters(self.client),
            self.net.counters(self.server),
        );
        RunMetrics {
            label: self.cfg.label(),
            delay_ms: self.cfg.delay_ms,
            seed: self.cfg.seed,
            wct_ms: m.wct_ms().unwrap_or(0),
            acked: client.acked_count(),
            handshakes_completed: m.handshakes_completed,
            handshake_flights_after_establish: m.handshake_flights_after_establish,
            mid_session_handovers: m.mid_session_handovers,
            datagrams_sent: cc.sent + sc.sent,
            datagrams_received: cc.received + sc.received,
            retransmissions: m.retransmissions,
            client_timeouts: m.timeouts,
            redirect_transmissions: server.stats().redirect_transmissions,
            server_hello_sources: server.stats().server_hellos.clone(),
            recovery_latencies_ms: m.recovery_latencies_ms.clone(),
            end_time_ms: self.net.now(),
        }
    }

    /// Metrics if the client finished, otherwise a timeout carrying them.
    pub fn outcome(&self, completed: bool) -> Result<RunMetrics, ScenarioError> {
        let metrics = self.metrics();
        if completed {
            Ok(metrics)
        } else {
            Err(ScenarioError::Timeout {
                cap_ms: self.cfg.cap_ms,
                total: self.cfg.total_messages,
                partial: Box::new(metrics),
            })
        }
    }
}

/// Runs one scenario to completion or to the virtual-time cap.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunMetrics, ScenarioError> {
    let mut sc = Scenario::new(cfg, false)?;
    let completed = sc.drive(|_| {});
    sc.outcome(completed)
}

/// Like [`run_scenario`], also returning every trace line in order.
pub fn run_traced(cfg: &ScenarioConfig) -> (Result<RunMetrics, ScenarioError>, Vec<String>) {
    let mut lines = Vec::new();
    let mut sc = match Scenario::new(cfg, true) {
        Ok(sc) => sc,
        Err(err) => return (Err(err), lines),
    };
    let mut drain = |net: &mut Network| {
        lines.extend(net.take_events().iter().map(ToString::to_string));
    };
    drain(&mut sc.net);
    let completed = sc.drive(&mut drain);
    (sc.outcome(completed), lines)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub base: ScenarioConfig,
    pub delays: Vec<u64>,
    /// Contenders compared against the baseline, which always runs.
    pub contenders: Vec<Contender>,
}

impl SweepPlan {
    /// The three delays and the two TCS contenders of the handover experiment.
    pub fn handover_benchmark() -> Self {
        SweepPlan {
            base: ScenarioConfig::handover_benchmark(Variant::Baseline, 1, 5),
            delays: vec![5, 30, 100],
            contenders: vec![Contender::TCS, Contender::TCS_MULTI],
        }
    }

    fn rows(&self) -> Vec<(u64, Contender)> {
        let mut rows = Vec::new();
        for &delay in &self.delays {
            rows.push((delay, Contender::BASELINE));
            for &c in &self.contenders {
                if c != Contender::BASELINE {
                    rows.push((delay, c));
                }
            }
        }
        rows
    }

    pub fn config_for(&self, delay_ms: u64, c: Contender, repeat: u32) -> ScenarioConfig {
        ScenarioConfig {
            variant: c.variant,
            interfaces: c.interfaces,
            delay_ms,
            seed: self.base.seed + u64::from(repeat),
            ..self.base.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub delay_ms: u64,
    pub contender: Contender,
    pub runs: Vec<Result<RunMetrics, ScenarioError>>,
    /// Mean over successful repeats.
    pub wct_ms: Option<f64>,
    /// Mean of per-seed gains against the baseline; zero for the baseline.
    pub gain_pct: Option<f64>,
}

impl SweepRow {
    pub fn errors(&self) -> impl Iterator<Item = &ScenarioError> {
        self.runs.iter().filter_map(|r| r.as_ref().err())
    }
}

pub fn gain_pct(baseline_wct: u64, variant_wct: u64) -> f64 {
    100.0 * (baseline_wct as f64 - variant_wct as f64) / baseline_wct as f64
}

/// Runs every (delay, contender, repeat) combination, in parallel, and
/// merges the results in plan order.
pub fn sweep(plan: &SweepPlan) -> Vec<SweepRow> {
    let rows = plan.rows();
    let repeats = plan.base.repeats.max(1);
    let jobs: Vec<ScenarioConfig> = rows
        .iter()
        .flat_map(|&(d, c)| (0..repeats).map(move |r| plan.config_for(d, c, r)))
        .collect();
    let results: Vec<_> = jobs.par_iter().map(run_scenario).collect();
    let mut results = results.into_iter();
    let mut out: Vec<SweepRow> = rows
        .iter()
        .map(|&(delay_ms, contender)| SweepRow {
            delay_ms,
            contender,
            runs: results.by_ref().take(repeats as usize).collect(),
            wct_ms: None,
            gain_pct: None,
        })
        .collect();

    for row in &mut out {
        let ok: Vec<u64> = row.runs.iter().flatten().map(|m| m.wct_ms).collect();
        if !ok.is_empty() {
            row.wct_ms = Some(ok.iter().sum::<u64>() as f64 / ok.len() as f64);
        }
    }
    let baselines: Vec<(u64, Vec<Option<u64>>)> = out
        .iter()
        .filter(|r| r.contender == Contender::BASELINE)
        .map(|r| {
            let wcts = r
                .runs
                .iter()
                .map(|m| m.as_ref().ok().map(|m| m.wct_ms))
                .collect();
            (r.delay_ms, wcts)
        })
        .collect();
    for row in &mut out {
        let Some((_, base)) = baselines.iter().find(|(d, _)| *d == row.delay_ms) else {
            continue;
        };
        let gains: Vec<f64> = row
            .runs
            .iter()
            .zip(base)
            .filter_map(|(run, b)| Some(gain_pct((*b)?, run.as_ref().ok()?.wct_ms)))
            .collect();
        if gains.len() == row.runs.len() && !gains.is_empty() {
            row.gain_pct = Some(gains.iter().sum::<f64>() / gains.len() as f64);
        }
    }
    out
}

/// Reference gains (percent) for the handover experiment, by contender and delay.
pub fn reference_gain(c: Contender, delay_ms: u64) -> Option<f64> {
    let table: &[(Contender, u64, f64)] = &[
        (Contender::TCS, 5, 8.35),
        (Contender::TCS, 30, 13.63),
        (Contender::TCS, 100, 15.22),
        (Contender::TCS_MULTI, 5, 16.61),
        (Contender::TCS_MULTI, 30, 17.48),
        (Contender::TCS_MULTI, 100, 23.42),
    ];
    table
        .iter()
        .find(|(tc, d, _)| *tc == c && *d == delay_ms)
        .map(|&(_, _, g)| g)
}

fn opt(value: Option<f64>, places: usize) -> String {
    value.map_or_else(String::new, |v| format!("{v:.places$}"))
}

pub fn render_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            row.delay_ms,
            row.contender,
            opt(row.wct_ms, 1),
            opt(row.gain_pct, 2)
        );
    }
    out
}

/// CSV for single runs; gain is left empty because no baseline is paired.
pub fn render_runs_csv(runs: &[RunMetrics]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for m in runs {
        let _ = writeln!(out, "{},{},{},", m.delay_ms, m.label, m.wct_ms);
    }
    out
}

pub fn render_table(rows: &[SweepRow]) -> String {
    let header = [
        "delay_ms",
        "variant",
        "wct_ms",
        "gain_pct",
        "reference_gain_pct",
        "errors",
    ];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.delay_ms.to_string(),
                r.contender.to_string(),
                opt(r.wct_ms, 1),
                opt(r.gain_pct, 2),
                opt(reference_gain(r.contender, r.delay_ms), 2),
                r.errors().count().to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for cells in &body {
        for (w, c) in widths.iter_mut().zip(cells) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&header);
    for cells in &body {
        let refs: Vec<&str> = cells.iter().map(String::as_str).collect();
        line(&refs);
    }
    out
}

/// Writes `csv` to `path`, creating parent directories.
pub fn write_report(path: &Path, csv: &str) -> std::io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, csv)
}
