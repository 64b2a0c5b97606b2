use std::fmt::Write as _;
use std::fs;
use std::io::{self, ErrorKind, Write as _};
use std::path::PathBuf;
use std::process::{self, ExitCode};

use clap::{Args, Parser, Subcommand};

use fastresume::bench::{
    render_csv, render_runs_csv, render_table, run_scenario, run_traced, sweep, write_report,
    Contender, ScenarioConfig, SweepPlan,
};
use fastresume::netsim::{HandoverSchedule, NatMode};

#[derive(Parser)]
#[command(
    name = "frbench",
    version,
    about = "Handover resumption benchmark over a simulated network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single scenario and print its metrics.
    Run(RunArgs),
    /// Sweep link delays and compare contenders against the baseline.
    Sweep(SweepArgs),
    /// Run one scenario and print every simulator event.
    Trace(RunArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// Load `key = value` settings; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the handover experiment preset (10 s period, paced sends).
    #[arg(long)]
    preset: bool,
    #[arg(long)]
    loss_rate: Option<f64>,
    #[arg(long)]
    nat: Option<NatMode>,
    /// 0 disables handovers.
    #[arg(long)]
    handover_period_ms: Option<u64>,
    #[arg(long)]
    handover_downtime_ms: Option<u64>,
    #[arg(long)]
    handover_jitter_ms: Option<u64>,
    #[arg(long)]
    messages: Option<u64>,
    #[arg(long)]
    payload_len: Option<usize>,
    #[arg(long)]
    send_interval_ms: Option<u64>,
    #[arg(long)]
    app_timeout_ms: Option<u64>,
    #[arg(long)]
    redirect_drops: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<u32>,
    #[arg(long)]
    cap_ms: Option<u64>,
    /// Write CSV results here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// baseline, ipc, tcs, or any of them with `-multi`.
    #[arg(long)]
    variant: Option<Contender>,
    #[arg(long)]
    delay_ms: Option<u64>,
    #[arg(long)]
    interfaces: Option<u8>,
    #[command(flatten)]
    scenario: ScenarioArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated delays in milliseconds.
    #[arg(long, value_delimiter = ',', default_value = "5,30,100")]
    delays: Vec<u64>,
    /// Comma-separated contenders; the baseline always runs.
    #[arg(long, value_delimiter = ',', default_value = "tcs,tcs-multi")]
    variants: Vec<Contender>,
    #[command(flatten)]
    scenario: ScenarioArgs,
}

impl ScenarioArgs {
    fn load(&self) -> Result<ScenarioConfig, String> {
        let mut cfg = if self.preset {
            SweepPlan::handover_benchmark().base
        } else {
            ScenarioConfig::default()
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            cfg = cfg
                .parse_overrides(&text)
                .map_err(|e| format!("{}: {e}", path.display()))?;
        }
        if let Some(v) = self.loss_rate {
            cfg.loss_rate = v;
        }
        if let Some(v) = self.nat {
            cfg.nat_mode = v;
        }
        if let Some(period) = self.handover_period_ms {
            cfg.handover = match (period, cfg.handover) {
                (0, _) => None,
                (p, Some(h)) => Some(HandoverSchedule { period_ms: p, ..h }),
                (p, None) => Some(HandoverSchedule::every(p)),
            };
        }
        if let Some(v) = self.handover_downtime_ms {
            let h = cfg
                .handover
                .as_mut()
                .ok_or("--handover-downtime-ms needs a handover period")?;
            h.downtime_ms = v;
        }
        if let Some(v) = self.handover_jitter_ms {
            let h = cfg
                .handover
                .as_mut()
                .ok_or("--handover-jitter-ms needs a handover period")?;
            h.jitter_ms = v;
        }
        if let Some(v) = self.messages {
            cfg.total_messages = v;
        }
        if let Some(v) = self.payload_len {
            cfg.payload_len = v;
        }
        if let Some(v) = self.send_interval_ms {
            cfg.send_interval_ms = v;
        }
        if let Some(v) = self.app_timeout_ms {
            cfg.app_timeout_ms = v;
        }
        if let Some(v) = self.redirect_drops {
            cfg.redirect_drops = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.repeats {
            cfg.repeats = v;
        }
        if let Some(v) = self.cap_ms {
            cfg.cap_ms = v;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

impl RunArgs {
    fn load(&self) -> Result<ScenarioConfig, String> {
        let mut cfg = self.scenario.load()?;
        if let Some(c) = self.variant {
            cfg.variant = c.variant;
            cfg.interfaces = c.interfaces;
        }
        if let Some(v) = self.interfaces {
            cfg.interfaces = v;
        }
        if let Some(v) = self.delay_ms {
            cfg.delay_ms = v;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

fn write_out(path: Option<&PathBuf>, csv: &str) -> Result<(), String> {
    match path {
        Some(path) => {
            write_report(path, csv).map_err(|e| format!("cannot write {}: {e}", path.display()))
        }
        None => Ok(()),
    }
}

/// Prints to stdout; a closed pipe (e.g. `| head`) ends the process quietly.
fn emit(text: &str) -> Result<(), String> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() == ErrorKind::BrokenPipe => process::exit(0),
        other => other.map_err(|e| format!("cannot write to stdout: {e}")),
    }
}

fn cmd_run(args: &RunArgs) -> Result<(), String> {
    let cfg = args.load()?;
    let m = run_scenario(&cfg).map_err(|e| e.to_string())?;
    write_out(
        args.scenario.out.as_ref(),
        &render_runs_csv(std::slice::from_ref(&m)),
    )?;
    let mut text = String::new();
    let mut row = |k: &str, v: String| {
        let _ = writeln!(text, "{k:<24} {v}");
    };
    row("variant", m.label);
    row("delay_ms", m.delay_ms.to_string());
    row("seed", m.seed.to_string());
    row("wct_ms", m.wct_ms.to_string());
    row("acked", m.acked.to_string());
    row("handshakes_completed", m.handshakes_completed.to_string());
    row(
        "handshake_flights_after",
        m.handshake_flights_after_establish.to_string(),
    );
    row("mid_session_handovers", m.mid_session_handovers.to_string());
    row("retransmissions", m.retransmissions.to_string());
    row("datagrams_sent", m.datagrams_sent.to_string());
    row("datagrams_received", m.datagrams_received.to_string());
    row(
        "recovery_latencies_ms",
        format!("{:?}", m.recovery_latencies_ms),
    );
    emit(&text)
}

fn cmd_trace(args: &RunArgs) -> Result<(), String> {
    let cfg = args.load()?;
    let (result, lines) = run_traced(&cfg);
    if let Ok(m) = &result {
        write_out(
            args.scenario.out.as_ref(),
            &render_runs_csv(std::slice::from_ref(m)),
        )?;
    }
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    emit(&text)?;
    result.map(drop).map_err(|e| e.to_string())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), String> {
    if args.delays.is_empty() {
        return Err("at least one delay is required".into());
    }
    let plan = SweepPlan {
        base: args.scenario.load()?,
        delays: args.delays.clone(),
        contenders: args.variants.clone(),
    };
    let rows = sweep(&plan);
    write_out(args.scenario.out.as_ref(), &render_csv(&rows))?;
    emit(&render_table(&rows))?;
    let errors: Vec<String> = rows
        .iter()
        .flat_map(|r| {
            r.errors()
                .map(move |e| format!("{} at {} ms: {e}", r.contender, r.delay_ms))
        })
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors.join("\n"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Trace(args) => cmd_trace(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("frbench: {msg}");
            ExitCode::FAILURE
        }
    }
}
