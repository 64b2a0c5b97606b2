//! Acceptance run: every criterion prints one PASS or FAIL line, and the
//! process exits nonzero if any fails.

mod common;

use std::net::SocketAddrV4;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{all_tables, build_stack, observed, probes, reference_dispatch, ReferenceWindow};
use fastresume::bench::{
    reference_gain, render_csv, render_runs_csv, run_scenario, run_traced, sweep, Contender,
    RunMetrics, ScenarioConfig, ScenarioError, SweepPlan, SweepRow,
};
use fastresume::netsim::{HandoverSchedule, NatMode};
use fastresume::server::Variant;
use fastresume::session::{generate_cookie, Role, ServerSecret, Session};
use fastresume::wire::{MessageType, SessionId, WireMessage, MAC_LEN, OVERHEAD_LEN};

const DELAYS: [u64; 3] = [5, 30, 100];
const THIRTY_MINUTES_MS: u64 = 30 * 60 * 1000;

type Verdict = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Verdict + 'a>);

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn wct(row: &SweepRow, seed: usize) -> Result<u64, String> {
    row.runs[seed]
        .as_ref()
        .map(|m| m.wct_ms)
        .map_err(|e| format!("{} at {} ms: {e}", row.contender, row.delay_ms))
}

fn row(rows: &[SweepRow], delay: u64, c: Contender) -> &SweepRow {
    rows.iter()
        .find(|r| r.delay_ms == delay && r.contender == c)
        .expect("sweep covers every delay and contender")
}

fn ordering(rows: &[SweepRow], seconds: f64) -> Verdict {
    let mut runs = 0;
    for d in DELAYS {
        let (b, t, m) = (
            row(rows, d, Contender::BASELINE),
            row(rows, d, Contender::TCS),
            row(rows, d, Contender::TCS_MULTI),
        );
        for s in 0..b.runs.len() {
            let (wb, wt, wm) = (wct(b, s)?, wct(t, s)?, wct(m, s)?);
            check(wb > wt && wt > wm, || {
                format!("delay {d} ms seed #{s}: baseline {wb}, tcs {wt}, tcs-multi {wm}")
            })?;
            runs += 1;
        }
    }
    Ok(format!(
        "{runs} seed/delay triples ordered, sweep took {seconds:.1} s"
    ))
}

fn monotonicity(rows: &[SweepRow]) -> Verdict {
    let mut report = Vec::new();
    let mut failures = Vec::new();
    for c in [Contender::TCS, Contender::TCS_MULTI] {
        let gains: Vec<f64> = DELAYS
            .iter()
            .map(|&d| {
                row(rows, d, c)
                    .gain_pct
                    .ok_or(format!("{c} at {d} ms has no gain"))
            })
            .collect::<Result<_, _>>()?;
        let cells: Vec<String> = DELAYS
            .iter()
            .zip(&gains)
            .map(|(&d, g)| {
                format!(
                    "{g:.2} (ref {:.2})",
                    reference_gain(c, d).unwrap_or(f64::NAN)
                )
            })
            .collect();
        report.push(format!("{c}: {}", cells.join(" -> ")));
        if gains.windows(2).any(|w| w[1] < w[0]) {
            failures.push(c.to_string());
        }
    }
    let text = report.join("; ");
    if failures.is_empty() {
        Ok(text)
    } else {
        Err(format!("not monotone for {}: {text}", failures.join(", ")))
    }
}

fn zero_rehandshake() -> Verdict {
    let mut checked = 0;
    let mut min_handovers = u64::MAX;
    for seed in 1..=5 {
        let base = ScenarioConfig {
            seed,
            ..ScenarioConfig::handover_benchmark(Variant::Baseline, 1, 100)
        };
        for (variant, interfaces) in [(Variant::Ipc, 1), (Variant::Tcs, 1), (Variant::Tcs, 2)] {
            let cfg = ScenarioConfig {
                variant,
                interfaces,
                ..base.clone()
            };
            let m = run_scenario(&cfg).map_err(|e| format!("{}: {e}", cfg.label()))?;
            check(m.mid_session_handovers >= 10, || {
                format!(
                    "{} seed {seed}: only {} handovers",
                    m.label, m.mid_session_handovers
                )
            })?;
            check(m.handshake_flights_after_establish == 0, || {
                format!(
                    "{} seed {seed}: {} handshake flights after establishment",
                    m.label, m.handshake_flights_after_establish
                )
            })?;
            min_handovers = min_handovers.min(m.mid_session_handovers);
            checked += 1;
        }
        let m = run_scenario(&base).map_err(|e| format!("baseline: {e}"))?;
        check(
            m.handshakes_completed == 1 + m.mid_session_handovers,
            || {
                format!(
                    "baseline seed {seed}: {} handshakes for {} handovers",
                    m.handshakes_completed, m.mid_session_handovers
                )
            },
        )?;
        checked += 1;
    }
    Ok(format!(
        "{checked} runs, at least {min_handovers} handovers each"
    ))
}

fn nat_run(variant: Variant, nat: NatMode, handover: bool) -> Result<RunMetrics, ScenarioError> {
    let mut cfg = ScenarioConfig {
        variant,
        nat_mode: nat,
        total_messages: 20,
        cap_ms: THIRTY_MINUTES_MS,
        ..ScenarioConfig::default()
    };
    if handover {
        cfg.handover = Some(HandoverSchedule::every(2000));
        cfg.total_messages = 100;
        cfg.send_interval_ms = 50;
    }
    run_scenario(&cfg)
}

fn nat_matrix() -> Verdict {
    for nat in [NatMode::PortRestricted, NatMode::Symmetric] {
        match nat_run(Variant::Ipc, nat, false) {
            Err(ScenarioError::Timeout {
                partial, cap_ms, ..
            }) => check(
                partial.handshakes_completed == 0 && cap_ms == THIRTY_MINUTES_MS,
                || {
                    format!(
                        "ipc behind {nat}: {} handshakes",
                        partial.handshakes_completed
                    )
                },
            )?,
            other => {
                return Err(format!(
                    "ipc behind {nat} should never establish, got {other:?}"
                ))
            }
        }
    }
    for nat in [NatMode::None, NatMode::FullCone] {
        nat_run(Variant::Ipc, nat, false).map_err(|e| format!("ipc behind {nat}: {e}"))?;
    }
    for nat in NatMode::ALL {
        let m = nat_run(Variant::Tcs, nat, false).map_err(|e| format!("tcs behind {nat}: {e}"))?;
        check(m.handshakes_completed == 1, || {
            format!("tcs behind {nat}: {m:?}")
        })?;
    }
    for nat in [NatMode::None, NatMode::FullCone] {
        let m = nat_run(Variant::Tcs, nat, true)
            .map_err(|e| format!("tcs handover behind {nat}: {e}"))?;
        check(
            m.mid_session_handovers > 0 && m.handshake_flights_after_establish == 0,
            || format!("tcs handover behind {nat}: {m:?}"),
        )?;
    }
    let recorded: Vec<String> = [
        NatMode::AddressRestricted,
        NatMode::PortRestricted,
        NatMode::Symmetric,
    ]
    .into_iter()
    .map(|nat| match nat_run(Variant::Tcs, nat, true) {
        Ok(m) => format!("{nat} resumed ({} handovers)", m.mid_session_handovers),
        Err(e) => format!("{nat} did not finish ({e})"),
    })
    .collect();
    Ok(format!(
        "recorded tcs after handover: {}",
        recorded.join(", ")
    ))
}

fn redirect_liveness() -> Verdict {
    for k in [1u32, 2, 5] {
        let cfg = ScenarioConfig {
            variant: Variant::Tcs,
            total_messages: 3,
            redirect_drops: k,
            ..ScenarioConfig::default()
        };
        let (result, lines) = run_traced(&cfg);
        let m = result.map_err(|e| format!("k={k}: {e}"))?;
        check(m.redirect_transmissions == u64::from(k) + 1, || {
            format!("k={k}: {} redirect transmissions", m.redirect_transmissions)
        })?;
        let times: Vec<u64> = lines
            .iter()
            .filter(|l| l.contains(" SEND ") && l.contains(" AddressRedirect "))
            .map(|l| l[2..].split(' ').next().unwrap().parse().unwrap())
            .collect();
        check(times.windows(2).all(|w| w[1] - w[0] == 500), || {
            format!("k={k}: redirect times {times:?}")
        })?;
    }
    Ok("k = 1, 2, 5 complete with k + 1 redirects 500 ms apart".into())
}

fn dispatch_oracle() -> Verdict {
    let tables = all_tables();
    let mut agree = 0;
    let mut total = 0;
    for table in &tables {
        for (src, dst) in probes() {
            let (mut stack, ids) = build_stack(table);
            total += 1;
            if observed(&ids, stack.deliver(src, dst, vec![0]))
                == reference_dispatch(table, src, dst)
            {
                agree += 1;
            }
        }
    }
    let detail = format!(
        "{agree}/{total} probes agree over {} socket tables",
        tables.len()
    );
    if agree == total && tables.len() >= 48 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn seq_stream(rng: &mut ChaCha8Rng) -> Vec<u64> {
    let len = rng.gen_range(1..120);
    let mut base = rng.gen_range(0..1_000u64);
    (0..len)
        .map(|_| match rng.gen_range(0..10) {
            0 => {
                base += rng.gen_range(0..200);
                base
            }
            1 => base.saturating_sub(rng.gen_range(60..70)),
            _ => base + rng.gen_range(0..80),
        })
        .collect()
}

fn replay_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e9);
    let secret = ServerSecret::from_seed(77);
    let client: SocketAddrV4 = "10.1.0.1:1234".parse().unwrap();
    let mut decisions = 0u64;
    for stream in 0..10_000 {
        let cookie = generate_cookie(&secret, client, rng.gen());
        let tx = Session::from_cookie(&cookie.value, Role::Client);
        let mut rx = Session::from_cookie(&cookie.value, Role::Server);
        let mut reference = ReferenceWindow::default();
        for seq in seq_stream(&mut rng) {
            let msg = tx.seal_with_seq(
                WireMessage::new(MessageType::Data, seq.to_be_bytes().to_vec()),
                seq,
            );
            let got = rx.unprotect(&msg, client).is_ok();
            check(got == reference.accept(seq), || {
                format!("stream {stream}: seq {seq} accepted={got}")
            })?;
            decisions += 1;
        }
    }
    Ok(format!("10000 streams, {decisions} decisions agree"))
}

fn determinism() -> Verdict {
    for c in [
        Contender::BASELINE,
        Contender {
            variant: Variant::Ipc,
            interfaces: 1,
        },
        Contender::TCS,
        Contender::TCS_MULTI,
    ] {
        let mut cfg = ScenarioConfig::handover_benchmark(c.variant, c.interfaces, 30);
        cfg.loss_rate = 0.02;
        cfg.total_messages = 300;
        let (ra, ta) = run_traced(&cfg);
        let (rb, tb) = run_traced(&cfg);
        check(ta == tb, || format!("{c}: traces differ"))?;
        let (ma, mb) = (
            ra.map_err(|e| e.to_string())?,
            rb.map_err(|e| e.to_string())?,
        );
        check(render_runs_csv(&[ma]) == render_runs_csv(&[mb]), || {
            format!("{c}: CSV differs")
        })?;
    }
    let mut plan = SweepPlan::handover_benchmark();
    plan.base.total_messages = 200;
    plan.base.repeats = 2;
    check(
        render_csv(&sweep(&plan)) == render_csv(&sweep(&plan)),
        || "sweep CSV differs".into(),
    )?;
    Ok("traces and CSV identical across repeated runs".into())
}

fn closed_form() -> Verdict {
    let mut out = Vec::new();
    for d in DELAYS {
        // six one-way handshake flights, then one round trip per message
        let expect = 6 * d + 600 * 2 * d;
        let cfg = ScenarioConfig {
            variant: Variant::Baseline,
            delay_ms: d,
            ..ScenarioConfig::default()
        };
        let m = run_scenario(&cfg).map_err(|e| e.to_string())?;
        check(m.wct_ms == expect, || {
            format!("d={d}: wct {} != {expect}", m.wct_ms)
        })?;
        out.push(format!("{}", m.wct_ms));
    }
    Ok(format!("wct {} ms", out.join(" / ")))
}

fn random_message(rng: &mut ChaCha8Rng) -> WireMessage {
    let len = if rng.gen_bool(0.05) {
        rng.gen_range(0..4096)
    } else {
        rng.gen_range(0..96)
    };
    let mut payload = vec![0u8; len];
    rng.fill(&mut payload[..]);
    let mut mac = [0u8; MAC_LEN];
    rng.fill(&mut mac);
    WireMessage {
        session_id: SessionId(rng.gen()),
        seq: rng.gen(),
        mac,
        ..WireMessage::new(
            MessageType::ALL[rng.gen_range(0..MessageType::ALL.len())],
            payload,
        )
    }
}

fn wire_fuzz() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf022);
    let mut decoded = 0;
    for _ in 0..1_000_000 {
        let len = rng.gen_range(0..128);
        let mut bytes = vec![0u8; len];
        rng.fill(&mut bytes[..]);
        // bias half the inputs past the version, type and length checks
        if len >= OVERHEAD_LEN && rng.gen_bool(0.5) {
            bytes[0] = 1;
            bytes[1] = rng.gen_range(1..=8);
            let declared = if rng.gen_bool(0.8) {
                len - OVERHEAD_LEN
            } else {
                rng.gen_range(0..200)
            };
            bytes[18..20].copy_from_slice(&(declared as u16).to_be_bytes());
        }
        if WireMessage::decode(&bytes).is_ok() {
            decoded += 1;
        }
    }
    for i in 0..100_000 {
        let msg = random_message(&mut rng);
        let bytes = msg.encode().map_err(|e| e.to_string())?;
        check(bytes.len() == OVERHEAD_LEN + msg.payload.len(), || {
            format!("message {i}: length")
        })?;
        check(WireMessage::decode(&bytes).as_ref() == Ok(&msg), || {
            format!("message {i}: round trip")
        })?;
    }
    Ok(format!(
        "10^6 decodes without panic ({decoded} valid), 10^5 round trips"
    ))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let rows = sweep(&SweepPlan::handover_benchmark());
    let sweep_secs = started.elapsed().as_secs_f64();

    let criteria: Vec<Criterion> = vec![
        ("ordering", Box::new(|| ordering(&rows, sweep_secs))),
        ("monotonicity", Box::new(|| monotonicity(&rows))),
        ("zero rehandshake", Box::new(zero_rehandshake)),
        ("nat matrix", Box::new(nat_matrix)),
        ("redirect liveness", Box::new(redirect_liveness)),
        ("dispatch oracle", Box::new(dispatch_oracle)),
        ("replay oracle", Box::new(replay_oracle)),
        ("determinism", Box::new(determinism)),
        ("closed form", Box::new(closed_form)),
        ("wire fuzz", Box::new(wire_fuzz)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)) {
            Ok(Ok(detail)) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Ok(Err(detail)) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
            Err(_) => {
                failed += 1;
                println!("criterion {} {name}: FAIL (panicked)", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
