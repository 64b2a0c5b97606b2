use std::fs;
use std::process::{Command, Output};

use fastresume::bench::{
    render_csv, render_runs_csv, run_scenario, sweep, write_report, Contender, ScenarioConfig,
    SweepPlan, CSV_HEADER,
};
use fastresume::server::Variant;

fn small_plan() -> SweepPlan {
    let mut plan = SweepPlan::handover_benchmark();
    plan.base.total_messages = 150;
    plan.base.repeats = 2;
    plan.delays = vec![5, 30];
    plan
}

fn frbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frbench"))
        .args(args)
        .output()
        .expect("frbench runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn one_run_is_one_csv_row() {
    let cfg = ScenarioConfig {
        variant: Variant::Tcs,
        total_messages: 10,
        ..ScenarioConfig::default()
    };
    let m = run_scenario(&cfg).unwrap();
    let csv = render_runs_csv(std::slice::from_ref(&m));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines, [CSV_HEADER, &format!("5,tcs,{},", m.wct_ms)]);
}

#[test]
fn sweep_csv_has_a_row_per_delay_and_contender_and_is_reproducible() {
    let plan = small_plan();
    let a = render_csv(&sweep(&plan));
    let b = render_csv(&sweep(&plan));
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 1 + 2 * 3);
    let labels: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(
        labels,
        [
            "baseline",
            "tcs",
            "tcs-multi",
            "baseline",
            "tcs",
            "tcs-multi"
        ]
    );
    for line in &lines[1..] {
        let gain = line.rsplit(',').next().unwrap();
        assert!(!gain.is_empty(), "{line}");
        if line.contains(",baseline,") {
            assert_eq!(gain, "0.00");
        }
    }
}

#[test]
fn gains_are_means_of_per_seed_gains() {
    let plan = small_plan();
    let rows = sweep(&plan);
    let base = &rows[0];
    let tcs = &rows[1];
    assert_eq!(tcs.contender, Contender::TCS);
    let expect: f64 = base
        .runs
        .iter()
        .zip(&tcs.runs)
        .map(|(b, v)| {
            let (b, v) = (
                b.as_ref().unwrap().wct_ms as f64,
                v.as_ref().unwrap().wct_ms as f64,
            );
            (b - v) / b * 100.0
        })
        .sum::<f64>()
        / 2.0;
    assert!((tcs.gain_pct.unwrap() - expect).abs() < 1e-9);
}

#[test]
fn report_is_written_with_parent_directories() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/deeper/results.csv");
    write_report(&path, "a,b\n").unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), "a,b\n");
}

#[test]
fn unwritable_report_path_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    fs::write(&file, "x").unwrap();
    assert!(write_report(&file.join("under-a-file.csv"), "a\n").is_err());
}

#[test]
fn cli_run_reads_a_config_file_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("ipc.conf");
    fs::write(
        &conf,
        "# small IPC run\nvariant = ipc\nmessages = 7\ndelay-ms = 12\n",
    )
    .unwrap();
    let csv = dir.path().join("out/run.csv");
    let out = frbench(&[
        "run",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(
        text.lines()
            .any(|l| l.starts_with("variant") && l.ends_with(" ipc")),
        "{text}"
    );
    assert!(
        text.lines()
            .any(|l| l.starts_with("acked") && l.ends_with(" 7")),
        "{text}"
    );
    let written = fs::read_to_string(&csv).unwrap();
    assert_eq!(written.lines().count(), 2);
    assert!(written.lines().nth(1).unwrap().starts_with("12,ipc,"));
}

#[test]
fn cli_flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("c.conf");
    fs::write(&conf, "variant = ipc\nmessages = 50\n").unwrap();
    let out = frbench(&["run", "--config", conf.to_str().unwrap(), "--messages", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out)
        .lines()
        .any(|l| l.starts_with("acked") && l.ends_with(" 4")));
}

#[test]
fn cli_rejects_unknown_config_keys_with_the_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "variant = tcs\n\nwarp-factor = 9\n").unwrap();
    let out = frbench(&["run", "--config", conf.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.starts_with("frbench: "), "{err}");
    assert!(
        err.contains("line 3") && err.contains("warp-factor"),
        "{err}"
    );
}

#[test]
fn cli_fails_when_the_run_cannot_finish() {
    let out = frbench(&[
        "run",
        "--variant",
        "ipc",
        "--nat",
        "port-restricted",
        "--messages",
        "3",
        "--cap-ms",
        "20000",
    ]);
    assert!(!out.status.success());
    assert!(
        stderr(&out).contains("did not complete within 20000 ms"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn cli_trace_prints_timestamped_events() {
    let out = frbench(&["trace", "--variant", "tcs", "--messages", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.lines().all(|l| l.starts_with("t=")), "{text}");
    assert!(text.contains("AddressRedirect"));
    assert!(text.contains("CLI tcs"));
}

#[test]
fn cli_sweep_writes_the_comparison_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let out = frbench(&[
        "sweep",
        "--preset",
        "--delays",
        "5",
        "--variants",
        "tcs",
        "--messages",
        "100",
        "--repeats",
        "1",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("delay_ms"));
    let written = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = written.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("5,baseline,"));
    assert!(lines[2].starts_with("5,tcs,"));
}
