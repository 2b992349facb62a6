use std::process::Command;

use cycleguard::protection::SchemeKind;
use cycleguard::report::{cmd_alloc_bench, cmd_attack_matrix, cmd_compare, cmd_run, AllocBenchParams, Format, Report};
use cycleguard::scenario::Scenario;
use serde_json::Value;

fn ardupilot() -> Scenario {
    Scenario::bundled("ardupilot_like").unwrap()
}

fn schema() -> jsonschema::Validator {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/report.schema.json")).unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn assert_valid(report: &Report) {
    let doc: Value = serde_json::from_str(&report.to_json()).unwrap();
    let v = schema();
    let errors: Vec<String> = v.iter_errors(&doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

#[test]
fn every_report_matches_the_schema() {
    let sc = ardupilot();
    let (run, _) = cmd_run(&sc, SchemeKind::CycleOriented, 1, 50).unwrap();
    assert_valid(&Report::Run(run));
    let (empty, _) = cmd_run(&sc, SchemeKind::TaskOriented, 1, 0).unwrap();
    assert!(empty.frequencies.iter().all(|f| f.measured_hz.is_none()));
    assert_valid(&Report::Run(empty));
    assert_valid(&Report::Compare(cmd_compare(&sc, &SchemeKind::ALL, 1, 20).unwrap()));
    assert_valid(&Report::AttackMatrix(cmd_attack_matrix(&sc, 1, 200).unwrap()));
    let bench = cmd_alloc_bench(&AllocBenchParams::from_scenario(&sc, 100, 1).unwrap()).unwrap();
    assert_valid(&Report::AllocBench(bench));

    let cf = Scenario::bundled("crazyflie_like").unwrap();
    assert_valid(&Report::AttackMatrix(cmd_attack_matrix(&cf, 1, 200).unwrap()));
}

#[test]
fn reports_are_reproducible() {
    let sc = ardupilot();
    let once = || Report::Compare(cmd_compare(&sc, &SchemeKind::ALL, 42, 300).unwrap()).to_json();
    assert_eq!(once(), once());
    let matrix = || Report::AttackMatrix(cmd_attack_matrix(&sc, 42, 2000).unwrap()).to_json();
    assert_eq!(matrix(), matrix());
}

#[test]
fn compare_columns() {
    let sc = ardupilot();
    let same = cmd_compare(&sc, &[SchemeKind::CycleOriented, SchemeKind::CycleOriented], 3, 200).unwrap();
    assert_eq!(same.runs[0], same.runs[1]);

    let all = cmd_compare(&sc, &SchemeKind::ALL, 3, 400).unwrap();
    assert_eq!(all.runs.len(), 3);
    let freqs = |i: usize| all.runs[i].frequencies.iter().map(|f| f.measured_hz).collect::<Vec<_>>();
    assert_eq!(freqs(0), freqs(2));
    assert_eq!(all.runs[2].overhead.model_full_cycle.total_us, 67);
    assert_eq!(all.runs[1].overhead.model_full_cycle.total_us, 12 * 22);
    assert!(cmd_compare(&sc, &[SchemeKind::None], 3, 10).is_err());
}

#[test]
fn every_task_in_frequency_table() {
    for name in cycleguard::scenario::BUNDLED {
        let sc = Scenario::bundled(name).unwrap();
        let (r, _) = cmd_run(&sc, sc.default_scheme, sc.seed, 10).unwrap();
        let tasks: Vec<_> = r.frequencies.iter().map(|f| f.task.as_str()).collect();
        assert_eq!(tasks, sc.tasks.iter().map(|t| t.name.as_str()).collect::<Vec<_>>());
    }
}

/// Per-cycle used time re-derived from the exported trace.
#[test]
fn trace_csv_conserves_time() {
    let sc = ardupilot();
    let (_, trace) = cmd_run(&sc, SchemeKind::TaskOriented, 8, 64).unwrap();
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).unwrap();
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    let mut per_cycle: std::collections::BTreeMap<u64, (u64, u64, u64)> = Default::default();
    for row in rdr.records() {
        let row = row.unwrap();
        let cycle: u64 = row[0].parse().unwrap();
        let exec = match &row[2] {
            "executed" => u64::from(sc.tasks.iter().find(|t| t.name == row[1]).unwrap().exec_time_us),
            _ => 0,
        };
        let e = per_cycle.entry(cycle).or_insert((row[3].parse().unwrap(), row[4].parse().unwrap(), 0));
        e.2 += exec;
    }
    assert_eq!(per_cycle.len(), 64);
    for (cycle, (overhead, used, exec)) in per_cycle {
        assert_eq!(used, overhead + exec, "cycle {cycle}");
    }
}

#[test]
fn csv_output_has_one_row_per_task_and_scheme() {
    let sc = ardupilot();
    let report = Report::Compare(cmd_compare(&sc, &SchemeKind::ALL, 1, 10).unwrap());
    let mut buf = Vec::new();
    report.write(Format::Csv, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * sc.tasks.len());
    assert!(text.starts_with("scheme,task,"));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cycleguard")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.json");
    let ok = cli(&["run", "--horizon", "20", "--out", out.to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["report"], "run");

    assert_eq!(cli(&["run", "--scenario", "no/such/file.toml"]).status.code(), Some(2));

    let broken = dir.path().join("broken.toml");
    std::fs::write(&broken, "name = \"x\"\nf_m = [\n").unwrap();
    assert_eq!(cli(&["run", "--scenario", broken.to_str().unwrap()]).status.code(), Some(2));

    // 20 kHz leaves a 50 us cycle, less than the fixed protection overhead.
    let fast = dir.path().join("fast.toml");
    let src = Scenario::bundled_source("ardupilot_like").unwrap().replace("f_m = 400", "f_m = 20000");
    std::fs::write(&fast, src).unwrap();
    let underflow = cli(&["run", "--scenario", fast.to_str().unwrap(), "--horizon", "5"]);
    assert_eq!(underflow.status.code(), Some(3));

    let csv = cli(&["alloc-bench", "--trials", "50", "--format", "csv"]);
    assert_eq!(csv.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&csv.stdout).starts_with("order,"));

    let trace = dir.path().join("trace.csv");
    let traced = cli(&["run", "--horizon", "3", "--trace", trace.to_str().unwrap()]);
    assert_eq!(traced.status.code(), Some(0));
    assert!(std::fs::read_to_string(trace).unwrap().starts_with("cycle,task,status"));
}
