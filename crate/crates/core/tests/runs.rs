use std::fs;

use switchctl::experiments::output::{Summary, CSV_NAME, PLOT_NAMES, SUMMARY_NAME};
use switchctl::experiments::{
    emit_outputs, engine_config, flight_config, parse_config, read_csv, remark1_config, run_batch, run_experiment,
    run_remark, write_csv, RunResult,
};
use switchctl::synthesis::{InteriorPoint, SdpStatus};

fn flight() -> RunResult {
    run_experiment(&flight_config()).unwrap()
}

fn csv_of(run: &RunResult) -> Vec<u8> {
    let n_u = run.log.records[0].u.as_ref().unwrap().len();
    let mut out = Vec::new();
    write_csv(&run.log.records, n_u, &mut out).unwrap();
    out
}

#[test]
fn csv_has_one_row_per_step_and_round_trips() {
    let run = flight();
    let bytes = csv_of(&run);
    let text = String::from_utf8(bytes.clone()).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "k,x_1,x_2,u_1,u_2,mode,phase,aux_value,w_sigma_min,solved,feasible,gamma"
    );
    assert_eq!(lines.count(), run.config.horizon + 1);
    let parsed = read_csv(bytes.as_slice()).unwrap();
    assert_eq!(parsed, run.log.records);
    assert!(parsed.last().unwrap().u.is_none());
    assert_eq!(parsed.iter().map(|r| r.k).collect::<Vec<_>>(), (0..=200).collect::<Vec<i64>>());
}

#[test]
fn outputs_are_written_and_nonempty() {
    let run = flight();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_outputs(&run, dir.path()).unwrap();
    assert_eq!(files.csv, dir.path().join(CSV_NAME));
    assert_eq!(files.plots.len(), PLOT_NAMES.len());
    for p in &files.plots {
        let svg = fs::read_to_string(p).unwrap();
        assert!(svg.starts_with("<svg") && svg.len() > 1000, "{}", p.display());
    }
    let summary: Summary = serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_NAME)).unwrap()).unwrap();
    assert_eq!(summary, Summary::from_run(&run));
    assert!(summary.isps.is_some() && summary.bounds.is_some());
    assert!(!summary.event_log.is_empty());
    assert!(files.sdp_dumps.is_empty());
}

#[test]
fn aux_value_crosses_delta_v() {
    let run = flight();
    let dv = run.config.supervisor.delta_v;
    let aux: Vec<f64> = run.log.records.iter().map(|r| r.aux_value).collect();
    assert!(aux[0] > dv);
    assert!(aux.iter().any(|&v| v <= dv));
}

#[test]
fn sdp_dumps_follow_the_flag() {
    let mut cfg = flight_config();
    cfg.horizon = 30;
    cfg.output.dump_sdp = true;
    cfg.output.plots = false;
    let run = run_experiment(&cfg).unwrap();
    let solves = run.log.records.iter().filter(|r| r.solved).count();
    assert!(solves > 0);
    assert_eq!(run.sdp_dumps.len(), solves);
    let dir = tempfile::tempdir().unwrap();
    let files = emit_outputs(&run, dir.path()).unwrap();
    assert_eq!(files.sdp_dumps.len(), solves);
    assert!(files.plots.is_empty());
    let dump = switchctl::synthesis::SdpDump::robust(&run.sdp_dumps[0].to_problem().unwrap(), run.sdp_dumps[0].time);
    assert_eq!(dump, run.sdp_dumps[0]);
}

#[test]
fn identical_configs_give_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_outputs(&flight(), a.path()).unwrap();
    emit_outputs(&flight(), b.path()).unwrap();
    for name in [CSV_NAME, SUMMARY_NAME] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn seed_changes_the_trajectory() {
    let base = flight();
    let other = run_experiment(&flight_config().with_seed(8)).unwrap();
    assert_ne!(csv_of(&base), csv_of(&other));
    assert_eq!(other.log.metadata.seed, 8);
    assert_ne!(other.log.metadata.config_hash, base.log.metadata.config_hash);
}

#[test]
fn batch_matches_sequential_runs() {
    let cfgs = [flight_config(), engine_config()];
    let batch = run_batch(&cfgs);
    for (c, r) in cfgs.iter().zip(batch) {
        assert_eq!(csv_of(&r.unwrap()), csv_of(&run_experiment(c).unwrap()));
    }
}

#[test]
fn zero_disturbance_single_mode_decays_after_synthesis() {
    let text = r#"
name = "single"
seed = 3
horizon = 80

[system]
kind = "switched"

[[system.modes]]
a = [[0.977, 0.097], [0.002, 0.981]]
b = [[-0.013, -0.004], [-0.171, -0.051]]

[disturbance]
kind = "zero"

[supervisor]
lambda0 = 0.945
delta_v = 0.05
delta_eps = 0.2
alpha = 1.0
pe_target = 0.01

[offline]
input_amplitude = 0.3
x0 = [1.0, -1.0]
"#;
    let run = run_experiment(&parse_config(text).unwrap()).unwrap();
    let recs = &run.log.records;
    let last_solve = recs.iter().rposition(|r| r.solved).expect("at least one solve");
    let tail = &recs[last_solve + 1..];
    assert!(tail.len() > 30, "solving went on until {last_solve}");
    assert!(tail.iter().all(|r| r.phase == "hold" || r.phase == "dormant"));
    for w in tail.windows(2) {
        assert!(w[1].aux_value < w[0].aux_value, "aux rises at k = {}", w[1].k);
    }
    let worst = tail
        .windows(2)
        .map(|w| w[1].aux_value / w[0].aux_value)
        .fold(0.0, f64::max);
    assert!(worst < 0.99, "slowest one-step ratio {worst}");
    assert!(run.isps.unwrap().verdict);
}

#[test]
fn remark_fixture_reports_infeasible_noisy_window() {
    let rep = run_remark(&remark1_config(), &InteriorPoint::default()).unwrap();
    assert_eq!(rep.windows.len(), 2);
    let (clean, noisy) = (&rep.windows[0], &rep.windows[1]);
    assert_eq!((clean.rank, clean.status), (2, SdpStatus::Optimal));
    assert!(clean.gain.is_some());
    assert_eq!((noisy.rank, noisy.status), (1, SdpStatus::Infeasible));
    assert!(noisy.rank_margin < 1e-10 && !noisy.rank_condition);
    let json = serde_json::to_string(&rep).unwrap();
    assert_eq!(serde_json::from_str::<switchctl::experiments::RemarkReport>(&json).unwrap(), rep);
}

#[test]
fn engine_run_reports_isps_and_bounds_error() {
    let run = run_experiment(&engine_config()).unwrap();
    assert_eq!(run.log.records.len(), 201);
    assert_eq!(run.analysis_delta_x, Some(1e-4));
    assert!(run.isps.as_ref().unwrap().verdict);
    // The regime active on [52, 95) leaves two states without any input.
    assert!(run.bounds.is_none());
    assert!(run.bounds_error.as_deref().unwrap().contains("not controllable"));
    assert_eq!(run.log.records.iter().map(|r| r.mode).max(), Some(4));
}
