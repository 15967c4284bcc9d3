use std::fs;

use se23nav::harness::{
    emit_report, export_inputs, parse_report_csv, run_monte_carlo, run_replay, run_simulate, summary_path, Mode,
    ReplayPaths, RunConfig, RunReport, Summary,
};
use se23nav::measurements::{load_observations_csv, write_observations_csv};

fn short(duration: f64) -> RunConfig {
    RunConfig { duration, ..RunConfig::default() }
}

fn replay_cfg(dir: &std::path::Path, truth: bool) -> RunConfig {
    RunConfig {
        mode: Mode::Replay,
        replay: ReplayPaths {
            imu: Some(dir.join("imu.csv")),
            features: Some(dir.join("features.csv")),
            observations: Some(dir.join("observations.csv")),
            truth: truth.then(|| dir.join("truth.csv")),
        },
        ..RunConfig::default()
    }
}

fn without_wall(s: &Summary) -> Summary {
    Summary { wall_ms: 0.0, ..s.clone() }
}

#[test]
fn ten_seconds_gives_two_thousand_records() {
    let r = run_simulate(&short(10.0)).unwrap();
    assert_eq!(r.records.len(), 2000);
    assert!((r.records[1999].t - 10.0).abs() < 1e-12);
}

#[test]
fn exported_inputs_replay_to_the_same_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short(5.0);
    let inputs = se23nav::harness::synthesize(&cfg);
    export_inputs(&inputs, dir.path()).unwrap();
    let sim = se23nav::harness::run_inputs(&cfg, &inputs).unwrap();
    let rep = run_replay(&replay_cfg(dir.path(), true)).unwrap();
    assert_eq!(sim.records.len(), rep.records.len());
    for (a, b) in sim.records.iter().zip(&rep.records) {
        assert_eq!(a.t, b.t);
        let (ea, eb) = (a.e.unwrap_or([0.0; 4]), b.e.unwrap_or([0.0; 4]));
        for i in 0..4 {
            assert!((ea[i] - eb[i]).abs() < 1e-12);
        }
        assert!((a.att_err.unwrap() - b.att_err.unwrap()).abs() < 1e-12);
        assert!((a.pos_err.unwrap() - b.pos_err.unwrap()).abs() < 1e-12);
        assert!((a.vel_err.unwrap() - b.vel_err.unwrap()).abs() < 1e-12);
    }
}

#[test]
fn replay_without_truth_leaves_error_columns_blank() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = se23nav::harness::synthesize(&short(1.0));
    export_inputs(&inputs, dir.path()).unwrap();
    let rep = run_replay(&replay_cfg(dir.path(), false)).unwrap();
    assert!(rep.records.iter().all(|r| r.att_err.is_none() && r.pos_err.is_none() && r.vel_err.is_none()));
    assert!(rep.records.iter().any(|r| r.e.is_some()));
    assert!(rep.summary.steady_att_mse.is_nan());
}

#[test]
fn offset_frames_are_still_matched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short(2.0);
    let inputs = se23nav::harness::synthesize(&cfg);
    export_inputs(&inputs, dir.path()).unwrap();
    let obs = dir.path().join("observations.csv");
    let mut frames = load_observations_csv(&obs).unwrap();
    let dt = 1.0 / cfg.imu_rate;
    for f in &mut frames {
        f.t += 0.4 * dt;
    }
    write_observations_csv(fs::File::create(&obs).unwrap(), &frames).unwrap();
    let rep = run_replay(&replay_cfg(dir.path(), true)).unwrap();
    assert!(rep.warnings.is_empty(), "{:?}", rep.warnings);
    assert_eq!(rep.summary.frames_used, frames.len() - 1);

    let mut late = frames.last().unwrap().clone();
    late.t += 5.0 * dt;
    let mut twin = frames[3].clone();
    twin.t += 0.1 * dt;
    frames.insert(4, twin);
    frames.push(late);
    write_observations_csv(fs::File::create(&obs).unwrap(), &frames).unwrap();
    let rep = run_replay(&replay_cfg(dir.path(), true)).unwrap();
    assert_eq!(rep.warnings.len(), 2, "{:?}", rep.warnings);
    assert_eq!(rep.summary.frames_used, frames.len() - 3);
}

#[test]
fn report_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_simulate(&short(10.0)).unwrap();
    let path = dir.path().join("run.csv");
    emit_report(&r, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2001);
    assert!(text.starts_with("t,e1,e2,e3,e4,xi1,xi2,xi3,xi4,att_err,pos_err,vel_err,sig1,sig2,sig3,inflated\n"));
    assert_eq!(parse_report_csv(text.as_bytes()).unwrap(), r.records);

    let summary = fs::read_to_string(summary_path(&path)).unwrap();
    for key in ["steady_att_mse", "steady_pos_mse", "steady_vel_mse", "inflation_count", "diverged", "wall_ms"] {
        assert!(summary.lines().any(|l| l.starts_with(&format!("{key}="))), "missing {key}");
    }

    let empty = RunReport { records: vec![], summary: Summary::default(), warnings: vec![], final_state: None };
    let path = dir.path().join("empty.csv");
    emit_report(&empty, &path).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1);
}

#[test]
fn single_trial_batch_matches_simulation() {
    let cfg = short(5.0);
    let mc = run_monte_carlo(&cfg, 1).unwrap();
    let sim = run_simulate(&cfg).unwrap();
    assert_eq!(without_wall(&mc.trials[0].summary), without_wall(&sim.summary));
    assert_eq!(mc.stats.mean_e1_ms, sim.summary.steady_e1_ms);
}

#[test]
fn batches_are_deterministic() {
    let cfg = short(5.0);
    let a = run_monte_carlo(&cfg, 4).unwrap();
    let b = run_monte_carlo(&cfg, 4).unwrap();
    assert_eq!(a.stats, b.stats);
    let seeds: Vec<u64> = a.trials.iter().map(|t| t.seed).collect();
    assert_eq!(seeds, vec![42, 43, 44, 45]);
    assert!(run_monte_carlo(&cfg, 0).is_err());
}

#[test]
fn divergence_is_reported_not_raised() {
    let cfg = RunConfig { landmarks: se23nav::harness::LandmarkSpec { box_size: 10.0, ..Default::default() }, ..short(20.0) };
    let r = run_simulate(&cfg).unwrap();
    assert!(r.summary.diverged);
    assert!(r.summary.divergence.is_some());
}

#[test]
fn sixty_seconds_run_quickly() {
    let r = run_simulate(&RunConfig::default()).unwrap();
    assert!(r.summary.wall_ms < 5000.0, "{} ms", r.summary.wall_ms);
}
