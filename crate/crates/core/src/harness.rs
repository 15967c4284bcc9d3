//! Run configuration, simulation and replay drivers, Monte Carlo batches and
//! report files.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::filter::{FilterError, FilterGains, NavigationFilter, PpfSetup, QuatFilterState};
use crate::liegroup::{
    attitude_distance, quat_to_rot, rot_to_quat, skew, upsilon, vex, NavState, Quaternion, Rotation, Vec3,
};
use crate::measurements::{
    aggregate, imu_sample, landmark_condition, load_features_csv, load_imu_csv, load_observations_csv, load_truth_csv,
    observe_features, random_landmarks, synth_trajectory, write_features_csv, write_imu_csv, write_observations_csv,
    write_truth_csv, Feature, FeatureMap, FeatureObservation, ImuSample, MeasurementError, NoiseSpec,
    ObservationFrame, ProfileParams, TrajectoryProfile,
};
use crate::ppf::{smooth_map, transform, PpfConfig, DEFAULT_ELL, DEFAULT_XI_INF};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("input: {0}")]
    Input(#[from] MeasurementError),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Filter(FilterError::Divergence { .. }) => 2,
            HarnessError::Filter(_) => 1,
            HarnessError::Io { .. } | HarnessError::Input(_) => 3,
        }
    }
}

fn io_error(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let context = context.into();
    move |source| HarnessError::Io { context, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Simulate,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkSpec {
    pub count: usize,
    /// Side of the cube the landmarks are drawn from (m).
    pub box_size: f64,
    /// Defaults to the trajectory center.
    pub center: Option<Vec3>,
    pub seed: u64,
}

impl Default for LandmarkSpec {
    fn default() -> Self {
        LandmarkSpec { count: 30, box_size: 4.0, center: None, seed: 7 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayPaths {
    pub imu: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub profile: TrajectoryProfile,
    pub duration: f64,
    pub imu_rate: f64,
    pub frame_rate: f64,
    pub std_omega: f64,
    pub std_accel: f64,
    pub std_feature: f64,
    pub landmarks: LandmarkSpec,
    pub ppf: PpfSetup,
    pub inflate: Option<[f64; 4]>,
    pub gains: FilterGains,
    pub initial: NavState,
    pub replay: ReplayPaths,
    pub output: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Simulate,
            profile: TrajectoryProfile::Circle(ProfileParams::default()),
            duration: 60.0,
            imu_rate: 200.0,
            frame_rate: 20.0,
            std_omega: 0.11,
            std_accel: 0.1,
            std_feature: 0.01,
            landmarks: LandmarkSpec::default(),
            ppf: PpfSetup::FromInitialError { xi_inf: DEFAULT_XI_INF, ell: DEFAULT_ELL },
            inflate: None,
            gains: FilterGains::default(),
            initial: NavState::identity(),
            replay: ReplayPaths::default(),
            output: None,
            seed: 42,
        }
    }
}

fn parse_num(key: &str, v: &str) -> Result<f64, HarnessError> {
    v.trim()
        .parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| HarnessError::Config(format!("{key}: '{v}' is not a finite number")))
}

fn parse_list<const N: usize>(key: &str, v: &str) -> Result<[f64; N], HarnessError> {
    let parts: Vec<&str> = v.split(',').collect();
    if parts.len() != N {
        return Err(HarnessError::Config(format!("{key}: expected {N} comma-separated values, got {}", parts.len())));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse_num(key, p)?;
    }
    Ok(out)
}

fn parse_vec3(key: &str, v: &str) -> Result<Vec3, HarnessError> {
    let [x, y, z] = parse_list::<3>(key, v)?;
    Ok(Vec3::new(x, y, z))
}

fn parse_int<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, HarnessError> {
    v.trim().parse().map_err(|_| HarnessError::Config(format!("{key}: '{v}' is not a non-negative integer")))
}

impl RunConfig {
    /// Parses flat `key=value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = RunConfig::default();
        let mut profile_name = cfg.profile.name().to_string();
        let mut params = *cfg.profile.params();
        let mut xi_inf = DEFAULT_XI_INF;
        let mut ell = DEFAULT_ELL;
        let mut xi0: Option<[f64; 4]> = None;
        let mut delta: Option<[f64; 4]> = None;
        let mut rpy = [0.0; 3];
        let mut init_p = Vec3::zeros();
        let mut init_v = Vec3::zeros();

        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(HarnessError::Config(format!("line {}: expected key=value", n + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            let at = |e: HarnessError| match e {
                HarnessError::Config(m) => HarnessError::Config(format!("line {}: {m}", n + 1)),
                other => other,
            };
            let path = || Some(PathBuf::from(value));
            match key {
                "mode" => {
                    cfg.mode = match value {
                        "simulate" => Mode::Simulate,
                        "replay" => Mode::Replay,
                        _ => return Err(at(HarnessError::Config(format!("mode: unknown '{value}'")))),
                    }
                }
                "seed" => cfg.seed = parse_int(key, value).map_err(at)?,
                "output" => cfg.output = path(),
                "duration" => cfg.duration = parse_num(key, value).map_err(at)?,
                "imu_rate" => cfg.imu_rate = parse_num(key, value).map_err(at)?,
                "frame_rate" => cfg.frame_rate = parse_num(key, value).map_err(at)?,
                "trajectory.profile" => profile_name = value.to_string(),
                "trajectory.center" => params.center = parse_vec3(key, value).map_err(at)?,
                "trajectory.radius" => params.radius = parse_num(key, value).map_err(at)?,
                "trajectory.rate" => params.rate = parse_num(key, value).map_err(at)?,
                "trajectory.rpy_deg" => {
                    let [r, p, y] = parse_list::<3>(key, value).map_err(at)?;
                    params.roll = r.to_radians();
                    params.pitch = p.to_radians();
                    params.yaw = y.to_radians();
                }
                "noise.gyro" => cfg.std_omega = parse_num(key, value).map_err(at)?,
                "noise.accel" => cfg.std_accel = parse_num(key, value).map_err(at)?,
                "noise.feature" => cfg.std_feature = parse_num(key, value).map_err(at)?,
                "landmarks.count" => cfg.landmarks.count = parse_int(key, value).map_err(at)?,
                "landmarks.box_size" => cfg.landmarks.box_size = parse_num(key, value).map_err(at)?,
                "landmarks.center" => cfg.landmarks.center = Some(parse_vec3(key, value).map_err(at)?),
                "landmarks.seed" => cfg.landmarks.seed = parse_int(key, value).map_err(at)?,
                "ppf.xi_inf" => xi_inf = parse_list::<4>(key, value).map_err(at)?,
                "ppf.ell" => ell = parse_list::<4>(key, value).map_err(at)?,
                "ppf.xi0" => xi0 = Some(parse_list::<4>(key, value).map_err(at)?),
                "ppf.delta" => delta = Some(parse_list::<4>(key, value).map_err(at)?),
                "ppf.inflate" => cfg.inflate = Some(parse_list::<4>(key, value).map_err(at)?),
                "gains.k_w" => cfg.gains.k_w = parse_num(key, value).map_err(at)?,
                "gains.k_v" => cfg.gains.k_v = parse_num(key, value).map_err(at)?,
                "gains.k_a" => cfg.gains.k_a = parse_num(key, value).map_err(at)?,
                "gains.gamma_sigma" => cfg.gains.gamma_sigma = parse_num(key, value).map_err(at)?,
                "gains.k_sigma" => cfg.gains.k_sigma = parse_num(key, value).map_err(at)?,
                "gains.mu" => cfg.gains.mu = parse_num(key, value).map_err(at)?,
                "gains.eps" => cfg.gains.eps = parse_num(key, value).map_err(at)?,
                "gains.ell_p" => cfg.gains.ell_p = parse_num(key, value).map_err(at)?,
                "init.rpy_deg" => rpy = parse_list::<3>(key, value).map_err(at)?,
                "init.position" => init_p = parse_vec3(key, value).map_err(at)?,
                "init.velocity" => init_v = parse_vec3(key, value).map_err(at)?,
                "replay.imu" => cfg.replay.imu = path(),
                "replay.features" => cfg.replay.features = path(),
                "replay.observations" => cfg.replay.observations = path(),
                "replay.truth" => cfg.replay.truth = path(),
                other => return Err(at(HarnessError::Config(format!("unknown key '{other}'")))),
            }
        }

        cfg.profile =
            TrajectoryProfile::from_name(&profile_name, params).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.ppf = match (xi0, delta) {
            (None, None) => PpfSetup::FromInitialError { xi_inf, ell },
            (Some(xi0), Some(delta)) => PpfSetup::Fixed(
                PpfConfig::new(xi0, xi_inf, ell, delta).map_err(|e| HarnessError::Config(e.to_string()))?,
            ),
            _ => return Err(HarnessError::Config("ppf.xi0 and ppf.delta must be given together".into())),
        };
        cfg.initial = NavState::new(
            Rotation::from_euler_zyx(rpy[0].to_radians(), rpy[1].to_radians(), rpy[2].to_radians()),
            init_p,
            init_v,
        );
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_error(format!("reading {}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(self.duration > 0.0) {
            return bad(format!("duration must be > 0, got {}", self.duration));
        }
        if !(self.frame_rate > 0.0 && self.imu_rate >= self.frame_rate) {
            return bad(format!("need imu_rate >= frame_rate > 0, got {} and {}", self.imu_rate, self.frame_rate));
        }
        let ratio = self.imu_rate / self.frame_rate;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return bad(format!("imu_rate must be an integer multiple of frame_rate (ratio {ratio})"));
        }
        let steps = self.duration * self.imu_rate;
        if (steps - steps.round()).abs() > 1e-6 {
            return bad(format!("duration * imu_rate must be an integer (got {steps})"));
        }
        for (name, v) in [("noise.gyro", self.std_omega), ("noise.accel", self.std_accel), ("noise.feature", self.std_feature)] {
            if !(v >= 0.0) {
                return bad(format!("{name} must be >= 0"));
            }
        }
        if self.mode == Mode::Simulate {
            if self.landmarks.count < 3 {
                return bad("landmarks.count must be at least 3".into());
            }
            if !(self.landmarks.box_size > 0.0) {
                return bad("landmarks.box_size must be > 0".into());
            }
        }
        if self.mode == Mode::Replay {
            for (name, p) in [
                ("replay.imu", &self.replay.imu),
                ("replay.features", &self.replay.features),
                ("replay.observations", &self.replay.observations),
            ] {
                if p.is_none() {
                    return bad(format!("{name} is required in replay mode"));
                }
            }
        }
        if let Some(inf) = self.inflate {
            if inf.iter().any(|v| !(*v > 0.0)) {
                return bad("ppf.inflate entries must be > 0".into());
            }
        }
        self.gains.validate().map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec { std_omega: self.std_omega, std_accel: self.std_accel, std_feature: self.std_feature, seed: self.seed }
    }

    pub fn steps(&self) -> usize {
        (self.duration * self.imu_rate).round() as usize
    }

    pub fn frame_ratio(&self) -> usize {
        (self.imu_rate / self.frame_rate).round() as usize
    }

    pub fn landmark_positions(&self) -> Vec<Feature> {
        let center = self.landmarks.center.unwrap_or(self.profile.params().center);
        random_landmarks(self.landmarks.count, center, self.landmarks.box_size, self.landmarks.seed)
    }
}

/// Everything a run consumes: IMU stream, landmark map, frames and optional truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RunInputs {
    pub imu: Vec<ImuSample>,
    pub features: Vec<Feature>,
    pub frames: Vec<ObservationFrame>,
    pub truth: Option<Vec<(f64, NavState)>>,
}

/// Samples the configured trajectory at `t_k = k / imu_rate`, `k = 0..=steps`,
/// with a frame at every `frame_ratio`-th instant including the first.
pub fn synthesize(cfg: &RunConfig) -> RunInputs {
    let noise = cfg.noise();
    let mut rng = noise.rng();
    let features = cfg.landmark_positions();
    let ratio = cfg.frame_ratio();
    let n = cfg.steps();
    let mut imu = Vec::with_capacity(n + 1);
    let mut truth = Vec::with_capacity(n + 1);
    let mut frames = Vec::with_capacity(n / ratio + 1);
    for k in 0..=n {
        let t = k as f64 / cfg.imu_rate;
        let tp = synth_trajectory(t, &cfg.profile);
        imu.push(imu_sample(&tp, &noise, &mut rng));
        if k % ratio == 0 {
            frames.push(ObservationFrame { t, observations: observe_features(&tp.state, &features, &noise, &mut rng) });
        }
        truth.push((t, tp.state));
    }
    RunInputs { imu, features, frames, truth: Some(truth) }
}

/// Writes the inputs as `imu.csv`, `features.csv`, `observations.csv` and
/// `truth.csv` in `dir`.
pub fn export_inputs(inputs: &RunInputs, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_error(format!("creating {}", dir.display())))?;
    let create = |name: &str| {
        let p = dir.join(name);
        File::create(&p).map(BufWriter::new).map_err(io_error(format!("creating {}", p.display())))
    };
    write_imu_csv(create("imu.csv")?, &inputs.imu)?;
    write_features_csv(create("features.csv")?, &inputs.features)?;
    write_observations_csv(create("observations.csv")?, &inputs.frames)?;
    if let Some(truth) = &inputs.truth {
        write_truth_csv(create("truth.csv")?, truth)?;
    }
    Ok(())
}

pub fn load_inputs(paths: &ReplayPaths) -> Result<RunInputs, HarnessError> {
    let need = |p: &Option<PathBuf>, name: &str| {
        p.clone().ok_or_else(|| HarnessError::Config(format!("{name} is required in replay mode")))
    };
    fn with_path<T>(path: &Path, r: Result<T, MeasurementError>) -> Result<T, HarnessError> {
        r.map_err(|e| match e {
            MeasurementError::Io(source) => HarnessError::Io { context: format!("reading {}", path.display()), source },
            other => HarnessError::Config(format!("{}: {other}", path.display())),
        })
    }
    let p = need(&paths.imu, "replay.imu")?;
    let imu = with_path(&p, load_imu_csv(&p))?;
    let p = need(&paths.features, "replay.features")?;
    let features = with_path(&p, load_features_csv(&p))?;
    let p = need(&paths.observations, "replay.observations")?;
    let frames = with_path(&p, load_observations_csv(&p))?;
    let truth = match &paths.truth {
        Some(p) => Some(with_path(p, load_truth_csv(p))?),
        None => None,
    };
    Ok(RunInputs { imu, features, frames, truth })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub t: f64,
    /// Present on steps that used a frame.
    pub e: Option<[f64; 4]>,
    /// Envelope in force at `t`, after any inflation.
    pub xi: Option<[f64; 4]>,
    pub att_err: Option<f64>,
    pub pos_err: Option<f64>,
    pub vel_err: Option<f64>,
    pub sigma: Vec3,
    pub inflated: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub steady_att_mse: f64,
    pub steady_pos_mse: f64,
    pub steady_vel_mse: f64,
    pub steady_att_mean: f64,
    pub steady_pos_mean: f64,
    pub steady_vel_mean: f64,
    pub steady_e1_mean: f64,
    pub steady_e1_ms: f64,
    /// Mean-square `e1` over each third of the run.
    pub e1_ms_thirds: [f64; 3],
    pub inflation_count: usize,
    pub inflations_after_1s: usize,
    /// Steps whose post-guard error left the envelope.
    pub envelope_violations: usize,
    pub frames_used: usize,
    pub frames_skipped: usize,
    pub diverged: bool,
    pub divergence: Option<String>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub records: Vec<Record>,
    pub summary: Summary,
    pub warnings: Vec<String>,
    pub final_state: Option<NavState>,
}

/// Index of the sample nearest to `t`, if within half the local spacing.
fn match_time(times: &[f64], t: f64) -> Option<usize> {
    if times.is_empty() {
        return None;
    }
    let j = times.partition_point(|&x| x < t);
    let mut best = None;
    for c in [j.checked_sub(1), Some(j)].into_iter().flatten() {
        if c < times.len() && best.is_none_or(|b: usize| (times[c] - t).abs() < (times[b] - t).abs()) {
            best = Some(c);
        }
    }
    let b = best?;
    let spacing = if times.len() == 1 {
        f64::INFINITY
    } else if b + 1 < times.len() {
        times[b + 1] - times[b]
    } else {
        times[b] - times[b - 1]
    };
    ((times[b] - t).abs() <= spacing / 2.0).then_some(b)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn mean_sq(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64
    }
}

fn summarize(records: &[Record], t0: f64, t_end: f64, summary: &mut Summary) {
    let start = records.len() * 3 / 4;
    let steady = &records[start..];
    let col = |f: fn(&Record) -> Option<f64>| steady.iter().filter_map(f).collect::<Vec<f64>>();
    let att = col(|r| r.att_err);
    let pos = col(|r| r.pos_err);
    let vel = col(|r| r.vel_err);
    let e1 = col(|r| r.e.map(|e| e[0]));
    summary.steady_att_mse = mean_sq(&att);
    summary.steady_pos_mse = mean_sq(&pos);
    summary.steady_vel_mse = mean_sq(&vel);
    summary.steady_att_mean = mean(&att);
    summary.steady_pos_mean = mean(&pos);
    summary.steady_vel_mean = mean(&vel);
    summary.steady_e1_mean = mean(&e1);
    summary.steady_e1_ms = mean_sq(&e1);
    let span = (t_end - t0).max(f64::MIN_POSITIVE);
    let mut thirds: [Vec<f64>; 3] = Default::default();
    for r in records {
        if let Some(e) = r.e {
            let i = (((r.t - t0) / span * 3.0) as usize).min(2);
            thirds[i].push(e[0]);
        }
    }
    summary.e1_ms_thirds = [mean_sq(&thirds[0]), mean_sq(&thirds[1]), mean_sq(&thirds[2])];
}

/// Drives the filter over `inputs`. Frames are attached to the nearest IMU
/// instant; a frame at the first instant initializes the envelope.
pub fn run_inputs(cfg: &RunConfig, inputs: &RunInputs) -> Result<RunReport, HarnessError> {
    let started = Instant::now();
    let mut warnings = Vec::new();
    if inputs.imu.len() < 2 {
        return Err(HarnessError::Config("need at least two IMU samples".into()));
    }
    let times: Vec<f64> = inputs.imu.iter().map(|s| s.t).collect();
    let mut frame_at: Vec<Option<&ObservationFrame>> = vec![None; times.len()];
    for frame in &inputs.frames {
        match match_time(&times, frame.t) {
            Some(j) if frame_at[j].is_none() => frame_at[j] = Some(frame),
            Some(j) => warnings.push(format!("frame at t={} duplicates IMU instant {}; skipped", frame.t, times[j])),
            None => warnings.push(format!("frame at t={} has no IMU sample within half a step; skipped", frame.t)),
        }
    }
    let mut truth_at: Vec<Option<NavState>> = vec![None; times.len()];
    if let Some(truth) = &inputs.truth {
        for (t, x) in truth {
            if let Some(j) = match_time(&times, *t) {
                truth_at[j] = Some(*x);
            }
        }
    }

    let map = FeatureMap::new(&inputs.features)?;
    let t0 = times[0];
    let mut filter = NavigationFilter::new(cfg.initial, map, cfg.gains, cfg.ppf, t0)?;
    if let Some(inflate) = cfg.inflate {
        filter = filter.with_inflation(inflate);
    }
    if let Some(frame) = frame_at[0] {
        match filter.initialize(frame) {
            Ok(_) => {}
            Err(FilterError::Measurement(e @ (MeasurementError::TooFewFeatures(_) | MeasurementError::Degenerate(_)))) => {
                warnings.push(format!("initial frame unusable: {e}"))
            }
            Err(e) => return Err(e.into()),
        }
    }

    let mut summary = Summary::default();
    let mut records = Vec::with_capacity(times.len() - 1);
    for k in 0..times.len() - 1 {
        let t_next = times[k + 1];
        let frame = frame_at[k + 1];
        let out = match filter.step(&inputs.imu[k], frame, t_next) {
            Ok(out) => out,
            Err(FilterError::Divergence { t, reason }) => {
                summary.diverged = true;
                summary.divergence = Some(format!("t={t}: {reason}"));
                break;
            }
            Err(e) => return Err(e.into()),
        };
        if frame.is_some() {
            if out.skipped.is_some() {
                summary.frames_skipped += 1;
            } else {
                summary.frames_used += 1;
            }
        }
        let xi = match (&out.ppf, filter.ppf_config()) {
            (Some(eval), _) => Some(eval.xi),
            (None, Some(cfg)) => Some(crate::ppf::xi_at(cfg, t_next - t0)),
            (None, None) => None,
        };
        if let (Some(e), Some(eval), Some(ppf)) = (out.error, out.ppf, filter.ppf_config()) {
            if eval.any_inflated() {
                summary.inflation_count += 1;
                if t_next - t0 > 1.0 {
                    summary.inflations_after_1s += 1;
                }
            }
            if (0..4).any(|i| !(e[i].abs() < ppf.delta[i] * eval.xi[i])) {
                summary.envelope_violations += 1;
            }
        }
        let est = filter.state().x_hat;
        let truth = truth_at[k + 1];
        records.push(Record {
            t: t_next,
            e: out.error,
            xi,
            att_err: truth.map(|x| attitude_distance(&(x.rotation * est.rotation.transpose()))),
            pos_err: truth.map(|x| (x.position - est.position).norm()),
            vel_err: truth.map(|x| (x.velocity - est.velocity).norm()),
            sigma: filter.state().sigma_hat,
            inflated: out.inflation_mask(),
        });
    }
    summarize(&records, t0, *times.last().expect("non-empty"), &mut summary);
    summary.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(RunReport { records, summary, warnings, final_state: Some(filter.state().x_hat) })
}

pub fn run_simulate(cfg: &RunConfig) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    let inputs = synthesize(cfg);
    let mut report = run_inputs(cfg, &inputs)?;
    report.summary.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(report)
}

/// Replays recorded inputs. No noise is added.
pub fn run_replay(cfg: &RunConfig) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let inputs = load_inputs(&cfg.replay)?;
    run_inputs(cfg, &inputs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub seed: u64,
    pub summary: Summary,
}

/// Across-trial statistics of the steady-state errors.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloStats {
    pub trials: usize,
    pub divergences: usize,
    pub mean_e1_ms: f64,
    pub max_e1_ms: f64,
    pub mean_att_mse: f64,
    pub max_att_mse: f64,
    pub mean_pos_mse: f64,
    pub max_pos_mse: f64,
    pub mean_vel_mse: f64,
    pub max_vel_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloReport {
    pub base_seed: u64,
    pub trials: Vec<TrialResult>,
    pub stats: MonteCarloStats,
}

/// Runs `trials` simulations with seeds `base + i` in parallel. Divergent
/// trials are reported, not fatal.
pub fn run_monte_carlo(cfg: &RunConfig, trials: usize) -> Result<MonteCarloReport, HarnessError> {
    if trials == 0 {
        return Err(HarnessError::Config("trials must be >= 1".into()));
    }
    cfg.validate()?;
    let results: Vec<Result<TrialResult, HarnessError>> = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(i);
            run_simulate(&c).map(|r| TrialResult { seed: c.seed, summary: r.summary })
        })
        .collect();
    let trials = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let ok: Vec<&Summary> = trials.iter().map(|t| &t.summary).filter(|s| !s.diverged).collect();
    let pick = |f: fn(&Summary) -> f64| ok.iter().map(|s| f(s)).collect::<Vec<f64>>();
    let max = |v: &[f64]| v.iter().copied().fold(f64::NAN, f64::max);
    let (e1, att, pos, vel) =
        (pick(|s| s.steady_e1_ms), pick(|s| s.steady_att_mse), pick(|s| s.steady_pos_mse), pick(|s| s.steady_vel_mse));
    let stats = MonteCarloStats {
        trials: trials.len(),
        divergences: trials.len() - ok.len(),
        mean_e1_ms: mean(&e1),
        max_e1_ms: max(&e1),
        mean_att_mse: mean(&att),
        max_att_mse: max(&att),
        mean_pos_mse: mean(&pos),
        max_pos_mse: max(&pos),
        mean_vel_mse: mean(&vel),
        max_vel_mse: max(&vel),
    };
    Ok(MonteCarloReport { base_seed: cfg.seed, trials, stats })
}

pub const REPORT_HEADER: [&str; 16] = [
    "t", "e1", "e2", "e3", "e4", "xi1", "xi2", "xi3", "xi4", "att_err", "pos_err", "vel_err", "sig1", "sig2", "sig3",
    "inflated",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_report_csv<W: Write>(w: W, records: &[Record]) -> Result<(), HarnessError> {
    let mut wtr = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| HarnessError::Io { context: "writing report".into(), source: std::io::Error::other(e) };
    wtr.write_record(REPORT_HEADER).map_err(csv_err)?;
    for r in records {
        let mut row = Vec::with_capacity(16);
        row.push(r.t.to_string());
        for i in 0..4 {
            row.push(opt(r.e.map(|e| e[i])));
        }
        for i in 0..4 {
            row.push(opt(r.xi.map(|x| x[i])));
        }
        row.push(opt(r.att_err));
        row.push(opt(r.pos_err));
        row.push(opt(r.vel_err));
        for i in 0..3 {
            row.push(r.sigma[i].to_string());
        }
        row.push(r.inflated.to_string());
        wtr.write_record(&row).map_err(csv_err)?;
    }
    wtr.flush().map_err(io_error("writing report"))?;
    Ok(())
}

pub fn parse_report_csv<R: Read>(reader: R) -> Result<Vec<Record>, HarnessError> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
    let bad = |line: u64, m: String| HarnessError::Config(format!("report line {line}: {m}"));
    let headers = rdr.headers().map_err(|e| bad(1, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != REPORT_HEADER {
        return Err(bad(1, "unexpected header".into()));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<Option<f64>, HarnessError> {
            let f = &rec[i];
            if f.is_empty() {
                Ok(None)
            } else {
                f.parse().map(Some).map_err(|_| bad(line, format!("invalid number '{f}'")))
            }
        };
        let req = |i: usize| num(i)?.ok_or_else(|| bad(line, format!("missing {}", REPORT_HEADER[i])));
        let quad = |s: usize| -> Result<Option<[f64; 4]>, HarnessError> {
            let v = [num(s)?, num(s + 1)?, num(s + 2)?, num(s + 3)?];
            Ok(if v.iter().all(Option::is_some) { Some(v.map(|x| x.unwrap())) } else { None })
        };
        out.push(Record {
            t: req(0)?,
            e: quad(1)?,
            xi: quad(5)?,
            att_err: num(9)?,
            pos_err: num(10)?,
            vel_err: num(11)?,
            sigma: Vec3::new(req(12)?, req(13)?, req(14)?),
            inflated: rec[15].parse().map_err(|_| bad(line, "invalid inflation mask".into()))?,
        });
    }
    Ok(out)
}

/// `key=value` lines for a run summary.
pub fn summary_text(s: &Summary) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k}={v}");
    };
    kv("steady_att_mse", s.steady_att_mse.to_string());
    kv("steady_pos_mse", s.steady_pos_mse.to_string());
    kv("steady_vel_mse", s.steady_vel_mse.to_string());
    kv("steady_att_mean", s.steady_att_mean.to_string());
    kv("steady_pos_mean", s.steady_pos_mean.to_string());
    kv("steady_vel_mean", s.steady_vel_mean.to_string());
    kv("steady_e1_mean", s.steady_e1_mean.to_string());
    kv("steady_e1_ms", s.steady_e1_ms.to_string());
    kv("e1_ms_thirds", s.e1_ms_thirds.map(|v| v.to_string()).join(","));
    kv("inflation_count", s.inflation_count.to_string());
    kv("inflations_after_1s", s.inflations_after_1s.to_string());
    kv("envelope_violations", s.envelope_violations.to_string());
    kv("frames_used", s.frames_used.to_string());
    kv("frames_skipped", s.frames_skipped.to_string());
    kv("diverged", s.diverged.to_string());
    if let Some(d) = &s.divergence {
        kv("divergence", d.clone());
    }
    kv("wall_ms", format!("{:.3}", s.wall_ms));
    out
}

/// Summary path next to a report: `run.csv` gives `run.summary.txt`.
pub fn summary_path(report: &Path) -> PathBuf {
    report.with_extension("summary.txt")
}

/// Writes the report CSV at `path` and the summary beside it.
pub fn emit_report(report: &RunReport, path: &Path) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_error(format!("creating {}", dir.display())))?;
    }
    let file = File::create(path).map_err(io_error(format!("creating {}", path.display())))?;
    write_report_csv(BufWriter::new(file), &report.records)?;
    let sp = summary_path(path);
    fs::write(&sp, summary_text(&report.summary)).map_err(io_error(format!("writing {}", sp.display())))?;
    Ok(())
}

/// Per-trial CSV plus the aggregate as `key=value` in the summary file.
pub fn emit_monte_carlo(report: &MonteCarloReport, path: &Path) -> Result<(), HarnessError> {
    let csv_err = |e: csv::Error| HarnessError::Io { context: "writing trials".into(), source: std::io::Error::other(e) };
    let file = File::create(path).map_err(io_error(format!("creating {}", path.display())))?;
    let mut wtr = csv::Writer::from_writer(BufWriter::new(file));
    wtr.write_record([
        "seed",
        "steady_e1_ms",
        "steady_att_mse",
        "steady_pos_mse",
        "steady_vel_mse",
        "inflation_count",
        "diverged",
    ])
    .map_err(csv_err)?;
    for t in &report.trials {
        let s = &t.summary;
        wtr.write_record([
            t.seed.to_string(),
            s.steady_e1_ms.to_string(),
            s.steady_att_mse.to_string(),
            s.steady_pos_mse.to_string(),
            s.steady_vel_mse.to_string(),
            s.inflation_count.to_string(),
            s.diverged.to_string(),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush().map_err(io_error("writing trials"))?;
    let st = &report.stats;
    let text = format!(
        "trials={}\ndivergences={}\nmean_e1_ms={}\nmax_e1_ms={}\nmean_att_mse={}\nmax_att_mse={}\nmean_pos_mse={}\nmax_pos_mse={}\nmean_vel_mse={}\nmax_vel_mse={}\n",
        st.trials,
        st.divergences,
        st.mean_e1_ms,
        st.max_e1_ms,
        st.mean_att_mse,
        st.max_att_mse,
        st.mean_pos_mse,
        st.max_pos_mse,
        st.mean_vel_mse,
        st.max_vel_mse
    );
    let sp = summary_path(path);
    fs::write(&sp, text).map_err(io_error(format!("writing {}", sp.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, worst: f64, tol: f64) -> CheckResult {
    CheckResult { name, passed: worst <= tol, detail: format!("worst {worst:.3e} (tol {tol:.0e})") }
}

fn random_vec<R: Rng>(rng: &mut R, scale: f64) -> Vec3 {
    Vec3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale))
}

fn random_nav<R: Rng>(rng: &mut R) -> NavState {
    NavState::new(Rotation::exp(&random_vec(rng, 2.0)), random_vec(rng, 5.0), random_vec(rng, 5.0))
}

/// Quick runtime versions of the property suites.
pub fn selftest(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let worst = (0..200)
        .map(|_| {
            let x = random_vec(&mut rng, 10.0);
            (vex(&skew(&x)).expect("antisymmetric") - x).norm()
        })
        .fold(0.0, f64::max);
    out.push(check("vex/skew round trip", worst, 1e-12));

    let worst = (0..200)
        .map(|_| {
            let (a, b) = (random_nav(&mut rng), random_nav(&mut rng));
            let dense = (a.compose(&b).to_matrix() - a.to_matrix() * b.to_matrix()).norm();
            let inv = (a.compose(&a.inverse()).to_matrix() - crate::liegroup::Mat5::identity()).norm();
            dense.max(inv)
        })
        .fold(0.0, f64::max);
    out.push(check("group product and inverse", worst, 1e-9));

    let worst = (0..200)
        .map(|_| {
            let r = Rotation::exp(&random_vec(&mut rng, 3.0));
            let fro = (crate::liegroup::Mat3::identity() - r.matrix()).norm_squared() / 8.0;
            (attitude_distance(&r) - fro).abs()
        })
        .fold(0.0, f64::max);
    out.push(check("attitude distance identity", worst, 1e-12));

    let mut lemma_worst: f64 = 0.0;
    for i in 0..1000u64 {
        let features = random_landmarks(3 + (i % 10) as usize, Vec3::zeros(), 3.0, seed ^ (i * 7919));
        let map = FeatureMap::new(&features).expect("unique ids");
        let obs: Vec<FeatureObservation> =
            features.iter().map(|f| FeatureObservation { id: f.id, body: f.position, weight: 1.0 }).collect();
        let Ok(agg) = aggregate(&map, &obs, &Rotation::identity(), &Vec3::zeros()) else { continue };
        let r = Rotation::exp(&random_vec(&mut rng, 1.8));
        let mr = agg.m * r.matrix();
        let dist = 0.25 * (agg.m - mr).trace();
        let ups = upsilon(&mr).norm_squared();
        let c = landmark_condition(&agg.m);
        let lower = 0.5 * c.min * (1.0 + r.matrix().trace()) * dist - ups;
        let upper = ups - 2.0 * c.max * dist;
        lemma_worst = lemma_worst.max(lower.max(upper) / (1.0 + ups));
    }
    out.push(check("Upsilon bounded by attitude error", lemma_worst, 1e-10));

    let worst = (0..1000)
        .map(|_| {
            let delta = rng.random_range(0.1..10.0);
            let xi = rng.random_range(0.01..5.0);
            let e = rng.random_range(-0.9..0.9) * delta * xi;
            let ev = transform(&[e; 4], &[xi; 4], &[delta; 4], &[0.0; 4]).expect("finite");
            let round = (smooth_map(ev.transformed[0], delta) - e / xi).abs();
            let h = 1e-6 * delta * xi;
            let hi = transform(&[e + h; 4], &[xi; 4], &[delta; 4], &[0.0; 4]).expect("finite").transformed[0];
            let lo = transform(&[e - h; 4], &[xi; 4], &[delta; 4], &[0.0; 4]).expect("finite").transformed[0];
            let deriv = ((hi - lo) / (2.0 * h) - ev.sensitivity[0]).abs() / ev.sensitivity[0] * 1e-6;
            round.max(deriv)
        })
        .fold(0.0, f64::max);
    out.push(check("transform round trip and sensitivity", worst, 1e-12));

    let worst = (0..200)
        .map(|_| {
            let a = Quaternion::from_rotation_vector(&random_vec(&mut rng, 3.0));
            let b = Quaternion::from_rotation_vector(&random_vec(&mut rng, 3.0));
            let ra = quat_to_rot(&a).expect("unit");
            let rb = quat_to_rot(&b).expect("unit");
            let hom = (quat_to_rot(&(a * b)).expect("unit").matrix() - (ra * rb).matrix()).norm();
            let back = (quat_to_rot(&rot_to_quat(&ra)).expect("unit").matrix() - ra.matrix()).norm();
            hom.max(back)
        })
        .fold(0.0, f64::max);
    out.push(check("quaternion homomorphism", worst, 1e-9));

    let cfg = RunConfig {
        profile: TrajectoryProfile::Hover(ProfileParams::default()),
        duration: 5.0,
        std_omega: 0.0,
        std_accel: 0.0,
        std_feature: 0.0,
        initial: synth_trajectory(0.0, &TrajectoryProfile::Hover(ProfileParams::default())).state,
        ..RunConfig::default()
    };
    let worst = match run_simulate(&cfg) {
        Ok(r) => r
            .records
            .iter()
            .map(|rec| rec.att_err.unwrap().max(rec.pos_err.unwrap()).max(rec.vel_err.unwrap()))
            .fold(0.0, f64::max),
        Err(_) => f64::INFINITY,
    };
    out.push(check("equilibrium under perfect data", worst, 1e-9));
    out
}

/// Runs the rotation-matrix and quaternion filters side by side on one input
/// stream and returns the largest attitude, position and velocity gaps.
pub fn compare_quaternion(cfg: &RunConfig, inputs: &RunInputs) -> Result<[f64; 3], HarnessError> {
    let map = FeatureMap::new(&inputs.features)?;
    let t0 = inputs.imu[0].t;
    let mut filter = NavigationFilter::new(cfg.initial, map.clone(), cfg.gains, cfg.ppf, t0)?;
    if let Some(f0) = inputs.frames.first().filter(|f| f.t == t0) {
        filter.initialize(f0)?;
    }
    let ppf = *filter.ppf_config().ok_or_else(|| HarnessError::Config("no initial frame".into()))?;
    let mut q = QuatFilterState::from_state(filter.state());
    let mut frames = inputs.frames.iter().peekable();
    while frames.peek().is_some_and(|f| f.t <= t0) {
        frames.next();
    }
    let mut worst = [0.0f64; 3];
    for k in 0..inputs.imu.len() - 1 {
        let t_next = inputs.imu[k + 1].t;
        let frame = frames.next_if(|f| f.t == t_next);
        filter.step(&inputs.imu[k], frame, t_next)?;
        let env = crate::filter::quat_envelope(ppf, t_next - t0);
        let (next, _) =
            crate::filter::quat_step(&q, &inputs.imu[k], frame.map(|f| (&map, f)), &env, &cfg.gains, t_next - inputs.imu[k].t)?;
        q = next;
        let x = filter.state().x_hat;
        let r = q.rotation().map_err(|e| HarnessError::Config(e.to_string()))?;
        worst[0] = worst[0].max((r.matrix() - x.rotation.matrix()).norm());
        worst[1] = worst[1].max((q.position - x.position).norm());
        worst[2] = worst[2].max((q.velocity - x.velocity).norm());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.steps(), 12_000);
        assert_eq!(cfg.frame_ratio(), 10);
    }

    #[test]
    fn config_keys_and_errors() {
        let text = "# comment\nseed = 9\ngains.k_w=2.5\ntrajectory.profile=figure8\nppf.xi0=1,2,2,2\nppf.delta=1,1,1,1\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.gains.k_w, 2.5);
        assert_eq!(cfg.profile.name(), "figure8");
        assert!(matches!(cfg.ppf, PpfSetup::Fixed(_)));

        for bad in ["bogus=1", "seed", "imu_rate=200\nframe_rate=30", "duration=-1", "ppf.xi0=1,2,2,2", "mode=fly", "gains.k_a=0"] {
            let err = RunConfig::parse(bad).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{bad}: {err}");
        }
    }

    #[test]
    fn match_time_window() {
        let times = [0.0, 0.005, 0.01, 0.015];
        assert_eq!(match_time(&times, 0.005), Some(1));
        assert_eq!(match_time(&times, 0.005 + 0.4 * 0.005), Some(1));
        assert_eq!(match_time(&times, 0.03), None);
        assert_eq!(match_time(&times, -0.002), Some(0));
    }

    #[test]
    fn record_count_matches_duration() {
        let cfg = RunConfig { duration: 1.0, ..RunConfig::default() };
        let r = run_simulate(&cfg).unwrap();
        assert_eq!(r.records.len(), 200);
        assert_eq!(r.summary.frames_used, 20);
    }
}
