//! Landmark observations, their weighted aggregation, the IMU noise model,
//! closed-form ground-truth trajectories and the CSV replay formats.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::liegroup::{quat_to_rot, rot_to_quat, Mat3, NavState, Quaternion, Rotation, Vec3};

pub const GRAVITY_MAGNITUDE: f64 = 9.81;

/// Inertial-frame gravity, z up.
pub fn gravity() -> Vec3 {
    Vec3::new(0.0, 0.0, -GRAVITY_MAGNITUDE)
}

/// Smallest eigenvalue of `Tr(M) I - M` accepted as a usable landmark geometry.
pub const LANDMARK_EIGEN_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("need at least 3 matched features, got {0}")]
    TooFewFeatures(usize),
    #[error("landmark geometry is degenerate (min eigenvalue of Tr(M)I - M is {0:e})")]
    Degenerate(f64),
    #[error("feature {0} has non-positive confidence weight")]
    InvalidWeight(u32),
    #[error("duplicate feature id {0}")]
    DuplicateFeature(u32),
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("line {line}: timestamp {t} is not after the previous {prev}")]
    NonMonotone { line: u64, t: f64, prev: f64 },
    #[error("unknown trajectory profile '{0}'")]
    UnknownProfile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feature {
    pub id: u32,
    pub position: Vec3,
}

/// Body-frame observation `y = R^T (p - P) + n` with confidence weight `s > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureObservation {
    pub id: u32,
    pub body: Vec3,
    pub weight: f64,
}

/// All observations sharing one timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationFrame {
    pub t: f64,
    pub observations: Vec<FeatureObservation>,
}

/// Inertial landmark positions indexed by id.
#[derive(Debug, Clone, Default)]
pub struct FeatureMap {
    positions: HashMap<u32, Vec3>,
}

impl FeatureMap {
    pub fn new(features: &[Feature]) -> Result<Self, MeasurementError> {
        let mut positions = HashMap::with_capacity(features.len());
        for f in features {
            if positions.insert(f.id, f.position).is_some() {
                return Err(MeasurementError::DuplicateFeature(f.id));
            }
        }
        Ok(FeatureMap { positions })
    }

    pub fn get(&self, id: u32) -> Option<&Vec3> {
        self.positions.get(&id)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Weighted summary of one frame of landmark observations against an estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregates {
    /// Weighted landmark centroid `p_c`.
    pub centroid: Vec3,
    /// `s_T`, the sum of weights.
    pub total_weight: f64,
    /// `M = sum s_i (p_i - p_c)(p_i - p_c)^T`.
    pub m: Mat3,
    /// `M R~ = sum s_i (p_i - p_c) y_i^T R^T_hat`.
    pub m_rt: Mat3,
    /// `R~^T P~_eps = (1/s_T) sum s_i (p_i - R_hat y_i - P_hat)`.
    pub rt_pe: Vec3,
}

/// Eigen-structure of `Tr(M) I - M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkCheck {
    /// Ascending eigenvalues.
    pub eigenvalues: [f64; 3],
    pub min: f64,
    pub max: f64,
    pub ok: bool,
}

pub fn landmark_condition(m: &Mat3) -> LandmarkCheck {
    let m_bar = Mat3::identity() * m.trace() - m;
    let mut ev: Vec<f64> = SymmetricEigen::new(m_bar).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    LandmarkCheck {
        eigenvalues: [ev[0], ev[1], ev[2]],
        min: ev[0],
        max: ev[2],
        ok: ev[0] > LANDMARK_EIGEN_TOL,
    }
}

/// Builds the weighted summary. Observations whose id is not in `features` are
/// ignored.
pub fn aggregate(
    features: &FeatureMap,
    observations: &[FeatureObservation],
    r_hat: &Rotation,
    p_hat: &Vec3,
) -> Result<Aggregates, MeasurementError> {
    let mut matched = Vec::with_capacity(observations.len());
    for obs in observations {
        if let Some(p) = features.get(obs.id) {
            if !(obs.weight > 0.0) {
                return Err(MeasurementError::InvalidWeight(obs.id));
            }
            matched.push((*p, obs));
        }
    }
    if matched.len() < 3 {
        return Err(MeasurementError::TooFewFeatures(matched.len()));
    }

    let total_weight: f64 = matched.iter().map(|(_, o)| o.weight).sum();
    let centroid = matched.iter().fold(Vec3::zeros(), |acc, (p, o)| acc + p * o.weight) / total_weight;

    let mut m = Mat3::zeros();
    let mut m_rt = Mat3::zeros();
    let mut residual = Vec3::zeros();
    for (p, o) in &matched {
        let d = p - centroid;
        m += d * d.transpose() * o.weight;
        let ry = r_hat * &o.body;
        m_rt += d * ry.transpose() * o.weight;
        residual += (p - ry - p_hat) * o.weight;
    }
    let m = (m + m.transpose()) * 0.5;

    let check = landmark_condition(&m);
    if !check.ok {
        return Err(MeasurementError::Degenerate(check.min));
    }
    Ok(Aggregates {
        centroid,
        total_weight,
        m,
        m_rt,
        rt_pe: residual / total_weight,
    })
}

/// Sensor noise standard deviations and the seed of the run's generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub std_omega: f64,
    pub std_accel: f64,
    pub std_feature: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn noise_free(seed: u64) -> Self {
        NoiseSpec { std_omega: 0.0, std_accel: 0.0, std_feature: 0.0, seed }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { std_omega: 0.11, std_accel: 0.1, std_feature: 0.01, seed: 42 }
    }
}

fn gaussian3<R: Rng + ?Sized>(rng: &mut R, std: f64) -> Vec3 {
    let n = Vec3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    n * std
}

/// Body-frame landmark observations of the true state, unit weights.
pub fn observe_features<R: Rng + ?Sized>(
    x: &NavState,
    features: &[Feature],
    noise: &NoiseSpec,
    rng: &mut R,
) -> Vec<FeatureObservation> {
    let rt = x.rotation.transpose();
    features
        .iter()
        .map(|f| FeatureObservation {
            id: f.id,
            body: rt * (f.position - x.position) + gaussian3(rng, noise.std_feature),
            weight: 1.0,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub omega: Vec3,
    pub accel: Vec3,
}

/// Ground truth at one instant: state, body rate and apparent acceleration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthPoint {
    pub t: f64,
    pub state: NavState,
    pub omega: Vec3,
    pub accel: Vec3,
}

pub fn imu_sample<R: Rng + ?Sized>(truth: &TruthPoint, noise: &NoiseSpec, rng: &mut R) -> ImuSample {
    let n_omega = gaussian3(rng, noise.std_omega);
    let n_accel = gaussian3(rng, noise.std_accel);
    ImuSample { t: truth.t, omega: truth.omega + n_omega, accel: truth.accel + n_accel }
}

/// Shape parameters shared by the trajectory profiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileParams {
    pub center: Vec3,
    /// Circle radius, or figure-eight half width (m).
    pub radius: f64,
    /// Angular rate of the path (rad/s).
    pub rate: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Default for ProfileParams {
    fn default() -> Self {
        ProfileParams {
            center: Vec3::new(1.0, -1.0, 1.0),
            radius: 1.5,
            rate: 0.5,
            roll: 15f64.to_radians(),
            pitch: -20f64.to_radians(),
            yaw: 75f64.to_radians(),
        }
    }
}

/// Closed-form trajectories satisfying `R' = R[w]x, P' = V, V' = R a + g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryProfile {
    /// Fixed pose, zero velocity.
    Hover(ProfileParams),
    /// Horizontal circle, constant yaw rate equal to the path rate; attitude
    /// tilted by the fixed roll/pitch.
    Circle(ProfileParams),
    /// Lissajous figure-eight with sinusoidal roll and pitch.
    Figure8(ProfileParams),
}

impl TrajectoryProfile {
    pub fn from_name(name: &str, params: ProfileParams) -> Result<Self, MeasurementError> {
        match name {
            "hover" => Ok(TrajectoryProfile::Hover(params)),
            "circle" => Ok(TrajectoryProfile::Circle(params)),
            "figure8" => Ok(TrajectoryProfile::Figure8(params)),
            other => Err(MeasurementError::UnknownProfile(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrajectoryProfile::Hover(_) => "hover",
            TrajectoryProfile::Circle(_) => "circle",
            TrajectoryProfile::Figure8(_) => "figure8",
        }
    }

    pub fn params(&self) -> &ProfileParams {
        match self {
            TrajectoryProfile::Hover(p) | TrajectoryProfile::Circle(p) | TrajectoryProfile::Figure8(p) => p,
        }
    }
}

/// Evaluates the analytic truth of `profile` at time `t`.
pub fn synth_trajectory(t: f64, profile: &TrajectoryProfile) -> TruthPoint {
    let (rotation, omega, position, velocity, accel_inertial) = match profile {
        TrajectoryProfile::Hover(p) => (
            Rotation::from_euler_zyx(p.roll, p.pitch, p.yaw),
            Vec3::zeros(),
            p.center,
            Vec3::zeros(),
            Vec3::zeros(),
        ),
        TrajectoryProfile::Circle(p) => {
            let w = p.rate;
            let (s, c) = (w * t).sin_cos();
            let tilt = Rotation::from_euler_zyx(p.roll, p.pitch, 0.0);
            let rotation = Rotation::about_axis(&Vec3::z(), p.yaw + w * t) * tilt;
            let omega = tilt.transpose() * (Vec3::z() * w);
            let r = p.radius;
            (
                rotation,
                omega,
                p.center + Vec3::new(r * c, r * s, 0.0),
                Vec3::new(-r * w * s, r * w * c, 0.0),
                Vec3::new(-r * w * w * c, -r * w * w * s, 0.0),
            )
        }
        TrajectoryProfile::Figure8(p) => {
            let w = p.rate;
            let a = p.radius;
            let h = 0.25 * a;
            let (s1, c1) = (w * t).sin_cos();
            let (s2, c2) = (2.0 * w * t).sin_cos();
            let position = p.center + Vec3::new(a * s1, 0.5 * a * s2, h * s1);
            let velocity = Vec3::new(a * w * c1, a * w * c2, h * w * c1);
            let accel = Vec3::new(-a * w * w * s1, -2.0 * a * w * w * s2, -h * w * w * s1);

            let amp = 0.2;
            let roll = p.roll + amp * s1;
            let pitch = p.pitch + amp * c1;
            let yaw = p.yaw + 0.5 * w * t + amp * s2;
            let roll_dot = amp * w * c1;
            let pitch_dot = -amp * w * s1;
            let yaw_dot = 0.5 * w + 2.0 * amp * w * c2;
            let (sr, cr) = roll.sin_cos();
            let (sp, cp) = pitch.sin_cos();
            let omega = Vec3::new(
                roll_dot - yaw_dot * sp,
                pitch_dot * cr + yaw_dot * sr * cp,
                -pitch_dot * sr + yaw_dot * cr * cp,
            );
            (Rotation::from_euler_zyx(roll, pitch, yaw), omega, position, velocity, accel)
        }
    };
    let accel = rotation.transpose() * (accel_inertial - gravity());
    TruthPoint { t, state: NavState::new(rotation, position, velocity), omega, accel }
}

/// `count` landmarks uniformly distributed in a cube of side `box_size` around `center`.
pub fn random_landmarks(count: usize, center: Vec3, box_size: f64, seed: u64) -> Vec<Feature> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let offset = Vec3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );
            Feature { id: i as u32, position: center + offset * box_size }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CSV formats

pub const IMU_HEADER: [&str; 7] = ["t", "wx", "wy", "wz", "ax", "ay", "az"];
pub const FEATURES_HEADER: [&str; 4] = ["id", "px", "py", "pz"];
pub const OBSERVATIONS_HEADER: [&str; 6] = ["t", "id", "yx", "yy", "yz", "s"];
pub const TRUTH_HEADER: [&str; 11] = ["t", "qw", "qx", "qy", "qz", "px", "py", "pz", "vx", "vy", "vz"];

fn csv_error(line: u64, message: impl Into<String>) -> MeasurementError {
    MeasurementError::Csv { line, message: message.into() }
}

/// Reads all records, checking the header, and returns `(line, fields)` pairs.
fn read_rows<R: Read>(reader: R, header: &[&str]) -> Result<Vec<(u64, Vec<String>)>, MeasurementError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let found = rdr.headers().map_err(|e| csv_error(1, e.to_string()))?.clone();
    let found: Vec<&str> = found.iter().collect();
    if found != header {
        return Err(csv_error(1, format!("expected header {}, found {}", header.join(","), found.join(","))));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            csv_error(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(csv_error(line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(rows)
}

fn parse_f64(line: u64, field: &str) -> Result<f64, MeasurementError> {
    let v: f64 = field.parse().map_err(|_| csv_error(line, format!("invalid number '{field}'")))?;
    if !v.is_finite() {
        return Err(csv_error(line, format!("non-finite value '{field}'")));
    }
    Ok(v)
}

fn parse_id(line: u64, field: &str) -> Result<u32, MeasurementError> {
    field.parse().map_err(|_| csv_error(line, format!("invalid feature id '{field}'")))
}

fn vec_at(line: u64, fields: &[String], start: usize) -> Result<Vec3, MeasurementError> {
    Ok(Vec3::new(
        parse_f64(line, &fields[start])?,
        parse_f64(line, &fields[start + 1])?,
        parse_f64(line, &fields[start + 2])?,
    ))
}

/// IMU samples with strictly increasing timestamps.
pub fn parse_imu_csv<R: Read>(reader: R) -> Result<Vec<ImuSample>, MeasurementError> {
    let mut out: Vec<ImuSample> = Vec::new();
    for (line, f) in read_rows(reader, &IMU_HEADER)? {
        let t = parse_f64(line, &f[0])?;
        if let Some(prev) = out.last() {
            if t <= prev.t {
                return Err(MeasurementError::NonMonotone { line, t, prev: prev.t });
            }
        }
        out.push(ImuSample { t, omega: vec_at(line, &f, 1)?, accel: vec_at(line, &f, 4)? });
    }
    Ok(out)
}

pub fn load_imu_csv(path: &Path) -> Result<Vec<ImuSample>, MeasurementError> {
    parse_imu_csv(File::open(path)?)
}

pub fn parse_features_csv<R: Read>(reader: R) -> Result<Vec<Feature>, MeasurementError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (line, f) in read_rows(reader, &FEATURES_HEADER)? {
        let id = parse_id(line, &f[0])?;
        if !seen.insert(id) {
            return Err(MeasurementError::DuplicateFeature(id));
        }
        out.push(Feature { id, position: vec_at(line, &f, 1)? });
    }
    Ok(out)
}

pub fn load_features_csv(path: &Path) -> Result<Vec<Feature>, MeasurementError> {
    parse_features_csv(File::open(path)?)
}

/// Observation rows grouped into frames by identical timestamp. Timestamps must be
/// non-decreasing, and each frame's rows contiguous.
pub fn parse_observations_csv<R: Read>(reader: R) -> Result<Vec<ObservationFrame>, MeasurementError> {
    let mut frames: Vec<ObservationFrame> = Vec::new();
    for (line, f) in read_rows(reader, &OBSERVATIONS_HEADER)? {
        let t = parse_f64(line, &f[0])?;
        let obs = FeatureObservation {
            id: parse_id(line, &f[1])?,
            body: vec_at(line, &f, 2)?,
            weight: parse_f64(line, &f[5])?,
        };
        if !(obs.weight > 0.0) {
            return Err(csv_error(line, "confidence weight must be positive"));
        }
        match frames.last_mut() {
            Some(frame) if frame.t == t => frame.observations.push(obs),
            Some(frame) if t < frame.t => {
                return Err(MeasurementError::NonMonotone { line, t, prev: frame.t });
            }
            _ => frames.push(ObservationFrame { t, observations: vec![obs] }),
        }
    }
    Ok(frames)
}

pub fn load_observations_csv(path: &Path) -> Result<Vec<ObservationFrame>, MeasurementError> {
    parse_observations_csv(File::open(path)?)
}

/// Ground-truth states (attitude as a unit quaternion), strictly increasing in time.
pub fn parse_truth_csv<R: Read>(reader: R) -> Result<Vec<(f64, NavState)>, MeasurementError> {
    let mut out: Vec<(f64, NavState)> = Vec::new();
    for (line, f) in read_rows(reader, &TRUTH_HEADER)? {
        let t = parse_f64(line, &f[0])?;
        if let Some((prev, _)) = out.last() {
            if t <= *prev {
                return Err(MeasurementError::NonMonotone { line, t, prev: *prev });
            }
        }
        let q = Quaternion::new(
            parse_f64(line, &f[1])?,
            parse_f64(line, &f[2])?,
            parse_f64(line, &f[3])?,
            parse_f64(line, &f[4])?,
        );
        let rotation = quat_to_rot(&q.normalized()).map_err(|e| csv_error(line, e.to_string()))?;
        out.push((t, NavState::new(rotation, vec_at(line, &f, 5)?, vec_at(line, &f, 8)?)));
    }
    Ok(out)
}

pub fn load_truth_csv(path: &Path) -> Result<Vec<(f64, NavState)>, MeasurementError> {
    parse_truth_csv(File::open(path)?)
}

pub fn write_imu_csv<W: Write>(w: W, samples: &[ImuSample]) -> Result<(), MeasurementError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(IMU_HEADER).map_err(io_err)?;
    for s in samples {
        wtr.write_record([s.t, s.omega.x, s.omega.y, s.omega.z, s.accel.x, s.accel.y, s.accel.z].map(|v| v.to_string()))
            .map_err(io_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_features_csv<W: Write>(w: W, features: &[Feature]) -> Result<(), MeasurementError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(FEATURES_HEADER).map_err(io_err)?;
    for f in features {
        wtr.write_record([
            f.id.to_string(),
            f.position.x.to_string(),
            f.position.y.to_string(),
            f.position.z.to_string(),
        ])
        .map_err(io_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_observations_csv<W: Write>(w: W, frames: &[ObservationFrame]) -> Result<(), MeasurementError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(OBSERVATIONS_HEADER).map_err(io_err)?;
    for frame in frames {
        for o in &frame.observations {
            wtr.write_record([
                frame.t.to_string(),
                o.id.to_string(),
                o.body.x.to_string(),
                o.body.y.to_string(),
                o.body.z.to_string(),
                o.weight.to_string(),
            ])
            .map_err(io_err)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_truth_csv<W: Write>(w: W, truth: &[(f64, NavState)]) -> Result<(), MeasurementError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(TRUTH_HEADER).map_err(io_err)?;
    for (t, x) in truth {
        let q = rot_to_quat(&x.rotation);
        let p = x.position;
        let v = x.velocity;
        wtr.write_record([*t, q.w, q.v.x, q.v.y, q.v.z, p.x, p.y, p.z, v.x, v.y, v.z].map(|v| v.to_string()))
            .map_err(io_err)?;
    }
    wtr.flush()?;
    Ok(())
}

fn io_err(e: csv::Error) -> MeasurementError {
    MeasurementError::Io(std::io::Error::other(e))
}
