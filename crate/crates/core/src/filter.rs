//! The navigation filter: error vector, correction terms, adaptive noise-bound
//! estimate, the discrete predict/update cycle and its quaternion twin.
//!
//! The discrete step is `X+ = exp(-W dt) X exp(U dt)` with both generators
//! carrying the unit coupling in their fifth row, so the two couplings cancel
//! and the product stays in the group. The gravity part of `W` is then
//! integrated exactly, including the `g dt^2 / 2` position term.

use thiserror::Error;

use crate::liegroup::{
    exp_um, exp_um_blocks, quat_to_rot, rot_to_quat, skew, upsilon, LieError, Mat3, Mat5, NavState, Quaternion,
    Rotation, TangentElement, Vec3,
};
use crate::measurements::{aggregate, gravity, Aggregates, FeatureMap, ImuSample, MeasurementError, ObservationFrame};
use crate::ppf::{transform, xi_at, PpfConfig, PpfError, PpfEval};

/// Any error component beyond this magnitude is treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("gain {name} = {value} must be finite and > 0")]
    InvalidGain { name: &'static str, value: f64 },
    #[error("time step {0} must be > 0")]
    InvalidStep(f64),
    #[error("estimate diverged at t = {t}: {reason}")]
    Divergence { t: f64, reason: String },
    #[error("no usable observation frame to initialize the performance envelope")]
    NoInitialFrame,
    #[error(transparent)]
    Ppf(#[from] PpfError),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterGains {
    pub k_w: f64,
    pub k_v: f64,
    pub k_a: f64,
    pub gamma_sigma: f64,
    pub k_sigma: f64,
    pub mu: f64,
    pub eps: f64,
    pub ell_p: f64,
}

impl Default for FilterGains {
    fn default() -> Self {
        FilterGains { k_w: 3.0, k_v: 3.0, k_a: 20.0, gamma_sigma: 3.0, k_sigma: 0.1, mu: 0.8, eps: 0.8, ell_p: 1.0 }
    }
}

impl FilterGains {
    pub fn validate(&self) -> Result<(), FilterError> {
        let named = [
            ("k_w", self.k_w),
            ("k_v", self.k_v),
            ("k_a", self.k_a),
            ("gamma_sigma", self.gamma_sigma),
            ("k_sigma", self.k_sigma),
            ("mu", self.mu),
            ("eps", self.eps),
            ("ell_p", self.ell_p),
        ];
        for (name, value) in named {
            if !(value.is_finite() && value > 0.0) {
                return Err(FilterError::InvalidGain { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterState {
    pub x_hat: NavState,
    pub sigma_hat: Vec3,
}

impl FilterState {
    pub fn new(x_hat: NavState) -> Self {
        FilterState { x_hat, sigma_hat: Vec3::zeros() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionTerms {
    pub w_omega: Vec3,
    pub w_v: Vec3,
    pub w_a: Vec3,
    pub k_r: f64,
}

impl CorrectionTerms {
    /// Output of `corrections` at zero error with zero noise-bound estimate.
    pub fn zero_error() -> Self {
        CorrectionTerms { w_omega: Vec3::zeros(), w_v: Vec3::zeros(), w_a: -gravity(), k_r: 0.0 }
    }

    fn generator(&self) -> TangentElement {
        TangentElement::new(self.w_omega, self.w_v, self.w_a, 1.0)
    }
}

/// `[||M R~||_I, R~^T P~_eps]`.
pub fn error_vector(agg: &Aggregates) -> [f64; 4] {
    [0.25 * (agg.m - agg.m_rt).trace(), agg.rt_pe.x, agg.rt_pe.y, agg.rt_pe.z]
}

/// `(d + 2) / (d + 1)` with the attitude error clamped at zero; measurement
/// noise can push the trace estimate slightly negative.
fn attitude_factor(e1: f64) -> f64 {
    let d = e1.max(0.0);
    (d + 2.0) / (d + 1.0)
}

pub fn corrections(
    agg: &Aggregates,
    ppf: &PpfEval,
    sigma_hat: &Vec3,
    r_hat: &Rotation,
    gains: &FilterGains,
) -> CorrectionTerms {
    let d1 = (0.25 * (agg.m - agg.m_rt).trace()).max(0.0);
    let ups = upsilon(&agg.m_rt);
    let e_r = ppf.e_r();
    let dr = ppf.delta_r();
    let e_p = ppf.e_p();
    let dp = ppf.delta_p();

    let body_ups = r_hat.transpose() * ups;
    let adaptive = r_hat.matrix() * Mat3::from_diagonal(&body_ups) * sigma_hat;
    let w_omega = -gains.k_w * (dr * e_r + 1.0) * ups - (dr / 4.0) * attitude_factor(d1) * adaptive;
    let w_v = skew(&agg.centroid) * w_omega - (gains.k_v / gains.eps) * (dp * e_p) - gains.ell_p * agg.rt_pe;
    let w_a = -gravity() - gains.k_a * ((gains.k_v / gains.mu) * dp + Mat3::identity()) * (dp * e_p);
    let k_r = gains.gamma_sigma * ((d1 + 2.0) / 8.0) * dr * dr * e_r.exp();
    CorrectionTerms { w_omega, w_v, w_a, k_r }
}

/// Explicit Euler step of the adaptive noise-bound estimate.
pub fn sigma_update(
    sigma_hat: &Vec3,
    k_r: f64,
    r_hat: &Rotation,
    ups: &Vec3,
    gains: &FilterGains,
    dt: f64,
) -> Vec3 {
    let b = r_hat.transpose() * *ups;
    sigma_hat + (b.component_mul(&b) * k_r - sigma_hat * (gains.k_sigma * gains.gamma_sigma)) * dt
}

/// Estimate right-multiplied by the exponential of the measured input. The
/// pending coupling in the fifth row is kept so the update can cancel it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    raw: Mat5,
}

impl Prediction {
    pub fn matrix(&self) -> &Mat5 {
        &self.raw
    }

    /// Top rows of the prediction, without gravity.
    pub fn state(&self) -> Result<NavState, LieError> {
        NavState::from_top_rows(&self.raw)
    }
}

fn measured_generator(imu: &ImuSample) -> TangentElement {
    TangentElement::new(imu.omega, Vec3::zeros(), imu.accel, 1.0)
}

pub fn predict(x_hat: &NavState, imu: &ImuSample, dt: f64) -> Prediction {
    Prediction { raw: x_hat.to_matrix() * exp_um(&measured_generator(imu), dt) }
}

/// Left-multiplies the prediction by `exp(-W dt)`; `W` carries `w_a` in its
/// acceleration slot and the unit coupling that cancels the prediction's.
pub fn update(pred: &Prediction, w: &CorrectionTerms, dt: f64) -> Result<NavState, LieError> {
    let a = exp_um(&w.generator().scaled(-1.0), dt);
    NavState::from_top_rows(&(a * pred.raw))
}

/// Prediction composed with the zero-error correction: the a-priori estimate at
/// the next instant, gravity included.
pub fn a_priori(pred: &Prediction, dt: f64) -> Result<NavState, LieError> {
    update(pred, &CorrectionTerms::zero_error(), dt)
}

/// Time derivatives of the continuous filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterDerivative {
    pub r_dot: Mat3,
    pub p_dot: Vec3,
    pub v_dot: Vec3,
    pub sigma_dot: Vec3,
}

/// `R' = R[w_m]x - [w_O]x R`, `P' = V - [w_O]x P - w_V`, `V' = R a_m - [w_O]x V - w_a`,
/// where `w_a` already contains `-g`.
pub fn continuous_rhs(
    state: &FilterState,
    imu: &ImuSample,
    agg: &Aggregates,
    ppf: &PpfEval,
    gains: &FilterGains,
) -> FilterDerivative {
    let x = &state.x_hat;
    let w = corrections(agg, ppf, &state.sigma_hat, &x.rotation, gains);
    let wx = skew(&w.w_omega);
    let r = x.rotation.matrix();
    let ups = upsilon(&agg.m_rt);
    let b = x.rotation.transpose() * ups;
    FilterDerivative {
        r_dot: r * skew(&imu.omega) - wx * r,
        p_dot: x.velocity - wx * x.position - w.w_v,
        v_dot: r * imu.accel - wx * x.velocity - w.w_a,
        sigma_dot: w.k_r * b.component_mul(&b) - gains.k_sigma * gains.gamma_sigma * state.sigma_hat,
    }
}

/// Why a frame did not produce a correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SkipReason {
    TooFewFeatures(usize),
    Degenerate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub t: f64,
    /// Present when a frame was used.
    pub error: Option<[f64; 4]>,
    pub ppf: Option<PpfEval>,
    pub skipped: Option<SkipReason>,
}

impl StepOutcome {
    pub fn inflation_mask(&self) -> u8 {
        self.ppf.map(|p| p.inflation_mask()).unwrap_or(0)
    }
}

/// Envelope parameters: either fixed, or derived from the error of the first frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PpfSetup {
    Fixed(PpfConfig),
    FromInitialError { xi_inf: [f64; 4], ell: [f64; 4] },
}

/// Multi-rate driver around the discrete step.
#[derive(Debug, Clone)]
pub struct NavigationFilter {
    gains: FilterGains,
    features: FeatureMap,
    setup: PpfSetup,
    ppf: Option<PpfConfig>,
    inflate: Option<[f64; 4]>,
    state: FilterState,
    t0: f64,
    t: f64,
}

fn check_divergence(t: f64, e: &[f64; 4]) -> Result<(), FilterError> {
    for (i, v) in e.iter().enumerate() {
        if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT {
            return Err(FilterError::Divergence { t, reason: format!("error component {} = {v}", i + 1) });
        }
    }
    Ok(())
}

fn divergence(t: f64) -> impl Fn(LieError) -> FilterError {
    move |e| FilterError::Divergence { t, reason: e.to_string() }
}

impl NavigationFilter {
    pub fn new(
        initial: NavState,
        features: FeatureMap,
        gains: FilterGains,
        setup: PpfSetup,
        t0: f64,
    ) -> Result<Self, FilterError> {
        gains.validate()?;
        if let PpfSetup::Fixed(cfg) = &setup {
            cfg.validate()?;
        }
        Ok(NavigationFilter {
            gains,
            features,
            setup,
            ppf: None,
            inflate: None,
            state: FilterState::new(initial),
            t0,
            t: t0,
        })
    }

    /// Overrides the guard inflation constants.
    pub fn with_inflation(mut self, inflate: [f64; 4]) -> Self {
        self.inflate = Some(inflate);
        self
    }

    pub fn state(&self) -> &FilterState {
        &self.state
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn ppf_config(&self) -> Option<&PpfConfig> {
        self.ppf.as_ref()
    }

    pub fn gains(&self) -> &FilterGains {
        &self.gains
    }

    /// Fixes the envelope from a frame observed at the start time. Fixed
    /// envelopes are checked against that frame's error.
    pub fn initialize(&mut self, frame: &ObservationFrame) -> Result<[f64; 4], FilterError> {
        let x = &self.state.x_hat;
        let agg = aggregate(&self.features, &frame.observations, &x.rotation, &x.position)?;
        let e0 = error_vector(&agg);
        let cfg = match self.setup {
            PpfSetup::Fixed(cfg) => {
                cfg.check_initial(&e0)?;
                cfg
            }
            PpfSetup::FromInitialError { xi_inf, ell } => PpfConfig::from_initial_error(&e0, xi_inf, ell)?,
        };
        self.ppf = Some(cfg);
        Ok(e0)
    }

    /// Advances from the current time to `t_next` using `imu`, applying the
    /// correction from `frame` (observed at `t_next`) when one is given.
    pub fn step(
        &mut self,
        imu: &ImuSample,
        frame: Option<&ObservationFrame>,
        t_next: f64,
    ) -> Result<StepOutcome, FilterError> {
        let dt = t_next - self.t;
        if !(dt > 0.0) {
            return Err(FilterError::InvalidStep(dt));
        }
        let pred = predict(&self.state.x_hat, imu, dt);
        let prior = a_priori(&pred, dt).map_err(divergence(t_next))?;
        let mut outcome = StepOutcome { t: t_next, error: None, ppf: None, skipped: None };

        let agg = match frame {
            None => None,
            Some(frame) => match aggregate(&self.features, &frame.observations, &prior.rotation, &prior.position) {
                Ok(agg) => Some(agg),
                Err(MeasurementError::TooFewFeatures(n)) => {
                    outcome.skipped = Some(SkipReason::TooFewFeatures(n));
                    None
                }
                Err(MeasurementError::Degenerate(l)) => {
                    outcome.skipped = Some(SkipReason::Degenerate(l));
                    None
                }
                Err(e) => return Err(e.into()),
            },
        };

        let Some(agg) = agg else {
            self.state.x_hat = prior;
            self.t = t_next;
            return Ok(outcome);
        };
        if self.ppf.is_none() {
            let x = self.state.x_hat;
            self.state.x_hat = prior;
            let init = self.initialize(frame.expect("frame present when aggregates exist"));
            self.state.x_hat = x;
            init?;
        }
        let cfg = self.ppf.expect("envelope initialized");

        let e = error_vector(&agg);
        check_divergence(t_next, &e)?;
        let xi = xi_at(&cfg, t_next - self.t0);
        let inflate = self.inflate.unwrap_or_else(|| cfg.default_inflation());
        let eval = transform(&e, &xi, &cfg.delta, &inflate)?;
        let w = corrections(&agg, &eval, &self.state.sigma_hat, &prior.rotation, &self.gains);
        let ups = upsilon(&agg.m_rt);
        let sigma = sigma_update(&self.state.sigma_hat, w.k_r, &prior.rotation, &ups, &self.gains, dt);
        let x_next = update(&pred, &w, dt).map_err(divergence(t_next))?;

        self.state = FilterState { x_hat: x_next, sigma_hat: sigma };
        self.t = t_next;
        outcome.error = Some(e);
        outcome.ppf = Some(eval);
        Ok(outcome)
    }
}

/// Filter state with attitude held as a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuatFilterState {
    pub q: Quaternion,
    pub position: Vec3,
    pub velocity: Vec3,
    pub sigma_hat: Vec3,
}

impl QuatFilterState {
    pub fn from_state(state: &FilterState) -> Self {
        QuatFilterState {
            q: rot_to_quat(&state.x_hat.rotation),
            position: state.x_hat.position,
            velocity: state.x_hat.velocity,
            sigma_hat: state.sigma_hat,
        }
    }

    pub fn rotation(&self) -> Result<Rotation, LieError> {
        quat_to_rot(&self.q)
    }
}

/// Closed-form composition `exp(-W dt) X exp(U dt)` on the quaternion state,
/// built from the SO(3) Jacobian blocks. The attitude follows
/// `Q' = exp(-w_O dt / 2) (x) Q (x) exp(w_m dt / 2)`.
fn quat_compose(x: &QuatFilterState, imu: &ImuSample, w: &CorrectionTerms, dt: f64) -> Result<QuatFilterState, LieError> {
    let r = quat_to_rot(&x.q)?;
    let (_, p_b, q_b) = exp_um_blocks(&measured_generator(imu), dt);
    let left = TangentElement::new(-w.w_omega, -w.w_v, -w.w_a, -1.0);
    let (_, p_a, q_a) = exp_um_blocks(&left, dt);
    let q_left = Quaternion::from_rotation_vector(&(-w.w_omega * dt));
    let q_right = Quaternion::from_rotation_vector(&(imu.omega * dt));
    let phi_a = quat_to_rot(&q_left)?;
    let q = (q_left * x.q * q_right).normalized();
    Ok(QuatFilterState {
        q,
        position: phi_a * (x.position + x.velocity * dt + r * p_b) + p_a + q_a * dt,
        velocity: phi_a * (x.velocity + r * q_b) + q_a,
        sigma_hat: x.sigma_hat,
    })
}

/// One quaternion-form step. `eval` is the envelope evaluation to use; pass the
/// one reported by the rotation-matrix filter to compare the two on identical
/// envelopes, or compute it from `cfg` via [`quat_envelope`].
pub fn quat_step(
    x: &QuatFilterState,
    imu: &ImuSample,
    frame: Option<(&FeatureMap, &ObservationFrame)>,
    envelope: &dyn Fn(&[f64; 4]) -> Result<PpfEval, PpfError>,
    gains: &FilterGains,
    dt: f64,
) -> Result<(QuatFilterState, Option<[f64; 4]>), FilterError> {
    let prior = quat_compose(x, imu, &CorrectionTerms::zero_error(), dt).map_err(divergence(f64::NAN))?;
    let Some((features, frame)) = frame else {
        return Ok((prior, None));
    };
    let r_prior = prior.rotation().map_err(divergence(f64::NAN))?;
    let agg = match aggregate(features, &frame.observations, &r_prior, &prior.position) {
        Ok(a) => a,
        Err(MeasurementError::TooFewFeatures(_)) | Err(MeasurementError::Degenerate(_)) => return Ok((prior, None)),
        Err(e) => return Err(e.into()),
    };
    let e = error_vector(&agg);
    let eval = envelope(&e)?;
    let w = corrections(&agg, &eval, &x.sigma_hat, &r_prior, gains);
    let ups = upsilon(&agg.m_rt);
    let mut next = quat_compose(x, imu, &w, dt).map_err(divergence(f64::NAN))?;
    next.sigma_hat = sigma_update(&x.sigma_hat, w.k_r, &r_prior, &ups, gains, dt);
    Ok((next, Some(e)))
}

/// Envelope closure evaluating `cfg` at time `t` (relative to the envelope start).
pub fn quat_envelope(cfg: PpfConfig, t: f64) -> impl Fn(&[f64; 4]) -> Result<PpfEval, PpfError> {
    move |e| transform(e, &xi_at(&cfg, t), &cfg.delta, &cfg.default_inflation())
}
