//! Prescribed performance envelopes and the log-ratio error transformation.

use thiserror::Error;

use crate::liegroup::{Mat3, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum PpfError {
    #[error("{field}[{index}] = {value} is invalid: {reason}")]
    InvalidParameter { field: &'static str, index: usize, value: f64, reason: &'static str },
    #[error("initial error e[{index}] = {error} is outside the envelope (delta*xi0 = {bound})")]
    InitialErrorOutside { index: usize, error: f64, bound: f64 },
    #[error("non-finite error component e[{0}]")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpfConfig {
    pub xi0: [f64; 4],
    pub xi_inf: [f64; 4],
    pub ell: [f64; 4],
    pub delta: [f64; 4],
}

pub const DEFAULT_XI_INF: [f64; 4] = [0.03, 0.1, 0.1, 0.1];
pub const DEFAULT_ELL: [f64; 4] = [1.0; 4];

fn check_positive(field: &'static str, v: &[f64; 4]) -> Result<(), PpfError> {
    for (index, &value) in v.iter().enumerate() {
        if !(value.is_finite() && value > 0.0) {
            return Err(PpfError::InvalidParameter { field, index, value, reason: "must be finite and > 0" });
        }
    }
    Ok(())
}

impl PpfConfig {
    pub fn new(xi0: [f64; 4], xi_inf: [f64; 4], ell: [f64; 4], delta: [f64; 4]) -> Result<Self, PpfError> {
        let cfg = PpfConfig { xi0, xi_inf, ell, delta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PpfError> {
        check_positive("xi_inf", &self.xi_inf)?;
        check_positive("xi0", &self.xi0)?;
        check_positive("ell", &self.ell)?;
        check_positive("delta", &self.delta)?;
        for i in 0..4 {
            if self.xi0[i] <= self.xi_inf[i] {
                return Err(PpfError::InvalidParameter {
                    field: "xi0",
                    index: i,
                    value: self.xi0[i],
                    reason: "must exceed xi_inf",
                });
            }
        }
        Ok(())
    }

    /// Envelope start and transform bound both set to
    /// `[1.2|e1(0)| + 0.5, 2|e2(0)| + 2, 2|e3(0)| + 2, 2|e4(0)| + 2]`.
    pub fn from_initial_error(e0: &[f64; 4], xi_inf: [f64; 4], ell: [f64; 4]) -> Result<Self, PpfError> {
        for (i, v) in e0.iter().enumerate() {
            if !v.is_finite() {
                return Err(PpfError::NonFinite(i));
            }
        }
        let mut start = [0.0; 4];
        start[0] = 1.2 * e0[0].abs() + 0.5;
        for i in 1..4 {
            start[i] = 2.0 * e0[i].abs() + 2.0;
        }
        let cfg = PpfConfig::new(start, xi_inf, ell, start)?;
        cfg.check_initial(e0)?;
        Ok(cfg)
    }

    /// Requires `|e_i(0)| < delta_i * xi0_i` so the transform is defined at start.
    pub fn check_initial(&self, e0: &[f64; 4]) -> Result<(), PpfError> {
        for (i, &e) in e0.iter().enumerate() {
            let bound = self.delta[i] * self.xi0[i];
            if !(e.abs() < bound) {
                return Err(PpfError::InitialErrorOutside { index: i, error: e, bound });
            }
        }
        Ok(())
    }

    /// Default guard inflation `0.01 * delta_i * xi_inf_i`.
    pub fn default_inflation(&self) -> [f64; 4] {
        std::array::from_fn(|i| 0.01 * self.delta[i] * self.xi_inf[i])
    }

    /// `-l_i (xi_i - xi_inf_i) / xi_i`, the relative envelope rate.
    pub fn relative_rate(&self, t: f64) -> [f64; 4] {
        let xi = xi_at(self, t);
        std::array::from_fn(|i| -self.ell[i] * (xi[i] - self.xi_inf[i]) / xi[i])
    }
}

/// `xi_i(t) = (xi0_i - xi_inf_i) exp(-l_i t) + xi_inf_i`.
pub fn xi_at(cfg: &PpfConfig, t: f64) -> [f64; 4] {
    std::array::from_fn(|i| (cfg.xi0[i] - cfg.xi_inf[i]) * (-cfg.ell[i] * t).exp() + cfg.xi_inf[i])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpfEval {
    /// Envelope after any inflation.
    pub xi: [f64; 4],
    pub transformed: [f64; 4],
    pub sensitivity: [f64; 4],
    pub inflated: [bool; 4],
}

impl PpfEval {
    pub fn e_r(&self) -> f64 {
        self.transformed[0]
    }

    pub fn e_p(&self) -> Vec3 {
        Vec3::new(self.transformed[1], self.transformed[2], self.transformed[3])
    }

    pub fn delta_r(&self) -> f64 {
        self.sensitivity[0]
    }

    pub fn delta_p(&self) -> Mat3 {
        Mat3::from_diagonal(&Vec3::new(self.sensitivity[1], self.sensitivity[2], self.sensitivity[3]))
    }

    pub fn any_inflated(&self) -> bool {
        self.inflated.iter().any(|&b| b)
    }

    /// Inflation flags packed as bits 0..3.
    pub fn inflation_mask(&self) -> u8 {
        self.inflated.iter().enumerate().fold(0, |m, (i, &b)| m | ((b as u8) << i))
    }
}

/// Maps envelope-constrained errors to unconstrained ones. A component with
/// `|e_i / xi_i| >= delta_i` first has its envelope widened to
/// `|e_i| / delta_i + inflate_i`.
pub fn transform(e: &[f64; 4], xi: &[f64; 4], delta: &[f64; 4], inflate: &[f64; 4]) -> Result<PpfEval, PpfError> {
    let mut out = PpfEval { xi: *xi, transformed: [0.0; 4], sensitivity: [0.0; 4], inflated: [false; 4] };
    for i in 0..4 {
        if !e[i].is_finite() {
            return Err(PpfError::NonFinite(i));
        }
        let d = delta[i];
        let mut x = xi[i];
        if (e[i] / x).abs() >= d {
            x = e[i].abs() / d + inflate[i];
            out.inflated[i] = true;
        }
        let r = e[i] / x;
        out.xi[i] = x;
        out.transformed[i] = 0.5 * ((d + r) / (d - r)).ln();
        out.sensitivity[i] = (1.0 / (2.0 * x)) * (1.0 / (d + r) + 1.0 / (d - r));
    }
    Ok(out)
}

/// `delta * tanh(E)`, the inverse of the transform on the normalized error.
pub fn smooth_map(transformed: f64, delta: f64) -> f64 {
    delta * transformed.tanh()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit4() -> [f64; 4] {
        [1.0; 4]
    }

    #[test]
    fn envelope_values() {
        let cfg = PpfConfig::new([1.03; 4], [0.03; 4], [1.0; 4], [1.0; 4]).unwrap();
        assert_eq!(xi_at(&cfg, 0.0), [1.03; 4]);
        assert_relative_eq!(xi_at(&cfg, 10f64.ln())[0], 0.13, epsilon = 1e-15);
        assert_relative_eq!(xi_at(&cfg, 50.0)[0], 0.03, max_relative = 1e-15);
    }

    #[test]
    fn transform_hand_values() {
        let z = transform(&[0.0; 4], &unit4(), &unit4(), &[0.01; 4]).unwrap();
        assert_eq!(z.transformed, [0.0; 4]);
        assert_eq!(z.sensitivity, [1.0; 4]);

        let h = transform(&[0.5; 4], &unit4(), &unit4(), &[0.01; 4]).unwrap();
        assert_relative_eq!(h.transformed[0], 0.5 * 3f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(h.transformed[0], 0.549306, epsilon = 1e-6);
        assert_relative_eq!(h.sensitivity[0], 4.0 / 3.0, epsilon = 1e-15);
        assert!(!h.any_inflated());
    }

    #[test]
    fn guard_inflates_envelope() {
        let g = transform(&[1.2, 0.0, 0.0, 0.0], &unit4(), &unit4(), &[0.01; 4]).unwrap();
        assert_eq!(g.inflated, [true, false, false, false]);
        assert_relative_eq!(g.xi[0], 1.21, epsilon = 1e-15);
        assert!(g.transformed[0].is_finite() && g.transformed[0] > 0.0);
        assert_eq!(g.inflation_mask(), 1);
        // exactly on the boundary also triggers
        let b = transform(&[0.0, -1.0, 0.0, 0.0], &unit4(), &unit4(), &[0.01; 4]).unwrap();
        assert_eq!(b.inflation_mask(), 2);
        assert!(b.transformed[1] < 0.0);
    }

    #[test]
    fn transform_rejects_non_finite() {
        assert_eq!(
            transform(&[0.0, f64::NAN, 0.0, 0.0], &unit4(), &unit4(), &[0.01; 4]),
            Err(PpfError::NonFinite(1))
        );
    }

    #[test]
    fn smooth_map_limits() {
        assert_eq!(smooth_map(0.0, 2.0), 0.0);
        assert_relative_eq!(smooth_map(50.0, 2.0), 2.0, epsilon = 1e-15);
        assert_relative_eq!(smooth_map(-50.0, 2.0), -2.0, epsilon = 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(PpfConfig::new([0.02; 4], [0.03; 4], [1.0; 4], [1.0; 4]).is_err());
        assert!(PpfConfig::new([1.0; 4], [0.03; 4], [0.0; 4], [1.0; 4]).is_err());
        assert!(PpfConfig::new([1.0; 4], [0.03; 4], [1.0; 4], [-1.0; 4]).is_err());
        let cfg = PpfConfig::new([1.0; 4], [0.03; 4], [1.0; 4], [1.0; 4]).unwrap();
        assert!(cfg.check_initial(&[0.5, 0.0, 0.0, 0.0]).is_ok());
        assert!(matches!(
            cfg.check_initial(&[0.0, 0.0, 1.5, 0.0]),
            Err(PpfError::InitialErrorOutside { index: 2, .. })
        ));
    }

    #[test]
    fn initial_error_configuration() {
        let cfg = PpfConfig::from_initial_error(&[0.4, -3.0, 1.0, 0.0], DEFAULT_XI_INF, DEFAULT_ELL).unwrap();
        assert_relative_eq!(cfg.xi0[0], 0.98, epsilon = 1e-15);
        assert_eq!(cfg.xi0[1], 8.0);
        assert_eq!(cfg.delta, cfg.xi0);
        assert_eq!(cfg.default_inflation()[1], 0.01 * 8.0 * 0.1);
    }

    #[test]
    fn relative_rate_matches_derivative() {
        let cfg = PpfConfig::new([2.0, 3.0, 3.0, 3.0], DEFAULT_XI_INF, [1.0, 0.5, 2.0, 1.0], [1.0; 4]).unwrap();
        let (t, h) = (0.7, 1e-6);
        let rate = cfg.relative_rate(t);
        let (a, b, c) = (xi_at(&cfg, t - h), xi_at(&cfg, t + h), xi_at(&cfg, t));
        for i in 0..4 {
            let fd = (b[i] - a[i]) / (2.0 * h) / c[i];
            assert_relative_eq!(rate[i], fd, max_relative = 1e-7);
        }
    }

    proptest! {
        #[test]
        fn round_trip_and_derivative(frac in -0.9..0.9f64, xi in 0.01..5.0f64, delta in 0.1..10.0f64) {
            let e = frac * delta * xi;
            let ev = transform(&[e; 4], &[xi; 4], &[delta; 4], &[0.0; 4]).unwrap();
            prop_assert!(!ev.any_inflated());
            prop_assert!((smooth_map(ev.transformed[0], delta) - e / xi).abs() < 1e-12 * delta.max(1.0));
            prop_assert!(ev.sensitivity[0] > 0.0);
            prop_assert_eq!(ev.transformed[0].signum() == e.signum() || e == 0.0, true);

            let h = 1e-6 * delta * xi;
            let lo = transform(&[e - h; 4], &[xi; 4], &[delta; 4], &[0.0; 4]).unwrap().transformed[0];
            let hi = transform(&[e + h; 4], &[xi; 4], &[delta; 4], &[0.0; 4]).unwrap().transformed[0];
            let fd = (hi - lo) / (2.0 * h);
            prop_assert!((fd - ev.sensitivity[0]).abs() <= 1e-6 * ev.sensitivity[0]);
            prop_assert!(hi > lo);
        }

        #[test]
        fn containment_after_guard(e in -100.0..100.0f64, xi in 0.01..2.0f64, delta in 0.1..5.0f64) {
            let cfg_eps = 0.01 * delta * 0.03;
            let ev = transform(&[e; 4], &[xi; 4], &[delta; 4], &[cfg_eps; 4]).unwrap();
            prop_assert!(e.abs() < delta * ev.xi[0]);
            prop_assert!(ev.transformed[0].is_finite());
        }

        #[test]
        fn envelope_decreasing_and_convex(t in 0.0..20.0f64, dt in 0.01..1.0f64) {
            let cfg = PpfConfig::new([1.2, 4.0, 4.0, 4.0], DEFAULT_XI_INF, DEFAULT_ELL, [1.0; 4]).unwrap();
            let a = xi_at(&cfg, t);
            let b = xi_at(&cfg, t + dt);
            let c = xi_at(&cfg, t + 2.0 * dt);
            for i in 0..4 {
                prop_assert!(b[i] < a[i] || (a[i] - cfg.xi_inf[i]) < 1e-12);
                prop_assert!(a[i] + c[i] - 2.0 * b[i] >= -1e-15);
            }
        }
    }
}
