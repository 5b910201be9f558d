//! Noise and restoration schedules.
//!
//! Both schedules are cumulative amplitudes stored at indices `0..=T`, with an
//! explicit zero row at `t = 0` so that the state at `t = 0` is the clean
//! target. The per-step reverse coefficients are first differences of the
//! cumulative schedules, which makes the telescoped reverse pass with exact
//! predictions invert the forward marginal.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseShape {
    #[default]
    Linear,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RestorationShape {
    #[default]
    Linear,
    Quadratic,
    /// Restoration disabled: the restoration amplitude is identically zero.
    Zero,
}

impl std::str::FromStr for NoiseShape {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            _ => Err(format!("unknown noise shape `{s}` (linear|cosine)")),
        }
    }
}

impl std::str::FromStr for RestorationShape {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "quadratic" => Ok(Self::Quadratic),
            "zero" => Ok(Self::Zero),
            _ => Err(format!("unknown restoration shape `{s}` (linear|quadratic|zero)")),
        }
    }
}

/// Discretized noise and restoration schedules plus the reverse coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulePair {
    pub timesteps: usize,
    pub noise_shape: NoiseShape,
    pub restoration_shape: RestorationShape,
    /// Cumulative noise amplitude, length `T + 1`.
    pub alpha_bar: Vec<f64>,
    /// Cumulative restoration amplitude, length `T + 1`.
    pub beta_bar: Vec<f64>,
    /// Per-step restoration coefficient, length `T`; `gamma[t - 1]` is used at step `t`.
    #[serde(skip)]
    gamma: Vec<f64>,
    /// Per-step noise coefficient, length `T`.
    #[serde(skip)]
    eta: Vec<f64>,
}

/// Terminal noise amplitude used by [`make_schedule`].
pub const DEFAULT_TERMINAL_NOISE: f64 = 1.0;

/// Build a schedule pair with the default terminal noise amplitude.
pub fn make_schedule(
    timesteps: usize,
    noise_shape: NoiseShape,
    restoration_shape: RestorationShape,
) -> Result<SchedulePair> {
    SchedulePair::new(timesteps, noise_shape, restoration_shape, DEFAULT_TERMINAL_NOISE)
}

impl SchedulePair {
    pub fn new(
        timesteps: usize,
        noise_shape: NoiseShape,
        restoration_shape: RestorationShape,
        terminal_noise: f64,
    ) -> Result<Self> {
        ensure!(timesteps >= 1, InvalidArgument, "T must be >= 1, got {timesteps}");
        ensure!(
            terminal_noise.is_finite() && terminal_noise >= 0.0,
            InvalidArgument,
            "terminal noise amplitude must be finite and >= 0, got {terminal_noise}"
        );
        let n = timesteps as f64;
        let alpha_bar: Vec<f64> = (0..=timesteps)
            .map(|t| {
                let s = t as f64 / n;
                let shape = match noise_shape {
                    NoiseShape::Linear => s,
                    // 1 - cos(pi s / 2) rises slowly near t=0 and reaches 1 at t=T
                    NoiseShape::Cosine => 1.0 - (std::f64::consts::FRAC_PI_2 * s).cos(),
                };
                terminal_noise * shape
            })
            .collect();
        let beta_bar: Vec<f64> = (0..=timesteps)
            .map(|t| {
                let s = t as f64 / n;
                match restoration_shape {
                    RestorationShape::Linear => s,
                    RestorationShape::Quadratic => s * s,
                    RestorationShape::Zero => 0.0,
                }
            })
            .collect();
        let mut alpha_bar = alpha_bar;
        // cos(pi/2) is not exactly zero in floating point
        alpha_bar[timesteps] = terminal_noise;
        Self::from_cumulative(noise_shape, restoration_shape, alpha_bar, beta_bar)
    }

    /// Build from explicit cumulative vectors, validating them and deriving the
    /// reverse coefficients.
    pub fn from_cumulative(
        noise_shape: NoiseShape,
        restoration_shape: RestorationShape,
        alpha_bar: Vec<f64>,
        beta_bar: Vec<f64>,
    ) -> Result<Self> {
        ensure!(
            alpha_bar.len() >= 2 && alpha_bar.len() == beta_bar.len(),
            InvalidArgument,
            "schedules must have equal length >= 2 (got {} and {})",
            alpha_bar.len(),
            beta_bar.len()
        );
        let (gamma, eta) = reverse_coefficients(&alpha_bar, &beta_bar)?;
        Ok(Self {
            timesteps: alpha_bar.len() - 1,
            noise_shape,
            restoration_shape,
            alpha_bar,
            beta_bar,
            gamma,
            eta,
        })
    }

    /// Recompute the derived coefficients after deserialization.
    pub fn revalidate(self) -> Result<Self> {
        ensure!(
            self.alpha_bar.len() == self.timesteps + 1,
            InvalidArgument,
            "schedule length {} does not match T = {}",
            self.alpha_bar.len(),
            self.timesteps
        );
        Self::from_cumulative(self.noise_shape, self.restoration_shape, self.alpha_bar, self.beta_bar)
    }

    /// Restoration coefficient used at step `t` (1-based).
    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t - 1]
    }

    /// Noise coefficient used at step `t` (1-based).
    pub fn eta(&self, t: usize) -> f64 {
        self.eta[t - 1]
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    pub fn etas(&self) -> &[f64] {
        &self.eta
    }

    /// Same schedule with the restoration path switched off.
    pub fn without_restoration(&self) -> Self {
        let beta_bar = vec![0.0; self.beta_bar.len()];
        Self::from_cumulative(self.noise_shape, RestorationShape::Zero, self.alpha_bar.clone(), beta_bar)
            .expect("zero restoration schedule is always valid")
    }
}

/// First differences of the cumulative schedules: `(gamma, eta)`.
pub fn reverse_coefficients(alpha_bar: &[f64], beta_bar: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    for (name, v) in [("alpha_bar", alpha_bar), ("beta_bar", beta_bar)] {
        ensure!(
            v.iter().all(|x| x.is_finite()),
            InvalidArgument,
            "{name} contains non-finite entries"
        );
        ensure!(v[0] == 0.0, InvalidArgument, "{name}[0] must be 0, got {}", v[0]);
        if let Some(t) = v.windows(2).position(|w| w[1] < w[0]) {
            return Err(crate::Error::InvalidArgument(format!(
                "{name} is not monotone at t = {}",
                t + 1
            )));
        }
    }
    let diff = |v: &[f64]| v.windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>();
    Ok((diff(beta_bar), diff(alpha_bar)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_ramp_t10() {
        let s = make_schedule(10, NoiseShape::Linear, RestorationShape::Linear).unwrap();
        for t in 0..=10 {
            assert!((s.beta_bar[t] - t as f64 / 10.0).abs() < 1e-15);
        }
        assert_eq!(s.beta_bar[10], 1.0);
    }

    #[test]
    fn single_step() {
        let s = make_schedule(1, NoiseShape::Linear, RestorationShape::Linear).unwrap();
        assert_eq!(s.beta_bar, vec![0.0, 1.0]);
        assert_eq!(s.gammas(), &[1.0]);
    }

    #[test]
    fn cosine_t1000_monotone_with_endpoints() {
        let s = make_schedule(1000, NoiseShape::Cosine, RestorationShape::Linear).unwrap();
        assert_eq!(s.alpha_bar[0], 0.0);
        assert_eq!(s.alpha_bar[1000], DEFAULT_TERMINAL_NOISE);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] >= w[0]));
        assert!(s.beta_bar.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn zero_timesteps_rejected() {
        let err = make_schedule(0, NoiseShape::Linear, RestorationShape::Linear).unwrap_err();
        assert_eq!(err.kind(), "invalid-argument");
    }

    #[test]
    fn coefficient_examples() {
        let (g, _) = reverse_coefficients(&[0.0, 0.0, 0.0], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(g, vec![0.5, 0.5]);
        let (_, e) = reverse_coefficients(&[0.0, 0.0, 0.0], &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(e, vec![0.0, 0.0]);
        let s = make_schedule(4, NoiseShape::Linear, RestorationShape::Linear).unwrap();
        assert_eq!(s.gammas(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn non_monotone_rejected() {
        let err = reverse_coefficients(&[0.0, 0.5, 0.4], &[0.0, 0.5, 1.0]).unwrap_err();
        assert_eq!(err.kind(), "invalid-argument");
    }

    #[test]
    fn zero_restoration_gives_zero_gamma() {
        let s = make_schedule(25, NoiseShape::Cosine, RestorationShape::Zero).unwrap();
        assert!(s.gammas().iter().all(|&g| g == 0.0));
        let s2 = make_schedule(25, NoiseShape::Cosine, RestorationShape::Linear)
            .unwrap()
            .without_restoration();
        assert_eq!(s2.gammas(), s.gammas());
    }

    #[test]
    fn deterministic_construction() {
        let a = make_schedule(137, NoiseShape::Cosine, RestorationShape::Quadratic).unwrap();
        let b = make_schedule(137, NoiseShape::Cosine, RestorationShape::Quadratic).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.gammas(), b.gammas());
    }

    #[test]
    fn serde_round_trip_rebuilds_coefficients() {
        let a = make_schedule(12, NoiseShape::Cosine, RestorationShape::Quadratic).unwrap();
        let json = serde_json::to_string(&a).unwrap();
        let b: SchedulePair = serde_json::from_str(&json).unwrap();
        let b = b.revalidate().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.etas(), b.etas());
    }
}
