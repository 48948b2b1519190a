//! Discrete dynamic movement primitives.
//!
//! Each DOF is a critically damped spring pulled toward its goal and shaped
//! by a learned forcing term:
//!
//! ```text
//! τ·v̇ = K·(g − x) − D·v + (g − x0)·f(s)
//! τ·ẋ = v
//! τ·ṡ = −α·s
//! f(s) = s · Σ ωᵢ ψᵢ(s) / Σ ψᵢ(s),   ψᵢ(s) = exp(−hᵢ (s − cᵢ)²)
//! ```
//!
//! All DOFs share one canonical phase `s`. Weights are fitted per basis by
//! locally weighted regression against forces recovered from a
//! demonstration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{self, Trajectory, TrajectoryError, TrajectoryMeta, TrajectorySample};

/// Goal/start separation below which a DOF is treated as stationary.
pub const STATIC_THRESHOLD: f64 = 1e-6;
/// Floor for the canonical phase.
pub const MIN_PHASE: f64 = 1e-12;
pub const DEFAULT_STIFFNESS: f64 = 400.0;
/// Multiplier on the spacing-based width `1 / (2 Δc²)`. At 16 each Gaussian's
/// standard deviation is a quarter of the gap to its neighbour; wider bases
/// blur 1-2 Hz content of a 2 s demonstration by several percent.
pub const DEFAULT_WIDTH_SCALE: f64 = 16.0;
/// `ln(100)`: the phase decays to 0.01 at `t = τ`.
pub const DEFAULT_ALPHA: f64 = 4.605_170_185_988_092;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DmpError {
    #[error("demonstration needs at least 3 samples, has {0}")]
    EmptyDemo(usize),
    #[error("non-monotonic time in demonstration")]
    NonMonotonicTime,
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("model json: {0}")]
    Serialization(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmpConfig {
    /// Spring constant K.
    pub k: f64,
    /// Damping D; `2√K` makes the unforced system critically damped.
    pub d: f64,
    pub alpha: f64,
    pub n_basis: usize,
    pub dt: f64,
    pub regularization: f64,
    #[serde(default = "default_width_scale")]
    pub width_scale: f64,
}

fn default_width_scale() -> f64 {
    DEFAULT_WIDTH_SCALE
}

impl DmpConfig {
    /// Critically damped configuration with the given spring constant.
    pub fn with_stiffness(k: f64) -> Self {
        Self { k, d: 2.0 * k.sqrt(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DmpError> {
        let bad = |m: &str| Err(DmpError::InvalidConfig(m.to_owned()));
        if !(self.k > 0.0 && self.k.is_finite()) {
            return bad("K must be > 0");
        }
        if !(self.d > 0.0 && self.d.is_finite()) {
            return bad("D must be > 0");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be > 0");
        }
        if self.n_basis < 2 {
            return bad("need at least 2 basis functions");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be > 0");
        }
        if !(self.regularization >= 0.0) {
            return bad("regularization must be >= 0");
        }
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return bad("width_scale must be > 0");
        }
        Ok(())
    }
}

impl Default for DmpConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_STIFFNESS,
            d: 2.0 * DEFAULT_STIFFNESS.sqrt(),
            alpha: DEFAULT_ALPHA,
            n_basis: 20,
            dt: 1e-3,
            regularization: 1e-10,
            width_scale: DEFAULT_WIDTH_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DofPrimitive {
    pub weights: Vec<f64>,
    pub x0: f64,
    pub g: f64,
    #[serde(rename = "static")]
    pub is_static: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmpModel {
    pub config: DmpConfig,
    /// Demonstration duration in seconds.
    pub tau: f64,
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
    pub dofs: Vec<DofPrimitive>,
}

impl DmpModel {
    pub fn dof(&self) -> usize {
        self.dofs.len()
    }

    pub fn start(&self) -> Vec<f64> {
        self.dofs.iter().map(|d| d.x0).collect()
    }

    pub fn goal(&self) -> Vec<f64> {
        self.dofs.iter().map(|d| d.g).collect()
    }

    pub fn forcing(&self, dof: usize, s: f64) -> f64 {
        forcing(&self.dofs[dof].weights, &self.centers, &self.widths, s)
    }

    pub fn validate(&self) -> Result<(), DmpError> {
        self.config.validate()?;
        let n = self.config.n_basis;
        if self.centers.len() != n || self.widths.len() != n {
            return Err(DmpError::InvalidConfig("basis arrays must have n_basis entries".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(DmpError::InvalidConfig("tau must be > 0".into()));
        }
        if self.centers.windows(2).any(|w| w[1] >= w[0])
            || self.centers.iter().any(|&c| !(c > 0.0 && c <= 1.0))
        {
            return Err(DmpError::InvalidConfig("centers must decrease strictly within (0, 1]".into()));
        }
        if self.widths.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(DmpError::InvalidConfig("widths must be positive".into()));
        }
        if let Some(d) = self.dofs.iter().find(|d| d.weights.len() != n) {
            return Err(DmpError::DimensionMismatch { expected: n, found: d.weights.len() });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DmpError> {
        let model: Self = serde_json::from_str(text).map_err(|e| DmpError::Serialization(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }
}

/// One explicit Euler step of `τ·ṡ = −α·s`.
pub fn canonical_decay(s: f64, alpha: f64, tau: f64, dt: f64) -> f64 {
    (s + dt * (-alpha * s / tau)).max(MIN_PHASE)
}

/// Phase at each of `steps + 1` grid points starting from `s = 1`.
pub fn canonical_phases(steps: usize, alpha: f64, tau: f64, dt: f64) -> Vec<f64> {
    let mut s = 1.0;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(s);
    for _ in 0..steps {
        s = canonical_decay(s, alpha, tau, dt);
        out.push(s);
    }
    out
}

/// `cᵢ = exp(−α·i/(N−1))`: evenly spaced in time along the phase decay.
pub fn basis_centers(alpha: f64, n: usize) -> Vec<f64> {
    let last = (n.max(2) - 1) as f64;
    (0..n).map(|i| (-alpha * i as f64 / last).exp()).collect()
}

/// `hᵢ = scale / (2 (cᵢ₊₁ − cᵢ)²)`, the last width repeating its neighbour.
pub fn basis_widths(centers: &[f64], scale: f64) -> Vec<f64> {
    let mut widths: Vec<f64> = centers
        .windows(2)
        .map(|w| scale / (2.0 * (w[1] - w[0]).powi(2)))
        .collect();
    if let Some(&last) = widths.last() {
        widths.push(last);
    }
    widths
}

pub fn basis_activation(center: f64, width: f64, s: f64) -> f64 {
    (-width * (s - center).powi(2)).exp()
}

/// Normalized weighted basis sum scaled by the phase; zero when no basis is
/// active.
pub fn forcing(weights: &[f64], centers: &[f64], widths: &[f64], s: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((w, c), h) in weights.iter().zip(centers).zip(widths) {
        let psi = basis_activation(*c, *h, s);
        num += w * psi;
        den += psi;
    }
    if den < 1e-12 {
        0.0
    } else {
        num / den * s
    }
}

/// Forcing values that make the transformation system reproduce a sampled
/// demonstration. Returns `None` for a stationary DOF (`|g − x0|` below
/// [`STATIC_THRESHOLD`]).
pub fn target_forces(
    x: &[f64],
    xd: &[f64],
    xdd: &[f64],
    config: &DmpConfig,
    tau: f64,
    g: f64,
    x0: f64,
) -> Result<Option<Vec<f64>>, DmpError> {
    for len in [xd.len(), xdd.len()] {
        if len != x.len() {
            return Err(DmpError::DimensionMismatch { expected: x.len(), found: len });
        }
    }
    let span = g - x0;
    if span.abs() < STATIC_THRESHOLD {
        return Ok(None);
    }
    Ok(Some(
        x.iter()
            .zip(xd)
            .zip(xdd)
            .map(|((x, v), a)| (tau * tau * a + config.d * tau * v - config.k * (g - x)) / span)
            .collect(),
    ))
}

/// Per-basis weighted least squares with the phase as regressor:
/// `ωᵢ = Σ ψᵢ s f / (Σ ψᵢ s² + ε)`.
pub fn fit_weights_lwr(
    f_target: &[f64],
    phases: &[f64],
    centers: &[f64],
    widths: &[f64],
    regularization: f64,
) -> Result<Vec<f64>, DmpError> {
    if f_target.is_empty() {
        return Err(DmpError::EmptyDemo(0));
    }
    if phases.len() != f_target.len() {
        return Err(DmpError::DimensionMismatch { expected: f_target.len(), found: phases.len() });
    }
    Ok(centers
        .iter()
        .zip(widths)
        .map(|(&c, &h)| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (&f, &s) in f_target.iter().zip(phases) {
                let psi = basis_activation(c, h, s);
                num += psi * s * f;
                den += psi * s * s;
            }
            num / (den + regularization)
        })
        .collect())
}

/// Learn one primitive per DOF from a demonstration.
///
/// The demonstration is resampled at `config.dt` and differentiated with
/// three-point stencils; `τ` is its duration and each DOF's start and goal
/// are its first and last positions.
pub fn train(demo: &Trajectory, config: &DmpConfig) -> Result<DmpModel, DmpError> {
    config.validate()?;
    if demo.len() < 3 {
        return Err(DmpError::EmptyDemo(demo.len()));
    }
    if demo.samples().windows(2).any(|w| w[1].t <= w[0].t) {
        return Err(DmpError::NonMonotonicTime);
    }
    let uniform = trajectory::resample(demo, config.dt)?;
    let (vel, acc) = trajectory::differentiate(&uniform)?;
    let tau = uniform.duration();
    let steps = uniform.len() - 1;
    let phases = canonical_phases(steps, config.alpha, tau, tau / steps as f64);

    let centers = basis_centers(config.alpha, config.n_basis);
    let widths = basis_widths(&centers, config.width_scale);

    let dofs = (0..demo.dof())
        .map(|j| {
            let x = uniform.column(j);
            let xd: Vec<f64> = vel.iter().map(|v| v[j]).collect();
            let xdd: Vec<f64> = acc.iter().map(|a| a[j]).collect();
            let x0 = x[0];
            let g = x[steps];
            match target_forces(&x, &xd, &xdd, config, tau, g, x0)? {
                None => Ok(DofPrimitive { weights: vec![0.0; config.n_basis], x0, g, is_static: true }),
                Some(f) => Ok(DofPrimitive {
                    weights: fit_weights_lwr(&f, &phases, &centers, &widths, config.regularization)?,
                    x0,
                    g,
                    is_static: false,
                }),
            }
        })
        .collect::<Result<Vec<_>, DmpError>>()?;

    Ok(DmpModel { config: *config, tau, centers, widths, dofs })
}

/// Integrate every DOF from rest at `x0` toward `g` over `tau` seconds with
/// explicit Euler steps of `dt`. Samples carry positions and velocities.
pub fn rollout(model: &DmpModel, x0: &[f64], g: &[f64], tau: f64, dt: f64) -> Result<Trajectory, DmpError> {
    let n = model.dof();
    for v in [x0, g] {
        if v.len() != n {
            return Err(DmpError::DimensionMismatch { expected: n, found: v.len() });
        }
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(DmpError::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DmpError::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    let cfg = &model.config;
    let steps = ((tau / dt).round() as usize).max(1);
    // every update scales with dt/τ, so (τ, dt) and (cτ, c·dt) coincide
    let ratio = dt / tau;

    let mut x = x0.to_vec();
    let mut v = vec![0.0; n];
    let mut s = 1.0;
    let meta = TrajectoryMeta {
        joint_names: (0..n).map(|i| format!("dof_{i}")).collect(),
        ..Default::default()
    };
    let mut out = Trajectory::new(n, meta);
    let sample = |t: f64, x: &[f64], v: &[f64]| TrajectorySample {
        t,
        q: x.to_vec(),
        qd: Some(v.iter().map(|v| v / tau).collect()),
        gripper: None,
    };
    out.append(sample(0.0, &x, &v))?;
    for k in 1..=steps {
        for j in 0..n {
            let f = model.forcing(j, s);
            let accel = cfg.k * (g[j] - x[j]) - cfg.d * v[j] + (g[j] - x0[j]) * f;
            x[j] += ratio * v[j];
            v[j] += ratio * accel;
        }
        s = (s - ratio * cfg.alpha * s).max(MIN_PHASE);
        out.append(sample(k as f64 * dt, &x, &v))?;
    }
    Ok(out)
}
