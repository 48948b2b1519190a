//! Timestamped multi-DOF trajectories: recording, resampling, finite
//! differences, smoothing and the `.traj.jsonl` file format.
//!
//! File layout: the first line is a header object
//! `{"version":1,"dof":N,"joint_names":[..],"robot":".."}`, every following
//! line is one sample `{"t":..,"q":[..],"qd":[..]?,"gripper":"open"|"closed"?}`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("non-monotonic time at sample {index}: t = {t} after {prev}")]
    NonMonotonicTime { index: usize, t: f64, prev: f64 },
    #[error("first sample must be at t = 0, got {0}")]
    NonZeroStart(f64),
    #[error("dof mismatch: expected {expected}, got {found}")]
    DofMismatch { expected: usize, found: usize },
    #[error("need at least {needed} samples, have {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("smoothing window must be odd and positive, got {0}")]
    EvenWindow(usize),
    #[error("step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("non-finite value in sample {0}")]
    NonFinite(usize),
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("unsupported schema version {found} (expected {SCHEMA_VERSION})")]
    SchemaVersionMismatch { found: u64 },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for TrajectoryError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GripperState {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub q: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qd: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gripper: Option<GripperState>,
}

impl TrajectorySample {
    pub fn new(t: f64, q: Vec<f64>) -> Self {
        Self { t, q, qd: None, gripper: None }
    }

    fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.q.iter().all(|v| v.is_finite())
            && self.qd.as_ref().is_none_or(|qd| qd.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    #[serde(default)]
    pub robot: String,
    #[serde(default)]
    pub joint_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

/// Ordered samples with strictly increasing time starting at zero.
///
/// An empty trajectory doubles as a recorder: [`Trajectory::append`] enforces
/// the ordering and dimension invariants sample by sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dof: usize,
    samples: Vec<TrajectorySample>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn new(dof: usize, meta: TrajectoryMeta) -> Self {
        Self { dof, samples: Vec::new(), meta }
    }

    pub fn from_samples(
        dof: usize,
        meta: TrajectoryMeta,
        samples: impl IntoIterator<Item = TrajectorySample>,
    ) -> Result<Self, TrajectoryError> {
        let mut traj = Self::new(dof, meta);
        for s in samples {
            traj.append(s)?;
        }
        Ok(traj)
    }

    pub fn append(&mut self, sample: TrajectorySample) -> Result<(), TrajectoryError> {
        let index = self.samples.len();
        if sample.q.len() != self.dof {
            return Err(TrajectoryError::DofMismatch { expected: self.dof, found: sample.q.len() });
        }
        if let Some(qd) = &sample.qd {
            if qd.len() != self.dof {
                return Err(TrajectoryError::DofMismatch { expected: self.dof, found: qd.len() });
            }
        }
        if !sample.is_finite() {
            return Err(TrajectoryError::NonFinite(index));
        }
        match self.samples.last() {
            None if sample.t != 0.0 => return Err(TrajectoryError::NonZeroStart(sample.t)),
            Some(prev) if sample.t <= prev.t => {
                return Err(TrajectoryError::NonMonotonicTime { index, t: sample.t, prev: prev.t })
            }
            _ => {}
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn samples(&self) -> &[TrajectorySample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t)
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    /// Values of one DOF over time.
    pub fn column(&self, dof: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.q[dof]).collect()
    }

    /// Index of the last sample with `t_i <= t` (clamped to the valid range).
    pub fn segment_index(&self, t: f64) -> usize {
        let idx = self.samples.partition_point(|s| s.t <= t);
        idx.saturating_sub(1).min(self.samples.len().saturating_sub(1))
    }

    /// Linear interpolation of positions at time `t`, clamped to the ends.
    pub fn position_at(&self, t: f64) -> Vec<f64> {
        let i = self.segment_index(t);
        let a = &self.samples[i];
        if i + 1 >= self.samples.len() || t <= a.t {
            return a.q.clone();
        }
        let b = &self.samples[i + 1];
        let u = (t - a.t) / (b.t - a.t);
        lerp(&a.q, &b.q, u)
    }
}

fn lerp(a: &[f64], b: &[f64], u: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + (y - x) * u).collect()
}

/// Resample onto the grid `0, dt, 2dt, ..` by linear interpolation.
///
/// The grid has `round(duration / dt)` intervals; the final sample sits at the
/// original end time, so both endpoints are reproduced exactly. Velocities are
/// interpolated only when every input sample carries them.
pub fn resample(traj: &Trajectory, dt: f64) -> Result<Trajectory, TrajectoryError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(TrajectoryError::InvalidStep(dt));
    }
    let n_in = traj.len();
    if n_in < 2 {
        return Err(TrajectoryError::TooFewSamples { needed: 2, found: n_in });
    }
    let duration = traj.duration();
    let intervals = ((duration / dt).round() as usize).max(1);
    let with_qd = traj.samples.iter().all(|s| s.qd.is_some());

    let mut out = Trajectory::new(traj.dof, traj.meta.clone());
    let mut seg = 0usize;
    for k in 0..=intervals {
        let t = if k == intervals { duration } else { k as f64 * dt };
        while seg + 2 < n_in && traj.samples[seg + 1].t <= t {
            seg += 1;
        }
        let a = &traj.samples[seg];
        let b = &traj.samples[seg + 1];
        let (q, qd) = if t == a.t {
            (a.q.clone(), a.qd.clone())
        } else if t == b.t {
            (b.q.clone(), b.qd.clone())
        } else {
            let u = (t - a.t) / (b.t - a.t);
            let qd = with_qd.then(|| lerp(a.qd.as_ref().unwrap(), b.qd.as_ref().unwrap(), u));
            (lerp(&a.q, &b.q, u), qd)
        };
        let gripper = if t >= b.t { b.gripper } else { a.gripper };
        out.samples.push(TrajectorySample { t, q, qd: if with_qd { qd } else { None }, gripper });
    }
    Ok(out)
}

/// Velocities and accelerations per sample from three-point finite
/// differences: central in the interior, one-sided (second order) at the ends.
///
/// The stencils use the actual sample times, so a slightly uneven last
/// interval (as produced by [`resample`]) is handled exactly for quadratics.
pub fn differentiate(traj: &Trajectory) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), TrajectoryError> {
    let n = traj.len();
    if n < 3 {
        return Err(TrajectoryError::TooFewSamples { needed: 3, found: n });
    }
    let t: Vec<f64> = traj.times();
    let mut vel = vec![vec![0.0; traj.dof]; n];
    let mut acc = vec![vec![0.0; traj.dof]; n];

    for i in 0..n {
        // stencil centre index and evaluation position within the stencil
        let c = i.clamp(1, n - 2);
        let (t0, t1, t2) = (t[c - 1], t[c], t[c + 1]);
        let h1 = t1 - t0;
        let h2 = t2 - t1;
        let w = h1 + h2;
        let (d0, d1, d2) = if i == c {
            (-h2 / (h1 * w), (h2 - h1) / (h1 * h2), h1 / (h2 * w))
        } else if i < c {
            (-(2.0 * h1 + h2) / (h1 * w), w / (h1 * h2), -h1 / (h2 * w))
        } else {
            (h2 / (h1 * w), -w / (h1 * h2), (2.0 * h2 + h1) / (h2 * w))
        };
        let (a0, a1, a2) = (2.0 / (h1 * w), -2.0 / (h1 * h2), 2.0 / (h2 * w));
        let (y0, y1, y2) = (&traj.samples[c - 1].q, &traj.samples[c].q, &traj.samples[c + 1].q);
        for j in 0..traj.dof {
            vel[i][j] = d0 * y0[j] + d1 * y1[j] + d2 * y2[j];
            acc[i][j] = a0 * y0[j] + a1 * y1[j] + a2 * y2[j];
        }
    }
    // the three-point one-sided second derivative is only first order;
    // four points restore second order at the ends
    if n >= 4 {
        for (i, first) in [(0, 0), (n - 1, n - 4)] {
            let nodes = [t[first], t[first + 1], t[first + 2], t[first + 3]];
            let weights = cubic_second_derivative_weights(&nodes, t[i]);
            for j in 0..traj.dof {
                acc[i][j] = (0..4).map(|m| weights[m] * traj.samples[first + m].q[j]).sum();
            }
        }
    }
    Ok((vel, acc))
}

/// Second derivative of the cubic Lagrange basis through `nodes`, at `x`.
fn cubic_second_derivative_weights(nodes: &[f64; 4], x: f64) -> [f64; 4] {
    let mut out = [0.0; 4];
    for k in 0..4 {
        let mut denom = 1.0;
        let mut spread = 0.0;
        for m in (0..4).filter(|&m| m != k) {
            denom *= nodes[k] - nodes[m];
            spread += x - nodes[m];
        }
        out[k] = 2.0 * spread / denom;
    }
    out
}

/// Centered moving average per DOF. Near the ends the window shrinks
/// symmetrically, so the first and last samples are kept as-is.
pub fn smooth(traj: &Trajectory, window: usize) -> Result<Trajectory, TrajectoryError> {
    if window == 0 || window % 2 == 0 {
        return Err(TrajectoryError::EvenWindow(window));
    }
    let n = traj.len();
    let half = window / 2;
    let reach = |i: usize| half.min(i).min(n - 1 - i);
    let q_rows: Vec<&[f64]> = traj.samples.iter().map(|s| s.q.as_slice()).collect();
    let qd_rows: Option<Vec<&[f64]>> = traj.samples.iter().map(|s| s.qd.as_deref()).collect();
    let samples = (0..n)
        .map(|i| TrajectorySample {
            t: traj.samples[i].t,
            q: if reach(i) == 0 {
                traj.samples[i].q.clone()
            } else {
                window_mean(&q_rows, i, reach(i))
            },
            qd: qd_rows.as_ref().map(|rows| window_mean(rows, i, reach(i))),
            gripper: traj.samples[i].gripper,
        })
        .collect();
    Ok(Trajectory { dof: traj.dof, samples, meta: traj.meta.clone() })
}

fn window_mean(rows: &[&[f64]], i: usize, h: usize) -> Vec<f64> {
    let count = (2 * h + 1) as f64;
    let mut acc = vec![0.0; rows[i].len()];
    for row in &rows[i - h..=i + h] {
        for (a, v) in acc.iter_mut().zip(row.iter()) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= count);
    acc
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u64,
    dof: usize,
    #[serde(flatten)]
    meta: TrajectoryMeta,
}

/// Write `.traj.jsonl`. Floats use the shortest round-trip representation.
pub fn save<W: Write>(traj: &Trajectory, mut sink: W) -> Result<(), TrajectoryError> {
    let header = Header { version: SCHEMA_VERSION as u64, dof: traj.dof, meta: traj.meta.clone() };
    serde_json::to_writer(&mut sink, &header).map_err(|e| TrajectoryError::Io(e.to_string()))?;
    sink.write_all(b"\n")?;
    for s in &traj.samples {
        serde_json::to_writer(&mut sink, s).map_err(|e| TrajectoryError::Io(e.to_string()))?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

pub fn load<R: BufRead>(source: R) -> Result<Trajectory, TrajectoryError> {
    let mut lines = source.lines().enumerate();
    let header: Header = loop {
        let Some((i, line)) = lines.next() else {
            return Err(TrajectoryError::MalformedRecord { line: 1, reason: "missing header".into() });
        };
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| TrajectoryError::MalformedRecord { line: i + 1, reason: e.to_string() })?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(TrajectoryError::SchemaVersionMismatch { found: v }),
            None => {
                return Err(TrajectoryError::MalformedRecord {
                    line: i + 1,
                    reason: "header lacks integer `version`".into(),
                })
            }
        }
        break serde_json::from_value(value)
            .map_err(|e| TrajectoryError::MalformedRecord { line: i + 1, reason: e.to_string() })?;
    };

    let mut traj = Trajectory::new(header.dof, header.meta);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: TrajectorySample = serde_json::from_str(&line)
            .map_err(|e| TrajectoryError::MalformedRecord { line: i + 1, reason: e.to_string() })?;
        traj.append(sample)?;
    }
    Ok(traj)
}

pub fn save_file(traj: &Trajectory, path: impl AsRef<std::path::Path>) -> Result<(), TrajectoryError> {
    let file = std::fs::File::create(path)?;
    save(traj, std::io::BufWriter::new(file))
}

pub fn load_file(path: impl AsRef<std::path::Path>) -> Result<Trajectory, TrajectoryError> {
    let file = std::fs::File::open(path)?;
    load(std::io::BufReader::new(file))
}
