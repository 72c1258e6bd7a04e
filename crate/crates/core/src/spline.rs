//! Cubic Hermite node trajectories.
//!
//! A trajectory stores keyframe times in normalized video time `[0, 1]`,
//! keyframe positions, per-keyframe tangents and per-keyframe rotations.
//! Between keyframes `t_k` and `t_{k+1}` the position is
//!
//! ```text
//! ξ(t) = h00(τ)·P_k + h10(τ)·Δ·Ṗ_k + h01(τ)·P_{k+1} + h11(τ)·Δ·Ṗ_{k+1}
//! τ = (t − t_k) / Δ,   Δ = t_{k+1} − t_k
//! ```
//!
//! Tangents are Catmull–Rom finite differences of the positions unless a
//! trajectory is built with [`SplineTrajectory::with_tangents`]. With
//! Catmull–Rom tangents the position is a fixed linear combination of the
//! keyframe positions, `ξ(t) = Σ_m c_m(t)·P_m` (see [`keyframe_weights`]),
//! which makes least-squares fitting a closed-form linear problem and gives
//! the optimizer its chain rule.
//!
//! Rotations are interpolated by slerp between the bracketing keyframes.

use nalgebra::{DMatrix, Vector3};
use thiserror::Error;

use crate::rigid::UnitQuaternion;

/// Minimum spacing between consecutive keyframe times.
pub const MIN_KEYFRAME_GAP: f64 = 1e-6;
/// Slack allowed on `τ ∈ [0, 1]` and on the trajectory span.
pub const RANGE_SLACK: f64 = 1e-12;
/// Ridge term added to the normal equations of [`fit_spline`].
pub const RIDGE: f64 = 1e-8;
/// Extra refinement sweeps that remove the ridge bias on well-posed fits.
const REFINEMENT_SWEEPS: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplineError {
    #[error("{value} lies outside [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("invalid keyframes: {0}")]
    InvalidKeyframes(String),
    #[error("keyframe {keyframe} is not constrained by any sample")]
    RankDeficient { keyframe: usize },
    #[error("no samples to fit")]
    NoSamples,
}

/// Hermite basis `(h00, h10, h01, h11)` at `tau`.
pub fn hermite_basis(tau: f64) -> Result<[f64; 4], SplineError> {
    if !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(&tau) {
        return Err(SplineError::OutOfRange { value: tau, lo: 0.0, hi: 1.0 });
    }
    let t = tau.clamp(0.0, 1.0);
    let t2 = t * t;
    let t3 = t2 * t;
    Ok([
        2.0 * t3 - 3.0 * t2 + 1.0,
        t3 - 2.0 * t2 + t,
        -2.0 * t3 + 3.0 * t2,
        t3 - t2,
    ])
}

/// `count` keyframes evenly spread over `[0, 1]`.
pub fn uniform_keyframes(count: usize) -> Result<Vec<f64>, SplineError> {
    if count < 2 {
        return Err(SplineError::InvalidKeyframes(format!("need at least 2 keyframes, got {count}")));
    }
    let last = (count - 1) as f64;
    Ok((0..count).map(|k| k as f64 / last).collect())
}

pub fn validate_times(times: &[f64]) -> Result<(), SplineError> {
    if times.len() < 2 {
        return Err(SplineError::InvalidKeyframes(format!(
            "need at least 2 keyframes, got {}",
            times.len()
        )));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(SplineError::InvalidKeyframes("non-finite keyframe time".into()));
    }
    for (k, w) in times.windows(2).enumerate() {
        if w[1] - w[0] < MIN_KEYFRAME_GAP {
            return Err(SplineError::InvalidKeyframes(format!(
                "keyframes {k} and {} are closer than {MIN_KEYFRAME_GAP}",
                k + 1
            )));
        }
    }
    Ok(())
}

/// Segment index `k`, local parameter `τ` and segment length for time `t`.
fn locate(times: &[f64], t: f64) -> Result<(usize, f64, f64), SplineError> {
    let (lo, hi) = (times[0], times[times.len() - 1]);
    if !(t >= lo - RANGE_SLACK && t <= hi + RANGE_SLACK) {
        return Err(SplineError::OutOfRange { value: t, lo, hi });
    }
    let t = t.clamp(lo, hi);
    let k = times.partition_point(|&x| x <= t).saturating_sub(1).min(times.len() - 2);
    let h = times[k + 1] - times[k];
    Ok((k, (t - times[k]) / h, h))
}

/// Linear map from positions to Catmull–Rom tangents, as `(index, coeff)`
/// pairs for tangent `k`.
fn catmull_rom_stencil(times: &[f64], k: usize) -> [(usize, f64); 2] {
    let n = times.len();
    let (a, b) = if k == 0 {
        (0, 1)
    } else if k == n - 1 {
        (n - 2, n - 1)
    } else {
        (k - 1, k + 1)
    };
    let inv = 1.0 / (times[b] - times[a]);
    [(a, -inv), (b, inv)]
}

/// Interior tangents are central differences, endpoints one-sided.
pub fn catmull_rom_tangents(
    times: &[f64],
    positions: &[Vector3<f64>],
) -> Result<Vec<Vector3<f64>>, SplineError> {
    validate_times(times)?;
    if positions.len() != times.len() {
        return Err(SplineError::InvalidKeyframes(format!(
            "{} positions for {} keyframes",
            positions.len(),
            times.len()
        )));
    }
    Ok((0..times.len())
        .map(|k| {
            let [(a, ca), (b, cb)] = catmull_rom_stencil(times, k);
            positions[a] * ca + positions[b] * cb
        })
        .collect())
}

/// Coefficients `c_m(t)` with `ξ(t) = Σ_m c_m(t)·P_m` for a Catmull–Rom
/// trajectory over `times`. They sum to one.
pub fn keyframe_weights(times: &[f64], t: f64) -> Result<Vec<f64>, SplineError> {
    let mut c = vec![0.0; times.len()];
    let (k, tau, h) = locate(times, t)?;
    let [h00, h10, h01, h11] = hermite_basis(tau)?;
    c[k] += h00;
    c[k + 1] += h01;
    for (m, coeff) in catmull_rom_stencil(times, k) {
        c[m] += h10 * h * coeff;
    }
    for (m, coeff) in catmull_rom_stencil(times, k + 1) {
        c[m] += h11 * h * coeff;
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplineTrajectory {
    times: Vec<f64>,
    positions: Vec<Vector3<f64>>,
    tangents: Vec<Vector3<f64>>,
    rotations: Vec<UnitQuaternion>,
    catmull_rom: bool,
}

impl SplineTrajectory {
    /// Trajectory with Catmull–Rom tangents.
    pub fn from_positions(
        times: Vec<f64>,
        positions: Vec<Vector3<f64>>,
        rotations: Vec<UnitQuaternion>,
    ) -> Result<Self, SplineError> {
        let tangents = catmull_rom_tangents(&times, &positions)?;
        Self::check_rotations(&times, &rotations)?;
        Ok(Self { times, positions, tangents, rotations, catmull_rom: true })
    }

    /// Trajectory with caller-supplied tangents (meters per unit time).
    pub fn with_tangents(
        times: Vec<f64>,
        positions: Vec<Vector3<f64>>,
        tangents: Vec<Vector3<f64>>,
        rotations: Vec<UnitQuaternion>,
    ) -> Result<Self, SplineError> {
        validate_times(&times)?;
        if positions.len() != times.len() || tangents.len() != times.len() {
            return Err(SplineError::InvalidKeyframes("keyframe lists differ in length".into()));
        }
        Self::check_rotations(&times, &rotations)?;
        Ok(Self { times, positions, tangents, rotations, catmull_rom: false })
    }

    /// Motionless trajectory at `position` with identity rotations.
    pub fn constant(times: Vec<f64>, position: Vector3<f64>) -> Result<Self, SplineError> {
        let n = times.len();
        Self::from_positions(times, vec![position; n], vec![UnitQuaternion::IDENTITY; n])
    }

    fn check_rotations(times: &[f64], rotations: &[UnitQuaternion]) -> Result<(), SplineError> {
        if rotations.len() != times.len() {
            return Err(SplineError::InvalidKeyframes(format!(
                "{} rotations for {} keyframes",
                rotations.len(),
                times.len()
            )));
        }
        Ok(())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn tangents(&self) -> &[Vector3<f64>] {
        &self.tangents
    }

    pub fn rotations(&self) -> &[UnitQuaternion] {
        &self.rotations
    }

    pub fn keyframe_count(&self) -> usize {
        self.times.len()
    }

    /// Whether tangents follow the Catmull–Rom rule (required by
    /// [`keyframe_weights`]-based gradients).
    pub fn is_catmull_rom(&self) -> bool {
        self.catmull_rom
    }

    pub fn span(&self) -> (f64, f64) {
        (self.times[0], self.times[self.times.len() - 1])
    }

    /// Replaces keyframe positions and recomputes Catmull–Rom tangents.
    pub fn set_positions(&mut self, positions: Vec<Vector3<f64>>) -> Result<(), SplineError> {
        self.tangents = catmull_rom_tangents(&self.times, &positions)?;
        self.positions = positions;
        self.catmull_rom = true;
        Ok(())
    }

    pub fn set_rotation(&mut self, keyframe: usize, rotation: UnitQuaternion) {
        self.rotations[keyframe] = rotation;
    }

    pub fn eval_position(&self, t: f64) -> Result<Vector3<f64>, SplineError> {
        let (k, tau, h) = locate(&self.times, t)?;
        let [h00, h10, h01, h11] = hermite_basis(tau)?;
        Ok(self.positions[k] * h00
            + self.tangents[k] * (h10 * h)
            + self.positions[k + 1] * h01
            + self.tangents[k + 1] * (h11 * h))
    }

    pub fn eval_rotation(&self, t: f64) -> Result<UnitQuaternion, SplineError> {
        let (k, tau, _) = locate(&self.times, t)?;
        Ok(self.rotations[k].slerp(&self.rotations[k + 1], tau))
    }
}

#[derive(Debug, Clone)]
pub struct SplineFit {
    pub trajectory: SplineTrajectory,
    /// `Σ ‖x − ξ(t)‖²` at the solution.
    pub residual: f64,
}

/// Least-squares fit of keyframe positions to timed 3D samples.
///
/// Tangents follow the Catmull–Rom rule, so the problem is linear in the
/// positions and is solved through the normal equations with a
/// [`RIDGE`] term followed by iterative refinement. Rotations are set to
/// identity.
pub fn fit_spline(
    samples: &[(f64, Vector3<f64>)],
    keyframe_times: &[f64],
) -> Result<SplineFit, SplineError> {
    validate_times(keyframe_times)?;
    if samples.is_empty() {
        return Err(SplineError::NoSamples);
    }
    let k = keyframe_times.len();
    let mut normal = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DMatrix::<f64>::zeros(k, 3);
    let mut support = vec![0.0f64; k];
    for (t, x) in samples {
        let c = keyframe_weights(keyframe_times, *t)?;
        for i in 0..k {
            if c[i] == 0.0 {
                continue;
            }
            support[i] += c[i].abs();
            for j in 0..k {
                normal[(i, j)] += c[i] * c[j];
            }
            for d in 0..3 {
                rhs[(i, d)] += c[i] * x[d];
            }
        }
    }
    if let Some(keyframe) = support.iter().position(|&s| s == 0.0) {
        return Err(SplineError::RankDeficient { keyframe });
    }

    let mut regularized = normal.clone();
    for i in 0..k {
        regularized[(i, i)] += RIDGE;
    }
    let chol = regularized
        .cholesky()
        .ok_or(SplineError::RankDeficient { keyframe: 0 })?;
    let mut solution = chol.solve(&rhs);
    for _ in 0..REFINEMENT_SWEEPS {
        let correction = chol.solve(&(&rhs - &normal * &solution));
        solution += correction;
    }

    let positions: Vec<Vector3<f64>> = (0..k)
        .map(|i| Vector3::new(solution[(i, 0)], solution[(i, 1)], solution[(i, 2)]))
        .collect();
    let trajectory = SplineTrajectory::from_positions(
        keyframe_times.to_vec(),
        positions,
        vec![UnitQuaternion::IDENTITY; k],
    )?;
    let mut residual = 0.0;
    for (t, x) in samples {
        residual += (x - trajectory.eval_position(*t)?).norm_squared();
    }
    Ok(SplineFit { trajectory, residual })
}
