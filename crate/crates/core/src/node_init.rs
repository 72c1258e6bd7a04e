//! Motion-adaptive node initialization.
//!
//! Patch centers are back-projected into candidate nodes that carry an
//! appearance token and a foreground prior. The candidate set is then
//! compressed by bipartite soft matching inside voxels: static-looking
//! clusters (similar tokens, low prior) merge aggressively, dynamic-looking
//! ones keep more nodes. The voxel grows by a fixed step each round until
//! the node count reaches the target.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::deform::{node_radii, DeformError, Node};
use crate::harness::{Camera, HarnessError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NodeInitError {
    #[error("no patch has a valid depth")]
    EmptyCandidates,
    #[error("invalid candidate: {0}")]
    InvalidCandidate(String),
    #[error("invalid compression parameters: {0}")]
    InvalidParams(String),
    #[error("{frames} frames but {cameras} cameras")]
    CameraCount { frames: usize, cameras: usize },
    #[error("target count not reached: {count} nodes remain after {iterations} iterations")]
    TargetNotReached { count: usize, iterations: usize, outcome: Box<Compression> },
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Deform(#[from] DeformError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateNode {
    pub position: Vector3<f64>,
    token: Vec<f64>,
    pub foreground_prior: f64,
    pub source_frame: usize,
    pub merged_count: u32,
}

impl CandidateNode {
    /// Normalizes `token`; rejects a zero token or a prior outside `[0, 1]`.
    pub fn new(position: Vector3<f64>, token: Vec<f64>, foreground_prior: f64, source_frame: usize) -> Result<Self, NodeInitError> {
        if !(0.0..=1.0).contains(&foreground_prior) {
            return Err(NodeInitError::InvalidCandidate(format!("prior {foreground_prior} outside [0, 1]")));
        }
        let token = normalized(&token).ok_or_else(|| NodeInitError::InvalidCandidate("zero token".into()))?;
        Ok(Self { position, token, foreground_prior, source_frame, merged_count: 1 })
    }

    pub fn token(&self) -> &[f64] {
        &self.token
    }
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-300 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionParams {
    pub v_init: f64,
    pub delta_v: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub eta: f64,
    pub alpha_dyn: f64,
    pub beta_dyn: f64,
    pub target_count: usize,
    pub max_iterations: usize,
}

impl CompressionParams {
    /// Defaults scaled to a scene with bounding-box diagonal `diagonal`:
    /// initial voxel and step at 1% of the diagonal.
    pub fn with_defaults(diagonal: f64, target_count: usize) -> Self {
        Self {
            v_init: 0.01 * diagonal,
            delta_v: 0.01 * diagonal,
            r_min: 0.1,
            r_max: 0.9,
            eta: 0.5,
            alpha_dyn: 2.0,
            beta_dyn: 2.0,
            target_count,
            max_iterations: 32,
        }
    }

    pub fn validate(&self) -> Result<(), NodeInitError> {
        let bad = |m: &str| Err(NodeInitError::InvalidParams(m.into()));
        if !(self.v_init > 0.0 && self.v_init.is_finite()) {
            return bad("v_init must be positive");
        }
        if !(self.delta_v >= 0.0 && self.delta_v.is_finite()) {
            return bad("delta_v must be nonnegative");
        }
        if !(0.0 <= self.r_min && self.r_min <= self.r_max && self.r_max <= 1.0) {
            return bad("need 0 <= r_min <= r_max <= 1");
        }
        if !(self.eta >= 0.0 && self.alpha_dyn >= 0.0 && self.beta_dyn >= 0.0) {
            return bad("eta, alpha_dyn and beta_dyn must be nonnegative");
        }
        if self.target_count == 0 || self.max_iterations == 0 {
            return bad("target_count and max_iterations must be positive");
        }
        Ok(())
    }
}

/// Patch observations of one frame, row-major over a `grid_w × grid_h` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePatches {
    pub frame: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub tokens: Vec<Vec<f64>>,
    /// Depth at each patch center; non-positive or non-finite marks a hole.
    pub depth: Vec<f64>,
    pub prior: Vec<f64>,
}

/// Pixel center of patch `(px, py)`.
pub fn patch_center(px: usize, py: usize, patch_size: f64) -> Vector2<f64> {
    Vector2::new((px as f64 + 0.5) * patch_size, (py as f64 + 0.5) * patch_size)
}

/// One candidate per patch with valid depth, back-projected through the
/// frame's camera. `cameras[i]` observes `frames[i]`.
pub fn patch_to_nodes(frames: &[FramePatches], patch_size: f64, cameras: &[Camera]) -> Result<Vec<CandidateNode>, NodeInitError> {
    if frames.len() != cameras.len() {
        return Err(NodeInitError::CameraCount { frames: frames.len(), cameras: cameras.len() });
    }
    let mut out = Vec::new();
    for (f, cam) in frames.iter().zip(cameras) {
        let n = f.grid_w * f.grid_h;
        if f.tokens.len() != n || f.depth.len() != n || f.prior.len() != n {
            return Err(NodeInitError::InvalidCandidate(format!("frame {} patch arrays do not match its grid", f.frame)));
        }
        for py in 0..f.grid_h {
            for px in 0..f.grid_w {
                let i = py * f.grid_w + px;
                let d = f.depth[i];
                if !(d > 0.0 && d.is_finite()) {
                    continue;
                }
                let x = cam.backproject(&patch_center(px, py, patch_size), d)?;
                out.push(CandidateNode::new(x, f.tokens[i].clone(), f.prior[i], f.frame)?);
            }
        }
    }
    if out.is_empty() {
        return Err(NodeInitError::EmptyCandidates);
    }
    Ok(out)
}

/// Token cosine minus `eta` times the mean foreground prior of the pair.
pub fn token_similarity(a: &CandidateNode, b: &CandidateNode, eta: f64) -> f64 {
    let cos: f64 = a.token.iter().zip(&b.token).map(|(x, y)| x * y).sum();
    cos - eta * 0.5 * (a.foreground_prior + b.foreground_prior)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `σ(α·mean prior − β·mean similarity)`. An empty match set counts as
/// mean similarity 1.
pub fn dyn_score(cluster: &[CandidateNode], matched_pairs: &[(usize, usize, f64)], alpha_dyn: f64, beta_dyn: f64) -> f64 {
    let prior = if cluster.is_empty() {
        0.0
    } else {
        cluster.iter().map(|c| c.foreground_prior).sum::<f64>() / cluster.len() as f64
    };
    let sim = if matched_pairs.is_empty() {
        1.0
    } else {
        matched_pairs.iter().map(|p| p.2).sum::<f64>() / matched_pairs.len() as f64
    };
    sigmoid(alpha_dyn * prior - beta_dyn * sim)
}

/// `r_min + (1 − p_dyn)·(r_max − r_min)`.
pub fn adaptive_ratio(p_dyn: f64, r_min: f64, r_max: f64) -> f64 {
    r_min + (1.0 - p_dyn) * (r_max - r_min)
}

fn voxel_key(p: &Vector3<f64>, origin: &Vector3<f64>, size: f64) -> [i64; 3] {
    let k = (p - origin) / size;
    [k.x.floor() as i64, k.y.floor() as i64, k.z.floor() as i64]
}

fn lexicographic(a: &Vector3<f64>, b: &Vector3<f64>) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z))
}

/// Bipartite matching and merging inside one voxel; `cluster` is already
/// in deterministic order.
fn compress_cluster(cluster: Vec<CandidateNode>, params: &CompressionParams) -> Vec<CandidateNode> {
    if cluster.len() < 2 {
        return cluster;
    }
    let a_idx: Vec<usize> = (0..cluster.len()).step_by(2).collect();
    let b_idx: Vec<usize> = (1..cluster.len()).step_by(2).collect();
    let mut pairs: Vec<(usize, usize, f64)> = a_idx
        .iter()
        .map(|&a| {
            let mut best = (b_idx[0], f64::NEG_INFINITY);
            for &b in &b_idx {
                let s = token_similarity(&cluster[a], &cluster[b], params.eta);
                if s > best.1 {
                    best = (b, s);
                }
            }
            (a, best.0, best.1)
        })
        .collect();
    let p_dyn = dyn_score(&cluster, &pairs, params.alpha_dyn, params.beta_dyn);
    let ratio = adaptive_ratio(p_dyn, params.r_min, params.r_max);
    let n_merge = ((ratio * a_idx.len() as f64).round() as usize).min(a_idx.len());
    pairs.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)));
    pairs.truncate(n_merge);

    let mut absorbed = vec![false; cluster.len()];
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(a, b, _) in &pairs {
        absorbed[a] = true;
        groups.entry(b).or_default().push(a);
    }
    let mut merged: BTreeMap<usize, CandidateNode> = BTreeMap::new();
    for (b, members) in groups {
        let keep = &cluster[b];
        let mut count = keep.merged_count as f64;
        let mut pos = keep.position * count;
        let mut token: Vec<f64> = keep.token.iter().map(|t| t * count).collect();
        let mut prior = keep.foreground_prior;
        let mut total = keep.merged_count;
        for a in members {
            let other = &cluster[a];
            let w = other.merged_count as f64;
            pos += other.position * w;
            token.iter_mut().zip(&other.token).for_each(|(t, o)| *t += o * w);
            prior = prior.max(other.foreground_prior);
            total += other.merged_count;
            count += w;
        }
        merged.insert(
            b,
            CandidateNode {
                position: pos / count,
                token: normalized(&token).unwrap_or_else(|| keep.token.clone()),
                foreground_prior: prior,
                source_frame: keep.source_frame,
                merged_count: total,
            },
        );
    }
    cluster
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !absorbed[*i])
        .map(|(i, c)| merged.remove(&i).unwrap_or(c))
        .collect()
}

/// One round of voxelized bipartite soft matching.
///
/// The grid is anchored at the minimum corner of the candidates. Output
/// order follows voxel key order, then position order within a voxel.
pub fn compress_step(candidates: &[CandidateNode], voxel_size: f64, params: &CompressionParams) -> Result<Vec<CandidateNode>, NodeInitError> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(NodeInitError::InvalidParams(format!("voxel size {voxel_size} must be positive")));
    }
    let Some(first) = candidates.first() else {
        return Ok(Vec::new());
    };
    let origin = candidates.iter().fold(first.position, |m, c| m.inf(&c.position));
    let mut voxels: BTreeMap<[i64; 3], Vec<CandidateNode>> = BTreeMap::new();
    for c in candidates {
        voxels.entry(voxel_key(&c.position, &origin, voxel_size)).or_default().push(c.clone());
    }
    let clusters: Vec<Vec<CandidateNode>> = voxels
        .into_values()
        .map(|mut v| {
            v.sort_by(|a, b| lexicographic(&a.position, &b.position));
            v
        })
        .collect();
    let out: Vec<Vec<CandidateNode>> = clusters.into_par_iter().map(|c| compress_cluster(c, params)).collect();
    Ok(out.into_iter().flatten().collect())
}

/// Result of iterated compression.
#[derive(Debug, Clone, PartialEq)]
pub struct Compression {
    pub survivors: Vec<CandidateNode>,
    pub nodes: Vec<Node>,
    pub iterations: usize,
}

/// Runs [`compress_step`] with voxel sizes `v_init + k·delta_v` until the
/// count is at most `target_count`, then turns survivors into static nodes
/// on `keyframe_times`.
///
/// On exhausting `max_iterations` the error still carries the outcome.
pub fn compress(candidates: &[CandidateNode], params: &CompressionParams, keyframe_times: &[f64]) -> Result<Compression, NodeInitError> {
    params.validate()?;
    let mut current = candidates.to_vec();
    let mut iterations = 0;
    while current.len() > params.target_count && iterations < params.max_iterations {
        let voxel = params.v_init + iterations as f64 * params.delta_v;
        current = compress_step(&current, voxel, params)?;
        iterations += 1;
    }
    let nodes = survivors_to_nodes(&current, keyframe_times, params.v_init)?;
    let outcome = Compression { survivors: current, nodes, iterations };
    if outcome.survivors.len() > params.target_count {
        return Err(NodeInitError::TargetNotReached {
            count: outcome.survivors.len(),
            iterations,
            outcome: Box::new(outcome),
        });
    }
    Ok(outcome)
}

/// Static nodes at the candidate positions with radii from the
/// third-nearest-neighbor rule.
pub fn survivors_to_nodes(survivors: &[CandidateNode], keyframe_times: &[f64], fallback_radius: f64) -> Result<Vec<Node>, NodeInitError> {
    let centers: Vec<_> = survivors.iter().map(|c| c.position).collect();
    let radii = node_radii(&centers, fallback_radius);
    centers
        .iter()
        .zip(radii)
        .map(|(c, r)| Ok(Node::fixed(*c, r, keyframe_times.to_vec())?))
        .collect()
}
