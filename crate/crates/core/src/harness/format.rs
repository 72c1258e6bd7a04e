//! Line-oriented JSON files exchanged between pipeline stages.
//!
//! Every file starts with a header record carrying `format_version`; a
//! reader rejects a major version it does not know. Each line is one JSON
//! object tagged by its `record` field. Reals are written with 17
//! significant digits so that reading a file back reproduces every value
//! bit for bit.

use std::io::{self, BufRead, Write};

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::scene::{ObjectTrack, SceneBundle, TrackSample, Tracklet};
use super::{Camera, HarnessError, Metrics, FORMAT_MAJOR, FORMAT_VERSION};
use crate::deform::{Node, Primitive};
use crate::node_init::FramePatches;
use crate::optimize::LossTerms;
use crate::rigid::{Quaternion, SE3Pose, UnitQuaternion};
use crate::spline::SplineTrajectory;

/// Writes reals as `{:.16e}`, which always round-trips.
struct FixedDigits;

impl serde_json::ser::Formatter for FixedDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }
}

/// One JSON line (without the newline) in the fixed-digit style.
pub fn to_json_line<T: Serialize>(value: &T) -> Result<String, HarnessError> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedDigits);
    value.serialize(&mut ser).map_err(|e| HarnessError::Io(e.to_string()))?;
    String::from_utf8(buf).map_err(|e| HarnessError::Io(e.to_string()))
}

fn write_lines<W: Write, T: Serialize>(w: &mut W, records: impl IntoIterator<Item = T>) -> Result<(), HarnessError> {
    for r in records {
        writeln!(w, "{}", to_json_line(&r)?)?;
    }
    Ok(())
}

fn check_version(found: &str) -> Result<(), HarnessError> {
    let major = found.split('.').next().and_then(|m| m.parse::<u32>().ok());
    if major != Some(FORMAT_MAJOR) {
        return Err(HarnessError::UnsupportedVersion { found: found.to_string() });
    }
    Ok(())
}

/// Parses `(line number, record)` pairs, skipping blank lines.
fn read_records<R: BufRead, T: DeserializeOwned>(r: R) -> Result<Vec<(usize, T)>, HarnessError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // look at the version before the full shape so that a future header
        // layout still reports the version mismatch
        if out.is_empty() {
            if let Ok(v) = serde_json::from_str::<VersionProbe>(&line) {
                check_version(&v.format_version)?;
            }
        }
        let rec = serde_json::from_str(&line).map_err(|e| HarnessError::Format { line: i + 1, message: e.to_string() })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: String,
}

fn format_err<T>(line: usize, message: impl Into<String>) -> Result<T, HarnessError> {
    Err(HarnessError::Format { line, message: message.into() })
}

fn mat_rows(m: &Matrix3<f64>) -> [f64; 9] {
    [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
}

fn mat_from_rows(a: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_row_slice(a)
}

fn unit_from(line: usize, q: [f64; 4]) -> Result<UnitQuaternion, HarnessError> {
    let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
    if (raw.norm() - 1.0).abs() > 1e-9 {
        return format_err(line, format!("quaternion norm {} is not 1", raw.norm()));
    }
    UnitQuaternion::new_normalize(raw).ok_or(HarnessError::Format { line, message: "zero quaternion".into() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoseRecord {
    rotation: [f64; 4],
    translation: [f64; 3],
}

impl PoseRecord {
    fn from_pose(p: &SE3Pose) -> Self {
        Self { rotation: p.rotation.quaternion().to_array(), translation: p.translation.into() }
    }

    fn to_pose(&self, line: usize) -> Result<SE3Pose, HarnessError> {
        Ok(SE3Pose::new(unit_from(line, self.rotation)?, Vector3::from(self.translation)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleHeader {
    format_version: String,
    kind: String,
    seed: u64,
    frame_count: usize,
    patch_size: u32,
    token_dim: usize,
    bbox_min: [f64; 3],
    bbox_max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CameraRecord {
    frame: usize,
    time: f64,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    /// Row-major world-to-camera rotation.
    rotation: [f64; 9],
    translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ObjectRecord {
    index: usize,
    name: String,
    dynamic: bool,
    poses: Vec<PoseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PrimitiveRecord {
    index: usize,
    object: usize,
    mean: [f64; 3],
    covariance: [f64; 9],
    opacity: f64,
    color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PatchesRecord {
    frame: usize,
    grid_w: usize,
    grid_h: usize,
    depth: Vec<f64>,
    prior: Vec<f64>,
    tokens: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrackletRecord {
    index: usize,
    primitive: usize,
    pixels: Vec<[f64; 2]>,
    depths: Vec<f64>,
    visible: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum BundleRecord {
    Header(BundleHeader),
    Camera(CameraRecord),
    Object(ObjectRecord),
    Primitive(PrimitiveRecord),
    Patches(PatchesRecord),
    Tracklet(TrackletRecord),
}

pub fn write_bundle<W: Write>(w: &mut W, b: &SceneBundle) -> Result<(), HarnessError> {
    let mut recs = vec![BundleRecord::Header(BundleHeader {
        format_version: FORMAT_VERSION.into(),
        kind: "bundle".into(),
        seed: b.seed,
        frame_count: b.frame_count(),
        patch_size: b.patch_size,
        token_dim: b.token_dim,
        bbox_min: b.bbox_min.into(),
        bbox_max: b.bbox_max.into(),
    })];
    for (f, c) in b.cameras.iter().enumerate() {
        recs.push(BundleRecord::Camera(CameraRecord {
            frame: f,
            time: b.frame_times[f],
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: mat_rows(&c.rotation),
            translation: c.translation.into(),
        }));
    }
    for (i, o) in b.objects.iter().enumerate() {
        recs.push(BundleRecord::Object(ObjectRecord {
            index: i,
            name: o.name.clone(),
            dynamic: o.dynamic,
            poses: o.poses.iter().map(PoseRecord::from_pose).collect(),
        }));
    }
    for (i, p) in b.primitives.iter().enumerate() {
        recs.push(BundleRecord::Primitive(PrimitiveRecord {
            index: i,
            object: b.primitive_object[i],
            mean: p.mean.into(),
            covariance: mat_rows(&p.covariance),
            opacity: p.opacity,
            color: p.color,
        }));
    }
    write_lines(w, recs)?;
    write_lines(
        w,
        b.patches.iter().map(|p| {
            BundleRecord::Patches(PatchesRecord {
                frame: p.frame,
                grid_w: p.grid_w,
                grid_h: p.grid_h,
                depth: p.depth.clone(),
                prior: p.prior.clone(),
                tokens: p.tokens.clone(),
            })
        }),
    )?;
    write_lines(
        w,
        b.tracklets.iter().enumerate().map(|(i, t)| {
            BundleRecord::Tracklet(TrackletRecord {
                index: i,
                primitive: t.primitive,
                pixels: t.samples.iter().map(|s| [s.pixel.x, s.pixel.y]).collect(),
                depths: t.samples.iter().map(|s| s.depth).collect(),
                visible: t.samples.iter().map(|s| s.visible).collect(),
            })
        }),
    )
}

pub fn read_bundle<R: BufRead>(r: R) -> Result<SceneBundle, HarnessError> {
    let records: Vec<(usize, BundleRecord)> = read_records(r)?;
    let mut iter = records.into_iter();
    let header = match iter.next() {
        Some((_, BundleRecord::Header(h))) if h.kind == "bundle" => h,
        Some((line, _)) => return format_err(line, "first record must be a bundle header"),
        None => return format_err(1, "empty bundle"),
    };
    let n = header.frame_count;
    let mut b = SceneBundle {
        seed: header.seed,
        frame_times: Vec::with_capacity(n),
        cameras: Vec::with_capacity(n),
        patch_size: header.patch_size,
        token_dim: header.token_dim,
        objects: Vec::new(),
        primitives: Vec::new(),
        primitive_object: Vec::new(),
        patches: Vec::with_capacity(n),
        tracklets: Vec::new(),
        bbox_min: Vector3::from(header.bbox_min),
        bbox_max: Vector3::from(header.bbox_max),
    };
    for (line, rec) in iter {
        match rec {
            BundleRecord::Header(_) => return format_err(line, "duplicate header"),
            BundleRecord::Camera(c) => {
                if c.frame != b.cameras.len() {
                    return format_err(line, format!("camera for frame {} out of order", c.frame));
                }
                let cam = Camera::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height, mat_from_rows(&c.rotation), Vector3::from(c.translation))
                    .map_err(|e| HarnessError::Format { line, message: e.to_string() })?;
                b.cameras.push(cam);
                b.frame_times.push(c.time);
            }
            BundleRecord::Object(o) => {
                if o.index != b.objects.len() {
                    return format_err(line, "object records out of order");
                }
                let poses = o.poses.iter().map(|p| p.to_pose(line)).collect::<Result<_, _>>()?;
                b.objects.push(ObjectTrack { name: o.name, dynamic: o.dynamic, poses });
            }
            BundleRecord::Primitive(p) => {
                if p.index != b.primitives.len() {
                    return format_err(line, "primitive records out of order");
                }
                let prim = Primitive::new(Vector3::from(p.mean), mat_from_rows(&p.covariance), p.opacity, p.color)
                    .map_err(|e| HarnessError::Format { line, message: e.to_string() })?;
                b.primitives.push(prim);
                b.primitive_object.push(p.object);
            }
            BundleRecord::Patches(p) => {
                b.patches.push(FramePatches {
                    frame: p.frame,
                    grid_w: p.grid_w,
                    grid_h: p.grid_h,
                    tokens: p.tokens,
                    depth: p.depth,
                    prior: p.prior,
                });
            }
            BundleRecord::Tracklet(t) => {
                if t.pixels.len() != t.depths.len() || t.pixels.len() != t.visible.len() {
                    return format_err(line, "tracklet arrays differ in length");
                }
                let samples = t
                    .pixels
                    .iter()
                    .zip(&t.depths)
                    .zip(&t.visible)
                    .map(|((p, d), v)| TrackSample { pixel: Vector2::new(p[0], p[1]), depth: *d, visible: *v })
                    .collect();
                b.tracklets.push(Tracklet { primitive: t.primitive, samples });
            }
        }
    }
    if b.cameras.len() != n {
        return format_err(0, format!("header announces {n} frames, found {} cameras", b.cameras.len()));
    }
    b.validate()?;
    Ok(b)
}

/// Provenance carried alongside each node between stages.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeInfo {
    /// Tracklet the trajectory was fitted to.
    pub tracklet: Option<usize>,
    pub source_frame: usize,
    pub prior: f64,
    pub merged_count: u32,
}

/// Nodes as stored in a node file; all share `keyframe_times`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet {
    pub keyframe_times: Vec<f64>,
    pub nodes: Vec<Node>,
    pub info: Vec<NodeInfo>,
}

impl NodeSet {
    pub fn source_frames(&self) -> Vec<usize> {
        self.info.iter().map(|m| m.source_frame).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NodesHeader {
    format_version: String,
    kind: String,
    stage: String,
    keyframe_times: Vec<f64>,
    node_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NodeRecord {
    index: usize,
    center: [f64; 3],
    radius: f64,
    positions: Vec<[f64; 3]>,
    /// `[w, x, y, z]` with `w ≥ 0`.
    rotations: Vec<[f64; 4]>,
    tracklet: Option<usize>,
    source_frame: usize,
    prior: f64,
    merged_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum NodesRecord {
    Header(NodesHeader),
    Node(NodeRecord),
}

/// Trajectories are stored by keyframe positions and rotations; tangents
/// are always the Catmull–Rom ones.
pub fn write_nodes<W: Write>(w: &mut W, set: &NodeSet, stage: &str) -> Result<(), HarnessError> {
    let header = NodesRecord::Header(NodesHeader {
        format_version: FORMAT_VERSION.into(),
        kind: "nodes".into(),
        stage: stage.into(),
        keyframe_times: set.keyframe_times.clone(),
        node_count: set.nodes.len(),
    });
    let nodes = set.nodes.iter().zip(&set.info).enumerate().map(|(i, (n, info))| {
        NodesRecord::Node(NodeRecord {
            index: i,
            center: n.center.into(),
            radius: n.radius,
            positions: n.trajectory.positions().iter().map(|p| (*p).into()).collect(),
            rotations: n.trajectory.rotations().iter().map(|q| q.canonical().quaternion().to_array()).collect(),
            tracklet: info.tracklet,
            source_frame: info.source_frame,
            prior: info.prior,
            merged_count: info.merged_count,
        })
    });
    write_lines(w, std::iter::once(header).chain(nodes))
}

pub fn read_nodes<R: BufRead>(r: R) -> Result<NodeSet, HarnessError> {
    let records: Vec<(usize, NodesRecord)> = read_records(r)?;
    let mut iter = records.into_iter();
    let header = match iter.next() {
        Some((_, NodesRecord::Header(h))) if h.kind == "nodes" => h,
        Some((line, _)) => return format_err(line, "first record must be a nodes header"),
        None => return format_err(1, "empty node file"),
    };
    let mut set = NodeSet { keyframe_times: header.keyframe_times, nodes: Vec::new(), info: Vec::new() };
    for (line, rec) in iter {
        let NodesRecord::Node(n) = rec else {
            return format_err(line, "duplicate header");
        };
        if n.index != set.nodes.len() {
            return format_err(line, "node records out of order");
        }
        let rotations = n.rotations.iter().map(|q| unit_from(line, *q)).collect::<Result<Vec<_>, _>>()?;
        let positions = n.positions.iter().map(|p| Vector3::from(*p)).collect();
        let traj = SplineTrajectory::from_positions(set.keyframe_times.clone(), positions, rotations)
            .map_err(|e| HarnessError::Format { line, message: e.to_string() })?;
        let node = Node::new(Vector3::from(n.center), n.radius, traj).map_err(|e| HarnessError::Format { line, message: e.to_string() })?;
        set.nodes.push(node);
        set.info.push(NodeInfo { tracklet: n.tracklet, source_frame: n.source_frame, prior: n.prior, merged_count: n.merged_count });
    }
    if set.nodes.len() != header.node_count {
        return format_err(0, format!("header announces {} nodes, found {}", header.node_count, set.nodes.len()));
    }
    Ok(set)
}

pub fn write_metrics<W: Write>(w: &mut W, m: &Metrics) -> Result<(), HarnessError> {
    writeln!(w, "{}", to_json_line(m)?)?;
    Ok(())
}

pub fn read_metrics<R: BufRead>(r: R) -> Result<Metrics, HarnessError> {
    let records: Vec<(usize, Metrics)> = read_records(r)?;
    match records.into_iter().next() {
        Some((_, m)) => Ok(m),
        None => format_err(1, "empty metrics file"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LossLogRecord {
    Header { format_version: String, kind: String },
    Loss { iteration: usize, track: f64, depth: f64, arap: f64, total: f64 },
}

/// One record per entry of `history`; entry 0 is the starting loss.
pub fn write_loss_log<W: Write>(w: &mut W, history: &[LossTerms]) -> Result<(), HarnessError> {
    let header = LossLogRecord::Header { format_version: FORMAT_VERSION.into(), kind: "loss_log".into() };
    let rows = history.iter().enumerate().map(|(i, t)| LossLogRecord::Loss {
        iteration: i,
        track: t.track,
        depth: t.depth,
        arap: t.arap,
        total: t.total,
    });
    write_lines(w, std::iter::once(header).chain(rows))
}

pub fn read_loss_log<R: BufRead>(r: R) -> Result<Vec<LossTerms>, HarnessError> {
    let mut out = Vec::new();
    for (line, rec) in read_records::<_, LossLogRecord>(r)?.into_iter().skip(1) {
        match rec {
            LossLogRecord::Loss { track, depth, arap, total, .. } => out.push(LossTerms { track, depth, arap, total }),
            LossLogRecord::Header { .. } => return format_err(line, "duplicate header"),
        }
    }
    Ok(out)
}
