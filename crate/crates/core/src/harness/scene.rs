//! Scene configuration and synthetic bundle generation.
//!
//! Objects are planes or boxes moving rigidly about their own centers.
//! Frame `f` of `N` maps to time `f / (N − 1)`; frame 0 is the canonical
//! configuration, so every object pose starts at the identity.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use super::{Camera, HarnessError};
use crate::deform::Primitive;
use crate::node_init::{patch_center, FramePatches};
use crate::rigid::{Quaternion, SE3Pose, UnitQuaternion};

/// The mixed static/dynamic scene used by the end-to-end checks.
pub const REFERENCE_SCENE: &str = include_str!("../../scenes/reference.cfg");

const MIN_HIT: f64 = 1e-9;
const SCALE_RANGE: (f64, f64) = (0.004, 0.02);

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub format_version: u32,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default)]
    pub camera: CameraConfig,
    #[serde(default)]
    pub patches: PatchConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub tracklets: TrackletConfig,
    #[serde(rename = "object", default)]
    pub objects: Vec<ObjectConfig>,
}

fn default_frames() -> usize {
    24
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub eye: [f64; 3],
    pub target: [f64; 3],
    /// Total sweep of the camera around the vertical axis through `target`.
    pub orbit_degrees: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            fx: 300.0,
            fy: 300.0,
            eye: [0.0, 3.0, -4.5],
            target: [0.0, 0.4, 0.5],
            orbit_degrees: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub size: u32,
    pub token_dim: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { size: 16, token_dim: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Per-component token noise shared by every object.
    pub token: f64,
    /// Extra token noise per meter of surface motion per frame.
    pub token_motion_gain: f64,
    pub tracklet_pixels: f64,
    pub tracklet_depth: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { token: 0.01, token_motion_gain: 1.0, tracklet_pixels: 0.0, tracklet_depth: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackletConfig {
    /// Every `stride`-th primitive carries a tracklet.
    pub stride: usize,
}

impl Default for TrackletConfig {
    fn default() -> Self {
        Self { stride: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Plane,
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionKind {
    #[default]
    Static,
    Translation,
    Rotation,
    Screw,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectConfig {
    pub name: String,
    pub kind: ObjectKind,
    pub center: [f64; 3],
    /// `[x, z]` extent for a plane (lying at the center's height), `[x, y, z]` for a box.
    pub size: Vec<f64>,
    #[serde(default)]
    pub motion: MotionKind,
    /// Meters per frame, used by `translation`.
    #[serde(default)]
    pub velocity: [f64; 3],
    #[serde(default = "default_axis")]
    pub axis: [f64; 3],
    /// Used by `rotation` and `screw`.
    #[serde(default)]
    pub degrees_per_frame: f64,
    /// Meters per frame along `axis`, used by `screw`.
    #[serde(default)]
    pub advance: f64,
    pub primitives: usize,
    #[serde(default = "default_color")]
    pub color: [f64; 3],
}

fn default_axis() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

fn default_color() -> [f64; 3] {
    [0.5, 0.5, 0.5]
}

impl ObjectConfig {
    fn half_size(&self) -> Vector3<f64> {
        match self.kind {
            ObjectKind::Plane => Vector3::new(self.size[0], 0.0, self.size[1]) / 2.0,
            ObjectKind::Box => Vector3::new(self.size[0], self.size[1], self.size[2]) / 2.0,
        }
    }

    fn axis_unit(&self) -> Vector3<f64> {
        Vector3::from(self.axis).normalize()
    }

    fn radians_per_frame(&self) -> f64 {
        match self.motion {
            MotionKind::Rotation | MotionKind::Screw => self.degrees_per_frame.to_radians(),
            _ => 0.0,
        }
    }

    /// Upper bound on surface displacement per frame, meters.
    pub fn speed(&self) -> f64 {
        let spin = self.radians_per_frame().abs() * self.half_size().norm();
        match self.motion {
            MotionKind::Static => 0.0,
            MotionKind::Translation => Vector3::from(self.velocity).norm(),
            MotionKind::Rotation => spin,
            MotionKind::Screw => self.advance.hypot(spin),
        }
    }

    /// Canonical-to-world pose at frame `f`.
    pub fn pose_at(&self, f: usize) -> SE3Pose {
        let f = f as f64;
        let c = Vector3::from(self.center);
        let rotation = match self.motion {
            MotionKind::Rotation | MotionKind::Screw => {
                UnitQuaternion::from_axis_angle(&self.axis_unit(), self.radians_per_frame() * f)
            }
            _ => UnitQuaternion::IDENTITY,
        };
        let shift = match self.motion {
            MotionKind::Translation => Vector3::from(self.velocity) * f,
            MotionKind::Screw => self.axis_unit() * (self.advance * f),
            _ => Vector3::zeros(),
        };
        SE3Pose::new(rotation, c - rotation.rotate(&c) + shift)
    }

    /// Ray parameter of the first hit in canonical coordinates.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let c = Vector3::from(self.center);
        let h = self.half_size();
        match self.kind {
            ObjectKind::Plane => {
                if dir.y.abs() < 1e-12 {
                    return None;
                }
                let s = (c.y - origin.y) / dir.y;
                let q = origin + dir * s;
                (s > MIN_HIT && (q.x - c.x).abs() <= h.x && (q.z - c.z).abs() <= h.z).then_some(s)
            }
            ObjectKind::Box => {
                let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    let (lo, hi) = (c[a] - h[a], c[a] + h[a]);
                    if dir[a].abs() < 1e-15 {
                        if origin[a] < lo || origin[a] > hi {
                            return None;
                        }
                        continue;
                    }
                    let (t1, t2) = ((lo - origin[a]) / dir[a], (hi - origin[a]) / dir[a]);
                    near = near.max(t1.min(t2));
                    far = far.min(t1.max(t2));
                }
                if near > far || far <= MIN_HIT {
                    return None;
                }
                Some(if near > MIN_HIT { near } else { far })
            }
        }
    }

    fn sample_surface(&self, rng: &mut impl Rng) -> Vector3<f64> {
        let c = Vector3::from(self.center);
        let h = self.half_size();
        match self.kind {
            ObjectKind::Plane => c + Vector3::new(rng.random_range(-h.x..=h.x), 0.0, rng.random_range(-h.z..=h.z)),
            ObjectKind::Box => {
                let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut axis = 2;
                for (a, area) in areas.iter().enumerate() {
                    if pick < *area {
                        axis = a;
                        break;
                    }
                    pick -= area;
                }
                let mut local = Vector3::new(
                    rng.random_range(-h.x..=h.x),
                    rng.random_range(-h.y..=h.y),
                    rng.random_range(-h.z..=h.z),
                );
                local[axis] = if rng.random_bool(0.5) { h[axis] } else { -h[axis] };
                c + local
            }
        }
    }
}

/// Ground-truth motion of one object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub name: String,
    pub dynamic: bool,
    /// Canonical-to-world pose per frame.
    pub poses: Vec<SE3Pose>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSample {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub visible: bool,
}

/// 2D track of one primitive across all frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub primitive: usize,
    pub samples: Vec<TrackSample>,
}

/// Everything the pipeline stages read, plus evaluation ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub seed: u64,
    pub frame_times: Vec<f64>,
    pub cameras: Vec<Camera>,
    pub patch_size: u32,
    pub token_dim: usize,
    pub objects: Vec<ObjectTrack>,
    pub primitives: Vec<Primitive>,
    pub primitive_object: Vec<usize>,
    /// Patch observations for every frame.
    pub patches: Vec<FramePatches>,
    pub tracklets: Vec<Tracklet>,
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
}

impl SceneBundle {
    pub fn frame_count(&self) -> usize {
        self.frame_times.len()
    }

    pub fn bbox_diagonal(&self) -> f64 {
        (self.bbox_max - self.bbox_min).norm()
    }

    pub fn is_dynamic(&self, primitive: usize) -> bool {
        self.objects[self.primitive_object[primitive]].dynamic
    }

    pub fn gt_pose(&self, primitive: usize, frame: usize) -> &SE3Pose {
        &self.objects[self.primitive_object[primitive]].poses[frame]
    }

    pub fn gt_position(&self, primitive: usize, frame: usize) -> Vector3<f64> {
        self.gt_pose(primitive, frame).transform_point(&self.primitives[primitive].mean)
    }

    /// Checks array lengths and index ranges.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let n = self.frame_count();
        let bad = |m: String| Err(HarnessError::Format { line: 0, message: m });
        if n < 2 {
            return bad("a bundle needs at least two frames".into());
        }
        if self.cameras.len() != n || self.patches.len() != n {
            return bad(format!("expected {n} cameras and patch frames"));
        }
        if self.objects.iter().any(|o| o.poses.len() != n) {
            return bad("object pose count differs from frame count".into());
        }
        if self.primitive_object.len() != self.primitives.len()
            || self.primitive_object.iter().any(|&o| o >= self.objects.len())
        {
            return bad("primitive object labels do not cover all primitives".into());
        }
        for t in &self.tracklets {
            if t.primitive >= self.primitives.len() || t.samples.len() != n {
                return bad(format!("tracklet of primitive {} is malformed", t.primitive));
            }
            if t.samples.iter().any(|s| s.visible && !(s.depth > 0.0)) {
                return bad(format!("tracklet of primitive {} has a visible sample without depth", t.primitive));
            }
        }
        Ok(())
    }
}

/// Parses a TOML scene description. Errors carry the offending line where
/// it can be located.
pub fn parse_scene_config(src: &str) -> Result<SceneConfig, HarnessError> {
    let config: SceneConfig = toml::from_str(src).map_err(|e| HarnessError::InvalidConfig {
        line: e.span().map(|s| line_of_offset(src, s.start)),
        message: e.message().to_string(),
    })?;
    validate_config(&config).map_err(|(loc, message)| HarnessError::InvalidConfig {
        line: locate_key(src, loc.object, loc.key),
        message,
    })?;
    Ok(config)
}

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

struct KeyLoc {
    object: Option<usize>,
    key: &'static str,
}

/// Line of `key`, searched inside the `object`-th `[[object]]` table when given.
fn locate_key(src: &str, object: Option<usize>, key: &str) -> Option<usize> {
    let lines: Vec<&str> = src.lines().collect();
    let mut start = 0;
    if let Some(i) = object {
        start = lines
            .iter()
            .enumerate()
            .filter(|(_, l)| l.trim() == "[[object]]")
            .nth(i)
            .map(|(n, _)| n)?;
    }
    for (n, line) in lines.iter().enumerate().skip(start) {
        if n > start && line.trim_start().starts_with('[') && object.is_some() {
            break;
        }
        let t = line.trim_start();
        if let Some(rest) = t.strip_prefix(key) {
            if rest.trim_start().starts_with('=') {
                return Some(n + 1);
            }
        }
    }
    (object.is_some()).then_some(start + 1)
}

fn validate_config(c: &SceneConfig) -> Result<(), (KeyLoc, String)> {
    let top = |key, m: String| Err((KeyLoc { object: None, key }, m));
    if c.format_version != super::FORMAT_MAJOR {
        return top("format_version", format!("unsupported format_version {}", c.format_version));
    }
    if c.frames < 2 {
        return top("frames", "need at least 2 frames".into());
    }
    let cam = &c.camera;
    if !(cam.fx > 0.0 && cam.fy > 0.0) {
        return top("fx", "focal lengths must be positive".into());
    }
    if cam.width == 0 || cam.height == 0 {
        return top("width", "image size must be positive".into());
    }
    if c.patches.size == 0 || c.patches.size > cam.width.min(cam.height) {
        return top("size", "patch size must be between 1 and the image size".into());
    }
    if c.patches.token_dim == 0 {
        return top("token_dim", "token_dim must be positive".into());
    }
    let n = &c.noise;
    for (key, v) in [
        ("token", n.token),
        ("token_motion_gain", n.token_motion_gain),
        ("tracklet_pixels", n.tracklet_pixels),
        ("tracklet_depth", n.tracklet_depth),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return top(key, format!("{key} must be nonnegative"));
        }
    }
    if c.tracklets.stride == 0 {
        return top("stride", "stride must be positive".into());
    }
    if c.objects.is_empty() {
        return top("format_version", "at least one [[object]] is required".into());
    }
    for (i, o) in c.objects.iter().enumerate() {
        let bad = |key, m: String| Err((KeyLoc { object: Some(i), key }, m));
        let want = match o.kind {
            ObjectKind::Plane => 2,
            ObjectKind::Box => 3,
        };
        if o.size.len() != want || o.size.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("size", format!("object '{}' needs {want} positive sizes", o.name));
        }
        if o.primitives == 0 {
            return bad("primitives", format!("object '{}' needs at least one primitive", o.name));
        }
        if matches!(o.motion, MotionKind::Rotation | MotionKind::Screw) && Vector3::from(o.axis).norm() < 1e-12 {
            return bad("axis", format!("object '{}' has a zero rotation axis", o.name));
        }
        if o.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("color", "color components must lie in [0, 1]".into());
        }
    }
    let eye = Vector3::from(cam.eye);
    let target = Vector3::from(cam.target);
    if camera_at(cam, &eye, &target).is_err() {
        return top("eye", "camera eye and target must differ and not look straight up or down".into());
    }
    Ok(())
}

fn camera_at(cam: &CameraConfig, eye: &Vector3<f64>, target: &Vector3<f64>) -> Result<Camera, HarnessError> {
    let intrinsics = (cam.fx, cam.fy, cam.width as f64 / 2.0, cam.height as f64 / 2.0);
    Camera::look_at(eye, target, &Vector3::y(), intrinsics, (cam.width, cam.height))
}

fn frame_cameras(config: &SceneConfig) -> Result<Vec<Camera>, HarnessError> {
    let cam = &config.camera;
    let target = Vector3::from(cam.target);
    let eye = Vector3::from(cam.eye);
    (0..config.frames)
        .map(|f| {
            let phase = f as f64 / (config.frames - 1) as f64 - 0.5;
            let turn = UnitQuaternion::from_axis_angle(&Vector3::y(), (cam.orbit_degrees * phase).to_radians());
            camera_at(cam, &(target + turn.rotate(&(eye - target))), &target)
        })
        .collect()
}

fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn noisy_token(rng: &mut impl Rng, base: &[f64], sigma: f64) -> Vec<f64> {
    let v: Vec<f64> = base.iter().map(|b| { let n: f64 = StandardNormal.sample(rng); b + sigma * n }).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    loop {
        let q = Quaternion::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if let Some(u) = UnitQuaternion::new_normalize(q) {
            return u.to_rotation_matrix();
        }
    }
}

fn sample_primitive(rng: &mut impl Rng, object: &ObjectConfig) -> Result<Primitive, HarnessError> {
    let mean = object.sample_surface(rng);
    let r = random_rotation(rng);
    let s = Vector3::from_fn(|_, _| rng.random_range(SCALE_RANGE.0..SCALE_RANGE.1).powi(2));
    let mut cov = r * Matrix3::from_diagonal(&s) * r.transpose();
    cov = (cov + cov.transpose()) * 0.5;
    let color = object.color.map(|c| (c + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0));
    Ok(Primitive::new(mean, cov, rng.random_range(0.2..0.95), color)?)
}

/// Generates a bundle deterministically from `(config, seed)`.
///
/// Independent random streams feed primitives, tokens and tracklet noise,
/// so changing one noise level leaves the other draws untouched.
pub fn gen_scene(config: &SceneConfig, seed: u64) -> Result<SceneBundle, HarnessError> {
    validate_config(config).map_err(|(_, message)| HarnessError::InvalidConfig { line: None, message })?;
    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k);
        rng
    };
    let (mut prim_rng, mut token_rng, mut track_rng) = (stream(1), stream(2), stream(3));
    let frames = config.frames;
    let frame_times: Vec<f64> = (0..frames).map(|f| f as f64 / (frames - 1) as f64).collect();
    let cameras = frame_cameras(config)?;

    let objects: Vec<ObjectTrack> = config
        .objects
        .iter()
        .map(|o| ObjectTrack {
            name: o.name.clone(),
            dynamic: o.speed() > 0.0,
            poses: (0..frames).map(|f| o.pose_at(f)).collect(),
        })
        .collect();

    let mut primitives = Vec::new();
    let mut primitive_object = Vec::new();
    for (i, o) in config.objects.iter().enumerate() {
        for _ in 0..o.primitives {
            primitives.push(sample_primitive(&mut prim_rng, o)?);
            primitive_object.push(i);
        }
    }

    let dim = config.patches.token_dim;
    let bases: Vec<Vec<f64>> = config.objects.iter().map(|_| unit_gaussian(&mut token_rng, dim)).collect();
    let background = unit_gaussian(&mut token_rng, dim);
    let sigmas: Vec<f64> = config
        .objects
        .iter()
        .map(|o| config.noise.token + config.noise.token_motion_gain * o.speed())
        .collect();

    let ps = config.patches.size;
    let (gw, gh) = ((config.camera.width / ps) as usize, (config.camera.height / ps) as usize);
    let mut patches = Vec::with_capacity(frames);
    for (f, cam) in cameras.iter().enumerate() {
        let origin = cam.center();
        let rt = cam.rotation.transpose();
        let mut fp = FramePatches { frame: f, grid_w: gw, grid_h: gh, tokens: Vec::new(), depth: Vec::new(), prior: Vec::new() };
        for py in 0..gh {
            for px in 0..gw {
                let u = patch_center(px, py, ps as f64);
                let dir = rt * Vector3::new((u.x - cam.cx) / cam.fx, (u.y - cam.cy) / cam.fy, 1.0);
                let mut hit: Option<(f64, usize)> = None;
                for (i, o) in config.objects.iter().enumerate() {
                    let inv = objects[i].poses[f].inverse();
                    let local_origin = inv.transform_point(&origin);
                    let local_dir = inv.rotation.rotate(&dir);
                    if let Some(s) = o.intersect(&local_origin, &local_dir) {
                        if hit.is_none_or(|(best, _)| s < best) {
                            hit = Some((s, i));
                        }
                    }
                }
                match hit {
                    Some((s, i)) => {
                        fp.tokens.push(noisy_token(&mut token_rng, &bases[i], sigmas[i]));
                        fp.depth.push(s);
                        fp.prior.push(if objects[i].dynamic { 1.0 } else { 0.0 });
                    }
                    None => {
                        fp.tokens.push(noisy_token(&mut token_rng, &background, config.noise.token));
                        fp.depth.push(0.0);
                        fp.prior.push(0.0);
                    }
                }
            }
        }
        patches.push(fp);
    }

    let mut tracklets = Vec::new();
    for p in (0..primitives.len()).step_by(config.tracklets.stride) {
        let obj = &objects[primitive_object[p]];
        let samples = (0..frames)
            .map(|f| {
                let x = obj.poses[f].transform_point(&primitives[p].mean);
                let (mut pixel, mut depth, mut visible) = match cameras[f].project(&x) {
                    Ok((u, d)) => (u, d, cameras[f].contains(&u)),
                    Err(_) => (Vector2::zeros(), 0.0, false),
                };
                if config.noise.tracklet_pixels > 0.0 {
                    let n: [f64; 2] = [StandardNormal.sample(&mut track_rng), StandardNormal.sample(&mut track_rng)];
                    pixel += Vector2::from(n) * config.noise.tracklet_pixels;
                }
                if config.noise.tracklet_depth > 0.0 {
                    let n: f64 = StandardNormal.sample(&mut track_rng);
                    depth += n * config.noise.tracklet_depth;
                    if depth <= 0.0 {
                        visible = false;
                    }
                }
                TrackSample { pixel, depth, visible }
            })
            .collect();
        tracklets.push(Tracklet { primitive: p, samples });
    }

    let mut bbox_min = Vector3::repeat(f64::INFINITY);
    let mut bbox_max = Vector3::repeat(f64::NEG_INFINITY);
    for (p, prim) in primitives.iter().enumerate() {
        for pose in &objects[primitive_object[p]].poses {
            let x = pose.transform_point(&prim.mean);
            bbox_min = bbox_min.inf(&x);
            bbox_max = bbox_max.sup(&x);
        }
    }

    let bundle = SceneBundle {
        seed,
        frame_times,
        cameras,
        patch_size: ps,
        token_dim: dim,
        objects,
        primitives,
        primitive_object,
        patches,
        tracklets,
        bbox_min,
        bbox_max,
    };
    bundle.validate()?;
    Ok(bundle)
}
