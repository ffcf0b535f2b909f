//! Analytic scene oracle: the source of all supervision and evaluation truth.
//!
//! Scenes are unions of analytic primitives (spheres, axis-aligned boxes, a
//! ground plane). Dynamic primitives translate rigidly at a constant velocity
//! per frame, so exact SDF, first-hit range, per-point flow, and instance
//! masks are available at any timestep in closed form plus sphere tracing.
//!
//! Conventions: the world frame is fixed; the ego pose at frame `t` maps ego
//! coordinates to world. The representation volume ([`GridSpec`]) is attached
//! to the ego frame. Rays are stored in world coordinates. Flow vectors are
//! displacements in meters per frame step.

use nalgebra::{Isometry3, Rotation3, Translation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::grid::GridSpec;

pub const SPHERE_TRACE_TOL: f64 = 1e-6;
const SPHERE_TRACE_MAX_STEPS: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("scene needs at least one static primitive")]
    NoStaticPrimitive,
    #[error("static primitive {0} has nonzero velocity")]
    StaticMoves(usize),
    #[error("primitive {0} has non-positive size")]
    BadSize(usize),
    #[error("empty frame range")]
    EmptyFrameRange,
    #[error("no sensors configured")]
    NoSensors,
    #[error("ray file: {0}")]
    Io(#[from] std::io::Error),
    #[error("ray file header: {0}")]
    Header(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimitiveShape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    /// Horizontal plane `z = height`; solid below.
    GroundPlane { height: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenePrimitive {
    pub shape: PrimitiveShape,
    /// Center position at frame 0 (world, m). Ignored by ground planes.
    pub center: [f64; 3],
    /// Rigid translation per frame step (world, m). Zero for static bodies.
    pub velocity: [f64; 3],
    /// Flat RGB albedo in [0, 1].
    pub albedo: [f64; 3],
    pub dynamic: bool,
}

impl ScenePrimitive {
    pub fn center_at(&self, t: f64) -> Vector3<f64> {
        Vector3::from(self.center) + Vector3::from(self.velocity) * t
    }

    /// Exact signed distance at frame time `t`.
    pub fn sdf(&self, x: &Vector3<f64>, t: f64) -> f64 {
        let local = x - self.center_at(t);
        match self.shape {
            PrimitiveShape::Sphere { radius } => local.norm() - radius,
            PrimitiveShape::Box { half_extents } => {
                let h = Vector3::from(half_extents);
                let q = local.abs() - h;
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                outside + inside
            }
            PrimitiveShape::GroundPlane { height } => x.z - height,
        }
    }
}

/// Rigid ego motion: linear translation plus optional constant yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoTrajectory {
    pub position0: [f64; 3],
    /// Translation per frame step (world, m).
    pub velocity: [f64; 3],
    #[serde(default)]
    pub yaw0: f64,
    /// Yaw change per frame step (rad).
    #[serde(default)]
    pub yaw_rate: f64,
}

impl EgoTrajectory {
    pub fn stationary() -> Self {
        EgoTrajectory { position0: [0.0; 3], velocity: [0.0; 3], yaw0: 0.0, yaw_rate: 0.0 }
    }

    /// Ego-to-world transform at (possibly fractional) frame `t`.
    pub fn pose(&self, t: f64) -> Isometry3<f64> {
        let translation = Translation3::from(Vector3::from(self.position0) + Vector3::from(self.velocity) * t);
        let rotation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.yaw0 + self.yaw_rate * t);
        Isometry3::from_parts(translation, rotation)
    }
}

/// Pinhole camera rigidly mounted on the ego body.
///
/// Camera frame: +z forward (optical axis), +x right, +y down. Pixel (u, v)
/// covers the unit square with its center at (u + 0.5, v + 0.5).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera position in ego coordinates.
    pub position_in_ego: [f64; 3],
    /// Yaw of the optical axis in the ego x-y plane; 0 looks along ego +x.
    #[serde(default)]
    pub yaw_in_ego: f64,
}

impl PinholeSpec {
    /// Symmetric camera with a given horizontal field of view (rad).
    pub fn with_fov(width: usize, height: usize, fov_x: f64, position_in_ego: [f64; 3]) -> Self {
        let fx = width as f64 / (2.0 * (fov_x / 2.0).tan());
        PinholeSpec {
            width,
            height,
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            position_in_ego,
            yaw_in_ego: 0.0,
        }
    }

    /// Camera-to-ego transform.
    pub fn pose_in_ego(&self) -> Isometry3<f64> {
        // Optical basis mapped into ego axes: z_cam -> +x, x_cam -> -y, y_cam -> -z.
        let base = Rotation3::from_matrix_unchecked(nalgebra::Matrix3::new(
            0.0, 0.0, 1.0,
            -1.0, 0.0, 0.0,
            0.0, -1.0, 0.0,
        ));
        let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw_in_ego);
        Isometry3::from_parts(
            Translation3::from(Vector3::from(self.position_in_ego)),
            UnitQuaternion::from_rotation_matrix(&(yaw * base)),
        )
    }

    /// Ray through the center of pixel (u, v), in camera coordinates.
    pub fn pixel_ray(&self, u: usize, v: usize) -> Vector3<f64> {
        Vector3::new(
            (u as f64 + 0.5 - self.cx) / self.fx,
            (v as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
        .normalize()
    }

    /// Continuous pixel coordinates of a camera-frame point; `None` behind
    /// the camera.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<(f64, f64)> {
        if p_cam.z <= 1e-9 {
            return None;
        }
        Some((self.fx * p_cam.x / p_cam.z + self.cx, self.fy * p_cam.y / p_cam.z + self.cy))
    }

    pub fn in_bounds(&self, uv: (f64, f64)) -> bool {
        uv.0 >= 0.0 && uv.0 < self.width as f64 && uv.1 >= 0.0 && uv.1 < self.height as f64
    }
}

/// Spinning range sensor: a fixed azimuth x elevation lattice per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    pub azimuth_count: usize,
    pub elevation_count: usize,
    /// Swept azimuth interval (rad), end exclusive on the lattice.
    pub azimuth_range: (f64, f64),
    /// Elevation interval (rad), both ends included.
    pub elevation_range: (f64, f64),
    pub origin_in_ego: [f64; 3],
}

impl LidarSpec {
    /// Unit directions of the scan lattice in ego coordinates.
    pub fn directions(&self) -> Vec<Vector3<f64>> {
        let mut dirs = Vec::with_capacity(self.azimuth_count * self.elevation_count);
        for ei in 0..self.elevation_count {
            let el = if self.elevation_count == 1 {
                0.5 * (self.elevation_range.0 + self.elevation_range.1)
            } else {
                self.elevation_range.0
                    + (self.elevation_range.1 - self.elevation_range.0) * ei as f64
                        / (self.elevation_count - 1) as f64
            };
            for ai in 0..self.azimuth_count {
                let az = self.azimuth_range.0
                    + (self.azimuth_range.1 - self.azimuth_range.0)
                        * (ai as f64 + 0.5)
                        / self.azimuth_count as f64;
                dirs.push(Vector3::new(
                    el.cos() * az.cos(),
                    el.cos() * az.sin(),
                    el.sin(),
                ));
            }
        }
        dirs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SensorKind {
    Camera { index: usize },
    Lidar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RayLabel {
    Static,
    Dynamic,
    Discard,
}

/// One supervisory ray in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    /// First-hit range (m); NaN when the ray leaves the volume unhit.
    pub gt_range: f64,
    pub gt_color: [f64; 3],
    pub label: RayLabel,
    /// Integer pixel for camera rays.
    pub pixel: Option<(u32, u32)>,
    /// Whether the oracle's first hit is a dynamic primitive.
    pub gt_hit_dynamic: bool,
}

impl Ray {
    pub fn origin_v(&self) -> Vector3<f64> {
        Vector3::from(self.origin)
    }
    pub fn dir_v(&self) -> Vector3<f64> {
        Vector3::from(self.dir)
    }
    pub fn hits(&self) -> bool {
        self.gt_range.is_finite()
    }
    pub fn endpoint(&self) -> Option<Vector3<f64>> {
        self.hits().then(|| self.origin_v() + self.dir_v() * self.gt_range)
    }
}

/// Rays from one sensor at one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RayBatch {
    pub frame: i64,
    pub kind: SensorKind,
    /// Sample count along each ray when this batch is rendered.
    pub samples_per_ray: usize,
    pub rays: Vec<Ray>,
}

#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub range: f64,
    pub albedo: [f64; 3],
    pub dynamic: bool,
    pub primitive: usize,
}

/// Analytic scene answering SDF, range, flow, and mask queries at any frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneOracle {
    pub primitives: Vec<ScenePrimitive>,
    /// Seconds per frame step.
    pub frame_dt: f64,
    /// Representation volume in ego coordinates.
    pub spec: GridSpec,
    pub ego: EgoTrajectory,
    /// Color returned by rays that hit nothing.
    pub background: [f64; 3],
}

impl SceneOracle {
    pub fn new(
        primitives: Vec<ScenePrimitive>,
        frame_dt: f64,
        spec: GridSpec,
        ego: EgoTrajectory,
    ) -> Result<Self, SceneError> {
        if !primitives.iter().any(|p| !p.dynamic) {
            return Err(SceneError::NoStaticPrimitive);
        }
        for (i, p) in primitives.iter().enumerate() {
            if !p.dynamic && Vector3::from(p.velocity).norm() > 0.0 {
                return Err(SceneError::StaticMoves(i));
            }
            let ok = match p.shape {
                PrimitiveShape::Sphere { radius } => radius > 0.0,
                PrimitiveShape::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
                PrimitiveShape::GroundPlane { .. } => true,
            };
            if !ok {
                return Err(SceneError::BadSize(i));
            }
        }
        Ok(SceneOracle { primitives, frame_dt, spec, ego, background: [0.0; 3] })
    }

    /// Exact scene SDF: min over primitive SDFs at their time-`t` poses.
    pub fn sdf(&self, x: &Vector3<f64>, t: f64) -> f64 {
        self.primitives
            .iter()
            .map(|p| p.sdf(x, t))
            .fold(f64::INFINITY, f64::min)
    }

    /// Index of the dynamic primitive containing `x` at frame `t`, if any.
    pub fn inside_dynamic(&self, x: &Vector3<f64>, t: f64) -> Option<usize> {
        self.primitives
            .iter()
            .enumerate()
            .filter(|(_, p)| p.dynamic)
            .find(|(_, p)| p.sdf(x, t) <= 0.0)
            .map(|(i, _)| i)
    }

    /// Ground-truth flow at a world point: the containing mover's rigid
    /// displacement over one frame step, zero in free space and inside
    /// static geometry.
    pub fn gt_flow(&self, x: &Vector3<f64>, t: f64, forward: bool) -> Vector3<f64> {
        match self.inside_dynamic(x, t) {
            Some(i) => {
                let v = Vector3::from(self.primitives[i].velocity);
                if forward {
                    v
                } else {
                    -v
                }
            }
            None => Vector3::zeros(),
        }
    }

    /// World velocity (m/s) at a point, for velocity-error metrics.
    pub fn gt_velocity(&self, x: &Vector3<f64>, t: f64) -> Vector3<f64> {
        self.gt_flow(x, t, true) / self.frame_dt
    }

    /// Distance at which a world ray exits the ego-attached volume at
    /// frame `t`, if it intersects it at all.
    pub fn volume_exit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t: f64) -> Option<(f64, f64)> {
        let pose = self.ego.pose(t as f64);
        let inv = pose.inverse();
        let o = inv * nalgebra::Point3::from(*origin);
        let d = inv.rotation * dir;
        ray_aabb(&o.coords, &d, &self.spec.origin, &self.spec.max_corner())
    }

    /// First intersection with the scene via sphere tracing, bounded by the
    /// volume exit distance. `None` when the ray leaves unhit.
    pub fn cast_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t: f64) -> Option<Hit> {
        let (_, exit) = self.volume_exit(origin, dir, t)?;
        let mut s = 0.0f64;
        for _ in 0..SPHERE_TRACE_MAX_STEPS {
            let x = origin + dir * s;
            let d = self.sdf(&x, t);
            if d < SPHERE_TRACE_TOL {
                let (idx, prim) = self
                    .primitives
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.sdf(&x, t).total_cmp(&b.1.sdf(&x, t)))
                    .unwrap();
                return Some(Hit { range: s, albedo: prim.albedo, dynamic: prim.dynamic, primitive: idx });
            }
            s += d;
            if s > exit {
                return None;
            }
        }
        None
    }

    /// Flat-shaded RGB image seen by a camera at a frame.
    pub fn render_image(&self, cam: &PinholeSpec, frame: i64) -> ImageRgb {
        let cam_to_world = self.ego.pose(frame as f64) * cam.pose_in_ego();
        let origin = (cam_to_world * nalgebra::Point3::origin()).coords;
        let mut pixels = vec![self.background; cam.width * cam.height];
        for v in 0..cam.height {
            for u in 0..cam.width {
                let dir = cam_to_world.rotation * cam.pixel_ray(u, v);
                if let Some(hit) = self.cast_ray(&origin, &dir, frame as f64) {
                    pixels[v * cam.width + u] = hit.albedo;
                }
            }
        }
        ImageRgb { width: cam.width, height: cam.height, pixels }
    }

    /// Per-instance boolean masks for each dynamic primitive visible from a
    /// camera, emulating a promptable segmenter's output. One mask per
    /// dynamic primitive, each carrying `confidence`.
    pub fn render_instance_masks(&self, cam: &PinholeSpec, frame: i64, confidence: f64) -> Vec<Mask> {
        let cam_to_world = self.ego.pose(frame as f64) * cam.pose_in_ego();
        let origin = (cam_to_world * nalgebra::Point3::origin()).coords;
        let dynamic_ids: Vec<usize> = self
            .primitives
            .iter()
            .enumerate()
            .filter(|(_, p)| p.dynamic)
            .map(|(i, _)| i)
            .collect();
        let mut masks: Vec<Mask> = dynamic_ids
            .iter()
            .map(|_| Mask {
                width: cam.width,
                height: cam.height,
                pixels: vec![false; cam.width * cam.height],
                confidence,
            })
            .collect();
        for v in 0..cam.height {
            for u in 0..cam.width {
                let dir = cam_to_world.rotation * cam.pixel_ray(u, v);
                if let Some(hit) = self.cast_ray(&origin, &dir, frame as f64) {
                    if let Some(slot) = dynamic_ids.iter().position(|&i| i == hit.primitive) {
                        masks[slot].pixels[v * cam.width + u] = true;
                    }
                }
            }
        }
        masks
    }
}

/// Boolean instance mask with a detection confidence score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<bool>,
    pub confidence: f64,
}

impl Mask {
    pub fn covers(&self, uv: (f64, f64)) -> bool {
        let (u, v) = (uv.0.floor(), uv.1.floor());
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return false;
        }
        self.pixels[v as usize * self.width + u as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl ImageRgb {
    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        self.pixels[v * self.width + u]
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// half-integers), clamped to the image border.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> [f64; 3] {
        let su = (u - 0.5).clamp(0.0, (self.width - 1) as f64);
        let sv = (v - 0.5).clamp(0.0, (self.height - 1) as f64);
        let u0 = (su.floor() as usize).min(self.width.saturating_sub(2));
        let v0 = (sv.floor() as usize).min(self.height.saturating_sub(2));
        let (tu, tv) = (su - u0 as f64, sv - v0 as f64);
        let u1 = (u0 + 1).min(self.width - 1);
        let v1 = (v0 + 1).min(self.height - 1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let p00 = self.pixel(u0, v0)[c];
            let p10 = self.pixel(u1, v0)[c];
            let p01 = self.pixel(u0, v1)[c];
            let p11 = self.pixel(u1, v1)[c];
            out[c] = p00 * (1.0 - tu) * (1.0 - tv)
                + p10 * tu * (1.0 - tv)
                + p01 * (1.0 - tu) * tv
                + p11 * tu * tv;
        }
        out
    }
}

/// Slab-method ray/AABB intersection, returning (entry, exit) with entry
/// clamped to 0 for origins inside the box.
pub fn ray_aabb(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut near, mut far) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if near > far {
            std::mem::swap(&mut near, &mut far);
        }
        t0 = t0.max(near);
        t1 = t1.min(far);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Options controlling supervisory batch generation.
#[derive(Debug, Clone, Copy)]
pub struct BatchOptions {
    pub samples_per_ray: usize,
    /// Probability of flipping a ray's static/dynamic label.
    pub label_noise_rate: f64,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions { samples_per_ray: 96, label_noise_rate: 0.0 }
    }
}

/// Deterministically generate camera and LiDAR ray batches over a frame
/// range. Labels come from the oracle's exact hit classification, with an
/// optional seeded noise rate exercising downstream label cleanup.
pub fn make_batches(
    oracle: &SceneOracle,
    cams: &[PinholeSpec],
    lidar: Option<&LidarSpec>,
    frames: std::ops::RangeInclusive<i64>,
    seed: u64,
    opts: BatchOptions,
) -> Result<Vec<RayBatch>, SceneError> {
    if frames.is_empty() {
        return Err(SceneError::EmptyFrameRange);
    }
    if cams.is_empty() && lidar.is_none() {
        return Err(SceneError::NoSensors);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    for frame in frames {
        let ego = oracle.ego.pose(frame as f64);
        for (ci, cam) in cams.iter().enumerate() {
            let cam_to_world = ego * cam.pose_in_ego();
            let origin = (cam_to_world * nalgebra::Point3::origin()).coords;
            let mut rays = Vec::with_capacity(cam.width * cam.height);
            for v in 0..cam.height {
                for u in 0..cam.width {
                    let dir = cam_to_world.rotation * cam.pixel_ray(u, v);
                    rays.push(classify_hit(oracle, &origin, &dir, frame, Some((u as u32, v as u32)), &mut rng, opts));
                }
            }
            batches.push(RayBatch {
                frame,
                kind: SensorKind::Camera { index: ci },
                samples_per_ray: opts.samples_per_ray,
                rays,
            });
        }
        if let Some(spec) = lidar {
            let origin = (ego * nalgebra::Point3::from(Vector3::from(spec.origin_in_ego))).coords;
            let mut rays = Vec::new();
            for dir_ego in spec.directions() {
                let dir = ego.rotation * dir_ego;
                rays.push(classify_hit(oracle, &origin, &dir, frame, None, &mut rng, opts));
            }
            batches.push(RayBatch {
                frame,
                kind: SensorKind::Lidar,
                samples_per_ray: opts.samples_per_ray,
                rays,
            });
        }
    }
    Ok(batches)
}

fn classify_hit(
    oracle: &SceneOracle,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    frame: i64,
    pixel: Option<(u32, u32)>,
    rng: &mut ChaCha8Rng,
    opts: BatchOptions,
) -> Ray {
    let hit = oracle.cast_ray(origin, dir, frame as f64);
    let (gt_range, gt_color, dynamic) = match hit {
        Some(h) => (h.range, h.albedo, h.dynamic),
        None => (f64::NAN, oracle.background, false),
    };
    let mut label = if dynamic { RayLabel::Dynamic } else { RayLabel::Static };
    if opts.label_noise_rate > 0.0 && rng.gen::<f64>() < opts.label_noise_rate {
        label = match label {
            RayLabel::Static => RayLabel::Dynamic,
            RayLabel::Dynamic => RayLabel::Static,
            RayLabel::Discard => RayLabel::Discard,
        };
    }
    Ray {
        origin: [origin.x, origin.y, origin.z],
        dir: [dir.x, dir.y, dir.z],
        gt_range,
        gt_color,
        label,
        pixel,
        gt_hit_dynamic: dynamic,
    }
}

#[derive(Serialize, Deserialize)]
struct RaysHeader {
    batches: Vec<RaysBatchHeader>,
}

#[derive(Serialize, Deserialize)]
struct RaysBatchHeader {
    frame: i64,
    kind: SensorKind,
    samples_per_ray: usize,
    count: usize,
}

/// `.rays` container: one JSON header line, then per batch a columnar f64
/// little-endian payload (origins, dirs, ranges, colors, pixels, labels,
/// hit-dynamic flags).
pub fn save_ray_batches(path: &Path, batches: &[RayBatch]) -> Result<(), SceneError> {
    let header = RaysHeader {
        batches: batches
            .iter()
            .map(|b| RaysBatchHeader {
                frame: b.frame,
                kind: b.kind,
                samples_per_ray: b.samples_per_ray,
                count: b.rays.len(),
            })
            .collect(),
    };
    let mut file = std::fs::File::create(path)?;
    serde_json::to_writer(&mut file, &header).map_err(|e| SceneError::Header(e.to_string()))?;
    file.write_all(b"\n")?;
    let mut buf: Vec<u8> = Vec::new();
    let put = |v: f64, buf: &mut Vec<u8>| buf.extend_from_slice(&v.to_le_bytes());
    for b in batches {
        for r in &b.rays {
            for c in 0..3 {
                put(r.origin[c], &mut buf);
            }
            for c in 0..3 {
                put(r.dir[c], &mut buf);
            }
            put(r.gt_range, &mut buf);
            for c in 0..3 {
                put(r.gt_color[c], &mut buf);
            }
            let (pu, pv) = r.pixel.map_or((f64::NAN, f64::NAN), |(u, v)| (u as f64, v as f64));
            put(pu, &mut buf);
            put(pv, &mut buf);
            put(
                match r.label {
                    RayLabel::Static => 0.0,
                    RayLabel::Dynamic => 1.0,
                    RayLabel::Discard => 2.0,
                },
                &mut buf,
            );
            put(if r.gt_hit_dynamic { 1.0 } else { 0.0 }, &mut buf);
        }
    }
    file.write_all(&buf)?;
    Ok(())
}

const RAY_RECORD_F64S: usize = 14;

pub fn load_ray_batches(path: &Path) -> Result<Vec<RayBatch>, SceneError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| SceneError::Header("missing header line".into()))?;
    let header: RaysHeader =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| SceneError::Header(e.to_string()))?;
    let mut off = newline + 1;
    let mut take = || -> Result<f64, SceneError> {
        if off + 8 > bytes.len() {
            return Err(SceneError::Header("truncated payload".into()));
        }
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
        Ok(v)
    };
    let mut batches = Vec::new();
    for bh in header.batches {
        let mut rays = Vec::with_capacity(bh.count);
        for _ in 0..bh.count {
            let mut rec = [0.0f64; RAY_RECORD_F64S];
            for slot in rec.iter_mut() {
                *slot = take()?;
            }
            let pixel = if rec[10].is_nan() {
                None
            } else {
                Some((rec[10] as u32, rec[11] as u32))
            };
            let label = match rec[12] as i64 {
                0 => RayLabel::Static,
                1 => RayLabel::Dynamic,
                _ => RayLabel::Discard,
            };
            rays.push(Ray {
                origin: [rec[0], rec[1], rec[2]],
                dir: [rec[3], rec[4], rec[5]],
                gt_range: rec[6],
                gt_color: [rec[7], rec[8], rec[9]],
                label,
                pixel,
                gt_hit_dynamic: rec[13] != 0.0,
            });
        }
        batches.push(RayBatch {
            frame: bh.frame,
            kind: bh.kind,
            samples_per_ray: bh.samples_per_ray,
            rays,
        });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn volume() -> GridSpec {
        GridSpec::new(
            Vector3::new(-6.4, -6.4, -3.2),
            Vector3::new(12.8, 12.8, 6.4),
            0.2,
        )
        .unwrap()
    }

    fn sphere(center: [f64; 3], radius: f64) -> ScenePrimitive {
        ScenePrimitive {
            shape: PrimitiveShape::Sphere { radius },
            center,
            velocity: [0.0; 3],
            albedo: [0.8, 0.2, 0.2],
            dynamic: false,
        }
    }

    fn oracle_with(primitives: Vec<ScenePrimitive>) -> SceneOracle {
        SceneOracle::new(primitives, 0.1, volume(), EgoTrajectory::stationary()).unwrap()
    }

    #[test]
    fn sphere_sdf_values() {
        let o = oracle_with(vec![sphere([0.0; 3], 1.0)]);
        assert_relative_eq!(o.sdf(&Vector3::new(2.0, 0.0, 0.0), 0.0), 1.0);
        assert_relative_eq!(o.sdf(&Vector3::new(1.0, 0.0, 0.0), 0.0), 0.0);
    }

    #[test]
    fn union_takes_min_distance() {
        let o = oracle_with(vec![sphere([3.0, 0.0, 0.0], 1.0), sphere([-3.0, 0.0, 0.0], 1.0)]);
        assert_relative_eq!(o.sdf(&Vector3::zeros(), 0.0), 2.0);
    }

    #[test]
    fn requires_a_static_primitive() {
        let mut m = sphere([0.0; 3], 1.0);
        m.dynamic = true;
        m.velocity = [1.0, 0.0, 0.0];
        assert!(SceneOracle::new(vec![m], 0.1, volume(), EgoTrajectory::stationary()).is_err());
    }

    #[test]
    fn cast_ray_analytic_range() {
        let o = oracle_with(vec![sphere([5.0, 0.0, 0.0], 1.0)]);
        let hit = o
            .cast_ray(&Vector3::zeros(), &Vector3::new(1.0, 0.0, 0.0), 0.0)
            .unwrap();
        assert!((hit.range - 4.0).abs() < 1e-5);
        assert!(o
            .cast_ray(&Vector3::zeros(), &Vector3::new(-1.0, 0.0, 0.0), 0.0)
            .is_none());
    }

    #[test]
    fn mover_shifts_range_by_velocity() {
        let mut m = sphere([5.0, 0.0, 0.0], 1.0);
        m.dynamic = true;
        m.velocity = [1.0, 0.0, 0.0];
        let o = oracle_with(vec![sphere([0.0, 0.0, -20.0], 1.0), m]);
        let dir = Vector3::new(1.0, 0.0, 0.0);
        let r0 = o.cast_ray(&Vector3::zeros(), &dir, 0.0).unwrap().range;
        let r1 = o.cast_ray(&Vector3::zeros(), &dir, 1.0).unwrap().range;
        assert!((r1 - r0 - 1.0).abs() < 1e-5);
    }

    #[test]
    fn gt_flow_inside_and_outside_mover() {
        let mut m = sphere([2.0, 0.0, 0.0], 1.0);
        m.dynamic = true;
        m.velocity = [2.0, 0.0, 0.0];
        let o = oracle_with(vec![sphere([0.0, 0.0, -20.0], 1.0), m]);
        let inside = Vector3::new(2.0, 0.0, 0.0);
        assert_eq!(o.gt_flow(&inside, 0.0, true), Vector3::new(2.0, 0.0, 0.0));
        assert_eq!(o.gt_flow(&inside, 0.0, false), Vector3::new(-2.0, 0.0, 0.0));
        assert_eq!(o.gt_flow(&Vector3::new(0.0, 3.0, 0.0), 0.0, true), Vector3::zeros());
    }

    #[test]
    fn forward_flow_composes_over_frames() {
        let mut m = sphere([0.0, 0.0, 0.0], 1.0);
        m.dynamic = true;
        m.velocity = [0.3, 0.1, 0.0];
        let o = oracle_with(vec![sphere([0.0, 0.0, -20.0], 1.0), m]);
        // A point riding the mover: advance it by the flow at each frame.
        let mut x = Vector3::new(0.1, 0.0, 0.0);
        let mut total = Vector3::zeros();
        for t in 0..2 {
            let f = o.gt_flow(&x, t as f64, true);
            total += f;
            x += f;
        }
        assert_relative_eq!(total, Vector3::new(0.6, 0.2, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn batches_deterministic_and_exactly_labeled() {
        let mut m = sphere([4.0, 0.0, 0.0], 1.0);
        m.dynamic = true;
        m.velocity = [0.4, 0.0, 0.0];
        let o = oracle_with(vec![
            ScenePrimitive {
                shape: PrimitiveShape::GroundPlane { height: -2.0 },
                center: [0.0; 3],
                velocity: [0.0; 3],
                albedo: [0.3, 0.3, 0.3],
                dynamic: false,
            },
            m,
        ]);
        let lidar = LidarSpec {
            azimuth_count: 32,
            elevation_count: 4,
            azimuth_range: (0.0, std::f64::consts::TAU),
            elevation_range: (-0.4, 0.1),
            origin_in_ego: [0.0, 0.0, 0.5],
        };
        let a = make_batches(&o, &[], Some(&lidar), 0..=1, 7, BatchOptions::default()).unwrap();
        let b = make_batches(&o, &[], Some(&lidar), 0..=1, 7, BatchOptions::default()).unwrap();
        // Bitwise comparison: gt_range is NaN on misses, so PartialEq would
        // reject identical batches.
        assert_eq!(a.len(), b.len());
        for (ba, bb) in a.iter().zip(&b) {
            assert_eq!(ba.rays.len(), bb.rays.len());
            for (ra, rb) in ba.rays.iter().zip(&bb.rays) {
                assert_eq!(ra.origin, rb.origin);
                assert_eq!(ra.dir, rb.dir);
                assert_eq!(ra.gt_range.to_bits(), rb.gt_range.to_bits());
                assert_eq!(ra.label, rb.label);
            }
        }
        for batch in &a {
            for ray in &batch.rays {
                assert_eq!(ray.label == RayLabel::Dynamic, ray.gt_hit_dynamic);
                assert!((ray.dir_v().norm() - 1.0).abs() < 1e-9);
            }
        }
        assert!(a.iter().flat_map(|b| &b.rays).any(|r| r.gt_hit_dynamic));
        assert!(make_batches(&o, &[], Some(&lidar), 1..=0, 7, BatchOptions::default()).is_err());
    }

    #[test]
    fn static_scene_labels_all_static() {
        let o = oracle_with(vec![sphere([3.0, 0.0, 0.0], 1.0)]);
        let lidar = LidarSpec {
            azimuth_count: 16,
            elevation_count: 2,
            azimuth_range: (0.0, std::f64::consts::TAU),
            elevation_range: (-0.3, 0.0),
            origin_in_ego: [0.0; 3],
        };
        let batches = make_batches(&o, &[], Some(&lidar), 0..=0, 1, BatchOptions::default()).unwrap();
        assert!(batches[0].rays.iter().all(|r| r.label == RayLabel::Static));
    }

    #[test]
    fn ray_batch_roundtrip() {
        let o = oracle_with(vec![sphere([3.0, 0.0, 0.0], 1.0)]);
        let cam = PinholeSpec::with_fov(8, 6, 1.2, [0.0, 0.0, 0.2]);
        let batches = make_batches(&o, &[cam], None, 0..=0, 3, BatchOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.rays");
        save_ray_batches(&path, &batches).unwrap();
        let back = load_ray_batches(&path).unwrap();
        assert_eq!(back.len(), batches.len());
        for (x, y) in back[0].rays.iter().zip(&batches[0].rays) {
            assert_eq!(x.pixel, y.pixel);
            assert_eq!(x.label, y.label);
            assert_eq!(x.origin, y.origin);
            assert!(x.gt_range.is_nan() == y.gt_range.is_nan());
            if x.gt_range.is_finite() {
                assert_eq!(x.gt_range, y.gt_range);
            }
        }
    }

    #[test]
    fn projection_roundtrips_pixel_centers() {
        let cam = PinholeSpec::with_fov(64, 48, 1.0, [0.0; 3]);
        let d = cam.pixel_ray(20, 11);
        let p = d * 7.3;
        let (u, v) = cam.project(&p).unwrap();
        assert_relative_eq!(u, 20.5, epsilon = 1e-9);
        assert_relative_eq!(v, 11.5, epsilon = 1e-9);
        assert!(cam.project(&Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    proptest! {
        /// The scene SDF is 1-Lipschitz.
        #[test]
        fn sdf_is_one_lipschitz(
            ax in -6.0f64..6.0, ay in -6.0f64..6.0, az in -3.0f64..3.0,
            bx in -6.0f64..6.0, by in -6.0f64..6.0, bz in -3.0f64..3.0,
        ) {
            let mut m = sphere([2.0, 1.0, 0.0], 0.8);
            m.dynamic = true;
            m.velocity = [0.5, 0.0, 0.0];
            let o = oracle_with(vec![
                sphere([-2.0, -1.0, 0.0], 1.2),
                ScenePrimitive {
                    shape: PrimitiveShape::Box { half_extents: [0.7, 0.5, 0.4] },
                    center: [0.0, 3.0, -0.5],
                    velocity: [0.0; 3],
                    albedo: [0.1, 0.6, 0.1],
                    dynamic: false,
                },
                m,
            ]);
            let a = Vector3::new(ax, ay, az);
            let b = Vector3::new(bx, by, bz);
            let lhs = (o.sdf(&a, 0.0) - o.sdf(&b, 0.0)).abs();
            prop_assert!(lhs <= (a - b).norm() + 1e-12);
        }

        /// Sphere-traced hits land on the zero level set.
        #[test]
        fn cast_ray_hits_surface(az in 0.0f64..std::f64::consts::TAU, el in -0.5f64..0.2) {
            let o = oracle_with(vec![
                sphere([2.0, 1.0, 0.0], 0.8),
                ScenePrimitive {
                    shape: PrimitiveShape::GroundPlane { height: -2.0 },
                    center: [0.0; 3],
                    velocity: [0.0; 3],
                    albedo: [0.3, 0.3, 0.3],
                    dynamic: false,
                },
            ]);
            let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            if let Some(hit) = o.cast_ray(&Vector3::new(0.0, 0.0, 0.0), &dir, 0.0) {
                let end = Vector3::new(0.0, 0.0, 0.0) + dir * hit.range;
                prop_assert!(o.sdf(&end, 0.0).abs() < 1e-5);
            }
        }
    }
}
