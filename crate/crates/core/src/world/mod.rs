//! Synthetic 3D world: obstacle primitives, exact distance/containment
//! queries, a z-depth raycasting renderer, obstacle inflation and procedural
//! scene generation.

mod scenario;

pub use scenario::{corridor_scene, dead_end_scene, empty_scene, ScenarioSpec};

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{in_fov, random_unit_quat, CameraModel, Pose, Quat};

/// Radius of the sphere used both for obstacle inflation during labeling and
/// for the ground-truth collision audit in simulation.
pub const ROBOT_RADIUS: f64 = 0.25;

/// Depth values are clamped to this floor so that "at the sensor" stays
/// distinguishable from the no-hit value 1.0.
pub const DEPTH_EPS: f32 = 1e-6;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("scene io: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene encode/decode: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("no free camera pose found after {0} rejection samples")]
    NoFreePose(usize),
}

/// Solid obstacle. Walls are represented as boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Axis-aligned box.
    Box { center: Vector3<f64>, half_extents: Vector3<f64> },
    /// Finite vertical cylinder.
    Pillar { center_xy: Vector2<f64>, radius: f64, z_min: f64, z_max: f64 },
}

impl Primitive {
    /// Signed Euclidean distance to the primitive surface (negative inside).
    pub fn signed_distance(&self, p: Vector3<f64>) -> f64 {
        match self {
            Primitive::Box { center, half_extents } => {
                let q = (p - center).abs() - half_extents;
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0));
                outside.norm() + q.x.max(q.y).max(q.z).min(0.0)
            }
            Primitive::Pillar { center_xy, radius, z_min, z_max } => {
                let qr = (Vector2::new(p.x, p.y) - center_xy).norm() - radius;
                let qz = (p.z - (z_min + z_max) / 2.0).abs() - (z_max - z_min) / 2.0;
                let outside = Vector2::new(qr.max(0.0), qz.max(0.0));
                outside.norm() + qr.max(qz).min(0.0)
            }
        }
    }

    /// Closed containment test.
    pub fn contains(&self, p: Vector3<f64>) -> bool {
        self.signed_distance(p) <= 0.0
    }

    /// Grow the primitive so that it covers the Minkowski sum with a sphere
    /// of radius `margin`. Boxes are extended per axis, which over-covers at
    /// the corners (conservative).
    pub fn inflate(&self, margin: f64) -> Primitive {
        match self {
            Primitive::Box { center, half_extents } => Primitive::Box {
                center: *center,
                half_extents: half_extents.add_scalar(margin),
            },
            Primitive::Pillar { center_xy, radius, z_min, z_max } => Primitive::Pillar {
                center_xy: *center_xy,
                radius: radius + margin,
                z_min: z_min - margin,
                z_max: z_max + margin,
            },
        }
    }

    /// Parametric intersection interval of the ray o + t·d with the solid,
    /// or None if it misses. The interval may extend to negative t.
    fn ray_interval(&self, o: Vector3<f64>, d: Vector3<f64>) -> Option<(f64, f64)> {
        const TINY: f64 = 1e-12;
        match self {
            Primitive::Box { center, half_extents } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for i in 0..3 {
                    let lo = center[i] - half_extents[i];
                    let hi = center[i] + half_extents[i];
                    if d[i].abs() < TINY {
                        if o[i] < lo || o[i] > hi {
                            return None;
                        }
                    } else {
                        let a = (lo - o[i]) / d[i];
                        let b = (hi - o[i]) / d[i];
                        t0 = t0.max(a.min(b));
                        t1 = t1.min(a.max(b));
                    }
                }
                (t0 <= t1).then_some((t0, t1))
            }
            Primitive::Pillar { center_xy, radius, z_min, z_max } => {
                let ox = o.x - center_xy.x;
                let oy = o.y - center_xy.y;
                let a = d.x * d.x + d.y * d.y;
                let (mut t0, mut t1);
                if a < TINY {
                    if ox * ox + oy * oy > radius * radius {
                        return None;
                    }
                    t0 = f64::NEG_INFINITY;
                    t1 = f64::INFINITY;
                } else {
                    let b = 2.0 * (ox * d.x + oy * d.y);
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc < 0.0 {
                        return None;
                    }
                    let s = disc.sqrt();
                    t0 = (-b - s) / (2.0 * a);
                    t1 = (-b + s) / (2.0 * a);
                }
                if d.z.abs() < TINY {
                    if o.z < *z_min || o.z > *z_max {
                        return None;
                    }
                } else {
                    let a = (z_min - o.z) / d.z;
                    let b = (z_max - o.z) / d.z;
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                (t0 <= t1).then_some((t0, t1))
            }
        }
    }
}

/// Obstacle set plus the cubic region scenes are generated in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    /// Half side length of the generation cube (centered at the origin).
    pub half_size: f64,
}

impl Scene {
    pub fn empty(half_size: f64) -> Self {
        Scene { primitives: Vec::new(), half_size }
    }

    pub fn inflate(&self, margin: f64) -> Scene {
        Scene {
            primitives: self.primitives.iter().map(|p| p.inflate(margin)).collect(),
            half_size: self.half_size,
        }
    }

    /// Closed containment against any primitive.
    pub fn contains(&self, p: Vector3<f64>) -> bool {
        self.primitives.iter().any(|pr| pr.contains(p))
    }

    /// Distance to the nearest obstacle surface (negative inside).
    pub fn min_distance(&self, p: Vector3<f64>) -> f64 {
        self.primitives
            .iter()
            .map(|pr| pr.signed_distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest t ≥ 0 with o + t·d on an obstacle; 0 if o starts inside.
    pub fn raycast(&self, o: Vector3<f64>, d: Vector3<f64>) -> Option<f64> {
        let mut best: Option<f64> = None;
        for pr in &self.primitives {
            if let Some((t0, t1)) = pr.ray_interval(o, d) {
                let t = if t0 >= 0.0 {
                    t0
                } else if t1 >= 0.0 {
                    0.0
                } else {
                    continue;
                };
                best = Some(best.map_or(t, |b: f64| b.min(t)));
            }
        }
        best
    }

    /// Render a z-depth image from a world-frame camera pose. Pixel values
    /// are z-depth normalized by d_max, clamped to [DEPTH_EPS, 1]; pixels
    /// with no surface within d_max read exactly 1.
    pub fn render_depth(&self, cam_pose: &Pose, cam: &CameraModel) -> DepthImage {
        let mut img = DepthImage::new(cam.n_v, cam.n_h);
        let rot = crate::geom::quat_to_rot(&cam_pose.orientation);
        for r in 0..cam.n_v {
            for c in 0..cam.n_h {
                // Camera-frame ray with z component 1: the ray parameter of a
                // hit is its z-depth in meters.
                let d_world = rot * cam.pixel_ray(r, c);
                let v = match self.raycast(cam_pose.position, d_world) {
                    Some(t) if t < cam.d_max => {
                        ((t / cam.d_max) as f32).clamp(DEPTH_EPS, 1.0)
                    }
                    _ => 1.0,
                };
                img.set(r, c, v);
            }
        }
        img
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<(), WorldError> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Scene, WorldError> {
        let s = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Row-major depth raster; row 0 is the top of the image (camera −y side is
/// up, so increasing row index moves along camera +y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthImage {
    pub n_v: usize,
    pub n_h: usize,
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn new(n_v: usize, n_h: usize) -> Self {
        DepthImage { n_v, n_h, data: vec![1.0; n_v * n_h] }
    }

    pub fn from_data(n_v: usize, n_h: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n_v * n_h);
        DepthImage { n_v, n_h, data }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.n_h + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.n_h + col] = v;
    }

    /// Mirror about the vertical centerline (camera x → −x). Exact involution.
    pub fn flip_horizontal(&self) -> DepthImage {
        let mut out = self.clone();
        for r in 0..self.n_v {
            let row = &mut out.data[r * self.n_h..(r + 1) * self.n_h];
            row.reverse();
        }
        out
    }
}

/// Exact free/occupied mapping of a camera-frame point against a depth
/// raster: out-of-FOV points are occupied, in-FOV points are occupied iff
/// they lie at or behind the rendered surface of their pixel.
pub fn collision_label(img: &DepthImage, cam: &CameraModel, p_cam: Vector3<f64>) -> f32 {
    if !in_fov(p_cam, cam) {
        return 1.0;
    }
    // in_fov guarantees the projection lands on the image.
    let (row, col) = cam
        .project_to_pixel(p_cam)
        .expect("in-FOV point must project onto the raster");
    let surface_z = img.at(row, col) as f64 * cam.d_max;
    if p_cam.z >= surface_z {
        1.0
    } else {
        0.0
    }
}

/// Same mapping evaluated against an exact ray through the point itself
/// rather than the pixel-center raster; free (0) answers are sound with no
/// quantization caveat: the point is strictly in front of the first surface
/// along its own view ray, so it cannot be inside any obstacle.
pub fn collision_label_exact(scene: &Scene, cam_pose: &Pose, cam: &CameraModel, p_cam: Vector3<f64>) -> f32 {
    if !in_fov(p_cam, cam) {
        return 1.0;
    }
    let dir_cam = Vector3::new(p_cam.x / p_cam.z, p_cam.y / p_cam.z, 1.0);
    let d_world = crate::geom::quat_to_rot(&cam_pose.orientation) * dir_cam;
    let surface_z = scene
        .raycast(cam_pose.position, d_world)
        .map_or(cam.d_max, |t| t.min(cam.d_max));
    if p_cam.z >= surface_z {
        1.0
    } else {
        0.0
    }
}

/// Procedural scene parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentConfig {
    pub half_size: f64,
    pub n_objects: usize,
    /// Full side length / diameter range of the random objects [m].
    pub object_size: (f64, f64),
    pub n_pillars: usize,
    pub pillar_radius: (f64, f64),
    pub wall_thickness: f64,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        EnvironmentConfig {
            half_size: 2.5,
            n_objects: 20,
            object_size: (0.2, 1.0),
            n_pillars: 2,
            pillar_radius: (0.1, 0.3),
            wall_thickness: 0.1,
        }
    }
}

/// Sample a random cluttered room: boxes and cylinders of mixed size, a few
/// floor-to-ceiling pillars, and four boundary walls whose inner faces sit
/// exactly on the generation cube.
pub fn sample_environment(rng: &mut ChaCha8Rng, cfg: &EnvironmentConfig) -> Scene {
    let hs = cfg.half_size;
    let mut primitives = Vec::with_capacity(cfg.n_objects + cfg.n_pillars + 4);

    let half_in = |rng: &mut ChaCha8Rng, half: f64| -> f64 {
        rng.random_range(-(hs - half)..=(hs - half))
    };

    for _ in 0..cfg.n_objects {
        if rng.random::<f64>() < 0.5 {
            let h = Vector3::new(
                rng.random_range(cfg.object_size.0..=cfg.object_size.1) / 2.0,
                rng.random_range(cfg.object_size.0..=cfg.object_size.1) / 2.0,
                rng.random_range(cfg.object_size.0..=cfg.object_size.1) / 2.0,
            );
            let center = Vector3::new(
                half_in(rng, h.x),
                half_in(rng, h.y),
                half_in(rng, h.z),
            );
            primitives.push(Primitive::Box { center, half_extents: h });
        } else {
            let radius = rng.random_range(cfg.object_size.0..=cfg.object_size.1) / 2.0;
            let half_h = rng.random_range(cfg.object_size.0..=cfg.object_size.1) / 2.0;
            let cz = half_in(rng, half_h);
            primitives.push(Primitive::Pillar {
                center_xy: Vector2::new(half_in(rng, radius), half_in(rng, radius)),
                radius,
                z_min: cz - half_h,
                z_max: cz + half_h,
            });
        }
    }

    for _ in 0..cfg.n_pillars {
        let radius = rng.random_range(cfg.pillar_radius.0..=cfg.pillar_radius.1);
        primitives.push(Primitive::Pillar {
            center_xy: Vector2::new(half_in(rng, radius), half_in(rng, radius)),
            radius,
            z_min: -hs,
            z_max: hs,
        });
    }

    let t = cfg.wall_thickness / 2.0;
    for (sx, sy) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
        let center = Vector3::new(sx * (hs + t), sy * (hs + t), 0.0);
        let half_extents = if sx != 0.0 {
            Vector3::new(t, hs + 2.0 * t, hs)
        } else {
            Vector3::new(hs + 2.0 * t, t, hs)
        };
        primitives.push(Primitive::Box { center, half_extents });
    }

    Scene { primitives, half_size: hs }
}

/// Rejection-sample a camera pose whose origin clears every obstacle by
/// `clearance`, with a uniformly random orientation.
pub fn sample_free_camera_pose(
    rng: &mut ChaCha8Rng,
    scene: &Scene,
    clearance: f64,
) -> Result<Pose, WorldError> {
    const MAX_TRIES: usize = 10_000;
    let hs = scene.half_size;
    for _ in 0..MAX_TRIES {
        let p = Vector3::new(
            rng.random_range(-hs..=hs),
            rng.random_range(-hs..=hs),
            rng.random_range(-hs..=hs),
        );
        let q: Quat = random_unit_quat(rng);
        if scene.min_distance(p) > clearance {
            return Ok(Pose::new(p, q));
        }
    }
    Err(WorldError::NoFreePose(MAX_TRIES))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn unit_box() -> Primitive {
        Primitive::Box { center: Vector3::zeros(), half_extents: Vector3::new(0.5, 0.5, 0.5) }
    }

    #[test]
    fn box_signed_distance_cases() {
        let b = unit_box();
        assert_relative_eq!(b.signed_distance(Vector3::new(1.5, 0.0, 0.0)), 1.0);
        assert_relative_eq!(b.signed_distance(Vector3::zeros()), -0.5);
        assert_relative_eq!(b.signed_distance(Vector3::new(0.5, 0.0, 0.0)), 0.0);
        // Corner distance is Euclidean.
        assert_relative_eq!(
            b.signed_distance(Vector3::new(1.5, 1.5, 0.0)),
            2.0_f64.sqrt(),
            epsilon = 1e-12
        );
        assert!(b.contains(Vector3::new(0.5, 0.5, 0.5)));
        assert!(!b.contains(Vector3::new(0.5 + 1e-9, 0.0, 0.0)));
    }

    #[test]
    fn pillar_signed_distance_cases() {
        let c = Primitive::Pillar {
            center_xy: Vector2::new(0.0, 0.0),
            radius: 1.0,
            z_min: -1.0,
            z_max: 1.0,
        };
        assert_relative_eq!(c.signed_distance(Vector3::new(3.0, 0.0, 0.0)), 2.0);
        assert_relative_eq!(c.signed_distance(Vector3::new(0.0, 0.0, 2.5)), 1.5);
        assert_relative_eq!(c.signed_distance(Vector3::zeros()), -1.0);
        // Above the rim: Euclidean to the cap edge.
        assert_relative_eq!(
            c.signed_distance(Vector3::new(2.0, 0.0, 2.0)),
            2.0_f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn raycast_box_from_outside() {
        let scene = Scene { primitives: vec![unit_box()], half_size: 2.5 };
        let t = scene.raycast(Vector3::new(-2.0, 0.0, 0.0), Vector3::x()).unwrap();
        assert_relative_eq!(t, 1.5, epsilon = 1e-12);
        assert!(scene.raycast(Vector3::new(-2.0, 2.0, 0.0), Vector3::x()).is_none());
        // Pointing away.
        assert!(scene.raycast(Vector3::new(-2.0, 0.0, 0.0), -Vector3::x()).is_none());
    }

    #[test]
    fn raycast_inside_returns_zero() {
        let scene = Scene { primitives: vec![unit_box()], half_size: 2.5 };
        assert_eq!(scene.raycast(Vector3::zeros(), Vector3::x()), Some(0.0));
    }

    #[test]
    fn raycast_cylinder_body_and_cap() {
        let scene = Scene {
            primitives: vec![Primitive::Pillar {
                center_xy: Vector2::new(0.0, 0.0),
                radius: 1.0,
                z_min: -1.0,
                z_max: 1.0,
            }],
            half_size: 2.5,
        };
        let t = scene.raycast(Vector3::new(-3.0, 0.0, 0.0), Vector3::x()).unwrap();
        assert_relative_eq!(t, 2.0, epsilon = 1e-12);
        // Straight down onto the top cap.
        let t = scene.raycast(Vector3::new(0.3, 0.0, 4.0), -Vector3::z()).unwrap();
        assert_relative_eq!(t, 3.0, epsilon = 1e-12);
        // Down but outside the radius.
        assert!(scene.raycast(Vector3::new(1.5, 0.0, 4.0), -Vector3::z()).is_none());
    }

    #[test]
    fn raycast_agrees_with_signed_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let scene = sample_environment(&mut rng, &EnvironmentConfig::default());
        let mut hits = 0;
        for _ in 0..2000 {
            let o = Vector3::new(
                rng.random_range(-2.4..2.4),
                rng.random_range(-2.4..2.4),
                rng.random_range(-2.4..2.4),
            );
            if scene.contains(o) {
                continue;
            }
            let d = Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            );
            if d.norm() < 1e-3 {
                continue;
            }
            if let Some(t) = scene.raycast(o, d) {
                hits += 1;
                let hit = o + d * t;
                // Hit point lies on some surface...
                assert!(scene.min_distance(hit).abs() < 1e-7, "off-surface hit");
                // ...and everything strictly before it is free space.
                for k in 1..8 {
                    let s = t * k as f64 / 8.0;
                    assert!(
                        scene.min_distance(o + d * s) >= -1e-9,
                        "ray passes through an obstacle before the reported hit"
                    );
                }
            }
        }
        assert!(hits > 200, "too few hits to be meaningful: {hits}");
    }

    #[test]
    fn render_wall_is_constant_z_depth() {
        // Camera at the origin looking along +z (identity pose = optical
        // axis is world z). A plane z = 2 must read 2/5 at EVERY pixel:
        // z-depth, unlike range, is constant on fronto-parallel planes.
        let cam = CameraModel::default_desk();
        let scene = Scene {
            primitives: vec![Primitive::Box {
                center: Vector3::new(0.0, 0.0, 2.05),
                half_extents: Vector3::new(50.0, 50.0, 0.05),
            }],
            half_size: 2.5,
        };
        let img = scene.render_depth(&Pose::IDENTITY, &cam);
        for r in 0..cam.n_v {
            for c in 0..cam.n_h {
                assert_relative_eq!(img.at(r, c) as f64, 0.4, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn render_empty_scene_is_all_ones() {
        let cam = CameraModel::default_desk();
        let img = Scene::empty(2.5).render_depth(&Pose::IDENTITY, &cam);
        assert!(img.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn render_far_surface_reads_one() {
        let cam = CameraModel::default_desk();
        let scene = Scene {
            primitives: vec![Primitive::Box {
                center: Vector3::new(0.0, 0.0, 7.0),
                half_extents: Vector3::new(50.0, 50.0, 0.05),
            }],
            half_size: 2.5,
        };
        let img = scene.render_depth(&Pose::IDENTITY, &cam);
        assert!(img.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn render_respects_image_orientation() {
        // Obstacle below the camera (world y+ in camera coords is down):
        // it must appear in the bottom rows of the raster.
        let cam = CameraModel::default_desk();
        let scene = Scene {
            primitives: vec![Primitive::Box {
                center: Vector3::new(0.0, 1.2, 2.0),
                half_extents: Vector3::new(0.4, 0.4, 0.4),
            }],
            half_size: 2.5,
        };
        let img = scene.render_depth(&Pose::IDENTITY, &cam);
        let top_hits: usize = (0..cam.n_v / 2)
            .flat_map(|r| (0..cam.n_h).map(move |c| (r, c)))
            .filter(|&(r, c)| img.at(r, c) < 1.0)
            .count();
        let bottom_hits: usize = (cam.n_v / 2..cam.n_v)
            .flat_map(|r| (0..cam.n_h).map(move |c| (r, c)))
            .filter(|&(r, c)| img.at(r, c) < 1.0)
            .count();
        assert_eq!(top_hits, 0);
        assert!(bottom_hits > 0);
    }

    #[test]
    fn flip_horizontal_is_involution_and_mirrors() {
        let cam = CameraModel::default_desk();
        let scene = Scene {
            primitives: vec![Primitive::Box {
                center: Vector3::new(1.0, 0.0, 2.0),
                half_extents: Vector3::new(0.3, 0.3, 0.3),
            }],
            half_size: 2.5,
        };
        let img = scene.render_depth(&Pose::IDENTITY, &cam);
        let flipped = img.flip_horizontal();
        assert_eq!(flipped.flip_horizontal(), img);
        for r in 0..cam.n_v {
            for c in 0..cam.n_h {
                assert_eq!(flipped.at(r, c), img.at(r, cam.n_h - 1 - c));
            }
        }
        // The mirrored raster equals a render of the x-mirrored scene.
        let mirrored_scene = Scene {
            primitives: vec![Primitive::Box {
                center: Vector3::new(-1.0, 0.0, 2.0),
                half_extents: Vector3::new(0.3, 0.3, 0.3),
            }],
            half_size: 2.5,
        };
        assert_eq!(flipped, mirrored_scene.render_depth(&Pose::IDENTITY, &cam));
    }

    #[test]
    fn collision_label_basic_cases() {
        let cam = CameraModel::default_desk();
        let scene = Scene {
            primitives: vec![Primitive::Box {
                center: Vector3::new(0.0, 0.0, 2.05),
                half_extents: Vector3::new(50.0, 50.0, 0.05),
            }],
            half_size: 2.5,
        };
        let img = scene.render_depth(&Pose::IDENTITY, &cam);
        // Behind the camera, outside the pyramid, beyond d_max: occupied.
        assert_eq!(collision_label(&img, &cam, Vector3::new(0.0, 0.0, -1.0)), 1.0);
        assert_eq!(collision_label(&img, &cam, Vector3::new(4.0, 0.0, 1.0)), 1.0);
        // In front of the wall: free. Behind it: occupied. The exact
        // at-surface boundary is owned by the f32 raster value, so probe one
        // f32 ulp past it rather than at the real-valued surface.
        assert_eq!(collision_label(&img, &cam, Vector3::new(0.0, 0.0, 1.0)), 0.0);
        let surface_z = img.at(cam.n_v / 2, cam.n_h / 2) as f64 * cam.d_max;
        assert_eq!(collision_label(&img, &cam, Vector3::new(0.0, 0.0, surface_z)), 1.0);
        assert_eq!(collision_label(&img, &cam, Vector3::new(0.0, 0.0, 2.01)), 1.0);
        assert_eq!(collision_label(&img, &cam, Vector3::new(0.3, -0.2, 3.0)), 1.0);
    }

    #[test]
    fn free_labels_along_exact_rays_are_sound() {
        // A point strictly in front of the first surface along its own view
        // ray can never be inside an obstacle; check against containment.
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let cam = CameraModel::default_desk();
        for scene_i in 0..5 {
            let mut srng = ChaCha8Rng::seed_from_u64(400 + scene_i);
            let scene = sample_environment(&mut srng, &EnvironmentConfig::default());
            let pose = sample_free_camera_pose(&mut srng, &scene, 0.1).unwrap();
            let mut free = 0;
            for _ in 0..20_000 {
                let z = rng.random_range(0.01..cam.d_max);
                let p_cam = Vector3::new(
                    rng.random_range(-1.0..1.0) * z * cam.tan_alpha_h(),
                    rng.random_range(-1.0..1.0) * z * cam.tan_alpha_v(),
                    z,
                );
                if collision_label_exact(&scene, &pose, &cam, p_cam) == 0.0 {
                    free += 1;
                    let p_world = pose.transform_point(p_cam);
                    assert!(!scene.contains(p_world), "free-labeled point inside an obstacle");
                }
            }
            assert!(free > 1000, "scene {scene_i}: too few free samples: {free}");
        }
    }

    #[test]
    fn raster_labels_agree_with_exact_rays_almost_everywhere() {
        // Pixel binning only flips labels near depth discontinuities; the
        // disagreement rate over random in-FOV points must stay small.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let cam = CameraModel::default_desk();
        let mut srng = ChaCha8Rng::seed_from_u64(500);
        let scene = sample_environment(&mut srng, &EnvironmentConfig::default());
        let pose = sample_free_camera_pose(&mut srng, &scene, 0.1).unwrap();
        let img = scene.render_depth(&pose, &cam);
        let n = 50_000;
        let mut disagree = 0;
        for _ in 0..n {
            let z = rng.random_range(0.01..cam.d_max);
            let p_cam = Vector3::new(
                rng.random_range(-1.0..1.0) * z * cam.tan_alpha_h(),
                rng.random_range(-1.0..1.0) * z * cam.tan_alpha_v(),
                z,
            );
            let a = collision_label(&img, &cam, p_cam);
            let b = collision_label_exact(&scene, &pose, &cam, p_cam);
            if a != b {
                disagree += 1;
            }
        }
        assert!(
            (disagree as f64) < 0.05 * n as f64,
            "raster/exact disagreement too high: {disagree}/{n}"
        );
    }

    #[test]
    fn inflation_covers_sphere_neighborhood() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let scene = sample_environment(&mut rng, &EnvironmentConfig::default());
        let inflated = scene.inflate(ROBOT_RADIUS);
        for _ in 0..50_000 {
            let p = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            );
            if scene.min_distance(p) <= ROBOT_RADIUS {
                assert!(
                    inflated.contains(p),
                    "point within one robot radius of an obstacle must be inside the inflated scene"
                );
            }
        }
    }

    #[test]
    fn inflated_unit_box_dimensions() {
        let b = unit_box().inflate(0.25);
        match b {
            Primitive::Box { half_extents, .. } => {
                assert_relative_eq!(half_extents.x, 0.75);
                assert_relative_eq!(half_extents.y, 0.75);
                assert_relative_eq!(half_extents.z, 0.75);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn environment_sampling_is_deterministic() {
        let cfg = EnvironmentConfig::default();
        let a = sample_environment(&mut ChaCha8Rng::seed_from_u64(77), &cfg);
        let b = sample_environment(&mut ChaCha8Rng::seed_from_u64(77), &cfg);
        assert_eq!(a, b);
        assert_eq!(a.primitives.len(), cfg.n_objects + cfg.n_pillars + 4);
        let c = sample_environment(&mut ChaCha8Rng::seed_from_u64(78), &cfg);
        assert_ne!(a, c);
    }

    #[test]
    fn scene_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let scene = sample_environment(&mut rng, &EnvironmentConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        scene.save_json(&path).unwrap();
        let loaded = Scene::load_json(&path).unwrap();
        assert_eq!(scene, loaded);
    }

    #[test]
    fn free_pose_sampling_respects_clearance() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let scene = sample_environment(&mut rng, &EnvironmentConfig::default());
        for _ in 0..50 {
            let pose = sample_free_camera_pose(&mut rng, &scene, 0.3).unwrap();
            assert!(scene.min_distance(pose.position) > 0.3);
            assert!((pose.orientation.norm() - 1.0).abs() < 1e-9);
        }
    }
}
