//! Labeled point corpora for the collision classifier.
//!
//! Each record is one procedurally generated scene rendered to a depth image
//! from a random free pose, a set of query points drawn from a cone slightly
//! wider and deeper than the camera frustum, and a handful of points in a
//! small ball around the sensor that are always labeled free (the robot
//! occupies that space, so it cannot be in collision there).
//!
//! Points are labeled against the exact raster mapping after augmentation,
//! so stored images, points and labels are mutually consistent by
//! construction. Points are stored in network input scale as f32; labels are
//! computed from the f32-rounded coordinates so that a loader recomputing
//! them bit-exactly agrees.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geom::{scale_to_network_input, unscale_from_network_input, CameraModel};
use crate::world::{
    collision_label, sample_environment, sample_free_camera_pose, DepthImage, EnvironmentConfig,
    DEPTH_EPS, ROBOT_RADIUS,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("corpus {file} is corrupt: stored digest {expected} != computed {actual}")]
    DigestMismatch { file: String, expected: String, actual: String },
    #[error("corpus layout mismatch: {0}")]
    Layout(String),
    #[error("world: {0}")]
    World(#[from] crate::world::WorldError),
}

/// Raster perturbations applied before labeling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Maximum shift in pixels along each image axis (edge replicated).
    pub max_shift: i32,
    /// Multiplicative depth noise standard deviation.
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip_prob: 0.5, max_shift: 2, noise_sigma: 0.02 }
    }
}

/// Shift the raster by whole pixels, replicating edge values into the
/// uncovered band.
pub fn shift_image(img: &DepthImage, dx: i32, dy: i32) -> DepthImage {
    let mut out = DepthImage::new(img.n_v, img.n_h);
    for r in 0..img.n_v {
        for c in 0..img.n_h {
            let src_r = (r as i32 - dy).clamp(0, img.n_v as i32 - 1) as usize;
            let src_c = (c as i32 - dx).clamp(0, img.n_h as i32 - 1) as usize;
            out.set(r, c, img.at(src_r, src_c));
        }
    }
    out
}

/// Apply flip, shift and multiplicative noise. Samples exactly the same
/// random variates regardless of which transforms end up active, so rng
/// consumption is stable under config edits.
pub fn augment_image(img: &DepthImage, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> DepthImage {
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let dx = rng.random_range(-cfg.max_shift..=cfg.max_shift);
    let dy = rng.random_range(-cfg.max_shift..=cfg.max_shift);
    let mut out = if flip { img.flip_horizontal() } else { img.clone() };
    out = shift_image(&out, dx, dy);
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).unwrap();
        for v in &mut out.data {
            let n: f64 = normal.sample(rng);
            *v = ((*v as f64) * (1.0 + n)).clamp(DEPTH_EPS as f64, 1.0) as f32;
        }
    }
    out
}

/// Draw a metric camera-frame query point: azimuth/elevation uniform over
/// the widened angular box, radius uniform up to the widened range.
pub fn sample_query_point(
    rng: &mut ChaCha8Rng,
    cam: &CameraModel,
    over_fov: f64,
    over_range: f64,
) -> Vector3<f64> {
    let az = rng.random_range(-over_fov * cam.alpha_h..=over_fov * cam.alpha_h);
    let el = rng.random_range(-over_fov * cam.alpha_v..=over_fov * cam.alpha_v);
    let r = rng.random_range(0.0..=over_range * cam.d_max);
    let d = Vector3::new(az.tan(), el.tan(), 1.0);
    d / d.norm() * r
}

/// Probability that [`sample_query_point`] lands outside the sensing frustum,
/// by midpoint quadrature over the angular box (the radial integral is
/// closed-form given the direction).
pub fn out_of_fov_fraction_quadrature(cam: &CameraModel, over_fov: f64, over_range: f64) -> f64 {
    let n = 600;
    let r_s = over_range * cam.d_max;
    let mut in_fov = 0.0;
    for i in 0..n {
        let az = (-1.0 + 2.0 * (i as f64 + 0.5) / n as f64) * over_fov * cam.alpha_h;
        for j in 0..n {
            let el = (-1.0 + 2.0 * (j as f64 + 0.5) / n as f64) * over_fov * cam.alpha_v;
            if az.abs() <= cam.alpha_h && el.abs() <= cam.alpha_v {
                // In-FOV additionally needs z = r/s <= d_max with
                // s = |(tan az, tan el, 1)|.
                let s = (1.0 + az.tan().powi(2) + el.tan().powi(2)).sqrt();
                in_fov += (cam.d_max * s).min(r_s) / r_s;
            }
        }
    }
    1.0 - in_fov / (n * n) as f64
}

/// Uniform point in the ball of radius `r` around the sensor origin.
pub fn sample_safe_point(rng: &mut ChaCha8Rng, r: f64) -> Vector3<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let dir = Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
    let dir = if dir.norm() < 1e-12 { Vector3::z() } else { dir.normalize() };
    dir * (r * rng.random::<f64>().cbrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_images: usize,
    pub seed: u64,
    pub env: EnvironmentConfig,
    pub camera: CameraModel,
    /// Query points per image (cone sampling).
    pub n_query: usize,
    /// Always-free points per image (ball around the sensor).
    pub n_safe: usize,
    pub safe_radius: f64,
    /// Angular widening factor of the query cone relative to the FOV.
    pub over_fov: f64,
    /// Radial widening factor relative to d_max.
    pub over_range: f64,
    pub augment: Option<AugmentConfig>,
}

impl DatasetConfig {
    pub fn training_default(n_images: usize, seed: u64) -> Self {
        DatasetConfig {
            n_images,
            seed,
            env: EnvironmentConfig::default(),
            camera: CameraModel::default_desk(),
            n_query: 1024,
            n_safe: 32,
            safe_radius: 0.05,
            over_fov: 1.2,
            over_range: 1.2,
            augment: Some(AugmentConfig::default()),
        }
    }

    /// Held-out evaluation: clean rasters, denser query sets, no forced-free
    /// prior points.
    pub fn eval_default(n_images: usize, seed: u64) -> Self {
        DatasetConfig {
            n_query: 2048,
            n_safe: 0,
            augment: None,
            ..DatasetConfig::training_default(n_images, seed)
        }
    }

    pub fn points_per_image(&self) -> usize {
        self.n_query + self.n_safe
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub images_sha256: String,
    pub points_sha256: String,
    pub labels_sha256: String,
}

struct ImageRecord {
    image: Vec<f32>,
    /// Interleaved xyz in network input scale.
    points: Vec<f32>,
    labels: Vec<f32>,
}

fn build_record(cfg: &DatasetConfig, image_seed: u64) -> Result<ImageRecord, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
    let cam = &cfg.camera;

    let scene = sample_environment(&mut rng, &cfg.env);
    let inflated = scene.inflate(ROBOT_RADIUS);
    // The pose (and the whole safe ball) must clear the inflated scene so
    // the forced-free labels below are sound.
    let pose = sample_free_camera_pose(&mut rng, &inflated, cfg.safe_radius)?;

    let mut img = inflated.render_depth(&pose, cam);
    if let Some(aug) = &cfg.augment {
        img = augment_image(&img, aug, &mut rng);
    }

    let n_pts = cfg.points_per_image();
    let mut points = Vec::with_capacity(3 * n_pts);
    let mut labels = Vec::with_capacity(n_pts);
    let mut push = |p_metric: Vector3<f64>, forced_free: bool| {
        let a = scale_to_network_input(p_metric, cam);
        let a32 = [a.x as f32, a.y as f32, a.z as f32];
        // Label the f32-rounded point: what is stored is what is labeled.
        let p_back = unscale_from_network_input(
            Vector3::new(a32[0] as f64, a32[1] as f64, a32[2] as f64),
            cam,
        );
        let label = if forced_free { 0.0 } else { collision_label(&img, cam, p_back) };
        points.extend_from_slice(&a32);
        labels.push(label);
    };
    for _ in 0..cfg.n_query {
        push(sample_query_point(&mut rng, cam, cfg.over_fov, cfg.over_range), false);
    }
    for _ in 0..cfg.n_safe {
        push(sample_safe_point(&mut rng, cfg.safe_radius), true);
    }

    Ok(ImageRecord { image: img.data, points, labels })
}

fn sha256_hex(bytes: &[u8]) -> String {
    use std::fmt::Write as _;
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn f32s_to_bytes(v: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn bytes_to_f32s(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

/// Removes the target directory on drop unless disarmed, so a failed build
/// never leaves a half-written corpus behind.
struct CleanupGuard {
    path: PathBuf,
    armed: bool,
}

impl Drop for CleanupGuard {
    fn drop(&mut self) {
        if self.armed {
            let _ = std::fs::remove_dir_all(&self.path);
        }
    }
}

/// Generate a corpus into `out_dir` (created if absent). Fully deterministic
/// in `cfg.seed`: per-image seeds are drawn up front and records are built in
/// parallel but written in index order.
pub fn build_corpus(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest, DatasetError> {
    std::fs::create_dir_all(out_dir)?;
    let mut guard = CleanupGuard { path: out_dir.to_path_buf(), armed: true };

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let image_seeds: Vec<u64> = (0..cfg.n_images).map(|_| master.random()).collect();

    let records: Result<Vec<ImageRecord>, DatasetError> =
        image_seeds.par_iter().map(|&s| build_record(cfg, s)).collect();
    let records = records?;

    let mut images = Vec::with_capacity(cfg.n_images * cfg.camera.n_v * cfg.camera.n_h);
    let mut points = Vec::with_capacity(cfg.n_images * 3 * cfg.points_per_image());
    let mut labels = Vec::with_capacity(cfg.n_images * cfg.points_per_image());
    for r in records {
        images.extend_from_slice(&r.image);
        points.extend_from_slice(&r.points);
        labels.extend_from_slice(&r.labels);
    }

    let mut digests = Vec::new();
    for (name, data) in
        [("images.bin", &images), ("points.bin", &points), ("labels.bin", &labels)]
    {
        let bytes = f32s_to_bytes(data);
        let mut f = std::fs::File::create(out_dir.join(name))?;
        f.write_all(&bytes)?;
        digests.push(sha256_hex(&bytes));
    }

    let manifest = DatasetManifest {
        version: 1,
        config: cfg.clone(),
        images_sha256: digests[0].clone(),
        points_sha256: digests[1].clone(),
        labels_sha256: digests[2].clone(),
    };
    // The manifest is written last: its presence marks a complete corpus.
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    guard.armed = false;
    Ok(manifest)
}

/// In-memory corpus.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    images: Vec<f32>,
    points: Vec<f32>,
    labels: Vec<f32>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset, DatasetError> {
        let manifest: DatasetManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut parts = Vec::new();
        for (name, expected) in [
            ("images.bin", &manifest.images_sha256),
            ("points.bin", &manifest.points_sha256),
            ("labels.bin", &manifest.labels_sha256),
        ] {
            let bytes = std::fs::read(dir.join(name))?;
            let actual = sha256_hex(&bytes);
            if &actual != expected {
                return Err(DatasetError::DigestMismatch {
                    file: name.into(),
                    expected: expected.clone(),
                    actual,
                });
            }
            parts.push(bytes_to_f32s(&bytes));
        }
        let labels = parts.pop().unwrap();
        let points = parts.pop().unwrap();
        let images = parts.pop().unwrap();

        let cfg = &manifest.config;
        let expect_img = cfg.n_images * cfg.camera.n_v * cfg.camera.n_h;
        let expect_pts = cfg.n_images * 3 * cfg.points_per_image();
        let expect_lab = cfg.n_images * cfg.points_per_image();
        if images.len() != expect_img || points.len() != expect_pts || labels.len() != expect_lab {
            return Err(DatasetError::Layout(format!(
                "images {} (want {expect_img}), points {} (want {expect_pts}), labels {} (want {expect_lab})",
                images.len(),
                points.len(),
                labels.len()
            )));
        }
        Ok(Dataset { manifest, images, points, labels })
    }

    pub fn n_images(&self) -> usize {
        self.manifest.config.n_images
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let px = self.manifest.config.camera.n_v * self.manifest.config.camera.n_h;
        &self.images[i * px..(i + 1) * px]
    }

    /// Interleaved xyz, network input scale.
    pub fn points(&self, i: usize) -> &[f32] {
        let n = 3 * self.manifest.config.points_per_image();
        &self.points[i * n..(i + 1) * n]
    }

    pub fn labels(&self, i: usize) -> &[f32] {
        let n = self.manifest.config.points_per_image();
        &self.labels[i * n..(i + 1) * n]
    }
}
