//! Cameras, rays, multi-view datasets and closed-form scenes.
//!
//! Cameras follow the right-handed, look-down-−z convention: a pixel
//! `(px, py)` maps to the camera-space direction
//! `((px − cx)/fx, −(py − cy)/fy, −1)` before rotation into world space.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{usage, validation, Error, Result};
use crate::image_io;
use crate::tensor::Tensor;

pub type Vec3 = [f64; 3];

pub(crate) fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn normalize3(a: Vec3) -> Vec3 {
    let n = norm3(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Pinhole camera with a rigid camera-to-world transform (row-major 4×4).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub camera_to_world: [[f64; 4]; 4],
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, camera_to_world: [[f64; 4]; 4]) -> Result<Self> {
        let cam = Self {
            intrinsics,
            camera_to_world,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(validation(format!("focal lengths must be positive, got ({}, {})", k.fx, k.fy)));
        }
        if k.width == 0 || k.height == 0 {
            return Err(validation("image size must be nonzero"));
        }
        if !(0.0..k.width as f64).contains(&k.cx) || !(0.0..k.height as f64).contains(&k.cy) {
            return Err(validation(format!(
                "principal point ({}, {}) outside the {}x{} image",
                k.cx, k.cy, k.width, k.height
            )));
        }
        let m = &self.camera_to_world;
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(validation("camera_to_world last row must be [0, 0, 0, 1]"));
        }
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let rtr: f64 = (0..3).map(|r| m[r][i] * m[r][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((rtr - target).abs());
            }
        }
        if worst.is_nan() || worst >= 1e-6 {
            return Err(validation(format!("rotation is not orthonormal (|R^T R - I| = {worst:e})")));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn position(&self) -> Vec3 {
        let m = &self.camera_to_world;
        [m[0][3], m[1][3], m[2][3]]
    }

    /// Camera at `eye` looking at `target` with the given vertical-ish `up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, intrinsics: Intrinsics) -> Result<Self> {
        let back = normalize3(sub3(eye, target));
        let right = normalize3(cross3(up, back));
        let true_up = cross3(back, right);
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            m[r][0] = right[r];
            m[r][1] = true_up[r];
            m[r][2] = back[r];
            m[r][3] = eye[r];
        }
        m[3][3] = 1.0;
        Self::new(intrinsics, m)
    }

    /// Ray through continuous pixel coordinates; `(i + 0.5, j + 0.5)` is the
    /// center of pixel `(i, j)`.
    pub fn generate_ray(&self, px: f64, py: f64) -> Result<Ray> {
        let k = &self.intrinsics;
        if !(0.0..k.width as f64).contains(&px) || !(0.0..k.height as f64).contains(&py) {
            return Err(usage(format!(
                "pixel ({px}, {py}) outside the {}x{} image",
                k.width, k.height
            )));
        }
        Ok(self.ray_unchecked(px, py))
    }

    pub(crate) fn ray_unchecked(&self, px: f64, py: f64) -> Ray {
        let k = &self.intrinsics;
        let dir_cam = [(px - k.cx) / k.fx, -(py - k.cy) / k.fy, -1.0];
        let m = &self.camera_to_world;
        let world = [
            m[0][0] * dir_cam[0] + m[0][1] * dir_cam[1] + m[0][2] * dir_cam[2],
            m[1][0] * dir_cam[0] + m[1][1] * dir_cam[1] + m[1][2] * dir_cam[2],
            m[2][0] * dir_cam[0] + m[2][1] * dir_cam[1] + m[2][2] * dir_cam[2],
        ];
        Ray {
            origin: self.position(),
            direction: normalize3(world),
        }
    }

    /// Ray through the center of integer pixel `(x, y)`.
    pub fn pixel_ray(&self, x: usize, y: usize) -> Ray {
        self.ray_unchecked(x as f64 + 0.5, y as f64 + 0.5)
    }
}

/// Cameras evenly spaced on a circle around the origin, all looking at it.
pub fn orbit_cameras(
    count: usize,
    radius: f64,
    elevation: f64,
    width: usize,
    height: usize,
    focal: f64,
) -> Result<Vec<Camera>> {
    let intrinsics = Intrinsics {
        fx: focal,
        fy: focal,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
    };
    (0..count)
        .map(|i| {
            let az = i as f64 / count as f64 * std::f64::consts::TAU;
            orbit_camera(az, elevation, radius, intrinsics)
        })
        .collect()
}

pub fn orbit_camera(azimuth: f64, elevation: f64, radius: f64, intrinsics: Intrinsics) -> Result<Camera> {
    let eye = [
        radius * elevation.cos() * azimuth.sin(),
        radius * elevation.sin(),
        radius * elevation.cos() * azimuth.cos(),
    ];
    Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], intrinsics)
}

#[derive(Debug, Clone)]
pub struct Frame {
    /// `[H, W, 3]` linear color in `[0, 1]`.
    pub image: Tensor,
    pub camera: Camera,
}

#[derive(Debug, Clone)]
pub struct MultiViewDataset {
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub frames: Vec<Frame>,
}

impl MultiViewDataset {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(validation(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            let s = f.image.shape();
            if s != [self.height, self.width, 3] {
                return Err(validation(format!(
                    "frame {i}: image is {s:?}, expected [{}, {}, 3]",
                    self.height, self.width
                )));
            }
            if f.camera.width() != self.width || f.camera.height() != self.height {
                return Err(validation(format!("frame {i}: camera size differs from dataset size")));
            }
            f.camera.validate()?;
        }
        Ok(())
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.frames.iter().map(|f| f.camera).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameRecord {
    file: String,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    c2w: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    width: usize,
    height: usize,
    near: f64,
    far: f64,
    frames: Vec<FrameRecord>,
}

pub const MANIFEST_FILE: &str = "cameras.json";

/// Reads `cameras.json` and the PNG frames it references.
pub fn load_dataset(dir: &Path) -> Result<MultiViewDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::DatasetFormat(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::DatasetFormat(format!("{}: {e}", manifest_path.display())))?;
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for rec in &manifest.frames {
        if rec.c2w.len() != 16 {
            return Err(Error::DatasetFormat(format!(
                "{}: c2w must have 16 entries, found {}",
                rec.file,
                rec.c2w.len()
            )));
        }
        let mut m = [[0.0; 4]; 4];
        for (i, v) in rec.c2w.iter().enumerate() {
            m[i / 4][i % 4] = *v;
        }
        let intrinsics = Intrinsics {
            fx: rec.fx,
            fy: rec.fy,
            cx: rec.cx,
            cy: rec.cy,
            width: manifest.width,
            height: manifest.height,
        };
        let camera = Camera::new(intrinsics, m)
            .map_err(|e| validation(format!("{}: {e}", rec.file)))?;
        let image = image_io::read_png(&dir.join(&rec.file))?;
        if image.shape()[..2] != [manifest.height, manifest.width] {
            return Err(validation(format!(
                "{}: image is {}x{}, manifest says {}x{}",
                rec.file,
                image.shape()[1],
                image.shape()[0],
                manifest.width,
                manifest.height
            )));
        }
        frames.push(Frame { image, camera });
    }
    let ds = MultiViewDataset {
        width: manifest.width,
        height: manifest.height,
        near: manifest.near,
        far: manifest.far,
        frames,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes a dataset as `cameras.json` plus `frame_###.png` files.
pub fn write_dataset(dir: &Path, ds: &MultiViewDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut frames = Vec::new();
    for (i, f) in ds.frames.iter().enumerate() {
        let file = format!("frame_{i:03}.png");
        image_io::write_png(&dir.join(&file), &f.image)?;
        let k = f.camera.intrinsics;
        frames.push(FrameRecord {
            file,
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            c2w: f.camera.camera_to_world.iter().flatten().copied().collect(),
        });
    }
    let manifest = Manifest {
        width: ds.width,
        height: ds.height,
        near: ds.near,
        far: ds.far,
        frames,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Closed-form scenes used as ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticScene {
    Empty,
    /// Homogeneous medium between two planes `z = z_min` and `z = z_max`.
    Slab {
        z_min: f64,
        z_max: f64,
        sigma: f64,
        color: Vec3,
    },
    HomogeneousSphere {
        center: Vec3,
        radius: f64,
        sigma: f64,
        color: Vec3,
    },
    /// Sphere whose density falls off as `sigma * sigmoid((radius - r) / softness)`
    /// and whose color varies linearly with position.
    SoftSphere {
        center: Vec3,
        radius: f64,
        sigma: f64,
        softness: f64,
    },
}

impl SyntheticScene {
    pub fn density(&self, x: Vec3) -> f64 {
        match *self {
            SyntheticScene::Empty => 0.0,
            SyntheticScene::Slab { z_min, z_max, sigma, .. } => {
                if (z_min..=z_max).contains(&x[2]) {
                    sigma
                } else {
                    0.0
                }
            }
            SyntheticScene::HomogeneousSphere { center, radius, sigma, .. } => {
                if norm3(sub3(x, center)) <= radius {
                    sigma
                } else {
                    0.0
                }
            }
            SyntheticScene::SoftSphere { center, radius, sigma, softness } => {
                sigma * crate::tensor::sigmoid((radius - norm3(sub3(x, center))) / softness)
            }
        }
    }

    pub fn color(&self, x: Vec3, _dir: Vec3) -> Vec3 {
        match *self {
            SyntheticScene::Empty => [0.0; 3],
            SyntheticScene::Slab { color, .. } | SyntheticScene::HomogeneousSphere { color, .. } => color,
            SyntheticScene::SoftSphere { center, radius, .. } => {
                let u = sub3(x, center).map(|v| (v / radius).clamp(-1.0, 1.0));
                [0.5 + 0.4 * u[0], 0.5 + 0.4 * u[1], 0.5 - 0.4 * u[2]]
            }
        }
    }

    /// Smooth sphere used by the reconstruction tests and demos.
    pub fn default_sphere() -> Self {
        SyntheticScene::SoftSphere {
            center: [0.0; 3],
            radius: 1.0,
            sigma: 30.0,
            softness: 0.05,
        }
    }
}

/// Dense midpoint quadrature of the volume-rendering integral for every pixel.
pub fn render_scene_analytic(
    scene: &SyntheticScene,
    camera: &Camera,
    near: f64,
    far: f64,
    step: f64,
    background: Vec3,
) -> Result<Tensor> {
    if !(step > 0.0) {
        return Err(usage("quadrature step must be positive"));
    }
    if !(near < far) {
        return Err(usage("need near < far"));
    }
    let (w, h) = (camera.width(), camera.height());
    let segments = ((far - near) / step).ceil() as usize;
    let dt = (far - near) / segments as f64;
    let mut out = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let ray = camera.pixel_ray(x, y);
            let mut trans = 1.0;
            let mut rgb = [0.0; 3];
            for s in 0..segments {
                let p = ray.at(near + (s as f64 + 0.5) * dt);
                let sigma = scene.density(p);
                if sigma == 0.0 {
                    continue;
                }
                let alpha = 1.0 - (-sigma * dt).exp();
                let c = scene.color(p, ray.direction);
                for ch in 0..3 {
                    rgb[ch] += trans * alpha * c[ch];
                }
                trans *= 1.0 - alpha;
            }
            for ch in 0..3 {
                out.push(rgb[ch] + trans * background[ch]);
            }
        }
    }
    Ok(Tensor::new(vec![h, w, 3], out))
}

/// Renders `scene` from every camera into a dataset.
pub fn synthetic_dataset(
    scene: &SyntheticScene,
    cameras: &[Camera],
    near: f64,
    far: f64,
    step: f64,
) -> Result<MultiViewDataset> {
    let first = cameras.first().ok_or_else(|| usage("need at least one camera"))?;
    let frames = cameras
        .iter()
        .map(|c| {
            Ok(Frame {
                image: render_scene_analytic(scene, c, near, far, step, [0.0; 3])?,
                camera: *c,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = MultiViewDataset {
        width: first.width(),
        height: first.height(),
        near,
        far,
        frames,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr(w: usize, h: usize) -> Intrinsics {
        Intrinsics {
            fx: 20.0,
            fy: 20.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
        }
    }

    fn identity() -> [[f64; 4]; 4] {
        [[1., 0., 0., 0.], [0., 1., 0., 0.], [0., 0., 1., 0.], [0., 0., 0., 1.]]
    }

    #[test]
    fn principal_ray_of_identity_pose() {
        let cam = Camera::new(intr(16, 12), identity()).unwrap();
        let r = cam.generate_ray(8.0, 6.0).unwrap();
        assert_eq!(r.direction, [0.0, 0.0, -1.0]);
        assert_eq!(r.origin, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn rotated_half_turn_about_y_looks_forward() {
        // R_y(pi) = diag(-1, 1, -1)
        let mut m = identity();
        m[0][0] = -1.0;
        m[2][2] = -1.0;
        let cam = Camera::new(intr(16, 12), m).unwrap();
        let r = cam.generate_ray(8.0, 6.0).unwrap();
        assert_eq!(r.direction, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        let cam = Camera::new(intr(16, 12), identity()).unwrap();
        assert!(matches!(cam.generate_ray(16.0, 3.0), Err(Error::Usage(_))));
        assert!(matches!(cam.generate_ray(-0.1, 3.0), Err(Error::Usage(_))));
    }

    #[test]
    fn rays_are_unit_and_angle_is_monotone_in_px() {
        let cam = orbit_camera(0.7, 0.3, 4.0, intr(32, 24)).unwrap();
        let center = cam.generate_ray(16.0, 12.0).unwrap().direction;
        let mut prev = -1.0;
        for i in 0..64 {
            let px = 16.0 + i as f64 * 0.25;
            if px >= 32.0 {
                break;
            }
            let d = cam.generate_ray(px, 12.0).unwrap().direction;
            assert!((norm3(d) - 1.0).abs() < 1e-9);
            let angle = dot3(d, center).clamp(-1.0, 1.0).acos();
            assert!(angle >= prev);
            prev = angle;
        }
    }

    #[test]
    fn non_orthonormal_rotation_is_rejected() {
        let mut m = identity();
        m[0][0] = 1.01;
        assert!(matches!(Camera::new(intr(8, 8), m), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_scene_renders_background_exactly() {
        let cam = orbit_camera(0.0, 0.0, 3.0, intr(8, 6)).unwrap();
        let bg = [0.25, 0.5, 0.75];
        let img = render_scene_analytic(&SyntheticScene::Empty, &cam, 1.0, 5.0, 0.1, bg).unwrap();
        for px in img.data().chunks(3) {
            assert_eq!(px, bg);
        }
    }

    #[test]
    fn homogeneous_slab_matches_closed_form() {
        // Identity camera looks down -z; slab occupies z in [-3, -1.5], depth 1.5.
        let cam = Camera::new(intr(1, 1), identity()).unwrap();
        let (sigma, depth) = (0.8, 1.5);
        let c0 = [0.9, 0.3, 0.1];
        let bg = [0.1, 0.2, 0.3];
        let scene = SyntheticScene::Slab { z_min: -3.0, z_max: -1.5, sigma, color: c0 };
        let img = render_scene_analytic(&scene, &cam, 1.0, 4.0, 1e-3, bg).unwrap();
        let t = (-sigma * depth).exp();
        for ch in 0..3 {
            let expected = (1.0 - t) * c0[ch] + t * bg[ch];
            assert!((img.data()[ch] - expected).abs() < 1e-3, "{ch}");
        }
    }

    #[test]
    fn quadrature_converges_under_step_halving() {
        let cam = orbit_camera(0.3, 0.2, 3.5, intr(6, 6)).unwrap();
        let scene = SyntheticScene::SoftSphere { center: [0.0; 3], radius: 1.0, sigma: 1.0, softness: 0.2 };
        let a = render_scene_analytic(&scene, &cam, 1.5, 5.5, 0.02, [0.0; 3]).unwrap();
        let b = render_scene_analytic(&scene, &cam, 1.5, 5.5, 0.01, [0.0; 3]).unwrap();
        assert!(a.zip_map(&b, |x, y| (x - y).abs()).max_abs() < 1e-3);
    }

    #[test]
    fn dataset_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cams = orbit_cameras(3, 4.0, 0.2, 8, 8, 10.0).unwrap();
        let ds = synthetic_dataset(&SyntheticScene::default_sphere(), &cams, 2.0, 6.0, 0.05).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.frames.len(), 3);
        for (a, b) in ds.frames.iter().zip(&back.frames) {
            assert_eq!(a.camera, b.camera);
            assert!(a.image.zip_map(&b.image, |x, y| (x - y).abs()).max_abs() <= 0.5 / 255.0 + 1e-12);
        }

        // a mismatched frame size is a validation error
        let big = Tensor::zeros(&[16, 16, 3]);
        image_io::write_png(&dir.path().join("frame_001.png"), &big).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_directory_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::DatasetFormat(_))));
    }
}
