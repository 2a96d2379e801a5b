//! Procedural scenes with analytic density and color, a reference renderer,
//! and dataset emission.
//!
//! Solids have constant density, so the optical depth of any ray segment is a
//! sum of chord overlaps and can be computed exactly. The reference renderer
//! integrates over fixed steps using those exact per-step depths.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{subpixel_ray, CameraPose, Intrinsics, Ray};
use crate::dataset::{save_dataset, SceneDataset};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::image::ImageBuffer;
use crate::render::RadianceField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: Vec3 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: Vec3,
    pub density: f64,
    pub albedo: [f64; 3],
}

impl Primitive {
    pub fn sphere(center: Vec3, radius: f64, density: f64, albedo: [f64; 3]) -> Self {
        Self { shape: Shape::Sphere { radius }, center, density, albedo }
    }

    pub fn cuboid(center: Vec3, half_extents: Vec3, density: f64, albedo: [f64; 3]) -> Self {
        Self { shape: Shape::Box { half_extents }, center, density, albedo }
    }

    pub fn contains(&self, x: Vec3) -> bool {
        let d = x - self.center;
        match self.shape {
            Shape::Sphere { radius } => d.norm_squared() <= radius * radius,
            Shape::Box { half_extents: h } => d.x.abs() <= h.x && d.y.abs() <= h.y && d.z.abs() <= h.z,
        }
    }

    pub fn bounds(&self) -> Aabb {
        let h = match self.shape {
            Shape::Sphere { radius } => Vec3::splat(radius),
            Shape::Box { half_extents } => half_extents,
        };
        Aabb::new(self.center - h, self.center + h)
    }

    /// Parameter interval `[t0, t1]` where the line `o + t d` is inside.
    pub fn chord(&self, o: Vec3, d: Vec3) -> Option<(f64, f64)> {
        let oc = o - self.center;
        match self.shape {
            Shape::Sphere { radius } => {
                let a = d.norm_squared();
                let b = oc.dot(d);
                let disc = b * b - a * (oc.norm_squared() - radius * radius);
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some(((-b - s) / a, (-b + s) / a))
            }
            Shape::Box { half_extents: h } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for a in 0..3 {
                    if d[a] == 0.0 {
                        if oc[a].abs() > h[a] {
                            return None;
                        }
                        continue;
                    }
                    let u = (-h[a] - oc[a]) / d[a];
                    let v = (h[a] - oc[a]) / d[a];
                    t0 = t0.max(u.min(v));
                    t1 = t1.min(u.max(v));
                }
                (t1 > t0).then_some((t0, t1))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
}

impl AnalyticScene {
    pub fn new(primitives: Vec<Primitive>, background: [f64; 3]) -> Result<Self> {
        for (i, p) in primitives.iter().enumerate() {
            let size_ok = match p.shape {
                Shape::Sphere { radius } => radius > 0.0 && radius.is_finite(),
                Shape::Box { half_extents } => half_extents.is_finite() && half_extents.min_element() > 0.0,
            };
            if !(p.density >= 0.0 && p.density.is_finite()) || !size_ok || !p.center.is_finite() {
                return Err(Error::Config(format!("primitive {i} has invalid size or density")));
            }
            if p.albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Config(format!("primitive {i} albedo outside [0, 1]")));
            }
        }
        Ok(Self { primitives, background })
    }

    pub fn empty(background: [f64; 3]) -> Self {
        Self { primitives: Vec::new(), background }
    }

    /// A wall splitting the scene along x with one sphere in front of it
    /// (on +x) and two behind it. Cameras on the +x side see only the red
    /// sphere; cameras on the −x side see only the other two.
    pub fn desk() -> Self {
        Self {
            primitives: vec![
                Primitive::cuboid(Vec3::ZERO, Vec3::new(0.15, 0.9, 0.5), 20.0, [0.30, 0.40, 0.80]),
                Primitive::sphere(Vec3::new(0.55, 0.0, 0.0), 0.3, 15.0, [0.90, 0.15, 0.10]),
                Primitive::sphere(Vec3::new(-0.55, 0.35, -0.1), 0.25, 15.0, [0.20, 0.80, 0.30]),
                Primitive::sphere(Vec3::new(-0.5, -0.4, 0.15), 0.2, 15.0, [0.95, 0.85, 0.20]),
            ],
            background: [1.0; 3],
        }
    }

    /// One semi-transparent sphere at the origin.
    pub fn single_sphere(radius: f64, density: f64, albedo: [f64; 3]) -> Self {
        Self { primitives: vec![Primitive::sphere(Vec3::ZERO, radius, density, albedo)], background: [1.0; 3] }
    }

    /// Total density and density-weighted albedo at `x`. Where nothing is
    /// present the color is the background.
    pub fn query(&self, x: Vec3) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut acc = [0.0; 3];
        for p in &self.primitives {
            if p.density > 0.0 && p.contains(x) {
                sigma += p.density;
                for k in 0..3 {
                    acc[k] += p.density * p.albedo[k];
                }
            }
        }
        if sigma > 0.0 {
            (sigma, acc.map(|v| (v / sigma).clamp(0.0, 1.0)))
        } else {
            (0.0, self.background)
        }
    }

    pub fn bounds(&self) -> Option<Aabb> {
        self.primitives.iter().map(Primitive::bounds).reduce(|a, b| a.union(&b))
    }

    /// Sphere enclosing every primitive.
    pub fn bounding_sphere(&self) -> Option<(Vec3, f64)> {
        let b = self.bounds()?;
        Some((b.center(), b.extent().norm() * 0.5 * (1.0 + 1e-9) + 1e-12))
    }

    /// Renders one ray through the scene with `steps` equal segments across
    /// the bounding sphere, compositing exact per-segment optical depths.
    pub fn reference_ray(&self, ray: &Ray, steps: usize) -> [f64; 3] {
        let Some((center, radius)) = self.bounding_sphere() else {
            return self.background;
        };
        let bound = Primitive::sphere(center, radius, 0.0, [0.0; 3]);
        let Some((t0, t1)) = bound.chord(ray.origin, ray.direction) else {
            return self.background;
        };
        let t0 = t0.max(ray.t_near);
        let t1 = t1.min(ray.t_far);
        if !(t1 > t0) || steps == 0 {
            return self.background;
        }
        let chords: Vec<(f64, f64, &Primitive)> = self
            .primitives
            .iter()
            .filter(|p| p.density > 0.0)
            .filter_map(|p| p.chord(ray.origin, ray.direction).map(|(a, b)| (a, b, p)))
            .collect();
        let dt = (t1 - t0) / steps as f64;
        let mut color = [0.0; 3];
        let mut trans = 1.0;
        for i in 0..steps {
            let s0 = t0 + dt * i as f64;
            let s1 = s0 + dt;
            let mut tau = 0.0;
            let mut acc = [0.0; 3];
            for &(a, b, p) in &chords {
                let overlap = b.min(s1) - a.max(s0);
                if overlap > 0.0 {
                    let d = p.density * overlap;
                    tau += d;
                    for k in 0..3 {
                        acc[k] += d * p.albedo[k];
                    }
                }
            }
            if tau > 0.0 {
                let w = trans * (1.0 - (-tau).exp());
                for k in 0..3 {
                    color[k] += w * acc[k] / tau;
                }
                trans *= (-tau).exp();
            }
        }
        for k in 0..3 {
            color[k] += trans * self.background[k];
        }
        color.map(|c| c.clamp(0.0, 1.0))
    }

    pub fn reference_render(&self, pose: &CameraPose, steps: usize) -> Result<ImageBuffer> {
        let (w, h) = (pose.width(), pose.height());
        let pixels: Vec<[f64; 3]> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (x, y) = (i % w, i / w);
                let ray = subpixel_ray(pose, x as f64 + 0.5, y as f64 + 0.5);
                self.reference_ray(&ray, steps)
            })
            .collect();
        ImageBuffer::from_pixels(w, h, pixels)
    }

    /// Whether primitive `idx` is seen by `pose`: its center projects inside
    /// the image and the sight line to it crosses no other primitive.
    pub fn is_visible(&self, idx: usize, pose: &CameraPose) -> bool {
        let target = &self.primitives[idx];
        let Some((u, v)) = pose.project(target.center) else {
            return false;
        };
        if !(u >= 0.0 && v >= 0.0 && u < pose.width() as f64 && v < pose.height() as f64) {
            return false;
        }
        let to = target.center - pose.center;
        let dist = to.norm();
        let dir = to / dist;
        let hit = target.chord(pose.center, dir).map(|(a, _)| a.max(0.0)).unwrap_or(dist);
        self.primitives.iter().enumerate().filter(|(j, _)| *j != idx).all(|(_, p)| match p.chord(pose.center, dir) {
            Some((a, b)) => b <= 0.0 || a >= hit,
            None => true,
        })
    }
}

impl RadianceField for AnalyticScene {
    fn query(&self, x: Vec3, _dir: Vec3) -> Result<(f64, [f64; 3])> {
        Ok(AnalyticScene::query(self, x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// A ring around the origin with varying elevation.
    Orbit,
    /// Two arcs on opposite sides; the first half of the cameras form cluster A.
    TwoCluster,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orbit" => Ok(Layout::Orbit),
            "two-cluster" => Ok(Layout::TwoCluster),
            other => Err(Error::Config(format!("unknown layout {other:?} (expected orbit or two-cluster)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmitConfig {
    pub n_cameras: usize,
    pub layout: Layout,
    pub width: u32,
    pub height: u32,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    /// Distance of every camera from the origin.
    pub radius: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for EmitConfig {
    fn default() -> Self {
        Self {
            n_cameras: 40,
            layout: Layout::Orbit,
            width: 64,
            height: 64,
            focal_factor: 1.1,
            radius: 2.5,
            steps: 1024,
            seed: 0,
        }
    }
}

/// Half-width of each two-cluster arc, in degrees of azimuth.
pub const ARC_HALF_WIDTH_DEG: f64 = 50.0;
/// Required share of cluster-A cameras that see the exclusive primitive.
pub const EXCLUSIVE_MIN_A: f64 = 0.8;
/// Allowed share of cluster-B cameras that see it.
pub const EXCLUSIVE_MAX_B: f64 = 0.05;

fn spherical(radius: f64, azimuth_deg: f64, elevation_deg: f64) -> Vec3 {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    Vec3::new(radius * el.cos() * az.cos(), radius * el.cos() * az.sin(), radius * el.sin())
}

/// Camera poses for a layout. All cameras look at the origin with +z up.
pub fn layout_poses(cfg: &EmitConfig) -> Result<Vec<CameraPose>> {
    if cfg.n_cameras < 2 {
        return Err(Error::Config("at least 2 cameras are required".into()));
    }
    let k = Intrinsics::centered(cfg.width, cfg.height, cfg.focal_factor * cfg.width as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_cameras;
    let centers: Vec<Vec3> = match cfg.layout {
        Layout::Orbit => {
            let step = 360.0 / n as f64;
            (0..n)
                .map(|i| {
                    let phase = i as f64 / n as f64 * std::f64::consts::TAU;
                    let az = step * i as f64 + rng.gen_range(-0.25..0.25) * step;
                    let el = 20.0 + 12.0 * (3.0 * phase).sin() + rng.gen_range(-2.0..2.0);
                    spherical(cfg.radius, az, el)
                })
                .collect()
        }
        Layout::TwoCluster => {
            let n_a = n.div_ceil(2);
            let arc = |i: usize, count: usize, base: f64, rng: &mut ChaCha8Rng| {
                let f = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.5 };
                let az = base - ARC_HALF_WIDTH_DEG + 2.0 * ARC_HALF_WIDTH_DEG * f + rng.gen_range(-1.0..1.0);
                let el = 15.0 + 5.0 * (f * std::f64::consts::TAU).sin() + rng.gen_range(-1.0..1.0);
                spherical(cfg.radius, az, el)
            };
            let mut v: Vec<Vec3> = (0..n_a).map(|i| arc(i, n_a, 0.0, &mut rng)).collect();
            v.extend((0..n - n_a).map(|i| arc(i, n - n_a, 180.0, &mut rng)));
            v
        }
    };
    centers
        .into_iter()
        .map(|c| CameraPose::look_at(c, Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), k))
        .collect()
}

/// Number of cameras in cluster A for the two-cluster layout.
pub fn cluster_a_len(n_cameras: usize) -> usize {
    n_cameras.div_ceil(2)
}

/// Index of a primitive seen by most cluster-A cameras and almost no cluster-B ones.
pub fn exclusive_primitive(scene: &AnalyticScene, poses: &[CameraPose]) -> Option<usize> {
    let n_a = cluster_a_len(poses.len());
    let (a, b) = poses.split_at(n_a);
    (0..scene.primitives.len()).find(|&i| {
        let fa = a.iter().filter(|p| scene.is_visible(i, p)).count() as f64 / a.len() as f64;
        let fb = b.iter().filter(|p| scene.is_visible(i, p)).count() as f64 / b.len().max(1) as f64;
        fa >= EXCLUSIVE_MIN_A && fb <= EXCLUSIVE_MAX_B
    })
}

/// Renders a dataset in memory.
pub fn generate_dataset(scene: &AnalyticScene, cfg: &EmitConfig) -> Result<SceneDataset> {
    let poses = layout_poses(cfg)?;
    if cfg.layout == Layout::TwoCluster && exclusive_primitive(scene, &poses).is_none() {
        return Err(Error::Config(
            "two-cluster layout: no primitive is visible to cluster A only; adjust the scene".into(),
        ));
    }
    let images = poses.iter().map(|p| scene.reference_render(p, cfg.steps)).collect::<Result<Vec<_>>>()?;
    SceneDataset::new(images, poses, scene.bounds())
}

/// Renders a dataset and writes it to `out`.
pub fn emit_dataset(scene: &AnalyticScene, cfg: &EmitConfig, out: &Path) -> Result<SceneDataset> {
    let ds = generate_dataset(scene, cfg)?;
    save_dataset(&ds, out)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::kmeans_cluster;

    fn small(layout: Layout, n: usize) -> EmitConfig {
        EmitConfig { n_cameras: n, layout, width: 24, height: 24, steps: 256, ..EmitConfig::default() }
    }

    #[test]
    fn query_examples() {
        let s = AnalyticScene::new(
            vec![
                Primitive::sphere(Vec3::ZERO, 1.0, 5.0, [1.0, 0.0, 0.0]),
                Primitive::cuboid(Vec3::new(1.0, 0.0, 0.0), Vec3::splat(0.5), 15.0, [0.0, 0.0, 1.0]),
            ],
            [1.0; 3],
        )
        .unwrap();
        assert_eq!(s.query(Vec3::new(5.0, 5.0, 5.0)), (0.0, [1.0; 3]));
        assert_eq!(s.query(Vec3::new(-0.5, 0.0, 0.0)), (5.0, [1.0, 0.0, 0.0]));
        let (sigma, c) = s.query(Vec3::new(0.8, 0.0, 0.0));
        assert_eq!(sigma, 20.0);
        assert!((c[0] - 0.25).abs() < 1e-15 && c[1] == 0.0 && (c[2] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn invalid_primitives_rejected() {
        assert!(AnalyticScene::new(vec![Primitive::sphere(Vec3::ZERO, 1.0, -1.0, [0.5; 3])], [1.0; 3]).is_err());
        assert!(AnalyticScene::new(vec![Primitive::sphere(Vec3::ZERO, 0.0, 1.0, [0.5; 3])], [1.0; 3]).is_err());
        assert!(AnalyticScene::new(vec![Primitive::sphere(Vec3::ZERO, 1.0, 1.0, [1.5; 3])], [1.0; 3]).is_err());
    }

    #[test]
    fn chords() {
        let s = Primitive::sphere(Vec3::new(0.0, 0.0, 5.0), 1.0, 1.0, [0.0; 3]);
        let (a, b) = s.chord(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((a - 4.0).abs() < 1e-12 && (b - 6.0).abs() < 1e-12);
        assert!(s.chord(Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0)).is_none());
        let bx = Primitive::cuboid(Vec3::new(0.0, 0.0, 5.0), Vec3::new(1.0, 2.0, 0.5), 1.0, [0.0; 3]);
        let (a, b) = bx.chord(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((a - 4.5).abs() < 1e-12 && (b - 5.5).abs() < 1e-12);
        assert!(bx.chord(Vec3::new(3.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 1.0)).is_none());
    }

    #[test]
    fn empty_scene_renders_background() {
        let s = AnalyticScene::empty([0.2, 0.3, 0.4]);
        let pose = layout_poses(&small(Layout::Orbit, 4)).unwrap().remove(0);
        let img = s.reference_render(&pose, 100).unwrap();
        assert!(img.pixels().iter().all(|p| *p == [0.2, 0.3, 0.4]));
    }

    #[test]
    fn opaque_box_projects_to_rectangle() {
        let albedo = [0.2, 0.7, 0.4];
        let s = AnalyticScene::new(
            vec![Primitive::cuboid(Vec3::ZERO, Vec3::new(0.5, 0.3, 0.1), 1e4, albedo)],
            [1.0; 3],
        )
        .unwrap();
        let k = Intrinsics::centered(40, 40, 40.0);
        let pose = CameraPose::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0), k).unwrap();
        let img = s.reference_render(&pose, 1000).unwrap();
        // Front face at depth 2.9 spans |x| ≤ 0.5, |y| ≤ 0.3.
        let (hx, hy) = (40.0 * 0.5 / 2.9, 40.0 * 0.3 / 2.9);
        for y in 0..40u32 {
            for x in 0..40u32 {
                let (u, v) = (x as f64 + 0.5 - 20.0, y as f64 + 0.5 - 20.0);
                let inside = u.abs() < hx - 1.0 && v.abs() < hy - 1.0;
                let outside = u.abs() > hx + 1.0 || v.abs() > hy + 1.0;
                let p = img.get(x, y);
                let expect = if inside {
                    albedo
                } else if outside {
                    [1.0; 3]
                } else {
                    continue;
                };
                for c in 0..3 {
                    assert!((p[c] - expect[c]).abs() < 1e-9, "pixel ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn quadrature_converges() {
        let scene = AnalyticScene::desk();
        let pose = layout_poses(&small(Layout::Orbit, 4)).unwrap().remove(1);
        let coarse = scene.reference_render(&pose, 1000).unwrap();
        let fine = scene.reference_render(&pose, 4000).unwrap();
        assert!(coarse.max_abs_diff(&fine) <= 1.0 / 255.0);
    }

    #[test]
    fn orbit_radius_constant() {
        let poses = layout_poses(&EmitConfig { n_cameras: 40, ..EmitConfig::default() }).unwrap();
        assert_eq!(poses.len(), 40);
        for p in &poses {
            assert!((p.center.norm() - 2.5).abs() < 1e-9);
        }
    }

    #[test]
    fn two_cluster_recovered_and_exclusive() {
        let cfg = EmitConfig { layout: Layout::TwoCluster, ..EmitConfig::default() };
        let poses = layout_poses(&cfg).unwrap();
        let centers: Vec<Vec3> = poses.iter().map(|p| p.center).collect();
        let labels = kmeans_cluster(&centers, 2, 7).unwrap().labels;
        let n_a = cluster_a_len(40);
        assert!(labels[..n_a].iter().all(|l| *l == labels[0]));
        assert!(labels[n_a..].iter().all(|l| *l == labels[n_a]));
        assert_ne!(labels[0], labels[n_a]);
        assert_eq!(exclusive_primitive(&AnalyticScene::desk(), &poses), Some(1));
    }

    #[test]
    fn emit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = AnalyticScene::desk();
        let ds = emit_dataset(&scene, &small(Layout::TwoCluster, 6), dir.path()).unwrap();
        let back = crate::dataset::load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 6);
        for (a, b) in ds.poses.iter().zip(&back.poses) {
            assert!((a.center - b.center).norm() < 1e-6);
            assert!(a.rotation.rows.iter().flatten().zip(b.rotation.rows.iter().flatten()).all(|(x, y)| (x - y).abs() < 1e-6));
        }
        for (a, b) in ds.images.iter().zip(&back.images) {
            assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-12);
        }
    }
}
