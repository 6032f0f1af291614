//! Procedural scenes of textured planar patches with exact depth, visibility
//! and pose ground truth.
//!
//! World frame: the canonical source camera sits at the origin looking down
//! `+z`. Every scene holds one large background plane behind all occluder
//! rectangles; occluders float at distinct depths in front of it.

mod dataset;
mod label;

pub use dataset::{
    generate_pair, load_dataset, sample_pairs, save_dataset, DatasetManifest, ManifestEntry, Pair,
    PairConfig, PairRecord,
};
pub use label::{
    estimate_overlap, label_keypoints, oracle_label, sample_keypoints, Keypoint, Label,
    LabeledKeypoint, LabelParams, CYCLE_PIXEL_THRESHOLD,
};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, RigidPose};
use crate::gridio::Grid;
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_layers: usize,
    /// Near and far scene depth; the background sits close to the far end.
    pub depth_range: (f64, f64),
    pub texture_octaves: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_layers: 3,
            depth_range: (2.0, 8.0),
            texture_octaves: 3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::InvalidConfig("n_layers must be at least 1".into()));
        }
        let (near, far) = self.depth_range;
        if !(near > 0.0 && far > near && far.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "depth range ({near}, {far}) must satisfy 0 < near < far"
            )));
        }
        if self.texture_octaves == 0 {
            return Err(Error::InvalidConfig("texture_octaves must be at least 1".into()));
        }
        Ok(())
    }

    /// Width of the depth range, the unit for scene-relative tolerances.
    pub fn scale(&self) -> f64 {
        self.depth_range.1 - self.depth_range.0
    }
}

/// Textured planar rectangle `origin + a u + b v`, `a` in `[extent[0], extent[1]]`,
/// `b` in `[extent[2], extent[3]]`, with `u` and `v` orthonormal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneLayer {
    pub origin: [f64; 3],
    pub axis_u: [f64; 3],
    pub axis_v: [f64; 3],
    pub extent: [f64; 4],
    pub texture_seed: u64,
    /// Texture frequency in cycles per scene unit at the coarsest octave.
    pub frequency: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl PlaneLayer {
    pub fn normal(&self) -> Vector3<f64> {
        Vector3::from(self.axis_u).cross(&Vector3::from(self.axis_v))
    }

    /// Ray parameter of the hit of `c + t d` inside the rectangle, if any.
    pub fn intersect(&self, c: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let n = self.normal();
        let denom = n.dot(d);
        if denom.abs() < 1e-12 {
            return None;
        }
        let o = Vector3::from(self.origin);
        let t = n.dot(&(o - c)) / denom;
        if t <= 1e-9 {
            return None;
        }
        let (a, b) = self.local(&(c + d * t));
        let [a0, a1, b0, b1] = self.extent;
        (a >= a0 && a <= a1 && b >= b0 && b <= b1).then_some(t)
    }

    /// In-plane coordinates of a world point.
    pub fn local(&self, x: &Vector3<f64>) -> (f64, f64) {
        let r = x - Vector3::from(self.origin);
        (r.dot(&Vector3::from(self.axis_u)), r.dot(&Vector3::from(self.axis_v)))
    }

    /// Signed distance of a world point to the plane.
    pub fn distance(&self, x: &Vector3<f64>) -> f64 {
        self.normal().dot(&(x - Vector3::from(self.origin)))
    }

    pub fn intensity(&self, x: &Vector3<f64>, octaves: usize) -> f64 {
        let (a, b) = self.local(x);
        let n = fbm(self.texture_seed, a * self.frequency, b * self.frequency, octaves);
        (self.brightness + self.contrast * (n - 0.5)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub config: SceneConfig,
    /// Layer 0 is the background.
    pub layers: Vec<PlaneLayer>,
}

impl Scene {
    /// Nearest surface hit along a ray: `(layer index, ray parameter)`.
    pub fn cast(&self, c: &Vector3<f64>, d: &Vector3<f64>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(t) = layer.intersect(c, d) {
                if best.is_none_or(|(_, bt)| t < bt) {
                    best = Some((i, t));
                }
            }
        }
        best
    }
}

/// Rendered grayscale image, z-buffer depth and surface ids of one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub image: Grid,
    /// Camera-frame depth per pixel center; 0 marks an invalid pixel.
    pub depth: Grid,
    /// Index of the winning layer per pixel.
    pub surface: Vec<u16>,
    pub camera: CameraModel<f64>,
    /// World to camera.
    pub pose: RigidPose<f64>,
}

impl RenderedView {
    pub fn depth_at(&self, col: usize, row: usize) -> f64 {
        f64::from(self.depth.get(row, col))
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.pose.rotation.transpose() * self.pose.translation)
    }

    /// World-frame direction of the ray through pixel `p`, scaled so its
    /// camera-frame z component is 1 (the ray parameter is then the depth).
    pub fn ray(&self, p: &Vector2<f64>) -> Vector3<f64> {
        self.pose.rotation.transpose() * self.camera.unproject(p)
    }
}

/// Deterministic scene from `seed`: a textured background plane near the far
/// end of the depth range plus `n_layers - 1` occluder rectangles at distinct
/// depths inside the view of the canonical camera.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (near, far) = config.depth_range;
    let span = far - near;

    let mut layers = Vec::with_capacity(config.n_layers);
    let bg_depth = far - span * rng.gen_range(0.05..0.15);
    let tilt = Vector3::new(rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25), 0.0);
    layers.push(textured_layer(
        &mut rng,
        Vector3::new(0.0, 0.0, bg_depth),
        &tilt,
        [-1e3, 1e3, -1e3, 1e3],
        0.6,
    ));

    // Occluders get distinct depths with a gap of at least 5% of the span.
    let lo = near + 0.1 * span;
    let hi = bg_depth - 0.15 * span;
    let mut depths: Vec<f64> = Vec::with_capacity(config.n_layers - 1);
    let min_gap = 0.05 * span;
    let mut attempts = 0;
    while depths.len() + 1 < config.n_layers {
        let z = rng.gen_range(lo..hi);
        attempts += 1;
        // crowded configurations fall back to merely distinct depths
        if attempts > 1000 || depths.iter().all(|d| (d - z).abs() >= min_gap) {
            depths.push(z);
        }
    }
    for z in depths {
        // centered inside the canonical frustum (half-width about 0.5 z)
        let cx = rng.gen_range(-0.35..0.35) * z;
        let cy = rng.gen_range(-0.3..0.3) * z;
        let half_w = rng.gen_range(0.08..0.25) * z;
        let half_h = rng.gen_range(0.08..0.25) * z;
        let tilt = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.5..0.5));
        layers.push(textured_layer(
            &mut rng,
            Vector3::new(cx, cy, z),
            &tilt,
            [-half_w, half_w, -half_h, half_h],
            1.4,
        ));
    }
    Ok(Scene {
        seed,
        config: config.clone(),
        layers,
    })
}

fn textured_layer(
    rng: &mut ChaCha8Rng,
    origin: Vector3<f64>,
    axis_angle: &Vector3<f64>,
    extent: [f64; 4],
    frequency: f64,
) -> PlaneLayer {
    let r = RigidPose::from_axis_angle(*axis_angle, Vector3::zeros()).rotation;
    let u = r.column(0).into_owned();
    let v = r.column(1).into_owned();
    PlaneLayer {
        origin: origin.into(),
        axis_u: u.into(),
        axis_v: v.into(),
        extent,
        texture_seed: rng.gen(),
        frequency: frequency * rng.gen_range(0.8..1.25),
        brightness: rng.gen_range(0.3..0.7),
        contrast: rng.gen_range(0.6..1.0),
    }
}

/// Renders the scene through the pixel centers of `camera` at world-to-camera
/// `pose`.
pub fn render_view(scene: &Scene, camera: &CameraModel<f64>, pose: &RigidPose<f64>) -> Result<RenderedView> {
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let mut view = RenderedView {
        image: Grid::new(h, w, vec![0.0; w * h])?,
        depth: Grid::new(h, w, vec![0.0; w * h])?,
        surface: vec![0; w * h],
        camera: *camera,
        pose: *pose,
    };
    let c = view.camera_center();
    for row in 0..h {
        for col in 0..w {
            let p = Vector2::new(col as f64 + 0.5, row as f64 + 0.5);
            let d = view.ray(&p);
            let (id, t) = scene
                .cast(&c, &d)
                .ok_or(Error::UncoveredFrustum { x: col, y: row })?;
            let x = c + d * t;
            let i = row * w + col;
            view.image.data[i] = scene.layers[id].intensity(&x, scene.config.texture_octaves) as f32;
            view.depth.data[i] = t as f32;
            view.surface[i] = id as u16;
        }
    }
    Ok(view)
}

/// Fractal sum of value noise, normalized to `[0, 1]`.
fn fbm(seed: u64, x: f64, y: f64, octaves: usize) -> f64 {
    let (mut sum, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, 1.0);
    for o in 0..octaves {
        sum += amp * value_noise(seed.wrapping_add(o as u64), x * freq, y * freq);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (u, v) = (smooth(x - fx), smooth(y - fy));
    let l = |dx: i64, dy: i64| lattice(seed, ix + dx, iy + dy);
    let top = l(0, 0) + u * (l(1, 0) - l(0, 0));
    let bottom = l(0, 1) + u * (l(1, 1) - l(0, 1));
    top + v * (bottom - top)
}

/// Uniform value in `[0, 1)` attached to an integer lattice point.
fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let mut z = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// The 64x48 camera used throughout the experiments: 58 degree horizontal
/// field of view, principal point at the image center.
pub fn default_camera() -> CameraModel<f64> {
    CameraModel::from_fov(64, 48, 58.0).expect("valid camera")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn fronto(z: f64) -> Scene {
        Scene {
            seed: 0,
            config: SceneConfig {
                n_layers: 1,
                ..SceneConfig::default()
            },
            layers: vec![PlaneLayer {
                origin: [0.0, 0.0, z],
                axis_u: [1.0, 0.0, 0.0],
                axis_v: [0.0, 1.0, 0.0],
                extent: [-1e3, 1e3, -1e3, 1e3],
                texture_seed: 3,
                frequency: 1.0,
                brightness: 0.5,
                contrast: 0.8,
            }],
        }
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(9, &cfg).unwrap(), generate_scene(9, &cfg).unwrap());
        assert_ne!(generate_scene(9, &cfg).unwrap(), generate_scene(10, &cfg).unwrap());
        let bad = SceneConfig {
            n_layers: 0,
            ..cfg
        };
        assert!(matches!(generate_scene(1, &bad), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        let v = render_view(&fronto(2.0), &default_camera(), &RigidPose::identity()).unwrap();
        assert!(v.depth.data.iter().all(|&d| d == 2.0));
        assert!(v.image.data.iter().all(|&i| (0.0..=1.0).contains(&i)));
    }

    #[test]
    fn left_half_occluder_is_nearer() {
        let mut s = fronto(6.0);
        let mut occ = s.layers[0].clone();
        occ.origin = [-50.0, 0.0, 3.0];
        occ.extent = [-50.0, 50.0, -50.0, 50.0];
        s.layers.push(occ);
        let cam = default_camera();
        let v = render_view(&s, &cam, &RigidPose::identity()).unwrap();
        for row in 0..cam.height {
            for col in 0..cam.width / 2 {
                assert!(v.depth_at(col, row) < v.depth_at(col + cam.width / 2, row));
            }
        }
    }

    #[test]
    fn uncovered_frustum_is_reported() {
        let mut s = fronto(2.0);
        s.layers[0].extent = [-0.1, 0.1, -0.1, 0.1];
        assert!(matches!(
            render_view(&s, &default_camera(), &RigidPose::identity()),
            Err(Error::UncoveredFrustum { .. })
        ));
    }

    #[test]
    fn depths_reproject_onto_their_surfaces() {
        let cfg = SceneConfig::default();
        for seed in 0..5 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let pose = RigidPose::from_axis_angle(Vector3::new(0.05, -0.1, 0.02), Vector3::new(0.3, -0.1, 0.2));
            let v = render_view(&scene, &default_camera(), &pose).unwrap();
            let c = v.camera_center();
            for row in 0..v.camera.height {
                for col in 0..v.camera.width {
                    let p = Vector2::new(col as f64 + 0.5, row as f64 + 0.5);
                    let x = c + v.ray(&p) * v.depth_at(col, row);
                    let layer = &scene.layers[v.surface[row * v.camera.width + col] as usize];
                    assert!(layer.distance(&x).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn two_layer_scene_shows_both_surfaces_at_boundaries() {
        let cfg = SceneConfig {
            n_layers: 2,
            ..SceneConfig::default()
        };
        let scene = generate_scene(1, &cfg).unwrap();
        let cam = default_camera();
        let v = render_view(&scene, &cam, &RigidPose::identity()).unwrap();
        // ids found on either side of a horizontal or vertical z-buffer edge
        let mut boundary = BTreeSet::new();
        let id = |r: usize, c: usize| v.surface[r * cam.width + c];
        for r in 0..cam.height {
            for c in 0..cam.width {
                if c + 1 < cam.width && id(r, c) != id(r, c + 1) {
                    boundary.extend([id(r, c), id(r, c + 1)]);
                }
                if r + 1 < cam.height && id(r, c) != id(r + 1, c) {
                    boundary.extend([id(r, c), id(r + 1, c)]);
                }
            }
        }
        assert_eq!(boundary.len(), 2);
    }

    #[test]
    fn noise_is_bounded_and_continuous() {
        for i in 0..1000 {
            let x = i as f64 * 0.137 - 40.0;
            let y = i as f64 * 0.071 - 20.0;
            let n = fbm(5, x, y, 3);
            assert!((0.0..=1.0).contains(&n));
            assert!((fbm(5, x + 1e-7, y, 3) - n).abs() < 1e-5);
        }
    }
}
