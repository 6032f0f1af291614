//! Pair generation, overlap-stratified pair sampling and the on-disk dataset
//! layout.
//!
//! A dataset directory holds `manifest.json` plus, per pair, `<name>.json`
//! (scene, cameras, poses, labeled keypoints) and four grid files
//! `<name>_{src,tgt}_{image,depth}.grid`.

use super::label::{estimate_overlap, label_keypoints, sample_keypoints, LabelParams, LabeledKeypoint};
use super::{default_camera, generate_scene, render_view, RenderedView, Scene, SceneConfig};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, PoseRecord, RigidPose};
use crate::gridio::{read_grid, write_grid};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairConfig {
    pub scene: SceneConfig,
    pub camera: CameraModel<f64>,
    /// Keypoint grid spacing in pixels.
    pub keypoint_cell: usize,
    /// Depth slope (scene units per pixel) above which a keypoint is dropped.
    pub depth_grad_max: f64,
    /// Draw each keypoint at a random pixel of its block instead of the
    /// block center.
    pub keypoint_jitter: bool,
    /// Largest orbit of the target camera around the scene pivot.
    pub max_orbit_deg: f64,
    /// Largest extra rotation of the target viewing direction.
    pub max_look_deg: f64,
    /// Overlap bin edges; pairs outside `[first, last]` are rejected.
    pub overlap_bins: Vec<f64>,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            camera: default_camera(),
            keypoint_cell: 4,
            depth_grad_max: 0.1,
            keypoint_jitter: true,
            max_orbit_deg: 35.0,
            max_look_deg: 45.0,
            overlap_bins: vec![0.02, 0.2, 0.4, 0.6, 0.8],
        }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.camera.validate()?;
        if self.keypoint_cell == 0 {
            return Err(Error::InvalidConfig("keypoint_cell must be positive".into()));
        }
        let bins = &self.overlap_bins;
        if bins.len() < 2 || bins.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidConfig(
                "overlap_bins must hold at least two increasing edges".into(),
            ));
        }
        Ok(())
    }

    pub fn label_params(&self) -> LabelParams {
        LabelParams::for_scale(self.scene.scale())
    }

    /// Bin index of an overlap value, `None` outside the binned range.
    pub fn overlap_bin(&self, overlap: f64) -> Option<usize> {
        let b = &self.overlap_bins;
        if overlap < b[0] || overlap > b[b.len() - 1] {
            return None;
        }
        Some(b.windows(2).position(|w| overlap < w[1]).unwrap_or(b.len() - 2))
    }
}

/// Source and target views of one scene with source keypoints labeled
/// against the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub seed: u64,
    pub scene: Scene,
    pub source: RenderedView,
    pub target: RenderedView,
    pub keypoints: Vec<LabeledKeypoint>,
    pub overlap: f64,
}

impl Pair {
    /// Relative pose mapping source-camera points to target-camera points.
    pub fn pose_ts(&self) -> RigidPose<f64> {
        self.target.pose.compose(&self.source.pose.inverse())
    }
}

/// Pair from `seed`: the scene seen by the canonical camera and by a camera
/// orbiting a pivot at mid-depth with an extra random viewing rotation.
pub fn generate_pair(seed: u64, config: &PairConfig) -> Result<Pair> {
    config.validate()?;
    let scene = generate_scene(seed, &config.scene)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_C3C3_3C3C);
    let (near, far) = config.scene.depth_range;
    let pivot = Vector3::new(0.0, 0.0, 0.5 * (near + far));
    // a per-pair motion magnitude spreads the overlap over the whole range
    let magnitude = rng.gen_range(0.1..1.0);
    let deg = |max: f64, rng: &mut ChaCha8Rng| (magnitude * rng.gen_range(-max..=max)).to_radians();

    let orbit = RigidPose::from_axis_angle(
        Vector3::new(
            deg(config.max_orbit_deg * 0.5, &mut rng),
            deg(config.max_orbit_deg, &mut rng),
            deg(5.0, &mut rng),
        ),
        Vector3::zeros(),
    )
    .rotation;
    let look = RigidPose::from_axis_angle(
        Vector3::new(
            deg(config.max_look_deg * 0.5, &mut rng),
            deg(config.max_look_deg, &mut rng),
            0.0,
        ),
        Vector3::zeros(),
    )
    .rotation;
    let jitter = Vector3::new(
        rng.gen_range(-0.3..0.3),
        rng.gen_range(-0.2..0.2),
        rng.gen_range(-0.5..0.5),
    ) * magnitude;
    let center = pivot - orbit * pivot + jitter;
    let r_cw = orbit * look;
    let rotation = r_cw.transpose();
    let target_pose = RigidPose::new(rotation, -(rotation * center))?;

    let source = render_view(&scene, &config.camera, &RigidPose::identity())?;
    let target = render_view(&scene, &config.camera, &target_pose)?;
    let params = config.label_params();
    let kps = sample_keypoints(
        &source,
        config.keypoint_cell,
        config.depth_grad_max,
        config.keypoint_jitter.then(|| rng.gen()),
    );
    let keypoints = label_keypoints(&source, &target, &kps, &params);
    let overlap = estimate_overlap(&source, &target, config.keypoint_cell, &params);
    Ok(Pair {
        seed,
        scene,
        source,
        target,
        keypoints,
        overlap,
    })
}

/// Draws `count` pairs whose overlaps fill the configured bins as evenly as
/// possible. Candidate seeds come from a stream seeded by `seed`; candidates
/// with uncovered frusta or out-of-range overlap are skipped.
pub fn sample_pairs(seed: u64, count: usize, config: &PairConfig) -> Result<Vec<Pair>> {
    config.validate()?;
    let n_bins = config.overlap_bins.len() - 1;
    let quota = count.div_ceil(n_bins);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut filled = vec![0usize; n_bins];
    let mut pairs = Vec::with_capacity(count);
    let mut spare = Vec::new();
    let max_attempts = 40 * count.max(1);
    for _ in 0..max_attempts {
        if pairs.len() == count {
            break;
        }
        let Ok(pair) = generate_pair(rng.gen(), config) else { continue };
        let Some(bin) = config.overlap_bin(pair.overlap) else { continue };
        if filled[bin] < quota {
            filled[bin] += 1;
            pairs.push(pair);
        } else if spare.len() < count {
            spare.push(pair);
        }
    }
    let missing = count - pairs.len();
    pairs.extend(spare.into_iter().take(missing));
    if pairs.len() < count {
        return Err(Error::InvalidConfig(format!(
            "only {} of {count} pairs fall inside the overlap bins",
            pairs.len()
        )));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub overlap: f64,
    pub bin: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: PairConfig,
    pub pairs: Vec<ManifestEntry>,
}

/// Per-pair JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub seed: u64,
    pub scene: Scene,
    pub source_camera: CameraModel<f64>,
    pub target_camera: CameraModel<f64>,
    /// World to camera.
    pub source_pose: PoseRecord,
    pub target_pose: PoseRecord,
    pub keypoints: Vec<LabeledKeypoint>,
    pub overlap: f64,
}

fn pair_name(i: usize) -> String {
    format!("pair_{i:05}")
}

/// Writes pairs and a manifest into `dir`, creating it if needed.
pub fn save_dataset(dir: &Path, pairs: &[Pair], config: &PairConfig) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let name = pair_name(i);
        let record = PairRecord {
            seed: p.seed,
            scene: p.scene.clone(),
            source_camera: p.source.camera,
            target_camera: p.target.camera,
            source_pose: PoseRecord::from(&p.source.pose),
            target_pose: PoseRecord::from(&p.target.pose),
            keypoints: p.keypoints.clone(),
            overlap: p.overlap,
        };
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join(format!("{name}.json")))?), &record)?;
        for (tag, view) in [("src", &p.source), ("tgt", &p.target)] {
            for (kind, grid) in [("image", &view.image), ("depth", &view.depth)] {
                let mut w = BufWriter::new(File::create(dir.join(format!("{name}_{tag}_{kind}.grid")))?);
                write_grid(&mut w, grid)?;
            }
        }
        entries.push(ManifestEntry {
            name,
            seed: p.seed,
            overlap: p.overlap,
            bin: config.overlap_bin(p.overlap),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        config: config.clone(),
        pairs: entries,
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("manifest.json"))?), &manifest)?;
    Ok(manifest)
}

/// Reads a dataset written by [`save_dataset`]. Surface-id buffers are not
/// persisted and come back empty.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Pair>)> {
    let manifest: DatasetManifest =
        serde_json::from_reader(BufReader::new(File::open(dir.join("manifest.json"))?))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
    }
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for e in &manifest.pairs {
        let record: PairRecord =
            serde_json::from_reader(BufReader::new(File::open(dir.join(format!("{}.json", e.name)))?))?;
        let load_view = |tag: &str, camera: CameraModel<f64>, pose: &PoseRecord| -> Result<RenderedView> {
            let grid = |kind: &str| -> Result<_> {
                read_grid(&mut BufReader::new(File::open(dir.join(format!("{}_{tag}_{kind}.grid", e.name)))?))
            };
            let (image, depth) = (grid("image")?, grid("depth")?);
            if (image.width, image.height) != (camera.width, camera.height) || depth.data.len() != image.data.len() {
                return Err(Error::Format(format!("{} {tag} grids do not match the camera", e.name)));
            }
            Ok(RenderedView {
                image,
                depth,
                surface: Vec::new(),
                camera,
                pose: pose.to_pose()?,
            })
        };
        pairs.push(Pair {
            seed: record.seed,
            source: load_view("src", record.source_camera, &record.source_pose)?,
            target: load_view("tgt", record.target_camera, &record.target_pose)?,
            scene: record.scene,
            keypoints: record.keypoints,
            overlap: record.overlap,
        });
    }
    Ok((manifest, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{oracle_label, Label};

    #[test]
    fn overlap_bins() {
        let c = PairConfig::default();
        assert_eq!(c.overlap_bin(0.01), None);
        assert_eq!(c.overlap_bin(0.02), Some(0));
        assert_eq!(c.overlap_bin(0.5), Some(2));
        assert_eq!(c.overlap_bin(0.8), Some(3));
        assert_eq!(c.overlap_bin(0.81), None);
    }

    #[test]
    fn pairs_are_deterministic() {
        let c = PairConfig::default();
        let seed = (17..).find(|&s| generate_pair(s, &c).is_ok()).unwrap();
        let a = generate_pair(seed, &c).unwrap();
        let b = generate_pair(seed, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampler_spreads_overlaps() {
        let c = PairConfig::default();
        let pairs = sample_pairs(5, 16, &c).unwrap();
        let mut filled = vec![0; 4];
        for p in &pairs {
            filled[c.overlap_bin(p.overlap).unwrap()] += 1;
        }
        assert!(filled.iter().filter(|&&n| n > 0).count() >= 3, "{filled:?}");
    }

    #[test]
    fn all_labels_occur() {
        let c = PairConfig::default();
        let pairs = sample_pairs(1, 8, &c).unwrap();
        for l in Label::ALL {
            assert!(pairs.iter().flat_map(|p| &p.keypoints).any(|k| k.label == l), "{l:?}");
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = PairConfig::default();
        let pairs = sample_pairs(2, 2, &c).unwrap();
        let written = save_dataset(dir.path(), &pairs, &c).unwrap();
        let (manifest, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest, written);
        for (a, b) in pairs.iter().zip(&loaded) {
            assert_eq!(a.keypoints, b.keypoints);
            assert_eq!(a.source.image, b.source.image);
            assert_eq!(a.target.depth, b.target.depth);
            assert_eq!(a.pose_ts(), b.pose_ts());
            assert_eq!(a.scene, b.scene);
        }
    }

    #[test]
    fn oracle_agreement_over_random_pairs() {
        let c = PairConfig::default();
        let (mut agree, mut total) = (0usize, 0usize);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut done = 0;
        while done < 100 {
            let Ok(p) = generate_pair(rng.gen(), &c) else { continue };
            done += 1;
            for k in &p.keypoints {
                total += 1;
                agree += usize::from(oracle_label(&p.scene, &p.source, &p.target, &k.keypoint) == k.label);
            }
        }
        let rate = agree as f64 / total as f64;
        assert!(rate >= 0.99, "agreement {rate} over {total} keypoints");
    }
}
