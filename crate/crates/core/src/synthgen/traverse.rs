use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::frame::{sample_frame, speckle_point, EnvironmentPreset, BASE_RANGE};
use super::scene::SENSOR_HEIGHT;
use super::scene::Scene;
use crate::error::{invalid, Result};
use crate::geometry::{EulerZyx, PointCloud, RigidTransform};
use crate::io::{self, DatasetManifest, ManifestRow};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraverseConfig {
    /// Route distance between consecutive frames, meters.
    pub frame_spacing: f64,
    pub n_points: usize,
    pub seed: u64,
    /// Sensor-frame coordinates are divided by this before storage.
    pub normalization_range: f64,
}

impl Default for TraverseConfig {
    fn default() -> Self {
        Self {
            frame_spacing: 20.0,
            n_points: 4096,
            seed: 0,
            normalization_range: BASE_RANGE,
        }
    }
}

/// Arc lengths of the frames along a route of `length`.
pub fn frame_positions(length: f64, spacing: f64) -> Vec<f64> {
    let count = (length / spacing + 1e-9).floor() as usize;
    (0..count).map(|i| i as f64 * spacing).collect()
}

/// Deterministic per-frame generator stream.
pub fn frame_rng(seed: u64, frame_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_id);
    rng
}

/// All frames of a traverse, normalized, without touching the disk.
///
/// Frame ids are preset-major: `preset_index * positions + position_index`.
pub fn generate_frames(scene: &Scene, presets: &[EnvironmentPreset], cfg: &TraverseConfig) -> Result<Vec<PointCloud>> {
    if !(cfg.frame_spacing > 0.0) {
        return invalid("frame spacing must be positive");
    }
    if presets.is_empty() {
        return invalid("at least one environment preset is required");
    }
    let positions = frame_positions(scene.route().length, cfg.frame_spacing);
    let jobs: Vec<(usize, usize)> = (0..presets.len())
        .flat_map(|p| (0..positions.len()).map(move |i| (p, i)))
        .collect();
    jobs.par_iter()
        .map(|&(p, i)| {
            let frame_id = (p * positions.len() + i) as u64;
            let s = positions[i];
            let pose = scene.sensor_pose(s);
            let mut rng = frame_rng(cfg.seed, frame_id);
            let mut cloud = sample_frame(scene, &pose, &presets[p], cfg.n_points, &mut rng)?;
            cloud.frame_id = frame_id;
            cloud.route_s = s;
            cloud.normalized(cfg.normalization_range)
        })
        .collect()
}

/// Writes `clouds/*.vpc`, `poses/*.txt` and `manifest.csv` under `out_dir`.
/// Manifest paths are relative to `out_dir`.
pub fn generate_traverse(
    scene: &Scene,
    presets: &[EnvironmentPreset],
    cfg: &TraverseConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let frames = generate_frames(scene, presets, cfg)?;
    write_traverse(&frames, out_dir)
}

pub fn write_traverse(frames: &[PointCloud], out_dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(out_dir.join("clouds"))?;
    fs::create_dir_all(out_dir.join("poses"))?;
    let mut rows = Vec::with_capacity(frames.len());
    for f in frames {
        let path = format!("clouds/{:06}.vpc", f.frame_id);
        let pose_path = format!("poses/{:06}.txt", f.frame_id);
        let pose = f.pose.unwrap_or_default();
        io::write_vpc(&out_dir.join(&path), f)?;
        io::write_pose(&out_dir.join(&pose_path), &pose)?;
        rows.push(ManifestRow {
            frame_id: f.frame_id,
            path,
            environment: f.environment.name().to_string(),
            route_s: f.route_s,
            x: pose.translation.x,
            y: pose.translation.y,
            z: pose.translation.z,
            pose_path,
        });
    }
    io::write_manifest(&out_dir.join("manifest.csv"), &rows)?;
    Ok(DatasetManifest {
        root: out_dir.to_path_buf(),
        rows,
    })
}

/// Closed sampling interval, degrees or normalized units.
pub type Interval = (f64, f64);

/// Per-axis Euler sampling ranges, degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerRanges {
    pub roll: Interval,
    pub pitch: Interval,
    pub yaw: Interval,
}

impl EulerRanges {
    /// ±5° roll, ±5° pitch, ±35° yaw.
    pub fn evaluation() -> Self {
        Self {
            roll: (-5.0, 5.0),
            pitch: (-5.0, 5.0),
            yaw: (-35.0, 35.0),
        }
    }

    pub fn zero() -> Self {
        Self {
            roll: (0.0, 0.0),
            pitch: (0.0, 0.0),
            yaw: (0.0, 0.0),
        }
    }
}

/// Default per-axis translation range for registration pairs, normalized units.
pub const DEFAULT_TRANSLATION_RANGE: Interval = (-0.5, 0.5);

#[derive(Debug, Clone)]
pub struct RegistrationPair {
    pub source: PointCloud,
    pub target: PointCloud,
    /// Maps `source` onto `target`.
    pub truth: RigidTransform,
    /// Every target point expressed in the source frame (`truth⁻¹ · q`).
    pub target_in_source: Vec<Vector3<f64>>,
}

fn check_interval(iv: Interval, what: &str) -> Result<()> {
    if !(iv.0.is_finite() && iv.1.is_finite() && iv.0 <= iv.1) {
        return invalid(format!("{what} range must be a finite, non-empty interval"));
    }
    Ok(())
}

fn draw<R: Rng + ?Sized>(iv: Interval, rng: &mut R) -> f64 {
    if iv.0 == iv.1 {
        iv.0
    } else {
        rng.random_range(iv.0..=iv.1)
    }
}

/// Random rigid motion of a normalized frame: `target = R · source + t`.
pub fn make_registration_pair<R: Rng + ?Sized>(
    frame: &PointCloud,
    ranges: &EulerRanges,
    trans_range: Interval,
    rng: &mut R,
) -> Result<RegistrationPair> {
    check_interval(ranges.roll, "roll")?;
    check_interval(ranges.pitch, "pitch")?;
    check_interval(ranges.yaw, "yaw")?;
    check_interval(trans_range, "translation")?;
    if !frame.is_normalized() {
        return invalid("registration pairs are built from normalized frames");
    }
    let yaw = draw(ranges.yaw, rng);
    let pitch = draw(ranges.pitch, rng);
    let roll = draw(ranges.roll, rng);
    let t = Vector3::new(draw(trans_range, rng), draw(trans_range, rng), draw(trans_range, rng));
    let truth = RigidTransform::from_euler(EulerZyx::new(yaw, pitch, roll), t);
    Ok(RegistrationPair {
        source: frame.clone(),
        target: frame.transformed(&truth),
        truth,
        target_in_source: frame.points.clone(),
    })
}

impl RegistrationPair {
    /// Replaces a `fraction` of target points by speckle: uniform points in
    /// the unit ball of the source frame, above the normalized ground.
    pub fn with_target_outliers<R: Rng + ?Sized>(mut self, fraction: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return invalid("outlier fraction must lie in [0, 1]");
        }
        let n = self.target.len();
        let count = (fraction * n as f64).round() as usize;
        let picks = rand::seq::index::sample(rng, n, count);
        for i in picks {
            let p = speckle_point(1.0, -SENSOR_HEIGHT / BASE_RANGE, rng);
            self.target_in_source[i] = p;
            self.target.points[i] = self.truth.apply(&p);
        }
        Ok(self)
    }
}
