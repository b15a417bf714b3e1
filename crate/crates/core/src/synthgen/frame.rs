use nalgebra::Vector3;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::scene::{Primitive, Scene, SENSOR_HEIGHT};
use crate::error::{invalid, Error, Result};
use crate::geometry::{Environment, PointCloud, RigidTransform};

/// Per-environment corruption model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvironmentPreset {
    pub environment: Environment,
    /// Per-axis Gaussian jitter, meters.
    pub noise_sigma: f64,
    pub dropout_rate: f64,
    pub speckle_rate: f64,
    /// Sensor range, meters.
    pub max_range: f64,
}

/// Sensor range of the clear-weather presets, meters.
pub const BASE_RANGE: f64 = 40.0;

impl EnvironmentPreset {
    /// Default severity for each environment; monotone from clear to
    /// precipitation.
    pub fn default_for(environment: Environment) -> Self {
        let (noise_sigma, dropout_rate, speckle_rate, range_scale) = match environment {
            Environment::Sunny => (0.02, 0.0, 0.0, 1.0),
            Environment::Cloudy => (0.03, 0.05, 0.0, 1.0),
            Environment::Overcast => (0.03, 0.05, 0.0, 1.0),
            Environment::Dusk => (0.03, 0.15, 0.0, 0.7),
            Environment::Night => (0.03, 0.25, 0.0, 0.5),
            Environment::Rain => (0.05, 0.10, 0.03, 1.0),
            Environment::Snow => (0.05, 0.10, 0.06, 1.0),
        };
        Self {
            environment,
            noise_sigma,
            dropout_rate,
            speckle_rate,
            max_range: BASE_RANGE * range_scale,
        }
    }

    /// Same range, no corruption at all.
    pub fn clean(environment: Environment) -> Self {
        Self {
            environment,
            noise_sigma: 0.0,
            dropout_rate: 0.0,
            speckle_rate: 0.0,
            max_range: BASE_RANGE,
        }
    }

    pub fn all_defaults() -> Vec<Self> {
        Environment::ALL.iter().map(|&e| Self::default_for(e)).collect()
    }

    /// Scales jitter, dropout and speckle by `factor` (rates capped below 1).
    pub fn with_severity(mut self, factor: f64) -> Self {
        self.noise_sigma *= factor;
        self.dropout_rate = (self.dropout_rate * factor).min(0.9);
        self.speckle_rate = (self.speckle_rate * factor).min(0.9);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| (0.0..1.0).contains(&r);
        if !(self.noise_sigma >= 0.0 && rate_ok(self.dropout_rate) && rate_ok(self.speckle_rate) && self.max_range > 0.0) {
            return invalid(format!("invalid preset parameters for {}", self.environment));
        }
        Ok(())
    }
}

enum Patch {
    /// Axis-aligned rectangle with normal `axis` at coordinate `plane`.
    Rect { axis: usize, plane: f64, lo: [f64; 2], hi: [f64; 2] },
    Cylinder { cx: f64, cy: f64, radius: f64, height: f64 },
    Sphere { center: Vector3<f64>, radius: f64 },
}

fn in_plane_axes(axis: usize) -> [usize; 2] {
    match axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    }
}

fn clip_rect(axis: usize, plane: f64, lo: [f64; 2], hi: [f64; 2], cmin: &Vector3<f64>, cmax: &Vector3<f64>) -> Option<(Patch, f64)> {
    if plane < cmin[axis] || plane > cmax[axis] {
        return None;
    }
    let [u, v] = in_plane_axes(axis);
    let lo = [lo[0].max(cmin[u]), lo[1].max(cmin[v])];
    let hi = [hi[0].min(cmax[u]), hi[1].min(cmax[v])];
    let area = (hi[0] - lo[0]) * (hi[1] - lo[1]);
    if hi[0] <= lo[0] || hi[1] <= lo[1] {
        return None;
    }
    Some((Patch::Rect { axis, plane, lo, hi }, area))
}

fn visible_patches(scene: &Scene, center: &Vector3<f64>, range: f64) -> Vec<(Patch, f64)> {
    let cmin = center - Vector3::repeat(range);
    let cmax = center + Vector3::repeat(range);
    let mut out = Vec::new();
    for prim in &scene.primitives {
        match prim {
            Primitive::Ground { min, max } => {
                if let Some((p, a)) = clip_rect(2, 0.0, [min.x, min.y], [max.x, max.y], &cmin, &cmax) {
                    out.push((p, a * scene.spec.ground_weight));
                }
            }
            Primitive::Building { min, max } => {
                let faces = [
                    (0, min.x, [min.y, min.z], [max.y, max.z]),
                    (0, max.x, [min.y, min.z], [max.y, max.z]),
                    (1, min.y, [min.x, min.z], [max.x, max.z]),
                    (1, max.y, [min.x, min.z], [max.x, max.z]),
                    (2, max.z, [min.x, min.y], [max.x, max.y]),
                ];
                for (axis, plane, lo, hi) in faces {
                    out.extend(clip_rect(axis, plane, lo, hi, &cmin, &cmax));
                }
            }
            Primitive::Pole { center: c, radius, height } => {
                let overlaps = c.x + radius >= cmin.x
                    && c.x - radius <= cmax.x
                    && c.y + radius >= cmin.y
                    && c.y - radius <= cmax.y
                    && *height >= cmin.z
                    && 0.0 <= cmax.z;
                if overlaps {
                    let area = 2.0 * std::f64::consts::PI * radius * height;
                    out.push((Patch::Cylinder { cx: c.x, cy: c.y, radius: *radius, height: *height }, area));
                }
            }
            Primitive::Clutter { center: c, radius } => {
                let overlaps = (0..3).all(|a| c[a] + radius >= cmin[a] && c[a] - radius <= cmax[a]);
                if overlaps {
                    let area = 4.0 * std::f64::consts::PI * radius * radius;
                    out.push((Patch::Sphere { center: *c, radius: *radius }, area));
                }
            }
        }
    }
    out.retain(|(_, w)| *w > 0.0);
    out
}

fn sample_patch<R: Rng + ?Sized>(patch: &Patch, rng: &mut R) -> Option<Vector3<f64>> {
    match patch {
        Patch::Rect { axis, plane, lo, hi } => {
            let [u, v] = in_plane_axes(*axis);
            let mut p = Vector3::zeros();
            p[*axis] = *plane;
            p[u] = lo[0] + (hi[0] - lo[0]) * rng.random::<f64>();
            p[v] = lo[1] + (hi[1] - lo[1]) * rng.random::<f64>();
            Some(p)
        }
        Patch::Cylinder { cx, cy, radius, height } => {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let z = height * rng.random::<f64>();
            Some(Vector3::new(cx + radius * theta.cos(), cy + radius * theta.sin(), z))
        }
        Patch::Sphere { center, radius } => {
            let z: f64 = rng.random_range(-1.0..=1.0);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let p = center + Vector3::new(rho * theta.cos(), rho * theta.sin(), z) * *radius;
            // buried part is not visible
            (p.z >= 0.0).then_some(p)
        }
    }
}

/// Area-weighted surface samples within `max_range` of the sensor, in world
/// coordinates.
pub fn sample_surface_points<R: Rng + ?Sized>(
    scene: &Scene,
    sensor: &Vector3<f64>,
    max_range: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vector3<f64>>> {
    let patches = visible_patches(scene, sensor, max_range);
    if patches.is_empty() {
        return Err(Error::DegenerateGeometry("no scene surface within sensor range".into()));
    }
    let mut cumulative = Vec::with_capacity(patches.len());
    let mut total = 0.0;
    for (_, w) in &patches {
        total += w;
        cumulative.push(total);
    }
    let r2 = max_range * max_range;
    let mut out = Vec::with_capacity(count);
    let max_attempts = 200 * count + 10_000;
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::DegenerateGeometry("too few surface samples fall within sensor range".into()));
        }
        let x = rng.random::<f64>() * total;
        let i = cumulative.partition_point(|&c| c <= x).min(patches.len() - 1);
        if let Some(p) = sample_patch(&patches[i].0, rng) {
            if (p - sensor).norm_squared() <= r2 {
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// Simulated LiDAR frame in the sensor coordinate system (meters).
///
/// Surface samples are jittered, thinned by dropout, mixed with uniform
/// speckle, then resampled to exactly `n_points`.
pub fn sample_frame<R: Rng + ?Sized>(
    scene: &Scene,
    sensor_pose: &RigidTransform,
    preset: &EnvironmentPreset,
    n_points: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    if n_points < 64 {
        return invalid("a frame needs at least 64 points");
    }
    preset.validate()?;
    let sensor = sensor_pose.translation;
    if !scene.contains_xy(&sensor) {
        return invalid("sensor pose lies outside the scene bounds");
    }
    let wanted = ((n_points as f64) / (1.0 - preset.dropout_rate)).ceil() as usize;
    let world = sample_surface_points(scene, &sensor, preset.max_range, wanted, rng)?;
    let to_sensor = sensor_pose.inverse();
    let mut pts: Vec<Vector3<f64>> = world.iter().map(|p| to_sensor.apply(p)).collect();

    if preset.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, preset.noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
        for p in pts.iter_mut() {
            for c in p.iter_mut() {
                *c += normal.sample(rng);
            }
        }
    }
    if preset.dropout_rate > 0.0 {
        pts.retain(|_| rng.random::<f64>() >= preset.dropout_rate);
    }
    let n_speckle = (preset.speckle_rate * n_points as f64).round() as usize;
    for _ in 0..n_speckle {
        pts.push(speckle_point(preset.max_range, -SENSOR_HEIGHT, rng));
    }
    let pts = resample(pts, n_points, rng)?;
    PointCloud::with_meta(pts, 0, preset.environment, 0.0, Some(*sensor_pose))
}

/// Uniform point inside the sensor ball of radius `range`, above `ground_z`.
pub(crate) fn speckle_point<R: Rng + ?Sized>(range: f64, ground_z: f64, rng: &mut R) -> Vector3<f64> {
    loop {
        let p = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ) * range;
        if p.norm_squared() <= range * range && p.z >= ground_z {
            return p;
        }
    }
}

/// Random subset (order kept) or padding by random duplicates.
pub fn resample<T: Clone, R: Rng + ?Sized>(mut pts: Vec<T>, n: usize, rng: &mut R) -> Result<Vec<T>> {
    if pts.is_empty() {
        return Err(Error::DegenerateGeometry("no points left to resample".into()));
    }
    if pts.len() > n {
        let mut keep = index::sample(rng, pts.len(), n).into_vec();
        keep.sort_unstable();
        pts = keep.into_iter().map(|i| pts[i].clone()).collect();
    }
    while pts.len() < n {
        let i = rng.random_range(0..pts.len());
        pts.push(pts[i].clone());
    }
    Ok(pts)
}
