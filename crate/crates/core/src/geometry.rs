//! Point clouds, rigid transforms and the 3×3 SVD used by every solver.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};

use crate::error::{invalid, Error, Result};

/// The seven capture conditions of a traverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Environment {
    Rain,
    Snow,
    Dusk,
    Night,
    Overcast,
    Sunny,
    Cloudy,
}

impl Environment {
    pub const ALL: [Environment; 7] = [
        Environment::Rain,
        Environment::Snow,
        Environment::Dusk,
        Environment::Night,
        Environment::Overcast,
        Environment::Sunny,
        Environment::Cloudy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Environment::Rain => "Rain",
            Environment::Snow => "Snow",
            Environment::Dusk => "Dusk",
            Environment::Night => "Night",
            Environment::Overcast => "Overcast",
            Environment::Sunny => "Sunny",
            Environment::Cloudy => "Cloudy",
        }
    }
}

impl fmt::Display for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Environment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Environment::ALL
            .iter()
            .copied()
            .find(|e| e.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidInput(format!("unknown environment '{s}'")))
    }
}

/// Rotation plus translation, mapping `p` to `R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Z-Y-X Euler angles in degrees: `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EulerZyx {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl EulerZyx {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.yaw, self.pitch, self.roll]
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (sy, cy) = self.yaw.to_radians().sin_cos();
        let (sp, cp) = self.pitch.to_radians().sin_cos();
        let (sr, cr) = self.roll.to_radians().sin_cos();
        let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
        let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
        rz * ry * rx
    }

    pub fn from_matrix(r: &Matrix3<f64>) -> Self {
        let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
        let (yaw, roll) = if r[(2, 0)].abs() < 1.0 - 1e-12 {
            (r[(1, 0)].atan2(r[(0, 0)]), r[(2, 1)].atan2(r[(2, 2)]))
        } else {
            // gimbal lock: fold everything into yaw
            ((-r[(0, 1)]).atan2(r[(1, 1)]), 0.0)
        };
        Self {
            yaw: yaw.to_degrees(),
            pitch: pitch.to_degrees(),
            roll: roll.to_degrees(),
        }
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_euler(angles: EulerZyx, translation: Vector3<f64>) -> Self {
        Self {
            rotation: angles.to_matrix(),
            translation,
        }
    }

    pub fn euler(&self) -> EulerZyx {
        EulerZyx::from_matrix(&self.rotation)
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Largest absolute entry of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    pub fn is_proper(&self, tol: f64) -> bool {
        self.orthonormality_error() < tol && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    /// Rotation angle (radians) plus translation norm of `self⁻¹ ∘ other`.
    pub fn difference(&self, other: &RigidTransform) -> (f64, f64) {
        let delta = self.inverse().compose(other);
        let cos = ((delta.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        (cos.acos(), delta.translation.norm())
    }

    /// Row-major 3×4 `[R|t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return invalid(format!("pose needs 12 values, got {}", v.len()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return invalid("pose contains non-finite values");
        }
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        Ok(Self { rotation, translation })
    }
}

/// One LiDAR frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub frame_id: u64,
    pub environment: Environment,
    pub route_s: f64,
    /// World-from-sensor pose, when known.
    pub pose: Option<RigidTransform>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        Self::with_meta(points, 0, Environment::Sunny, 0.0, None)
    }

    pub fn with_meta(
        points: Vec<Vector3<f64>>,
        frame_id: u64,
        environment: Environment,
        route_s: f64,
        pose: Option<RigidTransform>,
    ) -> Result<Self> {
        if points.is_empty() {
            return invalid("point cloud must contain at least one point");
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return invalid("point cloud contains non-finite coordinates");
        }
        Ok(Self {
            points,
            frame_id,
            environment,
            route_s,
            pose,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }

    /// Copy with every point mapped through `tf`; metadata is kept.
    pub fn transformed(&self, tf: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| tf.apply(p)).collect(),
            ..self.clone()
        }
    }

    /// Divides every coordinate by `scale` and clamps into `[-1, 1]`.
    pub fn normalized(&self, scale: f64) -> Result<PointCloud> {
        if !(scale > 0.0 && scale.is_finite()) {
            return invalid("normalization scale must be positive");
        }
        let points = self
            .points
            .iter()
            .map(|p| p.map(|c| (c / scale).clamp(-1.0, 1.0)))
            .collect();
        Ok(PointCloud {
            points,
            ..self.clone()
        })
    }

    pub fn is_normalized(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.iter().all(|c| (-1.0..=1.0).contains(c)))
    }

    /// Points at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        if indices.is_empty() {
            return invalid("selection must not be empty");
        }
        let mut points = Vec::with_capacity(indices.len());
        for &i in indices {
            match self.points.get(i) {
                Some(p) => points.push(*p),
                None => return invalid(format!("index {i} out of range for {} points", self.len())),
            }
        }
        Ok(PointCloud {
            points,
            ..self.clone()
        })
    }
}

/// `m = U · diag(S) · Vᵀ` with `S` sorted descending.
#[derive(Debug, Clone, Copy)]
pub struct Svd3 {
    pub u: Matrix3<f64>,
    pub s: Vector3<f64>,
    pub v: Matrix3<f64>,
}

pub fn svd3(m: &Matrix3<f64>) -> Result<Svd3> {
    if m.iter().any(|x| !x.is_finite()) {
        return invalid("svd3 input must be finite");
    }
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateGeometry("SVD did not converge".into())),
    };
    let v = v_t.transpose();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let mut out = Svd3 {
        u: Matrix3::zeros(),
        s: Vector3::zeros(),
        v: Matrix3::zeros(),
    };
    for (dst, &src) in order.iter().enumerate() {
        out.u.set_column(dst, &u.column(src));
        out.v.set_column(dst, &v.column(src));
        out.s[dst] = svd.singular_values[src];
    }
    Ok(out)
}
