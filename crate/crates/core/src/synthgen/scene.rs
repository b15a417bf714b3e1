use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::geometry::{EulerZyx, RigidTransform};

/// Height of the sensor above the ground plane, meters.
pub const SENSOR_HEIGHT: f64 = 1.8;
/// Half width of the obstacle-free corridor around the route, meters.
pub const ROAD_HALF_WIDTH: f64 = 6.0;

/// Procedural scene recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Route polyline in the ground plane, meters.
    pub route: Vec<Vector2<f64>>,
    /// Margin of ground plane around the route's bounding box, meters.
    pub ground_extent: f64,
    pub building_count: usize,
    pub pole_count: usize,
    pub clutter_count: usize,
    /// Footprint side length range of buildings, meters.
    pub building_size: (f64, f64),
    pub building_height: (f64, f64),
    /// Buildings are placed this far (at most) beyond the road edge.
    pub building_setback: f64,
    pub frame_spacing: f64,
    /// Relative sampling weight of the ground plane per unit area.
    pub ground_weight: f64,
}

impl SceneSpec {
    /// Staircase route of the given length with object counts scaled to it.
    pub fn with_route_length(seed: u64, route_length: f64) -> Self {
        let route = staircase_route(seed, route_length);
        let km = route_length / 1000.0;
        SceneSpec {
            seed,
            route,
            ground_extent: 80.0,
            building_count: (90.0 * km).ceil() as usize,
            pole_count: (60.0 * km).ceil() as usize,
            clutter_count: (120.0 * km).ceil() as usize,
            building_size: (6.0, 24.0),
            building_height: (4.0, 30.0),
            building_setback: 30.0,
            frame_spacing: 20.0,
            ground_weight: 0.2,
        }
    }

    pub fn route_length(&self) -> f64 {
        self.route.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.route.len() < 2 {
            return invalid("route needs at least two waypoints");
        }
        if self.route.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return invalid("route waypoints must be finite");
        }
        if !(self.frame_spacing > 0.0) {
            return invalid("frame spacing must be positive");
        }
        if self.route_length() < 2.0 * self.frame_spacing {
            return invalid("route must be at least twice the frame spacing");
        }
        let (a, b) = self.building_size;
        let (h0, h1) = self.building_height;
        if !(a > 0.0 && b >= a && h0 > 0.0 && h1 >= h0) {
            return invalid("building size ranges must be positive and ordered");
        }
        if !(self.ground_extent >= 0.0 && self.ground_weight >= 0.0 && self.building_setback >= 0.0) {
            return invalid("extents and weights must be non-negative");
        }
        Ok(())
    }
}

/// Monotone east/north staircase; never self-intersects.
fn staircase_route(seed: u64, length: f64) -> Vec<Vector2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11);
    let mut pts = vec![Vector2::zeros()];
    let mut remaining = length.max(0.0);
    let mut east = true;
    while remaining > 0.0 {
        let seg = rng.random_range(120.0..260.0f64).min(remaining);
        let last = *pts.last().unwrap();
        let dir = if east { Vector2::x() } else { Vector2::y() };
        pts.push(last + dir * seg);
        remaining -= seg;
        east = !east;
    }
    if pts.len() < 2 {
        pts.push(Vector2::zeros());
    }
    pts
}

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Rectangle in the `z = 0` plane.
    Ground { min: Vector2<f64>, max: Vector2<f64> },
    /// Axis-aligned box resting on the ground.
    Building { min: Vector3<f64>, max: Vector3<f64> },
    /// Vertical cylinder side surface standing on the ground.
    Pole { center: Vector2<f64>, radius: f64, height: f64 },
    /// Sphere, possibly partly buried.
    Clutter { center: Vector3<f64>, radius: f64 },
}

impl Primitive {
    /// Euclidean distance from `p` to the primitive's sampled surface.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Ground { min, max } => {
                let dx = (min.x - p.x).max(0.0).max(p.x - max.x);
                let dy = (min.y - p.y).max(0.0).max(p.y - max.y);
                (dx * dx + dy * dy + p.z * p.z).sqrt()
            }
            Primitive::Building { min, max } => box_surface_distance(min, max, p),
            Primitive::Pole { center, radius, height } => {
                let rho = ((p.x - center.x).powi(2) + (p.y - center.y).powi(2)).sqrt();
                let dr = rho - radius;
                let dz = (-p.z).max(0.0).max(p.z - height);
                (dr * dr + dz * dz).sqrt()
            }
            Primitive::Clutter { center, radius } => ((p - center).norm() - radius).abs(),
        }
    }
}

fn box_surface_distance(min: &Vector3<f64>, max: &Vector3<f64>, p: &Vector3<f64>) -> f64 {
    let mut outside = 0.0;
    let mut inside = f64::INFINITY;
    for a in 0..3 {
        let d = (min[a] - p[a]).max(p[a] - max[a]);
        if d > 0.0 {
            outside += d * d;
        }
        inside = inside.min((p[a] - min[a]).min(max[a] - p[a]));
    }
    if outside > 0.0 {
        outside.sqrt()
    } else {
        inside.max(0.0)
    }
}

/// Generated scene: a primitive soup over a ground plane, plus the route.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub primitives: Vec<Primitive>,
    pub bounds_min: Vector2<f64>,
    pub bounds_max: Vector2<f64>,
}

pub fn build_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut lo, mut hi) = (spec.route[0], spec.route[0]);
    for p in &spec.route {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let margin = Vector2::repeat(spec.ground_extent);
    let (bounds_min, bounds_max) = (lo - margin, hi + margin);
    let mut primitives = vec![Primitive::Ground {
        min: bounds_min,
        max: bounds_max,
    }];
    let route = Route::new(&spec.route);

    for _ in 0..spec.building_count {
        let mut placed = None;
        for attempt in 0..200 {
            let sx = rng.random_range(spec.building_size.0..=spec.building_size.1);
            let sy = rng.random_range(spec.building_size.0..=spec.building_size.1);
            let h = rng.random_range(spec.building_height.0..=spec.building_height.1);
            let (pos, heading) = route.at(rng.random_range(0.0..route.length));
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let normal = Vector2::new(-heading.y, heading.x) * side;
            let half = 0.5 * sx.max(sy) * std::f64::consts::SQRT_2;
            let offset = ROAD_HALF_WIDTH + 2.0 + half + rng.random_range(0.0..=spec.building_setback);
            let along = rng.random_range(-10.0..10.0);
            let c = pos + normal * offset + heading * along;
            let min = Vector2::new(c.x - 0.5 * sx, c.y - 0.5 * sy);
            let max = Vector2::new(c.x + 0.5 * sx, c.y + 0.5 * sy);
            let clear = route.clearance_to_box(&min, &max) > ROAD_HALF_WIDTH;
            if clear || attempt == 199 {
                placed = Some(Primitive::Building {
                    min: Vector3::new(min.x, min.y, 0.0),
                    max: Vector3::new(max.x, max.y, h),
                });
                break;
            }
        }
        primitives.extend(placed);
    }
    for _ in 0..spec.pole_count {
        let (pos, heading) = route.at(rng.random_range(0.0..route.length));
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let normal = Vector2::new(-heading.y, heading.x) * side;
        let c = pos + normal * (ROAD_HALF_WIDTH + rng.random_range(0.5..2.0));
        primitives.push(Primitive::Pole {
            center: c,
            radius: rng.random_range(0.1..0.25),
            height: rng.random_range(4.0..9.0),
        });
    }
    for _ in 0..spec.clutter_count {
        let (pos, heading) = route.at(rng.random_range(0.0..route.length));
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let normal = Vector2::new(-heading.y, heading.x) * side;
        let r = rng.random_range(0.4..1.6);
        let c = pos + normal * (ROAD_HALF_WIDTH + r + rng.random_range(0.5..25.0)) + heading * rng.random_range(-5.0..5.0);
        primitives.push(Primitive::Clutter {
            center: Vector3::new(c.x, c.y, 0.5 * r),
            radius: r,
        });
    }
    Ok(Scene {
        spec: spec.clone(),
        primitives,
        bounds_min,
        bounds_max,
    })
}

impl Scene {
    pub fn route(&self) -> Route {
        Route::new(&self.spec.route)
    }

    pub fn contains_xy(&self, p: &Vector3<f64>) -> bool {
        p.x >= self.bounds_min.x && p.x <= self.bounds_max.x && p.y >= self.bounds_min.y && p.y <= self.bounds_max.y
    }

    /// Distance from a world point to the nearest scene surface.
    pub fn distance_to_surface(&self, p: &Vector3<f64>) -> f64 {
        self.primitives
            .iter()
            .map(|prim| prim.distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Sensor pose (world-from-sensor) at arc length `s`: on the road,
    /// `SENSOR_HEIGHT` above ground, facing along the route.
    pub fn sensor_pose(&self, s: f64) -> RigidTransform {
        let (pos, heading) = self.route().at(s);
        let yaw = heading.y.atan2(heading.x).to_degrees();
        RigidTransform::from_euler(EulerZyx::new(yaw, 0.0, 0.0), Vector3::new(pos.x, pos.y, SENSOR_HEIGHT))
    }

    /// Stable byte encoding of the primitive soup.
    pub fn fingerprint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut put = |v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for p in &self.primitives {
            match p {
                Primitive::Ground { min, max } => put(&[0.0, min.x, min.y, max.x, max.y]),
                Primitive::Building { min, max } => put(&[1.0, min.x, min.y, min.z, max.x, max.y, max.z]),
                Primitive::Pole { center, radius, height } => put(&[2.0, center.x, center.y, *radius, *height]),
                Primitive::Clutter { center, radius } => put(&[3.0, center.x, center.y, center.z, *radius]),
            }
        }
        out
    }
}

/// Arc-length parameterised polyline.
#[derive(Debug, Clone)]
pub struct Route {
    points: Vec<Vector2<f64>>,
    cumulative: Vec<f64>,
    pub length: f64,
}

impl Route {
    pub fn new(points: &[Vector2<f64>]) -> Self {
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let last = *cumulative.last().unwrap();
            cumulative.push(last + (w[1] - w[0]).norm());
        }
        let length = *cumulative.last().unwrap();
        Route {
            points: points.to_vec(),
            cumulative,
            length,
        }
    }

    /// Position and unit heading at arc length `s` (clamped to the route).
    pub fn at(&self, s: f64) -> (Vector2<f64>, Vector2<f64>) {
        let s = s.clamp(0.0, self.length);
        let mut seg = self.cumulative.partition_point(|&c| c <= s).saturating_sub(1);
        // skip zero-length segments and stay on the last real one at the end
        while seg + 1 < self.points.len() && (self.points[seg + 1] - self.points[seg]).norm() == 0.0 {
            seg += 1;
        }
        if seg + 1 >= self.points.len() {
            seg = self.points.len() - 2;
            while seg > 0 && (self.points[seg + 1] - self.points[seg]).norm() == 0.0 {
                seg -= 1;
            }
        }
        let a = self.points[seg];
        let b = self.points[seg + 1];
        let len = (b - a).norm();
        if len == 0.0 {
            return (a, Vector2::x());
        }
        let dir = (b - a) / len;
        (a + dir * (s - self.cumulative[seg]), dir)
    }

    /// Smallest distance from any route segment to an axis-aligned rectangle.
    pub fn clearance_to_box(&self, min: &Vector2<f64>, max: &Vector2<f64>) -> f64 {
        self.points
            .windows(2)
            .map(|w| segment_box_distance(&w[0], &w[1], min, max))
            .fold(f64::INFINITY, f64::min)
    }
}

fn point_box_distance(p: &Vector2<f64>, min: &Vector2<f64>, max: &Vector2<f64>) -> f64 {
    let dx = (min.x - p.x).max(0.0).max(p.x - max.x);
    let dy = (min.y - p.y).max(0.0).max(p.y - max.y);
    (dx * dx + dy * dy).sqrt()
}

fn point_segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 == 0.0 { 0.0 } else { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) };
    (p - (a + ab * t)).norm()
}

/// Exact 2-D distance between a segment and an axis-aligned rectangle.
fn segment_box_distance(a: &Vector2<f64>, b: &Vector2<f64>, min: &Vector2<f64>, max: &Vector2<f64>) -> f64 {
    // Liang-Barsky clip: any overlap means distance zero
    let d = b - a;
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    let mut hits = true;
    for (p, q) in [(-d.x, a.x - min.x), (d.x, max.x - a.x), (-d.y, a.y - min.y), (d.y, max.y - a.y)] {
        if p == 0.0 {
            if q < 0.0 {
                hits = false;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if hits && t0 <= t1 {
        return 0.0;
    }
    let corners = [*min, Vector2::new(min.x, max.y), *max, Vector2::new(max.x, min.y)];
    let from_corners = corners
        .iter()
        .map(|c| point_segment_distance(c, a, b))
        .fold(f64::INFINITY, f64::min);
    from_corners
        .min(point_box_distance(a, min, max))
        .min(point_box_distance(b, min, max))
}
