//! Point clouds, analytic shapes with exact occupancy, and sampling.
//!
//! Every random draw comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded
//! with `seed_from_u64(seed)` and a per-purpose stream id, so results depend
//! only on `(seed, parameters)`. Uniform reals are `(u64 >> 11) * 2^-53`;
//! normals use the Box-Muller transform, consuming draws in pairs.

use std::f64::consts::PI;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Stream ids keep independent consumers of one seed apart.
pub mod stream {
    pub const SURFACE: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const QUERIES: u64 = 3;
    pub const INIT: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const MESH_SAMPLES: u64 = 6;
}

pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Standard normal draws via Box-Muller.
pub struct Gaussian<R> {
    rng: R,
    spare: Option<f64>,
}

impl<R: Rng> Gaussian<R> {
    pub fn new(rng: R) -> Self {
        Gaussian { rng, spare: None }
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.rng.gen::<f64>();
        let u2 = self.rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        self.spare = Some(r * (2.0 * PI * u2).sin());
        r * (2.0 * PI * u2).cos()
    }

    pub fn rng_mut(&mut self) -> &mut R {
        &mut self.rng
    }
}

/// Isotropic map `normalized = raw * scale + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub scale: f64,
    pub offset: [f64; 3],
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        scale: 1.0,
        offset: [0.0; 3],
    };

    pub fn apply(&self, p: Point) -> Point {
        [0, 1, 2].map(|a| p[a] * self.scale + self.offset[a])
    }

    pub fn inverse(&self, p: Point) -> Point {
        [0, 1, 2].map(|a| (p[a] - self.offset[a]) / self.scale)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub transform: Transform,
}

impl PointCloud {
    /// Wraps points that are already in the unit cube.
    pub fn from_normalized(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Contract("point cloud is empty".into()));
        }
        if let Some(p) = points.iter().find(|p| p.iter().any(|c| !(0.0..=1.0).contains(c))) {
            return Err(Error::Contract(format!("point {p:?} lies outside [0,1]^3")));
        }
        Ok(PointCloud {
            points,
            transform: Transform::IDENTITY,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Maps the bounding box of `raw` isotropically into `[padding/2, 1 - padding/2]^3`,
/// centred at 0.5. A cloud with zero extent is centred with unit scale.
pub fn normalize_cloud(raw: &[Point], padding: f64) -> Result<PointCloud> {
    if raw.is_empty() {
        return Err(Error::Contract("cannot normalize an empty cloud".into()));
    }
    if raw.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Contract("cloud has non-finite coordinates".into()));
    }
    if !(0.0..1.0).contains(&padding) {
        return Err(Error::Config(format!("padding must be in [0,1), got {padding}")));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in raw {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let scale = if extent > 0.0 {
        (1.0 - padding) / extent
    } else {
        warn!("point cloud has zero extent; centring it with unit scale");
        1.0
    };
    let offset = [0, 1, 2].map(|a| 0.5 - scale * 0.5 * (lo[a] + hi[a]));
    let transform = Transform { scale, offset };
    let points = raw
        .iter()
        .map(|&p| transform.apply(p).map(|c| c.clamp(0.0, 1.0)))
        .collect();
    Ok(PointCloud { points, transform })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    Sphere { center: Point, radius: f64 },
    Box { min: Point, max: Point },
    /// Ring around the z axis through `center`.
    Torus { center: Point, major: f64, minor: f64 },
}

impl Primitive {
    /// Closed-set membership: boundary points are inside.
    pub fn contains(&self, p: Point) -> bool {
        self.signed(p) <= 0.0
    }

    fn strictly_contains(&self, p: Point) -> bool {
        self.signed(p) < -1e-12
    }

    /// Negative inside, zero on the boundary (not a true distance for boxes).
    fn signed(&self, p: Point) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => dist(p, center) - radius,
            Primitive::Box { min, max } => (0..3)
                .map(|a| (min[a] - p[a]).max(p[a] - max[a]))
                .fold(f64::NEG_INFINITY, f64::max),
            Primitive::Torus { center, major, minor } => {
                let (x, y, z) = (p[0] - center[0], p[1] - center[1], p[2] - center[2]);
                let ring = (x * x + y * y).sqrt() - major;
                (ring * ring + z * z).sqrt() - minor
            }
        }
    }

    /// Outward unit normal of the surface point nearest `p`.
    pub fn normal(&self, p: Point) -> [f64; 3] {
        let unit = |v: [f64; 3]| {
            let n = norm(v);
            if n > 0.0 { v.map(|c| c / n) } else { [0.0, 0.0, 1.0] }
        };
        match *self {
            Primitive::Sphere { center, .. } => unit([0, 1, 2].map(|a| p[a] - center[a])),
            Primitive::Box { min, max } => {
                let mut best = (f64::NEG_INFINITY, 0, 1.0);
                for a in 0..3 {
                    if min[a] - p[a] > best.0 {
                        best = (min[a] - p[a], a, -1.0);
                    }
                    if p[a] - max[a] > best.0 {
                        best = (p[a] - max[a], a, 1.0);
                    }
                }
                let mut n = [0.0; 3];
                n[best.1] = best.2;
                n
            }
            Primitive::Torus { center, major, .. } => {
                let (x, y) = (p[0] - center[0], p[1] - center[1]);
                let rho = (x * x + y * y).sqrt().max(1e-300);
                let tube = [center[0] + major * x / rho, center[1] + major * y / rho, center[2]];
                unit([0, 1, 2].map(|a| p[a] - tube[a]))
            }
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Primitive::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Primitive::Box { min, max } => {
                let e = [0, 1, 2].map(|a| max[a] - min[a]);
                2.0 * (e[0] * e[1] + e[0] * e[2] + e[1] * e[2])
            }
            Primitive::Torus { major, minor, .. } => 4.0 * PI * PI * major * minor,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Primitive::Sphere { radius, .. } => radius > 0.0,
            Primitive::Box { min, max } => (0..3).all(|a| min[a] < max[a]),
            Primitive::Torus { major, minor, .. } => major > 0.0 && minor > 0.0 && minor < major,
        };
        if !ok {
            return Err(Error::Config(format!("degenerate primitive {self:?}")));
        }
        let (lo, hi) = self.bounds();
        if (0..3).any(|a| hi[a] < 0.0 || lo[a] > 1.0) {
            return Err(Error::Config(format!("primitive {self:?} does not intersect the unit cube")));
        }
        Ok(())
    }

    fn bounds(&self) -> (Point, Point) {
        match *self {
            Primitive::Sphere { center, radius } => {
                (center.map(|c| c - radius), center.map(|c| c + radius))
            }
            Primitive::Box { min, max } => (min, max),
            Primitive::Torus { center, major, minor } => {
                let r = major + minor;
                (
                    [center[0] - r, center[1] - r, center[2] - minor],
                    [center[0] + r, center[1] + r, center[2] + minor],
                )
            }
        }
    }

    fn sample_surface<R: Rng>(&self, g: &mut Gaussian<R>) -> Point {
        match *self {
            Primitive::Sphere { center, radius } => {
                let d = loop {
                    let v = [g.sample(), g.sample(), g.sample()];
                    let n = norm(v);
                    if n > 1e-12 {
                        break v.map(|c| c / n);
                    }
                };
                [0, 1, 2].map(|a| center[a] + radius * d[a])
            }
            Primitive::Box { min, max } => {
                let e = [0, 1, 2].map(|a| max[a] - min[a]);
                // Faces come in pairs normal to each axis.
                let areas = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
                let total: f64 = areas.iter().sum();
                let rng = g.rng_mut();
                let mut pick = rng.gen::<f64>() * total;
                let mut axis = 2;
                for (a, &ar) in areas.iter().enumerate() {
                    if pick < ar {
                        axis = a;
                        break;
                    }
                    pick -= ar;
                }
                let high = rng.gen::<bool>();
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = if a == axis {
                        if high { max[a] } else { min[a] }
                    } else {
                        min[a] + rng.gen::<f64>() * e[a]
                    };
                }
                p
            }
            Primitive::Torus { center, major, minor } => {
                let rng = g.rng_mut();
                // Area element is proportional to (major + minor cos(tube angle)).
                let tube = loop {
                    let t = rng.gen::<f64>() * 2.0 * PI;
                    if rng.gen::<f64>() * (major + minor) <= major + minor * t.cos() {
                        break t;
                    }
                };
                let around = rng.gen::<f64>() * 2.0 * PI;
                let ring = major + minor * tube.cos();
                [
                    center[0] + ring * around.cos(),
                    center[1] + ring * around.sin(),
                    center[2] + minor * tube.sin(),
                ]
            }
        }
    }
}

/// Union of analytic primitives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub primitives: Vec<Primitive>,
}

impl ShapeSpec {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        let s = ShapeSpec { primitives };
        s.validate()?;
        Ok(s)
    }

    pub fn sphere(center: Point, radius: f64) -> Self {
        ShapeSpec {
            primitives: vec![Primitive::Sphere { center, radius }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::Config("shape has no primitives".into()));
        }
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    pub fn contains(&self, p: Point) -> bool {
        self.primitives.iter().any(|s| s.contains(p))
    }

    /// Normal of the primitive whose boundary is closest to `p`.
    pub fn surface_normal(&self, p: Point) -> [f64; 3] {
        let near = self
            .primitives
            .iter()
            .min_by(|a, b| a.signed(p).abs().total_cmp(&b.signed(p).abs()))
            .expect("validated shapes have primitives");
        near.normal(p)
    }
}

/// 1 inside the union (boundary included), 0 outside.
pub fn occupancy_oracle(spec: &ShapeSpec, coords: &[Point]) -> Vec<f64> {
    coords
        .iter()
        .map(|&p| if spec.contains(p) { 1.0 } else { 0.0 })
        .collect()
}

/// `n` points uniformly distributed on the boundary of the union: a
/// primitive is chosen by area, a point drawn on its surface, and the draw
/// rejected if it lies strictly inside another primitive.
pub fn sample_surface(spec: &ShapeSpec, n: usize, seed: u64) -> Result<Vec<Point>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Contract("surface sample count must be at least 1".into()));
    }
    let areas: Vec<f64> = spec.primitives.iter().map(Primitive::area).collect();
    let total: f64 = areas.iter().sum();
    let mut g = Gaussian::new(rng(seed, stream::SURFACE));
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 1000 * n + 10_000 {
            return Err(Error::Config("union boundary is (almost) empty; rejection sampling stalled".into()));
        }
        let mut pick = g.rng_mut().gen::<f64>() * total;
        let mut k = areas.len() - 1;
        for (i, &a) in areas.iter().enumerate() {
            if pick < a {
                k = i;
                break;
            }
            pick -= a;
        }
        let p = spec.primitives[k].sample_surface(&mut g);
        let buried = spec
            .primitives
            .iter()
            .enumerate()
            .any(|(j, s)| j != k && s.strictly_contains(p));
        if !buried {
            out.push(p);
        }
    }
    Ok(out)
}

/// Adds i.i.d. `N(0, sigma^2)` to every coordinate, then clamps to `[0,1]`.
pub fn add_noise(points: &[Point], sigma: f64, seed: u64) -> Result<Vec<Point>> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut g = Gaussian::new(rng(seed, stream::NOISE));
    Ok(points
        .iter()
        .map(|p| p.map(|c| (c + sigma * g.sample()).clamp(0.0, 1.0)))
        .collect())
}

/// Query coordinates with optional {0,1} occupancy labels.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBatch {
    pub coords: Vec<Point>,
    pub labels: Option<Vec<f64>>,
}

impl QueryBatch {
    pub fn unlabeled(coords: Vec<Point>) -> Self {
        QueryBatch { coords, labels: None }
    }

    pub fn labeled(coords: Vec<Point>, labels: Vec<f64>) -> Result<Self> {
        if coords.len() != labels.len() {
            return Err(Error::dim(
                "query_batch",
                format!("{} coordinates vs {} labels", coords.len(), labels.len()),
            ));
        }
        Ok(QueryBatch {
            coords,
            labels: Some(labels),
        })
    }

    pub fn with_labels_from(mut self, spec: &ShapeSpec) -> Self {
        self.labels = Some(occupancy_oracle(spec, &self.coords));
        self
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// `n` i.i.d. uniform points in `[0,1]^3`.
pub fn sample_queries_uniform(n: usize, seed: u64) -> Result<QueryBatch> {
    sample_queries_stream(n, seed, stream::QUERIES)
}

pub fn sample_queries_stream(n: usize, seed: u64, stream_id: u64) -> Result<QueryBatch> {
    if n == 0 {
        return Err(Error::Contract("query count must be at least 1".into()));
    }
    let mut r = rng(seed, stream_id);
    let coords = (0..n).map(|_| [r.gen::<f64>(), r.gen::<f64>(), r.gen::<f64>()]).collect();
    Ok(QueryBatch::unlabeled(coords))
}

pub fn dist(a: Point, b: Point) -> f64 {
    norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

pub fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}
