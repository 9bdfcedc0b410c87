use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::dataset::{Dataset, Generator, Split};
use crate::error::{Error, Result};
use crate::geometry::{centroid, Point, PointCloud};
use crate::network::Task;

const TORUS_MAJOR: f64 = 1.0;
const TORUS_MINOR: f64 = 0.35;
const CYLINDER_RADIUS: f64 = 0.6;
const CYLINDER_HALF_HEIGHT: f64 = 1.0;

/// Fraction of every class (or of a segmentation set) held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Sphere,
    Torus,
    Cube,
    Cylinder,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Sphere, ShapeKind::Torus, ShapeKind::Cube, ShapeKind::Cylinder];
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Torus => "torus",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
        })
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Argument(format!("unknown shape `{s}` (expected sphere, torus, cube or cylinder)")))
    }
}

/// `n` points drawn uniformly from the noise-free surface of `kind`, in its
/// own frame: unit sphere, ring torus around z, cube `[-1, 1]³`, capped
/// cylinder along z.
pub fn sample_surface(kind: ShapeKind, n: usize, rng: &mut impl Rng) -> Vec<Point> {
    (0..n).map(|_| surface_point(kind, rng)).collect()
}

fn unit_vector(rng: &mut impl Rng) -> Point {
    loop {
        let v: Point = std::array::from_fn(|_| StandardNormal.sample(rng));
        let norm = norm(&v);
        if norm > 1e-9 {
            return v.map(|x| x / norm);
        }
    }
}

fn norm(v: &Point) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn surface_point(kind: ShapeKind, rng: &mut impl Rng) -> Point {
    match kind {
        ShapeKind::Sphere => unit_vector(rng),
        ShapeKind::Torus => {
            // the area element grows with the distance from the axis
            let (big, small) = (TORUS_MAJOR, TORUS_MINOR);
            let theta = loop {
                let t = rng.random_range(0.0..TAU);
                if rng.random_range(0.0..big + small) <= big + small * t.cos() {
                    break t;
                }
            };
            let phi = rng.random_range(0.0..TAU);
            let ring = big + small * theta.cos();
            [ring * phi.cos(), ring * phi.sin(), small * theta.sin()]
        }
        ShapeKind::Cube => {
            let face = rng.random_range(0..6);
            let (axis, sign) = (face / 2, if face % 2 == 0 { 1.0 } else { -1.0 });
            let mut p: Point = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
            p[axis] = sign;
            p
        }
        ShapeKind::Cylinder => {
            let (r, h) = (CYLINDER_RADIUS, CYLINDER_HALF_HEIGHT);
            let side = TAU * r * 2.0 * h;
            let caps = 2.0 * PI * r * r;
            let phi = rng.random_range(0.0..TAU);
            if rng.random_range(0.0..side + caps) < side {
                [r * phi.cos(), r * phi.sin(), rng.random_range(-h..=h)]
            } else {
                let rho = r * rng.random_range(0.0f64..=1.0).sqrt();
                let z = if rng.random_bool(0.5) { h } else { -h };
                [rho * phi.cos(), rho * phi.sin(), z]
            }
        }
    }
}

/// Uniformly random rotation, as a row-major 3×3 matrix.
pub fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let q: [f64; 4] = loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            break q.map(|x| x / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn rotate(m: &[[f64; 3]; 3], p: &Point) -> Point {
    std::array::from_fn(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2])
}

/// Shift and scale that [`crate::geometry::normalize_unit_cube`] would apply.
fn unit_cube_transform(points: &[Point]) -> (Point, f64) {
    let c = centroid(points);
    let extent = points
        .iter()
        .flat_map(|p| (0..3).map(move |i| (p[i] - c[i]).abs()))
        .fold(0.0f64, f64::max);
    (c, if extent > 0.0 { 1.0 / extent } else { 1.0 })
}

fn apply_transform(p: &Point, (c, s): &(Point, f64)) -> Point {
    std::array::from_fn(|i| (p[i] - c[i]) * s)
}

/// Test-set size for a group of `n` samples.
fn test_count(n: usize) -> usize {
    ((n as f64 * TEST_FRACTION).round() as usize).clamp(1, n - 1)
}

/// One jittered, rotated and normalized sample of `kind`.
pub fn shape_cloud(kind: ShapeKind, n_points: usize, noise_sigma: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    let bad = || Error::Argument(format!("noise sigma must be finite and non-negative, got {noise_sigma}"));
    if !(noise_sigma >= 0.0) {
        return Err(bad());
    }
    let jitter = Normal::new(0.0, noise_sigma).map_err(|_| bad())?;
    let rot = random_rotation(rng);
    let points: Vec<Point> = sample_surface(kind, n_points, rng)
        .iter()
        .map(|p| rotate(&rot, &p.map(|v| v + jitter.sample(rng))))
        .collect();
    let t = unit_cube_transform(&points);
    PointCloud::new(points.iter().map(|p| apply_transform(p, &t)).collect())
}

/// Labelled shapes, one class per entry of `kinds` in the given order, with a
/// stratified seeded 80/20 split.
pub fn gen_classification_set(
    kinds: &[ShapeKind],
    per_class: usize,
    n_points: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if kinds.is_empty() {
        return Err(Error::Argument("no shape kinds given".into()));
    }
    if per_class < 2 {
        return Err(Error::Argument(format!("per_class must be at least 2, got {per_class}")));
    }
    if n_points < 16 {
        return Err(Error::Argument(format!("n_points must be at least 16, got {n_points}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(kinds.len() * per_class);
    let mut split = Vec::with_capacity(kinds.len() * per_class);
    for (class, &kind) in kinds.iter().enumerate() {
        for _ in 0..per_class {
            samples.push(shape_cloud(kind, n_points, noise_sigma, &mut rng)?.with_class(class as i32));
        }
        let mut marks = vec![Split::Train; per_class];
        marks[..test_count(per_class)].fill(Split::Test);
        marks.shuffle(&mut rng);
        split.extend(marks);
    }
    Dataset::new(
        Task::Classify,
        samples,
        split,
        Some(Generator::Classification {
            kinds: kinds.to_vec(),
            per_class,
            n_points,
            noise_sigma,
            seed,
        }),
    )
}

/// Solid ellipsoid with orthonormal axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: Point,
    pub axes: [Point; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    /// `Σ ((p − c)·eᵢ / rᵢ)²`: below 1 inside, 1 on the surface.
    pub fn implicit(&self, p: &Point) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        self.axes
            .iter()
            .zip(&self.radii)
            .map(|(e, r)| {
                let t = (d[0] * e[0] + d[1] * e[1] + d[2] * e[2]) / r;
                t * t
            })
            .sum()
    }

    fn at(&self, u: &Point) -> Point {
        std::array::from_fn(|i| self.center[i] + (0..3).map(|a| self.axes[a][i] * self.radii[a] * u[a]).sum::<f64>())
    }

    fn transformed(&self, rot: &[[f64; 3]; 3], t: &(Point, f64)) -> Ellipsoid {
        Ellipsoid {
            center: apply_transform(&rotate(rot, &self.center), t),
            axes: self.axes.map(|e| rotate(rot, &e)),
            radii: self.radii.map(|r| r * t.1),
        }
    }
}

const TUBE_LENGTH: f64 = 3.0;
const TUBE_RADIUS: f64 = 0.08;
const CENTERLINE_SEGMENTS: usize = 256;
/// Scale from the sampled size ratio to the mean blob radius.
const BLOB_SCALE: f64 = 0.8;
const MIN_BLOB_FRACTION: f64 = 0.05;
const MAX_BLOB_FRACTION: f64 = 0.5;

/// Planar arc with an out-of-plane sway, parameterized on `[0, 1]`.
struct Centerline {
    bend_radius: f64,
    sway: f64,
}

impl Centerline {
    fn at(&self, t: f64) -> Point {
        let phi = t * TUBE_LENGTH / self.bend_radius;
        [
            self.bend_radius * phi.sin(),
            self.bend_radius * (1.0 - phi.cos()),
            self.sway * (PI * t).sin(),
        ]
    }

    /// Unit tangent and two unit normals completing a right-handed frame.
    fn frame(&self, t: f64) -> [Point; 3] {
        let h = 1e-6;
        let (a, b) = (self.at(t - h), self.at(t + h));
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let n = norm(&d);
        let tan = d.map(|v| v / n);
        // z is never parallel to the tangent: the sway is small against the arc
        let z = [0.0, 0.0, 1.0];
        let dot = tan[2];
        let n1 = {
            let v = [z[0] - dot * tan[0], z[1] - dot * tan[1], z[2] - dot * tan[2]];
            let n = norm(&v);
            v.map(|x| x / n)
        };
        let n2 = [
            tan[1] * n1[2] - tan[2] * n1[1],
            tan[2] * n1[0] - tan[0] * n1[2],
            tan[0] * n1[1] - tan[1] * n1[0],
        ];
        [tan, n1, n2]
    }

    fn distance(&self, polyline: &[Point], p: &Point) -> f64 {
        polyline
            .windows(2)
            .map(|w| segment_distance(&w[0], &w[1], p))
            .fold(f64::INFINITY, f64::min)
    }
}

fn segment_distance(a: &Point, b: &Point, p: &Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0);
    norm(&[ap[0] - t * ab[0], ap[1] - t * ab[1], ap[2] - t * ab[2]])
}

/// Surface area of an ellipsoid (Knud Thomsen's approximation).
fn ellipsoid_area(r: &[f64; 3]) -> f64 {
    let p = 1.6075;
    let (a, b, c) = (r[0].powf(p), r[1].powf(p), r[2].powf(p));
    4.0 * PI * ((a * b + a * c + b * c) / 3.0).powf(1.0 / p)
}

/// A bent tube (label 0) with one ellipsoidal blob attached (label 1), both
/// sampled on their visible surface, then rotated and normalized. Returns
/// the blob in the final frame too.
pub fn vessel_cloud(n_points: usize, rng: &mut impl Rng) -> Result<(PointCloud, Ellipsoid)> {
    if n_points < 16 {
        return Err(Error::Argument(format!("n_points must be at least 16, got {n_points}")));
    }
    let line = Centerline {
        bend_radius: rng.random_range(1.5..4.0),
        sway: rng.random_range(-0.4..0.4),
    };
    let polyline: Vec<Point> = (0..=CENTERLINE_SEGMENTS)
        .map(|i| line.at(i as f64 / CENTERLINE_SEGMENTS as f64))
        .collect();

    let ratio = rng.random_range(0.2..=0.6);
    let radii: [f64; 3] = std::array::from_fn(|_| BLOB_SCALE * ratio * rng.random_range(0.8..1.2));
    let t0 = rng.random_range(0.25..0.75);
    let [tan, n1, n2] = line.frame(t0);
    let psi = rng.random_range(0.0..TAU);
    let out = [0, 1, 2].map(|i| psi.cos() * n1[i] + psi.sin() * n2[i]);
    let side = [
        out[1] * tan[2] - out[2] * tan[1],
        out[2] * tan[0] - out[0] * tan[2],
        out[0] * tan[1] - out[1] * tan[0],
    ];
    // the blob straddles the wall so its base merges into the tube
    let c = line.at(t0);
    let lift = TUBE_RADIUS + 0.4 * radii[1];
    let blob = Ellipsoid {
        center: [0, 1, 2].map(|i| c[i] + lift * out[i]),
        axes: [tan, out, side],
        radii,
    };

    let tube_area = TAU * TUBE_RADIUS * TUBE_LENGTH;
    let blob_area = ellipsoid_area(&radii);
    let lo = (MIN_BLOB_FRACTION * n_points as f64).ceil() as usize;
    let hi = (MAX_BLOB_FRACTION * n_points as f64).floor() as usize;
    let n_blob = ((n_points as f64 * blob_area / (tube_area + blob_area)).round() as usize).clamp(lo, hi);

    let mut points = Vec::with_capacity(n_points);
    while points.len() < n_points - n_blob {
        let t = rng.random_range(0.0..=1.0);
        let theta = rng.random_range(0.0..TAU);
        let [_, a, b] = line.frame(t);
        let c = line.at(t);
        let p = [0, 1, 2].map(|i| c[i] + TUBE_RADIUS * (theta.cos() * a[i] + theta.sin() * b[i]));
        if blob.implicit(&p) > 1.0 {
            points.push(p);
        }
    }
    // rejection against the largest area element keeps the blob uniform
    let [a, b, cc] = radii;
    let bound = (b * cc).max(a * cc).max(a * b);
    while points.len() < n_points {
        let u = unit_vector(rng);
        let w = ((b * cc * u[0]).powi(2) + (a * cc * u[1]).powi(2) + (a * b * u[2]).powi(2)).sqrt();
        if rng.random_range(0.0..bound) > w {
            continue;
        }
        let p = blob.at(&u);
        if line.distance(&polyline, &p) > TUBE_RADIUS {
            points.push(p);
        }
    }

    let rot = random_rotation(rng);
    let rotated: Vec<Point> = points.iter().map(|p| rotate(&rot, p)).collect();
    let t = unit_cube_transform(&rotated);
    let positions = rotated.iter().map(|p| apply_transform(p, &t)).collect();
    let mut labels = vec![0; n_points - n_blob];
    labels.resize(n_points, 1);
    let cloud = PointCloud::new(positions)?.with_labels(labels)?;
    Ok((cloud, blob.transformed(&rot, &t)))
}

/// `count` vessel clouds with a seeded 80/20 split.
pub fn gen_segmentation_set(count: usize, n_points: usize, seed: u64) -> Result<Dataset> {
    if count < 2 {
        return Err(Error::Argument(format!("count must be at least 2, got {count}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|_| vessel_cloud(n_points, &mut rng).map(|(c, _)| c))
        .collect::<Result<Vec<_>>>()?;
    let mut split = vec![Split::Train; count];
    split[..test_count(count)].fill(Split::Test);
    split.shuffle(&mut rng);
    Dataset::new(
        Task::Segment,
        samples,
        split,
        Some(Generator::Segmentation { count, n_points, seed }),
    )
}
