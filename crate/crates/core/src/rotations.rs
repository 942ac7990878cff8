//! The SO(3) carrier: unit quaternions, points on S², finite grids of either,
//! Haar sampling, the octahedral subgroup and particle-repulsion grids.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A rotation stored as a unit quaternion `(w, x, y, z)` with canonical sign.
///
/// `q` and `-q` describe the same rotation. The stored representative always
/// has `w > 0`, or `w == 0` with the first nonzero of `x, y, z` positive.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Rotation {
    q: [f64; 4],
}

impl TryFrom<[f64; 4]> for Rotation {
    type Error = Error;

    fn try_from(q: [f64; 4]) -> Result<Self> {
        Rotation::from_quaternion(q[0], q[1], q[2], q[3])
    }
}

impl From<Rotation> for [f64; 4] {
    fn from(r: Rotation) -> Self {
        r.q
    }
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation {
        q: [1.0, 0.0, 0.0, 0.0],
    };

    pub fn identity() -> Self {
        Self::IDENTITY
    }

    /// Builds a rotation from raw quaternion components. The input is
    /// normalized and sign-canonicalized; a zero quaternion is rejected.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::InvalidInput(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalized"
            )));
        }
        Ok(Self::canonical([w / n, x / n, y / n, z / n]))
    }

    /// Rotation by `angle` radians about `axis` (right-hand rule).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Self::canonical([c, s * a.x, s * a.y, s * a.z])
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::z(), angle)
    }

    fn canonical(q: [f64; 4]) -> Self {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let mut q = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        let lead = q.iter().copied().find(|c| *c != 0.0).unwrap_or(1.0);
        if lead < 0.0 {
            for c in &mut q {
                *c = -*c;
            }
        }
        // -0.0 would make bitwise comparisons of equal grids fail.
        for c in &mut q {
            if *c == 0.0 {
                *c = 0.0;
            }
        }
        Rotation { q }
    }

    /// Canonical components `(w, x, y, z)`.
    pub fn components(&self) -> [f64; 4] {
        self.q
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::from(self.q)
    }

    /// The group law: `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Rotation) -> Rotation {
        let [w1, x1, y1, z1] = self.q;
        let [w2, x2, y2, z2] = other.q;
        Self::canonical([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ])
    }

    pub fn inverse(&self) -> Rotation {
        let [w, x, y, z] = self.q;
        Self::canonical([w, -x, -y, -z])
    }

    /// The 3×3 rotation matrix.
    pub fn matrix(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.q;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let v = (self.q[1] * self.q[1] + self.q[2] * self.q[2] + self.q[3] * self.q[3]).sqrt();
        2.0 * v.atan2(self.q[0].abs())
    }

    /// Quaternion distance with antipodal identification,
    /// `min(‖q₁ − q₂‖, ‖q₁ + q₂‖)`.
    pub fn distance(&self, other: &Rotation) -> f64 {
        quat_distance(&self.as_vector(), &other.as_vector())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.matrix() * v
    }

    /// Haar-distributed rotation: a normalized 4D standard Gaussian.
    pub fn random_haar<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
        loop {
            let q: [f64; 4] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            let n2: f64 = q.iter().map(|c| c * c).sum();
            if n2 > 1e-24 {
                return Self::canonical(q);
            }
        }
    }
}

fn quat_distance(a: &Vector4<f64>, b: &Vector4<f64>) -> f64 {
    (a - b).norm().min((a + b).norm())
}

/// A point on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct S2Point {
    v: Vector3<f64>,
}

impl S2Point {
    pub fn north() -> Self {
        S2Point { v: Vector3::z() }
    }

    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        Self::from_vector(Vector3::new(x, y, z))
    }

    pub fn from_vector(v: Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::InvalidInput(format!(
                "vector {:?} cannot be projected onto the sphere",
                v.as_slice()
            )));
        }
        Ok(S2Point { v: v / n })
    }

    pub fn vector(&self) -> Vector3<f64> {
        self.v
    }

    pub fn components(&self) -> [f64; 3] {
        [self.v.x, self.v.y, self.v.z]
    }

    /// A deterministic rotation carrying the north pole onto this point: the
    /// minimal rotation about `north × p`, or a half turn about x at the south
    /// pole.
    pub fn lift(&self) -> Rotation {
        let axis = Vector3::z().cross(&self.v);
        let s = axis.norm();
        if s < 1e-15 {
            return if self.v.z > 0.0 {
                Rotation::IDENTITY
            } else {
                Rotation::rot_x(PI)
            };
        }
        Rotation::from_axis_angle(axis, s.atan2(self.v.z))
    }

    /// Angle between two points, in radians.
    pub fn angle_to(&self, other: &S2Point) -> f64 {
        self.v.cross(&other.v).norm().atan2(self.v.dot(&other.v))
    }
}

/// Spatial action of a rotation on a sphere point.
pub fn act_on_sphere(r: &Rotation, p: &S2Point) -> S2Point {
    let v = r.rotate(&p.v);
    S2Point { v: v / v.norm() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Group,
    Sphere,
}

/// A finite sample set on SO(3) or on S².
#[derive(Debug, Clone, PartialEq)]
pub enum Grid {
    Group(Vec<Rotation>),
    Sphere(Vec<S2Point>),
}

impl Grid {
    pub fn group(elements: Vec<Rotation>) -> Result<Self> {
        let g = Grid::Group(elements);
        g.validate()?;
        Ok(g)
    }

    pub fn sphere(points: Vec<S2Point>) -> Result<Self> {
        let g = Grid::Sphere(points);
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidInput("a grid needs at least one element".into()));
        }
        let dup = match self {
            Grid::Group(e) => has_exact_duplicate(e.iter().map(|r| r.components().to_vec())),
            Grid::Sphere(e) => has_exact_duplicate(e.iter().map(|p| p.components().to_vec())),
        };
        if dup {
            return Err(Error::InvalidInput("grid contains duplicate elements".into()));
        }
        Ok(())
    }

    pub fn space(&self) -> Space {
        match self {
            Grid::Group(_) => Space::Group,
            Grid::Sphere(_) => Space::Sphere,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Grid::Group(e) => e.len(),
            Grid::Sphere(e) => e.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Group elements representing each sample; sphere points are lifted with
    /// [`S2Point::lift`].
    pub fn rotations(&self) -> Vec<Rotation> {
        match self {
            Grid::Group(e) => e.clone(),
            Grid::Sphere(e) => e.iter().map(S2Point::lift).collect(),
        }
    }

    /// Smallest pairwise distance (chordal on S², antipodal quaternion
    /// distance on SO(3)). Infinite for a single element.
    pub fn min_pairwise_distance(&self) -> f64 {
        let pts = self.embedded();
        let mut best = f64::INFINITY;
        for i in 0..pts.len() {
            for j in (i + 1)..pts.len() {
                best = best.min(self.embedded_distance(&pts[i], &pts[j]));
            }
        }
        best
    }

    /// Mean distance from each element to its nearest neighbour.
    pub fn mean_nearest_distance(&self) -> f64 {
        let pts = self.embedded();
        if pts.len() < 2 {
            return f64::INFINITY;
        }
        let total: f64 = (0..pts.len())
            .map(|i| {
                (0..pts.len())
                    .filter(|j| *j != i)
                    .map(|j| self.embedded_distance(&pts[i], &pts[j]))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / pts.len() as f64
    }

    fn embedded(&self) -> Vec<Vector4<f64>> {
        match self {
            Grid::Group(e) => e.iter().map(Rotation::as_vector).collect(),
            Grid::Sphere(e) => e
                .iter()
                .map(|p| Vector4::new(p.v.x, p.v.y, p.v.z, 0.0))
                .collect(),
        }
    }

    fn embedded_distance(&self, a: &Vector4<f64>, b: &Vector4<f64>) -> f64 {
        match self {
            Grid::Group(_) => quat_distance(a, b),
            Grid::Sphere(_) => (a - b).norm(),
        }
    }

    /// JSON array of `[w,x,y,z]` (group) or `[x,y,z]` (sphere) rows, each
    /// number written with 17 significant digits.
    pub fn to_json(&self) -> String {
        let rows: Vec<Vec<f64>> = match self {
            Grid::Group(e) => e.iter().map(|r| r.components().to_vec()).collect(),
            Grid::Sphere(e) => e.iter().map(|p| p.components().to_vec()).collect(),
        };
        let mut out = String::from("[\n");
        for (i, row) in rows.iter().enumerate() {
            out.push_str("  [");
            for (k, v) in row.iter().enumerate() {
                if k > 0 {
                    out.push_str(", ");
                }
                out.push_str(&format_sig17(*v));
            }
            out.push(']');
            if i + 1 < rows.len() {
                out.push(',');
            }
            out.push('\n');
        }
        out.push(']');
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = serde_json::from_str(text)?;
        match rows.first().map(Vec::len) {
            Some(4) => {
                let mut e = Vec::with_capacity(rows.len());
                for r in &rows {
                    if r.len() != 4 {
                        return Err(Error::Format("mixed row lengths in grid JSON".into()));
                    }
                    e.push(Rotation::from_quaternion(r[0], r[1], r[2], r[3])?);
                }
                Grid::group(e)
            }
            Some(3) => {
                let mut e = Vec::with_capacity(rows.len());
                for r in &rows {
                    if r.len() != 3 {
                        return Err(Error::Format("mixed row lengths in grid JSON".into()));
                    }
                    e.push(S2Point::new(r[0], r[1], r[2])?);
                }
                Grid::sphere(e)
            }
            Some(n) => Err(Error::Format(format!("grid rows must have 3 or 4 entries, got {n}"))),
            None => Err(Error::Format("empty grid JSON".into())),
        }
    }
}

fn has_exact_duplicate(rows: impl Iterator<Item = Vec<f64>>) -> bool {
    let mut v: Vec<Vec<f64>> = rows.collect();
    v.sort_by(|a, b| lex_cmp(a, b));
    v.windows(2).any(|w| w[0] == w[1])
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// Formats a float with 17 significant digits in scientific notation (valid
/// JSON and CSV, and round-trips every f64 exactly).
pub fn format_sig17(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v:.16e}").expect("write to String");
    s
}

/// The 24 rotational symmetries of the cube, sorted by canonical components.
pub fn cubic_group() -> Grid {
    let generators = [Rotation::rot_z(PI / 2.0), Rotation::rot_x(PI / 2.0)];
    let mut elements = vec![Rotation::IDENTITY];
    let mut frontier = vec![Rotation::IDENTITY];
    while let Some(r) = frontier.pop() {
        for g in &generators {
            let c = snap(g.compose(&r));
            if !elements.iter().any(|e| e.distance(&c) < 1e-9) {
                elements.push(c);
                frontier.push(c);
            }
        }
    }
    debug_assert_eq!(elements.len(), 24);
    elements.sort_by(|a, b| lex_cmp(&a.components(), &b.components()));
    Grid::Group(elements)
}

/// Rounds components that are within 1e-12 of a multiple of 1/2 or 1/√2, the
/// only magnitudes appearing in octahedral quaternions.
fn snap(r: Rotation) -> Rotation {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let targets = [0.0, 0.5, h, 1.0];
    let mut q = r.components();
    for c in &mut q {
        for t in targets {
            if (c.abs() - t).abs() < 1e-12 {
                *c = t.copysign(*c);
            }
        }
    }
    Rotation::canonical(q)
}

/// Parameters of the Coulomb repulsion simulation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RepulsionParams {
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for RepulsionParams {
    fn default() -> Self {
        RepulsionParams {
            steps: 500,
            step_size: 0.01,
            seed: 0,
        }
    }
}

/// `n` well-spaced points obtained by projected gradient descent on the
/// energy `Σ 1/dist(i, j)`.
///
/// Each step moves every particle along its tangential force, scaled by the
/// mean force magnitude and clipped so no particle moves further than the
/// current step size; the step size follows a cosine decay from `step_size`
/// to zero. Sphere distances are chordal; group
/// distances identify antipodal quaternions.
pub fn repulsion_grid(space: Space, n: usize, params: RepulsionParams) -> Result<Grid> {
    if n == 0 {
        return Err(Error::InvalidInput("repulsion grid needs N >= 1".into()));
    }
    if n == 1 {
        return Ok(match space {
            Space::Group => Grid::Group(vec![Rotation::IDENTITY]),
            Space::Sphere => Grid::Sphere(vec![S2Point::north()]),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let dim = match space {
        Space::Group => 4,
        Space::Sphere => 3,
    };
    let mut pts: Vec<Vector4<f64>> = (0..n)
        .map(|_| {
            let mut v = Vector4::<f64>::zeros();
            for k in 0..dim {
                v[k] = rng.sample(StandardNormal);
            }
            v.normalize()
        })
        .collect();

    let mut forces = vec![Vector4::<f64>::zeros(); n];
    for step in 0..params.steps {
        for f in forces.iter_mut() {
            *f = Vector4::zeros();
        }
        for i in 0..n {
            for j in (i + 1)..n {
                // On the group, interact with whichever of ±q_j is nearer.
                let mut sign = 1.0;
                let mut diff = pts[i] - pts[j];
                if space == Space::Group {
                    let alt = pts[i] + pts[j];
                    if alt.norm_squared() < diff.norm_squared() {
                        diff = alt;
                        sign = -1.0;
                    }
                }
                let d2 = diff.norm_squared().max(1e-24);
                let push = diff / (d2 * d2.sqrt());
                forces[i] += push;
                forces[j] -= push * sign;
            }
        }
        let mut fsum = 0.0f64;
        for (f, p) in forces.iter_mut().zip(&pts) {
            *f -= *p * f.dot(p);
            fsum += f.norm();
        }
        let fref = fsum / n as f64;
        if fref == 0.0 {
            break;
        }
        let lr = params.step_size * 0.5 * (1.0 + (PI * step as f64 / params.steps as f64).cos());
        for (p, f) in pts.iter_mut().zip(&forces) {
            let scale = lr / f.norm().max(fref);
            *p = (*p + *f * scale).normalize();
        }
    }

    let grid = match space {
        Space::Group => {
            let mut e: Vec<Rotation> = pts
                .iter()
                .map(|p| Rotation::canonical([p[0], p[1], p[2], p[3]]))
                .collect();
            e.sort_by(|a, b| lex_cmp(&a.components(), &b.components()));
            Grid::Group(e)
        }
        Space::Sphere => {
            let mut e: Vec<S2Point> = pts
                .iter()
                .map(|p| S2Point {
                    v: Vector3::new(p[0], p[1], p[2]).normalize(),
                })
                .collect();
            e.sort_by(|a, b| lex_cmp(&a.components(), &b.components()));
            Grid::Sphere(e)
        }
    };
    grid.validate()?;
    Ok(grid)
}
