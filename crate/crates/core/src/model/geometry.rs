//! Point clouds, the harmonic lift and farthest-point sampling.

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::bundle::FieldBundle;
use crate::error::{Error, Result};
use crate::harmonics::{dim, real_sph_harm_all, MAX_L};
use crate::rotations::{Rotation, S2Point};

/// Relative tolerance under which two distances count as tied.
pub const TIE_RTOL: f64 = 1e-9;

/// Pairs closer than this are treated as coincident and skipped by the lift.
const COINCIDENT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 3]>", into = "Vec<[f64; 3]>")]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
}

impl TryFrom<Vec<[f64; 3]>> for PointCloud {
    type Error = Error;

    fn try_from(v: Vec<[f64; 3]>) -> Result<Self> {
        PointCloud::new(v.into_iter().map(Vector3::from).collect())
    }
}

impl From<PointCloud> for Vec<[f64; 3]> {
    fn from(c: PointCloud) -> Self {
        c.points.iter().map(|p| [p.x, p.y, p.z]).collect()
    }
}

impl PointCloud {
    /// Centers the points on their centroid.
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("a point cloud needs at least one point".into()));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        let c = centroid(&points);
        Ok(PointCloud {
            points: points.into_iter().map(|p| p - c).collect(),
        })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn rotate(&self, r: &Rotation) -> PointCloud {
        let m = r.matrix();
        PointCloud {
            points: self.points.iter().map(|p| m * p).collect(),
        }
    }
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().fold(Vector3::zeros(), |a, p| a + p) / points.len() as f64
}

/// Hat-function weights of distance `d` over `n_radial` uniform bins on
/// `[0, radius]`. A single bin weighs every neighbour by 1.
pub fn radial_weights(d: f64, radius: f64, n_radial: usize) -> Vec<f64> {
    if n_radial == 1 {
        return vec![1.0];
    }
    let width = radius / (n_radial - 1) as f64;
    (0..n_radial)
        .map(|b| (1.0 - (d - b as f64 * width).abs() / width).max(0.0))
        .collect()
}

/// Per point and for every `l ≤ lmax` and radial bin `b`, the field
/// `Σ_q w_b(‖q − p‖)·Y^l((q − p)/‖q − p‖)` over neighbours within `radius`.
/// Copy `b` of frequency `l` is radial bin `b`.
pub fn harmonic_lift(cloud: &PointCloud, radius: f64, n_radial: usize, lmax: usize) -> Result<FieldBundle> {
    if !(radius > 0.0) {
        return Err(Error::InvalidInput(format!("lift radius must be positive, got {radius}")));
    }
    if n_radial == 0 {
        return Err(Error::InvalidInput("lift needs at least one radial bin".into()));
    }
    if lmax > MAX_L {
        return Err(Error::BandLimit(lmax));
    }
    let pts = cloud.points();
    let mut blocks: Vec<DMatrix<f64>> = (0..=lmax)
        .map(|l| DMatrix::zeros(pts.len(), n_radial * dim(l)))
        .collect();
    for (i, p) in pts.iter().enumerate() {
        for (j, q) in pts.iter().enumerate() {
            let rel = q - p;
            let d = rel.norm();
            if i == j || d < COINCIDENT || d > radius {
                continue;
            }
            let w = radial_weights(d, radius, n_radial);
            let dir = S2Point::from_vector(rel)?;
            let ys = real_sph_harm_all(lmax, &dir);
            for (l, y) in ys.iter().enumerate() {
                let dl = dim(l);
                for (b, wb) in w.iter().enumerate() {
                    if *wb == 0.0 {
                        continue;
                    }
                    for (c, yc) in y.iter().enumerate() {
                        blocks[l][(i, b * dl + c)] += wb * yc;
                    }
                }
            }
        }
    }
    FieldBundle::new(blocks)
}

/// Index of the maximum, treating values within `TIE_RTOL` (relative) of the
/// running best as ties resolved toward the lower index. `None` entries are
/// skipped.
fn argmax_low_tie(values: impl Iterator<Item = Option<f64>>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        let Some(v) = v else { continue };
        match best {
            None => best = Some((i, v)),
            Some((_, b)) if v > b + TIE_RTOL * b.abs().max(v.abs()) => best = Some((i, v)),
            _ => {}
        }
    }
    best.map(|b| b.0)
}

/// Number of points kept by a downsampling ratio.
pub fn kept_count(points: usize, ratio: f64) -> usize {
    ((ratio * points as f64).ceil() as usize).clamp(1, points)
}

/// Farthest-point sampling of `ceil(ratio·P)` points, in selection order.
///
/// The first point is the one farthest from the centroid; each next point
/// maximizes the distance to the selected set. Ties go to the lower index.
pub fn fps(points: &[Vector3<f64>], ratio: f64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidInput(format!("FPS ratio must be in (0, 1], got {ratio}")));
    }
    if points.is_empty() {
        return Err(Error::InvalidInput("FPS on an empty point set".into()));
    }
    let k = kept_count(points.len(), ratio);
    let c = centroid(points);
    let first = argmax_low_tie(points.iter().map(|p| Some((p - c).norm()))).expect("nonempty");
    let mut selected = vec![first];
    let mut mind: Vec<f64> = points.iter().map(|p| (p - points[first]).norm()).collect();
    let mut taken = vec![false; points.len()];
    taken[first] = true;
    while selected.len() < k {
        let next = argmax_low_tie(
            mind.iter()
                .zip(&taken)
                .map(|(d, t)| (!*t).then_some(*d)),
        )
        .expect("nonempty");
        taken[next] = true;
        selected.push(next);
        for (m, p) in mind.iter_mut().zip(points) {
            *m = m.min((p - points[next]).norm());
        }
    }
    Ok(selected)
}

/// FPS indices sorted ascending, the order in which points are kept.
pub fn fps_sorted(points: &[Vector3<f64>], ratio: f64) -> Result<Vec<usize>> {
    let mut idx = fps(points, ratio)?;
    idx.sort_unstable();
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| Vector3::from_fn(|_, _| StandardNormal.sample(rng)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ingestion_centers_the_cloud() {
        let c = PointCloud::new(vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(3.0, 2.0, 1.0)]).unwrap();
        assert_eq!(c.points()[0], Vector3::new(-1.0, 0.0, 1.0));
        assert!(PointCloud::new(vec![]).is_err());
    }

    #[test]
    fn single_neighbour_above_gives_zonal_fields() {
        let c = PointCloud::new(vec![Vector3::zeros(), Vector3::new(0.0, 0.0, 0.5)]).unwrap();
        let b = harmonic_lift(&c, 1.0, 3, 3).unwrap();
        for l in 0..=3 {
            for k in 0..3 {
                let f = b.field(0, l, k);
                for (m, v) in f.iter().enumerate() {
                    if m != l {
                        assert!(v.abs() < 1e-15);
                    }
                }
            }
            // Distance 0.5 sits exactly on the middle bin.
            assert!((b.field(0, l, 1)[l] - 1.0).abs() < 1e-12);
            assert_eq!(b.field(0, l, 0)[l], 0.0);
        }
    }

    #[test]
    fn isolated_point_has_zero_fields() {
        let c = PointCloud::new(vec![Vector3::zeros(), Vector3::new(5.0, 0.0, 0.0)]).unwrap();
        let b = harmonic_lift(&c, 1.0, 4, 2).unwrap();
        for l in 0..=2 {
            assert_eq!(b.block(l).amax(), 0.0);
        }
    }

    #[test]
    fn lift_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let c = random_cloud(7, &mut rng);
            let r = Rotation::random_haar(&mut rng);
            let lifted = harmonic_lift(&c, 2.5, 4, 3).unwrap();
            let rotated = harmonic_lift(&c.rotate(&r), 2.5, 4, 3).unwrap();
            assert!(rotated.max_abs_diff(&lifted.rotate(&r)) < 1e-10);
        }
    }

    #[test]
    fn hat_weights_partition_unity_inside() {
        for d in [0.0, 0.1, 0.33, 0.5, 0.99] {
            let w = radial_weights(d, 1.0, 4);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fps_with_full_ratio_returns_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_cloud(9, &mut rng);
        let mut idx = fps(c.points(), 1.0).unwrap();
        assert_eq!(idx.len(), 9);
        let far = (0..9)
            .max_by(|&a, &b| c.points()[a].norm().total_cmp(&c.points()[b].norm()))
            .unwrap();
        assert_eq!(idx[0], far);
        idx.sort_unstable();
        assert_eq!(idx, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn fps_ignores_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.random_range(1..20);
            let c = random_cloud(n, &mut rng);
            let r = Rotation::random_haar(&mut rng);
            for ratio in [0.25, 0.5, 1.0] {
                assert_eq!(fps(c.points(), ratio).unwrap(), fps(c.rotate(&r).points(), ratio).unwrap());
            }
        }
    }

    #[test]
    fn fps_ties_go_to_the_lower_index() {
        let pts = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let idx = fps(&pts, 1.0).unwrap();
        assert_eq!(idx[0], 0);
        assert_eq!(idx[1], 1);
        assert!(fps(&pts, 0.0).is_err());
        assert_eq!(kept_count(4, 0.5), 2);
        assert_eq!(kept_count(3, 0.5), 2);
        assert_eq!(kept_count(1, 0.5), 1);
    }
}
