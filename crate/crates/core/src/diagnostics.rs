//! Orthogonality metrics for sampling matrices and the relative equivariance
//! error.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::fourier::SamplingMatrix;
use crate::rotations::Rotation;

/// Row scaling applied before computing ε₂.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eps2Mode {
    /// Rows exactly as stored.
    AsIs,
    /// Rows rescaled to norm `√F`, i.e. as if δ̂ were unnormalized.
    BlockRescaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthoReport {
    pub eps1: f64,
    /// ε₂ of the unit-row matrix.
    pub eps2_normalized: f64,
    /// ε₂ after rescaling rows to norm `√F`.
    pub eps2_unnormalized: f64,
    pub n: usize,
    pub f: usize,
}

fn rows_scaled_to(a: &DMatrix<f64>, target: f64) -> DMatrix<f64> {
    let mut out = a.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row *= target / n;
        }
    }
    out
}

/// `ε₁ = (1/N)·Σ_{ij} |(AAᵀ)_{ij} − δ_{ij}|`, with rows scaled to unit norm.
pub fn epsilon1_matrix(a: &DMatrix<f64>) -> f64 {
    let u = rows_scaled_to(a, 1.0);
    let gram = &u * u.transpose();
    let n = a.nrows();
    let dev = gram - DMatrix::identity(n, n);
    pairwise_sum(&dev.iter().map(|v| v.abs()).collect::<Vec<_>>()) / n as f64
}

/// `ε₂ = (1/F)·Σ_{ij} |(1/N)(AᵀA)_{ij} − δ_{ij}|`.
pub fn epsilon2_matrix(a: &DMatrix<f64>, mode: Eps2Mode) -> f64 {
    let (n, f) = (a.nrows(), a.ncols());
    let scaled;
    let a = match mode {
        Eps2Mode::AsIs => a,
        Eps2Mode::BlockRescaled => {
            scaled = rows_scaled_to(a, (f as f64).sqrt());
            &scaled
        }
    };
    let gram = a.transpose() * a / n as f64;
    let dev = gram - DMatrix::identity(f, f);
    pairwise_sum(&dev.iter().map(|v| v.abs()).collect::<Vec<_>>()) / f as f64
}

pub fn epsilon1(a: &SamplingMatrix) -> f64 {
    epsilon1_matrix(a.matrix())
}

pub fn epsilon2(a: &SamplingMatrix, mode: Eps2Mode) -> f64 {
    epsilon2_matrix(a.matrix(), mode)
}

pub fn ortho_report_matrix(a: &DMatrix<f64>) -> OrthoReport {
    OrthoReport {
        eps1: epsilon1_matrix(a),
        eps2_normalized: epsilon2_matrix(&rows_scaled_to(a, 1.0), Eps2Mode::AsIs),
        eps2_unnormalized: epsilon2_matrix(a, Eps2Mode::BlockRescaled),
        n: a.nrows(),
        f: a.ncols(),
    }
}

pub fn ortho_report(a: &SamplingMatrix) -> OrthoReport {
    ortho_report_matrix(a.matrix())
}

/// Averages reports field by field (e.g. over spatial points, then over
/// samples).
pub fn mean_report(reports: &[OrthoReport]) -> Option<OrthoReport> {
    let first = reports.first()?;
    let avg = |f: fn(&OrthoReport) -> f64| {
        pairwise_sum(&reports.iter().map(f).collect::<Vec<_>>()) / reports.len() as f64
    };
    Some(OrthoReport {
        eps1: avg(|r| r.eps1),
        eps2_normalized: avg(|r| r.eps2_normalized),
        eps2_unnormalized: avg(|r| r.eps2_unnormalized),
        n: first.n,
        f: first.f,
    })
}

/// Anything with a flat list of values (matrices, vectors).
pub trait Signal {
    fn values(&self) -> &[f64];
}

impl Signal for DMatrix<f64> {
    fn values(&self) -> &[f64] {
        self.as_slice()
    }
}

impl Signal for DVector<f64> {
    fn values(&self) -> &[f64] {
        self.as_slice()
    }
}

impl Signal for Vec<f64> {
    fn values(&self) -> &[f64] {
        self
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative equivariance error
/// `‖T_out(f(x)) − f(T(x))‖ / max(‖f(x)‖, ‖f(T(x))‖)`.
///
/// Passing the identity as `apply_out` gives the invariance error. Returns 0
/// when both outputs vanish.
pub fn equivariance_error<X, Y: Signal>(
    f: impl Fn(&X) -> Y,
    x: &X,
    apply_t: impl Fn(&X) -> X,
    apply_out: impl Fn(&Y) -> Y,
) -> f64 {
    let fx = f(x);
    let ftx = f(&apply_t(x));
    let tfx = apply_out(&fx);
    relative_error(fx.values(), ftx.values(), tfx.values())
}

/// Invariance form of [`equivariance_error`] from precomputed outputs.
pub fn invariance_error(fx: &[f64], ftx: &[f64]) -> f64 {
    relative_error(fx, ftx, fx)
}

fn relative_error(fx: &[f64], ftx: &[f64], tfx: &[f64]) -> f64 {
    assert_eq!(tfx.len(), ftx.len(), "outputs differ in size");
    let denom = norm(fx).max(norm(ftx));
    if denom == 0.0 {
        return 0.0;
    }
    let diff: Vec<f64> = tfx.iter().zip(ftx).map(|(a, b)| a - b).collect();
    norm(&diff) / denom
}

/// Mean of `error(r)` over a set of rotations (e.g. the cubic group).
pub fn mean_over_rotations(rotations: &[Rotation], error: impl Fn(&Rotation) -> f64) -> f64 {
    let v: Vec<f64> = rotations.iter().map(error).collect();
    pairwise_sum(&v) / v.len().max(1) as f64
}

/// Sum by pairwise (tree) reduction; the order depends only on the length.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n if n <= 8 => v.iter().sum(),
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = pairwise_sum(v) / v.len() as f64;
    let var = pairwise_sum(&v.iter().map(|x| (x - m) * (x - m)).collect::<Vec<_>>()) / v.len() as f64;
    (m, var.sqrt())
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::sampling_matrix;
    use crate::reptypes::FieldType;
    use crate::rotations::{cubic_group, repulsion_grid, Grid, RepulsionParams, Space};

    fn q3_matrix(n: usize, normalized: bool) -> SamplingMatrix {
        let grid = repulsion_grid(Space::Sphere, n, RepulsionParams::default()).unwrap();
        sampling_matrix(&FieldType::quotient(3).unwrap(), &grid, normalized).unwrap()
    }

    #[test]
    fn single_row_has_zero_eps1() {
        let grid = Grid::group(vec![Rotation::rot_x(0.3)]).unwrap();
        let a = sampling_matrix(&FieldType::quotient(3).unwrap(), &grid, true).unwrap();
        assert!(epsilon1(&a) < 1e-15);
    }

    #[test]
    fn eps1_grows_past_the_representation_size() {
        assert!(epsilon1(&q3_matrix(64, true)) > epsilon1(&q3_matrix(8, true)));
    }

    #[test]
    fn cubic_grid_is_exact_for_regular_degree_one() {
        let t = FieldType::regular(1).unwrap();
        for normalized in [false, true] {
            let a = sampling_matrix(&t, &cubic_group(), normalized).unwrap();
            assert!(epsilon2(&a, Eps2Mode::BlockRescaled) < 1e-12);
        }
    }

    #[test]
    fn as_is_eps2_of_unit_rows_tends_to_one_minus_inverse_f() {
        let a = q3_matrix(1024, true);
        let e = epsilon2(&a, Eps2Mode::AsIs);
        assert!((e - (1.0 - 1.0 / 16.0)).abs() < 0.02, "{e}");
        assert!(epsilon2(&a, Eps2Mode::BlockRescaled) < 0.05);
    }

    #[test]
    fn metrics_ignore_row_order() {
        let a = q3_matrix(20, true);
        let m = a.matrix();
        let perm: Vec<usize> = (0..20).rev().collect();
        let p = m.select_rows(&perm);
        assert!((epsilon1_matrix(m) - epsilon1_matrix(&p)).abs() < 1e-12);
        for mode in [Eps2Mode::AsIs, Eps2Mode::BlockRescaled] {
            assert!((epsilon2_matrix(m, mode) - epsilon2_matrix(&p, mode)).abs() < 1e-12);
        }
    }

    #[test]
    fn orthonormal_rows_have_zero_eps1() {
        let m = DMatrix::<f64>::identity(4, 6);
        assert_eq!(epsilon1_matrix(&m), 0.0);
        // Columns with AᵀA = N·I give zero block-rescaled ε₂.
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]);
        assert!(epsilon2_matrix(&h, Eps2Mode::BlockRescaled) < 1e-15);
    }

    #[test]
    fn equivariance_error_cases() {
        let x = vec![1.0, 2.0];
        let constant = |_: &Vec<f64>| vec![3.0, 4.0];
        assert_eq!(equivariance_error(constant, &x, |v| v.iter().map(|a| -a).collect(), |y| y.clone()), 0.0);
        let flip = |v: &Vec<f64>| v.clone();
        let neg = |v: &Vec<f64>| v.iter().map(|a| -a).collect::<Vec<_>>();
        assert!((equivariance_error(flip, &x, neg, |y| y.clone()) - 2.0).abs() < 1e-15);
        let zero = |_: &Vec<f64>| vec![0.0, 0.0];
        assert_eq!(equivariance_error(zero, &x, neg, |y| y.clone()), 0.0);
    }

    #[test]
    fn equivariance_error_is_scale_invariant() {
        let x = vec![0.3, -1.2, 2.0];
        let f = |v: &Vec<f64>| v.iter().map(|a| a.tanh()).collect::<Vec<_>>();
        let t = |v: &Vec<f64>| v.iter().map(|a| a + 0.1).collect::<Vec<_>>();
        let base = equivariance_error(f, &x, t, |y| y.clone());
        for c in [-3.0, 0.01, 7.0] {
            let fc = |v: &Vec<f64>| f(v).iter().map(|a| a * c).collect::<Vec<_>>();
            let e = equivariance_error(fc, &x, t, |y| y.clone());
            assert!((e - base).abs() < 1e-14);
        }
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
    }
}
