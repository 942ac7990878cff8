//! Sampling matrices, discretized Fourier transforms and the fixed-grid
//! Fourier nonlinearity.
//!
//! Row `i` of a sampling matrix is `ρ(gᵢ)·δ̂`, so `A·f̂` evaluates the
//! band-limited function with coefficients `f̂` at every sample `gᵢ` (inverse
//! transform) and the pseudoinverse `A†` maps samples back to coefficients.
//! Feature batches are `c×F` matrices with one channel per row.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::reptypes::{delta_hat, rho_matrix, FieldType, Kind};
use crate::rotations::{Grid, Space};

/// Relative singular-value cutoff used for pseudoinverses.
pub const PINV_RCOND: f64 = 1e-10;

/// Where the rows of a sampling matrix came from.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplingSource {
    Grid(Grid),
    /// Generated from the input by an equivariant layer.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMatrix {
    field_type: FieldType,
    source: SamplingSource,
    a: DMatrix<f64>,
    delta_norm: f64,
}

impl SamplingMatrix {
    /// Wraps an arbitrary `N×F` matrix whose rows all have norm `delta_norm`
    /// (adaptive matrices use unit rows).
    pub fn from_rows(
        field_type: FieldType,
        source: SamplingSource,
        a: DMatrix<f64>,
        delta_norm: f64,
    ) -> Result<Self> {
        if a.ncols() != field_type.size() || a.nrows() == 0 {
            return Err(Error::Shape(format!(
                "sampling matrix is {}×{}, expected N×{} with N >= 1",
                a.nrows(),
                a.ncols(),
                field_type.size()
            )));
        }
        Ok(SamplingMatrix {
            field_type,
            source,
            a,
            delta_norm,
        })
    }

    pub fn field_type(&self) -> FieldType {
        self.field_type
    }

    pub fn source(&self) -> &SamplingSource {
        &self.source
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Number of samples `N`.
    pub fn samples(&self) -> usize {
        self.a.nrows()
    }

    /// `‖δ̂_used‖`, the common row norm.
    pub fn delta_norm(&self) -> f64 {
        self.delta_norm
    }

    /// Scale turning `Aᵀ` into an approximate pseudoinverse:
    /// `F / (N·‖δ̂_used‖²)`. Equals `1/N` for unnormalized δ̂ and `F/N` for
    /// unit rows.
    pub fn transpose_scale(&self) -> f64 {
        self.field_type.size() as f64 / (self.samples() as f64 * self.delta_norm * self.delta_norm)
    }

    /// Row-major CSV dump with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.a.nrows() {
            let row: Vec<String> = self
                .a
                .row(i)
                .iter()
                .map(|v| crate::rotations::format_sig17(*v))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Fixed-grid sampling matrix with rows `ρ(gᵢ)·δ̂`.
///
/// Sphere grids are only valid for quotient types; each point is lifted to a
/// rotation carrying the north pole onto it (the row does not depend on which).
pub fn sampling_matrix(t: &FieldType, grid: &Grid, normalized: bool) -> Result<SamplingMatrix> {
    if grid.space() == Space::Sphere && t.kind() == Kind::Regular {
        return Err(Error::IncompatibleGrid(
            "sphere grids cannot sample a regular representation".into(),
        ));
    }
    let delta = delta_hat(t, normalized);
    let rots = grid.rotations();
    let mut a = DMatrix::zeros(rots.len(), t.size());
    for (i, r) in rots.iter().enumerate() {
        let row = rho_matrix(t, r) * &delta;
        a.row_mut(i).copy_from(&row.transpose());
    }
    let delta_norm = delta.norm();
    SamplingMatrix::from_rows(*t, SamplingSource::Grid(grid.clone()), a, delta_norm)
}

fn check_cols(what: &str, m: &DMatrix<f64>, cols: usize) -> Result<()> {
    if m.ncols() != cols {
        return Err(Error::Shape(format!(
            "{what} has {} columns, expected {cols}",
            m.ncols()
        )));
    }
    Ok(())
}

/// Discretized inverse transform: `c×F` coefficients to `c×N` samples.
pub fn ift(a: &SamplingMatrix, fhat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_cols("coefficient matrix", fhat, a.field_type.size())?;
    Ok(fhat * a.a.transpose())
}

/// Moore–Penrose pseudoinverse via SVD, dropping singular values below
/// `PINV_RCOND·σ_max`.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵀ");
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = PINV_RCOND * smax;
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (k, s) in svd.singular_values.iter().enumerate() {
        if *s > cutoff && *s > 0.0 {
            out += (vt.row(k).transpose() / *s) * u.column(k).transpose();
        }
    }
    out
}

/// Discretized Fourier transform by least squares: `c×N` samples to `c×F`
/// coefficients, `samples·(A†)ᵀ`.
pub fn ft_pinv(a: &SamplingMatrix, samples: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_cols("sample matrix", samples, a.samples())?;
    Ok(samples * pinv(&a.a).transpose())
}

/// How samples are mapped back to coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FtMode {
    /// Exact least squares through `A†`.
    PInv,
    /// `A† ≈ scale·Aᵀ` (see [`SamplingMatrix::transpose_scale`]).
    ApproxTranspose,
}

/// `FT ∘ σ ∘ IFT` applied to each channel of a `c×F` feature matrix.
pub fn fourier_nonlinearity(
    a: &SamplingMatrix,
    fhat: &DMatrix<f64>,
    sigma: Activation,
    mode: FtMode,
) -> Result<DMatrix<f64>> {
    let samples = ift(a, fhat)?.map(|v| sigma.apply(v));
    match mode {
        FtMode::PInv => ft_pinv(a, &samples),
        FtMode::ApproxTranspose => Ok((samples * &a.a) * a.transpose_scale()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::equivariance_error;
    use crate::harmonics::{dim, wigner_d_real};
    use crate::reptypes::rho_apply_rows;
    use crate::rotations::{cubic_group, repulsion_grid, RepulsionParams, Rotation, S2Point};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::sync::OnceLock;

    fn q3() -> FieldType {
        FieldType::quotient(3).unwrap()
    }

    fn sphere_grid(n: usize) -> Grid {
        repulsion_grid(Space::Sphere, n, RepulsionParams::default()).unwrap()
    }

    fn sphere_1024() -> &'static Grid {
        static G: OnceLock<Grid> = OnceLock::new();
        G.get_or_init(|| sphere_grid(1024))
    }

    fn randn(rows: usize, cols: usize, g: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| g.sample(StandardNormal))
    }

    #[test]
    fn identity_grid_gives_delta_row() {
        let t = FieldType::regular(2).unwrap();
        for normalized in [false, true] {
            let grid = Grid::group(vec![Rotation::IDENTITY]).unwrap();
            let a = sampling_matrix(&t, &grid, normalized).unwrap();
            let d = delta_hat(&t, normalized);
            assert!((a.matrix().row(0).transpose() - d).amax() < 1e-15);
        }
    }

    #[test]
    fn quotient_rows_are_scaled_middle_columns() {
        let t = q3();
        let grid = sphere_grid(20);
        let rots = grid.rotations();
        for normalized in [false, true] {
            let a = sampling_matrix(&t, &grid, normalized).unwrap();
            let norm = if normalized { 4.0 } else { 1.0 };
            for (i, r) in rots.iter().enumerate() {
                for l in 0..=3 {
                    let col = wigner_d_real(l, r).column(l) * ((dim(l) as f64).sqrt() / norm);
                    let got = a.matrix().view((i, l * l), (1, dim(l))).transpose();
                    assert!((got - col).amax() < 1e-12);
                }
                assert!((a.matrix().row(i).norm() - a.delta_norm()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn quotient_rows_are_right_invariant() {
        let t = q3();
        let mut g = ChaCha8Rng::seed_from_u64(1);
        let rots: Vec<Rotation> = (0..10).map(|_| Rotation::random_haar(&mut g)).collect();
        let shifted: Vec<Rotation> = rots
            .iter()
            .map(|r| r.compose(&Rotation::rot_z(g.random_range(0.0..6.0))))
            .collect();
        let a = sampling_matrix(&t, &Grid::group(rots).unwrap(), false).unwrap();
        let b = sampling_matrix(&t, &Grid::group(shifted).unwrap(), false).unwrap();
        assert!((a.matrix() - b.matrix()).amax() < 1e-10);
    }

    #[test]
    fn sphere_grid_rejected_for_regular_type() {
        let t = FieldType::regular(1).unwrap();
        let grid = Grid::sphere(vec![S2Point::north()]).unwrap();
        assert!(matches!(
            sampling_matrix(&t, &grid, false),
            Err(Error::IncompatibleGrid(_))
        ));
    }

    #[test]
    fn ift_of_delta_at_identity() {
        let t = q3();
        let grid = Grid::group(vec![Rotation::IDENTITY]).unwrap();
        for (normalized, expected) in [(false, 16.0), (true, 1.0)] {
            let a = sampling_matrix(&t, &grid, normalized).unwrap();
            let d = delta_hat(&t, normalized).transpose();
            let s = ift(&a, &DMatrix::from_row_slice(1, 16, d.as_slice())).unwrap();
            assert!((s[(0, 0)] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ift_of_constant_function() {
        let t = q3();
        let a = sampling_matrix(&t, &sphere_grid(12), true).unwrap();
        let mut f = DMatrix::zeros(1, 16);
        f[(0, 0)] = 2.5;
        let s = ift(&a, &f).unwrap();
        for v in s.iter() {
            assert!((v - 2.5 / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ift_is_linear_and_checks_shapes() {
        let mut g = ChaCha8Rng::seed_from_u64(2);
        let a = sampling_matrix(&q3(), &sphere_grid(12), true).unwrap();
        let (f1, f2) = (randn(3, 16, &mut g), randn(3, 16, &mut g));
        let lhs = ift(&a, &(&f1 + &f2)).unwrap();
        let rhs = ift(&a, &f1).unwrap() + ift(&a, &f2).unwrap();
        assert!((lhs - rhs).amax() < 1e-12);
        assert!(ift(&a, &randn(3, 15, &mut g)).is_err());
        assert!(ft_pinv(&a, &randn(3, 11, &mut g)).is_err());
    }

    #[test]
    fn pinv_round_trip_on_well_spaced_grid() {
        let mut g = ChaCha8Rng::seed_from_u64(3);
        let a = sampling_matrix(&q3(), &sphere_grid(64), true).unwrap();
        let f = randn(5, 16, &mut g);
        let samples = ift(&a, &f).unwrap();
        let back = ft_pinv(&a, &samples).unwrap();
        assert!((&back - &f).amax() < 1e-8);
        // A·A†·y = y on the range of A.
        let again = ift(&a, &back).unwrap();
        assert!((again - samples).amax() < 1e-8);
    }

    #[test]
    fn pinv_of_single_row_is_minimum_norm() {
        let mut g = ChaCha8Rng::seed_from_u64(4);
        let grid = Grid::group(vec![Rotation::random_haar(&mut g)]).unwrap();
        let a = sampling_matrix(&q3(), &grid, true).unwrap();
        let row: DVector<f64> = a.matrix().row(0).transpose();
        let y = randn(2, 1, &mut g);
        let got = ft_pinv(&a, &y).unwrap();
        for c in 0..2 {
            let expected = &row * (y[(c, 0)] / row.norm_squared());
            assert!((got.row(c).transpose() - expected).amax() < 1e-12);
        }
    }

    #[test]
    fn pinv_handles_duplicated_samples() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let p = pinv(&m);
        let expected = DMatrix::from_row_slice(2, 3, &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0, 0.0]);
        assert!((p - expected).amax() < 1e-14);
    }

    #[test]
    fn linear_activation_is_recovered_exactly() {
        let mut g = ChaCha8Rng::seed_from_u64(5);
        let a = sampling_matrix(&q3(), &sphere_grid(64), true).unwrap();
        let f = randn(4, 16, &mut g);
        let out = fourier_nonlinearity(&a, &f, Activation::Identity, FtMode::PInv).unwrap();
        assert!((out - &f).amax() < 1e-8);
    }

    #[test]
    fn approximate_transpose_converges_with_many_samples() {
        let mut g = ChaCha8Rng::seed_from_u64(6);
        for normalized in [false, true] {
            let a = sampling_matrix(&q3(), sphere_1024(), normalized).unwrap();
            let f = randn(4, 16, &mut g);
            let out = fourier_nonlinearity(&a, &f, Activation::Identity, FtMode::ApproxTranspose)
                .unwrap();
            assert!((&out - &f).amax() < 0.05, "{}", (&out - &f).amax());
            let exact = fourier_nonlinearity(&a, &f, Activation::Identity, FtMode::PInv).unwrap();
            assert!((&out - &exact).norm() / exact.norm() < 0.05);
        }
    }

    #[test]
    fn cubic_grid_columns_are_exactly_orthogonal() {
        let t = FieldType::regular(1).unwrap();
        let a = sampling_matrix(&t, &cubic_group(), false).unwrap();
        let gram = a.matrix().transpose() * a.matrix() / 24.0;
        assert!((gram - DMatrix::identity(10, 10)).amax() < 1e-12);
    }

    fn layer_error(n: usize, inputs: usize, seed: u64) -> Vec<f64> {
        let t = q3();
        let a = sampling_matrix(&t, &sphere_grid(n), true).unwrap();
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let layer = |f: &DMatrix<f64>| {
            fourier_nonlinearity(&a, f, Activation::Elu, FtMode::PInv).unwrap()
        };
        let mut errs: Vec<f64> = (0..inputs)
            .map(|_| {
                let f = randn(1, 16, &mut g);
                let r = Rotation::random_haar(&mut g);
                equivariance_error(
                    layer,
                    &f,
                    |x| rho_apply_rows(&t, &r, x).unwrap(),
                    |y| rho_apply_rows(&t, &r, y).unwrap(),
                )
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        errs
    }

    #[test]
    fn fixed_grid_equivariance_improves_with_samples() {
        let median = |v: Vec<f64>| v[v.len() / 2];
        let e8 = median(layer_error(8, 50, 7));
        let e64 = median(layer_error(64, 50, 7));
        assert!(e64 < 0.5 * e8, "N=8: {e8}, N=64: {e64}");
    }

    #[test]
    fn linear_activation_is_exactly_equivariant() {
        let t = q3();
        let a = sampling_matrix(&t, &sphere_grid(32), true).unwrap();
        let mut g = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let f = randn(2, 16, &mut g);
            let r = Rotation::random_haar(&mut g);
            let e = equivariance_error(
                |x| fourier_nonlinearity(&a, x, Activation::Identity, FtMode::PInv).unwrap(),
                &f,
                |x| rho_apply_rows(&t, &r, x).unwrap(),
                |y| rho_apply_rows(&t, &r, y).unwrap(),
            );
            assert!(e < 1e-8);
        }
    }

    #[test]
    fn csv_dump_has_one_line_per_sample() {
        let a = sampling_matrix(&q3(), &sphere_grid(5), true).unwrap();
        let csv = a.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().all(|l| l.split(',').count() == 16));
    }
}
