//! Measured equivariance of the nonlinear layers on random inputs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::activation::Activation;
use crate::adaptive::{adaptive_nonlinearity, build_generator, generate_a, GeneratorWeights};
use crate::bundle::FieldBundle;
use crate::diagnostics::{equivariance_error, mean_over_rotations};
use crate::error::Result;
use crate::fourier::{fourier_nonlinearity, SamplingMatrix, FtMode};
use crate::harmonics::dim;
use crate::reptypes::{rho_apply_rows, FieldType};
use crate::rotations::Rotation;

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Mean over `rotations` of the relative equivariance error of the
/// fixed-grid layer on the `c×F` input `fhat`.
pub fn fixed_layer_error(
    a: &SamplingMatrix,
    fhat: &DMatrix<f64>,
    sigma: Activation,
    mode: FtMode,
    rotations: &[Rotation],
) -> Result<f64> {
    let t = a.field_type();
    fourier_nonlinearity(a, fhat, sigma, mode)?;
    Ok(mean_over_rotations(rotations, |r| {
        equivariance_error(
            |x| fourier_nonlinearity(a, x, sigma, mode).expect("shape checked"),
            fhat,
            |x| rho_apply_rows(&t, r, x).expect("shape checked"),
            |y| rho_apply_rows(&t, r, y).expect("shape checked"),
        )
    }))
}

fn flatten(v: &[DMatrix<f64>]) -> DVector<f64> {
    DVector::from_iterator(v.iter().map(|m| m.len()).sum(), v.iter().flat_map(|m| m.iter().copied()))
}

/// Mean over `rotations` of the relative equivariance error of the adaptive
/// layer whose sampling matrices are generated from `x`; the fields `x` and
/// the per-point carriers `fhat` are rotated together.
pub fn adaptive_layer_error(
    g: &GeneratorWeights,
    x: &FieldBundle,
    fhat: &[DMatrix<f64>],
    sigma: Activation,
    rotations: &[Rotation],
) -> Result<f64> {
    let t = g.field_type();
    let layer = |(x, f): &(FieldBundle, Vec<DMatrix<f64>>)| -> Result<DVector<f64>> {
        let a = generate_a(g, x)?;
        Ok(flatten(&adaptive_nonlinearity(&a, f, sigma)?))
    };
    let input = (x.clone(), fhat.to_vec());
    layer(&input)?;
    let shapes: Vec<(usize, usize)> = fhat.iter().map(|m| m.shape()).collect();
    Ok(mean_over_rotations(rotations, |r| {
        let rotate_in = |(x, f): &(FieldBundle, Vec<DMatrix<f64>>)| {
            let f = f.iter().map(|m| rho_apply_rows(&t, r, m).expect("shape checked"));
            (x.rotate(r), f.collect())
        };
        let rotate_out = |v: &DVector<f64>| {
            let mut out = Vec::with_capacity(v.len());
            let mut offset = 0;
            for &(rows, cols) in &shapes {
                let m = DMatrix::from_column_slice(rows, cols, &v.as_slice()[offset..offset + rows * cols]);
                out.extend(rho_apply_rows(&t, r, &m).expect("shape checked").iter().copied());
                offset += rows * cols;
            }
            DVector::from_vec(out)
        };
        equivariance_error(|x| layer(x).expect("checked above"), &input, rotate_in, rotate_out)
    }))
}

/// Fixed-layer errors over `inputs` random `channels×F` inputs.
pub fn fixed_layer_errors(
    a: &SamplingMatrix,
    sigma: Activation,
    mode: FtMode,
    inputs: usize,
    channels: usize,
    rotations: &[Rotation],
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = a.field_type().size();
    (0..inputs)
        .map(|_| fixed_layer_error(a, &randn(channels, f, &mut rng), sigma, mode, rotations))
        .collect()
}

/// Adaptive-layer errors over `inputs` random inputs of `points` points,
/// each with two input copies per frequency and `channels` carrier rows.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_layer_errors(
    t: &FieldType,
    samples: usize,
    sigma: Activation,
    inputs: usize,
    points: usize,
    channels: usize,
    rotations: &[Rotation],
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_type: Vec<_> = (0..=t.band_limit()).map(|l| (l, 2)).collect();
    let g = build_generator(&in_type, t, samples, seed)?;
    (0..inputs)
        .map(|_| {
            let x = FieldBundle::new(
                (0..=t.band_limit())
                    .map(|l| randn(points, 2 * dim(l), &mut rng))
                    .collect(),
            )?;
            let f: Vec<_> = (0..points).map(|_| randn(channels, t.size(), &mut rng)).collect();
            adaptive_layer_error(&g, &x, &f, sigma, rotations)
        })
        .collect()
}
