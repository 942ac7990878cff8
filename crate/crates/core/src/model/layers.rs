//! Equivariant building blocks, in plain form and recorded on a tape.
//!
//! On the tape, frequency `l` of a bundle over `P` points is a
//! `(P·(2l+1)) × m_l` matrix: row `p·(2l+1) + c` holds component `c` of every
//! copy at point `p`, so a Schur-constrained linear map is a single right
//! multiplication by `Wᵀ`.

use nalgebra::{DMatrix, DVector};

use crate::activation::Activation;
use crate::bundle::FieldBundle;
use crate::error::{Error, Result};
use crate::harmonics::dim;
use crate::nonlin::NORM_EPS;
use crate::reptypes::FieldType;
use crate::tape::{Tape, Var};

/// Per frequency, output copies are `W_l` (`out × in`) times input copies;
/// the optional `1×out₀` bias is added to the scalar channels.
pub fn equivariant_linear(
    weights: &[DMatrix<f64>],
    bias: Option<&DMatrix<f64>>,
    x: &FieldBundle,
) -> Result<FieldBundle> {
    if weights.len() != x.num_blocks() {
        return Err(Error::Shape(format!(
            "{} weight blocks for {} frequencies",
            weights.len(),
            x.num_blocks()
        )));
    }
    let mut out = Vec::with_capacity(weights.len());
    for (l, w) in weights.iter().enumerate() {
        if w.ncols() != x.multiplicity(l) {
            return Err(Error::Shape(format!(
                "frequency {l} weight has {} inputs, bundle has {} copies",
                w.ncols(),
                x.multiplicity(l)
            )));
        }
        let mut y = x.copies_as_columns(l) * w.transpose();
        if l == 0 {
            if let Some(b) = bias {
                if b.shape() != (1, w.nrows()) {
                    return Err(Error::Shape("scalar bias does not match the output width".into()));
                }
                for mut row in y.row_iter_mut() {
                    row += b;
                }
            }
        }
        out.push(y);
    }
    FieldBundle::from_copy_columns(&out)
}

/// Mean over points of the scalar channels, then of the norms of every
/// `l ≥ 1` copy.
pub fn invariant_pool(x: &FieldBundle) -> DVector<f64> {
    let p = x.points().max(1) as f64;
    let mut out = Vec::new();
    for l in 0..x.num_blocks() {
        for k in 0..x.multiplicity(l) {
            let s: f64 = (0..x.points())
                .map(|i| {
                    let f = x.field(i, l, k);
                    if l == 0 {
                        f[0]
                    } else {
                        f.norm()
                    }
                })
                .sum();
            out.push(s / p);
        }
    }
    DVector::from_vec(out)
}

/// Tape-layout block from a plain bundle.
pub fn bundle_constants(tape: &mut Tape, x: &FieldBundle) -> Result<Vec<Var>> {
    (0..x.num_blocks())
        .map(|l| tape.constant(x.copies_as_columns(l)))
        .collect()
}

/// `(P·m) × (2l+1)`, one field per row (row `p·m + k`).
pub fn fields_as_rows(tape: &mut Tape, x: Var, l: usize, points: usize) -> Result<Var> {
    let d = dim(l);
    let m = tape.shape(x).1;
    let map: Vec<_> = (0..d)
        .flat_map(|c| (0..points * m).map(move |r| Some((0, (r / m) * d + c, r % m))))
        .collect();
    tape.gather(&[x], points * m, d, map)
}

/// Inverse of [`fields_as_rows`].
pub fn rows_as_fields(tape: &mut Tape, rows: Var, l: usize, points: usize) -> Result<Var> {
    let d = dim(l);
    let m = tape.shape(rows).0 / points.max(1);
    let map: Vec<_> = (0..m)
        .flat_map(|k| (0..points * d).map(move |r| Some((0, (r / d) * m + k, r % d))))
        .collect();
    tape.gather(&[rows], points * d, m, map)
}

/// Repeats a `P × m` matrix of per-field scalars over the `2l+1` components.
pub fn broadcast_fields(tape: &mut Tape, s: Var, l: usize) -> Result<Var> {
    let d = dim(l);
    let (points, m) = tape.shape(s);
    let map: Vec<_> = (0..m)
        .flat_map(|k| (0..points * d).map(move |r| Some((0, r / d, k))))
        .collect();
    tape.gather(&[s], points * d, m, map)
}

/// `v·σ(‖v‖ − b_k)/(‖v‖ + ε)` for every field of one frequency block.
/// `bias` is `1×m`.
pub fn norm_nonlinearity_tape(
    tape: &mut Tape,
    x: Var,
    l: usize,
    points: usize,
    bias: Var,
    sigma: Activation,
) -> Result<Var> {
    let m = tape.shape(x).1;
    if tape.shape(bias) != (1, m) {
        return Err(Error::Shape("norm bias does not match the number of copies".into()));
    }
    let rows = fields_as_rows(tape, x, l, points)?;
    let n = tape.row_norms(rows)?;
    let map: Vec<_> = (0..points * m).map(|r| Some((0, 0, r % m))).collect();
    let b = tape.gather(&[bias], points * m, 1, map)?;
    let shifted = tape.sub(n, b)?;
    let act = tape.activation(shifted, sigma)?;
    let den = tape.add_scalar(n, NORM_EPS)?;
    let inv = tape.recip(den)?;
    let factor = tape.hadamard(act, inv)?;
    let scaled = tape.mul_rows(rows, factor)?;
    rows_as_fields(tape, scaled, l, points)
}

/// Bundle blocks to a `(P·c) × F` carrier: row `p·c + j` is channel `j` at
/// point `p`, assembled from copies `j·q_l..(j+1)·q_l` of each frequency.
pub fn to_carrier(tape: &mut Tape, xs: &[Var], t: &FieldType, points: usize) -> Result<Var> {
    let lcount = t.band_limit() + 1;
    if xs.len() < lcount {
        return Err(Error::MissingFrequency(xs.len()));
    }
    let channels = tape.shape(xs[0]).1 / t.multiplicity(0);
    for (l, x) in xs.iter().enumerate().take(lcount) {
        if tape.shape(*x) != (points * dim(l), channels * t.multiplicity(l)) {
            return Err(Error::Shape(format!("frequency {l} block does not form {channels} channels")));
        }
    }
    let cols = column_layout(t);
    let rows = points * channels;
    let map: Vec<_> = cols
        .iter()
        .flat_map(|&(l, k, c)| {
            let q = t.multiplicity(l);
            let d = dim(l);
            (0..rows).map(move |r| Some((l, (r / channels) * d + c, (r % channels) * q + k)))
        })
        .collect();
    tape.gather(&xs[..lcount], rows, t.size(), map)
}

/// Inverse of [`to_carrier`].
pub fn from_carrier(tape: &mut Tape, z: Var, t: &FieldType, points: usize) -> Result<Vec<Var>> {
    let channels = tape.shape(z).0 / points.max(1);
    (0..=t.band_limit())
        .map(|l| {
            let d = dim(l);
            let q = t.multiplicity(l);
            let off = t.block_offset(l);
            let map: Vec<_> = (0..channels * q)
                .flat_map(|col| {
                    (0..points * d).map(move |r| {
                        let (p, c) = (r / d, r % d);
                        let (j, k) = (col / q, col % q);
                        Some((0, p * channels + j, off + k * d + c))
                    })
                })
                .collect();
            tape.gather(&[z], points * d, channels * q, map)
        })
        .collect()
}

/// `(l, copy, component)` of every carrier column.
pub fn column_layout(t: &FieldType) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::with_capacity(t.size());
    for l in 0..=t.band_limit() {
        for k in 0..t.multiplicity(l) {
            for c in 0..dim(l) {
                out.push((l, k, c));
            }
        }
    }
    out
}

/// Rows of every tape block belonging to the kept points.
pub fn select_points(tape: &mut Tape, xs: &[Var], kept: &[usize]) -> Result<Vec<Var>> {
    xs.iter()
        .enumerate()
        .map(|(l, x)| {
            let d = dim(l);
            let rows: Vec<usize> = kept.iter().flat_map(|&p| p * d..(p + 1) * d).collect();
            tape.select_rows(*x, &rows)
        })
        .collect()
}

/// Tape form of [`invariant_pool`]: `1 × Σ m_l`.
pub fn invariant_pool_tape(tape: &mut Tape, xs: &[Var], points: usize) -> Result<Var> {
    let mut parts = Vec::with_capacity(xs.len());
    for (l, x) in xs.iter().enumerate() {
        let m = tape.shape(*x).1;
        if m == 0 {
            continue;
        }
        if l == 0 {
            parts.push(tape.mean_rows(*x)?);
        } else {
            let rows = fields_as_rows(tape, *x, l, points)?;
            let n = tape.row_norms(rows)?;
            let per_point = tape.reshape(n, points, m)?;
            parts.push(tape.mean_rows(per_point)?);
        }
    }
    tape.concat_cols(&parts)
}
