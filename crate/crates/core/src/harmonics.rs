//! Real irreducible representations of SO(3) and real spherical harmonics.
//!
//! The degree-`l` irrep is a real orthogonal `(2l+1)×(2l+1)` matrix indexed by
//! `m = -l..=l`. Degree one is the rotation matrix itself with the axes placed
//! in the slots `(m=-1, m=0, m=1) = (y, z, x)`. Higher degrees are obtained with
//! the Ivanic–Ruedenberg recurrence, which works directly on the rotation
//! matrix and so needs no Euler angles.
//!
//! Normalization: under the normalized Haar measure the matrix coefficients
//! satisfy `∫ D^l_{ij} D^l'_{kl} = δ_{ll'} δ_{ik} δ_{jl} / (2l+1)`. Spherical
//! harmonics are the `m = 0` column, so `Y^0 = [1]`, `Y^l(north) = e_{m=0}` and
//! `∫_{S²} Y^l_m Y^l_{m'} = δ_{mm'} / (2l+1)`.

use nalgebra::DMatrix;

use crate::rotations::{Rotation, S2Point};

/// Largest supported frequency.
pub const MAX_L: usize = 8;

/// Dimension `2l+1` of the degree-`l` irrep.
pub const fn dim(l: usize) -> usize {
    2 * l + 1
}

/// Axis feeding slot `m + 1` of the degree-one block.
const L1_AXES: [usize; 3] = [1, 2, 0];

/// The degree-`l` real Wigner-D matrix of `r`.
///
/// # Panics
/// If `l > MAX_L`.
pub fn wigner_d_real(l: usize, r: &Rotation) -> DMatrix<f64> {
    wigner_d_all(l, r).pop().expect("at least degree zero")
}

/// Real Wigner-D matrices of degrees `0..=lmax`, computed in one recursive pass.
///
/// # Panics
/// If `lmax > MAX_L`.
pub fn wigner_d_all(lmax: usize, r: &Rotation) -> Vec<DMatrix<f64>> {
    assert!(lmax <= MAX_L, "degree {lmax} exceeds the supported maximum {MAX_L}");
    let mut out = Vec::with_capacity(lmax + 1);
    out.push(DMatrix::from_element(1, 1, 1.0));
    if lmax == 0 {
        return out;
    }
    let rm = r.matrix();
    let r1 = DMatrix::from_fn(3, 3, |i, j| rm[(L1_AXES[i], L1_AXES[j])]);
    out.push(r1.clone());
    for l in 2..=lmax {
        let next = recurrence_step(l as i64, &r1, &out[l - 1]);
        out.push(next);
    }
    out
}

fn recurrence_step(l: i64, r1: &DMatrix<f64>, prev: &DMatrix<f64>) -> DMatrix<f64> {
    let n = (2 * l + 1) as usize;
    let mut d = DMatrix::zeros(n, n);
    let p = |i: i64, a: i64, b: i64| -> f64 {
        let ri = |m: i64, k: i64| r1[((m + 1) as usize, (k + 1) as usize)];
        let rp = |m: i64, k: i64| prev[((m + l - 1) as usize, (k + l - 1) as usize)];
        if b == l {
            ri(i, 1) * rp(a, l - 1) - ri(i, -1) * rp(a, -l + 1)
        } else if b == -l {
            ri(i, 1) * rp(a, -l + 1) + ri(i, -1) * rp(a, l - 1)
        } else {
            ri(i, 0) * rp(a, b)
        }
    };
    for m in -l..=l {
        let am = m.abs();
        let zero = if m == 0 { 1.0 } else { 0.0 };
        for k in -l..=l {
            let denom = if k.abs() < l {
                ((l + k) * (l - k)) as f64
            } else {
                (2 * l * (2 * l - 1)) as f64
            };
            let u = (((l + m) * (l - m)) as f64 / denom).sqrt();
            let v = 0.5 * ((1.0 + zero) * ((l + am - 1) * (l + am)) as f64 / denom).sqrt()
                * (1.0 - 2.0 * zero);
            let w = -0.5 * (((l - am - 1) * (l - am)) as f64 / denom).sqrt() * (1.0 - zero);

            let mut val = 0.0;
            if u != 0.0 {
                val += u * p(0, m, k);
            }
            if v != 0.0 {
                let vv = if m == 0 {
                    p(1, 1, k) + p(-1, -1, k)
                } else if m > 0 {
                    let d1: f64 = if m == 1 { 1.0 } else { 0.0 };
                    p(1, m - 1, k) * (1.0 + d1).sqrt() - p(-1, -m + 1, k) * (1.0 - d1)
                } else {
                    let d1: f64 = if m == -1 { 1.0 } else { 0.0 };
                    p(1, m + 1, k) * (1.0 - d1) + p(-1, -m - 1, k) * (1.0 + d1).sqrt()
                };
                val += v * vv;
            }
            if w != 0.0 {
                let ww = if m > 0 {
                    p(1, m + 1, k) + p(-1, -m - 1, k)
                } else {
                    p(1, m - 1, k) - p(-1, -m + 1, k)
                };
                val += w * ww;
            }
            d[((m + l) as usize, (k + l) as usize)] = val;
        }
    }
    d
}

/// Degree-`l` real spherical harmonics at `p`: the `m = 0` column of the
/// Wigner-D matrix of any rotation carrying the north pole onto `p`.
pub fn real_sph_harm(l: usize, p: &S2Point) -> Vec<f64> {
    let d = wigner_d_real(l, &p.lift());
    d.column(l).iter().copied().collect()
}

/// Real spherical harmonics of all degrees `0..=lmax` at `p`.
pub fn real_sph_harm_all(lmax: usize, p: &S2Point) -> Vec<Vec<f64>> {
    wigner_d_all(lmax, &p.lift())
        .into_iter()
        .enumerate()
        .map(|(l, d)| d.column(l).iter().copied().collect())
        .collect()
}
