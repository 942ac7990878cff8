//! Band-limited regular and quotient (S²) representations in the irrep basis.
//!
//! A coefficient vector of a [`FieldType`] is laid out by ascending frequency;
//! frequency `l` contributes `q_l` contiguous copies of a `(2l+1)`-subvector
//! ordered `m = -l..=l`. Quotient types keep one copy per frequency, regular
//! types keep `2l+1` copies (the columns of the `l`-th Fourier matrix, in
//! column-major order).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonics::{dim, wigner_d_all, MAX_L};
use crate::rotations::Rotation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Regular,
    /// Functions on S² = SO(3)/SO(2).
    Quotient,
}

/// A band-limited regular or quotient representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "FieldTypeRepr", into = "FieldTypeRepr")]
pub struct FieldType {
    kind: Kind,
    band_limit: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldTypeRepr {
    kind: Kind,
    #[serde(rename = "L")]
    band_limit: usize,
}

impl TryFrom<FieldTypeRepr> for FieldType {
    type Error = Error;

    fn try_from(r: FieldTypeRepr) -> Result<Self> {
        FieldType::new(r.kind, r.band_limit)
    }
}

impl From<FieldType> for FieldTypeRepr {
    fn from(t: FieldType) -> Self {
        FieldTypeRepr {
            kind: t.kind,
            band_limit: t.band_limit,
        }
    }
}

impl FieldType {
    pub fn new(kind: Kind, band_limit: usize) -> Result<Self> {
        if band_limit > MAX_L {
            return Err(Error::BandLimit(band_limit));
        }
        Ok(FieldType { kind, band_limit })
    }

    pub fn quotient(band_limit: usize) -> Result<Self> {
        Self::new(Kind::Quotient, band_limit)
    }

    pub fn regular(band_limit: usize) -> Result<Self> {
        Self::new(Kind::Regular, band_limit)
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn band_limit(&self) -> usize {
        self.band_limit
    }

    /// Number of copies of the frequency-`l` irrep.
    pub fn multiplicity(&self, l: usize) -> usize {
        match self.kind {
            Kind::Quotient => 1,
            Kind::Regular => dim(l),
        }
    }

    /// Width `q_l · (2l+1)` of the frequency-`l` block.
    pub fn block_len(&self, l: usize) -> usize {
        self.multiplicity(l) * dim(l)
    }

    /// Offset of the frequency-`l` block.
    pub fn block_offset(&self, l: usize) -> usize {
        (0..l).map(|k| self.block_len(k)).sum()
    }

    /// Total size `F = Σ_l q_l (2l+1)`.
    pub fn size(&self) -> usize {
        self.block_offset(self.band_limit + 1)
    }

    /// `(l, copy, offset)` for every irrep copy, in layout order.
    pub fn copies(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..=self.band_limit).flat_map(move |l| {
            let base = self.block_offset(l);
            (0..self.multiplicity(l)).map(move |j| (l, j, base + j * dim(l)))
        })
    }
}

/// Coefficients of a band-limited function, laid out per [`FieldType`].
#[derive(Debug, Clone, PartialEq)]
pub struct FourierFeature {
    field_type: FieldType,
    coeffs: DVector<f64>,
}

impl FourierFeature {
    pub fn new(field_type: FieldType, coeffs: DVector<f64>) -> Result<Self> {
        if coeffs.len() != field_type.size() {
            return Err(Error::Shape(format!(
                "feature of length {} for a type of size {}",
                coeffs.len(),
                field_type.size()
            )));
        }
        Ok(FourierFeature { field_type, coeffs })
    }

    pub fn field_type(&self) -> FieldType {
        self.field_type
    }

    pub fn coeffs(&self) -> &DVector<f64> {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> DVector<f64> {
        self.coeffs
    }
}

/// Fourier coefficients of the delta at the origin coset.
///
/// Quotient block `l` is `√(2l+1)·e_{m=0}`; regular block `l` is
/// `√(2l+1)·vec(I)`. With `normalized` the whole vector is scaled to unit norm
/// (its unnormalized norm is `√F`).
pub fn delta_hat(t: &FieldType, normalized: bool) -> DVector<f64> {
    let mut d = DVector::zeros(t.size());
    for (l, j, off) in t.copies() {
        let s = (dim(l) as f64).sqrt();
        match t.kind() {
            Kind::Quotient => d[off + l] = s,
            Kind::Regular => d[off + j] = s,
        }
    }
    if normalized {
        let n = d.norm();
        d /= n;
    }
    d
}

/// The block-diagonal matrix `ρ(r)` acting on coefficient vectors of `t`.
pub fn rho_matrix(t: &FieldType, r: &Rotation) -> DMatrix<f64> {
    let ds = wigner_d_all(t.band_limit(), r);
    let mut m = DMatrix::zeros(t.size(), t.size());
    for (l, _, off) in t.copies() {
        let n = dim(l);
        m.view_mut((off, off), (n, n)).copy_from(&ds[l]);
    }
    m
}

/// `ρ(r)·f̂`: every irrep copy is left-multiplied by its Wigner-D matrix.
pub fn rho_apply(t: &FieldType, r: &Rotation, fhat: &FourierFeature) -> Result<FourierFeature> {
    if fhat.field_type != *t {
        return Err(Error::Shape(format!(
            "feature of type {:?} acted on as {:?}",
            fhat.field_type, t
        )));
    }
    let ds = wigner_d_all(t.band_limit(), r);
    let mut out = DVector::zeros(t.size());
    for (l, _, off) in t.copies() {
        let n = dim(l);
        let block = &ds[l] * fhat.coeffs.rows(off, n);
        out.rows_mut(off, n).copy_from(&block);
    }
    FourierFeature::new(*t, out)
}

/// Applies `ρ(r)` to every row of a `c×F` channel matrix (returns `X·ρ(r)ᵀ`).
pub fn rho_apply_rows(t: &FieldType, r: &Rotation, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != t.size() {
        return Err(Error::Shape(format!(
            "channel matrix has {} columns, type size is {}",
            x.ncols(),
            t.size()
        )));
    }
    Ok(x * rho_matrix(t, r).transpose())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_feature(t: FieldType, g: &mut ChaCha8Rng) -> FourierFeature {
        let v = DVector::from_fn(t.size(), |_, _| g.sample(StandardNormal));
        FourierFeature::new(t, v).unwrap()
    }

    #[test]
    fn sizes() {
        assert_eq!(FieldType::quotient(3).unwrap().size(), 16);
        assert_eq!(FieldType::regular(2).unwrap().size(), 35);
        assert_eq!(FieldType::regular(0).unwrap().size(), 1);
        assert_eq!(FieldType::regular(1).unwrap().size(), 10);
        assert!(matches!(FieldType::quotient(9), Err(Error::BandLimit(9))));
    }

    #[test]
    fn copies_tile_the_vector_exactly() {
        for kind in [Kind::Quotient, Kind::Regular] {
            for lmax in 0..=MAX_L {
                let t = FieldType::new(kind, lmax).unwrap();
                let mut covered = vec![0u8; t.size()];
                for (l, _, off) in t.copies() {
                    for c in &mut covered[off..off + dim(l)] {
                        *c += 1;
                    }
                }
                assert!(covered.iter().all(|c| *c == 1));
            }
        }
    }

    #[test]
    fn delta_hat_values() {
        let t = FieldType::quotient(1).unwrap();
        let d = delta_hat(&t, false);
        assert_eq!(d.as_slice(), &[1.0, 0.0, 3f64.sqrt(), 0.0]);
        let d = delta_hat(&t, true);
        let expected = [0.5, 0.0, 3f64.sqrt() / 2.0, 0.0];
        for (a, b) in d.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let t = FieldType::regular(1).unwrap();
        let d = delta_hat(&t, false);
        let s = 3f64.sqrt();
        let expected = [1.0, s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, s];
        assert_eq!(d.as_slice(), &expected);
    }

    #[test]
    fn delta_hat_norm_is_sqrt_f() {
        for kind in [Kind::Quotient, Kind::Regular] {
            for lmax in 0..=3 {
                let t = FieldType::new(kind, lmax).unwrap();
                let n2 = delta_hat(&t, false).norm_squared();
                assert!((n2 - t.size() as f64).abs() < 1e-12);
                assert!((delta_hat(&t, true).norm() - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identity_acts_trivially() {
        let mut g = ChaCha8Rng::seed_from_u64(1);
        let t = FieldType::regular(2).unwrap();
        let f = random_feature(t, &mut g);
        let out = rho_apply(&t, &Rotation::IDENTITY, &f).unwrap();
        assert!((out.coeffs() - f.coeffs()).amax() < 1e-14);
    }

    #[test]
    fn single_block_is_rotated_by_wigner_d() {
        let mut g = ChaCha8Rng::seed_from_u64(2);
        let t = FieldType::quotient(3).unwrap();
        let r = Rotation::random_haar(&mut g);
        let block = DVector::from_fn(3, |_, _| g.sample::<f64, _>(StandardNormal));
        let mut v = DVector::zeros(16);
        v.rows_mut(1, 3).copy_from(&block);
        let out = rho_apply(&t, &r, &FourierFeature::new(t, v).unwrap()).unwrap();
        let expected = crate::harmonics::wigner_d_real(1, &r) * block;
        assert!((out.coeffs().rows(1, 3) - expected).amax() < 1e-12);
        assert!(out.coeffs()[0] == 0.0 && out.coeffs().rows(4, 12).amax() == 0.0);
    }

    #[test]
    fn action_is_a_homomorphism() {
        let mut g = ChaCha8Rng::seed_from_u64(3);
        for t in [FieldType::quotient(3).unwrap(), FieldType::regular(2).unwrap()] {
            for _ in 0..50 {
                let (r1, r2) = (Rotation::random_haar(&mut g), Rotation::random_haar(&mut g));
                let f = random_feature(t, &mut g);
                let lhs = rho_apply(&t, &r1, &rho_apply(&t, &r2, &f).unwrap()).unwrap();
                let rhs = rho_apply(&t, &r1.compose(&r2), &f).unwrap();
                assert!((lhs.coeffs() - rhs.coeffs()).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn quotient_delta_is_invariant_under_z_rotations() {
        let t = FieldType::quotient(4).unwrap();
        let d = FourierFeature::new(t, delta_hat(&t, false)).unwrap();
        for a in [0.3, 1.7, -2.9] {
            let out = rho_apply(&t, &Rotation::rot_z(a), &d).unwrap();
            assert!((out.coeffs() - d.coeffs()).amax() < 1e-12);
        }
    }

    #[test]
    fn mismatched_type_is_rejected() {
        let q = FieldType::quotient(1).unwrap();
        let r = FieldType::regular(1).unwrap();
        let f = FourierFeature::new(q, DVector::zeros(4)).unwrap();
        assert!(rho_apply(&r, &Rotation::IDENTITY, &f).is_err());
        assert!(FourierFeature::new(r, DVector::zeros(4)).is_err());
    }

    #[test]
    fn row_action_matches_vector_action() {
        let mut g = ChaCha8Rng::seed_from_u64(4);
        let t = FieldType::regular(1).unwrap();
        let r = Rotation::random_haar(&mut g);
        let x = DMatrix::from_fn(3, t.size(), |_, _| g.sample(StandardNormal));
        let y = rho_apply_rows(&t, &r, &x).unwrap();
        for c in 0..3 {
            let f = FourierFeature::new(t, x.row(c).transpose()).unwrap();
            let expected = rho_apply(&t, &r, &f).unwrap();
            assert!((y.row(c).transpose() - expected.coeffs()).amax() < 1e-12);
        }
    }

    #[test]
    fn serialization_format() {
        let t = FieldType::quotient(3).unwrap();
        assert_eq!(serde_json::to_string(&t).unwrap(), r#"{"kind":"quotient","L":3}"#);
        let back: FieldType = serde_json::from_str(r#"{"kind": "regular", "L": 2}"#).unwrap();
        assert_eq!(back, FieldType::regular(2).unwrap());
        assert!(serde_json::from_str::<FieldType>(r#"{"kind":"regular","L":12}"#).is_err());
        assert!(serde_json::from_str::<FieldType>(r#"{"kind":"regular","L":1,"x":0}"#).is_err());
    }

    proptest! {
        #[test]
        fn action_preserves_norm(seed in any::<u64>(), lmax in 0usize..=4, regular in any::<bool>()) {
            let mut g = ChaCha8Rng::seed_from_u64(seed);
            let kind = if regular { Kind::Regular } else { Kind::Quotient };
            let t = FieldType::new(kind, lmax).unwrap();
            let f = random_feature(t, &mut g);
            let r = Rotation::random_haar(&mut g);
            let out = rho_apply(&t, &r, &f).unwrap();
            prop_assert!((out.coeffs().norm() - f.coeffs().norm()).abs() < 1e-10);
        }
    }
}
