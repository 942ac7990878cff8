//! Input-dependent sampling matrices.
//!
//! A generator maps the steerable input fields at each point to an `N×F`
//! matrix `A(x)` with `A(g.x) = A(x)·ρ(g)ᵀ`. Output copy `(l, j)` of row `i`
//! is a weighted sum of the input copies of frequency `l` only, so rotating
//! the input rotates every row block by `D^l(g)`. Plugging such an `A(x)` into
//! `FT ∘ σ ∘ IFT` gives a layer that is equivariant for any `N`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::bundle::FieldBundle;
use crate::error::{Error, Result};
use crate::fourier::{SamplingMatrix, SamplingSource};
use crate::harmonics::dim;
use crate::nonlin::norm_nonlinearity;
use crate::reptypes::FieldType;

/// Rows whose norm falls below this cannot be normalized.
pub const DEGENERATE_ROW_NORM: f64 = 1e-8;
/// Bias of the norm nonlinearity between the two layers of an MLP generator.
pub const MLP_NORM_BIAS: f64 = 1.0;
pub const MLP_ACTIVATION: Activation = Activation::Elu;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GeneratorDepth {
    #[default]
    Linear,
    /// Linear, norm nonlinearity, linear; `hidden` copies per frequency.
    Mlp { hidden: usize },
}

/// Weights of an equivariant generator for a target type and sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeneratorRepr", into = "GeneratorRepr")]
pub struct GeneratorWeights {
    in_type: Vec<(usize, usize)>,
    field_type: FieldType,
    samples: usize,
    hidden: Option<Vec<DMatrix<f64>>>,
    weights: Vec<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorRepr {
    in_type: Vec<(usize, usize)>,
    field_type: FieldType,
    samples: usize,
    #[serde(with = "crate::serde_matrix::opt_vec", default)]
    hidden: Option<Vec<DMatrix<f64>>>,
    #[serde(with = "crate::serde_matrix::vec")]
    weights: Vec<DMatrix<f64>>,
}

impl TryFrom<GeneratorRepr> for GeneratorWeights {
    type Error = Error;

    fn try_from(r: GeneratorRepr) -> Result<Self> {
        GeneratorWeights::from_parts(&r.in_type, r.field_type, r.samples, r.hidden, r.weights)
    }
}

impl From<GeneratorWeights> for GeneratorRepr {
    fn from(g: GeneratorWeights) -> Self {
        GeneratorRepr {
            in_type: g.in_type,
            field_type: g.field_type,
            samples: g.samples,
            hidden: g.hidden,
            weights: g.weights,
        }
    }
}

fn normalize_in_type(in_type: &[(usize, usize)], t: &FieldType) -> Result<Vec<(usize, usize)>> {
    let mut map = BTreeMap::new();
    for &(l, m) in in_type {
        if map.insert(l, m).is_some() {
            return Err(Error::InvalidInput(format!("frequency {l} listed twice in input type")));
        }
    }
    for l in 0..=t.band_limit() {
        if map.get(&l).copied().unwrap_or(0) == 0 {
            return Err(Error::MissingFrequency(l));
        }
    }
    Ok(map.into_iter().filter(|&(_, m)| m > 0).collect())
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let normal = Normal::new(0.0, std).expect("finite standard deviation");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

impl GeneratorWeights {
    /// Validates shapes: the hidden layer (if any) is `h × m_l`, the output
    /// layer `(N·q_l) × (h or m_l)`, for every `l ≤ L`.
    pub fn from_parts(
        in_type: &[(usize, usize)],
        field_type: FieldType,
        samples: usize,
        hidden: Option<Vec<DMatrix<f64>>>,
        weights: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let in_type = normalize_in_type(in_type, &field_type)?;
        if samples == 0 {
            return Err(Error::InvalidInput("a generator needs N >= 1 rows".into()));
        }
        let lcount = field_type.band_limit() + 1;
        let in_mult = |l: usize| in_type.iter().find(|e| e.0 == l).map_or(0, |e| e.1);
        if weights.len() != lcount {
            return Err(Error::Shape(format!(
                "generator has {} weight blocks, expected {lcount}",
                weights.len()
            )));
        }
        if let Some(h) = &hidden {
            if h.len() != lcount {
                return Err(Error::Shape(format!(
                    "generator has {} hidden blocks, expected {lcount}",
                    h.len()
                )));
            }
        }
        for l in 0..lcount {
            let inner = match &hidden {
                Some(h) => {
                    if h[l].ncols() != in_mult(l) || h[l].nrows() == 0 {
                        return Err(Error::Shape(format!(
                            "hidden weight {l} is {}×{}, expected h×{}",
                            h[l].nrows(),
                            h[l].ncols(),
                            in_mult(l)
                        )));
                    }
                    h[l].nrows()
                }
                None => in_mult(l),
            };
            let want = (samples * field_type.multiplicity(l), inner);
            if weights[l].shape() != want {
                return Err(Error::Shape(format!(
                    "generator weight {l} is {:?}, expected {want:?}",
                    weights[l].shape()
                )));
            }
        }
        Ok(GeneratorWeights {
            in_type,
            field_type,
            samples,
            hidden,
            weights,
        })
    }

    pub fn in_type(&self) -> &[(usize, usize)] {
        &self.in_type
    }

    pub fn in_multiplicity(&self, l: usize) -> usize {
        self.in_type.iter().find(|e| e.0 == l).map_or(0, |e| e.1)
    }

    pub fn field_type(&self) -> FieldType {
        self.field_type
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn depth(&self) -> GeneratorDepth {
        match &self.hidden {
            None => GeneratorDepth::Linear,
            Some(h) => GeneratorDepth::Mlp { hidden: h[0].nrows() },
        }
    }

    /// Output-layer weight for frequency `l`, rows indexed `i·q_l + j`.
    pub fn weight(&self, l: usize) -> &DMatrix<f64> {
        &self.weights[l]
    }

    pub fn hidden_weight(&self, l: usize) -> Option<&DMatrix<f64>> {
        self.hidden.as_ref().map(|h| &h[l])
    }

    /// All trainable matrices: hidden blocks first (if any), then output
    /// blocks, each by ascending frequency.
    pub fn matrices(&self) -> Vec<&DMatrix<f64>> {
        self.hidden.iter().flatten().chain(&self.weights).collect()
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        self.hidden.iter_mut().flatten().chain(&mut self.weights).collect()
    }
}

/// Linear generator with `W_l` entries drawn from `N(0, 1/m_l)`.
pub fn build_generator(
    in_type: &[(usize, usize)],
    t: &FieldType,
    samples: usize,
    seed: u64,
) -> Result<GeneratorWeights> {
    build_generator_with_depth(in_type, t, samples, GeneratorDepth::Linear, seed)
}

pub fn build_generator_with_depth(
    in_type: &[(usize, usize)],
    t: &FieldType,
    samples: usize,
    depth: GeneratorDepth,
    seed: u64,
) -> Result<GeneratorWeights> {
    let norm_type = normalize_in_type(in_type, t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_mult = |l: usize| norm_type.iter().find(|e| e.0 == l).map_or(0, |e| e.1);
    let lcount = t.band_limit() + 1;
    let hidden = match depth {
        GeneratorDepth::Linear => None,
        GeneratorDepth::Mlp { hidden } => {
            if hidden == 0 {
                return Err(Error::InvalidInput("MLP generator needs hidden >= 1".into()));
            }
            Some(
                (0..lcount)
                    .map(|l| gaussian_matrix(hidden, in_mult(l), 1.0 / (in_mult(l) as f64).sqrt(), &mut rng))
                    .collect::<Vec<_>>(),
            )
        }
    };
    let weights = (0..lcount)
        .map(|l| {
            let inner = hidden.as_ref().map_or(in_mult(l), |h: &Vec<DMatrix<f64>>| h[l].nrows());
            gaussian_matrix(samples * t.multiplicity(l), inner, 1.0 / (inner as f64).sqrt(), &mut rng)
        })
        .collect();
    GeneratorWeights::from_parts(&norm_type, *t, samples, hidden, weights)
}

/// One sampling matrix per spatial point, all with the same `N` and type.
#[derive(Debug, Clone, PartialEq)]
pub struct PerPointSamplingMatrices {
    field_type: FieldType,
    samples: usize,
    mats: Vec<SamplingMatrix>,
}

impl PerPointSamplingMatrices {
    pub fn new(mats: Vec<SamplingMatrix>) -> Result<Self> {
        let first = mats
            .first()
            .ok_or_else(|| Error::InvalidInput("no sampling matrices".into()))?;
        let (t, n) = (first.field_type(), first.samples());
        if mats.iter().any(|m| m.field_type() != t || m.samples() != n) {
            return Err(Error::Shape("per-point sampling matrices differ in type or N".into()));
        }
        Ok(PerPointSamplingMatrices {
            field_type: t,
            samples: n,
            mats,
        })
    }

    pub fn field_type(&self) -> FieldType {
        self.field_type
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn get(&self, point: usize) -> &SamplingMatrix {
        &self.mats[point]
    }

    pub fn iter(&self) -> impl Iterator<Item = &SamplingMatrix> {
        self.mats.iter()
    }
}

fn check_input(g: &GeneratorWeights, x: &FieldBundle) -> Result<()> {
    for &(l, m) in &g.in_type {
        if x.multiplicity(l) != m {
            return Err(Error::Shape(format!(
                "input has {} frequency-{l} copies, generator expects {m}",
                x.multiplicity(l)
            )));
        }
    }
    if x.points() == 0 {
        return Err(Error::InvalidInput("no spatial points".into()));
    }
    Ok(())
}

/// Copies of frequency `l` at `point` as the columns of a `(2l+1) × m` matrix.
fn copies(x: &FieldBundle, point: usize, l: usize) -> DMatrix<f64> {
    let d = dim(l);
    let m = x.multiplicity(l);
    DMatrix::from_fn(d, m, |c, k| x.block(l)[(point, k * d + c)])
}

/// Unnormalized rows of `A(x)` at one point.
pub fn generator_rows(g: &GeneratorWeights, x: &FieldBundle, point: usize) -> DMatrix<f64> {
    let t = g.field_type;
    let mut a = DMatrix::zeros(g.samples, t.size());
    for l in 0..=t.band_limit() {
        let d = dim(l);
        let q = t.multiplicity(l);
        let mut inputs = copies(x, point, l);
        if let Some(h) = &g.hidden {
            inputs = &inputs * h[l].transpose();
            for mut col in inputs.column_iter_mut() {
                let v = norm_nonlinearity(col.as_slice(), MLP_ACTIVATION, MLP_NORM_BIAS);
                col.copy_from_slice(&v);
            }
        }
        // (2l+1) × (N·q_l); column i·q_l + j is output copy j of row i.
        let out = inputs * g.weights[l].transpose();
        for i in 0..g.samples {
            for j in 0..q {
                let off = t.block_offset(l) + j * d;
                for c in 0..d {
                    a[(i, off + c)] = out[(c, i * q + j)];
                }
            }
        }
    }
    a
}

/// Scales every row to unit norm.
pub fn normalize_rows(a: &mut DMatrix<f64>, point: usize) -> Result<()> {
    for (row, mut r) in a.row_iter_mut().enumerate() {
        let n = r.norm();
        if !(n >= DEGENERATE_ROW_NORM) {
            return Err(Error::DegenerateRow { point, row, norm: n });
        }
        r /= n;
    }
    Ok(())
}

/// `A(x)` at every point, with unit rows.
pub fn generate_a(g: &GeneratorWeights, x: &FieldBundle) -> Result<PerPointSamplingMatrices> {
    check_input(g, x)?;
    let mats = (0..x.points())
        .map(|p| {
            let mut a = generator_rows(g, x, p);
            normalize_rows(&mut a, p)?;
            SamplingMatrix::from_rows(g.field_type, SamplingSource::Adaptive, a, 1.0)
        })
        .collect::<Result<Vec<_>>>()?;
    PerPointSamplingMatrices::new(mats)
}

/// Per point: `scale·σ(f̂·Aᵀ)·A` with `scale = F/(N·‖row‖²)` (`F/N` for unit
/// rows).
pub fn adaptive_nonlinearity(
    a: &PerPointSamplingMatrices,
    fhat: &[DMatrix<f64>],
    sigma: Activation,
) -> Result<Vec<DMatrix<f64>>> {
    if fhat.len() != a.len() {
        return Err(Error::Shape(format!(
            "{} feature matrices for {} sampling matrices",
            fhat.len(),
            a.len()
        )));
    }
    a.iter()
        .zip(fhat)
        .map(|(ap, f)| {
            if f.ncols() != a.field_type.size() {
                return Err(Error::Shape(format!(
                    "feature matrix has {} columns, expected {}",
                    f.ncols(),
                    a.field_type.size()
                )));
            }
            let m = ap.matrix();
            let samples = (f * m.transpose()).map(|v| sigma.apply(v));
            Ok(samples * m * ap.transpose_scale())
        })
        .collect()
}

/// Keeps the matrices of the surviving points, in order.
pub fn downsample_indexing(
    a: &PerPointSamplingMatrices,
    kept: &[usize],
) -> Result<PerPointSamplingMatrices> {
    if kept.is_empty() {
        return Err(Error::EmptyDownsample);
    }
    if let Some(&bad) = kept.iter().find(|&&i| i >= a.len()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: a.len(),
        });
    }
    if kept.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("kept indices must be strictly increasing".into()));
    }
    PerPointSamplingMatrices::new(kept.iter().map(|&i| a.mats[i].clone()).collect())
}

/// Channels of one point as a `c×F` carrier: channel `j` takes copies
/// `j·q_l..(j+1)·q_l` of every frequency `l ≤ L`.
pub fn carrier_from_fields(x: &FieldBundle, point: usize, t: &FieldType) -> Result<DMatrix<f64>> {
    let channels = carrier_channels(x, t)?;
    let mut out = DMatrix::zeros(channels, t.size());
    for l in 0..=t.band_limit() {
        let d = dim(l);
        let q = t.multiplicity(l);
        for j in 0..channels {
            for c in 0..q * d {
                out[(j, t.block_offset(l) + c)] = x.block(l)[(point, j * q * d + c)];
            }
        }
    }
    Ok(out)
}

/// Number of carrier channels the bundle provides for type `t`.
pub fn carrier_channels(x: &FieldBundle, t: &FieldType) -> Result<usize> {
    let c = x.multiplicity(0) / t.multiplicity(0).max(1);
    for l in 0..=t.band_limit() {
        if x.multiplicity(l) == 0 {
            return Err(Error::MissingFrequency(l));
        }
        if x.multiplicity(l) != c * t.multiplicity(l) {
            return Err(Error::Shape(format!(
                "frequency {l} has {} copies, expected {}",
                x.multiplicity(l),
                c * t.multiplicity(l)
            )));
        }
    }
    Ok(c)
}

/// Inverse of [`carrier_from_fields`] for a whole cloud.
pub fn fields_from_carriers(carriers: &[DMatrix<f64>], t: &FieldType) -> Result<FieldBundle> {
    let points = carriers.len();
    let channels = carriers.first().map_or(0, |c| c.nrows());
    let mut x = FieldBundle::zeros(
        points,
        &(0..=t.band_limit()).map(|l| channels * t.multiplicity(l)).collect::<Vec<_>>(),
    );
    for (p, f) in carriers.iter().enumerate() {
        if f.shape() != (channels, t.size()) {
            return Err(Error::Shape("carrier shapes differ between points".into()));
        }
        for l in 0..=t.band_limit() {
            let d = dim(l);
            let q = t.multiplicity(l);
            for j in 0..channels {
                for k in 0..q {
                    let start = t.block_offset(l) + k * d;
                    let v: Vec<f64> = (0..d).map(|c| f[(j, start + c)]).collect();
                    x.set_field(p, l, j * q + k, &v);
                }
            }
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::equivariance_error;
    use crate::fourier::sampling_matrix;
    use crate::reptypes::{rho_apply_rows, rho_matrix};
    use crate::rotations::{repulsion_grid, RepulsionParams, Rotation, Space};
    use nalgebra::DVector;
    use rand_distr::StandardNormal;

    fn unit(v: &DVector<f64>) -> DVector<f64> {
        v / v.norm()
    }

    fn random_bundle(points: usize, mults: &[usize], rng: &mut ChaCha8Rng) -> FieldBundle {
        let blocks = mults
            .iter()
            .enumerate()
            .map(|(l, &m)| DMatrix::from_fn(points, m * dim(l), |_, _| StandardNormal.sample(rng)))
            .collect();
        FieldBundle::new(blocks).unwrap()
    }

    fn random_carriers(points: usize, c: usize, f: usize, rng: &mut ChaCha8Rng) -> Vec<DMatrix<f64>> {
        (0..points)
            .map(|_| DMatrix::from_fn(c, f, |_, _| StandardNormal.sample(rng)))
            .collect()
    }

    #[test]
    fn missing_frequency_is_named() {
        let t = FieldType::quotient(2).unwrap();
        let err = build_generator(&[(0, 2), (1, 1)], &t, 4, 0).unwrap_err();
        assert_eq!(err.to_string(), "input provides no frequency-2 fields");
    }

    #[test]
    fn weight_shapes_follow_copy_counts() {
        let g = build_generator(&[(0, 3), (1, 2)], &FieldType::quotient(1).unwrap(), 4, 0).unwrap();
        assert_eq!(g.weight(0).shape(), (4, 3));
        assert_eq!(g.weight(1).shape(), (4, 2));
        let g = build_generator(&[(0, 1), (1, 1)], &FieldType::regular(1).unwrap(), 2, 0).unwrap();
        assert_eq!(g.weight(0).shape(), (2, 1));
        assert_eq!(g.weight(1).shape(), (6, 1));
        assert!(GeneratorWeights::from_parts(
            &[(0, 1), (1, 1)],
            FieldType::quotient(1).unwrap(),
            2,
            None,
            vec![DMatrix::zeros(2, 1), DMatrix::zeros(2, 2)],
        )
        .is_err());
    }

    #[test]
    fn weight_scale_matches_fan_in() {
        let g = build_generator(&[(0, 50), (1, 8)], &FieldType::quotient(1).unwrap(), 400, 3).unwrap();
        for (l, m) in [(0usize, 50.0f64), (1, 8.0)] {
            let w = g.weight(l);
            let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
            assert!((var * m - 1.0).abs() < 0.05, "l={l} var={var}");
        }
    }

    #[test]
    fn generated_matrices_rotate_with_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind_regular in [false, true] {
            let t = if kind_regular {
                FieldType::regular(2).unwrap()
            } else {
                FieldType::quotient(3).unwrap()
            };
            let mults = vec![3; t.band_limit() + 1];
            let in_type: Vec<_> = mults.iter().copied().enumerate().collect();
            for n in [1, 2, 4] {
                for depth in [GeneratorDepth::Linear, GeneratorDepth::Mlp { hidden: 4 }] {
                    let g = build_generator_with_depth(&in_type, &t, n, depth, n as u64).unwrap();
                    let x = random_bundle(3, &mults, &mut rng);
                    let r = Rotation::random_haar(&mut rng);
                    let a = generate_a(&g, &x).unwrap();
                    let ar = generate_a(&g, &x.rotate(&r)).unwrap();
                    for p in 0..3 {
                        let want = rho_apply_rows(&t, &r, a.get(p).matrix()).unwrap();
                        assert!((ar.get(p).matrix() - want).amax() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn normalization_commutes_with_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = FieldType::quotient(3).unwrap();
        let r = Rotation::random_haar(&mut rng);
        let raw = DMatrix::from_fn(5, 16, |_, _| StandardNormal.sample(&mut rng));
        let mut a = raw.clone();
        normalize_rows(&mut a, 0).unwrap();
        let mut b = raw * rho_matrix(&t, &r).transpose();
        normalize_rows(&mut b, 0).unwrap();
        assert!((rho_apply_rows(&t, &r, &a).unwrap() - b).amax() < 1e-12);
    }

    #[test]
    fn zero_input_is_degenerate() {
        let t = FieldType::quotient(1).unwrap();
        let g = build_generator(&[(0, 1), (1, 1)], &t, 2, 0).unwrap();
        let err = generate_a(&g, &FieldBundle::zeros(2, &[1, 1])).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { point: 0, row: 0, .. }));
    }

    #[test]
    fn identity_weights_concatenate_the_input() {
        let t = FieldType::quotient(1).unwrap();
        let g = GeneratorWeights::from_parts(
            &[(0, 1), (1, 1)],
            t,
            1,
            None,
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)],
        )
        .unwrap();
        let mut x = FieldBundle::zeros(1, &[1, 1]);
        x.set_field(0, 0, 0, &[2.0]);
        x.set_field(0, 1, 0, &[0.0, 1.0, 2.0]);
        let a = generate_a(&g, &x).unwrap();
        let want = DVector::from_vec(vec![2.0, 0.0, 1.0, 2.0]) / 3.0;
        assert!((a.get(0).matrix().row(0).transpose() - want).amax() < 1e-15);
    }

    #[test]
    fn layer_is_equivariant_for_any_sample_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let t = FieldType::quotient(3).unwrap();
        let in_type: Vec<_> = (0..=3).map(|l| (l, 2)).collect();
        for n in [1, 2, 4, 8] {
            let g = build_generator(&in_type, &t, n, 7).unwrap();
            let x = random_bundle(2, &[2, 2, 2, 2], &mut rng);
            let f = random_carriers(2, 3, 16, &mut rng);
            for sigma in [Activation::Elu, Activation::Relu, Activation::Identity] {
                for _ in 0..10 {
                    let r = Rotation::random_haar(&mut rng);
                    let layer = |(x, f): &(FieldBundle, Vec<DMatrix<f64>>)| {
                        let a = generate_a(&g, x).unwrap();
                        let out = adaptive_nonlinearity(&a, f, sigma).unwrap();
                        DVector::from_iterator(
                            out.len() * out[0].len(),
                            out.iter().flat_map(|m| m.iter().copied()),
                        )
                    };
                    let rotate_in = |(x, f): &(FieldBundle, Vec<DMatrix<f64>>)| {
                        (x.rotate(&r), f.iter().map(|m| rho_apply_rows(&t, &r, m).unwrap()).collect())
                    };
                    let rotate_out = |v: &DVector<f64>| {
                        let mut out = Vec::new();
                        for chunk in v.as_slice().chunks(3 * 16) {
                            let fm = DMatrix::from_column_slice(3, 16, chunk);
                            out.extend(rho_apply_rows(&t, &r, &fm).unwrap().iter().copied());
                        }
                        DVector::from_vec(out)
                    };
                    let e = equivariance_error(layer, &(x.clone(), f.clone()), rotate_in, rotate_out);
                    assert!(e < 1e-10, "N={n} {sigma:?}: {e}");
                }
            }
        }
    }

    #[test]
    fn identity_activation_with_one_row_projects() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = FieldType::quotient(3).unwrap();
        let row = unit(&DVector::from_fn(16, |_, _| StandardNormal.sample(&mut rng)));
        let a = SamplingMatrix::from_rows(t, SamplingSource::Adaptive, DMatrix::from_row_slice(1, 16, row.as_slice()), 1.0).unwrap();
        let a = PerPointSamplingMatrices::new(vec![a]).unwrap();
        let f = random_carriers(1, 2, 16, &mut rng);
        let out = adaptive_nonlinearity(&a, &f, Activation::Identity).unwrap();
        let want = (&f[0] * &row) * row.transpose() * 16.0;
        assert!((&out[0] - want).amax() < 1e-12);
    }

    #[test]
    fn dense_fixed_rows_reconstruct_the_input() {
        let t = FieldType::quotient(3).unwrap();
        let grid = repulsion_grid(Space::Sphere, 1024, RepulsionParams::default()).unwrap();
        let fixed = sampling_matrix(&t, &grid, true).unwrap();
        let a = SamplingMatrix::from_rows(t, SamplingSource::Adaptive, fixed.matrix().clone(), 1.0).unwrap();
        let a = PerPointSamplingMatrices::new(vec![a]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_carriers(1, 4, 16, &mut rng);
        let out = adaptive_nonlinearity(&a, &f, Activation::Identity).unwrap();
        let rel = (&out[0] - &f[0]).norm() / f[0].norm();
        assert!(rel < 0.05, "{rel}");
    }

    #[test]
    fn downsampling_rules() {
        let t = FieldType::quotient(1).unwrap();
        let g = build_generator(&[(0, 1), (1, 1)], &t, 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = generate_a(&g, &random_bundle(4, &[1, 1], &mut rng)).unwrap();
        assert_eq!(downsample_indexing(&a, &[0, 1, 2, 3]).unwrap(), a);
        let sub = downsample_indexing(&a, &[1, 3]).unwrap();
        assert_eq!(sub.get(1), a.get(3));
        assert_eq!(downsample_indexing(&a, &[]).unwrap_err().to_string(), "empty downsample");
        assert!(matches!(downsample_indexing(&a, &[4]), Err(Error::IndexOutOfRange { .. })));
        assert!(downsample_indexing(&a, &[2, 1]).is_err());
    }

    #[test]
    fn carrier_layout_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = FieldType::regular(2).unwrap();
        let x = random_bundle(2, &[3, 9, 15], &mut rng);
        let carriers: Vec<_> = (0..2).map(|p| carrier_from_fields(&x, p, &t).unwrap()).collect();
        assert_eq!(carriers[0].shape(), (3, 35));
        assert_eq!(fields_from_carriers(&carriers, &t).unwrap(), x);
        assert!(carrier_from_fields(&FieldBundle::zeros(1, &[1, 1]), 0, &t).is_err());
    }

    #[test]
    fn generator_weights_serialize() {
        let t = FieldType::quotient(1).unwrap();
        let g = build_generator_with_depth(&[(0, 2), (1, 1)], &t, 3, GeneratorDepth::Mlp { hidden: 2 }, 9).unwrap();
        let text = serde_json::to_string(&g).unwrap();
        let back: GeneratorWeights = serde_json::from_str(&text).unwrap();
        assert_eq!(back, g);
        let broken = text.replace("\"samples\":3", "\"samples\":4");
        assert!(serde_json::from_str::<GeneratorWeights>(&broken).is_err());
    }
}
