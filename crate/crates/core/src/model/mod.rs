//! A small equivariant point-cloud classifier.
//!
//! Main branch: harmonic lift, then three blocks of (equivariant linear →
//! nonlinearity → farthest-point downsampling), invariant pooling and a dense
//! head. With adaptive nonlinearities a sampling branch turns the lifted
//! fields into one sampling matrix per point; later blocks reuse it by
//! keeping the rows of the surviving points.

pub mod geometry;
pub mod layers;
pub mod train;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::adaptive::{
    build_generator_with_depth, GeneratorDepth, GeneratorWeights, DEGENERATE_ROW_NORM, MLP_ACTIVATION,
    MLP_NORM_BIAS,
};
use crate::error::{Error, Result};
use crate::fourier::{pinv, sampling_matrix, FtMode};
use crate::harmonics::dim;
use crate::reptypes::{FieldType, Kind};
use crate::rotations::{cubic_group, repulsion_grid, Grid, RepulsionParams, Space};
use crate::tape::{Gradients, Tape, Var};

pub use crate::bundle::FieldBundle;
pub use geometry::{fps, fps_sorted, harmonic_lift, PointCloud};
pub use layers::{equivariant_linear, invariant_pool};

/// Sample set of a fixed-grid nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FixedGrid {
    /// Repulsion grid on S² (quotient types) or SO(3) (regular types).
    #[default]
    Repulsion,
    /// The 24 rotations of the cube; requires `samples = 24`.
    Cubic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Nonlinearity {
    FourierFixed {
        samples: usize,
        #[serde(default)]
        grid: FixedGrid,
    },
    Adaptive {
        samples: usize,
    },
    Norm,
    Gated,
}

impl Nonlinearity {
    pub fn samples(&self) -> Option<usize> {
        match self {
            Nonlinearity::FourierFixed { samples, .. } | Nonlinearity::Adaptive { samples } => Some(*samples),
            _ => None,
        }
    }

    /// Short label such as `adaptive`, `fourier_fixed` or `norm`.
    pub fn name(&self) -> &'static str {
        match self {
            Nonlinearity::FourierFixed { .. } => "fourier_fixed",
            Nonlinearity::Adaptive { .. } => "adaptive",
            Nonlinearity::Norm => "norm",
            Nonlinearity::Gated => "gated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub nonlinearity: Nonlinearity,
    /// Carrier type of the nonlinearities; its band limit is the band limit
    /// of every bundle.
    pub field_type: FieldType,
    pub activation: Activation,
    /// Channels per block; frequency `l` carries `width·q_l` copies.
    pub widths: Vec<usize>,
    pub ratios: Vec<f64>,
    pub radius: f64,
    pub n_radial: usize,
    /// Hidden widths of the dense head.
    pub dense: Vec<usize>,
    pub classes: usize,
    pub generator_depth: GeneratorDepth,
    /// One generator per nonlinear block instead of a shared one.
    pub per_layer_generators: bool,
    pub ft_mode: FtMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            nonlinearity: Nonlinearity::Adaptive { samples: 2 },
            field_type: FieldType::quotient(3).expect("valid"),
            activation: Activation::Elu,
            widths: vec![8, 16, 32],
            ratios: vec![0.5, 0.5, 0.5],
            radius: 2.5,
            n_radial: 4,
            dense: vec![64, 32],
            classes: 8,
            generator_depth: GeneratorDepth::Linear,
            per_layer_generators: false,
            ft_mode: FtMode::PInv,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be a nonempty list of positive integers".into());
        }
        if self.ratios.len() != self.widths.len() {
            return bad(format!(
                "{} FPS ratios for {} blocks",
                self.ratios.len(),
                self.widths.len()
            ));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return bad(format!("FPS ratio {r} is outside (0, 1]"));
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return bad(format!("radius must be positive, got {}", self.radius));
        }
        if self.n_radial == 0 {
            return bad("n_radial must be at least 1".into());
        }
        if self.dense.contains(&0) {
            return bad("dense widths must be positive".into());
        }
        if self.classes < 2 {
            return bad("at least two classes are needed".into());
        }
        match self.nonlinearity {
            Nonlinearity::FourierFixed { samples, grid } => {
                if samples == 0 {
                    return bad("a fixed grid needs at least one sample".into());
                }
                if grid == FixedGrid::Cubic && samples != 24 {
                    return bad("the cubic grid has exactly 24 samples".into());
                }
            }
            Nonlinearity::Adaptive { samples } => {
                if samples == 0 {
                    return bad("an adaptive matrix needs at least one row".into());
                }
            }
            _ => {}
        }
        if let GeneratorDepth::Mlp { hidden: 0 } = self.generator_depth {
            return bad("MLP generator needs hidden >= 1".into());
        }
        Ok(())
    }

    pub fn lmax(&self) -> usize {
        self.field_type.band_limit()
    }

    fn lcount(&self) -> usize {
        self.lmax() + 1
    }

    /// Copies per frequency after block `b`'s nonlinearity.
    pub fn block_multiplicities(&self, b: usize) -> Vec<usize> {
        (0..self.lcount())
            .map(|l| self.widths[b] * self.field_type.multiplicity(l))
            .collect()
    }

    /// Copies per frequency produced by block `b`'s linear map (gated blocks
    /// add one scalar gate per non-scalar copy).
    fn linear_out_multiplicities(&self, b: usize) -> Vec<usize> {
        let mut m = self.block_multiplicities(b);
        if self.nonlinearity == Nonlinearity::Gated {
            m[0] += m[1..].iter().sum::<usize>();
        }
        m
    }

    fn block_in_multiplicities(&self, b: usize) -> Vec<usize> {
        if b == 0 {
            vec![self.n_radial; self.lcount()]
        } else {
            self.block_multiplicities(b - 1)
        }
    }

    pub fn pooled_size(&self) -> usize {
        self.block_multiplicities(self.widths.len() - 1).iter().sum()
    }

    fn generator_count(&self) -> usize {
        match self.nonlinearity {
            Nonlinearity::Adaptive { .. } if self.per_layer_generators => self.widths.len(),
            Nonlinearity::Adaptive { .. } => 1,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockWeights {
    /// Per frequency, `out × in`.
    #[serde(with = "crate::serde_matrix::vec")]
    pub linear: Vec<DMatrix<f64>>,
    /// `1 × out₀`.
    #[serde(with = "crate::serde_matrix")]
    pub bias: DMatrix<f64>,
    /// Norm nonlinearity thresholds for frequencies `1..=L` (`1 × m_l` each);
    /// empty for other nonlinearities.
    #[serde(with = "crate::serde_matrix::vec")]
    pub norm_bias: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseWeights {
    /// `in × out`.
    #[serde(with = "crate::serde_matrix")]
    pub w: DMatrix<f64>,
    /// `1 × out`.
    #[serde(with = "crate::serde_matrix")]
    pub b: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelWeights {
    pub blocks: Vec<BlockWeights>,
    pub generators: Vec<GeneratorWeights>,
    pub dense: Vec<DenseWeights>,
}

fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = Normal::new(0.0, std).expect("finite std");
    DMatrix::from_fn(rows, cols, |_, _| n.sample(rng))
}

/// Initial norm-nonlinearity threshold.
const NORM_BIAS_INIT: f64 = 0.1;

impl ModelWeights {
    /// Seeded initialization: equivariant weights `N(0, 1/fan_in)`, dense
    /// weights `N(0, 2/fan_in)`, biases zero. Adaptive models with `N < F`
    /// scale equivariant weights by `N/F` to offset the `F/N` output gain.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gain = match config.nonlinearity {
            Nonlinearity::Adaptive { samples } => (samples as f64 / config.field_type.size() as f64).min(1.0),
            _ => 1.0,
        };
        let mut blocks = Vec::new();
        for b in 0..config.widths.len() {
            let mi = config.block_in_multiplicities(b);
            let mo = config.linear_out_multiplicities(b);
            let linear = mi
                .iter()
                .zip(&mo)
                .map(|(&i, &o)| normal_matrix(o, i, gain / (i as f64).sqrt(), &mut rng))
                .collect();
            let norm_bias = if config.nonlinearity == Nonlinearity::Norm {
                (1..config.lcount())
                    .map(|l| DMatrix::from_element(1, mo[l], NORM_BIAS_INIT))
                    .collect()
            } else {
                Vec::new()
            };
            blocks.push(BlockWeights {
                linear,
                bias: DMatrix::zeros(1, mo[0]),
                norm_bias,
            });
        }
        let in_type: Vec<_> = (0..config.lcount()).map(|l| (l, config.n_radial)).collect();
        let generators = (0..config.generator_count())
            .map(|g| {
                build_generator_with_depth(
                    &in_type,
                    &config.field_type,
                    config.nonlinearity.samples().expect("adaptive"),
                    config.generator_depth,
                    config.seed.wrapping_mul(7919).wrapping_add(1 + g as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut dense = Vec::new();
        let mut fan_in = config.pooled_size();
        for &out in config.dense.iter().chain(std::iter::once(&config.classes)) {
            dense.push(DenseWeights {
                w: normal_matrix(fan_in, out, (2.0 / fan_in as f64).sqrt(), &mut rng),
                b: DMatrix::zeros(1, out),
            });
            fan_in = out;
        }
        Ok(ModelWeights {
            blocks,
            generators,
            dense,
        })
    }

    /// Checks every shape against `config`.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let reference = ModelWeights::init(config)?;
        let shapes = |w: &ModelWeights| w.params().iter().map(|p| p.shape()).collect::<Vec<_>>();
        if self.params().len() != reference.params().len() || shapes(self) != shapes(&reference) {
            return Err(Error::Config("weights do not match the model configuration".into()));
        }
        for (g, r) in self.generators.iter().zip(&reference.generators) {
            if g.in_type() != r.in_type() || g.field_type() != r.field_type() || g.samples() != r.samples() {
                return Err(Error::Config("generator does not match the model configuration".into()));
            }
        }
        Ok(())
    }

    /// Every trainable matrix in a fixed order.
    pub fn params(&self) -> Vec<&DMatrix<f64>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.linear.iter());
            out.push(&b.bias);
            out.extend(b.norm_bias.iter());
        }
        for g in &self.generators {
            out.extend(g.matrices());
        }
        for d in &self.dense {
            out.push(&d.w);
            out.push(&d.b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.linear.iter_mut());
            out.push(&mut b.bias);
            out.extend(b.norm_bias.iter_mut());
        }
        for g in &mut self.generators {
            out.extend(g.matrices_mut());
        }
        for d in &mut self.dense {
            out.push(&mut d.w);
            out.push(&mut d.b);
        }
        out
    }

    /// Group label of every entry of [`ModelWeights::params`]
    /// (`equivariant_linear`, `norm_bias`, `generator`, `dense`).
    pub fn param_groups(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(std::iter::repeat_n("equivariant_linear", b.linear.len() + 1));
            out.extend(std::iter::repeat_n("norm_bias", b.norm_bias.len()));
        }
        for g in &self.generators {
            out.extend(std::iter::repeat_n("generator", g.matrices().len()));
        }
        out.extend(std::iter::repeat_n("dense", 2 * self.dense.len()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// A model checkpoint: configuration plus weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

/// Fixed sampling matrix and its back-projection `(A†)ᵀ` (or scaled `A`).
#[derive(Debug, Clone)]
struct FixedGridData {
    a: DMatrix<f64>,
    back: DMatrix<f64>,
}

/// Configuration, weights, and derived constants ready for evaluation.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
    fixed: Option<FixedGridData>,
}

/// Tape handles of the weights, in the order of [`ModelWeights::params`].
struct Bound {
    blocks: Vec<(Vec<Var>, Var, Vec<Var>)>,
    generators: Vec<(Option<Vec<Var>>, Vec<Var>)>,
    dense: Vec<(Var, Var)>,
    all: Vec<Var>,
}

pub fn fixed_grid(config: &ModelConfig) -> Result<Option<Grid>> {
    let Nonlinearity::FourierFixed { samples, grid } = config.nonlinearity else {
        return Ok(None);
    };
    Ok(Some(match grid {
        FixedGrid::Cubic => cubic_group(),
        FixedGrid::Repulsion => {
            let space = match config.field_type.kind() {
                Kind::Quotient => Space::Sphere,
                Kind::Regular => Space::Group,
            };
            repulsion_grid(space, samples, RepulsionParams::default())?
        }
    }))
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.check(&config)?;
        let fixed = match fixed_grid(&config)? {
            None => None,
            Some(grid) => {
                let a = sampling_matrix(&config.field_type, &grid, true)?;
                let back = match config.ft_mode {
                    FtMode::PInv => pinv(a.matrix()).transpose(),
                    FtMode::ApproxTranspose => a.matrix() * a.transpose_scale(),
                };
                Some(FixedGridData {
                    a: a.matrix().clone(),
                    back,
                })
            }
        };
        Ok(Model {
            config,
            weights,
            fixed,
        })
    }

    /// Freshly initialized model.
    pub fn init(config: ModelConfig) -> Result<Self> {
        let w = ModelWeights::init(&config)?;
        Model::new(config, w)
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        Model::new(c.config, c.weights)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            weights: self.weights.clone(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    /// Mutable weights; shapes must not change.
    pub fn weights_mut(&mut self) -> &mut ModelWeights {
        &mut self.weights
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let mut all = Vec::new();
        let mut put = |tape: &mut Tape, m: &DMatrix<f64>| -> Result<Var> {
            let v = if trainable {
                tape.param(m.clone())?
            } else {
                tape.constant(m.clone())?
            };
            all.push(v);
            Ok(v)
        };
        let mut blocks = Vec::new();
        for b in &self.weights.blocks {
            let lin = b.linear.iter().map(|m| put(tape, m)).collect::<Result<Vec<_>>>()?;
            let bias = put(tape, &b.bias)?;
            let nb = b.norm_bias.iter().map(|m| put(tape, m)).collect::<Result<Vec<_>>>()?;
            blocks.push((lin, bias, nb));
        }
        let mut generators = Vec::new();
        for g in &self.weights.generators {
            let hidden = match g.depth() {
                GeneratorDepth::Linear => None,
                GeneratorDepth::Mlp { .. } => Some(
                    (0..=self.config.lmax())
                        .map(|l| put(tape, g.hidden_weight(l).expect("mlp")))
                        .collect::<Result<Vec<_>>>()?,
                ),
            };
            let w = (0..=self.config.lmax())
                .map(|l| put(tape, g.weight(l)))
                .collect::<Result<Vec<_>>>()?;
            generators.push((hidden, w));
        }
        let mut dense = Vec::new();
        for d in &self.weights.dense {
            let w = put(tape, &d.w)?;
            let b = put(tape, &d.b)?;
            dense.push((w, b));
        }
        Ok(Bound {
            blocks,
            generators,
            dense,
            all,
        })
    }

    /// Records `A(x)` for every point (stacked `(P·N) × F`, unit rows).
    fn generate_a_tape(
        &self,
        tape: &mut Tape,
        g: usize,
        vars: &(Option<Vec<Var>>, Vec<Var>),
        lift: &[Var],
        points: usize,
    ) -> Result<Var> {
        let t = self.config.field_type;
        let n = self.weights.generators[g].samples();
        let mut outs = Vec::with_capacity(lift.len());
        for l in 0..=t.band_limit() {
            let mut x = lift[l];
            if let Some(h) = &vars.0 {
                let wt = tape.transpose(h[l])?;
                let hid = tape.matmul(x, wt)?;
                let m = tape.shape(hid).1;
                let b = tape.constant(DMatrix::from_element(1, m, MLP_NORM_BIAS))?;
                x = layers::norm_nonlinearity_tape(tape, hid, l, points, b, MLP_ACTIVATION)?;
            }
            let wt = tape.transpose(vars.1[l])?;
            outs.push(tape.matmul(x, wt)?);
        }
        let cols = layers::column_layout(&t);
        let rows = points * n;
        let map: Vec<_> = cols
            .iter()
            .flat_map(|&(l, j, c)| {
                let q = t.multiplicity(l);
                let d = dim(l);
                (0..rows).map(move |r| Some((l, (r / n) * d + c, (r % n) * q + j)))
            })
            .collect();
        let raw = tape.gather(&outs, rows, t.size(), map)?;
        let norms = tape.row_norms(raw)?;
        if let Some((r, v)) = tape
            .value(norms)
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= DEGENERATE_ROW_NORM))
        {
            return Err(Error::DegenerateRow {
                point: r / n,
                row: r % n,
                norm: *v,
            });
        }
        let inv = tape.recip(norms)?;
        tape.mul_rows(raw, inv)
    }

    fn nonlinearity(
        &self,
        tape: &mut Tape,
        y: Vec<Var>,
        b: usize,
        bound: &Bound,
        a_adaptive: Option<Var>,
        points: usize,
    ) -> Result<Vec<Var>> {
        let t = self.config.field_type;
        let sigma = self.config.activation;
        match self.config.nonlinearity {
            Nonlinearity::FourierFixed { .. } => {
                let fixed = self.fixed.as_ref().expect("fixed grid data");
                let z = layers::to_carrier(tape, &y, &t, points)?;
                let at = tape.constant(fixed.a.transpose())?;
                let s = tape.matmul(z, at)?;
                let s = tape.activation(s, sigma)?;
                let back = tape.constant(fixed.back.clone())?;
                let out = tape.matmul(s, back)?;
                layers::from_carrier(tape, out, &t, points)
            }
            Nonlinearity::Adaptive { samples } => {
                let a = a_adaptive.expect("adaptive sampling matrices");
                let z = layers::to_carrier(tape, &y, &t, points)?;
                let c = tape.shape(z).0 / points;
                let scale = t.size() as f64 / samples as f64;
                let mut parts = Vec::with_capacity(points);
                for p in 0..points {
                    let zp = tape.slice_rows(z, p * c, c)?;
                    let ap = tape.slice_rows(a, p * samples, samples)?;
                    let apt = tape.transpose(ap)?;
                    let s = tape.matmul(zp, apt)?;
                    let s = tape.activation(s, sigma)?;
                    let o = tape.matmul(s, ap)?;
                    parts.push(tape.scale(o, scale)?);
                }
                let out = tape.concat_rows(&parts)?;
                layers::from_carrier(tape, out, &t, points)
            }
            Nonlinearity::Norm => {
                let mut out = Vec::with_capacity(y.len());
                out.push(tape.activation(y[0], sigma)?);
                for l in 1..y.len() {
                    out.push(layers::norm_nonlinearity_tape(
                        tape,
                        y[l],
                        l,
                        points,
                        bound.blocks[b].2[l - 1],
                        sigma,
                    )?);
                }
                Ok(out)
            }
            Nonlinearity::Gated => {
                let mults = self.config.block_multiplicities(b);
                let scalars = tape.slice_cols(y[0], 0, mults[0])?;
                let mut out = vec![tape.activation(scalars, sigma)?];
                let mut start = mults[0];
                for l in 1..y.len() {
                    let gates = tape.slice_cols(y[0], start, mults[l])?;
                    start += mults[l];
                    let gates = tape.sigmoid(gates)?;
                    let g = layers::broadcast_fields(tape, gates, l)?;
                    out.push(tape.hadamard(y[l], g)?);
                }
                Ok(out)
            }
        }
    }

    /// Records the forward pass and returns `1 × classes` logits.
    fn forward_bound(&self, tape: &mut Tape, bound: &Bound, cloud: &PointCloud) -> Result<Var> {
        let mut h = self.pooled_bound(tape, bound, cloud)?;
        let last = bound.dense.len() - 1;
        for (i, (w, bias)) in bound.dense.iter().enumerate() {
            h = tape.matmul(h, *w)?;
            h = tape.add_row(h, *bias)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Records the equivariant trunk and returns the pooled invariants.
    fn pooled_bound(&self, tape: &mut Tape, bound: &Bound, cloud: &PointCloud) -> Result<Var> {
        let cfg = &self.config;
        let lift = harmonic_lift(cloud, cfg.radius, cfg.n_radial, cfg.lmax())?;
        let lift_vars = layers::bundle_constants(tape, &lift)?;
        let n_all = cloud.len();
        let samples = cfg.nonlinearity.samples().unwrap_or(0);
        let mut shared_a = match cfg.nonlinearity {
            Nonlinearity::Adaptive { .. } if !cfg.per_layer_generators => {
                Some(self.generate_a_tape(tape, 0, &bound.generators[0], &lift_vars, n_all)?)
            }
            _ => None,
        };
        let mut coords = cloud.points().to_vec();
        let mut survivors: Vec<usize> = (0..n_all).collect();
        let mut x = lift_vars.clone();
        for b in 0..cfg.widths.len() {
            let points = coords.len();
            let (lin, bias, _) = &bound.blocks[b];
            let mut y = Vec::with_capacity(x.len());
            for (l, xl) in x.iter().enumerate() {
                let wt = tape.transpose(lin[l])?;
                let mut yl = tape.matmul(*xl, wt)?;
                if l == 0 {
                    yl = tape.add_row(yl, *bias)?;
                }
                y.push(yl);
            }
            let a = match cfg.nonlinearity {
                Nonlinearity::Adaptive { .. } if cfg.per_layer_generators => {
                    let full = self.generate_a_tape(tape, b, &bound.generators[b], &lift_vars, n_all)?;
                    Some(select_a_rows(tape, full, &survivors, samples)?)
                }
                _ => shared_a,
            };
            x = self.nonlinearity(tape, y, b, bound, a, points)?;
            let kept = fps_sorted(&coords, cfg.ratios[b])?;
            x = layers::select_points(tape, &x, &kept)?;
            coords = kept.iter().map(|&i| coords[i]).collect();
            survivors = kept.iter().map(|&i| survivors[i]).collect();
            if let Some(a) = shared_a {
                shared_a = Some(select_a_rows(tape, a, &kept, samples)?);
            }
        }
        layers::invariant_pool_tape(tape, &x, coords.len())
    }

    /// Distance of one cloud's forward pass from the loss's non-smooth
    /// points (see [`Tape::kink_margin`]).
    pub fn kink_margin(&self, cloud: &PointCloud) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        self.forward_bound(&mut tape, &bound, cloud)?;
        Ok(tape.kink_margin())
    }

    /// Logits for one cloud.
    pub fn logits(&self, cloud: &PointCloud) -> Result<DVector<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let z = self.forward_bound(&mut tape, &bound, cloud)?;
        Ok(DVector::from_column_slice(tape.value(z).as_slice()))
    }

    /// Mean cross-entropy over a batch and its gradient with respect to
    /// every entry of [`ModelWeights::params`]. Also returns the logits.
    pub fn loss_and_gradients(
        &self,
        clouds: &[&PointCloud],
        labels: &[usize],
    ) -> Result<(f64, Vec<DMatrix<f64>>, DMatrix<f64>)> {
        let mut tape = Tape::new();
        let (loss, logits, bound) = self.record_loss(&mut tape, clouds, labels, true)?;
        let grads: Gradients = tape.backward(loss)?;
        let g = bound.all.iter().map(|v| grads.wrt(*v)).collect();
        Ok((tape.scalar(loss), g, tape.value(logits).clone()))
    }

    fn record_loss(
        &self,
        tape: &mut Tape,
        clouds: &[&PointCloud],
        labels: &[usize],
        trainable: bool,
    ) -> Result<(Var, Var, Bound)> {
        let bound = self.bind(tape, trainable)?;
        let rows = clouds
            .iter()
            .map(|c| self.forward_bound(tape, &bound, c))
            .collect::<Result<Vec<_>>>()?;
        let logits = tape.concat_rows(&rows)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        Ok((loss, logits, bound))
    }

    /// Loss as a function of replacement parameter values (for gradient
    /// checks); `params` follows [`ModelWeights::params`].
    pub fn loss_with_params(
        &self,
        tape: &mut Tape,
        params: &[Var],
        clouds: &[&PointCloud],
        labels: &[usize],
    ) -> Result<Var> {
        let bound = self.bind_vars(params)?;
        let rows = clouds
            .iter()
            .map(|c| self.forward_bound(tape, &bound, c))
            .collect::<Result<Vec<_>>>()?;
        let logits = tape.concat_rows(&rows)?;
        tape.softmax_cross_entropy(logits, labels)
    }

    fn bind_vars(&self, params: &[Var]) -> Result<Bound> {
        let expected = self.weights.params().len();
        if params.len() != expected {
            return Err(Error::Shape(format!("{} parameter handles, expected {expected}", params.len())));
        }
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("counted");
        let lcount = self.config.lmax() + 1;
        let blocks = self
            .weights
            .blocks
            .iter()
            .map(|b| {
                let lin = (0..b.linear.len()).map(|_| next()).collect();
                let bias = next();
                let nb = (0..b.norm_bias.len()).map(|_| next()).collect();
                (lin, bias, nb)
            })
            .collect();
        let generators = self
            .weights
            .generators
            .iter()
            .map(|g| {
                let hidden = match g.depth() {
                    GeneratorDepth::Linear => None,
                    GeneratorDepth::Mlp { .. } => Some((0..lcount).map(|_| next()).collect()),
                };
                (hidden, (0..lcount).map(|_| next()).collect())
            })
            .collect();
        let dense = self.weights.dense.iter().map(|_| (next(), next())).collect();
        Ok(Bound {
            blocks,
            generators,
            dense,
            all: params.to_vec(),
        })
    }
}

fn select_a_rows(tape: &mut Tape, a: Var, kept: &[usize], samples: usize) -> Result<Var> {
    let rows: Vec<usize> = kept
        .iter()
        .flat_map(|&p| p * samples..(p + 1) * samples)
        .collect();
    tape.select_rows(a, &rows)
}
