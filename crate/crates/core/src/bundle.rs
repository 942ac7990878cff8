//! Per-point collections of steerable fields.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::harmonics::{dim, wigner_d_real};
use crate::rotations::Rotation;

/// Fields at every point of a cloud, grouped by frequency.
///
/// Block `l` is a `points × (m_l·(2l+1))` matrix; copy `k` of point `p`
/// occupies columns `k·(2l+1)..(k+1)·(2l+1)` of row `p`, ordered `m = −l..l`.
/// Frequencies without fields have zero-column blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldBundle {
    points: usize,
    blocks: Vec<DMatrix<f64>>,
}

impl FieldBundle {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        let points = blocks.first().map_or(0, |b| b.nrows());
        for (l, b) in blocks.iter().enumerate() {
            if b.nrows() != points {
                return Err(Error::Shape(format!(
                    "frequency {l} block has {} rows, expected {points}",
                    b.nrows()
                )));
            }
            if b.ncols() % dim(l) != 0 {
                return Err(Error::Shape(format!(
                    "frequency {l} block has {} columns, not a multiple of {}",
                    b.ncols(),
                    dim(l)
                )));
            }
        }
        Ok(FieldBundle { points, blocks })
    }

    pub fn zeros(points: usize, multiplicities: &[usize]) -> Self {
        let blocks = multiplicities
            .iter()
            .enumerate()
            .map(|(l, &m)| DMatrix::zeros(points, m * dim(l)))
            .collect();
        FieldBundle { points, blocks }
    }

    pub fn points(&self) -> usize {
        self.points
    }

    /// Number of frequency blocks (`L + 1`).
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn multiplicity(&self, l: usize) -> usize {
        self.blocks.get(l).map_or(0, |b| b.ncols() / dim(l))
    }

    pub fn multiplicities(&self) -> Vec<usize> {
        (0..self.blocks.len()).map(|l| self.multiplicity(l)).collect()
    }

    pub fn block(&self, l: usize) -> &DMatrix<f64> {
        &self.blocks[l]
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn field(&self, point: usize, l: usize, copy: usize) -> DVector<f64> {
        let d = dim(l);
        DVector::from_iterator(d, (0..d).map(|m| self.blocks[l][(point, copy * d + m)]))
    }

    pub fn set_field(&mut self, point: usize, l: usize, copy: usize, v: &[f64]) {
        let d = dim(l);
        assert_eq!(v.len(), d, "field length");
        for (m, x) in v.iter().enumerate() {
            self.blocks[l][(point, copy * d + m)] = *x;
        }
    }

    /// Applies `D^l(r)` to every field.
    pub fn rotate(&self, r: &Rotation) -> FieldBundle {
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(l, b)| {
                let d = dim(l);
                let dl = wigner_d_real(l, r);
                let mut out = b.clone();
                for copy in 0..b.ncols() / d {
                    let cols = b.columns(copy * d, d);
                    out.columns_mut(copy * d, d).copy_from(&(cols * dl.transpose()));
                }
                out
            })
            .collect();
        FieldBundle {
            points: self.points,
            blocks,
        }
    }

    pub fn select_points(&self, indices: &[usize]) -> Result<FieldBundle> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.points) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: self.points,
            });
        }
        Ok(FieldBundle {
            points: indices.len(),
            blocks: self.blocks.iter().map(|b| b.select_rows(indices)).collect(),
        })
    }

    /// Block `l` with one row per `(point, component)` and one column per
    /// copy: `(points·(2l+1)) × m_l`.
    pub fn copies_as_columns(&self, l: usize) -> DMatrix<f64> {
        let d = dim(l);
        let m = self.multiplicity(l);
        DMatrix::from_fn(self.points * d, m, |row, k| {
            self.blocks[l][(row / d, k * d + row % d)]
        })
    }

    /// Inverse of [`FieldBundle::copies_as_columns`].
    pub fn from_copy_columns(blocks: &[DMatrix<f64>]) -> Result<FieldBundle> {
        let points = blocks.first().map_or(0, |b| b.nrows() / dim(0));
        let mut out = Vec::with_capacity(blocks.len());
        for (l, b) in blocks.iter().enumerate() {
            let d = dim(l);
            if b.nrows() != points * d {
                return Err(Error::Shape(format!(
                    "frequency {l} column block has {} rows, expected {}",
                    b.nrows(),
                    points * d
                )));
            }
            out.push(DMatrix::from_fn(points, b.ncols() * d, |p, col| {
                b[(p * d + col % d, col / d)]
            }));
        }
        FieldBundle::new(out)
    }

    pub fn max_abs_diff(&self, other: &FieldBundle) -> f64 {
        assert_eq!(self.multiplicities(), other.multiplicities(), "bundle layouts differ");
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }
}
