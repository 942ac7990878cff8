//! Matrices as JSON arrays of rows, for `#[serde(with = ...)]`.

use nalgebra::DMatrix;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows<E: serde::de::Error>(rows: Vec<Vec<f64>>, cols_hint: Option<usize>) -> Result<DMatrix<f64>, E> {
    let ncols = rows.first().map(|r| r.len()).or(cols_hint).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(E::custom("ragged matrix rows"));
    }
    let nrows = rows.len();
    Ok(DMatrix::from_row_iterator(nrows, ncols, rows.into_iter().flatten()))
}

/// A matrix stored as `{"rows": r, "cols": c, "data": [[...], ...]}` so that
/// empty shapes survive a round trip.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Repr {
    rows: usize,
    cols: usize,
    data: Vec<Vec<f64>>,
}

pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    Repr {
        rows: m.nrows(),
        cols: m.ncols(),
        data: to_rows(m),
    }
    .serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
    let r = Repr::deserialize(d)?;
    if r.data.len() != r.rows {
        return Err(D::Error::custom("row count does not match data"));
    }
    let m = from_rows::<D::Error>(r.data, Some(r.cols))?;
    if m.ncols() != r.cols {
        return Err(D::Error::custom("column count does not match data"));
    }
    if r.rows == 0 {
        return Ok(DMatrix::zeros(0, r.cols));
    }
    Ok(m)
}

pub mod vec {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(transparent)]
    struct Wrapped(#[serde(with = "super")] DMatrix<f64>);

    pub fn serialize<S: Serializer>(v: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        let w: Vec<Wrapped> = v.iter().cloned().map(Wrapped).collect();
        w.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        Ok(Vec::<Wrapped>::deserialize(d)?.into_iter().map(|w| w.0).collect())
    }
}

pub mod opt_vec {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(transparent)]
    struct Wrapped(#[serde(with = "super::vec")] Vec<DMatrix<f64>>);

    pub fn serialize<S: Serializer>(v: &Option<Vec<DMatrix<f64>>>, s: S) -> Result<S::Ok, S::Error> {
        v.clone().map(Wrapped).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<DMatrix<f64>>>, D::Error> {
        Ok(Option::<Wrapped>::deserialize(d)?.map(|w| w.0))
    }
}
