use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the d-dimensional (normalized) feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DataPoint(Vec<f64>);

impl DataPoint {
    /// Builds a point, rejecting empty or non-finite coordinates.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Input("data point must have at least one coordinate".into()));
        }
        if let Some(i) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::Input(format!(
                "coordinate {i} is not finite ({})",
                coords[i]
            )));
        }
        Ok(DataPoint(coords))
    }

    pub fn zeros(d: usize) -> Self {
        DataPoint(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &DataPoint) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl From<DataPoint> for Vec<f64> {
    fn from(p: DataPoint) -> Self {
        p.0
    }
}

impl AsRef<[f64]> for DataPoint {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// The real data `{x_n}`, all of one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct RealDataset {
    points: Vec<DataPoint>,
}

impl RealDataset {
    pub fn new(points: Vec<DataPoint>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::Input("dataset must contain at least one point".into()));
        };
        let d = first.dim();
        if let Some(i) = points.iter().position(|p| p.dim() != d) {
            return Err(Error::Input(format!(
                "point {} has dimension {}, expected {d}",
                i + 1,
                points[i].dim()
            )));
        }
        Ok(RealDataset { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].dim()
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    /// Point with 1-based id `n`.
    pub fn get(&self, id: usize) -> Option<&DataPoint> {
        id.checked_sub(1).and_then(|i| self.points.get(i))
    }

    /// Iterates `(id, point)` with ids `1..=N`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &DataPoint)> {
        self.points.iter().enumerate().map(|(i, p)| (i + 1, p))
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        points_to_matrix(&self.points)
    }
}

/// Stacks points row-wise. Panics if dimensions differ.
pub fn points_to_matrix(points: &[DataPoint]) -> Array2<f64> {
    let d = points.first().map_or(0, DataPoint::dim);
    let flat: Vec<f64> = points.iter().flat_map(|p| p.0.iter().copied()).collect();
    Array2::from_shape_vec((points.len(), d), flat).expect("points share one dimension")
}

pub fn matrix_to_points(m: &Array2<f64>) -> Vec<DataPoint> {
    m.rows().into_iter().map(|r| DataPoint(r.to_vec())).collect()
}
