use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{FradError, Result};

/// Cartesian coordinates of one molecule, flattened as `[x0, y0, z0, x1, ...]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Conformation(Vec<f64>);

impl Conformation {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.len() % 3 != 0 {
            return Err(FradError::Precondition(format!(
                "coordinate vector of length {} is not a multiple of 3",
                coords.len()
            )));
        }
        if let Some(i) = coords.iter().position(|c| !c.is_finite()) {
            return Err(FradError::Precondition(format!(
                "non-finite coordinate at index {i}"
            )));
        }
        Ok(Self(coords))
    }

    pub fn from_points(points: &[Vector3<f64>]) -> Self {
        Self(points.iter().flat_map(|p| [p.x, p.y, p.z]).collect())
    }

    pub fn zeros(n_atoms: usize) -> Self {
        Self(vec![0.0; 3 * n_atoms])
    }

    pub fn n_atoms(&self) -> usize {
        self.0.len() / 3
    }

    pub fn pos(&self, a: usize) -> Vector3<f64> {
        Vector3::new(self.0[3 * a], self.0[3 * a + 1], self.0[3 * a + 2])
    }

    pub fn set_pos(&mut self, a: usize, p: Vector3<f64>) {
        self.0[3 * a] = p.x;
        self.0[3 * a + 1] = p.y;
        self.0[3 * a + 2] = p.z;
    }

    pub fn points(&self) -> Vec<Vector3<f64>> {
        (0..self.n_atoms()).map(|a| self.pos(a)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        (self.pos(a) - self.pos(b)).norm()
    }

    /// `self - other`, coordinate-wise.
    pub fn displacement_from(&self, other: &Conformation) -> Vec<f64> {
        self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()
    }

    pub fn check_atoms(&self, n_atoms: usize) -> Result<()> {
        if self.n_atoms() != n_atoms || self.0.len() % 3 != 0 {
            return Err(FradError::Dimension {
                expected: 3 * n_atoms,
                got: self.0.len(),
            });
        }
        Ok(())
    }
}
