//! Points of the slit tangent bundle in canonical coordinates (x^i, y^i).

use crate::error::{Error, Result};

/// Points with |y| below this are rejected: the slit bundle excludes y = 0.
pub const SLIT_EPSILON: f64 = 1e-12;

/// A point (x, y) with y ≠ 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    base: Vec<f64>,
    fibre: Vec<f64>,
}

impl PhasePoint {
    pub fn new(base: Vec<f64>, fibre: Vec<f64>) -> Result<Self> {
        if base.len() != fibre.len() {
            return Err(Error::Dimension { expected: base.len(), got: fibre.len() });
        }
        let norm = fibre.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= SLIT_EPSILON {
            return Err(Error::SlitBundle { norm, eps: SLIT_EPSILON });
        }
        Ok(PhasePoint { base, fibre })
    }

    pub fn dim(&self) -> usize {
        self.base.len()
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn fibre(&self) -> &[f64] {
        &self.fibre
    }

    pub fn fibre_norm(&self) -> f64 {
        self.fibre.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Coordinates in jet-variable order: x1..xn, y1..yn.
    pub fn coords(&self) -> Vec<f64> {
        let mut c = self.base.clone();
        c.extend_from_slice(&self.fibre);
        c
    }

    /// Same base point, fibre scaled by k (k ≠ 0).
    pub fn scale_fibre(&self, k: f64) -> Result<PhasePoint> {
        PhasePoint::new(self.base.clone(), self.fibre.iter().map(|v| k * v).collect())
    }

    /// Reflection (x, y) ↦ (x, −y).
    pub fn reflect(&self) -> PhasePoint {
        PhasePoint { base: self.base.clone(), fibre: self.fibre.iter().map(|v| -v).collect() }
    }

    /// Replace the fibre component.
    pub fn with_fibre(&self, fibre: Vec<f64>) -> Result<PhasePoint> {
        PhasePoint::new(self.base.clone(), fibre)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_fibre() {
        assert!(PhasePoint::new(vec![0.0; 3], vec![0.0; 3]).is_err());
        assert!(PhasePoint::new(vec![0.0; 3], vec![0.0, 1e-13, 0.0]).is_err());
        assert!(PhasePoint::new(vec![0.0; 3], vec![0.0, 1e-3, 0.0]).is_ok());
    }

    #[test]
    fn coords_order_is_base_then_fibre() {
        let p = PhasePoint::new(vec![1.0, 2.0], vec![3.0, 4.0]).unwrap();
        assert_eq!(p.coords(), vec![1.0, 2.0, 3.0, 4.0]);
    }
}
