//! Dense scalar grids and binary tissue masks.

use crate::error::{invalid, Result};
use crate::geometry::VolumeExtent;

/// Attenuation (or mask) values on a voxel grid, `x` varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub extent: VolumeExtent,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(extent: VolumeExtent) -> Self {
        Self {
            extent,
            data: vec![0.0; extent.len()],
        }
    }

    pub fn filled(extent: VolumeExtent, value: f32) -> Self {
        Self {
            extent,
            data: vec![value; extent.len()],
        }
    }

    pub fn from_data(extent: VolumeExtent, data: Vec<f32>) -> Result<Self> {
        if data.len() != extent.len() {
            return invalid(format!(
                "volume data length {} does not match {}x{}x{}",
                data.len(),
                extent.nx,
                extent.ny,
                extent.nz
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("volume contains non-finite values");
        }
        Ok(Self { extent, data })
    }

    /// Evaluates `f(i, j, k)` at every voxel.
    pub fn from_fn(extent: VolumeExtent, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(extent.len());
        for k in 0..extent.nz {
            for j in 0..extent.ny {
                for i in 0..extent.nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { extent, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.extent.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.extent.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        let idx = self.extent.index(i, j, k);
        self.data[idx] = v;
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            extent: self.extent,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Volume) -> bool {
        self.dims() == other.dims()
    }

    /// Fraction of voxels strictly above `threshold`.
    pub fn fraction_above(&self, threshold: f32) -> f64 {
        self.data.iter().filter(|&&v| v > threshold).count() as f64 / self.data.len() as f64
    }
}

/// Object (`alpha`) and hard-tissue (`beta`) indicator volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMasks {
    pub alpha: Volume,
    pub beta: Volume,
}

impl TissueMasks {
    pub fn new(alpha: Volume, beta: Volume) -> Result<Self> {
        if !alpha.same_shape(&beta) {
            return invalid("alpha and beta masks differ in shape");
        }
        let m = Self { alpha, beta };
        if !m.is_binary() {
            return invalid("masks must be binary");
        }
        if !m.is_nested() {
            return invalid("beta mask must lie inside alpha mask");
        }
        Ok(m)
    }

    pub fn is_binary(&self) -> bool {
        self.alpha
            .data
            .iter()
            .chain(self.beta.data.iter())
            .all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn is_nested(&self) -> bool {
        self.alpha
            .data
            .iter()
            .zip(&self.beta.data)
            .all(|(&a, &b)| b <= a)
    }
}
