//! Cubic voxel containers shared by every stage of the pipeline.
//!
//! Flat indices run x-fastest: `index = x + n * (y + n * z)`.

use crate::error::{Error, Result};

#[inline]
pub fn flat_index(n: usize, x: usize, y: usize, z: usize) -> usize {
    x + n * (y + n * z)
}

/// Binary porous medium, `1` = pore and `0` = solid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelGrid {
    n: usize,
    cells: Vec<u8>,
}

impl VoxelGrid {
    pub fn new(n: usize, cells: Vec<u8>) -> Result<Self> {
        if n == 0 {
            return Err(Error::shape("edge length must be positive"));
        }
        if cells.len() != n * n * n {
            return Err(Error::shape(format!(
                "expected {} cells for edge {n}, got {}",
                n * n * n,
                cells.len()
            )));
        }
        if cells.iter().any(|&c| c > 1) {
            return Err(Error::shape("voxel values must be 0 or 1"));
        }
        Ok(Self { n, cells })
    }

    pub fn filled(n: usize, pore: bool) -> Self {
        Self {
            n,
            cells: vec![pore as u8; n * n * n],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut cells = vec![0u8; n * n * n];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    cells[flat_index(n, x, y, z)] = f(x, y, z) as u8;
                }
            }
        }
        Self { n, cells }
    }

    pub fn edge(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    #[inline]
    pub fn is_pore(&self, x: usize, y: usize, z: usize) -> bool {
        self.cells[flat_index(self.n, x, y, z)] == 1
    }

    pub fn pore_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }

    pub fn porosity(&self) -> f64 {
        self.pore_count() as f64 / self.cells.len() as f64
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| c as f64).collect()
    }

    /// Reflect along the y axis.
    pub fn mirror_y(&self) -> Self {
        let n = self.n;
        Self::from_fn(n, |x, y, z| self.is_pore(x, n - 1 - y, z))
    }
}

/// Real scalar field on an `n x n x n` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Field3 {
    n: usize,
    data: Vec<f64>,
}

impl Field3 {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || data.len() != n * n * n {
            return Err(Error::shape(format!(
                "field of {} values is not a cube of edge {n}",
                data.len()
            )));
        }
        Ok(Self { n, data })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n * n],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n * n];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    data[flat_index(n, x, y, z)] = f(x, y, z);
                }
            }
        }
        Self { n, data }
    }

    pub fn edge(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[flat_index(self.n, x, y, z)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let ss: f64 = self.data.iter().map(|v| (v - m) * (v - m)).sum();
        ss / (self.data.len() as f64 - 1.0)
    }
}
