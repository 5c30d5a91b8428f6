//! Spatiotemporal image series.
//!
//! Logically this is the Casorati matrix: `N = H·W` voxels by `T` frames.
//! Storage is frame-major (`[T][H][W]`) because every operator that touches
//! the series (FFTs, coil weighting, finite differences) works frame by
//! frame. [`ImageSeries::casorati`] materialises the `N × T` view.

use crate::error::{Error, Result};
use crate::numerics::{CMatrix, C64};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSeries {
    height: usize,
    width: usize,
    frames: usize,
    data: Vec<C64>,
}

impl ImageSeries {
    pub fn new(height: usize, width: usize, frames: usize, data: Vec<C64>) -> Result<Self> {
        if height * width * frames != data.len() {
            return Err(Error::Shape(format!(
                "{frames} frames of {height}x{width} need {} values, got {}",
                height * width * frames,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            frames,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, frames: usize) -> Self {
        Self {
            height,
            width,
            frames,
            data: vec![C64::new(0.0, 0.0); height * width * frames],
        }
    }

    /// Builds a series from per-frame images.
    pub fn from_frames(height: usize, width: usize, frames: &[Vec<C64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * frames.len());
        for f in frames {
            if f.len() != height * width {
                return Err(Error::Shape(format!(
                    "frame has {} pixels, expected {}",
                    f.len(),
                    height * width
                )));
            }
            data.extend_from_slice(f);
        }
        Self::new(height, width, frames.len(), data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn voxels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[C64] {
        let n = self.voxels();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [C64] {
        let n = self.voxels();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn same_shape(&self, other: &ImageSeries) -> bool {
        self.height == other.height && self.width == other.width && self.frames == other.frames
    }

    pub fn check_shape(&self, other: &ImageSeries) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "series {}x{}x{} vs {}x{}x{}",
                self.frames, self.height, self.width, other.frames, other.height, other.width
            )))
        }
    }

    /// `N × T` Casorati matrix.
    pub fn casorati(&self) -> CMatrix {
        let (n, t) = (self.voxels(), self.frames);
        CMatrix::from_fn(n, t, |i, j| self.data[j * n + i])
    }

    pub fn from_casorati(height: usize, width: usize, m: &CMatrix) -> Result<Self> {
        if m.rows() != height * width {
            return Err(Error::Shape(format!(
                "Casorati has {} rows, grid has {} voxels",
                m.rows(),
                height * width
            )));
        }
        let (n, t) = (m.rows(), m.cols());
        let mut data = vec![C64::new(0.0, 0.0); n * t];
        for i in 0..n {
            for j in 0..t {
                data[j * n + i] = m.get(i, j);
            }
        }
        Self::new(height, width, t, data)
    }

    pub fn magnitudes(&self, t: usize) -> Vec<f64> {
        self.frame(t).iter().map(|z| z.norm()).collect()
    }

    pub fn scaled(&self, factor: f64) -> ImageSeries {
        ImageSeries {
            data: self.data.iter().map(|z| z * factor).collect(),
            ..self.clone()
        }
    }
}
