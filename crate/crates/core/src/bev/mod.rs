//! BEV feature grids.
//!
//! Grid coordinate `(u, v)` addresses rows along the sensor x-axis and columns
//! along the sensor y-axis; integer coordinates are cell centers, so cell
//! `(i, j)` covers `[i-0.5, i+0.5) × [j-0.5, j+0.5)`.

mod dump;
mod posenc;
mod raster;
mod sample;
mod upsample;

pub use dump::{load_grid, parse_grid, save_grid, write_grid};
pub use posenc::positional_encoding_2d;
pub use raster::{cell_of, rasterize_semantic_gt};
pub use sample::{bilinear_sample, bilinear_weights, BilinearWeights};
pub use upsample::upsample_layer;

use crate::geometry::GridSpec;
use crate::{Error, Result, Tensor};

pub const PYRAMID_LEVELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub spec: GridSpec,
    pub channels: usize,
    pub layer: usize,
    /// `rows × cols × channels`, channel fastest.
    pub data: Vec<f64>,
}

impl BevGrid {
    pub fn zeros(spec: GridSpec, channels: usize, layer: usize) -> Self {
        Self {
            spec,
            channels,
            layer,
            data: vec![0.0; spec.cells() * channels],
        }
    }

    pub fn new(spec: GridSpec, channels: usize, layer: usize, data: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if data.len() != spec.cells() * channels {
            return Err(Error::Shape(format!(
                "grid data has {} values, expected {}x{}x{}",
                data.len(),
                spec.rows,
                spec.cols,
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("grid values must be finite"));
        }
        Ok(Self {
            spec,
            channels,
            layer,
            data,
        })
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.spec.cols + j) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = (i * self.spec.cols + j) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// View as a `(rows·cols) × channels` matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.spec.cells(), self.channels, self.data.clone())
    }

    pub fn from_tensor(spec: GridSpec, layer: usize, t: Tensor) -> Result<Self> {
        Self::new(spec, t.cols, layer, t.data)
    }

    /// Elementwise `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &BevGrid, b: f64) -> BevGrid {
        assert_eq!(self.data.len(), other.data.len());
        BevGrid {
            data: self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect(),
            ..self.clone()
        }
    }
}

/// Three grids over one metric window; layer `l` has `2^l` times the cells
/// per axis and a non-increasing channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct BevPyramid {
    layers: Vec<BevGrid>,
}

impl BevPyramid {
    pub fn new(layers: Vec<BevGrid>) -> Result<Self> {
        if layers.len() != PYRAMID_LEVELS {
            return Err(Error::Shape(format!("pyramid needs {PYRAMID_LEVELS} layers, got {}", layers.len())));
        }
        let base = layers[0].spec;
        for (l, g) in layers.iter().enumerate() {
            let f = 1usize << l;
            let ok = g.spec.rows == base.rows * f
                && g.spec.cols == base.cols * f
                && (g.spec.resolution * f as f64 - base.resolution).abs() <= 1e-12 * base.resolution
                && g.spec.h_min == base.h_min
                && g.spec.w_min == base.w_min
                && g.layer == l;
            if !ok {
                return Err(Error::Shape(format!("pyramid layer {l} spec {:?} inconsistent with {:?}", g.spec, base)));
            }
            if l > 0 && g.channels > layers[l - 1].channels {
                return Err(Error::Shape("pyramid channel counts must be non-increasing".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layer(&self, l: usize) -> &BevGrid {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[BevGrid] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<GridSpec> {
        self.layers.iter().map(|g| g.spec).collect()
    }
}

/// Layer specs for a base grid: each finer layer halves the cell size.
pub fn pyramid_specs(base: GridSpec) -> [GridSpec; PYRAMID_LEVELS] {
    let l1 = base.refined();
    [base, l1, l1.refined()]
}
