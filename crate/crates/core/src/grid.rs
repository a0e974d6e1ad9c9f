//! Dense W x D grids: one value per (scanline, depth sample) of a frame.

use crate::error::{Error, Result};

/// Row-major grid over `scanlines x depth`: `data[w * depth + d]`.
///
/// Row `w` holds one scanline, so depth runs contiguously in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub scanlines: usize,
    pub depth: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn zeros(scanlines: usize, depth: usize) -> Self {
        Grid {
            scanlines,
            depth,
            data: vec![0.0; scanlines * depth],
        }
    }

    pub fn from_fn(scanlines: usize, depth: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(scanlines * depth);
        for w in 0..scanlines {
            for d in 0..depth {
                data.push(f(w, d));
            }
        }
        Grid {
            scanlines,
            depth,
            data,
        }
    }

    pub fn from_vec(scanlines: usize, depth: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != scanlines * depth {
            return Err(Error::ShapeMismatch {
                op: "grid",
                lhs: vec![scanlines, depth],
                rhs: vec![data.len()],
            });
        }
        Ok(Grid {
            scanlines,
            depth,
            data,
        })
    }

    #[inline]
    pub fn at(&self, w: usize, d: usize) -> f32 {
        self.data[w * self.depth + d]
    }

    #[inline]
    pub fn set(&mut self, w: usize, d: usize, v: f32) {
        self.data[w * self.depth + d] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.scanlines == other.scanlines && self.depth == other.depth
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.data.iter().map(|&v| f64::from(v)).sum();
        (sum / self.data.len() as f64) as f32
    }

    /// Mean absolute difference against a grid of the same shape.
    pub fn mean_abs_diff(&self, other: &Grid) -> Result<f32> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch {
                op: "mean_abs_diff",
                lhs: vec![self.scanlines, self.depth],
                rhs: vec![other.scanlines, other.depth],
            });
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f64::from((a - b).abs()))
            .sum();
        Ok((sum / self.data.len() as f64) as f32)
    }
}

/// The five per-point rendering parameters over one frame grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMaps {
    pub attenuation: Grid,
    pub reflectance: Grid,
    pub border_prob: Grid,
    pub scatter_density: Grid,
    pub scatter_amplitude: Grid,
}

impl ParamMaps {
    pub fn zeros(scanlines: usize, depth: usize) -> Self {
        ParamMaps {
            attenuation: Grid::zeros(scanlines, depth),
            reflectance: Grid::zeros(scanlines, depth),
            border_prob: Grid::zeros(scanlines, depth),
            scatter_density: Grid::zeros(scanlines, depth),
            scatter_amplitude: Grid::zeros(scanlines, depth),
        }
    }

    pub fn scanlines(&self) -> usize {
        self.attenuation.scanlines
    }

    pub fn depth(&self) -> usize {
        self.attenuation.depth
    }

    pub fn channels(&self) -> [&Grid; 5] {
        [
            &self.attenuation,
            &self.reflectance,
            &self.border_prob,
            &self.scatter_density,
            &self.scatter_amplitude,
        ]
    }

    pub fn channel_names() -> [&'static str; 5] {
        [
            "attenuation",
            "reflectance",
            "border_prob",
            "scatter_density",
            "scatter_amplitude",
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, g) in Self::channel_names().iter().zip(self.channels()) {
            if !g.same_shape(&self.attenuation) {
                return Err(Error::ShapeMismatch {
                    op: "param_maps",
                    lhs: vec![self.attenuation.scanlines, self.attenuation.depth],
                    rhs: vec![g.scanlines, g.depth],
                });
            }
            if name == &"attenuation" {
                continue;
            }
            for &v in &g.data {
                if !(-1e-6..=1.0 + 1e-6).contains(&f64::from(v)) {
                    return Err(Error::config(format!("{name} outside [0, 1]: {v}")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_scanline_major() {
        let g = Grid::from_fn(2, 3, |w, d| (w * 10 + d) as f32);
        assert_eq!(g.at(0, 2), 2.0);
        assert_eq!(g.at(1, 0), 10.0);
        assert_eq!(g.data, vec![0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Grid::from_vec(2, 3, vec![0.0; 5]).is_err());
    }
}
