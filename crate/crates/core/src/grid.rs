//! Dense row-major H×W grids and multi-channel images.
//!
//! Indexing is `(row, col)`. Pixel coordinates used by the camera code are
//! `(u, v) = (col, row)` with the origin at the centre of the top-left pixel.

use std::ops::{Index, IndexMut};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Depth maps, masks and single image planes.
pub type ScalarField = Grid<f64>;
/// Normal maps and back-projected point clouds.
pub type VectorField = Grid<Vector3<f64>>;
/// Per-pixel validity flags.
pub type ValidMask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`.
    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index_of(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    /// Bounds-checked access with signed coordinates.
    #[inline]
    pub fn get(&self, row: isize, col: isize) -> Option<&T> {
        if row < 0 || col < 0 || row as usize >= self.height || col as usize >= self.width {
            None
        } else {
            Some(&self.data[row as usize * self.width + col as usize])
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn zip_map<U, V>(&self, other: &Grid<U>, mut f: impl FnMut(&T, &U) -> V) -> Result<Grid<V>> {
        check_shape(self.shape(), other.shape())?;
        Ok(Grid {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| f(a, b))
                .collect(),
        })
    }
}

impl<T> Index<(usize, usize)> for Grid<T> {
    type Output = T;

    #[inline]
    fn index(&self, (row, col): (usize, usize)) -> &T {
        debug_assert!(row < self.height && col < self.width);
        &self.data[row * self.width + col]
    }
}

impl<T> IndexMut<(usize, usize)> for Grid<T> {
    #[inline]
    fn index_mut(&mut self, (row, col): (usize, usize)) -> &mut T {
        debug_assert!(row < self.height && col < self.width);
        &mut self.data[row * self.width + col]
    }
}

impl ScalarField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Adds `other` elementwise into `self`.
    pub fn add_assign(&mut self, other: &ScalarField) -> Result<()> {
        check_shape(self.shape(), other.shape())?;
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }

    /// First index holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

impl VectorField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, Vector3::zeros())
    }
}

/// Planar multi-channel image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    channels: Vec<ScalarField>,
}

impl Image {
    pub fn new(channels: Vec<ScalarField>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::InvalidInput("image needs at least one channel".into()))?;
        let shape = first.shape();
        for c in &channels[1..] {
            check_shape(shape, c.shape())?;
        }
        Ok(Self { channels })
    }

    pub fn gray(plane: ScalarField) -> Self {
        Self {
            channels: vec![plane],
        }
    }

    #[inline]
    pub fn channels(&self) -> &[ScalarField] {
        &self.channels
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &ScalarField {
        &self.channels[c]
    }

    #[inline]
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        self.channels[0].shape()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.channels[0].height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.channels[0].width()
    }

    /// Mean over channels, the scalar intensity used by edge-aware weights.
    pub fn grayscale(&self) -> ScalarField {
        if self.channels.len() == 1 {
            return self.channels[0].clone();
        }
        let n = self.channels.len() as f64;
        let (h, w) = self.shape();
        Grid::from_fn(h, w, |r, c| {
            self.channels.iter().map(|ch| ch[(r, c)]).sum::<f64>() / n
        })
    }

    pub fn downsample(&self) -> Image {
        Image {
            channels: self.channels.iter().map(downsample_area).collect(),
        }
    }
}

/// Halves a field by averaging 2×2 blocks. Odd trailing rows/columns are dropped.
pub fn downsample_area(field: &ScalarField) -> ScalarField {
    let h = field.height() / 2;
    let w = field.width() / 2;
    Grid::from_fn(h, w, |r, c| {
        let (r0, c0) = (2 * r, 2 * c);
        0.25 * (field[(r0, c0)] + field[(r0, c0 + 1)] + field[(r0 + 1, c0)] + field[(r0 + 1, c0 + 1)])
    })
}

/// Adjoint of [`downsample_area`]: spreads each coarse gradient over its 2×2 block.
pub fn downsample_area_adjoint(grad: &ScalarField, fine_shape: (usize, usize)) -> ScalarField {
    let mut out = ScalarField::zeros(fine_shape.0, fine_shape.1);
    for r in 0..grad.height() {
        for c in 0..grad.width() {
            let g = 0.25 * grad[(r, c)];
            let (r0, c0) = (2 * r, 2 * c);
            out[(r0, c0)] += g;
            out[(r0, c0 + 1)] += g;
            out[(r0 + 1, c0)] += g;
            out[(r0 + 1, c0 + 1)] += g;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_averages_blocks_and_drops_odd_edges() {
        let f = Grid::from_vec(3, 5, (0..15).map(f64::from).collect()).unwrap();
        let d = downsample_area(&f);
        assert_eq!(d.shape(), (1, 2));
        assert_eq!(d[(0, 0)], (0.0 + 1.0 + 5.0 + 6.0) / 4.0);
        assert_eq!(d[(0, 1)], (2.0 + 3.0 + 7.0 + 8.0) / 4.0);
    }

    #[test]
    fn downsample_adjoint_matches_inner_products() {
        let f = Grid::from_fn(6, 8, |r, c| ((r * 7 + c * 3) % 5) as f64 - 1.5);
        let g = Grid::from_fn(3, 4, |r, c| (r as f64) * 0.5 - c as f64);
        let lhs: f64 = downsample_area(&f)
            .iter()
            .zip(g.iter())
            .map(|(a, b)| a * b)
            .sum();
        let adj = downsample_area_adjoint(&g, f.shape());
        let rhs: f64 = f.iter().zip(adj.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn grayscale_is_channel_mean() {
        let img = Image::new(vec![
            Grid::filled(2, 2, 0.0),
            Grid::filled(2, 2, 0.3),
            Grid::filled(2, 2, 0.9),
        ])
        .unwrap();
        assert!((img.grayscale()[(1, 1)] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn mismatched_channels_rejected() {
        assert!(Image::new(vec![Grid::filled(2, 2, 0.0), Grid::filled(2, 3, 0.0)]).is_err());
        assert!(Image::new(vec![]).is_err());
    }
}
