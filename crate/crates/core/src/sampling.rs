//! Differentiable bilinear sampling with zero padding and validity flags.
//!
//! A sample at `(u, v)` is valid when it lies inside `[0, W-1] × [0, H-1]`.
//! The interpolation cell is `[u0, u0+1] × [v0, v0+1]` with `u0 = floor(u)`,
//! except on the last column/row where the cell is snapped inward so all four
//! taps stay in bounds. Consequently the coordinate derivative at an integer
//! lattice point is the right-hand limit, and the left-hand limit on the far
//! edge.

use nalgebra::Vector2;

use crate::error::{check_shape, Result};
use crate::grid::{Grid, Image, ScalarField, ValidMask};

/// The four taps of one bilinear sample, in `[top-left, top-right, bottom-left, bottom-right]` order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearTap {
    /// Flat indices of the contributing source pixels.
    pub index: [usize; 4],
    /// Interpolation weights.
    pub weight: [f64; 4],
    /// `∂weight/∂u`.
    pub d_u: [f64; 4],
    /// `∂weight/∂v`.
    pub d_v: [f64; 4],
}

#[inline]
fn cell(coord: f64, size: usize) -> Option<(usize, f64)> {
    if size < 2 || !(coord >= 0.0 && coord <= (size - 1) as f64) {
        return None;
    }
    let i0 = (coord.floor() as usize).min(size - 2);
    Some((i0, coord - i0 as f64))
}

impl BilinearTap {
    /// Locates `(u, v)` in an `height × width` grid; `None` when out of bounds.
    #[inline]
    pub fn locate(u: f64, v: f64, height: usize, width: usize) -> Option<Self> {
        let (c0, a) = cell(u, width)?;
        let (r0, b) = cell(v, height)?;
        let i00 = r0 * width + c0;
        let (ia, ib) = (1.0 - a, 1.0 - b);
        Some(Self {
            index: [i00, i00 + 1, i00 + width, i00 + width + 1],
            weight: [ia * ib, a * ib, ia * b, a * b],
            d_u: [-ib, ib, -b, b],
            d_v: [-ia, -a, ia, a],
        })
    }

    #[inline]
    pub fn value(&self, src: &[f64]) -> f64 {
        self.weight[0] * src[self.index[0]]
            + self.weight[1] * src[self.index[1]]
            + self.weight[2] * src[self.index[2]]
            + self.weight[3] * src[self.index[3]]
    }

    /// `(∂value/∂u, ∂value/∂v)`.
    #[inline]
    pub fn gradient(&self, src: &[f64]) -> Vector2<f64> {
        let mut g = Vector2::zeros();
        for k in 0..4 {
            let s = src[self.index[k]];
            g.x += self.d_u[k] * s;
            g.y += self.d_v[k] * s;
        }
        g
    }
}

/// Warped view: sampled values plus per-pixel validity. Invalid pixels hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledImage {
    pub image: Image,
    pub valid: ValidMask,
}

/// Samples every channel of `src` at `coords` (given as `(u, v)` per output pixel).
pub fn bilinear_sample(
    src: &Image,
    coords: &Grid<Vector2<f64>>,
    valid_in: &ValidMask,
) -> Result<SampledImage> {
    check_shape(coords.shape(), valid_in.shape())?;
    let (sh, sw) = src.shape();
    let (h, w) = coords.shape();
    let taps: Vec<Option<BilinearTap>> = coords
        .iter()
        .zip(valid_in.iter())
        .map(|(c, &ok)| {
            if ok {
                BilinearTap::locate(c.x, c.y, sh, sw)
            } else {
                None
            }
        })
        .collect();
    let channels = src
        .channels()
        .iter()
        .map(|plane| {
            let data = taps
                .iter()
                .map(|t| t.map_or(0.0, |t| t.value(plane.as_slice())))
                .collect();
            Grid::from_vec(h, w, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampledImage {
        image: Image::new(channels)?,
        valid: Grid::from_vec(h, w, taps.iter().map(Option::is_some).collect())?,
    })
}

/// Vector-Jacobian product of [`bilinear_sample`].
///
/// `upstream` holds one gradient plane per channel. Returns the gradient
/// scattered onto the source image and the gradient on each coordinate.
/// Pixels that were invalid in the forward pass contribute nothing.
pub fn bilinear_sample_vjp(
    src: &Image,
    coords: &Grid<Vector2<f64>>,
    valid_in: &ValidMask,
    upstream: &[ScalarField],
) -> Result<(Image, Grid<Vector2<f64>>)> {
    check_shape(coords.shape(), valid_in.shape())?;
    let (sh, sw) = src.shape();
    let (h, w) = coords.shape();
    for g in upstream {
        check_shape((h, w), g.shape())?;
    }
    let mut grad_src: Vec<ScalarField> = src
        .channels()
        .iter()
        .map(|_| ScalarField::zeros(sh, sw))
        .collect();
    let mut grad_coords = Grid::filled(h, w, Vector2::zeros());
    for (i, (c, &ok)) in coords.iter().zip(valid_in.iter()).enumerate() {
        if !ok {
            continue;
        }
        let Some(tap) = BilinearTap::locate(c.x, c.y, sh, sw) else {
            continue;
        };
        let mut gc = Vector2::zeros();
        for (ch, plane) in src.channels().iter().enumerate() {
            let g = upstream[ch].as_slice()[i];
            if g == 0.0 {
                continue;
            }
            gc += tap.gradient(plane.as_slice()) * g;
            let dst = grad_src[ch].as_mut_slice();
            for k in 0..4 {
                dst[tap.index[k]] += tap.weight[k] * g;
            }
        }
        grad_coords.as_mut_slice()[i] = gc;
    }
    Ok((Image::new(grad_src)?, grad_coords))
}
