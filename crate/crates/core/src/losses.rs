//! Individual loss terms with analytic gradients.
//!
//! Every term returns its raw sum together with the number of entries that
//! contributed; [`LossTerm::mean`] is the resolution-independent value used
//! by the full objective. Gradients are always gradients of the raw sum.

use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::grid::{Image, ScalarField, VectorField};
use crate::sampling::SampledImage;

/// Raw sum of a loss term plus how many entries it averaged over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub sum: f64,
    pub count: usize,
}

impl LossTerm {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }

    pub fn merge(self, other: LossTerm) -> LossTerm {
        LossTerm {
            sum: self.sum + other.sum,
            count: self.count + other.count,
        }
    }
}

/// Output of the masked view-synthesis terms.
#[derive(Clone, Debug)]
pub struct ViewLoss {
    pub term: LossTerm,
    /// `[source][channel]` gradient with respect to the warped image.
    pub grad_warped: Vec<Vec<ScalarField>>,
    /// Gradient with respect to each explainability mask.
    pub grad_masks: Vec<ScalarField>,
    /// Set when no warped pixel was valid, in which case the term is 0.
    pub no_valid_pixels: bool,
}

fn check_views(target: &Image, warped: &[SampledImage], masks: &[ScalarField]) -> Result<()> {
    if warped.len() != masks.len() {
        return Err(Error::InvalidInput(format!(
            "{} warped views but {} masks",
            warped.len(),
            masks.len()
        )));
    }
    for (view, mask) in warped.iter().zip(masks) {
        check_shape(target.shape(), view.image.shape())?;
        check_shape(target.shape(), mask.shape())?;
        if view.image.num_channels() != target.num_channels() {
            return Err(Error::InvalidInput("channel count mismatch".into()));
        }
    }
    Ok(())
}

/// Residuals smaller than this are treated as exactly zero by the L1
/// subgradient. Round-off leaves ~1e-15 residuals at an exact solution, and
/// a ±1 subgradient there would push a scale-free optimizer off the optimum.
pub const L1_ZERO: f64 = 1e-12;

/// Subgradient of `|x|`: 0 at (numerically) zero.
#[inline]
fn sign(x: f64) -> f64 {
    if x > L1_ZERO {
        1.0
    } else if x < -L1_ZERO {
        -1.0
    } else {
        0.0
    }
}

fn zero_grads(target: &Image, n: usize) -> (Vec<Vec<ScalarField>>, Vec<ScalarField>) {
    let (h, w) = target.shape();
    (
        (0..n)
            .map(|_| {
                (0..target.num_channels())
                    .map(|_| ScalarField::zeros(h, w))
                    .collect()
            })
            .collect(),
        (0..n).map(|_| ScalarField::zeros(h, w)).collect(),
    )
}

/// `Σ_s Σ_x M_s(x) Σ_c |I_t(x) − Î_s(x)|` over valid warped pixels.
///
/// `count` is the number of valid `(s, x)` pairs.
pub fn photometric_loss(
    target: &Image,
    warped: &[SampledImage],
    masks: &[ScalarField],
) -> Result<ViewLoss> {
    check_views(target, warped, masks)?;
    let (mut grad_warped, mut grad_masks) = zero_grads(target, warped.len());
    let mut term = LossTerm::default();
    for (s, (view, mask)) in warped.iter().zip(masks).enumerate() {
        for i in 0..mask.len() {
            if !view.valid.as_slice()[i] {
                continue;
            }
            let m = mask.as_slice()[i];
            let mut err = 0.0;
            for c in 0..target.num_channels() {
                let diff = view.image.channel(c).as_slice()[i] - target.channel(c).as_slice()[i];
                err += diff.abs();
                grad_warped[s][c].as_mut_slice()[i] = m * sign(diff);
            }
            term.sum += m * err;
            term.count += 1;
            grad_masks[s].as_mut_slice()[i] = err;
        }
    }
    Ok(ViewLoss {
        no_valid_pixels: term.count == 0,
        term,
        grad_warped,
        grad_masks,
    })
}

/// Masked L1 distance between forward-difference gradients of the target
/// and the warped views, along x and y.
///
/// A difference at `x` along `d` counts only when both `x` and `x + e_d`
/// are valid in the warped view; the mask is read at `x`.
pub fn gradient_matching_loss(
    target: &Image,
    warped: &[SampledImage],
    masks: &[ScalarField],
) -> Result<ViewLoss> {
    check_views(target, warped, masks)?;
    let (h, w) = target.shape();
    let (mut grad_warped, mut grad_masks) = zero_grads(target, warped.len());
    let mut term = LossTerm::default();
    for (s, (view, mask)) in warped.iter().zip(masks).enumerate() {
        let valid = view.valid.as_slice();
        for r in 0..h {
            for col in 0..w {
                let i = r * w + col;
                if !valid[i] {
                    continue;
                }
                // (neighbour index) for +x and +y
                let steps = [
                    (col + 1 < w).then_some(i + 1),
                    (r + 1 < h).then_some(i + w),
                ];
                for j in steps.into_iter().flatten() {
                    if !valid[j] {
                        continue;
                    }
                    let m = mask.as_slice()[i];
                    let mut err = 0.0;
                    for c in 0..target.num_channels() {
                        let t = target.channel(c).as_slice();
                        let v = view.image.channel(c).as_slice();
                        let diff = (v[j] - v[i]) - (t[j] - t[i]);
                        err += diff.abs();
                        let g = m * sign(diff);
                        let gw = grad_warped[s][c].as_mut_slice();
                        gw[j] += g;
                        gw[i] -= g;
                    }
                    term.sum += m * err;
                    term.count += 1;
                    grad_masks[s].as_mut_slice()[i] += err;
                }
            }
        }
    }
    Ok(ViewLoss {
        no_valid_pixels: term.count == 0,
        term,
        grad_warped,
        grad_masks,
    })
}

/// Order of the finite difference penalized by [`smoothness_loss`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SmoothOrder {
    First,
    Second,
}

impl TryFrom<u8> for SmoothOrder {
    type Error = Error;

    fn try_from(order: u8) -> Result<Self> {
        match order {
            1 => Ok(SmoothOrder::First),
            2 => Ok(SmoothOrder::Second),
            other => Err(Error::InvalidInput(format!(
                "smoothness order must be 1 or 2, got {other}"
            ))),
        }
    }
}

/// Edge-aware L1 smoothness of a scalar field.
///
/// For each pixel `x` and direction `d ∈ {x, y}` where the stencil fits:
/// order 1 penalizes `|F(x+e) − F(x)|`, order 2 penalizes
/// `|F(x−e) − 2F(x) + F(x+e)|`, each weighted by `exp(−α |I(x+e) − I(x)|)`.
/// Stencils that would leave the image are dropped.
pub fn smoothness_loss(
    field: &ScalarField,
    order: SmoothOrder,
    gray: &ScalarField,
    alpha: f64,
) -> Result<(LossTerm, ScalarField)> {
    check_shape(field.shape(), gray.shape())?;
    let mut grad = ScalarField::zeros(field.height(), field.width());
    let term = smooth_channel(field, order, gray, alpha, &mut grad);
    Ok((term, grad))
}

/// Per-channel sum of [`smoothness_loss`] over the three components.
pub fn smoothness_loss_vector(
    field: &VectorField,
    order: SmoothOrder,
    gray: &ScalarField,
    alpha: f64,
) -> Result<(LossTerm, VectorField)> {
    check_shape(field.shape(), gray.shape())?;
    let (h, w) = field.shape();
    let mut grad = VectorField::zeros(h, w);
    let mut sum = 0.0;
    let mut count = 0;
    for axis in 0..3 {
        let plane = field.map(|v| v[axis]);
        let mut g = ScalarField::zeros(h, w);
        let t = smooth_channel(&plane, order, gray, alpha, &mut g);
        sum += t.sum;
        count = t.count;
        for (dst, src) in grad.as_mut_slice().iter_mut().zip(g.iter()) {
            dst[axis] = *src;
        }
    }
    Ok((LossTerm { sum, count }, grad))
}

fn smooth_channel(
    field: &ScalarField,
    order: SmoothOrder,
    gray: &ScalarField,
    alpha: f64,
    grad: &mut ScalarField,
) -> LossTerm {
    let (h, w) = field.shape();
    let f = field.as_slice();
    let img = gray.as_slice();
    let g = grad.as_mut_slice();
    let mut term = LossTerm::default();
    // (stride, extent) for the x and y directions.
    for (stride, extent, along_rows) in [(1usize, w, false), (w, h, true)] {
        for r in 0..h {
            for c in 0..w {
                let pos = if along_rows { r } else { c };
                let i = r * w + c;
                match order {
                    SmoothOrder::First => {
                        if pos + 1 >= extent {
                            continue;
                        }
                        let wt = (-alpha * (img[i + stride] - img[i]).abs()).exp();
                        let d = f[i + stride] - f[i];
                        term.sum += wt * d.abs();
                        term.count += 1;
                        let s = wt * sign(d);
                        g[i + stride] += s;
                        g[i] -= s;
                    }
                    SmoothOrder::Second => {
                        if pos == 0 || pos + 1 >= extent {
                            continue;
                        }
                        let wt = (-alpha * (img[i + stride] - img[i]).abs()).exp();
                        let d = f[i - stride] - 2.0 * f[i] + f[i + stride];
                        term.sum += wt * d.abs();
                        term.count += 1;
                        let s = wt * sign(d);
                        g[i - stride] += s;
                        g[i] -= 2.0 * s;
                        g[i + stride] += s;
                    }
                }
            }
        }
    }
    term
}

/// Cross-entropy of the masks against all-ones: `−Σ_s Σ_x ln M_s(x)`.
pub fn mask_loss(masks: &[ScalarField]) -> Result<(LossTerm, Vec<ScalarField>)> {
    let mut term = LossTerm::default();
    let mut grads = Vec::with_capacity(masks.len());
    for mask in masks {
        if let Some(bad) = mask.iter().position(|&m| !(m > 0.0 && m <= 1.0)) {
            return Err(Error::Domain(format!(
                "mask value {} at index {bad} outside (0, 1]",
                mask.as_slice()[bad]
            )));
        }
        term.sum -= mask.iter().map(|m| m.ln()).sum::<f64>();
        term.count += mask.len();
        grads.push(mask.map(|m| -1.0 / m));
    }
    Ok((term, grads))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use rand::{Rng, SeedableRng};

    fn gray(rows: &[&[f64]]) -> Image {
        let h = rows.len();
        let w = rows[0].len();
        Image::gray(Grid::from_vec(h, w, rows.concat()).unwrap())
    }

    fn all_valid(img: Image) -> SampledImage {
        let (h, w) = img.shape();
        SampledImage {
            image: img,
            valid: Grid::filled(h, w, true),
        }
    }

    fn random_view(rng: &mut impl Rng, h: usize, w: usize, channels: usize) -> SampledImage {
        let image = Image::new(
            (0..channels)
                .map(|_| Grid::from_fn(h, w, |_, _| rng.random::<f64>()))
                .collect(),
        )
        .unwrap();
        let valid = Grid::from_fn(h, w, |_, _| rng.random::<f64>() > 0.15);
        let image = Image::new(
            image
                .channels()
                .iter()
                .map(|c| c.zip_map(&valid, |&v, &ok| if ok { v } else { 0.0 }).unwrap())
                .collect(),
        )
        .unwrap();
        SampledImage { image, valid }
    }

    #[test]
    fn photometric_examples() {
        let t = gray(&[&[0.5]]);
        let same = photometric_loss(&t, &[all_valid(t.clone())], &[Grid::filled(1, 1, 1.0)]).unwrap();
        assert_eq!(same.term.sum, 0.0);

        let other = all_valid(gray(&[&[0.2]]));
        let out = photometric_loss(&t, std::slice::from_ref(&other), &[Grid::filled(1, 1, 1.0)]).unwrap();
        assert!((out.term.sum - 0.3).abs() < 1e-15);
        assert_eq!(out.term.count, 1);

        let zero_mask = photometric_loss(&t, &[other], &[Grid::filled(1, 1, 0.0)]).unwrap();
        assert_eq!(zero_mask.term.sum, 0.0);
    }

    #[test]
    fn photometric_without_valid_pixels_flags() {
        let t = gray(&[&[0.5, 0.1]]);
        let view = SampledImage {
            image: gray(&[&[0.0, 0.0]]),
            valid: Grid::filled(1, 2, false),
        };
        let out = photometric_loss(&t, &[view], &[Grid::filled(1, 2, 1.0)]).unwrap();
        assert!(out.no_valid_pixels);
        assert_eq!(out.term.mean(), 0.0);
    }

    #[test]
    fn smoothness_examples() {
        let flat = Grid::filled(4, 5, 0.2);
        let ramp = Grid::from_fn(4, 5, |r, c| 1.0 + 0.3 * c as f64 - 0.2 * r as f64);
        let (t, _) = smoothness_loss(&ramp, SmoothOrder::Second, &flat, 0.1).unwrap();
        assert!(t.sum.abs() < 1e-12);

        let normals = Grid::filled(4, 5, nalgebra::Vector3::new(0.0, 0.6, -0.8));
        let (t, _) = smoothness_loss_vector(&normals, SmoothOrder::First, &flat, 0.1).unwrap();
        assert_eq!(t.sum, 0.0);

        // Second difference at the centre of [0, 0, 1] is 1; constant image gives weight 1.
        let row = Grid::from_vec(1, 3, vec![0.0, 0.0, 1.0]).unwrap();
        let (t, _) = smoothness_loss(&row, SmoothOrder::Second, &Grid::filled(1, 3, 0.7), 3.0).unwrap();
        assert_eq!(t.sum, 1.0);
        assert_eq!(t.count, 1);
    }

    #[test]
    fn smoothness_weight_follows_image_gradient() {
        let row = Grid::from_vec(1, 3, vec![0.0, 0.0, 1.0]).unwrap();
        let img = Grid::from_vec(1, 3, vec![0.0, 0.0, 0.5]).unwrap();
        let (t, _) = smoothness_loss(&row, SmoothOrder::Second, &img, 2.0).unwrap();
        assert!((t.sum - (-1.0f64).exp()).abs() < 1e-15);
        assert!(SmoothOrder::try_from(3).is_err());
    }

    #[test]
    fn mask_examples() {
        let n = 12;
        let (t, _) = mask_loss(&[Grid::filled(3, 4, 0.5)]).unwrap();
        assert!((t.sum - n as f64 * std::f64::consts::LN_2).abs() < 1e-12);
        let (t, _) = mask_loss(&[Grid::filled(3, 4, 1.0 - 1e-12)]).unwrap();
        assert!(t.sum < 1e-10);
        assert!(mask_loss(&[Grid::filled(1, 1, 0.0)]).is_err());
    }

    #[test]
    fn gradient_matching_examples() {
        let t = gray(&[&[0.0, 1.0, 0.0]]);
        let m = [Grid::filled(1, 3, 1.0)];
        let out = gradient_matching_loss(&t, &[all_valid(gray(&[&[0.0, 0.0, 0.0]]))], &m).unwrap();
        assert_eq!(out.term.sum, 2.0);

        let same = gradient_matching_loss(&t, &[all_valid(t.clone())], &m).unwrap();
        assert_eq!(same.term.sum, 0.0);
    }

    #[test]
    fn brightness_offset_separates_the_two_view_losses() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let t = Image::gray(Grid::from_fn(5, 6, |_, _| rng.random_range(0.2..0.6)));
        let shifted = all_valid(Image::gray(t.channel(0).map(|v| v + 0.25)));
        let masks = [Grid::filled(5, 6, 1.0)];
        let g = gradient_matching_loss(&t, std::slice::from_ref(&shifted), &masks).unwrap();
        assert!(g.term.sum < 1e-12);
        let p = photometric_loss(&t, &[shifted], &masks).unwrap();
        assert!((p.term.mean() - 0.25).abs() < 1e-12);
    }

    fn rel(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
    }

    #[test]
    fn view_loss_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let (h, w) = (6, 9);
        let target = Image::new(
            (0..3)
                .map(|_| Grid::from_fn(h, w, |_, _| rng.random::<f64>()))
                .collect(),
        )
        .unwrap();
        let views: Vec<SampledImage> = (0..2).map(|_| random_view(&mut rng, h, w, 3)).collect();
        let masks: Vec<ScalarField> = (0..2)
            .map(|_| Grid::from_fn(h, w, |_, _| rng.random_range(0.05..0.95)))
            .collect();
        type LossFn = fn(&Image, &[SampledImage], &[ScalarField]) -> Result<ViewLoss>;
        for loss in [photometric_loss as LossFn, gradient_matching_loss as LossFn] {
            let out = loss(&target, &views, &masks).unwrap();
            let eps = 1e-5;
            for s in 0..2 {
                for i in 0..h * w {
                    for c in 0..3 {
                        let bump = |d: f64| {
                            let mut v = views.clone();
                            let mut chans = v[s].image.channels().to_vec();
                            chans[c].as_mut_slice()[i] += d;
                            v[s].image = Image::new(chans).unwrap();
                            loss(&target, &v, &masks).unwrap().term.sum
                        };
                        let n = (bump(eps) - bump(-eps)) / (2.0 * eps);
                        let a = out.grad_warped[s][c].as_slice()[i];
                        if views[s].valid.as_slice()[i] {
                            assert!(rel(a, n) < 1e-4, "warped s{s} c{c} i{i}: {a} vs {n}");
                        }
                    }
                    let bump = |d: f64| {
                        let mut m = masks.clone();
                        m[s].as_mut_slice()[i] += d;
                        loss(&target, &views, &m).unwrap().term.sum
                    };
                    let n = (bump(eps) - bump(-eps)) / (2.0 * eps);
                    assert!(rel(out.grad_masks[s].as_slice()[i], n) < 1e-4);
                }
            }
        }
    }

    #[test]
    fn smoothness_and_mask_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (h, w) = (6, 7);
        let field = Grid::from_fn(h, w, |_, _| rng.random_range(1.0..3.0));
        let img = Grid::from_fn(h, w, |_, _| rng.random::<f64>());
        let eps = 1e-5;
        for order in [SmoothOrder::First, SmoothOrder::Second] {
            let (_, g) = smoothness_loss(&field, order, &img, 0.7).unwrap();
            for i in 0..h * w {
                let bump = |d: f64| {
                    let mut f = field.clone();
                    f.as_mut_slice()[i] += d;
                    smoothness_loss(&f, order, &img, 0.7).unwrap().0.sum
                };
                let n = (bump(eps) - bump(-eps)) / (2.0 * eps);
                assert!(rel(g.as_slice()[i], n) < 1e-4);
            }
        }
        let masks = vec![Grid::from_fn(h, w, |_, _| rng.random_range(0.05..0.95))];
        let (_, g) = mask_loss(&masks).unwrap();
        for i in 0..h * w {
            let bump = |d: f64| {
                let mut m = masks.clone();
                m[0].as_mut_slice()[i] += d;
                mask_loss(&m).unwrap().0.sum
            };
            let n = (bump(eps) - bump(-eps)) / (2.0 * eps);
            assert!(rel(g[0].as_slice()[i], n) < 1e-5);
        }
    }

    #[test]
    fn sigmoid_is_stable_and_bounded() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0).is_finite());
        assert!(sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
