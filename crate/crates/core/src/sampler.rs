//! Bicubic (Keys, a = -1/2) sampling of discrete images at continuous
//! coordinates, with analytic first and second coordinate derivatives,
//! reflection at the borders, and p x p patch extraction.
//!
//! Coordinates are normalized to [-1, 1]^2 with pixel centers at
//! `x = -1 + (2j + 1) / W`, `y = -1 + (2i + 1) / H`; `x` runs along columns.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::SparseMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Keys cubic-convolution parameter.
pub const KEYS_A: f64 = -0.5;

/// A query coordinate `(x, y)` in normalized units.
pub type Coord = (f64, f64);

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `[height, width, channels]`.
    pub values: Tensor,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::DegenerateImage { height, width });
        }
        if channels == 0 {
            return Err(Error::Invalid("image needs at least one channel".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            values: Tensor::new(&[height, width, channels], data)?,
        })
    }

    pub fn from_tensor(values: Tensor) -> Result<Self> {
        let s = values.shape().to_vec();
        match s.as_slice() {
            [h, w, c] => Self::new(*h, *w, *c, values.into_data()),
            [1, h, w, c] => Self::new(*h, *w, *c, values.into_data()),
            _ => Err(Error::Shape(format!("expected [H, W, C] image, got {:?}", s))),
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    /// Samples `f(x, y)` (one value per channel) at every pixel center.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(f64, f64, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                let (x, y) = pixel_center(i, j, height, width);
                for c in 0..channels {
                    data.push(f(x, y, c) as f32);
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> f32 {
        self.values.data()[(i * self.width + j) * self.channels + c]
    }

    pub fn data(&self) -> &[f32] {
        self.values.data()
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Mirrors the image left-right.
    pub fn flip_horizontal(&self) -> ImageGrid {
        let mut data = Vec::with_capacity(self.values.len());
        for i in 0..self.height {
            for j in (0..self.width).rev() {
                for c in 0..self.channels {
                    data.push(self.get(i, j, c));
                }
            }
        }
        ImageGrid::new(self.height, self.width, self.channels, data).expect("same dims")
    }

    pub fn clamped(&self, lo: f32, hi: f32) -> ImageGrid {
        let mut out = self.clone();
        for v in out.values.data_mut() {
            *v = v.clamp(lo, hi);
        }
        out
    }

    fn check(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            Err(Error::DegenerateImage {
                height: self.height,
                width: self.width,
            })
        } else {
            Ok(())
        }
    }
}

/// Normalized coordinate of pixel `(i, j)` in an `h x w` image.
pub fn pixel_center(i: usize, j: usize, h: usize, w: usize) -> Coord {
    (
        -1.0 + (2 * j + 1) as f64 / w as f64,
        -1.0 + (2 * i + 1) as f64 / h as f64,
    )
}

/// All pixel centers of an `h x w` grid in row-major order.
pub fn pixel_centers(h: usize, w: usize) -> Vec<Coord> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push(pixel_center(i, j, h, w));
        }
    }
    out
}

/// Keys cubic-convolution kernel (`order` 0) and its piecewise first and
/// second derivatives (`order` 1, 2). Zero for `|t| >= 2`.
///
/// At the knots `|t| = 1, 2` the second derivative jumps; the branch taken
/// there is the limit from larger `t`, which makes sampled second
/// derivatives right-continuous in the query coordinate.
pub fn keys_kernel(t: f64, order: usize) -> f64 {
    let a = KEYS_A;
    let s = t.abs();
    let (inner, outer) = if t >= 0.0 {
        (s < 1.0, s < 2.0)
    } else {
        (s <= 1.0, s <= 2.0)
    };
    let sign = if t < 0.0 { -1.0 } else { 1.0 };
    if inner {
        match order {
            0 => (a + 2.0) * s * s * s - (a + 3.0) * s * s + 1.0,
            1 => sign * (3.0 * (a + 2.0) * s * s - 2.0 * (a + 3.0) * s),
            _ => 6.0 * (a + 2.0) * s - 2.0 * (a + 3.0),
        }
    } else if outer {
        match order {
            0 => a * s * s * s - 5.0 * a * s * s + 8.0 * a * s - 4.0 * a,
            1 => sign * (3.0 * a * s * s - 10.0 * a * s + 8.0 * a),
            _ => 6.0 * a * s - 10.0 * a,
        }
    } else {
        0.0
    }
}

/// Mirror-about-the-edge index reflection (`-1 -> 0`, `n -> n - 1`),
/// applied until the index lands inside `[0, n)`.
pub fn reflect_index(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Continuous pixel-index coordinate along an axis of `n` samples.
fn to_index_space(x: f64, n: usize) -> f64 {
    (x + 1.0) * n as f64 * 0.5 - 0.5
}

/// Tap indices and kernel weights (orders 0..=2, already scaled to
/// normalized-coordinate derivatives) along one axis.
#[derive(Clone, Copy, Debug)]
struct AxisTaps {
    idx: [usize; 4],
    w: [[f64; 4]; 3],
    on_knot: bool,
}

fn axis_taps(x: f64, n: usize) -> AxisTaps {
    let u = to_index_space(x, n);
    let base = u.floor();
    let scale = n as f64 * 0.5;
    let mut idx = [0usize; 4];
    let mut w = [[0.0f64; 4]; 3];
    for k in 0..4 {
        let i = base as i64 - 1 + k as i64;
        idx[k] = reflect_index(i, n);
        let t = u - i as f64;
        w[0][k] = keys_kernel(t, 0);
        w[1][k] = keys_kernel(t, 1) * scale;
        w[2][k] = keys_kernel(t, 2) * scale * scale;
    }
    AxisTaps {
        idx,
        w,
        on_knot: u == base,
    }
}

/// Bicubic sample at one coordinate. Fields beyond the requested order are
/// empty.
#[derive(Clone, Debug, PartialEq)]
pub struct BicubicSample {
    pub value: Vec<f64>,
    /// `(d/dx, d/dy)` per channel, order >= 1.
    pub gradient: Option<(Vec<f64>, Vec<f64>)>,
    /// `(d2/dx2, d2/dy2)` per channel, order 2.
    pub second: Option<(Vec<f64>, Vec<f64>)>,
    /// True when the coordinate sits on a kernel knot, where the second
    /// derivative is reported as its right limit.
    pub on_knot: bool,
}

/// Separable 4 x 4-tap Keys interpolation of `img` at `(x, y)`.
pub fn sample_bicubic(img: &ImageGrid, coord: Coord, order: usize) -> Result<BicubicSample> {
    img.check()?;
    if order > 2 {
        return Err(Error::Invalid(format!("sample order {order} not in 0..=2")));
    }
    let tx = axis_taps(coord.0, img.width);
    let ty = axis_taps(coord.1, img.height);
    let c = img.channels;
    let combo = |ox: usize, oy: usize| -> Vec<f64> {
        let mut out = vec![0.0f64; c];
        for ky in 0..4 {
            let wy = ty.w[oy][ky];
            if wy == 0.0 {
                continue;
            }
            for kx in 0..4 {
                let wxy = wy * tx.w[ox][kx];
                if wxy == 0.0 {
                    continue;
                }
                let base = (ty.idx[ky] * img.width + tx.idx[kx]) * c;
                for (o, v) in out.iter_mut().zip(&img.data()[base..base + c]) {
                    *o += wxy * *v as f64;
                }
            }
        }
        out
    };
    Ok(BicubicSample {
        value: combo(0, 0),
        gradient: (order >= 1).then(|| (combo(1, 0), combo(0, 1))),
        second: (order >= 2).then(|| (combo(2, 0), combo(0, 2))),
        on_knot: order >= 2 && (tx.on_knot || ty.on_knot),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    /// Patch side length (odd).
    pub p: usize,
    pub gamma_x: f64,
    pub gamma_y: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            p: 9,
            gamma_x: 1.0,
            gamma_y: 1.0,
        }
    }
}

/// Smallest patch spacing kept by [`PatchSpec::project`].
pub const MIN_GAMMA: f64 = 1e-3;

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p % 2 == 0 {
            return Err(Error::Invalid(format!("patch size {} must be odd", self.p)));
        }
        if !(self.gamma_x > 0.0 && self.gamma_y > 0.0) {
            return Err(Error::Invalid(format!(
                "patch spacing must be positive, got ({}, {})",
                self.gamma_x, self.gamma_y
            )));
        }
        Ok(())
    }

    /// Clamps the spacings back into the admissible range after an update.
    pub fn project(&mut self) {
        self.gamma_x = self.gamma_x.max(MIN_GAMMA);
        self.gamma_y = self.gamma_y.max(MIN_GAMMA);
    }

    pub fn center(&self) -> usize {
        (self.p - 1) / 2
    }

    /// Sample positions of the patch around `coord` in an `h x w` image.
    pub fn sample_positions(&self, coord: Coord, h: usize, w: usize) -> Vec<Coord> {
        self.positions(coord, h, w).into_iter().map(|(pos, _, _)| pos).collect()
    }

    /// Sample positions of the patch around `coord` in an `h x w` image,
    /// row-major over `(k, l)`, with the per-sample offsets in units of
    /// `gamma` (so `d position / d gamma_x = (ox * 2 / w, 0)`).
    fn positions(&self, coord: Coord, h: usize, w: usize) -> Vec<(Coord, f64, f64)> {
        let c = self.center() as f64;
        let mut out = Vec::with_capacity(self.p * self.p);
        for k in 0..self.p {
            let oy = k as f64 - c;
            for l in 0..self.p {
                let ox = l as f64 - c;
                let x = coord.0 + ox * self.gamma_x * 2.0 / w as f64;
                let y = coord.1 + oy * self.gamma_y * 2.0 / h as f64;
                out.push(((x, y), ox, oy));
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Patch {
    /// `[p, p, C]`.
    pub values: Tensor,
    /// `[p, p, C, 2]`: derivative of each entry with respect to `(x, y)`.
    pub jacobian: Option<Tensor>,
}

/// p x p grid of bicubic samples centered on `coord`.
pub fn extract_patch(
    img: &ImageGrid,
    coord: Coord,
    spec: &PatchSpec,
    with_jacobian: bool,
) -> Result<Patch> {
    img.check()?;
    spec.validate()?;
    let c = img.channels;
    let order = usize::from(with_jacobian);
    let mut values = Vec::with_capacity(spec.p * spec.p * c);
    let mut jac = Vec::with_capacity(if with_jacobian { spec.p * spec.p * c * 2 } else { 0 });
    for (pos, _, _) in spec.positions(coord, img.height, img.width) {
        let s = sample_bicubic(img, pos, order)?;
        values.extend(s.value.iter().map(|&v| v as f32));
        if let Some((gx, gy)) = s.gradient {
            for ch in 0..c {
                jac.push(gx[ch] as f32);
                jac.push(gy[ch] as f32);
            }
        }
    }
    Ok(Patch {
        values: Tensor::new(&[spec.p, spec.p, c], values)?,
        jacobian: if with_jacobian {
            Some(Tensor::new(&[spec.p, spec.p, c, 2], jac)?)
        } else {
            None
        },
    })
}

/// Which linear functional of the image each patch entry holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchKind {
    /// Interpolated values; the map carries derivatives with respect to
    /// `gamma_x` and `gamma_y`.
    Value,
    Dx,
    Dy,
    /// `d2/dx2 + d2/dy2`.
    Laplacian,
}

/// Shape of one image in a stacked batch (`[sum of H*W, C]` rows).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
}

/// A patch query: which stacked image, and where.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchQuery {
    pub image: usize,
    pub coord: Coord,
}

/// Builds the sparse operator mapping a stack of images (rows of pixels,
/// concatenated in `images` order) to `[queries * p * p, C]` patch entries.
/// With `p = 1` this samples the query points themselves.
pub fn patch_map(
    images: &[ImageDims],
    queries: &[PatchQuery],
    spec: &PatchSpec,
    kind: PatchKind,
) -> Result<Rc<SparseMap>> {
    spec.validate()?;
    let mut offsets = Vec::with_capacity(images.len());
    let mut total = 0usize;
    for d in images {
        if d.height == 0 || d.width == 0 {
            return Err(Error::DegenerateImage {
                height: d.height,
                width: d.width,
            });
        }
        offsets.push(total);
        total += d.height * d.width;
    }
    let per = spec.p * spec.p;
    let taps = per * 16 * queries.len();
    let mut row_ptr = Vec::with_capacity(per * queries.len() + 1);
    let mut indices = Vec::with_capacity(taps);
    let mut weights = Vec::with_capacity(taps);
    let with_params = kind == PatchKind::Value;
    let mut dgx = Vec::with_capacity(if with_params { taps } else { 0 });
    let mut dgy = Vec::with_capacity(if with_params { taps } else { 0 });
    row_ptr.push(0);
    for q in queries {
        let dims = images.get(q.image).ok_or_else(|| {
            Error::Invalid(format!("patch query refers to image {} of {}", q.image, images.len()))
        })?;
        let off = offsets[q.image];
        for (pos, ox, oy) in spec.positions(q.coord, dims.height, dims.width) {
            let tx = axis_taps(pos.0, dims.width);
            let ty = axis_taps(pos.1, dims.height);
            for ky in 0..4 {
                for kx in 0..4 {
                    let w = match kind {
                        PatchKind::Value => ty.w[0][ky] * tx.w[0][kx],
                        PatchKind::Dx => ty.w[0][ky] * tx.w[1][kx],
                        PatchKind::Dy => ty.w[1][ky] * tx.w[0][kx],
                        PatchKind::Laplacian => {
                            ty.w[0][ky] * tx.w[2][kx] + ty.w[2][ky] * tx.w[0][kx]
                        }
                    };
                    indices.push((off + ty.idx[ky] * dims.width + tx.idx[kx]) as u32);
                    weights.push(w as f32);
                    if with_params {
                        // d/d gamma_x of the sample = ox * 2/W * d/dx, and the
                        // normalized-coordinate derivative carries a W/2.
                        dgx.push((ox * 2.0 / dims.width as f64 * ty.w[0][ky] * tx.w[1][kx]) as f32);
                        dgy.push((oy * 2.0 / dims.height as f64 * ty.w[1][ky] * tx.w[0][kx]) as f32);
                    }
                }
            }
            row_ptr.push(indices.len());
        }
    }
    Ok(Rc::new(SparseMap {
        n_in: total,
        row_ptr,
        indices,
        weights,
        param_weights: if with_params { vec![dgx, dgy] } else { Vec::new() },
    }))
}

/// True when `coord` lies on a knot of the sampling kernel in `img`, where
/// second derivatives are discontinuous.
pub fn on_knot(coord: Coord, height: usize, width: usize) -> bool {
    let u = to_index_space(coord.0, width);
    let v = to_index_space(coord.1, height);
    u == u.floor() || v == v.floor()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| rng.random::<f32>()).collect();
        ImageGrid::new(h, w, c, data).unwrap()
    }

    #[test]
    fn kernel_knots_and_midpoint() {
        assert_eq!(keys_kernel(0.0, 0), 1.0);
        assert_eq!(keys_kernel(1.0, 0), 0.0);
        assert_eq!(keys_kernel(2.0, 0), 0.0);
        assert_eq!(keys_kernel(-1.0, 0), 0.0);
        assert!((keys_kernel(0.5, 0) - 0.5625).abs() < 1e-12);
        assert_eq!(keys_kernel(2.5, 1), 0.0);
    }

    #[test]
    fn kernel_derivative_matches_central_difference() {
        let h = 1e-6;
        for t in [0.25, 0.75, 1.5, -0.4, -1.3] {
            let fd = (keys_kernel(t + h, 0) - keys_kernel(t - h, 0)) / (2.0 * h);
            assert!((keys_kernel(t, 1) - fd).abs() < 1e-6, "t={t}");
            let fd2 = (keys_kernel(t + h, 1) - keys_kernel(t - h, 1)) / (2.0 * h);
            assert!((keys_kernel(t, 2) - fd2).abs() < 1e-5, "t={t}");
        }
    }

    #[test]
    fn partition_of_unity() {
        for k in 0..=100 {
            let t = k as f64 / 100.0;
            let s0: f64 = (-1..=2).map(|i| keys_kernel(t - i as f64, 0)).sum();
            let s1: f64 = (-1..=2).map(|i| keys_kernel(t - i as f64, 1)).sum();
            assert!((s0 - 1.0).abs() < 1e-6);
            assert!(s1.abs() < 1e-6);
        }
    }

    #[test]
    fn reflection_indices() {
        assert_eq!(reflect_index(-1, 5), 0);
        assert_eq!(reflect_index(-2, 5), 1);
        assert_eq!(reflect_index(5, 5), 4);
        assert_eq!(reflect_index(6, 5), 3);
        assert_eq!(reflect_index(-3, 1), 0);
        assert_eq!(reflect_index(12, 3), 0);
    }

    #[test]
    fn constant_image_reproduced() {
        let img = ImageGrid::new(6, 7, 2, vec![0.3; 84]).unwrap();
        for coord in [(0.13, -0.7), (-1.0, 1.0), (0.99, 0.0)] {
            let s = sample_bicubic(&img, coord, 2).unwrap();
            for c in 0..2 {
                assert!((s.value[c] - 0.3).abs() < 1e-6);
                let (gx, gy) = s.gradient.as_ref().unwrap();
                let (hx, hy) = s.second.as_ref().unwrap();
                assert!(gx[c].abs() < 1e-6 && gy[c].abs() < 1e-6);
                assert!(hx[c].abs() < 1e-5 && hy[c].abs() < 1e-5);
            }
        }
    }

    #[test]
    fn interpolates_pixel_centers() {
        let img = random_image(8, 8, 3, 1);
        for i in 0..8 {
            for j in 0..8 {
                let s = sample_bicubic(&img, pixel_center(i, j, 8, 8), 0).unwrap();
                for c in 0..3 {
                    assert!((s.value[c] - img.get(i, j, c) as f64).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn mirror_symmetry() {
        let img = random_image(9, 10, 1, 2);
        let flipped = img.flip_horizontal();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (x, y) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let a = sample_bicubic(&img, (x, y), 1).unwrap();
            let b = sample_bicubic(&flipped, (-x, y), 1).unwrap();
            assert!((a.value[0] - b.value[0]).abs() < 1e-6);
            let (ax, ay) = a.gradient.unwrap();
            let (bx, by) = b.gradient.unwrap();
            assert!((ax[0] + bx[0]).abs() < 1e-5);
            assert!((ay[0] - by[0]).abs() < 1e-5);
        }
    }

    #[test]
    fn value_and_gradient_continuous_across_knots() {
        let img = random_image(8, 8, 1, 4);
        let (x0, y0) = pixel_center(3, 4, 8, 8);
        let e = 1e-9;
        let a = sample_bicubic(&img, (x0 - e, y0 + 0.01), 1).unwrap();
        let b = sample_bicubic(&img, (x0 + e, y0 + 0.01), 1).unwrap();
        assert!((a.value[0] - b.value[0]).abs() < 1e-6);
        assert!((a.gradient.unwrap().0[0] - b.gradient.unwrap().0[0]).abs() < 1e-5);
    }

    #[test]
    fn knot_flag_and_right_limit() {
        let img = random_image(8, 8, 1, 5);
        let (x0, y0) = pixel_center(2, 5, 8, 8);
        let at = sample_bicubic(&img, (x0, y0 + 0.013), 2).unwrap();
        assert!(at.on_knot);
        let right = sample_bicubic(&img, (x0 + 1e-9, y0 + 0.013), 2).unwrap();
        assert!(!right.on_knot);
        let (hx, _) = at.second.unwrap();
        let (rx, _) = right.second.unwrap();
        assert!((hx[0] - rx[0]).abs() < 1e-4);
    }

    #[test]
    fn degenerate_and_bad_spec() {
        let img = ImageGrid {
            height: 0,
            width: 3,
            channels: 1,
            values: Tensor::zeros(&[0, 3, 1]),
        };
        assert!(matches!(
            sample_bicubic(&img, (0.0, 0.0), 0),
            Err(Error::DegenerateImage { .. })
        ));
        let good = random_image(4, 4, 1, 0);
        let spec = PatchSpec {
            p: 4,
            ..Default::default()
        };
        assert!(extract_patch(&good, (0.0, 0.0), &spec, false).is_err());
    }

    #[test]
    fn patch_center_and_constant_patch() {
        let img = random_image(32, 32, 1, 6);
        let coord = pixel_center(10, 20, 32, 32);
        let patch = extract_patch(&img, coord, &PatchSpec::default(), true).unwrap();
        assert!((patch.values.data()[4 * 9 + 4] - img.get(10, 20, 0)).abs() < 1e-6);

        let flat = ImageGrid::new(16, 16, 1, vec![0.7; 256]).unwrap();
        let p = extract_patch(&flat, (0.31, -0.2), &PatchSpec::default(), true).unwrap();
        assert!(p.values.data().iter().all(|v| (v - 0.7).abs() < 1e-6));
        assert!(p.jacobian.unwrap().max_abs() < 1e-5);
    }

    #[test]
    fn patch_map_matches_scalar_sampler() {
        let a = random_image(8, 8, 2, 7);
        let b = random_image(5, 6, 2, 8);
        let dims = [
            ImageDims { height: 8, width: 8 },
            ImageDims { height: 5, width: 6 },
        ];
        let spec = PatchSpec {
            p: 3,
            gamma_x: 1.3,
            gamma_y: 0.8,
        };
        let queries = [
            PatchQuery { image: 1, coord: (0.1, 0.2) },
            PatchQuery { image: 0, coord: (-0.9, 0.77) },
        ];
        let mut stacked = a.data().to_vec();
        stacked.extend_from_slice(b.data());
        let mut tape = crate::autodiff::Tape::new();
        let x = tape.constant(Tensor::new(&[64 + 30, 2], stacked).unwrap());
        for kind in [PatchKind::Value, PatchKind::Dx, PatchKind::Dy, PatchKind::Laplacian] {
            let map = patch_map(&dims, &queries, &spec, kind).unwrap();
            let params: Vec<_> = (0..map.param_weights.len())
                .map(|_| tape.constant(Tensor::scalar(1.0)))
                .collect();
            let out = tape.sparse(x, &params, map).unwrap();
            let got = tape.value(out).clone();
            let mut row = 0;
            for q in &queries {
                let img = if q.image == 0 { &a } else { &b };
                for (pos, _, _) in spec.positions(q.coord, img.height, img.width) {
                    let s = sample_bicubic(img, pos, 2).unwrap();
                    for c in 0..2 {
                        let expect = match kind {
                            PatchKind::Value => s.value[c],
                            PatchKind::Dx => s.gradient.as_ref().unwrap().0[c],
                            PatchKind::Dy => s.gradient.as_ref().unwrap().1[c],
                            PatchKind::Laplacian => {
                                let (hx, hy) = s.second.as_ref().unwrap();
                                hx[c] + hy[c]
                            }
                        };
                        let v = got.data()[row * 2 + c] as f64;
                        assert!((v - expect).abs() < 1e-4 * (1.0 + expect.abs()), "{kind:?}");
                    }
                    row += 1;
                }
            }
        }
    }
}
