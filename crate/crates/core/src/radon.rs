//! Parallel-beam Radon transform, its exact adjoint, filtered
//! back-projection and the projection noise model.
//!
//! Geometry, in normalized image units (the image spans `[-1, 1]^2`):
//! detector `k` sits at `t_k = (k - (n_det - 1) / 2) * dt` with
//! `dt = 2 / n` and `n_det = ceil(sqrt(2) n)`, so the detector covers the
//! image diagonal. The projection at angle `theta` integrates along the line
//! `x cos(theta) + y sin(theta) = t` by rotate-and-sum: bilinear samples of
//! the image (zero outside) every half pixel along the ray.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autodiff::SparseMap;
use crate::checkpoint::{read_f32_le, write_f32_le};
use crate::error::{Error, Result};
use crate::sampler::{pixel_center, ImageGrid};
use crate::tensor::Tensor;

pub const FILTER: &str = "ram-lak with hann apodization";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Side of the square image.
    pub n: usize,
    pub n_det: usize,
    pub det_spacing: f64,
    pub ray_step: f64,
}

impl Geometry {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            n_det: (std::f64::consts::SQRT_2 * n as f64).ceil() as usize,
            det_spacing: 2.0 / n as f64,
            ray_step: 1.0 / n as f64,
        }
    }

    pub fn detector(&self, k: usize) -> f64 {
        (k as f64 - (self.n_det as f64 - 1.0) / 2.0) * self.det_spacing
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub angles: Vec<f64>,
    pub geometry: Geometry,
    /// `[I, n_det]`, one row per angle.
    pub values: Tensor,
}

impl Sinogram {
    pub fn zeros(angles: Vec<f64>, geometry: Geometry) -> Self {
        let values = Tensor::zeros(&[angles.len(), geometry.n_det]);
        Self { angles, geometry, values }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.geometry.n_det;
        &self.values.data()[i * n..(i + 1) * n]
    }

    pub fn views(&self) -> usize {
        self.angles.len()
    }

    fn check(&self) -> Result<()> {
        if self.values.shape() != [self.angles.len(), self.geometry.n_det] {
            return Err(Error::Shape(format!(
                "sinogram values {:?} for {} angles and {} detectors",
                self.values.shape(),
                self.angles.len(),
                self.geometry.n_det
            )));
        }
        Ok(())
    }

    /// Raw little-endian payload at `path`, JSON header at `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.check()?;
        write_f32_le(path, self.values.data())?;
        let header = SinogramHeader {
            angles: self.angles.clone(),
            geometry: self.geometry,
            filter: FILTER.into(),
            dtype: "f32le".into(),
        };
        let side = header_path(path);
        fs::write(&side, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = header_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let header: SinogramHeader = serde_json::from_str(&text)?;
        if header.dtype != "f32le" {
            return Err(Error::UnsupportedFormat(format!("sinogram dtype {}", header.dtype)));
        }
        let data = read_f32_le(path)?;
        let s = Self {
            values: Tensor::new(&[header.angles.len(), header.geometry.n_det], data)?,
            angles: header.angles,
            geometry: header.geometry,
        };
        s.check()?;
        Ok(s)
    }
}

#[derive(Serialize, Deserialize)]
struct SinogramHeader {
    angles: Vec<f64>,
    geometry: Geometry,
    filter: String,
    dtype: String,
}

fn header_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// `count` angles uniformly spaced over `[lo, hi]` (inclusive) in radians.
pub fn angles_inclusive(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![(lo + hi) / 2.0],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// `count` angles uniformly covering `[0, pi)`.
pub fn angles_full(count: usize) -> Vec<f64> {
    (0..count).map(|i| PI * i as f64 / count as f64).collect()
}

/// The discretized Radon transform as a sparse matrix from the `n * n`
/// pixels (row-major) to the `I * n_det` sinogram entries.
#[derive(Clone, Debug)]
pub struct RadonOperator {
    pub geometry: Geometry,
    pub angles: Vec<f64>,
    pub map: Rc<SparseMap>,
}

fn projection_rows(geo: &Geometry, theta: f64) -> Vec<Vec<(u32, f32)>> {
    let n = geo.n;
    let nf = n as f64;
    let (c, s) = (theta.cos(), theta.sin());
    let half_len = std::f64::consts::SQRT_2 + geo.det_spacing;
    let steps = (2.0 * half_len / geo.ray_step).ceil() as usize;
    (0..geo.n_det)
        .map(|k| {
            let t = geo.detector(k);
            let mut taps: Vec<(u32, f32)> = Vec::new();
            for m in 0..=steps {
                let r = -half_len + m as f64 * geo.ray_step;
                let x = t * c - r * s;
                let y = t * s + r * c;
                let u = (x + 1.0) * nf / 2.0 - 0.5;
                let v = (y + 1.0) * nf / 2.0 - 0.5;
                if u <= -1.0 || v <= -1.0 || u >= nf || v >= nf {
                    continue;
                }
                let (j0, i0) = (u.floor(), v.floor());
                let (fx, fy) = (u - j0, v - i0);
                for (di, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                    for (dj, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                        let i = i0 as i64 + di;
                        let j = j0 as i64 + dj;
                        let w = wx * wy * geo.ray_step;
                        if i >= 0 && j >= 0 && (i as usize) < n && (j as usize) < n && w != 0.0 {
                            taps.push(((i as usize * n + j as usize) as u32, w as f32));
                        }
                    }
                }
            }
            taps.sort_by_key(|&(idx, _)| idx);
            let mut merged: Vec<(u32, f32)> = Vec::with_capacity(taps.len() / 2);
            for (idx, w) in taps {
                match merged.last_mut() {
                    Some(last) if last.0 == idx => last.1 += w,
                    _ => merged.push((idx, w)),
                }
            }
            merged
        })
        .collect()
}

impl RadonOperator {
    pub fn new(n: usize, angles: &[f64]) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::Empty("radon transform needs at least one angle".into()));
        }
        if n == 0 {
            return Err(Error::DegenerateImage { height: 0, width: 0 });
        }
        let geometry = Geometry::new(n);
        let per_angle: Vec<Vec<Vec<(u32, f32)>>> =
            angles.par_iter().map(|&a| projection_rows(&geometry, a)).collect();
        let mut map = SparseMap {
            n_in: n * n,
            row_ptr: vec![0],
            ..Default::default()
        };
        for rows in per_angle {
            for row in rows {
                for (idx, w) in row {
                    map.indices.push(idx);
                    map.weights.push(w);
                }
                map.row_ptr.push(map.indices.len());
            }
        }
        Ok(Self {
            geometry,
            angles: angles.to_vec(),
            map: Rc::new(map),
        })
    }

    fn check_image(&self, img: &ImageGrid) -> Result<()> {
        if img.height != img.width {
            return Err(Error::Shape(format!(
                "radon transform needs a square image, got {}x{}",
                img.height, img.width
            )));
        }
        if img.height != self.geometry.n || img.channels != 1 {
            return Err(Error::Shape(format!(
                "operator built for {0}x{0}x1, image is {1}x{2}x{3}",
                self.geometry.n, img.height, img.width, img.channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, img: &ImageGrid) -> Result<Sinogram> {
        self.check_image(img)?;
        let values = self.map.matvec(img.data(), 1);
        Ok(Sinogram {
            angles: self.angles.clone(),
            geometry: self.geometry,
            values: Tensor::new(&[self.angles.len(), self.geometry.n_det], values)?,
        })
    }

    /// Exact transpose of [`RadonOperator::forward`].
    pub fn adjoint(&self, sino: &Sinogram) -> Result<ImageGrid> {
        sino.check()?;
        if sino.geometry != self.geometry || sino.angles != self.angles {
            return Err(Error::Shape("sinogram geometry does not match the operator".into()));
        }
        let n = self.geometry.n;
        ImageGrid::new(n, n, 1, self.map.matvec_transpose(sino.values.data(), 1))
    }
}

pub fn radon_forward(img: &ImageGrid, angles: &[f64]) -> Result<Sinogram> {
    if img.height != img.width {
        return Err(Error::Shape(format!(
            "radon transform needs a square image, got {}x{}",
            img.height, img.width
        )));
    }
    RadonOperator::new(img.height, angles)?.forward(img)
}

pub fn radon_adjoint(sino: &Sinogram) -> Result<ImageGrid> {
    RadonOperator::new(sino.geometry.n, &sino.angles)?.adjoint(sino)
}

/// Frequency response of the band-limited ramp filter (spatial-domain
/// Ram-Lak kernel), tapered by a Hann window, for FFT length `len`.
fn ramp_response(len: usize, dt: f64) -> Vec<f64> {
    let mut h = vec![Complex::new(0.0, 0.0); len];
    h[0].re = 1.0 / (4.0 * dt * dt);
    for k in 1..len / 2 {
        if k % 2 == 1 {
            let v = -1.0 / (PI * PI * (k * k) as f64 * dt * dt);
            h[k].re = v;
            h[len - k].re = v;
        }
    }
    FftPlanner::<f64>::new().plan_fft_forward(len).process(&mut h);
    (0..len)
        .map(|f| {
            let freq = f.min(len - f) as f64 / len as f64;
            h[f].re * 0.5 * (1.0 + (2.0 * PI * freq).cos())
        })
        .collect()
}

/// Ramp-filters each projection.
pub fn filter_sinogram(sino: &Sinogram) -> Result<Vec<Vec<f64>>> {
    sino.check()?;
    let nd = sino.geometry.n_det;
    let dt = sino.geometry.det_spacing;
    let len = (2 * nd).next_power_of_two();
    let response = ramp_response(len, dt);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut out = Vec::with_capacity(sino.views());
    for i in 0..sino.views() {
        let mut buf: Vec<Complex<f64>> = (0..len)
            .map(|k| Complex::new(if k < nd { sino.row(i)[k] as f64 } else { 0.0 }, 0.0))
            .collect();
        fwd.process(&mut buf);
        for (b, r) in buf.iter_mut().zip(&response) {
            *b *= *r;
        }
        inv.process(&mut buf);
        out.push(buf[..nd].iter().map(|c| c.re * dt / len as f64).collect());
    }
    Ok(out)
}

/// Filtered back-projection onto the `n x n` grid. Each view is weighted by
/// `pi / I`, which is exact for uniform views over `[0, pi)`.
pub fn fbp(sino: &Sinogram) -> Result<ImageGrid> {
    if sino.views() == 0 {
        return Err(Error::Empty("sinogram without views".into()));
    }
    if sino.views() == 1 {
        log::warn!("filtered back-projection from a single view is low quality");
    }
    let filtered = filter_sinogram(sino)?;
    let geo = sino.geometry;
    let n = geo.n;
    let weight = PI / sino.views() as f64;
    let trig: Vec<(f64, f64)> = sino.angles.iter().map(|a| (a.cos(), a.sin())).collect();
    let mut out = Vec::with_capacity(n * n);
    let center = (geo.n_det as f64 - 1.0) / 2.0;
    for i in 0..n {
        for j in 0..n {
            let (x, y) = pixel_center(i, j, n, n);
            let mut acc = 0.0;
            for (q, &(c, s)) in filtered.iter().zip(&trig) {
                let pos = (x * c + y * s) / geo.det_spacing + center;
                let k0 = pos.floor();
                let f = pos - k0;
                let k0 = k0 as i64;
                let at = |k: i64| {
                    if k >= 0 && (k as usize) < geo.n_det {
                        q[k as usize]
                    } else {
                        0.0
                    }
                };
                acc += (1.0 - f) * at(k0) + f * at(k0 + 1);
            }
            out.push((acc * weight) as f32);
        }
    }
    ImageGrid::new(n, n, 1, out)
}

/// Adds white Gaussian noise to each projection, rescaled so that every
/// row's realized SNR is exactly `snr_db`. `f64::INFINITY` returns the
/// sinogram unchanged; rows with zero power are left noise-free.
pub fn add_noise(sino: &Sinogram, snr_db: f64, seed: u64) -> Result<Sinogram> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::Invalid(format!("snr_db must be finite or +inf, got {snr_db}")));
    }
    sino.check()?;
    if snr_db == f64::INFINITY {
        return Ok(sino.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nd = sino.geometry.n_det;
    let mut out = sino.clone();
    for i in 0..sino.views() {
        let noise: Vec<f64> = (0..nd).map(|_| StandardNormal.sample(&mut rng)).collect();
        let row = &mut out.values.data_mut()[i * nd..(i + 1) * nd];
        let signal: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum();
        if signal == 0.0 {
            log::warn!("projection {i} has zero power; left without noise");
            continue;
        }
        let drawn: f64 = noise.iter().map(|v| v * v).sum();
        let scale = (signal / 10f64.powf(snr_db / 10.0) / drawn).sqrt();
        for (r, e) in row.iter_mut().zip(&noise) {
            *r = (*r as f64 + scale * e) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ellipse_phantom_with, PhantomStyle};
    use crate::metrics::snr;
    use rand::Rng;

    fn disk(n: usize, radius: f64) -> ImageGrid {
        ImageGrid::from_fn(n, n, 1, |x, y, _| {
            let r = (x * x + y * y).sqrt();
            1.0 / (1.0 + ((r - radius) / 0.06).exp())
        })
        .unwrap()
    }

    fn smooth_phantom(n: usize, seed: u64) -> ImageGrid {
        let style = PhantomStyle {
            edge_width: 0.04,
            ..PhantomStyle::default()
        };
        ellipse_phantom_with(seed, n, 5, &style).unwrap()
    }

    #[test]
    fn zero_image_and_empty_angles() {
        let z = ImageGrid::zeros(16, 16, 1).unwrap();
        let s = radon_forward(&z, &angles_full(8)).unwrap();
        assert_eq!(s.values.max_abs(), 0.0);
        assert!(radon_forward(&z, &[]).is_err());
        assert_eq!(fbp(&s).unwrap().values.max_abs(), 0.0);
    }

    #[test]
    fn detector_covers_diagonal() {
        let g = Geometry::new(64);
        assert_eq!(g.n_det, 91);
        assert!(g.n_det as f64 * g.det_spacing >= 2.0 * std::f64::consts::SQRT_2);
    }

    #[test]
    fn disk_rows_are_equal() {
        let s = radon_forward(&disk(64, 0.5), &angles_full(36)).unwrap();
        let first = s.row(0).to_vec();
        let scale = first.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        for i in 1..s.views() {
            for (a, b) in s.row(i).iter().zip(&first) {
                assert!((a - b).abs() <= 1e-3 * scale, "view {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn mass_is_conserved() {
        let img = smooth_phantom(64, 3);
        let s = radon_forward(&img, &angles_full(45)).unwrap();
        let dt = s.geometry.det_spacing;
        let mass = img.values.sum() as f64 * dt * dt;
        for i in 0..s.views() {
            let row: f64 = s.row(i).iter().map(|&v| v as f64).sum::<f64>() * dt;
            assert!((row - mass).abs() <= 1e-3 * mass, "view {i}: {row} vs {mass}");
        }
    }

    #[test]
    fn linear_and_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 24;
        let angles = angles_full(17);
        let op = RadonOperator::new(n, &angles).unwrap();
        let x = ImageGrid::new(n, n, 1, (0..n * n).map(|_| rng.random::<f32>() - 0.5).collect()).unwrap();
        let y = ImageGrid::new(n, n, 1, (0..n * n).map(|_| rng.random::<f32>() - 0.5).collect()).unwrap();
        let combo = ImageGrid::new(
            n,
            n,
            1,
            x.data().iter().zip(y.data()).map(|(a, b)| 2.0 * a - 0.5 * b).collect(),
        )
        .unwrap();
        let (rx, ry, rc) = (op.forward(&x).unwrap(), op.forward(&y).unwrap(), op.forward(&combo).unwrap());
        for k in 0..rc.values.len() {
            let expect = 2.0 * rx.values.data()[k] - 0.5 * ry.values.data()[k];
            assert!((rc.values.data()[k] - expect).abs() < 1e-5);
        }
        let mut s = Sinogram::zeros(angles.clone(), op.geometry);
        for v in s.values.data_mut() {
            *v = rng.random::<f32>() - 0.5;
        }
        let lhs: f64 = rx.values.data().iter().zip(s.values.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        let at = op.adjoint(&s).unwrap();
        let rhs: f64 = x.data().iter().zip(at.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn translation_shifts_projections() {
        let n = 64;
        let base = disk(n, 0.3);
        let shifted = ImageGrid::from_fn(n, n, 1, |x, y, _| {
            let x = x - 2.0 / n as f64;
            let r = (x * x + y * y).sqrt();
            1.0 / (1.0 + ((r - 0.3) / 0.03).exp())
        })
        .unwrap();
        let angles = angles_full(8);
        let a = radon_forward(&base, &angles).unwrap();
        let b = radon_forward(&shifted, &angles).unwrap();
        let centroid = |row: &[f32]| {
            let m: f64 = row.iter().map(|&v| v as f64).sum();
            row.iter().enumerate().map(|(k, &v)| k as f64 * v as f64).sum::<f64>() / m
        };
        for (i, th) in angles.iter().enumerate() {
            let moved = centroid(b.row(i)) - centroid(a.row(i));
            assert!((moved - th.cos()).abs() < 1.0, "view {i}: {moved}");
        }
    }

    #[test]
    fn fbp_round_trip_and_limited_view() {
        let img = smooth_phantom(64, 11);
        let full = fbp(&radon_forward(&img, &angles_full(180)).unwrap()).unwrap();
        let full_snr = snr(full.data(), img.data()).unwrap();
        assert!(full_snr >= 20.0, "{full_snr}");
        let lim = angles_inclusive(-70f64.to_radians(), 70f64.to_radians(), 60);
        let limited = fbp(&radon_forward(&img, &lim).unwrap()).unwrap();
        assert!(snr(limited.data(), img.data()).unwrap() < full_snr);
    }

    #[test]
    fn noise_model() {
        let img = smooth_phantom(32, 4);
        let s = radon_forward(&img, &angles_full(10)).unwrap();
        assert_eq!(add_noise(&s, f64::INFINITY, 1).unwrap(), s);
        assert_eq!(add_noise(&s, 30.0, 5).unwrap(), add_noise(&s, 30.0, 5).unwrap());
        assert!(add_noise(&s, f64::NAN, 1).is_err());
        let mut mean = 0.0;
        for seed in 0..100 {
            let noisy = add_noise(&s, 30.0, seed).unwrap();
            for i in 0..s.views() {
                mean += snr(noisy.row(i), s.row(i)).unwrap();
            }
        }
        mean /= 100.0 * s.views() as f64;
        assert!((mean - 30.0).abs() < 0.5, "{mean}");
    }

    #[test]
    fn sinogram_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = radon_forward(&smooth_phantom(16, 1), &angles_full(5)).unwrap();
        let p = dir.path().join("s.f32");
        s.save(&p).unwrap();
        assert_eq!(Sinogram::load(&p).unwrap(), s);
    }
}
