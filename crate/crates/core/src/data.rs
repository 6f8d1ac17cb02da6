//! Synthetic datasets, resampling and image IO.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_f32_le, write_f32_le};
use crate::error::{Error, Result};
use crate::sampler::{pixel_center, pixel_centers, sample_bicubic, Coord, ImageDims, ImageGrid};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub x0: f64,
    pub y0: f64,
    pub sigma: f64,
}

pub const SIGMA_RANGE: (f64, f64) = (0.1, 0.4);
/// Centers are drawn in `[-CENTER_RANGE, CENTER_RANGE]^2`.
pub const CENTER_RANGE: f64 = 0.5;

impl GaussianSpec {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            x0: rng.random_range(-CENTER_RANGE..CENTER_RANGE),
            y0: rng.random_range(-CENTER_RANGE..CENTER_RANGE),
            sigma: rng.random_range(SIGMA_RANGE.0..SIGMA_RANGE.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= SIGMA_RANGE.0 && self.sigma <= SIGMA_RANGE.1) {
            return Err(Error::Invalid(format!(
                "sigma {} outside [{}, {}]",
                self.sigma, SIGMA_RANGE.0, SIGMA_RANGE.1
            )));
        }
        if self.x0.abs() > 1.0 || self.y0.abs() > 1.0 {
            return Err(Error::Invalid("gaussian center outside [-1, 1]^2".into()));
        }
        Ok(())
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        let r2 = (x - self.x0).powi(2) + (y - self.y0).powi(2);
        (-r2 / (2.0 * self.sigma * self.sigma)).exp()
    }

    pub fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let g = self.value(x, y);
        let s2 = self.sigma * self.sigma;
        (-(x - self.x0) * g / s2, -(y - self.y0) * g / s2)
    }

    pub fn laplacian(&self, x: f64, y: f64) -> f64 {
        let r2 = (x - self.x0).powi(2) + (y - self.y0).powi(2);
        let s2 = self.sigma * self.sigma;
        (r2 / (s2 * s2) - 2.0 / s2) * self.value(x, y)
    }
}

/// Gradients (and optionally Laplacians) sampled at a set of coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeField {
    pub coords: Vec<Coord>,
    /// The pixel grid the coordinates came from, when they form one.
    pub grid: Option<ImageDims>,
    /// `[N, 2, C]`.
    pub gradients: Tensor,
    /// `[N, C]`.
    pub laplacians: Option<Tensor>,
}

impl DerivativeField {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.gradients.shape().get(2).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.coords.len();
        let s = self.gradients.shape();
        if s.len() != 3 || s[0] != n || s[1] != 2 {
            return Err(Error::Shape(format!("{n} coordinates but gradients {s:?}")));
        }
        if let Some(l) = &self.laplacians {
            if l.shape() != [n, s[2]] {
                return Err(Error::Shape(format!("laplacians {:?} for {n} points", l.shape())));
            }
        }
        Ok(())
    }

    /// Euclidean norm of each gradient over both axes and all channels.
    pub fn gradient_norms(&self) -> Vec<f64> {
        let per = 2 * self.channels();
        self.gradients
            .data()
            .chunks(per.max(1))
            .map(|g| g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt())
            .collect()
    }

    /// Entries at `indices`, in the given order; the grid tag is dropped.
    pub fn select(&self, indices: &[usize]) -> Result<DerivativeField> {
        let c = self.channels();
        let mut coords = Vec::with_capacity(indices.len());
        let mut g = Vec::with_capacity(indices.len() * 2 * c);
        let mut l = Vec::new();
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Invalid(format!("index {i} out of {}", self.len())));
            }
            coords.push(self.coords[i]);
            g.extend_from_slice(&self.gradients.data()[i * 2 * c..(i + 1) * 2 * c]);
            if let Some(lap) = &self.laplacians {
                l.extend_from_slice(&lap.data()[i * c..(i + 1) * c]);
            }
        }
        Ok(DerivativeField {
            coords,
            grid: None,
            gradients: Tensor::new(&[indices.len(), 2, c], g)?,
            laplacians: match self.laplacians {
                Some(_) => Some(Tensor::new(&[indices.len(), c], l)?),
                None => None,
            },
        })
    }
}

/// Gaussian samples on the `n x n` pixel-center grid with its analytic
/// derivative field.
pub fn gaussian_image(spec: &GaussianSpec, n: usize) -> Result<(ImageGrid, DerivativeField)> {
    if n < 4 {
        return Err(Error::Invalid(format!("gaussian image size {n} must be at least 4")));
    }
    let coords = pixel_centers(n, n);
    let mut values = Vec::with_capacity(n * n);
    let mut grads = Vec::with_capacity(2 * n * n);
    let mut laps = Vec::with_capacity(n * n);
    for &(x, y) in &coords {
        values.push(spec.value(x, y) as f32);
        let (gx, gy) = spec.gradient(x, y);
        grads.push(gx as f32);
        grads.push(gy as f32);
        laps.push(spec.laplacian(x, y) as f32);
    }
    let img = ImageGrid::new(n, n, 1, values)?;
    let field = DerivativeField {
        grid: Some(ImageDims { height: n, width: n }),
        gradients: Tensor::new(&[n * n, 2, 1], grads)?,
        laplacians: Some(Tensor::new(&[n * n, 1], laps)?),
        coords,
    };
    Ok((img, field))
}

/// Derivative field of the bicubic interpolant of `img`, sampled at its own
/// pixel centers (for images without closed-form derivatives).
pub fn bicubic_field(img: &ImageGrid) -> Result<DerivativeField> {
    let coords = pixel_centers(img.height, img.width);
    let c = img.channels;
    let mut grads = Vec::with_capacity(2 * c * coords.len());
    let mut laps = Vec::with_capacity(c * coords.len());
    for &coord in &coords {
        let s = sample_bicubic(img, coord, 2)?;
        let (gx, gy) = s.gradient.expect("order 2");
        let (hx, hy) = s.second.expect("order 2");
        grads.extend(gx.iter().map(|&v| v as f32));
        grads.extend(gy.iter().map(|&v| v as f32));
        laps.extend(hx.iter().zip(&hy).map(|(a, b)| (a + b) as f32));
    }
    Ok(DerivativeField {
        grid: Some(ImageDims {
            height: img.height,
            width: img.width,
        }),
        gradients: Tensor::new(&[coords.len(), 2, c], grads)?,
        laplacians: Some(Tensor::new(&[coords.len(), c], laps)?),
        coords,
    })
}

/// Gaussian specs drawn from `seed`.
pub fn gaussian_specs(count: usize, seed: u64) -> Vec<GaussianSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| GaussianSpec::random(&mut rng)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomStyle {
    /// Width of the logistic edge profile in normalized units; 0 gives hard
    /// edges (anti-aliased by 4x4 supersampling).
    pub edge_width: f64,
    pub intensity: (f64, f64),
    pub semi_axis: (f64, f64),
    /// Ellipse centers are drawn in a disc of this radius.
    pub center_radius: f64,
}

impl Default for PhantomStyle {
    fn default() -> Self {
        Self {
            edge_width: 0.0,
            intensity: (0.2, 0.6),
            semi_axis: (0.1, 0.45),
            center_radius: 0.5,
        }
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    intensity: f64,
}

impl Ellipse {
    fn value(&self, x: f64, y: f64, edge: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        let rho = ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt();
        if edge > 0.0 {
            let dist = (rho - 1.0) * self.a.min(self.b);
            self.intensity / (1.0 + (dist / edge).exp())
        } else if rho <= 1.0 {
            self.intensity
        } else {
            0.0
        }
    }
}

/// Sum of `k` random rotated ellipses, clipped to `[0, 1]`.
pub fn ellipse_phantom(seed: u64, n: usize, k: usize) -> Result<ImageGrid> {
    ellipse_phantom_with(seed, n, k, &PhantomStyle::default())
}

pub fn ellipse_phantom_with(seed: u64, n: usize, k: usize, style: &PhantomStyle) -> Result<ImageGrid> {
    if n == 0 {
        return Err(Error::DegenerateImage { height: n, width: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ellipses: Vec<Ellipse> = (0..k)
        .map(|_| {
            let r = style.center_radius * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            Ellipse {
                cx: r * phi.cos(),
                cy: r * phi.sin(),
                a: rng.random_range(style.semi_axis.0..style.semi_axis.1),
                b: rng.random_range(style.semi_axis.0..style.semi_axis.1),
                cos: theta.cos(),
                sin: theta.sin(),
                intensity: rng.random_range(style.intensity.0..style.intensity.1),
            }
        })
        .collect();
    let ss = if style.edge_width > 0.0 { 1 } else { 4 };
    let px = 2.0 / n as f64;
    ImageGrid::from_fn(n, n, 1, |x, y, _| {
        let mut acc = 0.0;
        for sy in 0..ss {
            for sx in 0..ss {
                let xs = x + ((sx as f64 + 0.5) / ss as f64 - 0.5) * px;
                let ys = y + ((sy as f64 + 0.5) / ss as f64 - 0.5) * px;
                let v: f64 = ellipses.iter().map(|e| e.value(xs, ys, style.edge_width)).sum();
                acc += v.clamp(0.0, 1.0);
            }
        }
        acc / (ss * ss) as f64
    })
}

/// Non-overlapping box average by an integer factor.
pub fn downsample(img: &ImageGrid, factor: usize) -> Result<ImageGrid> {
    if factor == 0 || img.height % factor != 0 || img.width % factor != 0 {
        return Err(Error::Invalid(format!(
            "factor {factor} does not divide {}x{}",
            img.height, img.width
        )));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (h, w, c) = (img.height / factor, img.width / factor, img.channels);
    let mut out = vec![0.0f64; h * w * c];
    for i in 0..img.height {
        for j in 0..img.width {
            let o = ((i / factor) * w + j / factor) * c;
            for ch in 0..c {
                out[o + ch] += img.get(i, j, ch) as f64;
            }
        }
    }
    let inv = 1.0 / (factor * factor) as f64;
    ImageGrid::new(h, w, c, out.into_iter().map(|v| (v * inv) as f32).collect())
}

/// `[dst, src]` weights of the overlap of each destination cell with the
/// source cells, normalized to sum to one.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * ratio;
            let hi = (o + 1) as f64 * ratio;
            let mut taps = Vec::new();
            let mut k = lo.floor() as usize;
            while (k as f64) < hi && k < src {
                let overlap = (hi.min(k as f64 + 1.0) - lo.max(k as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((k, overlap / ratio));
                }
                k += 1;
            }
            taps
        })
        .collect()
}

/// Area-weighted resampling to an arbitrary size; equals [`downsample`] for
/// integer factors and preserves the mean for any size.
pub fn area_resize(img: &ImageGrid, h: usize, w: usize) -> Result<ImageGrid> {
    if h == 0 || w == 0 {
        return Err(Error::DegenerateImage { height: h, width: w });
    }
    let rows = area_weights(img.height, h);
    let cols = area_weights(img.width, w);
    let c = img.channels;
    let mut tmp = vec![0.0f64; img.height * w * c];
    for i in 0..img.height {
        for (o, taps) in cols.iter().enumerate() {
            for &(j, wt) in taps {
                for ch in 0..c {
                    tmp[(i * w + o) * c + ch] += wt * img.get(i, j, ch) as f64;
                }
            }
        }
    }
    let mut out = vec![0.0f32; h * w * c];
    for (o, taps) in rows.iter().enumerate() {
        for j in 0..w {
            for ch in 0..c {
                let v: f64 = taps.iter().map(|&(i, wt)| wt * tmp[(i * w + j) * c + ch]).sum();
                out[(o * w + j) * c + ch] = v as f32;
            }
        }
    }
    ImageGrid::new(h, w, c, out)
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn bilinear_resize(img: &ImageGrid, h: usize, w: usize) -> Result<ImageGrid> {
    if h == 0 || w == 0 {
        return Err(Error::DegenerateImage { height: h, width: w });
    }
    let axis = |x: f64, n: usize| -> (usize, usize, f64) {
        let u = ((x + 1.0) * n as f64 / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64)
    };
    let c = img.channels;
    let mut out = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            let (x, y) = pixel_center(i, j, h, w);
            let (x0, x1, fx) = axis(x, img.width);
            let (y0, y1, fy) = axis(y, img.height);
            for ch in 0..c {
                let top = (1.0 - fx) * img.get(y0, x0, ch) as f64 + fx * img.get(y0, x1, ch) as f64;
                let bot = (1.0 - fx) * img.get(y1, x0, ch) as f64 + fx * img.get(y1, x1, ch) as f64;
                out.push(((1.0 - fy) * top + fy * bot) as f32);
            }
        }
    }
    ImageGrid::new(h, w, c, out)
}

pub fn load_png(path: &Path) -> Result<ImageGrid> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::UnsupportedFormat("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "{}: only 8-bit PNG is supported, found {:?}",
            path.display(),
            info.bit_depth
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: only gray or RGB PNG is supported, found {other:?}",
                path.display()
            )))
        }
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let mut values = Vec::with_capacity(h * w * channels);
    for row in buf[..info.buffer_size()].chunks(info.line_size).take(h) {
        values.extend(row[..w * channels].iter().map(|&b| b as f32 / 255.0));
    }
    ImageGrid::new(h, w, channels, values)
}

/// 8-bit gray (1 channel) or RGB (3 channels); values are clamped to `[0, 1]`.
pub fn save_png(path: &Path, img: &ImageGrid) -> Result<()> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::UnsupportedFormat(format!("cannot write {c}-channel PNG"))),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RawHeader {
    height: usize,
    width: usize,
    channels: usize,
    dtype: String,
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Little-endian `f32` payload at `path` plus a `<path>.json` header.
pub fn save_raw(path: &Path, img: &ImageGrid) -> Result<()> {
    write_f32_le(path, img.data())?;
    let header = RawHeader {
        height: img.height,
        width: img.width,
        channels: img.channels,
        dtype: "f32le".into(),
    };
    let side = sidecar(path);
    fs::write(&side, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&side, e))
}

pub fn load_raw(path: &Path) -> Result<ImageGrid> {
    let side = sidecar(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: RawHeader = serde_json::from_str(&text)?;
    if header.dtype != "f32le" {
        return Err(Error::UnsupportedFormat(format!("raw dtype {}", header.dtype)));
    }
    ImageGrid::new(header.height, header.width, header.channels, read_f32_le(path)?)
}

/// Loads `.png` through [`load_png`] and anything else as raw floats.
pub fn load_image(path: &Path) -> Result<ImageGrid> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => load_png(path),
        _ => load_raw(path),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    /// PNG under `images/`.
    pub file: String,
    /// Exact float copy under `raw/`, when present.
    #[serde(default)]
    pub raw: Option<String>,
    #[serde(default)]
    pub gaussian: Option<GaussianSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: String,
    pub resolution: usize,
    pub channels: usize,
    pub items: Vec<DatasetItem>,
    pub splits: Splits,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageGrid>,
}

impl Dataset {
    pub fn train_images(&self) -> Vec<ImageGrid> {
        self.manifest.splits.train.iter().map(|&i| self.images[i].clone()).collect()
    }

    pub fn test_images(&self) -> Vec<ImageGrid> {
        self.manifest.splits.test.iter().map(|&i| self.images[i].clone()).collect()
    }
}

/// Generates `count` items; the last `test` of them form the test split.
pub fn generate_dataset(kind: &str, n: usize, count: usize, test: usize, seed: u64) -> Result<Dataset> {
    if test > count {
        return Err(Error::Invalid(format!("test split {test} larger than count {count}")));
    }
    let (images, gaussians): (Vec<ImageGrid>, Vec<Option<GaussianSpec>>) = match kind {
        "gaussian" => gaussian_specs(count, seed)
            .into_iter()
            .map(|g| gaussian_image(&g, n).map(|(img, _)| (img, Some(g))))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip(),
        "phantom" => (0..count)
            .map(|i| {
                let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
                let k = 3 + (s % 4) as usize;
                ellipse_phantom(s, n, k).map(|img| (img, None))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip(),
        other => {
            return Err(Error::Invalid(format!(
                "unknown dataset kind '{other}' (expected gaussian|phantom)"
            )))
        }
    };
    let items = gaussians
        .into_iter()
        .enumerate()
        .map(|(i, gaussian)| DatasetItem {
            file: format!("{i:05}.png"),
            raw: Some(format!("{i:05}.f32")),
            gaussian,
        })
        .collect();
    Ok(Dataset {
        manifest: DatasetManifest {
            kind: kind.into(),
            resolution: n,
            channels: 1,
            items,
            splits: Splits {
                train: (0..count - test).collect(),
                test: (count - test..count).collect(),
            },
        },
        images,
    })
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let img_dir = dir.join("images");
    let raw_dir = dir.join("raw");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    fs::create_dir_all(&raw_dir).map_err(|e| Error::io(&raw_dir, e))?;
    for (item, img) in ds.manifest.items.iter().zip(&ds.images) {
        save_png(&img_dir.join(&item.file), img)?;
        if let Some(raw) = &item.raw {
            save_raw(&raw_dir.join(raw), img)?;
        }
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&ds.manifest)?).map_err(|e| Error::io(&path, e))
}

/// Reads a dataset directory, preferring the exact raw copies over PNGs.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let mut images = Vec::with_capacity(manifest.items.len());
    for item in &manifest.items {
        let raw = item.raw.as_ref().map(|r| dir.join("raw").join(r));
        let img = match raw {
            Some(p) if p.exists() => load_raw(&p)?,
            _ => load_png(&dir.join("images").join(&item.file))?,
        };
        if img.height != manifest.resolution || img.width != manifest.resolution {
            return Err(Error::Shape(format!(
                "{} is {}x{}, manifest says {}",
                item.file, img.height, img.width, manifest.resolution
            )));
        }
        images.push(img);
    }
    for &i in manifest.splits.train.iter().chain(&manifest.splits.test) {
        if i >= images.len() {
            return Err(Error::Invalid(format!("split index {i} out of range")));
        }
    }
    Ok(Dataset { manifest, images })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn gaussian_center_values() {
        let spec = GaussianSpec { x0: 0.0, y0: 0.0, sigma: 0.2 };
        assert_eq!(spec.gradient(0.0, 0.0), (0.0, 0.0));
        assert!((spec.laplacian(0.0, 0.0) + 50.0).abs() < 1e-12);
        let (img, field) = gaussian_image(&spec, 32).unwrap();
        // nearest pixel centers are half a pixel from the origin on each axis
        let d2 = 2.0 * (1.0f64 / 32.0).powi(2);
        let expect = (-d2 / (2.0 * 0.04)).exp() as f32;
        assert!((img.get(16, 16, 0) - expect).abs() < 1e-6);
        assert!((1.0 - img.get(16, 16, 0)) < 0.03);
        field.validate().unwrap();
        assert!(gaussian_image(&spec, 3).is_err());
    }

    #[test]
    fn analytic_field_matches_finite_differences() {
        let spec = GaussianSpec { x0: 0.13, y0: -0.21, sigma: 0.25 };
        let n = 256;
        let (img, field) = gaussian_image(&spec, n).unwrap();
        let h = 2.0 / n as f64;
        let mut worst: f64 = 0.0;
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let gx = (img.get(i, j + 1, 0) as f64 - img.get(i, j - 1, 0) as f64) / (2.0 * h);
                let gy = (img.get(i + 1, j, 0) as f64 - img.get(i - 1, j, 0) as f64) / (2.0 * h);
                let k = i * n + j;
                worst = worst
                    .max((gx - field.gradients.data()[2 * k] as f64).abs())
                    .max((gy - field.gradients.data()[2 * k + 1] as f64).abs());
            }
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn phantom_basics() {
        let zero = ellipse_phantom(1, 16, 0).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert_eq!(ellipse_phantom(7, 32, 4).unwrap(), ellipse_phantom(7, 32, 4).unwrap());
        let p = ellipse_phantom(7, 32, 4).unwrap();
        assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn phantom_mean_intensity_range() {
        let mut total = 0.0;
        for s in 0..1000u64 {
            let img = ellipse_phantom(s, 16, 3 + (s % 4) as usize).unwrap();
            total += img.values.mean() as f64;
        }
        let mean = total / 1000.0;
        assert!((0.05..=0.6).contains(&mean), "{mean}");
    }

    #[test]
    fn downsample_properties() {
        let c = ImageGrid::new(8, 8, 2, vec![0.3; 128]).unwrap();
        assert!(downsample(&c, 4).unwrap().data().iter().all(|&v| (v - 0.3).abs() < 1e-7));
        let img = random_image(12, 12, 1, 3);
        assert_eq!(downsample(&img, 1).unwrap(), img);
        let d = downsample(&img, 3).unwrap();
        assert!((d.values.mean() - img.values.mean()).abs() < 1e-6);
        assert!(downsample(&img, 5).is_err());
    }

    #[test]
    fn area_resize_agrees_with_downsample_and_keeps_mean() {
        let img = random_image(16, 16, 1, 4);
        let a = area_resize(&img, 8, 8).unwrap();
        assert!(a.values.max_abs_diff(&downsample(&img, 2).unwrap().values) < 1e-6);
        let b = area_resize(&img, 7, 5).unwrap();
        assert!((b.values.mean() - img.values.mean()).abs() < 1e-5);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let img = random_image(9, 9, 2, 5);
        assert!(bilinear_resize(&img, 9, 9).unwrap().values.max_abs_diff(&img.values) < 1e-6);
        let c = ImageGrid::new(4, 4, 1, vec![0.7; 16]).unwrap();
        let up = bilinear_resize(&c, 13, 13).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn png_and_raw_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let img = random_image(7, 5, c, 6);
            let p = dir.path().join(format!("x{c}.png"));
            save_png(&p, &img).unwrap();
            let back = load_png(&p).unwrap();
            assert_eq!((back.height, back.width, back.channels), (7, 5, c));
            assert!(back.values.max_abs_diff(&img.values) <= 1.0 / 255.0 + 1e-6);
        }
        let img = random_image(6, 4, 2, 7);
        let p = dir.path().join("x.f32");
        save_raw(&p, &img).unwrap();
        assert_eq!(load_raw(&p).unwrap(), img);
        assert!(save_png(&dir.path().join("bad.png"), &img).is_err());
    }

    #[test]
    fn sixteen_bit_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let file = File::create(&p).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 2, 2);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[0u8; 8]).unwrap();
        w.finish().unwrap();
        assert!(matches!(load_png(&p), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset("gaussian", 8, 5, 2, 3).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        assert_eq!(back.images, ds.images);
        assert_eq!(back.test_images().len(), 2);
        assert!(generate_dataset("faces", 8, 5, 2, 3).is_err());
    }

    #[test]
    fn select_keeps_rows() {
        let spec = GaussianSpec { x0: 0.1, y0: 0.0, sigma: 0.3 };
        let (_, field) = gaussian_image(&spec, 8).unwrap();
        let sub = field.select(&[5, 2]).unwrap();
        assert_eq!(sub.coords, vec![field.coords[5], field.coords[2]]);
        assert_eq!(&sub.gradients.data()[2..4], &field.gradients.data()[4..6]);
    }
}
