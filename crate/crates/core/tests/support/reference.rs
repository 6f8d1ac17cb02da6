//! Plain f64 re-implementation of the FunkNN forward pass, written with
//! loops only, for finite-difference checks of the tape gradients.

use funknn_core::model::FunkNN;
use funknn_core::sampler::{sample_bicubic, Coord, ImageGrid, PatchSpec};

pub struct Reference {
    pub channels: usize,
    pub patch: usize,
    pub width: usize,
    pub pool_after: Vec<usize>,
    pub conv_layers: usize,
    pub fc_layers: usize,
    /// Parameter tensors in `FunkNN::param_tensors` order, flattened.
    pub params: Vec<Vec<f64>>,
}

impl Reference {
    pub fn of(model: &FunkNN) -> Self {
        assert_eq!(model.arch.conv_kernel, 2, "reference handles 2x2 convolutions");
        Self {
            channels: model.arch.channels,
            patch: model.arch.patch,
            width: model.arch.conv_width,
            pool_after: model.arch.pool_after.clone(),
            conv_layers: model.arch.conv_layers,
            fc_layers: model.arch.fc_layers,
            params: model
                .param_tensors()
                .iter()
                .map(|t| t.data().iter().map(|&v| v as f64).collect())
                .collect(),
        }
    }

    /// Patch of bicubic samples, `[p][p][C]` flattened row-major.
    fn patch_values(&self, img: &ImageGrid, coord: Coord) -> Vec<f64> {
        let n = self.params.len();
        let spec = PatchSpec {
            p: self.patch,
            gamma_x: self.params[n - 2][0],
            gamma_y: self.params[n - 1][0],
        };
        let mut out = Vec::with_capacity(self.patch * self.patch * self.channels);
        for pos in spec.sample_positions(coord, img.height, img.width) {
            out.extend(sample_bicubic(img, pos, 0).expect("valid image").value);
        }
        out
    }

    pub fn forward(&self, img: &ImageGrid, coord: Coord) -> Vec<f64> {
        let c = self.channels;
        let x = self.patch_values(img, coord);
        let mid = (self.patch - 1) / 2;
        let center: Vec<f64> = x[(mid * self.patch + mid) * c..(mid * self.patch + mid + 1) * c].to_vec();

        let mut side = self.patch;
        let mut ch = c;
        let mut h = x;
        for l in 0..self.conv_layers {
            let w = &self.params[2 * l];
            let b = &self.params[2 * l + 1];
            let co = self.width;
            let mut act = vec![0.0; side * side * co];
            for i in 0..side {
                for j in 0..side {
                    for o in 0..co {
                        let mut acc = b[o];
                        for di in 0..2 {
                            for dj in 0..2 {
                                let (ii, jj) = (i + di, j + dj);
                                if ii >= side || jj >= side {
                                    continue;
                                }
                                for ci in 0..ch {
                                    acc += h[(ii * side + jj) * ch + ci] * w[((di * 2 + dj) * ch + ci) * co + o];
                                }
                            }
                        }
                        act[(i * side + j) * co + o] = acc.max(0.0);
                    }
                }
            }
            if l > 0 {
                for (a, v) in act.iter_mut().zip(&h) {
                    *a += v;
                }
            }
            h = act;
            ch = co;
            if self.pool_after.contains(&(l + 1)) {
                let ns = side / 2;
                let mut pooled = vec![0.0; ns * ns * ch];
                for i in 0..ns {
                    for j in 0..ns {
                        for o in 0..ch {
                            let mut m = f64::NEG_INFINITY;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    m = m.max(h[((2 * i + di) * side + 2 * j + dj) * ch + o]);
                                }
                            }
                            pooled[(i * ns + j) * ch + o] = m;
                        }
                    }
                }
                h = pooled;
                side = ns;
            }
        }

        let fc0 = self.conv_layers;
        let layers = self.fc_layers;
        let mut f = h;
        for l in 0..layers {
            let w = &self.params[2 * (fc0 + l)];
            let b = &self.params[2 * (fc0 + l) + 1];
            let fout = b.len();
            let fin = f.len();
            let mut y = b.clone();
            for (k, &v) in f.iter().enumerate() {
                for o in 0..fout {
                    y[o] += v * w[k * fout + o];
                }
            }
            debug_assert_eq!(w.len(), fin * fout);
            if l + 1 == layers {
                f = y;
            } else {
                let mut act: Vec<f64> = y.into_iter().map(|v| v.max(0.0)).collect();
                if l > 0 {
                    for (a, v) in act.iter_mut().zip(&f) {
                        *a += v;
                    }
                }
                f = act;
            }
        }
        f.iter().zip(&center).map(|(a, b)| a + b).collect()
    }

    /// Mean squared residual over `(image index, coord, target)` triples.
    pub fn loss(&self, images: &[ImageGrid], points: &[(usize, Coord, Vec<f32>)]) -> f64 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for (i, coord, target) in points {
            let out = self.forward(&images[*i], *coord);
            for (o, t) in out.iter().zip(target) {
                acc += (o - *t as f64).powi(2);
                count += 1;
            }
        }
        acc / count as f64
    }
}
