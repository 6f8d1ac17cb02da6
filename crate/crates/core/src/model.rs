//! The FunkNN network: a bicubic patch extractor followed by a small CNN
//! that regresses the intensity at the query coordinate, with a residual
//! connection to the patch center.
//!
//! Layer schedule (default architecture, `C` channels, 9 x 9 patch):
//!
//! ```text
//! conv1..conv3  2x2 same-padded, 64 ch, ReLU, identity skips (not conv1)
//! max-pool 2x2  9x9 -> 4x4
//! conv4..conv6  2x2 same-padded, 64 ch, ReLU, identity skips
//! max-pool 2x2  4x4 -> 2x2
//! conv7..conv8  2x2 same-padded, 64 ch, ReLU, identity skips
//! flatten       256
//! fc1..fc3      Linear+ReLU, width 64, identity skips (not fc1)
//! fc4           Linear to C, zero-initialized
//! output        fc4 + patch center
//! ```
//!
//! Every layer is linear, ReLU or max-pool, so for a fixed patch the network
//! is locally linear in its input. Coordinate derivatives are therefore
//! exact Jacobian-vector products along the sampler's derivative patches,
//! evaluated with the ReLU masks and pool selections of the primal pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::sampler::{self, Coord, ImageDims, ImageGrid, PatchKind, PatchQuery, PatchSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "funknn";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub channels: usize,
    pub patch: usize,
    pub conv_width: usize,
    pub conv_kernel: usize,
    pub conv_layers: usize,
    /// 1-based conv indices followed by a 2x2 max-pool.
    pub pool_after: Vec<usize>,
    pub fc_width: usize,
    pub fc_layers: usize,
}

impl Architecture {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            patch: 9,
            conv_width: 64,
            conv_kernel: 2,
            conv_layers: 8,
            pool_after: vec![3, 6],
            fc_width: 64,
            fc_layers: 4,
        }
    }

    /// Spatial side after all pools.
    pub fn final_side(&self) -> usize {
        self.pool_after.iter().fold(self.patch, |s, _| s / 2)
    }

    pub fn flatten_len(&self) -> usize {
        let s = self.final_side();
        s * s * self.conv_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.conv_layers == 0 || self.fc_layers == 0 {
            return Err(Error::Invalid("architecture needs channels and layers".into()));
        }
        if self.patch % 2 == 0 {
            return Err(Error::Invalid("patch size must be odd".into()));
        }
        if self.final_side() == 0 {
            return Err(Error::Invalid("too many pools for the patch size".into()));
        }
        if self.pool_after.iter().any(|&p| p == 0 || p > self.conv_layers) {
            return Err(Error::Invalid("pool position outside conv stack".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FunkNN {
    pub arch: Architecture,
    pub conv_w: Vec<Tensor>,
    pub conv_b: Vec<Tensor>,
    pub fc_w: Vec<Tensor>,
    pub fc_b: Vec<Tensor>,
    pub spec: PatchSpec,
}

/// Tape handles for one registration of the parameters.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub conv_w: Vec<Var>,
    pub conv_b: Vec<Var>,
    pub fc_w: Vec<Var>,
    pub fc_b: Vec<Var>,
    pub gamma_x: Var,
    pub gamma_y: Var,
}

impl NetVars {
    /// Handles in [`FunkNN::param_tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for (w, b) in self.conv_w.iter().zip(&self.conv_b) {
            v.push(*w);
            v.push(*b);
        }
        for (w, b) in self.fc_w.iter().zip(&self.fc_b) {
            v.push(*w);
            v.push(*b);
        }
        v.push(self.gamma_x);
        v.push(self.gamma_y);
        v
    }
}

/// Primal pass bookkeeping needed by the tangent pass.
pub struct PrimalTrace {
    pub out: Var,
    conv_masks: Vec<Tensor>,
    pools: Vec<Var>,
    fc_masks: Vec<Tensor>,
}

/// Which coordinate derivatives to produce alongside values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum DerivativeOrder {
    None,
    First,
    Second,
}

/// Outputs of [`FunkNN::apply`], each `[N, C]`.
#[derive(Clone, Copy, Debug)]
pub struct Evaluation {
    pub values: Var,
    pub dx: Option<Var>,
    pub dy: Option<Var>,
    pub laplacian: Option<Var>,
}

/// Coordinate derivatives at a batch of points.
#[derive(Clone, Debug)]
pub struct SpatialDerivatives {
    /// `[N, 2, C]`, `(d/dx, d/dy)`.
    pub gradient: Tensor,
    /// `[N, C]` when second order was requested.
    pub laplacian: Option<Tensor>,
    /// Per point: second derivatives sit on a kernel knot (right limit).
    pub on_knot: Vec<bool>,
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f32).sqrt(), rng)
}

fn mask_of(t: &Tensor) -> Tensor {
    t.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

fn tile(t: &Tensor, copies: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.len() * copies);
    for _ in 0..copies {
        data.extend_from_slice(t.data());
    }
    let mut shape = t.shape().to_vec();
    shape[0] *= copies;
    Tensor::new(&shape, data).expect("tiled shape")
}

/// Coordinates evaluated per tape when evaluating large point sets.
pub const EVAL_CHUNK: usize = 256;

impl FunkNN {
    /// He-initialized network with a zero output head, so that the output is
    /// exactly the central bicubic sample.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = arch.conv_kernel;
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        for l in 0..arch.conv_layers {
            let ci = if l == 0 { arch.channels } else { arch.conv_width };
            conv_w.push(he_normal(&[k, k, ci, arch.conv_width], k * k * ci, &mut rng));
            conv_b.push(Tensor::zeros(&[arch.conv_width]));
        }
        let mut fc_w = Vec::new();
        let mut fc_b = Vec::new();
        for l in 0..arch.fc_layers {
            let fin = if l == 0 { arch.flatten_len() } else { arch.fc_width };
            let last = l + 1 == arch.fc_layers;
            let fout = if last { arch.channels } else { arch.fc_width };
            if last {
                fc_w.push(Tensor::zeros(&[fin, fout]));
            } else {
                fc_w.push(he_normal(&[fin, fout], fin, &mut rng));
            }
            fc_b.push(Tensor::zeros(&[fout]));
        }
        Ok(Self {
            spec: PatchSpec {
                p: arch.patch,
                gamma_x: 1.0,
                gamma_y: 1.0,
            },
            arch,
            conv_w,
            conv_b,
            fc_w,
            fc_b,
        })
    }

    pub fn channels(&self) -> usize {
        self.arch.channels
    }

    /// Trainable tensors in a fixed order; the two patch spacings come last
    /// as one-element tensors.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        let mut v = Vec::new();
        for (w, b) in self.conv_w.iter().zip(&self.conv_b) {
            v.push(w.clone());
            v.push(b.clone());
        }
        for (w, b) in self.fc_w.iter().zip(&self.fc_b) {
            v.push(w.clone());
            v.push(b.clone());
        }
        v.push(Tensor::scalar(self.spec.gamma_x as f32));
        v.push(Tensor::scalar(self.spec.gamma_y as f32));
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for l in 0..self.conv_w.len() {
            v.push(format!("conv{}.weight", l + 1));
            v.push(format!("conv{}.bias", l + 1));
        }
        for l in 0..self.fc_w.len() {
            v.push(format!("fc{}.weight", l + 1));
            v.push(format!("fc{}.bias", l + 1));
        }
        v.push("patch.gamma_x".into());
        v.push("patch.gamma_y".into());
        v
    }

    /// Inverse of [`FunkNN::param_tensors`]; spacings are projected positive.
    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        let expected = self.param_tensors();
        if params.len() != expected.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (p, e) in params.iter().zip(&expected) {
            if p.shape() != e.shape() {
                return Err(Error::Shape(format!("{:?} vs {:?}", p.shape(), e.shape())));
            }
        }
        let mut it = params.iter().cloned();
        for l in 0..self.conv_w.len() {
            self.conv_w[l] = it.next().expect("len checked");
            self.conv_b[l] = it.next().expect("len checked");
        }
        for l in 0..self.fc_w.len() {
            self.fc_w[l] = it.next().expect("len checked");
            self.fc_b[l] = it.next().expect("len checked");
        }
        self.spec.gamma_x = it.next().expect("len checked").item() as f64;
        self.spec.gamma_y = it.next().expect("len checked").item() as f64;
        self.spec.project();
        Ok(())
    }

    /// Number of trainable scalars, including the two patch spacings.
    pub fn parameter_count(&self) -> usize {
        self.param_tensors().iter().map(Tensor::len).sum()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> NetVars {
        let mut reg = |t: &Tensor| tape.leaf(t.clone(), trainable);
        let conv_w = self.conv_w.iter().map(&mut reg).collect();
        let conv_b = self.conv_b.iter().map(&mut reg).collect();
        let fc_w = self.fc_w.iter().map(&mut reg).collect();
        let fc_b = self.fc_b.iter().map(&mut reg).collect();
        let gamma_x = reg(&Tensor::scalar(self.spec.gamma_x as f32));
        let gamma_y = reg(&Tensor::scalar(self.spec.gamma_y as f32));
        NetVars {
            conv_w,
            conv_b,
            fc_w,
            fc_b,
            gamma_x,
            gamma_y,
        }
    }

    /// Network head on `[B, p, p, C]` patches plus the `[B, C]` centers.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &NetVars,
        patches: Var,
        center: Var,
    ) -> Result<PrimalTrace> {
        let a = &self.arch;
        let s = tape.shape(patches).to_vec();
        if s.len() != 4 || s[1] != a.patch || s[2] != a.patch || s[3] != a.channels {
            return Err(Error::Shape(format!(
                "patches {:?} do not match a {}x{}x{} patch",
                s, a.patch, a.patch, a.channels
            )));
        }
        let batch = s[0];
        let pad = Padding::same(a.conv_kernel, a.conv_kernel);
        let mut conv_masks = Vec::new();
        let mut pools = Vec::new();
        let mut h = patches;
        for l in 0..a.conv_layers {
            let pre = tape.conv2d(h, vars.conv_w[l], Some(vars.conv_b[l]), 1, pad)?;
            let act = tape.relu(pre);
            conv_masks.push(mask_of(tape.value(act)));
            h = if l == 0 { act } else { tape.add(act, h)? };
            if a.pool_after.contains(&(l + 1)) {
                h = tape.max_pool2(h)?;
                pools.push(h);
            }
        }
        let mut f = tape.reshape(h, &[batch, a.flatten_len()])?;
        let mut fc_masks = Vec::new();
        for l in 0..a.fc_layers {
            let y = tape.linear(f, vars.fc_w[l], vars.fc_b[l])?;
            if l + 1 == a.fc_layers {
                f = y;
            } else {
                let act = tape.relu(y);
                fc_masks.push(mask_of(tape.value(act)));
                f = if l == 0 { act } else { tape.add(act, f)? };
            }
        }
        let out = tape.add(f, center)?;
        Ok(PrimalTrace {
            out,
            conv_masks,
            pools,
            fc_masks,
        })
    }

    /// Jacobian-vector product of the head at the primal recorded in
    /// `trace`, for `K` stacked tangent batches (`[K*B, p, p, C]` patches
    /// and `[K*B, C]` centers).
    pub fn tangent_tape(
        &self,
        tape: &mut Tape,
        vars: &NetVars,
        trace: &PrimalTrace,
        tangents: Var,
        tangent_center: Var,
    ) -> Result<Var> {
        let a = &self.arch;
        let batch = tape.shape(trace.out)[0];
        let total = tape.shape(tangents)[0];
        if batch == 0 || total % batch != 0 {
            return Err(Error::Shape(format!(
                "tangent batch {total} is not a multiple of primal batch {batch}"
            )));
        }
        let copies = total / batch;
        let pad = Padding::same(a.conv_kernel, a.conv_kernel);
        let mut h = tangents;
        let mut pool_i = 0;
        for l in 0..a.conv_layers {
            let lin = tape.conv2d(h, vars.conv_w[l], None, 1, pad)?;
            let mask = tape.constant(tile(&trace.conv_masks[l], copies));
            let act = tape.mul(lin, mask)?;
            h = if l == 0 { act } else { tape.add(act, h)? };
            if a.pool_after.contains(&(l + 1)) {
                h = tape.pool_gather(h, trace.pools[pool_i])?;
                pool_i += 1;
            }
        }
        let mut f = tape.reshape(h, &[total, a.flatten_len()])?;
        for l in 0..a.fc_layers {
            let y = tape.matmul(f, vars.fc_w[l])?;
            if l + 1 == a.fc_layers {
                f = y;
            } else {
                let mask = tape.constant(tile(&trace.fc_masks[l], copies));
                let act = tape.mul(y, mask)?;
                f = if l == 0 { act } else { tape.add(act, f)? };
            }
        }
        tape.add(f, tangent_center)
    }

    /// Central entries `[B, C]` of `[B, p, p, C]` patches.
    fn centers(&self, tape: &mut Tape, patches: Var) -> Result<Var> {
        let s = tape.shape(patches).to_vec();
        let (b, p, c) = (s[0], s[1], s[3]);
        let flat = tape.reshape(patches, &[b, p * p, c])?;
        let mid = tape.slice(flat, 1, self.spec.center() * p + self.spec.center(), 1)?;
        tape.reshape(mid, &[b, c])
    }

    fn sample_patches(
        &self,
        tape: &mut Tape,
        image: Var,
        dims: &[ImageDims],
        queries: &[PatchQuery],
        kind: PatchKind,
        gammas: &[Var],
    ) -> Result<Var> {
        let map = sampler::patch_map(dims, queries, &self.spec, kind)?;
        let params: &[Var] = if kind == PatchKind::Value { gammas } else { &[] };
        let flat = tape.sparse(image, params, map)?;
        let p = self.spec.p;
        tape.reshape(flat, &[queries.len(), p, p, self.arch.channels])
    }

    /// Differentiable evaluation at `queries` over a stack of images held in
    /// `image` (`[sum H*W, C]`, images concatenated in `dims` order).
    pub fn apply(
        &self,
        tape: &mut Tape,
        vars: &NetVars,
        image: Var,
        dims: &[ImageDims],
        queries: &[PatchQuery],
        order: DerivativeOrder,
    ) -> Result<Evaluation> {
        let c = self.arch.channels;
        if tape.shape(image).last() != Some(&c) {
            return Err(Error::Shape(format!(
                "image stack {:?} does not have {} channels",
                tape.shape(image),
                c
            )));
        }
        let gammas = [vars.gamma_x, vars.gamma_y];
        let patches = self.sample_patches(tape, image, dims, queries, PatchKind::Value, &gammas)?;
        let center = self.centers(tape, patches)?;
        let trace = self.forward_tape(tape, vars, patches, center)?;
        let mut ev = Evaluation {
            values: trace.out,
            dx: None,
            dy: None,
            laplacian: None,
        };
        if order == DerivativeOrder::None || queries.is_empty() {
            return Ok(ev);
        }
        let mut kinds = vec![PatchKind::Dx, PatchKind::Dy];
        if order == DerivativeOrder::Second {
            kinds.push(PatchKind::Laplacian);
        }
        let mut tangent_parts = Vec::new();
        for kind in &kinds {
            tangent_parts.push(self.sample_patches(tape, image, dims, queries, *kind, &[])?);
        }
        let tangents = tape.concat(&tangent_parts, 0)?;
        let tcenter = self.centers(tape, tangents)?;
        let tout = self.tangent_tape(tape, vars, &trace, tangents, tcenter)?;
        let n = queries.len();
        ev.dx = Some(tape.slice(tout, 0, 0, n)?);
        ev.dy = Some(tape.slice(tout, 0, n, n)?);
        if order == DerivativeOrder::Second {
            ev.laplacian = Some(tape.slice(tout, 0, 2 * n, n)?);
        }
        Ok(ev)
    }

    /// Network output for one patch and its center, outside any caller tape.
    pub fn forward(&self, patch: &Tensor, center: &Tensor) -> Result<Tensor> {
        let p = self.arch.patch;
        let c = self.arch.channels;
        if patch.shape() != [p, p, c] || center.len() != c {
            return Err(Error::Shape(format!(
                "forward expects [{p}, {p}, {c}] patch and [{c}] center, got {:?} and {:?}",
                patch.shape(),
                center.shape()
            )));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let pv = tape.constant(patch.clone().reshape(&[1, p, p, c])?);
        let cv = tape.constant(center.clone().reshape(&[1, c])?);
        let trace = self.forward_tape(&mut tape, &vars, pv, cv)?;
        tape.value(trace.out).clone().reshape(&[c])
    }

    fn check_image(&self, img: &ImageGrid) -> Result<()> {
        if img.channels != self.arch.channels {
            return Err(Error::Shape(format!(
                "image has {} channels, model expects {}",
                img.channels, self.arch.channels
            )));
        }
        if img.height == 0 || img.width == 0 {
            return Err(Error::DegenerateImage {
                height: img.height,
                width: img.width,
            });
        }
        Ok(())
    }

    fn eval_chunk(
        &self,
        img: &ImageGrid,
        coords: &[Coord],
        order: DerivativeOrder,
    ) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let image = tape.constant(img.values.clone().reshape(&[img.pixel_count(), img.channels])?);
        let dims = [ImageDims {
            height: img.height,
            width: img.width,
        }];
        let queries: Vec<_> = coords
            .iter()
            .map(|&coord| PatchQuery { image: 0, coord })
            .collect();
        let ev = self.apply(&mut tape, &vars, image, &dims, &queries, order)?;
        let grab = |v: Option<Var>| v.map(|v| tape.value(v).data().to_vec()).unwrap_or_default();
        Ok((
            tape.value(ev.values).data().to_vec(),
            grab(ev.dx),
            grab(ev.dy),
            grab(ev.laplacian),
        ))
    }

    /// Runs `eval_chunk` over fixed-size chunks (in parallel on the current
    /// rayon pool) and concatenates in order, so results do not depend on the
    /// thread count.
    fn eval_chunked(
        &self,
        img: &ImageGrid,
        coords: &[Coord],
        order: DerivativeOrder,
    ) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>)> {
        self.check_image(img)?;
        let parts: Vec<_> = coords
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| self.eval_chunk(img, chunk, order))
            .collect::<Result<Vec<_>>>()?;
        let mut out = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (v, dx, dy, l) in parts {
            out.0.extend(v);
            out.1.extend(dx);
            out.2.extend(dy);
            out.3.extend(l);
        }
        Ok(out)
    }

    /// Intensities `[N, C]` at `coords`.
    pub fn evaluate(&self, img: &ImageGrid, coords: &[Coord]) -> Result<Tensor> {
        let (v, ..) = self.eval_chunked(img, coords, DerivativeOrder::None)?;
        Tensor::new(&[coords.len(), self.arch.channels], v)
    }

    /// Evaluates on the pixel-center grid of an `h x w` image.
    pub fn render(&self, img: &ImageGrid, h: usize, w: usize) -> Result<ImageGrid> {
        let coords = sampler::pixel_centers(h, w);
        let v = self.evaluate(img, &coords)?;
        ImageGrid::new(h, w, self.arch.channels, v.into_data())
    }

    /// Coordinate gradient (order 1) and additionally the Laplacian (order 2).
    pub fn spatial_derivatives(
        &self,
        img: &ImageGrid,
        coords: &[Coord],
        order: usize,
    ) -> Result<SpatialDerivatives> {
        let ord = match order {
            1 => DerivativeOrder::First,
            2 => DerivativeOrder::Second,
            _ => return Err(Error::Invalid(format!("derivative order {order} not in {{1, 2}}"))),
        };
        let (_, dx, dy, lap) = self.eval_chunked(img, coords, ord)?;
        let c = self.arch.channels;
        let mut grad = Vec::with_capacity(coords.len() * 2 * c);
        for i in 0..coords.len() {
            grad.extend_from_slice(&dx[i * c..(i + 1) * c]);
            grad.extend_from_slice(&dy[i * c..(i + 1) * c]);
        }
        let on_knot = if ord == DerivativeOrder::Second {
            coords
                .iter()
                .map(|&coord| {
                    self.spec
                        .sample_positions(coord, img.height, img.width)
                        .into_iter()
                        .any(|pos| sampler::on_knot(pos, img.height, img.width))
                })
                .collect()
        } else {
            vec![false; coords.len()]
        };
        Ok(SpatialDerivatives {
            gradient: Tensor::new(&[coords.len(), 2, c], grad)?,
            laplacian: if ord == DerivativeOrder::Second {
                Some(Tensor::new(&[coords.len(), c], lap)?)
            } else {
                None
            },
            on_knot,
        })
    }

    /// Single-point convenience: `[2, C]` gradient for order 1, `[C]`
    /// Laplacian for order 2, plus the knot flag.
    pub fn spatial_derivative(
        &self,
        img: &ImageGrid,
        coord: Coord,
        order: usize,
    ) -> Result<(Tensor, bool)> {
        let d = self.spatial_derivatives(img, &[coord], order)?;
        let c = self.arch.channels;
        if order == 1 {
            Ok((d.gradient.reshape(&[2, c])?, false))
        } else {
            Ok((d.laplacian.expect("order 2").reshape(&[c])?, d.on_knot[0]))
        }
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::json!({
                "architecture": self.arch,
                "layer_schedule": "conv(2x2,same)+relu x3 | maxpool2 | x3 | maxpool2 | x2 | flatten | fc+relu x3 | fc | +center",
                "info": meta,
            }),
        );
        for (name, t) in self.param_names().into_iter().zip(self.param_tensors()) {
            ck.push(name, t);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a '{CHECKPOINT_KIND}' checkpoint, found '{}'",
                ck.kind
            )));
        }
        let arch: Architecture = serde_json::from_value(ck.meta["architecture"].clone())?;
        let mut model = FunkNN::init(arch, 0)?;
        let params = model
            .param_names()
            .iter()
            .map(|n| ck.get(n).cloned())
            .collect::<Result<Vec<_>>>()?;
        model.set_params(&params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_arch(c: usize) -> Architecture {
        Architecture {
            conv_width: 6,
            fc_width: 5,
            ..Architecture::new(c)
        }
    }

    fn randomize(model: &mut FunkNN, seed: u64, scale: f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = model.param_tensors();
        let n = params.len();
        for p in params.iter_mut().take(n - 2) {
            for v in p.data_mut() {
                *v += scale * (rng.random::<f32>() - 0.5);
            }
        }
        model.set_params(&params).unwrap();
    }

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn parameter_count_matches_reported_size() {
        let m = FunkNN::init(Architecture::new(1), 0).unwrap();
        let n = m.parameter_count();
        assert!((120_000..=160_000).contains(&n), "{n}");
        let m3 = FunkNN::init(Architecture::new(3), 0).unwrap();
        assert_eq!(m3.conv_w[0].shape(), &[2, 2, 3, 64]);
        for l in 1..8 {
            assert_eq!(m3.conv_w[l].shape(), m.conv_w[l].shape());
        }
        assert_eq!(m.arch.flatten_len(), 256);
    }

    #[test]
    fn init_is_deterministic() {
        let a = FunkNN::init(Architecture::new(1), 42).unwrap();
        let b = FunkNN::init(Architecture::new(1), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fresh_model_returns_center() {
        let m = FunkNN::init(Architecture::new(2), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patch = Tensor::uniform(&[9, 9, 2], 0.0, 1.0, &mut rng);
        let center = Tensor::from_vec(vec![0.25, -0.5]);
        assert_eq!(m.forward(&patch, &center).unwrap().data(), center.data());
        assert!(m.forward(&Tensor::zeros(&[8, 8, 2]), &center).is_err());
    }

    #[test]
    fn fresh_model_reproduces_pixels() {
        let m = FunkNN::init(Architecture::new(1), 3).unwrap();
        let img = random_image(12, 12, 1, 9);
        let out = m.render(&img, 12, 12).unwrap();
        assert!(out.values.max_abs_diff(&img.values) < 1e-6);
        assert_eq!(m.evaluate(&img, &[]).unwrap().len(), 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = FunkNN::init(small_arch(1), 1).unwrap();
        randomize(&mut m, 2, 0.2);
        m.spec.gamma_x = 1.25;
        let back = FunkNN::from_checkpoint(&m.to_checkpoint(serde_json::Value::Null)).unwrap();
        assert_eq!(back.param_tensors(), m.param_tensors());
        assert_eq!(back.arch, m.arch);
    }

    #[test]
    fn derivatives_of_constant_image_vanish() {
        let mut m = FunkNN::init(small_arch(1), 1).unwrap();
        randomize(&mut m, 5, 0.5);
        let img = ImageGrid::new(10, 10, 1, vec![0.4; 100]).unwrap();
        let d = m.spatial_derivatives(&img, &[(0.11, -0.23), (0.5, 0.5)], 2).unwrap();
        assert!(d.gradient.max_abs() < 1e-4);
        assert!(d.laplacian.unwrap().max_abs() < 1e-3);
    }

    #[test]
    fn locality() {
        let mut m = FunkNN::init(Architecture::new(1), 4).unwrap();
        randomize(&mut m, 6, 0.2);
        let img = random_image(32, 32, 1, 10);
        let coord = (-0.5, -0.5);
        let before = m.evaluate(&img, &[coord]).unwrap();
        let mut far = img.clone();
        far.values.data_mut()[31 * 32 + 31] += 1.0;
        let after = m.evaluate(&far, &[coord]).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn channel_permutation_equivariance() {
        let mut m = FunkNN::init(small_arch(2), 8).unwrap();
        randomize(&mut m, 9, 0.5);
        let img = random_image(8, 8, 2, 11);
        let coords = [(0.1, 0.2), (-0.3, 0.6)];
        let out = m.evaluate(&img, &coords).unwrap();

        let swapped_img = {
            let mut d = img.data().to_vec();
            for px in d.chunks_mut(2) {
                px.swap(0, 1);
            }
            ImageGrid::new(8, 8, 2, d).unwrap()
        };
        let mut sm = m.clone();
        // first conv: swap input channels; head: swap output columns and bias
        let w = &m.conv_w[0];
        let mut w2 = w.clone();
        let co = w.shape()[3];
        for tap in 0..4 {
            for o in 0..co {
                w2.data_mut()[(tap * 2) * co + o] = w.data()[(tap * 2 + 1) * co + o];
                w2.data_mut()[(tap * 2 + 1) * co + o] = w.data()[(tap * 2) * co + o];
            }
        }
        sm.conv_w[0] = w2;
        let last = sm.fc_w.len() - 1;
        for row in sm.fc_w[last].data_mut().chunks_mut(2) {
            row.swap(0, 1);
        }
        sm.fc_b[last].data_mut().swap(0, 1);
        let out2 = sm.evaluate(&swapped_img, &coords).unwrap();
        for i in 0..2 {
            assert!((out.data()[i * 2] - out2.data()[i * 2 + 1]).abs() < 1e-5);
            assert!((out.data()[i * 2 + 1] - out2.data()[i * 2]).abs() < 1e-5);
        }
    }
}
