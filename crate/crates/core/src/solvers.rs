//! Latent-space inverse solvers against the continuous generator
//! `FunkNN(x, G(z))`: dense and sparse derivative inversion, limited-view
//! CT, and a prior-free pixel + TV baseline.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::DerivativeField;
use crate::error::{Error, Result};
use crate::model::{DerivativeOrder, FunkNN};
use crate::optim::{adam_step, AdamState};
use crate::prior::{ParamSet, Prior};
use crate::radon::{RadonOperator, Sinogram};
use crate::sampler::{self, ImageDims, ImageGrid, PatchKind, PatchQuery, PatchSpec};
use crate::tensor::Tensor;

/// Smoothing inside the TV square root.
pub const TV_EPS: f64 = 1e-8;

/// Query points per tape in the solver objectives.
pub const SOLVE_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    Grad,
    SparseGrad,
    Ct,
}

impl FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(Problem::Grad),
            "sparse_grad" | "sparse-grad" => Ok(Problem::SparseGrad),
            "ct" => Ok(Problem::Ct),
            _ => Err(Error::Invalid(format!(
                "unknown problem '{s}', expected one of grad|sparse-grad|ct"
            ))),
        }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Problem::Grad => "grad",
            Problem::SparseGrad => "sparse_grad",
            Problem::Ct => "ct",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub problem: Problem,
    /// Weight of `|z|^2`.
    pub lambda: f64,
    /// TV weight (sparse_grad only); `None` means 1e-2.
    pub lambda2: Option<f64>,
    /// `None` means 2500 (grad, sparse_grad) or 5000 (ct).
    pub z_steps: Option<usize>,
    /// Decoder fine-tuning steps; `None` means 1000 (grad, sparse_grad) or 0 (ct).
    pub finetune_steps: Option<usize>,
    pub lr_z: f32,
    pub lr_finetune: f32,
    pub seed: u64,
    /// Kept fraction for sparse observations.
    pub fraction: f64,
    /// Side of the output grid; `None` means twice the prior resolution.
    pub output_size: Option<usize>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            problem: Problem::Grad,
            lambda: 0.0,
            lambda2: None,
            z_steps: None,
            finetune_steps: None,
            lr_z: 1e-2,
            lr_finetune: 1e-5,
            seed: 0,
            fraction: 0.2,
            output_size: None,
        }
    }
}

impl SolveConfig {
    pub fn for_problem(problem: Problem) -> Self {
        Self {
            problem,
            ..Self::default()
        }
    }

    pub fn z_steps(&self) -> usize {
        self.z_steps.unwrap_or(match self.problem {
            Problem::Ct => 5000,
            _ => 2500,
        })
    }

    pub fn finetune_steps(&self) -> usize {
        self.finetune_steps.unwrap_or(match self.problem {
            Problem::Ct => 0,
            _ => 1000,
        })
    }

    pub fn lambda2(&self) -> f64 {
        match self.problem {
            Problem::SparseGrad => self.lambda2.unwrap_or(1e-2),
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.lambda2() >= 0.0) {
            return Err(Error::Invalid("lambda and lambda2 must be non-negative".into()));
        }
        if !(self.lr_z > 0.0) || !(self.lr_finetune >= 0.0) {
            return Err(Error::Invalid("learning rates must be positive".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Invalid(format!("fraction {} not in (0, 1]", self.fraction)));
        }
        if self.output_size == Some(0) {
            return Err(Error::Invalid("output size must be positive".into()));
        }
        Ok(())
    }
}

/// `ceil(fraction * n)` with products that are integers up to rounding
/// taken exactly.
pub fn kept_count(n: usize, fraction: f64) -> usize {
    let k = fraction * n as f64;
    let r = k.round();
    let k = if (k - r).abs() < 1e-9 * (1.0 + r) { r } else { k.ceil() };
    (k as usize).min(n)
}

/// The `ceil(fraction * N)` entries with the largest gradient norm, kept in
/// their original order; ties go to the earlier entry.
pub fn select_top_gradients(field: &DerivativeField, fraction: f64) -> Result<DerivativeField> {
    field.validate()?;
    if field.is_empty() {
        return Err(Error::Empty("derivative field".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("fraction {fraction} not in (0, 1]")));
    }
    let norms = field.gradient_norms();
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut keep = order[..kept_count(norms.len(), fraction)].to_vec();
    keep.sort_unstable();
    field.select(&keep)
}

/// Isotropic TV `sum sqrt(dx^2 + dy^2 + eps) - sqrt(eps)` over forward
/// differences, per channel.
pub fn total_variation(img: &ImageGrid) -> f64 {
    let (h, w, c) = (img.height, img.width, img.channels);
    let v = |i: usize, j: usize, k: usize| img.data()[(i * w + j) * c + k] as f64;
    let mut tv = 0.0;
    for i in 0..h.saturating_sub(1) {
        for j in 0..w.saturating_sub(1) {
            for k in 0..c {
                let dx = v(i, j + 1, k) - v(i, j, k);
                let dy = v(i + 1, j, k) - v(i, j, k);
                tv += (dx * dx + dy * dy + TV_EPS).sqrt() - TV_EPS.sqrt();
            }
        }
    }
    tv
}

/// Tape version of [`total_variation`] for `[B, H, W, C]` input.
pub fn tv_tape(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[1] < 2 || s[2] < 2 {
        return Err(Error::Shape(format!("tv needs [B, H>=2, W>=2, C], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let right = tape.slice(x, 2, 1, w - 1)?;
    let left = tape.slice(x, 2, 0, w - 1)?;
    let dx = tape.sub(right, left)?;
    let dx = tape.slice(dx, 1, 0, h - 1)?;
    let down = tape.slice(x, 1, 1, h - 1)?;
    let up = tape.slice(x, 1, 0, h - 1)?;
    let dy = tape.sub(down, up)?;
    let dy = tape.slice(dy, 2, 0, w - 1)?;
    let dx2 = tape.mul(dx, dx)?;
    let dy2 = tape.mul(dy, dy)?;
    let m = tape.add(dx2, dy2)?;
    let m = tape.add_scalar(m, TV_EPS as f32);
    let r = tape.sqrt(m);
    let r = tape.add_scalar(r, -(TV_EPS.sqrt() as f32));
    Ok(tape.sum(r))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Want {
    Value,
    Z,
    Decoder,
}

struct ObjectiveValue {
    total: f64,
    z_grad: Option<Tensor>,
    decoder_grad: Option<Vec<Tensor>>,
}

enum Data<'a> {
    Gradients(&'a DerivativeField),
    Ct { op: RadonOperator, sino: &'a Sinogram },
}

/// FunkNN outputs on one chunk of queries. `seed` maps the outputs to a
/// loss and per-output cotangents; when `with_grad`, the image gradient of
/// `sum(cotangent * output)` is returned as well.
fn run_chunk<F>(
    model: &FunkNN,
    image: &Tensor,
    dims: ImageDims,
    queries: &[PatchQuery],
    order: DerivativeOrder,
    with_grad: bool,
    mut seed: F,
) -> Result<(f64, Option<Vec<f32>>)>
where
    F: FnMut(&[&[f32]]) -> (f64, Vec<Vec<f32>>),
{
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let img = tape.leaf(image.clone(), with_grad);
    let ev = model.apply(&mut tape, &vars, img, &[dims], queries, order)?;
    let outs: Vec<Var> = match order {
        DerivativeOrder::None => vec![ev.values],
        _ => vec![ev.dx.expect("first order"), ev.dy.expect("first order")],
    };
    let values: Vec<&[f32]> = outs.iter().map(|&v| tape.value(v).data()).collect();
    let (loss, cot) = seed(&values);
    if !with_grad {
        return Ok((loss, None));
    }
    let mut root: Option<Var> = None;
    for (&out, c) in outs.iter().zip(cot) {
        let shape = tape.shape(out).to_vec();
        let cv = tape.constant(Tensor::new(&shape, c)?);
        let prod = tape.mul(out, cv)?;
        let s = tape.sum(prod);
        root = Some(match root {
            Some(r) => tape.add(r, s)?,
            None => s,
        });
    }
    tape.backward(root.expect("at least one output"))?;
    let g = tape
        .take_grad(img)
        .unwrap_or_else(|| Tensor::zeros(image.shape()))
        .into_data();
    Ok((loss, Some(g)))
}

fn sum_chunks(parts: Vec<(f64, Option<Vec<f32>>)>, len: usize, with_grad: bool) -> (f64, Option<Vec<f32>>) {
    let mut loss = 0.0;
    let mut grad = if with_grad { Some(vec![0.0f32; len]) } else { None };
    for (l, g) in parts {
        loss += l;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    (loss, grad)
}

struct Objective<'a> {
    prior: &'a Prior,
    model: &'a FunkNN,
    data: Data<'a>,
    lambda: f64,
    lambda2: f64,
    n: usize,
}

impl Objective<'_> {
    fn dims(&self) -> ImageDims {
        let d = self.prior.ae.cfg.image;
        ImageDims { height: d, width: d }
    }

    /// Data term and its gradient with respect to the flattened low-res
    /// image `[d*d, C]`.
    fn data_term(&self, image: &Tensor, with_grad: bool) -> Result<(f64, Option<Vec<f32>>)> {
        let dims = self.dims();
        let model = self.model;
        let c = model.channels();
        match &self.data {
            Data::Gradients(field) => {
                let queries: Vec<PatchQuery> =
                    field.coords.iter().map(|&coord| PatchQuery { image: 0, coord }).collect();
                let targets = field.gradients.data();
                let parts = queries
                    .par_chunks(SOLVE_CHUNK)
                    .enumerate()
                    .map(|(k, chunk)| {
                        let start = k * SOLVE_CHUNK;
                        run_chunk(model, image, dims, chunk, DerivativeOrder::First, with_grad, |outs| {
                            let (dx, dy) = (outs[0], outs[1]);
                            let mut loss = 0.0f64;
                            let mut gx = vec![0.0f32; dx.len()];
                            let mut gy = vec![0.0f32; dy.len()];
                            for q in 0..chunk.len() {
                                let t = &targets[(start + q) * 2 * c..(start + q + 1) * 2 * c];
                                for ch in 0..c {
                                    let ex = dx[q * c + ch] as f64 - t[ch] as f64;
                                    let ey = dy[q * c + ch] as f64 - t[c + ch] as f64;
                                    loss += ex * ex + ey * ey;
                                    gx[q * c + ch] = (2.0 * ex) as f32;
                                    gy[q * c + ch] = (2.0 * ey) as f32;
                                }
                            }
                            (loss, vec![gx, gy])
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(sum_chunks(parts, image.len(), with_grad))
            }
            Data::Ct { op, sino } => {
                let coords = sampler::pixel_centers(self.n, self.n);
                let queries: Vec<PatchQuery> =
                    coords.iter().map(|&coord| PatchQuery { image: 0, coord }).collect();
                let values: Vec<f32> = queries
                    .par_chunks(SOLVE_CHUNK)
                    .map(|chunk| {
                        let mut out = Vec::new();
                        run_chunk(model, image, dims, chunk, DerivativeOrder::None, false, |o| {
                            out = o[0].to_vec();
                            (0.0, Vec::new())
                        })?;
                        Ok(out)
                    })
                    .collect::<Result<Vec<_>>>()?
                    .concat();
                let projected = op.map.matvec(&values, 1);
                let mut loss = 0.0f64;
                let mut resid = Vec::with_capacity(projected.len());
                for (p, v) in projected.iter().zip(sino.values.data()) {
                    let r = *p as f64 - *v as f64;
                    loss += r * r;
                    resid.push((2.0 * r) as f32);
                }
                if !with_grad {
                    return Ok((loss, None));
                }
                let cot = op.map.matvec_transpose(&resid, 1);
                let parts = queries
                    .par_chunks(SOLVE_CHUNK)
                    .enumerate()
                    .map(|(k, chunk)| {
                        let g = &cot[k * SOLVE_CHUNK..k * SOLVE_CHUNK + chunk.len()];
                        run_chunk(model, image, dims, chunk, DerivativeOrder::None, true, |_| {
                            (0.0, vec![g.to_vec()])
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (_, grad) = sum_chunks(parts, image.len(), true);
                Ok((loss, grad))
            }
        }
    }

    fn evaluate(&self, z: &Tensor, decoder: &ParamSet, want: Want) -> Result<ObjectiveValue> {
        let mut tape = Tape::new();
        let flow_vars = self.prior.flow.params.register(&mut tape, false);
        let dec_vars = decoder.register(&mut tape, want == Want::Decoder);
        let zv = tape.leaf(z.clone(), want == Want::Z);
        let x = self.prior.generate_tape(&mut tape, &flow_vars, &dec_vars, zv)?;
        let d = self.prior.ae.cfg.image;
        let c = self.prior.ae.cfg.channels;
        let flat = tape.reshape(x, &[d * d, c])?;
        let image = tape.value(flat).clone();
        if !image.all_finite() {
            return Err(Error::NonFinite("generator output".into()));
        }
        let (data, grad) = self.data_term(&image, want != Want::Value)?;
        let mut total = data;
        let mut root: Option<Var> = None;
        if let Some(g) = grad {
            let gv = tape.constant(Tensor::new(&[d * d, c], g)?);
            let prod = tape.mul(flat, gv)?;
            root = Some(tape.sum(prod));
        }
        let mut add_root = |tape: &mut Tape, term: Var| -> Result<()> {
            root = Some(match root {
                Some(r) => tape.add(r, term)?,
                None => term,
            });
            Ok(())
        };
        if self.lambda > 0.0 {
            total += self.lambda * z.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            let zz = tape.sum_squares(zv)?;
            let zz = tape.scale(zz, self.lambda as f32);
            add_root(&mut tape, zz)?;
        }
        if self.lambda2 > 0.0 {
            let low = ImageGrid::new(d, d, c, image.data().to_vec())?;
            total += self.lambda2 * total_variation(&low);
            let tv = tv_tape(&mut tape, x)?;
            let tv = tape.scale(tv, self.lambda2 as f32);
            add_root(&mut tape, tv)?;
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("solver objective".into()));
        }
        if want == Want::Value {
            return Ok(ObjectiveValue {
                total,
                z_grad: None,
                decoder_grad: None,
            });
        }
        let root = root.expect("gradient requested");
        tape.backward(root)?;
        let mut out = ObjectiveValue {
            total,
            z_grad: None,
            decoder_grad: None,
        };
        match want {
            Want::Z => out.z_grad = Some(tape.take_grad(zv).unwrap_or_else(|| Tensor::zeros(z.shape()))),
            Want::Decoder => {
                out.decoder_grad = Some(
                    dec_vars
                        .iter()
                        .map(|&v| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
                        .collect(),
                )
            }
            Want::Value => unreachable!(),
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveTraceRow {
    /// 1 = latent optimization, 2 = decoder fine-tuning.
    pub phase: u8,
    pub step: usize,
    pub objective: f64,
    pub best: f64,
}

pub fn solve_trace_csv(rows: &[SolveTraceRow]) -> String {
    let mut s = String::from("phase,step,objective,best\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.phase, r.step, r.objective, r.best));
    }
    s
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    /// Best latent, `[L]`.
    pub z: Tensor,
    /// Prior with the fine-tuned decoder.
    pub prior: Prior,
    /// `G(z)` at the prior resolution.
    pub low_res: ImageGrid,
    /// `FunkNN(x, G(z))` on the output grid.
    pub image: ImageGrid,
    pub objective: f64,
    pub trace: Vec<SolveTraceRow>,
}

fn run_solver(obj: &Objective, cfg: &SolveConfig) -> Result<SolveOutcome> {
    cfg.validate()?;
    let l = obj.prior.latent();
    let mut z = Tensor::zeros(&[1, l]);
    let mut decoder = obj.prior.ae.decoder.clone();
    let mut trace = Vec::new();
    let mut best = f64::INFINITY;
    let mut best_z = z.clone();
    let steps = cfg.z_steps();
    let mut adam = AdamState::new(std::slice::from_ref(&z), cfg.lr_z);
    for step in 0..=steps {
        let want = if step < steps { Want::Z } else { Want::Value };
        let ev = obj.evaluate(&z, &decoder, want)?;
        if ev.total < best {
            best = ev.total;
            best_z = z.clone();
        }
        trace.push(SolveTraceRow {
            phase: 1,
            step,
            objective: ev.total,
            best,
        });
        if step % 100 == 0 {
            log::info!("solve z step {step}: objective {:.6e}", ev.total);
        }
        if let Some(g) = ev.z_grad {
            adam_step(std::slice::from_mut(&mut z), &[g], &mut adam)?;
        }
    }

    let z = best_z;
    let mut best_decoder = decoder.clone();
    let steps = cfg.finetune_steps();
    for step in 0..=steps {
        if steps == 0 {
            break;
        }
        let want = if step < steps { Want::Decoder } else { Want::Value };
        let ev = obj.evaluate(&z, &decoder, want)?;
        if ev.total < best {
            best = ev.total;
            best_decoder = decoder.clone();
        }
        trace.push(SolveTraceRow {
            phase: 2,
            step,
            objective: ev.total,
            best,
        });
        if step % 100 == 0 {
            log::info!("solve finetune step {step}: objective {:.6e}", ev.total);
        }
        if let Some(grads) = ev.decoder_grad {
            for (p, g) in decoder.tensors.iter_mut().zip(&grads) {
                p.add_assign(&g.scaled(-cfg.lr_finetune));
            }
        }
    }

    let mut prior = obj.prior.clone();
    prior.ae.decoder = best_decoder;
    let low_res = prior.generate(&z)?;
    let image = obj.model.render(&low_res, obj.n, obj.n)?;
    Ok(SolveOutcome {
        z: z.reshape(&[l])?,
        prior,
        low_res,
        image,
        objective: best,
        trace,
    })
}

fn check_compat(prior: &Prior, model: &FunkNN) -> Result<()> {
    if prior.ae.cfg.channels != model.channels() {
        return Err(Error::Shape(format!(
            "prior has {} channels, FunkNN {}",
            prior.ae.cfg.channels,
            model.channels()
        )));
    }
    Ok(())
}

fn output_size(cfg: &SolveConfig, prior: &Prior, field: Option<&DerivativeField>) -> usize {
    cfg.output_size
        .or_else(|| field.and_then(|f| f.grid).map(|g| g.height.max(g.width)))
        .unwrap_or(2 * prior.ae.cfg.image)
}

/// Latent fit to a dense derivative field, then decoder fine-tuning.
pub fn solve_gradient_inversion(
    obs: &DerivativeField,
    prior: &Prior,
    model: &FunkNN,
    cfg: &SolveConfig,
) -> Result<SolveOutcome> {
    solve_derivatives(obs, prior, model, cfg, 0.0)
}

/// As [`solve_gradient_inversion`] with an added TV penalty on `G(z)`.
pub fn solve_sparse_gradient(
    obs: &DerivativeField,
    prior: &Prior,
    model: &FunkNN,
    cfg: &SolveConfig,
) -> Result<SolveOutcome> {
    solve_derivatives(obs, prior, model, cfg, cfg.lambda2.unwrap_or(1e-2))
}

fn solve_derivatives(
    obs: &DerivativeField,
    prior: &Prior,
    model: &FunkNN,
    cfg: &SolveConfig,
    lambda2: f64,
) -> Result<SolveOutcome> {
    obs.validate()?;
    if obs.is_empty() {
        return Err(Error::Empty("derivative observations".into()));
    }
    check_compat(prior, model)?;
    if obs.channels() != model.channels() {
        return Err(Error::Shape(format!(
            "observations have {} channels, FunkNN {}",
            obs.channels(),
            model.channels()
        )));
    }
    let obj = Objective {
        prior,
        model,
        data: Data::Gradients(obs),
        lambda: cfg.lambda,
        lambda2,
        n: output_size(cfg, prior, Some(obs)),
    };
    run_solver(&obj, cfg)
}

/// Latent fit of the FunkNN output on the `n x n` grid to a sinogram.
pub fn solve_limited_ct(sino: &Sinogram, prior: &Prior, model: &FunkNN, cfg: &SolveConfig) -> Result<SolveOutcome> {
    check_compat(prior, model)?;
    if model.channels() != 1 {
        return Err(Error::Shape("CT needs a single-channel model".into()));
    }
    let n = sino.geometry.n;
    if cfg.output_size.is_some_and(|s| s != n) {
        return Err(Error::Shape(format!(
            "output size {:?} does not match the sinogram grid {n}",
            cfg.output_size
        )));
    }
    let op = RadonOperator::new(n, &sino.angles)?;
    if op.geometry != sino.geometry || sino.values.shape() != [sino.angles.len(), op.geometry.n_det] {
        return Err(Error::Shape("sinogram geometry does not match its grid".into()));
    }
    let obj = Objective {
        prior,
        model,
        data: Data::Ct { op, sino },
        lambda: cfg.lambda,
        lambda2: 0.0,
        n,
    };
    run_solver(&obj, cfg)
}

/// Objective value at a given latent; used for checks and reporting.
pub fn objective_at(
    problem: Problem,
    obs: Option<&DerivativeField>,
    sino: Option<&Sinogram>,
    prior: &Prior,
    model: &FunkNN,
    cfg: &SolveConfig,
    z: &Tensor,
) -> Result<(f64, Tensor)> {
    let l = prior.latent();
    let z = z.clone().reshape(&[1, l])?;
    let (data, n) = match problem {
        Problem::Ct => {
            let sino = sino.ok_or_else(|| Error::Invalid("ct objective needs a sinogram".into()))?;
            (
                Data::Ct {
                    op: RadonOperator::new(sino.geometry.n, &sino.angles)?,
                    sino,
                },
                sino.geometry.n,
            )
        }
        _ => {
            let obs = obs.ok_or_else(|| Error::Invalid("derivative objective needs observations".into()))?;
            (Data::Gradients(obs), output_size(cfg, prior, Some(obs)))
        }
    };
    let obj = Objective {
        prior,
        model,
        data,
        lambda: cfg.lambda,
        lambda2: cfg.lambda2(),
        n,
    };
    let ev = obj.evaluate(&z, &prior.ae.decoder, Want::Z)?;
    Ok((ev.total, ev.z_grad.expect("z gradient").reshape(&[l])?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PixelTvConfig {
    pub lambda2: f64,
    pub steps: usize,
    pub lr: f32,
}

impl Default for PixelTvConfig {
    fn default() -> Self {
        Self {
            lambda2: 1e-2,
            steps: 2000,
            lr: 1e-2,
        }
    }
}

/// Prior-free baseline: an `n x n` pixel image whose bicubic interpolant's
/// gradients fit `obs`, regularized by TV, optimized by Adam from zero.
pub fn solve_pixel_tv(obs: &DerivativeField, n: usize, cfg: &PixelTvConfig) -> Result<(ImageGrid, Vec<f64>)> {
    obs.validate()?;
    if obs.is_empty() {
        return Err(Error::Empty("derivative observations".into()));
    }
    let c = obs.channels();
    let dims = [ImageDims { height: n, width: n }];
    let queries: Vec<PatchQuery> = obs.coords.iter().map(|&coord| PatchQuery { image: 0, coord }).collect();
    let spec = PatchSpec {
        p: 1,
        ..PatchSpec::default()
    };
    let dx_map = sampler::patch_map(&dims, &queries, &spec, PatchKind::Dx)?;
    let dy_map = sampler::patch_map(&dims, &queries, &spec, PatchKind::Dy)?;
    let mut tx = Vec::with_capacity(queries.len() * c);
    let mut ty = Vec::with_capacity(queries.len() * c);
    for g in obs.gradients.data().chunks(2 * c) {
        tx.extend_from_slice(&g[..c]);
        ty.extend_from_slice(&g[c..]);
    }
    let tx = Tensor::new(&[queries.len(), c], tx)?;
    let ty = Tensor::new(&[queries.len(), c], ty)?;
    let mut u = vec![Tensor::zeros(&[n * n, c])];
    let mut adam = AdamState::new(&u, cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let uv = tape.param(u[0].clone());
        let gx = tape.sparse(uv, &[], dx_map.clone())?;
        let gy = tape.sparse(uv, &[], dy_map.clone())?;
        let txv = tape.constant(tx.clone());
        let tyv = tape.constant(ty.clone());
        let ex = tape.sub(gx, txv)?;
        let ey = tape.sub(gy, tyv)?;
        let lx = tape.sum_squares(ex)?;
        let ly = tape.sum_squares(ey)?;
        let mut loss = tape.add(lx, ly)?;
        if cfg.lambda2 > 0.0 {
            let img = tape.reshape(uv, &[1, n, n, c])?;
            let tv = tv_tape(&mut tape, img)?;
            let tv = tape.scale(tv, cfg.lambda2 as f32);
            loss = tape.add(loss, tv)?;
        }
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite("pixel baseline objective".into()));
        }
        trace.push(value);
        tape.backward(loss)?;
        let g = tape.take_grad(uv).unwrap_or_else(|| Tensor::zeros(&[n * n, c]));
        adam_step(&mut u, &[g], &mut adam)?;
    }
    let img = ImageGrid::new(n, n, c, u.remove(0).into_data())?;
    Ok((img, trace))
}
