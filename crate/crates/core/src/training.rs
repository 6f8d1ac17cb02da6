//! Regression of FunkNN onto high-resolution pixel intensities under the
//! single, continuous and factor sampling regimes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::{area_resize, downsample};
use crate::error::{Error, Result};
use crate::model::{Architecture, DerivativeOrder, FunkNN};
use crate::optim::{adam_step, AdamState};
use crate::sampler::{self, ImageDims, ImageGrid, PatchQuery};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Single,
    Continuous,
    Factor,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Mode::Single),
            "continuous" => Ok(Mode::Continuous),
            "factor" => Ok(Mode::Factor),
            other => Err(Error::Invalid(format!(
                "unknown mode '{other}' (expected one of single|continuous|factor)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Training image resolution.
    pub n: usize,
    /// Low-res size for single mode; `n / 2` when absent.
    pub d: Option<usize>,
    pub d_min: usize,
    pub d_max: usize,
    /// Spacing of admissible low-res sizes in factor mode.
    pub d_step: usize,
    /// Factor-mode scale.
    pub s: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub pixels_per_batch: usize,
    pub images_per_batch: usize,
    pub lr: f32,
    pub steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Patches per tape when accumulating a step's gradient.
    pub micro_batch: usize,
    pub conv_width: usize,
    pub fc_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Factor,
            n: 64,
            d: None,
            d_min: 16,
            d_max: 32,
            d_step: 8,
            s: 2.0,
            s_min: 1.25,
            s_max: 4.0,
            pixels_per_batch: 512,
            images_per_batch: 64,
            lr: 1e-4,
            steps: 2000,
            seed: 0,
            checkpoint_every: 500,
            micro_batch: 512,
            conv_width: 64,
            fc_width: 64,
        }
    }
}

fn is_integral(v: f64) -> bool {
    (v - v.round()).abs() < 1e-9
}

impl TrainConfig {
    pub fn architecture(&self, channels: usize) -> Architecture {
        Architecture {
            conv_width: self.conv_width,
            fc_width: self.fc_width,
            ..Architecture::new(channels)
        }
    }

    pub fn single_d(&self) -> usize {
        self.d.unwrap_or(self.n / 2)
    }

    /// Admissible `(d, target size)` pairs in factor mode.
    pub fn factor_pairs(&self) -> Vec<(usize, usize)> {
        let step = self.d_step.max(1);
        (self.d_min..=self.d_max)
            .step_by(step)
            .filter_map(|d| {
                let t = d as f64 * self.s;
                (is_integral(t) && t.round() as usize <= self.n).then(|| (d, t.round() as usize))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.pixels_per_batch == 0 || self.images_per_batch == 0 {
            return Err(Error::Invalid("n and batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if self.micro_batch == 0 {
            return Err(Error::Invalid("micro_batch must be positive".into()));
        }
        match self.mode {
            Mode::Single => {
                let d = self.single_d();
                if d == 0 || d > self.n {
                    return Err(Error::Invalid(format!("single mode: d={d} not in 1..={}", self.n)));
                }
            }
            Mode::Continuous => {
                if !(self.s_min >= 1.0 && self.s_max >= self.s_min && self.s_max.is_finite()) {
                    return Err(Error::Invalid(format!(
                        "continuous mode: need 1 <= s_min <= s_max, got [{}, {}]",
                        self.s_min, self.s_max
                    )));
                }
                if (self.n as f64 / self.s_max).round() < 1.0 {
                    return Err(Error::Invalid("continuous mode: s_max leaves no low-res pixels".into()));
                }
            }
            Mode::Factor => {
                if !(self.s >= 1.0 && self.s.is_finite()) {
                    return Err(Error::Invalid(format!("factor mode: s={} must be >= 1", self.s)));
                }
                if self.factor_pairs().is_empty() {
                    return Err(Error::Invalid(format!(
                        "factor mode: no d in [{}, {}] step {} gives an integral d*s <= {}",
                        self.d_min, self.d_max, self.d_step, self.n
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One minibatch: low-res inputs, query points and high-res targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub low_res: Vec<ImageGrid>,
    pub queries: Vec<PatchQuery>,
    /// `[N, C]`.
    pub targets: Tensor,
    pub d: usize,
    pub s: f64,
    pub target_size: usize,
}

pub fn make_batch(dataset: &[ImageGrid], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    cfg.validate()?;
    let c = dataset[0].channels;
    for img in dataset {
        if img.height != cfg.n || img.width != cfg.n || img.channels != c {
            return Err(Error::Shape(format!(
                "dataset image {}x{}x{} does not match n={} with {c} channels",
                img.height, img.width, img.channels, cfg.n
            )));
        }
    }
    let (d, target_size) = match cfg.mode {
        Mode::Single => (cfg.single_d(), cfg.n),
        Mode::Continuous => {
            let (lo, hi) = (cfg.s_min.ln(), cfg.s_max.ln());
            let s = if hi > lo { rng.random_range(lo..hi).exp() } else { cfg.s_min };
            let d = ((cfg.n as f64 / s).round() as usize).clamp(1, cfg.n);
            (d, cfg.n)
        }
        Mode::Factor => {
            let pairs = cfg.factor_pairs();
            pairs[rng.random_range(0..pairs.len())]
        }
    };
    let mut low_res = Vec::with_capacity(cfg.images_per_batch);
    let mut queries = Vec::with_capacity(cfg.images_per_batch * cfg.pixels_per_batch);
    let mut targets = Vec::with_capacity(cfg.images_per_batch * cfg.pixels_per_batch * c);
    for b in 0..cfg.images_per_batch {
        let hr = &dataset[rng.random_range(0..dataset.len())];
        let target = if target_size == cfg.n {
            hr.clone()
        } else {
            area_resize(hr, target_size, target_size)?
        };
        let lr = if target_size % d == 0 {
            downsample(&target, target_size / d)?
        } else {
            area_resize(&target, d, d)?
        };
        for _ in 0..cfg.pixels_per_batch {
            let i = rng.random_range(0..target_size);
            let j = rng.random_range(0..target_size);
            queries.push(PatchQuery {
                image: b,
                coord: sampler::pixel_center(i, j, target_size, target_size),
            });
            for ch in 0..c {
                targets.push(target.get(i, j, ch));
            }
        }
        low_res.push(lr);
    }
    let n = queries.len();
    Ok(Batch {
        low_res,
        queries,
        targets: Tensor::new(&[n, c], targets)?,
        d,
        s: target_size as f64 / d as f64,
        target_size,
    })
}

fn stack_images(images: &[ImageGrid]) -> Result<(Tensor, Vec<ImageDims>)> {
    let c = images.first().map(|i| i.channels).unwrap_or(1);
    let mut data = Vec::new();
    let mut dims = Vec::with_capacity(images.len());
    for img in images {
        data.extend_from_slice(img.data());
        dims.push(ImageDims {
            height: img.height,
            width: img.width,
        });
    }
    let rows = data.len() / c;
    Ok((Tensor::new(&[rows, c], data)?, dims))
}

/// Mean squared residual of `model` on `batch` and, when `with_grad`, its
/// gradient in [`FunkNN::param_tensors`] order. Large batches are split into
/// `micro_batch`-sized tapes whose gradients are summed in a fixed order.
pub fn batch_loss(
    model: &FunkNN,
    batch: &Batch,
    micro_batch: usize,
    with_grad: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    let n = batch.queries.len();
    if n == 0 {
        return Err(Error::Empty("batch without queries".into()));
    }
    let c = model.channels();
    let (stack, dims) = stack_images(&batch.low_res)?;
    let total = (n * c) as f32;
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(micro_batch.max(1))
        .map(|s| (s, micro_batch.min(n - s)))
        .collect();
    let parts = chunks
        .par_iter()
        .map(|&(start, len)| -> Result<(f64, Option<Vec<Tensor>>)> {
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, with_grad);
            let image = tape.constant(stack.clone());
            let queries = &batch.queries[start..start + len];
            let ev = model.apply(&mut tape, &vars, image, &dims, queries, DerivativeOrder::None)?;
            let tgt = Tensor::new(&[len, c], batch.targets.data()[start * c..(start + len) * c].to_vec())?;
            let tv = tape.constant(tgt);
            let diff = tape.sub(ev.values, tv)?;
            let sq = tape.sum_squares(diff)?;
            let loss = tape.scale(sq, 1.0 / total);
            let value = tape.value(loss).item() as f64;
            if !with_grad {
                return Ok((value, None));
            }
            tape.backward(loss)?;
            let grads = vars
                .all()
                .into_iter()
                .map(|v| {
                    tape.take_grad(v)
                        .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
                })
                .collect();
            Ok((value, Some(grads)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for (l, g) in parts {
        loss += l;
        if let Some(g) = g {
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => {
                    for (x, y) in a.iter_mut().zip(&g) {
                        x.add_assign(y);
                    }
                }
            }
        }
    }
    Ok((loss, acc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f32,
    pub d: usize,
    pub s: f64,
    pub target: usize,
    pub residuals: usize,
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("step,loss,lr,d,s,target,residuals\n");
    for r in trace {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.loss, r.lr, r.d, r.s, r.target, r.residuals
        ));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: FunkNN,
    pub best: FunkNN,
    pub best_loss: f64,
    pub trace: Vec<TraceRow>,
}

/// Content hash used to put the dataset in a canonical order, so that the
/// batches drawn depend on the images and not on how they were listed.
fn image_hash(img: &ImageGrid) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in img.data() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

pub fn canonical_order(dataset: &[ImageGrid]) -> Vec<ImageGrid> {
    let mut keyed: Vec<(u64, usize)> = dataset.iter().enumerate().map(|(i, img)| (image_hash(img), i)).collect();
    keyed.sort();
    keyed.into_iter().map(|(_, i)| dataset[i].clone()).collect()
}

/// The generator for batch `step`: one stream of the global seed per step.
pub fn batch_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

fn training_meta(cfg: &TrainConfig, step: usize, loss: f64) -> serde_json::Value {
    serde_json::json!({ "train": cfg, "step": step, "loss": loss })
}

/// Adam on the mean squared residual. Checkpoints go to `out/step_NNNNNN`,
/// `out/best` and `out/final` when `out` is given.
pub fn train(
    dataset: &[ImageGrid],
    cfg: &TrainConfig,
    init: Option<FunkNN>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    let data = canonical_order(dataset);
    let mut model = match init {
        Some(m) => m,
        None => FunkNN::init(cfg.architecture(data[0].channels), cfg.seed)?,
    };
    let mut params = model.param_tensors();
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    for step in 0..cfg.steps {
        let mut rng = batch_rng(cfg.seed, step);
        let batch = make_batch(&data, cfg, &mut rng)?;
        let diverged = |model: &FunkNN| Error::Diverged {
            step,
            last_good: Some(Box::new(model.to_checkpoint(training_meta(cfg, step, f64::NAN)))),
        };
        let (loss, grads) = batch_loss(&model, &batch, cfg.micro_batch, true)?;
        let grads = grads.expect("gradients requested");
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(diverged(&model));
        }
        if loss < best_loss {
            best_loss = loss;
            best = model.clone();
        }
        trace.push(TraceRow {
            step,
            loss,
            lr: cfg.lr,
            d: batch.d,
            s: batch.s,
            target: batch.target_size,
            residuals: batch.queries.len(),
        });
        adam_step(&mut params, &grads, &mut adam)?;
        model.set_params(&params)?;
        // projection of the spacings feeds back into the optimizer's copy
        params = model.param_tensors();
        if !params.iter().all(Tensor::all_finite) {
            return Err(diverged(&best));
        }
        if step % 100 == 0 {
            log::info!("step {step}: loss {loss:.6e} (d={}, target={})", batch.d, batch.target_size);
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                model
                    .to_checkpoint(training_meta(cfg, step + 1, loss))
                    .save(&dir.join(format!("step_{:06}", step + 1)))?;
            }
        }
    }
    if let Some(dir) = out {
        let last = trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
        model.to_checkpoint(training_meta(cfg, cfg.steps, last)).save(&dir.join("final"))?;
        best.to_checkpoint(training_meta(cfg, cfg.steps, best_loss)).save(&dir.join("best"))?;
        let path = dir.join("loss.csv");
        std::fs::write(&path, trace_csv(&trace)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome {
        model,
        best,
        best_loss,
        trace,
    })
}

/// Training mode recorded in a FunkNN checkpoint, if any.
pub fn checkpoint_mode(ck: &Checkpoint) -> Option<(Mode, f64)> {
    let t = &ck.meta["info"]["train"];
    let mode: Mode = serde_json::from_value(t["mode"].clone()).ok()?;
    Some((mode, t["s"].as_f64().unwrap_or(f64::NAN)))
}

/// Repeated super-resolution by `s`: level `i` has side `s^i * d`.
pub fn hierarchical_superres(model: &FunkNN, img: &ImageGrid, s: f64, levels: usize) -> Result<Vec<ImageGrid>> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Invalid(format!("scale {s} must be positive")));
    }
    let mut sizes = Vec::with_capacity(levels);
    let (mut h, mut w) = (img.height as f64, img.width as f64);
    for level in 1..=levels {
        h *= s;
        w *= s;
        if !is_integral(h) || !is_integral(w) {
            return Err(Error::Invalid(format!(
                "level {level}: target size {h}x{w} is not an integer"
            )));
        }
        sizes.push((h.round() as usize, w.round() as usize));
    }
    let mut out = vec![img.clone()];
    for (h, w) in sizes {
        let next = model.render(out.last().expect("non-empty"), h, w)?;
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gaussian_image, gaussian_specs};

    fn gaussians(n: usize, count: usize) -> Vec<ImageGrid> {
        gaussian_specs(count, 3)
            .iter()
            .map(|g| gaussian_image(g, n).unwrap().0)
            .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            n: 32,
            d_min: 8,
            d_max: 16,
            d_step: 4,
            pixels_per_batch: 8,
            images_per_batch: 4,
            conv_width: 8,
            fc_width: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_mode_halves() {
        let ds = gaussians(64, 3);
        let cfg = TrainConfig {
            mode: Mode::Single,
            n: 64,
            images_per_batch: 5,
            pixels_per_batch: 3,
            ..TrainConfig::default()
        };
        let b = make_batch(&ds, &cfg, &mut batch_rng(1, 0)).unwrap();
        assert!(b.low_res.iter().all(|i| i.height == 32 && i.width == 32));
        assert_eq!(b.queries.len(), 15);
    }

    #[test]
    fn factor_pairs_follow_step() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.factor_pairs(), vec![(16, 32), (24, 48), (32, 64)]);
        let ds = gaussians(64, 2);
        for step in 0..30 {
            let b = make_batch(&ds, &cfg, &mut batch_rng(5, step)).unwrap();
            assert!(cfg.factor_pairs().contains(&(b.d, b.target_size)));
            assert!(b.low_res.iter().all(|i| i.height == b.d));
        }
    }

    #[test]
    fn continuous_scale_in_range() {
        let cfg = TrainConfig {
            mode: Mode::Continuous,
            images_per_batch: 1,
            pixels_per_batch: 1,
            ..TrainConfig::default()
        };
        let ds = gaussians(64, 1);
        for step in 0..50 {
            let b = make_batch(&ds, &cfg, &mut batch_rng(2, step)).unwrap();
            assert!((16..=51).contains(&b.d), "{}", b.d);
        }
    }

    #[test]
    fn batches_are_deterministic() {
        let ds = gaussians(32, 4);
        let cfg = small_cfg();
        let a = make_batch(&ds, &cfg, &mut batch_rng(9, 3)).unwrap();
        let b = make_batch(&ds, &cfg, &mut batch_rng(9, 3)).unwrap();
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.targets, b.targets);
    }

    #[test]
    fn inadmissible_configs() {
        let ds = gaussians(32, 1);
        let mut cfg = small_cfg();
        cfg.s = 3.5;
        cfg.d_min = 9;
        cfg.d_max = 9;
        assert!(make_batch(&ds, &cfg, &mut batch_rng(0, 0)).is_err());
        assert!(make_batch(&[], &small_cfg(), &mut batch_rng(0, 0)).is_err());
        assert!("diagonal".parse::<Mode>().is_err());
    }

    #[test]
    fn init_loss_is_bicubic_error() {
        let ds = gaussians(32, 3);
        let cfg = small_cfg();
        let model = FunkNN::init(cfg.architecture(1), 0).unwrap();
        let b = make_batch(&ds, &cfg, &mut batch_rng(4, 0)).unwrap();
        let (loss, _) = batch_loss(&model, &b, 5, false).unwrap();
        let mut expect = 0.0f64;
        for (q, t) in b.queries.iter().zip(b.targets.data()) {
            let v = sampler::sample_bicubic(&b.low_res[q.image], q.coord, 0).unwrap().value[0];
            expect += (v - *t as f64).powi(2);
        }
        expect /= b.queries.len() as f64;
        assert!((loss - expect).abs() < 1e-5 * expect, "{loss} vs {expect}");
    }

    #[test]
    fn bicubic_consistent_targets_give_zero_loss() {
        let ds = gaussians(16, 2);
        let model = FunkNN::init(small_cfg().architecture(1), 0).unwrap();
        let mut queries = Vec::new();
        let mut targets = Vec::new();
        for (b, img) in ds.iter().enumerate() {
            for coord in sampler::pixel_centers(32, 32).into_iter().step_by(7) {
                queries.push(PatchQuery { image: b, coord });
                targets.push(sampler::sample_bicubic(img, coord, 0).unwrap().value[0] as f32);
            }
        }
        let n = queries.len();
        let batch = Batch {
            low_res: ds,
            queries,
            targets: Tensor::new(&[n, 1], targets).unwrap(),
            d: 16,
            s: 2.0,
            target_size: 32,
        };
        let (loss, _) = batch_loss(&model, &batch, 64, false).unwrap();
        assert!(loss < 1e-10, "{loss}");
    }

    #[test]
    fn micro_batching_does_not_change_gradient() {
        let ds = gaussians(32, 3);
        let cfg = small_cfg();
        let model = FunkNN::init(cfg.architecture(1), 1).unwrap();
        let b = make_batch(&ds, &cfg, &mut batch_rng(1, 1)).unwrap();
        let (l1, g1) = batch_loss(&model, &b, 1000, true).unwrap();
        let (l2, g2) = batch_loss(&model, &b, 7, true).unwrap();
        assert!((l1 - l2).abs() < 1e-7);
        for (a, b) in g1.unwrap().iter().zip(&g2.unwrap()) {
            assert!(a.max_abs_diff(b) < 1e-5 * (1.0 + a.max_abs()));
        }
    }

    #[test]
    fn short_run_reduces_loss_and_is_order_invariant() {
        let ds = gaussians(32, 6);
        let cfg = TrainConfig {
            steps: 60,
            lr: 2e-3,
            images_per_batch: 6,
            pixels_per_batch: 16,
            ..small_cfg()
        };
        let a = train(&ds, &cfg, None, None).unwrap();
        let mut rev = ds.clone();
        rev.reverse();
        let b = train(&rev, &cfg, None, None).unwrap();
        let la: Vec<f64> = a.trace.iter().map(|r| r.loss).collect();
        let lb: Vec<f64> = b.trace.iter().map(|r| r.loss).collect();
        assert_eq!(la, lb);
        let head: f64 = la[..10].iter().sum();
        let tail: f64 = la[la.len() - 10..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
        assert!(a.trace.iter().all(|r| r.residuals == 96));
    }

    #[test]
    fn hierarchical_sizes() {
        let model = FunkNN::init(small_cfg().architecture(1), 0).unwrap();
        let img = gaussians(8, 1).remove(0);
        let out = hierarchical_superres(&model, &img, 2.0, 3).unwrap();
        let sizes: Vec<usize> = out.iter().map(|i| i.height).collect();
        assert_eq!(sizes, vec![8, 16, 32, 64]);
        assert_eq!(hierarchical_superres(&model, &img, 2.0, 0).unwrap(), vec![img.clone()]);
        assert_eq!(out[1], model.render(&img, 16, 16).unwrap());
        assert!(hierarchical_superres(&model, &img, 1.3, 1).is_err());
    }

    #[test]
    fn checkpoints_written() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gaussians(32, 2);
        let cfg = TrainConfig {
            steps: 4,
            checkpoint_every: 2,
            ..small_cfg()
        };
        let out = train(&ds, &cfg, None, Some(dir.path())).unwrap();
        for sub in ["step_000002", "step_000004", "final", "best"] {
            assert!(dir.path().join(sub).join("manifest.json").exists(), "{sub}");
        }
        let ck = Checkpoint::load(&dir.path().join("final")).unwrap();
        assert_eq!(FunkNN::from_checkpoint(&ck).unwrap(), out.model);
        assert_eq!(checkpoint_mode(&ck), Some((Mode::Factor, 2.0)));
    }
}
