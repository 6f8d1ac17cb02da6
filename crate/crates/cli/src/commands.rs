use std::path::Path;

use anyhow::{Context, Result};
use funknn_core::checkpoint::Checkpoint;
use funknn_core::data::{
    self, area_resize, bicubic_field, downsample, gaussian_image, load_dataset, load_image, save_png, save_raw,
    Dataset, DerivativeField,
};
use funknn_core::metrics::{self, bilinear_snr, si_snr, snr, DerivativeItem, MetricReport};
use funknn_core::model::FunkNN;
use funknn_core::prior::{self, train_ae, train_flow, Prior};
use funknn_core::radon::{add_noise, angles_inclusive, fbp as run_fbp, radon_forward, Sinogram};
use funknn_core::sampler::ImageGrid;
use funknn_core::solvers::{self, solve_trace_csv, Problem};
use funknn_core::training::{self, hierarchical_superres, Mode};
use funknn_core::Error as CoreError;
use serde_json::json;

use crate::config::{write_json, RunConfig};
use crate::Invalid;

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// Core errors that describe bad input rather than a failed computation.
fn classify(e: CoreError) -> anyhow::Error {
    match e {
        CoreError::Invalid(_) | CoreError::Shape(_) | CoreError::DegenerateImage { .. } | CoreError::Empty(_) => {
            invalid(e.to_string())
        }
        other => other.into(),
    }
}

fn out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(|e| invalid(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.apply_seed(s);
    }
    Ok(cfg)
}

fn validated(cfg: &RunConfig) -> Result<()> {
    cfg.validate().map_err(|e| invalid(format!("{e:#}")))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.path {
        Some(p) => load_dataset(p).with_context(|| format!("loading dataset {}", p.display())),
        None => data::generate_dataset(&cfg.data.kind, cfg.data.n, cfg.data.count, cfg.data.test, cfg.data.seed)
            .map_err(classify),
    }
}

fn save_image(cfg: &RunConfig, dir: &Path, stem: &str, img: &ImageGrid) -> Result<()> {
    if cfg.output.png {
        save_png(&dir.join(format!("{stem}.png")), img)?;
    }
    if cfg.output.raw {
        save_raw(&dir.join(format!("{stem}.f32")), img)?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_funknn(path: &Path) -> Result<FunkNN> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(FunkNN::from_checkpoint(&ck)?)
}

fn load_prior(path: &Path) -> Result<Prior> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading prior {}", path.display()))?;
    Ok(Prior::from_checkpoint(&ck)?)
}

pub fn gen_data(kind: &str, n: usize, count: usize, test: usize, seed: u64, out: &Path) -> Result<()> {
    let ds = data::generate_dataset(kind, n, count, test, seed).map_err(classify)?;
    out_dir(out)?;
    data::save_dataset(out, &ds)?;
    write_json(
        &out.join("config.json"),
        &json!({ "kind": kind, "n": n, "count": count, "test": test, "seed": seed }),
    )?;
    println!("wrote {count} {kind} images to {}", out.display());
    Ok(())
}

pub fn train(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    mode: Option<Mode>,
    steps: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    if let Some(m) = mode {
        cfg.funknn.mode = m;
    }
    if let Some(s) = steps {
        cfg.funknn.steps = s;
    }
    validated(&cfg)?;
    let ds = load_data(&cfg)?;
    if ds.manifest.resolution != cfg.funknn.n {
        return Err(invalid(format!(
            "dataset resolution {} does not match funknn.n {}",
            ds.manifest.resolution, cfg.funknn.n
        )));
    }
    out_dir(out)?;
    cfg.write(out)?;
    let outcome = training::train(&ds.train_images(), &cfg.funknn, None, Some(out)).map_err(classify)?;
    let final_loss = outcome.trace.last().map(|r| r.loss).unwrap_or(f64::NAN);
    write_json(
        &out.join("metrics.json"),
        &json!({ "steps": outcome.trace.len(), "final_loss": final_loss, "best_loss": outcome.best_loss }),
    )?;
    println!("final loss {final_loss:.6e} (best {:.6e})", outcome.best_loss);
    Ok(())
}

/// Images brought to the autoencoder's resolution by area averaging.
fn prior_images(images: &[ImageGrid], side: usize) -> Result<Vec<ImageGrid>> {
    images
        .iter()
        .map(|img| {
            if img.height == side && img.width == side {
                Ok(img.clone())
            } else if img.height % side == 0 && img.width == img.height {
                downsample(img, img.height / side)
            } else {
                area_resize(img, side, side)
            }
        })
        .collect::<std::result::Result<_, _>>()
        .map_err(classify)
}

pub fn train_prior(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    validated(&cfg)?;
    let ds = load_data(&cfg)?;
    let side = cfg.prior.autoencoder.image;
    let train_imgs = prior_images(&ds.train_images(), side)?;
    let test_imgs = prior_images(&ds.test_images(), side)?;
    out_dir(out)?;
    cfg.write(out)?;

    let (ae, ae_trace) = train_ae(&train_imgs, &cfg.prior.autoencoder, &cfg.prior.ae_train).map_err(classify)?;
    write_text(&out.join("ae_loss.csv"), &loss_csv(&ae_trace))?;
    let recon = |imgs: &[ImageGrid]| -> Result<Vec<f64>> {
        imgs.iter()
            .map(|x| Ok(snr(ae.reconstruct(x)?.data(), x.data())?))
            .collect()
    };
    let train_snr = MetricReport::new("recon_snr_db", recon(&train_imgs)?, json!({ "split": "train" }));
    let test_snr = MetricReport::new("recon_snr_db", recon(&test_imgs)?, json!({ "split": "test" }));

    let refs: Vec<&ImageGrid> = train_imgs.iter().collect();
    let latents = ae.encode_batch(&refs)?;
    let (flow, flow_trace) = train_flow(&latents, &cfg.prior.flow, &cfg.prior.flow_train).map_err(classify)?;
    write_text(&out.join("flow_loss.csv"), &loss_csv(&flow_trace))?;
    let nll = flow.nll(&latents)?;
    let prior = Prior { ae, flow };
    prior
        .to_checkpoint(json!({ "ae_train": cfg.prior.ae_train, "flow_train": cfg.prior.flow_train }))
        .save(&out.join("prior"))?;
    write_json(
        &out.join("metrics.json"),
        &json!({
            "recon_train": train_snr,
            "recon_test": test_snr,
            "ae_final_loss": ae_trace.last(),
            "flow_final_nll": flow_trace.last(),
            "flow_train_nll": nll,
        }),
    )?;
    println!(
        "autoencoder recon SNR train {:.2} dB, test {:.2} dB; flow NLL {nll:.4}",
        train_snr.mean, test_snr.mean
    );
    Ok(())
}

fn loss_csv(trace: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    s
}

pub fn superres(ckpt: &Path, input: &Path, scale: f64, levels: usize, out: &Path) -> Result<()> {
    if levels == 0 {
        return Err(invalid("--levels must be at least 1"));
    }
    let model = load_funknn(ckpt)?;
    let img = load_image(input)?;
    let outputs = hierarchical_superres(&model, &img, scale, levels).map_err(classify)?;
    out_dir(out)?;
    let mut sizes = Vec::new();
    for (level, im) in outputs.iter().enumerate().skip(1) {
        save_png(&out.join(format!("level_{level}.png")), im)?;
        save_raw(&out.join(format!("level_{level}.f32")), im)?;
        sizes.push([im.height, im.width]);
        println!("level {level}: {}x{}", im.height, im.width);
    }
    write_json(
        &out.join("config.json"),
        &json!({ "ckpt": ckpt, "input": input, "scale": scale, "levels": levels }),
    )?;
    write_json(&out.join("metrics.json"), &json!({ "sizes": sizes }))
}

/// Tiles images into a near-square grid.
fn tile(images: &[ImageGrid]) -> Result<ImageGrid> {
    let (h, w, c) = (images[0].height, images[0].width, images[0].channels);
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let width = cols * w;
    let mut data = vec![0.0f32; rows * h * width * c];
    for (k, img) in images.iter().enumerate() {
        let (r, q) = (k / cols, k % cols);
        for i in 0..h {
            let dst = ((r * h + i) * width + q * w) * c;
            let src = i * w * c;
            data[dst..dst + w * c].copy_from_slice(&img.data()[src..src + w * c]);
        }
    }
    Ok(ImageGrid::new(rows * h, width, c, data)?)
}

pub fn sample(prior_path: &Path, count: usize, seed: u64, out: &Path) -> Result<()> {
    if count == 0 {
        return Err(invalid("--count must be at least 1"));
    }
    let p = load_prior(prior_path)?;
    let images = prior::sample(&p, count, seed)?;
    out_dir(out)?;
    for (i, img) in images.iter().enumerate() {
        save_png(&out.join(format!("sample_{i:03}.png")), img)?;
    }
    save_png(&out.join("grid.png"), &tile(&images)?)?;
    write_json(
        &out.join("config.json"),
        &json!({ "prior": prior_path, "count": count, "seed": seed }),
    )?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let bad = || invalid(format!("angle range '{s}' must look like lo:hi in degrees"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo <= hi) {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn simulate_sinogram(img: &ImageGrid, range_deg: (f64, f64), views: usize, snr_db: Option<f64>, seed: u64) -> Result<Sinogram> {
    if views == 0 {
        return Err(invalid("at least one view is needed"));
    }
    if img.height != img.width || img.channels != 1 {
        return Err(invalid(format!(
            "CT needs a square single-channel image, got {}x{}x{}",
            img.height, img.width, img.channels
        )));
    }
    let angles = angles_inclusive(range_deg.0.to_radians(), range_deg.1.to_radians(), views);
    let sino = radon_forward(img, &angles).map_err(classify)?;
    match snr_db {
        Some(s) => add_noise(&sino, s, seed).map_err(classify),
        None => Ok(sino),
    }
}

pub fn radon(input: &Path, range: &str, views: usize, snr_db: Option<f64>, seed: u64, out: &Path) -> Result<()> {
    let range = parse_range(range)?;
    let img = load_image(input)?;
    let sino = simulate_sinogram(&img, range, views, snr_db, seed)?;
    out_dir(out)?;
    sino.save(&out.join("sinogram.f32"))?;
    write_json(
        &out.join("config.json"),
        &json!({ "input": input, "angles_range_deg": [range.0, range.1], "views": views, "snr_db": snr_db, "seed": seed }),
    )?;
    println!("wrote {} views x {} detectors", sino.views(), sino.geometry.n_det);
    Ok(())
}

pub fn fbp(sino_path: &Path, out: &Path) -> Result<()> {
    let sino = Sinogram::load(sino_path).with_context(|| format!("loading sinogram {}", sino_path.display()))?;
    let img = run_fbp(&sino).map_err(classify)?;
    out_dir(out)?;
    save_png(&out.join("fbp.png"), &img.clamped(0.0, 1.0))?;
    save_raw(&out.join("fbp.f32"), &img)?;
    write_json(&out.join("config.json"), &json!({ "sino": sino_path }))
}

struct Observation {
    field: Option<DerivativeField>,
    sino: Option<Sinogram>,
    target: Option<ImageGrid>,
}

fn observe(cfg: &RunConfig, n_default: usize) -> Result<Observation> {
    let s = &cfg.solver;
    let target = s.target.as_deref().map(load_image).transpose()?;
    match s.problem {
        Problem::Ct => {
            let sino = match (&s.sinogram, &target) {
                (Some(p), _) => Sinogram::load(p).with_context(|| format!("loading sinogram {}", p.display()))?,
                (None, Some(t)) => {
                    let range = (s.angle_range_deg[0], s.angle_range_deg[1]);
                    simulate_sinogram(t, range, s.views, Some(s.snr_db).filter(|v| v.is_finite()), s.seed)?
                }
                (None, None) => return Err(invalid("ct needs solver.sinogram or solver.target")),
            };
            Ok(Observation {
                field: None,
                sino: Some(sino),
                target,
            })
        }
        Problem::Grad | Problem::SparseGrad => {
            let (field, target) = match (&s.gaussian, target) {
                (Some(g), _) => {
                    g.validate().map_err(classify)?;
                    let n = s.output_size.unwrap_or(n_default);
                    let (img, field) = gaussian_image(g, n).map_err(classify)?;
                    (field, Some(img))
                }
                (None, Some(t)) => (bicubic_field(&t).map_err(classify)?, Some(t)),
                (None, None) => return Err(invalid("derivative problems need solver.gaussian or solver.target")),
            };
            let field = if s.problem == Problem::SparseGrad {
                solvers::select_top_gradients(&field, s.fraction).map_err(classify)?
            } else {
                field
            };
            Ok(Observation {
                field: Some(field),
                sino: None,
                target,
            })
        }
    }
}

pub fn solve(config: Option<&Path>, out: &Path, seed: Option<u64>, problem: Option<Problem>) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    if let Some(p) = problem {
        cfg.solver.problem = p;
    }
    let resolved = cfg.solver.solve_config();
    cfg.solver.z_steps = Some(resolved.z_steps());
    cfg.solver.finetune_steps = Some(resolved.finetune_steps());
    cfg.solver.lambda2 = Some(resolved.lambda2());
    validated(&cfg)?;
    let s = &cfg.solver;
    let funknn_path = s
        .funknn_checkpoint
        .as_deref()
        .ok_or_else(|| invalid("solver.funknn_checkpoint is required"))?;
    let prior_path = s
        .prior_checkpoint
        .as_deref()
        .ok_or_else(|| invalid("solver.prior_checkpoint is required"))?;
    let model = load_funknn(funknn_path)?;
    let prior = load_prior(prior_path)?;
    let n_default = 2 * prior.ae.cfg.image;
    let obs = observe(&cfg, n_default)?;
    let scfg = s.solve_config();

    out_dir(out)?;
    cfg.write(out)?;
    let outcome = match (scfg.problem, &obs.field, &obs.sino) {
        (Problem::Grad, Some(f), _) => solvers::solve_gradient_inversion(f, &prior, &model, &scfg),
        (Problem::SparseGrad, Some(f), _) => solvers::solve_sparse_gradient(f, &prior, &model, &scfg),
        (Problem::Ct, _, Some(sino)) => solvers::solve_limited_ct(sino, &prior, &model, &scfg),
        _ => unreachable!("observation matches the problem"),
    }
    .map_err(classify)?;

    save_image(&cfg, out, "reconstruction", &outcome.image)?;
    write_text(&out.join("trace.csv"), &solve_trace_csv(&outcome.trace))?;
    let mut metrics = serde_json::Map::new();
    metrics.insert("objective".into(), json!(outcome.objective));
    metrics.insert("z".into(), json!(outcome.z.data()));
    if let Some(t) = &obs.target {
        check_same_grid(t, &outcome.image)?;
        metrics.insert("snr_db".into(), json!(snr(outcome.image.data(), t.data())?));
        metrics.insert("si_snr_db".into(), json!(si_snr(outcome.image.data(), t.data())?));
    }
    if let Some(sino) = &obs.sino {
        let f = run_fbp(sino)?;
        save_image(&cfg, out, "fbp", &f)?;
        if let Some(t) = &obs.target {
            check_same_grid(t, &f)?;
            metrics.insert("fbp_si_snr_db".into(), json!(si_snr(f.data(), t.data())?));
        }
    }
    if let (Some(b), Some(field)) = (&s.baseline, &obs.field) {
        let (img, _) = solvers::solve_pixel_tv(field, outcome.image.height, b).map_err(classify)?;
        save_image(&cfg, out, "baseline", &img)?;
        if let Some(t) = &obs.target {
            metrics.insert("baseline_si_snr_db".into(), json!(si_snr(img.data(), t.data())?));
        }
    }
    let report = json!({ "problem": scfg.problem, "config": cfg, "metrics": metrics });
    write_json(&out.join("report.json"), &report)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    for (k, v) in &metrics {
        if k != "z" {
            println!("{k}: {v}");
        }
    }
    Ok(())
}

fn check_same_grid(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(invalid(format!(
            "target is {}x{}x{} but the reconstruction is {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    Ok(())
}

fn eval_config(ckpt: &Path, data: &Path, factor: usize, levels: usize) -> serde_json::Value {
    json!({ "ckpt": ckpt, "data": data, "factor": factor, "levels": levels })
}

fn write_reports(out: &Path, reports: &[&MetricReport], cfg: serde_json::Value) -> Result<()> {
    out_dir(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    for r in reports {
        write_text(&out.join(format!("{}.csv", r.metric)), &r.to_csv())?;
        println!("{}: mean {:.3}", r.metric, r.mean);
    }
    let all: serde_json::Map<String, serde_json::Value> = reports
        .iter()
        .map(|r| (r.metric.clone(), serde_json::to_value(r).expect("serializable")))
        .collect();
    write_json(&out.join("metrics.json"), &all)
}

pub fn eval_superres(ckpt: &Path, data_dir: &Path, factor: usize, levels: usize, out: &Path) -> Result<()> {
    if factor < 2 || levels == 0 {
        return Err(invalid("--factor must be at least 2 and --levels at least 1"));
    }
    let model = load_funknn(ckpt)?;
    let ds = load_dataset(data_dir)?;
    let test = ds.test_images();
    if test.is_empty() {
        return Err(invalid("dataset has an empty test split"));
    }
    let mut reports = Vec::new();
    for level in 1..=levels {
        let f = factor.pow(level as u32);
        let mut ours = Vec::new();
        let mut bil = Vec::new();
        for hr in &test {
            let lr = downsample(hr, f).map_err(classify)?;
            let up = hierarchical_superres(&model, &lr, factor as f64, level).map_err(classify)?;
            ours.push(snr(up.last().expect("levels >= 1").data(), hr.data())?);
            bil.push(bilinear_snr(&lr, hr)?);
        }
        let meta = json!({ "factor": f });
        reports.push(MetricReport::new(format!("funknn_snr_db_x{f}"), ours, meta.clone()));
        reports.push(MetricReport::new(format!("bilinear_snr_db_x{f}"), bil, meta));
    }
    let refs: Vec<&MetricReport> = reports.iter().collect();
    write_reports(out, &refs, eval_config(ckpt, data_dir, factor, levels))
}

pub fn eval_derivatives(ckpt: &Path, data_dir: &Path, factor: usize, out: &Path) -> Result<()> {
    let model = load_funknn(ckpt)?;
    let ds = load_dataset(data_dir)?;
    let mut items = Vec::new();
    for &i in &ds.manifest.splits.test {
        let hr = &ds.images[i];
        let lr = downsample(hr, factor).map_err(classify)?;
        let field = match &ds.manifest.items[i].gaussian {
            Some(g) => gaussian_image(g, hr.height).map_err(classify)?.1,
            None => bicubic_field(hr).map_err(classify)?,
        };
        items.push(DerivativeItem {
            low_res: lr,
            high_res: hr.clone(),
            field,
        });
    }
    if items.is_empty() {
        return Err(invalid("dataset has an empty test split"));
    }
    let r = metrics::derivative_report(&model, &items)?;
    write_reports(
        out,
        &[&r.image, &r.gradient, &r.laplacian],
        eval_config(ckpt, data_dir, factor, 1),
    )
}
