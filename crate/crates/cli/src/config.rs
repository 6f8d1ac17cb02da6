use std::path::{Path, PathBuf};

use anyhow::Context;
use funknn_core::data::GaussianSpec;
use funknn_core::prior::{AeConfig, AeTrainConfig, FlowConfig, FlowTrainConfig};
use funknn_core::solvers::{PixelTvConfig, Problem, SolveConfig};
use funknn_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// The JSON run configuration. Missing keys take their defaults; unknown
/// keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub funknn: TrainConfig,
    pub prior: PriorSection,
    pub solver: SolverSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `gaussian` or `phantom`; ignored when `path` is set.
    pub kind: String,
    pub n: usize,
    pub count: usize,
    pub test: usize,
    pub seed: u64,
    /// A dataset directory written by `gen-data`.
    pub path: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: "phantom".into(),
            n: 64,
            count: 220,
            test: 20,
            seed: 0,
            path: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub autoencoder: AeConfig,
    pub ae_train: AeTrainConfig,
    pub flow: FlowConfig,
    pub flow_train: FlowTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub problem: Problem,
    pub lambda: f64,
    pub lambda2: Option<f64>,
    pub z_steps: Option<usize>,
    pub finetune_steps: Option<usize>,
    pub lr_z: f32,
    pub lr_finetune: f32,
    pub seed: u64,
    pub fraction: f64,
    pub output_size: Option<usize>,
    pub funknn_checkpoint: Option<PathBuf>,
    pub prior_checkpoint: Option<PathBuf>,
    /// Ground-truth image; observations are derived from it when no
    /// sinogram or analytic Gaussian is given, and it is used for metrics.
    pub target: Option<PathBuf>,
    /// Analytic Gaussian target for the derivative problems.
    pub gaussian: Option<GaussianSpec>,
    /// Measured sinogram for `ct`.
    pub sinogram: Option<PathBuf>,
    /// Simulated CT acquisition from `target`.
    pub views: usize,
    pub angle_range_deg: [f64; 2],
    pub snr_db: f64,
    /// Also run the prior-free pixel + TV baseline.
    pub baseline: Option<PixelTvConfig>,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolveConfig::default();
        Self {
            problem: s.problem,
            lambda: s.lambda,
            lambda2: s.lambda2,
            z_steps: s.z_steps,
            finetune_steps: s.finetune_steps,
            lr_z: s.lr_z,
            lr_finetune: s.lr_finetune,
            seed: s.seed,
            fraction: s.fraction,
            output_size: s.output_size,
            funknn_checkpoint: None,
            prior_checkpoint: None,
            target: None,
            gaussian: None,
            sinogram: None,
            views: 60,
            angle_range_deg: [-70.0, 70.0],
            snr_db: 30.0,
            baseline: None,
        }
    }
}

impl SolverSection {
    pub fn solve_config(&self) -> SolveConfig {
        SolveConfig {
            problem: self.problem,
            lambda: self.lambda,
            lambda2: self.lambda2,
            z_steps: self.z_steps,
            finetune_steps: self.finetune_steps,
            lr_z: self.lr_z,
            lr_finetune: self.lr_finetune,
            seed: self.seed,
            fraction: self.fraction,
            output_size: self.output_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub png: bool,
    pub raw: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { png: true, raw: true }
    }
}

impl RunConfig {
    /// Parses a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut cfg.data.path);
        fix(&mut cfg.solver.funknn_checkpoint);
        fix(&mut cfg.solver.prior_checkpoint);
        fix(&mut cfg.solver.target);
        fix(&mut cfg.solver.sinogram);
        Ok(cfg)
    }

    /// `--seed` takes precedence over every seed in the file.
    pub fn apply_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.funknn.seed = seed;
        self.prior.ae_train.seed = seed;
        self.prior.flow_train.seed = seed;
        self.solver.seed = seed;
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.data.path.is_none() && !matches!(self.data.kind.as_str(), "gaussian" | "phantom") {
            anyhow::bail!("unknown data kind '{}', expected gaussian|phantom", self.data.kind);
        }
        if self.data.test > self.data.count {
            anyhow::bail!("test split {} larger than count {}", self.data.test, self.data.count);
        }
        self.funknn.validate()?;
        self.prior.autoencoder.validate()?;
        if self.prior.flow.latent != self.prior.autoencoder.latent {
            anyhow::bail!(
                "flow latent {} does not match autoencoder latent {}",
                self.prior.flow.latent,
                self.prior.autoencoder.latent
            );
        }
        self.solver.solve_config().validate()?;
        if self.solver.angle_range_deg[0] > self.solver.angle_range_deg[1] || self.solver.views == 0 {
            anyhow::bail!("CT acquisition needs views > 0 and an increasing angle range");
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        write_json(&dir.join("config.json"), self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
