//! Experiment configuration (TOML). Unknown keys are rejected and every
//! field has a default, so a partial file is valid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advdiff::DataConfig;
use crate::baselines::RbfKernel;
use crate::denoiser::{AdamWConfig, MlpConfig};
use crate::diffusion::{PosteriorVariance, TrainConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataConfig,
    pub pod: PodConfig,
    pub diffusion: DiffusionConfig,
    pub baselines: BaselineConfig,
    pub metrics: MetricsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 20240607,
            output: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            pod: PodConfig::default(),
            diffusion: DiffusionConfig::default(),
            baselines: BaselineConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PodConfig {
    /// Truncation levels to train and compare. Empty means "choose by `eta`".
    pub ks: Vec<usize>,
    /// Cumulative-variance threshold, used when `ks` is empty.
    pub eta: f64,
    /// Level used when a command is not given `--k`; defaults to the largest.
    pub default_k: Option<usize>,
    /// Modes computed and stored; at least the largest requested K.
    pub max_modes: usize,
}

impl Default for PodConfig {
    fn default() -> Self {
        Self {
            ks: vec![10, 20, 40],
            eta: 0.99,
            default_k: None,
            max_modes: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub t_total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: usize,
    pub blocks: usize,
    pub embed: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Fraction of training trajectories held out for checkpoint selection.
    pub val_fraction: f64,
    /// Reduced-step sampler length `S`.
    pub steps: usize,
    /// Ensemble size `M`.
    pub members: usize,
    pub variance: PosteriorVariance,
    /// Fit a separate standardizer for the conditioning vector instead of
    /// reusing the target one.
    pub separate_conditioning_std: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_total: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            hidden: 256,
            blocks: 4,
            embed: 256,
            lr: 2e-4,
            weight_decay: 0.01,
            batch: 128,
            epochs: 400,
            val_fraction: 0.1,
            steps: 100,
            members: 100,
            variance: PosteriorVariance::Posterior,
            separate_conditioning_std: true,
        }
    }
}

impl DiffusionConfig {
    pub fn mlp(&self, k: usize) -> MlpConfig {
        MlpConfig {
            k,
            hidden: self.hidden,
            blocks: self.blocks,
            embed: self.embed,
            t_total: self.t_total,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch: self.batch,
            epochs: self.epochs,
            optimizer: AdamWConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub ridge: f64,
    pub kernel: RbfKernel,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-8,
            kernel: RbfKernel::ThinPlate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub levels: Vec<f64>,
    pub extreme_quantile: f64,
    /// Number of test snapshots drawn for evaluation.
    pub cases: usize,
    /// Ensemble sizes for the coverage sweep; sampling draws the largest.
    pub sweep_sizes: Vec<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            levels: crate::metrics::DEFAULT_LEVELS.to_vec(),
            extreme_quantile: 0.9,
            cases: 20,
            sweep_sizes: vec![50, 100, 200],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Truncation levels, resolved from `eta` when no explicit list is given.
    pub fn ks(&self, eigenvalues: Option<&[f64]>) -> Result<Vec<usize>> {
        if !self.pod.ks.is_empty() {
            return Ok(self.pod.ks.clone());
        }
        let eig = eigenvalues.ok_or_else(|| {
            Error::Config("pod.ks is empty and no spectrum is available to apply eta".into())
        })?;
        Ok(vec![crate::pod::select_k(eig, self.pod.eta)?])
    }

    pub fn default_k(&self, eigenvalues: Option<&[f64]>) -> Result<usize> {
        if let Some(k) = self.pod.default_k {
            return Ok(k);
        }
        Ok(*self.ks(eigenvalues)?.iter().max().expect("non-empty"))
    }

    /// Members drawn per case: enough for both `M` and the largest sweep size.
    pub fn members_drawn(&self) -> usize {
        self.metrics
            .sweep_sizes
            .iter()
            .copied()
            .chain([self.diffusion.members])
            .max()
            .unwrap_or(self.diffusion.members)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.data.validate()?;
        let d = &self.data;
        let n_train = ((d.n_traj as f64) * d.train_fraction).round() as usize;
        let p = &self.pod;
        if p.ks.contains(&0) {
            return bad("pod.ks entries must be positive".into());
        }
        if !(p.eta > 0.0 && p.eta < 1.0) {
            return bad(format!("pod.eta = {} not in (0, 1)", p.eta));
        }
        let kmax = p.ks.iter().copied().max().unwrap_or(0);
        if p.max_modes < kmax.max(1) {
            return bad(format!(
                "pod.max_modes = {} below largest K {kmax}",
                p.max_modes
            ));
        }
        if let Some(k) = p.default_k {
            if !p.ks.is_empty() && !p.ks.contains(&k) {
                return bad(format!("pod.default_k = {k} not in pod.ks"));
            }
        }
        let snaps = n_train * d.steps.len();
        if kmax >= snaps {
            return bad(format!(
                "K = {kmax} needs more than {snaps} training snapshots"
            ));
        }
        let f = &self.diffusion;
        if f.t_total < 2 {
            return bad("diffusion.t_total must be >= 2".into());
        }
        if !(f.beta_start > 0.0 && f.beta_start <= f.beta_end && f.beta_end < 1.0) {
            return bad(format!(
                "beta range [{}, {}] invalid",
                f.beta_start, f.beta_end
            ));
        }
        if f.hidden == 0 || f.embed == 0 || !f.embed.is_multiple_of(2) {
            return bad(
                "diffusion.hidden must be positive and diffusion.embed positive and even".into(),
            );
        }
        if !(f.lr > 0.0) || !(f.weight_decay >= 0.0) {
            return bad("diffusion.lr must be positive and weight_decay non-negative".into());
        }
        if f.batch == 0 || f.epochs == 0 {
            return bad("diffusion.batch and diffusion.epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&f.val_fraction) {
            return bad(format!(
                "diffusion.val_fraction {} not in [0, 1)",
                f.val_fraction
            ));
        }
        if f.steps == 0 || f.steps > f.t_total {
            return bad(format!(
                "diffusion.steps {} outside 1..={}",
                f.steps, f.t_total
            ));
        }
        if f.members == 0 {
            return bad("diffusion.members must be positive".into());
        }
        let b = &self.baselines;
        if !(b.ridge >= 0.0) {
            return bad("baselines.ridge must be >= 0".into());
        }
        if let RbfKernel::Gaussian { epsilon } = b.kernel {
            if !(epsilon > 0.0) {
                return bad("baselines.kernel epsilon must be positive".into());
            }
        }
        let m = &self.metrics;
        if m.levels.is_empty()
            || m.levels.iter().any(|&l| !(l > 0.0 && l < 1.0))
            || m.levels.windows(2).any(|w| w[1] <= w[0])
        {
            return bad("metrics.levels must be strictly increasing in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&m.extreme_quantile) {
            return bad("metrics.extreme_quantile not in [0, 1]".into());
        }
        let n_test = (d.n_traj - n_train) * d.steps.len();
        if m.cases == 0 || m.cases > n_test {
            return bad(format!(
                "metrics.cases = {} with {n_test} test snapshots",
                m.cases
            ));
        }
        if m.sweep_sizes.iter().any(|&s| s < 2) {
            return bad("metrics.sweep_sizes entries must be >= 2".into());
        }
        Ok(())
    }
}
