//! DDPM machinery in coefficient space: schedule, forward noising,
//! training, strided ancestral sampling and ensemble generation.

use serde::{Deserialize, Serialize};

use crate::denoiser::{mse_loss, AdamWConfig, AdamWState, MlpConfig, MlpParams};
use crate::error::{Error, Result};
use crate::field::Field2D;
use crate::linalg::axpy;
use crate::pod::{CoeffStandardizer, CoeffVec, LatentBasis, Units};
use crate::rng::RngStream;

/// Linear-β variance schedule. Index `t` runs `1..=T`; `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_total: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_total < 2 {
            return Err(Error::InvalidArgument(format!("T = {t_total} (need >= 2)")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..t_total)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_total - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(t_total + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            t_total,
            beta_start,
            beta_end,
            betas,
            alpha_bars,
        })
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Evenly strided steps `τ_1 < … < τ_S = T` (`τ_i = ⌊i·T/S⌋`).
    pub fn strided_steps(&self, s: usize) -> Result<Vec<usize>> {
        if s == 0 || s > self.t_total {
            return Err(Error::InvalidArgument(format!(
                "sampler steps S = {s} outside 1..={}",
                self.t_total
            )));
        }
        Ok((1..=s).map(|i| i * self.t_total / s).collect())
    }
}

/// `a_t = √ᾱ_t·a0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(schedule: &NoiseSchedule, a0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    if t == 0 || t > schedule.t_total {
        return Err(Error::InvalidArgument(format!(
            "step {t} outside 1..={}",
            schedule.t_total
        )));
    }
    if a0.len() != eps.len() {
        return Err(Error::Shape("a0 and noise differ in length".into()));
    }
    let ab = schedule.alpha_bar(t);
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(a0.iter().zip(eps).map(|(a, e)| s0 * a + s1 * e).collect())
}

/// Anything that predicts the injected noise for a batch of rows.
pub trait NoisePredictor {
    fn k(&self) -> usize;

    /// `a_t`, `c` are `n×K` row-major; `t[i]` is the step of row `i`.
    fn predict(&self, a_t: &[f64], c: &[f64], t: &[usize]) -> Result<Vec<f64>>;
}

impl NoisePredictor for MlpParams {
    fn k(&self) -> usize {
        self.config().k
    }

    fn predict(&self, a_t: &[f64], c: &[f64], t: &[usize]) -> Result<Vec<f64>> {
        self.forward(a_t, c, t)
    }
}

/// Reverse-step variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorVariance {
    /// `β̃ = (1−ᾱ_prev)/(1−ᾱ_cur)·(1−ᾱ_cur/ᾱ_prev)`
    #[default]
    Posterior,
    /// `β = 1−ᾱ_cur/ᾱ_prev`
    Beta,
}

/// Ancestral sampling for a batch of conditioning rows, one noise stream per
/// row. Row `i` depends only on `c[i]` and `streams[i]`.
pub fn p_sample_batch(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    c: &[f64],
    steps: usize,
    variance: PosteriorVariance,
    streams: &mut [RngStream],
) -> Result<Vec<f64>> {
    let k = model.k();
    let n = streams.len();
    if c.len() != n * k {
        return Err(Error::Shape(format!(
            "{} conditioning values for {n} rows of K = {k}",
            c.len()
        )));
    }
    let taus = schedule.strided_steps(steps)?;
    let mut x = vec![0.0; n * k];
    for (row, s) in x.chunks_mut(k).zip(streams.iter_mut()) {
        s.fill_gaussian(row);
    }
    let mut noise = vec![0.0; k];
    for i in (0..taus.len()).rev() {
        let cur = taus[i];
        let prev = if i == 0 { 0 } else { taus[i - 1] };
        let ab_cur = schedule.alpha_bar(cur);
        let ab_prev = schedule.alpha_bar(prev);
        let alpha = ab_cur / ab_prev;
        let beta = 1.0 - alpha;
        let eps_coef = beta / (1.0 - ab_cur).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let sigma = if prev == 0 {
            0.0
        } else {
            match variance {
                PosteriorVariance::Posterior => ((1.0 - ab_prev) / (1.0 - ab_cur) * beta).sqrt(),
                PosteriorVariance::Beta => beta.sqrt(),
            }
        };
        let t = vec![cur; n];
        let eps_hat = model.predict(&x, c, &t)?;
        for (r, s) in streams.iter_mut().enumerate() {
            let row = &mut x[r * k..(r + 1) * k];
            let e = &eps_hat[r * k..(r + 1) * k];
            for (xv, ev) in row.iter_mut().zip(e) {
                *xv = inv_sqrt_alpha * (*xv - eps_coef * ev);
            }
            if prev > 0 {
                s.fill_gaussian(&mut noise);
                axpy(sigma, &noise, row);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite coefficients at reverse step {cur}"
            )));
        }
    }
    Ok(x)
}

/// Single-trajectory convenience wrapper around [`p_sample_batch`].
pub fn p_sample_loop(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    c: &CoeffVec,
    steps: usize,
    variance: PosteriorVariance,
    stream: &mut RngStream,
) -> Result<CoeffVec> {
    let mut streams = [stream.clone()];
    let out = p_sample_batch(model, schedule, &c.values, steps, variance, &mut streams)?;
    *stream = streams[0].clone();
    Ok(CoeffVec::standardized(out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 128,
            epochs: 400,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Counts of sampled steps `1..=T` during the first epoch (index 0 = step 1).
    pub first_epoch_steps: Vec<usize>,
}

/// A trained conditional model in standardized coefficient space.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionModel {
    pub schedule: NoiseSchedule,
    pub denoiser: MlpParams,
    pub target_std: CoeffStandardizer,
    pub cond_std: CoeffStandardizer,
    pub variance: PosteriorVariance,
}

/// Training pairs in standardized units: rows of `a0` and `c`, each `K` wide.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSet {
    pub k: usize,
    pub a0: Vec<f64>,
    pub c: Vec<f64>,
}

impl PairSet {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            a0: Vec::new(),
            c: Vec::new(),
        }
    }

    pub fn push(&mut self, a0: &[f64], c: &[f64]) {
        assert_eq!(a0.len(), self.k);
        assert_eq!(c.len(), self.k);
        self.a0.extend_from_slice(a0);
        self.c.extend_from_slice(c);
    }

    pub fn len(&self) -> usize {
        self.a0.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fixed `(t, ε)` draws so validation loss is comparable across epochs.
struct ValidationDraws {
    t: Vec<usize>,
    a_t: Vec<f64>,
    eps: Vec<f64>,
}

fn validation_draws(
    schedule: &NoiseSchedule,
    val: &PairSet,
    stream: &mut RngStream,
) -> ValidationDraws {
    let k = val.k;
    let n = val.len();
    let mut t = Vec::with_capacity(n);
    let mut a_t = vec![0.0; n * k];
    let mut eps = vec![0.0; n * k];
    for r in 0..n {
        let step = 1 + stream.next_index(schedule.t_total);
        t.push(step);
        stream.fill_gaussian(&mut eps[r * k..(r + 1) * k]);
        let ab = schedule.alpha_bar(step);
        for j in 0..k {
            a_t[r * k + j] = ab.sqrt() * val.a0[r * k + j] + (1.0 - ab).sqrt() * eps[r * k + j];
        }
    }
    ValidationDraws { t, a_t, eps }
}

fn validation_loss(
    params: &MlpParams,
    val: &PairSet,
    draws: &ValidationDraws,
    batch: usize,
) -> Result<f64> {
    let k = val.k;
    let n = val.len();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let pred = params.forward(
            &draws.a_t[start * k..end * k],
            &val.c[start * k..end * k],
            &draws.t[start..end],
        )?;
        let (loss, _) = mse_loss(&pred, &draws.eps[start * k..end * k]);
        total += loss * (end - start) as f64;
        start = end;
    }
    Ok(total / n as f64)
}

/// Minibatch AdamW on `E‖ε − ε_θ(a_t, c, t)‖²`, `t ~ U{1..T}`.
///
/// Returns the parameters from the epoch with the lowest validation loss.
/// When `val` is empty the training loss stands in for validation.
pub fn train(
    mut params: MlpParams,
    schedule: &NoiseSchedule,
    train: &PairSet,
    val: &PairSet,
    cfg: &TrainConfig,
    stream: &mut RngStream,
) -> Result<(MlpParams, TrainReport)> {
    let k = params.config().k;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if train.k != k || (!val.is_empty() && val.k != k) {
        return Err(Error::Shape(format!(
            "pairs of width {} for a K = {k} denoiser",
            train.k
        )));
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidArgument(
            "batch and epochs must be positive".into(),
        ));
    }
    let mut opt = AdamWState::for_params(cfg.optimizer, &params);
    let mut val_stream = stream.child("validation");
    let draws = validation_draws(schedule, val, &mut val_stream);

    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, MlpParams)> = None;
    let mut first_epoch_steps = vec![0usize; schedule.t_total];

    let mut a_t = Vec::new();
    let mut c = Vec::new();
    let mut eps = Vec::new();
    let mut ts = Vec::new();
    for epoch in 1..=cfg.epochs {
        stream.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            let m = chunk.len();
            a_t.resize(m * k, 0.0);
            c.resize(m * k, 0.0);
            eps.resize(m * k, 0.0);
            ts.clear();
            for (r, &idx) in chunk.iter().enumerate() {
                let step = 1 + stream.next_index(schedule.t_total);
                if epoch == 1 {
                    first_epoch_steps[step - 1] += 1;
                }
                ts.push(step);
                let e = &mut eps[r * k..(r + 1) * k];
                stream.fill_gaussian(e);
                let ab = schedule.alpha_bar(step);
                let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
                for j in 0..k {
                    a_t[r * k + j] = s0 * train.a0[idx * k + j] + s1 * e[j];
                }
                c[r * k..(r + 1) * k].copy_from_slice(&train.c[idx * k..(idx + 1) * k]);
            }
            let (pred, cache) = params.forward_cached(&a_t, &c, &ts).map_err(|e| {
                Error::Numerical(format!("epoch {epoch} batch {bi}: forward failed: {e}"))
            })?;
            let (loss, d_out) = mse_loss(&pred, &eps);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged: loss {loss} at epoch {epoch} batch {bi}"
                )));
            }
            epoch_loss += loss * m as f64;
            let grads = params.backward(&cache, &d_out)?;
            opt.step(params.as_mut_slice(), &grads)?;
        }
        let train_loss = epoch_loss / n as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            validation_loss(&params, val, &draws, cfg.batch.max(256))?
        };
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "validation loss {val_loss} at epoch {epoch}"
            )));
        }
        history.push(EpochLoss {
            epoch,
            train: train_loss,
            val: val_loss,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, params.clone()));
        }
    }
    let (best_val, best_epoch, best_params) = best.expect("at least one epoch");
    Ok((
        best_params,
        TrainReport {
            history,
            best_epoch,
            best_val,
            first_epoch_steps,
        },
    ))
}

/// Fresh denoiser for a model of latent width `k`.
pub fn init_denoiser(cfg: MlpConfig, stream: &mut RngStream) -> Result<MlpParams> {
    MlpParams::init(cfg, stream)
}

/// `M` reconstructions from one conditioning input.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Field2D>,
    /// Member coefficients in physical units.
    pub latent: Vec<Vec<f64>>,
    /// Standardized conditioning vector.
    pub conditioning: Vec<f64>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn mean_field(&self) -> Result<Field2D> {
        let first = self
            .members
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty ensemble has no mean".into()))?;
        let mut out = Field2D::zeros(first.nx(), first.ny());
        for m in &self.members {
            axpy(1.0, m.values(), out.values_mut());
        }
        let inv = 1.0 / self.members.len() as f64;
        out.values_mut().iter_mut().for_each(|v| *v *= inv);
        Ok(out)
    }

    /// Per-pixel sample variance (`M-1`).
    pub fn variance_field(&self) -> Result<Field2D> {
        let m = self.members.len();
        if m < 2 {
            return Err(Error::InvalidArgument(format!(
                "variance needs at least 2 members, got {m}"
            )));
        }
        let mean = self.mean_field()?;
        let mut var = Field2D::zeros(mean.nx(), mean.ny());
        for f in &self.members {
            for ((v, x), mu) in var
                .values_mut()
                .iter_mut()
                .zip(f.values())
                .zip(mean.values())
            {
                *v += (x - mu).powi(2);
            }
        }
        let inv = 1.0 / (m - 1) as f64;
        var.values_mut().iter_mut().for_each(|v| *v *= inv);
        Ok(var)
    }

    /// First `m` members (nested sub-ensemble).
    pub fn take(&self, m: usize) -> Ensemble {
        Ensemble {
            members: self.members[..m.min(self.len())].to_vec(),
            latent: self.latent[..m.min(self.len())].to_vec(),
            conditioning: self.conditioning.clone(),
        }
    }
}

impl DiffusionModel {
    pub fn k(&self) -> usize {
        self.denoiser.config().k
    }

    /// Standardized conditioning vector for an upsampled field.
    pub fn conditioning(&self, basis: &LatentBasis, x_up: &Field2D) -> Result<CoeffVec> {
        if basis.k() != self.k() {
            return Err(Error::Shape(format!(
                "basis has {} modes, model expects {}",
                basis.k(),
                self.k()
            )));
        }
        self.cond_std.standardize(&basis.project(x_up)?)
    }

    /// `M` independent reverse trajectories mapped back to physical space.
    ///
    /// Member `m` draws from `stream.child("member/{m}")`, so each member is
    /// independent of how many others are generated alongside it.
    pub fn generate_ensemble(
        &self,
        basis: &LatentBasis,
        x_up: &Field2D,
        members: usize,
        steps: usize,
        stream: &RngStream,
    ) -> Result<Ensemble> {
        self.generate_members(basis, x_up, 0..members, steps, stream)
    }

    /// Generate only the members whose indices are listed.
    pub fn generate_members(
        &self,
        basis: &LatentBasis,
        x_up: &Field2D,
        indices: impl IntoIterator<Item = usize>,
        steps: usize,
        stream: &RngStream,
    ) -> Result<Ensemble> {
        let c = self.conditioning(basis, x_up)?;
        let mut streams: Vec<RngStream> = indices
            .into_iter()
            .map(|m| stream.child(format!("member/{m}")))
            .collect();
        if streams.is_empty() {
            return Err(Error::InvalidArgument(
                "ensemble needs at least one member".into(),
            ));
        }
        let k = self.k();
        let n = streams.len();
        let cond: Vec<f64> = (0..n).flat_map(|_| c.values.iter().copied()).collect();
        let raw = p_sample_batch(
            &self.denoiser,
            &self.schedule,
            &cond,
            steps,
            self.variance,
            &mut streams,
        )?;
        let mut latent = Vec::with_capacity(n);
        let mut fields = Vec::with_capacity(n);
        for row in raw.chunks(k) {
            let mut a = row.to_vec();
            self.target_std.destandardize_in_place(&mut a);
            let coeffs = CoeffVec {
                values: a,
                units: Units::Physical,
            };
            fields.push(basis.reconstruct(&coeffs)?);
            latent.push(coeffs.values);
        }
        Ok(Ensemble {
            members: fields,
            latent,
            conditioning: c.values,
        })
    }
}
