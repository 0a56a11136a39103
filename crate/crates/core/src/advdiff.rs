//! Synthetic benchmark: random smooth fields advected and diffused on the
//! periodic unit square.
//!
//! The equation `∂u/∂t + v·∇u = κ∇²u` is linear with constant coefficients,
//! so each Fourier mode evolves independently and "step n" is the exact
//! solution at `t = n·dt`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2, ifft2_complex, wavenumber, Complex64};
use crate::field::{bicubic_upsample, block_average, Field2D};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvDiffParams {
    pub vx: f64,
    pub vy: f64,
    pub kappa: f64,
    pub dt: f64,
    pub nx: usize,
    pub ny: usize,
}

impl AdvDiffParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0) || !(self.dt > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need kappa >= 0 and dt > 0, got kappa={} dt={}",
                self.kappa, self.dt
            )));
        }
        if !self.nx.is_power_of_two() || !self.ny.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "grid {}x{} is not a power of two",
                self.nx, self.ny
            )));
        }
        if !self.vx.is_finite() || !self.vy.is_finite() {
            return Err(Error::InvalidArgument("non-finite velocity".into()));
        }
        Ok(())
    }
}

/// Hermitian-symmetric random spectrum supported on `0 < |k| ≤ cutoff`.
///
/// With `envelope = Some(s)` each coefficient is additionally weighted by
/// `exp(-|k|²/(2s²))`.
pub fn smooth_ic_spectrum(
    stream: &mut RngStream,
    nx: usize,
    ny: usize,
    cutoff: f64,
    envelope: Option<f64>,
) -> Result<Vec<Complex64>> {
    let limit = nx.min(ny) as f64 / 2.0;
    if !(cutoff > 0.0 && cutoff < limit) {
        return Err(Error::InvalidArgument(format!(
            "cutoff {cutoff} outside (0, {limit}) for a {nx}x{ny} grid"
        )));
    }
    if let Some(s) = envelope {
        if !(s > 0.0) {
            return Err(Error::InvalidArgument(format!("envelope width {s} <= 0")));
        }
    }
    let mut spec = vec![Complex64::new(0.0, 0.0); nx * ny];
    let c2 = cutoff * cutoff;
    let kmax = cutoff.floor() as i64;
    // Canonical half-plane: ky > 0, or ky == 0 and kx > 0. Fixed iteration
    // order keeps the draw sequence independent of grid size.
    for ky in 0..=kmax {
        for kx in -kmax..=kmax {
            if ky == 0 && kx <= 0 {
                continue;
            }
            let k2 = (kx * kx + ky * ky) as f64;
            if k2 > c2 {
                continue;
            }
            let w = envelope.map_or(1.0, |s| (-k2 / (2.0 * s * s)).exp());
            let re = stream.next_gaussian() * w;
            let im = stream.next_gaussian() * w;
            let ix = kx.rem_euclid(nx as i64) as usize;
            let iy = ky.rem_euclid(ny as i64) as usize;
            let jx = (-kx).rem_euclid(nx as i64) as usize;
            let jy = (-ky).rem_euclid(ny as i64) as usize;
            spec[iy * nx + ix] = Complex64::new(re, im);
            spec[jy * nx + jx] = Complex64::new(re, -im);
        }
    }
    Ok(spec)
}

/// Random band-limited field with zero mean and unit max-abs.
pub fn random_smooth_ic(
    stream: &mut RngStream,
    nx: usize,
    ny: usize,
    cutoff: f64,
    envelope: Option<f64>,
) -> Result<Field2D> {
    let spec = smooth_ic_spectrum(stream, nx, ny, cutoff, envelope)?;
    let z = ifft2_complex(nx, ny, &spec)?;
    let mut values: Vec<f64> = z.iter().map(|c| c.re).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter_mut().for_each(|v| *v -= mean);
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::Numerical(
            "initial condition is identically zero".into(),
        ));
    }
    values.iter_mut().for_each(|v| *v /= peak);
    Field2D::new(nx, ny, values)
}

/// Per-axis propagation factor for FFT index `i`. The Nyquist index uses the
/// real average of the `±n/2` phases so the output stays real.
fn axis_phase(i: usize, n: usize, v: f64, t: f64) -> Complex64 {
    let k = wavenumber(i, n) as f64;
    let arg = 2.0 * PI * k * v * t;
    if n.is_multiple_of(2) && i == n / 2 {
        Complex64::new(arg.cos(), 0.0)
    } else {
        Complex64::new(arg.cos(), -arg.sin())
    }
}

/// Exact spectral propagator over `n_steps·dt` time units.
pub fn propagate(u0: &Field2D, p: &AdvDiffParams, n_steps: usize) -> Result<Field2D> {
    p.validate()?;
    if u0.dims() != (p.nx, p.ny) {
        return Err(Error::Shape(format!(
            "field {}x{} vs parameters {}x{}",
            u0.nx(),
            u0.ny(),
            p.nx,
            p.ny
        )));
    }
    let t = n_steps as f64 * p.dt;
    let (nx, ny) = (p.nx, p.ny);
    let mut spec = fft2(nx, ny, u0.values())?;
    let px: Vec<Complex64> = (0..nx).map(|i| axis_phase(i, nx, p.vx, t)).collect();
    let py: Vec<Complex64> = (0..ny).map(|j| axis_phase(j, ny, p.vy, t)).collect();
    let diff = p.kappa * (2.0 * PI).powi(2) * t;
    for j in 0..ny {
        let ky = wavenumber(j, ny) as f64;
        for i in 0..nx {
            let kx = wavenumber(i, nx) as f64;
            let decay = (-diff * (kx * kx + ky * ky)).exp();
            spec[j * nx + i] *= px[i] * py[j] * decay;
        }
    }
    let mut out = Field2D::new(nx, ny, ifft2(nx, ny, &spec)?)?;
    if let Some(m) = u0.mask() {
        out = out.with_mask(m.to_vec())?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_traj: usize,
    pub nx: usize,
    pub ny: usize,
    /// Block-averaging factor from high to low resolution.
    pub factor: usize,
    pub dt: f64,
    pub cutoff: f64,
    /// Gaussian spectral envelope width (in wavenumber units) of the
    /// initial conditions; `None` draws a flat spectrum up to `cutoff`.
    pub envelope: Option<f64>,
    pub train_fraction: f64,
    pub steps: Vec<usize>,
    pub velocity_max: f64,
    pub kappa_min: f64,
    pub kappa_max: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_traj: 500,
            nx: 128,
            ny: 128,
            factor: 4,
            dt: 0.005,
            cutoff: 8.0,
            envelope: Some(1.5),
            train_fraction: 0.8,
            steps: vec![50, 100, 150, 200],
            velocity_max: 1.0,
            kappa_min: 1e-4,
            kappa_max: 5e-3,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_traj < 5 {
            return bad(format!("n_traj = {} (need at least 5)", self.n_traj));
        }
        if !self.nx.is_power_of_two() || !self.ny.is_power_of_two() {
            return bad(format!(
                "grid {}x{} must be powers of two",
                self.nx, self.ny
            ));
        }
        if self.factor == 0
            || !self.nx.is_multiple_of(self.factor)
            || !self.ny.is_multiple_of(self.factor)
        {
            return bad(format!("factor {} must divide the grid", self.factor));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt = {} must be positive", self.dt));
        }
        if !(self.cutoff > 0.0 && self.cutoff < self.nx.min(self.ny) as f64 / 2.0) {
            return bad(format!("cutoff {} out of range", self.cutoff));
        }
        if matches!(self.envelope, Some(s) if !(s > 0.0)) {
            return bad("envelope width must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction {} not in (0,1)",
                self.train_fraction
            ));
        }
        if self.steps.is_empty() {
            return bad("no snapshot steps".into());
        }
        if !(self.velocity_max >= 0.0) {
            return bad("velocity_max must be non-negative".into());
        }
        if !(self.kappa_min > 0.0 && self.kappa_min <= self.kappa_max) {
            return bad("need 0 < kappa_min <= kappa_max".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: usize,
    pub params: AdvDiffParams,
    pub steps: Vec<usize>,
    pub snapshots: Vec<Field2D>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl Dataset {
    fn collect(&self, ids: &[usize]) -> Vec<(usize, usize, &Field2D)> {
        ids.iter()
            .flat_map(|&id| {
                let tr = &self.trajectories[id];
                tr.snapshots
                    .iter()
                    .zip(&tr.steps)
                    .map(move |(f, &s)| (id, s, f))
            })
            .collect()
    }

    /// `(trajectory id, step, snapshot)` for the training split.
    pub fn train_snapshots(&self) -> Vec<(usize, usize, &Field2D)> {
        self.collect(&self.train_ids)
    }

    pub fn test_snapshots(&self) -> Vec<(usize, usize, &Field2D)> {
        self.collect(&self.test_ids)
    }
}

/// One trajectory, drawn from the stream `data/traj/{id}` under `seed`.
pub fn generate_trajectory(seed: u64, id: usize, cfg: &DataConfig) -> Result<Trajectory> {
    let mut s = RngStream::new(seed, format!("data/traj/{id}"));
    let vx = cfg.velocity_max * (2.0 * s.next_uniform() - 1.0);
    let vy = cfg.velocity_max * (2.0 * s.next_uniform() - 1.0);
    let (l0, l1) = (cfg.kappa_min.log10(), cfg.kappa_max.log10());
    let kappa = 10f64.powf(l0 + (l1 - l0) * s.next_uniform());
    let params = AdvDiffParams {
        vx,
        vy,
        kappa,
        dt: cfg.dt,
        nx: cfg.nx,
        ny: cfg.ny,
    };
    let u0 = random_smooth_ic(&mut s, cfg.nx, cfg.ny, cfg.cutoff, cfg.envelope)?;
    let snapshots = cfg
        .steps
        .iter()
        .map(|&n| propagate(&u0, &params, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        id,
        params,
        steps: cfg.steps.clone(),
        snapshots,
    })
}

/// Generate every trajectory and split them (whole trajectories) into
/// train/test sets.
pub fn generate_dataset(seed: u64, cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let trajectories = (0..cfg.n_traj)
        .map(|id| generate_trajectory(seed, id, cfg))
        .collect::<Result<Vec<_>>>()?;
    let (train_ids, test_ids) = split_ids(seed, cfg.n_traj, cfg.train_fraction);
    Ok(Dataset {
        trajectories,
        train_ids,
        test_ids,
    })
}

/// Shuffled trajectory-level split; both halves come back sorted.
pub fn split_ids(seed: u64, n: usize, train_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..n).collect();
    RngStream::new(seed, "data/split").shuffle(&mut ids);
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPair {
    pub hr: Field2D,
    pub lr: Field2D,
    pub upsampled: Field2D,
}

/// Coarsen by block averaging, then return to the fine grid bicubically.
pub fn make_pair(hr: &Field2D, factor: usize) -> Result<GridPair> {
    let lr = block_average(hr, factor)?;
    let upsampled = bicubic_upsample(&lr, hr.nx(), hr.ny())?;
    Ok(GridPair {
        hr: hr.clone(),
        lr,
        upsampled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(vx: f64, vy: f64, kappa: f64, dt: f64, n: usize) -> AdvDiffParams {
        AdvDiffParams {
            vx,
            vy,
            kappa,
            dt,
            nx: n,
            ny: n,
        }
    }

    #[test]
    fn spectrum_is_band_limited_and_hermitian() {
        let mut s = RngStream::new(1, "ic");
        let (nx, ny) = (32, 32);
        let spec = smooth_ic_spectrum(&mut s, nx, ny, 5.0, None).unwrap();
        for j in 0..ny {
            for i in 0..nx {
                let (kx, ky) = (wavenumber(i, nx), wavenumber(j, ny));
                if ((kx * kx + ky * ky) as f64) > 25.0 {
                    assert_eq!(spec[j * nx + i], Complex64::new(0.0, 0.0));
                }
            }
        }
        let z = ifft2_complex(nx, ny, &spec).unwrap();
        assert!(z.iter().all(|c| c.im.abs() <= 1e-12));
    }

    #[test]
    fn ic_is_normalized_and_deterministic() {
        let a = random_smooth_ic(&mut RngStream::new(2, "a"), 32, 16, 4.0, Some(2.0)).unwrap();
        let b = random_smooth_ic(&mut RngStream::new(2, "a"), 32, 16, 4.0, Some(2.0)).unwrap();
        let c = random_smooth_ic(&mut RngStream::new(2, "b"), 32, 16, 4.0, Some(2.0)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.mean().abs() < 1e-14);
        assert!((a.max_abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn ic_rejects_cutoff_out_of_range() {
        let mut s = RngStream::new(3, "ic");
        assert!(random_smooth_ic(&mut s, 16, 16, 8.0, None).is_err());
        assert!(random_smooth_ic(&mut s, 16, 16, 0.0, None).is_err());
    }

    #[test]
    fn zero_velocity_zero_diffusion_is_identity() {
        let mut rng = RngStream::new(4, "id");
        let u = Field2D::new(16, 16, rng.randn(256)).unwrap();
        let out = propagate(&u, &params(0.0, 0.0, 0.0, 0.01, 16), 37).unwrap();
        for (a, b) in u.values().iter().zip(out.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_mode_decay() {
        let n = 64;
        let u = Field2D::from_fn(n, n, |x, _| (2.0 * PI * x).sin());
        let out = propagate(&u, &params(0.0, 0.0, 1e-3, 0.005, n), 200).unwrap();
        let factor = (-1e-3 * (2.0 * PI).powi(2) * 1.0f64).exp();
        assert!((factor - 0.96128).abs() < 2e-5, "{factor}");
        for (a, b) in u.values().iter().zip(out.values()) {
            assert!((a * factor - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn advection_by_half_domain_is_a_shift() {
        let n = 32;
        let mut s = RngStream::new(5, "shift");
        let u = random_smooth_ic(&mut s, n, n, 6.0, None).unwrap();
        let out = propagate(&u, &params(1.0, 0.0, 0.0, 0.005, n), 100).unwrap();
        for j in 0..n {
            for i in 0..n {
                let src = (i + n - n / 2) % n;
                assert!((out.get(i, j) - u.get(src, j)).abs() <= 1e-12);
            }
        }
        let l2 = |f: &Field2D| f.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((l2(&u) - l2(&out)).abs() <= 1e-12 * l2(&u));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let u = Field2D::zeros(16, 16);
        assert!(propagate(&u, &params(0.0, 0.0, 0.0, 0.1, 32), 1).is_err());
    }

    #[test]
    fn dataset_shapes_and_split() {
        let cfg = DataConfig {
            n_traj: 10,
            nx: 16,
            ny: 16,
            cutoff: 3.0,
            ..DataConfig::default()
        };
        let ds = generate_dataset(42, &cfg).unwrap();
        assert_eq!(ds.trajectories.len(), 10);
        assert_eq!(ds.train_ids.len(), 8);
        assert_eq!(ds.test_ids.len(), 2);
        assert!(ds.train_ids.iter().all(|id| !ds.test_ids.contains(id)));
        for tr in &ds.trajectories {
            assert_eq!(tr.steps, vec![50, 100, 150, 200]);
            assert_eq!(tr.snapshots.len(), 4);
            assert!((1e-4..=5e-3).contains(&tr.params.kappa));
            assert!(tr.params.vx.abs() <= 1.0 && tr.params.vy.abs() <= 1.0);
        }
        assert_eq!(ds, generate_dataset(42, &cfg).unwrap());
    }

    #[test]
    fn full_scale_split_counts() {
        let (train, test) = split_ids(7, 500, 0.8);
        assert_eq!((train.len(), test.len()), (400, 100));
        assert_eq!(train.len() * 4 + test.len() * 4, 2000);
    }

    #[test]
    fn kappa_is_log_uniform() {
        let cfg = DataConfig {
            nx: 8,
            ny: 8,
            cutoff: 2.0,
            steps: vec![1],
            ..DataConfig::default()
        };
        let (l0, l1) = (cfg.kappa_min.log10(), cfg.kappa_max.log10());
        let mut bins = [0usize; 4];
        let n = 4000;
        for id in 0..n {
            let k = generate_trajectory(1, id, &cfg).unwrap().params.kappa;
            let b = (((k.log10() - l0) / (l1 - l0)) * 4.0).floor() as usize;
            bins[b.min(3)] += 1;
        }
        // n/4 = 1000 per quarter of the log range, sd ~27
        assert!(
            bins.iter().all(|&c| (c as i64 - 1000).abs() < 120),
            "{bins:?}"
        );
    }

    #[test]
    fn pair_shapes_and_mean() {
        let mut s = RngStream::new(6, "pair");
        let hr = random_smooth_ic(&mut s, 128, 128, 8.0, None).unwrap();
        let p = make_pair(&hr, 4).unwrap();
        assert_eq!(p.lr.dims(), (32, 32));
        assert_eq!(p.upsampled.dims(), (128, 128));
        assert!((p.lr.mean() - hr.mean()).abs() <= 1e-14);
        let c = make_pair(&Field2D::constant(16, 16, 2.0), 4).unwrap();
        assert!(c
            .upsampled
            .values()
            .iter()
            .all(|&v| (v - 2.0).abs() < 1e-14));
    }
}
