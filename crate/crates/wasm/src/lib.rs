//! wasm-bindgen surface for `www/index.html`.
//!
//! Three operations: simulate one advection-diffusion snapshot with its
//! coarse and upsampled versions, fit a POD basis and reconstruct held-out
//! snapshots, and score a latent-Gaussian ensemble for calibration.

use podsr::advdiff::{
    generate_dataset, make_pair, propagate, random_smooth_ic, AdvDiffParams, DataConfig,
};
use podsr::field::Field2D;
use podsr::metrics::{coverage_levels, crps_field, rmse_mae};
use podsr::pod::{compute_pod, CoeffVec, LatentBasis};
use podsr::rng::RngStream;
use wasm_bindgen::prelude::*;

fn js(e: podsr::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Snapshot {
    n: usize,
    factor: usize,
    hr: Vec<f64>,
    lr: Vec<f64>,
    upsampled: Vec<f64>,
    rmse: f64,
}

#[wasm_bindgen]
impl Snapshot {
    #[wasm_bindgen(getter)]
    pub fn n(&self) -> usize {
        self.n
    }

    #[wasm_bindgen(getter)]
    pub fn lr_n(&self) -> usize {
        self.n / self.factor
    }

    pub fn hr(&self) -> Vec<f64> {
        self.hr.clone()
    }

    pub fn lr(&self) -> Vec<f64> {
        self.lr.clone()
    }

    pub fn upsampled(&self) -> Vec<f64> {
        self.upsampled.clone()
    }

    /// RMSE of the bicubic upsampling against the fine field.
    #[wasm_bindgen(getter)]
    pub fn upsampling_rmse(&self) -> f64 {
        self.rmse
    }
}

/// Random smooth initial condition propagated `step` steps of `dt = 0.005`.
#[wasm_bindgen]
pub fn simulate(
    seed: u32,
    n: usize,
    vx: f64,
    vy: f64,
    log10_kappa: f64,
    step: usize,
    envelope: f64,
) -> Result<Snapshot, JsError> {
    let mut s = RngStream::new(seed as u64, "demo/ic");
    let env = (envelope > 0.0).then_some(envelope);
    let u0 = random_smooth_ic(&mut s, n, n, 8.0, env).map_err(js)?;
    let p = AdvDiffParams {
        vx,
        vy,
        kappa: 10f64.powf(log10_kappa),
        dt: 0.005,
        nx: n,
        ny: n,
    };
    let hr = propagate(&u0, &p, step).map_err(js)?;
    let pair = make_pair(&hr, 4).map_err(js)?;
    let (rmse, _) = rmse_mae(&pair.upsampled, &pair.hr, None).map_err(js)?;
    Ok(Snapshot {
        n,
        factor: 4,
        hr: pair.hr.into_values(),
        lr: pair.lr.into_values(),
        upsampled: pair.upsampled.into_values(),
        rmse,
    })
}

/// POD fitted on a small generated dataset, with its held-out snapshots.
#[wasm_bindgen]
pub struct PodDemo {
    basis: LatentBasis,
    test_hr: Vec<Field2D>,
    test_up: Vec<Field2D>,
    /// Per-mode std of `project(hr) − project(upsampled)` on training data.
    residual_std: Vec<f64>,
}

#[wasm_bindgen]
impl PodDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, n_traj: usize, n: usize, max_modes: usize) -> Result<PodDemo, JsError> {
        let cfg = DataConfig {
            n_traj,
            nx: n,
            ny: n,
            ..DataConfig::default()
        };
        let ds = generate_dataset(seed as u64, &cfg).map_err(js)?;
        let train: Vec<&Field2D> = ds.train_snapshots().into_iter().map(|s| s.2).collect();
        let basis = compute_pod(&train, max_modes).map_err(js)?;
        let k = basis.k();
        let mut sq = vec![0.0; k];
        for hr in &train {
            let up = make_pair(hr, cfg.factor).map_err(js)?.upsampled;
            let (a, b) = (
                basis.project(hr).map_err(js)?,
                basis.project(&up).map_err(js)?,
            );
            for (i, s) in sq.iter_mut().enumerate() {
                *s += (a.values[i] - b.values[i]).powi(2);
            }
        }
        let residual_std = sq.iter().map(|s| (s / train.len() as f64).sqrt()).collect();
        let (mut test_hr, mut test_up) = (Vec::new(), Vec::new());
        for (_, _, f) in ds.test_snapshots() {
            test_up.push(make_pair(f, cfg.factor).map_err(js)?.upsampled);
            test_hr.push(f.clone());
        }
        Ok(PodDemo {
            basis,
            test_hr,
            test_up,
            residual_std,
        })
    }

    #[wasm_bindgen(getter)]
    pub fn modes(&self) -> usize {
        self.basis.k()
    }

    #[wasm_bindgen(getter)]
    pub fn n_test(&self) -> usize {
        self.test_hr.len()
    }

    #[wasm_bindgen(getter)]
    pub fn n(&self) -> usize {
        self.basis.mean.nx()
    }

    /// Cumulative explained-variance fraction per mode.
    pub fn cumulative_variance(&self) -> Vec<f64> {
        self.basis.cumulative_variance()
    }

    pub fn truth(&self, case: usize) -> Result<Vec<f64>, JsError> {
        Ok(self.case(case)?.0.values().to_vec())
    }

    /// Rank-`k` reconstruction of held-out snapshot `case`.
    pub fn reconstruct(&self, case: usize, k: usize) -> Result<Vec<f64>, JsError> {
        let (hr, _) = self.case(case)?;
        let b = self.basis.truncate(k).map_err(js)?;
        Ok(b.reconstruct(&b.project(hr).map_err(js)?)
            .map_err(js)?
            .into_values())
    }

    /// Empirical coverage at `levels` for an ensemble of `members` fields
    /// built from the projection of the upsampled input plus independent
    /// Gaussian coefficients scaled by `spread` × the training residual std.
    /// The last entry of the result is the mean CRPS.
    pub fn reliability(
        &self,
        case: usize,
        k: usize,
        spread: f64,
        members: usize,
        seed: u32,
        levels: Vec<f64>,
    ) -> Result<Vec<f64>, JsError> {
        let (hr, up) = self.case(case)?;
        let b = self.basis.truncate(k).map_err(js)?;
        let centre = b.project(up).map_err(js)?;
        let mut s = RngStream::new(seed as u64, "demo/ensemble");
        let mut ens = Vec::with_capacity(members);
        for _ in 0..members {
            let a: Vec<f64> = centre
                .values
                .iter()
                .zip(&self.residual_std)
                .map(|(c, sd)| c + spread * sd * s.next_gaussian())
                .collect();
            ens.push(b.reconstruct(&CoeffVec::physical(a)).map_err(js)?);
        }
        let mut out = coverage_levels(&ens, hr, &levels, None).map_err(js)?;
        out.push(crps_field(&ens, hr, None).map_err(js)?);
        Ok(out)
    }
}

impl PodDemo {
    fn case(&self, i: usize) -> Result<(&Field2D, &Field2D), JsError> {
        match (self.test_hr.get(i), self.test_up.get(i)) {
            (Some(h), Some(u)) => Ok((h, u)),
            _ => Err(JsError::new(&format!(
                "case {i} out of range (0..{})",
                self.test_hr.len()
            ))),
        }
    }
}
