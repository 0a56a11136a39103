//! Stage orchestration over a run directory.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.json
//! data/{train,test}_{hr,lr}.fst   data/snapshots.csv
//! pod/basis.bin  pod/mean.fld  pod/modes.fst  pod/spectrum.csv
//! pod/randorth_k{K}.bin
//! train/{tag}.ckpt  train/{tag}_loss.csv
//! sample/{tag}/latent.fst  sample/{tag}/mean.fst  sample/{tag}/std.fst  sample/{tag}/cases.csv
//! baseline/{tag}.fst  baseline/{tag}_cases.csv
//! eval/{tag}/metrics.csv  eval/{tag}/reliability.csv  eval/{tag}/sweep.csv  eval/{tag}/calibration.fst
//! report/summary.csv  report/spectrum.csv
//! ```
//!
//! Latent ensembles are stored as one `K × M` record per case (row = member).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::advdiff::generate_dataset;
use crate::baselines::{pod_projection, rbf_eval, rbf_fit};
use crate::config::ExperimentConfig;
use crate::diffusion::{train, DiffusionModel, NoiseSchedule, PairSet};
use crate::error::{Error, Result};
use crate::field::{bicubic_upsample, block_average, Field2D};
use crate::io::{self, fmt_f64, Csv};
use crate::linalg::Mat;
use crate::metrics::{self, evaluate_cases, Case};
use crate::pod::{
    compute_pod, propagate_covariance, random_orthonormal_basis, sample_covariance,
    CoeffStandardizer, LatentBasis, Units,
};
use crate::rng::RngStream;

pub const TOOL: &str = "podsr";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Diffusion in the POD coefficient space.
    Podiff,
    /// Same diffusion model on a random orthonormal basis.
    Randorth,
    /// Deterministic affine POD projection of the upsampled input.
    Podproj,
    /// Thin-plate (or Gaussian) RBF interpolation of the coarse field.
    Rbf,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Podiff,
        Method::Randorth,
        Method::Podproj,
        Method::Rbf,
    ];

    pub fn is_diffusion(self) -> bool {
        matches!(self, Method::Podiff | Method::Randorth)
    }

    pub fn uses_k(self) -> bool {
        !matches!(self, Method::Rbf)
    }

    /// Artifact tag, e.g. `podiff_k40` or `rbf`.
    pub fn tag(self, k: usize) -> String {
        if self.uses_k() {
            format!("{self}_k{k}")
        } else {
            self.to_string()
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Podiff => "podiff",
            Method::Randorth => "randorth",
            Method::Podproj => "podproj",
            Method::Rbf => "rbf",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "podiff" => Ok(Method::Podiff),
            "randorth" => Ok(Method::Randorth),
            "podproj" => Ok(Method::Podproj),
            "rbf" => Ok(Method::Rbf),
            other => Err(Error::InvalidArgument(format!(
                "unknown method {other:?} (expected podiff, randorth, podproj or rbf)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub wall_seconds: f64,
    /// Stream labels drawn from during the stage.
    pub streams: Vec<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub telemetry: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            tool: TOOL.into(),
            version: VERSION.into(),
            seed: cfg.seed,
            config: cfg.clone(),
            stages: BTreeMap::new(),
        }
    }

    /// Hash most recently recorded for an output path.
    pub fn recorded_hash(&self, rel: &str) -> Option<&str> {
        self.stages
            .values()
            .find_map(|s| s.outputs.get(rel).map(String::as_str))
    }
}

/// Per-case outcome of an evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub tag: String,
    pub report: metrics::MetricReport,
    pub sweep: Vec<metrics::SweepRow>,
    /// Largest |ensemble variance − diag(ΦΣΦᵀ)| over cases and cells.
    pub linear_identity_error: Option<f64>,
}

/// A run directory plus the configuration that governs it.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    manifest: RunManifest,
    verbose: bool,
}

struct Stage {
    name: String,
    start: Instant,
    record: StageRecord,
}

struct Snapshot {
    trajectory: usize,
    step: usize,
}

impl Pipeline {
    /// Validate the configuration and open (or start) the run directory.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let root = cfg.output.clone();
        let mpath = root.join("manifest.json");
        let mut manifest = match std::fs::read(&mpath) {
            Ok(bytes) => serde_json::from_slice::<RunManifest>(&bytes)
                .map_err(|e| Error::corrupt(&mpath, e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => RunManifest::new(&cfg),
            Err(e) => return Err(e.into()),
        };
        manifest.seed = cfg.seed;
        manifest.config = cfg.clone();
        manifest.version = VERSION.into();
        Ok(Self {
            cfg,
            root,
            manifest,
            verbose: false,
        })
    }

    pub fn verbose(mut self, on: bool) -> Self {
        self.verbose = on;
        self
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[{TOOL}] {}", msg.as_ref());
        }
    }

    fn begin(&self, name: impl Into<String>) -> Stage {
        let name = name.into();
        self.log(format!("stage {name}"));
        Stage {
            name,
            start: Instant::now(),
            record: StageRecord::default(),
        }
    }

    fn finish(&mut self, mut st: Stage) -> Result<()> {
        st.record.wall_seconds = st.start.elapsed().as_secs_f64();
        self.log(format!(
            "stage {} done in {:.1}s",
            st.name, st.record.wall_seconds
        ));
        self.manifest.stages.insert(st.name, st.record);
        let bytes = serde_json::to_vec_pretty(&self.manifest)
            .map_err(|e| Error::Numerical(format!("manifest serialization: {e}")))?;
        io::write_atomic(&self.path("manifest.json"), &bytes)
    }

    /// Read an input, checking it against the hash the manifest recorded.
    fn input(&self, st: &mut Stage, rel: &str) -> Result<Vec<u8>> {
        let path = self.path(rel);
        let bytes = io::read_existing(&path)?;
        let hash = io::sha256_hex(&bytes);
        if let Some(want) = self.manifest.recorded_hash(rel) {
            if want != hash {
                return Err(Error::corrupt(
                    &path,
                    format!("sha256 {hash} differs from manifest {want}"),
                ));
            }
        }
        st.record.inputs.insert(rel.into(), hash);
        Ok(bytes)
    }

    fn output(&self, st: &mut Stage, rel: &str, bytes: &[u8]) -> Result<()> {
        io::write_atomic(&self.path(rel), bytes)?;
        st.record.outputs.insert(rel.into(), io::sha256_hex(bytes));
        Ok(())
    }

    fn input_stack(&self, st: &mut Stage, rel: &str) -> Result<Vec<Field2D>> {
        let b = self.input(st, rel)?;
        io::decode_stack_bytes(&b, &self.path(rel))
    }

    fn input_basis(&self, st: &mut Stage, rel: &str) -> Result<LatentBasis> {
        let b = self.input(st, rel)?;
        io::decode_basis(&b, &self.path(rel))
    }

    fn snapshots_index(&self, st: &mut Stage) -> Result<(Vec<Snapshot>, Vec<Snapshot>)> {
        let rel = "data/snapshots.csv";
        let bytes = self.input(st, rel)?;
        let path = self.path(rel);
        let text = String::from_utf8(bytes).map_err(|_| Error::corrupt(&path, "not UTF-8"))?;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (n, line) in text.lines().enumerate().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            let parse = |i: usize| -> Result<usize> {
                cols.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::corrupt(&path, format!("line {}: bad column {i}", n + 1)))
            };
            let s = Snapshot {
                trajectory: parse(2)?,
                step: parse(3)?,
            };
            match cols.first() {
                Some(&"train") => train.push(s),
                Some(&"test") => test.push(s),
                _ => return Err(Error::corrupt(&path, format!("line {}: bad split", n + 1))),
            }
        }
        Ok((train, test))
    }

    /// Largest configured K; basis files store at least this many modes.
    fn k_max(&self, eig: Option<&[f64]>) -> Result<usize> {
        Ok(*self.cfg.ks(eig)?.iter().max().expect("non-empty"))
    }

    /// Default truncation level, resolving `eta` against the stored spectrum
    /// when no explicit list is configured.
    pub fn default_k(&self) -> Result<usize> {
        if self.cfg.pod.ks.is_empty() {
            let b = io::read_basis(&self.path("pod/basis.bin"))?;
            self.cfg.default_k(Some(&b.eigenvalues))
        } else {
            self.cfg.default_k(None)
        }
    }

    pub fn gen_data(&mut self) -> Result<()> {
        let mut st = self.begin("gen-data");
        let d = &self.cfg.data;
        let ds = generate_dataset(self.cfg.seed, d)?;
        st.record.streams = vec!["data/traj/{id}".into(), "data/split".into()];
        let mut csv = Csv::new(&["split", "index", "trajectory", "step", "vx", "vy", "kappa"]);
        let mut outputs = Vec::new();
        for (split, ids) in [("train", &ds.train_ids), ("test", &ds.test_ids)] {
            let mut hr = Vec::new();
            for &id in ids.iter() {
                let tr = &ds.trajectories[id];
                for (f, &step) in tr.snapshots.iter().zip(&tr.steps) {
                    csv.row(&[
                        split.into(),
                        hr.len().to_string(),
                        id.to_string(),
                        step.to_string(),
                        fmt_f64(tr.params.vx),
                        fmt_f64(tr.params.vy),
                        fmt_f64(tr.params.kappa),
                    ]);
                    hr.push(f.clone());
                }
            }
            let lr = hr
                .iter()
                .map(|f| block_average(f, d.factor))
                .collect::<Result<Vec<_>>>()?;
            outputs.push((format!("data/{split}_hr.fst"), io::encode_stack(&hr)?));
            outputs.push((format!("data/{split}_lr.fst"), io::encode_stack(&lr)?));
        }
        drop(ds);
        for (rel, bytes) in outputs {
            self.output(&mut st, &rel, &bytes)?;
        }
        self.output(&mut st, "data/snapshots.csv", csv.as_str().as_bytes())?;
        self.finish(st)
    }

    pub fn fit_pod(&mut self) -> Result<()> {
        let mut st = self.begin("fit-pod");
        let hr = self.input_stack(&mut st, "data/train_hr.fst")?;
        let refs: Vec<&Field2D> = hr.iter().collect();
        let kmax = if self.cfg.pod.ks.is_empty() {
            self.cfg.pod.max_modes
        } else {
            self.k_max(None)?.max(self.cfg.pod.max_modes)
        };
        let basis = compute_pod(&refs, kmax)?;
        let ks = self.cfg.ks(Some(&basis.eigenvalues))?;
        if let Some(&k) = ks.iter().find(|&&k| k > basis.k()) {
            return Err(Error::Numerical(format!(
                "K = {k} requested but only {} modes carry variance",
                basis.k()
            )));
        }
        self.output(&mut st, "pod/basis.bin", &io::encode_basis(&basis)?)?;
        self.output(&mut st, "pod/mean.fld", &io::encode_field(&basis.mean)?)?;
        let modes: Vec<Field2D> = (0..basis.k())
            .map(|k| Field2D::new(basis.mean.nx(), basis.mean.ny(), basis.mode(k).to_vec()))
            .collect::<Result<_>>()?;
        self.output(&mut st, "pod/modes.fst", &io::encode_stack(&modes)?)?;
        let spectrum = spectrum_csv(&basis);
        self.output(&mut st, "pod/spectrum.csv", spectrum.as_str().as_bytes())?;
        let cum = basis.cumulative_variance();
        for &k in &ks {
            st.record
                .telemetry
                .insert(format!("cumulative_variance_k{k}"), cum[k - 1].into());
        }
        st.record
            .telemetry
            .insert("snapshots".into(), refs.len().into());
        st.record
            .telemetry
            .insert("modes_stored".into(), basis.k().into());
        self.finish(st)
    }

    fn basis_for(
        &mut self,
        st: &mut Stage,
        method: Method,
        k: usize,
        create: bool,
    ) -> Result<LatentBasis> {
        let pod = self.input_basis(st, "pod/basis.bin")?;
        match method {
            Method::Podiff | Method::Podproj => pod.truncate(k),
            Method::Randorth => {
                let rel = format!("pod/randorth_k{k}.bin");
                if create {
                    let label = format!("basis/randorth/k{k}");
                    let mut s = RngStream::new(self.cfg.seed, &label);
                    st.record.streams.push(label);
                    let b = random_orthonormal_basis(&mut s, k, &pod.mean)?;
                    self.output(st, &rel, &io::encode_basis(&b)?)?;
                    Ok(b)
                } else {
                    self.input_basis(st, &rel)
                }
            }
            Method::Rbf => Err(Error::InvalidArgument("rbf has no latent basis".into())),
        }
    }

    /// Train the diffusion denoiser for `method` at truncation `k`.
    pub fn train(&mut self, method: Method, k: usize) -> Result<()> {
        if !method.is_diffusion() {
            return Err(Error::InvalidArgument(format!("{method} is not trained")));
        }
        let tag = method.tag(k);
        let mut st = self.begin(format!("train/{tag}"));
        let basis = self.basis_for(&mut st, method, k, true)?;
        let hr = self.input_stack(&mut st, "data/train_hr.fst")?;
        let lr = self.input_stack(&mut st, "data/train_lr.fst")?;
        let (index, _) = self.snapshots_index(&mut st)?;
        if index.len() != hr.len() || lr.len() != hr.len() {
            return Err(Error::corrupt(
                self.path("data"),
                "training stacks and index disagree",
            ));
        }

        let val_traj = self.validation_trajectories(&index);
        st.record.streams.push("train/validation-split".into());
        let (nx, ny) = (self.cfg.data.nx, self.cfg.data.ny);
        let mut a0 = Vec::with_capacity(hr.len());
        let mut c = Vec::with_capacity(hr.len());
        for (h, l) in hr.iter().zip(&lr) {
            a0.push(basis.project(h)?.values);
            c.push(basis.project(&bicubic_upsample(l, nx, ny)?)?.values);
        }
        drop(hr);
        let is_val: Vec<bool> = index
            .iter()
            .map(|s| val_traj.contains(&s.trajectory))
            .collect();
        let fit_a: Vec<Vec<f64>> = a0
            .iter()
            .zip(&is_val)
            .filter(|(_, &v)| !v)
            .map(|(a, _)| a.clone())
            .collect();
        let fit_c: Vec<Vec<f64>> = c
            .iter()
            .zip(&is_val)
            .filter(|(_, &v)| !v)
            .map(|(a, _)| a.clone())
            .collect();
        let target_std = CoeffStandardizer::fit(&fit_a)?;
        let cond_std = if self.cfg.diffusion.separate_conditioning_std {
            CoeffStandardizer::fit(&fit_c)?
        } else {
            target_std.clone()
        };
        let mut train_set = PairSet::new(k);
        let mut val_set = PairSet::new(k);
        for ((a, cc), &v) in a0.iter_mut().zip(c.iter_mut()).zip(&is_val) {
            target_std.standardize_in_place(a);
            cond_std.standardize_in_place(cc);
            if v {
                val_set.push(a, cc);
            } else {
                train_set.push(a, cc);
            }
        }

        let dcfg = &self.cfg.diffusion;
        let schedule = NoiseSchedule::linear(dcfg.t_total, dcfg.beta_start, dcfg.beta_end)?;
        let init_label = format!("train/{tag}/init");
        let sgd_label = format!("train/{tag}/sgd");
        let params = crate::denoiser::MlpParams::init(
            dcfg.mlp(k),
            &mut RngStream::new(self.cfg.seed, &init_label),
        )?;
        let n_params = params.as_slice().len();
        let mut sgd = RngStream::new(self.cfg.seed, &sgd_label);
        self.log(format!(
            "{tag}: {} train / {} validation pairs, {n_params} parameters",
            train_set.len(),
            val_set.len()
        ));
        let (best, report) = train(
            params,
            &schedule,
            &train_set,
            &val_set,
            &dcfg.train(),
            &mut sgd,
        )?;
        st.record.streams.extend([
            init_label,
            sgd_label.clone(),
            format!("{sgd_label}/validation"),
        ]);

        let model = DiffusionModel {
            schedule,
            denoiser: best,
            target_std,
            cond_std,
            variance: dcfg.variance,
        };
        self.output(
            &mut st,
            &format!("train/{tag}.ckpt"),
            &io::encode_checkpoint(&model)?,
        )?;
        let mut loss = Csv::new(&["epoch", "train_loss", "val_loss"]);
        for e in &report.history {
            loss.row(&[e.epoch.to_string(), fmt_f64(e.train), fmt_f64(e.val)]);
        }
        self.output(
            &mut st,
            &format!("train/{tag}_loss.csv"),
            loss.as_str().as_bytes(),
        )?;
        let t = &mut st.record.telemetry;
        t.insert("parameters".into(), n_params.into());
        t.insert("train_pairs".into(), train_set.len().into());
        t.insert("val_pairs".into(), val_set.len().into());
        t.insert("best_epoch".into(), report.best_epoch.into());
        t.insert("best_val_loss".into(), report.best_val.into());
        self.finish(st)
    }

    fn validation_trajectories(&self, index: &[Snapshot]) -> Vec<usize> {
        let mut ids: Vec<usize> = index.iter().map(|s| s.trajectory).collect();
        ids.dedup();
        let n_val = (ids.len() as f64 * self.cfg.diffusion.val_fraction).round() as usize;
        if n_val == 0 {
            return Vec::new();
        }
        RngStream::new(self.cfg.seed, "train/validation-split").shuffle(&mut ids);
        let mut v = ids[..n_val.min(ids.len() - 1)].to_vec();
        v.sort_unstable();
        v
    }

    /// Test-snapshot indices used as evaluation cases (sorted).
    pub fn case_indices(&self, n_test: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..n_test).collect();
        RngStream::new(self.cfg.seed, "eval/cases").shuffle(&mut ids);
        let mut v = ids[..self.cfg.metrics.cases.min(n_test)].to_vec();
        v.sort_unstable();
        v
    }

    fn selected_cases(&self, n_test: usize, positions: Option<&[usize]>) -> Result<Vec<usize>> {
        let all = self.case_indices(n_test);
        match positions {
            None => Ok(all),
            Some(p) => p
                .iter()
                .map(|&i| {
                    all.get(i).copied().ok_or_else(|| {
                        Error::InvalidArgument(format!("case {i} out of range 0..{}", all.len()))
                    })
                })
                .collect(),
        }
    }

    /// Draw ensembles for the evaluation cases.
    pub fn sample(&mut self, method: Method, k: usize, positions: Option<&[usize]>) -> Result<()> {
        if !method.is_diffusion() {
            return Err(Error::InvalidArgument(format!("{method} does not sample")));
        }
        let tag = method.tag(k);
        let mut st = self.begin(format!("sample/{tag}"));
        let basis = self.basis_for(&mut st, method, k, false)?;
        let ckpt_rel = format!("train/{tag}.ckpt");
        let model = io::decode_checkpoint(&self.input(&mut st, &ckpt_rel)?, &self.path(&ckpt_rel))?;
        if model.k() != k {
            return Err(Error::corrupt(
                self.path(&ckpt_rel),
                format!("checkpoint K {} != {k}", model.k()),
            ));
        }
        let lr = self.input_stack(&mut st, "data/test_lr.fst")?;
        let (_, test) = self.snapshots_index(&mut st)?;
        let cases = self.selected_cases(lr.len(), positions)?;
        let drawn = self.cfg.members_drawn();
        let m_use = self.cfg.diffusion.members;
        let steps = self.cfg.diffusion.steps;
        let (nx, ny) = (self.cfg.data.nx, self.cfg.data.ny);

        let mut latent = Vec::with_capacity(cases.len());
        let mut means = Vec::with_capacity(cases.len());
        let mut stds = Vec::with_capacity(cases.len());
        let mut csv = Csv::new(&["case", "snapshot", "trajectory", "step", "members", "steps"]);
        let mut wall = Vec::new();
        for (pos, &idx) in cases.iter().enumerate() {
            let t0 = Instant::now();
            let label = format!("sample/{tag}/snapshot/{idx}");
            let stream = RngStream::new(self.cfg.seed, &label);
            let x_up = bicubic_upsample(&lr[idx], nx, ny)?;
            let ens = model.generate_ensemble(&basis, &x_up, drawn, steps, &stream)?;
            let flat: Vec<f64> = ens.latent.iter().flatten().copied().collect();
            latent.push(Field2D::new(k, drawn, flat)?);
            let sub = ens.take(m_use);
            means.push(sub.mean_field()?);
            stds.push(if m_use >= 2 {
                sub.variance_field()?.map(f64::sqrt)
            } else {
                Field2D::zeros(nx, ny)
            });
            csv.row(&[
                pos.to_string(),
                idx.to_string(),
                test[idx].trajectory.to_string(),
                test[idx].step.to_string(),
                drawn.to_string(),
                steps.to_string(),
            ]);
            wall.push(t0.elapsed().as_secs_f64());
            self.log(format!(
                "{tag}: case {pos} (snapshot {idx}) {:.1}s",
                wall[pos]
            ));
        }
        st.record
            .streams
            .push(format!("sample/{tag}/snapshot/{{index}}/member/{{m}}"));
        let dir = format!("sample/{tag}");
        self.output(
            &mut st,
            &format!("{dir}/latent.fst"),
            &io::encode_stack(&latent)?,
        )?;
        self.output(
            &mut st,
            &format!("{dir}/mean.fst"),
            &io::encode_stack(&means)?,
        )?;
        self.output(
            &mut st,
            &format!("{dir}/std.fst"),
            &io::encode_stack(&stds)?,
        )?;
        self.output(
            &mut st,
            &format!("{dir}/cases.csv"),
            csv.as_str().as_bytes(),
        )?;
        let t = &mut st.record.telemetry;
        t.insert("case_wall_seconds".into(), wall.into());
        t.insert("members".into(), drawn.into());
        t.insert("sampler_steps".into(), steps.into());
        self.finish(st)
    }

    /// Deterministic baseline predictions for the evaluation cases.
    pub fn baseline(
        &mut self,
        method: Method,
        k: usize,
        positions: Option<&[usize]>,
    ) -> Result<()> {
        if method.is_diffusion() {
            return Err(Error::InvalidArgument(format!(
                "{method} is not a baseline"
            )));
        }
        let tag = method.tag(k);
        let mut st = self.begin(format!("baseline/{tag}"));
        let lr = self.input_stack(&mut st, "data/test_lr.fst")?;
        let cases = self.selected_cases(lr.len(), positions)?;
        let (nx, ny) = (self.cfg.data.nx, self.cfg.data.ny);
        let preds = match method {
            Method::Podproj => {
                let basis = self.basis_for(&mut st, method, k, false)?;
                cases
                    .iter()
                    .map(|&i| pod_projection(&basis, &bicubic_upsample(&lr[i], nx, ny)?))
                    .collect::<Result<Vec<_>>>()?
            }
            Method::Rbf => {
                let b = &self.cfg.baselines;
                cases
                    .iter()
                    .map(|&i| rbf_eval(&rbf_fit(&lr[i], b.kernel, b.ridge)?, nx, ny))
                    .collect::<Result<Vec<_>>>()?
            }
            _ => unreachable!(),
        };
        let mut csv = Csv::new(&["case", "snapshot"]);
        for (p, &i) in cases.iter().enumerate() {
            csv.row(&[p.to_string(), i.to_string()]);
        }
        self.output(
            &mut st,
            &format!("baseline/{tag}.fst"),
            &io::encode_stack(&preds)?,
        )?;
        self.output(
            &mut st,
            &format!("baseline/{tag}_cases.csv"),
            csv.as_str().as_bytes(),
        )?;
        self.finish(st)
    }

    fn read_case_list(&self, st: &mut Stage, rel: &str) -> Result<Vec<usize>> {
        let path = self.path(rel);
        let text = String::from_utf8(self.input(st, rel)?)
            .map_err(|_| Error::corrupt(&path, "not UTF-8"))?;
        text.lines()
            .skip(1)
            .map(|l| {
                l.split(',')
                    .nth(1)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::corrupt(&path, format!("bad row {l:?}")))
            })
            .collect()
    }

    /// Score a method's stored outputs against the truth.
    pub fn evaluate(&mut self, method: Method, k: usize) -> Result<Evaluation> {
        let tag = method.tag(k);
        let mut st = self.begin(format!("evaluate/{tag}"));
        let test_hr = self.input_stack(&mut st, "data/test_hr.fst")?;
        let train_hr = self.input_stack(&mut st, "data/train_hr.fst")?;
        let reference: Vec<f64> = train_hr.iter().flat_map(|f| f.valid_values()).collect();
        drop(train_hr);
        let mcfg = self.cfg.metrics.clone();
        let threshold = metrics::extreme_threshold(&reference, mcfg.extreme_quantile)?;
        drop(reference);

        let (cases, ensembles, preds, identity) = if method.is_diffusion() {
            let dir = format!("sample/{tag}");
            let cases = self.read_case_list(&mut st, &format!("{dir}/cases.csv"))?;
            let latent = self.input_stack(&mut st, &format!("{dir}/latent.fst"))?;
            let basis = self.basis_for(&mut st, method, k, false)?;
            if latent.len() != cases.len() {
                return Err(Error::corrupt(
                    self.path(&dir),
                    "latent stack and case list disagree",
                ));
            }
            let m_use = self.cfg.diffusion.members;
            let mut ensembles = Vec::with_capacity(cases.len());
            let mut preds = Vec::with_capacity(cases.len());
            let mut identity: f64 = 0.0;
            for lat in &latent {
                if lat.nx() != k {
                    return Err(Error::corrupt(
                        self.path(&dir),
                        format!("latent width {} != K {k}", lat.nx()),
                    ));
                }
                let rows: Vec<Vec<f64>> = lat.values().chunks(k).map(<[f64]>::to_vec).collect();
                let members = rows
                    .iter()
                    .map(|a| basis.reconstruct(&crate::pod::CoeffVec::physical(a.clone())))
                    .collect::<Result<Vec<_>>>()?;
                let used = &members[..m_use.min(members.len())];
                let ens = crate::diffusion::Ensemble {
                    members: used.to_vec(),
                    latent: rows[..used.len()].to_vec(),
                    conditioning: Vec::new(),
                };
                preds.push(ens.mean_field()?);
                if used.len() >= 2 {
                    identity = identity.max(linear_identity_gap(&basis, &ens)?);
                }
                ensembles.push(members);
            }
            (cases, ensembles, preds, (m_use >= 2).then_some(identity))
        } else {
            let cases = self.read_case_list(&mut st, &format!("baseline/{tag}_cases.csv"))?;
            let preds = self.input_stack(&mut st, &format!("baseline/{tag}.fst"))?;
            if preds.len() != cases.len() {
                return Err(Error::corrupt(
                    self.path("baseline"),
                    "prediction stack and case list disagree",
                ));
            }
            let ens = preds.iter().map(|p| vec![p.clone()]).collect();
            (cases, ens, preds, None)
        };
        if cases.iter().any(|&i| i >= test_hr.len()) {
            return Err(Error::corrupt(
                self.path("data/test_hr.fst"),
                "case index beyond test set",
            ));
        }
        let m_use = if method.is_diffusion() {
            self.cfg.diffusion.members
        } else {
            1
        };
        let main: Vec<Case<'_>> = cases
            .iter()
            .zip(&ensembles)
            .map(|(&i, m)| Case {
                members: &m[..m_use.min(m.len())],
                truth: &test_hr[i],
            })
            .collect();
        let report = evaluate_cases(&main, &preds, &mcfg.levels, threshold, None)?;

        let mut rows = Csv::new(&["method", "case", "metric", "value"]);
        let mut put = |case: &str, metric: &str, v: f64| {
            rows.row(&[tag.clone(), case.into(), metric.into(), fmt_f64(v)]);
        };
        for (pos, c) in main.iter().enumerate() {
            let one = evaluate_cases(
                std::slice::from_ref(c),
                &preds[pos..pos + 1],
                &mcfg.levels,
                threshold,
                None,
            )?;
            let name = cases[pos].to_string();
            put(&name, "rmse", one.rmse);
            put(&name, "mae", one.mae);
            put(&name, "crps", one.crps);
            for (l, v) in one.levels.iter().zip(&one.coverage) {
                put(&name, &format!("coverage_{l}"), *v);
            }
        }
        put("all", "rmse", report.rmse);
        put("all", "mae", report.mae);
        put("all", "extreme_rmse", report.extreme_rmse);
        put("all", "extreme_mae", report.extreme_mae);
        put("all", "crps", report.crps);
        put("all", "extreme_threshold", threshold);
        for (i, l) in report.levels.iter().enumerate() {
            if let Some(v) = report.coverage.get(i) {
                put("all", &format!("coverage_{l}"), *v);
                put(
                    "all",
                    &format!("coverage_pooled_{l}"),
                    report.coverage_pooled[i],
                );
            }
        }
        if let Some(m) = report.mace {
            put("all", "mace", m);
        }
        if let Some(g) = identity {
            put("all", "linear_identity_max_abs", g);
        }
        let dir = format!("eval/{tag}");
        self.output(
            &mut st,
            &format!("{dir}/metrics.csv"),
            rows.as_str().as_bytes(),
        )?;

        let mut sweep = Vec::new();
        if main.iter().all(|c| c.members.len() >= 2) {
            let curve = metrics::reliability_curve(&main, &mcfg.levels, None)?;
            let mut rel = Csv::new(&["method", "case", "level", "empirical"]);
            for (pos, pc) in curve.per_case.iter().enumerate() {
                for (l, v) in curve.levels.iter().zip(pc) {
                    rel.row(&[
                        tag.clone(),
                        cases[pos].to_string(),
                        fmt_f64(*l),
                        fmt_f64(*v),
                    ]);
                }
            }
            for (name, vals) in [("mean", &curve.mean), ("pooled", &curve.pooled)] {
                for (l, v) in curve.levels.iter().zip(vals) {
                    rel.row(&[tag.clone(), name.into(), fmt_f64(*l), fmt_f64(*v)]);
                }
            }
            self.output(
                &mut st,
                &format!("{dir}/reliability.csv"),
                rel.as_str().as_bytes(),
            )?;

            if main.len() >= 2 {
                let maps = mcfg
                    .levels
                    .iter()
                    .map(|&p| metrics::spatial_calibration_map(&main, p, None))
                    .collect::<Result<Vec<_>>>()?;
                self.output(
                    &mut st,
                    &format!("{dir}/calibration.fst"),
                    &io::encode_stack(&maps)?,
                )?;
            }

            let available = ensembles.iter().map(Vec::len).min().unwrap_or(0);
            let sizes: Vec<usize> = mcfg
                .sweep_sizes
                .iter()
                .copied()
                .filter(|&s| s <= available)
                .collect();
            if !sizes.is_empty() {
                let full: Vec<Case<'_>> = cases
                    .iter()
                    .zip(&ensembles)
                    .map(|(&i, m)| Case {
                        members: m,
                        truth: &test_hr[i],
                    })
                    .collect();
                sweep = metrics::ensemble_size_sweep(&full, &sizes, &mcfg.levels, None)?;
                let mut sc =
                    Csv::new(&["method", "members", "level", "coverage", "coverage_pooled"]);
                for r in &sweep {
                    sc.row(&[
                        tag.clone(),
                        r.size.to_string(),
                        fmt_f64(r.level),
                        fmt_f64(r.coverage),
                        fmt_f64(r.pooled),
                    ]);
                }
                self.output(&mut st, &format!("{dir}/sweep.csv"), sc.as_str().as_bytes())?;
            }
        }
        st.record
            .telemetry
            .insert("cases".into(), cases.len().into());
        self.finish(st)?;
        Ok(Evaluation {
            tag,
            report,
            sweep,
            linear_identity_error: identity,
        })
    }

    /// Collect every evaluated method into one table and export the spectrum.
    pub fn report(&mut self) -> Result<()> {
        let mut st = self.begin("report");
        let basis = self.input_basis(&mut st, "pod/basis.bin")?;
        let mut tags: Vec<String> = Vec::new();
        let eval_dir = self.path("eval");
        if eval_dir.is_dir() {
            for e in std::fs::read_dir(&eval_dir)? {
                let e = e?;
                if e.path().join("metrics.csv").is_file() {
                    tags.push(e.file_name().to_string_lossy().into_owned());
                }
            }
        }
        tags.sort();
        let mut summary = Csv::new(&["method", "metric", "value"]);
        for tag in &tags {
            let rel = format!("eval/{tag}/metrics.csv");
            let text = String::from_utf8(self.input(&mut st, &rel)?)
                .map_err(|_| Error::corrupt(self.path(&rel), "not UTF-8"))?;
            for line in text.lines().skip(1) {
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() == 4 && cols[1] == "all" {
                    summary.row(&[cols[0].into(), cols[2].into(), cols[3].into()]);
                }
            }
        }
        self.output(&mut st, "report/summary.csv", summary.as_str().as_bytes())?;
        self.output(
            &mut st,
            "report/spectrum.csv",
            spectrum_csv(&basis).as_str().as_bytes(),
        )?;
        st.record.telemetry.insert("methods".into(), tags.into());
        self.finish(st)
    }

    /// Every stage for every configured K and method.
    pub fn run_all(&mut self) -> Result<()> {
        self.gen_data()?;
        self.fit_pod()?;
        let ks = if self.cfg.pod.ks.is_empty() {
            vec![self.default_k()?]
        } else {
            self.cfg.pod.ks.clone()
        };
        let kd = self.default_k()?;
        for &k in &ks {
            self.train(Method::Podiff, k)?;
            self.sample(Method::Podiff, k, None)?;
            self.evaluate(Method::Podiff, k)?;
            self.baseline(Method::Podproj, k, None)?;
            self.evaluate(Method::Podproj, k)?;
        }
        self.train(Method::Randorth, kd)?;
        self.sample(Method::Randorth, kd, None)?;
        self.evaluate(Method::Randorth, kd)?;
        self.baseline(Method::Rbf, kd, None)?;
        self.evaluate(Method::Rbf, kd)?;
        self.report()
    }
}

fn spectrum_csv(basis: &LatentBasis) -> Csv {
    let mut c = Csv::new(&["mode", "eigenvalue", "fraction", "cumulative"]);
    let cum = basis.cumulative_variance();
    for (i, (&l, &cv)) in basis.eigenvalues.iter().zip(&cum).enumerate() {
        let frac = if basis.total_variance > 0.0 {
            l / basis.total_variance
        } else {
            0.0
        };
        c.row(&[(i + 1).to_string(), fmt_f64(l), fmt_f64(frac), fmt_f64(cv)]);
    }
    c
}

/// `max |Var_pixel − diag(ΦΣ_aΦᵀ)|` for one ensemble.
pub fn linear_identity_gap(basis: &LatentBasis, ens: &crate::diffusion::Ensemble) -> Result<f64> {
    let var = ens.variance_field()?;
    let sigma: Mat = sample_covariance(&ens.latent)?;
    let prop = propagate_covariance(basis, None, &sigma, Units::Physical)?;
    Ok(var
        .values()
        .iter()
        .zip(prop.values())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
}

/// Small configuration that runs every stage in seconds.
pub fn smoke_config(output: impl AsRef<Path>) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        output: output.as_ref().to_path_buf(),
        ..ExperimentConfig::default()
    };
    c.data.n_traj = 20;
    c.data.nx = 32;
    c.data.ny = 32;
    c.data.cutoff = 4.0;
    c.pod.ks = vec![8];
    c.pod.max_modes = 16;
    c.diffusion.t_total = 200;
    c.diffusion.hidden = 32;
    c.diffusion.blocks = 2;
    c.diffusion.embed = 16;
    c.diffusion.batch = 32;
    c.diffusion.epochs = 5;
    c.diffusion.steps = 20;
    c.diffusion.members = 8;
    c.metrics.cases = 4;
    c.metrics.sweep_sizes = vec![4, 8];
    c
}
