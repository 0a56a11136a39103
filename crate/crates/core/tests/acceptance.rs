//! Acceptance suite: one line per criterion.
//!
//! Kernel oracles, the linear-UQ identity, POD optimality and reproducibility
//! run every time. Benchmark criteria need a full pipeline run and are
//! selected with `PODSR_ACCEPTANCE_SCALE`:
//!
//! * unset: benchmark criteria are listed as NOT RUN
//! * `reduced`: 100 trajectories, 64×64, K=20 (the 30-minute criterion)
//! * `full`: 500 trajectories, 128×128, K ∈ {10, 20, 40} (all benchmark criteria)
//!
//! `PODSR_ACCEPTANCE_DIR` picks the run directory (default under the cargo
//! target dir) and `PODSR_ACCEPTANCE_SEED` overrides the master seed. A
//! directory that already holds a finished run with the same configuration
//! is scored without recomputation.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use podsr::advdiff::{generate_dataset, propagate, AdvDiffParams};
use podsr::config::ExperimentConfig;
use podsr::denoiser::{mse_loss, MlpConfig, MlpParams};
use podsr::fft::{fft2, ifft2};
use podsr::field::Field2D;
use podsr::linalg::{jacobi_eigh, Mat};
use podsr::metrics::{crps_ensemble, mace, DEFAULT_LEVELS};
use podsr::pipeline::{smoke_config, Method, Pipeline, RunManifest};
use podsr::pod::{compute_pod, mean_reconstruction_error, random_orthonormal_basis};
use podsr::rng::RngStream;

enum Verdict {
    Pass,
    Fail,
    NotRun,
}

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, name: &str, verdict: Verdict, detail: impl AsRef<str>) {
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                self.failed += 1;
                "FAIL"
            }
            Verdict::NotRun => "NOT RUN",
        };
        println!("[{tag:7}] {name}: {}", detail.as_ref());
    }

    fn check(&mut self, name: &str, ok: bool, detail: impl AsRef<str>) {
        self.line(name, if ok { Verdict::Pass } else { Verdict::Fail }, detail);
    }

    fn error(&mut self, name: &str, e: impl std::fmt::Display) {
        self.line(name, Verdict::Fail, format!("error: {e}"));
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Scale {
    Reduced,
    Full,
}

impl Scale {
    fn name(self) -> &'static str {
        match self {
            Scale::Reduced => "reduced",
            Scale::Full => "full",
        }
    }

    fn config(self, output: PathBuf) -> ExperimentConfig {
        let mut c = ExperimentConfig {
            output,
            ..ExperimentConfig::default()
        };
        if let Ok(s) = std::env::var("PODSR_ACCEPTANCE_SEED") {
            c.seed = s.parse().expect("PODSR_ACCEPTANCE_SEED must be an integer");
        }
        if self == Scale::Reduced {
            c.data.n_traj = 100;
            c.data.nx = 64;
            c.data.ny = 64;
            c.pod.ks = vec![20];
        }
        c
    }

    fn budget_seconds(self) -> f64 {
        match self {
            Scale::Reduced => 30.0 * 60.0,
            Scale::Full => 4.0 * 3600.0,
        }
    }
}

type Summary = BTreeMap<(String, String), f64>;

fn read_summary(path: &Path) -> Result<Summary, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Summary::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if let [method, metric, value] = cols[..] {
            let v = value.parse().map_err(|_| format!("bad value in {line}"))?;
            out.insert((method.to_string(), metric.to_string()), v);
        }
    }
    Ok(out)
}

fn get(s: &Summary, method: &str, metric: &str) -> Result<f64, String> {
    s.get(&(method.to_string(), metric.to_string()))
        .copied()
        .ok_or_else(|| format!("{method}/{metric} missing from summary"))
}

fn read_manifest(dir: &Path) -> Option<RunManifest> {
    let bytes = std::fs::read(dir.join("manifest.json")).ok()?;
    serde_json::from_slice(&bytes).ok()
}

fn same_config(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    let mut a = a.clone();
    a.output = b.output.clone();
    &a == b
}

/// Run (or reuse) the benchmark, returning the summary and total stage time.
fn benchmark(scale: Scale, dir: &Path) -> Result<(Summary, f64), String> {
    let cfg = scale.config(dir.to_path_buf());
    let summary_path = dir.join("report/summary.csv");
    match read_manifest(dir) {
        Some(m) if !same_config(&m.config, &cfg) => {
            return Err(format!(
                "{} holds a run with a different configuration",
                dir.display()
            ));
        }
        Some(_) if summary_path.exists() => {
            println!(
                "scoring the existing {} run in {}",
                scale.name(),
                dir.display()
            );
        }
        _ => {
            println!(
                "running the {} benchmark in {} (this takes a while)",
                scale.name(),
                dir.display()
            );
            let mut p = Pipeline::open(cfg)
                .map_err(|e| e.to_string())?
                .verbose(true);
            let run = match scale {
                Scale::Full => p.run_all(),
                Scale::Reduced => (|| {
                    p.gen_data()?;
                    p.fit_pod()?;
                    p.train(Method::Podiff, 20)?;
                    p.sample(Method::Podiff, 20, None)?;
                    p.evaluate(Method::Podiff, 20)?;
                    p.report()
                })(),
            };
            run.map_err(|e| e.to_string())?;
        }
    }
    let manifest = read_manifest(dir).ok_or("manifest missing after the run")?;
    let wall = manifest.stages.values().map(|s| s.wall_seconds).sum();
    Ok((read_summary(&summary_path)?, wall))
}

fn sweep_deltas(path: &Path) -> Result<Vec<(f64, f64)>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut by: BTreeMap<(usize, String), f64> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        let m: usize = c[1].parse().map_err(|_| format!("bad row {line}"))?;
        let v: f64 = c[3].parse().map_err(|_| format!("bad row {line}"))?;
        by.insert((m, c[2].to_string()), v);
    }
    let mut out = Vec::new();
    for l in DEFAULT_LEVELS {
        let key = |m: usize| by.get(&(m, format!("{l:?}"))).copied();
        match (key(100), key(200)) {
            (Some(a), Some(b)) => out.push((l, (b - a).abs())),
            _ => return Err(format!("sweep lacks M=100/200 at level {l}")),
        }
    }
    Ok(out)
}

fn benchmark_criteria(r: &mut Report, scale: Option<Scale>, dir: &Path) {
    const NAMES: [&str; 6] = [
        "benchmark reconstruction",
        "calibration",
        "ensemble-size stability",
        "basis ablation ordering",
        "deterministic-latent ordering",
        "K-monotonicity",
    ];
    let Some(scale) = scale else {
        for n in NAMES {
            r.line(
                n,
                Verdict::NotRun,
                "set PODSR_ACCEPTANCE_SCALE=full (or reduced)",
            );
        }
        return;
    };
    let (s, wall) = match benchmark(scale, dir) {
        Ok(x) => x,
        Err(e) => {
            for n in NAMES {
                r.error(n, &e);
            }
            return;
        }
    };
    let within = wall <= scale.budget_seconds();
    if scale == Scale::Reduced {
        match get(&s, "podiff_k20", "rmse") {
            Ok(rmse) => r.check(
                NAMES[0],
                rmse <= 0.08 && within,
                format!(
                    "reduced K=20 RMSE {rmse:.4} (<= 0.08), {:.1} min (<= 30)",
                    wall / 60.0
                ),
            ),
            Err(e) => r.error(NAMES[0], e),
        }
        for n in &NAMES[1..] {
            r.line(n, Verdict::NotRun, "defined on the full-scale benchmark");
        }
        identity_from_summary(r, &s, "linear-UQ identity (reduced run)");
        return;
    }

    let res = (|| -> Result<(), String> {
        let (rmse, mae) = (
            get(&s, "podiff_k40", "rmse")?,
            get(&s, "podiff_k40", "mae")?,
        );
        r.check(
            NAMES[0],
            rmse <= 0.05 && mae <= 0.03 && within,
            format!(
                "K=40 RMSE {rmse:.4} (<= 0.05), MAE {mae:.4} (<= 0.03), {:.2} h (<= 4)",
                wall / 3600.0
            ),
        );
        Ok(())
    })();
    if let Err(e) = res {
        r.error(NAMES[0], e);
    }

    let res = (|| -> Result<(), String> {
        let m = get(&s, "podiff_k40", "mace")?;
        let c90 = get(&s, "podiff_k40", "coverage_0.9")?;
        r.check(
            NAMES[1],
            m <= 0.08 && (0.84..=0.96).contains(&c90),
            format!("MACE {m:.4} (<= 0.08), 90% coverage {c90:.4} (in [0.84, 0.96])"),
        );
        Ok(())
    })();
    if let Err(e) = res {
        r.error(NAMES[1], e);
    }

    match sweep_deltas(&dir.join("eval/podiff_k40/sweep.csv")) {
        Ok(d) => {
            let worst = d.iter().map(|x| x.1).fold(0.0, f64::max);
            let detail: Vec<String> = d.iter().map(|(l, v)| format!("{l}: {v:.4}")).collect();
            r.check(
                NAMES[2],
                worst <= 0.015,
                format!("|cov(200) - cov(100)| {} (<= 0.015)", detail.join(", ")),
            );
        }
        Err(e) => r.error(NAMES[2], e),
    }

    let res = (|| -> Result<(), String> {
        let (pod, rnd) = (
            get(&s, "podiff_k40", "rmse")?,
            get(&s, "randorth_k40", "rmse")?,
        );
        r.check(
            NAMES[3],
            rnd >= 1.5 * pod,
            format!(
                "random-basis RMSE {rnd:.4} vs POD {pod:.4}, ratio {:.2} (>= 1.5)",
                rnd / pod
            ),
        );
        let proj = get(&s, "podproj_k40", "rmse")?;
        r.check(
            NAMES[4],
            pod <= proj,
            format!("diffusion ensemble mean {pod:.5} vs POD projection {proj:.5} (<=)"),
        );
        let ks = [10, 20, 40].map(|k| get(&s, &format!("podiff_k{k}"), "rmse"));
        let ks = [ks[0].clone()?, ks[1].clone()?, ks[2].clone()?];
        r.check(
            NAMES[5],
            ks[1] <= 1.05 * ks[0] && ks[2] <= 1.05 * ks[1],
            format!(
                "RMSE K10 {:.4}, K20 {:.4}, K40 {:.4} (non-increasing, 5% tolerance)",
                ks[0], ks[1], ks[2]
            ),
        );
        Ok(())
    })();
    if let Err(e) = res {
        r.error("benchmark orderings", e);
    }
    identity_from_summary(r, &s, "linear-UQ identity (benchmark run)");
}

fn identity_from_summary(r: &mut Report, s: &Summary, name: &str) {
    let gaps: Vec<(&str, f64)> = s
        .iter()
        .filter(|((_, metric), _)| metric == "linear_identity_max_abs")
        .map(|((m, _), v)| (m.as_str(), *v))
        .collect();
    if gaps.is_empty() {
        r.error(name, "no ensemble variance identity recorded");
        return;
    }
    let worst = gaps.iter().map(|g| g.1).fold(0.0, f64::max);
    r.check(
        name,
        worst <= 1e-10,
        format!(
            "max |var - diag(Φ Σ Φᵀ)| {worst:.2e} over {} methods (<= 1e-10)",
            gaps.len()
        ),
    );
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if let Ok(b) = std::fs::read(&p) {
                out.insert(
                    p.strip_prefix(root).unwrap().to_string_lossy().into_owned(),
                    b,
                );
            }
        }
    }
    out
}

/// Smoke-scale runs: linear-UQ identity on a real pipeline run plus
/// byte-identical reproduction.
fn smoke_criteria(r: &mut Report, scratch: &Path) {
    let (a, b) = (scratch.join("smoke-a"), scratch.join("smoke-b"));
    for d in [&a, &b] {
        let _ = std::fs::remove_dir_all(d);
        if let Err(e) = Pipeline::open(smoke_config(d)).and_then(|mut p| p.run_all()) {
            r.error("linear-UQ identity", &e);
            r.error("reproducibility", &e);
            return;
        }
    }
    match read_summary(&a.join("report/summary.csv")) {
        Ok(s) => identity_from_summary(r, &s, "linear-UQ identity"),
        Err(e) => r.error("linear-UQ identity", e),
    }
    let (ta, tb) = (tree(&a), tree(&b));
    let mut differing: Vec<&str> = ta
        .iter()
        .filter(|(k, _)| k.as_str() != "manifest.json")
        .filter(|(k, v)| tb.get(*k) != Some(*v))
        .map(|(k, _)| k.as_str())
        .collect();
    if ta.len() != tb.len() {
        differing.push("<file set>");
    }
    let kinds = ["data/", "train/", "sample/", "eval/"];
    let covered = kinds.iter().all(|k| ta.keys().any(|n| n.starts_with(k)));
    r.check(
        "reproducibility",
        differing.is_empty() && covered,
        if differing.is_empty() {
            format!("{} artifacts byte-identical across two runs (dataset, checkpoints, ensembles, metrics)", ta.len() - 1)
        } else {
            format!("differing: {}", differing.join(", "))
        },
    );
}

fn gradient_error(cfg: MlpConfig, seed: u64) -> f64 {
    let mut s = RngStream::new(seed, "acceptance/gradcheck");
    let mut p = MlpParams::init(cfg, &mut s).unwrap();
    for v in p.as_mut_slice() {
        *v = 0.5 * s.next_gaussian();
    }
    let a = s.randn(3 * cfg.k);
    let c = s.randn(3 * cfg.k);
    let target = s.randn(3 * cfg.k);
    let t = [1, cfg.t_total / 2, cfg.t_total];
    let loss = |q: &MlpParams| mse_loss(&q.forward(&a, &c, &t).unwrap(), &target).0;
    let (out, cache) = p.forward_cached(&a, &c, &t).unwrap();
    let grads = p.backward(&cache, &mse_loss(&out, &target).1).unwrap();
    let (h, floor) = (1e-5, 1e-6);
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p.as_slice()[i];
        p.as_mut_slice()[i] = orig + h;
        let up = loss(&p);
        p.as_mut_slice()[i] = orig - h;
        let down = loss(&p);
        p.as_mut_slice()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((grads[i] - fd).abs() / grads[i].abs().max(fd.abs()).max(floor));
    }
    worst
}

fn kernel_oracles(r: &mut Report) {
    let mut s = RngStream::new(1, "acceptance/kernels");
    let mut parts = Vec::new();
    let mut ok = true;

    let n = 64;
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = s.next_gaussian();
            a.as_mut_slice()[i * n + j] = v;
            a.as_mut_slice()[j * n + i] = v;
        }
    }
    let e = jacobi_eigh(&a).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let rec: f64 = (0..n)
                .map(|k| {
                    e.vectors.as_slice()[i * n + k] * e.values[k] * e.vectors.as_slice()[j * n + k]
                })
                .sum();
            worst = worst.max((rec - a.as_slice()[i * n + j]).abs());
        }
    }
    let rel = worst / a.norm_inf();
    ok &= rel <= 1e-9;
    parts.push(format!("eigen reconstruction {rel:.1e} (<= 1e-9)"));

    let x = s.randn(32 * 32);
    let back = ifft2(32, 32, &fft2(32, 32, &x).unwrap()).unwrap();
    let err = x
        .iter()
        .zip(&back)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ok &= err <= 1e-12;
    parts.push(format!("FFT roundtrip {err:.1e} (<= 1e-12)"));

    let cfg = MlpConfig {
        k: 3,
        hidden: 8,
        blocks: 2,
        embed: 6,
        t_total: 100,
    };
    let g = gradient_error(cfg, 7);
    ok &= g <= 1e-4;
    parts.push(format!("gradient check {g:.1e} (<= 1e-4)"));

    let u = Field2D::from_fn(64, 64, |x, _| (2.0 * PI * x).sin());
    let p = AdvDiffParams {
        vx: 0.0,
        vy: 0.0,
        kappa: 1e-3,
        dt: 0.005,
        nx: 64,
        ny: 64,
    };
    let out = propagate(&u, &p, 200).unwrap();
    let f = (-1e-3 * (2.0 * PI).powi(2)).exp();
    let d = u
        .values()
        .iter()
        .zip(out.values())
        .map(|(a, b)| (a * f - b).abs())
        .fold(0.0, f64::max);
    ok &= d <= 1e-10;
    parts.push(format!("single-mode decay {d:.1e} (<= 1e-10)"));

    let mut crps_err: f64 = 0.0;
    for trial in 0..50 {
        let m = 1 + trial % 9;
        let members = s.randn(m);
        let y = s.next_gaussian();
        let mut pts = members.clone();
        pts.push(y);
        pts.sort_by(f64::total_cmp);
        let integral: f64 = pts
            .windows(2)
            .map(|w| {
                let mid = 0.5 * (w[0] + w[1]);
                let cdf = members.iter().filter(|&&v| v <= mid).count() as f64 / m as f64;
                let step = if mid >= y { 1.0 } else { 0.0 };
                (cdf - step).powi(2) * (w[1] - w[0])
            })
            .sum();
        crps_err = crps_err.max((crps_ensemble(&members, y) - integral).abs());
    }
    ok &= crps_err <= 1e-6;
    parts.push(format!("CRPS vs integral {crps_err:.1e} (<= 1e-6)"));

    let m = mace(&[0.4717, 0.6849, 0.9009, 0.9571], &DEFAULT_LEVELS).unwrap();
    ok &= (m - 0.0128).abs() <= 1e-4;
    parts.push(format!("MACE of reported table {m:.5} (0.0128 +- 1e-4)"));

    r.check("numerical-kernel oracles", ok, parts.join("; "));
}

fn pod_optimality(r: &mut Report) {
    let mut cfg = ExperimentConfig::default().data;
    cfg.n_traj = 30;
    cfg.nx = 32;
    cfg.ny = 32;
    let ds = match generate_dataset(3, &cfg) {
        Ok(d) => d,
        Err(e) => return r.error("POD optimality", e),
    };
    let train: Vec<&Field2D> = ds.train_snapshots().into_iter().map(|s| s.2).collect();
    let pod = compute_pod(&train, 40).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for k in [10, 20, 40] {
        let best = mean_reconstruction_error(&pod.truncate(k).unwrap(), &train).unwrap();
        let mut closest = f64::INFINITY;
        for trial in 0..10 {
            let mut rs = RngStream::new(3, format!("acceptance/random-basis/{k}/{trial}"));
            let other = random_orthonormal_basis(&mut rs, k, &pod.mean).unwrap();
            closest = closest.min(mean_reconstruction_error(&other, &train).unwrap());
        }
        ok &= best <= closest;
        parts.push(format!(
            "K={k}: POD {best:.3e} vs best random {closest:.3e}"
        ));
    }
    r.check("POD optimality", ok, parts.join("; "));
}

fn main() -> ExitCode {
    // libtest flags (e.g. --nocapture, filters) are accepted and ignored
    let mut r = Report { failed: 0 };
    let scale = match std::env::var("PODSR_ACCEPTANCE_SCALE").as_deref() {
        Ok("full") => Some(Scale::Full),
        Ok("reduced") => Some(Scale::Reduced),
        Ok("") | Err(_) => None,
        Ok(other) => {
            eprintln!("PODSR_ACCEPTANCE_SCALE must be 'full' or 'reduced', got '{other}'");
            return ExitCode::FAILURE;
        }
    };
    let scratch = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let dir = std::env::var_os("PODSR_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| scratch.join(scale.map_or("none", Scale::name)));

    benchmark_criteria(&mut r, scale, &dir);
    smoke_criteria(&mut r, &scratch);
    kernel_oracles(&mut r);
    pod_optimality(&mut r);

    if r.failed == 0 {
        println!("acceptance: all executed criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", r.failed);
        ExitCode::FAILURE
    }
}
