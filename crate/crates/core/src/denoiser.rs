//! Conditional residual MLP noise predictor with hand-written
//! backpropagation and an AdamW optimizer.
//!
//! ```text
//! h₀   = W_in·[a_t, c] + b_in
//! τ    = W_τ·emb(t) + b_τ
//! h_b+1 = h_b + W2·silu(W1·(h_b + τ) + b1) + b2      (b = 0..B)
//! ε̂    = W_out·silu(h_B) + b_out
//! ```
//!
//! All parameters live in one flat `Vec<f64>`; weight matrices are stored
//! `in×out` row-major so a batch forward is `X·W` on contiguous rows.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    /// Latent dimension.
    pub k: usize,
    /// Hidden width.
    pub hidden: usize,
    /// Residual block count.
    pub blocks: usize,
    /// Time-embedding dimension (even).
    pub embed: usize,
    /// Diffusion step count, recorded for checkpoint compatibility.
    pub t_total: usize,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.hidden == 0 || self.embed == 0 {
            return Err(Error::InvalidArgument(format!(
                "degenerate MLP config {self:?}"
            )));
        }
        if !self.embed.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "time embedding dimension {} must be even",
                self.embed
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (k, h, b, e) = (self.k, self.hidden, self.blocks, self.embed);
        (2 * k * h + h) + (e * h + h) + b * 2 * (h * h + h) + (h * k + k)
    }

    fn layout(&self) -> Layout {
        let (k, h, e) = (self.k, self.hidden, self.embed);
        let mut off = 0;
        let mut take = |n: usize| {
            let s = off;
            off += n;
            s
        };
        let w_in = take(2 * k * h);
        let b_in = take(h);
        let w_t = take(e * h);
        let b_t = take(h);
        let blocks = (0..self.blocks)
            .map(|_| BlockLayout {
                w1: take(h * h),
                b1: take(h),
                w2: take(h * h),
                b2: take(h),
            })
            .collect();
        let w_out = take(h * k);
        let b_out = take(k);
        Layout {
            w_in,
            b_in,
            w_t,
            b_t,
            blocks,
            w_out,
            b_out,
            total: off,
        }
    }
}

#[derive(Clone, Debug)]
struct BlockLayout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    w_in: usize,
    b_in: usize,
    w_t: usize,
    b_t: usize,
    blocks: Vec<BlockLayout>,
    w_out: usize,
    b_out: usize,
    total: usize,
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Network parameters. `version` changes on every mutation so a forward
/// cache can be matched to the parameters that produced it.
#[derive(Debug)]
pub struct MlpParams {
    config: MlpConfig,
    layout: Layout,
    data: Vec<f64>,
    version: u64,
}

impl Clone for MlpParams {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            layout: self.layout.clone(),
            data: self.data.clone(),
            version: fresh_version(),
        }
    }
}

impl PartialEq for MlpParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

/// Sinusoidal embedding of a diffusion step: `sin(t·ω_i)` then `cos(t·ω_i)`
/// with `ω` geometric from 1 down to 1/10000.
pub fn time_embed(t: usize, t_total: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) || dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "embedding dimension {dim} must be even and positive"
        )));
    }
    if t > t_total {
        return Err(Error::InvalidArgument(format!(
            "step {t} beyond T = {t_total}"
        )));
    }
    let mut out = vec![0.0; dim];
    fill_time_embed(t, dim, &mut out);
    Ok(out)
}

fn frequency(i: usize, half: usize) -> f64 {
    if half <= 1 {
        1.0
    } else {
        10000f64.powf(-(i as f64) / (half - 1) as f64)
    }
}

fn fill_time_embed(t: usize, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let arg = t as f64 * frequency(i, half);
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn add_bias(rows: usize, cols: usize, bias: &[f64], y: &mut [f64]) {
    for r in 0..rows {
        for (v, b) in y[r * cols..(r + 1) * cols].iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn column_sums(rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
}

fn check_finite(layer: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("activation in layer {layer}")))
    }
}

/// Activations retained by [`MlpParams::forward_cached`] for backprop.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    n: usize,
    input: Vec<f64>,
    embed: Vec<f64>,
    /// `h_0 … h_B`
    hidden: Vec<Vec<f64>>,
    /// Per block: `z = h + τ`, pre-activation, post-activation.
    block_z: Vec<Vec<f64>>,
    block_pre: Vec<Vec<f64>>,
    block_act: Vec<Vec<f64>>,
    last_act: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        Ok(Self {
            config,
            data: vec![0.0; layout.total],
            layout,
            version: fresh_version(),
        })
    }

    /// Hidden and input layers uniform in `±1/√fan_in`, biases zero, output
    /// projection zero.
    pub fn init(config: MlpConfig, stream: &mut RngStream) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let (k, h, e) = (config.k, config.hidden, config.embed);
        let l = p.layout.clone();
        let mut fill = |data: &mut [f64], off: usize, fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut data[off..off + fan_in * fan_out] {
                *v = bound * (2.0 * stream.next_uniform() - 1.0);
            }
        };
        fill(&mut p.data, l.w_in, 2 * k, h);
        fill(&mut p.data, l.w_t, e, h);
        for b in &l.blocks {
            fill(&mut p.data, b.w1, h, h);
            fill(&mut p.data, b.w2, h, h);
        }
        Ok(p)
    }

    pub fn from_flat(config: MlpConfig, data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if data.len() != p.data.len() {
            return Err(Error::Shape(format!(
                "{} parameters for a network expecting {}",
                data.len(),
                p.data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; invalidates outstanding caches.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.version = fresh_version();
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `true` for entries of weight matrices (decayed), `false` for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let l = &self.layout;
        let (k, h, e) = (self.config.k, self.config.hidden, self.config.embed);
        let mut mask = vec![false; l.total];
        let mut mark = |off: usize, n: usize| mask[off..off + n].iter_mut().for_each(|m| *m = true);
        mark(l.w_in, 2 * k * h);
        mark(l.w_t, e * h);
        for b in &l.blocks {
            mark(b.w1, h * h);
            mark(b.w2, h * h);
        }
        mark(l.w_out, h * k);
        mask
    }

    /// Multiply the output projection (weights and bias) by `s`.
    pub fn scale_output(&mut self, s: f64) {
        let (h, k) = (self.config.hidden, self.config.k);
        let (w, b) = (self.layout.w_out, self.layout.b_out);
        self.version = fresh_version();
        self.data[w..w + h * k].iter_mut().for_each(|v| *v *= s);
        self.data[b..b + k].iter_mut().for_each(|v| *v *= s);
    }

    fn seg(&self, off: usize, n: usize) -> &[f64] {
        &self.data[off..off + n]
    }

    fn check_batch(&self, a_t: &[f64], c: &[f64], t: &[usize]) -> Result<usize> {
        let k = self.config.k;
        let n = t.len();
        if a_t.len() != n * k || c.len() != n * k {
            return Err(Error::Shape(format!(
                "batch of {n} steps with {} noisy and {} conditioning values (K = {k})",
                a_t.len(),
                c.len()
            )));
        }
        if let Some(&bad) = t.iter().find(|&&s| s > self.config.t_total) {
            return Err(Error::InvalidArgument(format!(
                "step {bad} beyond T = {}",
                self.config.t_total
            )));
        }
        Ok(n)
    }

    /// Batched noise prediction; rows are samples.
    pub fn forward(&self, a_t: &[f64], c: &[f64], t: &[usize]) -> Result<Vec<f64>> {
        Ok(self.run(a_t, c, t, false)?.0)
    }

    pub fn forward_cached(
        &self,
        a_t: &[f64],
        c: &[f64],
        t: &[usize],
    ) -> Result<(Vec<f64>, ForwardCache)> {
        let (out, cache) = self.run(a_t, c, t, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    fn run(
        &self,
        a_t: &[f64],
        c: &[f64],
        t: &[usize],
        keep: bool,
    ) -> Result<(Vec<f64>, Option<ForwardCache>)> {
        let n = self.check_batch(a_t, c, t)?;
        let MlpConfig {
            k,
            hidden: h,
            embed: e,
            ..
        } = self.config;
        let l = &self.layout;

        let mut input = vec![0.0; n * 2 * k];
        for r in 0..n {
            input[r * 2 * k..r * 2 * k + k].copy_from_slice(&a_t[r * k..(r + 1) * k]);
            input[r * 2 * k + k..(r + 1) * 2 * k].copy_from_slice(&c[r * k..(r + 1) * k]);
        }
        let mut embed = vec![0.0; n * e];
        for (r, &s) in t.iter().enumerate() {
            fill_time_embed(s, e, &mut embed[r * e..(r + 1) * e]);
        }

        let mut h0 = vec![0.0; n * h];
        gemm_nn(
            n,
            2 * k,
            h,
            &input,
            self.seg(l.w_in, 2 * k * h),
            &mut h0,
            false,
        );
        add_bias(n, h, self.seg(l.b_in, h), &mut h0);
        check_finite("input", &h0)?;

        let mut tau = vec![0.0; n * h];
        gemm_nn(n, e, h, &embed, self.seg(l.w_t, e * h), &mut tau, false);
        add_bias(n, h, self.seg(l.b_t, h), &mut tau);

        let mut hidden = Vec::with_capacity(if keep { l.blocks.len() + 1 } else { 0 });
        let mut block_z = Vec::new();
        let mut block_pre = Vec::new();
        let mut block_act = Vec::new();
        let mut cur = h0;
        for (bi, b) in l.blocks.iter().enumerate() {
            let z: Vec<f64> = cur.iter().zip(&tau).map(|(x, y)| x + y).collect();
            let mut pre = vec![0.0; n * h];
            gemm_nn(n, h, h, &z, self.seg(b.w1, h * h), &mut pre, false);
            add_bias(n, h, self.seg(b.b1, h), &mut pre);
            let act: Vec<f64> = pre.iter().map(|&x| silu(x)).collect();
            let mut next = cur.clone();
            gemm_nn(n, h, h, &act, self.seg(b.w2, h * h), &mut next, true);
            add_bias(n, h, self.seg(b.b2, h), &mut next);
            check_finite(&format!("block {bi}"), &next)?;
            if keep {
                hidden.push(cur);
                block_z.push(z);
                block_pre.push(pre);
                block_act.push(act);
            }
            cur = next;
        }
        let last_act: Vec<f64> = cur.iter().map(|&x| silu(x)).collect();
        let mut out = vec![0.0; n * k];
        gemm_nn(
            n,
            h,
            k,
            &last_act,
            self.seg(l.w_out, h * k),
            &mut out,
            false,
        );
        add_bias(n, k, self.seg(l.b_out, k), &mut out);
        check_finite("output", &out)?;

        let cache = keep.then(|| {
            hidden.push(cur);
            ForwardCache {
                version: self.version,
                n,
                input,
                embed,
                hidden,
                block_z,
                block_pre,
                block_act,
                last_act,
            }
        });
        Ok((out, cache))
    }

    /// Reverse-mode gradient of `Σ dL/dε̂ · ε̂` with respect to every
    /// parameter, in the flat parameter layout.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64]) -> Result<Vec<f64>> {
        if cache.version != self.version {
            return Err(Error::InvalidArgument(
                "stale forward cache: parameters changed since the forward pass".into(),
            ));
        }
        let n = cache.n;
        let MlpConfig {
            k,
            hidden: h,
            embed: e,
            ..
        } = self.config;
        if d_out.len() != n * k {
            return Err(Error::Shape(format!(
                "output gradient of {} values for batch {n} x K {k}",
                d_out.len()
            )));
        }
        let l = &self.layout;
        let mut g = vec![0.0; l.total];

        gemm_tn(
            h,
            n,
            k,
            &cache.last_act,
            d_out,
            &mut g[l.w_out..l.w_out + h * k],
            false,
        );
        column_sums(n, k, d_out, &mut g[l.b_out..l.b_out + k]);
        let mut d_h = vec![0.0; n * h];
        gemm_nt(n, k, h, d_out, self.seg(l.w_out, h * k), &mut d_h, false);
        let h_last = cache.hidden.last().expect("at least h0");
        for (d, &x) in d_h.iter_mut().zip(h_last) {
            *d *= silu_grad(x);
        }

        let mut d_tau = vec![0.0; n * h];
        let mut d_pre = vec![0.0; n * h];
        let mut d_z = vec![0.0; n * h];
        for (bi, b) in l.blocks.iter().enumerate().rev() {
            // next = cur + act·W2 + b2
            gemm_tn(
                h,
                n,
                h,
                &cache.block_act[bi],
                &d_h,
                &mut g[b.w2..b.w2 + h * h],
                false,
            );
            column_sums(n, h, &d_h, &mut g[b.b2..b.b2 + h]);
            gemm_nt(n, h, h, &d_h, self.seg(b.w2, h * h), &mut d_pre, false);
            for (d, &x) in d_pre.iter_mut().zip(&cache.block_pre[bi]) {
                *d *= silu_grad(x);
            }
            // pre = z·W1 + b1
            gemm_tn(
                h,
                n,
                h,
                &cache.block_z[bi],
                &d_pre,
                &mut g[b.w1..b.w1 + h * h],
                false,
            );
            column_sums(n, h, &d_pre, &mut g[b.b1..b.b1 + h]);
            gemm_nt(n, h, h, &d_pre, self.seg(b.w1, h * h), &mut d_z, false);
            for ((dh, dt), dz) in d_h.iter_mut().zip(d_tau.iter_mut()).zip(&d_z) {
                *dh += dz;
                *dt += dz;
            }
        }

        gemm_tn(
            e,
            n,
            h,
            &cache.embed,
            &d_tau,
            &mut g[l.w_t..l.w_t + e * h],
            false,
        );
        column_sums(n, h, &d_tau, &mut g[l.b_t..l.b_t + h]);
        gemm_tn(
            2 * k,
            n,
            h,
            &cache.input,
            &d_h,
            &mut g[l.w_in..l.w_in + 2 * k * h],
            false,
        );
        column_sums(n, h, &d_h, &mut g[l.b_in..l.b_in + h]);
        Ok(g)
    }
}

/// Mean squared error over batch and coordinates, and its gradient.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    (loss / n, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay applied
/// only where `decay_mask` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    decay_mask: Vec<bool>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, decay_mask: Vec<bool>) -> Self {
        let n = decay_mask.len();
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            decay_mask,
        }
    }

    pub fn for_params(config: AdamWConfig, params: &MlpParams) -> Self {
        Self::new(config, params.weight_mask())
    }

    pub fn restore(
        config: AdamWConfig,
        decay_mask: Vec<bool>,
        m: Vec<f64>,
        v: Vec<f64>,
        step: u64,
    ) -> Result<Self> {
        if m.len() != decay_mask.len() || v.len() != decay_mask.len() {
            return Err(Error::Shape(
                "optimizer moments do not match parameters".into(),
            ));
        }
        Ok(Self {
            config,
            m,
            v,
            step,
            decay_mask,
        })
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moments; got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let mut w = params[i];
            if self.decay_mask[i] {
                w -= c.lr * c.weight_decay * w;
            }
            params[i] = w - c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }

    pub fn decay_mask(&self) -> &[bool] {
        &self.decay_mask
    }
}

/// Apply one AdamW update to network parameters.
pub fn adamw_step(state: &mut AdamWState, params: &mut MlpParams, grads: &[f64]) -> Result<()> {
    state.step(params.as_mut_slice(), grads)
}
