//! Scalar fields on rectangular grids and the resolution-change operators.
//!
//! Storage is row-major: value `(i, j)` (column `i < nx`, row `j < ny`) sits
//! at `j * nx + i`. Coordinates are cell-centered on the unit square, so
//! cell `(i, j)` has center `((i + 0.5) / nx, (j + 0.5) / ny)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field2D {
    nx: usize,
    ny: usize,
    values: Vec<f64>,
    /// `true` marks a valid cell. `None` means every cell is valid.
    mask: Option<Vec<bool>>,
}

impl Field2D {
    pub fn new(nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::Shape(format!("empty grid {nx}x{ny}")));
        }
        if values.len() != nx * ny {
            return Err(Error::Shape(format!(
                "{} values for a {nx}x{ny} grid",
                values.len()
            )));
        }
        Ok(Self {
            nx,
            ny,
            values,
            mask: None,
        })
    }

    pub fn constant(nx: usize, ny: usize, value: f64) -> Self {
        Self {
            nx,
            ny,
            values: vec![value; nx * ny],
            mask: None,
        }
    }

    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self::constant(nx, ny, 0.0)
    }

    /// Build from a function of cell-center coordinates on the unit square.
    pub fn from_fn(nx: usize, ny: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            let y = (j as f64 + 0.5) / ny as f64;
            for i in 0..nx {
                let x = (i as f64 + 0.5) / nx as f64;
                values.push(f(x, y));
            }
        }
        Self {
            nx,
            ny,
            values,
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "mask of {} cells for a {}x{} grid",
                mask.len(),
                self.nx,
                self.ny
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn without_mask(mut self) -> Self {
        self.mask = None;
        self
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nx + i]
    }

    #[inline]
    pub fn is_valid(&self, idx: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[idx])
    }

    /// Values of valid cells in storage order.
    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(k, _)| self.is_valid(*k))
            .map(|(_, &v)| v)
    }

    pub fn same_grid(&self, other: &Field2D) -> bool {
        self.nx == other.nx && self.ny == other.ny
    }

    pub(crate) fn check_grid(&self, other: &Field2D, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: grid {}x{} does not match {}x{}",
                other.nx, other.ny, self.nx, self.ny
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field2D {
        Field2D {
            nx: self.nx,
            ny: self.ny,
            values: self.values.iter().map(|&v| f(v)).collect(),
            mask: self.mask.clone(),
        }
    }

    /// `self + alpha·other`, keeping this field's mask.
    pub fn add_scaled(&self, alpha: f64, other: &Field2D) -> Result<Field2D> {
        self.check_grid(other, "add_scaled")?;
        let mut out = self.clone();
        for (o, v) in out.values.iter_mut().zip(&other.values) {
            *o += alpha * v;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Field2D) -> Result<Field2D> {
        self.add_scaled(-1.0, other)
    }

    pub fn is_finite(&self) -> bool {
        self.valid_values().all(f64::is_finite)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskedStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

/// Mean, min, max and count over valid cells.
pub fn masked_stats(f: &Field2D) -> Result<MaskedStats> {
    let mut count = 0usize;
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for v in f.valid_values() {
        count += 1;
        sum += v;
        min = min.min(v);
        max = max.max(v);
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(MaskedStats {
        mean: sum / count as f64,
        min,
        max,
        count,
    })
}

/// Mean over non-overlapping `factor×factor` blocks.
///
/// The output carries no mask; block averaging is applied to complete
/// fields only.
pub fn block_average(hr: &Field2D, factor: usize) -> Result<Field2D> {
    if factor == 0 || !hr.nx.is_multiple_of(factor) || !hr.ny.is_multiple_of(factor) {
        return Err(Error::InvalidArgument(format!(
            "block factor {factor} does not divide grid {}x{}",
            hr.nx, hr.ny
        )));
    }
    let (lx, ly) = (hr.nx / factor, hr.ny / factor);
    let mut out = vec![0.0; lx * ly];
    let inv = 1.0 / (factor * factor) as f64;
    for bj in 0..ly {
        for bi in 0..lx {
            let mut s = 0.0;
            for dj in 0..factor {
                let row = (bj * factor + dj) * hr.nx + bi * factor;
                s += hr.values[row..row + factor].iter().sum::<f64>();
            }
            out[bj * lx + bi] = s * inv;
        }
    }
    Field2D::new(lx, ly, out)
}

/// Keys cubic-convolution parameter; `-0.5` gives the Catmull–Rom kernel.
pub const KEYS_A: f64 = -0.5;

#[inline]
pub fn keys_kernel(x: f64) -> f64 {
    let a = KEYS_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four source indices (edge-clamped) and weights for each output sample of
/// a 1-D resampling from `n_in` to `n_out` cells.
fn cubic_taps(n_in: usize, n_out: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let base = base as i64;
            let mut idx = [0usize; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let off = k as i64 - 1;
                idx[k] = (base + off).clamp(0, n_in as i64 - 1) as usize;
                w[k] = keys_kernel(t - off as f64);
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic (Keys, `a = -0.5`) resampling to `nx_out × ny_out`
/// with cell-centered sample alignment and edge clamping.
pub fn bicubic_upsample(lr: &Field2D, nx_out: usize, ny_out: usize) -> Result<Field2D> {
    if nx_out < lr.nx || ny_out < lr.ny {
        return Err(Error::InvalidArgument(format!(
            "target {nx_out}x{ny_out} is smaller than source {}x{}",
            lr.nx, lr.ny
        )));
    }
    let tx = cubic_taps(lr.nx, nx_out);
    let ty = cubic_taps(lr.ny, ny_out);

    // Along x for each source row.
    let mut tmp = vec![0.0; lr.ny * nx_out];
    for j in 0..lr.ny {
        let row = &lr.values[j * lr.nx..(j + 1) * lr.nx];
        for (o, (idx, w)) in tx.iter().enumerate() {
            tmp[j * nx_out + o] = (0..4).map(|k| w[k] * row[idx[k]]).sum();
        }
    }
    // Along y.
    let mut out = vec![0.0; ny_out * nx_out];
    for (o, (idx, w)) in ty.iter().enumerate() {
        let dst = &mut out[o * nx_out..(o + 1) * nx_out];
        for k in 0..4 {
            let src = &tmp[idx[k] * nx_out..(idx[k] + 1) * nx_out];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w[k] * s;
            }
        }
    }
    Field2D::new(nx_out, ny_out, out)
}

/// True when every tap of output sample `o` lies inside the source grid.
pub fn bicubic_interior(n_in: usize, n_out: usize, o: usize) -> bool {
    let scale = n_in as f64 / n_out as f64;
    let src = (o as f64 + 0.5) * scale - 0.5;
    let base = src.floor() as i64;
    base >= 1 && base + 3 <= n_in as i64
}
