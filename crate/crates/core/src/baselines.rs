//! Non-diffusion reconstructions: affine POD projection and radial-basis
//! interpolation of the coarse field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field2D;
use crate::linalg::{axpy, lu_solve, Mat};
use crate::pod::LatentBasis;

/// `ū + ΦΦᵀ(x_up − ū)`.
pub fn pod_projection(basis: &LatentBasis, x_up: &Field2D) -> Result<Field2D> {
    let a = basis.project(x_up)?;
    let mut out = basis.reconstruct(&a)?;
    if let Some(mask) = x_up.mask() {
        out = out.with_mask(mask.to_vec())?;
    }
    Ok(out)
}

/// Radial kernel family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RbfKernel {
    /// `r² log r`
    ThinPlate,
    /// `exp(−(εr)²)`
    Gaussian { epsilon: f64 },
}

impl RbfKernel {
    #[inline]
    pub fn eval_r2(&self, r2: f64) -> f64 {
        match *self {
            RbfKernel::ThinPlate => {
                if r2 <= 0.0 {
                    0.0
                } else {
                    0.5 * r2 * r2.ln()
                }
            }
            RbfKernel::Gaussian { epsilon } => (-epsilon * epsilon * r2).exp(),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            RbfKernel::ThinPlate => Ok(()),
            RbfKernel::Gaussian { epsilon } if epsilon > 0.0 && epsilon.is_finite() => Ok(()),
            RbfKernel::Gaussian { epsilon } => Err(Error::InvalidArgument(format!(
                "Gaussian shape parameter must be positive, got {epsilon}"
            ))),
        }
    }
}

/// Fitted interpolant `s(x) = Σ w_i φ(‖x − x_i‖) + b₀ + b₁x + b₂y`.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfModel {
    pub kernel: RbfKernel,
    pub ridge: f64,
    pub centers: Vec<(f64, f64)>,
    /// Center weights followed by the three affine coefficients.
    pub weights: Vec<f64>,
}

impl RbfModel {
    pub fn eval_point(&self, x: f64, y: f64) -> f64 {
        let n = self.centers.len();
        let mut s = self.weights[n] + self.weights[n + 1] * x + self.weights[n + 2] * y;
        for (&(cx, cy), &w) in self.centers.iter().zip(&self.weights[..n]) {
            let (dx, dy) = (x - cx, y - cy);
            s += w * self.kernel.eval_r2(dx * dx + dy * dy);
        }
        s
    }
}

/// Ridged saddle-point system `[[K + λI, P], [Pᵀ, 0]]`.
pub fn rbf_system(centers: &[(f64, f64)], kernel: RbfKernel, ridge: f64) -> Mat {
    let n = centers.len();
    let m = n + 3;
    let mut a = Mat::zeros(m, m);
    for i in 0..n {
        let (xi, yi) = centers[i];
        for j in 0..n {
            let (dx, dy) = (xi - centers[j].0, yi - centers[j].1);
            let v = kernel.eval_r2(dx * dx + dy * dy) + if i == j { ridge } else { 0.0 };
            a.row_mut(i)[j] = v;
        }
        let p = [1.0, xi, yi];
        for (c, &pv) in p.iter().enumerate() {
            a.row_mut(i)[n + c] = pv;
            a.row_mut(n + c)[i] = pv;
        }
    }
    a
}

/// Fit on scattered points.
///
/// The saddle-point matrix is indefinite, so the solve uses LU with partial
/// pivoting.
pub fn rbf_fit_points(
    centers: &[(f64, f64)],
    values: &[f64],
    kernel: RbfKernel,
    ridge: f64,
) -> Result<RbfModel> {
    kernel.validate()?;
    if centers.len() != values.len() {
        return Err(Error::Shape(format!(
            "{} centers for {} values",
            centers.len(),
            values.len()
        )));
    }
    if centers.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "RBF fit needs at least 4 points, got {}",
            centers.len()
        )));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "ridge must be >= 0, got {ridge}"
        )));
    }
    let a = rbf_system(centers, kernel, ridge);
    let mut rhs = values.to_vec();
    rhs.extend_from_slice(&[0.0; 3]);
    let weights = lu_solve(&a, &rhs)?;
    Ok(RbfModel {
        kernel,
        ridge,
        centers: centers.to_vec(),
        weights,
    })
}

/// Cell-centered unit-square coordinates of every grid cell, row-major.
pub fn cell_centers(nx: usize, ny: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            out.push(((i as f64 + 0.5) / nx as f64, (j as f64 + 0.5) / ny as f64));
        }
    }
    out
}

/// Interpolant through the valid cells of a coarse field.
pub fn rbf_fit(lr: &Field2D, kernel: RbfKernel, ridge: f64) -> Result<RbfModel> {
    let all = cell_centers(lr.nx(), lr.ny());
    let mut centers = Vec::with_capacity(all.len());
    let mut values = Vec::with_capacity(all.len());
    for (idx, c) in all.into_iter().enumerate() {
        if lr.is_valid(idx) {
            centers.push(c);
            values.push(lr.values()[idx]);
        }
    }
    rbf_fit_points(&centers, &values, kernel, ridge)
}

/// Evaluate on a cell-centered `nx × ny` grid.
pub fn rbf_eval(model: &RbfModel, nx: usize, ny: usize) -> Result<Field2D> {
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument("empty output grid".into()));
    }
    let values = cell_centers(nx, ny)
        .into_iter()
        .map(|(x, y)| model.eval_point(x, y))
        .collect();
    Field2D::new(nx, ny, values)
}

/// Relative residual `‖A w − rhs‖∞ / max(‖rhs‖∞, 1)` of a fitted model.
pub fn rbf_residual(model: &RbfModel, values: &[f64]) -> Result<f64> {
    let a = rbf_system(&model.centers, model.kernel, model.ridge);
    let r = a.matvec(&model.weights)?;
    let mut rhs = values.to_vec();
    rhs.extend_from_slice(&[0.0; 3]);
    let scale = rhs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut diff = r;
    axpy(-1.0, &rhs, &mut diff);
    Ok(diff.iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale)
}
