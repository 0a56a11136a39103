//! Variance-ordered POD latent space.
//!
//! The basis is computed by the method of snapshots: with `N` centered
//! snapshots stacked as the columns of `U` (`d×N`, `N ≪ d`), the Gram matrix
//! `UᵀU` shares its non-zero spectrum with the spatial covariance, and each
//! mode is `U·v_k` normalized. Eigenvalues are reported as sample covariance
//! eigenvalues (`/(N-1)`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field2D;
use crate::linalg::{axpy, dot, jacobi_eigh, norm2, qr_q, Mat};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Pod,
    RandomOrthonormal,
}

/// Affine latent space `u ≈ mean + Σ a_k φ_k`.
///
/// Modes are stored one per row (`K×d`, i.e. `Φᵀ`) so projections are
/// contiguous dot products.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBasis {
    pub kind: BasisKind,
    pub mean: Field2D,
    modes: Mat,
    /// Covariance eigenvalues of the full computed spectrum (POD only; may
    /// extend past the number of stored modes).
    pub eigenvalues: Vec<f64>,
    pub total_variance: f64,
}

pub type PodBasis = LatentBasis;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    Physical,
    Standardized,
}

/// Latent coefficient vector tagged with its units.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffVec {
    pub values: Vec<f64>,
    pub units: Units,
}

impl CoeffVec {
    pub fn physical(values: Vec<f64>) -> Self {
        Self {
            values,
            units: Units::Physical,
        }
    }

    pub fn standardized(values: Vec<f64>) -> Self {
        Self {
            values,
            units: Units::Standardized,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl LatentBasis {
    pub fn from_parts(
        kind: BasisKind,
        mean: Field2D,
        modes: Mat,
        eigenvalues: Vec<f64>,
        total_variance: f64,
    ) -> Result<Self> {
        if modes.cols() != mean.len() {
            return Err(Error::Shape(format!(
                "modes of length {} for a mean field of {} cells",
                modes.cols(),
                mean.len()
            )));
        }
        Ok(Self {
            kind,
            mean,
            modes,
            eigenvalues,
            total_variance,
        })
    }

    /// Number of stored modes.
    pub fn k(&self) -> usize {
        self.modes.rows()
    }

    /// Grid size `d`.
    pub fn dim(&self) -> usize {
        self.modes.cols()
    }

    pub fn mode(&self, k: usize) -> &[f64] {
        self.modes.row(k)
    }

    /// `Φᵀ` (`K×d`).
    pub fn modes_t(&self) -> &Mat {
        &self.modes
    }

    /// `Φ` (`d×K`).
    pub fn phi(&self) -> Mat {
        self.modes.transpose()
    }

    /// Leading-`k` view sharing the mean and spectrum.
    pub fn truncate(&self, k: usize) -> Result<LatentBasis> {
        if k == 0 || k > self.k() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate {} modes to {k}",
                self.k()
            )));
        }
        let d = self.dim();
        let modes = Mat::from_vec(k, d, self.modes.as_slice()[..k * d].to_vec())?;
        Ok(LatentBasis {
            kind: self.kind,
            mean: self.mean.clone(),
            modes,
            eigenvalues: self.eigenvalues.clone(),
            total_variance: self.total_variance,
        })
    }

    fn check_field(&self, f: &Field2D) -> Result<()> {
        self.mean.check_grid(f, "latent basis")
    }

    /// `a_k = ⟨φ_k, f − ū⟩`.
    pub fn project(&self, f: &Field2D) -> Result<CoeffVec> {
        self.check_field(f)?;
        let centered: Vec<f64> = f
            .values()
            .iter()
            .zip(self.mean.values())
            .map(|(v, m)| v - m)
            .collect();
        Ok(CoeffVec::physical(self.project_centered(&centered)))
    }

    pub(crate) fn project_centered(&self, centered: &[f64]) -> Vec<f64> {
        (0..self.k()).map(|k| dot(self.mode(k), centered)).collect()
    }

    /// `ū + Σ a_k φ_k`.
    pub fn reconstruct(&self, a: &CoeffVec) -> Result<Field2D> {
        if a.units != Units::Physical {
            return Err(Error::InvalidArgument(
                "reconstruction needs physical-unit coefficients".into(),
            ));
        }
        if a.len() != self.k() {
            return Err(Error::Shape(format!(
                "{} coefficients for {} modes",
                a.len(),
                self.k()
            )));
        }
        let mut out = self.mean.clone();
        for (k, &c) in a.values.iter().enumerate() {
            axpy(c, self.mode(k), out.values_mut());
        }
        Ok(out)
    }

    /// `Σ_{k≤K} λ_k / Σ λ` for every prefix of the stored spectrum.
    pub fn cumulative_variance(&self) -> Vec<f64> {
        cumulative_fraction(&self.eigenvalues, self.total_variance)
    }
}

fn cumulative_fraction(eigenvalues: &[f64], total: f64) -> Vec<f64> {
    let mut acc = 0.0;
    eigenvalues
        .iter()
        .map(|&l| {
            acc += l;
            if total > 0.0 {
                acc / total
            } else {
                0.0
            }
        })
        .collect()
}

/// POD by the method of snapshots, keeping at most `max_modes` modes.
pub fn compute_pod(snapshots: &[&Field2D], max_modes: usize) -> Result<PodBasis> {
    let n = snapshots.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "POD needs at least 2 snapshots, got {n}"
        )));
    }
    if max_modes == 0 {
        return Err(Error::InvalidArgument("max_modes must be positive".into()));
    }
    let first = snapshots[0];
    for s in snapshots {
        first.check_grid(s, "POD snapshot")?;
        if !s.values().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("POD snapshot".into()));
        }
    }
    let d = first.len();
    let mut mean = vec![0.0; d];
    for s in snapshots {
        axpy(1.0, s.values(), &mut mean);
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);

    let centered: Vec<Vec<f64>> = snapshots
        .iter()
        .map(|s| s.values().iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    let mut gram = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let g = dot(&centered[i], &centered[j]);
            gram[(i, j)] = g;
            gram[(j, i)] = g;
        }
    }
    let trace: f64 = (0..n).map(|i| gram[(i, i)]).sum();
    if trace <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let eig = jacobi_eigh(&gram)?;
    let lead = eig.values[0];
    if lead <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let denom = (n - 1) as f64;
    let kept: Vec<usize> = (0..n).filter(|&k| eig.values[k] >= 1e-12 * lead).collect();
    let eigenvalues: Vec<f64> = kept.iter().map(|&k| eig.values[k] / denom).collect();
    let total_variance = trace / denom;

    let k = kept.len().min(max_modes);
    let mut modes: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &col in kept.iter().take(k) {
        let mut phi = vec![0.0; d];
        for (i, u) in centered.iter().enumerate() {
            let w = eig.vectors[(i, col)];
            if w != 0.0 {
                axpy(w, u, &mut phi);
            }
        }
        let nrm = norm2(&phi);
        phi.iter_mut().for_each(|v| *v /= nrm);
        modes.push(phi);
    }
    // Clean up rounding in trailing modes; columns are already orthonormal
    // to working precision so this only touches the last few digits.
    let q = qr_q(&Mat::from_cols(&modes)?)?;
    let mut modes_t = q.transpose();
    // Keep the eigenvector sign convention on the physical modes.
    for r in 0..k {
        let row = modes_t.row_mut(r);
        if crate::linalg::sign_of_dominant(row) < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let mean = Field2D::new(first.nx(), first.ny(), mean)?;
    LatentBasis::from_parts(BasisKind::Pod, mean, modes_t, eigenvalues, total_variance)
}

/// Smallest `K` whose cumulative variance fraction reaches `eta`.
pub fn select_k(eigenvalues: &[f64], eta: f64) -> Result<usize> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::InvalidArgument(format!("eta = {eta} not in (0,1)")));
    }
    let total: f64 = eigenvalues.iter().sum();
    if eigenvalues.is_empty() || total <= 0.0 || eigenvalues.iter().any(|&l| l < 0.0) {
        return Err(Error::InvalidArgument(
            "eigenvalues must be non-negative and not all zero".into(),
        ));
    }
    let cum = cumulative_fraction(eigenvalues, total);
    Ok(cum
        .iter()
        .position(|&c| c >= eta - 1e-12)
        .map_or(eigenvalues.len(), |p| p + 1))
}

/// Orthonormal basis from the QR factor of a Gaussian `d×K` matrix, sharing
/// the POD mean field.
pub fn random_orthonormal_basis(
    stream: &mut RngStream,
    k: usize,
    mean: &Field2D,
) -> Result<LatentBasis> {
    let d = mean.len();
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!(
            "need 0 < K <= d, got K={k}, d={d}"
        )));
    }
    let g = Mat::from_vec(d, k, stream.randn(d * k))?;
    let q = qr_q(&g)?;
    LatentBasis::from_parts(
        BasisKind::RandomOrthonormal,
        mean.clone(),
        q.transpose(),
        Vec::new(),
        0.0,
    )
}

/// Per-mode affine map between physical and standardized coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffStandardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub floor: f64,
}

pub const STD_FLOOR: f64 = 1e-8;

impl CoeffStandardizer {
    /// Per-mode sample mean and sample (`N-1`) standard deviation, floored
    /// at [`STD_FLOOR`].
    pub fn fit(coeffs: &[Vec<f64>]) -> Result<Self> {
        let n = coeffs.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "standardizer needs at least 2 vectors, got {n}"
            )));
        }
        let k = coeffs[0].len();
        if coeffs.iter().any(|c| c.len() != k) {
            return Err(Error::Shape("coefficient vectors differ in length".into()));
        }
        let mut mean = vec![0.0; k];
        for c in coeffs {
            axpy(1.0, c, &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; k];
        for c in coeffs {
            for j in 0..k {
                var[j] += (c[j] - mean[j]).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| (v / (n - 1) as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self {
            mean,
            std,
            floor: STD_FLOOR,
        })
    }

    pub fn k(&self) -> usize {
        self.mean.len()
    }

    /// Restrict to the leading `k` modes.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate standardizer of {} modes to {k}",
                self.k()
            )));
        }
        Ok(Self {
            mean: self.mean[..k].to_vec(),
            std: self.std[..k].to_vec(),
            floor: self.floor,
        })
    }

    fn check(&self, a: &CoeffVec, units: Units) -> Result<()> {
        if a.units != units {
            return Err(Error::InvalidArgument(format!(
                "expected {units:?} coefficients, got {:?}",
                a.units
            )));
        }
        if a.len() != self.k() {
            return Err(Error::Shape(format!(
                "{} coefficients for a {}-mode standardizer",
                a.len(),
                self.k()
            )));
        }
        Ok(())
    }

    pub fn standardize(&self, a: &CoeffVec) -> Result<CoeffVec> {
        self.check(a, Units::Physical)?;
        Ok(CoeffVec::standardized(
            a.values
                .iter()
                .enumerate()
                .map(|(j, v)| (v - self.mean[j]) / self.std[j])
                .collect(),
        ))
    }

    pub fn destandardize(&self, a: &CoeffVec) -> Result<CoeffVec> {
        self.check(a, Units::Standardized)?;
        Ok(CoeffVec::physical(
            a.values
                .iter()
                .enumerate()
                .map(|(j, v)| v * self.std[j] + self.mean[j])
                .collect(),
        ))
    }

    /// In-place variants on raw slices, for hot loops.
    pub fn standardize_in_place(&self, a: &mut [f64]) {
        for (j, v) in a.iter_mut().enumerate() {
            *v = (*v - self.mean[j]) / self.std[j];
        }
    }

    pub fn destandardize_in_place(&self, a: &mut [f64]) {
        for (j, v) in a.iter_mut().enumerate() {
            *v = *v * self.std[j] + self.mean[j];
        }
    }
}

/// Sample covariance (`M-1`) of a set of equal-length vectors.
pub fn sample_covariance(samples: &[Vec<f64>]) -> Result<Mat> {
    let m = samples.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "covariance needs at least 2 samples, got {m}"
        )));
    }
    let k = samples[0].len();
    let mut mean = vec![0.0; k];
    for s in samples {
        axpy(1.0, s, &mut mean);
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut cov = Mat::zeros(k, k);
    for s in samples {
        for i in 0..k {
            let di = s[i] - mean[i];
            for j in i..k {
                cov[(i, j)] += di * (s[j] - mean[j]);
            }
        }
    }
    for i in 0..k {
        for j in i..k {
            let v = cov[(i, j)] / (m - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

/// Per-pixel variance `diag(Φ Σ Φᵀ)` of a latent covariance, without forming
/// the `d×d` matrix.
///
/// `sigma` is in the units described by `units`; standardized covariances
/// are rescaled entrywise by `σ_j σ_k` first.
pub fn propagate_covariance(
    basis: &LatentBasis,
    standardizer: Option<&CoeffStandardizer>,
    sigma: &Mat,
    units: Units,
) -> Result<Field2D> {
    let k = basis.k();
    if sigma.rows() != k || sigma.cols() != k {
        return Err(Error::Shape(format!(
            "{}x{} covariance for {k} modes",
            sigma.rows(),
            sigma.cols()
        )));
    }
    let asym = sigma.asymmetry();
    if asym > 1e-12 * sigma.max_abs().max(f64::MIN_POSITIVE) {
        return Err(Error::NotSymmetric(asym));
    }
    let phys = match units {
        Units::Physical => sigma.clone(),
        Units::Standardized => {
            let st = standardizer.ok_or_else(|| {
                Error::InvalidArgument("standardized covariance needs a standardizer".into())
            })?;
            if st.k() != k {
                return Err(Error::Shape("standardizer/basis mode count differ".into()));
            }
            let mut p = sigma.clone();
            for i in 0..k {
                for j in 0..k {
                    p[(i, j)] *= st.std[i] * st.std[j];
                }
            }
            p
        }
    };
    let d = basis.dim();
    let mut var = vec![0.0; d];
    let mut w = vec![0.0; d];
    for j in 0..k {
        // w = Σ_k Σ_jk φ_k
        w.iter_mut().for_each(|v| *v = 0.0);
        for l in 0..k {
            let s = phys[(j, l)];
            if s != 0.0 {
                axpy(s, basis.mode(l), &mut w);
            }
        }
        for ((v, p), q) in var.iter_mut().zip(basis.mode(j)).zip(&w) {
            *v += p * q;
        }
    }
    for v in var.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Field2D::new(basis.mean.nx(), basis.mean.ny(), var)
}

/// Mean squared reconstruction error `‖f − P(f)‖²/d`, averaged over fields.
pub fn mean_reconstruction_error(basis: &LatentBasis, fields: &[&Field2D]) -> Result<f64> {
    let mut total = 0.0;
    for f in fields {
        let r = basis.reconstruct(&basis.project(f)?)?;
        total += f
            .values()
            .iter()
            .zip(r.values())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / f.len() as f64;
    }
    Ok(total / fields.len() as f64)
}
