//! Deterministic and probabilistic scores for reconstructed fields.
//!
//! Ensembles are passed as plain member slices so every method, including
//! single-member deterministic baselines, goes through the same code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field2D;

/// Nominal levels used for calibration error.
pub const DEFAULT_LEVELS: [f64; 4] = [0.5, 0.7, 0.9, 0.95];

fn resolve_mask<'a>(truth: &'a Field2D, mask: Option<&'a [bool]>) -> Result<Option<&'a [bool]>> {
    let m = mask.or(truth.mask());
    if let Some(m) = m {
        if m.len() != truth.len() {
            return Err(Error::Shape(format!(
                "mask of {} entries for {} cells",
                m.len(),
                truth.len()
            )));
        }
    }
    Ok(m)
}

#[inline]
fn valid(mask: Option<&[bool]>, idx: usize) -> bool {
    mask.is_none_or(|m| m[idx])
}

/// Sums of squared and absolute errors over valid cells.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorSums {
    pub sq: f64,
    pub abs: f64,
    pub count: usize,
}

impl ErrorSums {
    pub fn add(&mut self, other: &ErrorSums) {
        self.sq += other.sq;
        self.abs += other.abs;
        self.count += other.count;
    }

    pub fn rmse(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::EmptyMask);
        }
        Ok((self.sq / self.count as f64).sqrt())
    }

    pub fn mae(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(self.abs / self.count as f64)
    }
}

/// Error sums over cells that are valid in `mask` (or in the truth's own
/// mask when `mask` is `None`).
pub fn error_sums(pred: &Field2D, truth: &Field2D, mask: Option<&[bool]>) -> Result<ErrorSums> {
    truth.check_grid(pred, "error")?;
    let mask = resolve_mask(truth, mask)?;
    let mut out = ErrorSums::default();
    for (idx, (p, t)) in pred.values().iter().zip(truth.values()).enumerate() {
        if valid(mask, idx) {
            let e = p - t;
            out.sq += e * e;
            out.abs += e.abs();
            out.count += 1;
        }
    }
    Ok(out)
}

pub fn rmse_mae(pred: &Field2D, truth: &Field2D, mask: Option<&[bool]>) -> Result<(f64, f64)> {
    let s = error_sums(pred, truth, mask)?;
    Ok((s.rmse()?, s.mae()?))
}

/// Empirical quantile of sorted data with fractional index `h = (n−1)p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `q`-quantile of a reference sample (non-finite entries are rejected).
pub fn extreme_threshold(reference: &[f64], q: f64) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument(
            "empty extreme-event reference".into(),
        ));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!(
            "quantile {q} outside [0, 1]"
        )));
    }
    if reference.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("extreme-event reference".into()));
    }
    let mut s = reference.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&s, q))
}

/// Valid cells of `truth` strictly above the `q`-quantile of `reference`.
/// At `q = 0` every valid cell is marked.
pub fn extreme_mask(truth: &Field2D, q: f64, reference: &[f64]) -> Result<Vec<bool>> {
    let thr = extreme_threshold(reference, q)?;
    Ok(mask_above(truth, thr, q == 0.0))
}

/// Valid cells strictly above `threshold`; `inclusive` also marks ties.
pub fn mask_above(truth: &Field2D, threshold: f64, inclusive: bool) -> Vec<bool> {
    truth
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| truth.is_valid(i) && (v > threshold || (inclusive && v >= threshold)))
        .collect()
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument("no nominal levels".into()));
    }
    for w in levels.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidArgument(
                "levels must be strictly increasing".into(),
            ));
        }
    }
    if levels.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::InvalidArgument("levels must lie in (0, 1)".into()));
    }
    Ok(())
}

fn check_members(members: &[Field2D], truth: &Field2D, min: usize) -> Result<()> {
    if members.len() < min {
        return Err(Error::InvalidArgument(format!(
            "need at least {min} ensemble members, got {}",
            members.len()
        )));
    }
    for m in members {
        truth.check_grid(m, "ensemble member")?;
    }
    Ok(())
}

/// Per-cell coverage indicators for several levels at once.
///
/// Returns, for each level, a vector over all cells (`false` on masked cells)
/// plus the number of valid cells. Intervals are the central empirical
/// quantile ranges with inclusive endpoints.
pub fn covered_cells(
    members: &[Field2D],
    truth: &Field2D,
    levels: &[f64],
    mask: Option<&[bool]>,
) -> Result<(Vec<Vec<bool>>, usize)> {
    check_members(members, truth, 2)?;
    check_levels(levels)?;
    let mask = resolve_mask(truth, mask)?;
    let mut out = vec![vec![false; truth.len()]; levels.len()];
    let mut buf = vec![0.0; members.len()];
    let mut count = 0;
    for idx in 0..truth.len() {
        if !valid(mask, idx) {
            continue;
        }
        count += 1;
        for (b, m) in buf.iter_mut().zip(members) {
            *b = m.values()[idx];
        }
        buf.sort_by(f64::total_cmp);
        let y = truth.values()[idx];
        for (li, &p) in levels.iter().enumerate() {
            let lo = quantile_sorted(&buf, 0.5 * (1.0 - p));
            let hi = quantile_sorted(&buf, 0.5 * (1.0 + p));
            out[li][idx] = lo <= y && y <= hi;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((out, count))
}

/// Fraction of valid cells whose truth lies in the central `p` interval.
pub fn coverage(
    members: &[Field2D],
    truth: &Field2D,
    p: f64,
    mask: Option<&[bool]>,
) -> Result<f64> {
    Ok(coverage_levels(members, truth, &[p], mask)?[0])
}

pub fn coverage_levels(
    members: &[Field2D],
    truth: &Field2D,
    levels: &[f64],
    mask: Option<&[bool]>,
) -> Result<Vec<f64>> {
    let (cells, n) = covered_cells(members, truth, levels, mask)?;
    Ok(cells
        .iter()
        .map(|c| c.iter().filter(|&&b| b).count() as f64 / n as f64)
        .collect())
}

/// One verification case: ensemble members and the truth they target.
#[derive(Clone, Copy, Debug)]
pub struct Case<'a> {
    pub members: &'a [Field2D],
    pub truth: &'a Field2D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityCurve {
    pub levels: Vec<f64>,
    pub per_case: Vec<Vec<f64>>,
    /// Mean of the per-case curves.
    pub mean: Vec<f64>,
    /// Coverage pooled over every valid cell of every case.
    pub pooled: Vec<f64>,
}

pub fn reliability_curve(
    cases: &[Case<'_>],
    levels: &[f64],
    mask: Option<&[bool]>,
) -> Result<ReliabilityCurve> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument(
            "reliability curve needs at least one case".into(),
        ));
    }
    check_levels(levels)?;
    let mut per_case = Vec::with_capacity(cases.len());
    let mut hits = vec![0usize; levels.len()];
    let mut total = 0usize;
    for c in cases {
        let (cells, n) = covered_cells(c.members, c.truth, levels, mask)?;
        let counts: Vec<usize> = cells
            .iter()
            .map(|v| v.iter().filter(|&&b| b).count())
            .collect();
        for (h, k) in hits.iter_mut().zip(&counts) {
            *h += k;
        }
        total += n;
        per_case.push(
            counts
                .iter()
                .map(|&k| k as f64 / n as f64)
                .collect::<Vec<_>>(),
        );
    }
    let mean = (0..levels.len())
        .map(|l| per_case.iter().map(|c| c[l]).sum::<f64>() / cases.len() as f64)
        .collect();
    let pooled = hits.iter().map(|&h| h as f64 / total as f64).collect();
    Ok(ReliabilityCurve {
        levels: levels.to_vec(),
        per_case,
        mean,
        pooled,
    })
}

/// Mean absolute gap between empirical and nominal coverage.
pub fn mace(empirical: &[f64], levels: &[f64]) -> Result<f64> {
    if empirical.is_empty() || empirical.len() != levels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} coverages for {} levels",
            empirical.len(),
            levels.len()
        )));
    }
    Ok(empirical
        .iter()
        .zip(levels)
        .map(|(e, l)| (e - l).abs())
        .sum::<f64>()
        / levels.len() as f64)
}

/// Which pairwise-spread normalization to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrpsEstimator {
    /// `1/(2M²)`
    #[default]
    Standard,
    /// `1/(2M(M−1))`, unbiased for the spread term.
    Fair,
}

/// Ensemble CRPS `(1/M)Σ|x_i − y| − c·ΣΣ|x_i − x_j|`, in `O(M log M)`.
pub fn crps_ensemble(members: &[f64], y: f64) -> f64 {
    crps_with(members, y, CrpsEstimator::Standard)
}

pub fn crps_with(members: &[f64], y: f64, est: CrpsEstimator) -> f64 {
    let mut s = members.to_vec();
    s.sort_by(f64::total_cmp);
    crps_sorted(&s, y, est)
}

fn crps_sorted(sorted: &[f64], y: f64, est: CrpsEstimator) -> f64 {
    let m = sorted.len();
    if m == 0 {
        return f64::NAN;
    }
    let mf = m as f64;
    let skill = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / mf;
    // Σ_{i,j} |x_i − x_j| = 2 Σ_i (2i − M + 1) x_(i); the weights sum to zero,
    // so offsetting by x_(0) is free and keeps equal members exactly at 0
    let lo = sorted[0];
    let spread: f64 = 2.0
        * sorted
            .iter()
            .enumerate()
            .map(|(i, x)| (2.0 * i as f64 - mf + 1.0) * (x - lo))
            .sum::<f64>();
    let denom = match est {
        CrpsEstimator::Standard => 2.0 * mf * mf,
        CrpsEstimator::Fair if m > 1 => 2.0 * mf * (mf - 1.0),
        CrpsEstimator::Fair => return skill,
    };
    (skill - spread / denom).max(0.0)
}

/// Sum and count of per-cell CRPS over valid cells.
pub fn crps_sum(
    members: &[Field2D],
    truth: &Field2D,
    mask: Option<&[bool]>,
    est: CrpsEstimator,
) -> Result<(f64, usize)> {
    check_members(members, truth, 1)?;
    let mask = resolve_mask(truth, mask)?;
    let mut buf = vec![0.0; members.len()];
    let (mut sum, mut count) = (0.0, 0usize);
    for idx in 0..truth.len() {
        if !valid(mask, idx) {
            continue;
        }
        for (b, m) in buf.iter_mut().zip(members) {
            *b = m.values()[idx];
        }
        buf.sort_by(f64::total_cmp);
        sum += crps_sorted(&buf, truth.values()[idx], est);
        count += 1;
    }
    Ok((sum, count))
}

pub fn crps_field(members: &[Field2D], truth: &Field2D, mask: Option<&[bool]>) -> Result<f64> {
    let (s, n) = crps_sum(members, truth, mask, CrpsEstimator::Standard)?;
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(s / n as f64)
}

/// Per-cell coverage frequency across cases minus `p`.
pub fn spatial_calibration_map(
    cases: &[Case<'_>],
    p: f64,
    mask: Option<&[bool]>,
) -> Result<Field2D> {
    if cases.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "calibration map needs at least 2 cases, got {}",
            cases.len()
        )));
    }
    let first = cases[0].truth;
    let mut hits = vec![0usize; first.len()];
    for c in cases {
        first.check_grid(c.truth, "calibration map case")?;
        let (cells, _) = covered_cells(c.members, c.truth, &[p], mask)?;
        for (h, &b) in hits.iter_mut().zip(&cells[0]) {
            *h += b as usize;
        }
    }
    let n = cases.len() as f64;
    let values = hits.iter().map(|&h| h as f64 / n - p).collect();
    let out = Field2D::new(first.nx(), first.ny(), values)?;
    match resolve_mask(first, mask)? {
        Some(m) => out.with_mask(m.to_vec()),
        None => Ok(out),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub level: f64,
    /// Mean of per-case coverage.
    pub coverage: f64,
    pub pooled: f64,
}

/// Coverage for nested prefixes of each case's members.
pub fn ensemble_size_sweep(
    cases: &[Case<'_>],
    sizes: &[usize],
    levels: &[f64],
    mask: Option<&[bool]>,
) -> Result<Vec<SweepRow>> {
    if sizes.iter().any(|&s| s < 2) {
        return Err(Error::InvalidArgument("ensemble sizes must be >= 2".into()));
    }
    let mut rows = Vec::new();
    for &size in sizes {
        let sub: Vec<Case<'_>> = cases
            .iter()
            .map(|c| {
                if c.members.len() < size {
                    Err(Error::InvalidArgument(format!(
                        "sweep size {size} exceeds {} available members",
                        c.members.len()
                    )))
                } else {
                    Ok(Case {
                        members: &c.members[..size],
                        truth: c.truth,
                    })
                }
            })
            .collect::<Result<_>>()?;
        let curve = reliability_curve(&sub, levels, mask)?;
        for (li, &level) in levels.iter().enumerate() {
            rows.push(SweepRow {
                size,
                level,
                coverage: curve.mean[li],
                pooled: curve.pooled[li],
            });
        }
    }
    Ok(rows)
}

/// Aggregate scores for one method over a set of cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    pub extreme_rmse: f64,
    pub extreme_mae: f64,
    pub levels: Vec<f64>,
    /// Per-case-mean coverage at each level; empty for single-member methods.
    pub coverage: Vec<f64>,
    pub coverage_pooled: Vec<f64>,
    pub mace: Option<f64>,
    pub crps: f64,
    pub cases: usize,
}

/// Score point predictions (`preds[i]`) and ensembles (`cases[i].members`).
///
/// RMSE/MAE are pooled over every valid cell of every case. The extreme subset
/// is the set of truth cells above `extreme_threshold`.
pub fn evaluate_cases(
    cases: &[Case<'_>],
    preds: &[Field2D],
    levels: &[f64],
    extreme_threshold: f64,
    mask: Option<&[bool]>,
) -> Result<MetricReport> {
    if cases.is_empty() || cases.len() != preds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} cases for {} predictions",
            cases.len(),
            preds.len()
        )));
    }
    let mut all = ErrorSums::default();
    let mut ext = ErrorSums::default();
    let (mut crps_total, mut crps_n) = (0.0, 0usize);
    for (c, p) in cases.iter().zip(preds) {
        let m = resolve_mask(c.truth, mask)?;
        all.add(&error_sums(p, c.truth, m)?);
        let emask: Vec<bool> = mask_above(c.truth, extreme_threshold, false)
            .into_iter()
            .enumerate()
            .map(|(i, b)| b && valid(m, i))
            .collect();
        ext.add(&error_sums(p, c.truth, Some(&emask))?);
        let (s, n) = crps_sum(c.members, c.truth, m, CrpsEstimator::Standard)?;
        crps_total += s;
        crps_n += n;
    }
    let ensemble = cases.iter().all(|c| c.members.len() >= 2);
    let (coverage, coverage_pooled, mace_v) = if ensemble {
        let curve = reliability_curve(cases, levels, mask)?;
        let m = mace(&curve.mean, levels)?;
        (curve.mean, curve.pooled, Some(m))
    } else {
        (Vec::new(), Vec::new(), None)
    };
    Ok(MetricReport {
        rmse: all.rmse()?,
        mae: all.mae()?,
        extreme_rmse: ext.rmse().unwrap_or(f64::NAN),
        extreme_mae: ext.mae().unwrap_or(f64::NAN),
        levels: levels.to_vec(),
        coverage,
        coverage_pooled,
        mace: mace_v,
        crps: crps_total / crps_n.max(1) as f64,
        cases: cases.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn f(v: &[f64]) -> Field2D {
        Field2D::new(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn rmse_mae_examples() {
        let t = f(&[1.0, 2.0, 3.0]);
        assert_eq!(rmse_mae(&t, &t, None).unwrap(), (0.0, 0.0));
        let p = t.map(|v| v + 2.0);
        let (r, m) = rmse_mae(&p, &t, None).unwrap();
        assert!((r - 2.0).abs() < 1e-15 && (m - 2.0).abs() < 1e-15);
        let (r, m) = rmse_mae(&f(&[3.0, -4.0]), &f(&[0.0, 0.0]), None).unwrap();
        assert!((r - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(m, 3.5);
        assert!(matches!(
            rmse_mae(&t, &t, Some(&[false; 3])),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn extreme_quantiles() {
        let reference: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!((extreme_threshold(&reference, 0.9).unwrap() - 9.1).abs() < 1e-12);
        let truth = f(&[9.0, 9.2, 10.0, 11.0]);
        assert_eq!(
            extreme_mask(&truth, 0.9, &reference).unwrap(),
            vec![false, true, true, true]
        );
        assert_eq!(
            extreme_mask(&truth, 1.0, &reference).unwrap(),
            vec![false, false, false, true]
        );
        assert!(extreme_mask(&truth, 0.0, &reference)
            .unwrap()
            .iter()
            .all(|&b| b));
        assert!(extreme_mask(&truth, 0.5, &[]).is_err());
    }

    #[test]
    fn coverage_examples() {
        let truth = f(&[50.0]);
        let members: Vec<Field2D> = (0..=100).map(|i| f(&[i as f64])).collect();
        assert_eq!(coverage(&members, &truth, 0.5, None).unwrap(), 1.0);
        assert_eq!(coverage(&members, &f(&[80.0]), 0.5, None).unwrap(), 0.0);
        let same = vec![truth.clone(); 5];
        for p in DEFAULT_LEVELS {
            assert_eq!(coverage(&same, &truth, p, None).unwrap(), 1.0);
        }
        assert!(coverage(&members[..1], &truth, 0.5, None).is_err());
        assert!(coverage(&members, &truth, 1.0, None).is_err());
    }

    #[test]
    fn coverage_self_consistent_gaussian() {
        let mut s = RngStream::new(11, "test/cov");
        let n = 10_000;
        let members: Vec<Field2D> = (0..100).map(|_| f(&s.randn(n))).collect();
        let truth = f(&s.randn(n));
        let c = coverage_levels(&members, &truth, &[0.5, 0.9], None).unwrap();
        assert!((c[0] - 0.5).abs() <= 0.02, "{c:?}");
        assert!((c[1] - 0.9).abs() <= 0.02, "{c:?}");
    }

    #[test]
    fn mace_examples() {
        let levels = DEFAULT_LEVELS;
        assert_eq!(mace(&levels, &levels).unwrap(), 0.0);
        let off: Vec<f64> = levels.iter().map(|l| l + 0.05).collect();
        assert!((mace(&off, &levels).unwrap() - 0.05).abs() < 1e-12);
        assert!(mace(&[0.5], &levels).is_err());
    }

    #[test]
    fn crps_examples() {
        assert_eq!(crps_ensemble(&[0.3], 1.0), 0.7);
        assert_eq!(crps_ensemble(&[2.0, 2.0, 2.0], 2.0), 0.0);
        assert!((crps_ensemble(&[0.0, 1.0], 0.5) - 0.25).abs() < 1e-15);
        // fair estimator: 0.5 - 2/(2·2·1) = 0.0
        assert!(crps_with(&[0.0, 1.0], 0.5, CrpsEstimator::Fair).abs() < 1e-15);
    }

    #[test]
    fn crps_matches_pairwise_sum() {
        let mut s = RngStream::new(12, "test/crps");
        for _ in 0..50 {
            let x = s.randn(17);
            let y = s.next_gaussian();
            let m = x.len() as f64;
            let a: f64 = x.iter().map(|v| (v - y).abs()).sum::<f64>() / m;
            let b: f64 = x
                .iter()
                .flat_map(|u| x.iter().map(move |v| (u - v).abs()))
                .sum::<f64>();
            let want = a - b / (2.0 * m * m);
            assert!((crps_ensemble(&x, y) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn calibration_map_bounds_and_errors() {
        let mut s = RngStream::new(13, "test/map");
        let truths: Vec<Field2D> = (0..6).map(|_| f(&s.randn(20))).collect();
        let ens: Vec<Vec<Field2D>> = (0..6)
            .map(|_| (0..30).map(|_| f(&s.randn(20))).collect())
            .collect();
        let cases: Vec<Case<'_>> = ens
            .iter()
            .zip(&truths)
            .map(|(m, t)| Case {
                members: m,
                truth: t,
            })
            .collect();
        let map = spatial_calibration_map(&cases, 0.9, None).unwrap();
        assert!(map
            .values()
            .iter()
            .all(|&v| (-0.9..=0.1 + 1e-12).contains(&v)));
        assert!(spatial_calibration_map(&cases[..1], 0.9, None).is_err());
    }

    #[test]
    fn sweep_nests_members() {
        let mut s = RngStream::new(14, "test/sweep");
        let truth = f(&s.randn(50));
        let members: Vec<Field2D> = (0..20).map(|_| f(&s.randn(50))).collect();
        let cases = [Case {
            members: &members,
            truth: &truth,
        }];
        let rows = ensemble_size_sweep(&cases, &[5, 20], &[0.5, 0.9], None).unwrap();
        assert_eq!(rows.len(), 4);
        let direct = coverage(&members[..5], &truth, 0.9, None).unwrap();
        assert_eq!(rows[1].coverage, direct);
        assert!(ensemble_size_sweep(&cases, &[21], &[0.5], None).is_err());
        assert!(ensemble_size_sweep(&cases, &[1], &[0.5], None).is_err());
    }

    #[test]
    fn report_single_member() {
        let truth = f(&[0.0, 1.0, 2.0, 3.0]);
        let pred = f(&[0.5, 1.0, 2.0, 2.0]);
        let members = [pred.clone()];
        let cases = [Case {
            members: &members,
            truth: &truth,
        }];
        let r = evaluate_cases(&cases, &[pred], &DEFAULT_LEVELS, 1.5, None).unwrap();
        assert!(r.mace.is_none() && r.coverage.is_empty());
        assert!((r.mae - 0.375).abs() < 1e-15);
        assert!((r.crps - r.mae).abs() < 1e-15);
        assert!((r.extreme_mae - 0.5).abs() < 1e-15);
        assert!(r.rmse >= r.mae);
    }
}
