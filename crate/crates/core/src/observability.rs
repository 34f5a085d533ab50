//! Singular-value analysis of the identification Jacobian: observability
//! indices, near-null parameter combinations and campaign ranking.
//!
//! Index definitions, with `s_1 >= ... >= s_N` the singular values and `m`
//! the number of residual rows:
//!
//! * `O1 = (s_1 * ... * s_N)^(1/N) / sqrt(m)`
//! * `O2 = s_N / s_1`
//! * `O3 = s_N`
//! * `O4 = s_N^2 / s_1`

use std::cmp::Ordering;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurements::{kinds_label, Kind};

pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Parameters whose combined variation leaves the residuals (nearly)
/// unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullDirection {
    /// Indices of the dominant components, ascending.
    pub params: Vec<usize>,
    /// Unit right singular vector.
    pub direction: Vec<f64>,
    pub singular_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityReport {
    /// Descending.
    pub singular_values: Vec<f64>,
    pub o1: f64,
    pub o2: f64,
    pub o3: f64,
    pub o4: f64,
    pub m: usize,
    pub unidentifiable: Vec<NullDirection>,
    pub rank_tol: f64,
    /// Set when the Jacobian is identically zero.
    pub degenerate: bool,
}

fn check_finite(j: &DMatrix<f64>) -> Result<()> {
    if j.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Jacobian".into()));
    }
    if j.ncols() == 0 {
        return Err(Error::Invalid("Jacobian has no columns".into()));
    }
    Ok(())
}

/// Singular values (descending) and the matching right singular vectors as
/// columns. Short matrices are padded with zero rows so that all `N` right
/// singular vectors are available.
fn svd_full(j: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (m, n) = j.shape();
    let a = if m < n {
        let mut p = DMatrix::zeros(n, n);
        p.rows_mut(0, m).copy_from(j);
        p
    } else {
        j.clone()
    };
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| {
        svd.singular_values[y]
            .partial_cmp(&svd.singular_values[x])
            .unwrap_or(Ordering::Equal)
    });
    let s = DVector::from_iterator(n, order.iter().map(|&i| svd.singular_values[i].max(0.0)));
    let v = DMatrix::from_fn(n, n, |r, c| v_t[(order[c], r)]);
    (s, v)
}

fn indices(s: &DVector<f64>, m: usize) -> (f64, f64, f64, f64, bool) {
    let n = s.len();
    let s1 = s[0];
    let sn = s[n - 1];
    if !(s1 > 0.0) {
        return (0.0, 0.0, 0.0, 0.0, true);
    }
    let log_mean = s.iter().map(|v| v.ln()).sum::<f64>() / n as f64;
    let o1 = if sn > 0.0 {
        log_mean.exp() / (m as f64).sqrt()
    } else {
        0.0
    };
    (o1, sn / s1, sn, sn * sn / s1, false)
}

fn null_directions(s: &DVector<f64>, v: &DMatrix<f64>, rank_tol: f64) -> Vec<NullDirection> {
    let s1 = s[0];
    (0..s.len())
        .filter(|&k| s[k] <= rank_tol * s1)
        .map(|k| {
            let col = v.column(k);
            let inf = col.amax();
            let params = (0..col.len())
                .filter(|&i| col[i].abs() > 0.1 * inf)
                .collect();
            NullDirection {
                params,
                direction: col.iter().copied().collect(),
                singular_value: s[k],
            }
        })
        .collect()
}

/// Indices and null directions of `j`, whose rows count `m`.
pub fn analyze(j: &DMatrix<f64>, m: usize, rank_tol: f64) -> Result<ObservabilityReport> {
    check_finite(j)?;
    if !(rank_tol >= 0.0) {
        return Err(Error::Invalid(format!(
            "rank_tol must be >= 0, got {rank_tol}"
        )));
    }
    let (s, v) = svd_full(j);
    let (o1, o2, o3, o4, degenerate) = indices(&s, m);
    let unidentifiable = if degenerate {
        (0..s.len())
            .map(|k| NullDirection {
                params: vec![k],
                direction: (0..s.len())
                    .map(|i| if i == k { 1.0 } else { 0.0 })
                    .collect(),
                singular_value: 0.0,
            })
            .collect()
    } else {
        null_directions(&s, &v, rank_tol)
    };
    Ok(ObservabilityReport {
        singular_values: s.iter().copied().collect(),
        o1,
        o2,
        o3,
        o4,
        m,
        unidentifiable,
        rank_tol,
        degenerate,
    })
}

/// Indices only, with the default rank tolerance for the null-space part.
pub fn observability_indices(j: &DMatrix<f64>, m: usize) -> Result<ObservabilityReport> {
    analyze(j, m, DEFAULT_RANK_TOL)
}

pub fn find_unidentifiable(j: &DMatrix<f64>, rank_tol: f64) -> Result<Vec<NullDirection>> {
    Ok(analyze(j, j.nrows(), rank_tol)?.unidentifiable)
}

/// Jacobian of the parameters in `keep` after eliminating all others.
///
/// The columns of `keep` are projected onto the orthogonal complement of
/// the remaining columns, so nuisance parameters (device poses, plane
/// coefficients, camera extrinsics) are estimated jointly but do not enter
/// the indices. The result has the same singular values as the inverse
/// square root of the marginal covariance of `keep`.
pub fn marginal_jacobian(j: &DMatrix<f64>, keep: &[usize]) -> Result<DMatrix<f64>> {
    check_finite(j)?;
    let n = j.ncols();
    if keep.iter().any(|&k| k >= n) {
        return Err(Error::Invalid("column index out of range".into()));
    }
    let nuisance: Vec<usize> = (0..n).filter(|c| !keep.contains(c)).collect();
    let jk = j.select_columns(keep);
    if nuisance.is_empty() {
        return Ok(jk);
    }
    let jn = j.select_columns(&nuisance);
    let svd = jn.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    let cols: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 1e-12 * smax)
        .collect();
    let u = u.select_columns(&cols);
    let proj = &u * (u.transpose() * &jk);
    Ok(jk - proj)
}

/// One row of a campaign ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignRow {
    pub kinds: Vec<Kind>,
    pub label: String,
    pub report: ObservabilityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignRanking {
    /// Best first: by O1, then O3, both descending; ties keep input order.
    pub rows: Vec<CampaignRow>,
    /// Every multi-kind row beats every single-kind row on both O1 and O3.
    /// `None` when either group is empty.
    pub multi_dominates: Option<bool>,
}

/// Ranks observability reports of several kind sets.
pub fn compare_campaigns(
    reports: Vec<(Vec<Kind>, ObservabilityReport)>,
) -> Result<CampaignRanking> {
    if let Some((_, first)) = reports.first() {
        let n = first.singular_values.len();
        if let Some((_, r)) = reports.iter().find(|(_, r)| r.singular_values.len() != n) {
            return Err(Error::LengthMismatch {
                what: "campaign parameter dimension",
                expected: n,
                got: r.singular_values.len(),
            });
        }
    }
    let mut rows: Vec<CampaignRow> = reports
        .into_iter()
        .map(|(kinds, report)| CampaignRow {
            label: kinds_label(&kinds.iter().copied().collect()),
            kinds,
            report,
        })
        .collect();
    rows.sort_by(|a, b| {
        b.report
            .o1
            .partial_cmp(&a.report.o1)
            .unwrap_or(Ordering::Equal)
            .then(
                b.report
                    .o3
                    .partial_cmp(&a.report.o3)
                    .unwrap_or(Ordering::Equal),
            )
    });
    let singles: Vec<&CampaignRow> = rows.iter().filter(|r| r.kinds.len() == 1).collect();
    let multis: Vec<&CampaignRow> = rows.iter().filter(|r| r.kinds.len() > 1).collect();
    let multi_dominates = if singles.is_empty() || multis.is_empty() {
        None
    } else {
        Some(multis.iter().all(|m| {
            singles
                .iter()
                .all(|s| m.report.o1 > s.report.o1 && m.report.o3 > s.report.o3)
        }))
    };
    Ok(CampaignRanking {
        rows,
        multi_dominates,
    })
}

impl CampaignRanking {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,kinds,m,o1,o2,o3,o4,unidentifiable\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{:e},{:e},{:e},{:e},{}",
                i + 1,
                r.label,
                r.report.m,
                r.report.o1,
                r.report.o2,
                r.report.o3,
                r.report.o4,
                r.report.unidentifiable.len()
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// One-sided Jacobi SVD, used as an independent reference.
    fn jacobi_singular_values(j: &DMatrix<f64>) -> Vec<f64> {
        let mut a = j.clone();
        let n = a.ncols();
        for _sweep in 0..100 {
            let mut off = 0.0f64;
            for p in 0..n {
                for q in p + 1..n {
                    let alpha = a.column(p).norm_squared();
                    let beta = a.column(q).norm_squared();
                    let gamma = a.column(p).dot(&a.column(q));
                    if gamma == 0.0 {
                        continue;
                    }
                    off = off.max(gamma.abs() / (alpha * beta).sqrt());
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let t = if zeta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for r in 0..a.nrows() {
                        let ap = a[(r, p)];
                        let aq = a[(r, q)];
                        a[(r, p)] = c * ap - s * aq;
                        a[(r, q)] = s * ap + c * aq;
                    }
                }
            }
            if off < 1e-15 {
                break;
            }
        }
        let mut s: Vec<f64> = (0..n).map(|c| a.column(c).norm()).collect();
        s.sort_by(|x, y| y.partial_cmp(x).unwrap());
        s
    }

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_indices() {
        let r = observability_indices(&DMatrix::identity(3, 3), 3).unwrap();
        assert_eq!(r.singular_values, vec![1.0, 1.0, 1.0]);
        assert_relative_eq!(r.o1, 1.0 / 3f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(r.o1, 0.5774, epsilon = 5e-5);
        assert_eq!((r.o2, r.o3, r.o4), (1.0, 1.0, 1.0));
        assert!(r.unidentifiable.is_empty());
    }

    #[test]
    fn diagonal_indices() {
        let j = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let r = observability_indices(&j, 2).unwrap();
        assert_relative_eq!(r.o1, 1.0, epsilon = 1e-15);
        assert_relative_eq!(r.o2, 0.5, epsilon = 1e-15);
        assert_relative_eq!(r.o3, 1.0, epsilon = 1e-15);
        assert_relative_eq!(r.o4, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn zero_jacobian_is_degenerate() {
        let r = observability_indices(&DMatrix::zeros(4, 2), 4).unwrap();
        assert!(r.degenerate);
        assert_eq!((r.o1, r.o2, r.o3, r.o4), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.unidentifiable.len(), 2);
    }

    #[test]
    fn rejects_non_finite() {
        let mut j = DMatrix::identity(2, 2);
        j[(0, 1)] = f64::NAN;
        assert!(observability_indices(&j, 2).is_err());
    }

    #[test]
    fn matches_jacobi_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..8);
            let m = n + rng.random_range(0..10);
            let j = random_matrix(&mut rng, m, n);
            let s_ref = jacobi_singular_values(&j);
            let r = observability_indices(&j, m).unwrap();
            for (a, b) in r.singular_values.iter().zip(&s_ref) {
                assert!((a - b).abs() <= 1e-10 * s_ref[0], "{a} vs {b}");
            }
            let geo = s_ref.iter().map(|v| v.ln()).sum::<f64>() / n as f64;
            let sn = s_ref[n - 1];
            assert_relative_eq!(r.o1, geo.exp() / (m as f64).sqrt(), max_relative = 1e-10);
            assert_relative_eq!(r.o2, sn / s_ref[0], max_relative = 1e-10);
            assert_relative_eq!(r.o3, sn, max_relative = 1e-10);
            assert_relative_eq!(r.o4, sn * sn / s_ref[0], max_relative = 1e-10);
        }
    }

    #[test]
    fn full_rank_has_no_null_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let j = random_matrix(&mut rng, 20, 6);
        assert!(find_unidentifiable(&j, DEFAULT_RANK_TOL)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn short_matrix_reports_missing_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let j = random_matrix(&mut rng, 2, 5);
        let nd = find_unidentifiable(&j, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(nd.len(), 3);
    }

    #[test]
    fn duplicated_column_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let n = rng.random_range(2..7);
            let base = random_matrix(&mut rng, 15, n);
            let dup = rng.random_range(0..n);
            let mut cols: Vec<usize> = (0..n).collect();
            let at = rng.random_range(0..=n);
            cols.insert(at, dup);
            let j = base.select_columns(&cols);
            let pos_dup = if at <= dup { dup + 1 } else { dup };
            let mut pair = vec![at, pos_dup];
            pair.sort();
            let nd = find_unidentifiable(&j, DEFAULT_RANK_TOL).unwrap();
            assert_eq!(nd.len(), 1);
            assert_eq!(nd[0].params, pair);
            let d = &nd[0].direction;
            assert_relative_eq!(d[pair[0]], -d[pair[1]], epsilon = 1e-8);
        }
    }

    #[test]
    fn marginal_jacobian_removes_nuisance_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let j = random_matrix(&mut rng, 30, 5);
        let keep = [0, 2, 3];
        let jm = marginal_jacobian(&j, &keep).unwrap();
        // the marginal information equals the Schur complement
        let a = j.transpose() * &j;
        let k = a.select_rows(&keep).select_columns(&keep);
        let nu = [1, 4];
        let b = a.select_rows(&keep).select_columns(&nu);
        let c = a.select_rows(&nu).select_columns(&nu);
        let schur = k - &b * c.try_inverse().unwrap() * b.transpose();
        let info = jm.transpose() * &jm;
        assert!((info - schur).amax() < 1e-10);
    }

    fn report(o1: f64, o3: f64) -> ObservabilityReport {
        ObservabilityReport {
            singular_values: vec![1.0, o3],
            o1,
            o2: o3,
            o3,
            o4: o3 * o3,
            m: 10,
            unidentifiable: vec![],
            rank_tol: DEFAULT_RANK_TOL,
            degenerate: false,
        }
    }

    #[test]
    fn campaign_ranking() {
        let single = compare_campaigns(vec![(vec![Kind::SelfContact], report(0.3, 0.1))]).unwrap();
        assert_eq!(single.rows.len(), 1);
        assert_eq!(single.multi_dominates, None);

        let tied = compare_campaigns(vec![
            (vec![Kind::SelfContact], report(0.3, 0.1)),
            (vec![Kind::SelfObservation], report(0.3, 0.1)),
        ])
        .unwrap();
        assert_eq!(tied.rows[0].label, "sc");
        assert_eq!(tied.rows[1].label, "so");

        let r = compare_campaigns(vec![
            (vec![Kind::SelfContact], report(0.3, 0.1)),
            (vec![Kind::SelfObservation], report(0.2, 0.2)),
            (
                vec![Kind::SelfContact, Kind::SelfObservation],
                report(0.5, 0.3),
            ),
        ])
        .unwrap();
        assert_eq!(r.rows[0].label, "sc+so");
        assert_eq!(r.multi_dominates, Some(true));
        let csv = r.to_csv();
        assert!(csv.starts_with("rank,kinds"));
        assert_eq!(csv.lines().count(), 4);

        let r = compare_campaigns(vec![
            (vec![Kind::SelfContact], report(0.3, 0.4)),
            (
                vec![Kind::SelfContact, Kind::SelfObservation],
                report(0.5, 0.3),
            ),
        ])
        .unwrap();
        assert_eq!(r.multi_dominates, Some(false));

        let mut bad = report(0.1, 0.1);
        bad.singular_values.push(0.0);
        assert!(compare_campaigns(vec![
            (vec![Kind::SelfContact], report(0.3, 0.1)),
            (vec![Kind::External], bad),
        ])
        .is_err());
    }

    fn arb_matrix() -> impl Strategy<Value = (DMatrix<f64>, u64)> {
        (1usize..6, 0usize..8, any::<u64>()).prop_map(|(n, extra, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (random_matrix(&mut rng, n + extra, n), seed)
        })
    }

    proptest! {
        #[test]
        fn row_permutation_invariance((j, seed) in arb_matrix()) {
            let m = j.nrows();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
            let mut perm: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let a = observability_indices(&j, m).unwrap();
            let b = observability_indices(&j.select_rows(&perm), m).unwrap();
            for (x, y) in [(a.o1, b.o1), (a.o2, b.o2), (a.o3, b.o3), (a.o4, b.o4)] {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }

        #[test]
        fn scaling_laws((j, _seed) in arb_matrix(), c in 0.01f64..100.0) {
            let m = j.nrows();
            let a = observability_indices(&j, m).unwrap();
            let b = observability_indices(&(&j * c), m).unwrap();
            prop_assert!((a.o2 - b.o2).abs() <= 1e-12 * a.o2.max(1.0));
            prop_assert!((a.o4 * c - b.o4).abs() <= 1e-12 * (a.o4 * c).max(1.0));
            prop_assert!((a.o1 * c - b.o1).abs() <= 1e-12 * (a.o1 * c).max(1.0));
            prop_assert!((a.o3 * c - b.o3).abs() <= 1e-12 * (a.o3 * c).max(1.0));
        }

        #[test]
        fn appending_rows_never_lowers_singular_values((j, seed) in arb_matrix(), k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xaa);
            let extra = random_matrix(&mut rng, k, j.ncols());
            let mut big = DMatrix::zeros(j.nrows() + k, j.ncols());
            big.rows_mut(0, j.nrows()).copy_from(&j);
            big.rows_mut(j.nrows(), k).copy_from(&extra);
            let a = observability_indices(&j, j.nrows()).unwrap();
            let b = observability_indices(&big, big.nrows()).unwrap();
            for (x, y) in a.singular_values.iter().zip(&b.singular_values) {
                prop_assert!(*y >= x - 1e-12 * x.max(1.0));
            }
            prop_assert!(b.o3 >= a.o3 - 1e-12);
        }
    }
}
