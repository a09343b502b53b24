//! Dynamic event-study estimation.
//!
//! The main estimator absorbs unit and period fixed effects by alternating
//! within-demeaning, runs OLS on the demeaned design (treatment-by-event-time
//! dummies with tau = -1 omitted, plus time-varying covariates) and clusters
//! the covariance by unit. A pooled variant with period effects only serves
//! as the uncontrolled benchmark, and a lagged-outcome OLS replicates the
//! dynamic specification.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::matching::MatchedSet;
use crate::panel::LongPanel;
use crate::schema::Schema;
use crate::wide::EventWindow;

/// Convergence threshold for the alternating demeaning sweep.
const DEMEAN_TOL: f64 = 1e-10;
const DEMEAN_MAX_SWEEPS: usize = 100_000;
/// Normal 97.5% quantile used for the 95% confidence intervals.
const Z_95: f64 = 1.959963984540054;

/// Which units enter the estimation sample.
#[derive(Debug, Clone, Copy)]
pub enum Sample<'a> {
    AllUnits,
    /// Only units appearing in matched pairs, unweighted.
    Matched(&'a MatchedSet),
}

/// Fixed effects absorbed before OLS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FixedEffects {
    /// Unit and period effects (the event-study specification).
    TwoWay,
    /// Period effects only (uncontrolled benchmark for stability analysis).
    TimeOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Coefficient {
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
}

impl Coefficient {
    fn new(term: String, estimate: f64, se: f64) -> Coefficient {
        let p_value = if se > 0.0 {
            let normal = Normal::new(0.0, 1.0).unwrap();
            2.0 * (1.0 - normal.cdf((estimate / se).abs()))
        } else {
            f64::NAN
        };
        Coefficient {
            term,
            estimate,
            se,
            ci_low: estimate - Z_95 * se,
            ci_high: estimate + Z_95 * se,
            p_value,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventStudyResult {
    /// Event times with estimated interactions, ascending, tau = -1 absent.
    pub event_taus: Vec<i32>,
    pub event_coefficients: Vec<Coefficient>,
    pub covariate_coefficients: Vec<Coefficient>,
    /// Cluster-robust covariance over [event terms..., covariates...].
    pub vcov: DMatrix<f64>,
    pub residuals: Vec<f64>,
    pub n_rows: usize,
    pub n_units: usize,
    pub r2_within: f64,
    pub adj_r2_within: f64,
    pub r2_overall: f64,
    pub adj_r2_overall: f64,
    pub reference_period: i32,
    pub fixed_effects: FixedEffects,
}

impl EventStudyResult {
    pub fn coefficient_at(&self, tau: i32) -> Option<&Coefficient> {
        self.event_taus
            .iter()
            .position(|&t| t == tau)
            .map(|i| &self.event_coefficients[i])
    }
}

struct RegressionRows {
    y: Vec<f64>,
    /// Column-major design values.
    cols: Vec<Vec<f64>>,
    col_names: Vec<String>,
    n_event_terms: usize,
    unit_of_row: Vec<usize>,
    time_of_row: Vec<usize>,
    cluster_ids: Vec<u64>,
    n_units: usize,
    n_times: usize,
    event_taus: Vec<i32>,
}

/// Assembles outcome, event-dummy and covariate columns for the requested
/// sample. Rows need an observed outcome and complete covariates; units
/// with fewer than two usable rows are dropped (a single observation is
/// absorbed entirely by its unit effect).
fn build_rows(
    panel: &LongPanel,
    schema: &Schema,
    sample: Sample,
    covariates: &[String],
    window: EventWindow,
) -> Result<RegressionRows> {
    let outcome = schema.outcome_index();
    let treat = schema.treatment_index();
    let mut cov_idx = Vec::with_capacity(covariates.len());
    for c in covariates {
        cov_idx.push(schema.var_index(c)?);
    }
    let keep: Option<std::collections::BTreeSet<u64>> = match sample {
        Sample::AllUnits => None,
        Sample::Matched(m) => Some(m.matched_units()),
    };

    let event_taus: Vec<i32> = window.taus().filter(|&t| t != -1).collect();

    struct Raw {
        unit: u64,
        time: i32,
        y: f64,
        treated: f64,
        covs: Vec<f64>,
    }
    let mut raw: Vec<Raw> = Vec::new();
    for unit in panel.units() {
        if let Some(keep) = &keep {
            if !keep.contains(&unit) {
                continue;
            }
        }
        let rows = panel.unit_rows(unit);
        let treated = rows[0].values[treat].unwrap_or(0.0);
        let mut unit_raws = Vec::new();
        for r in rows {
            if !window.contains(r.time) {
                continue;
            }
            let Some(y) = r.values[outcome] else { continue };
            let covs: Option<Vec<f64>> = cov_idx.iter().map(|&j| r.values[j]).collect();
            let Some(covs) = covs else { continue };
            unit_raws.push(Raw {
                unit,
                time: r.time,
                y,
                treated,
                covs,
            });
        }
        if unit_raws.len() >= 2 {
            raw.extend(unit_raws);
        }
    }
    if raw.is_empty() {
        return Err(Error::Insufficient(
            "no usable observations in the estimation window".into(),
        ));
    }

    let mut unit_ids: Vec<u64> = raw.iter().map(|r| r.unit).collect();
    unit_ids.sort_unstable();
    unit_ids.dedup();
    let mut time_ids: Vec<i32> = raw.iter().map(|r| r.time).collect();
    time_ids.sort_unstable();
    time_ids.dedup();

    let n = raw.len();
    let n_event = event_taus.len();
    let mut cols = vec![vec![0.0; n]; n_event + covariates.len()];
    let mut col_names = Vec::with_capacity(cols.len());
    for &tau in &event_taus {
        col_names.push(event_term_name(tau));
    }
    col_names.extend(covariates.iter().cloned());

    let mut y = Vec::with_capacity(n);
    let mut unit_of_row = Vec::with_capacity(n);
    let mut time_of_row = Vec::with_capacity(n);
    let mut cluster_ids = Vec::with_capacity(n);
    for (i, r) in raw.iter().enumerate() {
        y.push(r.y);
        unit_of_row.push(unit_ids.binary_search(&r.unit).unwrap());
        time_of_row.push(time_ids.binary_search(&r.time).unwrap());
        cluster_ids.push(r.unit);
        if r.treated != 0.0 {
            if let Some(k) = event_taus.iter().position(|&t| t == r.time) {
                cols[k][i] = 1.0;
            }
        }
        for (j, &v) in r.covs.iter().enumerate() {
            cols[n_event + j][i] = v;
        }
    }

    Ok(RegressionRows {
        y,
        cols,
        col_names,
        n_event_terms: n_event,
        unit_of_row,
        time_of_row,
        cluster_ids,
        n_units: unit_ids.len(),
        n_times: time_ids.len(),
        event_taus,
    })
}

pub fn event_term_name(tau: i32) -> String {
    if tau < 0 {
        format!("treated_x_t-{}", -tau)
    } else {
        format!("treated_x_t+{tau}")
    }
}

/// One demeaning pass over `values` for the given grouping; returns the
/// largest absolute group mean removed.
fn demean_by(
    values: &mut [f64],
    group_of_row: &[usize],
    n_groups: usize,
    scratch: &mut [f64],
) -> f64 {
    let counts = &mut scratch[..n_groups];
    counts.iter_mut().for_each(|c| *c = 0.0);
    let mut sums = vec![0.0f64; n_groups];
    for (i, &g) in group_of_row.iter().enumerate() {
        sums[g] += values[i];
        counts[g] += 1.0;
    }
    let mut max_mean: f64 = 0.0;
    for g in 0..n_groups {
        if counts[g] > 0.0 {
            sums[g] /= counts[g];
            max_mean = max_mean.max(sums[g].abs());
        }
    }
    for (i, &g) in group_of_row.iter().enumerate() {
        values[i] -= sums[g];
    }
    max_mean
}

/// Alternating within-transformation until the largest removed group mean
/// falls below `DEMEAN_TOL` for every column.
fn two_way_demean(
    columns: &mut [Vec<f64>],
    unit_of_row: &[usize],
    time_of_row: &[usize],
    n_units: usize,
    n_times: usize,
) -> Result<()> {
    let mut scratch = vec![0.0f64; n_units.max(n_times)];
    for col in columns.iter_mut() {
        let mut converged = false;
        for _ in 0..DEMEAN_MAX_SWEEPS {
            let m1 = demean_by(col, unit_of_row, n_units, &mut scratch);
            let m2 = demean_by(col, time_of_row, n_times, &mut scratch);
            if m1.max(m2) < DEMEAN_TOL {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Fit(
                "two-way demeaning failed to converge".into(),
            ));
        }
    }
    Ok(())
}

/// Checks for (near-)collinear columns after demeaning by sequential
/// projection; returns the first offending column's name.
fn rank_check(cols: &[Vec<f64>], names: &[String]) -> Result<()> {
    let n = cols.first().map_or(0, |c| c.len());
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for (j, col) in cols.iter().enumerate() {
        let mut resid = col.clone();
        for b in &basis {
            let dot: f64 = resid.iter().zip(b).map(|(a, c)| a * c).sum();
            for (r, c) in resid.iter_mut().zip(b) {
                *r -= dot * c;
            }
        }
        let norm = resid.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = col.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        if norm <= 1e-8 * scale {
            return Err(Error::Collinear(names[j].clone()));
        }
        for r in &mut resid {
            *r /= norm;
        }
        basis.push(resid);
    }
    let _ = n;
    Ok(())
}

/// Cluster-robust sandwich covariance
/// `c * (X'X)^-1 (sum_g X_g' e_g e_g' X_g) (X'X)^-1` with the small-sample
/// factor `c = G/(G-1) * (N-1)/(N-K)`, where `k_model` counts every model
/// parameter including absorbed fixed effects.
pub fn cluster_vcov(
    x: &DMatrix<f64>,
    residuals: &DVector<f64>,
    clusters: &[u64],
    k_model: usize,
) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let k = x.ncols();
    if clusters.len() != n {
        return Err(Error::Fit("cluster ids must cover every row".into()));
    }
    let xtx = x.transpose() * x;
    let xtx_inv = xtx
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular("X'X in cluster_vcov".into()))?;

    let mut groups: std::collections::BTreeMap<u64, Vec<usize>> = std::collections::BTreeMap::new();
    for (i, &g) in clusters.iter().enumerate() {
        groups.entry(g).or_default().push(i);
    }
    let g_count = groups.len();
    if g_count < 2 {
        return Err(Error::TooFewClusters(g_count));
    }

    let mut meat = DMatrix::zeros(k, k);
    for rows in groups.values() {
        let mut score: DVector<f64> = DVector::zeros(k);
        for &i in rows {
            for j in 0..k {
                score[j] += x[(i, j)] * residuals[i];
            }
        }
        meat += &score * score.transpose();
    }

    let nf = n as f64;
    let gf = g_count as f64;
    let kf = k_model as f64;
    let denom = (nf - kf).max(1.0);
    let c = gf / (gf - 1.0) * (nf - 1.0) / denom;
    let mut v = c * &xtx_inv * meat * &xtx_inv;
    // Enforce exact symmetry against accumulation noise.
    for a in 0..k {
        for b in 0..a {
            let s = 0.5 * (v[(a, b)] + v[(b, a)]);
            v[(a, b)] = s;
            v[(b, a)] = s;
        }
    }
    Ok(v)
}

/// Estimates the dynamic event study. With [`FixedEffects::TwoWay`], unit
/// and period effects are absorbed by alternating demeaning; with
/// [`FixedEffects::TimeOnly`], period effects alone (the uncontrolled
/// benchmark: no covariates should then be passed).
pub fn fit_event_study(
    panel: &LongPanel,
    schema: &Schema,
    sample: Sample,
    covariates: &[String],
    window: EventWindow,
    fixed_effects: FixedEffects,
) -> Result<EventStudyResult> {
    let rows = build_rows(panel, schema, sample, covariates, window)?;
    let n = rows.y.len();
    let k = rows.cols.len();

    let raw_y = rows.y.clone();
    let mut all_cols: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    all_cols.push(rows.y);
    all_cols.extend(rows.cols);

    let k_absorbed = match fixed_effects {
        FixedEffects::TwoWay => {
            two_way_demean(
                &mut all_cols,
                &rows.unit_of_row,
                &rows.time_of_row,
                rows.n_units,
                rows.n_times,
            )?;
            rows.n_units + rows.n_times - 1
        }
        FixedEffects::TimeOnly => {
            let mut scratch = vec![0.0f64; rows.n_times];
            for col in all_cols.iter_mut() {
                demean_by(col, &rows.time_of_row, rows.n_times, &mut scratch);
            }
            rows.n_times
        }
    };

    let y_dm = all_cols.remove(0);
    rank_check(&all_cols, &rows.col_names)?;

    let mut x = DMatrix::zeros(n, k);
    for (j, col) in all_cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    let y_vec = DVector::from_column_slice(&y_dm);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y_vec;
    let beta = xtx
        .clone()
        .lu()
        .solve(&xty)
        .ok_or_else(|| Error::Singular("X'X in event-study OLS".into()))?;

    let residuals = &y_vec - &x * &beta;
    // Unit effects are nested within the unit-level clusters and are
    // excluded from the small-sample N-K correction (time effects and the
    // grand mean are counted); the full absorbed count still enters the
    // adjusted R-squared below.
    let k_model = k + rows.n_times;
    let vcov = cluster_vcov(&x, &residuals, &rows.cluster_ids, k_model)?;

    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    let tss_within: f64 = y_dm.iter().map(|v| v * v).sum();
    let grand = raw_y.iter().sum::<f64>() / n as f64;
    let tss_overall: f64 = raw_y.iter().map(|v| (v - grand) * (v - grand)).sum();
    let r2 = |tss: f64| if tss > 0.0 { 1.0 - rss / tss } else { f64::NAN };
    let adj = |r2v: f64| {
        let dof = (n as f64 - (k + k_absorbed) as f64).max(1.0);
        1.0 - (1.0 - r2v) * (n as f64 - 1.0) / dof
    };
    let r2_within = r2(tss_within);
    let r2_overall = r2(tss_overall);

    let mut event_coefficients = Vec::with_capacity(rows.n_event_terms);
    for j in 0..rows.n_event_terms {
        event_coefficients.push(Coefficient::new(
            rows.col_names[j].clone(),
            beta[j],
            vcov[(j, j)].max(0.0).sqrt(),
        ));
    }
    let mut covariate_coefficients = Vec::new();
    for j in rows.n_event_terms..k {
        covariate_coefficients.push(Coefficient::new(
            rows.col_names[j].clone(),
            beta[j],
            vcov[(j, j)].max(0.0).sqrt(),
        ));
    }

    Ok(EventStudyResult {
        event_taus: rows.event_taus,
        event_coefficients,
        covariate_coefficients,
        vcov,
        residuals: residuals.iter().copied().collect(),
        n_rows: n,
        n_units: rows.n_units,
        r2_within,
        adj_r2_within: adj(r2_within),
        r2_overall,
        adj_r2_overall: adj(r2_overall),
        reference_period: -1,
        fixed_effects,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicOlsResult {
    pub event_taus: Vec<i32>,
    pub event_coefficients: Vec<Coefficient>,
    pub lag: Coefficient,
    pub covariate_coefficients: Vec<Coefficient>,
    pub r2: f64,
    pub adj_r2: f64,
    pub n_rows: usize,
    pub n_units: usize,
}

impl DynamicOlsResult {
    pub fn coefficient_at(&self, tau: i32) -> Option<&Coefficient> {
        self.event_taus
            .iter()
            .position(|&t| t == tau)
            .map(|i| &self.event_coefficients[i])
    }
}

/// OLS of the outcome on its one-wave lag, treated-by-event-time dummies
/// (tau = -1 reference), period dummies and covariates, without unit
/// effects; covariance clustered by unit. The lag consumes each unit's
/// first wave, so the earliest estimable interaction is -k_pre + 1.
pub fn fit_dynamic_ols(
    panel: &LongPanel,
    schema: &Schema,
    covariates: &[String],
    window: EventWindow,
) -> Result<DynamicOlsResult> {
    let outcome = schema.outcome_index();
    let treat = schema.treatment_index();
    let mut cov_idx = Vec::with_capacity(covariates.len());
    for c in covariates {
        cov_idx.push(schema.var_index(c)?);
    }

    struct Raw {
        unit: u64,
        time: i32,
        y: f64,
        lag: f64,
        treated: f64,
        covs: Vec<f64>,
    }
    let mut raw = Vec::new();
    for unit in panel.units() {
        let rows = panel.unit_rows(unit);
        let treated = rows[0].values[treat].unwrap_or(0.0);
        for r in rows {
            if !window.contains(r.time) {
                continue;
            }
            let Some(y) = r.values[outcome] else { continue };
            let Some(lag) = panel.value(unit, r.time - 1, outcome) else { continue };
            if !window.contains(r.time - 1) {
                continue;
            }
            let covs: Option<Vec<f64>> = cov_idx.iter().map(|&j| r.values[j]).collect();
            let Some(covs) = covs else { continue };
            raw.push(Raw {
                unit,
                time: r.time,
                y,
                lag,
                treated,
                covs,
            });
        }
    }
    if raw.is_empty() {
        return Err(Error::Insufficient(
            "no unit has consecutive observed waves for the lag structure".into(),
        ));
    }

    let mut taus: Vec<i32> = raw.iter().map(|r| r.time).collect();
    taus.sort_unstable();
    taus.dedup();
    let event_taus: Vec<i32> = taus.iter().copied().filter(|&t| t != -1).collect();
    let time_dummies: Vec<i32> = event_taus.clone();

    let n = raw.len();
    let k = 2 + time_dummies.len() + event_taus.len() + covariates.len();
    let mut x = DMatrix::zeros(n, k);
    let mut names = Vec::with_capacity(k);
    names.push("intercept".to_string());
    names.push("lag_outcome".to_string());
    for &t in &time_dummies {
        names.push(format!("t{}{}", if t < 0 { "-" } else { "+" }, t.abs()));
    }
    for &t in &event_taus {
        names.push(event_term_name(t));
    }
    names.extend(covariates.iter().cloned());

    let mut y = DVector::zeros(n);
    let mut clusters = Vec::with_capacity(n);
    for (i, r) in raw.iter().enumerate() {
        y[i] = r.y;
        clusters.push(r.unit);
        x[(i, 0)] = 1.0;
        x[(i, 1)] = r.lag;
        if let Some(j) = time_dummies.iter().position(|&t| t == r.time) {
            x[(i, 2 + j)] = 1.0;
        }
        if r.treated != 0.0 {
            if let Some(j) = event_taus.iter().position(|&t| t == r.time) {
                x[(i, 2 + time_dummies.len() + j)] = 1.0;
            }
        }
        for (j, &v) in r.covs.iter().enumerate() {
            x[(i, 2 + time_dummies.len() + event_taus.len() + j)] = v;
        }
    }

    let cols: Vec<Vec<f64>> = (0..k).map(|j| x.column(j).iter().copied().collect()).collect();
    rank_check(&cols, &names)?;

    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let beta = xtx
        .lu()
        .solve(&xty)
        .ok_or_else(|| Error::Singular("X'X in dynamic OLS".into()))?;
    let residuals = &y - &x * &beta;
    let vcov = cluster_vcov(&x, &residuals, &clusters, k)?;

    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    let grand = y.iter().sum::<f64>() / n as f64;
    let tss: f64 = y.iter().map(|v| (v - grand) * (v - grand)).sum();
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { f64::NAN };
    let adj_r2 = 1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n as f64 - k as f64).max(1.0);

    let coef = |j: usize| Coefficient::new(names[j].clone(), beta[j], vcov[(j, j)].max(0.0).sqrt());
    let lag = coef(1);
    let event_coefficients: Vec<Coefficient> = (0..event_taus.len())
        .map(|j| coef(2 + time_dummies.len() + j))
        .collect();
    let covariate_coefficients: Vec<Coefficient> = (0..covariates.len())
        .map(|j| coef(2 + time_dummies.len() + event_taus.len() + j))
        .collect();

    let mut units: Vec<u64> = clusters.clone();
    units.sort_unstable();
    units.dedup();
    Ok(DynamicOlsResult {
        event_taus,
        event_coefficients,
        lag,
        covariate_coefficients,
        r2,
        adj_r2,
        n_rows: n,
        n_units: units.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrendTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Joint Wald placebo test that all pre-period interactions (tau <= -2)
/// are zero, against chi-square with one degree of freedom per
/// coefficient.
pub fn pretrend_joint_test(result: &EventStudyResult) -> Result<PretrendTest> {
    let idx: Vec<usize> = result
        .event_taus
        .iter()
        .enumerate()
        .filter(|(_, &t)| t <= -2)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(Error::Insufficient(
            "no pre-period coefficients to test".into(),
        ));
    }
    let q = idx.len();
    let b = DVector::from_fn(q, |i, _| result.event_coefficients[idx[i]].estimate);
    let v = DMatrix::from_fn(q, q, |i, j| result.vcov[(idx[i], idx[j])]);
    let v_inv = v
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular("pre-period covariance block".into()))?;
    let statistic = (b.transpose() * v_inv * &b)[(0, 0)];
    let chi2 = ChiSquared::new(q as f64).map_err(|e| Error::Fit(e.to_string()))?;
    let p_value = if statistic <= 0.0 {
        1.0
    } else {
        1.0 - chi2.cdf(statistic)
    };
    Ok(PretrendTest {
        statistic,
        dof: q,
        p_value,
    })
}
