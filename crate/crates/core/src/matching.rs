//! Propensity-score estimation, nearest-neighbor caliper matching and
//! covariate-balance diagnostics.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::LongPanel;
use crate::schema::{Schema, VarRole};

/// Default caliper width in units of the logit-propensity standard deviation.
pub const DEFAULT_CALIPER_MULTIPLIER: f64 = 0.2;
/// Post-matching |SMD| above this flags residual imbalance.
pub const SMD_THRESHOLD: f64 = 0.1;

const IRLS_MAX_ITER: usize = 50;
const IRLS_TOL: f64 = 1e-8;
/// |standardized coefficient| beyond this is treated as separation.
const SEPARATION_COEF: f64 = 50.0;

/// Baseline covariate values, one row per unit.
#[derive(Debug, Clone)]
pub struct BaselineMatrix {
    pub units: Vec<u64>,
    pub covariates: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub treated: Vec<bool>,
    /// Units excluded for missing baseline covariate cells.
    pub dropped: Vec<u64>,
}

/// Extracts per-unit baseline (tau = -1) covariate vectors. Static
/// variables are read from the unit's first row, dynamic ones from the
/// tau = -1 row; units with any missing requested cell are dropped and
/// reported.
pub fn baseline_covariates(
    panel: &LongPanel,
    schema: &Schema,
    covariates: &[String],
) -> Result<BaselineMatrix> {
    let mut var_idx = Vec::with_capacity(covariates.len());
    for name in covariates {
        var_idx.push(schema.var_index(name)?);
    }
    let treat = schema.treatment_index();

    let mut units = Vec::new();
    let mut rows = Vec::new();
    let mut treated = Vec::new();
    let mut dropped = Vec::new();
    'unit: for unit in panel.units() {
        let unit_rows = panel.unit_rows(unit);
        let baseline = unit_rows.iter().find(|r| r.time == -1);
        let mut row = Vec::with_capacity(var_idx.len());
        for &j in &var_idx {
            let value = if schema.variables[j].role == VarRole::Static {
                unit_rows[0].values[j]
            } else {
                baseline.and_then(|r| r.values[j])
            };
            match value {
                Some(v) => row.push(v),
                None => {
                    dropped.push(unit);
                    continue 'unit;
                }
            }
        }
        let Some(Some(d)) = unit_rows.first().map(|r| r.values[treat]) else {
            dropped.push(unit);
            continue;
        };
        units.push(unit);
        rows.push(row);
        treated.push(d != 0.0);
    }
    Ok(BaselineMatrix {
        units,
        covariates: covariates.to_vec(),
        rows,
        treated,
        dropped,
    })
}

/// Logistic propensity model on the original covariate scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityModel {
    pub covariates: Vec<String>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl PropensityModel {
    pub fn score(&self, row: &[f64]) -> f64 {
        let eta: f64 = self.intercept
            + row
                .iter()
                .zip(&self.coefficients)
                .map(|(x, b)| x * b)
                .sum::<f64>();
        sigmoid(eta)
    }
}

fn sigmoid(eta: f64) -> f64 {
    // Clamp keeps scores strictly inside (0, 1) so logits stay finite.
    (1.0 / (1.0 + (-eta).exp())).clamp(1e-12, 1.0 - 1e-12)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Shared penalized-IRLS core on columns standardized to mean 0, sd 1.
/// Returns `([intercept, slopes...], means, sds, converged, iterations)`;
/// zero-variance columns get slope 0.
fn irls_standardized(
    rows: &[Vec<f64>],
    treated: &[bool],
    ridge: f64,
    detect_separation: bool,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, bool, usize)> {
    let n = rows.len();
    let p = rows.first().map_or(0, |r| r.len());
    if n == 0 {
        return Err(Error::Insufficient("no units to fit a logistic model on".into()));
    }

    let mut mean = vec![0.0; p];
    let mut sd = vec![0.0; p];
    for j in 0..p {
        mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
        sd[j] = var.sqrt();
    }

    let mut x = DMatrix::zeros(n, p + 1);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for j in 0..p {
            x[(i, j + 1)] = if sd[j] > 0.0 {
                (rows[i][j] - mean[j]) / sd[j]
            } else {
                0.0
            };
        }
    }
    let y = DVector::from_fn(n, |i, _| if treated[i] { 1.0 } else { 0.0 });

    let mut beta: DVector<f64> = DVector::zeros(p + 1);
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..IRLS_MAX_ITER {
        iterations = iter + 1;
        let eta = &x * &beta;
        let mu = eta.map(sigmoid);
        let grad = x.transpose() * (&y - &mu) - ridge * &beta;
        if grad.amax() < IRLS_TOL {
            converged = true;
            break;
        }
        let mut xtwx = DMatrix::zeros(p + 1, p + 1);
        for i in 0..n {
            let w = mu[i] * (1.0 - mu[i]);
            for a in 0..p + 1 {
                for b in a..p + 1 {
                    xtwx[(a, b)] += w * x[(i, a)] * x[(i, b)];
                }
            }
        }
        for a in 0..p + 1 {
            xtwx[(a, a)] += ridge;
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let step = xtwx
            .lu()
            .solve(&grad)
            .ok_or_else(|| Error::Singular("X'WX in logistic IRLS".into()))?;
        beta += step;

        if detect_separation && beta.iter().skip(1).any(|b| b.abs() > SEPARATION_COEF) {
            return Err(Error::PerfectSeparation);
        }
    }
    if detect_separation {
        // A fit whose linear predictor saturates the sigmoid while
        // classifying every unit perfectly has degenerate scores; the
        // gradient underflows to zero there, so this fires whether or not
        // the loop "converged".
        let eta = &x * &beta;
        let classified = (0..n).all(|i| (eta[i] > 0.0) == treated[i]);
        if classified && eta.amax() > 15.0 {
            return Err(Error::PerfectSeparation);
        }
    }
    Ok((
        beta.iter().copied().collect(),
        mean,
        sd,
        converged,
        iterations,
    ))
}

/// Fits the propensity model by iteratively reweighted least squares on
/// internally standardized covariates; coefficients are reported on the
/// original scale.
pub fn fit_propensity(baseline: &BaselineMatrix) -> Result<PropensityModel> {
    let n_treated = baseline.treated.iter().filter(|&&t| t).count();
    if n_treated == 0 || n_treated == baseline.treated.len() {
        return Err(Error::Insufficient(
            "propensity fitting needs at least one unit in each arm".into(),
        ));
    }
    let (beta_std, mean, sd, converged, iterations) =
        irls_standardized(&baseline.rows, &baseline.treated, 0.0, true)?;

    let p = baseline.covariates.len();
    let mut coefficients = vec![0.0; p];
    let mut intercept = beta_std[0];
    for j in 0..p {
        if sd[j] > 0.0 {
            coefficients[j] = beta_std[j + 1] / sd[j];
            intercept -= beta_std[j + 1] * mean[j] / sd[j];
        }
    }
    Ok(PropensityModel {
        covariates: baseline.covariates.clone(),
        coefficients,
        intercept,
        converged,
        iterations,
    })
}

/// Ridge-regularized logistic classifier on prepared features; used by the
/// adversarial fidelity metric. Never raises separation errors.
pub fn ridge_logistic_predict(
    train_rows: &[Vec<f64>],
    train_labels: &[bool],
    test_rows: &[Vec<f64>],
    ridge: f64,
) -> Result<Vec<f64>> {
    let (beta_std, mean, sd, _, _) = irls_standardized(train_rows, train_labels, ridge, false)?;
    let p = mean.len();
    Ok(test_rows
        .iter()
        .map(|row| {
            let mut eta = beta_std[0];
            for j in 0..p {
                if sd[j] > 0.0 {
                    eta += beta_std[j + 1] * (row[j] - mean[j]) / sd[j];
                }
            }
            sigmoid(eta)
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchedPair {
    pub treated: u64,
    pub control: u64,
    /// |logit(score_t) - logit(score_c)|.
    pub distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchedSet {
    pub pairs: Vec<MatchedPair>,
    pub dropped_treated: Vec<u64>,
    /// Controls left unused by the 1:1 assignment.
    pub dropped_controls: Vec<u64>,
    pub caliper: f64,
}

impl MatchedSet {
    pub fn matched_units(&self) -> BTreeSet<u64> {
        self.pairs
            .iter()
            .flat_map(|p| [p.treated, p.control])
            .collect()
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }
}

/// Greedy 1:1 nearest-neighbor matching on the logit propensity without
/// replacement. Treated units are processed in descending score order
/// (ties by lowest unit id); the caliper is `multiplier` times the sample
/// standard deviation of the logit scores over all units. Treated units
/// with no unused control inside the caliper are dropped and reported.
pub fn match_caliper(
    units: &[u64],
    scores: &[f64],
    treated: &[bool],
    caliper_multiplier: f64,
) -> MatchedSet {
    assert_eq!(units.len(), scores.len());
    assert_eq!(units.len(), treated.len());
    let logits: Vec<f64> = scores.iter().map(|&s| logit(s)).collect();

    let n = logits.len();
    let caliper = if n >= 2 {
        let mean = logits.iter().sum::<f64>() / n as f64;
        let var = logits.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        caliper_multiplier * var.sqrt()
    } else {
        0.0
    };

    let mut treated_order: Vec<usize> = (0..n).filter(|&i| treated[i]).collect();
    treated_order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(units[a].cmp(&units[b]))
    });
    let mut controls: Vec<usize> = (0..n).filter(|&i| !treated[i]).collect();
    controls.sort_by(|&a, &b| units[a].cmp(&units[b]));
    let mut used = vec![false; n];

    let mut pairs = Vec::new();
    let mut dropped_treated = Vec::new();
    for &t in &treated_order {
        let mut best: Option<(usize, f64)> = None;
        for &c in &controls {
            if used[c] {
                continue;
            }
            let d = (logits[t] - logits[c]).abs();
            let better = match best {
                None => true,
                Some((bc, bd)) => d < bd || (d == bd && units[c] < units[bc]),
            };
            if better {
                best = Some((c, d));
            }
        }
        match best {
            Some((c, d)) if d <= caliper => {
                used[c] = true;
                pairs.push(MatchedPair {
                    treated: units[t],
                    control: units[c],
                    distance: d,
                });
            }
            _ => dropped_treated.push(units[t]),
        }
    }
    let dropped_controls = controls
        .iter()
        .filter(|&&c| !used[c])
        .map(|&c| units[c])
        .collect();
    dropped_treated.sort_unstable();
    MatchedSet {
        pairs,
        dropped_treated,
        dropped_controls,
        caliper,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateBalance {
    pub covariate: String,
    pub mean_treated_before: f64,
    pub mean_control_before: f64,
    /// Control minus treated, the sign convention of baseline tables.
    pub diff_in_means_before: f64,
    pub smd_before: f64,
    pub smd_after: f64,
    /// Zero pooled SD with unequal means (SMD reported infinite).
    pub degenerate: bool,
    /// |smd_after| above the balance threshold.
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceReport {
    pub rows: Vec<CovariateBalance>,
    pub n_treated_before: usize,
    pub n_control_before: usize,
    pub n_pairs: usize,
    pub threshold: f64,
}

impl BalanceReport {
    pub fn all_balanced(&self) -> bool {
        self.rows.iter().all(|r| !r.flagged)
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn smd(treated: &[f64], control: &[f64]) -> (f64, bool) {
    let (mt, st) = mean_sd(treated);
    let (mc, sc) = mean_sd(control);
    let pooled = ((st * st + sc * sc) / 2.0).sqrt();
    if pooled == 0.0 {
        if (mt - mc).abs() < 1e-12 {
            (0.0, false)
        } else {
            (f64::INFINITY, true)
        }
    } else {
        ((mt - mc) / pooled, false)
    }
}

/// Standardized mean differences (treated minus control over the pooled
/// SD) before and after matching for each covariate, at baseline.
pub fn balance_report(
    baseline: &BaselineMatrix,
    matched: &MatchedSet,
    threshold: f64,
) -> BalanceReport {
    let matched_units = matched.matched_units();
    let mut rows = Vec::with_capacity(baseline.covariates.len());
    for (j, name) in baseline.covariates.iter().enumerate() {
        let mut t_before = Vec::new();
        let mut c_before = Vec::new();
        let mut t_after = Vec::new();
        let mut c_after = Vec::new();
        for (i, &unit) in baseline.units.iter().enumerate() {
            let v = baseline.rows[i][j];
            if baseline.treated[i] {
                t_before.push(v);
                if matched_units.contains(&unit) {
                    t_after.push(v);
                }
            } else {
                c_before.push(v);
                if matched_units.contains(&unit) {
                    c_after.push(v);
                }
            }
        }
        let (mt, _) = mean_sd(&t_before);
        let (mc, _) = mean_sd(&c_before);
        let (smd_before, degen_b) = smd(&t_before, &c_before);
        let (smd_after, degen_a) = smd(&t_after, &c_after);
        rows.push(CovariateBalance {
            covariate: name.clone(),
            mean_treated_before: mt,
            mean_control_before: mc,
            diff_in_means_before: mc - mt,
            smd_before,
            smd_after,
            degenerate: degen_b || degen_a,
            flagged: smd_after.abs() > threshold,
        });
    }
    BalanceReport {
        rows,
        n_treated_before: baseline.treated.iter().filter(|&&t| t).count(),
        n_control_before: baseline.treated.iter().filter(|&&t| !t).count(),
        n_pairs: matched.n_pairs(),
        threshold,
    }
}

/// Writes matched pairs as CSV (treated, control, distance).
pub fn write_pairs_csv(matched: &MatchedSet, path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["treated", "control", "distance"])?;
    for p in &matched.pairs {
        w.write_record(&[
            p.treated.to_string(),
            p.control.to_string(),
            p.distance.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchDiagnostics {
    pub model: PropensityModel,
    pub balance: BalanceReport,
    pub caliper: f64,
    pub n_pairs: usize,
    pub dropped_treated: usize,
    pub dropped_controls: usize,
}

/// One-call convenience: extract baseline covariates, fit the propensity
/// model, match with the caliper, and report balance.
pub fn match_panel(
    panel: &LongPanel,
    schema: &Schema,
    covariates: &[String],
    caliper_multiplier: f64,
) -> Result<(MatchedSet, MatchDiagnostics)> {
    let baseline = baseline_covariates(panel, schema, covariates)?;
    let model = fit_propensity(&baseline)?;
    let scores: Vec<f64> = baseline.rows.iter().map(|r| model.score(r)).collect();
    let matched = match_caliper(&baseline.units, &scores, &baseline.treated, caliper_multiplier);
    let balance = balance_report(&baseline, &matched, SMD_THRESHOLD);
    let diagnostics = MatchDiagnostics {
        model,
        caliper: matched.caliper,
        n_pairs: matched.n_pairs(),
        dropped_treated: matched.dropped_treated.len(),
        dropped_controls: matched.dropped_controls.len(),
        balance,
    };
    Ok((matched, diagnostics))
}
