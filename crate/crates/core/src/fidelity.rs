//! Synthetic-data evaluation: statistical fidelity, structural error and
//! causal-validity metrics comparing a real and a synthetic panel.
//!
//! Metric definitions are version-tagged in every report; padded cells are
//! excluded from all distributional statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::ridge_logistic_predict;
use crate::panel::LongPanel;
use crate::schema::Schema;
use crate::seed;
use crate::wide::{EventWindow, WideTable};
use rand::seq::SliceRandom;
use rand::Rng;

/// Identifies the exact formulas behind the report's numbers.
pub const METRIC_VERSION: &str = "fest-v1";

/// Ridge strength per training row for the adversarial classifier. Kept
/// deliberately strong: with synth identical to real, an unregularized
/// fit memorizes twin rows and biases held-out accuracy below 0.5.
const ADV_RIDGE_PER_ROW: f64 = 0.01;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnScore {
    pub column: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricDetail {
    pub value: f64,
    pub per_column: Vec<ColumnScore>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FidelityConfig {
    pub folds: usize,
    pub seed: u64,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        FidelityConfig { folds: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FidelityReport {
    pub ks_score: f64,
    pub mape: f64,
    pub corr_diff: f64,
    pub adversarial_accuracy: f64,
    pub pretrend_preservation: f64,
    pub ks_detail: MetricDetail,
    pub mape_detail: MetricDetail,
    pub corr_detail: MetricDetail,
    pub pretrend_detail: MetricDetail,
    pub warnings: Vec<String>,
    pub version: String,
    pub seed: u64,
}

/// One named numeric column of a wide table with sentinel cells removed.
struct ColumnView {
    name: String,
    continuous_like: bool,
    real: Vec<f64>,
    synth: Vec<f64>,
}

fn column_views(real: &WideTable, synth: &WideTable) -> Result<Vec<ColumnView>> {
    if real.static_vars != synth.static_vars
        || real.dynamic_vars != synth.dynamic_vars
        || real.window != synth.window
    {
        return Err(Error::Layout(
            "real and synthetic tables have different schemas or windows".into(),
        ));
    }
    let mut views = Vec::new();
    for (pos, &var) in real.static_vars.iter().enumerate() {
        let spec = &real.schema.variables[var];
        views.push(ColumnView {
            name: spec.name.clone(),
            continuous_like: spec.kind.is_continuous_like(),
            real: real.rows.iter().map(|r| r[pos]).collect(),
            synth: synth.rows.iter().map(|r| r[pos]).collect(),
        });
    }
    for (pos, &var) in real.dynamic_vars.iter().enumerate() {
        let spec = &real.schema.variables[var];
        for tau in real.window.taus() {
            let col = real.dyn_col(pos, tau);
            let take = |t: &WideTable| -> Vec<f64> {
                t.rows
                    .iter()
                    .map(|r| r[col])
                    .filter(|&v| !t.is_sentinel(var, v))
                    .collect()
            };
            views.push(ColumnView {
                name: format!("{}[{}]", spec.name, tau),
                continuous_like: spec.kind.is_continuous_like(),
                real: take(real),
                synth: take(synth),
            });
        }
    }
    Ok(views)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (n, m) = (xs.len() as f64, ys.len() as f64);
    let mut i = 0usize;
    let mut j = 0usize;
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let t = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= t {
            i += 1;
        }
        while j < ys.len() && ys[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d.min(1.0)
}

/// Total variation distance between empirical category frequencies.
fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut codes: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    codes.sort_by(|p, q| p.partial_cmp(q).unwrap());
    codes.dedup();
    let freq = |xs: &[f64], c: f64| xs.iter().filter(|&&v| v == c).count() as f64 / xs.len() as f64;
    0.5 * codes
        .iter()
        .map(|&c| (freq(a, c) - freq(b, c)).abs())
        .sum::<f64>()
}

/// Mean over columns of `1 - D`, with `D` the KS statistic for
/// continuous/ordinal columns and the total variation distance for
/// categorical ones. 1.0 means identical marginals.
pub fn ks_score(real: &WideTable, synth: &WideTable) -> Result<MetricDetail> {
    let views = column_views(real, synth)?;
    let mut per_column = Vec::new();
    let mut warnings = Vec::new();
    let mut total = 0.0;
    let mut counted = 0usize;
    for v in views {
        if v.real.is_empty() || v.synth.is_empty() {
            warnings.push(format!("column '{}' skipped: no observed cells", v.name));
            continue;
        }
        let d = if v.continuous_like {
            ks_statistic(&v.real, &v.synth)
        } else {
            tv_distance(&v.real, &v.synth)
        };
        per_column.push(ColumnScore {
            column: v.name,
            value: 1.0 - d,
            note: None,
        });
        total += 1.0 - d;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Insufficient("no comparable columns".into()));
    }
    Ok(MetricDetail {
        value: total / counted as f64,
        per_column,
        warnings,
    })
}

/// Mean absolute percentage error of column means over continuous/ordinal
/// columns; zero-mean columns fall back to range-normalized absolute error
/// and are flagged.
pub fn stat_mape(real: &WideTable, synth: &WideTable) -> Result<MetricDetail> {
    let views = column_views(real, synth)?;
    let mut per_column = Vec::new();
    let mut warnings = Vec::new();
    let mut total = 0.0;
    let mut counted = 0usize;
    for v in views {
        if !v.continuous_like {
            continue;
        }
        if v.real.is_empty() || v.synth.is_empty() {
            warnings.push(format!("column '{}' skipped: no observed cells", v.name));
            continue;
        }
        let mean_r = v.real.iter().sum::<f64>() / v.real.len() as f64;
        let mean_s = v.synth.iter().sum::<f64>() / v.synth.len() as f64;
        let (err, note) = if mean_r.abs() > 1e-12 {
            ((mean_s - mean_r).abs() / mean_r.abs(), None)
        } else {
            let lo = v.real.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.real.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let range = (hi - lo).max(1e-12);
            (
                (mean_s - mean_r).abs() / range,
                Some("zero real mean: range-normalized".to_string()),
            )
        };
        per_column.push(ColumnScore {
            column: v.name,
            value: err,
            note,
        });
        total += err;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Insufficient(
            "no continuous/ordinal columns with observed cells".into(),
        ));
    }
    Ok(MetricDetail {
        value: total / counted as f64,
        per_column,
        warnings,
    })
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// Sum over upper-triangle column pairs of |rho_real - rho_synth|
/// (Pearson, pairwise-complete over non-sentinel cells). Pairs involving a
/// constant or empty column contribute 0 and are flagged.
pub fn corr_diff(real: &WideTable, synth: &WideTable) -> Result<MetricDetail> {
    if real.static_vars != synth.static_vars || real.dynamic_vars != synth.dynamic_vars {
        return Err(Error::Layout("schema mismatch".into()));
    }
    let width = real.width();
    if width < 2 {
        return Err(Error::Insufficient("need at least 2 numeric columns".into()));
    }
    let sentinel_of = |t: &WideTable, col: usize| -> Option<f64> {
        if col < t.n_static() {
            None // statics are never padded
        } else {
            let pos = (col - t.n_static()) / t.n_periods();
            Some(t.sentinel[t.dynamic_vars[pos]])
        }
    };
    let col_name = |t: &WideTable, col: usize| -> String {
        if col < t.n_static() {
            t.schema.variables[t.static_vars[col]].name.clone()
        } else {
            let pos = (col - t.n_static()) / t.n_periods();
            let t_idx = (col - t.n_static()) % t.n_periods();
            let tau = t_idx as i32 - t.window.k_pre as i32;
            format!("{}[{}]", t.schema.variables[t.dynamic_vars[pos]].name, tau)
        }
    };

    let pair_corr = |t: &WideTable, a: usize, b: usize| -> Option<f64> {
        let sa = sentinel_of(t, a);
        let sb = sentinel_of(t, b);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for row in &t.rows {
            let va = row[a];
            let vb = row[b];
            if Some(va) != sa && Some(vb) != sb {
                xs.push(va);
                ys.push(vb);
            }
        }
        pearson(&xs, &ys)
    };

    let mut total = 0.0;
    let mut per_column = Vec::new();
    let mut warnings = Vec::new();
    for a in 0..width {
        for b in (a + 1)..width {
            match (pair_corr(real, a, b), pair_corr(synth, a, b)) {
                (Some(rr), Some(rs)) => {
                    let gap = (rr - rs).abs();
                    total += gap;
                    per_column.push(ColumnScore {
                        column: format!("{} ~ {}", col_name(real, a), col_name(real, b)),
                        value: gap,
                        note: None,
                    });
                }
                _ => {
                    warnings.push(format!(
                        "pair '{} ~ {}' contributes 0 (constant or empty column)",
                        col_name(real, a),
                        col_name(real, b)
                    ));
                }
            }
        }
    }
    Ok(MetricDetail {
        value: total,
        per_column,
        warnings,
    })
}

/// Features for the real-vs-synthetic classifier: z-scored columns with
/// sentinel cells mapped to 0 after scaling (mean imputation).
fn classifier_features(t: &WideTable, means: &[f64], sds: &[f64]) -> Vec<Vec<f64>> {
    let width = t.width();
    t.rows
        .iter()
        .map(|row| {
            (0..width)
                .map(|c| {
                    let v = row[c];
                    let is_pad = if c >= t.n_static() {
                        let pos = (c - t.n_static()) / t.n_periods();
                        v == t.sentinel[t.dynamic_vars[pos]]
                    } else {
                        false
                    };
                    if is_pad || sds[c] == 0.0 {
                        0.0
                    } else {
                        (v - means[c]) / sds[c]
                    }
                })
                .collect()
        })
        .collect()
}

/// Held-out accuracy of a ridge-logistic classifier labeling rows real (0)
/// vs synthetic (1) after downsampling to equal class sizes; 0.5 is the
/// indistinguishability ideal.
pub fn adversarial_accuracy(
    real: &WideTable,
    synth: &WideTable,
    folds: usize,
    seed: u64,
) -> Result<f64> {
    if real.rows.is_empty() || synth.rows.is_empty() {
        return Err(Error::Insufficient(
            "both tables must be non-empty for the adversarial metric".into(),
        ));
    }
    if folds < 2 {
        return Err(Error::Config("adversarial metric needs at least 2 folds".into()));
    }
    let n_side = real.rows.len().min(synth.rows.len());
    if 2 * n_side < folds {
        return Err(Error::Insufficient(format!(
            "{} rows cannot be split into {folds} folds",
            2 * n_side
        )));
    }

    let mut rng = seed::rng(seed::derive(seed, "adversarial", 0));
    let real_idx = {
        let mut idx: Vec<usize> = (0..real.rows.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n_side);
        idx
    };
    let synth_idx = {
        let mut idx: Vec<usize> = (0..synth.rows.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n_side);
        idx
    };

    // Column scaling from the pooled downsampled rows, sentinel-excluded.
    let width = real.width();
    let mut sums = vec![0.0f64; width];
    let mut sqs = vec![0.0f64; width];
    let mut counts = vec![0.0f64; width];
    {
        let mut accumulate = |t: &WideTable, idx: &[usize]| {
            for &i in idx {
                for c in 0..width {
                    let v = t.rows[i][c];
                    let is_pad = if c >= t.n_static() {
                        let pos = (c - t.n_static()) / t.n_periods();
                        v == t.sentinel[t.dynamic_vars[pos]]
                    } else {
                        false
                    };
                    if !is_pad {
                        sums[c] += v;
                        sqs[c] += v * v;
                        counts[c] += 1.0;
                    }
                }
            }
        };
        accumulate(real, &real_idx);
        accumulate(synth, &synth_idx);
    }
    let means: Vec<f64> = (0..width)
        .map(|c| if counts[c] > 0.0 { sums[c] / counts[c] } else { 0.0 })
        .collect();
    let sds: Vec<f64> = (0..width)
        .map(|c| {
            if counts[c] > 1.0 {
                ((sqs[c] / counts[c] - means[c] * means[c]).max(0.0)).sqrt()
            } else {
                0.0
            }
        })
        .collect();

    let real_feats = classifier_features(real, &means, &sds);
    let synth_feats = classifier_features(synth, &means, &sds);
    // Folds are assigned by hashing the feature vector, so identical rows
    // always share a fold. Otherwise duplicate rows straddling the
    // train/test split leak membership: exact twins (synth equal to real)
    // bias accuracy below 0.5 and bootstrap-duplicated synthetic rows
    // bias it above.
    let fold_salt = rng.gen::<u64>();
    let fold_of = |x: &[f64]| -> usize {
        let mut h = 0xcbf2_9ce4_8422_2325u64 ^ fold_salt;
        for v in x {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        (h >> 33) as usize % folds
    };
    let mut rows: Vec<(Vec<f64>, bool, usize)> = Vec::with_capacity(2 * n_side);
    for &i in &real_idx {
        let f = fold_of(&real_feats[i]);
        rows.push((real_feats[i].clone(), false, f));
    }
    for &i in &synth_idx {
        let f = fold_of(&synth_feats[i]);
        rows.push((synth_feats[i].clone(), true, f));
    }

    let mut fold_acc = Vec::with_capacity(folds);
    for f in 0..folds {
        let mut train_x = Vec::new();
        let mut train_y = Vec::new();
        let mut test_x = Vec::new();
        let mut test_y = Vec::new();
        for (x, y, fold) in &rows {
            if *fold == f {
                test_x.push(x.clone());
                test_y.push(*y);
            } else {
                train_x.push(x.clone());
                train_y.push(*y);
            }
        }
        if test_x.is_empty() || train_x.is_empty() {
            // Hash collisions drained this fold; skip it.
            continue;
        }
        let ridge = ADV_RIDGE_PER_ROW * train_x.len() as f64;
        let probs = ridge_logistic_predict(&train_x, &train_y, &test_x, ridge)?;
        let correct = probs
            .iter()
            .zip(&test_y)
            .filter(|(p, y)| (**p > 0.5) == **y)
            .count();
        fold_acc.push(correct as f64 / test_y.len() as f64);
    }
    if fold_acc.is_empty() {
        return Err(Error::Insufficient("all cross-validation folds were empty".into()));
    }
    Ok(fold_acc.iter().sum::<f64>() / fold_acc.len() as f64)
}

fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    sxy / sxx
}

fn arm_pre_slope(
    panel: &LongPanel,
    schema: &Schema,
    window: EventWindow,
    treated_arm: bool,
) -> Option<f64> {
    let outcome = schema.outcome_index();
    let treatment = panel.treatment_by_unit(schema);
    let mut points = Vec::new();
    for tau in -(window.k_pre as i32)..=-1 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for row in panel.rows() {
            if row.time != tau || treatment.get(&row.unit) != Some(&treated_arm) {
                continue;
            }
            if let Some(y) = row.values[outcome] {
                sum += y;
                count += 1;
            }
        }
        if count > 0 {
            points.push((tau as f64, sum / count as f64));
        }
    }
    if points.len() < 2 {
        None
    } else {
        Some(ols_slope(&points))
    }
}

/// `1 / (1 + mean over arms |slope_real - slope_synth|)` where each slope
/// is the least-squares trend of the arm's cohort-mean outcome over the
/// pre-periods. 1.0 means the synthetic panel preserves pre-trends exactly.
pub fn pretrend_preservation(
    real_long: &LongPanel,
    synth_long: &LongPanel,
    schema: &Schema,
    window: EventWindow,
) -> Result<MetricDetail> {
    let mut gaps = Vec::new();
    let mut per_column = Vec::new();
    let mut warnings = Vec::new();
    for arm in [false, true] {
        let label = if arm { "treated" } else { "control" };
        match (
            arm_pre_slope(real_long, schema, window, arm),
            arm_pre_slope(synth_long, schema, window, arm),
        ) {
            (Some(r), Some(s)) => {
                gaps.push((r - s).abs());
                per_column.push(ColumnScore {
                    column: format!("{label}_slope_gap"),
                    value: (r - s).abs(),
                    note: Some(format!("real {r}, synthetic {s}")),
                });
            }
            _ => warnings.push(format!(
                "arm '{label}' skipped: fewer than 2 pre-periods with data"
            )),
        }
    }
    if gaps.is_empty() {
        return Err(Error::Insufficient(
            "no treatment arm has at least 2 observed pre-periods".into(),
        ));
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    Ok(MetricDetail {
        value: 1.0 / (1.0 + mean_gap),
        per_column,
        warnings,
    })
}

/// All five metrics with per-column breakdowns. Deterministic given
/// `config.seed`.
pub fn evaluate_all(
    real_long: &LongPanel,
    synth_long: &LongPanel,
    schema: &Schema,
    window: EventWindow,
    config: &FidelityConfig,
) -> Result<FidelityReport> {
    if synth_long.is_empty() {
        return Err(Error::Insufficient(
            "synthetic panel is empty; every metric (ks, mape, corr, adversarial, pretrend) would fail"
                .into(),
        ));
    }
    let real = crate::wide::to_wide(real_long, schema, window)?;
    let synth = crate::wide::to_wide(synth_long, schema, window)?;

    let ks = ks_score(&real, &synth)?;
    let mape = stat_mape(&real, &synth)?;
    let corr = corr_diff(&real, &synth)?;
    let adv = adversarial_accuracy(&real, &synth, config.folds, config.seed)?;
    let pre = pretrend_preservation(real_long, synth_long, schema, window)?;

    let mut warnings = Vec::new();
    warnings.extend(ks.warnings.iter().cloned());
    warnings.extend(mape.warnings.iter().cloned());
    warnings.extend(corr.warnings.iter().cloned());
    warnings.extend(pre.warnings.iter().cloned());

    Ok(FidelityReport {
        ks_score: ks.value,
        mape: mape.value,
        corr_diff: corr.value,
        adversarial_accuracy: adv,
        pretrend_preservation: pre.value,
        ks_detail: ks,
        mape_detail: mape,
        corr_detail: corr,
        pretrend_detail: pre,
        warnings,
        version: METRIC_VERSION.to_string(),
        seed: config.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{LongPanel, LongRow};
    use crate::schema::{VarKind, VarRole, VariableSpec};
    use crate::wide::to_wide;
    use rand::Rng;

    fn schema() -> Schema {
        Schema::new(
            vec![
                VariableSpec::new("treated", VarRole::Static, VarKind::Binary).with_bounds(0.0, 1.0),
                VariableSpec::new("wealth", VarRole::Static, VarKind::Continuous),
                VariableSpec::new("y", VarRole::Dynamic, VarKind::Continuous),
            ],
            "unit",
            "tau",
            "treated",
            "y",
        )
        .unwrap()
    }

    fn random_panel(n: usize, seed: u64, shift: f64) -> LongPanel {
        let mut rng = seed::rng(seed);
        let mut rows = Vec::new();
        for unit in 0..n as u64 {
            let d = if unit % 2 == 0 { 1.0 } else { 0.0 };
            let w = rng.gen_range(-2.0..2.0);
            for tau in -2..=1 {
                rows.push(LongRow {
                    unit,
                    time: tau,
                    synthetic: false,
                    values: vec![
                        Some(d),
                        Some(w),
                        Some(rng.gen_range(-1.0..1.0) + 0.3 * w + shift),
                    ],
                });
            }
        }
        LongPanel::new(rows).unwrap()
    }

    #[test]
    fn identity_bundle_attains_optimal_values() {
        let sch = schema();
        let panel = random_panel(300, 3, 0.0);
        let window = EventWindow::new(2, 1);
        let report =
            evaluate_all(&panel, &panel, &sch, window, &FidelityConfig::default()).unwrap();
        assert_eq!(report.ks_score, 1.0);
        assert_eq!(report.mape, 0.0);
        assert_eq!(report.corr_diff, 0.0);
        assert!(
            report.adversarial_accuracy >= 0.45 && report.adversarial_accuracy <= 0.55,
            "adversarial accuracy {}",
            report.adversarial_accuracy
        );
        assert_eq!(report.pretrend_preservation, 1.0);
    }

    #[test]
    fn empty_synthetic_panel_is_error() {
        let sch = schema();
        let panel = random_panel(20, 3, 0.0);
        let empty = LongPanel::default();
        assert!(evaluate_all(
            &panel,
            &empty,
            &sch,
            EventWindow::new(2, 1),
            &FidelityConfig::default()
        )
        .is_err());
    }

    #[test]
    fn report_serialization_round_trips() {
        let sch = schema();
        let panel = random_panel(60, 9, 0.0);
        let window = EventWindow::new(2, 1);
        let report =
            evaluate_all(&panel, &panel, &sch, window, &FidelityConfig::default()).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: FidelityReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report.ks_score, back.ks_score);
        assert_eq!(report.adversarial_accuracy, back.adversarial_accuracy);
        assert_eq!(report.version, back.version);
    }

    fn one_column_tables(real: &[f64], synth: &[f64]) -> (WideTable, WideTable) {
        let sch = Schema::new(
            vec![
                VariableSpec::new("treated", VarRole::Static, VarKind::Binary).with_bounds(0.0, 1.0),
                VariableSpec::new("y", VarRole::Dynamic, VarKind::Continuous),
            ],
            "unit",
            "tau",
            "treated",
            "y",
        )
        .unwrap();
        let build = |vals: &[f64]| {
            let rows: Vec<LongRow> = vals
                .iter()
                .enumerate()
                .flat_map(|(i, &v)| {
                    [
                        LongRow {
                            unit: i as u64,
                            time: -1,
                            synthetic: false,
                            values: vec![Some(0.0), Some(v)],
                        },
                        LongRow {
                            unit: i as u64,
                            time: 0,
                            synthetic: false,
                            values: vec![Some(0.0), Some(v)],
                        },
                    ]
                })
                .collect();
            to_wide(&LongPanel::new(rows).unwrap(), &sch, EventWindow::new(1, 0)).unwrap()
        };
        (build(real), build(synth))
    }

    #[test]
    fn ks_gap_matches_hand_computed_cdf() {
        // real {1,2,3,4}, synth {1,2,3,10}: D = 0.25 so each y column
        // scores 0.75.
        let (real, synth) = one_column_tables(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 10.0]);
        let detail = ks_score(&real, &synth).unwrap();
        for c in detail.per_column.iter().filter(|c| c.column.starts_with("y[")) {
            assert!((c.value - 0.75).abs() < 1e-12, "per-column score {}", c.value);
        }
    }

    #[test]
    fn disjoint_supports_score_zero() {
        let (real, synth) = one_column_tables(&[1.0, 2.0], &[10.0, 20.0]);
        let detail = ks_score(&real, &synth).unwrap();
        for c in detail.per_column.iter().filter(|c| c.column.starts_with("y[")) {
            assert_eq!(c.value, 0.0);
        }
    }

    #[test]
    fn mape_is_relative_mean_error() {
        let (real, synth) = one_column_tables(&[4.0, 4.0], &[5.0, 5.0]);
        let detail = stat_mape(&real, &synth).unwrap();
        assert!((detail.value - 0.25).abs() < 1e-12);
    }

    #[test]
    fn mape_averages_across_columns() {
        // Two waves with errors 0.10 and 0.30 average to 0.20.
        let (real, mut synth) = one_column_tables(&[10.0, 10.0], &[10.0, 10.0]);
        for row in &mut synth.rows {
            row[1] = 11.0; // y[-1]: relative error 0.1
            row[2] = 13.0; // y[0]: relative error 0.3
        }
        let detail = stat_mape(&real, &synth).unwrap();
        assert!((detail.value - 0.2).abs() < 1e-12, "mape {}", detail.value);
    }

    #[test]
    fn corr_diff_sums_pair_gaps() {
        let sch = Schema::new(
            vec![
                VariableSpec::new("treated", VarRole::Static, VarKind::Binary).with_bounds(0.0, 1.0),
                VariableSpec::new("a", VarRole::Static, VarKind::Continuous),
                VariableSpec::new("b", VarRole::Static, VarKind::Continuous),
                VariableSpec::new("y", VarRole::Dynamic, VarKind::Continuous),
            ],
            "unit",
            "tau",
            "treated",
            "y",
        )
        .unwrap();
        let mut rng = seed::rng(7);
        let build = |invert: bool, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut rows = Vec::new();
            for unit in 0..200u64 {
                let a: f64 = rng.gen_range(-1.0..1.0);
                let b = if invert { -a } else { a };
                for tau in [-1, 0] {
                    rows.push(LongRow {
                        unit,
                        time: tau,
                        synthetic: false,
                        values: vec![Some(0.0), Some(a), Some(b), Some(rng.gen_range(-1.0..1.0))],
                    });
                }
            }
            to_wide(&LongPanel::new(rows).unwrap(), &sch, EventWindow::new(1, 0)).unwrap()
        };
        let real = build(false, &mut rng);
        let synth = build(true, &mut rng);
        let detail = corr_diff(&real, &synth).unwrap();
        // The a~b correlation flips from +1 to -1: gap exactly 2.
        let ab = detail
            .per_column
            .iter()
            .find(|c| c.column == "a ~ b")
            .unwrap();
        assert!((ab.value - 2.0).abs() < 1e-9);
        assert!(detail.value >= ab.value);
    }

    #[test]
    fn pearson_matches_hand_computation_on_six_rows() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let ys = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0];
        let got = pearson(&xs, &ys).unwrap();
        let n = 6.0;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let oracle = sxy / (sxx * syy).sqrt();
        assert!((got - oracle).abs() < 1e-10);
    }

    #[test]
    fn shifted_synthetic_is_trivially_separable() {
        let sch = schema();
        let real = random_panel(150, 5, 0.0);
        let synth = random_panel(150, 6, 100.0);
        let window = EventWindow::new(2, 1);
        let rw = to_wide(&real, &sch, window).unwrap();
        let sw = to_wide(&synth, &sch, window).unwrap();
        let acc = adversarial_accuracy(&rw, &sw, 5, 0).unwrap();
        assert!(acc > 0.99, "accuracy {acc}");
    }

    #[test]
    fn too_few_rows_for_folds_is_error() {
        let (real, synth) = one_column_tables(&[1.0], &[1.0]);
        assert!(adversarial_accuracy(&real, &synth, 5, 0).is_err());
    }

    #[test]
    fn pretrend_formula_on_hand_fixtures() {
        let sch = schema();
        let build = |slope_t: f64, slope_c: f64| {
            let mut rows = Vec::new();
            for unit in 0..20u64 {
                let treated = unit < 10;
                let slope = if treated { slope_t } else { slope_c };
                for tau in -3..=0 {
                    rows.push(LongRow {
                        unit,
                        time: tau,
                        synthetic: false,
                        values: vec![
                            Some(treated as i32 as f64),
                            Some(1.0),
                            Some(slope * tau as f64),
                        ],
                    });
                }
            }
            LongPanel::new(rows).unwrap()
        };
        // Identical pre-period cohort means give a perfect score.
        let real = build(0.5, -0.2);
        let same = pretrend_preservation(&real, &real, &sch, EventWindow::new(3, 0)).unwrap();
        assert_eq!(same.value, 1.0);

        // Slopes (0.5, -0.2) vs (0.7, -0.2): mean gap 0.1, score 1/1.1.
        let synth = build(0.7, -0.2);
        let detail = pretrend_preservation(&real, &synth, &sch, EventWindow::new(3, 0)).unwrap();
        assert!(
            (detail.value - 1.0 / 1.1).abs() < 1e-9,
            "score {}",
            detail.value
        );

        // Gap of 2.0 in both arms gives 1/3.
        let synth2 = build(2.5, 1.8);
        let detail2 = pretrend_preservation(&real, &synth2, &sch, EventWindow::new(3, 0)).unwrap();
        assert!((detail2.value - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn permutation_invariance_of_metrics() {
        let sch = schema();
        let real = random_panel(80, 11, 0.0);
        let synth = random_panel(80, 12, 0.1);
        let window = EventWindow::new(2, 1);
        let rw = to_wide(&real, &sch, window).unwrap();
        let sw = to_wide(&synth, &sch, window).unwrap();

        let mut sw_perm = sw.clone();
        sw_perm.rows.reverse();
        sw_perm.units.reverse();
        sw_perm.synthetic.reverse();

        // Exact for rank-based KS; within accumulation roundoff for the
        // mean- and correlation-based metrics.
        assert_eq!(
            ks_score(&rw, &sw).unwrap().value,
            ks_score(&rw, &sw_perm).unwrap().value
        );
        let m1 = stat_mape(&rw, &sw).unwrap().value;
        let m2 = stat_mape(&rw, &sw_perm).unwrap().value;
        assert!((m1 - m2).abs() <= 1e-12 * m1.abs().max(1.0));
        let c1 = corr_diff(&rw, &sw).unwrap().value;
        let c2 = corr_diff(&rw, &sw_perm).unwrap().value;
        assert!((c1 - c2).abs() <= 1e-12 * c1.abs().max(1.0));
    }

    #[test]
    fn ks_statistic_matches_brute_force_on_small_samples() {
        let mut rng = seed::rng(19);
        for _ in 0..30 {
            let n = rng.gen_range(3..100);
            let m = rng.gen_range(3..100);
            let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let ys: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let fast = ks_statistic(&xs, &ys);

            // Brute-force double loop over all evaluation points.
            let mut d: f64 = 0.0;
            for &t in xs.iter().chain(ys.iter()) {
                let fx = xs.iter().filter(|&&v| v <= t).count() as f64 / n as f64;
                let fy = ys.iter().filter(|&&v| v <= t).count() as f64 / m as f64;
                d = d.max((fx - fy).abs());
            }
            assert!((fast - d).abs() < 1e-12, "fast {fast} vs brute {d}");
            assert!((0.0..=1.0).contains(&fast));
        }
    }

    /// Shifting a copy of the real column by a growing positive constant
    /// never decreases its KS statistic.
    #[test]
    fn shift_from_identity_degrades_monotonically() {
        let mut rng = seed::rng(23);
        let xs: Vec<f64> = (0..200).map(|_| rng.gen_range(-3.0f64..3.0)).collect();
        let mut last = 0.0;
        for step in 0..20 {
            let delta = step as f64 * 0.15;
            let shifted: Vec<f64> = xs.iter().map(|v| v + delta).collect();
            let d = ks_statistic(&xs, &shifted);
            assert!(
                d + 1e-12 >= last,
                "KS decreased from {last} to {d} at delta {delta}"
            );
            last = d;
        }
    }
}
