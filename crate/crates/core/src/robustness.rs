//! Sensitivity to unobserved confounding (coefficient-stability bounds
//! under proportional selection) and stratified re-runs of the matching +
//! estimation pipeline.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit_event_study, EventStudyResult, FixedEffects, Sample};
use crate::matching::{match_panel, MatchDiagnostics, MatchedSet};
use crate::panel::LongPanel;
use crate::schema::Schema;
use crate::wide::EventWindow;

/// Conventional cap: maximum attainable R-squared as a multiple of the
/// controlled fit's R-squared.
pub const DEFAULT_R_MAX_FACTOR: f64 = 1.3;

/// Treatment coefficient and fit quality from one regression; the inputs
/// to the stability computation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegressionSummary {
    pub beta: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StabilityClass {
    /// Controls do not move the coefficient at all (delta infinite).
    VeryRobust,
    /// Bound interval excludes zero and |delta| for zero exceeds 1.
    Robust,
    /// Bound interval excludes zero but delta does not clear 1.
    Sensitive,
    /// The adjusted coefficient and the controlled one straddle zero.
    Fragile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OsterResult {
    pub beta_tilde: f64,
    pub r_tilde: f64,
    pub beta_dot: f64,
    pub r_dot: f64,
    pub r_max: f64,
    pub r_max_factor: f64,
    /// Selection-proportionality needed to drive the coefficient to zero;
    /// infinite when controls leave the coefficient untouched.
    pub delta_for_zero: f64,
    /// Bias-adjusted coefficient at delta = 1.
    pub beta_star_at_delta_1: f64,
    pub bound_low: f64,
    pub bound_high: f64,
    pub classification: StabilityClass,
    /// Approximation used for the adjustment (recorded for consumers).
    pub approximation: String,
}

impl OsterResult {
    fn classify(&self) -> StabilityClass {
        if self.delta_for_zero.is_infinite() {
            StabilityClass::VeryRobust
        } else if self.bound_low <= 0.0 && self.bound_high >= 0.0 {
            StabilityClass::Fragile
        } else if self.delta_for_zero.abs() > 1.0 {
            StabilityClass::Robust
        } else {
            StabilityClass::Sensitive
        }
    }
}

/// Coefficient-stability bounds under the proportional-selection
/// approximation:
///
/// `beta* = beta_tilde - (beta_dot - beta_tilde) * (r_max - r_tilde) / (r_tilde - r_dot)`
///
/// with `r_max = min(1, factor * r_tilde)`, and the delta that zeroes the
/// coefficient from the same linearization. Both fits must estimate the
/// same treatment coefficient on the same sample, with `controlled` the
/// richer model.
pub fn oster_bounds(
    controlled: RegressionSummary,
    uncontrolled: RegressionSummary,
    r_max_factor: f64,
) -> Result<OsterResult> {
    let (beta_tilde, r_tilde) = (controlled.beta, controlled.r_squared);
    let (beta_dot, r_dot) = (uncontrolled.beta, uncontrolled.r_squared);
    if !(0.0..=1.0).contains(&r_tilde) || !(0.0..=1.0).contains(&r_dot) {
        return Err(Error::Config(format!(
            "r-squared values must lie in [0, 1], got {r_tilde} and {r_dot}"
        )));
    }
    if r_max_factor < 1.0 {
        return Err(Error::Config("r_max_factor must be at least 1".into()));
    }
    if r_tilde < r_dot {
        return Err(Error::Config(
            "controlled fit must not have lower R-squared than the uncontrolled fit".into(),
        ));
    }
    if r_tilde == r_dot {
        return Err(Error::StabilityUndefined);
    }
    let r_max = (r_max_factor * r_tilde).min(1.0);
    let moved = beta_dot - beta_tilde;
    let (beta_star, delta_for_zero) = if moved == 0.0 {
        (beta_tilde, f64::INFINITY)
    } else {
        let ratio = (r_max - r_tilde) / (r_tilde - r_dot);
        let beta_star = beta_tilde - moved * ratio;
        let delta = if r_max == r_tilde {
            // No headroom above the controlled fit: nothing can move beta.
            f64::INFINITY
        } else {
            beta_tilde * (r_tilde - r_dot) / (moved * (r_max - r_tilde))
        };
        (beta_star, delta)
    };
    let bound_low = beta_tilde.min(beta_star);
    let bound_high = beta_tilde.max(beta_star);
    let mut result = OsterResult {
        beta_tilde,
        r_tilde,
        beta_dot,
        r_dot,
        r_max,
        r_max_factor,
        delta_for_zero,
        beta_star_at_delta_1: beta_star,
        bound_low,
        bound_high,
        classification: StabilityClass::VeryRobust,
        approximation: "proportional-selection-linear".to_string(),
    };
    result.classification = result.classify();
    Ok(result)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubgroupConfig {
    pub matching_covariates: Vec<String>,
    pub caliper_multiplier: f64,
    pub estimator_covariates: Vec<String>,
    pub window: EventWindow,
}

#[derive(Debug, Clone)]
pub enum SubgroupOutcome {
    Estimated {
        matched: MatchedSet,
        diagnostics: MatchDiagnostics,
        result: EventStudyResult,
    },
    Skipped {
        reason: String,
    },
}

impl SubgroupOutcome {
    pub fn is_estimated(&self) -> bool {
        matches!(self, SubgroupOutcome::Estimated { .. })
    }
}

/// Re-runs propensity matching and the matched event study independently
/// within each stratum. Strata that cannot be estimated (no treated units,
/// no controls, matching or estimation failure) are reported, not dropped.
/// Units absent from `grouping` are ignored.
pub fn subgroup_rerun(
    panel: &LongPanel,
    schema: &Schema,
    grouping: &BTreeMap<u64, String>,
    config: &SubgroupConfig,
) -> BTreeMap<String, SubgroupOutcome> {
    let mut labels: BTreeMap<String, BTreeSet<u64>> = BTreeMap::new();
    for unit in panel.units() {
        if let Some(label) = grouping.get(&unit) {
            labels.entry(label.clone()).or_default().insert(unit);
        }
    }
    let treatment = panel.treatment_by_unit(schema);

    let mut out = BTreeMap::new();
    for (label, units) in labels {
        let n_treated = units
            .iter()
            .filter(|u| treatment.get(u).copied().unwrap_or(false))
            .count();
        let n_control = units.len() - n_treated;
        if n_treated == 0 {
            out.insert(
                label,
                SubgroupOutcome::Skipped {
                    reason: "no treated units".to_string(),
                },
            );
            continue;
        }
        if n_control == 0 {
            out.insert(
                label,
                SubgroupOutcome::Skipped {
                    reason: "no control units".to_string(),
                },
            );
            continue;
        }
        let sub = panel.filter_units(&units);
        let outcome = match run_stratum(&sub, schema, config) {
            Ok(o) => o,
            Err(e) => SubgroupOutcome::Skipped {
                reason: e.to_string(),
            },
        };
        out.insert(label, outcome);
    }
    out
}

fn run_stratum(
    panel: &LongPanel,
    schema: &Schema,
    config: &SubgroupConfig,
) -> Result<SubgroupOutcome> {
    let (matched, diagnostics) = match_panel(
        panel,
        schema,
        &config.matching_covariates,
        config.caliper_multiplier,
    )?;
    if matched.pairs.is_empty() {
        return Ok(SubgroupOutcome::Skipped {
            reason: "matching produced no pairs".to_string(),
        });
    }
    let result = fit_event_study(
        panel,
        schema,
        Sample::Matched(&matched),
        &config.estimator_covariates,
        config.window,
        FixedEffects::TwoWay,
    )?;
    Ok(SubgroupOutcome::Estimated {
        matched,
        diagnostics,
        result,
    })
}
