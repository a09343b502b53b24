//! Ground-truth panel simulator.
//!
//! Generates event-centered panels with known unit effects, period
//! effects, treatment effects, selection on observables and post-event
//! attrition, so every downstream estimate can be checked against stored
//! generating coefficients. A pathological preset reproduces the sparse,
//! confounded, no-common-support regime that augmentation is meant to
//! rescue.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{LongPanel, LongRow};
use crate::schema::{Schema, VarKind, VarRole, VariableSpec};
use crate::seed;
use crate::wide::EventWindow;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub n_treated: usize,
    pub n_control: usize,
    pub window: EventWindow,
    /// Treatment effect at tau = 0..=m_post.
    pub effect: Vec<f64>,
    /// Direct divergence of treated pre-trends (0 = parallel trends).
    pub pretrend_slope_gap: f64,
    /// Mahalanobis shift of treated baseline covariates; under the
    /// equal-covariance Gaussian arms this makes the true propensity
    /// exactly logistic in the covariates with this slope magnitude.
    pub selection_strength: f64,
    pub covariate_dim: usize,
    /// Loading of the baseline-covariate index on each unit's linear time
    /// trend. Nonzero values confound trends with selection.
    pub covariate_trend: f64,
    /// Number of time-varying covariate columns (derived from the
    /// baseline covariates plus noise).
    pub n_time_varying: usize,
    /// Outcome loading of each time-varying covariate.
    pub time_varying_coef: f64,
    pub unit_effect_sd: f64,
    pub noise_sd: f64,
    /// Per-wave exit probability after tau = 0.
    pub attrition_hazard: f64,
    /// Clamp-and-round outcomes to the integer 0..=12 scale.
    pub eurod_outcome: bool,
    /// Level added to outcomes (used by the integer-scale mode).
    pub outcome_center: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig::baseline(0)
    }
}

impl DgpConfig {
    /// Well-behaved defaults: parallel trends, mild selection, no
    /// confounded trend.
    pub fn baseline(seed: u64) -> Self {
        DgpConfig {
            n_treated: 200,
            n_control: 200,
            window: EventWindow::default(),
            effect: vec![0.2, -0.5, -0.8],
            pretrend_slope_gap: 0.0,
            selection_strength: 0.5,
            covariate_dim: 3,
            covariate_trend: 0.0,
            n_time_varying: 1,
            time_varying_coef: 0.3,
            unit_effect_sd: 1.0,
            noise_sd: 1.0,
            attrition_hazard: 0.1,
            eurod_outcome: false,
            outcome_center: 0.0,
            seed,
        }
    }

    /// Sparse, high-dimensional, strongly selected sample in which caliper
    /// matching collapses and matched pre-trends diverge.
    pub fn sparse_confounded(seed: u64) -> Self {
        DgpConfig {
            n_treated: 40,
            n_control: 20,
            window: EventWindow::default(),
            effect: vec![0.2, -0.5, -0.8],
            pretrend_slope_gap: 0.0,
            selection_strength: 2.2,
            covariate_dim: 8,
            covariate_trend: 0.55,
            n_time_varying: 0,
            time_varying_coef: 0.0,
            unit_effect_sd: 0.8,
            noise_sd: 0.35,
            attrition_hazard: 0.08,
            eurod_outcome: false,
            outcome_center: 0.0,
            seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.effect.len() != self.window.m_post as usize + 1 {
            return Err(Error::Config(format!(
                "effect vector must have length m_post + 1 = {}, got {}",
                self.window.m_post + 1,
                self.effect.len()
            )));
        }
        if self.noise_sd <= 0.0 {
            return Err(Error::Config("noise_sd must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.attrition_hazard) {
            return Err(Error::Config("attrition_hazard must lie in [0, 1)".into()));
        }
        if self.n_time_varying > self.covariate_dim {
            return Err(Error::Config(
                "n_time_varying cannot exceed covariate_dim".into(),
            ));
        }
        Ok(())
    }

    /// Schema of the panels this simulator emits.
    pub fn schema(&self) -> Schema {
        let mut vars = vec![
            VariableSpec::new("treated", VarRole::Static, VarKind::Binary).with_bounds(0.0, 1.0),
        ];
        for j in 0..self.covariate_dim {
            vars.push(VariableSpec::new(
                &format!("z{j}"),
                VarRole::Static,
                VarKind::Continuous,
            ));
        }
        // Baseline outcome as an explicit static anchor column.
        let mut base = VariableSpec::new("y_base", VarRole::Static, VarKind::Ordinal);
        if self.eurod_outcome {
            base = base.with_bounds(0.0, 12.0).rounded();
        }
        vars.push(base);
        for j in 0..self.n_time_varying {
            vars.push(VariableSpec::new(
                &format!("x{j}"),
                VarRole::Dynamic,
                VarKind::Continuous,
            ));
        }
        let mut outcome = VariableSpec::new("y", VarRole::Dynamic, VarKind::Ordinal);
        if self.eurod_outcome {
            outcome = outcome.with_bounds(0.0, 12.0).rounded();
        }
        vars.push(outcome);
        Schema::new(vars, "unit", "tau", "treated", "y").expect("simulator schema is valid")
    }
}

/// Every generating coefficient behind a simulated panel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: DgpConfig,
    /// Period effects indexed by tau + k_pre.
    pub lambda: Vec<f64>,
    /// Outcome loadings of the time-varying covariates.
    pub gamma: Vec<f64>,
    /// Per-dimension mean shift of treated baseline covariates.
    pub selection_shift: Vec<f64>,
    /// Direction through which baseline covariates drive unit trends.
    pub trend_weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub panel: LongPanel,
    pub schema: Schema,
    pub truth: GroundTruth,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Simulates the outcome process
/// `Y_it = alpha_i + lambda_t + sum_tau a_tau D_i 1{t=tau} + gamma' X_it
///  + slope_gap * D_i * t * 1{t<0} + trend_loading * (w'Z_i) * t + eps_it`
/// with logistic-in-covariates selection (via equal-covariance Gaussian
/// arms) and geometric attrition after tau = 0.
pub fn simulate_panel(config: &DgpConfig) -> Result<SimulatedPanel> {
    config.validate()?;
    let schema = config.schema();
    let window = config.window;
    let p = config.covariate_dim;
    let mut rng = seed::rng(seed::derive(config.seed, "dgp", 0));

    let shift_per_dim = if p > 0 {
        config.selection_strength / (p as f64).sqrt()
    } else {
        0.0
    };
    let selection_shift = vec![shift_per_dim; p];
    let trend_weights = if p > 0 {
        vec![1.0 / (p as f64).sqrt(); p]
    } else {
        vec![]
    };
    let lambda: Vec<f64> = window.taus().map(|_| 0.5 * normal(&mut rng)).collect();
    let gamma = vec![config.time_varying_coef; config.n_time_varying];

    let n_total = config.n_treated + config.n_control;
    let mut rows = Vec::new();
    for unit in 0..n_total as u64 {
        let treated = (unit as usize) < config.n_treated;
        let d = treated as i32 as f64;
        let z: Vec<f64> = (0..p)
            .map(|j| normal(&mut rng) + if treated { selection_shift[j] } else { 0.0 })
            .collect();
        let alpha = config.unit_effect_sd * normal(&mut rng);
        let z_index: f64 = z.iter().zip(&trend_weights).map(|(a, b)| a * b).sum();

        // Exit wave from the post-event hazard.
        let mut exit = window.m_post as i32;
        let mut t = 1;
        while t <= window.m_post as i32 {
            if rng.gen::<f64>() < config.attrition_hazard {
                exit = t - 1;
                break;
            }
            t += 1;
        }

        // First pass computes raw outcomes; the baseline column echoes the
        // emitted tau = -1 outcome.
        let mut per_wave: Vec<(i32, Vec<f64>, f64)> = Vec::new();
        for tau in window.taus() {
            if tau > exit {
                break;
            }
            let x: Vec<f64> = (0..config.n_time_varying)
                .map(|j| z[j] + normal(&mut rng))
                .collect();
            let mut y = alpha + lambda[(tau + window.k_pre as i32) as usize];
            if tau >= 0 {
                y += config.effect[tau as usize] * d;
            }
            if tau < 0 {
                y += config.pretrend_slope_gap * d * tau as f64;
            }
            y += config.covariate_trend * z_index * tau as f64;
            for (j, &g) in gamma.iter().enumerate() {
                y += g * x[j];
            }
            y += config.noise_sd * normal(&mut rng);
            y += config.outcome_center;
            if config.eurod_outcome {
                y = y.clamp(0.0, 12.0).round();
            }
            per_wave.push((tau, x, y));
        }

        let y_base = per_wave
            .iter()
            .find(|(tau, _, _)| *tau == -1)
            .map(|(_, _, y)| *y)
            .expect("entry at -k_pre guarantees a baseline wave");

        for (tau, x, y) in per_wave {
            let mut values: Vec<Option<f64>> = Vec::with_capacity(schema.variables.len());
            values.push(Some(d));
            for &zj in &z {
                values.push(Some(zj));
            }
            values.push(Some(y_base));
            for &xj in &x {
                values.push(Some(xj));
            }
            values.push(Some(y));
            rows.push(LongRow {
                unit,
                time: tau,
                synthetic: false,
                values,
            });
        }
    }

    Ok(SimulatedPanel {
        panel: LongPanel::new(rows)?,
        schema,
        truth: GroundTruth {
            config: config.clone(),
            lambda,
            gamma,
            selection_shift,
            trend_weights,
        },
    })
}

/// The failure-mode oracle: validates that the configuration is in the
/// sparse/confounded regime, then simulates. Expect caliper matching to
/// drop most treated units and the pre-trend placebo test to reject.
pub fn simulate_sparse_confounded(config: &DgpConfig) -> Result<SimulatedPanel> {
    if config.covariate_dim < 8 {
        return Err(Error::Config(
            "sparse-confounded regime expects covariate_dim >= 8".into(),
        ));
    }
    if config.n_treated > 100 {
        return Err(Error::Config(
            "sparse-confounded regime expects a small treated arm (<= 100)".into(),
        ));
    }
    if config.selection_strength < 1.0 {
        return Err(Error::Config(
            "sparse-confounded regime expects strong selection (>= 1.0)".into(),
        ));
    }
    simulate_panel(config)
}

/// Serializes the ground-truth record next to the panel CSV.
pub fn write_ground_truth(truth: &GroundTruth, path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(truth)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}
