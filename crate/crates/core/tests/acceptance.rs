//! Acceptance suite.
//!
//! Every criterion prints one `ACCEPTANCE <n> (<name>): PASS/FAIL` line
//! (run with `--nocapture` to see them all). Tolerances are pinned in the
//! assertions; oracles are implemented here, independent of the library
//! paths they check.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use panelsynth::dgp::{simulate_panel, simulate_sparse_confounded, DgpConfig};
use panelsynth::encoder::{fit_modes, ColumnCoding, EncodedLayout};
use panelsynth::estimator::{
    cluster_vcov, fit_event_study, pretrend_joint_test, FixedEffects, Sample,
};
use panelsynth::fidelity::{evaluate_all, ks_statistic, FidelityConfig};
use panelsynth::generator::{augment_with_details, train, GenConfig};
use panelsynth::matching::match_panel;
use panelsynth::panel::{LongPanel, LongRow};
use panelsynth::pipeline::{
    run_pipeline, AugmentStageConfig, EstimatorConfig, MatchingConfig, PipelineConfig,
    RobustnessConfig, Stage,
};
use panelsynth::robustness::{oster_bounds, RegressionSummary};
use panelsynth::schema::{Schema, VarKind, VarRole, VariableSpec};
use panelsynth::seed;
use panelsynth::wide::{split_skeleton, to_wide, EventWindow, SkeletonMatrix};

fn criterion(n: usize, name: &str, body: impl FnOnce() + std::panic::UnwindSafe) {
    let start = std::time::Instant::now();
    let result = std::panic::catch_unwind(body);
    let status = if result.is_ok() { "PASS" } else { "FAIL" };
    println!(
        "ACCEPTANCE {n:2} ({name}): {status} [{:.1}s]",
        start.elapsed().as_secs_f64()
    );
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
}

// ---------------------------------------------------------------------------
// 1. Within-demeaned TWFE estimates equal explicit dummy-variable OLS.
// ---------------------------------------------------------------------------

/// Explicit dummy-variable OLS oracle: intercept, unit dummies, time
/// dummies, event interactions, covariates, solved by normal equations.
fn dummy_ols_oracle(
    panel: &LongPanel,
    schema: &Schema,
    covariates: &[String],
    window: EventWindow,
) -> Option<Vec<f64>> {
    let outcome = schema.outcome_index();
    let treat = schema.treatment_index();
    let cov_idx: Vec<usize> = covariates
        .iter()
        .map(|c| schema.var_index(c).unwrap())
        .collect();
    struct R {
        unit: u64,
        time: i32,
        y: f64,
        d: f64,
        covs: Vec<f64>,
    }
    let mut raws = Vec::new();
    for unit in panel.units() {
        let rows = panel.unit_rows(unit);
        let d = rows[0].values[treat].unwrap();
        let usable: Vec<&LongRow> = rows
            .iter()
            .filter(|r| {
                window.contains(r.time)
                    && r.values[outcome].is_some()
                    && cov_idx.iter().all(|&j| r.values[j].is_some())
            })
            .collect();
        if usable.len() < 2 {
            continue;
        }
        for r in usable {
            raws.push(R {
                unit,
                time: r.time,
                y: r.values[outcome].unwrap(),
                d,
                covs: cov_idx.iter().map(|&j| r.values[j].unwrap()).collect(),
            });
        }
    }
    let mut units: Vec<u64> = raws.iter().map(|r| r.unit).collect();
    units.sort_unstable();
    units.dedup();
    let mut times: Vec<i32> = raws.iter().map(|r| r.time).collect();
    times.sort_unstable();
    times.dedup();
    let event_taus: Vec<i32> = window.taus().filter(|&t| t != -1).collect();

    let n = raws.len();
    let k = 1 + (units.len() - 1) + (times.len() - 1) + event_taus.len() + cov_idx.len();
    if n <= k {
        return None;
    }
    let mut x = DMatrix::zeros(n, k);
    let mut y = DVector::zeros(n);
    for (i, r) in raws.iter().enumerate() {
        y[i] = r.y;
        let mut c = 0;
        x[(i, c)] = 1.0;
        c += 1;
        let u = units.binary_search(&r.unit).unwrap();
        if u > 0 {
            x[(i, c + u - 1)] = 1.0;
        }
        c += units.len() - 1;
        let t = times.binary_search(&r.time).unwrap();
        if t > 0 {
            x[(i, c + t - 1)] = 1.0;
        }
        c += times.len() - 1;
        if r.d != 0.0 {
            if let Some(j) = event_taus.iter().position(|&t| t == r.time) {
                x[(i, c + j)] = 1.0;
            }
        }
        c += event_taus.len();
        for (j, &v) in r.covs.iter().enumerate() {
            x[(i, c + j)] = v;
        }
    }
    let beta = (x.transpose() * &x).lu().solve(&(x.transpose() * &y))?;
    let start = 1 + (units.len() - 1) + (times.len() - 1);
    Some(beta.iter().skip(start).copied().collect())
}

fn estimator_schema() -> Schema {
    Schema::new(
        vec![
            VariableSpec::new("treated", VarRole::Static, VarKind::Binary).with_bounds(0.0, 1.0),
            VariableSpec::new("y", VarRole::Dynamic, VarKind::Continuous),
            VariableSpec::new("x0", VarRole::Dynamic, VarKind::Continuous),
        ],
        "unit",
        "tau",
        "treated",
        "y",
    )
    .unwrap()
}

#[test]
fn acceptance_01_twfe_oracle_equivalence() {
    criterion(1, "TWFE oracle equivalence", || {
        let schema = estimator_schema();
        let covs = vec!["x0".to_string()];
        let mut rng = seed::rng(0xACCE_01);
        let mut checked = 0;
        while checked < 50 {
            let n_units = rng.gen_range(4..=10);
            let window = EventWindow::new(3, 2);
            let mut rows = Vec::new();
            for unit in 0..n_units {
                let d = if unit % 2 == 0 { 1.0 } else { 0.0 };
                let entry = rng.gen_range(-3..=-1);
                let exit = rng.gen_range(0..=2);
                for tau in entry..=exit {
                    let x: f64 = rng.gen_range(-1.0..1.0);
                    let y = unit as f64 * 0.8
                        + tau as f64 * 0.4
                        + 0.5 * x
                        + rng.gen_range(-1.0..1.0)
                        + if d != 0.0 && tau >= 0 { 0.7 } else { 0.0 };
                    rows.push(LongRow {
                        unit,
                        time: tau,
                        synthetic: false,
                        values: vec![Some(d), Some(y), Some(x)],
                    });
                }
            }
            let panel = LongPanel::new(rows).unwrap();
            let Some(oracle) = dummy_ols_oracle(&panel, &schema, &covs, window) else {
                continue;
            };
            let result = match fit_event_study(
                &panel,
                &schema,
                Sample::AllUnits,
                &covs,
                window,
                FixedEffects::TwoWay,
            ) {
                Ok(r) => r,
                Err(_) => continue, // collinear draw; resample
            };
            let mut got: Vec<f64> = result.event_coefficients.iter().map(|c| c.estimate).collect();
            got.extend(result.covariate_coefficients.iter().map(|c| c.estimate));
            assert_eq!(got.len(), oracle.len());
            for (a, b) in got.iter().zip(&oracle) {
                assert!(
                    (a - b).abs() < 1e-8,
                    "demeaned {a} vs dummy-variable {b} (panel {checked})"
                );
            }
            checked += 1;
        }
    });
}

// ---------------------------------------------------------------------------
// 2. Known-effect recovery with coverage.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_02_known_effect_recovery() {
    criterion(2, "known-effect recovery", || {
        let truth = [0.2, -0.5, -0.8];
        let reps = 200;
        let mut sums = [0.0f64; 3];
        let mut covered = [0usize; 3];
        for rep in 0..reps {
            let mut config = DgpConfig::baseline(0xACCE_02 + rep as u64);
            config.n_treated = 200;
            config.n_control = 200;
            config.effect = truth.to_vec();
            let sim = simulate_panel(&config).unwrap();
            let res = fit_event_study(
                &sim.panel,
                &sim.schema,
                Sample::AllUnits,
                &["x0".to_string()],
                config.window,
                FixedEffects::TwoWay,
            )
            .unwrap();
            for (i, tau) in [0, 1, 2].iter().enumerate() {
                let c = res.coefficient_at(*tau).unwrap();
                sums[i] += c.estimate;
                if c.ci_low <= truth[i] && truth[i] <= c.ci_high {
                    covered[i] += 1;
                }
            }
        }
        for i in 0..3 {
            let mean = sums[i] / reps as f64;
            assert!(
                (mean - truth[i]).abs() < 0.05,
                "tau {i}: mean estimate {mean} vs truth {}",
                truth[i]
            );
            let coverage = covered[i] as f64 / reps as f64;
            assert!(
                (0.90..=0.98).contains(&coverage),
                "tau {i}: coverage {coverage}"
            );
        }
    });
}

// ---------------------------------------------------------------------------
// 3. Pre-trend placebo test calibration under the null.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_03_pretrend_calibration() {
    criterion(3, "pre-trend test calibration", || {
        let reps = 500;
        let mut rejections = 0;
        for rep in 0..reps {
            let mut config = DgpConfig::baseline(0xACCE_03 + rep as u64);
            config.effect = vec![0.0, 0.0, 0.0];
            config.n_treated = 120;
            config.n_control = 120;
            let sim = simulate_panel(&config).unwrap();
            let res = fit_event_study(
                &sim.panel,
                &sim.schema,
                Sample::AllUnits,
                &["x0".to_string()],
                config.window,
                FixedEffects::TwoWay,
            )
            .unwrap();
            let test = pretrend_joint_test(&res).unwrap();
            if test.p_value < 0.05 {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / reps as f64;
        assert!(
            (0.03..=0.08).contains(&rate),
            "null rejection rate {rate} outside [0.03, 0.08]"
        );
    });
}

// ---------------------------------------------------------------------------
// 4. Skeleton-injection exactness and arm separation.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_04_skeleton_injection_exactness() {
    criterion(4, "skeleton-injection exactness", || {
        let mut config = DgpConfig::baseline(0xACCE_04);
        config.n_treated = 60;
        config.n_control = 60;
        let sim = simulate_panel(&config).unwrap();

        // Training quality is irrelevant here; one epoch keeps it fast.
        let gen = GenConfig {
            epochs: 1,
            batch_size: 16,
            hidden_widths: vec![32, 32],
            noise_dim: 8,
            max_modes: 5,
            seed: 7,
            ..GenConfig::default()
        };
        let out = augment_with_details(&sim.panel, &sim.schema, config.window, &gen, 1000).unwrap();
        assert_eq!(out.synthetic.n_units(), 2000);

        // Collect real skeletons per arm.
        let real_skeletons = |treated: bool| -> BTreeSet<Vec<u64>> {
            let arm_units: BTreeSet<u64> = sim
                .panel
                .treatment_by_unit(&sim.schema)
                .iter()
                .filter(|(_, &t)| t == treated)
                .map(|(&u, _)| u)
                .collect();
            let wide = to_wide(&sim.panel.filter_units(&arm_units), &sim.schema, config.window)
                .unwrap();
            let (skel, _) = split_skeleton(&wide);
            skel.rows
                .iter()
                .map(|r| r.iter().map(|v| v.to_bits()).collect())
                .collect()
        };
        let real_treated = real_skeletons(true);
        let real_control = real_skeletons(false);

        let synth_wide = to_wide(&out.synthetic, &sim.schema, config.window).unwrap();
        let (synth_skel, _) = split_skeleton(&synth_wide);
        let treat_pos = synth_skel
            .var_indices
            .iter()
            .position(|&v| sim.schema.variables[v].name == "treated")
            .unwrap();
        let mut exact = 0;
        for row in &synth_skel.rows {
            let bits: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            let treated = row[treat_pos] != 0.0;
            // Bit-exact equality with a real skeleton in the same arm only.
            let own = if treated { &real_treated } else { &real_control };
            let other = if treated { &real_control } else { &real_treated };
            assert!(!other.contains(&bits), "skeleton crossed treatment arms");
            if own.contains(&bits) {
                exact += 1;
            }
        }
        assert_eq!(
            exact,
            synth_skel.rows.len(),
            "every synthetic static block must equal some real skeleton bit-exactly"
        );
    });
}

// ---------------------------------------------------------------------------
// 5. Output legality on the integer outcome scale.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_05_output_legality() {
    criterion(5, "output legality", || {
        let mut config = DgpConfig::baseline(0xACCE_05);
        config.n_treated = 50;
        config.n_control = 50;
        config.eurod_outcome = true;
        config.outcome_center = 3.5;
        let sim = simulate_panel(&config).unwrap();

        let gen = GenConfig {
            epochs: 30,
            batch_size: 16,
            hidden_widths: vec![64, 64],
            noise_dim: 8,
            max_modes: 6,
            seed: 3,
            ..GenConfig::default()
        };
        let out = augment_with_details(&sim.panel, &sim.schema, config.window, &gen, 500).unwrap();
        assert!(!out.synthetic.is_empty());

        let y_idx = sim.schema.outcome_index();
        let base_idx = sim.schema.var_index("y_base").unwrap();
        let wide = to_wide(&sim.panel, &sim.schema, config.window).unwrap();
        for row in out.synthetic.rows() {
            if let Some(y) = row.values[y_idx] {
                assert!(
                    y.fract() == 0.0 && (0.0..=12.0).contains(&y),
                    "illegal outcome {y}"
                );
            }
            if let Some(b) = row.values[base_idx] {
                assert!(b.fract() == 0.0 && (0.0..=12.0).contains(&b));
            }
            // No padding sentinel leaks into the emitted long panel.
            for (j, v) in row.values.iter().enumerate() {
                if let Some(v) = v {
                    assert!(
                        *v != wide.sentinel[j],
                        "sentinel leaked into column {j} of the long panel"
                    );
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// 6. Generator sanity on the two-mode conditional toy task.
// ---------------------------------------------------------------------------

fn toy_schema() -> Schema {
    Schema::new(
        vec![
            VariableSpec::new("treated", VarRole::Static, VarKind::Binary).with_bounds(0.0, 1.0),
            VariableSpec::new("x", VarRole::Static, VarKind::Binary).with_bounds(0.0, 1.0),
            VariableSpec::new("y", VarRole::Dynamic, VarKind::Continuous),
        ],
        "unit",
        "tau",
        "treated",
        "y",
    )
    .unwrap()
}

fn toy_panel(n: usize, seed: u64) -> LongPanel {
    let mut rng = seed::rng(seed);
    let mut normal = move || -> f64 {
        let u1: f64 = rng.gen::<f64>().max(1e-300);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut rng2 = seed::rng(seed.wrapping_add(1));
    let mut rows = Vec::new();
    for unit in 0..n as u64 {
        let x = if unit % 2 == 0 { 0.0 } else { 1.0 };
        let mu = if x == 0.0 { -2.0 } else { 2.0 };
        let base = rng2.gen_range(-0.1..0.1);
        let y = mu + 0.5 * normal();
        rows.push(LongRow {
            unit,
            time: -1,
            synthetic: false,
            values: vec![Some(0.0), Some(x), Some(base)],
        });
        rows.push(LongRow {
            unit,
            time: 0,
            synthetic: false,
            values: vec![Some(0.0), Some(x), Some(y)],
        });
    }
    LongPanel::new(rows).unwrap()
}

#[test]
fn acceptance_06_generator_sanity() {
    criterion(6, "generator sanity (conditional toy)", || {
        let schema = toy_schema();
        let window = EventWindow::new(1, 0);
        let train_panel = toy_panel(1000, 0xACCE_06);
        let holdout = toy_panel(1000, 0xACCE_66);
        let wide = to_wide(&train_panel, &schema, window).unwrap();

        let config = GenConfig {
            epochs: 300,
            batch_size: 64,
            hidden_widths: vec![128, 128],
            noise_dim: 16,
            max_modes: 3,
            seed: 11,
            ..GenConfig::default()
        };
        assert!(config.epochs <= 300);
        let model = train(&wide, &config).unwrap();

        let holdout_wide = to_wide(&holdout, &schema, window).unwrap();
        let y_col = |x: f64, w: &panelsynth::wide::WideTable| -> Vec<f64> {
            let x_pos = 1;
            let col = w.dyn_col(0, 0);
            w.rows
                .iter()
                .filter(|r| r[x_pos] == x)
                .map(|r| r[col])
                .collect()
        };

        for (x, truth) in [(0.0, -2.0), (1.0, 2.0)] {
            let skel = SkeletonMatrix {
                var_indices: model.layout.static_vars.clone(),
                units: vec![0; 500],
                rows: vec![vec![0.0, x]; 500],
                donors: None,
            };
            let traj = panelsynth::generator::generate(&model, &skel, 77).unwrap();
            let generated: Vec<f64> = traj.rows.iter().map(|r| r[1]).collect();
            let mean: f64 = generated.iter().sum::<f64>() / generated.len() as f64;
            assert!(
                (mean - truth).abs() < 0.5,
                "conditional mean at x={x}: {mean} vs {truth}"
            );
            let real = y_col(x, &holdout_wide);
            let d = ks_statistic(&generated, &real);
            assert!(d < 0.15, "per-condition KS at x={x}: {d}");
        }
    });
}

// ---------------------------------------------------------------------------
// 7. Encoder round-trip and EM monotonicity.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_07_encoder_round_trip() {
    criterion(7, "encoder round-trip", || {
        let mut rng = seed::rng(0xACCE_07);
        // Trimodal sample keeps several modes alive.
        let values: Vec<f64> = (0..3000)
            .map(|i| {
                let center = [-6.0, 0.0, 5.0][i % 3];
                let u1: f64 = rng.gen::<f64>().max(1e-300);
                let u2: f64 = rng.gen();
                center + 0.8 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let model = fit_modes("v", &values, 6, 9).unwrap();

        // Log-likelihood monotone on every iteration.
        for pair in model.loglik_trace.windows(2) {
            assert!(
                pair[1] >= pair[0] - 1e-9 * pair[0].abs().max(1.0),
                "EM log-likelihood decreased: {} -> {}",
                pair[0],
                pair[1]
            );
        }

        let layout = EncodedLayout {
            codings: vec![Some(ColumnCoding::Modes {
                model: model.clone(),
                has_unobserved: false,
                sentinel: -1e9,
            })],
            static_vars: vec![0],
            dynamic_vars: vec![],
            n_periods: 1,
            skeleton_width: 1 + model.n_modes(),
            trajectory_width: 0,
        };
        let sample: Vec<Vec<f64>> = values.iter().take(1000).map(|&v| vec![v]).collect();
        let enc = layout.encode_skeleton_rows(&sample, 13).unwrap();
        let dec = layout.decode_full(&enc);
        let mut max_err: f64 = 0.0;
        let mut in_support = 0;
        for (i, row) in sample.iter().enumerate() {
            // alpha strictly inside (-1, 1) means the value lies within 4
            // sigma of its sampled mode.
            if enc[(i, 0)].abs() < 1.0 {
                max_err = max_err.max((dec[i][0] - row[0]).abs());
                in_support += 1;
            }
        }
        assert!(in_support >= 990, "only {in_support}/1000 values in support");
        assert!(max_err < 1e-6, "round-trip error {max_err}");
    });
}

// ---------------------------------------------------------------------------
// 8. Fidelity identity suite.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_08_fidelity_identity() {
    criterion(8, "fidelity identity suite", || {
        let mut config = DgpConfig::baseline(0xACCE_08);
        config.n_treated = 250;
        config.n_control = 250;
        let sim = simulate_panel(&config).unwrap();
        let report = evaluate_all(
            &sim.panel,
            &sim.panel,
            &sim.schema,
            config.window,
            &FidelityConfig { folds: 5, seed: 5 },
        )
        .unwrap();
        assert_eq!(report.ks_score, 1.0, "ks_score");
        assert_eq!(report.mape, 0.0, "mape");
        assert_eq!(report.corr_diff, 0.0, "corr_diff");
        assert!(
            (0.45..=0.55).contains(&report.adversarial_accuracy),
            "adversarial accuracy {}",
            report.adversarial_accuracy
        );
        assert_eq!(report.pretrend_preservation, 1.0, "pretrend preservation");
    });
}

// ---------------------------------------------------------------------------
// 9. Common-support rescue.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_09_common_support_rescue() {
    criterion(9, "common-support rescue", || {
        let seeds = 50;
        let mut successes = 0;
        let mut raw_drop_hits = 0;
        let mut raw_reject_hits = 0;
        let mut aug_flat_hits = 0;
        let mut aug_accept_hits = 0;
        for s in 0..seeds {
            let config = DgpConfig::sparse_confounded(0xACCE_09 + s as u64);
            let sim = simulate_sparse_confounded(&config).unwrap();
            let covs: Vec<String> = (0..config.covariate_dim)
                .map(|j| format!("z{j}"))
                .chain(std::iter::once("y_base".to_string()))
                .collect();

            // Raw phase: matching collapses and matched pre-trends reject.
            let (matched_raw, _) = match_panel(&sim.panel, &sim.schema, &covs, 0.2).unwrap();
            let drop_frac =
                matched_raw.dropped_treated.len() as f64 / config.n_treated as f64;
            let raw_rejects = fit_event_study(
                &sim.panel,
                &sim.schema,
                Sample::Matched(&matched_raw),
                &[],
                config.window,
                FixedEffects::TwoWay,
            )
            .ok()
            .and_then(|r| pretrend_joint_test(&r).ok())
            .map(|t| t.p_value < 0.05)
            .unwrap_or(false);

            // Augmented phase: x10 sample growth, equal arms.
            let n_target = 5 * (config.n_treated + config.n_control);
            let gen = GenConfig {
                epochs: 220,
                batch_size: 10,
                hidden_widths: vec![96, 96],
                noise_dim: 16,
                max_modes: 5,
                seed: seed::derive(0xACCE_09, "gan", s as u64),
                ..GenConfig::default()
            };
            let out =
                augment_with_details(&sim.panel, &sim.schema, config.window, &gen, n_target)
                    .unwrap();
            let synth = out.synthetic;

            let (matched_aug, _) = match_panel(&synth, &sim.schema, &covs, 0.2).unwrap();
            let aug_result = fit_event_study(
                &synth,
                &sim.schema,
                Sample::Matched(&matched_aug),
                &[],
                config.window,
                FixedEffects::TwoWay,
            )
            .unwrap();
            let pre_flat = aug_result
                .event_taus
                .iter()
                .zip(&aug_result.event_coefficients)
                .filter(|(&tau, _)| tau <= -2)
                .all(|(_, c)| c.estimate.abs() < 0.1);
            let aug_accepts = pretrend_joint_test(&aug_result)
                .map(|t| t.p_value > 0.05)
                .unwrap_or(false);

            raw_drop_hits += (drop_frac > 0.5) as usize;
            raw_reject_hits += raw_rejects as usize;
            aug_flat_hits += pre_flat as usize;
            aug_accept_hits += aug_accepts as usize;
            if drop_frac > 0.5 && raw_rejects && pre_flat && aug_accepts {
                successes += 1;
            }
        }
        println!(
            "  rescue components over {seeds} seeds: raw-drop {raw_drop_hits}, raw-reject {raw_reject_hits}, aug-flat {aug_flat_hits}, aug-accept {aug_accept_hits}"
        );
        assert!(
            successes as f64 >= 0.8 * seeds as f64,
            "rescue succeeded in only {successes}/{seeds} seeds"
        );
    });
}

// ---------------------------------------------------------------------------
// 10. Oster bounds against an analytically derived oracle.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_10_oster_oracle() {
    criterion(10, "coefficient-stability oracle", || {
        // Constructed omitted-variable data with exact OLS moments.
        let mut rng = seed::rng(0xACCE_10);
        let n = 5000;
        let mut d = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let di: f64 = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            let wi: f64 = 0.6 * di + rng.gen_range(-1.0..1.0);
            y.push(1.0 * di + 0.8 * wi + rng.gen_range(-0.6..0.6));
            d.push(di);
            w.push(wi);
        }
        let ols = |cols: &[&[f64]], y: &[f64]| -> (f64, f64) {
            let n = y.len();
            let k = cols.len() + 1;
            let x = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { cols[j - 1][i] });
            let yv = DVector::from_column_slice(y);
            let beta = (x.transpose() * &x)
                .lu()
                .solve(&(x.transpose() * &yv))
                .unwrap();
            let resid = &yv - &x * &beta;
            let rss: f64 = resid.iter().map(|r| r * r).sum();
            let mean = y.iter().sum::<f64>() / n as f64;
            let tss: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
            (beta[1], 1.0 - rss / tss)
        };
        let (beta_c, r_c) = ols(&[&d, &w], &y);
        let (beta_u, r_u) = ols(&[&d], &y);

        let res = oster_bounds(
            RegressionSummary { beta: beta_c, r_squared: r_c },
            RegressionSummary { beta: beta_u, r_squared: r_u },
            1.3,
        )
        .unwrap();

        // The r_max rule.
        assert!((res.r_max - (1.3 * r_c).min(1.0)).abs() < 1e-15);
        // Analytic delta and beta* from the same exact moments.
        let r_max = (1.3 * r_c).min(1.0);
        let expected_star = beta_c - (beta_u - beta_c) * (r_max - r_c) / (r_c - r_u);
        let expected_delta = beta_c * (r_c - r_u) / ((beta_u - beta_c) * (r_max - r_c));
        assert!(
            (res.beta_star_at_delta_1 - expected_star).abs() < 1e-6,
            "beta* {} vs {expected_star}",
            res.beta_star_at_delta_1
        );
        assert!(
            (res.delta_for_zero - expected_delta).abs() < 1e-6,
            "delta {} vs {expected_delta}",
            res.delta_for_zero
        );
    });
}

// ---------------------------------------------------------------------------
// 11. Cluster-robust covariance oracle.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_11_cluster_vcov_oracle() {
    criterion(11, "cluster-robust covariance oracle", || {
        let mut rng = seed::rng(0xACCE_11);
        // Random fixtures against an independently coded sandwich.
        for trial in 0..20 {
            let g = rng.gen_range(3..8);
            let per = rng.gen_range(2..5);
            let n = g * per;
            let k = 3;
            let x = DMatrix::from_fn(n, k, |_, j| {
                if j == 0 {
                    1.0
                } else {
                    rng.gen_range(-1.0f64..1.0)
                }
            });
            let resid = DVector::from_fn(n, |_, _| rng.gen_range(-0.8f64..0.8));
            let clusters: Vec<u64> = (0..n).map(|i| (i / per) as u64).collect();
            let v = cluster_vcov(&x, &resid, &clusters, k).unwrap();

            let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
            let mut meat = DMatrix::zeros(k, k);
            for gi in 0..g {
                let mut s: DVector<f64> = DVector::zeros(k);
                for i in 0..n {
                    if clusters[i] == gi as u64 {
                        for j in 0..k {
                            s[j] += x[(i, j)] * resid[i];
                        }
                    }
                }
                meat += &s * s.transpose();
            }
            let (nf, gf, kf) = (n as f64, g as f64, k as f64);
            let c = gf / (gf - 1.0) * (nf - 1.0) / (nf - kf);
            let expected = c * &xtx_inv * meat * &xtx_inv;
            for a in 0..k {
                for b in 0..k {
                    assert!(
                        (v[(a, b)] - expected[(a, b)]).abs() < 1e-10,
                        "trial {trial} ({a},{b}): {} vs {}",
                        v[(a, b)],
                        expected[(a, b)]
                    );
                }
            }
        }

        // Degenerate single-row clusters reduce to the HC form.
        let n = 40;
        let x = DMatrix::from_fn(n, 2, |_, j| {
            if j == 0 {
                1.0
            } else {
                rng.gen_range(-1.0f64..1.0)
            }
        });
        let resid = DVector::from_fn(n, |_, _| rng.gen_range(-0.5f64..0.5));
        let clusters: Vec<u64> = (0..n as u64).collect();
        let v = cluster_vcov(&x, &resid, &clusters, 2).unwrap();
        let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
        let mut meat = DMatrix::zeros(2, 2);
        for i in 0..n {
            let xi = DVector::from_column_slice(&[x[(i, 0)], x[(i, 1)]]);
            meat += resid[i] * resid[i] * &xi * xi.transpose();
        }
        let nf = n as f64;
        let c = nf / (nf - 1.0) * (nf - 1.0) / (nf - 2.0);
        let expected = c * &xtx_inv * meat * &xtx_inv;
        for a in 0..2 {
            for b in 0..2 {
                assert!((v[(a, b)] - expected[(a, b)]).abs() < 1e-10);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// 12. End-to-end determinism.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_12_end_to_end_determinism() {
    criterion(12, "end-to-end determinism", || {
        let dir = tempfile::tempdir().unwrap();
        let mut dgp = DgpConfig::baseline(0xACCE_12);
        dgp.n_treated = 40;
        dgp.n_control = 40;
        let sim = simulate_panel(&dgp).unwrap();
        let input = dir.path().join("panel.csv");
        panelsynth::panel::write_long_csv(&sim.panel, &sim.schema, &input).unwrap();

        let make_config = |out: std::path::PathBuf| PipelineConfig {
            input: input.clone(),
            output_dir: out,
            root_seed: 99,
            stages: vec![
                Stage::Ingest,
                Stage::Augment,
                Stage::Match,
                Stage::Estimate,
                Stage::Evaluate,
                Stage::Robustness,
            ],
            window: dgp.window,
            schema: sim.schema.clone(),
            align: None,
            augment: AugmentStageConfig {
                n_target_per_arm: 60,
                gen: GenConfig {
                    epochs: 3,
                    batch_size: 16,
                    hidden_widths: vec![32, 32],
                    noise_dim: 8,
                    max_modes: 4,
                    ..GenConfig::default()
                },
            },
            matching: Some(MatchingConfig {
                covariates: vec!["z0".into(), "z1".into(), "z2".into(), "y_base".into()],
                caliper_multiplier: 0.2,
            }),
            estimator: EstimatorConfig {
                covariates: vec!["x0".into()],
            },
            robustness: RobustnessConfig::default(),
            fidelity_folds: 5,
        };

        let out_a = run_pipeline(&make_config(dir.path().join("a"))).unwrap();
        let out_b = run_pipeline(&make_config(dir.path().join("b"))).unwrap();
        assert_eq!(
            out_a.manifest.entries.len(),
            out_b.manifest.entries.len(),
            "artifact sets differ"
        );
        for (a, b) in out_a.manifest.entries.iter().zip(&out_b.manifest.entries) {
            assert_eq!(a.file, b.file);
            assert_eq!(
                a.sha256, b.sha256,
                "artifact '{}' differs between identical runs",
                a.file
            );
        }
    });
}
