//! Config-driven pipeline orchestration.
//!
//! A single TOML config declares the schema, input path, stage chain and
//! per-stage settings. Stages run in a fixed order (ingest, augment,
//! match, estimate, evaluate, robustness); every artifact lands under the
//! output directory and is recorded in a manifest with its checksum and
//! stage seed. The root seed fans out per stage, so re-running an
//! identical config reproduces identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dgp::DgpConfig;
use crate::error::{Error, Result};
use crate::estimator::{
    event_term_name, fit_dynamic_ols, fit_event_study, pretrend_joint_test, DynamicOlsResult,
    EventStudyResult, FixedEffects, PretrendTest, Sample,
};
use crate::fidelity::{evaluate_all, FidelityConfig, FidelityReport};
use crate::generator::{augment_with_details, GenConfig};
use crate::matching::{
    match_panel, write_pairs_csv, BalanceReport, MatchDiagnostics, MatchedSet,
    DEFAULT_CALIPER_MULTIPLIER,
};
use crate::panel::{
    align_event_time, apply_inclusion, load_long_csv, write_long_csv, LongPanel,
};
use crate::robustness::{
    oster_bounds, subgroup_rerun, OsterResult, RegressionSummary, SubgroupConfig,
    SubgroupOutcome, DEFAULT_R_MAX_FACTOR,
};
use crate::schema::{Schema, VarRole};
use crate::seed;
use crate::wide::EventWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Augment,
    Match,
    Estimate,
    Evaluate,
    Robustness,
}

impl Stage {
    pub const ORDER: [Stage; 6] = [
        Stage::Ingest,
        Stage::Augment,
        Stage::Match,
        Stage::Estimate,
        Stage::Evaluate,
        Stage::Robustness,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Augment => "augment",
            Stage::Match => "match",
            Stage::Estimate => "estimate",
            Stage::Evaluate => "evaluate",
            Stage::Robustness => "robustness",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Stage> {
        match s {
            "ingest" => Ok(Stage::Ingest),
            "augment" => Ok(Stage::Augment),
            "match" => Ok(Stage::Match),
            "estimate" => Ok(Stage::Estimate),
            "evaluate" => Ok(Stage::Evaluate),
            "robustness" => Ok(Stage::Robustness),
            other => Err(Error::Config(format!("unknown stage '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignConfig {
    /// Static column holding each unit's event wave; the event-time column
    /// is interpreted as a raw wave and recentered against it.
    pub event_wave_column: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentStageConfig {
    pub n_target_per_arm: usize,
    pub gen: GenConfig,
}

impl Default for AugmentStageConfig {
    fn default() -> Self {
        AugmentStageConfig {
            n_target_per_arm: 1000,
            gen: GenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchingConfig {
    pub covariates: Vec<String>,
    #[serde(default = "default_caliper")]
    pub caliper_multiplier: f64,
}

fn default_caliper() -> f64 {
    DEFAULT_CALIPER_MULTIPLIER
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustnessConfig {
    pub r_max_factor: f64,
    pub subgroup_column: Option<String>,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            r_max_factor: DEFAULT_R_MAX_FACTOR,
            subgroup_column: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub output_dir: PathBuf,
    pub root_seed: u64,
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub window: EventWindow,
    pub schema: Schema,
    #[serde(default)]
    pub align: Option<AlignConfig>,
    #[serde(default)]
    pub augment: AugmentStageConfig,
    #[serde(default)]
    pub matching: Option<MatchingConfig>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub robustness: RobustnessConfig,
    #[serde(default = "default_fidelity_folds")]
    pub fidelity_folds: usize,
}

fn default_fidelity_folds() -> usize {
    5
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<PipelineConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        // Relative paths resolve against the config file's directory.
        if let Some(dir) = path.parent() {
            if config.input.is_relative() {
                config.input = dir.join(&config.input);
            }
            if config.output_dir.is_relative() {
                config.output_dir = dir.join(&config.output_dir);
            }
        }
        Ok(config)
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.stages.is_empty() {
            return Err(Error::Config("stage list is empty".into()));
        }
        // Stages must follow the canonical order without duplicates.
        let mut last = None;
        for stage in &self.stages {
            let pos = Stage::ORDER.iter().position(|s| s == stage).unwrap();
            if let Some(prev) = last {
                if pos <= prev {
                    return Err(Error::Config(format!(
                        "stage '{}' is out of order or duplicated",
                        stage.name()
                    )));
                }
            }
            last = Some(pos);
        }
        if !self.has_stage(Stage::Ingest) {
            return Err(Error::Config("every chain starts with 'ingest'".into()));
        }
        if self.has_stage(Stage::Evaluate) && !self.has_stage(Stage::Augment) {
            return Err(Error::Config(
                "'evaluate' compares real and synthetic panels and needs 'augment'".into(),
            ));
        }
        if self.has_stage(Stage::Robustness) && !self.has_stage(Stage::Estimate) {
            return Err(Error::Config("'robustness' needs 'estimate'".into()));
        }
        if self.has_stage(Stage::Match) {
            let m = self
                .matching
                .as_ref()
                .ok_or_else(|| Error::Config("'match' stage needs a [matching] section".into()))?;
            if m.covariates.is_empty() {
                return Err(Error::Config("matching covariate list is empty".into()));
            }
            for c in &m.covariates {
                self.schema.var_index(c)?;
            }
        }
        for c in &self.estimator.covariates {
            self.schema.var_index(c)?;
        }
        if let Some(col) = &self.robustness.subgroup_column {
            let (idx, spec) = self
                .schema
                .var(col)
                .ok_or_else(|| Error::Config(format!("unknown subgroup column '{col}'")))?;
            let _ = idx;
            if spec.role != VarRole::Static {
                return Err(Error::Config(format!(
                    "subgroup column '{col}' must be static"
                )));
            }
        }
        if let Some(align) = &self.align {
            let (_, spec) = self.schema.var(&align.event_wave_column).ok_or_else(|| {
                Error::Config(format!(
                    "event-wave column '{}' must be declared in the schema",
                    align.event_wave_column
                ))
            })?;
            if spec.role != VarRole::Static {
                return Err(Error::Config("event-wave column must be static".into()));
            }
        }
        if !self.input.exists() {
            return Err(Error::Config(format!(
                "input file '{}' does not exist",
                self.input.display()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub stage: String,
    pub sha256: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub root_seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    fn record(&mut self, out_dir: &Path, path: &Path, stage: Stage, seed: u64) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let digest = Sha256::digest(&bytes);
        let rel = path
            .strip_prefix(out_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        self.entries.push(ManifestEntry {
            file: rel,
            stage: stage.name().to_string(),
            sha256: format!("{digest:x}"),
            seed,
        });
        Ok(())
    }
}

/// Everything the stages produced, for library callers.
#[derive(Debug, Default)]
pub struct ResultsBundle {
    pub real_panel: Option<LongPanel>,
    pub synthetic_panel: Option<LongPanel>,
    pub matched: Option<MatchedSet>,
    pub match_diagnostics: Option<MatchDiagnostics>,
    pub base: Option<EventStudyResult>,
    pub dynamic: Option<DynamicOlsResult>,
    pub matched_estimate: Option<EventStudyResult>,
    pub pretrend: Option<PretrendTest>,
    pub fidelity: Option<FidelityReport>,
    pub oster: Option<Vec<(String, OsterResult)>>,
    pub subgroups: Option<BTreeMap<String, SubgroupSummary>>,
}

impl ResultsBundle {
    /// Matched specification when available, otherwise the base one.
    pub fn preferred_estimate(&self) -> Option<&EventStudyResult> {
        self.matched_estimate.as_ref().or(self.base.as_ref())
    }
}

/// Serializable digest of one stratum re-run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubgroupSummary {
    pub estimated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_pairs: Option<usize>,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub manifest: Manifest,
    pub completed: Vec<Stage>,
    pub bundle: ResultsBundle,
    pub output_dir: PathBuf,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json =
        serde_json::to_string_pretty(value).map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Writes the report files for whatever results are present: coefficient
/// and plot-data CSVs for estimates, JSON documents for fidelity, bounds
/// and balance. Returns the written paths.
pub fn emit_report(bundle: &ResultsBundle, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let any_estimate =
        bundle.base.is_some() || bundle.dynamic.is_some() || bundle.matched_estimate.is_some();
    if any_estimate {
        let path = out_dir.join("coefficients.csv");
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["model", "term", "estimate", "se", "ci_low", "ci_high", "p_value"])?;
        let mut write_event = |model: &str, r: &EventStudyResult| -> Result<()> {
            for c in r.event_coefficients.iter().chain(&r.covariate_coefficients) {
                w.write_record(&[
                    model.to_string(),
                    c.term.clone(),
                    c.estimate.to_string(),
                    c.se.to_string(),
                    c.ci_low.to_string(),
                    c.ci_high.to_string(),
                    c.p_value.to_string(),
                ])?;
            }
            Ok(())
        };
        if let Some(r) = &bundle.base {
            write_event("did_base", r)?;
        }
        if let Some(r) = &bundle.matched_estimate {
            write_event("matched_did", r)?;
        }
        if let Some(d) = &bundle.dynamic {
            for c in std::iter::once(&d.lag)
                .chain(&d.event_coefficients)
                .chain(&d.covariate_coefficients)
            {
                w.write_record(&[
                    "dynamic_ols".to_string(),
                    c.term.clone(),
                    c.estimate.to_string(),
                    c.se.to_string(),
                    c.ci_low.to_string(),
                    c.ci_high.to_string(),
                    c.p_value.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);

        if let Some(r) = bundle.preferred_estimate() {
            let path = out_dir.join("plot_data.csv");
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::Writer::from_writer(file);
            w.write_record(["tau", "estimate", "ci_low", "ci_high"])?;
            for (tau, c) in r.event_taus.iter().zip(&r.event_coefficients) {
                w.write_record(&[
                    tau.to_string(),
                    c.estimate.to_string(),
                    c.ci_low.to_string(),
                    c.ci_high.to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }

    if let Some(f) = &bundle.fidelity {
        let path = out_dir.join("fidelity.json");
        write_json(f, &path)?;
        written.push(path);
    }
    if let Some(oster) = &bundle.oster {
        let path = out_dir.join("oster.json");
        write_json(oster, &path)?;
        written.push(path);
    }
    if let Some(d) = &bundle.match_diagnostics {
        let path = out_dir.join("balance.json");
        write_json::<BalanceReport>(&d.balance, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Executes the configured stage chain. Artifacts are written under
/// `output_dir` and recorded in `manifest.json`; a failing stage aborts
/// with the manifest reflecting completed stages.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    let out_dir = config.output_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let mut manifest = Manifest {
        root_seed: config.root_seed,
        ..Manifest::default()
    };
    let mut completed = Vec::new();
    let mut bundle = ResultsBundle::default();
    let schema = &config.schema;

    // --- ingest ---------------------------------------------------------
    let ingest_seed = seed::derive(config.root_seed, "ingest", 0);
    let real_panel = {
        let loaded = load_long_csv(&config.input, schema).map_err(|e| e.in_stage("ingest"))?;
        let (panel, dropped) = match &config.align {
            Some(align) => {
                let col = schema.var_index(&align.event_wave_column)?;
                let mut map = BTreeMap::new();
                for unit in loaded.units() {
                    let wave = loaded.unit_rows(unit)[0].values[col].ok_or_else(|| {
                        Error::Insufficient(format!("unit {unit} has no event wave"))
                            .in_stage("ingest")
                    })?;
                    map.insert(unit, wave as i32);
                }
                align_event_time(&loaded, &map).map_err(|e| e.in_stage("ingest"))?
            }
            None => apply_inclusion(&loaded),
        };
        let path = out_dir.join("panel_real.csv");
        write_long_csv(&panel, schema, &path).map_err(|e| e.in_stage("ingest"))?;
        manifest.record(&out_dir, &path, Stage::Ingest, ingest_seed)?;
        if !dropped.is_empty() {
            let path = out_dir.join("ingest_dropped.json");
            write_json(&dropped, &path)?;
            manifest.record(&out_dir, &path, Stage::Ingest, ingest_seed)?;
        }
        panel
    };
    bundle.real_panel = Some(real_panel.clone());
    completed.push(Stage::Ingest);

    // --- augment --------------------------------------------------------
    let mut estimation_panel = real_panel.clone();
    if config.has_stage(Stage::Augment) {
        let aug_seed = seed::derive(config.root_seed, "augment", 0);
        let gen = {
            let mut g = config.augment.gen.clone();
            g.seed = aug_seed;
            g
        };
        let out = augment_with_details(
            &real_panel,
            schema,
            config.window,
            &gen,
            config.augment.n_target_per_arm,
        )
        .map_err(|e| e.in_stage("augment"))?;

        let path = out_dir.join("panel_synthetic.csv");
        write_long_csv(&out.synthetic, schema, &path).map_err(|e| e.in_stage("augment"))?;
        manifest.record(&out_dir, &path, Stage::Augment, aug_seed)?;
        for arm in &out.arms {
            let name = if arm.treated {
                "model_treated.json"
            } else {
                "model_control.json"
            };
            let path = out_dir.join(name);
            arm.model.save_checkpoint(&path)?;
            manifest.record(&out_dir, &path, Stage::Augment, aug_seed)?;
        }
        let path = out_dir.join("augment_dropped.json");
        write_json(&out.drop_log, &path)?;
        manifest.record(&out_dir, &path, Stage::Augment, aug_seed)?;

        estimation_panel = real_panel
            .concat(&out.synthetic)
            .map_err(|e| e.in_stage("augment"))?;
        let path = out_dir.join("panel_augmented.csv");
        write_long_csv(&estimation_panel, schema, &path).map_err(|e| e.in_stage("augment"))?;
        manifest.record(&out_dir, &path, Stage::Augment, aug_seed)?;

        bundle.synthetic_panel = Some(out.synthetic);
        completed.push(Stage::Augment);
    }

    // --- match ----------------------------------------------------------
    if config.has_stage(Stage::Match) {
        let match_seed = seed::derive(config.root_seed, "match", 0);
        let m = config.matching.as_ref().expect("validated");
        let (matched, diagnostics) = match_panel(
            &estimation_panel,
            schema,
            &m.covariates,
            m.caliper_multiplier,
        )
        .map_err(|e| e.in_stage("match"))?;
        let path = out_dir.join("matched_pairs.csv");
        write_pairs_csv(&matched, &path).map_err(|e| e.in_stage("match"))?;
        manifest.record(&out_dir, &path, Stage::Match, match_seed)?;
        bundle.matched = Some(matched);
        bundle.match_diagnostics = Some(diagnostics);
        completed.push(Stage::Match);
    }

    // --- estimate -------------------------------------------------------
    if config.has_stage(Stage::Estimate) {
        let est_seed = seed::derive(config.root_seed, "estimate", 0);
        let covs = &config.estimator.covariates;
        bundle.base = Some(
            fit_event_study(
                &estimation_panel,
                schema,
                Sample::AllUnits,
                covs,
                config.window,
                FixedEffects::TwoWay,
            )
            .map_err(|e| e.in_stage("estimate"))?,
        );
        bundle.dynamic = Some(
            fit_dynamic_ols(&estimation_panel, schema, covs, config.window)
                .map_err(|e| e.in_stage("estimate"))?,
        );
        if let Some(matched) = &bundle.matched {
            bundle.matched_estimate = Some(
                fit_event_study(
                    &estimation_panel,
                    schema,
                    Sample::Matched(matched),
                    covs,
                    config.window,
                    FixedEffects::TwoWay,
                )
                .map_err(|e| e.in_stage("estimate"))?,
            );
        }
        if let Some(preferred) = bundle.preferred_estimate() {
            bundle.pretrend = pretrend_joint_test(preferred).ok();
        }
        if let Some(p) = &bundle.pretrend {
            let path = out_dir.join("pretrend.json");
            write_json(p, &path)?;
            manifest.record(&out_dir, &path, Stage::Estimate, est_seed)?;
        }
        completed.push(Stage::Estimate);
    }

    // --- evaluate -------------------------------------------------------
    if config.has_stage(Stage::Evaluate) {
        let eval_seed = seed::derive(config.root_seed, "evaluate", 0);
        let synth = bundle.synthetic_panel.as_ref().expect("validated");
        let report = evaluate_all(
            &real_panel,
            synth,
            schema,
            config.window,
            &FidelityConfig {
                folds: config.fidelity_folds,
                seed: eval_seed,
            },
        )
        .map_err(|e| e.in_stage("evaluate"))?;
        bundle.fidelity = Some(report);
        completed.push(Stage::Evaluate);
    }

    // --- robustness -----------------------------------------------------
    if config.has_stage(Stage::Robustness) {
        let rob_seed = seed::derive(config.root_seed, "robustness", 0);
        let preferred = bundle
            .preferred_estimate()
            .ok_or_else(|| Error::Insufficient("no estimate to bound".into()))?
            .clone();
        let sample = match &bundle.matched {
            Some(m) if bundle.matched_estimate.is_some() => Sample::Matched(m),
            _ => Sample::AllUnits,
        };
        let uncontrolled = fit_event_study(
            &estimation_panel,
            schema,
            sample,
            &[],
            config.window,
            FixedEffects::TimeOnly,
        )
        .map_err(|e| e.in_stage("robustness"))?;

        let mut oster = Vec::new();
        for tau in 0..=config.window.m_post as i32 {
            let (Some(controlled_c), Some(uncontrolled_c)) =
                (preferred.coefficient_at(tau), uncontrolled.coefficient_at(tau))
            else {
                continue;
            };
            let result = oster_bounds(
                RegressionSummary {
                    beta: controlled_c.estimate,
                    r_squared: preferred.r2_overall,
                },
                RegressionSummary {
                    beta: uncontrolled_c.estimate,
                    r_squared: uncontrolled.r2_overall,
                },
                config.robustness.r_max_factor,
            );
            match result {
                Ok(r) => oster.push((event_term_name(tau), r)),
                Err(Error::StabilityUndefined) => {
                    return Err(Error::StabilityUndefined.in_stage("robustness"))
                }
                Err(e) => return Err(e.in_stage("robustness")),
            }
        }
        bundle.oster = Some(oster);

        if let Some(col_name) = &config.robustness.subgroup_column {
            let col = schema.var_index(col_name)?;
            let mut grouping = BTreeMap::new();
            for unit in estimation_panel.units() {
                if let Some(v) = estimation_panel.unit_rows(unit)[0].values[col] {
                    grouping.insert(unit, format!("{v}"));
                }
            }
            let m = config.matching.as_ref().ok_or_else(|| {
                Error::Config("subgroup reruns need a [matching] section".into())
            })?;
            let outcomes = subgroup_rerun(
                &estimation_panel,
                schema,
                &grouping,
                &SubgroupConfig {
                    matching_covariates: m.covariates.clone(),
                    caliper_multiplier: m.caliper_multiplier,
                    estimator_covariates: config.estimator.covariates.clone(),
                    window: config.window,
                },
            );
            let sub_dir = out_dir.join("subgroups");
            std::fs::create_dir_all(&sub_dir).map_err(|e| Error::io(&sub_dir, e))?;
            let mut summaries = BTreeMap::new();
            for (label, outcome) in &outcomes {
                match outcome {
                    SubgroupOutcome::Estimated { result, matched, .. } => {
                        let path = sub_dir.join(format!("{label}_coefficients.csv"));
                        let file =
                            std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                        let mut w = csv::Writer::from_writer(file);
                        w.write_record(["term", "estimate", "se", "ci_low", "ci_high", "p_value"])?;
                        for c in &result.event_coefficients {
                            w.write_record(&[
                                c.term.clone(),
                                c.estimate.to_string(),
                                c.se.to_string(),
                                c.ci_low.to_string(),
                                c.ci_high.to_string(),
                                c.p_value.to_string(),
                            ])?;
                        }
                        w.flush().map_err(|e| Error::io(&path, e))?;
                        manifest.record(&out_dir, &path, Stage::Robustness, rob_seed)?;
                        summaries.insert(
                            label.clone(),
                            SubgroupSummary {
                                estimated: true,
                                skip_reason: None,
                                n_pairs: Some(matched.n_pairs()),
                            },
                        );
                    }
                    SubgroupOutcome::Skipped { reason } => {
                        summaries.insert(
                            label.clone(),
                            SubgroupSummary {
                                estimated: false,
                                skip_reason: Some(reason.clone()),
                                n_pairs: None,
                            },
                        );
                    }
                }
            }
            let path = out_dir.join("subgroups.json");
            write_json(&summaries, &path)?;
            manifest.record(&out_dir, &path, Stage::Robustness, rob_seed)?;
            bundle.subgroups = Some(summaries);
        }
        completed.push(Stage::Robustness);
    }

    // --- reports + manifest ----------------------------------------------
    let report_stage = *completed.last().unwrap();
    let report_seed = seed::derive(config.root_seed, "report", 0);
    for path in emit_report(&bundle, &out_dir)? {
        manifest.record(&out_dir, &path, report_stage, report_seed)?;
    }
    manifest.entries.sort_by(|a, b| a.file.cmp(&b.file));
    let manifest_path = out_dir.join("manifest.json");
    write_json(&manifest, &manifest_path)?;

    Ok(PipelineOutcome {
        manifest,
        completed,
        bundle,
        output_dir: out_dir,
    })
}

/// Writes a simulated panel, its schema and its ground truth under
/// `out_dir` for the `simulate` command.
pub fn write_simulation(config: &DgpConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let sim = crate::dgp::simulate_panel(config)?;
    let panel_path = out_dir.join("panel.csv");
    write_long_csv(&sim.panel, &sim.schema, &panel_path)?;
    let truth_path = out_dir.join("ground_truth.json");
    crate::dgp::write_ground_truth(&sim.truth, &truth_path)?;
    let schema_path = out_dir.join("schema.toml");
    let schema_text = toml::to_string_pretty(&sim.schema)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(&schema_path, schema_text).map_err(|e| Error::io(&schema_path, e))?;
    Ok(vec![panel_path, truth_path, schema_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{VarKind, VariableSpec};

    fn minimal_schema() -> Schema {
        Schema::new(
            vec![
                VariableSpec::new("treated", VarRole::Static, VarKind::Binary).with_bounds(0.0, 1.0),
                VariableSpec::new("y", VarRole::Dynamic, VarKind::Continuous),
            ],
            "unit",
            "tau",
            "treated",
            "y",
        )
        .unwrap()
    }

    fn config_with_stages(stages: Vec<Stage>, dir: &Path) -> PipelineConfig {
        let input = dir.join("panel.csv");
        std::fs::write(&input, "unit,tau,treated,y\n1,-1,1,0\n1,0,1,1\n2,-1,0,0\n2,0,0,0\n")
            .unwrap();
        PipelineConfig {
            input,
            output_dir: dir.join("out"),
            root_seed: 1,
            stages,
            window: EventWindow::new(1, 0),
            schema: minimal_schema(),
            align: None,
            augment: AugmentStageConfig::default(),
            matching: Some(MatchingConfig {
                covariates: vec!["y".to_string()],
                caliper_multiplier: 0.2,
            }),
            estimator: EstimatorConfig::default(),
            robustness: RobustnessConfig::default(),
            fidelity_folds: 5,
        }
    }

    #[test]
    fn stage_order_violations_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut config =
            config_with_stages(vec![Stage::Match, Stage::Ingest], dir.path());
        assert!(matches!(config.validate(), Err(Error::Config(_))));
        config.stages = vec![Stage::Ingest, Stage::Ingest];
        assert!(config.validate().is_err());
        config.stages = vec![Stage::Ingest, Stage::Evaluate];
        assert!(config.validate().is_err(), "evaluate without augment");
        config.stages = vec![Stage::Ingest, Stage::Robustness];
        assert!(config.validate().is_err(), "robustness without estimate");
        config.stages = vec![Stage::Ingest, Stage::Match, Stage::Estimate];
        config.validate().unwrap();
    }

    #[test]
    fn missing_input_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = config_with_stages(vec![Stage::Ingest], dir.path());
        config.input = dir.path().join("nope.csv");
        assert!(matches!(config.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn single_stage_ingest_produces_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let config = config_with_stages(vec![Stage::Ingest], dir.path());
        let outcome = run_pipeline(&config).unwrap();
        assert_eq!(outcome.completed, vec![Stage::Ingest]);
        assert!(outcome
            .manifest
            .entries
            .iter()
            .any(|e| e.file == "panel_real.csv"));
        assert!(dir.path().join("out/manifest.json").exists());
    }

    #[test]
    fn toml_round_trip_with_defaults() {
        let text = r#"
input = "panel.csv"
output_dir = "out"
root_seed = 7
stages = ["ingest", "match", "estimate"]

[window]
k_pre = 2
m_post = 1

[schema]
unit_id = "unit"
event_time = "tau"
treatment = "treated"
outcome = "y"

[[schema.variables]]
name = "treated"
role = "static"
kind = "binary"
bounds = [0.0, 1.0]

[[schema.variables]]
name = "y"
role = "dynamic"
kind = "continuous"

[matching]
covariates = ["y"]
"#;
        let config = PipelineConfig::from_toml_str(text).unwrap();
        assert_eq!(config.root_seed, 7);
        assert_eq!(config.stages.len(), 3);
        assert_eq!(
            config.matching.as_ref().unwrap().caliper_multiplier,
            DEFAULT_CALIPER_MULTIPLIER
        );
        assert_eq!(config.augment.n_target_per_arm, 1000);
        assert_eq!(config.robustness.r_max_factor, DEFAULT_R_MAX_FACTOR);
    }
}
