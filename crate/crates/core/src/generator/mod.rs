//! Conditional adversarial generator with skeleton injection.
//!
//! Per treatment arm, a critic scores encoded trajectories conditioned on
//! the encoded skeleton under a Wasserstein objective with gradient
//! penalty, and the generator learns the conditional trajectory
//! distribution. Sampling anchors every synthetic row to an exact,
//! bootstrap-resampled real skeleton; the network only fills in the
//! time-varying block.

pub mod net;

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncodedLayout, DEFAULT_MAX_MODES};
use crate::error::{Error, Result};
use crate::panel::{analysis_sample, clamp_domains, empirical_bounds, DropLog, LongPanel};
use crate::schema::Schema;
use crate::seed;
use crate::wide::{
    recombine, split_skeleton, to_long_with_rules, to_wide, EventWindow, SkeletonMatrix,
    TrajectoryMatrix, WideTable,
};
use net::{apply_output_activations, output_activation_backward, Activation, Adam, Mlp};

pub const CHECKPOINT_VERSION: &str = "skelgen-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub noise_dim: usize,
    /// Hidden widths shared by generator and critic.
    pub hidden_widths: Vec<usize>,
    pub critic_steps_per_gen_step: usize,
    pub gradient_penalty_weight: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Mixture components per continuous column in the encoder.
    pub max_modes: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            noise_dim: 32,
            hidden_widths: vec![256, 256],
            critic_steps_per_gen_step: 5,
            gradient_penalty_weight: 10.0,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            batch_size: 64,
            epochs: 300,
            seed: 0,
            max_modes: DEFAULT_MAX_MODES,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_dim == 0
            || self.hidden_widths.is_empty()
            || self.hidden_widths.iter().any(|&w| w == 0)
            || self.critic_steps_per_gen_step == 0
            || self.batch_size == 0
            || self.max_modes == 0
        {
            return Err(Error::Config("all generator counts must be at least 1".into()));
        }
        if self.gradient_penalty_weight < 0.0 {
            return Err(Error::Config("gradient_penalty_weight must be >= 0".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub critic_loss: f64,
    pub generator_loss: f64,
}

/// Trained conditional generator + critic + encoder state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorModel {
    pub version: String,
    pub config: GenConfig,
    pub layout: EncodedLayout,
    pub generator: Mlp,
    pub critic: Mlp,
    pub training_log: Vec<EpochLog>,
}

impl GeneratorModel {
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<GeneratorModel> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: GeneratorModel =
            serde_json::from_str(&json).map_err(|e| Error::Serialization(e.to_string()))?;
        if model.version != CHECKPOINT_VERSION {
            return Err(Error::Serialization(format!(
                "checkpoint version '{}' does not match '{CHECKPOINT_VERSION}'",
                model.version
            )));
        }
        Ok(model)
    }
}

fn gather_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(idx.len(), m.ncols());
    for (i, &r) in idx.iter().enumerate() {
        out.set_row(i, &m.row(r));
    }
    out
}

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    out.view_mut((0, a.ncols()), (b.nrows(), b.ncols())).copy_from(b);
    out
}

fn standard_normal(rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let u1: f64 = rng.gen::<f64>().max(1e-300);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// Trains the per-arm conditional WGAN-GP on an encoded wide table.
///
/// The critic maximizes `score(real | skel) - score(fake | skel)` minus the
/// gradient penalty at interpolates of its full input; the generator
/// minimizes `-score(fake | skel)`. Real rows pair with their own skeleton;
/// fake rows condition on skeletons bootstrapped from the arm. Deterministic
/// given `config.seed`.
pub fn train(wide_real: &WideTable, config: &GenConfig) -> Result<GeneratorModel> {
    config.validate()?;
    let n = wide_real.rows.len();
    if n < 2 * config.batch_size {
        return Err(Error::Insufficient(format!(
            "training needs at least {} rows (2 x batch_size), got {n}",
            2 * config.batch_size
        )));
    }

    let layout = EncodedLayout::fit(
        wide_real,
        config.max_modes,
        seed::derive(config.seed, "layout", 0),
    )?;
    let encoded = layout.encode_table(wide_real, seed::derive(config.seed, "encode-real", 0))?;
    let skel_w = layout.skeleton_width;
    let traj_w = layout.trajectory_width;
    let real_skel = encoded.columns(0, skel_w).into_owned();
    let real_traj = encoded.columns(skel_w, traj_w).into_owned();
    let blocks = layout.trajectory_blocks();

    let mut init_rng = seed::rng(seed::derive(config.seed, "init", 0));
    let mut gen_dims = vec![config.noise_dim + skel_w];
    gen_dims.extend_from_slice(&config.hidden_widths);
    gen_dims.push(traj_w);
    let mut critic_dims = vec![traj_w + skel_w];
    critic_dims.extend_from_slice(&config.hidden_widths);
    critic_dims.push(1);
    let mut generator = Mlp::new(&gen_dims, Activation::Relu, &mut init_rng);
    let mut critic = Mlp::new(&critic_dims, Activation::LeakyRelu(0.2), &mut init_rng);

    let mut adam_gen = Adam::new(&generator, config.learning_rate, config.adam_beta1, config.adam_beta2);
    let mut adam_critic = Adam::new(&critic, config.learning_rate, config.adam_beta1, config.adam_beta2);

    let mut rng = seed::rng(seed::derive(config.seed, "train", 0));
    let batch = config.batch_size;
    let steps_per_epoch = n.div_ceil(batch);
    let lambda = config.gradient_penalty_weight;
    let mut training_log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut critic_losses = 0.0;
        let mut critic_updates = 0usize;
        let mut gen_losses = 0.0;

        for _ in 0..steps_per_epoch {
            for _ in 0..config.critic_steps_per_gen_step {
                // Real batch paired with its own skeletons.
                let idx_real: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n)).collect();
                let r_traj = gather_rows(&real_traj, &idx_real);
                let r_skel = gather_rows(&real_skel, &idx_real);
                // Fake batch conditioned on bootstrapped skeletons.
                let idx_fake: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n)).collect();
                let f_skel = gather_rows(&real_skel, &idx_fake);
                let z = standard_normal(batch, config.noise_dim, &mut rng);
                let gen_in = hstack(&z, &f_skel);
                let (g_raw, _) = generator.forward(&gen_in);
                let f_traj = apply_output_activations(&g_raw, &blocks);

                let real_in = hstack(&r_traj, &r_skel);
                let fake_in = hstack(&f_traj, &f_skel);
                let (c_real, cache_real) = critic.forward(&real_in);
                let (c_fake, cache_fake) = critic.forward(&fake_in);

                let inv_b = 1.0 / batch as f64;
                let (mut grads, _) = critic.backward(
                    &cache_fake,
                    &DMatrix::from_element(batch, 1, inv_b),
                );
                let (g_real, _) = critic.backward(
                    &cache_real,
                    &DMatrix::from_element(batch, 1, -inv_b),
                );
                grads.add(&g_real);

                let mut penalty = 0.0;
                if lambda > 0.0 {
                    let eps: Vec<f64> = (0..batch).map(|_| rng.gen::<f64>()).collect();
                    let mut interp = DMatrix::zeros(batch, real_in.ncols());
                    for i in 0..batch {
                        for j in 0..real_in.ncols() {
                            interp[(i, j)] =
                                eps[i] * real_in[(i, j)] + (1.0 - eps[i]) * fake_in[(i, j)];
                        }
                    }
                    let (_, cache_i) = critic.forward(&interp);
                    let (g_in, s_chain) = critic.input_gradient(&cache_i);
                    let mut u = DMatrix::zeros(batch, real_in.ncols());
                    for i in 0..batch {
                        let norm = g_in.row(i).norm();
                        penalty += lambda * (norm - 1.0) * (norm - 1.0) * inv_b;
                        let scale = lambda * 2.0 * (norm - 1.0) / (norm.max(1e-12)) * inv_b;
                        for j in 0..real_in.ncols() {
                            u[(i, j)] = scale * g_in[(i, j)];
                        }
                    }
                    let gp_grads = critic.penalty_param_grads(&cache_i, &s_chain, &u);
                    grads.add(&gp_grads);
                }

                let loss = c_fake.sum() * inv_b - c_real.sum() * inv_b + penalty;
                if !loss.is_finite() {
                    return Err(Error::Divergence(epoch));
                }
                adam_critic.step(&mut critic, &grads);
                critic_losses += loss;
                critic_updates += 1;
            }

            // Generator step.
            let idx_fake: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n)).collect();
            let f_skel = gather_rows(&real_skel, &idx_fake);
            let z = standard_normal(batch, config.noise_dim, &mut rng);
            let gen_in = hstack(&z, &f_skel);
            let (g_raw, g_cache) = generator.forward(&gen_in);
            let f_traj = apply_output_activations(&g_raw, &blocks);
            let fake_in = hstack(&f_traj, &f_skel);
            let (c_fake, c_cache) = critic.forward(&fake_in);

            let inv_b = 1.0 / batch as f64;
            let loss = -c_fake.sum() * inv_b;
            if !loss.is_finite() {
                return Err(Error::Divergence(epoch));
            }
            let (_, grad_in) = critic.backward(
                &c_cache,
                &DMatrix::from_element(batch, 1, -inv_b),
            );
            let grad_traj = grad_in.columns(0, traj_w).into_owned();
            let grad_raw = output_activation_backward(&f_traj, &blocks, &grad_traj);
            let (g_grads, _) = generator.backward(&g_cache, &grad_raw);
            adam_gen.step(&mut generator, &g_grads);
            gen_losses += loss;
        }

        if !generator.params_finite() || !critic.params_finite() {
            return Err(Error::Divergence(epoch));
        }
        training_log.push(EpochLog {
            epoch,
            critic_loss: critic_losses / critic_updates.max(1) as f64,
            generator_loss: gen_losses / steps_per_epoch as f64,
        });
    }

    Ok(GeneratorModel {
        version: CHECKPOINT_VERSION.to_string(),
        config: config.clone(),
        layout,
        generator,
        critic,
        training_log,
    })
}

/// Bootstrap-resamples skeleton rows uniformly with replacement. Every
/// output row is an exact copy of a real row; `donors` records the source
/// row indices.
pub fn sample_skeletons(
    real: &SkeletonMatrix,
    n_target: usize,
    seed: u64,
) -> Result<SkeletonMatrix> {
    if n_target == 0 {
        return Ok(SkeletonMatrix {
            var_indices: real.var_indices.clone(),
            units: Vec::new(),
            rows: Vec::new(),
            donors: Some(Vec::new()),
        });
    }
    if real.rows.is_empty() {
        return Err(Error::Insufficient(
            "cannot resample skeletons from an empty arm".into(),
        ));
    }
    let mut rng = seed::rng(seed);
    let mut rows = Vec::with_capacity(n_target);
    let mut units = Vec::with_capacity(n_target);
    let mut donors = Vec::with_capacity(n_target);
    for _ in 0..n_target {
        let d = rng.gen_range(0..real.rows.len());
        rows.push(real.rows[d].clone());
        units.push(real.units[d]);
        donors.push(d);
    }
    Ok(SkeletonMatrix {
        var_indices: real.var_indices.clone(),
        units,
        rows,
        donors: Some(donors),
    })
}

/// Samples one trajectory per skeleton row, conditioned row-by-row.
pub fn generate(
    model: &GeneratorModel,
    skeletons: &SkeletonMatrix,
    seed: u64,
) -> Result<TrajectoryMatrix> {
    if skeletons.width() != model.layout.static_vars.len() {
        return Err(Error::Conditioning {
            expected: model.layout.static_vars.len(),
            got: skeletons.width(),
        });
    }
    let n = skeletons.n_rows();
    let layout = &model.layout;
    if n == 0 {
        return Ok(TrajectoryMatrix {
            var_indices: layout.dynamic_vars.clone(),
            n_periods: layout.n_periods,
            rows: Vec::new(),
        });
    }
    let skel_enc = layout.encode_skeleton_rows(&skeletons.rows, seed::derive(seed, "cond", 0))?;
    let mut rng = seed::rng(seed::derive(seed, "noise", 0));
    let z = standard_normal(n, model.config.noise_dim, &mut rng);
    let gen_in = hstack(&z, &skel_enc);
    let (raw, _) = model.generator.forward(&gen_in);
    let activated = apply_output_activations(&raw, &layout.trajectory_blocks());
    let rows = layout.decode_trajectory_rows(&activated);
    Ok(TrajectoryMatrix {
        var_indices: layout.dynamic_vars.clone(),
        n_periods: layout.n_periods,
        rows,
    })
}

/// Per-arm artifacts from an augmentation run.
#[derive(Debug, Clone)]
pub struct ArmArtifacts {
    pub treated: bool,
    pub model: GeneratorModel,
    pub n_real: usize,
    pub n_synthetic: usize,
}

#[derive(Debug, Clone)]
pub struct AugmentOutput {
    /// Synthetic units only; the caller composes real + synthetic.
    pub synthetic: LongPanel,
    pub drop_log: DropLog,
    pub arms: Vec<ArmArtifacts>,
}

/// End-to-end augmentation: per treatment arm, reshape wide, fit the
/// encoder, train, resample real skeletons, generate trajectories, inject
/// the exact skeletons (including the tau = -1 baseline cells of every
/// dynamic variable, so the pre-event cross-section stays empirical),
/// apply deterministic rules and clamp domains. Returns synthetic units
/// with fresh ids; real rows are not included.
pub fn augment(
    real_long: &LongPanel,
    schema: &Schema,
    window: EventWindow,
    config: &GenConfig,
    n_target_per_arm: usize,
) -> Result<LongPanel> {
    augment_with_details(real_long, schema, window, config, n_target_per_arm)
        .map(|out| out.synthetic)
}

pub fn augment_with_details(
    real_long: &LongPanel,
    schema: &Schema,
    window: EventWindow,
    config: &GenConfig,
    n_target_per_arm: usize,
) -> Result<AugmentOutput> {
    config.validate()?;
    schema.validate()?;
    let (analysis, drop_log) = analysis_sample(real_long, schema);
    let bounds = empirical_bounds(real_long, schema);
    let treatment = analysis.treatment_by_unit(schema);

    let mut next_id = real_long.units().iter().max().map_or(0, |m| m + 1);
    let mut synthetic = LongPanel::default();
    let mut arms = Vec::new();

    for arm_treated in [false, true] {
        let arm_units: BTreeSet<u64> = treatment
            .iter()
            .filter(|(_, &t)| t == arm_treated)
            .map(|(&u, _)| u)
            .collect();
        if n_target_per_arm == 0 {
            continue;
        }
        if arm_units.is_empty() {
            return Err(Error::Insufficient(format!(
                "treatment arm {} has no usable real units",
                arm_treated as u8
            ))
            .in_stage("augment"));
        }
        let arm_panel = analysis.filter_units(&arm_units);
        let arm_seed = seed::derive(config.seed, "arm", arm_treated as u64);

        let wide = to_wide(&arm_panel, schema, window).map_err(|e| e.in_stage("to_wide"))?;
        let arm_config = config.clone().with_seed(arm_seed);
        let model = train(&wide, &arm_config).map_err(|e| e.in_stage("train"))?;

        let (skel_real, _) = split_skeleton(&wide);
        let sampled = sample_skeletons(
            &skel_real,
            n_target_per_arm,
            seed::derive(arm_seed, "skeletons", 0),
        )
        .map_err(|e| e.in_stage("sample_skeletons"))?;
        let mut traj = generate(&model, &sampled, seed::derive(arm_seed, "generate", 0))
            .map_err(|e| e.in_stage("generate"))?;

        // Skeleton injection: anchor every dynamic variable's tau = -1 cell
        // to the donor's real baseline, discarding the generated cell.
        let donors = sampled.donors.as_ref().expect("sampler records donors");
        let baseline_t = (window.k_pre - 1) as usize;
        for (i, &d) in donors.iter().enumerate() {
            for pos in 0..wide.dynamic_vars.len() {
                let col = wide.dyn_col(pos, -1);
                traj.rows[i][pos * wide.n_periods() + baseline_t] = wide.rows[d][col];
            }
        }

        let units: Vec<u64> = (0..n_target_per_arm as u64).map(|i| next_id + i).collect();
        next_id += n_target_per_arm as u64;
        let wide_synth = recombine(&wide, &sampled, &traj, units, vec![true; n_target_per_arm])?;
        let long_synth = to_long_with_rules(&wide_synth, schema)?;
        let clamped = clamp_domains(&long_synth, schema, &bounds);
        synthetic = synthetic.concat(&clamped)?;

        arms.push(ArmArtifacts {
            treated: arm_treated,
            model,
            n_real: arm_units.len(),
            n_synthetic: n_target_per_arm,
        });
    }

    Ok(AugmentOutput {
        synthetic,
        drop_log,
        arms,
    })
}
