//! Mode-specific normalization for continuous columns and one-hot encoding
//! for categorical columns.
//!
//! Each continuous value is represented as a scaled offset alpha from its
//! responsible mixture mode plus a one-hot mode indicator; dynamic columns
//! carry one extra "unobserved" state so attrition patterns are learnable.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::wide::WideTable;

/// Maximum mixture components fitted per column.
pub const DEFAULT_MAX_MODES: usize = 10;
/// Components below this weight are pruned before use.
pub const MODE_PRUNE_WEIGHT: f64 = 0.005;
/// EM stops when the log-likelihood gain drops below this.
const EM_TOL: f64 = 1e-6;
const EM_MAX_ITER: usize = 100;
/// A value within 4 sigma of its mode maps to alpha in [-1, 1].
const ALPHA_SCALE: f64 = 4.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mode {
    pub weight: f64,
    pub mean: f64,
    pub stddev: f64,
}

/// Gaussian mixture fitted to one column's observed values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeModel {
    pub column: String,
    pub modes: Vec<Mode>,
    /// Log-likelihood after each EM iteration (non-decreasing).
    pub loglik_trace: Vec<f64>,
}

impl ModeModel {
    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    /// Posterior responsibility of each mode for value `x`.
    pub fn responsibilities(&self, x: f64) -> Vec<f64> {
        let mut r: Vec<f64> = self
            .modes
            .iter()
            .map(|m| m.weight * gaussian_pdf(x, m.mean, m.stddev))
            .collect();
        let total: f64 = r.iter().sum();
        if total > 0.0 && total.is_finite() {
            for v in &mut r {
                *v /= total;
            }
        } else {
            // All densities underflowed; fall back to the nearest mode in
            // sigma units.
            let nearest = self
                .modes
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da = ((x - a.mean) / a.stddev).abs();
                    let db = ((x - b.mean) / b.stddev).abs();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap_or(0);
            for (i, v) in r.iter_mut().enumerate() {
                *v = if i == nearest { 1.0 } else { 0.0 };
            }
        }
        r
    }
}

fn gaussian_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// K-means++ seeding over 1-d values.
fn kmeanspp_centers(values: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centers = Vec::with_capacity(k);
    centers.push(values[rng.gen_range(0..values.len())]);
    while centers.len() < k {
        let d2: Vec<f64> = values
            .iter()
            .map(|&v| {
                centers
                    .iter()
                    .map(|&c| (v - c) * (v - c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // All points coincide with existing centers.
            centers.push(values[rng.gen_range(0..values.len())]);
            continue;
        }
        let mut target = rng.gen_range(0.0..total);
        let mut chosen = values.len() - 1;
        for (i, &w) in d2.iter().enumerate() {
            if target < w {
                chosen = i;
                break;
            }
            target -= w;
        }
        centers.push(values[chosen]);
    }
    centers
}

/// Fits a Gaussian mixture to `values` by expectation-maximization with
/// k-means++ initialization. Deterministic given `seed`; modes are sorted
/// by mean and low-weight modes pruned.
pub fn fit_modes(column: &str, values: &[f64], max_modes: usize, seed: u64) -> Result<ModeModel> {
    if max_modes == 0 {
        return Err(Error::Config("max_modes must be at least 1".into()));
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < 2 {
        return Err(Error::Insufficient(format!(
            "column '{column}': mode fitting needs at least 2 finite values, got {}",
            finite.len()
        )));
    }
    let n = finite.len();
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let sigma_floor = if range > 0.0 {
        1e-4 * range
    } else {
        1e-6 * lo.abs().max(1.0)
    };

    if range == 0.0 {
        return Ok(ModeModel {
            column: column.to_string(),
            modes: vec![Mode {
                weight: 1.0,
                mean: lo,
                stddev: sigma_floor,
            }],
            loglik_trace: Vec::new(),
        });
    }

    let mut distinct = finite.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let k = max_modes.min(distinct.len());

    let mut rng = seed::rng(seed::derive(seed, "fit-modes", 0));
    let centers = kmeanspp_centers(&finite, k, &mut rng);

    // Initial parameters from a single hard-assignment pass.
    let global_sd = {
        let mean = finite.iter().sum::<f64>() / n as f64;
        let var = finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        var.sqrt().max(sigma_floor)
    };
    let mut weight = vec![0.0f64; k];
    let mut mean = centers.clone();
    let mut sd = vec![global_sd; k];
    {
        let mut count = vec![0usize; k];
        let mut sum = vec![0.0f64; k];
        for &v in &finite {
            let c = (0..k)
                .min_by(|&a, &b| {
                    (v - centers[a])
                        .abs()
                        .partial_cmp(&(v - centers[b]).abs())
                        .unwrap()
                })
                .unwrap();
            count[c] += 1;
            sum[c] += v;
        }
        for c in 0..k {
            weight[c] = (count[c].max(1)) as f64 / n as f64;
            if count[c] > 0 {
                mean[c] = sum[c] / count[c] as f64;
            }
        }
        let total: f64 = weight.iter().sum();
        for w in &mut weight {
            *w /= total;
        }
    }

    let mut trace: Vec<f64> = Vec::new();
    let mut resp = vec![0.0f64; n * k];
    for _iter in 0..EM_MAX_ITER {
        // E-step in log space.
        let mut loglik = 0.0;
        for (i, &v) in finite.iter().enumerate() {
            let logp: Vec<f64> = (0..k)
                .map(|c| {
                    let z = (v - mean[c]) / sd[c];
                    weight[c].max(1e-300).ln()
                        - sd[c].ln()
                        - 0.5 * z * z
                        - 0.5 * (2.0 * std::f64::consts::PI).ln()
                })
                .collect();
            let lse = log_sum_exp(&logp);
            loglik += lse;
            for c in 0..k {
                resp[i * k + c] = (logp[c] - lse).exp();
            }
        }
        if let Some(&prev) = trace.last() {
            debug_assert!(
                loglik >= prev - 1e-9 * prev.abs().max(1.0),
                "EM log-likelihood decreased: {prev} -> {loglik}"
            );
            trace.push(loglik);
            if loglik - prev < EM_TOL {
                break;
            }
        } else {
            trace.push(loglik);
        }

        // M-step with a variance floor.
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nk < 1e-12 {
                weight[c] = 0.0;
                sd[c] = sigma_floor;
                continue;
            }
            weight[c] = nk / n as f64;
            mean[c] = (0..n).map(|i| resp[i * k + c] * finite[i]).sum::<f64>() / nk;
            let var = (0..n)
                .map(|i| resp[i * k + c] * (finite[i] - mean[c]).powi(2))
                .sum::<f64>()
                / nk;
            sd[c] = var.sqrt().max(sigma_floor);
        }
        let total: f64 = weight.iter().sum();
        if total > 0.0 {
            for w in &mut weight {
                *w /= total;
            }
        }
    }

    let mut modes: Vec<Mode> = (0..k)
        .filter(|&c| weight[c] >= MODE_PRUNE_WEIGHT)
        .map(|c| Mode {
            weight: weight[c],
            mean: mean[c],
            stddev: sd[c],
        })
        .collect();
    if modes.is_empty() {
        // Every component fell below the pruning threshold; keep the heaviest.
        let c = (0..k)
            .max_by(|&a, &b| weight[a].partial_cmp(&weight[b]).unwrap())
            .unwrap();
        modes.push(Mode {
            weight: 1.0,
            mean: mean[c],
            stddev: sd[c],
        });
    }
    modes.sort_by(|a, b| a.mean.partial_cmp(&b.mean).unwrap());
    let total: f64 = modes.iter().map(|m| m.weight).sum();
    for m in &mut modes {
        m.weight /= total;
    }

    Ok(ModeModel {
        column: column.to_string(),
        modes,
        loglik_trace: trace,
    })
}

/// How one wide column is represented in encoded space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ColumnCoding {
    /// `[alpha, mode one-hot..., (unobserved)]`
    Modes {
        model: ModeModel,
        has_unobserved: bool,
        sentinel: f64,
    },
    /// `[category one-hot..., (unobserved)]`
    Categories {
        codes: Vec<f64>,
        has_unobserved: bool,
        sentinel: f64,
    },
}

impl ColumnCoding {
    pub fn width(&self) -> usize {
        match self {
            ColumnCoding::Modes {
                model,
                has_unobserved,
                ..
            } => 1 + model.n_modes() + usize::from(*has_unobserved),
            ColumnCoding::Categories {
                codes,
                has_unobserved,
                ..
            } => codes.len() + usize::from(*has_unobserved),
        }
    }
}

/// Output-block structure used by the generator's final activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    /// Single tanh-bounded scalar.
    Alpha,
    /// Softmax-normalized one-hot block.
    OneHot,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OutBlock {
    pub offset: usize,
    pub len: usize,
    pub kind: BlockKind,
}

/// Fixed-width numeric representation of a wide table: per-variable codings
/// shared across waves, laid out `[static block | dynamic block]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncodedLayout {
    /// Coding per schema variable index (entries for unused variables are None).
    pub codings: Vec<Option<ColumnCoding>>,
    pub static_vars: Vec<usize>,
    pub dynamic_vars: Vec<usize>,
    pub n_periods: usize,
    pub skeleton_width: usize,
    pub trajectory_width: usize,
}

impl EncodedLayout {
    /// Fits mode models (continuous/ordinal, pooled across waves) and
    /// category maps (categorical/binary) on the real wide table.
    pub fn fit(wide: &WideTable, max_modes: usize, seed: u64) -> Result<EncodedLayout> {
        let schema = &wide.schema;
        let mut codings: Vec<Option<ColumnCoding>> = vec![None; schema.variables.len()];

        for (slot, &var) in wide
            .static_vars
            .iter()
            .chain(wide.dynamic_vars.iter())
            .enumerate()
        {
            let is_dynamic = slot >= wide.static_vars.len();
            // Pool observed values across waves (dynamic) or read the static cell.
            let mut values = Vec::new();
            if is_dynamic {
                let pos = wide.dynamic_vars.iter().position(|&v| v == var).unwrap();
                for row in &wide.rows {
                    for tau in wide.window.taus() {
                        let v = row[wide.dyn_col(pos, tau)];
                        if !wide.is_sentinel(var, v) {
                            values.push(v);
                        }
                    }
                }
            } else {
                let pos = wide.static_vars.iter().position(|&v| v == var).unwrap();
                for row in &wide.rows {
                    values.push(row[pos]);
                }
            }
            let spec = &schema.variables[var];
            let coding = if spec.kind.is_continuous_like() {
                let model = fit_modes(
                    &spec.name,
                    &values,
                    max_modes,
                    seed::derive(seed, "modes", var as u64),
                )?;
                ColumnCoding::Modes {
                    model,
                    has_unobserved: is_dynamic,
                    sentinel: wide.sentinel[var],
                }
            } else {
                let mut codes = values.clone();
                codes.sort_by(|a, b| a.partial_cmp(b).unwrap());
                codes.dedup();
                if codes.is_empty() {
                    return Err(Error::Insufficient(format!(
                        "column '{}' has no observed values to derive categories from",
                        spec.name
                    )));
                }
                ColumnCoding::Categories {
                    codes,
                    has_unobserved: is_dynamic,
                    sentinel: wide.sentinel[var],
                }
            };
            codings[var] = Some(coding);
        }

        let skeleton_width: usize = wide
            .static_vars
            .iter()
            .map(|&v| codings[v].as_ref().unwrap().width())
            .sum();
        let per_period: usize = wide
            .dynamic_vars
            .iter()
            .map(|&v| codings[v].as_ref().unwrap().width())
            .sum();
        Ok(EncodedLayout {
            codings,
            static_vars: wide.static_vars.clone(),
            dynamic_vars: wide.dynamic_vars.clone(),
            n_periods: wide.n_periods(),
            skeleton_width,
            trajectory_width: per_period * wide.n_periods(),
        })
    }

    pub fn full_width(&self) -> usize {
        self.skeleton_width + self.trajectory_width
    }

    fn coding(&self, var: usize) -> &ColumnCoding {
        self.codings[var].as_ref().expect("coding fitted")
    }

    /// Block structure of the encoded trajectory, for output activations.
    pub fn trajectory_blocks(&self) -> Vec<OutBlock> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for &var in &self.dynamic_vars {
            for _ in 0..self.n_periods {
                match self.coding(var) {
                    ColumnCoding::Modes { .. } => {
                        blocks.push(OutBlock {
                            offset,
                            len: 1,
                            kind: BlockKind::Alpha,
                        });
                        let w = self.coding(var).width() - 1;
                        blocks.push(OutBlock {
                            offset: offset + 1,
                            len: w,
                            kind: BlockKind::OneHot,
                        });
                        offset += 1 + w;
                    }
                    ColumnCoding::Categories { .. } => {
                        let w = self.coding(var).width();
                        blocks.push(OutBlock {
                            offset,
                            len: w,
                            kind: BlockKind::OneHot,
                        });
                        offset += w;
                    }
                }
            }
        }
        blocks
    }

    fn encode_cell(
        &self,
        var: usize,
        value: f64,
        out: &mut Vec<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        match self.coding(var) {
            ColumnCoding::Modes {
                model,
                has_unobserved,
                sentinel,
            } => {
                let n_states = model.n_modes() + usize::from(*has_unobserved);
                let base = out.len();
                out.push(0.0); // alpha
                out.extend(std::iter::repeat(0.0).take(n_states));
                if *has_unobserved && value == *sentinel {
                    let last = out.len() - 1;
                    out[last] = 1.0;
                    return Ok(());
                }
                let resp = model.responsibilities(value);
                // Sample the responsible mode  proportional to posterior.
                let draw: f64 = rng.gen();
                let mut acc = 0.0;
                let mut k = model.n_modes() - 1;
                for (i, &r) in resp.iter().enumerate() {
                    acc += r;
                    if draw < acc {
                        k = i;
                        break;
                    }
                }
                let m = &model.modes[k];
                let alpha = ((value - m.mean) / (ALPHA_SCALE * m.stddev)).clamp(-1.0, 1.0);
                out[base] = alpha;
                out[base + 1 + k] = 1.0;
                Ok(())
            }
            ColumnCoding::Categories {
                codes,
                has_unobserved,
                sentinel,
            } => {
                let n_states = codes.len() + usize::from(*has_unobserved);
                let base = out.len();
                out.extend(std::iter::repeat(0.0).take(n_states));
                if *has_unobserved && value == *sentinel {
                    let last = out.len() - 1;
                    out[last] = 1.0;
                    return Ok(());
                }
                let idx = codes
                    .iter()
                    .position(|&c| (c - value).abs() <= 1e-9)
                    .ok_or_else(|| {
                        Error::Encode(format!(
                            "value {value} has no representable category state"
                        ))
                    })?;
                out[base + idx] = 1.0;
                Ok(())
            }
        }
    }

    fn decode_cell(&self, var: usize, block: &[f64]) -> f64 {
        match self.coding(var) {
            ColumnCoding::Modes {
                model,
                has_unobserved,
                sentinel,
            } => {
                let alpha = block[0];
                let onehot = &block[1..];
                let k = argmax(onehot);
                if *has_unobserved && k == model.n_modes() {
                    *sentinel
                } else {
                    let m = &model.modes[k];
                    alpha * ALPHA_SCALE * m.stddev + m.mean
                }
            }
            ColumnCoding::Categories {
                codes,
                has_unobserved,
                sentinel,
            } => {
                let k = argmax(block);
                if *has_unobserved && k == codes.len() {
                    *sentinel
                } else {
                    codes[k]
                }
            }
        }
    }

    /// Encodes full wide rows. Deterministic given the seed.
    pub fn encode_table(&self, wide: &WideTable, seed: u64) -> Result<DMatrix<f64>> {
        let mut data = Vec::with_capacity(wide.rows.len() * self.full_width());
        let mut rng = seed::rng(seed::derive(seed, "encode", 0));
        for row in &wide.rows {
            let mut out = Vec::with_capacity(self.full_width());
            for (pos, &var) in self.static_vars.iter().enumerate() {
                self.encode_cell(var, row[pos], &mut out, &mut rng)?;
            }
            let n_static = self.static_vars.len();
            for (pos, &var) in self.dynamic_vars.iter().enumerate() {
                for t in 0..self.n_periods {
                    let v = row[n_static + pos * self.n_periods + t];
                    self.encode_cell(var, v, &mut out, &mut rng)?;
                }
            }
            debug_assert_eq!(out.len(), self.full_width());
            data.extend(out);
        }
        Ok(DMatrix::from_row_slice(
            wide.rows.len(),
            self.full_width(),
            &data,
        ))
    }

    /// Encodes skeleton rows only (conditioning input).
    pub fn encode_skeleton_rows(&self, rows: &[Vec<f64>], seed: u64) -> Result<DMatrix<f64>> {
        let mut data = Vec::with_capacity(rows.len() * self.skeleton_width);
        let mut rng = seed::rng(seed::derive(seed, "encode-skel", 0));
        for row in rows {
            if row.len() != self.static_vars.len() {
                return Err(Error::Conditioning {
                    expected: self.static_vars.len(),
                    got: row.len(),
                });
            }
            let mut out = Vec::with_capacity(self.skeleton_width);
            for (pos, &var) in self.static_vars.iter().enumerate() {
                self.encode_cell(var, row[pos], &mut out, &mut rng)?;
            }
            data.extend(out);
        }
        Ok(DMatrix::from_row_slice(
            rows.len(),
            self.skeleton_width,
            &data,
        ))
    }

    /// Decodes encoded trajectory rows back to wide dynamic cells.
    pub fn decode_trajectory_rows(&self, encoded: &DMatrix<f64>) -> Vec<Vec<f64>> {
        let per_period: usize = self
            .dynamic_vars
            .iter()
            .map(|&v| self.coding(v).width())
            .sum();
        let _ = per_period;
        let mut out = Vec::with_capacity(encoded.nrows());
        for i in 0..encoded.nrows() {
            let row: Vec<f64> = encoded.row(i).iter().copied().collect();
            let mut cells = Vec::with_capacity(self.dynamic_vars.len() * self.n_periods);
            let mut offset = 0;
            for &var in &self.dynamic_vars {
                let w = self.coding(var).width();
                for _ in 0..self.n_periods {
                    cells.push(self.decode_cell(var, &row[offset..offset + w]));
                    offset += w;
                }
            }
            out.push(cells);
        }
        out
    }

    /// Decodes full encoded rows (skeleton + trajectory) to wide rows.
    pub fn decode_full(&self, encoded: &DMatrix<f64>) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(encoded.nrows());
        for i in 0..encoded.nrows() {
            let row: Vec<f64> = encoded.row(i).iter().copied().collect();
            let mut cells = Vec::new();
            let mut offset = 0;
            for &var in &self.static_vars {
                let w = self.coding(var).width();
                cells.push(self.decode_cell(var, &row[offset..offset + w]));
                offset += w;
            }
            for &var in &self.dynamic_vars {
                let w = self.coding(var).width();
                for _ in 0..self.n_periods {
                    cells.push(self.decode_cell(var, &row[offset..offset + w]));
                    offset += w;
                }
            }
            out.push(cells);
        }
        out
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
