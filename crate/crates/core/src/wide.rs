//! Wide layout: one row per unit, static skeleton block followed by the
//! per-wave trajectory block, with sentinel padding for unobserved cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{LongPanel, LongRow};
use crate::schema::Schema;

/// Event window [-k_pre, m_post], inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventWindow {
    pub k_pre: u32,
    pub m_post: u32,
}

impl EventWindow {
    pub fn new(k_pre: u32, m_post: u32) -> Self {
        EventWindow { k_pre, m_post }
    }

    pub fn n_periods(&self) -> usize {
        (self.k_pre + self.m_post) as usize + 1
    }

    pub fn taus(&self) -> impl Iterator<Item = i32> {
        -(self.k_pre as i32)..=(self.m_post as i32)
    }

    pub fn contains(&self, tau: i32) -> bool {
        tau >= -(self.k_pre as i32) && tau <= self.m_post as i32
    }
}

impl Default for EventWindow {
    fn default() -> Self {
        // Three pre-periods and two post-periods around the event.
        EventWindow::new(3, 2)
    }
}

/// Sentinel for variable `var`: far below the declared bounds when present,
/// otherwise below the observed range. Strictly outside the support and
/// trivially detectable.
pub fn padding_sentinel(lo: f64, hi: f64) -> f64 {
    let range = hi - lo;
    if range > 0.0 {
        lo - 10.0 * range
    } else {
        lo - 10.0 * lo.abs().max(1.0)
    }
}

/// One row per unit: `[static block | dynamic block]` where the dynamic
/// block lays out each dynamic variable over every tau in the window
/// (variable-major). Unobserved cells hold the per-variable sentinel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WideTable {
    pub schema: Schema,
    pub window: EventWindow,
    pub units: Vec<u64>,
    pub synthetic: Vec<bool>,
    /// Schema variable indices forming the static block, in order.
    pub static_vars: Vec<usize>,
    /// Schema variable indices forming the dynamic block, in order.
    pub dynamic_vars: Vec<usize>,
    /// Sentinel per schema variable index.
    pub sentinel: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl WideTable {
    pub fn n_static(&self) -> usize {
        self.static_vars.len()
    }

    pub fn n_periods(&self) -> usize {
        self.window.n_periods()
    }

    pub fn width(&self) -> usize {
        self.n_static() + self.dynamic_vars.len() * self.n_periods()
    }

    /// Column offset of dynamic variable `dyn_pos` (position within
    /// `dynamic_vars`) at event time `tau`.
    pub fn dyn_col(&self, dyn_pos: usize, tau: i32) -> usize {
        let t = (tau + self.window.k_pre as i32) as usize;
        self.n_static() + dyn_pos * self.n_periods() + t
    }

    pub fn is_sentinel(&self, var: usize, value: f64) -> bool {
        value == self.sentinel[var]
    }

    /// Returns true when each row's padding forms a prefix/suffix pattern
    /// per dynamic variable (staggered entry/exit, no interior gaps).
    pub fn padding_pattern_ok(&self) -> bool {
        for row in &self.rows {
            for (pos, &var) in self.dynamic_vars.iter().enumerate() {
                let observed: Vec<bool> = self
                    .window
                    .taus()
                    .map(|t| row[self.dyn_col(pos, t)] != self.sentinel[var])
                    .collect();
                let first = observed.iter().position(|&o| o);
                let last = observed.iter().rposition(|&o| o);
                if let (Some(a), Some(b)) = (first, last) {
                    if observed[a..=b].iter().any(|&o| !o) {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// Reshapes an aligned panel to wide layout. Every unit must have its
/// tau = -1 baseline row with complete cells (run
/// [`crate::panel::analysis_sample`] first on raw data); unobserved
/// (unit, tau) cells are filled with the per-variable sentinel.
pub fn to_wide(panel: &LongPanel, schema: &Schema, window: EventWindow) -> Result<WideTable> {
    let static_vars = schema.static_indices();
    let dynamic_vars = schema.dynamic_indices();

    // Sentinels from declared bounds, falling back to the observed range.
    let mut sentinel = vec![0.0f64; schema.variables.len()];
    for (j, var) in schema.variables.iter().enumerate() {
        let (lo, hi) = match var.bounds {
            Some(b) => b,
            None => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for r in panel.rows() {
                    if let Some(v) = r.values[j] {
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                if lo.is_finite() {
                    (lo, hi)
                } else {
                    (0.0, 1.0)
                }
            }
        };
        sentinel[j] = padding_sentinel(lo, hi);
    }

    let units = panel.units();
    let n_periods = window.n_periods();
    let width = static_vars.len() + dynamic_vars.len() * n_periods;
    let mut rows = Vec::with_capacity(units.len());
    let mut synthetic = Vec::with_capacity(units.len());

    for &unit in &units {
        let unit_rows = panel.unit_rows(unit);
        let baseline = unit_rows
            .iter()
            .find(|r| r.time == -1)
            .ok_or(Error::MissingBaseline { unit })?;

        let mut row = Vec::with_capacity(width);
        for &s in &static_vars {
            let v = baseline.values[s].ok_or_else(|| {
                Error::Insufficient(format!(
                    "unit {unit}: missing baseline value for static variable '{}'",
                    schema.variables[s].name
                ))
            })?;
            row.push(v);
        }
        for &d in &dynamic_vars {
            for tau in window.taus() {
                let cell = unit_rows
                    .iter()
                    .find(|r| r.time == tau)
                    .and_then(|r| r.values[d]);
                row.push(cell.unwrap_or(sentinel[d]));
            }
        }
        rows.push(row);
        synthetic.push(baseline.synthetic);
    }

    Ok(WideTable {
        schema: schema.clone(),
        window,
        units,
        synthetic,
        static_vars,
        dynamic_vars,
        sentinel,
        rows,
    })
}

/// Reconstructs the long layout. Sentinel cells become missing values; a
/// period with every dynamic cell padded emits no row. Variables with an
/// evolution rule are regenerated deterministically from their tau = -1
/// baseline (`value(tau) = baseline + rule * (tau + 1)`), overriding
/// whatever the trajectory block holds.
pub fn to_long_with_rules(wide: &WideTable, schema: &Schema) -> Result<LongPanel> {
    let expected = wide.width();
    let mut rows = Vec::new();
    for (i, row) in wide.rows.iter().enumerate() {
        if row.len() != expected {
            return Err(Error::Layout(format!(
                "wide row {i} has width {}, expected {expected}",
                row.len()
            )));
        }
        let unit = wide.units[i];
        let synthetic = wide.synthetic[i];

        // Baselines for rule-bearing variables.
        let mut rule_base: Vec<Option<f64>> = vec![None; wide.dynamic_vars.len()];
        for (pos, &var) in wide.dynamic_vars.iter().enumerate() {
            if schema.variables[var].evolution_rule.is_some() {
                let v = row[wide.dyn_col(pos, -1)];
                if !wide.is_sentinel(var, v) {
                    rule_base[pos] = Some(v);
                }
            }
        }

        for tau in wide.window.taus() {
            let mut values: Vec<Option<f64>> = vec![None; schema.variables.len()];
            let mut any_observed = false;
            for (pos, &var) in wide.dynamic_vars.iter().enumerate() {
                let v = row[wide.dyn_col(pos, tau)];
                if !wide.is_sentinel(var, v) {
                    values[var] = Some(v);
                    any_observed = true;
                }
            }
            if !any_observed {
                continue;
            }
            for (k, &s) in wide.static_vars.iter().enumerate() {
                values[s] = Some(row[k]);
            }
            // Deterministic evolution overrides generated cells.
            for (pos, &var) in wide.dynamic_vars.iter().enumerate() {
                if let (Some(rule), Some(base)) =
                    (schema.variables[var].evolution_rule, rule_base[pos])
                {
                    if values[var].is_some() {
                        values[var] = Some(base + rule * (tau + 1) as f64);
                    }
                }
            }
            rows.push(LongRow {
                unit,
                time: tau,
                synthetic,
                values,
            });
        }
    }
    LongPanel::new(rows)
}

/// Static block of a wide table. `donors[i]`, when present, is the row
/// index in the source table this skeleton was copied from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkeletonMatrix {
    pub var_indices: Vec<usize>,
    pub units: Vec<u64>,
    pub rows: Vec<Vec<f64>>,
    pub donors: Option<Vec<usize>>,
}

impl SkeletonMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.var_indices.len()
    }
}

/// Dynamic block of a wide table, variable-major over the window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryMatrix {
    pub var_indices: Vec<usize>,
    pub n_periods: usize,
    pub rows: Vec<Vec<f64>>,
}

impl TrajectoryMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.var_indices.len() * self.n_periods
    }
}

/// Splits a wide table into its skeleton and trajectory blocks. Row order
/// is preserved, so `recombine` restores the table bit-exactly.
pub fn split_skeleton(wide: &WideTable) -> (SkeletonMatrix, TrajectoryMatrix) {
    let n_static = wide.n_static();
    let skeleton = SkeletonMatrix {
        var_indices: wide.static_vars.clone(),
        units: wide.units.clone(),
        rows: wide.rows.iter().map(|r| r[..n_static].to_vec()).collect(),
        donors: None,
    };
    let trajectory = TrajectoryMatrix {
        var_indices: wide.dynamic_vars.clone(),
        n_periods: wide.n_periods(),
        rows: wide.rows.iter().map(|r| r[n_static..].to_vec()).collect(),
    };
    (skeleton, trajectory)
}

/// Inverse of [`split_skeleton`]: concatenates the blocks back into a wide
/// table using `template` for schema, window and sentinel metadata.
pub fn recombine(
    template: &WideTable,
    skeleton: &SkeletonMatrix,
    trajectory: &TrajectoryMatrix,
    units: Vec<u64>,
    synthetic: Vec<bool>,
) -> Result<WideTable> {
    if skeleton.n_rows() != trajectory.n_rows() {
        return Err(Error::Layout(format!(
            "skeleton has {} rows, trajectory has {}",
            skeleton.n_rows(),
            trajectory.n_rows()
        )));
    }
    if skeleton.width() != template.n_static()
        || trajectory.width() != template.dynamic_vars.len() * template.n_periods()
    {
        return Err(Error::Layout("block widths do not match the template".into()));
    }
    let rows = skeleton
        .rows
        .iter()
        .zip(&trajectory.rows)
        .map(|(s, t)| {
            let mut row = Vec::with_capacity(s.len() + t.len());
            row.extend_from_slice(s);
            row.extend_from_slice(t);
            row
        })
        .collect();
    Ok(WideTable {
        schema: template.schema.clone(),
        window: template.window,
        units,
        synthetic,
        static_vars: template.static_vars.clone(),
        dynamic_vars: template.dynamic_vars.clone(),
        sentinel: template.sentinel.clone(),
        rows,
    })
}
