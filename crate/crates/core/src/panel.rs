//! Long-format event-centered panels: ingestion, temporal alignment,
//! domain clamping and analysis-sample filtering.
//!
//! Event time is an integer `tau` centered so the event falls between
//! tau = -1 and tau = 0. All operations are pure; panels are immutable
//! after construction.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{Schema, VarKind};

/// One observation of one unit at one event time. `values` follows
/// `schema.variables` order; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LongRow {
    pub unit: u64,
    pub time: i32,
    pub synthetic: bool,
    pub values: Vec<Option<f64>>,
}

/// Validated long panel: (unit, time) pairs unique, rows sorted by
/// (unit, time).
#[derive(Debug, Clone, Default)]
pub struct LongPanel {
    rows: Vec<LongRow>,
}

impl LongPanel {
    pub fn new(mut rows: Vec<LongRow>) -> Result<Self> {
        rows.sort_by_key(|r| (r.unit, r.time));
        for pair in rows.windows(2) {
            if pair[0].unit == pair[1].unit && pair[0].time == pair[1].time {
                return Err(Error::DuplicateObservation {
                    unit: pair[0].unit,
                    time: pair[0].time,
                });
            }
            if pair[0].values.len() != pair[1].values.len() {
                return Err(Error::Layout("rows have inconsistent widths".into()));
            }
        }
        Ok(LongPanel { rows })
    }

    pub fn rows(&self) -> &[LongRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Distinct unit ids in ascending order.
    pub fn units(&self) -> Vec<u64> {
        let mut out: Vec<u64> = Vec::new();
        for r in &self.rows {
            if out.last() != Some(&r.unit) {
                out.push(r.unit);
            }
        }
        out
    }

    pub fn n_units(&self) -> usize {
        self.units().len()
    }

    /// Contiguous slice of rows belonging to `unit` (rows are sorted).
    pub fn unit_rows(&self, unit: u64) -> &[LongRow] {
        let start = self.rows.partition_point(|r| r.unit < unit);
        let end = self.rows.partition_point(|r| r.unit <= unit);
        &self.rows[start..end]
    }

    pub fn value(&self, unit: u64, time: i32, var: usize) -> Option<f64> {
        self.unit_rows(unit)
            .iter()
            .find(|r| r.time == time)
            .and_then(|r| r.values[var])
    }

    /// Checks that treatment and all static variables are constant within
    /// each unit, and that the treatment column is a 0/1 indicator.
    pub fn validate_against(&self, schema: &Schema) -> Result<()> {
        let statics = schema.static_indices();
        let treat = schema.treatment_index();
        for unit in self.units() {
            let rows = self.unit_rows(unit);
            for &s in &statics {
                let mut first: Option<Option<f64>> = None;
                for r in rows {
                    let v = r.values[s];
                    match first {
                        None => first = Some(v),
                        Some(f) => {
                            let equal = match (f, v) {
                                (Some(a), Some(b)) => a == b,
                                (None, None) => true,
                                _ => false,
                            };
                            if !equal {
                                return Err(Error::Schema(format!(
                                    "static variable '{}' varies within unit {}",
                                    schema.variables[s].name, unit
                                )));
                            }
                        }
                    }
                }
            }
            if let Some(Some(d)) = rows.first().map(|r| r.values[treat]) {
                if d != 0.0 && d != 1.0 {
                    return Err(Error::Schema(format!(
                        "treatment for unit {unit} must be 0 or 1, got {d}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Treatment flag per unit, reading the first row of each unit.
    pub fn treatment_by_unit(&self, schema: &Schema) -> BTreeMap<u64, bool> {
        let treat = schema.treatment_index();
        let mut map = BTreeMap::new();
        for unit in self.units() {
            let d = self.unit_rows(unit)[0].values[treat].unwrap_or(0.0);
            map.insert(unit, d != 0.0);
        }
        map
    }

    /// Sub-panel containing only the given units.
    pub fn filter_units(&self, keep: &BTreeSet<u64>) -> LongPanel {
        LongPanel {
            rows: self
                .rows
                .iter()
                .filter(|r| keep.contains(&r.unit))
                .cloned()
                .collect(),
        }
    }

    /// Concatenation of two panels over disjoint unit-id sets.
    pub fn concat(&self, other: &LongPanel) -> Result<LongPanel> {
        let mine: BTreeSet<u64> = self.units().into_iter().collect();
        if other.units().iter().any(|u| mine.contains(u)) {
            return Err(Error::Layout(
                "cannot concatenate panels with overlapping unit ids".into(),
            ));
        }
        let mut rows = self.rows.clone();
        rows.extend(other.rows.iter().cloned());
        LongPanel::new(rows)
    }
}

/// Units removed from a panel, keyed by reason.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DropLog {
    /// No observed row at or after tau = 0 (or before 0).
    pub inclusion: Vec<u64>,
    /// No row at tau = -1.
    pub missing_baseline_row: Vec<u64>,
    /// Missing cells in the tau = -1 row.
    pub missing_baseline_cells: Vec<u64>,
}

impl DropLog {
    pub fn total(&self) -> usize {
        self.inclusion.len() + self.missing_baseline_row.len() + self.missing_baseline_cells.len()
    }
}

/// Reads a long CSV with a header row. Empty cells are missing. A
/// `synthetic` column is honored when present, defaulting to false.
pub fn load_long_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<LongPanel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);

    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let mut unit_col = None;
    let mut time_col = None;
    let mut synthetic_col = None;
    let mut var_cols: Vec<Option<usize>> = vec![None; schema.variables.len()];
    for (i, h) in headers.iter().enumerate() {
        if *h == schema.unit_id {
            unit_col = Some(i);
        } else if *h == schema.event_time {
            time_col = Some(i);
        } else if h == "synthetic" {
            synthetic_col = Some(i);
        } else if let Some((j, _)) = schema.var(h) {
            var_cols[j] = Some(i);
        } else {
            return Err(Error::Schema(format!("unknown column '{h}' in {}", path.display())));
        }
    }
    let unit_col = unit_col
        .ok_or_else(|| Error::Schema(format!("missing unit column '{}'", schema.unit_id)))?;
    let time_col = time_col
        .ok_or_else(|| Error::Schema(format!("missing event-time column '{}'", schema.event_time)))?;
    for (j, c) in var_cols.iter().enumerate() {
        if c.is_none() {
            return Err(Error::Schema(format!(
                "missing column '{}'",
                schema.variables[j].name
            )));
        }
    }

    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // 1-based, after the header
        let record = record?;
        let raw_unit = record.get(unit_col).unwrap_or("").trim();
        let unit: u64 = raw_unit.parse().map_err(|_| Error::Parse {
            line,
            column: schema.unit_id.clone(),
            message: format!("'{raw_unit}' is not a non-negative integer"),
        })?;
        let raw_time = record.get(time_col).unwrap_or("").trim();
        let time: i32 = raw_time.parse().map_err(|_| Error::Parse {
            line,
            column: schema.event_time.clone(),
            message: format!("'{raw_time}' is not an integer"),
        })?;
        let synthetic = match synthetic_col {
            Some(c) => {
                let raw = record.get(c).unwrap_or("").trim();
                matches!(raw, "1" | "true" | "TRUE")
            }
            None => false,
        };
        let mut values = Vec::with_capacity(schema.variables.len());
        for (j, col) in var_cols.iter().enumerate() {
            let raw = record.get(col.unwrap()).unwrap_or("").trim();
            if raw.is_empty() {
                values.push(None);
            } else {
                let v: f64 = raw.parse().map_err(|_| Error::Parse {
                    line,
                    column: schema.variables[j].name.clone(),
                    message: format!("'{raw}' is not numeric"),
                })?;
                values.push(Some(v));
            }
        }
        rows.push(LongRow {
            unit,
            time,
            synthetic,
            values,
        });
    }

    let panel = LongPanel::new(rows)?;
    panel.validate_against(schema)?;
    Ok(panel)
}

/// Writes a panel back to CSV with the same conventions as
/// [`load_long_csv`]: header row, empty cell = missing.
pub fn write_long_csv(panel: &LongPanel, schema: &Schema, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec![schema.unit_id.clone(), schema.event_time.clone()];
    header.extend(schema.variables.iter().map(|v| v.name.clone()));
    header.push("synthetic".to_string());
    w.write_record(&header)?;
    for row in panel.rows() {
        let mut record = vec![row.unit.to_string(), row.time.to_string()];
        for v in &row.values {
            record.push(v.map(|x| x.to_string()).unwrap_or_default());
        }
        record.push(if row.synthetic { "1" } else { "0" }.to_string());
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Recenters raw survey waves on each unit's event wave: tau = wave - event
/// wave, so the first post-event wave sits at tau = 0. Units that end up
/// without a pre-period (tau < 0) or post-period (tau >= 0) row are dropped
/// and reported.
pub fn align_event_time(
    panel: &LongPanel,
    event_wave_per_unit: &BTreeMap<u64, i32>,
) -> Result<(LongPanel, Vec<u64>)> {
    let mut rows = Vec::with_capacity(panel.n_rows());
    for row in panel.rows() {
        let event = *event_wave_per_unit
            .get(&row.unit)
            .ok_or(Error::AlignmentMissingUnit(row.unit))?;
        let mut r = row.clone();
        r.time = row.time - event;
        rows.push(r);
    }
    let aligned = LongPanel::new(rows)?;
    Ok(apply_inclusion(&aligned))
}

/// Enforces the cohort inclusion criterion: every retained unit has at
/// least one row with tau < 0 and one with tau >= 0. Returns the filtered
/// panel and the dropped unit ids.
pub fn apply_inclusion(panel: &LongPanel) -> (LongPanel, Vec<u64>) {
    let mut keep = BTreeSet::new();
    let mut dropped = Vec::new();
    for unit in panel.units() {
        let rows = panel.unit_rows(unit);
        let has_pre = rows.iter().any(|r| r.time < 0);
        let has_post = rows.iter().any(|r| r.time >= 0);
        if has_pre && has_post {
            keep.insert(unit);
        } else {
            dropped.push(unit);
        }
    }
    (panel.filter_units(&keep), dropped)
}

/// Per-column observed [min, max], computed over non-missing cells.
/// Call this on the real panel only; clamping synthetic output to bounds
/// estimated from synthetic data would let generator drift widen the domain.
pub fn empirical_bounds(panel: &LongPanel, schema: &Schema) -> BTreeMap<String, (f64, f64)> {
    let mut out = BTreeMap::new();
    for (j, var) in schema.variables.iter().enumerate() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in panel.rows() {
            if let Some(v) = row.values[j] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if lo.is_finite() {
            out.insert(var.name.clone(), (lo, hi));
        }
    }
    out
}

fn round_half_away_from_zero(x: f64) -> f64 {
    // f64::round already rounds halves away from zero.
    x.round()
}

/// Clips continuous/ordinal values into their bounds, rounds integer
/// columns half-away-from-zero after clipping, and snaps categorical codes
/// to the nearest legal integer code. Total on valid panels; idempotent.
pub fn clamp_domains(
    panel: &LongPanel,
    schema: &Schema,
    empirical: &BTreeMap<String, (f64, f64)>,
) -> LongPanel {
    let mut rows = Vec::with_capacity(panel.n_rows());
    for row in panel.rows() {
        let mut r = row.clone();
        for (j, var) in schema.variables.iter().enumerate() {
            let Some(v) = r.values[j] else { continue };
            let bounds = empirical.get(&var.name).copied().or(var.bounds);
            let mut x = v;
            if let Some((lo, hi)) = bounds {
                x = x.clamp(lo, hi);
            }
            let integral = var.round_to_integer
                || matches!(var.kind, VarKind::Categorical | VarKind::Binary);
            if integral {
                x = round_half_away_from_zero(x);
                if let Some((lo, hi)) = bounds {
                    // Rounding can step outside a fractional bound.
                    x = x.clamp(lo.ceil(), hi.floor());
                }
            }
            r.values[j] = Some(x);
        }
        rows.push(r);
    }
    LongPanel::new(rows).expect("clamping preserves row identity")
}

/// Restricts a panel to units usable by the wide pipeline: a tau = -1
/// baseline row must exist and carry no missing cells. Inclusion is
/// enforced first. Dropped units are reported, not silently discarded.
pub fn analysis_sample(panel: &LongPanel, schema: &Schema) -> (LongPanel, DropLog) {
    let mut log = DropLog::default();
    let (included, dropped_inclusion) = apply_inclusion(panel);
    log.inclusion = dropped_inclusion;

    let mut keep = BTreeSet::new();
    for unit in included.units() {
        let rows = included.unit_rows(unit);
        match rows.iter().find(|r| r.time == -1) {
            None => log.missing_baseline_row.push(unit),
            Some(baseline) => {
                if baseline.values.iter().any(|v| v.is_none()) {
                    log.missing_baseline_cells.push(unit);
                } else {
                    keep.insert(unit);
                }
            }
        }
    }
    let _ = schema; // schema fixes the value order; kept for call-site clarity
    (included.filter_units(&keep), log)
}
