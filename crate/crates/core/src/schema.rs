//! Dataset schema: column roles, kinds, bounds and deterministic rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarRole {
    /// Constant within unit; part of the skeleton block.
    Static,
    /// Varies over event time; part of the trajectory block.
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarKind {
    Continuous,
    Ordinal,
    Categorical,
    Binary,
}

impl VarKind {
    /// Continuous-like columns get mode-specific normalization; the rest
    /// are one-hot encoded.
    pub fn is_continuous_like(self) -> bool {
        matches!(self, VarKind::Continuous | VarKind::Ordinal)
    }
}

/// Declaration of a single data column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub role: VarRole,
    pub kind: VarKind,
    /// Inclusive bounds in the variable's native units.
    #[serde(default)]
    pub bounds: Option<(f64, f64)>,
    /// Deterministic per-wave increment (e.g. +2.0 for age). Values at
    /// event times other than -1 are regenerated from the baseline.
    #[serde(default)]
    pub evolution_rule: Option<f64>,
    #[serde(default)]
    pub round_to_integer: bool,
}

impl VariableSpec {
    pub fn new(name: &str, role: VarRole, kind: VarKind) -> Self {
        VariableSpec {
            name: name.to_string(),
            role,
            kind,
            bounds: None,
            evolution_rule: None,
            round_to_integer: false,
        }
    }

    pub fn with_bounds(mut self, min: f64, max: f64) -> Self {
        self.bounds = Some((min, max));
        self
    }

    pub fn with_evolution_rule(mut self, step: f64) -> Self {
        self.evolution_rule = Some(step);
        self
    }

    pub fn rounded(mut self) -> Self {
        self.round_to_integer = true;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Schema("variable name must be non-empty".into()));
        }
        if let Some((lo, hi)) = self.bounds {
            if !(lo <= hi) {
                return Err(Error::Schema(format!(
                    "variable '{}': bounds min {} > max {}",
                    self.name, lo, hi
                )));
            }
        }
        if self.evolution_rule.is_some() {
            let ok = self.role == VarRole::Dynamic && self.kind.is_continuous_like();
            if !ok {
                return Err(Error::Schema(format!(
                    "variable '{}': evolution_rule is only permitted on dynamic continuous/ordinal variables",
                    self.name
                )));
            }
        }
        if self.kind == VarKind::Ordinal && self.round_to_integer {
            if let Some((lo, hi)) = self.bounds {
                if lo.fract() != 0.0 || hi.fract() != 0.0 {
                    return Err(Error::Schema(format!(
                        "variable '{}': integer-valued ordinal requires integer bounds, got [{}, {}]",
                        self.name, lo, hi
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Full panel schema. `treatment` and `outcome` name entries of `variables`;
/// `unit_id` and `event_time` are dedicated columns outside the variable list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub variables: Vec<VariableSpec>,
    pub unit_id: String,
    pub event_time: String,
    pub treatment: String,
    pub outcome: String,
}

impl Schema {
    pub fn new(
        variables: Vec<VariableSpec>,
        unit_id: &str,
        event_time: &str,
        treatment: &str,
        outcome: &str,
    ) -> Result<Self> {
        let schema = Schema {
            variables,
            unit_id: unit_id.to_string(),
            event_time: event_time.to_string(),
            treatment: treatment.to_string(),
            outcome: outcome.to_string(),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.variables {
            v.validate()?;
            if !seen.insert(v.name.as_str()) {
                return Err(Error::Schema(format!("duplicate variable '{}'", v.name)));
            }
            if v.name == self.unit_id || v.name == self.event_time {
                return Err(Error::Schema(format!(
                    "variable '{}' collides with a reserved column name",
                    v.name
                )));
            }
        }
        if self.unit_id == self.event_time {
            return Err(Error::Schema(
                "unit_id and event_time must be distinct columns".into(),
            ));
        }
        let treat = self
            .var(&self.treatment)
            .ok_or_else(|| Error::Schema(format!("treatment column '{}' not declared", self.treatment)))?
            .1;
        if treat.role != VarRole::Static || treat.kind != VarKind::Binary {
            return Err(Error::Schema(format!(
                "treatment column '{}' must be a static binary variable",
                self.treatment
            )));
        }
        let outcome = self
            .var(&self.outcome)
            .ok_or_else(|| Error::Schema(format!("outcome column '{}' not declared", self.outcome)))?
            .1;
        if outcome.role != VarRole::Dynamic {
            return Err(Error::Schema(format!(
                "outcome column '{}' must be dynamic",
                self.outcome
            )));
        }
        Ok(())
    }

    pub fn var(&self, name: &str) -> Option<(usize, &VariableSpec)> {
        self.variables
            .iter()
            .enumerate()
            .find(|(_, v)| v.name == name)
    }

    pub fn var_index(&self, name: &str) -> Result<usize> {
        self.var(name)
            .map(|(i, _)| i)
            .ok_or_else(|| Error::Schema(format!("unknown column '{name}'")))
    }

    /// Indices of static variables (treatment included), in declaration order.
    pub fn static_indices(&self) -> Vec<usize> {
        self.variables
            .iter()
            .enumerate()
            .filter(|(_, v)| v.role == VarRole::Static)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn dynamic_indices(&self) -> Vec<usize> {
        self.variables
            .iter()
            .enumerate()
            .filter(|(_, v)| v.role == VarRole::Dynamic)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn treatment_index(&self) -> usize {
        self.var(&self.treatment).expect("validated").0
    }

    pub fn outcome_index(&self) -> usize {
        self.var(&self.outcome).expect("validated").0
    }
}
