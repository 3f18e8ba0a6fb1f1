//! Hyperparameter schemas, concrete value tables, and the operators that
//! sample, mutate, recombine and compare them.
//!
//! A [`HyperparameterSpace`] is split in two: node parameters, carried by every
//! hidden layer gene, and global parameters, carried once per network. Both
//! halves are plain lists of [`HyperparameterSpec`] and every operator in this
//! module works on such a list.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default Gaussian step as a fraction of a parameter's range width.
pub const DEFAULT_SIGMA_FRACTION: f64 = 0.1;

/// Default per-parameter mutation probability.
pub const DEFAULT_PARAM_MUTATION_RATE: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HyperparamError {
    #[error("parameter `{name}`: {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("parameter `{0}` declared more than once")]
    DuplicateName(String),
    #[error("parameter `{0}` appears in both node and global parameters")]
    SharedName(String),
    #[error("space declares no layer kinds")]
    NoLayerKinds,
    #[error("incompatible tables: {0}")]
    Incompatible(String),
    #[error("parameter `{name}`: value {value} is outside its declared range")]
    OutOfRange { name: String, value: String },
    #[error("table is missing parameter `{0}`")]
    Missing(String),
    #[error("table has unexpected parameter `{0}`")]
    Unexpected(String),
}

/// One level of a categorical parameter.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Level {
    Int(i64),
    Text(String),
}

impl Level {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Level::Int(v) => Some(*v as f64),
            Level::Text(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Level::Text(s) => Some(s),
            Level::Int(_) => None,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Int(v) => write!(f, "{v}"),
            Level::Text(s) => f.write_str(s),
        }
    }
}

impl From<&str> for Level {
    fn from(s: &str) -> Self {
        Level::Text(s.to_string())
    }
}

impl From<i64> for Level {
    fn from(v: i64) -> Self {
        Level::Int(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamKind {
    Real { low: f64, high: f64 },
    Integer { low: i64, high: i64 },
    Binary,
    Categorical { values: Vec<Level> },
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA_FRACTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ParamKind,
    #[serde(default = "default_sigma")]
    pub mutation_sigma_fraction: f64,
}

impl HyperparameterSpec {
    pub fn real(name: &str, low: f64, high: f64) -> Self {
        Self::with_kind(name, ParamKind::Real { low, high })
    }

    pub fn integer(name: &str, low: i64, high: i64) -> Self {
        Self::with_kind(name, ParamKind::Integer { low, high })
    }

    pub fn binary(name: &str) -> Self {
        Self::with_kind(name, ParamKind::Binary)
    }

    pub fn categorical<L: Into<Level>>(name: &str, values: impl IntoIterator<Item = L>) -> Self {
        Self::with_kind(
            name,
            ParamKind::Categorical {
                values: values.into_iter().map(Into::into).collect(),
            },
        )
    }

    fn with_kind(name: &str, kind: ParamKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            mutation_sigma_fraction: DEFAULT_SIGMA_FRACTION,
        }
    }

    pub fn with_sigma(mut self, fraction: f64) -> Self {
        self.mutation_sigma_fraction = fraction;
        self
    }

    pub fn validate(&self) -> Result<(), HyperparamError> {
        let invalid = |reason: &str| HyperparamError::InvalidSpec {
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        if self.name.is_empty() {
            return Err(invalid("empty name"));
        }
        match &self.kind {
            ParamKind::Real { low, high } => {
                if !low.is_finite() || !high.is_finite() {
                    return Err(invalid("bounds must be finite"));
                }
                if low > high {
                    return Err(invalid("lower bound exceeds upper bound"));
                }
            }
            ParamKind::Integer { low, high } => {
                if low > high {
                    return Err(invalid("lower bound exceeds upper bound"));
                }
            }
            ParamKind::Binary => {}
            ParamKind::Categorical { values } => {
                if values.is_empty() {
                    return Err(invalid("categorical value list is empty"));
                }
            }
        }
        if matches!(self.kind, ParamKind::Real { .. } | ParamKind::Integer { .. })
            && !(self.mutation_sigma_fraction > 0.0 && self.mutation_sigma_fraction <= 1.0)
        {
            return Err(invalid("mutation_sigma_fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Range width for numeric kinds, `None` otherwise.
    pub fn width(&self) -> Option<f64> {
        match &self.kind {
            ParamKind::Real { low, high } => Some(high - low),
            ParamKind::Integer { low, high } => Some((high - low) as f64),
            _ => None,
        }
    }

    pub fn contains(&self, value: &ParamValue) -> bool {
        match (&self.kind, value) {
            (ParamKind::Real { low, high }, ParamValue::Real(v)) => v.is_finite() && low <= v && v <= high,
            (ParamKind::Integer { low, high }, ParamValue::Integer(v)) => low <= v && v <= high,
            (ParamKind::Binary, ParamValue::Binary(_)) => true,
            (ParamKind::Categorical { values }, ParamValue::Categorical(l)) => values.contains(l),
            _ => false,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamValue {
        match &self.kind {
            ParamKind::Real { low, high } => {
                if low == high {
                    ParamValue::Real(*low)
                } else {
                    ParamValue::Real(rng.random_range(*low..=*high))
                }
            }
            ParamKind::Integer { low, high } => ParamValue::Integer(rng.random_range(*low..=*high)),
            ParamKind::Binary => ParamValue::Binary(rng.random_bool(0.5)),
            ParamKind::Categorical { values } => {
                ParamValue::Categorical(values.choose(rng).expect("validated non-empty").clone())
            }
        }
    }

    /// Applies one mutation step: Gaussian for numeric kinds, a flip for
    /// binary, and a uniform pick among the other levels for categorical.
    pub fn mutate_value<R: Rng + ?Sized>(&self, value: &ParamValue, rng: &mut R) -> ParamValue {
        match &self.kind {
            ParamKind::Real { .. } | ParamKind::Integer { .. } => {
                let z: f64 = rng.sample(StandardNormal);
                self.gaussian_step(value, z)
            }
            ParamKind::Binary => match value {
                ParamValue::Binary(b) => ParamValue::Binary(!b),
                other => other.clone(),
            },
            ParamKind::Categorical { values } => {
                let current = match value {
                    ParamValue::Categorical(l) => Some(l),
                    _ => None,
                };
                let others: Vec<&Level> = values.iter().filter(|l| Some(*l) != current).collect();
                match others.choose(rng) {
                    Some(l) => ParamValue::Categorical((*l).clone()),
                    None => value.clone(),
                }
            }
        }
    }

    /// Shifts a numeric value by `z` standard deviations (σ = sigma fraction ×
    /// range width) and clamps the result into range. Non-numeric values are
    /// returned unchanged.
    pub fn gaussian_step(&self, value: &ParamValue, z: f64) -> ParamValue {
        let sigma = self.mutation_sigma_fraction;
        match (&self.kind, value) {
            (ParamKind::Real { low, high }, ParamValue::Real(v)) => {
                let stepped = v + z * sigma * (high - low);
                ParamValue::Real(stepped.clamp(*low, *high))
            }
            (ParamKind::Integer { low, high }, ParamValue::Integer(v)) => {
                let stepped = (*v as f64 + z * sigma * (high - low) as f64).round();
                ParamValue::Integer((stepped as i64).clamp(*low, *high))
            }
            _ => value.clone(),
        }
    }

    /// Normalized distance between two values of this parameter, in [0, 1].
    fn value_distance(&self, a: &ParamValue, b: &ParamValue) -> f64 {
        match (a, b) {
            (ParamValue::Real(x), ParamValue::Real(y)) => normalized_gap(*x, *y, self.width()),
            (ParamValue::Integer(x), ParamValue::Integer(y)) => {
                normalized_gap(*x as f64, *y as f64, self.width())
            }
            _ => {
                if a == b {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }
}

fn normalized_gap(x: f64, y: f64, width: Option<f64>) -> f64 {
    match width {
        Some(w) if w > 0.0 => ((x - y).abs() / w).min(1.0),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamValue {
    Real(f64),
    Integer(i64),
    Binary(bool),
    Categorical(Level),
}

impl ParamValue {
    /// Numeric view used by size inference and the surrogate objective.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Real(v) => Some(*v),
            ParamValue::Integer(v) => Some(*v as f64),
            ParamValue::Binary(b) => Some(if *b { 1.0 } else { 0.0 }),
            ParamValue::Categorical(l) => l.as_f64(),
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            ParamValue::Binary(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Categorical(l) => l.as_str(),
            _ => None,
        }
    }

    fn same_kind(&self, other: &ParamValue) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Real(v) => write!(f, "{v}"),
            ParamValue::Integer(v) => write!(f, "{v}"),
            ParamValue::Binary(b) => write!(f, "{b}"),
            ParamValue::Categorical(l) => write!(f, "{l}"),
        }
    }
}

/// Concrete assignment of values to the parameters of one spec list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HyperparameterTable {
    values: BTreeMap<String, ParamValue>,
}

impl HyperparameterTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_values(values: impl IntoIterator<Item = (String, ParamValue)>) -> Self {
        Self {
            values: values.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.values.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ParamValue) {
        self.values.insert(name.into(), value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamValue)> {
        self.values.iter()
    }

    pub fn get_f64(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(ParamValue::as_f64)
    }

    pub fn get_bool(&self, name: &str) -> Option<bool> {
        self.get(name).and_then(ParamValue::as_bool)
    }

    pub fn get_str(&self, name: &str) -> Option<&str> {
        self.get(name).and_then(ParamValue::as_str)
    }
}

/// Checks that `table` assigns an in-range value to exactly the names in `specs`.
pub fn validate_table(table: &HyperparameterTable, specs: &[HyperparameterSpec]) -> Result<(), HyperparamError> {
    for spec in specs {
        let value = table.get(&spec.name).ok_or_else(|| HyperparamError::Missing(spec.name.clone()))?;
        if !spec.contains(value) {
            return Err(HyperparamError::OutOfRange {
                name: spec.name.clone(),
                value: value.to_string(),
            });
        }
    }
    if let Some((name, _)) = table.iter().find(|(name, _)| !specs.iter().any(|s| &s.name == *name)) {
        return Err(HyperparamError::Unexpected(name.clone()));
    }
    Ok(())
}

pub fn validate_specs(specs: &[HyperparameterSpec]) -> Result<(), HyperparamError> {
    let mut seen = std::collections::BTreeSet::new();
    for spec in specs {
        spec.validate()?;
        if !seen.insert(spec.name.as_str()) {
            return Err(HyperparamError::DuplicateName(spec.name.clone()));
        }
    }
    Ok(())
}

/// Draws every value uniformly from its range or value list.
pub fn sample_table<R: Rng + ?Sized>(specs: &[HyperparameterSpec], rng: &mut R) -> HyperparameterTable {
    HyperparameterTable::from_values(specs.iter().map(|s| (s.name.clone(), s.sample(rng))))
}

/// Mutates each parameter independently with probability `per_param_rate`.
/// Parameters the table does not carry are skipped.
pub fn mutate_table<R: Rng + ?Sized>(
    table: &HyperparameterTable,
    specs: &[HyperparameterSpec],
    per_param_rate: f64,
    rng: &mut R,
) -> HyperparameterTable {
    let mut out = table.clone();
    if per_param_rate <= 0.0 {
        return out;
    }
    for spec in specs {
        let Some(current) = table.get(&spec.name) else {
            continue;
        };
        if rng.random_bool(per_param_rate.min(1.0)) {
            out.insert(spec.name.clone(), spec.mutate_value(current, rng));
        }
    }
    out
}

fn check_compatible(a: &HyperparameterTable, b: &HyperparameterTable) -> Result<(), HyperparamError> {
    if a.len() != b.len() {
        return Err(HyperparamError::Incompatible(format!(
            "{} parameters vs {}",
            a.len(),
            b.len()
        )));
    }
    for ((na, va), (nb, vb)) in a.iter().zip(b.iter()) {
        if na != nb {
            return Err(HyperparamError::Incompatible(format!("`{na}` vs `{nb}`")));
        }
        if !va.same_kind(vb) {
            return Err(HyperparamError::Incompatible(format!("`{na}` has different kinds")));
        }
    }
    Ok(())
}

/// Per-parameter uniform pick between two tables over the same spec.
pub fn crossover_tables<R: Rng + ?Sized>(
    a: &HyperparameterTable,
    b: &HyperparameterTable,
    rng: &mut R,
) -> Result<HyperparameterTable, HyperparamError> {
    crossover_tables_with(a, b, |_| rng.random_bool(0.5))
}

/// Same as [`crossover_tables`] with the pick supplied by `pick_b`, called
/// once per parameter in name order.
pub fn crossover_tables_with(
    a: &HyperparameterTable,
    b: &HyperparameterTable,
    mut pick_b: impl FnMut(&str) -> bool,
) -> Result<HyperparameterTable, HyperparamError> {
    check_compatible(a, b)?;
    Ok(HyperparameterTable::from_values(a.iter().zip(b.iter()).map(
        |((name, va), (_, vb))| {
            let v = if pick_b(name) { vb.clone() } else { va.clone() };
            (name.clone(), v)
        },
    )))
}

/// Mean normalized per-parameter distance; 0 for empty tables.
pub fn table_distance(
    a: &HyperparameterTable,
    b: &HyperparameterTable,
    specs: &[HyperparameterSpec],
) -> Result<f64, HyperparamError> {
    check_compatible(a, b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (name, va) in a.iter() {
        let vb = b.get(name).expect("checked compatible");
        total += match specs.iter().find(|s| &s.name == name) {
            Some(spec) => spec.value_distance(va, vb),
            None => {
                if va == vb {
                    0.0
                } else {
                    1.0
                }
            }
        };
    }
    Ok(total / a.len() as f64)
}

/// Layer kinds a node may take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv,
    Lstm,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv => "conv",
            LayerKind::Lstm => "lstm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterSpace {
    pub layer_kinds: Vec<LayerKind>,
    #[serde(default)]
    pub node_params: Vec<HyperparameterSpec>,
    #[serde(default)]
    pub global_params: Vec<HyperparameterSpec>,
}

impl HyperparameterSpace {
    pub fn validate(&self) -> Result<(), HyperparamError> {
        if self.layer_kinds.is_empty() {
            return Err(HyperparamError::NoLayerKinds);
        }
        validate_specs(&self.node_params)?;
        validate_specs(&self.global_params)?;
        if let Some(shared) = self
            .node_params
            .iter()
            .find(|n| self.global_params.iter().any(|g| g.name == n.name))
        {
            return Err(HyperparamError::SharedName(shared.name.clone()));
        }
        Ok(())
    }

    pub fn node_spec(&self, name: &str) -> Option<&HyperparameterSpec> {
        self.node_params.iter().find(|s| s.name == name)
    }

    pub fn global_spec(&self, name: &str) -> Option<&HyperparameterSpec> {
        self.global_params.iter().find(|s| s.name == name)
    }

    pub fn has_lstm(&self) -> bool {
        self.layer_kinds.contains(&LayerKind::Lstm)
    }
}
