//! Fitness evaluation.
//!
//! An [`Evaluator`] scores one assembled network under an
//! [`EvaluationBudget`]. Two are built in: [`Surrogate`], a cheap closed-form
//! score of network structure, and [`Trainer`], a small dense-network trainer
//! on synthetic classification tasks. [`EvaluatorSpec`] is the serializable
//! description used by configs and worker jobs.

mod surrogate;
mod tasks;
mod trainer;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::AssembledNetwork;
use crate::hyperparams::LayerKind;

pub use surrogate::{ParamTarget, StructuralTarget, Surrogate};
pub use tasks::{synthetic_task, SyntheticTask, TaskKind, TaskSpec};
pub use trainer::{gradient_check, Trainer};

/// Score given to networks whose evaluation failed.
pub const FITNESS_FLOOR: f64 = 0.0;

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
pub enum EvaluatorError {
    #[error("layer `{0}` is not supported by this evaluator")]
    Unsupported(String),
    #[error("network does not fit the task: {0}")]
    Mismatch(String),
    #[error("invalid budget: {0}")]
    Budget(String),
    #[error("evaluation failed: {0}")]
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationBudget {
    pub epochs: u32,
    /// Upper bound on training samples per epoch; 0 means no cap.
    pub sample_cap: usize,
    pub seed: u64,
}

impl EvaluationBudget {
    pub fn validate(&self) -> Result<(), EvaluatorError> {
        if self.epochs == 0 {
            return Err(EvaluatorError::Budget("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for EvaluationBudget {
    fn default() -> Self {
        Self {
            epochs: 1,
            sample_cap: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessReport {
    pub network_id: u64,
    pub fitness: f64,
    #[serde(default)]
    pub diagnostics: BTreeMap<String, serde_json::Value>,
}

impl FitnessReport {
    pub fn new(network_id: u64, fitness: f64) -> Self {
        Self {
            network_id,
            fitness,
            diagnostics: BTreeMap::new(),
        }
    }

    /// Report for a failed evaluation: floor fitness, error kept as a diagnostic.
    pub fn floor(network_id: u64, error: impl ToString) -> Self {
        let mut r = Self::new(network_id, FITNESS_FLOOR);
        r.diagnostics.insert("error".into(), serde_json::Value::String(error.to_string()));
        r
    }
}

pub trait Evaluator: Send + Sync {
    fn evaluate(
        &self,
        network_id: u64,
        net: &AssembledNetwork,
        budget: &EvaluationBudget,
    ) -> Result<FitnessReport, EvaluatorError>;

    /// Whether identical inputs always yield identical reports.
    fn is_deterministic(&self) -> bool;

    /// Compute layer kinds this evaluator can handle.
    fn capabilities(&self) -> Vec<LayerKind>;
}

/// Runs `evaluator`, mapping errors and non-finite scores to the floor.
pub fn evaluate_or_floor(
    evaluator: &dyn Evaluator,
    network_id: u64,
    net: &AssembledNetwork,
    budget: &EvaluationBudget,
) -> FitnessReport {
    match evaluator.evaluate(network_id, net, budget) {
        Ok(r) if r.fitness.is_finite() => r,
        Ok(r) => FitnessReport::floor(network_id, format!("non-finite fitness {}", r.fitness)),
        Err(e) => {
            log::warn!("network {network_id}: {e}");
            FitnessReport::floor(network_id, e)
        }
    }
}

/// Scores a whole generation of networks; returns one report per input, in
/// input order.
pub trait BatchEvaluator {
    fn evaluate_batch(
        &mut self,
        networks: &[(u64, AssembledNetwork)],
        budget: &EvaluationBudget,
    ) -> Result<Vec<FitnessReport>, EvaluatorError>;
}

/// Sequential evaluation in the calling thread.
pub struct InProcess {
    evaluator: Arc<dyn Evaluator>,
}

impl InProcess {
    pub fn new(evaluator: Arc<dyn Evaluator>) -> Self {
        Self { evaluator }
    }
}

impl BatchEvaluator for InProcess {
    fn evaluate_batch(
        &mut self,
        networks: &[(u64, AssembledNetwork)],
        budget: &EvaluationBudget,
    ) -> Result<Vec<FitnessReport>, EvaluatorError> {
        Ok(networks
            .iter()
            .map(|(id, net)| evaluate_or_floor(&*self.evaluator, *id, net, budget))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluatorSpec {
    Surrogate(StructuralTarget),
    Trainer(TaskSpec),
}

impl EvaluatorSpec {
    pub fn build(&self) -> Arc<dyn Evaluator> {
        match self {
            EvaluatorSpec::Surrogate(target) => Arc::new(Surrogate::new(target.clone())),
            EvaluatorSpec::Trainer(task) => Arc::new(Trainer::new(synthetic_task(task))),
        }
    }
}
