use serde::{Deserialize, Serialize};

use super::{EvaluationBudget, Evaluator, EvaluatorError, FitnessReport};
use crate::assembly::AssembledNetwork;
use crate::hyperparams::LayerKind;

/// Desired value of one hyperparameter. Layer parameters are compared on
/// every compute layer that carries them, global parameters on the network
/// globals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTarget {
    pub name: String,
    pub value: f64,
    /// Error is measured in units of `scale`.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralTarget {
    /// Desired number of compute layers on the longest path.
    pub depth: usize,
    pub depth_weight: f64,
    pub param_weight: f64,
    #[serde(default)]
    pub params: Vec<ParamTarget>,
}

impl StructuralTarget {
    /// Sum over targets of the normalized squared error; for layer parameters
    /// the error is averaged over the layers carrying the parameter. A target
    /// that no layer or global carries counts as an error of 1.
    pub fn param_error(&self, net: &AssembledNetwork) -> f64 {
        let mut total = 0.0;
        for t in &self.params {
            let scale = if t.scale > 0.0 { t.scale } else { 1.0 };
            let values: Vec<f64> = match net.globals.get_f64(&t.name) {
                Some(v) => vec![v],
                None => net
                    .layers
                    .iter()
                    .filter(|l| l.op.is_compute())
                    .filter_map(|l| l.params.get_f64(&t.name))
                    .collect(),
            };
            total += if values.is_empty() {
                1.0
            } else {
                values.iter().map(|v| ((v - t.value) / scale).powi(2)).sum::<f64>() / values.len() as f64
            };
        }
        total
    }

    pub fn score(&self, net: &AssembledNetwork) -> (f64, usize, f64) {
        let depth = net.depth();
        let depth_err = (depth as f64 - self.depth as f64).powi(2);
        let param_err = self.param_error(net);
        let fitness = (-(self.depth_weight * depth_err + self.param_weight * param_err)).exp();
        (fitness, depth, param_err)
    }
}

/// Closed-form structural score in (0, 1]; 1 exactly when depth and every
/// targeted parameter match.
#[derive(Debug, Clone)]
pub struct Surrogate {
    target: StructuralTarget,
}

impl Surrogate {
    pub fn new(target: StructuralTarget) -> Self {
        Self { target }
    }

    pub fn target(&self) -> &StructuralTarget {
        &self.target
    }
}

impl Evaluator for Surrogate {
    fn evaluate(
        &self,
        network_id: u64,
        net: &AssembledNetwork,
        _budget: &EvaluationBudget,
    ) -> Result<FitnessReport, EvaluatorError> {
        let (fitness, depth, param_err) = self.target.score(net);
        let mut report = FitnessReport::new(network_id, fitness);
        report.diagnostics.insert("depth".into(), depth.into());
        report.diagnostics.insert("param_error".into(), param_err.into());
        report.diagnostics.insert("layers".into(), net.layers.len().into());
        Ok(report)
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn capabilities(&self) -> Vec<LayerKind> {
        vec![LayerKind::Dense, LayerKind::Conv, LayerKind::Lstm]
    }
}
