//! Evolution of deep network topologies and hyperparameters with DeepNEAT and
//! CoDeepNEAT.

pub mod assembly;
pub mod canonical;
pub mod config;
pub mod coevolution;
pub mod deepneat;
pub mod distrib;
pub mod evaluator;
pub mod genome;
pub mod hyperparams;
pub mod presets;
pub mod run;
pub mod speciation;
