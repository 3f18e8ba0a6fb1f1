//! Built-in run configurations.
//!
//! `cifar10`, `lstm-ptb` and `captioning` carry the published search spaces,
//! population sizes and training regimes of the three reference
//! experiments. They run here against the structural surrogate; the
//! `full_scale` block records the regime an external trainer would use.
//! `surrogate-demo` and `deepneat-gaussians` are small runs that finish in
//! seconds.

use crate::assembly::{Downsample, IoSpec, MergeMethod, MergePolicy, Shape};
use crate::config::{Backend, EvolutionConfig, FullScaleSetting, Mode};
use crate::distrib::SchedulerConfig;
use crate::evaluator::{EvaluationBudget, EvaluatorSpec, ParamTarget, StructuralTarget, TaskKind, TaskSpec};
use crate::genome::MutationRates;
use crate::hyperparams::{HyperparameterSpace, HyperparameterSpec as P, LayerKind};
use crate::speciation::SpeciationConfig;

pub const NAMES: [&str; 5] = ["surrogate-demo", "deepneat-gaussians", "cifar10", "lstm-ptb", "captioning"];

pub fn preset(name: &str) -> Option<EvolutionConfig> {
    let mut c = match name {
        "surrogate-demo" => surrogate_demo(),
        "deepneat-gaussians" => deepneat_gaussians(),
        "cifar10" => cifar10(),
        "lstm-ptb" => lstm_ptb(),
        "captioning" => captioning(),
        _ => return None,
    };
    c.preset = Some(name.to_string());
    Some(c)
}

fn base(mode: Mode, space: HyperparameterSpace, io: IoSpec, evaluator: EvaluatorSpec) -> EvolutionConfig {
    EvolutionConfig {
        preset: None,
        mode,
        seed: 0,
        generations: 10,
        space,
        blueprints: 10,
        modules: 10,
        assembly_count: 20,
        blueprint_speciation: SpeciationConfig::default(),
        module_speciation: SpeciationConfig::default(),
        blueprint_rates: MutationRates::default(),
        module_rates: MutationRates::default(),
        merge_policy: MergePolicy::default(),
        io,
        evaluator,
        budget: EvaluationBudget::default(),
        backend: Backend::default(),
        scheduler: SchedulerConfig::default(),
        checkpoint_every: 1,
        output: None,
        full_scale: None,
    }
}

fn growth_rates() -> MutationRates {
    MutationRates {
        add_node: 0.25,
        add_edge: 0.15,
        ..MutationRates::default()
    }
}

/// Dense search space scored against a fixed structural target: six layers
/// deep, layers of 64 units, learning rate 0.01.
pub fn surrogate_demo() -> EvolutionConfig {
    let space = HyperparameterSpace {
        layer_kinds: vec![LayerKind::Dense],
        node_params: vec![P::integer("layer_size", 8, 128), P::real("dropout_rate", 0.0, 0.7)],
        global_params: vec![P::real("learning_rate", 0.0001, 0.1)],
    };
    let target = StructuralTarget {
        depth: 6,
        depth_weight: 0.5,
        param_weight: 1.0,
        params: vec![
            ParamTarget {
                name: "layer_size".into(),
                value: 64.0,
                scale: 16.0,
            },
            ParamTarget {
                name: "learning_rate".into(),
                value: 0.01,
                scale: 0.01,
            },
        ],
    };
    let mut c = base(
        Mode::Codeepneat,
        space,
        IoSpec {
            input: Shape::vector(16),
            output_units: 4,
        },
        EvaluatorSpec::Surrogate(target),
    );
    c.generations = 30;
    c.blueprints = 30;
    c.modules = 30;
    c.assembly_count = 60;
    c.blueprint_rates = growth_rates();
    c.module_rates = growth_rates();
    c
}

/// Single population of dense networks trained on two Gaussian blobs.
pub fn deepneat_gaussians() -> EvolutionConfig {
    let space = HyperparameterSpace {
        layer_kinds: vec![LayerKind::Dense],
        node_params: vec![
            P::integer("layer_size", 2, 32),
            P::categorical("layer_activation", ["relu", "tanh", "sigmoid", "linear"]),
        ],
        global_params: vec![P::real("learning_rate", 0.001, 0.3), P::real("momentum", 0.5, 0.95)],
    };
    let mut c = base(
        Mode::Deepneat,
        space,
        IoSpec {
            input: Shape::vector(2),
            output_units: 2,
        },
        EvaluatorSpec::Trainer(TaskSpec {
            task: TaskKind::TwoGaussians,
            samples: 400,
            seed: 11,
        }),
    );
    c.generations = 20;
    c.blueprints = 20;
    c.modules = 0;
    c.assembly_count = 0;
    c.budget = EvaluationBudget {
        epochs: 10,
        sample_cap: 0,
        seed: 0,
    };
    c
}

/// Convolutional search space over 32x32 colour images, ten classes.
pub fn cifar10() -> EvolutionConfig {
    let space = HyperparameterSpace {
        layer_kinds: vec![LayerKind::Conv],
        node_params: vec![
            P::integer("num_filters", 32, 256),
            P::real("dropout_rate", 0.0, 0.7),
            P::real("initial_weight_scaling", 0.0, 2.0),
            P::categorical("kernel_size", [1i64, 3]),
            P::binary("max_pooling"),
        ],
        global_params: vec![
            P::real("learning_rate", 0.0001, 0.1),
            P::real("momentum", 0.68, 0.99),
            P::real("hue_shift", 0.0, 45.0),
            P::real("saturation_value_shift", 0.0, 0.5),
            P::real("saturation_value_scale", 0.0, 0.5),
            P::integer("cropped_image_size", 26, 32),
            P::real("spatial_scaling", 0.0, 0.3),
            P::binary("random_horizontal_flips"),
            P::binary("variance_normalization"),
            P::binary("nesterov_accelerated_gradient"),
        ],
    };
    let target = StructuralTarget {
        depth: 8,
        depth_weight: 0.2,
        param_weight: 1.0,
        params: vec![ParamTarget {
            name: "num_filters".into(),
            value: 128.0,
            scale: 224.0,
        }],
    };
    let mut c = base(
        Mode::Codeepneat,
        space,
        IoSpec {
            input: Shape::image(3, 32, 32),
            output_units: 10,
        },
        EvaluatorSpec::Surrogate(target),
    );
    c.generations = 72;
    c.blueprints = 25;
    c.modules = 45;
    c.assembly_count = 100;
    c.merge_policy = MergePolicy {
        method: MergeMethod::Concatenate,
        downsample: Downsample::MaxPool,
    };
    c.budget.epochs = 8;
    c.blueprint_rates = growth_rates();
    c.module_rates = growth_rates();
    c.full_scale = Some(FullScaleSetting {
        dataset: Some("cifar10".into()),
        epochs: Some(8),
        train_samples: Some(42_500),
        validation_samples: Some(7_500),
        batch_size: None,
        generations: Some(72),
        networks_per_generation: Some(100),
    });
    c
}

/// Two-layer recurrent language models with fixed sizes; evolution acts on
/// the wiring between LSTM cells.
pub fn lstm_ptb() -> EvolutionConfig {
    let space = HyperparameterSpace {
        layer_kinds: vec![LayerKind::Lstm],
        node_params: vec![P::integer("layer_size", 650, 650), P::real("dropout_rate", 0.5, 0.5)],
        global_params: vec![
            P::real("init_weight_range", 0.05, 0.05),
            P::integer("unroll_steps", 35, 35),
            P::integer("batch_size", 20, 20),
            P::real("learning_rate_decay", 0.8, 0.8),
            P::integer("decay_every_epochs", 6, 6),
            P::real("gradient_clip_norm", 5.0, 5.0),
        ],
    };
    let target = StructuralTarget {
        depth: 2,
        depth_weight: 1.0,
        param_weight: 0.0,
        params: vec![],
    };
    let mut c = base(
        Mode::Deepneat,
        space,
        IoSpec {
            input: Shape::vector(650),
            output_units: 10_000,
        },
        EvaluatorSpec::Surrogate(target),
    );
    c.generations = 25;
    c.blueprints = 50;
    c.modules = 0;
    c.assembly_count = 0;
    c.budget.epochs = 39;
    c.blueprint_rates = MutationRates {
        skip_connection: 0.3,
        ..growth_rates()
    };
    c.full_scale = Some(FullScaleSetting {
        dataset: Some("ptb".into()),
        epochs: Some(39),
        train_samples: None,
        validation_samples: None,
        batch_size: Some(20),
        generations: Some(25),
        networks_per_generation: Some(50),
    });
    c
}

/// Dense and LSTM layers over an image embedding, with per-node merge
/// methods.
pub fn captioning() -> EvolutionConfig {
    let space = HyperparameterSpace {
        layer_kinds: vec![LayerKind::Dense, LayerKind::Lstm],
        node_params: vec![
            P::categorical("merge_method", ["sum", "concat"]),
            P::categorical("layer_size", [128i64, 256]),
            P::categorical("layer_activation", ["relu", "linear"]),
            P::real("layer_dropout", 0.0, 0.7),
        ],
        global_params: vec![
            P::real("learning_rate", 0.0001, 0.1),
            P::real("momentum", 0.68, 0.99),
            P::integer("shared_embedding_size", 128, 512),
            P::real("embedding_dropout", 0.0, 0.7),
            P::binary("lstm_recurrent_dropout"),
            P::binary("nesterov_momentum"),
            P::categorical("weight_initialization", ["glorot_normal", "he_normal"]),
        ],
    };
    let target = StructuralTarget {
        depth: 4,
        depth_weight: 0.3,
        param_weight: 1.0,
        params: vec![ParamTarget {
            name: "layer_size".into(),
            value: 256.0,
            scale: 128.0,
        }],
    };
    let mut c = base(
        Mode::Codeepneat,
        space,
        IoSpec {
            input: Shape::vector(512),
            output_units: 512,
        },
        EvaluatorSpec::Surrogate(target),
    );
    c.generations = 20;
    c.blueprints = 25;
    c.modules = 45;
    c.assembly_count = 100;
    c.budget.epochs = 6;
    c.blueprint_rates = growth_rates();
    c.module_rates = growth_rates();
    c.full_scale = Some(FullScaleSetting {
        dataset: Some("mscoco".into()),
        epochs: Some(6),
        train_samples: Some(100_000),
        validation_samples: Some(25_000),
        batch_size: None,
        generations: None,
        networks_per_generation: Some(100),
    });
    c
}
