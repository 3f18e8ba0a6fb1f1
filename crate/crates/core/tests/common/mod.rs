#![allow(dead_code)]

use codeepneat::assembly::{assemble_chromosome, AssembledNetwork, IoSpec, MergePolicy, Shape};
use codeepneat::evaluator::{EvaluatorSpec, ParamTarget, StructuralTarget};
use codeepneat::genome::{minimal_chromosome, InnovationRegistry, MutationContext, MutationRates};
use codeepneat::hyperparams::{HyperparameterSpace, HyperparameterSpec, LayerKind};
use codeepneat::speciation::Genome;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn dense_space() -> HyperparameterSpace {
    HyperparameterSpace {
        layer_kinds: vec![LayerKind::Dense],
        node_params: vec![
            HyperparameterSpec::integer("layer_size", 8, 128),
            HyperparameterSpec::real("dropout_rate", 0.0, 0.7),
        ],
        global_params: vec![HyperparameterSpec::real("learning_rate", 0.0001, 0.1)],
    }
}

pub fn vector_io() -> IoSpec {
    IoSpec {
        input: Shape::vector(4),
        output_units: 2,
    }
}

pub fn surrogate_spec() -> EvaluatorSpec {
    EvaluatorSpec::Surrogate(StructuralTarget {
        depth: 5,
        depth_weight: 0.2,
        param_weight: 1.0,
        params: vec![ParamTarget {
            name: "layer_size".into(),
            value: 64.0,
            scale: 64.0,
        }],
    })
}

/// `n` valid networks of varied shape.
pub fn random_networks(n: usize, seed: u64) -> Vec<(u64, AssembledNetwork)> {
    let space = dense_space();
    let rates = MutationRates {
        add_node: 0.5,
        add_edge: 0.3,
        ..MutationRates::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut registry = InnovationRegistry::new();
    let mut out = Vec::with_capacity(n);
    for id in 0..n as u64 {
        let mut c = minimal_chromosome(&space, &mut rng);
        let steps = (id % 7) as usize;
        for _ in 0..steps {
            let mut ctx = MutationContext {
                registry: &mut registry,
                rng: &mut rng,
                space: &space,
                rates: &rates,
                module_species: &[],
            };
            c.mutate(&mut ctx);
        }
        let net = assemble_chromosome(&c, &MergePolicy::default(), &vector_io()).expect("dense chromosomes assemble");
        out.push((id, net));
    }
    out
}
