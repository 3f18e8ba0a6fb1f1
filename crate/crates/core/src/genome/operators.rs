use rand::seq::IndexedRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::hyperparams::{mutate_table, HyperparameterSpace, DEFAULT_PARAM_MUTATION_RATE};
use crate::speciation::Genome;

use super::{
    compatibility_distance, crossover, BlueprintChromosome, CompatibilityCoefficients, InnovationRegistry, Layer,
    LinkKind, ModuleChromosome, ModuleSlot, NodeRole, SpeciesId,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MutationRates {
    pub add_node: f64,
    pub add_edge: f64,
    /// LSTM spaces only.
    pub toggle_connection: f64,
    /// LSTM spaces only.
    pub skip_connection: f64,
    pub per_param: f64,
    /// Blueprint nodes only: re-point at a uniformly chosen live module species.
    pub species_pointer: f64,
}

impl Default for MutationRates {
    fn default() -> Self {
        Self {
            add_node: 0.05,
            add_edge: 0.1,
            toggle_connection: 0.1,
            skip_connection: 0.1,
            per_param: DEFAULT_PARAM_MUTATION_RATE,
            species_pointer: 0.1,
        }
    }
}

impl MutationRates {
    pub fn fields(&self) -> [(&'static str, f64); 6] {
        [
            ("add_node", self.add_node),
            ("add_edge", self.add_edge),
            ("toggle_connection", self.toggle_connection),
            ("skip_connection", self.skip_connection),
            ("per_param", self.per_param),
            ("species_pointer", self.species_pointer),
        ]
    }
}

/// Everything a mutation needs besides the chromosome itself.
pub struct MutationContext<'a> {
    pub registry: &'a mut InnovationRegistry,
    pub rng: &'a mut dyn RngCore,
    pub space: &'a HyperparameterSpace,
    pub rates: &'a MutationRates,
    /// Live module species, for blueprint pointers.
    pub module_species: &'a [SpeciesId],
}

fn chance(rng: &mut dyn RngCore, p: f64) -> bool {
    p > 0.0 && rng.random_bool(p.min(1.0))
}

impl Genome for ModuleChromosome {
    fn compatibility(&self, other: &Self, coeffs: &CompatibilityCoefficients, space: &HyperparameterSpace) -> f64 {
        compatibility_distance(self, other, coeffs, &space.node_params)
    }

    fn recombine(&self, other: &Self, fitness_self: f64, fitness_other: f64, rng: &mut dyn RngCore) -> Self {
        crossover(self, other, fitness_self, fitness_other, rng).unwrap_or_else(|err| {
            log::warn!("module crossover failed ({err}); cloning fitter parent");
            if fitness_other > fitness_self { other.clone() } else { self.clone() }
        })
    }

    fn mutate(&mut self, ctx: &mut MutationContext<'_>) {
        let space = ctx.space;
        let rates = ctx.rates;
        if chance(ctx.rng, rates.add_node) {
            self.mutate_add_node(ctx.registry, ctx.rng, |r| Layer::sample(space, r));
        }
        if chance(ctx.rng, rates.add_edge) {
            self.mutate_add_edge(ctx.registry, ctx.rng);
        }
        if space.has_lstm() {
            if chance(ctx.rng, rates.toggle_connection) {
                self.toggle_layer_connection(ctx.rng);
            }
            if chance(ctx.rng, rates.skip_connection) {
                // fewer than two LSTM nodes is not an error during evolution
                let _ = self.mutate_skip_connection(ctx.registry, ctx.rng);
            }
        }
        let mut kind_changed = false;
        for node in self.nodes.iter_mut().filter(|n| n.role == NodeRole::Hidden) {
            let Some(layer) = node.payload.as_mut() else { continue };
            layer.params = mutate_table(&layer.params, &space.node_params, rates.per_param, ctx.rng);
            if space.layer_kinds.len() > 1 && chance(ctx.rng, rates.per_param) {
                let others: Vec<_> = space.layer_kinds.iter().filter(|k| **k != layer.kind).collect();
                if let Some(kind) = others.choose(ctx.rng) {
                    layer.kind = **kind;
                    kind_changed = true;
                }
            }
        }
        if kind_changed {
            let lstm = self.lstm_nodes();
            self.edges
                .retain(|e| e.link_kind != LinkKind::CellSkip || (lstm.contains(&e.from) && lstm.contains(&e.to)));
        }
        if !self.globals.is_empty() {
            self.globals = mutate_table(&self.globals, &space.global_params, rates.per_param, ctx.rng);
        }
    }
}

impl Genome for BlueprintChromosome {
    fn compatibility(&self, other: &Self, coeffs: &CompatibilityCoefficients, _space: &HyperparameterSpace) -> f64 {
        compatibility_distance(self, other, coeffs, &[])
    }

    fn recombine(&self, other: &Self, fitness_self: f64, fitness_other: f64, rng: &mut dyn RngCore) -> Self {
        crossover(self, other, fitness_self, fitness_other, rng).unwrap_or_else(|err| {
            log::warn!("blueprint crossover failed ({err}); cloning fitter parent");
            if fitness_other > fitness_self { other.clone() } else { self.clone() }
        })
    }

    fn mutate(&mut self, ctx: &mut MutationContext<'_>) {
        let rates = ctx.rates;
        let live = ctx.module_species;
        if !live.is_empty() && chance(ctx.rng, rates.add_node) {
            self.mutate_add_node(ctx.registry, ctx.rng, |r| ModuleSlot {
                species: *live.choose(r).expect("non-empty"),
            });
        }
        if chance(ctx.rng, rates.add_edge) {
            self.mutate_add_edge(ctx.registry, ctx.rng);
        }
        if !live.is_empty() {
            for node in self.nodes.iter_mut().filter(|n| n.role == NodeRole::Hidden) {
                if chance(ctx.rng, rates.species_pointer) {
                    node.payload = Some(ModuleSlot {
                        species: *live.choose(ctx.rng).expect("non-empty"),
                    });
                }
            }
        }
        if !self.globals.is_empty() {
            self.globals = mutate_table(&self.globals, &ctx.space.global_params, rates.per_param, ctx.rng);
        }
    }
}
