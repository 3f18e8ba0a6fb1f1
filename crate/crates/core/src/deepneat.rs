//! Single-population DeepNEAT: every chromosome is a whole network.

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble_chromosome, AssembledNetwork, IoSpec, MergePolicy};
use crate::coevolution::{apply_reports, best_record, AssemblyRecord, CoevolutionError, GenerationOutcome};
use crate::evaluator::{BatchEvaluator, EvaluationBudget, FITNESS_FLOOR};
use crate::genome::{minimal_chromosome, InnovationRegistry, ModuleChromosome, MutationContext, MutationRates};
use crate::hyperparams::HyperparameterSpace;
use crate::speciation::{Population, SpeciationConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepNeat {
    pub population: Population<ModuleChromosome>,
    pub registry: InnovationRegistry,
    next_network: u64,
}

impl DeepNeat {
    pub fn new(
        space: &HyperparameterSpace,
        size: usize,
        config: &SpeciationConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self, CoevolutionError> {
        let genomes = (0..size).map(|_| minimal_chromosome(space, rng)).collect();
        Ok(Self {
            population: Population::new(genomes, config, space)?,
            registry: InnovationRegistry::new(),
            next_network: 0,
        })
    }

    pub fn generation(&self) -> u64 {
        self.population.generation
    }

    /// Evaluates every member once, then reproduces.
    #[allow(clippy::too_many_arguments)]
    pub fn evolve_generation(
        &mut self,
        evaluator: &mut dyn BatchEvaluator,
        budget: &EvaluationBudget,
        config: &SpeciationConfig,
        rates: &MutationRates,
        space: &HyperparameterSpace,
        policy: &MergePolicy,
        io: &IoSpec,
        rng: &mut dyn RngCore,
    ) -> Result<GenerationOutcome, CoevolutionError> {
        let generation = self.generation();
        let mut records = Vec::with_capacity(self.population.size);
        let mut networks = Vec::new();
        let mut built: BTreeMap<u64, AssembledNetwork> = BTreeMap::new();
        for m in self.population.members() {
            let mut record = AssemblyRecord {
                generation,
                network_id: self.next_network,
                blueprint_id: m.id,
                module_choice: BTreeMap::new(),
                fitness: None,
            };
            self.next_network += 1;
            match assemble_chromosome(&m.genome, policy, io) {
                Ok(net) => {
                    networks.push((record.network_id, net.clone()));
                    built.insert(record.network_id, net);
                }
                Err(e) => {
                    log::warn!("member {} failed to assemble: {e}", m.id);
                    record.fitness = Some(FITNESS_FLOOR);
                }
            }
            records.push(record);
        }
        let reports = evaluator.evaluate_batch(&networks, budget)?;
        apply_reports(&mut records, &networks, reports)?;
        for r in &records {
            self.population
                .set_fitness(r.blueprint_id, r.fitness.expect("filled above"))?;
        }
        let best = best_record(&records).and_then(|r| built.get(&r.network_id).map(|n| (r.clone(), n.clone())));
        let mut ctx = MutationContext {
            registry: &mut self.registry,
            rng,
            space,
            rates,
            module_species: &[],
        };
        self.population.reproduce(config, &mut ctx)?;
        Ok(GenerationOutcome {
            generation,
            records,
            best,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::Shape;
    use crate::evaluator::{InProcess, StructuralTarget, Surrogate};
    use crate::hyperparams::{HyperparameterSpec, LayerKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    /// Best-so-far is monotone by construction; with elitism and a
    /// deterministic evaluator the per-generation best never drops either.
    #[test]
    fn elitism_keeps_generation_best_non_decreasing() {
        let space = HyperparameterSpace {
            layer_kinds: vec![LayerKind::Dense],
            node_params: vec![HyperparameterSpec::integer("layer_size", 8, 64)],
            global_params: vec![],
        };
        let config = SpeciationConfig::default();
        let rates = MutationRates {
            add_node: 0.3,
            ..MutationRates::default()
        };
        let io = IoSpec {
            input: Shape::vector(3),
            output_units: 2,
        };
        let mut eval = InProcess::new(Arc::new(Surrogate::new(StructuralTarget {
            depth: 5,
            depth_weight: 0.3,
            param_weight: 0.0,
            params: vec![],
        })));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut dn = DeepNeat::new(&space, 12, &config, &mut rng).unwrap();
        let mut last = 0.0;
        for _ in 0..20 {
            let out = dn
                .evolve_generation(
                    &mut eval,
                    &EvaluationBudget::default(),
                    &config,
                    &rates,
                    &space,
                    &MergePolicy::default(),
                    &io,
                    &mut rng,
                )
                .unwrap();
            let best = out.best_fitness().unwrap();
            assert!(best >= last, "{best} < {last}");
            last = best;
            assert_eq!(dn.population.len(), 12);
        }
        assert!(last > (-0.3f64 * 16.0).exp());
    }
}
