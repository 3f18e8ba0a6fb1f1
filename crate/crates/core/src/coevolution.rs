//! Cooperative coevolution of blueprints and modules.
//!
//! Each generation a fixed number of networks is assembled: blueprints are
//! taken in round-robin order, and every module species a blueprint points at
//! contributes one randomly chosen module, reused wherever that species
//! appears. Network fitness flows back as the mean over the networks each
//! blueprint or module took part in, after which both populations reproduce
//! independently.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{assemble, AssembledNetwork, AssemblyError, IoSpec, MergePolicy, ModuleChoice};
use crate::evaluator::{BatchEvaluator, EvaluationBudget, EvaluatorError, FitnessReport, FITNESS_FLOOR};
use crate::genome::{
    minimal_blueprint, BlueprintChromosome, InnovationRegistry, Layer, ModuleChromosome, ModuleSlot, MutationContext,
    MutationRates, NodeRole, SpeciesId,
};
use crate::hyperparams::{HyperparameterSpace, HyperparameterTable};
use crate::speciation::{MemberId, Population, SpeciationConfig, SpeciationError};

#[derive(Debug, Error)]
pub enum CoevolutionError {
    #[error("no live module species")]
    NoModuleSpecies,
    #[error("no assembly records to attribute")]
    NoRecords,
    #[error("record for network {0} has no fitness")]
    MissingFitness(u64),
    #[error("evaluator returned {got} reports for {expected} networks")]
    ReportCount { expected: usize, got: usize },
    #[error(transparent)]
    Speciation(#[from] SpeciationError),
    #[error(transparent)]
    Evaluator(#[from] EvaluatorError),
}

/// One network of one generation: which blueprint, and which module stood in
/// for each species the blueprint points at. Single-population runs use
/// `blueprint_id` for the evaluated chromosome and leave `module_choice` empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyRecord {
    pub generation: u64,
    pub network_id: u64,
    pub blueprint_id: MemberId,
    pub module_choice: BTreeMap<SpeciesId, MemberId>,
    pub fitness: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoevolutionConfig {
    pub blueprints: SpeciationConfig,
    pub modules: SpeciationConfig,
    pub blueprint_rates: MutationRates,
    pub module_rates: MutationRates,
}

/// Result of one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutcome {
    pub generation: u64,
    pub records: Vec<AssemblyRecord>,
    /// Fittest network of the generation (ties: lowest network id).
    pub best: Option<(AssemblyRecord, AssembledNetwork)>,
}

impl GenerationOutcome {
    pub fn best_fitness(&self) -> Option<f64> {
        self.best.as_ref().and_then(|(r, _)| r.fitness)
    }

    pub fn mean_fitness(&self) -> f64 {
        let fits: Vec<f64> = self.records.iter().filter_map(|r| r.fitness).collect();
        if fits.is_empty() {
            0.0
        } else {
            compensated_sum(&fits) / fits.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoPopulations {
    pub blueprints: Population<BlueprintChromosome>,
    pub modules: Population<ModuleChromosome>,
    pub blueprint_registry: InnovationRegistry,
    pub module_registry: InnovationRegistry,
    /// Networks assembled per generation.
    pub assembly_count: usize,
    next_network: u64,
}

impl CoPopulations {
    /// Minimal initial populations. Modules carry no globals; network-wide
    /// hyperparameters live on the blueprints.
    pub fn new(
        space: &HyperparameterSpace,
        blueprint_count: usize,
        module_count: usize,
        assembly_count: usize,
        config: &CoevolutionConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self, CoevolutionError> {
        let modules: Vec<ModuleChromosome> = (0..module_count)
            .map(|_| ModuleChromosome::minimal_with(Layer::sample(space, rng), HyperparameterTable::new()))
            .collect();
        let modules = Population::new(modules, &config.modules, space)?;
        let live = modules.species_ids();
        let blueprints: Vec<BlueprintChromosome> = (0..blueprint_count)
            .map(|_| {
                let species = *live.choose(rng).expect("module population is non-empty");
                minimal_blueprint(space, species, rng)
            })
            .collect();
        let blueprints = Population::new(blueprints, &config.blueprints, space)?;
        Ok(Self {
            blueprints,
            modules,
            blueprint_registry: InnovationRegistry::new(),
            module_registry: InnovationRegistry::new(),
            assembly_count,
            next_network: 0,
        })
    }

    pub fn generation(&self) -> u64 {
        self.blueprints.generation
    }

    /// Re-points blueprint nodes whose species no longer exists at a
    /// uniformly chosen live species. Returns the number of repaired nodes.
    pub fn repair_pointers(&mut self, rng: &mut dyn RngCore) -> Result<usize, CoevolutionError> {
        let live = self.modules.species_ids();
        if live.is_empty() {
            return Err(CoevolutionError::NoModuleSpecies);
        }
        let live_set: BTreeSet<SpeciesId> = live.iter().copied().collect();
        let mut repaired = 0;
        for species in &mut self.blueprints.species {
            for member in &mut species.members {
                for node in member.genome.nodes.iter_mut().filter(|n| n.role == NodeRole::Hidden) {
                    let dangling = node.payload.is_none_or(|slot| !live_set.contains(&slot.species));
                    if dangling {
                        node.payload = Some(ModuleSlot {
                            species: *live.choose(rng).expect("checked non-empty"),
                        });
                        repaired += 1;
                    }
                }
            }
        }
        if repaired > 0 {
            log::debug!("re-pointed {repaired} blueprint nodes at live module species");
        }
        Ok(repaired)
    }

    /// Draws `assembly_count` (blueprint, module choice) combinations.
    pub fn sample_assemblies(&mut self, rng: &mut dyn RngCore) -> Result<Vec<AssemblyRecord>, CoevolutionError> {
        self.repair_pointers(rng)?;
        let order: Vec<(MemberId, Vec<SpeciesId>)> = self
            .blueprints
            .members()
            .map(|m| {
                let pointed: BTreeSet<SpeciesId> = m
                    .genome
                    .nodes
                    .iter()
                    .filter(|n| n.enabled && n.role == NodeRole::Hidden)
                    .filter_map(|n| n.payload.map(|s| s.species))
                    .collect();
                (m.id, pointed.into_iter().collect())
            })
            .collect();
        if order.is_empty() {
            return Err(CoevolutionError::Speciation(SpeciationError::Empty));
        }
        let generation = self.generation();
        let mut records = Vec::with_capacity(self.assembly_count);
        for k in 0..self.assembly_count {
            let (blueprint_id, pointed) = &order[k % order.len()];
            let mut module_choice = BTreeMap::new();
            for species in pointed {
                let members = &self.modules.species(*species).ok_or(CoevolutionError::NoModuleSpecies)?.members;
                let chosen = members.choose(rng).ok_or(CoevolutionError::NoModuleSpecies)?;
                module_choice.insert(*species, chosen.id);
            }
            records.push(AssemblyRecord {
                generation,
                network_id: self.next_network,
                blueprint_id: *blueprint_id,
                module_choice,
                fitness: None,
            });
            self.next_network += 1;
        }
        Ok(records)
    }

    /// Builds the network a record describes from the current populations.
    pub fn assemble_record(
        &self,
        record: &AssemblyRecord,
        policy: &MergePolicy,
        io: &IoSpec,
    ) -> Result<AssembledNetwork, AssemblyError> {
        let blueprint = &self
            .blueprints
            .member(record.blueprint_id)
            .ok_or(AssemblyError::Malformed)?
            .genome;
        let mut modules = BTreeMap::new();
        for (species, id) in &record.module_choice {
            let m = self.modules.member(*id).ok_or(AssemblyError::MissingModule(*species))?;
            modules.insert(
                *species,
                ModuleChoice {
                    id: *id,
                    chromosome: &m.genome,
                },
            );
        }
        assemble(blueprint, &modules, policy, io)
    }

    /// Samples, assembles, evaluates and attributes one generation, then
    /// reproduces both populations.
    #[allow(clippy::too_many_arguments)]
    pub fn evolve_generation(
        &mut self,
        evaluator: &mut dyn BatchEvaluator,
        budget: &EvaluationBudget,
        config: &CoevolutionConfig,
        space: &HyperparameterSpace,
        policy: &MergePolicy,
        io: &IoSpec,
        rng: &mut dyn RngCore,
    ) -> Result<GenerationOutcome, CoevolutionError> {
        let mut records = self.sample_assemblies(rng)?;
        let mut networks = Vec::with_capacity(records.len());
        let mut built: BTreeMap<u64, AssembledNetwork> = BTreeMap::new();
        for r in &mut records {
            match self.assemble_record(r, policy, io) {
                Ok(net) => {
                    networks.push((r.network_id, net.clone()));
                    built.insert(r.network_id, net);
                }
                Err(e) => {
                    log::warn!("network {} failed to assemble: {e}", r.network_id);
                    r.fitness = Some(FITNESS_FLOOR);
                }
            }
        }
        let reports = evaluator.evaluate_batch(&networks, budget)?;
        apply_reports(&mut records, &networks, reports)?;

        let (bp_fit, mod_fit) = attribute_fitness(&records)?;
        for (id, f) in &bp_fit {
            self.blueprints.set_fitness(*id, *f)?;
        }
        fill_module_fitness(&mut self.modules, &mod_fit)?;

        let best = best_record(&records).and_then(|r| built.get(&r.network_id).map(|n| (r.clone(), n.clone())));
        let generation = self.generation();

        let mut ctx = MutationContext {
            registry: &mut self.module_registry,
            rng,
            space,
            rates: &config.module_rates,
            module_species: &[],
        };
        self.modules.reproduce(&config.modules, &mut ctx)?;
        let live = self.modules.species_ids();
        let mut ctx = MutationContext {
            registry: &mut self.blueprint_registry,
            rng: ctx.rng,
            space,
            rates: &config.blueprint_rates,
            module_species: &live,
        };
        self.blueprints.reproduce(&config.blueprints, &mut ctx)?;
        Ok(GenerationOutcome {
            generation,
            records,
            best,
        })
    }
}

/// Writes report fitness into the matching records; non-finite scores become
/// the floor.
pub(crate) fn apply_reports(
    records: &mut [AssemblyRecord],
    networks: &[(u64, AssembledNetwork)],
    reports: Vec<FitnessReport>,
) -> Result<(), CoevolutionError> {
    if reports.len() != networks.len() {
        return Err(CoevolutionError::ReportCount {
            expected: networks.len(),
            got: reports.len(),
        });
    }
    let by_id: BTreeMap<u64, f64> = reports.iter().map(|r| (r.network_id, r.fitness)).collect();
    for r in records.iter_mut().filter(|r| r.fitness.is_none()) {
        let f = by_id.get(&r.network_id).copied().unwrap_or(FITNESS_FLOOR);
        r.fitness = Some(if f.is_finite() { f } else { FITNESS_FLOOR });
    }
    Ok(())
}

pub(crate) fn best_record(records: &[AssemblyRecord]) -> Option<&AssemblyRecord> {
    let mut best: Option<&AssemblyRecord> = None;
    for r in records {
        let Some(f) = r.fitness else { continue };
        if best.is_none_or(|b| f > b.fitness.unwrap_or(f64::NEG_INFINITY)) {
            best = Some(r);
        }
    }
    best
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Per-member mean fitness.
pub type Attribution = BTreeMap<MemberId, f64>;

/// Mean fitness of the networks each blueprint and each module took part in.
/// A module used under several species pointers of one record counts once for
/// that record.
pub fn attribute_fitness(
    records: &[AssemblyRecord],
) -> Result<(Attribution, Attribution), CoevolutionError> {
    if records.is_empty() {
        return Err(CoevolutionError::NoRecords);
    }
    let mut bp: BTreeMap<MemberId, Vec<f64>> = BTreeMap::new();
    let mut md: BTreeMap<MemberId, Vec<f64>> = BTreeMap::new();
    for r in records {
        let f = r.fitness.ok_or(CoevolutionError::MissingFitness(r.network_id))?;
        bp.entry(r.blueprint_id).or_default().push(f);
        let used: BTreeSet<MemberId> = r.module_choice.values().copied().collect();
        for m in used {
            md.entry(m).or_default().push(f);
        }
    }
    let mean = |m: BTreeMap<MemberId, Vec<f64>>| {
        m.into_iter()
            .map(|(k, v)| (k, compensated_sum(&v) / v.len() as f64))
            .collect::<BTreeMap<_, _>>()
    };
    Ok((mean(bp), mean(md)))
}

/// Sets attributed module fitness; modules that took part in no network get
/// the mean of their species' attributed members, else the mean over all
/// attributed modules, else the floor.
fn fill_module_fitness(
    modules: &mut Population<ModuleChromosome>,
    attributed: &BTreeMap<MemberId, f64>,
) -> Result<(), CoevolutionError> {
    let all: Vec<f64> = attributed.values().copied().collect();
    let global_mean = if all.is_empty() {
        FITNESS_FLOOR
    } else {
        compensated_sum(&all) / all.len() as f64
    };
    let mut assignments = Vec::new();
    let mut unevaluated = 0;
    for s in &modules.species {
        let known: Vec<f64> = s.members.iter().filter_map(|m| attributed.get(&m.id).copied()).collect();
        let fallback = if known.is_empty() {
            global_mean
        } else {
            compensated_sum(&known) / known.len() as f64
        };
        for m in &s.members {
            let f = match attributed.get(&m.id) {
                Some(f) => *f,
                None => {
                    unevaluated += 1;
                    fallback
                }
            };
            assignments.push((m.id, f));
        }
    }
    if unevaluated > 0 {
        log::debug!("{unevaluated} modules took part in no network; using species means");
    }
    for (id, f) in assignments {
        modules.set_fitness(id, f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::Shape;
    use crate::evaluator::{InProcess, ParamTarget, StructuralTarget, Surrogate};
    use crate::hyperparams::{HyperparameterSpec, LayerKind};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn space() -> HyperparameterSpace {
        HyperparameterSpace {
            layer_kinds: vec![LayerKind::Dense],
            node_params: vec![HyperparameterSpec::integer("layer_size", 8, 64)],
            global_params: vec![HyperparameterSpec::real("learning_rate", 0.0001, 0.1)],
        }
    }

    fn io() -> IoSpec {
        IoSpec {
            input: Shape::vector(4),
            output_units: 2,
        }
    }

    fn record(bp: u64, modules: &[(u64, u64)], fitness: f64) -> AssemblyRecord {
        AssemblyRecord {
            generation: 0,
            network_id: 0,
            blueprint_id: MemberId(bp),
            module_choice: modules.iter().map(|(s, m)| (SpeciesId(*s), MemberId(*m))).collect(),
            fitness: Some(fitness),
        }
    }

    #[test]
    fn attribution_examples() {
        let records = vec![record(0, &[(0, 5)], 0.5), record(1, &[(0, 5), (1, 6)], 0.7)];
        let (bp, md) = attribute_fitness(&records).unwrap();
        assert!((md[&MemberId(5)] - 0.6).abs() < 1e-15);
        assert_eq!(md[&MemberId(6)], 0.7);
        assert_eq!(bp[&MemberId(0)], 0.5);
        assert!(matches!(attribute_fitness(&[]), Err(CoevolutionError::NoRecords)));
    }

    proptest! {
        #[test]
        fn attribution_matches_brute_force(
            raw in proptest::collection::vec((0u64..5, proptest::collection::vec((0u64..4, 0u64..8), 1..4), 0.0f64..1.0), 1..40)
        ) {
            let records: Vec<AssemblyRecord> = raw.iter().map(|(b, m, f)| record(*b, m, *f)).collect();
            let (bp, md) = attribute_fitness(&records).unwrap();
            for id in 0..8u64 {
                let (mut sum, mut n) = (0.0, 0);
                for r in &records {
                    if r.module_choice.values().any(|m| m.0 == id) {
                        sum += r.fitness.unwrap();
                        n += 1;
                    }
                }
                match md.get(&MemberId(id)) {
                    Some(v) => prop_assert!((v - sum / n as f64).abs() < 1e-12),
                    None => prop_assert_eq!(n, 0),
                }
            }
            for id in 0..5u64 {
                let fits: Vec<f64> = records.iter().filter(|r| r.blueprint_id.0 == id).map(|r| r.fitness.unwrap()).collect();
                if let Some(v) = bp.get(&MemberId(id)) {
                    prop_assert!((v - fits.iter().sum::<f64>() / fits.len() as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn round_robin_blueprints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let config = CoevolutionConfig::default();
        let mut co = CoPopulations::new(&space(), 25, 45, 100, &config, &mut rng).unwrap();
        let records = co.sample_assemblies(&mut rng).unwrap();
        assert_eq!(records.len(), 100);
        let mut counts: BTreeMap<MemberId, usize> = BTreeMap::new();
        for r in &records {
            *counts.entry(r.blueprint_id).or_default() += 1;
        }
        assert_eq!(counts.len(), 25);
        assert!(counts.values().all(|c| *c == 4));
    }

    #[test]
    fn singleton_populations_are_determined() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = CoevolutionConfig::default();
        let mut co = CoPopulations::new(&space(), 1, 1, 3, &config, &mut rng).unwrap();
        let records = co.sample_assemblies(&mut rng).unwrap();
        for r in &records {
            assert_eq!(r.blueprint_id, MemberId(0));
            assert_eq!(r.module_choice.values().copied().collect::<Vec<_>>(), vec![MemberId(0)]);
        }
    }

    #[test]
    fn dangling_pointers_are_repaired_and_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let config = CoevolutionConfig::default();
        let mut co = CoPopulations::new(&space(), 3, 4, 3, &config, &mut rng).unwrap();
        let node = &mut co.blueprints.species[0].members[0].genome.nodes[2];
        node.payload = Some(ModuleSlot { species: SpeciesId(999) });
        assert_eq!(co.repair_pointers(&mut rng).unwrap(), 1);
        let live = co.modules.species_ids();
        let slot = co.blueprints.species[0].members[0].genome.nodes[2].payload.unwrap();
        assert!(live.contains(&slot.species));
        assert_eq!(co.repair_pointers(&mut rng).unwrap(), 0);
    }

    fn surrogate() -> InProcess {
        InProcess::new(Arc::new(Surrogate::new(StructuralTarget {
            depth: 4,
            depth_weight: 0.5,
            param_weight: 1.0,
            params: vec![ParamTarget {
                name: "layer_size".into(),
                value: 32.0,
                scale: 32.0,
            }],
        })))
    }

    fn run(seed: u64, gens: usize) -> (CoPopulations, Vec<GenerationOutcome>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut config = CoevolutionConfig::default();
        config.module_rates.add_node = 0.2;
        config.blueprint_rates.add_node = 0.2;
        let sp = space();
        let mut co = CoPopulations::new(&sp, 8, 12, 16, &config, &mut rng).unwrap();
        let mut eval = surrogate();
        let mut outcomes = Vec::new();
        for _ in 0..gens {
            let out = co
                .evolve_generation(
                    &mut eval,
                    &EvaluationBudget::default(),
                    &config,
                    &sp,
                    &MergePolicy::default(),
                    &io(),
                    &mut rng,
                )
                .unwrap();
            assert_eq!(co.blueprints.len(), 8);
            assert_eq!(co.modules.len(), 12);
            outcomes.push(out);
        }
        (co, outcomes)
    }

    #[test]
    fn generations_are_deterministic_and_same_species_same_module() {
        let (a, oa) = run(5, 5);
        let (b, ob) = run(5, 5);
        assert_eq!(
            crate::canonical::to_canonical_string(&a).unwrap(),
            crate::canonical::to_canonical_string(&b).unwrap()
        );
        assert_eq!(oa, ob);
        for out in &oa {
            assert_eq!(out.records.len(), 16);
            let (record, net) = out.best.as_ref().unwrap();
            for inst in &net.modules {
                assert_eq!(record.module_choice[&inst.species], inst.module);
            }
        }
    }
}
