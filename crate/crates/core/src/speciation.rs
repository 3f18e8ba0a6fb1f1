//! Species bookkeeping, offspring allocation and per-species reproduction.
//!
//! [`Population`] is generic over the genome so the same machinery drives the
//! blueprint population, the module population and single-population
//! DeepNEAT runs.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genome::{CompatibilityCoefficients, MutationContext, SpeciesId};
use crate::hyperparams::HyperparameterSpace;

pub const DEFAULT_THRESHOLD: f64 = 0.6;
pub const DEFAULT_STALENESS_LIMIT: u32 = 15;

/// What the population machinery needs from a chromosome.
pub trait Genome: Clone + fmt::Debug + PartialEq + Serialize + DeserializeOwned + Send + Sync {
    fn compatibility(&self, other: &Self, coeffs: &CompatibilityCoefficients, space: &HyperparameterSpace) -> f64;
    /// Child of `self` and `other`; disjoint and excess genes follow the fitter parent.
    fn recombine(&self, other: &Self, fitness_self: f64, fitness_other: f64, rng: &mut dyn RngCore) -> Self;
    fn mutate(&mut self, ctx: &mut MutationContext<'_>);
}

#[derive(Debug, Error, PartialEq)]
pub enum SpeciationError {
    #[error("member {0} has no fitness")]
    MissingFitness(MemberId),
    #[error("member {0} has non-finite fitness {1}")]
    NonFinite(MemberId, f64),
    #[error("unknown member {0}")]
    UnknownMember(MemberId),
    #[error("population is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MemberId(pub u64);

impl fmt::Display for MemberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "G: Genome")]
pub struct Member<G> {
    pub id: MemberId,
    pub genome: G,
    pub fitness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "G: Genome")]
pub struct Species<G> {
    pub id: SpeciesId,
    pub representative: G,
    pub members: Vec<Member<G>>,
    /// Best member fitness this species has ever reached.
    pub best_fitness: Option<f64>,
    /// Generations since `best_fitness` last improved.
    pub staleness: u32,
}

impl<G: Genome> Species<G> {
    fn max_fitness(&self) -> Option<f64> {
        self.members.iter().filter_map(|m| m.fitness).reduce(f64::max)
    }

    /// Shared fitness mass: sum of member fitness divided by species size.
    pub fn adjusted_mass(&self) -> f64 {
        if self.members.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.members.iter().map(|m| m.fitness.unwrap_or(0.0).max(0.0)).sum();
        sum / self.members.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeciationConfig {
    pub threshold: f64,
    pub coefficients: CompatibilityCoefficients,
    /// Fraction of each species (worst first) kept out of the mating pool.
    pub cull_fraction: f64,
    pub elitism: usize,
    pub staleness_limit: u32,
    /// Probability that an offspring comes from crossover rather than cloning.
    pub crossover_rate: f64,
}

impl Default for SpeciationConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            coefficients: CompatibilityCoefficients::default(),
            cull_fraction: 0.5,
            elitism: 1,
            staleness_limit: DEFAULT_STALENESS_LIMIT,
            crossover_rate: 1.0,
        }
    }
}

/// Places each individual in the first species (by id) whose representative
/// is within `threshold`, founding new species as needed. Species founded
/// during this pass are candidates for later individuals. Prior species that
/// end up empty are dropped; survivors keep their history and take their
/// first member as the next representative.
pub fn speciate<G: Genome>(
    individuals: Vec<Member<G>>,
    prior: &[Species<G>],
    threshold: f64,
    coeffs: &CompatibilityCoefficients,
    space: &HyperparameterSpace,
    next_species_id: &mut u64,
) -> Vec<Species<G>> {
    let mut species: Vec<Species<G>> = prior
        .iter()
        .map(|s| Species {
            id: s.id,
            representative: s.representative.clone(),
            members: Vec::new(),
            best_fitness: s.best_fitness,
            staleness: s.staleness,
        })
        .collect();
    species.sort_by_key(|s| s.id);
    for member in individuals {
        let home = species
            .iter()
            .position(|s| s.representative.compatibility(&member.genome, coeffs, space) < threshold);
        match home {
            Some(i) => species[i].members.push(member),
            None => {
                let id = SpeciesId(*next_species_id);
                *next_species_id += 1;
                species.push(Species {
                    id,
                    representative: member.genome.clone(),
                    members: vec![member],
                    best_fitness: None,
                    staleness: 0,
                });
            }
        }
    }
    species.retain(|s| !s.members.is_empty());
    for s in &mut species {
        s.representative = s.members[0].genome.clone();
    }
    species
}

/// Splits `total` offspring among `species` in proportion to their shared
/// fitness mass, using largest-remainder rounding. Species in `excluded` get
/// nothing; every other species gets at least one while `total` allows.
pub fn allocate_offspring<G: Genome>(
    species: &[Species<G>],
    total: usize,
    excluded: &[SpeciesId],
) -> BTreeMap<SpeciesId, usize> {
    let mut out: BTreeMap<SpeciesId, usize> = species.iter().map(|s| (s.id, 0)).collect();
    let mut eligible: Vec<(SpeciesId, f64)> = species
        .iter()
        .filter(|s| !excluded.contains(&s.id))
        .map(|s| (s.id, s.adjusted_mass()))
        .collect();
    if eligible.is_empty() || total == 0 {
        return out;
    }
    if eligible.len() > total {
        // more species than slots: the heaviest ones get a single slot each
        eligible.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (id, _) in eligible.into_iter().take(total) {
            out.insert(id, 1);
        }
        return out;
    }
    let mass: f64 = eligible.iter().map(|(_, m)| m).sum();
    let shares: Vec<f64> = if mass > 0.0 && mass.is_finite() {
        eligible.iter().map(|(_, m)| m / mass * total as f64).collect()
    } else {
        vec![total as f64 / eligible.len() as f64; eligible.len()]
    };
    let mut counts: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    // guarantee one slot each, taken from the currently largest allocation
    for i in 0..counts.len() {
        if counts[i] == 0 {
            let donor = (0..counts.len())
                .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                .expect("non-empty");
            counts[donor] -= 1;
            counts[i] = 1;
        }
    }
    for ((id, _), n) in eligible.iter().zip(counts) {
        out.insert(*id, n);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "G: Genome")]
pub struct Population<G> {
    pub species: Vec<Species<G>>,
    pub generation: u64,
    pub size: usize,
    next_member: u64,
    next_species: u64,
}

impl<G: Genome> Population<G> {
    pub fn new(
        genomes: Vec<G>,
        config: &SpeciationConfig,
        space: &HyperparameterSpace,
    ) -> Result<Self, SpeciationError> {
        if genomes.is_empty() {
            return Err(SpeciationError::Empty);
        }
        let size = genomes.len();
        let members = genomes
            .into_iter()
            .enumerate()
            .map(|(i, genome)| Member {
                id: MemberId(i as u64),
                genome,
                fitness: None,
            })
            .collect();
        let mut next_species = 0;
        let species = speciate(
            members,
            &[],
            config.threshold,
            &config.coefficients,
            space,
            &mut next_species,
        );
        Ok(Self {
            species,
            generation: 0,
            size,
            next_member: size as u64,
            next_species,
        })
    }

    pub fn members(&self) -> impl Iterator<Item = &Member<G>> {
        self.species.iter().flat_map(|s| s.members.iter())
    }

    pub fn len(&self) -> usize {
        self.species.iter().map(|s| s.members.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn member(&self, id: MemberId) -> Option<&Member<G>> {
        self.members().find(|m| m.id == id)
    }

    pub fn species_of(&self, id: MemberId) -> Option<SpeciesId> {
        self.species
            .iter()
            .find(|s| s.members.iter().any(|m| m.id == id))
            .map(|s| s.id)
    }

    pub fn species(&self, id: SpeciesId) -> Option<&Species<G>> {
        self.species.iter().find(|s| s.id == id)
    }

    pub fn species_mut(&mut self, id: SpeciesId) -> Option<&mut Species<G>> {
        self.species.iter_mut().find(|s| s.id == id)
    }

    pub fn species_ids(&self) -> Vec<SpeciesId> {
        self.species.iter().map(|s| s.id).collect()
    }

    pub fn set_fitness(&mut self, id: MemberId, fitness: f64) -> Result<(), SpeciationError> {
        if !fitness.is_finite() {
            return Err(SpeciationError::NonFinite(id, fitness));
        }
        let member = self
            .species
            .iter_mut()
            .flat_map(|s| s.members.iter_mut())
            .find(|m| m.id == id)
            .ok_or(SpeciationError::UnknownMember(id))?;
        member.fitness = Some(fitness);
        Ok(())
    }

    /// Fittest member; ties go to the earlier species and member.
    pub fn best(&self) -> Option<&Member<G>> {
        let mut best: Option<&Member<G>> = None;
        for m in self.members() {
            let Some(f) = m.fitness else { continue };
            if best.is_none_or(|b| f > b.fitness.unwrap_or(f64::NEG_INFINITY)) {
                best = Some(m);
            }
        }
        best
    }

    /// Produces the next generation in place. Every member must carry a
    /// fitness. The registry in `ctx` moves to a new generation first, so
    /// identical structural events during this call share innovation ids.
    pub fn reproduce(
        &mut self,
        config: &SpeciationConfig,
        ctx: &mut MutationContext<'_>,
    ) -> Result<(), SpeciationError> {
        for m in self.members() {
            match m.fitness {
                None => return Err(SpeciationError::MissingFitness(m.id)),
                Some(f) if !f.is_finite() => return Err(SpeciationError::NonFinite(m.id, f)),
                _ => {}
            }
        }
        ctx.registry.advance_generation();

        for s in &mut self.species {
            let gen_best = s.max_fitness();
            if gen_best.is_some_and(|f| s.best_fitness.is_none_or(|b| f > b)) {
                s.best_fitness = gen_best;
                s.staleness = 0;
            } else {
                s.staleness += 1;
            }
        }
        let champion = self.best().map(|m| m.id);
        let champion_species = champion.and_then(|id| self.species_of(id));
        let stale: Vec<SpeciesId> = self
            .species
            .iter()
            .filter(|s| s.staleness >= config.staleness_limit && Some(s.id) != champion_species)
            .map(|s| s.id)
            .collect();
        let allocation = allocate_offspring(&self.species, self.size, &stale);

        let mut next = Vec::with_capacity(self.size);
        for s in &self.species {
            let n = allocation.get(&s.id).copied().unwrap_or(0);
            if n == 0 {
                continue;
            }
            let mut ranked: Vec<&Member<G>> = s.members.iter().collect();
            ranked.sort_by(|a, b| b.fitness.unwrap_or(0.0).total_cmp(&a.fitness.unwrap_or(0.0)));
            let elites = config.elitism.min(n).min(ranked.len());
            for m in &ranked[..elites] {
                next.push(Member {
                    id: m.id,
                    genome: m.genome.clone(),
                    fitness: None,
                });
            }
            let keep = ((ranked.len() as f64) * (1.0 - config.cull_fraction)).ceil() as usize;
            let pool = &ranked[..keep.clamp(1, ranked.len())];
            for _ in elites..n {
                let a = *pool.choose(ctx.rng).expect("pool non-empty");
                let mut child = if pool.len() > 1 && ctx.rng.random_bool(config.crossover_rate.clamp(0.0, 1.0)) {
                    let b = loop {
                        let b = *pool.choose(ctx.rng).expect("pool non-empty");
                        if b.id != a.id {
                            break b;
                        }
                    };
                    a.genome.recombine(
                        &b.genome,
                        a.fitness.unwrap_or(0.0),
                        b.fitness.unwrap_or(0.0),
                        ctx.rng,
                    )
                } else {
                    a.genome.clone()
                };
                child.mutate(ctx);
                next.push(Member {
                    id: MemberId(self.next_member),
                    genome: child,
                    fitness: None,
                });
                self.next_member += 1;
            }
        }

        self.species = speciate(
            next,
            &self.species,
            config.threshold,
            &config.coefficients,
            ctx.space,
            &mut self.next_species,
        );
        self.generation += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{minimal_chromosome, InnovationRegistry, ModuleChromosome, MutationRates};
    use crate::hyperparams::{HyperparameterSpec, LayerKind};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space() -> HyperparameterSpace {
        HyperparameterSpace {
            layer_kinds: vec![LayerKind::Dense],
            node_params: vec![HyperparameterSpec::integer("layer_size", 8, 64)],
            global_params: vec![],
        }
    }

    fn member(id: u64, genome: ModuleChromosome, fitness: f64) -> Member<ModuleChromosome> {
        Member {
            id: MemberId(id),
            genome,
            fitness: Some(fitness),
        }
    }

    fn species_with(id: u64, fitnesses: &[f64]) -> Species<ModuleChromosome> {
        let g = minimal_chromosome(&space(), &mut ChaCha8Rng::seed_from_u64(id));
        Species {
            id: SpeciesId(id),
            representative: g.clone(),
            members: fitnesses
                .iter()
                .enumerate()
                .map(|(i, f)| member(id * 100 + i as u64, g.clone(), *f))
                .collect(),
            best_fitness: None,
            staleness: 0,
        }
    }

    #[test]
    fn identical_individuals_form_one_species() {
        let g = minimal_chromosome(&space(), &mut ChaCha8Rng::seed_from_u64(1));
        let members = (0..10).map(|i| member(i, g.clone(), 0.0)).collect();
        let mut next = 0;
        let s = speciate(members, &[], 0.6, &CompatibilityCoefficients::default(), &space(), &mut next);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].members.len(), 10);
    }

    #[test]
    fn distant_clusters_split() {
        let sp = space();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = minimal_chromosome(&sp, &mut rng);
        let mut b = a.clone();
        let mut registry = InnovationRegistry::new();
        for _ in 0..10 {
            b.mutate_add_node(&mut registry, &mut rng, |r| crate::genome::Layer::sample(&sp, r));
            b.mutate_add_edge(&mut registry, &mut rng);
        }
        let coeffs = CompatibilityCoefficients::default();
        assert!(a.compatibility(&b, &coeffs, &sp) > 0.5);
        let members = vec![member(0, a.clone(), 0.0), member(1, b.clone(), 0.0), member(2, a, 0.0), member(3, b, 0.0)];
        let mut next = 0;
        let s = speciate(members, &[], 0.5, &coeffs, &sp, &mut next);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].members.len(), 2);
        assert_eq!(s[1].members.len(), 2);
    }

    #[test]
    fn allocation_examples() {
        let one = [species_with(0, &[0.3, 0.1])];
        assert_eq!(allocate_offspring(&one, 30, &[])[&SpeciesId(0)], 30);
        let two = [species_with(0, &[2.0, 2.0]), species_with(1, &[1.0, 1.0])];
        let a = allocate_offspring(&two, 30, &[]);
        assert_eq!((a[&SpeciesId(0)], a[&SpeciesId(1)]), (20, 10));
        let zero = [species_with(0, &[0.0]), species_with(1, &[0.0, 0.0])];
        let a = allocate_offspring(&zero, 10, &[]);
        assert_eq!((a[&SpeciesId(0)], a[&SpeciesId(1)]), (5, 5));
        let a = allocate_offspring(&two, 30, &[SpeciesId(1)]);
        assert_eq!((a[&SpeciesId(0)], a[&SpeciesId(1)]), (30, 0));
    }

    proptest! {
        #[test]
        fn allocation_conserves_total(
            fits in proptest::collection::vec(proptest::collection::vec(0.0f64..10.0, 1..5), 1..8),
            extra in 0usize..50,
        ) {
            let species: Vec<_> = fits.iter().enumerate().map(|(i, f)| species_with(i as u64, f)).collect();
            let total = species.len() + extra;
            let a = allocate_offspring(&species, total, &[]);
            prop_assert_eq!(a.values().sum::<usize>(), total);
            prop_assert!(a.values().all(|&n| n >= 1));
        }
    }

    fn run_generations(seed: u64, gens: usize) -> Population<ModuleChromosome> {
        let sp = space();
        let config = SpeciationConfig::default();
        let rates = MutationRates {
            add_node: 0.3,
            add_edge: 0.3,
            ..MutationRates::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut registry = InnovationRegistry::new();
        let genomes = (0..20).map(|_| minimal_chromosome(&sp, &mut rng)).collect();
        let mut pop = Population::new(genomes, &config, &sp).unwrap();
        for _ in 0..gens {
            let scores: Vec<(MemberId, f64)> = pop
                .members()
                .map(|m| (m.id, m.genome.nodes.len() as f64 + m.genome.edges.len() as f64 * 0.1))
                .collect();
            for (id, f) in scores {
                pop.set_fitness(id, f).unwrap();
            }
            let mut ctx = MutationContext {
                registry: &mut registry,
                rng: &mut rng,
                space: &sp,
                rates: &rates,
                module_species: &[],
            };
            pop.reproduce(&config, &mut ctx).unwrap();
            assert_eq!(pop.len(), 20);
        }
        pop
    }

    #[test]
    fn reproduction_keeps_size_and_is_deterministic() {
        for seed in 0..10 {
            let a = run_generations(seed, 8);
            let b = run_generations(seed, 8);
            assert_eq!(
                crate::canonical::to_canonical_string(&a).unwrap(),
                crate::canonical::to_canonical_string(&b).unwrap()
            );
            let mut ids: Vec<_> = a.members().map(|m| m.id).collect();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), 20);
        }
    }

    #[test]
    fn elite_survives_unchanged() {
        let sp = space();
        let config = SpeciationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut registry = InnovationRegistry::new();
        let genomes: Vec<_> = (0..6).map(|_| minimal_chromosome(&sp, &mut rng)).collect();
        let mut pop = Population::new(genomes, &config, &sp).unwrap();
        let ids: Vec<_> = pop.members().map(|m| m.id).collect();
        for (i, id) in ids.iter().enumerate() {
            pop.set_fitness(*id, i as f64).unwrap();
        }
        let best = pop.best().unwrap().clone();
        let rates = MutationRates::default();
        let mut ctx = MutationContext {
            registry: &mut registry,
            rng: &mut rng,
            space: &sp,
            rates: &rates,
            module_species: &[],
        };
        pop.reproduce(&config, &mut ctx).unwrap();
        let survivor = pop.member(best.id).expect("elite kept");
        assert_eq!(survivor.genome, best.genome);
    }

    #[test]
    fn stale_species_goes_extinct() {
        let mut stale = species_with(0, &[1.0, 1.0]);
        stale.best_fitness = Some(1.0);
        stale.staleness = 14;
        let mut fresh = species_with(1, &[2.0, 2.0]);
        fresh.best_fitness = Some(1.0);
        let mut pop = Population {
            species: vec![stale, fresh],
            generation: 0,
            size: 4,
            next_member: 1000,
            next_species: 2,
        };
        let sp = space();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut registry = InnovationRegistry::new();
        let rates = MutationRates::default();
        let mut ctx = MutationContext {
            registry: &mut registry,
            rng: &mut rng,
            space: &sp,
            rates: &rates,
            module_species: &[],
        };
        let config = SpeciationConfig::default();
        pop.reproduce(&config, &mut ctx).unwrap();
        assert!(pop.members().all(|m| m.id.0 >= 100));
        assert_eq!(pop.len(), 4);
    }

    #[test]
    fn missing_fitness_is_reported() {
        let sp = space();
        let config = SpeciationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let genomes = (0..3).map(|_| minimal_chromosome(&sp, &mut rng)).collect();
        let mut pop: Population<ModuleChromosome> = Population::new(genomes, &config, &sp).unwrap();
        let mut registry = InnovationRegistry::new();
        let rates = MutationRates::default();
        let mut ctx = MutationContext {
            registry: &mut registry,
            rng: &mut rng,
            space: &sp,
            rates: &rates,
            module_species: &[],
        };
        assert_eq!(
            pop.reproduce(&config, &mut ctx),
            Err(SpeciationError::MissingFitness(MemberId(0)))
        );
    }
}
