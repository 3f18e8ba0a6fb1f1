//! Run orchestration: generation loop, checkpoints, artifacts, inspection.
//!
//! An output directory holds
//!
//! - `checkpoint_latest.json` and `checkpoints/gen_NNNN.json`: full state at
//!   the start of generation NNNN, as canonical JSON;
//! - `records/gen_NNNN.jsonl`: one assembly record per line;
//! - `fitness.csv`: per-generation best, mean and best-so-far fitness;
//! - `best.json` and `best.dot`: the best network found.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{assemble_chromosome, to_dot, to_json, AssembledNetwork, AssemblyError};
use crate::canonical::to_canonical_bytes;
use crate::coevolution::{AssemblyRecord, CoPopulations, CoevolutionError};
use crate::config::{Backend, ConfigError, EvolutionConfig, Mode};
use crate::deepneat::DeepNeat;
use crate::distrib::{DistribError, Master, WorkerOptions};
use crate::evaluator::{BatchEvaluator, EvaluationBudget, InProcess};
use crate::genome::NodeRole;
use crate::speciation::{Genome, Population};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Evolution(#[from] CoevolutionError),
    #[error(transparent)]
    Distrib(#[from] DistribError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Engine {
    Codeepneat(CoPopulations),
    Deepneat(DeepNeat),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub generation: u64,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub best_so_far: f64,
    pub blueprint_species: usize,
    pub module_species: usize,
    pub evaluations: usize,
}

/// Best network seen so far and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Champion {
    pub record: AssemblyRecord,
    pub network: AssembledNetwork,
}

impl Champion {
    pub fn fitness(&self) -> f64 {
        self.record.fitness.unwrap_or(f64::NEG_INFINITY)
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub format: u32,
    pub config: EvolutionConfig,
    pub engine: Engine,
    pub rng: ChaCha8Rng,
    pub history: Vec<GenerationSummary>,
    pub champion: Option<Champion>,
    /// Records of the most recently evaluated generation.
    pub last_records: Vec<AssemblyRecord>,
}

impl RunState {
    pub fn new(config: EvolutionConfig) -> Result<Self, RunError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let engine = match config.mode {
            Mode::Codeepneat => Engine::Codeepneat(CoPopulations::new(
                &config.space,
                config.blueprints,
                config.modules,
                config.assembly_count,
                &config.coevolution(),
                &mut rng,
            )?),
            Mode::Deepneat => Engine::Deepneat(DeepNeat::new(
                &config.space,
                config.blueprints,
                &config.blueprint_speciation,
                &mut rng,
            )?),
        };
        Ok(Self {
            format: CHECKPOINT_FORMAT,
            config,
            engine,
            rng,
            history: Vec::new(),
            champion: None,
            last_records: Vec::new(),
        })
    }

    /// Index of the next generation to evaluate.
    pub fn generation(&self) -> u64 {
        match &self.engine {
            Engine::Codeepneat(p) => p.generation(),
            Engine::Deepneat(d) => d.generation(),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.generation() >= self.config.generations
    }

    /// Budget for one generation; its seed varies per generation so
    /// stochastic evaluators see fresh but reproducible randomness.
    pub fn budget_for(&self, generation: u64) -> EvaluationBudget {
        let mut b = self.config.budget;
        b.seed = b.seed ^ self.config.seed.rotate_left(32) ^ generation.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        b
    }

    pub fn step(&mut self, evaluator: &mut dyn BatchEvaluator) -> Result<GenerationSummary, RunError> {
        let generation = self.generation();
        let budget = self.budget_for(generation);
        let c = &self.config;
        let outcome = match &mut self.engine {
            Engine::Codeepneat(p) => p.evolve_generation(
                evaluator,
                &budget,
                &c.coevolution(),
                &c.space,
                &c.merge_policy,
                &c.io,
                &mut self.rng,
            )?,
            Engine::Deepneat(d) => d.evolve_generation(
                evaluator,
                &budget,
                &c.blueprint_speciation,
                &c.blueprint_rates,
                &c.space,
                &c.merge_policy,
                &c.io,
                &mut self.rng,
            )?,
        };
        if let Some((record, network)) = &outcome.best {
            let better = self
                .champion
                .as_ref()
                .is_none_or(|ch| record.fitness.unwrap_or(f64::NEG_INFINITY) > ch.fitness());
            if better {
                self.champion = Some(Champion {
                    record: record.clone(),
                    network: network.clone(),
                });
            }
        }
        let (blueprint_species, module_species) = self.species_counts();
        let summary = GenerationSummary {
            generation,
            best_fitness: outcome.best_fitness().unwrap_or(0.0),
            mean_fitness: outcome.mean_fitness(),
            best_so_far: self.champion.as_ref().map_or(0.0, Champion::fitness),
            blueprint_species,
            module_species,
            evaluations: outcome.records.len(),
        };
        self.history.push(summary.clone());
        self.last_records = outcome.records;
        Ok(summary)
    }

    pub fn species_counts(&self) -> (usize, usize) {
        match &self.engine {
            Engine::Codeepneat(p) => (p.blueprints.species.len(), p.modules.species.len()),
            Engine::Deepneat(d) => (d.population.species.len(), 0),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        to_canonical_bytes(self).expect("run state always serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RunError> {
        let state: Self = serde_json::from_slice(bytes).map_err(|e| RunError::Checkpoint(e.to_string()))?;
        if state.format != CHECKPOINT_FORMAT {
            return Err(RunError::Checkpoint(format!("unsupported format {}", state.format)));
        }
        state.config.validate()?;
        Ok(state)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }

    /// The champion, or before any evaluation a network built from the
    /// first blueprint and the first module of each species it uses.
    pub fn best_network(&self) -> Result<(Option<AssemblyRecord>, AssembledNetwork), RunError> {
        if let Some(ch) = &self.champion {
            return Ok((Some(ch.record.clone()), ch.network.clone()));
        }
        let c = &self.config;
        match &self.engine {
            Engine::Codeepneat(p) => {
                let bp = p.blueprints.members().next().ok_or(RunError::NotFound("blueprint".into()))?;
                let mut module_choice = BTreeMap::new();
                for n in bp.genome.nodes.iter().filter(|n| n.role == NodeRole::Hidden && n.enabled) {
                    if let Some(slot) = n.payload {
                        let m = p
                            .modules
                            .species(slot.species)
                            .and_then(|s| s.members.first())
                            .ok_or_else(|| RunError::NotFound(format!("module species {}", slot.species.0)))?;
                        module_choice.insert(slot.species, m.id);
                    }
                }
                let record = AssemblyRecord {
                    generation: p.generation(),
                    network_id: 0,
                    blueprint_id: bp.id,
                    module_choice,
                    fitness: None,
                };
                let net = p.assemble_record(&record, &c.merge_policy, &c.io)?;
                Ok((None, net))
            }
            Engine::Deepneat(d) => {
                let m = d.population.members().next().ok_or(RunError::NotFound("member".into()))?;
                Ok((None, assemble_chromosome(&m.genome, &c.merge_policy, &c.io)?))
            }
        }
    }
}

pub fn build_evaluator(config: &EvolutionConfig) -> Result<Box<dyn BatchEvaluator>, RunError> {
    Ok(match &config.backend {
        Backend::InProcess => Box::new(InProcess::new(config.evaluator.build())),
        Backend::Local { workers } => Box::new(Master::local(
            config.evaluator.clone(),
            config.scheduler.clone(),
            vec![WorkerOptions::default(); *workers],
        )?),
        Backend::Listen { address } => {
            let m = Master::listen(address, config.evaluator.clone(), config.scheduler.clone())?;
            if let Some(addr) = m.local_addr() {
                log::info!("waiting for workers on {addr}");
            }
            Box::new(m)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub generations_completed: u64,
    pub finished: bool,
    pub best_fitness: Option<f64>,
    pub best_network_id: Option<u64>,
    pub output: PathBuf,
}

/// A run bound to an output directory and an evaluator.
pub struct Run {
    pub state: RunState,
    out: PathBuf,
    evaluator: Box<dyn BatchEvaluator>,
}

impl Run {
    /// Starts a fresh run and writes the generation-0 checkpoint.
    pub fn start(config: EvolutionConfig, out: &Path, evaluator: Box<dyn BatchEvaluator>) -> Result<Self, RunError> {
        let run = Self {
            state: RunState::new(config)?,
            out: out.to_path_buf(),
            evaluator,
        };
        for dir in [out.to_path_buf(), out.join("checkpoints"), out.join("records")] {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let cfg = out.join("config.toml");
        fs::write(&cfg, run.state.config.to_toml_string()).map_err(io_err(&cfg))?;
        run.checkpoint(true)?;
        Ok(run)
    }

    pub fn resume(state: RunState, out: &Path, evaluator: Box<dyn BatchEvaluator>) -> Result<Self, RunError> {
        for dir in [out.to_path_buf(), out.join("checkpoints"), out.join("records")] {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(Self {
            state,
            out: out.to_path_buf(),
            evaluator,
        })
    }

    pub fn output(&self) -> &Path {
        &self.out
    }

    fn write(&self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<(), RunError> {
        let path = self.out.join(rel);
        fs::write(&path, bytes).map_err(io_err(&path))
    }

    fn checkpoint(&self, numbered: bool) -> Result<(), RunError> {
        let bytes = self.state.to_bytes();
        if numbered {
            self.write(format!("checkpoints/gen_{:04}.json", self.state.generation()), &bytes)?;
        }
        self.write("checkpoint_latest.json", &bytes)
    }

    fn write_generation(&self, summary: &GenerationSummary) -> Result<(), RunError> {
        let mut lines = Vec::new();
        for r in &self.state.last_records {
            lines.extend(to_canonical_bytes(r).expect("records serialize"));
            lines.push(b'\n');
        }
        self.write(format!("records/gen_{:04}.jsonl", summary.generation), &lines)?;
        self.write("fitness.csv", fitness_csv(&self.state.history).as_bytes())
    }

    fn write_best(&self) -> Result<(), RunError> {
        if let Some(ch) = &self.state.champion {
            self.write("best.json", &to_json(&ch.network))?;
            self.write("best.dot", to_dot(&ch.network).as_bytes())?;
        }
        Ok(())
    }

    /// Runs generations until the configured limit, or until generation
    /// `stop_after` has been reached.
    pub fn run(&mut self, stop_after: Option<u64>) -> Result<RunSummary, RunError> {
        let limit = stop_after.map_or(self.state.config.generations, |s| s.min(self.state.config.generations));
        while self.state.generation() < limit {
            let summary = self.state.step(&mut *self.evaluator)?;
            log::info!(
                "generation {}: best {:.4} mean {:.4} best-so-far {:.4} species {}/{}",
                summary.generation,
                summary.best_fitness,
                summary.mean_fitness,
                summary.best_so_far,
                summary.blueprint_species,
                summary.module_species
            );
            self.write_generation(&summary)?;
            let next = self.state.generation();
            let numbered = next.is_multiple_of(self.state.config.checkpoint_every) || next == limit;
            self.checkpoint(numbered)?;
            self.write_best()?;
        }
        Ok(self.summary())
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            generations_completed: self.state.generation(),
            finished: self.state.is_finished(),
            best_fitness: self.state.champion.as_ref().map(Champion::fitness),
            best_network_id: self.state.champion.as_ref().map(|c| c.record.network_id),
            output: self.out.clone(),
        }
    }
}

pub fn fitness_csv(history: &[GenerationSummary]) -> String {
    let mut s = String::from("generation,best,mean,best_so_far,blueprint_species,module_species,evaluations\n");
    for h in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            h.generation,
            h.best_fitness,
            h.mean_fitness,
            h.best_so_far,
            h.blueprint_species,
            h.module_species,
            h.evaluations
        );
    }
    s
}

/// Human-readable summary of the best network.
pub fn describe_best(state: &RunState) -> Result<String, RunError> {
    let (record, net) = state.best_network()?;
    let mut s = String::new();
    match &record {
        Some(r) => {
            let _ = writeln!(
                s,
                "best network {} (generation {}, fitness {})",
                r.network_id,
                r.generation,
                r.fitness.unwrap_or(0.0)
            );
        }
        None => {
            let _ = writeln!(s, "no evaluated network yet; showing the first member of generation {}", state.generation());
        }
    }
    let compute = net.layers.iter().filter(|l| l.op.is_compute()).count();
    let _ = writeln!(s, "layers: {} ({compute} compute), depth {}", net.layers.len(), net.depth());
    for (module, count) in net.module_counts() {
        let _ = writeln!(s, "module {} used {count}x", module.0);
    }
    for l in &net.layers {
        let _ = writeln!(s, "  [{}] {} -> {}", l.id, l.op.name(), l.output);
    }
    Ok(s)
}

fn describe_population<G: Genome>(s: &mut String, label: &str, p: &Population<G>) {
    let total: usize = p.species.iter().map(|sp| sp.members.len()).sum();
    let _ = writeln!(s, "{label}: {} species, {total} members", p.species.len());
    for sp in &p.species {
        let _ = writeln!(
            s,
            "  species {}: {} members, best {}, staleness {}",
            sp.id.0,
            sp.members.len(),
            sp.best_fitness.map_or("-".to_string(), |f| format!("{f:.4}")),
            sp.staleness
        );
    }
}

pub fn describe_species(state: &RunState) -> String {
    let mut s = String::new();
    match &state.engine {
        Engine::Codeepneat(p) => {
            describe_population(&mut s, "blueprints", &p.blueprints);
            describe_population(&mut s, "modules", &p.modules);
        }
        Engine::Deepneat(d) => describe_population(&mut s, "population", &d.population),
    }
    s
}

/// Record `n` (0-based) of the last evaluated generation, as the same
/// canonical JSON line written to the records file.
pub fn record_line(state: &RunState, n: usize) -> Result<String, RunError> {
    let r = state
        .last_records
        .get(n)
        .ok_or_else(|| RunError::NotFound(format!("record {n}")))?;
    Ok(String::from_utf8(to_canonical_bytes(r).expect("records serialize")).expect("JSON is UTF-8"))
}
