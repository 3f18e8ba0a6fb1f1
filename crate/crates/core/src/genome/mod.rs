//! Graph chromosomes for modules and blueprints.
//!
//! Both chromosome kinds share one representation, [`Chromosome`], and differ
//! only in what a hidden node carries: a [`Layer`] for modules (and for
//! single-population DeepNEAT genomes), a [`ModuleSlot`] for blueprints. Input
//! and output nodes carry nothing.
//!
//! Node and connection genes draw their innovation numbers from the same
//! counter, so one id identifies a gene across both lists.

mod crossover;
mod innovation;
mod mutation;
mod operators;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hyperparams::{
    crossover_tables, sample_table, table_distance, HyperparamError, HyperparameterSpace, HyperparameterSpec,
    HyperparameterTable, LayerKind,
};

pub use crossover::{align, compatibility_distance, crossover, CompatibilityCoefficients, GeneAlignment};
pub use innovation::{
    Innovation, InnovationRegistry, SplitIds, INPUT_NODE, MINIMAL_HIDDEN, MINIMAL_INPUT_EDGE, MINIMAL_OUTPUT_EDGE,
    OUTPUT_NODE,
};
pub use mutation::Mutation;
pub use operators::{MutationContext, MutationRates};

/// Identifier of a species within one population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpeciesId(pub u64);

impl fmt::Display for SpeciesId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Input,
    Output,
    Hidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    /// Ordinary feed-forward connection between layers.
    Layer,
    /// Connection between the memory cells of two LSTM layers. Exempt from the
    /// acyclicity check.
    CellSkip,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InvariantViolation {
    #[error("genes are not sorted by innovation or ids repeat")]
    Unsorted,
    #[error("innovation {0} is used by both a node and a connection")]
    SharedId(Innovation),
    #[error("expected exactly one input and one output node, found {inputs} and {outputs}")]
    Boundary { inputs: usize, outputs: usize },
    #[error("boundary node {0} is disabled")]
    DisabledBoundary(Innovation),
    #[error("node {0} has the wrong payload for its role")]
    Payload(Innovation),
    #[error("connection {0} references a missing node")]
    DanglingEdge(Innovation),
    #[error("connection {0} is a self-loop")]
    SelfLoop(Innovation),
    #[error("connection {0} touches a disabled node")]
    DisabledEndpoint(Innovation),
    #[error("connection {0} enters the input or leaves the output")]
    BoundaryEdge(Innovation),
    #[error("connection {0} duplicates an enabled connection")]
    DuplicateEdge(Innovation),
    #[error("cell-skip connection {0} does not join two LSTM nodes")]
    SkipEndpoints(Innovation),
    #[error("enabled connections contain a cycle")]
    Cycle,
    #[error("node {0} is not on any input-to-output path")]
    Unreachable(Innovation),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenomeError {
    #[error(transparent)]
    Invariant(#[from] InvariantViolation),
    #[error("no gene with innovation {0}")]
    UnknownGene(Innovation),
    #[error("connection {0} is not a layer connection")]
    NotLayerConnection(Innovation),
    #[error("cannot connect {from} to {to}")]
    IllegalConnection { from: Innovation, to: Innovation },
    #[error("skip-connection mutation needs two LSTM nodes, found {0}")]
    TooFewLstmNodes(usize),
    #[error("incompatible chromosomes: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Hyperparam(#[from] HyperparamError),
}

/// What a hidden node carries. Implemented by [`Layer`] and [`ModuleSlot`].
pub trait NodePayload: Clone + fmt::Debug + PartialEq + Serialize + DeserializeOwned + Send + Sync {
    fn is_lstm(&self) -> bool {
        false
    }

    /// Normalized distance in [0, 1] between two payloads.
    fn distance(&self, other: &Self, node_specs: &[HyperparameterSpec]) -> f64;

    fn recombine<R: Rng + ?Sized>(&self, other: &Self, rng: &mut R) -> Result<Self, GenomeError>;
}

/// A layer: its kind plus the node half of the hyperparameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub params: HyperparameterTable,
}

impl Layer {
    pub fn sample<R: Rng + ?Sized>(space: &HyperparameterSpace, rng: &mut R) -> Self {
        let kind = *space.layer_kinds.choose(rng).expect("space has layer kinds");
        Self {
            kind,
            params: sample_table(&space.node_params, rng),
        }
    }
}

impl NodePayload for Layer {
    fn is_lstm(&self) -> bool {
        self.kind == LayerKind::Lstm
    }

    fn distance(&self, other: &Self, node_specs: &[HyperparameterSpec]) -> f64 {
        // layer kind counts as one more categorical parameter
        let n = self.params.len() as f64;
        let params = table_distance(&self.params, &other.params, node_specs).unwrap_or(1.0);
        let kind = if self.kind == other.kind { 0.0 } else { 1.0 };
        (params * n + kind) / (n + 1.0)
    }

    fn recombine<R: Rng + ?Sized>(&self, other: &Self, rng: &mut R) -> Result<Self, GenomeError> {
        let kind = if rng.random_bool(0.5) { other.kind } else { self.kind };
        let params = crossover_tables(&self.params, &other.params, rng)?;
        Ok(Self { kind, params })
    }
}

/// A blueprint node: the module species it is to be replaced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSlot {
    pub species: SpeciesId,
}

impl NodePayload for ModuleSlot {
    fn distance(&self, other: &Self, _node_specs: &[HyperparameterSpec]) -> f64 {
        if self.species == other.species {
            0.0
        } else {
            1.0
        }
    }

    fn recombine<R: Rng + ?Sized>(&self, other: &Self, rng: &mut R) -> Result<Self, GenomeError> {
        Ok(if rng.random_bool(0.5) { *other } else { *self })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeGene<P> {
    pub innovation: Innovation,
    pub role: NodeRole,
    pub enabled: bool,
    /// `None` for input and output nodes.
    pub payload: Option<P>,
}

impl<P> NodeGene<P> {
    pub fn boundary(innovation: Innovation, role: NodeRole) -> Self {
        Self {
            innovation,
            role,
            enabled: true,
            payload: None,
        }
    }

    pub fn hidden(innovation: Innovation, payload: P) -> Self {
        Self {
            innovation,
            role: NodeRole::Hidden,
            enabled: true,
            payload: Some(payload),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionGene {
    pub innovation: Innovation,
    pub from: Innovation,
    pub to: Innovation,
    pub enabled: bool,
    pub link_kind: LinkKind,
}

impl ConnectionGene {
    pub fn layer(innovation: Innovation, from: Innovation, to: Innovation) -> Self {
        Self {
            innovation,
            from,
            to,
            enabled: true,
            link_kind: LinkKind::Layer,
        }
    }
}

/// Directed-graph genome. `nodes` and `edges` are kept sorted by innovation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "P: Serialize", deserialize = "P: DeserializeOwned"))]
pub struct Chromosome<P> {
    pub nodes: Vec<NodeGene<P>>,
    pub edges: Vec<ConnectionGene>,
    #[serde(default)]
    pub globals: HyperparameterTable,
}

pub type ModuleChromosome = Chromosome<Layer>;
pub type BlueprintChromosome = Chromosome<ModuleSlot>;

/// Input → hidden → output chain carrying `globals` sampled from the space.
pub fn minimal_chromosome<R: Rng + ?Sized>(space: &HyperparameterSpace, rng: &mut R) -> ModuleChromosome {
    let hidden = Layer::sample(space, rng);
    let globals = sample_table(&space.global_params, rng);
    Chromosome::minimal_with(hidden, globals)
}

/// Blueprint counterpart of [`minimal_chromosome`]: one node pointing at `species`.
pub fn minimal_blueprint<R: Rng + ?Sized>(
    space: &HyperparameterSpace,
    species: SpeciesId,
    rng: &mut R,
) -> BlueprintChromosome {
    let globals = sample_table(&space.global_params, rng);
    Chromosome::minimal_with(ModuleSlot { species }, globals)
}

impl<P: NodePayload> Chromosome<P> {
    pub fn minimal_with(hidden: P, globals: HyperparameterTable) -> Self {
        Self {
            nodes: vec![
                NodeGene::boundary(INPUT_NODE, NodeRole::Input),
                NodeGene::boundary(OUTPUT_NODE, NodeRole::Output),
                NodeGene::hidden(MINIMAL_HIDDEN, hidden),
            ],
            edges: vec![
                ConnectionGene::layer(MINIMAL_INPUT_EDGE, INPUT_NODE, MINIMAL_HIDDEN),
                ConnectionGene::layer(MINIMAL_OUTPUT_EDGE, MINIMAL_HIDDEN, OUTPUT_NODE),
            ],
            globals,
        }
    }

    /// Builds a chromosome from unsorted parts.
    pub fn from_parts(mut nodes: Vec<NodeGene<P>>, mut edges: Vec<ConnectionGene>, globals: HyperparameterTable) -> Self {
        nodes.sort_by_key(|n| n.innovation);
        edges.sort_by_key(|e| e.innovation);
        Self { nodes, edges, globals }
    }

    pub fn node(&self, id: Innovation) -> Option<&NodeGene<P>> {
        self.nodes
            .binary_search_by_key(&id, |n| n.innovation)
            .ok()
            .map(|i| &self.nodes[i])
    }

    pub fn edge(&self, id: Innovation) -> Option<&ConnectionGene> {
        self.edges
            .binary_search_by_key(&id, |e| e.innovation)
            .ok()
            .map(|i| &self.edges[i])
    }

    pub(crate) fn edge_mut(&mut self, id: Innovation) -> Option<&mut ConnectionGene> {
        self.edges
            .binary_search_by_key(&id, |e| e.innovation)
            .ok()
            .map(move |i| &mut self.edges[i])
    }

    pub(crate) fn contains_id(&self, id: Innovation) -> bool {
        self.node(id).is_some() || self.edge(id).is_some()
    }

    pub(crate) fn insert_node(&mut self, node: NodeGene<P>) {
        let at = self.nodes.partition_point(|n| n.innovation < node.innovation);
        self.nodes.insert(at, node);
    }

    pub(crate) fn insert_edge(&mut self, edge: ConnectionGene) {
        let at = self.edges.partition_point(|e| e.innovation < edge.innovation);
        self.edges.insert(at, edge);
    }

    pub fn input_id(&self) -> Option<Innovation> {
        self.nodes.iter().find(|n| n.role == NodeRole::Input).map(|n| n.innovation)
    }

    pub fn output_id(&self) -> Option<Innovation> {
        self.nodes.iter().find(|n| n.role == NodeRole::Output).map(|n| n.innovation)
    }

    /// Total number of node and connection genes.
    pub fn gene_count(&self) -> usize {
        self.nodes.len() + self.edges.len()
    }

    /// All gene ids, nodes and connections together, ascending.
    pub fn gene_ids(&self) -> Vec<Innovation> {
        let mut ids: Vec<Innovation> = self
            .nodes
            .iter()
            .map(|n| n.innovation)
            .chain(self.edges.iter().map(|e| e.innovation))
            .collect();
        ids.sort_unstable();
        ids
    }

    pub fn enabled_hidden(&self) -> impl Iterator<Item = &NodeGene<P>> {
        self.nodes.iter().filter(|n| n.enabled && n.role == NodeRole::Hidden)
    }

    pub(crate) fn lstm_nodes(&self) -> Vec<Innovation> {
        self.enabled_hidden()
            .filter(|n| n.payload.as_ref().is_some_and(NodePayload::is_lstm))
            .map(|n| n.innovation)
            .collect()
    }

    pub(crate) fn node_is_lstm(&self, id: Innovation) -> bool {
        self.node(id)
            .and_then(|n| n.payload.as_ref())
            .is_some_and(NodePayload::is_lstm)
    }

    /// Successor lists over enabled layer connections.
    pub fn layer_adjacency(&self) -> BTreeMap<Innovation, Vec<Innovation>> {
        let mut adj: BTreeMap<Innovation, Vec<Innovation>> = BTreeMap::new();
        for e in self.edges.iter().filter(|e| e.enabled && e.link_kind == LinkKind::Layer) {
            adj.entry(e.from).or_default().push(e.to);
        }
        adj
    }

    fn reverse_adjacency(&self) -> BTreeMap<Innovation, Vec<Innovation>> {
        let mut adj: BTreeMap<Innovation, Vec<Innovation>> = BTreeMap::new();
        for e in self.edges.iter().filter(|e| e.enabled && e.link_kind == LinkKind::Layer) {
            adj.entry(e.to).or_default().push(e.from);
        }
        adj
    }

    /// True if `target` can be reached from `start` over enabled layer connections.
    pub fn reaches(&self, start: Innovation, target: Innovation) -> bool {
        reachable(&self.layer_adjacency(), start).contains(&target)
    }

    /// Enabled nodes lying on some input → output path.
    pub fn nodes_on_paths(&self) -> BTreeSet<Innovation> {
        let (Some(input), Some(output)) = (self.input_id(), self.output_id()) else {
            return BTreeSet::new();
        };
        let forward = reachable(&self.layer_adjacency(), input);
        let backward = reachable(&self.reverse_adjacency(), output);
        forward.intersection(&backward).copied().collect()
    }

    /// Enabled layer-graph nodes in a deterministic topological order, or
    /// `None` if the enabled connections contain a cycle.
    pub fn topological_order(&self) -> Option<Vec<Innovation>> {
        let enabled: BTreeSet<Innovation> = self.nodes.iter().filter(|n| n.enabled).map(|n| n.innovation).collect();
        let mut indegree: BTreeMap<Innovation, usize> = enabled.iter().map(|id| (*id, 0)).collect();
        let adj = self.layer_adjacency();
        for targets in adj.values() {
            for t in targets {
                *indegree.entry(*t).or_default() += 1;
            }
        }
        let mut ready: BTreeSet<Innovation> = indegree.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
        let mut order = Vec::with_capacity(indegree.len());
        while let Some(id) = ready.pop_first() {
            order.push(id);
            for t in adj.get(&id).into_iter().flatten() {
                let d = indegree.get_mut(t).expect("target indexed");
                *d -= 1;
                if *d == 0 {
                    ready.insert(*t);
                }
            }
        }
        (order.len() == indegree.len()).then_some(order)
    }

    /// Checks every structural invariant a chromosome must hold between operators.
    pub fn check_invariants(&self) -> Result<(), InvariantViolation> {
        if self.nodes.windows(2).any(|w| w[0].innovation >= w[1].innovation)
            || self.edges.windows(2).any(|w| w[0].innovation >= w[1].innovation)
        {
            return Err(InvariantViolation::Unsorted);
        }
        if let Some(e) = self.edges.iter().find(|e| self.node(e.innovation).is_some()) {
            return Err(InvariantViolation::SharedId(e.innovation));
        }
        let inputs = self.nodes.iter().filter(|n| n.role == NodeRole::Input).count();
        let outputs = self.nodes.iter().filter(|n| n.role == NodeRole::Output).count();
        if inputs != 1 || outputs != 1 {
            return Err(InvariantViolation::Boundary { inputs, outputs });
        }
        for n in &self.nodes {
            let boundary = n.role != NodeRole::Hidden;
            if boundary && !n.enabled {
                return Err(InvariantViolation::DisabledBoundary(n.innovation));
            }
            if boundary == n.payload.is_some() {
                return Err(InvariantViolation::Payload(n.innovation));
            }
        }
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            let (Some(from), Some(to)) = (self.node(e.from), self.node(e.to)) else {
                return Err(InvariantViolation::DanglingEdge(e.innovation));
            };
            if e.from == e.to {
                return Err(InvariantViolation::SelfLoop(e.innovation));
            }
            if !e.enabled {
                continue;
            }
            if !from.enabled || !to.enabled {
                return Err(InvariantViolation::DisabledEndpoint(e.innovation));
            }
            match e.link_kind {
                LinkKind::Layer => {
                    if from.role == NodeRole::Output || to.role == NodeRole::Input {
                        return Err(InvariantViolation::BoundaryEdge(e.innovation));
                    }
                }
                LinkKind::CellSkip => {
                    if !self.node_is_lstm(e.from) || !self.node_is_lstm(e.to) {
                        return Err(InvariantViolation::SkipEndpoints(e.innovation));
                    }
                }
            }
            if !seen.insert((e.from, e.to, e.link_kind)) {
                return Err(InvariantViolation::DuplicateEdge(e.innovation));
            }
        }
        if self.topological_order().is_none() {
            return Err(InvariantViolation::Cycle);
        }
        let on_paths = self.nodes_on_paths();
        if let Some(n) = self.nodes.iter().find(|n| n.enabled && !on_paths.contains(&n.innovation)) {
            return Err(InvariantViolation::Unreachable(n.innovation));
        }
        Ok(())
    }
}

fn reachable(adj: &BTreeMap<Innovation, Vec<Innovation>>, start: Innovation) -> BTreeSet<Innovation> {
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(id) = queue.pop_front() {
        for next in adj.get(&id).into_iter().flatten() {
            if seen.insert(*next) {
                queue.push_back(*next);
            }
        }
    }
    seen
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::hyperparams::HyperparameterSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn dense_space() -> HyperparameterSpace {
        HyperparameterSpace {
            layer_kinds: vec![LayerKind::Dense],
            node_params: vec![
                HyperparameterSpec::integer("layer_size", 8, 64),
                HyperparameterSpec::real("dropout", 0.0, 0.7),
            ],
            global_params: vec![HyperparameterSpec::real("learning_rate", 0.0001, 0.1)],
        }
    }

    #[test]
    fn minimal_chromosome_shape() {
        let c = minimal_chromosome(&dense_space(), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(c.nodes.len(), 3);
        assert_eq!(c.edges.len(), 2);
        c.check_invariants().unwrap();
        assert_eq!(c, minimal_chromosome(&dense_space(), &mut ChaCha8Rng::seed_from_u64(1)));
    }

    #[test]
    fn checker_rejects_cycles_and_orphans() {
        let mut c = minimal_chromosome(&dense_space(), &mut ChaCha8Rng::seed_from_u64(2));
        c.insert_edge(ConnectionGene::layer(Innovation(10), MINIMAL_HIDDEN, INPUT_NODE));
        assert!(matches!(c.check_invariants(), Err(InvariantViolation::BoundaryEdge(_))));

        let mut c = minimal_chromosome(&dense_space(), &mut ChaCha8Rng::seed_from_u64(2));
        c.insert_node(NodeGene::hidden(Innovation(20), Layer::sample(&dense_space(), &mut ChaCha8Rng::seed_from_u64(3))));
        assert_eq!(c.check_invariants(), Err(InvariantViolation::Unreachable(Innovation(20))));

        c.insert_edge(ConnectionGene::layer(Innovation(21), MINIMAL_HIDDEN, Innovation(20)));
        c.insert_edge(ConnectionGene::layer(Innovation(22), Innovation(20), MINIMAL_HIDDEN));
        assert_eq!(c.check_invariants(), Err(InvariantViolation::Cycle));
    }

    #[test]
    fn checker_rejects_duplicate_enabled_edges() {
        let mut c = minimal_chromosome(&dense_space(), &mut ChaCha8Rng::seed_from_u64(2));
        c.insert_edge(ConnectionGene::layer(Innovation(9), INPUT_NODE, MINIMAL_HIDDEN));
        assert_eq!(c.check_invariants(), Err(InvariantViolation::DuplicateEdge(Innovation(9))));
        c.edge_mut(Innovation(9)).unwrap().enabled = false;
        c.check_invariants().unwrap();
    }

    #[test]
    fn blueprints_share_the_checker() {
        let space = dense_space();
        let bp = minimal_blueprint(&space, SpeciesId(3), &mut ChaCha8Rng::seed_from_u64(4));
        bp.check_invariants().unwrap();
        let mut broken = bp.clone();
        broken.nodes[2].payload = None;
        assert_eq!(broken.check_invariants(), Err(InvariantViolation::Payload(MINIMAL_HIDDEN)));
    }

    #[test]
    fn canonical_json_round_trip() {
        let c = minimal_chromosome(&dense_space(), &mut ChaCha8Rng::seed_from_u64(5));
        let json = crate::canonical::to_canonical_string(&c).unwrap();
        let back: ModuleChromosome = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        assert_eq!(crate::canonical::to_canonical_string(&back).unwrap(), json);
    }
}
