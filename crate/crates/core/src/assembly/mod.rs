//! Turning chromosomes into concrete layer graphs.
//!
//! A blueprint is expanded by replacing each of its hidden nodes with a copy of
//! the chosen module; the module's input and output nodes become junctions
//! that blueprint edges attach to. Junctions fed by a single parent are
//! contracted away, junctions fed by several become merge layers. Any layer
//! with several parents receives a merge layer in front of it, and parents
//! whose output is larger than the smallest one are first downsampled.

mod export;
mod shape;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genome::{
    BlueprintChromosome, Innovation, InvariantViolation, LinkKind, ModuleChromosome, NodeRole, SpeciesId,
};
use crate::hyperparams::{HyperparameterTable, LayerKind};
use crate::speciation::MemberId;

pub use export::{import_json, to_dot, to_json};
pub use shape::Shape;

#[derive(Debug, Error, PartialEq)]
pub enum AssemblyError {
    #[error("invalid chromosome: {0}")]
    Invalid(#[from] InvariantViolation),
    #[error("no module chosen for species {0}")]
    MissingModule(SpeciesId),
    #[error("blueprint node {0} has no species pointer")]
    MissingPointer(Innovation),
    #[error("convolution at gene {gene} needs an image input, got {input}")]
    ConvNeedsImage { gene: Innovation, input: Shape },
    #[error("cannot reconcile parent sizes of layers {layers:?} under the {policy:?} downsample policy")]
    SizeConflict { layers: Vec<usize>, policy: Downsample },
    #[error("layer {layer} expects {expected}, parents provide {found}")]
    SizeMismatch { layer: usize, expected: String, found: String },
    #[error("layer {0} has several parents but is not a merge")]
    UnmergedParents(usize),
    #[error("network graph is not a connected DAG")]
    Malformed,
    #[error("json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Concatenate,
    ElementWiseSum,
}

impl MergeMethod {
    /// Reads the values used by hyperparameter tables ("sum", "concat", ...).
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "concat" | "concatenate" | "concatenation" => Some(MergeMethod::Concatenate),
            "sum" | "element_wise_sum" | "add" => Some(MergeMethod::ElementWiseSum),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsample {
    MaxPool,
    DenseBottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergePolicy {
    pub method: MergeMethod,
    pub downsample: Downsample,
}

impl Default for MergePolicy {
    fn default() -> Self {
        Self {
            method: MergeMethod::Concatenate,
            downsample: Downsample::DenseBottleneck,
        }
    }
}

/// Network boundary: what the input layer produces and how many units the
/// output layer has.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoSpec {
    pub input: Shape,
    pub output_units: usize,
}

/// Concrete operation of a layer, with every size already resolved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerOp {
    Input { shape: Shape },
    Output { units: usize },
    Dense { units: usize },
    Conv { filters: usize, kernel: usize, max_pool: bool },
    Lstm { units: usize },
    Concatenate,
    Sum,
    MaxPool { height: usize, width: usize },
    Bottleneck { target: Shape },
    Flatten,
}

impl LayerOp {
    pub fn name(&self) -> &'static str {
        match self {
            LayerOp::Input { .. } => "input",
            LayerOp::Output { .. } => "output",
            LayerOp::Dense { .. } => "dense",
            LayerOp::Conv { .. } => "conv",
            LayerOp::Lstm { .. } => "lstm",
            LayerOp::Concatenate => "concatenate",
            LayerOp::Sum => "sum",
            LayerOp::MaxPool { .. } => "max_pool",
            LayerOp::Bottleneck { .. } => "bottleneck",
            LayerOp::Flatten => "flatten",
        }
    }

    pub fn is_merge(&self) -> bool {
        matches!(self, LayerOp::Concatenate | LayerOp::Sum)
    }

    /// Layers that come from a chromosome gene rather than from assembly.
    pub fn is_compute(&self) -> bool {
        matches!(self, LayerOp::Dense { .. } | LayerOp::Conv { .. } | LayerOp::Lstm { .. })
    }

    /// Output shape given the parent shapes, or a description of what was
    /// expected.
    pub fn infer(&self, inputs: &[Shape]) -> Result<Shape, String> {
        let single = || match inputs {
            [s] => Ok(*s),
            _ => Err(format!("exactly one parent, got {}", inputs.len())),
        };
        match self {
            LayerOp::Input { shape } => {
                if inputs.is_empty() {
                    Ok(*shape)
                } else {
                    Err("no parents".into())
                }
            }
            LayerOp::Output { units } | LayerOp::Dense { units } | LayerOp::Lstm { units } => {
                single()?;
                Ok(Shape::vector(*units))
            }
            LayerOp::Conv { filters, max_pool, .. } => match single()? {
                Shape::Image { height, width, .. } => {
                    let (h, w) = if *max_pool {
                        ((height / 2).max(1), (width / 2).max(1))
                    } else {
                        (height, width)
                    };
                    Ok(Shape::image(*filters, h, w))
                }
                other => Err(format!("an image, got {other}")),
            },
            LayerOp::Flatten => Ok(single()?.flattened()),
            LayerOp::MaxPool { height, width } => match single()? {
                Shape::Image { channels, height: h, width: w } if h >= *height && w >= *width => {
                    Ok(Shape::image(channels, *height, *width))
                }
                other => Err(format!("an image of at least {height}x{width}, got {other}")),
            },
            LayerOp::Bottleneck { target } => {
                let input = single()?;
                match (input, target) {
                    (_, Shape::Vector { .. }) => Ok(*target),
                    (Shape::Image { height, width, .. }, Shape::Image { height: th, width: tw, .. })
                        if height == *th && width == *tw =>
                    {
                        Ok(*target)
                    }
                    _ => Err(format!("input compatible with bottleneck {target}, got {input}")),
                }
            }
            LayerOp::Concatenate => {
                if inputs.len() < 2 {
                    return Err("at least two parents".into());
                }
                if inputs.iter().all(|s| !s.is_image()) {
                    return Ok(Shape::vector(inputs.iter().map(Shape::elements).sum()));
                }
                let mut channels = 0;
                let mut spatial = None;
                for s in inputs {
                    match *s {
                        Shape::Image { channels: c, height, width } => {
                            if spatial.is_some_and(|hw| hw != (height, width)) {
                                return Err("images of one spatial size".into());
                            }
                            spatial = Some((height, width));
                            channels += c;
                        }
                        Shape::Vector { .. } => return Err("parents of one kind".into()),
                    }
                }
                let (h, w) = spatial.expect("non-empty");
                Ok(Shape::image(channels, h, w))
            }
            LayerOp::Sum => {
                if inputs.len() < 2 {
                    return Err("at least two parents".into());
                }
                if inputs.iter().all(|s| *s == inputs[0]) {
                    Ok(inputs[0])
                } else {
                    Err(format!("equal shapes, got {inputs:?}"))
                }
            }
        }
    }
}

/// Where a compute layer came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOrigin {
    /// Blueprint node whose module contributed the layer; absent for
    /// single-chromosome networks.
    pub blueprint_node: Option<Innovation>,
    pub gene: Innovation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcreteLayer {
    pub id: usize,
    #[serde(flatten)]
    pub op: LayerOp,
    pub params: HyperparameterTable,
    pub output: Shape,
    pub origin: Option<LayerOrigin>,
}

/// One copy of a module inside an assembled network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleInstance {
    pub blueprint_node: Innovation,
    pub species: SpeciesId,
    pub module: MemberId,
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledNetwork {
    /// Stored in topological order; `layers[i].id == i`.
    pub layers: Vec<ConcreteLayer>,
    pub edges: Vec<(usize, usize)>,
    /// Recurrent links between LSTM layers; not part of the feed-forward DAG.
    pub cell_skips: Vec<(usize, usize)>,
    pub globals: HyperparameterTable,
    pub policy: MergePolicy,
    pub modules: Vec<ModuleInstance>,
}

/// The module picked for one species, with its population id.
#[derive(Debug, Clone, Copy)]
pub struct ModuleChoice<'a> {
    pub id: MemberId,
    pub chromosome: &'a ModuleChromosome,
}

pub fn assemble(
    blueprint: &BlueprintChromosome,
    modules: &BTreeMap<SpeciesId, ModuleChoice<'_>>,
    policy: &MergePolicy,
    io: &IoSpec,
) -> Result<AssembledNetwork, AssemblyError> {
    blueprint.check_invariants()?;
    let mut raw = RawGraph::default();
    let mut terminals: BTreeMap<Innovation, (usize, usize)> = BTreeMap::new();
    let mut instances = Vec::new();
    for node in blueprint.nodes.iter().filter(|n| n.enabled) {
        match node.role {
            NodeRole::Input => {
                let v = raw.add(RawKind::Input);
                terminals.insert(node.innovation, (v, v));
            }
            NodeRole::Output => {
                let v = raw.add(RawKind::Output);
                terminals.insert(node.innovation, (v, v));
            }
            NodeRole::Hidden => {
                let slot = node.payload.as_ref().ok_or(AssemblyError::MissingPointer(node.innovation))?;
                let choice = modules.get(&slot.species).ok_or(AssemblyError::MissingModule(slot.species))?;
                let (entry, exit, layer_vertices) = raw.splice(choice.chromosome, Some(node.innovation))?;
                terminals.insert(node.innovation, (entry, exit));
                instances.push((node.innovation, slot.species, choice.id, layer_vertices));
            }
        }
    }
    for e in blueprint.edges.iter().filter(|e| e.enabled && e.link_kind == LinkKind::Layer) {
        let (_, from) = terminals[&e.from];
        let (to, _) = terminals[&e.to];
        raw.edges.insert((from, to));
    }
    build(raw, instances, blueprint.globals.clone(), policy, io)
}

/// Builds the network of a single-population (DeepNEAT) chromosome.
pub fn assemble_chromosome(
    chromosome: &ModuleChromosome,
    policy: &MergePolicy,
    io: &IoSpec,
) -> Result<AssembledNetwork, AssemblyError> {
    let mut raw = RawGraph::default();
    let input = raw.add(RawKind::Input);
    let output = raw.add(RawKind::Output);
    let (entry, exit, _) = raw.splice(chromosome, None)?;
    raw.edges.insert((input, entry));
    raw.edges.insert((exit, output));
    build(raw, Vec::new(), chromosome.globals.clone(), policy, io)
}

#[derive(Debug, Clone)]
enum RawKind {
    Input,
    Output,
    Junction,
    Layer {
        kind: LayerKind,
        params: HyperparameterTable,
        origin: LayerOrigin,
    },
}

#[derive(Debug, Default)]
struct RawGraph {
    vertices: Vec<RawKind>,
    edges: BTreeSet<(usize, usize)>,
    skips: Vec<(usize, usize)>,
}

impl RawGraph {
    fn add(&mut self, kind: RawKind) -> usize {
        self.vertices.push(kind);
        self.vertices.len() - 1
    }

    /// Copies the enabled part of a module; returns its entry and exit
    /// junctions and the vertices of its layers.
    fn splice(
        &mut self,
        module: &ModuleChromosome,
        blueprint_node: Option<Innovation>,
    ) -> Result<(usize, usize, Vec<usize>), AssemblyError> {
        module.check_invariants()?;
        let mut map = BTreeMap::new();
        let mut layers = Vec::new();
        for n in module.nodes.iter().filter(|n| n.enabled) {
            let v = match n.role {
                NodeRole::Input | NodeRole::Output => self.add(RawKind::Junction),
                NodeRole::Hidden => {
                    let layer = n.payload.as_ref().ok_or(AssemblyError::Malformed)?;
                    let v = self.add(RawKind::Layer {
                        kind: layer.kind,
                        params: layer.params.clone(),
                        origin: LayerOrigin {
                            blueprint_node,
                            gene: n.innovation,
                        },
                    });
                    layers.push(v);
                    v
                }
            };
            map.insert(n.innovation, v);
        }
        for e in module.edges.iter().filter(|e| e.enabled) {
            let pair = (map[&e.from], map[&e.to]);
            match e.link_kind {
                LinkKind::Layer => {
                    self.edges.insert(pair);
                }
                LinkKind::CellSkip => self.skips.push(pair),
            }
        }
        let entry = map[&module.input_id().ok_or(AssemblyError::Malformed)?];
        let exit = map[&module.output_id().ok_or(AssemblyError::Malformed)?];
        Ok((entry, exit, layers))
    }

    fn parents(&self, v: usize) -> Vec<usize> {
        self.edges.iter().filter(|(_, t)| *t == v).map(|(f, _)| *f).collect()
    }

    fn children(&self, v: usize) -> Vec<usize> {
        self.edges.iter().filter(|(f, _)| *f == v).map(|(_, t)| *t).collect()
    }

    /// Kahn's algorithm over live vertices, smallest index first.
    fn topological(&self, live: &BTreeSet<usize>) -> Option<Vec<usize>> {
        let mut indegree: BTreeMap<usize, usize> = live.iter().map(|v| (*v, 0)).collect();
        for (f, t) in &self.edges {
            if live.contains(f) && live.contains(t) {
                *indegree.get_mut(t).expect("live") += 1;
            }
        }
        let mut ready: BTreeSet<usize> = indegree.iter().filter(|(_, d)| **d == 0).map(|(v, _)| *v).collect();
        let mut order = Vec::with_capacity(live.len());
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for c in self.children(v) {
                let d = indegree.get_mut(&c).expect("live");
                *d -= 1;
                if *d == 0 {
                    ready.insert(c);
                }
            }
        }
        (order.len() == live.len()).then_some(order)
    }
}

fn build(
    mut raw: RawGraph,
    instances: Vec<(Innovation, SpeciesId, MemberId, Vec<usize>)>,
    globals: HyperparameterTable,
    policy: &MergePolicy,
    io: &IoSpec,
) -> Result<AssembledNetwork, AssemblyError> {
    let all: BTreeSet<usize> = (0..raw.vertices.len()).collect();
    let order = raw.topological(&all).ok_or(AssemblyError::Malformed)?;
    let mut live = all;
    // contract single-parent junctions, parents first so duplicates collapse
    let mut merge_junctions = BTreeSet::new();
    for v in order {
        if !matches!(raw.vertices[v], RawKind::Junction) {
            continue;
        }
        let parents = raw.parents(v);
        if parents.len() >= 2 {
            merge_junctions.insert(v);
            continue;
        }
        let children = raw.children(v);
        raw.edges.retain(|(f, t)| *f != v && *t != v);
        for p in &parents {
            for c in &children {
                raw.edges.insert((*p, *c));
            }
        }
        live.remove(&v);
    }
    let order = raw.topological(&live).ok_or(AssemblyError::Malformed)?;

    let mut b = Builder {
        layers: Vec::new(),
        edges: Vec::new(),
        policy: *policy,
    };
    let mut out_of: BTreeMap<usize, usize> = BTreeMap::new();
    for v in order {
        let parents: Vec<usize> = raw.parents(v).iter().map(|p| out_of[p]).collect();
        let id = match &raw.vertices[v] {
            RawKind::Input => b.push(LayerOp::Input { shape: io.input }, HyperparameterTable::new(), None, &[])?,
            RawKind::Junction => {
                debug_assert!(merge_junctions.contains(&v));
                b.merge(&parents, policy.method)?
            }
            RawKind::Output => {
                let input = b.single_input(&parents, policy.method)?;
                b.push(
                    LayerOp::Output {
                        units: io.output_units,
                    },
                    HyperparameterTable::new(),
                    None,
                    &[input],
                )?
            }
            RawKind::Layer { kind, params, origin } => {
                let method = params
                    .get_str("merge_method")
                    .and_then(MergeMethod::parse)
                    .unwrap_or(policy.method);
                let input = b.single_input(&parents, method)?;
                let input_shape = b.layers[input].output;
                let op = layer_op(*kind, params, input_shape, origin.gene)?;
                b.push(op, params.clone(), Some(*origin), &[input])?
            }
        };
        out_of.insert(v, id);
    }
    let mut cell_skips: Vec<(usize, usize)> = raw
        .skips
        .iter()
        .filter_map(|(f, t)| Some((*out_of.get(f)?, *out_of.get(t)?)))
        .collect();
    cell_skips.sort_unstable();
    let modules = instances
        .into_iter()
        .map(|(blueprint_node, species, module, vertices)| ModuleInstance {
            blueprint_node,
            species,
            module,
            layers: vertices.iter().filter_map(|v| out_of.get(v).copied()).collect(),
        })
        .collect();
    let net = AssembledNetwork {
        layers: b.layers,
        edges: b.edges,
        cell_skips,
        globals,
        policy: *policy,
        modules,
    };
    net.validate()?;
    Ok(net)
}

fn first_usize(params: &HyperparameterTable, names: &[&str]) -> Option<usize> {
    names
        .iter()
        .find_map(|n| params.get_f64(n))
        .map(|v| v.round().max(1.0) as usize)
}

/// Names under which layer width is looked up.
pub const UNIT_PARAMS: [&str; 4] = ["layer_size", "units", "hidden_size", "num_units"];

fn layer_op(kind: LayerKind, params: &HyperparameterTable, input: Shape, gene: Innovation) -> Result<LayerOp, AssemblyError> {
    Ok(match kind {
        LayerKind::Dense => LayerOp::Dense {
            units: first_usize(params, &UNIT_PARAMS).unwrap_or(input.elements()),
        },
        LayerKind::Lstm => LayerOp::Lstm {
            units: first_usize(params, &UNIT_PARAMS).unwrap_or(input.elements()),
        },
        LayerKind::Conv => {
            let Shape::Image { channels, .. } = input else {
                return Err(AssemblyError::ConvNeedsImage { gene, input });
            };
            LayerOp::Conv {
                filters: first_usize(params, &["num_filters", "filters"]).unwrap_or(channels),
                kernel: first_usize(params, &["kernel_size"]).unwrap_or(3),
                max_pool: params.get_bool("max_pooling").unwrap_or(false),
            }
        }
    })
}

struct Builder {
    layers: Vec<ConcreteLayer>,
    edges: Vec<(usize, usize)>,
    policy: MergePolicy,
}

impl Builder {
    fn push(
        &mut self,
        op: LayerOp,
        params: HyperparameterTable,
        origin: Option<LayerOrigin>,
        parents: &[usize],
    ) -> Result<usize, AssemblyError> {
        let id = self.layers.len();
        let shapes: Vec<Shape> = parents.iter().map(|p| self.layers[*p].output).collect();
        let output = op.infer(&shapes).map_err(|expected| AssemblyError::SizeMismatch {
            layer: id,
            expected,
            found: format!("{shapes:?}"),
        })?;
        self.layers.push(ConcreteLayer {
            id,
            op,
            params,
            output,
            origin,
        });
        self.edges.extend(parents.iter().map(|p| (*p, id)));
        Ok(id)
    }

    fn single_input(&mut self, parents: &[usize], method: MergeMethod) -> Result<usize, AssemblyError> {
        match parents {
            [] => Err(AssemblyError::Malformed),
            [p] => Ok(*p),
            _ => self.merge(parents, method),
        }
    }

    /// Downsamples parents to the smallest one, then merges them.
    fn merge(&mut self, parents: &[usize], method: MergeMethod) -> Result<usize, AssemblyError> {
        let mut parents = parents.to_vec();
        let shapes: Vec<Shape> = parents.iter().map(|p| self.layers[*p].output).collect();
        let mixed = shapes.iter().any(Shape::is_image) && shapes.iter().any(|s| !s.is_image());
        if mixed {
            if self.policy.downsample == Downsample::MaxPool {
                return Err(AssemblyError::SizeConflict {
                    layers: parents,
                    policy: self.policy.downsample,
                });
            }
            for p in parents.iter_mut() {
                if self.layers[*p].output.is_image() {
                    *p = self.push(LayerOp::Flatten, HyperparameterTable::new(), None, &[*p])?;
                }
            }
        }
        let shapes: Vec<Shape> = parents.iter().map(|p| self.layers[*p].output).collect();
        if shapes[0].is_image() {
            let dims = |s: &Shape| match *s {
                Shape::Image { channels, height, width } => (channels, height, width),
                Shape::Vector { .. } => unreachable!("all images"),
            };
            let th = shapes.iter().map(|s| dims(s).1).min().expect("non-empty");
            let tw = shapes.iter().map(|s| dims(s).2).min().expect("non-empty");
            let tc = shapes.iter().map(|s| dims(s).0).min().expect("non-empty");
            for (p, s) in parents.iter_mut().zip(&shapes) {
                let (c, h, w) = dims(s);
                if h != th || w != tw {
                    *p = self.push(
                        LayerOp::MaxPool {
                            height: th,
                            width: tw,
                        },
                        HyperparameterTable::new(),
                        None,
                        &[*p],
                    )?;
                }
                if method == MergeMethod::ElementWiseSum && c != tc {
                    *p = self.push(
                        LayerOp::Bottleneck {
                            target: Shape::image(tc, th, tw),
                        },
                        HyperparameterTable::new(),
                        None,
                        &[*p],
                    )?;
                }
            }
        } else {
            let target = shapes.iter().map(Shape::elements).min().expect("non-empty");
            for (p, s) in parents.iter_mut().zip(&shapes) {
                if s.elements() != target {
                    *p = self.push(
                        LayerOp::Bottleneck {
                            target: Shape::vector(target),
                        },
                        HyperparameterTable::new(),
                        None,
                        &[*p],
                    )?;
                }
            }
        }
        let op = match method {
            MergeMethod::Concatenate => LayerOp::Concatenate,
            MergeMethod::ElementWiseSum => LayerOp::Sum,
        };
        self.push(op, HyperparameterTable::new(), None, &parents)
    }
}

impl AssembledNetwork {
    pub fn parents(&self, id: usize) -> Vec<usize> {
        self.edges.iter().filter(|(_, t)| *t == id).map(|(f, _)| *f).collect()
    }

    pub fn input(&self) -> Option<&ConcreteLayer> {
        self.layers.iter().find(|l| matches!(l.op, LayerOp::Input { .. }))
    }

    pub fn output(&self) -> Option<&ConcreteLayer> {
        self.layers.iter().find(|l| matches!(l.op, LayerOp::Output { .. }))
    }

    /// Recomputes every output shape along `order`, which must be a
    /// topological order of the layers.
    pub fn infer_sizes(&self, order: &[usize]) -> Result<Vec<Shape>, AssemblyError> {
        let mut shapes: Vec<Option<Shape>> = vec![None; self.layers.len()];
        if order.len() != self.layers.len() {
            return Err(AssemblyError::Malformed);
        }
        for &id in order {
            let inputs = self
                .parents(id)
                .iter()
                .map(|p| shapes[*p].ok_or(AssemblyError::Malformed))
                .collect::<Result<Vec<_>, _>>()?;
            let shape = self.layers[id].op.infer(&inputs).map_err(|expected| AssemblyError::SizeMismatch {
                layer: id,
                expected,
                found: format!("{inputs:?}"),
            })?;
            shapes[id] = Some(shape);
        }
        Ok(shapes.into_iter().map(|s| s.expect("all visited")).collect())
    }

    /// Structural checks: ids, DAG order, one input and one output, every
    /// layer on an input→output path, merges wherever there are several
    /// parents, and stored sizes consistent with the layer ops.
    pub fn validate(&self) -> Result<(), AssemblyError> {
        let n = self.layers.len();
        if self.layers.iter().enumerate().any(|(i, l)| l.id != i) {
            return Err(AssemblyError::Malformed);
        }
        if self.edges.iter().any(|(f, t)| f >= t || *t >= n) {
            return Err(AssemblyError::Malformed);
        }
        let inputs = self.layers.iter().filter(|l| matches!(l.op, LayerOp::Input { .. })).count();
        let outputs = self.layers.iter().filter(|l| matches!(l.op, LayerOp::Output { .. })).count();
        if inputs != 1 || outputs != 1 {
            return Err(AssemblyError::Malformed);
        }
        for l in &self.layers {
            if self.parents(l.id).len() > 1 && !l.op.is_merge() {
                return Err(AssemblyError::UnmergedParents(l.id));
            }
        }
        let input = self.input().expect("counted").id;
        let output = self.output().expect("counted").id;
        let mut from_input = vec![false; n];
        from_input[input] = true;
        let mut to_output = vec![false; n];
        to_output[output] = true;
        let mut sorted = self.edges.clone();
        sorted.sort_unstable();
        for (f, t) in &sorted {
            if from_input[*f] {
                from_input[*t] = true;
            }
        }
        for (f, t) in sorted.iter().rev() {
            if to_output[*t] {
                to_output[*f] = true;
            }
        }
        if from_input.iter().zip(&to_output).any(|(a, b)| !(a & b)) {
            return Err(AssemblyError::Malformed);
        }
        let order: Vec<usize> = (0..n).collect();
        let shapes = self.infer_sizes(&order)?;
        if let Some(l) = self.layers.iter().zip(&shapes).find(|(l, s)| l.output != **s) {
            return Err(AssemblyError::SizeMismatch {
                layer: l.0.id,
                expected: l.1.to_string(),
                found: l.0.output.to_string(),
            });
        }
        Ok(())
    }

    /// Number of compute layers on the longest input→output path.
    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.layers.len()];
        for l in &self.layers {
            let own = usize::from(l.op.is_compute());
            let base = self.parents(l.id).iter().map(|p| depth[*p]).max().unwrap_or(0);
            depth[l.id] = base + own;
        }
        self.output().map(|o| depth[o.id]).unwrap_or(0)
    }

    /// How many copies of each module the network contains.
    pub fn module_counts(&self) -> BTreeMap<MemberId, usize> {
        let mut counts = BTreeMap::new();
        for m in &self.modules {
            *counts.entry(m.module).or_insert(0) += 1;
        }
        counts
    }
}
