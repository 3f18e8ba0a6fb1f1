use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hyperparams::{crossover_tables, HyperparameterSpec};

use super::{Chromosome, ConnectionGene, GenomeError, Innovation, LinkKind, NodeGene, NodePayload, NodeRole};

/// Probability that a gene disabled in exactly one parent stays disabled.
pub const DISABLED_INHERITANCE: f64 = 0.75;

/// Gene partition of two chromosomes by innovation id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GeneAlignment {
    pub matching: Vec<Innovation>,
    pub disjoint_a: Vec<Innovation>,
    pub disjoint_b: Vec<Innovation>,
    pub excess_a: Vec<Innovation>,
    pub excess_b: Vec<Innovation>,
}

impl GeneAlignment {
    pub fn excess(&self) -> usize {
        self.excess_a.len() + self.excess_b.len()
    }

    pub fn disjoint(&self) -> usize {
        self.disjoint_a.len() + self.disjoint_b.len()
    }
}

/// Lines up two ascending id lists. Ids beyond the other side's largest id
/// are excess; other unmatched ids are disjoint.
pub fn align(a: &[Innovation], b: &[Innovation]) -> GeneAlignment {
    let max_a = a.last().copied();
    let max_b = b.last().copied();
    let beyond = |id: Innovation, other_max: Option<Innovation>| other_max.is_none_or(|m| id > m);
    let mut out = GeneAlignment::default();
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) if x == y => {
                out.matching.push(*x);
                i += 1;
                j += 1;
            }
            (Some(x), y) if y.is_none_or(|y| x < y) => {
                if beyond(*x, max_b) {
                    out.excess_a.push(*x);
                } else {
                    out.disjoint_a.push(*x);
                }
                i += 1;
            }
            (_, Some(y)) => {
                if beyond(*y, max_a) {
                    out.excess_b.push(*y);
                } else {
                    out.disjoint_b.push(*y);
                }
                j += 1;
            }
            (Some(_), None) | (None, None) => unreachable!("covered by the arms above"),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityCoefficients {
    pub excess: f64,
    pub disjoint: f64,
    pub params: f64,
}

impl Default for CompatibilityCoefficients {
    fn default() -> Self {
        Self {
            excess: 1.0,
            disjoint: 1.0,
            params: 0.4,
        }
    }
}

/// δ = c1·E/N + c2·D/N + c3·W, with W the mean payload distance over matching
/// hidden nodes and N the larger gene count (at least 1).
pub fn compatibility_distance<P: NodePayload>(
    a: &Chromosome<P>,
    b: &Chromosome<P>,
    coeffs: &CompatibilityCoefficients,
    node_specs: &[HyperparameterSpec],
) -> f64 {
    let alignment = align(&a.gene_ids(), &b.gene_ids());
    let n = a.gene_count().max(b.gene_count()).max(1) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for id in &alignment.matching {
        if let (Some(na), Some(nb)) = (a.node(*id), b.node(*id)) {
            if let (Some(pa), Some(pb)) = (&na.payload, &nb.payload) {
                total += pa.distance(pb, node_specs);
                count += 1;
            }
        }
    }
    let mean = if count == 0 { 0.0 } else { total / count as f64 };
    coeffs.excess * alignment.excess() as f64 / n + coeffs.disjoint * alignment.disjoint() as f64 / n + coeffs.params * mean
}

fn inherit_enabled<R: Rng + ?Sized>(a: bool, b: bool, rng: &mut R) -> bool {
    match (a, b) {
        (true, true) => true,
        (false, false) => false,
        _ => !rng.random_bool(DISABLED_INHERITANCE),
    }
}

/// NEAT crossover by historical marking. Matching genes come from either
/// parent at random; disjoint and excess genes come from the fitter parent
/// (`a` on ties). The child is repaired to a valid graph; if no valid graph
/// remains, the fitter parent is returned unchanged.
pub fn crossover<P: NodePayload, R: Rng + ?Sized>(
    a: &Chromosome<P>,
    b: &Chromosome<P>,
    fitness_a: f64,
    fitness_b: f64,
    rng: &mut R,
) -> Result<Chromosome<P>, GenomeError> {
    let a_fitter = fitness_a >= fitness_b;
    let fitter = if a_fitter { a } else { b };

    let node_ids = |c: &Chromosome<P>| c.nodes.iter().map(|n| n.innovation).collect::<Vec<_>>();
    let edge_ids = |c: &Chromosome<P>| c.edges.iter().map(|e| e.innovation).collect::<Vec<_>>();

    let mut nodes = Vec::new();
    let node_alignment = align(&node_ids(a), &node_ids(b));
    for id in &node_alignment.matching {
        let (na, nb) = (a.node(*id).expect("aligned"), b.node(*id).expect("aligned"));
        if na.role != nb.role {
            return Err(GenomeError::Incompatible(format!("node {id} has different roles")));
        }
        let payload = match (&na.payload, &nb.payload) {
            (Some(pa), Some(pb)) => Some(pa.recombine(pb, rng)?),
            (None, None) => None,
            _ => return Err(GenomeError::Incompatible(format!("node {id} has mismatched payloads"))),
        };
        nodes.push(NodeGene {
            innovation: *id,
            role: na.role,
            enabled: inherit_enabled(na.enabled, nb.enabled, rng),
            payload,
        });
    }
    let unmatched_nodes = if a_fitter {
        node_alignment.disjoint_a.iter().chain(&node_alignment.excess_a)
    } else {
        node_alignment.disjoint_b.iter().chain(&node_alignment.excess_b)
    };
    nodes.extend(unmatched_nodes.map(|id| fitter.node(*id).expect("aligned").clone()));

    let mut edges = Vec::new();
    let edge_alignment = align(&edge_ids(a), &edge_ids(b));
    for id in &edge_alignment.matching {
        let (ea, eb) = (a.edge(*id).expect("aligned"), b.edge(*id).expect("aligned"));
        let mut gene: ConnectionGene = if rng.random_bool(0.5) { *eb } else { *ea };
        gene.enabled = inherit_enabled(ea.enabled, eb.enabled, rng);
        edges.push(gene);
    }
    let unmatched_edges = if a_fitter {
        edge_alignment.disjoint_a.iter().chain(&edge_alignment.excess_a)
    } else {
        edge_alignment.disjoint_b.iter().chain(&edge_alignment.excess_b)
    };
    edges.extend(unmatched_edges.map(|id| *fitter.edge(*id).expect("aligned")));

    let globals = if a.globals.is_empty() && b.globals.is_empty() {
        a.globals.clone()
    } else {
        crossover_tables(&a.globals, &b.globals, rng)?
    };

    let mut child = Chromosome::from_parts(nodes, edges, globals);
    if child.repair() {
        Ok(child)
    } else {
        let mut fallback = fitter.clone();
        fallback.globals = child.globals;
        Ok(fallback)
    }
}

impl<P: NodePayload> Chromosome<P> {
    /// Restores the graph invariants after recombination: drops dangling
    /// connections, disables duplicates and cycle-closing connections (in
    /// innovation order), and prunes hidden nodes that lie on no
    /// input → output path. Returns false if no valid graph remains.
    pub fn repair(&mut self) -> bool {
        let present: BTreeSet<Innovation> = self.nodes.iter().map(|n| n.innovation).collect();
        self.edges
            .retain(|e| present.contains(&e.from) && present.contains(&e.to) && e.from != e.to);

        let enabled_nodes: BTreeSet<Innovation> =
            self.nodes.iter().filter(|n| n.enabled).map(|n| n.innovation).collect();
        let lstm: BTreeSet<Innovation> = self.lstm_nodes().into_iter().collect();
        let roles: Vec<(Innovation, NodeRole)> = self.nodes.iter().map(|n| (n.innovation, n.role)).collect();
        let role_of = |id: Innovation| roles.iter().find(|(n, _)| *n == id).map(|(_, r)| *r);
        self.edges.retain(|e| match e.link_kind {
            LinkKind::CellSkip => lstm.contains(&e.from) && lstm.contains(&e.to),
            LinkKind::Layer => role_of(e.from) != Some(NodeRole::Output) && role_of(e.to) != Some(NodeRole::Input),
        });

        let mut kept = Chromosome::<P> {
            nodes: self.nodes.clone(),
            edges: Vec::with_capacity(self.edges.len()),
            globals: Default::default(),
        };
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            let mut gene = *e;
            if gene.enabled {
                let endpoints_live = enabled_nodes.contains(&gene.from) && enabled_nodes.contains(&gene.to);
                let duplicate = seen.contains(&(gene.from, gene.to, gene.link_kind));
                let cycle = gene.link_kind == LinkKind::Layer && kept.reaches(gene.to, gene.from);
                if !endpoints_live || duplicate || cycle {
                    gene.enabled = false;
                } else {
                    seen.insert((gene.from, gene.to, gene.link_kind));
                }
            }
            kept.edges.push(gene);
        }
        self.edges = kept.edges;

        let (Some(input), Some(output)) = (self.input_id(), self.output_id()) else {
            return false;
        };
        if !self.reaches(input, output) {
            return false;
        }
        let on_paths = self.nodes_on_paths();
        let dropped: BTreeSet<Innovation> = self
            .nodes
            .iter()
            .filter(|n| n.enabled && !on_paths.contains(&n.innovation))
            .map(|n| n.innovation)
            .collect();
        self.nodes.retain(|n| !dropped.contains(&n.innovation));
        self.edges
            .retain(|e| !dropped.contains(&e.from) && !dropped.contains(&e.to));
        self.check_invariants().is_ok()
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::dense_space;
    use super::super::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn alignment_partitions() {
        let ids = |v: &[u64]| v.iter().map(|x| Innovation(*x)).collect::<Vec<_>>();
        let al = align(&ids(&[0, 1, 2, 5, 9]), &ids(&[0, 1, 3, 5, 6, 7]));
        assert_eq!(al.matching, ids(&[0, 1, 5]));
        assert_eq!(al.disjoint_a, ids(&[2]));
        assert_eq!(al.disjoint_b, ids(&[3, 6, 7]));
        assert_eq!(al.excess_a, ids(&[9]));
        assert!(al.excess_b.is_empty());
        let empty = align(&[], &ids(&[4]));
        assert_eq!(empty.excess_b, ids(&[4]));
    }

    #[test]
    fn identical_parents_give_identical_child() {
        let space = dense_space();
        let mut reg = InnovationRegistry::new();
        let mut r = rng(3);
        let mut a = minimal_chromosome(&space, &mut r);
        for _ in 0..6 {
            a.mutate_add_node(&mut reg, &mut r, |r| Layer::sample(&space, r));
            a.mutate_add_edge(&mut reg, &mut r);
        }
        for seed in 0..20 {
            let child = crossover(&a, &a, 1.0, 1.0, &mut rng(seed)).unwrap();
            assert_eq!(child, a);
        }
    }

    #[test]
    fn fitter_parent_contributes_its_split() {
        let space = dense_space();
        let mut reg = InnovationRegistry::new();
        let b = minimal_chromosome(&space, &mut rng(1));
        let mut a = b.clone();
        let ids = a
            .split_connection(MINIMAL_OUTPUT_EDGE, Layer::sample(&space, &mut rng(2)), &mut reg)
            .unwrap();
        for seed in 0..20 {
            let child = crossover(&a, &b, 2.0, 1.0, &mut rng(seed)).unwrap();
            assert!(child.node(ids.node).is_some());
            child.check_invariants().unwrap();
            // the less fit parent never adds its disjoint genes
            let child = crossover(&a, &b, 0.5, 1.0, &mut rng(seed)).unwrap();
            assert!(child.node(ids.node).is_none());
            child.check_invariants().unwrap();
        }
    }

    #[test]
    fn distance_of_one_extra_disjoint_edge() {
        // four genes: input, output, a detached disabled node, and input → output
        let mut a: ModuleChromosome = Chromosome::from_parts(
            vec![
                NodeGene::boundary(INPUT_NODE, NodeRole::Input),
                NodeGene::boundary(OUTPUT_NODE, NodeRole::Output),
                NodeGene {
                    enabled: false,
                    ..NodeGene::hidden(Innovation(2), Layer::sample(&dense_space(), &mut rng(1)))
                },
            ],
            vec![ConnectionGene::layer(Innovation(5), INPUT_NODE, OUTPUT_NODE)],
            Default::default(),
        );
        a.check_invariants().unwrap();
        let mut b = a.clone();
        b.insert_edge(ConnectionGene {
            enabled: false,
            ..ConnectionGene::layer(Innovation(3), INPUT_NODE, Innovation(2))
        });
        assert_eq!(a.gene_count(), 4);
        assert_eq!(b.gene_count(), 5);
        let coeffs = CompatibilityCoefficients {
            excess: 0.0,
            disjoint: 1.0,
            params: 0.0,
        };
        assert_eq!(compatibility_distance(&a, &b, &coeffs, &[]), 0.2);
        assert_eq!(compatibility_distance(&a, &a, &CompatibilityCoefficients::default(), &[]), 0.0);
        a.nodes[2].enabled = true;
        assert!(a.check_invariants().is_err());
    }

    #[test]
    fn repair_prunes_orphans_and_breaks_cycles() {
        let space = dense_space();
        let mut reg = InnovationRegistry::new();
        let mut c = minimal_chromosome(&space, &mut rng(1));
        let split = c
            .split_connection(MINIMAL_OUTPUT_EDGE, Layer::sample(&space, &mut rng(2)), &mut reg)
            .unwrap();
        // a back edge closing a loop and a detached node
        c.insert_edge(ConnectionGene::layer(Innovation(100), split.node, MINIMAL_HIDDEN));
        c.insert_node(NodeGene::hidden(Innovation(101), Layer::sample(&space, &mut rng(3))));
        assert!(c.check_invariants().is_err());
        assert!(c.repair());
        c.check_invariants().unwrap();
        assert!(c.node(Innovation(101)).is_none());
        assert!(!c.edge(Innovation(100)).unwrap().enabled);
    }
}
