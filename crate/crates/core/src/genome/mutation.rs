use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::{
    Chromosome, ConnectionGene, GenomeError, Innovation, InnovationRegistry, LinkKind, NodeGene, NodePayload,
    NodeRole, SplitIds,
};

/// Whether a mutation operator changed the chromosome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    Applied,
    NoOp,
}

impl Mutation {
    pub fn applied(self) -> bool {
        self == Mutation::Applied
    }
}

impl<P: NodePayload> Chromosome<P> {
    /// Disables `edge` and routes it through a new hidden node carrying `payload`.
    pub fn split_connection(
        &mut self,
        edge: Innovation,
        payload: P,
        registry: &mut InnovationRegistry,
    ) -> Result<SplitIds, GenomeError> {
        let gene = *self.edge(edge).ok_or(GenomeError::UnknownGene(edge))?;
        if gene.link_kind != LinkKind::Layer {
            return Err(GenomeError::NotLayerConnection(edge));
        }
        if !gene.enabled {
            return Err(GenomeError::IllegalConnection { from: gene.from, to: gene.to });
        }
        let mut ids = registry.split(edge, gene.from, gene.to);
        if [ids.node, ids.incoming, ids.outgoing].iter().any(|id| self.contains_id(*id)) {
            ids = registry.fresh_split(gene.from, gene.to);
        }
        self.edge_mut(edge).expect("looked up above").enabled = false;
        self.insert_node(NodeGene::hidden(ids.node, payload));
        self.insert_edge(ConnectionGene::layer(ids.incoming, gene.from, ids.node));
        self.insert_edge(ConnectionGene::layer(ids.outgoing, ids.node, gene.to));
        Ok(ids)
    }

    /// Splits a uniformly chosen enabled layer connection.
    pub fn mutate_add_node<R: Rng + ?Sized>(
        &mut self,
        registry: &mut InnovationRegistry,
        rng: &mut R,
        new_payload: impl FnOnce(&mut R) -> P,
    ) -> Mutation {
        let candidates: Vec<Innovation> = self
            .edges
            .iter()
            .filter(|e| e.enabled && e.link_kind == LinkKind::Layer)
            .map(|e| e.innovation)
            .collect();
        let Some(&edge) = candidates.choose(rng) else {
            return Mutation::NoOp;
        };
        let payload = new_payload(rng);
        self.split_connection(edge, payload, registry)
            .expect("candidate is an enabled layer connection");
        Mutation::Applied
    }

    /// Whether a new layer connection `from → to` keeps every invariant.
    pub fn can_connect(&self, from: Innovation, to: Innovation) -> bool {
        let (Some(a), Some(b)) = (self.node(from), self.node(to)) else {
            return false;
        };
        from != to
            && a.enabled
            && b.enabled
            && a.role != NodeRole::Output
            && b.role != NodeRole::Input
            && !self
                .edges
                .iter()
                .any(|e| e.from == from && e.to == to && e.link_kind == LinkKind::Layer)
            && !self.reaches(to, from)
    }

    pub fn connect(
        &mut self,
        from: Innovation,
        to: Innovation,
        registry: &mut InnovationRegistry,
    ) -> Result<Innovation, GenomeError> {
        if !self.can_connect(from, to) {
            return Err(GenomeError::IllegalConnection { from, to });
        }
        let id = registry.connection(from, to, LinkKind::Layer);
        if self.contains_id(id) {
            return Err(GenomeError::IllegalConnection { from, to });
        }
        self.insert_edge(ConnectionGene::layer(id, from, to));
        Ok(id)
    }

    /// Adds a connection between a uniformly chosen legal pair of enabled
    /// nodes; no-op when the graph is saturated.
    pub fn mutate_add_edge<R: Rng + ?Sized>(&mut self, registry: &mut InnovationRegistry, rng: &mut R) -> Mutation {
        let enabled: Vec<Innovation> = self.nodes.iter().filter(|n| n.enabled).map(|n| n.innovation).collect();
        let legal: Vec<(Innovation, Innovation)> = enabled
            .iter()
            .flat_map(|a| enabled.iter().map(move |b| (*a, *b)))
            .filter(|(a, b)| self.can_connect(*a, *b))
            .collect();
        match legal.choose(rng) {
            Some(&(from, to)) => {
                self.connect(from, to, registry).expect("checked legal");
                Mutation::Applied
            }
            None => Mutation::NoOp,
        }
    }

    /// Flips one layer connection, keeping the flip only if every invariant
    /// still holds afterwards.
    pub fn toggle_connection(&mut self, edge: Innovation) -> Result<(), GenomeError> {
        let gene = self.edge_mut(edge).ok_or(GenomeError::UnknownGene(edge))?;
        if gene.link_kind != LinkKind::Layer {
            return Err(GenomeError::NotLayerConnection(edge));
        }
        gene.enabled = !gene.enabled;
        if let Err(violation) = self.check_invariants() {
            let gene = self.edge_mut(edge).expect("present");
            gene.enabled = !gene.enabled;
            return Err(violation.into());
        }
        Ok(())
    }

    /// Enables or disables a uniformly chosen layer connection; flips that
    /// would break connectivity or acyclicity are rejected and the next
    /// candidate is tried.
    pub fn toggle_layer_connection<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Mutation {
        let mut candidates: Vec<Innovation> = self
            .edges
            .iter()
            .filter(|e| e.link_kind == LinkKind::Layer)
            .map(|e| e.innovation)
            .collect();
        candidates.shuffle(rng);
        for edge in candidates {
            if self.toggle_connection(edge).is_ok() {
                return Mutation::Applied;
            }
        }
        Mutation::NoOp
    }

    /// Adds a cell-skip connection between two LSTM nodes that are not yet joined.
    pub fn add_skip_connection<R: Rng + ?Sized>(&mut self, registry: &mut InnovationRegistry, rng: &mut R) -> Mutation {
        let lstm = self.lstm_nodes();
        let mut pairs = Vec::new();
        for &from in &lstm {
            for &to in &lstm {
                if from != to
                    && !self
                        .edges
                        .iter()
                        .any(|e| e.from == from && e.to == to && e.link_kind == LinkKind::CellSkip)
                {
                    pairs.push((from, to));
                }
            }
        }
        let Some(&(from, to)) = pairs.choose(rng) else {
            return Mutation::NoOp;
        };
        let id = registry.connection(from, to, LinkKind::CellSkip);
        if self.contains_id(id) {
            return Mutation::NoOp;
        }
        self.insert_edge(ConnectionGene {
            innovation: id,
            from,
            to,
            enabled: true,
            link_kind: LinkKind::CellSkip,
        });
        Mutation::Applied
    }

    /// Deletes a uniformly chosen cell-skip connection.
    pub fn remove_skip_connection<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Mutation {
        let skips: Vec<Innovation> = self
            .edges
            .iter()
            .filter(|e| e.link_kind == LinkKind::CellSkip)
            .map(|e| e.innovation)
            .collect();
        let Some(&id) = skips.choose(rng) else {
            return Mutation::NoOp;
        };
        self.edges.retain(|e| e.innovation != id);
        Mutation::Applied
    }

    /// With probability ½ adds a cell-skip connection, otherwise removes one.
    pub fn mutate_skip_connection<R: Rng + ?Sized>(
        &mut self,
        registry: &mut InnovationRegistry,
        rng: &mut R,
    ) -> Result<Mutation, GenomeError> {
        let lstm = self.lstm_nodes().len();
        if lstm < 2 {
            return Err(GenomeError::TooFewLstmNodes(lstm));
        }
        Ok(if rng.random_bool(0.5) {
            self.add_skip_connection(registry, rng)
        } else {
            self.remove_skip_connection(rng)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::dense_space;
    use super::super::*;
    use super::*;
    use crate::hyperparams::{HyperparameterSpace, HyperparameterSpec, LayerKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn lstm_space() -> HyperparameterSpace {
        HyperparameterSpace {
            layer_kinds: vec![LayerKind::Lstm],
            node_params: vec![HyperparameterSpec::integer("hidden_size", 650, 650)],
            global_params: vec![],
        }
    }

    #[test]
    fn add_node_on_minimal() {
        let space = dense_space();
        let mut r = rng(1);
        let mut reg = InnovationRegistry::new();
        let mut c = minimal_chromosome(&space, &mut r);
        let m = c.mutate_add_node(&mut reg, &mut r, |r| Layer::sample(&space, r));
        assert!(m.applied());
        assert_eq!(c.nodes.len(), 4);
        assert_eq!(c.edges.len(), 4);
        assert_eq!(c.edges.iter().filter(|e| !e.enabled).count(), 1);
        c.check_invariants().unwrap();
    }

    #[test]
    fn same_split_in_one_generation_shares_ids() {
        let space = dense_space();
        let mut reg = InnovationRegistry::new();
        let mut a = minimal_chromosome(&space, &mut rng(1));
        let mut b = minimal_chromosome(&space, &mut rng(2));
        let pa = Layer::sample(&space, &mut rng(3));
        let ia = a.split_connection(MINIMAL_INPUT_EDGE, pa.clone(), &mut reg).unwrap();
        let ib = b.split_connection(MINIMAL_INPUT_EDGE, pa, &mut reg).unwrap();
        assert_eq!(ia, ib);
        reg.advance_generation();
        let mut c = minimal_chromosome(&space, &mut rng(4));
        let ic = c
            .split_connection(MINIMAL_INPUT_EDGE, Layer::sample(&space, &mut rng(5)), &mut reg)
            .unwrap();
        assert_ne!(ic.node, ia.node);
    }

    #[test]
    fn repeated_split_in_one_chromosome_gets_fresh_ids() {
        let space = dense_space();
        let mut reg = InnovationRegistry::new();
        let mut c = minimal_chromosome(&space, &mut rng(1));
        let first = c
            .split_connection(MINIMAL_INPUT_EDGE, Layer::sample(&space, &mut rng(2)), &mut reg)
            .unwrap();
        c.toggle_connection(MINIMAL_INPUT_EDGE).unwrap();
        let second = c
            .split_connection(MINIMAL_INPUT_EDGE, Layer::sample(&space, &mut rng(3)), &mut reg)
            .unwrap();
        assert_ne!(first.node, second.node);
        c.check_invariants().unwrap();
    }

    #[test]
    fn add_edge_enumeration_on_chain() {
        let space = dense_space();
        let c = minimal_chromosome(&space, &mut rng(1));
        // chain input → hidden → output: the only legal new connection is input → output
        let ids: Vec<_> = c.nodes.iter().map(|n| n.innovation).collect();
        let legal: Vec<_> = ids
            .iter()
            .flat_map(|a| ids.iter().map(move |b| (*a, *b)))
            .filter(|(a, b)| c.can_connect(*a, *b))
            .collect();
        assert_eq!(legal, vec![(INPUT_NODE, OUTPUT_NODE)]);

        let mut reg = InnovationRegistry::new();
        let mut c1 = c.clone();
        assert!(c1.mutate_add_edge(&mut reg, &mut rng(2)).applied());
        assert!(c1.edges.iter().any(|e| e.from == INPUT_NODE && e.to == OUTPUT_NODE));
        c1.check_invariants().unwrap();
        // saturated: nothing left to add
        assert_eq!(c1.mutate_add_edge(&mut reg, &mut rng(3)), Mutation::NoOp);

        let mut c2 = minimal_chromosome(&space, &mut rng(9));
        c2.mutate_add_edge(&mut reg, &mut rng(4));
        let id1 = c1.edges.iter().find(|e| e.from == INPUT_NODE && e.to == OUTPUT_NODE).unwrap().innovation;
        let id2 = c2.edges.iter().find(|e| e.from == INPUT_NODE && e.to == OUTPUT_NODE).unwrap().innovation;
        assert_eq!(id1, id2);
    }

    #[test]
    fn toggle_on_redundant_path() {
        let space = dense_space();
        let mut reg = InnovationRegistry::new();
        let mut c = minimal_chromosome(&space, &mut rng(1));
        let shortcut = c.connect(INPUT_NODE, OUTPUT_NODE, &mut reg).unwrap();
        // only the shortcut may be disabled; the chain edges would strand the hidden node
        assert!(c.toggle_connection(MINIMAL_INPUT_EDGE).is_err());
        assert!(c.toggle_connection(MINIMAL_OUTPUT_EDGE).is_err());
        let before = c.clone();
        assert!(c.toggle_layer_connection(&mut rng(2)).applied());
        assert!(!c.edge(shortcut).unwrap().enabled);
        c.check_invariants().unwrap();
        c.toggle_connection(shortcut).unwrap();
        assert_eq!(c, before);
    }

    #[test]
    fn toggle_on_single_chain_is_noop() {
        let mut c = minimal_chromosome(&dense_space(), &mut rng(1));
        let before = c.clone();
        assert_eq!(c.toggle_layer_connection(&mut rng(2)), Mutation::NoOp);
        assert_eq!(c, before);
    }

    fn stacked_lstm() -> (ModuleChromosome, InnovationRegistry) {
        let space = lstm_space();
        let mut reg = InnovationRegistry::new();
        let mut c = minimal_chromosome(&space, &mut rng(1));
        c.split_connection(MINIMAL_OUTPUT_EDGE, Layer::sample(&space, &mut rng(2)), &mut reg)
            .unwrap();
        (c, reg)
    }

    #[test]
    fn skip_connection_add_and_remove() {
        let (mut c, mut reg) = stacked_lstm();
        let original = c.clone();
        assert_eq!(c.remove_skip_connection(&mut rng(3)), Mutation::NoOp);
        assert!(c.add_skip_connection(&mut reg, &mut rng(4)).applied());
        let skips: Vec<_> = c.edges.iter().filter(|e| e.link_kind == LinkKind::CellSkip).collect();
        assert_eq!(skips.len(), 1);
        assert!(c.node_is_lstm(skips[0].from) && c.node_is_lstm(skips[0].to));
        c.check_invariants().unwrap();
        assert!(c.remove_skip_connection(&mut rng(5)).applied());
        assert_eq!(c, original);
    }

    #[test]
    fn skip_connections_may_form_feedback_loops() {
        let (mut c, mut reg) = stacked_lstm();
        assert!(c.add_skip_connection(&mut reg, &mut rng(1)).applied());
        assert!(c.add_skip_connection(&mut reg, &mut rng(2)).applied());
        c.check_invariants().unwrap();
        assert_eq!(c.add_skip_connection(&mut reg, &mut rng(3)), Mutation::NoOp);
    }

    #[test]
    fn skip_mutation_needs_two_lstm_nodes() {
        let mut c = minimal_chromosome(&lstm_space(), &mut rng(1));
        let mut reg = InnovationRegistry::new();
        assert_eq!(
            c.mutate_skip_connection(&mut reg, &mut rng(2)),
            Err(GenomeError::TooFewLstmNodes(1))
        );
    }

    /// Shadow map: every id ever handed out, with the structural event it
    /// stood for. The same id must never describe two different events.
    #[test]
    fn innovation_ids_never_collide_across_events() {
        let space = dense_space();
        let mut r = rng(77);
        let mut reg = InnovationRegistry::new();
        let mut pop: Vec<ModuleChromosome> = (0..8).map(|_| minimal_chromosome(&space, &mut r)).collect();
        let mut shadow: BTreeMap<Innovation, (Innovation, Innovation, LinkKind)> = BTreeMap::new();
        for generation in 0..30 {
            if generation > 0 {
                reg.advance_generation();
            }
            for c in pop.iter_mut() {
                if r.random_bool(0.5) {
                    c.mutate_add_node(&mut reg, &mut r, |r| Layer::sample(&space, r));
                } else {
                    c.mutate_add_edge(&mut reg, &mut r);
                }
                c.check_invariants().unwrap();
                for e in &c.edges {
                    let key = (e.from, e.to, e.link_kind);
                    assert_eq!(*shadow.entry(e.innovation).or_insert(key), key);
                }
            }
            for c in &pop {
                for n in &c.nodes {
                    assert!(!shadow.contains_key(&n.innovation), "node id {} reused as a connection id", n.innovation);
                }
            }
        }
    }
}
