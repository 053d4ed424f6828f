//! Reconstructible sets: the monotone surrogate for accepted sets that
//! extends the lower-bound machinery to non-monotone filters.
//!
//! A sequence conforms to a partition when it is self-contained and every
//! operation respects the size-window rule: keys from block k are inserted
//! only while the true set size lies in [(k-1)n/b, kn/b) and deleted only
//! while it lies in ((k-1)n/b, kn/b]. The reconstructible set of a state F
//! collects every key witnessed in the true set of some conforming-reachable
//! state sharing F's memory and true-set size. At desk scale the
//! existential over sequences is decided exactly by a breadth-first closure
//! over (memory, true set) pairs.

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::Serialize;

use crate::accepted::{enumerate_accepted, AcceptedSet};
use crate::filter::{self, FilterCore, FilterError, FilterInstance, FilterOp, FilterParams, ImplId};
use crate::obfuscation::{run_general_with_oracle, GeneralRun, Partition, SetOracle};
use crate::tape::RandomTape;
use crate::warmup::{AccountingMode, ProtocolError};

/// True iff the sequence is valid from an empty filter: no deletions of
/// non-elements, no duplicate insertions.
pub fn check_self_contained(seq: &[FilterOp]) -> bool {
    let mut set = BTreeSet::new();
    for op in seq {
        match *op {
            FilterOp::Insert(x) => {
                if !set.insert(x) {
                    return false;
                }
            }
            FilterOp::Delete(x) => {
                if !set.remove(&x) {
                    return false;
                }
            }
        }
    }
    true
}

/// True iff the sequence is self-contained and every operation obeys the
/// partition's size-window rule.
pub fn check_conforms(seq: &[FilterOp], partition: &Partition, n: u64, b: u64) -> bool {
    let q = n / b;
    if q == 0 {
        return false;
    }
    let mut set = BTreeSet::new();
    for op in seq {
        match *op {
            FilterOp::Insert(x) => {
                if set.contains(&x) {
                    return false;
                }
                let size = set.len() as u64;
                if size >= n || partition.block_of(x) as u64 != size / q {
                    return false;
                }
                set.insert(x);
            }
            FilterOp::Delete(x) => {
                if !set.remove(&x) {
                    return false;
                }
                let size = set.len() as u64 + 1; // size before the delete
                if partition.block_of(x) as u64 != (size - 1) / q {
                    return false;
                }
            }
        }
    }
    true
}

/// One reachable (memory, true set) state.
#[derive(Debug, Clone)]
pub struct GraphNode {
    pub memory: Vec<u8>,
    pub true_set: Vec<u64>,
    /// A live filter at this state, for further extension.
    pub state: FilterInstance,
}

/// Statistics emitted with `--stats-out`.
#[derive(Debug, Clone, Serialize)]
pub struct GraphStats {
    pub nodes: u64,
    pub edges: u64,
    /// Largest number of distinct states sharing one memory image.
    pub max_memory_multiplicity: u64,
}

/// Breadth-first closure of (memory, true set) states reachable from the
/// empty filter by partition-conforming operations.
pub struct ConformingStateGraph {
    pub impl_id: ImplId,
    pub params: FilterParams,
    pub b: u64,
    partition: Partition,
    nodes: Vec<GraphNode>,
    index: HashMap<(Vec<u8>, Vec<u64>), usize>,
    by_memory_size: HashMap<(Vec<u8>, u64), Vec<usize>>,
    edges: u64,
}

/// Default closure size limit; construction fails explicitly beyond it.
pub const DEFAULT_NODE_CAP: usize = 1_000_000;

/// Clamp for graph construction: only tiny instances are meant to fit.
pub fn build_state_graph(
    impl_id: ImplId,
    params: FilterParams,
    partition: &Partition,
    tape: RandomTape,
    node_cap: usize,
) -> Result<ConformingStateGraph, ProtocolError> {
    let n = params.capacity;
    let b = partition.b;
    if !n.is_multiple_of(b) {
        return Err(ProtocolError::Divisibility(format!("b = {b} must divide n = {n}")));
    }
    let q = n / b;
    let empty = filter::initialize(params, tape, impl_id)?;
    let mut graph = ConformingStateGraph {
        impl_id,
        params,
        b,
        partition: partition.clone(),
        nodes: Vec::new(),
        index: HashMap::new(),
        by_memory_size: HashMap::new(),
        edges: 0,
    };
    graph.push_node(&empty);
    let mut queue = VecDeque::from([0usize]);
    while let Some(id) = queue.pop_front() {
        let state = graph.nodes[id].state.clone();
        let size = state.len();
        for x in 0..params.universe_size {
            let member = state.true_set().contains(&x);
            let allowed = if member {
                size >= 1 && partition.block_of(x) as u64 == (size - 1) / q
            } else {
                size < n && partition.block_of(x) as u64 == size / q
            };
            if !allowed {
                continue;
            }
            let mut next = state.clone();
            if member {
                next.delete(x)?;
            } else {
                next.insert(x)?;
            }
            graph.edges += 1;
            let key = (next.serialize_canonical(), set_vec(&next));
            if !graph.index.contains_key(&key) {
                if graph.nodes.len() >= node_cap {
                    return Err(ProtocolError::BadSchedule(format!(
                        "conforming state graph exceeds the node cap {node_cap}"
                    )));
                }
                let new_id = graph.push_node(&next);
                queue.push_back(new_id);
            }
        }
    }
    Ok(graph)
}

fn set_vec(f: &FilterInstance) -> Vec<u64> {
    f.true_set().iter().copied().collect()
}

impl ConformingStateGraph {
    fn push_node(&mut self, state: &FilterInstance) -> usize {
        let memory = state.serialize_canonical();
        let true_set = set_vec(state);
        let id = self.nodes.len();
        self.index.insert((memory.clone(), true_set.clone()), id);
        self.by_memory_size
            .entry((memory.clone(), true_set.len() as u64))
            .or_default()
            .push(id);
        self.nodes.push(GraphNode { memory, true_set, state: state.clone() });
        id
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn stats(&self) -> GraphStats {
        let mut by_memory: HashMap<&[u8], u64> = HashMap::new();
        for node in &self.nodes {
            *by_memory.entry(node.memory.as_slice()).or_default() += 1;
        }
        GraphStats {
            nodes: self.nodes.len() as u64,
            edges: self.edges,
            max_memory_multiplicity: by_memory.values().copied().max().unwrap_or(0),
        }
    }

    pub fn contains_state(&self, f: &FilterInstance) -> bool {
        self.index.contains_key(&(f.serialize_canonical(), set_vec(f)))
    }

    /// The reconstructible set of a state given its memory image and true
    /// set size: union of true sets over all matching closure nodes.
    pub fn reconstructible_set_for(
        &self,
        core: &FilterCore,
        true_set_size: u64,
    ) -> Result<AcceptedSet, FilterError> {
        let memory = core.serialize_canonical();
        let ids = self.by_memory_size.get(&(memory, true_set_size)).ok_or_else(|| {
            FilterError::InvalidParams(
                "state not in the conforming closure (not built by a conforming sequence)".into(),
            )
        })?;
        let mut members = BTreeSet::new();
        for &id in ids {
            members.extend(self.nodes[id].true_set.iter().copied());
        }
        let members: Vec<u64> = members.into_iter().collect();
        Ok(AcceptedSet::from_members(self.params.universe_size, &members))
    }

    /// Convenience form for harness-held instances.
    pub fn reconstructible_set(&self, f: &FilterInstance) -> Result<AcceptedSet, FilterError> {
        self.reconstructible_set_for(f.core(), f.len())
    }

    /// Node ids reachable from `start` by extensions whose difference is
    /// self-contained (deletes only keys inserted after `start`) and
    /// conforming.
    fn self_contained_extensions(&self, start: usize) -> Vec<usize> {
        let q = self.params.capacity / self.b;
        let base: BTreeSet<u64> = self.nodes[start].true_set.iter().copied().collect();
        let mut visited = vec![false; self.nodes.len()];
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut out = vec![start];
        while let Some(id) = queue.pop_front() {
            let node = &self.nodes[id];
            let size = node.true_set.len() as u64;
            let set: BTreeSet<u64> = node.true_set.iter().copied().collect();
            for x in 0..self.params.universe_size {
                let member = set.contains(&x);
                let allowed = if member {
                    // self-contained difference: never delete a base key
                    !base.contains(&x)
                        && size >= 1
                        && self.partition.block_of(x) as u64 == (size - 1) / q
                } else {
                    size < self.params.capacity
                        && self.partition.block_of(x) as u64 == size / q
                };
                if !allowed {
                    continue;
                }
                let mut next = node.state.clone();
                if member {
                    next.delete(x).expect("edge valid");
                } else {
                    next.insert(x).expect("edge valid");
                }
                let key = (next.serialize_canonical(), set_vec(&next));
                if let Some(&nid) = self.index.get(&key) {
                    if !visited[nid] {
                        visited[nid] = true;
                        queue.push_back(nid);
                        out.push(nid);
                    }
                } else {
                    // conforming closure must contain every conforming
                    // extension
                    unreachable!("extension leads outside the closure");
                }
            }
        }
        out
    }
}

/// Report of the sandwich and monotone-substitution checks over the whole
/// closure.
#[derive(Debug, Clone, Serialize)]
pub struct LemmaReport {
    pub nodes_checked: u64,
    pub pairs_checked: u64,
    /// Violations of trueset(F) ⊆ recon(F) ⊆ A(F), verbatim.
    pub sandwich_counterexamples: Vec<String>,
    /// Violations of recon(G) ⊆ recon(F) over prefix pairs with
    /// |trueset(G)| a multiple of n/b, verbatim.
    pub monotone_counterexamples: Vec<String>,
    /// Off-multiple pairs are recorded but not asserted.
    pub off_multiple_pairs: u64,
    pub off_multiple_holds: u64,
}

impl LemmaReport {
    pub fn holds(&self) -> bool {
        self.sandwich_counterexamples.is_empty() && self.monotone_counterexamples.is_empty()
    }
}

/// Exhaustive verification over the closure: the sandwich
/// trueset ⊆ recon ⊆ accepted at every node, and recon(G) ⊆ recon(F) for
/// every conforming prefix pair with self-contained difference.
pub fn verify_section5_lemma(graph: &ConformingStateGraph) -> Result<LemmaReport, ProtocolError> {
    let q = graph.params.capacity / graph.b;
    let mut report = LemmaReport {
        nodes_checked: 0,
        pairs_checked: 0,
        sandwich_counterexamples: Vec::new(),
        monotone_counterexamples: Vec::new(),
        off_multiple_pairs: 0,
        off_multiple_holds: 0,
    };
    // sandwich per node
    let mut recon_cache: HashMap<usize, AcceptedSet> = HashMap::new();
    for (id, node) in graph.nodes.iter().enumerate() {
        let recon = graph.reconstructible_set(&node.state).map_err(ProtocolError::Filter)?;
        let accepted = enumerate_accepted(node.state.core())?;
        report.nodes_checked += 1;
        for &x in &node.true_set {
            if !recon.contains(x) {
                report
                    .sandwich_counterexamples
                    .push(format!("node {id}: true key {x} missing from reconstructible set"));
            }
        }
        if !recon.is_subset_of(&accepted) {
            report.sandwich_counterexamples.push(format!(
                "node {id}: reconstructible set {:?} not inside accepted set {:?}",
                recon.members(),
                accepted.members()
            ));
        }
        recon_cache.insert(id, recon);
    }
    // monotone substitution over prefix pairs
    for g_id in 0..graph.nodes.len() {
        let g_size = graph.nodes[g_id].true_set.len() as u64;
        let multiple = g_size.is_multiple_of(q);
        let g_recon = recon_cache[&g_id].clone();
        for f_id in graph.self_contained_extensions(g_id) {
            let holds = g_recon.is_subset_of(&recon_cache[&f_id]);
            if multiple {
                report.pairs_checked += 1;
                if !holds {
                    report.monotone_counterexamples.push(format!(
                        "G node {g_id} (set {:?}) -> F node {f_id} (set {:?}): recon(G) ⊄ recon(F)",
                        graph.nodes[g_id].true_set, graph.nodes[f_id].true_set
                    ));
                }
            } else {
                report.off_multiple_pairs += 1;
                report.off_multiple_holds += u64::from(holds);
            }
        }
    }
    Ok(report)
}

/// Protocol Q_s with reconstructible sets in place of accepted sets; valid
/// for any implementation, including non-monotone ones. Tiny scale only
/// (the closure is built per run for the run's partition).
#[allow(clippy::too_many_arguments)]
pub fn run_general_reconstructible(
    impl_id: ImplId,
    params: FilterParams,
    b: u64,
    m_cap: u64,
    s: u64,
    seed: u64,
    mode: AccountingMode,
    node_cap: usize,
) -> Result<GeneralRun, ProtocolError> {
    let tape = RandomTape::new(seed);
    run_general_with_oracle(impl_id, params, b, m_cap, s, seed, mode, &mut |partition| {
        let graph = build_state_graph(impl_id, params, partition, tape, node_cap)?;
        Ok(SetOracle::Reconstructible(Box::new(graph)))
    })
}
