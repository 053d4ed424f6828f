//! The general protocol for history-dependent monotone filters: random
//! universe partition, obfuscating tree, the operational sequence induced
//! by its depth-first traversal, protocol Q_s over batched keys, the
//! coupling check behind the tree's statistical camouflage, and operation
//! budgets.
//!
//! The tree has depth b with per-node child counts uniform in [1, M]. Every
//! level-k edge carries n/b distinct keys from the k-th partition block;
//! the rightmost level-k edge carries Alice's batch X_k, every other edge a
//! public sequence. The DFS traversal inserts a label walking down and
//! deletes it walking up, so both parties' filter states are prefixes of
//! one public-plus-private sequence, and conditioning on the rightmost
//! child counts couples the two sides' distributions exactly.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};

use crate::accepted::{self, enumerate_accepted, AVectorEstimate, AcceptedSet};
use crate::coding::{
    self, code_indicator, code_raw, code_rank, decode_filter_transfer, decode_rank,
    filter_transfer_segment, fixed_width_for, log_falling_factorial, CodingError, SegmentKind,
    StreamDecoder, StreamEncoder, StreamPayload, Transcript,
};
use crate::filter::{self, FilterCore, FilterInstance, FilterOp, FilterParams, ImplId};
use crate::reconstructible::{check_conforms, ConformingStateGraph};
use crate::tape::{derive_trial_seed, domain, RandomTape, TapeReader};
use crate::warmup::{AccountingMode, ProtocolError};

/// Equal-size random partition of the universe into b blocks.
#[derive(Debug, Clone)]
pub struct Partition {
    pub b: u64,
    blocks: Vec<Vec<u64>>,
    block_of: Vec<u32>,
}

impl Partition {
    /// Tape-driven uniform partition; requires b | u.
    pub fn sample(u: u64, b: u64, reader: &mut TapeReader) -> Result<Self, ProtocolError> {
        if b == 0 || !u.is_multiple_of(b) {
            return Err(ProtocolError::Divisibility(format!("b = {b} must divide u = {u}")));
        }
        let mut keys: Vec<u64> = (0..u).collect();
        let shuffled = reader.sample_distinct(&mut keys, u as usize);
        let size = (u / b) as usize;
        let mut blocks = Vec::with_capacity(b as usize);
        let mut block_of = vec![0u32; u as usize];
        for k in 0..b as usize {
            let mut block: Vec<u64> = shuffled[k * size..(k + 1) * size].to_vec();
            block.sort_unstable();
            for &key in &block {
                block_of[key as usize] = k as u32;
            }
            blocks.push(block);
        }
        Ok(Partition { b, blocks, block_of })
    }

    /// Block k (0-based), sorted ascending.
    pub fn block(&self, k0: usize) -> &[u64] {
        &self.blocks[k0]
    }

    pub fn block_of(&self, key: u64) -> usize {
        self.block_of[key as usize] as usize
    }

    pub fn block_size(&self) -> u64 {
        self.blocks[0].len() as u64
    }

    pub fn universe(&self) -> u64 {
        self.block_of.len() as u64
    }
}

#[derive(Debug, Clone)]
struct TreeNode {
    level: u64,
    children: Vec<usize>,
    /// Keys labeling the edge from the parent (empty for the root; empty
    /// for a rightmost edge until its batch is known).
    label: Vec<u64>,
    rightmost: bool,
}

/// The random depth-b tree. Shape and non-rightmost labels come from the
/// public tape; rightmost labels are Alice's batches and may be filled in
/// later (the decoder learns them batch by batch).
#[derive(Debug, Clone)]
pub struct ObfuscationTree {
    pub b: u64,
    pub m_cap: u64,
    keys_per_edge: u64,
    nodes: Vec<TreeNode>,
    rightmost_path: Vec<usize>,
}

impl ObfuscationTree {
    pub fn edge_count(&self) -> u64 {
        self.nodes.len() as u64 - 1
    }

    /// C_k: number of children of the rightmost level-k node (0 at level b).
    pub fn rightmost_child_count(&self, k: usize) -> u64 {
        self.nodes[self.rightmost_path[k]].children.len() as u64
    }

    /// Label of the rightmost level-k edge (k is 1-based).
    pub fn rightmost_label(&self, k: usize) -> &[u64] {
        &self.nodes[self.rightmost_path[k]].label
    }

    /// Installs Alice's batch on the rightmost level-k edge (k is 1-based).
    pub fn set_rightmost_label(&mut self, k: usize, label: Vec<u64>) {
        debug_assert_eq!(label.len() as u64, self.keys_per_edge);
        let node = self.rightmost_path[k];
        self.nodes[node].label = label;
    }
}

/// Samples shape and public labels from the public tape; `alice` supplies
/// the rightmost labels when known. Draw order is fixed (shape in breadth
/// first node order, then labels in the same order) so both parties derive
/// identical skeletons.
pub fn sample_tree(
    b: u64,
    m_cap: u64,
    n: u64,
    partition: &Partition,
    public: &mut TapeReader,
    alice: Option<&[Vec<u64>]>,
) -> Result<ObfuscationTree, ProtocolError> {
    if b == 0 || !n.is_multiple_of(b) {
        return Err(ProtocolError::Divisibility(format!("b = {b} must divide n = {n}")));
    }
    if m_cap == 0 {
        return Err(ProtocolError::BadSchedule("M must be at least 1".into()));
    }
    let keys_per_edge = n / b;
    if keys_per_edge > partition.block_size() {
        return Err(ProtocolError::Divisibility(format!(
            "n/b = {keys_per_edge} keys per edge exceed block size {}",
            partition.block_size()
        )));
    }
    let mut nodes =
        vec![TreeNode { level: 0, children: Vec::new(), label: Vec::new(), rightmost: true }];
    let mut rightmost_path = vec![0usize];
    let mut level_nodes = vec![0usize];
    for level in 0..b {
        let mut next_level = Vec::new();
        for &v in level_nodes.iter() {
            let d = 1 + public.uniform_below(m_cap);
            for _ in 0..d {
                let id = nodes.len();
                nodes.push(TreeNode {
                    level: level + 1,
                    children: Vec::new(),
                    label: Vec::new(),
                    rightmost: false,
                });
                nodes[v].children.push(id);
                next_level.push(id);
            }
        }
        // rightmost level-(level+1) node: last child of the current
        // rightmost node
        let parent = *rightmost_path.last().unwrap();
        let rm = *nodes[parent].children.last().unwrap();
        nodes[rm].rightmost = true;
        rightmost_path.push(rm);
        level_nodes = next_level;
    }
    // public labels for non-rightmost edges, in node order
    for node in nodes.iter_mut().skip(1) {
        if node.rightmost {
            continue;
        }
        let mut pool = partition.block((node.level - 1) as usize).to_vec();
        node.label = public.sample_distinct(&mut pool, keys_per_edge as usize);
    }
    if let Some(batches) = alice {
        debug_assert_eq!(batches.len() as u64, b);
        for (k, batch) in batches.iter().enumerate() {
            let id = rightmost_path[k + 1];
            nodes[id].label = batch.clone();
        }
    }
    Ok(ObfuscationTree { b, m_cap, keys_per_edge, nodes, rightmost_path })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    Insert,
    Delete,
}

/// The DFS-induced operational sequence in unresolved form: each step
/// references an edge (by child node) and a slot in its label. Cut
/// positions depend only on the tree shape, so the decoder knows them
/// before it knows Alice's labels.
#[derive(Debug, Clone)]
pub struct SigmaTemplate {
    steps: Vec<(OpKind, usize, usize)>,
    /// g_cuts[k]: end of the prefix stopping just before the insertion of
    /// X_{k+1} (at k = b: just after inserting X_b).
    pub g_cuts: Vec<usize>,
    /// f_cuts[k]: end of the prefix stopping just before the deletion of
    /// X_k (at k = 0: the full sequence).
    pub f_cuts: Vec<usize>,
}

impl SigmaTemplate {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Resolves steps in [from, to) against the tree's current labels.
    pub fn resolve_range(
        &self,
        tree: &ObfuscationTree,
        from: usize,
        to: usize,
    ) -> Result<Vec<FilterOp>, ProtocolError> {
        let mut ops = Vec::with_capacity(to - from);
        for &(kind, node, slot) in &self.steps[from..to] {
            let label = &tree.nodes[node].label;
            if slot >= label.len() {
                return Err(ProtocolError::DecodeFailure(
                    "sigma step references an unknown label".into(),
                ));
            }
            let key = label[slot];
            ops.push(match kind {
                OpKind::Insert => FilterOp::Insert(key),
                OpKind::Delete => FilterOp::Delete(key),
            });
        }
        Ok(ops)
    }
}

/// Builds the DFS template with all 2(b+1) cut positions.
pub fn build_sigma_template(tree: &ObfuscationTree) -> SigmaTemplate {
    let b = tree.b as usize;
    let mut t = SigmaTemplate {
        steps: Vec::new(),
        g_cuts: vec![usize::MAX; b + 1],
        f_cuts: vec![usize::MAX; b + 1],
    };
    fn dfs(tree: &ObfuscationTree, node: usize, t: &mut SigmaTemplate) {
        let per_edge = tree.keys_per_edge as usize;
        for &child in &tree.nodes[node].children {
            let level = tree.nodes[child].level as usize;
            if tree.nodes[child].rightmost {
                t.g_cuts[level - 1] = t.steps.len();
            }
            for slot in 0..per_edge {
                t.steps.push((OpKind::Insert, child, slot));
            }
            if tree.nodes[child].rightmost && level == tree.b as usize {
                t.g_cuts[level] = t.steps.len();
            }
            dfs(tree, child, t);
            if tree.nodes[child].rightmost {
                t.f_cuts[level] = t.steps.len();
            }
            for slot in (0..per_edge).rev() {
                t.steps.push((OpKind::Delete, child, slot));
            }
        }
    }
    dfs(tree, 0, &mut t);
    t.f_cuts[0] = t.steps.len();
    debug_assert!(t.g_cuts.iter().all(|&c| c != usize::MAX));
    debug_assert!(t.f_cuts.iter().all(|&c| c != usize::MAX));
    debug_assert_eq!(t.g_cuts[b], t.f_cuts[b]);
    t
}

/// Fully resolved sequence plus cuts (encoder side, all labels known).
#[derive(Debug, Clone)]
pub struct Sigma {
    pub ops: Vec<FilterOp>,
    pub g_cuts: Vec<usize>,
    pub f_cuts: Vec<usize>,
}

/// Resolves the whole template and validates the construction: the
/// sequence must be self-contained and conform to the partition.
pub fn build_sigma(
    tree: &ObfuscationTree,
    template: &SigmaTemplate,
    partition: &Partition,
    n: u64,
) -> Result<Sigma, ProtocolError> {
    let ops = template.resolve_range(tree, 0, template.len())?;
    if !check_conforms(&ops, partition, n, tree.b) {
        return Err(ProtocolError::DecodeFailure(
            "constructed sigma does not conform to the partition".into(),
        ));
    }
    Ok(Sigma { ops, g_cuts: template.g_cuts.clone(), f_cuts: template.f_cuts.clone() })
}

/// Worst-case operation count bound n·M^(b+1)/b for the protocol chain.
pub fn operation_budget(b: u64, m_cap: u64, n: u64) -> u64 {
    let pow = (m_cap as u128).checked_pow(b as u32 + 1).unwrap_or(u128::MAX);
    ((n as u128).saturating_mul(pow) / b as u128).min(u64::MAX as u128) as u64
}

/// Exact worst-case length of the DFS sequence: two ops per label key per
/// edge, summed over the maximal tree. The budget formula absorbs the
/// geometric series only for M >= 3; below that this exact cap is the
/// honest limit.
pub fn sigma_length_cap(b: u64, m_cap: u64, n: u64) -> u64 {
    let mut edges: u128 = 0;
    let mut level_width: u128 = 1;
    for _ in 0..b {
        level_width = level_width.saturating_mul(m_cap as u128);
        edges = edges.saturating_add(level_width);
    }
    (2 * (n / b) as u128).saturating_mul(edges).min(u64::MAX as u128) as u64
}

/// Which set the protocol codes ranks against: plain accepted sets, or
/// reconstructible sets backed by a conforming-state graph.
pub enum SetOracle {
    Accepted,
    Reconstructible(Box<ConformingStateGraph>),
}

impl SetOracle {
    fn set_of(&self, core: &FilterCore, true_set_size: u64) -> Result<AcceptedSet, ProtocolError> {
        match self {
            SetOracle::Accepted => Ok(enumerate_accepted(core)?),
            SetOracle::Reconstructible(graph) => {
                Ok(graph.reconstructible_set_for(core, true_set_size)?)
            }
        }
    }

    fn is_reconstructible(&self) -> bool {
        matches!(self, SetOracle::Reconstructible(_))
    }
}

/// One completed general-protocol run.
#[derive(Debug)]
pub struct GeneralRun {
    pub impl_id: ImplId,
    pub params: FilterParams,
    pub b: u64,
    pub m_cap: u64,
    pub s: u64,
    pub seed: u64,
    pub mode: AccountingMode,
    pub reconstructible: bool,
    pub batches: Vec<Vec<u64>>,
    pub transcript: Transcript,
    pub info_bound: f64,
    pub filter_bits: f64,
    pub payload_bits: f64,
    pub derived_bound: f64,
    pub decode_ok: bool,
    /// (batch k, indicator) per coded key in send order.
    pub indicators: Vec<(u64, bool)>,
    pub sigma_len: u64,
    /// Operations on the canonical protocol chain (building the transferred
    /// state plus the deletion tail).
    pub chain_ops: u64,
    pub ops_budget: u64,
    pub edge_count: u64,
    /// 9^(b^2)·n/(eps·u), the parameter-coupling residual reported next to
    /// every finite-size result.
    pub residual_coupling: f64,
    /// M relative to the 4^b schedule.
    pub m_over_4b: f64,
    pub stream_total_bits: Option<u64>,
}

/// Protocol Q_s with plain accepted sets; requires a monotone
/// implementation.
pub fn run_general(
    impl_id: ImplId,
    params: FilterParams,
    b: u64,
    m_cap: u64,
    s: u64,
    seed: u64,
    mode: AccountingMode,
) -> Result<GeneralRun, ProtocolError> {
    if !impl_id.is_monotone() {
        return Err(ProtocolError::UnsupportedImpl(impl_id));
    }
    run_general_with_oracle(impl_id, params, b, m_cap, s, seed, mode, &mut |_| {
        Ok(SetOracle::Accepted)
    })
}

/// The Q_s engine, parameterized by the set oracle (accepted sets, or the
/// reconstructible sets built for this run's partition).
#[allow(clippy::too_many_arguments)]
pub fn run_general_with_oracle(
    impl_id: ImplId,
    params: FilterParams,
    b: u64,
    m_cap: u64,
    s: u64,
    seed: u64,
    mode: AccountingMode,
    make_oracle: &mut dyn FnMut(&Partition) -> Result<SetOracle, ProtocolError>,
) -> Result<GeneralRun, ProtocolError> {
    let n = params.capacity;
    let u = params.universe_size;
    if s > b {
        return Err(ProtocolError::BadSchedule(format!("s = {s} exceeds b = {b}")));
    }
    if b == 0 || !n.is_multiple_of(b) || !u.is_multiple_of(b) {
        return Err(ProtocolError::Divisibility(format!(
            "b = {b} must divide n = {n} and u = {u}"
        )));
    }
    let per_batch = (n / b) as usize;
    let tape = RandomTape::new(seed);

    let mut partition_reader = tape.reader(domain::PUBLIC_PARTITION);
    let partition = Partition::sample(u, b, &mut partition_reader)?;
    let oracle = make_oracle(&partition)?;

    // Alice's private batches X_1..X_b
    let mut key_reader = tape.reader(domain::ALICE_KEYS);
    let batches: Vec<Vec<u64>> = (0..b as usize)
        .map(|k| {
            let mut pool = partition.block(k).to_vec();
            key_reader.sample_distinct(&mut pool, per_batch)
        })
        .collect();

    let mut tree_reader = tape.reader(domain::PUBLIC_TREE);
    let tree = sample_tree(b, m_cap, n, &partition, &mut tree_reader, Some(&batches))?;
    let template = build_sigma_template(&tree);
    let sigma = build_sigma(&tree, &template, &partition, n)?;

    // Canonical chain: one replay up to the transfer cut, snapshotting the
    // G states; every filter state of the run is a prefix of this chain.
    let mut chain = filter::initialize(params, tape, impl_id)?;
    let mut g_states: Vec<FilterInstance> = Vec::with_capacity(s as usize + 1);
    let mut pos = 0usize;
    for k in 0..=b as usize {
        for &op in &sigma.ops[pos..sigma.g_cuts[k]] {
            chain.apply(op)?;
        }
        pos = sigma.g_cuts[k];
        if k as u64 <= s {
            g_states.push(chain.clone());
        }
    }
    let f_top = chain; // state at g_cuts[b] = f_cuts[b]: this is F_b
    let chain_build_ops = f_top.ops();

    let mut transcript = Transcript::new();
    let mut stream_enc =
        if mode == AccountingMode::Stream { Some(StreamEncoder::new(params.eps())) } else { None };
    transcript.push(filter_transfer_segment(f_top.core(), stream_enc.as_mut())?);

    let received_state = f_top.core().clone().with_ops_reset();
    let mut indicators = Vec::new();

    // stage 1: batches 1..=s against (F_b, G_{k-1})
    let a_f_top = oracle.set_of(f_top.core(), n)?;
    for k in 1..=s {
        let g = &g_states[(k - 1) as usize];
        let a_g = oracle.set_of(g.core(), g.len())?;
        encode_batch(
            &batches[(k - 1) as usize],
            &a_f_top,
            &a_g,
            &params,
            &partition,
            (k - 1) as usize,
            k,
            &oracle,
            &mut transcript,
            &mut stream_enc,
            &mut indicators,
        )?;
    }
    // stage 2: batches b down to s+1 against (F_k, G_s)
    let g_s = &g_states[s as usize];
    let a_g_s = oracle.set_of(g_s.core(), g_s.len())?;
    let mut f_cur = f_top.clone();
    for k in (s + 1..=b).rev() {
        let a_f = oracle.set_of(f_cur.core(), f_cur.len())?;
        encode_batch(
            &batches[(k - 1) as usize],
            &a_f,
            &a_g_s,
            &params,
            &partition,
            (k - 1) as usize,
            k,
            &oracle,
            &mut transcript,
            &mut stream_enc,
            &mut indicators,
        )?;
        for &x in batches[(k - 1) as usize].iter().rev() {
            f_cur.delete(x)?;
        }
    }
    let chain_ops = f_cur.ops();
    debug_assert!(chain_ops >= chain_build_ops);
    let stream_payload = stream_enc.map(StreamEncoder::finish);

    // decoder
    let decode = decode_general(
        impl_id,
        params,
        b,
        m_cap,
        s,
        tape,
        received_state,
        &oracle,
        &transcript,
        stream_payload.as_ref(),
    );
    let decoded = decode.unwrap_or_default();
    let decode_ok = decoded == batches;

    let info_bound = b as f64 * log_falling_factorial(u / b, n / b)?;
    let payload_bits = transcript.payload_ideal();
    let filter_bits = transcript.ideal_of(SegmentKind::FilterTransfer);
    transcript.info_lower_bound = info_bound;
    transcript.stream_total_bits = stream_payload.as_ref().map(StreamPayload::total_bits);

    let budget = operation_budget(b, m_cap, n);
    let hard_cap = if m_cap >= 3 { budget } else { sigma_length_cap(b, m_cap, n) };
    if chain_ops > hard_cap {
        return Err(ProtocolError::BudgetExceeded { used: chain_ops, budget: hard_cap });
    }

    let eps = params.eps();
    Ok(GeneralRun {
        impl_id,
        params,
        b,
        m_cap,
        s,
        seed,
        mode,
        reconstructible: oracle.is_reconstructible(),
        batches,
        info_bound,
        filter_bits,
        payload_bits,
        derived_bound: if decode_ok { info_bound - payload_bits } else { f64::NAN },
        decode_ok,
        indicators,
        sigma_len: sigma.ops.len() as u64,
        chain_ops,
        ops_budget: budget,
        edge_count: tree.edge_count(),
        residual_coupling: 9f64.powf((b * b) as f64) * n as f64 / (eps * u as f64),
        m_over_4b: m_cap as f64 / 4f64.powf(b as f64),
        stream_total_bits: transcript.stream_total_bits,
        transcript,
    })
}

/// Alice's side of Send(X_k, F_r, G_l): per key, indicator plus rank in
/// (set(F_r) \ set(G_l)) ∩ U_k, or the raw in-block key. The set pair is
/// frozen for the whole batch.
#[allow(clippy::too_many_arguments)]
fn encode_batch(
    batch: &[u64],
    a_f: &AcceptedSet,
    a_g: &AcceptedSet,
    params: &FilterParams,
    partition: &Partition,
    block0: usize,
    batch_index: u64,
    oracle: &SetOracle,
    transcript: &mut Transcript,
    stream: &mut Option<StreamEncoder>,
    indicators: &mut Vec<(u64, bool)>,
) -> Result<(), ProtocolError> {
    if !a_g.is_subset_of(a_f) {
        if oracle.is_reconstructible() {
            return Err(ProtocolError::DecodeFailure(
                "reconstructible sets failed monotonicity; construction bug".into(),
            ));
        }
        return Err(ProtocolError::MonotonicityViolation { round: batch_index });
    }
    let block = partition.block(block0);
    let diff_in_block: Vec<u64> = a_f
        .difference_members(a_g)
        .into_iter()
        .filter(|&x| partition.block_of(x) == block0)
        .collect();
    for &x in batch {
        let z = a_g.contains(x);
        indicators.push((batch_index, z));
        let mut ind = code_indicator(z, params.eps())?;
        if let Some(enc) = stream.as_mut() {
            ind.stream_bits = Some(enc.put_indicator(z));
        }
        transcript.push(ind);
        if !z {
            let mut seg = code_rank(x, &diff_in_block).map_err(|e| match e {
                CodingError::NotInSet(key) => ProtocolError::FilterBug { round: batch_index, key },
                other => ProtocolError::Coding(other),
            })?;
            if let Some(enc) = stream.as_mut() {
                seg.stream_bits =
                    Some(enc.put_fixed(seg.payload, fixed_width_for(diff_in_block.len() as u64)));
            }
            transcript.push(seg);
        } else {
            let rank_in_block = block
                .binary_search(&x)
                .map_err(|_| ProtocolError::FilterBug { round: batch_index, key: x })?
                as u64;
            let mut seg = code_raw(rank_in_block, block.len() as u64)?;
            if let Some(enc) = stream.as_mut() {
                seg.stream_bits =
                    Some(enc.put_fixed(rank_in_block, fixed_width_for(block.len() as u64)));
            }
            transcript.push(seg);
        }
    }
    Ok(())
}

fn decode_batch(
    a_f: &AcceptedSet,
    a_g: &AcceptedSet,
    partition: &Partition,
    block0: usize,
    per_batch: usize,
    segments: &mut std::slice::Iter<'_, coding::TranscriptSegment>,
    stream: &mut Option<StreamDecoder<'_>>,
) -> Result<Vec<u64>, ProtocolError> {
    fn next<'a>(
        it: &mut std::slice::Iter<'a, coding::TranscriptSegment>,
    ) -> Result<&'a coding::TranscriptSegment, ProtocolError> {
        it.next().ok_or_else(|| ProtocolError::DecodeFailure("transcript exhausted".into()))
    }
    let block = partition.block(block0);
    let diff_in_block: Vec<u64> = a_f
        .difference_members(a_g)
        .into_iter()
        .filter(|&x| partition.block_of(x) == block0)
        .collect();
    let mut keys = Vec::with_capacity(per_batch);
    for _ in 0..per_batch {
        let ind_seg = next(segments)?;
        if ind_seg.kind != SegmentKind::Indicator {
            return Err(ProtocolError::DecodeFailure("expected indicator segment".into()));
        }
        let z = match stream.as_mut() {
            Some(dec) => dec.get_indicator(),
            None => ind_seg.payload == 1,
        };
        if z != (ind_seg.payload == 1) {
            return Err(ProtocolError::DecodeFailure("indicator mismatch".into()));
        }
        let key_seg = next(segments)?;
        let x = if !z {
            if key_seg.kind != SegmentKind::RankInSet {
                return Err(ProtocolError::DecodeFailure("expected rank segment".into()));
            }
            let rank = match stream.as_mut() {
                Some(dec) => dec.get_fixed(fixed_width_for(diff_in_block.len() as u64))?,
                None => key_seg.payload,
            };
            if rank != key_seg.payload {
                return Err(ProtocolError::DecodeFailure("rank mismatch".into()));
            }
            decode_rank(rank, &diff_in_block)?
        } else {
            if key_seg.kind != SegmentKind::RawKey {
                return Err(ProtocolError::DecodeFailure("expected raw segment".into()));
            }
            let rank_in_block = match stream.as_mut() {
                Some(dec) => dec.get_fixed(fixed_width_for(block.len() as u64))?,
                None => key_seg.payload,
            };
            if rank_in_block != key_seg.payload {
                return Err(ProtocolError::DecodeFailure("raw mismatch".into()));
            }
            *block
                .get(rank_in_block as usize)
                .ok_or_else(|| ProtocolError::DecodeFailure("raw rank out of block".into()))?
        };
        keys.push(x);
    }
    Ok(keys)
}

/// Bob's replay: public skeleton, transferred state, transcript; returns
/// the decoded batches.
#[allow(clippy::too_many_arguments)]
fn decode_general(
    impl_id: ImplId,
    params: FilterParams,
    b: u64,
    m_cap: u64,
    s: u64,
    tape: RandomTape,
    received: FilterCore,
    oracle: &SetOracle,
    transcript: &Transcript,
    stream_payload: Option<&StreamPayload>,
) -> Result<Vec<Vec<u64>>, ProtocolError> {
    let n = params.capacity;
    let u = params.universe_size;
    let per_batch = (n / b) as usize;
    let mut partition_reader = tape.reader(domain::PUBLIC_PARTITION);
    let partition = Partition::sample(u, b, &mut partition_reader)?;
    let mut tree_reader = tape.reader(domain::PUBLIC_TREE);
    let mut tree = sample_tree(b, m_cap, n, &partition, &mut tree_reader, None)?;
    let template = build_sigma_template(&tree);

    let mut segments = transcript.segments.iter();
    let transfer = segments
        .next()
        .ok_or_else(|| ProtocolError::DecodeFailure("missing filter transfer".into()))?;
    if transfer.kind != SegmentKind::FilterTransfer {
        return Err(ProtocolError::DecodeFailure("first segment must be the transfer".into()));
    }
    let mut stream_dec = stream_payload.map(|p| StreamDecoder::new(p, params.eps()));
    let mut f_state = match stream_dec.as_mut() {
        Some(dec) => decode_filter_transfer(impl_id, params, tape, dec)?,
        None => received,
    };
    if coding::fnv64(&f_state.serialize_canonical()) != transfer.payload {
        return Err(ProtocolError::DecodeFailure("transferred state digest mismatch".into()));
    }

    // G_0 from public churn only
    let mut g = filter::initialize(params, tape, impl_id)?;
    for op in template.resolve_range(&tree, 0, template.g_cuts[0])? {
        g.apply(op).map_err(|e| ProtocolError::DecodeFailure(format!("public replay: {e}")))?;
    }
    let mut decoded: Vec<Vec<u64>> = vec![Vec::new(); b as usize];
    let a_f_top = oracle.set_of(&f_state, n)?;
    for k in 1..=s {
        let a_g = oracle.set_of(g.core(), g.len())?;
        let batch = decode_batch(
            &a_f_top,
            &a_g,
            &partition,
            (k - 1) as usize,
            per_batch,
            &mut segments,
            &mut stream_dec,
        )?;
        tree.set_rightmost_label(k as usize, batch.clone());
        let from = template.g_cuts[(k - 1) as usize];
        let to = template.g_cuts[k as usize];
        for op in template.resolve_range(&tree, from, to)? {
            g.apply(op).map_err(|e| ProtocolError::DecodeFailure(format!("replay: {e}")))?;
        }
        decoded[(k - 1) as usize] = batch;
    }
    let a_g_s = oracle.set_of(g.core(), g.len())?;
    // F-side true-set sizes are protocol bookkeeping: |S(F_k)| = k·n/b
    for k in (s + 1..=b).rev() {
        let a_f = oracle.set_of(&f_state, k * (n / b))?;
        let batch = decode_batch(
            &a_f,
            &a_g_s,
            &partition,
            (k - 1) as usize,
            per_batch,
            &mut segments,
            &mut stream_dec,
        )?;
        for &x in batch.iter().rev() {
            f_state
                .delete_raw(x)
                .map_err(|e| ProtocolError::DecodeFailure(format!("replay delete: {e}")))?;
        }
        decoded[(k - 1) as usize] = batch;
    }
    Ok(decoded)
}

/// A-vector over the G-state chain G_0..G_b, estimated across seeded trials
/// with the same sampling pipeline the protocol uses.
pub fn estimate_avector_general(
    impl_id: ImplId,
    params: FilterParams,
    b: u64,
    m_cap: u64,
    trials: u64,
    base_seed: u64,
) -> Result<AVectorEstimate, ProtocolError> {
    let n = params.capacity;
    let u = params.universe_size;
    if b == 0 || !n.is_multiple_of(b) || !u.is_multiple_of(b) {
        return Err(ProtocolError::Divisibility(format!(
            "b = {b} must divide n = {n} and u = {u}"
        )));
    }
    let per_batch = (n / b) as usize;
    let as_est = |e: ProtocolError| accepted::AcceptedError::InvalidAVector(e.to_string());
    let est = accepted::estimate_from_chain(
        params.normalizer(),
        b as usize + 1,
        trials,
        base_seed,
        move |seed| {
            let tape = RandomTape::new(seed);
            let mut partition_reader = tape.reader(domain::PUBLIC_PARTITION);
            let partition = Partition::sample(u, b, &mut partition_reader).map_err(as_est)?;
            let mut key_reader = tape.reader(domain::ALICE_KEYS);
            let batches: Vec<Vec<u64>> = (0..b as usize)
                .map(|k| {
                    let mut pool = partition.block(k).to_vec();
                    key_reader.sample_distinct(&mut pool, per_batch)
                })
                .collect();
            let mut tree_reader = tape.reader(domain::PUBLIC_TREE);
            let tree = sample_tree(b, m_cap, n, &partition, &mut tree_reader, Some(&batches))
                .map_err(as_est)?;
            let template = build_sigma_template(&tree);
            let sigma = build_sigma(&tree, &template, &partition, n).map_err(as_est)?;
            let mut chain = filter::initialize(params, tape, impl_id)?;
            let mut cards = Vec::with_capacity(b as usize + 1);
            let mut pos = 0usize;
            for k in 0..=b as usize {
                for &op in &sigma.ops[pos..sigma.g_cuts[k]] {
                    chain.apply(op)?;
                }
                pos = sigma.g_cuts[k];
                cards.push(enumerate_accepted(chain.core())?.cardinality());
            }
            Ok(cards)
        },
    )?;
    Ok(est)
}

// ---------------------------------------------------------------------------
// Coupling check
// ---------------------------------------------------------------------------

/// Result of the coupling verification between the F- and G-side
/// distributions.
#[derive(Debug, Clone)]
pub struct CouplingReport {
    pub b: u64,
    pub m_cap: u64,
    /// Maximum total-variation distance over all checked (k, i) pairs, as
    /// an exact rational rendered to f64 (exhaustive mode only).
    pub max_tv: Option<f64>,
    pub tv_exactly_zero: Option<bool>,
    pub outcomes: u64,
    /// E|A(F_k)| - E|A(G_k)| per k = 0..=b (sampled mode only).
    pub gaps: Vec<f64>,
    pub gap_sigmas: Vec<f64>,
    /// ((1-eps)n + eps·u)/M.
    pub gap_bound: f64,
}

/// Exhaustive mode: enumerates every tree shape and label assignment for a
/// fixed partition and verifies that the distribution of the F-side prefix
/// given C_k = i equals the G-side prefix given C_k = i + 1, exactly. Tiny
/// instances only.
pub fn coupling_check_exhaustive(
    params: FilterParams,
    b: u64,
    m_cap: u64,
    seed: u64,
    outcome_cap: u64,
) -> Result<CouplingReport, ProtocolError> {
    let n = params.capacity;
    let u = params.universe_size;
    if b == 0 || !n.is_multiple_of(b) || !u.is_multiple_of(b) {
        return Err(ProtocolError::Divisibility(format!(
            "b = {b} must divide n = {n} and u = {u}"
        )));
    }
    let tape = RandomTape::new(seed);
    let mut partition_reader = tape.reader(domain::PUBLIC_PARTITION);
    let partition = Partition::sample(u, b, &mut partition_reader)?;
    let per_edge = (n / b) as usize;

    // label combinations per edge: falling factorial of block size
    let block = partition.block_size();
    let mut tuples_per_edge = 1u128;
    for i in 0..per_edge as u64 {
        tuples_per_edge = tuples_per_edge.saturating_mul((block - i) as u128);
    }

    // all shapes: child counts in [1, M] for every node at levels 0..b-1,
    // in BFS order
    let mut shapes: Vec<Vec<u64>> = Vec::new();
    fn expand_shapes(b: u64, m_cap: u64, level: u64, width: u64, counts: Vec<u64>, out: &mut Vec<Vec<u64>>) {
        if level == b {
            out.push(counts);
            return;
        }
        let mut assignments: Vec<Vec<u64>> = vec![Vec::new()];
        for _ in 0..width {
            let mut next = Vec::new();
            for a in &assignments {
                for d in 1..=m_cap {
                    let mut a2 = a.clone();
                    a2.push(d);
                    next.push(a2);
                }
            }
            assignments = next;
        }
        for a in assignments {
            let next_width: u64 = a.iter().sum();
            let mut c2 = counts.clone();
            c2.extend_from_slice(&a);
            expand_shapes(b, m_cap, level + 1, next_width, c2, out);
        }
    }
    expand_shapes(b, m_cap, 0, 1, Vec::new(), &mut shapes);

    let mut total: u128 = 0;
    for shape in &shapes {
        let edges: u64 = shape.iter().sum();
        let mut label_combos = 1u128;
        for _ in 0..edges {
            label_combos = label_combos.saturating_mul(tuples_per_edge);
        }
        total = total.saturating_add(label_combos);
    }
    if total > outcome_cap as u128 {
        return Err(ProtocolError::BadSchedule(format!(
            "exhaustive coupling would enumerate {total} outcomes (cap {outcome_cap})"
        )));
    }

    type Dist = BTreeMap<Vec<FilterOp>, BigRational>;
    let mut f_dists: BTreeMap<(usize, u64), Dist> = BTreeMap::new();
    let mut g_dists: BTreeMap<(usize, u64), Dist> = BTreeMap::new();
    let mut outcomes = 0u64;

    for shape in &shapes {
        let shape_prob =
            BigRational::new(BigInt::one(), BigInt::from(m_cap).pow(shape.len() as u32));
        let mut tree = tree_from_shape(b, m_cap, per_edge as u64, shape);
        let edge_nodes: Vec<usize> = (1..tree.nodes.len()).collect();
        enumerate_labels(&mut tree, &partition, &edge_nodes, 0, &shape_prob, &mut |tree, prob| {
            outcomes += 1;
            let template = build_sigma_template(tree);
            let ops = template.resolve_range(tree, 0, template.len()).expect("all labels set");
            for k in 0..b as usize {
                let c_k = tree.rightmost_child_count(k);
                let f_seq = ops[..template.f_cuts[k]].to_vec();
                let g_seq = ops[..template.g_cuts[k]].to_vec();
                *f_dists
                    .entry((k, c_k))
                    .or_default()
                    .entry(f_seq)
                    .or_insert_with(BigRational::zero) += prob.clone();
                *g_dists
                    .entry((k, c_k))
                    .or_default()
                    .entry(g_seq)
                    .or_insert_with(BigRational::zero) += prob.clone();
            }
        });
    }

    // P(C_k = i) = 1/M exactly, so conditioning multiplies by M
    let m_big = BigRational::from(BigInt::from(m_cap));
    let mut max_tv = BigRational::zero();
    for k in 0..b as usize {
        for i in 1..m_cap {
            let empty = Dist::new();
            let f = f_dists.get(&(k, i)).unwrap_or(&empty);
            let g = g_dists.get(&(k, i + 1)).unwrap_or(&empty);
            let mut keys: Vec<&Vec<FilterOp>> = f.keys().chain(g.keys()).collect();
            keys.sort();
            keys.dedup();
            let mut tv = BigRational::zero();
            for key in keys {
                let pf = f.get(key).cloned().unwrap_or_else(BigRational::zero) * m_big.clone();
                let pg = g.get(key).cloned().unwrap_or_else(BigRational::zero) * m_big.clone();
                tv += (pf - pg).abs();
            }
            tv /= BigRational::from(BigInt::from(2));
            if tv > max_tv {
                max_tv = tv;
            }
        }
    }
    Ok(CouplingReport {
        b,
        m_cap,
        max_tv: Some(rational_to_f64(&max_tv)),
        tv_exactly_zero: Some(max_tv.is_zero()),
        outcomes,
        gaps: Vec::new(),
        gap_sigmas: Vec::new(),
        gap_bound: params.normalizer() / m_cap as f64,
    })
}

fn rational_to_f64(r: &BigRational) -> f64 {
    let numer: f64 = r.numer().to_string().parse().unwrap_or(f64::NAN);
    let denom: f64 = r.denom().to_string().parse().unwrap_or(f64::NAN);
    numer / denom
}

fn tree_from_shape(b: u64, m_cap: u64, keys_per_edge: u64, shape: &[u64]) -> ObfuscationTree {
    let mut nodes =
        vec![TreeNode { level: 0, children: Vec::new(), label: Vec::new(), rightmost: true }];
    let mut rightmost_path = vec![0usize];
    let mut level_nodes = vec![0usize];
    let mut cursor = 0usize;
    for level in 0..b {
        let mut next_level = Vec::new();
        for &v in level_nodes.iter() {
            let d = shape[cursor];
            cursor += 1;
            for _ in 0..d {
                let id = nodes.len();
                nodes.push(TreeNode {
                    level: level + 1,
                    children: Vec::new(),
                    label: Vec::new(),
                    rightmost: false,
                });
                nodes[v].children.push(id);
                next_level.push(id);
            }
        }
        let parent = *rightmost_path.last().unwrap();
        let rm = *nodes[parent].children.last().unwrap();
        nodes[rm].rightmost = true;
        rightmost_path.push(rm);
        level_nodes = next_level;
    }
    ObfuscationTree { b, m_cap, keys_per_edge, nodes, rightmost_path }
}

/// Assigns every ordered distinct tuple to every edge in turn, invoking the
/// callback once per complete labeling with its exact probability.
fn enumerate_labels(
    tree: &mut ObfuscationTree,
    partition: &Partition,
    edge_nodes: &[usize],
    idx: usize,
    prob: &BigRational,
    callback: &mut dyn FnMut(&ObfuscationTree, &BigRational),
) {
    if idx == edge_nodes.len() {
        callback(tree, prob);
        return;
    }
    let node = edge_nodes[idx];
    let level = tree.nodes[node].level as usize;
    let block = partition.block(level - 1).to_vec();
    let per_edge = tree.keys_per_edge as usize;
    let mut tuple_count = 1u64;
    for i in 0..per_edge as u64 {
        tuple_count *= block.len() as u64 - i;
    }
    let tuple_prob = prob / BigRational::from(BigInt::from(tuple_count));
    fn tuples(block: &[u64], k: usize, prefix: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        if prefix.len() == k {
            out.push(prefix.clone());
            return;
        }
        for &x in block {
            if !prefix.contains(&x) {
                prefix.push(x);
                tuples(block, k, prefix, out);
                prefix.pop();
            }
        }
    }
    let mut all = Vec::new();
    tuples(&block, per_edge, &mut Vec::new(), &mut all);
    for label in all {
        tree.nodes[node].label = label;
        enumerate_labels(tree, partition, edge_nodes, idx + 1, &tuple_prob, callback);
    }
}

/// Sampled mode: Monte Carlo estimate of E|A(F_k)| - E|A(G_k)| per level.
pub fn coupling_check_sampled(
    impl_id: ImplId,
    params: FilterParams,
    b: u64,
    m_cap: u64,
    trials: u64,
    base_seed: u64,
) -> Result<CouplingReport, ProtocolError> {
    let n = params.capacity;
    let u = params.universe_size;
    if b == 0 || !n.is_multiple_of(b) || !u.is_multiple_of(b) {
        return Err(ProtocolError::Divisibility(format!(
            "b = {b} must divide n = {n} and u = {u}"
        )));
    }
    let per_batch = (n / b) as usize;
    let count = (b + 1) as usize;
    let mut diff_sum = vec![0.0f64; count];
    let mut diff_sq = vec![0.0f64; count];
    for t in 0..trials {
        let seed = derive_trial_seed(base_seed, t);
        let tape = RandomTape::new(seed);
        let mut partition_reader = tape.reader(domain::PUBLIC_PARTITION);
        let partition = Partition::sample(u, b, &mut partition_reader)?;
        let mut key_reader = tape.reader(domain::ALICE_KEYS);
        let batches: Vec<Vec<u64>> = (0..b as usize)
            .map(|k| {
                let mut pool = partition.block(k).to_vec();
                key_reader.sample_distinct(&mut pool, per_batch)
            })
            .collect();
        let mut tree_reader = tape.reader(domain::PUBLIC_TREE);
        let tree = sample_tree(b, m_cap, n, &partition, &mut tree_reader, Some(&batches))?;
        let template = build_sigma_template(&tree);
        let sigma = build_sigma(&tree, &template, &partition, n)?;
        // both prefix families live on one sequence: replay once,
        // snapshotting cardinalities at every cut
        let mut cards_f = vec![0u64; count];
        let mut cards_g = vec![0u64; count];
        let mut chain = filter::initialize(params, tape, impl_id)?;
        let mut cuts: Vec<(usize, bool, usize)> = (0..count)
            .map(|k| (sigma.g_cuts[k], false, k))
            .chain((0..count).map(|k| (sigma.f_cuts[k], true, k)))
            .collect();
        cuts.sort();
        let mut pos = 0usize;
        for (cut, is_f, k) in cuts {
            for &op in &sigma.ops[pos..cut] {
                chain.apply(op)?;
            }
            pos = cut;
            let card = enumerate_accepted(chain.core())?.cardinality();
            if is_f {
                cards_f[k] = card;
            } else {
                cards_g[k] = card;
            }
        }
        for k in 0..count {
            let d = cards_f[k] as f64 - cards_g[k] as f64;
            diff_sum[k] += d;
            diff_sq[k] += d * d;
        }
    }
    let t = trials as f64;
    let mut gaps = Vec::with_capacity(count);
    let mut sigmas = Vec::with_capacity(count);
    for k in 0..count {
        let mean = diff_sum[k] / t;
        let var = (diff_sq[k] / t - mean * mean).max(0.0);
        gaps.push(mean);
        sigmas.push(if trials > 1 { (var / (t - 1.0)).sqrt() } else { 0.0 });
    }
    Ok(CouplingReport {
        b,
        m_cap,
        max_tv: None,
        tv_exactly_zero: None,
        outcomes: trials,
        gaps,
        gap_sigmas: sigmas,
        gap_bound: params.normalizer() / m_cap as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::ErrorRate;
    use crate::reconstructible::check_self_contained;

    fn params(u: u64, n: u64, num: u64, den: u64) -> FilterParams {
        FilterParams::new(u, n, ErrorRate::new(num, den).unwrap()).unwrap()
    }

    fn fresh_reader(seed: u64, dom: u64) -> TapeReader {
        RandomTape::new(seed).reader(dom)
    }

    #[test]
    fn partition_single_block() {
        let mut r = fresh_reader(1, domain::PUBLIC_PARTITION);
        let p = Partition::sample(8, 1, &mut r).unwrap();
        assert_eq!(p.block(0), (0..8).collect::<Vec<u64>>().as_slice());
    }

    #[test]
    fn partition_axioms() {
        let mut r = fresh_reader(2, domain::PUBLIC_PARTITION);
        let p = Partition::sample(8, 2, &mut r).unwrap();
        assert_eq!(p.block(0).len(), 4);
        assert_eq!(p.block(1).len(), 4);
        let mut all: Vec<u64> = p.block(0).iter().chain(p.block(1)).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<u64>>());
        for x in 0..8u64 {
            assert!(p.block(p.block_of(x)).contains(&x));
        }
        assert!(Partition::sample(9, 2, &mut r).is_err());
    }

    #[test]
    fn partition_uniformity() {
        let mut in_first = 0u64;
        let trials = 10_000;
        for seed in 0..trials {
            let mut r = fresh_reader(seed, domain::PUBLIC_PARTITION);
            let p = Partition::sample(8, 2, &mut r).unwrap();
            in_first += u64::from(p.block_of(0) == 0);
        }
        let freq = in_first as f64 / trials as f64;
        let sigma = (0.25f64 / trials as f64).sqrt();
        assert!((freq - 0.5).abs() < 3.0 * sigma, "freq {freq}");
    }

    #[test]
    fn forced_tree_b1_m1() {
        let mut pr = fresh_reader(3, domain::PUBLIC_PARTITION);
        let p = Partition::sample(8, 1, &mut pr).unwrap();
        let batch = vec![vec![5u64, 2]];
        let mut tr = fresh_reader(3, domain::PUBLIC_TREE);
        let tree = sample_tree(1, 1, 2, &p, &mut tr, Some(&batch)).unwrap();
        assert_eq!(tree.edge_count(), 1);
        assert_eq!(tree.rightmost_label(1), &[5, 2]);
        let t = build_sigma_template(&tree);
        let sigma = build_sigma(&tree, &t, &p, 2).unwrap();
        assert_eq!(sigma.g_cuts[0], 0);
        assert_eq!(sigma.g_cuts[1], 2);
        assert_eq!(sigma.f_cuts[1], 2);
        assert_eq!(sigma.f_cuts[0], 4);
        assert_eq!(&sigma.ops[..2], &[FilterOp::Insert(5), FilterOp::Insert(2)]);
        assert_eq!(&sigma.ops[2..], &[FilterOp::Delete(2), FilterOp::Delete(5)]);
    }

    #[test]
    fn root_child_count_is_uniform_b1_m2() {
        let mut ones = 0u64;
        let trials = 4_000;
        for seed in 0..trials {
            let mut pr = fresh_reader(seed, domain::PUBLIC_PARTITION);
            let p = Partition::sample(8, 1, &mut pr).unwrap();
            let mut tr = fresh_reader(seed, domain::PUBLIC_TREE);
            let tree = sample_tree(1, 2, 2, &p, &mut tr, None).unwrap();
            let c0 = tree.rightmost_child_count(0);
            assert!(c0 == 1 || c0 == 2);
            ones += u64::from(c0 == 1);
        }
        let freq = ones as f64 / trials as f64;
        let sigma = (0.25f64 / trials as f64).sqrt();
        assert!((freq - 0.5).abs() < 3.0 * sigma, "freq {freq}");
    }

    #[test]
    fn sigma_with_public_sibling() {
        // find a seed whose b=1, M=2 tree has two children (one public Y)
        for seed in 0..64u64 {
            let mut pr = fresh_reader(seed, domain::PUBLIC_PARTITION);
            let p = Partition::sample(8, 1, &mut pr).unwrap();
            let batch = vec![vec![7u64]];
            let mut tr = fresh_reader(seed, domain::PUBLIC_TREE);
            let tree = sample_tree(1, 2, 1, &p, &mut tr, Some(&batch)).unwrap();
            if tree.rightmost_child_count(0) != 2 {
                continue;
            }
            let t = build_sigma_template(&tree);
            let sigma = build_sigma(&tree, &t, &p, 1).unwrap();
            // sigma = ins Y, del Y, ins X1 (prefix to g_cuts[1]), del X1
            assert_eq!(sigma.ops.len(), 4);
            assert_eq!(sigma.g_cuts[0], 2, "G_0 covers the public insert+delete");
            assert_eq!(sigma.g_cuts[1], 3);
            assert_eq!(sigma.ops[2], FilterOp::Insert(7));
            let y = sigma.ops[0].key();
            assert_ne!(y, 7);
            assert_eq!(sigma.ops[1], FilterOp::Delete(y));
            return;
        }
        panic!("no two-child tree found in 64 seeds");
    }

    #[test]
    fn edge_count_bound_exhaustive_b2_m2() {
        // every shape has at most M + M^2 = 6 edges, within M^(b+1) = 8
        let mut max_edges = 0;
        for seed in 0..200u64 {
            let mut pr = fresh_reader(seed, domain::PUBLIC_PARTITION);
            let p = Partition::sample(8, 2, &mut pr).unwrap();
            let mut tr = fresh_reader(seed, domain::PUBLIC_TREE);
            let tree = sample_tree(2, 2, 2, &p, &mut tr, None).unwrap();
            max_edges = max_edges.max(tree.edge_count());
        }
        assert!(max_edges <= 6);
        assert!(max_edges <= 8);
    }

    #[test]
    fn sigma_prefix_structure_random_trees() {
        for seed in 0..100u64 {
            let mut pr = fresh_reader(seed, domain::PUBLIC_PARTITION);
            let p = Partition::sample(16, 2, &mut pr).unwrap();
            let tape = RandomTape::new(seed);
            let mut kr = tape.reader(domain::ALICE_KEYS);
            let batches: Vec<Vec<u64>> = (0..2)
                .map(|k| {
                    let mut pool = p.block(k).to_vec();
                    kr.sample_distinct(&mut pool, 2)
                })
                .collect();
            let mut tr = fresh_reader(seed, domain::PUBLIC_TREE);
            let tree = sample_tree(2, 2, 4, &p, &mut tr, Some(&batches)).unwrap();
            let t = build_sigma_template(&tree);
            let sigma = build_sigma(&tree, &t, &p, 4).unwrap();
            assert!(check_self_contained(&sigma.ops));
            // cut ordering along the sequence
            for k in 0..2 {
                assert!(sigma.g_cuts[k] <= sigma.g_cuts[k + 1]);
                assert!(sigma.f_cuts[k] >= sigma.f_cuts[k + 1]);
            }
            assert_eq!(sigma.g_cuts[2], sigma.f_cuts[2]);
            // every sigma_G_l is a prefix of sigma_F_r with self-contained
            // difference
            for l in 0..=2usize {
                for r in l..=2usize {
                    let g_cut = sigma.g_cuts[l];
                    let f_cut = sigma.f_cuts[r];
                    assert!(g_cut <= f_cut, "l={l} r={r}");
                    assert!(check_self_contained(&sigma.ops[g_cut..f_cut]));
                }
            }
            // sigma_F_{k-1} = sigma_F_k followed by deleting X_k reversed
            for k in (1..=2usize).rev() {
                let tail = &sigma.ops[sigma.f_cuts[k]..sigma.f_cuts[k - 1]];
                let expected: Vec<FilterOp> =
                    batches[k - 1].iter().rev().map(|&x| FilterOp::Delete(x)).collect();
                assert_eq!(tail, expected.as_slice());
            }
        }
    }

    #[test]
    fn budget_formula_and_forced_tree_ops() {
        assert_eq!(operation_budget(1, 1, 4), 4);
        assert_eq!(operation_budget(2, 2, 8), 32);
        assert_eq!(operation_budget(2, 4, 16), 512);
        // forced tree: chain ops with s = 1 equal n
        let p = params(16, 4, 1, 4);
        let run = run_general(ImplId::BitmapExact, p, 1, 1, 1, 9, AccountingMode::Ideal).unwrap();
        assert_eq!(run.sigma_len, 8);
        assert_eq!(run.chain_ops, 4);
        assert!(run.decode_ok);
    }

    #[test]
    fn general_decode_bitmap_tiny() {
        let p = params(16, 4, 1, 4);
        for seed in 0..100u64 {
            for s in 0..=2u64 {
                let run =
                    run_general(ImplId::BitmapExact, p, 2, 2, s, seed, AccountingMode::Ideal)
                        .unwrap();
                assert!(run.decode_ok, "seed {seed} s {s}");
                assert!(run.chain_ops <= sigma_length_cap(2, 2, 4));
                assert!(run.derived_bound.is_finite());
            }
        }
    }

    #[test]
    fn general_decode_fingerprint_stream() {
        let p = params(4096, 16, 1, 16);
        for seed in 0..10u64 {
            let run =
                run_general(ImplId::Fingerprint, p, 2, 4, 1, seed, AccountingMode::Stream).unwrap();
            assert!(run.decode_ok, "seed {seed}");
            assert!(run.chain_ops <= run.ops_budget);
            let stream = run.stream_total_bits.unwrap() as f64;
            let ideal = run.transcript.total_ideal();
            assert!(stream <= ideal + 2.0 * run.transcript.segments.len() as f64 + 2.0);
        }
    }

    #[test]
    fn general_sandwich_fingerprint() {
        let p = params(4096, 16, 1, 16);
        let space = filter::space_bits(ImplId::Fingerprint, &p);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let trials = 40u64;
        for t in 0..trials {
            let seed = derive_trial_seed(1000, t);
            let run =
                run_general(ImplId::Fingerprint, p, 2, 4, 1, seed, AccountingMode::Ideal).unwrap();
            assert!(run.decode_ok);
            sum += run.derived_bound;
            sum_sq += run.derived_bound * run.derived_bound;
        }
        let mean = sum / trials as f64;
        let var = (sum_sq / trials as f64 - mean * mean).max(0.0);
        let sigma = (var / (trials - 1) as f64).sqrt();
        assert!(mean >= 0.0, "mean {mean}");
        assert!(mean <= space + 3.0 * sigma, "mean {mean} space {space}");
    }

    #[test]
    fn avector_general_chain_is_monotone_for_fingerprint() {
        let p = params(4096, 16, 1, 16);
        let est = estimate_avector_general(ImplId::Fingerprint, p, 2, 4, 16, 5).unwrap();
        assert_eq!(est.monotonicity_violations, 0);
        assert_eq!(est.avector.values.len(), 3);
        let total = est.avector.sum_closed(0, 2);
        assert!(total <= 1.0 + 0.05, "total {total}");
    }

    #[test]
    fn coupling_exhaustive_b1_m2_tv_zero() {
        let p = params(8, 2, 1, 4);
        let rep = coupling_check_exhaustive(p, 1, 2, 7, 1 << 20).unwrap();
        assert_eq!(rep.tv_exactly_zero, Some(true), "max_tv = {:?}", rep.max_tv);
        assert_eq!(rep.max_tv, Some(0.0));
        assert!(rep.outcomes > 0);
    }

    #[test]
    fn coupling_exhaustive_b2_m2_tv_zero() {
        // two levels, one key per edge, tiny blocks
        let p = params(8, 2, 1, 4);
        let rep = coupling_check_exhaustive(p, 2, 2, 3, 1 << 22).unwrap();
        assert_eq!(rep.tv_exactly_zero, Some(true), "max_tv = {:?}", rep.max_tv);
    }

    #[test]
    fn coupling_sampled_fingerprint_gap_within_bound() {
        let p = params(4096, 16, 1, 16);
        let rep = coupling_check_sampled(ImplId::Fingerprint, p, 1, 4, 200, 11).unwrap();
        for (k, (&gap, &sig)) in rep.gaps.iter().zip(rep.gap_sigmas.iter()).enumerate() {
            assert!(gap <= rep.gap_bound + 3.0 * sig, "k={k} gap={gap} bound={}", rep.gap_bound);
        }
        // at k = b the two cuts coincide: gap exactly zero
        assert_eq!(rep.gaps[1], 0.0);
    }

    /// With b = 1 the protocol degenerates to a single batch against one
    /// fixed set pair: same key distribution and information bound as the
    /// warmup game.
    #[test]
    fn b1_m1_degenerates_to_single_batch() {
        let p = params(64, 4, 1, 8);
        let run = run_general(ImplId::Fingerprint, p, 1, 1, 0, 3, AccountingMode::Ideal).unwrap();
        assert!(run.decode_ok);
        assert_eq!(run.batches.len(), 1);
        assert_eq!(run.transcript.count_of(SegmentKind::FilterTransfer), 1);
        assert_eq!(
            run.transcript.count_of(SegmentKind::Indicator),
            4,
            "one indicator per key in the single batch"
        );
        let warmup_info = log_falling_factorial(64, 4).unwrap();
        assert!((run.info_bound - warmup_info).abs() < 1e-12);
    }

    /// Sequence length grows at most linearly in M^(b+1) across an M sweep.
    #[test]
    fn sigma_length_linear_in_m_power() {
        let p = params(64, 4, 1, 8);
        let mut means = Vec::new();
        for m_cap in 1..=4u64 {
            let mut total = 0u64;
            let mut max_len = 0u64;
            for seed in 0..40u64 {
                let run =
                    run_general(ImplId::Fingerprint, p, 2, m_cap, 1, seed, AccountingMode::Ideal)
                        .unwrap();
                total += run.sigma_len;
                max_len = max_len.max(run.sigma_len);
            }
            assert!(max_len <= sigma_length_cap(2, m_cap, 4), "M = {m_cap}");
            means.push(total as f64 / 40.0);
        }
        for w in means.windows(2) {
            assert!(w[1] >= w[0], "mean sigma length must grow with M: {means:?}");
        }
        // linear in M^(b+1): 2(n/b) ops per edge, at most b·M^b <= 2·M^(b+1)
        // edges
        for (i, &mean) in means.iter().enumerate() {
            let m_cap = (i + 1) as f64;
            assert!(mean <= 8.0 * m_cap.powi(3), "mean {mean} at M = {m_cap}");
        }
    }

    #[test]
    fn run_rejects_bad_parameters() {
        let p = params(16, 4, 1, 4);
        assert!(run_general(ImplId::BitmapExact, p, 3, 2, 0, 0, AccountingMode::Ideal).is_err());
        assert!(run_general(ImplId::BitmapExact, p, 2, 2, 3, 0, AccountingMode::Ideal).is_err());
        assert!(run_general(ImplId::StickyToy, p, 2, 2, 0, 0, AccountingMode::Ideal).is_err());
    }
}
