//! Task precedence graph construction.
//!
//! Construction alternates two phases per batch. During the packet-processing
//! phase, transactions are inserted concurrently: each operation lands in an
//! ordered list partitioned by its target key, positioned by transaction
//! timestamp, and operations with a declared read set additionally plant
//! proxy entries in the lists of the declared keys. Logical dependencies are
//! fixed by statement order at insertion time. Sealing the batch switches to
//! the state-access-processing phase: a single pass over every key list
//! derives temporal edges between adjacent entries of different transactions
//! and parametric edges from each version producer to the later operations
//! that declared its key, then freezes the graph.
//!
//! Edges always point from the earlier operation to the later one (timestamp
//! order across transactions, statement order within one), so the graph is
//! acyclic by construction.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::model::{Operation, StateKey, Timestamp, Transaction};

/// Vertex handle: index into the sealed graph's vertex table. Assignment is
/// deterministic: vertices are numbered in (timestamp, instance, statement)
/// order regardless of insertion interleaving.
pub type OpId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DependencyKind {
    Td,
    Pd,
    Ld,
}

impl fmt::Display for DependencyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DependencyKind::Td => "TD",
            DependencyKind::Pd => "PD",
            DependencyKind::Ld => "LD",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TpgEdge {
    pub from: OpId,
    pub to: OpId,
    pub kind: DependencyKind,
}

/// Global order of operations: timestamp, then instance (tie-break for
/// synthetic duplicate timestamps; lower instance wins), then statement
/// order. Unique per operation within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OrderKey {
    pub ts: Timestamp,
    pub instance_id: u32,
    pub op_index: u16,
}

/// One entry of a key-partitioned list: a real operation or a proxy standing
/// in for a declared potential read.
#[derive(Debug, Clone, Copy)]
struct ListEntry {
    order: OrderKey,
    proxy: bool,
    /// The owning operation declared this list's key in its read set.
    declares: bool,
    /// Real entry whose access produces a version (WRITE / READ_MODIFY).
    produces: bool,
}

const LIST_SHARDS: usize = 16;

/// Builder for one batch; the packet-processing phase. Insertions may run
/// concurrently; `seal` requires all inserters to have quiesced (the engine
/// provides that barrier).
pub struct BatchBuilder {
    batch_id: u64,
    sealed: AtomicBool,
    txns: Mutex<Vec<Transaction>>,
    shards: Vec<Mutex<HashMap<StateKey, Vec<ListEntry>>>>,
}

fn shard_of(key: &StateKey) -> usize {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    key.hash(&mut h);
    (h.finish() as usize) % LIST_SHARDS
}

impl BatchBuilder {
    pub fn new(batch_id: u64) -> Self {
        BatchBuilder {
            batch_id,
            sealed: AtomicBool::new(false),
            txns: Mutex::new(Vec::new()),
            shards: (0..LIST_SHARDS).map(|_| Mutex::new(HashMap::new())).collect(),
        }
    }

    pub fn batch_id(&self) -> u64 {
        self.batch_id
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed.load(Ordering::Acquire)
    }

    /// Inserts a whole transaction: every operation goes into the list of its
    /// own key, and a proxy goes into the list of each declared read-set key
    /// other than the operation's own key. Safe for concurrent callers.
    pub fn insert_transaction(&self, txn: Transaction) -> Result<()> {
        if self.is_sealed() {
            return Err(Error::BatchSealed);
        }
        if txn.ops.is_empty() {
            return Err(Error::InvalidConfig(format!("transaction {} has no operations", txn.txn_id)));
        }
        for op in &txn.ops {
            let order = OrderKey { ts: txn.ts, instance_id: txn.instance_id, op_index: op.op_index };
            let declares_own = op.read_set.contains(&op.key);
            self.insert_entry(
                &op.key,
                ListEntry {
                    order,
                    proxy: false,
                    declares: declares_own,
                    produces: op.access_type().produces_version(),
                },
            );
            let mut seen: Vec<&StateKey> = Vec::with_capacity(op.read_set.len());
            for rk in &op.read_set {
                if *rk == op.key || seen.contains(&rk) {
                    continue;
                }
                seen.push(rk);
                self.insert_entry(
                    rk,
                    ListEntry { order, proxy: true, declares: true, produces: false },
                );
            }
        }
        self.txns.lock().unwrap().push(txn);
        Ok(())
    }

    fn insert_entry(&self, key: &StateKey, entry: ListEntry) {
        let mut shard = self.shards[shard_of(key)].lock().unwrap();
        let list = shard.entry(key.clone()).or_default();
        let pos = list.partition_point(|e| e.order < entry.order);
        list.insert(pos, entry);
    }

    /// Ends the packet-processing phase: derives TD and PD edges from the
    /// sorted lists and returns the immutable graph. Subsequent insertions
    /// and a second seal fail with `BatchSealed`.
    pub fn seal(&self) -> Result<TaskPrecedenceGraph> {
        if self.sealed.swap(true, Ordering::AcqRel) {
            return Err(Error::BatchSealed);
        }
        let mut txns = std::mem::take(&mut *self.txns.lock().unwrap());
        txns.sort_by_key(|t| (t.ts, t.instance_id));

        // Deterministic vertex numbering: (ts, instance, op_index) ascending.
        let mut op_base = Vec::with_capacity(txns.len());
        let mut txn_of = HashMap::with_capacity(txns.len());
        let mut total_ops = 0u32;
        for (idx, txn) in txns.iter().enumerate() {
            op_base.push(total_ops);
            txn_of.insert((txn.ts, txn.instance_id), idx as u32);
            total_ops += txn.ops.len() as u32;
        }

        let mut vertices: Vec<Vertex> = Vec::with_capacity(total_ops as usize);
        for (idx, txn) in txns.iter().enumerate() {
            for op in &txn.ops {
                vertices.push(Vertex {
                    txn_idx: idx as u32,
                    op_index: op.op_index,
                    order: OrderKey { ts: txn.ts, instance_id: txn.instance_id, op_index: op.op_index },
                    out: Vec::new(),
                    input: Vec::new(),
                });
            }
        }
        let resolve = |order: &OrderKey| -> OpId {
            let t = txn_of[&(order.ts, order.instance_id)];
            op_base[t as usize] + order.op_index as u32
        };

        let add_edge = |vertices: &mut Vec<Vertex>, from: OpId, to: OpId, kind: DependencyKind| {
            vertices[from as usize].out.push((to, kind));
            vertices[to as usize].input.push((from, kind));
        };

        // Logical dependencies: statement-order chain within each transaction.
        for (idx, txn) in txns.iter().enumerate() {
            for w in 0..txn.ops.len().saturating_sub(1) {
                let a = op_base[idx] + w as u32;
                add_edge(&mut vertices, a, a + 1, DependencyKind::Ld);
            }
        }

        // Temporal and parametric dependencies from the key lists.
        let mut keys: Vec<(StateKey, Vec<ListEntry>)> = Vec::new();
        for shard in &self.shards {
            let mut shard = shard.lock().unwrap();
            keys.extend(shard.drain());
        }
        keys.sort_by(|a, b| a.0.cmp(&b.0));

        let mut key_chains: Vec<(StateKey, Vec<OpId>)> = Vec::new();
        for (key, list) in keys {
            // TD: adjacent real entries of different transactions. Runs of
            // one transaction collapse (statement order already chains them).
            let mut prev_real: Option<&ListEntry> = None;
            let mut chain = Vec::new();
            for e in list.iter().filter(|e| !e.proxy) {
                chain.push(resolve(&e.order));
                if let Some(p) = prev_real {
                    if (p.order.ts, p.order.instance_id) != (e.order.ts, e.order.instance_id) {
                        add_edge(&mut vertices, resolve(&p.order), resolve(&e.order), DependencyKind::Td);
                    }
                }
                prev_real = Some(e);
            }
            // PD: each entry that declared this key depends on the nearest
            // earlier version-producing real entry of another transaction.
            let mut last_producer: Option<&ListEntry> = None;
            for e in &list {
                if e.declares {
                    if let Some(p) = last_producer {
                        if (p.order.ts, p.order.instance_id) != (e.order.ts, e.order.instance_id) {
                            add_edge(&mut vertices, resolve(&p.order), resolve(&e.order), DependencyKind::Pd);
                        }
                    }
                }
                if !e.proxy && e.produces {
                    last_producer = Some(e);
                }
            }
            if !chain.is_empty() {
                key_chains.push((key, chain));
            }
        }

        let mut edge_count = 0usize;
        let mut pd_count = 0usize;
        for v in &vertices {
            edge_count += v.out.len();
            pd_count += v.out.iter().filter(|(_, k)| *k == DependencyKind::Pd).count();
        }

        Ok(TaskPrecedenceGraph {
            batch_id: self.batch_id,
            txns,
            op_base,
            vertices,
            key_chains,
            edge_count,
            pd_count,
        })
    }
}

/// Enforces phase alternation: at most one batch may be under construction
/// at a time, and sealing it is what reopens the sequencer.
#[derive(Default)]
pub struct BatchSequencer {
    open: Mutex<Option<u64>>,
}

impl BatchSequencer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens a batch for insertion. Fails while another batch is open.
    pub fn begin_batch(&self, batch_id: u64) -> Result<BatchHandle<'_>> {
        let mut open = self.open.lock().unwrap();
        if open.is_some() {
            return Err(Error::BatchAlreadyOpen);
        }
        *open = Some(batch_id);
        Ok(BatchHandle { builder: BatchBuilder::new(batch_id), seq: self })
    }
}

/// An open batch: insert transactions, then seal exactly once. Dropping the
/// handle (sealed or not) reopens the sequencer.
pub struct BatchHandle<'a> {
    builder: BatchBuilder,
    seq: &'a BatchSequencer,
}

impl BatchHandle<'_> {
    pub fn builder(&self) -> &BatchBuilder {
        &self.builder
    }

    pub fn insert_transaction(&self, txn: Transaction) -> Result<()> {
        self.builder.insert_transaction(txn)
    }

    pub fn seal(self) -> Result<TaskPrecedenceGraph> {
        self.builder.seal()
    }
}

impl Drop for BatchHandle<'_> {
    fn drop(&mut self) {
        *self.seq.open.lock().unwrap() = None;
    }
}

/// Static vertex data after sealing.
#[derive(Debug)]
pub struct Vertex {
    pub txn_idx: u32,
    pub op_index: u16,
    pub order: OrderKey,
    /// Outgoing edges (this op precedes the targets).
    pub out: Vec<(OpId, DependencyKind)>,
    /// Incoming edges.
    pub input: Vec<(OpId, DependencyKind)>,
}

/// Summary statistics used for strategy selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub op_count: usize,
    pub edge_count: usize,
    pub pd_fraction: f64,
    /// Share of operations targeting the most popular key.
    pub key_skew: f64,
    pub injected_failure_fraction: f64,
}

/// The sealed, immutable graph for one batch.
pub struct TaskPrecedenceGraph {
    batch_id: u64,
    txns: Vec<Transaction>,
    op_base: Vec<u32>,
    vertices: Vec<Vertex>,
    /// Per key: real-entry op ids in list order (the TD chains).
    key_chains: Vec<(StateKey, Vec<OpId>)>,
    edge_count: usize,
    pd_count: usize,
}

impl TaskPrecedenceGraph {
    pub fn batch_id(&self) -> u64 {
        self.batch_id
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn txns(&self) -> &[Transaction] {
        &self.txns
    }

    pub fn vertex(&self, op: OpId) -> &Vertex {
        &self.vertices[op as usize]
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn key_chains(&self) -> &[(StateKey, Vec<OpId>)] {
        &self.key_chains
    }

    /// The operation payload behind a vertex.
    pub fn op(&self, op: OpId) -> &Operation {
        let v = &self.vertices[op as usize];
        &self.txns[v.txn_idx as usize].ops[v.op_index as usize]
    }

    pub fn txn_of(&self, op: OpId) -> &Transaction {
        &self.txns[self.vertex(op).txn_idx as usize]
    }

    /// Op ids of one transaction, in statement order.
    pub fn ops_of_txn(&self, txn_idx: u32) -> impl Iterator<Item = OpId> + '_ {
        let base = self.op_base[txn_idx as usize];
        (0..self.txns[txn_idx as usize].ops.len() as u32).map(move |i| base + i)
    }

    /// Vertices with no incoming edges: the initially runnable set.
    pub fn ready_roots(&self) -> Vec<OpId> {
        (0..self.vertices.len() as u32).filter(|&i| self.vertices[i as usize].input.is_empty()).collect()
    }

    /// Every edge, ordered by (from, to, kind).
    pub fn edges(&self) -> Vec<TpgEdge> {
        let mut out = Vec::with_capacity(self.edge_count);
        for (from, v) in self.vertices.iter().enumerate() {
            for &(to, kind) in &v.out {
                out.push(TpgEdge { from: from as OpId, to, kind });
            }
        }
        out.sort();
        out
    }

    pub fn stats(&self) -> BatchStats {
        let op_count = self.vertices.len();
        let top_key = self
            .key_chains
            .iter()
            .map(|(_, chain)| chain.len())
            .max()
            .unwrap_or(0);
        let injected = self.txns.iter().filter(|t| t.inject_fail).count();
        BatchStats {
            op_count,
            edge_count: self.edge_count,
            pd_fraction: if self.edge_count == 0 { 0.0 } else { self.pd_count as f64 / self.edge_count as f64 },
            key_skew: if op_count == 0 { 0.0 } else { top_key as f64 / op_count as f64 },
            injected_failure_fraction: if self.txns.is_empty() {
                0.0
            } else {
                injected as f64 / self.txns.len() as f64
            },
        }
    }

    /// Text edge list `from -> to [KIND]`, one edge per line; vertex ids are
    /// already sorted by (timestamp, statement order).
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for e in self.edges() {
            s.push_str(&format!("{} -> {} [{}]\n", e.from, e.to, e.kind));
        }
        s
    }

    /// Topological order, or None if a cycle exists (must never happen).
    pub fn topo_order(&self) -> Option<Vec<OpId>> {
        let n = self.vertices.len();
        let mut indeg: Vec<usize> = self.vertices.iter().map(|v| v.input.len()).collect();
        let mut queue: Vec<OpId> = (0..n as u32).filter(|&i| indeg[i as usize] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = queue.pop() {
            order.push(v);
            for &(to, _) in &self.vertices[v as usize].out {
                indeg[to as usize] -= 1;
                if indeg[to as usize] == 0 {
                    queue.push(to);
                }
            }
        }
        (order.len() == n).then_some(order)
    }
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use crate::model::{Operation, TxnId};
    use proptest::prelude::*;
    use std::sync::Arc;

    #[derive(Debug, Clone)]
    struct OpSpec {
        key: u64,
        access: u8,
        read_set: Vec<u64>,
    }

    fn op_spec() -> impl Strategy<Value = OpSpec> {
        (0u64..5, 0u8..3, proptest::collection::vec(0u64..5, 0..3))
            .prop_map(|(key, access, read_set)| OpSpec { key, access, read_set })
    }

    fn build(specs: &[Vec<OpSpec>]) -> Vec<Transaction> {
        specs
            .iter()
            .enumerate()
            .map(|(i, ops)| {
                let ops = ops
                    .iter()
                    .map(|s| {
                        let key = StateKey::from_u64("t", s.key);
                        match s.access {
                            0 => Operation::read(key),
                            1 => Operation::write(key, vec![1]),
                            _ => Operation::read_modify(
                                key,
                                s.read_set.iter().map(|k| StateKey::from_u64("t", *k)).collect(),
                                Arc::new(|input, _| crate::model::ModifyOutcome {
                                    target: None,
                                    value: input.current.to_vec(),
                                }),
                            ),
                        }
                    })
                    .collect();
                Transaction::new(TxnId(i as u64), Timestamp::new(0, i as u64), ops)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(96))]

        #[test]
        fn edge_set_is_insertion_order_invariant(
            specs in proptest::collection::vec(proptest::collection::vec(op_spec(), 1..4), 1..10),
            seed in any::<u64>(),
        ) {
            let txns = build(&specs);
            let forward = BatchBuilder::new(0);
            for t in txns.clone() {
                forward.insert_transaction(t).unwrap();
            }
            let expected = forward.seal().unwrap().dump();

            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = txns;
            shuffled.shuffle(&mut rand::rngs::StdRng::seed_from_u64(seed));
            let b = BatchBuilder::new(0);
            for t in shuffled {
                b.insert_transaction(t).unwrap();
            }
            prop_assert_eq!(b.seal().unwrap().dump(), expected);
        }

        #[test]
        fn sealed_graph_is_acyclic_and_matches_brute_force(
            specs in proptest::collection::vec(proptest::collection::vec(op_spec(), 1..4), 1..12),
        ) {
            let txns = build(&specs);
            let b = BatchBuilder::new(0);
            for t in txns {
                b.insert_transaction(t).unwrap();
            }
            let tpg = b.seal().unwrap();
            prop_assert!(tpg.topo_order().is_some());
            prop_assert!(crate::audit::check_tpg_equivalence(&tpg).is_ok());

            // Statement chains: every transaction's ops form one LD path.
            for (idx, txn) in tpg.txns().iter().enumerate() {
                let ops: Vec<OpId> = tpg.ops_of_txn(idx as u32).collect();
                for w in ops.windows(2) {
                    prop_assert!(tpg
                        .vertex(w[1])
                        .input
                        .iter()
                        .any(|&(f, k)| f == w[0] && k == DependencyKind::Ld));
                }
                prop_assert_eq!(ops.len(), txn.ops.len());
            }

            // PD soundness: the head declared the tail's key.
            for e in tpg.edges() {
                if e.kind == DependencyKind::Pd {
                    let tail_key = &tpg.op(e.from).key;
                    prop_assert!(tpg.op(e.to).read_set.contains(tail_key));
                }
            }
        }
    }
}
