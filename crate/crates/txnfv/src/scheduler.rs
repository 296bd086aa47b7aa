//! Batch execution: explores the sealed graph with a pluggable strategy,
//! drives each operation's status machine, and handles aborts.
//!
//! Every vertex carries an atomic status word (Blocked / Ready / Executed /
//! Aborted) plus an unresolved-incoming-edge counter. Executing or aborting
//! an operation resolves its outgoing edges; successors whose counter reaches
//! zero flip to Ready and enter the frontier. Strategy choices vary along
//! three independent dimensions: how the frontier is explored (depth-first,
//! breadth-first, random), what the unit of scheduling is (single operations
//! or same-key chains), and when failed transactions are cleaned up (at
//! detection or at batch drain). None of them may change results, only
//! performance; the equivalence tests hold the engine to that.
//!
//! Failure handling: a transaction flagged by the workload fails when its
//! first operation executes. Eager mode aborts the whole transaction on the
//! spot (no other operation of it has run yet, so nothing needs rolling
//! back); lazy mode lets the remaining operations run to completion and
//! settles at batch drain, rolling their versions back and re-executing every
//! operation that consumed a rolled-back version, in timestamp order, until
//! the store converges to the committed-transactions-only state. Temporal
//! successors of aborted operations are released, not aborted: order carries
//! no data. Parametric and read dependencies on removed versions are exactly
//! what the consumer tracking in the store re-resolves.

use std::collections::{BTreeSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU8, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::metrics::{Category, SpanClock, WorkerClock};
use crate::model::{OpEffect, OpResult, PacketAction, TxnId, TxnOutcome, Value, WriteSource};
use crate::mvcc::{ChainSlot, MvccStore};
use crate::tpg::{BatchStats, DependencyKind, OpId, TaskPrecedenceGraph};

/// Per-operation status machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum OpStatus {
    Blocked = 0,
    Ready = 1,
    Executed = 2,
    Aborted = 3,
}

impl OpStatus {
    fn from_u8(v: u8) -> OpStatus {
        match v {
            0 => OpStatus::Blocked,
            1 => OpStatus::Ready,
            2 => OpStatus::Executed,
            _ => OpStatus::Aborted,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OpStatus::Blocked => "Blocked",
            OpStatus::Ready => "Ready",
            OpStatus::Executed => "Executed",
            OpStatus::Aborted => "Aborted",
        }
    }

    fn is_terminal(self) -> bool {
        matches!(self, OpStatus::Executed | OpStatus::Aborted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exploration {
    Dfs,
    Bfs,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Single,
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortMode {
    Eager,
    Lazy,
}

/// Strategy along the three scheduling dimensions. All twelve combinations
/// are valid and must produce identical outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrategyConfig {
    pub exploration: Exploration,
    pub granularity: Granularity,
    pub abort_mode: AbortMode,
    /// Seed for the random exploration mode only.
    pub rng_seed: u64,
    /// Record claim and transition logs for audits.
    pub record_trace: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            exploration: Exploration::Bfs,
            granularity: Granularity::Single,
            abort_mode: AbortMode::Lazy,
            rng_seed: 0,
            record_trace: false,
        }
    }
}

impl StrategyConfig {
    pub fn parse(s: &str) -> Result<Self> {
        let mut cfg = StrategyConfig::default();
        for part in s.split(',') {
            match part.trim().to_ascii_lowercase().as_str() {
                "dfs" => cfg.exploration = Exploration::Dfs,
                "bfs" => cfg.exploration = Exploration::Bfs,
                "random" => cfg.exploration = Exploration::Random,
                "single" => cfg.granularity = Granularity::Single,
                "group" => cfg.granularity = Granularity::Group,
                "eager" => cfg.abort_mode = AbortMode::Eager,
                "lazy" => cfg.abort_mode = AbortMode::Lazy,
                other => {
                    return Err(Error::InvalidConfig(format!("unknown strategy token `{other}`")))
                }
            }
        }
        Ok(cfg)
    }

    pub fn describe(&self) -> String {
        format!(
            "{},{},{}",
            match self.exploration {
                Exploration::Dfs => "dfs",
                Exploration::Bfs => "bfs",
                Exploration::Random => "random",
            },
            match self.granularity {
                Granularity::Single => "single",
                Granularity::Group => "group",
            },
            match self.abort_mode {
                AbortMode::Eager => "eager",
                AbortMode::Lazy => "lazy",
            }
        )
    }
}

/// Static strategy selection heuristic; a stand-in for a learned decision
/// model. An explicit user configuration always wins.
pub fn select_strategy(stats: &BatchStats, user_override: Option<StrategyConfig>) -> StrategyConfig {
    if let Some(cfg) = user_override {
        return cfg;
    }
    let edges_per_op = if stats.op_count == 0 { 0.0 } else { stats.edge_count as f64 / stats.op_count as f64 };
    let granularity = if edges_per_op > 1.5 && stats.pd_fraction < 0.1 {
        Granularity::Group
    } else {
        Granularity::Single
    };
    // "High" key skew: over a quarter of all operations hit one key.
    let exploration = if stats.key_skew > 0.25 { Exploration::Dfs } else { Exploration::Bfs };
    let abort_mode = if stats.injected_failure_fraction > 0.0 { AbortMode::Eager } else { AbortMode::Lazy };
    StrategyConfig { exploration, granularity, abort_mode, rng_seed: 0, record_trace: false }
}

/// Unit of scheduling: one operation, or a same-key chain under group
/// granularity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskUnit {
    pub ops: Vec<OpId>,
}

/// Partitions the graph into task units: maximal same-key runs chained by
/// temporal edges where every incoming edge of a non-first member originates
/// inside the unit. Under single granularity every operation is its own unit.
pub fn form_groups(tpg: &TaskPrecedenceGraph) -> Vec<TaskUnit> {
    let mut units = Vec::new();
    for (_key, chain) in tpg.key_chains() {
        let mut current: Vec<OpId> = Vec::new();
        for &op in chain {
            let extend = if let Some(&prev) = current.last() {
                let v = tpg.vertex(op);
                let td_from_prev = v.input.iter().any(|&(f, k)| f == prev && k == DependencyKind::Td);
                let all_internal = v.input.iter().all(|&(f, _)| current.contains(&f));
                td_from_prev && all_internal
            } else {
                false
            };
            if extend {
                current.push(op);
            } else {
                if !current.is_empty() {
                    units.push(TaskUnit { ops: std::mem::take(&mut current) });
                }
                current.push(op);
            }
        }
        if !current.is_empty() {
            units.push(TaskUnit { ops: current });
        }
    }
    units
}

/// One claim, for the execution trace audit.
#[derive(Debug, Clone, Copy)]
pub struct ClaimRecord {
    pub worker: usize,
    pub op: OpId,
    pub claim_ns: u64,
    pub exec_ns: u64,
    pub status: OpStatus,
}

/// One observed status transition.
#[derive(Debug, Clone, Copy)]
pub struct TransitionRecord {
    pub op: OpId,
    pub from: OpStatus,
    pub to: OpStatus,
}

/// Outcome of one executed batch.
pub struct BatchResult {
    /// Per transaction, in graph (timestamp) order.
    pub outcomes: Vec<TxnOutcome>,
    /// Post-processing output per committed transaction.
    pub actions: Vec<Option<PacketAction>>,
    /// Completion instant per transaction (post-processing done or abort
    /// settled), for latency accounting.
    pub txn_done: Vec<Instant>,
    pub worker_clocks: Vec<WorkerClock>,
    pub coord_clock: WorkerClock,
    pub abort_count: usize,
    /// Operations that executed and were later rolled back (wasted work).
    pub wasted_ops: usize,
    /// Re-executions performed while re-resolving rolled-back reads.
    pub reexec_ops: usize,
    /// How many operations some worker claimed (executed or failed-at-claim).
    pub claimed_ops: usize,
    pub claim_log: Vec<ClaimRecord>,
    pub transition_log: Vec<TransitionRecord>,
}

struct VertexState {
    status: AtomicU8,
    claimed: AtomicBool,
    unresolved: AtomicU32,
}

struct OpSlots {
    own: Arc<ChainSlot>,
    reads: Vec<Arc<ChainSlot>>,
}

enum Frontier {
    Fifo(Mutex<VecDeque<u32>>),
    Lifo(Mutex<Vec<u32>>),
    Random(Mutex<Vec<u32>>),
}

impl Frontier {
    fn new(mode: Exploration) -> Self {
        match mode {
            Exploration::Bfs => Frontier::Fifo(Mutex::new(VecDeque::new())),
            Exploration::Dfs => Frontier::Lifo(Mutex::new(Vec::new())),
            Exploration::Random => Frontier::Random(Mutex::new(Vec::new())),
        }
    }

    fn push(&self, unit: u32) {
        match self {
            Frontier::Fifo(q) => q.lock().unwrap().push_back(unit),
            Frontier::Lifo(s) => s.lock().unwrap().push(unit),
            Frontier::Random(v) => v.lock().unwrap().push(unit),
        }
    }

    fn pop(&self, rng: &mut StdRng) -> Option<u32> {
        match self {
            Frontier::Fifo(q) => q.lock().unwrap().pop_front(),
            Frontier::Lifo(s) => s.lock().unwrap().pop(),
            Frontier::Random(v) => {
                let mut v = v.lock().unwrap();
                if v.is_empty() {
                    return None;
                }
                let i = rng.gen_range(0..v.len());
                Some(v.swap_remove(i))
            }
        }
    }
}

/// Mutable execution state for one sealed graph. The graph itself stays
/// immutable, so tests can run the same batch repeatedly against fresh
/// stores.
pub struct BatchRuntime<'a> {
    tpg: &'a TaskPrecedenceGraph,
    store: &'a MvccStore,
    cfg: StrategyConfig,
    epoch: Instant,

    units: Vec<TaskUnit>,
    unit_of: Vec<u32>,
    unit_first: Vec<OpId>,
    unit_claimed: Vec<AtomicBool>,

    state: Vec<VertexState>,
    slots: Vec<OpSlots>,
    results: Vec<Mutex<OpResult>>,
    /// Chain that currently holds this op's produced version (retargeting
    /// READ_MODIFYs may move it on re-execution).
    target_slots: Vec<Mutex<Option<Arc<ChainSlot>>>>,

    scratch: Vec<Mutex<Vec<i64>>>,
    txn_rem: Vec<AtomicU32>,
    outcomes: Vec<AtomicU8>,

    frontier: Frontier,
    terminal_count: AtomicUsize,
    claimed_count: AtomicUsize,
    lazy_aborts: Mutex<Vec<u32>>,
    /// Serializes abort processing and re-execution waves.
    abort_guard: Mutex<()>,
    wasted: AtomicUsize,
    reexec: AtomicUsize,

    claim_log: Mutex<Vec<ClaimRecord>>,
    transition_log: Mutex<Vec<TransitionRecord>>,
}

/// Per-worker context: identity, depth-first stack, RNG.
pub struct WorkerCtx {
    pub id: usize,
    stack: Vec<u32>,
    rng: StdRng,
}

/// Result of asking for work.
#[derive(Debug, PartialEq, Eq)]
pub enum NextTask {
    Unit(TaskUnit),
    /// Nothing runnable right now, but the batch is not finished.
    Retry,
    /// Every operation is terminal.
    Drained,
}

const OUTCOME_PENDING: u8 = 0;
const OUTCOME_COMMITTED: u8 = 1;
const OUTCOME_ABORTED: u8 = 2;

impl<'a> BatchRuntime<'a> {
    /// Prepares execution state: resolves store slots for every key the
    /// batch touches, forms task units, and seeds the frontier with roots.
    pub fn new(tpg: &'a TaskPrecedenceGraph, store: &'a MvccStore, cfg: StrategyConfig) -> Self {
        let n = tpg.vertex_count();
        // Materialize every key up front so workers never touch the key map.
        {
            let mut keys = Vec::new();
            for txn in tpg.txns() {
                for op in &txn.ops {
                    keys.push(&op.key);
                    keys.extend(op.read_set.iter());
                }
            }
            store.register_keys(keys);
        }
        let slots: Vec<OpSlots> = (0..n as u32)
            .map(|i| {
                let op = tpg.op(i);
                OpSlots {
                    own: store.slot(&op.key),
                    reads: op.read_set.iter().map(|k| store.slot(k)).collect(),
                }
            })
            .collect();

        let units = match cfg.granularity {
            Granularity::Single => (0..n as u32).map(|i| TaskUnit { ops: vec![i] }).collect(),
            Granularity::Group => form_groups(tpg),
        };
        let mut unit_of = vec![0u32; n];
        let mut unit_first = vec![0u32; units.len()];
        for (u, unit) in units.iter().enumerate() {
            unit_first[u] = unit.ops[0];
            for &op in &unit.ops {
                unit_of[op as usize] = u as u32;
            }
        }

        let state: Vec<VertexState> = (0..n)
            .map(|i| VertexState {
                status: AtomicU8::new(if tpg.vertex(i as u32).input.is_empty() {
                    OpStatus::Ready as u8
                } else {
                    OpStatus::Blocked as u8
                }),
                claimed: AtomicBool::new(false),
                unresolved: AtomicU32::new(tpg.vertex(i as u32).input.len() as u32),
            })
            .collect();

        let txns = tpg.txns();
        let runtime = BatchRuntime {
            tpg,
            store,
            cfg,
            epoch: Instant::now(),
            unit_claimed: (0..units.len()).map(|_| AtomicBool::new(false)).collect(),
            units,
            unit_of,
            unit_first,
            state,
            slots,
            results: (0..n).map(|_| Mutex::new(OpResult::default())).collect(),
            target_slots: (0..n).map(|_| Mutex::new(None)).collect(),
            scratch: txns.iter().map(|t| Mutex::new(vec![0i64; t.scratch_slots])).collect(),
            txn_rem: txns.iter().map(|t| AtomicU32::new(t.ops.len() as u32)).collect(),
            outcomes: (0..txns.len()).map(|_| AtomicU8::new(OUTCOME_PENDING)).collect(),
            frontier: Frontier::new(cfg.exploration),
            terminal_count: AtomicUsize::new(0),
            claimed_count: AtomicUsize::new(0),
            lazy_aborts: Mutex::new(Vec::new()),
            abort_guard: Mutex::new(()),
            wasted: AtomicUsize::new(0),
            reexec: AtomicUsize::new(0),
            claim_log: Mutex::new(Vec::new()),
            transition_log: Mutex::new(Vec::new()),
        };
        // Seed roots in deterministic (timestamp) order.
        for (u, &first) in runtime.unit_first.iter().enumerate() {
            if runtime.state[first as usize].status.load(Ordering::Acquire) == OpStatus::Ready as u8 {
                runtime.frontier.push(u as u32);
            }
        }
        runtime
    }

    pub fn worker_ctx(&self, id: usize) -> WorkerCtx {
        WorkerCtx { id, stack: Vec::new(), rng: StdRng::seed_from_u64(self.cfg.rng_seed ^ (id as u64)) }
    }

    pub fn status(&self, op: OpId) -> OpStatus {
        OpStatus::from_u8(self.state[op as usize].status.load(Ordering::Acquire))
    }

    pub fn outcome(&self, txn_idx: u32) -> TxnOutcome {
        match self.outcomes[txn_idx as usize].load(Ordering::Acquire) {
            OUTCOME_COMMITTED => TxnOutcome::Committed,
            OUTCOME_ABORTED => TxnOutcome::Aborted,
            _ => TxnOutcome::Pending,
        }
    }

    fn log_transition(&self, op: OpId, from: OpStatus, to: OpStatus) {
        if self.cfg.record_trace {
            self.transition_log.lock().unwrap().push(TransitionRecord { op, from, to });
        }
    }

    /// CAS the status; on success into a terminal state, bumps the terminal
    /// counter and the owning transaction's remaining-op counter.
    fn transition(&self, op: OpId, from: OpStatus, to: OpStatus) -> bool {
        let ok = self.state[op as usize]
            .status
            .compare_exchange(from as u8, to as u8, Ordering::AcqRel, Ordering::Acquire)
            .is_ok();
        if ok {
            self.log_transition(op, from, to);
            if to.is_terminal() {
                self.terminal_count.fetch_add(1, Ordering::AcqRel);
                let txn_idx = self.tpg.vertex(op).txn_idx;
                if self.txn_rem[txn_idx as usize].fetch_sub(1, Ordering::AcqRel) == 1 {
                    self.finalize_txn(txn_idx);
                }
            }
        }
        ok
    }

    /// All operations of `txn_idx` are terminal: settle its outcome.
    fn finalize_txn(&self, txn_idx: u32) {
        let txn = &self.tpg.txns()[txn_idx as usize];
        if txn.inject_fail {
            // Outcome settles in abort processing (eager) or at drain (lazy).
            return;
        }
        if self.outcomes[txn_idx as usize]
            .compare_exchange(OUTCOME_PENDING, OUTCOME_COMMITTED, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
        {
            self.store.mark_txn_committed(txn.txn_id);
        }
    }

    /// Resolves the outgoing edges of a terminal vertex; newly ready
    /// successors are returned and the caller routes them into the frontier.
    ///
    /// An aborted successor whose dependencies just fully resolved becomes a
    /// pass-through: it forwards resolution to its own successors right
    /// here. This is what "released as if the aborted op had executed"
    /// means: successors of an aborted operation must still wait for the
    /// aborted operation's own predecessors, or the temporal chain through
    /// it would break.
    fn propagate(&self, op: OpId) -> Vec<OpId> {
        let mut newly_ready = Vec::new();
        let mut stack = vec![op];
        while let Some(v) = stack.pop() {
            for &(to, _kind) in &self.tpg.vertex(v).out {
                if self.state[to as usize].unresolved.fetch_sub(1, Ordering::AcqRel) == 1 {
                    if self.transition(to, OpStatus::Blocked, OpStatus::Ready) {
                        newly_ready.push(to);
                    } else if self.status(to) == OpStatus::Aborted {
                        stack.push(to);
                        // The unit never entered the frontier (its first op
                        // died while Blocked); schedule it now so surviving
                        // members still run.
                        let unit = self.unit_of[to as usize];
                        if self.unit_first[unit as usize] == to {
                            self.frontier.push(unit);
                        }
                    }
                }
            }
        }
        newly_ready
    }

    /// Marks a Ready operation Executed (store effect already applied) and
    /// returns the successors that became Ready.
    pub fn mark_executed(&self, op: OpId) -> Result<Vec<OpId>> {
        if !self.transition(op, OpStatus::Ready, OpStatus::Executed) {
            return Err(Error::IllegalTransition {
                op,
                from: self.status(op).as_str(),
                to: OpStatus::Executed.as_str(),
            });
        }
        Ok(self.propagate(op))
    }

    /// Routes newly ready ops into the frontier / worker stack.
    fn enqueue_ready(&self, ctx: &mut WorkerCtx, newly_ready: Vec<OpId>) {
        let mut kept_local = false;
        for op in newly_ready {
            let unit = self.unit_of[op as usize];
            if self.unit_first[unit as usize] != op {
                continue; // interior of a group: its unit executor handles it
            }
            if self.cfg.exploration == Exploration::Dfs && !kept_local {
                ctx.stack.push(unit);
                kept_local = true;
            } else {
                self.frontier.push(unit);
            }
        }
    }

    /// Claims the next runnable unit for this worker.
    pub fn next_task(&self, ctx: &mut WorkerCtx) -> NextTask {
        let popped = if self.cfg.exploration == Exploration::Dfs {
            ctx.stack.pop().or_else(|| self.frontier.pop(&mut ctx.rng))
        } else {
            self.frontier.pop(&mut ctx.rng)
        };
        match popped {
            Some(unit) => {
                if self.unit_claimed[unit as usize].swap(true, Ordering::AcqRel) {
                    NextTask::Retry // lost the claim race
                } else {
                    NextTask::Unit(self.units[unit as usize].clone())
                }
            }
            None => {
                if self.terminal_count.load(Ordering::Acquire) == self.tpg.vertex_count() {
                    NextTask::Drained
                } else {
                    NextTask::Retry
                }
            }
        }
    }

    /// Executes every op of a claimed unit in order. Interior ops depend only
    /// on earlier unit members, so by the time the walk reaches one it is
    /// Ready (or Aborted with the rest of its transaction); a Blocked status
    /// only means another worker's abort is still propagating.
    pub fn execute_unit(&self, ctx: &mut WorkerCtx, unit: &TaskUnit, clock: &mut SpanClock) {
        for &op in &unit.ops {
            loop {
                match self.status(op) {
                    OpStatus::Ready => {
                        clock.switch_to(Category::Useful);
                        self.execute_op(ctx, op);
                        clock.switch_to(Category::Explore);
                        break;
                    }
                    OpStatus::Aborted => break,
                    OpStatus::Executed => break, // re-pushed unit tail
                    OpStatus::Blocked => std::hint::spin_loop(),
                }
            }
        }
    }

    /// Executes one Ready operation: reads its inputs at its timestamp,
    /// applies its effect, records the result and resolves successors.
    fn execute_op(&self, ctx: &mut WorkerCtx, op: OpId) {
        let claim_at = self.epoch.elapsed().as_nanos() as u64;
        self.state[op as usize].claimed.store(true, Ordering::Release);
        self.claimed_count.fetch_add(1, Ordering::Relaxed);
        // Safety: every dependency is resolved by the time an op runs.
        debug_assert_eq!(self.state[op as usize].unresolved.load(Ordering::Acquire), 0);

        let vertex = self.tpg.vertex(op);
        let txn = &self.tpg.txns()[vertex.txn_idx as usize];

        // Injected failure fires on the transaction's first operation.
        if txn.inject_fail && vertex.op_index == 0 {
            self.handle_failure(op);
            self.record_claim(ctx.id, op, claim_at);
            return;
        }

        self.apply_effect(op);
        let newly_ready = self.mark_executed(op).expect("claimed op must be Ready");
        self.enqueue_ready(ctx, newly_ready);
        self.record_claim(ctx.id, op, claim_at);
    }

    fn record_claim(&self, worker: usize, op: OpId, claim_ns: u64) {
        if self.cfg.record_trace {
            self.claim_log.lock().unwrap().push(ClaimRecord {
                worker,
                op,
                claim_ns,
                exec_ns: self.epoch.elapsed().as_nanos() as u64,
                status: self.status(op),
            });
        }
    }

    /// Reads inputs and applies the effect of `op`. Every read registers the
    /// op as consumer of the version it resolved, so a later rollback of the
    /// producer can find and re-execute this op.
    fn apply_effect(&self, op: OpId) {
        let vertex = self.tpg.vertex(op);
        let txn = &self.tpg.txns()[vertex.txn_idx as usize];
        let operation = self.tpg.op(op);
        let slots = &self.slots[op as usize];
        let token = op as u64;

        let stmt = vertex.op_index;
        let reads: Vec<Value> = slots
            .reads
            .iter()
            .map(|s| self.store.read_tracked(s, txn.ts, txn.txn_id, stmt, token).0)
            .collect();

        match &operation.effect {
            OpEffect::Read => {
                let (v, _) = self.store.read_tracked(&slots.own, txn.ts, txn.txn_id, stmt, token);
                *self.results[op as usize].lock().unwrap() = OpResult { read: Some(v), written: None };
            }
            OpEffect::Write(src) => {
                let value = match src {
                    WriteSource::Literal(v) => v.clone(),
                    WriteSource::Scratch(slot) => {
                        let scratch = self.scratch[vertex.txn_idx as usize].lock().unwrap();
                        crate::model::codec::i64_to_value(scratch.get(*slot).copied().unwrap_or(0))
                    }
                };
                self.store.write_slot(&slots.own, txn.ts, txn.txn_id, stmt, value.clone());
                *self.target_slots[op as usize].lock().unwrap() = Some(Arc::clone(&slots.own));
                *self.results[op as usize].lock().unwrap() =
                    OpResult { read: None, written: Some((operation.key.clone(), value)) };
            }
            OpEffect::ReadModify(f) => {
                let (current, _) = self.store.read_tracked(&slots.own, txn.ts, txn.txn_id, stmt, token);
                let outcome = {
                    let mut scratch = self.scratch[vertex.txn_idx as usize].lock().unwrap();
                    f(&crate::model::ModifyInput { current: &current, reads: &reads }, &mut scratch)
                };
                let (target_slot, target_key) = match outcome.target {
                    Some(i) => (&slots.reads[i], operation.read_set[i].clone()),
                    None => (&slots.own, operation.key.clone()),
                };
                self.store.write_slot(target_slot, txn.ts, txn.txn_id, stmt, outcome.value.clone());
                *self.target_slots[op as usize].lock().unwrap() = Some(Arc::clone(target_slot));
                *self.results[op as usize].lock().unwrap() =
                    OpResult { read: Some(current), written: Some((target_key, outcome.value)) };
            }
        }
    }

    /// Failure detected while executing `op` (first op of a doomed txn).
    fn handle_failure(&self, op: OpId) {
        // Terminalize the failed op first: any in-flight wave spinning on it
        // can proceed, and we never hold the abort guard while it waits.
        assert!(self.transition(op, OpStatus::Ready, OpStatus::Aborted));
        let txn_idx = self.tpg.vertex(op).txn_idx;
        match self.cfg.abort_mode {
            AbortMode::Eager => {
                let _guard = self.abort_guard.lock().unwrap();
                self.abort_txn_locked(txn_idx, &[op]);
            }
            AbortMode::Lazy => {
                // Let dependents continue; settle everything at drain.
                self.lazy_aborts.lock().unwrap().push(txn_idx);
                for ready in self.propagate(op) {
                    // Route through the shared frontier: the failing worker
                    // has no claim preference over an aborted txn's wake-ups.
                    let unit = self.unit_of[ready as usize];
                    if self.unit_first[unit as usize] == ready {
                        self.frontier.push(unit);
                    }
                }
            }
        }
    }

    /// Aborts a transaction by id, eagerly or lazily. Public entry point for
    /// recovery paths and tests; fails on committed transactions.
    pub fn abort_transaction(&self, txn_id: TxnId, mode: AbortMode) -> Result<Vec<OpId>> {
        let txn_idx = self
            .tpg
            .txns()
            .iter()
            .position(|t| t.txn_id == txn_id)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown txn {txn_id}")))? as u32;
        if self.outcome(txn_idx) == TxnOutcome::Committed {
            return Err(Error::AlreadyCommitted);
        }
        match mode {
            AbortMode::Eager => {
                let _guard = self.abort_guard.lock().unwrap();
                Ok(self.abort_txn_locked(txn_idx, &[]))
            }
            AbortMode::Lazy => {
                self.lazy_aborts.lock().unwrap().push(txn_idx);
                Ok(Vec::new())
            }
        }
    }

    /// Core abort processing; must hold `abort_guard`. `already_terminal`
    /// lists ops the caller terminalized itself. Returns the affected ops.
    fn abort_txn_locked(&self, txn_idx: u32, already_terminal: &[OpId]) -> Vec<OpId> {
        let txn = &self.tpg.txns()[txn_idx as usize];
        // Settle the outcome first so a concurrent remaining-ops-counter
        // completion cannot commit this transaction under us.
        self.outcomes[txn_idx as usize].store(OUTCOME_ABORTED, Ordering::Release);
        let mut affected = Vec::new();
        let mut aborted_from_ready = Vec::new();
        let mut executed = 0usize;
        for op in self.tpg.ops_of_txn(txn_idx) {
            affected.push(op);
            loop {
                match self.status(op) {
                    OpStatus::Blocked => {
                        // Dependencies unresolved: the op turns into a
                        // pass-through that `propagate` releases once they
                        // are, keeping temporal order intact through it.
                        if self.transition(op, OpStatus::Blocked, OpStatus::Aborted) {
                            break;
                        }
                    }
                    OpStatus::Ready => {
                        if self.state[op as usize].claimed.load(Ordering::Acquire) {
                            // Mid-execution on another worker; wait for it to
                            // terminalize so we never abort under its feet.
                            std::hint::spin_loop();
                            continue;
                        }
                        if self.transition(op, OpStatus::Ready, OpStatus::Aborted) {
                            aborted_from_ready.push(op);
                            break;
                        }
                    }
                    OpStatus::Executed => {
                        executed += 1;
                        break;
                    }
                    OpStatus::Aborted => break,
                }
            }
        }
        self.wasted.fetch_add(executed, Ordering::Relaxed);

        // Roll back before releasing anyone: successors must only ever see
        // surviving state.
        let report = self.store.rollback_txn(txn.txn_id);
        self.reexec_wave(report.consumers);

        // Temporal successors are released, not aborted: ordering carries no
        // data, so an aborted predecessor resolves like an executed one. An
        // op aborted while Ready has everything resolved, so it releases its
        // successors right away; Blocked ones release via pass-through.
        for op in already_terminal.iter().copied().chain(aborted_from_ready) {
            let ready = self.propagate(op);
            for r in ready {
                let unit = self.unit_of[r as usize];
                if self.unit_first[unit as usize] == r {
                    self.frontier.push(unit);
                }
            }
        }
        affected
    }

    /// Re-executes every operation that consumed a rolled-back (or since
    /// rewritten) version, in timestamp order, cascading through displaced
    /// consumers until the store reflects only surviving transactions.
    fn reexec_wave(&self, seeds: Vec<u64>) {
        let mut work: BTreeSet<(crate::tpg::OrderKey, OpId)> = BTreeSet::new();
        let enqueue = |work: &mut BTreeSet<_>, token: u64| {
            let op = token as OpId;
            work.insert((self.tpg.vertex(op).order, op));
        };
        for s in seeds {
            enqueue(&mut work, s);
        }
        while let Some((_, op)) = work.pop_first() {
            let vertex = self.tpg.vertex(op);
            let txn = &self.tpg.txns()[vertex.txn_idx as usize];
            if txn.inject_fail || self.outcome(vertex.txn_idx) == TxnOutcome::Aborted {
                continue; // its effects are (or will be) rolled back wholesale
            }
            // Wait out an in-flight first execution; skip ops that never ran.
            loop {
                match self.status(op) {
                    OpStatus::Executed => break,
                    OpStatus::Aborted => break,
                    _ => {
                        if self.state[op as usize].claimed.load(Ordering::Acquire) {
                            std::hint::spin_loop();
                        } else {
                            break;
                        }
                    }
                }
            }
            if self.status(op) != OpStatus::Executed {
                continue;
            }
            self.reexec.fetch_add(1, Ordering::Relaxed);
            for token in self.reexec_op(op) {
                enqueue(&mut work, token);
            }
            // Later statements of the same transaction may depend on scratch
            // this op rewrote; re-run them as well.
            for later in self.tpg.ops_of_txn(vertex.txn_idx) {
                if later > op && self.status(later) == OpStatus::Executed {
                    work.insert((self.tpg.vertex(later).order, later));
                }
            }
        }
    }

    /// Re-reads inputs and recomputes one executed op. Returns consumers of
    /// any version this op displaced (they must re-execute too).
    ///
    /// Statement-order visibility makes this safe: the re-read resolves the
    /// state before this statement ran; its own surviving version and any
    /// later statement's write of the same transaction are invisible.
    fn reexec_op(&self, op: OpId) -> Vec<u64> {
        let vertex = self.tpg.vertex(op);
        let txn = &self.tpg.txns()[vertex.txn_idx as usize];
        let operation = self.tpg.op(op);
        let slots = &self.slots[op as usize];
        let token = op as u64;
        let stmt = vertex.op_index;

        let reads: Vec<Value> = slots
            .reads
            .iter()
            .map(|s| self.store.read_tracked(s, txn.ts, txn.txn_id, stmt, token).0)
            .collect();

        match &operation.effect {
            OpEffect::Read => {
                let (v, _) = self.store.read_tracked(&slots.own, txn.ts, txn.txn_id, stmt, token);
                *self.results[op as usize].lock().unwrap() = OpResult { read: Some(v), written: None };
                Vec::new()
            }
            OpEffect::Write(src) => {
                let value = match src {
                    WriteSource::Literal(v) => v.clone(),
                    WriteSource::Scratch(slot) => {
                        let scratch = self.scratch[vertex.txn_idx as usize].lock().unwrap();
                        crate::model::codec::i64_to_value(scratch.get(*slot).copied().unwrap_or(0))
                    }
                };
                let displaced = self
                    .store
                    .replace_slot_version(&slots.own, txn.ts, txn.txn_id, stmt, value.clone());
                *self.target_slots[op as usize].lock().unwrap() = Some(Arc::clone(&slots.own));
                *self.results[op as usize].lock().unwrap() =
                    OpResult { read: None, written: Some((operation.key.clone(), value)) };
                displaced
            }
            OpEffect::ReadModify(f) => {
                let (current, _) =
                    self.store.read_tracked(&slots.own, txn.ts, txn.txn_id, stmt, token);
                let outcome = {
                    let mut scratch = self.scratch[vertex.txn_idx as usize].lock().unwrap();
                    f(&crate::model::ModifyInput { current: &current, reads: &reads }, &mut scratch)
                };
                let (new_slot, new_key) = match outcome.target {
                    Some(i) => (&slots.reads[i], operation.read_set[i].clone()),
                    None => (&slots.own, operation.key.clone()),
                };
                let mut displaced = Vec::new();
                {
                    let mut held = self.target_slots[op as usize].lock().unwrap();
                    match held.as_ref() {
                        Some(old) if Arc::ptr_eq(old, new_slot) => {
                            displaced.extend(self.store.replace_slot_version(
                                new_slot,
                                txn.ts,
                                txn.txn_id,
                                stmt,
                                outcome.value.clone(),
                            ));
                        }
                        Some(old) => {
                            // The retarget moved: pull the version off the old
                            // chain and plant it on the new one.
                            displaced.extend(self.store.remove_slot_version(old, txn.txn_id));
                            self.store.write_slot(new_slot, txn.ts, txn.txn_id, stmt, outcome.value.clone());
                            *held = Some(Arc::clone(new_slot));
                        }
                        None => {
                            self.store.write_slot(new_slot, txn.ts, txn.txn_id, stmt, outcome.value.clone());
                            *held = Some(Arc::clone(new_slot));
                        }
                    }
                }
                *self.results[op as usize].lock().unwrap() =
                    OpResult { read: Some(current), written: Some((new_key, outcome.value)) };
                displaced
            }
        }
    }

    /// Drain-time settlement: processes queued lazy aborts, then replays
    /// consumers of rolled-back versions. Single-threaded (after join).
    fn settle_lazy_aborts(&self) {
        let doomed = std::mem::take(&mut *self.lazy_aborts.lock().unwrap());
        if doomed.is_empty() {
            return;
        }
        let _guard = self.abort_guard.lock().unwrap();
        let mut seeds = Vec::new();
        for txn_idx in doomed {
            let txn = &self.tpg.txns()[txn_idx as usize];
            let mut executed = 0usize;
            for op in self.tpg.ops_of_txn(txn_idx) {
                match self.status(op) {
                    OpStatus::Executed => executed += 1,
                    OpStatus::Aborted => {}
                    s => unreachable!("op {op} still {s:?} at drain"),
                }
            }
            self.wasted.fetch_add(executed, Ordering::Relaxed);
            self.outcomes[txn_idx as usize].store(OUTCOME_ABORTED, Ordering::Release);
            let report = self.store.rollback_txn(txn.txn_id);
            seeds.extend(report.consumers);
        }
        // One wave over everything, after all rollbacks, so re-execution only
        // ever sees surviving versions.
        self.reexec_wave(seeds);
    }

    #[cold]
    fn dump_stuck(&self, worker: usize) {
        eprintln!(
            "worker {worker} stuck: terminal {}/{} claimed {}",
            self.terminal_count.load(Ordering::Acquire),
            self.tpg.vertex_count(),
            self.claimed_count.load(Ordering::Relaxed),
        );
        for op in 0..self.tpg.vertex_count() as u32 {
            let st = self.status(op);
            if !st.is_terminal() {
                let v = self.tpg.vertex(op);
                eprintln!(
                    "  op {op} {:?} unresolved={} claimed={} unit_first={} unit_claimed={} txn={} input={:?}",
                    st,
                    self.state[op as usize].unresolved.load(Ordering::Acquire),
                    self.state[op as usize].claimed.load(Ordering::Acquire),
                    self.unit_first[self.unit_of[op as usize] as usize],
                    self.unit_claimed[self.unit_of[op as usize] as usize].load(Ordering::Acquire),
                    v.txn_idx,
                    v.input,
                );
            }
        }
    }

    fn run_worker(&self, id: usize) -> WorkerClock {
        let mut ctx = self.worker_ctx(id);
        let mut clock = SpanClock::new(Category::Explore);
        let mut idle_spins = 0u32;
        loop {
            match self.next_task(&mut ctx) {
                NextTask::Unit(unit) => {
                    idle_spins = 0;
                    self.execute_unit(&mut ctx, &unit, &mut clock);
                }
                NextTask::Retry => {
                    idle_spins += 1;
                    if idle_spins > 64 {
                        // Oversubscription-friendly: give the working thread
                        // the core instead of burning it.
                        std::thread::yield_now();
                    } else {
                        std::hint::spin_loop();
                    }
                    if cfg!(debug_assertions) && idle_spins == 1_000_000 {
                        self.dump_stuck(id);
                    }
                }
                NextTask::Drained => break,
            }
        }
        clock.finish()
    }
}

/// Runs a sealed batch to completion on `workers` threads and settles every
/// transaction. The store afterwards holds exactly the committed
/// transactions' versions (still uncommitted-flagged none); the caller folds
/// them with `commit_batch`.
pub fn run_batch(
    tpg: &TaskPrecedenceGraph,
    store: &MvccStore,
    cfg: StrategyConfig,
    workers: usize,
) -> BatchResult {
    assert!(workers >= 1);
    let mut coord = SpanClock::new(Category::Construct);
    let runtime = BatchRuntime::new(tpg, store, cfg);

    coord.switch_to(Category::Sync);
    let worker_clocks: Vec<WorkerClock> = if tpg.vertex_count() == 0 {
        Vec::new()
    } else {
        let rt = &runtime;
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers).map(|id| s.spawn(move || rt.run_worker(id))).collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    };

    coord.switch_to(Category::Others);
    runtime.settle_lazy_aborts();

    // Post-processing runs on final values, after every abort settled.
    coord.switch_to(Category::Useful);
    let txns = tpg.txns();
    let mut outcomes = Vec::with_capacity(txns.len());
    let mut actions = Vec::with_capacity(txns.len());
    let mut txn_done = Vec::with_capacity(txns.len());
    for (idx, txn) in txns.iter().enumerate() {
        let outcome = runtime.outcome(idx as u32);
        debug_assert_ne!(outcome, TxnOutcome::Pending, "txn {idx} unsettled");
        let action = if outcome == TxnOutcome::Committed {
            txn.post.as_ref().map(|post| {
                let results: Vec<OpResult> = tpg
                    .ops_of_txn(idx as u32)
                    .map(|op| runtime.results[op as usize].lock().unwrap().clone())
                    .collect();
                let scratch = runtime.scratch[idx].lock().unwrap();
                post(&txn.meta, &results, &scratch)
            })
        } else {
            None
        };
        outcomes.push(outcome);
        actions.push(action);
        txn_done.push(Instant::now());
    }

    coord.switch_to(Category::Others);
    let abort_count = outcomes.iter().filter(|o| **o == TxnOutcome::Aborted).count();
    BatchResult {
        outcomes,
        actions,
        txn_done,
        worker_clocks,
        coord_clock: coord.finish(),
        abort_count,
        wasted_ops: runtime.wasted.load(Ordering::Relaxed),
        reexec_ops: runtime.reexec.load(Ordering::Relaxed),
        claimed_ops: runtime.claimed_count.load(Ordering::Relaxed),
        claim_log: runtime.claim_log.into_inner().unwrap(),
        transition_log: runtime.transition_log.into_inner().unwrap(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{codec, ModifyOutcome, Operation, StateKey, Timestamp, Transaction};
    use crate::tpg::BatchBuilder;

    fn key(n: u64) -> StateKey {
        StateKey::from_u64("t", n)
    }

    fn w(k: StateKey, v: u8) -> Operation {
        Operation::write(k, vec![v])
    }

    /// READ_MODIFY that copies the first read-set value into its own key
    /// (or echoes its current value when the read set is empty).
    fn rm_copy(k: StateKey, read_set: Vec<StateKey>) -> Operation {
        Operation::read_modify(
            k,
            read_set,
            Arc::new(|input, _| ModifyOutcome {
                target: None,
                value: input.reads.first().cloned().unwrap_or_else(|| input.current.to_vec()),
            }),
        )
    }

    fn txn(id: u64, seq: u64, ops: Vec<Operation>) -> Transaction {
        Transaction::new(TxnId(id), Timestamp::new(0, seq), ops)
    }

    fn seal(txns: Vec<Transaction>) -> crate::tpg::TaskPrecedenceGraph {
        let b = BatchBuilder::new(0);
        for t in txns {
            b.insert_transaction(t).unwrap();
        }
        b.seal().unwrap()
    }

    fn drive_single(rt: &BatchRuntime) {
        let mut ctx = rt.worker_ctx(0);
        let mut clock = SpanClock::new(Category::Explore);
        loop {
            match rt.next_task(&mut ctx) {
                NextTask::Unit(unit) => rt.execute_unit(&mut ctx, &unit, &mut clock),
                NextTask::Retry => std::hint::spin_loop(),
                NextTask::Drained => break,
            }
        }
    }

    fn traced(exploration: Exploration) -> StrategyConfig {
        StrategyConfig { exploration, record_trace: true, ..Default::default() }
    }

    #[test]
    fn select_strategy_base_case() {
        let stats = crate::tpg::BatchStats {
            op_count: 100,
            edge_count: 0,
            pd_fraction: 0.0,
            key_skew: 0.0,
            injected_failure_fraction: 0.0,
        };
        let cfg = select_strategy(&stats, None);
        assert_eq!(cfg.exploration, Exploration::Bfs);
        assert_eq!(cfg.granularity, Granularity::Single);
        assert_eq!(cfg.abort_mode, AbortMode::Lazy);
    }

    #[test]
    fn select_strategy_grouped_dfs() {
        let stats = crate::tpg::BatchStats {
            op_count: 100,
            edge_count: 200,
            pd_fraction: 0.05,
            key_skew: 0.5,
            injected_failure_fraction: 0.0,
        };
        let cfg = select_strategy(&stats, None);
        assert_eq!(cfg.exploration, Exploration::Dfs);
        assert_eq!(cfg.granularity, Granularity::Group);
        assert_eq!(cfg.abort_mode, AbortMode::Lazy);
    }

    #[test]
    fn select_strategy_override_wins() {
        let stats = crate::tpg::BatchStats {
            op_count: 1,
            edge_count: 0,
            pd_fraction: 0.0,
            key_skew: 0.0,
            injected_failure_fraction: 0.0,
        };
        let user = StrategyConfig::parse("random,group,eager").unwrap();
        assert_eq!(select_strategy(&stats, Some(user)), user);
    }

    #[test]
    fn groups_merge_same_key_chain() {
        // Three writers of one key and nothing else: one unit.
        let tpg = seal(vec![
            txn(1, 1, vec![w(key(1), 1)]),
            txn(2, 2, vec![w(key(1), 2)]),
            txn(3, 3, vec![w(key(1), 3)]),
        ]);
        let units = form_groups(&tpg);
        assert_eq!(units, vec![TaskUnit { ops: vec![0, 1, 2] }]);
    }

    #[test]
    fn groups_keep_unrelated_keys_apart() {
        let tpg = seal(vec![txn(1, 1, vec![w(key(1), 1)]), txn(2, 2, vec![w(key(2), 2)])]);
        let units = form_groups(&tpg);
        assert_eq!(units.len(), 2);
        assert!(units.iter().all(|u| u.ops.len() == 1));
    }

    #[test]
    fn groups_split_at_external_in_edge() {
        // Key-1 chain a -> b, but b's transaction has an earlier statement,
        // so b carries a logical in-edge from outside the chain: two units.
        let tpg = seal(vec![
            txn(1, 1, vec![w(key(1), 1)]),
            txn(2, 2, vec![w(key(9), 9), w(key(1), 2)]),
        ]);
        let units = form_groups(&tpg);
        // Vertices: 0 = T1.w(k1), 1 = T2.w(k9), 2 = T2.w(k1).
        assert!(units.contains(&TaskUnit { ops: vec![0] }));
        assert!(units.contains(&TaskUnit { ops: vec![1] }));
        assert!(units.contains(&TaskUnit { ops: vec![2] }));
    }

    #[test]
    fn singleton_frontier_returned_under_every_mode() {
        for mode in [Exploration::Dfs, Exploration::Bfs, Exploration::Random] {
            let tpg = seal(vec![txn(1, 1, vec![w(key(1), 1)])]);
            let store = MvccStore::with_empty_init();
            let rt = BatchRuntime::new(&tpg, &store, traced(mode));
            let mut ctx = rt.worker_ctx(0);
            match rt.next_task(&mut ctx) {
                NextTask::Unit(u) => assert_eq!(u.ops, vec![0]),
                other => panic!("expected the singleton unit, got {other:?}"),
            }
        }
    }

    #[test]
    fn dfs_follows_chain_in_order() {
        let tpg = seal(vec![
            txn(1, 1, vec![w(key(1), 1)]),
            txn(2, 2, vec![w(key(1), 2)]),
            txn(3, 3, vec![w(key(1), 3)]),
        ]);
        let store = MvccStore::with_empty_init();
        let rt = BatchRuntime::new(&tpg, &store, traced(Exploration::Dfs));
        drive_single(&rt);
        let order: Vec<OpId> = rt.claim_log.lock().unwrap().iter().map(|c| c.op).collect();
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn bfs_explores_diamond_in_frontier_entry_order() {
        // a produces k; b and c declare k (parametric fan-out); d declares
        // b's and c's keys. Claim order must be a, b, c, d.
        let tpg = seal(vec![
            txn(1, 1, vec![w(key(0), 7)]),
            txn(2, 2, vec![rm_copy(key(2), vec![key(0)])]),
            txn(3, 3, vec![rm_copy(key(3), vec![key(0)])]),
            txn(4, 4, vec![rm_copy(key(4), vec![key(2), key(3)])]),
        ]);
        let store = MvccStore::with_empty_init();
        let rt = BatchRuntime::new(&tpg, &store, traced(Exploration::Bfs));
        drive_single(&rt);
        let order: Vec<OpId> = rt.claim_log.lock().unwrap().iter().map(|c| c.op).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn mark_executed_releases_successors() {
        let tpg = seal(vec![txn(1, 1, vec![w(key(1), 1)]), txn(2, 2, vec![w(key(1), 2)])]);
        let store = MvccStore::with_empty_init();
        let rt = BatchRuntime::new(&tpg, &store, StrategyConfig::default());
        assert_eq!(rt.mark_executed(0).unwrap(), vec![1]);
        // Releasing an op that is not Ready is illegal.
        assert!(matches!(rt.mark_executed(0), Err(Error::IllegalTransition { .. })));
    }

    #[test]
    fn mark_executed_waits_for_all_predecessors() {
        // a -> d and c -> d (two writers then a reader of both keys).
        let tpg = seal(vec![
            txn(1, 1, vec![w(key(1), 1)]),
            txn(2, 2, vec![w(key(2), 2)]),
            txn(3, 3, vec![rm_copy(key(9), vec![key(1), key(2)])]),
        ]);
        let store = MvccStore::with_empty_init();
        let rt = BatchRuntime::new(&tpg, &store, StrategyConfig::default());
        assert_eq!(rt.mark_executed(0).unwrap(), Vec::<OpId>::new());
        assert_eq!(rt.mark_executed(1).unwrap(), vec![2]);
    }

    #[test]
    fn run_batch_on_empty_graph() {
        let tpg = seal(vec![]);
        let store = MvccStore::with_empty_init();
        let result = run_batch(&tpg, &store, StrategyConfig::default(), 4);
        assert!(result.outcomes.is_empty());
        assert_eq!(result.abort_count, 0);
    }

    #[test]
    fn single_txn_failure_aborts_and_leaves_store_unchanged() {
        for mode in [AbortMode::Eager, AbortMode::Lazy] {
            let mut t = txn(1, 1, vec![w(key(1), 1)]);
            t.inject_fail = true;
            let tpg = seal(vec![t]);
            let store = MvccStore::with_empty_init();
            let cfg = StrategyConfig { abort_mode: mode, ..Default::default() };
            let result = run_batch(&tpg, &store, cfg, 2);
            assert_eq!(result.outcomes, vec![TxnOutcome::Aborted]);
            store.commit_batch().unwrap();
            assert!(store.snapshot().is_empty());
        }
    }

    #[test]
    fn pd_successor_reads_surviving_state_after_abort() {
        // T1 would write k = 5 but fails; T3 copies k into its own key and
        // must see the pre-batch value 2.
        let store = MvccStore::with_empty_init();
        store.preset(key(1), codec::u64_to_value(2));
        let mut t1 = txn(1, 1, vec![w(key(1), 5)]);
        t1.inject_fail = true;
        let t3 = txn(3, 3, vec![rm_copy(key(9), vec![key(1)])]);
        for mode in [AbortMode::Eager, AbortMode::Lazy] {
            let tpg = seal(vec![t1.clone(), t3.clone()]);
            let cfg = StrategyConfig { abort_mode: mode, ..Default::default() };
            let result = run_batch(&tpg, &store, cfg, 2);
            assert_eq!(result.outcomes, vec![TxnOutcome::Aborted, TxnOutcome::Committed]);
            store.commit_batch().unwrap();
            let snap = store.snapshot();
            assert_eq!(snap[&key(9)], codec::u64_to_value(2), "mode {mode:?}");
        }
    }

    #[test]
    fn lazy_wastes_more_work_than_eager() {
        // Failing transaction with two more statements, plus a reader that
        // consumes its dirty write under lazy mode.
        let mk = || {
            let mut t1 = txn(
                1,
                1,
                vec![w(key(1), 1), w(key(2), 2), w(key(3), 3)],
            );
            t1.inject_fail = true;
            let t2 = txn(2, 2, vec![rm_copy(key(9), vec![key(2)])]);
            vec![t1, t2]
        };
        let run = |mode| {
            let tpg = seal(mk());
            let store = MvccStore::with_empty_init();
            let cfg = StrategyConfig { abort_mode: mode, ..Default::default() };
            let result = run_batch(&tpg, &store, cfg, 1);
            store.commit_batch().unwrap();
            (result, store.snapshot())
        };
        let (eager, snap_eager) = run(AbortMode::Eager);
        let (lazy, snap_lazy) = run(AbortMode::Lazy);
        assert_eq!(snap_eager, snap_lazy);
        assert_eq!(snap_eager[&key(9)], Vec::<u8>::new()); // baseline, not 2
        assert_eq!(eager.wasted_ops, 0);
        assert_eq!(lazy.wasted_ops, 2);
        assert!(lazy.reexec_ops >= 1);
        assert_eq!(eager.outcomes, lazy.outcomes);
    }

    #[test]
    fn abort_of_committed_txn_is_rejected() {
        let tpg = seal(vec![txn(1, 1, vec![w(key(1), 1)])]);
        let store = MvccStore::with_empty_init();
        let rt = BatchRuntime::new(&tpg, &store, StrategyConfig::default());
        drive_single(&rt);
        assert_eq!(rt.outcome(0), TxnOutcome::Committed);
        assert!(matches!(
            rt.abort_transaction(TxnId(1), AbortMode::Eager),
            Err(Error::AlreadyCommitted)
        ));
    }

    #[test]
    fn manual_eager_abort_rolls_back_executed_ops() {
        // Execute the first statement of a two-op transaction, then abort it
        // mid-run: its produced version must vanish and the blocked reader
        // must resolve against the surviving value.
        let t1 = txn(1, 1, vec![w(key(1), 5), w(key(2), 7)]);
        let t2 = txn(2, 2, vec![rm_copy(key(9), vec![key(1)])]);
        let tpg = seal(vec![t1, t2]);
        let store = MvccStore::with_empty_init();
        store.preset(key(1), codec::u64_to_value(2));
        let rt = BatchRuntime::new(&tpg, &store, StrategyConfig::default());
        let mut ctx = rt.worker_ctx(0);
        let mut clock = SpanClock::new(Category::Explore);
        // Only one root exists (T1.op0); run just that unit.
        let NextTask::Unit(unit) = rt.next_task(&mut ctx) else { panic!("expected root") };
        assert_eq!(unit.ops, vec![0]);
        rt.execute_unit(&mut ctx, &unit, &mut clock);
        assert_eq!(rt.status(0), OpStatus::Executed);

        let affected = rt.abort_transaction(TxnId(1), AbortMode::Eager).unwrap();
        assert_eq!(affected, vec![0, 1]);
        assert_eq!(rt.outcome(0), TxnOutcome::Aborted);
        assert_eq!(rt.status(1), OpStatus::Aborted);

        drive_single(&rt); // finish the batch: t2 runs against rolled-back state
        assert_eq!(rt.outcome(1), TxnOutcome::Committed);
        store.mark_txn_committed(TxnId(2));
        store.commit_batch().unwrap();
        assert_eq!(store.snapshot()[&key(9)], codec::u64_to_value(2));
    }

    #[test]
    fn outcome_identical_across_all_strategy_combinations() {
        let mk = || {
            let mut txns = Vec::new();
            for i in 0..24u64 {
                let mut t = txn(
                    i,
                    i,
                    vec![
                        rm_copy(key(i % 3), vec![key((i + 1) % 3)]),
                        w(key(10 + i % 2), i as u8),
                    ],
                );
                t.inject_fail = i % 7 == 0;
                txns.push(t);
            }
            txns
        };
        let mut reference: Option<(Vec<TxnOutcome>, std::collections::BTreeMap<_, _>)> = None;
        for exploration in [Exploration::Dfs, Exploration::Bfs, Exploration::Random] {
            for granularity in [Granularity::Single, Granularity::Group] {
                for abort_mode in [AbortMode::Eager, AbortMode::Lazy] {
                    for workers in [1usize, 4] {
                        let tpg = seal(mk());
                        let store = MvccStore::with_empty_init();
                        let cfg = StrategyConfig {
                            exploration,
                            granularity,
                            abort_mode,
                            rng_seed: 11,
                            record_trace: false,
                        };
                        let result = run_batch(&tpg, &store, cfg, workers);
                        store.commit_batch().unwrap();
                        let got = (result.outcomes, store.snapshot());
                        match &reference {
                            None => reference = Some(got),
                            Some(want) => {
                                assert_eq!(&got, want, "{cfg:?} workers={workers}")
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn execution_trace_is_fsm_legal_with_unique_claims() {
        let mut txns = Vec::new();
        for i in 0..30u64 {
            let mut t = txn(i, i, vec![w(key(i % 4), i as u8), rm_copy(key(20), vec![key(i % 4)])]);
            t.inject_fail = i % 9 == 0;
            txns.push(t);
        }
        let tpg = seal(txns);
        let store = MvccStore::with_empty_init();
        let cfg = StrategyConfig { record_trace: true, ..Default::default() };
        let result = run_batch(&tpg, &store, cfg, 4);
        assert!(crate::audit::audit_transitions(&result.transition_log).is_empty());
        crate::audit::audit_claims(&result.claim_log, result.claimed_ops).unwrap();
    }
}
