//! Reference executors.
//!
//! `run_serial_oracle` executes committed transactions one at a time in
//! timestamp (arrival) order against a plain map, with no graph and no
//! versioning, and defines ground truth for every equivalence check.
//! `run_lock_baseline` is a lock-and-order executor in the style of
//! coarse-grained chain-state frameworks: exclusive per-key locks over a
//! transaction's whole key set, admitted in timestamp order per key. It must
//! match the oracle. `run_nolock` removes synchronization of values entirely
//! and serves as the performance ceiling; its results may diverge under
//! contention and only the 1-worker case must match the oracle.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use crate::error::Result;
use crate::metrics::{Category, SpanClock, WorkerClock};
use crate::model::{
    codec, OpEffect, OpResult, PacketAction, PacketEvent, PacketKind, StateKey, Transaction,
    TxnId, TxnOutcome, Value, Verdict, WriteSource,
};
use crate::vnf::{build_transaction, VnfChain};

/// Comparable results of a full run: committed state, per-transaction fates,
/// per-transaction actions. Transactions are keyed by (arrival_seq, stage).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExecOutcomes {
    pub snapshot: BTreeMap<StateKey, Value>,
    pub outcomes: BTreeMap<(u64, usize), TxnOutcome>,
    pub actions: BTreeMap<(u64, usize), PacketAction>,
}

impl ExecOutcomes {
    /// Number of differing entries across the three maps.
    pub fn diff_count(&self, other: &ExecOutcomes) -> usize {
        fn diff<K: Ord + Clone, V: PartialEq>(a: &BTreeMap<K, V>, b: &BTreeMap<K, V>) -> usize {
            let keys: BTreeSet<K> = a.keys().chain(b.keys()).cloned().collect();
            keys.into_iter().filter(|k| a.get(k) != b.get(k)).count()
        }
        diff(&self.snapshot, &other.snapshot)
            + diff(&self.outcomes, &other.outcomes)
            + diff(&self.actions, &other.actions)
    }
}

/// Timing and accounting shared by the reference executors.
#[derive(Debug, Default)]
pub struct BaselineMetrics {
    pub wall_ns: u64,
    pub txn_count: usize,
    pub worker_clocks: Vec<WorkerClock>,
    pub coord_clock: WorkerClock,
    /// (packet kind, construction-to-post nanoseconds) per transaction.
    pub latencies: Vec<(PacketKind, u64)>,
}

impl BaselineMetrics {
    pub fn throughput_tps(&self) -> f64 {
        if self.wall_ns == 0 {
            return 0.0;
        }
        self.txn_count as f64 / (self.wall_ns as f64 / 1e9)
    }
}

/// Value storage as one transaction execution sees it.
trait ValueAccess {
    fn get(&mut self, key: &StateKey) -> Value;
    fn set(&mut self, key: &StateKey, value: Value);
}

/// Applies one transaction's operations in statement order. Shared semantics
/// for the reference executors; the concurrency behaviour of the `access`
/// implementation is what distinguishes them.
fn exec_ops(txn: &Transaction, access: &mut dyn ValueAccess) -> (Vec<OpResult>, Vec<i64>) {
    let mut scratch = vec![0i64; txn.scratch_slots];
    let mut results = Vec::with_capacity(txn.ops.len());
    for op in &txn.ops {
        match &op.effect {
            OpEffect::Read => {
                results.push(OpResult { read: Some(access.get(&op.key)), written: None });
            }
            OpEffect::Write(src) => {
                let value = match src {
                    WriteSource::Literal(v) => v.clone(),
                    WriteSource::Scratch(slot) => {
                        codec::i64_to_value(scratch.get(*slot).copied().unwrap_or(0))
                    }
                };
                access.set(&op.key, value.clone());
                results.push(OpResult { read: None, written: Some((op.key.clone(), value)) });
            }
            OpEffect::ReadModify(f) => {
                let current = access.get(&op.key);
                let reads: Vec<Value> = op.read_set.iter().map(|k| access.get(k)).collect();
                let out = f(&crate::model::ModifyInput { current: &current, reads: &reads }, &mut scratch);
                let target = match out.target {
                    Some(i) => op.read_set[i].clone(),
                    None => op.key.clone(),
                };
                access.set(&target, out.value.clone());
                results.push(OpResult { read: Some(current), written: Some((target, out.value)) });
            }
        }
    }
    (results, scratch)
}

struct MapAccess<'a> {
    state: &'a mut HashMap<StateKey, Value>,
    written: &'a mut BTreeSet<StateKey>,
    chain: &'a VnfChain,
}

impl ValueAccess for MapAccess<'_> {
    fn get(&mut self, key: &StateKey) -> Value {
        self.state.get(key).cloned().unwrap_or_else(|| self.chain.init_value(key))
    }

    fn set(&mut self, key: &StateKey, value: Value) {
        self.written.insert(key.clone());
        self.state.insert(key.clone(), value);
    }
}

/// Ground truth: single-threaded execution in arrival order, one chain stage
/// at a time, skipping injected-failure transactions entirely. A DROP
/// verdict (or an abort, or a handler rejection) removes the packet from the
/// remaining stages.
pub fn run_serial_oracle(packets: &[PacketEvent], chain: &VnfChain) -> Result<ExecOutcomes> {
    let mut state: HashMap<StateKey, Value> = HashMap::new();
    let mut written: BTreeSet<StateKey> = BTreeSet::new();
    let mut out = ExecOutcomes::default();

    let mut surviving: Vec<&PacketEvent> = packets.iter().collect();
    surviving.sort_by_key(|p| p.arrival_seq);
    let mut txn_seq = 0u64;

    for (stage, handler) in chain.stages.iter().enumerate() {
        let mut next = Vec::with_capacity(surviving.len());
        for packet in surviving {
            if packet.inject_fail {
                out.outcomes.insert((packet.arrival_seq, stage), TxnOutcome::Aborted);
                continue;
            }
            let mut txn = match build_transaction(handler, packet, stage as u64, TxnId(txn_seq)) {
                Ok(t) => t,
                Err(crate::Error::HandlerRejected(_)) => continue,
                Err(e) => return Err(e),
            };
            txn.meta.stage = stage;
            txn_seq += 1;
            let mut access = MapAccess { state: &mut state, written: &mut written, chain };
            let (results, scratch) = exec_ops(&txn, &mut access);
            let action = txn.post.as_ref().expect("handlers attach post")(&txn.meta, &results, &scratch);
            out.outcomes.insert((packet.arrival_seq, stage), TxnOutcome::Committed);
            let survives = action.verdict != Verdict::Drop;
            out.actions.insert((packet.arrival_seq, stage), action);
            if survives {
                next.push(packet);
            }
        }
        surviving = next;
    }

    for key in written {
        let v = state.remove(&key).unwrap();
        out.snapshot.insert(key, v);
    }
    Ok(out)
}

struct LockCell {
    /// Timestamps of transactions that will touch this key and have not
    /// finished; admission requires being the minimum.
    pending: Mutex<BTreeSet<u64>>,
    admitted: Condvar,
    value: Mutex<Value>,
    written: AtomicBool,
}

/// Access through exclusive guards held for the whole transaction.
struct GuardAccess<'a, 'g> {
    index_of: &'a HashMap<&'a StateKey, usize>,
    cells: &'a [&'a Arc<LockCell>],
    guards: &'a mut [std::sync::MutexGuard<'g, Value>],
}

impl ValueAccess for GuardAccess<'_, '_> {
    fn get(&mut self, key: &StateKey) -> Value {
        self.guards[self.index_of[key]].clone()
    }

    fn set(&mut self, key: &StateKey, value: Value) {
        let i = self.index_of[key];
        self.cells[i].written.store(true, Ordering::Relaxed);
        *self.guards[i] = value;
    }
}

/// Access that locks each cell only for the single read or write: no
/// cross-key atomicity, no ordering.
struct RacyAccess<'a> {
    cells: &'a HashMap<StateKey, Arc<LockCell>>,
}

impl ValueAccess for RacyAccess<'_> {
    fn get(&mut self, key: &StateKey) -> Value {
        self.cells[key].value.lock().unwrap().clone()
    }

    fn set(&mut self, key: &StateKey, value: Value) {
        let cell = &self.cells[key];
        cell.written.store(true, Ordering::Relaxed);
        *cell.value.lock().unwrap() = value;
    }
}

/// Lock-and-order executor: every transaction locks its full declared key
/// set exclusively and is admitted per key in timestamp order, which is what
/// keeps it oracle-equal (and what it pays for in Sync/Lock time).
pub fn run_lock_baseline(
    packets: &[PacketEvent],
    chain: &VnfChain,
    workers: usize,
) -> Result<(ExecOutcomes, BaselineMetrics)> {
    run_queue_executor(packets, chain, workers, QueueMode::OrderedLocks)
}

/// Synchronization-free executor: structurally safe per-value cells, no
/// ordering, no atomicity across a transaction's keys. The performance
/// ceiling; with more than one worker its results may diverge.
pub fn run_nolock(
    packets: &[PacketEvent],
    chain: &VnfChain,
    workers: usize,
) -> Result<(ExecOutcomes, BaselineMetrics)> {
    run_queue_executor(packets, chain, workers, QueueMode::Unsynchronized)
}

#[derive(Clone, Copy, PartialEq)]
enum QueueMode {
    OrderedLocks,
    Unsynchronized,
}

fn run_queue_executor(
    packets: &[PacketEvent],
    chain: &VnfChain,
    workers: usize,
    mode: QueueMode,
) -> Result<(ExecOutcomes, BaselineMetrics)> {
    assert!(workers >= 1);
    let start = Instant::now();
    let mut out = ExecOutcomes::default();
    let mut metrics = BaselineMetrics::default();
    let mut coord = crate::metrics::BreakdownRecord::default();
    let mut coord_wall = 0u64;

    let mut surviving: Vec<&PacketEvent> = packets.iter().collect();
    surviving.sort_by_key(|p| p.arrival_seq);
    let mut txn_seq = 0u64;
    let mut worker_totals: Vec<WorkerClock> = vec![WorkerClock::default(); workers];

    for (stage, handler) in chain.stages.iter().enumerate() {
        let construct_at = Instant::now();
        // Build every surviving packet's transaction and register its keys.
        let mut txns: Vec<Transaction> = Vec::with_capacity(surviving.len());
        let mut keysets: Vec<Vec<StateKey>> = Vec::with_capacity(surviving.len());
        let mut built_at: Vec<Instant> = Vec::with_capacity(surviving.len());
        let mut cells: HashMap<StateKey, Arc<LockCell>> = HashMap::new();
        for packet in &surviving {
            let mut txn = match build_transaction(handler, packet, stage as u64, TxnId(txn_seq)) {
                Ok(t) => t,
                Err(crate::Error::HandlerRejected(_)) => continue,
                Err(e) => return Err(e),
            };
            txn.meta.stage = stage;
            txn_seq += 1;
            let mut keys: BTreeSet<StateKey> = BTreeSet::new();
            for op in &txn.ops {
                keys.insert(op.key.clone());
                keys.extend(op.read_set.iter().cloned());
            }
            for key in &keys {
                let cell = cells.entry(key.clone()).or_insert_with(|| {
                    Arc::new(LockCell {
                        pending: Mutex::new(BTreeSet::new()),
                        admitted: Condvar::new(),
                        value: Mutex::new(chain.init_value(key)),
                        written: AtomicBool::new(false),
                    })
                });
                if mode == QueueMode::OrderedLocks {
                    cell.pending.lock().unwrap().insert(packet.arrival_seq);
                }
            }
            keysets.push(keys.into_iter().collect());
            built_at.push(Instant::now());
            txns.push(txn);
        }
        let construct_ns = construct_at.elapsed().as_nanos() as u64;
        coord.add(Category::Construct, construct_ns);
        coord_wall += construct_ns;

        // Shared work queue in timestamp order; results per transaction.
        let queue: Mutex<VecDeque<usize>> = Mutex::new((0..txns.len()).collect());
        let actions: Vec<Mutex<Option<PacketAction>>> = (0..txns.len()).map(|_| Mutex::new(None)).collect();
        let latencies: Mutex<Vec<(PacketKind, u64)>> = Mutex::new(Vec::new());

        let stage_clocks: Vec<WorkerClock> = std::thread::scope(|s| {
            let txns = &txns;
            let keysets = &keysets;
            let cells = &cells;
            let queue = &queue;
            let actions = &actions;
            let latencies = &latencies;
            let built_at = &built_at;
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    s.spawn(move || {
                        run_queue_worker(mode, txns, keysets, cells, queue, actions, latencies, built_at)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for (i, c) in stage_clocks.into_iter().enumerate() {
            worker_totals[i].breakdown.merge(&c.breakdown);
            worker_totals[i].wall_ns += c.wall_ns;
        }

        // Settle the stage: outcomes, actions, survivors.
        let settle_at = Instant::now();
        let handled: HashMap<u64, usize> =
            txns.iter().enumerate().map(|(i, t)| (t.meta.arrival_seq, i)).collect();
        let mut next = Vec::with_capacity(surviving.len());
        for packet in surviving {
            let Some(&idx) = handled.get(&packet.arrival_seq) else {
                continue; // rejected by the handler
            };
            let txn = &txns[idx];
            if txn.inject_fail {
                out.outcomes.insert((packet.arrival_seq, stage), TxnOutcome::Aborted);
                continue;
            }
            let action = actions[idx].lock().unwrap().take().expect("txn processed");
            out.outcomes.insert((packet.arrival_seq, stage), TxnOutcome::Committed);
            let survives = action.verdict != Verdict::Drop;
            out.actions.insert((packet.arrival_seq, stage), action);
            if survives {
                next.push(packet);
            }
        }
        surviving = next;
        metrics.txn_count += txns.len();
        metrics.latencies.append(&mut latencies.into_inner().unwrap());

        for (key, cell) in &cells {
            if cell.written.load(Ordering::Relaxed) {
                out.snapshot.insert(key.clone(), cell.value.lock().unwrap().clone());
            }
        }
        let settle_ns = settle_at.elapsed().as_nanos() as u64;
        coord.add(Category::Others, settle_ns);
        coord_wall += settle_ns;
    }

    metrics.wall_ns = start.elapsed().as_nanos() as u64;
    metrics.worker_clocks = worker_totals;
    metrics.coord_clock = WorkerClock { breakdown: coord, wall_ns: coord_wall };
    Ok((out, metrics))
}

#[allow(clippy::too_many_arguments)]
fn run_queue_worker(
    mode: QueueMode,
    txns: &[Transaction],
    keysets: &[Vec<StateKey>],
    cells: &HashMap<StateKey, Arc<LockCell>>,
    queue: &Mutex<VecDeque<usize>>,
    actions: &[Mutex<Option<PacketAction>>],
    latencies: &Mutex<Vec<(PacketKind, u64)>>,
    built_at: &[Instant],
) -> WorkerClock {
    let mut clock = SpanClock::new(Category::Others);
    loop {
        let idx = { queue.lock().unwrap().pop_front() };
        let Some(idx) = idx else { break };
        let txn = &txns[idx];
        let ts = txn.meta.arrival_seq;
        let keys = &keysets[idx];

        if mode == QueueMode::OrderedLocks {
            // Admission: wait until this transaction is the oldest pending
            // one on every key it touches.
            clock.switch_to(Category::Sync);
            for key in keys {
                let cell = &cells[key];
                let mut pending = cell.pending.lock().unwrap();
                while pending.first() != Some(&ts) {
                    pending = cell.admitted.wait(pending).unwrap();
                }
            }
        }

        if txn.inject_fail {
            // Injected failure: hold the ordering slot but apply nothing.
            clock.switch_to(Category::Useful);
        } else {
            match mode {
                QueueMode::OrderedLocks => {
                    clock.switch_to(Category::Lock);
                    let cell_refs: Vec<&Arc<LockCell>> = keys.iter().map(|k| &cells[k]).collect();
                    let index_of: HashMap<&StateKey, usize> =
                        keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
                    let mut guards: Vec<std::sync::MutexGuard<'_, Value>> =
                        cell_refs.iter().map(|c| c.value.lock().unwrap()).collect();

                    clock.switch_to(Category::Useful);
                    let mut access =
                        GuardAccess { index_of: &index_of, cells: &cell_refs, guards: &mut guards };
                    let (results, scratch) = exec_ops(txn, &mut access);
                    let action = txn.post.as_ref().unwrap()(&txn.meta, &results, &scratch);
                    *actions[idx].lock().unwrap() = Some(action);
                }
                QueueMode::Unsynchronized => {
                    clock.switch_to(Category::Useful);
                    let mut access = RacyAccess { cells };
                    let (results, scratch) = exec_ops(txn, &mut access);
                    let action = txn.post.as_ref().unwrap()(&txn.meta, &results, &scratch);
                    *actions[idx].lock().unwrap() = Some(action);
                }
            }
        }
        latencies
            .lock()
            .unwrap()
            .push((txn.meta.kind.clone(), built_at[idx].elapsed().as_nanos() as u64));

        clock.switch_to(Category::Others);
        if mode == QueueMode::OrderedLocks {
            for key in keys {
                let cell = &cells[key];
                cell.pending.lock().unwrap().remove(&ts);
                cell.admitted.notify_all();
            }
        }
    }
    clock.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vnf::{handler_by_name, lb_handler};
    use crate::workload::{generate_trace, TraceConfig};

    fn lb_chain(servers: usize) -> VnfChain {
        lb_handler(servers).into()
    }

    #[test]
    fn oracle_balances_hundred_new_connections() {
        let packets: Vec<PacketEvent> = (0..100)
            .map(|i| PacketEvent {
                arrival_seq: i,
                delivery_seq: i,
                flow_id: i,
                kind: PacketKind::New,
                inject_fail: false,
            })
            .collect();
        let out = run_serial_oracle(&packets, &lb_chain(4)).unwrap();
        for server in 0..4u64 {
            let key = StateKey::from_u64(crate::vnf::LB_COUNTER, server);
            assert_eq!(codec::value_to_u64(&out.snapshot[&key]), 25, "server {server}");
        }
    }

    #[test]
    fn oracle_with_all_failures_leaves_initial_state() {
        let cfg = TraceConfig { packet_count: 50, failure_rate: 1.0, new_conn_ratio: 0.5, ..Default::default() };
        let packets = generate_trace(&cfg).unwrap();
        let out = run_serial_oracle(&packets, &lb_chain(4)).unwrap();
        assert!(out.snapshot.is_empty());
        assert!(out.outcomes.values().all(|o| *o == TxnOutcome::Aborted));
        assert!(out.actions.is_empty());
    }

    #[test]
    fn oracle_empty_trace_is_empty() {
        let out = run_serial_oracle(&[], &lb_chain(4)).unwrap();
        assert_eq!(out, ExecOutcomes::default());
    }

    #[test]
    fn lock_baseline_matches_oracle_single_worker() {
        let cfg = TraceConfig { packet_count: 300, new_conn_ratio: 0.4, key_skew: 0.5, seed: 9, ..Default::default() };
        let packets = generate_trace(&cfg).unwrap();
        let chain = lb_chain(4);
        let oracle = run_serial_oracle(&packets, &chain).unwrap();
        let (got, metrics) = run_lock_baseline(&packets, &chain, 1).unwrap();
        assert_eq!(got.diff_count(&oracle), 0);
        assert_eq!(metrics.txn_count, 300);
    }

    #[test]
    fn lock_baseline_matches_oracle_multi_worker() {
        let cfg = TraceConfig { packet_count: 400, new_conn_ratio: 0.6, key_skew: 0.6, seed: 11, ..Default::default() };
        let packets = generate_trace(&cfg).unwrap();
        let chain = lb_chain(4);
        let oracle = run_serial_oracle(&packets, &chain).unwrap();
        let (got, _) = run_lock_baseline(&packets, &chain, 4).unwrap();
        assert_eq!(got.diff_count(&oracle), 0);
    }

    #[test]
    fn lock_baseline_matches_oracle_with_failures_and_chain() {
        let cfg = TraceConfig { packet_count: 250, new_conn_ratio: 0.5, failure_rate: 0.2, seed: 5, ..Default::default() };
        let packets = generate_trace(&cfg).unwrap();
        let chain = handler_by_name("chain:nat,lb,td").unwrap();
        let oracle = run_serial_oracle(&packets, &chain).unwrap();
        let (got, _) = run_lock_baseline(&packets, &chain, 3).unwrap();
        assert_eq!(got.diff_count(&oracle), 0);
    }

    #[test]
    fn nolock_single_worker_matches_oracle() {
        let cfg = TraceConfig { packet_count: 300, new_conn_ratio: 0.5, seed: 2, ..Default::default() };
        let packets = generate_trace(&cfg).unwrap();
        let chain = lb_chain(4);
        let oracle = run_serial_oracle(&packets, &chain).unwrap();
        let (got, _) = run_nolock(&packets, &chain, 1).unwrap();
        assert_eq!(got.diff_count(&oracle), 0);
    }

    #[test]
    fn nat_port_conservation_in_oracle() {
        let cfg = TraceConfig { packet_count: 200, new_conn_ratio: 0.6, flow_count: 64, seed: 7, ..Default::default() };
        let packets = generate_trace(&cfg).unwrap();
        let chain = handler_by_name("nat").unwrap();
        let out = run_serial_oracle(&packets, &chain).unwrap();
        let pool_key = StateKey::from_u64(crate::vnf::NAT_PORTS, 0);
        let free = out
            .snapshot
            .get(&pool_key)
            .map(|v| codec::value_to_u16list(v).len())
            .unwrap_or(crate::vnf::DEFAULT_NAT_POOL as usize);
        let mapped = out
            .snapshot
            .iter()
            .filter(|(k, v)| k.table == crate::vnf::NAT_FLOW && codec::value_to_i64(v) > 0)
            .count();
        assert_eq!(free + mapped, crate::vnf::DEFAULT_NAT_POOL as usize);
        // Every packet bumped the counter exactly once.
        let count_key = StateKey::from_u64(crate::vnf::NAT_COUNT, 0);
        assert_eq!(codec::value_to_u64(&out.snapshot[&count_key]), 200);
    }

    #[test]
    fn td_alert_sets_are_delivery_order_independent_in_oracle() {
        // The oracle sorts by arrival, so permuted delivery cannot matter;
        // this pins the baseline the engine is later held to.
        let cfg = TraceConfig { packet_count: 300, flow_count: 8, reorder_window: 64, seed: 13, ..Default::default() };
        let packets = generate_trace(&cfg).unwrap();
        let chain = handler_by_name("td").unwrap();
        let a = run_serial_oracle(&packets, &chain).unwrap();
        let mut shuffled = packets.clone();
        shuffled.reverse();
        let b = run_serial_oracle(&shuffled, &chain).unwrap();
        assert_eq!(a, b);
    }
}
