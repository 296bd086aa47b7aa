//! Multi-versioning state table.
//!
//! Each key holds a baseline value (the committed state as of the last batch)
//! plus an ordered chain of timestamped, per-transaction versions produced
//! within the current batch. Readers resolve the latest version strictly
//! before their timestamp (plus their own transaction's write, if any), so
//! concurrent operations on different positions of a chain never observe each
//! other out of order. Rolling back a transaction removes its versions and
//! reports which operations consumed them, letting the scheduler re-resolve
//! those reads against the surviving state.
//!
//! Version chains are per-batch: committing a batch folds each chain into its
//! baseline and clears it. History is isolation and rollback machinery, not
//! time travel.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use crate::error::{Error, Result};
use crate::model::{StateKey, Timestamp, TxnId, Value};

/// One timestamped value version.
#[derive(Debug, Clone)]
pub struct VersionEntry {
    pub ts: Timestamp,
    pub txn_id: TxnId,
    /// Statement index of the producing operation, for intra-transaction
    /// visibility: an operation sees only earlier statements' writes.
    pub op_index: u16,
    pub value: Value,
    pub committed: bool,
    /// Opaque consumer tokens (scheduler op ids) that read this version.
    consumers: Vec<u64>,
}

#[derive(Debug, Default)]
struct ChainData {
    /// Sorted by ts, strictly increasing.
    entries: Vec<VersionEntry>,
}

/// Per-key state: baseline plus the current batch's version chain.
pub struct ChainSlot {
    key: StateKey,
    /// Committed pre-batch value. Mutated only by `commit_batch` (quiescent).
    baseline: Mutex<Value>,
    data: Mutex<ChainData>,
    /// True once some committed batch wrote this key (or it was preset).
    modified: Mutex<bool>,
}

/// What a read resolved to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadSource {
    Baseline,
    Version { txn_id: TxnId },
}

impl ChainSlot {
    pub fn key(&self) -> &StateKey {
        &self.key
    }

    /// Latest version strictly before `ts`, or the reader's own
    /// transaction's write from an *earlier statement*, or the baseline.
    /// Registers `consumer` on the version it read so a later rollback can
    /// flag the reader.
    ///
    /// Statement-order visibility within a transaction matters on the
    /// re-execution path: a replayed first statement must not observe a
    /// later statement's surviving write (nor its own).
    pub fn read_at(
        &self,
        ts: Timestamp,
        txn_id: TxnId,
        reader_op: u16,
        consumer: Option<u64>,
    ) -> (Value, ReadSource) {
        let mut data = self.data.lock().unwrap();
        // Rightmost entry with entry.ts <= ts.
        let idx = data.entries.partition_point(|e| e.ts <= ts);
        let mut pick = None;
        for i in (0..idx).rev() {
            let e = &data.entries[i];
            if e.ts == ts {
                if e.txn_id == txn_id && e.op_index < reader_op {
                    pick = Some(i); // read-your-writes, statement order
                    break;
                }
                continue; // own later statement, or foreign same-ts entry
            }
            pick = Some(i);
            break;
        }
        match pick {
            Some(i) => {
                if let Some(token) = consumer {
                    data.entries[i].consumers.push(token);
                }
                let e = &data.entries[i];
                (e.value.clone(), ReadSource::Version { txn_id: e.txn_id })
            }
            None => (self.baseline.lock().unwrap().clone(), ReadSource::Baseline),
        }
    }

    /// Inserts an uncommitted version in timestamp order. A second write by
    /// the same transaction replaces the first (last write wins) and is
    /// reported as a duplicate.
    fn insert_version(&self, ts: Timestamp, txn_id: TxnId, op_index: u16, value: Value) -> bool {
        let mut data = self.data.lock().unwrap();
        let idx = data.entries.partition_point(|e| e.ts < ts);
        if idx < data.entries.len() && data.entries[idx].ts == ts {
            // Same timestamp means same transaction: last write wins, the
            // consumer list carries over.
            data.entries[idx].value = value;
            data.entries[idx].op_index = data.entries[idx].op_index.max(op_index);
            return false;
        }
        data.entries.insert(
            idx,
            VersionEntry { ts, txn_id, op_index, value, committed: false, consumers: Vec::new() },
        );
        true
    }

    /// Removes this transaction's version, if any, returning its value and
    /// the consumers that read it.
    fn remove_version(&self, txn_id: TxnId) -> Option<(Value, Vec<u64>)> {
        let mut data = self.data.lock().unwrap();
        let pos = data.entries.iter().position(|e| e.txn_id == txn_id)?;
        let e = data.entries.remove(pos);
        Some((e.value, e.consumers))
    }

    /// Replaces the value of this transaction's version in place, returning
    /// the old value and the consumers that read it. The consumer list is
    /// retained when the value is unchanged (those reads are still valid) and
    /// reset otherwise.
    fn swap_version_value(&self, txn_id: TxnId, value: Value) -> Option<(Value, Vec<u64>)> {
        let mut data = self.data.lock().unwrap();
        let e = data.entries.iter_mut().find(|e| e.txn_id == txn_id)?;
        let old = std::mem::replace(&mut e.value, value);
        if old == e.value {
            return Some((old, Vec::new()));
        }
        let consumers = std::mem::take(&mut e.consumers);
        Some((old, consumers))
    }

    fn mark_committed(&self, txn_id: TxnId) {
        let mut data = self.data.lock().unwrap();
        for e in data.entries.iter_mut() {
            if e.txn_id == txn_id {
                e.committed = true;
            }
        }
    }

    /// Value a hypothetical reader after every batch timestamp would see.
    fn latest_value(&self) -> Value {
        let data = self.data.lock().unwrap();
        match data.entries.last() {
            Some(e) => e.value.clone(),
            None => self.baseline.lock().unwrap().clone(),
        }
    }

    fn fold_into_baseline(&self) -> Result<()> {
        let mut data = self.data.lock().unwrap();
        if data.entries.is_empty() {
            return Ok(());
        }
        if data.entries.iter().any(|e| !e.committed) {
            return Err(Error::DanglingUncommitted);
        }
        let last = data.entries.last().unwrap().value.clone();
        data.entries.clear();
        *self.baseline.lock().unwrap() = last;
        *self.modified.lock().unwrap() = true;
        Ok(())
    }

    /// Snapshot of the raw chain for invariant checks.
    pub fn entries(&self) -> Vec<VersionEntry> {
        self.data.lock().unwrap().entries.clone()
    }
}

type InitFn = Box<dyn Fn(&StateKey) -> Value + Send + Sync>;

/// Rollback summary: how many versions were removed and who read them.
#[derive(Debug, Default)]
pub struct RollbackReport {
    pub removed: usize,
    pub consumers: Vec<u64>,
}

/// The store: per-key chain slots plus workload-declared initial values.
pub struct MvccStore {
    map: RwLock<HashMap<StateKey, Arc<ChainSlot>>>,
    init: InitFn,
    /// Keys written per in-flight transaction, for rollback and commit.
    txn_writes: Mutex<HashMap<TxnId, Vec<Arc<ChainSlot>>>>,
    access_count: AtomicU64,
    duplicate_warnings: AtomicU64,
}

impl MvccStore {
    /// `init` supplies the value of keys that were never written (state
    /// tables are conceptually pre-populated; counters start at 0, port
    /// pools start full, and so on).
    pub fn new(init: impl Fn(&StateKey) -> Value + Send + Sync + 'static) -> Self {
        MvccStore {
            map: RwLock::new(HashMap::new()),
            init: Box::new(init),
            txn_writes: Mutex::new(HashMap::new()),
            access_count: AtomicU64::new(0),
            duplicate_warnings: AtomicU64::new(0),
        }
    }

    /// Store whose unknown keys default to the empty value.
    pub fn with_empty_init() -> Self {
        MvccStore::new(|_| Vec::new())
    }

    /// Pre-populates a key; it shows up in snapshots from the start.
    pub fn preset(&self, key: StateKey, value: Value) {
        let slot = self.slot(&key);
        *slot.baseline.lock().unwrap() = value;
        *slot.modified.lock().unwrap() = true;
    }

    /// Materializes slots for every key a batch will touch, so execution
    /// never mutates the key map. Called between batches.
    pub fn register_keys<'a>(&self, keys: impl IntoIterator<Item = &'a StateKey>) {
        let mut map = self.map.write().unwrap();
        for key in keys {
            if !map.contains_key(key) {
                let slot = Arc::new(ChainSlot {
                    key: key.clone(),
                    baseline: Mutex::new((self.init)(key)),
                    data: Mutex::new(ChainData::default()),
                    modified: Mutex::new(false),
                });
                map.insert(key.clone(), slot);
            }
        }
    }

    /// Resolves (creating if needed) the slot for a key.
    pub fn slot(&self, key: &StateKey) -> Arc<ChainSlot> {
        if let Some(slot) = self.map.read().unwrap().get(key) {
            return Arc::clone(slot);
        }
        self.register_keys([key]);
        Arc::clone(self.map.read().unwrap().get(key).unwrap())
    }

    fn slot_if_present(&self, key: &StateKey) -> Option<Arc<ChainSlot>> {
        self.map.read().unwrap().get(key).cloned()
    }

    /// Transactional read at `ts`, as seen from the end of the transaction
    /// (all of its own writes visible). Unknown keys resolve to their
    /// declared initial value.
    pub fn read(&self, key: &StateKey, ts: Timestamp, txn_id: TxnId) -> Value {
        self.access_count.fetch_add(1, Ordering::Relaxed);
        match self.slot_if_present(key) {
            Some(slot) => slot.read_at(ts, txn_id, u16::MAX, None).0,
            None => (self.init)(key),
        }
    }

    /// Read by statement `reader_op` that records `consumer` on the version
    /// it resolves to.
    pub fn read_tracked(
        &self,
        slot: &ChainSlot,
        ts: Timestamp,
        txn_id: TxnId,
        reader_op: u16,
        consumer: u64,
    ) -> (Value, ReadSource) {
        self.access_count.fetch_add(1, Ordering::Relaxed);
        slot.read_at(ts, txn_id, reader_op, Some(consumer))
    }

    /// Inserts an uncommitted version. Duplicate writes by one transaction to
    /// one key collapse last-write-wins; a warning counter records them.
    pub fn write(&self, key: &StateKey, ts: Timestamp, value: Value, txn_id: TxnId) {
        let slot = self.slot(key);
        self.write_slot(&slot, ts, txn_id, 0, value);
    }

    pub fn write_slot(
        &self,
        slot: &Arc<ChainSlot>,
        ts: Timestamp,
        txn_id: TxnId,
        op_index: u16,
        value: Value,
    ) {
        self.access_count.fetch_add(1, Ordering::Relaxed);
        let fresh = slot.insert_version(ts, txn_id, op_index, value);
        if fresh {
            self.txn_writes.lock().unwrap().entry(txn_id).or_default().push(Arc::clone(slot));
        } else {
            self.duplicate_warnings.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Replaces a transaction's version on `slot` (re-execution path).
    /// Returns the displaced consumers; empty when the value is unchanged.
    pub fn replace_slot_version(
        &self,
        slot: &Arc<ChainSlot>,
        ts: Timestamp,
        txn_id: TxnId,
        op_index: u16,
        value: Value,
    ) -> Vec<u64> {
        self.access_count.fetch_add(1, Ordering::Relaxed);
        match slot.swap_version_value(txn_id, value.clone()) {
            Some((_old, consumers)) => consumers,
            None => {
                // The transaction had no version here (its earlier execution
                // retargeted elsewhere, or was rolled back); insert fresh.
                let fresh = slot.insert_version(ts, txn_id, op_index, value);
                debug_assert!(fresh, "replace after remove must insert");
                self.note_txn_write(txn_id, slot);
                Vec::new()
            }
        }
    }

    /// Removes every version the transaction produced from every chain.
    pub fn rollback_txn(&self, txn_id: TxnId) -> RollbackReport {
        let slots = self.txn_writes.lock().unwrap().remove(&txn_id).unwrap_or_default();
        let mut report = RollbackReport::default();
        for slot in slots {
            if let Some((_value, consumers)) = slot.remove_version(txn_id) {
                report.removed += 1;
                report.consumers.extend(consumers);
            }
        }
        report
    }

    /// Removes one transaction's version from one chain (re-execution with a
    /// changed retarget key). Returns the consumers of the removed version.
    pub fn remove_slot_version(&self, slot: &Arc<ChainSlot>, txn_id: TxnId) -> Vec<u64> {
        match slot.remove_version(txn_id) {
            Some((_value, consumers)) => {
                let mut writes = self.txn_writes.lock().unwrap();
                if let Some(v) = writes.get_mut(&txn_id) {
                    v.retain(|s| !Arc::ptr_eq(s, slot));
                }
                consumers
            }
            None => Vec::new(),
        }
    }

    /// Records a slot as written by a transaction (used with slot-level
    /// writes during re-execution).
    pub fn note_txn_write(&self, txn_id: TxnId, slot: &Arc<ChainSlot>) {
        let mut writes = self.txn_writes.lock().unwrap();
        let v = writes.entry(txn_id).or_default();
        if !v.iter().any(|s| Arc::ptr_eq(s, slot)) {
            v.push(Arc::clone(slot));
        }
    }

    /// Flags every version of the transaction committed.
    pub fn mark_txn_committed(&self, txn_id: TxnId) {
        let writes = self.txn_writes.lock().unwrap();
        if let Some(slots) = writes.get(&txn_id) {
            for slot in slots {
                slot.mark_committed(txn_id);
            }
        }
    }

    /// Ends the batch: folds every chain into its baseline. Errs if an
    /// uncommitted version survived abort processing (an engine bug).
    pub fn commit_batch(&self) -> Result<()> {
        let map = self.map.read().unwrap();
        for slot in map.values() {
            slot.fold_into_baseline()?;
        }
        drop(map);
        self.txn_writes.lock().unwrap().clear();
        Ok(())
    }

    /// Committed state: every key some committed batch (or preset) wrote.
    /// Only callable between batches.
    pub fn snapshot(&self) -> BTreeMap<StateKey, Value> {
        let map = self.map.read().unwrap();
        let mut out = BTreeMap::new();
        for (key, slot) in map.iter() {
            if *slot.modified.lock().unwrap() {
                out.insert(key.clone(), slot.baseline.lock().unwrap().clone());
            }
        }
        out
    }

    /// Snapshot computed from the raw chains (pre-commit), for GC checks:
    /// the value a reader after all timestamps would observe, per key.
    pub fn snapshot_uncompacted(&self) -> BTreeMap<StateKey, Value> {
        let map = self.map.read().unwrap();
        let mut out = BTreeMap::new();
        for (key, slot) in map.iter() {
            let has_entries = !slot.data.lock().unwrap().entries.is_empty();
            if has_entries || *slot.modified.lock().unwrap() {
                out.insert(key.clone(), slot.latest_value());
            }
        }
        out
    }

    /// CSV dump `table_id,key,value`, sorted lexicographically.
    pub fn dump_csv(&self) -> String {
        let snap = self.snapshot();
        let mut out = String::from("table_id,key,value\n");
        for (key, value) in snap {
            out.push_str(&format!("{},{},{}\n", key.table, key.render_key(), crate::model::hex(&value)));
        }
        out
    }

    /// Total reads+writes the store has served (purity instrumentation).
    pub fn access_count(&self) -> u64 {
        self.access_count.load(Ordering::Relaxed)
    }

    pub fn duplicate_warnings(&self) -> u64 {
        self.duplicate_warnings.load(Ordering::Relaxed)
    }

    /// All chain entries per key, for invariant checks in tests.
    pub fn chains(&self) -> BTreeMap<StateKey, Vec<VersionEntry>> {
        let map = self.map.read().unwrap();
        map.iter().map(|(k, s)| (k.clone(), s.entries())).collect()
    }
}
