//! Core transaction model: timestamps, state keys, operations, transactions.
//!
//! A packet triggers one transaction per network function. The function's
//! pre-processing step declares the full set of state access operations up
//! front (static keys plus a declared candidate read set for value-dependent
//! writes); the engine executes them atomically. Nothing in this module
//! touches shared state: transactions are plain data until scheduled.

use std::fmt;
use std::sync::Arc;

/// Logical time of a transaction: batch number plus the position of the
/// triggering packet's arrival within that batch. Compared lexicographically,
/// which makes engine order match packet arrival order even when packets are
/// delivered out of order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp {
    pub batch_id: u64,
    pub seq: u64,
}

impl Timestamp {
    pub fn new(batch_id: u64, seq: u64) -> Self {
        Timestamp { batch_id, seq }
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.batch_id, self.seq)
    }
}

/// Globally unique transaction identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TxnId(pub u64);

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifies one state object: a logical table plus an opaque key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateKey {
    pub table: &'static str,
    pub key: Box<[u8]>,
}

impl StateKey {
    pub fn new(table: &'static str, key: impl Into<Box<[u8]>>) -> Self {
        StateKey { table, key: key.into() }
    }

    /// Key from a u64, little-endian. All shipped workloads use u64 keys.
    pub fn from_u64(table: &'static str, k: u64) -> Self {
        StateKey { table, key: Box::new(k.to_le_bytes()) }
    }

    /// Renders the key for dumps: u64 keys as decimal, anything else as hex.
    pub fn render_key(&self) -> String {
        if self.key.len() == 8 {
            let mut b = [0u8; 8];
            b.copy_from_slice(&self.key);
            u64::from_le_bytes(b).to_string()
        } else {
            hex(&self.key)
        }
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.table, self.render_key())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Opaque state value. The engine never interprets values; workloads supply
/// codecs (see [`codec`]).
pub type Value = Vec<u8>;

/// The three kinds of state access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessType {
    Read,
    Write,
    ReadModify,
}

impl AccessType {
    /// Whether a successful execution produces a new state version.
    pub fn produces_version(self) -> bool {
        !matches!(self, AccessType::Read)
    }
}

impl fmt::Display for AccessType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AccessType::Read => "READ",
            AccessType::Write => "WRITE",
            AccessType::ReadModify => "READ_MODIFY",
        };
        f.write_str(s)
    }
}

/// Value source for a WRITE. `Scratch` reads a transaction-local slot filled
/// by an earlier operation of the same transaction (logical dependencies
/// guarantee the producer ran first).
#[derive(Clone)]
pub enum WriteSource {
    Literal(Value),
    Scratch(usize),
}

impl fmt::Debug for WriteSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WriteSource::Literal(v) => write!(f, "Literal({})", hex(v)),
            WriteSource::Scratch(i) => write!(f, "Scratch({i})"),
        }
    }
}

/// Inputs visible to a READ_MODIFY at execution time.
pub struct ModifyInput<'a> {
    /// Current value of the operation's declared key at its timestamp.
    pub current: &'a [u8],
    /// Values of the declared read set, in declaration order.
    pub reads: &'a [Value],
}

/// What a READ_MODIFY decided to do.
pub struct ModifyOutcome {
    /// Index into the declared read set naming the key that receives the new
    /// version; `None` writes the operation's own key.
    pub target: Option<usize>,
    pub value: Value,
}

/// Pure modify function. May write transaction-local scratch slots that later
/// operations or post-processing consume. Must be deterministic in its
/// inputs: re-execution after a rollback replays it.
pub type ModifyFn = Arc<dyn Fn(&ModifyInput<'_>, &mut Vec<i64>) -> ModifyOutcome + Send + Sync>;

/// Access kind together with its payload.
#[derive(Clone)]
pub enum OpEffect {
    Read,
    Write(WriteSource),
    ReadModify(ModifyFn),
}

impl OpEffect {
    pub fn access_type(&self) -> AccessType {
        match self {
            OpEffect::Read => AccessType::Read,
            OpEffect::Write(_) => AccessType::Write,
            OpEffect::ReadModify(_) => AccessType::ReadModify,
        }
    }
}

impl fmt::Debug for OpEffect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpEffect::Read => f.write_str("Read"),
            OpEffect::Write(src) => write!(f, "Write({src:?})"),
            OpEffect::ReadModify(_) => f.write_str("ReadModify(..)"),
        }
    }
}

/// One state access operation: the TPG vertex payload.
#[derive(Debug, Clone)]
pub struct Operation {
    /// Statement order within the owning transaction, contiguous from 0.
    pub op_index: u16,
    /// Declared target key. A READ_MODIFY may retarget its produced version
    /// to a declared read-set key at execution time.
    pub key: StateKey,
    pub effect: OpEffect,
    /// Keys this operation's outcome may depend on; empty when undeclared.
    /// Basis for proxy insertion during TPG construction.
    pub read_set: Vec<StateKey>,
}

impl Operation {
    pub fn read(key: StateKey) -> Self {
        Operation { op_index: 0, key, effect: OpEffect::Read, read_set: Vec::new() }
    }

    pub fn write(key: StateKey, value: Value) -> Self {
        Operation {
            op_index: 0,
            key,
            effect: OpEffect::Write(WriteSource::Literal(value)),
            read_set: Vec::new(),
        }
    }

    pub fn write_from_scratch(key: StateKey, slot: usize) -> Self {
        Operation {
            op_index: 0,
            key,
            effect: OpEffect::Write(WriteSource::Scratch(slot)),
            read_set: Vec::new(),
        }
    }

    pub fn read_modify(key: StateKey, read_set: Vec<StateKey>, f: ModifyFn) -> Self {
        Operation { op_index: 0, key, effect: OpEffect::ReadModify(f), read_set }
    }

    pub fn access_type(&self) -> AccessType {
        self.effect.access_type()
    }
}

/// Final fate of a transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TxnOutcome {
    Pending,
    Committed,
    Aborted,
}

/// Workload-facing description of the packet that triggered a transaction,
/// available to post-processing.
#[derive(Debug, Clone, Default)]
pub struct TxnMeta {
    pub arrival_seq: u64,
    pub flow_id: u64,
    pub kind: PacketKind,
    /// Which chain stage produced this transaction (0 for single handlers).
    pub stage: usize,
}

/// Result of one executed operation, as seen by post-processing.
#[derive(Debug, Clone, Default)]
pub struct OpResult {
    /// Value read (READ and READ_MODIFY record their input here).
    pub read: Option<Value>,
    /// Version produced: resolved key and written value.
    pub written: Option<(StateKey, Value)>,
}

/// Post-processing callback: pure function of the access results and the
/// transaction-local scratch.
pub type PostFn = Arc<dyn Fn(&TxnMeta, &[OpResult], &[i64]) -> PacketAction + Send + Sync>;

/// Verdict a network function attaches to a packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Forward(u64),
    Drop,
    Alert(String),
}

/// Outcome of post-processing one packet through one function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketAction {
    pub verdict: Verdict,
    pub annotations: Vec<(&'static str, i64)>,
}

impl PacketAction {
    pub fn forward(target: u64) -> Self {
        PacketAction { verdict: Verdict::Forward(target), annotations: Vec::new() }
    }

    pub fn drop() -> Self {
        PacketAction { verdict: Verdict::Drop, annotations: Vec::new() }
    }

    pub fn alert(reason: impl Into<String>) -> Self {
        PacketAction { verdict: Verdict::Alert(reason.into()), annotations: Vec::new() }
    }

    pub fn with(mut self, key: &'static str, v: i64) -> Self {
        self.annotations.push((key, v));
        self
    }
}

/// The atomic unit: every state access a single packet triggered in one
/// network function, plus the callbacks needed to finish processing it.
#[derive(Clone)]
pub struct Transaction {
    pub txn_id: TxnId,
    pub ts: Timestamp,
    pub instance_id: u32,
    pub ops: Vec<Operation>,
    /// Marked by the workload: this transaction fails at execution time.
    pub inject_fail: bool,
    pub meta: TxnMeta,
    pub post: Option<PostFn>,
    /// Number of transaction-local scratch slots to allocate.
    pub scratch_slots: usize,
}

impl fmt::Debug for Transaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Transaction")
            .field("txn_id", &self.txn_id)
            .field("ts", &self.ts)
            .field("instance_id", &self.instance_id)
            .field("ops", &self.ops)
            .field("inject_fail", &self.inject_fail)
            .field("meta", &self.meta)
            .finish()
    }
}

impl Transaction {
    pub fn new(txn_id: TxnId, ts: Timestamp, ops: Vec<Operation>) -> Self {
        let mut txn = Transaction {
            txn_id,
            ts,
            instance_id: 0,
            ops,
            inject_fail: false,
            meta: TxnMeta::default(),
            post: None,
            scratch_slots: 0,
        };
        txn.renumber_ops();
        txn
    }

    /// Stamps contiguous op indices in statement order.
    pub fn renumber_ops(&mut self) {
        for (i, op) in self.ops.iter_mut().enumerate() {
            op.op_index = i as u16;
        }
    }
}

/// Packet kind as carried by traces. `Other` keeps the trace format open for
/// workload-specific kinds; the shipped handlers reject kinds they do not
/// understand.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub enum PacketKind {
    New,
    #[default]
    Existing,
    Other(Box<str>),
}

impl PacketKind {
    pub fn as_str(&self) -> &str {
        match self {
            PacketKind::New => "new",
            PacketKind::Existing => "existing",
            PacketKind::Other(s) => s,
        }
    }

    pub fn parse(s: &str) -> Self {
        match s {
            "new" => PacketKind::New,
            "existing" => PacketKind::Existing,
            other => PacketKind::Other(other.into()),
        }
    }
}

/// A simulated packet arrival.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketEvent {
    /// True arrival order; unique per trace. Timestamps derive from this.
    pub arrival_seq: u64,
    /// Order in which the engine actually sees the packet.
    pub delivery_seq: u64,
    pub flow_id: u64,
    pub kind: PacketKind,
    /// Workload-injected execution failure for this packet's transaction.
    pub inject_fail: bool,
}

/// Timestamp assignment: a pure function of the packet's arrival position and
/// the batch being opened. Delivery order never affects it.
pub fn assign_timestamp(packet: &PacketEvent, batch_id: u64) -> Timestamp {
    Timestamp::new(batch_id, packet.arrival_seq)
}

/// Integer codecs for state values. Values are opaque to the engine; the
/// shipped workloads store little-endian integers and integer lists.
pub mod codec {
    use super::Value;

    pub fn u64_to_value(v: u64) -> Value {
        v.to_le_bytes().to_vec()
    }

    /// Missing or empty values decode as 0.
    pub fn value_to_u64(v: &[u8]) -> u64 {
        if v.len() == 8 {
            let mut b = [0u8; 8];
            b.copy_from_slice(v);
            u64::from_le_bytes(b)
        } else {
            0
        }
    }

    pub fn i64_to_value(v: i64) -> Value {
        v.to_le_bytes().to_vec()
    }

    pub fn value_to_i64(v: &[u8]) -> i64 {
        if v.len() == 8 {
            let mut b = [0u8; 8];
            b.copy_from_slice(v);
            i64::from_le_bytes(b)
        } else {
            0
        }
    }

    /// Sorted u16 list, little-endian pairs (NAT free-port pool).
    pub fn u16list_to_value(xs: &[u16]) -> Value {
        let mut out = Vec::with_capacity(xs.len() * 2);
        for x in xs {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn value_to_u16list(v: &[u8]) -> Vec<u16> {
        v.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()
    }

    /// List of (flow_id, arrival_seq) pairs (trojan-detection event window).
    pub fn pairs_to_value(xs: &[(u64, u64)]) -> Value {
        let mut out = Vec::with_capacity(xs.len() * 16);
        for (a, b) in xs {
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
        }
        out
    }

    pub fn value_to_pairs(v: &[u8]) -> Vec<(u64, u64)> {
        v.chunks_exact(16)
            .map(|c| {
                let mut a = [0u8; 8];
                let mut b = [0u8; 8];
                a.copy_from_slice(&c[..8]);
                b.copy_from_slice(&c[8..]);
                (u64::from_le_bytes(a), u64::from_le_bytes(b))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamp_orders_lexicographically() {
        assert!(Timestamp::new(0, 5) < Timestamp::new(1, 5));
        assert!(Timestamp::new(0, 1) < Timestamp::new(0, 2));
        assert!(Timestamp::new(1, 0) > Timestamp::new(0, 99));
    }

    #[test]
    fn assign_timestamp_maps_arrival_seq() {
        let p = PacketEvent {
            arrival_seq: 7,
            delivery_seq: 0,
            flow_id: 1,
            kind: PacketKind::New,
            inject_fail: false,
        };
        assert_eq!(assign_timestamp(&p, 2), Timestamp::new(2, 7));
    }

    #[test]
    fn assign_timestamp_ignores_delivery_order() {
        // Packets delivered in order [3, 1, 2] of arrival_seq get timestamps
        // that sort back into arrival order.
        let mk = |arrival, delivery| PacketEvent {
            arrival_seq: arrival,
            delivery_seq: delivery,
            flow_id: 0,
            kind: PacketKind::Existing,
            inject_fail: false,
        };
        let delivered = [mk(3, 0), mk(1, 1), mk(2, 2)];
        let mut ts: Vec<Timestamp> = delivered.iter().map(|p| assign_timestamp(p, 0)).collect();
        assert_eq!(ts, vec![Timestamp::new(0, 3), Timestamp::new(0, 1), Timestamp::new(0, 2)]);
        ts.sort();
        assert_eq!(ts, vec![Timestamp::new(0, 1), Timestamp::new(0, 2), Timestamp::new(0, 3)]);
    }

    #[test]
    fn op_indices_renumber_contiguously() {
        let k = StateKey::from_u64("t", 1);
        let mut txn = Transaction::new(
            TxnId(0),
            Timestamp::new(0, 0),
            vec![Operation::read(k.clone()), Operation::write(k, vec![1])],
        );
        txn.renumber_ops();
        assert_eq!(txn.ops[0].op_index, 0);
        assert_eq!(txn.ops[1].op_index, 1);
    }

    #[test]
    fn codec_roundtrips() {
        assert_eq!(codec::value_to_u64(&codec::u64_to_value(42)), 42);
        assert_eq!(codec::value_to_u16list(&codec::u16list_to_value(&[1, 2, 3])), vec![1, 2, 3]);
        assert_eq!(codec::value_to_pairs(&codec::pairs_to_value(&[(7, 9)])), vec![(7, 9)]);
        assert_eq!(codec::value_to_u64(&[]), 0);
    }
}
