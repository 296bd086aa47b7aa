//! Simulated network functions built on the three-step transactional
//! contract: pre-processing declares the state accesses a packet needs,
//! the engine executes them as one atomic transaction, and post-processing
//! turns the access results into a packet verdict.
//!
//! Pre- and post-processing never touch shared state; everything flows
//! through the declared operations, their scratch slots and their results.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{
    assign_timestamp, codec, ModifyOutcome, Operation, PacketAction, PacketEvent, PacketKind,
    StateKey, Transaction, TxnId, TxnMeta, Value,
};

/// What pre-processing declares for one packet.
pub struct TxnPlan {
    pub ops: Vec<Operation>,
    pub scratch_slots: usize,
    pub post: crate::model::PostFn,
}

type PreFn = Arc<dyn Fn(&PacketEvent) -> Result<TxnPlan> + Send + Sync>;
type InitFn = Arc<dyn Fn(&StateKey) -> Option<Value> + Send + Sync>;

/// A registered network function.
#[derive(Clone)]
pub struct VnfHandler {
    pub name: &'static str,
    pre: PreFn,
    /// Initial value of this function's state tables; `None` for tables it
    /// does not own.
    init: InitFn,
}

impl VnfHandler {
    /// Pre-processing: declares the packet's state accesses. Touches no
    /// shared state.
    pub fn plan(&self, packet: &PacketEvent) -> Result<TxnPlan> {
        (self.pre)(packet)
    }

    pub fn init_value(&self, key: &StateKey) -> Option<Value> {
        (self.init)(key)
    }
}

/// Builds the transaction a packet triggers in one function. Pure: no store
/// access happens here; the ops are data until the scheduler runs them.
pub fn build_transaction(
    vnf: &VnfHandler,
    packet: &PacketEvent,
    batch_id: u64,
    txn_id: TxnId,
) -> Result<Transaction> {
    let plan = vnf.plan(packet)?;
    let mut txn = Transaction::new(txn_id, assign_timestamp(packet, batch_id), plan.ops);
    txn.inject_fail = packet.inject_fail;
    txn.scratch_slots = plan.scratch_slots;
    txn.post = Some(plan.post);
    txn.meta = TxnMeta {
        arrival_seq: packet.arrival_seq,
        flow_id: packet.flow_id,
        kind: packet.kind.clone(),
        stage: 0,
    };
    Ok(txn)
}

// ---------------------------------------------------------------------------
// Load balancer
// ---------------------------------------------------------------------------

pub const LB_COUNTER: &str = "lb_counter";
pub const LB_CONN: &str = "lb_conn";
/// Reserved counter-table key that serializes server selection: every
/// new-connection READ_MODIFY targets it, so selections chain temporally and
/// retarget their produced version to the chosen counter at execution time.
pub const LB_SELECT_KEY: u64 = u64::MAX;

/// Least-connections load balancer over `servers` backends. New connections
/// pick argmin of the per-server counters (lowest index wins ties), bump the
/// chosen counter and record the flow's mapping; packets of established
/// connections only look the mapping up.
pub fn lb_handler(servers: usize) -> VnfHandler {
    assert!(servers >= 1);
    let pre: PreFn = Arc::new(move |packet: &PacketEvent| {
        match packet.kind {
            PacketKind::New => {
                let counters: Vec<StateKey> =
                    (0..servers as u64).map(|i| StateKey::from_u64(LB_COUNTER, i)).collect();
                let select = Operation::read_modify(
                    StateKey::from_u64(LB_COUNTER, LB_SELECT_KEY),
                    counters,
                    Arc::new(|input, scratch| {
                        let counts: Vec<u64> =
                            input.reads.iter().map(|v| codec::value_to_u64(v)).collect();
                        let mut best = 0usize;
                        for (i, c) in counts.iter().enumerate() {
                            if *c < counts[best] {
                                best = i;
                            }
                        }
                        scratch[0] = best as i64;
                        scratch[1] = best as i64 + 1; // mapping encodes server+1; 0 = unmapped
                        ModifyOutcome { target: Some(best), value: codec::u64_to_value(counts[best] + 1) }
                    }),
                );
                let record = Operation::write_from_scratch(
                    StateKey::from_u64(LB_CONN, packet.flow_id),
                    1,
                );
                Ok(TxnPlan {
                    ops: vec![select, record],
                    scratch_slots: 2,
                    post: Arc::new(|_meta, _results, scratch| {
                        PacketAction::forward(scratch[0] as u64).with("server", scratch[0])
                    }),
                })
            }
            PacketKind::Existing => Ok(TxnPlan {
                ops: vec![Operation::read(StateKey::from_u64(LB_CONN, packet.flow_id))],
                scratch_slots: 0,
                post: Arc::new(|_meta, results, _scratch| {
                    let mapped = results[0].read.as_deref().map(codec::value_to_u64).unwrap_or(0);
                    if mapped == 0 {
                        PacketAction::drop().with("unknown_flow", 1)
                    } else {
                        PacketAction::forward(mapped - 1)
                    }
                }),
            }),
            PacketKind::Other(ref k) => Err(Error::HandlerRejected(format!("lb: unknown kind `{k}`"))),
        }
    });
    let init: InitFn = Arc::new(|key: &StateKey| match key.table {
        LB_COUNTER => Some(codec::u64_to_value(0)),
        LB_CONN => Some(Vec::new()),
        _ => None,
    });
    VnfHandler { name: "lb", pre, init }
}

// ---------------------------------------------------------------------------
// Network address translation
// ---------------------------------------------------------------------------

pub const NAT_PORTS: &str = "nat_ports";
pub const NAT_FLOW: &str = "nat_flow";
pub const NAT_COUNT: &str = "nat_count";

/// NAT with a shared free-port pool (ports 1..=pool), a per-flow port
/// mapping and a global packet counter. New connections pop the smallest
/// free port; an exhausted pool drops the packet without consuming anything
/// (the pool modify is the identity then). Every packet bumps the counter.
pub fn nat_handler(pool: u16) -> VnfHandler {
    assert!(pool >= 1);
    let count_op = || {
        Operation::read_modify(
            StateKey::from_u64(NAT_COUNT, 0),
            Vec::new(),
            Arc::new(|input, _scratch| ModifyOutcome {
                target: None,
                value: codec::u64_to_value(codec::value_to_u64(input.current) + 1),
            }),
        )
    };
    let pre: PreFn = Arc::new(move |packet: &PacketEvent| {
        match packet.kind {
            PacketKind::New => {
                // The pool modify declares the flow's mapping as a read: a
                // re-established flow keeps its port instead of leaking one,
                // which is what keeps |free| + |assigned| constant.
                let pop_port = Operation::read_modify(
                    StateKey::from_u64(NAT_PORTS, 0),
                    vec![StateKey::from_u64(NAT_FLOW, packet.flow_id)],
                    Arc::new(|input, scratch| {
                        let existing = codec::value_to_i64(&input.reads[0]);
                        if existing > 0 {
                            scratch[0] = existing;
                            return ModifyOutcome { target: None, value: input.current.to_vec() };
                        }
                        let mut ports = codec::value_to_u16list(input.current);
                        scratch[0] = match ports.first().copied() {
                            Some(p) => {
                                ports.remove(0);
                                p as i64
                            }
                            None => 0,
                        };
                        ModifyOutcome { target: None, value: codec::u16list_to_value(&ports) }
                    }),
                );
                let record = Operation::write_from_scratch(
                    StateKey::from_u64(NAT_FLOW, packet.flow_id),
                    0,
                );
                Ok(TxnPlan {
                    ops: vec![pop_port, record, count_op()],
                    scratch_slots: 1,
                    post: Arc::new(|_meta, _results, scratch| {
                        if scratch[0] == 0 {
                            PacketAction::drop().with("port_pool_exhausted", 1)
                        } else {
                            PacketAction::forward(scratch[0] as u64).with("port", scratch[0])
                        }
                    }),
                })
            }
            PacketKind::Existing => Ok(TxnPlan {
                ops: vec![
                    Operation::read(StateKey::from_u64(NAT_FLOW, packet.flow_id)),
                    count_op(),
                ],
                scratch_slots: 0,
                post: Arc::new(|_meta, results, _scratch| {
                    let port = results[0].read.as_deref().map(codec::value_to_i64).unwrap_or(0);
                    if port == 0 {
                        PacketAction::drop().with("unknown_flow", 1)
                    } else {
                        PacketAction::forward(port as u64).with("port", port)
                    }
                }),
            }),
            PacketKind::Other(ref k) => Err(Error::HandlerRejected(format!("nat: unknown kind `{k}`"))),
        }
    });
    let init: InitFn = Arc::new(move |key: &StateKey| match key.table {
        NAT_PORTS => Some(codec::u16list_to_value(&(1..=pool).collect::<Vec<u16>>())),
        NAT_FLOW => Some(Vec::new()),
        NAT_COUNT => Some(codec::u64_to_value(0)),
        _ => None,
    });
    VnfHandler { name: "nat", pre, init }
}

// ---------------------------------------------------------------------------
// Trojan detection
// ---------------------------------------------------------------------------

pub const TD_EVENTS: &str = "td_events";

/// Flow-timing monitor: appends (flow, arrival) to a per-host event window
/// and alerts when the stored suffix matches a pattern of maximum
/// inter-arrival gaps. Hosts attribute flows by `flow_id % hosts`. Detection
/// is a pure function of the timestamp-ordered window, which is what makes
/// ordering violations observable.
pub fn td_handler(window: usize, pattern: Vec<u64>, hosts: u64) -> VnfHandler {
    assert!(window >= pattern.len() && !pattern.is_empty() && hosts >= 1);
    let pattern = Arc::new(pattern);
    let pre: PreFn = Arc::new(move |packet: &PacketEvent| {
        let host = packet.flow_id % hosts;
        let flow = packet.flow_id;
        let arrival = packet.arrival_seq;
        let pattern = Arc::clone(&pattern);
        let win = window;
        let append = Operation::read_modify(
            StateKey::from_u64(TD_EVENTS, host),
            Vec::new(),
            Arc::new(move |input, scratch| {
                let mut events = codec::value_to_pairs(input.current);
                events.push((flow, arrival));
                if events.len() > win {
                    let cut = events.len() - win;
                    events.drain(..cut);
                }
                scratch[0] = i64::from(suffix_matches(&events, &pattern));
                ModifyOutcome { target: None, value: codec::pairs_to_value(&events) }
            }),
        );
        Ok(TxnPlan {
            ops: vec![append],
            scratch_slots: 1,
            post: Arc::new(move |_meta, _results, scratch| {
                if scratch[0] == 1 {
                    PacketAction::alert("gap pattern").with("host", host as i64)
                } else {
                    PacketAction::forward(host)
                }
            }),
        })
    });
    let init: InitFn = Arc::new(|key: &StateKey| (key.table == TD_EVENTS).then(Vec::new));
    VnfHandler { name: "td", pre, init }
}

/// True when the last `pattern.len()` inter-arrival gaps of `events` are all
/// within their bounds.
fn suffix_matches(events: &[(u64, u64)], pattern: &[u64]) -> bool {
    if events.len() < pattern.len() + 1 {
        return false;
    }
    let tail = &events[events.len() - pattern.len() - 1..];
    tail.windows(2)
        .zip(pattern.iter())
        .all(|(w, bound)| w[1].1.saturating_sub(w[0].1) <= *bound)
}

// ---------------------------------------------------------------------------
// Chains
// ---------------------------------------------------------------------------

/// An ordered service chain. A packet produces one transaction per stage; a
/// DROP verdict short-circuits the remaining stages (their transactions are
/// never created). Rejections and injected failures behave like drops.
#[derive(Clone)]
pub struct VnfChain {
    pub stages: Vec<VnfHandler>,
}

impl VnfChain {
    pub fn name(&self) -> String {
        if self.stages.len() == 1 {
            self.stages[0].name.to_string()
        } else {
            let names: Vec<&str> = self.stages.iter().map(|s| s.name).collect();
            format!("chain:{}", names.join(","))
        }
    }

    /// Initial value for a key, consulting each stage's tables; unknown
    /// tables default to the empty value.
    pub fn init_value(&self, key: &StateKey) -> Value {
        for stage in &self.stages {
            if let Some(v) = stage.init_value(key) {
                return v;
            }
        }
        Vec::new()
    }
}

/// Composes handlers into a chain.
pub fn chain(handlers: Vec<VnfHandler>) -> VnfChain {
    assert!(!handlers.is_empty());
    VnfChain { stages: handlers }
}

impl From<VnfHandler> for VnfChain {
    fn from(h: VnfHandler) -> Self {
        VnfChain { stages: vec![h] }
    }
}

/// Default parameters for handlers looked up by name.
pub const DEFAULT_LB_SERVERS: usize = 4;
pub const DEFAULT_NAT_POOL: u16 = 4096;
pub const DEFAULT_TD_WINDOW: usize = 8;
pub const DEFAULT_TD_HOSTS: u64 = 16;

/// Resolves `nat`, `lb`, `td` or `chain:a,b,...` to a runnable chain with
/// default parameters.
pub fn handler_by_name(name: &str) -> Result<VnfChain> {
    fn single(name: &str) -> Result<VnfHandler> {
        match name {
            "lb" => Ok(lb_handler(DEFAULT_LB_SERVERS)),
            "nat" => Ok(nat_handler(DEFAULT_NAT_POOL)),
            "td" => Ok(td_handler(DEFAULT_TD_WINDOW, vec![16, 16], DEFAULT_TD_HOSTS)),
            other => Err(Error::UnknownHandler(other.to_string())),
        }
    }
    if let Some(rest) = name.strip_prefix("chain:") {
        let stages: Result<Vec<VnfHandler>> = rest.split(',').map(|s| single(s.trim())).collect();
        let stages = stages?;
        if stages.is_empty() {
            return Err(Error::UnknownHandler(name.to_string()));
        }
        Ok(VnfChain { stages })
    } else {
        Ok(single(name)?.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Verdict;

    fn pkt(arrival: u64, flow: u64, kind: PacketKind) -> PacketEvent {
        PacketEvent { arrival_seq: arrival, delivery_seq: arrival, flow_id: flow, kind, inject_fail: false }
    }

    #[test]
    fn lb_new_connection_declares_selection_and_mapping() {
        let lb = lb_handler(4);
        let txn = build_transaction(&lb, &pkt(0, 7, PacketKind::New), 0, TxnId(0)).unwrap();
        assert_eq!(txn.ops.len(), 2);
        assert_eq!(txn.ops[0].read_set.len(), 4);
        assert_eq!(txn.ops[0].key, StateKey::from_u64(LB_COUNTER, LB_SELECT_KEY));
        assert_eq!(txn.ops[1].key, StateKey::from_u64(LB_CONN, 7));
    }

    #[test]
    fn lb_existing_connection_is_single_read() {
        let lb = lb_handler(4);
        let txn = build_transaction(&lb, &pkt(0, 7, PacketKind::Existing), 0, TxnId(0)).unwrap();
        assert_eq!(txn.ops.len(), 1);
        assert!(matches!(txn.ops[0].effect, crate::model::OpEffect::Read));
    }

    #[test]
    fn lb_argmin_breaks_ties_low() {
        let lb = lb_handler(4);
        let txn = build_transaction(&lb, &pkt(0, 7, PacketKind::New), 0, TxnId(0)).unwrap();
        let crate::model::OpEffect::ReadModify(f) = &txn.ops[0].effect else { panic!() };
        let mut scratch = vec![0i64; 2];
        // counters [2,1,3,1]: server 1 wins the tie with 3.
        let reads: Vec<Value> = [2u64, 1, 3, 1].iter().map(|c| codec::u64_to_value(*c)).collect();
        let out = f(
            &crate::model::ModifyInput { current: &[], reads: &reads },
            &mut scratch,
        );
        assert_eq!(scratch[0], 1);
        assert_eq!(out.target, Some(1));
        assert_eq!(out.value, codec::u64_to_value(2));
        // all-zero counters: lowest index.
        let reads: Vec<Value> = vec![codec::u64_to_value(0); 4];
        let out = f(&crate::model::ModifyInput { current: &[], reads: &reads }, &mut scratch);
        assert_eq!(out.target, Some(0));
    }

    #[test]
    fn lb_rejects_unknown_kind() {
        let lb = lb_handler(4);
        let p = pkt(0, 7, PacketKind::Other("weird".into()));
        assert!(matches!(build_transaction(&lb, &p, 0, TxnId(0)), Err(Error::HandlerRejected(_))));
    }

    #[test]
    fn nat_pops_smallest_port() {
        let nat = nat_handler(3);
        let txn = build_transaction(&nat, &pkt(0, 7, PacketKind::New), 0, TxnId(0)).unwrap();
        let crate::model::OpEffect::ReadModify(f) = &txn.ops[0].effect else { panic!() };
        let mut scratch = vec![0i64; 1];
        let pool = codec::u16list_to_value(&[1, 2, 3]);
        let no_mapping = vec![Vec::new()];
        let out = f(&crate::model::ModifyInput { current: &pool, reads: &no_mapping }, &mut scratch);
        assert_eq!(scratch[0], 1);
        assert_eq!(codec::value_to_u16list(&out.value), vec![2, 3]);
    }

    #[test]
    fn nat_reconnect_reuses_existing_port() {
        let nat = nat_handler(3);
        let txn = build_transaction(&nat, &pkt(0, 7, PacketKind::New), 0, TxnId(0)).unwrap();
        let crate::model::OpEffect::ReadModify(f) = &txn.ops[0].effect else { panic!() };
        let mut scratch = vec![0i64; 1];
        let pool = codec::u16list_to_value(&[2, 3]);
        let mapped = vec![codec::i64_to_value(1)];
        let out = f(&crate::model::ModifyInput { current: &pool, reads: &mapped }, &mut scratch);
        assert_eq!(scratch[0], 1);
        assert_eq!(codec::value_to_u16list(&out.value), vec![2, 3]);
    }

    #[test]
    fn nat_exhausted_pool_is_identity() {
        let nat = nat_handler(3);
        let txn = build_transaction(&nat, &pkt(0, 7, PacketKind::New), 0, TxnId(0)).unwrap();
        let crate::model::OpEffect::ReadModify(f) = &txn.ops[0].effect else { panic!() };
        let mut scratch = vec![0i64; 1];
        let no_mapping = vec![Vec::new()];
        let out = f(&crate::model::ModifyInput { current: &[], reads: &no_mapping }, &mut scratch);
        assert_eq!(scratch[0], 0);
        assert!(out.value.is_empty());
    }

    #[test]
    fn td_alerts_on_exact_gap_match() {
        // Events at 10, 12, 14 with pattern [2, 2]: third packet alerts.
        let events = vec![(1, 10), (1, 12), (1, 14)];
        assert!(suffix_matches(&events, &[2, 2]));
        assert!(!suffix_matches(&events[..2], &[2, 2]));
        // Wider gaps break the match.
        assert!(!suffix_matches(&[(1, 10), (1, 13), (1, 14)], &[2, 2]));
    }

    #[test]
    fn td_length_one_pattern_with_max_bound_always_matches_after_first() {
        let events = vec![(1, 10), (2, 900)];
        assert!(suffix_matches(&events, &[u64::MAX]));
        assert!(!suffix_matches(&events[..1], &[u64::MAX]));
    }

    #[test]
    fn lb_post_forwards_selected_server() {
        let lb = lb_handler(4);
        let txn = build_transaction(&lb, &pkt(0, 7, PacketKind::New), 0, TxnId(0)).unwrap();
        let post = txn.post.as_ref().unwrap();
        let action = post(&txn.meta, &[], &[2, 3]);
        assert_eq!(action.verdict, Verdict::Forward(2));
    }

    #[test]
    fn chain_name_and_registry() {
        assert_eq!(handler_by_name("lb").unwrap().name(), "lb");
        let c = handler_by_name("chain:nat,lb,td").unwrap();
        assert_eq!(c.stages.len(), 3);
        assert_eq!(c.name(), "chain:nat,lb,td");
        assert!(handler_by_name("bogus").is_err());
    }

    #[test]
    fn pre_and_post_processing_touch_no_shared_state() {
        // Pre-processing and post-processing get no store handle at all;
        // the instrumented access counter pins that down.
        let store = crate::mvcc::MvccStore::with_empty_init();
        store.preset(StateKey::from_u64(LB_COUNTER, 0), codec::u64_to_value(3));
        let before = store.access_count();
        let lb = lb_handler(4);
        for i in 0..50 {
            let kind = if i % 2 == 0 { PacketKind::New } else { PacketKind::Existing };
            let txn = build_transaction(&lb, &pkt(i, i, kind), 0, TxnId(i)).unwrap();
            let post = txn.post.as_ref().unwrap();
            let results = vec![crate::model::OpResult::default(); txn.ops.len()];
            let scratch = vec![1i64; txn.scratch_slots.max(2)];
            let _ = post(&txn.meta, &results, &scratch);
        }
        assert_eq!(store.access_count(), before);
    }

    #[test]
    fn lb_balance_holds_at_every_step() {
        // Serial execution, uniform new connections: the counters never
        // spread more than 1 apart, and their sum tracks the commits.
        use crate::baselines::run_serial_oracle;
        let packets: Vec<PacketEvent> = (0..41).map(|i| pkt(i, 1000 + i, PacketKind::New)).collect();
        for n in 1..=packets.len() {
            let out = run_serial_oracle(&packets[..n], &lb_handler(4).into()).unwrap();
            let counters: Vec<u64> = (0..4)
                .map(|s| {
                    out.snapshot
                        .get(&StateKey::from_u64(LB_COUNTER, s))
                        .map(|v| codec::value_to_u64(v))
                        .unwrap_or(0)
                })
                .collect();
            let max = counters.iter().max().unwrap();
            let min = counters.iter().min().unwrap();
            assert!(max - min <= 1, "unbalanced after {n} packets: {counters:?}");
            assert_eq!(counters.iter().sum::<u64>(), n as u64);
        }
    }

    #[test]
    fn nat_port_conservation_holds_at_every_step() {
        use crate::baselines::run_serial_oracle;
        let packets: Vec<PacketEvent> = (0..30)
            .map(|i| pkt(i, i % 7, if i % 3 == 0 { PacketKind::New } else { PacketKind::Existing }))
            .collect();
        let pool = 5u16;
        for n in 1..=packets.len() {
            let out = run_serial_oracle(&packets[..n], &nat_handler(pool).into()).unwrap();
            let free = out
                .snapshot
                .get(&StateKey::from_u64(NAT_PORTS, 0))
                .map(|v| codec::value_to_u16list(v).len())
                .unwrap_or(pool as usize);
            let mapped = out
                .snapshot
                .iter()
                .filter(|(k, v)| k.table == NAT_FLOW && codec::value_to_i64(v) > 0)
                .count();
            assert_eq!(free + mapped, pool as usize, "leak after {n} packets");
        }
    }

    #[test]
    fn chain_init_dispatches_by_table() {
        let c = handler_by_name("chain:nat,lb").unwrap();
        assert_eq!(c.init_value(&StateKey::from_u64(LB_COUNTER, 0)), codec::u64_to_value(0));
        assert_eq!(
            c.init_value(&StateKey::from_u64(NAT_PORTS, 0)),
            codec::u16list_to_value(&(1..=DEFAULT_NAT_POOL).collect::<Vec<u16>>())
        );
        assert_eq!(c.init_value(&StateKey::from_u64("unknown", 0)), Vec::<u8>::new());
    }
}
