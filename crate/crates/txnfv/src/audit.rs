//! Independent reference checkers.
//!
//! The dependency enumerator here works straight from the dependency
//! definitions (all operation pairs, no lists, no proxies), so graph
//! construction can be checked against it. The trace auditors validate
//! scheduler behaviour (status machine legality, single claims) from recorded
//! execution traces.

use std::collections::{BTreeSet, HashMap};

use crate::model::Transaction;
use crate::scheduler::{ClaimRecord, OpStatus, TransitionRecord};
use crate::tpg::{DependencyKind, OrderKey, TaskPrecedenceGraph};

/// An edge in operation coordinates (independent of vertex numbering).
pub type CoordEdge = (OrderKey, OrderKey, DependencyKind);

/// Enumerates every dependency between all pairs of operations:
/// - TD between any two same-key operations of different transactions,
///   directed earlier to later;
/// - PD from any version-producing operation to any later operation of a
///   different transaction that declared the producer's key in its read set;
/// - LD chaining the statements of each transaction.
pub fn brute_force_dependencies(txns: &[Transaction]) -> BTreeSet<CoordEdge> {
    let mut ops = Vec::new();
    for txn in txns {
        for op in &txn.ops {
            ops.push((
                OrderKey { ts: txn.ts, instance_id: txn.instance_id, op_index: op.op_index },
                txn,
                op,
            ));
        }
    }
    let mut edges = BTreeSet::new();
    for (ka, ta, oa) in &ops {
        for (kb, tb, ob) in &ops {
            if ka >= kb {
                continue;
            }
            let same_txn = ta.txn_id == tb.txn_id;
            if same_txn {
                continue; // handled by the LD chain below
            }
            if oa.key == ob.key {
                edges.insert((*ka, *kb, DependencyKind::Td));
            }
            if oa.access_type().produces_version() && ob.read_set.contains(&oa.key) {
                edges.insert((*ka, *kb, DependencyKind::Pd));
            }
        }
    }
    for txn in txns {
        for w in txn.ops.windows(2) {
            edges.insert((
                OrderKey { ts: txn.ts, instance_id: txn.instance_id, op_index: w[0].op_index },
                OrderKey { ts: txn.ts, instance_id: txn.instance_id, op_index: w[1].op_index },
                DependencyKind::Ld,
            ));
        }
    }
    edges
}

/// Sealed-graph edges in operation coordinates.
pub fn tpg_edges_as_coords(tpg: &TaskPrecedenceGraph) -> BTreeSet<CoordEdge> {
    tpg.edges()
        .into_iter()
        .map(|e| (tpg.vertex(e.from).order, tpg.vertex(e.to).order, e.kind))
        .collect()
}

/// Transitive closure over edge endpoints, ignoring kinds: the reachability
/// relation a dependency graph actually enforces.
pub fn closure(edges: &BTreeSet<CoordEdge>) -> BTreeSet<(OrderKey, OrderKey)> {
    let mut nodes: BTreeSet<OrderKey> = BTreeSet::new();
    for (a, b, _) in edges {
        nodes.insert(*a);
        nodes.insert(*b);
    }
    let idx: HashMap<OrderKey, usize> = nodes.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let n = nodes.len();
    let mut adj = vec![vec![]; n];
    for (a, b, _) in edges {
        adj[idx[a]].push(idx[b]);
    }
    let node_vec: Vec<OrderKey> = nodes.into_iter().collect();
    let mut out = BTreeSet::new();
    for start in 0..n {
        let mut seen = vec![false; n];
        let mut stack = adj[start].clone();
        while let Some(v) = stack.pop() {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            out.insert((node_vec[start], node_vec[v]));
            stack.extend(adj[v].iter().copied());
        }
    }
    out
}

/// Checks that the sealed graph's reachability equals the brute-force
/// enumerator's. Returns a description of the first mismatch.
pub fn check_tpg_equivalence(tpg: &TaskPrecedenceGraph) -> std::result::Result<(), String> {
    let brute = closure(&brute_force_dependencies(tpg.txns()));
    let sealed = closure(&tpg_edges_as_coords(tpg));
    if brute == sealed {
        return Ok(());
    }
    if let Some(miss) = brute.difference(&sealed).next() {
        return Err(format!("missing ordering {:?} -> {:?}", miss.0, miss.1));
    }
    if let Some(extra) = sealed.difference(&brute).next() {
        return Err(format!("spurious ordering {:?} -> {:?}", extra.0, extra.1));
    }
    unreachable!("sets differ but no element does");
}

/// Legal status transitions of the per-operation state machine.
pub fn transition_is_legal(from: OpStatus, to: OpStatus) -> bool {
    use OpStatus::*;
    matches!(
        (from, to),
        (Blocked, Ready) | (Ready, Executed) | (Ready, Aborted) | (Blocked, Aborted)
    )
}

/// Audits a recorded transition log; returns every illegal transition.
pub fn audit_transitions(log: &[TransitionRecord]) -> Vec<&TransitionRecord> {
    log.iter().filter(|r| !transition_is_legal(r.from, r.to)).collect()
}

/// Audits a claim log: each op must be claimed exactly once.
pub fn audit_claims(log: &[ClaimRecord], total_executed: usize) -> std::result::Result<(), String> {
    let mut seen = HashMap::new();
    for rec in log {
        if let Some(prev) = seen.insert(rec.op, rec.worker) {
            return Err(format!("op {} claimed by workers {} and {}", rec.op, prev, rec.worker));
        }
    }
    if seen.len() != total_executed {
        return Err(format!("{} claims recorded for {} executed ops", seen.len(), total_executed));
    }
    Ok(())
}
