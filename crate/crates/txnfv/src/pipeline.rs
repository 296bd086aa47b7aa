//! End-to-end engine: packets in, committed state and verdicts out.
//!
//! The pipeline alternates the two construction phases per batch. Packets are
//! binned by arrival position (`arrival_seq / batch_size`), which makes batch
//! membership (and therefore every result) independent of delivery order;
//! within a bin, transactions are inserted in delivery order and the graph
//! sorts them out. Each chain stage runs as its own sequence of batches over
//! the packets that survived the previous stage, so a DROP verdict
//! short-circuits the rest of the chain.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::baselines::ExecOutcomes;
use crate::error::Result;
use crate::metrics::{BreakdownRecord, Category, WorkerClock};
use crate::model::{PacketEvent, PacketKind, TxnId, TxnOutcome, Verdict};
use crate::mvcc::MvccStore;
use crate::scheduler::{run_batch, select_strategy, ClaimRecord, StrategyConfig, TransitionRecord};
use crate::tpg::BatchSequencer;
use crate::vnf::{build_transaction, VnfChain};

/// Engine knobs.
#[derive(Debug, Clone, Copy)]
pub struct EngineConfig {
    pub workers: usize,
    /// Transactions per batch (the construction/execution period).
    pub batch_size: usize,
    /// Fixed strategy; `None` selects one per batch from its statistics.
    pub strategy: Option<StrategyConfig>,
    /// Record claim/transition logs for audits.
    pub record_trace: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig { workers: 1, batch_size: 1024, strategy: None, record_trace: false }
    }
}

/// Execution trace of one batch, for audits.
pub struct BatchTrace {
    pub batch_id: u64,
    pub claim_log: Vec<ClaimRecord>,
    pub transition_log: Vec<TransitionRecord>,
    pub claimed_ops: usize,
    pub vertex_count: usize,
}

/// Everything a full engine run produced.
pub struct EngineReport {
    pub out: ExecOutcomes,
    pub latencies: Vec<(PacketKind, u64)>,
    pub worker_clocks: Vec<WorkerClock>,
    pub coord_clock: WorkerClock,
    pub abort_count: usize,
    pub wasted_ops: usize,
    pub reexec_ops: usize,
    pub txn_count: usize,
    pub batches: usize,
    pub wall_ns: u64,
    /// Strategy used for the first batch (representative; per-batch selection
    /// may vary when no fixed strategy is configured).
    pub strategy_used: Option<StrategyConfig>,
    pub batch_traces: Vec<BatchTrace>,
}

impl EngineReport {
    pub fn throughput_tps(&self) -> f64 {
        if self.wall_ns == 0 {
            return 0.0;
        }
        self.txn_count as f64 / (self.wall_ns as f64 / 1e9)
    }
}

/// Runs the transactional engine over a delivered packet stream.
pub fn run_engine(packets: &[PacketEvent], chain: &VnfChain, cfg: EngineConfig) -> Result<EngineReport> {
    assert!(cfg.workers >= 1 && cfg.batch_size >= 1);
    let start = Instant::now();
    let chain_for_init = chain.clone();
    let store = MvccStore::new(move |key| chain_for_init.init_value(key));

    let mut out = ExecOutcomes::default();
    let mut latencies = Vec::new();
    let mut worker_totals: Vec<WorkerClock> = vec![WorkerClock::default(); cfg.workers];
    let mut coord = BreakdownRecord::default();
    let mut coord_wall = 0u64;
    let mut abort_count = 0usize;
    let mut wasted_ops = 0usize;
    let mut reexec_ops = 0usize;
    let mut txn_count = 0usize;
    let mut batches = 0usize;
    let mut strategy_used = cfg.strategy;
    let mut batch_traces = Vec::new();
    let mut next_txn = 0u64;

    let stage_count = chain.stages.len() as u64;
    let sequencer = BatchSequencer::new();
    let mut surviving: Vec<&PacketEvent> = packets.iter().collect();

    for (stage, handler) in chain.stages.iter().enumerate() {
        // Arrival-binned batches: membership never depends on delivery order.
        let mut bins: BTreeMap<u64, Vec<&PacketEvent>> = BTreeMap::new();
        for p in &surviving {
            bins.entry(p.arrival_seq / cfg.batch_size as u64).or_default().push(p);
        }
        let mut next_surviving: Vec<&PacketEvent> = Vec::with_capacity(surviving.len());

        for (bin, bin_packets) in bins {
            let construct_at = Instant::now();
            let batch_id = bin * stage_count + stage as u64;
            let open = sequencer.begin_batch(batch_id)?;
            let mut built_at: Vec<(u64, Instant)> = Vec::with_capacity(bin_packets.len());
            for p in &bin_packets {
                let mut txn = match build_transaction(handler, p, batch_id, TxnId(next_txn)) {
                    Ok(t) => t,
                    Err(crate::Error::HandlerRejected(_)) => continue,
                    Err(e) => return Err(e),
                };
                txn.meta.stage = stage;
                next_txn += 1;
                built_at.push((p.arrival_seq, Instant::now()));
                open.insert_transaction(txn)?;
            }
            let tpg = open.seal()?;
            let mut strategy = match cfg.strategy {
                Some(s) => s,
                None => select_strategy(&tpg.stats(), None),
            };
            strategy.record_trace = cfg.record_trace;
            strategy_used.get_or_insert(strategy);
            let construct_ns = construct_at.elapsed().as_nanos() as u64;
            coord.add(Category::Construct, construct_ns);
            coord_wall += construct_ns;

            let result = run_batch(&tpg, &store, strategy, cfg.workers);

            let settle_at = Instant::now();
            store.commit_batch()?;
            for (i, c) in result.worker_clocks.iter().enumerate() {
                worker_totals[i].breakdown.merge(&c.breakdown);
                worker_totals[i].wall_ns += c.wall_ns;
            }
            coord.merge(&result.coord_clock.breakdown);
            coord_wall += result.coord_clock.wall_ns;
            abort_count += result.abort_count;
            wasted_ops += result.wasted_ops;
            reexec_ops += result.reexec_ops;
            txn_count += tpg.txns().len();
            batches += 1;

            let done_by_arrival: BTreeMap<u64, usize> = tpg
                .txns()
                .iter()
                .enumerate()
                .map(|(i, t)| (t.meta.arrival_seq, i))
                .collect();
            for p in &bin_packets {
                let Some(&idx) = done_by_arrival.get(&p.arrival_seq) else {
                    continue; // rejected at build time
                };
                let txn = &tpg.txns()[idx];
                let outcome = result.outcomes[idx];
                out.outcomes.insert((p.arrival_seq, stage), outcome);
                if outcome != TxnOutcome::Committed {
                    continue;
                }
                let action = result.actions[idx].clone().expect("committed txn has action");
                if let Some((_, built)) = built_at.iter().find(|(a, _)| *a == p.arrival_seq) {
                    let ns = result.txn_done[idx].duration_since(*built).as_nanos() as u64;
                    latencies.push((txn.meta.kind.clone(), ns));
                }
                let survives = action.verdict != Verdict::Drop;
                out.actions.insert((p.arrival_seq, stage), action);
                if survives {
                    next_surviving.push(p);
                }
            }
            if cfg.record_trace {
                batch_traces.push(BatchTrace {
                    batch_id,
                    claim_log: result.claim_log,
                    transition_log: result.transition_log,
                    claimed_ops: result.claimed_ops,
                    vertex_count: tpg.vertex_count(),
                });
            }
            let settle_ns = settle_at.elapsed().as_nanos() as u64;
            coord.add(Category::Others, settle_ns);
            coord_wall += settle_ns;
        }
        next_surviving.sort_by_key(|p| p.delivery_seq);
        surviving = next_surviving;
    }

    out.snapshot = store.snapshot();
    Ok(EngineReport {
        out,
        latencies,
        worker_clocks: worker_totals,
        coord_clock: WorkerClock { breakdown: coord, wall_ns: coord_wall },
        abort_count,
        wasted_ops,
        reexec_ops,
        txn_count,
        batches,
        wall_ns: start.elapsed().as_nanos() as u64,
        strategy_used,
        batch_traces,
    })
}
