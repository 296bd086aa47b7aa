//! Deterministic trace generation and the trace file format.
//!
//! Traces reproduce the benchmark conditions: a configurable share of
//! new-connection packets (the contended path), zipf-skewed flow ids,
//! bounded out-of-order delivery and replayable failure injection. The same
//! seed always yields byte-identical traces.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Zipf};

use crate::error::{Error, Result};
use crate::model::{PacketEvent, PacketKind};

/// Trace parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceConfig {
    pub packet_count: usize,
    /// Fraction of packets that open a new connection, in [0, 1].
    pub new_conn_ratio: f64,
    /// Flow id space; ids are drawn zipf-skewed from it.
    pub flow_count: u64,
    /// Zipf exponent; 0 is uniform.
    pub key_skew: f64,
    /// Maximum displacement of delivery order from arrival order.
    pub reorder_window: u64,
    /// Fraction of packets whose transactions fail at execution, in [0, 1].
    pub failure_rate: f64,
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            packet_count: 1000,
            new_conn_ratio: 0.2,
            flow_count: 256,
            key_skew: 0.0,
            reorder_window: 0,
            failure_rate: 0.0,
            seed: 0,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.packet_count == 0 {
            return Err(Error::InvalidConfig("packet_count must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.new_conn_ratio) {
            return Err(Error::InvalidConfig("new_conn_ratio must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_rate) {
            return Err(Error::InvalidConfig("failure_rate must be in [0,1]".into()));
        }
        if self.flow_count == 0 {
            return Err(Error::InvalidConfig("flow_count must be >= 1".into()));
        }
        if self.key_skew < 0.0 {
            return Err(Error::InvalidConfig("key_skew must be >= 0".into()));
        }
        Ok(())
    }
}

/// Named benchmark presets sweeping the new-connection ratio. Packet count,
/// flow space and skew are artifact choices, documented here: 30k packets,
/// 4096 flows, zipf 0.6, reorder window 64, no injected failures.
pub fn preset(name: &str) -> Option<TraceConfig> {
    let ratio = match name {
        "paper-lb-5" => 0.05,
        "paper-lb-20" => 0.20,
        "paper-lb-40" => 0.40,
        "paper-lb-60" => 0.60,
        _ => return None,
    };
    Some(TraceConfig {
        packet_count: 30_000,
        new_conn_ratio: ratio,
        flow_count: 4096,
        key_skew: 0.6,
        reorder_window: 64,
        failure_rate: 0.0,
        seed: 42,
    })
}

pub const PRESET_NAMES: [&str; 4] = ["paper-lb-5", "paper-lb-20", "paper-lb-40", "paper-lb-60"];

fn round_count(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction).round() as usize
}

/// Generates a trace: exactly `round(n * ratio)` new-connection packets,
/// zipf flows, delivery order perturbed within the reorder window, exactly
/// `round(n * failure_rate)` packets marked for injected failure. Fully
/// determined by the seed. Packets are returned in delivery order.
pub fn generate_trace(cfg: &TraceConfig) -> Result<Vec<PacketEvent>> {
    cfg.validate()?;
    let n = cfg.packet_count;
    let mut rng = StdRng::seed_from_u64(cfg.seed);

    // Which arrival positions are new connections / injected failures.
    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(&mut rng);
    let mut is_new = vec![false; n];
    for &p in positions.iter().take(round_count(n, cfg.new_conn_ratio)) {
        is_new[p] = true;
    }
    positions.shuffle(&mut rng);
    let mut fails = vec![false; n];
    for &p in positions.iter().take(round_count(n, cfg.failure_rate)) {
        fails[p] = true;
    }

    let zipf = if cfg.key_skew > 0.0 {
        Some(Zipf::new(cfg.flow_count, cfg.key_skew).map_err(|e| Error::InvalidConfig(e.to_string()))?)
    } else {
        None
    };
    let mut packets: Vec<PacketEvent> = (0..n as u64)
        .map(|arrival| {
            let flow = match &zipf {
                Some(z) => z.sample(&mut rng) as u64 - 1,
                None => rng.gen_range(0..cfg.flow_count),
            };
            PacketEvent {
                arrival_seq: arrival,
                delivery_seq: 0,
                flow_id: flow,
                kind: if is_new[arrival as usize] { PacketKind::New } else { PacketKind::Existing },
                inject_fail: fails[arrival as usize],
            }
        })
        .collect();

    // Bounded reordering: jitter each arrival by at most the window and sort
    // by the jittered rank; displacement stays within the window.
    let mut ranked: Vec<(u64, u64)> = packets
        .iter()
        .map(|p| (p.arrival_seq + rng.gen_range(0..=cfg.reorder_window), p.arrival_seq))
        .collect();
    ranked.sort();
    for (delivery, &(_, arrival)) in ranked.iter().enumerate() {
        packets[arrival as usize].delivery_seq = delivery as u64;
    }
    packets.sort_by_key(|p| p.delivery_seq);
    Ok(packets)
}

const TRACE_MAGIC: &str = "#txnfv-trace v1";

/// Writes a trace file: `#txnfv-trace v1,seed=N` header, then one packet per
/// line as `arrival_seq,delivery_seq,flow_id,kind,extra`.
pub fn write_trace(path: &Path, packets: &[PacketEvent], seed: u64) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{TRACE_MAGIC},seed={seed}")?;
    for p in packets {
        let extra = if p.inject_fail { "fail" } else { "-" };
        writeln!(f, "{},{},{},{},{}", p.arrival_seq, p.delivery_seq, p.flow_id, p.kind.as_str(), extra)?;
    }
    Ok(())
}

/// Reads a trace file back; the inverse of `write_trace`.
pub fn read_trace(path: &Path) -> Result<Vec<PacketEvent>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut packets = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if lineno == 1 {
            if !line.starts_with(TRACE_MAGIC) {
                return Err(Error::Format { line: 1, msg: "missing trace header".into() });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Format { line: lineno, msg: format!("expected 5 fields, got {}", fields.len()) });
        }
        let num = |s: &str, what: &str| -> Result<u64> {
            s.parse::<u64>().map_err(|_| Error::Format { line: lineno, msg: format!("bad {what} `{s}`") })
        };
        packets.push(PacketEvent {
            arrival_seq: num(fields[0], "arrival_seq")?,
            delivery_seq: num(fields[1], "delivery_seq")?,
            flow_id: num(fields[2], "flow_id")?,
            kind: PacketKind::parse(fields[3]),
            inject_fail: fields[4] == "fail",
        });
    }
    Ok(packets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_is_exact() {
        let cfg = TraceConfig { packet_count: 100, new_conn_ratio: 0.05, ..Default::default() };
        let trace = generate_trace(&cfg).unwrap();
        assert_eq!(trace.iter().filter(|p| p.kind == PacketKind::New).count(), 5);
    }

    #[test]
    fn zero_window_keeps_delivery_order() {
        let cfg = TraceConfig { packet_count: 50, reorder_window: 0, ..Default::default() };
        let trace = generate_trace(&cfg).unwrap();
        assert!(trace.iter().all(|p| p.delivery_seq == p.arrival_seq));
    }

    #[test]
    fn displacement_respects_window() {
        let cfg = TraceConfig { packet_count: 500, reorder_window: 16, seed: 3, ..Default::default() };
        let trace = generate_trace(&cfg).unwrap();
        // Delivery is a permutation of arrivals…
        let mut seen: Vec<u64> = trace.iter().map(|p| p.delivery_seq).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..500).collect::<Vec<u64>>());
        // …and nobody moved further than the window.
        for p in &trace {
            assert!(p.arrival_seq.abs_diff(p.delivery_seq) <= 16, "{p:?}");
        }
        assert!(trace.iter().any(|p| p.arrival_seq != p.delivery_seq));
    }

    #[test]
    fn same_seed_same_trace() {
        let cfg = TraceConfig { packet_count: 200, key_skew: 0.6, reorder_window: 8, failure_rate: 0.1, ..Default::default() };
        assert_eq!(generate_trace(&cfg).unwrap(), generate_trace(&cfg).unwrap());
    }

    #[test]
    fn failure_count_is_exact() {
        let cfg = TraceConfig { packet_count: 200, failure_rate: 0.1, ..Default::default() };
        let trace = generate_trace(&cfg).unwrap();
        assert_eq!(trace.iter().filter(|p| p.inject_fail).count(), 20);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = TraceConfig { new_conn_ratio: 1.5, ..Default::default() };
        assert!(generate_trace(&bad).is_err());
        let bad = TraceConfig { packet_count: 0, ..Default::default() };
        assert!(generate_trace(&bad).is_err());
    }

    #[test]
    fn trace_file_roundtrip() {
        let dir = std::env::temp_dir().join(format!("txnfv-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");

        let cfg = TraceConfig { packet_count: 3, failure_rate: 0.4, ..Default::default() };
        let trace = generate_trace(&cfg).unwrap();
        write_trace(&path, &trace, cfg.seed).unwrap();
        assert_eq!(read_trace(&path).unwrap(), trace);

        // Same seed twice: byte-identical files.
        let again = dir.join("t2.csv");
        write_trace(&again, &generate_trace(&cfg).unwrap(), cfg.seed).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_trace_file_is_header_only() {
        let dir = std::env::temp_dir().join(format!("txnfv-test-empty-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.csv");
        write_trace(&path, &[], 7).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        assert_eq!(content, "#txnfv-trace v1,seed=7\n");
        assert!(read_trace(&path).unwrap().is_empty());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_field_names_line() {
        let dir = std::env::temp_dir().join(format!("txnfv-test-corrupt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "#txnfv-trace v1,seed=0\n0,0,zzz,new,-\n").unwrap();
        match read_trace(&path) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn presets_exist() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap();
        }
        assert!(preset("nope").is_none());
    }
}
