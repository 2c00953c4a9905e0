use std::collections::BTreeSet;

use pmemsim::devices::{XpConfig, XpDimm};
use pmemsim::metrics::LatencyHistogram;
use pmemsim::oracle::replay_total;
use pmemsim::topology::{NamespaceMode, PlatformTopology};
use pmemsim::workload::{generate, Pattern, TraceRecord, WorkloadSpec};
use proptest::prelude::*;

fn single() -> PlatformTopology {
    PlatformTopology { namespace_mode: NamespaceMode::Single { dimm: 0 }, ..PlatformTopology::default() }
}

fn trace(ops: &[(u64, bool, u32)]) -> Vec<TraceRecord> {
    ops.iter()
        .enumerate()
        .map(|(i, &(line, write, size))| TraceRecord {
            index: i as u64,
            thread: 0,
            kind: if write { "WRITE64" } else { "READ64" }.into(),
            addr: line * 64,
            size,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn single_touch_ewr_at_most_one(lines in prop::collection::btree_set(0u64..1 << 20, 1..300), seed in any::<u64>()) {
        let mut d = XpDimm::new(XpConfig { outlier_prob: 0.0, ..XpConfig::default() }, seed, false);
        let mut t = 0;
        for l in &lines {
            t = d.write64(l * 64, &[1; 64], u64::MAX, t).unwrap();
        }
        d.flush_all(t);
        let ewr = d.counters.ewr().unwrap();
        prop_assert!(ewr <= 1.0 + 1e-12, "{ewr}");
    }

    #[test]
    fn doubling_ways_never_lowers_ewr(
        ops in prop::collection::vec((0u64..2048, prop::bool::weighted(0.8), prop::sample::select(vec![32u32, 64])), 1..600),
        lines in prop::sample::select(vec![16usize, 32, 64, 128]),
    ) {
        let recs = trace(&ops);
        let small = XpConfig { xpbuffer_lines: lines, read_pool_lines: 0, ..XpConfig::default() };
        let big = XpConfig { xpbuffer_lines: lines * 2, ..small.clone() };
        let a = replay_total(&recs, &single(), &small).unwrap();
        let b = replay_total(&recs, &single(), &big).unwrap();
        if let (Some(ea), Some(eb)) = (a.ewr(), b.ewr()) {
            prop_assert!(eb >= ea - 1e-12, "{lines} ways: {ea} -> {eb}");
        }
    }

    #[test]
    fn percentiles_are_monotone(samples in prop::collection::vec(1u64..10_000_000, 1..500), p in 0.0f64..1.0, q in 0.0f64..1.0) {
        let mut h = LatencyHistogram::new();
        for &s in &samples {
            h.record(s);
        }
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(h.percentile(lo).unwrap() <= h.percentile(hi).unwrap());
        prop_assert_eq!(h.percentile(1.0), samples.iter().copied().max());
    }

    #[test]
    fn decode_encode_round_trip(addr in 0u64..PlatformTopology::default().capacity()) {
        let topo = PlatformTopology::default();
        let loc = topo.decode_address(addr).unwrap();
        prop_assert_eq!(topo.encode_address(&loc).unwrap(), addr);
    }

    #[test]
    fn generated_accesses_stay_in_region(
        pattern in prop::sample::select(vec![Pattern::Sequential, Pattern::RandomUniform, Pattern::Hotspot]),
        access in prop::sample::select(vec![64u64, 128, 256, 1024, 4096]),
        threads in 1usize..5,
        seed in any::<u64>(),
    ) {
        let spec = WorkloadSpec { pattern, access_bytes: access, threads, region_length: 1 << 22, ops_per_thread: 64, ..WorkloadSpec::default() };
        for (t, s) in generate(&spec, &PlatformTopology::default(), seed).unwrap().into_iter().enumerate() {
            let (base, len) = spec.thread_region(t);
            let limit = base + if pattern == Pattern::Hotspot { spec.hotspot_bytes.min(len) } else { len };
            let mut n = 0;
            for a in s {
                let lines: BTreeSet<u64> = a.ops.iter().filter(|o| o.kind.carries_payload()).map(|o| o.line()).collect();
                prop_assert!(lines.iter().all(|&l| l >= base && l < limit));
                prop_assert_eq!(a.payload_bytes, access);
                n += 1;
            }
            prop_assert_eq!(n, 64);
        }
    }
}
