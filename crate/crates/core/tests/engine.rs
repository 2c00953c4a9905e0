use std::collections::BTreeMap;

use pmemsim::cache::{MemoryOp, OpKind};
use pmemsim::devices::LineData;
use pmemsim::engine::{access, inject_crash, program, run, Program, SimConfig, Simulation};
use pmemsim::experiments::run_spec;
use pmemsim::topology::NamespaceMode;
use pmemsim::workload::{Access, Instr, Pattern, WorkloadSpec};

fn tracked() -> SimConfig {
    SimConfig { track_data: true, ..SimConfig::default() }
}

fn store(t: u32, addr: u64, size: u32, data: u64) -> MemoryOp {
    MemoryOp::new(OpKind::Store, t, addr, size).with_data(data)
}

fn nt(t: u32, addr: u64, data: u64) -> MemoryOp {
    MemoryOp::new(OpKind::NtStore, t, addr, 64).with_data(data)
}

fn op(kind: OpKind, t: u32, addr: u64) -> MemoryOp {
    MemoryOp::new(kind, t, addr, 0)
}

fn one(ops: Vec<MemoryOp>) -> Vec<Program> {
    vec![program(vec![access(ops, false)])]
}

/// Bytes a store leaves in its line.
fn expected(o: &MemoryOp) -> (u64, LineData) {
    o.payload()
}

fn present(image: &BTreeMap<u64, LineData>, o: &MemoryOp) -> bool {
    let (mask, want) = expected(o);
    let got = image.get(&o.line()).copied().unwrap_or([0; 64]);
    (0..64).filter(|i| mask >> i & 1 == 1).all(|i| got[i] == want[i])
}

fn fence_retire(sim_cfg: &SimConfig, progs: Vec<Program>) -> u64 {
    let mut sim = Simulation::new(sim_cfg.clone(), progs, 1).unwrap();
    sim.run_until(u64::MAX).unwrap();
    sim.op_log().iter().filter(|r| r.op.kind == OpKind::Sfence).map(|r| r.retire).max().unwrap()
}

#[test]
fn empty_workload_reports_zero() {
    let r = run(&SimConfig::default(), vec![], 1).unwrap();
    assert_eq!((r.accesses, r.payload_bytes, r.duration_ns), (0, 0, 0));
    let r = run(&SimConfig::default(), vec![program(vec![])], 1).unwrap();
    assert_eq!((r.accesses, r.payload_bytes), (0, 0));
    assert_eq!(r.total_counters().imc_write_bytes, 0);
}

#[test]
fn same_seed_same_report() {
    let spec = WorkloadSpec {
        instr: Instr::NtstoreSfence,
        pattern: Pattern::RandomUniform,
        threads: 4,
        access_bytes: 128,
        ops_per_thread: 2000,
        ..WorkloadSpec::default()
    };
    let a = run_spec(&SimConfig::default(), &spec, 9).unwrap();
    let b = run_spec(&SimConfig::default(), &spec, 9).unwrap();
    assert_eq!(a, b);
    let c = run_spec(&SimConfig::default(), &spec, 10).unwrap();
    assert_ne!(a.devices, c.devices);
}

#[test]
fn sequential_ntstore_matches_service_time() {
    let mut cfg = SimConfig::default();
    cfg.topology.namespace_mode = NamespaceMode::Single { dimm: 0 };
    let spec = WorkloadSpec {
        instr: Instr::NtstoreSfence,
        pattern: Pattern::Sequential,
        threads: 1,
        access_bytes: 65536,
        ops_per_thread: 512,
        region_length: 1 << 30,
        ..WorkloadSpec::default()
    };
    let r = run_spec(&cfg, &spec, 1).unwrap();
    // media bound: one 256 B XPLine per write occupancy
    let predicted = 256.0 * 1e9 / cfg.xp.media_write_occupancy_ns as f64;
    let got = r.bandwidth();
    assert!((got / predicted - 1.0).abs() < 0.01, "{got} vs {predicted}");
}

#[test]
fn crash_at_time_zero_is_initial_image() {
    let mut sim = Simulation::new(tracked(), one(vec![nt(0, 0, 7), op(OpKind::Sfence, 0, 0)]), 1).unwrap();
    assert!(inject_crash(&mut sim, 0).unwrap().is_empty());
}

#[test]
fn unflushed_store_is_lost() {
    let ops = vec![store(0, 4096, 64, 0x1111), op(OpKind::Sfence, 0, 0)];
    let mut sim = Simulation::new(tracked(), one(ops.clone()), 1).unwrap();
    sim.run_until(u64::MAX).unwrap();
    assert!(!present(&sim.crash_image().unwrap(), &ops[0]));
}

#[test]
fn ntstore_persists_at_wpq_acceptance() {
    let ops = vec![nt(0, 0, 0xabcd), op(OpKind::Sfence, 0, 0)];
    let cfg = SimConfig { record_trace: true, ..tracked() };
    let r = fence_retire(&cfg, one(ops.clone()));
    let first = (0..=r + 1)
        .find(|&t| {
            let mut sim = Simulation::new(cfg.clone(), one(ops.clone()), 1).unwrap();
            present(&inject_crash(&mut sim, t).unwrap(), &ops[0])
        })
        .expect("persistent once the fence retires");
    let mut sim = Simulation::new(cfg, one(ops.clone()), 1).unwrap();
    sim.run_until(u64::MAX).unwrap();
    let dev = sim.raw_device_trace().iter().find(|d| d.write).unwrap();
    // durable in the WPQ before the DIMM has even taken the write
    assert!(first > 0 && first <= dev.time + 1, "persistent at {first}, device write at {}", dev.time);
}

#[test]
fn clwb_without_fence_persists_once_accepted() {
    let mut prog = vec![access(vec![store(0, 256, 64, 0x77), op(OpKind::Clwb, 0, 256)], false)];
    prog.push(Access { delay_ns: 10_000, ..access(vec![MemoryOp::new(OpKind::Load, 0, 8192, 64)], true) });
    let mut sim = Simulation::new(tracked(), vec![program(prog)], 1).unwrap();
    let img = inject_crash(&mut sim, 5_000).unwrap();
    assert!(present(&img, &store(0, 256, 64, 0x77)));
}

#[test]
fn crash_before_any_fence_holds_only_accepted_lines() {
    let ops: Vec<MemoryOp> = (0..32).map(|i| nt(0, i * 64, i + 1)).collect();
    let mut sim = Simulation::new(tracked(), one(ops.clone()), 1).unwrap();
    let img = inject_crash(&mut sim, 300).unwrap();
    assert!(!img.is_empty() && img.len() < ops.len(), "{} lines", img.len());
    for (addr, data) in &img {
        let o = ops.iter().find(|o| o.line() == *addr).expect("line never written");
        assert_eq!(*data, o.payload().1);
    }
}

#[test]
fn fenced_region_is_fully_present() {
    let mut ops = Vec::new();
    let stores: Vec<MemoryOp> = (0..64).map(|i| store(0, 1 << 20 | i * 64, 64, 0x5a00 + i)).collect();
    for s in &stores {
        ops.push(*s);
        ops.push(op(OpKind::Clwb, 0, s.addr));
    }
    ops.push(op(OpKind::Sfence, 0, 0));
    let r = fence_retire(&tracked(), one(ops.clone()));
    let mut sim = Simulation::new(tracked(), one(ops), 1).unwrap();
    let img = inject_crash(&mut sim, r + 1).unwrap();
    assert!(stores.iter().all(|s| present(&img, s)));
}
