//! Prints the headline numbers the default constants are tuned against.

use pmemsim::engine::{run, sample_stride, Program, SimConfig};
use pmemsim::topology::NamespaceMode;
use pmemsim::workload::{generate, Instr, Pattern, RegionPolicy, WorkloadSpec};

fn go(cfg: &SimConfig, spec: &WorkloadSpec) -> pmemsim::metrics::ExperimentReport {
    let mut cfg = cfg.clone();
    cfg.sample_every = sample_stride(spec.ops_per_thread * spec.threads as u64);
    let streams = generate(spec, &cfg.topology, 1).unwrap();
    let progs: Vec<Program> = streams.into_iter().map(|s| Box::new(s) as Program).collect();
    run(&cfg, progs, 1).unwrap()
}

fn main() {
    let base = SimConfig::default();
    let mut single = base.clone();
    single.topology.namespace_mode = NamespaceMode::Single { dimm: 0 };
    let gb = |r: &pmemsim::metrics::ExperimentReport| r.bandwidth() / 1e9;

    let seq = |instr, threads, bytes| WorkloadSpec {
        pattern: Pattern::Sequential,
        instr,
        threads,
        access_bytes: bytes,
        region_length: 256 << 20,
        thread_region_policy: RegionPolicy::Private,
        ops_per_thread: 20_000,
        ..WorkloadSpec::default()
    };
    for (name, cfg) in [("single", &single), ("interleaved", &base)] {
        for instr in [Instr::Load, Instr::NtstoreSfence, Instr::StoreClwbSfence] {
            let row: Vec<String> = [1usize, 2, 4, 6, 8, 12, 16, 24]
                .iter()
                .map(|&t| {
                    let r = go(cfg, &WorkloadSpec { region_length: 1 << 30, ..seq(instr, t, 256) });
                    format!("{t}:{:.2}/{:.2}", gb(&r), r.ewr().unwrap_or(f64::NAN))
                })
                .collect();
            println!("{name} {} {}", instr.as_str(), row.join(" "));
        }
    }
}
