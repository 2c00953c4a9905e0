//! Canned experiment suite, XPBuffer capacity inference and guideline checks.
//!
//! Every experiment expands into a grid of points. Each point is one engine
//! run seeded from the master seed and its grid index, so any point can be
//! re-run alone. Points run concurrently and merge in grid order.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::devices::XpConfig;
use crate::engine::{run, sample_stride, Program, SimConfig};
use crate::error::{Result, SimError};
use crate::metrics::{correlation_dataset, CorrelationDataset, ExperimentReport};
use crate::rng::split_seed;
use crate::topology::{DeviceKind, NamespaceMode, XPLINE_BYTES};
use crate::workload::{generate, xpbuffer_probe_rounds, FlushPlacement, Instr, Pattern, RegionPolicy, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExperimentId {
    E1Latency,
    E2Tail,
    E3BwThreads,
    E4BwSize,
    E5LoadedLatency,
    E6XpbufferInfer,
    E7InstrAndFence,
    E8ImcContention,
    E9NumaMix,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 9] = [
        ExperimentId::E1Latency,
        ExperimentId::E2Tail,
        ExperimentId::E3BwThreads,
        ExperimentId::E4BwSize,
        ExperimentId::E5LoadedLatency,
        ExperimentId::E6XpbufferInfer,
        ExperimentId::E7InstrAndFence,
        ExperimentId::E8ImcContention,
        ExperimentId::E9NumaMix,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentId::E1Latency => "E1_LATENCY",
            ExperimentId::E2Tail => "E2_TAIL",
            ExperimentId::E3BwThreads => "E3_BW_THREADS",
            ExperimentId::E4BwSize => "E4_BW_SIZE",
            ExperimentId::E5LoadedLatency => "E5_LOADED_LATENCY",
            ExperimentId::E6XpbufferInfer => "E6_XPBUFFER_INFER",
            ExperimentId::E7InstrAndFence => "E7_INSTR_AND_FENCE",
            ExperimentId::E8ImcContention => "E8_IMC_CONTENTION",
            ExperimentId::E9NumaMix => "E9_NUMA_MIX",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.as_str().eq_ignore_ascii_case(s))
    }

    pub fn csv_name(&self) -> String {
        format!("{}.csv", self.as_str().to_ascii_lowercase())
    }

    pub fn description(&self) -> &'static str {
        match self {
            ExperimentId::E1Latency => "idle read/write latency, sequential vs random, XP vs DRAM",
            ExperimentId::E2Tail => "tail latency of sequential writes over a hotspot",
            ExperimentId::E3BwThreads => "bandwidth vs thread count (256 B accesses)",
            ExperimentId::E4BwSize => "bandwidth vs access size (random accesses)",
            ExperimentId::E5LoadedLatency => "latency vs bandwidth as per-access delay varies",
            ExperimentId::E6XpbufferInfer => "XPBuffer capacity probe and inferred size",
            ExperimentId::E7InstrAndFence => "persistence instruction sequences and fence intervals",
            ExperimentId::E8ImcContention => "bandwidth vs DIMMs touched per thread",
            ExperimentId::E9NumaMix => "local vs remote bandwidth over read/write mix",
        }
    }
}

/// Settings shared by every experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSettings {
    pub sim: SimConfig,
    /// Accesses per grid point, split across the point's threads.
    pub ops_per_point: u64,
    /// Rounds per XPBuffer probe.
    pub probe_rounds: u32,
    /// Latency sampling stride; 0 picks one from the run length.
    pub sample_every: u64,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings { sim: SimConfig::default(), ops_per_point: 1_000_000, probe_rounds: 4, sample_every: 0 }
    }
}

impl ExperimentSettings {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.ops_per_point == 0 {
            return Err(SimError::validation("experiments.ops_per_point", "must be at least 1"));
        }
        if self.probe_rounds < 2 {
            return Err(SimError::validation("experiments.probe_rounds", "must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Work {
    Spec(WorkloadSpec),
    /// XPBuffer probe over this many XPLines.
    Probe(u64),
    /// Run the capacity inference procedure.
    Estimate,
}

/// One grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub params: Vec<(&'static str, String)>,
    pub sim: SimConfig,
    pub work: Work,
}

impl Point {
    pub fn param(&self, k: &str) -> Option<&str> {
        self.params.iter().find(|(n, _)| *n == k).map(|(_, v)| v.as_str())
    }
}

/// One output row.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub run_id: String,
    /// Experiment id, or `WORKLOAD` for an ad-hoc run.
    pub experiment: String,
    pub params: Vec<(&'static str, String)>,
    pub seed: u64,
    pub thread_count: usize,
    pub access_bytes: u64,
    pub pattern: String,
    pub instr: String,
    pub bandwidth_mbps: f64,
    pub mean_ns: Option<f64>,
    pub p50_ns: Option<u64>,
    pub p999_ns: Option<u64>,
    pub p9999_ns: Option<u64>,
    pub max_ns: Option<u64>,
    pub ewr: Option<f64>,
    pub round_ewr: Option<f64>,
    pub estimate_bytes: Option<u64>,
    pub outliers: u64,
    pub accesses: u64,
    pub dimm_ewr: Vec<Option<f64>>,
}

impl Row {
    pub fn param(&self, k: &str) -> Option<&str> {
        self.params.iter().find(|(n, _)| *n == k).map(|(_, v)| v.as_str())
    }
}

pub const DIMM_COLUMNS: usize = 6;

pub const CSV_HEADER: &str = "run_id,experiment,params,seed,thread_count,access_bytes,pattern,instr,\
bandwidth_MBps,mean_ns,p50_ns,p999_ns,p9999_ns,max_ns,ewr,round_ewr,estimate_bytes,outliers,accesses,\
dimm0_ewr,dimm1_ewr,dimm2_ewr,dimm3_ewr,dimm4_ewr,dimm5_ewr";

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn optf(v: Option<f64>, prec: usize) -> String {
    v.map(|x| format!("{x:.prec$}")).unwrap_or_default()
}

impl Row {
    pub fn to_csv(&self) -> String {
        let params: Vec<String> = self.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let mut s = format!(
            "{},{},{},{},{},{},{},{},{:.3},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.experiment,
            params.join(";"),
            self.seed,
            self.thread_count,
            self.access_bytes,
            self.pattern,
            self.instr,
            self.bandwidth_mbps,
            optf(self.mean_ns, 1),
            opt(self.p50_ns),
            opt(self.p999_ns),
            opt(self.p9999_ns),
            opt(self.max_ns),
            optf(self.ewr, 4),
            optf(self.round_ewr, 4),
            opt(self.estimate_bytes),
            self.outliers,
            self.accesses,
        );
        for i in 0..DIMM_COLUMNS {
            s.push(',');
            s.push_str(&optf(self.dimm_ewr.get(i).copied().flatten(), 4));
        }
        s
    }
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub id: ExperimentId,
    pub seed: u64,
    pub points: Vec<Point>,
    pub rows: Vec<Row>,
    pub reports: Vec<Option<ExperimentReport>>,
}

impl ExperimentResult {
    pub fn csv(&self) -> String {
        to_csv(&self.rows)
    }
}

// --- grid construction -------------------------------------------------

fn single(sim: &SimConfig) -> SimConfig {
    let mut s = sim.clone();
    s.topology.device_kind = DeviceKind::XpDimm;
    s.topology.namespace_mode = NamespaceMode::Single { dimm: 0 };
    s
}

fn interleaved(sim: &SimConfig) -> SimConfig {
    let mut s = sim.clone();
    s.topology.device_kind = DeviceKind::XpDimm;
    s.topology.namespace_mode = NamespaceMode::Interleaved;
    s
}

fn dram(sim: &SimConfig) -> SimConfig {
    let mut s = sim.clone();
    s.topology.device_kind = DeviceKind::Dram;
    s.topology.namespace_mode = NamespaceMode::Interleaved;
    s
}

fn modes(sim: &SimConfig) -> [(&'static str, SimConfig); 3] {
    [("dram", dram(sim)), ("single", single(sim)), ("interleaved", interleaved(sim))]
}

const ALL_INSTRS: [Instr; 3] = [Instr::Load, Instr::NtstoreSfence, Instr::StoreClwbSfence];

fn base_spec(set: &ExperimentSettings, threads: usize) -> WorkloadSpec {
    WorkloadSpec {
        threads,
        ops_per_thread: (set.ops_per_point / threads as u64).max(1),
        region_base: 0,
        region_length: 1 << 30,
        thread_region_policy: RegionPolicy::Private,
        ..WorkloadSpec::default()
    }
}

/// Like [`base_spec`] but accesses above 256 B get proportionally fewer
/// operations, so every point moves about the same number of bytes.
fn sized_spec(set: &ExperimentSettings, threads: usize, access_bytes: u64) -> WorkloadSpec {
    let scale = access_bytes.max(256) / 256;
    WorkloadSpec {
        threads,
        access_bytes,
        ops_per_thread: (set.ops_per_point / scale / threads as u64).max(16),
        region_base: 0,
        region_length: 1 << 30,
        thread_region_policy: RegionPolicy::Private,
        ..WorkloadSpec::default()
    }
}

fn point(params: Vec<(&'static str, String)>, sim: SimConfig, spec: WorkloadSpec) -> Point {
    Point { params, sim, work: Work::Spec(spec) }
}

/// The grid of an experiment.
pub fn grid(id: ExperimentId, set: &ExperimentSettings) -> Vec<Point> {
    let sim = &set.sim;
    let mut pts = Vec::new();
    match id {
        ExperimentId::E1Latency => {
            for (mode, cfg) in [("dram", dram(sim)), ("single", single(sim))] {
                for instr in ALL_INSTRS {
                    for pattern in [Pattern::Sequential, Pattern::RandomUniform] {
                        let spec = WorkloadSpec {
                            pattern,
                            instr,
                            access_bytes: 64,
                            fence_each_access: true,
                            warm_cache: instr == Instr::StoreClwbSfence,
                            ..base_spec(set, 1)
                        };
                        pts.push(point(vec![("mode", mode.into())], cfg.clone(), spec));
                    }
                }
            }
        }
        ExperimentId::E2Tail => {
            let mut h = 256u64;
            while h <= 16 << 20 {
                let spec = WorkloadSpec {
                    pattern: Pattern::Hotspot,
                    hotspot_bytes: h,
                    instr: Instr::NtstoreSfence,
                    access_bytes: 256,
                    ..base_spec(set, 1)
                };
                pts.push(point(vec![("mode", "single".into()), ("hotspot_bytes", h.to_string())], single(sim), spec));
                h *= 2;
            }
        }
        ExperimentId::E3BwThreads => {
            for (mode, cfg) in modes(sim) {
                for instr in ALL_INSTRS {
                    for threads in [1usize, 2, 3, 4, 6, 8, 10, 12, 16, 20, 24] {
                        let spec = WorkloadSpec { instr, access_bytes: 256, ..base_spec(set, threads) };
                        pts.push(point(vec![("mode", mode.into())], cfg.clone(), spec));
                    }
                }
            }
        }
        ExperimentId::E4BwSize => {
            let mut sizes: Vec<u64> = (6..=20).map(|p| 1u64 << p).collect();
            sizes.extend([12 << 10, 24 << 10, 48 << 10]);
            sizes.sort_unstable();
            for (mode, cfg) in modes(sim) {
                for instr in ALL_INSTRS {
                    let threads = e4_threads(mode, instr);
                    for &size in &sizes {
                        let spec = WorkloadSpec { pattern: Pattern::RandomUniform, instr, ..sized_spec(set, threads, size) };
                        pts.push(point(vec![("mode", mode.into())], cfg.clone(), spec));
                    }
                }
            }
        }
        ExperimentId::E5LoadedLatency => {
            let delays = [0u64, 10, 20, 50, 100, 200, 500, 1_000, 2_000, 5_000, 10_000, 20_000, 40_000, 80_000];
            for (mode, cfg) in [("dram", dram(sim)), ("interleaved", interleaved(sim))] {
                for (instr, threads) in [(Instr::Load, 16), (Instr::NtstoreSfence, 4)] {
                    for pattern in [Pattern::Sequential, Pattern::RandomUniform] {
                        for &d in delays.iter().rev() {
                            let spec = WorkloadSpec {
                                pattern,
                                instr,
                                access_bytes: 64,
                                delay_ns: d,
                                // streamed stores; a fence per line would cap each thread far below the device
                                sfence_interval_bytes: if instr == Instr::Load { 0 } else { 4096 },
                                ..base_spec(set, threads)
                            };
                            pts.push(point(vec![("mode", mode.into()), ("delay_ns", d.to_string())], cfg.clone(), spec));
                        }
                    }
                }
            }
        }
        ExperimentId::E6XpbufferInfer => {
            for n in [8u64, 16, 32, 48, 56, 60, 62, 63, 64, 65, 66, 68, 72, 80, 96, 128, 192, 256] {
                pts.push(Point { params: vec![("probe_lines", n.to_string())], sim: single(sim), work: Work::Probe(n) });
            }
            pts.push(Point { params: vec![("probe_lines", "estimate".into())], sim: single(sim), work: Work::Estimate });
        }
        ExperimentId::E7InstrAndFence => {
            let sizes: Vec<u64> = (6..=16).map(|p| 1u64 << p).collect();
            for instr in [Instr::NtstoreSfence, Instr::StoreClwbSfence, Instr::StoreSfence] {
                for &size in &sizes {
                    let lat = WorkloadSpec { instr, warm_cache: instr != Instr::NtstoreSfence, ..sized_spec(set, 1, size) };
                    pts.push(point(vec![("mode", "interleaved".into()), ("metric", "latency".into())], interleaved(sim), lat));
                    let bw = WorkloadSpec { instr, ..sized_spec(set, 6, size) };
                    pts.push(point(vec![("mode", "interleaved".into()), ("metric", "bandwidth".into())], interleaved(sim), bw));
                }
            }
            let fence_sizes: Vec<u64> = (6..=18).map(|p| 1u64 << p).collect();
            for placement in [FlushPlacement::PerLine, FlushPlacement::PerAccessEnd] {
                for &size in &fence_sizes {
                    let spec = WorkloadSpec {
                        instr: Instr::StoreClwbSfence,
                        flush_placement: placement,
                        ..sized_spec(set, 1, size)
                    };
                    pts.push(point(
                        vec![
                            ("mode", "single".into()),
                            ("metric", "fence_interval".into()),
                            ("flush_placement", placement.as_str().into()),
                        ],
                        single(sim),
                        spec,
                    ));
                }
            }
        }
        ExperimentId::E8ImcContention => {
            for (instr, threads) in [(Instr::Load, 24), (Instr::NtstoreSfence, 6)] {
                for n in 1..=6usize {
                    let spec = WorkloadSpec {
                        pattern: Pattern::RandomUniform,
                        instr,
                        access_bytes: 256,
                        dimm_fanout: n,
                        thread_region_policy: RegionPolicy::Shared,
                        ..base_spec(set, threads)
                    };
                    pts.push(point(vec![("mode", "interleaved".into()), ("fanout", n.to_string())], interleaved(sim), spec));
                }
            }
        }
        ExperimentId::E9NumaMix => {
            for (locality, socket) in [("local", sim.topology.namespace_socket), ("remote", 1 - sim.topology.namespace_socket.min(1))] {
                for threads in [1usize, 4] {
                    for tenth in 0..=10u32 {
                        let rf = tenth as f64 / 10.0;
                        let mut cfg = interleaved(sim);
                        cfg.thread_socket = socket;
                        let spec = WorkloadSpec {
                            pattern: Pattern::RandomUniform,
                            instr: if tenth == 10 { Instr::Load } else { Instr::NtstoreSfence },
                            read_fraction: rf,
                            access_bytes: 256,
                            ..base_spec(set, threads)
                        };
                        pts.push(point(
                            vec![("mode", "interleaved".into()), ("locality", locality.into()), ("read_fraction", format!("{rf:.1}"))],
                            cfg,
                            spec,
                        ));
                    }
                }
            }
        }
    }
    pts
}

fn e4_threads(mode: &str, instr: Instr) -> usize {
    match (mode, instr) {
        ("dram", _) => 24,
        ("single", Instr::Load) => 4,
        ("single", Instr::NtstoreSfence) => 2,
        ("single", _) => 3,
        (_, Instr::Load) => 16,
        (_, Instr::NtstoreSfence) => 6,
        _ => 12,
    }
}

// --- execution -----------------------------------------------------------

/// Run one workload spec.
pub fn run_spec(sim: &SimConfig, spec: &WorkloadSpec, seed: u64) -> Result<ExperimentReport> {
    run_spec_sampled(sim, spec, seed, 0)
}

/// [`run_spec`] with an explicit sampling stride (0 = automatic).
pub fn run_spec_sampled(sim: &SimConfig, spec: &WorkloadSpec, seed: u64, sample_every: u64) -> Result<ExperimentReport> {
    let mut cfg = sim.clone();
    cfg.sample_every = match sample_every {
        0 => sample_stride(spec.ops_per_thread.saturating_mul(spec.threads as u64)),
        n => n,
    };
    let streams = generate(spec, &cfg.topology, seed)?;
    let progs: Vec<Program> = streams.into_iter().map(|s| Box::new(s) as Program).collect();
    run(&cfg, progs, seed)
}

/// Steady-state round EWR of an XPBuffer probe over `lines` XPLines.
pub fn probe_ewr(sim: &SimConfig, lines: u64, rounds: u32, seed: u64) -> Result<(ExperimentReport, Option<f64>)> {
    let prog = crate::engine::program(xpbuffer_probe_rounds(lines, 0, rounds));
    let rep = run(sim, vec![prog], seed)?;
    let last = rep.round_ewr().last().copied().flatten();
    Ok((rep, last))
}

/// Infer XPBuffer capacity by doubling then bisecting the probe size.
/// Returns 256 B times the largest line count whose round EWR stays >= 0.9.
pub fn infer_xpbuffer_capacity(xp: &XpConfig, seed: u64) -> Result<u64> {
    let mut sim = single(&SimConfig::default());
    sim.xp = xp.clone();
    sim.xp.outlier_prob = 0.0;
    let good = |n: u64| -> Result<bool> { Ok(probe_ewr(&sim, n, 4, seed)?.1.is_some_and(|e| e >= 0.9)) };
    if !good(1)? {
        return Ok(0);
    }
    let mut lo = 1u64;
    let mut hi = 2u64;
    while good(hi)? {
        lo = hi;
        hi *= 2;
        if hi > 1 << 20 {
            return Err(SimError::Invariant("XPBuffer probe never saturated".into()));
        }
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if good(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo * XPLINE_BYTES)
}

fn row_from(id: ExperimentId, idx: usize, p: &Point, seed: u64, rep: &ExperimentReport) -> Row {
    let h = rep.all_latency();
    let (threads, bytes, pattern, instr) = match &p.work {
        Work::Spec(s) => {
            let instr = if s.read_fraction > 0.0 && s.instr != Instr::Load { "MIXED".into() } else { s.instr.as_str().to_string() };
            (s.threads, s.access_bytes, s.pattern.as_str().to_string(), instr)
        }
        _ => (1, 128, "PROBE".into(), Instr::NtstoreSfence.as_str().to_string()),
    };
    Row {
        run_id: format!("{}-{idx:04}", id.as_str()),
        experiment: id.as_str().to_string(),
        params: p.params.clone(),
        seed,
        thread_count: threads,
        access_bytes: bytes,
        pattern,
        instr,
        bandwidth_mbps: rep.bandwidth() / 1e6,
        mean_ns: h.mean(),
        p50_ns: h.percentile(0.5),
        p999_ns: h.percentile(0.999),
        p9999_ns: h.percentile(0.9999),
        max_ns: h.max(),
        ewr: rep.ewr(),
        round_ewr: rep.round_ewr().last().copied().flatten(),
        estimate_bytes: None,
        outliers: rep.total_counters().outliers,
        accesses: rep.accesses,
        dimm_ewr: rep.devices.iter().map(|d| d.counters.ewr()).collect(),
    }
}

fn run_point(id: ExperimentId, idx: usize, p: &Point, set: &ExperimentSettings, seed: u64) -> Result<(Row, Option<ExperimentReport>)> {
    match &p.work {
        Work::Spec(spec) => {
            let rep = run_spec_sampled(&p.sim, spec, seed, set.sample_every)?;
            Ok((row_from(id, idx, p, seed, &rep), Some(rep)))
        }
        Work::Probe(n) => {
            let (rep, _) = probe_ewr(&p.sim, *n, set.probe_rounds, seed)?;
            Ok((row_from(id, idx, p, seed, &rep), Some(rep)))
        }
        Work::Estimate => {
            let est = infer_xpbuffer_capacity(&p.sim.xp, seed)?;
            let mut row = row_from(id, idx, p, seed, &ExperimentReport::default());
            row.estimate_bytes = Some(est);
            Ok((row, None))
        }
    }
}

/// Execute an experiment's grid. `jobs` bounds the worker threads
/// (0 lets the pool decide).
pub fn run_experiment(id: ExperimentId, set: &ExperimentSettings, seed: u64, jobs: usize) -> Result<ExperimentResult> {
    set.validate()?;
    let points = grid(id, set);
    run_points(id, points, set, seed, jobs)
}

/// Execute explicit points as experiment `id`.
pub fn run_points(id: ExperimentId, points: Vec<Point>, set: &ExperimentSettings, seed: u64, jobs: usize) -> Result<ExperimentResult> {
    let exec = || -> Vec<Result<(Row, Option<ExperimentReport>)>> {
        points
            .par_iter()
            .enumerate()
            .map(|(i, p)| run_point(id, i, p, set, split_seed(seed, i as u64)))
            .collect()
    };
    let results = if jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| SimError::Contract(e.to_string()))?
            .install(exec)
    } else {
        exec()
    };
    let mut rows = Vec::with_capacity(points.len());
    let mut reports = Vec::with_capacity(points.len());
    for r in results {
        let (row, rep) = r?;
        rows.push(row);
        reports.push(rep);
    }
    Ok(ExperimentResult { id, seed, points, rows, reports })
}

/// EWR/bandwidth dataset over the write rows of a sweep.
pub fn write_correlation(results: &[&ExperimentResult]) -> CorrelationDataset {
    let reps: Vec<&ExperimentReport> = results
        .iter()
        .flat_map(|r| r.rows.iter().zip(&r.reports))
        .filter(|(row, _)| row.instr != "LOAD" && row.param("mode") == Some("single"))
        .filter_map(|(_, rep)| rep.as_ref())
        .collect();
    correlation_dataset(reps)
}

// --- guideline checks ----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Guideline {
    /// Avoid random accesses smaller than 256 B.
    SmallAccesses = 1,
    /// Use non-temporal stores for large transfers.
    NtStores = 2,
    /// Limit concurrent threads per DIMM.
    ThreadCount = 3,
    /// Avoid mixed or multi-threaded remote accesses.
    Numa = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FindingStatus {
    Flagged,
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub guideline: Guideline,
    pub status: FindingStatus,
    pub run_id: String,
    pub detail: String,
}

impl Finding {
    pub fn to_line(&self) -> String {
        let st = match self.status {
            FindingStatus::Flagged => "flagged",
            FindingStatus::Indeterminate => "indeterminate",
        };
        format!("guideline-{},{},{},{}", self.guideline as u8, st, self.run_id, self.detail)
    }
}

fn is_write(row: &Row) -> bool {
    row.instr != "LOAD"
}

/// Flag rows that violate the programming guidelines.
pub fn guideline_check(rows: &[Row]) -> Vec<Finding> {
    let mut out = Vec::new();
    let flag = |g, row: &Row, detail: String| Finding { guideline: g, status: FindingStatus::Flagged, run_id: row.run_id.clone(), detail };

    // (a) small accesses with poor EWR
    for r in rows.iter().filter(|r| is_write(r) && r.access_bytes < 256) {
        if r.ewr.is_some_and(|e| e < 0.9) {
            out.push(flag(Guideline::SmallAccesses, r, format!("ewr {:.2} at {} B", r.ewr.unwrap(), r.access_bytes)));
        }
    }

    // (b) writers per DIMM beyond the bandwidth peak of the same series
    let series_key = |r: &Row| (r.experiment.clone(), r.param("mode").map(str::to_string), r.instr.clone(), r.access_bytes, r.pattern.clone());
    let mut keys: Vec<_> = rows.iter().filter(|r| is_write(r) && r.param("mode") == Some("single")).map(series_key).collect();
    keys.dedup();
    for k in keys {
        let series: Vec<&Row> = rows.iter().filter(|r| is_write(r) && series_key(r) == k).collect();
        let distinct = series.iter().map(|r| r.thread_count).collect::<std::collections::BTreeSet<_>>();
        if distinct.len() < 2 {
            continue;
        }
        let peak = series.iter().max_by(|a, b| a.bandwidth_mbps.total_cmp(&b.bandwidth_mbps)).unwrap();
        for r in series.iter().filter(|r| r.thread_count > peak.thread_count) {
            out.push(flag(
                Guideline::ThreadCount,
                r,
                format!("{} writers on one DIMM, bandwidth peaks at {}", r.thread_count, peak.thread_count),
            ));
        }
    }

    // (c) remote mixed multi-thread runs far below their local twin
    for r in rows.iter().filter(|r| r.param("locality") == Some("remote") && r.thread_count > 1) {
        let rf: f64 = r.param("read_fraction").and_then(|v| v.parse().ok()).unwrap_or(1.0);
        if rf <= 0.0 || rf >= 1.0 {
            continue;
        }
        let twin = rows.iter().find(|l| {
            l.param("locality") == Some("local")
                && l.thread_count == r.thread_count
                && l.access_bytes == r.access_bytes
                && l.param("read_fraction") == r.param("read_fraction")
        });
        match twin {
            Some(l) if r.bandwidth_mbps < 0.5 * l.bandwidth_mbps => out.push(flag(
                Guideline::Numa,
                r,
                format!("remote {:.0} MB/s vs local {:.0} MB/s", r.bandwidth_mbps, l.bandwidth_mbps),
            )),
            Some(_) => {}
            None => out.push(Finding {
                guideline: Guideline::Numa,
                status: FindingStatus::Indeterminate,
                run_id: r.run_id.clone(),
                detail: "no local twin run".into(),
            }),
        }
    }

    // (d) store+clwb where the ntstore twin is faster
    for r in rows.iter().filter(|r| r.instr == Instr::StoreClwbSfence.as_str() && r.access_bytes >= 512) {
        let twin = rows.iter().find(|n| {
            n.instr == Instr::NtstoreSfence.as_str()
                && n.experiment == r.experiment
                && n.access_bytes == r.access_bytes
                && n.thread_count == r.thread_count
                && n.pattern == r.pattern
                && n.param("mode") == r.param("mode")
                && n.param("metric") == r.param("metric")
        });
        match twin {
            Some(n) => {
                let faster = if r.param("metric") == Some("latency") {
                    n.mean_ns.zip(r.mean_ns).is_some_and(|(a, b)| a < b)
                } else {
                    n.bandwidth_mbps > r.bandwidth_mbps
                };
                if faster {
                    out.push(flag(Guideline::NtStores, r, format!("ntstore twin {} is faster", n.run_id)));
                }
            }
            None => out.push(Finding {
                guideline: Guideline::NtStores,
                status: FindingStatus::Indeterminate,
                run_id: r.run_id.clone(),
                detail: "no ntstore twin run".into(),
            }),
        }
    }
    out
}

/// Hex SHA-256 of a config echo.
pub fn config_hash(config_echo: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(config_echo.as_bytes()))
}

/// Manifest line: id, config hash, seed, row count, file name.
pub fn manifest_entry(id: &str, config_echo: &str, seed: u64, rows: usize, file: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{id},{},{seed},{rows},{file}", config_hash(config_echo));
    s
}

/// Row for an ad-hoc workload run.
pub fn workload_row(spec: &WorkloadSpec, seed: u64, rep: &ExperimentReport) -> Row {
    let p = Point { params: vec![], sim: SimConfig::default(), work: Work::Spec(spec.clone()) };
    let mut row = row_from(ExperimentId::E1Latency, 0, &p, seed, rep);
    row.run_id = "WORKLOAD-0000".into();
    row.experiment = "WORKLOAD".into();
    row
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentSettings {
        ExperimentSettings { ops_per_point: 2_000, ..ExperimentSettings::default() }
    }

    #[test]
    fn ids_round_trip() {
        for id in ExperimentId::ALL {
            assert_eq!(ExperimentId::parse(id.as_str()), Some(id));
        }
        assert_eq!(ExperimentId::parse("E10"), None);
    }

    #[test]
    fn grid_axes() {
        let s = small();
        let e4 = grid(ExperimentId::E4BwSize, &s);
        let sizes: std::collections::BTreeSet<u64> = e4
            .iter()
            .filter_map(|p| match &p.work {
                Work::Spec(w) => Some(w.access_bytes),
                _ => None,
            })
            .collect();
        assert!(sizes.contains(&64) && sizes.contains(&(1 << 20)));
        assert!(sizes.contains(&(24 << 10)) && sizes.contains(&(48 << 10)));
        let e8 = grid(ExperimentId::E8ImcContention, &s);
        assert_eq!(e8.len(), 12);
        let e2 = grid(ExperimentId::E2Tail, &s);
        assert_eq!(e2.first().unwrap().param("hotspot_bytes"), Some("256"));
        assert_eq!(e2.last().unwrap().param("hotspot_bytes"), Some("16777216"));
    }

    #[test]
    fn csv_rows_match_grid() {
        let s = small();
        let r = run_experiment(ExperimentId::E8ImcContention, &s, 3, 2).unwrap();
        assert_eq!(r.rows.len(), grid(ExperimentId::E8ImcContention, &s).len());
        let csv = r.csv();
        assert_eq!(csv.lines().count(), r.rows.len() + 1);
        assert!(!csv.contains('\r'));
        for l in csv.lines() {
            assert_eq!(l.split(',').count(), CSV_HEADER.split(',').count());
        }
    }

    #[test]
    fn one_line_buffer_probe() {
        let xp = XpConfig { xpbuffer_lines: 1, outlier_prob: 0.0, ..XpConfig::default() };
        assert_eq!(infer_xpbuffer_capacity(&xp, 1).unwrap(), 256);
        let mut sim = single(&SimConfig::default());
        sim.xp = xp;
        for n in [2, 3, 8] {
            let e = probe_ewr(&sim, n, 3, 1).unwrap().1.unwrap();
            assert!((e - 0.5).abs() < 0.01, "{n}: {e}");
        }
    }

    fn row(instr: &str, bytes: u64, threads: usize, bw: f64, ewr: Option<f64>, params: Vec<(&'static str, String)>) -> Row {
        Row {
            run_id: format!("r-{instr}-{bytes}-{threads}-{bw}"),
            experiment: "E3_BW_THREADS".into(),
            params,
            seed: 0,
            thread_count: threads,
            access_bytes: bytes,
            pattern: "RANDOM_UNIFORM".into(),
            instr: instr.into(),
            bandwidth_mbps: bw,
            mean_ns: None,
            p50_ns: None,
            p999_ns: None,
            p9999_ns: None,
            max_ns: None,
            ewr,
            round_ewr: None,
            estimate_bytes: None,
            outliers: 0,
            accesses: 0,
            dimm_ewr: vec![],
        }
    }

    #[test]
    fn guideline_rules() {
        let small_write = row("NTSTORE_SFENCE", 64, 1, 500.0, Some(0.25), vec![("mode", "single".into())]);
        let f = guideline_check(&[small_write]);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].guideline, Guideline::SmallAccesses);

        let clean = row("NTSTORE_SFENCE", 256, 1, 2000.0, Some(1.0), vec![("mode", "single".into())]);
        assert!(guideline_check(&[clean]).is_empty());

        let p = |loc: &str| vec![("locality", loc.to_string()), ("read_fraction", "0.5".to_string())];
        let local = row("MIXED", 256, 4, 4000.0, Some(1.0), p("local"));
        let remote = row("MIXED", 256, 4, 300.0, Some(1.0), p("remote"));
        let f = guideline_check(&[local, remote.clone()]);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].guideline, Guideline::Numa);
        let f = guideline_check(&[remote]);
        assert_eq!(f[0].status, FindingStatus::Indeterminate);

        let clwb = row("STORE_CLWB_SFENCE", 1024, 6, 1000.0, Some(1.0), vec![]);
        let nt = row("NTSTORE_SFENCE", 1024, 6, 2000.0, Some(1.0), vec![]);
        let f = guideline_check(&[clwb, nt]);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].guideline, Guideline::NtStores);

        let s = |t, bw| row("NTSTORE_SFENCE", 256, t, bw, Some(1.0), vec![("mode", "single".into())]);
        let f = guideline_check(&[s(1, 1.0), s(2, 3.0), s(8, 2.0)]);
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].guideline, Guideline::ThreadCount);
    }
}
