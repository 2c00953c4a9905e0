//! Microbenchmark-style workload generator.
//!
//! A workload is a set of per-thread streams of program-level accesses. Each
//! access expands into 64 B-bounded micro-ops plus the flush and fence ops
//! of its instruction sequence. Streams are lazy so billion-op runs never
//! materialize.

use std::fmt::Write as _;
use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cache::{MemoryOp, OpKind, ThreadId};
use crate::error::{Result, SimError};
use crate::rng::split_seed;
use crate::topology::{PlatformTopology, LINE_BYTES, XPLINE_BYTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pattern {
    Sequential,
    RandomUniform,
    Hotspot,
    Strided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instr {
    Load,
    NtstoreSfence,
    StoreClwbSfence,
    StoreSfence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlushPlacement {
    PerLine,
    PerAccessEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionPolicy {
    Shared,
    Private,
}

macro_rules! str_enum {
    ($t:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl $t {
            pub fn as_str(&self) -> &'static str {
                match self { $(Self::$v => $s),* }
            }
            pub fn parse(s: &str) -> Option<Self> {
                match s.to_ascii_uppercase().as_str() { $($s => Some(Self::$v),)* _ => None }
            }
        }
    };
}

str_enum!(Pattern { Sequential => "SEQUENTIAL", RandomUniform => "RANDOM_UNIFORM", Hotspot => "HOTSPOT", Strided => "STRIDED" });
str_enum!(Instr { Load => "LOAD", NtstoreSfence => "NTSTORE_SFENCE", StoreClwbSfence => "STORE_CLWB_SFENCE", StoreSfence => "STORE_SFENCE" });
str_enum!(FlushPlacement { PerLine => "PER_LINE", PerAccessEnd => "PER_ACCESS_END" });
str_enum!(RegionPolicy { Shared => "SHARED", Private => "PRIVATE" });

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub pattern: Pattern,
    pub region_base: u64,
    pub region_length: u64,
    pub access_bytes: u64,
    pub stride_bytes: u64,
    pub hotspot_bytes: u64,
    pub instr: Instr,
    pub flush_placement: FlushPlacement,
    /// Bytes written between fences; 0 fences every access.
    pub sfence_interval_bytes: u64,
    pub read_fraction: f64,
    pub delay_ns: u64,
    pub threads: usize,
    pub thread_region_policy: RegionPolicy,
    /// DIMMs each thread targets; 0 leaves the address stream unrestricted.
    pub dimm_fanout: usize,
    pub ops_per_thread: u64,
    /// Serialize each access with a fence (idle-latency measurements).
    pub fence_each_access: bool,
    /// Load every line of an access (untimed) before the timed part.
    pub warm_cache: bool,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            pattern: Pattern::Sequential,
            region_base: 0,
            region_length: 64 << 20,
            access_bytes: 256,
            stride_bytes: 4096,
            hotspot_bytes: 4096,
            instr: Instr::NtstoreSfence,
            flush_placement: FlushPlacement::PerLine,
            sfence_interval_bytes: 0,
            read_fraction: 0.0,
            delay_ns: 0,
            threads: 1,
            thread_region_policy: RegionPolicy::Private,
            dimm_fanout: 0,
            ops_per_thread: 10_000,
            fence_each_access: false,
            warm_cache: false,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self, topo: &PlatformTopology) -> Result<()> {
        let v = |k: &str, m: String| Err(SimError::validation(format!("workload.{k}"), m));
        if self.access_bytes < 8 || self.access_bytes % 8 != 0 {
            return v("access_bytes", format!("{} must be >= 8 and a multiple of 8", self.access_bytes));
        }
        if self.threads == 0 {
            return v("threads", "must be at least 1".into());
        }
        if self.region_length < self.access_bytes {
            return v("region_length", "smaller than one access".into());
        }
        if self.region_base.checked_add(self.region_length).is_none_or(|end| end > topo.capacity()) {
            return v(
                "region_length",
                format!("region exceeds namespace capacity {:#x}", topo.capacity()),
            );
        }
        if self.pattern == Pattern::Hotspot
            && (self.hotspot_bytes > self.region_length || self.hotspot_bytes < self.access_bytes)
        {
            return v("hotspot_bytes", "must lie between access_bytes and region_length".into());
        }
        if self.pattern == Pattern::Strided && self.stride_bytes == 0 {
            return v("stride_bytes", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return v("read_fraction", "must lie in [0, 1]".into());
        }
        if self.dimm_fanout > topo.namespace_slots().len() {
            return v("dimm_fanout", format!("exceeds {} DIMMs", topo.namespace_slots().len()));
        }
        if self.dimm_fanout > 0 && self.access_bytes > topo.interleave_bytes {
            return v("dimm_fanout", "requires access_bytes <= interleave_bytes".into());
        }
        if self.thread_region_policy == RegionPolicy::Private
            && self.region_length / (self.threads as u64) < self.access_bytes
        {
            return v("threads", "private regions smaller than one access".into());
        }
        Ok(())
    }

    /// (base, length) of the region a thread works in.
    pub fn thread_region(&self, thread: usize) -> (u64, u64) {
        match self.thread_region_policy {
            RegionPolicy::Shared => (self.region_base, self.region_length),
            RegionPolicy::Private => {
                let raw = self.region_length / self.threads as u64;
                // page-align when possible
                let len = if raw >= 4096 { raw & !4095 } else { raw - raw % self.access_bytes };
                (self.region_base + thread as u64 * len, len)
            }
        }
    }
}

/// One program-level access.
#[derive(Debug, Clone, PartialEq)]
pub struct Access {
    pub ops: Vec<MemoryOp>,
    /// Ops before this index are untimed preparation.
    pub timed_from: usize,
    pub payload_bytes: u64,
    pub delay_ns: u64,
    /// Round boundary: device counters are snapshotted when this access starts.
    pub marker: Option<u32>,
    pub is_read: bool,
}

impl Access {
    pub fn timed_ops(&self) -> &[MemoryOp] {
        &self.ops[self.timed_from..]
    }
}

/// Lazy access stream of one thread.
#[derive(Debug, Clone)]
pub struct ThreadStream {
    spec: WorkloadSpec,
    thread: ThreadId,
    base: u64,
    len: u64,
    rng: ChaCha8Rng,
    produced: u64,
    cursor: u64,
    bytes_since_fence: u64,
    fanout: Vec<u64>,
    interleave: u64,
    dimms: u64,
}

impl ThreadStream {
    fn next_offset(&mut self) -> u64 {
        let s = &self.spec;
        let a = s.access_bytes;
        match s.pattern {
            Pattern::Sequential => {
                let off = self.cursor;
                self.cursor = (self.cursor + a) % (self.len - self.len % a);
                off
            }
            Pattern::Strided => {
                let slots = (self.len / a).max(1);
                let off = self.cursor;
                self.cursor += s.stride_bytes;
                if self.cursor + a > self.len {
                    // next pass starts one access further in
                    let pass = (self.produced + 1) * s.stride_bytes / self.len.max(1);
                    self.cursor = (pass * a) % (slots * a);
                }
                off
            }
            Pattern::Hotspot => {
                let span = s.hotspot_bytes - s.hotspot_bytes % a;
                let off = self.cursor;
                self.cursor = (self.cursor + a) % span;
                off
            }
            Pattern::RandomUniform if !self.fanout.is_empty() => {
                let stripe = self.interleave * self.dimms;
                let rows = (self.len / stripe).max(1);
                let row = self.rng.gen_range(0..rows);
                let dimm = self.fanout[self.rng.gen_range(0..self.fanout.len())];
                let within = self.rng.gen_range(0..self.interleave / a) * a;
                row * stripe + dimm * self.interleave + within
            }
            Pattern::RandomUniform => self.rng.gen_range(0..self.len / a) * a,
        }
    }

    fn expand(&mut self, addr: u64, read: bool) -> Access {
        let s = &self.spec;
        let t = self.thread;
        let mut ops = Vec::new();
        let mut pieces = Vec::new();
        let end = addr + s.access_bytes;
        let mut a = addr;
        while a < end {
            let line_end = (a / LINE_BYTES + 1) * LINE_BYTES;
            let n = line_end.min(end) - a;
            pieces.push((a, n as u32));
            a += n;
        }
        if s.warm_cache {
            for &(a, n) in &pieces {
                ops.push(MemoryOp::new(OpKind::Load, t, a, n));
            }
            ops.push(MemoryOp::fence(t));
        }
        let timed_from = ops.len();
        let tag = ((t as u64) << 48) ^ (self.produced << 8);
        if read {
            for &(a, n) in &pieces {
                ops.push(MemoryOp::new(OpKind::Load, t, a, n));
            }
            if s.fence_each_access {
                ops.push(MemoryOp::fence(t));
            }
        } else {
            let store = |i: usize, a: u64, n: u32, kind| MemoryOp::new(kind, t, a, n).with_data(tag | i as u64 | 1);
            match s.instr {
                Instr::NtstoreSfence | Instr::Load => {
                    for (i, &(a, n)) in pieces.iter().enumerate() {
                        ops.push(store(i, a, n, OpKind::NtStore));
                    }
                }
                Instr::StoreSfence => {
                    for (i, &(a, n)) in pieces.iter().enumerate() {
                        ops.push(store(i, a, n, OpKind::Store));
                    }
                }
                Instr::StoreClwbSfence => match s.flush_placement {
                    FlushPlacement::PerLine => {
                        for (i, &(a, n)) in pieces.iter().enumerate() {
                            ops.push(store(i, a, n, OpKind::Store));
                            ops.push(MemoryOp::new(OpKind::Clwb, t, a & !(LINE_BYTES - 1), 64));
                        }
                    }
                    FlushPlacement::PerAccessEnd => {
                        for (i, &(a, n)) in pieces.iter().enumerate() {
                            ops.push(store(i, a, n, OpKind::Store));
                        }
                        let mut last = u64::MAX;
                        for &(a, _) in &pieces {
                            let l = a & !(LINE_BYTES - 1);
                            if l != last {
                                ops.push(MemoryOp::new(OpKind::Clwb, t, l, 64));
                                last = l;
                            }
                        }
                    }
                },
            }
            self.bytes_since_fence += s.access_bytes;
            if self.bytes_since_fence >= s.sfence_interval_bytes || s.fence_each_access {
                ops.push(MemoryOp::fence(t));
                self.bytes_since_fence = 0;
            }
        }
        Access {
            ops,
            timed_from,
            payload_bytes: s.access_bytes,
            delay_ns: s.delay_ns,
            marker: None,
            is_read: read,
        }
    }
}

impl Iterator for ThreadStream {
    type Item = Access;

    fn next(&mut self) -> Option<Access> {
        if self.produced >= self.spec.ops_per_thread {
            return None;
        }
        let read = match self.spec.instr {
            Instr::Load => true,
            _ if self.spec.read_fraction > 0.0 => self.rng.gen_bool(self.spec.read_fraction),
            _ => false,
        };
        let addr = self.base + self.next_offset();
        let access = self.expand(addr, read);
        self.produced += 1;
        Some(access)
    }
}

/// Build the per-thread streams of a workload.
pub fn generate(spec: &WorkloadSpec, topo: &PlatformTopology, seed: u64) -> Result<Vec<ThreadStream>> {
    spec.validate(topo)?;
    let dimms = topo.namespace_slots().len() as u64;
    Ok((0..spec.threads)
        .map(|t| {
            let (base, len) = spec.thread_region(t);
            let fanout = if spec.dimm_fanout > 0 {
                (0..spec.dimm_fanout as u64).map(|k| (t as u64 + k) % dimms).collect()
            } else {
                Vec::new()
            };
            let start = match (spec.pattern, spec.thread_region_policy) {
                (Pattern::Sequential, RegionPolicy::Shared) => {
                    let step = len / spec.threads as u64;
                    (t as u64 * step) - (t as u64 * step) % spec.access_bytes
                }
                // private sequential streams begin on distinct DIMMs
                (Pattern::Sequential, RegionPolicy::Private) if dimms > 1 => {
                    let at = (base / topo.interleave_bytes) % dimms;
                    let shift = (t as u64 % dimms + dimms - at) % dimms * topo.interleave_bytes;
                    if shift + spec.access_bytes <= len { shift - shift % spec.access_bytes } else { 0 }
                }
                _ => 0,
            };
            ThreadStream {
                spec: spec.clone(),
                thread: t as ThreadId,
                base,
                len,
                rng: ChaCha8Rng::seed_from_u64(split_seed(seed, t as u64)),
                produced: 0,
                cursor: start,
                bytes_since_fence: 0,
                fanout,
                interleave: topo.interleave_bytes,
                dimms,
            }
        })
        .collect())
}

/// Mixed read/write stream: each access is a load with probability
/// `read_fraction`, otherwise a write with the spec's instruction sequence.
pub fn mixed_rw_stream(
    read_fraction: f64,
    spec: &WorkloadSpec,
    topo: &PlatformTopology,
    seed: u64,
) -> Result<Vec<ThreadStream>> {
    let mut s = spec.clone();
    s.read_fraction = read_fraction;
    if s.instr == Instr::Load && read_fraction < 1.0 {
        s.instr = Instr::StoreClwbSfence;
    }
    if read_fraction >= 1.0 {
        s.instr = Instr::Load;
    }
    generate(&s, topo, seed)
}

/// XPBuffer capacity probe: each round writes the first 128 B half of every
/// XPLine in the region, then the second half of each, with non-temporal
/// stores and a fence after every half. The first access of each round
/// carries a round marker.
pub fn xpbuffer_probe_rounds(n_lines: u64, region_base: u64, rounds: u32) -> Vec<Access> {
    let mut out = Vec::new();
    let half = XPLINE_BYTES / 2;
    for r in 0..rounds {
        for h in 0..2u64 {
            for l in 0..n_lines {
                let a = region_base + l * XPLINE_BYTES + h * half;
                let data = ((r as u64) << 32) | (l << 1) | h;
                let ops = vec![
                    MemoryOp::new(OpKind::NtStore, 0, a, 64).with_data(data),
                    MemoryOp::new(OpKind::NtStore, 0, a + 64, 64).with_data(data),
                    MemoryOp::fence(0),
                ];
                let marker = (h == 0 && l == 0).then_some(r);
                out.push(Access { ops, timed_from: 0, payload_bytes: half, delay_ns: 0, marker, is_read: false });
            }
        }
    }
    out.push(Access {
        ops: vec![MemoryOp::fence(0)],
        timed_from: 0,
        payload_bytes: 0,
        delay_ns: 0,
        marker: Some(rounds),
        is_read: false,
    });
    out
}

/// Trace text: one op per line, `index,thread,kind,addr,size`.
pub fn dump_trace<'a>(ops: impl IntoIterator<Item = &'a MemoryOp>) -> String {
    let mut s = String::from("# index,thread,kind,addr,size\n");
    for (i, op) in ops.into_iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{:#x},{}", i, op.thread, op.kind.as_str(), op.addr, op.size);
    }
    s
}

/// A parsed trace line. `kind` is kept as text so device-level kinds
/// (`READ64`, `WRITE64`) round-trip alongside instruction kinds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub index: u64,
    pub thread: ThreadId,
    pub kind: String,
    pub addr: u64,
    pub size: u32,
}

pub fn parse_trace(reader: impl BufRead) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = n + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let err = |msg: &str| SimError::Parse { line: line_no, msg: format!("{msg}: `{t}`") };
        let f: Vec<&str> = t.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(err("expected 5 comma-separated fields"));
        }
        let index = f[0].parse().map_err(|_| err("bad index"))?;
        let thread = f[1].parse().map_err(|_| err("bad thread"))?;
        let kind = f[2].to_ascii_uppercase();
        if OpKind::parse(&kind).is_none() && kind != "READ64" && kind != "WRITE64" {
            return Err(err("unknown op kind"));
        }
        let hex = f[3].strip_prefix("0x").or_else(|| f[3].strip_prefix("0X")).ok_or_else(|| err("address must be hex"))?;
        let addr = u64::from_str_radix(hex, 16).map_err(|_| err("bad address"))?;
        let size = f[4].parse().map_err(|_| err("bad size"))?;
        out.push(TraceRecord { index, thread, kind, addr, size });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn topo() -> PlatformTopology {
        PlatformTopology::default()
    }

    fn spec() -> WorkloadSpec {
        WorkloadSpec::default()
    }

    fn first_thread(s: &WorkloadSpec, seed: u64) -> Vec<Access> {
        generate(s, &topo(), seed).unwrap().remove(0).collect()
    }

    #[test]
    fn sequential_addresses() {
        let s = WorkloadSpec { access_bytes: 64, ops_per_thread: 4, instr: Instr::Load, ..spec() };
        let addrs: Vec<u64> = first_thread(&s, 0).iter().map(|a| a.ops[0].addr).collect();
        assert_eq!(addrs, vec![0, 64, 128, 192]);
    }

    #[test]
    fn clwb_per_line_expansion() {
        let s = WorkloadSpec { access_bytes: 256, instr: Instr::StoreClwbSfence, ops_per_thread: 1, ..spec() };
        let a = &first_thread(&s, 0)[0];
        let kinds: Vec<OpKind> = a.ops.iter().map(|o| o.kind).collect();
        let mut want = Vec::new();
        for _ in 0..4 {
            want.extend([OpKind::Store, OpKind::Clwb]);
        }
        want.push(OpKind::Sfence);
        assert_eq!(kinds, want);
    }

    #[test]
    fn hotspot_stays_inside() {
        let s = WorkloadSpec {
            pattern: Pattern::Hotspot,
            hotspot_bytes: 4096,
            access_bytes: 64,
            ops_per_thread: 1_000_000,
            ..spec()
        };
        for a in generate(&s, &topo(), 1).unwrap().remove(0) {
            assert!(a.ops[0].addr < 4096);
        }
    }

    #[test]
    fn mixed_fractions() {
        let base = WorkloadSpec { ops_per_thread: 1000, ..spec() };
        let all = |f: f64| -> Vec<bool> {
            mixed_rw_stream(f, &base, &topo(), 5).unwrap().remove(0).map(|a| a.is_read).collect()
        };
        assert!(all(1.0).iter().all(|&r| r));
        assert!(all(0.0).iter().all(|&r| !r));
        let s = WorkloadSpec { ops_per_thread: 1_000_000, access_bytes: 64, ..spec() };
        let reads = mixed_rw_stream(0.5, &s, &topo(), 9).unwrap().remove(0).filter(|a| a.is_read).count();
        let frac = reads as f64 / 1e6;
        // binomial sd at n=1e6 is 5e-4; 0.2 % is four sigma
        assert!((frac - 0.5).abs() < 0.002, "{frac}");
    }

    #[test]
    fn byte_totals_and_line_bounds() {
        for (bytes, instr) in [(8, Instr::StoreSfence), (72, Instr::NtstoreSfence), (1000, Instr::StoreClwbSfence), (4096, Instr::Load)] {
            let s = WorkloadSpec { access_bytes: bytes, instr, ops_per_thread: 50, pattern: Pattern::RandomUniform, ..spec() };
            let mut total = 0u64;
            for a in first_thread(&s, 3) {
                for op in a.timed_ops() {
                    op.validate().unwrap();
                    if op.kind.carries_payload() {
                        total += op.size as u64;
                    }
                }
            }
            assert_eq!(total, 50 * bytes);
        }
    }

    #[test]
    fn private_regions_are_disjoint() {
        let s = WorkloadSpec {
            threads: 5,
            pattern: Pattern::RandomUniform,
            ops_per_thread: 2000,
            ..spec()
        };
        let sets: Vec<HashSet<u64>> = generate(&s, &topo(), 2)
            .unwrap()
            .into_iter()
            .map(|st| st.flat_map(|a| a.ops.into_iter().map(|o| o.addr)).filter(|&a| a != 0 || true).collect())
            .collect();
        for t in 0..5 {
            let (b, l) = s.thread_region(t);
            for u in t + 1..5 {
                let (b2, l2) = s.thread_region(u);
                assert!(b + l <= b2 || b2 + l2 <= b);
            }
            for &a in sets[t].iter().filter(|&&a| a != 0) {
                assert!(a >= b && a < b + l);
            }
        }
    }

    #[test]
    fn fanout_restricts_dimms() {
        let t = topo();
        let s = WorkloadSpec {
            threads: 6,
            pattern: Pattern::RandomUniform,
            thread_region_policy: RegionPolicy::Shared,
            dimm_fanout: 2,
            ops_per_thread: 500,
            ..spec()
        };
        for (i, st) in generate(&s, &t, 4).unwrap().into_iter().enumerate() {
            let allowed: HashSet<usize> = [i % 6, (i + 1) % 6].into();
            for a in st {
                let loc = t.decode_address(a.ops[0].addr).unwrap();
                assert!(allowed.contains(&t.slot_of(&loc)));
            }
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let s = WorkloadSpec { pattern: Pattern::RandomUniform, ops_per_thread: 100, ..spec() };
        assert_eq!(first_thread(&s, 8), first_thread(&s, 8));
        assert_ne!(first_thread(&s, 8), first_thread(&s, 9));
    }

    #[test]
    fn validation_errors() {
        let t = topo();
        assert!(WorkloadSpec { access_bytes: 12, ..spec() }.validate(&t).is_err());
        assert!(WorkloadSpec { read_fraction: 1.5, ..spec() }.validate(&t).is_err());
        assert!(WorkloadSpec { dimm_fanout: 7, ..spec() }.validate(&t).is_err());
        assert!(WorkloadSpec { region_length: t.capacity() + 1, ..spec() }.validate(&t).is_err());
    }

    #[test]
    fn probe_round_shape() {
        let p = xpbuffer_probe_rounds(1, 0, 1);
        assert_eq!(p.len(), 3);
        assert_eq!(p[0].ops[0].addr, 0);
        assert_eq!(p[1].ops[0].addr, 128);
        assert_eq!(p[0].marker, Some(0));
    }

    #[test]
    fn trace_round_trip_and_errors() {
        let s = WorkloadSpec { instr: Instr::StoreClwbSfence, ops_per_thread: 3, ..spec() };
        let ops: Vec<MemoryOp> = first_thread(&s, 0).into_iter().flat_map(|a| a.ops).collect();
        let text = dump_trace(&ops);
        let recs = parse_trace(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), ops.len());
        assert_eq!(recs[1].kind, "CLWB");
        let bad = "0,0,STORE,0x40,64\n1,0,BOGUS,0x0,8\n";
        match parse_trace(bad.as_bytes()) {
            Err(SimError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
