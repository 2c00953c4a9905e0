//! Volatile CPU cache and the persistence-instruction semantics that decide
//! when 64 B lines leave the core toward the iMC.
//!
//! The cache is write-allocate, set-associative LRU. Set selection hashes
//! the line number (as sliced last-level caches do), so a sequential store
//! stream is evicted in a scrambled order when nothing flushes it.
//! Non-temporal stores bypass the cache through one write-combining slot per
//! thread.

use std::collections::BTreeMap;

use crate::devices::{merge_masked, LineData};
use crate::error::{Result, SimError};
use crate::rng::mix64;
use crate::topology::LINE_BYTES;

pub type ThreadId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Load,
    Store,
    NtStore,
    Clwb,
    Clflush,
    Clflushopt,
    Sfence,
}

impl OpKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OpKind::Load => "LOAD",
            OpKind::Store => "STORE",
            OpKind::NtStore => "NTSTORE",
            OpKind::Clwb => "CLWB",
            OpKind::Clflush => "CLFLUSH",
            OpKind::Clflushopt => "CLFLUSHOPT",
            OpKind::Sfence => "SFENCE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_uppercase().as_str() {
            "LOAD" => OpKind::Load,
            "STORE" => OpKind::Store,
            "NTSTORE" => OpKind::NtStore,
            "CLWB" => OpKind::Clwb,
            "CLFLUSH" => OpKind::Clflush,
            "CLFLUSHOPT" => OpKind::Clflushopt,
            // mfence only matters as an ordering barrier here
            "SFENCE" | "MFENCE" => OpKind::Sfence,
            _ => return None,
        })
    }

    pub fn is_flush(&self) -> bool {
        matches!(self, OpKind::Clwb | OpKind::Clflush | OpKind::Clflushopt)
    }

    /// Kinds that carry program payload.
    pub fn carries_payload(&self) -> bool {
        matches!(self, OpKind::Load | OpKind::Store | OpKind::NtStore)
    }
}

/// One instruction-level event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryOp {
    pub kind: OpKind,
    pub thread: ThreadId,
    pub addr: u64,
    pub size: u32,
    /// Virtual issue time; zero until the engine has executed the op.
    pub issue_time: u64,
    /// Fill pattern for stores: every 8 B word of the store holds this value.
    pub data: u64,
}

impl MemoryOp {
    pub fn new(kind: OpKind, thread: ThreadId, addr: u64, size: u32) -> Self {
        MemoryOp { kind, thread, addr, size, issue_time: 0, data: 0 }
    }

    pub fn fence(thread: ThreadId) -> Self {
        MemoryOp::new(OpKind::Sfence, thread, 0, 0)
    }

    pub fn with_data(mut self, data: u64) -> Self {
        self.data = data;
        self
    }

    pub fn line(&self) -> u64 {
        self.addr & !(LINE_BYTES - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == OpKind::Sfence {
            return if self.size == 0 {
                Ok(())
            } else {
                Err(SimError::Contract("SFENCE carries no address".into()))
            };
        }
        if self.kind.is_flush() {
            return Ok(());
        }
        let off = self.addr % LINE_BYTES;
        if self.size == 0 || self.size % 8 != 0 || self.size > 64 || off + self.size as u64 > LINE_BYTES {
            return Err(SimError::Contract(format!(
                "micro-op {} at {:#x} size {} crosses a line or is mis-sized",
                self.kind.as_str(),
                self.addr,
                self.size
            )));
        }
        Ok(())
    }

    /// Byte mask (within the line) and line-sized payload of a store.
    pub fn payload(&self) -> (u64, LineData) {
        let off = (self.addr % LINE_BYTES) as usize;
        let size = self.size as usize;
        let mask = if size == 64 { u64::MAX } else { ((1u64 << size) - 1) << off };
        let mut line = [0u8; 64];
        let word = self.data.to_le_bytes();
        for i in off..off + size {
            line[i] = word[(i - off) % 8];
        }
        (mask, line)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheConfig {
    pub capacity_bytes: u64,
    pub ways: usize,
    pub hit_ns: u64,
    /// Core-side cost of issuing a load miss or store.
    pub issue_ns: u64,
    pub ntstore_issue_ns: u64,
    pub flush_issue_ns: u64,
    pub fence_ns: u64,
    /// Extra fence cost when write-combining buffers must drain.
    pub ntstore_fence_ns: u64,
    /// Outstanding line fills per thread.
    pub load_mlp: u32,
    /// Outstanding writes (not yet accepted by a WPQ) per thread.
    pub max_outstanding_writes: u32,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            capacity_bytes: 1 << 20,
            ways: 16,
            hit_ns: 2,
            issue_ns: 1,
            ntstore_issue_ns: 2,
            flush_issue_ns: 30,
            fence_ns: 10,
            ntstore_fence_ns: 160,
            load_mlp: 10,
            max_outstanding_writes: 16,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        let lines = self.capacity_bytes / LINE_BYTES;
        if self.ways == 0 || lines == 0 || lines % self.ways as u64 != 0 {
            return Err(SimError::validation(
                "cache.capacity_bytes",
                "capacity must hold a whole number of sets of `ways` 64 B lines",
            ));
        }
        if self.load_mlp == 0 {
            return Err(SimError::validation("cache.load_mlp", "must be at least 1"));
        }
        if self.max_outstanding_writes == 0 {
            return Err(SimError::validation("cache.max_outstanding_writes", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteCause {
    Eviction,
    Flush,
    NtStore,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Downstream {
    Read { line: u64 },
    Write { line: u64, data: LineData, mask: u64, cause: WriteCause },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    /// The op retired locally after `latency`, producing downstream requests.
    Done { latency: u64, downstream: Vec<Downstream> },
    /// The op needs the line's fill to finish first; nothing changed.
    WaitFill(u64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheCounters {
    pub hits: u64,
    pub misses: u64,
    pub dirty_evictions: u64,
    pub flush_writes: u64,
    pub ntstore_line_writes: u64,
    pub downstream_write_bytes: u64,
    pub downstream_read_bytes: u64,
}

#[derive(Debug, Clone)]
struct Line {
    tag: u64,
    dirty: bool,
    filling: bool,
    write_mask: u64,
    stamp: u64,
    data: LineData,
}

#[derive(Debug, Clone)]
struct WcSlot {
    line: u64,
    mask: u64,
    data: LineData,
}

#[derive(Debug, Clone)]
pub struct CacheModel {
    cfg: CacheConfig,
    sets: usize,
    lines: Vec<Option<Line>>,
    stamp: u64,
    wc: BTreeMap<ThreadId, WcSlot>,
    nt_since_fence: BTreeMap<ThreadId, bool>,
    pending_persists: BTreeMap<ThreadId, u32>,
    pub counters: CacheCounters,
}

impl CacheModel {
    pub fn new(cfg: CacheConfig) -> Self {
        let n = (cfg.capacity_bytes / LINE_BYTES) as usize;
        CacheModel {
            sets: n / cfg.ways,
            lines: vec![None; n],
            cfg,
            stamp: 0,
            wc: BTreeMap::new(),
            nt_since_fence: BTreeMap::new(),
            pending_persists: BTreeMap::new(),
            counters: CacheCounters::default(),
        }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    fn set_range(&self, line: u64) -> std::ops::Range<usize> {
        let set = (mix64(line / LINE_BYTES) % self.sets as u64) as usize;
        set * self.cfg.ways..(set + 1) * self.cfg.ways
    }

    fn find(&self, line: u64) -> Option<usize> {
        self.set_range(line)
            .find(|&i| self.lines[i].as_ref().is_some_and(|l| l.tag == line))
    }

    fn touch(&mut self, idx: usize) {
        self.stamp += 1;
        if let Some(l) = self.lines[idx].as_mut() {
            l.stamp = self.stamp;
        }
    }

    pub fn occupancy(&self) -> usize {
        self.lines.iter().flatten().count()
    }

    pub fn is_resident(&self, addr: u64) -> bool {
        self.find(addr & !(LINE_BYTES - 1)).is_some()
    }

    pub fn is_dirty(&self, addr: u64) -> bool {
        self.find(addr & !(LINE_BYTES - 1))
            .is_some_and(|i| self.lines[i].as_ref().unwrap().dirty)
    }

    fn emit_write(&mut self, out: &mut Vec<Downstream>, line: u64, data: LineData, mask: u64, cause: WriteCause) {
        match cause {
            WriteCause::Eviction => self.counters.dirty_evictions += 1,
            WriteCause::Flush => self.counters.flush_writes += 1,
            WriteCause::NtStore => self.counters.ntstore_line_writes += 1,
        }
        self.counters.downstream_write_bytes += LINE_BYTES;
        out.push(Downstream::Write { line, data, mask, cause });
    }

    /// Install `line` as filling, evicting the set's LRU way.
    fn allocate(&mut self, line: u64, out: &mut Vec<Downstream>) -> usize {
        let range = self.set_range(line);
        let victim = range.clone().find(|&i| self.lines[i].is_none()).unwrap_or_else(|| {
            // prefer lines whose fill has completed
            range
                .min_by_key(|&i| {
                    let l = self.lines[i].as_ref().unwrap();
                    (l.filling, l.stamp)
                })
                .unwrap()
        });
        if let Some(old) = self.lines[victim].take() {
            if old.dirty {
                let mask = if old.filling { old.write_mask } else { u64::MAX };
                self.emit_write(out, old.tag, old.data, mask, WriteCause::Eviction);
            }
        }
        self.lines[victim] = Some(Line {
            tag: line,
            dirty: false,
            filling: true,
            write_mask: 0,
            stamp: 0,
            data: [0; 64],
        });
        self.touch(victim);
        self.counters.misses += 1;
        self.counters.downstream_read_bytes += LINE_BYTES;
        out.push(Downstream::Read { line });
        victim
    }

    fn flush_wc(&mut self, thread: ThreadId, out: &mut Vec<Downstream>) {
        if let Some(slot) = self.wc.remove(&thread) {
            self.emit_write(out, slot.line, slot.data, slot.mask, WriteCause::NtStore);
        }
    }

    pub fn execute(&mut self, op: &MemoryOp) -> Outcome {
        let mut out = Vec::new();
        let c = self.cfg.clone();
        let line = op.line();
        let latency = match op.kind {
            OpKind::Load => match self.find(line) {
                Some(i) if self.lines[i].as_ref().unwrap().filling => return Outcome::WaitFill(line),
                Some(i) => {
                    self.touch(i);
                    self.counters.hits += 1;
                    c.hit_ns
                }
                None => {
                    self.allocate(line, &mut out);
                    c.issue_ns
                }
            },
            OpKind::Store => {
                let (mask, data) = op.payload();
                let (idx, lat) = match self.find(line) {
                    Some(i) => {
                        self.counters.hits += 1;
                        (i, c.hit_ns)
                    }
                    None => (self.allocate(line, &mut out), c.issue_ns),
                };
                self.touch(idx);
                let l = self.lines[idx].as_mut().unwrap();
                merge_masked(&mut l.data, &data, mask);
                l.write_mask |= mask;
                l.dirty = true;
                lat
            }
            OpKind::NtStore => {
                // a cached copy is written back and dropped first
                if let Some(i) = self.find(line) {
                    if self.lines[i].as_ref().unwrap().filling {
                        return Outcome::WaitFill(line);
                    }
                    let old = self.lines[i].take().unwrap();
                    if old.dirty {
                        self.emit_write(&mut out, old.tag, old.data, u64::MAX, WriteCause::Eviction);
                    }
                }
                if self.wc.get(&op.thread).is_some_and(|s| s.line != line) {
                    self.flush_wc(op.thread, &mut out);
                }
                let (mask, data) = op.payload();
                let slot = self.wc.entry(op.thread).or_insert(WcSlot { line, mask: 0, data: [0; 64] });
                merge_masked(&mut slot.data, &data, mask);
                slot.mask |= mask;
                if slot.mask == u64::MAX {
                    self.flush_wc(op.thread, &mut out);
                }
                self.nt_since_fence.insert(op.thread, true);
                c.ntstore_issue_ns
            }
            OpKind::Clwb | OpKind::Clflush | OpKind::Clflushopt => {
                if let Some(i) = self.find(line) {
                    let l = self.lines[i].as_ref().unwrap();
                    if l.filling {
                        return Outcome::WaitFill(line);
                    }
                    if l.dirty {
                        let data = l.data;
                        self.emit_write(&mut out, line, data, u64::MAX, WriteCause::Flush);
                    }
                    if op.kind == OpKind::Clwb {
                        let l = self.lines[i].as_mut().unwrap();
                        l.dirty = false;
                        l.write_mask = 0;
                    } else {
                        self.lines[i] = None;
                    }
                }
                c.flush_issue_ns
            }
            OpKind::Sfence => {
                self.flush_wc(op.thread, &mut out);
                let nt = self.nt_since_fence.insert(op.thread, false).unwrap_or(false);
                c.fence_ns + if nt { c.ntstore_fence_ns } else { 0 }
            }
        };
        Outcome::Done { latency, downstream: out }
    }

    /// Complete an outstanding fill. Bytes stored while filling win.
    pub fn complete_fill(&mut self, line: u64, data: &LineData) {
        if let Some(i) = self.find(line) {
            let l = self.lines[i].as_mut().unwrap();
            if l.filling {
                let keep = l.data;
                l.data = *data;
                merge_masked(&mut l.data, &keep, l.write_mask);
                l.filling = false;
            }
        }
    }

    pub fn read_line(&self, addr: u64) -> Option<LineData> {
        self.find(addr & !(LINE_BYTES - 1)).map(|i| self.lines[i].as_ref().unwrap().data)
    }

    pub fn record_pending(&mut self, thread: ThreadId) {
        *self.pending_persists.entry(thread).or_insert(0) += 1;
    }

    pub fn persist_accepted(&mut self, thread: ThreadId) {
        let p = self.pending_persists.entry(thread).or_insert(0);
        debug_assert!(*p > 0);
        *p = p.saturating_sub(1);
    }

    pub fn pending(&self, thread: ThreadId) -> u32 {
        self.pending_persists.get(&thread).copied().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache() -> CacheModel {
        CacheModel::new(CacheConfig::default())
    }

    fn done(o: Outcome) -> (u64, Vec<Downstream>) {
        match o {
            Outcome::Done { latency, downstream } => (latency, downstream),
            Outcome::WaitFill(l) => panic!("unexpected wait on {l:#x}"),
        }
    }

    fn writes(d: &[Downstream]) -> usize {
        d.iter().filter(|x| matches!(x, Downstream::Write { .. })).count()
    }

    #[test]
    fn load_hit_has_no_downstream() {
        let mut c = cache();
        let (_, d) = done(c.execute(&MemoryOp::new(OpKind::Load, 0, 128, 8)));
        assert_eq!(d, vec![Downstream::Read { line: 128 }]);
        c.complete_fill(128, &[0; 64]);
        let (lat, d) = done(c.execute(&MemoryOp::new(OpKind::Load, 0, 136, 8)));
        assert_eq!(lat, c.config().hit_ns);
        assert!(d.is_empty());
    }

    #[test]
    fn store_clwb_sfence_writes_once_and_keeps_line() {
        let mut c = cache();
        let (_, d) = done(c.execute(&MemoryOp::new(OpKind::Store, 0, 0, 64).with_data(5)));
        assert_eq!(writes(&d), 0);
        c.complete_fill(0, &[0; 64]);
        let (_, d) = done(c.execute(&MemoryOp::new(OpKind::Clwb, 0, 0, 64)));
        assert_eq!(writes(&d), 1);
        if let Downstream::Write { data, .. } = &d[0] {
            assert_eq!(data[..8], 5u64.to_le_bytes());
        }
        let (_, d) = done(c.execute(&MemoryOp::fence(0)));
        assert!(d.is_empty());
        assert!(c.is_resident(0) && !c.is_dirty(0));
        let (lat, _) = done(c.execute(&MemoryOp::new(OpKind::Load, 0, 0, 8)));
        assert_eq!(lat, c.config().hit_ns);
    }

    #[test]
    fn clflush_invalidates() {
        for kind in [OpKind::Clflush, OpKind::Clflushopt] {
            let mut c = cache();
            c.execute(&MemoryOp::new(OpKind::Store, 0, 64, 8));
            c.complete_fill(64, &[0; 64]);
            let (_, d) = done(c.execute(&MemoryOp::new(kind, 0, 64, 64)));
            assert_eq!(writes(&d), 1);
            assert!(!c.is_resident(64));
            let (_, d) = done(c.execute(&MemoryOp::new(OpKind::Load, 0, 64, 8)));
            assert_eq!(d, vec![Downstream::Read { line: 64 }]);
        }
    }

    #[test]
    fn flush_of_clean_line_is_free() {
        let mut c = cache();
        c.execute(&MemoryOp::new(OpKind::Load, 0, 0, 8));
        c.complete_fill(0, &[0; 64]);
        let (_, d) = done(c.execute(&MemoryOp::new(OpKind::Clwb, 0, 0, 64)));
        assert!(d.is_empty());
        let (_, d) = done(c.execute(&MemoryOp::new(OpKind::Clflush, 0, 4096, 64)));
        assert!(d.is_empty());
    }

    #[test]
    fn flush_waits_for_fill() {
        let mut c = cache();
        c.execute(&MemoryOp::new(OpKind::Store, 0, 0, 8));
        assert_eq!(c.execute(&MemoryOp::new(OpKind::Clwb, 0, 0, 64)), Outcome::WaitFill(0));
    }

    #[test]
    fn ntstores_combine_then_emit() {
        let mut c = cache();
        let mut emitted = 0;
        for w in 0..8 {
            let (_, d) = done(c.execute(&MemoryOp::new(OpKind::NtStore, 0, w * 8, 8)));
            emitted += writes(&d);
        }
        assert_eq!(emitted, 1);
        assert!(!c.is_resident(0));
        // partial slot drains at the fence
        done(c.execute(&MemoryOp::new(OpKind::NtStore, 0, 128, 8)));
        let (lat, d) = done(c.execute(&MemoryOp::fence(0)));
        assert_eq!(writes(&d), 1);
        assert_eq!(lat, c.config().fence_ns + c.config().ntstore_fence_ns);
    }

    #[test]
    fn capacity_evictions_emit_dirty_writes() {
        let mut c = cache();
        let lines = c.config().capacity_bytes as usize / 64;
        let mut w = 0;
        for i in 0..(lines * 4) as u64 {
            let (_, d) = done(c.execute(&MemoryOp::new(OpKind::Store, 0, i * 64, 64)));
            c.complete_fill(i * 64, &[0; 64]);
            w += writes(&d);
        }
        assert!(c.occupancy() <= lines);
        assert_eq!(w as u64, c.counters.dirty_evictions);
        assert!(w >= lines * 3 - lines / 8, "{w}");
    }

    #[test]
    fn micro_op_validation() {
        assert!(MemoryOp::new(OpKind::Store, 0, 60, 8).validate().is_err());
        assert!(MemoryOp::new(OpKind::Store, 0, 56, 8).validate().is_ok());
        assert!(MemoryOp::new(OpKind::Store, 0, 0, 12).validate().is_err());
        assert!(MemoryOp::new(OpKind::Sfence, 0, 0, 8).validate().is_err());
    }
}
