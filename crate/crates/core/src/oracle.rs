//! Reference replay of device-level traces.
//!
//! Computes DIMM byte counters with no timing: a flat map of buffered
//! XPLines, per-set LRU lists and an LRU read pool. Kept deliberately
//! separate from the device model so the two can be checked against each
//! other.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::devices::{DeviceCounters, XpConfig};
use crate::error::{Result, SimError};
use crate::topology::PlatformTopology;
use crate::workload::TraceRecord;

#[derive(Debug, Clone, Default)]
struct Line {
    fetched: bool,
    /// Sublines that received a full 64 B write.
    full: [bool; 4],
    dirty: [bool; 4],
}

impl Line {
    fn valid(&self, sub: usize) -> bool {
        self.fetched || self.full[sub]
    }

    fn all_valid(&self) -> bool {
        self.fetched || self.full.iter().all(|&f| f)
    }
}

#[derive(Debug, Clone)]
struct Dimm {
    sets: usize,
    ways: usize,
    pool_cap: usize,
    lines: HashMap<u64, Line>,
    /// Per set: most recently used at the back.
    lru: Vec<VecDeque<u64>>,
    pool: VecDeque<u64>,
    c: DeviceCounters,
}

impl Dimm {
    fn new(cfg: &XpConfig) -> Self {
        let sets = cfg.xpbuffer_sets.min(cfg.xpbuffer_lines).max(1);
        Dimm {
            sets,
            ways: cfg.xpbuffer_lines / sets,
            pool_cap: cfg.read_pool_lines,
            lines: HashMap::new(),
            lru: vec![VecDeque::new(); sets],
            pool: VecDeque::new(),
            c: DeviceCounters::default(),
        }
    }

    fn set(&self, x: u64) -> usize {
        (x % self.sets as u64) as usize
    }

    fn touch(&mut self, x: u64) {
        let s = self.set(x);
        let q = &mut self.lru[s];
        if let Some(i) = q.iter().position(|&y| y == x) {
            q.remove(i);
        }
        q.push_back(x);
    }

    fn write_back(&mut self, x: u64) {
        let l = self.lines.get_mut(&x).unwrap();
        if !l.all_valid() {
            l.fetched = true;
            self.c.media_read_bytes += 256;
        }
        l.dirty = [false; 4];
        self.c.media_write_bytes += 256;
    }

    fn insert(&mut self, x: u64) {
        let s = self.set(x);
        if self.lru[s].len() == self.ways {
            let victim = self.lru[s].pop_front().unwrap();
            if self.lines[&victim].dirty.iter().any(|&d| d) {
                self.write_back(victim);
            }
            self.lines.remove(&victim);
        }
        let mut line = Line::default();
        if let Some(i) = self.pool.iter().position(|&y| y == x) {
            self.pool.remove(i);
            line.fetched = true;
        }
        self.lines.insert(x, line);
        self.lru[s].push_back(x);
    }

    fn read(&mut self, offset: u64) {
        self.c.imc_read_bytes += 64;
        let (x, sub) = (offset / 256, (offset % 256 / 64) as usize);
        if let Some(l) = self.lines.get_mut(&x) {
            if !l.valid(sub) {
                l.fetched = true;
                self.c.media_read_bytes += 256;
            }
            self.touch(x);
            return;
        }
        if self.pool_cap > 0 {
            if let Some(i) = self.pool.iter().position(|&y| y == x) {
                self.pool.remove(i);
            } else {
                self.c.media_read_bytes += 256;
                if self.pool.len() == self.pool_cap {
                    self.pool.pop_front();
                }
            }
            self.pool.push_back(x);
            return;
        }
        self.insert(x);
        self.lines.get_mut(&x).unwrap().fetched = true;
        self.c.media_read_bytes += 256;
    }

    fn write(&mut self, offset: u64, bytes: u32) {
        self.c.imc_write_bytes += 64;
        let (x, sub) = (offset / 256, (offset % 256 / 64) as usize);
        if self.lines.contains_key(&x) {
            self.touch(x);
        } else {
            self.insert(x);
        }
        let l = self.lines.get_mut(&x).unwrap();
        if bytes >= 64 {
            l.full[sub] = true;
        }
        l.dirty[sub] = true;
        if l.dirty.iter().all(|&d| d) && l.all_valid() {
            self.write_back(x);
        }
    }

    fn flush(&mut self) {
        let dirty: Vec<u64> = self
            .lines
            .iter()
            .filter(|(_, l)| l.dirty.iter().any(|&d| d))
            .map(|(&x, _)| x)
            .collect();
        for x in dirty {
            self.write_back(x);
        }
    }
}

/// Replay a device-level trace and return per-DIMM counters keyed by
/// namespace slot, after a final flush of every buffered line.
///
/// `READ64`/`LOAD` lines are 64 B reads; `WRITE64`/`NTSTORE` lines are
/// writes of `size` bytes within one 64 B line. Addresses are namespace
/// addresses decoded through `topo`.
pub fn replay(records: &[TraceRecord], topo: &PlatformTopology, cfg: &XpConfig) -> Result<BTreeMap<usize, DeviceCounters>> {
    cfg.validate()?;
    let mut dimms: BTreeMap<usize, Dimm> = topo.namespace_slots().into_iter().map(|s| (s, Dimm::new(cfg))).collect();
    for r in records {
        let loc = topo.decode_address(r.addr)?;
        let slot = topo.slot_of(&loc);
        let d = dimms
            .get_mut(&slot)
            .ok_or_else(|| SimError::InvalidLocation(format!("slot {slot} outside namespace")))?;
        let off = loc.offset & !63;
        if (loc.offset % 64) as u32 + r.size > 64 {
            return Err(SimError::Parse { line: r.index as usize, msg: format!("access crosses a 64 B line at {:#x}", r.addr) });
        }
        match r.kind.to_ascii_uppercase().as_str() {
            "READ64" | "LOAD" => d.read(off),
            "WRITE64" | "NTSTORE" => d.write(off, r.size),
            k => return Err(SimError::Parse { line: r.index as usize, msg: format!("unsupported kind `{k}`") }),
        }
    }
    Ok(dimms
        .into_iter()
        .map(|(s, mut d)| {
            d.flush();
            (s, d.c)
        })
        .collect())
}

/// Sum of [`replay`] over all DIMMs.
pub fn replay_total(records: &[TraceRecord], topo: &PlatformTopology, cfg: &XpConfig) -> Result<DeviceCounters> {
    let mut total = DeviceCounters::default();
    for c in replay(records, topo, cfg)?.values() {
        total += *c;
    }
    Ok(total)
}
