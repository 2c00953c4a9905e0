//! 3D XPoint DIMM: XPController with an XPBuffer in front of 256 B media.
//!
//! The XPBuffer holds XPLines indexed by `xpline % sets` with LRU inside a
//! set. A line whose four 64 B sublines are all dirty and valid is written
//! back to media at once and stays resident clean. A dirty line evicted
//! while only partly valid costs a media read first (read-modify-write).
//! Lines fetched for reads alone sit in a small fully associative pool
//! beside the sets and move into a set when written. All media operations
//! serialize on one media timeline; buffer hits are pipelined.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{merge_masked, DeviceCounters, LineData};
use crate::error::{Result, SimError};
use crate::topology::XPLINE_BYTES;

#[derive(Debug, Clone, PartialEq)]
pub struct XpConfig {
    pub xpbuffer_lines: usize,
    pub xpbuffer_sets: usize,
    /// Lines held for reads outside the sets; 0 makes reads allocate in the sets.
    pub read_pool_lines: usize,
    /// Latency from media-read start to data available.
    pub media_read_ns: u64,
    /// Media occupancy of one 256 B read.
    pub media_read_occupancy_ns: u64,
    /// Media occupancy of one 256 B write.
    pub media_write_occupancy_ns: u64,
    pub buffer_hit_ns: u64,
    /// Time for the controller to take one 64 B write into the XPBuffer.
    pub write_accept_ns: u64,
    pub outlier_prob: f64,
    pub outlier_min_ns: u64,
    pub outlier_max_ns: u64,
}

impl Default for XpConfig {
    fn default() -> Self {
        XpConfig {
            xpbuffer_lines: 64,
            xpbuffer_sets: 16,
            read_pool_lines: 64,
            media_read_ns: 243,
            media_read_occupancy_ns: 39,
            media_write_occupancy_ns: 95,
            buffer_hit_ns: 62,
            write_accept_ns: 20,
            outlier_prob: 6e-5,
            outlier_min_ns: 50_000,
            outlier_max_ns: 100_000,
        }
    }
}

impl XpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.xpbuffer_lines == 0 {
            return Err(SimError::validation("xp.xpbuffer_lines", "must be at least 1"));
        }
        if self.sets() == 0 || self.xpbuffer_lines % self.sets() != 0 {
            return Err(SimError::validation(
                "xp.xpbuffer_sets",
                "xpbuffer_lines must be a multiple of the set count",
            ));
        }
        if !(0.0..=1.0).contains(&self.outlier_prob) {
            return Err(SimError::validation("xp.outlier_prob", "must lie in [0, 1]"));
        }
        if self.outlier_min_ns > self.outlier_max_ns {
            return Err(SimError::validation("xp.outlier_min_ns", "exceeds outlier_max_ns"));
        }
        Ok(())
    }

    /// Sets actually used: a buffer smaller than the set count degrades to
    /// one way per line.
    pub fn sets(&self) -> usize {
        self.xpbuffer_sets.min(self.xpbuffer_lines)
    }

    pub fn ways(&self) -> usize {
        self.xpbuffer_lines / self.sets().max(1)
    }
}

#[derive(Debug, Clone)]
struct Slot {
    xpline: u64,
    /// Whole line fetched from media since allocation.
    fetched: bool,
    /// Sublines that received a full 64 B write since allocation.
    full_written: u8,
    /// Sublines written since the last media write-back.
    dirty: u8,
    /// Bytes written since allocation, per subline.
    written: [u64; 4],
    stamp: u64,
    ready_at: u64,
    data: [u8; 256],
}

impl Slot {
    fn subline_valid(&self, sub: usize) -> bool {
        self.fetched || self.full_written >> sub & 1 == 1
    }

    fn line_valid(&self) -> bool {
        self.fetched || self.full_written == 0xF
    }
}

#[derive(Debug, Clone)]
struct PoolLine {
    xpline: u64,
    stamp: u64,
    ready_at: u64,
    data: [u8; 256],
}

#[derive(Debug, Clone)]
pub struct XpDimm {
    cfg: XpConfig,
    ways: usize,
    sets: usize,
    slots: Vec<Option<Slot>>,
    pool: Vec<PoolLine>,
    stamp: u64,
    media_free: u64,
    /// XPLines held by an outlier remap, with release time.
    locks: HashMap<u64, u64>,
    rng: ChaCha8Rng,
    media: Option<HashMap<u64, Box<[u8; 256]>>>,
    pub counters: DeviceCounters,
}

impl XpDimm {
    pub fn new(cfg: XpConfig, seed: u64, track_data: bool) -> Self {
        let sets = cfg.sets();
        let ways = cfg.ways();
        XpDimm {
            slots: vec![None; sets * ways],
            pool: Vec::with_capacity(cfg.read_pool_lines),
            cfg,
            ways,
            sets,
            stamp: 0,
            media_free: 0,
            locks: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            media: track_data.then(HashMap::new),
            counters: DeviceCounters::default(),
        }
    }

    pub fn config(&self) -> &XpConfig {
        &self.cfg
    }

    fn check(offset: u64) -> Result<()> {
        if offset % 64 != 0 {
            return Err(SimError::Contract(format!("unaligned XP DIMM access at {offset:#x}")));
        }
        Ok(())
    }

    fn set_range(&self, xpline: u64) -> std::ops::Range<usize> {
        let set = (xpline % self.sets as u64) as usize;
        set * self.ways..(set + 1) * self.ways
    }

    fn lookup(&self, xpline: u64) -> Option<usize> {
        self.set_range(xpline)
            .find(|&i| self.slots[i].as_ref().is_some_and(|s| s.xpline == xpline))
    }

    fn touch(&mut self, idx: usize) {
        self.stamp += 1;
        if let Some(s) = self.slots[idx].as_mut() {
            s.stamp = self.stamp;
        }
    }

    fn media_bytes(&self, xpline: u64) -> [u8; 256] {
        self.media
            .as_ref()
            .and_then(|m| m.get(&xpline))
            .map(|b| **b)
            .unwrap_or([0; 256])
    }

    /// Reserve the media for one 256 B read starting no earlier than `t`.
    /// Returns the start time.
    fn media_read(&mut self, t: u64) -> u64 {
        let start = t.max(self.media_free);
        self.media_free = start + self.cfg.media_read_occupancy_ns;
        self.counters.media_read_bytes += XPLINE_BYTES;
        start
    }

    /// An outlier holds only the written XPLine; later accesses to it wait.
    fn media_write(&mut self, xpline: u64, t: u64) -> u64 {
        let start = t.max(self.media_free);
        self.media_free = start + self.cfg.media_write_occupancy_ns;
        if self.cfg.outlier_prob > 0.0 && self.rng.gen_bool(self.cfg.outlier_prob) {
            let stall = self.rng.gen_range(self.cfg.outlier_min_ns..=self.cfg.outlier_max_ns);
            if self.locks.len() >= 64 {
                self.locks.retain(|_, &mut until| until > start);
            }
            let until = self.locks.get(&xpline).copied().unwrap_or(0).max(self.media_free + stall);
            self.locks.insert(xpline, until);
            self.counters.outliers += 1;
        }
        self.counters.media_write_bytes += XPLINE_BYTES;
        start
    }

    /// Fill the non-written bytes of a slot from media.
    fn fetch_into(&mut self, idx: usize, t: u64) -> u64 {
        let start = self.media_read(t);
        let ready = start + self.cfg.media_read_ns;
        let xpline = self.slots[idx].as_ref().unwrap().xpline;
        let media = self.media.is_some().then(|| self.media_bytes(xpline));
        let s = self.slots[idx].as_mut().unwrap();
        if let Some(media) = media {
            for sub in 0..4 {
                let mask = !s.written[sub];
                merge_masked(&mut s.data[sub * 64..sub * 64 + 64], &media[sub * 64..sub * 64 + 64], mask);
            }
        }
        s.fetched = true;
        s.ready_at = s.ready_at.max(ready);
        ready
    }

    /// Write a slot back to media (fetching first if it is not fully valid).
    /// Returns the time the media write starts.
    fn write_back(&mut self, idx: usize, t: u64) -> u64 {
        let valid = self.slots[idx].as_ref().unwrap().line_valid();
        let mut t = t;
        if !valid {
            self.fetch_into(idx, t);
            t = self.media_free;
        }
        let xpline = self.slots[idx].as_ref().unwrap().xpline;
        let start = self.media_write(xpline, t);
        let s = self.slots[idx].as_mut().unwrap();
        s.dirty = 0;
        let (xpline, data) = (s.xpline, s.data);
        if let Some(m) = self.media.as_mut() {
            m.insert(xpline, Box::new(data));
        }
        start
    }

    /// Find a slot for `xpline`, evicting the set's LRU way if needed.
    /// Returns the slot index and the earliest time it can be used.
    fn allocate(&mut self, xpline: u64, t: u64) -> (usize, u64) {
        let range = self.set_range(xpline);
        let victim = range
            .clone()
            .find(|&i| self.slots[i].is_none())
            .unwrap_or_else(|| {
                range
                    .min_by_key(|&i| self.slots[i].as_ref().map_or(0, |s| s.stamp))
                    .unwrap()
            });
        let mut ready = t;
        if self.slots[victim].as_ref().is_some_and(|s| s.dirty != 0) {
            ready = self.write_back(victim, t);
        }
        let pooled = self.pool.iter().position(|p| p.xpline == xpline).map(|i| self.pool.swap_remove(i));
        self.slots[victim] = Some(Slot {
            xpline,
            fetched: pooled.is_some(),
            full_written: 0,
            dirty: 0,
            written: [0; 4],
            stamp: 0,
            ready_at: pooled.as_ref().map_or(ready, |p| p.ready_at.max(ready)),
            data: pooled.map_or([0; 256], |p| p.data),
        });
        self.touch(victim);
        (victim, ready)
    }

    /// Read through the pool; the caller has checked the sets.
    fn pool_read(&mut self, xpline: u64, now: u64) -> (u64, [u8; 256]) {
        self.stamp += 1;
        let stamp = self.stamp;
        if let Some(p) = self.pool.iter_mut().find(|p| p.xpline == xpline) {
            p.stamp = stamp;
            return ((now + self.cfg.buffer_hit_ns).max(p.ready_at), p.data);
        }
        let start = self.media_read(now);
        let ready = start + self.cfg.media_read_ns;
        let data = self.media_bytes(xpline);
        let line = PoolLine { xpline, stamp, ready_at: ready, data };
        if self.pool.len() < self.cfg.read_pool_lines {
            self.pool.push(line);
        } else {
            let lru = (0..self.pool.len()).min_by_key(|&i| self.pool[i].stamp).unwrap();
            self.pool[lru] = line;
        }
        (ready, data)
    }

    fn gate(&self, xpline: u64, now: u64) -> u64 {
        self.locks.get(&xpline).map_or(now, |&until| until.max(now))
    }

    pub fn read64(&mut self, offset: u64, now: u64) -> Result<(u64, LineData)> {
        Self::check(offset)?;
        self.counters.imc_read_bytes += 64;
        let xpline = offset / XPLINE_BYTES;
        let now = self.gate(xpline, now);
        let sub = ((offset % XPLINE_BYTES) / 64) as usize;
        let (idx, done) = match self.lookup(xpline) {
            Some(idx) if self.slots[idx].as_ref().unwrap().subline_valid(sub) => {
                let ready = self.slots[idx].as_ref().unwrap().ready_at;
                (idx, (now + self.cfg.buffer_hit_ns).max(ready))
            }
            Some(idx) => (idx, self.fetch_into(idx, now)),
            None if self.cfg.read_pool_lines > 0 => {
                let (done, line) = self.pool_read(xpline, now);
                let mut out = [0u8; 64];
                out.copy_from_slice(&line[sub * 64..sub * 64 + 64]);
                return Ok((done, out));
            }
            None => {
                let (idx, t) = self.allocate(xpline, now);
                (idx, self.fetch_into(idx, t))
            }
        };
        self.touch(idx);
        let mut out = [0u8; 64];
        out.copy_from_slice(&self.slots[idx].as_ref().unwrap().data[sub * 64..sub * 64 + 64]);
        Ok((done, out))
    }

    pub fn write64(&mut self, offset: u64, data: &LineData, mask: u64, now: u64) -> Result<u64> {
        Self::check(offset)?;
        self.counters.imc_write_bytes += 64;
        let xpline = offset / XPLINE_BYTES;
        let now = self.gate(xpline, now);
        let sub = ((offset % XPLINE_BYTES) / 64) as usize;
        let (idx, mut t) = match self.lookup(xpline) {
            Some(idx) => (idx, now),
            None => self.allocate(xpline, now),
        };
        t = t.max(now);
        self.touch(idx);
        let s = self.slots[idx].as_mut().unwrap();
        merge_masked(&mut s.data[sub * 64..sub * 64 + 64], data, mask);
        s.written[sub] |= mask;
        if mask == u64::MAX {
            s.full_written |= 1 << sub;
        }
        s.dirty |= 1 << sub;
        if s.dirty == 0xF && s.line_valid() {
            t = self.write_back(idx, t);
        }
        Ok(t + self.cfg.write_accept_ns)
    }

    /// Write back every dirty slot. Returns when the media goes idle.
    pub fn flush_all(&mut self, now: u64) -> u64 {
        let mut dirty: Vec<usize> = (0..self.slots.len())
            .filter(|&i| self.slots[i].as_ref().is_some_and(|s| s.dirty != 0))
            .collect();
        dirty.sort_by_key(|&i| self.slots[i].as_ref().unwrap().stamp);
        for idx in dirty {
            self.write_back(idx, now);
        }
        self.media_free.max(now)
    }

    /// Media contents overlaid with the XPBuffer's written bytes; the whole
    /// buffer lies inside the persistence domain.
    pub fn persistent_lines(&self) -> BTreeMap<u64, LineData> {
        let mut out: BTreeMap<u64, LineData> = BTreeMap::new();
        if let Some(m) = &self.media {
            for (&xl, bytes) in m {
                for sub in 0..4 {
                    let mut l = [0u8; 64];
                    l.copy_from_slice(&bytes[sub * 64..sub * 64 + 64]);
                    out.insert(xl * XPLINE_BYTES + sub as u64 * 64, l);
                }
            }
        }
        for s in self.slots.iter().flatten() {
            for sub in 0..4 {
                if s.written[sub] == 0 {
                    continue;
                }
                let key = s.xpline * XPLINE_BYTES + sub as u64 * 64;
                let line = out.entry(key).or_insert([0; 64]);
                merge_masked(line, &s.data[sub * 64..sub * 64 + 64], s.written[sub]);
            }
        }
        out
    }

    pub fn resident_lines(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    pub fn pooled_lines(&self) -> usize {
        self.pool.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dimm(cfg: XpConfig) -> XpDimm {
        XpDimm::new(cfg, 1, true)
    }

    fn quiet() -> XpConfig {
        XpConfig { outlier_prob: 0.0, ..XpConfig::default() }
    }

    const FULL: u64 = u64::MAX;

    #[test]
    fn full_xpline_then_eviction_has_unit_ewr() {
        let mut d = dimm(quiet());
        for i in 0..4 {
            d.write64(i * 64, &[1; 64], FULL, 0).unwrap();
        }
        d.flush_all(0);
        assert_eq!(d.counters.imc_write_bytes, 256);
        assert_eq!(d.counters.media_write_bytes, 256);
        assert_eq!(d.counters.media_read_bytes, 0);
        assert_eq!(d.counters.ewr(), Some(1.0));
    }

    #[test]
    fn single_small_write_is_amplified() {
        let mut d = dimm(quiet());
        d.write64(4096, &[1; 64], FULL, 0).unwrap();
        d.flush_all(0);
        assert_eq!(d.counters.imc_write_bytes, 64);
        assert_eq!(d.counters.media_write_bytes, 256);
        assert_eq!(d.counters.media_read_bytes, 256);
        assert_eq!(d.counters.ewr(), Some(0.25));
    }

    #[test]
    fn overwrites_combine_in_buffer() {
        let mut d = dimm(quiet());
        for v in 0..8u8 {
            d.write64(128, &[v; 64], FULL, 0).unwrap();
        }
        d.flush_all(0);
        assert_eq!(d.counters.imc_write_bytes, 512);
        assert_eq!(d.counters.media_write_bytes, 256);
        assert_eq!(d.counters.ewr(), Some(2.0));
    }

    #[test]
    fn buffered_read_hit_has_no_media_traffic() {
        let cfg = quiet();
        let mut d = dimm(cfg.clone());
        let (t0, _) = d.read64(0, 0).unwrap();
        assert_eq!(t0, cfg.media_read_ns);
        let before = d.counters;
        let (t1, _) = d.read64(64, 1000).unwrap();
        assert_eq!(t1, 1000 + cfg.buffer_hit_ns);
        assert_eq!(d.counters.media_read_bytes, before.media_read_bytes);
        assert_eq!(d.counters.media_write_bytes, 0);
    }

    #[test]
    fn read_returns_latest_write() {
        let mut d = dimm(quiet());
        d.write64(64, &[7; 64], FULL, 0).unwrap();
        assert_eq!(d.read64(64, 10).unwrap().1, [7; 64]);
        // evict everything in that set by writing same-set lines
        let sets = d.cfg.sets() as u64;
        for k in 1..=8 {
            d.write64(k * sets * 256, &[1; 64], FULL, 20).unwrap();
        }
        assert!(d.lookup(0).is_none());
        assert_eq!(d.read64(64, 100).unwrap().1, [7; 64]);
        assert_eq!(d.read64(0, 100).unwrap().1, [0; 64]);
    }

    #[test]
    fn read_pool_is_separate_and_feeds_writes() {
        let mut d = dimm(quiet());
        d.write64(0, &[3; 64], FULL, 0).unwrap();
        d.flush_all(0);
        for k in 0..64u64 {
            d.read64(k * 256 + 4096, 0).unwrap();
        }
        assert_eq!(d.pooled_lines(), 64);
        // the written line is still resident in its set
        assert!(d.lookup(0).is_some());
        // writing a pooled line needs no media read on write-back
        let reads = d.counters.media_read_bytes;
        d.write64(4096 + 64 * 256 - 256, &[1; 64], FULL, 0).unwrap();
        d.flush_all(0);
        assert_eq!(d.counters.media_read_bytes, reads);
    }

    #[test]
    fn partial_mask_write_merges() {
        let mut d = dimm(quiet());
        d.write64(0, &[9; 64], FULL, 0).unwrap();
        d.flush_all(0);
        let mut data = [0u8; 64];
        data[..8].copy_from_slice(&[5; 8]);
        d.write64(0, &data, 0xFF, 0).unwrap();
        let line = d.read64(0, 10).unwrap().1;
        assert_eq!(&line[..8], &[5; 8]);
        assert_eq!(&line[8..], &[9; 56]);
    }

    #[test]
    fn unaligned_is_contract_violation() {
        let mut d = dimm(quiet());
        assert!(matches!(d.read64(3, 0), Err(SimError::Contract(_))));
        assert!(matches!(d.write64(32, &[0; 64], FULL, 0), Err(SimError::Contract(_))));
    }

    #[test]
    fn sequential_writes_are_media_bound() {
        let cfg = quiet();
        let mut d = dimm(cfg.clone());
        let mut t = 0;
        for i in 0..4000u64 {
            t = d.write64(i * 64, &[0; 64], FULL, t).unwrap();
        }
        let per_line = t as f64 / 1000.0;
        assert!((per_line - cfg.media_write_occupancy_ns as f64).abs() < 1.0, "{per_line}");
    }

    #[test]
    fn outliers_stall_media() {
        let cfg = XpConfig { outlier_prob: 1.0, ..XpConfig::default() };
        let mut d = dimm(cfg);
        let mut t = 0;
        for i in 0..8u64 {
            t = d.write64(i * 64, &[0; 64], FULL, t).unwrap();
        }
        assert_eq!(d.counters.outliers, 2);
        // other lines are not held up
        assert!(t < 1_000, "{t}");
        t = d.write64(0, &[0; 64], FULL, t).unwrap();
        assert!(t >= 50_000);
    }
}
