//! Integrated memory controller queues.
//!
//! Each DIMM has a write pending queue (inside the persistence domain) and a
//! read pending queue. Writes that arrive while the WPQ is full, or while the
//! issuing thread already holds `per_thread_cap_bytes` in it, wait in an
//! ingress FIFO. The ingress is strictly ordered: a blocked head holds up
//! every request behind it. The WPQ drains round-robin across threads
//! (oldest entry of each thread in turn), never reordering two writes to
//! the same address.

use std::collections::{BTreeMap, VecDeque};

use crate::cache::ThreadId;
use crate::devices::{Device, LineData};
use crate::error::{Result, SimError};
use crate::topology::LINE_BYTES;

#[derive(Debug, Clone, PartialEq)]
pub struct ImcConfig {
    pub wpq_capacity_bytes: u64,
    pub per_thread_cap_bytes: u64,
    pub rpq_max_outstanding: usize,
    /// One-way traversal latency between core and iMC.
    pub traversal_ns: u64,
    /// Drain the WPQ round-robin across threads instead of strictly FIFO.
    pub round_robin_drain: bool,
    /// Shared iMC path time per 64 B XP DIMM read, summed over the iMC's
    /// DIMMs, in picoseconds. 0 disables.
    pub xp_read_slot_ps: u64,
    /// Same for writes.
    pub xp_write_slot_ps: u64,
}

impl Default for ImcConfig {
    fn default() -> Self {
        ImcConfig {
            wpq_capacity_bytes: 1024,
            per_thread_cap_bytes: 256,
            rpq_max_outstanding: 32,
            traversal_ns: 30,
            round_robin_drain: true,
            xp_read_slot_ps: 3_350,
            xp_write_slot_ps: 6_000,
        }
    }
}

impl ImcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.wpq_capacity_bytes < LINE_BYTES || self.wpq_capacity_bytes % LINE_BYTES != 0 {
            return Err(SimError::validation("imc.wpq_capacity_bytes", "must be a positive multiple of 64"));
        }
        if self.per_thread_cap_bytes < LINE_BYTES || self.per_thread_cap_bytes % LINE_BYTES != 0 {
            return Err(SimError::validation("imc.per_thread_cap_bytes", "must be a positive multiple of 64"));
        }
        if self.rpq_max_outstanding == 0 {
            return Err(SimError::validation("imc.rpq_max_outstanding", "must be at least 1"));
        }
        Ok(())
    }
}

/// A 64 B write travelling from a core to a DIMM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteRequest {
    pub id: u64,
    pub thread: ThreadId,
    pub offset: u64,
    pub data: LineData,
    pub mask: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WpqEntry {
    pub req: WriteRequest,
    pub enqueue_time: u64,
}

#[derive(Debug, Clone)]
pub struct WpqState {
    pub capacity_bytes: u64,
    pub per_thread_cap_bytes: u64,
    fifo: VecDeque<WpqEntry>,
    ingress: VecDeque<(WriteRequest, u64)>,
    per_thread: BTreeMap<ThreadId, u64>,
    in_service: Option<usize>,
    round_robin: bool,
    last_thread: Option<ThreadId>,
    pub accepted_bytes: u64,
    pub submitted_bytes: u64,
}

impl WpqState {
    pub fn new(cfg: &ImcConfig) -> Self {
        WpqState {
            capacity_bytes: cfg.wpq_capacity_bytes,
            per_thread_cap_bytes: cfg.per_thread_cap_bytes,
            fifo: VecDeque::new(),
            ingress: VecDeque::new(),
            per_thread: BTreeMap::new(),
            in_service: None,
            round_robin: cfg.round_robin_drain,
            last_thread: None,
            accepted_bytes: 0,
            submitted_bytes: 0,
        }
    }

    pub fn occupancy(&self) -> u64 {
        self.fifo.len() as u64 * LINE_BYTES
    }

    pub fn thread_occupancy(&self, thread: ThreadId) -> u64 {
        self.per_thread.get(&thread).copied().unwrap_or(0)
    }

    pub fn waiting(&self) -> usize {
        self.ingress.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = &WpqEntry> {
        self.fifo.iter()
    }

    fn room_for(&self, thread: ThreadId) -> bool {
        self.occupancy() + LINE_BYTES <= self.capacity_bytes
            && self.thread_occupancy(thread) + LINE_BYTES <= self.per_thread_cap_bytes
    }

    fn accept(&mut self, req: WriteRequest, time: u64) -> Result<WriteRequest> {
        let occ = self.per_thread.entry(req.thread).or_insert(0);
        *occ += LINE_BYTES;
        if *occ > self.per_thread_cap_bytes {
            return Err(SimError::Invariant(format!(
                "thread {} holds {} B in a WPQ (cap {})",
                req.thread, occ, self.per_thread_cap_bytes
            )));
        }
        self.accepted_bytes += LINE_BYTES;
        self.fifo.push_back(WpqEntry { req: req.clone(), enqueue_time: time });
        if self.occupancy() > self.capacity_bytes {
            return Err(SimError::Invariant("WPQ over capacity".into()));
        }
        Ok(req)
    }

    /// Offer a write at `time`. Returns the request back if it was accepted
    /// at once (it is persistent from that instant); otherwise it waits in
    /// the ingress until [`WpqState::admit`] lets it in.
    pub fn enqueue_write(&mut self, req: WriteRequest, time: u64) -> Result<Option<WriteRequest>> {
        if self.ingress.is_empty() && self.room_for(req.thread) {
            return self.accept(req, time).map(Some);
        }
        self.ingress.push_back((req, time));
        Ok(None)
    }

    /// Move ingress requests into the queue while the head fits.
    pub fn admit(&mut self, time: u64) -> Result<Vec<WriteRequest>> {
        let mut out = Vec::new();
        while let Some((head, _)) = self.ingress.front() {
            if !self.room_for(head.thread) {
                break;
            }
            let (req, _) = self.ingress.pop_front().unwrap();
            out.push(self.accept(req, time)?);
        }
        Ok(out)
    }

    /// Index of the entry to drain next.
    fn pick(&self) -> Option<usize> {
        if self.fifo.is_empty() {
            return None;
        }
        if !self.round_robin {
            return Some(0);
        }
        let after = |t: ThreadId| self.last_thread.is_none_or(|l| t > l);
        // next thread id after the last one served, wrapping around
        let next = self
            .per_thread
            .keys()
            .copied()
            .find(|&t| after(t))
            .or_else(|| self.per_thread.keys().next().copied())?;
        let idx = self.fifo.iter().position(|e| e.req.thread == next)?;
        let off = self.fifo[idx].req.offset;
        if self.fifo.iter().take(idx).any(|e| e.req.offset == off) {
            return Some(0);
        }
        Some(idx)
    }

    /// Submit the next entry to the device if the device is free for writes.
    /// Returns the completion time, at which [`WpqState::complete_drain`]
    /// must be called.
    pub fn drain_step(&mut self, device: &mut Device, time: u64) -> Result<Option<u64>> {
        if self.in_service.is_some() {
            return Ok(None);
        }
        let Some(idx) = self.pick() else {
            return Ok(None);
        };
        let e = &self.fifo[idx];
        let done = device.write64(e.req.offset, &e.req.data, e.req.mask, time)?;
        self.last_thread = Some(e.req.thread);
        self.in_service = Some(idx);
        self.submitted_bytes += LINE_BYTES;
        Ok(Some(done.max(time)))
    }

    /// The entry currently being written to the device.
    pub fn in_service(&self) -> Option<&WpqEntry> {
        self.in_service.map(|i| &self.fifo[i])
    }

    pub fn complete_drain(&mut self) -> Result<WpqEntry> {
        let Some(idx) = self.in_service.take() else {
            return Err(SimError::Invariant("drain completion without a drain in progress".into()));
        };
        let e = self.fifo.remove(idx).ok_or_else(|| SimError::Invariant("drain of empty WPQ".into()))?;
        let occ = self.per_thread.get_mut(&e.req.thread).unwrap();
        *occ -= LINE_BYTES;
        if *occ == 0 {
            self.per_thread.remove(&e.req.thread);
        }
        Ok(e)
    }

    pub fn is_draining(&self) -> bool {
        self.in_service.is_some()
    }

    pub fn is_idle(&self) -> bool {
        self.in_service.is_none() && self.fifo.is_empty() && self.ingress.is_empty()
    }

    /// Queued writes to `offset`, oldest first: accepted entries, then ingress.
    pub fn pending_for(&self, offset: u64) -> impl Iterator<Item = &WriteRequest> {
        self.fifo
            .iter()
            .map(|e| &e.req)
            .chain(self.ingress.iter().map(|(r, _)| r))
            .filter(move |r| r.offset == offset)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadRequest {
    pub id: u64,
    pub thread: ThreadId,
    pub offset: u64,
}

#[derive(Debug, Clone)]
pub struct RpqState {
    pub max_outstanding: usize,
    outstanding: usize,
    waiting: VecDeque<(ReadRequest, u64)>,
}

impl RpqState {
    pub fn new(cfg: &ImcConfig) -> Self {
        RpqState { max_outstanding: cfg.rpq_max_outstanding, outstanding: 0, waiting: VecDeque::new() }
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding
    }

    /// Issue a read. If the queue has room the device services it at once
    /// and the device completion time is returned; the caller must call
    /// [`RpqState::release`] at that time. Otherwise the request waits.
    pub fn issue_read(
        &mut self,
        device: &mut Device,
        req: ReadRequest,
        time: u64,
    ) -> Result<Option<(ReadRequest, u64, LineData)>> {
        if self.outstanding >= self.max_outstanding || !self.waiting.is_empty() {
            self.waiting.push_back((req, time));
            return Ok(None);
        }
        self.outstanding += 1;
        let (done, data) = device.read64(req.offset, time)?;
        Ok(Some((req, done.max(time), data)))
    }

    /// Free one slot at `time` and start the next waiting read, if any.
    pub fn release(
        &mut self,
        device: &mut Device,
        time: u64,
    ) -> Result<Option<(ReadRequest, u64, LineData)>> {
        if self.outstanding == 0 {
            return Err(SimError::Invariant("RPQ release with nothing outstanding".into()));
        }
        self.outstanding -= 1;
        if let Some((req, _)) = self.waiting.pop_front() {
            self.outstanding += 1;
            let (done, data) = device.read64(req.offset, time)?;
            return Ok(Some((req, done.max(time), data)));
        }
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::{XpConfig, XpDimm};

    fn req(id: u64, thread: ThreadId, offset: u64) -> WriteRequest {
        WriteRequest { id, thread, offset, data: [0; 64], mask: u64::MAX }
    }

    fn quiet_xp() -> Device {
        Device::Xp(XpDimm::new(XpConfig { outlier_prob: 0.0, ..XpConfig::default() }, 0, false))
    }

    #[test]
    fn empty_wpq_accepts_immediately() {
        let mut q = WpqState::new(&ImcConfig::default());
        assert!(q.enqueue_write(req(0, 0, 0), 5).unwrap().is_some());
        assert_eq!(q.occupancy(), 64);
    }

    #[test]
    fn per_thread_cap_blocks_fifth_entry() {
        let mut q = WpqState::new(&ImcConfig::default());
        let mut dev = quiet_xp();
        for i in 0..4 {
            assert!(q.enqueue_write(req(i, 7, i * 64), 0).unwrap().is_some());
        }
        assert!(q.enqueue_write(req(4, 7, 256), 0).unwrap().is_none());
        assert_eq!(q.thread_occupancy(7), 256);
        // another thread queued behind the blocked head is also held
        assert!(q.enqueue_write(req(5, 8, 512), 0).unwrap().is_none());
        assert!(q.admit(1).unwrap().is_empty());
        let t = q.drain_step(&mut dev, 10).unwrap().unwrap();
        q.complete_drain().unwrap();
        let admitted = q.admit(t).unwrap();
        assert_eq!(admitted.iter().map(|r| r.id).collect::<Vec<_>>(), vec![4, 5]);
    }

    #[test]
    fn drain_frees_occupancy_at_device_latency() {
        let cfg = XpConfig { outlier_prob: 0.0, ..XpConfig::default() };
        let mut dev = Device::Xp(XpDimm::new(cfg.clone(), 0, false));
        let mut q = WpqState::new(&ImcConfig::default());
        q.enqueue_write(req(0, 0, 0), 100).unwrap();
        let done = q.drain_step(&mut dev, 100).unwrap().unwrap();
        assert_eq!(done, 100 + cfg.write_accept_ns);
        assert_eq!(q.occupancy(), 64);
        assert!(q.drain_step(&mut dev, 100).unwrap().is_none());
        q.complete_drain().unwrap();
        assert_eq!(q.occupancy(), 0);
    }

    #[test]
    fn drain_alternates_threads() {
        let mut dev = quiet_xp();
        let mut q = WpqState::new(&ImcConfig::default());
        for (id, t) in [(1, 0), (2, 0), (3, 1), (4, 1)] {
            q.enqueue_write(req(id, t, id * 64), 0).unwrap();
        }
        let mut order = Vec::new();
        for _ in 0..4 {
            q.drain_step(&mut dev, 0).unwrap().unwrap();
            order.push(q.complete_drain().unwrap().req.id);
        }
        assert_eq!(order, vec![1, 3, 2, 4]);
    }

    #[test]
    fn same_address_never_reordered() {
        let mut dev = quiet_xp();
        let mut q = WpqState::new(&ImcConfig::default());
        q.enqueue_write(req(1, 0, 0), 0).unwrap();
        q.enqueue_write(req(2, 1, 4096), 0).unwrap();
        q.enqueue_write(req(3, 0, 4096), 0).unwrap();
        q.enqueue_write(req(4, 2, 4096), 0).unwrap();
        let mut order = Vec::new();
        for _ in 0..4 {
            q.drain_step(&mut dev, 0).unwrap().unwrap();
            order.push(q.complete_drain().unwrap().req.id);
        }
        let pos = |id| order.iter().position(|&x| x == id).unwrap();
        assert!(pos(2) < pos(3) && pos(3) < pos(4), "{order:?}");
    }

    #[test]
    fn fifo_drain_when_configured() {
        let mut dev = quiet_xp();
        let cfg = ImcConfig { round_robin_drain: false, ..ImcConfig::default() };
        let mut q = WpqState::new(&cfg);
        q.enqueue_write(req(1, 0, 0), 0).unwrap();
        q.enqueue_write(req(2, 1, 4096), 0).unwrap();
        let t1 = q.drain_step(&mut dev, 0).unwrap().unwrap();
        assert_eq!(q.complete_drain().unwrap().req.id, 1);
        let t2 = q.drain_step(&mut dev, t1).unwrap().unwrap();
        assert!(t2 > t1);
        assert_eq!(q.complete_drain().unwrap().req.id, 2);
    }

    #[test]
    fn capacity_bound_holds() {
        let mut q = WpqState::new(&ImcConfig::default());
        let mut accepted = 0;
        for i in 0..40u64 {
            if q.enqueue_write(req(i, (i % 10) as u32, i * 64), 0).unwrap().is_some() {
                accepted += 1;
            }
        }
        assert_eq!(accepted, 16);
        assert_eq!(q.occupancy(), 1024);
    }

    #[test]
    fn reads_queue_behind_outstanding() {
        let cfg = ImcConfig { rpq_max_outstanding: 2, ..ImcConfig::default() };
        let mut dev = quiet_xp();
        let mut q = RpqState::new(&cfg);
        let r = |id| ReadRequest { id, thread: 0, offset: id * 4096 };
        let (_, d0, _) = q.issue_read(&mut dev, r(0), 0).unwrap().unwrap();
        assert_eq!(d0, XpConfig::default().media_read_ns);
        assert!(q.issue_read(&mut dev, r(1), 0).unwrap().is_some());
        assert!(q.issue_read(&mut dev, r(2), 0).unwrap().is_none());
        let next = q.release(&mut dev, d0).unwrap().unwrap();
        assert_eq!(next.0.id, 2);
        assert!(next.1 > d0);
    }
}
