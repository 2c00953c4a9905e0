//! Discrete-event simulation core.
//!
//! Virtual time is integral nanoseconds. Events dispatch in (time, seq)
//! order, seq being assigned when an event is scheduled. A simulated thread
//! runs inline until its local clock passes the next queued event, then
//! reschedules itself, so a run is a deterministic function of its inputs.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};

use crate::cache::{CacheConfig, CacheModel, Downstream, MemoryOp, OpKind, Outcome, ThreadId};
use crate::devices::{merge_masked, Device, DeviceCounters, DramConfig, DramDimm, LineData, XpConfig, XpDimm};
use crate::error::{Result, SimError};
use crate::imc::{ImcConfig, ReadRequest, RpqState, WpqState, WriteRequest};
use crate::metrics::{DeviceReport, ExperimentReport, LatencyHistogram};
use crate::rng::split_seed;
use crate::topology::{DeviceKind, PlatformTopology, LINE_BYTES};
use crate::workload::{Access, TraceRecord};

/// Inter-socket link seen by threads running off the namespace socket.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkConfig {
    pub latency_ns: u64,
    /// Link occupancy per 64 B transfer.
    pub transfer_ns: u64,
    /// In-flight credits shared by all remote requesters.
    pub credits: u32,
    pub read_credits: u32,
    pub write_credits: u32,
    /// Extra occupancy when the link switches between read and write traffic.
    pub turnaround_ns: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            latency_ns: 60,
            transfer_ns: 4,
            credits: 48,
            read_credits: 1,
            write_credits: 3,
            turnaround_ns: 300,
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.read_credits == 0 || self.write_credits == 0 {
            return Err(SimError::validation("link.write_credits", "credit costs must be positive"));
        }
        if self.credits < self.read_credits.max(self.write_credits) {
            return Err(SimError::validation("link.credits", "pool smaller than one request"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub topology: PlatformTopology,
    pub cache: CacheConfig,
    pub imc: ImcConfig,
    pub xp: XpConfig,
    pub dram: DramConfig,
    pub link: LinkConfig,
    /// Socket every simulated thread is pinned to.
    pub thread_socket: usize,
    /// Keep media contents and the per-op log (crash testing).
    pub track_data: bool,
    /// Record the device-level request trace.
    pub record_trace: bool,
    /// Record one access latency in every `sample_every`.
    pub sample_every: u64,
    /// Stop issuing ops once virtual time reaches this budget.
    pub max_time_ns: Option<u64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            topology: PlatformTopology::default(),
            cache: CacheConfig::default(),
            imc: ImcConfig::default(),
            xp: XpConfig::default(),
            dram: DramConfig::default(),
            link: LinkConfig::default(),
            thread_socket: 0,
            track_data: false,
            record_trace: false,
            sample_every: 1,
            max_time_ns: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        self.cache.validate()?;
        self.imc.validate()?;
        self.xp.validate()?;
        self.dram.validate()?;
        self.link.validate()?;
        if self.thread_socket >= self.topology.sockets {
            return Err(SimError::validation(
                "engine.thread_socket",
                format!("socket {} absent (platform has {})", self.thread_socket, self.topology.sockets),
            ));
        }
        if self.sample_every == 0 {
            return Err(SimError::validation("engine.sample_every", "must be at least 1"));
        }
        Ok(())
    }

    pub fn is_remote(&self) -> bool {
        self.thread_socket != self.topology.namespace_socket
    }
}

/// Latency sampling stride keeping at most 10^7 samples.
pub fn sample_stride(total_accesses: u64) -> u64 {
    total_accesses.div_ceil(10_000_000).max(1)
}

pub type Program = Box<dyn Iterator<Item = Access> + Send>;

/// One executed op, kept when data tracking is on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpRecord {
    pub op: MemoryOp,
    /// Time the op issued.
    pub issue: u64,
    /// Time the op retired; for a fence, when its guarantees hold.
    pub retire: u64,
}

/// A request as seen by a device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceOp {
    pub time: u64,
    /// Index into the namespace's DIMM list.
    pub dimm: usize,
    pub write: bool,
    pub offset: u64,
    pub bytes: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    ThreadStep(usize),
    ReadArrive { dimm: usize, id: u64 },
    ReadDone { dimm: usize, id: u64 },
    FillArrive { line: u64, id: u64 },
    WriteArrive { dimm: usize, id: u64 },
    DrainDone { dimm: usize },
    WriteAck { thread: usize },
    LinkRetry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    /// Too many loads or fills outstanding.
    Mlp,
    WriteSlots,
    /// Waiting for everything outstanding; the fence's own cost ends at `ready`.
    Fence { ready: u64 },
    /// Waiting for the fill of a line.
    Fill,
    /// CLFLUSH waits for the thread's earlier write-backs.
    Serial,
    /// Round marker: waiting for every queue to drain.
    Quiesce,
    /// Program exhausted; waiting for outstanding requests.
    Finish,
}

#[derive(Debug, Clone, Copy)]
enum Waiter {
    Load { thread: usize, token: u64 },
    Rfo { thread: usize },
    Wake { thread: usize },
    /// A flush issued while the line was filling; runs when the fill lands.
    Flush { thread: usize, op: MemoryOp },
}

struct OpenAccess {
    start: u64,
    end: u64,
    pending: u32,
    issued: bool,
    read: bool,
}

struct ThreadState {
    program: Program,
    cur: Option<Access>,
    idx: usize,
    token: u64,
    time: u64,
    block: Option<Block>,
    loads_out: u32,
    rfo_out: u32,
    flushes_out: u32,
    writes_out: u32,
    done: bool,
    bytes: u64,
    finish: u64,
}

struct DimmState {
    device: Device,
    imc: usize,
    wpq: WpqState,
    rpq: RpqState,
}

enum LinkReq {
    Read { dimm: usize, id: u64 },
    Write { dimm: usize, id: u64 },
}

struct Link {
    free: u64,
    last_write: Option<bool>,
    credits: u32,
    queue: VecDeque<LinkReq>,
}

pub struct Simulation {
    cfg: SimConfig,
    seed: u64,
    remote: bool,
    now: u64,
    seq: u64,
    events: BinaryHeap<Reverse<(u64, u64, Event)>>,
    threads: Vec<ThreadState>,
    cache: CacheModel,
    dimms: Vec<DimmState>,
    dimm_index: HashMap<usize, usize>,
    link: Link,
    next_id: u64,
    reads: HashMap<u64, (usize, u64)>,
    fills: HashMap<u64, LineData>,
    writes: HashMap<u64, WriteRequest>,
    fill_waiters: HashMap<u64, Vec<Waiter>>,
    open: HashMap<u64, OpenAccess>,
    writes_in_flight: u64,
    latency: BTreeMap<String, LatencyHistogram>,
    access_count: u64,
    round_snapshots: Vec<DeviceCounters>,
    op_log: Vec<OpRecord>,
    trace: Vec<DeviceOp>,
    wpq_peak: u64,
    /// Per-iMC shared path, free time in picoseconds.
    imc_bus: Vec<u64>,
    finished: bool,
}

fn key(read: bool) -> &'static str {
    if read {
        "read"
    } else {
        "write"
    }
}

impl Simulation {
    pub fn new(cfg: SimConfig, programs: Vec<Program>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let topo = &cfg.topology;
        let topo_imcs = topo.sockets * topo.imcs_per_socket;
        let mut dimms = Vec::new();
        let mut dimm_index = HashMap::new();
        for (i, dev) in topo.namespace_devices().into_iter().enumerate() {
            let device = match topo.device_kind {
                DeviceKind::XpDimm => Device::Xp(XpDimm::new(
                    cfg.xp.clone(),
                    // device streams sit past any thread index
                    split_seed(seed, (1 << 32) + dev.0 as u64),
                    cfg.track_data,
                )),
                DeviceKind::Dram => Device::Dram(DramDimm::new(cfg.dram.clone(), cfg.track_data)),
            };
            dimm_index.insert(dev.0, i);
            let per_imc = (topo.channels_per_imc * topo.dimms_per_channel) as u64;
            let imc = (dev.0 as u64 / per_imc) as usize;
            dimms.push(DimmState { device, imc, wpq: WpqState::new(&cfg.imc), rpq: RpqState::new(&cfg.imc) });
        }
        let threads = programs
            .into_iter()
            .map(|program| ThreadState {
                program,
                cur: None,
                idx: 0,
                token: 0,
                time: 0,
                block: None,
                loads_out: 0,
                rfo_out: 0,
                flushes_out: 0,
                writes_out: 0,
                done: false,
                bytes: 0,
                finish: 0,
            })
            .collect::<Vec<_>>();
        let mut sim = Simulation {
            remote: cfg.is_remote(),
            cache: CacheModel::new(cfg.cache.clone()),
            link: Link { free: 0, last_write: None, credits: cfg.link.credits, queue: VecDeque::new() },
            cfg,
            seed,
            now: 0,
            seq: 0,
            events: BinaryHeap::new(),
            threads,
            dimms,
            dimm_index,
            next_id: 0,
            reads: HashMap::new(),
            fills: HashMap::new(),
            writes: HashMap::new(),
            fill_waiters: HashMap::new(),
            open: HashMap::new(),
            writes_in_flight: 0,
            latency: BTreeMap::new(),
            access_count: 0,
            round_snapshots: Vec::new(),
            op_log: Vec::new(),
            trace: Vec::new(),
            wpq_peak: 0,
            imc_bus: vec![0; topo_imcs],
            finished: false,
        };
        for t in 0..sim.threads.len() {
            sim.schedule(0, Event::ThreadStep(t));
        }
        Ok(sim)
    }

    fn schedule(&mut self, time: u64, ev: Event) {
        self.seq += 1;
        self.events.push(Reverse((time, self.seq, ev)));
    }

    fn next_event_time(&self) -> u64 {
        self.events.peek().map_or(u64::MAX, |Reverse((t, _, _))| *t)
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Dispatch every event strictly before `limit`. Returns true once the
    /// run has completed.
    pub fn run_until(&mut self, limit: u64) -> Result<bool> {
        while let Some(Reverse((t, _, _))) = self.events.peek() {
            if *t >= limit {
                return Ok(false);
            }
            let Reverse((t, _, ev)) = self.events.pop().unwrap();
            if t < self.now {
                return Err(SimError::Invariant(format!("time went backwards: {t} < {}", self.now)));
            }
            self.now = t;
            self.dispatch(ev, limit)?;
        }
        if let Some(t) = self.threads.iter().position(|t| !t.done) {
            return Err(SimError::Invariant(format!(
                "thread {t} stalled with no pending events ({:?})",
                self.threads[t].block
            )));
        }
        self.finished = true;
        Ok(true)
    }

    pub fn run(mut self) -> Result<ExperimentReport> {
        self.run_until(u64::MAX)?;
        self.into_report()
    }

    fn dispatch(&mut self, ev: Event, limit: u64) -> Result<()> {
        let now = self.now;
        match ev {
            Event::ThreadStep(t) => self.step_thread(t, limit)?,
            Event::ReadArrive { dimm, id } => {
                let (_, addr) = self.reads[&id];
                let offset = self.cfg.topology.decode_device(addr)?.1;
                let req = ReadRequest { id, thread: 0, offset };
                let d = &mut self.dimms[dimm];
                if let Some((req, done, data)) = d.rpq.issue_read(&mut d.device, req, now)? {
                    self.start_read(dimm, req.id, req.offset, done, data);
                }
            }
            Event::ReadDone { dimm, id } => {
                let d = &mut self.dimms[dimm];
                if let Some((req, done, data)) = d.rpq.release(&mut d.device, now)? {
                    self.start_read(dimm, req.id, req.offset, done, data);
                }
                let (_, line) = self.reads[&id];
                let (t, bus) = self.imc_slot(dimm, now, self.cfg.imc.xp_read_slot_ps);
                self.imc_bus[self.dimms[dimm].imc] = bus;
                let mut back = t + self.cfg.imc.traversal_ns;
                if self.remote {
                    back += self.cfg.link.latency_ns;
                    self.release_credits(self.cfg.link.read_credits);
                }
                self.schedule(back, Event::FillArrive { line, id });
            }
            Event::FillArrive { line, id } => {
                self.reads.remove(&id);
                let data = self.fills.remove(&id).unwrap_or([0; 64]);
                self.cache.complete_fill(line, &data);
                for w in self.fill_waiters.remove(&line).unwrap_or_default() {
                    match w {
                        Waiter::Load { thread, token } => {
                            self.threads[thread].loads_out -= 1;
                            self.load_done(token, now);
                            self.try_unblock(thread);
                        }
                        Waiter::Rfo { thread } => {
                            self.threads[thread].rfo_out -= 1;
                            self.try_unblock(thread);
                        }
                        Waiter::Wake { thread } => {
                            if self.threads[thread].block == Some(Block::Fill) {
                                self.threads[thread].block = None;
                                self.wake(thread);
                            }
                        }
                        Waiter::Flush { thread, op } => {
                            let Outcome::Done { downstream, .. } = self.cache.execute(&op) else {
                                return Err(SimError::Invariant(format!("flush of {line:#x} still waiting after fill")));
                            };
                            for d in downstream {
                                if let Downstream::Write { line, data, mask, .. } = d {
                                    self.send_write(thread, now, line, data, mask)?;
                                }
                            }
                            self.threads[thread].flushes_out -= 1;
                            self.try_unblock(thread);
                        }
                    }
                }
            }
            Event::WriteArrive { dimm, id } => {
                let req = self.writes.remove(&id).expect("write payload");
                if let Some(req) = self.dimms[dimm].wpq.enqueue_write(req, now)? {
                    self.accepted(req.thread as usize);
                }
                self.kick_drain(dimm)?;
            }
            Event::DrainDone { dimm } => {
                self.dimms[dimm].wpq.complete_drain()?;
                self.writes_in_flight -= 1;
                for req in self.dimms[dimm].wpq.admit(now)? {
                    self.accepted(req.thread as usize);
                }
                self.kick_drain(dimm)?;
                if self.writes_in_flight == 0 {
                    for t in 0..self.threads.len() {
                        self.try_unblock(t);
                    }
                }
            }
            Event::WriteAck { thread } => {
                self.threads[thread].writes_out -= 1;
                self.cache.persist_accepted(thread as ThreadId);
                self.try_unblock(thread);
            }
            Event::LinkRetry => self.pump_link(),
        }
        Ok(())
    }

    fn start_read(&mut self, dimm: usize, id: u64, offset: u64, done: u64, mut data: LineData) {
        if self.cfg.track_data {
            for w in self.dimms[dimm].wpq.pending_for(offset) {
                merge_masked(&mut data, &w.data, w.mask);
            }
            self.fills.insert(id, data);
        }
        if self.cfg.record_trace {
            self.trace.push(DeviceOp { time: self.now, dimm, write: false, offset, bytes: 64 });
        }
        self.schedule(done, Event::ReadDone { dimm, id });
    }

    /// Earliest time at or after `t` the DIMM's iMC path is free, and the
    /// path's free time (ps) after one transfer starting then.
    fn imc_slot(&self, dimm: usize, t: u64, slot_ps: u64) -> (u64, u64) {
        let d = &self.dimms[dimm];
        if slot_ps == 0 || !matches!(d.device, Device::Xp(_)) {
            return (t, self.imc_bus[d.imc]);
        }
        let start = self.imc_bus[d.imc].max(t * 1000);
        (start.div_ceil(1000), start + slot_ps)
    }

    fn accepted(&mut self, thread: usize) {
        let mut back = self.now + self.cfg.imc.traversal_ns;
        if self.remote {
            back += self.cfg.link.latency_ns;
            self.release_credits(self.cfg.link.write_credits);
        }
        self.schedule(back, Event::WriteAck { thread });
    }

    fn kick_drain(&mut self, dimm: usize) -> Result<()> {
        let (now, bus) = self.imc_slot(dimm, self.now, self.cfg.imc.xp_write_slot_ps);
        let d = &mut self.dimms[dimm];
        self.wpq_peak = self.wpq_peak.max(d.wpq.occupancy());
        if let Some(done) = d.wpq.drain_step(&mut d.device, now)? {
            self.imc_bus[d.imc] = bus;
            if self.cfg.record_trace {
                let e = d.wpq.in_service().unwrap();
                let (offset, bytes) = (e.req.offset, e.req.mask.count_ones());
                self.trace.push(DeviceOp { time: now, dimm, write: true, offset, bytes });
            }
            self.schedule(done, Event::DrainDone { dimm });
        }
        Ok(())
    }

    fn release_credits(&mut self, n: u32) {
        self.link.credits += n;
        if !self.link.queue.is_empty() {
            self.schedule(self.now, Event::LinkRetry);
        }
    }

    /// Move queued remote requests onto the link while credits last.
    fn pump_link(&mut self) {
        while let Some(front) = self.link.queue.front() {
            let (write, cost) = match front {
                LinkReq::Read { .. } => (false, self.cfg.link.read_credits),
                LinkReq::Write { .. } => (true, self.cfg.link.write_credits),
            };
            if self.link.credits < cost {
                return;
            }
            self.link.credits -= cost;
            let req = self.link.queue.pop_front().unwrap();
            let mut start = self.now.max(self.link.free);
            if self.link.last_write.is_some_and(|w| w != write) {
                start += self.cfg.link.turnaround_ns;
            }
            self.link.last_write = Some(write);
            self.link.free = start + self.cfg.link.transfer_ns;
            let arrive = start + self.cfg.link.transfer_ns + self.cfg.link.latency_ns + self.cfg.imc.traversal_ns;
            match req {
                LinkReq::Read { dimm, id } => self.schedule(arrive, Event::ReadArrive { dimm, id }),
                LinkReq::Write { dimm, id } => self.schedule(arrive, Event::WriteArrive { dimm, id }),
            }
        }
    }

    fn route(&self, addr: u64) -> Result<(usize, u64)> {
        let (dev, offset) = self.cfg.topology.decode_device(addr)?;
        Ok((self.dimm_index[&dev.0], offset))
    }

    fn send_read(&mut self, thread: usize, t: u64, line: u64) -> Result<()> {
        let (dimm, _) = self.route(line)?;
        let id = self.next_id;
        self.next_id += 1;
        self.reads.insert(id, (thread, line));
        if self.remote {
            self.link.queue.push_back(LinkReq::Read { dimm, id });
            self.pump_at(t);
        } else {
            self.schedule(t + self.cfg.imc.traversal_ns, Event::ReadArrive { dimm, id });
        }
        Ok(())
    }

    fn send_write(&mut self, thread: usize, t: u64, line: u64, data: LineData, mask: u64) -> Result<()> {
        let (dimm, offset) = self.route(line)?;
        let id = self.next_id;
        self.next_id += 1;
        self.writes.insert(id, WriteRequest { id, thread: thread as ThreadId, offset, data, mask });
        self.threads[thread].writes_out += 1;
        self.cache.record_pending(thread as ThreadId);
        self.writes_in_flight += 1;
        if self.remote {
            self.link.queue.push_back(LinkReq::Write { dimm, id });
            self.pump_at(t);
        } else {
            self.schedule(t + self.cfg.imc.traversal_ns, Event::WriteArrive { dimm, id });
        }
        Ok(())
    }

    /// Link requests are dispatched from the event loop so their order
    /// follows virtual time.
    fn pump_at(&mut self, t: u64) {
        self.schedule(t, Event::LinkRetry);
    }

    fn load_done(&mut self, token: u64, at: u64) {
        if let Some(a) = self.open.get_mut(&token) {
            a.pending -= 1;
            a.end = a.end.max(at);
            if a.pending == 0 && a.issued {
                let a = self.open.remove(&token).unwrap();
                self.record_latency(token, a.read, a.end - a.start);
            }
        }
    }

    fn record_latency(&mut self, token: u64, read: bool, ns: u64) {
        let h = self.latency.entry(key(read).to_string()).or_default();
        if token % self.cfg.sample_every == 0 {
            h.record(ns);
        } else {
            h.observe_max(ns);
        }
    }

    fn wake(&mut self, t: usize) {
        let at = self.threads[t].time.max(self.now);
        self.threads[t].time = at;
        self.schedule(at, Event::ThreadStep(t));
    }

    fn try_unblock(&mut self, t: usize) {
        let th = &self.threads[t];
        let Some(b) = th.block else { return };
        let quiet = th.loads_out == 0 && th.rfo_out == 0 && th.flushes_out == 0 && th.writes_out == 0;
        let resolved = match b {
            Block::Mlp => th.loads_out + th.rfo_out < self.cfg.cache.load_mlp as u32,
            Block::WriteSlots => th.writes_out < self.cfg.cache.max_outstanding_writes as u32,
            Block::Fence { .. } | Block::Finish => quiet,
            Block::Serial => th.writes_out + th.flushes_out == 0,
            Block::Fill => false,
            Block::Quiesce => self.writes_in_flight == 0 && self.dimms.iter().all(|d| d.wpq.is_idle()),
        };
        if !resolved {
            return;
        }
        let now = self.now;
        let th = &mut self.threads[t];
        th.block = None;
        match b {
            Block::Fence { ready } => {
                th.time = th.time.max(now).max(ready);
                let time = th.time;
                self.fence_retired(t, time);
            }
            Block::Finish => {
                th.time = th.time.max(now);
                th.finish = th.time;
                th.done = true;
                return;
            }
            Block::Quiesce => {
                let mut c = DeviceCounters::default();
                for d in &self.dimms {
                    c += d.device.counters();
                }
                self.round_snapshots.push(c);
            }
            _ => {}
        }
        self.wake(t);
    }

    fn fence_retired(&mut self, t: usize, time: u64) {
        if self.cfg.track_data {
            if let Some(rec) = self
                .op_log
                .iter_mut()
                .rev()
                .find(|r| r.op.thread as usize == t && r.op.kind == OpKind::Sfence)
            {
                rec.retire = time;
            }
        }
        self.finish_op(t);
    }

    /// Advance past the current op and close the access if it was the last.
    fn finish_op(&mut self, t: usize) {
        let th = &mut self.threads[t];
        th.idx += 1;
        let Some(acc) = th.cur.as_ref() else { return };
        if th.idx < acc.ops.len() {
            return;
        }
        let token = th.token;
        let time = th.time;
        th.bytes += acc.payload_bytes;
        th.cur = None;
        if let Some(a) = self.open.get_mut(&token) {
            a.issued = true;
            a.end = a.end.max(time);
            if a.pending == 0 {
                let a = self.open.remove(&token).unwrap();
                self.record_latency(token, a.read, a.end - a.start);
            }
        }
    }

    fn step_thread(&mut self, t: usize, limit: u64) -> Result<()> {
        if self.threads[t].done || self.threads[t].block.is_some() {
            return Ok(());
        }
        {
            let th = &mut self.threads[t];
            th.time = th.time.max(self.now);
        }
        loop {
            let time = self.threads[t].time;
            if time > self.next_event_time() || time >= limit {
                self.schedule(time, Event::ThreadStep(t));
                return Ok(());
            }
            if self.threads[t].cur.is_none() && !self.begin_access(t) {
                return Ok(());
            }
            if self.threads[t].block.is_some() {
                return Ok(());
            }
            if !self.execute_next(t)? {
                return Ok(());
            }
        }
    }

    /// Fetch the next access. Returns false if the thread blocked or ended.
    fn begin_access(&mut self, t: usize) -> bool {
        let over_budget = self.cfg.max_time_ns.is_some_and(|m| self.threads[t].time >= m);
        let next = if over_budget { None } else { self.threads[t].program.next() };
        let Some(acc) = next else {
            self.threads[t].block = Some(Block::Finish);
            self.try_unblock(t);
            return false;
        };
        let th = &mut self.threads[t];
        th.time += acc.delay_ns;
        th.idx = 0;
        th.token = self.access_count;
        self.access_count += 1;
        let marker = acc.marker.is_some();
        let empty = acc.ops.is_empty();
        th.cur = Some(acc);
        if marker {
            th.block = Some(Block::Quiesce);
            self.try_unblock(t);
            return false;
        }
        if empty {
            self.finish_op(t);
        }
        true
    }

    /// Execute the thread's next op. Returns false if the thread blocked.
    fn execute_next(&mut self, t: usize) -> Result<bool> {
        let th = &self.threads[t];
        let Some(acc) = th.cur.as_ref() else { return Ok(true) };
        if th.idx >= acc.ops.len() {
            self.finish_op(t);
            return Ok(true);
        }
        let mut op = acc.ops[th.idx];
        let timed = th.idx >= acc.timed_from;
        let first_timed = th.idx == acc.timed_from;
        let read = acc.is_read;
        let token = th.token;
        let c = &self.cfg.cache;
        if first_timed && !self.open.contains_key(&token) {
            // waiting for issue resources counts toward the access
            let start = th.time;
            self.open.insert(token, OpenAccess { start, end: start, pending: 0, issued: false, read });
        }
        let th = &self.threads[t];
        let block = match op.kind {
            OpKind::Load if th.loads_out + th.rfo_out >= c.load_mlp as u32 => Some(Block::Mlp),
            OpKind::Store if th.loads_out + th.rfo_out >= c.load_mlp as u32 => Some(Block::Mlp),
            OpKind::Clflush if th.writes_out + th.flushes_out > 0 => Some(Block::Serial),
            OpKind::Load => None,
            _ if th.writes_out >= c.max_outstanding_writes as u32 => Some(Block::WriteSlots),
            _ => None,
        };
        if let Some(b) = block {
            self.threads[t].block = Some(b);
            return Ok(false);
        }
        op.validate()?;
        let now = self.threads[t].time;
        op.issue_time = now;
        let flush_pending = |w: &Vec<Waiter>| w.iter().any(|w| matches!(w, Waiter::Flush { .. }));
        let outcome = if matches!(op.kind, OpKind::Store | OpKind::NtStore)
            && self.fill_waiters.get(&op.line()).is_some_and(flush_pending)
        {
            // an older flush of this line has not run yet
            Outcome::WaitFill(op.line())
        } else {
            self.cache.execute(&op)
        };
        let (latency, downstream) = match outcome {
            Outcome::WaitFill(line) if op.kind == OpKind::Load => {
                // hit under an outstanding miss
                self.fill_waiters.entry(line).or_default().push(Waiter::Load { thread: t, token });
                self.threads[t].loads_out += 1;
                if timed {
                    if let Some(a) = self.open.get_mut(&token) {
                        a.pending += 1;
                    }
                }
                (self.cfg.cache.hit_ns, Vec::new())
            }
            Outcome::WaitFill(line) if op.kind.is_flush() => {
                self.fill_waiters.entry(line).or_default().push(Waiter::Flush { thread: t, op });
                self.threads[t].flushes_out += 1;
                (self.cfg.cache.flush_issue_ns, Vec::new())
            }
            Outcome::WaitFill(line) => {
                self.fill_waiters.entry(line).or_default().push(Waiter::Wake { thread: t });
                self.threads[t].block = Some(Block::Fill);
                return Ok(false);
            }
            Outcome::Done { latency, downstream } => (latency, downstream),
        };
        for d in downstream {
            match d {
                Downstream::Read { line } => {
                    let w = if op.kind == OpKind::Load {
                        self.threads[t].loads_out += 1;
                        if timed {
                            if let Some(a) = self.open.get_mut(&token) {
                                a.pending += 1;
                            }
                        }
                        Waiter::Load { thread: t, token }
                    } else {
                        self.threads[t].rfo_out += 1;
                        Waiter::Rfo { thread: t }
                    };
                    self.fill_waiters.entry(line).or_default().push(w);
                    self.send_read(t, now, line)?;
                }
                Downstream::Write { line, data, mask, .. } => self.send_write(t, now, line, data, mask)?,
            }
        }
        let done = now + latency;
        self.threads[t].time = done;
        if self.cfg.track_data {
            self.op_log.push(OpRecord { op, issue: now, retire: done });
        }
        if op.kind == OpKind::Sfence {
            let th = &self.threads[t];
            if th.loads_out + th.rfo_out + th.flushes_out + th.writes_out > 0 {
                self.threads[t].block = Some(Block::Fence { ready: done });
                if let Some(rec) = self.op_log.last_mut() {
                    // set for real in fence_retired
                    rec.retire = u64::MAX;
                }
                return Ok(false);
            }
        }
        self.finish_op(t);
        Ok(true)
    }

    /// Final report. XPBuffer contents are written back first so media
    /// counters cover every write.
    pub fn into_report(mut self) -> Result<ExperimentReport> {
        if !self.finished {
            return Err(SimError::Contract("report requested before the run finished".into()));
        }
        let duration = self.threads.iter().map(|t| t.finish).max().unwrap_or(0);
        let end = self.now;
        for d in &mut self.dimms {
            if d.wpq.accepted_bytes != d.wpq.submitted_bytes || !d.wpq.is_idle() {
                return Err(SimError::Invariant("WPQ not drained at end of run".into()));
            }
            d.device.flush_all(end);
        }
        let slots = self.cfg.topology.namespace_slots();
        Ok(ExperimentReport {
            seed: self.seed,
            config_echo: String::new(),
            duration_ns: duration,
            payload_bytes: self.threads.iter().map(|t| t.bytes).sum(),
            accesses: self.access_count,
            thread_bytes: self.threads.iter().map(|t| t.bytes).collect(),
            thread_duration_ns: self.threads.iter().map(|t| t.finish).collect(),
            latency: self.latency,
            sample_every: self.cfg.sample_every,
            devices: self
                .dimms
                .iter()
                .zip(slots)
                .map(|(d, slot)| DeviceReport { slot, counters: d.device.counters() })
                .collect(),
            round_snapshots: self.round_snapshots,
            cache: self.cache.counters,
            outstanding_wpq_peak_bytes: self.wpq_peak,
        })
    }

    /// Device requests in submission order, as trace records with
    /// namespace addresses.
    pub fn device_trace(&self) -> Result<Vec<TraceRecord>> {
        let devs = self.cfg.topology.namespace_devices();
        self.trace
            .iter()
            .enumerate()
            .map(|(i, d)| {
                Ok(TraceRecord {
                    index: i as u64,
                    thread: 0,
                    kind: if d.write { "WRITE64" } else { "READ64" }.to_string(),
                    addr: self.cfg.topology.encode_device(devs[d.dimm], d.offset)?,
                    size: d.bytes,
                })
            })
            .collect()
    }

    pub fn raw_device_trace(&self) -> &[DeviceOp] {
        &self.trace
    }

    pub fn op_log(&self) -> &[OpRecord] {
        &self.op_log
    }

    /// Contents of the persistence domain right now, keyed by namespace
    /// address: media and XPBuffer state overlaid with every write the WPQs
    /// have accepted. Caches, write-combining slots, ingress FIFOs and
    /// in-flight requests are lost.
    pub fn crash_image(&self) -> Result<BTreeMap<u64, LineData>> {
        let devs = self.cfg.topology.namespace_devices();
        let mut out = BTreeMap::new();
        for (i, d) in self.dimms.iter().enumerate() {
            let mut lines = d.device.persistent_lines();
            for e in d.wpq.entries() {
                merge_masked(lines.entry(e.req.offset).or_insert([0; 64]), &e.req.data, e.req.mask);
            }
            for (off, data) in lines {
                out.insert(self.cfg.topology.encode_device(devs[i], off)?, data);
            }
        }
        Ok(out)
    }
}

/// Run programs to completion.
pub fn run(cfg: &SimConfig, programs: Vec<Program>, seed: u64) -> Result<ExperimentReport> {
    Simulation::new(cfg.clone(), programs, seed)?.run()
}

/// Run until the first event boundary at or after `time` and return the
/// persistent image at that instant.
pub fn inject_crash(sim: &mut Simulation, time: u64) -> Result<BTreeMap<u64, LineData>> {
    sim.run_until(time)?;
    sim.crash_image()
}

/// Wrap a fixed access list as a program.
pub fn program(accesses: Vec<Access>) -> Program {
    Box::new(accesses.into_iter())
}

/// Convenience: one access per op list, no preparation, no delay.
pub fn access(ops: Vec<MemoryOp>, is_read: bool) -> Access {
    let payload_bytes = ops.iter().filter(|o| o.kind.carries_payload()).map(|o| o.size as u64).sum();
    Access { ops, timed_from: 0, payload_bytes, delay_ns: 0, marker: None, is_read }
}

pub fn line_of(addr: u64) -> u64 {
    addr & !(LINE_BYTES - 1)
}
