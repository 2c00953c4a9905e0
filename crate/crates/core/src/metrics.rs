//! Latency histograms, run reports, per-round EWR and the EWR/bandwidth
//! correlation dataset.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::OnceLock;

use crate::cache::CacheCounters;
use crate::devices::{ewr, DeviceCounters};

/// Bin ratio 2^(1/30), about 2.3 % per bin.
const BIN_RATIO: f64 = 1.023_373_891_996_752_7;
const MAX_NS: f64 = 1e9;
const RESERVOIR: usize = 64;

/// Inclusive integer upper bounds of the bins. Built by repeated
/// multiplication so every platform gets the same table.
fn bounds() -> &'static [u64] {
    static B: OnceLock<Vec<u64>> = OnceLock::new();
    B.get_or_init(|| {
        let mut out = vec![1u64];
        let mut x = 1.0f64;
        while x < MAX_NS {
            x *= BIN_RATIO;
            let ub = x.ceil() as u64;
            if ub > *out.last().unwrap() {
                out.push(ub);
            }
        }
        out
    })
}

#[derive(Debug, Clone)]
pub struct LatencyHistogram {
    counts: Vec<u64>,
    total: u64,
    sum: u128,
    overflow: u64,
    maxima: BinaryHeap<Reverse<u64>>,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        LatencyHistogram {
            counts: vec![0; bounds().len()],
            total: 0,
            sum: 0,
            overflow: 0,
            maxima: BinaryHeap::new(),
        }
    }
}

impl PartialEq for LatencyHistogram {
    fn eq(&self, o: &Self) -> bool {
        self.counts == o.counts && self.total == o.total && self.sum == o.sum && self.overflow == o.overflow && self.top_values() == o.top_values()
    }
}

impl LatencyHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Count a sampled latency and feed the max reservoir.
    pub fn record(&mut self, ns: u64) {
        let b = bounds();
        let i = b.partition_point(|&ub| ub < ns);
        if i < b.len() {
            self.counts[i] += 1;
        } else {
            self.overflow += 1;
        }
        self.total += 1;
        self.sum += ns as u128;
        self.observe_max(ns);
    }

    /// Feed the max reservoir without counting a sample.
    pub fn observe_max(&mut self, ns: u64) {
        if self.maxima.len() < RESERVOIR {
            self.maxima.push(Reverse(ns));
        } else if self.maxima.peek().is_some_and(|m| m.0 < ns) {
            self.maxima.pop();
            self.maxima.push(Reverse(ns));
        }
    }

    pub fn count(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn max(&self) -> Option<u64> {
        self.maxima.iter().map(|r| r.0).max()
    }

    /// Largest values seen, descending.
    pub fn top_values(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.maxima.iter().map(|r| r.0).collect();
        v.sort_unstable_by(|a, b| b.cmp(a));
        v
    }

    /// Smallest bin upper bound whose cumulative fraction reaches `p`,
    /// capped at the true maximum. `p == 1` is the exact maximum.
    pub fn percentile(&self, p: f64) -> Option<u64> {
        if self.total == 0 || !(p > 0.0 && p <= 1.0) {
            return None;
        }
        let max = self.max()?;
        if p >= 1.0 {
            return Some(max);
        }
        let need = (p * self.total as f64).ceil().max(1.0) as u64;
        let mut cum = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            cum += c;
            if cum >= need {
                return Some(bounds()[i].min(max));
            }
        }
        Some(max)
    }

    /// Exact mean of the sampled values.
    pub fn mean(&self) -> Option<f64> {
        (self.total > 0).then(|| self.sum as f64 / self.total as f64)
    }

    pub fn merge(&mut self, other: &LatencyHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        self.sum += other.sum;
        self.overflow += other.overflow;
        for r in other.maxima.iter() {
            self.observe_max(r.0);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeviceReport {
    /// Namespace slot of the DIMM.
    pub slot: usize,
    pub counters: DeviceCounters,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentReport {
    pub seed: u64,
    pub config_echo: String,
    /// Virtual time at which the last thread finished.
    pub duration_ns: u64,
    pub payload_bytes: u64,
    pub accesses: u64,
    pub thread_bytes: Vec<u64>,
    pub thread_duration_ns: Vec<u64>,
    /// Histograms keyed by access kind (`read` or `write`).
    pub latency: BTreeMap<String, LatencyHistogram>,
    /// One latency sample every `sample_every` accesses.
    pub sample_every: u64,
    pub devices: Vec<DeviceReport>,
    /// Summed device counters captured at each round marker.
    pub round_snapshots: Vec<DeviceCounters>,
    pub cache: CacheCounters,
    pub outstanding_wpq_peak_bytes: u64,
}

impl ExperimentReport {
    /// Aggregate bandwidth in bytes per virtual second.
    pub fn bandwidth(&self) -> f64 {
        if self.duration_ns == 0 {
            0.0
        } else {
            self.payload_bytes as f64 * 1e9 / self.duration_ns as f64
        }
    }

    pub fn thread_bandwidth(&self, t: usize) -> f64 {
        match self.thread_duration_ns.get(t) {
            Some(&d) if d > 0 => self.thread_bytes[t] as f64 * 1e9 / d as f64,
            _ => 0.0,
        }
    }

    pub fn total_counters(&self) -> DeviceCounters {
        let mut c = DeviceCounters::default();
        for d in &self.devices {
            c += d.counters;
        }
        c
    }

    pub fn ewr(&self) -> Option<f64> {
        self.total_counters().ewr()
    }

    /// Histogram of all access kinds together.
    pub fn all_latency(&self) -> LatencyHistogram {
        let mut h = LatencyHistogram::new();
        for v in self.latency.values() {
            h.merge(v);
        }
        h
    }

    pub fn round_ewr(&self) -> Vec<Option<f64>> {
        round_ewr(&self.round_snapshots)
    }
}

/// EWR of each round from counter snapshots taken at round boundaries.
pub fn round_ewr(snapshots: &[DeviceCounters]) -> Vec<Option<f64>> {
    snapshots
        .windows(2)
        .map(|w| {
            let d = w[1] - w[0];
            ewr(d.imc_write_bytes, d.media_write_bytes)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationDataset {
    /// (EWR, bandwidth in bytes/s), one row per report.
    pub rows: Vec<(Option<f64>, f64)>,
    pub pearson: Option<f64>,
}

pub fn correlation_dataset<'a>(reports: impl IntoIterator<Item = &'a ExperimentReport>) -> CorrelationDataset {
    let rows: Vec<(Option<f64>, f64)> = reports.into_iter().map(|r| (r.ewr(), r.bandwidth())).collect();
    let pts: Vec<(f64, f64)> = rows.iter().filter_map(|&(e, b)| e.map(|e| (e, b))).collect();
    CorrelationDataset { pearson: pearson(&pts), rows }
}

/// Pearson correlation; absent with fewer than two points or zero variance.
pub fn pearson(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pts {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_bin() {
        let mut h = LatencyHistogram::new();
        h.record(100);
        let p = h.percentile(0.5).unwrap();
        assert_eq!(p, 100);
        assert_eq!(h.percentile(1.0), Some(100));
    }

    #[test]
    fn uniform_p90_within_one_bin() {
        let mut h = LatencyHistogram::new();
        for v in 1..=1000 {
            h.record(v);
        }
        // exact-sort oracle
        let mut all: Vec<u64> = (1..=1000).collect();
        all.sort();
        let exact = all[(0.9f64 * 1000.0).ceil() as usize - 1];
        let p = h.percentile(0.9).unwrap();
        assert!(p >= exact && (p as f64) <= exact as f64 * BIN_RATIO * BIN_RATIO, "{p} vs {exact}");
    }

    #[test]
    fn max_is_exact() {
        let mut h = LatencyHistogram::new();
        for v in [5, 77_777, 12, 3_000_000_001] {
            h.record(v);
        }
        assert_eq!(h.percentile(1.0), Some(3_000_000_001));
        assert_eq!(LatencyHistogram::new().percentile(0.5), None);
    }

    #[test]
    fn bin_resolution() {
        let b = bounds();
        assert_eq!(b[0], 1);
        assert!(*b.last().unwrap() >= 1_000_000_000);
        for w in b.windows(2).filter(|w| w[0] > 1000) {
            assert!((w[1] as f64 / w[0] as f64) < 1.025);
        }
    }

    #[test]
    fn round_ewr_series() {
        let c = |imc, media| DeviceCounters { imc_write_bytes: imc, media_write_bytes: media, ..Default::default() };
        let s = round_ewr(&[c(0, 0), c(256, 256), c(512, 512), c(512, 512)]);
        assert_eq!(s, vec![Some(1.0), Some(1.0), None]);
    }

    #[test]
    fn correlation_edge_cases() {
        let r = ExperimentReport {
            duration_ns: 10,
            payload_bytes: 10,
            devices: vec![DeviceReport {
                slot: 0,
                counters: DeviceCounters { imc_write_bytes: 64, media_write_bytes: 256, ..Default::default() },
            }],
            ..Default::default()
        };
        let d = correlation_dataset([&r, &r]);
        assert_eq!(d.rows.len(), 2);
        assert_eq!(d.pearson, None);
        let p = pearson(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)]).unwrap();
        assert!((p - 1.0).abs() < 1e-12);
    }
}
