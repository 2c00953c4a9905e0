//! Device models behind the iMC: the 3D XPoint DIMM and a plain DRAM DIMM.
//! Both take 64 B requests and keep iMC-side and media-side byte counters.

mod dram;
mod xpdimm;

pub use dram::{DramConfig, DramDimm};
pub use xpdimm::{XpConfig, XpDimm};

use std::collections::BTreeMap;
use std::ops::Sub;

pub type LineData = [u8; 64];

/// Hardware counters of one device.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DeviceCounters {
    pub imc_read_bytes: u64,
    pub imc_write_bytes: u64,
    pub media_read_bytes: u64,
    pub media_write_bytes: u64,
    pub outliers: u64,
}

impl DeviceCounters {
    pub fn ewr(&self) -> Option<f64> {
        ewr(self.imc_write_bytes, self.media_write_bytes)
    }
}

impl Sub for DeviceCounters {
    type Output = DeviceCounters;
    fn sub(self, o: DeviceCounters) -> DeviceCounters {
        DeviceCounters {
            imc_read_bytes: self.imc_read_bytes - o.imc_read_bytes,
            imc_write_bytes: self.imc_write_bytes - o.imc_write_bytes,
            media_read_bytes: self.media_read_bytes - o.media_read_bytes,
            media_write_bytes: self.media_write_bytes - o.media_write_bytes,
            outliers: self.outliers - o.outliers,
        }
    }
}

impl std::ops::AddAssign for DeviceCounters {
    fn add_assign(&mut self, o: DeviceCounters) {
        self.imc_read_bytes += o.imc_read_bytes;
        self.imc_write_bytes += o.imc_write_bytes;
        self.media_read_bytes += o.media_read_bytes;
        self.media_write_bytes += o.media_write_bytes;
        self.outliers += o.outliers;
    }
}

/// Effective write ratio: iMC-issued write bytes over media-written bytes.
/// Absent when nothing reached the media.
pub fn ewr(imc_write_bytes: u64, media_write_bytes: u64) -> Option<f64> {
    (media_write_bytes > 0).then(|| imc_write_bytes as f64 / media_write_bytes as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read64,
    Write64,
}

#[derive(Debug, Clone)]
pub enum Device {
    Xp(XpDimm),
    Dram(DramDimm),
}

impl Device {
    pub fn read64(&mut self, offset: u64, now: u64) -> crate::Result<(u64, LineData)> {
        match self {
            Device::Xp(d) => d.read64(offset, now),
            Device::Dram(d) => d.read64(offset, now),
        }
    }

    pub fn write64(&mut self, offset: u64, data: &LineData, mask: u64, now: u64) -> crate::Result<u64> {
        match self {
            Device::Xp(d) => d.write64(offset, data, mask, now),
            Device::Dram(d) => d.write64(offset, data, mask, now),
        }
    }

    pub fn counters(&self) -> DeviceCounters {
        match self {
            Device::Xp(d) => d.counters,
            Device::Dram(d) => d.counters,
        }
    }

    /// Write back any buffered dirty state (end of run or power-fail drain).
    pub fn flush_all(&mut self, now: u64) -> u64 {
        match self {
            Device::Xp(d) => d.flush_all(now),
            Device::Dram(_) => now,
        }
    }

    /// Persistent contents keyed by 64 B-aligned device offset.
    pub fn persistent_lines(&self) -> BTreeMap<u64, LineData> {
        match self {
            Device::Xp(d) => d.persistent_lines(),
            Device::Dram(d) => d.persistent_lines(),
        }
    }
}

/// Byte-wise merge: take `src` bytes where `mask` bit is set.
pub(crate) fn merge_masked(dst: &mut [u8], src: &[u8], mask: u64) {
    if mask == u64::MAX {
        dst.copy_from_slice(src);
        return;
    }
    for i in 0..64 {
        if mask >> i & 1 == 1 {
            dst[i] = src[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ewr_examples() {
        assert_eq!(ewr(64, 256), Some(0.25));
        assert_eq!(ewr(256, 256), Some(1.0));
        assert_eq!(ewr(512, 256), Some(2.0));
        assert_eq!(ewr(64, 0), None);
    }
}
