//! Platform description and physical-address decoding.
//!
//! A namespace lives on one socket. In interleaved mode the namespace is
//! striped round-robin across every DIMM of that socket in
//! `interleave_bytes` chunks; in single-DIMM mode it maps linearly onto one
//! device.

use crate::error::{Result, SimError};

pub const LINE_BYTES: u64 = 64;
pub const XPLINE_BYTES: u64 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeviceKind {
    XpDimm,
    Dram,
}

impl DeviceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DeviceKind::XpDimm => "xpdimm",
            DeviceKind::Dram => "dram",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xpdimm" | "xp" | "optane" => Some(DeviceKind::XpDimm),
            "dram" => Some(DeviceKind::Dram),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NamespaceMode {
    Interleaved,
    Single { dimm: usize },
}

/// Global device identifier: `socket * dimms_per_socket + slot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DeviceId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlatformTopology {
    pub sockets: usize,
    pub imcs_per_socket: usize,
    pub channels_per_imc: usize,
    pub dimms_per_channel: usize,
    pub interleave_bytes: u64,
    pub device_kind: DeviceKind,
    pub device_capacity: u64,
    pub namespace_socket: usize,
    pub namespace_mode: NamespaceMode,
}

impl Default for PlatformTopology {
    fn default() -> Self {
        PlatformTopology {
            sockets: 2,
            imcs_per_socket: 2,
            channels_per_imc: 3,
            dimms_per_channel: 1,
            interleave_bytes: 4096,
            device_kind: DeviceKind::XpDimm,
            device_capacity: 1 << 30,
            namespace_socket: 0,
            namespace_mode: NamespaceMode::Interleaved,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DimmLocation {
    pub socket: usize,
    pub imc: usize,
    pub channel: usize,
    pub dimm: usize,
    pub offset: u64,
}

impl PlatformTopology {
    pub fn validate(&self) -> Result<()> {
        let ib = self.interleave_bytes;
        if !ib.is_power_of_two() || ib < LINE_BYTES {
            return Err(SimError::validation(
                "topology.interleave_bytes",
                format!("{ib} must be a power of two and >= 64"),
            ));
        }
        for (key, v) in [
            ("topology.sockets", self.sockets),
            ("topology.imcs_per_socket", self.imcs_per_socket),
            ("topology.channels_per_imc", self.channels_per_imc),
            ("topology.dimms_per_channel", self.dimms_per_channel),
        ] {
            if v == 0 {
                return Err(SimError::validation(key, "must be at least 1"));
            }
        }
        if self.device_capacity == 0 || self.device_capacity % ib != 0 {
            return Err(SimError::validation(
                "topology.device_capacity",
                format!("must be a non-zero multiple of interleave_bytes ({ib})"),
            ));
        }
        if self.namespace_socket >= self.sockets {
            return Err(SimError::validation(
                "topology.namespace_socket",
                format!("socket {} absent (sockets = {})", self.namespace_socket, self.sockets),
            ));
        }
        if let NamespaceMode::Single { dimm } = self.namespace_mode {
            if dimm >= self.dimms_per_socket() {
                return Err(SimError::validation(
                    "topology.namespace_dimm",
                    format!("dimm {dimm} absent ({} per socket)", self.dimms_per_socket()),
                ));
            }
        }
        Ok(())
    }

    pub fn dimms_per_socket(&self) -> usize {
        self.imcs_per_socket * self.channels_per_imc * self.dimms_per_channel
    }

    pub fn total_devices(&self) -> usize {
        self.sockets * self.dimms_per_socket()
    }

    pub fn stripe_bytes(&self) -> u64 {
        self.interleave_bytes * self.dimms_per_socket() as u64
    }

    /// Bytes addressable through the namespace.
    pub fn capacity(&self) -> u64 {
        match self.namespace_mode {
            NamespaceMode::Interleaved => self.device_capacity * self.dimms_per_socket() as u64,
            NamespaceMode::Single { .. } => self.device_capacity,
        }
    }

    /// DIMM slots (within the namespace socket) the namespace touches.
    pub fn namespace_slots(&self) -> Vec<usize> {
        match self.namespace_mode {
            NamespaceMode::Interleaved => (0..self.dimms_per_socket()).collect(),
            NamespaceMode::Single { dimm } => vec![dimm],
        }
    }

    pub fn namespace_devices(&self) -> Vec<DeviceId> {
        self.namespace_slots()
            .into_iter()
            .map(|s| DeviceId(self.namespace_socket * self.dimms_per_socket() + s))
            .collect()
    }

    fn slot_location(&self, socket: usize, slot: usize, offset: u64) -> DimmLocation {
        let per_imc = self.channels_per_imc * self.dimms_per_channel;
        DimmLocation {
            socket,
            imc: slot / per_imc,
            channel: (slot / self.dimms_per_channel) % self.channels_per_imc,
            dimm: slot % self.dimms_per_channel,
            offset,
        }
    }

    /// Slot index of a location within its socket.
    pub fn slot_of(&self, loc: &DimmLocation) -> usize {
        (loc.imc * self.channels_per_imc + loc.channel) * self.dimms_per_channel + loc.dimm
    }

    pub fn device_of(&self, loc: &DimmLocation) -> DeviceId {
        DeviceId(loc.socket * self.dimms_per_socket() + self.slot_of(loc))
    }

    pub fn decode_address(&self, addr: u64) -> Result<DimmLocation> {
        let capacity = self.capacity();
        if addr >= capacity {
            return Err(SimError::AddressOutOfRange { addr, capacity });
        }
        Ok(match self.namespace_mode {
            NamespaceMode::Interleaved => {
                let ib = self.interleave_bytes;
                let n = self.dimms_per_socket() as u64;
                let chunk = addr / ib;
                let slot = (chunk % n) as usize;
                let offset = (chunk / n) * ib + addr % ib;
                self.slot_location(self.namespace_socket, slot, offset)
            }
            NamespaceMode::Single { dimm } => self.slot_location(self.namespace_socket, dimm, addr),
        })
    }

    /// Decode straight to a global device id and device offset.
    pub fn decode_device(&self, addr: u64) -> Result<(DeviceId, u64)> {
        let loc = self.decode_address(addr)?;
        Ok((self.device_of(&loc), loc.offset))
    }

    pub fn encode_address(&self, loc: &DimmLocation) -> Result<u64> {
        if loc.socket != self.namespace_socket
            || loc.imc >= self.imcs_per_socket
            || loc.channel >= self.channels_per_imc
            || loc.dimm >= self.dimms_per_channel
            || loc.offset >= self.device_capacity
        {
            return Err(SimError::InvalidLocation(format!("{loc:?}")));
        }
        let slot = self.slot_of(loc);
        match self.namespace_mode {
            NamespaceMode::Interleaved => {
                let ib = self.interleave_bytes;
                let n = self.dimms_per_socket() as u64;
                let row = loc.offset / ib;
                Ok((row * n + slot as u64) * ib + loc.offset % ib)
            }
            NamespaceMode::Single { dimm } if dimm == slot => Ok(loc.offset),
            NamespaceMode::Single { .. } => Err(SimError::InvalidLocation(format!(
                "{loc:?} is not the namespace DIMM"
            ))),
        }
    }

    pub fn encode_device(&self, dev: DeviceId, offset: u64) -> Result<u64> {
        let dps = self.dimms_per_socket();
        let loc = self.slot_location(dev.0 / dps, dev.0 % dps, offset);
        self.encode_address(&loc)
    }

    /// The same platform with the namespace remapped linearly onto one DIMM.
    pub fn non_interleaved_view(&self, dimm: usize) -> Result<PlatformTopology> {
        if dimm >= self.dimms_per_socket() {
            return Err(SimError::InvalidLocation(format!(
                "dimm {dimm} out of range ({} per socket)",
                self.dimms_per_socket()
            )));
        }
        Ok(PlatformTopology {
            namespace_mode: NamespaceMode::Single { dimm },
            ..self.clone()
        })
    }
}
