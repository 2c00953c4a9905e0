//! Run configuration: a sectioned `key = value` text format.
//!
//! ```text
//! # comment
//! [topology]
//! interleave_bytes = 4KB
//! namespace_mode = single:0
//! [xp]
//! media_read_ns = 243ns
//! ```
//!
//! Lines are trimmed; blank lines and lines starting with `#` or `;` are
//! skipped. Section headers are `[name]`. Every key must belong to a known
//! section and appear in [`RunConfig::echo`]; anything else is rejected.
//!
//! Integer values may carry a unit suffix matching the key's kind:
//! sizes take `B`, `KB`/`KiB`, `MB`/`MiB`, `GB`/`GiB` (all powers of 1024);
//! nanosecond times take `ps` (must be whole ns), `ns`, `us`, `ms`, `s`;
//! picosecond times take `ps`, `ns`, `us`. Plain integers are in the key's
//! base unit. `_` may separate digits. Booleans are `true`/`false`,
//! probabilities are decimal or scientific floats.
//!
//! Overrides use `section.key=value` with the same value syntax.

use std::fmt::Write as _;

use crate::devices::XpConfig;
use crate::engine::SimConfig;
use crate::error::{Result, SimError};
use crate::experiments::ExperimentSettings;
use crate::topology::{DeviceKind, NamespaceMode};
use crate::workload::{FlushPlacement, Instr, Pattern, RegionPolicy, WorkloadSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub settings: ExperimentSettings,
    pub seed: u64,
    /// Ad-hoc workload for `run` without `--experiment`.
    pub workload: WorkloadSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { settings: ExperimentSettings::default(), seed: 1, workload: WorkloadSpec::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unit {
    Plain,
    Bytes,
    Ns,
    Ps,
}

trait Value: Sized {
    fn read(s: &str, unit: Unit) -> std::result::Result<Self, String>;
    fn show(&self, unit: Unit) -> String;
}

fn split_suffix(s: &str) -> (&str, &str) {
    let i = s.find(|c: char| !(c.is_ascii_digit() || c == '_')).unwrap_or(s.len());
    (&s[..i], s[i..].trim())
}

fn read_u64(s: &str, unit: Unit) -> std::result::Result<u64, String> {
    let (digits, suffix) = split_suffix(s);
    let digits: String = digits.chars().filter(|&c| c != '_').collect();
    if digits.is_empty() {
        return Err(format!("`{s}` is not an integer"));
    }
    let n: u64 = digits.parse().map_err(|_| format!("`{s}` is out of range"))?;
    let lower = suffix.to_ascii_lowercase();
    let (mul, div) = match (unit, lower.as_str()) {
        (_, "") => (1, 1),
        (Unit::Bytes, "b") => (1, 1),
        (Unit::Bytes, "kb" | "kib" | "k") => (1 << 10, 1),
        (Unit::Bytes, "mb" | "mib" | "m") => (1 << 20, 1),
        (Unit::Bytes, "gb" | "gib" | "g") => (1 << 30, 1),
        (Unit::Ns, "ps") => (1, 1000),
        (Unit::Ns, "ns") => (1, 1),
        (Unit::Ns, "us") => (1_000, 1),
        (Unit::Ns, "ms") => (1_000_000, 1),
        (Unit::Ns, "s") => (1_000_000_000, 1),
        (Unit::Ps, "ps") => (1, 1),
        (Unit::Ps, "ns") => (1_000, 1),
        (Unit::Ps, "us") => (1_000_000, 1),
        _ => return Err(format!("unit `{suffix}` not valid here")),
    };
    if n % div != 0 {
        return Err(format!("`{s}` is not a whole number of base units"));
    }
    (n / div).checked_mul(mul).ok_or_else(|| format!("`{s}` is out of range"))
}

fn show_u64(v: u64, unit: Unit) -> String {
    let steps: &[(u64, &str)] = match unit {
        Unit::Plain => return v.to_string(),
        Unit::Bytes => &[(1 << 30, "GB"), (1 << 20, "MB"), (1 << 10, "KB"), (1, "B")],
        Unit::Ns => &[(1_000_000_000, "s"), (1_000_000, "ms"), (1_000, "us"), (1, "ns")],
        Unit::Ps => &[(1_000_000, "us"), (1_000, "ns"), (1, "ps")],
    };
    for &(m, name) in steps {
        if v != 0 && v % m == 0 {
            return format!("{}{name}", v / m);
        }
    }
    format!("0{}", steps.last().unwrap().1)
}

impl Value for u64 {
    fn read(s: &str, unit: Unit) -> std::result::Result<Self, String> {
        read_u64(s, unit)
    }
    fn show(&self, unit: Unit) -> String {
        show_u64(*self, unit)
    }
}

impl Value for usize {
    fn read(s: &str, unit: Unit) -> std::result::Result<Self, String> {
        usize::try_from(read_u64(s, unit)?).map_err(|_| format!("`{s}` is out of range"))
    }
    fn show(&self, unit: Unit) -> String {
        show_u64(*self as u64, unit)
    }
}

impl Value for u32 {
    fn read(s: &str, unit: Unit) -> std::result::Result<Self, String> {
        u32::try_from(read_u64(s, unit)?).map_err(|_| format!("`{s}` is out of range"))
    }
    fn show(&self, unit: Unit) -> String {
        show_u64(*self as u64, unit)
    }
}

impl Value for f64 {
    fn read(s: &str, _: Unit) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("`{s}` is not finite"))
        }
    }
    fn show(&self, _: Unit) -> String {
        // shortest text that parses back to the same value
        format!("{self:?}")
    }
}

impl Value for bool {
    fn read(s: &str, _: Unit) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            _ => Err(format!("`{s}` is not a boolean")),
        }
    }
    fn show(&self, _: Unit) -> String {
        self.to_string()
    }
}

impl Value for Option<u64> {
    fn read(s: &str, unit: Unit) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("none") {
            Ok(None)
        } else {
            read_u64(s, unit).map(Some)
        }
    }
    fn show(&self, unit: Unit) -> String {
        self.map_or("none".into(), |v| show_u64(v, unit))
    }
}

impl Value for NamespaceMode {
    fn read(s: &str, _: Unit) -> std::result::Result<Self, String> {
        let l = s.to_ascii_lowercase();
        if l == "interleaved" {
            return Ok(NamespaceMode::Interleaved);
        }
        l.strip_prefix("single:")
            .and_then(|d| d.trim().parse().ok())
            .map(|dimm| NamespaceMode::Single { dimm })
            .ok_or_else(|| format!("`{s}` is neither `interleaved` nor `single:<dimm>`"))
    }
    fn show(&self, _: Unit) -> String {
        match self {
            NamespaceMode::Interleaved => "interleaved".into(),
            NamespaceMode::Single { dimm } => format!("single:{dimm}"),
        }
    }
}

macro_rules! enum_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn read(s: &str, _: Unit) -> std::result::Result<Self, String> {
                <$t>::parse(s).ok_or_else(|| format!("`{s}` is not a valid {}", stringify!($t)))
            }
            fn show(&self, _: Unit) -> String {
                self.as_str().to_string()
            }
        }
    )*};
}

enum_value!(DeviceKind, Pattern, Instr, FlushPlacement, RegionPolicy);

struct Field {
    section: &'static str,
    key: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> std::result::Result<(), String>,
}

macro_rules! fields {
    ($($sec:literal $key:literal $unit:ident => $($f:ident).+;)*) => {
        fn fields() -> Vec<Field> {
            vec![$(Field {
                section: $sec,
                key: $key,
                get: |c: &RunConfig| Value::show(&c.$($f).+, Unit::$unit),
                set: |c: &mut RunConfig, v: &str| {
                    c.$($f).+ = Value::read(v, Unit::$unit)?;
                    Ok(())
                },
            }),*]
        }
    };
}

fields! {
    "run" "seed" Plain => seed;
    "run" "ops_per_point" Plain => settings.ops_per_point;
    "run" "probe_rounds" Plain => settings.probe_rounds;
    "run" "sample_every" Plain => settings.sample_every;

    "topology" "sockets" Plain => settings.sim.topology.sockets;
    "topology" "imcs_per_socket" Plain => settings.sim.topology.imcs_per_socket;
    "topology" "channels_per_imc" Plain => settings.sim.topology.channels_per_imc;
    "topology" "dimms_per_channel" Plain => settings.sim.topology.dimms_per_channel;
    "topology" "interleave_bytes" Bytes => settings.sim.topology.interleave_bytes;
    "topology" "device_kind" Plain => settings.sim.topology.device_kind;
    "topology" "device_capacity" Bytes => settings.sim.topology.device_capacity;
    "topology" "namespace_socket" Plain => settings.sim.topology.namespace_socket;
    "topology" "namespace_mode" Plain => settings.sim.topology.namespace_mode;

    "cache" "capacity_bytes" Bytes => settings.sim.cache.capacity_bytes;
    "cache" "ways" Plain => settings.sim.cache.ways;
    "cache" "hit_ns" Ns => settings.sim.cache.hit_ns;
    "cache" "issue_ns" Ns => settings.sim.cache.issue_ns;
    "cache" "ntstore_issue_ns" Ns => settings.sim.cache.ntstore_issue_ns;
    "cache" "flush_issue_ns" Ns => settings.sim.cache.flush_issue_ns;
    "cache" "fence_ns" Ns => settings.sim.cache.fence_ns;
    "cache" "ntstore_fence_ns" Ns => settings.sim.cache.ntstore_fence_ns;
    "cache" "load_mlp" Plain => settings.sim.cache.load_mlp;
    "cache" "max_outstanding_writes" Plain => settings.sim.cache.max_outstanding_writes;

    "imc" "wpq_capacity_bytes" Bytes => settings.sim.imc.wpq_capacity_bytes;
    "imc" "per_thread_cap_bytes" Bytes => settings.sim.imc.per_thread_cap_bytes;
    "imc" "rpq_max_outstanding" Plain => settings.sim.imc.rpq_max_outstanding;
    "imc" "traversal_ns" Ns => settings.sim.imc.traversal_ns;
    "imc" "round_robin_drain" Plain => settings.sim.imc.round_robin_drain;
    "imc" "xp_read_slot_ps" Ps => settings.sim.imc.xp_read_slot_ps;
    "imc" "xp_write_slot_ps" Ps => settings.sim.imc.xp_write_slot_ps;

    "xp" "xpbuffer_lines" Plain => settings.sim.xp.xpbuffer_lines;
    "xp" "xpbuffer_sets" Plain => settings.sim.xp.xpbuffer_sets;
    "xp" "read_pool_lines" Plain => settings.sim.xp.read_pool_lines;
    "xp" "media_read_ns" Ns => settings.sim.xp.media_read_ns;
    "xp" "media_read_occupancy_ns" Ns => settings.sim.xp.media_read_occupancy_ns;
    "xp" "media_write_occupancy_ns" Ns => settings.sim.xp.media_write_occupancy_ns;
    "xp" "buffer_hit_ns" Ns => settings.sim.xp.buffer_hit_ns;
    "xp" "write_accept_ns" Ns => settings.sim.xp.write_accept_ns;
    "xp" "outlier_prob" Plain => settings.sim.xp.outlier_prob;
    "xp" "outlier_min_ns" Ns => settings.sim.xp.outlier_min_ns;
    "xp" "outlier_max_ns" Ns => settings.sim.xp.outlier_max_ns;

    "dram" "row_bytes" Bytes => settings.sim.dram.row_bytes;
    "dram" "banks" Plain => settings.sim.dram.banks;
    "dram" "row_hit_ns" Ns => settings.sim.dram.row_hit_ns;
    "dram" "row_miss_ns" Ns => settings.sim.dram.row_miss_ns;
    "dram" "write_ns" Ns => settings.sim.dram.write_ns;
    "dram" "transfer_ns" Ns => settings.sim.dram.transfer_ns;

    "link" "latency_ns" Ns => settings.sim.link.latency_ns;
    "link" "transfer_ns" Ns => settings.sim.link.transfer_ns;
    "link" "credits" Plain => settings.sim.link.credits;
    "link" "read_credits" Plain => settings.sim.link.read_credits;
    "link" "write_credits" Plain => settings.sim.link.write_credits;
    "link" "turnaround_ns" Ns => settings.sim.link.turnaround_ns;

    "engine" "thread_socket" Plain => settings.sim.thread_socket;
    "engine" "track_data" Plain => settings.sim.track_data;
    "engine" "max_time" Ns => settings.sim.max_time_ns;

    "workload" "pattern" Plain => workload.pattern;
    "workload" "region_base" Bytes => workload.region_base;
    "workload" "region_length" Bytes => workload.region_length;
    "workload" "access_bytes" Bytes => workload.access_bytes;
    "workload" "stride_bytes" Bytes => workload.stride_bytes;
    "workload" "hotspot_bytes" Bytes => workload.hotspot_bytes;
    "workload" "instr" Plain => workload.instr;
    "workload" "flush_placement" Plain => workload.flush_placement;
    "workload" "sfence_interval_bytes" Bytes => workload.sfence_interval_bytes;
    "workload" "read_fraction" Plain => workload.read_fraction;
    "workload" "delay_ns" Ns => workload.delay_ns;
    "workload" "threads" Plain => workload.threads;
    "workload" "thread_region_policy" Plain => workload.thread_region_policy;
    "workload" "dimm_fanout" Plain => workload.dimm_fanout;
    "workload" "ops_per_thread" Plain => workload.ops_per_thread;
    "workload" "fence_each_access" Plain => workload.fence_each_access;
    "workload" "warm_cache" Plain => workload.warm_cache;
}

impl RunConfig {
    /// Parse a configuration file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Apply a configuration file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| SimError::Parse { line: n + 1, msg: format!("unterminated section header `{line}`") })?;
                let name = name.trim().to_ascii_lowercase();
                if !fields().iter().any(|f| f.section == name) {
                    return Err(SimError::validation(name, "unknown section"));
                }
                section = Some(name);
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SimError::Parse { line: n + 1, msg: format!("expected `key = value`, got `{line}`") })?;
            let sec = section
                .as_deref()
                .ok_or_else(|| SimError::Parse { line: n + 1, msg: "key outside any section".into() })?;
            self.set(sec, k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Apply one `section.key=value` override.
    pub fn apply_override(&mut self, ov: &str) -> Result<()> {
        let (k, v) = ov
            .split_once('=')
            .ok_or_else(|| SimError::validation(ov, "override must look like section.key=value"))?;
        let (sec, key) = k
            .trim()
            .split_once('.')
            .ok_or_else(|| SimError::validation(k.trim(), "override key must be section.key"))?;
        self.set(&sec.to_ascii_lowercase(), key, v.trim())
    }

    /// Apply overrides, reporting every offending key at once.
    pub fn apply_overrides<'a>(&mut self, ovs: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let mut bad = Vec::new();
        for ov in ovs {
            if let Err(e) = self.apply_override(ov) {
                bad.push(match e {
                    SimError::Validation { key, msg } => format!("{key}: {msg}"),
                    other => other.to_string(),
                });
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(SimError::validation("overrides", bad.join("; ")))
        }
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let key = key.to_ascii_lowercase();
        let f = fields()
            .into_iter()
            .find(|f| f.section == section && f.key == key)
            .ok_or_else(|| SimError::validation(format!("{section}.{key}"), "unknown key"))?;
        (f.set)(self, value).map_err(|msg| SimError::validation(format!("{section}.{key}"), msg))
    }

    /// Every key with its current value, in file format.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut cur = "";
        for f in fields() {
            if f.section != cur {
                if !cur.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{}]", f.section);
                cur = f.section;
            }
            let _ = writeln!(out, "{} = {}", f.key, (f.get)(self));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.settings.validate()
    }

    pub fn sim(&self) -> &SimConfig {
        &self.settings.sim
    }

    pub fn xp(&self) -> &XpConfig {
        &self.settings.sim.xp
    }
}

/// Text of the defaults.
pub fn defaults_echo() -> String {
    RunConfig::default().echo()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = defaults_echo();
        assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn units() {
        assert_eq!(read_u64("16KB", Unit::Bytes), Ok(16384));
        assert_eq!(read_u64("1_000", Unit::Plain), Ok(1000));
        assert_eq!(read_u64("305ns", Unit::Ns), Ok(305));
        assert_eq!(read_u64("50us", Unit::Ns), Ok(50_000));
        assert_eq!(read_u64("3350ps", Unit::Ps), Ok(3350));
        assert!(read_u64("1500ps", Unit::Ns).is_err());
        assert!(read_u64("4KB", Unit::Ns).is_err());
        assert!(read_u64("x", Unit::Plain).is_err());
        assert_eq!(show_u64(16384, Unit::Bytes), "16KB");
        assert_eq!(show_u64(0, Unit::Ns), "0ns");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = RunConfig::parse("[xp]\nbogus = 1\n").unwrap_err();
        assert_eq!(e, SimError::validation("xp.bogus", "unknown key"));
        assert!(RunConfig::parse("[nowhere]\n").is_err());
        assert!(matches!(RunConfig::parse("k = 1\n"), Err(SimError::Parse { line: 1, .. })));
    }

    #[test]
    fn override_and_validation() {
        let mut c = RunConfig::default();
        c.apply_override("topology.interleave_bytes=3000").unwrap();
        let e = c.validate().unwrap_err();
        assert!(e.to_string().contains("power of two"), "{e}");
        let e = c.apply_overrides(["xp.nope=1", "cache.ways=x"]).unwrap_err();
        let s = e.to_string();
        assert!(s.contains("xp.nope") && s.contains("cache.ways"), "{s}");
    }

    #[test]
    fn file_sets_values() {
        let c = RunConfig::parse("# c\n[topology]\nnamespace_mode = single:3\n[xp]\nxpbuffer_lines = 16\noutlier_prob = 0\n")
            .unwrap();
        assert_eq!(c.sim().topology.namespace_mode, NamespaceMode::Single { dimm: 3 });
        assert_eq!(c.xp().xpbuffer_lines, 16);
        assert_eq!(c.xp().outlier_prob, 0.0);
    }
}
