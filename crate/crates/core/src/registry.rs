//! Device registration, tokens, resource probing and the eligibility gate.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::chain::Digest;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Honest,
    Poisoner,
    Straggler,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Honest => "honest",
            Role::Poisoner => "poisoner",
            Role::Straggler => "straggler",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "honest" => Ok(Role::Honest),
            "poisoner" => Ok(Role::Poisoner),
            "straggler" => Ok(Role::Straggler),
            other => Err(Error::InvalidArgument(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegistrationRecord {
    pub device_id: String,
    pub registered_at: u64,
    pub declared_role: Role,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviceToken {
    pub token: Digest,
    pub device_id: String,
}

impl DeviceToken {
    pub fn to_hex(&self) -> String {
        self.token.to_hex()
    }
}

/// `SHA-256(seed as u64 LE ‖ device_id)`.
pub fn derive_token(device_id: &str, seed: u64) -> Digest {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(device_id.as_bytes());
    Digest::of(&bytes)
}

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

string_enum!(Os {
    Linux => "linux",
    Windows => "windows",
    MacOs => "macos",
    Bsd => "bsd",
    Solaris => "solaris",
    Aix => "aix",
});

string_enum!(PythonSupport {
    Py27 => "py27",
    Py34Plus => "py34plus",
    PyPy => "pypy",
});

string_enum!(PowerSource {
    Desktop => "desktop",
    MobilePlugged => "mobile_plugged",
    MobileUnplugged => "mobile_unplugged",
});

/// Hardware and network snapshot of a device.
#[derive(Clone, Debug, PartialEq)]
pub struct ResourceProfile {
    pub os: Os,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub packets_sent: u64,
    pub packets_received: u64,
    pub packet_error: u64,
    pub packet_drop: u64,
    pub python_support: PythonSupport,
    pub power: PowerSource,
    pub battery_pct: f64,
    pub disk_total_gb: f64,
    pub disk_used_gb: f64,
    pub disk_free_gb: f64,
    pub logical_cpus: u32,
    pub physical_cpus: u32,
    pub cpu_util_pct: f64,
    pub virtual_mem_gb: f64,
    pub swap_mem_gb: f64,
}

impl Default for ResourceProfile {
    /// A healthy desktop with plenty of headroom.
    fn default() -> Self {
        ResourceProfile {
            os: Os::Linux,
            bytes_sent: 50_000_000,
            bytes_received: 200_000_000,
            packets_sent: 100_000,
            packets_received: 150_000,
            packet_error: 0,
            packet_drop: 10,
            python_support: PythonSupport::Py34Plus,
            power: PowerSource::Desktop,
            battery_pct: 100.0,
            disk_total_gb: 256.0,
            disk_used_gb: 128.0,
            disk_free_gb: 128.0,
            logical_cpus: 8,
            physical_cpus: 4,
            cpu_util_pct: 25.0,
            virtual_mem_gb: 16.0,
            swap_mem_gb: 4.0,
        }
    }
}

impl ResourceProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("resource profile: {m}")));
        if self.disk_used_gb + self.disk_free_gb > self.disk_total_gb + 1e-9 {
            return bad(format!(
                "disk used {} + free {} exceeds total {}",
                self.disk_used_gb, self.disk_free_gb, self.disk_total_gb
            ));
        }
        if [self.disk_used_gb, self.disk_free_gb, self.virtual_mem_gb, self.swap_mem_gb]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return bad("negative capacity".into());
        }
        if !(self.logical_cpus >= self.physical_cpus && self.physical_cpus >= 1) {
            return bad(format!("logical {} / physical {} cpus", self.logical_cpus, self.physical_cpus));
        }
        for (name, v) in [("battery_pct", self.battery_pct), ("cpu_util_pct", self.cpu_util_pct)] {
            if !(0.0..=100.0).contains(&v) {
                return bad(format!("{name} = {v}"));
            }
        }
        Ok(())
    }

    /// Dropped packets per packet sent; 0 when nothing was sent.
    pub fn packet_loss_ratio(&self) -> f64 {
        if self.packets_sent == 0 {
            0.0
        } else {
            self.packet_drop as f64 / self.packets_sent as f64
        }
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::InvalidArgument(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "os" => self.os = value.parse()?,
            "bytes_sent" => self.bytes_sent = p(key, value)?,
            "bytes_received" => self.bytes_received = p(key, value)?,
            "packets_sent" => self.packets_sent = p(key, value)?,
            "packets_received" => self.packets_received = p(key, value)?,
            "packet_error" => self.packet_error = p(key, value)?,
            "packet_drop" => self.packet_drop = p(key, value)?,
            "python_support" => self.python_support = value.parse()?,
            "power" => self.power = value.parse()?,
            "battery_pct" => self.battery_pct = p(key, value)?,
            "disk_total_gb" => self.disk_total_gb = p(key, value)?,
            "disk_used_gb" => self.disk_used_gb = p(key, value)?,
            "disk_free_gb" => self.disk_free_gb = p(key, value)?,
            "logical_cpus" => self.logical_cpus = p(key, value)?,
            "physical_cpus" => self.physical_cpus = p(key, value)?,
            "cpu_util_pct" => self.cpu_util_pct = p(key, value)?,
            "virtual_mem_gb" => self.virtual_mem_gb = p(key, value)?,
            "swap_mem_gb" => self.swap_mem_gb = p(key, value)?,
            other => return Err(Error::InvalidArgument(format!("unknown resource field `{other}`"))),
        }
        Ok(())
    }
}

/// Minimum requirements for taking part in a round.
#[derive(Clone, Debug, PartialEq)]
pub struct EligibilityPolicy {
    pub min_free_disk_gb: f64,
    /// Only checked for unplugged mobile devices.
    pub min_battery_pct_unplugged: f64,
    pub max_cpu_util_pct: f64,
    pub min_virtual_mem_gb: f64,
    pub max_packet_loss_ratio: f64,
}

impl Default for EligibilityPolicy {
    fn default() -> Self {
        EligibilityPolicy {
            min_free_disk_gb: 1.0,
            min_battery_pct_unplugged: 20.0,
            max_cpu_util_pct: 90.0,
            min_virtual_mem_gb: 0.5,
            max_packet_loss_ratio: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RejectReason {
    Disk,
    Battery,
    Cpu,
    Memory,
    Network,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Eligibility {
    Eligible,
    Rejected(RejectReason),
}

impl Eligibility {
    pub fn is_eligible(&self) -> bool {
        matches!(self, Eligibility::Eligible)
    }
}

/// Checks disk, battery, cpu, memory and network in that order and reports
/// the first failure.
pub fn check_eligibility(profile: &ResourceProfile, policy: &EligibilityPolicy) -> Eligibility {
    use RejectReason::*;
    let checks = [
        (Disk, profile.disk_free_gb >= policy.min_free_disk_gb),
        (
            Battery,
            profile.power != PowerSource::MobileUnplugged
                || profile.battery_pct >= policy.min_battery_pct_unplugged,
        ),
        (Cpu, profile.cpu_util_pct <= policy.max_cpu_util_pct),
        (Memory, profile.virtual_mem_gb >= policy.min_virtual_mem_gb),
        (Network, profile.packet_loss_ratio() <= policy.max_packet_loss_ratio),
    ];
    match checks.into_iter().find(|(_, ok)| !ok) {
        Some((reason, _)) => Eligibility::Rejected(reason),
        None => Eligibility::Eligible,
    }
}

/// Source of device resource snapshots.
pub trait ResourceProbe: Send + Sync {
    fn probe(&self, device_id: &str) -> Result<ResourceProfile>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedDevice {
    pub profile: ResourceProfile,
    pub offline: bool,
}

/// Returns configured profiles; offline devices time out.
#[derive(Clone, Debug, Default)]
pub struct SimulatedProbe {
    devices: HashMap<String, SimulatedDevice>,
    fallback: ResourceProfile,
}

impl SimulatedProbe {
    pub fn new(fallback: ResourceProfile) -> Self {
        SimulatedProbe { devices: HashMap::new(), fallback }
    }

    pub fn configure(&mut self, device_id: &str, device: SimulatedDevice) {
        self.devices.insert(device_id.to_owned(), device);
    }
}

impl ResourceProbe for SimulatedProbe {
    fn probe(&self, device_id: &str) -> Result<ResourceProfile> {
        match self.devices.get(device_id) {
            Some(d) if d.offline => Err(Error::ProbeTimeout(device_id.to_owned())),
            Some(d) => Ok(d.profile.clone()),
            None => Ok(self.fallback.clone()),
        }
    }
}

/// Reads the machine the simulator runs on (Linux `/proc` and `statvfs`).
/// Every device maps to the same host.
#[derive(Clone, Debug, Default)]
pub struct HostProbe;

fn meminfo_gb(text: &str, key: &str) -> Option<f64> {
    text.lines()
        .find(|l| l.starts_with(key))
        .and_then(|l| l.split_whitespace().nth(1))
        .and_then(|kb| kb.parse::<f64>().ok())
        .map(|kb| kb / (1024.0 * 1024.0))
}

fn disk_gb(path: &str) -> Option<(f64, f64, f64)> {
    let c = std::ffi::CString::new(path).ok()?;
    let mut st: libc::statvfs = unsafe { std::mem::zeroed() };
    // SAFETY: `c` is a valid NUL-terminated path and `st` a writable statvfs.
    if unsafe { libc::statvfs(c.as_ptr(), &mut st) } != 0 {
        return None;
    }
    let gb = |blocks: u64| blocks as f64 * st.f_frsize as f64 / 1e9;
    let total = gb(st.f_blocks as u64);
    let free = gb(st.f_bavail as u64);
    let used = total - gb(st.f_bfree as u64);
    Some((total, used, free))
}

impl ResourceProbe for HostProbe {
    fn probe(&self, _device_id: &str) -> Result<ResourceProfile> {
        let mut p = ResourceProfile { power: PowerSource::Desktop, ..ResourceProfile::default() };
        let logical = std::thread::available_parallelism().map_or(1, |n| n.get() as u32);
        p.logical_cpus = logical;
        p.physical_cpus = logical.min(p.physical_cpus).max(1);
        if let Ok(mem) = std::fs::read_to_string("/proc/meminfo") {
            if let Some(v) = meminfo_gb(&mem, "MemAvailable:") {
                p.virtual_mem_gb = v;
            }
            if let Some(v) = meminfo_gb(&mem, "SwapFree:") {
                p.swap_mem_gb = v;
            }
        }
        if let Ok(load) = std::fs::read_to_string("/proc/loadavg") {
            if let Some(l1) = load.split_whitespace().next().and_then(|v| v.parse::<f64>().ok()) {
                p.cpu_util_pct = (l1 / logical as f64 * 100.0).clamp(0.0, 100.0);
            }
        }
        if let Ok(net) = std::fs::read_to_string("/proc/net/dev") {
            let (mut rb, mut rp, mut re, mut rd, mut tb, mut tp, mut te, mut td) =
                (0u64, 0u64, 0u64, 0u64, 0u64, 0u64, 0u64, 0u64);
            for line in net.lines().skip(2) {
                let Some((_, rest)) = line.split_once(':') else { continue };
                let f: Vec<u64> = rest.split_whitespace().filter_map(|v| v.parse().ok()).collect();
                if f.len() >= 12 {
                    rb += f[0];
                    rp += f[1];
                    re += f[2];
                    rd += f[3];
                    tb += f[8];
                    tp += f[9];
                    te += f[10];
                    td += f[11];
                }
            }
            p.bytes_received = rb;
            p.packets_received = rp;
            p.bytes_sent = tb;
            p.packets_sent = tp;
            p.packet_error = re + te;
            p.packet_drop = rd + td;
        }
        if let Some((total, used, free)) = disk_gb("/") {
            p.disk_total_gb = total;
            p.disk_used_gb = used;
            p.disk_free_gb = free;
        }
        Ok(p)
    }
}

/// One line of a device roster.
#[derive(Clone, Debug, PartialEq)]
pub struct RosterEntry {
    pub device_id: String,
    pub role: Role,
    pub device: SimulatedDevice,
}

/// Parses a roster: one device per line as comma-separated fields
/// `device_id, role[, key=value ...]`. Keys are [`ResourceProfile`] fields or
/// `offline=true|false`. Blank lines and `#` comments are ignored.
pub fn parse_roster(text: &str) -> Result<Vec<RosterEntry>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: n + 1, msg };
        let mut fields = line.split(',').map(str::trim);
        let device_id =
            fields.next().filter(|s| !s.is_empty()).ok_or_else(|| err("missing device id".into()))?;
        let role: Role = fields
            .next()
            .ok_or_else(|| err("missing role".into()))?
            .parse()
            .map_err(|e: Error| err(e.to_string()))?;
        let mut device = SimulatedDevice { profile: ResourceProfile::default(), offline: false };
        for kv in fields.filter(|f| !f.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| err(format!("expected key=value, got `{kv}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "offline" {
                device.offline = v.parse().map_err(|_| err(format!("offline = `{v}`")))?;
            } else {
                device.profile.set(k, v).map_err(|e| err(e.to_string()))?;
            }
        }
        device.profile.validate().map_err(|e| err(e.to_string()))?;
        out.push(RosterEntry { device_id: device_id.to_owned(), role, device });
    }
    Ok(out)
}

pub fn load_roster(path: impl AsRef<Path>) -> Result<Vec<RosterEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_roster(&text)
}

/// Registered devices, their tokens, and the probe used to reach them.
pub struct Registry {
    seed: u64,
    records: BTreeMap<String, RegistrationRecord>,
    tokens: HashMap<Digest, String>,
    probe: Box<dyn ResourceProbe>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("seed", &self.seed)
            .field("records", &self.records)
            .finish_non_exhaustive()
    }
}

impl Registry {
    pub fn new(seed: u64, probe: Box<dyn ResourceProbe>) -> Self {
        Registry { seed, records: BTreeMap::new(), tokens: HashMap::new(), probe }
    }

    pub fn register(
        &mut self,
        device_id: &str,
        role: Role,
        round: u64,
    ) -> Result<(RegistrationRecord, DeviceToken)> {
        if self.records.contains_key(device_id) {
            return Err(Error::DuplicateDevice(device_id.to_owned()));
        }
        let record =
            RegistrationRecord { device_id: device_id.to_owned(), registered_at: round, declared_role: role };
        let token =
            DeviceToken { token: derive_token(device_id, self.seed), device_id: device_id.to_owned() };
        self.records.insert(device_id.to_owned(), record.clone());
        self.tokens.insert(token.token, device_id.to_owned());
        Ok((record, token))
    }

    pub fn record(&self, device_id: &str) -> Option<&RegistrationRecord> {
        self.records.get(device_id)
    }

    pub fn records(&self) -> impl Iterator<Item = &RegistrationRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn token_for(&self, device_id: &str) -> Option<DeviceToken> {
        self.records.contains_key(device_id).then(|| DeviceToken {
            token: derive_token(device_id, self.seed),
            device_id: device_id.to_owned(),
        })
    }

    /// Resolves a token to its device id.
    pub fn verify(&self, token: &Digest) -> Result<&str> {
        self.tokens.get(token).map(String::as_str).ok_or(Error::UnknownToken)
    }

    /// Pushes a probe request to the device holding `token`.
    pub fn ping_device(&self, token: &Digest) -> Result<ResourceProfile> {
        let device = self.verify(token)?;
        self.probe.probe(device)
    }
}
