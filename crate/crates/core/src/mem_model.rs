//! HBM address space, channel mapping, shim port merging and a fair-share
//! crossbar contention model.
//!
//! The memory is a set of equally sized channels laid out back to back in
//! the physical address space. Every raw port can reach every channel
//! through the crossbar; when several ports hit the same channel they split
//! its bandwidth. The shim pairs raw port `p` of the first stack with raw
//! port `p + channels_per_stack` of the second one and applies a constant
//! one-stack offset to the second port.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;
/// Bandwidths are reported in decimal gigabytes per second.
pub const GB: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChannelId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RawPort(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ShimPort(pub u32);

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ch{}", self.0)
    }
}

impl fmt::Display for RawPort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "raw{}", self.0)
    }
}

impl fmt::Display for ShimPort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "shim{}", self.0)
    }
}

/// Physical memory map and port parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HbmGeometry {
    pub num_stacks: u32,
    pub channels_per_stack: u32,
    /// Bytes per pseudo channel.
    pub channel_capacity: u64,
    pub raw_port_width_bits: u32,
    pub shim_port_width_bits: u32,
    pub clock_hz: f64,
    /// Fraction of a channel's raw peak that sequential traffic sustains.
    pub efficiency: f64,
}

impl Default for HbmGeometry {
    fn default() -> Self {
        Self {
            num_stacks: 2,
            channels_per_stack: 16,
            channel_capacity: 256 * MIB,
            raw_port_width_bits: 256,
            shim_port_width_bits: 512,
            clock_hz: 200e6,
            efficiency: 0.93,
        }
    }
}

impl HbmGeometry {
    /// The 300 MHz port clock with its recalibrated sequential efficiency.
    pub fn at_300mhz() -> Self {
        Self {
            clock_hz: 300e6,
            efficiency: 0.92,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stacks == 0 || self.channels_per_stack == 0 {
            return Err(Error::config("geometry needs at least one stack and one channel"));
        }
        if self.channel_capacity == 0 {
            return Err(Error::config("channel capacity must be positive"));
        }
        if self.raw_port_width_bits == 0 || self.raw_port_width_bits % 8 != 0 {
            return Err(Error::config("raw port width must be a positive multiple of 8 bits"));
        }
        if self.shim_port_width_bits != 2 * self.raw_port_width_bits {
            return Err(Error::config("a shim port merges exactly two raw ports"));
        }
        if !(self.clock_hz.is_finite() && self.clock_hz > 0.0) {
            return Err(Error::config("clock must be positive"));
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::config("efficiency must lie in (0, 1]"));
        }
        let channels = u64::from(self.num_stacks) * u64::from(self.channels_per_stack);
        if channels > 4096 {
            return Err(Error::config("at most 4096 channels are supported"));
        }
        self.channel_capacity
            .checked_mul(channels)
            .ok_or_else(|| Error::config("total capacity overflows 64 bits"))?;
        Ok(())
    }

    pub fn num_channels(&self) -> u32 {
        self.num_stacks * self.channels_per_stack
    }

    pub fn raw_port_count(&self) -> u32 {
        self.num_channels()
    }

    pub fn shim_port_count(&self) -> u32 {
        self.raw_port_count() / 2
    }

    pub fn total_capacity(&self) -> u64 {
        self.channel_capacity * u64::from(self.num_channels())
    }

    /// Address space of one stack; also the shim's second-port offset.
    pub fn stack_bytes(&self) -> u64 {
        self.channel_capacity * u64::from(self.channels_per_stack)
    }

    pub fn raw_port_peak_gbps(&self) -> f64 {
        f64::from(self.raw_port_width_bits / 8) * self.clock_hz / GB
    }

    pub fn shim_port_peak_gbps(&self) -> f64 {
        f64::from(self.shim_port_width_bits / 8) * self.clock_hz / GB
    }

    /// Sustained bandwidth of one channel.
    pub fn channel_peak_gbps(&self) -> f64 {
        self.raw_port_peak_gbps() * self.efficiency
    }

    pub fn channel_of(&self, address: u64) -> Result<ChannelId> {
        let limit = self.total_capacity();
        if address >= limit {
            return Err(Error::AddressRange { address, limit });
        }
        Ok(ChannelId((address / self.channel_capacity) as u32))
    }

    pub fn channel_start(&self, channel: ChannelId) -> u64 {
        u64::from(channel.0) * self.channel_capacity
    }

    pub fn stack_of(&self, channel: ChannelId) -> u32 {
        channel.0 / self.channels_per_stack
    }

    pub fn shim_port_map(&self, shim: ShimPort) -> Result<ShimPortMap> {
        if self.num_stacks != 2 {
            return Err(Error::config("port merging requires exactly two stacks"));
        }
        if shim.0 >= self.shim_port_count() {
            return Err(Error::config(format!(
                "shim port {} out of range (0..{})",
                shim.0,
                self.shim_port_count()
            )));
        }
        Ok(ShimPortMap {
            shim_port: shim,
            raw_ports: (RawPort(shim.0), RawPort(shim.0 + self.channels_per_stack)),
            second_port_offset: self.stack_bytes(),
        })
    }

    /// The channel pair a shim port owns in an ideally separated layout.
    pub fn home_channels(&self, shim: ShimPort) -> Result<(ChannelId, ChannelId)> {
        let map = self.shim_port_map(shim)?;
        Ok((ChannelId(map.raw_ports.0 .0), ChannelId(map.raw_ports.1 .0)))
    }
}

/// A byte range of the physical address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Extent {
    pub base: u64,
    pub len: u64,
}

impl Extent {
    pub fn new(geometry: &HbmGeometry, base: u64, len: u64) -> Result<Self> {
        let extent = Extent { base, len };
        extent.validate(geometry)?;
        Ok(extent)
    }

    pub fn end(&self) -> u64 {
        self.base + self.len
    }

    pub fn validate(&self, geometry: &HbmGeometry) -> Result<()> {
        let limit = geometry.total_capacity();
        if self.len == 0 {
            return Err(Error::config(format!("empty extent at {:#x}", self.base)));
        }
        match self.base.checked_add(self.len) {
            Some(end) if end <= limit => Ok(()),
            _ => Err(Error::AddressRange {
                address: self.base.saturating_add(self.len - 1),
                limit,
            }),
        }
    }

    pub fn overlaps(&self, other: &Extent) -> bool {
        self.base < other.end() && other.base < self.end()
    }

    /// Bytes of this extent falling into each channel, in channel order.
    pub fn channel_bytes(&self, geometry: &HbmGeometry) -> Vec<(ChannelId, u64)> {
        let mut out = Vec::new();
        let mut cursor = self.base;
        let end = self.end();
        while cursor < end {
            let channel = ChannelId((cursor / geometry.channel_capacity) as u32);
            let boundary = geometry.channel_start(channel) + geometry.channel_capacity;
            let stop = boundary.min(end);
            out.push((channel, stop - cursor));
            cursor = stop;
        }
        out
    }
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:#x}, {:#x})", self.base, self.end())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShimPortMap {
    pub shim_port: ShimPort,
    pub raw_ports: (RawPort, RawPort),
    pub second_port_offset: u64,
}

/// Splits an access made through a shim port onto its two raw ports.
///
/// Shim addresses live in the first stack. The part of the extent inside
/// the channel that holds `extent.base` goes to the first raw port; the
/// remainder is redirected to the second raw port at the same channel
/// position one stack higher, so the access never crosses into a third
/// channel.
pub fn shim_resolve(
    geometry: &HbmGeometry,
    shim: ShimPort,
    extent: Extent,
) -> Result<Vec<(RawPort, Extent)>> {
    let map = geometry.shim_port_map(shim)?;
    if extent.len == 0 {
        return Err(Error::config("empty shim access"));
    }
    let pair_capacity = 2 * geometry.channel_capacity;
    if extent.len > pair_capacity {
        return Err(Error::Capacity {
            what: format!("access through {shim}"),
            needed: extent.len,
            available: pair_capacity,
        });
    }
    let stack = geometry.stack_bytes();
    if extent.base >= stack {
        return Err(Error::AddressRange {
            address: extent.base,
            limit: stack,
        });
    }
    let channel = ChannelId((extent.base / geometry.channel_capacity) as u32);
    let channel_start = geometry.channel_start(channel);
    let channel_end = channel_start + geometry.channel_capacity;
    let first_len = extent.len.min(channel_end - extent.base);
    let rest = extent.len - first_len;
    let mut out = vec![(
        map.raw_ports.0,
        Extent {
            base: extent.base,
            len: first_len,
        },
    )];
    if rest > 0 {
        if rest > geometry.channel_capacity {
            return Err(Error::Capacity {
                what: format!("second-stack half of {extent} through {shim}"),
                needed: rest,
                available: geometry.channel_capacity,
            });
        }
        out.push((
            map.raw_ports.1,
            Extent {
                base: channel_start + map.second_port_offset,
                len: rest,
            },
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Read,
    Write,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Read => "read",
            Direction::Write => "write",
        })
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "read" => Ok(Direction::Read),
            "write" => Ok(Direction::Write),
            other => Err(Error::config(format!("unknown direction `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub extent: Extent,
    pub direction: Direction,
    pub iterations: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PortTraffic {
    pub accesses: Vec<Access>,
    /// Rate the client behind the port can absorb, if below the port peak.
    pub demand_gbps: Option<f64>,
}

/// Per-port traffic description fed to [`effective_bandwidth`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccessPlan {
    ports: BTreeMap<RawPort, PortTraffic>,
}

impl AccessPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, port: RawPort, extent: Extent, direction: Direction, iterations: u64) {
        self.ports.entry(port).or_default().accesses.push(Access {
            extent,
            direction,
            iterations,
        });
    }

    /// Limits what the port's client consumes. Repeated caps keep the lowest.
    pub fn cap_port(&mut self, port: RawPort, gbps: f64) {
        let traffic = self.ports.entry(port).or_default();
        traffic.demand_gbps = Some(traffic.demand_gbps.map_or(gbps, |d| d.min(gbps)));
    }

    pub fn ports(&self) -> impl Iterator<Item = (&RawPort, &PortTraffic)> {
        self.ports.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.ports.values().all(|t| t.accesses.is_empty())
    }

    pub fn validate(&self, geometry: &HbmGeometry) -> Result<()> {
        for (port, traffic) in &self.ports {
            if port.0 >= geometry.raw_port_count() {
                return Err(Error::config(format!("{port} does not exist")));
            }
            if let Some(d) = traffic.demand_gbps {
                if !(d.is_finite() && d >= 0.0) {
                    return Err(Error::config(format!("{port}: invalid demand {d}")));
                }
            }
            for access in &traffic.accesses {
                access.extent.validate(geometry)?;
                if access.iterations == 0 {
                    return Err(Error::config(format!("{port}: zero iterations")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BandwidthReport {
    pub per_port: BTreeMap<RawPort, f64>,
    /// Bandwidth each channel actually delivers.
    pub per_channel: BTreeMap<ChannelId, f64>,
    pub aggregate_gbps: f64,
}

impl BandwidthReport {
    pub fn port(&self, port: RawPort) -> f64 {
        self.per_port.get(&port).copied().unwrap_or(0.0)
    }
}

/// Max-min fair split of `capacity` among clients with the given demands.
pub(crate) fn water_fill(capacity: f64, demands: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..demands.len()).collect();
    order.sort_by(|&a, &b| demands[a].total_cmp(&demands[b]).then(a.cmp(&b)));
    let mut shares = vec![0.0; demands.len()];
    let mut remaining = capacity;
    for (served, &i) in order.iter().enumerate() {
        let level = remaining / (order.len() - served) as f64;
        let share = demands[i].min(level);
        shares[i] = share;
        remaining -= share;
    }
    shares
}

/// Steady-state bandwidth of every port under crossbar contention.
///
/// Each port spreads its demand over the channels it touches in proportion
/// to the bytes it moves there. A channel splits its sustained bandwidth
/// max-min fairly among the ports touching it, and a port runs at the rate
/// its scarcest channel allows, never above its own peak.
pub fn effective_bandwidth(geometry: &HbmGeometry, plan: &AccessPlan) -> Result<BandwidthReport> {
    geometry.validate()?;
    plan.validate(geometry)?;

    struct Demand {
        port: RawPort,
        cap: f64,
        fractions: BTreeMap<ChannelId, f64>,
    }

    let port_peak = geometry.raw_port_peak_gbps();
    let mut demands = Vec::new();
    for (&port, traffic) in plan.ports() {
        let mut bytes: BTreeMap<ChannelId, u64> = BTreeMap::new();
        for access in &traffic.accesses {
            for (channel, b) in access.extent.channel_bytes(geometry) {
                *bytes.entry(channel).or_default() += b * access.iterations;
            }
        }
        let total: u64 = bytes.values().sum();
        if total == 0 {
            continue;
        }
        let fractions = bytes
            .into_iter()
            .map(|(c, b)| (c, b as f64 / total as f64))
            .collect();
        let cap = traffic.demand_gbps.map_or(port_peak, |d| d.min(port_peak));
        demands.push(Demand {
            port,
            cap,
            fractions,
        });
    }

    let mut contenders: BTreeMap<ChannelId, Vec<(usize, f64)>> = BTreeMap::new();
    for (i, d) in demands.iter().enumerate() {
        for (&channel, &f) in &d.fractions {
            contenders.entry(channel).or_default().push((i, d.cap * f));
        }
    }

    let channel_peak = geometry.channel_peak_gbps();
    let mut rates: Vec<f64> = demands.iter().map(|d| d.cap).collect();
    for (channel, users) in &contenders {
        let wants: Vec<f64> = users.iter().map(|&(_, w)| w).collect();
        let shares = water_fill(channel_peak, &wants);
        for (&(i, _), share) in users.iter().zip(shares) {
            let f = demands[i].fractions[channel];
            rates[i] = rates[i].min(share / f);
        }
    }

    let mut report = BandwidthReport::default();
    for (d, &rate) in demands.iter().zip(&rates) {
        report.per_port.insert(d.port, rate);
        for (&channel, &f) in &d.fractions {
            *report.per_channel.entry(channel).or_default() += rate * f;
        }
    }
    report.aggregate_gbps = rates.iter().sum();
    Ok(report)
}
