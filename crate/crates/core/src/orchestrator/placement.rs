use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mem_model::{
    effective_bandwidth, AccessPlan, ChannelId, Direction, Extent, HbmGeometry, RawPort, ShimPort,
    GB,
};

/// Calibrated fraction of the shim port peak each engine sustains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineCalibration {
    pub select_efficiency: f64,
    pub join_efficiency: f64,
    /// Probe initiation interval when collision handling is synthesized in.
    pub join_collision_ii: f64,
    /// Mean lockstep group cost assumed for a non-unique build side when no
    /// measurement is available.
    pub join_nonunique_group_cycles: f64,
    pub sgd_efficiency: f64,
}

impl Default for EngineCalibration {
    fn default() -> Self {
        Self {
            select_efficiency: 0.86,
            join_efficiency: 0.90,
            join_collision_ii: 5.5,
            join_nonunique_group_cycles: 1.15,
            sgd_efficiency: 0.87,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub geometry: HbmGeometry,
    /// Host link bandwidth available to one datamover, GB/s.
    pub host_link_gbps: f64,
    pub datamover_ports: [ShimPort; 2],
    /// Datamovers that can stream concurrently (1 or 2).
    pub active_datamovers: u32,
    pub calibration: EngineCalibration,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            geometry: HbmGeometry::default(),
            host_link_gbps: 6.0,
            datamover_ports: [ShimPort(0), ShimPort(15)],
            active_datamovers: 2,
            calibration: EngineCalibration::default(),
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let shim_ports = self.geometry.shim_port_count();
        let [a, b] = self.datamover_ports;
        if a == b || a.0 >= shim_ports || b.0 >= shim_ports {
            return Err(Error::config("datamovers need two distinct existing shim ports"));
        }
        if !(self.host_link_gbps.is_finite() && self.host_link_gbps > 0.0) {
            return Err(Error::config("host link bandwidth must be positive"));
        }
        if !(1..=2).contains(&self.active_datamovers) {
            return Err(Error::config("one or two datamovers can be active"));
        }
        let c = &self.calibration;
        for (name, eff) in [
            ("select", c.select_efficiency),
            ("join", c.join_efficiency),
            ("sgd", c.sgd_efficiency),
        ] {
            if !(eff > 0.0 && eff <= 1.0) {
                return Err(Error::config(format!("{name} efficiency must lie in (0, 1]")));
            }
        }
        if !(c.join_collision_ii >= 1.0 && c.join_nonunique_group_cycles >= 1.0) {
            return Err(Error::config("join stall factors must be at least 1"));
        }
        Ok(())
    }

    /// Shim ports left for compute engines, ascending.
    pub fn engine_ports(&self) -> Vec<ShimPort> {
        (0..self.geometry.shim_port_count())
            .map(ShimPort)
            .filter(|p| !self.datamover_ports.contains(p))
            .collect()
    }

    /// Shim ports of `num_engines` engines that each own `ports_per_engine`
    /// consecutive engine ports.
    pub fn assign_ports(&self, num_engines: usize, ports_per_engine: usize) -> Result<Vec<Vec<ShimPort>>> {
        let ports = self.engine_ports();
        let max = ports.len() / ports_per_engine.max(1);
        if num_engines == 0 || num_engines > max {
            return Err(Error::config(format!(
                "{num_engines} engines requested, 1..={max} fit on {} engine ports",
                ports.len()
            )));
        }
        Ok(ports
            .chunks(ports_per_engine)
            .take(num_engines)
            .map(<[ShimPort]>::to_vec)
            .collect())
    }
}

/// Seconds to move `bytes` between host memory and HBM.
pub fn host_transfer_time(config: &SystemConfig, bytes: u64, _direction: Direction) -> f64 {
    if bytes == 0 {
        return 0.0;
    }
    bytes as f64 / (config.host_link_gbps * GB * f64::from(config.active_datamovers))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlacementMode {
    /// Each engine's slice lives in its own channel pair.
    Partitioned,
    /// One contiguous copy from channel 0; engines work on slices of it.
    #[serde(alias = "nonpartitioned")]
    NonPartitioned,
    /// A full copy in every engine's channel pair.
    Replicated,
}

impl std::fmt::Display for PlacementMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlacementMode::Partitioned => "partitioned",
            PlacementMode::NonPartitioned => "nonpartitioned",
            PlacementMode::Replicated => "replicated",
        })
    }
}

impl std::str::FromStr for PlacementMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partitioned" => Ok(PlacementMode::Partitioned),
            "nonpartitioned" | "non-partitioned" => Ok(PlacementMode::NonPartitioned),
            "replicated" => Ok(PlacementMode::Replicated),
            other => Err(Error::config(format!("unknown placement `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PlacedExtent {
    pub extent: Extent,
    /// Raw port the engine reaches this extent through.
    pub raw_port: RawPort,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EnginePlacement {
    pub engine: usize,
    pub shim_port: ShimPort,
    pub extents: Vec<PlacedExtent>,
}

impl EnginePlacement {
    pub fn bytes(&self) -> u64 {
        self.extents.iter().map(|e| e.extent.len).sum()
    }

    pub fn raw_ports(&self) -> Vec<RawPort> {
        let mut ports: Vec<RawPort> = self.extents.iter().map(|e| e.raw_port).collect();
        ports.sort();
        ports.dedup();
        ports
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlacementPlan {
    pub mode: PlacementMode,
    pub data_size: u64,
    pub engines: Vec<EnginePlacement>,
}

impl PlacementPlan {
    /// Traffic of every engine reading (or writing) its extents once, with
    /// an optional per-engine consumption limit split over its raw ports.
    pub fn access_plan(&self, direction: Direction, engine_demand_gbps: Option<f64>) -> AccessPlan {
        let mut plan = AccessPlan::new();
        for engine in &self.engines {
            let total = engine.bytes();
            for placed in &engine.extents {
                plan.add(placed.raw_port, placed.extent, direction, 1);
            }
            if let Some(demand) = engine_demand_gbps {
                for port in engine.raw_ports() {
                    let on_port: u64 = engine
                        .extents
                        .iter()
                        .filter(|e| e.raw_port == port)
                        .map(|e| e.extent.len)
                        .sum();
                    plan.cap_port(port, demand * on_port as f64 / total as f64);
                }
            }
        }
        plan
    }

    /// Memory-side rate of every engine, GB/s.
    pub fn engine_rates(
        &self,
        geometry: &HbmGeometry,
        direction: Direction,
        engine_demand_gbps: Option<f64>,
    ) -> Result<Vec<f64>> {
        let report = effective_bandwidth(geometry, &self.access_plan(direction, engine_demand_gbps))?;
        Ok(self
            .engines
            .iter()
            .map(|e| e.raw_ports().iter().map(|p| report.port(*p)).sum())
            .collect())
    }

    /// Channels touched by each engine.
    pub fn engine_channels(&self, geometry: &HbmGeometry) -> Vec<Vec<ChannelId>> {
        self.engines
            .iter()
            .map(|e| {
                let mut chans: Vec<ChannelId> = e
                    .extents
                    .iter()
                    .flat_map(|p| p.extent.channel_bytes(geometry))
                    .map(|(c, _)| c)
                    .collect();
                chans.sort();
                chans.dedup();
                chans
            })
            .collect()
    }
}

/// Places data for single-port engines on the system's engine ports.
pub fn plan_placement(
    config: &SystemConfig,
    data_size: u64,
    num_engines: usize,
    mode: PlacementMode,
) -> Result<PlacementPlan> {
    let ports: Vec<ShimPort> = config
        .assign_ports(num_engines, 1)?
        .into_iter()
        .map(|p| p[0])
        .collect();
    plan_placement_on(config, data_size, &ports, mode)
}

/// Places data for engines reading through the given shim ports.
pub fn plan_placement_on(
    config: &SystemConfig,
    data_size: u64,
    ports: &[ShimPort],
    mode: PlacementMode,
) -> Result<PlacementPlan> {
    let g = &config.geometry;
    config.validate()?;
    if ports.is_empty() {
        return Err(Error::config("placement needs at least one engine"));
    }
    let mut homes = Vec::with_capacity(ports.len());
    for (i, &port) in ports.iter().enumerate() {
        if config.datamover_ports.contains(&port) {
            return Err(Error::config(format!("{port} belongs to a datamover")));
        }
        if ports[..i].contains(&port) {
            return Err(Error::config(format!("{port} assigned twice")));
        }
        let map = g.shim_port_map(port)?;
        homes.push(map.raw_ports);
    }
    let cap = g.channel_capacity;
    let engines = match mode {
        PlacementMode::Replicated => {
            if data_size > 2 * cap {
                return Err(Error::Capacity {
                    what: "replicated copy in one channel pair".into(),
                    needed: data_size,
                    available: 2 * cap,
                });
            }
            ports
                .iter()
                .zip(&homes)
                .enumerate()
                .map(|(engine, (&shim_port, &(lo, hi)))| EnginePlacement {
                    engine,
                    shim_port,
                    extents: split_over_pair(g, lo, hi, data_size),
                })
                .collect()
        }
        PlacementMode::NonPartitioned => {
            let limit = g.total_capacity();
            if data_size > limit {
                return Err(Error::Capacity {
                    what: "single copy".into(),
                    needed: data_size,
                    available: limit,
                });
            }
            naive_slices(data_size, ports.len())
                .into_iter()
                .zip(ports.iter().zip(&homes))
                .enumerate()
                .map(|(engine, ((start, len), (&shim_port, &(lo, _))))| EnginePlacement {
                    engine,
                    shim_port,
                    extents: nonempty(Extent { base: start, len }, lo),
                })
                .collect()
        }
        PlacementMode::Partitioned => partitioned(g, data_size, ports, &homes)?,
    };
    Ok(PlacementPlan {
        mode,
        data_size,
        engines,
    })
}

/// `len / n` bytes per slice, remainder to the last slice.
fn naive_slices(len: u64, n: usize) -> Vec<(u64, u64)> {
    let ps = len / n as u64;
    (0..n as u64)
        .map(|t| {
            let start = t * ps;
            let size = if t + 1 == n as u64 { len - start } else { ps };
            (start, size)
        })
        .collect()
}

fn nonempty(extent: Extent, port: RawPort) -> Vec<PlacedExtent> {
    if extent.len == 0 {
        Vec::new()
    } else {
        vec![PlacedExtent {
            extent,
            raw_port: port,
        }]
    }
}

fn split_over_pair(g: &HbmGeometry, lo: RawPort, hi: RawPort, len: u64) -> Vec<PlacedExtent> {
    let first = len.div_ceil(2);
    let mut out = nonempty(
        Extent {
            base: g.channel_start(ChannelId(lo.0)),
            len: first,
        },
        lo,
    );
    out.extend(nonempty(
        Extent {
            base: g.channel_start(ChannelId(hi.0)),
            len: len - first,
        },
        hi,
    ));
    out
}

/// Slices go to each engine's own channel pair; what does not fit spills
/// into channels no active engine owns.
fn partitioned(
    g: &HbmGeometry,
    data_size: u64,
    ports: &[ShimPort],
    homes: &[(RawPort, RawPort)],
) -> Result<Vec<EnginePlacement>> {
    let cap = g.channel_capacity;
    let owned: Vec<u32> = homes.iter().flat_map(|&(a, b)| [a.0, b.0]).collect();
    let mut spill_channels = (0..g.num_channels()).filter(|c| !owned.contains(c));
    let mut spill_cursor: Option<(u32, u64)> = None;
    let mut engines = Vec::with_capacity(ports.len());
    for (engine, ((_, len), (&shim_port, &(lo, hi)))) in naive_slices(data_size, ports.len())
        .into_iter()
        .zip(ports.iter().zip(homes))
        .enumerate()
    {
        let first = len.div_ceil(2).min(cap);
        let second = (len - first).min(cap);
        let mut extents = nonempty(
            Extent {
                base: g.channel_start(ChannelId(lo.0)),
                len: first,
            },
            lo,
        );
        extents.extend(nonempty(
            Extent {
                base: g.channel_start(ChannelId(hi.0)),
                len: second,
            },
            hi,
        ));
        let mut overflow = len - first - second;
        while overflow > 0 {
            let (channel, used) = match spill_cursor {
                Some((c, used)) if used < cap => (c, used),
                _ => match spill_channels.next() {
                    Some(c) => (c, 0),
                    None => {
                        return Err(Error::Capacity {
                            what: "partitioned placement".into(),
                            needed: data_size,
                            available: u64::from(g.num_channels()) * cap,
                        })
                    }
                },
            };
            let take = overflow.min(cap - used);
            let on = |port: RawPort, extents: &[PlacedExtent]| -> u64 {
                extents.iter().filter(|e| e.raw_port == port).map(|e| e.extent.len).sum()
            };
            // Keep the two raw ports of the pair evenly loaded.
            let raw_port = if on(lo, &extents) <= on(hi, &extents) { lo } else { hi };
            extents.push(PlacedExtent {
                extent: Extent {
                    base: g.channel_start(ChannelId(channel)) + used,
                    len: take,
                },
                raw_port,
            });
            spill_cursor = Some((channel, used + take));
            overflow -= take;
        }
        engines.push(EnginePlacement {
            engine,
            shim_port,
            extents,
        });
    }
    Ok(engines)
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;
    use crate::mem_model::MIB;

    fn check_invariants(config: &SystemConfig, plan: &PlacementPlan) {
        let g = &config.geometry;
        let all: Vec<Extent> = plan
            .engines
            .iter()
            .flat_map(|e| e.extents.iter().map(|p| p.extent))
            .collect();
        for e in &all {
            e.validate(g).unwrap();
        }
        if plan.mode != PlacementMode::Replicated {
            for (i, a) in all.iter().enumerate() {
                for b in &all[i + 1..] {
                    assert!(!a.overlaps(b), "{a} overlaps {b}");
                }
            }
        }
        for engine in &plan.engines {
            assert!(!config.datamover_ports.contains(&engine.shim_port));
            let map = g.shim_port_map(engine.shim_port).unwrap();
            for p in &engine.extents {
                assert!(p.raw_port == map.raw_ports.0 || p.raw_port == map.raw_ports.1);
            }
        }
        let total: u64 = plan.engines.iter().map(EnginePlacement::bytes).sum();
        match plan.mode {
            PlacementMode::Replicated => assert_eq!(total, plan.data_size * plan.engines.len() as u64),
            _ => assert_eq!(total, plan.data_size),
        }
    }

    #[test]
    fn partitioned_512mb_over_14_engines() {
        let config = SystemConfig::default();
        let plan = plan_placement(&config, 512_000_000, 14, PlacementMode::Partitioned).unwrap();
        check_invariants(&config, &plan);
        assert_eq!(plan.engines.len(), 14);
        let chans = plan.engine_channels(&config.geometry);
        for (engine, c) in plan.engines.iter().zip(&chans) {
            assert!((engine.bytes() as f64 - 36.57e6).abs() < 0.01e6);
            let (lo, hi) = config.geometry.home_channels(engine.shim_port).unwrap();
            assert_eq!(c, &vec![lo, hi]);
        }
        let mut flat: Vec<_> = chans.concat();
        flat.sort();
        flat.dedup();
        assert_eq!(flat.len(), 28);
    }

    #[test]
    fn replicated_im_dataset_fits() {
        let config = SystemConfig::default();
        let plan = plan_placement(&config, 340_800_000, 14, PlacementMode::Replicated).unwrap();
        check_invariants(&config, &plan);
    }

    #[test]
    fn replicated_600mib_is_rejected() {
        let config = SystemConfig::default();
        let err = plan_placement(&config, 600 * MIB, 14, PlacementMode::Replicated).unwrap_err();
        assert!(matches!(err, Error::Capacity { .. }));
    }

    #[test]
    fn nonpartitioned_starts_at_channel_zero() {
        let config = SystemConfig::default();
        let plan = plan_placement(&config, 512_000_000, 14, PlacementMode::NonPartitioned).unwrap();
        check_invariants(&config, &plan);
        assert_eq!(plan.engines[0].extents[0].extent.base, 0);
        let chans: Vec<_> = plan.engine_channels(&config.geometry).concat();
        assert!(chans.iter().all(|c| c.0 <= 1));
    }

    #[test]
    fn oversized_partitions_spill_to_free_channels() {
        let config = SystemConfig::default();
        let plan = plan_placement(&config, 2_048_000_000, 1, PlacementMode::Partitioned).unwrap();
        check_invariants(&config, &plan);
        let rates = plan
            .engine_rates(&config.geometry, Direction::Read, Some(11.0))
            .unwrap();
        assert_relative_eq!(rates[0], 11.0, max_relative = 1e-9);
        assert!(plan_placement(&config, 9 * (1 << 30), 1, PlacementMode::Partitioned).is_err());
    }

    #[test]
    fn engine_counts_are_bounded() {
        let config = SystemConfig::default();
        assert_eq!(config.engine_ports().len(), 14);
        assert!(plan_placement(&config, 1024, 15, PlacementMode::Partitioned).is_err());
        assert!(plan_placement(&config, 1024, 0, PlacementMode::Partitioned).is_err());
        assert_eq!(config.assign_ports(7, 2).unwrap().len(), 7);
        assert!(config.assign_ports(8, 2).is_err());
    }

    #[test]
    fn host_transfer_examples() {
        let config = SystemConfig {
            host_link_gbps: 25.0,
            ..SystemConfig::default()
        };
        assert_eq!(host_transfer_time(&config, 0, Direction::Read), 0.0);
        assert_relative_eq!(host_transfer_time(&config, 2_000_000_000, Direction::Write), 0.04);
        let single = SystemConfig {
            active_datamovers: 1,
            ..config
        };
        assert_relative_eq!(host_transfer_time(&single, 2_000_000_000, Direction::Write), 0.08);
    }

    #[test]
    fn partitioned_beats_nonpartitioned_memory_rate() {
        let config = SystemConfig::default();
        let g = &config.geometry;
        let part = plan_placement(&config, 512_000_000, 14, PlacementMode::Partitioned).unwrap();
        let non = plan_placement(&config, 512_000_000, 14, PlacementMode::NonPartitioned).unwrap();
        let p: f64 = part.engine_rates(g, Direction::Read, None).unwrap().iter().sum();
        let n: f64 = non.engine_rates(g, Direction::Read, None).unwrap().iter().sum();
        assert_relative_eq!(p, 14.0 * 2.0 * g.channel_peak_gbps(), max_relative = 1e-9);
        // The copy fills channel 0 and most of channel 1; the engine whose
        // slice straddles both is held back by the busier channel.
        assert!(n <= 2.0 * g.channel_peak_gbps() + 1e-9);
        assert!(n > 1.9 * g.channel_peak_gbps());
    }
}
