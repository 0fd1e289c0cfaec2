//! Standalone traffic generators and the bandwidth-versus-separation
//! microbenchmark.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mem_model::{
    effective_bandwidth, AccessPlan, Direction, Extent, HbmGeometry, RawPort, MIB,
};

/// The address separations swept by the reference experiment, in MiB.
pub const PRESET_SEPARATIONS_MIB: [u64; 5] = [256, 192, 128, 64, 0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficGeneratorConfig {
    pub port: RawPort,
    pub address: u64,
    pub size: u64,
    pub iterations: u64,
    pub direction: Direction,
}

impl TrafficGeneratorConfig {
    pub fn validate(&self, geometry: &HbmGeometry) -> Result<()> {
        if self.port.0 >= geometry.raw_port_count() {
            return Err(Error::config(format!("{} does not exist", self.port)));
        }
        if self.iterations == 0 {
            return Err(Error::config("a traffic generator needs at least one iteration"));
        }
        Extent::new(geometry, self.address, self.size).map(|_| ())
    }

    pub fn extent(&self) -> Extent {
        Extent {
            base: self.address,
            len: self.size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicrobenchSpec {
    /// Sweep runs k = 1..=num_ports.
    pub num_ports: u32,
    pub separation_mib: u64,
    pub direction: Direction,
    /// Bytes each generator moves per iteration.
    pub transfer_bytes: u64,
    pub iterations: u64,
}

impl Default for MicrobenchSpec {
    fn default() -> Self {
        Self {
            num_ports: 32,
            separation_mib: 256,
            direction: Direction::Read,
            transfer_bytes: MIB,
            iterations: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub num_ports: u32,
    pub aggregate_gbps: f64,
}

/// Start address of generator `tg_id` (1-based) for a separation in MiB.
pub fn tg_offset(geometry: &HbmGeometry, separation_mib: u64, tg_id: u32) -> Result<u64> {
    if tg_id == 0 || tg_id > geometry.raw_port_count() {
        return Err(Error::config(format!(
            "generator id {tg_id} outside 1..={}",
            geometry.raw_port_count()
        )));
    }
    let limit = geometry.total_capacity();
    let offset = separation_mib
        .checked_mul(MIB)
        .and_then(|s| s.checked_mul(u64::from(tg_id - 1)))
        .ok_or(Error::AddressRange {
            address: u64::MAX,
            limit,
        })?;
    if offset >= limit {
        return Err(Error::AddressRange {
            address: offset,
            limit,
        });
    }
    Ok(offset)
}

/// Generator settings for the first `k` ports of a sweep.
pub fn generators(
    geometry: &HbmGeometry,
    spec: &MicrobenchSpec,
    k: u32,
) -> Result<Vec<TrafficGeneratorConfig>> {
    (1..=k)
        .map(|tg_id| {
            let tg = TrafficGeneratorConfig {
                port: RawPort(tg_id - 1),
                address: tg_offset(geometry, spec.separation_mib, tg_id)?,
                size: spec.transfer_bytes,
                iterations: spec.iterations,
                direction: spec.direction,
            };
            tg.validate(geometry)?;
            Ok(tg)
        })
        .collect()
}

pub fn access_plan(tgs: &[TrafficGeneratorConfig]) -> AccessPlan {
    let mut plan = AccessPlan::new();
    for tg in tgs {
        plan.add(tg.port, tg.extent(), tg.direction, tg.iterations);
    }
    plan
}

/// Aggregate bandwidth for k = 1..=num_ports active generators.
pub fn run_microbenchmark(geometry: &HbmGeometry, spec: &MicrobenchSpec) -> Result<Vec<CurvePoint>> {
    if spec.num_ports == 0 || spec.num_ports > geometry.raw_port_count() {
        return Err(Error::config(format!(
            "port count {} outside 1..={}",
            spec.num_ports,
            geometry.raw_port_count()
        )));
    }
    (1..=spec.num_ports)
        .map(|k| {
            let tgs = generators(geometry, spec, k)?;
            let report = effective_bandwidth(geometry, &access_plan(&tgs))?;
            Ok(CurvePoint {
                num_ports: k,
                aggregate_gbps: report.aggregate_gbps,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;

    #[test]
    fn offset_examples() {
        let g = HbmGeometry::default();
        assert_eq!(tg_offset(&g, 256, 1).unwrap(), 0);
        assert_eq!(tg_offset(&g, 256, 2).unwrap(), 268_435_456);
        assert_eq!(tg_offset(&g, 64, 32).unwrap(), 2_080_374_784);
    }

    #[test]
    fn offset_errors() {
        let g = HbmGeometry::default();
        assert!(matches!(tg_offset(&g, 300, 32), Err(Error::AddressRange { .. })));
        assert!(tg_offset(&g, 256, 0).is_err());
        assert!(tg_offset(&g, 256, 33).is_err());
    }

    #[test]
    fn generator_must_fit() {
        let g = HbmGeometry::default();
        let tg = TrafficGeneratorConfig {
            port: RawPort(3),
            address: g.total_capacity() - 10,
            size: 11,
            iterations: 1,
            direction: Direction::Write,
        };
        assert!(tg.validate(&g).is_err());
    }

    #[test]
    fn ideal_curve_at_both_clocks() {
        let spec = MicrobenchSpec::default();
        let at200 = run_microbenchmark(&HbmGeometry::default(), &spec).unwrap();
        assert_eq!(at200.len(), 32);
        assert!((at200[31].aggregate_gbps - 190.0).abs() / 190.0 < 0.03);
        let at300 = run_microbenchmark(&HbmGeometry::at_300mhz(), &spec).unwrap();
        assert!((at300[31].aggregate_gbps - 282.0).abs() / 282.0 < 0.03);
    }

    #[test]
    fn one_port_ignores_separation() {
        let g = HbmGeometry::default();
        let one = |s| {
            let spec = MicrobenchSpec {
                num_ports: 1,
                separation_mib: s,
                ..MicrobenchSpec::default()
            };
            run_microbenchmark(&g, &spec).unwrap()[0].aggregate_gbps
        };
        assert_eq!(one(0), one(256));
    }

    #[test]
    fn curve_shapes() {
        let g = HbmGeometry::default();
        let curve = |s| {
            let spec = MicrobenchSpec {
                separation_mib: s,
                ..MicrobenchSpec::default()
            };
            run_microbenchmark(&g, &spec).unwrap()
        };
        let ideal = curve(256);
        let flat = curve(0);
        for (k, (i, f)) in ideal.iter().zip(&flat).enumerate() {
            assert_relative_eq!(i.aggregate_gbps, (k + 1) as f64 * g.channel_peak_gbps(), max_relative = 1e-12);
            assert_relative_eq!(f.aggregate_gbps, g.channel_peak_gbps(), max_relative = 1e-12);
        }
        for s in [192, 128, 64] {
            for (i, p) in ideal.iter().zip(curve(s)) {
                assert!(i.aggregate_gbps >= p.aggregate_gbps - 1e-9);
            }
        }
        // Two generators per channel at 128 MiB: half the ideal rate at 32 ports.
        assert_relative_eq!(curve(128)[31].aggregate_gbps, 16.0 * g.channel_peak_gbps(), max_relative = 1e-12);
    }

    #[test]
    fn writes_match_reads() {
        let g = HbmGeometry::default();
        for s in PRESET_SEPARATIONS_MIB {
            let read = MicrobenchSpec {
                separation_mib: s,
                ..MicrobenchSpec::default()
            };
            let write = MicrobenchSpec {
                direction: Direction::Write,
                ..read
            };
            assert_eq!(run_microbenchmark(&g, &read).unwrap(), run_microbenchmark(&g, &write).unwrap());
        }
    }
}
