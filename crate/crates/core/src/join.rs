//! Naively partitioned hash join: chained hash table over the small side,
//! 16-wide lockstep probing with padded output lines, multi-pass operation
//! for build sides larger than the on-chip table, and the rate model.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mem_model::{Direction, GB};
use crate::orchestrator::{host_transfer_time, plan_placement_on, PlacementMode, SystemConfig};
use crate::report::CostReport;

pub const DEFAULT_TABLE_CAPACITY: usize = 8192;
pub const DEFAULT_PARALLELISM: usize = 16;
pub const DEFAULT_REPLICAS: usize = 16;
/// Shim ports used by one join engine (one reading, one writing).
pub const PORTS_PER_ENGINE: usize = 2;

const NIL: u32 = u32::MAX;

/// Bucket-chained hash table with a fixed tuple capacity.
#[derive(Debug, Clone)]
pub struct HashTable {
    capacity: usize,
    bucket_bits: u32,
    heads: Vec<u32>,
    tails: Vec<u32>,
    next: Vec<u32>,
    keys: Vec<i32>,
    chain_len: Vec<u32>,
    /// Copies held so that every probe lane has its own read port.
    pub replica_count: usize,
}

impl HashTable {
    pub fn new(capacity: usize) -> Self {
        let buckets = capacity.max(1).next_power_of_two();
        Self {
            capacity,
            bucket_bits: buckets.trailing_zeros(),
            heads: vec![NIL; buckets],
            tails: vec![NIL; buckets],
            next: Vec::with_capacity(capacity),
            keys: Vec::with_capacity(capacity),
            chain_len: vec![0; buckets],
            replica_count: DEFAULT_REPLICAS,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn occupied(&self) -> usize {
        self.keys.len()
    }

    pub fn num_buckets(&self) -> usize {
        self.heads.len()
    }

    /// Fibonacci hashing: the top bits of the key times 2^32 / phi.
    pub fn bucket(&self, key: i32) -> usize {
        if self.bucket_bits == 0 {
            return 0;
        }
        ((key as u32).wrapping_mul(0x9E37_79B9) >> (32 - self.bucket_bits)) as usize
    }

    /// Appends `key` to the end of its bucket chain.
    pub fn insert(&mut self, key: i32) -> Result<()> {
        if self.keys.len() >= self.capacity {
            return Err(Error::Capacity {
                what: "hash table".into(),
                needed: self.keys.len() as u64 + 1,
                available: self.capacity as u64,
            });
        }
        let slot = self.keys.len() as u32;
        let b = self.bucket(key);
        self.keys.push(key);
        self.next.push(NIL);
        if self.tails[b] == NIL {
            self.heads[b] = slot;
        } else {
            self.next[self.tails[b] as usize] = slot;
        }
        self.tails[b] = slot;
        self.chain_len[b] += 1;
        Ok(())
    }

    /// Entries stored in the bucket `key` hashes to.
    pub fn chain_len(&self, key: i32) -> usize {
        self.chain_len[self.bucket(key)] as usize
    }

    /// Stored keys equal to `key`, in insertion order.
    pub fn lookup(&self, key: i32) -> impl Iterator<Item = i32> + '_ {
        let mut cur = self.heads[self.bucket(key)];
        std::iter::from_fn(move || {
            while cur != NIL {
                let k = self.keys[cur as usize];
                cur = self.next[cur as usize];
                if k == key {
                    return Some(k);
                }
            }
            None
        })
    }

    pub fn max_chain(&self) -> usize {
        self.chain_len.iter().copied().max().unwrap_or(0) as usize
    }
}

/// Builds a table with one insertion per cycle; returns it with the cycle
/// count.
pub fn build_hash_table(chunk: &[i32], capacity: usize) -> Result<(HashTable, u64)> {
    if chunk.len() > capacity {
        return Err(Error::Capacity {
            what: "hash table".into(),
            needed: chunk.len() as u64,
            available: capacity as u64,
        });
    }
    let mut table = HashTable::new(capacity);
    for &key in chunk {
        table.insert(key)?;
    }
    Ok((table, chunk.len() as u64))
}

/// Equi-join result as value pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JoinResult {
    pub s_out: Vec<i32>,
    pub l_out: Vec<i32>,
    pub num_matches: usize,
}

impl JoinResult {
    fn from_pairs(mut pairs: Vec<(i32, i32)>) -> Self {
        pairs.sort_unstable();
        let (s_out, l_out): (Vec<i32>, Vec<i32>) = pairs.into_iter().unzip();
        Self {
            num_matches: s_out.len(),
            s_out,
            l_out,
        }
    }
}

/// Nested-loop join, ordered by key and then by position in `l`.
pub fn join_oracle(l: &[i32], s: &[i32]) -> JoinResult {
    let mut pairs = Vec::new();
    for (pos, &lv) in l.iter().enumerate() {
        for &sv in s {
            if sv == lv {
                pairs.push((lv, pos, sv));
            }
        }
    }
    pairs.sort_by_key(|&(key, pos, _)| (key, pos));
    let s_out: Vec<i32> = pairs.iter().map(|p| p.2).collect();
    let l_out: Vec<i32> = pairs.iter().map(|p| p.0).collect();
    JoinResult {
        num_matches: s_out.len(),
        s_out,
        l_out,
    }
}

/// Splits `len` items into `n` slices of `len / n`, the remainder going to
/// the last slice. Returns `(start, len)` per slice.
pub fn naive_partition(len: usize, n: usize) -> Vec<(usize, usize)> {
    assert!(n > 0, "partitioning over zero engines");
    let ps = len / n;
    (0..n)
        .map(|t| {
            let start = t * ps;
            let size = if t + 1 == n { len - start } else { ps };
            (start, size)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JoinFlags {
    /// Whether the larger side is first copied from host memory.
    pub l_load: bool,
    pub s_unique: bool,
    pub handle_collisions: bool,
    /// Whether the hash table is built as part of the run.
    pub build_table: bool,
}

impl Default for JoinFlags {
    fn default() -> Self {
        Self {
            l_load: false,
            s_unique: true,
            handle_collisions: false,
            build_table: true,
        }
    }
}

impl JoinFlags {
    pub fn validate(&self) -> Result<()> {
        if !self.s_unique && !self.handle_collisions {
            return Err(Error::config(
                "a non-unique build side requires collision handling",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinParams {
    pub parallelism: usize,
    pub table_capacity: usize,
}

impl Default for JoinParams {
    fn default() -> Self {
        Self {
            parallelism: DEFAULT_PARALLELISM,
            table_capacity: DEFAULT_TABLE_CAPACITY,
        }
    }
}

/// Engine output: lines of `width` (s, l) slot pairs; slots whose `valid`
/// bit is clear are padding.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PaddedJoin {
    pub width: usize,
    pub s_slots: Vec<i32>,
    pub l_slots: Vec<i32>,
    pub valid: Vec<bool>,
}

impl PaddedJoin {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            ..Self::default()
        }
    }

    pub fn num_lines(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.valid.len() / self.width
        }
    }

    pub fn valid_slots(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    fn append(&mut self, other: PaddedJoin) {
        self.s_slots.extend(other.s_slots);
        self.l_slots.extend(other.l_slots);
        self.valid.extend(other.valid);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct JoinCost {
    pub passes: u64,
    pub build_cycles: u64,
    pub probe_groups: u64,
    pub probe_cycles: u64,
    pub lines_written: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
}

impl JoinCost {
    /// Average lockstep cost of a probe group.
    pub fn mean_group_cycles(&self) -> f64 {
        if self.probe_groups == 0 {
            1.0
        } else {
            self.probe_cycles as f64 / self.probe_groups as f64
        }
    }

    /// Sums the work of several engines; passes are shared.
    pub fn add(&mut self, other: &JoinCost) {
        self.passes = self.passes.max(other.passes);
        self.build_cycles += other.build_cycles;
        self.probe_groups += other.probe_groups;
        self.probe_cycles += other.probe_cycles;
        self.lines_written += other.lines_written;
        self.bytes_read += other.bytes_read;
        self.bytes_written += other.bytes_written;
    }
}

pub fn passes_for(s_len: usize, capacity: usize) -> u64 {
    s_len.div_ceil(capacity.max(1)) as u64
}

/// Rejects a build side declared unique that is not, when collisions are
/// not handled.
pub fn check_build_side(s: &[i32], flags: &JoinFlags) -> Result<()> {
    flags.validate()?;
    if flags.s_unique {
        let mut seen = HashSet::with_capacity(s.len());
        for &key in s {
            if !seen.insert(key) {
                if flags.handle_collisions {
                    log::warn!("build side declared unique but key {key} repeats");
                    return Ok(());
                }
                return Err(Error::DuplicateKey { key });
            }
        }
    }
    Ok(())
}

/// One engine probing its partition of L against all of S, one table-sized
/// chunk of S per pass.
pub fn engine_join(l_partition: &[i32], s: &[i32], params: JoinParams) -> Result<(PaddedJoin, JoinCost)> {
    let width = params.parallelism;
    if width == 0 || params.table_capacity == 0 {
        return Err(Error::config("join engine needs lanes and table capacity"));
    }
    let mut out = PaddedJoin::new(width);
    let mut cost = JoinCost {
        passes: passes_for(s.len(), params.table_capacity),
        ..JoinCost::default()
    };
    let mut lane_hits: Vec<Vec<i32>> = vec![Vec::new(); width];
    for chunk in s.chunks(params.table_capacity) {
        let (table, build) = build_hash_table(chunk, params.table_capacity)?;
        cost.build_cycles += build;
        cost.bytes_read += 4 * l_partition.len() as u64;
        for group in l_partition.chunks(width) {
            let mut group_cycles = 1;
            for (lane, &key) in group.iter().enumerate() {
                group_cycles = group_cycles.max(table.chain_len(key));
                lane_hits[lane].clear();
                lane_hits[lane].extend(table.lookup(key));
            }
            cost.probe_groups += 1;
            cost.probe_cycles += group_cycles as u64;
            let lines = lane_hits[..group.len()].iter().map(Vec::len).max().unwrap_or(0);
            for line in 0..lines {
                for lane in 0..width {
                    let hit = if lane < group.len() {
                        lane_hits[lane].get(line).map(|&s_val| (s_val, group[lane]))
                    } else {
                        None
                    };
                    let (sv, lv) = hit.unwrap_or((0, 0));
                    out.s_slots.push(sv);
                    out.l_slots.push(lv);
                    out.valid.push(hit.is_some());
                }
            }
            cost.lines_written += lines as u64;
        }
    }
    cost.bytes_written = 64 * cost.lines_written;
    Ok((out, cost))
}

/// Drops padding and returns the matches in canonical order.
pub fn compact(padded: &PaddedJoin) -> Result<JoinResult> {
    let n = padded.valid.len();
    if padded.s_slots.len() != n || padded.l_slots.len() != n {
        return Err(Error::Consistency("slot arrays differ in length".into()));
    }
    if padded.width == 0 || n % padded.width != 0 {
        return Err(Error::Consistency("slots do not form whole lines".into()));
    }
    let mut pairs = Vec::with_capacity(padded.valid_slots());
    for i in 0..n {
        if padded.valid[i] {
            if padded.s_slots[i] != padded.l_slots[i] {
                return Err(Error::Consistency(format!(
                    "slot {i} pairs {} with {}",
                    padded.s_slots[i], padded.l_slots[i]
                )));
            }
            pairs.push((padded.s_slots[i], padded.l_slots[i]));
        }
    }
    Ok(JoinResult::from_pairs(pairs))
}

/// Runs `num_engines` engines over naive partitions of L in parallel.
/// Output is concatenated in engine order.
pub fn join_engines(
    l: &[i32],
    s: &[i32],
    num_engines: usize,
    flags: &JoinFlags,
    params: JoinParams,
) -> Result<(PaddedJoin, Vec<JoinCost>)> {
    if num_engines == 0 {
        return Err(Error::config("at least one join engine is needed"));
    }
    check_build_side(s, flags)?;
    if s.len() > l.len() {
        log::warn!("build side ({}) larger than probe side ({})", s.len(), l.len());
    }
    let parts: Vec<Result<(PaddedJoin, JoinCost)>> = naive_partition(l.len(), num_engines)
        .into_par_iter()
        .map(|(start, len)| engine_join(&l[start..start + len], s, params))
        .collect();
    let mut out = PaddedJoin::new(params.parallelism);
    let mut costs = Vec::with_capacity(num_engines);
    for part in parts {
        let (padded, cost) = part?;
        out.append(padded);
        costs.push(cost);
    }
    Ok((out, costs))
}

/// Inputs of the join rate model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JoinScenario {
    pub num_engines: usize,
    pub l_tuples: u64,
    pub s_tuples: u64,
    /// Result pairs copied back to the host.
    pub matches: u64,
    pub flags: JoinFlags,
}

impl Default for JoinScenario {
    fn default() -> Self {
        Self {
            num_engines: 7,
            l_tuples: 512_000_000,
            s_tuples: 4096,
            matches: 4096,
            flags: JoinFlags::default(),
        }
    }
}

impl JoinScenario {
    pub fn passes(&self) -> u64 {
        passes_for(self.s_tuples as usize, DEFAULT_TABLE_CAPACITY)
    }
}

/// Modeled end-to-end join: optional load of L, build and probe per pass,
/// result copy-out. The rate is over the bytes of L.
pub fn model_join_rate(config: &SystemConfig, scenario: &JoinScenario) -> Result<CostReport> {
    config.validate()?;
    scenario.flags.validate()?;
    let ports = config.assign_ports(scenario.num_engines, PORTS_PER_ENGINE)?;
    let g = &config.geometry;
    let cal = &config.calibration;
    let l_bytes = 4 * scenario.l_tuples;

    let group_cycles = if scenario.flags.s_unique {
        1.0
    } else {
        cal.join_nonunique_group_cycles
    };
    let ii = if scenario.flags.handle_collisions {
        cal.join_collision_ii
    } else {
        1.0
    };
    let demand = g.shim_port_peak_gbps() * cal.join_efficiency / (ii * group_cycles);
    let read_ports: Vec<_> = ports.iter().map(|p| p[0]).collect();
    let plan = plan_placement_on(config, l_bytes, &read_ports, PlacementMode::Partitioned)?;
    let rates = plan.engine_rates(g, Direction::Read, Some(demand))?;
    let aggregate: f64 = rates.iter().sum();
    let passes = scenario.passes();

    let mut report = CostReport::new(l_bytes);
    if scenario.flags.l_load {
        report.push("load_l", l_bytes, host_transfer_time(config, l_bytes, Direction::Write));
    }
    if scenario.flags.build_table {
        let s_bytes = 4 * scenario.s_tuples;
        report.push("build", s_bytes, scenario.s_tuples as f64 / g.clock_hz);
    }
    let probe_bytes = passes * l_bytes;
    report.push("probe", probe_bytes, probe_bytes as f64 / (aggregate * GB));
    let out_bytes = 8 * scenario.matches;
    report.push("copy_out", out_bytes, host_transfer_time(config, out_bytes, Direction::Read));
    Ok(report)
}

/// The six flag combinations of the reference configuration table, each
/// with L unique and the table built.
pub fn reference_configurations() -> [JoinFlags; 6] {
    let f = |s_unique, l_load, handle_collisions| JoinFlags {
        l_load,
        s_unique,
        handle_collisions,
        build_table: true,
    };
    [
        f(true, true, true),
        f(true, false, true),
        f(true, true, false),
        f(true, false, false),
        f(false, true, true),
        f(false, false, true),
    ]
}
