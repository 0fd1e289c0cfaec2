//! Range selection: scalar reference, the lane-partitioned engine with its
//! ingress/egress scheduler and padded 512-bit output lines, and the rate
//! model.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mem_model::{Direction, GB};
use crate::orchestrator::{host_transfer_time, plan_placement, PlacementMode, SystemConfig};
use crate::report::CostReport;

/// Slot value marking padding in an output line.
pub const DUMMY_INDEX: u32 = u32::MAX;
pub const DEFAULT_PARALLELISM: usize = 16;
pub const DEFAULT_BUFFER_SIZE: usize = 1024;

/// Open interval `(lower, upper)` over signed 32-bit values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangePredicate {
    pub lower: i32,
    pub upper: i32,
}

impl RangePredicate {
    pub fn new(lower: i32, upper: i32) -> Self {
        Self { lower, upper }
    }

    #[inline]
    pub fn matches(&self, value: i32) -> bool {
        value > self.lower && value < self.upper
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Selection {
    pub indices: Vec<u32>,
    pub num_matches: usize,
}

pub fn select_oracle(input: &[i32], predicate: RangePredicate) -> Selection {
    let mut indices = Vec::new();
    for (i, &v) in input.iter().enumerate() {
        if v > predicate.lower && v < predicate.upper {
            indices.push(i as u32);
        }
    }
    let num_matches = indices.len();
    Selection {
        indices,
        num_matches,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectParams {
    pub parallelism: usize,
    pub buffer_size: usize,
}

impl Default for SelectParams {
    fn default() -> Self {
        Self {
            parallelism: DEFAULT_PARALLELISM,
            buffer_size: DEFAULT_BUFFER_SIZE,
        }
    }
}

/// On-chip result buffers, one per lane.
#[derive(Debug, Clone)]
pub struct LaneBuffers {
    buffer_size: usize,
    lanes: Vec<Vec<u32>>,
}

impl LaneBuffers {
    pub fn new(parallelism: usize, buffer_size: usize) -> Self {
        Self {
            buffer_size,
            lanes: vec![Vec::with_capacity(buffer_size); parallelism],
        }
    }

    pub fn push(&mut self, lane: usize, index: u32) {
        debug_assert!(self.lanes[lane].len() < self.buffer_size);
        self.lanes[lane].push(index);
    }

    pub fn any_full(&self) -> bool {
        self.lanes.iter().any(|l| l.len() >= self.buffer_size)
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.iter().all(Vec::is_empty)
    }

    pub fn counts(&self) -> Vec<usize> {
        self.lanes.iter().map(Vec::len).collect()
    }

    pub fn lane(&self, lane: usize) -> &[u32] {
        &self.lanes[lane]
    }
}

/// Engine output: `width`-slot lines, lane `l` always writing slot `l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedResult {
    pub width: usize,
    pub slots: Vec<u32>,
    /// Valid entries each lane wrote over the whole run.
    pub lane_counts: Vec<u64>,
    /// Lines written by each egress burst.
    pub burst_lines: Vec<usize>,
}

impl PaddedResult {
    pub fn empty(width: usize) -> Self {
        Self {
            width,
            slots: Vec::new(),
            lane_counts: vec![0; width],
            burst_lines: Vec::new(),
        }
    }

    pub fn num_lines(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.slots.len() / self.width
        }
    }

    pub fn lines(&self) -> impl Iterator<Item = &[u32]> {
        self.slots.chunks(self.width.max(1))
    }

    pub fn valid_slots(&self) -> u64 {
        self.lane_counts.iter().sum()
    }

    pub fn dummy_slots(&self) -> usize {
        self.slots.iter().filter(|&&s| s == DUMMY_INDEX).count()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SelectCost {
    pub ingress_cycles: u64,
    pub egress_cycles: u64,
    pub egress_bursts: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
}

/// Streaming model of one selection engine.
#[derive(Debug, Clone)]
pub struct SelectEngine {
    predicate: RangePredicate,
    params: SelectParams,
    buffers: LaneBuffers,
    out: PaddedResult,
    cost: SelectCost,
    consumed: u64,
}

impl SelectEngine {
    pub fn new(predicate: RangePredicate, params: SelectParams) -> Self {
        assert!(params.parallelism > 0 && params.buffer_size > 0, "empty engine geometry");
        Self {
            predicate,
            params,
            buffers: LaneBuffers::new(params.parallelism, params.buffer_size),
            out: PaddedResult::empty(params.parallelism),
            cost: SelectCost::default(),
            consumed: 0,
        }
    }

    /// Ingress: one line of `parallelism` items per cycle; egress is
    /// scheduled whenever some lane buffer fills up.
    pub fn feed(&mut self, values: impl IntoIterator<Item = i32>) {
        let width = self.params.parallelism as u64;
        for v in values {
            let index = self.consumed;
            assert!(index < u64::from(DUMMY_INDEX), "column too long for 32-bit indices");
            let lane = (index % width) as usize;
            if lane == 0 {
                self.cost.ingress_cycles += 1;
            }
            if self.predicate.matches(v) {
                self.buffers.push(lane, index as u32);
            }
            self.consumed += 1;
            if lane as u64 == width - 1 && self.buffers.any_full() {
                self.egress();
            }
        }
    }

    /// Drains the lane buffers into padded lines.
    fn egress(&mut self) {
        if self.buffers.is_empty() {
            return;
        }
        let width = self.params.parallelism;
        let counts = self.buffers.counts();
        let lines = counts.iter().copied().max().unwrap_or(0);
        for line in 0..lines {
            for lane in 0..width {
                let slot = self.buffers.lane(lane).get(line).copied().unwrap_or(DUMMY_INDEX);
                self.out.slots.push(slot);
            }
        }
        for (total, c) in self.out.lane_counts.iter_mut().zip(&counts) {
            *total += *c as u64;
        }
        self.out.burst_lines.push(lines);
        self.cost.egress_cycles += lines as u64;
        self.cost.egress_bursts += 1;
        self.buffers = LaneBuffers::new(width, self.params.buffer_size);
    }

    pub fn finish(mut self) -> (PaddedResult, SelectCost) {
        self.egress();
        self.cost.bytes_read = 4 * self.consumed;
        self.cost.bytes_written = 4 * self.out.slots.len() as u64;
        (self.out, self.cost)
    }
}

/// Runs one engine over a column. Lanes of a trailing partial line are
/// treated as non-matching.
pub fn engine_select(
    input: &[i32],
    predicate: RangePredicate,
    params: SelectParams,
) -> (PaddedResult, SelectCost) {
    let mut engine = SelectEngine::new(predicate, params);
    engine.feed(input.iter().copied());
    engine.finish()
}

/// Drops padding and merges the per-lane streams into ascending order.
pub fn compact(padded: &PaddedResult) -> Result<Selection> {
    let width = padded.width;
    if width == 0 {
        return Err(Error::Consistency("zero-width result".into()));
    }
    if padded.slots.len() % width != 0 {
        return Err(Error::Consistency(format!(
            "{} slots do not form whole {width}-slot lines",
            padded.slots.len()
        )));
    }
    if padded.lane_counts.len() != width {
        return Err(Error::Consistency("lane count table does not match width".into()));
    }
    if padded.burst_lines.iter().sum::<usize>() != padded.num_lines() {
        return Err(Error::Consistency("burst lengths do not cover the lines".into()));
    }

    let mut lanes: Vec<Vec<u32>> = vec![Vec::new(); width];
    let mut line = 0;
    for &burst in &padded.burst_lines {
        for lane in 0..width {
            let mut padding = false;
            for l in line..line + burst {
                let slot = padded.slots[l * width + lane];
                if slot == DUMMY_INDEX {
                    padding = true;
                    continue;
                }
                if padding {
                    return Err(Error::Consistency(format!(
                        "lane {lane}: valid entry after padding in line {l}"
                    )));
                }
                if slot as usize % width != lane {
                    return Err(Error::Consistency(format!(
                        "index {slot} written by lane {lane}"
                    )));
                }
                if lanes[lane].last().is_some_and(|&prev| prev >= slot) {
                    return Err(Error::Consistency(format!("lane {lane} not ascending at {slot}")));
                }
                lanes[lane].push(slot);
            }
        }
        line += burst;
    }
    for (lane, (got, want)) in lanes.iter().zip(&padded.lane_counts).enumerate() {
        if got.len() as u64 != *want {
            return Err(Error::Consistency(format!(
                "lane {lane}: {} valid slots, {want} recorded",
                got.len()
            )));
        }
    }

    let total: usize = lanes.iter().map(Vec::len).sum();
    let mut cursors = vec![0usize; width];
    let mut heap: BinaryHeap<Reverse<(u32, usize)>> = lanes
        .iter()
        .enumerate()
        .filter_map(|(l, v)| v.first().map(|&i| Reverse((i, l))))
        .collect();
    let mut indices = Vec::with_capacity(total);
    while let Some(Reverse((index, lane))) = heap.pop() {
        indices.push(index);
        cursors[lane] += 1;
        if let Some(&next) = lanes[lane].get(cursors[lane]) {
            heap.push(Reverse((next, lane)));
        }
    }
    Ok(Selection {
        num_matches: indices.len(),
        indices,
    })
}

/// Inputs of the selection rate model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionScenario {
    pub num_engines: usize,
    /// Fraction of items matching, in [0, 1].
    pub selectivity: f64,
    pub placement: PlacementMode,
    pub include_output_copy: bool,
    /// Column size; only the single-copy placement depends on it.
    pub input_bytes: u64,
}

impl Default for SelectionScenario {
    fn default() -> Self {
        Self {
            num_engines: 14,
            selectivity: 0.0,
            placement: PlacementMode::Partitioned,
            include_output_copy: false,
            input_bytes: 4 * 128_000_000,
        }
    }
}

/// Modeled end-to-end selection run: input consumption rate of the engines
/// sharing their port between reading input and writing matches, plus the
/// optional copy of the result to host memory.
pub fn model_selection_rate(config: &SystemConfig, scenario: &SelectionScenario) -> Result<CostReport> {
    config.validate()?;
    let max = config.engine_ports().len();
    if scenario.num_engines == 0 || scenario.num_engines > max {
        return Err(Error::config(format!(
            "{} selection engines requested, 1..={max} available",
            scenario.num_engines
        )));
    }
    if !(0.0..=1.0).contains(&scenario.selectivity) {
        return Err(Error::config("selectivity must lie in [0, 1]"));
    }
    if scenario.placement == PlacementMode::Replicated {
        return Err(Error::config("selection input is partitioned or a single copy"));
    }
    let g = &config.geometry;
    let plan = plan_placement(config, scenario.input_bytes, scenario.num_engines, scenario.placement)?;
    let demand = g.shim_port_peak_gbps() * config.calibration.select_efficiency;
    let port_rates = plan.engine_rates(g, Direction::Read, Some(demand))?;
    let consumption: f64 = port_rates.iter().map(|r| r / (1.0 + scenario.selectivity)).sum();

    let mut report = CostReport::new(scenario.input_bytes);
    report.push(
        "select",
        scenario.input_bytes,
        scenario.input_bytes as f64 / (consumption * GB),
    );
    if scenario.include_output_copy {
        let out = (scenario.input_bytes as f64 * scenario.selectivity).round() as u64;
        report.push("copy_out", out, host_transfer_time(config, out, Direction::Read));
    }
    Ok(report)
}
