//! System composition: engine placement, the control unit tracking engine
//! status, and end-to-end experiments combining functional runs with the
//! modeled host-link and memory phases.

mod placement;

pub use placement::{
    host_transfer_time, plan_placement, plan_placement_on, EngineCalibration, EnginePlacement,
    PlacedExtent, PlacementMode, PlacementPlan, SystemConfig,
};

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::join::{self, JoinFlags, JoinParams, JoinResult, JoinScenario};
use crate::mem_model::Direction;
use crate::report::CostReport;
use crate::select::{self, RangePredicate, SelectParams, Selection, SelectionScenario};
use crate::sgd::{self, Dataset, JobResult, PipelineModel, SgdConfig, SgdPlacement};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineState {
    Idle,
    Running,
    Done,
    Error,
}

impl EngineState {
    fn name(self) -> &'static str {
        match self {
            EngineState::Idle => "idle",
            EngineState::Running => "running",
            EngineState::Done => "done",
            EngineState::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EngineStatus {
    pub engine: usize,
    pub state: EngineState,
    pub cycles: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub message: Option<String>,
}

/// Single writer of engine status.
#[derive(Debug, Clone, Default)]
pub struct ControlUnit {
    statuses: Vec<EngineStatus>,
}

impl ControlUnit {
    pub fn new(num_engines: usize) -> Self {
        Self {
            statuses: (0..num_engines)
                .map(|engine| EngineStatus {
                    engine,
                    state: EngineState::Idle,
                    cycles: 0,
                    bytes_in: 0,
                    bytes_out: 0,
                    message: None,
                })
                .collect(),
        }
    }

    fn transition(&mut self, engine: usize, from: EngineState, to: EngineState) -> Result<&mut EngineStatus> {
        let status = self
            .statuses
            .get_mut(engine)
            .ok_or_else(|| Error::config(format!("engine {engine} does not exist")))?;
        if status.state != from {
            return Err(Error::InvalidTransition {
                engine,
                from: status.state.name(),
                to: to.name(),
            });
        }
        status.state = to;
        Ok(status)
    }

    pub fn start(&mut self, engine: usize) -> Result<()> {
        self.transition(engine, EngineState::Idle, EngineState::Running).map(|_| ())
    }

    pub fn complete(&mut self, engine: usize, cycles: u64, bytes_in: u64, bytes_out: u64) -> Result<()> {
        let s = self.transition(engine, EngineState::Running, EngineState::Done)?;
        s.cycles = cycles;
        s.bytes_in = bytes_in;
        s.bytes_out = bytes_out;
        Ok(())
    }

    pub fn fail(&mut self, engine: usize, message: impl Into<String>) -> Result<()> {
        let s = self.transition(engine, EngineState::Running, EngineState::Error)?;
        s.message = Some(message.into());
        Ok(())
    }

    pub fn statuses(&self) -> &[EngineStatus] {
        &self.statuses
    }

    pub fn all_finished(&self) -> bool {
        self.statuses
            .iter()
            .all(|s| matches!(s.state, EngineState::Done | EngineState::Error))
    }

    pub fn into_statuses(self) -> Vec<EngineStatus> {
        self.statuses
    }
}

#[derive(Debug, Clone)]
pub struct SelectWorkload {
    pub column: Vec<i32>,
    pub predicate: RangePredicate,
    pub num_engines: usize,
    pub placement: PlacementMode,
    pub params: SelectParams,
    pub load_input: bool,
    pub include_output_copy: bool,
}

#[derive(Debug, Clone)]
pub struct JoinWorkload {
    pub l: Vec<i32>,
    pub s: Vec<i32>,
    pub num_engines: usize,
    pub flags: JoinFlags,
    pub params: JoinParams,
}

#[derive(Debug, Clone)]
pub struct SgdWorkload {
    pub dataset: Dataset,
    pub configs: Vec<SgdConfig>,
    pub num_engines: usize,
    pub placement: SgdPlacement,
    pub pipeline: PipelineModel,
}

#[derive(Debug, Clone)]
pub enum Workload {
    Select(SelectWorkload),
    Join(JoinWorkload),
    Sgd(SgdWorkload),
}

#[derive(Debug, Clone)]
pub enum Outcome {
    Select { selection: Selection, oracle_pass: bool },
    Join { result: JoinResult, oracle_pass: bool, mean_group_cycles: f64 },
    Sgd { jobs: Vec<JobResult> },
    /// The run stopped early; see the error message.
    Failed,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub statuses: Vec<EngineStatus>,
    pub cost: CostReport,
    pub outcome: Outcome,
    pub error: Option<String>,
}

impl ExperimentReport {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

/// Number of matches of `l` against `s`, from key counts.
fn count_join_matches(l: &[i32], s: &[i32]) -> usize {
    let mut counts: HashMap<i32, usize> = HashMap::new();
    for &v in s {
        *counts.entry(v).or_default() += 1;
    }
    l.iter().map(|v| counts.get(v).copied().unwrap_or(0)).sum()
}

/// Join check that stays linear in the input: the result must hold, for
/// every key, |L_k| * |S_k| pairs of that key.
pub fn verify_join(l: &[i32], s: &[i32], result: &JoinResult) -> bool {
    if result.s_out.len() != result.num_matches || result.l_out.len() != result.num_matches {
        return false;
    }
    if result.s_out.iter().zip(&result.l_out).any(|(a, b)| a != b) {
        return false;
    }
    if result.num_matches != count_join_matches(l, s) {
        return false;
    }
    let mut ls: HashMap<i32, usize> = HashMap::new();
    for &v in l {
        *ls.entry(v).or_default() += 1;
    }
    let mut want: HashMap<i32, usize> = HashMap::new();
    for &v in s {
        if let Some(c) = ls.get(&v) {
            *want.entry(v).or_default() += c;
        }
    }
    let mut got: HashMap<i32, usize> = HashMap::new();
    for &v in &result.s_out {
        *got.entry(v).or_default() += 1;
    }
    got == want && result.s_out.windows(2).all(|w| w[0] <= w[1])
}

/// Runs the workload: placement, optional load, engine phase, optional
/// copy-out. Engine failures come back as a report with error statuses and
/// the phases completed so far.
pub fn run_experiment(config: &SystemConfig, workload: &Workload) -> Result<ExperimentReport> {
    config.validate()?;
    match workload {
        Workload::Select(w) => run_select(config, w),
        Workload::Join(w) => run_join(config, w),
        Workload::Sgd(w) => run_sgd(config, w),
    }
}

fn failed(control: ControlUnit, cost: CostReport, err: &Error) -> ExperimentReport {
    debug_assert!(control.all_finished());
    ExperimentReport {
        statuses: control.into_statuses(),
        cost,
        outcome: Outcome::Failed,
        error: Some(err.to_string()),
    }
}

fn run_select(config: &SystemConfig, w: &SelectWorkload) -> Result<ExperimentReport> {
    let bytes = 4 * w.column.len() as u64;
    plan_placement(config, bytes.max(1), w.num_engines, w.placement)?;
    let mut control = ControlUnit::new(w.num_engines);
    let mut cost = CostReport::new(bytes);
    if w.load_input {
        cost.push("load", bytes, host_transfer_time(config, bytes, Direction::Write));
    }

    let slices = join::naive_partition(w.column.len(), w.num_engines);
    for e in 0..w.num_engines {
        control.start(e)?;
    }
    let results: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = slices
            .iter()
            .map(|&(start, len)| {
                let part = &w.column[start..start + len];
                scope.spawn(move || {
                    let (padded, cost) = select::engine_select(part, w.predicate, w.params);
                    select::compact(&padded).map(|s| (s, cost))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("selection engine panicked")).collect()
    });

    let mut indices = Vec::new();
    let mut first_error = None;
    for (e, (result, &(start, _))) in results.into_iter().zip(&slices).enumerate() {
        match result {
            Ok((selection, c)) => {
                control.complete(e, c.ingress_cycles + c.egress_cycles, c.bytes_read, c.bytes_written)?;
                indices.extend(selection.indices.iter().map(|&i| i + start as u32));
            }
            Err(err) => {
                control.fail(e, err.to_string())?;
                first_error.get_or_insert(err);
            }
        }
    }
    if let Some(err) = first_error {
        return Ok(failed(control, cost, &err));
    }
    let selection = Selection {
        num_matches: indices.len(),
        indices,
    };
    let oracle_pass = selection == select::select_oracle(&w.column, w.predicate);
    let selectivity = if w.column.is_empty() {
        0.0
    } else {
        selection.num_matches as f64 / w.column.len() as f64
    };
    let model = select::model_selection_rate(
        config,
        &SelectionScenario {
            num_engines: w.num_engines,
            selectivity,
            placement: w.placement,
            include_output_copy: w.include_output_copy,
            input_bytes: bytes.max(1),
        },
    )?;
    for phase in model.phases {
        cost.phases.push(phase);
    }
    Ok(ExperimentReport {
        statuses: control.into_statuses(),
        cost,
        outcome: Outcome::Select {
            selection,
            oracle_pass,
        },
        error: None,
    })
}

fn run_join(config: &SystemConfig, w: &JoinWorkload) -> Result<ExperimentReport> {
    w.flags.validate()?;
    config.assign_ports(w.num_engines, join::PORTS_PER_ENGINE)?;
    let l_bytes = 4 * w.l.len() as u64;
    let mut control = ControlUnit::new(w.num_engines);
    let mut cost = CostReport::new(l_bytes);
    if w.flags.l_load {
        cost.push("load_l", l_bytes, host_transfer_time(config, l_bytes, Direction::Write));
    }
    for e in 0..w.num_engines {
        control.start(e)?;
    }
    if let Err(err) = join::check_build_side(&w.s, &w.flags) {
        for e in 0..w.num_engines {
            control.fail(e, err.to_string())?;
        }
        return Ok(failed(control, cost, &err));
    }

    let slices = join::naive_partition(w.l.len(), w.num_engines);
    let results: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = slices
            .iter()
            .map(|&(start, len)| {
                let part = &w.l[start..start + len];
                let s = &w.s;
                let params = w.params;
                scope.spawn(move || join::engine_join(part, s, params))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("join engine panicked")).collect()
    });

    let mut padded = join::PaddedJoin::new(w.params.parallelism);
    let mut total = join::JoinCost::default();
    let mut first_error = None;
    for (e, result) in results.into_iter().enumerate() {
        match result {
            Ok((p, c)) => {
                control.complete(e, c.build_cycles + c.probe_cycles, c.bytes_read, c.bytes_written)?;
                padded.s_slots.extend(p.s_slots);
                padded.l_slots.extend(p.l_slots);
                padded.valid.extend(p.valid);
                total.add(&c);
            }
            Err(err) => {
                control.fail(e, err.to_string())?;
                first_error.get_or_insert(err);
            }
        }
    }
    if let Some(err) = first_error {
        return Ok(failed(control, cost, &err));
    }
    let result = match join::compact(&padded) {
        Ok(r) => r,
        Err(err) => return Ok(failed(control, cost, &err)),
    };
    let oracle_pass = verify_join(&w.l, &w.s, &result);
    let model = join::model_join_rate(
        config,
        &JoinScenario {
            num_engines: w.num_engines,
            l_tuples: w.l.len() as u64,
            s_tuples: w.s.len() as u64,
            matches: result.num_matches as u64,
            flags: JoinFlags {
                l_load: false,
                ..w.flags
            },
        },
    )?;
    cost.phases.extend(model.phases);
    Ok(ExperimentReport {
        statuses: control.into_statuses(),
        cost,
        outcome: Outcome::Join {
            mean_group_cycles: total.mean_group_cycles(),
            result,
            oracle_pass,
        },
        error: None,
    })
}

fn run_sgd(config: &SystemConfig, w: &SgdWorkload) -> Result<ExperimentReport> {
    config.assign_ports(w.num_engines, 1)?;
    sgd::sgd_placement(config, w.dataset.size_bytes(), w.num_engines.min(w.configs.len().max(1)), w.placement)?;
    let mut control = ControlUnit::new(w.num_engines);
    let active = w.num_engines.min(w.configs.len());
    for e in 0..active {
        control.start(e)?;
    }
    match sgd::hyperparam_search(config, &w.dataset, &w.configs, w.num_engines, w.placement, w.pipeline) {
        Ok(outcome) => {
            for e in 0..active {
                let mine = outcome.jobs.iter().filter(|j| j.engine == e);
                let bytes: u64 = mine.map(|j| w.dataset.size_bytes() * j.config.epochs as u64).sum();
                let out: u64 = 4 * w.dataset.n() as u64 * outcome.jobs.iter().filter(|j| j.engine == e).count() as u64;
                control.complete(e, 0, bytes, out)?;
            }
            for e in active..w.num_engines {
                control.start(e)?;
                control.complete(e, 0, 0, 0)?;
            }
            Ok(ExperimentReport {
                statuses: control.into_statuses(),
                cost: outcome.report,
                outcome: Outcome::Sgd { jobs: outcome.jobs },
                error: None,
            })
        }
        Err(err @ (Error::Divergence { .. } | Error::DimensionMismatch { .. })) => {
            for e in 0..active {
                control.fail(e, err.to_string())?;
            }
            for e in active..w.num_engines {
                control.start(e)?;
                control.complete(e, 0, 0, 0)?;
            }
            Ok(failed(control, CostReport::new(0), &err))
        }
        Err(err) => Err(err),
    }
}
