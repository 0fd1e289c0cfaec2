//! Minibatch SGD for ridge and L2-regularized logistic regression, the
//! pipeline-utilization rate model and the hyperparameter-search harness.

mod dataset;

pub use dataset::{
    generate_synthetic, generate_synthetic_noisy, Dataset, DatasetPreset, LabelKind, Synthetic,
    PRESETS,
};

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mem_model::{effective_bandwidth, Direction, GB};
use crate::orchestrator::{
    host_transfer_time, plan_placement, plan_placement_on, PlacementMode, PlacementPlan,
    SystemConfig,
};
use crate::report::CostReport;

/// Clamp applied to the logistic prediction inside the loss.
pub const LOG_EPS: f64 = 1e-12;

/// Arithmetic the trainer runs in: `f32` mirrors the engine, `f64` serves
/// as a reference.
pub trait Real: Float + FromPrimitive + Debug + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Ridge,
    Logistic,
}

impl std::str::FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ridge" => Ok(Loss::Ridge),
            "logistic" => Ok(Loss::Logistic),
            other => Err(Error::config(format!("unknown loss `{other}`"))),
        }
    }
}

impl std::fmt::Display for Loss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Loss::Ridge => "ridge",
            Loss::Logistic => "logistic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// The step size scales the accumulated gradient once.
    Standard,
    /// The step size also scales every per-sample term, and a trailing
    /// partial minibatch is not applied.
    #[serde(rename = "strict_paper")]
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub step_size: f64,
    pub lambda: f64,
    pub minibatch: usize,
    pub epochs: usize,
    pub loss: Loss,
    pub update_rule: UpdateRule,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            step_size: 0.01,
            lambda: 0.0,
            minibatch: 16,
            epochs: 10,
            loss: Loss::Ridge,
            update_rule: UpdateRule::Standard,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::config("step size must be positive"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("regularization must be non-negative"));
        }
        if self.minibatch == 0 || self.minibatch > data.m() {
            return Err(Error::config(format!(
                "minibatch {} outside 1..={}",
                self.minibatch,
                data.m()
            )));
        }
        if self.loss == Loss::Logistic && data.kind() != LabelKind::Binary {
            return Err(Error::config("logistic loss needs binary labels"));
        }
        if let LabelKind::Multiclass(_) = data.kind() {
            return Err(Error::config("train one-vs-rest tasks on multi-class data"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub x: Vec<T>,
}

impl<T: Real> Model<T> {
    pub fn zeros(n: usize) -> Self {
        Self { x: vec![T::zero(); n] }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.x.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    fn check_dims(&self, data: &Dataset) -> Result<()> {
        if self.x.len() != data.n() {
            return Err(Error::DimensionMismatch {
                expected: data.n(),
                actual: self.x.len(),
            });
        }
        Ok(())
    }
}

fn cast<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("finite value representable in T")
}

fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

fn dot<T: Real>(x: &[T], a: &[f32]) -> T {
    x.iter().zip(a).fold(T::zero(), |acc, (&w, &v)| acc + w * cast::<T>(f64::from(v)))
}

/// Per-sample loss term and its derivative with respect to the prediction.
fn link<T: Real>(loss: Loss, z: T) -> T {
    match loss {
        Loss::Ridge => z,
        Loss::Logistic => sigmoid(z),
    }
}

/// Mean per-sample loss over `rows` plus `lambda * |x|^2`, in f64.
pub fn loss_on<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    rows: std::ops::Range<usize>,
    loss: Loss,
    lambda: f64,
) -> Result<f64> {
    model.check_dims(data)?;
    if rows.is_empty() || rows.end > data.m() {
        return Err(Error::config("empty or out-of-range sample range"));
    }
    let x = model.to_f64();
    let count = rows.len() as f64;
    let mut total = 0.0;
    for i in rows {
        let z: f64 = x.iter().zip(data.row(i)).map(|(w, a)| w * f64::from(*a)).sum();
        let b = f64::from(data.label(i));
        total += match loss {
            Loss::Ridge => 0.5 * (z - b).powi(2),
            Loss::Logistic => {
                let h = (1.0 / (1.0 + (-z).exp())).clamp(LOG_EPS, 1.0 - LOG_EPS);
                -b * h.ln() - (1.0 - b) * (1.0 - h).ln()
            }
        };
    }
    let reg: f64 = x.iter().map(|w| w * w).sum();
    Ok(total / count + lambda * reg)
}

/// Objective over the whole dataset.
pub fn loss<T: Real>(model: &Model<T>, data: &Dataset, config: &SgdConfig) -> Result<f64> {
    loss_on(model, data, 0..data.m(), config.loss, config.lambda)
}

/// Adds `scale * (S(<x, a_i>) - b_i) * a_i` to `g`, where `scale` is the
/// step size under the literal rule and 1 otherwise.
fn accumulate<T: Real>(g: &mut [T], x: &[T], a: &[f32], b: T, loss: Loss, scale: T) {
    let d = scale * (link(loss, dot(x, a)) - b);
    for (gj, &aj) in g.iter_mut().zip(a) {
        *gj = *gj + d * cast::<T>(f64::from(aj));
    }
}

/// Accumulated, unnormalized gradient term of the samples in `rows`.
pub fn minibatch_gradient<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    rows: std::ops::Range<usize>,
    loss: Loss,
) -> Result<Vec<T>> {
    model.check_dims(data)?;
    let mut g = vec![T::zero(); data.n()];
    for i in rows {
        accumulate(&mut g, &model.x, data.row(i), cast(f64::from(data.label(i))), loss, T::one());
    }
    Ok(g)
}

fn apply<T: Real>(x: &mut [T], g: &[T], alpha: T, two_lambda: T) {
    for (xj, &gj) in x.iter_mut().zip(g) {
        *xj = *xj - alpha * (gj + two_lambda * *xj);
    }
}

/// One pass over the samples in storage order; the model is updated after
/// every `minibatch` samples and each update is visible to the next sample.
pub fn sgd_epoch<T: Real>(model: &mut Model<T>, data: &Dataset, config: &SgdConfig, epoch: usize) -> Result<()> {
    config.validate(data)?;
    model.check_dims(data)?;
    let alpha: T = cast(config.step_size);
    let two_lambda: T = cast(2.0 * config.lambda);
    let scale = match config.update_rule {
        UpdateRule::Standard => T::one(),
        UpdateRule::Literal => alpha,
    };
    let mut g = vec![T::zero(); data.n()];
    let mut pending = 0;
    for i in 0..data.m() {
        accumulate(&mut g, &model.x, data.row(i), cast(f64::from(data.label(i))), config.loss, scale);
        pending += 1;
        if pending == config.minibatch {
            apply(&mut model.x, &g, alpha, two_lambda);
            if model.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { epoch, sample: i });
            }
            g.iter_mut().for_each(|v| *v = T::zero());
            pending = 0;
        }
    }
    if pending > 0 && config.update_rule == UpdateRule::Standard {
        apply(&mut model.x, &g, alpha, two_lambda);
        if model.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                sample: data.m() - 1,
            });
        }
    }
    Ok(())
}

/// Trains from the zero model; returns the model and the loss after each
/// epoch.
pub fn train_with<T: Real>(data: &Dataset, config: &SgdConfig) -> Result<(Model<T>, Vec<f64>)> {
    config.validate(data)?;
    let mut model = Model::zeros(data.n());
    let mut trajectory = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        sgd_epoch(&mut model, data, config, epoch)?;
        trajectory.push(loss(&model, data, config)?);
    }
    Ok((model, trajectory))
}

pub fn train(data: &Dataset, config: &SgdConfig) -> Result<(Model<f32>, Vec<f64>)> {
    train_with::<f32>(data, config)
}

/// Dataflow pipeline of one SGD engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineModel {
    pub lanes: usize,
    /// Cycles from reading a model value to its update becoming visible.
    pub depth: usize,
}

impl Default for PipelineModel {
    fn default() -> Self {
        Self { lanes: 16, depth: 64 }
    }
}

impl PipelineModel {
    pub fn validate(&self) -> Result<()> {
        if self.lanes == 0 || self.depth == 0 {
            return Err(Error::config("pipeline lanes and depth must be at least 1"));
        }
        Ok(())
    }

    pub fn cycles_per_sample(&self, n: usize) -> usize {
        n.div_ceil(self.lanes)
    }

    /// Fraction of cycles doing useful work when every minibatch has to
    /// drain before the next one reads the updated model.
    pub fn utilization(&self, n: usize, minibatch: usize) -> f64 {
        let busy = (minibatch * self.cycles_per_sample(n)) as f64;
        (busy / self.depth as f64).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SgdPlacement {
    /// A dataset copy in every engine's channel pair.
    Replicated,
    /// One copy shared by all engines.
    Nonreplicated,
}

impl std::str::FromStr for SgdPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replicated" => Ok(SgdPlacement::Replicated),
            "nonreplicated" | "non-replicated" => Ok(SgdPlacement::Nonreplicated),
            other => Err(Error::config(format!("unknown SGD placement `{other}`"))),
        }
    }
}

impl std::fmt::Display for SgdPlacement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SgdPlacement::Replicated => "replicated",
            SgdPlacement::Nonreplicated => "nonreplicated",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdScenario {
    pub num_engines: usize,
    pub dataset_bytes: u64,
    pub n: usize,
    pub minibatch: usize,
    pub placement: SgdPlacement,
    pub pipeline: PipelineModel,
}

/// Placement of the training data: one copy per engine, or one copy in the
/// first engine's channel pair read by every engine through both of its
/// raw ports.
pub fn sgd_placement(
    config: &SystemConfig,
    dataset_bytes: u64,
    num_engines: usize,
    placement: SgdPlacement,
) -> Result<PlacementPlan> {
    match placement {
        SgdPlacement::Replicated => plan_placement(config, dataset_bytes, num_engines, PlacementMode::Replicated),
        SgdPlacement::Nonreplicated => {
            let ports: Vec<_> = config
                .assign_ports(num_engines, 1)?
                .into_iter()
                .map(|p| p[0])
                .collect();
            let mut plan = plan_placement_on(config, dataset_bytes, &ports[..1], PlacementMode::Replicated)?;
            let copy = plan.engines[0].clone();
            for (engine, &shim_port) in ports.iter().enumerate().skip(1) {
                let (lo, hi) = config.geometry.shim_port_map(shim_port)?.raw_ports;
                let mut e = copy.clone();
                e.engine = engine;
                e.shim_port = shim_port;
                for (i, placed) in e.extents.iter_mut().enumerate() {
                    placed.raw_port = if i == 0 { lo } else { hi };
                }
                plan.engines.push(e);
            }
            plan.mode = PlacementMode::NonPartitioned;
            Ok(plan)
        }
    }
}

/// Modeled processing rate of each engine, GB/s.
pub fn model_sgd_engine_rates(config: &SystemConfig, scenario: &SgdScenario) -> Result<Vec<f64>> {
    config.validate()?;
    scenario.pipeline.validate()?;
    if scenario.n == 0 || scenario.minibatch == 0 {
        return Err(Error::config("features and minibatch must be at least 1"));
    }
    let g = &config.geometry;
    let plan = sgd_placement(config, scenario.dataset_bytes, scenario.num_engines, scenario.placement)?;
    let demand = g.shim_port_peak_gbps()
        * scenario.pipeline.utilization(scenario.n, scenario.minibatch)
        * config.calibration.sgd_efficiency;
    let report = effective_bandwidth(g, &plan.access_plan(Direction::Read, Some(demand)))?;
    Ok(plan
        .engines
        .iter()
        .map(|e| e.raw_ports().iter().map(|p| report.port(*p)).sum())
        .collect())
}

/// Aggregate modeled processing rate, GB/s.
pub fn model_sgd_rate(config: &SystemConfig, scenario: &SgdScenario) -> Result<f64> {
    Ok(model_sgd_engine_rates(config, scenario)?.iter().sum())
}

#[derive(Debug, Clone)]
pub struct JobResult {
    pub job_id: usize,
    pub engine: usize,
    pub config: SgdConfig,
    pub model: Model<f32>,
    pub trajectory: Vec<f64>,
    /// Modeled seconds of this job on its engine.
    pub seconds: f64,
    pub engine_gbps: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub jobs: Vec<JobResult>,
    pub report: CostReport,
}

/// Trains every configuration as an independent job; jobs are dealt to
/// engines round-robin and the wall time is that of the busiest engine.
pub fn hyperparam_search(
    system: &SystemConfig,
    data: &Dataset,
    configs: &[SgdConfig],
    num_engines: usize,
    placement: SgdPlacement,
    pipeline: PipelineModel,
) -> Result<SearchOutcome> {
    if configs.is_empty() {
        return Err(Error::config("no training jobs"));
    }
    for c in configs {
        c.validate(data)?;
    }
    let active = num_engines.min(configs.len());
    let bytes = data.size_bytes();
    let rate_for = |minibatch: usize| -> Result<f64> {
        let scenario = SgdScenario {
            num_engines: active,
            dataset_bytes: bytes,
            n: data.n(),
            minibatch,
            placement,
            pipeline,
        };
        let rates = model_sgd_engine_rates(system, &scenario)?;
        Ok(rates[0])
    };
    // Validate the engine count and placement before training.
    system.assign_ports(num_engines, 1)?;
    let rates: Vec<f64> = configs.iter().map(|c| rate_for(c.minibatch)).collect::<Result<_>>()?;

    let trained: Vec<Result<(Model<f32>, Vec<f64>)>> = configs.par_iter().map(|c| train(data, c)).collect();
    let mut jobs = Vec::with_capacity(configs.len());
    let mut busy = vec![0.0f64; active];
    let mut processed = 0u64;
    for (job_id, (result, (config, rate))) in trained.into_iter().zip(configs.iter().zip(&rates)).enumerate() {
        let (model, trajectory) = result?;
        let engine = job_id % active;
        let job_bytes = bytes * config.epochs as u64;
        let seconds = job_bytes as f64 / (rate * GB);
        busy[engine] += seconds;
        processed += job_bytes;
        jobs.push(JobResult {
            job_id,
            engine,
            config: *config,
            model,
            trajectory,
            seconds,
            engine_gbps: *rate,
        });
    }

    let copies = match placement {
        SgdPlacement::Replicated => active as u64,
        SgdPlacement::Nonreplicated => 1,
    };
    let mut report = CostReport::new(processed);
    report.push_separate(
        "load",
        bytes * copies,
        host_transfer_time(system, bytes * copies, Direction::Write),
    );
    report.push("train", processed, busy.iter().copied().fold(0.0, f64::max));
    let model_bytes = 4 * data.n() as u64 * configs.len() as u64;
    report.push("copy_out", model_bytes, host_transfer_time(system, model_bytes, Direction::Read));
    Ok(SearchOutcome { jobs, report })
}
