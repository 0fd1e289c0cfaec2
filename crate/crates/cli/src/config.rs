//! Experiment configuration loaded from TOML. Every section is optional;
//! missing values fall back to the reference sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use hbm_analytics::mem_model::Direction;
use hbm_analytics::sgd::{LabelKind, Loss, PipelineModel, SgdPlacement, UpdateRule};
use hbm_analytics::traffic::PRESET_SEPARATIONS_MIB;
use hbm_analytics::{Error, PlacementMode, Result, SystemConfig};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub ubench: UbenchSweep,
    pub select: SelectSweep,
    pub join: JoinSweep,
    pub sgd: SgdSweep,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UbenchSweep {
    pub ports: Vec<u32>,
    pub separations_mib: Vec<u64>,
    pub directions: Vec<Direction>,
}

impl Default for UbenchSweep {
    fn default() -> Self {
        Self {
            ports: (1..=32).collect(),
            separations_mib: PRESET_SEPARATIONS_MIB.to_vec(),
            directions: vec![Direction::Read],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSweep {
    pub engines: Vec<usize>,
    /// Fractions of matching items, in [0, 1].
    pub selectivities: Vec<f64>,
    pub placements: Vec<PlacementMode>,
    pub include_copy: Vec<bool>,
    /// Items of the modeled column.
    pub model_items: u64,
    /// Items of the column run through the functional engine.
    pub verify_items: usize,
}

impl Default for SelectSweep {
    fn default() -> Self {
        Self {
            engines: vec![14],
            selectivities: vec![0.0, 0.00001, 0.0001, 0.001, 0.01, 0.1, 1.0],
            placements: vec![PlacementMode::Partitioned],
            include_copy: vec![false, true],
            model_items: 128_000_000,
            verify_items: 1 << 20,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JoinSweep {
    pub engines: Vec<usize>,
    pub s_sizes: Vec<u64>,
    pub l_sizes: Vec<u64>,
    pub s_unique: Vec<bool>,
    pub l_load: Vec<bool>,
    pub handle_collisions: Vec<bool>,
    pub build_table: bool,
    /// Probe-side tuples of the functional run (capped by the modeled size).
    pub verify_l_tuples: usize,
    /// Largest build side run through the functional engine.
    pub verify_s_max: usize,
}

impl Default for JoinSweep {
    fn default() -> Self {
        Self {
            engines: vec![7],
            s_sizes: vec![4096],
            l_sizes: vec![512_000_000],
            s_unique: vec![true],
            l_load: vec![false],
            handle_collisions: vec![false],
            build_table: true,
            verify_l_tuples: 1 << 18,
            verify_s_max: 1 << 15,
        }
    }
}

/// Where the training data comes from. Without `preset` or a file a
/// synthetic task of the given shape is generated.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSource {
    pub preset: Option<String>,
    pub file: Option<PathBuf>,
    pub delimited: Option<PathBuf>,
    pub m: usize,
    pub n: usize,
    pub kind: LabelKind,
    pub noise: f64,
    /// Class trained against the rest on multi-class data.
    pub class: u32,
}

impl Default for DatasetSource {
    fn default() -> Self {
        Self {
            preset: None,
            file: None,
            delimited: None,
            m: 4096,
            n: 64,
            kind: LabelKind::Regression,
            noise: 0.0,
            class: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdSweep {
    pub dataset: DatasetSource,
    pub loss: Loss,
    pub update_rule: UpdateRule,
    pub step_sizes: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub minibatches: Vec<usize>,
    pub epochs: usize,
    pub engines: usize,
    pub placement: SgdPlacement,
    pub pipeline: PipelineModel,
}

impl Default for SgdSweep {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            loss: Loss::Ridge,
            update_rule: UpdateRule::Standard,
            step_sizes: vec![0.001],
            lambdas: vec![0.0],
            minibatches: vec![1, 2, 4, 8, 16],
            epochs: 10,
            engines: 14,
            placement: SgdPlacement::Replicated,
            pipeline: PipelineModel::default(),
        }
    }
}

fn non_empty<T>(name: &str, list: &[T]) -> Result<()> {
    if list.is_empty() {
        return Err(Error::Configuration(format!("sweep list `{name}` is empty")));
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Configuration(e.message().to_string()))?;
        config.system.validate()?;
        Ok(config)
    }
}

impl UbenchSweep {
    pub fn validate(&self) -> Result<()> {
        non_empty("ubench.ports", &self.ports)?;
        non_empty("ubench.separations_mib", &self.separations_mib)?;
        non_empty("ubench.directions", &self.directions)
    }
}

impl SelectSweep {
    pub fn validate(&self) -> Result<()> {
        non_empty("select.engines", &self.engines)?;
        non_empty("select.selectivities", &self.selectivities)?;
        non_empty("select.placements", &self.placements)?;
        non_empty("select.include_copy", &self.include_copy)?;
        if let Some(s) = self.selectivities.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Configuration(format!("selectivity {s} outside [0, 1]")));
        }
        if self.model_items == 0 {
            return Err(Error::Configuration("select.model_items must be positive".into()));
        }
        Ok(())
    }
}

impl JoinSweep {
    pub fn validate(&self) -> Result<()> {
        non_empty("join.engines", &self.engines)?;
        non_empty("join.s_sizes", &self.s_sizes)?;
        non_empty("join.l_sizes", &self.l_sizes)?;
        non_empty("join.s_unique", &self.s_unique)?;
        non_empty("join.l_load", &self.l_load)?;
        non_empty("join.handle_collisions", &self.handle_collisions)?;
        if self.verify_s_max == 0 {
            return Err(Error::Configuration("join.verify_s_max must be positive".into()));
        }
        if let Some((s, l)) = self
            .s_sizes
            .iter()
            .flat_map(|s| self.l_sizes.iter().map(move |l| (*s, *l)))
            .find(|(s, l)| s > l)
        {
            return Err(Error::Configuration(format!(
                "build side {s} larger than probe side {l}"
            )));
        }
        Ok(())
    }
}

impl SgdSweep {
    pub fn validate(&self) -> Result<()> {
        non_empty("sgd.step_sizes", &self.step_sizes)?;
        non_empty("sgd.lambdas", &self.lambdas)?;
        non_empty("sgd.minibatches", &self.minibatches)?;
        let sources = [
            self.dataset.preset.is_some(),
            self.dataset.file.is_some(),
            self.dataset.delimited.is_some(),
        ];
        if sources.iter().filter(|&&s| s).count() > 1 {
            return Err(Error::Configuration(
                "sgd.dataset takes one of preset, file, delimited".into(),
            ));
        }
        Ok(())
    }
}
