//! Declarative run configuration: a sectioned TOML file describing the search
//! space, dataset, constraint, optimizer and output paths. Unknown keys are
//! hard errors so hyperparameter typos cannot pass silently.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::{ConstraintSpec, CostMetric, CostModel, LatencyTable, PenaltyForm};
use crate::error::{Error, Result};
use crate::estimator::Schedule;
use crate::net::SgdHyper;
use crate::optimizer::OptimizerConfig;
use crate::presets::conv_backbone;
use crate::space::{ArchitectureSpace, LayerKind, LayerSpec};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub schema_version: u32,
    pub space: SpaceSection,
    pub data: DataSection,
    pub constraint: ConstraintSection,
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub training: TrainingSection,
    pub output: OutputSection,
}

/// Either a named preset or an explicit layer list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    pub preset: Option<String>,
    pub base_channels: Option<usize>,
    pub droppable: Option<usize>,
    pub spatial_max: usize,
    pub spatial_min: Option<usize>,
    pub layers: Option<Vec<LayerEntry>>,
    pub tie_groups: Option<Vec<Vec<usize>>>,
    pub droppable_block_ids: Option<Vec<usize>>,
    pub min_depth: Option<usize>,
    pub input_channels: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub kind: LayerKind,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    pub max_out_channels: usize,
    pub min_out_channels: usize,
    #[serde(default = "default_true")]
    pub has_relu: bool,
    pub block_id: usize,
}

fn default_kernel() -> usize {
    3
}
fn default_stride() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    pub metric: CostMetric,
    /// Absolute target in raw metric units (FLOPs or microseconds);
    /// mutually exclusive with `target_fraction`.
    pub target: Option<f64>,
    /// Target as a fraction of the maximal architecture's cost.
    pub target_fraction: Option<f64>,
    pub rho: f64,
    #[serde(default = "default_cost_scale")]
    pub cost_scale: f64,
    #[serde(default)]
    pub penalty_form: PenaltyForm,
    /// CSV latency table, required when metric = "latency".
    pub latency_table: Option<PathBuf>,
}

fn default_cost_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub outer_steps: usize,
    pub weight_iterations: usize,
    pub samples: usize,
    pub vector_updates_per_outer: usize,
    pub sigma: ScheduleSection,
    pub alpha: ScheduleSection,
    #[serde(default = "default_true")]
    pub use_baseline: bool,
    /// Optional per-entry cap on one update's mu movement.
    pub max_step: Option<f64>,
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_eval_subset")]
    pub eval_subset: usize,
}

fn default_batch_size() -> usize {
    16
}
fn default_eval_subset() -> usize {
    512
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let h = SgdHyper::default();
        TrainingSection {
            lr: h.lr,
            momentum: h.momentum,
            weight_decay: h.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub out_dir: PathBuf,
    #[serde(default = "default_trace_name")]
    pub trace: String,
    #[serde(default = "default_architecture_name")]
    pub architecture: String,
    #[serde(default = "default_checkpoint_name")]
    pub checkpoint: String,
}

fn default_trace_name() -> String {
    "trace.jsonl".into()
}
fn default_architecture_name() -> String {
    "architecture.json".into()
}
fn default_checkpoint_name() -> String {
    "checkpoint".into()
}

impl OutputSection {
    pub fn trace_path(&self) -> PathBuf {
        self.out_dir.join(&self.trace)
    }
    pub fn architecture_path(&self) -> PathBuf {
        self.out_dir.join(&self.architecture)
    }
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join(&self.checkpoint)
    }
}

/// Everything a run needs, resolved from the file into validated library types.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub space: ArchitectureSpace,
    pub constraint: ConstraintSpec,
    pub latency_table: Option<LatencyTable>,
    pub optimizer: OptimizerConfig,
    pub hyper: SgdHyper,
    pub batch_size: usize,
    pub eval_subset: usize,
    pub data: DataSection,
    pub output: OutputSection,
}

pub fn load(path: &Path) -> Result<RunConfigFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let file: RunConfigFile =
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    if file.schema_version != CONFIG_SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "schema_version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
            file.schema_version
        )));
    }
    Ok(file)
}

fn build_space(s: &SpaceSection, classes: usize) -> Result<ArchitectureSpace> {
    if let Some(preset) = &s.preset {
        if s.layers.is_some() {
            return Err(Error::Config(
                "space: give either 'preset' or 'layers', not both".into(),
            ));
        }
        match preset.as_str() {
            "conv_backbone" => {
                let base = s.base_channels.ok_or_else(|| {
                    Error::Config("space.base_channels required for preset".into())
                })?;
                let droppable = s
                    .droppable
                    .ok_or_else(|| Error::Config("space.droppable required for preset".into()))?;
                Ok(conv_backbone(base, droppable, classes, s.spatial_max))
            }
            other => Err(Error::Config(format!("space.preset: unknown preset '{other}'"))),
        }
    } else {
        let layers = s
            .layers
            .as_ref()
            .ok_or_else(|| Error::Config("space: need 'preset' or 'layers'".into()))?;
        let input_channels = s.input_channels.unwrap_or(1);
        let mut specs = Vec::with_capacity(layers.len());
        let mut prev = input_channels;
        for e in layers {
            specs.push(LayerSpec {
                kind: e.kind,
                kernel: e.kernel,
                stride: e.stride,
                max_in_channels: prev,
                max_out_channels: e.max_out_channels,
                min_out_channels: e.min_out_channels,
                has_relu: e.has_relu,
                block_id: e.block_id,
            });
            prev = e.max_out_channels;
        }
        let space = ArchitectureSpace {
            layers: specs,
            tie_groups: s.tie_groups.clone().unwrap_or_default(),
            droppable_blocks: s.droppable_block_ids.clone().unwrap_or_default(),
            min_depth: s.min_depth.unwrap_or(0),
            spatial_max: s.spatial_max,
            spatial_min: s.spatial_min.unwrap_or(2),
            input_channels,
        };
        space.validate()?;
        Ok(space)
    }
}

pub fn resolve(file: &RunConfigFile, config_dir: &Path) -> Result<ResolvedRun> {
    let mut space = build_space(&file.space, file.data.classes)?;
    if let Some(smin) = file.space.spatial_min {
        space.spatial_min = smin;
    }
    space.validate()?;

    let c = &file.constraint;
    let latency_table = match (&c.metric, &c.latency_table) {
        (CostMetric::Latency, Some(p)) => {
            let path = if p.is_absolute() {
                p.clone()
            } else {
                config_dir.join(p)
            };
            Some(LatencyTable::load(&path)?)
        }
        (CostMetric::Latency, None) => {
            return Err(Error::Config(
                "constraint.latency_table required when metric = \"latency\"".into(),
            ))
        }
        (CostMetric::Flops, Some(_)) => {
            return Err(Error::Config(
                "constraint.latency_table only valid with metric = \"latency\"".into(),
            ))
        }
        _ => None,
    };

    let target = match (c.target, c.target_fraction) {
        (Some(t), None) => t,
        (None, Some(f)) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!(
                    "constraint.target_fraction {f} must be in (0, 1]"
                )));
            }
            let cost_model = CostModel::from_space(&space)?;
            let maximal = crate::space::round_to_config(
                &crate::space::PruningVector::all_ones(space.dim()),
                &space,
            )?;
            let probe = ConstraintSpec {
                metric: c.metric,
                target: 1.0,
                rho: c.rho,
                cost_scale: c.cost_scale,
                penalty_form: c.penalty_form,
            };
            let max_cost = cost_model.cost(&maximal, &space, &probe, latency_table.as_ref())?;
            f * max_cost
        }
        _ => {
            return Err(Error::Config(
                "constraint: give exactly one of 'target' or 'target_fraction'".into(),
            ))
        }
    };
    let constraint = ConstraintSpec {
        metric: c.metric,
        target,
        rho: c.rho,
        cost_scale: c.cost_scale,
        penalty_form: c.penalty_form,
    };
    constraint.validate()?;

    let o = &file.optimizer;
    let optimizer = OptimizerConfig {
        outer_steps: o.outer_steps,
        weight_iterations: o.weight_iterations,
        samples: o.samples,
        vector_updates_per_outer: o.vector_updates_per_outer,
        sigma_schedule: Schedule {
            initial: o.sigma.initial,
            final_value: o.sigma.final_value,
            total_steps: o.outer_steps,
        },
        alpha_schedule: Schedule {
            initial: o.alpha.initial,
            final_value: o.alpha.final_value,
            total_steps: o.outer_steps,
        },
        use_baseline: o.use_baseline,
        max_step: o.max_step.unwrap_or(f64::INFINITY),
        seed: o.seed,
    };
    optimizer.validate()?;

    if file.data.classes < 2 {
        return Err(Error::Config("data.classes must be >= 2".into()));
    }

    Ok(ResolvedRun {
        space,
        constraint,
        latency_table,
        optimizer,
        hyper: SgdHyper {
            lr: file.training.lr,
            momentum: file.training.momentum,
            weight_decay: file.training.weight_decay,
        },
        batch_size: o.batch_size,
        eval_subset: o.eval_subset,
        data: file.data.clone(),
        output: file.output.clone(),
    })
}
