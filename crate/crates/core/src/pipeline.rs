//! Two-stage training pipeline and frozen evaluation.
//!
//! Stage one pre-trains a backbone plus global classifier on the meta-train
//! split (dense or pooled cross-entropy). Stage two meta-finetunes the
//! backbone — and, with attentive pooling, the attention regressor — on
//! episodes, keeping the global classifier frozen as a distillation target.
//! Evaluation replays a frozen episode list against a checkpoint and reports
//! mean accuracy with a 95% confidence half-width. The ablation runner walks
//! the full {zero, gap, dense} × {gap, attpool} grid over one shared
//! evaluation manifest, and cross-domain evaluation applies a checkpoint to
//! a class-disjoint dataset.
//!
//! Everything here is a deterministic function of `(RunConfig, dataset)`:
//! shuffles, episode draws, and flips all come from counter-keyed streams,
//! and evaluation results are independent of the worker count.

use std::collections::HashMap;
use std::error::Error;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, BackboneError, EmbedMode, Family, FeatureMap};
use crate::episodes::{
    consistent_eval_set, episode_manifest, horizontal_split, sample_episode, Dataset, Episode,
    EpisodeError, Split,
};
use crate::heads::{
    att_pool, centroids, gap, nc_logits, centroids_graph, nc_logits_graph, GlobalClassifier,
    HeadError, Pooling, Regressor,
};
use crate::numkit::graph::{Graph, NodeId};
use crate::numkit::optim::{GradBuffer, MultiStep, Sgd};
use crate::numkit::params::{Bound, ParamError, ParamSet};
use crate::numkit::tensor::TensorError;
use crate::objectives::{
    dense_ce_fixed, entropy_reg, meta_global_ce, meta_loss, pretrain_loss_dc, pretrain_loss_gap,
    total_meta_objective, EpisodeTerms, LossWeights, ObjectiveError, DEFAULT_LABEL_SMOOTHING,
};
use crate::rng::{stream, Domain};
use crate::util::sha256_hex;

/// Episodes averaged into one meta-finetuning optimizer step.
pub const EPISODES_PER_BATCH: usize = 4;

/// Learning-rate multiplier applied at each milestone.
pub const DECAY_GAMMA: f64 = 0.1;

const CHECKPOINT_FORMAT: &str = "dcap-checkpoint-v1";

/// Stage-one objective choice; `None` skips pre-training entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pretraining {
    None,
    Gap,
    Dense,
}

impl Pretraining {
    pub fn tag(self) -> &'static str {
        match self {
            Pretraining::None => "zero",
            Pretraining::Gap => "gap",
            Pretraining::Dense => "dense",
        }
    }
}

/// Tag used in configs, variant names, and checkpoint headers.
pub fn pooling_tag(pooling: Pooling) -> &'static str {
    match pooling {
        Pooling::Gap => "gap",
        Pooling::AttPool => "attpool",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Epoch indices at which the rate decays by [`DECAY_GAMMA`].
    pub milestones: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub holdout_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    pub batches: usize,
    /// Batch indices at which both rates decay by [`DECAY_GAMMA`].
    pub milestones: Vec<usize>,
    pub backbone_lr: f64,
    pub regressor_lr: f64,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub weights: LossWeights,
    /// Meta-validation cadence in batches.
    pub validation_interval: usize,
    pub validation_episodes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    /// Seed of the frozen evaluation episode list, independent of the
    /// training seed so several runs can share one manifest.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub pooling: Pooling,
    pub pretraining: Pretraining,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub pretrain: PretrainConfig,
    pub meta: MetaConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Desk-scale defaults: dense pre-training with attentive pooling on the
    /// Conv4-32 backbone, schedules sized for a single CPU core.
    pub fn desk(seed: u64) -> Self {
        RunConfig {
            backbone: BackboneConfig::desk(),
            pooling: Pooling::AttPool,
            pretraining: Pretraining::Dense,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.0005,
            pretrain: PretrainConfig {
                epochs: 15,
                milestones: vec![10, 13],
                lr: 0.01,
                batch_size: 64,
                holdout_rate: 0.1,
            },
            meta: MetaConfig {
                batches: 60,
                milestones: vec![40],
                backbone_lr: 0.001,
                regressor_lr: 0.01,
                way: 5,
                shot: 1,
                queries: 15,
                weights: LossWeights::default(),
                validation_interval: 20,
                validation_episodes: 100,
            },
            eval: EvalConfig { way: 5, shot: 1, queries: 15, episodes: 1000, seed: 0 },
            seed,
            output_dir: PathBuf::from("runs"),
        }
    }

    pub fn with_cell(&self, pretraining: Pretraining, pooling: Pooling) -> RunConfig {
        let mut cfg = self.clone();
        cfg.pretraining = pretraining;
        cfg.pooling = pooling;
        cfg
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |detail: String| Err(PipelineError::Config { detail });
        for (name, milestones, end) in [
            ("pretrain", &self.pretrain.milestones, self.pretrain.epochs),
            ("meta", &self.meta.milestones, self.meta.batches),
        ] {
            if milestones.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("{name} milestones must be strictly increasing"));
            }
            if milestones.iter().any(|&m| m >= end) {
                return bad(format!("{name} milestones must precede the schedule end {end}"));
            }
        }
        for (name, value) in [
            ("pretrain.lr", self.pretrain.lr),
            ("meta.backbone_lr", self.meta.backbone_lr),
            ("meta.regressor_lr", self.meta.regressor_lr),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return bad(format!("{name} must be positive, got {value}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} negative", self.weight_decay));
        }
        if !(self.meta.weights.beta >= 0.0 && self.meta.weights.gamma >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if self.pretrain.batch_size == 0 || self.pretrain.epochs == 0 {
            return bad("pretrain schedule must be non-empty".into());
        }
        if !(self.pretrain.holdout_rate > 0.0 && self.pretrain.holdout_rate < 1.0) {
            return bad(format!("holdout rate {} outside (0, 1)", self.pretrain.holdout_rate));
        }
        for (name, v) in [
            ("meta.batches", self.meta.batches),
            ("meta.way", self.meta.way),
            ("meta.shot", self.meta.shot),
            ("meta.queries", self.meta.queries),
            ("meta.validation_interval", self.meta.validation_interval),
            ("meta.validation_episodes", self.meta.validation_episodes),
            ("eval.way", self.eval.way),
            ("eval.shot", self.eval.shot),
            ("eval.queries", self.eval.queries),
            ("eval.episodes", self.eval.episodes),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// Canonical `key=value` rendering; checkpoints embed it and digests
    /// are computed over it.
    pub fn snapshot(&self) -> String {
        let mut lines = Vec::new();
        let mut push = |k: &str, v: String| lines.push(format!("{k}={v}"));
        match self.backbone.family {
            Family::Conv4 { filters } => {
                push("backbone.family", "conv4".into());
                push("backbone.filters", join_usizes(filters.iter().copied()));
            }
            Family::Resnet { base_width } => {
                push("backbone.family", "resnet".into());
                push("backbone.base_width", base_width.to_string());
            }
        }
        push("backbone.input_size", self.backbone.input_size.to_string());
        push("backbone.channels_in", self.backbone.channels_in.to_string());
        push("pooling", pooling_tag(self.pooling).into());
        push("pretraining", self.pretraining.tag().into());
        push("momentum", format!("{:?}", self.momentum));
        push("nesterov", self.nesterov.to_string());
        push("weight_decay", format!("{:?}", self.weight_decay));
        push("pretrain.epochs", self.pretrain.epochs.to_string());
        push("pretrain.milestones", join_usizes(self.pretrain.milestones.iter().copied()));
        push("pretrain.lr", format!("{:?}", self.pretrain.lr));
        push("pretrain.batch_size", self.pretrain.batch_size.to_string());
        push("pretrain.holdout_rate", format!("{:?}", self.pretrain.holdout_rate));
        push("meta.batches", self.meta.batches.to_string());
        push("meta.milestones", join_usizes(self.meta.milestones.iter().copied()));
        push("meta.backbone_lr", format!("{:?}", self.meta.backbone_lr));
        push("meta.regressor_lr", format!("{:?}", self.meta.regressor_lr));
        push("meta.way", self.meta.way.to_string());
        push("meta.shot", self.meta.shot.to_string());
        push("meta.queries", self.meta.queries.to_string());
        push("meta.beta", format!("{:?}", self.meta.weights.beta));
        push("meta.gamma", format!("{:?}", self.meta.weights.gamma));
        push("meta.validation_interval", self.meta.validation_interval.to_string());
        push("meta.validation_episodes", self.meta.validation_episodes.to_string());
        push("eval.way", self.eval.way.to_string());
        push("eval.shot", self.eval.shot.to_string());
        push("eval.queries", self.eval.queries.to_string());
        push("eval.episodes", self.eval.episodes.to_string());
        push("eval.seed", self.eval.seed.to_string());
        push("seed", self.seed.to_string());
        push("output_dir", self.output_dir.display().to_string());
        lines.join("\n")
    }
}

fn join_usizes<I: IntoIterator<Item = usize>>(values: I) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Debug)]
pub enum PipelineError {
    Config { detail: String },
    Backbone(BackboneError),
    Episode(EpisodeError),
    Head(HeadError),
    Objective(ObjectiveError),
    Tensor(TensorError),
    Param(ParamError),
    Io { path: PathBuf, source: io::Error },
    Checkpoint { detail: String },
    Diverged { stage: &'static str, step: usize, detail: String },
    StageMismatch { expected: &'static str, got: &'static str },
    ClassOverlap { count: usize },
    Invariant { detail: String },
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Config { detail } => write!(f, "invalid run config: {detail}"),
            PipelineError::Backbone(e) => write!(f, "backbone: {e}"),
            PipelineError::Episode(e) => write!(f, "episodes: {e}"),
            PipelineError::Head(e) => write!(f, "heads: {e}"),
            PipelineError::Objective(e) => write!(f, "objectives: {e}"),
            PipelineError::Tensor(e) => write!(f, "tensor: {e}"),
            PipelineError::Param(e) => write!(f, "parameters: {e}"),
            PipelineError::Io { path, source } => {
                write!(f, "io error at {}: {source}", path.display())
            }
            PipelineError::Checkpoint { detail } => write!(f, "bad checkpoint: {detail}"),
            PipelineError::Diverged { stage, step, detail } => {
                write!(f, "{stage} diverged at step {step}: {detail}")
            }
            PipelineError::StageMismatch { expected, got } => {
                write!(f, "checkpoint stage {got}, expected {expected}")
            }
            PipelineError::ClassOverlap { count } => {
                write!(f, "{count} classes shared between source and target domains")
            }
            PipelineError::Invariant { detail } => write!(f, "pipeline invariant violated: {detail}"),
        }
    }
}

impl Error for PipelineError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            PipelineError::Backbone(e) => Some(e),
            PipelineError::Episode(e) => Some(e),
            PipelineError::Head(e) => Some(e),
            PipelineError::Objective(e) => Some(e),
            PipelineError::Tensor(e) => Some(e),
            PipelineError::Param(e) => Some(e),
            PipelineError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

macro_rules! wrap_error {
    ($variant:ident, $ty:ty) => {
        impl From<$ty> for PipelineError {
            fn from(e: $ty) -> Self {
                PipelineError::$variant(e)
            }
        }
    };
}

wrap_error!(Backbone, BackboneError);
wrap_error!(Episode, EpisodeError);
wrap_error!(Head, HeadError);
wrap_error!(Objective, ObjectiveError);
wrap_error!(Tensor, TensorError);
wrap_error!(Param, ParamError);

/// Which stage produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrained,
    Metatrained,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Pretrained => "pretrained",
            Stage::Metatrained => "metatrained",
        }
    }

    fn parse(tag: &str) -> Option<Stage> {
        match tag {
            "pretrained" => Some(Stage::Pretrained),
            "metatrained" => Some(Stage::Metatrained),
            _ => None,
        }
    }
}

/// One named scalar observation in a training history.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricPoint {
    pub name: String,
    pub step: u64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// A serializable model state: stage tag, architecture, every parameter and
/// buffer, the resolved config, and the metric history that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub backbone: BackboneConfig,
    pub pooling: Pooling,
    pub base_classes: Vec<usize>,
    pub seed: u64,
    pub config_snapshot: String,
    pub history: Vec<MetricPoint>,
    tensors: Vec<NamedTensor>,
}

fn dump_params(prefix: &str, params: &ParamSet<f32>, out: &mut Vec<NamedTensor>) {
    for id in params.ids() {
        out.push(NamedTensor {
            name: format!("{prefix}{}", params.name(id)),
            shape: params.tensor(id).shape().to_vec(),
            data: params.values(id).to_vec(),
        });
    }
}

fn load_params(
    filter: &str,
    strip: usize,
    tensors: &[NamedTensor],
    params: &mut ParamSet<f32>,
) -> Result<(), PipelineError> {
    let mut seen = 0usize;
    for t in tensors.iter().filter(|t| t.name.starts_with(filter)) {
        let name = &t.name[strip..];
        let id = params
            .id(name)
            .map_err(|_| PipelineError::Checkpoint { detail: format!("unknown tensor {}", t.name) })?;
        if params.tensor(id).shape() != t.shape.as_slice() {
            return Err(PipelineError::Checkpoint {
                detail: format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    t.name,
                    t.shape,
                    params.tensor(id).shape()
                ),
            });
        }
        params.set_values(id, &t.data)?;
        seen += 1;
    }
    if seen != params.len() {
        return Err(PipelineError::Checkpoint {
            detail: format!("{seen} tensors under {filter:?}, model has {}", params.len()),
        });
    }
    Ok(())
}

impl Checkpoint {
    fn from_parts(
        stage: Stage,
        cfg: &RunConfig,
        backbone_params: &ParamSet<f32>,
        classifier_params: &ParamSet<f32>,
        regressor_params: Option<&ParamSet<f32>>,
        base_classes: Vec<usize>,
        history: Vec<MetricPoint>,
    ) -> Checkpoint {
        let mut tensors = Vec::new();
        dump_params("backbone.", backbone_params, &mut tensors);
        dump_params("", classifier_params, &mut tensors);
        if let Some(params) = regressor_params {
            dump_params("regressor.", params, &mut tensors);
        }
        Checkpoint {
            stage,
            backbone: cfg.backbone.clone(),
            pooling: cfg.pooling,
            base_classes,
            seed: cfg.seed,
            config_snapshot: cfg.snapshot(),
            history,
            tensors,
        }
    }

    pub fn has_regressor(&self) -> bool {
        self.tensors.iter().any(|t| t.name.starts_with("regressor."))
    }

    /// Rebuilds the model this checkpoint describes.
    pub fn build_model(
        &self,
    ) -> Result<(Backbone<f32>, GlobalClassifier<f32>, Option<Regressor<f32>>), PipelineError> {
        let mut backbone = Backbone::new(self.backbone.clone(), self.seed)?;
        load_params("backbone.", "backbone.".len(), &self.tensors, &mut backbone.params)?;
        let depth = self.backbone.feature_depth();
        if self.base_classes.is_empty() {
            return Err(PipelineError::Checkpoint { detail: "no base classes recorded".into() });
        }
        let mut gc = GlobalClassifier::new(depth, self.base_classes.len(), self.seed);
        load_params("classifier.", 0, &self.tensors, &mut gc.params)?;
        let regressor = if self.has_regressor() {
            let mut r = Regressor::new(depth, self.seed);
            load_params("regressor.", "regressor.".len(), &self.tensors, &mut r.params)?;
            Some(r)
        } else {
            None
        };
        Ok((backbone, gc, regressor))
    }

    /// Serializes as a UTF-8 header (key=value lines, blank-line terminated)
    /// followed by the tensors as row-major little-endian `f32`, in header
    /// order. Byte-identical across save → load → save.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        let mut push = |k: &str, v: &str| {
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        };
        push("format", CHECKPOINT_FORMAT);
        push("stage", self.stage.tag());
        push("pooling", pooling_tag(self.pooling));
        push("seed", &self.seed.to_string());
        match self.backbone.family {
            Family::Conv4 { filters } => {
                push("backbone.family", "conv4");
                push("backbone.filters", &join_usizes(filters.iter().copied()));
            }
            Family::Resnet { base_width } => {
                push("backbone.family", "resnet");
                push("backbone.base_width", &base_width.to_string());
            }
        }
        push("backbone.input_size", &self.backbone.input_size.to_string());
        push("backbone.channels_in", &self.backbone.channels_in.to_string());
        push("base_classes", &join_usizes(self.base_classes.iter().copied()));
        push("config_digest", &sha256_hex(self.config_snapshot.as_bytes()));
        for line in self.config_snapshot.lines() {
            push("config", line);
        }
        for m in &self.history {
            push("metric", &format!("{},{},{:?}", m.name, m.step, m.value));
        }
        for t in &self.tensors {
            push("tensor", &format!("{},{}", t.name, join_usizes(t.shape.iter().copied()).replace(',', "x")));
        }
        header.push('\n');
        let mut bytes = header.into_bytes();
        for t in &self.tensors {
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, PipelineError> {
        let bad = |detail: String| PipelineError::Checkpoint { detail };
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("missing blank line after header".into()))?;
        let header = std::str::from_utf8(&bytes[..split])
            .map_err(|_| bad("header is not UTF-8".into()))?;
        let mut payload = &bytes[split + 2..];

        let mut fields: HashMap<&str, &str> = HashMap::new();
        let mut config_lines = Vec::new();
        let mut metrics = Vec::new();
        let mut tensor_decls: Vec<(String, Vec<usize>)> = Vec::new();
        for line in header.lines() {
            let (key, value) =
                line.split_once('=').ok_or_else(|| bad(format!("bad header line {line:?}")))?;
            match key {
                "config" => config_lines.push(value.to_string()),
                "metric" => {
                    let mut parts = value.splitn(3, ',');
                    let name = parts.next().unwrap_or_default().to_string();
                    let step = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad(format!("bad metric line {value:?}")))?;
                    let value = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad(format!("bad metric line {value:?}")))?;
                    metrics.push(MetricPoint { name, step, value });
                }
                "tensor" => {
                    let (name, dims) = value
                        .split_once(',')
                        .ok_or_else(|| bad(format!("bad tensor line {value:?}")))?;
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad tensor shape {dims:?}")))?;
                    tensor_decls.push((name.to_string(), shape));
                }
                _ => {
                    fields.insert(key, value);
                }
            }
        }
        let field = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("missing field {k}")));
        if field("format")? != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format {:?}", fields["format"])));
        }
        let stage = Stage::parse(field("stage")?)
            .ok_or_else(|| bad(format!("unknown stage {:?}", fields["stage"])))?;
        let pooling = match field("pooling")? {
            "gap" => Pooling::Gap,
            "attpool" => Pooling::AttPool,
            other => return Err(bad(format!("unknown pooling {other:?}"))),
        };
        let seed = field("seed")?.parse().map_err(|_| bad("bad seed".into()))?;
        let parse_list = |s: &str| -> Result<Vec<usize>, PipelineError> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|v| v.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("bad integer list {s:?}")))
        };
        let family = match field("backbone.family")? {
            "conv4" => {
                let filters = parse_list(field("backbone.filters")?)?;
                if filters.len() != 4 {
                    return Err(bad("conv4 needs exactly 4 filter widths".into()));
                }
                Family::Conv4 { filters: [filters[0], filters[1], filters[2], filters[3]] }
            }
            "resnet" => Family::Resnet {
                base_width: field("backbone.base_width")?
                    .parse()
                    .map_err(|_| bad("bad base width".into()))?,
            },
            other => return Err(bad(format!("unknown backbone family {other:?}"))),
        };
        let backbone = BackboneConfig {
            family,
            input_size: field("backbone.input_size")?
                .parse()
                .map_err(|_| bad("bad input size".into()))?,
            channels_in: field("backbone.channels_in")?
                .parse()
                .map_err(|_| bad("bad channel count".into()))?,
        };
        let base_classes = parse_list(field("base_classes")?)?;
        let mut tensors = Vec::with_capacity(tensor_decls.len());
        for (name, shape) in tensor_decls {
            let numel: usize = shape.iter().product();
            if payload.len() < numel * 4 {
                return Err(bad(format!("payload truncated at tensor {name}")));
            }
            let (raw, rest) = payload.split_at(numel * 4);
            payload = rest;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if !payload.is_empty() {
            return Err(bad(format!("{} trailing payload bytes", payload.len())));
        }
        Ok(Checkpoint {
            stage,
            backbone,
            pooling,
            base_classes,
            seed,
            config_snapshot: config_lines.join("\n"),
            history: metrics,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        fs::write(path, self.to_bytes())
            .map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Checkpoint, PipelineError> {
        let bytes = fs::read(path)
            .map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Accuracy of one evaluation run: per-episode values plus their mean and
/// the 95% confidence half-width `1.96·s/√n` (sample standard deviation).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub variant: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub half_width: f64,
}

impl EvalReport {
    pub fn new(variant: impl Into<String>, accuracies: Vec<f64>) -> EvalReport {
        let n = accuracies.len();
        let mean = if n == 0 { 0.0 } else { accuracies.iter().sum::<f64>() / n as f64 };
        let half_width = if n > 1 {
            let var =
                accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        EvalReport { variant: variant.into(), accuracies, mean, half_width }
    }

    pub fn count(&self) -> usize {
        self.accuracies.len()
    }

    pub fn csv_header() -> &'static str {
        "variant,mean,ci,count,seed"
    }

    pub fn csv_line(&self, seed: u64) -> String {
        format!("{},{:.6},{:.6},{},{}", self.variant, self.mean, self.half_width, self.count(), seed)
    }
}

struct PixelBatch {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn image_batch(data: &Dataset, indices: &[usize], flips: &[bool]) -> PixelBatch {
    debug_assert_eq!(indices.len(), flips.len());
    let (s, c) = (data.extent(), data.channels());
    let mut values = Vec::with_capacity(indices.len() * c * s * s);
    for (&index, &flip) in indices.iter().zip(flips) {
        values.extend(data.pixels_scaled::<f32>(index, flip));
    }
    PixelBatch { shape: vec![indices.len(), c, s, s], data: values }
}

fn collect_grads(graph: &Graph<f32>, bound: &Bound, buf: &mut GradBuffer<f32>, scale: f32) {
    for &(pid, node) in bound.pairs() {
        if let Some(grad) = graph.grad(node) {
            buf.add_scaled(pid, grad, scale);
        }
    }
}

/// Per-epoch pre-training record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub holdout_accuracy: f64,
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Stage one: supervised training of backbone + global classifier on the
/// fit portion of the meta-train split, model selection by holdout top-1.
pub fn pretrain(data: &Dataset, cfg: &RunConfig) -> Result<PretrainOutcome, PipelineError> {
    cfg.validate()?;
    if cfg.pretraining == Pretraining::None {
        return Err(PipelineError::Config {
            detail: "pretraining mode is 'zero'; nothing to pre-train".into(),
        });
    }
    if cfg.backbone.input_size != data.extent() || cfg.backbone.channels_in != data.channels() {
        return Err(PipelineError::Config {
            detail: format!(
                "backbone expects {}px ×{} channels, dataset is {}px ×{}",
                cfg.backbone.input_size,
                cfg.backbone.channels_in,
                data.extent(),
                data.channels()
            ),
        });
    }
    let base_classes = data.base_classes().to_vec();
    if base_classes.is_empty() {
        return Err(PipelineError::Config { detail: "dataset has no meta-train classes".into() });
    }
    let parts = horizontal_split(data, cfg.pretrain.holdout_rate, cfg.seed)?;
    let mut backbone = Backbone::new(cfg.backbone.clone(), cfg.seed)?;
    let mut gc = GlobalClassifier::new(cfg.backbone.feature_depth(), base_classes.len(), cfg.seed);
    let mut opt_b = Sgd::new(
        &backbone.params,
        backbone.params.trainable_ids(),
        cfg.pretrain.lr as f32,
        cfg.momentum as f32,
        cfg.weight_decay as f32,
    );
    let mut opt_c = Sgd::new(
        &gc.params,
        gc.params.trainable_ids(),
        cfg.pretrain.lr as f32,
        cfg.momentum as f32,
        cfg.weight_decay as f32,
    );
    let schedule = MultiStep {
        milestones: cfg.pretrain.milestones.iter().map(|&m| m as u64).collect(),
        gamma: DECAY_GAMMA as f32,
    };
    let mut grads_b = GradBuffer::new(&backbone.params);
    let mut grads_c = GradBuffer::new(&gc.params);
    let mut stats = Vec::with_capacity(cfg.pretrain.epochs);
    let mut best: Option<(f64, usize, ParamSet<f32>, ParamSet<f32>)> = None;
    let mut history = Vec::new();

    for epoch in 0..cfg.pretrain.epochs {
        let lr = schedule.lr(cfg.pretrain.lr as f32, epoch as u64);
        opt_b.lr = lr;
        opt_c.lr = lr;
        let mut rng = stream(cfg.seed, Domain::PretrainShuffle, epoch as u64);
        let mut order = parts.fit.clone();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.pretrain.batch_size) {
            let flips: Vec<bool> = chunk.iter().map(|_| rng.gen_bool(0.5)).collect();
            if cfg.nesterov {
                opt_b.lookahead_apply(&mut backbone.params);
                opt_c.lookahead_apply(&mut gc.params);
            }
            let batch = image_batch(data, chunk, &flips);
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| data.base_index(data.image(i).class).expect("fit image is base-class"))
                .collect();
            let mut graph = Graph::new();
            let images = graph.input(&batch.shape, batch.data, false)?;
            let (map, bound_b) = backbone.embed(&mut graph, images, EmbedMode::Train)?;
            let (loss, bound_c) = match cfg.pretraining {
                Pretraining::Dense => pretrain_loss_dc(&mut graph, map, &labels, &gc)?,
                Pretraining::Gap => pretrain_loss_gap(&mut graph, map, &labels, &gc)?,
                Pretraining::None => unreachable!("rejected above"),
            };
            let value = graph.item(loss)? as f64;
            if !value.is_finite() || value > 1e4 {
                return Err(PipelineError::Diverged {
                    stage: "pretrain",
                    step: epoch,
                    detail: format!("batch loss {value}"),
                });
            }
            graph.backward(loss)?;
            if cfg.nesterov {
                opt_b.lookahead_revert(&mut backbone.params);
                opt_c.lookahead_revert(&mut gc.params);
            }
            grads_b.zero();
            grads_c.zero();
            collect_grads(&graph, &bound_b, &mut grads_b, 1.0);
            collect_grads(&graph, &bound_c, &mut grads_c, 1.0);
            opt_b.step(&mut backbone.params, &grads_b);
            opt_c.step(&mut gc.params, &grads_c);
            loss_sum += value * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = loss_sum / seen as f64;
        let holdout_accuracy = holdout_top1(&backbone, &gc, data, &parts.holdout)?;
        history.push(MetricPoint { name: "train_loss".into(), step: epoch as u64, value: train_loss });
        history.push(MetricPoint {
            name: "holdout_accuracy".into(),
            step: epoch as u64,
            value: holdout_accuracy,
        });
        stats.push(EpochStats { epoch, lr: lr as f64, train_loss, holdout_accuracy });
        if best.as_ref().map_or(true, |(acc, ..)| holdout_accuracy > *acc) {
            best = Some((holdout_accuracy, epoch, backbone.params.clone(), gc.params.clone()));
        }
    }
    let (_, best_epoch, best_b, best_c) = best.expect("at least one epoch ran");
    history.push(MetricPoint { name: "best_epoch".into(), step: best_epoch as u64, value: 0.0 });
    let checkpoint =
        Checkpoint::from_parts(Stage::Pretrained, cfg, &best_b, &best_c, None, base_classes, history);
    Ok(PretrainOutcome { checkpoint, epochs: stats, best_epoch })
}

fn holdout_top1(
    backbone: &Backbone<f32>,
    gc: &GlobalClassifier<f32>,
    data: &Dataset,
    holdout: &[usize],
) -> Result<f64, PipelineError> {
    let mut correct = 0usize;
    for chunk in holdout.chunks(64) {
        let flips = vec![false; chunk.len()];
        let batch = image_batch(data, chunk, &flips);
        let mut graph = Graph::new();
        let images = graph.input(&batch.shape, batch.data, false)?;
        let map = backbone.embed_eval(&mut graph, images)?;
        let maps = FeatureMap::from_batch(graph.shape(map), graph.data(map));
        for (local, &index) in chunk.iter().enumerate() {
            let label = data
                .base_index(data.image(index).class)
                .expect("holdout image is base-class");
            let logits = gc.classify(&gap(&maps[local]).values)?;
            if argmax(&logits) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / holdout.len().max(1) as f64)
}

fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-batch meta-finetuning record.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub batch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct MetaOutcome {
    pub checkpoint: Checkpoint,
    pub batches: Vec<BatchStats>,
    /// `(batch, meta-validation accuracy)` at each validation point.
    pub validations: Vec<(usize, f64)>,
    pub best_batch: usize,
}

/// Stage two: episodic finetuning of the backbone (and attention regressor)
/// with the global classifier frozen as the distillation target. `start`
/// must be a pre-trained checkpoint; `None` trains the zero-pretraining
/// variant from fresh parameters.
pub fn meta_finetune(
    data: &Dataset,
    start: Option<&Checkpoint>,
    cfg: &RunConfig,
) -> Result<MetaOutcome, PipelineError> {
    cfg.validate()?;
    let base_classes = data.base_classes().to_vec();
    let (mut backbone, mut gc) = match start {
        Some(ck) => {
            if ck.stage != Stage::Pretrained {
                return Err(PipelineError::StageMismatch {
                    expected: Stage::Pretrained.tag(),
                    got: ck.stage.tag(),
                });
            }
            if ck.backbone != cfg.backbone {
                return Err(PipelineError::Config {
                    detail: "checkpoint backbone differs from configured backbone".into(),
                });
            }
            if ck.base_classes != base_classes {
                return Err(PipelineError::Config {
                    detail: "checkpoint base classes differ from the dataset's".into(),
                });
            }
            let (b, g, _) = ck.build_model()?;
            (b, g)
        }
        None => {
            if base_classes.is_empty() {
                return Err(PipelineError::Config {
                    detail: "dataset has no meta-train classes".into(),
                });
            }
            let b = Backbone::new(cfg.backbone.clone(), cfg.seed)?;
            let g = GlobalClassifier::new(cfg.backbone.feature_depth(), base_classes.len(), cfg.seed);
            (b, g)
        }
    };
    gc.freeze();
    let frozen_w: Vec<u32> = gc.params.ids().flat_map(|id| gc.params.values(id)).map(|v| v.to_bits()).collect();

    let mut regressor = match cfg.pooling {
        Pooling::AttPool => Some(Regressor::new(cfg.backbone.feature_depth(), cfg.seed)),
        Pooling::Gap => None,
    };
    let mut opt_b = Sgd::new(
        &backbone.params,
        backbone.params.trainable_ids(),
        cfg.meta.backbone_lr as f32,
        cfg.momentum as f32,
        cfg.weight_decay as f32,
    );
    let mut opt_r = regressor.as_ref().map(|r| {
        Sgd::new(
            &r.params,
            r.params.trainable_ids(),
            cfg.meta.regressor_lr as f32,
            cfg.momentum as f32,
            cfg.weight_decay as f32,
        )
    });
    let schedule = MultiStep {
        milestones: cfg.meta.milestones.iter().map(|&m| m as u64).collect(),
        gamma: DECAY_GAMMA as f32,
    };
    let mut grads_b = GradBuffer::new(&backbone.params);
    let mut grads_r = regressor.as_ref().map(|r| GradBuffer::new(&r.params));
    let mut stats = Vec::with_capacity(cfg.meta.batches);
    let mut validations = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamSet<f32>, Option<ParamSet<f32>>)> = None;
    let scale = 1.0 / EPISODES_PER_BATCH as f32;

    for batch in 0..cfg.meta.batches {
        opt_b.lr = schedule.lr(cfg.meta.backbone_lr as f32, batch as u64);
        if let Some(opt) = opt_r.as_mut() {
            opt.lr = schedule.lr(cfg.meta.regressor_lr as f32, batch as u64);
        }
        if cfg.nesterov {
            opt_b.lookahead_apply(&mut backbone.params);
            if let (Some(opt), Some(reg)) = (opt_r.as_ref(), regressor.as_mut()) {
                opt.lookahead_apply(&mut reg.params);
            }
        }
        grads_b.zero();
        if let Some(buf) = grads_r.as_mut() {
            buf.zero();
        }
        let mut batch_loss = 0.0;
        for slot in 0..EPISODES_PER_BATCH {
            let index = (batch * EPISODES_PER_BATCH + slot) as u64;
            let mut rng = stream(cfg.seed, Domain::TrainEpisode, index);
            let episode = sample_episode(
                data,
                Split::MetaTrain,
                cfg.meta.way,
                cfg.meta.shot,
                cfg.meta.queries,
                &mut rng,
                index,
            )?;
            let mut graph = Graph::new();
            let (loss, bound_b, bound_r) = episode_objective(
                &mut graph,
                &mut backbone,
                &gc,
                regressor.as_ref(),
                data,
                &episode,
                &mut rng,
                &cfg.meta.weights,
            )?;
            let value = graph.item(loss)? as f64;
            if !value.is_finite() || value > 1e4 {
                return Err(PipelineError::Diverged {
                    stage: "meta-finetune",
                    step: batch,
                    detail: format!("episode {index} loss {value}"),
                });
            }
            graph.backward(loss)?;
            collect_grads(&graph, &bound_b, &mut grads_b, scale);
            if let Some(buf) = grads_r.as_mut() {
                collect_grads(&graph, &bound_r, buf, scale);
            }
            batch_loss += value / EPISODES_PER_BATCH as f64;
        }
        if cfg.nesterov {
            opt_b.lookahead_revert(&mut backbone.params);
            if let (Some(opt), Some(reg)) = (opt_r.as_ref(), regressor.as_mut()) {
                opt.lookahead_revert(&mut reg.params);
            }
        }
        opt_b.step(&mut backbone.params, &grads_b);
        if let (Some(opt), Some(buf), Some(reg)) = (opt_r.as_mut(), grads_r.as_ref(), regressor.as_mut())
        {
            opt.step(&mut reg.params, buf);
        }
        history.push(MetricPoint { name: "batch_loss".into(), step: batch as u64, value: batch_loss });
        stats.push(BatchStats { batch, lr: opt_b.lr as f64, loss: batch_loss });

        let last = batch + 1 == cfg.meta.batches;
        if (batch + 1) % cfg.meta.validation_interval == 0 || last {
            let accuracy = frozen_evaluation(
                &backbone,
                regressor.as_ref(),
                cfg.pooling,
                data,
                Split::MetaVal,
                cfg.eval.way,
                cfg.eval.shot,
                cfg.eval.queries,
                cfg.eval.seed,
                cfg.meta.validation_episodes,
                1,
            )?
            .mean;
            history.push(MetricPoint {
                name: "val_accuracy".into(),
                step: batch as u64,
                value: accuracy,
            });
            validations.push((batch, accuracy));
            if best.as_ref().map_or(true, |(acc, ..)| accuracy > *acc) {
                best = Some((
                    accuracy,
                    batch,
                    backbone.params.clone(),
                    regressor.as_ref().map(|r| r.params.clone()),
                ));
            }
        }
    }
    let frozen_after: Vec<u32> =
        gc.params.ids().flat_map(|id| gc.params.values(id)).map(|v| v.to_bits()).collect();
    if frozen_w != frozen_after {
        return Err(PipelineError::Invariant {
            detail: "frozen classifier parameters changed during meta-finetuning".into(),
        });
    }
    let (_, best_batch, best_b, best_r) = best.expect("at least one validation ran");
    history.push(MetricPoint { name: "best_batch".into(), step: best_batch as u64, value: 0.0 });
    let checkpoint = Checkpoint::from_parts(
        Stage::Metatrained,
        cfg,
        &best_b,
        &gc.params,
        best_r.as_ref(),
        base_classes,
        history,
    );
    Ok(MetaOutcome { checkpoint, batches: stats, validations, best_batch })
}

/// Builds one episode's combined objective on `graph`. Support and query
/// batches are embedded by separate backbone calls (legal under frozen
/// normalization statistics: no batch coupling), so backbone parameters are
/// bound twice and their gradients accumulate across both bindings.
#[allow(clippy::too_many_arguments)]
fn episode_objective(
    graph: &mut Graph<f32>,
    backbone: &mut Backbone<f32>,
    gc: &GlobalClassifier<f32>,
    regressor: Option<&Regressor<f32>>,
    data: &Dataset,
    episode: &Episode,
    rng: &mut ChaCha8Rng,
    weights: &LossWeights,
) -> Result<(NodeId, Bound, Bound), PipelineError> {
    let support_images: Vec<usize> = episode.support.iter().map(|s| s.image).collect();
    let query_images: Vec<usize> = episode.query.iter().map(|s| s.image).collect();
    let support_flips: Vec<bool> = support_images.iter().map(|_| rng.gen_bool(0.5)).collect();
    let query_flips: Vec<bool> = query_images.iter().map(|_| rng.gen_bool(0.5)).collect();
    let support_labels: Vec<usize> = episode.support.iter().map(|s| s.episode_label).collect();
    let query_labels: Vec<usize> = episode.query.iter().map(|s| s.episode_label).collect();
    let base_labels: Vec<usize> = episode.query.iter().map(|s| s.base_label).collect();

    let s_batch = image_batch(data, &support_images, &support_flips);
    let q_batch = image_batch(data, &query_images, &query_flips);
    let s_images = graph.input(&s_batch.shape, s_batch.data, false)?;
    let q_images = graph.input(&q_batch.shape, q_batch.data, false)?;
    let (s_map, mut bound_b) = backbone.embed(graph, s_images, EmbedMode::FrozenStats)?;
    let (q_map, bound_q) = backbone.embed(graph, q_images, EmbedMode::FrozenStats)?;
    bound_b.append(bound_q);

    let mut bound_r = Bound::new();
    let (s_emb, q_emb, entropy, global) = match regressor {
        Some(reg) => {
            let (_raw_s, w_s, rb_s) = reg.attention_graph(graph, s_map, true)?;
            let (raw_q, w_q, rb_q) = reg.attention_graph(graph, q_map, true)?;
            bound_r.append(rb_s);
            bound_r.append(rb_q);
            let s_emb = graph.weighted_pool(s_map, w_s)?;
            let q_emb = graph.weighted_pool(q_map, w_q)?;
            let entropy = entropy_reg(graph, w_q)?;
            let global = if weights.gamma > 0.0 {
                meta_global_ce(graph, q_map, raw_q, gc, &base_labels, false)?
            } else {
                graph.scalar_const(0.0)
            };
            (s_emb, q_emb, entropy, global)
        }
        None => {
            let s_emb = graph.gap(s_map)?;
            let q_emb = graph.gap(q_map)?;
            let entropy = graph.scalar_const(0.0);
            let global = if weights.gamma > 0.0 {
                dense_ce_fixed(graph, q_map, &base_labels, gc, DEFAULT_LABEL_SMOOTHING, false)?.0
            } else {
                graph.scalar_const(0.0)
            };
            (s_emb, q_emb, entropy, global)
        }
    };
    let cents = centroids_graph(graph, s_emb, &support_labels)?;
    let logits = nc_logits_graph(graph, q_emb, cents)?;
    let meta = meta_loss(graph, logits, &query_labels)?;
    let terms = EpisodeTerms { meta, entropy, global_ce: global };
    let total = total_meta_objective(graph, &[terms], weights)?;
    Ok((total, bound_b, bound_r))
}

/// Embeds the listed images through the frozen backbone (inference mode),
/// split across `threads` workers; per-image results are identical for any
/// worker count because inference has no cross-image coupling.
fn embed_maps(
    backbone: &Backbone<f32>,
    data: &Dataset,
    indices: &[usize],
    threads: usize,
) -> Result<HashMap<usize, FeatureMap<f32>>, PipelineError> {
    let chunks: Vec<&[usize]> = indices.chunks(32).collect();
    let worker = |chunk: &[usize]| -> Result<Vec<FeatureMap<f32>>, PipelineError> {
        let flips = vec![false; chunk.len()];
        let batch = image_batch(data, chunk, &flips);
        let mut graph = Graph::new();
        let images = graph.input(&batch.shape, batch.data, false)?;
        let map = backbone.embed_eval(&mut graph, images)?;
        Ok(FeatureMap::from_batch(graph.shape(map), graph.data(map)))
    };
    let mut results: Vec<Option<Vec<FeatureMap<f32>>>> = vec![None; chunks.len()];
    if threads <= 1 {
        for (slot, chunk) in chunks.iter().enumerate() {
            results[slot] = Some(worker(chunk)?);
        }
    } else {
        let outputs = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (slot, chunk) in chunks.iter().enumerate() {
                let worker = &worker;
                handles.push((slot, scope.spawn(move || worker(chunk))));
            }
            handles
                .into_iter()
                .map(|(slot, h)| (slot, h.join().expect("embed worker panicked")))
                .collect::<Vec<_>>()
        });
        for (slot, outcome) in outputs {
            results[slot] = Some(outcome?);
        }
    }
    let mut maps = HashMap::with_capacity(indices.len());
    for (chunk, result) in chunks.iter().zip(results) {
        for (&index, map) in chunk.iter().zip(result.expect("worker filled slot")) {
            maps.insert(index, map);
        }
    }
    Ok(maps)
}

fn pooled_embedding(
    map: &FeatureMap<f32>,
    pooling: Pooling,
    regressor: Option<&Regressor<f32>>,
) -> Result<Vec<f32>, PipelineError> {
    match pooling {
        Pooling::Gap => Ok(gap(map).values),
        Pooling::AttPool => {
            let reg = regressor.ok_or_else(|| PipelineError::Checkpoint {
                detail: "attentive pooling requested but no regressor present".into(),
            })?;
            let att = reg.attention_scores(map)?;
            Ok(att_pool(map, &att)?.values)
        }
    }
}

fn episode_accuracy(
    maps: &HashMap<usize, FeatureMap<f32>>,
    episode: &Episode,
    pooling: Pooling,
    regressor: Option<&Regressor<f32>>,
) -> Result<f64, PipelineError> {
    let mut support = Vec::with_capacity(episode.support.len());
    let mut labels = Vec::with_capacity(episode.support.len());
    for slot in &episode.support {
        support.push(crate::heads::Embedding {
            values: pooled_embedding(&maps[&slot.image], pooling, regressor)?,
            pooling,
        });
        labels.push(slot.episode_label);
    }
    let cents = centroids(&support, &labels)?;
    let mut correct = 0usize;
    for slot in &episode.query {
        let query = pooled_embedding(&maps[&slot.image], pooling, regressor)?;
        let logits = nc_logits(&query, &cents)?;
        if argmax(&logits) == slot.episode_label {
            correct += 1;
        }
    }
    Ok(correct as f64 / episode.query.len() as f64)
}

/// Shared evaluation core: frozen parameters, cached per-image embeddings,
/// fixed episode order.
#[allow(clippy::too_many_arguments)]
fn frozen_evaluation(
    backbone: &Backbone<f32>,
    regressor: Option<&Regressor<f32>>,
    pooling: Pooling,
    data: &Dataset,
    split: Split,
    way: usize,
    shot: usize,
    queries: usize,
    seed: u64,
    count: usize,
    threads: usize,
) -> Result<EvalReport, PipelineError> {
    let episodes = consistent_eval_set(data, split, way, shot, queries, seed, count)?;
    let mut needed: Vec<usize> = episodes
        .iter()
        .flat_map(|e| e.support.iter().chain(&e.query).map(|s| s.image))
        .collect();
    needed.sort_unstable();
    needed.dedup();
    let maps = embed_maps(backbone, data, &needed, threads)?;
    let mut accuracies = vec![0.0; episodes.len()];
    if threads <= 1 {
        for (slot, episode) in episodes.iter().enumerate() {
            accuracies[slot] = episode_accuracy(&maps, episode, pooling, regressor)?;
        }
    } else {
        let chunk_len = episodes.len().div_ceil(threads);
        let outcomes = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (worker, chunk) in episodes.chunks(chunk_len).enumerate() {
                let maps = &maps;
                handles.push((
                    worker,
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|e| episode_accuracy(maps, e, pooling, regressor))
                            .collect::<Result<Vec<f64>, PipelineError>>()
                    }),
                ));
            }
            handles
                .into_iter()
                .map(|(worker, h)| (worker, h.join().expect("eval worker panicked")))
                .collect::<Vec<_>>()
        });
        for (worker, outcome) in outcomes {
            let values = outcome?;
            let start = worker * chunk_len;
            accuracies[start..start + values.len()].copy_from_slice(&values);
        }
    }
    Ok(EvalReport::new("", accuracies))
}

/// Eval-mode feature maps of a checkpoint's backbone over the given images,
/// keyed by dataset index.
pub fn feature_maps(
    ckpt: &Checkpoint,
    data: &Dataset,
    indices: &[usize],
    threads: usize,
) -> Result<HashMap<usize, FeatureMap<f32>>, PipelineError> {
    if ckpt.backbone.input_size != data.extent() || ckpt.backbone.channels_in != data.channels() {
        return Err(PipelineError::Config {
            detail: "checkpoint geometry does not match the dataset".into(),
        });
    }
    let (backbone, _gc, _regressor) = ckpt.build_model()?;
    embed_maps(&backbone, data, indices, threads.max(1))
}

/// Evaluates a checkpoint on a frozen episode list from `split`.
///
/// Meta-trained checkpoints evaluate with their trained pooling; pre-trained
/// checkpoints evaluate in the no-finetune protocol (global average pooling
/// over the raw pre-trained features).
pub fn evaluate(
    data: &Dataset,
    ckpt: &Checkpoint,
    split: Split,
    eval: &EvalConfig,
    variant: &str,
    threads: usize,
) -> Result<EvalReport, PipelineError> {
    if ckpt.backbone.input_size != data.extent() || ckpt.backbone.channels_in != data.channels() {
        return Err(PipelineError::Config {
            detail: "checkpoint geometry does not match the dataset".into(),
        });
    }
    let (backbone, _gc, regressor) = ckpt.build_model()?;
    let pooling = match ckpt.stage {
        Stage::Pretrained => Pooling::Gap,
        Stage::Metatrained => ckpt.pooling,
    };
    let mut report = frozen_evaluation(
        &backbone,
        regressor.as_ref(),
        pooling,
        data,
        split,
        eval.way,
        eval.shot,
        eval.queries,
        eval.seed,
        eval.episodes,
        threads.max(1),
    )?;
    report.variant = variant.to_string();
    Ok(report)
}

/// One cell of the pre-training × pooling ablation grid.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub pretraining: Pretraining,
    pub pooling: Pooling,
    pub report: EvalReport,
}

pub struct AblationOutcome {
    pub cells: Vec<AblationCell>,
    /// Manifest of the evaluation episodes shared by every cell.
    pub eval_manifest: String,
}

pub const ABLATION_GRID: [(Pretraining, Pooling); 6] = [
    (Pretraining::None, Pooling::Gap),
    (Pretraining::None, Pooling::AttPool),
    (Pretraining::Gap, Pooling::Gap),
    (Pretraining::Gap, Pooling::AttPool),
    (Pretraining::Dense, Pooling::Gap),
    (Pretraining::Dense, Pooling::AttPool),
];

/// Runs all six {pre-training} × {pooling} cells with shared seeds and one
/// shared evaluation episode list. Each pre-training mode trains once and
/// feeds both pooling cells.
pub fn ablate(data: &Dataset, base: &RunConfig, threads: usize) -> Result<AblationOutcome, PipelineError> {
    base.validate()?;
    let eval_episodes = consistent_eval_set(
        data,
        Split::MetaTest,
        base.eval.way,
        base.eval.shot,
        base.eval.queries,
        base.eval.seed,
        base.eval.episodes,
    )?;
    let eval_manifest = episode_manifest(&eval_episodes);
    let mut cells = Vec::with_capacity(ABLATION_GRID.len());
    let mut pretrained: HashMap<&'static str, Checkpoint> = HashMap::new();
    for (pretraining, pooling) in ABLATION_GRID {
        let cfg = base.with_cell(pretraining, pooling);
        let start = match pretraining {
            Pretraining::None => None,
            _ => {
                if !pretrained.contains_key(pretraining.tag()) {
                    let outcome = pretrain(data, &cfg)?;
                    pretrained.insert(pretraining.tag(), outcome.checkpoint);
                }
                pretrained.get(pretraining.tag())
            }
        };
        let meta = meta_finetune(data, start, &cfg)?;
        let variant = format!("{}+{}", pretraining.tag(), pooling_tag(pooling));
        let report = evaluate(data, &meta.checkpoint, Split::MetaTest, &base.eval, &variant, threads)?;
        cells.push(AblationCell { pretraining, pooling, report });
    }
    Ok(AblationOutcome { cells, eval_manifest })
}

impl AblationOutcome {
    pub fn grid_csv(&self, seed: u64) -> String {
        let mut out = String::from("pretraining,pooling,mean,ci,count,seed\n");
        for cell in &self.cells {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{}\n",
                cell.pretraining.tag(),
                pooling_tag(cell.pooling),
                cell.report.mean,
                cell.report.half_width,
                cell.report.count(),
                seed
            ));
        }
        out
    }

    /// Plain-text grid: pre-training modes as rows, poolings as columns.
    pub fn grid_text(&self) -> String {
        let mut out = format!("{:<10}{:>20}{:>20}\n", "pretrain", "gap", "attpool");
        for pre in [Pretraining::None, Pretraining::Gap, Pretraining::Dense] {
            out.push_str(&format!("{:<10}", pre.tag()));
            for pooling in [Pooling::Gap, Pooling::AttPool] {
                let cell = self
                    .cells
                    .iter()
                    .find(|c| c.pretraining == pre && c.pooling == pooling)
                    .expect("full grid");
                out.push_str(&format!(
                    "{:>20}",
                    format!("{:.4} ± {:.4}", cell.report.mean, cell.report.half_width)
                ));
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates a checkpoint on another dataset's meta-test split. The
/// evaluated classes must be disjoint from the classes the checkpoint was
/// trained on; a dataset's own meta-test split always satisfies this.
pub fn cross_domain_eval(
    ckpt: &Checkpoint,
    target: &Dataset,
    eval: &EvalConfig,
    variant: &str,
    threads: usize,
) -> Result<EvalReport, PipelineError> {
    let overlap = target
        .classes_in(Split::MetaTest)
        .iter()
        .filter(|c| ckpt.base_classes.binary_search(c).is_ok())
        .count();
    if overlap > 0 {
        return Err(PipelineError::ClassOverlap { count: overlap });
    }
    evaluate(target, ckpt, Split::MetaTest, eval, variant, threads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{synth_generate, SynthSpec};
    use approx::assert_relative_eq;

    fn tiny_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            class_counts: [3, 2, 2],
            images_per_class: [12, 8, 8],
            extent: 32,
            channels: 1,
            regime_weights: [0.4, 0.3, 0.3],
            noise: 0.05,
            vocab_start: 0,
            seed,
        }
    }

    fn tiny_config(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::desk(seed);
        cfg.backbone = BackboneConfig {
            family: Family::Conv4 { filters: [6, 6, 6, 6] },
            input_size: 32,
            channels_in: 1,
        };
        cfg.pretrain = PretrainConfig {
            epochs: 2,
            milestones: vec![1],
            lr: 0.05,
            batch_size: 16,
            holdout_rate: 0.1,
        };
        cfg.meta = MetaConfig {
            batches: 2,
            milestones: vec![],
            backbone_lr: 0.001,
            regressor_lr: 0.01,
            way: 2,
            shot: 1,
            queries: 3,
            weights: LossWeights::default(),
            validation_interval: 1,
            validation_episodes: 4,
        };
        cfg.eval = EvalConfig { way: 2, shot: 1, queries: 3, episodes: 6, seed: 0 };
        cfg
    }

    #[test]
    fn config_validation_rejects_unsorted_milestones() {
        let mut cfg = tiny_config(0);
        cfg.pretrain.milestones = vec![1, 1];
        assert!(matches!(cfg.validate(), Err(PipelineError::Config { .. })));
        cfg.pretrain.milestones = vec![5];
        assert!(matches!(cfg.validate(), Err(PipelineError::Config { .. })));
        cfg.pretrain.milestones = vec![1];
        cfg.validate().unwrap();
        RunConfig::desk(0).validate().unwrap();
    }

    #[test]
    fn checkpoint_round_trips_byte_identically() {
        let cfg = tiny_config(3);
        let backbone = Backbone::new(cfg.backbone.clone(), 3).unwrap();
        let gc = GlobalClassifier::new(6, 3, 3);
        let reg = Regressor::new(6, 3);
        let ckpt = Checkpoint::from_parts(
            Stage::Metatrained,
            &cfg,
            &backbone.params,
            &gc.params,
            Some(&reg.params),
            vec![0, 1, 2],
            vec![MetricPoint { name: "val_accuracy".into(), step: 7, value: 0.8125 }],
        );
        let bytes = ckpt.to_bytes();
        let reloaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(reloaded, ckpt);
        assert_eq!(reloaded.to_bytes(), bytes);

        let (b2, g2, r2) = reloaded.build_model().unwrap();
        for id in backbone.params.ids() {
            assert_eq!(backbone.params.values(id), b2.params.values(id));
        }
        for id in gc.params.ids() {
            assert_eq!(gc.params.values(id), g2.params.values(id));
        }
        let r2 = r2.expect("regressor stored");
        for id in reg.params.ids() {
            assert_eq!(reg.params.values(id), r2.params.values(id));
        }
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let cfg = tiny_config(0);
        let backbone = Backbone::new(cfg.backbone.clone(), 0).unwrap();
        let gc = GlobalClassifier::new(6, 2, 0);
        let ckpt = Checkpoint::from_parts(
            Stage::Pretrained,
            &cfg,
            &backbone.params,
            &gc.params,
            None,
            vec![0, 1],
            vec![],
        );
        let bytes = ckpt.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 5]),
            Err(PipelineError::Checkpoint { .. })
        ));
        assert!(!ckpt.has_regressor());
    }

    #[test]
    fn eval_report_half_width_matches_direct_recomputation() {
        let report = EvalReport::new("toy", vec![1.0, 0.0, 1.0, 0.0]);
        assert_relative_eq!(report.mean, 0.5);
        let sd = (4.0 * 0.25_f64 / 3.0).sqrt();
        assert_relative_eq!(report.half_width, 1.96 * sd / 2.0, epsilon = 1e-12);
        assert_eq!(report.count(), 4);
        assert_eq!(report.csv_line(9), format!("toy,{:.6},{:.6},4,9", report.mean, report.half_width));

        let perfect = EvalReport::new("all", vec![1.0; 8]);
        assert_eq!(perfect.mean, 1.0);
        assert_eq!(perfect.half_width, 0.0);
    }

    #[test]
    fn pretrain_is_deterministic_and_records_history() {
        let data = synth_generate(&tiny_spec(0)).unwrap();
        let cfg = tiny_config(1);
        let a = pretrain(&data, &cfg).unwrap();
        let b = pretrain(&data, &cfg).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.epochs.len(), 2);
        assert!(a.epochs.iter().all(|e| (0.0..=1.0).contains(&e.holdout_accuracy)));
        assert!(a.epochs.iter().all(|e| e.train_loss.is_finite()));
        assert_eq!(a.checkpoint.stage, Stage::Pretrained);
        assert!(!a.checkpoint.has_regressor());
        assert_eq!(a.checkpoint.base_classes, vec![0, 1, 2]);
        assert!(a.checkpoint.history.iter().any(|m| m.name == "holdout_accuracy"));
        assert_relative_eq!(a.epochs[1].lr, 0.005, epsilon = 1e-8);
    }

    #[test]
    fn pretrain_rejects_zero_mode_and_geometry_mismatch() {
        let data = synth_generate(&tiny_spec(0)).unwrap();
        let mut cfg = tiny_config(0);
        cfg.pretraining = Pretraining::None;
        assert!(matches!(pretrain(&data, &cfg), Err(PipelineError::Config { .. })));
        let mut cfg = tiny_config(0);
        cfg.backbone.input_size = 64;
        assert!(matches!(pretrain(&data, &cfg), Err(PipelineError::Config { .. })));
    }

    #[test]
    fn single_class_holdout_scores_one() {
        let spec = SynthSpec {
            class_counts: [1, 0, 0],
            images_per_class: [10, 0, 0],
            regime_weights: [0.5, 0.5, 0.0],
            ..tiny_spec(0)
        };
        let data = synth_generate(&spec).unwrap();
        let mut cfg = tiny_config(0);
        cfg.pretrain.epochs = 1;
        cfg.pretrain.milestones = vec![];
        let outcome = pretrain(&data, &cfg).unwrap();
        assert_eq!(outcome.epochs[0].holdout_accuracy, 1.0);
    }

    #[test]
    fn meta_finetune_keeps_classifier_frozen_and_stores_regressor() {
        let data = synth_generate(&tiny_spec(0)).unwrap();
        let cfg = tiny_config(2);
        let pre = pretrain(&data, &cfg).unwrap();
        let w_before: Vec<f32> = pre
            .checkpoint
            .tensors
            .iter()
            .filter(|t| t.name.starts_with("classifier."))
            .flat_map(|t| t.data.clone())
            .collect();
        let meta = meta_finetune(&data, Some(&pre.checkpoint), &cfg).unwrap();
        assert_eq!(meta.checkpoint.stage, Stage::Metatrained);
        assert!(meta.checkpoint.has_regressor());
        let w_after: Vec<f32> = meta
            .checkpoint
            .tensors
            .iter()
            .filter(|t| t.name.starts_with("classifier."))
            .flat_map(|t| t.data.clone())
            .collect();
        assert_eq!(
            w_before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            w_after.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(meta.validations.len(), 2);
        assert!(meta.batches.iter().all(|b| b.loss.is_finite()));

        let gap_cfg = cfg.with_cell(Pretraining::Dense, Pooling::Gap);
        let meta_gap = meta_finetune(&data, Some(&pre.checkpoint), &gap_cfg).unwrap();
        assert!(!meta_gap.checkpoint.has_regressor());
    }

    #[test]
    fn meta_finetune_requires_matching_stage_and_classes() {
        let data = synth_generate(&tiny_spec(0)).unwrap();
        let cfg = tiny_config(2);
        let pre = pretrain(&data, &cfg).unwrap();
        let meta = meta_finetune(&data, Some(&pre.checkpoint), &cfg).unwrap();
        assert!(matches!(
            meta_finetune(&data, Some(&meta.checkpoint), &cfg),
            Err(PipelineError::StageMismatch { .. })
        ));
    }

    #[test]
    fn gamma_zero_updates_ignore_classifier_values() {
        let data = synth_generate(&tiny_spec(0)).unwrap();
        let mut cfg = tiny_config(4);
        cfg.meta.weights.gamma = 0.0;
        cfg.meta.batches = 1;
        let pre = pretrain(&data, &cfg).unwrap();
        let mut scrambled = pre.checkpoint.clone();
        for t in scrambled.tensors.iter_mut().filter(|t| t.name.starts_with("classifier.")) {
            for (i, v) in t.data.iter_mut().enumerate() {
                *v = (i as f32 * 0.37).sin();
            }
        }
        let a = meta_finetune(&data, Some(&pre.checkpoint), &cfg).unwrap();
        let b = meta_finetune(&data, Some(&scrambled), &cfg).unwrap();
        let backbone_bits = |ck: &Checkpoint| -> Vec<u32> {
            ck.tensors
                .iter()
                .filter(|t| t.name.starts_with("backbone.") || t.name.starts_with("regressor."))
                .flat_map(|t| t.data.iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(backbone_bits(&a.checkpoint), backbone_bits(&b.checkpoint));
    }

    #[test]
    fn evaluation_is_deterministic_across_worker_counts() {
        let data = synth_generate(&tiny_spec(0)).unwrap();
        let cfg = tiny_config(5);
        let pre = pretrain(&data, &cfg).unwrap();
        let meta = meta_finetune(&data, Some(&pre.checkpoint), &cfg).unwrap();
        let serial = evaluate(&data, &meta.checkpoint, Split::MetaTest, &cfg.eval, "v", 1).unwrap();
        let threaded = evaluate(&data, &meta.checkpoint, Split::MetaTest, &cfg.eval, "v", 4).unwrap();
        assert_eq!(serial.accuracies, threaded.accuracies);
        assert_eq!(serial.csv_line(0), threaded.csv_line(0));
        assert_eq!(serial.count(), 6);

        let no_finetune =
            evaluate(&data, &pre.checkpoint, Split::MetaTest, &cfg.eval, "frozen", 1).unwrap();
        assert!(no_finetune.accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn perfectly_separated_features_score_one_and_ties_score_chance() {
        let build_map = |active: usize, depth: usize| {
            let mut values = vec![0.0f32; depth * 4];
            for site in 0..4 {
                values[active * 4 + site] = 1.0;
            }
            FeatureMap::new(depth, 2, 2, values)
        };
        let mut maps = HashMap::new();
        for image in 0..12 {
            let class = image / 4;
            maps.insert(image, build_map(class, 3));
        }
        let episode = Episode {
            task_id: 0,
            way: 3,
            shot: 1,
            queries_per_class: 3,
            classes: vec![0, 1, 2],
            support: (0..3)
                .map(|c| crate::episodes::EpisodeSlot {
                    image: c * 4,
                    episode_label: c,
                    base_label: crate::episodes::NO_BASE_LABEL,
                })
                .collect(),
            query: (0..9)
                .map(|q| crate::episodes::EpisodeSlot {
                    image: (q / 3) * 4 + 1 + q % 3,
                    episode_label: q / 3,
                    base_label: crate::episodes::NO_BASE_LABEL,
                })
                .collect(),
        };
        let acc = episode_accuracy(&maps, &episode, Pooling::Gap, None).unwrap();
        assert_eq!(acc, 1.0);

        let tied: HashMap<usize, FeatureMap<f32>> =
            (0..12).map(|i| (i, build_map(0, 3))).collect();
        let acc = episode_accuracy(&tied, &episode, Pooling::Gap, None).unwrap();
        assert_relative_eq!(acc, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_domain_rejects_overlap_and_matches_evaluate_on_source() {
        let data = synth_generate(&tiny_spec(0)).unwrap();
        let cfg = tiny_config(6);
        let pre = pretrain(&data, &cfg).unwrap();

        let mut colliding = tiny_spec(0);
        colliding.class_counts = [1, 1, 5];
        colliding.images_per_class = [8, 8, 8];
        colliding.regime_weights = [0.5, 0.5, 0.0];
        let target = synth_generate(&colliding).unwrap();
        assert!(matches!(
            cross_domain_eval(&pre.checkpoint, &target, &cfg.eval, "xd", 1),
            Err(PipelineError::ClassOverlap { count: 1 })
        ));

        let in_domain = evaluate(&data, &pre.checkpoint, Split::MetaTest, &cfg.eval, "xd", 1).unwrap();
        let degenerate = cross_domain_eval(&pre.checkpoint, &data, &cfg.eval, "xd", 1).unwrap();
        assert_eq!(degenerate.accuracies, in_domain.accuracies);

        let mut far = tiny_spec(0);
        far.vocab_start = 50;
        let foreign = synth_generate(&far).unwrap();
        let report = cross_domain_eval(&pre.checkpoint, &foreign, &cfg.eval, "xd", 1).unwrap();
        assert_eq!(report.count(), in_domain.count());
    }
}
