//! Embedding networks producing dense feature maps.
//!
//! Two families are provided. `Conv4` stacks four blocks of conv3×3 →
//! batchnorm → relu → maxpool2×2 with a per-block filter count; the named
//! presets are Conv4-32 (32,32,32,32), Conv4-64 (64,64,64,64), Conv4-128
//! (64,64,128,128) and Conv4-256 (64,96,128,256). `Resnet` uses four
//! residual blocks of three conv3×3/batchnorm layers with a projected
//! 1×1-conv shortcut, relu after the residual sum, and a 2×2 max-pool per
//! block; widths start at a base count and double each block.
//!
//! Both families halve the spatial extent four times, so a `s×s` input
//! yields an `s/16 × s/16` feature map (odd intermediate extents floor,
//! which is how an 84×84 input produces a 5×5 map).

use std::error::Error;
use std::fmt;

use crate::elem::Elem;
use crate::numkit::graph::{Graph, NodeId};
use crate::numkit::init::{conv_fan_in, he_uniform};
use crate::numkit::params::{Bound, ParamId, ParamKind, ParamSet};
use crate::numkit::tensor::{Tensor, TensorError};
use crate::rng::{stream, Domain};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Stream index claimed by backbone initialization within
/// [`Domain::ParamInit`]; heads use neighboring indices.
pub const INIT_STREAM: u64 = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Family {
    Conv4 { filters: [usize; 4] },
    Resnet { base_width: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub family: Family,
    pub input_size: usize,
    pub channels_in: usize,
}

impl BackboneConfig {
    /// Desk-scale default: Conv4-32 on 64×64 grayscale input (d=32, r=16).
    pub fn desk() -> Self {
        BackboneConfig {
            family: Family::Conv4 {
                filters: [32, 32, 32, 32],
            },
            input_size: 64,
            channels_in: 1,
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        match self.family {
            Family::Conv4 { filters } => filters,
            Family::Resnet { base_width } => {
                [base_width, base_width * 2, base_width * 4, base_width * 8]
            }
        }
    }

    /// Output depth `d`.
    pub fn feature_depth(&self) -> usize {
        self.widths()[3]
    }

    /// Output spatial extent after four floor-halvings.
    pub fn feature_extent(&self) -> usize {
        self.input_size / 2 / 2 / 2 / 2
    }

    /// Descriptor count `r = h·w`.
    pub fn descriptor_count(&self) -> usize {
        self.feature_extent() * self.feature_extent()
    }

    fn validate(&self) -> Result<(), BackboneError> {
        if self.input_size < 16 {
            return Err(BackboneError::InputSizeTooSmall {
                input_size: self.input_size,
            });
        }
        if self.widths().contains(&0) {
            return Err(BackboneError::ZeroFilter);
        }
        if self.channels_in == 0 {
            return Err(BackboneError::ZeroChannels);
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum BackboneError {
    /// Fewer than 16 pixels per side cannot survive four 2×2 poolings.
    InputSizeTooSmall { input_size: usize },
    ZeroFilter,
    ZeroChannels,
    BatchShape { expected: Vec<usize>, got: Vec<usize> },
    Tensor(TensorError),
}

impl fmt::Display for BackboneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackboneError::InputSizeTooSmall { input_size } => write!(
                f,
                "input size {input_size} is below the 16-pixel minimum for four 2x2 poolings"
            ),
            BackboneError::ZeroFilter => write!(f, "filter counts must be positive"),
            BackboneError::ZeroChannels => write!(f, "channels_in must be positive"),
            BackboneError::BatchShape { expected, got } => write!(
                f,
                "image batch shaped {got:?}, expected [n, {}, {}, {}]",
                expected[0], expected[1], expected[2]
            ),
            BackboneError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl Error for BackboneError {}

impl From<TensorError> for BackboneError {
    fn from(e: TensorError) -> Self {
        BackboneError::Tensor(e)
    }
}

/// How a forward pass treats batch normalization.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EmbedMode {
    /// Batch statistics, running-buffer updates, gradients everywhere.
    Train,
    /// Running statistics held fixed; gradients still flow to weights and
    /// affine parameters. Used during meta-finetuning.
    FrozenStats,
}

/// One image's dense feature map, laid out `[d][h][w]` row-major. This is
/// the value-level view used by evaluation and analysis; training keeps
/// maps on the graph instead.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<E> {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub values: Vec<E>,
}

impl<E: Elem> FeatureMap<E> {
    pub fn new(d: usize, h: usize, w: usize, values: Vec<E>) -> Self {
        assert_eq!(values.len(), d * h * w, "feature map data length");
        FeatureMap { d, h, w, values }
    }

    /// Descriptor count `r = h·w`.
    pub fn r(&self) -> usize {
        self.h * self.w
    }

    /// Value of channel `c` at spatial site `j` (row-major).
    pub fn at(&self, c: usize, j: usize) -> E {
        self.values[c * self.r() + j]
    }

    /// The d-vector at spatial site `j`.
    pub fn descriptor(&self, j: usize) -> Vec<E> {
        (0..self.d).map(|c| self.at(c, j)).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == E::zero())
    }

    /// Splits a `[n,d,h,w]` batch (as produced by `embed`) into per-image
    /// maps.
    pub fn from_batch(shape: &[usize], data: &[E]) -> Vec<FeatureMap<E>> {
        assert_eq!(shape.len(), 4, "expected [n,d,h,w]");
        let (d, h, w) = (shape[1], shape[2], shape[3]);
        data.chunks(d * h * w)
            .map(|chunk| FeatureMap::new(d, h, w, chunk.to_vec()))
            .collect()
    }
}

#[derive(Clone, Copy)]
struct ConvBn {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

enum Arch {
    Conv4 { blocks: Vec<ConvBn> },
    Resnet { blocks: Vec<ResBlock> },
}

struct ResBlock {
    convs: [ConvBn; 3],
    shortcut: ConvBn,
}

pub struct Backbone<E: Elem> {
    pub config: BackboneConfig,
    pub params: ParamSet<E>,
    arch: Arch,
}

impl<E: Elem> Backbone<E> {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self, BackboneError> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = stream(seed, Domain::ParamInit, INIT_STREAM);
        let widths = config.widths();
        let mut declare = |params: &mut ParamSet<E>,
                           prefix: &str,
                           ci: usize,
                           co: usize,
                           kernel: usize|
         -> ConvBn {
            let w_shape = [co, ci, kernel, kernel];
            let w = params
                .add(
                    format!("{prefix}.conv.w"),
                    he_uniform(&w_shape, conv_fan_in(&w_shape), &mut rng),
                    ParamKind::Trainable,
                )
                .expect("names are unique by construction");
            let gamma = params
                .add(
                    format!("{prefix}.bn.gamma"),
                    Tensor::full(&[co], E::one()),
                    ParamKind::Trainable,
                )
                .expect("unique");
            let beta = params
                .add(
                    format!("{prefix}.bn.beta"),
                    Tensor::zeros(&[co]),
                    ParamKind::Trainable,
                )
                .expect("unique");
            let running_mean = params
                .add(
                    format!("{prefix}.bn.running_mean"),
                    Tensor::zeros(&[co]),
                    ParamKind::Buffer,
                )
                .expect("unique");
            let running_var = params
                .add(
                    format!("{prefix}.bn.running_var"),
                    Tensor::full(&[co], E::one()),
                    ParamKind::Buffer,
                )
                .expect("unique");
            ConvBn {
                w,
                gamma,
                beta,
                running_mean,
                running_var,
            }
        };
        let arch = match config.family {
            Family::Conv4 { .. } => {
                let mut blocks = Vec::with_capacity(4);
                let mut ci = config.channels_in;
                for (b, &co) in widths.iter().enumerate() {
                    blocks.push(declare(&mut params, &format!("block{}", b + 1), ci, co, 3));
                    ci = co;
                }
                Arch::Conv4 { blocks }
            }
            Family::Resnet { .. } => {
                let mut blocks = Vec::with_capacity(4);
                let mut ci = config.channels_in;
                for (b, &co) in widths.iter().enumerate() {
                    let p = format!("block{}", b + 1);
                    let convs = [
                        declare(&mut params, &format!("{p}.conv1"), ci, co, 3),
                        declare(&mut params, &format!("{p}.conv2"), co, co, 3),
                        declare(&mut params, &format!("{p}.conv3"), co, co, 3),
                    ];
                    let shortcut = declare(&mut params, &format!("{p}.shortcut"), ci, co, 1);
                    blocks.push(ResBlock { convs, shortcut });
                    ci = co;
                }
                Arch::Resnet { blocks }
            }
        };
        Ok(Backbone {
            config,
            params,
            arch,
        })
    }

    /// Trainable parameter count; the closed form for Conv4 is
    /// `Σ_b 9·ci·co + 2·co` (convolutions carry no bias, normalization
    /// supplies scale and shift).
    pub fn trainable_param_count(&self) -> usize {
        self.params
            .trainable_ids()
            .iter()
            .map(|&id| self.params.tensor(id).numel())
            .sum()
    }

    fn check_batch(&self, shape: &[usize]) -> Result<(), BackboneError> {
        let expected = vec![
            self.config.channels_in,
            self.config.input_size,
            self.config.input_size,
        ];
        if shape.len() != 4 || shape[1..] != expected[..] || shape[0] == 0 {
            return Err(BackboneError::BatchShape {
                expected,
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass for training stages. Binds parameters onto `graph`
    /// with gradients enabled and returns the feature-map node (shaped
    /// `[n, d, s/16, s/16]`) plus the bindings.
    pub fn embed(
        &mut self,
        graph: &mut Graph<E>,
        images: NodeId,
        mode: EmbedMode,
    ) -> Result<(NodeId, Bound), BackboneError> {
        self.check_batch(graph.shape(images))?;
        let mut bound = Bound::new();
        let out = self.forward(graph, images, Some(mode), &mut bound)?;
        debug_assert!(graph.ensure_finite(out, "embed").is_ok());
        Ok((out, bound))
    }

    /// Inference forward pass: running statistics, no gradients, shared
    /// access. Pure in (parameters, images).
    pub fn embed_eval(
        &self,
        graph: &mut Graph<E>,
        images: NodeId,
    ) -> Result<NodeId, BackboneError> {
        self.check_batch(graph.shape(images))?;
        let mut bound = Bound::new();
        let out = self.forward_inner(graph, images, None, &mut bound)?;
        debug_assert!(graph.ensure_finite(out, "embed").is_ok());
        Ok(out)
    }

    fn forward(
        &mut self,
        graph: &mut Graph<E>,
        images: NodeId,
        mode: Option<EmbedMode>,
        bound: &mut Bound,
    ) -> Result<NodeId, BackboneError> {
        // Collect running-stat updates first, then apply: the immutable
        // walk cannot mutate params mid-flight.
        let mut updates: Vec<(ParamId, Vec<E>)> = Vec::new();
        let out = self.forward_collect(graph, images, mode, bound, &mut updates)?;
        for (id, values) in updates {
            self.params
                .set_values(id, &values)
                .expect("running buffers keep their shape");
        }
        Ok(out)
    }

    fn forward_inner(
        &self,
        graph: &mut Graph<E>,
        images: NodeId,
        mode: Option<EmbedMode>,
        bound: &mut Bound,
    ) -> Result<NodeId, BackboneError> {
        let mut updates = Vec::new();
        let out = self.forward_collect(graph, images, mode, bound, &mut updates)?;
        debug_assert!(updates.is_empty());
        Ok(out)
    }

    fn forward_collect(
        &self,
        graph: &mut Graph<E>,
        images: NodeId,
        mode: Option<EmbedMode>,
        bound: &mut Bound,
        updates: &mut Vec<(ParamId, Vec<E>)>,
    ) -> Result<NodeId, BackboneError> {
        let apply_conv_bn = |graph: &mut Graph<E>,
                                 layer: &ConvBn,
                                 x: NodeId,
                                 pad: usize,
                                 bound: &mut Bound,
                                 updates: &mut Vec<(ParamId, Vec<E>)>|
         -> Result<NodeId, BackboneError> {
            let trainable = mode.is_some();
            let w = self.params.bind(graph, layer.w, trainable);
            let gamma = self.params.bind(graph, layer.gamma, trainable);
            let beta = self.params.bind(graph, layer.beta, trainable);
            if trainable {
                bound.push(layer.w, w);
                bound.push(layer.gamma, gamma);
                bound.push(layer.beta, beta);
            }
            let conv = graph.conv2d(x, w, None, 1, pad)?;
            let eps = E::lit(BN_EPS);
            let bn = match mode {
                Some(EmbedMode::Train) => {
                    let (bn, stats) = graph.batch_norm_train(conv, gamma, beta, eps)?;
                    let m = E::lit(BN_MOMENTUM);
                    let keep = E::one() - m;
                    let old_mean = self.params.values(layer.running_mean);
                    let old_var = self.params.values(layer.running_var);
                    updates.push((
                        layer.running_mean,
                        old_mean
                            .iter()
                            .zip(&stats.mean)
                            .map(|(&o, &b)| keep * o + m * b)
                            .collect(),
                    ));
                    updates.push((
                        layer.running_var,
                        old_var
                            .iter()
                            .zip(&stats.var)
                            .map(|(&o, &b)| keep * o + m * b)
                            .collect(),
                    ));
                    bn
                }
                Some(EmbedMode::FrozenStats) | None => graph.batch_norm_eval(
                    conv,
                    gamma,
                    beta,
                    self.params.values(layer.running_mean),
                    self.params.values(layer.running_var),
                    eps,
                )?,
            };
            Ok(bn)
        };

        let mut x = images;
        match &self.arch {
            Arch::Conv4 { blocks } => {
                for layer in blocks {
                    let bn = apply_conv_bn(graph, layer, x, 1, bound, updates)?;
                    let act = graph.relu(bn);
                    x = graph.max_pool2(act)?;
                }
            }
            Arch::Resnet { blocks } => {
                for block in blocks {
                    let mut h = x;
                    for (i, layer) in block.convs.iter().enumerate() {
                        h = apply_conv_bn(graph, layer, h, 1, bound, updates)?;
                        if i < 2 {
                            h = graph.relu(h);
                        }
                    }
                    let s = apply_conv_bn(graph, &block.shortcut, x, 0, bound, updates)?;
                    let sum = graph.add(h, s)?;
                    let act = graph.relu(sum);
                    x = graph.max_pool2(act)?;
                }
            }
        }
        Ok(x)
    }
}

/// Closed-form trainable count for a Conv4 stack, for cross-checking the
/// constructed parameter set.
pub fn conv4_param_count(channels_in: usize, filters: [usize; 4]) -> usize {
    let mut total = 0;
    let mut ci = channels_in;
    for co in filters {
        total += 9 * ci * co + 2 * co;
        ci = co;
    }
    total
}
