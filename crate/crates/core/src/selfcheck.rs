//! Built-in verification batteries.
//!
//! The gradient battery runs central-difference checks over every graph
//! primitive and over the full set of training objectives on toy episodes
//! (2-way, depth 4, 4 spatial sites), in `f64`, across several seeds. The
//! protocol battery replays the episode sampler's contract: per-episode
//! invariants, the 5-way 1-shot size identity, and manifest stability across
//! reruns and worker counts. Both produce a line-per-item report consumed by
//! the CLI's selftest verb and the acceptance suite.

use std::error::Error;
use std::fmt;

use rand::Rng;

use crate::backbone::{Backbone, BackboneConfig, BackboneError, EmbedMode, Family};
use crate::episodes::{
    consistent_eval_set, episode_manifest, sample_episode, synth_generate, EpisodeError, Split,
    SynthSpec,
};
use crate::heads::{centroids_graph, nc_logits_graph, GlobalClassifier, HeadError, Regressor};
use crate::numkit::gradcheck::{grad_check, GradCheckConfig};
use crate::numkit::graph::{Graph, NodeId};
use crate::numkit::params::{ParamError, ParamId, ParamKind, ParamSet};
use crate::numkit::tensor::{Tensor, TensorError};
use crate::objectives::{
    entropy_reg, meta_global_ce, meta_loss, pretrain_loss_dc, pretrain_loss_gap,
    total_meta_objective, EpisodeTerms, LossWeights, ObjectiveError,
};
use crate::rng::{stream, Domain};

/// Largest acceptable relative error between analytic and central-difference
/// gradients.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Default seed set for the gradient battery.
pub const GRADIENT_SEEDS: [u64; 5] = [11, 23, 37, 41, 53];

#[derive(Debug)]
pub enum SelfcheckError {
    Tensor(TensorError),
    Param(ParamError),
    Backbone(BackboneError),
    Head(HeadError),
    Objective(ObjectiveError),
    Episode(EpisodeError),
}

impl fmt::Display for SelfcheckError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelfcheckError::Tensor(e) => write!(f, "tensor: {e}"),
            SelfcheckError::Param(e) => write!(f, "parameters: {e}"),
            SelfcheckError::Backbone(e) => write!(f, "backbone: {e}"),
            SelfcheckError::Head(e) => write!(f, "heads: {e}"),
            SelfcheckError::Objective(e) => write!(f, "objectives: {e}"),
            SelfcheckError::Episode(e) => write!(f, "episodes: {e}"),
        }
    }
}

impl Error for SelfcheckError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            SelfcheckError::Tensor(e) => Some(e),
            SelfcheckError::Param(e) => Some(e),
            SelfcheckError::Backbone(e) => Some(e),
            SelfcheckError::Head(e) => Some(e),
            SelfcheckError::Objective(e) => Some(e),
            SelfcheckError::Episode(e) => Some(e),
        }
    }
}

macro_rules! wrap_error {
    ($variant:ident, $ty:ty) => {
        impl From<$ty> for SelfcheckError {
            fn from(e: $ty) -> Self {
                SelfcheckError::$variant(e)
            }
        }
    };
}

wrap_error!(Tensor, TensorError);
wrap_error!(Param, ParamError);
wrap_error!(Backbone, BackboneError);
wrap_error!(Head, HeadError);
wrap_error!(Objective, ObjectiveError);
wrap_error!(Episode, EpisodeError);

/// One named verification outcome.
#[derive(Clone, Debug)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub items: Vec<CheckItem>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        !self.items.is_empty() && self.items.iter().all(|i| i.passed)
    }

    /// One `PASS`/`FAIL` line per item.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&format!(
                "{} {:<36} {}\n",
                if item.passed { "PASS" } else { "FAIL" },
                item.name,
                item.detail
            ));
        }
        out
    }
}

type BuildFn = Box<
    dyn Fn(&ParamSet<f64>, &mut Graph<f64>) -> Result<(NodeId, Vec<(ParamId, NodeId)>), TensorError>,
>;

struct GradCase {
    name: &'static str,
    params: ParamSet<f64>,
    build: BuildFn,
}

fn uniform_data(numel: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..numel).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Reduces `out` to a scalar as `Σ out ⊙ probe` with a fixed pseudorandom
/// probe, so every output coordinate contributes a distinct weight.
fn probed_sum(
    graph: &mut Graph<f64>,
    out: NodeId,
    probe: &[f64],
) -> Result<NodeId, TensorError> {
    let shape = graph.shape(out).to_vec();
    let p = graph.constant(&shape, probe.to_vec())?;
    let prod = graph.mul(out, p)?;
    Ok(graph.sum_all(prod))
}

/// Builds a gradient case from parameter declarations and a graph function
/// over the bound parameter nodes (in declaration order).
fn make_case<F>(
    ordinal: u64,
    seed: u64,
    name: &'static str,
    decls: &[(&'static str, &'static [usize], f64, f64)],
    op: F,
) -> Result<GradCase, SelfcheckError>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, TensorError> + 'static,
{
    let mut rng = stream(seed, Domain::GradCheck, 1000 + ordinal);
    let mut params = ParamSet::new();
    for &(pname, shape, lo, hi) in decls {
        let numel = shape.iter().product();
        let tensor = Tensor::new(shape, uniform_data(numel, lo, hi, &mut rng))?;
        params.add(pname, tensor, ParamKind::Trainable)?;
    }
    let mut scratch = Graph::new();
    let nodes: Vec<NodeId> = params.ids().map(|id| params.bind(&mut scratch, id, false)).collect();
    let out = op(&mut scratch, &nodes)?;
    let out_numel: usize = scratch.shape(out).iter().product();
    let mut prng = stream(seed, Domain::GradCheck, 2000 + ordinal);
    let probe = uniform_data(out_numel, 0.5, 1.5, &mut prng);
    let build = move |params: &ParamSet<f64>, graph: &mut Graph<f64>| {
        let mut pairs = Vec::new();
        let mut nodes = Vec::new();
        for id in params.ids() {
            let node = params.bind(graph, id, true);
            pairs.push((id, node));
            nodes.push(node);
        }
        let out = op(graph, &nodes)?;
        Ok((probed_sum(graph, out, &probe)?, pairs))
    };
    Ok(GradCase { name, params, build: Box::new(build) })
}

/// Copies every parameter of `target` from the equally-named entry of
/// `unified`.
fn sync_into(unified: &ParamSet<f64>, target: &mut ParamSet<f64>) -> Result<(), ParamError> {
    let ids: Vec<ParamId> = target.ids().collect();
    for id in ids {
        let source = unified.id(target.name(id))?;
        let values = unified.values(source).to_vec();
        target.set_values(id, &values)?;
    }
    Ok(())
}

/// Registers every parameter of `source` into `unified` under its own name,
/// preserving kind.
fn absorb(unified: &mut ParamSet<f64>, source: &ParamSet<f64>) -> Result<(), ParamError> {
    for id in source.ids() {
        unified.add(source.name(id), source.tensor(id).clone(), source.kind(id))?;
    }
    Ok(())
}

/// Translates a bound list from a component's own parameter set to the
/// unified set, matching by name.
fn remap(
    pairs: &[(ParamId, NodeId)],
    component: &ParamSet<f64>,
    unified: &ParamSet<f64>,
) -> Result<Vec<(ParamId, NodeId)>, ParamError> {
    pairs
        .iter()
        .map(|&(pid, node)| Ok((unified.id(component.name(pid))?, node)))
        .collect()
}

const TOY_DEPTH: usize = 4;
const TOY_CLASSES: usize = 3;
const TOY_MAP: &[usize] = &[4, 4, 2, 2];
const SUPPORT_LABELS: [usize; 4] = [0, 0, 1, 1];
const QUERY_LABELS: [usize; 4] = [0, 1, 0, 1];
const BASE_LABELS: [usize; 4] = [0, 2, 1, 0];

fn map_params(seed: u64, ordinal: u64, names: &[&'static str]) -> Result<ParamSet<f64>, SelfcheckError> {
    let mut rng = stream(seed, Domain::GradCheck, 3000 + ordinal);
    let mut params = ParamSet::new();
    for &name in names {
        let numel: usize = TOY_MAP.iter().product();
        let tensor = Tensor::new(TOY_MAP, uniform_data(numel, 0.2, 1.2, &mut rng))?;
        params.add(name, tensor, ParamKind::Trainable)?;
    }
    Ok(params)
}

/// Stage-one dense objective: per-site smoothed cross-entropy through the
/// global classifier, gradients to both the feature maps and the classifier.
fn dense_classification_case(seed: u64) -> Result<GradCase, SelfcheckError> {
    let mut params = map_params(seed, 0, &["maps"])?;
    let gc = GlobalClassifier::<f64>::new(TOY_DEPTH, TOY_CLASSES, seed);
    absorb(&mut params, &gc.params)?;
    let build = move |params: &ParamSet<f64>, graph: &mut Graph<f64>| {
        let maps_id = params.id("maps").map_err(param_to_tensor)?;
        let maps = params.bind(graph, maps_id, true);
        let mut gc = GlobalClassifier::<f64>::new(TOY_DEPTH, TOY_CLASSES, 0);
        sync_into(params, &mut gc.params).map_err(param_to_tensor)?;
        let (loss, bound) =
            pretrain_loss_dc(graph, maps, &BASE_LABELS, &gc).map_err(objective_to_tensor)?;
        let mut pairs = remap(bound.pairs(), &gc.params, params).map_err(param_to_tensor)?;
        pairs.push((maps_id, maps));
        Ok((loss, pairs))
    };
    Ok(GradCase { name: "dense_classification_objective", params, build: Box::new(build) })
}

/// Stage-one pooled objective: smoothed cross-entropy on globally averaged
/// embeddings.
fn pooled_classification_case(seed: u64) -> Result<GradCase, SelfcheckError> {
    let mut params = map_params(seed, 1, &["maps"])?;
    let gc = GlobalClassifier::<f64>::new(TOY_DEPTH, TOY_CLASSES, seed);
    absorb(&mut params, &gc.params)?;
    let build = move |params: &ParamSet<f64>, graph: &mut Graph<f64>| {
        let maps_id = params.id("maps").map_err(param_to_tensor)?;
        let maps = params.bind(graph, maps_id, true);
        let mut gc = GlobalClassifier::<f64>::new(TOY_DEPTH, TOY_CLASSES, 0);
        sync_into(params, &mut gc.params).map_err(param_to_tensor)?;
        let (loss, bound) =
            pretrain_loss_gap(graph, maps, &BASE_LABELS, &gc).map_err(objective_to_tensor)?;
        let mut pairs = remap(bound.pairs(), &gc.params, params).map_err(param_to_tensor)?;
        pairs.push((maps_id, maps));
        Ok((loss, pairs))
    };
    Ok(GradCase { name: "pooled_classification_objective", params, build: Box::new(build) })
}

/// Episodic loss over GAP embeddings: class centroids, cosine-to-centroid
/// logits, cross-entropy on the queries.
fn centroid_episode_case(seed: u64) -> Result<GradCase, SelfcheckError> {
    let params = map_params(seed, 2, &["support_maps", "query_maps"])?;
    let build = move |params: &ParamSet<f64>, graph: &mut Graph<f64>| {
        let sid = params.id("support_maps").map_err(param_to_tensor)?;
        let qid = params.id("query_maps").map_err(param_to_tensor)?;
        let s = params.bind(graph, sid, true);
        let q = params.bind(graph, qid, true);
        let s_emb = graph.gap(s)?;
        let q_emb = graph.gap(q)?;
        let cents = centroids_graph(graph, s_emb, &SUPPORT_LABELS).map_err(head_to_tensor)?;
        let logits = nc_logits_graph(graph, q_emb, cents).map_err(head_to_tensor)?;
        let loss = meta_loss(graph, logits, &QUERY_LABELS).map_err(objective_to_tensor)?;
        Ok((loss, vec![(sid, s), (qid, q)]))
    };
    Ok(GradCase { name: "centroid_episode_objective", params, build: Box::new(build) })
}

fn toy_attention(
    graph: &mut Graph<f64>,
    params: &ParamSet<f64>,
    reg: &Regressor<f64>,
    map: NodeId,
) -> Result<(NodeId, NodeId, Vec<(ParamId, NodeId)>), TensorError> {
    let (raw, weights, bound) = reg.attention_graph(graph, map, true).map_err(head_to_tensor)?;
    let pairs = remap(bound.pairs(), &reg.params, params).map_err(param_to_tensor)?;
    Ok((raw, weights, pairs))
}

/// Episodic loss over attentively pooled embeddings; gradients reach the
/// maps and the attention regressor.
fn attentive_episode_case(seed: u64) -> Result<GradCase, SelfcheckError> {
    let mut params = map_params(seed, 3, &["support_maps", "query_maps"])?;
    let reg = Regressor::<f64>::new(TOY_DEPTH, seed);
    absorb(&mut params, &reg.params)?;
    let build = move |params: &ParamSet<f64>, graph: &mut Graph<f64>| {
        let sid = params.id("support_maps").map_err(param_to_tensor)?;
        let qid = params.id("query_maps").map_err(param_to_tensor)?;
        let s = params.bind(graph, sid, true);
        let q = params.bind(graph, qid, true);
        let mut reg = Regressor::<f64>::new(TOY_DEPTH, 0);
        sync_into(params, &mut reg.params).map_err(param_to_tensor)?;
        let (_, s_weights, s_pairs) = toy_attention(graph, params, &reg, s)?;
        let (_, q_weights, q_pairs) = toy_attention(graph, params, &reg, q)?;
        let s_emb = graph.weighted_pool(s, s_weights)?;
        let q_emb = graph.weighted_pool(q, q_weights)?;
        let cents = centroids_graph(graph, s_emb, &SUPPORT_LABELS).map_err(head_to_tensor)?;
        let logits = nc_logits_graph(graph, q_emb, cents).map_err(head_to_tensor)?;
        let loss = meta_loss(graph, logits, &QUERY_LABELS).map_err(objective_to_tensor)?;
        let mut pairs = vec![(sid, s), (qid, q)];
        pairs.extend(s_pairs);
        pairs.extend(q_pairs);
        Ok((loss, pairs))
    };
    Ok(GradCase { name: "attentive_episode_objective", params, build: Box::new(build) })
}

/// Negative-entropy regularizer of the attention weights.
fn attention_entropy_case(seed: u64) -> Result<GradCase, SelfcheckError> {
    let mut params = map_params(seed, 4, &["query_maps"])?;
    let reg = Regressor::<f64>::new(TOY_DEPTH, seed);
    absorb(&mut params, &reg.params)?;
    let build = move |params: &ParamSet<f64>, graph: &mut Graph<f64>| {
        let qid = params.id("query_maps").map_err(param_to_tensor)?;
        let q = params.bind(graph, qid, true);
        let mut reg = Regressor::<f64>::new(TOY_DEPTH, 0);
        sync_into(params, &mut reg.params).map_err(param_to_tensor)?;
        let (_, q_weights, q_pairs) = toy_attention(graph, params, &reg, q)?;
        let loss = entropy_reg(graph, q_weights).map_err(objective_to_tensor)?;
        let mut pairs = vec![(qid, q)];
        pairs.extend(q_pairs);
        Ok((loss, pairs))
    };
    Ok(GradCase { name: "attention_entropy_objective", params, build: Box::new(build) })
}

/// Frozen-classifier consistency term with attention-derived confidence;
/// gradients flow to maps and regressor only.
fn confidence_consistency_case(seed: u64) -> Result<GradCase, SelfcheckError> {
    let mut params = map_params(seed, 5, &["query_maps"])?;
    let reg = Regressor::<f64>::new(TOY_DEPTH, seed);
    let gc = GlobalClassifier::<f64>::new(TOY_DEPTH, TOY_CLASSES, seed);
    absorb(&mut params, &reg.params)?;
    absorb(&mut params, &gc.params)?;
    let build = move |params: &ParamSet<f64>, graph: &mut Graph<f64>| {
        let qid = params.id("query_maps").map_err(param_to_tensor)?;
        let q = params.bind(graph, qid, true);
        let mut reg = Regressor::<f64>::new(TOY_DEPTH, 0);
        sync_into(params, &mut reg.params).map_err(param_to_tensor)?;
        let mut gc = GlobalClassifier::<f64>::new(TOY_DEPTH, TOY_CLASSES, 0);
        sync_into(params, &mut gc.params).map_err(param_to_tensor)?;
        gc.freeze();
        let (raw, _, q_pairs) = toy_attention(graph, params, &reg, q)?;
        let loss = meta_global_ce(graph, q, raw, &gc, &BASE_LABELS, false)
            .map_err(objective_to_tensor)?;
        let mut pairs = vec![(qid, q)];
        pairs.extend(q_pairs);
        Ok((loss, pairs))
    };
    Ok(GradCase { name: "confidence_consistency_objective", params, build: Box::new(build) })
}

/// The full stage-two objective on one episode: episodic term plus weighted
/// entropy and consistency terms.
fn combined_meta_case(seed: u64) -> Result<GradCase, SelfcheckError> {
    let mut params = map_params(seed, 6, &["support_maps", "query_maps"])?;
    let reg = Regressor::<f64>::new(TOY_DEPTH, seed);
    let gc = GlobalClassifier::<f64>::new(TOY_DEPTH, TOY_CLASSES, seed);
    absorb(&mut params, &reg.params)?;
    absorb(&mut params, &gc.params)?;
    let build = move |params: &ParamSet<f64>, graph: &mut Graph<f64>| {
        let sid = params.id("support_maps").map_err(param_to_tensor)?;
        let qid = params.id("query_maps").map_err(param_to_tensor)?;
        let s = params.bind(graph, sid, true);
        let q = params.bind(graph, qid, true);
        let mut reg = Regressor::<f64>::new(TOY_DEPTH, 0);
        sync_into(params, &mut reg.params).map_err(param_to_tensor)?;
        let mut gc = GlobalClassifier::<f64>::new(TOY_DEPTH, TOY_CLASSES, 0);
        sync_into(params, &mut gc.params).map_err(param_to_tensor)?;
        gc.freeze();
        let (_, s_weights, s_pairs) = toy_attention(graph, params, &reg, s)?;
        let (raw_q, q_weights, q_pairs) = toy_attention(graph, params, &reg, q)?;
        let s_emb = graph.weighted_pool(s, s_weights)?;
        let q_emb = graph.weighted_pool(q, q_weights)?;
        let cents = centroids_graph(graph, s_emb, &SUPPORT_LABELS).map_err(head_to_tensor)?;
        let logits = nc_logits_graph(graph, q_emb, cents).map_err(head_to_tensor)?;
        let meta = meta_loss(graph, logits, &QUERY_LABELS).map_err(objective_to_tensor)?;
        let entropy = entropy_reg(graph, q_weights).map_err(objective_to_tensor)?;
        let global = meta_global_ce(graph, q, raw_q, &gc, &BASE_LABELS, false)
            .map_err(objective_to_tensor)?;
        let terms = EpisodeTerms { meta, entropy, global_ce: global };
        let loss = total_meta_objective(graph, &[terms], &LossWeights::default())
            .map_err(objective_to_tensor)?;
        let mut pairs = vec![(sid, s), (qid, q)];
        pairs.extend(s_pairs);
        pairs.extend(q_pairs);
        Ok((loss, pairs))
    };
    Ok(GradCase { name: "combined_meta_objective", params, build: Box::new(build) })
}

/// A whole tiny backbone forward (conv, normalization, relu, pooling) under
/// frozen statistics, probing every trainable backbone parameter.
fn backbone_embedding_case(seed: u64) -> Result<GradCase, SelfcheckError> {
    let config = BackboneConfig {
        family: Family::Conv4 { filters: [2, 2, 2, 2] },
        input_size: 16,
        channels_in: 1,
    };
    let backbone = Backbone::<f64>::new(config.clone(), seed)?;
    let mut params = ParamSet::new();
    absorb(&mut params, &backbone.params)?;
    let mut rng = stream(seed, Domain::GradCheck, 3100);
    let images = uniform_data(2 * 16 * 16, 0.0, 1.0, &mut rng);
    let mut prng = stream(seed, Domain::GradCheck, 3101);
    let probe = uniform_data(2 * 2, 0.5, 1.5, &mut prng);
    let build = move |params: &ParamSet<f64>, graph: &mut Graph<f64>| {
        let mut backbone =
            Backbone::<f64>::new(config.clone(), 0).map_err(backbone_to_tensor)?;
        sync_into(params, &mut backbone.params).map_err(param_to_tensor)?;
        let input = graph.input(&[2, 1, 16, 16], images.clone(), false)?;
        let (map, bound) = backbone
            .embed(graph, input, EmbedMode::FrozenStats)
            .map_err(backbone_to_tensor)?;
        let all = remap(bound.pairs(), &backbone.params, params).map_err(param_to_tensor)?;
        let pairs = all
            .into_iter()
            .filter(|&(pid, _)| params.kind(pid) == ParamKind::Trainable)
            .collect();
        Ok((probed_sum(graph, map, &probe)?, pairs))
    };
    Ok(GradCase { name: "backbone_embedding", params, build: Box::new(build) })
}

fn param_to_tensor(e: ParamError) -> TensorError {
    TensorError::Domain { op: "selfcheck", detail: e.to_string() }
}

fn head_to_tensor(e: HeadError) -> TensorError {
    TensorError::Domain { op: "selfcheck", detail: e.to_string() }
}

fn objective_to_tensor(e: ObjectiveError) -> TensorError {
    TensorError::Domain { op: "selfcheck", detail: e.to_string() }
}

fn backbone_to_tensor(e: BackboneError) -> TensorError {
    TensorError::Domain { op: "selfcheck", detail: e.to_string() }
}

fn primitive_cases(seed: u64) -> Result<Vec<GradCase>, SelfcheckError> {
    let mut cases = Vec::new();
    let mut ord = 0u64;

    macro_rules! case {
        ($name:literal, $decls:expr, $op:expr) => {{
            ord += 1;
            cases.push(make_case(ord, seed, $name, $decls, $op)?);
        }};
    }

    case!("relu", &[("x", &[2, 3, 2, 2], -1.0, 1.0)], |g, n| Ok(g.relu(n[0])));
    case!("sigmoid", &[("x", &[3, 4], -2.0, 2.0)], |g, n| Ok(g.sigmoid(n[0])));
    case!("xlogx", &[("x", &[2, 5], 0.1, 1.0)], |g, n| g.xlogx(n[0]));
    case!("affine_chain", &[("x", &[2, 3], -1.0, 1.0)], |g, n| {
        let scaled = g.scale(n[0], 1.7);
        let shifted = g.offset(scaled, 0.3);
        Ok(g.neg(shifted))
    });
    case!("add", &[("a", &[2, 3], -1.0, 1.0), ("b", &[2, 3], -1.0, 1.0)], |g, n| {
        g.add(n[0], n[1])
    });
    case!("sub", &[("a", &[2, 3], -1.0, 1.0), ("b", &[2, 3], -1.0, 1.0)], |g, n| {
        g.sub(n[0], n[1])
    });
    case!("mul", &[("a", &[2, 3], -1.0, 1.0), ("b", &[2, 3], -1.0, 1.0)], |g, n| {
        g.mul(n[0], n[1])
    });
    case!("matmul", &[("a", &[2, 3], -1.0, 1.0), ("b", &[3, 4], -1.0, 1.0)], |g, n| {
        g.matmul(n[0], n[1])
    });
    case!("transpose", &[("x", &[2, 3], -1.0, 1.0)], |g, n| g.transpose(n[0]));
    case!(
        "linear",
        &[("x", &[3, 4], -1.0, 1.0), ("w", &[2, 4], -1.0, 1.0), ("b", &[2], -0.5, 0.5)],
        |g, n| g.linear(n[0], n[1], Some(n[2]))
    );
    case!(
        "conv3x3",
        &[
            ("x", &[2, 2, 4, 4], -1.0, 1.0),
            ("w", &[3, 2, 3, 3], -0.5, 0.5),
            ("b", &[3], -0.5, 0.5),
        ],
        |g, n| g.conv2d(n[0], n[1], Some(n[2]), 1, 1)
    );
    case!(
        "conv1x1",
        &[("x", &[2, 2, 3, 3], -1.0, 1.0), ("w", &[3, 2, 1, 1], -0.5, 0.5)],
        |g, n| g.conv2d(n[0], n[1], None, 1, 0)
    );
    case!(
        "conv_stride2",
        &[
            ("x", &[1, 2, 5, 5], -1.0, 1.0),
            ("w", &[2, 2, 3, 3], -0.5, 0.5),
            ("b", &[2], -0.5, 0.5),
        ],
        |g, n| g.conv2d(n[0], n[1], Some(n[2]), 2, 1)
    );
    case!(
        "batch_norm_train",
        &[
            ("x", &[2, 3, 2, 2], -1.0, 1.0),
            ("gamma", &[3], 0.5, 1.5),
            ("beta", &[3], -0.5, 0.5),
        ],
        |g, n| Ok(g.batch_norm_train(n[0], n[1], n[2], 1e-5)?.0)
    );
    case!(
        "batch_norm_eval",
        &[
            ("x", &[2, 3, 2, 2], -1.0, 1.0),
            ("gamma", &[3], 0.5, 1.5),
            ("beta", &[3], -0.5, 0.5),
        ],
        |g, n| {
            let mean = [0.1, -0.2, 0.3];
            let var = [1.0, 0.5, 1.5];
            g.batch_norm_eval(n[0], n[1], n[2], &mean, &var, 1e-5)
        }
    );
    case!("max_pool2", &[("x", &[2, 3, 4, 4], -1.0, 1.0)], |g, n| g.max_pool2(n[0]));
    case!("global_average_pool", &[("x", &[2, 3, 2, 2], -1.0, 1.0)], |g, n| g.gap(n[0]));
    case!("broadcast_hw", &[("x", &[2, 3], -1.0, 1.0)], |g, n| g.broadcast_hw(n[0], 2, 2));
    case!(
        "concat_channels",
        &[("a", &[2, 2, 2, 2], -1.0, 1.0), ("b", &[2, 3, 2, 2], -1.0, 1.0)],
        |g, n| g.concat_ch(n[0], n[1])
    );
    case!("slice_rows", &[("x", &[5, 3], -1.0, 1.0)], |g, n| g.slice_rows(n[0], 1, 3));
    case!("reshape", &[("x", &[2, 6], -1.0, 1.0)], |g, n| g.reshape(n[0], &[3, 4]));
    case!("descriptor_flatten", &[("x", &[2, 3, 2, 2], -1.0, 1.0)], |g, n| g.descriptors(n[0]));
    case!("unit_rows", &[("x", &[3, 4], 0.5, 1.5)], |g, n| g.unit_rows(n[0]));
    case!("row_normalize", &[("x", &[3, 4], 0.5, 1.5)], |g, n| g.row_normalize(n[0]));
    case!(
        "weighted_pool",
        &[("x", &[2, 3, 2, 2], -1.0, 1.0), ("wts", &[2, 4], 0.1, 1.0)],
        |g, n| g.weighted_pool(n[0], n[1])
    );
    case!("log_softmax", &[("x", &[3, 4], -2.0, 2.0)], |g, n| g.log_softmax(n[0], 1));
    case!("softmax", &[("x", &[3, 4], -2.0, 2.0)], |g, n| g.softmax(n[0], 1));
    case!("mean_all", &[("x", &[2, 3], -1.0, 1.0)], |g, n| {
        let doubled = g.mul(n[0], n[0])?;
        Ok(g.mean_all(doubled))
    });

    Ok(cases)
}

fn objective_cases(seed: u64) -> Result<Vec<GradCase>, SelfcheckError> {
    Ok(vec![
        dense_classification_case(seed)?,
        pooled_classification_case(seed)?,
        centroid_episode_case(seed)?,
        attentive_episode_case(seed)?,
        attention_entropy_case(seed)?,
        confidence_consistency_case(seed)?,
        combined_meta_case(seed)?,
        backbone_embedding_case(seed)?,
    ])
}

struct GradTally {
    name: &'static str,
    max_error: f64,
    checked: usize,
    skipped: usize,
}

/// Runs every gradient case under each seed and reports the worst relative
/// error per case.
pub fn gradient_battery(seeds: &[u64]) -> Result<CheckReport, SelfcheckError> {
    assert!(!seeds.is_empty(), "gradient battery needs at least one seed");
    let mut tallies: Vec<GradTally> = Vec::new();
    for &seed in seeds {
        let mut cases = primitive_cases(seed)?;
        cases.extend(objective_cases(seed)?);
        for (index, case) in cases.iter_mut().enumerate() {
            let cfg = GradCheckConfig { eps: 1e-3, max_coords: 48, seed };
            let report = grad_check(&mut case.params, &*case.build, &cfg)?;
            if tallies.len() <= index {
                tallies.push(GradTally {
                    name: case.name,
                    max_error: 0.0,
                    checked: 0,
                    skipped: 0,
                });
            }
            let tally = &mut tallies[index];
            debug_assert_eq!(tally.name, case.name);
            tally.max_error = tally.max_error.max(report.max_error);
            tally.checked += report.checked;
            tally.skipped += report.skipped_kinks;
        }
    }
    let items = tallies
        .into_iter()
        .map(|t| CheckItem {
            name: t.name.to_string(),
            passed: t.max_error < GRADIENT_TOLERANCE && t.checked > 0,
            detail: format!(
                "max rel err {:.3e} over {} coords, {} seeds ({} kink-skipped)",
                t.max_error,
                t.checked,
                seeds.len(),
                t.skipped
            ),
        })
        .collect();
    Ok(CheckReport { items })
}

fn protocol_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        class_counts: [6, 5, 5],
        images_per_class: [20, 18, 18],
        extent: 32,
        channels: 1,
        regime_weights: [0.34, 0.33, 0.33],
        noise: 0.08,
        vocab_start: 0,
        seed,
    }
}

/// Replays the episode sampler's contract on a small synthetic corpus.
pub fn protocol_battery(seed: u64, episode_count: usize) -> Result<CheckReport, SelfcheckError> {
    let spec = protocol_spec(seed);
    let data = synth_generate(&spec)?;
    let mut items = Vec::new();
    let mut push = |name: &str, outcome: Result<String, String>| match outcome {
        Ok(detail) => items.push(CheckItem { name: name.into(), passed: true, detail }),
        Err(detail) => items.push(CheckItem { name: name.into(), passed: false, detail }),
    };

    push("dataset_audit", match data.audit() {
        Ok(()) => Ok(format!("{} images, {} classes", data.len(), 16)),
        Err(e) => Err(e.to_string()),
    });

    let mut invariants = Ok(format!("{episode_count} episodes validated"));
    'outer: for index in 0..episode_count as u64 {
        let mut rng = stream(seed, Domain::TrainEpisode, index);
        let episode = sample_episode(&data, Split::MetaTrain, 3, 2, 3, &mut rng, index)?;
        if let Err(e) = episode.validate(&data, Split::MetaTrain) {
            invariants = Err(format!("episode {index}: {e}"));
            break;
        }
        let mut seen = std::collections::HashSet::new();
        for slot in episode.support.iter().chain(&episode.query) {
            if !seen.insert(slot.image) {
                invariants = Err(format!("episode {index}: image {} drawn twice", slot.image));
                break 'outer;
            }
            if data.image(slot.image).class != episode.classes[slot.episode_label] {
                invariants = Err(format!("episode {index}: label/class mismatch"));
                break 'outer;
            }
        }
    }
    push("episode_invariants", invariants);

    let eval_count = episode_count.min(200);
    let five_way = consistent_eval_set(&data, Split::MetaTest, 5, 1, 15, seed, eval_count)?;
    let mut sizes = Ok(format!("{} episodes × 80 images", five_way.len()));
    for (index, episode) in five_way.iter().enumerate() {
        let total = episode.support.len() + episode.query.len();
        if total != 80 {
            sizes = Err(format!("episode {index} has {total} images, expected 80"));
            break;
        }
    }
    push("five_way_one_shot_size", sizes);

    let manifest = episode_manifest(&five_way);
    let again = episode_manifest(&consistent_eval_set(
        &data,
        Split::MetaTest,
        5,
        1,
        15,
        seed,
        eval_count,
    )?);
    push(
        "manifest_repeatability",
        if manifest == again {
            Ok(format!("{} bytes, identical across reruns", manifest.len()))
        } else {
            Err("regenerated manifest differs".into())
        },
    );

    let worker_manifests: Vec<Result<String, EpisodeError>> = std::thread::scope(|scope| {
        (0..4)
            .map(|_| {
                scope.spawn(|| {
                    let episodes =
                        consistent_eval_set(&data, Split::MetaTest, 5, 1, 15, seed, eval_count)?;
                    Ok(episode_manifest(&episodes))
                })
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|h| h.join().expect("manifest worker panicked"))
            .collect()
    });
    let mut workers = Ok("4 workers reproduced the single-worker manifest".to_string());
    for outcome in worker_manifests {
        match outcome {
            Ok(m) if m == manifest => {}
            Ok(_) => {
                workers = Err("worker manifest differs from single-worker manifest".into());
                break;
            }
            Err(e) => {
                workers = Err(e.to_string());
                break;
            }
        }
    }
    push("manifest_worker_independence", workers);

    let regenerated = synth_generate(&spec)?;
    let identical = data.len() == regenerated.len()
        && (0..data.len()).all(|i| data.image(i).pixels == regenerated.image(i).pixels);
    push(
        "synthesis_repeatability",
        if identical {
            Ok("regenerated corpus is byte-identical".into())
        } else {
            Err("regenerated corpus differs".into())
        },
    );

    Ok(CheckReport { items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    #[test]
    fn gradient_battery_passes_on_one_seed() {
        let report = gradient_battery(&[GRADIENT_SEEDS[0]]).unwrap();
        assert!(report.passed(), "failures:\n{}", report.render());
        assert!(report.items.len() >= 30);
        assert!(report.items.iter().any(|i| i.name == "combined_meta_objective"));
        assert!(report.items.iter().any(|i| i.name == "backbone_embedding"));
    }

    #[test]
    fn protocol_battery_passes_quickly() {
        let start = Instant::now();
        let report = protocol_battery(5, 200).unwrap();
        assert!(report.passed(), "failures:\n{}", report.render());
        assert_eq!(report.items.len(), 6);
        assert!(start.elapsed().as_secs() < 60);
        let rendered = report.render();
        assert_eq!(rendered.lines().count(), 6);
        assert!(rendered.lines().all(|l| l.starts_with("PASS")));
    }

    #[test]
    fn failed_items_render_as_failures() {
        let report = CheckReport {
            items: vec![
                CheckItem { name: "good".into(), passed: true, detail: "fine".into() },
                CheckItem { name: "bad".into(), passed: false, detail: "broken".into() },
            ],
        };
        assert!(!report.passed());
        assert!(report.render().contains("FAIL bad"));
        assert!(CheckReport::default().items.is_empty());
        assert!(!CheckReport::default().passed());
    }
}
