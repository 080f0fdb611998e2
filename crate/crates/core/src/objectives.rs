//! Loss terms for both training stages.
//!
//! Stage one trains the global classifier with label-smoothed cross-entropy,
//! either on the pooled embedding ([`pretrain_loss_gap`]) or summed over
//! every descriptor of the map ([`pretrain_loss_dc`]). Stage two combines
//! three terms per episode ([`total_meta_objective`]): the episodic
//! nearest-centroid loss ([`meta_loss`]), a negative-entropy penalty pushing
//! attention away from uniform ([`entropy_reg`]), and a frozen-classifier
//! consistency term whose label smoothing is driven per site by the raw
//! attention score ([`meta_global_ce`]). Weight decay is the optimizer's
//! job, not a loss term here.
//!
//! All losses are graph routes returning scalar nodes; [`smooth_label`] and
//! [`ce_loss`] also exist as value routes for oracles and analysis.

use std::error::Error;
use std::fmt;

use crate::elem::Elem;
use crate::heads::{GlobalClassifier, HeadError};
use crate::numkit::graph::{Graph, NodeId};
use crate::numkit::params::Bound;
use crate::numkit::tensor::{Tensor, TensorError};

/// Label-smoothing parameter used throughout pre-training.
pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;

/// Mixing weights of the combined stage-two objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Scale of the attention negative-entropy term.
    pub beta: f64,
    /// Scale of the frozen-classifier consistency term.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 0.1,
            gamma: 0.5,
        }
    }
}

#[derive(Debug)]
pub enum ObjectiveError {
    /// Smoothing must lie in `[0,1)`.
    EpsilonOutOfRange { epsilon: f64 },
    /// A hard label lies outside the class range.
    LabelOutOfRange { label: usize, classes: usize },
    /// Row, label, or episode counts disagree.
    CountMismatch { expected: usize, got: usize },
    Head(HeadError),
    Tensor(TensorError),
}

impl fmt::Display for ObjectiveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveError::EpsilonOutOfRange { epsilon } => {
                write!(f, "smoothing {epsilon} outside [0,1)")
            }
            ObjectiveError::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} outside class range 0..{classes}")
            }
            ObjectiveError::CountMismatch { expected, got } => {
                write!(f, "expected {expected} entries, got {got}")
            }
            ObjectiveError::Head(e) => write!(f, "{e}"),
            ObjectiveError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl Error for ObjectiveError {}

impl From<TensorError> for ObjectiveError {
    fn from(e: TensorError) -> Self {
        ObjectiveError::Tensor(e)
    }
}

impl From<HeadError> for ObjectiveError {
    fn from(e: HeadError) -> Self {
        ObjectiveError::Head(e)
    }
}

/// A smoothed target distribution over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel<E> {
    values: Vec<E>,
    pub source: usize,
    pub epsilon: f64,
}

impl<E: Elem> SoftLabel<E> {
    pub fn values(&self) -> &[E] {
        &self.values
    }
}

/// `(1−ε)·onehot(label) + ε·uniform(classes)`.
pub fn smooth_label<E: Elem>(
    label: usize,
    classes: usize,
    epsilon: f64,
) -> Result<SoftLabel<E>, ObjectiveError> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(ObjectiveError::EpsilonOutOfRange { epsilon });
    }
    if label >= classes {
        return Err(ObjectiveError::LabelOutOfRange { label, classes });
    }
    let mut values = vec![E::lit(epsilon / classes as f64); classes];
    values[label] += E::lit(1.0 - epsilon);
    Ok(SoftLabel {
        values,
        source: label,
        epsilon,
    })
}

/// Value route: `−Σ_c target_c · log-softmax(logits)_c`.
pub fn ce_loss<E: Elem>(logits: &[E], target: &SoftLabel<E>) -> Result<E, ObjectiveError> {
    if logits.len() != target.values.len() {
        return Err(ObjectiveError::CountMismatch {
            expected: target.values.len(),
            got: logits.len(),
        });
    }
    let max = logits
        .iter()
        .copied()
        .fold(E::neg_infinity(), |a, b| a.max(b));
    let log_sum = logits
        .iter()
        .map(|&v| (v - max).exp())
        .sum::<E>()
        .ln()
        + max;
    let loss = logits
        .iter()
        .zip(&target.values)
        .map(|(&l, &t)| t * (log_sum - l))
        .sum();
    Ok(loss)
}

/// Stacks smoothed label rows, each repeated `repeat` times consecutively,
/// into a `[labels·repeat, classes]` target matrix.
fn smoothed_rows<E: Elem>(
    labels: &[usize],
    classes: usize,
    epsilon: f64,
    repeat: usize,
) -> Result<Tensor<E>, ObjectiveError> {
    let mut data = Vec::with_capacity(labels.len() * repeat * classes);
    for &label in labels {
        let row = smooth_label::<E>(label, classes, epsilon)?;
        for _ in 0..repeat {
            data.extend_from_slice(row.values());
        }
    }
    Ok(Tensor::new(&[labels.len() * repeat, classes], data)?)
}

/// Sum over rows of the soft cross-entropy between `logits` and `targets`,
/// both `[rows, classes]` nodes.
fn soft_ce_sum<E: Elem>(
    graph: &mut Graph<E>,
    logits: NodeId,
    targets: NodeId,
) -> Result<NodeId, TensorError> {
    let ls = graph.log_softmax(logits, 1)?;
    let weighted = graph.mul(ls, targets)?;
    let total = graph.sum_all(weighted);
    Ok(graph.neg(total))
}

fn image_count<E: Elem>(
    graph: &Graph<E>,
    map: NodeId,
    labels: &[usize],
) -> Result<usize, ObjectiveError> {
    let shape = graph.shape(map);
    if shape.len() != 4 {
        return Err(ObjectiveError::Tensor(TensorError::Shape {
            op: "pretrain_loss",
            shapes: vec![shape.to_vec()],
            detail: "expected [n,d,h,w]".into(),
        }));
    }
    if labels.len() != shape[0] {
        return Err(ObjectiveError::CountMismatch {
            expected: shape[0],
            got: labels.len(),
        });
    }
    Ok(shape[0])
}

/// Smoothed cross-entropy of every descriptor against its image's label:
/// summed over the descriptors of each image, averaged over images
/// (additionally over descriptors when `divide_by_r`).
pub fn dense_ce_fixed<E: Elem>(
    graph: &mut Graph<E>,
    map: NodeId,
    labels: &[usize],
    gc: &GlobalClassifier<E>,
    epsilon: f64,
    divide_by_r: bool,
) -> Result<(NodeId, Bound), ObjectiveError> {
    let n = image_count(graph, map, labels)?;
    let shape = graph.shape(map);
    let r = shape[2] * shape[3];
    let targets = smoothed_rows::<E>(labels, gc.classes(), epsilon, r)?;
    let targets = graph.constant(targets.shape(), targets.data().to_vec())?;
    let (logits, bound) = gc.dense_logits_graph(graph, map)?;
    let total = soft_ce_sum(graph, logits, targets)?;
    let scale = 1.0 / (n as f64 * if divide_by_r { r as f64 } else { 1.0 });
    Ok((graph.scale(total, E::lit(scale)), bound))
}

/// Stage-one objective on pooled embeddings: mean over the batch of the
/// smoothed cross-entropy of `classifier(global average)`.
pub fn pretrain_loss_gap<E: Elem>(
    graph: &mut Graph<E>,
    map: NodeId,
    labels: &[usize],
    gc: &GlobalClassifier<E>,
) -> Result<(NodeId, Bound), ObjectiveError> {
    assert!(!gc.frozen(), "pre-training requires a trainable classifier");
    let n = image_count(graph, map, labels)?;
    let targets = smoothed_rows::<E>(labels, gc.classes(), DEFAULT_LABEL_SMOOTHING, 1)?;
    let targets = graph.constant(targets.shape(), targets.data().to_vec())?;
    let pooled = graph.gap(map)?;
    let (logits, bound) = gc.logits_graph(graph, pooled)?;
    let total = soft_ce_sum(graph, logits, targets)?;
    Ok((graph.scale(total, E::lit(1.0 / n as f64)), bound))
}

/// Stage-one dense objective: every descriptor is classified independently,
/// losses summed per image and averaged over the batch.
pub fn pretrain_loss_dc<E: Elem>(
    graph: &mut Graph<E>,
    map: NodeId,
    labels: &[usize],
    gc: &GlobalClassifier<E>,
) -> Result<(NodeId, Bound), ObjectiveError> {
    assert!(!gc.frozen(), "pre-training requires a trainable classifier");
    dense_ce_fixed(graph, map, labels, gc, DEFAULT_LABEL_SMOOTHING, false)
}

/// Episodic loss: mean negative log-probability of the true class under the
/// softmax of the centroid logits, `logits: [queries, way]`.
pub fn meta_loss<E: Elem>(
    graph: &mut Graph<E>,
    logits: NodeId,
    labels: &[usize],
) -> Result<NodeId, ObjectiveError> {
    let shape = graph.shape(logits);
    if shape.len() != 2 {
        return Err(ObjectiveError::Tensor(TensorError::Shape {
            op: "meta_loss",
            shapes: vec![shape.to_vec()],
            detail: "expected [queries, way]".into(),
        }));
    }
    if labels.len() != shape[0] {
        return Err(ObjectiveError::CountMismatch {
            expected: shape[0],
            got: labels.len(),
        });
    }
    let n = shape[0];
    let targets = smoothed_rows::<E>(labels, shape[1], 0.0, 1)?;
    let targets = graph.constant(targets.shape(), targets.data().to_vec())?;
    let total = soft_ce_sum(graph, logits, targets)?;
    Ok(graph.scale(total, E::lit(1.0 / n as f64)))
}

/// Negative entropy of the attention weights, averaged over rows:
/// `1/n Σ_rows Σ_j α ln α`. Minimized (at `−ln r`) by uniform attention.
pub fn entropy_reg<E: Elem>(
    graph: &mut Graph<E>,
    alphas: NodeId,
) -> Result<NodeId, ObjectiveError> {
    let shape = graph.shape(alphas);
    if shape.len() != 2 {
        return Err(ObjectiveError::Tensor(TensorError::Shape {
            op: "entropy_reg",
            shapes: vec![shape.to_vec()],
            detail: "expected [rows, sites]".into(),
        }));
    }
    let n = shape[0];
    let plogp = graph.xlogx(alphas)?;
    let total = graph.sum_all(plogp);
    Ok(graph.scale(total, E::lit(1.0 / n as f64)))
}

/// Frozen-classifier consistency term. Every descriptor of every query map
/// is classified by the frozen global head against a target smoothed by its
/// own raw attention score: site `j` of query `x` uses
/// `A_x^j·onehot(label) + (1−A_x^j)·uniform`. Site losses are summed per
/// query and averaged over queries (and over sites when `divide_by_r`).
/// Gradients flow into the maps and, through the raw scores, into the
/// attention regressor — never into the frozen classifier.
pub fn meta_global_ce<E: Elem>(
    graph: &mut Graph<E>,
    query_maps: NodeId,
    raw_attention: NodeId,
    gc: &GlobalClassifier<E>,
    base_labels: &[usize],
    divide_by_r: bool,
) -> Result<NodeId, ObjectiveError> {
    assert!(gc.frozen(), "consistency term requires a frozen classifier");
    let n = image_count(graph, query_maps, base_labels)?;
    let map_shape = graph.shape(query_maps);
    let r = map_shape[2] * map_shape[3];
    let att_shape = graph.shape(raw_attention);
    if att_shape != [n, r] {
        return Err(ObjectiveError::Tensor(TensorError::Shape {
            op: "meta_global_ce",
            shapes: vec![map_shape.to_vec(), att_shape.to_vec()],
            detail: format!("attention must be [{n}, {r}]"),
        }));
    }
    for (index, &a) in graph.data(raw_attention).iter().enumerate() {
        if !(a >= E::zero() && a <= E::one()) {
            return Err(ObjectiveError::Head(HeadError::AttentionRange { index }));
        }
    }
    let classes = gc.classes();
    for &label in base_labels {
        if label >= classes {
            return Err(ObjectiveError::LabelOutOfRange { label, classes });
        }
    }

    let rows = n * r;
    let mut onehot = vec![E::zero(); rows * classes];
    for (i, &label) in base_labels.iter().enumerate() {
        for j in 0..r {
            onehot[(i * r + j) * classes + label] = E::one();
        }
    }
    let onehot = graph.constant(&[rows, classes], onehot)?;
    let ones_row = graph.constant(&[1, classes], vec![E::one(); classes])?;
    let full = graph.constant(&[rows, classes], vec![E::one(); rows * classes])?;

    let a_col = graph.reshape(raw_attention, &[rows, 1])?;
    let a_mat = graph.matmul(a_col, ones_row)?;
    let peaked = graph.mul(onehot, a_mat)?;
    let residual = graph.sub(full, a_mat)?;
    let uniform = graph.scale(residual, E::lit(1.0 / classes as f64));
    let targets = graph.add(peaked, uniform)?;

    let (logits, _) = gc.dense_logits_graph(graph, query_maps)?;
    let total = soft_ce_sum(graph, logits, targets)?;
    let scale = 1.0 / (n as f64 * if divide_by_r { r as f64 } else { 1.0 });
    Ok(graph.scale(total, E::lit(scale)))
}

/// One episode's already-reduced loss terms.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeTerms {
    pub meta: NodeId,
    pub entropy: NodeId,
    pub global_ce: NodeId,
}

/// Mean over episodes of `meta + β·entropy + γ·global_ce`.
pub fn total_meta_objective<E: Elem>(
    graph: &mut Graph<E>,
    episodes: &[EpisodeTerms],
    weights: &LossWeights,
) -> Result<NodeId, ObjectiveError> {
    assert!(
        weights.beta >= 0.0 && weights.gamma >= 0.0,
        "loss weights must be non-negative"
    );
    if episodes.is_empty() {
        return Err(ObjectiveError::CountMismatch {
            expected: 1,
            got: 0,
        });
    }
    let mut acc = None;
    for terms in episodes {
        let entropy = graph.scale(terms.entropy, E::lit(weights.beta));
        let global = graph.scale(terms.global_ce, E::lit(weights.gamma));
        let sum = graph.add(terms.meta, entropy)?;
        let sum = graph.add(sum, global)?;
        acc = Some(match acc {
            None => sum,
            Some(prev) => graph.add(prev, sum)?,
        });
    }
    let total = acc.expect("non-empty episode batch");
    Ok(graph.scale(total, E::lit(1.0 / episodes.len() as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads;
    use crate::numkit::gradcheck::{grad_check, GradCheckConfig};
    use crate::numkit::params::{ParamKind, ParamSet};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Map whose descriptor at site j is `descs[j]`, laid out `[d][site]`.
    fn map_values(descs: &[Vec<f64>]) -> Vec<f64> {
        let (d, r) = (descs[0].len(), descs.len());
        let mut values = vec![0.0; d * r];
        for (j, desc) in descs.iter().enumerate() {
            for (c, &v) in desc.iter().enumerate() {
                values[c * r + j] = v;
            }
        }
        values
    }

    fn identity_classifier(classes: usize, frozen: bool) -> GlobalClassifier<f64> {
        let mut gc = GlobalClassifier::<f64>::new(classes, classes, 0);
        let w = gc.params.id("classifier.w").unwrap();
        let mut eye = vec![0.0; classes * classes];
        for c in 0..classes {
            eye[c * classes + c] = 1.0;
        }
        gc.params.set_values(w, &eye).unwrap();
        if frozen {
            gc.freeze();
        }
        gc
    }

    #[test]
    fn smoothing_mixes_one_hot_with_uniform() {
        let label = smooth_label::<f64>(2, 5, 0.1).unwrap();
        let expected = [0.02, 0.02, 0.92, 0.02, 0.02];
        for (v, e) in label.values().iter().zip(expected) {
            assert_relative_eq!(*v, e, epsilon = 1e-15);
        }
        assert_eq!(label.source, 2);
    }

    #[test]
    fn zero_smoothing_is_one_hot() {
        let label = smooth_label::<f64>(1, 3, 0.0).unwrap();
        assert_eq!(label.values(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn heavy_smoothing_keeps_the_formula() {
        let label = smooth_label::<f64>(0, 5, 0.7).unwrap();
        assert_relative_eq!(label.values()[0], 0.3 + 0.14, epsilon = 1e-15);
        for &v in &label.values()[1..] {
            assert_relative_eq!(v, 0.14, epsilon = 1e-15);
        }
    }

    #[test]
    fn smoothing_rejects_bad_arguments() {
        assert!(matches!(
            smooth_label::<f64>(0, 3, 1.0),
            Err(ObjectiveError::EpsilonOutOfRange { .. })
        ));
        assert!(matches!(
            smooth_label::<f64>(0, 3, -0.2),
            Err(ObjectiveError::EpsilonOutOfRange { .. })
        ));
        assert!(matches!(
            smooth_label::<f64>(3, 3, 0.1),
            Err(ObjectiveError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn uniform_logits_cost_log_class_count() {
        for label in 0..5 {
            let target = smooth_label::<f64>(label, 5, 0.1).unwrap();
            let loss = ce_loss(&[0.3; 5], &target).unwrap();
            assert_relative_eq!(loss, 1.6094379124341003, epsilon = 1e-12);
        }
    }

    #[test]
    fn peaked_logits_on_the_true_class_cost_nothing() {
        let target = smooth_label::<f64>(0, 2, 0.0).unwrap();
        let loss = ce_loss(&[50.0, 0.0], &target).unwrap();
        assert!(loss < 1e-20, "loss {loss}");
    }

    #[test]
    fn two_class_margin_one_cross_entropy() {
        let target = smooth_label::<f64>(0, 2, 0.0).unwrap();
        let loss = ce_loss(&[1.0, 0.0], &target).unwrap();
        assert_relative_eq!(loss, 0.31326168751822286, epsilon = 1e-12);
    }

    #[test]
    fn ce_rejects_length_mismatch() {
        let target = smooth_label::<f64>(0, 3, 0.0).unwrap();
        assert!(matches!(
            ce_loss(&[1.0, 0.0], &target),
            Err(ObjectiveError::CountMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn zero_map_with_zero_bias_costs_log_classes() {
        let gc = GlobalClassifier::<f64>::new(3, 5, 4);
        let mut graph = Graph::<f64>::new();
        let map = graph.input(&[2, 3, 2, 2], vec![0.0; 24], false).unwrap();
        let (gap_loss, _) = pretrain_loss_gap(&mut graph, map, &[1, 4], &gc).unwrap();
        assert_relative_eq!(
            graph.item(gap_loss).unwrap(),
            5.0f64.ln(),
            epsilon = 1e-12
        );
        let (dc_loss, _) = pretrain_loss_dc(&mut graph, map, &[1, 4], &gc).unwrap();
        assert_relative_eq!(
            graph.item(dc_loss).unwrap(),
            4.0 * 5.0f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn identical_descriptors_tie_the_two_pretrain_losses() {
        let gc = GlobalClassifier::<f64>::new(3, 4, 9);
        let desc = vec![0.4, -1.0, 0.9];
        let values = map_values(&[desc.clone(), desc.clone(), desc.clone(), desc]);
        let mut graph = Graph::<f64>::new();
        let map = graph.input(&[1, 3, 2, 2], values, false).unwrap();
        let (gap_loss, _) = pretrain_loss_gap(&mut graph, map, &[2], &gc).unwrap();
        let (dc_loss, _) = pretrain_loss_dc(&mut graph, map, &[2], &gc).unwrap();
        assert_relative_eq!(
            graph.item(dc_loss).unwrap(),
            4.0 * graph.item(gap_loss).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn matched_softmax_hits_the_smoothing_floor() {
        let mut gc = GlobalClassifier::<f64>::new(2, 5, 4);
        let w = gc.params.id("classifier.w").unwrap();
        let b = gc.params.id("classifier.b").unwrap();
        gc.params.set_values(w, &[0.0; 10]).unwrap();
        gc.params
            .set_values(b, &[46.0f64.ln(), 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        let mut graph = Graph::<f64>::new();
        let map = graph.input(&[3, 2, 1, 1], vec![0.5; 6], false).unwrap();
        let (loss, _) = pretrain_loss_gap(&mut graph, map, &[0, 0, 0], &gc).unwrap();
        assert_relative_eq!(
            graph.item(loss).unwrap(),
            0.3896729206581791,
            epsilon = 1e-12
        );
    }

    #[test]
    fn dense_loss_sums_per_site_cross_entropies() {
        let gc = identity_classifier(2, false);
        let values = map_values(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut graph = Graph::<f64>::new();
        let map = graph.input(&[1, 2, 1, 2], values, false).unwrap();
        let (loss, _) = pretrain_loss_dc(&mut graph, map, &[0], &gc).unwrap();
        assert_relative_eq!(
            graph.item(loss).unwrap(),
            1.6265233750364458,
            epsilon = 1e-12
        );
    }

    #[test]
    fn equal_centroid_logits_cost_log_way() {
        let mut graph = Graph::<f64>::new();
        let logits = graph.input(&[3, 5], vec![0.7; 15], false).unwrap();
        let loss = meta_loss(&mut graph, logits, &[0, 3, 4]).unwrap();
        assert_relative_eq!(
            graph.item(loss).unwrap(),
            1.6094379124341003,
            epsilon = 1e-12
        );
    }

    #[test]
    fn dominant_correct_logit_drives_meta_loss_to_zero() {
        let mut graph = Graph::<f64>::new();
        let logits = graph
            .input(&[1, 3], vec![40.0, 0.0, 0.0], false)
            .unwrap();
        let loss = meta_loss(&mut graph, logits, &[0]).unwrap();
        assert!(graph.item(loss).unwrap() < 1e-15);
    }

    #[test]
    fn margin_two_single_query_meta_loss() {
        let mut graph = Graph::<f64>::new();
        let logits = graph
            .input(&[1, 5], vec![2.0, 0.0, 0.0, 0.0, 0.0], false)
            .unwrap();
        let loss = meta_loss(&mut graph, logits, &[0]).unwrap();
        assert_relative_eq!(
            graph.item(loss).unwrap(),
            0.43265290299179177,
            epsilon = 1e-12
        );
    }

    #[test]
    fn meta_loss_rejects_label_count_mismatch() {
        let mut graph = Graph::<f64>::new();
        let logits = graph.input(&[2, 3], vec![0.0; 6], false).unwrap();
        assert!(matches!(
            meta_loss(&mut graph, logits, &[0]),
            Err(ObjectiveError::CountMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn uniform_attention_minimizes_the_entropy_term() {
        let mut graph = Graph::<f64>::new();
        let alphas = graph.input(&[1, 16], vec![1.0 / 16.0; 16], false).unwrap();
        let reg = entropy_reg(&mut graph, alphas).unwrap();
        assert_relative_eq!(
            graph.item(reg).unwrap(),
            -2.772588722239781,
            epsilon = 1e-12
        );
    }

    #[test]
    fn one_hot_attention_has_zero_entropy_term() {
        let mut graph = Graph::<f64>::new();
        let alphas = graph
            .input(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0], false)
            .unwrap();
        let reg = entropy_reg(&mut graph, alphas).unwrap();
        assert_eq!(graph.item(reg).unwrap(), 0.0);
    }

    #[test]
    fn skewed_attention_entropy_hand_value() {
        let mut graph = Graph::<f64>::new();
        let alphas = graph.input(&[1, 2], vec![0.75, 0.25], false).unwrap();
        let reg = entropy_reg(&mut graph, alphas).unwrap();
        assert_relative_eq!(
            graph.item(reg).unwrap(),
            -0.5623351446188083,
            epsilon = 1e-12
        );
    }

    #[test]
    fn saturated_attention_reduces_to_hard_labels() {
        let gc = identity_classifier(2, true);
        let values = map_values(&[vec![1.0, 0.0]]);
        let mut graph = Graph::<f64>::new();
        let map = graph.input(&[1, 2, 1, 1], values, false).unwrap();
        let raw = graph.input(&[1, 1], vec![1.0], false).unwrap();
        let loss = meta_global_ce(&mut graph, map, raw, &gc, &[0], false).unwrap();
        assert_relative_eq!(
            graph.item(loss).unwrap(),
            0.31326168751822286,
            epsilon = 1e-12
        );
    }

    #[test]
    fn vanished_attention_reduces_to_uniform_targets() {
        let gc = identity_classifier(2, true);
        let values = map_values(&[vec![1.0, 0.0]]);
        let mut graph = Graph::<f64>::new();
        let map = graph.input(&[1, 2, 1, 1], values, false).unwrap();
        let raw = graph.input(&[1, 1], vec![0.0], false).unwrap();
        let loss = meta_global_ce(&mut graph, map, raw, &gc, &[0], false).unwrap();
        assert_relative_eq!(
            graph.item(loss).unwrap(),
            0.8132616875182228,
            epsilon = 1e-12
        );
    }

    #[test]
    fn half_attention_smooths_both_sites() {
        let gc = identity_classifier(2, true);
        let values = map_values(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut graph = Graph::<f64>::new();
        let map = graph.input(&[1, 2, 1, 2], values.clone(), false).unwrap();
        let raw = graph.input(&[1, 2], vec![0.5, 0.5], false).unwrap();
        let loss = meta_global_ce(&mut graph, map, raw, &gc, &[0], false).unwrap();
        assert_relative_eq!(
            graph.item(loss).unwrap(),
            1.6265233750364456,
            epsilon = 1e-12
        );

        let map = graph.input(&[1, 2, 1, 2], values, false).unwrap();
        let raw = graph.input(&[1, 2], vec![0.5, 0.5], false).unwrap();
        let halved = meta_global_ce(&mut graph, map, raw, &gc, &[0], true).unwrap();
        assert_relative_eq!(
            graph.item(halved).unwrap(),
            1.6265233750364456 / 2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn consistency_term_rejects_out_of_range_scores() {
        let gc = identity_classifier(2, true);
        let mut graph = Graph::<f64>::new();
        let map = graph.input(&[1, 2, 1, 1], vec![1.0, 0.0], false).unwrap();
        let raw = graph.input(&[1, 1], vec![1.5], false).unwrap();
        assert!(matches!(
            meta_global_ce(&mut graph, map, raw, &gc, &[0], false),
            Err(ObjectiveError::Head(HeadError::AttentionRange { index: 0 }))
        ));
    }

    #[test]
    fn degenerate_weights_reduce_to_mean_meta_loss() {
        let mut graph = Graph::<f64>::new();
        let episodes: Vec<EpisodeTerms> = [0.4, 0.8]
            .iter()
            .map(|&m| EpisodeTerms {
                meta: graph.scalar_const(m),
                entropy: graph.scalar_const(-1.3),
                global_ce: graph.scalar_const(2.2),
            })
            .collect();
        let zero = LossWeights {
            beta: 0.0,
            gamma: 0.0,
        };
        let total = total_meta_objective(&mut graph, &episodes, &zero).unwrap();
        assert_relative_eq!(graph.item(total).unwrap(), 0.6, epsilon = 1e-15);
    }

    #[test]
    fn default_weights_are_recorded() {
        let weights = LossWeights::default();
        assert_eq!(weights.beta, 0.1);
        assert_eq!(weights.gamma, 0.5);
    }

    #[test]
    fn single_episode_combination_hand_value() {
        let mut graph = Graph::<f64>::new();
        let logits = graph
            .input(&[1, 2], vec![2.0, 0.0], false)
            .unwrap();
        let meta = meta_loss(&mut graph, logits, &[0]).unwrap();
        let alphas = graph.input(&[1, 2], vec![0.75, 0.25], false).unwrap();
        let entropy = entropy_reg(&mut graph, alphas).unwrap();
        let gc = identity_classifier(2, true);
        let map = graph.input(&[1, 2, 1, 1], vec![1.0, 0.0], false).unwrap();
        let raw = graph.input(&[1, 1], vec![0.5], false).unwrap();
        let global_ce = meta_global_ce(&mut graph, map, raw, &gc, &[0], false).unwrap();
        let total = total_meta_objective(
            &mut graph,
            &[EpisodeTerms {
                meta,
                entropy,
                global_ce,
            }],
            &LossWeights::default(),
        )
        .unwrap();
        assert_relative_eq!(
            graph.item(total).unwrap(),
            0.3523253403402032,
            epsilon = 1e-12
        );
    }

    #[test]
    fn empty_episode_batch_is_rejected() {
        let mut graph = Graph::<f64>::new();
        assert!(matches!(
            total_meta_objective(&mut graph, &[], &LossWeights::default()),
            Err(ObjectiveError::CountMismatch { expected: 1, got: 0 })
        ));
    }

    #[test]
    fn dense_pretrain_loss_passes_grad_check() {
        let gc = GlobalClassifier::<f64>::new(3, 4, 11);
        let mut ps = ParamSet::<f64>::new();
        let map_values: Vec<f64> = (0..24).map(|v| ((v * 7) % 11) as f64 / 5.0 - 1.0).collect();
        ps.add(
            "map",
            Tensor::new(&[2, 3, 2, 2], map_values).unwrap(),
            ParamKind::Trainable,
        )
        .unwrap();
        for name in ["classifier.w", "classifier.b"] {
            let src = gc.params.id(name).unwrap();
            ps.add(name, gc.params.tensor(src).clone(), ParamKind::Trainable)
                .unwrap();
        }
        let build = |ps: &ParamSet<f64>, graph: &mut Graph<f64>| {
            let mut gc = GlobalClassifier::<f64>::new(3, 4, 11);
            for name in ["classifier.w", "classifier.b"] {
                let dst = gc.params.id(name).unwrap();
                gc.params
                    .set_values(dst, ps.values(ps.id(name).unwrap()))
                    .unwrap();
            }
            let map_id = ps.id("map").unwrap();
            let map = ps.bind(graph, map_id, true);
            let (loss, bound) =
                pretrain_loss_dc(graph, map, &[1, 3], &gc).map_err(|e| match e {
                    ObjectiveError::Tensor(t) => t,
                    other => TensorError::Domain {
                        op: "pretrain_loss_dc",
                        detail: other.to_string(),
                    },
                })?;
            let mut pairs = vec![(map_id, map)];
            for &(gid, node) in bound.pairs() {
                pairs.push((ps.id(gc.params.name(gid)).unwrap(), node));
            }
            Ok((loss, pairs))
        };
        let report = grad_check(&mut ps, &build, &GradCheckConfig::default()).unwrap();
        assert!(report.checked > 0);
        assert!(
            report.max_error < 1e-6,
            "max error {} at {:?}",
            report.max_error,
            report.worst
        );
    }

    #[test]
    fn combined_episode_objective_passes_grad_check() {
        let reg = heads::Regressor::<f64>::new(2, 5);
        let reg_names = ["layer1.w", "layer1.b", "layer2.w", "layer2.b"];
        let mut ps = ParamSet::<f64>::new();
        let support: Vec<f64> = (0..16).map(|v| ((v * 3) % 7) as f64 / 3.0 - 1.0).collect();
        let query: Vec<f64> = (0..8).map(|v| ((v * 5) % 9) as f64 / 4.0 - 1.0).collect();
        ps.add(
            "support",
            Tensor::new(&[2, 2, 2, 2], support).unwrap(),
            ParamKind::Trainable,
        )
        .unwrap();
        ps.add(
            "query",
            Tensor::new(&[1, 2, 2, 2], query).unwrap(),
            ParamKind::Trainable,
        )
        .unwrap();
        for name in reg_names {
            let src = reg.params.id(name).unwrap();
            ps.add(name, reg.params.tensor(src).clone(), ParamKind::Trainable)
                .unwrap();
        }

        let build = |ps: &ParamSet<f64>, graph: &mut Graph<f64>| {
            let mut reg = heads::Regressor::<f64>::new(2, 5);
            for name in reg_names {
                let dst = reg.params.id(name).unwrap();
                reg.params
                    .set_values(dst, ps.values(ps.id(name).unwrap()))
                    .unwrap();
            }
            let gc = identity_classifier(2, true);
            let to_tensor = |e: ObjectiveError| TensorError::Domain {
                op: "episode_objective",
                detail: e.to_string(),
            };
            let head_err = |e: heads::HeadError| TensorError::Domain {
                op: "episode_objective",
                detail: e.to_string(),
            };
            let support_id = ps.id("support").unwrap();
            let query_id = ps.id("query").unwrap();
            let support = ps.bind(graph, support_id, true);
            let query = ps.bind(graph, query_id, true);
            let (_, w_s, bound_s) =
                reg.attention_graph(graph, support, true).map_err(head_err)?;
            let (raw_q, w_q, bound_q) =
                reg.attention_graph(graph, query, true).map_err(head_err)?;
            let support_emb = graph.weighted_pool(support, w_s)?;
            let query_emb = graph.weighted_pool(query, w_q)?;
            let cents =
                heads::centroids_graph(graph, support_emb, &[0, 1]).map_err(head_err)?;
            let logits = heads::nc_logits_graph(graph, query_emb, cents).map_err(head_err)?;
            let meta = meta_loss(graph, logits, &[1]).map_err(to_tensor)?;
            let entropy = entropy_reg(graph, w_q).map_err(to_tensor)?;
            let global_ce =
                meta_global_ce(graph, query, raw_q, &gc, &[1], false).map_err(to_tensor)?;
            let total = total_meta_objective(
                graph,
                &[EpisodeTerms {
                    meta,
                    entropy,
                    global_ce,
                }],
                &LossWeights::default(),
            )
            .map_err(to_tensor)?;
            let mut pairs = vec![(support_id, support), (query_id, query)];
            for &(rid, node) in bound_s.pairs().iter().chain(bound_q.pairs()) {
                pairs.push((ps.id(reg.params.name(rid)).unwrap(), node));
            }
            Ok((total, pairs))
        };
        let report = grad_check(&mut ps, &build, &GradCheckConfig::default()).unwrap();
        assert!(report.checked > 0);
        assert!(
            report.max_error < 1e-4,
            "max error {} at {:?}",
            report.max_error,
            report.worst
        );
    }

    proptest! {
        #[test]
        fn soft_labels_are_probability_vectors(
            label in 0usize..6,
            classes in 6usize..12,
            epsilon in 0.0f64..0.99,
        ) {
            let soft = smooth_label::<f64>(label, classes, epsilon).unwrap();
            let sum: f64 = soft.values().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(soft.values().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn entropy_term_is_bounded_and_tight_only_at_uniform(
            raw in prop::collection::vec(0.05f64..1.0, 8),
        ) {
            let sum: f64 = raw.iter().sum();
            let alphas: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let mut graph = Graph::<f64>::new();
            let node = graph.input(&[1, 8], alphas.clone(), false).unwrap();
            let reg = entropy_reg(&mut graph, node).unwrap();
            let value = graph.item(reg).unwrap();
            let floor = -(8.0f64.ln());
            prop_assert!(value >= floor - 1e-12);
            prop_assert!(value <= 1e-12);
            let deviation = alphas
                .iter()
                .map(|a| (a - 0.125).abs())
                .fold(0.0, f64::max);
            if deviation > 0.01 {
                prop_assert!(value > floor + 4e-5, "value {value} vs floor {floor}");
            }
        }
    }
}
