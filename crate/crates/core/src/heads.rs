//! Pooling strategies and classification heads.
//!
//! Two poolings collapse a dense feature map into one embedding: plain
//! global averaging ([`gap`]) and attentive pooling ([`att_pool`]), where a
//! small two-layer 1×1-convolution regressor ([`Regressor`]) scores every
//! spatial site and the embedding is the score-weighted sum of descriptors.
//! On top of the embeddings sit three classifiers: the episodic
//! nearest-centroid head ([`nc_logits`], dot products against
//! direction-normalized class centroids), a temperature-scaled similarity
//! baseline ([`nc_classify_tau`]), and the global base-class head
//! ([`GlobalClassifier`]), which can score either pooled embeddings or every
//! descriptor independently ("dense" classification).
//!
//! Each head exists in two routes: a graph route used by training (returns
//! `NodeId`s so gradients flow) and a plain value route used by evaluation
//! and analysis. Tests cross-check the routes against each other.

use std::error::Error;
use std::fmt;

use crate::backbone::FeatureMap;
use crate::elem::Elem;
use crate::numkit::graph::{sigmoid_stable, Graph, NodeId};
use crate::numkit::init::he_uniform;
use crate::numkit::params::{Bound, ParamId, ParamKind, ParamSet};
use crate::numkit::tensor::{Tensor, TensorError};
use crate::rng::{stream, Domain};

/// Hidden width of the attention regressor.
pub const ATTENTION_HIDDEN: usize = 8;

/// Initialization stream for the global classifier (the backbone uses 0).
const CLASSIFIER_INIT_STREAM: u64 = 1;
/// Initialization stream for the attention regressor.
const REGRESSOR_INIT_STREAM: u64 = 2;

#[derive(Debug)]
pub enum HeadError {
    /// A class id in `0..classes` has no support embeddings to average.
    EmptyClass { class: usize },
    /// A support label lies outside the declared class range.
    LabelOutOfRange { label: usize, classes: usize },
    /// Vector length disagrees with the expected feature depth.
    DepthMismatch { expected: usize, got: usize },
    /// An attention map covers a different number of sites than the map it
    /// is applied to.
    SiteMismatch { expected: usize, got: usize },
    /// A raw attention score escaped `[0,1]` or is not finite.
    AttentionRange { index: usize },
    /// Every raw attention score is zero, so the weights cannot be
    /// normalized.
    ZeroAttentionSum,
    /// Temperature must be strictly positive.
    NonPositiveTau { tau: f64 },
    /// A zero-norm centroid has no direction to compare against.
    DegenerateCentroid { class: usize },
    /// A zero-norm query has no direction for cosine similarity.
    DegenerateQuery,
    Tensor(TensorError),
}

impl fmt::Display for HeadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadError::EmptyClass { class } => {
                write!(f, "class {class} has no support embeddings")
            }
            HeadError::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} outside class range 0..{classes}")
            }
            HeadError::DepthMismatch { expected, got } => {
                write!(f, "expected feature depth {expected}, got {got}")
            }
            HeadError::SiteMismatch { expected, got } => {
                write!(f, "attention covers {got} sites, map has {expected}")
            }
            HeadError::AttentionRange { index } => {
                write!(f, "raw attention score {index} outside [0,1]")
            }
            HeadError::ZeroAttentionSum => {
                write!(f, "all raw attention scores are zero")
            }
            HeadError::NonPositiveTau { tau } => {
                write!(f, "temperature must be positive, got {tau}")
            }
            HeadError::DegenerateCentroid { class } => {
                write!(f, "centroid {class} has zero norm")
            }
            HeadError::DegenerateQuery => {
                write!(f, "query embedding has zero norm")
            }
            HeadError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl Error for HeadError {}

impl From<TensorError> for HeadError {
    fn from(e: TensorError) -> Self {
        HeadError::Tensor(e)
    }
}

/// Which pooling produced an embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Gap,
    AttPool,
}

/// A pooled d-dimensional embedding, tagged with the pooling that made it.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<E> {
    pub values: Vec<E>,
    pub pooling: Pooling,
}

/// Per-site attention: raw sigmoid scores and their sum-normalized weights.
///
/// Raw scores live in `[0,1]` (sigmoid range; the closed endpoints are
/// reachable once the sigmoid saturates in floating point) and the weights
/// are exactly `raw / Σ raw`, so they sum to 1 up to rounding.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<E> {
    raw: Vec<E>,
    normalized: Vec<E>,
}

impl<E: Elem> AttentionMap<E> {
    pub fn from_raw(raw: Vec<E>) -> Result<Self, HeadError> {
        assert!(!raw.is_empty(), "attention over an empty site set");
        for (index, &v) in raw.iter().enumerate() {
            if !(v >= E::zero() && v <= E::one()) {
                return Err(HeadError::AttentionRange { index });
            }
        }
        let sum: E = raw.iter().copied().sum();
        if sum <= E::zero() {
            return Err(HeadError::ZeroAttentionSum);
        }
        let normalized = raw.iter().map(|&v| v / sum).collect();
        Ok(AttentionMap { raw, normalized })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw(&self) -> &[E] {
        &self.raw
    }

    pub fn normalized(&self) -> &[E] {
        &self.normalized
    }
}

/// Mean of the map's descriptors.
pub fn gap<E: Elem>(map: &FeatureMap<E>) -> Embedding<E> {
    let r = map.r();
    assert!(r > 0, "feature map has no spatial sites");
    let inv = E::one() / E::lit(r as f64);
    let values = map
        .values
        .chunks(r)
        .map(|plane| plane.iter().copied().sum::<E>() * inv)
        .collect();
    Embedding {
        values,
        pooling: Pooling::Gap,
    }
}

/// Attention-weighted sum of the map's descriptors.
///
/// An all-zero map yields the zero embedding regardless of the weights; it
/// is reported on stderr rather than treated as an error because it can
/// occur early in from-scratch training.
pub fn att_pool<E: Elem>(
    map: &FeatureMap<E>,
    att: &AttentionMap<E>,
) -> Result<Embedding<E>, HeadError> {
    let r = map.r();
    if att.len() != r {
        return Err(HeadError::SiteMismatch {
            expected: r,
            got: att.len(),
        });
    }
    if map.is_zero() {
        eprintln!("warning: attentive pooling over an all-zero feature map yields the zero embedding");
        return Ok(Embedding {
            values: vec![E::zero(); map.d],
            pooling: Pooling::AttPool,
        });
    }
    let weights = att.normalized();
    let values = map
        .values
        .chunks(r)
        .map(|plane| {
            plane
                .iter()
                .zip(weights)
                .map(|(&v, &w)| v * w)
                .sum::<E>()
        })
        .collect();
    Ok(Embedding {
        values,
        pooling: Pooling::AttPool,
    })
}

/// Two-layer 1×1-convolution regressor that scores every spatial site of a
/// feature map. Each site's input is the concatenation
/// `[global-average vector ; local descriptor]` (2d channels), mapped
/// 2d → 8 → 1 with a relu between the layers and a sigmoid on the output.
pub struct Regressor<E: Elem> {
    pub params: ParamSet<E>,
    depth: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl<E: Elem> Regressor<E> {
    pub fn new(depth: usize, seed: u64) -> Self {
        assert!(depth > 0, "regressor needs a positive feature depth");
        let mut rng = stream(seed, Domain::ParamInit, REGRESSOR_INIT_STREAM);
        let mut params = ParamSet::new();
        let w1 = params
            .add(
                "layer1.w",
                he_uniform(&[ATTENTION_HIDDEN, 2 * depth, 1, 1], 2 * depth, &mut rng),
                ParamKind::Trainable,
            )
            .expect("fresh parameter set");
        let b1 = params
            .add(
                "layer1.b",
                Tensor::zeros(&[ATTENTION_HIDDEN]),
                ParamKind::Trainable,
            )
            .expect("fresh parameter set");
        let w2 = params
            .add(
                "layer2.w",
                he_uniform(&[1, ATTENTION_HIDDEN, 1, 1], ATTENTION_HIDDEN, &mut rng),
                ParamKind::Trainable,
            )
            .expect("fresh parameter set");
        let b2 = params
            .add("layer2.b", Tensor::zeros(&[1]), ParamKind::Trainable)
            .expect("fresh parameter set");
        Regressor {
            params,
            depth,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Graph route over a `[n,d,h,w]` batch. Returns the raw scores and the
    /// sum-normalized weights, both `[n, h·w]`, plus the parameter binding
    /// (empty unless `trainable`).
    pub fn attention_graph(
        &self,
        graph: &mut Graph<E>,
        map: NodeId,
        trainable: bool,
    ) -> Result<(NodeId, NodeId, Bound), HeadError> {
        let shape = graph.shape(map);
        if shape.len() != 4 {
            return Err(HeadError::Tensor(TensorError::Shape {
                op: "attention_graph",
                shapes: vec![shape.to_vec()],
                detail: "expected [n,d,h,w]".into(),
            }));
        }
        if shape[1] != self.depth {
            return Err(HeadError::DepthMismatch {
                expected: self.depth,
                got: shape[1],
            });
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let w1 = self.params.bind(graph, self.w1, trainable);
        let b1 = self.params.bind(graph, self.b1, trainable);
        let w2 = self.params.bind(graph, self.w2, trainable);
        let b2 = self.params.bind(graph, self.b2, trainable);
        let mut bound = Bound::new();
        if trainable {
            bound.push(self.w1, w1);
            bound.push(self.b1, b1);
            bound.push(self.w2, w2);
            bound.push(self.b2, b2);
        }
        let pooled = graph.gap(map)?;
        let wide = graph.broadcast_hw(pooled, h, w)?;
        let cat = graph.concat_ch(wide, map)?;
        let hidden = graph.conv2d(cat, w1, Some(b1), 1, 0)?;
        let hidden = graph.relu(hidden);
        let scored = graph.conv2d(hidden, w2, Some(b2), 1, 0)?;
        let raw = graph.sigmoid(scored);
        let raw = graph.reshape(raw, &[n, h * w])?;
        let weights = graph.row_normalize(raw)?;
        Ok((raw, weights, bound))
    }

    /// Value route for one map with the current parameter values.
    pub fn attention_scores(&self, map: &FeatureMap<E>) -> Result<AttentionMap<E>, HeadError> {
        if map.d != self.depth {
            return Err(HeadError::DepthMismatch {
                expected: self.depth,
                got: map.d,
            });
        }
        let pooled = gap(map);
        let w1 = self.params.values(self.w1);
        let b1 = self.params.values(self.b1);
        let w2 = self.params.values(self.w2);
        let b2 = self.params.values(self.b2);
        let d = self.depth;
        let mut raw = Vec::with_capacity(map.r());
        for j in 0..map.r() {
            let mut out = b2[0];
            for u in 0..ATTENTION_HIDDEN {
                let row = &w1[u * 2 * d..(u + 1) * 2 * d];
                let mut pre = b1[u];
                for c in 0..d {
                    pre += row[c] * pooled.values[c];
                    pre += row[d + c] * map.at(c, j);
                }
                if pre > E::zero() {
                    out += w2[u] * pre;
                }
            }
            raw.push(sigmoid_stable(out));
        }
        AttentionMap::from_raw(raw)
    }
}

/// Linear head over the base classes: weight rows are one class each, so a
/// d-vector maps to `classes` logits. Freezing it keeps the parameters out
/// of gradient bindings while the head still scores inputs.
pub struct GlobalClassifier<E: Elem> {
    pub params: ParamSet<E>,
    w: ParamId,
    b: ParamId,
    depth: usize,
    classes: usize,
    frozen: bool,
}

impl<E: Elem> GlobalClassifier<E> {
    pub fn new(depth: usize, classes: usize, seed: u64) -> Self {
        assert!(depth > 0 && classes > 0, "classifier needs positive dims");
        let mut rng = stream(seed, Domain::ParamInit, CLASSIFIER_INIT_STREAM);
        let mut params = ParamSet::new();
        let w = params
            .add(
                "classifier.w",
                he_uniform(&[classes, depth], depth, &mut rng),
                ParamKind::Trainable,
            )
            .expect("fresh parameter set");
        let b = params
            .add("classifier.b", Tensor::zeros(&[classes]), ParamKind::Trainable)
            .expect("fresh parameter set");
        GlobalClassifier {
            params,
            w,
            b,
            depth,
            classes,
            frozen: false,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn bind_wb(&self, graph: &mut Graph<E>) -> (NodeId, NodeId, Bound) {
        let trainable = !self.frozen;
        let w = self.params.bind(graph, self.w, trainable);
        let b = self.params.bind(graph, self.b, trainable);
        let mut bound = Bound::new();
        if trainable {
            bound.push(self.w, w);
            bound.push(self.b, b);
        }
        (w, b, bound)
    }

    /// Graph route over pooled embeddings: `[n,d] → [n,classes]`.
    pub fn logits_graph(
        &self,
        graph: &mut Graph<E>,
        embeddings: NodeId,
    ) -> Result<(NodeId, Bound), HeadError> {
        let shape = graph.shape(embeddings);
        if shape.len() != 2 || shape[1] != self.depth {
            return Err(HeadError::DepthMismatch {
                expected: self.depth,
                got: shape.last().copied().unwrap_or(0),
            });
        }
        let (w, b, bound) = self.bind_wb(graph);
        let logits = graph.linear(embeddings, w, Some(b))?;
        Ok((logits, bound))
    }

    /// Graph route over every descriptor of a `[n,d,h,w]` batch:
    /// `[n·h·w, classes]`, sites row-major within each image.
    pub fn dense_logits_graph(
        &self,
        graph: &mut Graph<E>,
        map: NodeId,
    ) -> Result<(NodeId, Bound), HeadError> {
        let shape = graph.shape(map);
        if shape.len() != 4 || shape[1] != self.depth {
            return Err(HeadError::DepthMismatch {
                expected: self.depth,
                got: shape.get(1).copied().unwrap_or(0),
            });
        }
        let (w, b, bound) = self.bind_wb(graph);
        let desc = graph.descriptors(map)?;
        let logits = graph.linear(desc, w, Some(b))?;
        Ok((logits, bound))
    }

    /// Value route for one embedding.
    pub fn classify(&self, embedding: &[E]) -> Result<Vec<E>, HeadError> {
        if embedding.len() != self.depth {
            return Err(HeadError::DepthMismatch {
                expected: self.depth,
                got: embedding.len(),
            });
        }
        let w = self.params.values(self.w);
        let b = self.params.values(self.b);
        Ok(w.chunks(self.depth)
            .zip(b)
            .map(|(row, &bias)| {
                row.iter()
                    .zip(embedding)
                    .map(|(&wv, &ev)| wv * ev)
                    .sum::<E>()
                    + bias
            })
            .collect())
    }

    /// Value route for every descriptor of one map, row `j` holding the
    /// logits of descriptor `j`.
    pub fn dense_logits(&self, map: &FeatureMap<E>) -> Result<Tensor<E>, HeadError> {
        if map.d != self.depth {
            return Err(HeadError::DepthMismatch {
                expected: self.depth,
                got: map.d,
            });
        }
        let r = map.r();
        let mut data = Vec::with_capacity(r * self.classes);
        for j in 0..r {
            data.extend(self.classify(&map.descriptor(j))?);
        }
        Ok(Tensor::new(&[r, self.classes], data)?)
    }
}

/// Per-class mean support embeddings; class `t` is row `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Centroids<E> {
    values: Vec<E>,
    classes: usize,
    depth: usize,
}

impl<E: Elem> Centroids<E> {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn vector(&self, class: usize) -> &[E] {
        &self.values[class * self.depth..(class + 1) * self.depth]
    }

    /// Row-major `[classes, depth]` payload.
    pub fn values(&self) -> &[E] {
        &self.values
    }
}

/// Averages support embeddings per class. Labels are episode-local ids
/// `0..classes` with `classes = max(label)+1`; every class must appear.
pub fn centroids<E: Elem>(
    embeddings: &[Embedding<E>],
    labels: &[usize],
) -> Result<Centroids<E>, HeadError> {
    assert_eq!(
        embeddings.len(),
        labels.len(),
        "one label per support embedding"
    );
    assert!(!embeddings.is_empty(), "no support embeddings");
    let depth = embeddings[0].values.len();
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let mut values = vec![E::zero(); classes * depth];
    let mut counts = vec![0usize; classes];
    for (emb, &label) in embeddings.iter().zip(labels) {
        if emb.values.len() != depth {
            return Err(HeadError::DepthMismatch {
                expected: depth,
                got: emb.values.len(),
            });
        }
        counts[label] += 1;
        for (acc, &v) in values[label * depth..(label + 1) * depth]
            .iter_mut()
            .zip(&emb.values)
        {
            *acc += v;
        }
    }
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(HeadError::EmptyClass { class });
        }
        let inv = E::one() / E::lit(count as f64);
        for v in &mut values[class * depth..(class + 1) * depth] {
            *v *= inv;
        }
    }
    Ok(Centroids {
        values,
        classes,
        depth,
    })
}

/// Selection matrix `S: [classes, n]` with `S[t,i] = 1/|class t|` where
/// `labels[i] == t`, so `S · support` averages each class's rows.
pub fn centroid_matrix<E: Elem>(
    labels: &[usize],
    classes: usize,
) -> Result<Tensor<E>, HeadError> {
    let mut counts = vec![0usize; classes];
    for &label in labels {
        if label >= classes {
            return Err(HeadError::LabelOutOfRange { label, classes });
        }
        counts[label] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(HeadError::EmptyClass { class });
    }
    let n = labels.len();
    let mut data = vec![E::zero(); classes * n];
    for (i, &label) in labels.iter().enumerate() {
        data[label * n + i] = E::one() / E::lit(counts[label] as f64);
    }
    Ok(Tensor::new(&[classes, n], data)?)
}

/// Graph route: averages support embedding rows `[n,d]` into centroid rows
/// `[classes,d]` via a constant selection matrix, keeping gradients flowing
/// to the support embeddings.
pub fn centroids_graph<E: Elem>(
    graph: &mut Graph<E>,
    support: NodeId,
    labels: &[usize],
) -> Result<NodeId, HeadError> {
    let shape = graph.shape(support);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(HeadError::Tensor(TensorError::Shape {
            op: "centroids_graph",
            shapes: vec![shape.to_vec()],
            detail: format!("expected [{},d] support rows", labels.len()),
        }));
    }
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let sel = centroid_matrix::<E>(labels, classes)?;
    let sel = graph.constant(sel.shape(), sel.data().to_vec())?;
    Ok(graph.matmul(sel, support)?)
}

/// One logit per class: the query dotted with each direction-normalized
/// centroid. The query itself is left unnormalized, so its magnitude scales
/// all logits uniformly without moving the argmax.
pub fn nc_logits<E: Elem>(query: &[E], cents: &Centroids<E>) -> Result<Vec<E>, HeadError> {
    if query.len() != cents.depth() {
        return Err(HeadError::DepthMismatch {
            expected: cents.depth(),
            got: query.len(),
        });
    }
    let mut logits = Vec::with_capacity(cents.classes());
    for class in 0..cents.classes() {
        let c = cents.vector(class);
        let norm = c.iter().map(|&v| v * v).sum::<E>().sqrt();
        if norm == E::zero() {
            return Err(HeadError::DegenerateCentroid { class });
        }
        let dot = query.iter().zip(c).map(|(&q, &cv)| q * cv).sum::<E>();
        logits.push(dot / norm);
    }
    Ok(logits)
}

/// Graph route: `queries [m,d] × unit(centroids)ᵀ → [m,classes]`.
pub fn nc_logits_graph<E: Elem>(
    graph: &mut Graph<E>,
    queries: NodeId,
    cents: NodeId,
) -> Result<NodeId, HeadError> {
    let unit = graph.unit_rows(cents).map_err(|e| match e {
        TensorError::DegenerateCentroid { row } => HeadError::DegenerateCentroid { class: row },
        other => HeadError::Tensor(other),
    })?;
    let directions = graph.transpose(unit)?;
    Ok(graph.matmul(queries, directions)?)
}

/// Similarity for the temperature-scaled baseline classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Similarity {
    Cosine,
    NegEuclidean,
}

/// Softmax over `similarity(query, centroid) / tau`; the negative-Euclidean
/// branch uses the squared distance.
pub fn nc_classify_tau<E: Elem>(
    query: &[E],
    cents: &Centroids<E>,
    similarity: Similarity,
    tau: f64,
) -> Result<Vec<E>, HeadError> {
    if !(tau > 0.0) {
        return Err(HeadError::NonPositiveTau { tau });
    }
    if query.len() != cents.depth() {
        return Err(HeadError::DepthMismatch {
            expected: cents.depth(),
            got: query.len(),
        });
    }
    let query_norm = query.iter().map(|&v| v * v).sum::<E>().sqrt();
    if similarity == Similarity::Cosine && query_norm == E::zero() {
        return Err(HeadError::DegenerateQuery);
    }
    let inv_tau = E::lit(1.0 / tau);
    let mut scores = Vec::with_capacity(cents.classes());
    for class in 0..cents.classes() {
        let c = cents.vector(class);
        let score = match similarity {
            Similarity::Cosine => {
                let norm = c.iter().map(|&v| v * v).sum::<E>().sqrt();
                if norm == E::zero() {
                    return Err(HeadError::DegenerateCentroid { class });
                }
                let dot = query.iter().zip(c).map(|(&q, &cv)| q * cv).sum::<E>();
                dot / (query_norm * norm)
            }
            Similarity::NegEuclidean => {
                -query
                    .iter()
                    .zip(c)
                    .map(|(&q, &cv)| (q - cv) * (q - cv))
                    .sum::<E>()
            }
        };
        scores.push(score * inv_tau);
    }
    let max = scores
        .iter()
        .copied()
        .fold(E::neg_infinity(), |a, b| a.max(b));
    let mut sum = E::zero();
    for s in &mut scores {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in &mut scores {
        *s /= sum;
    }
    Ok(scores)
}
