//! Named parameter storage shared by models and optimizers.
//!
//! A [`ParamSet`] keeps tensors in declaration order (checkpoints rely on
//! that order being stable) and distinguishes trainable weights from
//! buffers such as running normalization statistics, which persist and
//! serialize but never receive gradients.

use std::error::Error;
use std::fmt;

use crate::elem::Elem;
use crate::numkit::graph::{Graph, NodeId};
use crate::numkit::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamError {
    DuplicateName { name: String },
    UnknownName { name: String },
    Length { name: String, expected: usize, got: usize },
}

impl fmt::Display for ParamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamError::DuplicateName { name } => {
                write!(f, "parameter {name:?} already declared")
            }
            ParamError::UnknownName { name } => write!(f, "no parameter named {name:?}"),
            ParamError::Length { name, expected, got } => write!(
                f,
                "parameter {name:?} holds {expected} values, got {got}"
            ),
        }
    }
}

impl Error for ParamError {}

/// Parameter-to-node bindings made during one forward pass, in binding
/// order; training loops read gradients back through these.
#[derive(Debug, Default)]
pub struct Bound {
    pairs: Vec<(ParamId, NodeId)>,
}

impl Bound {
    pub fn new() -> Self {
        Bound { pairs: Vec::new() }
    }

    pub fn push(&mut self, id: ParamId, node: NodeId) {
        self.pairs.push((id, node));
    }

    pub fn append(&mut self, mut other: Bound) {
        self.pairs.append(&mut other.pairs);
    }

    pub fn pairs(&self) -> &[(ParamId, NodeId)] {
        &self.pairs
    }

    /// Node bound for a specific parameter, if any.
    pub fn node_of(&self, id: ParamId) -> Option<NodeId> {
        self.pairs
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|&(_, node)| node)
    }
}

#[derive(Clone, Debug)]
pub struct ParamSet<E: Elem> {
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
    kinds: Vec<ParamKind>,
}

impl<E: Elem> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            kinds: Vec::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<E>,
        kind: ParamKind,
    ) -> Result<ParamId, ParamError> {
        let name = name.into();
        if self.names.iter().any(|n| *n == name) {
            return Err(ParamError::DuplicateName { name });
        }
        self.names.push(name);
        self.tensors.push(tensor);
        self.kinds.push(kind);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<ParamId, ParamError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(ParamId)
            .ok_or_else(|| ParamError::UnknownName { name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<E> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.tensors[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[E] {
        self.tensors[id.0].data()
    }

    pub fn set_values(&mut self, id: ParamId, values: &[E]) -> Result<(), ParamError> {
        let tensor = &mut self.tensors[id.0];
        if values.len() != tensor.numel() {
            return Err(ParamError::Length {
                name: self.names[id.0].clone(),
                expected: tensor.numel(),
                got: values.len(),
            });
        }
        tensor.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// Ids in declaration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.names.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.kinds[id.0] == ParamKind::Trainable)
            .collect()
    }

    pub fn numel_total(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copies the parameter onto a graph as an input node.
    pub fn bind(&self, graph: &mut Graph<E>, id: ParamId, requires_grad: bool) -> NodeId {
        let tensor = &self.tensors[id.0];
        graph
            .input(tensor.shape(), tensor.data().to_vec(), requires_grad)
            .expect("parameter tensor is internally consistent")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_with(names: &[&str]) -> ParamSet<f32> {
        let mut params = ParamSet::new();
        for name in names {
            params
                .add(*name, Tensor::zeros(&[2]), ParamKind::Trainable)
                .unwrap();
        }
        params
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut params = set_with(&["w"]);
        let err = params
            .add("w", Tensor::zeros(&[1]), ParamKind::Buffer)
            .unwrap_err();
        assert_eq!(err, ParamError::DuplicateName { name: "w".into() });
    }

    #[test]
    fn lookup_and_declaration_order_round_trip() {
        let params = set_with(&["a", "b", "c"]);
        assert_eq!(params.id("b").unwrap(), ParamId(1));
        assert!(params.id("missing").is_err());
        let names: Vec<&str> = params.ids().map(|id| params.name(id)).collect();
        assert_eq!(names, ["a", "b", "c"]);
    }

    #[test]
    fn trainable_filter_excludes_buffers() {
        let mut params = ParamSet::<f32>::new();
        params
            .add("w", Tensor::zeros(&[2]), ParamKind::Trainable)
            .unwrap();
        params
            .add("running_mean", Tensor::zeros(&[2]), ParamKind::Buffer)
            .unwrap();
        assert_eq!(params.trainable_ids(), vec![ParamId(0)]);
    }

    #[test]
    fn set_values_checks_length() {
        let mut params = set_with(&["w"]);
        let id = params.id("w").unwrap();
        assert!(params.set_values(id, &[1.0, 2.0]).is_ok());
        let err = params.set_values(id, &[1.0]).unwrap_err();
        assert!(matches!(err, ParamError::Length { expected: 2, got: 1, .. }));
        assert_eq!(params.values(id), &[1.0, 2.0]);
    }

    #[test]
    fn bind_copies_values_and_grad_flag() {
        let mut params = ParamSet::<f64>::new();
        let id = params
            .add("w", Tensor::new(&[2], vec![3.0, -1.0]).unwrap(), ParamKind::Trainable)
            .unwrap();
        let mut g = Graph::new();
        let live = params.bind(&mut g, id, true);
        let frozen = params.bind(&mut g, id, false);
        assert_eq!(g.data(live), &[3.0, -1.0]);
        assert!(g.requires_grad(live));
        assert!(!g.requires_grad(frozen));
    }
}
