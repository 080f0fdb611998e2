//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape of nodes; every operation records the
//! ids of its parents plus whatever forward context its backward rule needs
//! (pool argmaxes, normalization statistics, saved activations). Parents
//! always have smaller ids than children, so reverse creation order is a
//! valid topological order for [`Graph::backward`].
//!
//! Optional signature tracking folds the discrete choices made during a
//! forward pass (relu sign patterns, pool argmaxes) into a single hash so a
//! finite-difference checker can detect when two probe points straddle a
//! kink and skip that coordinate.

use crate::elem::Elem;
use crate::numkit::kernels::{self, axis_blocks, mm, BatchStats, ConvDims};
use crate::numkit::tensor::{shape_error, TensorError};

/// Handle to a node on the tape. Only valid for the graph that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(pub(crate) usize);

enum Op<E> {
    Input,
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    /// `x·ln x` with the 0·ln 0 := 0 convention.
    XLogX {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        factor: E,
    },
    Offset {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        dims: ConvDims,
    },
    BnTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: Vec<E>,
        inv_std: Vec<E>,
    },
    BnEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<E>,
        inv_std: Vec<E>,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Gap {
        x: NodeId,
    },
    BroadcastHw {
        x: NodeId,
    },
    ConcatCh {
        a: NodeId,
        b: NodeId,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Reshape {
        x: NodeId,
    },
    Descriptors {
        x: NodeId,
    },
    UnitRows {
        x: NodeId,
        norms: Vec<E>,
    },
    RowNormalize {
        x: NodeId,
        sums: Vec<E>,
    },
    WeightedPool {
        x: NodeId,
        wts: NodeId,
    },
    LogSoftmax {
        x: NodeId,
        axis: usize,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    SumAll {
        x: NodeId,
    },
}

struct Node<E: Elem> {
    op: Op<E>,
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
}

pub struct Graph<E: Elem> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
    track_signature: bool,
    signature: u64,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv_word(hash: u64, word: u64) -> u64 {
    (hash ^ word).wrapping_mul(FNV_PRIME)
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            track_signature: false,
            signature: FNV_OFFSET,
        }
    }

    /// Enables hashing of discrete forward-pass choices; see module docs.
    pub fn track_signature(&mut self, on: bool) {
        self.track_signature = on;
    }

    /// Hash of all discrete choices recorded so far this forward pass.
    pub fn signature(&self) -> u64 {
        self.signature
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[E] {
        &self.nodes[id.0].data
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Value of a rank-0 node.
    pub fn item(&self, id: NodeId) -> Result<E, TensorError> {
        let node = &self.nodes[id.0];
        if node.data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: node.shape.clone(),
            });
        }
        Ok(node.data[0])
    }

    /// Gradient of the last [`Graph::backward`] target w.r.t. this node, if
    /// the node participates in differentiation.
    pub fn grad(&self, id: NodeId) -> Option<&[E]> {
        self.grads.get(id.0).and_then(|slot| slot.as_deref())
    }

    pub fn ensure_finite(&self, id: NodeId, op: &'static str) -> Result<(), TensorError> {
        if self.nodes[id.0].data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    fn push(&mut self, op: Op<E>, shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn hash_bits(&mut self, tag: u64, bits: impl Iterator<Item = bool>) {
        let mut h = fnv_word(self.signature, tag);
        let mut word = 0u64;
        let mut filled = 0u32;
        for bit in bits {
            word = (word << 1) | bit as u64;
            filled += 1;
            if filled == 64 {
                h = fnv_word(h, word);
                word = 0;
                filled = 0;
            }
        }
        if filled > 0 {
            h = fnv_word(h, word);
            h = fnv_word(h, filled as u64);
        }
        self.signature = h;
    }

    pub fn input(
        &mut self,
        shape: &[usize],
        data: Vec<E>,
        requires_grad: bool,
    ) -> Result<NodeId, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(self.push(Op::Input, shape.to_vec(), data, requires_grad))
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<E>) -> Result<NodeId, TensorError> {
        self.input(shape, data, false)
    }

    pub fn scalar_const(&mut self, value: E) -> NodeId {
        self.push(Op::Input, Vec::new(), vec![value], false)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xs = &self.nodes[x.0];
        let data: Vec<E> = xs.data.iter().map(|&v| v.max(E::zero())).collect();
        let shape = xs.shape.clone();
        let req = xs.requires_grad;
        if self.track_signature {
            let bits: Vec<bool> = data.iter().map(|&v| v > E::zero()).collect();
            self.hash_bits(1, bits.into_iter());
        }
        self.push(Op::Relu { x }, shape, data, req)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let xs = &self.nodes[x.0];
        let data: Vec<E> = xs.data.iter().map(|&v| sigmoid_stable(v)).collect();
        let shape = xs.shape.clone();
        let req = xs.requires_grad;
        self.push(Op::Sigmoid { x }, shape, data, req)
    }

    /// `x ln x` elementwise, defining `0·ln 0 = 0`; negative entries are a
    /// domain error.
    pub fn xlogx(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = &self.nodes[x.0];
        let mut data = Vec::with_capacity(xs.data.len());
        for &v in &xs.data {
            if v < E::zero() {
                return Err(TensorError::Domain {
                    op: "xlogx",
                    detail: format!("negative input {v}"),
                });
            }
            data.push(if v == E::zero() { E::zero() } else { v * v.ln() });
        }
        let shape = xs.shape.clone();
        let req = xs.requires_grad;
        Ok(self.push(Op::XLogX { x }, shape, data, req))
    }

    pub fn scale(&mut self, x: NodeId, factor: E) -> NodeId {
        let xs = &self.nodes[x.0];
        let data: Vec<E> = xs.data.iter().map(|&v| v * factor).collect();
        let shape = xs.shape.clone();
        let req = xs.requires_grad;
        self.push(Op::Scale { x, factor }, shape, data, req)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(x, -E::one())
    }

    pub fn offset(&mut self, x: NodeId, amount: E) -> NodeId {
        let xs = &self.nodes[x.0];
        let data: Vec<E> = xs.data.iter().map(|&v| v + amount).collect();
        let shape = xs.shape.clone();
        let req = xs.requires_grad;
        self.push(Op::Offset { x }, shape, data, req)
    }

    fn zip_elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(E, E) -> E,
        op: Op<E>,
    ) -> Result<NodeId, TensorError> {
        let (an, bn) = (&self.nodes[a.0], &self.nodes[b.0]);
        if an.shape != bn.shape {
            return Err(shape_error(op_name, &[&an.shape, &bn.shape], "shapes must match"));
        }
        let data: Vec<E> = an
            .data
            .iter()
            .zip(&bn.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = an.shape.clone();
        let req = an.requires_grad || bn.requires_grad;
        Ok(self.push(op, shape, data, req))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (an, bn) = (&self.nodes[a.0], &self.nodes[b.0]);
        if an.shape.len() != 2 || bn.shape.len() != 2 || an.shape[1] != bn.shape[0] {
            return Err(shape_error(
                "matmul",
                &[&an.shape, &bn.shape],
                "expected [m,k]·[k,n]",
            ));
        }
        let (m, k, n) = (an.shape[0], an.shape[1], bn.shape[1]);
        let mut data = vec![E::zero(); m * n];
        mm(m, k, n, E::one(), &an.data, false, &bn.data, false, E::zero(), &mut data);
        let req = an.requires_grad || bn.requires_grad;
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], data, req))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = &self.nodes[x.0];
        if xs.shape.len() != 2 {
            return Err(shape_error("transpose", &[&xs.shape], "expected rank 2"));
        }
        let (m, n) = (xs.shape[0], xs.shape[1]);
        let mut data = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xs.data[i * n + j];
            }
        }
        let req = xs.requires_grad;
        Ok(self.push(Op::Transpose { x }, vec![n, m], data, req))
    }

    /// `y = x·wᵀ (+ b)` with `x: [m,d]`, `w: [out,d]`, `b: [out]`.
    pub fn linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId, TensorError> {
        let (xs, ws) = (&self.nodes[x.0], &self.nodes[w.0]);
        if xs.shape.len() != 2 || ws.shape.len() != 2 || xs.shape[1] != ws.shape[1] {
            return Err(shape_error(
                "linear",
                &[&xs.shape, &ws.shape],
                "expected x [m,d] and w [out,d]",
            ));
        }
        let (m, d, out) = (xs.shape[0], xs.shape[1], ws.shape[0]);
        if let Some(bid) = b {
            let bs = &self.nodes[bid.0];
            if bs.shape != [out] {
                return Err(shape_error(
                    "linear",
                    &[&ws.shape, &bs.shape],
                    "bias must be [out]",
                ));
            }
        }
        let mut data = vec![E::zero(); m * out];
        mm(
            m,
            d,
            out,
            E::one(),
            &self.nodes[x.0].data,
            false,
            &self.nodes[w.0].data,
            true,
            E::zero(),
            &mut data,
        );
        if let Some(bid) = b {
            let bias = &self.nodes[bid.0].data;
            for row in data.chunks_mut(out) {
                for (v, &bc) in row.iter_mut().zip(bias) {
                    *v += bc;
                }
            }
        }
        let req = self.req(x) || self.req(w) || b.map_or(false, |bid| self.req(bid));
        Ok(self.push(Op::Linear { x, w, b }, vec![m, out], data, req))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let dims = ConvDims::resolve(
            &self.nodes[x.0].shape,
            &self.nodes[w.0].shape,
            stride,
            pad,
        )?;
        if let Some(bid) = b {
            let bs = &self.nodes[bid.0];
            if bs.shape != [dims.co] {
                return Err(shape_error(
                    "conv2d",
                    &[&self.nodes[w.0].shape, &bs.shape],
                    "bias must be [co]",
                ));
            }
        }
        let mut data = vec![E::zero(); dims.batch * dims.co * dims.ho * dims.wo];
        kernels::conv2d_forward(
            &dims,
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            b.map(|bid| self.nodes[bid.0].data.as_slice()),
            &mut data,
        );
        let shape = vec![dims.batch, dims.co, dims.ho, dims.wo];
        let req = self.req(x) || self.req(w) || b.map_or(false, |bid| self.req(bid));
        Ok(self.push(Op::Conv2d { x, w, b, dims }, shape, data, req))
    }

    /// Batch-mode normalization: statistics come from this batch and the
    /// full backward pass flows through them. Returns the batch statistics
    /// so callers can maintain running buffers.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: E,
    ) -> Result<(NodeId, BatchStats<E>), TensorError> {
        let c = self.check_bn_shapes("batch_norm", x, gamma, beta)?;
        let shape = self.nodes[x.0].shape.clone();
        let stats = kernels::channel_stats(&shape, &self.nodes[x.0].data);
        let inv_std: Vec<E> = stats
            .var
            .iter()
            .map(|&v| E::one() / (v + eps).sqrt())
            .collect();
        let hw = shape[2] * shape[3];
        let xd = &self.nodes[x.0].data;
        let mut x_hat = vec![E::zero(); xd.len()];
        for img in 0..shape[0] {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                let (mu, inv) = (stats.mean[ch], inv_std[ch]);
                for s in 0..hw {
                    x_hat[base + s] = (xd[base + s] - mu) * inv;
                }
            }
        }
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut data = vec![E::zero(); xd.len()];
        for img in 0..shape[0] {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                let (g, b) = (gd[ch], bd[ch]);
                for s in 0..hw {
                    data[base + s] = g * x_hat[base + s] + b;
                }
            }
        }
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        let id = self.push(
            Op::BnTrain {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
            shape,
            data,
            req,
        );
        Ok((id, stats))
    }

    /// Inference-mode normalization against fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[E],
        running_var: &[E],
        eps: E,
    ) -> Result<NodeId, TensorError> {
        let c = self.check_bn_shapes("batch_norm", x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::Domain {
                op: "batch_norm",
                detail: format!(
                    "running statistics have lengths {}/{} but input has {c} channels",
                    running_mean.len(),
                    running_var.len()
                ),
            });
        }
        let shape = self.nodes[x.0].shape.clone();
        let inv_std: Vec<E> = running_var
            .iter()
            .map(|&v| E::one() / (v + eps).sqrt())
            .collect();
        let hw = shape[2] * shape[3];
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut data = vec![E::zero(); xd.len()];
        for img in 0..shape[0] {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                let (mu, inv, g, b) = (running_mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for s in 0..hw {
                    data[base + s] = g * (xd[base + s] - mu) * inv + b;
                }
            }
        }
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            Op::BnEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            shape,
            data,
            req,
        ))
    }

    fn check_bn_shapes(
        &self,
        op: &'static str,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<usize, TensorError> {
        let xs = &self.nodes[x.0];
        if xs.shape.len() != 4 {
            return Err(shape_error(op, &[&xs.shape], "expected [n,c,h,w]"));
        }
        let c = xs.shape[1];
        for id in [gamma, beta] {
            let ps = &self.nodes[id.0];
            if ps.shape != [c] {
                return Err(shape_error(
                    op,
                    &[&xs.shape, &ps.shape],
                    "scale/shift must be [c]",
                ));
            }
        }
        Ok(c)
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let mut data = Vec::new();
        let mut argmax = Vec::new();
        let (ho, wo) =
            kernels::maxpool2_forward(&shape, &self.nodes[x.0].data, &mut data, &mut argmax)?;
        if self.track_signature {
            let mut h = fnv_word(self.signature, 2);
            for &a in &argmax {
                h = fnv_word(h, a as u64);
            }
            self.signature = h;
        }
        let out_shape = vec![shape[0], shape[1], ho, wo];
        let req = self.req(x);
        Ok(self.push(Op::MaxPool2 { x, argmax }, out_shape, data, req))
    }

    /// Global average pool `[n,c,h,w] → [n,c]`.
    pub fn gap(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = &self.nodes[x.0];
        if xs.shape.len() != 4 {
            return Err(shape_error("gap", &[&xs.shape], "expected [n,c,h,w]"));
        }
        let (n, c, hw) = (xs.shape[0], xs.shape[1], xs.shape[2] * xs.shape[3]);
        let inv = E::one() / E::lit(hw as f64);
        let mut data = Vec::with_capacity(n * c);
        for plane in xs.data.chunks(hw) {
            data.push(plane.iter().copied().sum::<E>() * inv);
        }
        let req = xs.requires_grad;
        Ok(self.push(Op::Gap { x }, vec![n, c], data, req))
    }

    /// Repeats `[n,c]` over an `h×w` grid, producing `[n,c,h,w]`.
    pub fn broadcast_hw(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId, TensorError> {
        let xs = &self.nodes[x.0];
        if xs.shape.len() != 2 {
            return Err(shape_error("broadcast_hw", &[&xs.shape], "expected [n,c]"));
        }
        let (n, c, hw) = (xs.shape[0], xs.shape[1], h * w);
        let mut data = Vec::with_capacity(n * c * hw);
        for &v in &xs.data {
            data.extend(std::iter::repeat(v).take(hw));
        }
        let req = xs.requires_grad;
        Ok(self.push(Op::BroadcastHw { x }, vec![n, c, h, w], data, req))
    }

    pub fn concat_ch(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (an, bn) = (&self.nodes[a.0], &self.nodes[b.0]);
        if an.shape.len() != 4
            || bn.shape.len() != 4
            || an.shape[0] != bn.shape[0]
            || an.shape[2..] != bn.shape[2..]
        {
            return Err(shape_error(
                "concat_ch",
                &[&an.shape, &bn.shape],
                "expected [n,·,h,w] pairs agreeing outside the channel axis",
            ));
        }
        let (n, ca, cb) = (an.shape[0], an.shape[1], bn.shape[1]);
        let hw = an.shape[2] * an.shape[3];
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for img in 0..n {
            data.extend_from_slice(&an.data[img * ca * hw..(img + 1) * ca * hw]);
            data.extend_from_slice(&bn.data[img * cb * hw..(img + 1) * cb * hw]);
        }
        let shape = vec![n, ca + cb, an.shape[2], an.shape[3]];
        let req = an.requires_grad || bn.requires_grad;
        Ok(self.push(Op::ConcatCh { a, b }, shape, data, req))
    }

    pub fn slice_rows(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let xs = &self.nodes[x.0];
        if xs.shape.len() != 2 || len == 0 || start + len > xs.shape[0] {
            return Err(shape_error(
                "slice_rows",
                &[&xs.shape],
                format!("rows {start}..{} out of range", start + len),
            ));
        }
        let d = xs.shape[1];
        let data = xs.data[start * d..(start + len) * d].to_vec();
        let req = xs.requires_grad;
        Ok(self.push(Op::SliceRows { x, start }, vec![len, d], data, req))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let xs = &self.nodes[x.0];
        if shape.iter().product::<usize>() != xs.data.len() {
            return Err(shape_error(
                "reshape",
                &[&xs.shape, shape],
                "element counts differ",
            ));
        }
        let data = xs.data.clone();
        let req = xs.requires_grad;
        Ok(self.push(Op::Reshape { x }, shape.to_vec(), data, req))
    }

    /// Flattens a feature map into its local descriptors: `[n,d,h,w] →
    /// [n·h·w, d]`, sites in row-major order within each image.
    pub fn descriptors(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = &self.nodes[x.0];
        if xs.shape.len() != 4 {
            return Err(shape_error("descriptors", &[&xs.shape], "expected [n,d,h,w]"));
        }
        let (n, d, hw) = (xs.shape[0], xs.shape[1], xs.shape[2] * xs.shape[3]);
        let mut data = vec![E::zero(); n * hw * d];
        for img in 0..n {
            for ch in 0..d {
                let src = &xs.data[(img * d + ch) * hw..(img * d + ch + 1) * hw];
                for (s, &v) in src.iter().enumerate() {
                    data[(img * hw + s) * d + ch] = v;
                }
            }
        }
        let req = xs.requires_grad;
        Ok(self.push(Op::Descriptors { x }, vec![n * hw, d], data, req))
    }

    /// L2-normalizes each row of `[t,d]`; a zero row is a degenerate
    /// centroid error.
    pub fn unit_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = &self.nodes[x.0];
        if xs.shape.len() != 2 {
            return Err(shape_error("unit_rows", &[&xs.shape], "expected [t,d]"));
        }
        let d = xs.shape[1];
        let mut norms = Vec::with_capacity(xs.shape[0]);
        let mut data = Vec::with_capacity(xs.data.len());
        for (row, chunk) in xs.data.chunks(d).enumerate() {
            let norm = chunk.iter().map(|&v| v * v).sum::<E>().sqrt();
            if norm == E::zero() {
                return Err(TensorError::DegenerateCentroid { row });
            }
            norms.push(norm);
            data.extend(chunk.iter().map(|&v| v / norm));
        }
        let shape = xs.shape.clone();
        let req = xs.requires_grad;
        Ok(self.push(Op::UnitRows { x, norms }, shape, data, req))
    }

    /// Divides each row of `[n,r]` by its sum; rows must sum to a positive
    /// value.
    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = &self.nodes[x.0];
        if xs.shape.len() != 2 {
            return Err(shape_error("row_normalize", &[&xs.shape], "expected [n,r]"));
        }
        let r = xs.shape[1];
        let mut sums = Vec::with_capacity(xs.shape[0]);
        let mut data = Vec::with_capacity(xs.data.len());
        for (row, chunk) in xs.data.chunks(r).enumerate() {
            let sum = chunk.iter().copied().sum::<E>();
            if !(sum > E::zero()) {
                return Err(TensorError::Domain {
                    op: "row_normalize",
                    detail: format!("row {row} sums to {sum}, expected positive"),
                });
            }
            sums.push(sum);
            data.extend(chunk.iter().map(|&v| v / sum));
        }
        let shape = xs.shape.clone();
        let req = xs.requires_grad;
        Ok(self.push(Op::RowNormalize { x, sums }, shape, data, req))
    }

    /// Pools descriptors with per-site weights: `x: [n,d,h,w]`, `wts:
    /// [n,h·w]` → `[n,d]` with `y[i,c] = Σ_s wts[i,s]·x[i,c,s]`.
    pub fn weighted_pool(&mut self, x: NodeId, wts: NodeId) -> Result<NodeId, TensorError> {
        let (xs, ws) = (&self.nodes[x.0], &self.nodes[wts.0]);
        if xs.shape.len() != 4 {
            return Err(shape_error("weighted_pool", &[&xs.shape], "expected [n,d,h,w]"));
        }
        let (n, d, hw) = (xs.shape[0], xs.shape[1], xs.shape[2] * xs.shape[3]);
        if ws.shape != [n, hw] {
            return Err(shape_error(
                "weighted_pool",
                &[&xs.shape, &ws.shape],
                "weights must be [n, h·w]",
            ));
        }
        let mut data = vec![E::zero(); n * d];
        for img in 0..n {
            let w_row = &ws.data[img * hw..(img + 1) * hw];
            for ch in 0..d {
                let plane = &xs.data[(img * d + ch) * hw..(img * d + ch + 1) * hw];
                data[img * d + ch] = plane
                    .iter()
                    .zip(w_row)
                    .map(|(&v, &wv)| v * wv)
                    .sum();
            }
        }
        let req = xs.requires_grad || ws.requires_grad;
        Ok(self.push(Op::WeightedPool { x, wts }, vec![n, d], data, req))
    }

    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let (shape, data) = self.lane_softmax("log_softmax", x, axis, true)?;
        let req = self.req(x);
        Ok(self.push(Op::LogSoftmax { x, axis }, shape, data, req))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let (shape, data) = self.lane_softmax("softmax", x, axis, false)?;
        let req = self.req(x);
        Ok(self.push(Op::Softmax { x, axis }, shape, data, req))
    }

    fn lane_softmax(
        &self,
        op: &'static str,
        x: NodeId,
        axis: usize,
        log: bool,
    ) -> Result<(Vec<usize>, Vec<E>), TensorError> {
        let xs = &self.nodes[x.0];
        if axis >= xs.shape.len() {
            return Err(shape_error(
                op,
                &[&xs.shape],
                format!("axis {axis} out of range"),
            ));
        }
        let (outer, lane, inner) = axis_blocks(&xs.shape, axis);
        let mut data = xs.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * lane + l) * inner + i;
                let mut max = data[at(0)];
                for l in 1..lane {
                    max = max.max(data[at(l)]);
                }
                let mut denom = E::zero();
                for l in 0..lane {
                    denom += (data[at(l)] - max).exp();
                }
                if log {
                    let log_denom = denom.ln();
                    for l in 0..lane {
                        let idx = at(l);
                        data[idx] = data[idx] - max - log_denom;
                    }
                } else {
                    for l in 0..lane {
                        let idx = at(l);
                        data[idx] = (data[idx] - max).exp() / denom;
                    }
                }
            }
        }
        Ok((xs.shape.clone(), data))
    }

    /// Sums every element into a rank-0 scalar.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let xs = &self.nodes[x.0];
        let total = xs.data.iter().copied().sum::<E>();
        let req = xs.requires_grad;
        self.push(Op::SumAll { x }, Vec::new(), vec![total], req)
    }

    /// Mean of every element, composed as `sum_all` then `scale`.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let inv = E::one() / E::lit(self.nodes[x.0].data.len() as f64);
        let s = self.sum_all(x);
        self.scale(s, inv)
    }

    /// Reverse-mode sweep from a finite scalar `loss`. Gradients land in
    /// per-node buffers readable via [`Graph::grad`]; nodes outside the
    /// differentiable cone hold `None`.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let node = &self.nodes[loss.0];
        if node.data.len() != 1 || !node.shape.is_empty() {
            return Err(TensorError::NonScalarLoss {
                shape: node.shape.clone(),
            });
        }
        if !node.data[0].is_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        self.grads = Vec::new();
        self.grads.resize_with(self.nodes.len(), || None);
        if !node.requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.dispatch(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn dispatch(&mut self, i: usize, dy: &[E]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        macro_rules! with_grad {
            ($p:expr, |$dx:ident| $body:block) => {
                if let Some($dx) = acc_grad(grads, nodes, $p) {
                    $body
                }
            };
        }
        match &nodes[i].op {
            Op::Input => {}
            Op::Relu { x } => with_grad!(*x, |dx| {
                for (slot, (&g, &v)) in dx.iter_mut().zip(dy.iter().zip(&nodes[x.0].data)) {
                    if v > E::zero() {
                        *slot += g;
                    }
                }
            }),
            Op::Sigmoid { x } => with_grad!(*x, |dx| {
                for (slot, (&g, &y)) in dx.iter_mut().zip(dy.iter().zip(&nodes[i].data)) {
                    *slot += g * y * (E::one() - y);
                }
            }),
            Op::XLogX { x } => with_grad!(*x, |dx| {
                for (slot, (&g, &v)) in dx.iter_mut().zip(dy.iter().zip(&nodes[x.0].data)) {
                    if v > E::zero() {
                        *slot += g * (v.ln() + E::one());
                    }
                }
            }),
            Op::Scale { x, factor } => {
                let f = *factor;
                with_grad!(*x, |dx| {
                    for (slot, &g) in dx.iter_mut().zip(dy) {
                        *slot += g * f;
                    }
                })
            }
            Op::Offset { x } => with_grad!(*x, |dx| {
                for (slot, &g) in dx.iter_mut().zip(dy) {
                    *slot += g;
                }
            }),
            Op::Add { a, b } => {
                for p in [*a, *b] {
                    with_grad!(p, |dx| {
                        for (slot, &g) in dx.iter_mut().zip(dy) {
                            *slot += g;
                        }
                    });
                }
            }
            Op::Sub { a, b } => {
                with_grad!(*a, |dx| {
                    for (slot, &g) in dx.iter_mut().zip(dy) {
                        *slot += g;
                    }
                });
                with_grad!(*b, |dx| {
                    for (slot, &g) in dx.iter_mut().zip(dy) {
                        *slot -= g;
                    }
                });
            }
            Op::Mul { a, b } => {
                with_grad!(*a, |dx| {
                    for (slot, (&g, &bv)) in dx.iter_mut().zip(dy.iter().zip(&nodes[b.0].data)) {
                        *slot += g * bv;
                    }
                });
                with_grad!(*b, |dx| {
                    for (slot, (&g, &av)) in dx.iter_mut().zip(dy.iter().zip(&nodes[a.0].data)) {
                        *slot += g * av;
                    }
                });
            }
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                with_grad!(*a, |da| {
                    mm(m, n, k, E::one(), dy, false, &nodes[b.0].data, true, E::one(), da);
                });
                with_grad!(*b, |db| {
                    mm(k, m, n, E::one(), &nodes[a.0].data, true, dy, false, E::one(), db);
                });
            }
            Op::Transpose { x } => {
                let (n, m) = (nodes[i].shape[0], nodes[i].shape[1]);
                with_grad!(*x, |dx| {
                    for r in 0..n {
                        for c in 0..m {
                            dx[c * n + r] += dy[r * m + c];
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (m, d) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let out = nodes[w.0].shape[0];
                with_grad!(*x, |dx| {
                    mm(m, out, d, E::one(), dy, false, &nodes[w.0].data, false, E::one(), dx);
                });
                with_grad!(*w, |dw| {
                    mm(out, m, d, E::one(), dy, true, &nodes[x.0].data, false, E::one(), dw);
                });
                if let Some(bid) = *b {
                    with_grad!(bid, |db| {
                        for row in dy.chunks(out) {
                            for (slot, &g) in db.iter_mut().zip(row) {
                                *slot += g;
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let dims = *dims;
                let mut dx_tmp = nodes[x.0]
                    .requires_grad
                    .then(|| vec![E::zero(); nodes[x.0].data.len()]);
                let mut dw_tmp = nodes[w.0]
                    .requires_grad
                    .then(|| vec![E::zero(); nodes[w.0].data.len()]);
                kernels::conv2d_backward(
                    &dims,
                    &nodes[x.0].data,
                    &nodes[w.0].data,
                    dy,
                    dx_tmp.as_deref_mut(),
                    dw_tmp.as_deref_mut(),
                    None,
                );
                if let Some(tmp) = dx_tmp {
                    with_grad!(*x, |dx| {
                        for (slot, &g) in dx.iter_mut().zip(&tmp) {
                            *slot += g;
                        }
                    });
                }
                if let Some(tmp) = dw_tmp {
                    with_grad!(*w, |dw| {
                        for (slot, &g) in dw.iter_mut().zip(&tmp) {
                            *slot += g;
                        }
                    });
                }
                if let Some(bid) = *b {
                    with_grad!(bid, |db| {
                        let sites = dims.ho * dims.wo;
                        for img_dy in dy.chunks(dims.co * sites) {
                            for (c, slot) in db.iter_mut().enumerate() {
                                *slot += img_dy[c * sites..(c + 1) * sites]
                                    .iter()
                                    .copied()
                                    .sum();
                            }
                        }
                    });
                }
            }
            Op::BnTrain {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => {
                let shape = &nodes[i].shape;
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let m = E::lit((n * hw) as f64);
                let mut sum_dy = vec![E::zero(); c];
                let mut sum_dy_xhat = vec![E::zero(); c];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * hw;
                        for s in 0..hw {
                            sum_dy[ch] += dy[base + s];
                            sum_dy_xhat[ch] += dy[base + s] * x_hat[base + s];
                        }
                    }
                }
                with_grad!(*gamma, |dg| {
                    for (slot, &v) in dg.iter_mut().zip(&sum_dy_xhat) {
                        *slot += v;
                    }
                });
                with_grad!(*beta, |db| {
                    for (slot, &v) in db.iter_mut().zip(&sum_dy) {
                        *slot += v;
                    }
                });
                let gd = &nodes[gamma.0].data;
                with_grad!(*x, |dx| {
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * hw;
                            let coef = gd[ch] * inv_std[ch];
                            let (s1, s2) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
                            for s in 0..hw {
                                dx[base + s] +=
                                    coef * (dy[base + s] - s1 - x_hat[base + s] * s2);
                            }
                        }
                    }
                });
            }
            Op::BnEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let shape = &nodes[i].shape;
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let xd = &nodes[x.0].data;
                let gd = &nodes[gamma.0].data;
                with_grad!(*x, |dx| {
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * hw;
                            let coef = gd[ch] * inv_std[ch];
                            for s in 0..hw {
                                dx[base + s] += dy[base + s] * coef;
                            }
                        }
                    }
                });
                with_grad!(*gamma, |dg| {
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * hw;
                            for s in 0..hw {
                                dg[ch] += dy[base + s] * (xd[base + s] - mean[ch]) * inv_std[ch];
                            }
                        }
                    }
                });
                with_grad!(*beta, |db| {
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * hw;
                            for s in 0..hw {
                                db[ch] += dy[base + s];
                            }
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => with_grad!(*x, |dx| {
                for (&idx, &g) in argmax.iter().zip(dy) {
                    dx[idx as usize] += g;
                }
            }),
            Op::Gap { x } => {
                let hw = nodes[x.0].shape[2] * nodes[x.0].shape[3];
                let inv = E::one() / E::lit(hw as f64);
                with_grad!(*x, |dx| {
                    for (plane, &g) in dx.chunks_mut(hw).zip(dy) {
                        let gv = g * inv;
                        for slot in plane {
                            *slot += gv;
                        }
                    }
                });
            }
            Op::BroadcastHw { x } => {
                let hw = nodes[i].shape[2] * nodes[i].shape[3];
                with_grad!(*x, |dx| {
                    for (slot, plane) in dx.iter_mut().zip(dy.chunks(hw)) {
                        *slot += plane.iter().copied().sum();
                    }
                });
            }
            Op::ConcatCh { a, b } => {
                let (n, ca, cb) = (nodes[i].shape[0], nodes[a.0].shape[1], nodes[b.0].shape[1]);
                let hw = nodes[i].shape[2] * nodes[i].shape[3];
                let img_out = (ca + cb) * hw;
                with_grad!(*a, |da| {
                    for img in 0..n {
                        let src = &dy[img * img_out..img * img_out + ca * hw];
                        for (slot, &g) in da[img * ca * hw..(img + 1) * ca * hw]
                            .iter_mut()
                            .zip(src)
                        {
                            *slot += g;
                        }
                    }
                });
                with_grad!(*b, |db| {
                    for img in 0..n {
                        let src = &dy[img * img_out + ca * hw..(img + 1) * img_out];
                        for (slot, &g) in db[img * cb * hw..(img + 1) * cb * hw]
                            .iter_mut()
                            .zip(src)
                        {
                            *slot += g;
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let d = nodes[x.0].shape[1];
                let offset = start * d;
                with_grad!(*x, |dx| {
                    for (slot, &g) in dx[offset..offset + dy.len()].iter_mut().zip(dy) {
                        *slot += g;
                    }
                });
            }
            Op::Reshape { x } => with_grad!(*x, |dx| {
                for (slot, &g) in dx.iter_mut().zip(dy) {
                    *slot += g;
                }
            }),
            Op::Descriptors { x } => {
                let (d, hw) = (nodes[x.0].shape[1], nodes[x.0].shape[2] * nodes[x.0].shape[3]);
                let n = nodes[x.0].shape[0];
                with_grad!(*x, |dx| {
                    for img in 0..n {
                        for ch in 0..d {
                            let base = (img * d + ch) * hw;
                            for s in 0..hw {
                                dx[base + s] += dy[(img * hw + s) * d + ch];
                            }
                        }
                    }
                });
            }
            Op::UnitRows { x, norms } => {
                let d = nodes[i].shape[1];
                let yd = &nodes[i].data;
                with_grad!(*x, |dx| {
                    for (row, norm) in norms.iter().enumerate() {
                        let y_row = &yd[row * d..(row + 1) * d];
                        let g_row = &dy[row * d..(row + 1) * d];
                        let dot = y_row
                            .iter()
                            .zip(g_row)
                            .map(|(&y, &g)| y * g)
                            .sum::<E>();
                        for ((slot, &g), &y) in
                            dx[row * d..(row + 1) * d].iter_mut().zip(g_row).zip(y_row)
                        {
                            *slot += (g - y * dot) / *norm;
                        }
                    }
                });
            }
            Op::RowNormalize { x, sums } => {
                let r = nodes[i].shape[1];
                let yd = &nodes[i].data;
                with_grad!(*x, |dx| {
                    for (row, sum) in sums.iter().enumerate() {
                        let y_row = &yd[row * r..(row + 1) * r];
                        let g_row = &dy[row * r..(row + 1) * r];
                        let dot = y_row
                            .iter()
                            .zip(g_row)
                            .map(|(&y, &g)| y * g)
                            .sum::<E>();
                        for (slot, &g) in dx[row * r..(row + 1) * r].iter_mut().zip(g_row) {
                            *slot += (g - dot) / *sum;
                        }
                    }
                });
            }
            Op::WeightedPool { x, wts } => {
                let (n, d, hw) = (
                    nodes[x.0].shape[0],
                    nodes[x.0].shape[1],
                    nodes[x.0].shape[2] * nodes[x.0].shape[3],
                );
                with_grad!(*x, |dx| {
                    let wd = &nodes[wts.0].data;
                    for img in 0..n {
                        let w_row = &wd[img * hw..(img + 1) * hw];
                        for ch in 0..d {
                            let g = dy[img * d + ch];
                            let plane = &mut dx[(img * d + ch) * hw..(img * d + ch + 1) * hw];
                            for (slot, &wv) in plane.iter_mut().zip(w_row) {
                                *slot += g * wv;
                            }
                        }
                    }
                });
                with_grad!(*wts, |dw| {
                    let xd = &nodes[x.0].data;
                    for img in 0..n {
                        for ch in 0..d {
                            let g = dy[img * d + ch];
                            let plane = &xd[(img * d + ch) * hw..(img * d + ch + 1) * hw];
                            for (slot, &v) in dw[img * hw..(img + 1) * hw].iter_mut().zip(plane)
                            {
                                *slot += g * v;
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, lane, inner) = axis_blocks(&nodes[i].shape, *axis);
                let yd = &nodes[i].data;
                with_grad!(*x, |dx| {
                    for o in 0..outer {
                        for inn in 0..inner {
                            let at = |l: usize| (o * lane + l) * inner + inn;
                            let mut lane_sum = E::zero();
                            for l in 0..lane {
                                lane_sum += dy[at(l)];
                            }
                            for l in 0..lane {
                                let idx = at(l);
                                dx[idx] += dy[idx] - yd[idx].exp() * lane_sum;
                            }
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, lane, inner) = axis_blocks(&nodes[i].shape, *axis);
                let yd = &nodes[i].data;
                with_grad!(*x, |dx| {
                    for o in 0..outer {
                        for inn in 0..inner {
                            let at = |l: usize| (o * lane + l) * inner + inn;
                            let mut dot = E::zero();
                            for l in 0..lane {
                                dot += dy[at(l)] * yd[at(l)];
                            }
                            for l in 0..lane {
                                let idx = at(l);
                                dx[idx] += yd[idx] * (dy[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                let g = dy[0];
                with_grad!(*x, |dx| {
                    for slot in dx {
                        *slot += g;
                    }
                });
            }
        }
    }
}

fn acc_grad<'g, E: Elem>(
    grads: &'g mut [Option<Vec<E>>],
    nodes: &[Node<E>],
    p: NodeId,
) -> Option<&'g mut [E]> {
    if !nodes[p.0].requires_grad {
        return None;
    }
    let buf = grads[p.0].get_or_insert_with(|| vec![E::zero(); nodes[p.0].data.len()]);
    Some(buf.as_mut_slice())
}

pub(crate) fn sigmoid_stable<E: Elem>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn input64(g: &mut Graph<f64>, shape: &[usize], data: &[f64]) -> NodeId {
        g.input(shape, data.to_vec(), true).unwrap()
    }

    #[test]
    fn square_of_vector_backpropagates_twice_the_input() {
        let mut g = Graph::<f64>::new();
        let w = input64(&mut g, &[2], &[1.0, 2.0]);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn nll_of_uniform_two_logits_splits_gradient_evenly() {
        let mut g = Graph::<f64>::new();
        let logits = input64(&mut g, &[1, 2], &[0.0, 0.0]);
        let lsm = g.log_softmax(logits, 1).unwrap();
        let picked = g
            .constant(&[1, 2], vec![1.0, 0.0])
            .and_then(|t| g.mul(lsm, t))
            .unwrap();
        let s = g.sum_all(picked);
        let loss = g.neg(s);
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        assert_relative_eq!(grad[0], -0.5, max_relative = 1e-12);
        assert_relative_eq!(grad[1], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn detached_copy_blocks_gradient_flow() {
        let mut g = Graph::<f64>::new();
        let x = input64(&mut g, &[2], &[3.0, -1.5]);
        let detached = g.constant(&[2], g.data(x).to_vec()).unwrap();
        let prod = g.mul(x, detached).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        assert!(g.grad(detached).is_none());
        assert_eq!(g.grad(x).unwrap(), &[3.0, -1.5]);
    }

    #[test]
    fn backward_requires_rank_zero_scalar() {
        let mut g = Graph::<f64>::new();
        let x = input64(&mut g, &[2], &[1.0, 2.0]);
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn backward_rejects_non_finite_loss() {
        let mut g = Graph::<f64>::new();
        let x = input64(&mut g, &[], &[f64::INFINITY]);
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax_only() {
        let mut g = Graph::<f64>::new();
        let x = input64(&mut g, &[1, 1, 2, 2], &[1.0, 7.0, 3.0, 5.0]);
        let y = g.max_pool2(x).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn slice_rows_scatters_gradient_into_range() {
        let mut g = Graph::<f64>::new();
        let x = input64(&mut g, &[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mid = g.slice_rows(x, 1, 1).unwrap();
        assert_eq!(g.data(mid), &[3.0, 4.0]);
        let loss = g.sum_all(mid);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_ch_splits_gradient_between_parents() {
        let mut g = Graph::<f64>::new();
        let a = input64(&mut g, &[1, 1, 1, 2], &[1.0, 2.0]);
        let b = input64(&mut g, &[1, 2, 1, 2], &[3.0, 4.0, 5.0, 6.0]);
        let cat = g.concat_ch(a, b).unwrap();
        assert_eq!(g.shape(cat), &[1, 3, 1, 2]);
        assert_eq!(g.data(cat), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let doubled = g.scale(cat, 2.0);
        let loss = g.sum_all(doubled);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[2.0, 2.0]);
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn descriptors_transposes_channel_and_site_axes() {
        let mut g = Graph::<f64>::new();
        // Two channels over a 1x2 grid: sites hold columns (1,3) and (2,4).
        let x = input64(&mut g, &[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let d = g.descriptors(x).unwrap();
        assert_eq!(g.shape(d), &[2, 2]);
        assert_eq!(g.data(d), &[1.0, 3.0, 2.0, 4.0]);
        let w = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let prod = g.mul(d, w).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn unit_rows_gradient_matches_hand_derivation() {
        let mut g = Graph::<f64>::new();
        let x = input64(&mut g, &[1, 2], &[3.0, 4.0]);
        let y = g.unit_rows(x).unwrap();
        assert_relative_eq!(g.data(y)[0], 0.6, max_relative = 1e-12);
        let mask = g.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
        let picked = g.mul(y, mask).unwrap();
        let loss = g.sum_all(picked);
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        assert_relative_eq!(grad[0], 0.128, max_relative = 1e-12);
        assert_relative_eq!(grad[1], -0.096, max_relative = 1e-12);
    }

    #[test]
    fn unit_rows_rejects_zero_row() {
        let mut g = Graph::<f64>::new();
        let x = input64(&mut g, &[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let err = g.unit_rows(x).unwrap_err();
        assert!(matches!(err, TensorError::DegenerateCentroid { row: 1 }));
    }

    #[test]
    fn row_normalize_gradient_matches_hand_derivation() {
        let mut g = Graph::<f64>::new();
        let x = input64(&mut g, &[1, 2], &[1.0, 2.0]);
        let y = g.row_normalize(x).unwrap();
        assert_relative_eq!(g.data(y)[1], 2.0 / 3.0, max_relative = 1e-12);
        let mask = g.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
        let picked = g.mul(y, mask).unwrap();
        let loss = g.sum_all(picked);
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        assert_relative_eq!(grad[0], 2.0 / 9.0, max_relative = 1e-12);
        assert_relative_eq!(grad[1], -1.0 / 9.0, max_relative = 1e-12);
    }

    #[test]
    fn row_normalize_rejects_nonpositive_rows() {
        let mut g = Graph::<f64>::new();
        let x = input64(&mut g, &[1, 2], &[1.0, -1.0]);
        assert!(matches!(
            g.row_normalize(x).unwrap_err(),
            TensorError::Domain { op: "row_normalize", .. }
        ));
    }

    #[test]
    fn weighted_pool_blends_descriptor_columns() {
        let mut g = Graph::<f64>::new();
        // Channel 0 holds (4,0) over the two sites, channel 1 holds (0,4).
        let x = input64(&mut g, &[1, 2, 1, 2], &[4.0, 0.0, 0.0, 4.0]);
        let wts = input64(&mut g, &[1, 2], &[0.75, 0.25]);
        let y = g.weighted_pool(x, wts).unwrap();
        assert_eq!(g.data(y), &[3.0, 1.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(wts).unwrap(), &[4.0, 4.0]);
        assert_eq!(g.grad(x).unwrap(), &[0.75, 0.25, 0.75, 0.25]);
    }

    #[test]
    fn gap_averages_and_broadcast_reverses_it() {
        let mut g = Graph::<f64>::new();
        let x = input64(&mut g, &[1, 1, 2, 2], &[1.0, 2.0, 3.0, 6.0]);
        let pooled = g.gap(x).unwrap();
        assert_eq!(g.data(pooled), &[3.0]);
        let wide = g.broadcast_hw(pooled, 2, 2).unwrap();
        assert_eq!(g.data(wide), &[3.0, 3.0, 3.0, 3.0]);
        let loss = g.sum_all(wide);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn linear_matches_matmul_with_transpose() {
        let mut g = Graph::<f64>::new();
        let x = input64(&mut g, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = input64(&mut g, &[2, 3], &[1.0, 0.0, -1.0, 0.5, 0.5, 0.5]);
        let b = input64(&mut g, &[2], &[10.0, -10.0]);
        let y = g.linear(x, w, Some(b)).unwrap();
        let wt = g.transpose(w).unwrap();
        let y2 = g.matmul(x, wt).unwrap();
        for (s, (&a, &bv)) in g.data(y).iter().zip(g.data(y2)).enumerate() {
            let bias = if s % 2 == 0 { 10.0 } else { -10.0 };
            assert_relative_eq!(a, bv + bias, max_relative = 1e-12);
        }
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0]);
        // dW row c = sum of x rows; dX row m = sum of w rows.
        assert_eq!(g.grad(w).unwrap(), &[5.0, 7.0, 9.0, 5.0, 7.0, 9.0]);
        assert_eq!(g.grad(x).unwrap(), &[1.5, 0.5, -0.5, 1.5, 0.5, -0.5]);
    }

    #[test]
    fn batch_norm_train_standardizes_batch() {
        let mut g = Graph::<f64>::new();
        let x = input64(&mut g, &[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let gamma = input64(&mut g, &[1], &[1.0]);
        let beta = input64(&mut g, &[1], &[0.0]);
        let (y, stats) = g.batch_norm_train(x, gamma, beta, 0.0).unwrap();
        assert_relative_eq!(stats.mean[0], 2.5, max_relative = 1e-12);
        assert_relative_eq!(stats.var[0], 1.25, max_relative = 1e-12);
        let yd = g.data(y);
        let mean: f64 = yd.iter().sum::<f64>() / 4.0;
        let var: f64 = yd.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert_relative_eq!(mean, 0.0, epsilon = 1e-12);
        assert_relative_eq!(var, 1.0, max_relative = 1e-9);
        // Standardized output is invariant to the batch mean, so a constant
        // upstream gradient must cancel to zero on x.
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        for &v in g.grad(x).unwrap() {
            assert_relative_eq!(v, 0.0, epsilon = 1e-9);
        }
        assert_eq!(g.grad(beta).unwrap(), &[4.0]);
    }

    #[test]
    fn batch_norm_eval_is_affine_in_running_stats() {
        let mut g = Graph::<f64>::new();
        let x = input64(&mut g, &[1, 1, 1, 2], &[3.0, 5.0]);
        let gamma = input64(&mut g, &[1], &[2.0]);
        let beta = input64(&mut g, &[1], &[1.0]);
        let y = g
            .batch_norm_eval(x, gamma, beta, &[1.0], &[3.0], 1.0)
            .unwrap();
        // inv_std = 1/sqrt(3+1) = 0.5, so y = 2·(x−1)·0.5 + 1 = x.
        assert_eq!(g.data(y), &[3.0, 5.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(beta).unwrap(), &[2.0]);
        assert_eq!(g.grad(gamma).unwrap(), &[3.0]);
    }

    #[test]
    fn softmax_and_log_softmax_agree() {
        let mut g = Graph::<f64>::new();
        let x = input64(&mut g, &[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let sm = g.softmax(x, 1).unwrap();
        let lsm = g.log_softmax(x, 1).unwrap();
        for (&p, &lp) in g.data(sm).iter().zip(g.data(lsm)) {
            assert_relative_eq!(p.ln(), lp, max_relative = 1e-12);
        }
        for row in g.data(sm).chunks(3) {
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn log_softmax_is_shift_invariant() {
        let mut g = Graph::<f64>::new();
        let x = input64(&mut g, &[1, 3], &[1000.0, 1001.0, 1002.0]);
        let lsm = g.log_softmax(x, 1).unwrap();
        let y = input64(&mut g, &[1, 3], &[0.0, 1.0, 2.0]);
        let lsm2 = g.log_softmax(y, 1).unwrap();
        for (&a, &b) in g.data(lsm).iter().zip(g.data(lsm2)) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn xlogx_handles_zero_and_rejects_negative() {
        let mut g = Graph::<f64>::new();
        let x = input64(&mut g, &[3], &[0.0, 1.0, 0.5]);
        let y = g.xlogx(x).unwrap();
        assert_eq!(g.data(y)[0], 0.0);
        assert_eq!(g.data(y)[1], 0.0);
        assert_relative_eq!(g.data(y)[2], 0.5 * 0.5f64.ln(), max_relative = 1e-12);
        let bad = input64(&mut g, &[1], &[-0.1]);
        assert!(matches!(
            g.xlogx(bad).unwrap_err(),
            TensorError::Domain { op: "xlogx", .. }
        ));
    }

    #[test]
    fn signature_distinguishes_relu_patterns() {
        let run = |inputs: &[f64]| {
            let mut g = Graph::<f64>::new();
            g.track_signature(true);
            let x = g.input(&[3], inputs.to_vec(), true).unwrap();
            let _ = g.relu(x);
            g.signature()
        };
        assert_eq!(run(&[1.0, -1.0, 2.0]), run(&[5.0, -3.0, 0.5]));
        assert_ne!(run(&[1.0, -1.0, 2.0]), run(&[1.0, 1.0, 2.0]));
    }

    #[test]
    fn signature_distinguishes_pool_argmax_switches() {
        let run = |inputs: &[f64]| {
            let mut g = Graph::<f64>::new();
            g.track_signature(true);
            let x = g.input(&[1, 1, 2, 2], inputs.to_vec(), true).unwrap();
            let _ = g.max_pool2(x).unwrap();
            g.signature()
        };
        assert_eq!(run(&[9.0, 1.0, 1.0, 1.0]), run(&[7.0, 2.0, 0.0, 1.0]));
        assert_ne!(run(&[9.0, 1.0, 1.0, 1.0]), run(&[1.0, 9.0, 1.0, 1.0]));
    }

    #[test]
    fn shared_parent_accumulates_product_rule_twice() {
        let mut g = Graph::<f64>::new();
        let x = input64(&mut g, &[1], &[3.0]);
        let sq = g.mul(x, x).unwrap();
        let cube = g.mul(sq, x).unwrap();
        let loss = g.sum_all(cube);
        g.backward(loss).unwrap();
        assert_relative_eq!(g.grad(x).unwrap()[0], 27.0, max_relative = 1e-12);
    }

    #[test]
    fn conv_gradients_match_hand_case() {
        // y = w * x at a single site: dy/dw = x, dy/dx = w.
        let mut g = Graph::<f64>::new();
        let x = input64(&mut g, &[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = input64(&mut g, &[1, 1, 2, 2], &[0.5, -0.5, 1.0, 2.0]);
        let b = input64(&mut g, &[1], &[0.25]);
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_relative_eq!(g.data(y)[0], 0.5 - 1.0 + 3.0 + 8.0 + 0.25, max_relative = 1e-12);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.grad(x).unwrap(), &[0.5, -0.5, 1.0, 2.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0]);
    }
}
