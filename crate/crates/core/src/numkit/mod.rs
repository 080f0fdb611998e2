//! Dense tensors, a reverse-mode autodiff graph, SGD, and gradient
//! verification — the numeric substrate everything else builds on.

pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;
