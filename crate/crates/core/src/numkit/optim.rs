//! Stochastic gradient descent with momentum, decoupled gradient
//! accumulation, and stepwise learning-rate decay.
//!
//! The update keeps gradients in the velocity (not pre-scaled by the
//! learning rate):
//!
//! ```text
//! g ← grad + weight_decay·w        (decay taken at the base iterate)
//! v ← momentum·v + g
//! w ← w − lr·v
//! ```
//!
//! Nesterov-style training evaluates gradients at the lookahead point
//! `w − lr·momentum·v` via [`Sgd::lookahead_apply`] /
//! [`Sgd::lookahead_revert`] bracketing the forward/backward pass, then
//! steps from the base iterate.

use crate::elem::Elem;
use crate::numkit::params::{ParamId, ParamSet};

/// Per-parameter gradient accumulator, used to sum scaled gradients over a
/// batch of graphs before taking one optimizer step.
pub struct GradBuffer<E> {
    bufs: Vec<Vec<E>>,
}

impl<E: Elem> GradBuffer<E> {
    pub fn new(params: &ParamSet<E>) -> Self {
        GradBuffer {
            bufs: params
                .ids()
                .map(|id| vec![E::zero(); params.tensor(id).numel()])
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for buf in &mut self.bufs {
            buf.fill(E::zero());
        }
    }

    pub fn add_scaled(&mut self, id: ParamId, grad: &[E], scale: E) {
        let buf = &mut self.bufs[id.0];
        debug_assert_eq!(buf.len(), grad.len());
        for (slot, &g) in buf.iter_mut().zip(grad) {
            *slot += g * scale;
        }
    }

    pub fn get(&self, id: ParamId) -> &[E] {
        &self.bufs[id.0]
    }
}

pub struct Sgd<E> {
    ids: Vec<ParamId>,
    velocity: Vec<Vec<E>>,
    pub lr: E,
    pub momentum: E,
    pub weight_decay: E,
}

impl<E: Elem> Sgd<E> {
    /// Optimizes exactly the listed parameters; everything else in the set
    /// is left untouched by [`Sgd::step`].
    pub fn new(params: &ParamSet<E>, ids: Vec<ParamId>, lr: E, momentum: E, weight_decay: E) -> Self {
        let velocity = ids
            .iter()
            .map(|&id| vec![E::zero(); params.tensor(id).numel()])
            .collect();
        Sgd {
            ids,
            velocity,
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Moves parameters to the gradient-evaluation point `w − lr·momentum·v`.
    pub fn lookahead_apply(&self, params: &mut ParamSet<E>) {
        self.shift(params, -E::one())
    }

    /// Undoes [`Sgd::lookahead_apply`], restoring the base iterate.
    pub fn lookahead_revert(&self, params: &mut ParamSet<E>) {
        self.shift(params, E::one())
    }

    fn shift(&self, params: &mut ParamSet<E>, sign: E) {
        if self.momentum == E::zero() {
            return;
        }
        let scale = sign * self.lr * self.momentum;
        for (slot, vel) in self.ids.iter().zip(&self.velocity) {
            let data = params.tensor_mut(*slot).data_mut();
            for (w, &v) in data.iter_mut().zip(vel) {
                *w += scale * v;
            }
        }
    }

    /// One update from accumulated gradients, applied at the base iterate.
    pub fn step(&mut self, params: &mut ParamSet<E>, grads: &GradBuffer<E>) {
        for (idx, &id) in self.ids.iter().enumerate() {
            let vel = &mut self.velocity[idx];
            let grad = grads.get(id);
            let data = params.tensor_mut(id).data_mut();
            for ((w, v), &g) in data.iter_mut().zip(vel.iter_mut()).zip(grad) {
                let g = g + self.weight_decay * *w;
                *v = self.momentum * *v + g;
                *w -= self.lr * *v;
            }
        }
    }
}

/// Piecewise-constant decay: the rate is multiplied by `gamma` once per
/// milestone already reached.
#[derive(Clone, Debug)]
pub struct MultiStep<E> {
    pub milestones: Vec<u64>,
    pub gamma: E,
}

impl<E: Elem> MultiStep<E> {
    pub fn lr(&self, base: E, progress: u64) -> E {
        let hits = self.milestones.iter().filter(|&&m| progress >= m).count();
        let mut lr = base;
        for _ in 0..hits {
            lr = lr * self.gamma;
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::params::ParamKind;
    use crate::numkit::tensor::Tensor;
    use approx::assert_relative_eq;

    fn single_param(w: f64) -> (ParamSet<f64>, ParamId) {
        let mut params = ParamSet::new();
        let id = params
            .add("w", Tensor::new(&[1], vec![w]).unwrap(), ParamKind::Trainable)
            .unwrap();
        (params, id)
    }

    fn grads_of(params: &ParamSet<f64>, id: ParamId, g: f64) -> GradBuffer<f64> {
        let mut grads = GradBuffer::new(params);
        grads.add_scaled(id, &[g], 1.0);
        grads
    }

    #[test]
    fn plain_step_subtracts_lr_times_gradient() {
        let (mut params, id) = single_param(1.0);
        let mut sgd = Sgd::new(&params, vec![id], 1.0, 0.0, 0.0);
        let grads = grads_of(&params, id, 0.5);
        sgd.step(&mut params, &grads);
        assert_eq!(params.values(id), &[0.5]);
    }

    #[test]
    fn weight_decay_alone_shrinks_weight() {
        let (mut params, id) = single_param(1.0);
        let mut sgd = Sgd::new(&params, vec![id], 1.0, 0.0, 0.0005);
        let grads = grads_of(&params, id, 0.0);
        sgd.step(&mut params, &grads);
        assert_relative_eq!(params.values(id)[0], 0.9995, max_relative = 1e-12);
    }

    #[test]
    fn two_momentum_steps_with_unit_gradient() {
        let (mut params, id) = single_param(0.0);
        let mut sgd = Sgd::new(&params, vec![id], 0.1, 0.9, 0.0);
        for _ in 0..2 {
            sgd.lookahead_apply(&mut params);
            // Gradient is constant in w, so the lookahead point does not
            // change its value here.
            sgd.lookahead_revert(&mut params);
            let grads = grads_of(&params, id, 1.0);
            sgd.step(&mut params, &grads);
        }
        assert_relative_eq!(params.values(id)[0], -0.29, max_relative = 1e-12);
    }

    #[test]
    fn lookahead_shifts_by_lr_momentum_velocity_and_reverts() {
        let (mut params, id) = single_param(1.0);
        let mut sgd = Sgd::new(&params, vec![id], 0.1, 0.9, 0.0);
        let grads = grads_of(&params, id, 1.0);
        sgd.step(&mut params, &grads);
        // After one step: v = 1, w = 0.9.
        let base = params.values(id)[0];
        sgd.lookahead_apply(&mut params);
        assert_relative_eq!(params.values(id)[0], base - 0.1 * 0.9, max_relative = 1e-12);
        sgd.lookahead_revert(&mut params);
        assert_relative_eq!(params.values(id)[0], base, max_relative = 1e-12);
    }

    #[test]
    fn lookahead_is_identity_without_momentum() {
        let (mut params, id) = single_param(2.0);
        let sgd = Sgd::new(&params, vec![id], 0.1, 0.0, 0.0);
        sgd.lookahead_apply(&mut params);
        assert_eq!(params.values(id), &[2.0]);
    }

    #[test]
    fn step_ignores_params_outside_its_list() {
        let mut params = ParamSet::new();
        let a = params
            .add("a", Tensor::new(&[1], vec![1.0]).unwrap(), ParamKind::Trainable)
            .unwrap();
        let b = params
            .add("b", Tensor::new(&[1], vec![1.0]).unwrap(), ParamKind::Trainable)
            .unwrap();
        let mut sgd = Sgd::new(&params, vec![a], 1.0, 0.0, 0.0);
        let mut grads = GradBuffer::new(&params);
        grads.add_scaled(a, &[1.0], 1.0);
        grads.add_scaled(b, &[1.0], 1.0);
        sgd.step(&mut params, &grads);
        assert_eq!(params.values(a), &[0.0]);
        assert_eq!(params.values(b), &[1.0]);
    }

    #[test]
    fn grad_buffer_scales_and_accumulates() {
        let (params, id) = single_param(0.0);
        let mut grads = GradBuffer::new(&params);
        grads.add_scaled(id, &[2.0], 0.25);
        grads.add_scaled(id, &[2.0], 0.25);
        assert_eq!(grads.get(id), &[1.0]);
        grads.zero();
        assert_eq!(grads.get(id), &[0.0]);
    }

    #[test]
    fn multistep_decays_once_per_milestone_reached() {
        let sched = MultiStep {
            milestones: vec![10, 20],
            gamma: 0.1f64,
        };
        assert_relative_eq!(sched.lr(1.0, 9), 1.0);
        assert_relative_eq!(sched.lr(1.0, 10), 0.1);
        assert_relative_eq!(sched.lr(1.0, 19), 0.1);
        assert_relative_eq!(sched.lr(1.0, 20), 0.01, max_relative = 1e-12);
    }
}
