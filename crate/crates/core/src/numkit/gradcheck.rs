//! Central-difference verification of reverse-mode gradients.
//!
//! For sampled parameter coordinates the checker compares the analytic
//! gradient against `(f(w+ε) − f(w−ε)) / 2ε` with the relative error
//! `|a − n| / max(1, |a|, |n|)`. Both probe evaluations record a forward
//! signature (relu sign patterns, pool argmaxes); coordinates whose probes
//! land on different sides of such a discrete choice are skipped instead of
//! reported, since the two-sided difference is meaningless across a kink.
//!
//! Checking runs in f64 regardless of the training element type.

use rand::seq::index::sample;

use crate::numkit::graph::{Graph, NodeId};
use crate::numkit::params::{ParamId, ParamSet};
use crate::numkit::tensor::TensorError;
use crate::rng::{stream, Domain};

pub const EPS_MIN: f64 = 1e-4;
pub const EPS_MAX: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Upper bound on coordinates probed per parameter.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-3,
            max_coords: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Step size actually used after clamping to `[EPS_MIN, EPS_MAX]`.
    pub eps: f64,
    pub eps_clamped: bool,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_error: f64,
    /// Parameter name and flat coordinate where `max_error` occurred.
    pub worst: Option<(String, usize)>,
}

/// Builds the loss on the provided graph from the current parameter values
/// and reports which graph input corresponds to each checked parameter.
pub type BuildLoss<'a> =
    &'a dyn Fn(&ParamSet<f64>, &mut Graph<f64>) -> Result<(NodeId, Vec<(ParamId, NodeId)>), TensorError>;

pub fn grad_check(
    params: &mut ParamSet<f64>,
    build: BuildLoss<'_>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError> {
    let eps = cfg.eps.clamp(EPS_MIN, EPS_MAX);
    let mut report = GradCheckReport {
        eps,
        eps_clamped: eps != cfg.eps,
        checked: 0,
        skipped_kinks: 0,
        max_error: 0.0,
        worst: None,
    };

    let mut base_graph = Graph::new();
    base_graph.track_signature(true);
    let (loss, bound) = build(params, &mut base_graph)?;
    base_graph.backward(loss)?;

    // A parameter bound at several graph nodes contributes the sum of the
    // node gradients, so duplicate ids merge by accumulation.
    let mut analytic: Vec<(ParamId, Vec<f64>)> = Vec::new();
    for &(pid, node) in &bound {
        let grad = base_graph
            .grad(node)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; base_graph.data(node).len()]);
        match analytic.iter_mut().find(|(existing, _)| *existing == pid) {
            Some((_, acc)) => {
                for (a, g) in acc.iter_mut().zip(&grad) {
                    *a += g;
                }
            }
            None => analytic.push((pid, grad)),
        }
    }
    drop(base_graph);

    let probe = |params: &ParamSet<f64>| -> Result<(f64, u64), TensorError> {
        let mut graph = Graph::new();
        graph.track_signature(true);
        let (loss, _) = build(params, &mut graph)?;
        Ok((graph.item(loss)?, graph.signature()))
    };

    for (pid, grads) in &analytic {
        let numel = grads.len();
        let mut rng = stream(cfg.seed, Domain::GradCheck, pid.0 as u64);
        let coords: Vec<usize> = if numel <= cfg.max_coords {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, cfg.max_coords).into_vec()
        };
        for coord in coords {
            let original = params.values(*pid)[coord];
            params.tensor_mut(*pid).data_mut()[coord] = original + eps;
            let plus = probe(params);
            params.tensor_mut(*pid).data_mut()[coord] = original - eps;
            let minus = probe(params);
            params.tensor_mut(*pid).data_mut()[coord] = original;
            let ((loss_p, sig_p), (loss_m, sig_m)) = (plus?, minus?);
            if sig_p != sig_m {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (loss_p - loss_m) / (2.0 * eps);
            let a = grads[coord];
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if err > report.max_error {
                report.max_error = err;
                report.worst = Some((params.name(*pid).to_string(), coord));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::params::ParamKind;
    use crate::numkit::tensor::Tensor;

    fn param_set(name: &str, values: &[f64]) -> (ParamSet<f64>, ParamId) {
        let mut params = ParamSet::new();
        let id = params
            .add(
                name,
                Tensor::new(&[values.len()], values.to_vec()).unwrap(),
                ParamKind::Trainable,
            )
            .unwrap();
        (params, id)
    }

    #[test]
    fn quadratic_loss_checks_to_under_1e8() {
        let (mut params, id) = param_set("w", &[1.0, -2.0, 0.5]);
        let build: BuildLoss<'_> = &|p, g| {
            let w = p.bind(g, p.id("w").unwrap(), true);
            let sq = g.mul(w, w)?;
            Ok((g.sum_all(sq), vec![(p.id("w").unwrap(), w)]))
        };
        let cfg = GradCheckConfig {
            eps: 1e-3,
            ..GradCheckConfig::default()
        };
        let report = grad_check(&mut params, build, &cfg).unwrap();
        assert_eq!(report.checked, 3);
        assert_eq!(report.skipped_kinks, 0);
        assert!(
            report.max_error < 1e-8,
            "max_error {} at {:?}",
            report.max_error,
            report.worst
        );
        let _ = id;
    }

    #[test]
    fn doubly_bound_parameter_sums_both_node_gradients() {
        let (mut params, _) = param_set("w", &[0.7, -0.4]);
        let build: BuildLoss<'_> = &|p, g| {
            let id = p.id("w").unwrap();
            let first = p.bind(g, id, true);
            let second = p.bind(g, id, true);
            let sq = g.mul(first, first)?;
            let quadratic = g.sum_all(sq);
            let linear = g.sum_all(second);
            let linear = g.scale(linear, 3.0);
            let loss = g.add(quadratic, linear)?;
            Ok((loss, vec![(id, first), (id, second)]))
        };
        let report = grad_check(&mut params, build, &GradCheckConfig::default()).unwrap();
        assert_eq!(report.checked, 2);
        assert!(
            report.max_error < 1e-8,
            "max_error {} at {:?}",
            report.max_error,
            report.worst
        );
    }

    #[test]
    fn relu_kink_at_zero_is_skipped_not_failed() {
        let (mut params, _) = param_set("w", &[0.0, 1.0, -1.0]);
        let build: BuildLoss<'_> = &|p, g| {
            let w = p.bind(g, p.id("w").unwrap(), true);
            let r = g.relu(w);
            Ok((g.sum_all(r), vec![(p.id("w").unwrap(), w)]))
        };
        let report = grad_check(&mut params, build, &GradCheckConfig::default()).unwrap();
        assert_eq!(report.skipped_kinks, 1);
        assert_eq!(report.checked, 2);
        assert!(report.max_error < 1e-10);
    }

    #[test]
    fn pool_argmax_tie_is_skipped() {
        let (mut params, _) = param_set("w", &[2.0, 2.0, 0.0, 0.0]);
        let build: BuildLoss<'_> = &|p, g| {
            let w = p.bind(g, p.id("w").unwrap(), true);
            let img = g.reshape(w, &[1, 1, 2, 2])?;
            let sq = g.mul(img, img)?;
            let pooled = g.max_pool2(sq)?;
            Ok((g.sum_all(pooled), vec![(p.id("w").unwrap(), w)]))
        };
        let report = grad_check(&mut params, build, &GradCheckConfig::default()).unwrap();
        // Nudging either tied coordinate flips the argmax.
        assert_eq!(report.skipped_kinks, 2);
        assert!(report.max_error < 1e-8);
    }

    #[test]
    fn eps_outside_bounds_is_clamped_and_flagged() {
        let (mut params, _) = param_set("w", &[1.0]);
        let build: BuildLoss<'_> = &|p, g| {
            let w = p.bind(g, p.id("w").unwrap(), true);
            let sq = g.mul(w, w)?;
            Ok((g.sum_all(sq), vec![(p.id("w").unwrap(), w)]))
        };
        let cfg = GradCheckConfig {
            eps: 1.0,
            ..GradCheckConfig::default()
        };
        let report = grad_check(&mut params, build, &cfg).unwrap();
        assert!(report.eps_clamped);
        assert_eq!(report.eps, EPS_MAX);
        let cfg = GradCheckConfig {
            eps: 1e-9,
            ..GradCheckConfig::default()
        };
        let report = grad_check(&mut params, build, &cfg).unwrap();
        assert_eq!(report.eps, EPS_MIN);
    }

    #[test]
    fn sampling_respects_max_coords_budget() {
        let values: Vec<f64> = (0..600).map(|i| (i as f64) * 0.01 + 0.1).collect();
        let (mut params, _) = param_set("w", &values);
        let build: BuildLoss<'_> = &|p, g| {
            let w = p.bind(g, p.id("w").unwrap(), true);
            let sq = g.mul(w, w)?;
            Ok((g.sum_all(sq), vec![(p.id("w").unwrap(), w)]))
        };
        let cfg = GradCheckConfig {
            max_coords: 32,
            ..GradCheckConfig::default()
        };
        let report = grad_check(&mut params, build, &cfg).unwrap();
        assert_eq!(report.checked + report.skipped_kinks, 32);
        assert!(report.max_error < 1e-8);
    }

    #[test]
    fn softmax_cross_entropy_gradients_verify() {
        let (mut params, _) = param_set("logits", &[0.3, -1.2, 0.8, 0.1]);
        let build: BuildLoss<'_> = &|p, g| {
            let id = p.id("logits").unwrap();
            let w = p.bind(g, id, true);
            let mat = g.reshape(w, &[2, 2])?;
            let lsm = g.log_softmax(mat, 1)?;
            let targets = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
            let picked = g.mul(lsm, targets)?;
            let total = g.sum_all(picked);
            Ok((g.neg(total), vec![(id, w)]))
        };
        let report = grad_check(&mut params, build, &GradCheckConfig::default()).unwrap();
        assert_eq!(report.skipped_kinks, 0);
        assert!(report.max_error < 1e-6, "max_error {}", report.max_error);
    }
}
