//! Gradient-matching objective for optimization-based reconstruction.
//!
//! The loss compares the parameter gradients induced by a dummy batch against
//! captured target gradients, optionally regularised by total variation on
//! the dummy pixels. Both the model gradients and the matching distance are
//! built on one tape, so a second `backward` yields the exact derivative of
//! the distance with respect to the dummy pixels — no
//! finite-difference or first-order approximation of the Hessian-vector
//! product is involved.

use crate::error::{Error, Result};
use crate::model::{build_forward, ModelParams, ModelSpec, ParamGrads};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    SquaredL2,
    /// 1 - cos(g, t) over the full parameter concatenation.
    Cosine,
}

#[derive(Debug, Clone, Copy)]
pub struct GradMatchCfg {
    pub distance: Distance,
    pub tv_weight: f64,
}

impl Default for GradMatchCfg {
    fn default() -> Self {
        GradMatchCfg { distance: Distance::SquaredL2, tv_weight: 1e-6 }
    }
}

/// Squared anisotropic total variation of `x` interpreted as [..., h, w],
/// summed over every leading index.
pub fn tv_node(tape: &mut Tape, x: NodeId) -> NodeId {
    let shape = tape.value(x).shape().to_vec();
    let rank = shape.len();
    assert!(rank >= 2, "total variation wants at least [h, w]");
    let (h, w) = (shape[rank - 2], shape[rank - 1]);
    let mut acc = tape.leaf(Tensor::scalar(0.0));
    if w >= 2 {
        let dh = tape.diff_h(x);
        let dh2 = tape.mul(dh, dh);
        let s = tape.sum_all(dh2);
        acc = tape.add(acc, s);
    }
    if h >= 2 {
        let dv = tape.diff_v(x);
        let dv2 = tape.mul(dv, dv);
        let s = tape.sum_all(dv2);
        acc = tape.add(acc, s);
    }
    acc
}

/// Value and pixel gradient of the squared anisotropic total variation.
pub fn total_variation(image: &Tensor) -> Result<(f64, Tensor)> {
    if image.shape().len() < 2 {
        return Err(Error::input("total variation wants at least a 2-d tensor"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone());
    let tv = tv_node(&mut tape, x);
    let v = tape.value(tv).item();
    let adj = tape.backward(tv, &[x]);
    Ok((v, tape.grad_of(adj[0], x)))
}

/// Matching loss between the gradients a dummy batch would produce and the
/// captured `target` gradients, plus its exact gradient with respect to the
/// dummy pixels.
pub fn grad_matching_loss(
    spec: &ModelSpec,
    params: &ModelParams,
    dummy: &Tensor,
    labels: &[usize],
    target: &ParamGrads,
    cfg: &GradMatchCfg,
) -> Result<(f64, Tensor)> {
    if target.grads.len() != params.tensors.len() {
        return Err(Error::input(format!(
            "target has {} gradient tensors, model has {} parameters",
            target.grads.len(),
            params.tensors.len()
        )));
    }
    let mut tape = Tape::new();
    let ids = build_forward(&mut tape, spec, params, dummy)?;
    let ce = tape.cross_entropy(ids.logits, labels);
    let adj = tape.backward(ce, &ids.params);

    // Materialise an adjoint node per parameter; unused params match a zero.
    let g_ids: Vec<NodeId> = ids
        .params
        .iter()
        .zip(&adj)
        .map(|(&p, a)| match a {
            Some(id) => *id,
            None => {
                let z = Tensor::zeros(tape.value(p).shape().to_vec());
                tape.leaf(z)
            }
        })
        .collect();

    let mut loss = match cfg.distance {
        Distance::SquaredL2 => {
            let mut acc = tape.leaf(Tensor::scalar(0.0));
            for (g, t) in g_ids.iter().zip(&target.grads) {
                let t_id = tape.leaf(t.clone());
                let d = tape.sub(*g, t_id);
                let d2 = tape.mul(d, d);
                let s = tape.sum_all(d2);
                acc = tape.add(acc, s);
            }
            acc
        }
        Distance::Cosine => {
            let t_norm = target.sq_norm().sqrt().max(1e-12);
            let mut dot = tape.leaf(Tensor::scalar(0.0));
            let mut g_sq = tape.leaf(Tensor::scalar(0.0));
            for (g, t) in g_ids.iter().zip(&target.grads) {
                let t_id = tape.leaf(t.clone());
                let p = tape.mul(*g, t_id);
                let s = tape.sum_all(p);
                dot = tape.add(dot, s);
                let gg = tape.mul(*g, *g);
                let sg = tape.sum_all(gg);
                g_sq = tape.add(g_sq, sg);
            }
            // epsilon inside the sqrt keeps the derivative finite at g = 0
            let g_sq_safe = tape.add_scalar(g_sq, 1e-24);
            let g_norm = tape.sqrt(g_sq_safe);
            let denom = tape.scale(g_norm, t_norm);
            let cos = tape.div(dot, denom);
            let neg = tape.neg(cos);
            tape.add_scalar(neg, 1.0)
        }
    };

    if cfg.tv_weight != 0.0 {
        let tv = tv_node(&mut tape, ids.input);
        let tv_w = tape.scale(tv, cfg.tv_weight);
        loss = tape.add(loss, tv_w);
    }

    let loss_v = tape.value(loss).item();
    let adj2 = tape.backward(loss, &[ids.input]);
    let grad = tape.grad_of(adj2[0], ids.input);
    if !loss_v.is_finite() || !grad.is_finite() {
        return Err(Error::numeric("gradient-matching loss diverged"));
    }
    Ok((loss_v, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::findiff::{central_diff, max_rel_err};
    use crate::model::{build_model, loss_and_param_grads, ModelSpec};

    #[test]
    fn tv_of_vertical_stripes_is_two() {
        // [[0,1],[0,1]]: two horizontal unit jumps, no vertical ones
        let img = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let (v, _) = total_variation(&img).unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn tv_of_constant_image_is_zero_with_zero_grad() {
        let img = Tensor::full(vec![2, 1, 3, 3], 0.7);
        let (v, g) = total_variation(&img).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn tv_gradient_matches_central_differences() {
        let img = Tensor::new(
            vec![1, 1, 3, 3],
            vec![0.1, 0.9, 0.3, 0.5, 0.2, 0.8, 0.4, 0.6, 0.05],
        )
        .unwrap();
        let (_, g) = total_variation(&img).unwrap();
        let fd = central_diff(&mut |x: &Tensor| total_variation(x).unwrap().0, &img, 1e-6);
        assert!(max_rel_err(&g, &fd) < 1e-6);
    }

    fn tiny_setup() -> (ModelSpec, ModelParams, Tensor, Vec<usize>, ParamGrads) {
        let spec = ModelSpec::tiny_mlp((1, 3, 3), 4, 3);
        let params = build_model(&spec, 11).unwrap();
        let data: Vec<f64> = (0..18).map(|i| ((i * 37 % 19) as f64) / 19.0).collect();
        let x = Tensor::new(vec![2, 1, 3, 3], data).unwrap();
        let labels = vec![0, 2];
        let (_, target) = loss_and_param_grads(&spec, &params, &x, &labels).unwrap();
        (spec, params, x, labels, target)
    }

    #[test]
    fn matching_the_true_batch_gives_zero_l2_loss() {
        let (spec, params, x, labels, target) = tiny_setup();
        let cfg = GradMatchCfg { distance: Distance::SquaredL2, tv_weight: 0.0 };
        let (v, _) = grad_matching_loss(&spec, &params, &x, &labels, &target, &cfg).unwrap();
        // same op sequence on both tapes, so the residual is exactly zero
        assert_eq!(v, 0.0);
    }

    #[test]
    fn l2_match_gradient_agrees_with_finite_differences() {
        let (spec, params, x, labels, target) = tiny_setup();
        let cfg = GradMatchCfg { distance: Distance::SquaredL2, tv_weight: 1e-3 };
        // perturb away from the exact solution so the gradient is nontrivial
        let dummy = x.map(|v| v + 0.05);
        let (_, g) = grad_matching_loss(&spec, &params, &dummy, &labels, &target, &cfg).unwrap();
        let fd = central_diff(
            &mut |d: &Tensor| grad_matching_loss(&spec, &params, d, &labels, &target, &cfg).unwrap().0,
            &dummy,
            1e-6,
        );
        assert!(max_rel_err(&g, &fd) < 1e-4, "rel err {}", max_rel_err(&g, &fd));
    }

    #[test]
    fn cosine_match_gradient_agrees_with_finite_differences() {
        let (spec, params, x, labels, target) = tiny_setup();
        let cfg = GradMatchCfg { distance: Distance::Cosine, tv_weight: 0.0 };
        let dummy = x.map(|v| 0.9 * v + 0.03);
        let (v, g) = grad_matching_loss(&spec, &params, &dummy, &labels, &target, &cfg).unwrap();
        assert!(v > 0.0 && v < 2.0);
        let fd = central_diff(
            &mut |d: &Tensor| grad_matching_loss(&spec, &params, d, &labels, &target, &cfg).unwrap().0,
            &dummy,
            1e-6,
        );
        assert!(max_rel_err(&g, &fd) < 1e-4, "rel err {}", max_rel_err(&g, &fd));
    }

    #[test]
    fn cosine_loss_at_the_true_batch_is_zero() {
        let (spec, params, x, labels, target) = tiny_setup();
        let cfg = GradMatchCfg { distance: Distance::Cosine, tv_weight: 0.0 };
        let (v, _) = grad_matching_loss(&spec, &params, &x, &labels, &target, &cfg).unwrap();
        assert!(v.abs() < 1e-9, "cosine self-distance {}", v);
    }

    #[test]
    fn tv_weight_shifts_the_loss_by_exactly_weighted_tv() {
        let (spec, params, x, labels, target) = tiny_setup();
        let dummy = x.map(|v| v + 0.1);
        let base = GradMatchCfg { distance: Distance::SquaredL2, tv_weight: 0.0 };
        let reg = GradMatchCfg { distance: Distance::SquaredL2, tv_weight: 0.5 };
        let (v0, _) = grad_matching_loss(&spec, &params, &dummy, &labels, &target, &base).unwrap();
        let (v1, _) = grad_matching_loss(&spec, &params, &dummy, &labels, &target, &reg).unwrap();
        let (tv, _) = total_variation(&dummy).unwrap();
        assert!((v1 - v0 - 0.5 * tv).abs() < 1e-12);
    }

    #[test]
    fn conv_model_match_gradient_agrees_with_finite_differences() {
        // exercises im2col/col2im and batch reordering under nested backward
        let spec = ModelSpec {
            name: "tiny_conv".into(),
            input: (1, 4, 4),
            classes: 2,
            layers: vec![
                crate::model::LayerSpec::Conv2d { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
                crate::model::LayerSpec::Relu,
                crate::model::LayerSpec::Flatten,
                crate::model::LayerSpec::Dense { output: 2 },
            ],
        };
        let params = build_model(&spec, 3).unwrap();
        let data: Vec<f64> = (0..16).map(|i| ((i * 29 % 17) as f64) / 17.0).collect();
        let x = Tensor::new(vec![1, 1, 4, 4], data).unwrap();
        let labels = vec![1];
        let (_, target) = loss_and_param_grads(&spec, &params, &x, &labels).unwrap();
        let dummy = x.map(|v| 0.8 * v + 0.07);
        let cfg = GradMatchCfg { distance: Distance::SquaredL2, tv_weight: 1e-4 };
        let (_, g) = grad_matching_loss(&spec, &params, &dummy, &labels, &target, &cfg).unwrap();
        let fd = central_diff(
            &mut |d: &Tensor| grad_matching_loss(&spec, &params, d, &labels, &target, &cfg).unwrap().0,
            &dummy,
            1e-6,
        );
        assert!(max_rel_err(&g, &fd) < 1e-4, "rel err {}", max_rel_err(&g, &fd));
    }
}
