//! First-order optimizers over flat parameter lists.
//!
//! Every variant materialises its update as `u = -lr * direction` and applies
//! `p += u` in one rounding step. Federated aggregation reads updates back off
//! parameters by subtraction, so the single-rounding form is what makes the
//! FedSGD/FedAvg equivalence checks exact rather than approximate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        velocity: Option<Vec<Tensor>>,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        m: Option<Vec<Tensor>>,
        v: Option<Vec<Tensor>>,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Optimizer {
        Optimizer::Sgd { lr, momentum: 0.0, weight_decay: 0.0, velocity: None }
    }

    pub fn sgd_momentum(lr: f64, momentum: f64) -> Optimizer {
        Optimizer::Sgd { lr, momentum, weight_decay: 0.0, velocity: None }
    }

    pub fn adam(lr: f64) -> Optimizer {
        Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: None, v: None }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } => *lr,
        }
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match self {
            Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } => *lr = new_lr,
        }
    }

    /// In-place update of `params` from `grads` (congruent lists).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::input(format!(
                "optimizer got {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads.iter()) {
            if p.shape() != g.shape() {
                return Err(Error::input(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        match self {
            Optimizer::Sgd { lr, momentum, weight_decay, velocity } => {
                if *momentum != 0.0 && velocity.is_none() {
                    *velocity = Some(params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect());
                }
                for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
                    let pd = p.data_mut();
                    let gd = g.data();
                    match velocity {
                        Some(vel) => {
                            let vd = vel[i].data_mut();
                            for j in 0..pd.len() {
                                let ge = gd[j] + *weight_decay * pd[j];
                                vd[j] = *momentum * vd[j] + ge;
                                pd[j] += -*lr * vd[j];
                            }
                        }
                        None => {
                            for j in 0..pd.len() {
                                let ge = gd[j] + *weight_decay * pd[j];
                                pd[j] += -*lr * ge;
                            }
                        }
                    }
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, t, m, v } => {
                if m.is_none() {
                    *m = Some(params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect());
                    *v = Some(params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect());
                }
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                let (ms, vs) = (m.as_mut().unwrap(), v.as_mut().unwrap());
                for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
                    let pd = p.data_mut();
                    let gd = g.data();
                    let md = ms[i].data_mut();
                    let vd = vs[i].data_mut();
                    for j in 0..pd.len() {
                        md[j] = *beta1 * md[j] + (1.0 - *beta1) * gd[j];
                        vd[j] = *beta2 * vd[j] + (1.0 - *beta2) * gd[j] * gd[j];
                        let mh = md[j] / bc1;
                        let vh = vd[j] / bc2;
                        pd[j] += -*lr * mh / (vh.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_scalar(opt: &mut Optimizer, x0: f64, grads: &[f64]) -> f64 {
        let mut p = vec![Tensor::scalar(x0)];
        for g in grads {
            opt.step(&mut p, &[Tensor::scalar(*g)]).unwrap();
        }
        p[0].item()
    }

    #[test]
    fn plain_sgd_matches_hand_recurrence() {
        // independent scalar recurrence, written before the implementation ran
        let mut x = 1.0f64;
        for g in [2.0, -0.5, 0.25] {
            x += -0.1 * g;
        }
        let mut opt = Optimizer::sgd(0.1);
        assert_eq!(run_scalar(&mut opt, 1.0, &[2.0, -0.5, 0.25]), x);
    }

    #[test]
    fn momentum_sgd_matches_hand_recurrence() {
        let (lr, mu) = (0.1, 0.9);
        let mut x = 1.0f64;
        let mut v = 0.0f64;
        for g in [2.0, 2.0, 2.0] {
            v = mu * v + g;
            x += -lr * v;
        }
        let mut opt = Optimizer::sgd_momentum(lr, mu);
        assert_eq!(run_scalar(&mut opt, 1.0, &[2.0, 2.0, 2.0]), x);
    }

    #[test]
    fn weight_decay_enters_through_gradient() {
        let mut opt = Optimizer::Sgd { lr: 0.5, momentum: 0.0, weight_decay: 0.1, velocity: None };
        // g_eff = 0 + 0.1 * 2 = 0.2 ; x = 2 - 0.5*0.2 = 1.9
        assert_eq!(run_scalar(&mut opt, 2.0, &[0.0]), 1.9);
    }

    #[test]
    fn adam_matches_hand_recurrence() {
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let mut x = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [3.0, -1.0, 0.5].iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            x += -lr * mh / (vh.sqrt() + eps);
        }
        let mut opt = Optimizer::adam(0.1);
        let got = run_scalar(&mut opt, 1.0, &[3.0, -1.0, 0.5]);
        assert!((got - x).abs() < 1e-15, "got {} want {}", got, x);
    }

    #[test]
    fn first_adam_step_has_unit_direction() {
        // bias correction makes step 1 equal -lr * sign(g) up to eps
        let mut opt = Optimizer::adam(0.01);
        let got = run_scalar(&mut opt, 0.0, &[123.456]);
        assert!((got - -0.01).abs() < 1e-6, "got {}", got);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut opt = Optimizer::sgd(0.1);
        let mut p = vec![Tensor::zeros(vec![2, 2])];
        let g = vec![Tensor::zeros(vec![4])];
        assert!(opt.step(&mut p, &g).is_err());
    }
}
