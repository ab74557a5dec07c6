//! Mini-batch SGD with momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 1e-3, momentum: 0.9, weight_decay: 5e-4 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be a finite value >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Velocity buffers, one per parameter, plus the hyperparameters.
#[derive(Clone, Debug)]
pub struct SgdState {
    config: SgdConfig,
    /// Current learning rate; differs from `config.lr` only under a schedule.
    lr: f64,
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(config: SgdConfig, params: &[&Tensor]) -> Result<Self> {
        config.validate()?;
        let velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self { config, lr: config.lr, velocity })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// One update over `params`, consuming `grads`:
    ///
    /// ```text
    /// v ← momentum·v + grad + weight_decay·param
    /// param ← param − lr·v
    /// ```
    ///
    /// A parameter whose gradient slot is `None` is left untouched (no decay,
    /// no momentum), which is how inactive networks are frozen. All slots are
    /// `None` afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &mut [Option<Tensor>]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((p, slot), v)) in params.iter().zip(grads.iter()).zip(&self.velocity).enumerate() {
            if let Some(gr) = slot {
                if gr.shape() != p.shape() || v.shape() != p.shape() {
                    return Err(Error::shape(
                        "sgd_step",
                        format!("param {i}: {:?} vs grad {:?}", p.shape(), gr.shape()),
                    ));
                }
                if let Some(index) = gr.first_non_finite() {
                    return Err(Error::Contract(format!(
                        "non-finite gradient for parameter {i} at element {index}"
                    )));
                }
            }
        }
        let SgdConfig { momentum, weight_decay, .. } = self.config;
        let lr = self.lr;
        for ((p, slot), v) in params.iter_mut().zip(grads.iter_mut()).zip(self.velocity.iter_mut()) {
            let Some(gr) = slot.take() else { continue };
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(gr.data()) {
                *vv = momentum * *vv + gv + weight_decay * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn step_scalar(cfg: SgdConfig, p0: f64, grads: &[f64]) -> f64 {
        let mut p = Tensor::scalar(p0);
        let mut st = SgdState::new(cfg, &[&p]).unwrap();
        for &g in grads {
            st.step(&mut [&mut p], &mut [Some(Tensor::scalar(g))]).unwrap();
        }
        p.item()
    }

    #[test]
    fn plain_step() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        assert!((step_scalar(cfg, 1.0, &[1.0]) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let cfg = SgdConfig { lr: 0.0, momentum: 0.9, weight_decay: 5e-4 };
        assert_eq!(step_scalar(cfg, 1.25, &[3.0, -2.0]), 1.25);
    }

    #[test]
    fn momentum_recurrence() {
        // v1 = 1, p1 = -1; v2 = 1.9, p2 = -2.9
        let cfg = SgdConfig { lr: 1.0, momentum: 0.9, weight_decay: 0.0 };
        assert!((step_scalar(cfg, 0.0, &[1.0, 1.0]) + 2.9).abs() < 1e-15);
    }

    #[test]
    fn grads_cleared_and_none_skipped() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        let cfg = SgdConfig { lr: 0.5, momentum: 0.0, weight_decay: 0.1 };
        let mut st = SgdState::new(cfg, &[&a, &b]).unwrap();
        let mut grads = vec![Some(Tensor::scalar(1.0)), None];
        st.step(&mut [&mut a, &mut b], &mut grads).unwrap();
        assert!(grads.iter().all(Option::is_none));
        assert!((a.item() - (1.0 - 0.5 * 1.1)).abs() < 1e-15);
        assert_eq!(b.item(), 1.0);
    }

    #[test]
    fn non_finite_grad_rejected_before_any_update() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        let mut st = SgdState::new(SgdConfig::default(), &[&a, &b]).unwrap();
        let mut grads = vec![Some(Tensor::scalar(1.0)), Some(Tensor::scalar(f64::NAN))];
        assert!(st.step(&mut [&mut a, &mut b], &mut grads).is_err());
        assert_eq!(a.item(), 1.0);
    }

    #[test]
    fn invalid_hyperparameters() {
        for cfg in [
            SgdConfig { lr: -1.0, ..Default::default() },
            SgdConfig { momentum: 1.0, ..Default::default() },
            SgdConfig { weight_decay: -0.1, ..Default::default() },
        ] {
            assert!(SgdState::new(cfg, &[]).is_err());
        }
    }

    #[test]
    fn weight_decay_equals_l2_penalty() {
        // Gradient of f(p) + (wd/2)||p||² with wd folded into the loss must
        // produce the same trajectory as wd applied by the optimizer.
        let wd = 0.05;
        let target = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let loss_grad = |p: &Tensor, with_penalty: bool| {
            let mut g = Graph::new();
            let v = g.param(p.clone());
            let t = g.constant(target.clone());
            let d = g.sub(v, t).unwrap();
            let sq = g.mul(d, d).unwrap();
            let mut l = g.sum(sq).unwrap();
            if with_penalty {
                let vv = g.mul(v, v).unwrap();
                let s = g.sum(vv).unwrap();
                let s = g.scale(s, wd / 2.0).unwrap();
                l = g.add(l, s).unwrap();
            }
            g.backward(l).unwrap().take(v).unwrap()
        };
        let mut p1 = Tensor::vector(vec![1.0, 1.0, 1.0]);
        let mut p2 = p1.clone();
        let mut s1 = SgdState::new(SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: wd }, &[&p1]).unwrap();
        let mut s2 = SgdState::new(SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 }, &[&p2]).unwrap();
        for _ in 0..20 {
            let g1 = loss_grad(&p1, false);
            s1.step(&mut [&mut p1], &mut [Some(g1)]).unwrap();
            let g2 = loss_grad(&p2, true);
            s2.step(&mut [&mut p2], &mut [Some(g2)]).unwrap();
        }
        for (a, b) in p1.data().iter().zip(p2.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn convex_quadratic_decreases_monotonically() {
        // f(p) = Σ c_i p_i², curvature 2·max(c) = 6, so lr < 1/3 is stable.
        let c = [0.5, 1.0, 3.0];
        let f = |p: &Tensor| p.data().iter().zip(c).map(|(x, ci)| ci * x * x).sum::<f64>();
        let mut p = Tensor::vector(vec![2.0, -3.0, 1.0]);
        let mut st = SgdState::new(SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }, &[&p]).unwrap();
        let mut prev = f(&p);
        for _ in 0..50 {
            let grad = Tensor::vector(p.data().iter().zip(c).map(|(x, ci)| 2.0 * ci * x).collect());
            st.step(&mut [&mut p], &mut [Some(grad)]).unwrap();
            let cur = f(&p);
            assert!(cur < prev);
            prev = cur;
        }
    }
}
