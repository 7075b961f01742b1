use ndarray::ArrayD;

use super::Parameters;

/// Adam with optional decoupled weight decay (AdamW when `weight_decay > 0`).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Adam {
            weight_decay,
            ..Adam::new(lr)
        }
    }

    pub fn step<M: Parameters>(&mut self, model: &mut M, grads: &M) {
        let grads = grads.params();
        if self.m.is_empty() {
            self.m = grads.iter().map(|(_, g)| ArrayD::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        for (((mut p, (_, g)), m), v) in model
            .params_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    if wd > 0.0 {
                        *p -= lr * wd * *p;
                    }
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use ndarray::Array1;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut lin = Linear::zeros(2, 1);
        let mut opt = Adam::new(0.05);
        let target = [1.5, -0.5];
        for _ in 0..2000 {
            let mut g = lin.zeroed();
            for k in 0..2 {
                g.weight[[0, k]] = 2.0 * (lin.weight[[0, k]] - target[k]);
            }
            opt.step(&mut lin, &g);
        }
        let x = Array1::from(vec![1.0, 1.0]);
        assert!((lin.forward(&x)[0] - 1.0).abs() < 1e-3);
    }
}
