//! Adam update rule over named parameters.

use std::collections::BTreeMap;

use crate::layers::Parameterized;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps; bias correction uses `t` after [`Adam::begin_step`].
    pub t: u64,
    pub state: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one update to every parameter of `group` from its gradient.
    pub fn update(&mut self, group: &mut dyn Parameterized) {
        let t = self.t.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        group.visit_params_mut(&mut |p| {
            let st = self.state.entry(p.name.clone()).or_insert_with(|| AdamState {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
            for i in 0..p.len() {
                let g = p.grad[i];
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
                let mhat = st.m[i] / c1;
                let vhat = st.v[i] / c2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Linear, Param};

    struct One(Param);
    impl Parameterized for One {
        fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
            f(&self.0)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.0)
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = One(Param::new("w", vec![2], vec![1.0, -1.0]));
        p.0.grad = vec![3.0, -0.5];
        let mut opt = Adam::new(0.01);
        opt.begin_step();
        opt.update(&mut p);
        assert!((p.0.value[0] - 0.99).abs() < 1e-9);
        assert!((p.0.value[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut lin = Linear::zeros("l", 1, 1);
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            lin.zero_grad();
            let w = lin.weight.value[0];
            lin.weight.grad[0] = 2.0 * (w - 3.0);
            opt.begin_step();
            opt.update(&mut lin);
        }
        assert!((lin.weight.value[0] - 3.0).abs() < 1e-3);
    }
}
