use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

/// Adam with L2 weight decay folded into the gradient (the classic,
/// non-decoupled formulation). Parameters without a gradient are left
/// untouched and their moments do not advance.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: Vec<u64>,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) {
        let n = params.len();
        if self.m.len() < n {
            self.m.resize(n, None);
            self.v.resize(n, None);
            self.steps.resize(n, 0);
        }
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let p = params.get_mut(id);
            let mut g = g.clone();
            if self.weight_decay != 0.0 {
                g.zip_mut_with(p, |gi, &pi| *gi += self.weight_decay * pi);
            }
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(p.raw_dim()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(p.raw_dim()));
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let (b1, b2) = (self.beta1, self.beta2);
            m.zip_mut_with(&g, |mi, &gi| *mi = b1 * *mi + (1.0 - b1) * gi);
            v.zip_mut_with(&g, |vi, &gi| *vi = b2 * *vi + (1.0 - b2) * gi * gi);
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let step = self.lr / bc1;
            let eps = self.eps;
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, &mi, &vi| *pi -= step * mi / ((vi / bc2).sqrt() + eps));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Session;
    use crate::tensor::tensor;

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", tensor(&[2], vec![3.0, -2.0])).unwrap();
        let mut opt = Adam::new(0.1, 0.0);
        for _ in 0..500 {
            let grads = {
                let mut s = Session::train(&store);
                let x = s.param(id);
                let sq = s.mul(x, x);
                let loss = s.sum_all(sq);
                s.param_grads(loss)
            };
            opt.step(&mut store, &grads);
        }
        assert!(store.get(id).iter().all(|x| x.abs() < 1e-2), "{:?}", store.get(id));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("x", tensor(&[1], vec![1.0])).unwrap();
        let mut opt = Adam::new(0.01, 0.0);
        let grads = {
            let mut s = Session::train(&store);
            let x = s.param(id);
            let y = s.scale(x, 5.0);
            let loss = s.sum_all(y);
            s.param_grads(loss)
        };
        opt.step(&mut store, &grads);
        assert!((store.get(id)[0] - 0.99).abs() < 1e-9);
    }
}
