use serde::{Deserialize, Serialize};

use crate::{Gradients, ParamStore, Scalar, Tensor};

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<T>,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: T, beta1: T, beta2: T) -> Self {
        let zeros: Vec<_> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: T::lit(1e-8),
            clip_norm: None,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        assert_eq!(self.m.len(), store.len(), "optimizer built for another store");
        self.step += 1;
        let mut scale = T::one();
        if let Some(c) = self.clip_norm {
            let n = grads.norm();
            if n > c {
                scale = c / n;
            }
        }
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            let i = id.index();
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] * scale;
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::new(&store, 0.1, 0.9, 0.999);
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let x = g.reshape(x, &[1, 2]);
            let sq = g.mul(x, x);
            let l = g.sum_all(sq);
            let grads = g.backward(l).into_params();
            opt.step(&mut store, &grads);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(opt.steps_taken(), 500);
    }

    #[test]
    fn parameters_without_gradient_are_untouched() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::new(&[1], vec![1.0]));
        let b = store.add("b", Tensor::new(&[1], vec![5.0]));
        let mut opt = Adam::new(&store, 0.1, 0.9, 0.999);
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let l = g.sum_all(va);
        opt.step(&mut store, &g.backward(l).into_params());
        assert_eq!(store.get(b).data(), &[5.0]);
        assert!(store.get(a).data()[0] < 1.0);
    }
}
