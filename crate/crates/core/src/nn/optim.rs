use super::params::ParamStore;

/// Adam over the trainable parameters of a store. Moment buffers are keyed by
/// parameter index and created lazily.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradient buffers held in `store`, then
    /// clears them. Frozen parameters are never written.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let n = store.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.trainable_ids() {
            let i = id.index();
            let t = store.get_mut(id);
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            let m = self.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
            for (((w, gi), mi), vi) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        store.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::filled(vec![3], 0.7), true);
        s.get_mut(id).accumulate_grad(&[0.0; 3]).unwrap();
        let mut opt = Adam::new();
        opt.step(&mut s, 1e-2);
        assert_eq!(s.get(id).data(), &[0.7; 3]);
    }

    #[test]
    fn quadratic_descends() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::filled(vec![1], 1.0), true);
        let mut opt = Adam::new();
        for _ in 0..1 {
            let w = s.get(id).data()[0];
            s.get_mut(id).accumulate_grad(&[2.0 * w]).unwrap();
            opt.step(&mut s, 0.1);
        }
        let w = s.get(id).data()[0];
        assert!(w < 1.0 && w > 0.0);
        // first bias-corrected step has magnitude lr
        assert!((w - 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_untouched_and_grads_cleared() {
        let mut s = ParamStore::new();
        let f = s.add("f", Tensor::filled(vec![2], 1.0), false);
        let w = s.add("w", Tensor::filled(vec![2], 1.0), true);
        s.get_mut(w).accumulate_grad(&[1.0, -1.0]).unwrap();
        let before = s.frozen_checksum();
        let mut opt = Adam::new();
        for _ in 0..100 {
            s.get_mut(w).accumulate_grad(&[1.0, -1.0]).unwrap();
            opt.step(&mut s, 1e-3);
        }
        assert_eq!(before, s.frozen_checksum());
        assert_eq!(s.get(f).data(), &[1.0, 1.0]);
        assert!(s.get(w).grad().is_none());
        assert_eq!(opt.steps(), 100);
    }
}
