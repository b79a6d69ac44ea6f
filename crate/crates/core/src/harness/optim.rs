//! SGD with momentum and a step learning-rate schedule.

use std::sync::Arc;

use crate::tensor::{ParamId, ParamStore, Scalar, Tensor};

/// Learning rate in effect during `epoch` (zero-based).
pub fn lr_at(base: f64, drops: &[usize], factor: f64, epoch: usize) -> f64 {
    drops.iter().filter(|&&d| d <= epoch).fold(base, |lr, _| lr * factor)
}

/// Momentum SGD step:
///
/// ```text
/// v ← m · v + g + λ · θ
/// θ ← θ − η · v
/// ```
///
/// `λ` applies only to parameters flagged for decay. Parameters without a
/// gradient are left untouched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        let m = T::from_f64(self.momentum);
        let lr = T::from_f64(lr);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            let wd = T::from_f64(if p.decay { self.weight_decay } else { 0.0 });
            let value = Arc::make_mut(&mut p.value);
            for ((v, &gi), theta) in p.momentum.data_mut().iter_mut().zip(g.data()).zip(value.data_mut()) {
                *v = m * *v + gi + wd * *theta;
                *theta -= lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops_at_listed_epochs() {
        let drops = [150, 180, 210];
        assert_eq!(lr_at(0.01, &drops, 0.1, 149), 0.01);
        assert!((lr_at(0.01, &drops, 0.1, 150) - 0.001).abs() < 1e-15);
        assert!((lr_at(0.01, &drops, 0.1, 239) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn momentum_and_decay_update() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::from_f64([1], &[1.0]).unwrap(), true);
        let b = store.add("b", Tensor::from_f64([1], &[1.0]).unwrap(), false);
        let sgd = Sgd {
            momentum: 0.9,
            weight_decay: 0.5,
        };
        let g = |v| Tensor::from_f64([1], &[v]).unwrap();
        sgd.step(&mut store, &[(a, g(1.0)), (b, g(1.0))], 0.1);
        assert!((store.get(a).value.item() - (1.0 - 0.1 * 1.5)).abs() < 1e-12);
        assert!((store.get(b).value.item() - 0.9).abs() < 1e-12);
        sgd.step(&mut store, &[(b, g(0.0))], 0.1);
        assert!((store.get(b).value.item() - (0.9 - 0.1 * 0.9)).abs() < 1e-12);
    }
}
