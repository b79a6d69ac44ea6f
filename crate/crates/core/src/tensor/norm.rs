use super::{Scalar, Tensor, Var};
use crate::error::{dim_err, Result};

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Debug, Clone)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    /// Number of values reduced per channel.
    pub count: usize,
}

/// `(N, C, S)` view of a `[N × C × ...]` tensor.
fn channel_view(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(dim_err!("batch_norm needs at least [N, C], got {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn check_affine<T: Scalar>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(dim_err!(
            "batch_norm: affine params {:?}/{:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        ));
    }
    Ok(())
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Normalizes each channel with the batch's own statistics, then applies
    /// the per-channel affine `gamma · x̂ + beta`.
    pub fn batch_norm_train(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        eps: f64,
    ) -> Result<(Var<'g, T>, BatchNormStats<T>)> {
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let shape = x.shape().to_vec();
        let (n, c, s) = channel_view(&shape)?;
        check_affine(c, &gm, &bt)?;
        let m = n * s;
        let inv_m = T::one() / T::from_f64(m as f64);
        let eps = T::from_f64(eps);
        let xd = x.data();
        let plane = move |b: usize, ch: usize| (b * c + ch) * s;

        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for b in 0..n {
                acc += xd[plane(b, ch)..plane(b, ch) + s].iter().copied().sum::<T>();
            }
            let mu = acc * inv_m;
            let mut sq = T::zero();
            for b in 0..n {
                for &v in &xd[plane(b, ch)..plane(b, ch) + s] {
                    sq += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq * inv_m;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let (g, bb) = (gm.data()[ch], bt.data()[ch]);
                for i in plane(b, ch)..plane(b, ch) + s {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g * h + bb;
                }
            }
        }
        let value = Tensor::new(shape.clone(), out)?;
        let stats = BatchNormStats {
            mean,
            var,
            count: m,
        };
        let var_out = self.graph().apply("batch_norm", &[self, gamma, beta], value, move |g, need| {
            let gd = g.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    for i in plane(b, ch)..plane(b, ch) + s {
                        dgamma[ch] += gd[i] * xhat[i];
                        dbeta[ch] += gd[i];
                    }
                }
            }
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); gd.len()];
                for ch in 0..c {
                    let k = gm.data()[ch] * inv_std[ch];
                    let (mg, mgx) = (dbeta[ch] * inv_m, dgamma[ch] * inv_m);
                    for b in 0..n {
                        for i in plane(b, ch)..plane(b, ch) + s {
                            dx[i] = k * (gd[i] - mg - xhat[i] * mgx);
                        }
                    }
                }
                Tensor::new(shape.clone(), dx).expect("shape")
            });
            vec![
                dx,
                need[1].then(|| Tensor::new([c], dgamma).expect("shape")),
                need[2].then(|| Tensor::new([c], dbeta).expect("shape")),
            ]
        });
        Ok((var_out, stats))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var<'g, T>> {
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let shape = x.shape().to_vec();
        let (n, c, s) = channel_view(&shape)?;
        check_affine(c, &gm, &bt)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(dim_err!("batch_norm: running statistics do not match {c} channels"));
        }
        let eps = T::from_f64(eps);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        let xd = x.data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * s;
                for i in start..start + s {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gm.data()[ch] * xhat[i] + bt.data()[ch];
                }
            }
        }
        let value = Tensor::new(shape.clone(), out)?;
        Ok(self.graph().apply("batch_norm_eval", &[self, gamma, beta], value, move |g, need| {
            let gd = g.data();
            let mut dx = need[0].then(|| vec![T::zero(); gd.len()]);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let start = (b * c + ch) * s;
                    let k = gm.data()[ch] * inv_std[ch];
                    for i in start..start + s {
                        dgamma[ch] += gd[i] * xhat[i];
                        dbeta[ch] += gd[i];
                        if let Some(dx) = dx.as_mut() {
                            dx[i] = gd[i] * k;
                        }
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::new(shape.clone(), d).expect("shape")),
                need[1].then(|| Tensor::new([c], dgamma).expect("shape")),
                need[2].then(|| Tensor::new([c], dbeta).expect("shape")),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Graph, Tensor};

    #[test]
    fn train_mode_standardizes_each_channel() {
        let g = Graph::new();
        let x = g.constant(
            Tensor::from_f64([2, 2, 1, 2], &[1., 2., 10., 20., 3., 4., 30., 40.]).unwrap(),
        );
        let gamma = g.constant(Tensor::ones([2]));
        let beta = g.constant(Tensor::zeros([2]));
        let (y, stats) = x.batch_norm_train(gamma, beta, 1e-5).unwrap();
        assert_eq!(stats.mean, vec![2.5, 25.0]);
        assert_eq!(stats.count, 4);
        let y = y.value();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| (0..2).map(move |i| (b, i)))
                .map(|(b, i)| y.at(&[b, ch, 0, i]))
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / 4.0;
            let var: f64 = vals.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_mode_uses_given_statistics() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64([1, 1, 1, 2], &[3.0, 5.0]).unwrap());
        let gamma = g.constant(Tensor::full([1], 2.0));
        let beta = g.constant(Tensor::full([1], 1.0));
        let y = x.batch_norm_eval(gamma, beta, &[1.0], &[4.0 - 1e-5], 1e-5).unwrap();
        let d = y.value();
        assert!((d.data()[0] - 3.0).abs() < 1e-12);
        assert!((d.data()[1] - 5.0).abs() < 1e-12);
    }
}
