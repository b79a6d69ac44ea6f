//! Finite-difference checks for every differentiable tensor primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtk::gradcheck::{check_gradients, Tolerance, DEFAULT_STEP};
use rtk::tensor::{concat, stack, Tensor};

/// Registers the checks for the test harness and the acceptance runner.
macro_rules! cases {
    ($($name:ident),* $(,)?) => {
        #[allow(dead_code)]
        pub const CASES: &[(&str, fn())] = &[$((stringify!($name), $name)),*];

        #[cfg(test)]
        mod harness {
            $(
                #[test]
                fn $name() {
                    super::$name()
                }
            )*
        }
    };
}

const TRIALS: usize = 20;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    // Stay away from kinks of relu / max / norms.
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect::<Vec<_>>();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    rand_tensor(shape, rng).map(|v| v.abs() + 0.1)
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

macro_rules! gradcheck_op {
    ($name:ident, |$rng:ident| $inputs:expr, |$g:ident, $v:ident| $body:expr) => {
        pub fn $name() {
            let mut $rng = ChaCha8Rng::seed_from_u64(stringify!($name).len() as u64);
            for trial in 0..TRIALS {
                let inputs: Vec<Tensor<f64>> = $inputs;
                let res = check_gradients(
                    &inputs,
                    |$g, $v| $body,
                    DEFAULT_STEP,
                    Tolerance::DEFAULT,
                );
                if let Err(m) = res {
                    panic!("{} trial {trial}: {m}", stringify!($name));
                }
            }
        }
    };
}

gradcheck_op!(add_sub_mul, |rng| {
    let s = [dims(&mut rng, 1, 3), dims(&mut rng, 1, 4)];
    vec![rand_tensor(&s, &mut rng), rand_tensor(&s, &mut rng)]
}, |_g, v| v[0].add(v[1])?.mul(v[0])?.sub(v[1].scale(0.7)));

gradcheck_op!(scalar_ops, |rng| vec![rand_tensor(&[dims(&mut rng, 1, 5)], &mut rng)],
    |_g, v| Ok(v[0].add_scalar(0.3).scale(-1.7).neg().square()));

gradcheck_op!(sum_and_mean, |rng| vec![rand_tensor(&[2, dims(&mut rng, 1, 4)], &mut rng)],
    |_g, v| Ok(v[0].sum().add(v[0].square().mean())?));

gradcheck_op!(axis_reductions, |rng| {
    let s = [dims(&mut rng, 1, 3), dims(&mut rng, 1, 3), dims(&mut rng, 1, 3)];
    vec![rand_tensor(&s, &mut rng)]
}, |_g, v| v[0].square().sum_axis(1)?.mean_axis(0));

gradcheck_op!(exp_log_sqrt, |rng| vec![positive(&[dims(&mut rng, 1, 6)], &mut rng)],
    |_g, v| Ok(v[0].log().exp().sqrt().log()));

gradcheck_op!(relu, |rng| vec![rand_tensor(&[dims(&mut rng, 1, 8)], &mut rng)],
    |_g, v| Ok(v[0].relu()));

gradcheck_op!(softmax_each_axis, |rng| {
    vec![rand_tensor(&[dims(&mut rng, 1, 3), dims(&mut rng, 2, 4), dims(&mut rng, 1, 3)], &mut rng)]
}, |_g, v| {
    let a = v[0].softmax(0)?.square().sum();
    let b = v[0].softmax(1)?.square().sum();
    let c = v[0].softmax(2)?.square().sum();
    a.add(b)?.add(c)
});

gradcheck_op!(log_softmax, |rng| vec![rand_tensor(&[dims(&mut rng, 1, 3), dims(&mut rng, 2, 5)], &mut rng)],
    |_g, v| v[0].log_softmax(1));

gradcheck_op!(matmul, |rng| {
    let (m, k, n) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 4), dims(&mut rng, 1, 4));
    vec![rand_tensor(&[m, k], &mut rng), rand_tensor(&[k, n], &mut rng)]
}, |_g, v| v[0].matmul(v[1]));

gradcheck_op!(linear, |rng| {
    let (n, i, o) = (dims(&mut rng, 1, 4), dims(&mut rng, 1, 4), dims(&mut rng, 1, 4));
    vec![rand_tensor(&[n, i], &mut rng), rand_tensor(&[o, i], &mut rng), rand_tensor(&[o], &mut rng)]
}, |_g, v| v[0].linear(v[1], v[2]));

gradcheck_op!(reshape_transpose_select_gather, |rng| {
    vec![rand_tensor(&[dims(&mut rng, 2, 3), dims(&mut rng, 2, 4)], &mut rng)]
}, |_g, v| {
    let s = v[0].shape();
    let t = v[0].transpose()?.reshape([s[0] * s[1]])?.reshape([s[1], s[0]])?;
    let row = t.select(0, 1)?.square().sum();
    let picks: Vec<usize> = (0..s[0]).map(|r| r % s[1]).collect();
    row.add(v[0].gather_rows(&picks)?.sum())
});

gradcheck_op!(concat_and_stack, |rng| {
    let r = dims(&mut rng, 1, 3);
    vec![rand_tensor(&[r, 2], &mut rng), rand_tensor(&[r, 3], &mut rng)]
}, |_g, v| {
    let c = concat(&[v[0], v[1]], 1)?;
    let s = stack(&[v[0].select(1, 0)?, v[1].select(1, 2)?])?;
    c.square().sum().add(s.square().sum())
});

gradcheck_op!(l2_normalize_and_norm, |rng| {
    vec![rand_tensor(&[dims(&mut rng, 1, 3), dims(&mut rng, 2, 5)], &mut rng)]
}, |_g, v| {
    let n = v[0].l2_normalize(1)?;
    n.add(v[0])?.l2_norm(1)
});

gradcheck_op!(conv2d, |rng| {
    let (n, c, f) = (dims(&mut rng, 1, 2), dims(&mut rng, 1, 3), dims(&mut rng, 1, 3));
    let (h, w) = (dims(&mut rng, 3, 6), dims(&mut rng, 3, 6));
    let k = dims(&mut rng, 1, 3);
    vec![rand_tensor(&[n, c, h, w], &mut rng), rand_tensor(&[f, c, k, k], &mut rng)]
}, |_g, v| {
    let k = v[1].shape()[2];
    let stride = 1 + (v[0].shape()[2] % 2);
    v[0].conv2d(v[1], stride, k / 2)
});

gradcheck_op!(pools, |rng| {
    vec![rand_tensor(&[dims(&mut rng, 1, 2), dims(&mut rng, 1, 2), 4, 4], &mut rng)]
}, |_g, v| {
    let a = v[0].avg_pool2d(2, 2)?.sum();
    let m = v[0].max_pool2d(2, 1)?.square().sum();
    let gp = v[0].global_avg_pool()?.square().sum();
    a.add(m)?.add(gp)
});

gradcheck_op!(batch_norm_train, |rng| {
    let c = dims(&mut rng, 1, 3);
    vec![
        rand_tensor(&[dims(&mut rng, 2, 3), c, 2, 2], &mut rng),
        rand_tensor(&[c], &mut rng),
        rand_tensor(&[c], &mut rng),
    ]
}, |_g, v| Ok(v[0].batch_norm_train(v[1], v[2], 1e-5)?.0));

gradcheck_op!(batch_norm_eval, |rng| {
    let c = dims(&mut rng, 1, 3);
    vec![
        rand_tensor(&[dims(&mut rng, 1, 3), c, 2, 2], &mut rng),
        rand_tensor(&[c], &mut rng),
        rand_tensor(&[c], &mut rng),
    ]
}, |_g, v| {
    let c = v[1].shape()[0];
    let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
    let var: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
    v[0].batch_norm_eval(v[1], v[2], &mean, &var, 1e-5)
});

pub fn backward_is_linear_in_the_loss() {
    use rtk::Graph;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x = rand_tensor(&[3, 4], &mut rng);
        let w = rand_tensor(&[4, 2], &mut rng);
        let grad_of = |which: u8| {
            let g = Graph::new();
            let xv = g.variable(x.clone());
            let wv = g.constant(w.clone());
            let l1 = xv.matmul(wv).unwrap().relu().sum();
            let l2 = xv.softmax(1).unwrap().square().mean();
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => l1.add(l2).unwrap(),
            };
            g.backward(loss).unwrap();
            xv.grad().unwrap()
        };
        let (g1, g2, g12) = (grad_of(1), grad_of(2), grad_of(3));
        let sum = g1.zip_map(&g2, |a, b| a + b);
        assert!(sum.max_abs_diff(&g12) < 1e-9);
    }
}

cases! {
    add_sub_mul,
    scalar_ops,
    sum_and_mean,
    axis_reductions,
    exp_log_sqrt,
    relu,
    softmax_each_axis,
    log_softmax,
    matmul,
    linear,
    reshape_transpose_select_gather,
    concat_and_stack,
    l2_normalize_and_norm,
    conv2d,
    pools,
    batch_norm_train,
    batch_norm_eval,
    backward_is_linear_in_the_loss,
}
