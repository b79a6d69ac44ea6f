//! Finite-difference checks for the attention path and every loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtk::attention::{attention_from_pooled, pool_batch_mean, AttnVars};
use rtk::gradcheck::{check_gradients_wrt, Tolerance, DEFAULT_STEP};
use rtk::losses::{
    channel_pool_l2norm, cross_entropy_loss, kl_soft_loss, resample_to, rtk_loss, softpool2d_rect, total_loss,
    upsample_nearest, KlDirection, LossConfig,
};
use rtk::models::FeatureSet;
use rtk::tensor::Tensor;

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
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

macro_rules! gradcheck_op {
    ($name:ident, |$rng:ident| $inputs:expr, |$g:ident, $v:ident| $body:expr) => {
        gradcheck_op!($name, wrt = .., |$rng| $inputs, |$g, $v| $body);
    };
    ($name:ident, wrt = $wrt:expr, |$rng:ident| $inputs:expr, |$g:ident, $v:ident| $body:expr) => {
        pub fn $name() {
            let mut $rng = ChaCha8Rng::seed_from_u64(stringify!($name).len() as u64 + 100);
            for trial in 0..TRIALS {
                let inputs: Vec<Tensor<f64>> = $inputs;
                let wrt: Vec<usize> = (0..inputs.len()).collect::<Vec<_>>()[$wrt].to_vec();
                let res = check_gradients_wrt(&inputs, &wrt, |$g, $v| $body, DEFAULT_STEP, Tolerance::DEFAULT);
                if let Err(m) = res {
                    panic!("{} trial {trial}: {m}", stringify!($name));
                }
            }
        }
    };
}

// Two teacher taps (channels 2, 3) and two student taps (channels 2, 1),
// attention width 2. Inputs: 4 maps, then W^Q ×2, W^K ×2, W ×2, P_T, P_S.
gradcheck_op!(attention_matrix_path, |rng| {
    let n = dims(&mut rng, 1, 2);
    let d = 2;
    vec![
        rand_tensor(&[n, 2, 2, 2], &mut rng),
        rand_tensor(&[n, 3, 1, 1], &mut rng),
        rand_tensor(&[n, 2, 2, 2], &mut rng),
        rand_tensor(&[n, 1, 2, 1], &mut rng),
        rand_tensor(&[d, 2], &mut rng),
        rand_tensor(&[d, 3], &mut rng),
        rand_tensor(&[d, 2], &mut rng),
        rand_tensor(&[d, 1], &mut rng),
        rand_tensor(&[d, d], &mut rng),
        rand_tensor(&[d, d], &mut rng),
        rand_tensor(&[2, d], &mut rng),
        rand_tensor(&[2, d], &mut rng),
    ]
}, |_g, v| {
    let vars = AttnVars {
        query: vec![v[4], v[5]],
        key: vec![v[6], v[7]],
        bilinear: vec![v[8], v[9]],
        pos_teacher: v[10],
        pos_student: v[11],
    };
    let tp = pool_batch_mean(&v[0..2])?;
    let sp = pool_batch_mean(&v[2..4])?;
    let a = attention_from_pooled(&tp, &sp, &vars)?;
    a.columns.square().sum().add(a.logits.sum())
});

gradcheck_op!(softpool_windows, |rng| {
    let (h, w) = (dims(&mut rng, 2, 5), dims(&mut rng, 2, 5));
    vec![rand_tensor(&[dims(&mut rng, 1, 2), dims(&mut rng, 1, 2), h, w], &mut rng)]
}, |_g, v| {
    let s = v[0].shape();
    let win = (1 + s[2] % 2, 2);
    let stride = (1 + s[3] % 2, 1 + s[2] % 3);
    softpool2d_rect(v[0], (win.0.min(s[2]), win.1.min(s[3])), stride)
});

gradcheck_op!(upsample_and_resample, |rng| {
    vec![rand_tensor(&[dims(&mut rng, 1, 2), dims(&mut rng, 1, 2), 4, 2], &mut rng)]
}, |_g, v| {
    let up = upsample_nearest(v[0], 1, 3)?.square().sum();
    let mixed = resample_to(v[0], 2, 4)?.square().sum();
    let down = resample_to(v[0], 1, 1)?.sum();
    up.add(mixed)?.add(down)
});

gradcheck_op!(channel_pool_l2, |rng| {
    vec![rand_tensor(&[dims(&mut rng, 1, 3), dims(&mut rng, 1, 3), dims(&mut rng, 1, 3), 2], &mut rng)]
}, |_g, v| channel_pool_l2norm(v[0]));

// Student maps and attention weights vary; teacher maps are fixed inputs.
gradcheck_op!(rtk_distance, wrt = 0..3, |rng| {
    let n = dims(&mut rng, 1, 2);
    vec![
        rand_tensor(&[n, 2, 4, 4], &mut rng),
        rand_tensor(&[n, 1, 2, 2], &mut rng),
        rand_tensor(&[2, 3], &mut rng),
        rand_tensor(&[n, 3, 2, 2], &mut rng),
        rand_tensor(&[n, 2, 4, 4], &mut rng),
        rand_tensor(&[n, 1, 1, 1], &mut rng),
    ]
}, |_g, v| {
    let student = FeatureSet { maps: vec![v[0], v[1]] };
    let teacher = FeatureSet { maps: vec![v[3], v[4], v[5]] };
    rtk_loss(&teacher, &student, v[2], &[0, 1, 2])
});

// Only the student logits are differentiated; the teacher side is constant.
gradcheck_op!(kl_both_directions, wrt = 0..1, |rng| {
    let (n, k) = (dims(&mut rng, 1, 3), dims(&mut rng, 2, 5));
    vec![rand_tensor(&[n, k], &mut rng), rand_tensor(&[n, k], &mut rng)]
}, |_g, v| {
    let t = 1.0 + v[0].shape()[1] as f64;
    let a = kl_soft_loss(v[0], v[1], t, true, KlDirection::TeacherReference)?;
    let b = kl_soft_loss(v[0], v[1], 0.7, false, KlDirection::StudentReference)?;
    a.add(b)
});

gradcheck_op!(cross_entropy, |rng| {
    vec![rand_tensor(&[3, dims(&mut rng, 2, 5)], &mut rng)]
}, |_g, v| {
    let k = v[0].shape()[1];
    cross_entropy_loss(v[0], &[0, k - 1, 1])
});

// 2-class toy network on 8-pixel (2×4) images: conv → relu (tapped) → GAP →
// linear. Inputs: conv weight, head weight, head bias.
gradcheck_op!(total_loss_toy_network, |rng| {
    vec![
        rand_tensor(&[3, 1, 3, 3], &mut rng),
        rand_tensor(&[2, 3], &mut rng),
        rand_tensor(&[2], &mut rng),
    ]
}, |g, v| {
    let mut data = ChaCha8Rng::seed_from_u64(9);
    let x = g.constant(rand_tensor(&[2, 1, 2, 4], &mut data));
    let teacher_map = g.constant(rand_tensor(&[2, 2, 2, 4], &mut data));
    let teacher_logits = g.constant(rand_tensor(&[2, 2], &mut data));
    let weights = g.constant(Tensor::from_f64([1, 1], &[0.8]).unwrap());
    let feat = x.conv2d(v[0], 1, 1)?.relu();
    let logits = feat.global_avg_pool()?.linear(v[1], v[2])?;
    let ce = cross_entropy_loss(logits, &[0, 1])?;
    let kl = kl_soft_loss(logits, teacher_logits, 4.0, true, KlDirection::TeacherReference)?;
    let rtk = rtk_loss(
        &FeatureSet { maps: vec![teacher_map] },
        &FeatureSet { maps: vec![feat] },
        weights,
        &[0],
    )?;
    let cfg = LossConfig {
        alpha: 0.9,
        beta: 2.0,
        ..LossConfig::default()
    };
    total_loss(ce, Some(kl), Some(rtk), &cfg)
});

cases! {
    attention_matrix_path,
    softpool_windows,
    upsample_and_resample,
    channel_pool_l2,
    rtk_distance,
    kl_both_directions,
    cross_entropy,
    total_loss_toy_network,
}
