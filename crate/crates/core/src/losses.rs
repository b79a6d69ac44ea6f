//! Resampling, pooled feature distance, soft targets and the total objective.
//!
//! ```text
//! L_total = L_CE + α · L_KL(T) + β · L_RTK
//! L_RTK   = Σ_R Σ_s Ã[s, R] · ‖φ̃(m_R^T) − φ̃(resample(m_s^S))‖₂
//! ```
//!
//! `φ̃` averages a map over channels, flattens it and L2-normalizes it per
//! sample. Student maps are brought to the teacher map's size with SoftPool
//! (shrinking) or nearest-neighbour replication (growing).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::models::FeatureSet;
use crate::tensor::{Scalar, Tensor, Var};

/// Which distribution is the reference in the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(p_teacher ‖ p_student)`.
    TeacherReference,
    /// `KL(p_student ‖ p_teacher)`.
    StudentReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    /// Multiply the KL term by `T²`.
    pub t_squared: bool,
    pub kl_direction: KlDirection,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.9,
            beta: 200.0,
            temperature: 4.0,
            t_squared: true,
            kl_direction: KlDirection::TeacherReference,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn map_dims(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(dim_err!("{op} expects [N, C, H, W], got {shape:?}")),
    }
}

/// SoftPool with square windows.
pub fn softpool2d<'g, T: Scalar>(x: Var<'g, T>, window: usize, stride: usize) -> Result<Var<'g, T>> {
    softpool2d_rect(x, (window, window), (stride, stride))
}

/// SoftPool: each output is `Σ_i softmax(a)_i · a_i` over its window,
/// computed with max subtraction.
pub fn softpool2d_rect<'g, T: Scalar>(
    x: Var<'g, T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Var<'g, T>> {
    let xv = x.value();
    let (n, c, h, w) = map_dims(xv.shape(), "softpool2d")?;
    let ((kh, kw), (sh, sw)) = (window, stride);
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 || kh > h || kw > w {
        return Err(dim_err!(
            "softpool2d: window {window:?} / stride {stride:?} give no output for {h}x{w} input"
        ));
    }
    let (oh, ow) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
    let xd = xv.data();
    let planes = n * c;
    let mut out = vec![T::zero(); planes * oh * ow];
    // Softmax weight of each window element, window-major.
    let mut weights = vec![T::zero(); planes * oh * ow * kh * kw];
    for p in 0..planes {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (p * oh + oy) * ow + ox;
                let at = |dy: usize, dx: usize| src[(oy * sh + dy) * w + ox * sw + dx];
                let mut m = T::neg_infinity();
                for dy in 0..kh {
                    for dx in 0..kw {
                        m = m.max(at(dy, dx));
                    }
                }
                let wsl = &mut weights[o * kh * kw..(o + 1) * kh * kw];
                let mut total = T::zero();
                for dy in 0..kh {
                    for dx in 0..kw {
                        let e = (at(dy, dx) - m).exp();
                        wsl[dy * kw + dx] = e;
                        total += e;
                    }
                }
                let mut acc = T::zero();
                for dy in 0..kh {
                    for dx in 0..kw {
                        wsl[dy * kw + dx] /= total;
                        acc += wsl[dy * kw + dx] * at(dy, dx);
                    }
                }
                out[o] = acc;
            }
        }
    }
    let value = std::sync::Arc::new(Tensor::new([n, c, oh, ow], out)?);
    let y = value.clone();
    Ok(x.graph().apply("softpool2d", &[x], value, move |g, _| {
        let (gd, yd, xd) = (g.data(), y.data(), xv.data());
        let mut dx = vec![T::zero(); xd.len()];
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (p * oh + oy) * ow + ox;
                    for dy in 0..kh {
                        for dxx in 0..kw {
                            let idx = p * h * w + (oy * sh + dy) * w + ox * sw + dxx;
                            let wgt = weights[o * kh * kw + dy * kw + dxx];
                            dx[idx] += gd[o] * wgt * (T::one() + xd[idx] - yd[o]);
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::new([n, c, h, w], dx).expect("shape"))]
    }))
}

/// Nearest-neighbour upsampling by integer factors.
pub fn upsample_nearest<'g, T: Scalar>(x: Var<'g, T>, fh: usize, fw: usize) -> Result<Var<'g, T>> {
    let xv = x.value();
    let (n, c, h, w) = map_dims(xv.shape(), "upsample_nearest")?;
    if fh == 0 || fw == 0 {
        return Err(dim_err!("upsample factors must be positive, got {fh}x{fw}"));
    }
    let (oh, ow) = (h * fh, w * fw);
    let xd = xv.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(p * oh + y) * ow + xx] = xd[(p * h + y / fh) * w + xx / fw];
            }
        }
    }
    let value = Tensor::new([n, c, oh, ow], out)?;
    Ok(x.graph().apply("upsample_nearest", &[x], value, move |g, _| {
        let gd = g.data();
        let mut dx = vec![T::zero(); n * c * h * w];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    dx[(p * h + y / fh) * w + xx / fw] += gd[(p * oh + y) * ow + xx];
                }
            }
        }
        vec![Some(Tensor::new([n, c, h, w], dx).expect("shape"))]
    }))
}

/// How one axis of extent `from` reaches `to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ratio {
    Same,
    Shrink(usize),
    Grow(usize),
}

fn ratio(from: usize, to: usize, axis: &str) -> Result<Ratio> {
    if to == 0 {
        return Err(Error::Resample(format!("target {axis} must be positive")));
    }
    if from == to {
        Ok(Ratio::Same)
    } else if from > to && from % to == 0 {
        Ok(Ratio::Shrink(from / to))
    } else if to > from && to % from == 0 {
        Ok(Ratio::Grow(to / from))
    } else {
        Err(Error::Resample(format!(
            "cannot resample {axis} {from} to {to}: the ratio is not an integer; \
             choose tap points whose feature sizes divide each other"
        )))
    }
}

/// Checks that a `from`-sized map can be resampled to `to` without
/// building anything.
pub fn check_resample(from: (usize, usize), to: (usize, usize)) -> Result<()> {
    ratio(from.0, to.0, "height")?;
    ratio(from.1, to.1, "width")?;
    Ok(())
}

/// Brings a map to `target_h × target_w`: SoftPool with window = stride =
/// ratio on shrinking axes, nearest-neighbour replication on growing axes.
pub fn resample_to<'g, T: Scalar>(x: Var<'g, T>, target_h: usize, target_w: usize) -> Result<Var<'g, T>> {
    let (_, _, h, w) = map_dims(&x.shape(), "resample_to")?;
    let (rh, rw) = (ratio(h, target_h, "height")?, ratio(w, target_w, "width")?);
    let shrink = |r| if let Ratio::Shrink(f) = r { f } else { 1 };
    let grow = |r| if let Ratio::Grow(f) = r { f } else { 1 };
    let mut y = x;
    if (shrink(rh), shrink(rw)) != (1, 1) {
        let f = (shrink(rh), shrink(rw));
        y = softpool2d_rect(y, f, f)?;
    }
    if (grow(rh), grow(rw)) != (1, 1) {
        y = upsample_nearest(y, grow(rh), grow(rw))?;
    }
    Ok(y)
}

/// `φ̃`: channel mean, flatten, per-sample L2 normalization.
/// `[N, C, H, W] → [N, H·W]`.
pub fn channel_pool_l2norm<'g, T: Scalar>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let (n, _, h, w) = map_dims(&x.shape(), "channel_pool_l2norm")?;
    x.mean_axis(1)?.reshape([n, h * w])?.l2_normalize(1)
}

/// Transformed teacher feature: `φ̃(m^T)` plus the spatial size the student
/// maps must be resampled to.
#[derive(Debug, Clone, Copy)]
pub struct TeacherTarget<'g, T: Scalar> {
    pub height: usize,
    pub width: usize,
    /// `[N, H·W]`, treated as a constant.
    pub phi: Var<'g, T>,
}

/// Detached `φ̃` of every teacher tap.
pub fn teacher_targets<'g, T: Scalar>(teacher: &FeatureSet<'g, T>) -> Result<Vec<TeacherTarget<'g, T>>> {
    teacher
        .maps
        .iter()
        .map(|m| {
            let s = m.shape();
            let phi = channel_pool_l2norm(m.detach())?.detach();
            Ok(TeacherTarget {
                height: s[2],
                width: s[3],
                phi,
            })
        })
        .collect()
}

/// Feature distance loss over the retained teacher features.
///
/// `weights` is `Ã` (`[n_s × n_t]`); only columns listed in `retained`
/// contribute. Each distance is averaged over the batch. Teacher features
/// never receive gradient.
pub fn rtk_loss<'g, T: Scalar>(
    teacher: &FeatureSet<'g, T>,
    student: &FeatureSet<'g, T>,
    weights: Var<'g, T>,
    retained: &[usize],
) -> Result<Var<'g, T>> {
    rtk_loss_with_targets(&teacher_targets(teacher)?, student, weights, retained)
}

/// [`rtk_loss`] with precomputed teacher targets.
pub fn rtk_loss_with_targets<'g, T: Scalar>(
    targets: &[TeacherTarget<'g, T>],
    student: &FeatureSet<'g, T>,
    weights: Var<'g, T>,
    retained: &[usize],
) -> Result<Var<'g, T>> {
    let (n_s, n_t) = (student.count(), targets.len());
    if weights.shape() != [n_s, n_t] {
        return Err(dim_err!(
            "attention weights {:?} do not match {n_s} student and {n_t} teacher features",
            weights.shape()
        ));
    }
    if let Some(&bad) = retained.iter().find(|&&r| r >= n_t) {
        return Err(dim_err!("retained teacher index {bad} out of range for {n_t} features"));
    }
    let graph = weights.graph();
    let mut total = graph.scalar(T::zero());
    let mut phis: HashMap<(usize, usize, usize), Var<'g, T>> = HashMap::new();
    for &r in retained {
        let t = &targets[r];
        let col = weights.select(1, r)?;
        for (s, m) in student.maps.iter().enumerate() {
            let key = (s, t.height, t.width);
            let phi = match phis.get(&key) {
                Some(&p) => p,
                None => {
                    let p = channel_pool_l2norm(resample_to(*m, t.height, t.width)?)?;
                    phis.insert(key, p);
                    p
                }
            };
            if phi.shape() != t.phi.shape() {
                return Err(dim_err!(
                    "student feature {s} gives {:?}, teacher feature {r} gives {:?}",
                    phi.shape(),
                    t.phi.shape()
                ));
            }
            let dist = phi.sub(t.phi)?.l2_norm(1)?.mean();
            total = total.add(dist.mul(col.select(0, s)?)?)?;
        }
    }
    Ok(total)
}

/// `softmax(logits / T)` per row.
pub fn soften<'g, T: Scalar>(logits: Var<'g, T>, temperature: f64) -> Result<Var<'g, T>> {
    check_temperature(temperature)?;
    logits.scale(T::from_f64(1.0 / temperature)).softmax(1)
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {temperature}")))
    }
}

/// Batch-mean KL divergence between softened distributions, optionally
/// scaled by `T²`. The teacher side is a constant.
pub fn kl_soft_loss<'g, T: Scalar>(
    student_logits: Var<'g, T>,
    teacher_logits: Var<'g, T>,
    temperature: f64,
    t_squared: bool,
    direction: KlDirection,
) -> Result<Var<'g, T>> {
    check_temperature(temperature)?;
    let (ss, ts) = (student_logits.shape(), teacher_logits.shape());
    if ss != ts || ss.len() != 2 {
        return Err(dim_err!("kl_soft_loss: student logits {ss:?} vs teacher logits {ts:?}"));
    }
    let inv_t = T::from_f64(1.0 / temperature);
    let log_s = student_logits.scale(inv_t).log_softmax(1)?;
    let log_t = teacher_logits.detach().scale(inv_t).log_softmax(1)?;
    let (log_p, log_q) = match direction {
        KlDirection::TeacherReference => (log_t, log_s),
        KlDirection::StudentReference => (log_s, log_t),
    };
    let kl = log_p.exp().mul(log_p.sub(log_q)?)?.sum();
    let mut scale = 1.0 / ss[0] as f64;
    if t_squared {
        scale *= temperature * temperature;
    }
    Ok(kl.scale(T::from_f64(scale)))
}

/// Mean negative log-likelihood of the true labels.
pub fn cross_entropy_loss<'g, T: Scalar>(logits: Var<'g, T>, labels: &[usize]) -> Result<Var<'g, T>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(dim_err!(
            "cross_entropy_loss: logits {shape:?} with {} labels",
            labels.len()
        ));
    }
    let (n, k) = (shape[0], shape[1]);
    let mut onehot = Tensor::zeros([n, k]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Data(format!("label {y} out of range for {k} classes")));
        }
        onehot.data_mut()[i * k + y] = T::one();
    }
    let picked = logits.log_softmax(1)?.mul(logits.graph().constant(onehot))?.sum();
    Ok(picked.scale(T::from_f64(-1.0 / n as f64)))
}

/// `ce + α · kl + β · rtk`. Absent terms and terms with zero weight are
/// left out of the graph entirely.
pub fn total_loss<'g, T: Scalar>(
    ce: Var<'g, T>,
    kl: Option<Var<'g, T>>,
    rtk: Option<Var<'g, T>>,
    cfg: &LossConfig,
) -> Result<Var<'g, T>> {
    let mut total = ce;
    for (term, weight) in [(kl, cfg.alpha), (rtk, cfg.beta)] {
        if let Some(t) = term {
            if weight != 0.0 {
                total = total.add(t.scale(T::from_f64(weight)))?;
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn softpool_examples() {
        let g = Graph::<f64>::new();
        let c = softpool2d(g.constant(Tensor::full([1, 1, 2, 2], 1.7)), 2, 2).unwrap();
        assert!((c.item() - 1.7).abs() < 1e-12);
        let x = g.constant(t(&[1, 1, 1, 2], &[0.0, 3f64.ln()]));
        let y = softpool2d_rect(x, (1, 2), (1, 2)).unwrap().item();
        assert!((y - 3.0 * 3f64.ln() / 4.0).abs() < 1e-12);
        assert!((y - 0.8240).abs() < 1e-4);
        assert_eq!(
            softpool2d(g.constant(Tensor::zeros([1, 1, 2, 2])), 3, 1).unwrap_err().kind(),
            "dimension"
        );
    }

    #[test]
    fn resample_rules() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(resample_to(x, 2, 2).unwrap().id(), x.id());
        let up = resample_to(x, 4, 4).unwrap().value();
        assert_eq!(up.at(&[0, 0, 1, 1]), 1.0);
        assert_eq!(up.at(&[0, 0, 0, 3]), 2.0);
        assert_eq!(up.at(&[0, 0, 3, 0]), 3.0);
        let down = resample_to(g.constant(Tensor::full([1, 2, 4, 4], 0.3)), 2, 2).unwrap().value();
        assert_eq!(down.shape(), &[1, 2, 2, 2]);
        assert!(down.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
        let err = resample_to(x, 3, 3).unwrap_err();
        assert_eq!(err.kind(), "resample");
        assert!(err.to_string().contains("tap points"));
    }

    #[test]
    fn channel_pool_examples() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2, 1, 1], &[2.0, 4.0]));
        assert_eq!(channel_pool_l2norm(x).unwrap().value().data(), &[1.0]);
        let single = g.constant(t(&[1, 1, 1, 2], &[3.0, 4.0]));
        assert_eq!(channel_pool_l2norm(single).unwrap().value().data(), &[0.6, 0.8]);
    }

    #[test]
    fn rtk_loss_zero_cases() {
        let g = Graph::<f64>::new();
        let m = g.constant(t(&[2, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0, 0.5, 0.1, 0.2, 0.9]));
        let teacher = FeatureSet { maps: vec![m, m] };
        let student = FeatureSet { maps: vec![m] };
        let w = g.constant(t(&[1, 2], &[1.0, 1.0]));
        assert!(rtk_loss(&teacher, &student, w, &[0, 1]).unwrap().item().abs() < 1e-9);
        let other = g.constant(Tensor::ones([2, 1, 2, 2]));
        let student = FeatureSet { maps: vec![other] };
        assert_eq!(rtk_loss(&teacher, &student, w, &[]).unwrap().item(), 0.0);
        assert!(rtk_loss(&teacher, &student, w, &[0]).unwrap().item() > 0.0);
        let bad = g.constant(Tensor::ones([2, 2]));
        assert_eq!(rtk_loss(&teacher, &student, bad, &[0]).unwrap_err().kind(), "dimension");
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let g = Graph::<f64>::new();
        let tm = g.variable(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let sm = g.variable(t(&[1, 1, 2, 2], &[4.0, 1.0, 1.0, 2.0]));
        let w = g.constant(t(&[1, 1], &[1.0]));
        let loss = rtk_loss(&FeatureSet { maps: vec![tm] }, &FeatureSet { maps: vec![sm] }, w, &[0]).unwrap();
        let tl = g.variable(t(&[1, 2], &[0.3, -0.2]));
        let sl = g.variable(t(&[1, 2], &[0.1, 0.4]));
        let kl = kl_soft_loss(sl, tl, 4.0, true, KlDirection::TeacherReference).unwrap();
        g.backward(loss.add(kl).unwrap()).unwrap();
        assert!(tm.grad().is_none());
        assert!(tl.grad().is_none());
        assert!(sm.grad().is_some() && sl.grad().is_some());
    }

    #[test]
    fn soften_examples() {
        let g = Graph::<f64>::new();
        let p = soften(g.constant(t(&[1, 2], &[0.0, 9f64.ln()])), 2.0).unwrap().value();
        assert!((p.data()[0] - 0.25).abs() < 1e-12 && (p.data()[1] - 0.75).abs() < 1e-12);
        let flat = soften(g.constant(t(&[1, 3], &[-10.0, 0.0, 10.0])), 1e6).unwrap().value();
        assert!(flat.data()[2] - flat.data()[0] < 1e-5);
        assert_eq!(soften(g.constant(Tensor::zeros([1, 2])), 0.0).unwrap_err().kind(), "config");
    }

    #[test]
    fn kl_examples() {
        let g = Graph::<f64>::new();
        // Teacher p = [0.75, 0.25], student q = [0.5, 0.5].
        let teacher = g.constant(t(&[1, 2], &[3f64.ln(), 0.0]));
        let student = g.constant(Tensor::zeros([1, 2]));
        let kl = kl_soft_loss(student, teacher, 1.0, true, KlDirection::TeacherReference).unwrap();
        let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl.item() - want).abs() < 1e-12);
        assert!((kl.item() - 0.13081).abs() < 1e-5);
        let same = kl_soft_loss(teacher, teacher, 3.0, true, KlDirection::TeacherReference).unwrap();
        assert!(same.item().abs() < 1e-9);
        let wrong = g.constant(Tensor::zeros([1, 3]));
        assert_eq!(
            kl_soft_loss(wrong, teacher, 1.0, true, KlDirection::TeacherReference).unwrap_err().kind(),
            "dimension"
        );
    }

    #[test]
    fn cross_entropy_examples() {
        let g = Graph::<f64>::new();
        let l = cross_entropy_loss(g.constant(t(&[1, 2], &[0.0, 3f64.ln()])), &[1]).unwrap();
        assert!((l.item() + 0.75f64.ln()).abs() < 1e-12);
        let u = cross_entropy_loss(g.constant(Tensor::zeros([3, 10])), &[0, 4, 9]).unwrap();
        assert!((u.item() - 10f64.ln()).abs() < 1e-12);
        let sure = cross_entropy_loss(g.constant(t(&[1, 2], &[20.0, 0.0])), &[0]).unwrap();
        assert!(sure.item() < 1e-8);
        let err = cross_entropy_loss(g.constant(Tensor::zeros([1, 2])), &[2]).unwrap_err();
        assert_eq!(err.kind(), "data");
    }

    #[test]
    fn total_loss_arithmetic() {
        let g = Graph::<f64>::new();
        let (ce, kl, rtk) = (g.scalar(1.0), g.scalar(2.0), g.scalar(3.0));
        let cfg = LossConfig {
            alpha: 0.5,
            beta: 0.1,
            ..LossConfig::default()
        };
        let v = total_loss(ce, Some(kl), Some(rtk), &cfg).unwrap().item();
        assert!((v - 2.3).abs() < 1e-12);
        let zero = LossConfig {
            alpha: 0.0,
            beta: 0.0,
            ..cfg
        };
        assert_eq!(total_loss(ce, Some(kl), Some(rtk), &zero).unwrap().id(), ce.id());
        assert!(LossConfig { temperature: 0.0, ..cfg }.validate().is_err());
        assert!(LossConfig { beta: -1.0, ..cfg }.validate().is_err());
    }
}
