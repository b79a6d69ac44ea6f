//! Teacher/student attention and representative-teacher-key selection.
//!
//! Every tapped feature map is global-average-pooled and averaged over the
//! batch, then projected: queries `q_i = relu(W_i^Q · φ(m_i^T))` for teacher
//! taps and keys `k_j = relu(W_j^K · φ(m_j^S))` for student taps. The
//! compatibility logits are
//!
//! ```text
//! z[i, j] = (q_iᵀ · W_j · k_j + p_iᵀ · p_j) / √d
//! ```
//!
//! and column `i` of the attention matrix `A ∈ R^{n_s × n_t}` is the softmax
//! of `z[i, ·]` over student features. The impact score of teacher feature
//! `i` is the mean of the `k` largest entries of its column; teacher
//! features scoring strictly above `tau` are retained.

mod export;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use export::AttentionExport;

use crate::error::{dim_err, Error, Result};
use crate::models::{Checkpoint, FeatureSet};
use crate::tensor::{stack, Binder, BoundParams, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Default embedding width.
pub const DEFAULT_DIM: usize = 64;

/// Trainable projections, bilinear maps and positional encodings.
#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    d: usize,
    teacher_channels: Vec<usize>,
    student_channels: Vec<usize>,
    store: ParamStore<T>,
    query: Vec<ParamId>,
    key: Vec<ParamId>,
    bilinear: Vec<ParamId>,
    pos_teacher: ParamId,
    pos_student: ParamId,
}

/// Shape description stored with an attention checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionShape {
    pub d: usize,
    pub teacher_channels: Vec<usize>,
    pub student_channels: Vec<usize>,
}

const ATTENTION_KIND: &str = "attention";

impl<T: Scalar> AttentionParams<T> {
    /// Projections are drawn from `N(0, 2/c)`, bilinear maps and positional
    /// encodings from `N(0, 1/d)`.
    pub fn new(teacher_channels: &[usize], student_channels: &[usize], d: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("attention width d must be at least 1".into()));
        }
        if teacher_channels.is_empty() || student_channels.is_empty() {
            return Err(Error::Config(
                "attention needs at least one teacher and one student feature".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let draw = |shape: [usize; 2], std: f64, rng: &mut ChaCha8Rng| {
            let normal = Normal::new(0.0, std).expect("std");
            let data = (0..shape[0] * shape[1])
                .map(|_| T::from_f64(normal.sample(rng)))
                .collect();
            Tensor::new(shape, data).expect("shape")
        };
        let unit = (1.0 / d as f64).sqrt();
        let query = teacher_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let t = draw([d, c], (2.0 / c as f64).sqrt(), &mut rng);
                store.add(format!("attention.query{i}"), t, true)
            })
            .collect();
        let key = student_channels
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                let t = draw([d, c], (2.0 / c as f64).sqrt(), &mut rng);
                store.add(format!("attention.key{j}"), t, true)
            })
            .collect();
        let bilinear = (0..student_channels.len())
            .map(|j| {
                let t = draw([d, d], unit, &mut rng);
                store.add(format!("attention.bilinear{j}"), t, true)
            })
            .collect();
        let pt = draw([teacher_channels.len(), d], unit, &mut rng);
        let pos_teacher = store.add("attention.pos_teacher", pt, false);
        let ps = draw([student_channels.len(), d], unit, &mut rng);
        let pos_student = store.add("attention.pos_student", ps, false);
        Ok(AttentionParams {
            d,
            teacher_channels: teacher_channels.to_vec(),
            student_channels: student_channels.to_vec(),
            store,
            query,
            key,
            bilinear,
            pos_teacher,
            pos_student,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n_teacher(&self) -> usize {
        self.teacher_channels.len()
    }

    pub fn n_student(&self) -> usize {
        self.student_channels.len()
    }

    pub fn shape(&self) -> AttentionShape {
        AttentionShape {
            d: self.d,
            teacher_channels: self.teacher_channels.clone(),
            student_channels: self.student_channels.clone(),
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Places every parameter on `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> (AttnVars<'g, T>, BoundParams<'g, T>) {
        let mut b = Binder::new(graph, &self.store, trainable);
        let query = self.query.iter().map(|&id| b.bind(id)).collect();
        let key = self.key.iter().map(|&id| b.bind(id)).collect();
        let bilinear = self.bilinear.iter().map(|&id| b.bind(id)).collect();
        let pos_teacher = b.bind(self.pos_teacher);
        let pos_student = b.bind(self.pos_student);
        let vars = AttnVars {
            query,
            key,
            bilinear,
            pos_teacher,
            pos_student,
        };
        (vars, b.finish())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let arrays = self
            .store
            .iter()
            .map(|(_, p)| crate::models::checkpoint_entry(p.name.clone(), p.value.shape(), p.value.data()))
            .collect();
        Checkpoint {
            kind: ATTENTION_KIND.into(),
            config: serde_json::to_value(self.shape()).expect("shape serializes"),
            arrays,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, origin: &std::path::Path) -> Result<Self> {
        if ckpt.kind != ATTENTION_KIND {
            return Err(Error::format(
                origin,
                format!("expected an attention checkpoint, found `{}`", ckpt.kind),
            ));
        }
        let shape: AttentionShape = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::format(origin, format!("bad attention config: {e}")))?;
        let mut params = Self::new(&shape.teacher_channels, &shape.student_channels, shape.d, 0)?;
        for p in params.store.iter_mut() {
            let data = crate::models::checkpoint_take(ckpt, &p.name, p.value.shape(), origin)?;
            p.value = std::sync::Arc::new(Tensor::new(p.value.shape().to_vec(), data)?);
        }
        Ok(params)
    }
}

/// Attention parameters as graph variables.
///
/// Fields are public so tests can differentiate with respect to arbitrary
/// parameter values.
#[derive(Debug, Clone)]
pub struct AttnVars<'g, T: Scalar> {
    /// `W_i^Q`, `[d × c_i]` per teacher feature.
    pub query: Vec<Var<'g, T>>,
    /// `W_j^K`, `[d × c_j]` per student feature.
    pub key: Vec<Var<'g, T>>,
    /// `W_j`, `[d × d]` per student feature.
    pub bilinear: Vec<Var<'g, T>>,
    /// `[n_t × d]`, row `i` is `p_i^T`.
    pub pos_teacher: Var<'g, T>,
    /// `[n_s × d]`, row `j` is `p_j^S`.
    pub pos_student: Var<'g, T>,
}

impl<'g, T: Scalar> AttnVars<'g, T> {
    pub fn dim(&self) -> usize {
        self.pos_teacher.shape()[1]
    }
}

/// Global average pool of each map, averaged over the batch: `[c]` per map.
pub fn pool_batch_mean<'g, T: Scalar>(maps: &[Var<'g, T>]) -> Result<Vec<Var<'g, T>>> {
    maps.iter().map(|m| m.global_avg_pool()?.mean_axis(0)).collect()
}

/// `relu(W · v)` for each pooled vector and its projection matrix.
pub fn project<'g, T: Scalar>(pooled: &[Var<'g, T>], proj: &[Var<'g, T>]) -> Result<Vec<Var<'g, T>>> {
    if pooled.len() != proj.len() {
        return Err(dim_err!(
            "{} pooled features but {} projection matrices",
            pooled.len(),
            proj.len()
        ));
    }
    pooled
        .iter()
        .zip(proj)
        .enumerate()
        .map(|(i, (v, w))| {
            let (vs, ws) = (v.shape(), w.shape());
            if vs.len() != 1 || ws.len() != 2 || ws[1] != vs[0] {
                return Err(dim_err!(
                    "feature {i}: projection {ws:?} does not accept {vs:?} channels"
                ));
            }
            Ok(w.matmul(v.reshape([vs[0], 1])?)?.reshape([ws[0]])?.relu())
        })
        .collect()
}

/// Query vectors `q_i`, one `[d]` vector per teacher tap.
pub fn compute_queries<'g, T: Scalar>(teacher: &FeatureSet<'g, T>, vars: &AttnVars<'g, T>) -> Result<Vec<Var<'g, T>>> {
    project(&pool_batch_mean(&teacher.maps)?, &vars.query)
}

/// Key vectors `k_j`, one `[d]` vector per student tap.
pub fn compute_keys<'g, T: Scalar>(student: &FeatureSet<'g, T>, vars: &AttnVars<'g, T>) -> Result<Vec<Var<'g, T>>> {
    project(&pool_batch_mean(&student.maps)?, &vars.key)
}

/// Logits `z`, `[n_t × n_s]`.
pub fn attention_logits<'g, T: Scalar>(
    queries: &[Var<'g, T>],
    keys: &[Var<'g, T>],
    vars: &AttnVars<'g, T>,
) -> Result<Var<'g, T>> {
    let d = vars.dim();
    if keys.len() != vars.bilinear.len() {
        return Err(dim_err!(
            "{} keys but {} bilinear maps",
            keys.len(),
            vars.bilinear.len()
        ));
    }
    if queries.is_empty() || queries.len() != vars.pos_teacher.shape()[0] || keys.len() != vars.pos_student.shape()[0] {
        return Err(dim_err!(
            "{} queries / {} keys do not match positional encodings {:?} / {:?}",
            queries.len(),
            keys.len(),
            vars.pos_teacher.shape(),
            vars.pos_student.shape()
        ));
    }
    let q = stack(queries)?;
    let transformed = keys
        .iter()
        .zip(&vars.bilinear)
        .map(|(k, w)| w.matmul(k.reshape([d, 1])?)?.reshape([d]))
        .collect::<Result<Vec<_>>>()?;
    let u = stack(&transformed)?;
    let content = q.matmul(u.transpose()?)?;
    let position = vars.pos_teacher.matmul(vars.pos_student.transpose()?)?;
    Ok(content.add(position)?.scale(T::from_f64(1.0 / (d as f64).sqrt())))
}

/// `A = softmax_j(z)ᵀ`, `[n_s × n_t]`; column `i` is a distribution over
/// student features.
pub fn attention_columns<'g, T: Scalar>(logits: Var<'g, T>) -> Result<Var<'g, T>> {
    if logits.shape().len() != 2 {
        return Err(dim_err!("attention logits must be [n_t, n_s], got {:?}", logits.shape()));
    }
    logits.softmax(1)?.transpose()
}

/// Logits `z` and the column-stochastic matrix `A` derived from them.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMatrix<'g, T: Scalar> {
    pub logits: Var<'g, T>,
    pub columns: Var<'g, T>,
}

/// Full attention path from batch-mean pooled features (`[c]` each).
pub fn attention_from_pooled<'g, T: Scalar>(
    teacher_pooled: &[Var<'g, T>],
    student_pooled: &[Var<'g, T>],
    vars: &AttnVars<'g, T>,
) -> Result<AttentionMatrix<'g, T>> {
    let q = project(teacher_pooled, &vars.query)?;
    let k = project(student_pooled, &vars.key)?;
    let logits = attention_logits(&q, &k, vars)?;
    Ok(AttentionMatrix {
        logits,
        columns: attention_columns(logits)?,
    })
}

/// Full attention path from tapped feature maps.
pub fn attention_matrix<'g, T: Scalar>(
    teacher: &FeatureSet<'g, T>,
    student: &FeatureSet<'g, T>,
    vars: &AttnVars<'g, T>,
) -> Result<AttentionMatrix<'g, T>> {
    attention_from_pooled(&pool_batch_mean(&teacher.maps)?, &pool_batch_mean(&student.maps)?, vars)
}

/// Top-k count and threshold of the selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RTKConfig {
    pub k: usize,
    pub tau: f64,
    /// Rescale retained columns to sum to one. Columns of `A` already do,
    /// so this only changes values by rounding.
    pub renormalize: bool,
}

impl RTKConfig {
    /// `k = ⌈n_s/2⌉`, `tau = 1/n_s`.
    pub fn defaults_for(n_s: usize) -> Self {
        RTKConfig {
            k: n_s.div_ceil(2).max(1),
            tau: 1.0 / n_s.max(1) as f64,
            renormalize: false,
        }
    }

    pub fn validate(&self, n_s: usize) -> Result<()> {
        if self.k == 0 || self.k > n_s {
            return Err(Error::Config(format!(
                "top-k count k = {} must lie in 1..={n_s}",
                self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("threshold tau = {} must lie in [0, 1]", self.tau)));
        }
        Ok(())
    }
}

/// Mean of the `k` largest entries of each column of `a` (`[n_s × n_t]`).
pub fn impact_scores<T: Scalar>(a: &Tensor<T>, k: usize) -> Result<Vec<T>> {
    if a.rank() != 2 {
        return Err(dim_err!("attention matrix must be [n_s, n_t], got {:?}", a.shape()));
    }
    let (n_s, n_t) = (a.shape()[0], a.shape()[1]);
    if k == 0 || k > n_s {
        return Err(Error::Config(format!("top-k count k = {k} must lie in 1..={n_s}")));
    }
    let inv_k = T::from_f64(1.0 / k as f64);
    Ok((0..n_t)
        .map(|i| {
            let mut col: Vec<T> = (0..n_s).map(|s| a.data()[s * n_t + i]).collect();
            col.sort_by(|x, y| y.as_f64().total_cmp(&x.as_f64()));
            col[..k].iter().copied().sum::<T>() * inv_k
        })
        .collect())
}

/// Retained teacher features and the masked attention matrix `Ã`.
#[derive(Debug, Clone, PartialEq)]
pub struct RTKSelection<T> {
    /// Sorted teacher indices with impact strictly above `tau`.
    pub retained: Vec<usize>,
    pub impact: Vec<T>,
    /// `[n_s × n_t]`, non-retained columns zeroed.
    pub masked: Tensor<T>,
}

impl<T: Scalar> RTKSelection<T> {
    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    /// `[n_s × n_t]` indicator of retained columns.
    pub fn column_mask(&self) -> Tensor<T> {
        column_mask(self.masked.shape()[0], self.masked.shape()[1], &self.retained)
    }
}

pub(crate) fn column_mask<T: Scalar>(n_s: usize, n_t: usize, retained: &[usize]) -> Tensor<T> {
    let mut m = Tensor::zeros([n_s, n_t]);
    for s in 0..n_s {
        for &i in retained {
            m.data_mut()[s * n_t + i] = T::one();
        }
    }
    m
}

/// Keeps teacher features whose impact score exceeds `cfg.tau`.
pub fn select_rtk<T: Scalar>(impact: &[T], a: &Tensor<T>, cfg: &RTKConfig) -> Result<RTKSelection<T>> {
    if a.rank() != 2 || a.shape()[1] != impact.len() {
        return Err(dim_err!(
            "{} impact scores do not match attention matrix {:?}",
            impact.len(),
            a.shape()
        ));
    }
    let (n_s, n_t) = (a.shape()[0], a.shape()[1]);
    let retained: Vec<usize> = (0..n_t).filter(|&i| impact[i].as_f64() > cfg.tau).collect();
    let mut masked = Tensor::zeros([n_s, n_t]);
    for &i in &retained {
        let sum: T = (0..n_s).map(|s| a.data()[s * n_t + i]).sum();
        for s in 0..n_s {
            let v = a.data()[s * n_t + i];
            masked.data_mut()[s * n_t + i] = if cfg.renormalize && sum > T::zero() { v / sum } else { v };
        }
    }
    Ok(RTKSelection {
        retained,
        impact: impact.to_vec(),
        masked,
    })
}

/// Impact scores and selection in one call.
pub fn select_from_matrix<T: Scalar>(a: &Tensor<T>, cfg: &RTKConfig) -> Result<RTKSelection<T>> {
    cfg.validate(a.shape().first().copied().unwrap_or(0))?;
    let impact = impact_scores(a, cfg.k)?;
    select_rtk(&impact, a, cfg)
}
