//! Training loops for the teacher and for every student mode.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{SelectionCadence, TrainMode, TrainerConfig};
use super::metrics::{evaluate, Evaluation};
use super::optim::{lr_at, Sgd};
use crate::attention::{
    attention_from_pooled, pool_batch_mean, select_from_matrix, AttentionExport, AttentionParams, RTKConfig,
};
use crate::data::{batches, collect_batch, Batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    channel_pool_l2norm, check_resample, cross_entropy_loss, kl_soft_loss, rtk_loss_with_targets, teacher_targets,
    total_loss, TeacherTarget,
};
use crate::models::{BackboneConfig, Mode, Model};
use crate::tensor::{BatchNormStats, Graph, ParamId, Tensor, Var};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const ATTENTION_CHECKPOINT_FILE: &str = "attention.ckpt";
pub const ATTENTION_DIR: &str = "attention";

/// Independent seed for one use of the run seed.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One line of `metrics.csv`. Losses are unweighted epoch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_kl: f64,
    pub loss_rtk: f64,
    pub test_acc: f64,
    /// Size of the epoch's retained set; empty outside `rtk` mode.
    pub retained_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub model: usize,
    pub teacher: Option<usize>,
    pub attention: Option<usize>,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: TrainMode,
    pub seed: u64,
    pub epochs: usize,
    pub test_accuracy: f64,
    pub micro_auc: Option<f64>,
    pub macro_auc: Option<f64>,
    /// `null` for classes absent from the test labels.
    pub per_class_auc: Vec<Option<f64>>,
    pub parameters: ParamCounts,
    /// Epochs whose retained set was non-empty (`rtk` mode).
    pub nonempty_retained_epochs: Option<usize>,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
    pub model: Model<f32>,
    pub attention: Option<AttentionParams<f32>>,
    pub exports: Vec<AttentionExport>,
}

impl RunArtifacts {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.run_dir.join(CHECKPOINT_FILE)
    }

    pub fn attention_dir(&self) -> PathBuf {
        self.run_dir.join(ATTENTION_DIR)
    }
}

/// Teacher outputs needed by one student step.
struct TeacherView<'g> {
    logits: Var<'g, f32>,
    pooled: Vec<Var<'g, f32>>,
    targets: Vec<TeacherTarget<'g, f32>>,
}

/// Teacher outputs for every training sample, valid while inputs are not
/// augmented.
struct TeacherCache {
    k: usize,
    logits: Vec<f32>,
    /// Per tap: channel count, `[N × c]` pooled features.
    pooled: Vec<(usize, Vec<f32>)>,
    /// Per tap: `(h, w)`, `[N × h·w]` transformed maps.
    phi: Vec<((usize, usize), Vec<f32>)>,
}

impl TeacherCache {
    fn build(teacher: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<Self> {
        let shapes = teacher.config().tap_shapes();
        let mut cache = TeacherCache {
            k: teacher.config().num_classes,
            logits: Vec::new(),
            pooled: shapes.iter().map(|&(_, _, c)| (c, Vec::new())).collect(),
            phi: shapes.iter().map(|&(h, w, _)| ((h, w), Vec::new())).collect(),
        };
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let batch = collect_batch::<f32>(data, chunk);
            let g = Graph::new();
            let out = teacher.forward(&g, g.constant(batch.images), Mode::Eval, false)?;
            cache.logits.extend_from_slice(out.logits.value().data());
            for (i, m) in out.feats.maps.iter().enumerate() {
                cache.pooled[i].1.extend_from_slice(m.global_avg_pool()?.value().data());
                cache.phi[i].1.extend_from_slice(channel_pool_l2norm(*m)?.value().data());
            }
        }
        Ok(cache)
    }

    fn view<'g>(&self, g: &'g Graph<f32>, indices: &[usize]) -> Result<TeacherView<'g>> {
        let n = indices.len();
        let gather = |src: &[f32], width: usize| -> Result<Tensor<f32>> {
            let mut out = Vec::with_capacity(n * width);
            for &i in indices {
                out.extend_from_slice(&src[i * width..(i + 1) * width]);
            }
            Tensor::new([n, width], out)
        };
        let logits = g.constant(gather(&self.logits, self.k)?);
        let pooled = self
            .pooled
            .iter()
            .map(|(c, src)| g.constant(gather(src, *c)?).mean_axis(0))
            .collect::<Result<_>>()?;
        let targets = self
            .phi
            .iter()
            .map(|&((h, w), ref src)| {
                Ok(TeacherTarget {
                    height: h,
                    width: w,
                    phi: g.constant(gather(src, h * w)?),
                })
            })
            .collect::<Result<_>>()?;
        Ok(TeacherView {
            logits,
            pooled,
            targets,
        })
    }
}

enum TeacherSource<'a> {
    Cached(TeacherCache),
    Live(&'a Model<f32>),
}

impl TeacherSource<'_> {
    fn view<'g>(&self, g: &'g Graph<f32>, batch: &Batch<f32>) -> Result<TeacherView<'g>> {
        match self {
            TeacherSource::Cached(c) => c.view(g, &batch.indices),
            TeacherSource::Live(t) => {
                let out = t.forward(g, g.constant(batch.images.clone()), Mode::Eval, false)?;
                Ok(TeacherView {
                    logits: out.logits.detach(),
                    pooled: pool_batch_mean(&out.feats.maps)?,
                    targets: teacher_targets(&out.feats)?,
                })
            }
        }
    }
}

/// Attention state of an `rtk` run.
struct RtkState {
    params: AttentionParams<f32>,
    select: RTKConfig,
    cadence: SelectionCadence,
    retained: Vec<usize>,
}

struct StepResult {
    ce: f64,
    kl: f64,
    rtk: f64,
    total: f64,
    grads: Vec<(ParamId, Tensor<f32>)>,
    attn_grads: Vec<(ParamId, Tensor<f32>)>,
    bn: Vec<BatchNormStats<f32>>,
    export: Option<(Tensor<f32>, Tensor<f32>)>,
}

/// Checks that every student tap can be resampled onto every teacher tap.
pub fn check_tap_compatibility(teacher: &BackboneConfig, student: &BackboneConfig) -> Result<()> {
    for (th, tw, _) in teacher.tap_shapes() {
        for (sh, sw, _) in student.tap_shapes() {
            check_resample((sh, sw), (th, tw)).map_err(|e| Error::Config(e.to_string()))?;
        }
    }
    Ok(())
}

fn check_data(arch: &BackboneConfig, train: &Dataset, test: &Dataset) -> Result<()> {
    for (name, d) in [("training", train), ("test", test)] {
        if d.channels != arch.input_channels
            || d.height != arch.input_size
            || d.width != arch.input_size
            || d.num_classes != arch.num_classes
        {
            return Err(Error::Config(format!(
                "{name} data ({}x{}x{}, {} classes) does not match the network ({}x{}x{}, {} classes)",
                d.channels,
                d.height,
                d.width,
                d.num_classes,
                arch.input_channels,
                arch.input_size,
                arch.input_size,
                arch.num_classes
            )));
        }
    }
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    Ok(())
}

/// Trains the teacher architecture with cross-entropy only. `cfg.mode` is
/// ignored.
pub fn train_teacher(
    cfg: &TrainerConfig,
    arch: &BackboneConfig,
    train: &Dataset,
    test: &Dataset,
    run_dir: &Path,
) -> Result<RunArtifacts> {
    let cfg = TrainerConfig {
        mode: TrainMode::Teacher,
        ..cfg.clone()
    };
    Trainer::new(&cfg, arch, None)?.run(train, test, run_dir)
}

/// Trains a student in `cfg.mode` (`scratch`, `kd_only` or `rtk`). The
/// teacher is required for the latter two and is never modified.
pub fn train_student(
    cfg: &TrainerConfig,
    arch: &BackboneConfig,
    teacher: Option<&Model<f32>>,
    train: &Dataset,
    test: &Dataset,
    run_dir: &Path,
) -> Result<RunArtifacts> {
    if cfg.mode == TrainMode::Teacher {
        return Err(Error::Config("student training needs mode scratch, kd_only or rtk".into()));
    }
    let teacher = if cfg.mode.uses_teacher() {
        Some(teacher.ok_or_else(|| {
            Error::Config(format!("mode {} needs a teacher checkpoint", cfg.mode.name()))
        })?)
    } else {
        None
    };
    Trainer::new(cfg, arch, teacher)?.run(train, test, run_dir)
}

struct Trainer<'a> {
    cfg: &'a TrainerConfig,
    model: Model<f32>,
    teacher: Option<&'a Model<f32>>,
    rtk: Option<RtkState>,
    sgd: Sgd,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a TrainerConfig, arch: &BackboneConfig, teacher: Option<&'a Model<f32>>) -> Result<Self> {
        cfg.validate()?;
        let model = Model::build(arch, derive_seed(cfg.seed, "model"))?;
        let mut rtk = None;
        if let Some(t) = teacher {
            let tc = t.config();
            if tc.num_classes != arch.num_classes
                || tc.input_channels != arch.input_channels
                || tc.input_size != arch.input_size
            {
                return Err(Error::Config(
                    "teacher and student disagree on input shape or class count".into(),
                ));
            }
            if cfg.mode == TrainMode::Rtk {
                check_tap_compatibility(tc, arch)?;
                let tch: Vec<usize> = tc.tap_shapes().iter().map(|s| s.2).collect();
                let sch: Vec<usize> = arch.tap_shapes().iter().map(|s| s.2).collect();
                if tch.is_empty() || sch.is_empty() {
                    return Err(Error::Config("rtk mode needs tap points on both networks".into()));
                }
                rtk = Some(RtkState {
                    params: AttentionParams::new(&tch, &sch, cfg.rtk.dim, derive_seed(cfg.seed, "attention"))?,
                    select: cfg.rtk.resolve(sch.len())?,
                    cadence: cfg.rtk.cadence,
                    retained: Vec::new(),
                });
            }
        }
        Ok(Trainer {
            cfg,
            model,
            teacher,
            rtk,
            sgd: Sgd {
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            },
        })
    }

    fn run(mut self, train: &Dataset, test: &Dataset, run_dir: &Path) -> Result<RunArtifacts> {
        let cfg = self.cfg;
        check_data(self.model.config(), train, test)?;
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let source = match self.teacher {
            Some(t) if !cfg.augment.enabled => Some(TeacherSource::Cached(TeacherCache::build(
                t,
                train,
                cfg.eval_batch_size,
            )?)),
            Some(t) => Some(TeacherSource::Live(t)),
            None => None,
        };
        let shuffle_seed = derive_seed(cfg.seed, "shuffle");
        let attn_dir = run_dir.join(ATTENTION_DIR);
        let mut rows = Vec::new();
        let mut exports = Vec::new();
        let mut nonempty = 0;
        let mut last_eval: Option<Evaluation> = None;
        for epoch in 0..cfg.epochs {
            let lr = lr_at(cfg.lr, &cfg.lr_drops, cfg.lr_drop_factor, epoch);
            let augment = cfg.augment.enabled.then_some(&cfg.augment);
            let epoch_batches = batches::<f32>(train, cfg.batch_size, shuffle_seed, epoch, augment)?;
            let mut sums = [0.0f64; 4];
            let mut epoch_retained = None;
            for (step, batch) in epoch_batches.iter().enumerate() {
                let res = self.step(batch, source.as_ref(), step == 0)?;
                if !res.total.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        message: format!(
                            "loss is {} (ce {}, kl {}, rtk {})",
                            res.total, res.ce, res.kl, res.rtk
                        ),
                    });
                }
                let n = batch.labels.len() as f64;
                for (s, v) in sums.iter_mut().zip([res.total, res.ce, res.kl, res.rtk]) {
                    *s += v * n;
                }
                if let Some((logits, a)) = res.export {
                    let state = self.rtk.as_ref().expect("export implies rtk");
                    let sel = select_from_matrix(&a, &state.select)?;
                    let export = AttentionExport::new(epoch, &logits, &a, &sel, &state.select);
                    export.write(&attn_dir)?;
                    epoch_retained = Some(sel.retained.len());
                    if !sel.is_empty() {
                        nonempty += 1;
                    } else {
                        log::warn!("epoch {epoch}: no teacher feature passed the threshold");
                    }
                    exports.push(export);
                }
                self.model.apply_bn_updates(&res.bn);
                self.sgd.step(self.model.params_mut(), &res.grads, lr);
                if let Some(state) = self.rtk.as_mut() {
                    self.sgd.step(state.params.params_mut(), &res.attn_grads, lr);
                }
            }
            let eval = evaluate(&self.model, test, cfg.eval_batch_size)?;
            let n = train.len() as f64;
            let row = MetricsRow {
                epoch,
                lr,
                loss_total: sums[0] / n,
                loss_ce: sums[1] / n,
                loss_kl: sums[2] / n,
                loss_rtk: sums[3] / n,
                test_acc: eval.accuracy(),
                retained_count: epoch_retained,
            };
            log::info!(
                "{} epoch {epoch}: lr {lr:.2e} loss {:.4} (ce {:.4} kl {:.4} rtk {:.4}) test acc {:.4}",
                cfg.mode.name(),
                row.loss_total,
                row.loss_ce,
                row.loss_kl,
                row.loss_rtk,
                row.test_acc
            );
            rows.push(row);
            last_eval = Some(eval);
        }
        let eval = match last_eval {
            Some(e) => e,
            None => evaluate(&self.model, test, cfg.eval_batch_size)?,
        };
        let auc = eval.roc_auc()?;
        let summary = RunSummary {
            mode: cfg.mode,
            seed: cfg.seed,
            epochs: cfg.epochs,
            test_accuracy: eval.accuracy(),
            micro_auc: auc.micro,
            macro_auc: auc.macro_avg,
            per_class_auc: auc.per_class,
            parameters: ParamCounts {
                model: self.model.num_parameters(),
                teacher: self.teacher.map(|t| t.num_parameters()),
                attention: self.rtk.as_ref().map(|s| s.params.params().num_elements()),
            },
            nonempty_retained_epochs: self.rtk.as_ref().map(|_| nonempty),
        };
        write_metrics(&run_dir.join(METRICS_FILE), &rows)?;
        let summary_path = run_dir.join(SUMMARY_FILE);
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(&summary_path, json).map_err(|e| Error::io(&summary_path, e))?;
        self.model.save(&run_dir.join(CHECKPOINT_FILE))?;
        if let Some(state) = &self.rtk {
            state.params.to_checkpoint().save(&run_dir.join(ATTENTION_CHECKPOINT_FILE))?;
        }
        Ok(RunArtifacts {
            run_dir: run_dir.to_path_buf(),
            rows,
            summary,
            model: self.model,
            attention: self.rtk.map(|s| s.params),
            exports,
        })
    }

    fn step(&mut self, batch: &Batch<f32>, source: Option<&TeacherSource>, first: bool) -> Result<StepResult> {
        let cfg = self.cfg;
        let loss_cfg = &cfg.loss;
        let g = Graph::new();
        let x = g.constant(batch.images.clone());
        let out = self.model.forward(&g, x, Mode::Train, true)?;
        let ce = cross_entropy_loss(out.logits, &batch.labels)?;
        let view = source.map(|s| s.view(&g, batch)).transpose()?;
        let kl = match &view {
            Some(v) if loss_cfg.alpha != 0.0 => Some(kl_soft_loss(
                out.logits,
                v.logits,
                loss_cfg.temperature,
                loss_cfg.t_squared,
                loss_cfg.kl_direction,
            )?),
            _ => None,
        };
        let mut rtk = None;
        let mut attn_bound = None;
        let mut export = None;
        if let (Some(state), Some(v)) = (self.rtk.as_mut(), &view) {
            let train_attn = loss_cfg.beta != 0.0;
            if train_attn || first {
                let (vars, bound) = state.params.bind(&g, train_attn);
                let a = attention_from_pooled(&v.pooled, &pool_batch_mean(&out.feats.maps)?, &vars)?;
                let a_val = a.columns.value();
                if first {
                    export = Some(((*a.logits.value()).clone(), (*a_val).clone()));
                }
                if first || state.cadence == SelectionCadence::Step {
                    state.retained = select_from_matrix(&a_val, &state.select)?.retained;
                }
                if train_attn && !state.retained.is_empty() {
                    let (n_s, n_t) = (a_val.shape()[0], a_val.shape()[1]);
                    let mask = g.constant(crate::attention::column_mask::<f32>(n_s, n_t, &state.retained));
                    let masked = a.columns.mul(mask)?;
                    rtk = Some(rtk_loss_with_targets(&v.targets, &out.feats, masked, &state.retained)?);
                }
                attn_bound = Some(bound);
            }
        }
        let total = total_loss(ce, kl, rtk, loss_cfg)?;
        let item = |v: Option<Var<f32>>| v.map_or(0.0, |v| v.item() as f64);
        let result_losses = (ce.item() as f64, item(kl), item(rtk), total.item() as f64);
        if !result_losses.3.is_finite() {
            return Ok(StepResult {
                ce: result_losses.0,
                kl: result_losses.1,
                rtk: result_losses.2,
                total: result_losses.3,
                grads: Vec::new(),
                attn_grads: Vec::new(),
                bn: Vec::new(),
                export: None,
            });
        }
        g.backward(total)?;
        let grads = out.params.grads();
        let attn_grads = attn_bound.map(|b| b.grads()).unwrap_or_default();
        Ok(StepResult {
            ce: result_losses.0,
            kl: result_losses.1,
            rtk: result_losses.2,
            total: result_losses.3,
            grads,
            attn_grads,
            bn: out.bn_updates,
            export,
        })
    }
}

/// Writes `rows` as CSV with a header line.
pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(err)
}
