//! Residual CNN backbones with tap points.
//!
//! A backbone is a 3×3 stem followed by stages of basic residual blocks and
//! a global-average-pool + linear head. The first block of every stage
//! after the first halves the spatial size; its shortcut is a strided 1×1
//! convolution followed by batch norm. Any block output can be tapped.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

pub use checkpoint::{ArrayEntry, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use checkpoint::{entry as checkpoint_entry, take_array as checkpoint_take};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{BatchNormStats, Binder, BoundParams, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the old value in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Position of a residual block: `(stage, block)`, both zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapPoint {
    pub stage: usize,
    pub block: usize,
}

impl TapPoint {
    pub fn new(stage: usize, block: usize) -> Self {
        TapPoint { stage, block }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_depths: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub input_channels: usize,
    /// Expected input height and width.
    pub input_size: usize,
    pub num_classes: usize,
    pub tap_points: Vec<TapPoint>,
}

impl BackboneConfig {
    /// Taps the output of every residual block.
    pub fn with_all_taps(mut self) -> Self {
        self.tap_points = self
            .stage_depths
            .iter()
            .enumerate()
            .flat_map(|(s, &d)| (0..d).map(move |b| TapPoint::new(s, b)))
            .collect();
        self
    }

    /// Taps the last block of every stage.
    pub fn with_stage_end_taps(mut self) -> Self {
        self.tap_points = self
            .stage_depths
            .iter()
            .enumerate()
            .map(|(s, &d)| TapPoint::new(s, d.saturating_sub(1)))
            .collect();
        self
    }

    /// Desk-scale teacher: two stages of two blocks, 16/32 channels, four taps.
    pub fn teacher8(input_channels: usize, input_size: usize, num_classes: usize) -> Self {
        BackboneConfig {
            stage_depths: vec![2, 2],
            stage_channels: vec![16, 32],
            input_channels,
            input_size,
            num_classes,
            tap_points: Vec::new(),
        }
        .with_all_taps()
    }

    /// Desk-scale student: two stages of one block, 8/16 channels, two taps.
    pub fn student4(input_channels: usize, input_size: usize, num_classes: usize) -> Self {
        BackboneConfig {
            stage_depths: vec![1, 1],
            stage_channels: vec![8, 16],
            input_channels,
            input_size,
            num_classes,
            tap_points: Vec::new(),
        }
        .with_all_taps()
    }

    /// CIFAR-style ResNet-(6n+2): three stages of `n` blocks, 16/32/64
    /// channels, stage-end taps. `n = 3` is ResNet-20, `n = 9` ResNet-56.
    pub fn cifar_resnet(n: usize, input_channels: usize, input_size: usize, num_classes: usize) -> Self {
        BackboneConfig {
            stage_depths: vec![n; 3],
            stage_channels: vec![16, 32, 64],
            input_channels,
            input_size,
            num_classes,
            tap_points: Vec::new(),
        }
        .with_stage_end_taps()
    }

    /// Looks up a named preset (`teacher-8`, `student-4`, `resnet-20`, `resnet-56`).
    pub fn preset(name: &str, input_channels: usize, input_size: usize, num_classes: usize) -> Result<Self> {
        let cfg = match name {
            "teacher-8" => Self::teacher8(input_channels, input_size, num_classes),
            "student-4" => Self::student4(input_channels, input_size, num_classes),
            "resnet-20" => Self::cifar_resnet(3, input_channels, input_size, num_classes),
            "resnet-56" => Self::cifar_resnet(9, input_channels, input_size, num_classes),
            other => return Err(Error::Config(format!("unknown architecture preset `{other}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage_depths.is_empty() || self.stage_depths.len() != self.stage_channels.len() {
            return bad(format!(
                "stage_depths {:?} and stage_channels {:?} must be non-empty and equally long",
                self.stage_depths, self.stage_channels
            ));
        }
        if self.stage_depths.iter().chain(&self.stage_channels).any(|&v| v == 0) {
            return bad("stage depths and channels must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.input_channels == 0 || self.input_size == 0 {
            return bad("input channels and size must be positive".into());
        }
        for tap in &self.tap_points {
            if tap.stage >= self.stage_depths.len() || tap.block >= self.stage_depths[tap.stage] {
                return bad(format!(
                    "tap point (stage {}, block {}) does not exist in depths {:?}",
                    tap.stage, tap.block, self.stage_depths
                ));
            }
        }
        let mut sorted = self.tap_points.clone();
        sorted.sort_by_key(|t| (t.stage, t.block));
        sorted.dedup();
        if sorted != self.tap_points {
            return bad("tap points must be unique and listed in depth order".into());
        }
        Ok(())
    }

    /// Spatial extent of feature maps in `stage`.
    pub fn feature_size(&self, stage: usize) -> usize {
        (0..stage).fold(self.input_size, |s, _| s.div_ceil(2))
    }

    /// `(h, w, c)` of each tapped feature map.
    pub fn tap_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.tap_points
            .iter()
            .map(|t| {
                let s = self.feature_size(t.stage);
                (s, s, self.stage_channels[t.stage])
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct BnLayer {
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: ParamId,
    bn1: BnLayer,
    conv2: ParamId,
    bn2: BnLayer,
    shortcut: Option<(ParamId, BnLayer)>,
    stride: usize,
}

/// Running mean/variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Ordered tapped feature maps of one network, in depth order.
#[derive(Debug, Clone)]
pub struct FeatureSet<'g, T: Scalar> {
    pub maps: Vec<Var<'g, T>>,
}

impl<'g, T: Scalar> FeatureSet<'g, T> {
    pub fn count(&self) -> usize {
        self.maps.len()
    }

    /// `(h, w, c)` per map.
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.maps
            .iter()
            .map(|m| {
                let s = m.shape();
                (s[2], s[3], s[1])
            })
            .collect()
    }
}

/// Result of one forward pass.
pub struct ForwardOutput<'g, T: Scalar> {
    pub logits: Var<'g, T>,
    pub feats: FeatureSet<'g, T>,
    /// Parameter leaves (empty when the model was bound as frozen).
    pub params: BoundParams<'g, T>,
    /// Batch statistics of every batch-norm layer, training mode only.
    pub bn_updates: Vec<BatchNormStats<T>>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    cfg: BackboneConfig,
    params: ParamStore<T>,
    running: Vec<RunningStats<T>>,
    stem: (ParamId, BnLayer),
    blocks: Vec<Vec<Block>>,
    head: (ParamId, ParamId),
}

struct Builder<'a, T> {
    params: ParamStore<T>,
    running: Vec<RunningStats<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize) -> ParamId {
        let fan_in = (in_c * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("std");
        let data = (0..out_c * in_c * k * k)
            .map(|_| T::from_f64(normal.sample(self.rng)))
            .collect();
        let t = Tensor::new([out_c, in_c, k, k], data).expect("shape");
        self.params.add(format!("{name}.weight"), t, true)
    }

    fn bn(&mut self, name: &str, c: usize) -> BnLayer {
        let gamma = self.params.add(format!("{name}.gamma"), Tensor::ones([c]), false);
        let beta = self.params.add(format!("{name}.beta"), Tensor::zeros([c]), false);
        self.running.push(RunningStats {
            name: name.to_string(),
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
        });
        BnLayer {
            gamma,
            beta,
            stats: self.running.len() - 1,
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Deterministically initialized backbone: Kaiming-normal conv weights,
    /// unit batch-norm scales, zero shifts and biases.
    pub fn build(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamStore::new(),
            running: Vec::new(),
            rng: &mut rng,
        };
        let c0 = cfg.stage_channels[0];
        let stem = (b.conv("stem.conv", c0, cfg.input_channels, 3), b.bn("stem.bn", c0));
        let mut blocks = Vec::new();
        let mut in_c = c0;
        for (s, (&depth, &out_c)) in cfg.stage_depths.iter().zip(&cfg.stage_channels).enumerate() {
            let mut stage = Vec::new();
            for k in 0..depth {
                let stride = if s > 0 && k == 0 { 2 } else { 1 };
                let p = format!("stage{s}.block{k}");
                let conv1 = b.conv(&format!("{p}.conv1"), out_c, in_c, 3);
                let bn1 = b.bn(&format!("{p}.bn1"), out_c);
                let conv2 = b.conv(&format!("{p}.conv2"), out_c, out_c, 3);
                let bn2 = b.bn(&format!("{p}.bn2"), out_c);
                let shortcut = (stride != 1 || in_c != out_c).then(|| {
                    (
                        b.conv(&format!("{p}.shortcut.conv"), out_c, in_c, 1),
                        b.bn(&format!("{p}.shortcut.bn"), out_c),
                    )
                });
                stage.push(Block {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    shortcut,
                    stride,
                });
                in_c = out_c;
            }
            blocks.push(stage);
        }
        let bound = 1.0 / (in_c as f64).sqrt();
        let uniform = Uniform::new_inclusive(-bound, bound).expect("bounds");
        let w = (0..cfg.num_classes * in_c)
            .map(|_| T::from_f64(uniform.sample(b.rng)))
            .collect();
        let head_w = b
            .params
            .add("head.weight", Tensor::new([cfg.num_classes, in_c], w)?, true);
        let head_b = b.params.add("head.bias", Tensor::zeros([cfg.num_classes]), true);
        let Builder { params, running, .. } = b;
        Ok(Model {
            cfg: cfg.clone(),
            params,
            running,
            stem,
            blocks,
            head: (head_w, head_b),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    /// Changes which block outputs are tapped. Weights are unaffected.
    pub fn set_tap_points(&mut self, taps: Vec<TapPoint>) -> Result<()> {
        let cfg = BackboneConfig {
            tap_points: taps,
            ..self.cfg.clone()
        };
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Runs the network, returning logits and the configured taps.
    ///
    /// `trainable` decides whether parameters enter the graph as gradient
    /// leaves. Batch-norm statistics are returned, not applied; see
    /// [`Model::forward_with_taps`].
    pub fn forward<'g>(
        &self,
        graph: &'g Graph<T>,
        batch: Var<'g, T>,
        mode: Mode,
        trainable: bool,
    ) -> Result<ForwardOutput<'g, T>> {
        let shape = batch.shape();
        let want = [self.cfg.input_channels, self.cfg.input_size, self.cfg.input_size];
        if shape.len() != 4 || shape[1..] != want {
            return Err(dim_err!(
                "model expects [N, {}, {}, {}] input, got {shape:?}",
                want[0],
                want[1],
                want[2]
            ));
        }
        let mut ctx = Ctx {
            binder: Binder::new(graph, &self.params, trainable),
            running: &self.running,
            mode,
            updates: Vec::new(),
        };
        let (stem_w, stem_bn) = &self.stem;
        let w = ctx.binder.bind(*stem_w);
        let mut x = ctx.bn(batch.conv2d(w, 1, 1)?, stem_bn)?.relu();
        let mut taps = Vec::new();
        for (s, stage) in self.blocks.iter().enumerate() {
            for (k, block) in stage.iter().enumerate() {
                x = ctx.block(x, block)?;
                if self.cfg.tap_points.contains(&TapPoint::new(s, k)) {
                    taps.push(x);
                }
            }
        }
        let pooled = x.global_avg_pool()?;
        let (hw, hb) = self.head;
        let (hw, hb) = (ctx.binder.bind(hw), ctx.binder.bind(hb));
        let logits = pooled.linear(hw, hb)?;
        Ok(ForwardOutput {
            logits,
            feats: FeatureSet { maps: taps },
            params: ctx.binder.finish(),
            bn_updates: ctx.updates,
        })
    }

    /// Forward pass that also folds training-mode batch statistics into the
    /// running estimates.
    pub fn forward_with_taps<'g>(
        &mut self,
        graph: &'g Graph<T>,
        batch: Var<'g, T>,
        mode: Mode,
    ) -> Result<ForwardOutput<'g, T>> {
        let out = self.forward(graph, batch, mode, mode == Mode::Train)?;
        self.apply_bn_updates(&out.bn_updates);
        Ok(out)
    }

    /// `running ← m · running + (1 − m) · batch`, with the unbiased batch
    /// variance.
    pub fn apply_bn_updates(&mut self, updates: &[BatchNormStats<T>]) {
        if updates.is_empty() {
            return;
        }
        debug_assert_eq!(updates.len(), self.running.len());
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        for (run, upd) in self.running.iter_mut().zip(updates) {
            let unbias = if upd.count > 1 {
                T::from_f64(upd.count as f64 / (upd.count as f64 - 1.0))
            } else {
                T::one()
            };
            for (r, &b) in run.mean.iter_mut().zip(&upd.mean) {
                *r = m * *r + keep * b;
            }
            for (r, &b) in run.var.iter_mut().zip(&upd.var) {
                *r = m * *r + keep * b * unbias;
            }
        }
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    name: r.name.clone(),
                    mean: r.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    var: r.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
            stem: self.stem.clone(),
            blocks: self.blocks.clone(),
            head: self.head,
        }
    }
}

struct Ctx<'g, 's, T: Scalar> {
    binder: Binder<'g, 's, T>,
    running: &'s [RunningStats<T>],
    mode: Mode,
    updates: Vec<BatchNormStats<T>>,
}

impl<'g, T: Scalar> Ctx<'g, '_, T> {
    fn bn(&mut self, x: Var<'g, T>, layer: &BnLayer) -> Result<Var<'g, T>> {
        let gamma = self.binder.bind(layer.gamma);
        let beta = self.binder.bind(layer.beta);
        match self.mode {
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(gamma, beta, BN_EPS)?;
                self.updates.push(stats);
                Ok(y)
            }
            Mode::Eval => {
                let r = &self.running[layer.stats];
                x.batch_norm_eval(gamma, beta, &r.mean, &r.var, BN_EPS)
            }
        }
    }

    fn block(&mut self, x: Var<'g, T>, b: &Block) -> Result<Var<'g, T>> {
        let w1 = self.binder.bind(b.conv1);
        let h = self.bn(x.conv2d(w1, b.stride, 1)?, &b.bn1)?.relu();
        let w2 = self.binder.bind(b.conv2);
        let h = self.bn(h.conv2d(w2, 1, 1)?, &b.bn2)?;
        let skip = match &b.shortcut {
            Some((w, bn)) => {
                let w = self.binder.bind(*w);
                self.bn(x.conv2d(w, b.stride, 0)?, bn)?
            }
            None => x,
        };
        Ok(h.add(skip)?.relu())
    }
}
