//! Experiment configuration: profiles, TOML loading and overrides.
//!
//! A config file names a `profile` whose defaults fill every key the file
//! leaves out. Unknown keys are errors.
//!
//! ```toml
//! profile = "synthetic"
//!
//! [data]
//! kind = "synthetic"
//! noise = 0.3
//!
//! [train]
//! epochs = 10
//!
//! [train.loss]
//! beta = 50.0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{RTKConfig, DEFAULT_DIM};
use crate::data::{
    load_cifar10_with, synth_dataset, synth_dataset_cached, AugmentConfig, CifarOptions, Dataset, SynthConfig,
};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::models::{BackboneConfig, TapPoint};

/// Environment variable naming the CIFAR-10 binary directory.
pub const CIFAR_DIR_ENV: &str = "RTK_CIFAR10_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Full CIFAR-10 schedule: 240 epochs, drops at 150/180/210, decay 0.05.
    Paper,
    /// Reduced CIFAR-10 schedule: 40 epochs, 5,000 training images.
    Desk,
    /// Procedural 16×16 textures, 30 epochs, no augmentation.
    Synthetic,
}

impl Profile {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            "synthetic" => Ok(Profile::Synthetic),
            other => Err(Error::Config(format!(
                "unknown profile `{other}` (expected paper, desk or synthetic)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
            Profile::Synthetic => "synthetic",
        }
    }
}

/// What a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Cross-entropy on the teacher architecture.
    Teacher,
    /// Cross-entropy on the student.
    Scratch,
    /// Cross-entropy plus the soft-target term.
    KdOnly,
    /// Cross-entropy, soft targets and the retained-feature distance.
    Rtk,
}

impl TrainMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "teacher" => Ok(TrainMode::Teacher),
            "scratch" => Ok(TrainMode::Scratch),
            "kd_only" => Ok(TrainMode::KdOnly),
            "rtk" => Ok(TrainMode::Rtk),
            other => Err(Error::Usage(format!(
                "unknown mode `{other}` (expected scratch or kd_only)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Teacher => "teacher",
            TrainMode::Scratch => "scratch",
            TrainMode::KdOnly => "kd_only",
            TrainMode::Rtk => "rtk",
        }
    }

    pub fn uses_teacher(self) -> bool {
        matches!(self, TrainMode::KdOnly | TrainMode::Rtk)
    }
}

/// When the retained set is recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionCadence {
    /// From the first batch of each epoch.
    Epoch,
    /// From every batch.
    Step,
}

/// Selection and attention settings. `k` and `tau` default to `⌈n_s/2⌉`
/// and `1/n_s` once the student is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RtkSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub renormalize: bool,
    /// Shared query/key width `d`.
    pub dim: usize,
    pub cadence: SelectionCadence,
}

impl Default for RtkSettings {
    fn default() -> Self {
        RtkSettings {
            k: None,
            tau: None,
            renormalize: false,
            dim: DEFAULT_DIM,
            cadence: SelectionCadence::Epoch,
        }
    }
}

impl RtkSettings {
    /// Concrete selection parameters for `n_s` student features.
    pub fn resolve(&self, n_s: usize) -> Result<RTKConfig> {
        let d = RTKConfig::defaults_for(n_s);
        let cfg = RTKConfig {
            k: self.k.unwrap_or(d.k),
            tau: self.tau.unwrap_or(d.tau),
            renormalize: self.renormalize,
        };
        cfg.validate(n_s)?;
        if self.dim == 0 {
            return Err(Error::Config("attention width must be positive".into()));
        }
        Ok(cfg)
    }
}

/// Optimization settings shared by every training mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch indices (zero-based) from which the rate is multiplied by
    /// `lr_drop_factor`.
    pub lr_drops: Vec<usize>,
    pub lr_drop_factor: f64,
    pub eval_batch_size: usize,
    pub loss: LossConfig,
    pub rtk: RtkSettings,
    pub augment: AugmentConfig,
}

impl TrainerConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let base = TrainerConfig {
            mode: TrainMode::Rtk,
            seed: 0,
            epochs: 40,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drops: vec![25, 32, 37],
            lr_drop_factor: 0.1,
            eval_batch_size: 250,
            loss: LossConfig::default(),
            rtk: RtkSettings::default(),
            augment: AugmentConfig::default(),
        };
        match profile {
            Profile::Paper => TrainerConfig {
                epochs: 240,
                lr_drops: vec![150, 180, 210],
                weight_decay: 0.05,
                ..base
            },
            Profile::Desk => base,
            Profile::Synthetic => TrainerConfig {
                epochs: 30,
                lr: 0.05,
                lr_drops: vec![20, 25],
                augment: AugmentConfig::disabled(),
                loss: LossConfig {
                    beta: SYNTHETIC_BETA,
                    ..LossConfig::default()
                },
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return bad(format!("lr_drop_factor must lie in (0, 1], got {}", self.lr_drop_factor));
        }
        if self.lr_drops.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lr_drops {:?} must be strictly increasing", self.lr_drops));
        }
        if let Some(&last) = self.lr_drops.last() {
            if last >= self.epochs {
                log::warn!("lr drop at epoch {last} never happens in a {}-epoch run", self.epochs);
            }
        }
        self.loss.validate()
    }
}

/// Default distance weight of the synthetic profile.
pub const SYNTHETIC_BETA: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        num_classes: usize,
        n_train: usize,
        n_test: usize,
        size: usize,
        channels: usize,
        seed: u64,
        noise: f64,
        jitter: f64,
        /// Directory for the generated-data cache; none disables caching.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cache_dir: Option<PathBuf>,
    },
    Cifar10 {
        /// Falls back to `RTK_CIFAR10_DIR`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
}

impl DataConfig {
    pub fn synthetic(cfg: &SynthConfig) -> Self {
        DataConfig::Synthetic {
            num_classes: cfg.num_classes,
            n_train: cfg.n_train,
            n_test: cfg.n_test,
            size: cfg.size,
            channels: cfg.channels,
            seed: cfg.seed,
            noise: cfg.noise,
            jitter: cfg.jitter,
            cache_dir: None,
        }
    }

    /// Generator parameters of a synthetic source.
    pub fn synth_config(&self) -> Option<SynthConfig> {
        match *self {
            DataConfig::Synthetic {
                num_classes,
                n_train,
                n_test,
                size,
                channels,
                seed,
                noise,
                jitter,
                ..
            } => Some(SynthConfig {
                num_classes,
                n_train,
                n_test,
                size,
                channels,
                seed,
                noise,
                jitter,
            }),
            DataConfig::Cifar10 { .. } => None,
        }
    }

    /// Loads or generates `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataConfig::Synthetic { cache_dir, .. } => {
                let s = self.synth_config().expect("synthetic");
                match cache_dir {
                    Some(dir) => synth_dataset_cached(&s, dir),
                    None => synth_dataset(&s),
                }
            }
            DataConfig::Cifar10 {
                dir,
                train_limit,
                test_limit,
            } => {
                let dir = match dir {
                    Some(d) => d.clone(),
                    None => std::env::var_os(CIFAR_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
                        Error::Config(format!("cifar10 data needs `data.dir` or the {CIFAR_DIR_ENV} variable"))
                    })?,
                };
                let opts = CifarOptions {
                    train_limit: *train_limit,
                    test_limit: *test_limit,
                    ..CifarOptions::default()
                };
                load_cifar10_with(&dir, &opts)
            }
        }
    }

    /// `(channels, size, classes)` of the images this source yields.
    pub fn image_spec(&self) -> (usize, usize, usize) {
        match self {
            DataConfig::Synthetic {
                channels,
                size,
                num_classes,
                ..
            } => (*channels, *size, *num_classes),
            DataConfig::Cifar10 { .. } => (3, 32, 10),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPreset {
    /// Every residual block output.
    All,
    /// Last block of every stage.
    StageEnd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TapSpec {
    Preset(TapPreset),
    Explicit(Vec<TapPoint>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// `teacher-8`, `student-4`, `resnet-20` or `resnet-56`.
    pub preset: String,
    pub taps: TapSpec,
}

impl ArchConfig {
    pub fn new(preset: &str, taps: TapPreset) -> Self {
        ArchConfig {
            preset: preset.into(),
            taps: TapSpec::Preset(taps),
        }
    }

    pub fn backbone(&self, data: &DataConfig) -> Result<BackboneConfig> {
        let (c, s, k) = data.image_spec();
        let cfg = BackboneConfig::preset(&self.preset, c, s, k)?;
        let cfg = self.apply_taps(cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the tap points of `cfg` with these taps.
    pub fn apply_taps(&self, cfg: BackboneConfig) -> BackboneConfig {
        match &self.taps {
            TapSpec::Preset(TapPreset::All) => cfg.with_all_taps(),
            TapSpec::Preset(TapPreset::StageEnd) => cfg.with_stage_end_taps(),
            TapSpec::Explicit(points) => BackboneConfig {
                tap_points: points.clone(),
                ..cfg
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub data: DataConfig,
    pub teacher: ArchConfig,
    pub student: ArchConfig,
    pub train: TrainerConfig,
}

impl ExperimentConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (data, teacher, student) = match profile {
            Profile::Paper => (
                DataConfig::Cifar10 {
                    dir: None,
                    train_limit: None,
                    test_limit: None,
                },
                ArchConfig::new("resnet-56", TapPreset::StageEnd),
                ArchConfig::new("resnet-20", TapPreset::StageEnd),
            ),
            Profile::Desk => (
                DataConfig::Cifar10 {
                    dir: None,
                    train_limit: Some(5000),
                    test_limit: None,
                },
                ArchConfig::new("teacher-8", TapPreset::All),
                ArchConfig::new("student-4", TapPreset::All),
            ),
            Profile::Synthetic => (
                DataConfig::synthetic(&SynthConfig::desk(0)),
                ArchConfig::new("teacher-8", TapPreset::All),
                ArchConfig::new("student-4", TapPreset::All),
            ),
        };
        ExperimentConfig {
            profile,
            data,
            teacher,
            student,
            train: TrainerConfig::for_profile(profile),
        }
    }

    /// Parses a config file body, filling unspecified keys from its profile
    /// (`desk` when none is named) and then applying `overrides`.
    pub fn from_toml_str(text: &str, overrides: &toml::Table) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid TOML: {e}")))?;
        Self::from_table(user, overrides)
    }

    pub fn load(path: &Path, overrides: &toml::Table) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    /// Profile defaults with `overrides` applied.
    pub fn from_overrides(overrides: &toml::Table) -> Result<Self> {
        Self::from_table(toml::Table::new(), overrides)
    }

    fn from_table(mut user: toml::Table, overrides: &toml::Table) -> Result<Self> {
        merge(&mut user, overrides.clone());
        let profile = match user.get("profile") {
            None => Profile::Desk,
            Some(toml::Value::String(s)) => Profile::parse(s)?,
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
        };
        let mut table = toml::Table::try_from(Self::for_profile(profile)).expect("defaults serialize");
        let data_kind = |t: &toml::Table| t.get("data").and_then(|d| d.get("kind")).cloned();
        if let Some(kind) = data_kind(&user) {
            if Some(&kind) != data_kind(&table).as_ref() {
                table.remove("data");
            }
        }
        merge(&mut table, user);
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(s) = self.data.synth_config() {
            s.validate()?;
        }
        let (c, s, _) = self.data.image_spec();
        self.train.augment.validate(s, s)?;
        if self.train.augment.enabled && self.train.augment.crop.is_some_and(|v| v != s) {
            return Err(Error::Config(format!(
                "crop size must equal the {s}x{s} input size the models expect"
            )));
        }
        let teacher = self.teacher.backbone(&self.data)?;
        let student = self.student.backbone(&self.data)?;
        if c == 0 || teacher.tap_points.is_empty() || student.tap_points.is_empty() {
            return Err(Error::Config("both networks need at least one tap point".into()));
        }
        self.train.rtk.resolve(student.tap_points.len())?;
        Ok(())
    }

    /// Resolved config as TOML, suitable for [`ExperimentConfig::from_toml_str`].
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else
/// replaces.
pub fn merge(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Inserts `value` at a dotted `path` of `table`, creating tables as needed.
pub fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty path");
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("path segment is a table");
    }
    cur.insert(last.to_string(), value);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_resolve_and_validate() {
        let paper = ExperimentConfig::for_profile(Profile::Paper);
        assert_eq!(paper.train.epochs, 240);
        assert_eq!(paper.train.lr_drops, vec![150, 180, 210]);
        assert_eq!(paper.train.weight_decay, 0.05);
        assert_eq!(paper.train.batch_size, 64);
        assert_eq!(paper.train.lr, 0.01);
        assert_eq!(paper.train.momentum, 0.9);
        for p in [Profile::Paper, Profile::Desk, Profile::Synthetic] {
            ExperimentConfig::for_profile(p).validate().unwrap();
        }
    }

    #[test]
    fn file_overrides_profile_and_flags_override_file() {
        let text = "profile = \"synthetic\"\n[train]\nepochs = 3\nlr_drops = []\n[train.loss]\nbeta = 5.0\n";
        let mut flags = toml::Table::new();
        set_path(&mut flags, "train.loss.alpha", toml::Value::Float(0.5));
        set_path(&mut flags, "train.epochs", toml::Value::Integer(2));
        let cfg = ExperimentConfig::from_toml_str(text, &flags).unwrap();
        assert_eq!(cfg.profile, Profile::Synthetic);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.loss.beta, 5.0);
        assert_eq!(cfg.train.loss.alpha, 0.5);
        assert_eq!(cfg.train.loss.temperature, 4.0);
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml(), &toml::Table::new()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let none = toml::Table::new();
        for text in [
            "[train]\nepoch = 3\n",
            "profile = \"huge\"\n",
            "[train]\nlr = -1.0\n",
            "[train]\nlr_drops = [30, 20]\n",
            "[train.rtk]\nk = 9\n",
            "[teacher]\npreset = \"resnet-1000\"\n",
            "not toml at all [",
        ] {
            let err = ExperimentConfig::from_toml_str(text, &none).unwrap_err();
            assert_eq!(err.kind(), "config", "{text}: {err}");
        }
    }

    #[test]
    fn switching_data_kind_drops_profile_fields() {
        let text = "profile = \"synthetic\"\n[data]\nkind = \"cifar10\"\ndir = \"/data\"\n";
        let cfg = ExperimentConfig::from_toml_str(text, &toml::Table::new()).unwrap();
        assert_eq!(cfg.data.image_spec(), (3, 32, 10));
    }

    #[test]
    fn explicit_taps_parse() {
        let text = "profile = \"synthetic\"\n[student]\npreset = \"student-4\"\ntaps = [{ stage = 1, block = 0 }]\n";
        let cfg = ExperimentConfig::from_toml_str(text, &toml::Table::new()).unwrap();
        let b = cfg.student.backbone(&cfg.data).unwrap();
        assert_eq!(b.tap_points, vec![TapPoint::new(1, 0)]);
        assert_eq!(cfg.train.rtk.resolve(1).unwrap().k, 1);
    }
}
