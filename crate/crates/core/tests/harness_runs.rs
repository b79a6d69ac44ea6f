//! Training-loop contracts on a tiny synthetic task.

use rtk::data::{synth_dataset, Dataset, SynthConfig};
use rtk::harness::{
    derive_seed, read_metrics, train_student, train_teacher, Profile, RunArtifacts, SelectionCadence, TrainMode,
    TrainerConfig,
};
use rtk::models::{BackboneConfig, Checkpoint, Model};

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

fn data() -> (Dataset, Dataset) {
    synth_dataset(&SynthConfig {
        num_classes: 3,
        n_train: 48,
        n_test: 24,
        size: 8,
        channels: 2,
        seed: 11,
        noise: 0.3,
        jitter: 0.05,
    })
    .unwrap()
}

fn cfg(mode: TrainMode, epochs: usize) -> TrainerConfig {
    TrainerConfig {
        mode,
        seed: 5,
        epochs,
        batch_size: 16,
        lr_drops: if epochs > 2 { vec![2] } else { vec![] },
        eval_batch_size: 24,
        ..TrainerConfig::for_profile(Profile::Synthetic)
    }
}

fn teacher_arch() -> BackboneConfig {
    BackboneConfig::teacher8(2, 8, 3)
}

fn student_arch() -> BackboneConfig {
    BackboneConfig::student4(2, 8, 3)
}

fn teacher(train: &Dataset, test: &Dataset) -> Model<f32> {
    let dir = tempfile::tempdir().unwrap();
    train_teacher(&cfg(TrainMode::Teacher, 2), &teacher_arch(), train, test, dir.path())
        .unwrap()
        .model
}

/// Runs a student and returns its artifacts and saved checkpoint bytes.
fn student(c: &TrainerConfig, t: Option<&Model<f32>>, train: &Dataset, test: &Dataset) -> (RunArtifacts, Vec<u8>) {
    student_files(c, t, train, test).0
}

/// [`student`] plus the attention checkpoint bytes, if one was written.
fn student_files(
    c: &TrainerConfig,
    t: Option<&Model<f32>>,
    train: &Dataset,
    test: &Dataset,
) -> ((RunArtifacts, Vec<u8>), Option<Vec<u8>>) {
    let dir = tempfile::tempdir().unwrap();
    let art = train_student(c, &student_arch(), t, train, test, dir.path()).unwrap();
    let ckpt = std::fs::read(art.checkpoint_path()).unwrap();
    let attn = std::fs::read(dir.path().join("attention.ckpt")).ok();
    ((art, ckpt), attn)
}

fn same_trajectory(a: &RunArtifacts, b: &RunArtifacts) {
    assert_eq!(a.rows.len(), b.rows.len());
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.loss_total.to_bits(), y.loss_total.to_bits(), "epoch {}", x.epoch);
        assert_eq!(x.loss_ce.to_bits(), y.loss_ce.to_bits());
        assert_eq!(x.test_acc.to_bits(), y.test_acc.to_bits());
    }
}

pub fn zero_epochs_saves_the_initialization() {
    let (train, test) = data();
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(TrainMode::Teacher, 0);
    let art = train_teacher(&c, &teacher_arch(), &train, &test, dir.path()).unwrap();
    let init = Model::<f32>::build(&teacher_arch(), derive_seed(c.seed, "model")).unwrap();
    assert_eq!(std::fs::read(art.checkpoint_path()).unwrap(), init.to_checkpoint().to_bytes());
    assert!(art.rows.is_empty());
    assert!(read_metrics(&dir.path().join("metrics.csv")).unwrap().is_empty());
}

pub fn learning_rate_drops_exactly_at_configured_epochs() {
    let (train, test) = data();
    let dir = tempfile::tempdir().unwrap();
    let c = TrainerConfig {
        lr_drops: vec![1, 3],
        ..cfg(TrainMode::Scratch, 4)
    };
    let art = train_student(&c, &student_arch(), None, &train, &test, dir.path()).unwrap();
    let lrs: Vec<f64> = art.rows.iter().map(|r| r.lr).collect();
    assert_eq!(lrs[0], c.lr);
    assert_eq!(lrs[1], lrs[0] * 0.1);
    assert_eq!(lrs[2], lrs[1]);
    assert_eq!(lrs[3], lrs[2] * 0.1);
    assert_eq!(read_metrics(&dir.path().join("metrics.csv")).unwrap(), art.rows);
}

pub fn rtk_without_distillation_weights_matches_scratch_bitwise() {
    let (train, test) = data();
    let t = teacher(&train, &test);
    let (scratch, a) = student(&cfg(TrainMode::Scratch, 3), None, &train, &test);
    let mut c = cfg(TrainMode::Rtk, 3);
    c.loss.alpha = 0.0;
    c.loss.beta = 0.0;
    let (rtk, b) = student(&c, Some(&t), &train, &test);
    assert_eq!(a, b);
    same_trajectory(&scratch, &rtk);
    assert_eq!(rtk.exports.len(), 3);
}

pub fn rtk_without_feature_term_matches_kd_only_bitwise() {
    let (train, test) = data();
    let t = teacher(&train, &test);
    let (kd, a) = student(&cfg(TrainMode::KdOnly, 3), Some(&t), &train, &test);
    let mut c = cfg(TrainMode::Rtk, 3);
    c.loss.beta = 0.0;
    let (rtk, b) = student(&c, Some(&t), &train, &test);
    assert_eq!(a, b);
    same_trajectory(&kd, &rtk);
}

pub fn unit_threshold_retains_nothing_and_matches_kd_only() {
    let (train, test) = data();
    let t = teacher(&train, &test);
    let (kd, a) = student(&cfg(TrainMode::KdOnly, 3), Some(&t), &train, &test);
    let mut c = cfg(TrainMode::Rtk, 3);
    c.rtk.tau = Some(1.0);
    let (rtk, b) = student(&c, Some(&t), &train, &test);
    assert_eq!(a, b);
    same_trajectory(&kd, &rtk);
    assert!(rtk.rows.iter().all(|r| r.retained_count == Some(0) && r.loss_rtk == 0.0));
    assert_eq!(rtk.summary.nonempty_retained_epochs, Some(0));
}

pub fn teacher_is_frozen_and_losses_add_up() {
    let (train, test) = data();
    let t = teacher(&train, &test);
    let before = t.to_checkpoint().to_bytes();
    let mut c = cfg(TrainMode::Rtk, 3);
    c.loss.beta = 7.0;
    let ((art, _), attn_file) = student_files(&c, Some(&t), &train, &test);
    assert_eq!(t.to_checkpoint().to_bytes(), before);
    for r in &art.rows {
        let sum = r.loss_ce + c.loss.alpha * r.loss_kl + c.loss.beta * r.loss_rtk;
        assert!((r.loss_total - sum).abs() <= 1e-6 * r.loss_total.abs().max(1.0), "{r:?}");
        assert!(r.loss_rtk > 0.0 && r.loss_kl > 0.0);
    }
    let attn = art.attention.as_ref().unwrap();
    let saved = Checkpoint::from_bytes(&attn_file.unwrap(), std::path::Path::new("attention.ckpt")).unwrap();
    assert_eq!(saved.to_bytes(), attn.to_checkpoint().to_bytes());
    assert_eq!(art.summary.parameters.attention, Some(attn.params().num_elements()));
}

pub fn exports_are_column_stochastic_every_epoch() {
    let (train, test) = data();
    let t = teacher(&train, &test);
    for cadence in [SelectionCadence::Epoch, SelectionCadence::Step] {
        let mut c = cfg(TrainMode::Rtk, 2);
        c.rtk.cadence = cadence;
        let (art, _) = student(&c, Some(&t), &train, &test);
        assert_eq!(art.exports.len(), 2);
        for (e, x) in art.exports.iter().enumerate() {
            assert_eq!(x.epoch, e);
            assert_eq!((x.n_s, x.n_t), (2, 4));
            for i in 0..x.n_t {
                let s: f64 = x.matrix.iter().map(|r| r[i]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
            assert_eq!(art.rows[e].retained_count, Some(x.retained.len()));
        }
    }
}

pub fn augmented_runs_use_the_live_teacher_deterministically() {
    let (train, test) = data();
    let t = teacher(&train, &test);
    let mut c = cfg(TrainMode::Rtk, 2);
    c.augment.enabled = true;
    c.augment.pad = 1;
    let (a, x) = student(&c, Some(&t), &train, &test);
    let (_, y) = student(&c, Some(&t), &train, &test);
    assert_eq!(x, y);
    assert!(a.rows.iter().all(|r| r.loss_total.is_finite()));
}

pub fn divergence_names_the_step() {
    let (train, test) = data();
    let dir = tempfile::tempdir().unwrap();
    let c = TrainerConfig {
        lr: 1e12,
        ..cfg(TrainMode::Scratch, 3)
    };
    let err = train_student(&c, &student_arch(), None, &train, &test, dir.path()).unwrap_err();
    assert_eq!(err.kind(), "divergence");
    assert!(err.to_string().contains("step"), "{err}");
}

pub fn incompatible_taps_fail_before_training() {
    let (train, test) = synth_dataset(&SynthConfig {
        size: 6,
        ..SynthConfig {
            num_classes: 3,
            n_train: 12,
            n_test: 6,
            size: 6,
            channels: 2,
            seed: 1,
            noise: 0.1,
            jitter: 0.0,
        }
    })
    .unwrap();
    let teacher_cfg = BackboneConfig {
        stage_depths: vec![1, 1, 1],
        stage_channels: vec![4, 4, 4],
        input_channels: 2,
        input_size: 6,
        num_classes: 3,
        tap_points: vec![],
    }
    .with_all_taps();
    let t = Model::<f32>::build(&teacher_cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = train_student(
        &cfg(TrainMode::Rtk, 1),
        &BackboneConfig::student4(2, 6, 3),
        Some(&t),
        &train,
        &test,
        dir.path(),
    )
    .unwrap_err();
    assert_eq!(err.kind(), "config");
    assert!(!dir.path().join("metrics.csv").exists());
    let err = train_student(&cfg(TrainMode::KdOnly, 1), &student_arch(), None, &train, &test, dir.path()).unwrap_err();
    assert_eq!(err.kind(), "config");
}

cases! {
    zero_epochs_saves_the_initialization,
    learning_rate_drops_exactly_at_configured_epochs,
    rtk_without_distillation_weights_matches_scratch_bitwise,
    rtk_without_feature_term_matches_kd_only_bitwise,
    unit_threshold_retains_nothing_and_matches_kd_only,
    teacher_is_frozen_and_losses_add_up,
    exports_are_column_stochastic_every_epoch,
    augmented_runs_use_the_live_teacher_deterministically,
    divergence_names_the_step,
    incompatible_taps_fail_before_training,
}
