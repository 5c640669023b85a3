//! The teacher-student engine: per-mini-batch suspicious-lesion mining,
//! pseudo-label policies, EMA teacher maintenance, the training loop, and
//! hard-negative mining.
//!
//! Each step: the teacher infers the un-augmented inputs, GT-NMS removes
//! predictions overlapping visible ground truth, a confidence filter keeps
//! scores at or above tau, the surviving boxes are rescaled into the
//! student's randomly resized frame and applied per policy, the student takes
//! one SGD step, and the teacher follows as an exponential moving average of
//! the student.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{
    assign_labels_full, loss_and_gradients, predict, sgd_step, Architecture, DetectorError,
    GridSettings, GtBox, LossMode, ParamVector, TrainSample,
};
use crate::eval::{evaluate_detector, EvalConfig, EvalError};
use crate::geometry::{gt_nms, iou2d, Box2D, Detection};
use crate::phantom::{
    mix_seed, resize_augment, AnnotationSet, BatchIter, PhantomError, Sample, SliceStack,
    TrainVolume, Volume,
};

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("parameter vectors differ in length: {teacher} vs {student}")]
    LengthMismatch { teacher: usize, student: usize },
    #[error("training aborted at iteration {iteration}: {source}")]
    Step {
        iteration: usize,
        source: DetectorError,
    },
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How mined pseudo lesions feed the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Mined boxes join the ground truth as positives.
    Adding,
    /// Anchors matched to mined boxes are excluded from the loss.
    Ignoring,
    /// Mined boxes are discarded (no mining baseline).
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    /// Confidence filter threshold for mined lesions.
    pub tau: f64,
    /// IoU threshold for the GT-NMS operation.
    pub gt_nms_iou: f64,
    /// EMA momentum for the teacher update.
    pub ema_momentum: f64,
    pub lr: f64,
    /// Step decay (x0.1 at 50% and 75% of the run) when enabled; constant
    /// learning rate otherwise.
    pub lr_decay: bool,
    /// Student resize-augmentation ratio range.
    pub resize_range: (f64, f64),
    pub policy: Policy,
    pub iterations: usize,
    pub batch_size: usize,
    /// Raw score cut on teacher predictions before GT-NMS.
    pub teacher_score_thresh: f64,
    /// NMS threshold for teacher inference during mining.
    pub teacher_nms_iou: f64,
    /// Background anchors kept per training sample (the rest are ignored for
    /// that step), mirroring the anchor subsampling of two-stage detector
    /// heads. 0 keeps every background anchor.
    pub bg_sample: usize,
    pub seed: u64,
    pub arch: Architecture,
    pub grid: GridSettings,
    /// Anchor-assignment foreground/background IoU thresholds.
    pub iou_fg: f64,
    pub iou_bg: f64,
    pub eval: EvalConfig,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            gt_nms_iou: 0.7,
            ema_momentum: 0.999,
            lr: 0.02,
            lr_decay: false,
            resize_range: (0.8, 1.2),
            policy: Policy::Adding,
            iterations: 2000,
            batch_size: 2,
            teacher_score_thresh: 0.05,
            teacher_nms_iou: 0.5,
            bg_sample: 0,
            seed: 0,
            arch: Architecture {
                patch: 8,
                hidden: 64,
                stack_depth: 3,
            },
            grid: GridSettings {
                stride: 8,
                scales: vec![12.0],
            },
            iou_fg: 0.5,
            iou_bg: 0.4,
            eval: EvalConfig::default(),
        }
    }
}

/// Per-batch-element mined pseudo lesions, in original-image coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MinedSet {
    pub per_element: Vec<Vec<Detection>>,
}

impl MinedSet {
    pub fn empty(n_elements: usize) -> Self {
        Self {
            per_element: vec![Vec::new(); n_elements],
        }
    }

    pub fn total(&self) -> usize {
        self.per_element.iter().map(|v| v.len()).sum()
    }

    pub fn min_score(&self) -> Option<f64> {
        self.per_element
            .iter()
            .flatten()
            .map(|d| d.score)
            .fold(None, |acc, s| Some(acc.map_or(s, |a: f64| a.min(s))))
    }

    /// Largest IoU between any mined box and the visible ground truth of its
    /// own element.
    pub fn max_iou_to(&self, visible: &[Vec<Box2D>]) -> Option<f64> {
        let mut best: Option<f64> = None;
        for (dets, gts) in self.per_element.iter().zip(visible.iter()) {
            for d in dets {
                for g in gts {
                    let v = iou2d(&d.box2d, g);
                    best = Some(best.map_or(v, |b| b.max(v)));
                }
            }
        }
        best
    }
}

/// Teacher inference, GT-NMS against the visible ground truth, then the
/// confidence filter at `cfg.tau`, all on the un-augmented inputs.
pub fn mine_batch(
    teacher: &ParamVector,
    batch: &[Sample],
    cfg: &MiningConfig,
) -> Result<MinedSet, MiningError> {
    let mut per_element = Vec::with_capacity(batch.len());
    for sample in batch {
        let grid = cfg.grid.grid_for(sample.stack.width(), sample.stack.height())?;
        let preds = predict(
            teacher,
            &sample.stack,
            &grid,
            cfg.teacher_score_thresh,
            cfg.teacher_nms_iou,
        )?;
        let survivors = gt_nms(&preds, &sample.visible_boxes, cfg.gt_nms_iou);
        per_element.push(
            survivors
                .into_iter()
                .filter(|d| d.score >= cfg.tau)
                .collect(),
        );
    }
    Ok(MinedSet { per_element })
}

/// Turn visible ground truth plus mined boxes into assignment inputs
/// according to the policy. Boxes must already live in the student's
/// (resized) coordinate frame.
pub fn apply_policy(
    visible: &[Box2D],
    mined: &[Detection],
    policy: Policy,
) -> (Vec<GtBox>, Vec<Box2D>) {
    let mut gt_fg: Vec<GtBox> = visible.iter().map(|b| GtBox::labeled(*b)).collect();
    let mut gt_ignore = Vec::new();
    match policy {
        Policy::Adding => {
            gt_fg.extend(mined.iter().map(|d| GtBox::mined(d.box2d)));
        }
        Policy::Ignoring => {
            gt_ignore.extend(mined.iter().map(|d| d.box2d));
        }
        Policy::None => {}
    }
    (gt_fg, gt_ignore)
}

/// `teacher <- m * teacher + (1 - m) * student`, element-wise.
pub fn ema_update(
    teacher: &ParamVector,
    student: &ParamVector,
    m: f64,
) -> Result<ParamVector, MiningError> {
    if teacher.len() != student.len() {
        return Err(MiningError::LengthMismatch {
            teacher: teacher.len(),
            student: student.len(),
        });
    }
    assert!((0.0..=1.0).contains(&m), "EMA momentum must be in [0, 1]");
    let values = teacher
        .values()
        .iter()
        .zip(student.values().iter())
        .map(|(t, s)| m * t + (1.0 - m) * s)
        .collect();
    Ok(ParamVector::new(teacher.arch(), values).expect("same architecture"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub mined_count: usize,
    pub ema_distance: f64,
    /// Lowest mined score this step, when anything was mined.
    pub mined_min_score: Option<f64>,
    /// Highest IoU between a mined box and visible GT this step.
    pub mined_max_gt_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValRecord {
    pub iteration: usize,
    pub ap: f64,
    pub avg_sensitivity: f64,
}

/// Per-iteration losses and mining stats, plus per-epoch validation metrics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub vals: Vec<ValRecord>,
}

impl TrainLog {
    /// CSV with one row per iteration; validation columns are filled on the
    /// iterations where the teacher was evaluated.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,cls_loss,reg_loss,mined_count,val_ap,val_as\n");
        for step in &self.steps {
            let val = self.vals.iter().find(|v| v.iteration == step.iteration);
            let (ap, asens) = match val {
                Some(v) => (format!("{:.6}", v.ap), format!("{:.6}", v.avg_sensitivity)),
                None => (String::new(), String::new()),
            };
            out.push_str(&format!(
                "{},{:.6},{:.6},{},{},{}\n",
                step.iteration, step.cls_loss, step.reg_loss, step.mined_count, ap, asens
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MiningError> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Constant learning rate, or step decay (x0.1) at 50% and 75% of the run.
pub fn learning_rate(cfg: &MiningConfig, iteration: usize) -> f64 {
    if !cfg.lr_decay {
        return cfg.lr;
    }
    let progress = iteration as f64 / cfg.iterations.max(1) as f64;
    if progress >= 0.75 {
        cfg.lr * 0.01
    } else if progress >= 0.5 {
        cfg.lr * 0.1
    } else {
        cfg.lr
    }
}

pub struct StepOutcome {
    pub student: ParamVector,
    pub teacher: ParamVector,
    pub record: StepRecord,
}

/// One training step over one batch. The teacher is read for mining and only
/// written by the EMA update.
pub fn train_step(
    student: &ParamVector,
    teacher: &ParamVector,
    batch: &[Sample],
    cfg: &MiningConfig,
    iteration: usize,
    lr: f64,
    resize_rng: &mut ChaCha8Rng,
) -> Result<StepOutcome, MiningError> {
    // 1. Mine on the original inputs.
    let mined = if cfg.policy == Policy::None {
        MinedSet::empty(batch.len())
    } else {
        mine_batch(teacher, batch, cfg)?
    };
    let visible: Vec<Vec<Box2D>> = batch.iter().map(|s| s.visible_boxes.clone()).collect();
    let mined_min_score = mined.min_score();
    let mined_max_gt_iou = mined.max_iou_to(&visible);

    // 2. Resize the student inputs, scaling ground truth and mined boxes.
    let ratio = resize_rng.gen_range(cfg.resize_range.0..=cfg.resize_range.1);
    struct Prepared {
        stack: SliceStack,
        gt_fg: Vec<GtBox>,
        gt_ignore: Vec<Box2D>,
        hard_negatives: Vec<Box2D>,
    }
    let mut prepared = Vec::with_capacity(batch.len());
    for (sample, mined_dets) in batch.iter().zip(mined.per_element.iter()) {
        let (stack, scaled_visible) = resize_augment(&sample.stack, &sample.visible_boxes, ratio)?;
        let scaled_mined: Vec<Detection> = mined_dets
            .iter()
            .map(|d| Detection {
                box2d: d.box2d.scaled(ratio),
                score: d.score,
            })
            .collect();
        // 3. Apply the pseudo-label policy in the resized frame.
        let (gt_fg, gt_ignore) = apply_policy(&scaled_visible, &scaled_mined, cfg.policy);
        let hard_negatives = sample
            .hard_negative_boxes
            .iter()
            .map(|b| b.scaled(ratio))
            .collect();
        prepared.push(Prepared {
            stack,
            gt_fg,
            gt_ignore,
            hard_negatives,
        });
    }

    // 4. Student loss and SGD step.
    let mut grids = Vec::with_capacity(prepared.len());
    let mut assignments = Vec::with_capacity(prepared.len());
    for p in &prepared {
        let grid = cfg.grid.grid_for(p.stack.width(), p.stack.height())?;
        let mut assignment = assign_labels_full(
            &grid,
            &p.gt_fg,
            &p.gt_ignore,
            &p.hard_negatives,
            cfg.iou_fg,
            cfg.iou_bg,
        );
        if cfg.bg_sample > 0 {
            assignment = assignment.subsample_background(cfg.bg_sample, resize_rng);
        }
        grids.push(grid);
        assignments.push(assignment);
    }
    let samples: Vec<TrainSample> = prepared
        .iter()
        .zip(grids.iter())
        .zip(assignments.iter())
        .map(|((p, grid), assignment)| TrainSample {
            stack: &p.stack,
            anchors: grid,
            assignment,
            gt_fg: &p.gt_fg,
        })
        .collect();
    let (cls_loss, reg_loss, grad) = loss_and_gradients(student, &samples, LossMode::Corrected)
        .map_err(|source| MiningError::Step { iteration, source })?;
    let new_student = sgd_step(student, &grad, lr);

    // 5. EMA teacher update.
    let new_teacher = ema_update(teacher, &new_student, cfg.ema_momentum)?;
    let ema_distance = new_teacher.l2_distance(&new_student);

    Ok(StepOutcome {
        student: new_student,
        teacher: new_teacher,
        record: StepRecord {
            iteration,
            cls_loss,
            reg_loss,
            mined_count: mined.total(),
            ema_distance,
            mined_min_score,
            mined_max_gt_iou,
        },
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Teacher checkpoint with the best validation AP.
    pub teacher: ParamVector,
    pub best_val_ap: f64,
    pub best_iteration: usize,
    /// Teacher and student at the final iteration.
    pub final_teacher: ParamVector,
    pub final_student: ParamVector,
    pub log: TrainLog,
}

/// Run the full teacher-student loop from a fresh initialization.
pub fn train(
    volumes: &[TrainVolume],
    val: &[(Volume, AnnotationSet)],
    cfg: &MiningConfig,
) -> Result<TrainOutcome, MiningError> {
    train_from(volumes, val, cfg, None)
}

/// [`train`] with an optional warm-start checkpoint; student and teacher both
/// start from it.
pub fn train_from(
    volumes: &[TrainVolume],
    val: &[(Volume, AnnotationSet)],
    cfg: &MiningConfig,
    init: Option<&ParamVector>,
) -> Result<TrainOutcome, MiningError> {
    let mut student = match init {
        Some(p) => p.clone(),
        None => ParamVector::init(cfg.arch, cfg.seed),
    };
    let mut teacher = student.clone();
    let mut log = TrainLog::default();

    if cfg.iterations == 0 {
        return Ok(TrainOutcome {
            teacher: teacher.clone(),
            best_val_ap: f64::NEG_INFINITY,
            best_iteration: 0,
            final_teacher: teacher,
            final_student: student,
            log,
        });
    }

    let mut batches = BatchIter::new(
        volumes,
        cfg.batch_size,
        cfg.arch.stack_depth,
        mix_seed(cfg.seed, 0xba7c),
    )?;
    let mut resize_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5e51));
    let batches_per_epoch = batches.batches_per_epoch();

    // Baseline validation of the (possibly warm-started) teacher, so a
    // retraining stage can never end below its starting point.
    let initial = evaluate_detector(&teacher, &cfg.grid, val, &cfg.eval)?;
    log.vals.push(ValRecord {
        iteration: 0,
        ap: initial.ap,
        avg_sensitivity: initial.avg_sensitivity,
    });
    let mut best_val_ap = initial.ap;
    let mut best_iteration = 0usize;
    let mut best_teacher = teacher.clone();

    for iteration in 1..=cfg.iterations {
        let batch = batches.next_batch();
        let lr = learning_rate(cfg, iteration - 1);
        let outcome = train_step(&student, &teacher, &batch, cfg, iteration, lr, &mut resize_rng)?;
        student = outcome.student;
        teacher = outcome.teacher;
        log.steps.push(outcome.record);

        let epoch_end = iteration % batches_per_epoch == 0;
        if epoch_end || iteration == cfg.iterations {
            let curve = evaluate_detector(&teacher, &cfg.grid, val, &cfg.eval)?;
            log.vals.push(ValRecord {
                iteration,
                ap: curve.ap,
                avg_sensitivity: curve.avg_sensitivity,
            });
            if curve.ap > best_val_ap {
                best_val_ap = curve.ap;
                best_iteration = iteration;
                best_teacher = teacher.clone();
            }
        }
    }

    Ok(TrainOutcome {
        teacher: best_teacher,
        best_val_ap,
        best_iteration,
        final_teacher: teacher,
        final_student: student,
        log,
    })
}

/// Confident predictions on fully annotated volumes that match no ground
/// truth: reused as explicit background supervision in retraining.
pub fn mine_hard_negatives(
    params: &ParamVector,
    volumes: &[(Volume, AnnotationSet)],
    score_thresh: f64,
    iou_thresh: f64,
    nms_iou: f64,
    grid_settings: &GridSettings,
) -> Result<Vec<Vec<(usize, Box2D)>>, MiningError> {
    let depth = params.arch().stack_depth;
    let mut out = Vec::with_capacity(volumes.len());
    for (volume, ann) in volumes {
        let grid = grid_settings.grid_for(volume.width(), volume.height())?;
        let mut found = Vec::new();
        for z in 0..volume.depth() {
            let stack = SliceStack::from_volume(volume, z, depth);
            let preds = predict(params, &stack, &grid, score_thresh, nms_iou)?;
            let gts = ann.visible_boxes_on(z);
            for p in preds {
                if gts.iter().all(|g| iou2d(&p.box2d, g) <= iou_thresh) {
                    found.push((z, p.box2d));
                }
            }
        }
        out.push(found);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box2D;
    use crate::phantom::{generate_dataset, hide_annotations, PhantomSpec};

    fn tiny_spec() -> PhantomSpec {
        PhantomSpec {
            width: 32,
            height: 32,
            depth: 4,
            lesion_count: (1, 2),
            sigma_xy: (2.0, 3.0),
            ..PhantomSpec::default()
        }
    }

    fn tiny_cfg() -> MiningConfig {
        MiningConfig {
            arch: Architecture {
                patch: 4,
                hidden: 8,
                stack_depth: 3,
            },
            grid: GridSettings {
                stride: 8,
                scales: vec![10.0],
            },
            iterations: 6,
            batch_size: 2,
            ..MiningConfig::default()
        }
    }

    fn tiny_samples(cfg: &MiningConfig, n: usize) -> Vec<Sample> {
        let data = generate_dataset(&tiny_spec(), n, 5).unwrap();
        let volumes: Vec<TrainVolume> = data
            .into_iter()
            .map(|(v, a)| TrainVolume::new(v, hide_annotations(&a, 0.5, 3)))
            .collect();
        let mut iter = BatchIter::new(&volumes, n, cfg.arch.stack_depth, 7).unwrap();
        iter.next_batch()
    }

    #[test]
    fn untrained_teacher_mines_nothing() {
        let cfg = tiny_cfg();
        let batch = tiny_samples(&cfg, 2);
        // Zero parameters score 0.5 everywhere, below tau = 0.9.
        let teacher = ParamVector::zeros(cfg.arch);
        let mined = mine_batch(&teacher, &batch, &cfg).unwrap();
        assert_eq!(mined.total(), 0);
        assert_eq!(mined.per_element.len(), 2);
    }

    #[test]
    fn mine_batch_equals_pipeline_decomposition() {
        // tau = 0 keeps every GT-NMS survivor, making the composition check
        // meaningful with an arbitrary teacher.
        let cfg = MiningConfig {
            tau: 0.0,
            teacher_score_thresh: 0.3,
            ..tiny_cfg()
        };
        let batch = tiny_samples(&cfg, 3);
        let teacher = ParamVector::init(cfg.arch, 9);
        let mined = mine_batch(&teacher, &batch, &cfg).unwrap();
        for (sample, got) in batch.iter().zip(mined.per_element.iter()) {
            let grid = cfg
                .grid
                .grid_for(sample.stack.width(), sample.stack.height())
                .unwrap();
            let preds = predict(
                &teacher,
                &sample.stack,
                &grid,
                cfg.teacher_score_thresh,
                cfg.teacher_nms_iou,
            )
            .unwrap();
            let want: Vec<Detection> = gt_nms(&preds, &sample.visible_boxes, cfg.gt_nms_iou)
                .into_iter()
                .filter(|d| d.score >= cfg.tau)
                .collect();
            assert_eq!(got, &want);
        }
    }

    #[test]
    fn mined_set_respects_invariants() {
        let cfg = MiningConfig {
            tau: 0.2,
            ..tiny_cfg()
        };
        let batch = tiny_samples(&cfg, 3);
        let teacher = ParamVector::init(cfg.arch, 31);
        let mined = mine_batch(&teacher, &batch, &cfg).unwrap();
        let visible: Vec<Vec<Box2D>> = batch.iter().map(|s| s.visible_boxes.clone()).collect();
        if let Some(min_score) = mined.min_score() {
            assert!(min_score >= cfg.tau);
        }
        if let Some(max_iou) = mined.max_iou_to(&visible) {
            assert!(max_iou <= cfg.gt_nms_iou);
        }
    }

    #[test]
    fn apply_policy_variants() {
        let visible = vec![Box2D::new(2.0, 2.0, 8.0, 8.0).unwrap()];
        let mined = vec![Detection::new(Box2D::new(12.0, 12.0, 20.0, 20.0).unwrap(), 0.95).unwrap()];

        let (fg, ignore) = apply_policy(&visible, &mined, Policy::None);
        assert_eq!(fg.len(), 1);
        assert!(ignore.is_empty());

        let (fg, ignore) = apply_policy(&visible, &[], Policy::Adding);
        assert_eq!(fg.len(), 1);
        assert!(ignore.is_empty());

        let (fg, ignore) = apply_policy(&visible, &mined, Policy::Adding);
        assert_eq!(fg.len(), 2);
        assert!(ignore.is_empty());

        let (fg, ignore) = apply_policy(&visible, &mined, Policy::Ignoring);
        assert_eq!(fg.len(), 1);
        assert_eq!(ignore.len(), 1);
    }

    #[test]
    fn ema_fixed_point_and_momentum() {
        let arch = tiny_cfg().arch;
        let theta = ParamVector::init(arch, 3);
        let same = ema_update(&theta, &theta, 0.999).unwrap();
        assert_eq!(same, theta);

        // Scalar case from a zero teacher towards a unit student.
        let zero = ParamVector::zeros(arch);
        let mut one = ParamVector::zeros(arch);
        one.values_mut().fill(1.0);
        let stepped = ema_update(&zero, &one, 0.999).unwrap();
        for v in stepped.values() {
            assert!((v - 0.001).abs() < 1e-15);
        }
    }

    #[test]
    fn ema_contracts_geometrically() {
        let arch = tiny_cfg().arch;
        let target = ParamVector::init(arch, 11);
        let mut teacher = ParamVector::zeros(arch);
        let initial = teacher.l2_distance(&target);
        let m = 0.999;
        for k in 1..=100 {
            teacher = ema_update(&teacher, &target, m).unwrap();
            let want = m.powi(k) * initial;
            let got = teacher.l2_distance(&target);
            assert!((got - want).abs() <= 1e-9 * want);
        }
    }

    #[test]
    fn ema_rejects_length_mismatch() {
        let a = ParamVector::zeros(Architecture {
            patch: 4,
            hidden: 8,
            stack_depth: 3,
        });
        let b = ParamVector::zeros(Architecture {
            patch: 4,
            hidden: 10,
            stack_depth: 3,
        });
        assert!(matches!(
            ema_update(&a, &b, 0.999),
            Err(MiningError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn step_with_zero_momentum_copies_student() {
        let cfg = MiningConfig {
            ema_momentum: 0.0,
            ..tiny_cfg()
        };
        let batch = tiny_samples(&cfg, 2);
        let student = ParamVector::init(cfg.arch, 1);
        let teacher = student.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = train_step(&student, &teacher, &batch, &cfg, 1, cfg.lr, &mut rng).unwrap();
        assert_eq!(out.teacher, out.student);
    }

    #[test]
    fn teacher_moves_only_through_ema() {
        let cfg = tiny_cfg();
        let batch = tiny_samples(&cfg, 2);
        let student = ParamVector::init(cfg.arch, 1);
        let teacher = ParamVector::init(cfg.arch, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = train_step(&student, &teacher, &batch, &cfg, 1, cfg.lr, &mut rng).unwrap();
        let want = ema_update(&teacher, &out.student, cfg.ema_momentum).unwrap();
        assert_eq!(out.teacher, want);
    }

    #[test]
    fn degenerate_batch_still_steps() {
        // No visible GT and policy None: a classification-only update against
        // all-background targets.
        let cfg = MiningConfig {
            policy: Policy::None,
            ..tiny_cfg()
        };
        let spec = PhantomSpec {
            lesion_count: (0, 0),
            ..tiny_spec()
        };
        let data = generate_dataset(&spec, 1, 2).unwrap();
        let volumes: Vec<TrainVolume> = data
            .into_iter()
            .map(|(v, a)| TrainVolume::new(v, a))
            .collect();
        let mut iter = BatchIter::new(&volumes, 2, cfg.arch.stack_depth, 7).unwrap();
        let batch = iter.next_batch();
        let student = ParamVector::init(cfg.arch, 1);
        let teacher = student.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = train_step(&student, &teacher, &batch, &cfg, 1, cfg.lr, &mut rng).unwrap();
        assert_eq!(out.record.reg_loss, 0.0);
        assert!(out.record.cls_loss > 0.0);
        assert_eq!(out.record.mined_count, 0);
        assert!(out.student != student);
    }

    fn tiny_train_setup() -> (Vec<TrainVolume>, Vec<(Volume, AnnotationSet)>) {
        let data = generate_dataset(&tiny_spec(), 3, 5).unwrap();
        let volumes: Vec<TrainVolume> = data
            .into_iter()
            .map(|(v, a)| TrainVolume::new(v, hide_annotations(&a, 0.5, 3)))
            .collect();
        let val = generate_dataset(&tiny_spec(), 1, 99).unwrap();
        (volumes, val)
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let (volumes, val) = tiny_train_setup();
        let cfg = MiningConfig {
            iterations: 0,
            ..tiny_cfg()
        };
        let out = train(&volumes, &val, &cfg).unwrap();
        assert_eq!(out.teacher, ParamVector::init(cfg.arch, cfg.seed));
        assert!(out.log.steps.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (volumes, val) = tiny_train_setup();
        let cfg = tiny_cfg();
        let a = train(&volumes, &val, &cfg).unwrap();
        let b = train(&volumes, &val, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.teacher, b.teacher);
        assert_eq!(a.log.to_csv(), b.log.to_csv());
    }

    #[test]
    fn training_is_oracle_blind() {
        let (volumes, val) = tiny_train_setup();
        let stripped: Vec<TrainVolume> = volumes
            .iter()
            .map(|tv| TrainVolume {
                volume: tv.volume.clone(),
                annotations: tv.annotations.without_hidden(),
                hard_negatives: tv.hard_negatives.clone(),
            })
            .collect();
        let cfg = tiny_cfg();
        let with_oracle = train(&volumes, &val, &cfg).unwrap();
        let without_oracle = train(&stripped, &val, &cfg).unwrap();
        assert_eq!(with_oracle.log, without_oracle.log);
        assert_eq!(with_oracle.teacher, without_oracle.teacher);
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = MiningConfig {
            iterations: 100,
            lr: 0.02,
            lr_decay: false,
            ..tiny_cfg()
        };
        assert_eq!(learning_rate(&cfg, 0), 0.02);
        assert_eq!(learning_rate(&cfg, 99), 0.02);
        let cfg = MiningConfig {
            lr_decay: true,
            ..cfg
        };
        assert_eq!(learning_rate(&cfg, 0), 0.02);
        assert_eq!(learning_rate(&cfg, 49), 0.02);
        assert!((learning_rate(&cfg, 50) - 0.002).abs() < 1e-15);
        assert!((learning_rate(&cfg, 75) - 0.0002).abs() < 1e-15);
    }

    #[test]
    fn hard_negatives_exclude_ground_truth_overlaps() {
        let cfg = tiny_cfg();
        let data = generate_dataset(&tiny_spec(), 2, 13).unwrap();
        let params = ParamVector::init(cfg.arch, 5);
        // Low threshold so the untrained detector produces candidates.
        let hn = mine_hard_negatives(&params, &data, 0.2, 0.3, 0.5, &cfg.grid).unwrap();
        assert_eq!(hn.len(), 2);
        for ((_, ann), found) in data.iter().zip(hn.iter()) {
            for (slice, b) in found {
                for g in ann.visible_boxes_on(*slice) {
                    assert!(iou2d(b, &g) <= 0.3);
                }
            }
        }
    }
}
