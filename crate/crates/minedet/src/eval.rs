//! Detection evaluation: 2D-to-3D stitching with a per-track Kalman filter,
//! projected-3D IoU matching, FROC sensitivity at fixed false-positive rates,
//! average sensitivity, and average precision.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{predict, DetectorError, GridSettings, ParamVector};
use crate::geometry::{iou2d, p3d_iou, Box2D, Box3D, Detection, Detection3D};
use crate::phantom::{AnnotationSet, SliceStack, Volume};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation requires at least one ground-truth lesion")]
    NoGroundTruth,
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad prediction file line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub const DEFAULT_FP_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Score cut applied to per-slice predictions before stitching.
    pub score_thresh: f64,
    /// Per-slice NMS threshold at inference.
    pub nms_iou: f64,
    /// Minimum IoU between a detection and a track's predicted box for
    /// association (exclusive).
    pub gate_iou: f64,
    /// Number of consecutive unmatched slices a track survives.
    pub max_gap: usize,
    /// Projected-3D IoU threshold for a prediction to claim a ground truth.
    pub p3d_thresh: f64,
    /// Kalman process noise (per-slice state deviation growth), in pixels.
    pub process_noise: f64,
    /// Kalman measurement noise, in pixels.
    pub measurement_noise: f64,
    /// Target false-positive rates per volume.
    pub fp_rates: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.0,
            nms_iou: 0.5,
            gate_iou: 0.5,
            max_gap: 0,
            p3d_thresh: 0.3,
            process_noise: 1.0,
            measurement_noise: 1.0,
            fp_rates: DEFAULT_FP_RATES.to_vec(),
        }
    }
}

struct KalmanTrack {
    /// (cx, cy, w, h) with per-component variance; identity transition.
    state: [f64; 4],
    var: [f64; 4],
    members: Vec<(usize, Detection)>,
    gap: usize,
}

fn box_to_state(b: &Box2D) -> [f64; 4] {
    let (cx, cy) = b.center();
    [cx, cy, b.width(), b.height()]
}

impl KalmanTrack {
    fn open(slice: usize, det: Detection, measurement_var: f64) -> Self {
        Self {
            state: box_to_state(&det.box2d),
            var: [measurement_var; 4],
            members: vec![(slice, det)],
            gap: 0,
        }
    }

    fn predict_step(&mut self, process_var: f64) {
        for v in &mut self.var {
            *v += process_var;
        }
    }

    fn predicted_box(&self) -> Box2D {
        let [cx, cy, w, h] = self.state;
        Box2D::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
            .expect("track state keeps positive extents")
    }

    fn update(&mut self, slice: usize, det: Detection, measurement_var: f64) {
        let m = box_to_state(&det.box2d);
        for k in 0..4 {
            let gain = self.var[k] / (self.var[k] + measurement_var);
            self.state[k] += gain * (m[k] - self.state[k]);
            self.var[k] *= 1.0 - gain;
        }
        self.members.push((slice, det));
        self.gap = 0;
    }

    fn emit(&self) -> Detection3D {
        let mut xy = self.members[0].1.box2d;
        for (_, d) in &self.members[1..] {
            xy = xy.union_bounds(&d.box2d);
        }
        let z_min = self.members[0].0 as i64;
        let z_max = self.members[self.members.len() - 1].0 as i64;
        let score =
            self.members.iter().map(|(_, d)| d.score).sum::<f64>() / self.members.len() as f64;
        Detection3D {
            box3d: Box3D::new(xy, z_min, z_max).expect("member slices are ordered"),
            score,
        }
    }
}

/// Stitch per-slice detections into 3D boxes with greedy slice-by-slice
/// association: every open track predicts its next-slice box through a
/// constant-state Kalman model, detections claim predicted boxes by highest
/// IoU strictly above `gate_iou` (one-to-one, ties by higher detection score,
/// then lower track and detection index), unmatched detections open new
/// tracks, and a track closes once it misses more than `max_gap` consecutive
/// slices. Each track emits the union box over its z range with the mean
/// member score.
pub fn stitch_3d(per_slice: &[Vec<Detection>], cfg: &EvalConfig) -> Vec<Detection3D> {
    let process_var = cfg.process_noise * cfg.process_noise;
    let measurement_var = cfg.measurement_noise * cfg.measurement_noise;
    let mut open: Vec<KalmanTrack> = Vec::new();
    let mut done: Vec<Detection3D> = Vec::new();

    for (slice, dets) in per_slice.iter().enumerate() {
        for track in &mut open {
            track.predict_step(process_var);
        }
        // Candidate (track, detection) pairs above the gate.
        let mut pairs: Vec<(f64, f64, usize, usize)> = Vec::new();
        for (ti, track) in open.iter().enumerate() {
            let predicted = track.predicted_box();
            for (di, det) in dets.iter().enumerate() {
                let v = iou2d(&predicted, &det.box2d);
                if v > cfg.gate_iou {
                    pairs.push((v, det.score, ti, di));
                }
            }
        }
        pairs.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(b.1.partial_cmp(&a.1).unwrap())
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        let mut track_used = vec![false; open.len()];
        let mut det_used = vec![false; dets.len()];
        for (_, _, ti, di) in pairs {
            if track_used[ti] || det_used[di] {
                continue;
            }
            track_used[ti] = true;
            det_used[di] = true;
            open[ti].update(slice, dets[di], measurement_var);
        }
        // Age unmatched tracks, close the expired ones.
        let mut still_open = Vec::with_capacity(open.len());
        for (ti, mut track) in open.into_iter().enumerate() {
            if !track_used[ti] {
                track.gap += 1;
                if track.gap > cfg.max_gap {
                    done.push(track.emit());
                    continue;
                }
            }
            still_open.push(track);
        }
        open = still_open;
        for (di, det) in dets.iter().enumerate() {
            if !det_used[di] {
                open.push(KalmanTrack::open(slice, *det, measurement_var));
            }
        }
    }
    for track in open {
        done.push(track.emit());
    }
    done
}

/// Per-prediction true/false-positive flags and per-ground-truth hit flags.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub pred_is_tp: Vec<bool>,
    pub gt_hit: Vec<bool>,
}

/// Greedy matching in descending score order (ties by lower index): each
/// prediction claims the highest-P3D-IoU unclaimed ground truth with IoU at
/// least `p3d_thresh`; every ground truth is claimed at most once.
pub fn match_3d(preds: &[Detection3D], gts: &[Box3D], p3d_thresh: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .partial_cmp(&preds[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut pred_is_tp = vec![false; preds.len()];
    let mut gt_hit = vec![false; gts.len()];
    for idx in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_hit[g] {
                continue;
            }
            let v = p3d_iou(&preds[idx].box3d, gt);
            if v >= p3d_thresh && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            gt_hit[g] = true;
            pred_is_tp[idx] = true;
        }
    }
    MatchResult { pred_is_tp, gt_hit }
}

/// One volume's matched predictions: (score, is_tp) pairs plus its ground
/// truth count.
#[derive(Debug, Clone, Default)]
pub struct VolumeMatches {
    pub scored: Vec<(f64, bool)>,
    pub n_gt: usize,
}

impl VolumeMatches {
    pub fn from_match(preds: &[Detection3D], result: &MatchResult, n_gt: usize) -> Self {
        Self {
            scored: preds
                .iter()
                .zip(result.pred_is_tp.iter())
                .map(|(p, &tp)| (p.score, tp))
                .collect(),
            n_gt,
        }
    }
}

/// FROC operating points plus the scalar summary metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct FrocCurve {
    /// (false positives per volume, sensitivity), one point per distinct
    /// score threshold, in descending threshold order.
    pub points: Vec<(f64, f64)>,
    /// Sensitivity at each target FP rate.
    pub sensitivity_at: Vec<(f64, f64)>,
    /// Mean of the sensitivities over the target rates.
    pub avg_sensitivity: f64,
    /// Area under the precision-recall curve (all-points interpolation).
    pub ap: f64,
}

/// Sweep the score threshold over every distinct prediction score: at each
/// threshold the operating point is (total FP / n_volumes, total TP /
/// total GT). Sensitivity at a target rate is the best sensitivity among
/// points at or below that rate (0 if none); AP integrates the precision
/// envelope over recall across the same threshold sweep.
pub fn froc(volumes: &[VolumeMatches], fp_rates: &[f64]) -> Result<FrocCurve, EvalError> {
    let total_gt: usize = volumes.iter().map(|v| v.n_gt).sum();
    if total_gt == 0 || volumes.is_empty() {
        return Err(EvalError::NoGroundTruth);
    }
    let n_volumes = volumes.len() as f64;
    let mut scored: Vec<(f64, bool)> = volumes.iter().flat_map(|v| v.scored.clone()).collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    // One operating point per distinct score (equal scores enter together).
    let mut points = Vec::new();
    let mut pr_points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0usize;
    while i < scored.len() {
        let score = scored[i].0;
        while i < scored.len() && scored[i].0 == score {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let sens = tp as f64 / total_gt as f64;
        points.push((fp as f64 / n_volumes, sens));
        pr_points.push((sens, tp as f64 / (tp + fp) as f64));
    }

    let sensitivity_at: Vec<(f64, f64)> = fp_rates
        .iter()
        .map(|&rate| {
            let best = points
                .iter()
                .filter(|(fp_rate, _)| *fp_rate <= rate)
                .map(|(_, s)| *s)
                .fold(0.0f64, f64::max);
            (rate, best)
        })
        .collect();
    let avg_sensitivity = if sensitivity_at.is_empty() {
        0.0
    } else {
        sensitivity_at.iter().map(|(_, s)| s).sum::<f64>() / sensitivity_at.len() as f64
    };

    // Precision envelope from the highest recall backwards.
    let mut deltas = Vec::with_capacity(pr_points.len());
    let mut prev_recall = 0.0;
    for &(recall, _) in &pr_points {
        deltas.push(recall - prev_recall);
        prev_recall = recall;
    }
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    for k in (0..pr_points.len()).rev() {
        envelope = envelope.max(pr_points[k].1);
        ap += deltas[k] * envelope;
    }

    Ok(FrocCurve {
        points,
        sensitivity_at,
        avg_sensitivity,
        ap,
    })
}

/// Evaluate already-stitched predictions against 3D ground truth, volume by
/// volume.
pub fn evaluate_predictions(
    per_volume: &[(Vec<Detection3D>, Vec<Box3D>)],
    cfg: &EvalConfig,
) -> Result<FrocCurve, EvalError> {
    let matches: Vec<VolumeMatches> = per_volume
        .iter()
        .map(|(preds, gts)| {
            let m = match_3d(preds, gts, cfg.p3d_thresh);
            VolumeMatches::from_match(preds, &m, gts.len())
        })
        .collect();
    froc(&matches, &cfg.fp_rates)
}

/// Run the detector over every slice of every volume, stitch, match, and
/// aggregate the FROC curve. Requires fully annotated volumes.
pub fn evaluate_detector(
    params: &ParamVector,
    grid_settings: &GridSettings,
    volumes: &[(Volume, AnnotationSet)],
    cfg: &EvalConfig,
) -> Result<FrocCurve, EvalError> {
    let per_volume: Vec<(Vec<Detection3D>, Vec<Box3D>)> = volumes
        .iter()
        .map(|(vol, ann)| {
            let preds = detect_volume(params, grid_settings, vol, cfg)?;
            Ok((preds, ann.oracle_gt3d()))
        })
        .collect::<Result<_, EvalError>>()?;
    evaluate_predictions(&per_volume, cfg)
}

/// Per-slice inference over one volume followed by stitching.
pub fn detect_volume(
    params: &ParamVector,
    grid_settings: &GridSettings,
    volume: &Volume,
    cfg: &EvalConfig,
) -> Result<Vec<Detection3D>, EvalError> {
    let grid = grid_settings.grid_for(volume.width(), volume.height())?;
    let depth = params.arch().stack_depth;
    let mut per_slice = Vec::with_capacity(volume.depth());
    for z in 0..volume.depth() {
        let stack = SliceStack::from_volume(volume, z, depth);
        per_slice.push(predict(params, &stack, &grid, cfg.score_thresh, cfg.nms_iou)?);
    }
    Ok(stitch_3d(&per_slice, cfg))
}

// ---------------------------------------------------------------------------
// Interchange files
// ---------------------------------------------------------------------------

/// Write per-slice detections as `volume,slice,x_min,y_min,x_max,y_max,score`
/// lines. Floats use the shortest round-trip representation.
pub fn write_predictions(
    path: &Path,
    per_volume: &[(String, Vec<Vec<Detection>>)],
) -> Result<(), EvalError> {
    let mut out = String::from("volume,slice,x_min,y_min,x_max,y_max,score\n");
    for (volume_id, slices) in per_volume {
        for (slice, dets) in slices.iter().enumerate() {
            for d in dets {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    volume_id,
                    slice,
                    d.box2d.x_min(),
                    d.box2d.y_min(),
                    d.box2d.x_max(),
                    d.box2d.y_max(),
                    d.score
                ));
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a prediction interchange file back into per-volume, per-slice
/// detections. Volumes appear in first-encounter order.
pub fn read_predictions(path: &Path) -> Result<Vec<(String, Vec<Vec<Detection>>)>, EvalError> {
    let text = fs::read_to_string(path)?;
    let mut volumes: Vec<(String, Vec<(usize, Detection)>)> = Vec::new();
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(EvalError::Parse {
                line: line_no + 1,
                reason: format!("expected 7 fields, found {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64, EvalError> {
            s.parse().map_err(|e| EvalError::Parse {
                line: line_no + 1,
                reason: format!("bad number {s:?}: {e}"),
            })
        };
        let slice: usize = fields[1].parse().map_err(|e| EvalError::Parse {
            line: line_no + 1,
            reason: format!("bad slice {:?}: {e}", fields[1]),
        })?;
        let b = Box2D::new(
            parse(fields[2])?,
            parse(fields[3])?,
            parse(fields[4])?,
            parse(fields[5])?,
        )
        .map_err(|e| EvalError::Parse {
            line: line_no + 1,
            reason: e.to_string(),
        })?;
        let det = Detection::new(b, parse(fields[6])?).map_err(|e| EvalError::Parse {
            line: line_no + 1,
            reason: e.to_string(),
        })?;
        match volumes.iter_mut().find(|(id, _)| id == fields[0]) {
            Some((_, dets)) => dets.push((slice, det)),
            None => volumes.push((fields[0].to_string(), vec![(slice, det)])),
        }
    }
    Ok(volumes
        .into_iter()
        .map(|(id, dets)| {
            let n_slices = dets.iter().map(|(s, _)| s + 1).max().unwrap_or(0);
            let mut per_slice = vec![Vec::new(); n_slices];
            for (s, d) in dets {
                per_slice[s].push(d);
            }
            (id, per_slice)
        })
        .collect())
}

/// FROC CSV in the familiar table layout: one column per FP rate, then the
/// average sensitivity and AP.
pub fn froc_csv(curve: &FrocCurve) -> String {
    let mut header: Vec<String> = curve
        .sensitivity_at
        .iter()
        .map(|(rate, _)| format!("fp_{rate}"))
        .collect();
    header.push("avg_sensitivity".into());
    header.push("ap".into());
    let mut row: Vec<String> = curve
        .sensitivity_at
        .iter()
        .map(|(_, s)| format!("{s:.6}"))
        .collect();
    row.push(format!("{:.6}", curve.avg_sensitivity));
    row.push(format!("{:.6}", curve.ap));
    format!("{}\n{}\n", header.join(","), row.join(","))
}

pub fn write_froc_csv(curve: &FrocCurve, path: &Path) -> Result<(), EvalError> {
    fs::write(path, froc_csv(curve))?;
    Ok(())
}
