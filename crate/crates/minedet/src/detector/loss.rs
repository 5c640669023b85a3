//! The classification-loss family over a label assignment, plus smooth-L1
//! box regression and analytic gradients for the whole detector.
//!
//! Per-anchor terms use the foreground probability `p`: a foreground anchor
//! contributes `-ln p`, a background anchor `-ln(1 - p)`. Group sums are
//! normalized by the total anchor count `M`, the one reading under which
//! `biased - ideal` is an exact algebraic identity of the error term. The
//! literal per-group coefficients `(M_group / M) * sum` remain available as
//! [`Normalization::Literal`] for comparison.

use super::assign::{AnchorLabel, GtBox, LabelAssignment, Provenance};
use super::{forward_anchor, AnchorGrid, DetectorError, DetectorOutput, ParamVector, N_OUTPUTS};
use crate::geometry::encode_deltas;
use crate::phantom::SliceStack;

/// Which foreground set the classification loss is computed against.
///
/// - `Ideal`: labeled and (oracle) hidden anchors are foreground.
/// - `Biased`: only labeled anchors are foreground; hidden anchors are
///   falsely supervised as background.
/// - `Corrected`: labeled and mined anchors are foreground; hidden anchors
///   not covered by mining stay background. This is the loss the student
///   trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Ideal,
    Biased,
    Corrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// `(1/M) * sum` per group.
    #[default]
    GroupSum,
    /// `(M_group / M) * sum` per group, as the coefficients are typeset.
    Literal,
}

enum Effective {
    Foreground(usize),
    Background,
    Ignored,
}

fn effective_label(label: &AnchorLabel, mode: LossMode) -> Effective {
    match label {
        AnchorLabel::Ignored => Effective::Ignored,
        AnchorLabel::Background | AnchorLabel::HardNegative => Effective::Background,
        AnchorLabel::Foreground { gt, provenance } => {
            let is_fg = match mode {
                LossMode::Ideal => {
                    matches!(provenance, Provenance::Labeled | Provenance::Hidden)
                }
                LossMode::Biased => matches!(provenance, Provenance::Labeled),
                LossMode::Corrected => {
                    matches!(provenance, Provenance::Labeled | Provenance::Mined)
                }
            };
            if is_fg {
                Effective::Foreground(*gt)
            } else {
                Effective::Background
            }
        }
    }
}

fn check_prob(anchor: usize, p: f64) -> Result<f64, DetectorError> {
    if p > 0.0 && p < 1.0 {
        Ok(p)
    } else {
        Err(DetectorError::ProbabilityOutOfRange { anchor, value: p })
    }
}

/// Position classification loss over the assignment under `mode`, with the
/// default group-sum normalization.
pub fn classification_loss(
    output: &DetectorOutput,
    assign: &LabelAssignment,
    mode: LossMode,
) -> Result<f64, DetectorError> {
    classification_loss_with(output, assign, mode, Normalization::GroupSum)
}

pub fn classification_loss_with(
    output: &DetectorOutput,
    assign: &LabelAssignment,
    mode: LossMode,
    norm: Normalization,
) -> Result<f64, DetectorError> {
    assert_eq!(output.len(), assign.len(), "output/assignment length mismatch");
    let m_total = assign.len() as f64;
    let mut fg_sum = 0.0;
    let mut bg_sum = 0.0;
    let mut fg_n = 0usize;
    let mut bg_n = 0usize;
    for (i, label) in assign.labels().iter().enumerate() {
        match effective_label(label, mode) {
            Effective::Foreground(_) => {
                let p = check_prob(i, output.probs[i])?;
                fg_sum += -p.ln();
                fg_n += 1;
            }
            Effective::Background => {
                let p = check_prob(i, output.probs[i])?;
                bg_sum += -(1.0 - p).ln();
                bg_n += 1;
            }
            Effective::Ignored => {}
        }
    }
    Ok(match norm {
        Normalization::GroupSum => (fg_sum + bg_sum) / m_total,
        Normalization::Literal => {
            (fg_n as f64 / m_total) * fg_sum + (bg_n as f64 / m_total) * bg_sum
        }
    })
}

/// The exact gap `biased - ideal`: over the hidden-provenance anchors,
/// `(1/M) * sum[ -ln(1-p) - (-ln p) ]`.
pub fn loss_error(
    output: &DetectorOutput,
    assign: &LabelAssignment,
) -> Result<f64, DetectorError> {
    assert_eq!(output.len(), assign.len(), "output/assignment length mismatch");
    let m_total = assign.len() as f64;
    let mut acc = 0.0;
    for (i, label) in assign.labels().iter().enumerate() {
        if let AnchorLabel::Foreground {
            provenance: Provenance::Hidden,
            ..
        } = label
        {
            let p = check_prob(i, output.probs[i])?;
            acc += -(1.0 - p).ln() - (-p.ln());
        }
    }
    Ok(acc / m_total)
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Smooth-L1 loss on encoded deltas, averaged over the foreground anchors of
/// `mode`; zero when there are none. Background anchors contribute nothing.
pub fn regression_loss(
    output: &DetectorOutput,
    assign: &LabelAssignment,
    anchors: &AnchorGrid,
    gt_fg: &[GtBox],
    mode: LossMode,
) -> f64 {
    assert_eq!(output.len(), assign.len(), "output/assignment length mismatch");
    let mut acc = 0.0;
    let mut n_fg = 0usize;
    for (i, label) in assign.labels().iter().enumerate() {
        if let Effective::Foreground(gt) = effective_label(label, mode) {
            let target = encode_deltas(&anchors.anchors()[i], &gt_fg[gt].box2d);
            for k in 0..4 {
                acc += smooth_l1(output.deltas[i][k] - target[k]);
            }
            n_fg += 1;
        }
    }
    if n_fg == 0 {
        0.0
    } else {
        acc / n_fg as f64
    }
}

/// One batch element for loss/gradient evaluation.
pub struct TrainSample<'a> {
    pub stack: &'a SliceStack,
    pub anchors: &'a AnchorGrid,
    pub assignment: &'a LabelAssignment,
    pub gt_fg: &'a [GtBox],
}

struct BatchEval {
    cls: f64,
    reg: f64,
}

/// Shared forward (and optionally backward) pass; the finite-difference
/// oracle exercises exactly this loss function with `grad = None`.
fn eval_batch(
    params: &ParamVector,
    batch: &[TrainSample],
    mode: LossMode,
    norm: Normalization,
    mut grad: Option<&mut [f64]>,
) -> Result<BatchEval, DetectorError> {
    let arch = params.arch();
    let (w1_off, b1_off, w2_off, b2_off) = arch.layout();
    let feat_dim = arch.feature_dim();
    let batch_w = 1.0 / batch.len().max(1) as f64;
    let mut cls_total = 0.0;
    let mut reg_total = 0.0;

    for sample in batch {
        let m_total = sample.assignment.len() as f64;
        // Group counts, needed up front for the literal normalization and the
        // regression mean.
        let mut fg_n = 0usize;
        let mut bg_n = 0usize;
        for label in sample.assignment.labels() {
            match effective_label(label, mode) {
                Effective::Foreground(_) => fg_n += 1,
                Effective::Background => bg_n += 1,
                Effective::Ignored => {}
            }
        }
        let (fg_w, bg_w) = match norm {
            Normalization::GroupSum => (1.0 / m_total, 1.0 / m_total),
            Normalization::Literal => (fg_n as f64 / m_total, bg_n as f64 / m_total),
        };
        let reg_w = if fg_n == 0 { 0.0 } else { 1.0 / fg_n as f64 };

        for (i, label) in sample.assignment.labels().iter().enumerate() {
            let eff = effective_label(label, mode);
            if matches!(eff, Effective::Ignored) {
                continue;
            }
            let act = forward_anchor(params, sample.stack, &sample.anchors.anchors()[i]);
            let logit = act.outputs[0];
            let p = check_prob(i, 1.0 / (1.0 + (-logit).exp()))?;

            // d(loss)/d(outputs), accumulated with the batch weight folded in.
            let mut dout = [0.0; N_OUTPUTS];
            match eff {
                Effective::Foreground(gt) => {
                    cls_total += batch_w * fg_w * -p.ln();
                    dout[0] = batch_w * fg_w * (p - 1.0);
                    let target =
                        encode_deltas(&sample.anchors.anchors()[i], &sample.gt_fg[gt].box2d);
                    for k in 0..4 {
                        let r = act.outputs[1 + k] - target[k];
                        reg_total += batch_w * reg_w * smooth_l1(r);
                        dout[1 + k] = batch_w * reg_w * smooth_l1_grad(r);
                    }
                }
                Effective::Background => {
                    cls_total += batch_w * bg_w * -(1.0 - p).ln();
                    dout[0] = batch_w * bg_w * p;
                }
                Effective::Ignored => unreachable!(),
            }

            if let Some(g) = grad.as_deref_mut() {
                // Backprop through the two layers.
                let mut dpre = vec![0.0; arch.hidden];
                for o in 0..N_OUTPUTS {
                    if dout[o] == 0.0 {
                        continue;
                    }
                    g[b2_off + o] += dout[o];
                    let row = w2_off + o * arch.hidden;
                    for j in 0..arch.hidden {
                        g[row + j] += dout[o] * act.hidden[j];
                        dpre[j] += dout[o] * params.values()[row + j];
                    }
                }
                for j in 0..arch.hidden {
                    let d = dpre[j] * (1.0 - act.hidden[j] * act.hidden[j]);
                    if d == 0.0 {
                        continue;
                    }
                    g[b1_off + j] += d;
                    let row = w1_off + j * feat_dim;
                    for (k, f) in act.features.iter().enumerate() {
                        g[row + k] += d * f;
                    }
                }
            }
        }
    }

    if let Some(g) = grad.as_deref_mut() {
        for (layer, range) in [
            ("w1", w1_off..b1_off),
            ("b1", b1_off..w2_off),
            ("w2", w2_off..b2_off),
            ("b2", b2_off..g.len()),
        ] {
            if g[range].iter().any(|v| !v.is_finite()) {
                return Err(DetectorError::NonFiniteGradient { layer });
            }
        }
    }
    Ok(BatchEval {
        cls: cls_total,
        reg: reg_total,
    })
}

/// Batch-mean total loss (classification + regression) under `mode`.
pub fn total_loss(
    params: &ParamVector,
    batch: &[TrainSample],
    mode: LossMode,
) -> Result<f64, DetectorError> {
    let eval = eval_batch(params, batch, mode, Normalization::GroupSum, None)?;
    Ok(eval.cls + eval.reg)
}

/// Batch-mean losses and the analytic gradient of their sum with respect to
/// every parameter.
pub fn loss_and_gradients(
    params: &ParamVector,
    batch: &[TrainSample],
    mode: LossMode,
) -> Result<(f64, f64, Vec<f64>), DetectorError> {
    let mut grad = vec![0.0; params.len()];
    let eval = eval_batch(params, batch, mode, Normalization::GroupSum, Some(&mut grad))?;
    Ok((eval.cls, eval.reg, grad))
}
