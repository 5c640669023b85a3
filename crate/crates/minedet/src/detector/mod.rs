//! A minimal anchor-based detector: per-anchor patch features feed a
//! one-hidden-layer perceptron producing a foreground logit and four box
//! deltas. Gradients are analytic; the optimizer is plain SGD.

mod assign;
mod loss;

pub use assign::{assign_labels, assign_labels_full, AnchorLabel, GtBox, LabelAssignment, Provenance};
pub use loss::{
    classification_loss, classification_loss_with, loss_and_gradients, regression_loss,
    smooth_l1, total_loss, loss_error, LossMode, Normalization, TrainSample,
};

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{decode_deltas, nms, Box2D, Detection, GeometryError};
use crate::phantom::SliceStack;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("stride {stride} exceeds image {width}x{height}")]
    StrideTooLarge {
        stride: usize,
        width: usize,
        height: usize,
    },
    #[error("anchor scales must be non-empty")]
    EmptyScales,
    #[error("input stack {got_w}x{got_h}x{got_d} does not match grid/arch {want_w}x{want_h}x{want_d}")]
    ShapeMismatch {
        got_w: usize,
        got_h: usize,
        got_d: usize,
        want_w: usize,
        want_h: usize,
        want_d: usize,
    },
    #[error("anchor {anchor}: foreground probability {value} outside (0, 1)")]
    ProbabilityOutOfRange { anchor: usize, value: f64 },
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: &'static str },
    #[error("parameter count {got} does not match architecture ({want})")]
    ParamCount { got: usize, want: usize },
    #[error("bad checkpoint: {0}")]
    CheckpointFormat(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
}

/// Network shape: per-anchor patches of `patch x patch` pixels over
/// `stack_depth` slices, one tanh hidden layer, five outputs
/// (1 classification logit + 4 box deltas).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub patch: usize,
    pub hidden: usize,
    pub stack_depth: usize,
}

pub const N_OUTPUTS: usize = 5;

impl Architecture {
    pub fn feature_dim(&self) -> usize {
        self.patch * self.patch * self.stack_depth
    }

    pub fn n_params(&self) -> usize {
        let feat = self.feature_dim();
        self.hidden * feat + self.hidden + N_OUTPUTS * self.hidden + N_OUTPUTS
    }

    /// Offsets of (w1, b1, w2, b2) in the flat parameter vector.
    pub(crate) fn layout(&self) -> (usize, usize, usize, usize) {
        let feat = self.feature_dim();
        let w1 = 0;
        let b1 = w1 + self.hidden * feat;
        let w2 = b1 + self.hidden;
        let b2 = w2 + N_OUTPUTS * self.hidden;
        (w1, b1, w2, b2)
    }
}

/// Flat detector parameters plus their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    arch: Architecture,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(arch: Architecture, values: Vec<f64>) -> Result<Self, DetectorError> {
        if values.len() != arch.n_params() {
            return Err(DetectorError::ParamCount {
                got: values.len(),
                want: arch.n_params(),
            });
        }
        Ok(Self { arch, values })
    }

    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            values: vec![0.0; arch.n_params()],
        }
    }

    /// Seeded initialization: weights uniform in [-s, s] with s = 1/sqrt(fan_in),
    /// zero biases except the classification bias at logit(0.01) so early
    /// background scores start low.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feat = arch.feature_dim();
        let mut values = vec![0.0; arch.n_params()];
        let (w1, b1, w2, b2) = arch.layout();
        let s1 = 1.0 / (feat as f64).sqrt();
        for v in &mut values[w1..b1] {
            *v = rng.gen_range(-s1..=s1);
        }
        let s2 = 1.0 / (arch.hidden as f64).sqrt();
        for v in &mut values[w2..b2] {
            *v = rng.gen_range(-s2..=s2);
        }
        let p0: f64 = 0.01;
        values[b2] = (p0 / (1.0 - p0)).ln();
        Self { arch, values }
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l2_distance(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// One SGD step: `theta <- theta - lr * grad`, no momentum or weight decay.
pub fn sgd_step(params: &ParamVector, grad: &[f64], lr: f64) -> ParamVector {
    assert_eq!(params.len(), grad.len(), "gradient length mismatch");
    assert!(lr > 0.0, "learning rate must be positive");
    let values = params
        .values
        .iter()
        .zip(grad.iter())
        .map(|(p, g)| p - lr * g)
        .collect();
    ParamVector {
        arch: params.arch,
        values,
    }
}

/// Anchor-grid construction parameters, independent of any one image size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSettings {
    pub stride: usize,
    pub scales: Vec<f64>,
}

impl GridSettings {
    pub fn grid_for(&self, width: usize, height: usize) -> Result<AnchorGrid, DetectorError> {
        build_anchor_grid(width, height, self.stride, &self.scales)
    }
}

/// Prior boxes tiling an image at a fixed stride, one per (position, scale).
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    anchors: Vec<Box2D>,
    width: usize,
    height: usize,
    stride: usize,
    scales: Vec<f64>,
}

/// Deterministic anchor grid: `ceil(H/stride) * ceil(W/stride) * |scales|`
/// anchors, each clipped into the image bounds.
pub fn build_anchor_grid(
    width: usize,
    height: usize,
    stride: usize,
    scales: &[f64],
) -> Result<AnchorGrid, DetectorError> {
    if stride == 0 || stride > width || stride > height {
        return Err(DetectorError::StrideTooLarge {
            stride,
            width,
            height,
        });
    }
    if scales.is_empty() {
        return Err(DetectorError::EmptyScales);
    }
    let cols = width.div_ceil(stride);
    let rows = height.div_ceil(stride);
    let mut anchors = Vec::with_capacity(rows * cols * scales.len());
    for r in 0..rows {
        let cy = (r * stride) as f64 + stride as f64 / 2.0;
        for c in 0..cols {
            let cx = (c * stride) as f64 + stride as f64 / 2.0;
            for &scale in scales {
                let half = scale / 2.0;
                let raw = Box2D::new(cx - half, cy - half, cx + half, cy + half)
                    .expect("anchor extents are positive");
                anchors.push(raw.clamped(width as f64, height as f64));
            }
        }
    }
    Ok(AnchorGrid {
        anchors,
        width,
        height,
        stride,
        scales: scales.to_vec(),
    })
}

impl AnchorGrid {
    pub fn anchors(&self) -> &[Box2D] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

/// Per-anchor foreground probability and regression deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub probs: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
}

impl DetectorOutput {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// How far the feature window extends past the anchor box; the context
/// beyond the box is what separates compact blobs from elongated structures.
const WINDOW_CONTEXT: f64 = 2.0;

/// Mean-normalized raw pixels of the anchor-centered window (the anchor box
/// scaled by [`WINDOW_CONTEXT`]), sampled on a patch x patch grid across all
/// stack slices.
pub(crate) fn anchor_features(stack: &SliceStack, anchor: &Box2D, arch: &Architecture) -> Vec<f64> {
    let p = arch.patch;
    let (cx, cy) = anchor.center();
    let w = anchor.width() * WINDOW_CONTEXT;
    let h = anchor.height() * WINDOW_CONTEXT;
    let x0 = cx - 0.5 * w;
    let y0 = cy - 0.5 * h;
    let mut feat = Vec::with_capacity(arch.feature_dim());
    for s in 0..arch.stack_depth {
        for i in 0..p {
            let y = y0 + (i as f64 + 0.5) * h / p as f64;
            for j in 0..p {
                let x = x0 + (j as f64 + 0.5) * w / p as f64;
                feat.push(stack.sample_bilinear(x, y, s));
            }
        }
    }
    let mean = feat.iter().sum::<f64>() / feat.len() as f64;
    for v in &mut feat {
        *v -= mean;
    }
    feat
}

pub(crate) struct AnchorActivations {
    pub features: Vec<f64>,
    pub hidden: Vec<f64>,
    pub outputs: [f64; N_OUTPUTS],
}

pub(crate) fn forward_anchor(
    params: &ParamVector,
    stack: &SliceStack,
    anchor: &Box2D,
) -> AnchorActivations {
    let arch = params.arch;
    let feat = anchor_features(stack, anchor, &arch);
    let (w1, b1, w2, b2) = arch.layout();
    let v = &params.values;
    let mut hidden = vec![0.0; arch.hidden];
    for (j, h) in hidden.iter_mut().enumerate() {
        let row = &v[w1 + j * feat.len()..w1 + (j + 1) * feat.len()];
        let mut acc = v[b1 + j];
        for (w, f) in row.iter().zip(feat.iter()) {
            acc += w * f;
        }
        *h = acc.tanh();
    }
    let mut outputs = [0.0; N_OUTPUTS];
    for (o, out) in outputs.iter_mut().enumerate() {
        let row = &v[w2 + o * arch.hidden..w2 + (o + 1) * arch.hidden];
        let mut acc = v[b2 + o];
        for (w, h) in row.iter().zip(hidden.iter()) {
            acc += w * h;
        }
        *out = acc;
    }
    AnchorActivations {
        features: feat,
        hidden,
        outputs,
    }
}

fn check_shapes(
    params: &ParamVector,
    stack: &SliceStack,
    anchors: &AnchorGrid,
) -> Result<(), DetectorError> {
    if stack.width() != anchors.width
        || stack.height() != anchors.height
        || stack.depth() != params.arch.stack_depth
    {
        return Err(DetectorError::ShapeMismatch {
            got_w: stack.width(),
            got_h: stack.height(),
            got_d: stack.depth(),
            want_w: anchors.width,
            want_h: anchors.height,
            want_d: params.arch.stack_depth,
        });
    }
    Ok(())
}

/// Deterministic forward pass over every anchor.
pub fn forward(
    params: &ParamVector,
    stack: &SliceStack,
    anchors: &AnchorGrid,
) -> Result<DetectorOutput, DetectorError> {
    check_shapes(params, stack, anchors)?;
    let mut probs = Vec::with_capacity(anchors.len());
    let mut deltas = Vec::with_capacity(anchors.len());
    for anchor in &anchors.anchors {
        let act = forward_anchor(params, stack, anchor);
        probs.push(sigmoid(act.outputs[0]));
        deltas.push([
            act.outputs[1],
            act.outputs[2],
            act.outputs[3],
            act.outputs[4],
        ]);
    }
    Ok(DetectorOutput { probs, deltas })
}

/// Decode per-anchor outputs into scored boxes: drop scores below
/// `score_thresh`, then apply NMS at `nms_thresh`.
pub fn predict(
    params: &ParamVector,
    stack: &SliceStack,
    anchors: &AnchorGrid,
    score_thresh: f64,
    nms_thresh: f64,
) -> Result<Vec<Detection>, DetectorError> {
    let output = forward(params, stack, anchors)?;
    let mut dets = Vec::new();
    for (i, anchor) in anchors.anchors.iter().enumerate() {
        let score = output.probs[i];
        if score < score_thresh {
            continue;
        }
        let box2d = decode_deltas(
            anchor,
            output.deltas[i],
            anchors.width as f64,
            anchors.height as f64,
        )?;
        dets.push(Detection { box2d, score });
    }
    Ok(nms(&dets, nms_thresh))
}

// ---------------------------------------------------------------------------
// Checkpoints: one JSON header line, then flat little-endian f64 parameters.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    arch: Architecture,
    seed: u64,
    iteration: u64,
    n_params: usize,
}

const CHECKPOINT_FORMAT: &str = "minedet-checkpoint-v1";

pub fn save_checkpoint(
    path: &Path,
    params: &ParamVector,
    seed: u64,
    iteration: u64,
) -> Result<(), DetectorError> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        arch: params.arch,
        seed,
        iteration,
        n_params: params.len(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for v in &params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamVector, u64, u64), DetectorError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DetectorError::CheckpointFormat("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(DetectorError::CheckpointFormat(format!(
            "unknown format {}",
            header.format
        )));
    }
    let body = &bytes[newline + 1..];
    if body.len() != header.n_params * 8 {
        return Err(DetectorError::CheckpointFormat(format!(
            "expected {} parameter bytes, found {}",
            header.n_params * 8,
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = ParamVector::new(header.arch, values)?;
    Ok((params, header.seed, header.iteration))
}
