//! Synthetic partially-annotated volumes with oracle access to hidden labels.
//!
//! Lesions are rendered as truncated anisotropic Gaussian blobs on a noisy
//! background. A voxel belongs to a lesion when its Mahalanobis distance to
//! the lesion center is at most [`SUPPORT_CUTOFF`]; the recorded per-slice
//! boxes are the tight bounding boxes of those voxels, so they can be
//! re-derived by thresholding the rendered intensity field.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Box2D, Box3D};

/// Mahalanobis radius at which a lesion's rendered support is truncated.
pub const SUPPORT_CUTOFF: f64 = 2.0;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error(
        "failed to place lesion {lesion} of {requested} after {attempts} attempts: \
         volume {width}x{height}x{depth} too small for non-overlapping lesions of this size"
    )]
    Placement {
        lesion: usize,
        requested: usize,
        attempts: usize,
        width: usize,
        height: usize,
        depth: usize,
    },
    #[error("resize ratio {ratio} yields image {width}x{height}, below the 8 pixel minimum")]
    ResizeTooSmall {
        ratio: f64,
        width: usize,
        height: usize,
    },
    #[error("resize ratio {0} outside supported range [0.5, 2.0]")]
    RatioOutOfRange(f64),
    #[error("cannot iterate batches over an empty dataset")]
    EmptyDataset,
    #[error("voxel file {path} has {got} bytes, expected {expected}")]
    VoxelFileSize {
        path: String,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Shape and distribution parameters for synthetic volume generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    /// Inclusive range for the number of lesions per volume.
    pub lesion_count: (usize, usize),
    /// Uniform range for per-axis xy Gaussian sigma, in pixels.
    pub sigma_xy: (f64, f64),
    /// Uniform range for the z Gaussian sigma, in slices.
    pub sigma_z: (f64, f64),
    /// Uniform range for lesion peak intensity above background. The low end
    /// controls how many lesions are genuinely hard to detect.
    pub amplitude: (f64, f64),
    /// Uniform background intensity level.
    pub background_level: f64,
    /// Standard deviation of per-voxel white noise.
    pub noise_sigma: f64,
    /// Standard deviation of the smooth low-frequency background component.
    pub clutter_sigma: f64,
    /// Inclusive range for the number of unannotated distractor blobs per
    /// volume: bright but strongly elongated structures (vessel-like) that
    /// produce mid-confidence false positives.
    pub distractor_count: (usize, usize),
    /// Uniform peak-intensity range for distractors.
    pub distractor_amplitude: (f64, f64),
    /// Base seed mixed into every volume's RNG stream.
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            depth: 8,
            lesion_count: (2, 4),
            sigma_xy: (2.2, 4.2),
            sigma_z: (0.7, 1.5),
            amplitude: (0.3, 0.9),
            background_level: 0.15,
            noise_sigma: 0.04,
            clutter_sigma: 0.08,
            distractor_count: (3, 6),
            distractor_amplitude: (0.5, 0.95),
            seed: 0,
        }
    }
}

/// Distractor cross-section: as bright as lesions but thin and clearly
/// elongated, so shape rather than brightness separates the classes.
const DISTRACTOR_SHORT_SIGMA: (f64, f64) = (1.2, 1.8);
const DISTRACTOR_ASPECT: (f64, f64) = (2.2, 3.2);

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let ranges = [
            ("sigma_xy", self.sigma_xy),
            ("sigma_z", self.sigma_z),
            ("amplitude", self.amplitude),
            ("distractor_amplitude", self.distractor_amplitude),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || lo > hi {
                return Err(PhantomError::InvalidSpec(format!(
                    "{name} range ({lo}, {hi}) must be positive and non-empty"
                )));
            }
        }
        if self.lesion_count.0 > self.lesion_count.1 {
            return Err(PhantomError::InvalidSpec(format!(
                "lesion_count range {:?} is empty",
                self.lesion_count
            )));
        }
        if self.distractor_count.0 > self.distractor_count.1 {
            return Err(PhantomError::InvalidSpec(format!(
                "distractor_count range {:?} is empty",
                self.distractor_count
            )));
        }
        if self.width == 0 || self.height == 0 || self.depth == 0 {
            return Err(PhantomError::InvalidSpec(
                "volume dimensions must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Dense voxel grid, stored x-fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f32>,
    width: usize,
    height: usize,
    depth: usize,
}

impl Volume {
    pub fn zeros(width: usize, height: usize, depth: usize) -> Self {
        Self {
            data: vec![0.0; width * height * depth],
            width,
            height,
            depth,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    #[inline]
    fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.width * (y + self.height * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) {
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    pub fn voxels(&self) -> &[f32] {
        &self.data
    }

    /// Write raw little-endian f32 voxels in storage order.
    pub fn save_raw(&self, path: &Path) -> Result<(), PhantomError> {
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load_raw(
        path: &Path,
        width: usize,
        height: usize,
        depth: usize,
    ) -> Result<Self, PhantomError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let expected = width * height * depth * 4;
        if bytes.len() != expected {
            return Err(PhantomError::VoxelFileSize {
                path: path.display().to_string(),
                got: bytes.len(),
                expected,
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            data,
            width,
            height,
            depth,
        })
    }
}

/// One lesion's ground truth: tight per-slice boxes plus the enclosing 3D box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionAnnotation {
    /// (slice, tight box) pairs over consecutive slices.
    pub slices: Vec<(usize, Box2D)>,
    pub box3d: Box3D,
}

/// Visible labels plus oracle-only hidden labels for one volume.
///
/// The hidden side is reachable only through the `oracle_*` accessors; the
/// training path must never call them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    visible: Vec<LesionAnnotation>,
    hidden: Vec<LesionAnnotation>,
}

impl AnnotationSet {
    pub fn new(visible: Vec<LesionAnnotation>, hidden: Vec<LesionAnnotation>) -> Self {
        Self { visible, hidden }
    }

    pub fn visible(&self) -> &[LesionAnnotation] {
        &self.visible
    }

    /// Visible boxes on one slice.
    pub fn visible_boxes_on(&self, slice: usize) -> Vec<Box2D> {
        boxes_on(&self.visible, slice)
    }

    /// All visible (slice, box) pairs.
    pub fn visible_slice_boxes(&self) -> Vec<(usize, Box2D)> {
        self.visible
            .iter()
            .flat_map(|l| l.slices.iter().copied())
            .collect()
    }

    pub fn oracle_hidden(&self) -> &[LesionAnnotation] {
        &self.hidden
    }

    pub fn oracle_hidden_boxes_on(&self, slice: usize) -> Vec<Box2D> {
        boxes_on(&self.hidden, slice)
    }

    /// Complete 3D ground truth (visible and hidden), for evaluation only.
    pub fn oracle_gt3d(&self) -> Vec<Box3D> {
        self.visible
            .iter()
            .chain(self.hidden.iter())
            .map(|l| l.box3d)
            .collect()
    }

    pub fn n_lesions(&self) -> usize {
        self.visible.len() + self.hidden.len()
    }

    /// Drop the hidden labels entirely. Used to prove the training path is
    /// oracle-blind.
    pub fn without_hidden(&self) -> Self {
        Self {
            visible: self.visible.clone(),
            hidden: Vec::new(),
        }
    }

    /// Move every hidden lesion back into the visible set.
    pub fn with_all_visible(&self) -> Self {
        let mut visible = self.visible.clone();
        visible.extend(self.hidden.iter().cloned());
        Self {
            visible,
            hidden: Vec::new(),
        }
    }
}

fn boxes_on(lesions: &[LesionAnnotation], slice: usize) -> Vec<Box2D> {
    lesions
        .iter()
        .flat_map(|l| l.slices.iter())
        .filter(|(s, _)| *s == slice)
        .map(|(_, b)| *b)
        .collect()
}

struct LesionParams {
    center: (f64, f64, f64),
    sigma: (f64, f64, f64),
    amplitude: f64,
}

impl LesionParams {
    /// Member voxels per slice and their tight boxes. Voxel (x, y) belongs to
    /// the lesion on slice z when the Mahalanobis distance of its center
    /// (x+0.5, y+0.5, z) is at most [`SUPPORT_CUTOFF`]. Returns None when no
    /// voxel qualifies.
    fn tight_boxes(&self, spec: &PhantomSpec) -> Option<LesionAnnotation> {
        let (cx, cy, cz) = self.center;
        let (sx, sy, sz) = self.sigma;
        let z_lo = ((cz - SUPPORT_CUTOFF * sz).ceil().max(0.0)) as usize;
        let z_hi = ((cz + SUPPORT_CUTOFF * sz).floor()).min(spec.depth as f64 - 1.0);
        if z_hi < 0.0 {
            return None;
        }
        let z_hi = z_hi as usize;
        let mut slices = Vec::new();
        for z in z_lo..=z_hi {
            let dz = (z as f64 - cz) / sz;
            let rad_sq = SUPPORT_CUTOFF * SUPPORT_CUTOFF - dz * dz;
            if rad_sq <= 0.0 {
                continue;
            }
            let rad = rad_sq.sqrt();
            let mut bounds: Option<(usize, usize, usize, usize)> = None;
            let x_lo = ((cx - rad * sx - 1.0).floor().max(0.0)) as usize;
            let x_hi = ((cx + rad * sx + 1.0).ceil() as usize).min(spec.width - 1);
            let y_lo = ((cy - rad * sy - 1.0).floor().max(0.0)) as usize;
            let y_hi = ((cy + rad * sy + 1.0).ceil() as usize).min(spec.height - 1);
            for y in y_lo..=y_hi {
                let ny = (y as f64 + 0.5 - cy) / sy;
                for x in x_lo..=x_hi {
                    let nx = (x as f64 + 0.5 - cx) / sx;
                    if nx * nx + ny * ny <= rad_sq {
                        bounds = Some(match bounds {
                            None => (x, y, x, y),
                            Some((x0, y0, x1, y1)) => {
                                (x0.min(x), y0.min(y), x1.max(x), y1.max(y))
                            }
                        });
                    }
                }
            }
            if let Some((x0, y0, x1, y1)) = bounds {
                let b = Box2D::new(
                    x0 as f64,
                    y0 as f64,
                    (x1 + 1) as f64,
                    (y1 + 1) as f64,
                )
                .expect("tight box has positive extent");
                slices.push((z, b));
            }
        }
        if slices.is_empty() {
            return None;
        }
        let mut xy = slices[0].1;
        for (_, b) in &slices[1..] {
            xy = xy.union_bounds(b);
        }
        let box3d = Box3D::new(xy, slices[0].0 as i64, slices[slices.len() - 1].0 as i64)
            .expect("slice range is ordered");
        Some(LesionAnnotation { slices, box3d })
    }

    /// Additive intensity at voxel (x, y, z): `A * exp(-m^2 / 2)` inside the
    /// support cutoff, 0 outside.
    fn intensity(&self, x: usize, y: usize, z: usize) -> f64 {
        let nx = (x as f64 + 0.5 - self.center.0) / self.sigma.0;
        let ny = (y as f64 + 0.5 - self.center.1) / self.sigma.1;
        let nz = (z as f64 - self.center.2) / self.sigma.2;
        let m_sq = nx * nx + ny * ny + nz * nz;
        if m_sq > SUPPORT_CUTOFF * SUPPORT_CUTOFF {
            0.0
        } else {
            self.amplitude * (-0.5 * m_sq).exp()
        }
    }
}

/// SplitMix64 step, used to derive independent per-volume/per-purpose seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generate `n_volumes` synthetic volumes with fully visible annotations.
/// Deterministic given `(spec, seed)`.
pub fn generate_dataset(
    spec: &PhantomSpec,
    n_volumes: usize,
    seed: u64,
) -> Result<Vec<(Volume, AnnotationSet)>, PhantomError> {
    spec.validate()?;
    if n_volumes == 0 {
        return Err(PhantomError::InvalidSpec("n_volumes must be >= 1".into()));
    }
    let base = mix_seed(spec.seed, seed);
    (0..n_volumes)
        .map(|idx| generate_volume(spec, mix_seed(base, idx as u64)))
        .collect()
}

const PLACEMENT_ATTEMPTS: usize = 200;

fn generate_volume(spec: &PhantomSpec, seed: u64) -> Result<(Volume, AnnotationSet), PhantomError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_lesions = rng.gen_range(spec.lesion_count.0..=spec.lesion_count.1);

    // Place lesions first so the voxel pass only runs once.
    let mut lesions: Vec<(LesionParams, LesionAnnotation)> = Vec::with_capacity(n_lesions);
    for lesion_idx in 0..n_lesions {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let sx = rng.gen_range(spec.sigma_xy.0..=spec.sigma_xy.1);
            let sy = rng.gen_range(spec.sigma_xy.0..=spec.sigma_xy.1);
            let sz = rng.gen_range(spec.sigma_z.0..=spec.sigma_z.1);
            let margin_x = SUPPORT_CUTOFF * sx + 1.0;
            let margin_y = SUPPORT_CUTOFF * sy + 1.0;
            if 2.0 * margin_x >= spec.width as f64 || 2.0 * margin_y >= spec.height as f64 {
                continue;
            }
            let params = LesionParams {
                center: (
                    rng.gen_range(margin_x..spec.width as f64 - margin_x),
                    rng.gen_range(margin_y..spec.height as f64 - margin_y),
                    rng.gen_range(0.0..spec.depth as f64 - 1.0),
                ),
                sigma: (sx, sy, sz),
                amplitude: rng.gen_range(spec.amplitude.0..=spec.amplitude.1),
            };
            let Some(ann) = params.tight_boxes(spec) else {
                continue;
            };
            // Keep lesions spatially disjoint so box oracles stay unambiguous.
            let overlaps = lesions.iter().any(|(_, other)| {
                ann.box3d.z_overlaps(&other.box3d)
                    && ann.box3d.xy().intersection_area(other.box3d.xy()) > 0.0
            });
            if overlaps {
                continue;
            }
            lesions.push((params, ann));
            placed = true;
            break;
        }
        if !placed {
            return Err(PhantomError::Placement {
                lesion: lesion_idx,
                requested: n_lesions,
                attempts: PLACEMENT_ATTEMPTS,
                width: spec.width,
                height: spec.height,
                depth: spec.depth,
            });
        }
    }

    // Distractors: lesion-shaped blobs kept clear of the true lesions but
    // free to crowd each other. A failed placement is simply skipped.
    let n_distractors = rng.gen_range(spec.distractor_count.0..=spec.distractor_count.1);
    let mut distractors: Vec<LesionParams> = Vec::with_capacity(n_distractors);
    for _ in 0..n_distractors {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let short = rng.gen_range(DISTRACTOR_SHORT_SIGMA.0..=DISTRACTOR_SHORT_SIGMA.1);
            let long = short * rng.gen_range(DISTRACTOR_ASPECT.0..=DISTRACTOR_ASPECT.1);
            let (sx, sy) = if rng.gen_bool(0.5) {
                (long, short)
            } else {
                (short, long)
            };
            let sz = rng.gen_range(spec.sigma_z.0..=spec.sigma_z.1);
            let margin_x = SUPPORT_CUTOFF * sx + 1.0;
            let margin_y = SUPPORT_CUTOFF * sy + 1.0;
            if 2.0 * margin_x >= spec.width as f64 || 2.0 * margin_y >= spec.height as f64 {
                continue;
            }
            let params = LesionParams {
                center: (
                    rng.gen_range(margin_x..spec.width as f64 - margin_x),
                    rng.gen_range(margin_y..spec.height as f64 - margin_y),
                    rng.gen_range(0.0..spec.depth as f64 - 1.0),
                ),
                sigma: (sx, sy, sz),
                amplitude: rng.gen_range(spec.distractor_amplitude.0..=spec.distractor_amplitude.1),
            };
            let Some(support) = params.tight_boxes(spec) else {
                continue;
            };
            let overlaps_lesion = lesions.iter().any(|(_, ann)| {
                support.box3d.z_overlaps(&ann.box3d)
                    && support.box3d.xy().intersection_area(ann.box3d.xy()) > 0.0
            });
            if overlaps_lesion {
                continue;
            }
            distractors.push(params);
            break;
        }
    }

    // Smooth clutter: coarse Gaussian grid, trilinearly upsampled.
    let clutter = ClutterField::sample(spec, &mut rng);

    let mut volume = Volume::zeros(spec.width, spec.height, spec.depth);
    for z in 0..spec.depth {
        for y in 0..spec.height {
            for x in 0..spec.width {
                let mut v = spec.background_level
                    + spec.noise_sigma * sample_standard_normal(&mut rng)
                    + clutter.at(x, y, z);
                for (params, _) in &lesions {
                    v += params.intensity(x, y, z);
                }
                for params in &distractors {
                    v += params.intensity(x, y, z);
                }
                volume.set(x, y, z, v.clamp(0.0, 1.0) as f32);
            }
        }
    }

    let annotations =
        AnnotationSet::new(lesions.into_iter().map(|(_, ann)| ann).collect(), Vec::new());
    Ok((volume, annotations))
}

/// Box-Muller transform; two uniform draws per normal sample keeps the
/// stream layout independent of the rand version's StandardNormal internals.
fn sample_standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

const CLUTTER_SPACING_XY: usize = 8;
const CLUTTER_SPACING_Z: usize = 2;

struct ClutterField {
    grid: Vec<f64>,
    nx: usize,
    ny: usize,
    nz: usize,
}

impl ClutterField {
    fn sample<R: Rng>(spec: &PhantomSpec, rng: &mut R) -> Self {
        let nx = spec.width / CLUTTER_SPACING_XY + 2;
        let ny = spec.height / CLUTTER_SPACING_XY + 2;
        let nz = spec.depth / CLUTTER_SPACING_Z + 2;
        let grid = (0..nx * ny * nz)
            .map(|_| spec.clutter_sigma * sample_standard_normal(rng))
            .collect();
        Self { grid, nx, ny, nz }
    }

    fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        let fx = x as f64 / CLUTTER_SPACING_XY as f64;
        let fy = y as f64 / CLUTTER_SPACING_XY as f64;
        let fz = z as f64 / CLUTTER_SPACING_Z as f64;
        let (ix, tx) = (fx as usize, fx.fract());
        let (iy, ty) = (fy as usize, fy.fract());
        let (iz, tz) = (fz as usize, fz.fract());
        let mut acc = 0.0;
        for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
            for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                    let idx = (ix + dx).min(self.nx - 1)
                        + self.nx * ((iy + dy).min(self.ny - 1) + self.ny * (iz + dz).min(self.nz - 1));
                    acc += wx * wy * wz * self.grid[idx];
                }
            }
        }
        acc
    }
}

/// Move `floor(hide_rate * n_visible)` uniformly chosen lesions (all their
/// per-slice boxes together) from visible to hidden.
pub fn hide_annotations(ann: &AnnotationSet, hide_rate: f64, seed: u64) -> AnnotationSet {
    assert!(
        (0.0..1.0).contains(&hide_rate),
        "hide_rate must be in [0, 1)"
    );
    let n_hide = (hide_rate * ann.visible.len() as f64).floor() as usize;
    if n_hide == 0 {
        return ann.clone();
    }
    let mut indices: Vec<usize> = (0..ann.visible.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let chosen: Vec<bool> = {
        let mut mask = vec![false; ann.visible.len()];
        for &i in indices.iter().take(n_hide) {
            mask[i] = true;
        }
        mask
    };
    let mut visible = Vec::new();
    let mut hidden = ann.hidden.clone();
    for (i, lesion) in ann.visible.iter().enumerate() {
        if chosen[i] {
            hidden.push(lesion.clone());
        } else {
            visible.push(lesion.clone());
        }
    }
    AnnotationSet { visible, hidden }
}

/// A stack of consecutive slices: the detector's input. Stored slice-major,
/// then y, then x.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    data: Vec<f32>,
    width: usize,
    height: usize,
    /// Number of context slices (not the volume depth).
    depth: usize,
}

impl SliceStack {
    pub fn new(data: Vec<f32>, width: usize, height: usize, depth: usize) -> Self {
        assert_eq!(data.len(), width * height * depth);
        Self {
            data,
            width,
            height,
            depth,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, s: usize) -> f32 {
        self.data[x + self.width * (y + self.height * s)]
    }

    /// Bilinear sample of slice `s` at continuous pixel coordinates, with
    /// border clamping. The pixel (x, y) is centered at (x+0.5, y+0.5).
    pub fn sample_bilinear(&self, x: f64, y: f64, s: usize) -> f64 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (ix, tx) = (fx as usize, fx.fract());
        let (iy, ty) = (fy as usize, fy.fract());
        let ix1 = (ix + 1).min(self.width - 1);
        let iy1 = (iy + 1).min(self.height - 1);
        let v00 = self.at(ix, iy, s) as f64;
        let v10 = self.at(ix1, iy, s) as f64;
        let v01 = self.at(ix, iy1, s) as f64;
        let v11 = self.at(ix1, iy1, s) as f64;
        v00 * (1.0 - tx) * (1.0 - ty) + v10 * tx * (1.0 - ty) + v01 * (1.0 - tx) * ty
            + v11 * tx * ty
    }

    /// Extract a `depth`-slice stack centered on `center_slice`, replicating
    /// border slices.
    pub fn from_volume(volume: &Volume, center_slice: usize, depth: usize) -> Self {
        assert!(depth % 2 == 1, "stack depth must be odd");
        let half = depth / 2;
        let mut data = Vec::with_capacity(volume.width() * volume.height() * depth);
        for offset in 0..depth {
            let z = (center_slice + offset)
                .saturating_sub(half)
                .min(volume.depth() - 1);
            for y in 0..volume.height() {
                for x in 0..volume.width() {
                    data.push(volume.at(x, y, z));
                }
            }
        }
        Self::new(data, volume.width(), volume.height(), depth)
    }
}

/// Bilinear resize of every slice by `ratio`, scaling box coordinates by the
/// same ratio.
pub fn resize_augment(
    stack: &SliceStack,
    boxes: &[Box2D],
    ratio: f64,
) -> Result<(SliceStack, Vec<Box2D>), PhantomError> {
    if !(0.5..=2.0).contains(&ratio) {
        return Err(PhantomError::RatioOutOfRange(ratio));
    }
    let out_w = (stack.width as f64 * ratio).round() as usize;
    let out_h = (stack.height as f64 * ratio).round() as usize;
    if out_w < 8 || out_h < 8 {
        return Err(PhantomError::ResizeTooSmall {
            ratio,
            width: out_w,
            height: out_h,
        });
    }
    let scaled_boxes: Vec<Box2D> = boxes.iter().map(|b| b.scaled(ratio)).collect();
    if ratio == 1.0 {
        return Ok((stack.clone(), scaled_boxes));
    }
    let mut data = Vec::with_capacity(out_w * out_h * stack.depth);
    let sx = stack.width as f64 / out_w as f64;
    let sy = stack.height as f64 / out_h as f64;
    for s in 0..stack.depth {
        for oy in 0..out_h {
            let y = (oy as f64 + 0.5) * sy;
            for ox in 0..out_w {
                let x = (ox as f64 + 0.5) * sx;
                data.push(stack.sample_bilinear(x, y, s) as f32);
            }
        }
    }
    Ok((SliceStack::new(data, out_w, out_h, stack.depth), scaled_boxes))
}

/// A training volume: voxels, partial annotations, and any hard-negative
/// boxes attached for retraining.
#[derive(Debug, Clone)]
pub struct TrainVolume {
    pub volume: Volume,
    pub annotations: AnnotationSet,
    pub hard_negatives: Vec<(usize, Box2D)>,
}

impl TrainVolume {
    pub fn new(volume: Volume, annotations: AnnotationSet) -> Self {
        Self {
            volume,
            annotations,
            hard_negatives: Vec::new(),
        }
    }
}

/// One training sample: a slice stack centered on `slice` with the visible
/// boxes of that slice. Hidden boxes travel along but are only reachable via
/// the oracle accessor.
#[derive(Debug, Clone)]
pub struct Sample {
    pub volume_idx: usize,
    pub slice: usize,
    pub stack: SliceStack,
    pub visible_boxes: Vec<Box2D>,
    pub hard_negative_boxes: Vec<Box2D>,
    oracle_hidden: Vec<Box2D>,
}

impl Sample {
    /// Oracle-only access to the hidden boxes of this sample's center slice.
    /// Never called by the training path.
    pub fn oracle_hidden_boxes(&self) -> &[Box2D] {
        &self.oracle_hidden
    }
}

/// Seeded epoch-shuffled batch iterator over all slice stacks of a volume
/// set. Each epoch covers every (volume, slice) pair exactly once.
pub struct BatchIter<'a> {
    volumes: &'a [TrainVolume],
    order: Vec<(usize, usize)>,
    batch_size: usize,
    stack_depth: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
}

impl<'a> BatchIter<'a> {
    pub fn new(
        volumes: &'a [TrainVolume],
        batch_size: usize,
        stack_depth: usize,
        seed: u64,
    ) -> Result<Self, PhantomError> {
        assert!(batch_size >= 1, "batch_size must be >= 1");
        let mut order = Vec::new();
        for (vi, tv) in volumes.iter().enumerate() {
            for slice in 0..tv.volume.depth() {
                order.push((vi, slice));
            }
        }
        if order.is_empty() {
            return Err(PhantomError::EmptyDataset);
        }
        let mut iter = Self {
            volumes,
            order,
            batch_size,
            stack_depth,
            seed,
            epoch: 0,
            cursor: 0,
        };
        iter.shuffle_epoch();
        Ok(iter)
    }

    /// Number of batches in one epoch.
    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn samples_per_epoch(&self) -> usize {
        self.order.len()
    }

    fn shuffle_epoch(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, self.epoch));
        // Re-sort first so the shuffle is a pure function of (seed, epoch).
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    fn materialize(&self, volume_idx: usize, slice: usize) -> Sample {
        let tv = &self.volumes[volume_idx];
        let stack = SliceStack::from_volume(&tv.volume, slice, self.stack_depth);
        let hard_negative_boxes = tv
            .hard_negatives
            .iter()
            .filter(|(s, _)| *s == slice)
            .map(|(_, b)| *b)
            .collect();
        Sample {
            volume_idx,
            slice,
            stack,
            visible_boxes: tv.annotations.visible_boxes_on(slice),
            hard_negative_boxes,
            oracle_hidden: tv.annotations.oracle_hidden_boxes_on(slice),
        }
    }

    /// Produce the next batch, rolling into a fresh shuffled epoch when the
    /// current one is exhausted. Batches never span epoch boundaries.
    pub fn next_batch(&mut self) -> Vec<Sample> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.shuffle_epoch();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end]
            .iter()
            .map(|&(vi, slice)| self.materialize(vi, slice))
            .collect();
        self.cursor = end;
        batch
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

/// Deterministic dataset splits for one experiment seed.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Partially annotated training volumes.
    pub train: Vec<TrainVolume>,
    /// Fully annotated training volumes (hard-negative source).
    pub train_full: Vec<TrainVolume>,
    /// Fully annotated validation volumes.
    pub val: Vec<(Volume, AnnotationSet)>,
    /// Fully annotated test volumes.
    pub test: Vec<(Volume, AnnotationSet)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub train_full: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 60,
            train_full: 10,
            val: 10,
            test: 30,
        }
    }
}

impl Dataset {
    /// Generate all four splits. Hiding applies to the `train` split only.
    pub fn generate(
        spec: &PhantomSpec,
        counts: &SplitCounts,
        hide_rate: f64,
        seed: u64,
    ) -> Result<Self, PhantomError> {
        let total = counts.train + counts.train_full + counts.val + counts.test;
        let mut all = generate_dataset(spec, total, seed)?;
        let mut take = |n: usize| -> Vec<(Volume, AnnotationSet)> {
            all.drain(..n).collect()
        };
        let train = take(counts.train)
            .into_iter()
            .enumerate()
            .map(|(i, (vol, ann))| {
                let hidden = hide_annotations(&ann, hide_rate, mix_seed(seed, 0x51de ^ i as u64));
                TrainVolume::new(vol, hidden)
            })
            .collect();
        let train_full = take(counts.train_full)
            .into_iter()
            .map(|(vol, ann)| TrainVolume::new(vol, ann))
            .collect();
        let val = take(counts.val);
        let test = take(counts.test);
        Ok(Self {
            train,
            train_full,
            val,
            test,
        })
    }

    /// Training volumes for the retraining stage: partial volumes plus the
    /// fully annotated subset (with whatever hard negatives are attached).
    pub fn retrain_volumes(&self) -> Vec<TrainVolume> {
        let mut v = self.train.clone();
        v.extend(self.train_full.iter().cloned());
        v
    }
}

// ---------------------------------------------------------------------------
// Persistence: manifest + raw voxel files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct VolumeRecord {
    file: String,
    width: usize,
    height: usize,
    depth: usize,
    annotations: AnnotationSet,
    #[serde(default)]
    hard_negatives: Vec<(usize, Box2D)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    spec: PhantomSpec,
    seed: u64,
    hide_rate: f64,
    train: Vec<VolumeRecord>,
    train_full: Vec<VolumeRecord>,
    val: Vec<VolumeRecord>,
    test: Vec<VolumeRecord>,
}

/// Write the dataset as a JSON manifest plus one raw little-endian f32 voxel
/// file per volume. Round trips bit-exactly.
pub fn save_dataset(
    dataset: &Dataset,
    spec: &PhantomSpec,
    seed: u64,
    hide_rate: f64,
    dir: &Path,
) -> Result<(), PhantomError> {
    fs::create_dir_all(dir)?;
    let mut save_split = |name: &str,
                          vols: &[(&Volume, &AnnotationSet, &[(usize, Box2D)])]|
     -> Result<Vec<VolumeRecord>, PhantomError> {
        vols.iter()
            .enumerate()
            .map(|(i, (vol, ann, hn))| {
                let file = format!("{name}_{i:03}.f32");
                vol.save_raw(&dir.join(&file))?;
                Ok(VolumeRecord {
                    file,
                    width: vol.width(),
                    height: vol.height(),
                    depth: vol.depth(),
                    annotations: (*ann).clone(),
                    hard_negatives: hn.to_vec(),
                })
            })
            .collect()
    };
    let train: Vec<_> = dataset
        .train
        .iter()
        .map(|tv| (&tv.volume, &tv.annotations, tv.hard_negatives.as_slice()))
        .collect();
    let train_full: Vec<_> = dataset
        .train_full
        .iter()
        .map(|tv| (&tv.volume, &tv.annotations, tv.hard_negatives.as_slice()))
        .collect();
    let empty: &[(usize, Box2D)] = &[];
    let val: Vec<_> = dataset
        .val
        .iter()
        .map(|(v, a)| (v, a, empty))
        .collect();
    let test: Vec<_> = dataset
        .test
        .iter()
        .map(|(v, a)| (v, a, empty))
        .collect();
    let manifest = Manifest {
        spec: spec.clone(),
        seed,
        hide_rate,
        train: save_split("train", &train)?,
        train_full: save_split("train_full", &train_full)?,
        val: save_split("val", &val)?,
        test: save_split("test", &test)?,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load a dataset saved by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Dataset, PhantomSpec, u64, f64), PhantomError> {
    let json = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&json)?;
    let load_split = |records: &[VolumeRecord]| -> Result<Vec<TrainVolume>, PhantomError> {
        records
            .iter()
            .map(|r| {
                let volume = Volume::load_raw(&dir.join(&r.file), r.width, r.height, r.depth)?;
                Ok(TrainVolume {
                    volume,
                    annotations: r.annotations.clone(),
                    hard_negatives: r.hard_negatives.clone(),
                })
            })
            .collect()
    };
    let pairs = |records: &[VolumeRecord]| -> Result<Vec<(Volume, AnnotationSet)>, PhantomError> {
        records
            .iter()
            .map(|r| {
                let volume = Volume::load_raw(&dir.join(&r.file), r.width, r.height, r.depth)?;
                Ok((volume, r.annotations.clone()))
            })
            .collect()
    };
    let dataset = Dataset {
        train: load_split(&manifest.train)?,
        train_full: load_split(&manifest.train_full)?,
        val: pairs(&manifest.val)?,
        test: pairs(&manifest.test)?,
    };
    Ok((dataset, manifest.spec, manifest.seed, manifest.hide_rate))
}
