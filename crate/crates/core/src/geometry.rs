//! Cube boxes, overlap, non-maximum suppression, window tiling, anchors and
//! training-sample labelling.

use std::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("axis {axis} has {dim} voxels, smaller than the {window}-voxel window")]
    WindowTooLarge { axis: usize, dim: usize, window: usize },
    #[error("overlap {min_overlap} must be smaller than window {window}")]
    Overlap { window: usize, min_overlap: usize },
    #[error("invalid anchor set: {0}")]
    Anchors(String),
}

/// Coordinate frame of a box center and side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Frame {
    #[default]
    Voxel,
    World,
}

/// Axis-aligned cube `[x, y, z, d]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3 {
    pub center: [f64; 3],
    pub side: f64,
    pub frame: Frame,
}

impl Box3 {
    pub fn new(center: [f64; 3], side: f64) -> Self {
        debug_assert!(side > 0.0, "cube side must be positive");
        Self { center, side, frame: Frame::Voxel }
    }

    pub fn world(center: [f64; 3], side: f64) -> Self {
        Self { frame: Frame::World, ..Self::new(center, side) }
    }

    pub fn volume(&self) -> f64 {
        self.side.powi(3)
    }

    pub fn min_corner(&self) -> [f64; 3] {
        self.center.map(|c| c - 0.5 * self.side)
    }

    pub fn max_corner(&self) -> [f64; 3] {
        self.center.map(|c| c + 0.5 * self.side)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBox {
    pub bbox: Box3,
    pub score: f64,
    pub scan_id: String,
}

/// Intersection-over-union of two cubes in the same frame.
pub fn iou3(a: &Box3, b: &Box3) -> f64 {
    debug_assert_eq!(a.frame, b.frame, "iou3 across frames");
    let (amin, amax) = (a.min_corner(), a.max_corner());
    let (bmin, bmax) = (b.min_corner(), b.max_corner());
    let mut inter = 1.0;
    for k in 0..3 {
        let overlap = amax[k].min(bmax[k]) - amin[k].max(bmin[k]);
        if overlap <= 0.0 {
            return 0.0;
        }
        inter *= overlap;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Descending score; equal scores resolved by the lower `(z, y, x)` center.
pub fn score_order(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| {
        let key = |s: &ScoredBox| [s.bbox.center[2], s.bbox.center[1], s.bbox.center[0]];
        let (ka, kb) = (key(a), key(b));
        ka.iter().zip(kb.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
    })
}

/// Greedy non-maximum suppression. A box is dropped when its IoU with an
/// already kept box exceeds `iou_threshold`.
pub fn nms(candidates: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    nms_indices(candidates, iou_threshold).into_iter().map(|i| candidates[i].clone()).collect()
}

/// Like [`nms`] but returns indices into `candidates`, best first.
pub fn nms_indices(candidates: &[ScoredBox], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| score_order(&candidates[i], &candidates[j]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let b = &candidates[i].bbox;
        if kept.iter().all(|&k| iou3(&candidates[k].bbox, b) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleLabel {
    Positive,
    Negative,
    Ignored,
}

pub const NEGATIVE_IOU: f64 = 0.02;
pub const POSITIVE_IOU: f64 = 0.4;

/// Labels each box by its best IoU against the ground truth: below 0.02 is
/// negative, above 0.4 positive, anything in between ignored.
pub fn assign_samples(boxes: &[Box3], ground_truth: &[Box3]) -> Vec<SampleLabel> {
    boxes
        .iter()
        .map(|b| {
            let best = ground_truth.iter().map(|g| iou3(b, g)).fold(0.0, f64::max);
            if best < NEGATIVE_IOU {
                SampleLabel::Negative
            } else if best > POSITIVE_IOU {
                SampleLabel::Positive
            } else {
                SampleLabel::Ignored
            }
        })
        .collect()
}

/// Sliding-window layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tiling {
    pub window: usize,
    pub min_overlap: usize,
    /// Axes shorter than the window get a single (padded) window at 0
    /// instead of an error.
    pub pad: bool,
}

impl Default for Tiling {
    fn default() -> Self {
        Self { window: 96, min_overlap: 32, pad: false }
    }
}

fn axis_origins(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    if dim <= window {
        return vec![0];
    }
    let mut origins: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o + window < dim).collect();
    origins.push(dim - window);
    origins.dedup();
    origins
}

/// Window origins covering every voxel of `dims`, z outermost.
pub fn tile_volume(dims: [usize; 3], tiling: Tiling) -> Result<Vec<[usize; 3]>, GeometryError> {
    let Tiling { window, min_overlap, pad } = tiling;
    if min_overlap >= window {
        return Err(GeometryError::Overlap { window, min_overlap });
    }
    for (axis, &dim) in dims.iter().enumerate() {
        if dim < window && !pad {
            return Err(GeometryError::WindowTooLarge { axis, dim, window });
        }
    }
    let stride = window - min_overlap;
    let per_axis: Vec<Vec<usize>> = dims.iter().map(|&d| axis_origins(d, window, stride)).collect();
    let mut out = Vec::with_capacity(per_axis.iter().map(Vec::len).product());
    for &z in &per_axis[2] {
        for &y in &per_axis[1] {
            for &x in &per_axis[0] {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    sides: Vec<f64>,
}

impl AnchorSet {
    pub fn new(sides: Vec<f64>) -> Result<Self, GeometryError> {
        if sides.is_empty() {
            return Err(GeometryError::Anchors("empty".into()));
        }
        if sides.iter().any(|&s| !(s > 0.0)) {
            return Err(GeometryError::Anchors(format!("non-positive side in {sides:?}")));
        }
        if sides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GeometryError::Anchors(format!("not strictly increasing: {sides:?}")));
        }
        Ok(Self { sides })
    }

    pub fn sides(&self) -> &[f64] {
        &self.sides
    }
}

impl Default for AnchorSet {
    fn default() -> Self {
        Self { sides: vec![3.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0] }
    }
}

/// One anchor per side at every feature-grid cell; cell `i` is centered at
/// `(i + 0.5) * stride`.
pub fn generate_anchors(anchors: &AnchorSet, feature_stride: usize, dims: [usize; 3]) -> Vec<Box3> {
    assert!(feature_stride >= 1, "feature stride must be at least 1");
    let cells = dims.map(|d| d.div_ceil(feature_stride));
    let s = feature_stride as f64;
    let mut out = Vec::with_capacity(cells.iter().product::<usize>() * anchors.sides.len());
    for z in 0..cells[2] {
        for y in 0..cells[1] {
            for x in 0..cells[0] {
                let center = [x, y, z].map(|i| (i as f64 + 0.5) * s);
                out.extend(anchors.sides.iter().map(|&side| Box3::new(center, side)));
            }
        }
    }
    out
}
