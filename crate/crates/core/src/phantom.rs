//! Synthetic CT scans with planted objects and exact ground truth.
//!
//! Two object families are rendered slice by slice. Nodules are round
//! blobs whose in-plane radius changes linearly with distance from their
//! center slice: a *shrinking* nodule is widest at its center, an
//! *expanding* one narrowest there. Tissues are tubes of constant radius
//! whose in-plane center drifts along a straight oblique path. On a single
//! slice both look like bright disks.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidates::{GroundTruthNodule, NoduleCandidate};
use crate::geometry::Box3;
use crate::hs2::{Label, LabeledImage};
use crate::lhi::{lhi_for_candidate, LhiError, LhiParams};
use crate::volume_io::{CtVolume, VolumeError, VolumeGeometry};

pub const MIN_NODULE_DIAMETER_MM: f64 = 3.0;
pub const MAX_NODULE_DIAMETER_MM: f64 = 30.0;
/// Half height, in slices, of an expanding nodule.
pub const EXPANDING_HALF_SLICES: f64 = 6.0;
/// Smallest in-plane radius (voxels) drawn for an expanding nodule.
pub const EXPANDING_MIN_RADIUS: f64 = 1.0;
const HU_RANGE: (f64, f64) = (-1024.0, 3071.0);

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("object {index}: {message}")]
    Spec { index: usize, message: String },
    #[error("need at least one nodule and one tissue object")]
    MissingClass,
    #[error("could not place {0} objects without overlap")]
    Placement(usize),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Lhi(#[from] LhiError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Growth {
    Expanding,
    Shrinking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PhantomObject {
    Sphere {
        center: [f64; 3],
        max_diameter_mm: f64,
        growth: Growth,
        intensity_hu: f64,
    },
    Tube {
        start: [f64; 3],
        direction: [f64; 3],
        radius_mm: f64,
        /// Path length along `direction`.
        length_mm: f64,
        intensity_hu: f64,
    },
}

fn default_spacing() -> [f64; 3] {
    [1.0; 3]
}
fn default_background() -> f64 {
    -900.0
}
fn default_noise() -> f64 {
    20.0
}
fn default_rate() -> f64 {
    0.8
}
fn default_scan_id() -> String {
    "phantom".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    #[serde(default = "default_scan_id")]
    pub scan_id: String,
    pub dims: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing: [f64; 3],
    #[serde(default)]
    pub origin: [f64; 3],
    #[serde(default = "default_background")]
    pub background_hu: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma_hu: f64,
    /// Nodule radius change, in-plane voxels per slice.
    #[serde(default = "default_rate")]
    pub sphere_radius_rate: f64,
    #[serde(default)]
    pub objects: Vec<PhantomObject>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: CtVolume,
    pub nodules: Vec<GroundTruthNodule>,
    /// World-frame cubes around each tube, side = equal-volume sphere diameter.
    pub tissues: Vec<Box3>,
}

fn in_volume(g: &VolumeGeometry, p: [f64; 3]) -> bool {
    g.contains_voxel(g.world_to_voxel(p))
}

fn tube_end(start: [f64; 3], direction: [f64; 3], length: f64) -> [f64; 3] {
    let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
    std::array::from_fn(|a| start[a] + direction[a] / norm * length)
}

fn tube_equivalent_diameter(start: [f64; 3], end: [f64; 3], radius_mm: f64) -> f64 {
    let z_extent = (end[2] - start[2]).abs();
    (6.0 * PI * radius_mm * radius_mm * z_extent / PI).cbrt()
}

impl PhantomSpec {
    pub fn geometry(&self) -> Result<VolumeGeometry, VolumeError> {
        VolumeGeometry::new(self.dims, self.spacing, self.origin)
    }

    pub fn validate(&self) -> Result<VolumeGeometry, PhantomError> {
        let g = self.geometry()?;
        let err = |index, message: String| PhantomError::Spec { index, message };
        for (i, o) in self.objects.iter().enumerate() {
            match *o {
                PhantomObject::Sphere { center, max_diameter_mm, intensity_hu, .. } => {
                    if !in_volume(&g, center) {
                        return Err(err(i, format!("sphere center {center:?} outside the volume")));
                    }
                    if !(MIN_NODULE_DIAMETER_MM..=MAX_NODULE_DIAMETER_MM).contains(&max_diameter_mm) {
                        return Err(err(i, format!("diameter {max_diameter_mm} mm outside [3, 30]")));
                    }
                    if !intensity_hu.is_finite() {
                        return Err(err(i, "non-finite intensity".into()));
                    }
                }
                PhantomObject::Tube { start, direction, radius_mm, length_mm, intensity_hu } => {
                    let inplane = direction[0].hypot(direction[1]);
                    if direction[2] == 0.0 || inplane == 0.0 || !direction.iter().all(|d| d.is_finite()) {
                        return Err(err(i, format!("tube direction {direction:?} must be oblique to z")));
                    }
                    if !(radius_mm > 0.0) || !(length_mm > 0.0) || !intensity_hu.is_finite() {
                        return Err(err(i, "tube radius and length must be positive".into()));
                    }
                    let end = tube_end(start, direction, length_mm);
                    if !in_volume(&g, start) || !in_volume(&g, end) {
                        return Err(err(i, format!("tube {start:?} -> {end:?} leaves the volume")));
                    }
                }
            }
        }
        Ok(g)
    }
}

fn paint_disk(slice: &mut [f64], nx: usize, ny: usize, cx: f64, cy: f64, r: f64, value: f64) {
    if r <= 0.0 {
        return;
    }
    let r2 = r * r;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil().max(0.0) as usize).min(ny.saturating_sub(1));
    let x0 = (cx - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil().max(0.0) as usize).min(nx.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r2 {
                slice[x + nx * y] = value;
            }
        }
    }
}

/// In-plane radius (voxels) of a nodule `dz` slices from its center, or
/// `None` outside its extent.
pub fn nodule_radius(growth: Growth, max_radius_vox: f64, rate: f64, dz: f64) -> Option<f64> {
    let adz = dz.abs();
    match growth {
        Growth::Shrinking => {
            let r = max_radius_vox - rate * adz;
            (r > 0.0).then_some(r)
        }
        Growth::Expanding => (adz <= EXPANDING_HALF_SLICES)
            .then(|| (max_radius_vox - rate * (EXPANDING_HALF_SLICES - adz)).max(EXPANDING_MIN_RADIUS)),
    }
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    let g = spec.validate()?;
    let [nx, ny, nz] = g.dims;
    let inplane = g.inplane_spacing();
    let background = spec.background_hu.round();
    let mut field = vec![background; g.voxel_count()];
    let mut nodules = Vec::new();
    let mut tissues = Vec::new();

    for o in &spec.objects {
        match *o {
            PhantomObject::Sphere { center, max_diameter_mm, growth, intensity_hu } => {
                let c = g.world_to_voxel(center);
                let r_max = 0.5 * max_diameter_mm / inplane;
                for z in 0..nz {
                    if let Some(r) = nodule_radius(growth, r_max, spec.sphere_radius_rate, z as f64 - c[2]) {
                        let slice = &mut field[z * nx * ny..(z + 1) * nx * ny];
                        paint_disk(slice, nx, ny, c[0], c[1], r, intensity_hu.round());
                    }
                }
                nodules.push(GroundTruthNodule {
                    scan_id: spec.scan_id.clone(),
                    center_mm: center,
                    diameter_mm: max_diameter_mm,
                });
            }
            PhantomObject::Tube { start, direction, radius_mm, length_mm, intensity_hu } => {
                let end = tube_end(start, direction, length_mm);
                let (a, b) = (g.world_to_voxel(start), g.world_to_voxel(end));
                let r = radius_mm / inplane;
                let (zlo, zhi) = (a[2].min(b[2]), a[2].max(b[2]));
                for z in 0..nz {
                    let zf = z as f64;
                    if zf < zlo || zf > zhi {
                        continue;
                    }
                    let t = (zf - a[2]) / (b[2] - a[2]);
                    let slice = &mut field[z * nx * ny..(z + 1) * nx * ny];
                    paint_disk(
                        slice,
                        nx,
                        ny,
                        a[0] + t * (b[0] - a[0]),
                        a[1] + t * (b[1] - a[1]),
                        r,
                        intensity_hu.round(),
                    );
                }
                let mid = std::array::from_fn(|k| 0.5 * (start[k] + end[k]));
                tissues.push(Box3::world(mid, tube_equivalent_diameter(start, end, radius_mm)));
            }
        }
    }

    let voxels: Vec<i16> = if spec.noise_sigma_hu > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let noise = Normal::new(0.0, spec.noise_sigma_hu)
            .map_err(|e| PhantomError::Spec { index: 0, message: format!("noise: {e}") })?;
        field.iter().map(|&v| (v + noise.sample(&mut rng)).round().clamp(HU_RANGE.0, HU_RANGE.1) as i16).collect()
    } else {
        field.iter().map(|&v| v.clamp(HU_RANGE.0, HU_RANGE.1) as i16).collect()
    };
    Ok(Phantom { volume: CtVolume::new(g, voxels)?, nodules, tissues })
}

/// Knobs for drawing random phantom layouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomLayout {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub nodules: usize,
    pub tubes: usize,
    pub nodule_diameter_mm: (f64, f64),
    pub tube_radius_mm: (f64, f64),
    /// Tube extent along z, in slices.
    pub tube_slices: (f64, f64),
    /// In-plane drift of tube centers, voxels per slice.
    pub tube_drift: f64,
    pub intensity_hu: (f64, f64),
    pub background_hu: f64,
    /// Small enough that slice-to-slice noise differences stay below the
    /// default LHI change threshold.
    pub noise_sigma_hu: f64,
    /// Minimum gap between object bounding boxes, voxels.
    pub gap: f64,
}

impl Default for RandomLayout {
    fn default() -> Self {
        Self {
            dims: [96, 96, 64],
            spacing_mm: 1.0,
            nodules: 3,
            tubes: 5,
            nodule_diameter_mm: (5.0, 14.0),
            tube_radius_mm: (1.5, 3.5),
            tube_slices: (18.0, 30.0),
            tube_drift: 1.5,
            intensity_hu: (20.0, 120.0),
            background_hu: -900.0,
            noise_sigma_hu: 5.0,
            gap: 4.0,
        }
    }
}

type Aabb = ([f64; 3], [f64; 3]);

fn separated(a: &Aabb, b: &Aabb, gap: f64) -> bool {
    (0..3).any(|k| a.0[k] > b.1[k] + gap || b.0[k] > a.1[k] + gap)
}

/// Draws a random layout whose object bounding boxes keep at least
/// `layout.gap` voxels apart.
pub fn random_spec(layout: &RandomLayout, scan_id: &str, seed: u64) -> Result<PhantomSpec, PhantomError> {
    const RATE: f64 = 0.8;
    const MARGIN: f64 = 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = layout.spacing_mm;
    let dims = layout.dims.map(|d| d as f64);
    let mut boxes: Vec<Aabb> = Vec::new();
    let mut objects = Vec::new();

    let mut kinds: Vec<bool> =
        std::iter::repeat_n(true, layout.nodules).chain(std::iter::repeat_n(false, layout.tubes)).collect();
    kinds.shuffle(&mut rng);

    for is_nodule in kinds {
        let mut placed = false;
        for _ in 0..500 {
            let (object, bbox) = if is_nodule {
                let d = rng.random_range(layout.nodule_diameter_mm.0..=layout.nodule_diameter_mm.1);
                let growth = if rng.random_bool(0.5) { Growth::Expanding } else { Growth::Shrinking };
                let r = 0.5 * d / s;
                let half_z = match growth {
                    Growth::Shrinking => r / RATE,
                    Growth::Expanding => EXPANDING_HALF_SLICES,
                };
                let lo = [r + MARGIN, r + MARGIN, half_z + MARGIN];
                if (0..3).any(|k| 2.0 * lo[k] >= dims[k]) {
                    continue;
                }
                let mut c: [f64; 3] = std::array::from_fn(|k| rng.random_range(lo[k]..dims[k] - lo[k]));
                // On a slice, so both growth profiles are symmetric in z.
                c[2] = c[2].round();
                let obj = PhantomObject::Sphere {
                    center: c.map(|v| v * s),
                    max_diameter_mm: d,
                    growth,
                    intensity_hu: rng.random_range(layout.intensity_hu.0..=layout.intensity_hu.1),
                };
                (obj, ([c[0] - r, c[1] - r, c[2] - half_z], [c[0] + r, c[1] + r, c[2] + half_z]))
            } else {
                let radius = rng.random_range(layout.tube_radius_mm.0..=layout.tube_radius_mm.1);
                let rv = radius / s;
                let slices = rng.random_range(layout.tube_slices.0..=layout.tube_slices.1);
                let theta = rng.random_range(0.0..2.0 * PI);
                let drift = [layout.tube_drift * theta.cos(), layout.tube_drift * theta.sin()];
                let span = [drift[0] * slices, drift[1] * slices, slices];
                let mut lo = [0.0; 3];
                let mut hi = [0.0; 3];
                let mut ok = true;
                for k in 0..3 {
                    let pad = if k < 2 { rv + MARGIN } else { MARGIN };
                    lo[k] = pad - span[k].min(0.0);
                    hi[k] = dims[k] - pad - span[k].max(0.0);
                    ok &= lo[k] < hi[k];
                }
                if !ok {
                    continue;
                }
                let a: [f64; 3] = std::array::from_fn(|k| rng.random_range(lo[k]..hi[k]));
                let b: [f64; 3] = std::array::from_fn(|k| a[k] + span[k]);
                let direction = span.map(|v| v * s);
                let length = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
                let obj = PhantomObject::Tube {
                    start: a.map(|v| v * s),
                    direction,
                    radius_mm: radius,
                    length_mm: length,
                    intensity_hu: rng.random_range(layout.intensity_hu.0..=layout.intensity_hu.1),
                };
                let bbox = (
                    [a[0].min(b[0]) - rv, a[1].min(b[1]) - rv, a[2]],
                    [a[0].max(b[0]) + rv, a[1].max(b[1]) + rv, b[2]],
                );
                (obj, bbox)
            };
            if boxes.iter().all(|b| separated(b, &bbox, layout.gap)) {
                boxes.push(bbox);
                objects.push(object);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(PhantomError::Placement(layout.nodules + layout.tubes));
        }
    }

    Ok(PhantomSpec {
        scan_id: scan_id.to_string(),
        dims: layout.dims,
        spacing: [s; 3],
        origin: [0.0; 3],
        background_hu: layout.background_hu,
        noise_sigma_hu: layout.noise_sigma_hu,
        sphere_radius_rate: RATE,
        objects,
        seed: seed ^ 0x9e37_79b9_7f4a_7c15,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LhiDataset {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl LhiDataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &LabeledImage> {
        self.train.iter().chain(&self.test)
    }
}

/// One normalized LHI per planted object, labelled by object family,
/// shuffled and split 2:1 into train and test.
pub fn label_patches(
    volume: &CtVolume,
    nodules: &[GroundTruthNodule],
    tissues: &[Box3],
    params: &LhiParams,
    seed: u64,
) -> Result<LhiDataset, PhantomError> {
    if nodules.is_empty() || tissues.is_empty() {
        return Err(PhantomError::MissingClass);
    }
    let mut items = patch_images(volume, nodules, tissues, params)?;
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (2 * items.len()).div_ceil(3);
    let test = items.split_off(n_train);
    Ok(LhiDataset { train: items, test })
}

/// Unshuffled labelled LHIs, nodules first.
pub fn patch_images(
    volume: &CtVolume,
    nodules: &[GroundTruthNodule],
    tissues: &[Box3],
    params: &LhiParams,
) -> Result<Vec<LabeledImage>, PhantomError> {
    let scan_id = nodules.first().map(|n| n.scan_id.clone()).unwrap_or_default();
    let as_candidates = nodules
        .iter()
        .map(|n| {
            (
                NoduleCandidate {
                    scan_id: n.scan_id.clone(),
                    center_mm: n.center_mm,
                    diameter_mm: n.diameter_mm,
                    score: 1.0,
                },
                Label::Nodule,
            )
        })
        .chain(tissues.iter().map(|t| {
            (
                NoduleCandidate { scan_id: scan_id.clone(), center_mm: t.center, diameter_mm: t.side, score: 1.0 },
                Label::Tissue,
            )
        }));
    as_candidates
        .map(|(c, label)| {
            let img = lhi_for_candidate(volume, &c, params)?;
            Ok(LabeledImage { id: img.candidate_id.clone(), input: img.normalized().data, label })
        })
        .collect()
}
