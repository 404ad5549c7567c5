//! Nodule candidates: CSV interchange, score thresholding, duplicate
//! suppression and a connected-component blob detector used as the
//! candidate source on synthetic scans.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{nms_indices, Box3, ScoredBox};
use crate::volume_io::{CtVolume, VolumeGeometry};

/// Diameter assumed when a candidate file has no `diameter_mm` column.
pub const DEFAULT_DIAMETER_MM: f64 = 5.0;
pub const DEFAULT_MIN_SCORE: f64 = 0.1;
pub const DEFAULT_NMS_IOU: f64 = 0.1;

pub const CANDIDATE_HEADER: [&str; 6] = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm", "probability"];
pub const ANNOTATION_HEADER: [&str; 5] = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"];

#[derive(Debug, Error)]
pub enum CandidateError {
    #[error("row {row}: cannot parse {field} value {value:?}")]
    Parse { row: usize, field: &'static str, value: String },
    #[error("row {row}: {message}")]
    Validation { row: usize, message: String },
    #[error("missing column {0}")]
    MissingColumn(&'static str),
    #[error("no volume geometry for scan {0}")]
    Frame(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleCandidate {
    pub scan_id: String,
    pub center_mm: [f64; 3],
    pub diameter_mm: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthNodule {
    pub scan_id: String,
    pub center_mm: [f64; 3],
    pub diameter_mm: f64,
}

impl GroundTruthNodule {
    pub fn radius_mm(&self) -> f64 {
        0.5 * self.diameter_mm
    }
}

struct Columns {
    uid: usize,
    xyz: [usize; 3],
    diameter: Option<usize>,
    probability: Option<usize>,
}

fn columns(headers: &csv::StringRecord) -> Result<Columns, CandidateError> {
    let find = |name: &'static str| headers.iter().position(|h| h.trim() == name);
    let need = |name: &'static str| find(name).ok_or(CandidateError::MissingColumn(name));
    Ok(Columns {
        uid: need("seriesuid")?,
        xyz: [need("coordX")?, need("coordY")?, need("coordZ")?],
        diameter: find("diameter_mm"),
        probability: find("probability"),
    })
}

fn field(record: &csv::StringRecord, idx: usize, row: usize, name: &'static str) -> Result<f64, CandidateError> {
    let raw = record.get(idx).unwrap_or("").trim();
    let value: f64 = raw.parse().map_err(|_| CandidateError::Parse { row, field: name, value: raw.to_string() })?;
    if !value.is_finite() {
        return Err(CandidateError::Parse { row, field: name, value: raw.to_string() });
    }
    Ok(value)
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input)
}

/// Parses a LUNA16-style candidates file. Rows are numbered from 1 for the
/// first data row.
pub fn load_candidates_csv<R: Read>(input: R) -> Result<Vec<NoduleCandidate>, CandidateError> {
    let mut rdr = reader(input);
    let cols = columns(rdr.headers()?)?;
    let prob = cols.probability.ok_or(CandidateError::MissingColumn("probability"))?;
    if cols.diameter.is_none() {
        log::warn!("candidate file has no diameter_mm column, assuming {DEFAULT_DIAMETER_MM} mm");
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let center_mm = [
            field(&rec, cols.xyz[0], row, "coordX")?,
            field(&rec, cols.xyz[1], row, "coordY")?,
            field(&rec, cols.xyz[2], row, "coordZ")?,
        ];
        let diameter_mm = match cols.diameter {
            Some(d) => field(&rec, d, row, "diameter_mm")?,
            None => DEFAULT_DIAMETER_MM,
        };
        if !(diameter_mm > 0.0) {
            return Err(CandidateError::Validation {
                row,
                message: format!("diameter_mm must be positive, got {diameter_mm}"),
            });
        }
        let score = field(&rec, prob, row, "probability")?;
        if !(0.0..=1.0).contains(&score) {
            return Err(CandidateError::Validation { row, message: format!("probability {score} outside [0, 1]") });
        }
        out.push(NoduleCandidate {
            scan_id: rec.get(cols.uid).unwrap_or("").to_string(),
            center_mm,
            diameter_mm,
            score,
        });
    }
    Ok(out)
}

pub fn write_candidates_csv<W: Write>(out: W, candidates: &[NoduleCandidate]) -> Result<(), CandidateError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CANDIDATE_HEADER)?;
    for c in candidates {
        w.write_record([
            c.scan_id.clone(),
            c.center_mm[0].to_string(),
            c.center_mm[1].to_string(),
            c.center_mm[2].to_string(),
            c.diameter_mm.to_string(),
            c.score.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn load_annotations_csv<R: Read>(input: R) -> Result<Vec<GroundTruthNodule>, CandidateError> {
    let mut rdr = reader(input);
    let cols = columns(rdr.headers()?)?;
    let diameter = cols.diameter.ok_or(CandidateError::MissingColumn("diameter_mm"))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let diameter_mm = field(&rec, diameter, row, "diameter_mm")?;
        if !(diameter_mm > 0.0) {
            return Err(CandidateError::Validation {
                row,
                message: format!("diameter_mm must be positive, got {diameter_mm}"),
            });
        }
        out.push(GroundTruthNodule {
            scan_id: rec.get(cols.uid).unwrap_or("").to_string(),
            center_mm: [
                field(&rec, cols.xyz[0], row, "coordX")?,
                field(&rec, cols.xyz[1], row, "coordY")?,
                field(&rec, cols.xyz[2], row, "coordZ")?,
            ],
            diameter_mm,
        });
    }
    Ok(out)
}

pub fn write_annotations_csv<W: Write>(out: W, nodules: &[GroundTruthNodule]) -> Result<(), CandidateError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ANNOTATION_HEADER)?;
    for n in nodules {
        w.write_record([
            n.scan_id.clone(),
            n.center_mm[0].to_string(),
            n.center_mm[1].to_string(),
            n.center_mm[2].to_string(),
            n.diameter_mm.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Keeps candidates whose score is strictly greater than `min_score`.
pub fn threshold_candidates(candidates: &[NoduleCandidate], min_score: f64) -> Vec<NoduleCandidate> {
    candidates.iter().filter(|c| c.score > min_score).cloned().collect()
}

/// Cube in the scan's voxel frame. The side uses the geometric mean spacing.
pub fn candidate_box(candidate: &NoduleCandidate, geometry: &VolumeGeometry) -> Box3 {
    let mean_spacing = geometry.spacing.iter().product::<f64>().cbrt();
    Box3::new(geometry.world_to_voxel(candidate.center_mm), candidate.diameter_mm / mean_spacing)
}

/// Per-scan NMS in the voxel frame. Scans are emitted in scan-id order,
/// each scan's survivors by descending score.
pub fn dedup_candidates(
    candidates: &[NoduleCandidate],
    geometries: &HashMap<String, VolumeGeometry>,
    iou_threshold: f64,
) -> Result<Vec<NoduleCandidate>, CandidateError> {
    let mut by_scan: BTreeMap<&str, Vec<&NoduleCandidate>> = BTreeMap::new();
    for c in candidates {
        by_scan.entry(c.scan_id.as_str()).or_default().push(c);
    }
    let mut out = Vec::with_capacity(candidates.len());
    for (scan, group) in by_scan {
        let geometry = geometries.get(scan).ok_or_else(|| CandidateError::Frame(scan.to_string()))?;
        let boxes: Vec<ScoredBox> = group
            .iter()
            .map(|c| ScoredBox { bbox: candidate_box(c, geometry), score: c.score, scan_id: c.scan_id.clone() })
            .collect();
        out.extend(nms_indices(&boxes, iou_threshold).into_iter().map(|i| group[i].clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    /// Voxels strictly above this HU value are foreground.
    pub intensity_threshold: f64,
    pub min_diameter_mm: f64,
    pub max_diameter_mm: f64,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self { intensity_threshold: -400.0, min_diameter_mm: 3.0, max_diameter_mm: 30.0 }
    }
}

/// Thresholds the volume and turns each 6-connected component into a
/// candidate at its centroid, with the diameter of the sphere of equal
/// volume. Components are emitted in scan order of their first voxel.
pub fn detect_blobs(volume: &CtVolume, scan_id: &str, params: &BlobParams) -> Vec<NoduleCandidate> {
    assert!(params.min_diameter_mm < params.max_diameter_mm, "min diameter must be below max diameter");
    let [nx, ny, nz] = volume.dims();
    let voxels = volume.voxels();
    let max_intensity = volume.min_max().1 as f64;
    let voxel_mm3: f64 = volume.spacing().iter().product();
    let fg: Vec<bool> = voxels.iter().map(|&v| v as f64 > params.intensity_threshold).collect();
    let mut seen = vec![false; voxels.len()];
    let mut queue = VecDeque::new();
    let mut out = Vec::new();

    for start in 0..voxels.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut count = 0usize;
        let mut sum = [0.0f64; 3];
        let mut intensity = 0.0f64;
        while let Some(idx) = queue.pop_front() {
            let x = idx % nx;
            let y = (idx / nx) % ny;
            let z = idx / (nx * ny);
            count += 1;
            sum[0] += x as f64;
            sum[1] += y as f64;
            sum[2] += z as f64;
            intensity += voxels[idx] as f64;
            let mut visit = |n: usize| {
                if fg[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            };
            if x > 0 {
                visit(idx - 1);
            }
            if x + 1 < nx {
                visit(idx + 1);
            }
            if y > 0 {
                visit(idx - nx);
            }
            if y + 1 < ny {
                visit(idx + nx);
            }
            if z > 0 {
                visit(idx - nx * ny);
            }
            if z + 1 < nz {
                visit(idx + nx * ny);
            }
        }
        let n = count as f64;
        let diameter_mm = (6.0 * n * voxel_mm3 / PI).cbrt();
        if diameter_mm < params.min_diameter_mm || diameter_mm > params.max_diameter_mm {
            continue;
        }
        let score = if max_intensity > 0.0 { (intensity / n / max_intensity).clamp(0.0, 1.0) } else { 0.0 };
        out.push(NoduleCandidate {
            scan_id: scan_id.to_string(),
            center_mm: volume.voxel_to_world(sum.map(|s| s / n)),
            diameter_mm,
            score,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(scan: &str, c: [f64; 3], d: f64, score: f64) -> NoduleCandidate {
        NoduleCandidate { scan_id: scan.into(), center_mm: c, diameter_mm: d, score }
    }

    #[test]
    fn csv_examples() {
        let header = "seriesuid,coordX,coordY,coordZ,diameter_mm,probability\n";
        assert!(load_candidates_csv(header.as_bytes()).unwrap().is_empty());

        let text = format!("{header}s1,1.0,2.0,3.0,6.0,0.9\n");
        let c = load_candidates_csv(text.as_bytes()).unwrap();
        assert_eq!(c, vec![cand("s1", [1.0, 2.0, 3.0], 6.0, 0.9)]);

        let text = format!("{header}s1,1.0,2.0,3.0,6.0,1.5\n");
        assert!(matches!(load_candidates_csv(text.as_bytes()), Err(CandidateError::Validation { row: 1, .. })));

        let text = format!("{header}s1,1.0,2.0,3.0,6.0,0.5\ns2,x,2.0,3.0,6.0,0.5\n");
        match load_candidates_csv(text.as_bytes()) {
            Err(CandidateError::Parse { row, field, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(field, "coordX");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_without_diameter_uses_default() {
        let text = "seriesuid,coordX,coordY,coordZ,probability\na,1,2,3,0.25\n";
        let c = load_candidates_csv(text.as_bytes()).unwrap();
        assert_eq!(c[0].diameter_mm, DEFAULT_DIAMETER_MM);
    }

    #[test]
    fn annotations_round_trip() {
        let gt = vec![GroundTruthNodule { scan_id: "a".into(), center_mm: [-1.5, 2.25, 3.0], diameter_mm: 7.5 }];
        let mut buf = Vec::new();
        write_annotations_csv(&mut buf, &gt).unwrap();
        assert_eq!(load_annotations_csv(buf.as_slice()).unwrap(), gt);
    }

    #[test]
    fn threshold_is_strict() {
        let cs: Vec<_> = [0.05, 0.1, 0.11].iter().map(|&s| cand("a", [0.0; 3], 5.0, s)).collect();
        let kept = threshold_candidates(&cs, 0.1);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.11);
        assert_eq!(threshold_candidates(&cs, 0.0), cs);
        assert!(threshold_candidates(&[], 0.1).is_empty());
    }

    fn geometries(scans: &[&str]) -> HashMap<String, VolumeGeometry> {
        scans.iter().map(|s| (s.to_string(), VolumeGeometry::new([64; 3], [1.0; 3], [0.0; 3]).unwrap())).collect()
    }

    #[test]
    fn dedup_examples() {
        let g = geometries(&["a"]);
        let cs = vec![cand("a", [10.0; 3], 6.0, 0.3), cand("a", [10.0; 3], 6.0, 0.9)];
        let out = dedup_candidates(&cs, &g, 0.1).unwrap();
        assert_eq!(out, vec![cs[1].clone()]);

        let cs = vec![cand("a", [10.0; 3], 6.0, 0.3), cand("a", [40.0; 3], 6.0, 0.9)];
        assert_eq!(dedup_candidates(&cs, &g, 0.1).unwrap().len(), 2);

        let missing = vec![cand("b", [0.0; 3], 5.0, 0.5)];
        assert!(matches!(dedup_candidates(&missing, &g, 0.1), Err(CandidateError::Frame(_))));
    }

    #[test]
    fn blobs_on_air_are_empty() {
        let g = VolumeGeometry::new([16; 3], [1.0; 3], [0.0; 3]).unwrap();
        let v = CtVolume::filled(g, -1000);
        let p = BlobParams { intensity_threshold: -200.0, ..BlobParams::default() };
        assert!(detect_blobs(&v, "a", &p).is_empty());
    }

    #[test]
    fn blob_centroid_and_size() {
        // A 4x4x4 block of 100 HU: 64 voxels.
        let g = VolumeGeometry::new([12; 3], [1.0; 3], [-6.0, 0.0, 0.0]).unwrap();
        let mut vox = vec![-900i16; 12 * 12 * 12];
        for z in 2..6 {
            for y in 3..7 {
                for x in 4..8 {
                    vox[x + 12 * (y + 12 * z)] = 100;
                }
            }
        }
        let v = CtVolume::new(g, vox).unwrap();
        let blobs = detect_blobs(&v, "a", &BlobParams::default());
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].center_mm, [5.5 - 6.0, 4.5, 3.5]);
        assert!((blobs[0].diameter_mm - (6.0 * 64.0 / PI).cbrt()).abs() < 1e-12);
        assert_eq!(blobs[0].score, 1.0);

        let tight = BlobParams { max_diameter_mm: 4.0, ..BlobParams::default() };
        assert!(detect_blobs(&v, "a", &tight).is_empty());
    }
}
