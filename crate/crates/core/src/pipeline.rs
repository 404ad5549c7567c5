//! End-to-end candidate processing: threshold, deduplicate, classify each
//! survivor's LHI with HS², and compare FROC before and after filtering.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidates::{
    dedup_candidates, detect_blobs, threshold_candidates, BlobParams, CandidateError, GroundTruthNodule,
    NoduleCandidate, DEFAULT_MIN_SCORE, DEFAULT_NMS_IOU,
};
use crate::froc::{fp_reduction_report, froc, match_candidates, EvalError, FpReduction, FrocReport, HitKind};
use crate::hs2::{Hs2Error, Hs2Model, Label, LabeledImage};
use crate::lhi::{lhi_batch, LhiError, LhiParams};
use crate::volume_io::CtVolume;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("candidate refers to unknown scan {0:?}")]
    UnknownScan(String),
    #[error("duplicate scan id {0:?}")]
    DuplicateScan(String),
    #[error(transparent)]
    Candidates(#[from] CandidateError),
    #[error(transparent)]
    Lhi(#[from] LhiError),
    #[error(transparent)]
    Model(#[from] Hs2Error),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub min_score: f64,
    pub nms_iou: f64,
    /// A candidate survives HS² when its nodule probability is at least this.
    pub nodule_probability: f64,
    pub lhi: LhiParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            min_score: DEFAULT_MIN_SCORE,
            nms_iou: DEFAULT_NMS_IOU,
            nodule_probability: 0.5,
            lhi: LhiParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scan {
    pub id: String,
    pub volume: CtVolume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classified {
    pub candidate: NoduleCandidate,
    pub p_nodule: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub froc_before: FrocReport,
    pub froc_after: FrocReport,
    pub fp_reduction: FpReduction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Thresholded and deduplicated candidates with their HS² verdicts.
    pub classified: Vec<Classified>,
    /// Evaluation, when ground truth was supplied.
    pub report: Option<PipelineReport>,
}

impl PipelineOutput {
    pub fn before(&self) -> Vec<NoduleCandidate> {
        self.classified.iter().map(|c| c.candidate.clone()).collect()
    }

    pub fn after(&self) -> Vec<NoduleCandidate> {
        self.classified.iter().filter(|c| c.kept).map(|c| c.candidate.clone()).collect()
    }
}

fn index_scans(scans: &[Scan]) -> Result<HashMap<&str, &Scan>, PipelineError> {
    let mut by_id = HashMap::with_capacity(scans.len());
    for s in scans {
        if by_id.insert(s.id.as_str(), s).is_some() {
            return Err(PipelineError::DuplicateScan(s.id.clone()));
        }
    }
    Ok(by_id)
}

/// Blob candidates for every scan, in scan order.
pub fn detect_all(scans: &[Scan], params: &BlobParams) -> Vec<NoduleCandidate> {
    scans.par_iter().map(|s| detect_blobs(&s.volume, &s.id, params)).collect::<Vec<_>>().concat()
}

/// Runs threshold, NMS and HS² filtering over `candidates`, then evaluates
/// both candidate sets against `ground_truth` if given.
pub fn run(
    scans: &[Scan],
    candidates: &[NoduleCandidate],
    model: &Hs2Model,
    ground_truth: Option<&[GroundTruthNodule]>,
    config: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    let by_id = index_scans(scans)?;
    if let Some(c) = candidates.iter().find(|c| !by_id.contains_key(c.scan_id.as_str())) {
        return Err(PipelineError::UnknownScan(c.scan_id.clone()));
    }
    let geometries = scans.iter().map(|s| (s.id.clone(), *s.volume.geometry())).collect();
    let kept = threshold_candidates(candidates, config.min_score);
    let deduped = dedup_candidates(&kept, &geometries, config.nms_iou)?;

    let mut classified = Vec::with_capacity(deduped.len());
    for group in deduped.chunk_by(|a, b| a.scan_id == b.scan_id) {
        let volume = &by_id[group[0].scan_id.as_str()].volume;
        let images = lhi_batch(volume, group, &config.lhi)?;
        let probs = images
            .par_iter()
            .map(|img| model.predict_grid(&img.normalized()).map(|p| p.p_nodule))
            .collect::<Result<Vec<_>, _>>()?;
        classified.extend(group.iter().zip(probs).map(|(c, p)| Classified {
            candidate: c.clone(),
            p_nodule: p,
            kept: p >= config.nodule_probability,
        }));
    }

    let mut output = PipelineOutput { classified, report: None };
    if let Some(gt) = ground_truth {
        let (before, after) = (output.before(), output.after());
        output.report = Some(PipelineReport {
            froc_before: froc(&before, gt, scans.len())?,
            froc_after: froc(&after, gt, scans.len())?,
            fp_reduction: fp_reduction_report(&before, &after, gt, config.min_score)?,
        });
    }
    Ok(output)
}

/// Labels candidates by whether they hit a ground-truth nodule (true
/// positives and duplicates are nodules) and returns their normalized LHIs.
pub fn labeled_candidate_patches(
    volume: &CtVolume,
    candidates: &[NoduleCandidate],
    ground_truth: &[GroundTruthNodule],
    params: &LhiParams,
) -> Result<Vec<LabeledImage>, PipelineError> {
    let matched = match_candidates(candidates, ground_truth);
    let images = lhi_batch(volume, candidates, params)?;
    Ok(images
        .into_iter()
        .zip(matched.candidates)
        .map(|(img, kind)| LabeledImage {
            id: img.candidate_id.clone(),
            input: img.normalized().data,
            label: if kind == HitKind::FalsePositive { Label::Tissue } else { Label::Nodule },
        })
        .collect())
}
