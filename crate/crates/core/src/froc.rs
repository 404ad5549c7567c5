//! FROC analysis and the competition performance metric (CPM).
//!
//! A candidate hits a ground-truth nodule when its center lies within the
//! nodule radius. Candidates are matched greedily in descending score order;
//! the first hit on a nodule is a true positive, later hits on the same
//! nodule are duplicates and count neither as TP nor FP.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidates::{GroundTruthNodule, NoduleCandidate};

/// False positives per scan at which sensitivity is read off.
pub const FP_LEVELS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("sensitivity is undefined without ground-truth nodules")]
    EmptyGroundTruth,
    #[error("scan count must be at least 1")]
    NoScans,
    #[error("expected {expected} level sensitivities, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("{0} is undefined: zero denominator")]
    UndefinedMetric(&'static str),
    #[error("candidate {0} of the filtered set is not in the unfiltered set")]
    NotSubset(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HitKind {
    TruePositive,
    FalsePositive,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per candidate, in input order.
    pub candidates: Vec<HitKind>,
    /// Ground-truth index each true positive was credited to.
    pub credited: Vec<Option<usize>>,
    /// Per ground-truth nodule, in input order.
    pub detected: Vec<bool>,
}

impl MatchResult {
    pub fn count(&self, kind: HitKind) -> usize {
        self.candidates.iter().filter(|&&k| k == kind).count()
    }
}

/// Descending score, then scan id, then lexicographic center.
fn candidate_order(a: &NoduleCandidate, b: &NoduleCandidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.scan_id.cmp(&b.scan_id))
        .then_with(|| {
            a.center_mm
                .iter()
                .zip(&b.center_mm)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.diameter_mm.total_cmp(&b.diameter_mm))
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sorted_indices(candidates: &[NoduleCandidate]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| candidate_order(&candidates[i], &candidates[j]));
    order
}

struct Matcher<'a> {
    by_scan: HashMap<&'a str, Vec<usize>>,
    ground_truth: &'a [GroundTruthNodule],
    detected: Vec<bool>,
}

impl<'a> Matcher<'a> {
    fn new(ground_truth: &'a [GroundTruthNodule]) -> Self {
        let mut by_scan: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, g) in ground_truth.iter().enumerate() {
            by_scan.entry(g.scan_id.as_str()).or_default().push(i);
        }
        Self { by_scan, ground_truth, detected: vec![false; ground_truth.len()] }
    }

    /// Credits the nearest undetected nodule hit by `c`, if any.
    fn visit(&mut self, c: &NoduleCandidate) -> (HitKind, Option<usize>) {
        let Some(gts) = self.by_scan.get(c.scan_id.as_str()) else {
            return (HitKind::FalsePositive, None);
        };
        let mut any_hit = false;
        let mut best: Option<(f64, usize)> = None;
        for &g in gts {
            let gt = &self.ground_truth[g];
            let d = distance(c.center_mm, gt.center_mm);
            if d <= gt.radius_mm() {
                any_hit = true;
                if !self.detected[g] && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, g));
                }
            }
        }
        match best {
            Some((_, g)) => {
                self.detected[g] = true;
                (HitKind::TruePositive, Some(g))
            }
            None if any_hit => (HitKind::Duplicate, None),
            None => (HitKind::FalsePositive, None),
        }
    }
}

pub fn match_candidates(candidates: &[NoduleCandidate], ground_truth: &[GroundTruthNodule]) -> MatchResult {
    let mut matcher = Matcher::new(ground_truth);
    let mut kinds = vec![HitKind::FalsePositive; candidates.len()];
    let mut credited = vec![None; candidates.len()];
    for i in sorted_indices(candidates) {
        let (k, g) = matcher.visit(&candidates[i]);
        kinds[i] = k;
        credited[i] = g;
    }
    MatchResult { candidates: kinds, credited, detected: matcher.detected }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub fps_per_scan: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocReport {
    pub operating_points: Vec<OperatingPoint>,
    pub fp_levels: [f64; 7],
    pub level_sensitivities: [f64; 7],
    pub cpm: f64,
    pub scan_count: usize,
    pub nodule_count: usize,
    /// How level sensitivities are read from the curve.
    pub reading: String,
}

/// Sensitivity at an FP rate: the best operating point not exceeding it.
pub fn level_sensitivity(points: &[OperatingPoint], level: f64) -> f64 {
    points.iter().filter(|p| p.fps_per_scan <= level).map(|p| p.sensitivity).fold(0.0, f64::max)
}

/// Sweeps the score threshold over every distinct candidate score (a
/// candidate is kept when its score is at least the threshold).
pub fn froc(
    candidates: &[NoduleCandidate],
    ground_truth: &[GroundTruthNodule],
    scan_count: usize,
) -> Result<FrocReport, EvalError> {
    if ground_truth.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    if scan_count == 0 {
        return Err(EvalError::NoScans);
    }
    let order = sorted_indices(candidates);
    let mut matcher = Matcher::new(ground_truth);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    let n_gt = ground_truth.len() as f64;
    let scans = scan_count as f64;
    for (pos, &i) in order.iter().enumerate() {
        match matcher.visit(&candidates[i]).0 {
            HitKind::TruePositive => tp += 1,
            HitKind::FalsePositive => fp += 1,
            HitKind::Duplicate => {}
        }
        let score = candidates[i].score;
        let last_of_score = order.get(pos + 1).is_none_or(|&j| candidates[j].score != score);
        if last_of_score {
            points.push(OperatingPoint {
                threshold: score,
                fps_per_scan: fp as f64 / scans,
                sensitivity: tp as f64 / n_gt,
            });
        }
    }
    let level_sensitivities = FP_LEVELS.map(|l| level_sensitivity(&points, l));
    let cpm = cpm(&level_sensitivities)?;
    Ok(FrocReport {
        operating_points: points,
        fp_levels: FP_LEVELS,
        level_sensitivities,
        cpm,
        scan_count,
        nodule_count: ground_truth.len(),
        reading: "stepwise: best sensitivity at or below each FP level, no interpolation".into(),
    })
}

impl FrocReport {
    /// `threshold,fps_per_scan,sensitivity` rows.
    pub fn points_csv(&self) -> String {
        let mut s = String::from("threshold,fps_per_scan,sensitivity\n");
        for p in &self.operating_points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.fps_per_scan, p.sensitivity);
        }
        s
    }

    /// Two whitespace-separated columns, FPs per scan then sensitivity.
    pub fn curve_text(&self) -> String {
        let mut s = String::from("# fps_per_scan sensitivity\n");
        for p in &self.operating_points {
            let _ = writeln!(s, "{} {}", p.fps_per_scan, p.sensitivity);
        }
        s
    }
}

/// Mean of the seven level sensitivities.
pub fn cpm(level_sensitivities: &[f64]) -> Result<f64, EvalError> {
    if level_sensitivities.len() != FP_LEVELS.len() {
        return Err(EvalError::Arity { expected: FP_LEVELS.len(), got: level_sensitivities.len() });
    }
    Ok(level_sensitivities.iter().sum::<f64>() / FP_LEVELS.len() as f64)
}

/// Tolerance for comparing a computed CPM with a printed three-decimal one.
pub const CPM_TOLERANCE: f64 = 0.0005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpmCheck {
    pub computed: f64,
    pub reported: f64,
    pub consistent: bool,
}

/// Recomputes a CPM from its level sensitivities and flags a reported value
/// that is off by more than [`CPM_TOLERANCE`].
pub fn check_reported_cpm(level_sensitivities: &[f64], reported: f64) -> Result<CpmCheck, EvalError> {
    let computed = cpm(level_sensitivities)?;
    Ok(CpmCheck { computed, reported, consistent: (computed - reported).abs() <= CPM_TOLERANCE })
}

pub fn sensitivity_specificity(tp: u64, fn_: u64, tn: u64, fp: u64) -> Result<(f64, f64), EvalError> {
    if tp + fn_ == 0 {
        return Err(EvalError::UndefinedMetric("sensitivity"));
    }
    if tn + fp == 0 {
        return Err(EvalError::UndefinedMetric("specificity"));
    }
    Ok((tp as f64 / (tp + fn_) as f64, tn as f64 / (tn + fp) as f64))
}

/// Round to one decimal, ties to even.
pub fn round_tenth(x: f64) -> f64 {
    (x * 10.0).round_ties_even() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpReduction {
    pub min_score: f64,
    pub fp_before: usize,
    pub fp_after: usize,
    pub tp_before: usize,
    pub tp_after: usize,
    /// `100 * (1 - after / before)`, one decimal.
    pub reduction_percent: f64,
    pub sensitivity_before: f64,
    pub sensitivity_after: f64,
    pub nodule_count: usize,
}

fn identity(c: &NoduleCandidate) -> (String, [u64; 3], u64, u64) {
    (c.scan_id.clone(), c.center_mm.map(f64::to_bits), c.diameter_mm.to_bits(), c.score.to_bits())
}

/// Compares a candidate set before and after false-positive filtering, both
/// restricted to scores strictly above `min_score`.
pub fn fp_reduction_report(
    before: &[NoduleCandidate],
    after: &[NoduleCandidate],
    ground_truth: &[GroundTruthNodule],
    min_score: f64,
) -> Result<FpReduction, EvalError> {
    if ground_truth.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let mut pool: HashMap<_, usize> = HashMap::new();
    for c in before {
        *pool.entry(identity(c)).or_default() += 1;
    }
    for (i, c) in after.iter().enumerate() {
        match pool.get_mut(&identity(c)) {
            Some(n) if *n > 0 => *n -= 1,
            _ => return Err(EvalError::NotSubset(i)),
        }
    }
    let stats = |set: &[NoduleCandidate]| {
        let kept: Vec<NoduleCandidate> = set.iter().filter(|c| c.score > min_score).cloned().collect();
        let m = match_candidates(&kept, ground_truth);
        let detected: HashSet<usize> = m.credited.iter().flatten().copied().collect();
        (m.count(HitKind::FalsePositive), detected.len())
    };
    let (fp_before, tp_before) = stats(before);
    let (fp_after, tp_after) = stats(after);
    let n = ground_truth.len() as f64;
    let reduction = if fp_before == 0 { 0.0 } else { 100.0 * (1.0 - fp_after as f64 / fp_before as f64) };
    Ok(FpReduction {
        min_score,
        fp_before,
        fp_after,
        tp_before,
        tp_after,
        reduction_percent: round_tenth(reduction),
        sensitivity_before: tp_before as f64 / n,
        sensitivity_after: tp_after as f64 / n,
        nodule_count: ground_truth.len(),
    })
}
