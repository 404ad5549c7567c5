//! Independent reference implementations shared by the integration and
//! acceptance tests. Each is written for clarity, not speed.
#![allow(dead_code)]

use lhinet_core::geometry::{iou3, Box3, ScoredBox};
use lhinet_core::hs2::{Example, Hs2Net, Label};
use lhinet_core::lhi::Grid;
use lhinet_core::{GroundTruthNodule, NoduleCandidate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Closed form of the decay recurrence at the last slice: `tau` minus the
/// number of slices since the most recent change, floored at zero.
pub fn lhi_oracle(stack: &[Grid<f32>], tau: u32, delta: f64) -> Grid<u32> {
    let (w, h) = stack[0].shape();
    let last = stack.len() - 1;
    let mut out = Grid::filled(w, h, 0u32);
    for y in 0..h {
        for x in 0..w {
            let changed =
                (1..=last).rev().find(|&s| (stack[s].get(x, y) as f64 - stack[s - 1].get(x, y) as f64).abs() > delta);
            if let Some(s) = changed {
                out.set(x, y, tau.saturating_sub((last - s) as u32));
            }
        }
    }
    out
}

/// Stacks whose slice differences often land exactly on, just above or just
/// below `delta`.
pub fn random_stack(rng: &mut ChaCha8Rng, slices: usize, w: usize, h: usize, delta: f64) -> Vec<Grid<f32>> {
    let mut prev: Vec<f32> = (0..w * h).map(|_| rng.random_range(-1000..400) as f32).collect();
    let mut stack = vec![Grid::from_vec(w, h, prev.clone())];
    for _ in 1..slices {
        let next: Vec<f32> = prev
            .iter()
            .map(|&v| {
                let step = match rng.random_range(0..6) {
                    0 => 0.0,
                    1 => delta,
                    2 => delta + 1.0,
                    3 => delta - 1.0,
                    4 => rng.random_range(0.0..3.0 * delta).round(),
                    _ => rng.random_range(0.0..delta).round(),
                };
                if rng.random_bool(0.5) {
                    v + step as f32
                } else {
                    v - step as f32
                }
            })
            .collect();
        stack.push(Grid::from_vec(w, h, next.clone()));
        prev = next;
    }
    stack
}

fn center_cmp(a: &[f64; 3], b: &[f64; 3]) -> std::cmp::Ordering {
    for k in 0..3 {
        let o = a[k].total_cmp(&b[k]);
        if o.is_ne() {
            return o;
        }
    }
    std::cmp::Ordering::Equal
}

/// Greedy matching from scratch on the candidates with score at least `t`.
/// Returns (true positives, false positives).
fn match_at_threshold(cands: &[NoduleCandidate], gt: &[GroundTruthNodule], t: f64) -> (usize, usize) {
    let mut kept: Vec<&NoduleCandidate> = cands.iter().filter(|c| c.score >= t).collect();
    kept.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.scan_id.cmp(&b.scan_id))
            .then(center_cmp(&a.center_mm, &b.center_mm))
            .then(a.diameter_mm.total_cmp(&b.diameter_mm))
    });
    let mut used = vec![false; gt.len()];
    let (mut tp, mut fp) = (0, 0);
    for c in kept {
        let mut best: Option<(f64, usize)> = None;
        let mut hit_any = false;
        for (g, n) in gt.iter().enumerate() {
            if n.scan_id != c.scan_id {
                continue;
            }
            let d = (0..3).map(|k| (c.center_mm[k] - n.center_mm[k]).powi(2)).sum::<f64>().sqrt();
            if d <= n.diameter_mm / 2.0 {
                hit_any = true;
                if !used[g] && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, g));
                }
            }
        }
        match best {
            Some((_, g)) => {
                used[g] = true;
                tp += 1;
            }
            None if hit_any => {}
            None => fp += 1,
        }
    }
    (tp, fp)
}

pub struct BruteFroc {
    /// (threshold, fps per scan, sensitivity), thresholds descending.
    pub points: Vec<(f64, f64, f64)>,
    pub levels: [f64; 7],
    pub cpm: f64,
}

pub fn froc_bruteforce(cands: &[NoduleCandidate], gt: &[GroundTruthNodule], scans: usize) -> BruteFroc {
    let mut thresholds: Vec<f64> = cands.iter().map(|c| c.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let points: Vec<(f64, f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let (tp, fp) = match_at_threshold(cands, gt, t);
            (t, fp as f64 / scans as f64, tp as f64 / gt.len() as f64)
        })
        .collect();
    let levels = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0]
        .map(|l| points.iter().filter(|p| p.1 <= l).map(|p| p.2).fold(0.0, f64::max));
    BruteFroc { points, levels, cpm: levels.iter().sum::<f64>() / 7.0 }
}

/// Random FROC instance: candidates cluster around nodules so hits,
/// duplicates and misses all occur, and scores repeat.
pub fn random_froc_instance(rng: &mut ChaCha8Rng) -> (Vec<NoduleCandidate>, Vec<GroundTruthNodule>, usize) {
    let scans = rng.random_range(1..=10);
    let n_gt = rng.random_range(1..=20);
    let n_c = rng.random_range(0..=80);
    let scan = |rng: &mut ChaCha8Rng| format!("s{}", rng.random_range(0..scans));
    let gt: Vec<GroundTruthNodule> = (0..n_gt)
        .map(|_| GroundTruthNodule {
            scan_id: scan(rng),
            center_mm: std::array::from_fn(|_| rng.random_range(0.0..40.0)),
            diameter_mm: rng.random_range(3.0..20.0),
        })
        .collect();
    let cands = (0..n_c)
        .map(|_| {
            let near = &gt[rng.random_range(0..gt.len())];
            let (scan_id, center_mm) = if rng.random_bool(0.6) {
                let r = near.diameter_mm / 2.0 * 1.3;
                (near.scan_id.clone(), near.center_mm.map(|c| c + rng.random_range(-r..r)))
            } else {
                (scan(rng), std::array::from_fn(|_| rng.random_range(0.0..40.0)))
            };
            NoduleCandidate { scan_id, center_mm, diameter_mm: 5.0, score: rng.random_range(0..12) as f64 / 12.0 }
        })
        .collect();
    (cands, gt, scans)
}

/// IoU estimated by sampling points uniformly inside `a` and counting
/// those inside `b`.
pub fn iou_monte_carlo(a: &Box3, b: &Box3, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (lo_a, hi_a) = (a.min_corner(), a.max_corner());
    let (lo_b, hi_b) = (b.min_corner(), b.max_corner());
    let mut inside = 0usize;
    for _ in 0..samples {
        let p: [f64; 3] = std::array::from_fn(|k| rng.random_range(lo_a[k]..hi_a[k]));
        if (0..3).all(|k| p[k] >= lo_b[k] && p[k] <= hi_b[k]) {
            inside += 1;
        }
    }
    let inter = inside as f64 / samples as f64 * a.volume();
    inter / (a.volume() + b.volume() - inter)
}

/// Greedy NMS by repeated selection: take the best remaining box, delete
/// everything overlapping it above the threshold, repeat.
pub fn nms_bruteforce(boxes: &[ScoredBox], thr: f64) -> Vec<usize> {
    let better = |i: usize, j: usize| {
        let (a, b) = (&boxes[i], &boxes[j]);
        let ka = [a.bbox.center[2], a.bbox.center[1], a.bbox.center[0]];
        let kb = [b.bbox.center[2], b.bbox.center[1], b.bbox.center[0]];
        a.score > b.score || (a.score == b.score && center_cmp(&ka, &kb).is_lt())
    };
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if better(i, best) {
                best = i;
            }
        }
        kept.push(best);
        alive.retain(|&i| i != best && iou3(&boxes[i].bbox, &boxes[best].bbox) <= thr);
    }
    kept
}

pub fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<ScoredBox> {
    (0..n)
        .map(|_| ScoredBox {
            bbox: Box3::new(
                std::array::from_fn(|_| rng.random_range(0..12) as f64 * 1.5),
                rng.random_range(1..8) as f64 * 1.5,
            ),
            score: rng.random_range(0..6) as f64 / 6.0,
            scan_id: "s".into(),
        })
        .collect()
}

fn mean_loss_from_logits(logits: &[f64], labels: &[Label]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(b, l)| {
            let (z0, z1) = (logits[2 * b], logits[2 * b + 1]);
            let m = z0.max(z1);
            let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
            lse - [z0, z1][l.index()]
        })
        .sum::<f64>()
        / labels.len() as f64
}

pub struct GradCheck {
    pub checked: usize,
    /// Parameters whose ±ε perturbation crossed a ReLU or max-pool switch
    /// and were re-measured with a smaller step.
    pub reduced_step: usize,
    pub worst_relative: f64,
    /// (tensor, index, analytic, numeric) of the worst parameter.
    pub worst: (usize, usize, f64, f64),
}

/// Relative gradient error with a floor so that two near-zero values
/// compare by absolute difference.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// ReLU states of the three hidden dense layers for a batch of features.
fn head_pattern(net: &Hs2Net<f64>, feats: &[f64], batch: usize) -> Vec<usize> {
    let mut x = feats.to_vec();
    let mut pattern = Vec::new();
    for d in &net.dense[..3] {
        let mut next = vec![0.0; batch * d.outputs];
        for b in 0..batch {
            for j in 0..d.outputs {
                let row = &d.weights[j * d.inputs..(j + 1) * d.inputs];
                let z =
                    d.bias[j] + row.iter().zip(&x[b * d.inputs..(b + 1) * d.inputs]).map(|(w, v)| w * v).sum::<f64>();
                pattern.push(usize::from(z > 0.0));
                next[b * d.outputs + j] = z.max(0.0);
            }
        }
        x = next;
    }
    pattern
}

/// Central finite differences with step `eps` for every parameter. Head
/// parameters reuse the cached convolutional features. When `±eps` moves
/// the network onto a different linear piece the step is divided by 10
/// until both probes stay on the piece of the unperturbed parameters.
pub fn gradient_check(net: &Hs2Net<f64>, inputs: &[Vec<f64>], labels: &[Label], eps: f64) -> GradCheck {
    let batch: Vec<Example<'_, f64>> =
        inputs.iter().zip(labels).map(|(x, &label)| Example { input: x, label }).collect();
    let (grads, _) = net.backward(&batch).expect("backward");
    let feats: Vec<f64> = inputs.iter().flat_map(|x| net.conv_features(x)).collect();
    let full = |m: &Hs2Net<f64>| {
        let pattern: Vec<usize> = inputs.iter().flat_map(|x| m.decision_pattern(x)).collect();
        (m.loss(&batch).expect("loss"), pattern)
    };
    let head = |m: &Hs2Net<f64>| {
        (mean_loss_from_logits(&m.head_logits(&feats, inputs.len()), labels), head_pattern(m, &feats, inputs.len()))
    };
    let base_full = full(net).1;
    let base_head = head(net).1;

    let mut probe = net.clone();
    let mut result = GradCheck { checked: 0, reduced_step: 0, worst_relative: 0.0, worst: (0, 0, 0.0, 0.0) };
    for t in 0..grads.tensors.len() {
        let conv = t < 4;
        let base = if conv { &base_full } else { &base_head };
        for i in 0..grads.tensors[t].len() {
            let orig = probe.tensors()[t][i];
            let mut step = eps;
            let mut numeric = 0.0;
            for attempt in 0..6 {
                probe.tensors_mut()[t][i] = orig + step;
                let (up, p_up) = if conv { full(&probe) } else { head(&probe) };
                probe.tensors_mut()[t][i] = orig - step;
                let (down, p_down) = if conv { full(&probe) } else { head(&probe) };
                probe.tensors_mut()[t][i] = orig;
                numeric = (up - down) / (2.0 * step);
                if p_up == *base && p_down == *base {
                    break;
                }
                if attempt == 0 {
                    result.reduced_step += 1;
                }
                step /= 10.0;
            }
            let analytic = grads.tensors[t][i];
            let rel = relative_error(analytic, numeric);
            if rel > result.worst_relative {
                result.worst_relative = rel;
                result.worst = (t, i, analytic, numeric);
            }
            result.checked += 1;
        }
    }
    result
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
