#[path = "common/oracles.rs"]
mod oracles;

use std::collections::HashMap;

use lhinet_core::candidates::dedup_candidates;
use lhinet_core::froc::froc;
use lhinet_core::geometry::{iou3, nms_indices, tile_volume, Box3, ScoredBox, Tiling};
use lhinet_core::lhi::compute_lhi;
use lhinet_core::{NoduleCandidate, VolumeGeometry};
use oracles::*;
use rand::Rng;

#[test]
fn lhi_matches_closed_form() {
    let mut rng = seeded_rng(1);
    for _ in 0..200 {
        let slices = rng.random_range(1..=13);
        let stack = random_stack(&mut rng, slices, 9, 7, 30.0);
        let tau = rng.random_range(1..=12);
        assert_eq!(compute_lhi(&stack, tau, 30.0).unwrap(), lhi_oracle(&stack, tau, 30.0));
    }
}

#[test]
fn froc_matches_threshold_sweep() {
    let mut rng = seeded_rng(2);
    for _ in 0..100 {
        let (cands, gt, scans) = random_froc_instance(&mut rng);
        let r = froc(&cands, &gt, scans).unwrap();
        let b = froc_bruteforce(&cands, &gt, scans);
        let points: Vec<_> = r.operating_points.iter().map(|p| (p.threshold, p.fps_per_scan, p.sensitivity)).collect();
        assert_eq!(points, b.points);
        assert_eq!(r.level_sensitivities, b.levels);
        assert_eq!(r.cpm, b.cpm);
    }
}

#[test]
fn iou_agrees_with_sampling() {
    let mut rng = seeded_rng(3);
    for _ in 0..50 {
        let a = Box3::new(std::array::from_fn(|_| rng.random_range(0.0..6.0)), rng.random_range(1.0..6.0));
        let b = Box3::new(std::array::from_fn(|_| rng.random_range(0.0..6.0)), rng.random_range(1.0..6.0));
        let mc = iou_monte_carlo(&a, &b, 200_000, &mut rng);
        assert!((iou3(&a, &b) - mc).abs() < 0.01, "{a:?} {b:?}: {} vs {mc}", iou3(&a, &b));
    }
}

#[test]
fn nms_matches_repeated_selection() {
    let mut rng = seeded_rng(4);
    for _ in 0..100 {
        let n = rng.random_range(0..40);
        let boxes = random_boxes(&mut rng, n);
        for thr in [0.0, 0.1, 0.3, 0.7] {
            assert_eq!(nms_indices(&boxes, thr), nms_bruteforce(&boxes, thr));
        }
    }
}

#[test]
fn nms_output_is_a_fixed_point() {
    let mut rng = seeded_rng(5);
    for _ in 0..50 {
        let boxes = random_boxes(&mut rng, 30);
        let kept = nms_indices(&boxes, 0.1);
        let kept_boxes: Vec<ScoredBox> = kept.iter().map(|&i| boxes[i].clone()).collect();
        for (i, a) in kept_boxes.iter().enumerate() {
            for b in &kept_boxes[i + 1..] {
                assert!(iou3(&a.bbox, &b.bbox) <= 0.1);
            }
        }
        assert_eq!(nms_indices(&kept_boxes, 0.1), (0..kept.len()).collect::<Vec<_>>());
    }
}

#[test]
fn dedup_matches_per_scan_nms() {
    let mut rng = seeded_rng(6);
    let geometries: HashMap<String, VolumeGeometry> = ["a", "b", "c"]
        .iter()
        .map(|s| (s.to_string(), VolumeGeometry::new([64, 64, 32], [0.7, 0.7, 1.25], [-20.0, 5.0, 0.0]).unwrap()))
        .collect();
    for _ in 0..50 {
        let cands: Vec<NoduleCandidate> = (0..rng.random_range(0..60))
            .map(|_| NoduleCandidate {
                scan_id: ["a", "b", "c"][rng.random_range(0..3)].into(),
                center_mm: [rng.random_range(-20.0..0.0), rng.random_range(5.0..25.0), rng.random_range(0.0..20.0)],
                diameter_mm: rng.random_range(3.0..12.0),
                score: rng.random_range(0..5) as f64 / 5.0,
            })
            .collect();
        let out = dedup_candidates(&cands, &geometries, 0.1).unwrap();
        let mut expected = Vec::new();
        for scan in ["a", "b", "c"] {
            let group: Vec<&NoduleCandidate> = cands.iter().filter(|c| c.scan_id == scan).collect();
            let g = &geometries[scan];
            let s = g.spacing.iter().product::<f64>().cbrt();
            let boxes: Vec<ScoredBox> = group
                .iter()
                .map(|c| ScoredBox {
                    bbox: Box3::new(g.world_to_voxel(c.center_mm), c.diameter_mm / s),
                    score: c.score,
                    scan_id: scan.into(),
                })
                .collect();
            expected.extend(nms_bruteforce(&boxes, 0.1).into_iter().map(|i| group[i].clone()));
        }
        assert_eq!(out, expected);
        assert_eq!(dedup_candidates(&out, &geometries, 0.1).unwrap(), out);
    }
}

#[test]
fn tiling_covers_every_voxel() {
    let mut rng = seeded_rng(7);
    for _ in 0..40 {
        let window = rng.random_range(2..20);
        let min_overlap = rng.random_range(0..window);
        let dims: [usize; 3] = std::array::from_fn(|_| rng.random_range(window..3 * window + 5));
        let tiles = tile_volume(dims, Tiling { window, min_overlap, pad: false }).unwrap();
        let mut hits = vec![0u32; dims.iter().product()];
        for t in &tiles {
            assert!((0..3).all(|k| t[k] + window <= dims[k]));
            for z in t[2]..t[2] + window {
                for y in t[1]..t[1] + window {
                    for x in t[0]..t[0] + window {
                        hits[x + dims[0] * (y + dims[1] * z)] += 1;
                    }
                }
            }
        }
        assert!(hits.iter().all(|&h| h > 0));
    }
}
