//! Seeded fixtures shared by the benchmarks.

use lhinet_core::geometry::{Box3, ScoredBox};
use lhinet_core::lhi::Grid;
use lhinet_core::{GroundTruthNodule, NoduleCandidate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn boxes(n: usize, seed: u64) -> Vec<ScoredBox> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| ScoredBox {
            bbox: Box3::new(std::array::from_fn(|_| r.random_range(0.0..64.0)), r.random_range(3.0..15.0)),
            score: r.random_range(0.0..1.0),
            scan_id: "s".into(),
        })
        .collect()
}

/// `slices` grids of noise around -600 HU, so roughly half the steps
/// exceed a 30 HU change threshold.
pub fn stack(slices: usize, side: usize, seed: u64) -> Vec<Grid<f32>> {
    let mut r = rng(seed);
    (0..slices)
        .map(|_| Grid::from_vec(side, side, (0..side * side).map(|_| r.random_range(-640.0..-560.0)).collect()))
        .collect()
}

pub fn froc_instance(
    scans: usize,
    nodules: usize,
    candidates: usize,
    seed: u64,
) -> (Vec<NoduleCandidate>, Vec<GroundTruthNodule>) {
    let mut r = rng(seed);
    let gt: Vec<GroundTruthNodule> = (0..nodules)
        .map(|i| GroundTruthNodule {
            scan_id: format!("s{}", i % scans),
            center_mm: std::array::from_fn(|_| r.random_range(0.0..300.0)),
            diameter_mm: r.random_range(3.0..30.0),
        })
        .collect();
    let cands = (0..candidates)
        .map(|i| {
            let near = &gt[i % gt.len()];
            let hit = r.random_bool(0.3);
            NoduleCandidate {
                scan_id: near.scan_id.clone(),
                center_mm: if hit { near.center_mm } else { std::array::from_fn(|_| r.random_range(0.0..300.0)) },
                diameter_mm: 6.0,
                score: r.random_range(0.0..1.0),
            }
        })
        .collect();
    (cands, gt)
}
