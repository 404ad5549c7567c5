use lhinet_core::candidates::detect_blobs;
use lhinet_core::froc::match_candidates;
use lhinet_core::lhi::{lhi_for_candidate, region_elongation, Grid};
use lhinet_core::phantom::{generate, label_patches, random_spec, Growth, PhantomObject, PhantomSpec, RandomLayout};
use lhinet_core::{BlobParams, Label, LhiParams, NoduleCandidate};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn voxel_error(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max)
}

#[test]
fn single_sphere_gives_one_blob() {
    let spec = PhantomSpec {
        scan_id: "one".into(),
        dims: [40, 40, 40],
        spacing: [1.0; 3],
        origin: [0.0; 3],
        background_hu: -900.0,
        noise_sigma_hu: 20.0,
        sphere_radius_rate: 0.8,
        objects: vec![PhantomObject::Sphere {
            center: [20.3, 18.0, 21.0],
            max_diameter_mm: 10.0,
            growth: Growth::Shrinking,
            intensity_hu: 60.0,
        }],
        seed: 3,
    };
    let p = generate(&spec).unwrap();
    let blobs = detect_blobs(&p.volume, "one", &BlobParams::default());
    assert_eq!(blobs.len(), 1);
    assert!(voxel_error(blobs[0].center_mm, [20.3, 18.0, 21.0]) <= 1.0);
    assert!((blobs[0].diameter_mm - 10.0).abs() <= 2.0, "diameter {}", blobs[0].diameter_mm);
}

fn recovery(noise: f64) -> (usize, usize) {
    let layout = RandomLayout { noise_sigma_hu: noise, ..RandomLayout::default() };
    let (mut found, mut total) = (0, 0);
    for seed in 0..10 {
        let id = format!("r{seed}");
        let p = generate(&random_spec(&layout, &id, seed).unwrap()).unwrap();
        let blobs = detect_blobs(&p.volume, &id, &BlobParams::default());
        for n in &p.nodules {
            total += 1;
            if blobs.iter().any(|b| voxel_error(b.center_mm, n.center_mm) <= 1.0) {
                found += 1;
            }
        }
        let m = match_candidates(&blobs, &p.nodules);
        assert!(m.detected.iter().all(|&d| d));
    }
    (found, total)
}

#[test]
fn blobs_recover_planted_nodules() {
    let (found, total) = recovery(0.0);
    assert_eq!(found, total);
    let (found, total) = recovery(20.0);
    assert!(found as f64 >= 0.95 * total as f64, "{found}/{total}");
}

#[test]
fn shrinking_sphere_lhi_is_round_and_tube_lhi_is_a_streak() {
    let spec = PhantomSpec {
        scan_id: "shapes".into(),
        dims: [64, 64, 40],
        spacing: [1.0; 3],
        origin: [0.0; 3],
        background_hu: -900.0,
        noise_sigma_hu: 0.0,
        sphere_radius_rate: 0.8,
        objects: vec![
            PhantomObject::Sphere {
                center: [16.0, 16.0, 20.0],
                max_diameter_mm: 12.0,
                growth: Growth::Shrinking,
                intensity_hu: 60.0,
            },
            PhantomObject::Tube {
                start: [30.0, 44.0, 8.0],
                direction: [1.5, 0.0, 1.0],
                radius_mm: 2.5,
                length_mm: 36.0,
                intensity_hu: 60.0,
            },
        ],
        seed: 0,
    };
    let p = generate(&spec).unwrap();
    let params = LhiParams::default();
    let lhi = |c: [f64; 3], d: f64| {
        let cand = NoduleCandidate { scan_id: "shapes".into(), center_mm: c, diameter_mm: d, score: 1.0 };
        lhi_for_candidate(&p.volume, &cand, &params).unwrap().normalized()
    };
    let sphere = lhi(p.nodules[0].center_mm, 12.0);
    let tube = lhi(p.tissues[0].center, p.tissues[0].side);
    let es = region_elongation(&sphere, 0.5).unwrap();
    let et = region_elongation(&tube, 0.5).unwrap();
    assert!(es < 1.5, "sphere elongation {es}");
    assert!(et > 2.0 * es, "tube elongation {et} vs sphere {es}");
    // The sphere's history is centered on the patch center.
    let c = sphere.width / 2;
    let ring: f32 = (0..sphere.width).map(|x| sphere.get(x, c)).sum();
    assert!(ring > 0.0);
}

#[test]
fn tube_patches_are_more_elongated_than_sphere_patches() {
    let layout = RandomLayout::default();
    let params = LhiParams::default();
    let (mut spheres, mut tubes) = (Vec::new(), Vec::new());
    for seed in 0..16 {
        let id = format!("e{seed}");
        let p = generate(&random_spec(&layout, &id, 100 + seed).unwrap()).unwrap();
        let ds = label_patches(&p.volume, &p.nodules, &p.tissues, &params, seed).unwrap();
        for s in ds.all() {
            let grid = Grid::from_vec(params.out_size, params.out_size, s.input.clone());
            let Some(e) = region_elongation(&grid, 0.5) else { continue };
            match s.label {
                Label::Nodule => spheres.push(e),
                Label::Tissue => tubes.push(e),
            }
        }
    }
    assert!(spheres.len() + tubes.len() >= 100);
    let (ms, mt) = (median(spheres), median(tubes));
    assert!(mt > ms, "tube median {mt} vs sphere median {ms}");
}

#[test]
fn datasets_are_seeded() {
    let layout = RandomLayout::default();
    let p = generate(&random_spec(&layout, "d", 9).unwrap()).unwrap();
    let params = LhiParams::default();
    let a = label_patches(&p.volume, &p.nodules, &p.tissues, &params, 4).unwrap();
    assert_eq!(a, label_patches(&p.volume, &p.nodules, &p.tissues, &params, 4).unwrap());
    assert_eq!(a.len(), p.nodules.len() + p.tissues.len());
}
