//! Regenerates the AP-oracle snapshot inputs (tests/fixtures/ap_oracle):
//! a 20-image synthetic dataset as COCO ground truth plus deterministic
//! jittered predictions as a COCO results file. The expected metrics are
//! produced once by the reference evaluator script (tools/reference_coco_eval.py)
//! and stored alongside.
//!
//! Run from the workspace root:
//!   cargo run -p p2p-core --example make_ap_fixture

use p2p_core::data::coco::{
    ring_to_segmentation, CocoAnnotation, CocoCategory, CocoDataset, CocoImage, CocoResult,
};
use p2p_core::data::{generate_scene, SceneConfig};
use p2p_core::geom::{normalize_ring, Point2};
use p2p_core::util::{rng_for, tag};
use rand::Rng;

fn main() {
    let out_dir = std::path::Path::new("crates/p2p-core/tests/fixtures/ap_oracle");
    std::fs::create_dir_all(out_dir).unwrap();

    // The jitter seed was chosen so every prediction/GT IoU clears the
    // reference script's threshold guard; pass a different one to re-search.
    let jitter_seed: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(7_000_001);

    let cfg = SceneConfig { seed: 20240811, ..Default::default() };
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut results = Vec::new();
    let mut ann_id = 1u64;

    for idx in 0..20u64 {
        let scene = generate_scene(&cfg, idx).unwrap();
        images.push(CocoImage {
            id: idx,
            file_name: format!("img_{idx:05}.png"),
            width: cfg.image_size as u32,
            height: cfg.image_size as u32,
        });
        for (bi, ann) in scene.annotations.iter().enumerate() {
            annotations.push(CocoAnnotation {
                id: ann_id,
                image_id: idx,
                category_id: 1,
                segmentation: ring_to_segmentation(&ann.ring),
                bbox: [ann.bbox.x0, ann.bbox.y0, ann.bbox.width(), ann.bbox.height()],
                area: p2p_core::geom::signed_area(&ann.ring),
                iscrowd: 0,
            });
            ann_id += 1;

            let mut rng = rng_for(jitter_seed, &[tag("fixture"), idx, bi as u64]);
            let draw: f64 = rng.random_range(0.0..1.0);
            if draw < 0.12 {
                continue; // miss
            }
            let (ring, score) = if draw < 0.40 {
                (ann.ring.clone(), rng.random_range(0.80..0.99))
            } else {
                // Rejection-sample the jitter until the IoU with every GT in
                // the scene clears the threshold bands with margin; the
                // reference script re-checks with its own rasterizer.
                let mut accepted = None;
                for _ in 0..200 {
                    let dx = rng.random_range(-2.5..2.5);
                    let dy = rng.random_range(-2.5..2.5);
                    let scale = rng.random_range(0.94..1.08);
                    let c = ann.ring.centroid();
                    let pts: Vec<Point2> = ann
                        .ring
                        .vertices()
                        .iter()
                        .map(|v| {
                            let nx = rng.random_range(-0.8..0.8);
                            let ny = rng.random_range(-0.8..0.8);
                            Point2::new(
                                c.x + (v.x - c.x) * scale + dx + nx,
                                c.y + (v.y - c.y) * scale + dy + ny,
                            )
                        })
                        .collect();
                    let Ok(candidate) = normalize_ring(&pts) else { continue };
                    if clears_guard(&candidate, &scene.annotations, cfg.image_size) {
                        accepted = Some(candidate);
                        break;
                    }
                }
                let Some(ring) = accepted else {
                    eprintln!("no guarded jitter found for image {idx} building {bi}");
                    continue;
                };
                (ring, rng.random_range(0.30..0.90))
            };
            // Distinct scores keep tie conventions out of the comparison.
            let score = score + (idx as f64 * 10.0 + bi as f64) * 1e-7;
            results.push(CocoResult {
                image_id: idx,
                category_id: 1,
                segmentation: ring_to_segmentation(&ring),
                score,
            });
        }
        // Occasional far-off false positive.
        let mut rng = rng_for(jitter_seed.wrapping_add(1), &[tag("fixture-fp"), idx]);
        if rng.random_range(0.0..1.0) < 0.3 {
            let x = rng.random_range(2.0..90.0);
            let y = rng.random_range(2.0..90.0);
            let w = rng.random_range(6.0..14.0);
            let h = rng.random_range(6.0..14.0);
            let ring = normalize_ring(&[
                Point2::new(x, y),
                Point2::new(x + w, y),
                Point2::new(x + w, y + h),
                Point2::new(x, y + h),
            ])
            .unwrap();
            results.push(CocoResult {
                image_id: idx,
                category_id: 1,
                segmentation: ring_to_segmentation(&ring),
                score: rng.random_range(0.05..0.25) + idx as f64 * 1e-7,
            });
        }
    }

    let dataset = CocoDataset {
        images,
        annotations,
        categories: vec![CocoCategory { id: 1, name: "building".into() }],
    };
    std::fs::write(
        out_dir.join("gt.json"),
        serde_json::to_string_pretty(&dataset).unwrap(),
    )
    .unwrap();
    std::fs::write(
        out_dir.join("results.json"),
        serde_json::to_string_pretty(&results).unwrap(),
    )
    .unwrap();
    println!(
        "wrote {} gt annotations and {} predictions to {}",
        dataset.annotations.len(),
        results.len(),
        out_dir.display()
    );
}
