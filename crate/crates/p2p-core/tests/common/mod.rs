//! Shared helpers for the integration suites.
#![allow(dead_code)]

use p2p_core::data::{BBox, RoiSpec, SceneConfig};
use p2p_core::geom::{normalize_ring, Point2, PolygonRing, PrimitiveKind};
use p2p_core::model::ModelConfig;
use p2p_core::train::TrainConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// The tiny configuration used by gradient and equivariance checks.
pub fn tiny_model_cfg(kind: PrimitiveKind) -> ModelConfig {
    ModelConfig {
        kind,
        channels: 8,
        queries: 4,
        roi_size: 8,
        backbone_channels: 8,
        ..Default::default()
    }
}

pub fn default_train_cfg() -> TrainConfig {
    TrainConfig::default()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    p2p_core::util::rng_for(seed, &[p2p_core::util::tag("test")])
}

/// Random rectilinear ring with the generator used by the dataset module.
pub fn random_rectilinear_ring(seed: u64, index: u64) -> PolygonRing {
    let cfg = SceneConfig {
        seed,
        buildings_min: 1,
        buildings_max: 1,
        ..Default::default()
    };
    let scene = p2p_core::data::generate_scene(&cfg, index).expect("scene generates");
    scene.annotations[0].ring.clone()
}

/// Random star-shaped (hence simple) polygon with `n` vertices.
pub fn random_star_polygon(r: &mut ChaCha8Rng, n: usize) -> PolygonRing {
    loop {
        let cx = r.random_range(30.0..90.0);
        let cy = r.random_range(30.0..90.0);
        let mut angles: Vec<f64> = (0..n)
            .map(|_| r.random_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Reject nearly-coincident angles to keep edges non-degenerate.
        let min_gap = angles
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        if min_gap < 0.05 {
            continue;
        }
        let pts: Vec<Point2> = angles
            .iter()
            .map(|&a| {
                let rad = r.random_range(8.0..25.0);
                Point2::new(cx + rad * a.cos(), cy + rad * a.sin())
            })
            .collect();
        if let Ok(ring) = normalize_ring(&pts) {
            if ring.len() == n {
                return ring;
            }
        }
    }
}

pub fn centered_roi(size: f64) -> RoiSpec {
    RoiSpec { bbox: BBox::new(4.0, 4.0, 4.0 + size, 4.0 + size), expansion: 1.0 }
}

/// Cyclic rotation equality of two vertex lists at a coordinate tolerance.
pub fn rings_equal_up_to_rotation(a: &PolygonRing, b: &PolygonRing, tol: f64) -> bool {
    let va = a.vertices();
    let vb = b.vertices();
    if va.len() != vb.len() {
        return false;
    }
    let n = va.len();
    (0..n).any(|shift| (0..n).all(|i| va[i].dist(vb[(i + shift) % n]) <= tol))
}
