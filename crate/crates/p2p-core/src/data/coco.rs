//! COCO instance-annotation JSON: schema, loading with ring filtering, and
//! writing of datasets and results.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{normalize_ring, Point2, PolygonRing};

use super::Annotation;

pub const MAX_RING_VERTICES: usize = 36;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    /// Polygon rings as flat [x0, y0, x1, y1, ...] lists.
    pub segmentation: Vec<Vec<f64>>,
    /// (x, y, w, h).
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// One entry of a COCO results file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u32,
    pub segmentation: Vec<Vec<f64>>,
    pub score: f64,
}

/// A parsed dataset: per image, the kept annotations.
#[derive(Debug, Clone)]
pub struct LoadedCoco {
    pub entries: Vec<(CocoImage, Vec<Annotation>)>,
    /// Annotations dropped for degenerate rings or too many vertices.
    pub dropped: usize,
}

fn ring_from_flat(flat: &[f64]) -> Option<Vec<Point2>> {
    if flat.len() < 6 || flat.len() % 2 != 0 {
        return None;
    }
    Some(flat.chunks_exact(2).map(|c| Point2::new(c[0], c[1])).collect())
}

/// Parse a COCO annotation file; each annotation's first polygon ring is
/// normalized, and rings with more than [`MAX_RING_VERTICES`] vertices or
/// degenerate geometry are dropped with a logged count.
pub fn load_coco(path: &Path) -> Result<LoadedCoco> {
    let text = std::fs::read_to_string(path)?;
    let dataset: CocoDataset = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: format!("line {} column {}: {e}", e.line(), e.column()),
    })?;
    load_coco_dataset(&dataset)
}

pub fn load_coco_dataset(dataset: &CocoDataset) -> Result<LoadedCoco> {
    let mut dropped = 0usize;
    let mut entries: Vec<(CocoImage, Vec<Annotation>)> = dataset
        .images
        .iter()
        .map(|img| (img.clone(), Vec::new()))
        .collect();
    let index: std::collections::HashMap<u64, usize> = dataset
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| (img.id, i))
        .collect();
    for ann in &dataset.annotations {
        let Some(&slot) = index.get(&ann.image_id) else {
            dropped += 1;
            continue;
        };
        // Only the first ring is kept; holed buildings are out of scope.
        let Some(first) = ann.segmentation.first() else {
            dropped += 1;
            continue;
        };
        let Some(points) = ring_from_flat(first) else {
            dropped += 1;
            continue;
        };
        if points.len() > MAX_RING_VERTICES {
            dropped += 1;
            continue;
        }
        match normalize_ring(&points) {
            Ok(ring) => entries[slot].1.push(Annotation::from_ring(ring)),
            Err(_) => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} annotation(s) during COCO ingestion");
    }
    Ok(LoadedCoco { entries, dropped })
}

/// Serialize a ring as a COCO polygon (flat list, implicit closure).
pub fn ring_to_segmentation(ring: &PolygonRing) -> Vec<Vec<f64>> {
    let flat: Vec<f64> = ring.vertices().iter().flat_map(|v| [v.x, v.y]).collect();
    vec![flat]
}

/// Load a COCO results file (bare array form).
pub fn load_results(path: &Path) -> Result<Vec<CocoResult>> {
    let text = std::fs::read_to_string(path)?;
    let results: Vec<CocoResult> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: format!("line {} column {}: {e}", e.line(), e.column()),
    })?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_dataset() -> CocoDataset {
        CocoDataset {
            images: vec![CocoImage { id: 1, file_name: "a.png".into(), width: 64, height: 64 }],
            annotations: vec![CocoAnnotation {
                id: 10,
                image_id: 1,
                category_id: 1,
                segmentation: vec![vec![4.0, 4.0, 20.0, 4.0, 20.0, 20.0, 4.0, 20.0]],
                bbox: [4.0, 4.0, 16.0, 16.0],
                area: 256.0,
                iscrowd: 0,
            }],
            categories: vec![CocoCategory { id: 1, name: "building".into() }],
        }
    }

    #[test]
    fn minimal_file_roundtrip() {
        let loaded = load_coco_dataset(&minimal_dataset()).unwrap();
        assert_eq!(loaded.entries.len(), 1);
        assert_eq!(loaded.entries[0].1.len(), 1);
        assert_eq!(loaded.dropped, 0);
        assert_eq!(loaded.entries[0].1[0].ring.len(), 4);
    }

    #[test]
    fn oversized_ring_is_dropped() {
        let mut ds = minimal_dataset();
        // A 40-vertex regular polygon.
        let flat: Vec<f64> = (0..40)
            .flat_map(|i| {
                let a = std::f64::consts::TAU * i as f64 / 40.0;
                [20.0 + 10.0 * a.cos(), 20.0 + 10.0 * a.sin()]
            })
            .collect();
        ds.annotations[0].segmentation = vec![flat];
        let loaded = load_coco_dataset(&ds).unwrap();
        assert_eq!(loaded.dropped, 1);
        assert!(loaded.entries[0].1.is_empty());
    }

    #[test]
    fn empty_annotation_list_is_fine() {
        let mut ds = minimal_dataset();
        ds.annotations.clear();
        let loaded = load_coco_dataset(&ds).unwrap();
        assert_eq!(loaded.dropped, 0);
        assert!(loaded.entries[0].1.is_empty());
    }

    #[test]
    fn malformed_file_reports_location() {
        let dir = std::env::temp_dir().join("p2p_coco_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.json");
        std::fs::write(&path, "{\"images\": [,]}").unwrap();
        let err = load_coco(&path).unwrap_err();
        match err {
            Error::Parse { detail, .. } => assert!(detail.contains("line")),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
