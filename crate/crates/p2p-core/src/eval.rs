//! Rasterized polygon IoU and COCO-style AP/AR over predicted rings.
//!
//! The metric pipeline mirrors the standard COCO instance protocol:
//! per-image greedy matching in score order, dataset-wide TP/FP
//! accumulation, 101-point interpolated AP per IoU threshold, mAP over
//! thresholds 0.50:0.05:0.95, and AR at 100 detections.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::PolygonRing;

/// One predicted instance.
#[derive(Debug, Clone)]
pub struct InstancePrediction {
    pub image_id: u64,
    pub ring: PolygonRing,
    pub score: f64,
}

/// One ground-truth instance.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub image_id: u64,
    pub ring: PolygonRing,
}

/// Pixel dimensions per image id; rasterization happens at this size.
pub type ImageSizes = BTreeMap<u64, (usize, usize)>; // id -> (height, width)

/// The standard 10 IoU thresholds 0.50:0.05:0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Binary mask stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Even-odd scanline fill sampled at pixel centers (x + 0.5, y + 0.5).
pub fn rasterize(ring: &PolygonRing, height: usize, width: usize) -> Mask {
    let mut data = vec![false; height * width];
    let v = ring.vertices();
    let n = v.len();
    let mut xs: Vec<f64> = Vec::with_capacity(8);
    for row in 0..height {
        let yc = row as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let a = v[i];
            let b = v[(i + 1) % n];
            let (ylo, yhi) = if a.y <= b.y { (a.y, b.y) } else { (b.y, a.y) };
            // Half-open rule avoids double-counting shared vertices.
            if yc < ylo || yc >= yhi {
                continue;
            }
            let t = (yc - a.y) / (b.y - a.y);
            xs.push(a.x + t * (b.x - a.x));
        }
        xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
        for pair in xs.chunks_exact(2) {
            let (xa, xb) = (pair[0], pair[1]);
            // Fill pixels whose center satisfies xa <= x + 0.5 < xb.
            let start = (xa - 0.5).ceil().max(0.0) as usize;
            let stop = ((xb - 0.5).ceil().max(0.0) as usize).min(width);
            for col in start..stop {
                data[row * width + col] = true;
            }
        }
    }
    Mask { height, width, data }
}

/// Intersection-over-union of two equal-shaped masks (0 when the union is
/// empty).
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Shape(format!(
            "mask {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Metrics emitted by [`evaluate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// AP averaged over IoU 0.50:0.05:0.95.
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// AR at 100 detections, averaged over the IoU thresholds.
    pub ar100: f64,
    /// AP per threshold, aligned with `iou_thresholds`.
    pub ap_per_threshold: Vec<f64>,
    pub iou_thresholds: Vec<f64>,
    /// Precision at the 101 recall levels, per threshold.
    pub pr_curves: Vec<Vec<f64>>,
}

/// Per-detection record after matching.
struct Det {
    score: f64,
    /// tp[t] is true when matched at IoU threshold t.
    tp: Vec<bool>,
}

const MAX_DETECTIONS: usize = 100;

/// COCO-style evaluation of predictions against ground truth.
///
/// Detections are processed per image in score order (ties broken by a
/// content-derived key so the result is invariant to the input ordering)
/// and greedily matched to the unmatched GT with the highest IoU above the
/// threshold. For the dataset-wide sweep, equal-scored true positives rank
/// ahead of false positives, keeping duplicated perfect predictions from
/// eroding AP.
pub fn evaluate(
    predictions: &[InstancePrediction],
    gts: &[GroundTruth],
    sizes: &ImageSizes,
    iou_thresholds: &[f64],
) -> Result<MetricsReport> {
    let nt = iou_thresholds.len();
    let mut gt_by_image: BTreeMap<u64, Vec<&GroundTruth>> = BTreeMap::new();
    for g in gts {
        gt_by_image.entry(g.image_id).or_default().push(g);
    }
    let mut dt_by_image: BTreeMap<u64, Vec<&InstancePrediction>> = BTreeMap::new();
    for p in predictions {
        if !p.score.is_finite() {
            return Err(Error::Numeric("non-finite prediction score".into()));
        }
        dt_by_image.entry(p.image_id).or_default().push(p);
    }

    let total_gt: usize = gts.len();
    let mut dets: Vec<Det> = Vec::with_capacity(predictions.len());

    let image_ids: std::collections::BTreeSet<u64> = gt_by_image
        .keys()
        .chain(dt_by_image.keys())
        .copied()
        .collect();

    for image_id in image_ids {
        let (h, w) = *sizes.get(&image_id).ok_or_else(|| {
            Error::Input(format!("no image size registered for id {image_id}"))
        })?;
        let gt_list = gt_by_image.get(&image_id).map(|v| v.as_slice()).unwrap_or(&[]);
        let mut dt_list: Vec<&InstancePrediction> =
            dt_by_image.get(&image_id).map(|v| v.clone()).unwrap_or_default();
        // Content-derived ordering: score desc, then ring bytes.
        dt_list.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| ring_sort_key(&a.ring).cmp(&ring_sort_key(&b.ring)))
        });
        dt_list.truncate(MAX_DETECTIONS);

        let gt_masks: Vec<Mask> = gt_list.iter().map(|g| rasterize(&g.ring, h, w)).collect();
        let dt_masks: Vec<Mask> = dt_list.iter().map(|d| rasterize(&d.ring, h, w)).collect();

        // IoU grid: det x gt.
        let mut iou = vec![vec![0.0f64; gt_list.len()]; dt_list.len()];
        for (di, dm) in dt_masks.iter().enumerate() {
            for (gi, gm) in gt_masks.iter().enumerate() {
                iou[di][gi] = mask_iou(dm, gm)?;
            }
        }

        let det_base = dets.len();
        for d in &dt_list {
            dets.push(Det { score: d.score, tp: vec![false; nt] });
        }
        for (t_idx, &thr) in iou_thresholds.iter().enumerate() {
            let mut gt_taken = vec![false; gt_list.len()];
            for di in 0..dt_list.len() {
                // Greedy best match; on exact IoU ties the later GT wins,
                // matching the reference implementation.
                let mut best = thr.min(1.0 - 1e-10);
                let mut best_gi: Option<usize> = None;
                for gi in 0..gt_list.len() {
                    if gt_taken[gi] || iou[di][gi] < best {
                        continue;
                    }
                    best = iou[di][gi];
                    best_gi = Some(gi);
                }
                if let Some(gi) = best_gi {
                    gt_taken[gi] = true;
                    dets[det_base + di].tp[t_idx] = true;
                }
            }
        }
    }

    // Dataset-wide sweep: score desc; at equal scores TPs first. AP per
    // threshold via 101-point interpolation.
    let recall_levels: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let mut ap_per_threshold = Vec::with_capacity(nt);
    let mut pr_curves = Vec::with_capacity(nt);
    let mut ar_sum = 0.0;
    for t_idx in 0..nt {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| {
            dets[b]
                .score
                .total_cmp(&dets[a].score)
                .then_with(|| dets[b].tp[t_idx].cmp(&dets[a].tp[t_idx]))
        });
        let mut tp_cum = 0usize;
        let mut fp_cum = 0usize;
        let mut precisions: Vec<f64> = Vec::with_capacity(dets.len());
        let mut recalls: Vec<f64> = Vec::with_capacity(dets.len());
        for &i in &order {
            if dets[i].tp[t_idx] {
                tp_cum += 1;
            } else {
                fp_cum += 1;
            }
            precisions.push(tp_cum as f64 / (tp_cum + fp_cum) as f64);
            recalls.push(if total_gt > 0 { tp_cum as f64 / total_gt as f64 } else { 0.0 });
        }
        // Monotone non-increasing envelope from the right.
        for i in (0..precisions.len().saturating_sub(1)).rev() {
            if precisions[i] < precisions[i + 1] {
                precisions[i] = precisions[i + 1];
            }
        }
        // Precision at each recall level: first point with recall >= level.
        let mut q = vec![0.0f64; recall_levels.len()];
        for (ri, &level) in recall_levels.iter().enumerate() {
            let pos = recalls.partition_point(|&r| r < level);
            if pos < precisions.len() {
                q[ri] = precisions[pos];
            }
        }
        let ap = if total_gt == 0 { 0.0 } else { q.iter().sum::<f64>() / q.len() as f64 };
        ap_per_threshold.push(ap);
        ar_sum += recalls.last().copied().unwrap_or(0.0);
        pr_curves.push(q);
    }

    let map = ap_per_threshold.iter().sum::<f64>() / nt.max(1) as f64;
    let ap50 = *ap_per_threshold.first().unwrap_or(&0.0);
    let ap75_idx = iou_thresholds.iter().position(|&t| (t - 0.75).abs() < 1e-9);
    let ap75 = ap75_idx.map(|i| ap_per_threshold[i]).unwrap_or(0.0);
    let ar100 = if total_gt == 0 { 0.0 } else { ar_sum / nt.max(1) as f64 };

    Ok(MetricsReport {
        map,
        ap50,
        ap75,
        ar100,
        ap_per_threshold,
        iou_thresholds: iou_thresholds.to_vec(),
        pr_curves,
    })
}

fn ring_sort_key(ring: &PolygonRing) -> Vec<u64> {
    ring.vertices()
        .iter()
        .flat_map(|v| [v.x.to_bits(), v.y.to_bits()])
        .collect()
}

/// Write the per-threshold PR curves as CSV (threshold, recall, precision).
pub fn pr_curves_csv(report: &MetricsReport) -> String {
    let mut out = String::from("iou_threshold,recall,precision\n");
    for (t, curve) in report.iou_thresholds.iter().zip(&report.pr_curves) {
        for (i, p) in curve.iter().enumerate() {
            out.push_str(&format!("{t},{},{p}\n", i as f64 / 100.0));
        }
    }
    out
}
