#!/usr/bin/env python3
"""Reference COCO-style evaluator used to freeze the AP-oracle fixture.

Independent of the Rust implementation: rasterization uses matplotlib's
point-in-polygon test at pixel centers, and the metric pipeline follows the
standard COCO protocol (per-image greedy matching in score order, dataset-wide
101-point interpolated AP per IoU threshold, AR at 100 detections).

Usage:
  python3 tools/reference_coco_eval.py crates/p2p-core/tests/fixtures/ap_oracle
"""

import json
import sys
from pathlib import Path

import numpy as np
from matplotlib.path import Path as MplPath

THRESHOLDS = np.round(np.arange(0.5, 1.0, 0.05), 10)
RECALL_LEVELS = np.linspace(0.0, 1.0, 101)
GUARD = 0.01


def rasterize(flat, h, w):
    pts = np.asarray(flat, dtype=float).reshape(-1, 2)
    path = MplPath(pts)
    ys, xs = np.mgrid[0:h, 0:w]
    centers = np.column_stack([xs.ravel() + 0.5, ys.ravel() + 0.5])
    return path.contains_points(centers).reshape(h, w)


def mask_iou(a, b):
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return 0.0 if union == 0 else inter / union


def main(fixture_dir):
    fixture_dir = Path(fixture_dir)
    gt = json.loads((fixture_dir / "gt.json").read_text())
    results = json.loads((fixture_dir / "results.json").read_text())

    sizes = {img["id"]: (img["height"], img["width"]) for img in gt["images"]}
    gt_by_img, dt_by_img = {}, {}
    for ann in gt["annotations"]:
        gt_by_img.setdefault(ann["image_id"], []).append(ann)
    for det in results:
        dt_by_img.setdefault(det["image_id"], []).append(det)

    total_gt = len(gt["annotations"])
    det_scores, det_tp = [], []

    for img_id in sorted(sizes):
        h, w = sizes[img_id]
        gts = gt_by_img.get(img_id, [])
        dts = sorted(dt_by_img.get(img_id, []), key=lambda d: -d["score"])[:100]
        gt_masks = [rasterize(g["segmentation"][0], h, w) for g in gts]
        dt_masks = [rasterize(d["segmentation"][0], h, w) for d in dts]
        iou = np.zeros((len(dts), len(gts)))
        for di, dm in enumerate(dt_masks):
            for gi, gm in enumerate(gt_masks):
                iou[di, gi] = mask_iou(dm, gm)
                # Guard: no IoU may sit within GUARD of any threshold, so
                # rasterization-convention differences cannot flip a match.
                dist = np.min(np.abs(iou[di, gi] - THRESHOLDS))
                if dist < GUARD and not np.isclose(iou[di, gi], 1.0):
                    raise SystemExit(
                        f"guard violated: image {img_id} det {di} gt {gi} "
                        f"iou {iou[di, gi]:.4f} is within {GUARD} of a threshold"
                    )

        tp = np.zeros((len(THRESHOLDS), len(dts)), dtype=bool)
        for ti, thr in enumerate(THRESHOLDS):
            taken = np.zeros(len(gts), dtype=bool)
            for di in range(len(dts)):
                best = min(thr, 1 - 1e-10)
                best_gi = -1
                for gi in range(len(gts)):
                    if taken[gi] or iou[di, gi] < best:
                        continue
                    best = iou[di, gi]
                    best_gi = gi
                if best_gi >= 0:
                    taken[best_gi] = True
                    tp[ti, di] = True
        for di, d in enumerate(dts):
            det_scores.append(d["score"])
            det_tp.append(tp[:, di])

    det_scores = np.asarray(det_scores)
    det_tp = np.asarray(det_tp).T if det_tp else np.zeros((len(THRESHOLDS), 0), bool)

    ap_per_threshold, recalls_final = [], []
    for ti in range(len(THRESHOLDS)):
        order = np.lexsort((~det_tp[ti], -det_scores))
        tp_sorted = det_tp[ti][order]
        tp_cum = np.cumsum(tp_sorted)
        fp_cum = np.cumsum(~tp_sorted)
        precision = tp_cum / np.maximum(tp_cum + fp_cum, 1)
        recall = tp_cum / total_gt if total_gt else np.zeros_like(tp_cum, dtype=float)
        # Monotone envelope from the right.
        for i in range(len(precision) - 1, 0, -1):
            precision[i - 1] = max(precision[i - 1], precision[i])
        inds = np.searchsorted(recall, RECALL_LEVELS, side="left")
        q = np.zeros(len(RECALL_LEVELS))
        valid = inds < len(precision)
        q[valid] = precision[inds[valid]]
        ap_per_threshold.append(q.mean() if total_gt else 0.0)
        recalls_final.append(recall[-1] if len(recall) else 0.0)

    report = {
        "map": float(np.mean(ap_per_threshold)),
        "ap50": float(ap_per_threshold[0]),
        "ap75": float(ap_per_threshold[5]),
        "ar100": float(np.mean(recalls_final)),
        "ap_per_threshold": [float(v) for v in ap_per_threshold],
    }
    out = fixture_dir / "expected.json"
    out.write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/p2p-core/tests/fixtures/ap_oracle")
