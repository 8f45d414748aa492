//! Set-prediction supervision: bipartite matching, segmentation and order
//! losses, and the training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{image_to_array, make_roi, make_targets, RoiSpec, SceneRecord, TrainingTarget};
use crate::error::{Error, Result};
use crate::eval::{self, GroundTruth, ImageSizes, InstancePrediction, MetricsReport};
use crate::model::{checkpoint, Model};
use crate::nn::{AdamW, Tape, Var};
use crate::util::{rng_for, tag};

/// Optimization settings. The loss weights follow the set-prediction
/// convention: total = alpha * (lambda1 * reg + lambda2 * cls) + beta * order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiply the learning rate by 0.1 from this epoch on.
    pub lr_drop_epoch: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub weight_decay: f64,
    /// ROI expansion ratio; training draws jittered ratios from its range.
    pub expansion: f64,
    /// Experimental: supervise intermediate decoder blocks as well.
    pub aux_loss: bool,
    pub checkpoint_every_epochs: usize,
    /// 0 disables validation passes.
    pub eval_every_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_drop_epoch: None,
            epochs: 10,
            batch_size: 8,
            lambda1: 5.0,
            lambda2: 1.0,
            alpha: 1.0,
            beta: 0.1,
            seed: 0,
            weight_decay: 1e-4,
            expansion: 1.1,
            aux_loss: false,
            checkpoint_every_epochs: 1,
            eval_every_epochs: 0,
        }
    }
}

/// Outcome of the bipartite matching for one building.
///
/// `sigma` is a permutation of [0, N): prediction i is matched to target
/// sigma[i] when sigma[i] < M, and to a dummy slot otherwise.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub sigma: Vec<usize>,
    pub target_count: usize,
}

impl MatchResult {
    pub fn is_matched(&self, i: usize) -> bool {
        self.sigma[i] < self.target_count
    }

    pub fn matched_count(&self) -> usize {
        self.sigma.iter().filter(|&&s| s < self.target_count).count()
    }
}

/// Loss components for one step (building means).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub seg_reg: f64,
    pub seg_cls: f64,
    pub order: f64,
}

/// Matching cost grid: cost[i][j] = l1 * L1(P_i, T_j) - l2 * p_fg_i.
pub fn matching_cost(
    pred_coords: &Array2<f64>,
    fg_probs: &[f64],
    targets: &Array2<f64>,
    lambda1: f64,
    lambda2: f64,
) -> Result<Array2<f64>> {
    let (n, d) = pred_coords.dim();
    let (m, dt) = targets.dim();
    if d != dt {
        return Err(Error::Shape(format!("coordinate width {d} vs {dt}")));
    }
    if fg_probs.len() != n {
        return Err(Error::Shape("score length mismatch".into()));
    }
    let mut cost = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut l1 = 0.0;
            for k in 0..d {
                l1 += (pred_coords[[i, k]] - targets[[j, k]]).abs();
            }
            cost[[i, j]] = lambda1 * l1 - lambda2 * fg_probs[i];
        }
    }
    Ok(cost)
}

/// Minimum-cost assignment of targets (columns) to predictions (rows) via
/// shortest augmenting paths with potentials.
///
/// Requires finite costs. When M > N the surplus targets are truncated with
/// a logged warning. Ties resolve by the fixed iteration order (ascending
/// target, then prediction index); unmatched predictions receive the dummy
/// slots in ascending index order.
pub fn hungarian(cost: &Array2<f64>) -> Result<MatchResult> {
    let (n, mut m) = cost.dim();
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite matching cost".into()));
    }
    if m > n {
        log::warn!("truncating {m} targets to {n} predictions");
        m = n;
    }
    if m == 0 {
        return Ok(MatchResult { sigma: (0..n).collect(), target_count: 0 });
    }

    // Rows: targets 1..=m, columns: predictions 1..=n (m <= n).
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; m + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut assigned_row = vec![0usize; n + 1]; // column j -> row, 0 = free
    let mut way = vec![0usize; n + 1];
    for i in 1..=m {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[j - 1, i0 - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut sigma = vec![usize::MAX; n];
    for j in 1..=n {
        if assigned_row[j] != 0 {
            sigma[j - 1] = assigned_row[j] - 1;
        }
    }
    let mut dummy = m;
    for s in sigma.iter_mut() {
        if *s == usize::MAX {
            *s = dummy;
            dummy += 1;
        }
    }
    Ok(MatchResult { sigma, target_count: m })
}

/// Total matched cost under an assignment (dummy slots contribute nothing).
pub fn assignment_cost(cost: &Array2<f64>, m: &MatchResult) -> f64 {
    m.sigma
        .iter()
        .enumerate()
        .filter(|(_, &s)| s < m.target_count)
        .map(|(i, &s)| cost[[i, s]])
        .sum()
}

/// Segmentation losses (Lreg, Lcls) on the tape.
///
/// Lcls is the mean 2-way cross entropy over all N predictions against the
/// matched/unmatched label; Lreg sums L1 over matched rows and divides by N.
pub fn seg_loss(
    tape: &mut Tape,
    coords: Var,
    score_logits: Var,
    target: &TrainingTarget,
    mres: &MatchResult,
) -> (Var, Var) {
    let n = tape.value2(coords).nrows();
    let d = tape.value2(coords).ncols();
    let mut reg_target = Array2::<f64>::zeros((n, d));
    let mut reg_weights = vec![0.0f64; n];
    let mut cls_labels = vec![0usize; n];
    let cls_weights = vec![1.0f64; n];
    for i in 0..n {
        if mres.is_matched(i) {
            let t = mres.sigma[i];
            for k in 0..d {
                reg_target[[i, k]] = target.coords[[t, k]];
            }
            reg_weights[i] = 1.0;
            cls_labels[i] = 1;
        }
    }
    let seg_reg = tape.l1_rows(coords, reg_target, &reg_weights, n as f64);
    let seg_cls = tape.ce_rows(score_logits, &cls_labels, &cls_weights, n as f64);
    (seg_reg, seg_cls)
}

/// Order cross entropy over matched predictions only (mean over matches;
/// zero when nothing matched).
pub fn order_loss(
    tape: &mut Tape,
    order_logits: Var,
    target: &TrainingTarget,
    mres: &MatchResult,
) -> Result<Var> {
    let (n, n_order) = tape.value2(order_logits).dim();
    let mut labels = vec![0usize; n];
    let mut weights = vec![0.0f64; n];
    for i in 0..n {
        if mres.is_matched(i) {
            let lab = target.orders[mres.sigma[i]];
            if lab >= n_order {
                return Err(Error::Label { label: lab, n_order });
            }
            labels[i] = lab;
            weights[i] = 1.0;
        }
    }
    let divisor = mres.matched_count().max(1) as f64;
    Ok(tape.ce_rows(order_logits, &labels, &weights, divisor))
}

/// Weighted combination per the loss recipe; returns the scalar plus the
/// detached component values.
pub fn total_loss(
    tape: &mut Tape,
    seg_reg: Var,
    seg_cls: Var,
    order: Var,
    cfg: &TrainConfig,
) -> (Var, LossReport) {
    let total = tape.lincomb(&[
        (seg_reg, cfg.alpha * cfg.lambda1),
        (seg_cls, cfg.alpha * cfg.lambda2),
        (order, cfg.beta),
    ]);
    let report = LossReport {
        total: tape.scalar(total),
        seg_reg: tape.scalar(seg_reg),
        seg_cls: tape.scalar(seg_cls),
        order: tape.scalar(order),
    };
    (total, report)
}

/// One prepared training sample: an image and its per-building supervision.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Array2<f64>,
    pub buildings: Vec<(RoiSpec, TrainingTarget)>,
}

/// Bipartite match for one decoded building, from detached values; the
/// match itself is never differentiated.
pub fn compute_match(
    model: &Model,
    tape: &Tape,
    fwd: &crate::model::RoiForward,
    target: &TrainingTarget,
    cfg: &TrainConfig,
) -> Result<MatchResult> {
    let coords_v = tape.value2(fwd.coords).to_owned();
    let probs = model.snapshot(tape, fwd).foreground_probs();
    let cost = matching_cost(&coords_v, &probs, &target.coords, cfg.lambda1, cfg.lambda2)?;
    hungarian(&cost)
}

/// All loss terms for one decoded building under a fixed match.
pub fn losses_with_match(
    tape: &mut Tape,
    fwd: &crate::model::RoiForward,
    target: &TrainingTarget,
    mres: &MatchResult,
    cfg: &TrainConfig,
) -> Result<(Var, LossReport)> {
    let (seg_reg, seg_cls) = seg_loss(tape, fwd.coords, fwd.score_logits, target, mres);
    let order = order_loss(tape, fwd.order_logits, target, mres)?;
    Ok(total_loss(tape, seg_reg, seg_cls, order, cfg))
}

/// Matching plus loss construction for one decoded building.
fn building_loss(
    model: &Model,
    tape: &mut Tape,
    fwd: &crate::model::RoiForward,
    target: &TrainingTarget,
    cfg: &TrainConfig,
) -> Result<(Var, LossReport)> {
    let mres = compute_match(model, tape, fwd, target, cfg)?;
    losses_with_match(tape, fwd, target, &mres, cfg)
}

/// Forward/backward over one sample; returns gradients, the summed loss
/// parts, and the number of buildings.
fn sample_grads(
    model: &Model,
    sample: &TrainSample,
    cfg: &TrainConfig,
) -> Result<(Vec<Option<ArrayD<f64>>>, LossReport, usize)> {
    let mut tape = Tape::new(&model.params);
    let feature = model.backbone_on_tape(&mut tape, &sample.image)?;
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut parts = LossReport { total: 0.0, seg_reg: 0.0, seg_cls: 0.0, order: 0.0 };
    for (roi, target) in &sample.buildings {
        let (fwd, aux) = model.decode_roi_full(&mut tape, feature, roi, cfg.aux_loss)?;
        let (loss, report) = building_loss(model, &mut tape, &fwd, target, cfg)?;
        terms.push((loss, 1.0));
        parts.total += report.total;
        parts.seg_reg += report.seg_reg;
        parts.seg_cls += report.seg_cls;
        parts.order += report.order;
        // Experimental: each intermediate block contributes a full extra loss.
        for a in &aux {
            let (aux_loss_v, _) = building_loss(model, &mut tape, a, target, cfg)?;
            terms.push((aux_loss_v, 1.0));
        }
    }
    if terms.is_empty() {
        return Ok((model.zero_grads(), parts, 0));
    }
    let sum = tape.lincomb(&terms);
    if !tape.scalar(sum).is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss: parts total={} seg_reg={} seg_cls={} order={}",
            parts.total, parts.seg_reg, parts.seg_cls, parts.order
        )));
    }
    let grads = tape.backward(sum);
    Ok((grads, parts, sample.buildings.len()))
}

/// One optimizer step over a prepared batch. Per-sample gradients are
/// computed in parallel and reduced in sample order, so results do not
/// depend on scheduling.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[TrainSample],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossReport> {
    let results: Vec<Result<(Vec<Option<ArrayD<f64>>>, LossReport, usize)>> = batch
        .par_iter()
        .map(|sample| sample_grads(model, sample, cfg))
        .collect();

    let mut grads = model.zero_grads();
    let mut parts = LossReport { total: 0.0, seg_reg: 0.0, seg_cls: 0.0, order: 0.0 };
    let mut buildings = 0usize;
    for r in results {
        let (g, p, b) = r?;
        for (slot, gi) in grads.iter_mut().zip(g) {
            match (slot.as_mut(), gi) {
                (Some(acc), Some(gi)) => *acc += &gi,
                (None, Some(gi)) => *slot = Some(gi),
                _ => {}
            }
        }
        parts.total += p.total;
        parts.seg_reg += p.seg_reg;
        parts.seg_cls += p.seg_cls;
        parts.order += p.order;
        buildings += b;
    }
    if buildings == 0 {
        return Err(Error::Input("batch contains no buildings".into()));
    }
    let scale = 1.0 / buildings as f64;
    for g in grads.iter_mut().flatten() {
        *g *= scale;
    }
    parts.total *= scale;
    parts.seg_reg *= scale;
    parts.seg_cls *= scale;
    parts.order *= scale;
    opt.step(&mut model.params, &grads, lr);
    Ok(parts)
}

/// Deterministic ROI jitter and target construction for one scene.
pub fn prepare_sample(
    scene: &SceneRecord,
    model_cfg: &crate::model::ModelConfig,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<TrainSample> {
    let image = image_to_array(&scene.image);
    let (h, w) = image.dim();
    let mut buildings = Vec::with_capacity(scene.annotations.len());
    for (bi, ann) in scene.annotations.iter().enumerate() {
        let mut rng = rng_for(
            cfg.seed,
            &[tag("roi-jitter"), epoch as u64, scene.image_id, bi as u64],
        );
        let roi = make_roi(&ann.bbox, cfg.expansion, Some(&mut rng), w as f64, h as f64)?;
        let target = make_targets(ann, &roi, model_cfg.kind, model_cfg.order_classes)?;
        buildings.push((roi, target));
    }
    Ok(TrainSample { image, buildings })
}

/// Run inference over scenes with ground-truth boxes; returns predictions,
/// ground truth, sizes, and the rejected-building count.
pub fn predict_scenes(
    model: &Model,
    scenes: &[SceneRecord],
) -> Result<(Vec<InstancePrediction>, Vec<GroundTruth>, ImageSizes, usize)> {
    let outputs: Vec<Result<(Vec<InstancePrediction>, usize)>> = scenes
        .par_iter()
        .map(|scene| {
            let image = image_to_array(&scene.image);
            let (h, w) = image.dim();
            let mut preds = Vec::new();
            let mut rejected = 0usize;
            if scene.annotations.is_empty() {
                return Ok((preds, rejected));
            }
            let rois: Vec<RoiSpec> = scene
                .annotations
                .iter()
                .map(|a| make_roi(&a.bbox, 1.1, None, w as f64, h as f64))
                .collect::<Result<_>>()?;
            let raw = model.forward(&image, &rois)?;
            for (pred, roi) in raw.iter().zip(&rois) {
                match model.infer_polygons(pred, roi) {
                    Ok(poly) => preds.push(InstancePrediction {
                        image_id: scene.image_id,
                        ring: poly.ring,
                        score: poly.score,
                    }),
                    Err(_) => rejected += 1,
                }
            }
            Ok((preds, rejected))
        })
        .collect();

    let mut preds = Vec::new();
    let mut rejected = 0usize;
    for o in outputs {
        let (p, r) = o?;
        preds.extend(p);
        rejected += r;
    }
    let mut gts = Vec::new();
    let mut sizes = ImageSizes::new();
    for scene in scenes {
        let (w, h) = scene.image.dimensions();
        sizes.insert(scene.image_id, (h as usize, w as usize));
        for a in &scene.annotations {
            gts.push(GroundTruth { image_id: scene.image_id, ring: a.ring.clone() });
        }
    }
    Ok((preds, gts, sizes, rejected))
}

/// Evaluate a model on scenes using ground-truth boxes.
pub fn evaluate_scenes(model: &Model, scenes: &[SceneRecord]) -> Result<MetricsReport> {
    let (preds, gts, sizes, _) = predict_scenes(model, scenes)?;
    eval::evaluate(&preds, &gts, &sizes, &eval::coco_iou_thresholds())
}

/// Output locations for [`fit`]; all optional.
#[derive(Debug, Clone, Default)]
pub struct FitSinks {
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub manifest_hash: Option<String>,
    pub config_hash: Option<String>,
}

#[derive(Debug)]
pub struct FitReport {
    pub checkpoints: Vec<PathBuf>,
    pub steps: u64,
    pub last_metrics: Option<MetricsReport>,
}

#[derive(Serialize)]
struct StepLog<'a> {
    step: u64,
    epoch: usize,
    lr: f64,
    #[serde(flatten)]
    loss: &'a LossReport,
    wall_ms: u128,
}

fn write_checkpoint(
    dir: &Path,
    model: &Model,
    opt: &AdamW,
    epoch: usize,
    step: u64,
    sinks: &FitSinks,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut meta = checkpoint::CheckpointMeta::new(model.cfg.clone());
    meta.epoch = epoch;
    meta.step = step;
    meta.manifest_hash = sinks.manifest_hash.clone();
    meta.config_hash = sinks.config_hash.clone();
    let path = dir.join(format!("ckpt_epoch{epoch:04}.ckpt"));
    checkpoint::save(&path, model, &meta, Some(opt))?;
    Ok(path)
}

/// Epoch loop with seeded shuffling, periodic checkpoints, and optional
/// validation. Resumable: `start_epoch` > 0 continues bit-identically when
/// model and optimizer state come from the matching checkpoint.
pub fn fit(
    model: &mut Model,
    opt: &mut AdamW,
    scenes: &[SceneRecord],
    val: &[SceneRecord],
    cfg: &TrainConfig,
    start_epoch: usize,
    sinks: &FitSinks,
) -> Result<FitReport> {
    if scenes.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let mut log_file = match &sinks.log_path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)?;
            }
            Some(std::fs::OpenOptions::new().create(true).append(true).open(p)?)
        }
        None => None,
    };
    let mut metrics_file = match &sinks.metrics_path {
        Some(p) => {
            let fresh = !p.exists();
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(p)?;
            if fresh {
                writeln!(f, "epoch,map,ap50,ap75,ar100")?;
            }
            Some(f)
        }
        None => None,
    };

    let steps_per_epoch = scenes.len().div_ceil(cfg.batch_size);
    let mut checkpoints = Vec::new();
    let mut step = (start_epoch * steps_per_epoch) as u64;
    if start_epoch == 0 {
        if let Some(dir) = &sinks.checkpoint_dir {
            checkpoints.push(write_checkpoint(dir, model, opt, 0, 0, sinks)?);
        }
    }

    let start = std::time::Instant::now();
    let mut last_metrics = None;
    for epoch in start_epoch..cfg.epochs {
        let lr = match cfg.lr_drop_epoch {
            Some(drop) if epoch >= drop => cfg.lr * 0.1,
            _ => cfg.lr,
        };
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut rng = rng_for(cfg.seed, &[tag("shuffle"), epoch as u64]);
        shuffle(&mut order, &mut rng);

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainSample> = chunk
                .iter()
                .map(|&i| prepare_sample(&scenes[i], &model.cfg, cfg, epoch))
                .collect::<Result<_>>()?;
            let report = train_step(model, opt, &batch, cfg, lr)?;
            step += 1;
            if let Some(f) = &mut log_file {
                let line = StepLog {
                    step,
                    epoch,
                    lr,
                    loss: &report,
                    wall_ms: start.elapsed().as_millis(),
                };
                writeln!(f, "{}", serde_json::to_string(&line)?)?;
            }
        }

        let completed = epoch + 1;
        if completed % cfg.checkpoint_every_epochs.max(1) == 0 || completed == cfg.epochs {
            if let Some(dir) = &sinks.checkpoint_dir {
                checkpoints.push(write_checkpoint(dir, model, opt, completed, step, sinks)?);
            }
        }
        if cfg.eval_every_epochs > 0 && !val.is_empty() && completed % cfg.eval_every_epochs == 0 {
            let metrics = evaluate_scenes(model, val)?;
            if let Some(f) = &mut metrics_file {
                writeln!(
                    f,
                    "{completed},{},{},{},{}",
                    metrics.map, metrics.ap50, metrics.ap75, metrics.ar100
                )?;
            }
            last_metrics = Some(metrics);
        }
    }
    Ok(FitReport { checkpoints, steps: step, last_metrics })
}

/// Fisher-Yates with the crate RNG (deterministic given the seed path).
fn shuffle(items: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
