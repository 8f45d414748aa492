//! Synthetic rectilinear-building scenes, COCO ingestion, ROI construction,
//! and training-target building.

pub mod coco;

use image::GrayImage;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::rasterize;
use crate::geom::{
    assign_orders, extract_primitives, normalize_ring, sample_contour, Point2, PolygonRing,
    PrimitiveKind,
};
use crate::util::{rng_for, tag};

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn from_ring(ring: &PolygonRing) -> Self {
        let (x0, y0, x1, y1) = ring.bbox();
        Self { x0, y0, x1, y1 }
    }

    /// Scale about the center by `ratio`.
    pub fn expand(&self, ratio: f64) -> Self {
        let cx = (self.x0 + self.x1) / 2.0;
        let cy = (self.y0 + self.y1) / 2.0;
        let hw = self.width() / 2.0 * ratio;
        let hh = self.height() / 2.0 * ratio;
        Self { x0: cx - hw, y0: cy - hh, x1: cx + hw, y1: cy + hh }
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x0: self.x0.clamp(0.0, width),
            y0: self.y0.clamp(0.0, height),
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
        }
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn contains_point(&self, p: Point2, eps: f64) -> bool {
        p.x >= self.x0 - eps && p.x <= self.x1 + eps && p.y >= self.y0 - eps && p.y <= self.y1 + eps
    }
}

/// Region of interest: an expanded, image-clipped building box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub bbox: BBox,
    /// The effective expansion ratio that produced `bbox`.
    pub expansion: f64,
}

/// Ground-truth ring plus its tight bounding box.
#[derive(Debug, Clone)]
pub struct Annotation {
    pub ring: PolygonRing,
    pub bbox: BBox,
}

impl Annotation {
    pub fn from_ring(ring: PolygonRing) -> Self {
        let bbox = BBox::from_ring(&ring);
        Self { ring, bbox }
    }
}

/// Synthetic scene generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub buildings_min: usize,
    pub buildings_max: usize,
    /// Even vertex counts for rectilinear rings, inclusive.
    pub vertex_count_min: usize,
    pub vertex_count_max: usize,
    /// Rotation range in degrees, [0, rotation_max_deg].
    pub rotation_max_deg: f64,
    /// Fraction of buildings receiving a synthetic occluder patch.
    pub occlusion_rate: f64,
    /// Standard deviation of additive pixel noise (fraction of dynamic range).
    pub texture_noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            buildings_min: 1,
            buildings_max: 4,
            vertex_count_min: 4,
            vertex_count_max: 12,
            rotation_max_deg: 90.0,
            occlusion_rate: 0.3,
            texture_noise: 0.05,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 64 {
            return Err(Error::Input("image_size must be >= 64".into()));
        }
        if self.buildings_min < 1 || self.buildings_min > self.buildings_max {
            return Err(Error::Input("empty buildings range".into()));
        }
        if self.vertex_count_min < 4
            || self.vertex_count_min > self.vertex_count_max
            || self.vertex_count_max > 12
            || self.vertex_count_min % 2 != 0
            || self.vertex_count_max % 2 != 0
        {
            return Err(Error::Input(
                "vertex counts must be even and within [4, 12]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(Error::Input("occlusion_rate must be in [0, 1]".into()));
        }
        if self.texture_noise < 0.0 {
            return Err(Error::Input("texture_noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// One generated scene: the image plus un-occluded ground-truth annotations.
/// `occluded[i]` records whether building i received an occluder patch.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub image: GrayImage,
    pub annotations: Vec<Annotation>,
    pub occluded: Vec<bool>,
}

const PLACEMENT_MARGIN: f64 = 2.0;
const MIN_NOTCH: f64 = 4.0;
const MAX_ATTEMPTS: usize = 1000;

/// Random rectilinear ring: a rectangle with L-shaped cuts at `notches`
/// distinct corners, rotated and translated into the image.
fn random_building(
    rng: &mut ChaCha8Rng,
    cfg: &SceneConfig,
    vertex_count: usize,
) -> Vec<Point2> {
    let w = rng.random_range(18.0..44.0);
    let h = rng.random_range(18.0..44.0);
    let notches = (vertex_count - 4) / 2;
    let mut corners = [false; 4];
    let mut remaining = notches;
    while remaining > 0 {
        let c = rng.random_range(0..4);
        if !corners[c] {
            corners[c] = true;
            remaining -= 1;
        }
    }
    let notch = |rng: &mut ChaCha8Rng, span: f64| -> f64 {
        rng.random_range(MIN_NOTCH..(span / 2.0 - MIN_NOTCH).max(MIN_NOTCH + 0.1))
    };
    let mut pts: Vec<Point2> = Vec::with_capacity(vertex_count);
    // Walk clockwise on screen: top-left, top-right, bottom-right, bottom-left.
    if corners[0] {
        let (dx, dy) = (notch(rng, w), notch(rng, h));
        pts.extend([Point2::new(0.0, dy), Point2::new(dx, dy), Point2::new(dx, 0.0)]);
    } else {
        pts.push(Point2::new(0.0, 0.0));
    }
    if corners[1] {
        let (dx, dy) = (notch(rng, w), notch(rng, h));
        pts.extend([
            Point2::new(w - dx, 0.0),
            Point2::new(w - dx, dy),
            Point2::new(w, dy),
        ]);
    } else {
        pts.push(Point2::new(w, 0.0));
    }
    if corners[2] {
        let (dx, dy) = (notch(rng, w), notch(rng, h));
        pts.extend([
            Point2::new(w, h - dy),
            Point2::new(w - dx, h - dy),
            Point2::new(w - dx, h),
        ]);
    } else {
        pts.push(Point2::new(w, h));
    }
    if corners[3] {
        let (dx, dy) = (notch(rng, w), notch(rng, h));
        pts.extend([
            Point2::new(dx, h),
            Point2::new(dx, h - dy),
            Point2::new(0.0, h - dy),
        ]);
    } else {
        pts.push(Point2::new(0.0, h));
    }

    // Rotate about the rectangle center.
    let theta = rng.random_range(0.0..=cfg.rotation_max_deg).to_radians();
    let (s, c) = theta.sin_cos();
    let (cx, cy) = (w / 2.0, h / 2.0);
    for p in &mut pts {
        let (dx, dy) = (p.x - cx, p.y - cy);
        *p = Point2::new(cx + c * dx - s * dy, cy + s * dx + c * dy);
    }
    pts
}

/// Deterministic scene synthesis: a function of (config.seed, index) only.
pub fn generate_scene(config: &SceneConfig, index: u64) -> Result<SceneSample> {
    config.validate()?;
    let mut rng = rng_for(config.seed, &[tag("scene"), index]);
    let size = config.image_size;
    let size_f = size as f64;

    let n_buildings = rng.random_range(config.buildings_min..=config.buildings_max);
    let mut rings: Vec<PolygonRing> = Vec::with_capacity(n_buildings);
    let mut guard_boxes: Vec<BBox> = Vec::with_capacity(n_buildings);
    let mut attempts = 0usize;
    while rings.len() < n_buildings {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::GenerationFailure {
                attempts,
                reason: format!("placed {}/{} buildings", rings.len(), n_buildings),
            });
        }
        let evens: Vec<usize> = (config.vertex_count_min..=config.vertex_count_max)
            .filter(|v| v % 2 == 0)
            .collect();
        let v_count = evens[rng.random_range(0..evens.len())];
        let local = random_building(&mut rng, config, v_count);
        let (bx0, by0, bx1, by1) = local.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |acc, p| (acc.0.min(p.x), acc.1.min(p.y), acc.2.max(p.x), acc.3.max(p.y)),
        );
        let (bw, bh) = (bx1 - bx0, by1 - by0);
        if bw > size_f - 2.0 * PLACEMENT_MARGIN || bh > size_f - 2.0 * PLACEMENT_MARGIN {
            continue;
        }
        let tx = rng.random_range((PLACEMENT_MARGIN - bx0)..(size_f - PLACEMENT_MARGIN - bx1));
        let ty = rng.random_range((PLACEMENT_MARGIN - by0)..(size_f - PLACEMENT_MARGIN - by1));
        let placed: Vec<Point2> = local.iter().map(|p| p.translate(tx, ty)).collect();
        let ring = normalize_ring(&placed)?;
        // Keep jittered training ROIs of distinct buildings disjoint.
        let guard = BBox::from_ring(&ring).expand(1.25);
        if guard_boxes.iter().any(|g| g.intersects(&guard)) {
            continue;
        }
        guard_boxes.push(guard);
        rings.push(ring);
    }

    // Raster pass: background, then each building with a boundary accent.
    let background = rng.random_range(0.10..0.35);
    let mut pixels = vec![background; size * size];
    let mut occluded = vec![false; rings.len()];
    let mut occluder_jobs: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
    for (bi, ring) in rings.iter().enumerate() {
        let fill = rng.random_range(0.55..0.90);
        let mask = rasterize(ring, size, size);
        for (i, &inside) in mask.data.iter().enumerate() {
            if inside {
                pixels[i] = fill;
            }
        }
        let edge = fill * 0.65;
        draw_ring(&mut pixels, size, ring, edge);

        // Occluders cover a boundary vertex; drawn after all fills so they
        // genuinely hide geometry. Annotations keep the true ring.
        if rng.random_range(0.0..1.0) < config.occlusion_rate {
            occluded[bi] = true;
            let vs = ring.vertices();
            let v = vs[rng.random_range(0..vs.len())];
            let side = rng.random_range(7.0..13.0);
            let cx = v.x + rng.random_range(-2.0..2.0);
            let cy = v.y + rng.random_range(-2.0..2.0);
            let shade = rng.random_range(0.25..0.75);
            occluder_jobs.push((bi, cx, cy, side, shade));
        }
    }
    for &(_, cx, cy, side, shade) in &occluder_jobs {
        let x0 = ((cx - side / 2.0).floor().max(0.0)) as usize;
        let y0 = ((cy - side / 2.0).floor().max(0.0)) as usize;
        let x1 = ((cx + side / 2.0).ceil().min(size_f)) as usize;
        let y1 = ((cy + side / 2.0).ceil().min(size_f)) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                pixels[y * size + x] = shade;
            }
        }
    }

    // Additive noise last.
    if config.texture_noise > 0.0 {
        let noise = Normal::new(0.0, config.texture_noise).expect("valid noise sigma");
        for p in &mut pixels {
            *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    let mut image = GrayImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let v = (pixels[y * size + x] * 255.0).round() as u8;
            image.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    let annotations = rings.into_iter().map(Annotation::from_ring).collect();
    Ok(SceneSample { image, annotations, occluded })
}

fn draw_ring(pixels: &mut [f64], size: usize, ring: &PolygonRing, value: f64) {
    let v = ring.vertices();
    let n = v.len();
    for i in 0..n {
        let a = v[i];
        let b = v[(i + 1) % n];
        let len = a.dist(b);
        let steps = (len * 2.0).ceil() as usize + 1;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (a.x + t * (b.x - a.x)).round() as isize;
            let y = (a.y + t * (b.y - a.y)).round() as isize;
            if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
                pixels[y as usize * size + x as usize] = value;
            }
        }
    }
}

/// Jitter range for the training-time ROI expansion draw.
pub fn jitter_range(expansion: f64) -> (f64, f64) {
    (1.0, (expansion - 1.0) * 2.0 + 1.0)
}

/// Expand a building box about its center and clip to the image.
///
/// With an RNG (training) the effective ratio is drawn uniformly from
/// [`jitter_range`]; without one (inference) it is exactly `expansion`.
pub fn make_roi(
    bbox: &BBox,
    expansion: f64,
    rng: Option<&mut ChaCha8Rng>,
    image_width: f64,
    image_height: f64,
) -> Result<RoiSpec> {
    if expansion < 1.0 {
        return Err(Error::Input(format!("expansion {expansion} < 1.0")));
    }
    if bbox.area() <= 0.0 {
        return Err(Error::DegenerateBox(format!("{bbox:?}")));
    }
    let ratio = match rng {
        Some(r) => {
            let (lo, hi) = jitter_range(expansion);
            r.random_range(lo..=hi)
        }
        None => expansion,
    };
    let expanded = bbox.expand(ratio).clip(image_width, image_height);
    if expanded.area() <= 0.0 {
        return Err(Error::DegenerateBox("ROI clipped to nothing".into()));
    }
    Ok(RoiSpec { bbox: expanded, expansion: ratio })
}

/// Ground-truth primitives in ROI-normalized coordinates plus order labels.
#[derive(Debug, Clone)]
pub struct TrainingTarget {
    /// M x 2n, rows are [x0, y0, x1, y1, ...] in [0, 1].
    pub coords: Array2<f64>,
    pub orders: Vec<usize>,
}

impl TrainingTarget {
    pub fn count(&self) -> usize {
        self.coords.nrows()
    }
}

/// Build the supervision for one annotated building inside its ROI.
///
/// Orders are computed in original pixel coordinates before normalization.
pub fn make_targets(
    annotation: &Annotation,
    roi: &RoiSpec,
    kind: PrimitiveKind,
    n_order: usize,
) -> Result<TrainingTarget> {
    let ring = &annotation.ring;
    for v in ring.vertices() {
        if !roi.bbox.contains_point(*v, 1e-9) {
            return Err(Error::TargetConstruction(format!(
                "ring vertex {v:?} outside ROI {:?}",
                roi.bbox
            )));
        }
    }
    let prims = extract_primitives(ring, kind);
    let sampled = sample_contour(ring, n_order)?;
    let ordered = assign_orders(&prims, &sampled)?;

    let n = kind.points_per_primitive();
    let (w, h) = (roi.bbox.width(), roi.bbox.height());
    let mut coords = Array2::<f64>::zeros((prims.len(), 2 * n));
    for (i, p) in ordered.primitives().iter().enumerate() {
        for (j, pt) in p.points().iter().enumerate() {
            coords[[i, 2 * j]] = (pt.x - roi.bbox.x0) / w;
            coords[[i, 2 * j + 1]] = (pt.y - roi.bbox.y0) / h;
        }
    }
    Ok(TrainingTarget { coords, orders: ordered.orders().to_vec() })
}

/// Map ROI-normalized coordinates back to pixels.
pub fn denormalize_point(roi: &RoiSpec, nx: f64, ny: f64) -> Point2 {
    Point2::new(roi.bbox.x0 + nx * roi.bbox.width(), roi.bbox.y0 + ny * roi.bbox.height())
}

/// Convert a grayscale image to a [0, 1] float grid (rows = y).
pub fn image_to_array(img: &GrayImage) -> Array2<f64> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
    })
}

/// A stored scene: image plus ground truth, the unit of a dataset.
#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub image_id: u64,
    pub image: GrayImage,
    pub annotations: Vec<Annotation>,
}

/// Generate `count` scenes in memory, ids 0..count.
pub fn synthetic_records(cfg: &SceneConfig, count: usize) -> Result<Vec<SceneRecord>> {
    (0..count as u64)
        .map(|i| {
            let s = generate_scene(cfg, i)?;
            Ok(SceneRecord { image_id: i, image: s.image, annotations: s.annotations })
        })
        .collect()
}

/// Manifest describing a persisted dataset, for reproducibility checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub generator: String,
    pub config: SceneConfig,
    pub count: usize,
    /// Hash of the producing run configuration, when generated via the CLI.
    pub config_hash: Option<String>,
}

pub const MANIFEST_VERSION: &str = "p2p-dataset-v1";

/// Write a synthetic dataset: PNG images, one COCO annotation file, and a
/// manifest. Output bytes are a function of the configuration alone.
pub fn write_dataset_dir(
    cfg: &SceneConfig,
    count: usize,
    dir: &std::path::Path,
    config_hash: Option<String>,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut images = Vec::with_capacity(count);
    let mut annotations = Vec::new();
    let mut ann_id = 1u64;
    for i in 0..count as u64 {
        let scene = generate_scene(cfg, i)?;
        let file_name = format!("img_{i:05}.png");
        scene.image.save(dir.join(&file_name))?;
        images.push(coco::CocoImage {
            id: i,
            file_name,
            width: cfg.image_size as u32,
            height: cfg.image_size as u32,
        });
        for ann in &scene.annotations {
            annotations.push(coco::CocoAnnotation {
                id: ann_id,
                image_id: i,
                category_id: 1,
                segmentation: coco::ring_to_segmentation(&ann.ring),
                bbox: [
                    ann.bbox.x0,
                    ann.bbox.y0,
                    ann.bbox.width(),
                    ann.bbox.height(),
                ],
                area: crate::geom::signed_area(&ann.ring),
                iscrowd: 0,
            });
            ann_id += 1;
        }
    }
    let dataset = coco::CocoDataset {
        images,
        annotations,
        categories: vec![coco::CocoCategory { id: 1, name: "building".into() }],
    };
    std::fs::write(dir.join("annotations.json"), serde_json::to_string_pretty(&dataset)?)?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.into(),
        generator: "synthetic-rectilinear".into(),
        config: cfg.clone(),
        count,
        config_hash,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Load a persisted dataset directory. Returns the scenes, manifest, and
/// the SHA-256 of the manifest file bytes.
pub fn load_dataset_dir(
    dir: &std::path::Path,
) -> Result<(Vec<SceneRecord>, DatasetManifest, String)> {
    let manifest_bytes = std::fs::read(dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_slice(&manifest_bytes)?;
    let manifest_hash = crate::util::sha256_hex(&manifest_bytes);
    let loaded = coco::load_coco(&dir.join("annotations.json"))?;
    let mut scenes = Vec::with_capacity(loaded.entries.len());
    let mut missing = Vec::new();
    for (img, annotations) in loaded.entries {
        let path = dir.join(&img.file_name);
        if !path.exists() {
            missing.push(img.id);
            continue;
        }
        let image = image::open(&path)?.to_luma8();
        scenes.push(SceneRecord { image_id: img.id, image, annotations });
    }
    if !missing.is_empty() {
        return Err(Error::MissingImage(missing));
    }
    Ok((scenes, manifest, manifest_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::signed_area;

    #[test]
    fn scene_is_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg, 3).unwrap();
        let b = generate_scene(&cfg, 3).unwrap();
        assert_eq!(a.image.as_raw(), b.image.as_raw());
        assert_eq!(a.annotations.len(), b.annotations.len());
        for (x, y) in a.annotations.iter().zip(&b.annotations) {
            assert_eq!(x.ring.vertices(), y.ring.vertices());
        }
        let c = generate_scene(&cfg, 4).unwrap();
        assert_ne!(a.image.as_raw(), c.image.as_raw());
    }

    #[test]
    fn rectangles_only_when_range_is_four() {
        let cfg = SceneConfig {
            buildings_min: 1,
            buildings_max: 1,
            vertex_count_min: 4,
            vertex_count_max: 4,
            ..Default::default()
        };
        for i in 0..20 {
            let s = generate_scene(&cfg, i).unwrap();
            assert_eq!(s.annotations.len(), 1);
            assert_eq!(s.annotations[0].ring.len(), 4);
        }
    }

    #[test]
    fn rings_are_normalized_and_inside_image() {
        let cfg = SceneConfig::default();
        for i in 0..30 {
            let s = generate_scene(&cfg, i).unwrap();
            for a in &s.annotations {
                assert!(signed_area(&a.ring) > 0.0);
                for v in a.ring.vertices() {
                    assert!(v.x >= 0.0 && v.x <= cfg.image_size as f64);
                    assert!(v.y >= 0.0 && v.y <= cfg.image_size as f64);
                }
            }
        }
    }

    #[test]
    fn make_roi_inference_matches_expansion() {
        let b = BBox::new(10.0, 10.0, 20.0, 20.0);
        let roi = make_roi(&b, 1.1, None, 128.0, 128.0).unwrap();
        assert!((roi.bbox.x0 - 9.5).abs() < 1e-12);
        assert!((roi.bbox.y0 - 9.5).abs() < 1e-12);
        assert!((roi.bbox.x1 - 20.5).abs() < 1e-12);
        assert!((roi.bbox.y1 - 20.5).abs() < 1e-12);
    }

    #[test]
    fn make_roi_ratio_one_is_identity() {
        let b = BBox::new(10.0, 10.0, 20.0, 20.0);
        let roi = make_roi(&b, 1.0, None, 128.0, 128.0).unwrap();
        assert_eq!(roi.bbox, b);
    }

    #[test]
    fn make_roi_rejects_zero_area() {
        let b = BBox::new(10.0, 10.0, 10.0, 20.0);
        assert!(matches!(
            make_roi(&b, 1.1, None, 128.0, 128.0),
            Err(Error::DegenerateBox(_))
        ));
    }

    #[test]
    fn targets_square_filling_roi() {
        let ring = normalize_ring(&[
            Point2::new(10.0, 10.0),
            Point2::new(20.0, 10.0),
            Point2::new(20.0, 20.0),
            Point2::new(10.0, 20.0),
        ])
        .unwrap();
        let ann = Annotation::from_ring(ring);
        let roi = RoiSpec { bbox: BBox::new(10.0, 10.0, 20.0, 20.0), expansion: 1.0 };
        let t = make_targets(&ann, &roi, PrimitiveKind::Vertex, 36).unwrap();
        assert_eq!(t.count(), 4);
        let mut got: Vec<(f64, f64)> =
            (0..4).map(|i| (t.coords[[i, 0]], t.coords[[i, 1]])).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]);

        let tc = make_targets(&ann, &roi, PrimitiveKind::Corner, 36).unwrap();
        assert_eq!(tc.count(), 4);
        for i in 0..4 {
            let (mx, my) = (tc.coords[[i, 2]], tc.coords[[i, 3]]);
            assert!((mx == 0.0 || mx == 1.0) && (my == 0.0 || my == 1.0));
        }
    }

    #[test]
    fn targets_reject_ring_outside_roi() {
        let ring = normalize_ring(&[
            Point2::new(10.0, 10.0),
            Point2::new(30.0, 10.0),
            Point2::new(30.0, 20.0),
            Point2::new(10.0, 20.0),
        ])
        .unwrap();
        let ann = Annotation::from_ring(ring);
        let roi = RoiSpec { bbox: BBox::new(10.0, 10.0, 20.0, 20.0), expansion: 1.0 };
        assert!(make_targets(&ann, &roi, PrimitiveKind::Vertex, 36).is_err());
    }

    #[test]
    fn occlusion_rate_roughly_matches() {
        let cfg = SceneConfig { occlusion_rate: 0.3, ..Default::default() };
        let mut total = 0usize;
        let mut occluded = 0usize;
        for i in 0..300 {
            let s = generate_scene(&cfg, i).unwrap();
            total += s.occluded.len();
            occluded += s.occluded.iter().filter(|&&o| o).count();
        }
        let rate = occluded as f64 / total as f64;
        assert!((rate - 0.3).abs() < 0.06, "rate {rate}");
    }
}
