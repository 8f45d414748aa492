//! Pure geometric core: rings, primitives, contour sampling, order labels,
//! and primitive-to-polygon assembly.
//!
//! Conventions: image frame with +x right and +y down. A ring is
//! "screen-clockwise" when its shoelace sum is positive in this frame; all
//! normalized rings satisfy that. Cyclic order labels start at the boundary
//! point hit by the upward ray from the ring centroid (the 12 o'clock point)
//! and advance along the ring direction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two consecutive vertices closer than this are collapsed.
pub const DUP_EPS: f64 = 1e-9;

/// Line-primitive assembly is exact down to this edge length.
pub const MIN_EDGE_LEN: f64 = 1e-6;

/// A point in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn midpoint(self, other: Point2) -> Point2 {
        Point2::new((self.x + other.x) / 2.0, (self.y + other.y) / 2.0)
    }

    pub fn translate(self, dx: f64, dy: f64) -> Point2 {
        Point2::new(self.x + dx, self.y + dy)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// An ordered, orientation-normalized closed contour (implicitly closed).
///
/// Construct via [`normalize_ring`]; the constructor guarantees at least 3
/// vertices, no consecutive duplicates, and positive shoelace sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonRing {
    vertices: Vec<Point2>,
}

impl PolygonRing {
    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        false // a constructed ring always has >= 3 vertices
    }

    pub fn into_vertices(self) -> Vec<Point2> {
        self.vertices
    }

    /// Axis-aligned tight bounds as (x_min, y_min, x_max, y_max).
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            b.0 = b.0.min(v.x);
            b.1 = b.1.min(v.y);
            b.2 = b.2.max(v.x);
            b.3 = b.3.max(v.y);
        }
        b
    }

    pub fn translate(&self, dx: f64, dy: f64) -> PolygonRing {
        PolygonRing {
            vertices: self.vertices.iter().map(|v| v.translate(dx, dy)).collect(),
        }
    }

    pub fn perimeter(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| self.vertices[i].dist(self.vertices[(i + 1) % n]))
            .sum()
    }

    /// Area centroid (exact for simple polygons; may lie outside a
    /// non-convex ring).
    pub fn centroid(&self) -> Point2 {
        let v = &self.vertices;
        let n = v.len();
        let mut a2 = 0.0; // twice the signed area
        let mut cx = 0.0;
        let mut cy = 0.0;
        for i in 0..n {
            let j = (i + 1) % n;
            let cross = v[i].x * v[j].y - v[j].x * v[i].y;
            a2 += cross;
            cx += (v[i].x + v[j].x) * cross;
            cy += (v[i].y + v[j].y) * cross;
        }
        if a2.abs() < 1e-30 {
            // Fallback for near-zero area: vertex mean.
            let inv = 1.0 / n as f64;
            return Point2::new(
                v.iter().map(|p| p.x).sum::<f64>() * inv,
                v.iter().map(|p| p.y).sum::<f64>() * inv,
            );
        }
        Point2::new(cx / (3.0 * a2), cy / (3.0 * a2))
    }
}

/// Shoelace sum of a raw vertex sequence (twice the signed area).
fn shoelace(vertices: &[Point2]) -> f64 {
    let n = vertices.len();
    (0..n)
        .map(|i| {
            let j = (i + 1) % n;
            vertices[i].x * vertices[j].y - vertices[j].x * vertices[i].y
        })
        .sum()
}

/// Build a normalized ring from a raw vertex sequence.
///
/// Consecutive duplicates (within [`DUP_EPS`], including the wrap-around
/// pair) are removed, and the orientation is reversed when the shoelace sum
/// is not positive. Vertex values are otherwise unchanged.
pub fn normalize_ring(raw: &[Point2]) -> Result<PolygonRing> {
    for v in raw {
        if !v.is_finite() {
            return Err(Error::DegenerateRing("non-finite vertex".into()));
        }
    }
    let mut vertices: Vec<Point2> = Vec::with_capacity(raw.len());
    for &v in raw {
        if vertices.last().is_none_or(|&p| p.dist(v) > DUP_EPS) {
            vertices.push(v);
        }
    }
    // Wrap-around duplicate.
    while vertices.len() >= 2 && vertices[0].dist(*vertices.last().unwrap()) <= DUP_EPS {
        vertices.pop();
    }
    if vertices.len() < 3 {
        return Err(Error::DegenerateRing(format!(
            "{} distinct vertices after duplicate collapse",
            vertices.len()
        )));
    }
    if shoelace(&vertices) <= 0.0 {
        vertices.reverse();
    }
    Ok(PolygonRing { vertices })
}

/// Signed area; positive for normalized rings.
pub fn signed_area(ring: &PolygonRing) -> f64 {
    shoelace(&ring.vertices) / 2.0
}

/// The kind of geometric primitive used to decompose a contour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Vertex,
    Line,
    Corner,
}

impl PrimitiveKind {
    /// Number of points making up one primitive of this kind.
    pub const fn points_per_primitive(self) -> usize {
        match self {
            PrimitiveKind::Vertex => 1,
            PrimitiveKind::Line => 2,
            PrimitiveKind::Corner => 3,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Vertex => "vertex",
            PrimitiveKind::Line => "line",
            PrimitiveKind::Corner => "corner",
        }
    }
}

impl std::str::FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vertex" => Ok(PrimitiveKind::Vertex),
            "line" => Ok(PrimitiveKind::Line),
            "corner" => Ok(PrimitiveKind::Corner),
            other => Err(Error::Input(format!("unknown primitive kind '{other}'"))),
        }
    }
}

/// A vertex (1 point), line (2 points), or corner (3 points).
///
/// For corners, the middle point is the corner vertex and the outer points
/// are its two ring neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    Vertex([Point2; 1]),
    Line([Point2; 2]),
    Corner([Point2; 3]),
}

impl Primitive {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Primitive::Vertex(_) => PrimitiveKind::Vertex,
            Primitive::Line(_) => PrimitiveKind::Line,
            Primitive::Corner(_) => PrimitiveKind::Corner,
        }
    }

    pub fn points(&self) -> &[Point2] {
        match self {
            Primitive::Vertex(p) => p,
            Primitive::Line(p) => p,
            Primitive::Corner(p) => p,
        }
    }

    /// Representative point: the vertex itself, the line center, or the
    /// corner's middle point.
    pub fn anchor(&self) -> Point2 {
        match self {
            Primitive::Vertex([p]) => *p,
            Primitive::Line([a, b]) => a.midpoint(*b),
            Primitive::Corner([_, m, _]) => *m,
        }
    }

    /// Build a primitive of `kind` from exactly `kind.points_per_primitive()`
    /// points.
    pub fn from_points(kind: PrimitiveKind, points: &[Point2]) -> Result<Primitive> {
        let n = kind.points_per_primitive();
        if points.len() != n {
            return Err(Error::Shape(format!(
                "{} primitive needs {n} points, got {}",
                kind.name(),
                points.len()
            )));
        }
        Ok(match kind {
            PrimitiveKind::Vertex => Primitive::Vertex([points[0]]),
            PrimitiveKind::Line => Primitive::Line([points[0], points[1]]),
            PrimitiveKind::Corner => Primitive::Corner([points[0], points[1], points[2]]),
        })
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Primitive {
        match self {
            Primitive::Vertex([p]) => Primitive::Vertex([p.translate(dx, dy)]),
            Primitive::Line([a, b]) => Primitive::Line([a.translate(dx, dy), b.translate(dx, dy)]),
            Primitive::Corner([a, b, c]) => Primitive::Corner([
                a.translate(dx, dy),
                b.translate(dx, dy),
                c.translate(dx, dy),
            ]),
        }
    }
}

/// Primitives together with their cyclic order labels (and optional
/// confidence scores used to break duplicate-order ties at assembly).
#[derive(Debug, Clone)]
pub struct OrderedPrimitiveSet {
    primitives: Vec<Primitive>,
    orders: Vec<usize>,
    scores: Option<Vec<f64>>,
}

impl OrderedPrimitiveSet {
    pub fn new(primitives: Vec<Primitive>, orders: Vec<usize>) -> Result<Self> {
        if primitives.len() != orders.len() {
            return Err(Error::Shape(format!(
                "{} primitives vs {} orders",
                primitives.len(),
                orders.len()
            )));
        }
        Ok(Self { primitives, orders, scores: None })
    }

    pub fn with_scores(
        primitives: Vec<Primitive>,
        orders: Vec<usize>,
        scores: Vec<f64>,
    ) -> Result<Self> {
        if primitives.len() != orders.len() || primitives.len() != scores.len() {
            return Err(Error::Shape("primitive/order/score length mismatch".into()));
        }
        Ok(Self { primitives, orders, scores: Some(scores) })
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }
}

/// A contour discretized into uniformly spaced boundary points, starting at
/// the 12 o'clock point (index 0) and following the ring direction.
#[derive(Debug, Clone)]
pub struct SampledContour {
    points: Vec<Point2>,
}

impl SampledContour {
    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Find the boundary point where the upward ray (toward -y) from the
/// centroid exits the ring: returns (edge index, parameter in [0,1]).
///
/// If the upward ray misses the boundary (possible when the centroid of a
/// strongly non-convex ring falls outside it), the full vertical line is
/// used, and failing that the vertex nearest the line. Any fixed
/// deterministic rule keeps labels consistent between training and assembly.
fn twelve_oclock(ring: &PolygonRing) -> (usize, f64) {
    let c = ring.centroid();
    let v = ring.vertices();
    let n = v.len();

    let mut best_up: Option<(f64, usize, f64)> = None; // (t, edge, s)
    let mut best_line: Option<(f64, usize, f64)> = None; // (|t|, edge, s)
    for i in 0..n {
        let a = v[i];
        let b = v[(i + 1) % n];
        let dx = b.x - a.x;
        let mut candidates: Vec<f64> = Vec::new();
        if dx.abs() > 1e-12 {
            let s = (c.x - a.x) / dx;
            if (-1e-12..=1.0 + 1e-12).contains(&s) {
                candidates.push(s.clamp(0.0, 1.0));
            }
        } else if (a.x - c.x).abs() <= 1e-12 {
            // Edge collinear with the ray: both endpoints are candidates.
            candidates.push(0.0);
            candidates.push(1.0);
        }
        for s in candidates {
            let y = a.y + s * (b.y - a.y);
            let t = c.y - y; // positive means above the centroid (toward -y)
            if t >= -1e-12 && best_up.as_ref().is_none_or(|&(bt, _, _)| t < bt) {
                best_up = Some((t.max(0.0), i, s));
            }
            if best_line.as_ref().is_none_or(|&(bt, _, _)| t.abs() < bt) {
                best_line = Some((t.abs(), i, s));
            }
        }
    }
    if let Some((_, i, s)) = best_up {
        return (i, s);
    }
    if let Some((_, i, s)) = best_line {
        return (i, s);
    }
    // No intersection at all: nearest vertex to the vertical line.
    let i = (0..n)
        .min_by(|&a, &b| {
            let ka = ((v[a].x - c.x).abs(), v[a].y);
            let kb = ((v[b].x - c.x).abs(), v[b].y);
            ka.partial_cmp(&kb).unwrap()
        })
        .unwrap();
    (i, 0.0)
}

/// Discretize a ring into `n_order` points at uniform arc-length spacing,
/// starting at the 12 o'clock point and following the ring direction.
pub fn sample_contour(ring: &PolygonRing, n_order: usize) -> Result<SampledContour> {
    if n_order < 3 {
        return Err(Error::Input(format!("n_order must be >= 3, got {n_order}")));
    }
    let v = ring.vertices();
    let n = v.len();
    let edge_len: Vec<f64> = (0..n).map(|i| v[i].dist(v[(i + 1) % n])).collect();
    let perimeter: f64 = edge_len.iter().sum();
    if perimeter <= 0.0 {
        return Err(Error::DegenerateRing("zero perimeter".into()));
    }

    let (e0, s0) = twelve_oclock(ring);
    // Arc length of the start point measured from vertex 0.
    let prefix: f64 = edge_len[..e0].iter().sum();
    let start_arc = prefix + s0 * edge_len[e0];

    let step = perimeter / n_order as f64;
    let mut points = Vec::with_capacity(n_order);
    let mut edge = e0;
    let mut edge_start_arc = prefix; // arc length at vertex `edge`
    for k in 0..n_order {
        let mut target = (start_arc + k as f64 * step) % perimeter;
        if target < 0.0 {
            target += perimeter;
        }
        // Walk forward to the edge containing `target`. Targets increase
        // monotonically with at most one wrap, so this is O(V) in total.
        let eps = 1e-9 * perimeter.max(1.0);
        let mut guard = 0;
        loop {
            let len = edge_len[edge];
            let local = target - edge_start_arc;
            if local >= -eps && local <= len + eps {
                let u = if len > 0.0 { (local / len).clamp(0.0, 1.0) } else { 0.0 };
                let a = v[edge];
                let b = v[(edge + 1) % n];
                points.push(Point2::new(a.x + u * (b.x - a.x), a.y + u * (b.y - a.y)));
                break;
            }
            edge = (edge + 1) % n;
            edge_start_arc += len;
            if edge == 0 {
                edge_start_arc = 0.0;
            }
            guard += 1;
            if guard > 2 * n + 2 {
                return Err(Error::Numeric("contour walk failed to terminate".into()));
            }
        }
    }
    Ok(SampledContour { points })
}

/// Decompose a ring into primitives of the given kind, in ring order.
///
/// vertex: one primitive per vertex. line: edges (v_i, v_{i+1}). corner:
/// triples (v_{i-1}, v_i, v_{i+1}) taken cyclically.
pub fn extract_primitives(ring: &PolygonRing, kind: PrimitiveKind) -> Vec<Primitive> {
    let v = ring.vertices();
    let n = v.len();
    (0..n)
        .map(|i| match kind {
            PrimitiveKind::Vertex => Primitive::Vertex([v[i]]),
            PrimitiveKind::Line => Primitive::Line([v[i], v[(i + 1) % n]]),
            PrimitiveKind::Corner => {
                Primitive::Corner([v[(i + n - 1) % n], v[i], v[(i + 1) % n]])
            }
        })
        .collect()
}

/// Assign one cyclic order label to every primitive.
///
/// Each sampled point is claimed by its nearest primitive anchor; a
/// primitive is then labeled with the nearest of its claimed points. Ties
/// break toward the lower sampled index (and lower primitive index for the
/// claim step). A primitive that claims no points falls back to its globally
/// nearest sampled point, so every primitive always receives exactly one
/// label.
pub fn assign_orders(
    primitives: &[Primitive],
    sampled: &SampledContour,
) -> Result<OrderedPrimitiveSet> {
    if primitives.is_empty() {
        return Err(Error::Input("empty primitive set".into()));
    }
    let anchors: Vec<Point2> = primitives.iter().map(|p| p.anchor()).collect();
    let pts = sampled.points();

    // Claim step: nearest primitive per sampled point.
    let mut claimed_by = vec![0usize; pts.len()];
    for (k, &s) in pts.iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, &a) in anchors.iter().enumerate() {
            let d = a.dist(s);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        claimed_by[k] = best;
    }

    // Label step: nearest claimed point per primitive, with global fallback.
    let mut orders = Vec::with_capacity(primitives.len());
    for (i, &a) in anchors.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (k, &s) in pts.iter().enumerate() {
            if claimed_by[k] != i {
                continue;
            }
            let d = a.dist(s);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, k));
            }
        }
        let label = match best {
            Some((_, k)) => k,
            None => {
                let mut k_best = 0usize;
                let mut d_best = f64::INFINITY;
                for (k, &s) in pts.iter().enumerate() {
                    let d = a.dist(s);
                    if d < d_best {
                        d_best = d;
                        k_best = k;
                    }
                }
                k_best
            }
        };
        orders.push(label);
    }
    OrderedPrimitiveSet::new(primitives.to_vec(), orders)
}

fn line_endpoints(p: &Primitive, reversed: bool) -> (Point2, Point2) {
    match p {
        Primitive::Line([a, b]) => {
            if reversed {
                (*b, *a)
            } else {
                (*a, *b)
            }
        }
        _ => unreachable!("line assembly called on non-line primitive"),
    }
}

/// Resolve per-line orientations greedily around the cycle so consecutive
/// junction endpoints are as close as possible. Both orientations of the
/// seed line are tried; the lower total junction cost wins (the forward seed
/// on a tie).
fn resolve_line_orientations(lines: &[&Primitive]) -> Vec<bool> {
    let k = lines.len();
    let mut best: Option<(f64, Vec<bool>)> = None;
    for seed_reversed in [false, true] {
        let mut orient = vec![false; k];
        orient[0] = seed_reversed;
        let mut cost = 0.0;
        for j in 1..k {
            let (_, prev_end) = line_endpoints(lines[j - 1], orient[j - 1]);
            let (fwd_start, _) = line_endpoints(lines[j], false);
            let (rev_start, _) = line_endpoints(lines[j], true);
            let d_fwd = prev_end.dist(fwd_start);
            let d_rev = prev_end.dist(rev_start);
            if d_rev < d_fwd {
                orient[j] = true;
                cost += d_rev;
            } else {
                cost += d_fwd;
            }
        }
        let (_, last_end) = line_endpoints(lines[k - 1], orient[k - 1]);
        let (first_start, _) = line_endpoints(lines[0], orient[0]);
        cost += last_end.dist(first_start);
        if best.as_ref().is_none_or(|(bc, _)| cost < *bc) {
            best = Some((cost, orient));
        }
    }
    best.unwrap().1
}

/// Connect primitives into a closed polygon.
///
/// Primitives are sorted by (order ascending, confidence descending when
/// present, input index); duplicate orders are permitted. vertex rings use
/// the points directly, corner rings use the middle points, and line rings
/// average each junction's adjacent endpoints after greedy orientation
/// resolution. The result is normalized.
pub fn assemble_polygon(set: &OrderedPrimitiveSet, kind: PrimitiveKind) -> Result<PolygonRing> {
    if set.len() < 3 {
        return Err(Error::InsufficientPrimitives(set.len()));
    }
    for p in set.primitives() {
        if p.kind() != kind {
            return Err(Error::Shape(format!(
                "assembly kind {} does not match primitive kind {}",
                kind.name(),
                p.kind().name()
            )));
        }
    }

    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.sort_by(|&a, &b| {
        set.orders[a].cmp(&set.orders[b]).then_with(|| match &set.scores {
            Some(s) => s[b].total_cmp(&s[a]),
            None => std::cmp::Ordering::Equal,
        })
        .then(a.cmp(&b))
    });
    let sorted: Vec<&Primitive> = idx.iter().map(|&i| &set.primitives[i]).collect();

    let vertices: Vec<Point2> = match kind {
        PrimitiveKind::Vertex => sorted.iter().map(|p| p.points()[0]).collect(),
        PrimitiveKind::Corner => sorted.iter().map(|p| p.points()[1]).collect(),
        PrimitiveKind::Line => {
            let orient = resolve_line_orientations(&sorted);
            let k = sorted.len();
            (0..k)
                .map(|j| {
                    let (_, end_j) = line_endpoints(sorted[j], orient[j]);
                    let (start_next, _) = line_endpoints(sorted[(j + 1) % k], orient[(j + 1) % k]);
                    end_j.midpoint(start_next)
                })
                .collect()
        }
    };
    normalize_ring(&vertices)
}
