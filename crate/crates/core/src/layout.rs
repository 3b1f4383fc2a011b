//! Room layouts: floor polygon extruded between floor and ceiling, rendered
//! as per-pixel ray distances, and compared by 2D / 3D IoU.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::image::ErpImage;
use crate::sphere::{ErpGrid, Vec3};

type P2 = [f64; 2];

fn cross(a: P2, b: P2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn sub(a: P2, b: P2) -> P2 {
    [a[0] - b[0], a[1] - b[1]]
}

/// Signed shoelace area (positive for counter-clockwise order).
pub fn signed_area(poly: &[P2]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| cross(poly[i], poly[(i + 1) % n])).sum::<f64>() / 2.0
}

fn segments_cross(a: P2, b: P2, c: P2, d: P2) -> bool {
    let o = |p: P2, q: P2, r: P2| cross(sub(q, p), sub(r, p));
    let (d1, d2, d3, d4) = (o(c, d, a), o(c, d, b), o(a, b, c), o(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |p: P2, q: P2, r: P2| {
        o(p, q, r) == 0.0 && r[0] >= p[0].min(q[0]) && r[0] <= p[0].max(q[0]) && r[1] >= p[1].min(q[1]) && r[1] <= p[1].max(q[1])
    };
    on(c, d, a) || on(c, d, b) || on(a, b, c) || on(a, b, d)
}

/// Floor polygon in metres (camera at the plan origin) plus heights above
/// the floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomLayout {
    floor: Vec<P2>,
    camera_height: f64,
    ceiling_height: f64,
}

impl RoomLayout {
    /// Validates the polygon (simple, positive area) and heights; the
    /// vertex order is normalised to counter-clockwise.
    pub fn new(floor: Vec<P2>, camera_height: f64, ceiling_height: f64) -> Result<Self> {
        if floor.len() < 3 || floor.iter().flatten().any(|v| !v.is_finite()) {
            return domain("floor polygon needs at least 3 finite vertices");
        }
        if !(camera_height > 0.0 && camera_height < ceiling_height && ceiling_height.is_finite()) {
            return domain(format!("need 0 < camera height ({camera_height}) < ceiling height ({ceiling_height})"));
        }
        let mut floor = floor;
        let area = signed_area(&floor);
        if area.abs() < 1e-12 {
            return domain("floor polygon is degenerate");
        }
        if area < 0.0 {
            floor.reverse();
        }
        let n = floor.len();
        for i in 0..n {
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                if segments_cross(floor[i], floor[(i + 1) % n], floor[j], floor[(j + 1) % n]) {
                    return domain("floor polygon intersects itself");
                }
            }
        }
        Ok(Self { floor, camera_height, ceiling_height })
    }

    /// Axis-aligned `sx x sy` room centred on the camera.
    pub fn rectangle(sx: f64, sy: f64, camera_height: f64, ceiling_height: f64) -> Result<Self> {
        let (a, b) = (sx / 2.0, sy / 2.0);
        Self::new(vec![[-a, -b], [a, -b], [a, b], [-a, b]], camera_height, ceiling_height)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            floor: Vec<P2>,
            camera_height: f64,
            ceiling_height: f64,
        }
        let raw: Raw = serde_json::from_str(text).map_err(|e| Error::Format(format!("layout JSON: {e}")))?;
        Self::new(raw.floor, raw.camera_height, raw.ceiling_height)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("layout serialises")
    }

    pub fn floor(&self) -> &[P2] {
        &self.floor
    }

    pub fn camera_height(&self) -> f64 {
        self.camera_height
    }

    pub fn ceiling_height(&self) -> f64 {
        self.ceiling_height
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.floor)
    }

    pub fn volume(&self) -> f64 {
        self.area() * self.ceiling_height
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, p: P2) -> bool {
        let n = self.floor.len();
        let mut inside = false;
        for i in 0..n {
            let (a, b) = (self.floor[i], self.floor[(i + 1) % n]);
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    pub fn is_convex(&self) -> bool {
        let n = self.floor.len();
        (0..n).all(|i| {
            let (a, b, c) = (self.floor[i], self.floor[(i + 1) % n], self.floor[(i + 2) % n]);
            cross(sub(b, a), sub(c, b)) >= 0.0
        })
    }
}

/// Distance along unit direction `d` from the camera to the first surface.
pub fn ray_distance(layout: &RoomLayout, d: &Vec3) -> Result<f64> {
    let h = layout.camera_height;
    let top = layout.ceiling_height - h;
    let mut best = f64::INFINITY;
    if d.z < 0.0 {
        best = best.min(h / -d.z);
    } else if d.z > 0.0 {
        best = best.min(top / d.z);
    }
    let dir = [d.x, d.y];
    let n = layout.floor.len();
    for i in 0..n {
        let (p, q) = (layout.floor[i], layout.floor[(i + 1) % n]);
        let e = sub(q, p);
        let den = cross(dir, e);
        if den == 0.0 {
            continue;
        }
        let t = cross(p, e) / den;
        let u = cross(p, dir) / den;
        if t > 0.0 && (0.0..=1.0).contains(&u) {
            let z = t * d.z;
            if z >= -h && z <= top {
                best = best.min(t);
            }
        }
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::Data("ray left the room; the floor polygon is broken".into()))
    }
}

/// Per-pixel distances in metres, positive and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap(ErpImage);

impl DistanceMap {
    pub fn image(&self) -> &ErpImage {
        &self.0
    }

    /// Values rescaled by this map's own min and max to `[-1, 1]`.
    pub fn normalized(&self) -> ErpImage {
        let (lo, hi) = self.0.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let span = hi - lo;
        let data = self.0.data.iter().map(|v| if span > 0.0 { 2.0 * (v - lo) / span - 1.0 } else { 0.0 }).collect();
        ErpImage::from_data(1, self.0.height, data).expect("same shape as a valid map")
    }
}

/// Ray-casts every pixel centre. The camera must stand inside the room.
pub fn render_distance_map(layout: &RoomLayout, grid: &ErpGrid) -> Result<DistanceMap> {
    if !layout.contains([0.0, 0.0]) {
        return domain("the camera (plan origin) is outside the floor polygon");
    }
    let mut data = Vec::with_capacity(grid.pixels());
    for r in 0..grid.height() {
        for c in 0..grid.width() {
            data.push(ray_distance(layout, &grid.pixel_direction(r, c))?);
        }
    }
    Ok(DistanceMap(ErpImage::from_data(1, grid.height(), data)?))
}

/// Clips `subject` against the convex counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[P2], clip: &[P2]) -> Vec<P2> {
    let mut out = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let side = |p: P2| cross(sub(b, a), sub(p, a));
        let input = std::mem::take(&mut out);
        let m = input.len();
        for j in 0..m {
            let (p, q) = (input[j], input[(j + 1) % m]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Cell-centre crossings of a polygon with the horizontal line `y`.
fn row_intervals(poly: &[P2], y: f64) -> Vec<(f64, f64)> {
    let n = poly.len();
    let mut xs = Vec::new();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[1] > y) != (b[1] > y) {
            xs.push(a[0] + (y - a[1]) / (b[1] - a[1]) * (b[0] - a[0]));
        }
    }
    xs.sort_by(f64::total_cmp);
    xs.chunks(2).filter(|c| c.len() == 2).map(|c| (c[0], c[1])).collect()
}

/// Number of centres `x0 + (j + 0.5) * cell` in `[l, r)`.
fn centres_in(x0: f64, cell: f64, l: f64, r: f64) -> i64 {
    let first = ((l - x0) / cell - 0.5).ceil() as i64;
    let last = ((r - x0) / cell - 0.5).ceil() as i64;
    (last - first).max(0)
}

/// Intersection and union floor areas by rasterising cell centres on a
/// `cell`-metre grid.
pub fn raster_areas(a: &RoomLayout, b: &RoomLayout, cell: f64) -> (f64, f64) {
    let pts = a.floor.iter().chain(&b.floor);
    let (mut x0, mut y0, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let rows = ((y1 - y0) / cell).ceil() as usize + 1;
    let (mut inter, mut count_a, mut count_b) = (0i64, 0i64, 0i64);
    for j in 0..rows {
        let y = y0 + (j as f64 + 0.5) * cell;
        let ia = row_intervals(&a.floor, y);
        let ib = row_intervals(&b.floor, y);
        count_a += ia.iter().map(|&(l, r)| centres_in(x0, cell, l, r)).sum::<i64>();
        count_b += ib.iter().map(|&(l, r)| centres_in(x0, cell, l, r)).sum::<i64>();
        for &(la, ra) in &ia {
            for &(lb, rb) in &ib {
                let (l, r) = (la.max(lb), ra.min(rb));
                if l < r {
                    inter += centres_in(x0, cell, l, r);
                }
            }
        }
    }
    let c2 = cell * cell;
    (inter as f64 * c2, (count_a + count_b - inter) as f64 * c2)
}

/// Exact for convex pairs, 1 cm raster otherwise.
pub fn intersection_area(a: &RoomLayout, b: &RoomLayout) -> f64 {
    if a.is_convex() && b.is_convex() {
        let clipped = clip_convex(&a.floor, &b.floor);
        if clipped.len() < 3 {
            0.0
        } else {
            signed_area(&clipped).max(0.0)
        }
    } else {
        raster_areas(a, b, 0.01).0
    }
}

pub fn iou_2d(a: &RoomLayout, b: &RoomLayout) -> f64 {
    let i = intersection_area(a, b);
    let u = a.area() + b.area() - i;
    (i / u).clamp(0.0, 1.0)
}

/// Both rooms share the floor plane, so the common volume is the common
/// floor area times the lower ceiling.
pub fn iou_3d(a: &RoomLayout, b: &RoomLayout) -> f64 {
    let i = intersection_area(a, b) * a.ceiling_height.min(b.ceiling_height);
    let u = a.volume() + b.volume() - i;
    (i / u).clamp(0.0, 1.0)
}
