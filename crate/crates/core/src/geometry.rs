//! Bird's-eye-view box geometry: rotated IoU, a raster oracle, greedy NMS.

use std::cmp::Ordering;
use std::f64::consts::PI;

use crate::error::{arg_err, Result, SstError};

/// Intersection areas below this (m²) are treated as empty.
pub const SLIVER_AREA: f64 = 1e-12;

/// Wraps an angle into [-π, π).
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t >= PI {
        t -= 2.0 * PI;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevBox {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
}

impl BevBox {
    /// Builds a box, rejecting non-positive or non-finite extents and wrapping yaw.
    pub fn new(cx: f64, cy: f64, length: f64, width: f64, yaw: f64) -> Result<Self> {
        if !(length > 0.0 && width > 0.0) || !length.is_finite() || !width.is_finite() {
            return Err(arg_err!("box extents must be positive, got {length} x {width}"));
        }
        if !(cx.is_finite() && cy.is_finite() && yaw.is_finite()) {
            return Err(arg_err!("box center and yaw must be finite"));
        }
        Ok(Self { cx, cy, length, width, yaw: wrap_angle(yaw) })
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|[u, v]| [self.cx + u * c - v * s, self.cy + u * s + v * c])
    }

    /// Point containment on the closed box.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= 0.5 * self.length && v.abs() <= 0.5 * self.width
    }

    /// Axis-aligned bounds `(x_min, y_min, x_max, y_max)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let cs = self.corners();
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for [x, y] in cs {
            b.0 = b.0.min(x);
            b.1 = b.1.min(y);
            b.2 = b.2.max(x);
            b.3 = b.3.max(y);
        }
        b
    }

    /// Radius of the circumscribed circle.
    pub fn circumradius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }

    fn key(&self) -> [f64; 5] {
        [self.cx, self.cy, self.length, self.width, self.yaw]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3d {
    pub bev: BevBox,
    pub cz: f64,
    pub height: f64,
}

impl Box3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(cx: f64, cy: f64, cz: f64, length: f64, width: f64, height: f64, yaw: f64) -> Result<Self> {
        if !(height > 0.0) || !height.is_finite() || !cz.is_finite() {
            return Err(arg_err!("box height must be positive and finite, got {height}"));
        }
        Ok(Self { bev: BevBox::new(cx, cy, length, width, yaw)?, cz, height })
    }
}

/// √(A_o / A_s): object footprint relative to the scene footprint.
pub fn relative_size(box_bev_area: f64, scene_area: f64) -> Result<f64> {
    if !(box_bev_area > 0.0) || !(scene_area > 0.0) {
        return Err(SstError::Domain(format!("areas must be positive (object {box_bev_area}, scene {scene_area})")));
    }
    Ok((box_bev_area / scene_area).sqrt())
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segment_line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Sutherland-Hodgman: clips `subject` by the convex CCW polygon `clip`.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        let mut prev = *input.last().expect("non-empty");
        let mut prev_in = cross(a, b, prev) >= 0.0;
        for &cur in &input {
            let cur_in = cross(a, b, cur) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
            prev = cur;
            prev_in = cur_in;
        }
    }
    output
}

fn shoelace(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc.abs()
}

/// Exact intersection area of two rotated boxes.
pub fn intersection_area(a: &BevBox, b: &BevBox) -> f64 {
    // Disjoint circumcircles cannot intersect.
    let d = (a.cx - b.cx).hypot(a.cy - b.cy);
    if d > a.circumradius() + b.circumradius() {
        return 0.0;
    }
    // Fix the clipping order so the result is symmetric bit for bit.
    let (subject, clipper) = match cmp_keys(a, b) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    let area = shoelace(&clip_polygon(&subject.corners(), &clipper.corners()));
    if area < SLIVER_AREA {
        0.0
    } else {
        area
    }
}

fn cmp_keys(a: &BevBox, b: &BevBox) -> Ordering {
    a.key()
        .iter()
        .zip(b.key().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

/// Rotated BEV IoU in [0, 1].
pub fn rotated_iou_bev(a: &BevBox, b: &BevBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Raster IoU: counts cell centers of a shared grid covering both boxes.
///
/// Independent of the clipping path; used to check [`rotated_iou_bev`].
pub fn rotated_iou_oracle(a: &BevBox, b: &BevBox, cells_per_meter: usize) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let (bx0, by0, bx1, by1) = b.bounds();
    let x0 = ax0.min(bx0);
    let y0 = ay0.min(by0);
    let x1 = ax1.max(bx1);
    let y1 = ay1.max(by1);
    let h = 1.0 / cells_per_meter as f64;
    let nx = ((x1 - x0) / h).ceil() as usize;
    let ny = ((y1 - y0) / h).ceil() as usize;
    let mut both = 0u64;
    let mut either = 0u64;
    for j in 0..ny {
        let y = y0 + (j as f64 + 0.5) * h;
        for i in 0..nx {
            let x = x0 + (i as f64 + 0.5) * h;
            let in_a = a.contains(x, y);
            let in_b = b.contains(x, y);
            both += u64::from(in_a && in_b);
            either += u64::from(in_a || in_b);
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// Greedy NMS. Returns kept indices in descending score order; ties go to the lower index.
pub fn nms_bev(boxes: &[BevBox], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(arg_err!("{} boxes but {} scores", boxes.len(), scores.len()));
    }
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(arg_err!("iou threshold must lie in (0, 1), got {iou_threshold}"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(arg_err!("score {i} is not finite"));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    'candidates: for &i in &order {
        for &k in &kept {
            if rotated_iou_bev(&boxes[i], &boxes[k]) > iou_threshold {
                continue 'candidates;
            }
        }
        kept.push(i);
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64Star;

    fn bx(cx: f64, cy: f64, l: f64, w: f64, yaw: f64) -> BevBox {
        BevBox::new(cx, cy, l, w, yaw).unwrap()
    }

    fn random_pair(rng: &mut XorShift64Star) -> (BevBox, BevBox) {
        let a = bx(
            rng.uniform(-5.0, 5.0),
            rng.uniform(-5.0, 5.0),
            rng.uniform(0.5, 10.0),
            rng.uniform(0.5, 10.0),
            rng.uniform(-PI, PI),
        );
        let b = bx(
            a.cx + rng.uniform(-3.0, 3.0),
            a.cy + rng.uniform(-3.0, 3.0),
            rng.uniform(0.5, 10.0),
            rng.uniform(0.5, 10.0),
            rng.uniform(-PI, PI),
        );
        (a, b)
    }

    #[test]
    fn relative_size_cases() {
        assert_eq!(relative_size(5.0, 5.0).unwrap(), 1.0);
        assert!((relative_size(8.0, 22_500.0).unwrap() - (8.0f64 / 22_500.0).sqrt()).abs() < 1e-15);
        assert!((relative_size(8.0, 22_500.0).unwrap() - 0.01886).abs() < 1e-5);
        assert_eq!(relative_size(25.0, 100.0).unwrap(), 0.5);
        assert!(matches!(relative_size(0.0, 1.0), Err(SstError::Domain(_))));
        assert!(matches!(relative_size(1.0, -1.0), Err(SstError::Domain(_))));
    }

    #[test]
    fn iou_closed_form_cases() {
        let a = bx(0.0, 0.0, 4.0, 2.0, 0.3);
        assert!((rotated_iou_bev(&a, &a) - 1.0).abs() < 1e-12);
        let far = bx(100.0, 0.0, 4.0, 2.0, 0.3);
        assert_eq!(rotated_iou_bev(&a, &far), 0.0);
        let p = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        let q = bx(1.0, 0.0, 2.0, 2.0, 0.0);
        assert!((rotated_iou_bev(&p, &q) - 1.0 / 3.0).abs() < 1e-9);
        // A square rotated by 90 degrees is itself.
        let r = bx(0.0, 0.0, 2.0, 2.0, PI / 2.0);
        assert!((rotated_iou_bev(&p, &r) - 1.0).abs() < 1e-9);
        // Touching edges share no area.
        let t = bx(2.0, 0.0, 2.0, 2.0, 0.0);
        assert_eq!(rotated_iou_bev(&p, &t), 0.0);
    }

    #[test]
    fn oracle_closed_form_cases() {
        let p = bx(0.0, 0.0, 2.0, 2.0, 0.0);
        let q = bx(1.0, 0.0, 2.0, 2.0, 0.0);
        assert_eq!(rotated_iou_oracle(&p, &p, 100), 1.0);
        assert!((rotated_iou_oracle(&p, &q, 100) - 1.0 / 3.0).abs() < 2.0 / 100.0);
        let r = bx(0.0, 0.0, 2.0, 2.0, PI / 2.0);
        assert!((rotated_iou_oracle(&p, &r, 100) - 1.0).abs() < 1e-2);
    }

    #[test]
    fn iou_is_exactly_symmetric_and_rigid_invariant() {
        let mut rng = XorShift64Star::new(11);
        for _ in 0..500 {
            let (a, b) = random_pair(&mut rng);
            let ab = rotated_iou_bev(&a, &b);
            assert_eq!(ab.to_bits(), rotated_iou_bev(&b, &a).to_bits());
            assert!((0.0..=1.0).contains(&ab));
            let (tx, ty, rot) = (rng.uniform(-50.0, 50.0), rng.uniform(-50.0, 50.0), rng.uniform(-PI, PI));
            let (s, c) = rot.sin_cos();
            let moved = |bb: &BevBox| {
                bx(bb.cx * c - bb.cy * s + tx, bb.cx * s + bb.cy * c + ty, bb.length, bb.width, bb.yaw + rot)
            };
            let moved_iou = rotated_iou_bev(&moved(&a), &moved(&b));
            assert!((moved_iou - ab).abs() < 1e-9, "{moved_iou} vs {ab}");
        }
    }

    #[test]
    fn iou_agrees_with_raster_oracle() {
        let mut rng = XorShift64Star::new(5);
        for _ in 0..20 {
            let (a, b) = random_pair(&mut rng);
            let exact = rotated_iou_bev(&a, &b);
            let raster = rotated_iou_oracle(&a, &b, 100);
            assert!((exact - raster).abs() < 5e-3, "{exact} vs {raster} for {a:?} {b:?}");
        }
    }

    #[test]
    fn nms_cases() {
        let a = bx(0.0, 0.0, 4.0, 2.0, 0.0);
        assert_eq!(nms_bev(&[a], &[0.3], 0.5).unwrap(), vec![0]);
        assert_eq!(nms_bev(&[a, a], &[0.8, 0.9], 0.5).unwrap(), vec![1]);
        // Equal scores: the lower index survives.
        assert_eq!(nms_bev(&[a, a], &[0.5, 0.5], 0.5).unwrap(), vec![0]);
        let far = [a, bx(20.0, 0.0, 4.0, 2.0, 0.0), bx(40.0, 0.0, 4.0, 2.0, 0.0)];
        assert_eq!(nms_bev(&far, &[0.1, 0.7, 0.4], 0.5).unwrap(), vec![1, 2, 0]);
        assert!(matches!(nms_bev(&[a], &[0.1, 0.2], 0.5), Err(SstError::Argument(_))));
        assert!(nms_bev(&[a], &[0.1], 1.0).is_err());
    }

    #[test]
    fn nms_output_is_an_antichain() {
        let mut rng = XorShift64Star::new(3);
        let boxes: Vec<BevBox> = (0..80)
            .map(|_| {
                bx(
                    rng.uniform(0.0, 15.0),
                    rng.uniform(0.0, 15.0),
                    rng.uniform(1.0, 5.0),
                    rng.uniform(1.0, 3.0),
                    rng.uniform(-PI, PI),
                )
            })
            .collect();
        let scores: Vec<f64> = (0..80).map(|_| rng.next_f64()).collect();
        let kept = nms_bev(&boxes, &scores, 0.3).unwrap();
        for (n, &i) in kept.iter().enumerate() {
            for &j in &kept[n + 1..] {
                assert!(rotated_iou_bev(&boxes[i], &boxes[j]) <= 0.3);
                assert!(scores[i] >= scores[j]);
            }
        }
        // Every suppressed box overlaps some kept box with a higher rank.
        for i in 0..boxes.len() {
            if !kept.contains(&i) {
                assert!(kept.iter().any(|&k| rotated_iou_bev(&boxes[i], &boxes[k]) > 0.3));
            }
        }
    }

    #[test]
    fn wrap_angle_range() {
        for t in [-10.0, -PI, 0.0, PI, 3.5, 7.0 * PI] {
            let w = wrap_angle(t);
            assert!((-PI..PI).contains(&w), "{t} -> {w}");
            assert!(((w - t) / (2.0 * PI)).round() * 2.0 * PI - (w - t) < 1e-12);
        }
        assert_eq!(wrap_angle(PI), -PI);
    }
}
