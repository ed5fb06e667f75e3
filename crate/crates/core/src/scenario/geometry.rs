//! Polyline geometry shared by the generator, featurizers and metrics.

/// Closest-point query result against a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length from the first vertex to the closest point.
    pub station: f64,
    /// Signed lateral offset, positive to the left of travel direction.
    pub lateral: f64,
    pub distance: f64,
    pub segment: usize,
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Cumulative arc length at every vertex.
pub fn cumulative_lengths(points: &[[f64; 2]]) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len());
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        if i > 0 {
            total += dist(points[i - 1], *p);
        }
        out.push(total);
    }
    out
}

pub fn project(points: &[[f64; 2]], p: [f64; 2]) -> Projection {
    let cum = cumulative_lengths(points);
    let mut best = Projection {
        station: 0.0,
        lateral: 0.0,
        distance: f64::INFINITY,
        segment: 0,
    };
    for i in 0..points.len().saturating_sub(1) {
        let a = points[i];
        let b = points[i + 1];
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let c = [a[0] + t * dx, a[1] + t * dy];
        let d = dist(c, p);
        if d < best.distance {
            let len = len2.sqrt();
            let cross = if len > 0.0 {
                (dx * (p[1] - a[1]) - dy * (p[0] - a[0])) / len
            } else {
                0.0
            };
            best = Projection {
                station: cum[i] + t * len,
                lateral: cross,
                distance: d,
                segment: i,
            };
        }
    }
    best
}

/// Point and tangent heading at arc length `s`, clamped to the polyline ends.
pub fn point_at(points: &[[f64; 2]], cum: &[f64], s: f64) -> ([f64; 2], f64) {
    let n = points.len();
    let total = cum[n - 1];
    let s = s.clamp(0.0, total);
    let i = match cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
        Ok(i) => i.min(n - 2),
        Err(i) => i.saturating_sub(1).min(n - 2),
    };
    let a = points[i];
    let b = points[i + 1];
    let seg = cum[i + 1] - cum[i];
    let t = if seg > 0.0 { (s - cum[i]) / seg } else { 0.0 };
    let heading = (b[1] - a[1]).atan2(b[0] - a[0]);
    ([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])], heading)
}

/// Distance from a point to a disc boundary is non-positive inside the disc.
pub fn discs_overlap(a: [f64; 2], ra: f64, b: [f64; 2], rb: f64) -> bool {
    dist(a, b) < ra + rb
}
