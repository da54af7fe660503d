//! Planar polyline geometry shared by routing, prediction, and costs.

use nalgebra::{Point2, Vector2};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(std::f64::consts::TAU);
    if r > std::f64::consts::PI {
        r -= std::f64::consts::TAU;
    }
    r
}

/// Result of projecting a point onto a polyline.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    /// Arclength of the closest point, measured from the polyline start.
    pub arclength: f64,
    /// Unsigned distance from the query point to the closest point.
    pub distance: f64,
    /// Lateral offset, positive to the left of the travel direction.
    pub signed_lateral: f64,
    /// Tangent heading at the closest point, radians.
    pub tangent: f64,
}

/// A planar polyline with cached cumulative arclengths.
#[derive(Debug, Clone)]
pub struct Polyline {
    pts: Vec<Point2<f64>>,
    cum: Vec<f64>,
}

impl Polyline {
    /// Builds a polyline from at least two points. Consecutive duplicate
    /// points are rejected because they leave the tangent undefined.
    pub fn new(pts: Vec<Point2<f64>>) -> Option<Self> {
        if pts.len() < 2 {
            return None;
        }
        let mut cum = Vec::with_capacity(pts.len());
        cum.push(0.0);
        for w in pts.windows(2) {
            let d = (w[1] - w[0]).norm();
            if d <= 1e-12 {
                return None;
            }
            cum.push(cum.last().unwrap() + d);
        }
        Some(Self { pts, cum })
    }

    pub fn from_xy(xy: &[[f64; 2]]) -> Option<Self> {
        Self::new(xy.iter().map(|p| Point2::new(p[0], p[1])).collect())
    }

    pub fn points(&self) -> &[Point2<f64>] {
        &self.pts
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Point at a given arclength, clamped to the polyline extent.
    pub fn point_at(&self, s: f64) -> Point2<f64> {
        let (i, t) = self.locate(s);
        self.pts[i] + (self.pts[i + 1] - self.pts[i]) * t
    }

    /// Tangent heading (radians) at a given arclength.
    pub fn tangent_at(&self, s: f64) -> f64 {
        let (i, _) = self.locate(s);
        let d = self.pts[i + 1] - self.pts[i];
        d.y.atan2(d.x)
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.length());
        // cum is strictly increasing; find the segment containing s.
        let mut i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        if i >= self.pts.len() - 1 {
            i = self.pts.len() - 2;
        }
        let seg = self.cum[i + 1] - self.cum[i];
        ((i), ((s - self.cum[i]) / seg).clamp(0.0, 1.0))
    }

    /// Projects a point onto the polyline.
    pub fn project(&self, p: Point2<f64>) -> Projection {
        let mut best = Projection {
            arclength: 0.0,
            distance: f64::INFINITY,
            signed_lateral: 0.0,
            tangent: 0.0,
        };
        for i in 0..self.pts.len() - 1 {
            let a = self.pts[i];
            let b = self.pts[i + 1];
            let ab = b - a;
            let len2 = ab.norm_squared();
            let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
            let q = a + ab * t;
            let d = (p - q).norm();
            if d < best.distance {
                let tangent = ab.y.atan2(ab.x);
                let cross = ab.x * (p.y - q.y) - ab.y * (p.x - q.x);
                best = Projection {
                    arclength: self.cum[i] + ab.norm() * t,
                    distance: d,
                    signed_lateral: if cross >= 0.0 { d } else { -d },
                    tangent,
                };
            }
        }
        best
    }

    /// Curvature command that steers toward a point ahead on the polyline:
    /// project, look ahead by max(3 m, 0.8 v), aim. Clamped to ±0.4 1/m.
    pub fn lookahead_curvature(&self, pos: Point2<f64>, heading: f64, v: f64) -> f64 {
        let s = self.project(pos).arclength;
        let lookahead = (0.8 * v).max(3.0);
        let target = self.point_at(s + lookahead);
        let to_target = target - pos;
        if to_target.norm() < 1e-6 {
            return 0.0;
        }
        let alpha = wrap_angle(to_target.y.atan2(to_target.x) - heading);
        (2.0 * alpha.sin() / lookahead).clamp(-0.4, 0.4)
    }

    /// Whether an arclength coincides with a polyline vertex (including the
    /// endpoints). Distinguishes point-like from line-like projections: the
    /// distance field is curved around a vertex and flat along a segment.
    pub fn projection_at_vertex(&self, s: f64) -> bool {
        let s = s.clamp(0.0, self.length());
        self.cum.iter().any(|&c| (c - s).abs() < 1e-9)
    }

    /// Resamples the polyline at a fixed arclength step (endpoints kept).
    pub fn resample(&self, step: f64) -> Vec<Point2<f64>> {
        let n = (self.length() / step).ceil().max(1.0) as usize;
        let mut out = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let s = (k as f64 / n as f64) * self.length();
            out.push(self.point_at(s));
        }
        out
    }

    /// Concatenates two polylines, skipping a duplicated joint point.
    pub fn extend_with(&mut self, other: &Polyline) {
        for &p in other.points() {
            if (p - *self.pts.last().unwrap()).norm() > 1e-12 {
                let d = (p - *self.pts.last().unwrap()).norm();
                self.cum.push(self.cum.last().unwrap() + d);
                self.pts.push(p);
            }
        }
    }
}

/// First contact between two polylines: the earliest pair of arclengths at
/// which the curves come within `radius`. Scans both curves on a fixed grid,
/// so the result is approximate to the scan step.
pub fn first_contact(a: &Polyline, b: &Polyline, radius: f64, step: f64) -> Option<(f64, f64)> {
    let na = (a.length() / step).ceil().max(1.0) as usize;
    let nb = (b.length() / step).ceil().max(1.0) as usize;
    let pa: Vec<(f64, Point2<f64>)> = (0..=na)
        .map(|i| {
            let s = (i as f64 / na as f64) * a.length();
            (s, a.point_at(s))
        })
        .collect();
    let pb: Vec<(f64, Point2<f64>)> = (0..=nb)
        .map(|i| {
            let s = (i as f64 / nb as f64) * b.length();
            (s, b.point_at(s))
        })
        .collect();
    // Earliest along `a`, tie-broken by earliest along `b`.
    let mut best: Option<(f64, f64)> = None;
    for &(sa, qa) in &pa {
        for &(sb, qb) in &pb {
            if (qa - qb).norm() <= radius {
                match best {
                    Some((ba, bb)) if (sa, sb) >= (ba, bb) => {}
                    _ => best = Some((sa, sb)),
                }
                break; // earliest sb for this sa
            }
        }
        if best.is_some() && best.unwrap().0 <= sa {
            break;
        }
    }
    best
}

/// Unit vector for a heading angle.
pub fn heading_vec(theta: f64) -> Vector2<f64> {
    Vector2::new(theta.cos(), theta.sin())
}
