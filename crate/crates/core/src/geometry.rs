//! Planar geometry shared by the vocabulary, world and ensemble code.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        self.sub(o).norm()
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Rotation by `yaw` followed by translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub tx: f64,
    pub ty: f64,
    pub yaw: f64,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        tx: 0.0,
        ty: 0.0,
        yaw: 0.0,
    };

    pub fn new(tx: f64, ty: f64, yaw: f64) -> Self {
        Self { tx, ty, yaw }
    }

    pub fn apply(&self, p: Vec2) -> Vec2 {
        let r = self.rotate(p);
        Vec2::new(r.x + self.tx, r.y + self.ty)
    }

    /// Rotation only, for directions and velocities.
    pub fn rotate(&self, v: Vec2) -> Vec2 {
        let (s, c) = self.yaw.sin_cos();
        Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
    }

    pub fn apply_heading(&self, h: f64) -> f64 {
        wrap_angle(h + self.yaw)
    }

    pub fn inverse(&self) -> RigidTransform {
        let (s, c) = self.yaw.sin_cos();
        RigidTransform {
            tx: -(c * self.tx + s * self.ty),
            ty: s * self.tx - c * self.ty,
            yaw: -self.yaw,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let t = self.apply(Vec2::new(other.tx, other.ty));
        RigidTransform {
            tx: t.x,
            ty: t.y,
            yaw: self.yaw + other.yaw,
        }
    }
}

/// Closest point of a polyline to a query point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub distance: f64,
    /// Arclength of the closest point, measured from the first vertex.
    pub arclength: f64,
    pub point: Vec2,
}

/// Arclength-parameterised polyline. Serialises as its vertex list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec2>", into = "Vec<Vec2>")]
pub struct Polyline {
    points: Vec<Vec2>,
    cumulative: Vec<f64>,
}

impl Polyline {
    /// Needs at least two vertices; zero-length segments are kept but never
    /// win a projection tie.
    pub fn new(points: Vec<Vec2>) -> Option<Self> {
        if points.len() < 2 {
            return None;
        }
        let mut cumulative = Vec::with_capacity(points.len());
        let mut s = 0.0;
        cumulative.push(0.0);
        for w in points.windows(2) {
            s += w[0].distance(w[1]);
            cumulative.push(s);
        }
        Some(Self { points, cumulative })
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().expect("at least two vertices")
    }

    pub fn project(&self, p: Vec2) -> Projection {
        let mut best = Projection {
            distance: f64::INFINITY,
            arclength: 0.0,
            point: self.points[0],
        };
        for (i, w) in self.points.windows(2).enumerate() {
            let seg = w[1].sub(w[0]);
            let len2 = seg.dot(seg);
            let t = if len2 > 0.0 {
                (p.sub(w[0]).dot(seg) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = w[0].add(seg.scale(t));
            let d = p.distance(q);
            if d < best.distance {
                best = Projection {
                    distance: d,
                    arclength: self.cumulative[i] + t * len2.sqrt(),
                    point: q,
                };
            }
        }
        best
    }

    /// Point and unit tangent at arclength `s`, clamped to the polyline.
    pub fn sample(&self, s: f64) -> (Vec2, Vec2) {
        let s = s.clamp(0.0, self.length());
        let mut i = self.cumulative.partition_point(|&c| c <= s).saturating_sub(1);
        i = i.min(self.points.len() - 2);
        // Skip degenerate segments so the tangent is defined.
        while i + 2 < self.points.len() && self.cumulative[i + 1] - self.cumulative[i] == 0.0 {
            i += 1;
        }
        let (a, b) = (self.points[i], self.points[i + 1]);
        let len = self.cumulative[i + 1] - self.cumulative[i];
        let tangent = if len > 0.0 {
            b.sub(a).scale(1.0 / len)
        } else {
            Vec2::new(1.0, 0.0)
        };
        let t = if len > 0.0 { (s - self.cumulative[i]) / len } else { 0.0 };
        (a.add(b.sub(a).scale(t)), tangent)
    }

    pub fn transformed(&self, tf: &RigidTransform) -> Polyline {
        Polyline::new(self.points.iter().map(|&p| tf.apply(p)).collect()).expect("same vertex count")
    }
}

impl TryFrom<Vec<Vec2>> for Polyline {
    type Error = String;

    fn try_from(points: Vec<Vec2>) -> Result<Self, String> {
        Polyline::new(points).ok_or_else(|| "polyline needs at least two vertices".to_string())
    }
}

impl From<Polyline> for Vec<Vec2> {
    fn from(p: Polyline) -> Self {
        p.points
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_stays_in_half_open_interval() {
        assert_eq!(wrap_angle(-PI), PI);
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn inverse_undoes_transform() {
        let tf = RigidTransform::new(3.0, -7.5, 2.2);
        let p = Vec2::new(1.25, 4.0);
        let back = tf.inverse().apply(tf.apply(p));
        assert!(back.distance(p) < 1e-12);
        let id = tf.compose(&tf.inverse());
        assert!(id.tx.abs() < 1e-12 && id.ty.abs() < 1e-12 && id.yaw.abs() < 1e-12);
    }

    #[test]
    fn projection_onto_l_shape() {
        let line = Polyline::new(vec![Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0), Vec2::new(10.0, 10.0)]).unwrap();
        let p = line.project(Vec2::new(4.0, 2.0));
        assert!((p.distance - 2.0).abs() < 1e-12 && (p.arclength - 4.0).abs() < 1e-12);
        let p = line.project(Vec2::new(12.0, 6.0));
        assert!((p.arclength - 16.0).abs() < 1e-12);
        let (pt, tan) = line.sample(15.0);
        assert!(pt.distance(Vec2::new(10.0, 5.0)) < 1e-12);
        assert!(tan.distance(Vec2::new(0.0, 1.0)) < 1e-12);
    }
}
