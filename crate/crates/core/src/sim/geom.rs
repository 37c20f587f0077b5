use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct V2 {
    pub x: f64,
    pub y: f64,
}

pub const fn v2(x: f64, y: f64) -> V2 {
    V2 { x, y }
}

impl V2 {
    pub fn dot(self, o: V2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: V2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn unit(self) -> V2 {
        self * (1.0 / self.norm())
    }

    /// Rotated +90°.
    pub fn perp(self) -> V2 {
        v2(-self.y, self.x)
    }

    pub fn from_angle(a: f64) -> V2 {
        v2(a.cos(), a.sin())
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }
}

impl Add for V2 {
    type Output = V2;
    fn add(self, o: V2) -> V2 {
        v2(self.x + o.x, self.y + o.y)
    }
}

impl Sub for V2 {
    type Output = V2;
    fn sub(self, o: V2) -> V2 {
        v2(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for V2 {
    type Output = V2;
    fn mul(self, s: f64) -> V2 {
        v2(self.x * s, self.y * s)
    }
}

impl Neg for V2 {
    type Output = V2;
    fn neg(self) -> V2 {
        v2(-self.x, -self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: V2,
    pub b: V2,
}

impl Segment {
    pub fn len(&self) -> f64 {
        (self.b - self.a).norm()
    }

    /// Parameter in `[0, 1]` of the closest point to `p`.
    pub fn closest_param(&self, p: V2) -> f64 {
        let d = self.b - self.a;
        let l2 = d.dot(d);
        if l2 == 0.0 {
            0.0
        } else {
            ((p - self.a).dot(d) / l2).clamp(0.0, 1.0)
        }
    }

    pub fn distance(&self, p: V2) -> f64 {
        let t = self.closest_param(p);
        (self.a + (self.b - self.a) * t - p).norm()
    }

    /// Ray `o + t·d` against the segment: `(t, u)` with `t > 0` and `u` the
    /// segment parameter.
    pub fn ray_hit(&self, o: V2, d: V2) -> Option<(f64, f64)> {
        let e = self.b - self.a;
        let denom = d.cross(e);
        if denom.abs() < 1e-15 {
            return None;
        }
        let w = self.a - o;
        let t = w.cross(e) / denom;
        let u = w.cross(d) / denom;
        (t > 1e-9 && (0.0..=1.0).contains(&u)).then_some((t, u))
    }
}

pub fn closed_segments(poly: &[V2]) -> impl Iterator<Item = Segment> + '_ {
    (0..poly.len()).map(move |i| Segment {
        a: poly[i],
        b: poly[(i + 1) % poly.len()],
    })
}

pub fn signed_area(poly: &[V2]) -> f64 {
    closed_segments(poly).map(|s| s.a.cross(s.b)).sum::<f64>() / 2.0
}

pub fn point_in_polygon(p: V2, poly: &[V2]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Miter offset of a counter-clockwise polygon towards its interior.
pub fn inset(poly: &[V2], d: f64) -> Vec<V2> {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let prev = poly[(i + n - 1) % n];
            let cur = poly[i];
            let next = poly[(i + 1) % n];
            let na = (cur - prev).unit().perp();
            let nb = (next - cur).unit().perp();
            cur + (na + nb) * (d / (1.0 + na.dot(nb)))
        })
        .collect()
}

pub fn wrap_angle(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    let mut r = a.rem_euclid(t);
    if r > std::f64::consts::PI {
        r -= t;
    }
    r
}
