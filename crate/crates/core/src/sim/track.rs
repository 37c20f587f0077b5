use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use super::geom::{closed_segments, inset, point_in_polygon, signed_area, v2, Segment, V2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrackShape {
    L,
    #[serde(rename = "oval", alias = "Oval")]
    Oval,
}

impl std::str::FromStr for TrackShape {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "L" | "l" => Ok(TrackShape::L),
            "oval" | "Oval" => Ok(TrackShape::Oval),
            _ => Err(format!("unknown track shape `{s}` (expected L or oval)")),
        }
    }
}

const ARC_SEGMENTS: usize = 24;

/// Closed lane between an outer and an inner wall, driven counter-clockwise.
#[derive(Clone, Debug)]
pub struct Track {
    pub outer: Vec<V2>,
    pub inner: Vec<V2>,
    pub center: Vec<V2>,
    /// Arc length at each centerline vertex; `cum[0] = 0`.
    cum: Vec<f64>,
    pub length: f64,
    pub lane_width: f64,
    pub walls: Vec<Segment>,
    pub room: Vec<V2>,
    /// Arc-length positions of the four start points.
    pub starts: [f64; 4],
}

fn stadium(width: f64, height: f64, d: f64) -> Vec<V2> {
    let r0 = height / 2.0;
    let r = r0 - d;
    let (c1, c2) = (v2(r0, r0), v2(width - r0, r0));
    let mut p = Vec::with_capacity(2 * ARC_SEGMENTS + 2);
    for k in 0..=ARC_SEGMENTS {
        let a = -FRAC_PI_2 + PI * k as f64 / ARC_SEGMENTS as f64;
        p.push(c2 + V2::from_angle(a) * r);
    }
    for k in 0..=ARC_SEGMENTS {
        let a = FRAC_PI_2 + PI * k as f64 / ARC_SEGMENTS as f64;
        p.push(c1 + V2::from_angle(a) * r);
    }
    p
}

impl Track {
    pub fn new(shape: TrackShape, width: f64, height: f64, lane_width: f64) -> Result<Self, String> {
        let (outer, inner, center, starts_at): (Vec<V2>, Vec<V2>, Vec<V2>, Box<dyn Fn(&[V2], &[f64]) -> [f64; 4]>) =
            match shape {
                TrackShape::L => {
                    let (w2, h2) = (width / 2.0, height / 2.0);
                    let outer = vec![
                        v2(0.0, 0.0),
                        v2(width, 0.0),
                        v2(width, h2),
                        v2(w2, h2),
                        v2(w2, height),
                        v2(0.0, height),
                    ];
                    if lane_width >= h2.min(w2) {
                        return Err(format!("lane width {lane_width} leaves no island in the L"));
                    }
                    let inner = inset(&outer, lane_width);
                    let center = inset(&outer, lane_width / 2.0);
                    // Midpoints of the four longest centerline segments.
                    let f = |c: &[V2], cum: &[f64]| {
                        let mut segs: Vec<(f64, f64)> = (0..c.len())
                            .map(|i| {
                                let l = (c[(i + 1) % c.len()] - c[i]).norm();
                                (l, cum[i] + l / 2.0)
                            })
                            .collect();
                        segs.sort_by(|a, b| b.0.total_cmp(&a.0));
                        let mut s: Vec<f64> = segs[..4].iter().map(|s| s.1).collect();
                        s.sort_by(f64::total_cmp);
                        [s[0], s[1], s[2], s[3]]
                    };
                    (outer, inner, center, Box::new(f))
                }
                TrackShape::Oval => {
                    if lane_width >= height / 2.0 {
                        return Err(format!("lane width {lane_width} leaves no island in the oval"));
                    }
                    let outer = stadium(width, height, 0.0);
                    let inner = stadium(width, height, lane_width);
                    let center = stadium(width, height, lane_width / 2.0);
                    // Apexes of both arcs and midpoints of both straights.
                    let f = |c: &[V2], cum: &[f64]| {
                        let total = cum[c.len()];
                        let arc = cum[ARC_SEGMENTS];
                        let straight = (total - 2.0 * arc) / 2.0;
                        [arc / 2.0, arc + straight / 2.0, arc + straight + arc / 2.0, total - straight / 2.0]
                    };
                    (outer, inner, center, Box::new(f))
                }
            };
        debug_assert!(signed_area(&outer) > 0.0);
        let mut cum = vec![0.0];
        for s in closed_segments(&center) {
            cum.push(cum.last().unwrap() + s.len());
        }
        let length = *cum.last().unwrap();
        let starts = starts_at(&center, &cum);
        let walls = closed_segments(&outer).chain(closed_segments(&inner)).collect();
        let margin = 1.0;
        let (xmax, ymax) = outer
            .iter()
            .fold((f64::MIN, f64::MIN), |(x, y), p| (x.max(p.x), y.max(p.y)));
        let room = vec![
            v2(-margin, -margin),
            v2(xmax + margin, -margin),
            v2(xmax + margin, ymax + margin),
            v2(-margin, ymax + margin),
        ];
        Ok(Self {
            outer,
            inner,
            center,
            cum,
            length,
            lane_width,
            walls,
            room,
            starts,
        })
    }

    /// Centerline point and heading at arc length `s` (wrapped).
    pub fn point_at(&self, s: f64) -> (V2, f64) {
        let s = s.rem_euclid(self.length);
        let i = match self.cum.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.center.len() - 1),
            Err(i) => i - 1,
        };
        let a = self.center[i];
        let b = self.center[(i + 1) % self.center.len()];
        let seg_len = self.cum[i + 1] - self.cum[i];
        let t = if seg_len > 0.0 { (s - self.cum[i]) / seg_len } else { 0.0 };
        (a + (b - a) * t, (b - a).angle())
    }

    /// Arc length of the centerline point nearest to `p` and its distance.
    pub fn project(&self, p: V2) -> (f64, f64) {
        let mut best = (0.0, f64::INFINITY);
        for (i, seg) in closed_segments(&self.center).enumerate() {
            let t = seg.closest_param(p);
            let d = (seg.a + (seg.b - seg.a) * t - p).norm();
            if d < best.1 {
                best = (self.cum[i] + t * seg.len(), d);
            }
        }
        best
    }

    /// Left-hand unit normal of the centerline at `s`.
    pub fn normal_at(&self, s: f64) -> V2 {
        V2::from_angle(self.point_at(s).1).perp()
    }

    pub fn on_lane(&self, p: V2) -> bool {
        point_in_polygon(p, &self.outer) && !point_in_polygon(p, &self.inner)
    }

    /// Minimum distance from `p` to any track wall.
    pub fn wall_distance(&self, p: V2) -> f64 {
        self.walls.iter().map(|w| w.distance(p)).fold(f64::INFINITY, f64::min)
    }
}
