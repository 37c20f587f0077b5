//! Obstacles placed on the lane for the second evaluation phase.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geom::{point_in_polygon, V2};
use super::track::Track;

pub const OBJECT_KINDS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPlacement {
    /// `0..4`: red box, blue cylinder, green wedge, yellow post.
    pub object_id: usize,
    pub lap_fraction: f64,
    /// Offset from the centerline in units of half the lane width.
    pub lateral_offset: f64,
    pub rotation: f64,
}

/// Outline in the object's frame, its height in meters and its color.
pub fn object_model(id: usize) -> (Vec<V2>, f64, [f64; 3]) {
    use super::geom::v2;
    match id % OBJECT_KINDS {
        0 => (
            vec![v2(-0.06, -0.06), v2(0.06, -0.06), v2(0.06, 0.06), v2(-0.06, 0.06)],
            0.12,
            [200.0, 40.0, 40.0],
        ),
        1 => (
            (0..12)
                .map(|k| V2::from_angle(TAU * k as f64 / 12.0) * 0.06)
                .collect(),
            0.16,
            [40.0, 70.0, 210.0],
        ),
        2 => (
            vec![v2(-0.07, -0.06), v2(0.08, 0.0), v2(-0.07, 0.06)],
            0.10,
            [40.0, 170.0, 60.0],
        ),
        _ => (
            vec![v2(-0.04, -0.04), v2(0.04, -0.04), v2(0.04, 0.04), v2(-0.04, 0.04)],
            0.22,
            [230.0, 210.0, 40.0],
        ),
    }
}

/// World-frame outline of a placed object.
pub fn object_polygon(track: &Track, p: &ObjectPlacement) -> Vec<V2> {
    let s = p.lap_fraction * track.length;
    let (c, _) = track.point_at(s);
    let center = c + track.normal_at(s) * (p.lateral_offset * track.lane_width / 2.0);
    let (cos, sin) = (p.rotation.cos(), p.rotation.sin());
    object_model(p.object_id)
        .0
        .into_iter()
        .map(|q| center + super::geom::v2(q.x * cos - q.y * sin, q.x * sin + q.y * cos))
        .collect()
}

/// Every vertex on the lane and no wall crossing the outline.
pub fn placement_in_bounds(track: &Track, p: &ObjectPlacement) -> bool {
    let poly = object_polygon(track, p);
    poly.iter().all(|&q| track.on_lane(q) && track.wall_distance(q) > 1e-6)
        && !track.outer.iter().chain(&track.inner).any(|&w| point_in_polygon(w, &poly))
}

/// Seeded placements: a count drawn from `count_range` (inclusive), distinct
/// object ids, each fully on the lane and clear of every start position and
/// of the other objects.
pub fn place_objects(track: &Track, seed: u64, count_range: (usize, usize)) -> Result<Vec<ObjectPlacement>, String> {
    let (lo, hi) = count_range;
    if lo > hi || hi > OBJECT_KINDS {
        return Err(format!("object count range {lo}..={hi} outside 0..={OBJECT_KINDS}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(lo..=hi);
    let mut ids: Vec<usize> = (0..OBJECT_KINDS).collect();
    ids.shuffle(&mut rng);
    let mut out: Vec<ObjectPlacement> = Vec::with_capacity(count);
    for &object_id in &ids[..count] {
        let mut placed = false;
        for _ in 0..200 {
            let p = ObjectPlacement {
                object_id,
                lap_fraction: rng.random_range(0.0..1.0),
                lateral_offset: rng.random_range(-1.0..=1.0),
                rotation: rng.random_range(0.0..TAU),
            };
            let s = p.lap_fraction * track.length;
            let clear_of_starts = track.starts.iter().all(|&st| {
                let d = (s - st).rem_euclid(track.length);
                d.min(track.length - d) > 0.5
            });
            let clear_of_others = out.iter().all(|o| {
                let d = (s - o.lap_fraction * track.length).rem_euclid(track.length);
                d.min(track.length - d) > 0.6
            });
            if clear_of_starts && clear_of_others && placement_in_bounds(track, &p) {
                out.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(format!("could not place object {object_id} after 200 attempts"));
        }
    }
    Ok(out)
}
