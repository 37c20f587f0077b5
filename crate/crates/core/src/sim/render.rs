//! First-person column raycaster.
//!
//! Every column casts one ray and collects all wall, object and room hits;
//! spans are painted far to near so low track walls reveal the room behind
//! them. Pixels left uncovered are floor (below the horizon) or ceiling.

use super::geom::{closed_segments, V2};
use super::objects::object_model;
use super::{World, WorldState};
use crate::frame::Frame;
use crate::tensor::init::derive_seed;

pub const CAMERA_HEIGHT: f64 = 0.1;
pub const TRACK_WALL_HEIGHT: f64 = 0.15;
pub const ROOM_WALL_HEIGHT: f64 = 2.5;
/// Horizon row as a fraction of frame height. The lens is shifted rather
/// than tilted, so verticals stay vertical and the near floor is in view.
pub const HORIZON_FRACTION: f64 = 0.3;

const CEILING: [f64; 3] = [215.0, 215.0, 205.0];
const LANE: [f64; 3] = [95.0, 95.0, 100.0];
const STRIPE: [f64; 3] = [225.0, 195.0, 70.0];
/// Half width of the painted centerline stripe, meters.
pub const STRIPE_HALF_WIDTH: f64 = 0.02;
const CARPET: [[f64; 3]; 2] = [[150.0, 125.0, 95.0], [132.0, 108.0, 82.0]];
const OUTER_WALL: [f64; 3] = [225.0, 225.0, 220.0];
const INNER_WALL: [f64; 3] = [40.0, 60.0, 150.0];
const DECOR: [[f64; 3]; 6] = [
    [180.0, 170.0, 150.0],
    [120.0, 140.0, 160.0],
    [170.0, 110.0, 90.0],
    [90.0, 130.0, 100.0],
    [200.0, 190.0, 120.0],
    [140.0, 120.0, 170.0],
];

#[derive(Clone, Copy)]
enum Surface {
    Outer,
    Inner,
    Object { idx: usize, normal: V2 },
    Room { wall: usize, along: f64 },
}

struct Hit {
    depth: f64,
    top: f64,
    surface: Surface,
    height: f64,
}

fn decor_color(seed: u64, wall: usize, along: f64, height: f64) -> [f64; 3] {
    if height < 0.1 {
        return [70.0, 60.0, 55.0];
    }
    let panel = (along / 0.4).floor() as i64 as u64;
    let h = derive_seed(seed, ((wall as u64) << 32) ^ panel);
    let base = DECOR[(h % DECOR.len() as u64) as usize];
    // Some panels carry a framed picture.
    if (h >> 8) % 3 == 0 && (0.8..1.6).contains(&height) {
        let frac = along / 0.4 - (along / 0.4).floor();
        if (0.15..0.85).contains(&frac) {
            return DECOR[((h >> 16) % DECOR.len() as u64) as usize].map(|v| 255.0 - v);
        }
    }
    base
}

fn floor_color(world: &World, p: V2) -> [f64; 3] {
    if world.track.on_lane(p) {
        if world.track.project(p).1 <= STRIPE_HALF_WIDTH {
            STRIPE
        } else {
            LANE
        }
    } else {
        let k = ((p.x / 0.3).floor() as i64 + (p.y / 0.3).floor() as i64).rem_euclid(2) as usize;
        CARPET[k]
    }
}

fn shade(color: [f64; 3], factor: f64) -> [f64; 3] {
    color.map(|c| c * factor)
}

fn depth_fade(depth: f64) -> f64 {
    1.0 / (1.0 + 0.12 * depth)
}

/// Render the camera view of `state`. Pure; the lighting factor scales the
/// linear color before rounding to bytes.
pub fn render(world: &World, state: &WorldState) -> Frame {
    let c = &world.config;
    let (w, h) = (c.frame_width, c.frame_height);
    let light = c.light_factor();
    let half_fov = (c.fov_deg.to_radians() / 2.0).tan();
    let focal = (w as f64 / 2.0) / half_fov;
    let horizon = h as f64 * HORIZON_FRACTION;
    let origin = state.pose.pos();
    let fwd = V2::from_angle(state.pose.heading);
    let left = fwd.perp();

    let mut segments: Vec<(super::geom::Segment, Surface, f64)> = Vec::new();
    let n_outer = world.track.outer.len();
    for (i, s) in world.track.walls.iter().enumerate() {
        let surf = if i < n_outer { Surface::Outer } else { Surface::Inner };
        segments.push((*s, surf, TRACK_WALL_HEIGHT));
    }
    for (idx, poly) in world.object_polys.iter().enumerate() {
        let height = object_model(c.objects[idx].object_id).1;
        for s in closed_segments(poly) {
            let normal = (s.b - s.a).unit().perp();
            segments.push((s, Surface::Object { idx, normal }, height));
        }
    }
    for (wall, s) in closed_segments(&world.track.room).enumerate() {
        segments.push((s, Surface::Room { wall, along: 0.0 }, ROOM_WALL_HEIGHT));
    }

    let mut data = vec![0u8; w * h * 3];
    let mut column: Vec<Option<[f64; 3]>> = vec![None; h];
    let mut hits: Vec<Hit> = Vec::new();
    for x in 0..w {
        let xc = (2.0 * (x as f64 + 0.5) / w as f64 - 1.0) * half_fov;
        let dir = fwd - left * xc;
        hits.clear();
        for (seg, surf, height) in &segments {
            if let Some((t, u)) = seg.ray_hit(origin, dir) {
                let surface = match *surf {
                    Surface::Room { wall, .. } => Surface::Room {
                        wall,
                        along: u * seg.len(),
                    },
                    s => s,
                };
                hits.push(Hit {
                    depth: t,
                    top: horizon - (height - CAMERA_HEIGHT) * focal / t,
                    surface,
                    height: *height,
                });
            }
        }
        hits.sort_by(|a, b| b.depth.total_cmp(&a.depth));
        column.iter_mut().for_each(|p| *p = None);
        for hit in &hits {
            let bottom = horizon + CAMERA_HEIGHT * focal / hit.depth;
            let fade = depth_fade(hit.depth);
            let y0 = (hit.top - 0.5).ceil().max(0.0) as usize;
            let y1 = ((bottom - 0.5).ceil().max(0.0) as usize).min(h);
            for (y, px) in column.iter_mut().enumerate().take(y1).skip(y0) {
                let color = match hit.surface {
                    Surface::Outer => OUTER_WALL,
                    Surface::Inner => INNER_WALL,
                    Surface::Object { idx, normal } => {
                        let base = object_model(c.objects[idx].object_id).2;
                        let lit = 0.7 + 0.3 * normal.dot(V2 { x: 0.6, y: 0.8 }).abs();
                        shade(base, lit)
                    }
                    Surface::Room { wall, along } => {
                        let wy = CAMERA_HEIGHT + (horizon - (y as f64 + 0.5)) * hit.depth / focal;
                        decor_color(c.decor_seed, wall, along, wy.clamp(0.0, hit.height))
                    }
                };
                *px = Some(shade(color, fade));
            }
        }
        for (y, px) in column.iter().enumerate() {
            let yc = y as f64 + 0.5;
            let color = match px {
                Some(c) => *c,
                None if yc > horizon => {
                    let z = CAMERA_HEIGHT * focal / (yc - horizon);
                    shade(floor_color(world, origin + dir * z), depth_fade(z))
                }
                None => CEILING,
            };
            let o = (y * w + x) * 3;
            for k in 0..3 {
                data[o + k] = (color[k] * light).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Frame::new(w, h, 3, data).expect("render size")
}
