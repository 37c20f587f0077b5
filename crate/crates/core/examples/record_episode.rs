//! Drive the scripted expert around the L track and save the episode.
//!
//!     cargo run --example record_episode -- /tmp/episode

use gaplab::datapipe::{label_distribution, record_episode, Episode};
use gaplab::sim::drivers::LineFollower;
use gaplab::sim::{World, WorldConfig};

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "episode".into());
    let world = World::new(WorldConfig::default()).unwrap();
    let mut expert = LineFollower::new();
    expert.tolerance = 20f64.to_radians();
    let ep = record_episode(&world, &mut expert, 600, "example", "scripted", 0);
    ep.save(out.as_ref()).unwrap();
    let back = Episode::load(out.as_ref()).unwrap();
    assert_eq!(back, ep);
    println!("{} frames in {out}, labels {:?}", ep.len(), label_distribution([&ep]).unwrap());
}
