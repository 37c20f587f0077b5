//! Path differences between expert runs from the same start positions.

use gaplab::analysis::{path_matrix, PathSample};
use gaplab::evalproto::{run_trial, Rules, TrialLabels};
use gaplab::sim::drivers::LineFollower;
use gaplab::sim::{Lighting, World, WorldConfig};

fn main() {
    let world = World::new(WorldConfig::default()).unwrap();
    let labels = TrialLabels {
        arch: "expert".into(),
        input_class: "none".into(),
        phase: 1,
    };
    let mut samples = Vec::new();
    for (name, tol) in [("tight", 6.0), ("loose", 20.0)] {
        let mut d = LineFollower::new();
        d.tolerance = f64::to_radians(tol);
        for seed in 0..3 {
            let t = run_trial(&world, &mut d, 0, Lighting::High, seed, &Rules::default(), &labels);
            samples.push(PathSample {
                model: name.into(),
                position: 0,
                points: t.trajectory.iter().map(|r| (r.x, r.y)).collect(),
            });
        }
    }
    let m = path_matrix(&samples).unwrap();
    println!("within {:?}\nbetween {:?}", m.within, m.between);
}
