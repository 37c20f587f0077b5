//! Phase-1 and phase-2 campaigns for the scripted expert itself. The expert
//! follows the centerline blind to objects, so phase 2 ends in collisions.

use gaplab::evalproto::{phase_two_config, run_campaign, success_rate, Rules, TrialLabels};
use gaplab::sim::drivers::LineFollower;
use gaplab::sim::{World, WorldConfig};

fn main() {
    let base = WorldConfig {
        frame_width: 32,
        frame_height: 24,
        ..Default::default()
    };
    for phase in [1u8, 2] {
        let config = if phase == 1 { base.clone() } else { phase_two_config(&base, 3).unwrap() };
        let world = World::new(config).unwrap();
        let mut expert = LineFollower::new();
        expert.tolerance = 20f64.to_radians();
        let labels = TrialLabels {
            arch: "expert".into(),
            input_class: "none".into(),
            phase,
        };
        let c = run_campaign(&world, &mut expert, 1, &Rules::default(), &labels);
        println!("phase {phase}: success {:.3} {:?}", success_rate(&c).unwrap(), c.outcome_counts());
    }
}
