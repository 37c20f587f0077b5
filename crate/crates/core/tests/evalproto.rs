use gaplab::evalproto::{self, run_trial, Outcome, Rules, TrialLabels, TrialResult};
use gaplab::sim::drivers::{Alternator, Constant, Controller, LineFollower, Replay, Shuttle};
use gaplab::sim::geom::Segment;
use gaplab::sim::{Action, Lighting, TrackShape, World, WorldConfig};
use gaplab::tensor::Network;
use gaplab::zoo::{self, ArchitectureId, Family, InputClass};

fn labels() -> TrialLabels {
    TrialLabels {
        arch: "scripted".into(),
        input_class: "none".into(),
        phase: 1,
    }
}

fn exact() -> Rules {
    Rules {
        jitter_m: 0.0,
        jitter_deg: 0.0,
        ..Rules::default()
    }
}

fn trial(world: &World, ctl: &mut dyn Controller, position: usize) -> TrialResult {
    run_trial(world, ctl, position, Lighting::High, 1, &exact(), &labels())
}

fn replayed(world: &World, r: &TrialResult) -> TrialResult {
    let actions = r.trajectory[1..].iter().map(|row| row.action).collect();
    run_trial(world, &mut Replay::new(actions), r.position, r.lighting, r.seed, &exact(), &labels())
}

#[test]
fn always_forward_stops_at_the_wall_ahead() {
    let w = World::new(WorldConfig::default()).unwrap();
    let r = trial(&w, &mut Constant(Action::Forward), 0);
    assert_eq!(r.outcome, Outcome::CollisionStuck);
    // Distance to the first wall along the start heading, less the radius
    // projected onto the wall normal.
    let start = w.state_at(0);
    let p = start.pose.pos();
    let dir = gaplab::sim::V2::from_angle(start.pose.heading);
    let (t, wall) = w
        .track
        .walls
        .iter()
        .filter_map(|s: &Segment| s.ray_hit(p, dir).filter(|h| (0.0..=1.0).contains(&h.1)).map(|(t, _)| (t, *s)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap();
    let along = (wall.b - wall.a).unit();
    let cos = dir.cross(along).abs();
    let reach = t - w.config.vehicle_radius / cos;
    let expect = reach / w.config.speed;
    assert!((r.duration_s - expect).abs() <= w.config.dt() + 1e-9, "{} vs {expect}", r.duration_s);
    assert_eq!(replayed(&w, &r), r);
}

#[test]
fn line_follower_lap_time_is_near_closed_form() {
    for shape in [TrackShape::L, TrackShape::Oval] {
        let w = World::new(WorldConfig {
            track: shape,
            ..WorldConfig::default()
        })
        .unwrap();
        let r = trial(&w, &mut LineFollower::new(), 0);
        assert_eq!(r.outcome, Outcome::LapComplete);
        let turn = match shape {
            TrackShape::L => 3.0 * std::f64::consts::PI,
            TrackShape::Oval => 2.0 * std::f64::consts::PI,
        };
        let expect = w.track.length / w.config.speed + turn / w.config.pivot_rate_deg.to_radians();
        assert!((r.duration_s / expect - 1.0).abs() < 0.1, "{shape:?}: {} vs {expect}", r.duration_s);
        assert_eq!(replayed(&w, &r), r);
    }
}

#[test]
fn alternator_times_out_at_ten_seconds() {
    let w = World::new(WorldConfig::default()).unwrap();
    let r = trial(&w, &mut Alternator { period: 10 }, 1);
    assert_eq!(r.outcome, Outcome::OscillationTimeout);
    assert!((r.duration_s - 10.0).abs() < 1e-9, "{}", r.duration_s);
    assert_eq!(replayed(&w, &r), r);
}

#[test]
fn shuttle_triggers_third_wrong_direction() {
    let w = World::new(WorldConfig::default()).unwrap();
    let r = trial(&w, &mut Shuttle::new(0.25, 0.07), 2);
    assert_eq!(r.outcome, Outcome::WrongDirection, "{} {:?}", r.duration_s, r.trajectory.last());
    assert_eq!(replayed(&w, &r), r);
}

#[test]
fn no_movement_under_translation_is_stuck() {
    let w = World::new(WorldConfig {
        speed: 1e-5,
        ..WorldConfig::default()
    })
    .unwrap();
    let r = trial(&w, &mut Constant(Action::Forward), 0);
    assert_eq!(r.outcome, Outcome::CollisionStuck);
    assert!((r.duration_s - 2.0).abs() < 1e-9);
    // Pivoting in place is not stuck; it runs out the progress window.
    let r = trial(&w, &mut Constant(Action::LeftPivot), 0);
    assert_eq!(r.outcome, Outcome::OscillationTimeout);
}

#[test]
fn trials_are_seeded_and_replayable() {
    let w = World::new(WorldConfig::default()).unwrap();
    let net = Network::new(zoo::build(&ArchitectureId::new(Family::Fc3, InputClass::Framestack), 26, 64).unwrap(), 3).unwrap();
    let mut d = evalproto::NetworkDriver::new(net, InputClass::Framestack);
    let a = run_trial(&w, &mut d, 1, Lighting::Low, 99, &Rules::default(), &labels());
    let b = run_trial(&w, &mut d, 1, Lighting::Low, 99, &Rules::default(), &labels());
    assert_eq!(a, b);
    assert!(a.trajectory.windows(2).all(|p| p[0].time < p[1].time));
    assert_eq!(replayed_rules(&w, &a, &Rules::default()), a);
    let c = run_trial(&w, &mut d, 1, Lighting::Low, 100, &Rules::default(), &labels());
    assert_ne!(a.trajectory[0], c.trajectory[0]);
}

fn replayed_rules(world: &World, r: &TrialResult, rules: &Rules) -> TrialResult {
    let actions = r.trajectory[1..].iter().map(|row| row.action).collect();
    run_trial(world, &mut Replay::new(actions), r.position, r.lighting, r.seed, rules, &labels())
}

#[test]
fn campaign_files_and_summary() {
    let w = World::new(WorldConfig::default()).unwrap();
    let c = evalproto::run_campaign(&w, &mut LineFollower::new(), 5, &Rules::default(), &labels());
    assert_eq!(evalproto::success_rate(&c).unwrap(), 1.0);
    let dir = tempfile::tempdir().unwrap();
    let s = c.save(dir.path()).unwrap();
    assert_eq!(s.completions, 40);
    let csv = std::fs::read_to_string(dir.path().join("campaign.csv")).unwrap();
    assert_eq!(csv.lines().count(), 41);
    assert!(csv.starts_with(evalproto::CAMPAIGN_HEADER));
    assert!(dir.path().join(evalproto::trajectory_file(39)).exists());
}

#[test]
fn fc_is_faster_than_vgg() {
    let frame = gaplab::frame::Frame::filled(64, 48, 3, 90);
    let rate = |f: Family| {
        let a = ArchitectureId::new(f, InputClass::Color);
        let net = Network::new(zoo::build(&a, 26, 64).unwrap(), 0).unwrap();
        evalproto::inference_rate(&net, InputClass::Color, &frame, 5, 10, false).unwrap()
    };
    let fc = rate(Family::Fc3);
    let vgg = rate(Family::Vgg);
    assert_eq!(fc.per_run.len(), 5);
    assert_eq!((fc.frame_width, fc.frame_height), (64, 48));
    assert!(fc.mean > vgg.mean, "{} vs {}", fc.mean, vgg.mean);
}
