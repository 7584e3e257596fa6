use std::time::Instant;

use quadbench::actuation::ActionSpace;
use quadbench::bench::*;
use quadbench::dynamics::PhysParams;
use quadbench::env::Perturbation;
use quadbench::math::Vec3;
use quadbench::mpc::{MpcConfig, MpcVariant};
use quadbench::trajgen::{gen_circle, hover, Trajectory, SAMPLE_DT};

fn hover_traj(duration: f64) -> Trajectory {
    Trajectory::sample(&hover(Vec3::new(0.0, 0.0, 2.0), duration), &PhysParams::default(), SAMPLE_DT, "hover").unwrap()
}

fn mpc(variant: MpcVariant) -> MpcController {
    MpcController::new(MpcConfig { variant, ..MpcConfig::default() }, PhysParams::default()).unwrap()
}

fn setup() -> TrackingSetup {
    TrackingSetup {
        keep_log: false,
        ..TrackingSetup::default()
    }
}

#[test]
fn feedforward_holds_hover() {
    let traj = hover_traj(1.0);
    for space in [ActionSpace::Srt, ActionSpace::Ctbr] {
        let mut c = FeedforwardController { space, dt: 0.02 };
        let (r, log) = run_tracking(&mut c, &traj, &TrackingSetup::default()).unwrap();
        assert!(!r.crashed);
        assert!(r.avg_error_cm < 1.0, "{space}: {}", r.avg_error_cm);
        assert_eq!(log.rows.len(), 50);
        assert_eq!(log.status, EpisodeStatus::Completed);
    }
}

#[test]
fn zero_thrust_falls_in_free_fall_time() {
    let traj = hover_traj(2.0);
    let params = PhysParams::default();
    let mut c = ZeroThrustController { dt: 0.01 };
    let (r, log) = run_tracking(&mut c, &traj, &setup()).unwrap();
    assert!(r.crashed);
    let free_fall = (2.0 * 2.0 / params.gravity.norm()).sqrt();
    let t = r.crash_time.unwrap();
    // rotors spin down first, so the fall starts a little late
    assert!(t >= free_fall && t <= free_fall + 3.0 * params.motor_time_constant + 0.01, "{t} vs {free_fall}");
    assert!(log.rows.is_empty());
}

#[test]
fn mpc_ctbr_holds_hover() {
    let traj = hover_traj(3.0);
    let (r, _) = run_tracking(&mut mpc(MpcVariant::Ctbr), &traj, &setup()).unwrap();
    assert!(!r.crashed);
    assert!(r.avg_error_cm <= 0.5, "{}", r.avg_error_cm);
}

#[test]
fn mpc_tracks_fast_circle() {
    let sig = gen_circle(5.0, 0.0, 5.0, 8.0).unwrap();
    let traj = Trajectory::sample(&sig, &PhysParams::default(), SAMPLE_DT, "circle").unwrap();
    let start = Instant::now();
    let (r, log) = run_tracking(&mut mpc(MpcVariant::Ctbr), &traj, &TrackingSetup::default()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(!r.crashed);
    assert!(r.avg_error_cm <= 5.0, "{}", r.avg_error_cm);
    assert!(elapsed < 120.0, "{elapsed} s");
    let info = log.rows.last().unwrap().solve.unwrap();
    assert!(!info.fallback);
}

#[test]
fn ctbr_hover_survives_large_latency() {
    let traj = hover_traj(3.0);
    let mut s = setup();
    s.start_perturbation = Perturbation::default();
    s.seed = 3;
    let (base, _) = run_tracking(&mut mpc(MpcVariant::Ctbr), &traj, &s).unwrap();
    s.env.latency = 0.06;
    let (r, _) = run_tracking(&mut mpc(MpcVariant::Ctbr), &traj, &s).unwrap();
    assert!(!r.crashed, "crashed at {:?}", r.crash_time);
    assert!(r.avg_error_cm <= 2.0 * base.avg_error_cm, "{} vs {}", r.avg_error_cm, base.avg_error_cm);
}

#[test]
fn measurement_and_command_latency_agree_at_zero() {
    let traj = hover_traj(1.0);
    let mut s = TrackingSetup {
        start_perturbation: Perturbation::default(),
        seed: 5,
        ..TrackingSetup::default()
    };
    let (a, la) = run_tracking(&mut mpc(MpcVariant::Srt), &traj, &s).unwrap();
    s.latency_mode = LatencyMode::Measurement;
    let (b, lb) = run_tracking(&mut mpc(MpcVariant::Srt), &traj, &s).unwrap();
    assert_eq!(a.avg_error_cm, b.avg_error_cm);
    assert_eq!(la.rows.last().unwrap().position, lb.rows.last().unwrap().position);
}

#[test]
fn measurement_latency_shows_old_state() {
    let traj = hover_traj(0.2);
    struct Recorder(Vec<f64>);
    impl Controller for Recorder {
        fn id(&self) -> String {
            "recorder".into()
        }
        fn action_space(&self) -> ActionSpace {
            ActionSpace::Srt
        }
        fn control_dt(&self) -> f64 {
            0.01
        }
        fn reset(&mut self, _: &Trajectory) {}
        fn command(&mut self, x: &quadbench::dynamics::QuadState, _: &Trajectory, _: f64) -> quadbench::Result<quadbench::actuation::Command> {
            self.0.push(x.p.z);
            Ok(quadbench::actuation::Command::Srt([0.0; 4]))
        }
    }
    let mut s = setup();
    s.latency_mode = LatencyMode::Measurement;
    s.env.latency = 0.03;
    let mut rec = Recorder(Vec::new());
    run_tracking(&mut rec, &traj, &s).unwrap();
    let delayed = rec.0;
    s.env.latency = 0.0;
    let mut rec = Recorder(Vec::new());
    run_tracking(&mut rec, &traj, &s).unwrap();
    let fresh = rec.0;
    assert!(delayed[..4].iter().all(|&z| z == 2.0));
    for k in 4..fresh.len() {
        assert!((delayed[k] - fresh[k - 3]).abs() < 1e-12);
    }
}

#[test]
fn gain_grid_anchors() {
    // without rate feedback the start-up rates persist until the vehicle tips over
    let traj = hover_traj(15.0);
    let s = TrackingSetup {
        start_perturbation: Perturbation::default(),
        seed: 11,
        keep_log: false,
        ..TrackingSetup::default()
    };
    let factory = || -> quadbench::Result<Box<dyn Controller>> { Ok(Box::new(mpc(MpcVariant::Ctbr))) };
    let cells = gain_sweep(&factory, &traj, &[0.0, 1.0], &[0.0, 1.0], &s).unwrap();
    let (nominal, _) = run_tracking(&mut mpc(MpcVariant::Ctbr), &traj, &s).unwrap();
    let at = |p: f64, d: f64| cells.iter().find(|c| c.scale_p == p && c.scale_d == d).unwrap();
    assert_eq!(at(1.0, 1.0).result, nominal);
    assert!(at(0.0, 0.0).crashed);
    assert_eq!(at(0.0, 0.0).error_m, GAIN_ERROR_CLIP_M);
    let scales = default_gain_scales();
    assert_eq!(scales.len(), 11);
    assert!(scales.contains(&0.0) && scales.contains(&1.0) && *scales.last().unwrap() == 100.0);

    let srt = || -> quadbench::Result<Box<dyn Controller>> { Ok(Box::new(mpc(MpcVariant::Srt))) };
    assert!(gain_sweep(&srt, &traj, &[1.0], &[1.0], &s).is_err());
}

fn first_doubling(rows: &[BenchResult]) -> Option<f64> {
    let base = rows[0].avg_error_cm;
    rows.iter().find(|r| r.crashed || r.avg_error_cm > 2.0 * base).map(|r| r.latency)
}

fn crash_as_infinite(r: &BenchResult) -> f64 {
    r.reported_error_cm().unwrap_or(f64::INFINITY)
}

#[test]
fn rotor_thrust_control_degrades_first_under_latency() {
    let sig = gen_circle(2.0, 0.0, 3.0, 5.0).unwrap();
    let traj = Trajectory::sample(&sig, &PhysParams::default(), SAMPLE_DT, "circle").unwrap();
    let lat = default_latencies();
    let s = setup();
    let srt = || -> quadbench::Result<Box<dyn Controller>> { Ok(Box::new(mpc(MpcVariant::Srt))) };
    let ctbr = || -> quadbench::Result<Box<dyn Controller>> { Ok(Box::new(mpc(MpcVariant::Ctbr))) };
    let a = latency_sweep(&srt, &traj, &lat, &[0], &s).unwrap();
    let b = latency_sweep(&ctbr, &traj, &lat, &[0], &s).unwrap();
    let ea: Vec<f64> = a.iter().map(crash_as_infinite).collect();
    let eb: Vec<f64> = b.iter().map(crash_as_infinite).collect();
    for w in ea.windows(2) {
        assert!(w[1] >= w[0], "{ea:?}");
    }
    let da = first_doubling(&a).expect("rotor-thrust error never doubled");
    assert!(first_doubling(&b).is_none_or(|db| da < db), "{ea:?} vs {eb:?}");
    // 40 ms hurts rotor thrusts relatively more
    assert!(ea[4] / ea[0] > eb[4] / eb[0], "{ea:?} vs {eb:?}");
}

#[test]
fn result_csv_has_fixed_header_and_crash_cells() {
    let traj = hover_traj(2.0);
    let (crash, _) = run_tracking(&mut ZeroThrustController { dt: 0.01 }, &traj, &setup()).unwrap();
    let (ok, _) = run_tracking(&mut FeedforwardController { space: ActionSpace::Srt, dt: 0.01 }, &traj, &setup()).unwrap();
    assert_eq!(crash.reported_error_cm(), None);
    assert!(ok.reported_error_cm().is_some());
    let mut buf = Vec::new();
    write_results(&[ok, crash], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), RESULT_HEADER.join(","));
    assert!(lines.next().unwrap().ends_with("completed"));
    let crashed = lines.next().unwrap();
    assert!(crashed.contains(",crash,crash,crash,true,"), "{crashed}");
}

#[test]
fn episode_log_csv_round_trips_through_a_reader() {
    let traj = hover_traj(0.5);
    let (_, log) = run_tracking(&mut mpc(MpcVariant::Ctbr), &traj, &TrackingSetup::default()).unwrap();
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    let mut rd = csv::Reader::from_reader(buf.as_slice());
    assert_eq!(rd.headers().unwrap().len(), 29);
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 50);
    let pz: f64 = rows[10][3].parse().unwrap();
    assert!((pz - 2.0).abs() < 0.01);
    assert!(!rows[10][28].is_empty());

    let mut buf = Vec::new();
    log.write_csv_with(&mut buf, false).unwrap();
    let mut rd = csv::Reader::from_reader(buf.as_slice());
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert!(rows.iter().all(|r| r.len() == 29 && r[28].is_empty() && !r[26].is_empty()));
}
