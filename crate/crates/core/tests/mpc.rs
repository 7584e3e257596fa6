use nalgebra::DVector;
use quadbench::actuation::{thrust_to_speed, Command, Mixer};
use quadbench::dynamics::{step_symplectic_euler, PhysParams, QuadState};
use quadbench::math::{Quat, Vec3};
use quadbench::mpc::*;
use quadbench::trajgen::{gen_circle, hover, Trajectory, SAMPLE_DT};
use rand::{Rng, SeedableRng};

fn nominal() -> (PhysParams, Mixer) {
    let p = PhysParams::default();
    let m = Mixer::new(&p);
    (p, m)
}

fn hover_input(p: &PhysParams) -> Input {
    Input::from_element(p.hover_thrust())
}

fn perturbed_state(p: &PhysParams) -> ModelState {
    let mut x = QuadState::hover(Vec3::new(0.5, -0.3, 3.0), p);
    x.q = Quat::from_axis_angle(&Vec3::new(0.4, -0.7, 0.2), 0.3);
    x.v = Vec3::new(1.0, 0.5, -0.4);
    x.w = Vec3::new(0.6, -0.8, 0.3);
    to_model(&x)
}

#[test]
fn hover_is_a_fixed_point() {
    let (p, m) = nominal();
    let x = to_model(&QuadState::hover(Vec3::new(1.0, 2.0, 3.0), &p));
    let next = rk4_step(&x, &hover_input(&p), 0.05, &p, &m);
    assert!((next - x).amax() < 1e-9);
}

#[test]
fn rk4_converges_at_fourth_order() {
    let (p, m) = nominal();
    let x0 = perturbed_state(&p);
    let u = Input::new(2.1, 1.7, 2.0, 1.8);
    let run = |dt: f64, t: f64| {
        let mut x = x0;
        for _ in 0..(t / dt).round() as usize {
            x = rk4_step(&x, &u, dt, &p, &m);
        }
        x
    };
    let reference = run(1e-4, 0.4);
    let e1 = (run(0.02, 0.4) - reference).norm();
    let e2 = (run(0.01, 0.4) - reference).norm();
    let ratio = e1 / e2;
    assert!((14.0..=18.0).contains(&ratio), "ratio {ratio} ({e1} / {e2})");
}

/// Largest componentwise gap between the 1 kHz simulator (rotors already at
/// their commanded speeds) and the RK4 model started from the same state.
fn integrator_gap(dt_sim: f64, horizon: f64) -> f64 {
    let (p, m) = nominal();
    // start perturbed at the environment's reset bounds
    let mut x = QuadState::hover(Vec3::new(0.2, -0.2, 2.2), &p);
    x.q = Quat::from_axis_angle(&Vec3::new(1.0, 1.0, 0.0), 10f64.to_radians());
    x.v = Vec3::new(0.2, -0.2, 0.2);
    x.w = Vec3::new(0.2, -0.2, 0.2);
    let h = p.hover_thrust();
    let thrusts = [h * 1.01, h * 0.99, h * 1.01, h * 0.99];
    let speeds = thrusts.map(|f| thrust_to_speed(f, &p));
    let mut sim = x;
    sim.rotor_speeds = speeds;
    let mut model = to_model(&x);
    let u = Input::from(thrusts);
    let mut worst: f64 = 0.0;
    for _ in 0..(horizon / dt_sim).round() as usize {
        sim = step_symplectic_euler(&sim, &p, &speeds, dt_sim);
        model = rk4_step(&model, &u, dt_sim, &p, &m);
        worst = worst.max((to_model(&sim) - model).amax());
    }
    worst
}

#[test]
fn rk4_agrees_with_simulator_when_motors_are_settled() {
    let short = integrator_gap(1e-3, 0.1);
    assert!(short <= 1e-3, "componentwise discrepancy {short}");
    // over a full second the gap is the simulator's first-order error: it halves with dt
    let ratio = integrator_gap(1e-3, 1.0) / integrator_gap(5e-4, 1.0);
    assert!((1.8..=2.2).contains(&ratio), "{ratio}");
}

#[test]
fn jacobians_match_directional_derivatives() {
    let (p, m) = nominal();
    let x = perturbed_state(&p);
    let u = Input::new(2.1, 1.7, 2.0, 1.8);
    let dt = 0.05;
    let (a, b) = linearize(&x, &u, dt, &p, &m);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let dx = ModelState::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let du = Input::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let h = 1e-5;
        let num = (rk4_step(&(x + dx * h), &(u + du * h), dt, &p, &m) - rk4_step(&(x - dx * h), &(u - du * h), dt, &p, &m))
            / (2.0 * h);
        let ana = a * dx + b * du;
        assert!((num - ana).norm() <= 1e-5 * ana.norm(), "{}", (num - ana).norm() / ana.norm());
    }
}

#[test]
fn hover_jacobian_has_analytic_structure() {
    let (p, m) = nominal();
    let x = to_model(&QuadState::hover(Vec3::zeros(), &p));
    let dt = 0.01;
    let (a, b) = linearize(&x, &hover_input(&p), dt, &p, &m);
    // v_y responds to the roll quaternion component with -2 g dt
    let g = -p.gravity.z;
    assert!((a[(8, 4)] + 2.0 * g * dt).abs() < 0.01 * 2.0 * g * dt, "{}", a[(8, 4)]);
    assert!((a[(7, 5)] - 2.0 * g * dt).abs() < 0.01 * 2.0 * g * dt, "{}", a[(7, 5)]);
    // equal thrust increments push v_z by dt/m each (drag trims ~0.1% within the step)
    for j in 0..4 {
        assert!((b[(9, j)] - dt / p.mass).abs() < 2e-3 * dt / p.mass, "{}", b[(9, j)]);
    }
    let sum: Vec3 = (0..4).map(|j| Vec3::new(b[(10, j)], b[(11, j)], b[(12, j)])).sum();
    assert!(sum.norm() < 1e-9);
    let (a0, _) = linearize(&x, &hover_input(&p), 0.0, &p, &m);
    for i in (0..13).filter(|i| !(3..7).contains(i)) {
        for j in 0..13 {
            let e = if i == j { 1.0 } else { 0.0 };
            assert!((a0[(i, j)] - e).abs() < 1e-9);
        }
    }
}

fn hover_traj() -> Trajectory {
    Trajectory::sample(&hover(Vec3::new(0.0, 0.0, 2.0), 5.0), &PhysParams::default(), SAMPLE_DT, "h").unwrap()
}

#[test]
fn on_reference_first_control_is_feedforward() {
    let (p, _) = nominal();
    let traj = hover_traj();
    let mut mpc = Mpc::new(MpcConfig { variant: MpcVariant::Srt, ..MpcConfig::default() }, p.clone()).unwrap();
    let x = traj.points[0].to_state(&p);
    let step = mpc.control(&x, &traj, 0.0);
    assert!(!step.info.fallback);
    for u in step.inputs[0].iter() {
        assert!((u - p.hover_thrust()).abs() < 1e-6);
    }
    let mut ctbr = Mpc::new(MpcConfig::default(), p.clone()).unwrap();
    match ctbr.control(&x, &traj, 0.0).command {
        Command::Ctbr { thrust, rates } => {
            assert!((thrust + p.gravity.z).abs() < 1e-6);
            assert!(rates.norm() < 1e-6);
        }
        c => panic!("unexpected {c:?}"),
    }
}

#[test]
fn infeasible_thrust_demand_clamps_at_bounds() {
    let (p, _) = nominal();
    let traj = hover_traj();
    let cfg = MpcConfig {
        u_max: 1.5,
        variant: MpcVariant::Srt,
        ..MpcConfig::default()
    };
    let mut mpc = Mpc::new(cfg, p.clone()).unwrap();
    let step = mpc.control(&traj.points[0].to_state(&p), &traj, 0.0);
    assert!(!step.info.fallback);
    assert_eq!(step.command, Command::Srt([1.5; 4]));
    for u in &step.inputs {
        assert!(u.iter().all(|v| (0.0..=1.5).contains(v)));
    }
    assert!(step.info.active_set > 0);
    assert!(step.info.kkt_residual <= 1e-8);
}

#[test]
fn qp_multipliers_are_sign_correct_at_bounds() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let n = 12;
        let m = nalgebra::DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = &m * m.transpose() + nalgebra::DMatrix::identity(n, n) * 0.1;
        let qp = BoxQp {
            h,
            g: DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0)),
            lb: DVector::from_element(n, -0.5),
            ub: DVector::from_element(n, 0.7),
        };
        let sol = qp.solve(&DVector::zeros(n), 1e-12, 500).unwrap();
        assert!(sol.kkt_residual <= 1e-8);
        for i in 0..n {
            if sol.x[i] == -0.5 {
                assert!(sol.multipliers[i] >= -1e-9);
            } else if sol.x[i] == 0.7 {
                assert!(sol.multipliers[i] <= 1e-9);
            } else {
                assert_eq!(sol.multipliers[i], 0.0);
            }
        }
        // no feasible random point does better
        let best = qp.objective(&sol.x);
        for _ in 0..50 {
            let y = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.7));
            assert!(qp.objective(&y) >= best - 1e-12);
        }
    }
}

fn circle() -> Trajectory {
    Trajectory::sample(&gen_circle(5.0, 0.0, 5.0, 8.0).unwrap(), &PhysParams::default(), SAMPLE_DT, "c").unwrap()
}

#[test]
fn tighter_tolerance_barely_moves_the_control() {
    let (p, _) = nominal();
    let traj = circle();
    let mut x = traj.at(3.0).to_state(&p);
    x.p += Vec3::new(0.1, -0.05, 0.02);
    let solve = |tol: f64| {
        let mut mpc = Mpc::new(MpcConfig { kkt_tol: tol, ..MpcConfig::default() }, p.clone()).unwrap();
        mpc.control(&x, &traj, 3.0).inputs[0]
    };
    assert!((solve(1e-6) - solve(1e-10)).amax() < 1e-5);
}

#[test]
fn repeated_iterations_settle_and_never_raise_the_model_cost() {
    let (p, _) = nominal();
    let traj = circle();
    let mut x = traj.at(4.0).to_state(&p);
    x.p += Vec3::new(0.05, 0.05, -0.05);
    x.v += Vec3::new(0.1, 0.0, 0.0);
    let mut mpc = Mpc::new(MpcConfig::default(), p.clone()).unwrap();
    let refs = mpc.reference_window(&traj, 4.0);
    let mut last: Vec<Input> = Vec::new();
    let mut deltas = Vec::new();
    for _ in 0..12 {
        let step = mpc.solve(&x, &refs, false).unwrap();
        assert!(step.info.model_cost_after <= step.info.model_cost_before + 1e-12);
        if !last.is_empty() {
            let d = step.inputs.iter().zip(&last).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
            deltas.push(d);
        }
        last = step.inputs;
    }
    assert!(*deltas.last().unwrap() < 1e-5, "{deltas:?}");
    assert!(deltas[10] < 1e-3 * deltas[0], "{deltas:?}");
}

#[test]
fn both_variants_build_the_same_problem() {
    let (p, _) = nominal();
    let traj = circle();
    let x = traj.at(2.5).to_state(&p);
    let mut a = Mpc::new(MpcConfig { variant: MpcVariant::Srt, ..MpcConfig::default() }, p.clone()).unwrap();
    let mut b = Mpc::new(MpcConfig { variant: MpcVariant::Ctbr, ..MpcConfig::default() }, p.clone()).unwrap();
    let (sa, sb) = (a.control(&x, &traj, 2.5), b.control(&x, &traj, 2.5));
    assert_eq!(sa.inputs, sb.inputs);
    assert_eq!(sa.states, sb.states);
    match (sa.command, sb.command) {
        (Command::Srt(f), Command::Ctbr { thrust, rates }) => {
            assert!((f.iter().sum::<f64>() / p.mass - thrust).abs() < 1e-12);
            assert_eq!(rates, Vec3::new(sb.states[1][10], sb.states[1][11], sb.states[1][12]));
        }
        _ => panic!("wrong command types"),
    }
}


