use proptest::prelude::*;
use quadbench::dynamics::*;
use quadbench::math::{Quat, Vec3};

fn tumbling_state(params: &PhysParams) -> QuadState {
    let mut x = QuadState::hover(Vec3::new(0.0, 0.0, 5.0), params);
    x.q = Quat::from_axis_angle(&Vec3::new(0.3, -0.5, 0.8), 0.7);
    x.v = Vec3::new(1.0, -2.0, 0.5);
    x.w = Vec3::new(2.0, -1.0, 3.0);
    x
}

fn add_scaled(x: &[f64; STATE_DIM], k: &[f64; STATE_DIM], h: f64) -> QuadState {
    let mut out = [0.0; STATE_DIM];
    for i in 0..STATE_DIM {
        out[i] = x[i] + h * k[i];
    }
    QuadState::from_vector(&out)
}

/// Classical RK4 on the continuous model, attitude renormalized after each step.
fn rk4_step(x: &QuadState, params: &PhysParams, cmd: &[f64; 4], dt: f64) -> QuadState {
    let x0 = x.to_vector();
    let k1 = state_derivative(x, params, cmd).to_vector();
    let k2 = state_derivative(&add_scaled(&x0, &k1, dt / 2.0), params, cmd).to_vector();
    let k3 = state_derivative(&add_scaled(&x0, &k2, dt / 2.0), params, cmd).to_vector();
    let k4 = state_derivative(&add_scaled(&x0, &k3, dt), params, cmd).to_vector();
    let mut out = [0.0; STATE_DIM];
    for i in 0..STATE_DIM {
        out[i] = x0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    let mut s = QuadState::from_vector(&out);
    s.q = s.q.normalized();
    s
}

fn simulate(x: &QuadState, params: &PhysParams, cmd: &[f64; 4], dt: f64, t: f64) -> QuadState {
    let mut x = *x;
    for _ in 0..(t / dt).round() as usize {
        x = step_symplectic_euler(&x, params, cmd, dt);
    }
    x
}

fn pose_error(a: &QuadState, b: &QuadState) -> f64 {
    (a.p - b.p).norm() + (a.v - b.v).norm() + a.q.angle_to(&b.q) + (a.w - b.w).norm()
}

#[test]
fn integrator_converges_at_first_order() {
    let params = PhysParams::default();
    let x0 = tumbling_state(&params);
    let h = params.hover_rotor_speed();
    let cmd = [h * 1.05, h * 0.97, h * 1.02, h * 0.99];
    let t: f64 = 0.5;
    let mut reference = x0;
    let fine: f64 = 1e-5;
    for _ in 0..(t / fine).round() as usize {
        reference = rk4_step(&reference, &params, &cmd, fine);
    }
    let e1 = pose_error(&simulate(&x0, &params, &cmd, 1e-3, t), &reference);
    let e2 = pose_error(&simulate(&x0, &params, &cmd, 5e-4, t), &reference);
    let ratio = e1 / e2;
    assert!((1.7..=2.3).contains(&ratio), "error ratio {ratio} ({e1} / {e2})");
}

#[test]
fn torque_free_energy_is_conserved() {
    let params = PhysParams {
        drag: Vec3::zeros(),
        ..PhysParams::default()
    };
    let mut x = tumbling_state(&params);
    x.rotor_speeds = [0.0; 4];
    let energy = |s: &QuadState| {
        0.5 * params.mass * s.v.norm_squared() - params.mass * params.gravity.dot(&s.p)
            + 0.5 * s.w.dot(&params.inertia.component_mul(&s.w))
    };
    let e0 = energy(&x);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        x = step_symplectic_euler(&x, &params, &[0.0; 4], 1e-3);
        worst = worst.max((energy(&x) - e0).abs() / e0.abs());
    }
    assert!(worst <= 1e-3, "relative energy drift {worst}");
}

#[test]
fn motor_lag_reaches_time_constant_point() {
    let params = PhysParams::default();
    let mut x = QuadState::hover(Vec3::new(0.0, 0.0, 5.0), &params);
    x.rotor_speeds = [0.0; 4];
    let target = 1500.0;
    let dt = 1e-3;
    let steps = (params.motor_time_constant / dt).round() as usize;
    for _ in 0..steps {
        x = step_symplectic_euler(&x, &params, &[target; 4], dt);
    }
    let expected = target * (1.0 - (-1.0f64).exp());
    for s in x.rotor_speeds {
        assert!((s - expected).abs() / expected < 0.02, "{s} vs {expected}");
        assert!((s / target - 0.632).abs() < 0.02 * 0.632);
    }
}

#[test]
fn drag_acts_along_body_axes() {
    let params = PhysParams::default();
    let q = Quat::from_axis_angle(&Vec3::new(0.2, 0.9, -0.4), 1.1);
    let v = Vec3::new(3.0, -1.0, 2.0);
    let r = q.to_rotmat();
    let expected = -(r * nalgebra::Matrix3::from_diagonal(&params.drag) * r.transpose()) * v;
    let (v_dot, _) = rigid_body_accel(&q, &v, &Vec3::zeros(), &Vec3::zeros(), &Vec3::zeros(), &params);
    let got = (v_dot - params.gravity) * params.mass;
    assert!((got - expected).norm() < 1e-12);
}

#[test]
fn yawed_body_sees_rotated_drag() {
    let params = PhysParams::default();
    let q = Quat::from_yaw(std::f64::consts::FRAC_PI_2);
    let v = Vec3::new(2.0, 0.0, 0.0);
    // world x is body -y after a quarter turn
    assert!((drag_force_body(&q, &v, &params) - Vec3::new(0.0, 0.6, 0.0)).norm() < 1e-12);
}

#[test]
fn yawed_start_gives_rotated_trajectory() {
    let params = PhysParams::default();
    let h = params.hover_rotor_speed();
    let cmd = [h * 1.03, h * 0.99, h * 1.01, h * 0.98];
    let base = tumbling_state(&params);
    let yaw = Quat::from_yaw(0.9);
    let mut turned = base;
    turned.p = yaw.rotate(&base.p);
    turned.v = yaw.rotate(&base.v);
    turned.q = yaw * base.q;
    let (a, b) = (simulate(&base, &params, &cmd, 1e-3, 1.0), simulate(&turned, &params, &cmd, 1e-3, 1.0));
    assert!((yaw.rotate(&a.p) - b.p).norm() < 1e-9);
    assert!((yaw.rotate(&a.v) - b.v).norm() < 1e-9);
    assert!((yaw * a.q).angle_to(&b.q) < 1e-9);
    assert!((a.w - b.w).norm() < 1e-9);
}

#[test]
fn randomized_parameters_stay_within_ranges() {
    let nominal = PhysParams::default();
    let spec = RandomizationSpec::default();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
    let n = 100_000;
    let mut mean_mass = 0.0;
    for _ in 0..n {
        let p = sample_params_with(&nominal, &spec, &mut rng);
        assert!((0.5376..=0.9984).contains(&p.mass), "{}", p.mass);
        assert!((-10.21..=-9.41).contains(&p.gravity.z));
        assert_eq!(p.gravity.x, 0.0);
        for i in 0..3 {
            let (lo, hi) = (nominal.inertia[i] * 0.7, nominal.inertia[i] * 1.3);
            assert!((lo..=hi).contains(&p.inertia[i]));
            assert!(p.drag[i] >= 0.0 && p.drag[i] <= 2.0 * nominal.drag[i]);
        }
        assert_eq!(p.thrust_coeff, nominal.thrust_coeff);
        assert_eq!(p.torque_coeff, nominal.torque_coeff);
        mean_mass += p.mass / n as f64;
    }
    assert!((mean_mass - nominal.mass).abs() < 0.005);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attitude_stays_unit_and_state_finite(
        wx in -20.0f64..20.0, wy in -20.0f64..20.0, wz in -20.0f64..20.0,
        c0 in 0.0f64..2262.0, c1 in 0.0f64..2262.0, c2 in 0.0f64..2262.0, c3 in 0.0f64..2262.0,
    ) {
        let params = PhysParams::default();
        let mut x = QuadState::hover(Vec3::new(0.0, 0.0, 5.0), &params);
        x.w = Vec3::new(wx, wy, wz);
        for _ in 0..200 {
            x = step_symplectic_euler(&x, &params, &[c0, c1, c2, c3], 1e-3);
            prop_assert!((x.q.norm() - 1.0).abs() < 1e-12);
            prop_assert!(x.is_finite());
            for s in x.rotor_speeds {
                prop_assert!(s >= 0.0 && s <= params.max_rotor_speed());
            }
        }
    }

    #[test]
    fn vector_round_trip(px in -10.0f64..10.0, angle in -3.0f64..3.0, w in -5.0f64..5.0) {
        let params = PhysParams::default();
        let mut x = QuadState::hover(Vec3::new(px, 1.0, 2.0), &params);
        x.q = Quat::from_axis_angle(&Vec3::new(1.0, 2.0, 3.0), angle);
        x.w = Vec3::new(w, -w, 0.5 * w);
        prop_assert_eq!(QuadState::from_vector(&x.to_vector()), x);
    }
}
