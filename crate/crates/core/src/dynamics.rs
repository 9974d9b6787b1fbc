//! Non-holonomic aerial robot model.
//!
//! State x = (p, q, v): world position, body-to-world unit quaternion and
//! scalar speed along the body z axis (the camera optical axis). Inputs
//! u = (a_x, ω_y, ω_z): forward acceleration and the two usable body rates.
//! The body x rate is structurally zero, so the robot can never rotate
//! directly about the axis it translates along:
//!
//! ṗ = R(q)·e_z·v,  q̇ = ½·q ⊗ (0, 0, ω_y, ω_z),  v̇ = a_x.
//!
//! Discretization is a single fixed-step RK4 stage followed by quaternion
//! renormalization. The analytic step Jacobians chain the stage partials and
//! the renormalization Jacobian, for use by the SQP linearization.

use nalgebra::{Matrix3x4, Matrix4, SMatrix, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::geom::{dnormalize_dq, drot_ez_dq, quat_l_matrix, quat_mul, quat_to_rot, Quat};

/// Raw state dimension (3 + 4 + 1).
pub const NX: usize = 8;
/// Input dimension.
pub const NU: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub p: Vector3<f64>,
    pub q: Quat,
    pub v: f64,
}

impl State {
    pub fn new(p: Vector3<f64>, q: Quat, v: f64) -> Self {
        State { p, q, v }
    }

    /// Direction of travel in the world frame (body z axis).
    pub fn forward_axis(&self) -> Vector3<f64> {
        quat_to_rot(&self.q) * Vector3::z()
    }

    /// World-frame velocity vector.
    pub fn world_velocity(&self) -> Vector3<f64> {
        self.forward_axis() * self.v
    }

    pub fn to_vector(&self) -> SVector<f64, NX> {
        SVector::<f64, NX>::from_column_slice(&[
            self.p.x, self.p.y, self.p.z, self.q.w, self.q.x, self.q.y, self.q.z, self.v,
        ])
    }

    pub fn from_vector(x: &SVector<f64, NX>) -> Self {
        State {
            p: Vector3::new(x[0], x[1], x[2]),
            q: Quat::new(x[3], x[4], x[5], x[6]),
            v: x[7],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Input {
    /// Forward acceleration [m/s²].
    pub a_x: f64,
    /// Body y rate [rad/s].
    pub omega_y: f64,
    /// Body z rate (about the optical axis) [rad/s].
    pub omega_z: f64,
}

impl Input {
    pub fn new(a_x: f64, omega_y: f64, omega_z: f64) -> Self {
        Input { a_x, omega_y, omega_z }
    }

    pub fn to_vector(&self) -> SVector<f64, NU> {
        SVector::<f64, NU>::new(self.a_x, self.omega_y, self.omega_z)
    }

    pub fn from_vector(u: &SVector<f64, NU>) -> Self {
        Input { a_x: u[0], omega_y: u[1], omega_z: u[2] }
    }
}

/// Continuous-time derivative ẋ = f(x, u) in raw (p, q, v) coordinates.
pub fn f_continuous(x: &SVector<f64, NX>, u: &Input) -> SVector<f64, NX> {
    let q = Quat::new(x[3], x[4], x[5], x[6]);
    let v = x[7];
    let pdot = (quat_to_rot(&q) * Vector3::z()) * v;
    let omega = Quat::new(0.0, 0.0, u.omega_y, u.omega_z);
    let qdot = quat_mul(&q, &omega);
    SVector::<f64, NX>::from_column_slice(&[
        pdot.x,
        pdot.y,
        pdot.z,
        0.5 * qdot.w,
        0.5 * qdot.x,
        0.5 * qdot.y,
        0.5 * qdot.z,
        u.a_x,
    ])
}

/// ∂f/∂x at (x, u). The quaternion block is ½R(ω_q); the position block
/// couples to q through v·d(R(q)e_z)/dq and to v through R(q)e_z.
pub fn df_dx(x: &SVector<f64, NX>, u: &Input) -> SMatrix<f64, NX, NX> {
    let q = Quat::new(x[3], x[4], x[5], x[6]);
    let v = x[7];
    let mut j = SMatrix::<f64, NX, NX>::zeros();

    let dez: Matrix3x4<f64> = drot_ez_dq(&q);
    for r in 0..3 {
        for c in 0..4 {
            j[(r, 3 + c)] = v * dez[(r, c)];
        }
    }
    let ez = quat_to_rot(&q) * Vector3::z();
    for r in 0..3 {
        j[(r, 7)] = ez[r];
    }

    // q̇ = ½ q ⊗ ω = ½ R(ω) q, linear in q.
    let omega = Quat::new(0.0, 0.0, u.omega_y, u.omega_z);
    let rw: Matrix4<f64> = crate::geom::quat_r_matrix(&omega);
    for r in 0..4 {
        for c in 0..4 {
            j[(3 + r, 3 + c)] = 0.5 * rw[(r, c)];
        }
    }
    j
}

/// ∂f/∂u at (x, u).
pub fn df_du(x: &SVector<f64, NX>, _u: &Input) -> SMatrix<f64, NX, NU> {
    let q = Quat::new(x[3], x[4], x[5], x[6]);
    let lq: Matrix4<f64> = quat_l_matrix(&q);
    let mut j = SMatrix::<f64, NX, NU>::zeros();
    // q̇ = ½ L(q) (0, 0, ω_y, ω_z)ᵀ: columns 2 and 3 of L(q).
    for r in 0..4 {
        j[(3 + r, 1)] = 0.5 * lq[(r, 2)];
        j[(3 + r, 2)] = 0.5 * lq[(r, 3)];
    }
    j[(7, 0)] = 1.0;
    j
}

fn renormalize(x: &mut SVector<f64, NX>) {
    let q = Quat::new(x[3], x[4], x[5], x[6]).normalized();
    x[3] = q.w;
    x[4] = q.x;
    x[5] = q.y;
    x[6] = q.z;
}

/// One RK4 step of length `dt`, quaternion renormalized afterwards.
pub fn rk4_step(state: &State, u: &Input, dt: f64) -> State {
    let x = state.to_vector();
    let k1 = f_continuous(&x, u);
    let k2 = f_continuous(&(x + k1 * (dt / 2.0)), u);
    let k3 = f_continuous(&(x + k2 * (dt / 2.0)), u);
    let k4 = f_continuous(&(x + k3 * dt), u);
    let mut xn = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    renormalize(&mut xn);
    State::from_vector(&xn)
}

/// RK4 step together with the analytic sensitivities of the renormalized
/// next state with respect to the raw current state and the input.
pub fn rk4_step_with_jacobians(
    state: &State,
    u: &Input,
    dt: f64,
) -> (State, SMatrix<f64, NX, NX>, SMatrix<f64, NX, NU>) {
    let x = state.to_vector();
    let id = SMatrix::<f64, NX, NX>::identity();

    let k1 = f_continuous(&x, u);
    let a1 = df_dx(&x, u);
    let b1 = df_du(&x, u);

    let x2 = x + k1 * (dt / 2.0);
    let k2 = f_continuous(&x2, u);
    let j2 = df_dx(&x2, u);
    let a2 = j2 * (id + a1 * (dt / 2.0));
    let b2 = df_du(&x2, u) + j2 * b1 * (dt / 2.0);

    let x3 = x + k2 * (dt / 2.0);
    let k3 = f_continuous(&x3, u);
    let j3 = df_dx(&x3, u);
    let a3 = j3 * (id + a2 * (dt / 2.0));
    let b3 = df_du(&x3, u) + j3 * b2 * (dt / 2.0);

    let x4 = x + k3 * dt;
    let k4 = f_continuous(&x4, u);
    let j4 = df_dx(&x4, u);
    let a4 = j4 * (id + a3 * dt);
    let b4 = df_du(&x4, u) + j4 * b3 * dt;

    let mut xn = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let mut ja = id + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (dt / 6.0);
    let mut jb = (b1 + b2 * 2.0 + b3 * 2.0 + b4) * (dt / 6.0);

    // Chain the quaternion renormalization through both sensitivities.
    let q_raw = Quat::new(xn[3], xn[4], xn[5], xn[6]);
    let dn: Matrix4<f64> = dnormalize_dq(&q_raw);
    let mut lift = id;
    for r in 0..4 {
        for c in 0..4 {
            lift[(3 + r, 3 + c)] = dn[(r, c)];
        }
    }
    ja = lift * ja;
    jb = lift * jb;
    renormalize(&mut xn);
    (State::from_vector(&xn), ja, jb)
}

/// Exact relative velocity propagation over one step: v̇ = a_x integrates to
/// v(t+dt) = v + a_x·dt with no discretization error, which the controller
/// exploits for hard speed bounds.
pub fn speed_after(v: f64, a_x: f64, dt: f64) -> f64 {
    v + a_x * dt
}

#[allow(unused)]
fn quat_of(x: &SVector<f64, NX>) -> Vector4<f64> {
    Vector4::new(x[3], x[4], x[5], x[6])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{random_unit_quat, Pose};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng) -> State {
        State::new(
            Vector3::new(rng.random::<f64>() * 2.0, rng.random::<f64>() * 2.0, rng.random::<f64>() * 2.0),
            random_unit_quat(rng),
            rng.random::<f64>() * 2.0 - 0.5,
        )
    }

    fn random_input(rng: &mut ChaCha8Rng) -> Input {
        Input::new(
            rng.random::<f64>() * 4.0 - 2.0,
            rng.random::<f64>() * 3.0 - 1.5,
            rng.random::<f64>() * 3.0 - 1.5,
        )
    }

    #[test]
    fn identity_attitude_moves_along_world_z() {
        let x0 = State::new(Vector3::zeros(), Quat::IDENTITY, 1.0);
        let x1 = rk4_step(&x0, &Input::default(), 0.5);
        assert_relative_eq!(x1.p, Vector3::new(0.0, 0.0, 0.5), epsilon = 1e-12);
        assert_relative_eq!(x1.v, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn level_attitude_moves_horizontally() {
        let pose = Pose::level_facing(Vector3::zeros(), Vector3::x());
        let x0 = State::new(pose.position, pose.orientation, 1.5);
        let x1 = rk4_step(&x0, &Input::default(), 0.2);
        assert_relative_eq!(x1.p, Vector3::new(0.3, 0.0, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn pure_omega_y_yaw_closed_form() {
        // With identity attitude, constant ω_y = ω rotates the frame about the
        // body y axis; after t seconds q = (cos ωt/2, 0, sin ωt/2, 0).
        let omega = 1.0;
        let t_total = std::f64::consts::FRAC_PI_2; // quarter turn
        let mut x = State::new(Vector3::zeros(), Quat::IDENTITY, 0.0);
        let u = Input::new(0.0, omega, 0.0);
        let n = 1000;
        for _ in 0..n {
            x = rk4_step(&x, &u, t_total / n as f64);
        }
        let expect = Quat::from_axis_angle(Vector3::y(), omega * t_total);
        assert_relative_eq!(x.q.w, expect.w, epsilon = 1e-9);
        assert_relative_eq!(x.q.y, expect.y, epsilon = 1e-9);
        assert!(x.q.x.abs() < 1e-12 && x.q.z.abs() < 1e-12);
    }

    #[test]
    fn pure_omega_z_quarter_turn_closed_form() {
        // Constant ω_z = π/2 for one second: q = exp(½·ω·t·e_z) =
        // (cos π/4, 0, 0, sin π/4).
        let mut x = State::new(Vector3::zeros(), Quat::IDENTITY, 0.0);
        let u = Input::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        for _ in 0..100 {
            x = rk4_step(&x, &u, 0.01);
        }
        let c = std::f64::consts::FRAC_PI_4.cos();
        assert!((x.q.w - c).abs() < 1e-6);
        assert!((x.q.z - c).abs() < 1e-6);
        assert!(x.q.x.abs() < 1e-9 && x.q.y.abs() < 1e-9);
    }

    #[test]
    fn hover_is_a_fixed_point() {
        let pose = Pose::level_facing(Vector3::new(1.0, 2.0, 1.5), Vector3::x());
        let x0 = State::new(pose.position, pose.orientation, 0.0);
        let x1 = rk4_step(&x0, &Input::default(), 0.4);
        assert!((x1.p - x0.p).norm() < 1e-14);
        assert!((x1.v - x0.v).abs() < 1e-14);
        assert!(
            (x1.q.w - x0.q.w).abs() + (x1.q.x - x0.q.x).abs()
                + (x1.q.y - x0.q.y).abs()
                + (x1.q.z - x0.q.z).abs()
                < 1e-12
        );
    }

    #[test]
    fn level_flight_without_pitch_rate_stays_planar() {
        // From a level start, ω_z only spins about the (horizontal) travel
        // axis and a_x only changes speed: altitude must not drift.
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..10 {
            let pose = Pose::level_facing(
                Vector3::new(0.0, 0.0, 1.5),
                Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, 0.0),
            );
            let mut x = State::new(pose.position, pose.orientation, 1.0);
            for _ in 0..100 {
                let u = Input::new(
                    rng.random::<f64>() * 4.0 - 2.0,
                    0.0,
                    rng.random::<f64>() * 3.0 - 1.5,
                );
                x = rk4_step(&x, &u, 0.01);
            }
            assert!((x.p.z - 1.5).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_axis_rate_never_couples_to_omega_z() {
        // ω_z spins about the travel axis; the travel direction must not move.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let x0 = State::new(Vector3::zeros(), random_unit_quat(&mut rng), 1.0);
            let u = Input::new(0.0, 0.0, 1.2);
            let mut x = x0;
            for _ in 0..100 {
                x = rk4_step(&x, &u, 0.01);
            }
            assert!((x.forward_axis() - x0.forward_axis()).norm() < 1e-9);
        }
    }

    #[test]
    fn rk4_is_fourth_order() {
        // Halving the step must shrink the per-interval error by ~2^4.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let horizon = 0.4;
        for _ in 0..10 {
            let x0 = random_state(&mut rng);
            let u = random_input(&mut rng);

            let integrate = |steps: usize| {
                let mut x = x0;
                for _ in 0..steps {
                    x = rk4_step(&x, &u, horizon / steps as f64);
                }
                x
            };
            let reference = integrate(4096);
            let err = |x: &State| {
                (x.p - reference.p).norm()
                    + (x.q.w - reference.q.w).abs()
                    + (x.q.x - reference.q.x).abs()
                    + (x.q.y - reference.q.y).abs()
                    + (x.q.z - reference.q.z).abs()
            };
            let e1 = err(&integrate(1));
            let e2 = err(&integrate(2));
            let e4 = err(&integrate(4));
            if e1 > 1e-12 {
                assert!(e1 / e2.max(1e-16) > 10.0, "order check failed: {e1} -> {e2}");
                assert!(e2 / e4.max(1e-16) > 10.0, "order check failed: {e2} -> {e4}");
            }
            assert!(e4 < 1e-5);
        }
    }

    #[test]
    fn step_preserves_unit_quaternion() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut x = random_state(&mut rng);
        for _ in 0..10_000 {
            let u = random_input(&mut rng);
            x = rk4_step(&x, &u, 0.05);
            assert!((x.q.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let dt = 0.4;
        let h = 1e-6;
        for _ in 0..20 {
            let x0 = random_state(&mut rng);
            let u0 = random_input(&mut rng);
            let (_, ja, jb) = rk4_step_with_jacobians(&x0, &u0, dt);

            let base = x0.to_vector();
            for c in 0..NX {
                let mut xp = base;
                let mut xm = base;
                xp[c] += h;
                xm[c] -= h;
                let fp = rk4_step(&State::from_vector(&xp), &u0, dt).to_vector();
                let fm = rk4_step(&State::from_vector(&xm), &u0, dt).to_vector();
                let fd = (fp - fm) / (2.0 * h);
                for r in 0..NX {
                    assert!(
                        (ja[(r, c)] - fd[r]).abs() < 2e-6,
                        "dS/dx mismatch at ({r},{c}): {} vs {}",
                        ja[(r, c)],
                        fd[r]
                    );
                }
            }

            let ub = u0.to_vector();
            for c in 0..NU {
                let mut up = ub;
                let mut um = ub;
                up[c] += h;
                um[c] -= h;
                let fp = rk4_step(&x0, &Input::from_vector(&up), dt).to_vector();
                let fm = rk4_step(&x0, &Input::from_vector(&um), dt).to_vector();
                let fd = (fp - fm) / (2.0 * h);
                for r in 0..NX {
                    assert!(
                        (jb[(r, c)] - fd[r]).abs() < 2e-6,
                        "dS/du mismatch at ({r},{c}): {} vs {}",
                        jb[(r, c)],
                        fd[r]
                    );
                }
            }
        }
    }

    #[test]
    fn speed_propagation_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..50 {
            let x0 = random_state(&mut rng);
            let u = random_input(&mut rng);
            let x1 = rk4_step(&x0, &u, 0.4);
            assert_relative_eq!(x1.v, speed_after(x0.v, u.a_x, 0.4), epsilon = 1e-13);
        }
    }
}
