//! Receding-horizon controller. Each cycle shifts the previous plan, rolls
//! it out with the exact discrete dynamics, linearizes tracking outputs and
//! the learned collision constraint along the nominal trajectory, and solves
//! one (configurable) condensed QP over input increments and collision
//! slacks. Attitude enters the linear algebra through a 3-parameter tangent
//! increment, never through raw quaternion components, so the QP sees no
//! norm-constraint null space.

pub mod qp;

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{rk4_step, rk4_step_with_jacobians, speed_after, Input, State};
use crate::geom::{
    camera_point_in_capture_frame, quat_l_matrix, scale_to_network_input, quat_to_rot,
    CameraModel, Pose, Quat,
};
use crate::neural::CoordMlpF64;

use qp::{solve_qp, DenseQp};

#[derive(Debug, Error)]
pub enum NmpcError {
    #[error("configuration: {0}")]
    Config(String),
}

/// What the tracking term compares against the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum OutputMap {
    /// Track reference positions marching toward the goal.
    PositionTracking,
    /// Track the full 3D reference velocity.
    VelocityTracking,
    /// Track planar velocity while holding the reference altitude.
    #[default]
    AltitudeHoldPlanarVelocity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NmpcConfig {
    pub horizon_s: f64,
    pub n_stages: usize,
    pub w_velocity: f64,
    pub w_position: f64,
    pub w_altitude: f64,
    /// Weight steering the camera axis toward the reference direction.
    pub w_align: f64,
    pub w_collision: f64,
    pub v_max: f64,
    pub a_bound: f64,
    pub omega_bound: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub sqp_iters: usize,
    pub output_map: OutputMap,
    pub yaw_alignment: bool,
    /// Tikhonov term on input increments; regularizes the roll direction,
    /// which tracking outputs cannot see from a level attitude.
    pub input_damping: f64,
    pub line_search: bool,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        NmpcConfig {
            horizon_s: 4.0,
            n_stages: 10,
            w_velocity: 1.0,
            w_position: 1.0,
            w_altitude: 2.0,
            w_align: 0.5,
            w_collision: 2.0,
            v_max: 2.0,
            a_bound: 2.0,
            omega_bound: 1.5,
            rho1: 1e3,
            rho2: 1e4,
            sqp_iters: 1,
            output_map: OutputMap::AltitudeHoldPlanarVelocity,
            yaw_alignment: true,
            input_damping: 1e-3,
            line_search: true,
        }
    }
}

impl NmpcConfig {
    pub fn validate(&self) -> Result<(), NmpcError> {
        if !(self.horizon_s > 0.0) {
            return Err(NmpcError::Config("horizon must be positive".into()));
        }
        if self.n_stages < 2 {
            return Err(NmpcError::Config("need at least 2 shooting intervals".into()));
        }
        for (name, w) in [
            ("w_velocity", self.w_velocity),
            ("w_position", self.w_position),
            ("w_altitude", self.w_altitude),
            ("w_align", self.w_align),
            ("w_collision", self.w_collision),
        ] {
            if !(w >= 0.0) {
                return Err(NmpcError::Config(format!("{name} must be >= 0")));
            }
        }
        if !(self.rho1 > 0.0 && self.rho2 > 0.0) {
            return Err(NmpcError::Config("slack penalties must be positive".into()));
        }
        if !(self.v_max > 0.0 && self.a_bound > 0.0 && self.omega_bound > 0.0) {
            return Err(NmpcError::Config("bounds must be positive".into()));
        }
        if self.sqp_iters == 0 {
            return Err(NmpcError::Config("need at least one iteration per cycle".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon_s / self.n_stages as f64
    }
}

/// Per-stage tracking targets.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRef {
    pub v_ref: Vector3<f64>,
    pub p_ref: Vector3<f64>,
    /// Unit direction toward the goal; `None` means hover.
    pub dir: Option<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub stages: Vec<StageRef>,
}

/// Constant-norm velocity reference toward the goal, one entry per shooting
/// point. Goals closer than 1 cm collapse to a hover reference.
pub fn build_reference(
    goal: Vector3<f64>,
    current: &State,
    speed: f64,
    cfg: &NmpcConfig,
) -> Reference {
    assert!(speed > 0.0, "reference speed must be positive");
    let delta = goal - current.p;
    let dist = delta.norm();
    let n = cfg.n_stages;
    if dist < 0.01 {
        let hover = StageRef { v_ref: Vector3::zeros(), p_ref: goal, dir: None };
        return Reference { stages: vec![hover; n + 1] };
    }
    let dir = delta / dist;
    let dt = cfg.dt();
    let stages = (0..=n)
        .map(|k| {
            let advance = (speed * k as f64 * dt).min(dist);
            StageRef {
                v_ref: dir * speed,
                p_ref: current.p + dir * advance,
                dir: Some(dir),
            }
        })
        .collect();
    Reference { stages }
}

/// One control cycle's inputs to the solver.
#[derive(Debug, Clone)]
pub struct NmpcProblem {
    pub x0: State,
    pub reference: Reference,
    /// Latent code of the most recent depth image.
    pub latent: DVector<f64>,
    /// World pose of the camera when that image was captured.
    pub capture_pose: Pose,
}

#[derive(Debug, Clone)]
pub struct NmpcSolution {
    pub states: Vec<State>,
    pub inputs: Vec<Input>,
    /// Collision-constraint slack per stage 1..=N.
    pub slacks: Vec<f64>,
    /// Collision score per stage 0..=N.
    pub scores: Vec<f64>,
    pub kkt_residual: f64,
    pub step_norm: f64,
    /// Merit value after each inner iteration.
    pub merit_history: Vec<f64>,
    pub solve_time_ms: f64,
    /// Set when a non-finite network output forced a fallback to the
    /// shifted warm start.
    pub degraded: bool,
}

/// Cost, residuals and derivatives of the shooting NLP at a given guess.
#[derive(Debug, Clone)]
pub struct NlpEval {
    pub cost: f64,
    pub tracking_cost: f64,
    pub collision_cost: f64,
    pub scores: Vec<f64>,
    /// Tangent-space norm of x_{k+1} - f(x_k, u_k) per interval.
    pub dyn_residuals: Vec<f64>,
    /// d(stage cost)/d(tangent state), one 7-vector per stage.
    pub grad_x: Vec<SVector<f64, 7>>,
    /// d(total cost)/d(u_k) with states eliminated through the dynamics;
    /// valid when the guess is a rollout (dyn_residuals ~ 0).
    pub grad_u: Vec<Vector3<f64>>,
}

const H_EMBED: [[f64; 3]; 4] = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Lift a tangent increment (δp, δθ, δv) into raw state space at q.
fn t_in(q: &Quat) -> SMatrix<f64, 8, 7> {
    let l = quat_l_matrix(q);
    let mut t = SMatrix::<f64, 8, 7>::zeros();
    for i in 0..3 {
        t[(i, i)] = 1.0;
    }
    for r in 0..4 {
        for c in 0..3 {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += l[(r, k)] * H_EMBED[k][c];
            }
            t[(3 + r, 3 + c)] = 0.5 * acc;
        }
    }
    t[(7, 6)] = 1.0;
    t
}

/// Project raw state differentials onto the tangent at q.
fn t_out(q: &Quat) -> SMatrix<f64, 7, 8> {
    let l = quat_l_matrix(q);
    let mut t = SMatrix::<f64, 7, 8>::zeros();
    for i in 0..3 {
        t[(i, i)] = 1.0;
    }
    for r in 0..3 {
        for c in 0..4 {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += H_EMBED[k][r] * l[(c, k)];
            }
            t[(3 + r, 3 + c)] = 2.0 * acc;
        }
    }
    t[(6, 7)] = 1.0;
    t
}

/// Apply a tangent increment to a state (first-order retraction).
pub fn retract(x: &State, dx: &SVector<f64, 7>) -> State {
    let step = crate::geom::quat_mul(&x.q, &Quat::new(0.0, dx[3], dx[4], dx[5]));
    let q_new = Quat::new(
        x.q.w + 0.5 * step.w,
        x.q.x + 0.5 * step.x,
        x.q.y + 0.5 * step.y,
        x.q.z + 0.5 * step.z,
    );
    State::new(
        x.p + Vector3::new(dx[0], dx[1], dx[2]),
        q_new.normalized(),
        x.v + dx[6],
    )
}

fn skew(v: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub struct NmpcSolver {
    pub config: NmpcConfig,
    pub camera: CameraModel,
    net: CoordMlpF64,
}

struct Linearization {
    /// Nominal states after rollout.
    states: Vec<State>,
    /// Tangent sensitivities d x_k / d u, 7 x 3N.
    sens: Vec<DMatrix<f64>>,
    scores: Vec<f64>,
    /// d score_k / d tangent state.
    dscore_dx: Vec<SVector<f64, 7>>,
    /// Output errors and jacobians per stage.
    errors: Vec<DVector<f64>>,
    out_jac: Vec<DMatrix<f64>>,
    weights: DVector<f64>,
    nominal_inputs: Vec<Input>,
    finite: bool,
}

impl NmpcSolver {
    pub fn new(
        config: NmpcConfig,
        camera: CameraModel,
        net: CoordMlpF64,
    ) -> Result<NmpcSolver, NmpcError> {
        config.validate()?;
        camera.validate().map_err(|e| NmpcError::Config(e.to_string()))?;
        Ok(NmpcSolver { config, camera, net })
    }

    /// Solver-side state propagation: RK4 plus an exact clamp of the forward
    /// speed into [0, v_max] (active only at the boundary).
    fn step(&self, x: &State, u: &Input) -> State {
        let mut next = rk4_step(x, u, self.config.dt());
        next.v = speed_after(x.v, u.a_x, self.config.dt()).clamp(0.0, self.config.v_max);
        next
    }

    fn rollout(&self, x0: &State, inputs: &[Input]) -> Vec<State> {
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(x0.clone());
        for u in inputs {
            let next = self.step(states.last().unwrap(), u);
            states.push(next);
        }
        states
    }

    /// Clamp inputs into their boxes and keep the exactly-propagated speed
    /// inside [0, v_max] wherever the acceleration box allows it.
    fn restore_feasibility(&self, x0: &State, inputs: &mut [Input]) {
        let cfg = &self.config;
        let dt = cfg.dt();
        let mut v = x0.v.clamp(0.0, f64::INFINITY);
        for u in inputs.iter_mut() {
            u.omega_y = u.omega_y.clamp(-cfg.omega_bound, cfg.omega_bound);
            u.omega_z = u.omega_z.clamp(-cfg.omega_bound, cfg.omega_bound);
            let mut a = u.a_x.clamp(-cfg.a_bound, cfg.a_bound);
            let a_lo = ((0.0 - v) / dt).max(-cfg.a_bound);
            let a_hi = ((cfg.v_max - v) / dt).min(cfg.a_bound);
            if a_lo <= a_hi {
                a = a.clamp(a_lo, a_hi);
            } else {
                // Speed outside [0, v_max] and the box cannot fix it in one
                // interval: push as hard as possible toward the band.
                a = if v > cfg.v_max { -cfg.a_bound } else { cfg.a_bound };
            }
            u.a_x = a;
            v = speed_after(v, a, dt).clamp(0.0, cfg.v_max);
        }
    }

    /// Zero-input plan from the current state.
    pub fn hover_rollout(&self, x0: &State) -> (Vec<State>, Vec<Input>) {
        let mut inputs = vec![Input::new(0.0, 0.0, 0.0); self.config.n_stages];
        self.restore_feasibility(x0, &mut inputs);
        (self.rollout(x0, &inputs), inputs)
    }

    /// Standard RTI shift: drop the first input, duplicate the last, rebase
    /// the trajectory on the new state estimate.
    pub fn warm_start_shift(
        &self,
        prev: Option<&NmpcSolution>,
        x0: &State,
    ) -> (Vec<State>, Vec<Input>) {
        match prev {
            None => self.hover_rollout(x0),
            Some(sol) => {
                let n = self.config.n_stages;
                let mut inputs: Vec<Input> = Vec::with_capacity(n);
                inputs.extend(sol.inputs.iter().skip(1).cloned());
                if let Some(last) = sol.inputs.last() {
                    inputs.push(last.clone());
                }
                while inputs.len() < n {
                    inputs.push(Input::new(0.0, 0.0, 0.0));
                }
                self.restore_feasibility(x0, &mut inputs);
                (self.rollout(x0, &inputs), inputs)
            }
        }
    }

    /// Previous plan reused unshifted, rebased on the new state estimate.
    /// When solves run faster than the stage interval the previous stage
    /// grid still covers the present, so dropping a stage every solve would
    /// advance the plan far ahead of real time.
    pub fn warm_start_hold(&self, prev: &NmpcSolution, x0: &State) -> (Vec<State>, Vec<Input>) {
        let mut inputs = prev.inputs.clone();
        self.restore_feasibility(x0, &mut inputs);
        (self.rollout(x0, &inputs), inputs)
    }

    /// Stage output y(x), its tangent jacobian, the reference value and the
    /// diagonal weight vector.
    fn stage_output(
        &self,
        x: &State,
        sref: &StageRef,
        x0: &State,
    ) -> (DVector<f64>, DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let cfg = &self.config;
        let r = quat_to_rot(&x.q);
        let f = r * Vector3::z();
        let df_dth = -r * skew(Vector3::z());
        let align_ref = sref.dir.unwrap_or_else(|| x0.forward_axis());
        let w_a = if cfg.yaw_alignment { cfg.w_align } else { 0.0 };

        let mut y = DVector::zeros(6);
        let mut c = DMatrix::zeros(6, 7);
        let mut y_ref = DVector::zeros(6);
        let mut w = DVector::zeros(6);
        match cfg.output_map {
            OutputMap::PositionTracking => {
                for i in 0..3 {
                    y[i] = x.p[i];
                    c[(i, i)] = 1.0;
                    y_ref[i] = sref.p_ref[i];
                    w[i] = cfg.w_position;
                }
            }
            OutputMap::VelocityTracking => {
                let v_w = f * x.v;
                for i in 0..3 {
                    y[i] = v_w[i];
                    for j in 0..3 {
                        c[(i, 3 + j)] = x.v * df_dth[(i, j)];
                    }
                    c[(i, 6)] = f[i];
                    y_ref[i] = sref.v_ref[i];
                    w[i] = cfg.w_velocity;
                }
            }
            OutputMap::AltitudeHoldPlanarVelocity => {
                let v_w = f * x.v;
                for i in 0..2 {
                    y[i] = v_w[i];
                    for j in 0..3 {
                        c[(i, 3 + j)] = x.v * df_dth[(i, j)];
                    }
                    c[(i, 6)] = f[i];
                    y_ref[i] = sref.v_ref[i];
                    w[i] = cfg.w_velocity;
                }
                y[2] = x.p.z;
                c[(2, 2)] = 1.0;
                y_ref[2] = sref.p_ref.z;
                w[2] = cfg.w_altitude;
            }
        }
        for i in 0..3 {
            y[3 + i] = f[i];
            for j in 0..3 {
                c[(3 + i, 3 + j)] = df_dth[(i, j)];
            }
            y_ref[3 + i] = align_ref[i];
            w[3 + i] = w_a;
        }
        (y, c, y_ref, w)
    }

    /// Collision score and its tangent-state gradient at one stage.
    fn stage_score(
        &self,
        bound: &crate::neural::constraint::BoundMlp<'_>,
        x: &State,
        capture: &Pose,
    ) -> (f64, SVector<f64, 7>) {
        let ext = &self.camera.extrinsics;
        let p_cam = camera_point_in_capture_frame(x.p, &x.q, capture, ext);
        let a = scale_to_network_input(p_cam, &self.camera);
        let (value, grad_a) = bound.collision_value_grad(&a);

        let d = Vector3::new(
            1.0 / (self.camera.tan_alpha_h() * self.camera.d_max),
            1.0 / (self.camera.tan_alpha_v() * self.camera.d_max),
            1.0 / self.camera.d_max,
        );
        let r_cap_t = quat_to_rot(&capture.orientation).transpose();
        // Chain through a = D ∘ (R_capᵀ (R(q) t_ext + p − p_cap)).
        let da_dp = Matrix3::from_diagonal(&d) * r_cap_t;
        let dv_dp = da_dp.transpose() * grad_a;
        let mut g = SVector::<f64, 7>::zeros();
        for i in 0..3 {
            g[i] = dv_dp[i];
        }
        if ext.position.norm() > 0.0 {
            let r_body = quat_to_rot(&x.q);
            let da_dth = Matrix3::from_diagonal(&d) * r_cap_t * (-r_body * skew(ext.position));
            let dv_dth = da_dth.transpose() * grad_a;
            for i in 0..3 {
                g[3 + i] = dv_dth[i];
            }
        }
        (value, g)
    }

    fn linearize(&self, problem: &NmpcProblem, inputs: &[Input]) -> Linearization {
        let n = self.config.n_stages;
        let nu = 3 * n;
        let dt = self.config.dt();
        let bound = self.net.bind(&problem.latent);

        let mut states = Vec::with_capacity(n + 1);
        states.push(problem.x0.clone());
        let mut sens = Vec::with_capacity(n + 1);
        sens.push(DMatrix::zeros(7, nu));

        for (k, u) in inputs.iter().enumerate() {
            let x = states[k].clone();
            let (mut next, a_full, b_full) = rk4_step_with_jacobians(&x, u, dt);
            next.v = speed_after(x.v, u.a_x, dt).clamp(0.0, self.config.v_max);
            let a_t = t_out(&next.q) * a_full * t_in(&x.q);
            let b_t = t_out(&next.q) * b_full;
            let mut s_next = DMatrix::zeros(7, nu);
            // S_{k+1} = A_t S_k + B_t placed at block k.
            let a_dyn = DMatrix::from_fn(7, 7, |r, c| a_t[(r, c)]);
            s_next.gemm(1.0, &a_dyn, &sens[k], 0.0);
            for r in 0..7 {
                for c in 0..3 {
                    s_next[(r, 3 * k + c)] += b_t[(r, c)];
                }
            }
            sens.push(s_next);
            states.push(next);
        }

        let mut scores = Vec::with_capacity(n + 1);
        let mut dscore_dx = Vec::with_capacity(n + 1);
        let mut errors = Vec::with_capacity(n + 1);
        let mut out_jac = Vec::with_capacity(n + 1);
        let mut weights = DVector::zeros(6);
        let mut finite = true;
        for k in 0..=n {
            let (score, g) = self.stage_score(&bound, &states[k], &problem.capture_pose);
            if !score.is_finite() || g.iter().any(|v| !v.is_finite()) {
                finite = false;
            }
            scores.push(score);
            dscore_dx.push(g);
            let (y, c, y_ref, w) = self.stage_output(&states[k], &problem.reference.stages[k], &problem.x0);
            errors.push(&y - &y_ref);
            out_jac.push(c);
            weights = w;
        }
        Linearization {
            states,
            sens,
            scores,
            dscore_dx,
            errors,
            out_jac,
            weights,
            nominal_inputs: inputs.to_vec(),
            finite,
        }
    }

    fn merit(&self, problem: &NmpcProblem, inputs: &[Input]) -> f64 {
        let lin = self.linearize(problem, inputs);
        let cfg = &self.config;
        let mut m = 0.0;
        for k in 0..=cfg.n_stages {
            let e = &lin.errors[k];
            for i in 0..6 {
                m += lin.weights[i] * e[i] * e[i];
            }
            m += cfg.w_collision * lin.scores[k];
            if k >= 1 {
                let viol = (lin.scores[k] - 0.5).max(0.0);
                m += cfg.rho1 * viol + cfg.rho2 * viol * viol;
            }
        }
        m
    }

    /// Full diagnostic evaluation of a trajectory guess.
    pub fn evaluate_nlp(
        &self,
        problem: &NmpcProblem,
        states: &[State],
        inputs: &[Input],
    ) -> NlpEval {
        let cfg = &self.config;
        let n = cfg.n_stages;
        assert_eq!(states.len(), n + 1);
        assert_eq!(inputs.len(), n);
        let bound = self.net.bind(&problem.latent);

        let mut tracking = 0.0;
        let mut collision = 0.0;
        let mut scores = Vec::with_capacity(n + 1);
        let mut grad_x = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let (y, c, y_ref, w) = self.stage_output(&states[k], &problem.reference.stages[k], &problem.x0);
            let e = &y - &y_ref;
            for i in 0..6 {
                tracking += w[i] * e[i] * e[i];
            }
            let (score, dscore) = self.stage_score(&bound, &states[k], &problem.capture_pose);
            collision += cfg.w_collision * score;
            scores.push(score);
            let mut gx = SVector::<f64, 7>::zeros();
            for j in 0..7 {
                let mut acc = 0.0;
                for i in 0..6 {
                    acc += 2.0 * w[i] * e[i] * c[(i, j)];
                }
                gx[j] = acc + cfg.w_collision * dscore[j];
            }
            grad_x.push(gx);
        }

        let mut dyn_residuals = Vec::with_capacity(n);
        for k in 0..n {
            let pred = self.step(&states[k], &inputs[k]);
            let dp = pred.p - states[k + 1].p;
            // Tangent attitude difference: 2 vec(q_{k+1}⁻¹ ⊗ q_pred).
            let dq = crate::geom::quat_mul(&states[k + 1].q.conjugate(), &pred.q);
            let dth = 2.0 * dq.vector_part();
            let dv = pred.v - states[k + 1].v;
            dyn_residuals.push((dp.norm_squared() + dth.norm_squared() + dv * dv).sqrt());
        }

        // Condensed input gradient from a fresh linearization of the rollout.
        let lin = self.linearize(problem, inputs);
        let nu = 3 * n;
        let mut gu = DVector::<f64>::zeros(nu);
        for k in 0..=n {
            let e = &lin.errors[k];
            let c = &lin.out_jac[k];
            let s = &lin.sens[k];
            // gu += S_kᵀ (2 Cᵀ W e + w_collision * dscore).
            let mut stage_gx = DVector::<f64>::zeros(7);
            for j in 0..7 {
                let mut acc = 0.0;
                for i in 0..6 {
                    acc += 2.0 * lin.weights[i] * e[i] * c[(i, j)];
                }
                stage_gx[j] = acc + cfg.w_collision * lin.dscore_dx[k][j];
            }
            gu.gemv_tr(1.0, s, &stage_gx, 1.0);
        }
        let grad_u = (0..n).map(|k| Vector3::new(gu[3 * k], gu[3 * k + 1], gu[3 * k + 2])).collect();

        NlpEval {
            cost: tracking + collision,
            tracking_cost: tracking,
            collision_cost: collision,
            scores,
            dyn_residuals,
            grad_x,
            grad_u,
        }
    }

    /// Build and solve the condensed QP around the linearization. Returns
    /// the input increment and the QP diagnostics.
    fn solve_qp_step(&self, lin: &Linearization) -> (Vec<Vector3<f64>>, f64) {
        let cfg = &self.config;
        let n = cfg.n_stages;
        let nu = 3 * n;
        let nvar = nu + n;
        let dt = cfg.dt();

        let mut h = DMatrix::<f64>::zeros(nvar, nvar);
        let mut g = DVector::<f64>::zeros(nvar);
        let wdiag = DMatrix::from_diagonal(&lin.weights);
        for k in 0..=n {
            let jk = &lin.out_jac[k] * &lin.sens[k];
            let jtw = jk.transpose() * &wdiag;
            h.view_mut((0, 0), (nu, nu)).gemm(2.0, &jtw, &jk, 1.0);
            let ge = &jtw * &lin.errors[k] * 2.0;
            let mut sg = DVector::<f64>::zeros(nu);
            let ds = DVector::from_fn(7, |i, _| lin.dscore_dx[k][i]);
            sg.gemv_tr(cfg.w_collision, &lin.sens[k], &ds, 0.0);
            for i in 0..nu {
                g[i] += ge[i] + sg[i];
            }
        }
        for i in 0..nu {
            h[(i, i)] += cfg.input_damping;
        }
        for k in 0..n {
            h[(nu + k, nu + k)] = 2.0 * cfg.rho2;
            g[nu + k] = cfg.rho1;
        }

        let mut lb = DVector::from_element(nvar, f64::NEG_INFINITY);
        let mut ub = DVector::from_element(nvar, f64::INFINITY);
        // Box bounds relative to the nominal inputs.
        for k in 0..n {
            let u = &lin.nominal_inputs[k];
            lb[3 * k] = -cfg.a_bound - u.a_x;
            ub[3 * k] = cfg.a_bound - u.a_x;
            lb[3 * k + 1] = -cfg.omega_bound - u.omega_y;
            ub[3 * k + 1] = cfg.omega_bound - u.omega_y;
            lb[3 * k + 2] = -cfg.omega_bound - u.omega_z;
            ub[3 * k + 2] = cfg.omega_bound - u.omega_z;
        }
        for k in 0..n {
            lb[nu + k] = 0.0;
        }

        let mut rows_a = Vec::new();
        let mut rows_b = Vec::new();
        // Collision rows: dscoreᵀ S δu − s_k ≤ 0.5 − score,  stages 1..=N.
        for k in 1..=n {
            let mut row = DVector::<f64>::zeros(nvar);
            let ds = DVector::from_fn(7, |i, _| lin.dscore_dx[k][i]);
            let mut su = DVector::<f64>::zeros(nu);
            su.gemv_tr(1.0, &lin.sens[k], &ds, 0.0);
            for i in 0..nu {
                row[i] = su[i];
            }
            row[nu + (k - 1)] = -1.0;
            rows_a.push(row);
            rows_b.push(0.5 - lin.scores[k]);
        }
        // Exact speed-band rows: v_k is linear in the accelerations.
        for k in 1..=n {
            let v_nom = lin.states[k].v;
            let mut row = DVector::<f64>::zeros(nvar);
            for j in 0..k {
                row[3 * j] = dt;
            }
            // Upper band; skip when unreachable (restores handle overshoot).
            rows_a.push(row.clone());
            rows_b.push(cfg.v_max - v_nom);
            // Lower band: −dt Σ δa ≤ v_nom.
            rows_a.push(-row);
            rows_b.push(v_nom);
        }

        let qp = DenseQp { h, g, lb, ub, rows_a, rows_b };
        let mut x0 = DVector::<f64>::zeros(nvar);
        for k in 1..=n {
            x0[nu + (k - 1)] = (lin.scores[k] - 0.5).max(0.0);
        }
        let sol = solve_qp(&qp, x0);
        let du = (0..n)
            .map(|k| Vector3::new(sol.x[3 * k], sol.x[3 * k + 1], sol.x[3 * k + 2]))
            .collect();
        (du, sol.stationarity)
    }

    pub fn solve(&self, problem: &NmpcProblem, warm: Option<&NmpcSolution>) -> NmpcSolution {
        let (_, inputs) = self.warm_start_shift(warm, &problem.x0);
        self.solve_from_guess(problem, inputs)
    }

    /// RTI solve from an explicit input-sequence guess. Callers that re-solve
    /// faster than the stage interval pass an unshifted guess here; `solve`
    /// wraps this with the one-stage shift.
    pub fn solve_from_guess(&self, problem: &NmpcProblem, guess: Vec<Input>) -> NmpcSolution {
        let start = Instant::now();
        let cfg = &self.config;
        let n = cfg.n_stages;
        assert_eq!(problem.reference.stages.len(), n + 1, "reference length");
        assert_eq!(problem.latent.len(), self.net.n_z, "latent dimension");
        assert_eq!(guess.len(), n, "guess length");

        let mut inputs = guess;
        self.restore_feasibility(&problem.x0, &mut inputs);

        let mut kkt_residual = f64::NAN;
        let mut step_norm = 0.0;
        let mut merit_history = Vec::with_capacity(cfg.sqp_iters);
        let mut degraded = false;

        for _ in 0..cfg.sqp_iters {
            let lin = self.linearize(problem, &inputs);
            if !lin.finite {
                degraded = true;
                break;
            }
            let (du, stationarity) = self.solve_qp_step(&lin);
            kkt_residual = stationarity;

            let apply = |alpha: f64, base: &[Input]| -> Vec<Input> {
                let mut out = base.to_vec();
                for (k, u) in out.iter_mut().enumerate() {
                    u.a_x = (u.a_x + alpha * du[k].x).clamp(-cfg.a_bound, cfg.a_bound);
                    u.omega_y =
                        (u.omega_y + alpha * du[k].y).clamp(-cfg.omega_bound, cfg.omega_bound);
                    u.omega_z =
                        (u.omega_z + alpha * du[k].z).clamp(-cfg.omega_bound, cfg.omega_bound);
                }
                out
            };

            if cfg.line_search {
                let m0 = self.merit(problem, &inputs);
                let mut accepted = false;
                let mut alpha = 1.0;
                for _ in 0..5 {
                    let cand = apply(alpha, &inputs);
                    let m = self.merit(problem, &cand);
                    if m.is_finite() && m <= m0 {
                        step_norm = alpha * du.iter().map(|d| d.amax()).fold(0.0, f64::max);
                        inputs = cand;
                        merit_history.push(m);
                        accepted = true;
                        break;
                    }
                    alpha *= 0.5;
                }
                if !accepted {
                    merit_history.push(m0);
                    step_norm = 0.0;
                }
            } else {
                inputs = apply(1.0, &inputs);
                step_norm = du.iter().map(|d| d.amax()).fold(0.0, f64::max);
                merit_history.push(self.merit(problem, &inputs));
            }
        }

        let lin = self.linearize(problem, &inputs);
        let scores = lin.scores.clone();
        let slacks: Vec<f64> =
            (1..=n).map(|k| (scores[k] - 0.5).max(0.0)).collect();
        NmpcSolution {
            states: lin.states,
            inputs,
            slacks,
            scores,
            kkt_residual,
            step_norm,
            merit_history,
            solve_time_ms: start.elapsed().as_secs_f64() * 1e3,
            degraded,
        }
    }
}
