//! Closed-loop mission harness: fly the modeled robot through a scene,
//! render depth images at camera rate, encode them to latent codes, run the
//! controller at control rate, and push its commands through a first-order
//! lag onto the true dynamics. The clock is virtual (integer control ticks,
//! no sleeping), so a mission with fixed seeds replays bit-for-bit; wall
//! solve times are collected separately from the state log.

use std::path::Path;
use std::sync::mpsc;
use std::time::Instant;

use nalgebra::{DVector, Vector3};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{augment_image, AugmentConfig};
use crate::dynamics::{rk4_step, Input, State};
use crate::geom::{quat_mul, CameraModel, Pose};
use crate::neural::{CoordMlpF64, Model, NeuralError};
use crate::nmpc::{build_reference, NmpcConfig, NmpcError, NmpcProblem, NmpcSolution, NmpcSolver};
use crate::world::ScenarioSpec;
use crate::world::{DepthImage, WorldError, ROBOT_RADIUS};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("mission configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nmpc(#[from] NmpcError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("log parse: {0}")]
    LogParse(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MissionConfig {
    pub scenario: ScenarioSpec,
    /// Reference speed toward the goal [m/s].
    pub speed: f64,
    pub control_rate_hz: f64,
    pub camera_rate_hz: f64,
    pub max_duration_s: f64,
    /// First-order lag between commanded and applied inputs [s].
    pub command_lag_tau_s: f64,
    pub arrival_radius_m: f64,
    /// Multiplicative depth noise applied to rendered images; 0 disables.
    pub image_noise_sigma: f64,
    pub noise_seed: u64,
    /// Run the encoder on a separate thread (log-equivalent schedule).
    pub two_thread_encoder: bool,
}

impl MissionConfig {
    pub fn new(scenario: ScenarioSpec) -> Self {
        MissionConfig {
            scenario,
            speed: 1.5,
            control_rate_hz: 100.0,
            camera_rate_hz: 30.0,
            max_duration_s: 60.0,
            command_lag_tau_s: 0.1,
            arrival_radius_m: 0.3,
            image_noise_sigma: 0.02,
            noise_seed: 0,
            two_thread_encoder: false,
        }
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if !(self.control_rate_hz > 0.0 && self.camera_rate_hz > 0.0) {
            return Err(RunnerError::Config("rates must be positive".into()));
        }
        if self.control_rate_hz < self.camera_rate_hz {
            return Err(RunnerError::Config(
                "control rate must be at least the camera rate".into(),
            ));
        }
        if !(self.max_duration_s > 0.0) {
            return Err(RunnerError::Config("duration must be positive".into()));
        }
        if !(self.command_lag_tau_s >= 0.0) {
            return Err(RunnerError::Config("lag time constant must be >= 0".into()));
        }
        if !(self.speed > 0.0) {
            return Err(RunnerError::Config("reference speed must be positive".into()));
        }
        if !(self.arrival_radius_m > 0.0) {
            return Err(RunnerError::Config("arrival radius must be positive".into()));
        }
        if !(self.image_noise_sigma >= 0.0) {
            return Err(RunnerError::Config("noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissionStatus {
    /// Reached the goal region with no ground-truth collision.
    Success,
    /// Robot sphere intersected a non-inflated primitive.
    Collision,
    Timeout,
    /// Solver or encoder produced non-finite output mid-run.
    Failed,
}

/// One control tick of telemetry.
#[derive(Debug, Clone)]
pub struct TickRow {
    /// Virtual mission time [s].
    pub t: f64,
    /// Capture time of the image the controller used this tick [s].
    pub capture_t: f64,
    pub state: State,
    pub command: Input,
    /// Collision score of the first shooting point.
    pub score_first: f64,
    /// Collision score of the last shooting point.
    pub score_last: f64,
    pub slack_max: f64,
    pub collision: bool,
    /// Wall-clock solve time [ms]; excluded from log.csv so state logs stay
    /// bit-reproducible. Zero on rows read back from disk.
    pub solve_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MissionSummary {
    pub status: MissionStatus,
    pub duration_s: f64,
    pub final_distance_m: f64,
    pub collision_ticks: usize,
    pub mean_speed_final_5s: f64,
    pub median_solve_ms: f64,
    pub max_solve_ms: f64,
}

#[derive(Debug, Clone)]
pub struct MissionLog {
    pub scenario_name: String,
    pub goal: Vector3<f64>,
    pub speed: f64,
    pub rows: Vec<TickRow>,
    pub summary: MissionSummary,
}

/// Control-tick index of the m-th camera event: the first tick whose time
/// is at or past m / camera_rate. Camera events at a tick run before that
/// tick's control step, so the controller never sees a future image.
fn camera_tick(m: u64, control_hz: f64, camera_hz: f64) -> u64 {
    ((m as f64) * control_hz / camera_hz - 1e-9).ceil().max(0.0) as u64
}

fn camera_world_pose(x: &State, cam: &CameraModel) -> Pose {
    Pose::new(
        x.q.rotate(cam.extrinsics.position) + x.p,
        quat_mul(&x.q, &cam.extrinsics.orientation),
    )
}

type EncodeResult = Result<DVector<f64>, NeuralError>;

fn encode_image(model: &Model, img: &DepthImage) -> EncodeResult {
    let (mu, _sigma) = model.encode_slice(&img.data)?;
    Ok(DVector::from_iterator(mu.len(), mu.iter().map(|&v| v as f64)))
}

/// Run one mission. The model provides both the encoder (camera-rate) and
/// the coordinate classifier embedded in the solver (control-rate).
pub fn run_mission(
    cfg: &MissionConfig,
    model: &Model,
    nmpc_cfg: &NmpcConfig,
    cam: &CameraModel,
) -> Result<MissionLog, RunnerError> {
    cfg.validate()?;
    if model.arch.n_v != cam.n_v || model.arch.n_h != cam.n_h {
        return Err(RunnerError::Config(format!(
            "camera raster {}x{} does not match model input {}x{}",
            cam.n_v, cam.n_h, model.arch.n_v, model.arch.n_h
        )));
    }
    let solver = NmpcSolver::new(nmpc_cfg.clone(), cam.clone(), CoordMlpF64::from_model(model))?;

    if cfg.two_thread_encoder {
        std::thread::scope(|scope| {
            let (job_tx, job_rx) = mpsc::channel::<DepthImage>();
            let (res_tx, res_rx) = mpsc::channel::<EncodeResult>();
            scope.spawn(move || {
                while let Ok(img) = job_rx.recv() {
                    if res_tx.send(encode_image(model, &img)).is_err() {
                        break;
                    }
                }
            });
            let mut encode = move |img: DepthImage| -> EncodeResult {
                job_tx.send(img).expect("encoder thread alive");
                res_rx.recv().expect("encoder thread alive")
            };
            mission_loop(cfg, &solver, cam, &mut encode)
        })
    } else {
        let mut encode = |img: DepthImage| encode_image(model, &img);
        mission_loop(cfg, &solver, cam, &mut encode)
    }
}

fn mission_loop(
    cfg: &MissionConfig,
    solver: &NmpcSolver,
    cam: &CameraModel,
    encode: &mut dyn FnMut(DepthImage) -> EncodeResult,
) -> Result<MissionLog, RunnerError> {
    let scene = &cfg.scenario.scene;
    let goal = cfg.scenario.goal;
    let dt = 1.0 / cfg.control_rate_hz;
    let n_ticks = (cfg.max_duration_s * cfg.control_rate_hz).round() as u64;
    let lag_decay = if cfg.command_lag_tau_s > 0.0 {
        (-dt / cfg.command_lag_tau_s).exp()
    } else {
        0.0
    };
    let noise_cfg = AugmentConfig {
        flip_prob: 0.0,
        max_shift: 0,
        noise_sigma: cfg.image_noise_sigma,
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);

    let mut state = State::new(
        cfg.scenario.start.position,
        cfg.scenario.start.orientation,
        0.0,
    );
    let mut u_act = Input::new(0.0, 0.0, 0.0);
    let mut latent = DVector::zeros(0);
    let mut capture_pose = Pose::IDENTITY;
    let mut capture_t = 0.0;
    let mut warm: Option<NmpcSolution> = None;
    let mut cam_m = 0u64;
    // The plan shifts one stage per elapsed stage interval, not per control
    // tick: shifting at control rate would advance the 0.4 s stage grid 40x
    // faster than real time and detach the warm start from the robot. In
    // between boundaries the previous plan is rebased and re-optimized.
    let stage_ticks = (solver.config.dt() * cfg.control_rate_hz).round().max(1.0) as u64;
    let mut next_shift_tick = 0u64;

    let mut rows: Vec<TickRow> = Vec::new();
    let mut status = MissionStatus::Timeout;

    'mission: for tick in 0..=n_ticks {
        let t = tick as f64 * dt;

        while camera_tick(cam_m, cfg.control_rate_hz, cfg.camera_rate_hz) == tick {
            let pose = camera_world_pose(&state, cam);
            let mut img = scene.render_depth(&pose, cam);
            if cfg.image_noise_sigma > 0.0 {
                img = augment_image(&img, &noise_cfg, &mut noise_rng);
            }
            match encode(img) {
                Ok(z) => {
                    latent = z;
                    capture_pose = pose;
                    capture_t = t;
                }
                Err(_) => {
                    status = MissionStatus::Failed;
                    break 'mission;
                }
            }
            cam_m += 1;
        }

        let problem = NmpcProblem {
            x0: state.clone(),
            reference: build_reference(goal, &state, cfg.speed, &solver.config),
            latent: latent.clone(),
            capture_pose: capture_pose.clone(),
        };
        let guess = match warm.as_ref() {
            None => {
                next_shift_tick = tick + stage_ticks;
                solver.warm_start_shift(None, &state).1
            }
            Some(prev) if tick >= next_shift_tick => {
                next_shift_tick += stage_ticks;
                solver.warm_start_shift(Some(prev), &state).1
            }
            Some(prev) => solver.warm_start_hold(prev, &state).1,
        };
        let wall = Instant::now();
        let sol = solver.solve_from_guess(&problem, guess);
        let solve_ms = wall.elapsed().as_secs_f64() * 1e3;

        let u_cmd = sol.inputs[0].clone();
        let collision = scene.min_distance(state.p) < ROBOT_RADIUS;
        rows.push(TickRow {
            t,
            capture_t,
            state: state.clone(),
            command: u_cmd.clone(),
            score_first: sol.scores[0],
            score_last: *sol.scores.last().unwrap(),
            slack_max: sol.slacks.iter().cloned().fold(0.0, f64::max),
            collision,
            solve_ms,
        });
        let degraded = sol.degraded;
        warm = Some(sol);

        if degraded {
            status = MissionStatus::Failed;
            break;
        }
        if collision {
            status = MissionStatus::Collision;
            break;
        }
        if (state.p - goal).norm() <= cfg.arrival_radius_m {
            status = MissionStatus::Success;
            break;
        }
        if tick == n_ticks {
            status = MissionStatus::Timeout;
            break;
        }

        // First-order command lag, then ground truth over one control period.
        // The platform does not reverse: forward speed clamps at zero.
        u_act = Input::new(
            u_cmd.a_x + (u_act.a_x - u_cmd.a_x) * lag_decay,
            u_cmd.omega_y + (u_act.omega_y - u_cmd.omega_y) * lag_decay,
            u_cmd.omega_z + (u_act.omega_z - u_cmd.omega_z) * lag_decay,
        );
        state = rk4_step(&state, &u_act, dt);
        if state.v < 0.0 {
            state.v = 0.0;
        }
    }

    let summary = summarize(&rows, status, goal);
    Ok(MissionLog {
        scenario_name: cfg.scenario.name.clone(),
        goal,
        speed: cfg.speed,
        rows,
        summary,
    })
}

fn summarize(rows: &[TickRow], status: MissionStatus, goal: Vector3<f64>) -> MissionSummary {
    let duration_s = rows.last().map_or(0.0, |r| r.t);
    let final_distance_m = rows.last().map_or(f64::INFINITY, |r| (r.state.p - goal).norm());
    let collision_ticks = rows.iter().filter(|r| r.collision).count();
    let tail: Vec<&TickRow> =
        rows.iter().filter(|r| r.t >= duration_s - 5.0).collect();
    let mean_speed_final_5s = if tail.is_empty() {
        0.0
    } else {
        tail.iter().map(|r| r.state.v).sum::<f64>() / tail.len() as f64
    };
    let mut times: Vec<f64> = rows.iter().map(|r| r.solve_ms).collect();
    times.sort_by(f64::total_cmp);
    let median_solve_ms = if times.is_empty() { 0.0 } else { times[times.len() / 2] };
    let max_solve_ms = times.last().copied().unwrap_or(0.0);
    MissionSummary {
        status,
        duration_s,
        final_distance_m,
        collision_ticks,
        mean_speed_final_5s,
        median_solve_ms,
        max_solve_ms,
    }
}

/// Tick indices whose robot sphere intersects a non-inflated primitive.
pub fn check_trajectory_collisions(
    rows: &[TickRow],
    scene: &crate::world::Scene,
    radius: f64,
) -> Vec<usize> {
    rows.iter()
        .enumerate()
        .filter(|(_, r)| scene.min_distance(r.state.p) < radius)
        .map(|(i, _)| i)
        .collect()
}

const LOG_HEADER: &str = "t_s,px_m,py_m,pz_m,qw,qx,qy,qz,v_mps,a_cmd_mps2,omega_y_cmd_radps,omega_z_cmd_radps,capture_t_s,score_first,score_last,slack_max,collision";

/// Serialize the per-tick log. Every field is a deterministic function of
/// the mission seeds, so identical runs produce identical bytes.
pub fn log_to_csv(log: &MissionLog) -> String {
    let mut out = String::with_capacity(64 * (log.rows.len() + 1));
    out.push_str(LOG_HEADER);
    out.push('\n');
    for r in &log.rows {
        let s = &r.state;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.t,
            s.p.x,
            s.p.y,
            s.p.z,
            s.q.w,
            s.q.x,
            s.q.y,
            s.q.z,
            s.v,
            r.command.a_x,
            r.command.omega_y,
            r.command.omega_z,
            r.capture_t,
            r.score_first,
            r.score_last,
            r.slack_max,
            u8::from(r.collision),
        ));
    }
    out
}

/// Parse rows written by [`log_to_csv`]. Solve times are not serialized and
/// read back as zero.
pub fn rows_from_csv(text: &str) -> Result<Vec<TickRow>, RunnerError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == LOG_HEADER => {}
        other => {
            return Err(RunnerError::LogParse(format!(
                "unexpected header: {:?}",
                other
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 17 {
            return Err(RunnerError::LogParse(format!(
                "row {}: expected 17 fields, got {}",
                i + 2,
                f.len()
            )));
        }
        let num = |j: usize| -> Result<f64, RunnerError> {
            f[j].parse::<f64>()
                .map_err(|e| RunnerError::LogParse(format!("row {}: {e}", i + 2)))
        };
        rows.push(TickRow {
            t: num(0)?,
            capture_t: num(12)?,
            state: State::new(
                Vector3::new(num(1)?, num(2)?, num(3)?),
                crate::geom::Quat::new(num(4)?, num(5)?, num(6)?, num(7)?),
                num(8)?,
            ),
            command: Input::new(num(9)?, num(10)?, num(11)?),
            score_first: num(13)?,
            score_last: num(14)?,
            slack_max: num(15)?,
            collision: f[16] == "1",
            solve_ms: 0.0,
        });
    }
    Ok(rows)
}

/// Write log.csv (bit-reproducible), timing.csv (wall clock) and
/// summary.json into `out_dir`.
pub fn write_mission_outputs(log: &MissionLog, out_dir: &Path) -> Result<(), RunnerError> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("log.csv"), log_to_csv(log))?;
    let mut timing = String::from("tick,solve_ms\n");
    for (i, r) in log.rows.iter().enumerate() {
        timing.push_str(&format!("{},{}\n", i, r.solve_ms));
    }
    std::fs::write(out_dir.join("timing.csv"), timing)?;
    let summary = serde_json::json!({
        "scenario": log.scenario_name,
        "goal_m": [log.goal.x, log.goal.y, log.goal.z],
        "reference_speed_mps": log.speed,
        "summary": log.summary,
    });
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(())
}

/// Plot-ready CSVs: the flown (x, y) path, reference vs actual velocity
/// arrows every 2 s, and the first/last shooting-point score series against
/// the 0.5 decision bound.
pub fn emit_plot_data(log: &MissionLog, out_dir: &Path) -> Result<(), RunnerError> {
    if log.rows.is_empty() {
        return Err(RunnerError::Config("empty log".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut path_csv = String::from("t_s,x_m,y_m,z_m\n");
    for r in &log.rows {
        path_csv.push_str(&format!("{},{},{},{}\n", r.t, r.state.p.x, r.state.p.y, r.state.p.z));
    }
    std::fs::write(out_dir.join("path.csv"), path_csv)?;

    let mut arrows = String::from(
        "t_s,x_m,y_m,v_ref_x_mps,v_ref_y_mps,v_actual_x_mps,v_actual_y_mps\n",
    );
    let mut next_mark = 0.0;
    for r in &log.rows {
        if r.t + 1e-9 < next_mark {
            continue;
        }
        next_mark += 2.0;
        let to_goal = log.goal - r.state.p;
        let v_ref = if to_goal.norm() < 0.01 {
            Vector3::zeros()
        } else {
            to_goal.normalize() * log.speed
        };
        let v_act = r.state.world_velocity();
        arrows.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.t, r.state.p.x, r.state.p.y, v_ref.x, v_ref.y, v_act.x, v_act.y
        ));
    }
    std::fs::write(out_dir.join("arrows.csv"), arrows)?;

    let mut scores = String::from("t_s,score_first,score_last,bound\n");
    for r in &log.rows {
        scores.push_str(&format!(
            "{},{},{},0.5\n",
            r.t, r.score_first, r.score_last
        ));
    }
    std::fs::write(out_dir.join("scores.csv"), scores)?;
    Ok(())
}
