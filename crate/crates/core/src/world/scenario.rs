//! Benchmark scenarios: start pose, goal and obstacle layout for the
//! closed-loop missions.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::geom::Pose;
use super::{Primitive, Scene};

/// Everything a mission needs besides the controller: the obstacle layout,
/// where the robot starts (level, facing the goal) and where it must go.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub scene: Scene,
    pub start: Pose,
    pub goal: Vector3<f64>,
}

fn start_facing_goal(start: Vector3<f64>, goal: Vector3<f64>) -> Pose {
    Pose::level_facing(start, goal - start)
}

/// Obstacle-free straight-line mission used to validate pure tracking.
pub fn empty_scene() -> ScenarioSpec {
    let start = Vector3::new(0.0, 0.0, 1.5);
    let goal = Vector3::new(8.0, 0.0, 1.5);
    ScenarioSpec {
        name: "empty".into(),
        scene: Scene::empty(10.0),
        start: start_facing_goal(start, goal),
        goal,
    }
}

const WALL_Z: (f64, f64) = (0.0, 3.0);
const FLIGHT_Z: f64 = 1.5;

fn wall_x_span(x0: f64, x1: f64, y: f64, thickness: f64) -> Primitive {
    Primitive::Box {
        center: Vector3::new((x0 + x1) / 2.0, y, (WALL_Z.0 + WALL_Z.1) / 2.0),
        half_extents: Vector3::new(
            (x1 - x0) / 2.0,
            thickness / 2.0,
            (WALL_Z.1 - WALL_Z.0) / 2.0,
        ),
    }
}

fn wall_y_span(y0: f64, y1: f64, x: f64, thickness: f64) -> Primitive {
    Primitive::Box {
        center: Vector3::new(x, (y0 + y1) / 2.0, (WALL_Z.0 + WALL_Z.1) / 2.0),
        half_extents: Vector3::new(
            thickness / 2.0,
            (y1 - y0) / 2.0,
            (WALL_Z.1 - WALL_Z.0) / 2.0,
        ),
    }
}

/// Walled corridor (inner width 3 m) with four randomized full-height
/// pillars the robot must weave around. Pillar offsets and radii are bounded
/// so a gap of at least one meter remains next to every pillar after
/// inflation.
pub fn corridor_scene(seed: u64) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut primitives = vec![
        // Inner faces at y = ±1.5, spanning the obstacle section.
        wall_x_span(1.0, 8.9, 1.55, 0.1),
        wall_x_span(1.0, 8.9, -1.55, 0.1),
    ];
    for (i, x) in [2.2, 4.0, 5.8, 7.6].into_iter().enumerate() {
        let side = if rng.random::<f64>() < 0.5 { 1.0 } else { -1.0 };
        let y = side * rng.random_range(0.35..=0.55);
        let radius = rng.random_range(0.12..=0.22);
        let _ = i;
        primitives.push(Primitive::Pillar {
            center_xy: Vector2::new(x, y),
            radius,
            z_min: WALL_Z.0,
            z_max: WALL_Z.1,
        });
    }
    let start = Vector3::new(0.0, 0.0, FLIGHT_Z);
    let goal = Vector3::new(10.5, 0.0, FLIGHT_Z);
    ScenarioSpec {
        name: format!("corridor-{seed}"),
        scene: Scene { primitives, half_size: 12.0 },
        start: start_facing_goal(start, goal),
        goal,
    }
}

/// U-shaped cul-de-sac: the straight path to the goal runs into a wide wall
/// with side walls preventing any route around it. The only safe behavior is
/// to stop short of the wall; the goal is unreachable.
pub fn dead_end_scene() -> ScenarioSpec {
    let primitives = vec![
        wall_y_span(-3.0, 3.0, 6.0, 0.1),
        wall_x_span(0.0, 6.0, 3.0, 0.1),
        wall_x_span(0.0, 6.0, -3.0, 0.1),
    ];
    let start = Vector3::new(0.5, 0.0, FLIGHT_Z);
    let goal = Vector3::new(10.0, 0.0, FLIGHT_Z);
    ScenarioSpec {
        name: "dead-end".into(),
        scene: Scene { primitives, half_size: 12.0 },
        start: start_facing_goal(start, goal),
        goal,
    }
}
