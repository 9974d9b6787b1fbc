//! Command-line front end: corpus generation, training, classifier
//! evaluation, closed-loop simulation and plot-data extraction.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use serde::Deserialize;

use colnav::dataset::{build_corpus, Dataset, DatasetConfig};
use colnav::geom::CameraModel;
use colnav::neural::io::{load_weights, save_weights};
use colnav::neural::train::{classifier_metrics, train, TrainConfig};
use colnav::neural::{ArchConfig, Model};
use colnav::nmpc::NmpcConfig;
use colnav::runner::{
    emit_plot_data, rows_from_csv, run_mission, write_mission_outputs, MissionConfig, MissionLog,
    MissionStatus, MissionSummary,
};
use colnav::world::{corridor_scene, dead_end_scene, empty_scene, ScenarioSpec};

#[derive(Parser)]
#[command(name = "colnav", version, about = "Depth-image collision prediction inside a tracking NMPC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a (depth image, query point, label) corpus.
    GenData(GenDataArgs),
    /// Train the encoder + coordinate classifier on a corpus.
    Train(TrainArgs),
    /// Evaluate a trained model's classifier on a corpus.
    Eval(EvalArgs),
    /// Fly one or more closed-loop missions; exit 0 only if all succeed.
    Simulate(SimulateArgs),
    /// Extract plot-ready CSVs from a recorded mission log.
    PlotData(PlotDataArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (manifest.json, images.bin, points.bin, labels.bin).
    #[arg(long)]
    out: PathBuf,
    /// Full dataset config JSON; replaces the default-based flags below.
    #[arg(long, conflicts_with_all = ["n_images", "seed", "eval"])]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    n_images: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Held-out evaluation defaults: clean rasters, denser queries.
    #[arg(long)]
    eval: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Weight file to write (JSON manifest + float32 blob).
    #[arg(long)]
    out: PathBuf,
    /// Training config JSON; replaces the default-based flags below.
    #[arg(long, conflicts_with_all = ["steps", "seed"])]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 6000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Architecture config JSON; default is the desk-scale network.
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Where to write the loss-curve report JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Corpus directory to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Directory for metrics.json and per_image.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario: a ScenarioSpec JSON path, a corridor seed, "empty" or
    /// "dead-end". Ignored in batch mode.
    #[arg(long, default_value = "empty")]
    scene: String,
    #[arg(long)]
    model: PathBuf,
    /// Mission/solver overrides JSON (see MissionKnobs).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Fly this many corridor missions seeded seed-base..seed-base+n.
    #[arg(long)]
    batch: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed_base: u64,
}

#[derive(Args)]
struct PlotDataArgs {
    /// log.csv recorded by simulate.
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Goal override "x,y,z"; default comes from the sibling summary.json.
    #[arg(long)]
    goal: Option<String>,
    /// Reference-speed override [m/s]; default from the sibling summary.json.
    #[arg(long)]
    speed: Option<f64>,
}

/// Optional per-field mission overrides; anything absent keeps the runner
/// default. `nmpc` and `camera` replace their configs wholesale.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MissionKnobs {
    speed: Option<f64>,
    control_rate_hz: Option<f64>,
    camera_rate_hz: Option<f64>,
    max_duration_s: Option<f64>,
    command_lag_tau_s: Option<f64>,
    arrival_radius_m: Option<f64>,
    image_noise_sigma: Option<f64>,
    noise_seed: Option<u64>,
    two_thread_encoder: Option<bool>,
    nmpc: Option<NmpcConfig>,
    camera: Option<CameraModel>,
}

impl MissionKnobs {
    fn apply(&self, cfg: &mut MissionConfig) {
        macro_rules! take {
            ($f:ident) => {
                if let Some(v) = self.$f {
                    cfg.$f = v;
                }
            };
        }
        take!(speed);
        take!(control_rate_hz);
        take!(camera_rate_hz);
        take!(max_duration_s);
        take!(command_lag_tau_s);
        take!(arrival_radius_m);
        take!(image_noise_sigma);
        take!(noise_seed);
        take!(two_thread_encoder);
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Simulate(a) => return cmd_simulate_exit(a),
        Command::PlotData(a) => cmd_plot_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => read_json::<DatasetConfig>(p)?,
        None if a.eval => DatasetConfig::eval_default(a.n_images, a.seed),
        None => DatasetConfig::training_default(a.n_images, a.seed),
    };
    let manifest = build_corpus(&cfg, &a.out)?;
    println!(
        "wrote {} images x {} points to {}",
        manifest.config.n_images,
        manifest.config.points_per_image(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let cfg = match &a.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::default_desk(a.steps, a.seed),
    };
    let arch = match &a.arch {
        Some(p) => read_json::<ArchConfig>(p)?,
        None => ArchConfig::default_desk(),
    };
    let mut model = Model::new(arch, cfg.seed)?;
    println!(
        "training {} params for {} steps on {} images",
        model.param_count(),
        cfg.steps,
        data.n_images()
    );
    let report = train(&mut model, &data, &cfg)?;
    save_weights(&model, &a.out)?;
    if let Some(p) = &a.report {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    let last = report.loss.last().copied().unwrap_or(f32::NAN);
    let val = report.val_bce.last().copied();
    println!(
        "saved {}; final train loss {last:.4}{}",
        a.out.display(),
        val.map_or(String::new(), |v| format!(", val bce {v:.4}"))
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = load_weights(&a.model)?;
    let data = Dataset::load(&a.data)?;
    let all: Vec<usize> = (0..data.n_images()).collect();
    let agg = classifier_metrics(&model, &data, &all, a.threshold)?;

    fs::create_dir_all(&a.out)?;
    fs::write(
        a.out.join("metrics.json"),
        serde_json::to_string_pretty(&agg)?,
    )?;
    let mut csv = String::from("image,tp,fp,tn,fn,accuracy,precision,recall,f1\n");
    for &i in &all {
        let m = classifier_metrics(&model, &data, &[i], a.threshold)?;
        csv.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{}\n",
            m.tp, m.fp, m.tn, m.fn_, m.accuracy, m.precision, m.recall, m.f1
        ));
    }
    fs::write(a.out.join("per_image.csv"), csv)?;
    println!(
        "{} images: accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4}",
        all.len(),
        agg.accuracy,
        agg.precision,
        agg.recall,
        agg.f1
    );
    Ok(())
}

fn parse_scene(text: &str) -> Result<ScenarioSpec> {
    match text {
        "empty" => return Ok(empty_scene()),
        "dead-end" => return Ok(dead_end_scene()),
        _ => {}
    }
    if let Ok(seed) = text.parse::<u64>() {
        return Ok(corridor_scene(seed));
    }
    read_json::<ScenarioSpec>(Path::new(text))
}

fn cmd_simulate_exit(a: SimulateArgs) -> ExitCode {
    match cmd_simulate(a) {
        Ok(all_succeeded) => {
            if all_succeeded {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<bool> {
    let model = load_weights(&a.model)?;
    let knobs: MissionKnobs = match &a.config {
        Some(p) => read_json(p)?,
        None => MissionKnobs::default(),
    };
    let nmpc = knobs.nmpc.clone().unwrap_or_default();
    let camera = knobs.camera.clone().unwrap_or_else(CameraModel::default_desk);

    let missions: Vec<(ScenarioSpec, Option<u64>)> = match a.batch {
        None => vec![(parse_scene(&a.scene)?, None)],
        Some(n) => (a.seed_base..a.seed_base + n)
            .map(|s| (corridor_scene(s), Some(s)))
            .collect(),
    };

    let mut all_ok = true;
    for (scenario, seed) in missions {
        let name = scenario.name.clone();
        let mut cfg = MissionConfig::new(scenario);
        knobs.apply(&mut cfg);
        if let Some(s) = seed {
            // Batch missions draw distinct image-noise streams.
            cfg.noise_seed = s;
        }
        let dir = match seed {
            None => a.out.clone(),
            Some(s) => a.out.join(format!("mission_{s:04}")),
        };
        let log = run_mission(&cfg, &model, &nmpc, &camera)?;
        write_mission_outputs(&log, &dir)?;
        emit_plot_data(&log, &dir)?;
        let s = &log.summary;
        println!(
            "{name}: {:?} in {:.1} s, final distance {:.2} m, {} collision ticks, median solve {:.1} ms",
            s.status, s.duration_s, s.final_distance_m, s.collision_ticks, s.median_solve_ms
        );
        all_ok &= s.status == MissionStatus::Success;
    }
    Ok(all_ok)
}

fn parse_goal(text: &str) -> Result<Vector3<f64>> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .context("goal must be \"x,y,z\"")?;
    if parts.len() != 3 {
        bail!("goal must have three components, got {}", parts.len());
    }
    Ok(Vector3::new(parts[0], parts[1], parts[2]))
}

fn cmd_plot_data(a: PlotDataArgs) -> Result<()> {
    let rows = rows_from_csv(&fs::read_to_string(&a.log)?)?;

    // Arrow references need the goal and speed; take overrides, else the
    // summary.json that simulate writes next to log.csv.
    let sidecar: Option<serde_json::Value> = a
        .log
        .parent()
        .map(|d| d.join("summary.json"))
        .filter(|p| p.exists())
        .map(|p| read_json(&p))
        .transpose()?;
    let goal = match (&a.goal, &sidecar) {
        (Some(g), _) => parse_goal(g)?,
        (None, Some(s)) => {
            let g = s["goal_m"]
                .as_array()
                .context("summary.json missing goal_m")?;
            Vector3::new(
                g[0].as_f64().unwrap_or(f64::NAN),
                g[1].as_f64().unwrap_or(f64::NAN),
                g[2].as_f64().unwrap_or(f64::NAN),
            )
        }
        (None, None) => bail!("no summary.json next to the log; pass --goal"),
    };
    let speed = match (a.speed, &sidecar) {
        (Some(v), _) => v,
        (None, Some(s)) => s["reference_speed_mps"]
            .as_f64()
            .context("summary.json missing reference_speed_mps")?,
        (None, None) => bail!("no summary.json next to the log; pass --speed"),
    };

    let last = rows.last().context("log has no rows")?;
    let summary = MissionSummary {
        status: MissionStatus::Timeout,
        duration_s: last.t,
        final_distance_m: (last.state.p - goal).norm(),
        collision_ticks: rows.iter().filter(|r| r.collision).count(),
        mean_speed_final_5s: 0.0,
        median_solve_ms: 0.0,
        max_solve_ms: 0.0,
    };
    let log = MissionLog {
        scenario_name: "replay".into(),
        goal,
        speed,
        rows,
        summary,
    };
    emit_plot_data(&log, &a.out)?;
    println!("wrote path.csv, arrows.csv, scores.csv to {}", a.out.display());
    Ok(())
}
