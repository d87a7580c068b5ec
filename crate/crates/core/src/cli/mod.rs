//! Command-line front end.
//!
//! One JSON config file may drive every subcommand; `--seed`, `--mode` and
//! per-command flags override the file, which overrides built-in defaults.
//! Every command that writes files also writes `<output>.manifest.json`
//! with the resolved config and SHA-256 hashes of inputs and outputs.

pub mod svg;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{generate_dataset, rollout, sample_safe, DataConfig, DataError, Dataset, Rollout, Shaping};
use crate::geom::{load_world, GeomError, RobotBody, Workspace};
use crate::interval::IntervalBox;
use crate::neuralnet::{Mlp, NnError};
use crate::partition::{build_partition, PartitionError, PartitionTree};
use crate::reach::{refine_partition, violation_report, Holonomic, Scene, ViolationReport};
use crate::train::{base_loss_and_grad, retrain, train_base_steps, Adam, PipelineConfig, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: exit 2.
    #[error("{0}")]
    Validation(String),
    /// No path to the goal or nothing left to work with: exit 3.
    #[error("{0}")]
    Unreachable(String),
    /// Exit 1.
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Unreachable(_) => 3,
            CliError::Internal(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Unreachable(_) => "unreachable",
            CliError::Internal(_) => "internal",
        }
    }

    pub fn to_json(&self) -> String {
        json!({"error": self.kind(), "code": self.exit_code(), "message": self.to_string()}).to_string()
    }
}

impl From<GeomError> for CliError {
    fn from(e: GeomError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<PartitionError> for CliError {
    fn from(e: PartitionError) -> Self {
        match e {
            PartitionError::Format(_) => CliError::Validation(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Unreachable { .. } => CliError::Unreachable(e.to_string()),
            DataError::Io(_) => CliError::Internal(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::EmptyDataset => CliError::Validation(e.to_string()),
            TrainError::Nn(e) => e.into(),
            TrainError::Partition(e) => e.into(),
            TrainError::Geom(e) => CliError::Internal(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Internal(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "safe-reach", version, about = "Reachability-guided retraining of neural controllers for planar robots")]
pub struct Cli {
    /// JSON run config; missing fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// World file; defaults to the built-in two-room world.
    #[arg(long, global = true)]
    pub world: Option<PathBuf>,
    /// Master seed for data generation and network init.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Dataset shaping.
    #[arg(long, global = true)]
    pub mode: Option<Shaping>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a world file.
    Validate { file: PathBuf },
    /// Plan trajectories and write the shaped dataset (CSV + JSON sidecar).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trajectories: Option<usize>,
    },
    /// Fit the base controller, or continue fitting one with `--init`.
    TrainBase {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Build the initial safe-set cover.
    Partition {
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine a partition against a controller.
    Refine {
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full retraining loop; writes one report line per epoch.
    Retrain(RetrainArgs),
    /// Violation report of a controller on a partition.
    Verify {
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Dataset for the J column (0 without it).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Epoch number written into the report.
        #[arg(long, default_value_t = 0)]
        epoch: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop rollouts.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start as `x,y,theta`; repeatable. Without it, random safe starts.
        #[arg(long, value_parser = parse_triple)]
        start: Vec<[f64; 3]>,
    },
    /// SVG of the workspace, leaves, reach boxes and trajectories.
    ExportSvg {
        #[arg(long)]
        partition: PathBuf,
        /// Draws leaf reach boxes when given.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Rollouts from `simulate`.
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RetrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Base model from `train-base`; trained from scratch when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Report file (JSON lines).
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub out_model: Option<PathBuf>,
    #[arg(long)]
    pub out_partition: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda_target: Option<f64>,
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"))).collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected x,y,theta, got {s:?}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub steps: usize,
    /// Goal ball radius (full-state distance).
    pub goal_tol: f64,
    /// Random starts when none are given.
    pub starts: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { steps: 2000, goal_tol: 0.1, starts: 20 }
    }
}

/// Everything a run depends on. Serialized into every manifest.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub world: Option<PathBuf>,
    pub data: DataConfig,
    pub pipeline: PipelineConfig,
    pub simulate: SimConfig,
}

impl RunConfig {
    /// File values, then global flag overrides.
    pub fn resolve(cli: &Cli) -> Result<Self, CliError> {
        let mut cfg = match &cli.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(w) = &cli.world {
            cfg.world = Some(w.clone());
        }
        if let Some(s) = cli.seed {
            cfg.data.seed = s;
            cfg.pipeline.seed = s;
        }
        if let Some(m) = cli.mode {
            cfg.data.mode = m;
        }
        Ok(cfg)
    }
}

/// Records input and output hashes for a manifest.
#[derive(Default)]
struct Manifest {
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    fn read(&mut self, path: &Path) -> Result<String, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(text.as_bytes()));
        Ok(text)
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        std::fs::write(path, bytes).map_err(|e| io_err(path, e))?;
        self.outputs.insert(path.display().to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn record_output(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        self.outputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn finish(self, primary: &Path, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
        let doc = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.pipeline.seed,
            "config": cfg,
            "inputs": self.inputs,
            "outputs": self.outputs,
        });
        let path = manifest_path(primary);
        let text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
    }
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut name = primary.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    primary.with_file_name(name)
}

fn world(cfg: &RunConfig, m: &mut Manifest) -> Result<(Workspace, RobotBody), CliError> {
    let text = match &cfg.world {
        Some(p) => m.read(p)?,
        None => crate::TWO_ROOM_WORLD.to_string(),
    };
    Ok(load_world(&text)?)
}

fn load_data(path: &Path, m: &mut Manifest) -> Result<Dataset, CliError> {
    m.read(path)?;
    m.read(&path.with_extension("json"))?;
    Ok(Dataset::load(path)?)
}

/// Model file plus the optimizer state kept in its `meta.adam`.
fn load_model(path: &Path, m: &mut Manifest) -> Result<(Mlp, Option<Adam>), CliError> {
    let net = Mlp::from_json(&m.read(path)?)?;
    let adam = match net.meta.get("adam") {
        Some(a) => Some(serde_json::from_value(a.clone()).map_err(|e| CliError::Validation(format!("{}: meta.adam: {e}", path.display())))?),
        None => None,
    };
    Ok((net, adam))
}

fn model_bytes(net: &Mlp, adam: &Adam, extra: serde_json::Value) -> Vec<u8> {
    let mut net = net.clone();
    let mut meta = json!({"adam": adam});
    if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    net.meta = meta;
    (net.to_json() + "\n").into_bytes()
}

fn load_partition(path: &Path, m: &mut Manifest) -> Result<PartitionTree, CliError> {
    Ok(PartitionTree::from_json(&m.read(path)?)?)
}

fn nonempty(tree: &PartitionTree) -> Result<(), CliError> {
    if tree.leaf_count() == 0 {
        return Err(CliError::Unreachable("partition has no leaves".into()));
    }
    Ok(())
}

fn scene<'a>(ws: &'a Workspace, robot: &'a RobotBody, dynamics: &'a Holonomic, cfg: &RunConfig) -> Scene<'a> {
    Scene { ws, robot, dynamics, eps_p: cfg.pipeline.eps_p, eps_q: cfg.pipeline.eps_q, delta: cfg.pipeline.loss.delta.clone() }
}

fn print_json(v: &serde_json::Value) {
    println!("{v}");
}

/// Runs the parsed command. Output file contents depend only on the
/// resolved config and inputs.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let mut cfg = RunConfig::resolve(cli)?;
    let mut m = Manifest::default();
    match &cli.command {
        Command::Validate { file } => {
            let (ws, robot) = load_world(&m.read(file)?)?;
            print_json(&json!({"ok": true, "free_area": ws.area(), "holes": ws.holes.len(), "robot_r": robot.r}));
        }
        Command::GenData { out, trajectories } => {
            if let Some(n) = trajectories {
                cfg.data.trajectories = *n;
            }
            let (ws, robot) = world(&cfg, &mut m)?;
            let d = generate_dataset(&ws, &robot, &cfg.data)?;
            d.save(out)?;
            m.record_output(out)?;
            m.record_output(&out.with_extension("json"))?;
            print_json(&json!({"points": d.len(), "trajectories": d.meta.count, "complete": d.meta.complete}));
            m.finish(out, "gen-data", &cfg)?;
        }
        Command::TrainBase { data, out, init, steps } => {
            let d = load_data(data, &mut m)?;
            let lc = &cfg.pipeline.loss;
            let (mut net, mut adam) = match init {
                Some(p) => {
                    let (net, adam) = load_model(p, &mut m)?;
                    let adam = adam.unwrap_or_else(|| Adam::new(net.param_count(), lc));
                    (net, adam)
                }
                None => {
                    let net = Mlp::init(&cfg.pipeline.arch, cfg.pipeline.seed)?;
                    let adam = Adam::new(net.param_count(), lc);
                    (net, adam)
                }
            };
            let steps = steps.unwrap_or(lc.base_steps);
            train_base_steps(&mut net, &mut adam, &d, lc, steps)?;
            let (j, _) = base_loss_and_grad(&net, &d, lc)?;
            m.write(out, &model_bytes(&net, &adam, json!({"J": j})))?;
            print_json(&json!({"J": j, "adam_steps": adam.t}));
            m.finish(out, "train-base", &cfg)?;
        }
        Command::Partition { out } => {
            let (ws, robot) = world(&cfg, &mut m)?;
            let tree = build_partition(&ws, &robot, &IntervalBox::new(Vec::new()), cfg.pipeline.eps_w)?;
            nonempty(&tree)?;
            m.write(out, (tree.to_json() + "\n").as_bytes())?;
            print_json(&json!({"leaves": tree.leaf_count(), "stats": tree.stats}));
            m.finish(out, "partition", &cfg)?;
        }
        Command::Refine { partition, model, out } => {
            let (ws, robot) = world(&cfg, &mut m)?;
            let mut tree = load_partition(partition, &mut m)?;
            let (net, _) = load_model(model, &mut m)?;
            let dynamics = Holonomic { k: cfg.pipeline.k };
            let stats = refine_partition(&mut tree, &net, &scene(&ws, &robot, &dynamics, &cfg))?;
            nonempty(&tree)?;
            m.write(out, (tree.to_json() + "\n").as_bytes())?;
            print_json(&json!({"leaves": tree.leaf_count(), "stats": stats}));
            m.finish(out, "refine", &cfg)?;
        }
        Command::Retrain(a) => run_retrain(a, &mut cfg, m)?,
        Command::Verify { partition, model, data, epoch, out } => {
            let (ws, robot) = world(&cfg, &mut m)?;
            let mut tree = load_partition(partition, &mut m)?;
            nonempty(&tree)?;
            let (net, _) = load_model(model, &mut m)?;
            let j = match data {
                Some(p) => base_loss_and_grad(&net, &load_data(p, &mut m)?, &cfg.pipeline.loss)?.0,
                None => 0.0,
            };
            let dynamics = Holonomic { k: cfg.pipeline.k };
            let lc = &cfg.pipeline.loss;
            let v = violation_report(&mut tree, &net, &scene(&ws, &robot, &dynamics, &cfg), lc.eps_smooth);
            let rep = ViolationReport {
                epoch: *epoch,
                j,
                j_s: j,
                lambda_s: 0.0,
                violation_volume: v.total_outside_volume,
                active_cells: v.active_cells,
                residual_unsafe_volume: tree.dropped_volume(&lc.delta),
                leaf_count: tree.leaf_count(),
                wall_time_s: None,
            };
            let line = rep.to_json_line();
            println!("{line}");
            if let Some(out) = out {
                m.write(out, (line + "\n").as_bytes())?;
                m.finish(out, "verify", &cfg)?;
            }
        }
        Command::Simulate { model, out, start } => {
            let (ws, robot) = world(&cfg, &mut m)?;
            let (net, _) = load_model(model, &mut m)?;
            let starts = if start.is_empty() { random_starts(&ws, &robot, cfg.simulate.starts, cfg.data.seed) } else { start.clone() };
            let sim = simulate(&net, &ws, &robot, &cfg, &starts);
            m.write(out, (serde_json::to_string(&sim).expect("rollouts serialize") + "\n").as_bytes())?;
            let collisions = sim.runs.iter().filter(|r| r.collision_step.is_some()).count();
            let reached = sim.runs.iter().filter(|r| r.reached).count();
            print_json(&json!({"runs": sim.runs.len(), "collisions": collisions, "reached": reached}));
            m.finish(out, "simulate", &cfg)?;
        }
        Command::ExportSvg { partition, model, trajectories, out } => {
            let (ws, _) = world(&cfg, &mut m)?;
            let tree = load_partition(partition, &mut m)?;
            let dynamics = Holonomic { k: cfg.pipeline.k };
            let reach = match model {
                Some(p) => {
                    let (net, _) = load_model(p, &mut m)?;
                    svg::leaf_reach_boxes(&tree, &net, &dynamics)
                }
                None => Vec::new(),
            };
            let runs = match trajectories {
                Some(p) => {
                    let sim: Simulation = serde_json::from_str(&m.read(p)?).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
                    sim.runs
                }
                None => Vec::new(),
            };
            let doc = svg::render(&ws, &tree, &reach, &runs);
            m.write(out, doc.as_bytes())?;
            m.finish(out, "export-svg", &cfg)?;
        }
    }
    Ok(())
}

fn run_retrain(a: &RetrainArgs, cfg: &mut RunConfig, mut m: Manifest) -> Result<(), CliError> {
    if let Some(e) = a.epochs {
        cfg.pipeline.epochs = e;
    }
    if let Some(t) = a.lambda_target {
        cfg.pipeline.loss.lambda_s_target = t;
    }
    let (ws, robot) = world(cfg, &mut m)?;
    let d = load_data(&a.data, &mut m)?;
    // Closed-loop dynamics must match the gain the data was shaped for.
    cfg.pipeline.k = d.meta.k;
    let lc = cfg.pipeline.loss.clone();
    let (net, adam) = match &a.model {
        Some(p) => {
            let (net, adam) = load_model(p, &mut m)?;
            let adam = adam.unwrap_or_else(|| Adam::new(net.param_count(), &lc));
            (net, adam)
        }
        None => {
            let mut net = Mlp::init(&cfg.pipeline.arch, cfg.pipeline.seed)?;
            let mut adam = Adam::new(net.param_count(), &lc);
            train_base_steps(&mut net, &mut adam, &d, &lc, lc.base_steps)?;
            (net, adam)
        }
    };
    let file = std::fs::File::create(&a.report).map_err(|e| io_err(&a.report, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut write_err = None;
    let res = retrain(&ws, &robot, &d, &cfg.pipeline, net, adam, |rep| {
        let line = rep.to_json_line();
        eprintln!("{line}");
        if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    drop(w);
    if let Some(e) = write_err {
        return Err(io_err(&a.report, e));
    }
    m.record_output(&a.report)?;
    if let Some(p) = &a.out_model {
        m.write(p, &model_bytes(&res.state.net, &res.state.adam, json!({"epoch": res.state.epoch})))?;
    }
    if let Some(p) = &a.out_partition {
        m.write(p, (res.tree.to_json() + "\n").as_bytes())?;
    }
    m.finish(&a.report, "retrain", cfg)?;
    nonempty(&res.tree)
}

/// Rollouts from `simulate`, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub goal: [f64; 3],
    pub goal_tol: f64,
    pub runs: Vec<Rollout>,
}

pub fn random_starts(ws: &Workspace, robot: &RobotBody, n: usize, seed: u64) -> Vec<[f64; 3]> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    (0..n).map(|_| sample_safe(ws, robot, &mut rng)).collect()
}

pub fn simulate(net: &Mlp, ws: &Workspace, robot: &RobotBody, cfg: &RunConfig, starts: &[[f64; 3]]) -> Simulation {
    use rayon::prelude::*;
    let dynamics = Holonomic { k: cfg.data.k };
    let (goal, tol) = (cfg.data.goal, cfg.simulate.goal_tol);
    let runs = starts.par_iter().map(|&z0| rollout(net, &dynamics, z0, cfg.simulate.steps, ws, robot, goal, tol)).collect();
    Simulation { goal, goal_tol: tol, runs }
}

/// Parses `argv`, runs, and returns the process exit code. Errors go to
/// stderr as one JSON object.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", CliError::Validation(e.to_string().trim_end().to_string()).to_json());
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
