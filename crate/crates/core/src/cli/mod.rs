//! The `alto` command line: data generation, training, reconstruction,
//! evaluation, gradient checks and timing.
//!
//! Exit codes: 0 on success, 2 for usage, configuration and I/O errors,
//! 3 for numerical failures (and failed gradient checks).

mod config;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::{json, Value};

pub use config::{BenchConfig, DataConfig, EvalConfig, GenerateConfig, MeshConfig, RunConfig};

use crate::ad::{AdamState, Padding, ParamSet};
use crate::convert::GridMode;
use crate::decoder::{DecodeMode, PreparedGrid};
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::geometry::{self, stream, normalize_cloud, occupancy_oracle, PointCloud, Transform};
use crate::gradsuite::{self, Scope};
use crate::io;
use crate::mesh::{self, evaluate_grid, marching_cubes, refine_vertices, surface_metrics, Mesh, OccupancyVolume};
use crate::tensor::DType;
use crate::train::{self, fit, init_model, Checkpoint, LossRecord, ModelConfig, TrainData, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const LOSS_HEADER: &str = "step,sum_loss,mean_loss";
pub const BENCH_HEADER: &str = "stage,items,repeats,median_seconds,seconds_per_item";

#[derive(Parser, Debug)]
#[command(name = "alto", version, about = "Occupancy-field surface reconstruction from point clouds")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write noisy clouds and labelled queries for every configured shape.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Fit a model; writes checkpoints, loss.csv and config.json to --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint. `--steps` is the total step count.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Mesh the occupancy field a checkpoint predicts for a cloud.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        refine_iters: Option<usize>,
        /// Fit the cloud's bounding box into the unit cube first.
        #[arg(long)]
        normalize: bool,
    },
    /// Compare a mesh with a reference mesh or the configured shape.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Reference mesh; without it the single configured shape is used.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Labelled queries to score IoU on instead of uniform samples.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics JSON; printed to stdout as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: String,
    },
    /// Time encode, decode and marching cubes.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        repeats: Option<usize>,
    },
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    #[arg(long, value_parser = parse_mode)]
    mode: Option<GridMode>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    /// Number of alternating blocks.
    #[arg(long)]
    alternation: Option<usize>,
    #[arg(long, value_parser = parse_decode)]
    decode: Option<DecodeMode>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, value_parser = parse_padding)]
    padding: Option<Padding>,
    #[arg(long, value_parser = parse_dtype)]
    dtype: Option<DType>,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    #[arg(long)]
    noise: Option<f64>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<GridMode, String> {
    parse_enum(s)
}

fn parse_decode(s: &str) -> std::result::Result<DecodeMode, String> {
    parse_enum(s)
}

fn parse_padding(s: &str) -> std::result::Result<Padding, String> {
    parse_enum(s)
}

fn parse_dtype(s: &str) -> std::result::Result<DType, String> {
    parse_enum(s)
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

impl ModelArgs {
    fn apply(self, m: &mut ModelConfig) {
        let e = &mut m.encoder;
        set(&mut e.mode, self.mode);
        set(&mut e.resolution, self.resolution);
        set(&mut e.dim, self.dim);
        set(&mut e.depth, self.depth);
        set(&mut e.padding, self.padding);
        if self.alternation.is_some() {
            e.alternation = self.alternation;
        }
        set(&mut m.decoder.decode, self.decode);
        set(&mut m.decoder.heads, self.heads);
        set(&mut m.dtype, self.dtype);
    }
}

impl TrainArgs {
    fn apply(self, t: &mut train::TrainConfig) {
        set(&mut t.steps, self.steps);
        set(&mut t.lr, self.lr);
        set(&mut t.seed, self.seed);
        set(&mut t.points, self.points);
        set(&mut t.queries, self.queries);
        set(&mut t.checkpoint_interval, self.checkpoint_interval);
        set(&mut t.noise_sigma, self.noise);
    }
}

/// Entry point of the binary: parses `std::env::args` and returns the exit code.
pub fn main() -> i32 {
    run(std::env::args_os())
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

/// Sizes the global worker pool from `ALTO_THREADS` (unset or 0: one per core).
fn configure_threads() -> Result<()> {
    let n = match std::env::var("ALTO_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("ALTO_THREADS must be a non-negative integer, got '{v}'")))?,
        Err(_) => 0,
    };
    if n > 0 {
        // Fails only when a pool already exists, e.g. on a second in-process run.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            warn!("thread pool already initialised; ALTO_THREADS={n} ignored");
        }
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenerateData { config, out, seed, points, queries, noise } => {
            let mut cfg = load_config(config.as_deref())?;
            set(&mut cfg.generate.seed, seed);
            set(&mut cfg.generate.points, points);
            set(&mut cfg.generate.queries, queries);
            set(&mut cfg.generate.noise_sigma, noise);
            cfg.validate()?;
            cmd_generate_data(&cfg, &out)?;
        }
        Command::Train { config, out, resume, model, train } => {
            let mut cfg = load_config(config.as_deref())?;
            model.apply(&mut cfg.model);
            train.apply(&mut cfg.train);
            cfg.validate()?;
            cmd_train(&cfg, &out, resume.as_deref())?;
        }
        Command::Reconstruct { checkpoint, input, out, config, resolution, threshold, refine_iters, normalize } => {
            let mut cfg = load_config(config.as_deref())?;
            let explicit_model = config.is_some();
            set(&mut cfg.mesh.resolution, resolution);
            set(&mut cfg.mesh.threshold, threshold);
            set(&mut cfg.mesh.refine_iters, refine_iters);
            cfg.mesh.normalize |= normalize;
            cmd_reconstruct(&mut cfg, explicit_model, &checkpoint, &input, &out)?;
        }
        Command::Eval { pred, reference, queries, config, samples, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            set(&mut cfg.eval.samples, samples);
            set(&mut cfg.eval.seed, seed);
            cfg.validate()?;
            let report = cmd_eval(&cfg, &pred, reference.as_deref(), queries.as_deref())?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            if let Some(out) = out {
                fs::write(&out, &text)?;
            }
            print!("{text}");
        }
        Command::Gradcheck { scope } => {
            let scope: Scope = scope.parse()?;
            return cmd_gradcheck(scope, &mut std::io::stdout());
        }
        Command::Bench { config, out, model, repeats } => {
            let mut cfg = load_config(config.as_deref())?;
            model.apply(&mut cfg.model);
            set(&mut cfg.bench.repeats, repeats);
            cfg.validate()?;
            let table = cmd_bench(&cfg)?;
            if let Some(out) = out {
                fs::write(&out, &table)?;
            }
            print!("{table}");
        }
    }
    Ok(EXIT_OK)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

/// Writes `shape_NNN.xyz` (noisy surface samples) and `shape_NNN_queries.txt`
/// (oracle-labelled uniform queries) per shape, plus `manifest.json` and the
/// merged `config.json`.
pub fn cmd_generate_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.shapes.is_empty() {
        return Err(Error::Config("no shapes to generate; add some under \"shapes\"".into()));
    }
    create_dir(out)?;
    let g = &cfg.generate;
    let mut files = Vec::new();
    for (i, spec) in cfg.shapes.iter().enumerate() {
        let seed = g.seed + i as u64;
        let clean = geometry::sample_surface(spec, g.points, seed)?;
        let noisy = geometry::add_noise(&clean, g.noise_sigma, seed)?;
        let cloud = format!("shape_{i:03}.xyz");
        io::write_xyz(&out.join(&cloud), &noisy)?;
        files.push(json!({"path": cloud, "kind": "points", "shape": i, "seed": seed, "count": noisy.len()}));
        if g.queries > 0 {
            let q = geometry::sample_queries_stream(g.queries, seed, stream::QUERIES)?.with_labels_from(spec);
            let name = format!("shape_{i:03}_queries.txt");
            fs::write(out.join(&name), io::format_queries(&q)?)?;
            files.push(json!({"path": name, "kind": "queries", "shape": i, "seed": seed, "count": q.len()}));
        }
    }
    cfg.write(&out.join("config.json"))?;
    files.push(json!({"path": "config.json", "kind": "config", "seed": g.seed}));
    let manifest = json!({"files": files});
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    info!("wrote {} files to {}", files.len() + 1, out.display());
    Ok(())
}

fn checkpoint_config(cfg: &RunConfig) -> Result<Value> {
    Ok(serde_json::to_value(cfg)?)
}

/// Errors unless `params` has exactly the tensors `model` needs.
fn check_params(model: &ModelConfig, params: &ParamSet) -> Result<()> {
    let want = init_model(model, 0)?;
    let mismatch = want.len() != params.len()
        || want.iter().any(|(n, t)| params.get(n).map_or(true, |p| p.shape() != t.shape()));
    if mismatch {
        return Err(Error::Config("checkpoint parameters do not match the model config".into()));
    }
    Ok(())
}

fn train_data(cfg: &RunConfig) -> Result<TrainData> {
    match (&cfg.data.points, &cfg.data.queries) {
        (Some(p), Some(q)) => Ok(TrainData::Labeled {
            points: io::read_xyz(p)?,
            queries: io::parse_queries(&fs::read_to_string(q)?)?,
        }),
        (None, None) => Ok(TrainData::Shape(cfg.single_shape()?.clone())),
        _ => Err(Error::Config("data.points and data.queries must be given together".into())),
    }
}

fn loss_row(r: &LossRecord) -> String {
    format!("{},{},{}", r.step, r.sum, r.mean)
}

/// Runs training into `out`: `checkpoint_NNNNNN.bin` every
/// `checkpoint_interval` steps, `checkpoint.bin` at the end, `loss.csv`
/// and `config.json`. With `resume`, training continues from that
/// checkpoint up to `train.steps` total steps; earlier rows of an existing
/// `loss.csv` are kept.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<Vec<LossRecord>> {
    let data = train_data(cfg)?;
    create_dir(out)?;
    let snapshot = checkpoint_config(cfg)?;
    let mut state = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.model()? != cfg.model {
                return Err(Error::Config(format!("{} was trained with a different model config", path.display())));
            }
            check_params(&cfg.model, &ckpt.params)?;
            let adam = match ckpt.adam {
                Some(a) => a,
                None => AdamState::new(&ckpt.params, cfg.train.adam())?,
            };
            TrainState { params: ckpt.params, adam, step: ckpt.step }
        }
        None => TrainState::new(init_model(&cfg.model, cfg.train.seed)?, &cfg.train)?,
    };
    let csv_path = out.join("loss.csv");
    let mut kept = Vec::new();
    if resume.is_some() {
        if let Ok(old) = fs::read_to_string(&csv_path) {
            kept = old
                .lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= state.step))
                .map(str::to_string)
                .collect();
        }
    }
    cfg.write(&out.join("config.json"))?;
    let mut csv = BufWriter::new(File::create(&csv_path)?);
    writeln!(csv, "{LOSS_HEADER}")?;
    for l in &kept {
        writeln!(csv, "{l}")?;
    }
    let mut run_cfg = cfg.train.clone();
    run_cfg.steps = cfg.train.steps.saturating_sub(state.step);
    let interval = cfg.train.checkpoint_interval;
    let result = fit(&data, &cfg.model, &run_cfg, &mut state, |st, rec| {
        writeln!(csv, "{}", loss_row(rec))?;
        if interval > 0 && rec.step % interval == 0 {
            csv.flush()?;
            Checkpoint::from_state(snapshot.clone(), st).save(&out.join(format!("checkpoint_{:06}.bin", rec.step)))?;
        }
        Ok(())
    });
    csv.flush()?;
    let history = result?;
    Checkpoint::from_state(snapshot, &state).save(&out.join("checkpoint.bin"))?;
    if let Some(last) = history.last() {
        info!("trained to step {} mean loss {:.6}", last.step, last.mean);
    }
    Ok(history)
}

/// Encodes the cloud at `input` with the checkpoint's model and writes the
/// extracted, refined surface to `out` as OBJ, with the merged config next
/// to it as `<out>.config.json`.
pub fn cmd_reconstruct(cfg: &mut RunConfig, explicit_model: bool, checkpoint: &Path, input: &Path, out: &Path) -> Result<Mesh> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model()?;
    if explicit_model && model != cfg.model {
        return Err(Error::Config(format!("{} does not match the model in the given config", checkpoint.display())));
    }
    check_params(&model, &ckpt.params)?;
    cfg.model = model;
    cfg.validate()?;
    let m = &cfg.mesh;
    let raw = io::read_xyz(input)?;
    let cloud = if m.normalize {
        normalize_cloud(&raw, m.padding)?
    } else {
        PointCloud::from_normalized(raw).map_err(|e| Error::Config(format!("{e}; pass --normalize for clouds outside the unit cube")))?
    };
    let mesh = reconstruct(&cloud, &ckpt.params, &cfg.model, m)?;
    io::write_obj(out, &mesh)?;
    cfg.write(&out.with_extension("config.json"))?;
    Ok(mesh)
}

/// encode, decode on the lattice, marching cubes, refinement, then back to
/// the cloud's original frame.
pub fn reconstruct(cloud: &PointCloud, params: &ParamSet, model: &ModelConfig, m: &MeshConfig) -> Result<Mesh> {
    let grid = encode(cloud, params, &model.encoder)?;
    let vol = evaluate_grid(&grid, params, &model.decoder, m.resolution)?;
    let marched = marching_cubes(&vol, m.threshold)?;
    let refined = if m.refine_iters > 0 {
        let prepared = PreparedGrid::new(&grid, params, &model.decoder)?;
        refine_vertices(&marched, |pts| prepared.predict(pts, params, &model.decoder), m.threshold, m.refine_iters)?
    } else {
        marched
    };
    Ok(if cloud.transform == Transform::IDENTITY {
        refined.mesh
    } else {
        refined.mesh.inverse_transformed(&cloud.transform)
    })
}

/// Metrics of the mesh at `pred` against `reference` (a mesh) or the single
/// configured shape. IoU is reported when occupancy labels exist: from
/// `queries`, the shape oracle or the reference mesh's winding number.
pub fn cmd_eval(cfg: &RunConfig, pred: &Path, reference: Option<&Path>, queries: Option<&Path>) -> Result<Value> {
    let e = &cfg.eval;
    let a = io::read_obj(pred)?;
    if a.is_empty() {
        return Err(Error::Config(format!("{} has no faces", pred.display())));
    }
    let sa = a.sample_surface(e.samples, e.seed)?;
    let reference_mesh = reference.map(io::read_obj).transpose()?;
    let (sb, oracle): (_, Box<dyn Fn(&[geometry::Point]) -> Vec<f64>>) = match &reference_mesh {
        Some(b) => {
            if b.is_empty() {
                return Err(Error::Config("reference mesh has no faces".into()));
            }
            (b.sample_surface(e.samples, e.seed)?, Box::new(move |p: &[geometry::Point]| b.inside_labels(p)))
        }
        None => {
            let spec = cfg.single_shape()?.clone();
            let samples = mesh::analytic_samples(&spec, e.samples, e.seed)?;
            (samples, Box::new(move |p: &[geometry::Point]| occupancy_oracle(&spec, p)))
        }
    };
    let sm = surface_metrics(&sa, &sb, e.fscore_threshold)?;
    let iou = match queries {
        Some(q) => {
            let qb = io::parse_queries(&fs::read_to_string(q)?)?;
            let labels = qb.labels.clone().ok_or_else(|| Error::Config("query file carries no labels".into()))?;
            Some(mesh::metric_iou(&a.inside_labels(&qb.coords), &labels)?)
        }
        None if e.iou_samples > 0 => {
            let qb = geometry::sample_queries_stream(e.iou_samples, e.seed, stream::EVAL)?;
            Some(mesh::metric_iou(&a.inside_labels(&qb.coords), &oracle(&qb.coords))?)
        }
        None => None,
    };
    let mut report = json!({
        "chamfer_l1_x100": sm.chamfer_l1_x100,
        "normal_consistency": sm.normal_consistency,
        "fscore_1pct": sm.fscore,
        "n": e.samples,
        "seed": e.seed,
        "config": checkpoint_config(cfg)?,
    });
    if let Some(iou) = iou {
        report["iou"] = json!(iou);
    }
    Ok(report)
}

/// Runs the gradient checks in `scope`, writing one line per check.
/// Returns 0 when all pass and 3 otherwise.
pub fn cmd_gradcheck(scope: Scope, w: &mut impl Write) -> Result<i32> {
    let start = Instant::now();
    let reports = gradsuite::run(scope)?;
    writeln!(w, "{:<28} {:<8} {:>12} {:>8}  result", "check", "scope", "max_rel_err", "tol")?;
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        writeln!(w, "{:<28} {:<8} {:>12.3e} {:>8.0e}  {verdict}", r.name, r.scope.to_string(), r.max_rel_err, r.tol)?;
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    writeln!(w, "{} checks, {failed} failed, {:.1}s", reports.len(), start.elapsed().as_secs_f64())?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_NUMERICAL })
}

fn median_secs(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut t = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let s = Instant::now();
        f()?;
        t.push(s.elapsed().as_secs_f64());
    }
    t.sort_by(f64::total_cmp);
    Ok(t[t.len() / 2])
}

/// CSV timing table: encoding one cloud, decoding `bench.queries` queries,
/// and marching cubes over the shape's oracle field at `bench.mc_resolution`.
pub fn cmd_bench(cfg: &RunConfig) -> Result<String> {
    let b = &cfg.bench;
    let spec = match cfg.shapes.first() {
        Some(s) => s.clone(),
        None => geometry::ShapeSpec::sphere([0.5; 3], 0.3),
    };
    let params = init_model(&cfg.model, cfg.train.seed)?;
    let cloud = PointCloud::from_normalized(train::training_cloud(&spec, &cfg.train, 0)?)?;
    let queries = geometry::sample_queries_stream(b.queries, cfg.train.seed, stream::EVAL)?.coords;
    let grid = encode(&cloud, &params, &cfg.model.encoder)?;
    let t_enc = median_secs(b.repeats, || encode(&cloud, &params, &cfg.model.encoder).map(drop))?;
    let t_dec = median_secs(b.repeats, || {
        PreparedGrid::new(&grid, &params, &cfg.model.decoder)?.predict(&queries, &params, &cfg.model.decoder).map(drop)
    })?;
    let vol = OccupancyVolume::from_fn(b.mc_resolution, |p| if spec.contains(p) { 1.0 } else { 0.0 })?;
    let t_mc = median_secs(b.repeats, || marching_cubes(&vol, cfg.mesh.threshold).map(drop))?;
    let nodes = b.mc_resolution.pow(3);
    let mut s = format!("{BENCH_HEADER}\n");
    for (stage, items, t) in [("encode", cloud.len(), t_enc), ("decode", b.queries, t_dec), ("marching_cubes", nodes, t_mc)] {
        s += &format!("{stage},{items},{},{t:.6e},{:.6e}\n", b.repeats, t / items as f64);
    }
    Ok(s)
}
