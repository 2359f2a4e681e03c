use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pepgs::checkpoint::Checkpoint;
use pepgs::config::{TrainConfig, KEYS};
use pepgs::dataset::SceneDirectory;
use pepgs::scene::io::parse_camera;
use pepgs::synth::{parse_shapes, synthesize, SynthOptions};
use pepgs::train::{evaluate, init_model, loss_csv, train};
use pepgs::Error;

/// Anchored neural Gaussian splatting at desk scale.
#[derive(Parser, Debug)]
#[command(name = "pepgs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic blob scene with ground-truth images.
    Synth(SynthArgs),
    /// Train a model on a scene directory.
    Train(TrainArgs),
    /// Render one view of a checkpoint to a PPM file.
    Render(RenderArgs),
    /// Score a checkpoint on the held-out views of a scene.
    Eval(EvalArgs),
    /// Print checkpoint metadata.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output scene directory [required]
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated blob shapes (sphere, ellipsoid)
    #[arg(long, default_value = "sphere,ellipsoid,sphere,ellipsoid,sphere")]
    shapes: String,
    /// Number of ring cameras
    #[arg(long, default_value_t = 10)]
    views: usize,
    /// Image width in pixels
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Image height in pixels
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Random seed for blobs and points
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Point-cloud samples per blob
    #[arg(long, default_value_t = 250)]
    points_per_blob: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Scene directory with points.txt, cameras.json and images/ [required]
    #[arg(long)]
    scene: PathBuf,
    /// Output directory for checkpoint.pepg, loss.csv, manifest.txt and snapshots/ [required]
    #[arg(long)]
    out: PathBuf,
    /// `key = value` config file [default: none, built-in values]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the iteration count [default: config value, 30000]
    #[arg(long)]
    iterations: Option<usize>,
    /// Override the seed [default: config value, 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Override the worker thread count [default: config value, 1]
    #[arg(long)]
    threads: Option<usize>,
    /// Override any config key, as key=value; repeatable [default: none]
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Drop the pyramid term from the objective [default: false]
    #[arg(long)]
    disable_nlpd: bool,
    /// Replace the attention color path with a linear color head [default: false]
    #[arg(long)]
    disable_hgsa: bool,
    /// Replace the covariance KAN with a linear head [default: false]
    #[arg(long)]
    disable_kan_cov: bool,
    /// Replace the opacity KAN with a linear head [default: false]
    #[arg(long)]
    disable_kan_op: bool,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Checkpoint file [required]
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene directory whose cameras.json supplies --camera [default: none]
    #[arg(long, requires = "camera", conflicts_with = "pose")]
    scene: Option<PathBuf>,
    /// Camera index into the scene's cameras.json [default: none]
    #[arg(long, requires = "scene")]
    camera: Option<usize>,
    /// JSON file holding a single camera record; required without --camera [default: none]
    #[arg(long, required_unless_present = "camera")]
    pose: Option<PathBuf>,
    /// Output PPM path [required]
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint file [required]
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene directory; views with index divisible by test_every are scored [required]
    #[arg(long)]
    scene: PathBuf,
    /// Write the JSON summary here [default: none]
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write the metric=value report here as well as to stdout [default: none]
    #[arg(long)]
    text: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Checkpoint file [required]
    #[arg(long)]
    checkpoint: PathBuf,
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::UnknownConfigKey { .. } | Error::InvalidConfigValue { .. } => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn with_path(path: &Path) -> impl FnOnce(Error) -> Failure + '_ {
    move |e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    }
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let opts = SynthOptions {
        shapes: parse_shapes(&a.shapes).map_err(|e| usage(e.to_string()))?,
        views: a.views,
        width: a.width,
        height: a.height,
        seed: a.seed,
        points_per_blob: a.points_per_blob,
        ..SynthOptions::default()
    };
    let scene = synthesize(&opts).map_err(|e| usage(e.to_string()))?.scene;
    scene.write(&a.out).map_err(with_path(&a.out))?;
    println!("wrote {} views to {}", scene.views.len(), a.out.display());
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| with_path(path)(e.into()))?;
        cfg.apply_text(&text).map_err(with_path(path))?;
    }
    for item in &a.set {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {item:?}; valid keys: {}", KEYS.join(", "))))?;
        cfg.set(key.trim(), value)?;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.threads {
        cfg.threads = t;
    }
    cfg.ablation.disable_nlpd |= a.disable_nlpd;
    cfg.ablation.disable_hgsa |= a.disable_hgsa;
    cfg.ablation.disable_kan_cov |= a.disable_kan_cov;
    cfg.ablation.disable_kan_op |= a.disable_kan_op;
    if cfg.ablation.disable_nlpd {
        cfg.weights.nlpd = 0.0;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest(cfg: &TrainConfig, scene: &Path, train_views: &[usize], test_views: &[usize]) -> String {
    let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    format!(
        "# pepgs training run\n# scene: {}\n# train views: {}\n# test views: {}\n{}",
        scene.display(),
        list(train_views),
        list(test_views),
        cfg.echo()
    )
}

fn train_cmd(a: TrainArgs) -> Result<(), Failure> {
    let cfg = resolve_config(&a)?;
    let scene = SceneDirectory::load(&a.scene).map_err(with_path(&a.scene))?;
    let (train_idx, test_idx) = scene.split(cfg.test_every);
    let views: Vec<_> = train_idx.iter().map(|&i| scene.views[i].clone()).collect();
    let snapshots = a.out.join("snapshots");
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("manifest.txt"), manifest(&cfg, &a.scene, &train_idx, &test_idx))?;
    if cfg.snapshot_every > 0 {
        fs::create_dir_all(&snapshots)?;
    }
    let model = init_model(&scene.cloud, &cfg)?;
    let result = train(model, &views, &cfg, |i, ckpt| ckpt.save(&snapshots.join(format!("snapshot_{i:06}.pepg"))));
    let outcome = match result {
        Ok(o) => o,
        Err(Error::NonFiniteLoss { iteration, last_good }) => {
            let path = a.out.join("last_good.pepg");
            last_good.save(&path)?;
            return Err(Failure {
                code: 2,
                message: format!(
                    "non-finite loss at iteration {iteration}; last good checkpoint written to {}",
                    path.display()
                ),
            });
        }
        Err(e) => return Err(e.into()),
    };
    Checkpoint::from_model(&outcome.model, &cfg).save(&a.out.join("checkpoint.pepg"))?;
    fs::write(a.out.join("loss.csv"), loss_csv(&outcome.log))?;
    match outcome.log.last() {
        Some(r) => println!("trained {} iterations, final loss {}", outcome.log.len(), r.loss.total),
        None => println!("trained 0 iterations"),
    }
    Ok(())
}

fn render_cmd(a: RenderArgs) -> Result<(), Failure> {
    let model = Checkpoint::load(&a.checkpoint).map_err(with_path(&a.checkpoint))?.to_model()?;
    let camera = match (&a.pose, &a.scene, a.camera) {
        (Some(pose), _, _) => {
            let text = fs::read_to_string(pose).map_err(|e| with_path(pose)(e.into()))?;
            parse_camera(&text).map_err(with_path(pose))?
        }
        (None, Some(scene), Some(index)) => {
            let text = fs::read_to_string(scene.join("cameras.json"))?;
            let records = pepgs::scene::io::parse_cameras(&text)?;
            records
                .get(index)
                .ok_or(Error::IndexOutOfRange {
                    index,
                    len: records.len(),
                })?
                .camera()?
        }
        _ => return Err(usage("give either --pose or --scene with --camera")),
    };
    model.render(&camera)?.write_ppm(&a.out).map_err(with_path(&a.out))?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&a.checkpoint).map_err(with_path(&a.checkpoint))?;
    let cfg = ckpt.train_config()?;
    let model = ckpt.to_model()?;
    let scene = SceneDirectory::load(&a.scene).map_err(with_path(&a.scene))?;
    let (_, test) = scene.split(cfg.test_every);
    let pairs: Vec<_> = test.iter().map(|&i| (i, &scene.views[i])).collect();
    let report = evaluate(&model, &pairs)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(path) = &a.text {
        fs::write(path, &text)?;
    }
    if let Some(path) = &a.json {
        fs::write(path, report.to_json())?;
    }
    Ok(())
}

fn inspect_cmd(a: InspectArgs) -> Result<(), Failure> {
    let bytes = fs::read(&a.checkpoint)?;
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(with_path(&a.checkpoint))?;
    let checksum: String = bytes[bytes.len() - 32..].iter().map(|b| format!("{b:02x}")).collect();
    println!("format = PEPG v{}", pepgs::checkpoint::VERSION);
    println!("sha256 = {checksum}");
    println!("parameters = {}", ckpt.parameter_count());
    for t in &ckpt.tensors {
        let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
        println!("tensor {} [{}]", t.name, shape.join(", "));
    }
    println!("# config");
    print!("{}", ckpt.config);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
