//! `voxfcn` command line: synthesize scenes, train, detect, evaluate, and run
//! the numerical self-checks.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data/checkpoint error,
//! 3 numerical-check failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use voxfcn::config::{Config, ConfigError};
use voxfcn::fcn3d::{full_loss_grad_check, load_checkpoint, save_checkpoint, NetworkParams};
use voxfcn::pipeline::{
    self, detect_scene, evaluate, format_pr_dump, format_report, list_scene_ids, load_scene,
    write_candidates, write_detections, GtFrame, SceneData,
};
use voxfcn::synth::{generate_scene, SceneSpec};
use voxfcn::voxel::{generate_targets, voxelize};

#[derive(Parser)]
#[command(
    name = "voxfcn",
    version,
    about = "3D fully convolutional vehicle detection on voxelized lidar"
)]
struct Cli {
    /// Configuration file (key = value lines, # comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set train.epochs=3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Worker thread cap for the parallel kernels.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate KITTI-format synthetic scene trios plus an index file.
    Synth(SynthArgs),
    /// Train on a directory of scene trios and write a checkpoint.
    Train(TrainArgs),
    /// Run detection over scene trios and write a detection file.
    Detect(DetectArgs),
    /// Evaluate a detection file against ground-truth trios.
    Eval(EvalArgs),
    /// Layer-wise and full-loss gradient checks against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for velodyne/, labels/, calib/, index.txt.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long)]
    count: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of scene trios.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    checkpoint_out: PathBuf,
    /// Loss history output (default: <checkpoint>.losses.txt).
    #[arg(long)]
    loss_out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of scene trios.
    #[arg(long)]
    data: PathBuf,
    /// Detection output file.
    #[arg(long)]
    out: PathBuf,
    /// Also dump pre-suppression candidates to this file.
    #[arg(long)]
    dump_candidates: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Detection file written by `detect`.
    #[arg(long)]
    detections: PathBuf,
    /// Directory of ground-truth scene trios.
    #[arg(long)]
    ground_truth: PathBuf,
    /// PR dump output (default: <detections>.pr.txt).
    #[arg(long)]
    pr_out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the random inputs and parameter draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fault-injection hook: corrupt one analytic gradient entry; the run
    /// must then fail with exit code 3.
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<pipeline::PipelineError> for CliError {
    fn from(e: pipeline::PipelineError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<voxfcn::io_kitti::IoKittiError> for CliError {
    fn from(e: voxfcn::io_kitti::IoKittiError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<voxfcn::fcn3d::Fcn3dError> for CliError {
    fn from(e: voxfcn::fcn3d::Fcn3dError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<voxfcn::synth::SynthError> for CliError {
    fn from(e: voxfcn::synth::SynthError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, CliError> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {s:?}")))
        })
        .collect()
}

fn init_thread_pool(threads: usize) -> Result<(), CliError> {
    if threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = parse_overrides(&cli.overrides)?;
    let config = Config::load(cli.config.as_deref(), &overrides)?;
    init_thread_pool(cli.threads)?;
    match cli.command {
        Command::Synth(args) => cmd_synth(&config, &args),
        Command::Train(args) => cmd_train(&config, &args),
        Command::Detect(args) => cmd_detect(&config, &args),
        Command::Eval(args) => cmd_eval(&config, &args),
        Command::Gradcheck(args) => cmd_gradcheck(&config, &args),
    }
}

fn scene_id(i: usize) -> String {
    format!("{i:06}")
}

fn cmd_synth(config: &Config, args: &SynthArgs) -> Result<(), CliError> {
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", args.out.display())))?;
    let mut ids = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let spec = SceneSpec {
            seed: config.synth.seed.wrapping_add(i as u64),
            ..config.synth.clone()
        };
        let (cloud, labels, calib) = generate_scene(&spec)?;
        let id = scene_id(i);
        pipeline::write_scene(
            &args.out,
            &id,
            &SceneData {
                id: id.clone(),
                cloud,
                labels,
                calib,
            },
        )?;
        ids.push(id);
    }
    let index = args.out.join(pipeline::INDEX_FILE);
    let body = if ids.is_empty() {
        String::new()
    } else {
        ids.join("\n") + "\n"
    };
    std::fs::write(&index, body)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", index.display())))?;
    println!("wrote {} scenes to {}", args.count, args.out.display());
    Ok(())
}

fn cmd_train(config: &Config, args: &TrainArgs) -> Result<(), CliError> {
    let ids = list_scene_ids(&args.data)?;
    if ids.is_empty() {
        return Err(CliError::Data(format!(
            "no scenes found under {}",
            args.data.display()
        )));
    }
    let mut scenes = Vec::with_capacity(ids.len());
    for id in &ids {
        let scene = load_scene(&args.data, id)?;
        let grid = voxelize(&scene.cloud, &config.grid);
        let targets = generate_targets(
            &scene.labels,
            &scene.calib,
            &config.grid,
            config.sphere_radius_fraction,
        );
        scenes.push((grid, targets));
    }

    let (params, history) = voxfcn::fcn3d::train(&scenes, &config.arch, &config.train)?;
    save_checkpoint(&params, &args.checkpoint_out)?;

    let loss_path = args
        .loss_out
        .clone()
        .unwrap_or_else(|| with_suffix(&args.checkpoint_out, ".losses.txt"));
    let mut text = String::from("# epoch mean_objectness mean_box mean_total\n");
    for e in &history {
        text.push_str(&format!(
            "{} {:.6e} {:.6e} {:.6e}\n",
            e.epoch, e.mean_objectness, e.mean_box, e.mean_total
        ));
    }
    std::fs::write(&loss_path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", loss_path.display())))?;
    println!(
        "trained {} epochs on {} scenes -> {}",
        history.len(),
        scenes.len(),
        args.checkpoint_out.display()
    );
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_detect(config: &Config, args: &DetectArgs) -> Result<(), CliError> {
    let params = load_checkpoint(&args.checkpoint)?;
    let got = params.arch();
    if got != config.arch {
        return Err(CliError::Data(format!(
            "checkpoint architecture {:?}/{:?} does not match configured {:?}/{:?}",
            got.channels, got.kernels, config.arch.channels, config.arch.kernels
        )));
    }
    let ids = list_scene_ids(&args.data)?;
    let mut all_dets = Vec::with_capacity(ids.len());
    let mut all_cands = Vec::with_capacity(ids.len());
    for id in &ids {
        let scene = load_scene(&args.data, id)?;
        let (cands, dets) = detect_scene(&params, config, &scene.cloud)?;
        if args.dump_candidates.is_some() {
            all_cands.push((id.clone(), cands));
        }
        all_dets.push((id.clone(), dets));
    }
    write_detections(&args.out, &all_dets)?;
    if let Some(cand_path) = &args.dump_candidates {
        write_candidates(cand_path, &all_cands)?;
    }
    let total: usize = all_dets.iter().map(|(_, d)| d.len()).sum();
    println!(
        "wrote {total} detections over {} scenes to {}",
        ids.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(config: &Config, args: &EvalArgs) -> Result<(), CliError> {
    let detections = pipeline::read_detections(&args.detections)?;
    let gt_ids = list_scene_ids(&args.ground_truth)?;
    let mut frames = Vec::with_capacity(gt_ids.len());
    for id in &gt_ids {
        let scene = load_scene(&args.ground_truth, id)?;
        frames.push(GtFrame {
            id: id.clone(),
            labels: scene.labels,
            calib: scene.calib,
        });
    }

    // detections referencing unknown scene ids are listed and skipped
    let mut usable = Vec::new();
    let mut skipped = 0usize;
    for (id, dets) in detections {
        if gt_ids.contains(&id) {
            usable.push((id, dets));
        } else {
            skipped += 1;
            eprintln!("warning: skipping detections for unknown scene id {id:?}");
        }
    }
    if usable.is_empty() && skipped > 0 {
        return Err(CliError::Data(
            "every detection referenced an unknown scene id".into(),
        ));
    }

    let rows = evaluate(
        &usable,
        &frames,
        config.eval.iou_threshold,
        config.eval.difficulty_mode,
    );
    print!("{}", format_report(&rows));
    let pr_path = args
        .pr_out
        .clone()
        .unwrap_or_else(|| with_suffix(&args.detections, ".pr.txt"));
    std::fs::write(&pr_path, format_pr_dump(&rows, config.eval.iou_threshold))
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", pr_path.display())))?;
    Ok(())
}

const GRADCHECK_THRESHOLD: f64 = 1e-3;
const GRADCHECK_STEP: f32 = 1e-3;

fn cmd_gradcheck(config: &Config, args: &GradcheckArgs) -> Result<(), CliError> {
    use rand::Rng;
    use voxfcn::tensor_nn::{
        conv3d_backward, conv3d_forward, deconv3d_backward, deconv3d_forward, grad_check,
        relu_backward, relu_forward, ConvLayer, DeconvLayer, Tensor,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut failures: Vec<String> = Vec::new();
    let report = |name: &str, err: f64, failures: &mut Vec<String>| {
        let ok = err < GRADCHECK_THRESHOLD;
        println!(
            "{name:<28} max_rel_err {err:.3e}  {}",
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failures.push(format!("{name}: {err:.3e}"));
        }
    };

    let params =
        NetworkParams::init(args.seed, &config.arch).map_err(|e| CliError::Usage(e.to_string()))?;

    let rand_tensor = |rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32| {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    };

    // conv layers on the 16^3 downsampling ladder:
    // probe f(kernel) = <g, conv(x; kernel)> for a fixed random functional g
    let conv_specs = [
        ("conv1 kernel", &params.conv1, [1usize, 16, 16, 16]),
        ("conv2 kernel", &params.conv2, [config.arch.channels[0], 8, 8, 8]),
        ("conv3 kernel", &params.conv3, [config.arch.channels[1], 4, 4, 4]),
    ];
    for (name, layer, in_shape) in conv_specs {
        let input = rand_tensor(&mut rng, &in_shape, 0.0, 1.0);
        let out = conv3d_forward(&input, layer).map_err(|e| CliError::Numerical(e.to_string()))?;
        let g = rand_tensor(&mut rng, out.shape(), -1.0, 1.0);
        let (_, mut gk, _) =
            conv3d_backward(&input, layer, &g).map_err(|e| CliError::Numerical(e.to_string()))?;
        if args.corrupt_gradient && name == "conv1 kernel" {
            gk.data_mut()[0] += 0.25;
        }
        let f = |kernel: &Tensor| -> Option<f64> {
            let probe =
                ConvLayer::new(kernel.clone(), layer.bias.clone(), layer.stride, layer.padding)
                    .ok()?;
            let out = conv3d_forward(&input, &probe).ok()?;
            Some(
                out.data()
                    .iter()
                    .zip(g.data())
                    .map(|(&o, &w)| o as f64 * w as f64)
                    .sum(),
            )
        };
        let r = grad_check(f, &layer.kernel, &gk, GRADCHECK_STEP, 96, &mut rng);
        report(name, r.max_rel_err, &mut failures);
    }

    // deconv heads through the transposed map
    for (name, layer) in [
        ("deconv4a kernel", &params.deconv4a),
        ("deconv4b kernel", &params.deconv4b),
    ] {
        let input = rand_tensor(&mut rng, &[layer.in_channels(), 2, 2, 2], -1.0, 1.0);
        let out =
            deconv3d_forward(&input, layer).map_err(|e| CliError::Numerical(e.to_string()))?;
        let g = rand_tensor(&mut rng, out.shape(), -1.0, 1.0);
        let (_, gk, _) = deconv3d_backward(&input, layer, &g)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let f = |kernel: &Tensor| -> Option<f64> {
            let probe = DeconvLayer::new(kernel.clone(), layer.bias.clone(), layer.stride).ok()?;
            let out = deconv3d_forward(&input, &probe).ok()?;
            Some(
                out.data()
                    .iter()
                    .zip(g.data())
                    .map(|(&o, &w)| o as f64 * w as f64)
                    .sum(),
            )
        };
        let r = grad_check(f, &layer.kernel, &gk, GRADCHECK_STEP, 96, &mut rng);
        report(name, r.max_rel_err, &mut failures);
    }

    // relu: finite differences with perturbations near the kink vetoed
    {
        let x = rand_tensor(&mut rng, &[512], -1.0, 1.0);
        let g = rand_tensor(&mut rng, &[512], -1.0, 1.0);
        let analytic =
            relu_backward(&x, &g).map_err(|e| CliError::Numerical(e.to_string()))?;
        let x0 = x.clone();
        let f = |t: &Tensor| -> Option<f64> {
            for (&a, &b) in t.data().iter().zip(x0.data()) {
                if a != b && b.abs() < 1e-2 {
                    return None;
                }
            }
            let out = relu_forward(t);
            Some(
                out.data()
                    .iter()
                    .zip(g.data())
                    .map(|(&o, &w)| o as f64 * w as f64)
                    .sum(),
            )
        };
        let r = grad_check(f, &x, &analytic, GRADCHECK_STEP, 512, &mut rng);
        report("relu", r.max_rel_err, &mut failures);
    }

    // full training loss, every parameter tensor
    let full = full_loss_grad_check(
        &config.arch,
        config.train.box_weight,
        args.seed,
        GRADCHECK_STEP,
        96,
        &mut rng,
    )
    .map_err(|e| CliError::Numerical(e.to_string()))?;
    for (name, err) in full {
        report(&format!("full loss / {name}"), err, &mut failures);
    }

    if failures.is_empty() {
        println!("gradcheck passed (threshold {GRADCHECK_THRESHOLD:.0e})");
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed: {}",
            failures.join("; ")
        )))
    }
}
