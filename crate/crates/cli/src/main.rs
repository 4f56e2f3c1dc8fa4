use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::info;
use scaleseg::metrics::{evaluate_baseline, rows_to_jsonl, rows_to_table};
use scaleseg::pipeline::run_baseline;
use scaleseg::{
    build_partitions, checkpoint, estimate_gain, evaluate, generate_scene, read_cloud, run_pipeline,
    train_scale, write_cloud, CloudFormat, Error, PartitionConfig, PipelineOptions, PointCloud,
    Result, RunConfig, ScaleModel, Schedule, SceneSpec, SearchStrategy, TrainingScene,
};

#[derive(Parser)]
#[command(name = "scaleseg", version, about = "Resolution-scalable point-cloud segmentation")]
struct Cli {
    /// Run configuration (plain-text key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled room.
    Generate(GenerateArgs),
    /// Split a cloud into disjoint per-scale partitions.
    Partition { input: PathBuf },
    /// Train every scale in order, writing scale_<i>.ckpt into --out.
    Train {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Progressive inference on one cloud.
    Infer {
        input: PathBuf,
        #[arg(long)]
        models: PathBuf,
        /// Per-scale data arrival times in ms, e.g. 0,15,50,80.
        #[arg(long, value_delimiter = ',')]
        arrival_times: Option<Vec<f64>>,
        #[arg(long)]
        no_fusion: bool,
        #[arg(long)]
        threaded: bool,
        /// Print a table instead of JSON lines.
        #[arg(long)]
        table: bool,
    },
    /// Time the scalable pipeline against a whole-cloud pass.
    Bench {
        input: PathBuf,
        /// Trained models; fresh weights from the configuration when omitted.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        search: Option<SearchStrategy>,
        #[arg(long)]
        threaded: bool,
    },
    /// Per-scale accuracy on labeled clouds.
    Eval {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        no_fusion: bool,
        /// Also evaluate a whole-cloud checkpoint on the finest resolution.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        jsonl: bool,
    },
    /// Attention-cost estimate for partition sizes or for a cloud.
    Gain {
        /// Comma-separated partition sizes.
        #[arg(long, value_delimiter = ',', conflicts_with = "input")]
        sizes: Option<Vec<u64>>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 10_000)]
    points: usize,
    #[arg(long, default_value_t = 13)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    objects: usize,
    #[arg(long, value_delimiter = ',', default_value = "4,4,3")]
    extents: Vec<f64>,
    #[arg(long, default_value_t = 0.005)]
    noise: f64,
    #[arg(long, default_value_t = 0.02)]
    color_noise: f64,
    /// binary or ascii; taken from the file extension when omitted.
    #[arg(long)]
    format: Option<CloudFormat>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = cli.out.as_deref();
    match cli.command {
        Command::Generate(a) => generate(&cfg, &a, out),
        Command::Partition { input } => partition(&cfg, &input, out),
        Command::Train { inputs } => train(&cfg, &inputs, out),
        Command::Infer {
            input,
            models,
            arrival_times,
            no_fusion,
            threaded,
            table,
        } => {
            let models = load_models(&models)?;
            let cloud = read_cloud(&input)?;
            let parts = build_partitions(&cloud, &partition_config(&cfg, &models)?)?;
            let opts = PipelineOptions {
                arrival_times: arrival_times.map(|t| to_durations(&t)).transpose()?,
                fusion_enabled: !no_fusion,
                schedule: if threaded { Schedule::Threaded } else { Schedule::Sequential },
                warmup: false,
            };
            let result = run_pipeline(&models, &cloud, &parts, &opts)?;
            if let Some(path) = out {
                let mut order = result.labeled_points();
                order.sort_unstable();
                let (idx, labels): (Vec<usize>, Vec<u16>) = order.into_iter().unzip();
                let sub = cloud.gather(&idx)?;
                let predicted = PointCloud::new(
                    sub.positions().to_vec(),
                    sub.colors().to_vec(),
                    Some(labels),
                    models[0].config.num_classes,
                )?;
                write_cloud(&predicted, path, CloudFormat::from_path(path))?;
            }
            if table {
                print!("{}", result.report.to_table());
            } else {
                print!("{}", result.report.to_jsonl());
            }
            Ok(())
        }
        Command::Bench {
            input,
            models,
            search,
            threaded,
        } => bench(&cfg, &input, models.as_deref(), search, threaded, out),
        Command::Eval {
            inputs,
            models,
            no_fusion,
            baseline,
            jsonl,
        } => {
            let models = load_models(&models)?;
            let pcfg = partition_config(&cfg, &models)?;
            let scenes = load_scenes(&inputs, &pcfg)?;
            let mut rows = evaluate(&models, &scenes, !no_fusion)?;
            if let Some(path) = baseline {
                rows.push(evaluate_baseline(&checkpoint::load(&path)?, &scenes, models.len())?);
            }
            let text = if jsonl { rows_to_jsonl(&rows) } else { rows_to_table(&rows) };
            emit(&text, out)
        }
        Command::Gain { sizes, input } => {
            let sizes = match (sizes, input) {
                (Some(s), _) => s,
                (None, Some(path)) => {
                    let cloud = read_cloud(&path)?;
                    let parts = build_partitions(&cloud, &cfg.partition_config()?)?;
                    parts.sizes().iter().map(|&n| n as u64).collect()
                }
                (None, None) => return Err(Error::Config("gain needs --sizes or --input".into())),
            };
            let est = estimate_gain(&sizes)?;
            emit(&(serde_json::to_string(&est).expect("plain struct serializes") + "\n"), out)
        }
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn require_out(out: Option<&Path>, what: &str) -> Result<PathBuf> {
    out.map(Path::to_path_buf)
        .ok_or_else(|| Error::Config(format!("--out is required for {what}")))
}

fn to_durations(ms: &[f64]) -> Result<Vec<Duration>> {
    ms.iter()
        .map(|&t| {
            Duration::try_from_secs_f64(t / 1e3)
                .map_err(|_| Error::Config(format!("bad arrival time {t}")))
        })
        .collect()
}

fn generate(cfg: &RunConfig, a: &GenerateArgs, out: Option<&Path>) -> Result<()> {
    let path = require_out(out, "generate")?;
    let extents: [f64; 3] = a
        .extents
        .as_slice()
        .try_into()
        .map_err(|_| Error::Config("--extents needs three values".into()))?;
    let spec = SceneSpec {
        extents,
        num_objects: a.objects,
        num_classes: a.classes,
        num_points: a.points,
        noise_sigma: a.noise,
        color_noise: a.color_noise,
        rng_seed: cfg.seed,
    };
    let cloud = generate_scene(&spec)?;
    write_cloud(&cloud, &path, a.format.unwrap_or_else(|| CloudFormat::from_path(&path)))?;
    info!("wrote {} points to {}", cloud.len(), path.display());
    Ok(())
}

fn partition(cfg: &RunConfig, input: &Path, out: Option<&Path>) -> Result<()> {
    let cloud = read_cloud(input)?;
    let parts = build_partitions(&cloud, &cfg.partition_config()?)?;
    let mut text = String::new();
    for (i, (p, v)) in parts.partitions.iter().zip(&parts.voxel_sizes).enumerate() {
        text += &serde_json::json!({"scale": i + 1, "voxel_size": v, "points": p.len()}).to_string();
        text.push('\n');
    }
    println!("{}", text.trim_end());
    if let Some(path) = out {
        fs::write(path, serde_json::to_string(&parts).expect("plain struct serializes"))?;
    }
    Ok(())
}

fn load_scenes(inputs: &[PathBuf], pcfg: &PartitionConfig) -> Result<Vec<TrainingScene>> {
    inputs
        .iter()
        .map(|p| {
            let cloud = read_cloud(p)?;
            let parts = build_partitions(&cloud, pcfg)?;
            Ok(TrainingScene { cloud, parts })
        })
        .collect()
}

fn train(cfg: &RunConfig, inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let dir = require_out(out, "train")?;
    fs::create_dir_all(&dir)?;
    let scenes = load_scenes(inputs, &cfg.partition_config()?)?;
    let mut models = cfg.build_models()?;
    for scale in 1..=models.len() {
        let report = train_scale(&mut models, scale, &scenes, &cfg.train)?;
        models[scale - 1].freeze();
        checkpoint::save(&models[scale - 1], &dir.join(format!("scale_{scale}.ckpt")))?;
        println!(
            "{}",
            serde_json::json!({
                "scale": scale,
                "final_loss": report.epoch_losses.last(),
                "epoch_losses": report.epoch_losses,
            })
        );
    }
    Ok(())
}

fn load_models(dir: &Path) -> Result<Vec<ScaleModel>> {
    let mut models = Vec::new();
    loop {
        let path = dir.join(format!("scale_{}.ckpt", models.len() + 1));
        if !path.exists() {
            break;
        }
        models.push(checkpoint::load(&path)?);
    }
    if models.is_empty() {
        return Err(Error::Empty(format!("no scale_1.ckpt in {}", dir.display())));
    }
    Ok(models)
}

/// Partition with the voxel sizes the models were trained for.
fn partition_config(cfg: &RunConfig, models: &[ScaleModel]) -> Result<PartitionConfig> {
    PartitionConfig::new(models.iter().map(|m| m.base_voxel).collect(), cfg.seed)
}

fn bench(
    cfg: &RunConfig,
    input: &Path,
    models_dir: Option<&Path>,
    search: Option<SearchStrategy>,
    threaded: bool,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(s) = search {
        cfg.backbone.search = s;
    }
    let mut models = match models_dir {
        Some(d) => load_models(d)?,
        None => cfg.build_models()?,
    };
    for m in &mut models {
        m.config.search = cfg.backbone.search;
    }
    let cloud = read_cloud(input)?;
    let parts = build_partitions(&cloud, &partition_config(&cfg, &models)?)?;
    let opts = PipelineOptions {
        schedule: if threaded { Schedule::Threaded } else { Schedule::Sequential },
        ..Default::default()
    };
    let scalable = run_pipeline(&models, &cloud, &parts, &opts)?;

    let finest = models.last().expect("at least one model").base_voxel;
    let baseline_model = ScaleModel::new(0, finest, cfg.backbone.clone(), cfg.k_fuse, false, cfg.seed)?;
    let baseline = run_baseline(&baseline_model, &cloud, &parts, models.len())?;
    let sizes: Vec<u64> = parts.sizes().iter().map(|&n| n as u64).collect();
    let estimate = estimate_gain(&sizes)?;

    let mut text = String::new();
    for r in &scalable.report.scales {
        let mut v = serde_json::to_value(r).expect("plain struct serializes");
        v["kind"] = "scalable".into();
        text += &(v.to_string() + "\n");
    }
    text += &(serde_json::json!({
        "kind": "baseline",
        "n_points": baseline.indices.len(),
        "n_encoded": baseline.n_encoded,
        "wall_ms": baseline.wall.as_nanos() as f64 / 1e6,
        "distance_evals": baseline.distance_evals,
    })
    .to_string()
        + "\n");
    text += &(serde_json::json!({
        "kind": "summary",
        "first_prediction_ms": scalable.report.first_prediction_ms,
        "total_ms": scalable.report.total_ms,
        "scalable_distance_evals": scalable.report.total_distance_evals(),
        "baseline_distance_evals": baseline.distance_evals,
        "measured_ratio": scalable.report.total_distance_evals() as f64 / baseline.distance_evals.max(1) as f64,
        "estimated_ratio": estimate.scalable_fraction(),
        "estimate": estimate,
    })
    .to_string()
        + "\n");
    emit(&text, out)
}
