use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use scenedistill_core::distill::gt_keypoints;
use scenedistill_core::geometry::{correspond_keypoints, distance_matrix, nearest_index, dist2};
use scenedistill_core::metrics::evaluate;
use scenedistill_core::net::load_checkpoint;
use scenedistill_core::synth::{generate_dataset, read_pointcloud, write_pointcloud, MANIFEST_FILE};
use scenedistill_core::trainer::{
    complete_scan, distill_stage, evaluate_models, parse_override, prepare_data, render_markdown, run_ablation,
    run_pipeline, save_distilled, save_teacher, train_stage, ABLATIONS,
};
use scenedistill_core::{ExperimentConfig, Method, Scene, SceneRole};

/// Few-step point-cloud scene completion.
#[derive(Debug, Parser)]
#[command(name = "scenedistill", version, arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML experiment config; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed for training, distillation, sampling and metrics.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Student sampling steps (replaces the configured list).
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for scoring.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config override, `dotted.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Print progress to standard error.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    GenData {
        /// Target directory (default: <out>/data).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Train the teacher on the training split.
    TrainTeacher,
    /// Distill a student from a trained teacher.
    Distill {
        /// Teacher checkpoint (default: <out>/teacher.ckpt).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Complete one scan file.
    Complete {
        /// Model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Input scan, one `x y z` point per line.
        #[arg(long)]
        scan: PathBuf,
        /// Where to write the completed scene.
        #[arg(long)]
        output: PathBuf,
        /// Ground truth; when given, a metric report is written next to the output.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Sample with the multistep chain instead of the few-step student sampler.
        #[arg(long)]
        teacher: bool,
    },
    /// Score a completion against ground truth, or every checkpoint in the
    /// output directory against the held-out split.
    Eval {
        #[arg(long, requires = "gt")]
        completion: Option<PathBuf>,
        #[arg(long, requires = "completion")]
        gt: Option<PathBuf>,
    },
    /// Run a distillation ablation.
    Ablate {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(ABLATIONS))]
        name: String,
    },
    /// Train, distill and evaluate end to end, printing the results table.
    Bench,
    /// Export CSV series for plotting from an evaluated output directory.
    ExportPlots {
        /// Held-out scene used for histograms and distance-matrix grids.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Histogram bin count.
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    verbose: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut overrides = g.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = g.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(steps) = g.steps {
        overrides.push(("sampler.student_steps".into(), format!("[{steps}]")));
    }
    if let Some(out) = &g.out {
        overrides.push(("out_dir".into(), toml::Value::from(out.display().to_string()).to_string()));
    }
    if let Some(threads) = g.threads {
        overrides.push(("threads".into(), threads.to_string()));
    }
    Ok(ExperimentConfig::load(g.config.as_deref(), &overrides)?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Core errors already embed their source, so drop repeats.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1).map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg = format!("{msg}: {cause}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx { cfg: load_config(&cli.global)?, verbose: cli.global.verbose > 0 };
    let out = ctx.cfg.out_dir.clone();
    match cli.command {
        Command::GenData { dir } => {
            let dir = dir.unwrap_or_else(|| out.join("data"));
            let d = &ctx.cfg.data;
            let manifest = generate_dataset(&dir, d.seed, d.train, d.held_out)?;
            println!("{} ({} scenes)", dir.join(MANIFEST_FILE).display(), manifest.scenes.len());
        }
        Command::TrainTeacher => {
            let data = prepare_data(&ctx.cfg.data)?;
            ctx.log(format!("training teacher on {} scenes", data.train.len()));
            let trained = train_stage(&ctx.cfg, &data)?;
            save_teacher(&trained, &out)?;
            println!("{}", out.join("teacher.ckpt").display());
        }
        Command::Distill { teacher } => {
            let path = teacher.unwrap_or_else(|| out.join("teacher.ckpt"));
            let teacher = load_checkpoint(&path)?;
            let data = prepare_data(&ctx.cfg.data)?;
            ctx.log(format!("distilling for {} iterations", ctx.cfg.distill.iterations));
            let outcome = distill_stage(&ctx.cfg, &teacher, &data)?;
            save_distilled(&outcome, &out)?;
            println!("{}", out.join("student.ckpt").display());
        }
        Command::Complete { model, scan, output, gt, teacher } => complete(&ctx, &model, &scan, &output, gt.as_deref(), teacher)?,
        Command::Eval { completion: Some(c), gt: Some(g) } => {
            let completion = read_pointcloud(&c, SceneRole::Completion)?;
            let gt = read_pointcloud(&g, SceneRole::GroundTruth)?;
            let report = evaluate(&completion, &gt, &ctx.cfg.seeded().metrics, 0.0)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Eval { .. } => {
            let teacher = load_checkpoint(&out.join("teacher.ckpt"))?;
            let student = load_checkpoint(&out.join("student.ckpt"))?;
            let data = prepare_data(&ctx.cfg.data)?;
            ctx.log(format!("evaluating on {} held-out scenes", data.held_out.len()));
            let rows = evaluate_models(&ctx.cfg, &teacher, &student, &data.held_out, &out)?;
            print!("{}", render_markdown(&rows, &ctx.cfg.metrics.iou_resolutions));
        }
        Command::Ablate { name } => {
            ctx.log(format!("ablation {name}"));
            let rows = run_ablation(&ctx.cfg, &name)?;
            print!("{}", render_markdown(&rows, &ctx.cfg.metrics.iou_resolutions));
        }
        Command::Bench => {
            ctx.log("running the full pipeline");
            let outcome = run_pipeline(&ctx.cfg)?;
            print!("{}", render_markdown(&outcome.rows, &ctx.cfg.metrics.iou_resolutions));
        }
        Command::ExportPlots { scene, bins } => export_plots(&ctx, scene, bins)?,
    }
    Ok(())
}

fn complete(ctx: &Ctx, model: &Path, scan: &Path, output: &Path, gt: Option<&Path>, teacher: bool) -> Result<()> {
    let cfg = ctx.cfg.seeded();
    let gt = gt.map(|p| read_pointcloud(p, SceneRole::GroundTruth)).transpose()?;
    let model = load_checkpoint(model)?;
    let scan = read_pointcloud(scan, SceneRole::Scan)?;
    let method = if teacher {
        Method::Teacher { steps: cfg.sampler.teacher_steps[0] }
    } else {
        Method::Student { steps: cfg.sampler.student_steps[0] }
    };
    ctx.log(format!("{} on {} scan points", method.name(), scan.len()));
    let start = Instant::now();
    let completion = complete_scan(&model, method, &scan, &cfg, cfg.seed)?;
    let secs = start.elapsed().as_secs_f64();
    write_pointcloud(&completion, output)?;
    println!("{}", output.display());
    if let Some(gt) = gt {
        let report = evaluate(&completion, &gt, &cfg.metrics, secs)?;
        let path = output.with_extension("report.json");
        fs::write(&path, serde_json::to_string_pretty(&report)?).with_context(|| path.display().to_string())?;
        println!("{}", path.display());
    }
    Ok(())
}

fn write_csv(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).with_context(|| path.display().to_string())
}

/// `cd_vs_time.csv` from the evaluated reports, plus per-method NN-distance
/// histograms and keypoint distance-matrix differences for one scene.
fn export_plots(ctx: &Ctx, scene: usize, bins: usize) -> Result<()> {
    if bins == 0 {
        bail!("--bins must be positive");
    }
    let cfg = ctx.cfg.seeded();
    let out = &cfg.out_dir;
    let dir = out.join("plots");
    fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;

    let reports_path = out.join("reports.jsonl");
    let text = fs::read_to_string(&reports_path).with_context(|| format!("{}: run eval or bench first", reports_path.display()))?;
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).with_context(|| reports_path.display().to_string())?;
        let method = v["method"].as_str().context("report without method")?.to_string();
        let point = (v["wall_time_s"].as_f64().unwrap_or(f64::NAN), v["cd"].as_f64().unwrap_or(f64::NAN));
        match series.iter_mut().find(|(m, _)| *m == method) {
            Some((_, pts)) => pts.push(point),
            None => series.push((method, vec![point])),
        }
    }
    let mut csv = String::from("method,time_mean_s,cd_mean,scenes\n");
    for (method, pts) in &series {
        let n = pts.len() as f64;
        let t = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let c = pts.iter().map(|p| p.1).sum::<f64>() / n;
        csv.push_str(&format!("{method},{t},{c},{}\n", pts.len()));
    }
    write_csv(&dir.join("cd_vs_time.csv"), csv)?;

    let data = prepare_data(&cfg.data)?;
    let Some(pair) = data.held_out.get(scene) else {
        bail!("scene {scene} out of range: {} held-out scenes", data.held_out.len());
    };
    let teacher = load_checkpoint(&out.join("teacher.ckpt"))?;
    let student = load_checkpoint(&out.join("student.ckpt"))?;
    let keys = gt_keypoints(&pair.gt, &cfg.distill, cfg.seed)?;
    let d_gt = distance_matrix(&pair.gt, &keys)?;
    let methods = [
        (Method::Teacher { steps: cfg.sampler.teacher_steps[0] }, &teacher),
        (Method::Student { steps: cfg.sampler.student_steps[0] }, &student),
    ];
    let mut completions: Vec<(String, Scene)> = Vec::new();
    for (method, model) in methods {
        ctx.log(format!("completing scene {scene} with {}", method.name()));
        completions.push((method.name(), complete_scan(model, method, &pair.scan, &cfg, cfg.seed)?));
    }

    let nn: Vec<Vec<f64>> = completions
        .iter()
        .map(|(_, c)| c.points().iter().map(|p| dist2(p, &pair.gt.points()[nearest_index(pair.gt.points(), p)]).sqrt()).collect())
        .collect();
    let top = nn.iter().flatten().fold(0.0f64, |a, &b| a.max(b)).max(f64::MIN_POSITIVE);
    let width = top / bins as f64;
    let mut csv = String::from("method,bin_lo,bin_hi,count\n");
    for ((method, _), dists) in completions.iter().zip(&nn) {
        let mut counts = vec![0usize; bins];
        for &d in dists {
            counts[((d / width) as usize).min(bins - 1)] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            csv.push_str(&format!("{method},{},{},{c}\n", b as f64 * width, (b + 1) as f64 * width));
        }
    }
    write_csv(&dir.join("nn_histogram.csv"), csv)?;

    for (method, completion) in &completions {
        let d = distance_matrix(completion, &correspond_keypoints(&pair.gt, &keys, completion))?;
        let n = d.size();
        let mut csv = String::new();
        for i in 0..n {
            let row: Vec<String> = (0..n).map(|j| (d.get(i, j) - d_gt.get(i, j)).to_string()).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        write_csv(&dir.join(format!("dmatrix_diff_{}.csv", method.replace('@', "_"))), csv)?;
    }
    println!("{}", dir.display());
    Ok(())
}
