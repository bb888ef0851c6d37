//! Experiment orchestration: configuration, the train → distill → evaluate
//! pipeline, ablations and benchmark tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{
    sample_fewstep, sample_multistep, train_teacher, SamplerConfig, ScenePair, TeacherConfig, TrainedTeacher,
};
use crate::distill::{distill, DistillConfig, DistillOutcome};
use crate::error::{Error, Result};
use crate::geometry::{KeypointMethod, Scene};
use crate::io_util::write_atomic;
use crate::metrics::{evaluate, MetricConfig, MetricReport};
use crate::net::{save_checkpoint, DenoiserModel};
use crate::schedule::NoiseSchedule;
use crate::synth::{dataset_specs, generate_pairs, DatasetManifest, Split};

pub const ENV_OUT: &str = "SCENEDISTILL_OUT";
pub const ENV_THREADS: &str = "SCENEDISTILL_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 50, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Where scenes come from: a manifest on disk, or generated in memory from
/// `seed` when `manifest` is unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub seed: u64,
    pub train: usize,
    pub held_out: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { manifest: None, seed: 7, train: 40, held_out: 20 }
    }
}

/// Step counts evaluated for each model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSettings {
    pub teacher_steps: Vec<usize>,
    pub student_steps: Vec<usize>,
    pub k_dup: usize,
    pub stochastic: bool,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self { teacher_steps: vec![50, 8], student_steps: vec![8, 4, 2, 1], k_dup: 10, stochastic: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Global seed. Copied into every stage by [`ExperimentConfig::seeded`].
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Cap on worker threads for metric evaluation.
    pub threads: usize,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub sampler: SamplerSettings,
    pub metrics: MetricConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            threads: 1,
            schedule: ScheduleConfig::default(),
            data: DataConfig::default(),
            teacher: TeacherConfig { epochs: 50, ..TeacherConfig::default() },
            distill: DistillConfig::default(),
            sampler: SamplerSettings::default(),
            metrics: MetricConfig::default(),
        }
    }
}

/// Sets `table.a.b = value` in a TOML document. `raw` is parsed as a TOML
/// value and falls back to a plain string.
pub fn set_path(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Parses one `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl ExperimentConfig {
    /// Reads `path` (defaults when `None`), then applies the environment
    /// overrides and `overrides` in order. Relative paths in the file are
    /// resolved against its directory.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let file_paths = (doc.contains_key("out_dir"), doc.get("data").and_then(|d| d.get("manifest")).is_some());
        if let Ok(v) = std::env::var(ENV_OUT) {
            doc.insert("out_dir".into(), toml::Value::String(v));
        }
        if let Ok(v) = std::env::var(ENV_THREADS) {
            set_path(&mut doc, "threads", &v)?;
        }
        for (k, v) in overrides {
            set_path(&mut doc, k, v)?;
        }
        let mut cfg: Self = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(base) = path.and_then(Path::parent) {
            if file_paths.0 && cfg.out_dir.is_relative() {
                cfg.out_dir = base.join(&cfg.out_dir);
            }
            if let (true, Some(m)) = (file_paths.1, cfg.data.manifest.as_mut()) {
                if m.is_relative() {
                    *m = base.join(&*m);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let total = self.schedule.steps;
        self.schedule.build()?;
        self.teacher.architecture.validate()?;
        self.distill.validate(total)?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.sampler.teacher_steps.is_empty() || self.sampler.student_steps.is_empty() {
            return Err(Error::Config("step lists must be non-empty".into()));
        }
        for &s in self.sampler.teacher_steps.iter().chain(&self.sampler.student_steps) {
            SamplerConfig::evenly_spaced(total, s, self.sampler.k_dup)?;
        }
        match &self.data.manifest {
            Some(m) if !m.exists() => {
                return Err(Error::Config(format!("manifest {} does not exist", m.display())));
            }
            None if self.data.train == 0 || self.data.held_out == 0 => {
                return Err(Error::Config("generated data needs train and held-out scenes".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Copy with the global seed written into each stage.
    pub fn seeded(&self) -> Self {
        let mut cfg = self.clone();
        cfg.teacher.seed = cfg.seed;
        cfg.distill.seed = cfg.seed;
        cfg.metrics.seed = cfg.seed;
        cfg
    }

    /// First 12 hex digits of the SHA-256 of the seeded config as JSON.
    /// Output location and thread count do not enter the hash.
    pub fn hash(&self) -> String {
        let mut cfg = self.seeded();
        cfg.out_dir = PathBuf::new();
        cfg.threads = 1;
        let json = serde_json::to_string(&cfg).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..12].to_string()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Train and held-out scenes.
#[derive(Debug, Clone)]
pub struct Data {
    pub train: Vec<ScenePair>,
    pub held_out: Vec<ScenePair>,
}

pub fn prepare_data(cfg: &DataConfig) -> Result<Data> {
    if let Some(path) = &cfg.manifest {
        let manifest = DatasetManifest::load(path)?;
        let root = path.parent().unwrap_or(Path::new("."));
        return Ok(Data {
            train: manifest.load_split(root, Split::Train)?,
            held_out: manifest.load_split(root, Split::HeldOut)?,
        });
    }
    let (mut train, mut held_out) = (Vec::new(), Vec::new());
    for (split, pair) in generate_pairs(&dataset_specs(cfg.seed, cfg.train, cfg.held_out))? {
        match split {
            Split::Train => train.push(pair),
            Split::HeldOut => held_out.push(pair),
        }
    }
    Ok(Data { train, held_out })
}

pub fn train_stage(cfg: &ExperimentConfig, data: &Data) -> Result<TrainedTeacher> {
    let cfg = cfg.seeded();
    train_teacher(&data.train, &cfg.schedule.build()?, &cfg.teacher)
}

pub fn distill_stage(cfg: &ExperimentConfig, teacher: &DenoiserModel, data: &Data) -> Result<DistillOutcome> {
    let cfg = cfg.seeded();
    distill(teacher, &data.train, &cfg.schedule.build()?, &cfg.distill)
}

/// A model and the sampler it is evaluated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Reverse chain over an evenly spaced subsequence.
    Teacher { steps: usize },
    /// Few-step student generation.
    Student { steps: usize },
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Teacher { steps } => format!("teacher@{steps}"),
            Method::Student { steps } => format!("student@{steps}"),
        }
    }

    pub fn steps(&self) -> usize {
        match *self {
            Method::Teacher { steps } | Method::Student { steps } => steps,
        }
    }
}

/// Sampling seed of held-out scene `index`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x0100_0000_01b3).wrapping_add(index as u64)
}

/// Completes one scan with `method`.
pub fn complete_scan(model: &DenoiserModel, method: Method, scan: &Scene, cfg: &ExperimentConfig, seed: u64) -> Result<Scene> {
    let sched = cfg.schedule.build()?;
    let mut sampler = SamplerConfig::evenly_spaced(sched.steps(), method.steps(), cfg.sampler.k_dup)?;
    match method {
        Method::Teacher { .. } => {
            sampler.stochastic = cfg.sampler.stochastic;
            sample_multistep(model, scan, &sched, &sampler, seed)
        }
        Method::Student { .. } => sample_fewstep(model, scan, &sched, &sampler, seed, cfg.distill.inversion),
    }
}

/// Completes every held-out scene one at a time, timing each completion,
/// then scores them. Scoring runs on up to `cfg.threads` threads; the
/// reports keep scene order.
pub fn evaluate_method(model: &DenoiserModel, method: Method, scenes: &[ScenePair], cfg: &ExperimentConfig) -> Result<Vec<MetricReport>> {
    let cfg = cfg.seeded();
    let mut done = Vec::with_capacity(scenes.len());
    for (i, pair) in scenes.iter().enumerate() {
        let start = Instant::now();
        let completion = complete_scan(model, method, &pair.scan, &cfg, scene_seed(cfg.seed, i))?;
        done.push((completion, start.elapsed().as_secs_f64()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        done.par_iter()
            .zip(scenes)
            .map(|((c, secs), pair)| evaluate(c, &pair.gt, &cfg.metrics, *secs))
            .collect()
    })
}

/// Mean metrics of one method over the held-out scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub cd: f64,
    pub jsd: f64,
    pub emd: f64,
    /// Mean IoU per resolution, in config order.
    pub iou: Vec<f64>,
    pub time_mean_s: f64,
    pub time_median_s: f64,
    pub config_hash: String,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

impl TableRow {
    pub fn summarize(method: impl Into<String>, reports: &[MetricReport], config_hash: &str) -> Self {
        let n = reports.len().max(1) as f64;
        let mean = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let resolutions = reports.first().map_or(0, |r| r.iou.len());
        let times: Vec<f64> = reports.iter().map(|r| r.wall_time_s).collect();
        Self {
            method: method.into(),
            cd: mean(&|r| r.cd),
            jsd: mean(&|r| r.jsd),
            emd: mean(&|r| r.emd),
            iou: (0..resolutions).map(|k| mean(&|r| r.iou[k].iou)).collect(),
            time_mean_s: mean(&|r| r.wall_time_s),
            time_median_s: median(&times),
            config_hash: config_hash.to_string(),
        }
    }
}

/// CSV and Markdown renderings of a table. The time columns are measured
/// and so differ between runs; every other column is deterministic.
pub fn render_csv(rows: &[TableRow], resolutions: &[f64]) -> String {
    let mut s = String::from("method,cd,jsd,emd");
    for r in resolutions {
        let _ = write!(s, ",iou@{r}");
    }
    s.push_str(",time_mean_s,time_median_s,config_hash\n");
    for row in rows {
        let _ = write!(s, "{},{:.6e},{:.6e},{:.6e}", row.method, row.cd, row.jsd, row.emd);
        for v in &row.iou {
            let _ = write!(s, ",{v:.6}");
        }
        let _ = writeln!(s, ",{:.4},{:.4},{}", row.time_mean_s, row.time_median_s, row.config_hash);
    }
    s
}

pub fn render_markdown(rows: &[TableRow], resolutions: &[f64]) -> String {
    let mut s = String::from("| method | CD | JSD | EMD |");
    for r in resolutions {
        let _ = write!(s, " IoU@{r} |");
    }
    s.push_str(" time (s) | config |\n|---|---|---|---|");
    s.push_str(&"---|".repeat(resolutions.len()));
    s.push_str("---|---|\n");
    for row in rows {
        let _ = write!(s, "| {} | {:.4} | {:.4} | {:.4} |", row.method, row.cd, row.jsd, row.emd);
        for v in &row.iou {
            let _ = write!(s, " {v:.3} |");
        }
        let _ = writeln!(s, " {:.3} | {} |", row.time_mean_s, row.config_hash);
    }
    s
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(&item).map_err(|e| Error::Config(e.to_string()))?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

#[derive(Serialize)]
struct ReportLine<'a> {
    method: &'a str,
    scene: usize,
    config_hash: &'a str,
    #[serde(flatten)]
    report: &'a MetricReport,
}

fn write_tables(dir: &Path, rows: &[TableRow], reports: &[(String, Vec<MetricReport>)], cfg: &ExperimentConfig, hash: &str) -> Result<()> {
    let lines = reports.iter().flat_map(|(method, rs)| {
        rs.iter().enumerate().map(move |(scene, report)| ReportLine { method, scene, config_hash: hash, report })
    });
    write_jsonl(&dir.join("reports.jsonl"), lines)?;
    let res = &cfg.metrics.iou_resolutions;
    write_atomic(&dir.join("table.csv"), render_csv(rows, res).as_bytes())?;
    write_atomic(&dir.join("table.md"), render_markdown(rows, res).as_bytes())
}

/// Writes `teacher.ckpt` and `teacher_history.jsonl` into `dir`.
pub fn save_teacher(teacher: &TrainedTeacher, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&teacher.model, &dir.join("teacher.ckpt"))?;
    write_jsonl(
        &dir.join("teacher_history.jsonl"),
        teacher.epoch_losses.iter().enumerate().map(|(epoch, loss)| serde_json::json!({ "epoch": epoch, "loss": loss })),
    )
}

/// Writes `student.ckpt`, `aux.ckpt` and `distill_history.jsonl` into `dir`.
pub fn save_distilled(outcome: &DistillOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(&outcome.student, &dir.join("student.ckpt"))?;
    save_checkpoint(&outcome.aux, &dir.join("aux.ckpt"))?;
    write_jsonl(&dir.join("distill_history.jsonl"), &outcome.history)
}

/// Evaluates the teacher at every configured teacher step count and the
/// student at every student step count, writing `reports.jsonl`,
/// `table.csv` and `table.md` into `dir`.
pub fn evaluate_models(
    cfg: &ExperimentConfig,
    teacher: &DenoiserModel,
    student: &DenoiserModel,
    held_out: &[ScenePair],
    dir: &Path,
) -> Result<Vec<TableRow>> {
    let cfg = cfg.seeded();
    let hash = cfg.hash();
    let methods = cfg
        .sampler
        .teacher_steps
        .iter()
        .map(|&steps| Method::Teacher { steps })
        .chain(cfg.sampler.student_steps.iter().map(|&steps| Method::Student { steps }));
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for method in methods {
        let model = match method {
            Method::Teacher { .. } => teacher,
            Method::Student { .. } => student,
        };
        let rs = evaluate_method(model, method, held_out, &cfg)?;
        rows.push(TableRow::summarize(method.name(), &rs, &hash));
        reports.push((method.name(), rs));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_tables(dir, &rows, &reports, &cfg, &hash)?;
    Ok(rows)
}

/// Everything [`run_pipeline`] produced.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub dir: PathBuf,
    pub config_hash: String,
    pub teacher: DenoiserModel,
    pub student: DenoiserModel,
    pub rows: Vec<TableRow>,
}

/// Trains the teacher, distills the student and evaluates every configured
/// step count on the held-out scenes. Artifacts are written as each stage
/// finishes, so a failure leaves the earlier ones in place.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let cfg = cfg.seeded();
    let hash = cfg.hash();
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;

    let data = prepare_data(&cfg.data)?;
    let teacher = train_stage(&cfg, &data)?;
    save_teacher(&teacher, &dir)?;
    let outcome = distill_stage(&cfg, &teacher.model, &data)?;
    save_distilled(&outcome, &dir)?;

    let rows = evaluate_models(&cfg, &teacher.model, &outcome.student, &data.held_out, &dir)?;
    Ok(PipelineOutcome { dir, config_hash: hash, teacher: teacher.model, student: outcome.student, rows })
}

pub const ABLATIONS: [&str; 6] = ["no-structural", "no-scene", "no-point", "weights", "keypoint-count", "selection-method"];

/// Named distillation configs compared by an ablation. Each is a delta on
/// `base`; the first row of the paired ablations is `base` itself.
pub fn ablation_variants(name: &str, base: &DistillConfig) -> Result<Vec<(String, DistillConfig)>> {
    let with = |f: &dyn Fn(&mut DistillConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let default = ("default".to_string(), base.clone());
    Ok(match name {
        "no-structural" => vec![
            default,
            (
                name.into(),
                with(&|c| {
                    c.lambda_scene = 0.0;
                    c.lambda_point = 0.0;
                }),
            ),
        ],
        "no-scene" => vec![default, (name.into(), with(&|c| c.lambda_scene = 0.0))],
        "no-point" => vec![default, (name.into(), with(&|c| c.lambda_point = 0.0))],
        "weights" => [(0.5, 0.01), (0.1, 0.01), (1.0, 0.01), (0.5, 0.1)]
            .into_iter()
            .map(|(s, p)| {
                (
                    format!("scene={s},point={p}"),
                    with(&|c| {
                        c.lambda_scene = s;
                        c.lambda_point = p;
                    }),
                )
            })
            .collect(),
        "keypoint-count" => [20.0, 30.0, 60.0, 70.0]
            .into_iter()
            .map(|d| (format!("1/{d}"), with(&|c| c.keypoint_fraction = 1.0 / d)))
            .collect(),
        "selection-method" => [KeypointMethod::Curvature, KeypointMethod::Random, KeypointMethod::Farthest]
            .into_iter()
            .map(|m| (format!("{m:?}").to_lowercase(), with(&|c| c.keypoint_method = m)))
            .collect(),
        other => {
            return Err(Error::invalid(format!(
                "unknown ablation {other:?}; expected one of {}",
                ABLATIONS.join(", ")
            )))
        }
    })
}

/// Distills and evaluates each variant of `name` against one shared
/// teacher. Rows are the student at the first configured step count.
pub fn run_ablation(cfg: &ExperimentConfig, name: &str) -> Result<Vec<TableRow>> {
    let variants = ablation_variants(name, &cfg.distill)?;
    cfg.validate()?;
    let cfg = cfg.seeded();
    let dir = cfg.out_dir.join(format!("ablation-{name}"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let data = prepare_data(&cfg.data)?;
    let teacher = train_stage(&cfg, &data)?;
    let steps = cfg.sampler.student_steps[0];
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (label, distill_cfg) in variants {
        let variant = ExperimentConfig { distill: distill_cfg, ..cfg.clone() };
        let hash = variant.hash();
        let outcome = distill_stage(&variant, &teacher.model, &data)?;
        let rs = evaluate_method(&outcome.student, Method::Student { steps }, &data.held_out, &variant)?;
        let method = format!("{label} student@{steps}");
        rows.push(TableRow::summarize(&method, &rs, &hash));
        reports.push((method, rs));
    }
    write_tables(&dir, &rows, &reports, &cfg, &cfg.hash())?;
    Ok(rows)
}
