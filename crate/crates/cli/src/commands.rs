//! Subcommand implementations. Each takes fully resolved settings and
//! explicit paths so the smoke pipeline can chain them in-process.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use scenediff::dataset::{build_dataset, Dataset, TaskMix};
use scenediff::decode::{decode_ar, decode_diffusion, DecoderSettings, RemaskStrategy};
use scenediff::diffusion::{train, Budget, LossNorm, Stage, TrainConfig, TrainOutputs};
use scenediff::eval::{evaluate, run_ablation, AblationKind, AblationSettings, Decoder, MetricsReport};
use scenediff::net::{load_checkpoint, project, Params};
use scenediff::recipe::ModelShape;
use scenediff::scenegen::{render_features, GenSpec, Task};

use crate::config::{write_json, OutLock, RunManifest};
use crate::viz;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataSettings {
    pub seed: u64,
    pub size: usize,
    pub coord_bins: u32,
    /// A task tag, or "mixed" for the task mix below.
    pub task: String,
    pub task_mix: TaskMix,
    pub spec: GenSpec,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 1000,
            coord_bins: 100,
            task: "mixed".into(),
            task_mix: TaskMix::default(),
            spec: GenSpec::default(),
        }
    }
}

fn parse_task(s: &str) -> Result<Task, CliError> {
    Task::parse(s)
        .ok_or_else(|| CliError::Usage(format!("unknown task `{s}` (expected caption, detect, ground or classify)")))
}

pub fn gen_data(s: &GenDataSettings, out: &Path) -> Result<Dataset, CliError> {
    let mix = if s.task == "mixed" { s.task_mix.clone() } else { TaskMix::only(parse_task(&s.task)?) };
    let _lock = OutLock::acquire(out)?;
    let ds = build_dataset(&s.spec, s.seed, s.size, &mix, s.coord_bins, out, true)
        .with_context(|| format!("generating dataset in {}", out.display()))?;
    // The dataset manifest doubles as the run manifest: the run record is
    // stored under its own key, which the dataset loader ignores.
    let run = {
        let mut m = RunManifest::new("gen-data", s)?;
        for f in ["instances.bin", "vocab.tsv"] {
            let p = out.join(f);
            m.outputs.insert(f.into(), crate::config::sha256_file(&p).map_err(|e| CliError::io(&p, e))?);
        }
        m
    };
    let path = out.join("manifest.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?)
            .map_err(|e| anyhow!(e))?;
    v["run"] = serde_json::to_value(run).map_err(|e| anyhow!(e))?;
    write_json(&path, &v)?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub seed: u64,
    pub steps: Option<usize>,
    pub epochs: Option<usize>,
    /// Peak learning rate; the stage default when unset.
    pub lr: Option<f64>,
    pub batch_size: usize,
    pub warmup_frac: f64,
    pub loss_norm: LossNorm,
    pub checkpoint_every: usize,
    /// Shape of a freshly initialized model (ignored when `--model` is given).
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

pub const DEFAULT_STEPS: usize = 1000;

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: None,
            epochs: None,
            lr: None,
            batch_size: 32,
            warmup_frac: 0.03,
            loss_norm: LossNorm::MaskedMean,
            checkpoint_every: 0,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
        }
    }
}

impl TrainSettings {
    fn config(&self, stage: Stage) -> Result<TrainConfig, CliError> {
        let budget = match (self.steps, self.epochs) {
            (Some(_), Some(_)) => {
                return Err(CliError::Usage("settings `steps` and `epochs` conflict; give only one".into()))
            }
            (Some(n), None) => Budget::Steps(n),
            (None, Some(e)) => Budget::Epochs(e),
            (None, None) => Budget::Steps(DEFAULT_STEPS),
        };
        let mut c = TrainConfig::new(stage, budget, self.seed);
        c.peak_lr = self.lr.unwrap_or(stage.default_lr());
        c.batch_size = self.batch_size;
        c.warmup_frac = self.warmup_frac;
        c.loss_norm = self.loss_norm;
        c.checkpoint_every = self.checkpoint_every;
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display())).map_err(CliError::Runtime)
}

pub fn load_model(path: &Path) -> Result<Params<f32>, CliError> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display())).map_err(CliError::Runtime)
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";

pub fn train_stage(
    stage: Stage,
    s: &TrainSettings,
    data: &Path,
    model: Option<&Path>,
    out: &Path,
) -> Result<Params<f32>, CliError> {
    let cfg = s.config(stage)?;
    let ds = load_dataset(data)?;
    let params = match model {
        Some(p) => load_model(p)?,
        None if matches!(stage, Stage::Align | Stage::Full) => {
            return Err(CliError::Usage(format!("{} needs --model from the previous stage", stage_command(stage))))
        }
        None => {
            let mode = stage.attention_mode();
            Params::init(
                &ModelShape { d_model: s.d_model, n_layers: s.n_layers, n_heads: s.n_heads }.config(&ds, mode),
                s.seed,
            )
            .map_err(|e| CliError::Usage(e.to_string()))?
        }
    };
    if params.config.attention_mode != stage.attention_mode() {
        return Err(CliError::Runtime(anyhow!(
            "checkpoint uses {:?} attention but stage {stage} needs {:?}",
            params.config.attention_mode,
            stage.attention_mode()
        )));
    }
    let _lock = OutLock::acquire(out)?;
    let log = out.join(LOG_FILE);
    if log.exists() {
        fs::remove_file(&log).map_err(|e| CliError::io(&log, e))?;
    }
    let ckpt_dir = out.join("checkpoints");
    let result =
        train(&cfg, &ds, params, &TrainOutputs { log_path: Some(log), checkpoint_dir: Some(ckpt_dir.clone()) })
            .with_context(|| format!("stage {stage}"))?;
    let final_ckpt = ckpt_dir.join("final.ckpt");
    fs::rename(&final_ckpt, out.join(MODEL_FILE)).map_err(|e| CliError::io(&final_ckpt, e))?;
    let mut m = RunManifest::new(stage_command(stage), &cfg)?;
    m.input(data)?;
    if let Some(p) = model {
        m.input(p)?;
    }
    m.write(out, &[MODEL_FILE, LOG_FILE])?;
    Ok(result.params)
}

pub fn stage_command(stage: Stage) -> &'static str {
    match stage {
        Stage::TextPretrain => "pretrain",
        Stage::Align => "align",
        Stage::Full => "finetune",
        Stage::ArBaseline => "train-ar",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyName {
    LowConfidence,
    Random,
}

impl StrategyName {
    pub fn with_seed(self, seed: u64) -> RemaskStrategy {
        match self {
            StrategyName::LowConfidence => RemaskStrategy::LowConfidence,
            StrategyName::Random => RemaskStrategy::Random { seed },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Paradigm {
    Diffusion,
    Ar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSettings {
    pub seed: u64,
    pub timesteps: usize,
    pub strategy: StrategyName,
    pub paradigm: Paradigm,
    /// Generated length; the task's template length when unset.
    pub gen_len: Option<usize>,
    /// Restrict to instances of this task.
    pub task: Option<String>,
    /// First instance (after task filtering) and how many to decode.
    pub index: usize,
    pub count: usize,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            timesteps: 8,
            strategy: StrategyName::LowConfidence,
            paradigm: Paradigm::Diffusion,
            gen_len: None,
            task: None,
            index: 0,
            count: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodedRecord {
    pub index: usize,
    pub task: Task,
    pub output_ids: Vec<u32>,
    pub text: String,
    pub target: String,
}

fn task_filter(ds: &Dataset, task: Option<&str>) -> Result<Dataset, CliError> {
    Ok(match task {
        Some(t) => {
            let t = parse_task(t)?;
            ds.filtered(|i| i.task == t)
        }
        None => ds.clone(),
    })
}

pub fn decode_cmd(s: &DecodeSettings, model: &Path, data: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let params = load_model(model)?;
    let ds = task_filter(&load_dataset(data)?, s.task.as_deref())?;
    let end = s.index.checked_add(s.count).filter(|&e| e <= ds.instances.len()).ok_or_else(|| {
        CliError::Runtime(anyhow!(
            "instances {}..{} requested but only {} are available",
            s.index,
            s.index.saturating_add(s.count),
            ds.instances.len()
        ))
    })?;
    let _lock = OutLock::acquire(out)?;
    let mut records = Vec::new();
    let mut outputs = Vec::new();
    for (i, inst) in ds.instances[s.index..end].iter().enumerate().map(|(j, x)| (s.index + j, x)) {
        let grid = render_features(&inst.scene, ds.spec(), params.config.d_v).map_err(|e| anyhow!(e))?;
        let cv = project(&params, &grid).map_err(|e| anyhow!(e))?;
        let len = s.gen_len.unwrap_or(inst.task.target_len());
        let ids = match s.paradigm {
            Paradigm::Diffusion => {
                let strategy = s.strategy.with_seed(s.seed);
                let (ids, trace) = decode_diffusion(&params, Some(&cv), &inst.prompt_ids, len, s.timesteps, strategy)
                    .with_context(|| format!("decoding instance {i}"))?;
                let name = format!("trace_{i:05}.json");
                let json = trace.with_surfaces(&ds.vocab).to_json().map_err(|e| anyhow!(e))?;
                let p = out.join(&name);
                fs::write(&p, json + "\n").map_err(|e| CliError::io(&p, e))?;
                outputs.push(name);
                ids
            }
            Paradigm::Ar => decode_ar(&params, Some(&cv), &inst.prompt_ids, len)
                .with_context(|| format!("decoding instance {i}"))?,
        };
        records.push(DecodedRecord {
            index: i,
            task: inst.task,
            text: ds.vocab.decode_text(&ids).unwrap_or_default(),
            target: ds.vocab.decode_text(&inst.target_ids).unwrap_or_default(),
            output_ids: ids,
        });
    }
    let p = out.join("decoded.jsonl");
    let mut f = fs::File::create(&p).map_err(|e| CliError::io(&p, e))?;
    for r in &records {
        writeln!(f, "{}", serde_json::to_string(r).map_err(|e| anyhow!(e))?).map_err(|e| CliError::io(&p, e))?;
    }
    outputs.push("decoded.jsonl".into());
    let mut m = RunManifest::new("decode", s)?;
    m.input(model)?;
    m.input(data)?;
    let names: Vec<&str> = outputs.iter().map(String::as_str).collect();
    m.write(out, &names)?;
    Ok(outputs.iter().map(|n| out.join(n)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub seed: u64,
    pub timesteps: usize,
    pub strategy: StrategyName,
    pub paradigm: Paradigm,
    pub task: Option<String>,
    /// Evaluate only the first `limit` instances.
    pub limit: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            timesteps: 8,
            strategy: StrategyName::LowConfidence,
            paradigm: Paradigm::Diffusion,
            task: None,
            limit: None,
        }
    }
}

pub fn eval_cmd(s: &EvalSettings, model: &Path, data: &Path, out: &Path) -> Result<MetricsReport, CliError> {
    let params = load_model(model)?;
    let mut ds = task_filter(&load_dataset(data)?, s.task.as_deref())?;
    if let Some(n) = s.limit {
        ds.instances.truncate(n);
        ds = ds.filtered(|_| true);
    }
    let decoder = match s.paradigm {
        Paradigm::Diffusion => {
            Decoder::Diffusion(DecoderSettings { timesteps: s.timesteps, strategy: s.strategy.with_seed(s.seed) })
        }
        Paradigm::Ar => Decoder::Autoregressive,
    };
    let _lock = OutLock::acquire(out)?;
    let report = evaluate(&params, &ds, decoder).context("evaluation")?;
    write_json(&out.join("report.json"), &report)?;
    let p = out.join("report.csv");
    fs::write(&p, report.to_csv()).map_err(|e| CliError::io(&p, e))?;
    let mut m = RunManifest::new("eval", s)?;
    m.input(model)?;
    m.input(data)?;
    m.write(out, &["report.json", "report.csv"])?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSettings {
    pub seed: u64,
    pub kind: Option<AblationKind>,
    pub timesteps: usize,
    pub timestep_grid: Vec<usize>,
    pub random_runs: usize,
    pub min_objects: usize,
}

impl Default for AblateSettings {
    fn default() -> Self {
        let a = AblationSettings::default();
        Self {
            seed: a.seed,
            kind: None,
            timesteps: a.timesteps,
            timestep_grid: a.timestep_grid,
            random_runs: a.random_runs,
            min_objects: a.min_objects,
        }
    }
}

pub fn ablate_cmd(
    s: &AblateSettings,
    model: &Path,
    ar_model: Option<&Path>,
    data: &Path,
    out: &Path,
) -> Result<String, CliError> {
    let kind = s.kind.ok_or_else(|| CliError::Usage("--kind is required".into()))?;
    if kind == AblationKind::Paradigm && ar_model.is_none() {
        return Err(CliError::Usage("--kind paradigm needs --ar-model".into()));
    }
    let params = load_model(model)?;
    let ar = ar_model.map(load_model).transpose()?;
    let ds = load_dataset(data)?;
    let settings = AblationSettings {
        timesteps: s.timesteps,
        timestep_grid: s.timestep_grid.clone(),
        random_runs: s.random_runs,
        seed: s.seed,
        min_objects: s.min_objects,
    };
    let _lock = OutLock::acquire(out)?;
    let table = run_ablation(kind, Some(&params), ar.as_ref(), &ds, &settings).context("ablation")?;
    let name = format!("ablation_{}.csv", kind.name());
    let p = out.join(&name);
    fs::write(&p, table.to_csv()).map_err(|e| CliError::io(&p, e))?;
    let mut m = RunManifest::new("ablate", s)?;
    m.input(model)?;
    if let Some(a) = ar_model {
        m.input(a)?;
    }
    m.input(data)?;
    m.write(out, &[&name])?;
    Ok(table.to_text())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VizMode {
    Ansi,
    Svg,
}

/// Renders a trace. With `out`, SVG goes to `<out>/trace.svg` (plus a
/// manifest); otherwise the rendering is returned for standard output.
pub fn trace_viz_cmd(trace: &Path, mode: VizMode, out: Option<&Path>) -> Result<Option<String>, CliError> {
    let t = viz::load_trace(trace)?;
    let text = match mode {
        VizMode::Ansi => viz::render_ansi(&t),
        VizMode::Svg => viz::render_svg(&t),
    };
    match (mode, out) {
        (VizMode::Svg, Some(out)) => {
            let _lock = OutLock::acquire(out)?;
            let p = out.join("trace.svg");
            fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
            let mut m = RunManifest::new("trace-viz", &serde_json::json!({ "mode": "svg" }))?;
            m.input(trace)?;
            m.write(out, &["trace.svg"])?;
            Ok(None)
        }
        _ => Ok(Some(text)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmokeSettings {
    pub seed: u64,
    pub size: usize,
    pub steps: usize,
    pub timesteps: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub batch_size: usize,
}

impl Default for SmokeSettings {
    fn default() -> Self {
        Self { seed: 0, size: 200, steps: 100, timesteps: 4, d_model: 32, n_layers: 2, n_heads: 2, batch_size: 16 }
    }
}

/// Runs every stage at miniature scale under `out`. Errors name the stage.
pub fn smoke(s: &SmokeSettings, out: &Path) -> Result<MetricsReport, CliError> {
    let stage_err = |name: &'static str| move |e: CliError| e.in_stage(name);
    let _lock = OutLock::acquire(out).map_err(stage_err("setup"))?;
    let data = out.join("data");
    let g = GenDataSettings { seed: s.seed, size: s.size, ..GenDataSettings::default() };
    gen_data(&g, &data).map_err(stage_err("gen-data"))?;
    let t = TrainSettings {
        seed: s.seed,
        steps: Some(s.steps),
        batch_size: s.batch_size,
        d_model: s.d_model,
        n_layers: s.n_layers,
        n_heads: s.n_heads,
        ..TrainSettings::default()
    };
    let lr_full = TrainSettings { lr: Some(1e-3), ..t.clone() };
    train_stage(Stage::TextPretrain, &t, &data, None, &out.join("pretrain")).map_err(stage_err("pretrain"))?;
    let m = |d: &str| out.join(d).join(MODEL_FILE);
    train_stage(Stage::Align, &t, &data, Some(&m("pretrain")), &out.join("align")).map_err(stage_err("align"))?;
    train_stage(Stage::Full, &lr_full, &data, Some(&m("align")), &out.join("finetune"))
        .map_err(stage_err("finetune"))?;
    train_stage(Stage::ArBaseline, &t, &data, None, &out.join("train-ar")).map_err(stage_err("train-ar"))?;
    let d = DecodeSettings { seed: s.seed, timesteps: s.timesteps, task: Some("caption".into()), ..Default::default() };
    let traces = decode_cmd(&d, &m("finetune"), &data, &out.join("decode")).map_err(stage_err("decode"))?;
    trace_viz_cmd(&traces[0], VizMode::Svg, Some(&out.join("trace-viz"))).map_err(stage_err("trace-viz"))?;
    let e = EvalSettings { seed: s.seed, timesteps: s.timesteps, ..Default::default() };
    let report = eval_cmd(&e, &m("finetune"), &data, &out.join("eval")).map_err(stage_err("eval"))?;
    let ar = EvalSettings { paradigm: Paradigm::Ar, ..e };
    let ar_report = eval_cmd(&ar, &m("train-ar"), &data, &out.join("eval-ar")).map_err(stage_err("eval-ar"))?;
    for r in [&report, &ar_report] {
        if !r.all_in_range() {
            return Err(CliError::Runtime(anyhow!("stage eval: metric outside [0, 1]")));
        }
    }
    let mut mf = RunManifest::new("smoke", s)?;
    mf.input(&data)?;
    mf.write(out, &["eval/report.json", "eval-ar/report.json"])?;
    Ok(report)
}
