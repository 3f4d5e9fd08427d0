//! Experiment orchestration: config files, run directories, and the
//! generate / train / eval pipelines with their reports.
//!
//! Configuration lives in a flat TOML file of dotted keys, e.g.
//! `generator.grid_height = 32`; every key is optional and falls back to
//! the built-in default. Command-line `--set key=value` overrides are
//! applied on top, so flags win over the file. All artifacts of one run
//! land in a directory named by timestamp and seed.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::baselines::{baseline_pairwise_cluster, baseline_pp, pairwise_predictions};
use crate::metrics::{
    evaluate_with, group_ap_with, pr_curve, ApRow, ApTable, EvalRecord, Interpolation,
    MetricsError, ThresholdGrid,
};
use crate::model::{init_full, ModelConfig, ModelError, Network};
use crate::params::{ParamError, ParamStore};
use crate::pipeline::{
    read_predictions, write_predictions, PredictedGroup, ScenePredictionRecord,
};
use crate::plot::{self, PlotError};
use crate::scene::{
    generate_dataset, read_dataset, summarize, write_dataset, DatasetSummary, GeneratorConfig,
    Scene, SceneError,
};
use crate::training::{train_loop, LossBreakdown, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExpError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Plot(#[from] PlotError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    #[serde(with = "crate::metrics::inf_f64::vec")]
    pub dist_thresholds: Vec<f64>,
    /// Membership threshold for emitting a group at inference.
    pub tau: f64,
    /// Link distance of the peak-proximity baseline.
    pub pp_dist_threshold: f64,
    /// Edge threshold of the pairwise clustering baseline.
    pub edge_threshold: f64,
    /// Use 11-point interpolation instead of the precision envelope.
    pub eleven_point: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: vec![0.5, 1.0],
            dist_thresholds: vec![0.05, 0.1, f64::INFINITY],
            tau: 0.5,
            pp_dist_threshold: 0.1,
            edge_threshold: 0.5,
            eleven_point: false,
        }
    }
}

impl EvalConfig {
    pub fn grid(&self) -> ThresholdGrid {
        ThresholdGrid {
            iou_thresholds: self.iou_thresholds.clone(),
            dist_thresholds: self.dist_thresholds.clone(),
        }
    }

    pub fn interpolation(&self) -> Interpolation {
        if self.eleven_point {
            Interpolation::ElevenPoint
        } else {
            Interpolation::AllPoint
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: Option<String>,
    pub checkpoint: Option<String>,
    pub out_dir: Option<String>,
}

impl PathsConfig {
    pub fn out_dir(&self) -> &str {
        self.out_dir.as_deref().unwrap_or("runs")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Controls parameter initialization and the training trajectory.
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExpError> {
        self.generator
            .validate()
            .map_err(|e| ExpError::Config(e.to_string()))?;
        self.model
            .validate()
            .map_err(|e| ExpError::Config(e.to_string()))?;
        self.eval
            .grid()
            .validate()
            .map_err(|e| ExpError::Config(e.to_string()))?;
        if self.generator.grid_height != self.model.heatmap_height
            || self.generator.grid_width != self.model.heatmap_width
        {
            return Err(ExpError::Config(format!(
                "generator grid {}x{} does not match model heatmap {}x{}",
                self.generator.grid_height,
                self.generator.grid_width,
                self.model.heatmap_height,
                self.model.heatmap_width
            )));
        }
        if self.generator.grid_channels != self.model.grid_channels
            || self.generator.appearance_dim != self.model.appearance_dim
        {
            return Err(ExpError::Config(
                "generator feature dims do not match model input dims".into(),
            ));
        }
        Ok(())
    }
}

/// The pinned synthetic benchmark every comparison run references.
pub mod benchmark {
    use super::*;

    pub const TRAIN_SCENES: usize = 2_000;
    pub const TEST_SCENES: usize = 500;
    pub const SEED: u64 = 1234;

    pub fn config() -> ExperimentConfig {
        ExperimentConfig {
            seed: SEED,
            generator: GeneratorConfig {
                seed: SEED,
                ..GeneratorConfig::default()
            },
            model: ModelConfig::default(),
            training: TrainConfig::desk_preset(),
            ..ExperimentConfig::default()
        }
    }
}

// ====================== config loading ======================

fn parse_scalar(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    if let Ok(table) = wrapped.parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ExpError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ExpError::Config(format!("override '{spec}' is not key=value")))?;
    let key = key.trim();
    let mut parts = key.split('.').peekable();
    let mut current = table;
    loop {
        let part = parts
            .next()
            .filter(|p| !p.is_empty())
            .ok_or_else(|| ExpError::Config(format!("override '{spec}' has an empty key")))?;
        if parts.peek().is_none() {
            current.insert(part.to_string(), parse_scalar(raw.trim()));
            return Ok(());
        }
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry.as_table_mut().ok_or_else(|| {
            ExpError::Config(format!("override '{spec}': '{part}' is not a section"))
        })?;
    }
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ExpError> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| ExpError::Config(format!("bad config file: {e}")))?;
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| ExpError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, ExpError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| ExpError::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

/// Fresh run directory `<out_dir>/<UTC stamp>-<label>-s<seed>`; a suffix
/// disambiguates collisions within one second.
pub fn make_run_dir(cfg: &ExperimentConfig, label: &str) -> Result<PathBuf, ExpError> {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let base = PathBuf::from(cfg.paths.out_dir());
    let mut dir = base.join(format!("{stamp}-{label}-s{}", cfg.seed));
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = base.join(format!("{stamp}-{label}-s{}-{n}", cfg.seed));
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

// ====================== reports ======================

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub created_utc: String,
    pub command: String,
    pub method: String,
    pub seed: u64,
    /// Which detection stage produced the reported outputs.
    pub final_stage: String,
    pub no_refinement: bool,
    pub no_social_loss: bool,
    pub config: ExperimentConfig,
    pub ap_table: Vec<ApRow>,
    pub loss_curve: Vec<LossBreakdown>,
}

pub fn write_report(report: &RunReport, path: &Path) -> Result<(), ExpError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut out, report).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<RunReport, ExpError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(serde_json::from_reader(file).map_err(std::io::Error::from)?)
}

fn stage_label(with_refinement: bool) -> &'static str {
    if with_refinement {
        "refined"
    } else {
        "initial"
    }
}

fn now_utc() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

// ====================== generate ======================

pub struct GenerateOutcome {
    pub path: PathBuf,
    pub summary: DatasetSummary,
}

pub fn run_generate(
    cfg: &ExperimentConfig,
    count: u64,
    start_index: u64,
    out: &Path,
) -> Result<GenerateOutcome, ExpError> {
    let scenes = generate_dataset(&cfg.generator, count, start_index)?;
    write_dataset(&scenes, out)?;
    Ok(GenerateOutcome {
        path: out.to_path_buf(),
        summary: summarize(&scenes),
    })
}

// ====================== train ======================

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub report: PathBuf,
    pub history: Vec<LossBreakdown>,
}

/// Writer duplicating the training log onto stdout.
struct Tee<'a> {
    file: &'a mut dyn Write,
    echo: bool,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        if self.echo {
            std::io::stdout().write_all(buf)?;
        }
        self.file.write(buf)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        if self.echo {
            std::io::stdout().flush()?;
        }
        self.file.flush()
    }
}

pub fn run_train(
    cfg: &ExperimentConfig,
    dataset: &Path,
    run_dir: &Path,
    echo: bool,
) -> Result<TrainOutcome, ExpError> {
    let scenes = read_dataset(dataset)?;
    if scenes.is_empty() {
        return Err(ExpError::Config(format!(
            "dataset {} holds no scenes",
            dataset.display()
        )));
    }
    let mut params = init_full(&cfg.model, cfg.seed);
    let log_path = run_dir.join("train_log.txt");
    let history = {
        let mut file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
        let mut tee = Tee {
            file: &mut file,
            echo,
        };
        if cfg.training.steps > 0 {
            train_loop(&mut params, &scenes, &cfg.model, &cfg.training, &mut tee)?
        } else {
            Vec::new()
        }
    };
    let checkpoint = run_dir.join("checkpoint.bin");
    params.save(&checkpoint)?;
    let report_path = run_dir.join("report.json");
    write_report(
        &RunReport {
            created_utc: now_utc(),
            command: "train".into(),
            method: "ours".into(),
            seed: cfg.seed,
            final_stage: stage_label(cfg.training.with_refinement).into(),
            no_refinement: !cfg.training.with_refinement,
            no_social_loss: !cfg.training.with_social_loss,
            config: cfg.clone(),
            ap_table: Vec::new(),
            loss_curve: history.clone(),
        },
        &report_path,
    )?;
    Ok(TrainOutcome {
        checkpoint,
        log: log_path,
        report: report_path,
        history,
    })
}

// ====================== eval ======================

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Ours,
    Pp,
    Pairwise,
    Oracle,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Pp => "pp",
            Method::Pairwise => "pairwise",
            Method::Oracle => "oracle",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        !matches!(self, Method::Oracle)
    }
}

pub struct EvalOutcome {
    pub table: ApTable,
    pub scenes: usize,
    pub dump: PathBuf,
    pub csv: PathBuf,
    pub report: PathBuf,
}

/// Predictions of one method on one scene: the ranked groups plus, for
/// the full model, the initial-stage groups for side-by-side plots.
fn predict_scene(
    net: Option<&Network>,
    method: Method,
    scene: &Scene,
    cfg: &ExperimentConfig,
) -> Result<(Vec<PredictedGroup>, Option<Vec<PredictedGroup>>), ExpError> {
    let (h, w) = (cfg.model.heatmap_height, cfg.model.heatmap_width);
    match method {
        Method::Oracle => Ok((
            scene
                .groups
                .iter()
                .map(|g| PredictedGroup {
                    members: g.members.clone(),
                    sa_point: g.sa_point,
                    confidence: 1.0,
                })
                .collect(),
            None,
        )),
        Method::Ours => {
            let p = net
                .expect("checkpoint-backed method")
                .predict(scene, cfg.training.with_refinement, cfg.eval.tau)?;
            Ok((p.groups, Some(p.groups_initial)))
        }
        Method::Pp => {
            let p = net
                .expect("checkpoint-backed method")
                .predict(scene, false, cfg.eval.tau)?;
            Ok((
                baseline_pp(&p.heatmaps, h, w, cfg.eval.pp_dist_threshold),
                None,
            ))
        }
        Method::Pairwise => {
            let p = net
                .expect("checkpoint-backed method")
                .predict(scene, false, cfg.eval.tau)?;
            let sets = baseline_pairwise_cluster(&p.pairwise_social, cfg.eval.edge_threshold);
            Ok((
                pairwise_predictions(&sets, &p.pairwise_social, &p.heatmaps, h, w),
                None,
            ))
        }
    }
}

pub fn run_eval(
    cfg: &ExperimentConfig,
    dataset: &Path,
    checkpoint: Option<&Path>,
    method: Method,
    run_dir: &Path,
) -> Result<EvalOutcome, ExpError> {
    let scenes = read_dataset(dataset)?;
    let net = if method.needs_checkpoint() {
        let path = checkpoint.ok_or_else(|| {
            ExpError::Config(format!(
                "method '{}' needs a checkpoint; pass --checkpoint",
                method.as_str()
            ))
        })?;
        let params = ParamStore::load(path)?;
        Some(Network::from_params(cfg.model.clone(), params)?)
    } else {
        None
    };
    let mut records = Vec::with_capacity(scenes.len());
    let mut dump = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        let (groups, initial) = predict_scene(net.as_ref(), method, scene, cfg)?;
        dump.push(ScenePredictionRecord {
            scene_id: scene.scene_id.clone(),
            groups: groups.clone(),
            initial_groups: initial,
        });
        records.push(EvalRecord::from_scene(scene, groups));
    }
    let table = evaluate_with(&records, &cfg.eval.grid(), cfg.eval.interpolation())?;
    let dump_path = run_dir.join(format!("predictions_{}.jsonl", method.as_str()));
    write_predictions(&dump, &dump_path)?;
    let csv_path = run_dir.join(format!("ap_table_{}.csv", method.as_str()));
    std::fs::write(&csv_path, table.csv())?;
    let report_path = run_dir.join(format!("report_{}.json", method.as_str()));
    let final_stage = match method {
        Method::Ours => stage_label(cfg.training.with_refinement),
        _ => "initial",
    };
    write_report(
        &RunReport {
            created_utc: now_utc(),
            command: "eval".into(),
            method: method.as_str().into(),
            seed: cfg.seed,
            final_stage: final_stage.into(),
            no_refinement: !cfg.training.with_refinement,
            no_social_loss: !cfg.training.with_social_loss,
            config: cfg.clone(),
            ap_table: table.rows.clone(),
            loss_curve: Vec::new(),
        },
        &report_path,
    )?;
    Ok(EvalOutcome {
        table,
        scenes: scenes.len(),
        dump: dump_path,
        csv: csv_path,
        report: report_path,
    })
}

pub struct PlotOutcome {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Render every figure for one prediction dump: a PR curve per threshold
/// cell, qualitative overlays for the first `max_scenes` scenes, and
/// initial-vs-refined panels wherever the dump carries both stages.
pub fn run_plot(
    cfg: &ExperimentConfig,
    dataset: &Path,
    predictions: &Path,
    out_dir: &Path,
    max_scenes: usize,
) -> Result<PlotOutcome, ExpError> {
    let scenes = read_dataset(dataset)?;
    let preds = read_predictions(predictions)?;
    std::fs::create_dir_all(out_dir)?;

    let by_id: std::collections::HashMap<&str, &Scene> =
        scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let mut records = Vec::with_capacity(preds.len());
    for rec in &preds {
        let scene = by_id.get(rec.scene_id.as_str()).ok_or_else(|| {
            ExpError::Config(format!(
                "prediction for scene '{}' not present in the dataset",
                rec.scene_id
            ))
        })?;
        records.push(EvalRecord::from_scene(scene, rec.groups.clone()));
    }

    let mut outcome = PlotOutcome {
        files: Vec::new(),
        warnings: Vec::new(),
    };
    if preds.iter().all(|r| r.groups.is_empty()) {
        outcome
            .warnings
            .push("prediction dump holds no groups; PR curves are all zero".into());
    }

    let grid = cfg.eval.grid();
    grid.validate()?;
    for &ti in &grid.iou_thresholds {
        for &td in &grid.dist_thresholds {
            let points = pr_curve(&records, ti, td)?;
            let ap = group_ap_with(&records, ti, td, cfg.eval.interpolation())?;
            let fig = plot::pr_figure(&points, ti, td, ap);
            let path = out_dir.join(format!("pr_iou{ti}_dist{}.png", plot::dist_label(td)));
            fig.save(&path)?;
            outcome.files.push(path);
        }
    }

    for rec in preds.iter().take(max_scenes) {
        let scene = by_id[rec.scene_id.as_str()];
        let fig = plot::scene_figure(scene, &rec.groups);
        let path = out_dir.join(format!("scene_{}.png", rec.scene_id));
        fig.save(&path)?;
        outcome.files.push(path);
        if let Some(initial) = &rec.initial_groups {
            let fig = plot::refine_figure(scene, initial, &rec.groups);
            let path = out_dir.join(format!("refine_{}.png", rec.scene_id));
            fig.save(&path)?;
            outcome.files.push(path);
        }
    }
    Ok(outcome)
}
