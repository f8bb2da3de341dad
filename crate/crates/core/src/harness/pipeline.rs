//! Workspace-level pipeline steps shared by the CLI and the tests.
//!
//! Layout under the workspace root:
//!
//! ```text
//! prepared/{id}.bin, {id}.json, index.json
//! folds.json
//! runs/{run}/fold{k}/      config.toml, history.jsonl, *.ckpt
//! predictions/{run}/       {id}_prob.nii.gz, {id}_pred.nii.gz
//! postprocess/{run}.json
//! metrics/{run}.jsonl
//! manifests/*.json
//! ablation.jsonl
//! tables/table.txt
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::ablation::{variant_config, AblationVariant, DeskScale};
use super::manifest::RunManifest;
use crate::augment::stream_seed;
use crate::config::{CrossValConfig, ExperimentConfig};
use crate::error::{Error, Result};
use crate::inference::{predict_volume, Ensemble};
use crate::metrics::{cross_val_summary, region_dice_report, render_table, CrossValSummary, DiceReport};
use crate::model::checkpoint::{atomic_write, load_checkpoint};
use crate::model::Model;
use crate::postprocess::{grid_search_thresholds, postprocess, regions_to_classes, PostprocessConfig, SearchSpec, TuneCase};
use crate::preprocess::{load_cached, preprocess_example, save_cached, uncrop, PreprocessedExample};
use crate::tensor::Tensor;
use crate::trainer::{make_folds, train_fold, FoldSplit, TrainOutcome};
use crate::volume_io::{example_path, load_example, read_nifti, scan_dataset, write_nifti, NiftiData, SEGMENTATION};

#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.root.join("prepared")
    }

    pub fn prepared_index_path(&self) -> PathBuf {
        self.prepared_dir().join("index.json")
    }

    pub fn folds_path(&self) -> PathBuf {
        self.root.join("folds.json")
    }

    pub fn run_dir(&self, run: &str, fold: usize) -> PathBuf {
        self.root.join("runs").join(run).join(format!("fold{fold}"))
    }

    pub fn predictions_dir(&self, run: &str) -> PathBuf {
        self.root.join("predictions").join(run)
    }

    pub fn probability_path(&self, run: &str, id: &str) -> PathBuf {
        self.predictions_dir(run).join(format!("{id}_prob.nii.gz"))
    }

    pub fn label_path(&self, run: &str, id: &str) -> PathBuf {
        self.predictions_dir(run).join(format!("{id}_pred.nii.gz"))
    }

    pub fn postprocess_path(&self, run: &str) -> PathBuf {
        self.root.join("postprocess").join(format!("{run}.json"))
    }

    pub fn metrics_path(&self, run: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{run}.jsonl"))
    }

    pub fn manifest_path(&self, name: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{name}.json"))
    }

    pub fn ablation_log_path(&self) -> PathBuf {
        self.root.join("ablation.jsonl")
    }

    pub fn table_path(&self) -> PathBuf {
        self.root.join("tables").join("table.txt")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedIndex {
    pub data_root: PathBuf,
    pub ids: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, &serde_json::to_vec_pretty(value).expect("value serialises"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, kind: &'static str) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(kind, path, e))
}

fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serialises");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serialises"));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

/// Reads a line-delimited JSON file, skipping blank lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format("jsonl", path, e)))
        .collect()
}

/// Crops, normalises and caches every example under `data_root`, then
/// writes the fold assignment.
pub fn prepare(ws: &Workspace, data_root: &Path, cv: &CrossValConfig) -> Result<RunManifest> {
    let t = Instant::now();
    let index = scan_dataset(data_root)?;
    if index.is_empty() {
        return Err(Error::Invalid(format!("no examples found under {}", data_root.display())));
    }
    let ids = index.ids();
    let dir = ws.prepared_dir();
    for id in &ids {
        let p = preprocess_example(&load_example(&index, id)?)?;
        save_cached(&p, &dir)?;
    }
    let splits = make_folds(&ids, cv.folds, cv.seed)?;
    let prepared = PreparedIndex {
        data_root: data_root.to_path_buf(),
        ids: ids.clone(),
    };
    write_json(&ws.prepared_index_path(), &prepared)?;
    write_json(&ws.folds_path(), &splits)?;
    let mut m = RunManifest::new("prepare").with_splits(&ids, &splits, cv.seed);
    m.data_root = Some(data_root.to_path_buf());
    m.artifacts = vec![ws.prepared_index_path(), ws.folds_path()];
    m.runtime_seconds = t.elapsed().as_secs_f64();
    m.save(&ws.manifest_path("prepare"))?;
    info!("prepared {} examples into {}", ids.len(), dir.display());
    Ok(m)
}

pub fn load_prepared_index(ws: &Workspace) -> Result<PreparedIndex> {
    read_json(&ws.prepared_index_path(), "prepared index")
}

pub fn load_folds(ws: &Workspace) -> Result<Vec<FoldSplit>> {
    read_json(&ws.folds_path(), "folds")
}

pub fn load_prepared(ws: &Workspace) -> Result<BTreeMap<String, PreprocessedExample>> {
    let index = load_prepared_index(ws)?;
    let dir = ws.prepared_dir();
    index
        .ids
        .iter()
        .map(|id| Ok((id.clone(), load_cached(&dir, id)?)))
        .collect()
}

fn fold_split(ws: &Workspace, fold: usize) -> Result<FoldSplit> {
    let folds = load_folds(ws)?;
    folds
        .into_iter()
        .find(|f| f.fold == fold)
        .ok_or_else(|| Error::Invalid(format!("fold {fold} is not in {}", ws.folds_path().display())))
}

/// Per-fold training seed derived from the configured one.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    stream_seed(seed, fold as u64, 0)
}

fn clear_run_dir(dir: &Path) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let stale = path.extension().is_some_and(|x| x == "ckpt")
            || path.file_name().is_some_and(|n| n == "history.jsonl");
        if stale {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

/// Trains one (run, fold) cell and records its config and manifest.
pub fn train_cell(
    ws: &Workspace,
    run: &str,
    cfg: &ExperimentConfig,
    fold: usize,
    data: &BTreeMap<String, PreprocessedExample>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t = Instant::now();
    let split = fold_split(ws, fold)?;
    let dir = ws.run_dir(run, fold);
    clear_run_dir(&dir)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    atomic_write(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let mut train = cfg.train.clone();
    train.seed = fold_seed(cfg.train.seed, fold);
    let out = train_fold(&split, &cfg.model, &train, &cfg.augment, &cfg.loss, data, Some(&dir))?;

    let mut m = RunManifest::new("train").with_config(cfg);
    m.run_name = Some(run.to_string());
    m.seeds.insert("train".into(), train.seed);
    m.splits = vec![split];
    m.fold_count = 1;
    m.artifacts = out.checkpoints.iter().filter_map(|c| c.path.clone()).collect();
    m.artifacts.push(dir.join("history.jsonl"));
    m.runtime_seconds = t.elapsed().as_secs_f64();
    m.save(&ws.manifest_path(&format!("train-{run}-fold{fold}")))?;
    Ok(out)
}

/// The stored top checkpoints of one fold, best first.
pub fn load_fold_ensemble(ws: &Workspace, run: &str, fold: usize) -> Result<Ensemble<Model<f32>>> {
    let dir = ws.run_dir(run, fold);
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Invalid(format!("no checkpoints in {}", dir.display())));
    }
    let mut members: Vec<(f64, Model<f32>)> = paths
        .iter()
        .map(|p| load_checkpoint::<f32>(p).map(|(m, h)| (h.val_dice, m)))
        .collect::<Result<_>>()?;
    members.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(Ensemble {
        members: members.into_iter().map(|(_, m)| m).collect(),
    })
}

/// Writes `[3, H, W, D]` probabilities as a 4D volume with channels last.
pub fn save_probability_volume(p: &Tensor<f32>, reference: &PreprocessedExample, path: &Path) -> Result<()> {
    let [h, w, d] = p.spatial();
    write_nifti(path, &NiftiData::F32(p.data()), &[h, w, d, p.lead()], &reference.affine, reference.spacing)
}

pub fn load_probability_volume(path: &Path) -> Result<Tensor<f32>> {
    let v = read_nifti(path)?;
    if v.dims.len() != 4 {
        return Err(Error::format("probability", path, format!("expected 4 dims, got {:?}", v.dims)));
    }
    Ok(Tensor::from_vec(vec![v.dims[3], v.dims[0], v.dims[1], v.dims[2]], v.to_f32()))
}

/// Ground-truth label map read straight from the dataset.
pub fn load_truth(data_root: &Path, id: &str) -> Result<Tensor<u8>> {
    let path = example_path(data_root, id, SEGMENTATION);
    let v = read_nifti(&path)?;
    if v.dims.len() != 3 {
        return Err(Error::format("segmentation", &path, format!("expected 3 dims, got {:?}", v.dims)));
    }
    let data: Vec<u8> = v.values().iter().map(|x| x.round().clamp(0.0, 255.0) as u8).collect();
    crate::losses::check_labels(&data, id)?;
    Ok(Tensor::from_vec(v.dims.clone(), data))
}

/// Predicts one fold's validation examples with that fold's checkpoint
/// ensemble and stores probabilities in the original frame.
pub fn infer_fold(
    ws: &Workspace,
    run: &str,
    cfg: &ExperimentConfig,
    fold: usize,
    data: &BTreeMap<String, PreprocessedExample>,
) -> Result<Vec<PathBuf>> {
    let split = fold_split(ws, fold)?;
    let ensemble = load_fold_ensemble(ws, run, fold)?;
    let sw = cfg.inference.sliding_window();
    let mut written = Vec::new();
    for id in &split.val {
        let ex = data.get(id).ok_or_else(|| Error::UnknownExample(id.clone()))?;
        let probs = predict_volume(&ensemble, &ex.image, &sw, cfg.inference.tta)?;
        let full = uncrop(&probs, &ex.bounds, ex.original_shape, 0.0)?;
        let path = ws.probability_path(run, id);
        save_probability_volume(&full, ex, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Predicts every example under `data_root` with all folds' checkpoints and
/// writes post-processed label maps to `out_dir`.
pub fn infer_dataset(
    ws: &Workspace,
    run: &str,
    cfg: &ExperimentConfig,
    data_root: &Path,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let folds = load_folds(ws)?;
    let mut members = Vec::new();
    for f in &folds {
        members.extend(load_fold_ensemble(ws, run, f.fold)?.members);
    }
    let ensemble = Ensemble { members };
    let pp = tuned_postprocess(ws, run)?.unwrap_or_else(|| cfg.postprocess.clone());
    let index = scan_dataset(data_root)?;
    let sw = cfg.inference.sliding_window();
    let mut written = Vec::new();
    for id in index.ids() {
        let ex = preprocess_example(&load_example(&index, &id)?)?;
        let probs = predict_volume(&ensemble, &ex.image, &sw, cfg.inference.tta)?;
        let full = uncrop(&probs, &ex.bounds, ex.original_shape, 0.0)?;
        let label = postprocess(&full, &pp);
        let path = out_dir.join(format!("{id}.nii.gz"));
        write_nifti(&path, &NiftiData::U8(label.data()), &ex.original_shape, &ex.affine, ex.spacing)?;
        written.push(path);
    }
    Ok(written)
}

/// Out-of-fold probabilities with their ground truth.
pub fn out_of_fold_cases(ws: &Workspace, run: &str) -> Result<Vec<(String, TuneCase)>> {
    let index = load_prepared_index(ws)?;
    let mut cases = Vec::new();
    for split in load_folds(ws)? {
        for id in &split.val {
            let probs = load_probability_volume(&ws.probability_path(run, id))?;
            let truth = load_truth(&index.data_root, id)?;
            cases.push((
                id.clone(),
                TuneCase {
                    fold: split.fold,
                    probs,
                    truth,
                },
            ));
        }
    }
    Ok(cases)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunedPostprocess {
    pub config: PostprocessConfig,
    pub score: f64,
    pub points_evaluated: usize,
}

pub fn postprocess_tune(
    ws: &Workspace,
    run: &str,
    cfg: &ExperimentConfig,
    spec: &SearchSpec,
) -> Result<TunedPostprocess> {
    let cases: Vec<TuneCase> = out_of_fold_cases(ws, run)?.into_iter().map(|c| c.1).collect();
    let result = grid_search_thresholds(&cases, spec, &cfg.postprocess)?;
    let tuned = TunedPostprocess {
        config: result.best,
        score: result.best_score,
        points_evaluated: result.table.len(),
    };
    write_json(&ws.postprocess_path(run), &tuned)?;
    Ok(tuned)
}

pub fn tuned_postprocess(ws: &Workspace, run: &str) -> Result<Option<PostprocessConfig>> {
    let path = ws.postprocess_path(run);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(read_json::<TunedPostprocess>(&path, "post-processing")?.config))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Per-region 0.5 thresholds, no component filtering.
    Raw,
    PostProcessed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run: String,
    pub stage: Stage,
    #[serde(flatten)]
    pub report: DiceReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub run: String,
    pub raw: CrossValSummary,
    pub post_processed: CrossValSummary,
}

fn raw_thresholds() -> PostprocessConfig {
    PostprocessConfig {
        wt_threshold: 0.5,
        tc_threshold: 0.5,
        et_threshold: 0.5,
        ..Default::default()
    }
}

/// Scores the out-of-fold predictions before and after post-processing
/// and writes the post-processed label maps.
pub fn evaluate(ws: &Workspace, run: &str, cfg: &ExperimentConfig) -> Result<Evaluation> {
    let pp = tuned_postprocess(ws, run)?.unwrap_or_else(|| cfg.postprocess.clone());
    let index = load_prepared_index(ws)?;
    let raw_cfg = raw_thresholds();
    let (mut raw, mut post) = (Vec::new(), Vec::new());
    for (id, case) in out_of_fold_cases(ws, run)? {
        let fold = Some(case.fold);
        raw.push(region_dice_report(&id, fold, &regions_to_classes(&case.probs, &raw_cfg), &case.truth)?);
        let label = postprocess(&case.probs, &pp);
        post.push(region_dice_report(&id, fold, &label, &case.truth)?);
        let reference = read_nifti(&example_path(&index.data_root, &id, SEGMENTATION))?;
        write_nifti(
            &ws.label_path(run, &id),
            &NiftiData::U8(label.data()),
            &case.truth.spatial(),
            &reference.affine,
            reference.spacing,
        )?;
    }
    let records: Vec<MetricRecord> = raw
        .iter()
        .map(|r| (Stage::Raw, r))
        .chain(post.iter().map(|r| (Stage::PostProcessed, r)))
        .map(|(stage, r)| MetricRecord {
            run: run.to_string(),
            stage,
            report: r.clone(),
        })
        .collect();
    write_jsonl(&ws.metrics_path(run), &records)?;
    Ok(Evaluation {
        run: run.to_string(),
        raw: cross_val_summary(&raw),
        post_processed: cross_val_summary(&post),
    })
}

/// Column heading for a run name.
pub fn run_label(run: &str) -> String {
    run.parse::<AblationVariant>()
        .map(|v| v.label().to_string())
        .unwrap_or_else(|_| run.to_string())
}

/// Fold-by-run tables of raw and post-processed mean Dice.
pub fn render_report(evals: &[Evaluation]) -> String {
    let raw: Vec<(String, CrossValSummary)> = evals.iter().map(|e| (run_label(&e.run), e.raw.clone())).collect();
    let post: Vec<(String, CrossValSummary)> = evals
        .iter()
        .map(|e| (run_label(&e.run), e.post_processed.clone()))
        .collect();
    format!("{}\n{}", render_table("Raw", &raw), render_table("Post-processed", &post))
}

pub fn write_report(ws: &Workspace, evals: &[Evaluation]) -> Result<String> {
    let text = render_report(evals);
    atomic_write(&ws.table_path(), text.as_bytes())?;
    Ok(text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub run: String,
    pub fold: usize,
    /// Best validation mean Dice seen during training.
    pub best_val_dice: f64,
    pub config_hash: String,
    pub runtime_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct AblationPlan {
    pub variants: Vec<AblationVariant>,
    /// All folds when `None`.
    pub folds: Option<Vec<usize>>,
    pub desk: Option<DeskScale>,
    pub threads: usize,
    pub search: SearchSpec,
}

impl Default for AblationPlan {
    fn default() -> Self {
        AblationPlan {
            variants: AblationVariant::ALL.to_vec(),
            folds: None,
            desk: None,
            threads: 1,
            search: SearchSpec::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub records: Vec<AblationRecord>,
    pub evaluations: Vec<Evaluation>,
    pub table: String,
}

/// The config a variant runs with: `base` plus the variant change, then the
/// desk-scale reduction when requested.
pub fn plan_config(variant: AblationVariant, base: &ExperimentConfig, desk: Option<&DeskScale>) -> Result<ExperimentConfig> {
    let cfg = variant_config(variant, base)?;
    let cfg = match desk {
        Some(d) => d.apply(&cfg),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Trains every (variant, fold) cell on a bounded thread pool, then infers,
/// tunes post-processing and evaluates each variant.
pub fn ablate(ws: &Workspace, base: &ExperimentConfig, plan: &AblationPlan) -> Result<AblationReport> {
    let t = Instant::now();
    let data = load_prepared(ws)?;
    let all_folds: Vec<usize> = load_folds(ws)?.iter().map(|f| f.fold).collect();
    let folds = plan.folds.clone().unwrap_or_else(|| all_folds.clone());
    let configs: Vec<(AblationVariant, ExperimentConfig)> = plan
        .variants
        .iter()
        .map(|v| Ok((*v, plan_config(*v, base, plan.desk.as_ref())?)))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|c| folds.iter().map(move |f| (c, *f)))
        .collect();

    let log_path = ws.ablation_log_path();
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<Result<AblationRecord>>();
    let mut records = Vec::new();
    let mut first_err = None;
    std::thread::scope(|s| {
        for _ in 0..plan.threads.max(1).min(jobs.len().max(1)) {
            let tx = tx.clone();
            let (next, jobs, configs, data) = (&next, &jobs, &configs, &data);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(c, fold)) = jobs.get(i) else { break };
                let (variant, cfg) = &configs[c];
                let started = Instant::now();
                let run = variant.name();
                let res = train_cell(ws, run, cfg, fold, data).and_then(|out| {
                    infer_fold(ws, run, cfg, fold, data)?;
                    Ok(AblationRecord {
                        run: run.to_string(),
                        fold,
                        best_val_dice: out.history.iter().map(|h| h.val_mean).fold(f64::NEG_INFINITY, f64::max),
                        config_hash: cfg.hash(),
                        runtime_seconds: started.elapsed().as_secs_f64(),
                    })
                });
                if tx.send(res).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for res in rx {
            match res {
                Ok(r) => {
                    info!("{} fold {}: best val Dice {:.4}", r.run, r.fold, r.best_val_dice);
                    if let Err(e) = append_jsonl(&log_path, std::slice::from_ref(&r)) {
                        first_err.get_or_insert(e);
                    }
                    records.push(r);
                }
                Err(e) => {
                    next.store(usize::MAX / 2, Ordering::SeqCst);
                    first_err.get_or_insert(e);
                }
            }
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }
    records.sort_by(|a, b| (&a.run, a.fold).cmp(&(&b.run, b.fold)));

    let mut evaluations = Vec::new();
    let complete = folds.len() == all_folds.len();
    for (variant, cfg) in &configs {
        if complete {
            postprocess_tune(ws, variant.name(), cfg, &plan.search)?;
            evaluations.push(evaluate(ws, variant.name(), cfg)?);
        }
    }
    let table = if complete { write_report(ws, &evaluations)? } else { String::new() };

    let folds_seed = base.cross_validation.seed;
    let ids: Vec<String> = data.keys().cloned().collect();
    let mut m = RunManifest::new("ablate")
        .with_config(base)
        .with_splits(&ids, &load_folds(ws)?, folds_seed);
    m.run_name = Some(
        plan.variants
            .iter()
            .map(|v| v.name())
            .collect::<Vec<_>>()
            .join(","),
    );
    m.artifacts = vec![log_path];
    if complete {
        m.artifacts.push(ws.table_path());
    }
    m.runtime_seconds = t.elapsed().as_secs_f64();
    m.save(&ws.manifest_path("ablate"))?;
    Ok(AblationReport {
        records,
        evaluations,
        table,
    })
}
