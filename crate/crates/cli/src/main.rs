use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use tumorseg::config::ExperimentConfig;
use tumorseg::harness::pipeline::{self, load_prepared_index, load_truth, tuned_postprocess};
use tumorseg::harness::render::{busiest_slice, render_slice};
use tumorseg::harness::{
    ablate, baseline_experiment, evaluate, infer_dataset, infer_fold, load_folds, load_prepared, postprocess_tune,
    prepare, train_cell, variant_config, write_report, AblationPlan, AblationVariant, DeskScale, Workspace,
};
use tumorseg::postprocess::SearchSpec;
use tumorseg::synthetic::{generate_synthetic, SyntheticSpec};
use tumorseg::volume_io::{example_path, read_nifti};
use tumorseg::Tensor;

#[derive(Parser, Debug)]
#[command(name = "tumorseg", version, about = "Region-based 3D U-Net brain tumour segmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults to the best configuration, or to
    /// the baseline when a variant is given.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    fold: Option<usize>,
    /// Ablation variant, or a comma-separated list for evaluate/ablate.
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Seeds both the fold split and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset directory with `{id}_{modality}.nii.gz` files.
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Workspace directory holding every artifact.
    #[arg(long, global = true, default_value = "workspace")]
    output_dir: PathBuf,
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    /// Shrink patch, model, epochs and search grid for a single CPU.
    #[arg(long, global = true)]
    desk_scale: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Crop, normalise and cache the dataset and assign folds.
    Prepare {
        /// Generate this many synthetic examples into --data-root first.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Side length of synthetic volumes.
        #[arg(long, default_value_t = 32)]
        synthetic_size: usize,
    },
    /// Train one fold (all folds when --fold is omitted).
    Train,
    /// Predict validation examples of each trained fold, or every example
    /// of --input with the full ensemble.
    Infer {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Grid-search post-processing thresholds on out-of-fold predictions.
    PostprocessTune,
    /// Score out-of-fold predictions and render the fold table.
    Evaluate,
    /// Train, infer, tune and evaluate a set of variants over all folds.
    Ablate {
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Write PNG slices of FLAIR, prediction and ground truth.
    RenderSlices {
        /// Only this example.
        #[arg(long)]
        id: Option<String>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    if c.device != "cpu" {
        bail!("device `{}` is not available; only `cpu` is supported", c.device);
    }
    let ws = Workspace::new(&c.output_dir);
    match &cli.command {
        Command::Prepare {
            synthetic,
            synthetic_size,
        } => cmd_prepare(c, &ws, *synthetic, *synthetic_size),
        Command::Train => cmd_train(c, &ws),
        Command::Infer { input } => cmd_infer(c, &ws, input.as_deref()),
        Command::PostprocessTune => {
            let run = single_run(c)?;
            let cfg = run_config(c, &ws, &run)?;
            let tuned = postprocess_tune(&ws, &run, &cfg, &search_spec(c))?;
            println!(
                "{run}: WT {:.2} TC {:.2} ET {:.2} ET min {} -> mean Dice {:.4} ({} points)",
                tuned.config.wt_threshold,
                tuned.config.tc_threshold,
                tuned.config.et_threshold,
                tuned.config.total_et_min,
                tuned.score,
                tuned.points_evaluated
            );
            Ok(())
        }
        Command::Evaluate => {
            let mut evals = Vec::new();
            for run in runs(c, &ws)? {
                let cfg = run_config(c, &ws, &run)?;
                evals.push(evaluate(&ws, &run, &cfg)?);
            }
            print!("{}", write_report(&ws, &evals)?);
            Ok(())
        }
        Command::Ablate { threads } => {
            let variants = match &c.variant {
                Some(v) => parse_variants(v)?,
                None => AblationVariant::ALL.to_vec(),
            };
            let plan = AblationPlan {
                variants,
                folds: c.fold.map(|f| vec![f]),
                desk: c.desk_scale.then(DeskScale::default),
                threads: *threads,
                search: search_spec(c),
            };
            let report = ablate(&ws, &base_config(c, true)?, &plan)?;
            for r in &report.records {
                println!("{} fold {}: best val Dice {:.4} ({:.1}s)", r.run, r.fold, r.best_val_dice, r.runtime_seconds);
            }
            print!("{}", report.table);
            Ok(())
        }
        Command::RenderSlices { id } => cmd_render(c, &ws, id.as_deref()),
    }
}

fn parse_variants(list: &str) -> Result<Vec<AblationVariant>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<AblationVariant>().map_err(Into::into))
        .collect()
}

fn single_run(c: &Common) -> Result<String> {
    match &c.variant {
        Some(v) if v.contains(',') => bail!("this command takes a single --variant"),
        Some(v) => Ok(v.parse::<AblationVariant>()?.name().to_string()),
        None => Ok("default".into()),
    }
}

/// Runs named by --variant, or every run with predictions.
fn runs(c: &Common, ws: &Workspace) -> Result<Vec<String>> {
    if let Some(v) = &c.variant {
        return Ok(parse_variants(v)?.iter().map(|v| v.name().to_string()).collect());
    }
    let dir = ws.root().join("predictions");
    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .with_context(|| format!("no predictions under {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    let order = |n: &String| {
        n.parse::<AblationVariant>()
            .map(|v| AblationVariant::ALL.iter().position(|a| *a == v).unwrap_or(usize::MAX))
            .unwrap_or(usize::MAX)
    };
    names.sort_by_key(|n| (order(n), n.clone()));
    Ok(names)
}

/// Config file (or default) with command-line overrides, before any variant
/// is applied.
fn base_config(c: &Common, ablation: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if ablation => baseline_experiment(),
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
        cfg.cross_validation.seed = seed;
    }
    if let Some(lr) = c.lr {
        cfg.train.learning_rate = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_config(c: &Common) -> Result<(String, ExperimentConfig)> {
    let run = single_run(c)?;
    let cfg = match run.parse::<AblationVariant>() {
        Ok(v) => variant_config(v, &base_config(c, true)?)?,
        Err(_) => base_config(c, false)?,
    };
    let cfg = if c.desk_scale { DeskScale::default().apply(&cfg) } else { cfg };
    cfg.validate()?;
    Ok((run, cfg))
}

/// The config a run was trained with, falling back to the command line.
fn run_config(c: &Common, ws: &Workspace, run: &str) -> Result<ExperimentConfig> {
    let folds = load_folds(ws).unwrap_or_default();
    for f in folds {
        let path = ws.run_dir(run, f.fold).join("config.toml");
        if path.exists() {
            return Ok(ExperimentConfig::load(&path)?);
        }
    }
    let mut fallback = c.clone();
    fallback.variant = Some(run.to_string()).filter(|r| r != "default");
    Ok(resolve_config(&fallback)?.1)
}

fn search_spec(c: &Common) -> SearchSpec {
    if c.desk_scale {
        DeskScale::default().search_spec()
    } else {
        SearchSpec::default()
    }
}

fn cmd_prepare(c: &Common, ws: &Workspace, synthetic: Option<usize>, size: usize) -> Result<()> {
    let root = c.data_root.as_deref().context("--data-root is required")?;
    if let Some(count) = synthetic {
        let spec = SyntheticSpec {
            shape: [size; 3],
            count,
            seed: c.seed.unwrap_or(0),
            ..Default::default()
        };
        generate_synthetic(&spec, root)?;
        info!("wrote {count} synthetic examples to {}", root.display());
    }
    let cfg = base_config(c, false)?;
    let m = prepare(ws, root, &cfg.cross_validation)?;
    for s in &m.splits {
        println!("fold {}: {} train, {} val", s.fold, s.train.len(), s.val.len());
    }
    Ok(())
}

fn cmd_train(c: &Common, ws: &Workspace) -> Result<()> {
    let (run, cfg) = resolve_config(c)?;
    let data = load_prepared(ws)?;
    let folds: Vec<usize> = match c.fold {
        Some(f) => vec![f],
        None => load_folds(ws)?.iter().map(|f| f.fold).collect(),
    };
    for fold in folds {
        let out = train_cell(ws, &run, &cfg, fold, &data)?;
        for ck in &out.checkpoints {
            println!("{run} fold {fold}: epoch {} val Dice {:.4}", ck.epoch, ck.val_dice);
        }
    }
    Ok(())
}

fn cmd_infer(c: &Common, ws: &Workspace, input: Option<&Path>) -> Result<()> {
    let run = single_run(c)?;
    let cfg = run_config(c, ws, &run)?;
    if let Some(input) = input {
        let out = ws.predictions_dir(&run).join("external");
        let written = infer_dataset(ws, &run, &cfg, input, &out)?;
        println!("wrote {} label maps to {}", written.len(), out.display());
        return Ok(());
    }
    let data = load_prepared(ws)?;
    let folds: Vec<usize> = match c.fold {
        Some(f) => vec![f],
        None => load_folds(ws)?.iter().map(|f| f.fold).collect(),
    };
    for fold in folds {
        let written = infer_fold(ws, &run, &cfg, fold, &data)?;
        println!("{run} fold {fold}: {} probability maps", written.len());
    }
    Ok(())
}

fn cmd_render(c: &Common, ws: &Workspace, only: Option<&str>) -> Result<()> {
    let run = single_run(c)?;
    let index = load_prepared_index(ws)?;
    let data_root = c.data_root.clone().unwrap_or(index.data_root);
    let out_dir = ws.root().join("slices").join(&run);
    let pp = tuned_postprocess(ws, &run)?;
    let mut count = 0;
    for id in index.ids.iter().filter(|id| only.is_none_or(|o| o == id.as_str())) {
        let label_path = ws.label_path(&run, id);
        let pred = if label_path.exists() {
            let v = read_nifti(&label_path)?;
            Tensor::from_vec(v.dims.clone(), v.values().iter().map(|x| *x as u8).collect())
        } else {
            let prob_path = ws.probability_path(&run, id);
            if !prob_path.exists() {
                continue;
            }
            let p = pipeline::load_probability_volume(&prob_path)?;
            tumorseg::postprocess::postprocess(&p, &pp.clone().unwrap_or_default())
        };
        let flair = read_nifti(&example_path(&data_root, id, "flair"))?;
        let flair = Tensor::from_vec(flair.dims.clone(), flair.to_f32());
        let truth = load_truth(&data_root, id).ok();
        let z = busiest_slice(truth.as_ref().unwrap_or(&pred));
        let mut labels = vec![&pred];
        labels.extend(truth.as_ref());
        let img = render_slice(&flair, &labels, z)?;
        let path = out_dir.join(format!("{id}_z{z:03}.png"));
        img.save_png(&path)?;
        count += 1;
    }
    if count == 0 {
        bail!("no predictions for `{run}` under {}", ws.predictions_dir(&run).display());
    }
    println!("wrote {count} slices to {}", out_dir.display());
    Ok(())
}
