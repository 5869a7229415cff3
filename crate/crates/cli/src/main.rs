use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use octfpn::autodiff::Mode;
use octfpn::data::{patient_kfold, preprocess, synth_generate, write_synth, Dataset, GrayImage};
use octfpn::eval::{argmax, format_table, metrics, report_cells, Averaging, ConfusionMatrix};
use octfpn::experiment::{class_weights_for, crossval, summary_table, ExperimentConfig};
use octfpn::gradcam::{export_heatmap, grad_cam, CamSource};
use octfpn::model::FpnModel;
use octfpn::oracle::{run_gradient_suite, TOLERANCE};
use octfpn::train::{transfer_weights, Checkpoint, Trainer};

/// Multi-scale feature-fusion classifier for retinal OCT B-scans.
#[derive(Parser)]
#[command(name = "octfpn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the trainable parameter count of a configured model.
    Params {
        #[arg(long)]
        config: PathBuf,
        /// Override the number of merged scales.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        top_k: Option<u64>,
    },
    /// Write a synthetic three-class dataset with lesion masks.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Images per class.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run patient-level k-fold cross-validation.
    Crossval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Folds trained in parallel. Outputs do not depend on it.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Override a config key, e.g. `train.max_epochs=20`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train on one fold's split and write its checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on every record of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "macro")]
        averaging: AveragingArg,
    },
    /// Export per-scale Grad-CAM heatmaps for images.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        /// Pyramid scales, 1 being the finest. Defaults to every merged scale.
        #[arg(long = "scale", value_delimiter = ',')]
        scales: Vec<usize>,
        /// Target class. Defaults to the predicted one.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, value_enum, default_value = "head")]
        source: SourceArg,
        #[arg(long, default_value = "heatmaps")]
        out: PathBuf,
    },
    /// Check every gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Initialize a target model from a source checkpoint.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Experiment config describing the target model.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AveragingArg {
    Macro,
    Micro,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SourceArg {
    Head,
    Encoder,
}

fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    for o in overrides {
        cfg.set(o)?;
    }
    Ok(cfg)
}

fn params(config: &Path, top_k: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(k) = top_k {
        cfg.fusion.top_k = k as usize;
    }
    let model_cfg = cfg.model();
    model_cfg.validate()?;
    let model = FpnModel::build(&model_cfg, 1)?;
    let table = model.init_params::<f32>(cfg.train.seed);
    let b = FpnModel::breakdown(&table);
    println!("model       {} top-{}", cfg.backbone.name, cfg.fusion.top_k);
    println!("encoder     {:>12}", b.encoder);
    println!("fusion      {:>12}", b.fusion);
    println!("classifier  {:>12}", b.classifier);
    println!("total       {:>12}  ({:.2}M)", b.total, b.total as f64 / 1e6);
    Ok(())
}

fn synth(out: &Path, n: usize, size: usize, seed: u64) -> Result<()> {
    if n == 0 || size == 0 {
        bail!("--n and --size must be positive");
    }
    let samples = synth_generate(n, size, seed);
    let records = write_synth(out, &samples)?;
    println!("wrote {} records to {}", records.len(), out.join("manifest.csv").display());
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &Path, fold: usize) -> Result<()> {
    cfg.validate()?;
    if fold >= cfg.folds {
        bail!("fold {fold} out of range for {} folds", cfg.folds);
    }
    let data = Dataset::load(&cfg.data.manifest, cfg.backbone.input[0], cfg.fusion.n_classes)?;
    let plan = patient_kfold(&data.records, cfg.folds, cfg.train.seed)?;
    let split = plan.split(&data.records, fold)?;
    let aug = cfg.data.augment.then(|| cfg.augmentation.clone());
    let mut trainer = Trainer::new(cfg.model(), cfg.train.clone(), aug, class_weights_for(cfg, &data)?, &data)?;
    let start = trainer.start(fold)?;
    let mut logs = String::new();
    let ck = trainer.fit(&split, fold, start, |l| {
        log::info!("epoch {}: train {:.4} val {:.4} lr {:.2e}", l.epoch, l.train_loss, l.val_loss, l.lr);
        logs.push_str(&serde_json::to_string(l).expect("log line"));
        logs.push('\n');
    })?;
    let dir = out.join(&cfg.name).join(format!("fold{fold}"));
    fs::create_dir_all(&dir)?;
    fs::write(out.join(&cfg.name).join("config.echo"), cfg.to_toml()?)?;
    fs::write(dir.join("logs.jsonl"), logs)?;
    ck.save(&dir.join("checkpoint.bin"))?;
    if !split.test.is_empty() {
        let (probs, loss) = trainer.evaluate(ck.weights(), &split.test)?;
        let cm = ConfusionMatrix::from_probs(&data.labels(&split.test), &probs)?;
        let report = metrics(&cm, Some(loss), cfg.evaluation.averaging)?;
        print!("{}", format_table(&[(format!("fold {fold} test"), report_cells(&report))]));
    }
    println!("checkpoint {}", dir.join("checkpoint.bin").display());
    Ok(())
}

fn eval(checkpoint: &Path, manifest: &Path, averaging: Averaging) -> Result<()> {
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    let [size, _, _] = ck.model.backbone.input;
    let data = Dataset::load(manifest, size, ck.model.n_classes())?;
    let mut cfg = ExperimentConfig::micro("eval", manifest, ck.model.fusion.top_k);
    cfg.backbone = ck.model.backbone.clone();
    cfg.fusion = ck.model.fusion.clone();
    let weights = class_weights_for(&cfg, &data)?;
    let mut trainer = Trainer::new(ck.model.clone(), cfg.train, None, weights, &data)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let (probs, loss) = trainer.evaluate(ck.weights(), &all)?;
    let cm = ConfusionMatrix::from_probs(&data.labels(&all), &probs)?;
    let report = metrics(&cm, Some(loss), averaging)?;
    print!("{}", format_table(&[(manifest.display().to_string(), report_cells(&report))]));
    println!("weighted loss {loss:.4}");
    println!("confusion {:?}", cm.counts);
    Ok(())
}

fn heatmap(
    checkpoint: &Path,
    images: &[PathBuf],
    scales: &[usize],
    class: Option<usize>,
    source: CamSource,
    out: &Path,
) -> Result<()> {
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    let model = FpnModel::build(&ck.model, 1)?;
    let [size, _, channels] = ck.model.backbone.input;
    if channels != 1 {
        bail!("heatmaps need a single-channel model, got {channels} channels");
    }
    let scales: Vec<usize> = if scales.is_empty() {
        model.fusion.heads.iter().map(|h| h.0).collect()
    } else {
        scales.to_vec()
    };
    for path in images {
        let img = GrayImage::load(path).with_context(|| path.display().to_string())?;
        let input = preprocess(&img, size);
        let target = match class {
            Some(c) => c,
            None => {
                let p = model.predict(ck.weights(), input.reshape(vec![1, size, size, 1])?, Mode::Infer)?;
                argmax(&p.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>())
            }
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let shown = img.resize(size, size);
        for &s in &scales {
            let h = grad_cam(&model, ck.weights(), &input, target, s, source)?;
            let [over, _] = export_heatmap(&h, &shown, out, stem)?;
            println!("{}", over.display());
        }
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Result<bool> {
    let cases = run_gradient_suite(seed)?;
    let mut worst = 0.0f64;
    for c in &cases {
        println!("{:<28} {:>10.3e}  ({} coordinates)", c.name, c.max_rel_error, c.coordinates);
        worst = worst.max(c.max_rel_error);
    }
    let ok = cases.iter().all(|c| c.passed());
    println!("max relative error {worst:.3e} (tolerance {TOLERANCE:.0e})");
    Ok(ok)
}

fn transfer(checkpoint: &Path, config: &Path, out: &Path, seed: u64) -> Result<()> {
    let source = Checkpoint::<f32>::load(checkpoint)?;
    let target = ExperimentConfig::load(config)?.model();
    let (params, report) = transfer_weights(&source.model, source.weights(), &target, seed)?;
    for name in &report.reinitialized {
        log::info!("re-initialized {name}");
        println!("re-initialized {name}");
    }
    println!("copied {} parameters", report.copied.len());
    Checkpoint::weights_only(target, params).save(out)?;
    println!("checkpoint {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Params { config, top_k } => params(&config, top_k)?,
        Command::Synth { out, n, size, seed } => synth(&out, n, size, seed)?,
        Command::Crossval { config, out, jobs, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let summary = crossval(&cfg, &out, jobs)?;
            print!("{}", summary_table(&summary));
        }
        Command::Train { config, out, fold, overrides } => train(&load_config(&config, &overrides)?, &out, fold)?,
        Command::Eval { checkpoint, manifest, averaging } => {
            let averaging = match averaging {
                AveragingArg::Macro => Averaging::Macro,
                AveragingArg::Micro => Averaging::Micro,
            };
            eval(&checkpoint, &manifest, averaging)?
        }
        Command::Heatmap { checkpoint, images, scales, class, source, out } => {
            let source = match source {
                SourceArg::Head => CamSource::Head,
                SourceArg::Encoder => CamSource::Encoder,
            };
            heatmap(&checkpoint, &images, &scales, class, source, &out)?
        }
        Command::Gradcheck { seed } => {
            if !gradcheck(seed)? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Transfer { checkpoint, config, out, seed } => transfer(&checkpoint, &config, &out, seed)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
