//! `ccam`: generate synthetic co-occurrence-biased datasets, train the
//! counterfactual CAM model, adapt it at test time, and evaluate
//! localization quality.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or data error,
//! 4 numerical divergence, 5 checkpoint error, 6 checkpoint/dataset
//! mismatch.

use ccam_core::adapt::adapt;
use ccam_core::checkpoint::{self, FLAG_ADAPTED};
use ccam_core::config::Config;
use ccam_core::counterfactual::train;
use ccam_core::dataset::{generate_split, load_dataset, load_split_images, read_manifest, Split};
use ccam_core::error::Error;
use ccam_core::eval::{dump_cam, eval_image, evaluate, extract_bbox};
use ccam_core::model::ModelParams;
use ccam_core::tensor::Tensor;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "ccam", about = "counterfactual CAM pipeline on synthetic biased scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train (biased) and test (uniform) splits.
    GenData {
        /// key = value configuration file
        #[arg(long)]
        config: PathBuf,
        /// output dataset directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from scratch on the train split.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// dataset directory produced by gen-data
        #[arg(long)]
        data: PathBuf,
        /// checkpoint file to write
        #[arg(long)]
        out_ckpt: PathBuf,
        /// drop the counterfactual grid term from the objective
        #[arg(long)]
        no_counterfactual: bool,
        /// drop the decoupled feature term from the objective
        #[arg(long)]
        no_decouple: bool,
    },
    /// Test-time adaptation on the unlabeled test split.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// trained checkpoint to adapt
        #[arg(long)]
        in_ckpt: PathBuf,
        /// adapted checkpoint to write
        #[arg(long)]
        out_ckpt: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// directory for metrics.csv and per_image.csv
        #[arg(long)]
        out: PathBuf,
        /// also write cams/<id>.pgm and overlays/<id>.ppm under this directory
        #[arg(long)]
        dump_cams: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Data(_) => 3,
        Error::Divergence(_) => 4,
        Error::Checkpoint(_) => 5,
        Error::Mismatch(_) => 6,
        Error::Shape(_) | Error::Graph(_) => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out } => cmd_gen_data(&config, &out),
        Command::Train {
            config,
            data,
            out_ckpt,
            no_counterfactual,
            no_decouple,
        } => cmd_train(&config, &data, &out_ckpt, no_counterfactual, no_decouple),
        Command::Adapt {
            config,
            data,
            in_ckpt,
            out_ckpt,
        } => cmd_adapt(&config, &data, &in_ckpt, &out_ckpt),
        Command::Eval {
            config,
            data,
            ckpt,
            out,
            dump_cams,
        } => cmd_eval(&config, &data, &ckpt, &out, dump_cams.as_deref()),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn cmd_gen_data(config: &Path, out: &Path) -> Result<(), Error> {
    let cfg = Config::from_file(config)?;
    let manifest = generate_split(&cfg.gen_config(), out)?;
    println!(
        "wrote {} scenes to {} ({} train, {} test, {} fg x {} bg classes, bias {})",
        manifest.rows.len(),
        out.display(),
        manifest.count(Split::Train),
        manifest.count(Split::Test),
        cfg.num_fg_classes,
        cfg.num_bg_classes,
        cfg.cooc_bias,
    );
    Ok(())
}

fn cmd_train(
    config: &Path,
    data: &Path,
    out_ckpt: &Path,
    no_counterfactual: bool,
    no_decouple: bool,
) -> Result<(), Error> {
    let cfg = Config::from_file(config)?;
    let mut tcfg = cfg.train_config();
    if no_counterfactual {
        tcfg.use_counterfactual = false;
    }
    if no_decouple {
        tcfg.use_decouple = false;
    }
    let ds = load_dataset(data)?;
    let log_path = log_sibling(out_ckpt, "train_log.csv");
    let out = train(&ds.train, cfg.num_fg_classes, &tcfg, Some(&log_path))?;
    save_params(out_ckpt, &out.params, 0)?;
    println!(
        "trained {} epochs (final loss {:.4}, train acc {:.4}); checkpoint at {}",
        out.epochs.len(),
        out.epochs.last().map(|e| e.mean_loss).unwrap_or(f32::NAN),
        out.epochs.last().map(|e| e.train_acc).unwrap_or(f32::NAN),
        out_ckpt.display()
    );
    Ok(())
}

fn cmd_adapt(config: &Path, data: &Path, in_ckpt: &Path, out_ckpt: &Path) -> Result<(), Error> {
    let cfg = Config::from_file(config)?;
    let ck = checkpoint::load(in_ckpt)?;
    let params = ModelParams::from_checkpoint(&ck)?;
    // Label-free path: only ids and the split column are read here.
    let images: Vec<Tensor> = load_split_images(data, Split::Test)?
        .into_iter()
        .map(|(_, img)| img)
        .collect();
    let log_path = log_sibling(out_ckpt, "adapt_log.csv");
    let out = adapt(&images, &params, &cfg.adapt_config(), Some(&log_path))?;
    save_params(out_ckpt, &out.params, FLAG_ADAPTED)?;
    println!(
        "adapted over {} batches (final loss {:.4}); checkpoint at {}",
        out.batches.len(),
        out.batches.last().map(|b| b.loss).unwrap_or(f32::NAN),
        out_ckpt.display()
    );
    Ok(())
}

fn cmd_eval(
    config: &Path,
    data: &Path,
    ckpt: &Path,
    out: &Path,
    dump: Option<&Path>,
) -> Result<(), Error> {
    let cfg = Config::from_file(config)?;
    let ck = checkpoint::load(ckpt)?;
    let params = ModelParams::from_checkpoint(&ck)?;

    // Class-count gate before any heavy work.
    let manifest = read_manifest(data)?;
    let dataset_classes = manifest
        .rows
        .iter()
        .map(|r| r.fg_class + 1)
        .max()
        .unwrap_or(0);
    if dataset_classes != params.n_classes {
        return Err(Error::Mismatch(format!(
            "checkpoint has {} classes but the dataset uses {dataset_classes}",
            params.n_classes
        )));
    }

    let ds = load_dataset(data)?;
    let ecfg = cfg.eval_config();
    let report = evaluate(&ds.test, &params, &ecfg)?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join("metrics.csv");
    std::fs::write(&metrics_path, report.metrics_csv()).map_err(|e| Error::io(&metrics_path, e))?;
    let per_image_path = out.join("per_image.csv");
    std::fs::write(&per_image_path, report.per_image_csv())
        .map_err(|e| Error::io(&per_image_path, e))?;

    if let Some(dir) = dump {
        let mut scratch = params.clone();
        let mut order: Vec<usize> = (0..ds.test.len()).collect();
        order.sort_by(|&a, &b| ds.test[a].id.cmp(&ds.test[b].id));
        for &i in &order {
            let scene = &ds.test[i];
            let ev = eval_image(&mut scratch, &scene.image, &ecfg)?;
            let pred_box = extract_bbox(&ev.map.norm, ecfg.seg_threshold);
            dump_cam(dir, scene, &ev.map.norm, &pred_box)?;
        }
    }

    println!("metric               value");
    for (name, value) in report.metric_rows() {
        println!("{name:<20} {value:.4}");
    }
    println!("({} test images; outputs in {})", ds.test.len(), out.display());
    Ok(())
}

fn log_sibling(ckpt: &Path, name: &str) -> PathBuf {
    match ckpt.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(name),
        _ => PathBuf::from(name),
    }
}

fn save_params(path: &Path, params: &ModelParams, flags: u32) -> Result<(), Error> {
    let tensors = params.checkpoint_tensors();
    let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    checkpoint::save(path, &refs, flags)
}
