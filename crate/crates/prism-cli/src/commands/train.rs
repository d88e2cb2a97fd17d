//! `train`: fit the displacement field to a dataset and write a checkpoint
//! plus the training curve.

use crate::common::{dataset_t_range, distinct_points, load_dataset, CliError, ConfigMap};
use clap::Args;
use prism::field::{train, TrainConfig};
use prism::fisher::lipschitz_mu_t;
use prism::io::{
    dataset_fingerprint, reproducible_timestamp, save_checkpoint, Checkpoint, TrainProvenance,
};
use prism::network::{HeadKind, NetArch};
use prism::report::{write_training_log, CsvMeta};
use std::path::PathBuf;

#[derive(Args)]
pub struct TrainArgs {
    /// Training dataset (.psd).
    #[arg(long)]
    pub dataset: PathBuf,

    /// Output directory for field.pck and training_log.csv.
    #[arg(long)]
    pub out_dir: PathBuf,

    /// Total epochs (default 200).
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Stage-1 warm-up epochs (default 10).
    #[arg(long)]
    pub warm_epochs: Option<usize>,

    /// Initialization and batching seed (default 0).
    #[arg(long)]
    pub seed: Option<u64>,

    /// key=value file: epochs, warm_epochs, seed, lr, batch_size,
    /// lambda_l1, lambda_nll, grad_clip, max_steps_per_epoch,
    /// hidden_layers, hidden_width, num_frequencies. Explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(args: TrainArgs) -> Result<(), CliError> {
    let loaded = load_dataset(&args.dataset)?;
    let ds = &loaded.dataset;
    let mut cfg = ConfigMap::load(args.config.as_deref())?;

    let defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        epochs: args.epochs.or(cfg.take("epochs")?).unwrap_or(defaults.epochs),
        t_warm: args.warm_epochs.or(cfg.take("warm_epochs")?).unwrap_or(defaults.t_warm),
        seed: args.seed.or(cfg.take("seed")?).unwrap_or(defaults.seed),
        lr: cfg.take("lr")?.unwrap_or(defaults.lr),
        batch_size: cfg.take("batch_size")?.unwrap_or(defaults.batch_size),
        lambda_l1: cfg.take("lambda_l1")?.unwrap_or(defaults.lambda_l1),
        lambda_nll: cfg.take("lambda_nll")?.unwrap_or(defaults.lambda_nll),
        grad_clip: match cfg.take::<String>("grad_clip")? {
            None => defaults.grad_clip,
            Some(s) if s == "none" => None,
            Some(s) => Some(s.parse().map_err(|e| {
                CliError::Usage(format!("grad_clip: cannot parse {s:?}: {e}"))
            })?),
        },
        max_steps_per_epoch: cfg.take("max_steps_per_epoch")?,
    };
    let arch = NetArch {
        d: ds.header.d,
        hidden_layers: cfg.take("hidden_layers")?.unwrap_or(4),
        hidden_width: cfg.take("hidden_width")?.unwrap_or(128),
        num_frequencies: cfg.take("num_frequencies")?.unwrap_or(4),
        head: HeadKind::Field,
    };
    cfg.finish()?;

    if train_cfg.t_warm > train_cfg.epochs {
        return Err(CliError::Usage(format!(
            "warm-up epochs {} exceed total epochs {}",
            train_cfg.t_warm, train_cfg.epochs
        )));
    }

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("creating {}: {e}", args.out_dir.display())))?;

    log::info!(
        "training {} samples, {} hidden x {}, {} epochs ({} warm), seed {}",
        ds.samples.len(),
        arch.hidden_layers,
        arch.hidden_width,
        train_cfg.epochs,
        train_cfg.t_warm,
        train_cfg.seed
    );
    let result = train(&ds.samples, arch, &train_cfg)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("training failed: {e}")))?;

    // Empirical smoothness bound of the learned mean over the data domain,
    // recorded in the checkpoint so consumers can sanity-check evaluations.
    let t_range = dataset_t_range(ds);
    let points = distinct_points(&ds.samples);
    let point_refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
    let t_grid: Vec<f64> = (0..=20)
        .map(|i| t_range.0 + (t_range.1 - t_range.0) * i as f64 / 20.0)
        .collect();
    let lipschitz = lipschitz_mu_t(&result.params, &point_refs, &t_grid)?;

    let ckpt = Checkpoint {
        params: result.params,
        train_config: TrainProvenance::Field { config: train_cfg },
        dataset_fingerprint: dataset_fingerprint(&ds.samples),
        created_at: reproducible_timestamp(),
        t_range,
        lipschitz_mu_t: Some(lipschitz),
    };
    let ckpt_path = args.out_dir.join("field.pck");
    save_checkpoint(&ckpt_path, &ckpt)?;

    let meta = CsvMeta {
        checkpoint_sha256: Some(prism::io::file_sha256(&ckpt_path)?),
        dataset_sha256: Some(loaded.sha256),
        extra: vec![("seed".into(), ckpt_seed_string(&ckpt))],
    };
    write_training_log(&args.out_dir.join("training_log.csv"), &meta, &result.log)?;

    let last = result.log.last().expect("at least one epoch");
    log::info!(
        "final epoch {}: l1 {:.6}, nll {:.6}; smoothness bound {lipschitz:.3}",
        last.epoch,
        last.l1,
        last.nll
    );
    println!("{}", ckpt_path.display());
    Ok(())
}

fn ckpt_seed_string(ckpt: &Checkpoint) -> String {
    match &ckpt.train_config {
        TrainProvenance::Field { config } => config.seed.to_string(),
        TrainProvenance::Inverse { config } => config.seed.to_string(),
    }
}
