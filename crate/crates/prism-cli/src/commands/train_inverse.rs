//! `train-inverse`: fit the amortized time encoder against a trained field
//! and write its checkpoint plus the loss curve.

use crate::common::{distinct_points, load_checkpoint, load_dataset, CliError, ConfigMap};
use clap::Args;
use prism::inverse::{train_inverse, InverseTrainConfig};
use prism::io::{reproducible_timestamp, save_checkpoint, Checkpoint, TrainProvenance};
use prism::network::{HeadKind, NetArch};
use prism::report::{write_inverse_log, CsvMeta};
use std::path::PathBuf;

#[derive(Args)]
pub struct TrainInverseArgs {
    /// Trained field checkpoint the encoder learns to invert.
    #[arg(long)]
    pub ckpt: PathBuf,

    /// Dataset whose template points define the sampling domain.
    #[arg(long)]
    pub dataset: PathBuf,

    /// Output directory for inverse.pck and inverse_log.csv.
    #[arg(long)]
    pub out_dir: PathBuf,

    /// Training epochs (default 100); each draws a fresh triplet set.
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Seed for initialization and triplet streams (default 0).
    #[arg(long)]
    pub seed: Option<u64>,

    /// key=value file: epochs, seed, lr, batch_size, triplets_per_epoch,
    /// max_steps_per_epoch, hidden_layers, hidden_width, num_frequencies.
    /// Explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(args: TrainInverseArgs) -> Result<(), CliError> {
    let field = load_checkpoint(&args.ckpt)?;
    if field.ckpt.params.arch.head != HeadKind::Field {
        return Err(CliError::Usage(format!(
            "{} holds a {:?}-head model, expected the displacement field",
            args.ckpt.display(),
            field.ckpt.params.arch.head
        )));
    }
    let loaded = load_dataset(&args.dataset)?;
    if loaded.dataset.header.d != field.ckpt.params.arch.d {
        return Err(CliError::Usage(format!(
            "dataset is {}-dimensional but the field expects D = {}",
            loaded.dataset.header.d,
            field.ckpt.params.arch.d
        )));
    }
    let mut cfg = ConfigMap::load(args.config.as_deref())?;

    let d = field.ckpt.params.arch.d;
    let defaults = InverseTrainConfig::defaults(d);
    let arch = NetArch {
        d,
        hidden_layers: cfg.take("hidden_layers")?.unwrap_or(defaults.arch.hidden_layers),
        hidden_width: cfg.take("hidden_width")?.unwrap_or(defaults.arch.hidden_width),
        num_frequencies: cfg.take("num_frequencies")?.unwrap_or(defaults.arch.num_frequencies),
        head: HeadKind::Scalar,
    };
    let inv_cfg = InverseTrainConfig {
        arch,
        t_range: field.ckpt.t_range,
        epochs: args.epochs.or(cfg.take("epochs")?).unwrap_or(defaults.epochs),
        seed: args.seed.or(cfg.take("seed")?).unwrap_or(defaults.seed),
        lr: cfg.take("lr")?.unwrap_or(defaults.lr),
        batch_size: cfg.take("batch_size")?.unwrap_or(defaults.batch_size),
        triplets_per_epoch: cfg
            .take("triplets_per_epoch")?
            .unwrap_or(defaults.triplets_per_epoch),
        max_steps_per_epoch: cfg.take("max_steps_per_epoch")?,
    };
    cfg.finish()?;

    let p_domain = distinct_points(&loaded.dataset.samples);
    if p_domain.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no samples to define the template domain",
            args.dataset.display()
        )));
    }

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("creating {}: {e}", args.out_dir.display())))?;

    log::info!(
        "inverse training over {} template points, {} epochs x {} triplets, seed {}",
        p_domain.len(),
        inv_cfg.epochs,
        inv_cfg.triplets_per_epoch,
        inv_cfg.seed
    );
    let result = train_inverse(&field.ckpt.params, &p_domain, &inv_cfg)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("inverse training failed: {e}")))?;

    // The encoder's training data is synthesized from the field, so the
    // fingerprint of the field's own training set is carried forward —
    // downstream consumers can confirm both models trace to the same data.
    let ckpt = Checkpoint {
        params: result.params,
        train_config: TrainProvenance::Inverse { config: inv_cfg.clone() },
        dataset_fingerprint: field.ckpt.dataset_fingerprint.clone(),
        created_at: reproducible_timestamp(),
        t_range: field.ckpt.t_range,
        lipschitz_mu_t: None,
    };
    let ckpt_path = args.out_dir.join("inverse.pck");
    save_checkpoint(&ckpt_path, &ckpt)?;

    let meta = CsvMeta {
        checkpoint_sha256: Some(prism::io::file_sha256(&ckpt_path)?),
        dataset_sha256: Some(loaded.sha256),
        extra: vec![
            ("field_checkpoint_sha256".into(), field.sha256),
            ("seed".into(), inv_cfg.seed.to_string()),
        ],
    };
    write_inverse_log(&args.out_dir.join("inverse_log.csv"), &meta, &result.log)?;

    let last = result.log.last().expect("at least one epoch");
    log::info!("final epoch {}: loss {:.6}", last.epoch, last.loss);
    println!("{}", ckpt_path.display());
    Ok(())
}
