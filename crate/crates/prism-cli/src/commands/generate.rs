//! `generate`: write a synthetic star-shape dataset to a `.psd` file.

use crate::common::{CliError, ConfigMap};
use clap::Args;
use prism::io::{write_dataset, DatasetHeader};
use prism::starman::{generate, Split, StarmanConfig, Variant};
use std::path::PathBuf;

#[derive(Args)]
pub struct GenerateArgs {
    /// Time-signal variant: G (one shared intrinsic time) or L (arms and
    /// legs follow separate schedules).
    #[arg(long)]
    pub variant: String,

    /// Generation seed; the same seed always writes identical bytes.
    /// Defaults to the config file's `seed`, then 0.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Output file path.
    #[arg(long)]
    pub out: PathBuf,

    /// Which split to write: train or test (disjoint subject ids).
    #[arg(long, default_value = "train")]
    pub split: String,

    /// key=value file overriding generator settings: n_train_subjects,
    /// n_test_subjects, n_vertices, rbf_sigma, min_obs, max_obs.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(args: GenerateArgs) -> Result<(), CliError> {
    let variant = match args.variant.as_str() {
        "G" | "g" => Variant::Global,
        "L" | "l" => Variant::Local,
        other => {
            return Err(CliError::Usage(format!("unknown variant {other:?}, expected G or L")))
        }
    };
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => {
            return Err(CliError::Usage(format!("unknown split {other:?}, expected train|test")))
        }
    };

    let mut base = match variant {
        Variant::Global => StarmanConfig::global(),
        Variant::Local => StarmanConfig::local(),
    };
    let mut cfg = ConfigMap::load(args.config.as_deref())?;
    if let Some(v) = cfg.take("n_train_subjects")? {
        base.n_train_subjects = v;
    }
    if let Some(v) = cfg.take("n_test_subjects")? {
        base.n_test_subjects = v;
    }
    if let Some(v) = cfg.take("n_vertices")? {
        base.n_vertices = v;
    }
    if let Some(v) = cfg.take("rbf_sigma")? {
        base.rbf_sigma = v;
    }
    if let Some(v) = cfg.take("min_obs")? {
        base.min_obs = v;
    }
    if let Some(v) = cfg.take("max_obs")? {
        base.max_obs = v;
    }
    let seed = args.seed.or(cfg.take("seed")?).unwrap_or(0);
    cfg.finish()?;

    let generated = generate(&base, split, seed);
    let header = DatasetHeader::starman(&base, split, seed);
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Runtime(anyhow::anyhow!("creating {}: {e}", parent.display())))?;
    }
    write_dataset(&args.out, &header, &generated.samples)?;
    log::info!(
        "wrote {} ({} subjects, {} samples)",
        args.out.display(),
        generated.subjects.len(),
        generated.samples.len()
    );
    println!("{}", args.out.display());
    Ok(())
}
