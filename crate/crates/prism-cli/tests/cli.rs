//! End-to-end tests of the `prism` binary: exit codes, artifact
//! determinism, and the full generate → train → analyze pipeline at toy
//! sizes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_prism"));
    cmd.env("PRISM_LOG", "error");
    // Pin the checkpoint timestamp so repeated runs are byte-comparable.
    cmd.env("SOURCE_DATE_EPOCH", "1700000000");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should spawn")
}

fn assert_code(out: &Output, code: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{what}: expected exit {code}, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

const GEN_CFG: &str = "n_train_subjects = 10\nn_test_subjects = 5\nn_vertices = 40\n";
const TRAIN_CFG: &str = "hidden_layers = 2\nhidden_width = 16\nnum_frequencies = 3\n\
                         batch_size = 128\nmax_steps_per_epoch = 30\n";
const INV_CFG: &str = "hidden_layers = 2\nhidden_width = 16\nnum_frequencies = 3\n\
                       epochs = 3\ntriplets_per_epoch = 2000\n";

#[test]
fn help_and_version_exit_zero() {
    assert_code(&run(&["--help"]), 0, "--help");
    assert_code(&run(&["--version"]), 0, "--version");
    assert_code(&run(&["generate", "--help"]), 0, "generate --help");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.psd");
    assert_code(&run(&["no-such-command"]), 1, "unknown subcommand");
    assert_code(&run(&["generate"]), 1, "missing required flags");
    assert_code(
        &run(&["generate", "--variant", "Q", "--out", out.to_str().unwrap()]),
        1,
        "unknown variant",
    );
    assert_code(
        &run(&[
            "generate",
            "--variant",
            "G",
            "--split",
            "validation",
            "--out",
            out.to_str().unwrap(),
        ]),
        1,
        "unknown split",
    );
    assert_code(
        &run(&["--threads", "0", "generate", "--variant", "G", "--out", out.to_str().unwrap()]),
        1,
        "zero threads",
    );

    // Unknown config keys must be rejected, not ignored.
    let cfg = write_config(dir.path(), "bad.cfg", "n_train_subjects = 4\nn_verts = 40\n");
    assert_code(
        &run(&[
            "generate",
            "--variant",
            "G",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]),
        1,
        "unknown config key",
    );
}

#[test]
fn runtime_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    assert_code(
        &run(&[
            "train",
            "--dataset",
            "/nonexistent/data.psd",
            "--out-dir",
            dir.path().to_str().unwrap(),
        ]),
        3,
        "missing dataset",
    );

    // A dataset that is not a dataset at all.
    let junk = dir.path().join("junk.psd");
    std::fs::write(&junk, b"this is not a dataset\n").unwrap();
    assert_code(
        &run(&[
            "train",
            "--dataset",
            junk.to_str().unwrap(),
            "--out-dir",
            dir.path().to_str().unwrap(),
        ]),
        3,
        "corrupt dataset",
    );
}

#[test]
fn generation_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "gen.cfg", GEN_CFG);
    let a = dir.path().join("a.psd");
    let b = dir.path().join("b.psd");
    for out in [&a, &b] {
        assert_code(
            &run(&[
                "generate",
                "--variant",
                "G",
                "--seed",
                "7",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]),
            0,
            "generate",
        );
    }
    let bytes_a = std::fs::read(&a).unwrap();
    let bytes_b = std::fs::read(&b).unwrap();
    assert!(!bytes_a.is_empty());
    assert_eq!(bytes_a, bytes_b, "same seed and config must give identical files");

    // A different seed must change the bytes.
    let c = dir.path().join("c.psd");
    assert_code(
        &run(&[
            "generate",
            "--variant",
            "G",
            "--seed",
            "8",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            c.to_str().unwrap(),
        ]),
        0,
        "generate seed 8",
    );
    assert_ne!(bytes_a, std::fs::read(&c).unwrap(), "seed must matter");
}

#[test]
fn flags_override_config_values() {
    let dir = tempfile::tempdir().unwrap();
    // Config asks for seed 1; the explicit flag must win, making the file
    // equal to a flag-only seed-7 run.
    let cfg = write_config(dir.path(), "gen.cfg", &format!("{GEN_CFG}seed = 1\n"));
    let with_override = dir.path().join("o.psd");
    assert_code(
        &run(&[
            "generate",
            "--variant",
            "G",
            "--seed",
            "7",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            with_override.to_str().unwrap(),
        ]),
        0,
        "generate with override",
    );
    let plain_cfg = write_config(dir.path(), "plain.cfg", GEN_CFG);
    let plain = dir.path().join("p.psd");
    assert_code(
        &run(&[
            "generate",
            "--variant",
            "G",
            "--seed",
            "7",
            "--config",
            plain_cfg.to_str().unwrap(),
            "--out",
            plain.to_str().unwrap(),
        ]),
        0,
        "generate plain",
    );
    assert_eq!(
        std::fs::read(&with_override).unwrap(),
        std::fs::read(&plain).unwrap(),
        "--seed must override the config file's seed"
    );
}

/// Commands must not modify their input files.
fn hash(path: &Path) -> String {
    prism::io::file_sha256(path).unwrap()
}

#[test]
fn full_pipeline_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let gen_cfg = write_config(root, "gen.cfg", GEN_CFG);
    let train_cfg = write_config(root, "train.cfg", TRAIN_CFG);
    let inv_cfg = write_config(root, "inv.cfg", INV_CFG);
    let train_psd = root.join("train.psd");
    let test_psd = root.join("test.psd");

    for (split, path) in [("train", &train_psd), ("test", &test_psd)] {
        assert_code(
            &run(&[
                "generate",
                "--variant",
                "L",
                "--seed",
                "3",
                "--split",
                split,
                "--config",
                gen_cfg.to_str().unwrap(),
                "--out",
                path.to_str().unwrap(),
            ]),
            0,
            "generate",
        );
    }
    let train_hash = hash(&train_psd);
    let test_hash = hash(&test_psd);

    let model_dir = root.join("model");
    assert_code(
        &run(&[
            "--threads",
            "2",
            "train",
            "--dataset",
            train_psd.to_str().unwrap(),
            "--out-dir",
            model_dir.to_str().unwrap(),
            "--epochs",
            "4",
            "--warm-epochs",
            "1",
            "--seed",
            "5",
            "--config",
            train_cfg.to_str().unwrap(),
        ]),
        0,
        "train",
    );
    let field = model_dir.join("field.pck");
    assert!(field.is_file(), "train must write field.pck");
    assert!(model_dir.join("training_log.csv").is_file(), "train must write its log");

    assert_code(
        &run(&[
            "train-inverse",
            "--ckpt",
            field.to_str().unwrap(),
            "--dataset",
            train_psd.to_str().unwrap(),
            "--out-dir",
            model_dir.to_str().unwrap(),
            "--seed",
            "6",
            "--config",
            inv_cfg.to_str().unwrap(),
        ]),
        0,
        "train-inverse",
    );
    let inverse = model_dir.join("inverse.pck");
    assert!(inverse.is_file(), "train-inverse must write inverse.pck");

    // Swapped checkpoints are a usage error, not a crash.
    assert_code(
        &run(&[
            "infer-time",
            "--ckpt",
            inverse.to_str().unwrap(),
            "--inverse-ckpt",
            field.to_str().unwrap(),
            "--dataset",
            test_psd.to_str().unwrap(),
            "--out-dir",
            root.join("swapped").to_str().unwrap(),
        ]),
        1,
        "swapped checkpoints",
    );

    let infer_dir = root.join("infer");
    assert_code(
        &run(&[
            "infer-time",
            "--ckpt",
            field.to_str().unwrap(),
            "--inverse-ckpt",
            inverse.to_str().unwrap(),
            "--dataset",
            test_psd.to_str().unwrap(),
            "--out-dir",
            infer_dir.to_str().unwrap(),
        ]),
        0,
        "infer-time",
    );
    for f in ["estimates.csv", "metrics.csv"] {
        let text = std::fs::read_to_string(infer_dir.join(f)).unwrap();
        assert!(
            text.starts_with("# checkpoint_sha256="),
            "{f} must open with the checkpoint hash"
        );
        assert!(text.contains("# dataset_sha256="), "{f} must carry the dataset hash");
    }

    let pred_dir = root.join("pred");
    assert_code(
        &run(&[
            "predict",
            "--ckpt",
            field.to_str().unwrap(),
            "--inverse-ckpt",
            inverse.to_str().unwrap(),
            "--dataset",
            test_psd.to_str().unwrap(),
            "--out-dir",
            pred_dir.to_str().unwrap(),
        ]),
        0,
        "predict",
    );
    assert!(pred_dir.join("predictions.csv").is_file());
    assert!(pred_dir.join("summary.csv").is_file());

    // Anchored prediction at explicit times.
    let pred_t_dir = root.join("pred_t");
    assert_code(
        &run(&[
            "predict",
            "--ckpt",
            field.to_str().unwrap(),
            "--inverse-ckpt",
            inverse.to_str().unwrap(),
            "--dataset",
            test_psd.to_str().unwrap(),
            "--out-dir",
            pred_t_dir.to_str().unwrap(),
            "--t0",
            "0.2",
            "--t1",
            "0.8",
        ]),
        0,
        "predict --t0 --t1",
    );
    // --t0 without --t1 is a usage error.
    assert_code(
        &run(&[
            "predict",
            "--ckpt",
            field.to_str().unwrap(),
            "--inverse-ckpt",
            inverse.to_str().unwrap(),
            "--dataset",
            test_psd.to_str().unwrap(),
            "--out-dir",
            pred_t_dir.to_str().unwrap(),
            "--t0",
            "0.2",
        ]),
        1,
        "predict --t0 only",
    );

    let ood_dir = root.join("ood");
    let out = bin()
        .args([
            "ood",
            "--ckpt",
            field.to_str().unwrap(),
            "--inverse-ckpt",
            inverse.to_str().unwrap(),
            "--dataset",
            test_psd.to_str().unwrap(),
            "--out-dir",
            ood_dir.to_str().unwrap(),
            "--lag",
            "0.3",
        ])
        .output()
        .unwrap();
    assert_code(&out, 0, "ood");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("auc="), "ood must print the AUC, got: {stdout}");
    assert!(ood_dir.join("scores.csv").is_file());
    assert!(ood_dir.join("ood_metrics.csv").is_file());

    let fisher_dir = root.join("fisher");
    assert_code(
        &run(&[
            "validate-fisher",
            "--ckpt",
            field.to_str().unwrap(),
            "--dataset",
            test_psd.to_str().unwrap(),
            "--out-dir",
            fisher_dir.to_str().unwrap(),
            "--grid",
            "2",
            "--mc-samples",
            "20000",
            "--seed",
            "1",
        ]),
        0,
        "validate-fisher",
    );
    assert!(fisher_dir.join("fisher_grid.csv").is_file());
    assert!(fisher_dir.join("validation.csv").is_file());

    let report_dir = root.join("report");
    assert_code(
        &run(&[
            "report",
            "--ckpt",
            field.to_str().unwrap(),
            "--inverse-ckpt",
            inverse.to_str().unwrap(),
            "--dataset",
            test_psd.to_str().unwrap(),
            "--out-dir",
            report_dir.to_str().unwrap(),
        ]),
        0,
        "report",
    );
    for f in ["table2.csv", "table3.csv", "table4.csv", "fig3.svg", "fig4.svg"] {
        assert!(report_dir.join(f).is_file(), "report must write {f}");
    }
    let svg = std::fs::read_to_string(report_dir.join("fig3.svg")).unwrap();
    assert!(svg.starts_with("<svg "), "figures must be standalone SVG documents");

    // A field-only report still writes all five files.
    let bare_dir = root.join("report_bare");
    assert_code(
        &run(&[
            "report",
            "--ckpt",
            field.to_str().unwrap(),
            "--dataset",
            test_psd.to_str().unwrap(),
            "--out-dir",
            bare_dir.to_str().unwrap(),
        ]),
        0,
        "report without encoder",
    );
    for f in ["table2.csv", "table3.csv", "table4.csv", "fig3.svg", "fig4.svg"] {
        assert!(bare_dir.join(f).is_file(), "field-only report must still write {f}");
    }

    // No command may have modified its inputs.
    assert_eq!(hash(&train_psd), train_hash, "inputs must stay untouched");
    assert_eq!(hash(&test_psd), test_hash, "inputs must stay untouched");
}

#[test]
fn training_is_deterministic_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let gen_cfg = write_config(root, "gen.cfg", GEN_CFG);
    let train_cfg = write_config(root, "train.cfg", TRAIN_CFG);
    let data = root.join("train.psd");
    assert_code(
        &run(&[
            "generate",
            "--variant",
            "G",
            "--seed",
            "2",
            "--config",
            gen_cfg.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
        ]),
        0,
        "generate",
    );
    let mut hashes = Vec::new();
    for sub in ["m1", "m2"] {
        let out_dir = root.join(sub);
        assert_code(
            &run(&[
                "train",
                "--dataset",
                data.to_str().unwrap(),
                "--out-dir",
                out_dir.to_str().unwrap(),
                "--epochs",
                "3",
                "--warm-epochs",
                "1",
                "--seed",
                "9",
                "--config",
                train_cfg.to_str().unwrap(),
            ]),
            0,
            "train",
        );
        hashes.push(hash(&out_dir.join("field.pck")));
    }
    assert_eq!(hashes[0], hashes[1], "same data and seed must give identical checkpoints");
}

#[test]
fn ood_requires_synthetic_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // Build a tiny external-provenance dataset through the library.
    let header = prism::io::DatasetHeader {
        magic: "PSD".to_string(),
        format_version: 1,
        d: 2,
        time_unit: "normalized".to_string(),
        seed: None,
        provenance: prism::io::Provenance::External { description: "handmade".to_string() },
    };
    let samples = vec![
        prism::field::ShapeSample {
            subject_id: 0,
            t: 0.4,
            p: vec![0.1, 0.2],
            d: vec![0.0, 0.0],
            tau_gt: None,
            limb: None,
        },
        prism::field::ShapeSample {
            subject_id: 0,
            t: 0.6,
            p: vec![0.3, 0.4],
            d: vec![0.0, 0.0],
            tau_gt: None,
            limb: None,
        },
    ];
    let data = root.join("ext.psd");
    prism::io::write_dataset(&data, &header, &samples).unwrap();

    // Any checkpoints will do for the provenance check; reuse tiny ones.
    let gen_cfg = write_config(root, "gen.cfg", GEN_CFG);
    let train_cfg = write_config(root, "train.cfg", TRAIN_CFG);
    let inv_cfg = write_config(root, "inv.cfg", INV_CFG);
    let train_psd = root.join("train.psd");
    assert_code(
        &run(&[
            "generate",
            "--variant",
            "G",
            "--seed",
            "1",
            "--config",
            gen_cfg.to_str().unwrap(),
            "--out",
            train_psd.to_str().unwrap(),
        ]),
        0,
        "generate",
    );
    let model_dir = root.join("model");
    assert_code(
        &run(&[
            "train",
            "--dataset",
            train_psd.to_str().unwrap(),
            "--out-dir",
            model_dir.to_str().unwrap(),
            "--epochs",
            "2",
            "--warm-epochs",
            "1",
            "--config",
            train_cfg.to_str().unwrap(),
        ]),
        0,
        "train",
    );
    assert_code(
        &run(&[
            "train-inverse",
            "--ckpt",
            model_dir.join("field.pck").to_str().unwrap(),
            "--dataset",
            train_psd.to_str().unwrap(),
            "--out-dir",
            model_dir.to_str().unwrap(),
            "--config",
            inv_cfg.to_str().unwrap(),
        ]),
        0,
        "train-inverse",
    );
    assert_code(
        &run(&[
            "ood",
            "--ckpt",
            model_dir.join("field.pck").to_str().unwrap(),
            "--inverse-ckpt",
            model_dir.join("inverse.pck").to_str().unwrap(),
            "--dataset",
            data.to_str().unwrap(),
            "--out-dir",
            root.join("ood").to_str().unwrap(),
        ]),
        1,
        "ood on external data",
    );
}
