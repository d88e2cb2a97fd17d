//! Regression test over the checked-in fuzz corpus.
//!
//! Runs every seed through the same in-memory entry points the fuzz targets
//! use, so `cargo test` exercises the corpus even on toolchains without
//! libFuzzer support. Valid seeds must round-trip byte-for-byte; invalid
//! seeds must produce an error, never a panic.

use std::fs;
use std::io::Cursor;
use std::path::PathBuf;

use prism::io::{
    checkpoint_to_vec, dataset_to_vec, load_checkpoint_from, read_dataset_from,
};

fn corpus_dir(target: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target)
}

fn corpus_files(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = corpus_dir(target);
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("corpus dir {} missing: {e}", dir.display()))
        .map(|entry| {
            let path = entry.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            let bytes = fs::read(&path).unwrap();
            (name, bytes)
        })
        .collect();
    files.sort();
    assert!(!files.is_empty(), "corpus dir {} is empty", dir.display());
    files
}

#[test]
fn dataset_corpus_parses_or_errors_and_valid_seeds_roundtrip() {
    let mut valid = 0usize;
    for (name, bytes) in corpus_files("read_dataset") {
        match read_dataset_from(Cursor::new(bytes.as_slice())) {
            Ok(ds) => {
                valid += 1;
                let re = dataset_to_vec(&ds.header, &ds.samples);
                let ds2 = read_dataset_from(Cursor::new(re.as_slice()))
                    .unwrap_or_else(|e| panic!("{name}: reserialized bytes failed to parse: {e}"));
                assert_eq!(ds.header, ds2.header, "{name}: header changed in round-trip");
                assert_eq!(ds.samples, ds2.samples, "{name}: samples changed in round-trip");
            }
            Err(e) => {
                // Errors are fine for hostile seeds; reaching here without a
                // panic is the property under test.
                let _ = e.to_string();
            }
        }
    }
    assert!(valid >= 2, "expected at least the two valid dataset seeds to parse");
}

#[test]
fn checkpoint_corpus_parses_or_errors_and_valid_seeds_roundtrip() {
    let mut valid = 0usize;
    for (name, bytes) in corpus_files("load_checkpoint") {
        match load_checkpoint_from(Cursor::new(bytes.as_slice())) {
            Ok(ck) => {
                valid += 1;
                let re = checkpoint_to_vec(&ck);
                let ck2 = load_checkpoint_from(Cursor::new(re.as_slice()))
                    .unwrap_or_else(|e| panic!("{name}: reserialized bytes failed to parse: {e}"));
                assert_eq!(ck.params.arch, ck2.params.arch, "{name}: arch changed");
                assert_eq!(ck.t_range, ck2.t_range, "{name}: t_range changed");
                let bits = |w: &[f64]| w.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&ck.params.w), bits(&ck2.params.w), "{name}: weights changed");
            }
            Err(e) => {
                let _ = e.to_string();
            }
        }
    }
    assert!(valid >= 2, "expected at least the two valid checkpoint seeds to parse");
}
