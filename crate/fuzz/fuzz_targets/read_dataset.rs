//! Fuzz the dataset text format: arbitrary bytes must produce either a
//! parsed dataset or a structured error — never a panic, hang, or
//! unbounded allocation. Accepted inputs must survive a serialize → parse
//! round trip.

#![no_main]

use libfuzzer_sys::fuzz_target;
use prism::io::{dataset_to_vec, read_dataset_from};

fuzz_target!(|data: &[u8]| {
    let Ok(ds) = read_dataset_from(std::io::Cursor::new(data)) else {
        return;
    };
    // Anything the reader accepts must round-trip through the writer.
    let bytes = dataset_to_vec(&ds.header, &ds.samples);
    let back = read_dataset_from(std::io::Cursor::new(&bytes[..])).expect("reread must succeed");
    assert_eq!(back.header, ds.header, "header must survive a round trip");
    assert_eq!(back.samples, ds.samples, "samples must survive a round trip");
});
