//! Fuzz the checkpoint binary format: arbitrary bytes must produce either
//! a validated checkpoint or a structured error — never a panic or an
//! allocation driven by unvalidated header fields. Accepted inputs must
//! survive a serialize → parse round trip bit-for-bit.

#![no_main]

use libfuzzer_sys::fuzz_target;
use prism::io::{checkpoint_to_vec, load_checkpoint_from};

fuzz_target!(|data: &[u8]| {
    let Ok(ckpt) = load_checkpoint_from(std::io::Cursor::new(data)) else {
        return;
    };
    let bytes = checkpoint_to_vec(&ckpt);
    let back = load_checkpoint_from(std::io::Cursor::new(&bytes[..])).expect("reread must succeed");
    assert_eq!(back.params.arch, ckpt.params.arch, "architecture must survive a round trip");
    // Weights are opaque bit patterns (NaN payloads included), so compare
    // bits rather than float values.
    let bits = |w: &[f64]| w.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.params.w), bits(&ckpt.params.w), "weights must survive bit-exactly");
    assert_eq!(back.t_range, ckpt.t_range);
    assert_eq!(back.created_at, ckpt.created_at);
    assert_eq!(back.dataset_fingerprint, ckpt.dataset_fingerprint);
});
