//! Checkpoint decoder under arbitrary bytes: must never panic, and any
//! input it accepts must re-serialize to exactly the bytes it came from.

#![no_main]

use fewmatch::checkpoint::{read_checkpoint_bytes, write_checkpoint_bytes};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(tensors) = read_checkpoint_bytes(data) {
        let rewritten =
            write_checkpoint_bytes(&tensors).expect("accepted checkpoint must re-serialize");
        assert_eq!(rewritten, data, "checkpoint round-trip is not canonical");
    }
});
