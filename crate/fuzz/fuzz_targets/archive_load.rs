//! Clip-archive decoder under arbitrary bytes: must never panic, and any
//! input it accepts must re-serialize to exactly the bytes it came from
//! (the reader admits only canonical encodings).

#![no_main]

use fewmatch::archive::{read_archive_bytes, write_archive_bytes};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(clips) = read_archive_bytes(data) {
        let rewritten =
            write_archive_bytes(&clips).expect("accepted archive must re-serialize");
        assert_eq!(rewritten, data, "archive round-trip is not canonical");
    }
});
