//! Run-config parser under arbitrary text: must never panic, and any text
//! it accepts must survive a serialize/parse cycle unchanged (serialization
//! is the canonical form, so the cycle must also parse).

#![no_main]

use fewmatch::config::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::parse(text) {
        let canonical = cfg.serialize();
        let reparsed =
            TrainConfig::parse(&canonical).expect("serialized config must parse");
        assert_eq!(reparsed, cfg, "config round-trip drifted");
    }
});
