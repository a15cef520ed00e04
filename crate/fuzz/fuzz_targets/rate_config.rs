#![no_main]

use frugal_harness::rate::parse_rate_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = parse_rate_config(text) {
            let _ = cfg.problem();
        }
    }
});
