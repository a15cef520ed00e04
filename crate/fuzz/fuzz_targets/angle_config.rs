#![no_main]

use frugal_harness::angles::parse_angle_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = parse_angle_config(text) {
            let _ = cfg.stream_length();
        }
    }
});
