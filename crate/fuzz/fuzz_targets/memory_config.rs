#![no_main]

use frugal_harness::memory::{parse_memory_config, run_memory};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(mut cfg) = parse_memory_config(text) {
            cfg.measure = false;
            let _ = run_memory(&cfg);
        }
    }
});
