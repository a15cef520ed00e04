#![no_main]

use frugal_harness::config::parse_run_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = parse_run_config(text) {
            // A config that parses must also build its problem.
            cfg.validate().expect("parsed config failed validation");
        }
    }
});
