#![no_main]

use frugal_harness::config::parse_json;
use frugal_harness::toy::ToyConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = parse_json::<ToyConfig>(text, "toy config") {
            let _ = cfg.validate();
        }
    }
});
