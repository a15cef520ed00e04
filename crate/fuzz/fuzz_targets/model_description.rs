#![no_main]

use frugal_harness::config::parse_model_description;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_model_description(text);
    }
});
