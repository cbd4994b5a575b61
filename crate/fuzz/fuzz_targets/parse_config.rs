//! key = value config parser plus typed extraction: must never panic.
#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(raw) = flowlab::config::parse_kv(text) {
            let _ = flowlab::config::train_config_from_raw(raw);
        }
    }
});
