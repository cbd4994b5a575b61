//! Discrete-plan CSV parser: must never panic on arbitrary input.
#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(plan) = flowlab::csvio::parse_discrete_plan(text) {
            let echo = flowlab::csvio::write_discrete_plan(&plan);
            let back = flowlab::csvio::parse_discrete_plan(&echo).expect("round trip");
            assert_eq!(back.len(), plan.len());
        }
    }
});
