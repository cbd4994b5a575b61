//! Discrete-measure CSV parser: must never panic on arbitrary input.
#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(measure) = flowlab::csvio::parse_discrete_measure(text) {
            // accepted input must round-trip
            let echo = flowlab::csvio::write_discrete_measure(&measure);
            let back = flowlab::csvio::parse_discrete_measure(&echo).expect("round trip");
            assert_eq!(back.points(), measure.points());
        }
    }
});
