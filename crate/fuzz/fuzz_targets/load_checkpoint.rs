//! Binary checkpoint loader: must never panic or over-allocate on
//! arbitrary bytes.
#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(net) = flowlab::nn::Mlp::from_bytes(data) {
        // accepted checkpoints must serialize back to identical bytes
        assert_eq!(net.to_bytes(), data);
    }
});
