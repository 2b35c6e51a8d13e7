#![no_main]

use equity_attn::{compose_attention, AttentionInputs};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(inputs) = serde_json::from_slice::<AttentionInputs>(data) else {
        return;
    };
    if inputs.len() > 128 {
        return;
    }
    if let Ok(r) = compose_attention(&inputs) {
        for i in 0..inputs.len() {
            assert!(r.attention.row(i)[i + 1..].iter().all(|a| a.to_bits() == 0));
        }
    }
});
