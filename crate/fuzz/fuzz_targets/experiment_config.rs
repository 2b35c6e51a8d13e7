#![no_main]

use equity_attn::experiment::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = ExperimentConfig::from_json(text) {
        // anything that validates must survive a round trip
        let again = serde_json::to_string(&config).unwrap();
        assert_eq!(ExperimentConfig::from_json(&again).unwrap(), config);
    }
});
