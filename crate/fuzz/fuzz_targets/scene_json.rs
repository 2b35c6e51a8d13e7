#![no_main]

use equity_attn::Scene;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(scene) = Scene::from_json(text) {
        let again = Scene::from_json(&scene.to_json().unwrap()).unwrap();
        assert_eq!(again, scene);
    }
});
