#![no_main]

use libfuzzer_sys::fuzz_target;
use tabcon::downstream::TrainedClassifier;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(model) = TrainedClassifier::from_json(text) else {
        return;
    };
    if model.dim <= 256 {
        let _ = model.predict(&vec![0.0; model.dim]);
    }
});
