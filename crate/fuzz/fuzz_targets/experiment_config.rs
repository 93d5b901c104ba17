#![no_main]

use libfuzzer_sys::fuzz_target;
use tabcon::experiment::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    for cfg in [ExperimentConfig::from_toml_str(text), ExperimentConfig::from_json_str(text)]
        .into_iter()
        .flatten()
    {
        if cfg.validate().is_ok() {
            let m = cfg.manifest();
            assert_eq!(m.config.resolved(), m.config);
        }
    }
});
