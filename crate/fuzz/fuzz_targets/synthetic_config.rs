#![no_main]

use libfuzzer_sys::fuzz_target;
use tabcon::data::{generate_synthetic, SyntheticConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    for cfg in [SyntheticConfig::from_toml_str(text), SyntheticConfig::from_json_str(text)]
        .into_iter()
        .flatten()
    {
        if cfg.validate().is_err() || cfg.n > 2000 || cfg.d > 64 || cfg.m > 64 {
            continue;
        }
        let counts = cfg.class_counts();
        assert_eq!(counts.iter().sum::<usize>(), cfg.n);
        let ds = generate_synthetic(&cfg).expect("valid config generates");
        assert_eq!(ds.n(), cfg.n);
    }
});
