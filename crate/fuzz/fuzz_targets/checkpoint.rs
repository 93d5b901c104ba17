#![no_main]

use libfuzzer_sys::fuzz_target;
use tabcon::diff::ParamStore;
use tabcon::encoders::{encode, EncoderParams};

fuzz_target!(|data: &[u8]| {
    if let Ok((meta, store)) = ParamStore::decode(data) {
        let (meta2, store2) = ParamStore::decode(&store.encode(&meta)).expect("re-encode decodes");
        assert_eq!(meta, meta2);
        assert_eq!(store.len(), store2.len());
    }
    if let Ok(params) = EncoderParams::from_bytes(data) {
        if params.config.d_in <= 256 {
            let x = vec![0.5; params.config.d_in];
            let _ = encode(&params, &x);
        }
    }
});
