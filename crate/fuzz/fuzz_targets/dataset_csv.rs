#![no_main]

use libfuzzer_sys::fuzz_target;
use tabcon::data::parse_csv;

fuzz_target!(|data: &[u8]| {
    let Ok(ds) = parse_csv(data, "label", None) else {
        return;
    };
    // written values must parse back to the same bits
    let text = ds.to_csv_string("label");
    let back = parse_csv(text.as_bytes(), "label", Some(ds.class_names())).expect("round trip parses");
    assert_eq!(back.labels(), ds.labels());
    for (a, b) in back.feature_rows().iter().zip(ds.feature_rows()) {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(&b));
    }
});
