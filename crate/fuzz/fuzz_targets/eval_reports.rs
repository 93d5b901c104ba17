#![no_main]

use libfuzzer_sys::fuzz_target;
use tabcon::evaluation::{oap, reports_from_json, reports_to_csv, OaPInput};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(reports) = reports_from_json(text) else {
        return;
    };
    let rows: Vec<_> = reports.iter().map(|r| ("x", r)).collect();
    let _ = reports_to_csv(&rows);
    let input = OaPInput {
        ssp_reports: reports.clone(),
        origin_reports: reports,
    };
    if let Ok(v) = oap(&input) {
        assert!(v == 0.0 || v.is_nan());
    }
});
