use std::fs;
use std::path::PathBuf;

use tabcon::data::{parse_csv, SyntheticConfig};
use tabcon::downstream::TrainedClassifier;
use tabcon::encoders::{encode, EncoderParams};
use tabcon::evaluation::reports_from_json;
use tabcon::experiment::ExperimentConfig;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).unwrap()
}

#[test]
fn csv_seeds() {
    for (name, bytes) in seeds("dataset_csv") {
        let parsed = parse_csv(bytes.as_slice(), "label", None);
        assert_eq!(parsed.is_ok(), name != "nonfinite.csv", "{name}");
    }
}

#[test]
fn checkpoint_seeds_decode_and_encode() {
    for (name, bytes) in seeds("checkpoint") {
        let params = EncoderParams::from_bytes(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        let z = encode(&params, &vec![0.1; params.config.d_in]).unwrap();
        assert_eq!(z.len(), params.config.d_out, "{name}");
        assert!(
            EncoderParams::from_bytes(&bytes[..bytes.len() - 1]).is_err(),
            "{name} truncated"
        );
    }
}

#[test]
fn config_seeds_validate() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/experiment_config");
    for (name, _) in seeds("experiment_config") {
        // load() also accepts a manifest
        let cfg = ExperimentConfig::load(dir.join(&name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        cfg.validate().unwrap();
    }
    for (name, bytes) in seeds("synthetic_config") {
        let cfg = if name.ends_with(".toml") {
            SyntheticConfig::from_toml_str(text(&bytes))
        } else {
            SyntheticConfig::from_json_str(text(&bytes))
        };
        cfg.unwrap_or_else(|e| panic!("{name}: {e}"))
            .validate()
            .unwrap();
    }
}

#[test]
fn report_and_model_seeds() {
    for (name, bytes) in seeds("eval_reports") {
        assert!(
            !reports_from_json(text(&bytes)).unwrap().is_empty(),
            "{name}"
        );
    }
    for (name, bytes) in seeds("classifier_json") {
        let model =
            TrainedClassifier::from_json(text(&bytes)).unwrap_or_else(|e| panic!("{name}: {e}"));
        let p = model.predict(&vec![0.0; model.dim]).unwrap();
        assert!(p.label < model.m, "{name}");
    }
}
