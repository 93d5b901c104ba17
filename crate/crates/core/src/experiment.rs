//! End-to-end experiments: config, seeded stages, sweeps and the on-disk layout.
//!
//! Output directory layout:
//!
//! ```text
//! manifest.json                resolved config, derived seeds, config hash
//! data/{train,test}.csv        standardized splits, `label` column
//! data/standardization.json    train-fitted feature statistics
//! encoder.ckpt                 encoder checkpoint
//! history.json                 per-epoch pre-training loss and learning rate
//! embeddings/{train,test}.csv  `e0..,label`
//! reports/origin.json          registry reports on raw features
//! reports/ssp.json             registry reports on stacked features
//! reports/metrics.csv          flat metric table of both
//! summary.json                 OaP and rare-class recall
//! models/{origin,ssp}/*.json   trained classifiers
//! projections/*.csv            2-D PCA of the test split
//! sweep/{alpha,dim}.csv        one OaP per grid point
//! ```

use std::collections::BTreeMap;
use std::error::Error as StdError;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    apply_standardization, fit_standardization, generate_synthetic, load_csv_with_order,
    stratified_split, Dataset, FeatureStats, SyntheticConfig,
};
use crate::downstream::{
    default_registry, predict_dataset, train_classifier, ClassifierSpec, TrainedClassifier,
};
use crate::encoders::{encode_dataset, EncoderConfig, EncoderKind, EncoderParams};
use crate::evaluation::{
    evaluate, mean_recall_over, oap, pca_project, projection_to_csv, rare_classes, reports_to_csv,
    reports_to_json, EvalReport, OaPInput,
};
use crate::pretrain::{embed_and_export, pretrain, PretrainConfig, TrainHistory};
use crate::seed::derive_seed;
use crate::stacking::{stack_dataset, StackedDataset, StackingConfig, StackingMode};

/// Pipeline stage named in error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Data,
    Split,
    Pretrain,
    Embed,
    Stack,
    Train,
    Evaluate,
    Export,
    Sweep,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Split => "split",
            Stage::Pretrain => "pretrain",
            Stage::Embed => "embed",
            Stage::Stack => "stack",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Export => "export",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        };
        f.write_str(s)
    }
}

#[derive(Debug)]
pub struct ExperimentError {
    pub stage: Stage,
    pub source: Box<dyn StdError + Send + Sync>,
}

impl fmt::Display for ExperimentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.source)
    }
}

impl StdError for ExperimentError {
    fn source(&self) -> Option<&(dyn StdError + 'static)> {
        Some(self.source.as_ref())
    }
}

impl ExperimentError {
    pub fn msg(stage: Stage, message: impl Into<String>) -> Self {
        Self {
            stage,
            source: message.into().into(),
        }
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

pub trait StageContext<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T, E: StdError + Send + Sync + 'static> StageContext<T> for std::result::Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| ExperimentError {
            stage,
            source: Box::new(e),
        })
    }
}

fn io_at(stage: Stage, path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::msg(stage, format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Csv {
        path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
        #[serde(default)]
        class_order: Option<Vec<String>>,
    },
}

fn default_label_column() -> String {
    "label".into()
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_fraction: 0.2 }
    }
}

/// Encoder architecture; `d_in` comes from the data and `d_out` defaults to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub kind: EncoderKind,
    pub d_out: Option<usize>,
    pub mlp_hidden: Vec<usize>,
    pub tf_model_dim: usize,
    pub tf_heads: usize,
    pub tf_blocks: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let base = EncoderConfig::new(EncoderKind::Mlp, 1);
        Self {
            kind: base.kind,
            d_out: None,
            mlp_hidden: base.mlp_hidden,
            tf_model_dim: base.tf_model_dim,
            tf_heads: base.tf_heads,
            tf_blocks: base.tf_blocks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "over", rename_all = "snake_case", deny_unknown_fields)]
pub enum SweepConfig {
    /// Fusion weights; each point uses `fuse` stacking.
    Alpha { values: Vec<f64> },
    /// Encoding dimensions; each point re-trains the encoder.
    Dim { values: Vec<usize> },
}

impl SweepConfig {
    pub fn alpha_grid() -> Self {
        SweepConfig::Alpha {
            values: (0..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }

    pub fn dim_grid() -> Self {
        SweepConfig::Dim {
            values: vec![16, 39, 64, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every split, initialization, augmentation and classifier stream.
    pub seed: u64,
    pub data: DataSource,
    pub split: SplitConfig,
    pub pretrain: PretrainConfig,
    pub encoder: EncoderSection,
    pub stacking: StackingConfig,
    pub sweep: Option<SweepConfig>,
    pub classifiers: Vec<ClassifierSpec>,
    /// Share of the full dataset at or below which a class counts as rare.
    pub rare_class_share: f64,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSource::default(),
            split: SplitConfig::default(),
            pretrain: PretrainConfig::default(),
            encoder: EncoderSection::default(),
            stacking: StackingConfig::default(),
            sweep: None,
            classifiers: default_registry(),
            rare_class_share: 0.05,
            output_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub root: u64,
    pub split: u64,
    pub encoder_init: u64,
    pub pretrain: u64,
    pub classifiers: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    /// SHA-256 of the resolved config's JSON form, without `output_dir`.
    pub config_hash: String,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).stage(Stage::Config)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).stage(Stage::Config)
    }

    /// Reads a config document, or the config inside a manifest. `.json`
    /// files are JSON, anything else TOML.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_at(Stage::Config, path))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        if is_json {
            let value: serde_json::Value = serde_json::from_str(&text).stage(Stage::Config)?;
            if value.get("config_hash").is_some() {
                let manifest: Manifest = serde_json::from_value(value).stage(Stage::Config)?;
                return Ok(manifest.config);
            }
            serde_json::from_value(value).stage(Stage::Config)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::msg(Stage::Config, m));
        self.pretrain.validate().stage(Stage::Config)?;
        self.stacking.validate().stage(Stage::Config)?;
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return bad(format!(
                "split.test_fraction {} outside (0, 1)",
                self.split.test_fraction
            ));
        }
        if self.classifiers.is_empty() {
            return bad("classifier registry is empty".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for spec in &self.classifiers {
            spec.validate().stage(Stage::Config)?;
            if !names.insert(spec.name()) {
                return bad(format!("duplicate classifier name `{}`", spec.name()));
            }
        }
        if self.encoder.d_out == Some(0) {
            return bad("encoder.d_out must be at least 1".into());
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate().stage(Stage::Config)?;
        }
        match &self.sweep {
            Some(SweepConfig::Alpha { values }) => {
                if values.is_empty() {
                    return bad("sweep.values is empty".into());
                }
                if let Some(a) = values.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                    return bad(format!("sweep alpha {a} outside [0, 1]"));
                }
            }
            Some(SweepConfig::Dim { values }) => {
                if values.is_empty() {
                    return bad("sweep.values is empty".into());
                }
                if values.contains(&0) {
                    return bad("sweep dimensions must be at least 1".into());
                }
            }
            None => {}
        }
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            root: self.seed,
            split: derive_seed(self.seed, "split"),
            encoder_init: derive_seed(self.seed, "encoder_init"),
            pretrain: derive_seed(self.seed, "pretrain"),
            classifiers: self
                .classifiers
                .iter()
                .map(|c| {
                    (
                        c.name().to_string(),
                        derive_seed(self.seed, &format!("classifier/{}", c.name())),
                    )
                })
                .collect(),
        }
    }

    /// Copies the derived seeds into the sub-configs.
    pub fn resolved(&self) -> Self {
        let seeds = self.seeds();
        let mut out = self.clone();
        out.pretrain.seed = seeds.pretrain;
        for spec in &mut out.classifiers {
            spec.seed = seeds.classifiers[spec.name()];
        }
        out
    }

    pub fn manifest(&self) -> Manifest {
        let config = self.resolved();
        // the output location does not change results
        let hashed = Self {
            output_dir: None,
            ..config.clone()
        };
        let json = serde_json::to_string(&hashed).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        Manifest {
            seeds: config.seeds(),
            config,
            config_hash: digest.iter().map(|b| format!("{b:02x}")).collect(),
        }
    }

    /// Encoder for `d` input features, with an optional `d_out` override.
    pub fn encoder_config(&self, d: usize, d_out: Option<usize>) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            kind: e.kind,
            d_in: d,
            d_out: d_out.or(e.d_out).unwrap_or(d),
            mlp_hidden: e.mlp_hidden.clone(),
            tf_model_dim: e.tf_model_dim,
            tf_heads: e.tf_heads,
            tf_blocks: e.tf_blocks,
            seed: self.seeds().encoder_init,
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

pub fn load_source(config: &ExperimentConfig) -> Result<Dataset> {
    match &config.data {
        DataSource::Synthetic(s) => generate_synthetic(s).stage(Stage::Data),
        DataSource::Csv {
            path,
            label_column,
            class_order,
        } => load_csv_with_order(path, label_column, class_order.as_deref()).stage(Stage::Data),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    /// Fitted on the training split and applied to both.
    pub stats: Vec<FeatureStats>,
    /// Class sizes of the full dataset.
    pub class_counts: Vec<usize>,
}

/// Load, stratified split, then standardization fitted on the train split.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let full = load_source(config)?;
    let (train, test) = stratified_split(&full, config.split.test_fraction, config.seeds().split)
        .stage(Stage::Split)?;
    let stats = fit_standardization(&train);
    Ok(PreparedData {
        train: apply_standardization(&train, &stats).stage(Stage::Data)?,
        test: apply_standardization(&test, &stats).stage(Stage::Data)?,
        stats,
        class_counts: full.class_counts(),
    })
}

/// Phase 1 on the training features.
pub fn run_pretrain(
    config: &ExperimentConfig,
    train: &Dataset,
    d_out: Option<usize>,
) -> Result<(EncoderParams, TrainHistory)> {
    let resolved = config.resolved();
    let enc = resolved.encoder_config(train.d(), d_out);
    info!(
        "pre-training {:?} encoder {} -> {}",
        enc.kind, enc.d_in, enc.d_out
    );
    pretrain(train, &enc, &resolved.pretrain).stage(Stage::Pretrain)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryRun {
    pub reports: Vec<EvalReport>,
    pub models: Vec<TrainedClassifier>,
}

/// Trains every registry entry on `train` and evaluates it on `test`.
pub fn train_and_evaluate(
    config: &ExperimentConfig,
    train: &StackedDataset,
    test: &StackedDataset,
) -> Result<RegistryRun> {
    let resolved = config.resolved();
    let truth = &test.labels;
    let mut run = RegistryRun {
        reports: Vec::new(),
        models: Vec::new(),
    };
    for spec in &resolved.classifiers {
        let model = train_classifier(train, spec).stage(Stage::Train)?;
        let pred = predict_dataset(&model, test).stage(Stage::Evaluate)?;
        let report = evaluate(spec.name(), truth, &pred, test.m()).stage(Stage::Evaluate)?;
        info!(
            "{}: accuracy {:.4} macro_recall {:.4} macro_f1 {:.4}",
            spec.name(),
            report.accuracy,
            report.macro_recall,
            report.macro_f1
        );
        run.reports.push(report);
        run.models.push(model);
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub oap: f64,
    pub rare_classes: Vec<usize>,
    pub rare_recall_origin: f64,
    pub rare_recall_ssp: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTwo {
    pub origin: RegistryRun,
    pub ssp: RegistryRun,
    pub summary: Summary,
    pub stacked_test: StackedDataset,
}

/// Stacks, trains and evaluates both paths. Embeddings are row-aligned with
/// `train` and `test`.
pub fn phase_two(
    config: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    train_emb: &[Vec<f64>],
    test_emb: &[Vec<f64>],
    class_counts: &[usize],
) -> Result<PhaseTwo> {
    let origin_train = StackedDataset::from_dataset(train);
    let origin_test = StackedDataset::from_dataset(test);
    let origin = train_and_evaluate(config, &origin_train, &origin_test)?;
    let ssp_train = stack_dataset(train, train_emb, &config.stacking).stage(Stage::Stack)?;
    let ssp_test = stack_dataset(test, test_emb, &config.stacking).stage(Stage::Stack)?;
    let ssp = train_and_evaluate(config, &ssp_train, &ssp_test)?;
    let summary = summarize(config, &origin.reports, &ssp.reports, class_counts)?;
    Ok(PhaseTwo {
        origin,
        ssp,
        summary,
        stacked_test: ssp_test,
    })
}

pub fn summarize(
    config: &ExperimentConfig,
    origin: &[EvalReport],
    ssp: &[EvalReport],
    class_counts: &[usize],
) -> Result<Summary> {
    let input = OaPInput {
        ssp_reports: ssp.to_vec(),
        origin_reports: origin.to_vec(),
    };
    let rare = rare_classes(class_counts, config.rare_class_share);
    Ok(Summary {
        oap: oap(&input).stage(Stage::Report)?,
        rare_recall_origin: mean_recall_over(origin, &rare),
        rare_recall_ssp: mean_recall_over(ssp, &rare),
        rare_classes: rare,
        config_hash: config.manifest().config_hash,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_at(Stage::Export, parent))?;
    }
    fs::write(path, contents).map_err(io_at(Stage::Export, path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes")
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: Stage) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_at(stage, path))?;
    serde_json::from_str(&text).stage(stage)
}

pub fn write_manifest(config: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let manifest = config.manifest();
    write(&out.join("manifest.json"), to_json(&manifest))?;
    Ok(manifest)
}

/// Writes the standardized splits and their statistics.
pub fn write_prepared(prepared: &PreparedData, out: &Path) -> Result<()> {
    let dir = out.join("data");
    write(
        &dir.join("train.csv"),
        prepared.train.to_csv_string("label"),
    )?;
    write(&dir.join("test.csv"), prepared.test.to_csv_string("label"))?;
    write(&dir.join("standardization.json"), to_json(&prepared.stats))?;
    write(
        &dir.join("classes.json"),
        to_json(&(prepared.train.class_names(), &prepared.class_counts)),
    )
}

/// Reads back what [`write_prepared`] wrote.
pub fn read_prepared(out: &Path) -> Result<PreparedData> {
    let dir = out.join("data");
    let (class_names, class_counts): (Vec<String>, Vec<usize>) =
        read_json(&dir.join("classes.json"), Stage::Data)?;
    let load = |name: &str| {
        load_csv_with_order(dir.join(name), "label", Some(&class_names)).stage(Stage::Data)
    };
    Ok(PreparedData {
        train: load("train.csv")?,
        test: load("test.csv")?,
        stats: read_json(&dir.join("standardization.json"), Stage::Data)?,
        class_counts,
    })
}

/// `pretrain` stage: prepare data, train the encoder, write splits,
/// checkpoint, history and manifest.
pub fn stage_pretrain(
    config: &ExperimentConfig,
    out: &Path,
) -> Result<(PreparedData, EncoderParams, TrainHistory)> {
    config.validate()?;
    write_manifest(config, out)?;
    let prepared = prepare_data(config)?;
    write_prepared(&prepared, out)?;
    let (params, history) = run_pretrain(config, &prepared.train, None)?;
    let ckpt = out.join("encoder.ckpt");
    params.save(&ckpt).stage(Stage::Export)?;
    write(&out.join("history.json"), to_json(&history))?;
    Ok((prepared, params, history))
}

/// `embed` stage: encode both splits with the checkpoint under `out`.
pub fn stage_embed(out: &Path) -> Result<(Dataset, Dataset)> {
    let params = EncoderParams::load(out.join("encoder.ckpt")).stage(Stage::Embed)?;
    let prepared = read_prepared(out)?;
    let dir = out.join("embeddings");
    fs::create_dir_all(&dir).map_err(io_at(Stage::Export, &dir))?;
    let train =
        embed_and_export(&params, &prepared.train, dir.join("train.csv")).stage(Stage::Embed)?;
    let test =
        embed_and_export(&params, &prepared.test, dir.join("test.csv")).stage(Stage::Embed)?;
    Ok((train, test))
}

/// Writes reports, summary, models and projections for a finished phase 2.
pub fn write_phase_two(
    result: &PhaseTwo,
    test: &Dataset,
    test_emb: &[Vec<f64>],
    out: &Path,
) -> Result<()> {
    let reports = out.join("reports");
    write(
        &reports.join("origin.json"),
        reports_to_json(&result.origin.reports),
    )?;
    write(
        &reports.join("ssp.json"),
        reports_to_json(&result.ssp.reports),
    )?;
    let rows: Vec<(&str, &EvalReport)> = result
        .origin
        .reports
        .iter()
        .map(|r| ("origin", r))
        .chain(result.ssp.reports.iter().map(|r| ("ssp", r)))
        .collect();
    write(&reports.join("metrics.csv"), reports_to_csv(&rows))?;
    write(&out.join("summary.json"), to_json(&result.summary))?;
    for (path, run) in [("origin", &result.origin), ("ssp", &result.ssp)] {
        for model in &run.models {
            let file = out
                .join("models")
                .join(path)
                .join(format!("{}.json", model.name()));
            write(&file, model.to_json().stage(Stage::Export)?)?;
        }
    }
    let labels = test.labels();
    let names = test.class_names();
    let views: [(&str, Vec<Vec<f64>>); 3] = [
        ("origin", test.feature_rows()),
        ("embedding", test_emb.to_vec()),
        ("stacked", result.stacked_test.vectors.clone()),
    ];
    for (name, rows) in views {
        match pca_project(&rows, 2) {
            Ok(coords) => write(
                &out.join("projections").join(format!("{name}.csv")),
                projection_to_csv(&coords, &labels, names),
            )?,
            Err(e) => warn!("skipping {name} projection: {e}"),
        }
    }
    Ok(())
}

/// `train-eval` stage: phase 2 from the splits and embeddings under `out`.
pub fn stage_train_eval(config: &ExperimentConfig, out: &Path) -> Result<PhaseTwo> {
    config.validate()?;
    let prepared = read_prepared(out)?;
    let emb = |name: &str| -> Result<Vec<Vec<f64>>> {
        let path = out.join("embeddings").join(name);
        Ok(
            load_csv_with_order(&path, "label", Some(prepared.train.class_names()))
                .stage(Stage::Embed)?
                .feature_rows(),
        )
    };
    let (train_emb, test_emb) = (emb("train.csv")?, emb("test.csv")?);
    let result = phase_two(
        config,
        &prepared.train,
        &prepared.test,
        &train_emb,
        &test_emb,
        &prepared.class_counts,
    )?;
    write_phase_two(&result, &prepared.test, &test_emb, out)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub manifest: Manifest,
    pub history: TrainHistory,
    pub phase_two: PhaseTwo,
    pub sweep: Option<Vec<SweepPoint>>,
}

/// The full two-phase pipeline, writing every artifact under `out`. A
/// configured sweep runs afterwards.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    config.validate()?;
    let manifest = write_manifest(config, out)?;
    let prepared = prepare_data(config)?;
    write_prepared(&prepared, out)?;
    let (params, history) = run_pretrain(config, &prepared.train, None)?;
    params.save(out.join("encoder.ckpt")).stage(Stage::Export)?;
    write(&out.join("history.json"), to_json(&history))?;

    let emb_dir = out.join("embeddings");
    fs::create_dir_all(&emb_dir).map_err(io_at(Stage::Export, &emb_dir))?;
    let train_emb = embed_and_export(&params, &prepared.train, emb_dir.join("train.csv"))
        .stage(Stage::Embed)?
        .feature_rows();
    let test_emb = embed_and_export(&params, &prepared.test, emb_dir.join("test.csv"))
        .stage(Stage::Embed)?
        .feature_rows();

    let result = phase_two(
        config,
        &prepared.train,
        &prepared.test,
        &train_emb,
        &test_emb,
        &prepared.class_counts,
    )?;
    write_phase_two(&result, &prepared.test, &test_emb, out)?;
    info!("OaP {:.6}", result.summary.oap);

    let sweep = match &config.sweep {
        Some(s) => Some(run_sweep_with(
            config,
            s,
            &prepared,
            Some((&params, &result.origin)),
            out,
        )?),
        None => None,
    };
    Ok(ExperimentReport {
        manifest,
        history,
        phase_two: result,
        sweep,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub oap: f64,
    pub ssp_reports: Vec<EvalReport>,
}

/// Runs `sweep` on its own, preparing data and the origin baseline first.
pub fn run_sweep(
    config: &ExperimentConfig,
    sweep: &SweepConfig,
    out: &Path,
) -> Result<Vec<SweepPoint>> {
    let mut config = config.clone();
    config.sweep = Some(sweep.clone());
    config.validate()?;
    write_manifest(&config, out)?;
    let prepared = prepare_data(&config)?;
    run_sweep_with(&config, sweep, &prepared, None, out)
}

fn run_sweep_with(
    config: &ExperimentConfig,
    sweep: &SweepConfig,
    prepared: &PreparedData,
    reuse: Option<(&EncoderParams, &RegistryRun)>,
    out: &Path,
) -> Result<Vec<SweepPoint>> {
    let (train, test) = (&prepared.train, &prepared.test);
    let origin = match reuse {
        Some((_, o)) => o.clone(),
        None => train_and_evaluate(
            config,
            &StackedDataset::from_dataset(train),
            &StackedDataset::from_dataset(test),
        )?,
    };
    let ssp_point =
        |stacking: &StackingConfig, params: &EncoderParams| -> Result<Vec<EvalReport>> {
            let tr = encode_dataset(params, train).stage(Stage::Embed)?;
            let te = encode_dataset(params, test).stage(Stage::Embed)?;
            let s_train = stack_dataset(train, &tr, stacking).stage(Stage::Stack)?;
            let s_test = stack_dataset(test, &te, stacking).stage(Stage::Stack)?;
            Ok(train_and_evaluate(config, &s_train, &s_test)?.reports)
        };
    let mut points = Vec::new();
    let name = match sweep {
        SweepConfig::Alpha { values } => {
            let owned;
            let params = match reuse {
                Some((p, _)) if p.config.d_out == train.d() => p,
                _ => {
                    owned = run_pretrain(config, train, Some(train.d()))?.0;
                    &owned
                }
            };
            for &alpha in values {
                let stacking = StackingConfig {
                    mode: StackingMode::Fuse,
                    alpha,
                };
                let reports = ssp_point(&stacking, params)?;
                points.push(point(alpha, reports, &origin.reports)?);
            }
            "alpha"
        }
        SweepConfig::Dim { values } => {
            for &d_out in values {
                let (params, _) = run_pretrain(config, train, Some(d_out))?;
                let reports = ssp_point(&config.stacking, &params)?;
                points.push(point(d_out as f64, reports, &origin.reports)?);
            }
            "dim"
        }
    };
    let mut csv = format!("{name},oap\n");
    for p in &points {
        info!("sweep {name}={}: OaP {:.6}", p.value, p.oap);
        csv.push_str(&format!("{},{}\n", p.value, p.oap));
    }
    let dir = out.join("sweep");
    write(&dir.join(format!("{name}.csv")), csv)?;
    write(&dir.join(format!("{name}.json")), to_json(&points))?;
    write(&dir.join("origin.json"), reports_to_json(&origin.reports))?;
    Ok(points)
}

fn point(value: f64, ssp_reports: Vec<EvalReport>, origin: &[EvalReport]) -> Result<SweepPoint> {
    let oap = oap(&OaPInput {
        ssp_reports: ssp_reports.clone(),
        origin_reports: origin.to_vec(),
    })
    .stage(Stage::Sweep)?;
    Ok(SweepPoint {
        value,
        oap,
        ssp_reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            data: DataSource::Synthetic(SyntheticConfig {
                n: 120,
                d: 6,
                m: 3,
                ..SyntheticConfig::default()
            }),
            ..ExperimentConfig::default()
        };
        cfg.pretrain.epochs = 2;
        cfg.pretrain.batch_size = 32;
        for spec in &mut cfg.classifiers {
            spec.epochs = 3;
        }
        cfg
    }

    #[test]
    fn toml_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            seed = 7
            [data]
            source = "synthetic"
            n = 200
            d = 5
            m = 3
            imbalance_exponent = 1.0
            class_separation = 2.0
            noise_scale = 1.0
            seed = 3
            [pretrain.task]
            kind = "fs"
            k = 2
            [stacking]
            mode = "fuse"
            alpha = 0.5
            [sweep]
            over = "alpha"
            values = [0.0, 1.0]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.pretrain.negatives, 8);
        assert_eq!(cfg.classifiers.len(), 4);
        assert_eq!(cfg.stacking.mode, StackingMode::Fuse);
        cfg.validate().unwrap();
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn csv_source_parses() {
        let cfg = ExperimentConfig::from_json_str(
            r#"{"data": {"source": "csv", "path": "x.csv", "class_order": ["a", "b"]}}"#,
        )
        .unwrap();
        match cfg.data {
            DataSource::Csv {
                label_column,
                class_order,
                ..
            } => {
                assert_eq!(label_column, "label");
                assert_eq!(class_order.unwrap(), vec!["a", "b"]);
            }
            _ => panic!("expected csv source"),
        }
    }

    #[test]
    fn validation_errors_are_stage_tagged() {
        let mut cfg = small();
        cfg.sweep = Some(SweepConfig::Dim { values: vec![] });
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.stage, Stage::Config);
        assert!(err.to_string().starts_with("[config]"));
    }

    #[test]
    fn manifest_hash_is_stable_and_seed_sensitive() {
        let cfg = small();
        let a = cfg.manifest();
        assert_eq!(a, cfg.manifest());
        assert_eq!(a.config_hash.len(), 64);
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(other.manifest().config_hash, a.config_hash);
        let mut moved = cfg.clone();
        moved.output_dir = Some("elsewhere".into());
        assert_eq!(moved.manifest().config_hash, a.config_hash);
        // resolving twice changes nothing
        assert_eq!(a.config.resolved(), a.config);
    }

    #[test]
    fn manifest_round_trips_through_load() {
        let dir = tempfile::tempdir().unwrap();
        let m = small().manifest();
        let path = dir.path().join("manifest.json");
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap(), m.config);
    }

    #[test]
    fn prepare_standardizes_with_train_statistics() {
        let p = prepare_data(&small()).unwrap();
        assert_eq!(p.train.n() + p.test.n(), 120);
        for j in 0..p.train.d() {
            let mean: f64 =
                p.train.samples().iter().map(|s| s.features[j]).sum::<f64>() / p.train.n() as f64;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn stages_reproduce_full_run() {
        let cfg = small();
        let full = tempfile::tempdir().unwrap();
        let staged = tempfile::tempdir().unwrap();
        run_experiment(&cfg, full.path()).unwrap();
        stage_pretrain(&cfg, staged.path()).unwrap();
        stage_embed(staged.path()).unwrap();
        stage_train_eval(&cfg, staged.path()).unwrap();
        for f in [
            "reports/origin.json",
            "reports/ssp.json",
            "summary.json",
            "encoder.ckpt",
            "manifest.json",
        ] {
            assert_eq!(
                fs::read(full.path().join(f)).unwrap(),
                fs::read(staged.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }
}
