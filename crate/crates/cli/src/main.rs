use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use tabcon::augmentation::TaskKind;
use tabcon::data::{generate_synthetic, load_csv, SyntheticConfig};
use tabcon::encoders::{EncoderKind, EncoderParams};
use tabcon::evaluation::{load_reports, oap, OaPInput};
use tabcon::experiment::{
    run_experiment, run_sweep, stage_embed, stage_pretrain, stage_train_eval, ExperimentConfig,
    SweepConfig,
};
use tabcon::pretrain::embed_and_export;
use tabcon::stacking::StackingMode;

#[derive(Parser)]
#[command(
    name = "tabcon",
    version,
    about = "Contrastive pre-training for imbalanced tabular classification"
)]
struct Cli {
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (TOML, JSON, or a manifest.json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (or file for gen-data and embed).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic long-tail dataset as CSV.
    GenData(GenData),
    /// Phase 1 only: split, standardize and pre-train the encoder.
    Pretrain(Overrides),
    /// Encode the splits under --out, or one CSV with --checkpoint/--input.
    Embed(Embed),
    /// Phase 2 from the splits and embeddings under --out.
    TrainEval(Overrides),
    /// OaP over an alpha or encoding-dimension grid.
    Sweep(Sweep),
    /// Recompute OaP from stored report files.
    Report(Report),
    /// Full two-phase experiment.
    Run(Overrides),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    imbalance_exponent: Option<f64>,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    encoder: Option<EncoderKind>,
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    d_out: Option<usize>,
    #[arg(long, value_enum)]
    stacking: Option<Mode>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Input CSV; replaces the configured data source.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "label")]
    label_column: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    OriginOnly,
    EmbeddingOnly,
    Concat,
    Fuse,
}

#[derive(Args)]
struct Embed {
    #[arg(long, requires = "input")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    input: Option<PathBuf>,
    #[arg(long, default_value = "label")]
    label_column: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Over {
    Alpha,
    Dim,
}

#[derive(Args)]
struct Sweep {
    #[arg(long, value_enum)]
    over: Option<Over>,
    /// Comma-separated grid; defaults to 0,0.1,..,1 for alpha and 16,39,64,128 for dim.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Report {
    #[arg(long)]
    ssp: PathBuf,
    #[arg(long)]
    origin: PathBuf,
}

impl Cli {
    fn config(&self, o: &Overrides) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        if let Some(e) = o.epochs {
            cfg.pretrain.epochs = e;
        }
        if let Some(k) = o.encoder {
            cfg.encoder.kind = k;
        }
        if let Some(t) = o.task {
            cfg.pretrain.task.kind = t;
        }
        if o.d_out.is_some() {
            cfg.encoder.d_out = o.d_out;
        }
        if let Some(m) = o.stacking {
            cfg.stacking.mode = match m {
                Mode::OriginOnly => StackingMode::OriginOnly,
                Mode::EmbeddingOnly => StackingMode::EmbeddingOnly,
                Mode::Concat => StackingMode::Concat,
                Mode::Fuse => StackingMode::Fuse,
            };
        }
        if let Some(a) = o.alpha {
            cfg.stacking.alpha = a;
        }
        if let Some(path) = &o.data {
            cfg.data = tabcon::experiment::DataSource::Csv {
                path: path.clone(),
                label_column: o.label_column.clone(),
                class_order: None,
            };
        }
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(g) => {
            let mut cfg = match &cli.config {
                Some(p) => SyntheticConfig::load(p).context("[data] reading synthetic config")?,
                None => SyntheticConfig::default(),
            };
            cfg.n = g.n.unwrap_or(cfg.n);
            cfg.d = g.d.unwrap_or(cfg.d);
            cfg.m = g.m.unwrap_or(cfg.m);
            cfg.imbalance_exponent = g.imbalance_exponent.unwrap_or(cfg.imbalance_exponent);
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let data = generate_synthetic(&cfg).context("[data] generating")?;
            let text = data.to_csv_string("label");
            match &cli.out {
                Some(path) => write_file(path, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Pretrain(o) => {
            let cfg = cli.config(o)?;
            let out = cfg.out_dir();
            let (_, _, history) = stage_pretrain(&cfg, &out)?;
            if let Some(last) = history.epoch_loss.last() {
                println!("final epoch loss {last:.6}");
            }
            println!("checkpoint {}", out.join("encoder.ckpt").display());
        }
        Command::Embed(e) => match (&e.checkpoint, &e.input) {
            (Some(ckpt), Some(input)) => {
                let params = EncoderParams::load(ckpt).context("[embed] loading checkpoint")?;
                let data = load_csv(input, &e.label_column).context("[data] loading input")?;
                let out = cli
                    .out
                    .clone()
                    .unwrap_or_else(|| PathBuf::from("embeddings.csv"));
                embed_and_export(&params, &data, &out).context("[embed] encoding")?;
                println!("wrote {}", out.display());
            }
            _ => {
                let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
                stage_embed(&out)?;
                println!("wrote {}", out.join("embeddings").display());
            }
        },
        Command::TrainEval(o) => {
            let cfg = cli.config(o)?;
            let result = stage_train_eval(&cfg, &cfg.out_dir())?;
            println!("OaP {:.6}", result.summary.oap);
        }
        Command::Sweep(s) => {
            let cfg = cli.config(&s.overrides)?;
            let sweep = match (s.over, s.values.is_empty()) {
                (Some(Over::Alpha), true) => SweepConfig::alpha_grid(),
                (Some(Over::Dim), true) => SweepConfig::dim_grid(),
                (Some(Over::Alpha), false) => SweepConfig::Alpha {
                    values: s.values.clone(),
                },
                (Some(Over::Dim), false) => SweepConfig::Dim {
                    values: s.values.iter().map(|&v| v as usize).collect(),
                },
                (None, _) => cfg
                    .sweep
                    .clone()
                    .context("[config] no sweep configured; pass --over alpha|dim")?,
            };
            for p in run_sweep(&cfg, &sweep, &cfg.out_dir())? {
                println!("{} {:.6}", p.value, p.oap);
            }
        }
        Command::Report(r) => {
            let input = OaPInput {
                ssp_reports: load_reports(&r.ssp).context("[report] reading ssp reports")?,
                origin_reports: load_reports(&r.origin)
                    .context("[report] reading origin reports")?,
            };
            let value = oap(&input).context("[report]")?;
            println!("OaP {value:.6}");
        }
        Command::Run(o) => {
            let cfg = cli.config(o)?;
            let report = run_experiment(&cfg, &cfg.out_dir())?;
            let s = &report.phase_two.summary;
            info!("config hash {}", report.manifest.config_hash);
            println!("OaP {:.6}", s.oap);
            println!(
                "rare-class recall {:.4} -> {:.4} (classes {:?})",
                s.rare_recall_origin, s.rare_recall_ssp, s.rare_classes
            );
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .with_context(|| format!("[export] creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("[export] writing {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
