mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use regionformer::data::{load_dataset, DataBundle, Partition};
use regionformer::model::{Checkpoint, CorrSpan, Model, ModelContext, Variant};
use regionformer::synth::{generate_to, SynthSpec};
use regionformer::train::{
    evaluate, ha_baseline, predict_partition, read_history, render_history, render_table, train_with, with_strata,
    write_history, EvalOptions, MetricsReport,
};
use regionformer::{Error, Result};

use config::RunConfig;

/// Share of roads in each POI-density stratum.
const POI_TOP_FRAC: f64 = 0.3;

#[derive(Debug, Parser)]
#[command(name = "regionformer", version, about = "Region-aware road speed forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        /// JSON generator spec; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and score it on the test partition.
    Train(RunArgs),
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        stratify_poi: bool,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Train one architecture variant, reported next to the HA baseline.
    Ablate {
        #[arg(long)]
        variant: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Print a training history and, optionally, a metrics table.
    Report {
        #[arg(long)]
        history: PathBuf,
        /// report.json files; rows are named after their directory.
        #[arg(long = "reports", num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = HistoryFormat::Csv)]
        format: HistoryFormat,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    corr_span: Option<String>,
    #[arg(long)]
    stratify_poi: bool,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

impl From<SplitArg> for Partition {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Val => Partition::Val,
            SplitArg::Test => Partition::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HistoryFormat {
    Csv,
    Table,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric() => 3,
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help and version go to stdout with status 0, real errors to stderr
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Runs one subcommand and returns what goes to stdout.
fn run(cmd: Command) -> Result<String> {
    match cmd {
        Command::Synth { spec, out, seed } => synth(spec.as_deref(), &out, seed),
        Command::Train(args) => run_training(args, None),
        Command::Ablate { variant, run } => {
            let v: Variant = variant.parse()?;
            run_training(run, Some(v))
        }
        Command::Eval {
            ckpt,
            data,
            split,
            stratify_poi,
            threads,
            format,
        } => eval(&ckpt, &data, split.into(), stratify_poi, threads, format),
        Command::Report {
            history,
            reports,
            format,
        } => report(&history, &reports, format),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<String> {
    let mut spec: SynthSpec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let bundle = generate_to(&spec, out)?;
    log::info!(
        "wrote {} roads, {} cells, {} steps to {}",
        bundle.graph.n_nodes(),
        bundle.grid.n_cells(),
        bundle.data.steps(),
        out.display()
    );
    Ok(format!("{}\n", out.display()))
}

fn run_training(args: RunArgs, variant: Option<Variant>) -> Result<String> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = args.data {
        cfg.data = Some(d);
    }
    if let Some(o) = args.out {
        cfg.out = Some(o);
    }
    if let Some(s) = args.seed {
        cfg.model.seed = s;
    }
    if let Some(c) = &args.corr_span {
        cfg.model.corr_span = c.parse::<CorrSpan>()?;
    }
    if let Some(v) = variant {
        cfg.model.variant = v;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    cfg.stratify_poi |= args.stratify_poi;
    cfg.model.validate()?;
    let out = cfg.out.clone().ok_or_else(|| Error::config("no output directory (--out)"))?;

    let mut bundle = match (&cfg.data, &cfg.synth) {
        (Some(d), _) => load_dataset(d)?,
        (None, Some(spec)) => regionformer::synth::generate(spec)?,
        (None, None) => return Err(Error::config("no dataset (--data or a `synth` section)")),
    };
    let m = &cfg.model;
    bundle.data.fill_missing()?;
    bundle.data.set_split(m.split, m.p, m.q)?;
    let norm = bundle.data.zscore_fit_apply()?.clone();

    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_text(&out.join("config.json"), &(serde_json::to_string_pretty(&cfg)? + "\n"))?;

    let ctx = ModelContext::build(m, &bundle)?;
    let model = Model::new(m.clone(), ctx)?;
    log::info!("training `{}` with {} parameters", m.variant, model.store.num_scalars());
    let outcome = train_with(model, &bundle.data, |_| {})?;
    log::info!("best epoch {} of {}", outcome.best_epoch, outcome.history.len());
    write_history(&out.join("history.csv"), &outcome.history)?;
    Checkpoint::from_model(&outcome.model, &norm)?.save(&out.join("checkpoint.json"))?;

    let opts = EvalOptions {
        threads: cfg.threads.max(1),
        ..Default::default()
    };
    let mut report = evaluate(&outcome.model, &bundle.data, Partition::Test, opts)?;
    if cfg.stratify_poi {
        let preds = predict_partition(&outcome.model, &bundle.data, Partition::Test, opts)?;
        report = with_strata(report, &preds, &bundle.grid, &bundle.graph, POI_TOP_FRAC)?;
    }
    let ha = ha_baseline(&bundle.data, Partition::Test, m.p, m.q)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    write_text(&out.join("report.json"), &json)?;
    write_text(&out.join("report.txt"), &table(m.variant.name(), &report, Some(&ha)))?;
    Ok(json)
}

/// Metrics table with optional HA row and stratum rows.
fn table(name: &str, report: &MetricsReport, ha: Option<&MetricsReport>) -> String {
    let mut rows: Vec<(String, &MetricsReport)> = Vec::new();
    if let Some(h) = ha {
        rows.push(("HA".into(), h));
    }
    rows.push((name.to_string(), report));
    if let Some(s) = &report.strata {
        rows.push((format!("{name} POI-H"), &s.high));
        rows.push((format!("{name} POI-L"), &s.low));
    }
    render_table(&rows)
}

fn prepare_for_checkpoint(ckpt: &Checkpoint, data: &Path) -> Result<DataBundle> {
    let mut bundle = load_dataset(data)?;
    let m = &ckpt.config;
    bundle.data.fill_missing()?;
    bundle.data.set_split(m.split, m.p, m.q)?;
    bundle.data.set_norm(ckpt.norm.clone());
    Ok(bundle)
}

fn eval(ckpt: &Path, data: &Path, partition: Partition, stratify: bool, threads: usize, format: Format) -> Result<String> {
    let ckpt = Checkpoint::load(ckpt)?;
    let bundle = prepare_for_checkpoint(&ckpt, data)?;
    let model = ckpt.to_model(&bundle)?;
    let opts = EvalOptions {
        threads: threads.max(1),
        ..Default::default()
    };
    let preds = predict_partition(&model, &bundle.data, partition, opts)?;
    let mut report = preds.report(None)?;
    if stratify {
        report = with_strata(report, &preds, &bundle.grid, &bundle.graph, POI_TOP_FRAC)?;
    }
    Ok(match format {
        Format::Json => serde_json::to_string_pretty(&report)? + "\n",
        Format::Table => table(model.config.variant.name(), &report, None),
    })
}

fn report(history: &Path, reports: &[PathBuf], format: HistoryFormat) -> Result<String> {
    let h = read_history(history)?;
    let mut out = match format {
        HistoryFormat::Csv => {
            let mut s = String::from("epoch,train_mae,val_mae\n");
            for r in &h {
                s.push_str(&format!("{},{},{}\n", r.epoch, r.train_mae, r.val_mae));
            }
            s
        }
        HistoryFormat::Table => render_history(&h),
    };
    if !reports.is_empty() {
        let loaded = reports
            .iter()
            .map(|p| read_json::<MetricsReport>(p).map(|r| (row_name(p), r)))
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<(String, &MetricsReport)> = loaded.iter().map(|(n, r)| (n.clone(), r)).collect();
        out.push('\n');
        out.push_str(&render_table(&rows));
    }
    Ok(out)
}

fn row_name(path: &Path) -> String {
    path.parent()
        .and_then(|d| d.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
