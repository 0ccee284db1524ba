use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use cyclecast::experiments::{emit_report, run_experiment, ExperimentConfig, ExperimentError, ExperimentKind};
use cyclecast::features::build_feature_panel;
use cyclecast::ingest::{
    canonical_end, canonical_start, load_canonical_panel, write_series_csv, FredClient, IngestError, FRED_SERIES,
};
use cyclecast::layers::CellActivation;
use cyclecast::model::HeadKind;
use cyclecast::synth;

#[derive(Parser)]
#[command(name = "cyclecast", version, about = "Recession prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download the FRED series (needs FRED_API_KEY) into a directory.
    Fetch {
        #[arg(long)]
        series_dir: PathBuf,
        /// Raw responses are cached here; defaults to <series-dir>/cache.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        base_url: Option<String>,
    },
    /// Run one experiment and write its reports.
    Run {
        /// main, ablate-features, ablate-components, sweep-w, early or sensitivity
        experiment: String,
        /// JSON experiment config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        no_standardize: bool,
        #[arg(long)]
        sigmoid_head: bool,
        #[arg(long)]
        bottleneck: Option<usize>,
        #[arg(long)]
        lstm_relu_gates: bool,
    },
    /// Write the synthetic stand-in series and recession calendar.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = synth::SYNTH_SEED)]
        seed: u64,
    },
    /// Export the derived feature panel as CSV.
    Features {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(ExperimentConfig::from_json(&text)?)
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn fetch(series_dir: &Path, cache_dir: Option<PathBuf>, base_url: Option<String>) -> Result<()> {
    let cache = cache_dir.unwrap_or_else(|| series_dir.join("cache"));
    let mut client = FredClient::from_env(cache)?;
    if let Some(url) = base_url {
        client = client.with_base_url(url);
    }
    fs::create_dir_all(series_dir)?;
    for id in FRED_SERIES {
        let series = client.fetch_series(id, canonical_start(), canonical_end())?;
        let path = series_dir.join(format!("{id}.csv"));
        write_series_csv(&series, &path)?;
        println!("{id}: {} months -> {}", series.len(), path.display());
    }
    if !series_dir.join("ISM.csv").exists() {
        eprintln!("note: ISM is not on FRED; place ISM.csv in {} before running", series_dir.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run(
    experiment: &str,
    config: Option<&Path>,
    out: &Path,
    jobs: usize,
    no_standardize: bool,
    sigmoid_head: bool,
    bottleneck: Option<usize>,
    lstm_relu_gates: bool,
) -> Result<()> {
    let kind: ExperimentKind = experiment.parse()?;
    let mut cfg = load_config(config)?;
    if no_standardize {
        cfg.standardize = false;
    }
    if sigmoid_head {
        cfg.head = HeadKind::Sigmoid;
    }
    if let Some(b) = bottleneck {
        cfg.bottleneck = b;
    }
    if lstm_relu_gates {
        cfg.lstm_activation = CellActivation::Relu;
    }
    cfg.validate()?;
    let output = run_experiment(kind, &cfg, jobs)?;
    let written = emit_report(&output, out)?;
    println!("{:<28} {:>12} {:>12} {:>12}", "row", "accuracy", "rec. F1", "exp. F1");
    for r in &output.report.rows {
        println!(
            "{:<28} {:>12} {:>12} {:>12}",
            r.label,
            r.aggregate.accuracy.percent(),
            r.aggregate.recession.f1.percent(),
            r.aggregate.expansion.f1.percent()
        );
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn features(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let panel = load_canonical_panel(&cfg.data_dir)?;
    let fp = build_feature_panel(&panel)?.select(cfg.features)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fp.write_csv(fs::File::create(out)?)?;
    println!("{} months x {} features -> {}", fp.len(), fp.n_features(), out.display());
    Ok(())
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<ExperimentError>() {
        e.kind()
    } else if let Some(e) = err.downcast_ref::<IngestError>() {
        match e {
            IngestError::AuthError => "auth",
            IngestError::HttpError(_) => "http",
            _ => "ingest",
        }
    } else if err.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else {
        "error"
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fetch {
            series_dir,
            cache_dir,
            base_url,
        } => fetch(&series_dir, cache_dir, base_url),
        Command::Run {
            experiment,
            config,
            out,
            jobs,
            no_standardize,
            sigmoid_head,
            bottleneck,
            lstm_relu_gates,
        } => run(
            &experiment,
            config.as_deref(),
            &out,
            jobs,
            no_standardize,
            sigmoid_head,
            bottleneck,
            lstm_relu_gates,
        ),
        Command::Synth { out, seed } => synth::generate(&out, seed)
            .map(|()| println!("wrote synthetic series to {}", out.display()))
            .map_err(Into::into),
        Command::Features { config, out } => features(config.as_deref(), &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = serde_json::json!({
                "error": error_kind(&err),
                "message": format!("{err:#}"),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
