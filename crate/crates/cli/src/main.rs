use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lasq_core::estimator::{train_estimator, EstimatorModel};
use lasq_core::forward::{gen_calibrated_db, generate_canonical_db, SpectralGrid};
use lasq_core::harness::{
    evaluate_estimator, id_dataset, report_from_dir, resolve_threads, Experiment, ExperimentConfig, ExperimentKind,
};
use lasq_core::Error;

#[derive(Parser, Debug)]
#[command(name = "lasq", version, about = "Physics-checked gas-state retrieval from absorption spectra")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed the subcommand uses (master, data or training seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; SPEC_THREADS takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a line database: the canonical one, or a generated one when --seed is given.
    GenLines {
        #[arg(long, default_value_t = 25)]
        n_lines: usize,
        #[arg(long, num_args = 2, value_names = ["MIN", "MAX"], default_values_t = [2375.0, 2395.0])]
        band: Vec<f64>,
        #[arg(long, default_value = "generated")]
        label: String,
    },
    /// Simulate the in-distribution dataset to <out>/dataset.csv.
    GenData,
    /// Train the estimator; writes to <out>/estimator or the config's checkpoint path.
    TrainEstimator,
    /// Score the estimator on the test split.
    EvalEstimator,
    /// Run the experiment described by the config.
    Run,
    /// Run the config's ablation arms on the OoD protocol.
    Ablate,
    /// Aggregate every case CSV under --out into a summary.
    Report,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

struct Loaded {
    config: ExperimentConfig,
    base_dir: PathBuf,
}

fn load(cli: &Cli) -> Result<Loaded, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let config = ExperimentConfig::load(path)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, base_dir })
}

fn out_dir(cli: &Cli, loaded: Option<&Loaded>) -> Result<PathBuf, Error> {
    if let Some(o) = &cli.out {
        return Ok(o.clone());
    }
    loaded
        .and_then(|l| l.config.out_dir.as_ref().map(|o| l.base_dir.join(o)))
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))
}

fn write(path: &Path, text: String) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    let threads = resolve_threads(cli.threads);
    match &cli.command {
        Command::GenLines { n_lines, band, label } => {
            let out = cli
                .out
                .clone()
                .ok_or_else(|| Error::Config("--out is required".into()))?;
            let db = match cli.seed {
                None => generate_canonical_db(),
                Some(seed) => {
                    let band = [band[0], band[1]];
                    let grid = SpectralGrid {
                        nu_min: band[0],
                        nu_max: band[1],
                        spacing: 0.1,
                    };
                    gen_calibrated_db(seed, *n_lines, band, &grid, label).map_err(|e| match e {
                        Error::Domain(m) => Error::Config(m),
                        other => other,
                    })?
                }
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.display().to_string(),
                source: e,
            })?;
            let path = out.join("lines.json");
            db.save(&path)?;
            println!("{}", path.display());
        }
        Command::GenData => {
            let loaded = load(cli)?;
            let mut data = loaded.config.data.clone();
            data.seed = cli.seed.unwrap_or(data.seed);
            let pad = loaded.config.pad.resolve(&loaded.base_dir)?;
            let ds = id_dataset(&data, &pad)?;
            let path = out_dir(cli, Some(&loaded))?.join("dataset.csv");
            write(&path, ds.to_csv())?;
            println!("{}", path.display());
        }
        Command::TrainEstimator => {
            let loaded = load(cli)?;
            let pad = loaded.config.pad.resolve(&loaded.base_dir)?;
            let mut train = loaded.config.train.clone();
            train.seed = cli.seed.unwrap_or(train.seed);
            let stem = match (&cli.out, &loaded.config.estimator) {
                (Some(o), _) => o.join("estimator"),
                (None, Some(p)) => loaded.base_dir.join(p),
                (None, None) => return Err(Error::Config("pass --out or set the estimator path".into())),
            };
            let ds = id_dataset(&loaded.config.data, &pad)?;
            let (model, trace) = train_estimator(&ds, &pad.model.grid, &train)?;
            if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                    path: dir.display().to_string(),
                    source: e,
                })?;
            }
            model.save(&stem)?;
            let mut trace_path = stem.clone().into_os_string();
            trace_path.push(".trace.json");
            write(
                Path::new(&trace_path),
                serde_json::to_string_pretty(&trace).expect("trace serializes") + "\n",
            )?;
            println!("{}", stem.display());
        }
        Command::EvalEstimator => {
            let loaded = load(cli)?;
            let pad = loaded.config.pad.resolve(&loaded.base_dir)?;
            let stem = loaded
                .config
                .estimator
                .as_ref()
                .map(|p| loaded.base_dir.join(p))
                .ok_or_else(|| Error::Config("config has no estimator checkpoint".into()))?;
            let model = EstimatorModel::load(&stem).map_err(|e| match e {
                Error::Io { path, source } => Error::Config(format!("missing estimator checkpoint {path}: {source}")),
                other => other,
            })?;
            let mut data = loaded.config.data.clone();
            data.seed = cli.seed.unwrap_or(data.seed);
            let eval = evaluate_estimator(&model, &id_dataset(&data, &pad)?, &pad)?;
            let text = serde_json::to_string_pretty(&eval).expect("eval serializes") + "\n";
            if let Ok(dir) = out_dir(cli, Some(&loaded)) {
                write(&dir.join("estimator_eval.json"), text.clone())?;
            }
            print!("{text}");
        }
        Command::Run | Command::Ablate => {
            let loaded = load(cli)?;
            let mut config = loaded.config.clone();
            if matches!(cli.command, Command::Ablate) {
                config.kind = ExperimentKind::Ablation;
            }
            config.seed = cli.seed.unwrap_or(config.seed);
            let out = out_dir(cli, Some(&loaded))?;
            let exp = Experiment::from_config(config, &loaded.base_dir, threads)?;
            let report = exp.run()?;
            report.write(&out)?;
            if let Some(table) = report.ablation_table() {
                print!("{table}");
            }
            println!("{}", out.join("summary.json").display());
        }
        Command::Report => {
            let out = out_dir(cli, None)?;
            if !out.is_dir() {
                return Err(Error::Config(format!("no results directory at {}", out.display())));
            }
            let agg = report_from_dir(&out)?;
            let text = serde_json::to_string_pretty(&agg).expect("report serializes") + "\n";
            write(&out.join("report.json"), text.clone())?;
            print!("{text}");
        }
    }
    Ok(())
}
