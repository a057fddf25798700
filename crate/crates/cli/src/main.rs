mod checkpoint;
mod config;
mod report;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ndarray::Array2;
use snl::datasets::{self, DatasetSplit, Standardizer};
use snl::evaluation::density_grid;
use snl::models::{density_architecture, Domain};
use snl::regression::{target_gaussian, train_regression};
use snl::rng::{stream, streams};
use snl::training::{train_density, EpochMetrics, TrainOutcome};
use snl::{BaseDistribution, BernoulliModel, EnergyModel, GaussianMeanModel, MlpEnergy, Proposal, SnlError};

use checkpoint::{Checkpoint, DatasetRecord, ModelRecord, StandardizerRecord, FORMAT_VERSION};
use config::{RunConfig, REGRESSION_NAMES};

/// Problems with the user's input; exits with status 2.
#[derive(Debug)]
pub struct Invalid(pub Vec<String>);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.join("\n"))
    }
}

impl std::error::Error for Invalid {}

#[derive(Parser)]
#[command(name = "snl", version, about = "Train and evaluate energy-based models with the self-normalised log-likelihood")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train, validation and test splits of a synthetic dataset.
    Generate {
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Estimate held-out log-likelihood bounds for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Delimited file of points; otherwise the test split of a named dataset.
        #[arg(long, conflicts_with = "dataset")]
        data: Option<PathBuf>,
        #[arg(long)]
        no_header: bool,
        /// Defaults to the dataset the checkpoint was trained on.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        data_seed: Option<u64>,
        #[arg(long, default_value_t = config::default_samples())]
        samples: usize,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate the energy of a 1-D or 2-D model on a regular grid, in model coordinates.
    Grid {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `lo,hi` per dimension, e.g. `-4,4,-4,4`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        bounds: Vec<f64>,
        #[arg(long, default_value_t = 200)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { dataset, seed, out } => generate(&dataset, seed, &out),
        Command::Train { config } => train(&config),
        Command::Eval {
            checkpoint,
            data,
            no_header,
            dataset,
            data_seed,
            samples,
            seeds,
            out,
        } => report::eval(report::EvalArgs {
            checkpoint: &checkpoint,
            data: data.as_deref(),
            has_header: !no_header,
            dataset: dataset.as_deref(),
            data_seed,
            samples,
            seeds: &seeds,
            out: out.as_deref(),
        }),
        Command::Grid {
            checkpoint,
            bounds,
            resolution,
            out,
        } => grid(&checkpoint, &bounds, resolution, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            for line in format!("{e:#}").lines() {
                eprintln!("error: {line}");
            }
            ExitCode::from(exit_status(&e))
        }
    }
}

fn exit_status(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Invalid>().is_some() {
        return 2;
    }
    match e.downcast_ref::<SnlError>() {
        Some(SnlError::InvalidConfig(_) | SnlError::UnknownName { .. } | SnlError::Unsupported(_)) => 2,
        _ => 1,
    }
}

pub fn named_split(name: &str, seed: u64) -> anyhow::Result<DatasetSplit> {
    Ok(match REGRESSION_NAMES.iter().position(|n| *n == name) {
        Some(i) => datasets::regression_split(i as u32 + 1, seed)?,
        None => datasets::density_split(name, seed)?,
    })
}

fn header_for(dim: usize, regression: bool) -> Vec<String> {
    if regression && dim == 2 {
        vec!["x".into(), "y".into()]
    } else {
        (1..=dim).map(|j| format!("x{j}")).collect()
    }
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn generate(name: &str, seed: u64, out: &Path) -> anyhow::Result<()> {
    let data = named_split(name, seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let header = header_for(data.dim(), REGRESSION_NAMES.contains(&name));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    for (split, points) in [("train", &data.train), ("validation", &data.validation), ("test", &data.test)] {
        let path = out.join(format!("{split}.csv"));
        write_text(&path, &datasets::format_delimited(points.view(), Some(&header)))?;
        println!("{split}: {} rows -> {}", points.nrows(), path.display());
    }
    Ok(())
}

fn load_training_data(cfg: &RunConfig) -> anyhow::Result<(DatasetSplit, Option<Standardizer>)> {
    let d = &cfg.dataset;
    let mut data = match (&d.name, &d.path) {
        (Some(name), _) => named_split(name, d.seed)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let points = datasets::parse_delimited(&text, d.has_header)?;
            let n = points.nrows();
            let sizes = d.split.unwrap_or([n - n / 10 - n / 5, n / 10, n / 5]);
            let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            datasets::split(points.view(), sizes, d.seed, &label)?
        }
        (None, None) => unreachable!("checked by validation"),
    };
    let standardizer = if d.standardize { Some(data.standardize()?) } else { None };
    Ok((data, standardizer))
}

fn write_history(dir: &Path, history: &[EpochMetrics]) -> anyhow::Result<()> {
    let mut metrics = String::from("epoch,train_snl,val_snl,b\n");
    let mut timing = String::from("epoch,seconds\n");
    for h in history {
        metrics.push_str(&format!("{},{:?},{:?},{:?}\n", h.epoch, h.train_snl, h.val_snl, h.b));
        timing.push_str(&format!("{},{:?}\n", h.epoch, h.seconds));
    }
    write_text(&dir.join("metrics.csv"), &metrics)?;
    write_text(&dir.join("timing.csv"), &timing)
}

struct RunInfo {
    proposal: String,
    proposal_density: Option<Proposal>,
    eval_proposal: Option<Proposal>,
    dataset: DatasetRecord,
    standardizer: Option<StandardizerRecord>,
}

impl RunInfo {
    fn checkpoint(&self, cfg: &RunConfig, epoch: usize, b: f64, model: ModelRecord) -> Checkpoint {
        let (objective, seed) = if cfg.task == "regression" {
            (cfg.regression.objective, cfg.regression.seed)
        } else {
            (cfg.train.objective, cfg.train.seed)
        };
        Checkpoint {
            format_version: FORMAT_VERSION,
            objective,
            seed,
            epoch,
            b,
            model,
            proposal: self.proposal.clone(),
            proposal_density: self.proposal_density.clone(),
            eval_proposal: self.eval_proposal.clone(),
            dataset: self.dataset.clone(),
            standardizer: self.standardizer.clone(),
        }
    }
}

fn save_density_run<M: EnergyModel + Clone>(
    cfg: &RunConfig,
    info: &RunInfo,
    outcome: &TrainOutcome<M>,
    record: impl Fn(&M) -> ModelRecord,
) -> anyhow::Result<()> {
    let dir = &cfg.output_dir;
    write_history(dir, &outcome.history)?;
    let last = outcome.history.last().map_or(0, |h| h.epoch);
    info.checkpoint(cfg, last, outcome.state.b, record(&outcome.state.model))
        .save(&dir.join("checkpoint_final.json"))?;
    info.checkpoint(cfg, outcome.best_epoch, outcome.best.b, record(&outcome.best.model))
        .save(&dir.join("checkpoint_best.json"))?;
    println!(
        "trained {} epochs, best validation epoch {}, b = {}; wrote {}",
        last,
        outcome.best_epoch,
        outcome.state.b,
        dir.display()
    );
    Ok(())
}

fn train(path: &Path) -> anyhow::Result<()> {
    let cfg = RunConfig::load(path)?;
    let (data, standardizer) = load_training_data(&cfg)?;
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let mut info = RunInfo {
        proposal: String::new(),
        proposal_density: None,
        eval_proposal: None,
        dataset: DatasetRecord {
            name: cfg.dataset.name.clone(),
            seed: cfg.dataset.seed,
            has_header: cfg.dataset.has_header,
        },
        standardizer: standardizer.as_ref().map(StandardizerRecord::from_standardizer),
    };
    let train = data.train.view();

    if cfg.task == "regression" {
        let outcome = train_regression(&cfg.regression, &data)?;
        info.proposal = cfg.regression.proposal.clone();
        info.eval_proposal = Some(target_gaussian(train)?);
        write_history(&cfg.output_dir, &outcome.history)?;
        let last = outcome.history.last().map_or(0, |h| h.epoch);
        let record = |state: &snl::regression::RegressionState| ModelRecord::Conditional { state: state.clone() };
        info.checkpoint(&cfg, last, 0.0, record(&outcome.state))
            .save(&cfg.output_dir.join("checkpoint_final.json"))?;
        info.checkpoint(&cfg, outcome.best_epoch, 0.0, record(&outcome.best))
            .save(&cfg.output_dir.join("checkpoint_best.json"))?;
        println!(
            "trained {} epochs, best validation epoch {}; wrote {}",
            last,
            outcome.best_epoch,
            cfg.output_dir.display()
        );
        return Ok(());
    }

    info.proposal = cfg.train.proposal.clone();
    if cfg.train.proposal != "enumerate" {
        info.proposal_density = Some(Proposal::from_kind(&cfg.train.proposal, train)?);
    }
    match cfg.model_kind() {
        "mlp" => {
            let mut shape = density_architecture();
            shape.widths[0] = data.dim();
            let base = match cfg.base_kind() {
                "none" => BaseDistribution::none(),
                kind => BaseDistribution::new(Proposal::from_kind(kind, train)?),
            };
            let model = MlpEnergy::new(shape, base.clone(), &mut stream(cfg.train.seed, streams::INIT))?;
            let outcome = train_density(model, &cfg.train, &data)?;
            save_density_run(&cfg, &info, &outcome, |m: &MlpEnergy| ModelRecord::Mlp {
                shape: m.shape().clone(),
                params: m.params().to_vec(),
                base: base.clone(),
            })
        }
        "gaussian_mean" => {
            let outcome = train_density(GaussianMeanModel::new(0.0), &cfg.train, &data)?;
            save_density_run(&cfg, &info, &outcome, |m: &GaussianMeanModel| ModelRecord::GaussianMean {
                theta: m.theta(),
            })
        }
        "bernoulli" => {
            let outcome = train_density(BernoulliModel::new(0.0), &cfg.train, &data)?;
            save_density_run(&cfg, &info, &outcome, |m: &BernoulliModel| ModelRecord::Bernoulli { theta: m.theta() })
        }
        other => Err(Invalid(vec![format!("unknown density model '{other}'")]).into()),
    }
}

fn grid(path: &Path, bounds: &[f64], resolution: usize, out: &Path) -> anyhow::Result<()> {
    if bounds.len() % 2 != 0 {
        return Err(Invalid(vec![format!("--bounds needs lo,hi pairs, got {} numbers", bounds.len())]).into());
    }
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.density_model()?;
    let pairs: Vec<(f64, f64)> = bounds.chunks(2).map(|c| (c[0], c[1])).collect();
    if let Domain::Continuous { dim } = model.as_model().domain() {
        if dim != pairs.len() {
            return Err(Invalid(vec![format!("--bounds covers {} dimensions, the model has {dim}", pairs.len())]).into());
        }
    }
    let table = density_grid(model.as_model(), ckpt.b, &pairs, resolution)?;
    let rows: &Array2<f64> = &table.rows;
    write_text(out, &datasets::format_delimited(rows.view(), Some(&table.header)))?;
    println!("{} rows -> {}", rows.nrows(), out.display());
    Ok(())
}
