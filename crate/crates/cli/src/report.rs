//! The `eval` command and its TOML report.

use std::path::Path;

use anyhow::Context;
use ndarray::Array2;
use serde::Serialize;
use snl::datasets;
use snl::evaluation::evaluate;
use snl::rng::{stream, streams};

use crate::checkpoint::{Checkpoint, ModelRecord};
use crate::{named_split, write_text, Invalid};

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: Option<&'a Path>,
    pub has_header: bool,
    pub dataset: Option<&'a str>,
    pub data_seed: Option<u64>,
    pub samples: usize,
    pub seeds: &'a [u64],
    pub out: Option<&'a Path>,
}

#[derive(Clone, Debug, Serialize)]
struct SplitRecord {
    split: String,
    count: usize,
    l_snl: f64,
    l_snl_se: f64,
    l_is: f64,
    l_is_se: f64,
    log_base_offset: f64,
    /// `l_is + log_base_offset`.
    log_likelihood_is: f64,
    log_likelihood_snl: f64,
    flagged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_normalizer_gap: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
struct RunRecord {
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    log_z: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    log_z_se: Option<f64>,
    splits: Vec<SplitRecord>,
}

#[derive(Clone, Debug, Serialize)]
struct Aggregate {
    split: String,
    seeds: usize,
    log_likelihood_is_mean: f64,
    log_likelihood_is_std: f64,
    log_likelihood_snl_mean: f64,
    log_likelihood_snl_std: f64,
    table_row: String,
}

#[derive(Clone, Debug, Serialize)]
struct Report {
    checkpoint: String,
    dataset: String,
    objective: String,
    samples: usize,
    seeds: Vec<u64>,
    /// Add to a log-likelihood to express it in the unstandardised units.
    #[serde(skip_serializing_if = "Option::is_none")]
    log_jacobian: Option<f64>,
    aggregate: Vec<Aggregate>,
    runs: Vec<RunRecord>,
}

/// Sample mean and standard deviation; the deviation of one value is 0.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn flagged(l_snl: f64, l_snl_se: f64, l_is: f64, l_is_se: f64) -> bool {
    l_snl > l_is + 10.0 * l_snl_se.hypot(l_is_se)
}

fn eval_splits(ckpt: &Checkpoint, args: &EvalArgs) -> anyhow::Result<(String, Vec<(String, Array2<f64>)>)> {
    let (label, mut splits) = match args.data {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let points = datasets::parse_delimited(&text, args.has_header)?;
            let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (label, vec![("data".to_string(), points)])
        }
        None => {
            let name = match args.dataset.or(ckpt.dataset.name.as_deref()) {
                Some(n) => n.to_string(),
                None => {
                    return Err(Invalid(vec![
                        "the checkpoint was trained on a file; pass --data or --dataset".into(),
                    ])
                    .into())
                }
            };
            let seed = args.data_seed.unwrap_or(ckpt.dataset.seed);
            let data = named_split(&name, seed)?;
            (name, vec![("test".to_string(), data.test)])
        }
    };
    if let Some(s) = &ckpt.standardizer {
        let s = s.to_standardizer();
        for (_, points) in &mut splits {
            if points.ncols() != s.mean.len() {
                return Err(Invalid(vec![format!(
                    "data has {} columns, the checkpoint expects {}",
                    points.ncols(),
                    s.mean.len()
                )])
                .into());
            }
            s.apply_in_place(points);
        }
    }
    Ok((label, splits))
}

fn density_runs(ckpt: &Checkpoint, label: &str, splits: &[(String, Array2<f64>)], args: &EvalArgs) -> anyhow::Result<Vec<RunRecord>> {
    let model = ckpt.density_model()?;
    let model = model.as_model();
    let sampler = ckpt.sampler(&model.domain())?;
    let views: Vec<(&str, ndarray::ArrayView2<f64>)> = splits.iter().map(|(n, p)| (n.as_str(), p.view())).collect();
    let mut runs = Vec::new();
    for &seed in args.seeds {
        let r = evaluate(model, ckpt.b, label, &views, &sampler, args.samples, seed)?;
        runs.push(RunRecord {
            seed,
            b: Some(r.b),
            log_z: Some(r.log_z),
            log_z_se: Some(r.log_z_se),
            splits: r
                .splits
                .iter()
                .map(|s| SplitRecord {
                    split: s.split.clone(),
                    count: s.count,
                    l_snl: s.l_snl,
                    l_snl_se: s.l_snl_se,
                    l_is: s.l_is,
                    l_is_se: s.l_is_se,
                    log_base_offset: s.log_base_offset,
                    log_likelihood_is: s.l_is + s.log_base_offset,
                    log_likelihood_snl: s.l_snl + s.log_base_offset,
                    flagged: s.flagged,
                    mean_b: None,
                    max_normalizer_gap: None,
                })
                .collect(),
        });
    }
    Ok(runs)
}

fn regression_runs(ckpt: &Checkpoint, splits: &[(String, Array2<f64>)], args: &EvalArgs) -> anyhow::Result<Vec<RunRecord>> {
    let ModelRecord::Conditional { state } = &ckpt.model else {
        unreachable!("caller matched the conditional variant")
    };
    let proposal = ckpt
        .eval_proposal
        .as_ref()
        .ok_or_else(|| Invalid(vec!["conditional checkpoint lacks an evaluation proposal".into()]))?;
    let mut runs = Vec::new();
    for &seed in args.seeds {
        let mut records = Vec::new();
        for (name, points) in splits {
            let mut rng = stream(seed, streams::EVALUATION);
            let r = state.report(points.view(), proposal, args.samples, &mut rng)?;
            records.push(SplitRecord {
                split: name.clone(),
                count: r.count,
                l_snl: r.l_snl,
                l_snl_se: r.l_snl_se,
                l_is: r.l_is,
                l_is_se: r.l_is_se,
                log_base_offset: r.log_base_offset,
                log_likelihood_is: r.l_is + r.log_base_offset,
                log_likelihood_snl: r.l_snl + r.log_base_offset,
                flagged: flagged(r.l_snl, r.l_snl_se, r.l_is, r.l_is_se),
                mean_b: Some(r.mean_b),
                max_normalizer_gap: Some(r.max_normalizer_gap),
            });
        }
        runs.push(RunRecord {
            seed,
            b: None,
            log_z: None,
            log_z_se: None,
            splits: records,
        });
    }
    Ok(runs)
}

pub fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let mut problems = Vec::new();
    if args.samples == 0 {
        problems.push("--samples must be positive".to_string());
    }
    if args.seeds.is_empty() {
        problems.push("--seeds must not be empty".to_string());
    }
    if !problems.is_empty() {
        return Err(Invalid(problems).into());
    }
    let ckpt = Checkpoint::load(args.checkpoint)?;
    let (label, splits) = eval_splits(&ckpt, &args)?;
    let runs = match ckpt.model {
        ModelRecord::Conditional { .. } => regression_runs(&ckpt, &splits, &args)?,
        _ => density_runs(&ckpt, &label, &splits, &args)?,
    };
    let objective = ckpt.objective.name().to_string();
    let aggregate = splits
        .iter()
        .enumerate()
        .map(|(j, (name, _))| {
            let is: Vec<f64> = runs.iter().map(|r| r.splits[j].log_likelihood_is).collect();
            let snl: Vec<f64> = runs.iter().map(|r| r.splits[j].log_likelihood_snl).collect();
            let (is_mean, is_std) = mean_std(&is);
            let (snl_mean, snl_std) = mean_std(&snl);
            Aggregate {
                split: name.clone(),
                seeds: runs.len(),
                log_likelihood_is_mean: is_mean,
                log_likelihood_is_std: is_std,
                log_likelihood_snl_mean: snl_mean,
                log_likelihood_snl_std: snl_std,
                table_row: format!("{label} | {} | {is_mean:.3} ± {is_std:.3}", objective.to_uppercase()),
            }
        })
        .collect::<Vec<_>>();
    for a in &aggregate {
        println!("{}", a.table_row);
    }
    let report = Report {
        checkpoint: args.checkpoint.display().to_string(),
        dataset: label,
        objective,
        samples: args.samples,
        seeds: args.seeds.to_vec(),
        log_jacobian: ckpt.standardizer.as_ref().map(|s| s.to_standardizer().log_jacobian()),
        aggregate,
        runs,
    };
    let text = toml::to_string(&report)?;
    match args.out {
        Some(path) => write_text(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
