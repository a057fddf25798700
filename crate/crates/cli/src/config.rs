//! Run configuration: one TOML file with top-level keys and the dotted
//! sections `dataset`, `train`, `regression` and `eval`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use snl::datasets::DENSITY_NAMES;
use snl::regression::RegressionConfig;
use snl::training::TrainConfig;

use crate::Invalid;

pub const PROPOSAL_KINDS: [&str; 4] = ["standard_gaussian", "fitted_gaussian", "uniform_box", "two_point_uniform"];
pub const REGRESSION_NAMES: [&str; 2] = ["regression1", "regression2"];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_task")]
    pub task: String,
    /// `mlp`, `gaussian_mean` or `bernoulli` for density runs.
    pub model: Option<String>,
    /// Base distribution of an `mlp` energy: `none` or a proposal kind.
    pub base: Option<String>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub regression: RegressionConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: Option<String>,
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default = "yes")]
    pub has_header: bool,
    /// Train/validation/test sizes for a file; named sets use their own.
    pub split: Option<[usize; 3]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            seeds: default_seeds(),
        }
    }
}

fn default_task() -> String {
    "density".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("run")
}

fn yes() -> bool {
    true
}

pub fn default_samples() -> usize {
    20_000
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

pub fn is_known_dataset(name: &str) -> bool {
    DENSITY_NAMES.contains(&name) || REGRESSION_NAMES.contains(&name)
}

impl RunConfig {
    pub fn model_kind(&self) -> &str {
        match (&self.model, self.task.as_str()) {
            (Some(m), _) => m,
            (None, "regression") => "conditional",
            (None, _) => "mlp",
        }
    }

    pub fn base_kind(&self) -> &str {
        self.base.as_deref().unwrap_or("none")
    }

    /// Read, reject unknown keys and check every setting. All problems are
    /// returned together.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Invalid(vec![format!("{}: {}", path.display(), e.message())]))?;
        let mut problems = strip_unknown_keys(&mut table);
        let mut config: RunConfig = match table.try_into() {
            Ok(c) => c,
            Err(e) => {
                problems.push(e.message().to_string());
                return Err(Invalid(problems).into());
            }
        };
        problems.extend(config.problems());
        if !problems.is_empty() {
            return Err(Invalid(problems).into());
        }
        if config.output_dir.is_relative() {
            if let Some(dir) = path.parent() {
                config.output_dir = dir.join(&config.output_dir);
            }
        }
        if let Some(p) = &config.dataset.path {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    config.dataset.path = Some(dir.join(p));
                }
            }
        }
        Ok(config)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let model = self.model_kind();
        match self.task.as_str() {
            "density" => {
                if !["mlp", "gaussian_mean", "bernoulli"].contains(&model) {
                    out.push(format!("unknown density model '{model}'"));
                }
                let base = self.base_kind();
                if base != "none" && !PROPOSAL_KINDS.contains(&base) {
                    out.push(format!("unknown base '{base}'"));
                }
                if model != "mlp" && base != "none" {
                    out.push(format!("model '{model}' has a fixed base; remove 'base'"));
                }
                let p = self.train.proposal.as_str();
                if p != "enumerate" && !PROPOSAL_KINDS.contains(&p) {
                    out.push(format!("unknown proposal '{p}'"));
                }
                out.extend(self.train.problems().into_iter().map(|p| format!("train: {p}")));
            }
            "regression" => {
                if model != "conditional" {
                    out.push(format!("regression runs use the conditional model, not '{model}'"));
                }
                if self.base.is_some() {
                    out.push("set the target base with 'regression.base'".to_string());
                }
                out.extend(self.regression.problems().into_iter().map(|p| format!("regression: {p}")));
            }
            other => out.push(format!("unknown task '{other}'")),
        }
        match (&self.dataset.name, &self.dataset.path) {
            (Some(_), Some(_)) => out.push("set only one of dataset.name and dataset.path".into()),
            (None, None) => out.push("dataset.name or dataset.path is required".into()),
            (Some(name), None) => {
                if !is_known_dataset(name) {
                    out.push(format!("unknown dataset '{name}'"));
                } else if (self.task == "regression") != REGRESSION_NAMES.contains(&name.as_str()) {
                    out.push(format!("dataset '{name}' does not fit task '{}'", self.task));
                }
                if self.dataset.split.is_some() {
                    out.push("dataset.split applies to files only".into());
                }
            }
            (None, Some(_)) => {
                if let Some(s) = self.dataset.split {
                    if s[0] == 0 {
                        out.push("dataset.split needs a nonempty training part".into());
                    }
                }
            }
        }
        if self.eval.samples == 0 {
            out.push("eval.samples must be positive".into());
        }
        if self.eval.seeds.is_empty() {
            out.push("eval.seeds must not be empty".into());
        }
        out
    }
}

fn keys_of<T: Serialize>(value: &T) -> Vec<String> {
    match toml::Value::try_from(value) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn strip_unknown_keys(table: &mut toml::Table) -> Vec<String> {
    let mut problems = Vec::new();
    let top = ["task", "model", "base", "output_dir", "dataset", "train", "regression", "eval"];
    table.retain(|k, _| {
        let ok = top.iter().any(|n| *n == k);
        if !ok {
            problems.push(format!("unknown key '{k}'"));
        }
        ok
    });
    let mut train = keys_of(&TrainConfig::default());
    train.push("nce_ratio".into());
    let mut regression = keys_of(&RegressionConfig::default());
    regression.push("nce_ratio".into());
    let sections: [(&str, Vec<String>); 4] = [
        (
            "dataset",
            ["name", "path", "seed", "standardize", "has_header", "split"]
                .map(String::from)
                .to_vec(),
        ),
        ("train", train),
        ("regression", regression),
        ("eval", vec!["samples".into(), "seeds".into()]),
    ];
    for (section, known) in sections {
        if let Some(toml::Value::Table(t)) = table.get_mut(section) {
            t.retain(|k, _| {
                let ok = known.iter().any(|n| n == k);
                if !ok {
                    problems.push(format!("unknown key '{section}.{k}'"));
                }
                ok
            });
        }
    }
    problems
}
