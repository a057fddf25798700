//! Trained state on disk as JSON. Floats are written in shortest
//! round-trip form, so loading gives back the exact parameters.

use std::path::Path;

use anyhow::Context;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use snl::datasets::Standardizer;
use snl::models::Domain;
use snl::nn::MlpShape;
use snl::regression::RegressionState;
use snl::training::{Objective, Sampler};
use snl::{BaseDistribution, BernoulliModel, EnergyModel, GaussianMeanModel, MlpEnergy, Proposal};

use crate::Invalid;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelRecord {
    Mlp {
        shape: MlpShape,
        params: Vec<f64>,
        base: BaseDistribution,
    },
    GaussianMean {
        theta: f64,
    },
    Bernoulli {
        theta: f64,
    },
    Conditional {
        state: RegressionState,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub name: Option<String>,
    pub seed: u64,
    pub has_header: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizerRecord {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizerRecord {
    pub fn from_standardizer(s: &Standardizer) -> Self {
        Self {
            mean: s.mean.to_vec(),
            std: s.std.to_vec(),
        }
    }

    pub fn to_standardizer(&self) -> Standardizer {
        Standardizer {
            mean: Array1::from(self.mean.clone()),
            std: Array1::from(self.std.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub objective: Objective,
    pub seed: u64,
    pub epoch: usize,
    /// Scalar `log Z` estimate; unused by conditional models.
    pub b: f64,
    pub model: ModelRecord,
    /// Training proposal kind, `enumerate` included.
    pub proposal: String,
    /// The fitted training proposal for drawing kinds.
    pub proposal_density: Option<Proposal>,
    /// Target proposal used to evaluate conditional models.
    pub eval_proposal: Option<Proposal>,
    pub dataset: DatasetRecord,
    pub standardizer: Option<StandardizerRecord>,
}

/// A density model restored from a checkpoint.
pub enum DensityModel {
    Mlp(MlpEnergy),
    GaussianMean(GaussianMeanModel),
    Bernoulli(BernoulliModel),
}

impl DensityModel {
    pub fn as_model(&self) -> &dyn EnergyModel {
        match self {
            DensityModel::Mlp(m) => m,
            DensityModel::GaussianMean(m) => m,
            DensityModel::Bernoulli(m) => m,
        }
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Invalid(vec![format!(
                    "{}: checkpoint format version {v}, this build reads version {FORMAT_VERSION}",
                    path.display()
                )])
                .into())
            }
            None => {
                return Err(Invalid(vec![format!("{}: missing format_version", path.display())]).into())
            }
        }
        Ok(serde_json::from_value(value).with_context(|| format!("decoding {}", path.display()))?)
    }

    pub fn density_model(&self) -> anyhow::Result<DensityModel> {
        Ok(match &self.model {
            ModelRecord::Mlp { shape, params, base } => {
                DensityModel::Mlp(MlpEnergy::from_params(shape.clone(), params.clone(), base.clone())?)
            }
            ModelRecord::GaussianMean { theta } => DensityModel::GaussianMean(GaussianMeanModel::new(*theta)),
            ModelRecord::Bernoulli { theta } => DensityModel::Bernoulli(BernoulliModel::new(*theta)),
            ModelRecord::Conditional { .. } => {
                return Err(snl::SnlError::Unsupported("conditional checkpoint in a density command".into()).into())
            }
        })
    }

    pub fn sampler(&self, domain: &Domain) -> anyhow::Result<Sampler> {
        match &self.proposal_density {
            Some(p) => Ok(Sampler::Draw(p.clone())),
            None => Ok(Sampler::resolve(&self.proposal, Array2::<f64>::zeros((0, 0)).view(), domain)?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use snl::models::density_architecture;
    use snl::rng::stream;

    #[test]
    fn save_then_load_is_exact() {
        let base = BaseDistribution::new(Proposal::StandardGaussian { dim: 2 });
        let model = MlpEnergy::new(density_architecture(), base.clone(), &mut stream(4, 3)).unwrap();
        let ckpt = Checkpoint {
            format_version: FORMAT_VERSION,
            objective: Objective::Snl,
            seed: 4,
            epoch: 7,
            b: -0.1 / 3.0,
            model: ModelRecord::Mlp {
                shape: density_architecture(),
                params: model.params().to_vec(),
                base,
            },
            proposal: "standard_gaussian".into(),
            proposal_density: Some(Proposal::StandardGaussian { dim: 2 }),
            eval_proposal: None,
            dataset: DatasetRecord {
                name: Some("checkerboard".into()),
                seed: 0,
                has_header: true,
            },
            standardizer: Some(StandardizerRecord {
                mean: vec![0.1, 1.0 / 7.0],
                std: vec![2.0f64.sqrt(), 3.3],
            }),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        let DensityModel::Mlp(restored) = back.density_model().unwrap() else {
            panic!("expected an mlp")
        };
        let bits = |p: &[f64]| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(restored.params()), bits(model.params()));
    }
}
