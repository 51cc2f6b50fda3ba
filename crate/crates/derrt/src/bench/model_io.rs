//! Unified steering-model persistence for the CLI: a parameter file plus a
//! JSON manifest describing which model family and architecture to rebuild.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::HmmModel;
use crate::neural::{NeuralConfig, RecurrentSteeringModel};
use crate::numerics::ParamFile;
use crate::planner::{HmmFeatureKind, HmmSteering, RecurrentSteering, SteeringModel};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelManifest {
    Hmm { features: HmmFeatureKind },
    Gru { config: NeuralConfig },
}

/// A loaded steering model of either family.
pub enum SteeringModelKind {
    Hmm(Box<HmmSteering>),
    Recurrent(Box<RecurrentSteering>),
}

impl SteeringModelKind {
    pub fn as_dyn(&self) -> &dyn SteeringModel {
        match self {
            SteeringModelKind::Hmm(m) => m.as_ref(),
            SteeringModelKind::Recurrent(m) => m.as_ref(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            SteeringModelKind::Hmm(_) => "hmm",
            SteeringModelKind::Recurrent(_) => "gru",
        }
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest.json");
    PathBuf::from(os)
}

pub fn save_hmm(path: impl AsRef<Path>, model: &HmmModel, features: HmmFeatureKind) -> Result<()> {
    let path = path.as_ref();
    model.to_params().save(path)?;
    let manifest = ModelManifest::Hmm { features };
    std::fs::write(
        manifest_path(path),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn save_gru(path: impl AsRef<Path>, model: &RecurrentSteeringModel) -> Result<()> {
    let path = path.as_ref();
    model.to_params().save(path)?;
    let manifest = ModelManifest::Gru {
        config: model.config.clone(),
    };
    std::fs::write(
        manifest_path(path),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SteeringModelKind> {
    let path = path.as_ref();
    let manifest_file = manifest_path(path);
    let manifest_text = std::fs::read_to_string(&manifest_file).map_err(|e| {
        Error::ModelFormat(format!(
            "cannot read model manifest {}: {e}",
            manifest_file.display()
        ))
    })?;
    let manifest: ModelManifest = serde_json::from_str(&manifest_text)?;
    let params = ParamFile::load(path)?;
    match manifest {
        ModelManifest::Hmm { features } => {
            let model = HmmModel::from_params(params)?;
            Ok(SteeringModelKind::Hmm(Box::new(HmmSteering::new(
                model, features,
            ))))
        }
        ModelManifest::Gru { config } => {
            let model = RecurrentSteeringModel::from_params(config, params)?;
            Ok(SteeringModelKind::Recurrent(Box::new(
                RecurrentSteering::new(model),
            )))
        }
    }
}
