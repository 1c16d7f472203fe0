//! Model directories: `model.json` (architecture) next to `model.tgck`
//! (parameters).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Direction, GanArch, GanModel, StubPair, Translator};
use crate::error::{Error, Result};
use crate::sampler::seeded_rng;
use crate::tensor::checkpoint::{load_params, save_params, write_atomic};
use crate::tensor::{Graph, LayerSpec, ParamStore, Var};

pub const MANIFEST_FILE: &str = "model.json";
pub const PARAMS_FILE: &str = "model.tgck";
const FORMAT: &str = "tilegan-model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Gan {
        arch: GanArch,
        /// Informational copy of the layer table; ignored on load.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        generator_layers: Vec<LayerSpec>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        discriminator_layers: Vec<LayerSpec>,
        #[serde(default)]
        parameter_count: usize,
    },
    Stub(StubPair),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub model: ModelSpec,
}

impl ModelManifest {
    fn new(model: ModelSpec) -> Self {
        Self {
            format: FORMAT.into(),
            version: 1,
            model,
        }
    }
}

fn write_manifest(dir: &Path, manifest: &ModelManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_vec_pretty(manifest)?;
    write_atomic(&dir.join(MANIFEST_FILE), |w| {
        use std::io::Write;
        w.write_all(&json)?;
        w.write_all(b"\n")
    })
}

pub fn save_model(dir: &Path, model: &GanModel) -> Result<()> {
    let arch = *model.arch();
    write_manifest(
        dir,
        &ModelManifest::new(ModelSpec::Gan {
            arch,
            generator_layers: arch.generator_layers(),
            discriminator_layers: arch.discriminator_layers(),
            parameter_count: model.store().scalar_count(),
        }),
    )?;
    save_params(&dir.join(PARAMS_FILE), model.store())
}

pub fn save_stub(dir: &Path, stubs: StubPair) -> Result<()> {
    write_manifest(dir, &ModelManifest::new(ModelSpec::Stub(stubs)))
}

pub enum LoadedModel {
    Gan(Box<GanModel>),
    Stub(StubPair),
}

impl LoadedModel {
    pub fn as_gan(&self) -> Option<&GanModel> {
        match self {
            LoadedModel::Gan(m) => Some(m),
            LoadedModel::Stub(_) => None,
        }
    }

    pub fn into_gan(self) -> Option<GanModel> {
        match self {
            LoadedModel::Gan(m) => Some(*m),
            LoadedModel::Stub(_) => None,
        }
    }
}

impl Translator for LoadedModel {
    fn param_store(&self) -> Option<&ParamStore> {
        match self {
            LoadedModel::Gan(m) => m.param_store(),
            LoadedModel::Stub(s) => s.param_store(),
        }
    }

    fn forward<'p>(&'p self, g: &mut Graph<'p>, dir: Direction, x: Var) -> Result<Var> {
        match self {
            LoadedModel::Gan(m) => m.forward(g, dir, x),
            LoadedModel::Stub(s) => s.forward(g, dir, x),
        }
    }
}

/// Load a model directory written by [`save_model`] or [`save_stub`].
pub fn load_model(dir: &Path) -> Result<LoadedModel> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ModelManifest = serde_json::from_slice(&text)?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported model format {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    match manifest.model {
        ModelSpec::Stub(s) => Ok(LoadedModel::Stub(s)),
        ModelSpec::Gan { arch, .. } => {
            // the init values are overwritten by the archive
            let mut model = GanModel::new(arch, &mut seeded_rng(0))?;
            load_params(&dir.join(PARAMS_FILE), model.store_mut())?;
            Ok(LoadedModel::Gan(Box::new(model)))
        }
    }
}
