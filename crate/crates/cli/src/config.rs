//! Layered run configuration: built-in defaults, then the TOML file, then
//! command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mtflow::data::SplitSpec;
use mtflow::datagen::{FilamentSpec, NoiseSpec};
use mtflow::infer::InferenceConfig;
use mtflow::model::ModelConfig;
use mtflow::pipeline::desk_train_config;
use mtflow::train::{ModelKind, TrainConfig};

pub const EFFECTIVE_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Uniform intensity along filaments.
    Simple,
    /// Intensity decays along each filament.
    Complex,
}

impl Variant {
    pub fn filament_spec(self) -> FilamentSpec {
        match self {
            Variant::Simple => FilamentSpec::simple(),
            Variant::Complex => FilamentSpec::complex(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub variant: Variant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub model: ModelKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

/// Every setting of every subcommand. Sections mirror the library types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub generate: GenerateSection,
    pub filament: FilamentSpec,
    pub noise: NoiseSpec,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferenceConfig,
    pub paths: Paths,
}

/// Which defaults apply before the file is merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Full-size network and the published optimization settings.
    Standard,
    /// The desk-scale reproduction: 16 filters, 30-epoch budget.
    Desk,
}

impl RunConfig {
    pub fn defaults(profile: Profile, kind: ModelKind, variant: Variant) -> Self {
        let (model, train) = match profile {
            Profile::Standard => (kind.default_config(), TrainConfig::default()),
            Profile::Desk => (ModelConfig { base_filters: 16, ..kind.default_config() }, desk_train_config()),
        };
        Self {
            run: RunSection { model: kind },
            generate: GenerateSection {
                count: 80,
                size: 64,
                seed: 7,
                variant,
            },
            filament: variant.filament_spec(),
            noise: NoiseSpec::default(),
            split: SplitSpec::default(),
            model,
            train,
            infer: InferenceConfig::default(),
            paths: Paths::default(),
        }
    }

    /// Defaults for `profile`, overlaid with `file` if given. The model kind
    /// and dataset variant are read from the file (or the flag overrides)
    /// first, since they select the defaults of other sections.
    pub fn load(
        file: Option<&Path>,
        profile: Profile,
        kind_flag: Option<ModelKind>,
        variant_flag: Option<Variant>,
    ) -> Result<Self> {
        let file_value = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Some(text.parse::<toml::Table>().with_context(|| format!("parsing config {}", p.display()))?)
            }
            None => None,
        };
        let lookup = |section: &str, key: &str| -> Option<String> {
            file_value
                .as_ref()?
                .get(section)?
                .get(key)?
                .as_str()
                .map(str::to_string)
        };
        let kind = match (kind_flag, lookup("run", "model")) {
            (Some(k), _) => k,
            (None, Some(s)) => s.parse()?,
            (None, None) => ModelKind::MtFlow,
        };
        let variant = match (variant_flag, lookup("generate", "variant")) {
            (Some(v), _) => v,
            (None, Some(s)) => match s.as_str() {
                "simple" => Variant::Simple,
                "complex" => Variant::Complex,
                other => bail!("unknown variant {other:?}"),
            },
            (None, None) => Variant::Simple,
        };
        let defaults = Self::defaults(profile, kind, variant);
        let mut merged = toml::Table::try_from(&defaults).context("serializing defaults")?;
        if let Some(file) = file_value {
            merge(&mut merged, file);
        }
        let mut cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .context("invalid configuration")?;
        cfg.run.model = kind;
        cfg.generate.variant = variant;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the effective configuration next to a run's outputs.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
