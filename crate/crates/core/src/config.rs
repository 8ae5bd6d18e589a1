//! The single JSON run configuration and its resolution.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{generate_factored_dataset, load_image_folders, split_train_val, FactorSpec, MultiDomainDataset};
use crate::error::{Error, Result};
use crate::evaluation::{PipelineConfig, ProtocolConfig};
use crate::model::ModelConfig;
use crate::objectives::LossConfig;
use crate::trainer::{TrainConfig, TrainMode};

pub const SEED_ENV: &str = "DISMAE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Procedural dataset; used when `folder` is absent.
    pub spec: Option<FactorSpec>,
    /// `root/<domain>/[<class>/]*.png`
    pub folder: Option<PathBuf>,
    pub labeled: bool,
    /// Held out from pretraining and used for evaluation.
    pub test_domains: Vec<String>,
    /// Carve a stratified validation split off the training domains.
    pub val_fraction: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            spec: None,
            folder: None,
            labeled: true,
            test_domains: vec!["yellow".into()],
            val_fraction: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: ProtocolConfig,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: ProtocolConfig::default(),
            output: None,
        }
    }
}

/// Training, held-out test and optional validation splits.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: MultiDomainDataset,
    pub test: MultiDomainDataset,
    pub val: Option<MultiDomainDataset>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&MultiDomainDataset> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            "val" => self
                .val
                .as_ref()
                .ok_or_else(|| Error::config("no validation split; set data.val_fraction")),
            other => Err(Error::config(format!("unknown split {other:?}; expected train, val or test"))),
        }
    }
}

/// Flag beats environment beats config.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        None => Ok(config),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fill implied defaults, apply the seed override and validate.
    pub fn resolve(mut self, seed_flag: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let env = std::env::var(SEED_ENV).ok();
        let seed = resolve_seed(seed_flag, env.as_deref(), self.train.seed)?;
        self.train.seed = seed;
        if seed_flag.is_some() || env.is_some() {
            self.eval.seed = seed;
        }
        if let Some(o) = out {
            self.output = Some(o.to_path_buf());
        }
        match (&self.data.spec, &self.data.folder) {
            (Some(_), Some(_)) => return Err(Error::config("data.spec and data.folder are mutually exclusive")),
            (None, None) => self.data.spec = Some(FactorSpec::default()),
            _ => {}
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.validate()?;
        if let Some(spec) = &self.data.spec {
            spec.validate()?;
            let names: Vec<&str> = spec.domains.iter().map(|d| d.name.as_str()).collect();
            for t in &self.data.test_domains {
                if !names.contains(&t.as_str()) {
                    return Err(Error::config(format!("test domain {t:?} is not among {names:?}")));
                }
            }
            let k = spec.domains.len() - self.data.test_domains.len();
            if self.model.num_domains != k {
                return Err(Error::config(format!(
                    "model.num_domains is {} but data.spec leaves {k} training domains",
                    self.model.num_domains
                )));
            }
            if self.model.image_size != spec.image_size {
                return Err(Error::config(format!(
                    "model.image_size {} differs from data.spec.image_size {}",
                    self.model.image_size, spec.image_size
                )));
            }
            if self.model.num_classes != 0 && self.model.num_classes != spec.num_classes {
                return Err(Error::config(format!(
                    "model.num_classes {} differs from data.spec.num_classes {}",
                    self.model.num_classes, spec.num_classes
                )));
            }
        }
        if self.train.mode == TrainMode::Dg && !self.data.labeled {
            return Err(Error::config("train.mode dg needs data.labeled = true"));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            model: self.model.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
            eval: self.eval.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Echo the resolved config into `dir/config.resolved.json`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.resolved.json");
        fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))
    }

    pub fn load_splits(&self) -> Result<Splits> {
        let all = match (&self.data.spec, &self.data.folder) {
            (Some(spec), None) => generate_factored_dataset(spec, None)?,
            (None, Some(folder)) => load_image_folders(folder, self.data.labeled)?.0,
            _ => return Err(Error::config("exactly one of data.spec and data.folder must be set")),
        };
        let test = all.filter_domains(&self.data.test_domains)?;
        let train = all.without_domains(&self.data.test_domains)?;
        let (train, val) = match self.data.val_fraction {
            Some(f) => {
                let (t, v) = split_train_val(&train, f, self.train.seed)?;
                (t, Some(v))
            }
            None => (train, None),
        };
        Ok(Splits { train, test, val })
    }
}
