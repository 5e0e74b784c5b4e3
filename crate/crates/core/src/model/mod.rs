//! The spatio-temporal attention policy: a stacked temporal encoder and a
//! temporally pointing decoder sharing one parameter store.

pub mod beam;
pub mod decoder;
pub mod encoder;
pub mod rollout;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{input_dim, ProblemKind};
use crate::params::ParamStore;

pub use decoder::{DecodeMode, DecoderParams, PolicyStep};
pub use encoder::{EncoderConfig, EncoderParams, Layout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ProblemKind,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "default_clip")]
    pub clip: f64,
    #[serde(default)]
    pub mode: DecodeMode,
}

fn default_clip() -> f64 {
    10.0
}

impl ModelConfig {
    pub fn new(kind: ProblemKind) -> Self {
        ModelConfig {
            kind,
            encoder: EncoderConfig::default(),
            clip: default_clip(),
            mode: DecodeMode::Temporal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::param(format!("clip must be positive, got {}", self.clip)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        input_dim(self.kind)
    }
}

/// Configuration plus parameters. Parameter ids are a pure function of the
/// configuration, so a checkpoint only needs to persist the store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let encoder = EncoderParams::init(&mut store, &config.encoder, config.input_dim(), &mut rng);
        let decoder = DecoderParams::init(&mut store, &config, &mut rng);
        Ok(Model {
            config,
            store,
            encoder,
            decoder,
        })
    }

    /// Rebuilds a model around a stored parameter set, checking that names
    /// and shapes match the configuration.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        if store.len() != model.store.len() {
            return Err(Error::shape(format!(
                "checkpoint has {} tensors, configuration expects {}",
                store.len(),
                model.store.len()
            )));
        }
        for id in model.store.ids() {
            if store.name(id) != model.store.name(id)
                || store.get(id).dim() != model.store.get(id).dim()
            {
                return Err(Error::shape(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    store.name(id),
                    store.get(id).dim(),
                    model.store.name(id),
                    model.store.get(id).dim()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.encoder.hidden_dim
    }
}
