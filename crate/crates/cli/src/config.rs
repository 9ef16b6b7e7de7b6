//! Experiment configuration: one JSON document with one section per module.
//!
//! Unknown keys are rejected everywhere; missing keys (or whole missing
//! sections) fall back to the documented desk-scale defaults. Sections must
//! also agree with each other — the network's condition dimensions have to
//! match what the synthetic generator emits — and those cross-checks happen
//! here, once, so every command starts from a coherent setup.

use anyhow::{bail, Context};
use hierdiff_core::guidance::GuidanceConfig;
use hierdiff_core::network::NetworkConfig;
use hierdiff_core::schedule::NoiseSchedule;
use hierdiff_core::synthdata::SynthSpec;
use hierdiff_core::token_space::StateSpaceConfig;
use hierdiff_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub state_space: StateSpaceConfig,
    pub schedule: NoiseSchedule,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub synth: SynthSpec,
}

impl ExperimentConfig {
    /// Loads and fully validates a config file; `None` means all defaults.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let config: ExperimentConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.state_space.validate()?;
        self.schedule.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        self.guidance.validate()?;
        self.synth.validate()?;

        // Cross-section consistency: the network's condition interfaces must
        // match the generator's outputs.
        if self.network.lip_dim != self.synth.phonemes {
            bail!(
                "network.lip_dim ({}) must equal synth.phonemes ({}): lip frames are \
                 phoneme-dimensional",
                self.network.lip_dim,
                self.synth.phonemes
            );
        }
        if self.network.id_dim != self.synth.id_dim {
            bail!(
                "network.id_dim ({}) must equal synth.id_dim ({})",
                self.network.id_dim,
                self.synth.id_dim
            );
        }
        if self.network.emo_classes != self.synth.emotions {
            bail!(
                "network.emo_classes ({}) must equal synth.emotions ({})",
                self.network.emo_classes,
                self.synth.emotions
            );
        }
        if self.network.adapter_in != self.synth.speakers {
            bail!(
                "network.adapter_in ({}) must equal synth.speakers ({}): the adapter maps \
                 speaker one-hots to identity vectors",
                self.network.adapter_in,
                self.synth.speakers
            );
        }
        Ok(())
    }
}
