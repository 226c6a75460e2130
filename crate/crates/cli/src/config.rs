use std::path::Path;

use mcsa_core::encoder::MfccaConfig;
use mcsa_core::frontend::FeatureKind;
use mcsa_core::metrics::SpeakerErrorConvention;
use mcsa_core::model::ModelConfig;
use mcsa_core::segment::SegmentationConfig;
use mcsa_core::simulate::SimulationConfig;
use mcsa_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Model sizes used by the CLI. Defaults are desk-scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub context_frames: usize,
    pub ff_dim: usize,
    pub conv_kernel: usize,
    pub decoder_ff_dim: usize,
    pub speaker_decoder_layers: usize,
    pub asr_decoder_layers: usize,
    pub embedding_dim: usize,
    /// Mel bins for Mel features and for the speaker encoder.
    pub n_mels: usize,
    pub speaker_weight: f64,
    pub include_sc_in_speaker_loss: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            encoder_layers: 2,
            context_frames: 2,
            ff_dim: 64,
            conv_kernel: 5,
            decoder_ff_dim: 64,
            speaker_decoder_layers: 2,
            asr_decoder_layers: 1,
            embedding_dim: 16,
            n_mels: 40,
            speaker_weight: mcsa_core::decoder::DEFAULT_SPEAKER_WEIGHT,
            include_sc_in_speaker_loss: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub features: FeatureKind,
    /// Microphones fed to the model, taken from the front of the array.
    pub channels: usize,
    pub seed: u64,
    pub n_mixtures: usize,
    pub simulation: SimulationConfig,
    pub model: ModelDims,
    pub train: TrainConfig,
    pub decode_max_len: usize,
    pub scoring: SpeakerErrorConvention,
    pub segmentation: SegmentationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            features: FeatureKind::Mel,
            channels: 2,
            seed: 0,
            n_mixtures: 10,
            simulation: SimulationConfig::default(),
            model: ModelDims::default(),
            train: TrainConfig::default(),
            decode_max_len: 64,
            scoring: SpeakerErrorConvention::default(),
            segmentation: SegmentationConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(1..=4).contains(&self.channels) {
            return Err(CliError::Validation(format!("channels must be 1..=4, got {}", self.channels)));
        }
        if self.channels > self.simulation.n_mics {
            return Err(CliError::Validation(format!(
                "{} channels requested but arrays have {} microphones",
                self.channels, self.simulation.n_mics
            )));
        }
        if self.decode_max_len == 0 {
            return Err(CliError::Validation("decode_max_len must be positive".into()));
        }
        self.simulation.validate()?;
        self.segmentation.validate()?;
        self.model_config(4)?.validate()?;
        Ok(())
    }

    /// STFT bins at the default 25 ms window and 16 kHz.
    pub fn input_bins(&self) -> usize {
        match self.features {
            FeatureKind::Mel => self.model.n_mels,
            FeatureKind::MagPhase => {
                let window = (mcsa_core::frontend::DEFAULT_WINDOW_MS * self.simulation.synth.sample_rate as f64
                    / 1000.0)
                    .round() as usize;
                window / 2 + 1
            }
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig, CliError> {
        let m = &self.model;
        Ok(ModelConfig {
            features: self.features,
            input_bins: self.input_bins(),
            speaker_mels: m.n_mels,
            channels: self.channels,
            encoder: MfccaConfig {
                d_model: m.d_model,
                heads: m.heads,
                context_frames: m.context_frames,
                num_layers: m.encoder_layers,
                ff_dim: m.ff_dim,
                conv_kernel: m.conv_kernel,
            },
            decoder_heads: m.heads,
            decoder_ff_dim: m.decoder_ff_dim,
            speaker_decoder_layers: m.speaker_decoder_layers,
            asr_decoder_layers: m.asr_decoder_layers,
            embedding_dim: m.embedding_dim,
            vocab_size,
            speaker_weight: m.speaker_weight,
            include_sc_in_speaker_loss: m.include_sc_in_speaker_loss,
            seed: self.seed,
        })
    }
}
