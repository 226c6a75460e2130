//! The assembled multichannel speaker-attributed ASR model.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::decoder::{
    decoder_step, joint_loss_graph, speaker_branch, AsrDecoder, JointLossReport, LossTargets, Vocab,
    DEFAULT_SPEAKER_WEIGHT, EOS_ID, SOS_ID,
};
use crate::encoder::{interleave_channels, MfccaConfig, MfccaEncoder};
use crate::error::{Error, Result};
use crate::frontend::{ConvFrontend, FeatureKind, FrontendInput, DEFAULT_N_MELS};
use crate::init::Initializer;
use crate::nn::Linear;
use crate::sot::SotTranscript;
use crate::speaker::{
    speaker_decode, speaker_posterior, weighted_profile, SpeakerDecoder, SpeakerEmbeddingSeq, SpeakerEncoderStub,
    SpeakerProfileMatrix,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub features: FeatureKind,
    /// Mel bins or STFT bins fed to the ASR frontend.
    pub input_bins: usize,
    /// Mel bins of the speaker-encoder stub.
    pub speaker_mels: usize,
    pub channels: usize,
    pub encoder: MfccaConfig,
    pub decoder_heads: usize,
    pub decoder_ff_dim: usize,
    pub speaker_decoder_layers: usize,
    pub asr_decoder_layers: usize,
    /// Speaker embedding size `E`.
    pub embedding_dim: usize,
    pub vocab_size: usize,
    pub speaker_weight: f64,
    pub include_sc_in_speaker_loss: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: FeatureKind::Mel,
            input_bins: DEFAULT_N_MELS,
            speaker_mels: DEFAULT_N_MELS,
            channels: 4,
            encoder: MfccaConfig::default(),
            decoder_heads: 4,
            decoder_ff_dim: 2048,
            speaker_decoder_layers: 2,
            asr_decoder_layers: 1,
            embedding_dim: 192,
            vocab_size: 5000,
            speaker_weight: DEFAULT_SPEAKER_WEIGHT,
            include_sc_in_speaker_loss: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small model for desk-scale training and tests.
    pub fn toy(features: FeatureKind, input_bins: usize, channels: usize, vocab_size: usize) -> Self {
        Self {
            features,
            input_bins,
            speaker_mels: if features == FeatureKind::Mel { input_bins } else { 20 },
            channels,
            encoder: MfccaConfig {
                d_model: 32,
                heads: 4,
                context_frames: 2,
                num_layers: 2,
                ff_dim: 64,
                conv_kernel: 5,
            },
            decoder_heads: 4,
            decoder_ff_dim: 64,
            embedding_dim: 16,
            vocab_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.channels == 0 {
            return Err(Error::invalid("model needs at least one channel"));
        }
        if self.decoder_heads == 0 || !self.encoder.d_model.is_multiple_of(self.decoder_heads) {
            return Err(Error::invalid("decoder heads must divide the model dimension"));
        }
        if self.vocab_size < 4 || self.embedding_dim == 0 || self.input_bins == 0 || self.speaker_mels == 0 {
            return Err(Error::invalid("vocabulary, embedding and feature sizes must be positive"));
        }
        if !(self.speaker_weight.is_finite() && self.speaker_weight >= 0.0) {
            return Err(Error::invalid("speaker loss weight must be a non-negative number"));
        }
        Ok(())
    }
}

/// Where the frame-level speaker embeddings come from.
#[derive(Clone, Debug)]
pub enum SpeakerInput {
    /// Channel-averaged log-Mel (`T_stft x M`) for the built-in stub.
    Mel(Array2<f64>),
    External(SpeakerEmbeddingSeq),
}

#[derive(Clone, Debug)]
pub struct ModelInput {
    pub features: FrontendInput,
    pub speaker: SpeakerInput,
}

/// Loss nodes of one teacher-forced forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub asr: Var,
    pub speaker: Var,
    pub total: Var,
    pub token_logits: Var,
    pub speaker_posteriors: Var,
}

#[derive(Clone, Debug)]
pub struct SaAsrModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub frontend: ConvFrontend,
    pub input_proj: Linear,
    pub encoder: MfccaEncoder,
    pub speaker_encoder: SpeakerEncoderStub,
    pub speaker_decoder: SpeakerDecoder,
    pub asr_decoder: AsrDecoder,
}

impl SaAsrModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(config.seed);
        let d = config.encoder.d_model;
        let frontend = ConvFrontend::new(&mut store, &mut init, "frontend", config.features, config.input_bins);
        let input_proj = Linear::new(&mut store, &mut init, "input_proj", frontend.output_dim(), d, true);
        let encoder = MfccaEncoder::new(&mut store, &mut init, "encoder", &config.encoder, config.channels)?;
        let speaker_encoder = SpeakerEncoderStub::new(&mut store, &mut init, "speaker_encoder", config.speaker_mels, d);
        let speaker_decoder = SpeakerDecoder::new(
            &mut store,
            &mut init,
            "speaker_decoder",
            config.vocab_size,
            d,
            config.decoder_heads,
            config.decoder_ff_dim,
            config.speaker_decoder_layers,
            config.embedding_dim,
        );
        let asr_decoder = AsrDecoder::new(
            &mut store,
            &mut init,
            "asr_decoder",
            config.vocab_size,
            d,
            config.decoder_heads,
            config.decoder_ff_dim,
            config.asr_decoder_layers,
            config.embedding_dim,
        );
        Ok(Self {
            config,
            store,
            frontend,
            input_proj,
            encoder,
            speaker_encoder,
            speaker_decoder,
            asr_decoder,
        })
    }

    /// Replaces every parameter with the same-named entry of `params`.
    pub fn load_params(&mut self, params: &ParamStore) -> Result<()> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.name(id).to_string();
            let src = params
                .id(&name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter `{name}`")))?;
            let value = params.get(src);
            if value.dim() != self.store.get(id).dim() {
                return Err(Error::shape(format!(
                    "parameter `{name}` is {:?} in the checkpoint, model expects {:?}",
                    value.dim(),
                    self.store.get(id).dim()
                )));
            }
            self.store.get_mut(id).assign(value);
        }
        Ok(())
    }

    /// Builds `(H^asr, H^spk, frames)` nodes.
    pub fn encode_graph(&self, g: &mut Graph, input: &ModelInput) -> Result<(Var, Var, usize)> {
        let features = if input.features.channels() > self.config.channels {
            input.features.take_channels(self.config.channels)?
        } else {
            input.features.clone()
        };
        if features.channels() != self.config.channels {
            return Err(Error::shape(format!(
                "model expects {} channels, input has {}",
                self.config.channels,
                features.channels()
            )));
        }
        let frames = features.frames();
        let planes = self.frontend.channel_inputs(&features)?;
        let mut projected = Vec::with_capacity(planes.len());
        for plane in planes {
            let x = g.constant(plane);
            let h = self.frontend.forward_channel(g, x, frames)?;
            projected.push(self.input_proj.forward(g, h));
        }
        let out_frames = self.frontend.output_frames(frames);
        let x = interleave_channels(g, &projected);
        let (_, h_asr) = self.encoder.forward(g, x, out_frames);
        let h_spk = match &input.speaker {
            SpeakerInput::Mel(mel) => self.speaker_encoder.forward(g, mel)?,
            SpeakerInput::External(seq) => {
                if seq.values.ncols() != self.config.encoder.d_model {
                    return Err(Error::shape(format!(
                        "external speaker embeddings have {} dims, model uses {}",
                        seq.values.ncols(),
                        self.config.encoder.d_model
                    )));
                }
                g.constant(seq.values.clone())
            }
        };
        let spk_frames = g.shape(h_spk).0;
        if spk_frames != out_frames {
            return Err(Error::shape(format!(
                "speaker embeddings have {spk_frames} frames, encoder output has {out_frames}"
            )));
        }
        Ok((h_asr, h_spk, out_frames))
    }

    /// `(H^asr, H^spk)` values.
    pub fn encode(&self, input: &ModelInput) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut g = Graph::new(&self.store);
        let (a, s, _) = self.encode_graph(&mut g, input)?;
        Ok((g.value(a).clone(), g.value(s).clone()))
    }

    /// Teacher-forced joint objective.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        input: &ModelInput,
        targets: &LossTargets,
        profiles: &SpeakerProfileMatrix,
    ) -> Result<LossNodes> {
        self.check_profiles(profiles)?;
        let (h_asr, h_spk, _) = self.encode_graph(g, input)?;
        let queries = self.speaker_decoder.forward(g, &targets.inputs, h_asr, h_spk)?;
        let (spk_logits, post, weighted) = speaker_branch(g, queries, profiles);
        let token_logits = self.asr_decoder.forward(g, &targets.inputs, h_asr, weighted)?;
        let (asr, speaker, total) =
            joint_loss_graph(g, token_logits, spk_logits, targets, self.config.speaker_weight);
        Ok(LossNodes {
            asr,
            speaker,
            total,
            token_logits,
            speaker_posteriors: post,
        })
    }

    pub fn loss(
        &self,
        input: &ModelInput,
        targets: &LossTargets,
        profiles: &SpeakerProfileMatrix,
    ) -> Result<JointLossReport> {
        let mut g = Graph::new(&self.store);
        let nodes = self.loss_graph(&mut g, input, targets, profiles)?;
        Ok(JointLossReport::new(
            g.value(nodes.asr)[[0, 0]],
            g.value(nodes.speaker)[[0, 0]],
            self.config.speaker_weight,
        ))
    }

    pub fn targets(
        &self,
        transcript: &SotTranscript,
        vocab: &Vocab,
        profiles: &SpeakerProfileMatrix,
    ) -> Result<LossTargets> {
        if vocab.len() != self.config.vocab_size {
            return Err(Error::shape(format!(
                "vocabulary has {} tokens, model was built for {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        LossTargets::from_transcript(transcript, vocab, profiles, self.config.include_sc_in_speaker_loss)
    }

    fn check_profiles(&self, profiles: &SpeakerProfileMatrix) -> Result<()> {
        if profiles.embedding_dim() != self.config.embedding_dim {
            return Err(Error::shape(format!(
                "profiles have E = {}, model uses {}",
                profiles.embedding_dim(),
                self.config.embedding_dim
            )));
        }
        Ok(())
    }

    /// Encodes `input` and decodes greedily.
    pub fn transcribe(
        &self,
        input: &ModelInput,
        profiles: &SpeakerProfileMatrix,
        vocab: &Vocab,
        max_len: usize,
    ) -> Result<SotTranscript> {
        self.check_profiles(profiles)?;
        let (h_asr, h_spk) = self.encode(input)?;
        greedy_decode_sot(self, &h_asr, &h_spk, profiles, vocab, max_len)
    }
}

/// Greedy SOT decoding: per step the speaker decoder's query gives a
/// posterior over enrolled speakers, its weighted profile conditions the
/// ASR decoder, and the argmax token is emitted with the argmax speaker.
pub fn greedy_decode_sot(
    model: &SaAsrModel,
    h_asr: &Array2<f64>,
    h_spk: &Array2<f64>,
    profiles: &SpeakerProfileMatrix,
    vocab: &Vocab,
    max_len: usize,
) -> Result<SotTranscript> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut prefix = vec![SOS_ID];
    let mut history: Vec<Vec<f64>> = Vec::new();
    let mut tokens = Vec::new();
    let mut speakers = Vec::new();
    for _ in 0..max_len {
        let q = speaker_decode(&model.store, &model.speaker_decoder, &prefix, h_asr, h_spk)?;
        let post = speaker_posterior(&q, profiles)?;
        history.push(weighted_profile(&post, profiles)?);
        let logits = decoder_step(&model.store, &model.asr_decoder, &prefix, h_asr, &history)?;
        let next = argmax(&logits);
        if next == EOS_ID {
            break;
        }
        tokens.push(vocab.token(next).unwrap_or("<unk>").to_string());
        speakers.push(profiles.speaker_ids()[post.argmax()].clone());
        prefix.push(next);
    }
    SotTranscript::new(tokens, speakers)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

