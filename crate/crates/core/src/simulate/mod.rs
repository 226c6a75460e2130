//! Simulated multichannel multi-speaker recordings.

mod mix;
mod rir;
mod room;
mod speech;

pub use mix::{fft_convolve, mix_with_delays, sample_offsets, DelayedSource};
pub use rir::{
    adaptive_max_order, add_fractional_impulse, enumerate_images, estimate_rt60, image_source_rir, schroeder_curve,
    highpass_rir, image_lattice_absorption, room_rir, rt60_from_energy, ImageSource, SINC_TAPS, SPEED_OF_SOUND,
};
pub use room::{
    check_scene, distance, rt60_to_absorption, AbsorptionModel, sample_room, ArrayGeometry, Point3, RoomSampling, RoomSpec,
    SourcePlacement,
};
pub use speech::{sample_sentence, speaker_pool, ToySynth, Voice, TOY_LEXICON};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::MultichannelWave;
use crate::sot::{serialize_fifo, SotTranscript, Utterance};
use crate::speaker::{build_profile_matrix, EnrollmentEmbedder, SpeakerProfileMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub room: RoomSampling,
    pub n_mics: usize,
    pub min_speakers: usize,
    pub max_speakers: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub pool_size: usize,
    pub enrollments_per_speaker: usize,
    /// RIR length in seconds; the room's RT60 when unset.
    pub rir_duration_s: Option<f64>,
    /// Reflection order; chosen from the RIR length when unset.
    pub max_order: Option<usize>,
    /// Peak level of the mixture after normalisation.
    pub peak: f64,
    pub synth: ToySynth,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            room: RoomSampling::default(),
            n_mics: 4,
            min_speakers: 1,
            max_speakers: 3,
            min_words: 2,
            max_words: 5,
            pool_size: 8,
            enrollments_per_speaker: 2,
            rir_duration_s: None,
            max_order: None,
            peak: 0.5,
            synth: ToySynth::default(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.n_mics) {
            return Err(Error::invalid(format!("arrays have 2 to 4 microphones, got {}", self.n_mics)));
        }
        if self.min_speakers == 0 || self.min_speakers > self.max_speakers || self.max_speakers > self.pool_size {
            return Err(Error::invalid("speaker count range must be within 1..=pool size"));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::invalid("word count range must be non-empty"));
        }
        if self.enrollments_per_speaker == 0 {
            return Err(Error::invalid("each speaker needs at least one enrollment sentence"));
        }
        Ok(())
    }
}

/// Everything needed to regenerate and score one mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureManifest {
    pub id: String,
    pub rng_seed: u64,
    pub sample_rate: u32,
    pub room: RoomSpec,
    pub array: ArrayGeometry,
    /// In onset order.
    pub sources: Vec<SourcePlacement>,
    pub utterances: Vec<Utterance>,
    pub n_speakers: usize,
    pub profile_pool: Vec<String>,
    pub max_order: usize,
    pub rir_samples: usize,
}

impl MixtureManifest {
    pub fn validate(&self, cfg: &RoomSampling) -> Result<()> {
        let positions: Vec<Point3> = self.sources.iter().map(|s| s.position).collect();
        let problems = check_scene(cfg, &self.room, &self.array, &positions);
        if !problems.is_empty() {
            return Err(Error::invalid(problems.join("; ")));
        }
        if self.utterances.windows(2).any(|w| w[1].start_s <= w[0].start_s) {
            return Err(Error::invalid("utterance onsets must strictly increase"));
        }
        if self.n_speakers != self.sources.len() || !(1..=3).contains(&self.n_speakers) {
            return Err(Error::invalid(format!("{} speakers", self.n_speakers)));
        }
        Ok(())
    }
}

/// Speaker voices plus the sentences used to enroll them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerPool {
    pub voices: Vec<Voice>,
    pub enrollment_sentences: Vec<Vec<Vec<String>>>,
}

impl SpeakerPool {
    pub fn new(cfg: &SimulationConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let voices = speaker_pool(&mut rng, cfg.pool_size);
        let enrollment_sentences = voices
            .iter()
            .map(|_| {
                (0..cfg.enrollments_per_speaker)
                    .map(|_| {
                        let n = rng.random_range(cfg.min_words..=cfg.max_words);
                        sample_sentence(&mut rng, &TOY_LEXICON, n)
                    })
                    .collect()
            })
            .collect();
        Self {
            voices,
            enrollment_sentences,
        }
    }

    pub fn speaker_ids(&self) -> Vec<String> {
        self.voices.iter().map(|v| v.speaker_id.clone()).collect()
    }

    /// Dry mono enrollment recordings, per speaker.
    pub fn enrollment_waves(&self, synth: &ToySynth) -> Result<Vec<(String, Vec<MultichannelWave>)>> {
        self.voices
            .iter()
            .zip(&self.enrollment_sentences)
            .map(|(voice, sentences)| {
                let waves = sentences
                    .iter()
                    .map(|s| MultichannelWave::mono(synth.synthesize(s, voice), synth.sample_rate))
                    .collect::<Result<Vec<_>>>()?;
                Ok((voice.speaker_id.clone(), waves))
            })
            .collect()
    }

    /// Mean of each speaker's enrollment embeddings, normalised.
    pub fn profiles(&self, synth: &ToySynth, embedder: &EnrollmentEmbedder) -> Result<SpeakerProfileMatrix> {
        let enrollments = self
            .enrollment_waves(synth)?
            .into_iter()
            .map(|(id, waves)| {
                let embs = waves.iter().map(|w| embedder.embed(w)).collect::<Result<Vec<_>>>()?;
                Ok((id, embs))
            })
            .collect::<Result<Vec<_>>>()?;
        build_profile_matrix(&enrollments)
    }
}

#[derive(Clone, Debug)]
pub struct SimulatedMixture {
    pub manifest: MixtureManifest,
    pub wave: MultichannelWave,
    pub transcript: SotTranscript,
}

/// Samples a scene and speakers from `seed`, renders every source through
/// its RIRs and mixes them with FIFO onsets.
pub fn simulate_mixture(
    cfg: &SimulationConfig,
    pool: &SpeakerPool,
    id: &str,
    seed: u64,
) -> Result<SimulatedMixture> {
    let manifest = sample_manifest(cfg, pool, id, seed)?;
    let (wave, transcript) = render_manifest(cfg, pool, &manifest)?;
    Ok(SimulatedMixture {
        manifest,
        wave,
        transcript,
    })
}

/// The declarative part of a mixture: scene, speakers, words and onsets.
pub fn sample_manifest(cfg: &SimulationConfig, pool: &SpeakerPool, id: &str, seed: u64) -> Result<MixtureManifest> {
    cfg.validate()?;
    if pool.voices.len() < cfg.max_speakers {
        return Err(Error::invalid("speaker pool smaller than the maximum speaker count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_speakers = rng.random_range(cfg.min_speakers..=cfg.max_speakers);
    let (room, array, positions) = sample_room(&mut rng, &cfg.room, cfg.n_mics, n_speakers)?;
    let mut chosen: Vec<usize> = (0..pool.voices.len()).collect();
    chosen.shuffle(&mut rng);
    chosen.truncate(n_speakers);
    let sentences: Vec<Vec<String>> = chosen
        .iter()
        .map(|_| {
            let n = rng.random_range(cfg.min_words..=cfg.max_words);
            sample_sentence(&mut rng, &TOY_LEXICON, n)
        })
        .collect();
    let synth = &cfg.synth;
    let fs = synth.sample_rate as f64;
    let durations: Vec<f64> = sentences.iter().map(|s| synth.duration_s(s.len())).collect();
    let offsets = sample_offsets(&mut rng, &durations);
    let mut starts: Vec<usize> = Vec::with_capacity(n_speakers);
    for off in offsets {
        let s = (off * fs).round() as usize;
        starts.push(match starts.last() {
            Some(&prev) if s <= prev => prev + 1,
            _ => s,
        });
    }
    let sources = chosen
        .iter()
        .zip(&positions)
        .map(|(&v, &p)| SourcePlacement {
            position: p,
            speaker_id: pool.voices[v].speaker_id.clone(),
        })
        .collect();
    let utterances = chosen
        .iter()
        .zip(&sentences)
        .zip(&starts)
        .zip(&durations)
        .map(|(((&v, words), &start), &dur)| Utterance {
            speaker_id: pool.voices[v].speaker_id.clone(),
            start_s: start as f64 / fs,
            end_s: start as f64 / fs + dur,
            words: words.clone(),
        })
        .collect();
    let rir_duration = cfg.rir_duration_s.unwrap_or(room.rt60_s);
    let max_order = cfg.max_order.unwrap_or_else(|| adaptive_max_order(&room, rir_duration));
    Ok(MixtureManifest {
        id: id.to_string(),
        rng_seed: seed,
        sample_rate: synth.sample_rate,
        room,
        array,
        sources,
        utterances,
        n_speakers,
        profile_pool: pool.speaker_ids(),
        max_order,
        rir_samples: (rir_duration * fs).round().max(1.0) as usize,
    })
}

/// Renders the audio and reference transcript of a manifest.
pub fn render_manifest(
    cfg: &SimulationConfig,
    pool: &SpeakerPool,
    manifest: &MixtureManifest,
) -> Result<(MultichannelWave, SotTranscript)> {
    let synth = &cfg.synth;
    let fs = manifest.sample_rate as f64;
    let mut sources = Vec::with_capacity(manifest.sources.len());
    let mut rirs = Vec::with_capacity(manifest.sources.len());
    for (src, utt) in manifest.sources.iter().zip(&manifest.utterances) {
        let voice = pool
            .voices
            .iter()
            .find(|v| v.speaker_id == src.speaker_id)
            .ok_or_else(|| Error::invalid(format!("speaker `{}` is not in the pool", src.speaker_id)))?;
        sources.push(DelayedSource {
            signal: synth.synthesize(&utt.words, voice),
            start_sample: (utt.start_s * fs).round() as usize,
        });
        rirs.push(
            manifest
                .array
                .mic_positions
                .iter()
                .map(|&mic| {
                    room_rir(
                        &manifest.room,
                        src.position,
                        mic,
                        manifest.sample_rate,
                        manifest.max_order,
                        manifest.rir_samples,
                    )
                })
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let wave = mix_with_delays(&sources, &rirs, manifest.sample_rate)?;
    let peak = wave.samples().fold(0.0f64, |m, v| m.max(v.abs()));
    let wave = if peak > 0.0 {
        MultichannelWave::new(wave.samples() * (cfg.peak / peak), manifest.sample_rate)?
    } else {
        wave
    };
    let transcript = serialize_fifo(&manifest.utterances)?;
    Ok((wave, transcript))
}
