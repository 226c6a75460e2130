//! On-disk formats: WAV audio, JSON documents and safetensors bundles for
//! features, speaker profiles and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::autograd::ParamStore;
use crate::decoder::Vocab;
use crate::error::{Error, Result};
use crate::frontend::{FrontendInput, MagPhaseFeatureTensor, MelFeatureTensor, MultichannelWave};
use crate::model::{ModelConfig, SaAsrModel};
use crate::speaker::SpeakerProfileMatrix;

/// Writes 32-bit float WAV, one channel per microphone.
pub fn write_wav(path: &Path, wave: &MultichannelWave) -> Result<()> {
    let spec = hound::WavSpec {
        channels: wave.channels() as u16,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    let samples = wave.samples();
    for t in 0..wave.len() {
        for c in 0..wave.channels() {
            writer.write_sample(samples[[c, t]] as f32)?;
        }
    }
    writer.finalize()?;
    Ok(())
}

/// Reads float or integer PCM WAV, scaling integers to [-1, 1).
pub fn read_wav(path: &Path) -> Result<MultichannelWave> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    if channels == 0 || !interleaved.len().is_multiple_of(channels) {
        return Err(Error::format(format!("{}: truncated sample frames", path.display())));
    }
    let len = interleaved.len() / channels;
    let samples = Array2::from_shape_fn((channels, len), |(c, t)| interleaved[t * channels + c]);
    MultichannelWave::new(samples, spec.sample_rate)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Named f64 tensors plus string metadata, stored as safetensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorBundle {
    pub tensors: BTreeMap<String, ArrayD<f64>>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorBundle {
    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::format(format!("missing tensor `{name}`")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(format!("missing metadata `{key}`")))
    }

    pub fn meta_json<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        serde_json::from_str(self.meta(key)?).map_err(|e| Error::format(format!("metadata `{key}`: {e}")))
    }

    pub fn set_meta_json<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.metadata.insert(key.to_string(), serde_json::to_string(value)?);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec(), v.iter().flat_map(|x| x.to_le_bytes()).collect()))
            .collect();
        let views = raw
            .iter()
            .map(|(k, shape, bytes)| Ok((k.as_str(), TensorView::new(Dtype::F64, shape.clone(), bytes).map_err(st_err)?)))
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(views, Some(meta)).map_err(st_err)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(st_err)?;
        let st = SafeTensors::deserialize(bytes).map_err(st_err)?;
        let mut out = TensorBundle {
            metadata: header.metadata().clone().unwrap_or_default().into_iter().collect(),
            ..Default::default()
        };
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(Error::format(format!("tensor `{name}` is {:?}, expected F64", view.dtype())));
            }
            let values: Vec<f64> = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), values)
                .map_err(|e| Error::format(format!("tensor `{name}`: {e}")))?;
            out.tensors.insert(name, arr);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?).map_err(|e| match e {
            Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::format(e.to_string())
}

fn fixed<D: ndarray::Dimension>(name: &str, a: &ArrayD<f64>) -> Result<ndarray::Array<f64, D>> {
    a.clone()
        .into_dimensionality::<D>()
        .map_err(|_| Error::format(format!("tensor `{name}` has shape {:?}", a.shape())))
}

/// Frontend input and the channel-averaged speaker-encoder Mel of one mixture.
#[derive(Clone, Debug)]
pub struct FeatureFile {
    pub features: FrontendInput,
    pub speaker_mel: Array2<f64>,
}

impl FeatureFile {
    pub fn to_bundle(&self) -> Result<TensorBundle> {
        let mut b = TensorBundle::default();
        let (kind, values) = match &self.features {
            FrontendInput::Mel(m) => ("mel", m.values.clone().into_dyn()),
            FrontendInput::MagPhase(m) => ("magphase", m.values.clone().into_dyn()),
        };
        b.metadata.insert("kind".into(), kind.into());
        b.insert("features", values);
        b.insert("speaker_mel", self.speaker_mel.clone().into_dyn());
        Ok(b)
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        let raw = b.get("features")?;
        let features = match b.meta("kind")? {
            "mel" => FrontendInput::Mel(MelFeatureTensor {
                values: fixed::<ndarray::Ix3>("features", raw)?,
            }),
            "magphase" => FrontendInput::MagPhase(MagPhaseFeatureTensor {
                values: fixed::<ndarray::Ix4>("features", raw)?,
            }),
            other => return Err(Error::format(format!("unknown feature kind `{other}`"))),
        };
        Ok(Self {
            features,
            speaker_mel: fixed::<ndarray::Ix2>("speaker_mel", b.get("speaker_mel")?)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_bundle()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bundle(&TensorBundle::load(path)?)
    }
}

pub fn save_profiles(path: &Path, profiles: &SpeakerProfileMatrix) -> Result<()> {
    let mut b = TensorBundle::default();
    b.insert("profiles", profiles.matrix().clone().into_dyn());
    b.set_meta_json("speaker_ids", &profiles.speaker_ids())?;
    b.save(path)
}

pub fn load_profiles(path: &Path) -> Result<SpeakerProfileMatrix> {
    let b = TensorBundle::load(path)?;
    let matrix = fixed::<ndarray::Ix2>("profiles", b.get("profiles")?)?;
    SpeakerProfileMatrix::new(matrix, b.meta_json("speaker_ids")?).map_err(|e| Error::format(e.to_string()))
}

/// Parameters by name, with the model config and vocabulary as metadata.
pub fn save_checkpoint(path: &Path, model: &SaAsrModel, vocab: &Vocab) -> Result<()> {
    let mut b = TensorBundle::default();
    for (_, name, value) in model.store.iter() {
        b.insert(name, value.clone().into_dyn());
    }
    b.set_meta_json("config", &model.config)?;
    b.set_meta_json("vocab", &vocab.to_map())?;
    b.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(SaAsrModel, Vocab)> {
    let b = TensorBundle::load(path)?;
    let config: ModelConfig = b.meta_json("config")?;
    let vocab = Vocab::from_map(&b.meta_json("vocab")?)?;
    let mut params = ParamStore::new();
    for (name, value) in &b.tensors {
        params.insert(name.clone(), fixed::<ndarray::Ix2>(name, value)?);
    }
    let mut model = SaAsrModel::new(config)?;
    model.load_params(&params)?;
    Ok((model, vocab))
}

pub fn save_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    write_json(path, &vocab.to_map())
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    Vocab::from_map(&read_json(path)?)
}
