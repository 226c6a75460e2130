//! Waveform to encoder-input features: STFT, log-Mel and magnitude+phase
//! planes, depthwise-separable convolution stacks and the projection to the
//! model dimension.

mod conv;
mod mel;
mod stft;

pub use conv::{
    FrontendInput,
    project_to_model_dim, ConvFrontend, FeatureKind, FrontendFeatures, SeparableConv, CONV_CHANNELS,
};
pub use mel::{hz_to_mel, log_mel, mel_filterbank, mel_to_hz, MelFeatureTensor, LOG_FLOOR};
pub use stft::{mag_phase_features, stft, MagPhaseFeatureTensor, StftTensor};

use ndarray::Array2;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_WINDOW_MS: f64 = 25.0;
pub const DEFAULT_HOP_MS: f64 = 10.0;
pub const DEFAULT_N_MELS: usize = 80;

/// `C x L` PCM signal.
#[derive(Clone, Debug, PartialEq)]
pub struct MultichannelWave {
    samples: Array2<f64>,
    sample_rate: u32,
}

impl MultichannelWave {
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        let (c, l) = samples.dim();
        if c == 0 {
            return Err(Error::invalid("wave needs at least one channel"));
        }
        if l == 0 {
            return Err(Error::invalid("empty signal"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("wave contains non-finite samples"));
        }
        Ok(Self {
            samples: samples.as_standard_layout().into_owned(),
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let l = samples.len();
        Self::new(
            Array2::from_shape_vec((1, l), samples).map_err(|e| Error::shape(e.to_string()))?,
            sample_rate,
        )
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// Keeps the first `n` channels.
    pub fn take_channels(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.channels() {
            return Err(Error::invalid(format!(
                "cannot take {n} of {} channels",
                self.channels()
            )));
        }
        Self::new(self.samples.slice(ndarray::s![..n, ..]).to_owned(), self.sample_rate)
    }
}
