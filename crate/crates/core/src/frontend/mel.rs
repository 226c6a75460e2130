use ndarray::{Array2, Array3};

use super::StftTensor;
use crate::error::{Error, Result};

/// Added inside the log so silence maps to `ln(1e-10)`.
pub const LOG_FLOOR: f64 = 1e-10;

/// `C x T x M` log Mel energies.
#[derive(Clone, Debug)]
pub struct MelFeatureTensor {
    pub values: Array3<f64>,
}

impl MelFeatureTensor {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn frames(&self) -> usize {
        self.values.dim().1
    }

    pub fn n_mels(&self) -> usize {
        self.values.dim().2
    }

    /// Mean over channels, `T x M`.
    pub fn channel_mean(&self) -> Array2<f64> {
        self.values
            .mean_axis(ndarray::Axis(0))
            .expect("at least one channel")
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `n_mels x (n_fft/2 + 1)` triangular filters with unit peaks, centres
/// equally spaced on the HTK Mel scale between 0 Hz and Nyquist.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Array2<f64> {
    let bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    Array2::from_shape_fn((n_mels, bins), |(m, g)| {
        let f = g as f64 * sample_rate as f64 / n_fft as f64;
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let rise = (f - lo) / (c - lo);
        let fall = (hi - f) / (hi - c);
        rise.min(fall).max(0.0)
    })
}

/// `ln(filterbank . magnitude + 1e-10)` per channel and frame.
pub fn log_mel(spec: &StftTensor, n_mels: usize) -> Result<MelFeatureTensor> {
    let bins = spec.bins();
    if n_mels == 0 {
        return Err(Error::invalid("n_mels must be at least 1"));
    }
    if n_mels > bins {
        return Err(Error::invalid(format!(
            "n_mels = {n_mels} exceeds the {bins} frequency bins"
        )));
    }
    let fb = mel_filterbank(n_mels, spec.n_fft, spec.sample_rate);
    let (c, t, _) = spec.magnitude.dim();
    let mut values = Array3::zeros((c, t, n_mels));
    for ci in 0..c {
        let mag = spec.magnitude.index_axis(ndarray::Axis(0), ci);
        let energies = mag.dot(&fb.t());
        values
            .index_axis_mut(ndarray::Axis(0), ci)
            .assign(&energies.mapv(|e| (e + LOG_FLOOR).ln()));
    }
    Ok(MelFeatureTensor { values })
}
